//! Crop, resample and intensity-normalize CT volumes for the network.

use super::label::largest_component;
use super::{BinaryMask, Image2, Volume, VoxelType};
use crate::error::{Error, Result};
use crate::kv::KeyValues;

/// Voxels above this value count as body when locating the crop box.
pub const BODY_THRESHOLD_HU: f64 = -500.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HuWindow {
    pub low: f64,
    pub high: f64,
}

impl Default for HuWindow {
    fn default() -> Self {
        HuWindow {
            low: -1024.0,
            high: 400.0,
        }
    }
}

impl HuWindow {
    fn validate(&self) -> Result<()> {
        if !(self.low < self.high) {
            return Err(Error::config(format!(
                "HU window low {} must be below high {}",
                self.low, self.high
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn apply(&self, hu: f64) -> f64 {
        (hu.clamp(self.low, self.high) - self.low) / (self.high - self.low)
    }
}

/// Which box a case is cropped to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropRule {
    /// Reference-mask box plus margin when a mask is given, body box otherwise.
    ReferenceMaskIfPresent,
    /// Always the body box, even when a reference mask is available.
    Body,
}

impl CropRule {
    fn as_str(self) -> &'static str {
        match self {
            CropRule::ReferenceMaskIfPresent => "reference-mask",
            CropRule::Body => "body",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreprocSpec {
    pub target_rows: usize,
    pub target_cols: usize,
    pub window: HuWindow,
    pub crop_margin_vox: usize,
    pub crop_rule: CropRule,
}

impl Default for PreprocSpec {
    fn default() -> Self {
        PreprocSpec {
            target_rows: 296,
            target_cols: 216,
            window: HuWindow::default(),
            crop_margin_vox: 5,
            crop_rule: CropRule::ReferenceMaskIfPresent,
        }
    }
}

/// Half-open voxel box `[lo, hi)` per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl BoundingBox {
    pub fn extent(&self) -> [usize; 3] {
        [self.hi[0] - self.lo[0], self.hi[1] - self.lo[1], self.hi[2] - self.lo[2]]
    }

    pub fn contains_box(&self, other: &BoundingBox) -> bool {
        (0..3).all(|a| other.lo[a] >= self.lo[a] && other.hi[a] <= self.hi[a])
    }

    fn dilated(&self, margin: usize, dims: [usize; 3]) -> BoundingBox {
        let mut out = *self;
        for a in 0..3 {
            out.lo[a] = self.lo[a].saturating_sub(margin);
            out.hi[a] = (self.hi[a] + margin).min(dims[a]);
        }
        out
    }

    /// Tight box around the set voxels of an x-fastest grid.
    fn of_set(set: &[bool], dims: [usize; 3]) -> Option<BoundingBox> {
        let mut lo = dims;
        let mut hi = [0; 3];
        let mut any = false;
        for (i, _) in set.iter().enumerate().filter(|(_, &b)| b) {
            let p = [i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1])];
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a] + 1);
            }
            any = true;
        }
        any.then_some(BoundingBox { lo, hi })
    }
}

/// Box around the largest face-connected body component, dilated by
/// `margin` voxels and clipped to the grid.
pub fn body_bbox(volume: &Volume, margin: usize) -> Result<BoundingBox> {
    let body: Vec<bool> = volume.data().iter().map(|&v| v > BODY_THRESHOLD_HU).collect();
    let largest = largest_component(&body, volume.dims()).ok_or(Error::NoBodyFound)?;
    let tight = BoundingBox::of_set(&largest, volume.dims()).ok_or(Error::NoBodyFound)?;
    Ok(tight.dilated(margin, volume.dims()))
}

pub fn mask_bbox(mask: &BinaryMask, margin: usize) -> Result<BoundingBox> {
    let tight = BoundingBox::of_set(mask.data(), mask.dims())
        .ok_or_else(|| Error::data("reference mask is empty"))?;
    Ok(tight.dilated(margin, mask.dims()))
}

fn check_resize(rows_in: usize, cols_in: usize, rows: usize, cols: usize) -> Result<()> {
    if rows == 0 || cols == 0 {
        return Err(Error::config(format!("resize target {rows}x{cols} must be positive")));
    }
    if rows_in < 2 || cols_in < 2 {
        return Err(Error::shape(format!("resize source {rows_in}x{cols_in} is smaller than 2x2")));
    }
    Ok(())
}

/// Source coordinate of destination pixel centre `i` (half-pixel alignment).
#[inline]
fn source_coord(i: usize, n_in: usize, n_out: usize) -> f64 {
    (i as f64 + 0.5) * (n_in as f64 / n_out as f64) - 0.5
}

/// Interpolation taps `(i0, i1, t)` along one axis with edge clamping.
fn linear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            let s = source_coord(i, n_in, n_out).clamp(0.0, (n_in - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

fn nearest_taps(n_in: usize, n_out: usize) -> Vec<usize> {
    (0..n_out)
        .map(|i| {
            let s = (i as f64 + 0.5) * (n_in as f64 / n_out as f64);
            (s.floor() as usize).min(n_in - 1)
        })
        .collect()
}

/// Bilinear resampling with half-pixel centres and clamped edges.
pub fn resize_slice(img: &Image2<f64>, rows: usize, cols: usize) -> Result<Image2<f64>> {
    check_resize(img.rows(), img.cols(), rows, cols)?;
    let ry = linear_taps(img.rows(), rows);
    let rx = linear_taps(img.cols(), cols);
    let mut out = Vec::with_capacity(rows * cols);
    for &(y0, y1, ty) in &ry {
        for &(x0, x1, tx) in &rx {
            let top = img.get(y0, x0) + (img.get(y0, x1) - img.get(y0, x0)) * tx;
            let bottom = img.get(y1, x0) + (img.get(y1, x1) - img.get(y1, x0)) * tx;
            out.push(top + (bottom - top) * ty);
        }
    }
    Image2::from_vec(rows, cols, out)
}

/// Nearest-neighbour resampling under the same coordinate mapping.
pub fn resize_mask_slice(img: &Image2<bool>, rows: usize, cols: usize) -> Result<Image2<bool>> {
    if rows == 0 || cols == 0 {
        return Err(Error::config(format!("resize target {rows}x{cols} must be positive")));
    }
    let ry = nearest_taps(img.rows(), rows);
    let rx = nearest_taps(img.cols(), cols);
    let mut out = Vec::with_capacity(rows * cols);
    for &y in &ry {
        for &x in &rx {
            out.push(img.get(y, x));
        }
    }
    Image2::from_vec(rows, cols, out)
}

/// Clips to the window and maps it linearly onto [0, 1].
pub fn normalize_hu(volume: &Volume, window: HuWindow) -> Result<Volume> {
    window.validate()?;
    let mut out = volume.clone().with_storage(VoxelType::Float32);
    for v in out.data_mut() {
        *v = window.apply(*v);
    }
    Ok(out)
}

/// Geometry needed to map preprocessed slices back onto the original grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CropRecord {
    pub original_dims: [usize; 3],
    pub original_spacing: [f64; 3],
    pub original_origin: [f64; 3],
    pub bbox: BoundingBox,
    pub target_rows: usize,
    pub target_cols: usize,
    pub window: HuWindow,
    pub crop_rule: CropRule,
}

impl CropRecord {
    /// Voxel spacing of the preprocessed grid in mm.
    pub fn preprocessed_spacing(&self) -> [f64; 3] {
        let e = self.bbox.extent();
        [
            self.original_spacing[0] * e[0] as f64 / self.target_cols as f64,
            self.original_spacing[1] * e[1] as f64 / self.target_rows as f64,
            self.original_spacing[2],
        ]
    }

    pub fn to_text(&self) -> String {
        fn join<T: ToString>(v: &[T]) -> String {
            v.iter().map(T::to_string).collect::<Vec<_>>().join(" ")
        }
        let mut kv = KeyValues::default();
        kv.insert("original_dims", join(&self.original_dims));
        kv.insert("original_spacing", join(&self.original_spacing));
        kv.insert("original_origin", join(&self.original_origin));
        kv.insert("bbox_lo", join(&self.bbox.lo));
        kv.insert("bbox_hi", join(&self.bbox.hi));
        kv.insert("target_rows", self.target_rows);
        kv.insert("target_cols", self.target_cols);
        kv.insert("hu_window", join(&[self.window.low, self.window.high]));
        kv.insert("crop_rule", self.crop_rule.as_str());
        kv.to_text()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        fn arr<T: Copy + Default + std::str::FromStr>(kv: &KeyValues, key: &str) -> Result<[T; 3]> {
            let v: Vec<T> = kv.list(key)?;
            v.try_into()
                .map_err(|_| Error::config(format!("{key} needs three values")))
        }
        let kv = KeyValues::parse(text)?;
        let window: Vec<f64> = kv.list("hu_window")?;
        if window.len() != 2 {
            return Err(Error::config("hu_window needs two values"));
        }
        let crop_rule = match kv.raw("crop_rule") {
            Some("reference-mask") => CropRule::ReferenceMaskIfPresent,
            Some("body") => CropRule::Body,
            other => return Err(Error::config(format!("crop_rule {other:?}"))),
        };
        let rec = CropRecord {
            original_dims: arr(&kv, "original_dims")?,
            original_spacing: arr(&kv, "original_spacing")?,
            original_origin: arr(&kv, "original_origin")?,
            bbox: BoundingBox {
                lo: arr(&kv, "bbox_lo")?,
                hi: arr(&kv, "bbox_hi")?,
            },
            target_rows: kv.require("target_rows")?,
            target_cols: kv.require("target_cols")?,
            window: HuWindow {
                low: window[0],
                high: window[1],
            },
            crop_rule,
        };
        if (0..3).any(|a| rec.bbox.lo[a] >= rec.bbox.hi[a] || rec.bbox.hi[a] > rec.original_dims[a]) {
            return Err(Error::config("crop box outside the original grid"));
        }
        Ok(rec)
    }
}

/// A case on the network's grid: `target_rows × target_cols` axial slices.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessedCase {
    /// Intensities normalized to [0, 1].
    pub image: Volume,
    /// Resampled HU values before normalization.
    pub hu: Volume,
    pub mask: Option<BinaryMask>,
    pub crop: CropRecord,
}

impl PreprocessedCase {
    pub fn slice_count(&self) -> usize {
        self.image.dims()[2]
    }
}

fn crop_slice<T: Copy>(img: &Image2<T>, bbox: &BoundingBox) -> Image2<T> {
    let [nx, ny, _] = bbox.extent();
    let mut out = Vec::with_capacity(nx * ny);
    for y in bbox.lo[1]..bbox.hi[1] {
        for x in bbox.lo[0]..bbox.hi[0] {
            out.push(img.get(y, x));
        }
    }
    Image2::from_vec(ny, nx, out).expect("crop size")
}

/// Crops, resamples every axial slice to the target size and normalizes.
pub fn preprocess_case(
    volume: &Volume,
    mask: Option<&BinaryMask>,
    spec: &PreprocSpec,
) -> Result<PreprocessedCase> {
    spec.window.validate()?;
    if spec.target_rows == 0 || spec.target_cols == 0 {
        return Err(Error::config("preprocessing targets must be positive"));
    }
    volume.check_hu_range()?;
    if let Some(m) = mask {
        if m.dims() != volume.dims() {
            return Err(Error::shape(format!(
                "mask grid {:?} differs from volume grid {:?}",
                m.dims(),
                volume.dims()
            )));
        }
    }
    let bbox = match (spec.crop_rule, mask) {
        (CropRule::ReferenceMaskIfPresent, Some(m)) => mask_bbox(m, spec.crop_margin_vox)?,
        _ => body_bbox(volume, spec.crop_margin_vox)?,
    };
    let crop = CropRecord {
        original_dims: volume.dims(),
        original_spacing: volume.spacing,
        original_origin: volume.origin,
        bbox,
        target_rows: spec.target_rows,
        target_cols: spec.target_cols,
        window: spec.window,
        crop_rule: spec.crop_rule,
    };
    let spacing = crop.preprocessed_spacing();
    let (rows, cols) = (spec.target_rows, spec.target_cols);

    let mut hu_slices = Vec::new();
    let mut mask_slices = Vec::new();
    for z in bbox.lo[2]..bbox.hi[2] {
        let cropped = crop_slice(&volume.slice(z), &bbox);
        hu_slices.push(resize_slice(&cropped, rows, cols)?);
        if let Some(m) = mask {
            mask_slices.push(resize_mask_slice(&crop_slice(&m.slice(z), &bbox), rows, cols)?);
        }
    }
    let mut hu = Volume::from_slices(&hu_slices, spacing)?;
    let origin = [
        volume.origin[0] + bbox.lo[0] as f64 * volume.spacing[0],
        volume.origin[1] + bbox.lo[1] as f64 * volume.spacing[1],
        volume.origin[2] + bbox.lo[2] as f64 * volume.spacing[2],
    ];
    hu.origin = origin;
    let image = normalize_hu(&hu, spec.window)?;
    let mask = if mask.is_some() {
        let mut m = BinaryMask::from_slices(&mask_slices, spacing)?;
        m.origin = origin;
        Some(m)
    } else {
        None
    };
    Ok(PreprocessedCase { image, hu, mask, crop })
}

/// Maps a mask on the preprocessed grid back onto the original grid by
/// nearest-neighbour resampling; voxels outside the crop box are false.
pub fn restore_mask(mask: &BinaryMask, crop: &CropRecord) -> Result<BinaryMask> {
    let e = crop.bbox.extent();
    if mask.dims() != [crop.target_cols, crop.target_rows, e[2]] {
        return Err(Error::shape(format!(
            "mask grid {:?} does not match crop record",
            mask.dims()
        )));
    }
    let mut out = BinaryMask::empty(crop.original_dims, crop.original_spacing)?;
    out.origin = crop.original_origin;
    for k in 0..e[2] {
        let back = resize_mask_slice(&mask.slice(k), e[1], e[0])?;
        let z = crop.bbox.lo[2] + k;
        for y in 0..e[1] {
            for x in 0..e[0] {
                out.set(crop.bbox.lo[0] + x, crop.bbox.lo[1] + y, z, back.get(y, x));
            }
        }
    }
    Ok(out)
}
