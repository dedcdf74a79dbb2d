//! CT volumes, binary masks and 2D slices.
//!
//! Volumes are stored x-fastest (NIfTI order), so an axial slice `z` is a
//! contiguous row-major image with `rows = ny` and `cols = nx`.

mod label;
mod nifti;
mod preprocess;

pub use label::{label_components, largest_component, Components};
pub use nifti::{
    decode_nifti, encode_nifti, mask_from_volume, read_mask, read_nifti, write_mask, write_nifti,
    NIFTI_HEADER_SIZE, NIFTI_MAGIC,
};
pub use preprocess::{
    body_bbox, mask_bbox, normalize_hu, preprocess_case, resize_mask_slice, resize_slice,
    restore_mask, BoundingBox, CropRecord, CropRule, HuWindow, PreprocSpec, PreprocessedCase,
    BODY_THRESHOLD_HU,
};

use crate::error::{Error, Result};

/// Lowest and highest representable CT numbers.
pub const HU_MIN: f64 = -1024.0;
pub const HU_MAX: f64 = 3071.0;

/// On-disk voxel representation preferred when the volume is written.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VoxelType {
    Int16,
    Float32,
}

/// Row-major 2D image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Copy> Image2<T> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::shape(format!(
                "{} values for a {rows}x{cols} image",
                data.len()
            )));
        }
        Ok(Image2 { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Image2 {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }
}

/// Scalar volume (HU, or normalized intensities after preprocessing).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    data: Vec<f64>,
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub storage: VoxelType,
}

fn check_geometry(dims: [usize; 3], len: usize, spacing: [f64; 3]) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::shape(format!("volume extents must be positive, got {dims:?}")));
    }
    if dims.iter().product::<usize>() != len {
        return Err(Error::shape(format!("{len} voxels for grid {dims:?}")));
    }
    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::config(format!("voxel spacing must be positive, got {spacing:?}")));
    }
    Ok(())
}

impl Volume {
    pub fn new(dims: [usize; 3], data: Vec<f64>, spacing: [f64; 3]) -> Result<Self> {
        check_geometry(dims, data.len(), spacing)?;
        Ok(Volume {
            dims,
            data,
            spacing,
            origin: [0.0; 3],
            storage: VoxelType::Float32,
        })
    }

    pub fn filled(dims: [usize; 3], value: f64, spacing: [f64; 3]) -> Result<Self> {
        Self::new(dims, vec![value; dims.iter().product()], spacing)
    }

    pub fn with_storage(mut self, storage: VoxelType) -> Self {
        self.storage = storage;
        self
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f64) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    /// Axial slice `z` as a `ny × nx` image.
    pub fn slice(&self, z: usize) -> Image2<f64> {
        let plane = self.dims[0] * self.dims[1];
        Image2::from_vec(self.dims[1], self.dims[0], self.data[z * plane..(z + 1) * plane].to_vec())
            .expect("plane size")
    }

    /// Stacks equally sized axial slices.
    pub fn from_slices(slices: &[Image2<f64>], spacing: [f64; 3]) -> Result<Self> {
        let first = slices.first().ok_or_else(|| Error::shape("no slices to stack"))?;
        let (rows, cols) = (first.rows(), first.cols());
        let mut data = Vec::with_capacity(rows * cols * slices.len());
        for s in slices {
            if s.rows() != rows || s.cols() != cols {
                return Err(Error::shape("slices differ in size"));
            }
            data.extend_from_slice(s.data());
        }
        Volume::new([cols, rows, slices.len()], data, spacing)
    }

    /// Checks every voxel lies in the representable HU range.
    pub fn check_hu_range(&self) -> Result<()> {
        match self.data.iter().position(|v| !(HU_MIN..=HU_MAX).contains(v)) {
            None => Ok(()),
            Some(i) => Err(Error::data(format!(
                "voxel {i} has value {} outside [{HU_MIN}, {HU_MAX}] HU",
                self.data[i]
            ))),
        }
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing.iter().product()
    }
}

/// Boolean volume aligned to a [`Volume`] grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    dims: [usize; 3],
    data: Vec<bool>,
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl BinaryMask {
    pub fn new(dims: [usize; 3], data: Vec<bool>, spacing: [f64; 3]) -> Result<Self> {
        check_geometry(dims, data.len(), spacing)?;
        Ok(BinaryMask {
            dims,
            data,
            spacing,
            origin: [0.0; 3],
        })
    }

    pub fn empty(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        Self::new(dims, vec![false; dims.iter().product()], spacing)
    }

    /// All-true mask over the same grid as `volume`.
    pub fn full_like(volume: &Volume) -> Self {
        BinaryMask {
            dims: volume.dims(),
            data: vec![true; volume.len()],
            spacing: volume.spacing,
            origin: volume.origin,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: bool) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    pub fn slice(&self, z: usize) -> Image2<bool> {
        let plane = self.dims[0] * self.dims[1];
        Image2::from_vec(self.dims[1], self.dims[0], self.data[z * plane..(z + 1) * plane].to_vec())
            .expect("plane size")
    }

    pub fn from_slices(slices: &[Image2<bool>], spacing: [f64; 3]) -> Result<Self> {
        let first = slices.first().ok_or_else(|| Error::shape("no slices to stack"))?;
        let (rows, cols) = (first.rows(), first.cols());
        let mut data = Vec::with_capacity(rows * cols * slices.len());
        for s in slices {
            if s.rows() != rows || s.cols() != cols {
                return Err(Error::shape("slices differ in size"));
            }
            data.extend_from_slice(s.data());
        }
        BinaryMask::new([cols, rows, slices.len()], data, spacing)
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing.iter().product()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slice_layout_is_x_fastest() {
        let data: Vec<f64> = (0..2 * 3 * 2).map(f64::from).collect();
        let v = Volume::new([2, 3, 2], data, [1.0; 3]).unwrap();
        assert_eq!(v.get(1, 2, 1), 11.0);
        let s = v.slice(1);
        assert_eq!((s.rows(), s.cols()), (3, 2));
        assert_eq!(s.get(2, 1), 11.0);
        let back = Volume::from_slices(&[v.slice(0), v.slice(1)], [1.0; 3]).unwrap();
        assert_eq!(back.data(), v.data());
    }

    #[test]
    fn geometry_checks() {
        assert!(Volume::new([2, 2, 2], vec![0.0; 7], [1.0; 3]).is_err());
        assert!(matches!(Volume::filled([2, 2, 2], 0.0, [1.0, 0.0, 1.0]), Err(Error::Config(_))));
        assert!(BinaryMask::empty([0, 2, 2], [1.0; 3]).is_err());
    }

    #[test]
    fn hu_range() {
        let mut v = Volume::filled([2, 2, 1], -1000.0, [1.0; 3]).unwrap();
        assert!(v.check_hu_range().is_ok());
        v.set(1, 1, 0, -1030.0);
        assert!(v.check_hu_range().is_err());
    }
}
