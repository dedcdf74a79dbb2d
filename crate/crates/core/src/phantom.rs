//! Seeded synthetic chest phantoms with analytically known lung masks.
//!
//! Each axial slice holds a soft-tissue body ellipse with two lung
//! ellipses, a posterior spine and an anterior sternum, and a central
//! air-filled airway tube. Lung density varies linearly from the anterior
//! to the posterior edge of each lung. The COVID-like cohort adds
//! peripheral lesions (unions of spheres, ground-glass or consolidation
//! density) that stay inside the lungs and belong to the reference mask.
//!
//! Three independent random streams are derived from the case seed
//! (anatomy, lesions, noise), so a normal and a COVID-like case with the
//! same seed share anatomy and noise and differ only by their lesions.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{write_mask, write_nifti, BinaryMask, Volume, VoxelType, HU_MAX, HU_MIN};

const STREAM_ANATOMY: u64 = 0;
const STREAM_LESIONS: u64 = 1;
const STREAM_NOISE: u64 = 2;

/// Lesion centres sit within this fraction of the lung radius from the
/// lung boundary, measured along the ray from the lung centre.
pub const PERIPHERAL_SHELL: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cohort {
    Normal,
    Covid,
}

impl Cohort {
    pub fn as_str(self) -> &'static str {
        match self {
            Cohort::Normal => "normal",
            Cohort::Covid => "covid",
        }
    }
}

impl fmt::Display for Cohort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Cohort {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Cohort::Normal),
            "covid" => Ok(Cohort::Covid),
            other => Err(Error::data(format!("unknown cohort {other:?}"))),
        }
    }
}

/// Closed HU interval sampled uniformly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HuRange {
    pub low: f64,
    pub high: f64,
}

impl HuRange {
    pub const fn new(low: f64, high: f64) -> Self {
        HuRange { low, high }
    }

    pub fn contains(&self, v: f64) -> bool {
        (self.low..=self.high).contains(&v)
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        self.low + (self.high - self.low) * rng.random::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub cohort: Cohort,
    /// Inclusive lesion count range for the COVID-like cohort.
    pub lesion_count: (usize, usize),
    pub ggo_hu: HuRange,
    pub consolidation_hu: HuRange,
    pub air_hu: f64,
    pub parenchyma_hu: HuRange,
    pub soft_tissue_hu: HuRange,
    pub bone_hu: HuRange,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [128, 128, 24],
            spacing: [1.5, 1.5, 5.0],
            cohort: Cohort::Normal,
            lesion_count: (1, 6),
            ggo_hu: HuRange::new(-500.0, -300.0),
            consolidation_hu: HuRange::new(-20.0, 60.0),
            air_hu: -1000.0,
            parenchyma_hu: HuRange::new(-880.0, -700.0),
            soft_tissue_hu: HuRange::new(20.0, 60.0),
            bone_hu: HuRange::new(300.0, 700.0),
            noise_sigma: 15.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    fn validate(&self) -> Result<()> {
        let [nx, ny, nz] = self.dims;
        if nx < 32 || ny < 32 || nz < 8 {
            return Err(Error::config(format!(
                "phantom grid {:?} is smaller than 32x32x8",
                self.dims
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::config("phantom spacing must be positive"));
        }
        if self.lesion_count.0 > self.lesion_count.1 {
            return Err(Error::config("lesion count range is inverted"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config("noise sigma must be non-negative"));
        }
        for r in [self.ggo_hu, self.consolidation_hu, self.parenchyma_hu, self.soft_tissue_hu, self.bone_hu] {
            if !(r.low <= r.high) || r.low < HU_MIN || r.high > HU_MAX {
                return Err(Error::config(format!("HU range {r:?} is invalid")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LesionKind {
    GroundGlass,
    Consolidation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lesion {
    pub kind: LesionKind,
    pub hu: f64,
    /// 0 = lung at lower x, 1 = lung at higher x.
    pub lung: usize,
    /// Centre in voxel coordinates.
    pub center: [f64; 3],
    /// Distance from centre to lung boundary along the centroid ray, as a
    /// fraction of the lung radius along that ray.
    pub boundary_fraction: f64,
    /// Sphere centres (voxel coordinates) and radii in mm.
    pub spheres: Vec<([f64; 3], f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomCase {
    pub volume: Volume,
    pub mask: BinaryMask,
    pub cohort: Cohort,
    pub seed: u64,
    pub lesions: Vec<Lesion>,
    /// Number of mask voxels carrying lesion density.
    pub lesion_voxels: usize,
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let u = (x - self.cx) / self.ax;
        let v = (y - self.cy) / self.ay;
        u * u + v * v <= 1.0
    }

    fn scaled(&self, s: f64) -> Ellipse {
        Ellipse {
            ax: self.ax * s,
            ay: self.ay * s,
            ..*self
        }
    }

    /// Whether this ellipse fits inside `outer` shrunk by `wall` voxels.
    fn inside(&self, outer: &Ellipse, wall: f64) -> bool {
        let shrunk = Ellipse {
            ax: outer.ax - wall,
            ay: outer.ay - wall,
            ..*outer
        };
        shrunk.ax > 0.0
            && shrunk.ay > 0.0
            && (0..360).all(|k| {
                let t = k as f64 * PI / 180.0;
                shrunk.contains(self.cx + self.ax * t.cos(), self.cy + self.ay * t.sin())
            })
    }
}

struct Anatomy {
    body: Ellipse,
    lungs: [Ellipse; 2],
    spine: Ellipse,
    sternum: Ellipse,
    airway: (f64, f64, f64),
    /// Parenchyma HU at the anterior and posterior edge of each lung.
    parenchyma: [[f64; 2]; 2],
    soft: f64,
    bone: f64,
}

impl Anatomy {
    fn sample(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Anatomy {
        let [nx, ny, _] = spec.dims;
        let (nx, ny) = (nx as f64, ny as f64);
        let cx = (nx - 1.0) / 2.0;
        let cy = (ny - 1.0) / 2.0;
        let mut jitter = |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
        let body = Ellipse {
            cx,
            cy,
            ax: 0.44 * nx * jitter(0.96, 1.04),
            ay: 0.34 * ny * jitter(0.96, 1.04),
        };
        let lung = |side: f64, off: f64, sx: f64, sy: f64| Ellipse {
            cx: cx + side * 0.2 * nx * off,
            cy: cy - 0.02 * ny,
            ax: 0.13 * nx * sx,
            ay: 0.2 * ny * sy,
        };
        let lungs = [
            lung(-1.0, jitter(0.97, 1.03), jitter(0.92, 1.06), jitter(0.92, 1.06)),
            lung(1.0, jitter(0.97, 1.03), jitter(0.92, 1.06), jitter(0.92, 1.06)),
        ];
        let spine = Ellipse { cx, cy: cy + 0.245 * ny, ax: 0.06 * nx, ay: 0.05 * ny };
        let sternum = Ellipse { cx, cy: cy - 0.29 * ny, ax: 0.05 * nx, ay: 0.025 * ny };
        let airway = (cx, cy - 0.06 * ny, (0.025 * nx).max(1.5));
        let mut parenchyma = [[0.0; 2]; 2];
        for lung in &mut parenchyma {
            for edge in lung.iter_mut() {
                *edge = spec.parenchyma_hu.sample(rng);
            }
        }
        let soft = spec.soft_tissue_hu.sample(rng);
        let bone = spec.bone_hu.sample(rng);
        Anatomy { body, lungs, spine, sternum, airway, parenchyma, soft, bone }
    }

    /// Lung scale for slice `z`: widest near the base, narrowing to the apex.
    fn lung_scale(z: usize, nz: usize) -> f64 {
        let zc = (nz as f64 - 1.0) * 0.6;
        let t = (z as f64 - zc) / (0.7 * nz as f64);
        (1.0 - t * t).max(0.0).sqrt().max(0.5)
    }

    /// Linear anterior-to-posterior density gradient across lung `k`.
    fn parenchyma_at(&self, k: usize, lung: &Ellipse, y: f64) -> f64 {
        let [a, p] = self.parenchyma[k];
        let t = ((y - (lung.cy - lung.ay)) / (2.0 * lung.ay)).clamp(0.0, 1.0);
        a + t * (p - a)
    }

    fn in_airway(&self, x: f64, y: f64) -> bool {
        let (ax, ay, r) = self.airway;
        (x - ax).powi(2) + (y - ay).powi(2) <= r * r
    }
}

/// Generates one case.
pub fn generate(spec: &PhantomSpec) -> Result<PhantomCase> {
    spec.validate()?;
    let [nx, ny, nz] = spec.dims;
    let mut anatomy_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    anatomy_rng.set_stream(STREAM_ANATOMY);
    let anatomy = Anatomy::sample(spec, &mut anatomy_rng);

    for lung in &anatomy.lungs {
        if lung.ax < 3.0 || lung.ay < 3.0 || !lung.inside(&anatomy.body, 1.0) {
            return Err(Error::config("lungs cannot be placed inside the body on this grid"));
        }
    }

    let mut base = Volume::filled(spec.dims, spec.air_hu, spec.spacing)?.with_storage(VoxelType::Int16);
    let mut mask = BinaryMask::empty(spec.dims, spec.spacing)?;
    let mut lung_of = vec![u8::MAX; nx * ny * nz];
    for z in 0..nz {
        let s = Anatomy::lung_scale(z, nz);
        let lungs = [anatomy.lungs[0].scaled(s), anatomy.lungs[1].scaled(s)];
        for y in 0..ny {
            for x in 0..nx {
                let (fx, fy) = (x as f64, y as f64);
                if !anatomy.body.contains(fx, fy) {
                    continue;
                }
                let mut v = anatomy.soft;
                if anatomy.spine.contains(fx, fy) || anatomy.sternum.contains(fx, fy) {
                    v = anatomy.bone;
                }
                let airway = anatomy.in_airway(fx, fy);
                if !airway {
                    for (k, l) in lungs.iter().enumerate() {
                        if l.contains(fx, fy) {
                            v = anatomy.parenchyma_at(k, l, fy);
                            mask.set(x, y, z, true);
                            lung_of[base.index(x, y, z)] = k as u8;
                        }
                    }
                }
                if airway {
                    v = spec.air_hu;
                }
                base.set(x, y, z, v);
            }
        }
    }

    let mut lesions = Vec::new();
    if spec.cohort == Cohort::Covid {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(STREAM_LESIONS);
        let count = rng.random_range(spec.lesion_count.0..=spec.lesion_count.1);
        for _ in 0..count {
            lesions.push(sample_lesion(spec, &anatomy, &mut rng));
        }
    }
    let mut painted = vec![false; nx * ny * nz];
    for lesion in &lesions {
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let i = base.index(x, y, z);
                    if lung_of[i] != lesion.lung as u8 {
                        continue;
                    }
                    let hit = lesion.spheres.iter().any(|(c, r)| {
                        let dx = (x as f64 - c[0]) * spec.spacing[0];
                        let dy = (y as f64 - c[1]) * spec.spacing[1];
                        let dz = (z as f64 - c[2]) * spec.spacing[2];
                        dx * dx + dy * dy + dz * dz <= r * r
                    });
                    if hit {
                        base.data_mut()[i] = lesion.hu;
                        painted[i] = true;
                    }
                }
            }
        }
    }
    let lesion_voxels = painted.iter().filter(|&&p| p).count();

    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    noise_rng.set_stream(STREAM_NOISE);
    let mut volume = base;
    for v in volume.data_mut() {
        let n: f64 = noise_rng.sample::<f64, _>(StandardNormal) * spec.noise_sigma;
        *v = add_bounded_noise(*v, n);
    }
    Ok(PhantomCase {
        volume,
        mask,
        cohort: spec.cohort,
        seed: spec.seed,
        lesions,
        lesion_voxels,
    })
}

/// Adds noise and rounds to integer HU without leaving the HU range.
///
/// Near the lower range limit the noise is wrapped into the symmetric band
/// `[-(v - HU_MIN), v - HU_MIN]`; wrapping is an odd map, so the noise keeps
/// zero mean and the expected value of the voxel stays at `v`.
fn add_bounded_noise(v: f64, n: f64) -> f64 {
    let bound = (v - HU_MIN).min(HU_MAX - v);
    let n = if bound <= 0.0 {
        0.0
    } else if n.abs() > bound {
        n - 2.0 * bound * (n / (2.0 * bound)).round()
    } else {
        n
    };
    (v + n).round().clamp(HU_MIN, HU_MAX)
}

fn sample_lesion(spec: &PhantomSpec, anatomy: &Anatomy, rng: &mut ChaCha8Rng) -> Lesion {
    let nz = spec.dims[2];
    let lung = rng.random_range(0..2usize);
    let z = rng.random_range(0..nz);
    let ell = anatomy.lungs[lung].scaled(Anatomy::lung_scale(z, nz));
    let theta = rng.random::<f64>() * 2.0 * PI;
    let frac = rng.random_range((1.0 - PERIPHERAL_SHELL + 0.01)..0.99);
    let center = [
        ell.cx + frac * ell.ax * theta.cos(),
        ell.cy + frac * ell.ay * theta.sin(),
        z as f64,
    ];
    let kind = if rng.random::<f64>() < 0.6 {
        LesionKind::GroundGlass
    } else {
        LesionKind::Consolidation
    };
    let hu = match kind {
        LesionKind::GroundGlass => spec.ggo_hu.sample(rng),
        LesionKind::Consolidation => spec.consolidation_hu.sample(rng),
    }
    .round();
    let mut spheres = Vec::new();
    let r0 = rng.random_range(5.0..12.0);
    spheres.push((center, r0));
    for _ in 0..rng.random_range(0..3usize) {
        let r = rng.random_range(3.0..9.0);
        let off = |rng: &mut ChaCha8Rng, s: f64| rng.random_range(-0.6..0.6) * r0 / s;
        let c = [
            center[0] + off(rng, spec.spacing[0]),
            center[1] + off(rng, spec.spacing[1]),
            center[2] + off(rng, spec.spacing[2]),
        ];
        spheres.push((c, r));
    }
    Lesion {
        kind,
        hu,
        lung,
        center,
        boundary_fraction: 1.0 - frac,
        spheres,
    }
}

/// One row of the corpus manifest; paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub case_id: String,
    pub cohort: Cohort,
    pub seed: u64,
    pub volume_path: String,
    pub mask_path: String,
}

impl ManifestRow {
    /// Training cases carry the `train-` id prefix; all others are test cases.
    pub fn is_training(&self) -> bool {
        self.case_id.starts_with(TRAIN_PREFIX)
    }
}

pub const TRAIN_PREFIX: &str = "train-";
pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorpusCounts {
    pub train: usize,
    pub test_normal: usize,
    pub test_covid: usize,
}

/// Case list of a corpus: `(case_id, cohort, seed)` with seeds
/// `base_seed + index`. Training cases use the COVID-like cohort.
pub fn corpus_plan(counts: CorpusCounts, base_seed: u64) -> Vec<(String, Cohort, u64)> {
    let mut out = Vec::new();
    let groups = [
        (TRAIN_PREFIX, Cohort::Covid, counts.train),
        ("test-normal-", Cohort::Normal, counts.test_normal),
        ("test-covid-", Cohort::Covid, counts.test_covid),
    ];
    for (prefix, cohort, n) in groups {
        for k in 0..n {
            let seed = base_seed.wrapping_add(out.len() as u64);
            out.push((format!("{prefix}{k:04}"), cohort, seed));
        }
    }
    out
}

/// Writes every case as a volume/mask NIfTI pair plus `manifest.csv`.
pub fn generate_corpus(
    counts: CorpusCounts,
    base_seed: u64,
    spec: &PhantomSpec,
    dir: &Path,
) -> Result<Vec<ManifestRow>> {
    if counts.train == 0 || counts.test_normal == 0 || counts.test_covid == 0 {
        return Err(Error::config("corpus counts must all be at least 1"));
    }
    fs::create_dir_all(dir)?;
    let mut rows = Vec::new();
    for (case_id, cohort, seed) in corpus_plan(counts, base_seed) {
        let case = generate(&PhantomSpec {
            cohort,
            seed,
            ..spec.clone()
        })?;
        let volume_path = format!("{case_id}_ct.nii");
        let mask_path = format!("{case_id}_mask.nii");
        write_nifti(&case.volume, &dir.join(&volume_path))?;
        write_mask(&case.mask, &dir.join(&mask_path))?;
        rows.push(ManifestRow { case_id, cohort, seed, volume_path, mask_path });
    }
    write_manifest(&rows, &dir.join(MANIFEST_FILE))?;
    Ok(rows)
}

pub fn write_manifest(rows: &[ManifestRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["case_id", "cohort", "seed", "volume_path", "mask_path"] {
        return Err(Error::data(format!("unexpected manifest header {headers:?}")));
    }
    Ok(r.deserialize().collect::<std::result::Result<Vec<ManifestRow>, _>>()?)
}
