//! Overlap, intensity and volume agreement between a reference and a
//! predicted lung mask.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::phantom::Cohort;
use crate::volume::{BinaryMask, Volume};

/// Voxel-wise confusion counts inside an evaluation domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn reference_count(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn predicted_count(&self) -> u64 {
        self.tp + self.fp
    }

    pub fn union_count(&self) -> u64 {
        self.tp + self.fp + self.fn_
    }

    /// `2TP / (2TP + FP + FN)`.
    pub fn dsc(&self) -> Result<f64> {
        let den = 2 * self.tp + self.fp + self.fn_;
        if den == 0 {
            return Err(Error::UndefinedMetric("dice coefficient of two empty masks"));
        }
        Ok(2.0 * self.tp as f64 / den as f64)
    }

    /// `TP / (TP + FP + FN)`.
    pub fn jaccard(&self) -> Result<f64> {
        let den = self.union_count();
        if den == 0 {
            return Err(Error::UndefinedMetric("jaccard index of two empty masks"));
        }
        Ok(self.tp as f64 / den as f64)
    }

    /// False positive and false negative ratios, both relative to the
    /// reference size.
    pub fn fp_fn_ratios(&self) -> Result<(f64, f64)> {
        let r = self.reference_count();
        if r == 0 {
            return Err(Error::UndefinedMetric("error ratios with an empty reference"));
        }
        Ok((self.fp as f64 / r as f64, self.fn_ as f64 / r as f64))
    }
}

fn check_grid(a: [usize; 3], b: [usize; 3], what: &str) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{what} grid {b:?} differs from reference grid {a:?}")));
    }
    Ok(())
}

/// Counts agreement of `pred` with `reference` over the voxels of `domain`.
pub fn confusion(reference: &BinaryMask, pred: &BinaryMask, domain: &BinaryMask) -> Result<Confusion> {
    check_grid(reference.dims(), pred.dims(), "prediction")?;
    check_grid(reference.dims(), domain.dims(), "domain")?;
    let mut c = Confusion::default();
    for ((&r, &p), &d) in reference.data().iter().zip(pred.data()).zip(domain.data()) {
        if !d {
            continue;
        }
        match (r, p) {
            (true, true) => c.tp += 1,
            (false, true) => c.fp += 1,
            (true, false) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Mean error and mean absolute error between the masked normalized
/// intensities `image·pred` and `image·reference`, averaged over the union
/// of both masks.
pub fn me_mae(reference: &BinaryMask, pred: &BinaryMask, image: &Volume) -> Result<(f64, f64)> {
    check_grid(reference.dims(), pred.dims(), "prediction")?;
    check_grid(reference.dims(), image.dims(), "image")?;
    let mut n = 0u64;
    let mut sum = 0.0;
    let mut abs = 0.0;
    for ((&r, &p), &v) in reference.data().iter().zip(pred.data()).zip(image.data()) {
        if !(r || p) {
            continue;
        }
        n += 1;
        let d = v * (p as u8 as f64) - v * (r as u8 as f64);
        sum += d;
        abs += d.abs();
    }
    if n == 0 {
        return Err(Error::UndefinedMetric("mean error over an empty union"));
    }
    Ok((sum / n as f64, abs / n as f64))
}

fn mean_under(mask: &BinaryMask, hu: &Volume) -> Option<f64> {
    let mut n = 0u64;
    let mut sum = 0.0;
    for (&m, &v) in mask.data().iter().zip(hu.data()) {
        if m {
            n += 1;
            sum += v;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Percent difference of the mean HU under the predicted mask relative to
/// the mean HU under the reference mask.
pub fn rel_mean_hu_diff(reference: &BinaryMask, pred: &BinaryMask, hu: &Volume) -> Result<f64> {
    check_grid(reference.dims(), pred.dims(), "prediction")?;
    check_grid(reference.dims(), hu.dims(), "HU volume")?;
    let mr = mean_under(reference, hu)
        .ok_or(Error::UndefinedMetric("mean HU of an empty reference"))?;
    let mp = mean_under(pred, hu).ok_or(Error::UndefinedMetric("mean HU of an empty prediction"))?;
    if mr == 0.0 {
        return Err(Error::UndefinedMetric("relative HU difference with zero reference mean"));
    }
    Ok(100.0 * (mp - mr) / mr)
}

/// Percent difference of the predicted lung volume relative to the
/// reference volume, with voxel volume from `spacing` (mm).
pub fn rel_volume_diff(reference: &BinaryMask, pred: &BinaryMask, spacing: [f64; 3]) -> Result<f64> {
    check_grid(reference.dims(), pred.dims(), "prediction")?;
    let voxel = spacing[0] * spacing[1] * spacing[2];
    let vr = reference.count() as f64 * voxel;
    let vp = pred.count() as f64 * voxel;
    if vr == 0.0 {
        return Err(Error::UndefinedMetric("volume difference with an empty reference"));
    }
    Ok(100.0 * (vp - vr) / vr)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HuVolumeDiffs {
    pub rel_mean_hu: f64,
    pub abs_rel_mean_hu: f64,
    pub rel_volume: f64,
    pub abs_rel_volume: f64,
}

pub fn hu_volume_diffs(
    reference: &BinaryMask,
    pred: &BinaryMask,
    hu: &Volume,
    spacing: [f64; 3],
) -> Result<HuVolumeDiffs> {
    let rel_mean_hu = rel_mean_hu_diff(reference, pred, hu)?;
    let rel_volume = rel_volume_diff(reference, pred, spacing)?;
    Ok(HuVolumeDiffs {
        rel_mean_hu,
        abs_rel_mean_hu: rel_mean_hu.abs(),
        rel_volume,
        abs_rel_volume: rel_volume.abs(),
    })
}

/// The ten per-case metrics in report order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    Dice,
    Jaccard,
    MeanError,
    MeanAbsError,
    FalsePositiveRatio,
    FalseNegativeRatio,
    RelMeanHu,
    AbsRelMeanHu,
    RelVolume,
    AbsRelVolume,
}

impl Metric {
    pub const ALL: [Metric; 10] = [
        Metric::Dice,
        Metric::Jaccard,
        Metric::MeanError,
        Metric::MeanAbsError,
        Metric::FalsePositiveRatio,
        Metric::FalseNegativeRatio,
        Metric::RelMeanHu,
        Metric::AbsRelMeanHu,
        Metric::RelVolume,
        Metric::AbsRelVolume,
    ];

    /// Metrics drawn as box plots.
    pub const BOXPLOT: [Metric; 6] = [
        Metric::Dice,
        Metric::Jaccard,
        Metric::MeanError,
        Metric::MeanAbsError,
        Metric::RelMeanHu,
        Metric::RelVolume,
    ];

    /// Column name in the per-case CSV.
    pub fn key(self) -> &'static str {
        match self {
            Metric::Dice => "dsc",
            Metric::Jaccard => "jc",
            Metric::MeanError => "me",
            Metric::MeanAbsError => "mae",
            Metric::FalsePositiveRatio => "fpr",
            Metric::FalseNegativeRatio => "fnr",
            Metric::RelMeanHu => "rel_mean_hu_pct",
            Metric::AbsRelMeanHu => "abs_rel_mean_hu_pct",
            Metric::RelVolume => "rel_volume_pct",
            Metric::AbsRelVolume => "abs_rel_volume_pct",
        }
    }

    /// Row label in the summary table.
    pub fn label(self) -> &'static str {
        match self {
            Metric::Dice => "Dice Coefficient",
            Metric::Jaccard => "Jaccard Index",
            Metric::MeanError => "ME",
            Metric::MeanAbsError => "MAE",
            Metric::FalsePositiveRatio => "False Positive Ratio",
            Metric::FalseNegativeRatio => "False Negative Ratio",
            Metric::RelMeanHu => "Relative Mean HU Diff (%)",
            Metric::AbsRelMeanHu => "Absolute Relative Mean HU Diff (%)",
            Metric::RelVolume => "Relative Volume Diff (%)",
            Metric::AbsRelVolume => "Absolute Relative Volume Diff (%)",
        }
    }
}

/// Metrics of one case. A value is `None` when it is undefined for the case;
/// such cases are flagged and excluded from the affected summaries.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseMetrics {
    pub case_id: String,
    pub cohort: Cohort,
    pub values: [Option<f64>; 10],
}

impl CaseMetrics {
    pub fn get(&self, m: Metric) -> Option<f64> {
        self.values[m as usize]
    }

    pub fn flagged(&self) -> bool {
        self.values.iter().any(Option::is_none)
    }
}

/// Inputs for one case, all on the same grid.
pub struct CaseInputs<'a> {
    pub reference: &'a BinaryMask,
    pub pred: &'a BinaryMask,
    /// Normalized intensities used by ME and MAE.
    pub image: &'a Volume,
    /// HU values used by the mean HU difference.
    pub hu: &'a Volume,
    pub domain: &'a BinaryMask,
    /// Voxel spacing (mm) used for lung volumes.
    pub spacing: [f64; 3],
}

pub fn evaluate_case(case_id: &str, cohort: Cohort, inputs: &CaseInputs<'_>) -> Result<CaseMetrics> {
    let c = confusion(inputs.reference, inputs.pred, inputs.domain)?;
    check_grid(inputs.reference.dims(), inputs.image.dims(), "image")?;
    check_grid(inputs.reference.dims(), inputs.hu.dims(), "HU volume")?;
    let ok = |r: Result<f64>| -> Result<Option<f64>> {
        match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::UndefinedMetric(_)) => Ok(None),
            Err(e) => Err(e),
        }
    };
    let (me, mae) = match me_mae(inputs.reference, inputs.pred, inputs.image) {
        Ok((a, b)) => (Some(a), Some(b)),
        Err(Error::UndefinedMetric(_)) => (None, None),
        Err(e) => return Err(e),
    };
    let (fpr, fnr) = match c.fp_fn_ratios() {
        Ok((a, b)) => (Some(a), Some(b)),
        Err(_) => (None, None),
    };
    let hu = ok(rel_mean_hu_diff(inputs.reference, inputs.pred, inputs.hu))?;
    let vol = ok(rel_volume_diff(inputs.reference, inputs.pred, inputs.spacing))?;
    Ok(CaseMetrics {
        case_id: case_id.to_string(),
        cohort,
        values: [
            ok(c.dsc())?,
            ok(c.jaccard())?,
            me,
            mae,
            fpr,
            fnr,
            hu,
            hu.map(f64::abs),
            vol,
            vol.map(f64::abs),
        ],
    })
}

pub fn write_case_metrics(cases: &[CaseMetrics], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["case_id", "cohort"];
    header.extend(Metric::ALL.iter().map(|m| m.key()));
    header.push("flagged");
    w.write_record(&header)?;
    for c in cases {
        let mut row = vec![c.case_id.clone(), c.cohort.to_string()];
        row.extend(c.values.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
        row.push(c.flagged().to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_case_metrics(path: &Path) -> Result<Vec<CaseMetrics>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let want: Vec<&str> = ["case_id", "cohort"]
        .into_iter()
        .chain(Metric::ALL.iter().map(|m| m.key()))
        .chain(["flagged"])
        .collect();
    if headers.iter().collect::<Vec<_>>() != want {
        return Err(Error::data(format!("unexpected metrics header {headers:?}")));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let mut values = [None; 10];
        for (k, v) in values.iter_mut().enumerate() {
            let field = &rec[k + 2];
            if !field.is_empty() {
                *v = Some(
                    field
                        .parse()
                        .map_err(|_| Error::data(format!("bad metric value {field:?}")))?,
                );
            }
        }
        out.push(CaseMetrics {
            case_id: rec[0].to_string(),
            cohort: rec[1].parse()?,
            values,
        });
    }
    Ok(out)
}

/// Writes `lines` to `path`, one per line.
pub(crate) fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for l in lines {
        writeln!(f, "{l}")?;
    }
    f.flush()?;
    Ok(())
}
