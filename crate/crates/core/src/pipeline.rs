//! File-level pipeline stages: preprocess a corpus, train from prepared
//! cases, predict masks, evaluate predictions and write reports.
//!
//! A prepared directory holds one normalized image, one resampled HU
//! volume, an optional mask and a crop record per case, indexed by
//! `cases.csv`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::metrics::{evaluate_case, write_case_metrics, CaseInputs, CaseMetrics};
use crate::phantom::{read_manifest, Cohort, CorpusCounts, PhantomSpec, TRAIN_PREFIX};
use crate::report::write_report;
use crate::segnet::{self, ModelParams, NetConfig};
use crate::trainer::{split_subjects, Subject, TrainConfig, TrainReport, TrainState, Trainer};
use crate::volume::{
    preprocess_case, read_mask, read_nifti, write_mask, write_nifti, BinaryMask, CropRecord, CropRule,
    HuWindow, PreprocSpec, Volume, VoxelType,
};
use crate::Tensor4;

pub const PREPARED_INDEX: &str = "cases.csv";
pub const PREDICTION_INDEX: &str = "predictions.csv";
pub const TRAIN_REPORT: &str = "train_report.csv";
pub const SPLIT_FILE: &str = "split.csv";

/// Phantom corpus settings for the `phantom` stage.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub counts: CorpusCounts,
    pub seed: u64,
    pub phantom: PhantomSpec,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            counts: CorpusCounts {
                train: 40,
                test_normal: 10,
                test_covid: 10,
            },
            seed: 0,
            phantom: PhantomSpec::default(),
        }
    }
}

impl CorpusConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        kv.check_keys(&[
            "train",
            "test_normal",
            "test_covid",
            "seed",
            "dims",
            "spacing",
            "noise_sigma",
            "lesion_min",
            "lesion_max",
        ])?;
        let d = CorpusConfig::default();
        let p = d.phantom.clone();
        Ok(CorpusConfig {
            counts: CorpusCounts {
                train: kv.get("train")?.unwrap_or(d.counts.train),
                test_normal: kv.get("test_normal")?.unwrap_or(d.counts.test_normal),
                test_covid: kv.get("test_covid")?.unwrap_or(d.counts.test_covid),
            },
            seed: kv.get("seed")?.unwrap_or(d.seed),
            phantom: PhantomSpec {
                dims: kv.array3("dims", p.dims)?,
                spacing: kv.array3("spacing", p.spacing)?,
                noise_sigma: kv.get("noise_sigma")?.unwrap_or(p.noise_sigma),
                lesion_count: (
                    kv.get("lesion_min")?.unwrap_or(p.lesion_count.0),
                    kv.get("lesion_max")?.unwrap_or(p.lesion_count.1),
                ),
                ..p
            },
        })
    }
}

pub fn preproc_from_text(text: &str) -> Result<PreprocSpec> {
    let kv = KeyValues::parse(text)?;
    kv.check_keys(&["target_rows", "target_cols", "hu_low", "hu_high", "crop_margin_vox", "crop_rule"])?;
    let d = PreprocSpec::default();
    let crop_rule = match kv.raw("crop_rule") {
        None => d.crop_rule,
        Some("reference-mask") => CropRule::ReferenceMaskIfPresent,
        Some("body") => CropRule::Body,
        Some(other) => return Err(Error::config(format!("crop_rule {other:?}"))),
    };
    Ok(PreprocSpec {
        target_rows: kv.get("target_rows")?.unwrap_or(d.target_rows),
        target_cols: kv.get("target_cols")?.unwrap_or(d.target_cols),
        window: HuWindow {
            low: kv.get("hu_low")?.unwrap_or(d.window.low),
            high: kv.get("hu_high")?.unwrap_or(d.window.high),
        },
        crop_margin_vox: kv.get("crop_margin_vox")?.unwrap_or(d.crop_margin_vox),
        crop_rule,
    })
}

/// One prepared case; paths are relative to the prepared directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreparedRow {
    pub case_id: String,
    pub cohort: Cohort,
    pub image_path: String,
    pub hu_path: String,
    pub mask_path: String,
    pub crop_path: String,
}

impl PreparedRow {
    pub fn is_training(&self) -> bool {
        self.case_id.starts_with(TRAIN_PREFIX)
    }
}

fn write_rows<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?)
}

/// Preprocesses every case listed in a phantom manifest into `out`.
pub fn preprocess_manifest(manifest: &Path, out: &Path, spec: &PreprocSpec) -> Result<Vec<PreparedRow>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let rows = read_manifest(manifest)?;
    fs::create_dir_all(out)?;
    let mut prepared = Vec::new();
    for row in rows {
        let volume = read_nifti(&base.join(&row.volume_path))?;
        let mask = if row.mask_path.is_empty() {
            None
        } else {
            Some(read_mask(&base.join(&row.mask_path))?)
        };
        let pre = preprocess_case(&volume, mask.as_ref(), spec)?;
        let id = &row.case_id;
        let p = PreparedRow {
            case_id: id.clone(),
            cohort: row.cohort,
            image_path: format!("{id}_image.nii"),
            hu_path: format!("{id}_hu.nii"),
            mask_path: if pre.mask.is_some() { format!("{id}_mask.nii") } else { String::new() },
            crop_path: format!("{id}_crop.txt"),
        };
        write_nifti(&pre.image.clone().with_storage(VoxelType::Float32), &out.join(&p.image_path))?;
        write_nifti(&pre.hu.clone().with_storage(VoxelType::Float32), &out.join(&p.hu_path))?;
        if let Some(m) = &pre.mask {
            write_mask(m, &out.join(&p.mask_path))?;
        }
        fs::write(out.join(&p.crop_path), pre.crop.to_text())?;
        prepared.push(p);
    }
    write_rows(&prepared, &out.join(PREPARED_INDEX))?;
    Ok(prepared)
}

pub fn read_prepared_index(dir: &Path) -> Result<Vec<PreparedRow>> {
    read_rows(&dir.join(PREPARED_INDEX))
}

/// A prepared case loaded back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedCase {
    pub row: PreparedRow,
    pub image: Volume,
    pub hu: Volume,
    pub mask: Option<BinaryMask>,
    pub crop: CropRecord,
}

pub fn load_prepared(dir: &Path, row: &PreparedRow) -> Result<PreparedCase> {
    let image = read_nifti(&dir.join(&row.image_path))?;
    let hu = read_nifti(&dir.join(&row.hu_path))?;
    let mask = if row.mask_path.is_empty() {
        None
    } else {
        Some(read_mask(&dir.join(&row.mask_path))?)
    };
    let crop = CropRecord::from_text(&fs::read_to_string(dir.join(&row.crop_path))?)?;
    Ok(PreparedCase { row: row.clone(), image, hu, mask, crop })
}

fn load_subject(dir: &Path, row: &PreparedRow) -> Result<Subject> {
    if row.mask_path.is_empty() {
        return Err(Error::data(format!("training case {} has no mask", row.case_id)));
    }
    let image = read_nifti(&dir.join(&row.image_path))?;
    let mask = read_mask(&dir.join(&row.mask_path))?;
    Subject::new(row.case_id.clone(), image, mask)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRow {
    pub case_id: String,
    pub role: String,
}

/// Result of the `train` stage.
#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub report: TrainReport,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

/// Trains on the `train-` cases of a prepared directory, writing
/// checkpoints, the split and the loss history into `out`.
pub fn train_from_dir(
    data: &Path,
    out: &Path,
    config: &TrainConfig,
    net: &NetConfig,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let rows: Vec<PreparedRow> = read_prepared_index(data)?.into_iter().filter(PreparedRow::is_training).collect();
    let split = split_subjects(rows.len(), config.val_fraction, config.seed)?;
    let load = |idx: &[usize]| -> Result<Vec<Subject>> { idx.iter().map(|&i| load_subject(data, &rows[i])).collect() };
    let train = load(&split.train)?;
    let val = load(&split.val)?;
    let trainer = match resume {
        Some(path) => {
            let state = TrainState::load(path)?;
            if state.params.config != *net {
                return Err(Error::config("resumed state was trained with a different network config"));
            }
            Trainer::from_state(*config, state, &train, &val)?
        }
        None => Trainer::new(*config, net, &train, &val)?,
    };
    let trainer = trainer.with_checkpoint_dir(out)?;
    let (params, report) = trainer.run()?;
    report.write_csv(&out.join(TRAIN_REPORT))?;
    let train_ids: Vec<String> = train.iter().map(|s| s.id.clone()).collect();
    let val_ids: Vec<String> = val.iter().map(|s| s.id.clone()).collect();
    let split_rows: Vec<SplitRow> = train_ids
        .iter()
        .map(|id| SplitRow { case_id: id.clone(), role: "train".into() })
        .chain(val_ids.iter().map(|id| SplitRow { case_id: id.clone(), role: "val".into() }))
        .collect();
    write_rows(&split_rows, &out.join(SPLIT_FILE))?;
    Ok(TrainOutcome { params, report, train_ids, val_ids })
}

/// Predicts a lung mask for every axial slice of a normalized volume,
/// `batch_size` slices at a time.
pub fn predict_volume(params: &ModelParams, image: &Volume, batch_size: usize) -> Result<BinaryMask> {
    let [nx, ny, nz] = image.dims();
    let plane = nx * ny;
    let mut out = Vec::with_capacity(nx * ny * nz);
    let mut z = 0;
    while z < nz {
        let n = batch_size.max(1).min(nz - z);
        let x = Tensor4::from_vec([n, 1, ny, nx], image.data()[z * plane..(z + n) * plane].to_vec())?;
        let probs = segnet::infer(params, &x)?;
        for slice in segnet::predict_mask(&probs)? {
            out.extend_from_slice(slice.data());
        }
        z += n;
    }
    let mut mask = BinaryMask::new(image.dims(), out, image.spacing)?;
    mask.origin = image.origin;
    Ok(mask)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub case_id: String,
    pub cohort: Cohort,
    pub pred_path: String,
}

/// Writes `<case>_pred.nii` (on the prepared grid) for each selected case.
pub fn infer_dir(
    data: &Path,
    params: &ModelParams,
    out: &Path,
    include_training: bool,
    batch_size: usize,
) -> Result<Vec<PredictionRow>> {
    fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    for row in read_prepared_index(data)? {
        if row.is_training() && !include_training {
            continue;
        }
        let image = read_nifti(&data.join(&row.image_path))?;
        let mask = predict_volume(params, &image, batch_size)?;
        let pred_path = format!("{}_pred.nii", row.case_id);
        write_mask(&mask, &out.join(&pred_path))?;
        rows.push(PredictionRow { case_id: row.case_id, cohort: row.cohort, pred_path });
    }
    write_rows(&rows, &out.join(PREDICTION_INDEX))?;
    Ok(rows)
}

/// Evaluates one prepared case against a prediction on the same grid.
pub fn evaluate_prepared(case: &PreparedCase, pred: &BinaryMask) -> Result<CaseMetrics> {
    let reference = case
        .mask
        .as_ref()
        .ok_or_else(|| Error::data(format!("case {} has no reference mask", case.row.case_id)))?;
    let domain = BinaryMask::new(reference.dims(), vec![true; reference.len()], reference.spacing)?;
    evaluate_case(
        &case.row.case_id,
        case.row.cohort,
        &CaseInputs {
            reference,
            pred,
            image: &case.image,
            hu: &case.hu,
            domain: &domain,
            spacing: case.crop.preprocessed_spacing(),
        },
    )
}

/// Evaluates every prediction listed in `pred_dir` and writes the
/// per-case CSV to `out_csv`.
pub fn evaluate_dir(data: &Path, pred_dir: &Path, out_csv: &Path) -> Result<Vec<CaseMetrics>> {
    let prepared = read_prepared_index(data)?;
    let preds: Vec<PredictionRow> = read_rows(&pred_dir.join(PREDICTION_INDEX))?;
    let mut out = Vec::new();
    for p in preds {
        let row = prepared
            .iter()
            .find(|r| r.case_id == p.case_id)
            .ok_or_else(|| Error::data(format!("prediction for unknown case {}", p.case_id)))?;
        let case = load_prepared(data, row)?;
        let pred = read_mask(&pred_dir.join(&p.pred_path))?;
        out.push(evaluate_prepared(&case, &pred)?);
    }
    if let Some(parent) = out_csv.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_case_metrics(&out, out_csv)?;
    Ok(out)
}

/// Reads a per-case CSV and writes the cohort report into `out`.
pub fn report_from_csv(metrics_csv: &Path, out: &Path) -> Result<Vec<String>> {
    let cases = crate::metrics::read_case_metrics(metrics_csv)?;
    write_report(&cases, out)
}

/// Paths of the standard pipeline layout under one working directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub corpus: PathBuf,
    pub prepared: PathBuf,
    pub model: PathBuf,
    pub predictions: PathBuf,
    pub metrics: PathBuf,
    pub report: PathBuf,
}

impl Layout {
    pub fn under(root: &Path) -> Self {
        Layout {
            corpus: root.join("corpus"),
            prepared: root.join("prepared"),
            model: root.join("model"),
            predictions: root.join("predictions"),
            metrics: root.join("metrics.csv"),
            report: root.join("report"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn net_config_text_round_trip() {
        let c = NetConfig { group_channels: [4, 8, 8], seed: 3, ..NetConfig::default() };
        assert_eq!(NetConfig::from_text(&c.to_text()).unwrap(), c);
        assert!(NetConfig::from_text("group_channels = 8 4 4").is_err());
    }

    #[test]
    fn corpus_config_parses() {
        let c = CorpusConfig::from_text("train = 4\ndims = 48 48 8\nseed = 9\n").unwrap();
        assert_eq!(c.counts.train, 4);
        assert_eq!(c.phantom.dims, [48, 48, 8]);
        assert_eq!(c.seed, 9);
        assert!(CorpusConfig::from_text("dims = 1 2").is_err());
    }

    #[test]
    fn preproc_config_parses() {
        let s = preproc_from_text("crop_rule = body\nhu_high = 300").unwrap();
        assert_eq!(s.crop_rule, CropRule::Body);
        assert_eq!(s.window.high, 300.0);
        assert_eq!(s.target_rows, 296);
    }
}
