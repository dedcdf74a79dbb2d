//! Slice-based training: subject split, seeded batch sampling, and an
//! epoch loop minimizing Dice_NS with Adam.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::segnet::checkpoint::{decode_prefix, ByteReader};
use crate::segnet::{self, encode_params, save_params, ModelParams, NetConfig, RealWidth};
use crate::tensor::{dice_ns_loss, dice_ns_loss_backward, AdamConfig, AdamState, Tensor4};
use crate::volume::{BinaryMask, Volume};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub val_fraction: f64,
    pub seed: u64,
    /// Save the full training state every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Stop after this many epochs without a validation improvement;
    /// 0 disables early stopping.
    pub early_stop_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.02,
            batch_size: 17,
            weight_decay: 1e-4,
            max_epochs: 30,
            val_fraction: 0.05,
            seed: 0,
            checkpoint_every: 0,
            early_stop_patience: 0,
        }
    }
}

const TRAIN_KEYS: [&str; 8] = [
    "lr",
    "batch_size",
    "weight_decay",
    "max_epochs",
    "val_fraction",
    "seed",
    "checkpoint_every",
    "early_stop_patience",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::config(format!("val_fraction {} outside (0, 1)", self.val_fraction)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        Ok(())
    }

    /// Parses `key = value` text; missing keys keep their defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        kv.check_keys(&TRAIN_KEYS)?;
        let d = TrainConfig::default();
        let c = TrainConfig {
            lr: kv.get("lr")?.unwrap_or(d.lr),
            batch_size: kv.get("batch_size")?.unwrap_or(d.batch_size),
            weight_decay: kv.get("weight_decay")?.unwrap_or(d.weight_decay),
            max_epochs: kv.get("max_epochs")?.unwrap_or(d.max_epochs),
            val_fraction: kv.get("val_fraction")?.unwrap_or(d.val_fraction),
            seed: kv.get("seed")?.unwrap_or(d.seed),
            checkpoint_every: kv.get("checkpoint_every")?.unwrap_or(d.checkpoint_every),
            early_stop_patience: kv.get("early_stop_patience")?.unwrap_or(d.early_stop_patience),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let mut kv = KeyValues::default();
        kv.insert("lr", self.lr);
        kv.insert("batch_size", self.batch_size);
        kv.insert("weight_decay", self.weight_decay);
        kv.insert("max_epochs", self.max_epochs);
        kv.insert("val_fraction", self.val_fraction);
        kv.insert("seed", self.seed);
        kv.insert("checkpoint_every", self.checkpoint_every);
        kv.insert("early_stop_patience", self.early_stop_patience);
        kv.to_text()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// A preprocessed subject: normalized image and reference mask on the
/// network grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    pub image: Volume,
    pub mask: BinaryMask,
}

impl Subject {
    pub fn new(id: impl Into<String>, image: Volume, mask: BinaryMask) -> Result<Self> {
        if image.dims() != mask.dims() {
            return Err(Error::data(format!(
                "image grid {:?} differs from mask grid {:?}",
                image.dims(),
                mask.dims()
            )));
        }
        Ok(Subject { id: id.into(), image, mask })
    }

    fn plane(&self) -> (usize, usize) {
        let [nx, ny, _] = self.image.dims();
        (ny, nx)
    }

    fn slices(&self) -> usize {
        self.image.dims()[2]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Seeded subject-level split: `max(1, round(val_fraction·n))` subjects
/// go to validation. Both lists are returned in ascending index order.
pub fn split_subjects(n: usize, val_fraction: f64, seed: u64) -> Result<Split> {
    if n < 2 {
        return Err(Error::data(format!("need at least 2 subjects to split, got {n}")));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::config(format!("val_fraction {val_fraction} outside (0, 1)")));
    }
    let n_val = ((val_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut val = order[..n_val].to_vec();
    let mut train = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok(Split { train, val })
}

/// One axial slice of one subject.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct SliceRef {
    pub subject: usize,
    pub slice: usize,
}

fn check_planes(subjects: &[Subject]) -> Result<(usize, usize)> {
    let first = subjects
        .first()
        .ok_or_else(|| Error::data("no subjects"))?
        .plane();
    for s in subjects {
        if s.plane() != first {
            return Err(Error::data(format!(
                "subject {} has {}x{} slices, expected {}x{}",
                s.id,
                s.plane().0,
                s.plane().1,
                first.0,
                first.1
            )));
        }
        if s.image.dims() != s.mask.dims() {
            return Err(Error::data(format!("subject {} image and mask grids differ", s.id)));
        }
    }
    Ok(first)
}

/// Batch plan for one epoch: a seeded permutation of every slice of every
/// subject, cut into batches of `batch_size` (the last may be shorter).
pub fn sample_batches(
    subjects: &[Subject],
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Vec<SliceRef>>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size must be at least 1"));
    }
    check_planes(subjects)?;
    let mut refs: Vec<SliceRef> = subjects
        .iter()
        .enumerate()
        .flat_map(|(i, s)| (0..s.slices()).map(move |z| SliceRef { subject: i, slice: z }))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    refs.shuffle(&mut rng);
    Ok(refs.chunks(batch_size).map(<[SliceRef]>::to_vec).collect())
}

/// Builds the input batch `[n, 1, rows, cols]` and the one-hot target
/// `[n, 2, rows, cols]` (channel 0 background, channel 1 lung).
pub fn assemble_batch(subjects: &[Subject], refs: &[SliceRef]) -> Result<(Tensor4, Tensor4)> {
    let first = refs.first().ok_or_else(|| Error::data("empty batch"))?;
    let (rows, cols) = subjects[first.subject].plane();
    let plane = rows * cols;
    let mut x = Tensor4::zeros([refs.len(), 1, rows, cols])?;
    let mut y = Tensor4::zeros([refs.len(), 2, rows, cols])?;
    for (b, r) in refs.iter().enumerate() {
        let s = &subjects[r.subject];
        if s.plane() != (rows, cols) {
            return Err(Error::data(format!("subject {} slice shape differs within batch", s.id)));
        }
        let lo = r.slice * plane;
        x.data_mut()[b * plane..(b + 1) * plane].copy_from_slice(&s.image.data()[lo..lo + plane]);
        let t = y.data_mut();
        for (k, &m) in s.mask.data()[lo..lo + plane].iter().enumerate() {
            t[(2 * b) * plane + k] = if m { 0.0 } else { 1.0 };
            t[(2 * b + 1) * plane + k] = if m { 1.0 } else { 0.0 };
        }
    }
    Ok((x, y))
}

/// Mean inference-mode Dice_NS loss over fixed, unshuffled batches.
pub fn validation_loss(params: &ModelParams, subjects: &[Subject], batch_size: usize) -> Result<f64> {
    check_planes(subjects)?;
    let refs: Vec<SliceRef> = subjects
        .iter()
        .enumerate()
        .flat_map(|(i, s)| (0..s.slices()).map(move |z| SliceRef { subject: i, slice: z }))
        .collect();
    let mut total = 0.0;
    let mut n = 0;
    for chunk in refs.chunks(batch_size.max(1)) {
        let (x, y) = assemble_batch(subjects, chunk)?;
        let probs = segnet::infer(params, &x)?;
        total += dice_ns_loss(&probs, &y)?;
        n += 1;
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestModel {
    pub params: ModelParams,
    pub epoch: usize,
    pub val_loss: f64,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub adam: AdamState,
    pub epochs_done: usize,
    pub history: Vec<EpochRecord>,
    pub best: Option<BestModel>,
    pub epochs_since_best: usize,
}

const STATE_TAG: &[u8; 4] = b"TRST";

impl TrainState {
    pub fn new(params: ModelParams, adam: AdamConfig) -> Self {
        let sizes: Vec<usize> = params
            .trainable_indices()
            .into_iter()
            .map(|i| params.by_index(i).data.len())
            .collect();
        TrainState {
            adam: AdamState::new(adam, &sizes),
            params,
            epochs_done: 0,
            history: Vec::new(),
            best: None,
            epochs_since_best: 0,
        }
    }

    /// Model checkpoint (64-bit) followed by optimizer and progress state.
    pub fn encode(&self) -> Vec<u8> {
        fn u32(out: &mut Vec<u8>, v: usize) {
            out.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
        }
        fn f64s(out: &mut Vec<u8>, v: &[f64]) {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut out = encode_params(&self.params, RealWidth::F64);
        out.extend_from_slice(STATE_TAG);
        let a = &self.adam;
        out.extend_from_slice(&a.step.to_le_bytes());
        f64s(&mut out, &[a.config.lr, a.config.beta1, a.config.beta2, a.config.epsilon, a.config.weight_decay]);
        u32(&mut out, a.m.len());
        for (m, v) in a.m.iter().zip(&a.v) {
            u32(&mut out, m.len());
            f64s(&mut out, m);
            f64s(&mut out, v);
        }
        u32(&mut out, self.epochs_done);
        u32(&mut out, self.epochs_since_best);
        u32(&mut out, self.history.len());
        for r in &self.history {
            u32(&mut out, r.epoch);
            f64s(&mut out, &[r.train_loss, r.val_loss, r.seconds]);
        }
        match &self.best {
            None => out.push(0),
            Some(b) => {
                out.push(1);
                u32(&mut out, b.epoch);
                f64s(&mut out, &[b.val_loss]);
                let bytes = encode_params(&b.params, RealWidth::F64);
                out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
                out.extend_from_slice(&bytes);
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (params, width, rest) = decode_prefix(bytes)?;
        if width != RealWidth::F64 {
            return Err(Error::Format("training state must be stored at 64-bit".into()));
        }
        let mut r = ByteReader::new(rest);
        if r.take(4)? != STATE_TAG {
            return Err(Error::Format("checkpoint has no training state".into()));
        }
        let step = r.u64()?;
        let config = AdamConfig {
            lr: r.f64()?,
            beta1: r.f64()?,
            beta2: r.f64()?,
            epsilon: r.f64()?,
            weight_decay: r.f64()?,
        };
        let expected: Vec<usize> = params
            .trainable_indices()
            .into_iter()
            .map(|i| params.by_index(i).data.len())
            .collect();
        if r.u32()? != expected.len() {
            return Err(Error::Format("optimizer state does not match the model".into()));
        }
        let mut m = Vec::new();
        let mut v = Vec::new();
        for &len in &expected {
            if r.u32()? != len {
                return Err(Error::Format("optimizer moment size does not match the model".into()));
            }
            m.push((0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?);
            v.push((0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?);
        }
        let epochs_done = r.u32()?;
        let epochs_since_best = r.u32()?;
        let n = r.u32()?;
        let mut history = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            history.push(EpochRecord {
                epoch: r.u32()?,
                train_loss: r.f64()?,
                val_loss: r.f64()?,
                seconds: r.f64()?,
            });
        }
        let best = match r.u8()? {
            0 => None,
            1 => {
                let epoch = r.u32()?;
                let val_loss = r.f64()?;
                let len = usize::try_from(r.u64()?).map_err(|_| Error::Format("best model size".into()))?;
                let (bp, _) = segnet::decode_params(r.take(len)?)?;
                Some(BestModel { params: bp, epoch, val_loss })
            }
            t => return Err(Error::Format(format!("bad best-model tag {t}"))),
        };
        if !r.remaining().is_empty() {
            return Err(Error::Format("trailing bytes after training state".into()));
        }
        Ok(TrainState {
            params,
            adam: AdamState { config, step, m, v },
            epochs_done,
            history,
            best,
            epochs_since_best,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    /// Where the returned parameters were saved, if a directory was given.
    pub checkpoint_path: Option<PathBuf>,
    /// Ids of every subject whose slices reached a gradient update in this
    /// run.
    pub trained_subjects: BTreeSet<String>,
}

impl TrainReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "train_loss", "val_loss", "seconds"])?;
        for r in &self.epochs {
            w.write_record([
                r.epoch.to_string(),
                r.train_loss.to_string(),
                r.val_loss.to_string(),
                r.seconds.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const MODEL_CHECKPOINT: &str = "model.ckpt";

pub fn state_checkpoint_name(epochs_done: usize) -> String {
    format!("state-{epochs_done:04}.ckpt")
}

/// Runs the epoch loop on an explicit train/validation split.
pub struct Trainer<'a> {
    config: TrainConfig,
    train: &'a [Subject],
    val: &'a [Subject],
    state: TrainState,
    checkpoint_dir: Option<PathBuf>,
    trained: BTreeSet<String>,
    stopped_early: bool,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, net: &NetConfig, train: &'a [Subject], val: &'a [Subject]) -> Result<Self> {
        let params = segnet::build(net)?;
        Self::from_state(config, TrainState::new(params, config.adam()), train, val)
    }

    /// Continues from a saved state; the optimizer settings stored in the
    /// state take precedence over `config`.
    pub fn from_state(config: TrainConfig, state: TrainState, train: &'a [Subject], val: &'a [Subject]) -> Result<Self> {
        config.validate()?;
        if train.is_empty() || val.is_empty() {
            return Err(Error::data("training and validation subject lists must be nonempty"));
        }
        if check_planes(train)? != check_planes(val)? {
            return Err(Error::data("training and validation slices differ in shape"));
        }
        Ok(Trainer {
            config,
            train,
            val,
            state,
            checkpoint_dir: None,
            trained: BTreeSet::new(),
            stopped_early: false,
        })
    }

    pub fn with_checkpoint_dir(mut self, dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        self.checkpoint_dir = Some(dir);
        Ok(self)
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn is_finished(&self) -> bool {
        self.stopped_early || self.state.epochs_done >= self.config.max_epochs
    }

    /// Trains one epoch and validates; returns `None` once finished.
    pub fn step_epoch(&mut self) -> Result<Option<EpochRecord>> {
        if self.is_finished() {
            return Ok(None);
        }
        let started = Instant::now();
        let epoch = self.state.epochs_done;
        let plan = sample_batches(self.train, self.config.batch_size, self.config.seed, epoch)?;
        let trainable = self.state.params.trainable_indices();
        let names: Vec<String> = trainable
            .iter()
            .map(|&i| self.state.params.by_index(i).name.clone())
            .collect();
        let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let mut total = 0.0;
        for (b, refs) in plan.iter().enumerate() {
            let (x, y) = assemble_batch(self.train, refs)?;
            let (probs, tape) = segnet::forward_train(&mut self.state.params, &x)?;
            let (loss, grad) = dice_ns_loss_backward(&probs, &y)?;
            if !loss.is_finite() {
                return Err(Error::Numerics(format!("epoch {epoch} batch {b}: loss is {loss}")));
            }
            let grads = segnet::backward(&self.state.params, &tape, &grad)?;
            let grad_refs: Vec<&[f64]> = trainable.iter().map(|&i| grads.0[i].as_slice()).collect();
            let mut param_refs: Vec<&mut [f64]> = self
                .state
                .params
                .params_mut()
                .iter_mut()
                .filter(|p| p.kind.is_trainable())
                .map(|p| p.data.as_mut_slice())
                .collect();
            self.state
                .adam
                .step(&name_refs, &mut param_refs, &grad_refs)
                .map_err(|e| match e {
                    Error::Numerics(msg) => Error::Numerics(format!("epoch {epoch} batch {b}: {msg}")),
                    other => other,
                })?;
            for r in refs {
                self.trained.insert(self.train[r.subject].id.clone());
            }
            total += loss;
        }
        let train_loss = total / plan.len() as f64;
        let val_loss = validation_loss(&self.state.params, self.val, self.config.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::Numerics(format!("epoch {epoch}: validation loss is {val_loss}")));
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            seconds: started.elapsed().as_secs_f64(),
        };
        self.state.history.push(record);
        self.state.epochs_done = epoch + 1;

        let improved = self.state.best.as_ref().is_none_or(|b| val_loss < b.val_loss);
        if improved {
            self.state.best = Some(BestModel {
                params: self.state.params.clone(),
                epoch,
                val_loss,
            });
            self.state.epochs_since_best = 0;
            if let Some(dir) = &self.checkpoint_dir {
                save_params(&self.state.params, RealWidth::F64, &dir.join(BEST_CHECKPOINT))?;
            }
        } else {
            self.state.epochs_since_best += 1;
        }
        if let Some(dir) = &self.checkpoint_dir {
            let every = self.config.checkpoint_every;
            if every > 0 && self.state.epochs_done.is_multiple_of(every) {
                self.state.save(&dir.join(state_checkpoint_name(self.state.epochs_done)))?;
            }
        }
        let patience = self.config.early_stop_patience;
        if patience > 0 && self.state.epochs_since_best >= patience {
            self.stopped_early = true;
        }
        Ok(Some(record))
    }

    /// Trains to completion and returns the best-validation parameters
    /// (the initial parameters when no epoch ran).
    pub fn run(mut self) -> Result<(ModelParams, TrainReport)> {
        while self.step_epoch()?.is_some() {}
        let params = match &self.state.best {
            Some(b) => b.params.clone(),
            None => self.state.params.clone(),
        };
        let checkpoint_path = match &self.checkpoint_dir {
            Some(dir) => {
                let p = dir.join(MODEL_CHECKPOINT);
                save_params(&params, RealWidth::F64, &p)?;
                Some(p)
            }
            None => None,
        };
        Ok((
            params,
            TrainReport {
                epochs: self.state.history.clone(),
                best_epoch: self.state.best.as_ref().map(|b| b.epoch),
                stopped_early: self.stopped_early,
                checkpoint_path,
                trained_subjects: self.trained,
            },
        ))
    }
}

/// Builds a fresh network and trains it on `train`, validating on `val`.
pub fn train(
    config: &TrainConfig,
    net: &NetConfig,
    train: &[Subject],
    val: &[Subject],
    checkpoint_dir: Option<&Path>,
) -> Result<(ModelParams, TrainReport)> {
    let mut t = Trainer::new(*config, net, train, val)?;
    if let Some(dir) = checkpoint_dir {
        t = t.with_checkpoint_dir(dir)?;
    }
    t.run()
}
