//! Dilated residual segmentation network.
//!
//! Layer plan:
//!
//! ```text
//! stem   3×3 conv, dilation 1, in_channels → c1
//! group  g ∈ {1, 2, 3} with dilation 1, 2, 4 and width c_g:
//!        blocks_per_group × [BN → ReLU → conv(d_g) → BN → ReLU → conv(d_g)] + skip
//! head   BN → ReLU → 1×1 conv → channel softmax
//! ```
//!
//! Skips are identities; when a block widens the feature map the skip is
//! zero-padded in the channel dimension, so no convolution is added beyond
//! the 1 + 2·3·blocks_per_group + 1 layers above.

pub(crate) mod checkpoint;
mod params;

pub use checkpoint::{
    decode_params, encode_params, load_params, save_params, RealWidth, CHECKPOINT_MAGIC,
};
pub use params::{ModelParams, Param, ParamKind};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::tensor::{
    conv_backward_raw, conv_forward_raw, norm_raw, softmax_backward_raw, softmax_raw,
    BatchNormCache, ConvGeometry, Mode, RunningStats, Tensor4,
};
use crate::volume::Image2;

/// Dilation of each of the three residual groups.
pub const GROUP_DILATIONS: [usize; 3] = [1, 2, 4];

/// Smallest spatial extent accepted by [`infer`] and [`forward_train`].
pub const MIN_EXTENT: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub group_channels: [usize; 3],
    pub blocks_per_group: usize,
    pub kernel: usize,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            in_channels: 1,
            num_classes: 2,
            group_channels: [16, 32, 64],
            blocks_per_group: 3,
            kernel: 3,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::config("in_channels must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if self.group_channels.contains(&0) {
            return Err(Error::config("group channel counts must be positive"));
        }
        if self.group_channels.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::config(
                "group channel counts must be non-decreasing (skips zero-pad, never truncate)",
            ));
        }
        if self.blocks_per_group == 0 {
            return Err(Error::config("blocks_per_group must be positive"));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::config("kernel extent must be odd"));
        }
        Ok(())
    }

    /// Number of convolution layers the plan contains.
    pub fn conv_layers(&self) -> usize {
        2 + 2 * 3 * self.blocks_per_group
    }
}

impl NetConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        kv.check_keys(&["in_channels", "num_classes", "group_channels", "blocks_per_group", "kernel", "seed"])?;
        let d = NetConfig::default();
        let c = NetConfig {
            in_channels: kv.get("in_channels")?.unwrap_or(d.in_channels),
            num_classes: kv.get("num_classes")?.unwrap_or(d.num_classes),
            group_channels: kv.array3("group_channels", d.group_channels)?,
            blocks_per_group: kv.get("blocks_per_group")?.unwrap_or(d.blocks_per_group),
            kernel: kv.get("kernel")?.unwrap_or(d.kernel),
            seed: kv.get("seed")?.unwrap_or(d.seed),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let mut kv = KeyValues::default();
        kv.insert("in_channels", self.in_channels);
        kv.insert("num_classes", self.num_classes);
        kv.insert(
            "group_channels",
            self.group_channels.map(|c| c.to_string()).join(" "),
        );
        kv.insert("blocks_per_group", self.blocks_per_group);
        kv.insert("kernel", self.kernel);
        kv.insert("seed", self.seed);
        kv.to_text()
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvIdx {
    cin: usize,
    cout: usize,
    k: usize,
    dilation: usize,
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct BnIdx {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Debug, Clone, Copy)]
struct BlockIdx {
    cin: usize,
    cout: usize,
    bn1: BnIdx,
    conv1: ConvIdx,
    bn2: BnIdx,
    conv2: ConvIdx,
}

#[derive(Debug, Clone)]
struct Plan {
    stem: ConvIdx,
    blocks: Vec<BlockIdx>,
    head_bn: BnIdx,
    head: ConvIdx,
}

/// Builds the parameter list, or the plan over an existing list.
struct PlanBuilder<'a> {
    params: Vec<Param>,
    existing: Option<&'a ModelParams>,
    rng: ChaCha8Rng,
}

impl PlanBuilder<'_> {
    fn tensor(&mut self, name: String, shape: Vec<usize>, kind: ParamKind, init: impl FnOnce(&mut ChaCha8Rng, usize) -> Vec<f64>) -> Result<usize> {
        let len: usize = shape.iter().product();
        if let Some(existing) = self.existing {
            let idx = existing
                .index_of(&name)
                .ok_or_else(|| Error::Format(format!("missing parameter {name}")))?;
            let p = existing.by_index(idx);
            if p.shape != shape || p.data.len() != len {
                return Err(Error::Format(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    p.shape
                )));
            }
            return Ok(idx);
        }
        let data = init(&mut self.rng, len);
        self.params.push(Param { name, shape, data, kind });
        Ok(self.params.len() - 1)
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, dilation: usize) -> Result<ConvIdx> {
        let fan_in = (cin * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let weight = self.tensor(format!("{prefix}.weight"), vec![cout, cin, k, k], ParamKind::Weight, |rng, n| {
            (0..n).map(|_| normal.sample(rng)).collect()
        })?;
        let bias = self.tensor(format!("{prefix}.bias"), vec![cout], ParamKind::Bias, |_, n| vec![0.0; n])?;
        Ok(ConvIdx { cin, cout, k, dilation, weight, bias })
    }

    fn bn(&mut self, prefix: &str, c: usize) -> Result<BnIdx> {
        Ok(BnIdx {
            gamma: self.tensor(format!("{prefix}.gamma"), vec![c], ParamKind::Gamma, |_, n| vec![1.0; n])?,
            beta: self.tensor(format!("{prefix}.beta"), vec![c], ParamKind::Beta, |_, n| vec![0.0; n])?,
            mean: self.tensor(format!("{prefix}.running_mean"), vec![c], ParamKind::RunningMean, |_, n| vec![0.0; n])?,
            var: self.tensor(format!("{prefix}.running_var"), vec![c], ParamKind::RunningVar, |_, n| vec![1.0; n])?,
        })
    }
}

fn make_plan(config: &NetConfig, existing: Option<&ModelParams>) -> Result<(Plan, Vec<Param>)> {
    config.validate()?;
    let mut b = PlanBuilder {
        params: Vec::new(),
        existing,
        rng: ChaCha8Rng::seed_from_u64(config.seed),
    };
    let k = config.kernel;
    let c0 = config.group_channels[0];
    let stem = b.conv("stem.conv", config.in_channels, c0, k, 1)?;
    let mut blocks = Vec::new();
    let mut cin = c0;
    for (g, (&width, &dilation)) in config.group_channels.iter().zip(&GROUP_DILATIONS).enumerate() {
        for blk in 0..config.blocks_per_group {
            let p = format!("g{}.b{}", g + 1, blk);
            let bn1 = b.bn(&format!("{p}.bn1"), cin)?;
            let conv1 = b.conv(&format!("{p}.conv1"), cin, width, k, dilation)?;
            let bn2 = b.bn(&format!("{p}.bn2"), width)?;
            let conv2 = b.conv(&format!("{p}.conv2"), width, width, k, dilation)?;
            blocks.push(BlockIdx { cin, cout: width, bn1, conv1, bn2, conv2 });
            cin = width;
        }
    }
    let head_bn = b.bn("head.bn", cin)?;
    let head = b.conv("head.conv", cin, config.num_classes, 1, 1)?;
    Ok((Plan { stem, blocks, head_bn, head }, b.params))
}

/// Creates freshly initialized parameters: He-normal (fan-in) conv weights
/// drawn from a generator seeded with `config.seed`, zero biases, unit
/// gamma, zero beta.
pub fn build(config: &NetConfig) -> Result<ModelParams> {
    let (_, params) = make_plan(config, None)?;
    Ok(ModelParams { config: *config, params })
}

fn plan_for(params: &ModelParams) -> Result<Plan> {
    let (plan, _) = make_plan(&params.config, Some(params))?;
    Ok(plan)
}

/// Activations kept from a training forward pass for the backward pass.
///
/// Only block inputs and first-conv outputs are stored; the batch-norm and
/// ReLU outputs feeding each convolution are recomputed during backward.
pub struct Tape {
    shape: [usize; 4],
    input: Vec<f64>,
    blocks: Vec<BlockTape>,
    head_x: Vec<f64>,
    head_bn: BatchNormCache,
    probs: Vec<f64>,
}

struct BlockTape {
    x: Vec<f64>,
    bn1: BatchNormCache,
    y1: Vec<f64>,
    bn2: BatchNormCache,
}

/// Per-tensor gradients aligned with the parameter list; running
/// statistics get empty vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

struct Dims {
    n: usize,
    h: usize,
    w: usize,
}

impl Dims {
    fn plane(&self) -> usize {
        self.h * self.w
    }

    fn conv(&self, c: &ConvIdx) -> ConvGeometry {
        ConvGeometry {
            batch: self.n,
            in_ch: c.cin,
            out_ch: c.cout,
            height: self.h,
            width: self.w,
            kh: c.k,
            kw: c.k,
            dilation: c.dilation,
        }
    }
}

fn check_batch(params: &ModelParams, batch: &Tensor4) -> Result<Dims> {
    let [n, c, h, w] = batch.shape();
    if c != params.config.in_channels {
        return Err(Error::shape(format!(
            "batch has {c} channels, network expects {}",
            params.config.in_channels
        )));
    }
    if h < MIN_EXTENT || w < MIN_EXTENT {
        return Err(Error::shape(format!(
            "slices must be at least {MIN_EXTENT}x{MIN_EXTENT}, got {h}x{w}"
        )));
    }
    Ok(Dims { n, h, w })
}

fn conv(params: &[Param], dims: &Dims, c: &ConvIdx, input: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; dims.n * c.cout * dims.plane()];
    conv_forward_raw(&dims.conv(c), input, &params[c.weight].data, Some(&params[c.bias].data), &mut out);
    out
}

/// BN statistics for `mode`, updating running statistics in train mode.
fn bn_stats(params: &mut [Param], dims: &Dims, bn: &BnIdx, x: &[f64], mode: Mode) -> BatchNormCache {
    let c = params[bn.gamma].data.len();
    let mut running = RunningStats {
        mean: std::mem::take(&mut params[bn.mean].data),
        var: std::mem::take(&mut params[bn.var].data),
    };
    let cache = norm_raw::stats_for(x, dims.n, c, dims.plane(), &mut running, mode);
    params[bn.mean].data = running.mean;
    params[bn.var].data = running.var;
    cache
}

fn bn_relu(params: &[Param], dims: &Dims, bn: &BnIdx, cache: &BatchNormCache, x: &[f64]) -> Vec<f64> {
    let c = params[bn.gamma].data.len();
    let mut out = vec![0.0; x.len()];
    norm_raw::apply(x, dims.n, c, dims.plane(), &params[bn.gamma].data, &params[bn.beta].data, cache, &mut out);
    for v in &mut out {
        *v = v.max(0.0);
    }
    out
}

/// Adjoint of `bn_relu`: returns (dx, dgamma, dbeta).
fn bn_relu_backward(
    params: &[Param],
    dims: &Dims,
    bn: &BnIdx,
    cache: &BatchNormCache,
    x: &[f64],
    relu_out: &[f64],
    mut dr: Vec<f64>,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let c = params[bn.gamma].data.len();
    for (g, r) in dr.iter_mut().zip(relu_out) {
        if *r <= 0.0 {
            *g = 0.0;
        }
    }
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    norm_raw::backward_raw(x, dims.n, c, dims.plane(), &params[bn.gamma].data, cache, &dr, &mut dx, &mut dgamma, &mut dbeta);
    (dx, dgamma, dbeta)
}

/// Adds `x` (cin channels) into the first cin channels of `out` (cout channels).
fn add_skip(dims: &Dims, cin: usize, cout: usize, x: &[f64], out: &mut [f64]) {
    let plane = dims.plane();
    for b in 0..dims.n {
        let src = &x[b * cin * plane..(b + 1) * cin * plane];
        let dst = &mut out[b * cout * plane..b * cout * plane + cin * plane];
        for (d, s) in dst.iter_mut().zip(src) {
            *d += *s;
        }
    }
}

fn run_forward(params: &mut ModelParams, plan: &Plan, batch: &Tensor4, mode: Mode, keep: bool) -> Result<(Tensor4, Option<Tape>)> {
    let dims = check_batch(params, batch)?;
    let p = params.params_mut();
    let mut x = conv(p, &dims, &plan.stem, batch.data());
    let mut tapes = Vec::new();
    for blk in &plan.blocks {
        let bn1 = bn_stats(p, &dims, &blk.bn1, &x, mode);
        let r1 = bn_relu(p, &dims, &blk.bn1, &bn1, &x);
        let y1 = conv(p, &dims, &blk.conv1, &r1);
        drop(r1);
        let bn2 = bn_stats(p, &dims, &blk.bn2, &y1, mode);
        let r2 = bn_relu(p, &dims, &blk.bn2, &bn2, &y1);
        let mut out = conv(p, &dims, &blk.conv2, &r2);
        drop(r2);
        add_skip(&dims, blk.cin, blk.cout, &x, &mut out);
        let prev = std::mem::replace(&mut x, out);
        if keep {
            tapes.push(BlockTape { x: prev, bn1, y1, bn2 });
        }
    }
    let head_bn = bn_stats(p, &dims, &plan.head_bn, &x, mode);
    let r = bn_relu(p, &dims, &plan.head_bn, &head_bn, &x);
    let logits = conv(p, &dims, &plan.head, &r);
    let classes = plan.head.cout;
    let mut probs = vec![0.0; logits.len()];
    softmax_raw(&logits, dims.n, classes, dims.plane(), &mut probs);
    if !probs.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerics("non-finite network output".into()));
    }
    let out = Tensor4::from_vec([dims.n, classes, dims.h, dims.w], probs)?;
    let tape = keep.then(|| Tape {
        shape: batch.shape(),
        input: batch.data().to_vec(),
        blocks: tapes,
        head_x: x,
        head_bn,
        probs: out.data().to_vec(),
    });
    Ok((out, tape))
}

/// Inference-mode forward pass (batch norm uses running statistics).
pub fn infer(params: &ModelParams, batch: &Tensor4) -> Result<Tensor4> {
    let plan = plan_for(params)?;
    // infer mode never writes running stats, but the shared code path takes
    // the parameters mutably
    let mut scratch = params.clone();
    let (out, _) = run_forward(&mut scratch, &plan, batch, Mode::Infer, false)?;
    Ok(out)
}

/// Training-mode forward pass: normalizes with batch statistics, updates
/// running statistics, and returns the tape needed by [`backward`].
pub fn forward_train(params: &mut ModelParams, batch: &Tensor4) -> Result<(Tensor4, Tape)> {
    let plan = plan_for(params)?;
    let (out, tape) = run_forward(params, &plan, batch, Mode::Train, true)?;
    Ok((out, tape.expect("tape requested")))
}

/// Forward pass in either mode without keeping a tape.
pub fn forward(params: &mut ModelParams, batch: &Tensor4, mode: Mode) -> Result<Tensor4> {
    let plan = plan_for(params)?;
    Ok(run_forward(params, &plan, batch, mode, false)?.0)
}

/// Gradients of a scalar loss with respect to every trainable tensor, given
/// the loss gradient with respect to the output probabilities.
pub fn backward(params: &ModelParams, tape: &Tape, grad_probs: &Tensor4) -> Result<Gradients> {
    let plan = plan_for(params)?;
    let [n, _, h, w] = tape.shape;
    let dims = Dims { n, h, w };
    let classes = plan.head.cout;
    if grad_probs.shape() != [n, classes, h, w] {
        return Err(Error::shape(format!(
            "output gradient {:?} does not match network output",
            grad_probs.shape()
        )));
    }
    let p = &params.params;
    let mut grads: Vec<Vec<f64>> = vec![Vec::new(); p.len()];
    let mut put = |idx: usize, g: Vec<f64>| grads[idx] = g;

    let mut dlogits = vec![0.0; tape.probs.len()];
    softmax_backward_raw(&tape.probs, grad_probs.data(), n, classes, dims.plane(), &mut dlogits);

    let r = bn_relu(p, &dims, &plan.head_bn, &tape.head_bn, &tape.head_x);
    let (dr, gw, gb) = conv_grads(p, &dims, &plan.head, &r, &dlogits, true);
    put(plan.head.weight, gw);
    put(plan.head.bias, gb);
    let (mut dx, dgamma, dbeta) = bn_relu_backward(p, &dims, &plan.head_bn, &tape.head_bn, &tape.head_x, &r, dr);
    put(plan.head_bn.gamma, dgamma);
    put(plan.head_bn.beta, dbeta);

    for (blk, bt) in plan.blocks.iter().zip(&tape.blocks).rev() {
        let r2 = bn_relu(p, &dims, &blk.bn2, &bt.bn2, &bt.y1);
        let (dr2, gw2, gb2) = conv_grads(p, &dims, &blk.conv2, &r2, &dx, true);
        put(blk.conv2.weight, gw2);
        put(blk.conv2.bias, gb2);
        let (dy1, dg2, db2) = bn_relu_backward(p, &dims, &blk.bn2, &bt.bn2, &bt.y1, &r2, dr2);
        drop(r2);
        put(blk.bn2.gamma, dg2);
        put(blk.bn2.beta, db2);

        let r1 = bn_relu(p, &dims, &blk.bn1, &bt.bn1, &bt.x);
        let (dr1, gw1, gb1) = conv_grads(p, &dims, &blk.conv1, &r1, &dy1, true);
        put(blk.conv1.weight, gw1);
        put(blk.conv1.bias, gb1);
        let (mut dxb, dg1, db1) = bn_relu_backward(p, &dims, &blk.bn1, &bt.bn1, &bt.x, &r1, dr1);
        put(blk.bn1.gamma, dg1);
        put(blk.bn1.beta, db1);

        // skip path: the block input feeds the first cin output channels
        let plane = dims.plane();
        for b in 0..n {
            let src = &dx[b * blk.cout * plane..b * blk.cout * plane + blk.cin * plane];
            let dst = &mut dxb[b * blk.cin * plane..(b + 1) * blk.cin * plane];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += *s;
            }
        }
        dx = dxb;
    }

    let (_, gw, gb) = conv_grads(p, &dims, &plan.stem, &tape.input, &dx, false);
    put(plan.stem.weight, gw);
    put(plan.stem.bias, gb);
    Ok(Gradients(grads))
}

fn conv_grads(params: &[Param], dims: &Dims, c: &ConvIdx, input: &[f64], grad_out: &[f64], need_input: bool) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gi = if need_input { vec![0.0; input.len()] } else { Vec::new() };
    let mut gw = vec![0.0; params[c.weight].data.len()];
    let mut gb = vec![0.0; c.cout];
    conv_backward_raw(
        &dims.conv(c),
        input,
        &params[c.weight].data,
        grad_out,
        need_input.then_some(gi.as_mut_slice()),
        &mut gw,
        Some(&mut gb),
    );
    (gi, gw, gb)
}

/// Foreground (lung) probability threshold; ties go to background.
pub const LUNG_THRESHOLD: f64 = 0.5;

/// Thresholds channel 1 of each batch element into a binary slice mask.
pub fn predict_mask(probs: &Tensor4) -> Result<Vec<Image2<bool>>> {
    let [n, c, h, w] = probs.shape();
    if c < 2 {
        return Err(Error::shape("probability maps need a lung channel"));
    }
    Ok((0..n)
        .map(|b| {
            let data = probs.plane_slice(b, 1).iter().map(|&p| p > LUNG_THRESHOLD).collect();
            Image2::from_vec(h, w, data).expect("plane size")
        })
        .collect())
}
