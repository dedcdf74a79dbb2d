//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Pass a substring as the first free argument to run only matching
//! criteria, e.g. `cargo test -p lungseg-cli --test acceptance -- dilation`.

use std::collections::BTreeSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use lungseg_core::metrics::{confusion, evaluate_case, read_case_metrics, CaseInputs, CaseMetrics, Confusion, Metric};
use lungseg_core::phantom::{generate_corpus, Cohort, CorpusCounts, PhantomSpec, MANIFEST_FILE};
use lungseg_core::pipeline::{
    evaluate_dir, infer_dir, preprocess_manifest, read_prepared_index, report_from_csv, train_from_dir, Layout,
};
use lungseg_core::report::{BOXPLOT_FILE, OUTLIERS_FILE, SUMMARY_FILE};
use lungseg_core::segnet::{self, NetConfig};
use lungseg_core::tensor::{
    batchnorm, batchnorm_backward, conv2d_backward, conv2d_forward, dice_ns_loss, dice_ns_loss_backward, relu,
    relu_backward, softmax_channels, softmax_channels_backward, ConvKernel, Mode, RunningStats,
};
use lungseg_core::trainer::TrainConfig;
use lungseg_core::volume::{decode_nifti, encode_nifti, BinaryMask, CropRule, PreprocSpec, Volume, VoxelType};
use lungseg_core::Tensor4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() {
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("metric-oracle equivalence", metric_oracle),
        ("dice-jaccard identity", dice_jaccard_identity),
        ("gradient suite", gradient_suite),
        ("dilation oracle", dilation_oracle),
        ("phantom training", phantom_training),
        ("preprocessing contract", preprocessing_contract),
        ("determinism", determinism),
        ("report shape", report_shape),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (name, check) in criteria {
        if filter.as_deref().is_some_and(|f| !name.contains(f)) {
            continue;
        }
        ran += 1;
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name:<28} {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name:<28} {detail} [{secs:.1}s]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// metrics

struct OracleMetrics {
    counts: [u64; 4],
    values: [Option<f64>; 10],
}

/// Brute-force evaluation over explicit (x, y, z) loops.
fn oracle(r: &BinaryMask, p: &BinaryMask, d: &BinaryMask, image: &Volume, hu: &Volume, spacing: [f64; 3]) -> OracleMetrics {
    let [nx, ny, nz] = r.dims();
    let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
    let (mut union, mut err, mut abs_err) = (0u64, 0.0, 0.0);
    let (mut nr, mut np, mut hu_r, mut hu_p) = (0u64, 0u64, 0.0, 0.0);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let (rv, pv) = (r.get(x, y, z), p.get(x, y, z));
                if d.get(x, y, z) {
                    match (rv, pv) {
                        (true, true) => tp += 1,
                        (false, true) => fp += 1,
                        (true, false) => fn_ += 1,
                        (false, false) => tn += 1,
                    }
                }
                if rv || pv {
                    union += 1;
                    let v = image.get(x, y, z);
                    let e = if pv { v } else { 0.0 } - if rv { v } else { 0.0 };
                    err += e;
                    abs_err += e.abs();
                }
                if rv {
                    nr += 1;
                    hu_r += hu.get(x, y, z);
                }
                if pv {
                    np += 1;
                    hu_p += hu.get(x, y, z);
                }
            }
        }
    }
    let ratio = |a: f64, b: f64| (b != 0.0).then(|| a / b);
    let dsc = ratio(2.0 * tp as f64, (2 * tp + fp + fn_) as f64);
    let jc = ratio(tp as f64, (tp + fp + fn_) as f64);
    let reference = (tp + fn_) as f64;
    let me = ratio(err, union as f64);
    let mae = ratio(abs_err, union as f64);
    let fpr = ratio(fp as f64, reference);
    let fnr = ratio(fn_ as f64, reference);
    let mean_r = ratio(hu_r, nr as f64);
    let mean_p = ratio(hu_p, np as f64);
    let rel_hu = match (mean_r, mean_p) {
        (Some(a), Some(b)) if a != 0.0 => Some(100.0 * (b - a) / a),
        _ => None,
    };
    let voxel = spacing[0] * spacing[1] * spacing[2];
    let rel_vol = ratio(100.0 * (np as f64 * voxel - nr as f64 * voxel), nr as f64 * voxel);
    OracleMetrics {
        counts: [tp, fp, fn_, tn],
        values: [dsc, jc, me, mae, fpr, fnr, rel_hu, rel_hu.map(f64::abs), rel_vol, rel_vol.map(f64::abs)],
    }
}

fn random_mask(rng: &mut ChaCha8Rng, dims: [usize; 3], spacing: [f64; 3]) -> BinaryMask {
    let n = dims.iter().product();
    // occasionally empty or full, otherwise a random density
    let density = match rng.random_range(0..10) {
        0 => 0.0,
        1 => 1.0,
        _ => rng.random::<f64>(),
    };
    BinaryMask::new(dims, (0..n).map(|_| rng.random::<f64>() < density).collect(), spacing).unwrap()
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut undefined = 0;
    let mut worst: f64 = 0.0;
    for case in 0..200 {
        let dims = [rng.random_range(1..=16), rng.random_range(1..=16), rng.random_range(1..=8)];
        let n: usize = dims.iter().product();
        let spacing = [rng.random_range(0.5..2.0), rng.random_range(0.5..2.0), rng.random_range(1.0..5.0)];
        let reference = random_mask(&mut rng, dims, spacing);
        let pred = random_mask(&mut rng, dims, spacing);
        let domain = if rng.random::<bool>() {
            BinaryMask::new(dims, vec![true; n], spacing).unwrap()
        } else {
            random_mask(&mut rng, dims, spacing)
        };
        let image = Volume::new(dims, (0..n).map(|_| rng.random::<f64>()).collect(), spacing).unwrap();
        let hu = Volume::new(dims, (0..n).map(|_| rng.random_range(-1024.0..400.0)).collect(), spacing).unwrap();

        let c = confusion(&reference, &pred, &domain).map_err(|e| e.to_string())?;
        let got = evaluate_case(
            "c",
            Cohort::Normal,
            &CaseInputs { reference: &reference, pred: &pred, image: &image, hu: &hu, domain: &domain, spacing },
        )
        .map_err(|e| e.to_string())?;
        let want = oracle(&reference, &pred, &domain, &image, &hu, spacing);
        ensure!([c.tp, c.fp, c.fn_, c.tn] == want.counts, "case {case}: counts {c:?} vs {:?}", want.counts);
        for m in Metric::ALL {
            match (got.get(m), want.values[m as usize]) {
                (None, None) => undefined += 1,
                (Some(a), Some(b)) => {
                    let err = (a - b).abs() / b.abs().max(1.0);
                    worst = worst.max(err);
                    ensure!(err <= 1e-12, "case {case}: {} = {a}, oracle {b}", m.key());
                }
                (a, b) => return Err(format!("case {case}: {} defined mismatch {a:?} vs {b:?}", m.key())),
            }
        }
    }
    Ok(format!("200 cases, counts exact, max scaled error {worst:.1e}, {undefined} undefined values agree"))
}

fn dice_jaccard_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    while checked < 10_000 {
        let scale = 10u64.pow(rng.random_range(0..7));
        let c = Confusion {
            tp: rng.random_range(0..=scale),
            fp: rng.random_range(0..=scale),
            fn_: rng.random_range(0..=scale),
            tn: rng.random_range(0..=scale),
        };
        let (Ok(dsc), Ok(jc)) = (c.dsc(), c.jaccard()) else {
            ensure!(c.union_count() == 0, "{c:?}: undefined with a nonempty union");
            continue;
        };
        let err = (jc - dsc / (2.0 - dsc)).abs();
        worst = worst.max(err);
        ensure!(err <= 1e-12, "{c:?}: jc {jc} vs dsc/(2-dsc) {}", dsc / (2.0 - dsc));
        checked += 1;
    }
    Ok(format!("10000 count sets, max error {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// gradients

const FD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
/// Lower bound on the scale in the relative error, so gradients that are
/// zero analytically are compared in absolute terms.
const GRAD_FLOOR: f64 = 1e-6;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Central difference of `f` at `x` along coordinate `i`.
fn central(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    xp[i] += h;
    let up = f(&xp);
    xp[i] = x[i] - h;
    let down = f(&xp);
    (up - down) / (2.0 * h)
}

#[derive(Default)]
struct GradStats {
    checks: usize,
    worst: f64,
    skipped: usize,
}

impl GradStats {
    /// Compares every coordinate of `analytic` (or `limit` random ones).
    fn check(
        &mut self,
        what: &str,
        rng: &mut ChaCha8Rng,
        x: &[f64],
        analytic: &[f64],
        limit: usize,
        f: &mut dyn FnMut(&[f64]) -> f64,
    ) -> Result<(), String> {
        let coords: Vec<usize> = if x.len() <= limit {
            (0..x.len()).collect()
        } else {
            (0..limit).map(|_| rng.random_range(0..x.len())).collect()
        };
        for i in coords {
            let n = central(f, x, i, FD_STEP);
            let e = rel_err(analytic[i], n);
            self.checks += 1;
            self.worst = self.worst.max(e);
            ensure!(e <= GRAD_TOL, "{what}[{i}]: analytic {} numeric {n} rel err {e:.2e}", analytic[i]);
        }
        Ok(())
    }
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4], lo: f64, hi: f64) -> Tensor4 {
    Tensor4::from_vec(shape, rand_vec(rng, shape.iter().product(), lo, hi)).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn one_hot(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor4 {
    let [n, c, h, w] = shape;
    let mut t = Tensor4::zeros(shape).unwrap();
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                t.set(b, rng.random_range(0..c), y, x, 1.0);
            }
        }
    }
    t
}

fn grad_conv(rng: &mut ChaCha8Rng, s: &mut GradStats) -> Result<(), String> {
    let k = [1, 3, 5][rng.random_range(0..3)];
    let d = [1, 2, 4][rng.random_range(0..3)];
    let (n, cin, cout) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
    let shape = [n, cin, rng.random_range(3..9), rng.random_range(3..9)];
    let kshape = [cout, cin, k, k];
    let x = rand_tensor(rng, shape, -1.0, 1.0);
    let w = rand_vec(rng, cout * cin * k * k, -1.0, 1.0);
    let b = rand_vec(rng, cout, -1.0, 1.0);
    let kernel = ConvKernel::new(kshape, w.clone(), d, Some(b.clone())).unwrap();
    let out = conv2d_forward(&x, &kernel).unwrap();
    let r = rand_tensor(rng, out.shape(), -1.0, 1.0);
    let g = conv2d_backward(&x, &kernel, &r).unwrap();
    let obj = |x: &Tensor4, k: &ConvKernel| dot(conv2d_forward(x, k).unwrap().data(), r.data());

    s.check("conv input", rng, x.data(), g.input.data(), 40, &mut |v| {
        obj(&Tensor4::from_vec(shape, v.to_vec()).unwrap(), &kernel)
    })?;
    s.check("conv weights", rng, &w, &g.weights, 40, &mut |v| {
        obj(&x, &ConvKernel::new(kshape, v.to_vec(), d, Some(b.clone())).unwrap())
    })?;
    s.check("conv bias", rng, &b, g.bias.as_deref().unwrap(), 40, &mut |v| {
        obj(&x, &ConvKernel::new(kshape, w.clone(), d, Some(v.to_vec())).unwrap())
    })
}

fn grad_batchnorm(rng: &mut ChaCha8Rng, s: &mut GradStats, mode: Mode) -> Result<(), String> {
    let c = rng.random_range(1..4);
    let shape = [rng.random_range(1..3), c, rng.random_range(2..6), rng.random_range(2..6)];
    let x = rand_tensor(rng, shape, -2.0, 2.0);
    let gamma = rand_vec(rng, c, 0.5, 1.5);
    let beta = rand_vec(rng, c, -0.5, 0.5);
    let running = RunningStats { mean: rand_vec(rng, c, -0.5, 0.5), var: rand_vec(rng, c, 0.5, 2.0) };
    let fwd = |x: &Tensor4, g: &[f64], b: &[f64]| batchnorm(x, g, b, &mut running.clone(), mode).unwrap();
    let (out, cache) = fwd(&x, &gamma, &beta);
    let r = rand_tensor(rng, out.shape(), -1.0, 1.0);
    let (dx, dg, db) = batchnorm_backward(&x, &gamma, &cache, &r).unwrap();
    let obj = |x: &Tensor4, g: &[f64], b: &[f64]| dot(fwd(x, g, b).0.data(), r.data());
    let label = if mode == Mode::Train { "bn train" } else { "bn infer" };

    s.check(&format!("{label} input"), rng, x.data(), dx.data(), 40, &mut |v| {
        obj(&Tensor4::from_vec(shape, v.to_vec()).unwrap(), &gamma, &beta)
    })?;
    s.check(&format!("{label} gamma"), rng, &gamma, &dg, 40, &mut |v| obj(&x, v, &beta))?;
    s.check(&format!("{label} beta"), rng, &beta, &db, 40, &mut |v| obj(&x, &gamma, v))
}

fn grad_relu(rng: &mut ChaCha8Rng, s: &mut GradStats) -> Result<(), String> {
    let shape = [rng.random_range(1..3), rng.random_range(1..4), rng.random_range(2..6), rng.random_range(2..6)];
    let mut x = rand_tensor(rng, shape, -1.0, 1.0);
    // keep every input away from the kink at zero
    for v in x.data_mut() {
        if v.abs() < 0.01 {
            *v = 0.01f64.copysign(*v);
        }
    }
    let r = rand_tensor(rng, shape, -1.0, 1.0);
    let dx = relu_backward(&x, &r).unwrap();
    s.check("relu input", rng, x.data(), dx.data(), 40, &mut |v| {
        dot(relu(&Tensor4::from_vec(shape, v.to_vec()).unwrap()).data(), r.data())
    })
}

fn grad_softmax(rng: &mut ChaCha8Rng, s: &mut GradStats) -> Result<(), String> {
    let shape = [rng.random_range(1..3), rng.random_range(2..5), rng.random_range(2..6), rng.random_range(2..6)];
    let x = rand_tensor(rng, shape, -3.0, 3.0);
    let r = rand_tensor(rng, shape, -1.0, 1.0);
    let probs = softmax_channels(&x).unwrap();
    let dx = softmax_channels_backward(&probs, &r).unwrap();
    s.check("softmax logits", rng, x.data(), dx.data(), 40, &mut |v| {
        dot(softmax_channels(&Tensor4::from_vec(shape, v.to_vec()).unwrap()).unwrap().data(), r.data())
    })
}

fn grad_dice(rng: &mut ChaCha8Rng, s: &mut GradStats) -> Result<(), String> {
    let shape = [rng.random_range(1..3), rng.random_range(2..4), rng.random_range(2..6), rng.random_range(2..6)];
    let p = rand_tensor(rng, shape, 0.0, 1.0);
    let t = one_hot(rng, shape);
    let (_, dp) = dice_ns_loss_backward(&p, &t).unwrap();
    s.check("dice probs", rng, p.data(), dp.data(), 40, &mut |v| {
        dice_ns_loss(&Tensor4::from_vec(shape, v.to_vec()).unwrap(), &t).unwrap()
    })
}

/// Network (training-mode batch norm) followed by softmax and Dice_NS,
/// differentiated with respect to randomly chosen parameters.
fn grad_network(rng: &mut ChaCha8Rng, s: &mut GradStats, seed: u64) -> Result<(), String> {
    let config = NetConfig { seed, ..NetConfig::default() };
    let mut params = segnet::build(&config).unwrap();
    // non-trivial affine and bias values so no gradient vanishes by symmetry
    let names: Vec<String> = params.iter().filter(|p| p.kind.is_trainable()).map(|p| p.name.clone()).collect();
    for name in &names {
        let p = params.get_mut(name).unwrap();
        if !name.ends_with(".weight") {
            let base = if name.ends_with(".gamma") { 1.0 } else { 0.0 };
            p.data.iter_mut().for_each(|v| *v = base + rng.random_range(-0.3..0.3));
        }
    }
    let shape = [2, 1, 9, 9];
    let x = rand_tensor(rng, shape, 0.0, 1.0);
    let target = one_hot(rng, [2, 2, 9, 9]);
    let loss = |p: &lungseg_core::segnet::ModelParams| {
        let mut p = p.clone();
        let (probs, _) = segnet::forward_train(&mut p, &x).unwrap();
        dice_ns_loss(&probs, &target).unwrap()
    };
    let mut work = params.clone();
    let (probs, tape) = segnet::forward_train(&mut work, &x).unwrap();
    let (_, dprobs) = dice_ns_loss_backward(&probs, &target).unwrap();
    let grads = segnet::backward(&params, &tape, &dprobs).unwrap();
    let index: Vec<usize> = params.trainable_indices();

    let mut checked = 0;
    let mut tries = 0;
    while checked < 12 {
        tries += 1;
        ensure!(tries <= 60, "network: only {checked} of 60 coordinates free of activation kinks");
        let pi = index[rng.random_range(0..index.len())];
        let name = params.by_index(pi).name.clone();
        let base = params.by_index(pi).data.clone();
        let i = rng.random_range(0..base.len());
        let mut f = |v: &[f64]| {
            let mut q = params.clone();
            q.get_mut(&name).unwrap().data = v.to_vec();
            loss(&q)
        };
        let n1 = central(&mut f, &base, i, FD_STEP);
        let n2 = central(&mut f, &base, i, FD_STEP / 10.0);
        // a ReLU switching inside the stencil makes the two estimates disagree
        if rel_err(n1, n2) > GRAD_TOL / 10.0 {
            s.skipped += 1;
            continue;
        }
        let a = grads.0[pi][i];
        let e = rel_err(a, n1);
        s.checks += 1;
        s.worst = s.worst.max(e);
        ensure!(e <= GRAD_TOL, "network {name}[{i}]: analytic {a} numeric {n1} rel err {e:.2e}");
        checked += 1;
    }
    Ok(())
}

fn gradient_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut parts = Vec::new();
    type Op = fn(&mut ChaCha8Rng, &mut GradStats) -> Result<(), String>;
    let ops: [(&str, Op); 7] = [
        ("conv", grad_conv),
        ("bn-train", |r, s| grad_batchnorm(r, s, Mode::Train)),
        ("bn-infer", |r, s| grad_batchnorm(r, s, Mode::Infer)),
        ("relu", grad_relu),
        ("softmax", grad_softmax),
        ("dice", grad_dice),
        ("network", |r, s| {
            let seed = r.random();
            grad_network(r, s, seed)
        }),
    ];
    for (name, op) in ops {
        let mut stats = GradStats::default();
        for _ in 0..20 {
            op(&mut rng, &mut stats)?;
        }
        let skipped = if stats.skipped > 0 { format!(", {} kinks skipped", stats.skipped) } else { String::new() };
        parts.push(format!("{name} {}x20 max {:.1e}{skipped}", stats.checks / 20, stats.worst));
    }
    Ok(parts.join("; "))
}

// ---------------------------------------------------------------------------
// dilation

/// Direct loop over output pixels and kernel taps with zero padding.
fn naive_conv(x: &Tensor4, w: &[f64], b: &[f64], kshape: [usize; 4], d: usize) -> Tensor4 {
    let [n, _, h, wd] = x.shape();
    let [cout, cin, kh, kw] = kshape;
    let mut out = Tensor4::zeros([n, cout, h, wd]).unwrap();
    for bi in 0..n {
        for o in 0..cout {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b[o];
                    for c in 0..cin {
                        for i in 0..kh {
                            for j in 0..kw {
                                let sy = y as i64 + (i as i64 - (kh / 2) as i64) * d as i64;
                                let sx = xx as i64 + (j as i64 - (kw / 2) as i64) * d as i64;
                                if sy < 0 || sx < 0 || sy >= h as i64 || sx >= wd as i64 {
                                    continue;
                                }
                                acc += w[((o * cin + c) * kh + i) * kw + j] * x.get(bi, c, sy as usize, sx as usize);
                            }
                        }
                    }
                    out.set(bi, o, y, xx, acc);
                }
            }
        }
    }
    out
}

/// Spreads the taps of a dilated kernel onto a dense kernel of extent
/// `(k - 1)·d + 1` with zeros in between.
fn inflate(w: &[f64], kshape: [usize; 4], d: usize) -> (Vec<f64>, [usize; 4]) {
    let [cout, cin, kh, kw] = kshape;
    let (eh, ew) = ((kh - 1) * d + 1, (kw - 1) * d + 1);
    let mut out = vec![0.0; cout * cin * eh * ew];
    for oc in 0..cout * cin {
        for i in 0..kh {
            for j in 0..kw {
                out[(oc * eh + i * d) * ew + j * d] = w[(oc * kh + i) * kw + j];
            }
        }
    }
    (out, [cout, cin, eh, ew])
}

fn dilation_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    // small integers keep every sum exact whatever the accumulation order
    let int = |rng: &mut ChaCha8Rng, n: usize, m: i32| -> Vec<f64> { (0..n).map(|_| rng.random_range(-m..=m) as f64).collect() };
    let mut dilations = BTreeSet::new();
    for case in 0..100 {
        let k = [1, 3, 5][rng.random_range(0..3)];
        let d = rng.random_range(1..=5);
        dilations.insert(d);
        let (n, cin, cout) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
        let shape = [n, cin, rng.random_range(1..14), rng.random_range(1..14)];
        let kshape = [cout, cin, k, k];
        let x = Tensor4::from_vec(shape, int(&mut rng, shape.iter().product(), 8)).unwrap();
        let w = int(&mut rng, cout * cin * k * k, 4);
        let b = int(&mut rng, cout, 4);

        let dilated = ConvKernel::new(kshape, w.clone(), d, Some(b.clone())).unwrap();
        let (wi, ishape) = inflate(&w, kshape, d);
        let dense = ConvKernel::new(ishape, wi, 1, Some(b.clone())).unwrap();
        let out = conv2d_forward(&x, &dilated).unwrap();
        ensure!(out == conv2d_forward(&x, &dense).unwrap(), "case {case}: forward differs from inflated kernel (k {k} d {d})");
        ensure!(out == naive_conv(&x, &w, &b, kshape, d), "case {case}: forward differs from direct loop (k {k} d {d})");

        let r = Tensor4::from_vec(out.shape(), int(&mut rng, out.len(), 3)).unwrap();
        let gd = conv2d_backward(&x, &dilated, &r).unwrap();
        let gi = conv2d_backward(&x, &dense, &r).unwrap();
        ensure!(gd.input == gi.input, "case {case}: input gradient differs from inflated kernel");
        let (gw_inflated, _) = inflate(&gd.weights, kshape, d);
        let mut gw_dense = gi.weights.clone();
        // taps between the dilated positions carry gradient in the dense kernel only
        for (v, keep) in gw_dense.iter_mut().zip(inflate(&vec![1.0; w.len()], kshape, d).0) {
            if keep == 0.0 {
                *v = 0.0;
            }
        }
        ensure!(gw_inflated == gw_dense, "case {case}: weight gradient differs from inflated kernel");
        ensure!(gd.bias == gi.bias, "case {case}: bias gradient differs");
    }
    Ok(format!("100 cases, dilations {dilations:?}, forward and backward bit-identical"))
}

// ---------------------------------------------------------------------------
// phantom-scale pipeline shared by the training, preprocessing and report
// criteria

const TRAIN_COUNTS: CorpusCounts = CorpusCounts { train: 40, test_normal: 10, test_covid: 10 };
const CORPUS_SEED: u64 = 1000;

fn phantom_spec() -> PhantomSpec {
    PhantomSpec { dims: [128, 128, 8], ..PhantomSpec::default() }
}

fn training_net() -> NetConfig {
    NetConfig { group_channels: [4, 4, 4], ..NetConfig::default() }
}

fn training_config() -> TrainConfig {
    TrainConfig { max_epochs: 6, seed: 1, ..TrainConfig::default() }
}

struct PipelineRun {
    _root: tempfile::TempDir,
    layout: Layout,
    train_ids: Vec<String>,
    val_ids: Vec<String>,
    trained: BTreeSet<String>,
    losses: Vec<(f64, f64)>,
    cases: Vec<CaseMetrics>,
}

fn pipeline_run() -> Result<&'static PipelineRun, String> {
    static RUN: OnceLock<Result<PipelineRun, String>> = OnceLock::new();
    RUN.get_or_init(|| {
        let e = |e: lungseg_core::Error| e.to_string();
        let root = tempfile::tempdir().map_err(|e| e.to_string())?;
        let layout = Layout::under(root.path());
        generate_corpus(TRAIN_COUNTS, CORPUS_SEED, &phantom_spec(), &layout.corpus).map_err(e)?;
        let prep = PreprocSpec { crop_rule: CropRule::Body, ..PreprocSpec::default() };
        preprocess_manifest(&layout.corpus.join(MANIFEST_FILE), &layout.prepared, &prep).map_err(e)?;
        let outcome = train_from_dir(&layout.prepared, &layout.model, &training_config(), &training_net(), None).map_err(e)?;
        infer_dir(&layout.prepared, &outcome.params, &layout.predictions, false, 17).map_err(e)?;
        let cases = evaluate_dir(&layout.prepared, &layout.predictions, &layout.metrics).map_err(e)?;
        report_from_csv(&layout.metrics, &layout.report).map_err(e)?;
        Ok(PipelineRun {
            _root: root,
            layout,
            train_ids: outcome.train_ids,
            val_ids: outcome.val_ids,
            trained: outcome.report.trained_subjects,
            losses: outcome.report.epochs.iter().map(|r| (r.train_loss, r.val_loss)).collect(),
            cases,
        })
    })
    .as_ref()
    .map_err(Clone::clone)
}

fn phantom_training() -> Outcome {
    let run = pipeline_run()?;
    ensure!(run.train_ids.len() + run.val_ids.len() == TRAIN_COUNTS.train, "split lost subjects");
    ensure!(run.val_ids.len() == 2, "{} validation subjects, expected 2", run.val_ids.len());
    for v in &run.val_ids {
        ensure!(!run.trained.contains(v), "validation subject {v} received gradient updates");
    }
    let train_set: BTreeSet<String> = run.train_ids.iter().cloned().collect();
    ensure!(run.trained == train_set, "trained subjects differ from the training split");

    let mean_dsc = |cohort: Cohort| -> Result<(f64, usize), String> {
        let v: Vec<f64> = run
            .cases
            .iter()
            .filter(|c| c.cohort == cohort)
            .map(|c| c.get(Metric::Dice).ok_or_else(|| format!("{}: undefined dsc", c.case_id)))
            .collect::<Result<_, _>>()?;
        Ok((v.iter().sum::<f64>() / v.len() as f64, v.len()))
    };
    let (normal, nn) = mean_dsc(Cohort::Normal)?;
    let (covid, nc) = mean_dsc(Cohort::Covid)?;
    ensure!(nn == 10 && nc == 10, "evaluated {nn} normal and {nc} covid cases");
    let (first, last) = (run.losses[0], run.losses[run.losses.len() - 1]);
    let detail = format!(
        "dsc normal {normal:.4} covid {covid:.4}; val loss {:.4} -> {:.4} over {} epochs; 2 val subjects untouched",
        first.1,
        last.1,
        run.losses.len()
    );
    ensure!(normal >= 0.95, "normal mean dsc below 0.95: {detail}");
    ensure!(covid >= 0.92, "covid mean dsc below 0.92: {detail}");
    ensure!(normal >= covid, "normal cohort scored below covid: {detail}");
    Ok(detail)
}

fn nifti_files(dir: &Path) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map(|rd| rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.extension().is_some_and(|x| x == "nii")).collect())
        .unwrap_or_default();
    out.sort();
    out
}

fn preprocessing_contract() -> Outcome {
    let run = pipeline_run()?;
    let rows = read_prepared_index(&run.layout.prepared).map_err(|e| e.to_string())?;
    ensure!(rows.len() == 60, "{} prepared cases", rows.len());
    let mut slices = 0;
    for row in &rows {
        let bytes = fs::read(run.layout.prepared.join(&row.image_path)).map_err(|e| e.to_string())?;
        let image = decode_nifti(&bytes).map_err(|e| e.to_string())?;
        let [cols, rows_, nz] = image.dims();
        ensure!((rows_, cols) == (296, 216), "{}: slices are {rows_}x{cols}", row.case_id);
        ensure!(
            image.data().iter().all(|v| (0.0..=1.0).contains(v)),
            "{}: intensity outside [0, 1]",
            row.case_id
        );
        slices += nz;
    }

    let mut files = 0;
    for dir in [&run.layout.corpus, &run.layout.prepared, &run.layout.predictions] {
        for path in nifti_files(dir) {
            let bytes = fs::read(&path).map_err(|e| e.to_string())?;
            let back = encode_nifti(&decode_nifti(&bytes).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
            ensure!(back == bytes, "{} does not round-trip", path.display());
            files += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for k in 0..100 {
        let dims = [rng.random_range(1..10), rng.random_range(1..10), rng.random_range(1..5)];
        let n: usize = dims.iter().product();
        let spacing = [rng.random_range(0.3..3.0), rng.random_range(0.3..3.0), rng.random_range(0.5..6.0)];
        let v = if k % 2 == 0 {
            let data = (0..n).map(|_| rng.random_range(-1024i16..=3071) as f64).collect();
            Volume::new(dims, data, spacing).unwrap().with_storage(VoxelType::Int16)
        } else {
            let data = (0..n).map(|_| rng.random_range(-2000.0f32..2000.0) as f64).collect();
            Volume::new(dims, data, spacing).unwrap()
        };
        let back = decode_nifti(&encode_nifti(&v).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        ensure!(back.dims() == v.dims(), "random volume {k}: dims differ");
        ensure!(
            back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits()),
            "random volume {k}: voxels differ"
        );
    }
    Ok(format!("{slices} slices of 296x216 in [0,1]; {files} files and 100 random volumes round-trip bit-exact"))
}

fn report_shape() -> Outcome {
    let run = pipeline_run()?;
    let read = |name: &str| -> Result<Vec<Vec<String>>, String> {
        let mut r = csv::Reader::from_path(run.layout.report.join(name)).map_err(|e| e.to_string())?;
        r.records().map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()).map_err(|e| e.to_string())).collect()
    };
    let summary = read(SUMMARY_FILE)?;
    let boxplot = read(BOXPLOT_FILE)?;
    for cohort in ["normal", "covid"] {
        let rows: Vec<&Vec<String>> = summary.iter().filter(|r| r[0] == cohort).collect();
        let labels: Vec<&str> = rows.iter().map(|r| r[1].as_str()).collect();
        let want: Vec<&str> = Metric::ALL.iter().map(|m| m.label()).collect();
        ensure!(labels == want, "{cohort} summary rows {labels:?}");
        for r in &rows {
            for (col, v) in ["min", "max", "mean", "sd"].iter().zip(&r[4..8]) {
                ensure!(
                    v.parse::<f64>().is_ok_and(f64::is_finite),
                    "{cohort} {}: {col} = {v:?}",
                    r[1]
                );
            }
        }
        let labels: Vec<&str> = boxplot.iter().filter(|r| r[0] == cohort).map(|r| r[1].as_str()).collect();
        let want: Vec<&str> = Metric::BOXPLOT.iter().map(|m| m.label()).collect();
        ensure!(labels == want, "{cohort} boxplot rows {labels:?}");
    }
    ensure!(run.layout.report.join(OUTLIERS_FILE).is_file(), "outliers.txt missing");
    Ok(format!("{} summary rows, {} boxplot rows", summary.len(), boxplot.len()))
}

// ---------------------------------------------------------------------------
// determinism

fn cli_pipeline(root: &Path) -> Result<(), String> {
    let write = |name: &str, text: &str| -> Result<PathBuf, String> {
        let p = root.join(name);
        fs::write(&p, text).map_err(|e| e.to_string())?;
        Ok(p)
    };
    let phantom = write("phantom.cfg", "train = 6\ntest_normal = 4\ntest_covid = 4\nseed = 77\ndims = 64 64 8\n")?;
    let prep = write("prep.cfg", "crop_rule = body\n")?;
    let train = write("train.cfg", "max_epochs = 5\nbatch_size = 4\nseed = 3\nval_fraction = 0.2\n")?;
    let net = write("net.cfg", "group_channels = 4 4 4\nblocks_per_group = 1\nseed = 5\n")?;
    let l = Layout::under(root);
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let steps: Vec<Vec<String>> = vec![
        vec!["phantom".into(), "--out".into(), s(&l.corpus), "--config".into(), s(&phantom)],
        vec!["preprocess".into(), "--manifest".into(), s(&l.corpus.join(MANIFEST_FILE)), "--out".into(), s(&l.prepared), "--config".into(), s(&prep)],
        vec![
            "train".into(), "--data".into(), s(&l.prepared), "--out".into(), s(&l.model),
            "--config".into(), s(&train), "--net-config".into(), s(&net),
        ],
        vec!["infer".into(), "--data".into(), s(&l.prepared), "--model".into(), s(&l.model.join("model.ckpt")), "--out".into(), s(&l.predictions)],
        vec!["evaluate".into(), "--data".into(), s(&l.prepared), "--pred".into(), s(&l.predictions), "--out".into(), s(&l.metrics)],
        vec!["report".into(), "--metrics".into(), s(&l.metrics), "--out".into(), s(&l.report)],
    ];
    for args in steps {
        let code = lungseg_cli::run(std::iter::once("lungseg".to_string()).chain(args.iter().cloned()));
        ensure!(code == 0, "`lungseg {}` exited with {code}", args[0]);
    }
    Ok(())
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    cli_pipeline(a.path())?;
    cli_pipeline(b.path())?;
    let files = ["metrics.csv", "report/summary.csv", "report/boxplot.csv", "report/outliers.txt", "model/model.ckpt"];
    for f in files {
        let x = fs::read(a.path().join(f)).map_err(|e| format!("{f}: {e}"))?;
        let y = fs::read(b.path().join(f)).map_err(|e| format!("{f}: {e}"))?;
        ensure!(x == y, "{f} differs between runs");
    }
    // identical but degenerate reports (e.g. all-empty predictions) would prove little
    let cases = read_case_metrics(&a.path().join("metrics.csv")).map_err(|e| e.to_string())?;
    ensure!(cases.iter().all(|c| !c.flagged()), "determinism run produced undefined metrics");
    Ok(format!("two CLI runs byte-identical in {}", files.join(", ")))
}
