use super::Tensor4;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the previous running estimate in each update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Per-channel running mean and (population) variance used in infer mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// Statistics used by a forward pass, needed again by its adjoint.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormCache {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub mode: Mode,
}

pub fn batchnorm(
    input: &Tensor4,
    gamma: &[f64],
    beta: &[f64],
    running: &mut RunningStats,
    mode: Mode,
) -> Result<(Tensor4, BatchNormCache)> {
    let [n, c, h, w] = input.shape();
    check_lengths(c, gamma, beta)?;
    if running.mean.len() != c || running.var.len() != c {
        return Err(Error::shape(format!("running stats sized for {} channels, input has {c}", running.mean.len())));
    }
    let cache = stats_for(input.data(), n, c, h * w, running, mode);
    let mut out = vec![0.0; input.len()];
    apply(input.data(), n, c, h * w, gamma, beta, &cache, &mut out);
    Ok((Tensor4::from_vec(input.shape(), out)?, cache))
}

/// Returns gradients with respect to (input, gamma, beta).
pub fn batchnorm_backward(
    input: &Tensor4,
    gamma: &[f64],
    cache: &BatchNormCache,
    grad_out: &Tensor4,
) -> Result<(Tensor4, Vec<f64>, Vec<f64>)> {
    let [n, c, h, w] = input.shape();
    if grad_out.shape() != input.shape() {
        return Err(Error::shape("batchnorm output gradient shape differs from input"));
    }
    if gamma.len() != c || cache.mean.len() != c {
        return Err(Error::shape("batchnorm parameters do not match channel count"));
    }
    let mut dx = vec![0.0; input.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    backward_raw(input.data(), n, c, h * w, gamma, cache, grad_out.data(), &mut dx, &mut dgamma, &mut dbeta);
    Ok((Tensor4::from_vec(input.shape(), dx)?, dgamma, dbeta))
}

fn check_lengths(c: usize, gamma: &[f64], beta: &[f64]) -> Result<()> {
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape(format!(
            "gamma/beta lengths {}/{} for {c} channels",
            gamma.len(),
            beta.len()
        )));
    }
    Ok(())
}

/// Computes the statistics for `mode`; in train mode also folds the batch
/// statistics into `running`.
pub(crate) fn stats_for(
    x: &[f64],
    n: usize,
    c: usize,
    plane: usize,
    running: &mut RunningStats,
    mode: Mode,
) -> BatchNormCache {
    let (mean, var) = match mode {
        Mode::Train => {
            let (mean, var) = channel_moments(x, n, c, plane);
            for ch in 0..c {
                running.mean[ch] = BN_MOMENTUM * running.mean[ch] + (1.0 - BN_MOMENTUM) * mean[ch];
                running.var[ch] = BN_MOMENTUM * running.var[ch] + (1.0 - BN_MOMENTUM) * var[ch];
            }
            (mean, var)
        }
        Mode::Infer => (running.mean.clone(), running.var.clone()),
    };
    let inv_std = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    BatchNormCache { mean, inv_std, mode }
}

/// Two-pass per-channel mean and population variance over N×H×W.
pub(crate) fn channel_moments(x: &[f64], n: usize, c: usize, plane: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (n * plane) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            let start = (b * c + ch) * plane;
            s += x[start..start + plane].iter().sum::<f64>();
        }
        let m = s / count;
        let mut ss = 0.0;
        for b in 0..n {
            let start = (b * c + ch) * plane;
            ss += x[start..start + plane].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = ss / count;
    }
    (mean, var)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn apply(
    x: &[f64],
    n: usize,
    c: usize,
    plane: usize,
    gamma: &[f64],
    beta: &[f64],
    cache: &BatchNormCache,
    out: &mut [f64],
) {
    for b in 0..n {
        for ch in 0..c {
            let scale = gamma[ch] * cache.inv_std[ch];
            let shift = beta[ch] - cache.mean[ch] * scale;
            let start = (b * c + ch) * plane;
            for (o, v) in out[start..start + plane].iter_mut().zip(&x[start..start + plane]) {
                *o = v * scale + shift;
            }
        }
    }
}

/// Adjoint of [`apply`]; all outputs are overwritten.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward_raw(
    x: &[f64],
    n: usize,
    c: usize,
    plane: usize,
    gamma: &[f64],
    cache: &BatchNormCache,
    dy: &[f64],
    dx: &mut [f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) {
    let count = (n * plane) as f64;
    for ch in 0..c {
        let m = cache.mean[ch];
        let is = cache.inv_std[ch];
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for b in 0..n {
            let start = (b * c + ch) * plane;
            for (g, v) in dy[start..start + plane].iter().zip(&x[start..start + plane]) {
                sum_dy += g;
                sum_dy_xhat += g * (v - m) * is;
            }
        }
        dbeta[ch] = sum_dy;
        dgamma[ch] = sum_dy_xhat;
        let scale = gamma[ch] * is;
        for b in 0..n {
            let start = (b * c + ch) * plane;
            let range = start..start + plane;
            match cache.mode {
                Mode::Train => {
                    let mean_dy = sum_dy / count;
                    let mean_dy_xhat = sum_dy_xhat / count;
                    for ((d, g), v) in dx[range.clone()].iter_mut().zip(&dy[range.clone()]).zip(&x[range]) {
                        let xhat = (v - m) * is;
                        *d = scale * (g - mean_dy - xhat * mean_dy_xhat);
                    }
                }
                Mode::Infer => {
                    for (d, g) in dx[range.clone()].iter_mut().zip(&dy[range]) {
                        *d = scale * g;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_input_centers_to_beta() {
        let x = Tensor4::filled([2, 1, 3, 3], 7.5).unwrap();
        let mut rs = RunningStats::new(1);
        let (y, _) = batchnorm(&x, &[1.0], &[0.0], &mut rs, Mode::Train).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let (y, _) = batchnorm(&x, &[1.0], &[5.0], &mut rs, Mode::Train).unwrap();
        assert!(y.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn two_values_normalize_to_unit() {
        let x = Tensor4::from_vec([1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let mut rs = RunningStats::new(1);
        let (y, cache) = batchnorm(&x, &[1.0], &[0.0], &mut rs, Mode::Train).unwrap();
        // mean 2, population variance 1 (eps shifts the result slightly)
        assert!((y.data()[0] + 1.0).abs() < 1e-5);
        assert!((y.data()[1] - 1.0).abs() < 1e-5);
        assert_eq!(cache.mean, vec![2.0]);
        assert!((rs.mean[0] - 0.2).abs() < 1e-15);
        assert!((rs.var[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn infer_mode_uses_running_stats() {
        let x = Tensor4::from_vec([1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let mut rs = RunningStats { mean: vec![1.0], var: vec![4.0 - BN_EPS] };
        let before = rs.clone();
        let (y, _) = batchnorm(&x, &[2.0], &[1.0], &mut rs, Mode::Infer).unwrap();
        assert_eq!(rs, before);
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
        assert!((y.data()[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_wrong_parameter_lengths() {
        let x = Tensor4::zeros([1, 2, 2, 2]).unwrap();
        let mut rs = RunningStats::new(2);
        assert!(matches!(
            batchnorm(&x, &[1.0], &[0.0, 0.0], &mut rs, Mode::Train),
            Err(Error::Shape(_))
        ));
    }
}
