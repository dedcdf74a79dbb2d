use super::Tensor4;
use crate::error::{Error, Result};

pub fn relu(input: &Tensor4) -> Tensor4 {
    let data = input.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor4::from_vec(input.shape(), data).expect("same shape")
}

/// Passes `grad_out` where the forward input was strictly positive.
pub fn relu_backward(input: &Tensor4, grad_out: &Tensor4) -> Result<Tensor4> {
    if input.shape() != grad_out.shape() {
        return Err(Error::shape("relu gradient shape differs from input"));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor4::from_vec(input.shape(), data)
}

/// Per-voxel softmax across the channel axis.
pub fn softmax_channels(logits: &Tensor4) -> Result<Tensor4> {
    let [n, c, h, w] = logits.shape();
    if c < 2 {
        return Err(Error::shape(format!("softmax needs at least 2 channels, got {c}")));
    }
    let mut out = vec![0.0; logits.len()];
    softmax_raw(logits.data(), n, c, h * w, &mut out);
    Tensor4::from_vec(logits.shape(), out)
}

pub(crate) fn softmax_raw(x: &[f64], n: usize, c: usize, plane: usize, out: &mut [f64]) {
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let mut max = f64::NEG_INFINITY;
            for ch in 0..c {
                max = max.max(x[base + ch * plane + p]);
            }
            let mut sum = 0.0;
            for ch in 0..c {
                let e = (x[base + ch * plane + p] - max).exp();
                out[base + ch * plane + p] = e;
                sum += e;
            }
            for ch in 0..c {
                out[base + ch * plane + p] /= sum;
            }
        }
    }
}

/// Gradient with respect to the logits given the softmax output and the
/// gradient with respect to it.
pub fn softmax_channels_backward(probs: &Tensor4, grad_probs: &Tensor4) -> Result<Tensor4> {
    if probs.shape() != grad_probs.shape() {
        return Err(Error::shape("softmax gradient shape differs from output"));
    }
    let [n, c, h, w] = probs.shape();
    let mut out = vec![0.0; probs.len()];
    softmax_backward_raw(probs.data(), grad_probs.data(), n, c, h * w, &mut out);
    Tensor4::from_vec(probs.shape(), out)
}

pub(crate) fn softmax_backward_raw(
    p: &[f64],
    g: &[f64],
    n: usize,
    c: usize,
    plane: usize,
    out: &mut [f64],
) {
    for b in 0..n {
        let base = b * c * plane;
        for px in 0..plane {
            let mut dot = 0.0;
            for ch in 0..c {
                let i = base + ch * plane + px;
                dot += p[i] * g[i];
            }
            for ch in 0..c {
                let i = base + ch * plane + px;
                out[i] = p[i] * (g[i] - dot);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_definition() {
        let x = Tensor4::from_vec([1, 1, 1, 3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let pos = Tensor4::from_vec([1, 1, 1, 2], vec![0.5, 4.0]).unwrap();
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn relu_dead_unit_and_kink() {
        let x = Tensor4::from_vec([1, 1, 1, 3], vec![-3.0, 0.0, 1.0]).unwrap();
        let g = Tensor4::filled([1, 1, 1, 3], 2.0).unwrap();
        assert_eq!(relu_backward(&x, &g).unwrap().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_closed_forms() {
        let eq = Tensor4::filled([1, 2, 2, 2], 0.7).unwrap();
        assert!(softmax_channels(&eq).unwrap().data().iter().all(|&p| p == 0.5));

        let x = Tensor4::from_vec([1, 2, 1, 1], vec![3f64.ln(), 0.0]).unwrap();
        let p = softmax_channels(&x).unwrap();
        assert!((p.data()[0] - 0.75).abs() < 1e-15);
        assert!((p.data()[1] - 0.25).abs() < 1e-15);

        let shifted = Tensor4::from_vec([1, 2, 1, 1], vec![3f64.ln() + 1000.0, 1000.0]).unwrap();
        let q = softmax_channels(&shifted).unwrap();
        for (a, b) in p.data().iter().zip(q.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_needs_two_channels() {
        let x = Tensor4::zeros([1, 1, 2, 2]).unwrap();
        assert!(softmax_channels(&x).is_err());
    }
}
