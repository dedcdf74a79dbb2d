//! Soft Dice loss with non-squared denominators, averaged over classes.
//!
//! For each class `c`, with sums taken over every voxel of the batch:
//!
//! ```text
//! dice_c = (2·Σ p·g + s) / (Σ p + Σ g + s)
//! loss   = 1 − mean_c dice_c
//! ```

use super::Tensor4;
use crate::error::{Error, Result};

/// Smoothing added to numerator and denominator so empty classes stay finite.
pub const DICE_SMOOTH: f64 = 1e-5;

struct ClassSums {
    inter: Vec<f64>,
    denom: Vec<f64>,
}

fn class_sums(probs: &Tensor4, target: &Tensor4) -> Result<ClassSums> {
    if probs.shape() != target.shape() {
        return Err(Error::shape(format!(
            "probabilities {:?} vs target {:?}",
            probs.shape(),
            target.shape()
        )));
    }
    let [n, c, h, w] = probs.shape();
    let plane = h * w;
    let (p, g) = (probs.data(), target.data());
    let mut inter = vec![0.0; c];
    let mut denom = vec![DICE_SMOOTH; c];
    for b in 0..n {
        for ch in 0..c {
            let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
            let mut i = 0.0;
            let mut d = 0.0;
            for (pv, gv) in p[r.clone()].iter().zip(&g[r]) {
                i += pv * gv;
                d += pv + gv;
            }
            inter[ch] += i;
            denom[ch] += d;
        }
    }
    Ok(ClassSums { inter, denom })
}

pub fn dice_ns_loss(probs: &Tensor4, target: &Tensor4) -> Result<f64> {
    let sums = class_sums(probs, target)?;
    let c = sums.inter.len() as f64;
    let score: f64 = sums
        .inter
        .iter()
        .zip(&sums.denom)
        .map(|(i, d)| (2.0 * i + DICE_SMOOTH) / d)
        .sum();
    Ok(1.0 - score / c)
}

/// Returns the loss and its gradient with respect to `probs`.
pub fn dice_ns_loss_backward(probs: &Tensor4, target: &Tensor4) -> Result<(f64, Tensor4)> {
    let sums = class_sums(probs, target)?;
    let [n, c, h, w] = probs.shape();
    let plane = h * w;
    let cf = c as f64;
    let mut score = 0.0;
    // d dice_c / d p_i = (2 g_i D_c − (2 I_c + s)) / D_c²
    let mut num = vec![0.0; c];
    for ch in 0..c {
        num[ch] = 2.0 * sums.inter[ch] + DICE_SMOOTH;
        score += num[ch] / sums.denom[ch];
    }
    let g = target.data();
    let mut grad = vec![0.0; probs.len()];
    for b in 0..n {
        for ch in 0..c {
            let d = sums.denom[ch];
            let d2 = d * d;
            let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
            for (o, gv) in grad[r.clone()].iter_mut().zip(&g[r]) {
                *o = -(2.0 * gv * d - num[ch]) / (d2 * cf);
            }
        }
    }
    Ok((1.0 - score / cf, Tensor4::from_vec(probs.shape(), grad)?))
}
