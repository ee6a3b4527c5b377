//! Augmented feature utilization: per-pixel training weights for augmented features.
//!
//! A pixel whose augmented feature stays close to the original (cosine
//! similarity above `τ`) keeps weight 1. Otherwise the weight is `e^F − 1`,
//! where `F` is the min-max normalized prediction confidence (one minus
//! normalized entropy) of the augmented prediction, so confidently predicted
//! pixels count up to `e − 1` and noisy ones fade towards 0.

use crate::error::{invalid, shape_err, Result};
use crate::losses::{loss_and_grad, LossKind};
use crate::tensor::tape::LOG_FLOOR;
use crate::tensor::{LabelMap, Tensor};

/// Norm below which a feature vector is treated as zero.
pub const NORM_FLOOR: f64 = 1e-12;

/// Tolerance on per-pixel probability sums accepted by [`confidence_map`].
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Per-pixel cosine similarity `⟨z, ẑ⟩ / (‖z‖ ‖ẑ‖)` as an `[H, W]` tensor.
pub fn cosine_similarity_map(original: &Tensor, augmented: &Tensor) -> Result<Tensor> {
    if original.shape() != augmented.shape() {
        return Err(shape_err!(
            "cosine similarity of {:?} and {:?}",
            original.shape(),
            augmented.shape()
        ));
    }
    let (n, h, w) = original.chw()?;
    let plane = h * w;
    let (a, b) = (original.data(), augmented.data());
    let (mut dot, mut na, mut nb) = (vec![0.0; plane], vec![0.0; plane], vec![0.0; plane]);
    for ch in 0..n {
        let (ra, rb) = (
            &a[ch * plane..(ch + 1) * plane],
            &b[ch * plane..(ch + 1) * plane],
        );
        for j in 0..plane {
            dot[j] += ra[j] * rb[j];
            na[j] += ra[j] * ra[j];
            nb[j] += rb[j] * rb[j];
        }
    }
    let sim = (0..plane)
        .map(|j| {
            let (x, y) = (na[j].sqrt(), nb[j].sqrt());
            if x < NORM_FLOOR || y < NORM_FLOOR {
                0.0
            } else {
                (dot[j] / (x * y)).clamp(-1.0, 1.0)
            }
        })
        .collect();
    Ok(Tensor::from_parts(vec![h, w], sim))
}

/// Per-pixel entropy `−Σ p log p` (natural log, `p` floored at 1e-12).
pub fn entropy_map(probs: &Tensor) -> Result<Tensor> {
    let (c, h, w) = probs.chw()?;
    let plane = h * w;
    let p = probs.data();
    let mut ent = vec![0.0; plane];
    for j in 0..plane {
        let s: f64 = (0..c).map(|k| p[k * plane + j]).sum();
        if (s - 1.0).abs() > SIMPLEX_TOL {
            return Err(invalid!("probabilities at pixel {j} sum to {s}"));
        }
        ent[j] = -(0..c)
            .map(|k| {
                let v = p[k * plane + j];
                v * v.max(LOG_FLOOR).ln()
            })
            .sum::<f64>();
    }
    Ok(Tensor::from_parts(vec![h, w], ent))
}

/// `F = 1 − MinMax(entropy)` over one image; `F ≡ 1` when the entropy map is constant.
pub fn confidence_map(probs: &Tensor) -> Result<Tensor> {
    let ent = entropy_map(probs)?;
    let (lo, hi) = ent
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &e| {
            (lo.min(e), hi.max(e))
        });
    let range = hi - lo;
    let f = if range < 1e-12 {
        vec![1.0; ent.numel()]
    } else {
        ent.data().iter().map(|e| 1.0 - (e - lo) / range).collect()
    };
    Ok(Tensor::from_parts(ent.shape().to_vec(), f))
}

/// `W = 1` if `S > τ`, else `e^F − 1`.
pub fn weight(similarity: f64, confidence: f64, tau: f64) -> f64 {
    if similarity > tau {
        1.0
    } else {
        confidence.exp_m1()
    }
}

pub fn weight_map(similarity: &Tensor, confidence: &Tensor, tau: f64) -> Result<Tensor> {
    if similarity.shape() != confidence.shape() {
        return Err(shape_err!(
            "similarity {:?} and confidence {:?} differ in shape",
            similarity.shape(),
            confidence.shape()
        ));
    }
    if !(-1.0..=1.0).contains(&tau) {
        return Err(invalid!("threshold tau = {tau} outside [-1, 1]"));
    }
    let w = similarity
        .data()
        .iter()
        .zip(confidence.data())
        .map(|(&s, &f)| weight(s, f, tau))
        .collect();
    Ok(Tensor::from_parts(similarity.shape().to_vec(), w))
}

/// Full weight pipeline for one image: similarity, confidence, weights.
pub fn utilization_weights(
    original: &Tensor,
    augmented: &Tensor,
    augmented_probs: &Tensor,
    tau: f64,
) -> Result<Tensor> {
    let s = cosine_similarity_map(original, augmented)?;
    let f = confidence_map(augmented_probs)?;
    weight_map(&s, &f, tau)
}

/// Pixel-weighted CE + Dice; weights act as constants.
pub fn weighted_seg_loss(probs: &Tensor, labels: &LabelMap, weights: &Tensor) -> Result<f64> {
    weighted_seg_loss_kind(probs, labels, weights, LossKind::CeDice)
}

pub fn weighted_seg_loss_kind(
    probs: &Tensor,
    labels: &LabelMap,
    weights: &Tensor,
    kind: LossKind,
) -> Result<f64> {
    if weights.shape() != [labels.height(), labels.width()] {
        return Err(shape_err!(
            "weight map {:?} does not match labels {}x{}",
            weights.shape(),
            labels.height(),
            labels.width()
        ));
    }
    Ok(loss_and_grad(probs, labels, Some(weights.data()), kind)?.value)
}
