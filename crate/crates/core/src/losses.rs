//! Segmentation losses: cross-entropy plus soft Dice, optionally pixel-weighted.
//!
//! Both terms are evaluated together with their analytic gradient with
//! respect to the probability map, so they can be recorded on a [`Tape`] as a
//! single scalar node.
//!
//! [`Tape`]: crate::tensor::Tape

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::tensor::tape::LOG_FLOOR;
use crate::tensor::{LabelMap, Tape, Tensor, Var};

/// Smoothing constant of the soft Dice ratio.
pub const DICE_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Cross-entropy + soft Dice.
    #[default]
    CeDice,
    /// Cross-entropy only.
    CeOnly,
}

/// Loss value and its gradient with respect to the `[C, H, W]` probabilities.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub value: f64,
    pub grad: Vec<f64>,
}

pub(crate) fn check_alignment(probs: &Tensor, labels: &LabelMap) -> Result<(usize, usize)> {
    let (c, h, w) = probs.chw()?;
    if (labels.height(), labels.width()) != (h, w) {
        return Err(shape_err!(
            "labels {}x{} do not match probabilities {h}x{w}",
            labels.height(),
            labels.width()
        ));
    }
    labels.check_range(c)?;
    Ok((c, h * w))
}

/// Weighted CE + Dice, with `weights = None` meaning all ones.
///
/// ```text
/// CE   = Σ_j W_j (−log p_j[y_j]) / Σ_j W_j
/// Dice = 1 − (1/C) Σ_c (2 Σ_j W_j p_jc y_jc + ε) / (Σ_j W_j (p_jc + y_jc) + ε)
/// ```
pub(crate) fn loss_and_grad(
    probs: &Tensor,
    labels: &LabelMap,
    weights: Option<&[f64]>,
    kind: LossKind,
) -> Result<LossEval> {
    let (c, plane) = check_alignment(probs, labels)?;
    if let Some(w) = weights {
        if w.len() != plane {
            return Err(shape_err!(
                "weight map has {} entries, expected {plane}",
                w.len()
            ));
        }
        if let Some(bad) = w.iter().find(|v| **v < 0.0 || !v.is_finite()) {
            return Err(invalid!("weight {bad} is negative or non-finite"));
        }
    }
    let weight = |j: usize| weights.map_or(1.0, |w| w[j]);
    let p = probs.data();
    let y = labels.labels();
    let mut grad = vec![0.0; p.len()];

    let total_w: f64 = (0..plane).map(weight).sum();
    if total_w <= 0.0 {
        log::warn!("all-zero weight map; segmentation loss is 0");
        return Ok(LossEval { value: 0.0, grad });
    }

    let mut ce = 0.0;
    for j in 0..plane {
        let idx = y[j] * plane + j;
        let pj = p[idx];
        let wj = weight(j);
        ce -= wj * pj.max(LOG_FLOOR).ln();
        if pj >= LOG_FLOOR {
            grad[idx] -= wj / (pj * total_w);
        }
    }
    ce /= total_w;

    let mut dice = 0.0;
    if kind == LossKind::CeDice {
        let inv_c = 1.0 / c as f64;
        let mut ratio_sum = 0.0;
        for k in 0..c {
            let pk = &p[k * plane..(k + 1) * plane];
            let (mut inter, mut union) = (0.0, 0.0);
            for j in 0..plane {
                let wj = weight(j);
                let yk = if y[j] == k { 1.0 } else { 0.0 };
                inter += wj * pk[j] * yk;
                union += wj * (pk[j] + yk);
            }
            let (num, den) = (2.0 * inter + DICE_EPS, union + DICE_EPS);
            ratio_sum += num / den;
            let gk = &mut grad[k * plane..(k + 1) * plane];
            for j in 0..plane {
                let wj = weight(j);
                let yk = if y[j] == k { 1.0 } else { 0.0 };
                let d_ratio = (2.0 * wj * yk * den - num * wj) / (den * den);
                gk[j] -= inv_c * d_ratio;
            }
        }
        dice = 1.0 - ratio_sum * inv_c;
    }
    Ok(LossEval {
        value: ce + dice,
        grad,
    })
}

/// Mean pixel cross-entropy plus soft Dice loss.
pub fn seg_loss(probs: &Tensor, labels: &LabelMap) -> Result<f64> {
    Ok(loss_and_grad(probs, labels, None, LossKind::CeDice)?.value)
}

pub fn seg_loss_with_grad(probs: &Tensor, labels: &LabelMap, kind: LossKind) -> Result<LossEval> {
    loss_and_grad(probs, labels, None, kind)
}

/// Records the (optionally weighted) segmentation loss of `probs` on the tape.
/// Weights are treated as constants.
pub fn record_loss(
    tape: &mut Tape,
    probs: Var,
    labels: &LabelMap,
    weights: Option<&[f64]>,
    kind: LossKind,
) -> Result<Var> {
    let eval = loss_and_grad(tape.value(probs), labels, weights, kind)?;
    tape.scalar_fn(probs, eval.value, eval.grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs_2x(pixels: &[[f64; 2]]) -> Tensor {
        let n = pixels.len();
        let mut d = vec![0.0; 2 * n];
        for (j, p) in pixels.iter().enumerate() {
            d[j] = p[0];
            d[n + j] = p[1];
        }
        Tensor::new(vec![2, 1, n], d).unwrap()
    }

    #[test]
    fn perfect_prediction_has_near_zero_loss() {
        let labels = LabelMap::new(1, 3, vec![0, 1, 1]).unwrap();
        let p = probs_2x(&[[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]);
        assert!(seg_loss(&p, &labels).unwrap() <= 1e-6);
    }

    #[test]
    fn uniform_prediction_cross_entropy_is_ln2() {
        let labels = LabelMap::new(1, 4, vec![0, 1, 1, 0]).unwrap();
        let p = probs_2x(&[[0.5, 0.5]; 4]);
        let ce = seg_loss_with_grad(&p, &labels, LossKind::CeOnly)
            .unwrap()
            .value;
        assert!((ce - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn matches_hand_formula_on_3x3() {
        // C = 3, 3x3 map; probabilities from a fixed pattern.
        let labels = LabelMap::new(3, 3, vec![0, 1, 2, 2, 1, 0, 0, 0, 1]).unwrap();
        let raw: Vec<[f64; 3]> = (0..9)
            .map(|j| {
                let a = 1.0 + j as f64;
                let b = 2.0 + (j * 7 % 5) as f64;
                let c = 1.5 + (j * 3 % 4) as f64;
                let s = a + b + c;
                [a / s, b / s, c / s]
            })
            .collect();
        let mut d = vec![0.0; 27];
        for j in 0..9 {
            for k in 0..3 {
                d[k * 9 + j] = raw[j][k];
            }
        }
        let p = Tensor::new(vec![3, 3, 3], d).unwrap();

        let y = labels.labels();
        let ce: f64 = (0..9).map(|j| -raw[j][y[j]].ln()).sum::<f64>() / 9.0;
        let mut ratio = 0.0;
        for k in 0..3 {
            let inter: f64 = (0..9).filter(|&j| y[j] == k).map(|j| raw[j][k]).sum();
            let psum: f64 = (0..9).map(|j| raw[j][k]).sum();
            let ysum = (0..9).filter(|&j| y[j] == k).count() as f64;
            ratio += (2.0 * inter + DICE_EPS) / (psum + ysum + DICE_EPS);
        }
        let expected = ce + 1.0 - ratio / 3.0;
        assert!((seg_loss(&p, &labels).unwrap() - expected).abs() <= 1e-12);
    }

    #[test]
    fn rejects_out_of_range_labels_and_bad_weights() {
        let p = probs_2x(&[[0.5, 0.5]; 2]);
        assert!(seg_loss(&p, &LabelMap::new(1, 2, vec![0, 2]).unwrap()).is_err());
        let l = LabelMap::new(1, 2, vec![0, 1]).unwrap();
        assert!(loss_and_grad(&p, &l, Some(&[1.0, -1.0]), LossKind::CeDice).is_err());
        assert!(loss_and_grad(&p, &l, Some(&[1.0]), LossKind::CeDice).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let labels = LabelMap::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        let base = vec![0.3, 0.8, 0.45, 0.6, 0.7, 0.2, 0.55, 0.4];
        let w = [0.5, 1.7, 0.0, 1.0];
        for weights in [None, Some(&w[..])] {
            let p = Tensor::new(vec![2, 2, 2], base.clone()).unwrap();
            let g = loss_and_grad(&p, &labels, weights, LossKind::CeDice)
                .unwrap()
                .grad;
            let h = 1e-5;
            for i in 0..8 {
                let mut up = base.clone();
                let mut dn = base.clone();
                up[i] += h;
                dn[i] -= h;
                let f = |d: Vec<f64>| {
                    loss_and_grad(
                        &Tensor::new(vec![2, 2, 2], d).unwrap(),
                        &labels,
                        weights,
                        LossKind::CeDice,
                    )
                    .unwrap()
                    .value
                };
                let fd = (f(up) - f(dn)) / (2.0 * h);
                assert!(
                    (g[i] - fd).abs() / fd.abs().max(1.0) <= 1e-7,
                    "{i}: {} vs {fd}",
                    g[i]
                );
            }
        }
    }
}
