//! Deep feature augmentation.
//!
//! Each pixel feature `z` (label `c`) is moved to `ẑ = z + α_ic + α_cd`:
//!
//! * `α_ic ~ N(0, λ1 Σ_c)` follows the class's intra-class covariance;
//! * `α_cd` perturbs only the `k` channels selected from the loss gradient
//!   `∂L/∂z` (smallest entries by default), drawn from `U[0, λ2]` or `N(0, λ2)`.
//!
//! All draws come from per-pixel counter-based streams, so the result is
//! independent of traversal order.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::losses::{record_loss, LossKind};
use crate::model::SegModel;
use crate::rng::{DrawKind, StreamKey};
use crate::stats::{IntraSampler, StatsBank};
use crate::tensor::{LabelMap, Tape, Tensor};

/// Which gradient channels receive the cross-domain perturbation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    #[default]
    MinK,
    MaxK,
    RandomK,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossDist {
    #[default]
    Uniform,
    Normal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub k: usize,
    pub tau: f64,
    pub mask_mode: MaskMode,
    pub cross_dist: CrossDist,
    /// Loss used for gradient guidance.
    pub guidance_loss: LossKind,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.5,
            k: 5,
            tau: 0.6,
            mask_mode: MaskMode::MinK,
            cross_dist: CrossDist::Uniform,
            guidance_loss: LossKind::CeDice,
        }
    }
}

impl AugConfig {
    pub fn validate(&self, feature_channels: usize) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(invalid!(
                "lambda1 and lambda2 must be nonnegative (got {}, {})",
                self.lambda1,
                self.lambda2
            ));
        }
        if self.k > feature_channels {
            return Err(invalid!(
                "k = {} exceeds feature channels {feature_channels}",
                self.k
            ));
        }
        if !(-1.0..=1.0).contains(&self.tau) {
            return Err(invalid!("tau = {} outside [-1, 1]", self.tau));
        }
        Ok(())
    }
}

/// `∂L_seg(H(Z), Y) / ∂Z` with the model parameters held fixed.
pub fn feature_gradient(
    model: &SegModel,
    features: &Tensor,
    labels: &LabelMap,
    kind: LossKind,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let z = tape.variable(features.clone());
    let probs = model.head(&mut tape, &bound, z)?;
    let loss = record_loss(&mut tape, probs, labels, None, kind)?;
    tape.gradient_wrt(loss, z)
}

/// Channel indices picked for one pixel, in ascending index order.
///
/// `MinK`/`MaxK` order by value with ties going to the lower channel index.
pub fn select_channels<R: Rng + ?Sized>(
    values: &[f64],
    k: usize,
    mode: MaskMode,
    rng: &mut R,
) -> Vec<usize> {
    let n = values.len();
    let mut picked: Vec<usize> = match mode {
        MaskMode::RandomK => rand::seq::index::sample(rng, n, k).into_vec(),
        MaskMode::MinK | MaskMode::MaxK => {
            let mut idx: Vec<usize> = (0..n).collect();
            if mode == MaskMode::MinK {
                idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
            } else {
                idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
            }
            idx.truncate(k);
            idx
        }
    };
    picked.sort_unstable();
    picked
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k > n {
        return Err(invalid!("k = {k} exceeds feature channels {n}"));
    }
    Ok(())
}

fn pixel_values(data: &[f64], n: usize, plane: usize, j: usize, buf: &mut Vec<f64>) {
    buf.clear();
    buf.extend((0..n).map(|ch| data[ch * plane + j]));
}

/// Binary `[N, H, W]` mask with exactly `k` ones per pixel.
pub fn feature_mask(grad: &Tensor, k: usize, mode: MaskMode, key: StreamKey) -> Result<Tensor> {
    let (n, h, w) = grad.chw()?;
    check_k(k, n)?;
    let plane = h * w;
    let mut mask = vec![0.0; n * plane];
    let mut buf = Vec::with_capacity(n);
    for j in 0..plane {
        pixel_values(grad.data(), n, plane, j, &mut buf);
        let mut rng = key.pixel_rng(j, DrawKind::Mask);
        for ch in select_channels(&buf, k, mode, &mut rng) {
            mask[ch * plane + j] = 1.0;
        }
    }
    Ok(Tensor::from_parts(vec![n, h, w], mask))
}

#[inline]
fn cross_draw<R: Rng + ?Sized>(rng: &mut R, lambda2: f64, dist: CrossDist) -> f64 {
    match dist {
        CrossDist::Uniform => rng.random::<f64>() * lambda2,
        CrossDist::Normal => {
            let e: f64 = rng.sample(StandardNormal);
            e * lambda2.sqrt()
        }
    }
}

/// `α_cd`: masked entries from `U[0, λ2]` (or `N(0, λ2)`), unmasked entries exactly 0.
pub fn sample_cross(
    mask: &Tensor,
    lambda2: f64,
    dist: CrossDist,
    key: StreamKey,
) -> Result<Tensor> {
    if !(lambda2 >= 0.0) {
        return Err(invalid!("lambda2 must be nonnegative, got {lambda2}"));
    }
    let (n, h, w) = mask.chw()?;
    let plane = h * w;
    let mut out = vec![0.0; n * plane];
    for j in 0..plane {
        let mut rng = key.pixel_rng(j, DrawKind::Cross);
        for ch in 0..n {
            if mask.data()[ch * plane + j] != 0.0 {
                out[ch * plane + j] = cross_draw(&mut rng, lambda2, dist);
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, h, w], out))
}

/// `ẑ = z + α_ic + α_cd` using the bank's current class statistics.
pub fn augment_features(
    features: &Tensor,
    labels: &LabelMap,
    bank: &StatsBank,
    grad: &Tensor,
    cfg: &AugConfig,
    key: StreamKey,
) -> Result<Tensor> {
    let samplers = bank.samplers(cfg.lambda1);
    augment_with_samplers(features, labels, &samplers, grad, cfg, key)
}

/// Same as [`augment_features`] with samplers (Cholesky factors) prepared once by the caller.
pub fn augment_with_samplers(
    features: &Tensor,
    labels: &LabelMap,
    samplers: &[IntraSampler],
    grad: &Tensor,
    cfg: &AugConfig,
    key: StreamKey,
) -> Result<Tensor> {
    let (n, h, w) = features.chw()?;
    if grad.shape() != features.shape() {
        return Err(shape_err!(
            "gradient {:?} does not match features {:?}",
            grad.shape(),
            features.shape()
        ));
    }
    if (labels.height(), labels.width()) != (h, w) {
        return Err(shape_err!(
            "labels {}x{} do not match features {h}x{w}",
            labels.height(),
            labels.width()
        ));
    }
    labels.check_range(samplers.len())?;
    if let Some(s) = samplers.iter().find(|s| s.dim() != n) {
        return Err(shape_err!(
            "sampler dim {} does not match {n} channels",
            s.dim()
        ));
    }
    cfg.validate(n)?;

    let plane = h * w;
    let z = features.data();
    let mut out = z.to_vec();
    let mut intra = vec![0.0; n];
    let mut buf = Vec::with_capacity(n);
    for j in 0..plane {
        let c = labels.labels()[j];
        intra.fill(0.0);
        samplers[c].add_sample(&mut key.pixel_rng(j, DrawKind::Intra), &mut intra);
        for ch in 0..n {
            out[ch * plane + j] += intra[ch];
        }
        if cfg.k == 0 || cfg.lambda2 == 0.0 {
            continue;
        }
        pixel_values(grad.data(), n, plane, j, &mut buf);
        let picked = select_channels(
            &buf,
            cfg.k,
            cfg.mask_mode,
            &mut key.pixel_rng(j, DrawKind::Mask),
        );
        let mut rng = key.pixel_rng(j, DrawKind::Cross);
        for ch in picked {
            out[ch * plane + j] += cross_draw(&mut rng, cfg.lambda2, cfg.cross_dist);
        }
    }
    Tensor::new(vec![n, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::stats::{batch_moments, ClassAccumulator};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
        )
        .unwrap()
    }

    fn tiny_model(n: usize, c: usize) -> SegModel {
        SegModel::new(ModelConfig {
            feature_channels: n,
            num_classes: c,
            encoder_depth: 1,
            seed: 5,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn min_k_example() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = [0.3, -1.2, 0.0, 5.0];
        assert_eq!(select_channels(&v, 2, MaskMode::MinK, &mut rng), vec![1, 2]);
        assert_eq!(select_channels(&v, 2, MaskMode::MaxK, &mut rng), vec![0, 3]);
        // ties: lower index wins
        let t = [1.0, 0.5, 0.5, 0.5];
        assert_eq!(select_channels(&t, 2, MaskMode::MinK, &mut rng), vec![1, 2]);
        assert_eq!(select_channels(&t, 2, MaskMode::MaxK, &mut rng), vec![0, 1]);
    }

    #[test]
    fn mask_boundaries_and_cardinality() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = rand_tensor(&mut rng, &[6, 3, 4], 1.0);
        let key = StreamKey::new(3);
        assert!(feature_mask(&g, 0, MaskMode::MinK, key)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(feature_mask(&g, 6, MaskMode::MinK, key)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 1.0));
        assert!(feature_mask(&g, 7, MaskMode::MinK, key).is_err());
        for mode in [MaskMode::MinK, MaskMode::MaxK, MaskMode::RandomK] {
            let m = feature_mask(&g, 3, mode, key).unwrap();
            for j in 0..12 {
                let ones: f64 = (0..6).map(|c| m.data()[c * 12 + j]).sum();
                assert_eq!(ones, 3.0);
            }
        }
        // min_k optimality: every selected entry <= every unselected one
        let m = feature_mask(&g, 3, MaskMode::MinK, key).unwrap();
        for j in 0..12 {
            let sel: Vec<f64> = (0..6)
                .filter(|&c| m.data()[c * 12 + j] == 1.0)
                .map(|c| g.data()[c * 12 + j])
                .collect();
            let rest: Vec<f64> = (0..6)
                .filter(|&c| m.data()[c * 12 + j] == 0.0)
                .map(|c| g.data()[c * 12 + j])
                .collect();
            assert!(sel.iter().all(|s| rest.iter().all(|r| s <= r)));
        }
    }

    #[test]
    fn cross_sampling() {
        let mask = Tensor::ones(&[4, 5, 5]);
        let key = StreamKey::new(4);
        assert!(sample_cross(&mask, 0.0, CrossDist::Uniform, key)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let mut half = vec![0.0; 100];
        half[..50].fill(1.0);
        let half = Tensor::new(vec![4, 5, 5], half).unwrap();
        let a = sample_cross(&half, 0.5, CrossDist::Normal, key).unwrap();
        assert!(a.data()[50..].iter().all(|&v| v == 0.0));
        assert!(a.data()[..50].iter().any(|&v| v < 0.0));

        // Uniform mean over 1e5 draws.
        let big = Tensor::ones(&[1, 100, 1000]);
        let a = sample_cross(&big, 0.5, CrossDist::Uniform, key).unwrap();
        assert!(a.data().iter().all(|&v| (0.0..=0.5).contains(&v)));
        let mean = a.data().iter().sum::<f64>() / a.numel() as f64;
        assert!((mean - 0.25).abs() <= 0.02 * 0.25);
    }

    #[test]
    fn no_op_augmentation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = rand_tensor(&mut rng, &[4, 5, 5], 1.0);
        let g = rand_tensor(&mut rng, &[4, 5, 5], 1.0);
        let labels = LabelMap::new(5, 5, (0..25).map(|j| j % 2).collect()).unwrap();
        let mut bank = StatsBank::new(2, 4);
        bank.ingest_feature_map(&z, &labels).unwrap();
        let cfg = AugConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            k: 2,
            ..AugConfig::default()
        };
        let out = augment_features(&z, &labels, &bank, &g, &cfg, StreamKey::new(1)).unwrap();
        assert_eq!(out, z);
        let bad = LabelMap::filled(5, 5, 2);
        assert!(augment_features(&z, &bad, &bank, &g, &cfg, StreamKey::new(1)).is_err());
    }

    #[test]
    fn zero_variance_class_barely_moves() {
        let feats: Vec<Vec<f64>> = (0..40).map(|_| vec![0.2, 1.0, -0.5]).collect();
        let acc = ClassAccumulator::from_moments(0, batch_moments(&feats).unwrap()).unwrap();
        let z = Tensor::new(
            vec![3, 2, 2],
            vec![
                0.2, 0.2, 0.2, 0.2, 1.0, 1.0, 1.0, 1.0, -0.5, -0.5, -0.5, -0.5,
            ],
        )
        .unwrap();
        let cfg = AugConfig {
            lambda2: 0.0,
            k: 2,
            ..AugConfig::default()
        };
        let samplers = vec![acc.sampler(cfg.lambda1)];
        let out = augment_with_samplers(
            &z,
            &LabelMap::filled(2, 2, 0),
            &samplers,
            &Tensor::zeros(&[3, 2, 2]),
            &cfg,
            StreamKey::new(2),
        )
        .unwrap();
        assert!(out.max_abs_diff(&z) <= 1e-6);
    }

    #[test]
    fn composition_matches_separate_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z = rand_tensor(&mut rng, &[5, 4, 4], 1.0);
        let g = rand_tensor(&mut rng, &[5, 4, 4], 1.0);
        let labels = LabelMap::new(4, 4, (0..16).map(|j| usize::from(j >= 8)).collect()).unwrap();
        let bank = StatsBank::new(2, 5); // warm-up: only α_cd
        let key = StreamKey::new(8);
        for mode in [MaskMode::MinK, MaskMode::RandomK] {
            let cfg = AugConfig {
                k: 2,
                mask_mode: mode,
                ..AugConfig::default()
            };
            let out = augment_features(&z, &labels, &bank, &g, &cfg, key).unwrap();
            let mask = feature_mask(&g, 2, mode, key).unwrap();
            let cross = sample_cross(&mask, cfg.lambda2, cfg.cross_dist, key).unwrap();
            for i in 0..z.numel() {
                assert_eq!(out.data()[i], z.data()[i] + cross.data()[i]);
            }
        }
    }

    #[test]
    fn expected_shift_matches_half_lambda2() {
        // One pixel, warm class with small covariance, 1e5 repetitions.
        let z = Tensor::new(vec![4, 1, 1], vec![0.5, -0.2, 1.0, 0.0]).unwrap();
        let g = Tensor::new(vec![4, 1, 1], vec![0.3, -1.2, 0.0, 5.0]).unwrap();
        let labels = LabelMap::filled(1, 1, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let samples: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..4).map(|_| rng.random_range(-0.3..0.3)).collect())
            .collect();
        let acc = ClassAccumulator::from_moments(0, batch_moments(&samples).unwrap()).unwrap();
        let cfg = AugConfig {
            k: 2,
            ..AugConfig::default()
        };
        let samplers = vec![acc.sampler(cfg.lambda1)];
        let reps = 100_000;
        let mut sum = [0.0; 4];
        for r in 0..reps {
            let out =
                augment_with_samplers(&z, &labels, &samplers, &g, &cfg, StreamKey::new(r)).unwrap();
            for c in 0..4 {
                sum[c] += out.data()[c] - z.data()[c];
            }
        }
        let expected = [0.0, 0.25, 0.25, 0.0];
        for c in 0..4 {
            let mean = sum[c] / reps as f64;
            if expected[c] > 0.0 {
                assert!(
                    (mean - expected[c]).abs() <= 0.02 * expected[c],
                    "channel {c}: {mean}"
                );
            } else {
                assert!(mean.abs() <= 0.005, "channel {c}: {mean}");
            }
        }
    }

    #[test]
    fn feature_gradient_is_pure_and_matches_fd() {
        let model = tiny_model(3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let z = rand_tensor(&mut rng, &[3, 4, 4], 1.0);
        let labels =
            LabelMap::new(4, 4, (0..16).map(|_| rng.random_range(0..2)).collect()).unwrap();
        let before = model.parameter_hash();
        let g1 = feature_gradient(&model, &z, &labels, LossKind::CeDice).unwrap();
        let g2 = feature_gradient(&model, &z, &labels, LossKind::CeDice).unwrap();
        assert_eq!(g1, g2);
        assert_eq!(model.parameter_hash(), before);
        let loss =
            |t: &Tensor| crate::losses::seg_loss(&model.forward_head(t).unwrap(), &labels).unwrap();
        let h = 1e-5;
        for i in 0..z.numel() {
            let mut up = z.clone().into_data();
            let mut dn = up.clone();
            up[i] += h;
            dn[i] -= h;
            let fd = (loss(&Tensor::new(vec![3, 4, 4], up).unwrap())
                - loss(&Tensor::new(vec![3, 4, 4], dn).unwrap()))
                / (2.0 * h);
            assert!((g1.data()[i] - fd).abs() / fd.abs().max(1.0) <= 1e-5);
        }
        assert!(feature_gradient(
            &model,
            &Tensor::zeros(&[4, 4, 4]),
            &labels,
            LossKind::CeDice
        )
        .is_err());
    }

    #[test]
    fn saturated_head_gives_tiny_gradient() {
        // Head maps channel c to logit c with a large gain; features one-hot on the label.
        let mut model = tiny_model(2, 2);
        model
            .set_param(
                "head.weight",
                Tensor::new(vec![2, 2], vec![60.0, 0.0, 0.0, 60.0]).unwrap(),
            )
            .unwrap();
        let labels = LabelMap::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        let mut d = vec![0.0; 8];
        for (j, &c) in labels.labels().iter().enumerate() {
            d[c * 4 + j] = 1.0;
        }
        let g = feature_gradient(
            &model,
            &Tensor::new(vec![2, 2, 2], d).unwrap(),
            &labels,
            LossKind::CeDice,
        )
        .unwrap();
        assert!(g.data().iter().all(|v| v.abs() <= 1e-6));
    }
}
