//! Small encoder/head segmentation network.
//!
//! The encoder is a stack of stride-1 3x3 conv + ReLU blocks, so feature maps
//! keep the label resolution. The head is a 1x1 convolution followed by a
//! channel softmax. Augmentation operates on the tensor between the two.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::{LabelMap, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub feature_channels: usize,
    pub num_classes: usize,
    pub encoder_depth: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            feature_channels: 16,
            num_classes: 3,
            encoder_depth: 3,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.feature_channels == 0 || self.encoder_depth == 0 {
            return Err(invalid!("model dimensions must be positive: {self:?}"));
        }
        if self.num_classes < 2 {
            return Err(invalid!(
                "need at least 2 classes, got {}",
                self.num_classes
            ));
        }
        Ok(())
    }
}

/// Smallest spatial size accepted by the encoder.
pub const MIN_SPATIAL: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct SegModel {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    velocity: Vec<Vec<f64>>,
}

/// Parameter handles of a model bound to one tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl SegModel {
    /// Kaiming-normal kernels (fan-in), zero biases.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (n, c) = (config.feature_channels, config.num_classes);
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut kaiming = |shape: Vec<usize>, fan_in: usize| {
            let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let len = shape.iter().product();
            Tensor::from_parts(shape, (0..len).map(|_| dist.sample(&mut rng)).collect())
        };
        for block in 0..config.encoder_depth {
            let c_in = if block == 0 { config.in_channels } else { n };
            names.push(format!("encoder.{block}.weight"));
            params.push(kaiming(vec![n, c_in, 3, 3], c_in * 9));
            names.push(format!("encoder.{block}.bias"));
            params.push(Tensor::zeros(&[n]));
        }
        names.push("head.weight".into());
        params.push(kaiming(vec![c, n], n));
        names.push("head.bias".into());
        params.push(Tensor::zeros(&[c]));
        let velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Ok(Self {
            config,
            names,
            params,
            velocity,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    /// Replaces one parameter tensor (shape must match).
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| invalid!("unknown parameter {name}"))?;
        if value.shape() != self.params[i].shape() {
            return Err(shape_err!(
                "parameter {name} has shape {:?}, got {:?}",
                self.params[i].shape(),
                value.shape()
            ));
        }
        self.params[i] = value;
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// SHA-256 over parameter names and values.
    pub fn parameter_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.names.iter().zip(&self.params) {
            h.update(name.as_bytes());
            h.update(p.to_bytes());
        }
        hex(&h.finalize())
    }

    /// Records the parameters as leaves; `trainable` marks them gradient-requiring.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.variable(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        BoundParams { vars }
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let (c, h, w) = image.chw()?;
        if c != self.config.in_channels {
            return Err(shape_err!(
                "image has {c} channels, model expects {}",
                self.config.in_channels
            ));
        }
        if h < MIN_SPATIAL || w < MIN_SPATIAL {
            return Err(shape_err!(
                "image {h}x{w} is smaller than {MIN_SPATIAL}x{MIN_SPATIAL}"
            ));
        }
        Ok(())
    }

    /// Encoder on the tape; `image` must be a `[C_in, H, W]` node.
    pub fn encode(&self, tape: &mut Tape, bound: &BoundParams, image: Var) -> Result<Var> {
        self.check_image(tape.value(image))?;
        let mut x = image;
        for block in 0..self.config.encoder_depth {
            let (k, b) = (bound.vars[2 * block], bound.vars[2 * block + 1]);
            let z = tape.conv2d(x, k, b)?;
            x = tape.relu(z);
        }
        Ok(x)
    }

    /// Head on the tape, returning per-pixel class probabilities.
    pub fn head(&self, tape: &mut Tape, bound: &BoundParams, features: Var) -> Result<Var> {
        let (n, _, _) = tape.value(features).chw()?;
        if n != self.config.feature_channels {
            return Err(shape_err!(
                "features have {n} channels, head expects {}",
                self.config.feature_channels
            ));
        }
        let d = self.config.encoder_depth;
        let logits = tape.conv1x1(features, bound.vars[2 * d], bound.vars[2 * d + 1])?;
        tape.softmax_channels(logits)
    }

    pub fn forward_encoder(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(image.clone());
        let z = self.encode(&mut tape, &bound, x)?;
        Ok(tape.value(z).clone())
    }

    pub fn forward_head(&self, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let z = tape.constant(features.clone());
        let p = self.head(&mut tape, &bound, z)?;
        Ok(tape.value(p).clone())
    }

    pub fn predict(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(image.clone());
        let z = self.encode(&mut tape, &bound, x)?;
        let p = self.head(&mut tape, &bound, z)?;
        Ok(tape.value(p).clone())
    }

    /// Momentum SGD: `v ← μ v + g`, `θ ← θ − lr v`. `grads` follows [`Self::param_names`] order.
    pub fn sgd_step(&mut self, grads: &[Tensor], lr: f64, momentum: f64) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(invalid!(
                "got {} gradients for {} parameters",
                grads.len(),
                self.params.len()
            ));
        }
        for ((name, p), g) in self.names.iter().zip(&self.params).zip(grads) {
            if p.shape() != g.shape() {
                return Err(shape_err!(
                    "gradient for {name} has shape {:?}, expected {:?}",
                    g.shape(),
                    p.shape()
                ));
            }
        }
        for ((p, v), g) in self.params.iter_mut().zip(&mut self.velocity).zip(grads) {
            for ((theta, vel), gi) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vel = momentum * *vel + gi;
                *theta -= lr * *vel;
            }
        }
        if let Some(name) = self
            .names
            .iter()
            .zip(&self.params)
            .find_map(|(n, p)| p.data().iter().any(|v| !v.is_finite()).then_some(n))
        {
            return Err(invalid!("parameter {name} became non-finite"));
        }
        Ok(())
    }

    pub fn reset_velocity(&mut self) {
        self.velocity.iter_mut().for_each(|v| v.fill(0.0));
    }

    /// Writes one container file per parameter plus `manifest.json`.
    /// With `with_velocity`, optimizer state is stored too (for resuming).
    pub fn save(
        &self,
        dir: impl AsRef<Path>,
        meta: &CheckpointMeta,
        with_velocity: bool,
    ) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut shapes = BTreeMap::new();
        for (name, p) in self.names.iter().zip(&self.params) {
            p.save(dir.join(format!("{name}.csxt")))?;
            if with_velocity {
                let v = self.velocity[shapes.len()].clone();
                Tensor::new(p.shape().to_vec(), v)?
                    .save(dir.join(format!("{name}.velocity.csxt")))?;
            }
            shapes.insert(name.clone(), p.shape().to_vec());
        }
        let manifest = CheckpointManifest {
            params: shapes,
            config: self.config.clone(),
            meta: meta.clone(),
            has_velocity: with_velocity,
        };
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?)
            .map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, CheckpointMeta)> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.json");
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: CheckpointManifest = serde_json::from_slice(&bytes)?;
        let mut model = SegModel::new(manifest.config.clone())?;
        if manifest.params.len() != model.names.len() {
            return Err(Error::Format(format!(
                "{}: {} parameters listed, architecture has {}",
                path.display(),
                manifest.params.len(),
                model.names.len()
            )));
        }
        for i in 0..model.names.len() {
            let name = model.names[i].clone();
            let declared = manifest.params.get(&name).ok_or_else(|| {
                Error::Format(format!("{}: missing parameter {name}", path.display()))
            })?;
            let t = Tensor::load(dir.join(format!("{name}.csxt")))?;
            if t.shape() != declared.as_slice() {
                return Err(Error::Format(format!(
                    "{name}: stored shape {:?} != declared {declared:?}",
                    t.shape()
                )));
            }
            model.set_param(&name, t)?;
            if manifest.has_velocity {
                let v = Tensor::load(dir.join(format!("{name}.velocity.csxt")))?;
                model.velocity[i] = v.into_data();
            }
        }
        Ok((model, manifest.meta))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Training metadata stored alongside checkpoint parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub seed: u64,
    pub method: String,
    pub source_domain: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    params: BTreeMap<String, Vec<usize>>,
    config: ModelConfig,
    #[serde(flatten)]
    meta: CheckpointMeta,
    #[serde(default)]
    has_velocity: bool,
}

/// Polynomial decay `lr0 (1 − t/T)^0.9`, clamped to 0 past `T`.
pub fn poly_lr(lr0: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let frac = (step as f64 / total_steps as f64).min(1.0);
    lr0 * (1.0 - frac).powf(0.9)
}

/// Nearest-neighbour label downsampling: output `(y, x)` reads source `(⌊y H/h⌋, ⌊x W/w⌋)`.
pub fn downsample_labels(labels: &LabelMap, target: (usize, usize)) -> Result<LabelMap> {
    let (h, w) = target;
    let (src_h, src_w) = (labels.height(), labels.width());
    if h == 0 || w == 0 || h > src_h || w > src_w {
        return Err(invalid!(
            "cannot resample {src_h}x{src_w} labels to {h}x{w}"
        ));
    }
    let out = (0..h * w)
        .map(|k| {
            let (y, x) = (k / w, k % w);
            labels.get(y * src_h / h, x * src_w / w)
        })
        .collect();
    LabelMap::new(h, w, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::record_loss;
    use crate::losses::LossKind;

    fn small() -> SegModel {
        SegModel::new(ModelConfig {
            feature_channels: 4,
            num_classes: 2,
            encoder_depth: 2,
            seed: 3,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn default_parameter_budget() {
        let m = SegModel::new(ModelConfig::default()).unwrap();
        assert!(m.num_parameters() < 50_000);
        assert_eq!(m.param_names().len(), 8);
    }

    #[test]
    fn zero_image_gives_zero_features() {
        let m = SegModel::new(ModelConfig::default()).unwrap();
        let z = m.forward_encoder(&Tensor::zeros(&[3, 8, 10])).unwrap();
        assert_eq!(z.shape(), &[16, 8, 10]);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_rejects_bad_inputs() {
        let m = small();
        assert!(m.forward_encoder(&Tensor::zeros(&[1, 8, 8])).is_err());
        assert!(m.forward_encoder(&Tensor::zeros(&[3, 4, 8])).is_err());
        assert!(m.forward_head(&Tensor::zeros(&[5, 8, 8])).is_err());
    }

    #[test]
    fn head_zero_weights_is_uniform() {
        let mut m = small();
        m.set_param("head.weight", Tensor::zeros(&[2, 4])).unwrap();
        let p = m.forward_head(&Tensor::ones(&[4, 8, 8])).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn deterministic_forward() {
        let img = Tensor::new(
            vec![3, 9, 9],
            (0..243).map(|i| (i as f64 * 0.13).sin()).collect(),
        )
        .unwrap();
        let a = small().predict(&img).unwrap();
        let b = small().predict(&img).unwrap();
        assert_eq!(a, b);
        let (_, h, w) = a.chw().unwrap();
        for j in 0..h * w {
            assert!((a.data()[j] + a.data()[h * w + j] - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn sgd_closed_forms() {
        let mut m = small();
        let zero_grads: Vec<Tensor> = m
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        let mut ones = zero_grads.clone();
        let last = ones.len() - 1;
        ones[last] = Tensor::ones(&[2]);
        m.sgd_step(&ones, 0.1, 0.0).unwrap();
        assert_eq!(m.params()[last].data(), &[-0.1, -0.1]);

        let mut m = small();
        m.sgd_step(&ones, 0.01, 0.99).unwrap();
        assert!((m.params()[last].data()[0] + 0.01).abs() < 1e-15);
        m.sgd_step(&ones, 0.01, 0.99).unwrap();
        assert!((m.params()[last].data()[0] + 0.01 + 0.01 * 1.99).abs() < 1e-15);

        assert!(m.sgd_step(&ones[..last], 0.1, 0.9).is_err());
    }

    #[test]
    fn poly_lr_endpoints_and_monotone() {
        assert_eq!(poly_lr(0.001, 0, 100), 0.001);
        assert_eq!(poly_lr(0.001, 100, 100), 0.0);
        let mut prev = f64::INFINITY;
        for t in 0..=100 {
            let lr = poly_lr(0.001, t, 100);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn downsample_cases() {
        let c = LabelMap::new(4, 4, (0..16).map(|j| (j / 4 + j % 4) % 2).collect()).unwrap();
        assert_eq!(downsample_labels(&c, (4, 4)).unwrap(), c);
        let d = downsample_labels(&c, (2, 2)).unwrap();
        // oracle: output (y, x) reads (2y, 2x)
        let expected: Vec<usize> = (0..4).map(|k| c.get(2 * (k / 2), 2 * (k % 2))).collect();
        assert_eq!(d.labels(), &expected[..]);
        let konst = LabelMap::filled(6, 6, 2);
        assert!(downsample_labels(&konst, (3, 2))
            .unwrap()
            .labels()
            .iter()
            .all(|&l| l == 2));
        assert!(downsample_labels(&konst, (7, 6)).is_err());
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let m = small();
        let img = Tensor::new(
            vec![3, 8, 8],
            (0..192).map(|i| ((i * 37 % 101) as f64) / 101.0).collect(),
        )
        .unwrap();
        let labels =
            LabelMap::new(8, 8, (0..64).map(|j| usize::from((j % 8) > 3)).collect()).unwrap();
        let loss_of = |x: &Tensor| -> (f64, Tensor) {
            let mut tape = Tape::new();
            let bound = m.bind(&mut tape, true);
            let xv = tape.variable(x.clone());
            let z = m.encode(&mut tape, &bound, xv).unwrap();
            let p = m.head(&mut tape, &bound, z).unwrap();
            let l = record_loss(&mut tape, p, &labels, None, LossKind::CeDice).unwrap();
            let g = tape.backward(l).unwrap();
            (tape.value(l).item().unwrap(), g.get(xv).unwrap().clone())
        };
        let (_, g) = loss_of(&img);
        let h = 1e-5;
        for i in (0..192).step_by(7) {
            let mut up = img.clone().into_data();
            let mut dn = up.clone();
            up[i] += h;
            dn[i] -= h;
            let fd = (loss_of(&Tensor::new(vec![3, 8, 8], up).unwrap()).0
                - loss_of(&Tensor::new(vec![3, 8, 8], dn).unwrap()).0)
                / (2.0 * h);
            assert!((g.data()[i] - fd).abs() / fd.abs().max(1.0) <= 1e-5);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = small();
        let dir = tempfile::tempdir().unwrap();
        let meta = CheckpointMeta {
            epoch: 4,
            seed: 9,
            method: "constyx".into(),
            source_domain: Some(0),
        };
        m.save(dir.path(), &meta, true).unwrap();
        let (back, meta2) = SegModel::load(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(meta2, meta);
        assert_eq!(back.parameter_hash(), m.parameter_hash());
    }
}
