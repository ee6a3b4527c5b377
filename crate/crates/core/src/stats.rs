//! Streaming class-conditional feature moments and intra-class perturbation sampling.
//!
//! Each class keeps a count, a mean and a population covariance (normalized
//! by `n`). Merging two summaries uses the pooled formula
//!
//! ```text
//! Σ' = (n Σ + m Σ̄) / (n + m) + n m Δμ Δμᵀ / (n + m)²,   Δμ = μ − μ̄
//! μ' = (n μ + m μ̄) / (n + m)
//! ```
//!
//! which is exact under population normalization, so any chunking of a sample
//! stream yields the same moments as a single pass over it.

use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::{LabelMap, Tensor};

/// Population moments of a nonempty batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub count: u64,
    pub mean: Vec<f64>,
    /// Row-major `dim x dim`.
    pub cov: Vec<f64>,
}

/// Two-pass population mean and covariance.
pub fn batch_moments<V: AsRef<[f64]>>(features: &[V]) -> Result<Moments> {
    let Some(first) = features.first() else {
        return Err(invalid!("batch_moments of an empty feature list"));
    };
    let dim = first.as_ref().len();
    let mut flat = Vec::with_capacity(dim * features.len());
    for f in features {
        let f = f.as_ref();
        if f.len() != dim {
            return Err(shape_err!(
                "feature of length {} in a batch of dim {dim}",
                f.len()
            ));
        }
        flat.extend_from_slice(f);
    }
    Ok(moments_flat(&flat, dim))
}

/// Moments of `len / dim` contiguous vectors of length `dim`; `flat` must be nonempty.
pub(crate) fn moments_flat(flat: &[f64], dim: usize) -> Moments {
    let m = flat.len() / dim;
    debug_assert!(m > 0 && m * dim == flat.len());
    let mut mean = vec![0.0; dim];
    for v in flat.chunks_exact(dim) {
        for (a, x) in mean.iter_mut().zip(v) {
            *a += x;
        }
    }
    mean.iter_mut().for_each(|a| *a /= m as f64);

    let mut cov = vec![0.0; dim * dim];
    let mut centered = vec![0.0; dim];
    for v in flat.chunks_exact(dim) {
        for ((c, x), mu) in centered.iter_mut().zip(v).zip(&mean) {
            *c = x - mu;
        }
        for i in 0..dim {
            let ci = centered[i];
            let row = &mut cov[i * dim..(i + 1) * dim];
            for j in i..dim {
                row[j] += ci * centered[j];
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            let v = cov[i * dim + j] / m as f64;
            cov[i * dim + j] = v;
            cov[j * dim + i] = v;
        }
    }
    Moments {
        count: m as u64,
        mean,
        cov,
    }
}

/// Streaming summary of one class's feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassAccumulator {
    class_id: usize,
    count: u64,
    mean: Vec<f64>,
    cov: Vec<f64>,
}

impl ClassAccumulator {
    pub fn empty(class_id: usize, dim: usize) -> Self {
        Self {
            class_id,
            count: 0,
            mean: vec![0.0; dim],
            cov: vec![0.0; dim * dim],
        }
    }

    pub fn from_moments(class_id: usize, moments: Moments) -> Result<Self> {
        Self::empty(class_id, moments.mean.len()).update(&moments.mean, &moments.cov, moments.count)
    }

    pub fn class_id(&self) -> usize {
        self.class_id
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Row-major population covariance.
    pub fn cov(&self) -> &[f64] {
        &self.cov
    }

    /// Folds in a batch of `m` samples summarized by its population moments.
    pub fn update(&self, batch_mean: &[f64], batch_cov: &[f64], m: u64) -> Result<Self> {
        let dim = self.dim();
        if m == 0 {
            return Err(invalid!("update with an empty batch (m = 0)"));
        }
        if batch_mean.len() != dim || batch_cov.len() != dim * dim {
            return Err(shape_err!(
                "batch moments of dim {}/{} do not match accumulator dim {dim}",
                batch_mean.len(),
                batch_cov.len()
            ));
        }
        if self.count == 0 {
            return Ok(Self {
                class_id: self.class_id,
                count: m,
                mean: batch_mean.to_vec(),
                cov: batch_cov.to_vec(),
            });
        }
        let (n, mf) = (self.count as f64, m as f64);
        let total = n + mf;
        let delta: Vec<f64> = self
            .mean
            .iter()
            .zip(batch_mean)
            .map(|(a, b)| a - b)
            .collect();
        let mean = self
            .mean
            .iter()
            .zip(batch_mean)
            .map(|(a, b)| (n * a + mf * b) / total)
            .collect();
        let cross = n * mf / (total * total);
        let mut cov = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..dim {
                let k = i * dim + j;
                cov[k] =
                    (n * self.cov[k] + mf * batch_cov[k]) / total + cross * delta[i] * delta[j];
            }
        }
        Ok(Self {
            class_id: self.class_id,
            count: self.count + m,
            mean,
            cov,
        })
    }

    /// Summary of the union of both underlying sample sets.
    pub fn merge(&self, other: &Self) -> Result<Self> {
        if self.class_id != other.class_id {
            return Err(invalid!(
                "cannot merge class {} with class {}",
                self.class_id,
                other.class_id
            ));
        }
        if self.dim() != other.dim() {
            return Err(shape_err!(
                "cannot merge dim {} with dim {}",
                self.dim(),
                other.dim()
            ));
        }
        if other.count == 0 {
            return Ok(self.clone());
        }
        self.update(&other.mean, &other.cov, other.count)
    }

    /// Sampler for `N(0, λ1 Σ)`, with the Cholesky factor computed once.
    pub fn sampler(&self, lambda1: f64) -> IntraSampler {
        let dim = self.dim();
        if lambda1 <= 0.0 || self.count < dim as u64 + 1 {
            return IntraSampler::Disabled { dim };
        }
        let scale = lambda1.sqrt();
        match jittered_cholesky(&self.cov, dim) {
            Some(mut l) => {
                l.iter_mut().for_each(|v| *v *= scale);
                IntraSampler::Cholesky { dim, factor: l }
            }
            None => IntraSampler::Diagonal {
                sd: (0..dim)
                    .map(|i| (lambda1 * self.cov[i * dim + i].max(0.0)).sqrt())
                    .collect(),
            },
        }
    }
}

/// Initial jitter relative to the mean diagonal of Σ.
pub const JITTER_START: f64 = 1e-8;
/// Largest relative jitter tried before falling back to diagonal sampling.
pub const JITTER_MAX: f64 = 1e-4;
/// Floor on the diagonal scale so an all-zero Σ still gets a (tiny) jitter.
const SCALE_FLOOR: f64 = 1e-8;

/// Lower Cholesky factor of `Σ + j·I`, escalating `j` tenfold on failure.
fn jittered_cholesky(cov: &[f64], dim: usize) -> Option<Vec<f64>> {
    let scale = ((0..dim).map(|i| cov[i * dim + i]).sum::<f64>() / dim as f64).max(SCALE_FLOOR);
    let mut rel = JITTER_START;
    while rel <= JITTER_MAX * (1.0 + 1e-9) {
        let jitter = rel * scale;
        let m = DMatrix::from_fn(dim, dim, |i, j| {
            cov[i * dim + j] + if i == j { jitter } else { 0.0 }
        });
        if let Some(ch) = m.cholesky() {
            let l = ch.unpack();
            return Some((0..dim * dim).map(|k| l[(k / dim, k % dim)]).collect());
        }
        rel *= 10.0;
    }
    None
}

/// Draws intra-class perturbation vectors.
#[derive(Clone, Debug, PartialEq)]
pub enum IntraSampler {
    /// Warm-up or `λ1 = 0`: always the zero vector.
    Disabled { dim: usize },
    /// `sqrt(λ1) L`, row-major lower-triangular.
    Cholesky { dim: usize, factor: Vec<f64> },
    /// Fallback when no jittered factorization succeeds.
    Diagonal { sd: Vec<f64> },
}

impl IntraSampler {
    pub fn dim(&self) -> usize {
        match self {
            IntraSampler::Disabled { dim } | IntraSampler::Cholesky { dim, .. } => *dim,
            IntraSampler::Diagonal { sd } => sd.len(),
        }
    }

    pub fn is_disabled(&self) -> bool {
        matches!(self, IntraSampler::Disabled { .. })
    }

    /// Adds one draw to `out`.
    pub fn add_sample<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        match self {
            IntraSampler::Disabled { .. } => {}
            IntraSampler::Cholesky { dim, factor } => {
                let mut eps = [0.0f64; 64];
                let eps: &mut [f64] = if *dim <= 64 {
                    &mut eps[..*dim]
                } else {
                    return self.add_sample_large(rng, out);
                };
                eps.iter_mut().for_each(|e| *e = rng.sample(StandardNormal));
                for (i, o) in out.iter_mut().enumerate() {
                    let row = &factor[i * dim..i * dim + i + 1];
                    *o += row.iter().zip(eps.iter()).map(|(l, e)| l * e).sum::<f64>();
                }
            }
            IntraSampler::Diagonal { sd } => {
                for (o, s) in out.iter_mut().zip(sd) {
                    let e: f64 = rng.sample(StandardNormal);
                    *o += s * e;
                }
            }
        }
    }

    fn add_sample_large<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        if let IntraSampler::Cholesky { dim, factor } = self {
            let eps: Vec<f64> = (0..*dim).map(|_| rng.sample(StandardNormal)).collect();
            for (i, o) in out.iter_mut().enumerate() {
                *o += (0..=i).map(|k| factor[i * dim + k] * eps[k]).sum::<f64>();
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.add_sample(rng, &mut out);
        out
    }
}

/// One draw of `α ~ N(0, λ1 Σ_c)`; zero while the class is warming up.
pub fn sample_intra<R: Rng + ?Sized>(
    acc: &ClassAccumulator,
    lambda1: f64,
    rng: &mut R,
) -> Vec<f64> {
    acc.sampler(lambda1).sample(rng)
}

/// One accumulator per class, all of the same feature dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct StatsBank {
    dim: usize,
    classes: Vec<ClassAccumulator>,
}

#[derive(Serialize, Deserialize)]
struct BankEntry {
    class_id: usize,
    count: u64,
    dim: usize,
}

impl StatsBank {
    pub fn new(num_classes: usize, dim: usize) -> Self {
        Self {
            dim,
            classes: (0..num_classes)
                .map(|c| ClassAccumulator::empty(c, dim))
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class(&self, c: usize) -> &ClassAccumulator {
        &self.classes[c]
    }

    pub fn classes(&self) -> &[ClassAccumulator] {
        &self.classes
    }

    /// Updates each class present in `labels` once with the moments of its pixels' feature vectors.
    pub fn ingest_feature_map(&mut self, features: &Tensor, labels: &LabelMap) -> Result<()> {
        let (n, h, w) = features.chw()?;
        if n != self.dim {
            return Err(shape_err!(
                "feature map has {n} channels, bank expects {}",
                self.dim
            ));
        }
        if (labels.height(), labels.width()) != (h, w) {
            return Err(shape_err!(
                "label map {}x{} does not match feature map {h}x{w}",
                labels.height(),
                labels.width()
            ));
        }
        labels.check_range(self.classes.len())?;
        let plane = h * w;
        let data = features.data();
        let mut per_class: Vec<Vec<f64>> = vec![Vec::new(); self.classes.len()];
        for (j, &c) in labels.labels().iter().enumerate() {
            per_class[c].extend((0..n).map(|ch| data[ch * plane + j]));
        }
        for (c, flat) in per_class.iter().enumerate() {
            if flat.is_empty() {
                continue;
            }
            let m = moments_flat(flat, n);
            self.classes[c] = self.classes[c].update(&m.mean, &m.cov, m.count)?;
        }
        Ok(())
    }

    pub fn merge(&self, other: &StatsBank) -> Result<StatsBank> {
        if self.dim != other.dim || self.classes.len() != other.classes.len() {
            return Err(shape_err!("cannot merge banks of different layout"));
        }
        let classes = self
            .classes
            .iter()
            .zip(&other.classes)
            .map(|(a, b)| a.merge(b))
            .collect::<Result<_>>()?;
        Ok(StatsBank {
            dim: self.dim,
            classes,
        })
    }

    pub fn samplers(&self, lambda1: f64) -> Vec<IntraSampler> {
        self.classes.iter().map(|a| a.sampler(lambda1)).collect()
    }

    /// Writes `manifest.json` plus `class_<c>_mean.csxt` / `class_<c>_cov.csxt` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = Vec::new();
        for acc in &self.classes {
            let c = acc.class_id;
            Tensor::new(vec![self.dim], acc.mean.clone())?
                .save(dir.join(format!("class_{c}_mean.csxt")))?;
            Tensor::new(vec![self.dim, self.dim], acc.cov.clone())?
                .save(dir.join(format!("class_{c}_cov.csxt")))?;
            manifest.push(BankEntry {
                class_id: c,
                count: acc.count,
                dim: self.dim,
            });
        }
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?)
            .map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.json");
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let entries: Vec<BankEntry> = serde_json::from_slice(&bytes)?;
        let dim = entries.first().map_or(0, |e| e.dim);
        let mut classes = Vec::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if e.class_id != i || e.dim != dim {
                return Err(Error::Format(format!(
                    "{}: inconsistent entry {i}",
                    path.display()
                )));
            }
            let mean = Tensor::load(dir.join(format!("class_{i}_mean.csxt")))?;
            let cov = Tensor::load(dir.join(format!("class_{i}_cov.csxt")))?;
            if mean.shape() != [dim] || cov.shape() != [dim, dim] {
                return Err(Error::Format(format!(
                    "class {i} tensors do not match dim {dim}"
                )));
            }
            classes.push(ClassAccumulator {
                class_id: i,
                count: e.count,
                mean: mean.into_data(),
                cov: cov.into_data(),
            });
        }
        Ok(Self { dim, classes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Definition-based two-pass moments, kept independent of `moments_flat`.
    fn oracle(samples: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
        let d = samples[0].len();
        let m = samples.len() as f64;
        let mean: Vec<f64> = (0..d)
            .map(|i| samples.iter().map(|s| s[i]).sum::<f64>() / m)
            .collect();
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] = samples
                    .iter()
                    .map(|s| (s[i] - mean[i]) * (s[j] - mean[j]))
                    .sum::<f64>()
                    / m;
            }
        }
        (mean, cov)
    }

    fn max_abs(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    fn random_samples(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-2.0..3.0)).collect())
            .collect()
    }

    #[test]
    fn hand_computed_moments() {
        let m = batch_moments(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(m.mean, vec![0.5, 0.5]);
        assert_eq!(m.cov, vec![0.25, -0.25, -0.25, 0.25]);
        let single = batch_moments(&[vec![3.0, -1.0, 2.0]]).unwrap();
        assert_eq!(single.mean, vec![3.0, -1.0, 2.0]);
        assert!(single.cov.iter().all(|&v| v == 0.0));
        assert!(batch_moments::<Vec<f64>>(&[]).is_err());
        assert!(batch_moments(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn moments_match_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let samples = random_samples(&mut rng, 1000, 8);
        let m = batch_moments(&samples).unwrap();
        let (mean, cov) = oracle(&samples);
        assert!(max_abs(&m.mean, &mean) <= 1e-10);
        assert!(max_abs(&m.cov, &cov) <= 1e-10);
    }

    #[test]
    fn update_from_empty_is_exact_copy() {
        let m = batch_moments(&[vec![0.3, 0.7], vec![1.1, -0.2], vec![0.9, 0.1]]).unwrap();
        let acc = ClassAccumulator::empty(0, 2)
            .update(&m.mean, &m.cov, m.count)
            .unwrap();
        assert_eq!(acc.mean(), &m.mean[..]);
        assert_eq!(acc.cov(), &m.cov[..]);
        assert_eq!(acc.count(), 3);
    }

    #[test]
    fn update_matches_concatenation() {
        let a = batch_moments(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let acc = ClassAccumulator::from_moments(0, a).unwrap();
        let b = batch_moments(&[vec![1.0, 1.0]]).unwrap();
        let acc = acc.update(&b.mean, &b.cov, 1).unwrap();
        let (mean, cov) = oracle(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        assert!(max_abs(acc.mean(), &mean) <= 1e-12);
        assert!(max_abs(acc.cov(), &cov) <= 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let samples = random_samples(&mut rng, 1000, 8);
        let mut acc = ClassAccumulator::empty(0, 8);
        for chunk in samples.chunks(100) {
            let m = batch_moments(chunk).unwrap();
            acc = acc.update(&m.mean, &m.cov, m.count).unwrap();
        }
        let (mean, cov) = oracle(&samples);
        assert_eq!(acc.count(), 1000);
        assert!(max_abs(acc.mean(), &mean) <= 1e-9);
        assert!(max_abs(acc.cov(), &cov) <= 1e-9);
    }

    #[test]
    fn update_errors() {
        let acc = ClassAccumulator::empty(0, 2);
        assert!(acc.update(&[0.0, 0.0], &[0.0; 4], 0).is_err());
        assert!(acc.update(&[0.0], &[0.0], 1).is_err());
        let other = ClassAccumulator::empty(1, 2);
        assert!(acc.merge(&other).is_err());
        assert!(acc.merge(&ClassAccumulator::empty(0, 3)).is_err());
    }

    #[test]
    fn merge_identity_and_laws() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mk = |rng: &mut ChaCha8Rng, n| {
            ClassAccumulator::from_moments(2, batch_moments(&random_samples(rng, n, 4)).unwrap())
                .unwrap()
        };
        let (a, b, c) = (mk(&mut rng, 17), mk(&mut rng, 5), mk(&mut rng, 40));
        assert_eq!(a.merge(&ClassAccumulator::empty(2, 4)).unwrap(), a);
        assert_eq!(ClassAccumulator::empty(2, 4).merge(&a).unwrap(), a);
        let (ab, ba) = (a.merge(&b).unwrap(), b.merge(&a).unwrap());
        assert!(max_abs(ab.cov(), ba.cov()) <= 1e-12 && max_abs(ab.mean(), ba.mean()) <= 1e-12);
        let left = a.merge(&b).unwrap().merge(&c).unwrap();
        let right = a.merge(&b.merge(&c).unwrap()).unwrap();
        assert!(max_abs(left.cov(), right.cov()) <= 1e-9);
    }

    #[test]
    fn ingest_single_class_and_checkerboard() {
        let mut bank = StatsBank::new(3, 2);
        let feats = Tensor::new(vec![2, 2, 3], (0..12).map(|v| v as f64).collect()).unwrap();
        bank.ingest_feature_map(&feats, &LabelMap::filled(2, 3, 1))
            .unwrap();
        assert_eq!(bank.class(1).count(), 6);
        assert_eq!(bank.class(0).count(), 0);
        assert_eq!(bank.class(2).count(), 0);

        let (h, w) = (4, 4);
        let labels: Vec<usize> = (0..h * w).map(|j| (j / w + j % w) % 2).collect();
        let mut data = vec![0.0; 2 * h * w];
        for (j, &c) in labels.iter().enumerate() {
            data[j] = if c == 0 { 1.5 } else { -2.0 };
            data[h * w + j] = if c == 0 { 0.25 } else { 7.0 };
        }
        let mut bank = StatsBank::new(2, 2);
        bank.ingest_feature_map(
            &Tensor::new(vec![2, h, w], data).unwrap(),
            &LabelMap::new(h, w, labels).unwrap(),
        )
        .unwrap();
        assert_eq!(bank.class(0).mean(), &[1.5, 0.25]);
        assert_eq!(bank.class(1).mean(), &[-2.0, 7.0]);
        assert!(bank
            .classes()
            .iter()
            .all(|a| a.cov().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn ingest_rejects_bad_inputs() {
        let mut bank = StatsBank::new(2, 2);
        let f = Tensor::zeros(&[2, 2, 2]);
        assert!(bank
            .ingest_feature_map(&f, &LabelMap::filled(2, 2, 2))
            .is_err());
        assert!(bank
            .ingest_feature_map(&f, &LabelMap::filled(2, 3, 0))
            .is_err());
        assert!(bank
            .ingest_feature_map(&Tensor::zeros(&[3, 2, 2]), &LabelMap::filled(2, 2, 0))
            .is_err());
    }

    #[test]
    fn ingest_is_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let maps: Vec<(Tensor, LabelMap)> = (0..4)
            .map(|_| {
                let f = Tensor::new(
                    vec![3, 5, 5],
                    (0..75).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
                .unwrap();
                let l =
                    LabelMap::new(5, 5, (0..25).map(|_| rng.random_range(0..3)).collect()).unwrap();
                (f, l)
            })
            .collect();
        let mut fwd = StatsBank::new(3, 3);
        let mut rev = StatsBank::new(3, 3);
        for (f, l) in &maps {
            fwd.ingest_feature_map(f, l).unwrap();
        }
        for (f, l) in maps.iter().rev() {
            rev.ingest_feature_map(f, l).unwrap();
        }
        for c in 0..3 {
            assert_eq!(fwd.class(c).count(), rev.class(c).count());
            assert!(max_abs(fwd.class(c).cov(), rev.class(c).cov()) <= 1e-9);
            assert!(max_abs(fwd.class(c).mean(), rev.class(c).mean()) <= 1e-9);
        }
    }

    fn identity_acc(dim: usize, count: u64) -> ClassAccumulator {
        let mut cov = vec![0.0; dim * dim];
        (0..dim).for_each(|i| cov[i * dim + i] = 1.0);
        ClassAccumulator::empty(0, dim)
            .update(&vec![0.0; dim], &cov, count)
            .unwrap()
    }

    #[test]
    fn sampler_zero_lambda_and_warmup() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let acc = identity_acc(4, 100);
        assert!(sample_intra(&acc, 0.0, &mut rng).iter().all(|&v| v == 0.0));
        let young = identity_acc(4, 4);
        assert!(young.sampler(1.0).is_disabled());
        assert!(!identity_acc(4, 5).sampler(1.0).is_disabled());
    }

    #[test]
    fn sampler_identity_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let sampler = identity_acc(4, 100).sampler(1.0);
        let draws: Vec<Vec<f64>> = (0..200_000).map(|_| sampler.sample(&mut rng)).collect();
        let (mean, cov) = oracle(&draws);
        let mut diff = 0.0;
        for i in 0..4 {
            assert!(mean[i].abs() < 0.01);
            for j in 0..4 {
                let e = if i == j { 1.0 } else { 0.0 };
                diff += (cov[i * 4 + j] - e).powi(2);
            }
        }
        assert!(diff.sqrt() / 2.0 <= 0.05);
    }

    #[test]
    fn zero_variance_class_stays_at_jitter_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let feats: Vec<Vec<f64>> = (0..50).map(|_| vec![0.4, -1.0, 2.5, 0.0]).collect();
        let acc = ClassAccumulator::from_moments(0, batch_moments(&feats).unwrap()).unwrap();
        assert!(acc.cov().iter().all(|&v| v.abs() <= 1e-30));
        let s = acc.sampler(1.0);
        for _ in 0..1000 {
            let v = s.sample(&mut rng);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(norm <= 1e-6 * 2.0);
        }
    }

    #[test]
    fn indefinite_covariance_falls_back_to_diagonal() {
        // Not PSD: no jitter up to the cap can fix a -1 eigenvalue.
        let cov = vec![1.0, 2.0, 2.0, 1.0];
        let acc = ClassAccumulator::empty(0, 2)
            .update(&[0.0, 0.0], &cov, 10)
            .unwrap();
        match acc.sampler(4.0) {
            IntraSampler::Diagonal { sd } => assert_eq!(sd, vec![2.0, 2.0]),
            other => panic!("expected diagonal fallback, got {other:?}"),
        }
    }

    #[test]
    fn bank_save_load_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let mut bank = StatsBank::new(3, 4);
        let f = Tensor::new(
            vec![4, 6, 6],
            (0..144).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let l = LabelMap::new(6, 6, (0..36).map(|j| j % 2).collect()).unwrap();
        bank.ingest_feature_map(&f, &l).unwrap();
        let dir = tempfile::tempdir().unwrap();
        bank.save(dir.path()).unwrap();
        let back = StatsBank::load(dir.path()).unwrap();
        assert_eq!(back, bank);
        let before = std::fs::read(dir.path().join("class_1_cov.csxt")).unwrap();
        back.save(dir.path()).unwrap();
        assert_eq!(
            std::fs::read(dir.path().join("class_1_cov.csxt")).unwrap(),
            before
        );
    }
}
