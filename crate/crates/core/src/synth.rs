//! Synthetic multi-domain "disc/cup" segmentation benchmark.
//!
//! Every sample is a textured background with a bright elliptical disc and a
//! brighter concentric cup, crossed by a few dark vessels. Labels come from the
//! geometry alone; a [`DomainSpec`] then restyles the image
//! (gamma → channel gain → box blur → Gaussian noise → clamp), so domains
//! differ in appearance while sharing the label distribution.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::StreamKey;
use crate::tensor::{LabelMap, Tensor};

pub const BACKGROUND: usize = 0;
pub const DISC: usize = 1;
pub const CUP: usize = 2;
pub const NUM_CLASSES: usize = 3;

/// Smallest image side accepted by the generator.
pub const MIN_SIZE: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: usize,
    pub gamma: f64,
    pub channel_gain: [f64; 3],
    pub additive_noise_sd: f64,
    pub blur_radius: u8,
    pub background_texture_scale: f64,
}

impl DomainSpec {
    /// A style transform that leaves the base render unchanged.
    pub fn identity(domain_id: usize) -> Self {
        Self {
            domain_id,
            gamma: 1.0,
            channel_gain: [1.0; 3],
            additive_noise_sd: 0.0,
            blur_radius: 0,
            background_texture_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(invalid!("domain {}: gamma must be > 0", self.domain_id));
        }
        if self
            .channel_gain
            .iter()
            .any(|g| !(*g > 0.0 && g.is_finite()))
        {
            return Err(invalid!(
                "domain {}: channel gains must be > 0",
                self.domain_id
            ));
        }
        if !(self.additive_noise_sd >= 0.0 && self.additive_noise_sd.is_finite()) {
            return Err(invalid!("domain {}: noise sd must be >= 0", self.domain_id));
        }
        if self.blur_radius > 2 {
            return Err(invalid!(
                "domain {}: blur radius must be 0, 1 or 2",
                self.domain_id
            ));
        }
        if !(self.background_texture_scale > 0.0 && self.background_texture_scale.is_finite()) {
            return Err(invalid!(
                "domain {}: texture scale must be > 0",
                self.domain_id
            ));
        }
        Ok(())
    }
}

/// The five built-in domains; domain 0 is the usual source.
pub fn default_domains() -> Vec<DomainSpec> {
    vec![
        DomainSpec::identity(0),
        DomainSpec {
            domain_id: 1,
            gamma: 0.6,
            channel_gain: [0.85, 1.05, 1.2],
            additive_noise_sd: 0.02,
            blur_radius: 1,
            background_texture_scale: 1.5,
        },
        DomainSpec {
            domain_id: 2,
            gamma: 1.6,
            channel_gain: [1.15, 0.95, 0.8],
            additive_noise_sd: 0.05,
            blur_radius: 0,
            background_texture_scale: 0.7,
        },
        DomainSpec {
            domain_id: 3,
            gamma: 0.6,
            channel_gain: [1.1, 0.8, 0.95],
            additive_noise_sd: 0.05,
            blur_radius: 2,
            background_texture_scale: 2.0,
        },
        DomainSpec {
            domain_id: 4,
            gamma: 1.6,
            channel_gain: [0.9, 1.15, 1.1],
            additive_noise_sd: 0.02,
            blur_radius: 1,
            background_texture_scale: 1.2,
        },
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub image: Tensor,
    pub label: LabelMap,
    pub domain_id: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
struct Vessel {
    // Line through (px, py) with direction angle `angle`.
    px: f64,
    py: f64,
    angle: f64,
    width: f64,
    depth: f64,
}

#[derive(Clone, Debug)]
struct Geometry {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
    cup_scale: f64,
    disc_rgb: [f64; 3],
    cup_rgb: [f64; 3],
    bg_rgb: [f64; 3],
    vessels: Vec<Vessel>,
}

impl Geometry {
    fn draw<R: Rng>(rng: &mut R, size: usize) -> Self {
        let s = size as f64;
        let area = s * s;
        loop {
            let a = rng.random_range(0.10..0.22) * s;
            let b = a * rng.random_range(0.75..1.0);
            let cup_scale = rng.random_range(0.3..0.7);
            let disc_area = PI * a * b;
            let cup_area = disc_area * cup_scale * cup_scale;
            if disc_area < 0.02 * area || cup_area < 0.005 * area {
                continue;
            }
            let margin = a + 2.0;
            let cx = rng.random_range(margin..s - margin);
            let cy = rng.random_range(margin..s - margin);
            let jitter = |rng: &mut R, base: [f64; 3]| {
                base.map(|v| (v + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0))
            };
            let bg_rgb = jitter(rng, [0.55, 0.24, 0.12]);
            let disc_rgb = jitter(rng, [0.82, 0.56, 0.32]);
            let cup_rgb = jitter(rng, [0.96, 0.84, 0.62]);
            let n_vessels = rng.random_range(2..5);
            let vessels = (0..n_vessels)
                .map(|_| Vessel {
                    px: cx + rng.random_range(-0.3..0.3) * a,
                    py: cy + rng.random_range(-0.3..0.3) * b,
                    angle: rng.random_range(0.0..PI),
                    width: rng.random_range(0.6..1.4),
                    depth: rng.random_range(0.25..0.45),
                })
                .collect();
            return Self {
                cx,
                cy,
                a,
                b,
                theta: rng.random_range(0.0..PI),
                cup_scale,
                disc_rgb,
                cup_rgb,
                bg_rgb,
                vessels,
            };
        }
    }

    /// Normalized disc radius and cup radius at a point.
    fn radii(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (sin, cos) = self.theta.sin_cos();
        let u = (dx * cos + dy * sin) / self.a;
        let v = (-dx * sin + dy * cos) / self.b;
        let rd = (u * u + v * v).sqrt();
        (rd, rd / self.cup_scale)
    }

    fn label(&self, x: f64, y: f64) -> usize {
        let (rd, rc) = self.radii(x, y);
        if rc <= 1.0 {
            CUP
        } else if rd <= 1.0 {
            DISC
        } else {
            BACKGROUND
        }
    }
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Two-octave value noise in roughly [-1, 1] on a `cells x cells` lattice.
struct ValueNoise {
    cells: usize,
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn new<R: Rng>(rng: &mut R, cells: usize) -> Self {
        let n = cells + 1;
        Self {
            cells,
            lattice: (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    fn at(&self, u: f64, v: f64) -> f64 {
        let n = self.cells + 1;
        let (gx, gy) = (u * self.cells as f64, v * self.cells as f64);
        let (x0, y0) = (
            (gx.floor() as usize).min(self.cells - 1),
            (gy.floor() as usize).min(self.cells - 1),
        );
        let (tx, ty) = (
            smoothstep(0.0, 1.0, gx - x0 as f64),
            smoothstep(0.0, 1.0, gy - y0 as f64),
        );
        let l = |x: usize, y: usize| self.lattice[y * n + x];
        let top = l(x0, y0) * (1.0 - tx) + l(x0 + 1, y0) * tx;
        let bot = l(x0, y0 + 1) * (1.0 - tx) + l(x0 + 1, y0 + 1) * tx;
        top * (1.0 - ty) + bot * ty
    }
}

/// Un-styled image and label for a sample seed.
///
/// Geometry depends only on `seed`; the texture depends on `seed` and
/// `texture_scale`.
pub fn render_base(seed: u64, size: usize, texture_scale: f64) -> Result<(Tensor, LabelMap)> {
    if size < MIN_SIZE {
        return Err(invalid!(
            "image size {size} is below the minimum {MIN_SIZE}"
        ));
    }
    let key = StreamKey::new(seed);
    let geo = Geometry::draw(&mut key.child(0).rng(), size);
    let mut tex_rng = key.child(1).rng();
    let cells = ((4.0 * texture_scale).round() as usize).max(2);
    let coarse = ValueNoise::new(&mut tex_rng, cells);
    let fine = ValueNoise::new(&mut tex_rng, cells * 3);

    let s = size as f64;
    let plane = size * size;
    let mut img = vec![0.0; 3 * plane];
    let mut labels = Vec::with_capacity(plane);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            labels.push(geo.label(px, py));
            let (rd, rc) = geo.radii(px, py);
            // Soft edges about one pixel wide.
            let edge = 1.0 / geo.a.min(geo.b);
            let in_disc = 1.0 - smoothstep(1.0 - edge, 1.0 + edge, rd);
            let cup_edge = edge / geo.cup_scale;
            let in_cup = 1.0 - smoothstep(1.0 - cup_edge, 1.0 + cup_edge, rc);
            let (u, v) = (px / s, py / s);
            let r2 = (u - 0.5).powi(2) + (v - 0.5).powi(2);
            let vignette = 1.0 - 0.6 * r2;
            let tex = 0.7 * coarse.at(u, v) + 0.3 * fine.at(u, v);
            let mut shade = 1.0;
            for vs in &geo.vessels {
                let (sin, cos) = vs.angle.sin_cos();
                let d = ((px - vs.px) * sin - (py - vs.py) * cos).abs();
                shade *= 1.0 - vs.depth * (-(d * d) / (vs.width * vs.width)).exp();
            }
            for ch in 0..3 {
                let bg = geo.bg_rgb[ch] * vignette + 0.07 * tex;
                let disc = geo.disc_rgb[ch] + 0.025 * tex;
                let cup = geo.cup_rgb[ch];
                let base = bg * (1.0 - in_disc) + in_disc * (disc * (1.0 - in_cup) + cup * in_cup);
                img[ch * plane + y * size + x] = (base * shade).clamp(0.0, 1.0);
            }
        }
    }
    Ok((
        Tensor::new(vec![3, size, size], img)?,
        LabelMap::new(size, size, labels)?,
    ))
}

fn box_blur(plane: &[f64], size: usize, radius: usize) -> Vec<f64> {
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for y in 0..size {
            for x in 0..size {
                let mut acc = 0.0;
                for d in -(radius as isize)..=radius as isize {
                    let (sx, sy) = if horizontal {
                        ((x as isize + d).clamp(0, size as isize - 1) as usize, y)
                    } else {
                        (x, (y as isize + d).clamp(0, size as isize - 1) as usize)
                    };
                    acc += src[sy * size + sx];
                }
                out[y * size + x] = acc / (2 * radius + 1) as f64;
            }
        }
        out
    };
    pass(&pass(plane, true), false)
}

/// Applies gamma → gain → blur → noise → clamp. `noise_key` drives the noise draws.
pub fn apply_style(base: &Tensor, spec: &DomainSpec, noise_key: StreamKey) -> Result<Tensor> {
    spec.validate()?;
    let (c, h, w) = base.chw()?;
    if c != 3 || h != w {
        return Err(invalid!("style transform expects a square 3-channel image"));
    }
    let plane = h * w;
    let mut img = base.data().to_vec();
    if spec.gamma != 1.0 {
        img.iter_mut().for_each(|v| *v = v.powf(spec.gamma));
    }
    for ch in 0..3 {
        let g = spec.channel_gain[ch];
        if g != 1.0 {
            img[ch * plane..(ch + 1) * plane]
                .iter_mut()
                .for_each(|v| *v *= g);
        }
    }
    if spec.blur_radius > 0 {
        for ch in 0..3 {
            let blurred = box_blur(
                &img[ch * plane..(ch + 1) * plane],
                h,
                spec.blur_radius as usize,
            );
            img[ch * plane..(ch + 1) * plane].copy_from_slice(&blurred);
        }
    }
    if spec.additive_noise_sd > 0.0 {
        let mut rng = noise_key.rng();
        for v in img.iter_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *v += spec.additive_noise_sd * e;
        }
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Tensor::new(vec![3, h, w], img)
}

/// One styled sample; identical `(spec, seed, size)` always gives identical output.
pub fn generate_sample(spec: &DomainSpec, seed: u64, size: usize) -> Result<SampleRecord> {
    spec.validate()?;
    let (base, label) = render_base(seed, size, spec.background_texture_scale)?;
    let image = apply_style(&base, spec, StreamKey::new(seed).child(2))?;
    Ok(SampleRecord {
        image,
        label,
        domain_id: spec.domain_id,
        seed,
    })
}

/// Seed of sample `index` of `domain_id` in a benchmark generated with `seed`.
pub fn sample_seed(seed: u64, domain_id: usize, index: usize) -> u64 {
    StreamKey::new(seed)
        .child(domain_id as u64)
        .child(index as u64)
        .value()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSplit {
    pub domain_id: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub domains: Vec<DomainSpec>,
    pub per_domain: usize,
    pub size: usize,
    pub seed: u64,
    pub splits: Vec<DomainSplit>,
}

impl DatasetManifest {
    pub fn split(&self, domain_id: usize) -> Option<&DomainSplit> {
        self.splits.iter().find(|s| s.domain_id == domain_id)
    }
}

/// 9:1 train/validation split of `0..per_domain`, shuffled deterministically.
pub fn train_val_split(per_domain: usize, seed: u64, domain_id: usize) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..per_domain).collect();
    let mut rng = StreamKey::new(seed)
        .child(0x5_911)
        .child(domain_id as u64)
        .rng();
    for i in (1..idx.len()).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    let n_val = (per_domain / 10).max(1);
    let mut val = idx.split_off(per_domain - n_val);
    idx.sort_unstable();
    val.sort_unstable();
    (idx, val)
}

fn domain_dir(root: &Path, domain_id: usize) -> PathBuf {
    root.join(format!("domain_{domain_id}"))
}

/// Writes the benchmark to `root` and returns its manifest.
pub fn generate_benchmark(
    specs: &[DomainSpec],
    per_domain: usize,
    size: usize,
    seed: u64,
    root: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    let root = root.as_ref();
    if specs.len() < 2 {
        return Err(invalid!(
            "a benchmark needs at least 2 domains, got {}",
            specs.len()
        ));
    }
    if per_domain < 10 {
        return Err(invalid!("per_domain must be >= 10, got {per_domain}"));
    }
    if size < MIN_SIZE {
        return Err(invalid!(
            "image size {size} is below the minimum {MIN_SIZE}"
        ));
    }
    for (i, s) in specs.iter().enumerate() {
        s.validate()?;
        if specs[..i].iter().any(|o| o.domain_id == s.domain_id) {
            return Err(invalid!("duplicate domain id {}", s.domain_id));
        }
    }
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut splits = Vec::with_capacity(specs.len());
    for spec in specs {
        let dir = domain_dir(root, spec.domain_id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for idx in 0..per_domain {
            let rec = generate_sample(spec, sample_seed(seed, spec.domain_id, idx), size)?;
            rec.image.save(dir.join(format!("img_{idx}.csxt")))?;
            rec.label
                .to_tensor()
                .save(dir.join(format!("lbl_{idx}.csxt")))?;
        }
        let (train, val) = train_val_split(per_domain, seed, spec.domain_id);
        splits.push(DomainSplit {
            domain_id: spec.domain_id,
            train,
            val,
        });
    }
    let manifest = DatasetManifest {
        domains: specs.to_vec(),
        per_domain,
        size,
        seed,
        splits,
    };
    let path = root.join("manifest.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?)
        .map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Read access to a generated benchmark directory.
#[derive(Clone, Debug)]
pub struct DomainDataset {
    root: PathBuf,
    manifest: DatasetManifest,
}

impl DomainDataset {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let path = root.join("manifest.json");
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest = serde_json::from_slice(&bytes)?;
        Ok(Self { root, manifest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn domain_ids(&self) -> Vec<usize> {
        self.manifest.domains.iter().map(|d| d.domain_id).collect()
    }

    pub fn load_sample(&self, domain_id: usize, index: usize) -> Result<SampleRecord> {
        let dir = domain_dir(&self.root, domain_id);
        let image = Tensor::load(dir.join(format!("img_{index}.csxt")))?;
        let label = LabelMap::from_tensor(&Tensor::load(dir.join(format!("lbl_{index}.csxt")))?)?;
        Ok(SampleRecord {
            image,
            label,
            domain_id,
            seed: sample_seed(self.manifest.seed, domain_id, index),
        })
    }

    pub fn load_indices(&self, domain_id: usize, indices: &[usize]) -> Result<Vec<SampleRecord>> {
        indices
            .iter()
            .map(|&i| self.load_sample(domain_id, i))
            .collect()
    }

    pub fn load_domain(&self, domain_id: usize) -> Result<Vec<SampleRecord>> {
        self.check_domain(domain_id)?;
        let all: Vec<usize> = (0..self.manifest.per_domain).collect();
        self.load_indices(domain_id, &all)
    }

    /// `(train, val)` samples of a domain.
    pub fn load_split(&self, domain_id: usize) -> Result<(Vec<SampleRecord>, Vec<SampleRecord>)> {
        self.check_domain(domain_id)?;
        let split = self
            .manifest
            .split(domain_id)
            .ok_or_else(|| Error::Format(format!("no split recorded for domain {domain_id}")))?;
        Ok((
            self.load_indices(domain_id, &split.train)?,
            self.load_indices(domain_id, &split.val)?,
        ))
    }

    fn check_domain(&self, domain_id: usize) -> Result<()> {
        if self
            .manifest
            .domains
            .iter()
            .any(|d| d.domain_id == domain_id)
        {
            Ok(())
        } else {
            Err(invalid!(
                "domain {domain_id} is not in the dataset at {}",
                self.root.display()
            ))
        }
    }
}

const HIST_BINS: usize = 32;

fn channel_histograms(images: &[Tensor]) -> [[f64; HIST_BINS]; 3] {
    let mut hist = [[0.0; HIST_BINS]; 3];
    for img in images {
        let plane = img.numel() / 3;
        for ch in 0..3 {
            for &v in &img.data()[ch * plane..(ch + 1) * plane] {
                let bin = ((v * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
                hist[ch][bin] += 1.0;
            }
        }
    }
    for h in hist.iter_mut() {
        let total: f64 = h.iter().sum();
        h.iter_mut().for_each(|v| *v /= total);
    }
    hist
}

/// Mean per-channel L1 distance between 32-bin intensity histograms of `n`
/// samples from each domain. Both sides use the same geometry seeds, so the
/// gap reflects style alone.
pub fn style_gap(a: &DomainSpec, b: &DomainSpec, n: usize, seed: u64, size: usize) -> Result<f64> {
    if n < 10 {
        return Err(invalid!("style_gap needs n >= 10, got {n}"));
    }
    let seeds: Vec<u64> = (0..n).map(|i| sample_seed(seed, usize::MAX, i)).collect();
    let render = |spec: &DomainSpec| -> Result<Vec<Tensor>> {
        seeds
            .iter()
            .map(|&s| Ok(generate_sample(spec, s, size)?.image))
            .collect()
    };
    let (ha, hb) = (
        channel_histograms(&render(a)?),
        channel_histograms(&render(b)?),
    );
    let gap = (0..3)
        .map(|ch| {
            ha[ch]
                .iter()
                .zip(&hb[ch])
                .map(|(x, y)| (x - y).abs())
                .sum::<f64>()
        })
        .sum::<f64>()
        / 3.0;
    Ok(gap)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_style_equals_base_render() {
        let spec = DomainSpec::identity(0);
        let rec = generate_sample(&spec, 42, 48).unwrap();
        let (base, label) = render_base(42, 48, spec.background_texture_scale).unwrap();
        assert_eq!(rec.image, base);
        assert_eq!(rec.label, label);
    }

    #[test]
    fn cup_nested_in_disc_and_all_classes_present() {
        let spec = default_domains()[2].clone();
        for seed in 0..30 {
            let rec = generate_sample(&spec, seed, 64).unwrap();
            let g = Geometry::draw(&mut StreamKey::new(seed).child(0).rng(), 64);
            let mut counts = [0usize; 3];
            for y in 0..64 {
                for x in 0..64 {
                    let l = rec.label.get(y, x);
                    counts[l] += 1;
                    if l == CUP {
                        let (rd, _) = g.radii(x as f64 + 0.5, y as f64 + 0.5);
                        assert!(rd <= 1.0, "cup pixel outside disc");
                    }
                }
            }
            assert!(counts[DISC] + counts[CUP] >= (0.02 * 4096.0) as usize);
            assert!(counts[CUP] >= (0.005 * 4096.0) as usize);
            assert!(counts.iter().all(|&c| c > 0));
            assert!(rec.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn deterministic_and_label_invariant_under_style() {
        let specs = default_domains();
        let a = generate_sample(&specs[3], 7, 64).unwrap();
        let b = generate_sample(&specs[3], 7, 64).unwrap();
        assert_eq!(a, b);
        let c = generate_sample(&specs[1], 7, 64).unwrap();
        assert_eq!(a.label, c.label);
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn rejects_small_size_and_bad_specs() {
        assert!(generate_sample(&DomainSpec::identity(0), 1, 16).is_err());
        let mut bad = DomainSpec::identity(0);
        bad.blur_radius = 3;
        assert!(bad.validate().is_err());
        bad = DomainSpec::identity(0);
        bad.gamma = 0.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn split_is_nine_to_one_and_partitions() {
        let (train, val) = train_val_split(80, 3, 1);
        assert_eq!((train.len(), val.len()), (72, 8));
        let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..80).collect::<Vec<_>>());
    }

    #[test]
    fn style_gap_properties() {
        let base = DomainSpec::identity(0);
        assert!(style_gap(&base, &base, 50, 1, 32).unwrap() <= 0.02);
        let mut lo = base.clone();
        lo.gamma = 0.5;
        let mut hi = base.clone();
        hi.gamma = 2.0;
        let ab = style_gap(&lo, &hi, 50, 1, 32).unwrap();
        let ba = style_gap(&hi, &lo, 50, 1, 32).unwrap();
        assert!(ab >= 0.1, "gap {ab}");
        assert!((ab - ba).abs() <= 0.02);
        assert!(style_gap(&lo, &hi, 5, 1, 32).is_err());
    }
}
