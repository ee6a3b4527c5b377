use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{Method, RunConfig, StatsOrder};
use crate::afu::utilization_weights;
use crate::dfa::augment_with_samplers;
use crate::error::{invalid, Error, Result};
use crate::losses::{record_loss, LossKind};
use crate::metrics::{evaluate, EvalResult};
use crate::model::{hex, poly_lr, BoundParams, CheckpointMeta, SegModel};
use crate::parallel;
use crate::rng::StreamKey;
use crate::stats::StatsBank;
use crate::synth::{DomainDataset, SampleRecord};
use crate::tensor::{Tape, Tensor, Var};

const SHUFFLE_STREAM: u64 = 1;
const AUG_STREAM: u64 = 2;

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const RESUME_DIR: &str = "last";
pub const METRICS_FILE: &str = "metrics.json";
pub const RUN_LOG_FILE: &str = "run_log.json";

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub total: f64,
    pub original: f64,
    pub augmented: f64,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    /// Batch means.
    pub losses: StepLosses,
    /// Batch-mean parameter gradients in parameter order.
    pub grads: Vec<Tensor>,
}

struct ImageGraph {
    tape: Tape,
    bound: BoundParams,
    features: Var,
    loss: Var,
    feature_grad: Option<Tensor>,
}

fn forward_original(
    model: &SegModel,
    sample: &SampleRecord,
    guidance: Option<LossKind>,
) -> Result<ImageGraph> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let x = tape.constant(sample.image.clone());
    let features = model.encode(&mut tape, &bound, x)?;
    let probs = model.head(&mut tape, &bound, features)?;
    let loss = record_loss(&mut tape, probs, &sample.label, None, LossKind::CeDice)?;
    let feature_grad = match guidance {
        None => None,
        Some(LossKind::CeDice) => Some(tape.gradient_wrt(loss, features)?),
        Some(kind) => {
            let guide = record_loss(&mut tape, probs, &sample.label, None, kind)?;
            Some(tape.gradient_wrt(guide, features)?)
        }
    };
    Ok(ImageGraph {
        tape,
        bound,
        features,
        loss,
        feature_grad,
    })
}

/// Losses and batch-mean gradients for one step, without touching the model.
///
/// Per image: encoder → features → head → L_orig; for augmenting methods the
/// feature gradient of L_orig guides `augment_features`, the head runs again on
/// the augmented features, and L_aug is added (AFU-weighted for constyx).
/// Gradients reach the encoder through both branches. The bank ingests the
/// batch's original features before or after augmentation per
/// `cfg.stats_update_order`.
pub fn step_gradients(
    model: &SegModel,
    batch: &[&SampleRecord],
    bank: &mut StatsBank,
    cfg: &RunConfig,
    key: StreamKey,
) -> Result<StepOutput> {
    if batch.is_empty() {
        return Err(invalid!("empty batch"));
    }
    let augments = cfg.method.augments();
    let guidance = augments.then_some(cfg.aug.guidance_loss);
    let graphs: Vec<ImageGraph> =
        parallel::map_ordered(batch, |s| forward_original(model, s, guidance))
            .into_iter()
            .collect::<Result<_>>()?;

    let ingest = |bank: &mut StatsBank, graphs: &[ImageGraph]| -> Result<()> {
        for (g, s) in graphs.iter().zip(batch) {
            bank.ingest_feature_map(g.tape.value(g.features), &s.label)?;
        }
        Ok(())
    };
    if augments && cfg.stats_update_order == StatsOrder::BeforeAugment {
        ingest(bank, &graphs)?;
    }
    let samplers = if augments {
        bank.samplers(cfg.aug.lambda1)
    } else {
        Vec::new()
    };

    let per_image = parallel::map_indexed(
        graphs,
        |i, mut g| -> Result<(StepLosses, Vec<Tensor>, ImageGraph)> {
            let sample = batch[i];
            let original = g.tape.value(g.loss).item()?;
            let (total, augmented) = if augments {
                let z = g.tape.value(g.features).clone();
                let grad = g
                    .feature_grad
                    .as_ref()
                    .expect("guidance gradient for augmenting methods");
                let z_hat = augment_with_samplers(
                    &z,
                    &sample.label,
                    &samplers,
                    grad,
                    &cfg.aug,
                    key.child(i as u64),
                )?;
                let alpha: Vec<f64> = z_hat
                    .data()
                    .iter()
                    .zip(z.data())
                    .map(|(a, b)| a - b)
                    .collect();
                let alpha = g.tape.constant(Tensor::new(z.shape().to_vec(), alpha)?);
                let z_hat = g.tape.add(g.features, alpha)?;
                let probs = model.head(&mut g.tape, &g.bound, z_hat)?;
                let weights = match cfg.method {
                    Method::Constyx if cfg.force_unit_weights => {
                        Some(Tensor::ones(&[sample.label.height(), sample.label.width()]))
                    }
                    Method::Constyx => Some(utilization_weights(
                        &z,
                        g.tape.value(z_hat),
                        g.tape.value(probs),
                        cfg.aug.tau,
                    )?),
                    _ => None,
                };
                let aug_loss = record_loss(
                    &mut g.tape,
                    probs,
                    &sample.label,
                    weights.as_ref().map(Tensor::data),
                    LossKind::CeDice,
                )?;
                let augmented = g.tape.value(aug_loss).item()?;
                let total = if cfg.aug_only {
                    aug_loss
                } else {
                    g.tape.add(g.loss, aug_loss)?
                };
                (total, augmented)
            } else {
                (g.loss, 0.0)
            };
            let losses = StepLosses {
                total: g.tape.value(total).item()?,
                original,
                augmented,
            };
            let mut grads = g.tape.backward(total)?;
            let param_grads = g
                .bound
                .vars()
                .iter()
                .map(|&v| grads.take(v).expect("parameter gradient"))
                .collect();
            Ok((losses, param_grads, g))
        },
    );

    let mut sums: Option<Vec<Vec<f64>>> = None;
    let mut losses = StepLosses::default();
    let mut graphs = Vec::with_capacity(batch.len());
    for item in per_image {
        let (l, grads, g) = item?;
        losses.total += l.total;
        losses.original += l.original;
        losses.augmented += l.augmented;
        match &mut sums {
            None => sums = Some(grads.into_iter().map(Tensor::into_data).collect()),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(grads) {
                    a.iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                }
            }
        }
        graphs.push(g);
    }
    if augments && cfg.stats_update_order == StatsOrder::AfterAugment {
        ingest(bank, &graphs)?;
    }
    let b = batch.len() as f64;
    losses.total /= b;
    losses.original /= b;
    losses.augmented /= b;
    let grads = sums
        .expect("nonempty batch")
        .into_iter()
        .zip(model.params())
        .map(|(mut g, p)| {
            g.iter_mut().for_each(|x| *x /= b);
            Tensor::from_parts(p.shape().to_vec(), g)
        })
        .collect();
    Ok(StepOutput { losses, grads })
}

/// One optimizer step: [`step_gradients`] then momentum SGD at `lr`.
/// `step` is the global step, `batch_idx` the batch position within the epoch.
pub fn train_step(
    model: &mut SegModel,
    batch: &[&SampleRecord],
    bank: &mut StatsBank,
    cfg: &RunConfig,
    (step, batch_idx): (usize, usize),
    lr: f64,
) -> Result<StepLosses> {
    let out = step_gradients(model, batch, bank, cfg, step_key(cfg.seed, step))?;
    if !out.losses.total.is_finite() {
        let seeds: Vec<u64> = batch.iter().map(|s| s.seed).collect();
        log::error!(
            "non-finite loss {:?} at step {step}, batch {batch_idx}, run seed {}, sample seeds {seeds:?}",
            out.losses,
            cfg.seed
        );
        return Err(Error::NonFiniteLoss {
            step,
            batch: batch_idx,
            seed: cfg.seed,
        });
    }
    let mut grads = out.grads;
    if cfg.weight_decay > 0.0 {
        for (g, p) in grads.iter_mut().zip(model.params()) {
            *g = Tensor::from_parts(
                g.shape().to_vec(),
                g.data()
                    .iter()
                    .zip(p.data())
                    .map(|(g, p)| g + cfg.weight_decay * p)
                    .collect(),
            );
        }
    }
    model.sgd_step(&grads, lr, cfg.momentum)?;
    Ok(out.losses)
}

pub fn step_key(seed: u64, step: usize) -> StreamKey {
    StreamKey::new(seed).child(AUG_STREAM).child(step as u64)
}

/// Deterministic permutation of `0..n` for an epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = StreamKey::new(seed)
        .child(SHUFFLE_STREAM)
        .child(epoch as u64)
        .rng();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dsc: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunLog {
    pub config: RunConfig,
    /// SHA-256 over the effective config and every dataset file.
    pub input_hash: String,
    pub deviations: Vec<String>,
    pub epochs: Vec<EpochRecord>,
    /// Batch-mean total loss of every optimizer step.
    pub step_losses: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub val_eval: EvalResult,
    pub final_eval: EvalResult,
    pub wall_clock_secs: f64,
    pub resumed_from_epoch: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub model: SegModel,
    pub meta: CheckpointMeta,
    pub log: RunLog,
}

#[derive(Serialize, Deserialize)]
struct ResumeState {
    config: RunConfig,
    epochs_done: usize,
    step: usize,
    epochs: Vec<EpochRecord>,
    step_losses: Vec<f64>,
    best_epoch: Option<usize>,
    best_val: f64,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn input_hash(cfg: &RunConfig, ds: &DomainDataset) -> Result<String> {
    let mut echo = cfg.clone();
    echo.data = PathBuf::new();
    echo.out = PathBuf::new();
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&echo)?);
    let manifest = ds.root().join("manifest.json");
    h.update(std::fs::read(&manifest).map_err(|e| Error::io(&manifest, e))?);
    for d in ds.domain_ids() {
        for idx in 0..ds.manifest().per_domain {
            for kind in ["img", "lbl"] {
                let p = ds.root().join(format!("domain_{d}/{kind}_{idx}.csxt"));
                h.update(std::fs::read(&p).map_err(|e| Error::io(&p, e))?);
            }
        }
    }
    Ok(hex(&h.finalize()))
}

/// Evaluation class ids: every non-background class.
pub fn foreground_classes(model: &SegModel) -> Vec<usize> {
    (1..model.config().num_classes).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TrainOptions {
    /// Continue from a matching state in `last/` if present.
    pub resume: bool,
    /// Stop with [`Error::Interrupted`] once this many epochs are complete.
    pub halt_after_epochs: Option<usize>,
}

/// [`run_training_with`] with only the `resume` option.
pub fn run_training(cfg: &RunConfig, resume: bool) -> Result<RunOutcome> {
    run_training_with(
        cfg,
        TrainOptions {
            resume,
            halt_after_epochs: None,
        },
    )
}

/// Trains on the source domain's train split, keeps the epoch with the best
/// validation mean DSC, evaluates it on every other domain and writes
/// `checkpoint/`, `metrics.json`, `metrics.txt` and `run_log.json` under
/// `cfg.out`. A resumable state is kept in `last/` after every epoch; with
/// `resume`, a matching state there is continued instead of starting over.
pub fn run_training_with(cfg: &RunConfig, opts: TrainOptions) -> Result<RunOutcome> {
    let started = Instant::now();
    cfg.validate()?;
    let ds = DomainDataset::open(&cfg.data)?;
    let domains = ds.domain_ids();
    if !domains.contains(&cfg.source_domain) {
        return Err(invalid!(
            "source domain {} is not in {}",
            cfg.source_domain,
            cfg.data.display()
        ));
    }
    let (train, val) = ds.load_split(cfg.source_domain)?;
    let mut held_out = Vec::new();
    for &d in domains.iter().filter(|&&d| d != cfg.source_domain) {
        held_out.extend(ds.load_domain(d)?);
    }
    if train.is_empty() || val.is_empty() || held_out.is_empty() {
        return Err(invalid!(
            "need nonempty train, validation and held-out sets"
        ));
    }
    let hash = input_hash(cfg, &ds)?;

    let mut model_cfg = cfg.model.clone();
    model_cfg.seed = cfg.seed;
    if model_cfg.num_classes < crate::synth::NUM_CLASSES {
        return Err(invalid!(
            "model has {} classes, dataset has {}",
            model_cfg.num_classes,
            crate::synth::NUM_CLASSES
        ));
    }
    let mut model = SegModel::new(model_cfg)?;
    let classes = foreground_classes(&model);
    let mut bank = StatsBank::new(model.config().num_classes, model.config().feature_channels);

    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let out = cfg.out.as_path();
    let resume_dir = out.join(RESUME_DIR);
    let best_dir = out.join(CHECKPOINT_DIR);
    let meta_for = |epoch: usize| CheckpointMeta {
        epoch,
        seed: cfg.seed,
        method: cfg.method.name().into(),
        source_domain: Some(cfg.source_domain),
    };

    let mut state = ResumeState {
        config: cfg.clone(),
        epochs_done: 0,
        step: 0,
        epochs: Vec::new(),
        step_losses: Vec::new(),
        best_epoch: None,
        best_val: f64::NEG_INFINITY,
    };
    let mut best = model.clone();
    let mut resumed_from_epoch = None;
    let state_path = resume_dir.join("state.json");
    if opts.resume && state_path.exists() {
        let saved: ResumeState = read_json(&state_path)?;
        if saved.config == *cfg {
            model = SegModel::load(resume_dir.join("model"))?.0;
            bank = StatsBank::load(resume_dir.join("stats"))?;
            if saved.best_epoch.is_some() {
                best = SegModel::load(&best_dir)?.0;
            }
            resumed_from_epoch = Some(saved.epochs_done);
            log::info!(
                "resuming {} after epoch {}",
                out.display(),
                saved.epochs_done
            );
            state = saved;
        } else {
            log::warn!(
                "config differs from the saved state in {}; starting over",
                resume_dir.display()
            );
        }
    }

    for epoch in state.epochs_done..cfg.epochs {
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let mut loss_sum = 0.0;
        let mut lr = cfg.lr0;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&SampleRecord> = chunk.iter().map(|&i| &train[i]).collect();
            lr = poly_lr(cfg.lr0, state.step, total_steps);
            let losses = train_step(
                &mut model,
                &batch,
                &mut bank,
                cfg,
                (state.step, batch_idx),
                lr,
            )?;
            loss_sum += losses.total;
            state.step_losses.push(losses.total);
            state.step += 1;
        }
        let val_dsc = evaluate(&model, &val, &classes)?.average;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / steps_per_epoch as f64,
            val_dsc,
            lr,
        };
        log::info!(
            "epoch {epoch:>3}  loss {:.4}  val DSC {:.2}",
            record.train_loss,
            100.0 * record.val_dsc
        );
        state.epochs.push(record);
        if val_dsc > state.best_val {
            state.best_val = val_dsc;
            state.best_epoch = Some(epoch);
            best = model.clone();
            best.save(&best_dir, &meta_for(epoch + 1), false)?;
        }
        state.epochs_done = epoch + 1;
        model.save(resume_dir.join("model"), &meta_for(epoch + 1), true)?;
        bank.save(resume_dir.join("stats"))?;
        write_json(&state_path, &state)?;
        if opts.halt_after_epochs == Some(state.epochs_done) && state.epochs_done < cfg.epochs {
            return Err(Error::Interrupted {
                epochs_done: state.epochs_done,
            });
        }
    }

    let meta = meta_for(state.best_epoch.map_or(0, |e| e + 1));
    best.save(&best_dir, &meta, false)?;
    let method = cfg.method.name();
    let val_eval = evaluate(&best, &val, &classes)?.with_run(method, Some(cfg.source_domain));
    let final_eval =
        evaluate(&best, &held_out, &classes)?.with_run(method, Some(cfg.source_domain));
    write_json(&out.join(METRICS_FILE), &final_eval)?;
    let table = final_eval.to_table(&["disc", "cup"]);
    let txt = out.join("metrics.txt");
    std::fs::write(&txt, &table).map_err(|e| Error::io(&txt, e))?;
    let log = RunLog {
        config: cfg.clone(),
        input_hash: hash,
        deviations: cfg.deviations(ds.manifest().size),
        epochs: state.epochs,
        step_losses: state.step_losses,
        best_epoch: state.best_epoch,
        val_eval,
        final_eval,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        resumed_from_epoch,
    };
    write_json(&out.join(RUN_LOG_FILE), &log)?;
    Ok(RunOutcome {
        model: best,
        meta,
        log,
    })
}

/// Evaluates a saved checkpoint on every domain except its source domain.
pub fn evaluate_checkpoint(
    checkpoint: impl AsRef<Path>,
    data: impl AsRef<Path>,
) -> Result<EvalResult> {
    let (model, meta) = SegModel::load(checkpoint)?;
    let ds = DomainDataset::open(data)?;
    let mut samples = Vec::new();
    for d in ds.domain_ids() {
        if Some(d) != meta.source_domain {
            samples.extend(ds.load_domain(d)?);
        }
    }
    Ok(evaluate(&model, &samples, &foreground_classes(&model))?
        .with_run(meta.method, meta.source_domain))
}

pub fn read_run_log(out: impl AsRef<Path>) -> Result<RunLog> {
    read_json(&out.as_ref().join(RUN_LOG_FILE))
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<EvalResult> {
    read_json(path.as_ref())
}

pub(crate) fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_json(path, value)
}
