//! Dice scores and per-domain evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::model::SegModel;
use crate::parallel;
use crate::synth::SampleRecord;
use crate::tensor::{LabelMap, Tensor};

/// `2|A∩B| / (|A|+|B|)` for the pixels labelled `class_id`; 1.0 when both are empty.
pub fn dice_score(pred: &LabelMap, labels: &LabelMap, class_id: usize) -> Result<f64> {
    if (pred.height(), pred.width()) != (labels.height(), labels.width()) {
        return Err(shape_err!(
            "prediction is {}x{}, labels are {}x{}",
            pred.height(),
            pred.width(),
            labels.height(),
            labels.width()
        ));
    }
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &l) in pred.labels().iter().zip(labels.labels()) {
        let (in_a, in_b) = (p == class_id, l == class_id);
        a += in_a as usize;
        b += in_b as usize;
        both += (in_a && in_b) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (a + b) as f64)
}

/// Per-pixel argmax over the channels of a `[C, H, W]` map; ties go to the lower class.
pub fn argmax_labels(probs: &Tensor) -> Result<LabelMap> {
    let (c, h, w) = probs.chw()?;
    let plane = h * w;
    let d = probs.data();
    let labels = (0..plane)
        .map(|i| {
            let mut best = 0;
            for k in 1..c {
                if d[k * plane + i] > d[best * plane + i] {
                    best = k;
                }
            }
            best
        })
        .collect();
    LabelMap::new(h, w, labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainEval {
    pub domain: usize,
    pub dsc_per_class: Vec<f64>,
    pub dsc_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub method: String,
    pub source_domain: Option<usize>,
    pub per_domain: Vec<DomainEval>,
    /// Mean of `dsc_mean` over domains.
    pub average: f64,
}

impl EvalResult {
    pub fn with_run(mut self, method: impl Into<String>, source_domain: Option<usize>) -> Self {
        self.method = method.into();
        self.source_domain = source_domain;
        self
    }

    pub fn domain(&self, domain: usize) -> Option<&DomainEval> {
        self.per_domain.iter().find(|d| d.domain == domain)
    }

    /// Aligned text table, DSC in percent.
    pub fn to_table(&self, class_names: &[&str]) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<8}", "domain");
        let n = self.per_domain.first().map_or(0, |d| d.dsc_per_class.len());
        for k in 0..n {
            let name = class_names
                .get(k)
                .map_or_else(|| format!("class{k}"), |s| s.to_string());
            let _ = write!(out, "{name:>10}");
        }
        let _ = writeln!(out, "{:>10}", "mean");
        for d in &self.per_domain {
            let _ = write!(out, "{:<8}", d.domain);
            for v in &d.dsc_per_class {
                let _ = write!(out, "{:>10.2}", 100.0 * v);
            }
            let _ = writeln!(out, "{:>10.2}", 100.0 * d.dsc_mean);
        }
        let _ = writeln!(
            out,
            "{:<8}{:>w$.2}",
            "average",
            100.0 * self.average,
            w = 10 * (n + 1)
        );
        out
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Evaluates `predict` (sample → `[C, H, W]` probabilities) over `samples`.
///
/// Per-class DSC is averaged over the images of each domain; domains are
/// reported in ascending id order.
pub fn evaluate_with<F>(
    predict: F,
    samples: &[SampleRecord],
    class_ids: &[usize],
) -> Result<EvalResult>
where
    F: Fn(&SampleRecord) -> Result<Tensor> + Sync,
{
    if samples.is_empty() {
        return Err(invalid!("cannot evaluate an empty dataset"));
    }
    if class_ids.is_empty() {
        return Err(invalid!("no classes to evaluate"));
    }
    let scores = parallel::map_ordered(samples, |s| -> Result<Vec<f64>> {
        let pred = argmax_labels(&predict(s)?)?;
        class_ids
            .iter()
            .map(|&c| dice_score(&pred, &s.label, c))
            .collect()
    });
    let mut by_domain: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for (s, score) in samples.iter().zip(scores) {
        by_domain.entry(s.domain_id).or_default().push(score?);
    }
    let per_domain: Vec<DomainEval> = by_domain
        .into_iter()
        .map(|(domain, rows)| {
            let dsc_per_class: Vec<f64> = (0..class_ids.len())
                .map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / rows.len() as f64)
                .collect();
            DomainEval {
                domain,
                dsc_mean: mean(&dsc_per_class),
                dsc_per_class,
            }
        })
        .collect();
    let average = mean(&per_domain.iter().map(|d| d.dsc_mean).collect::<Vec<_>>());
    Ok(EvalResult {
        method: String::new(),
        source_domain: None,
        per_domain,
        average,
    })
}

pub fn evaluate(
    model: &SegModel,
    samples: &[SampleRecord],
    class_ids: &[usize],
) -> Result<EvalResult> {
    evaluate_with(|s| model.predict(&s.image), samples, class_ids)
}
