//! Segmentation metrics and seed-level summary statistics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{Scene, SplitSpec};
use crate::error::{check_dim, Result};
use crate::hop_rep::mean_offdiag_abs_cosine;
use crate::net::{argmax, softmax, Model, IGNORE};

pub const CONFIDENCE_BINS: usize = 10;

/// `2bn/(b+n)`, and 0 when both are 0.
pub fn harmonic_mean(b: f64, n: f64) -> f64 {
    if b + n == 0.0 {
        0.0
    } else {
        2.0 * b * n / (b + n)
    }
}

/// Running confusion counts and confidence statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Accumulator {
    k: usize,
    /// `confusion[truth][pred]`.
    confusion: Vec<Vec<u64>>,
    novel_conf_sum: f64,
    novel_conf_count: u64,
    histogram: Vec<u64>,
}

impl Accumulator {
    pub fn new(num_classes: usize) -> Self {
        Self {
            k: num_classes,
            confusion: vec![vec![0; num_classes]; num_classes],
            novel_conf_sum: 0.0,
            novel_conf_count: 0,
            histogram: vec![0; CONFIDENCE_BINS],
        }
    }

    /// Records one point. Ignored truths are skipped; `confidence` is the
    /// predicted class probability and only counts for novel predictions.
    pub fn add(&mut self, split: &SplitSpec, truth: usize, pred: usize, confidence: f64) {
        if truth == IGNORE || truth >= self.k || pred >= self.k {
            return;
        }
        self.confusion[truth][pred] += 1;
        if split.is_novel(pred) {
            self.novel_conf_sum += confidence;
            self.novel_conf_count += 1;
            let bin = ((confidence * CONFIDENCE_BINS as f64) as usize).min(CONFIDENCE_BINS - 1);
            self.histogram[bin] += 1;
        }
    }

    pub fn merge(&mut self, other: &Accumulator) {
        for (a, b) in self.confusion.iter_mut().zip(&other.confusion) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.novel_conf_sum += other.novel_conf_sum;
        self.novel_conf_count += other.novel_conf_count;
        self.histogram.iter_mut().zip(&other.histogram).for_each(|(x, y)| *x += y);
    }

    pub fn finish(&self, split: &SplitSpec, prototype_offdiag_cos: Option<f64>) -> MetricsReport {
        let k = self.k;
        let per_class_iou: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let tp = self.confusion[c][c];
                let fn_: u64 = self.confusion[c].iter().sum::<u64>() - tp;
                let fp: u64 = (0..k).map(|r| self.confusion[r][c]).sum::<u64>() - tp;
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect();
        let group = |classes: &[usize]| -> Option<f64> {
            let vals: Vec<f64> = classes.iter().filter_map(|&c| per_class_iou[c]).collect();
            (!vals.is_empty()).then(|| 100.0 * vals.iter().sum::<f64>() / vals.len() as f64)
        };
        let base = split.base_classes();
        let novel = split.novel_classes();
        let all: Vec<usize> = (1..k).collect();
        let miou_b = group(&base);
        let miou_n = group(&novel);
        let hm = match (miou_b, miou_n) {
            (Some(b), Some(n)) => Some(harmonic_mean(b, n)),
            _ => None,
        };
        let novel_pred_counts: Vec<u64> = novel
            .iter()
            .map(|&c| (0..k).map(|r| self.confusion[r][c]).sum())
            .collect();
        let points: u64 = self.confusion.iter().flatten().sum();
        let miou_a = group(&all);
        MetricsReport {
            points,
            per_class_iou,
            miou_b,
            miou_n,
            miou_a,
            hm,
            mean_confidence: (self.novel_conf_count > 0).then(|| self.novel_conf_sum / self.novel_conf_count as f64),
            confidence_histogram: self.histogram.clone(),
            class_frequency_cv: coefficient_of_variation(&novel_pred_counts),
            novel_pred_counts,
            prototype_offdiag_cos,
            confusion: self.confusion.clone(),
        }
    }
}

/// Population standard deviation over mean; `None` for an empty or all-zero
/// input.
pub fn coefficient_of_variation(counts: &[u64]) -> Option<f64> {
    if counts.is_empty() {
        return None;
    }
    let n = counts.len() as f64;
    let mean = counts.iter().sum::<u64>() as f64 / n;
    if mean == 0.0 {
        return None;
    }
    let var = counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / n;
    Some(var.sqrt() / mean)
}

/// Evaluation of one model on labeled scenes.
///
/// mIoU values are percentages over foreground classes (background is
/// excluded). A class absent from both truth and prediction has no IoU and
/// is left out of its group's mean; a group without any defined IoU is
/// `None`, as is `hm` when either side is `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub points: u64,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou_b: Option<f64>,
    pub miou_n: Option<f64>,
    pub miou_a: Option<f64>,
    pub hm: Option<f64>,
    /// Mean predicted-class probability over points predicted as novel.
    pub mean_confidence: Option<f64>,
    /// Counts of those probabilities in ten equal bins over `[0, 1]`.
    pub confidence_histogram: Vec<u64>,
    /// Number of points predicted as each novel class.
    pub novel_pred_counts: Vec<u64>,
    /// Coefficient of variation of `novel_pred_counts`.
    pub class_frequency_cv: Option<f64>,
    /// Mean off-diagonal `|cos|` between the model's prototypes.
    pub prototype_offdiag_cos: Option<f64>,
    pub confusion: Vec<Vec<u64>>,
}

fn scene_accumulator(model: &Model, scene: &Scene, split: &SplitSpec) -> Result<Accumulator> {
    let (logits, _) = model.forward(&scene.feats)?;
    let probs = softmax(&logits);
    let mut acc = Accumulator::new(split.num_classes());
    for (row, &truth) in probs.row_iter().zip(&scene.labels) {
        let pred = argmax(row);
        acc.add(split, truth, pred, row[pred]);
    }
    Ok(acc)
}

/// Metrics of `model` on `scenes`. Scenes are processed in parallel and
/// merged in index order.
pub fn evaluate(model: &Model, scenes: &[Scene], split: &SplitSpec) -> Result<MetricsReport> {
    check_dim("evaluate class count", split.num_classes(), model.config().num_classes())?;
    let parts: Vec<Accumulator> = scenes
        .par_iter()
        .map(|s| scene_accumulator(model, s, split))
        .collect::<Result<_>>()?;
    let mut acc = Accumulator::new(split.num_classes());
    for p in &parts {
        acc.merge(p);
    }
    let cos = if model.all_prototypes().rows() >= 2 {
        Some(mean_offdiag_abs_cosine(&model.all_prototypes())?)
    } else {
        None
    };
    Ok(acc.finish(split, cos))
}

/// Metrics of a predictor that returns the ground truth with probability 1.
pub fn evaluate_oracle(scenes: &[Scene], split: &SplitSpec) -> MetricsReport {
    let mut acc = Accumulator::new(split.num_classes());
    for s in scenes {
        for &l in &s.labels {
            acc.add(split, l, l, 1.0);
        }
    }
    acc.finish(split, None)
}

/// Median and a two-sided 95% Student-t interval for the mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub median: f64,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// `None` for an empty sample. With one value the interval collapses to it.
pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Some(Summary {
            n,
            median,
            mean,
            ci_low: mean,
            ci_high: mean,
        });
    }
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.975);
    let half = t * sd / (n as f64).sqrt();
    Some(Summary {
        n,
        median,
        mean,
        ci_low: mean - half,
        ci_high: mean + half,
    })
}
