//! Training objectives and their gradients w.r.t. the flattened parameters.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Scene;
use crate::error::{check_dim, Error, Result};
use crate::hop_ent::{entropy_objective, EntropyConfig, EntropyMode};
use crate::hop_rep::orthogonality_loss;
use crate::linalg::{axpy, Mat};
use crate::net::{softmax, softmax_cross_entropy, Model, IGNORE};

/// Points of one or more scenes stacked row-wise, with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub feats: Mat,
    pub labels: Vec<usize>,
    /// Row ranges of the constituent scenes.
    pub spans: Vec<std::ops::Range<usize>>,
}

impl Batch {
    pub fn from_scenes(scenes: &[&Scene]) -> Result<Self> {
        Self::from_parts(scenes.iter().map(|s| (&s.feats, s.labels.as_slice())))
    }

    /// Stacks `(features, labels)` pairs.
    pub fn from_parts<'a>(parts: impl IntoIterator<Item = (&'a Mat, &'a [usize])>) -> Result<Self> {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut spans = Vec::new();
        let mut cols = None;
        for (feats, l) in parts {
            check_dim("batch labels", feats.rows(), l.len())?;
            if let Some(c) = cols {
                check_dim("batch feature width", c, feats.cols())?;
            }
            cols = Some(feats.cols());
            let start = labels.len();
            data.extend_from_slice(feats.as_slice());
            labels.extend_from_slice(l);
            spans.push(start..labels.len());
        }
        let cols = cols.ok_or(Error::Empty("batch without scenes"))?;
        Ok(Self {
            feats: Mat::from_vec(labels.len(), cols, data)?,
            labels,
            spans,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Draws `size` distinct scene indices out of `n` (all of them if
/// `size ≥ n`), in ascending order.
pub fn sample_batch_indices<R: Rng + ?Sized>(rng: &mut R, n: usize, size: usize) -> Vec<usize> {
    let mut idx = sample(rng, n, size.min(n)).into_vec();
    idx.sort_unstable();
    idx
}

#[derive(Debug, Clone)]
pub struct Phase1Value {
    pub loss: f64,
    pub seg: f64,
    pub orth: f64,
    /// Gradient in `model.param_index()` order.
    pub grad: Vec<f64>,
}

/// `L_seg + λ_orth·L_orth` over the base prototypes, for a base-stage model.
pub fn phase1_objective(model: &Model, batch: &Batch, lambda_orth: f64) -> Result<Phase1Value> {
    if model.is_adapted() {
        return Err(Error::Stage("phase1_objective requires a base-stage model"));
    }
    let (logits, tape) = model.forward(&batch.feats)?;
    let (seg, d_logits) = softmax_cross_entropy(&logits, &batch.labels)?;
    let mut grad = model.backward(&tape, &d_logits)?.flat;
    let (orth, g_orth) = orthogonality_loss(&model.base_prototypes().raw)?;
    axpy(lambda_orth, g_orth.as_slice(), &mut grad[..g_orth.as_slice().len()]);
    Ok(Phase1Value {
        loss: seg + lambda_orth * orth,
        seg,
        orth,
        grad,
    })
}

/// Which part of the adaptation gradient HOP-Grad projects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectScope {
    Full,
    /// Only the novel-class segmentation term and the entropy term.
    NovelTermOnly,
}

#[derive(Debug, Clone, Copy)]
pub struct Phase2Settings<'a> {
    pub lambda_orth: f64,
    pub entropy: &'a EntropyConfig,
    pub entropy_mode: EntropyMode,
    /// Label ids of the novel classes (their logit columns).
    pub novel: &'a [usize],
}

#[derive(Debug, Clone)]
pub struct Phase2Value {
    pub loss: f64,
    pub seg: f64,
    pub cond: f64,
    pub marg: f64,
    pub ent: f64,
    pub orth: f64,
    /// Gradient of the novel term (novel-labeled segmentation and entropy).
    pub grad_novel: Vec<f64>,
    /// Gradient of everything else; `grad_novel + grad_rest` is the full
    /// gradient.
    pub grad_rest: Vec<f64>,
}

impl Phase2Value {
    pub fn full_grad(&self) -> Vec<f64> {
        self.grad_novel.iter().zip(&self.grad_rest).map(|(a, b)| a + b).collect()
    }
}

/// `L_seg + L_ent + λ_orth·L_orth` for an adapted model.
///
/// `L_seg` is the mean cross-entropy over all labeled points of the batch;
/// `L_ent` uses the marginal over every point of the batch; `L_orth` runs over
/// the joint base and novel prototypes. The segmentation term is split into
/// its novel-labeled and remaining parts by point counts so that the two
/// returned gradients add up to the full gradient.
pub fn phase2_objective(model: &Model, batch: &Batch, s: &Phase2Settings<'_>) -> Result<Phase2Value> {
    if !model.is_adapted() {
        return Err(Error::Stage("phase2_objective requires an adapted model"));
    }
    let (logits, tape) = model.forward(&batch.feats)?;
    let is_novel = |l: usize| l != IGNORE && s.novel.contains(&l);
    let novel_labels: Vec<usize> = batch.labels.iter().map(|&l| if is_novel(l) { l } else { IGNORE }).collect();
    let rest_labels: Vec<usize> = batch.labels.iter().map(|&l| if is_novel(l) { IGNORE } else { l }).collect();
    let n_novel = novel_labels.iter().filter(|&&l| l != IGNORE).count();
    let n_rest = rest_labels.iter().filter(|&&l| l != IGNORE).count();
    let total = (n_novel + n_rest).max(1) as f64;

    let (seg_n, mut d_novel) = softmax_cross_entropy(&logits, &novel_labels)?;
    let (seg_r, mut d_rest) = softmax_cross_entropy(&logits, &rest_labels)?;
    let (wn, wr) = (n_novel as f64 / total, n_rest as f64 / total);
    d_novel.as_mut_slice().iter_mut().for_each(|v| *v *= wn);
    d_rest.as_mut_slice().iter_mut().for_each(|v| *v *= wr);
    let seg = wn * seg_n + wr * seg_r;

    let (mut cond, mut marg, mut ent) = (0.0, 0.0, 0.0);
    if s.entropy_mode != EntropyMode::Off {
        let e = entropy_objective(&softmax(&logits), s.novel, s.entropy, s.entropy_mode)?;
        (cond, marg, ent) = (e.cond, e.marg, e.loss);
        axpy(1.0, e.grad_logits.as_slice(), d_novel.as_mut_slice());
    }

    let grad_novel = model.backward(&tape, &d_novel)?.flat;
    let mut grad_rest = model.backward(&tape, &d_rest)?.flat;
    let (orth, g_orth) = orthogonality_loss(&model.all_prototypes())?;
    axpy(s.lambda_orth, g_orth.as_slice(), &mut grad_rest[..g_orth.as_slice().len()]);
    Ok(Phase2Value {
        loss: seg + ent + s.lambda_orth * orth,
        seg,
        cond,
        marg,
        ent,
        orth,
        grad_novel,
        grad_rest,
    })
}
