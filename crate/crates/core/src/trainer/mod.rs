//! Two-phase training, optimizer and evaluation.
//!
//! Phase 1 trains backbone, base prototypes and the shared head on base
//! scenes, then samples base-objective gradients to build the projection
//! basis. Phase 2 adds novel prototypes and the split heads and adapts on the
//! support set for `adaptation_ratio × phase1_iters` steps.

pub mod ablation;
pub mod metrics;
pub mod objective;
pub mod optim;

use serde::{Deserialize, Serialize};

use crate::data::{
    derive_seed, pseudo_label_stub, sample_support, stream_rng, support_labels, Dataset, PseudoLabelMode, Scene,
    SplitSpec, Stream,
};
use crate::error::{Error, Result};
use crate::hop_ent::{EntropyConfig, EntropyMode};
use crate::hop_grad::{build_basis, collect_base_gradients, lift_to_adapted, project_phase2_gradient, CollectConfig};
use crate::linalg::{l2_normalize, Mat, OrthoBasis};
use crate::net::{Model, ModelConfig, ParamIndex};

pub use ablation::{ablation_cells, ablation_suite, AblationCell, AblationRow, AblationTable};
pub use metrics::{evaluate, evaluate_oracle, harmonic_mean, summarize, MetricsReport, Summary};
pub use objective::{phase1_objective, phase2_objective, Batch, Phase2Settings, ProjectScope};
pub use optim::{adam_step, AdamConfig, OptimState};

/// Which contributions are active during adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flags {
    /// Project `phi`-gradients onto the complement of the base basis.
    pub hop_grad: bool,
    /// Prototype orthogonality regularization (both phases).
    pub hop_rep: bool,
    pub hop_ent: EntropyMode,
}

impl Flags {
    pub const NONE: Flags = Flags {
        hop_grad: false,
        hop_rep: false,
        hop_ent: EntropyMode::Off,
    };
    pub const FULL: Flags = Flags {
        hop_grad: true,
        hop_rep: true,
        hop_ent: EntropyMode::Full,
    };
}

impl Default for Flags {
    fn default() -> Self {
        Self::FULL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub backbone_hidden: usize,
    pub feat_dim: usize,
    pub head_hidden: usize,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    pub lambda_orth_p1: f64,
    pub lambda_orth_p2: f64,
    pub entropy: EntropyConfig,
    pub phase1_iters: usize,
    /// Phase-2 steps as a fraction of `phase1_iters`.
    pub adaptation_ratio: f64,
    pub batch_scenes: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Mini-batches sampled for the projection basis.
    pub grad_batches: usize,
    pub rank_tol: f64,
    pub project_scope: ProjectScope,
    pub pseudo_label: PseudoLabelMode,
    /// Seed of initialization, batch order and support selection.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            backbone_hidden: 32,
            feat_dim: 16,
            head_hidden: 16,
            lr_phase1: 1e-2,
            lr_phase2: 1e-2,
            lambda_orth_p1: 0.1,
            lambda_orth_p2: 0.1,
            entropy: EntropyConfig::default(),
            phase1_iters: 600,
            adaptation_ratio: 0.1,
            batch_scenes: 2,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_batches: 256,
            rank_tol: crate::linalg::DEFAULT_RANK_TOL,
            project_scope: ProjectScope::Full,
            pseudo_label: PseudoLabelMode::Gt,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_phase1", self.lr_phase1),
            ("lr_phase2", self.lr_phase2),
            ("eps", self.eps),
            ("rank_tol", self.rank_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.adaptation_ratio > 0.0 && self.adaptation_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "adaptation_ratio must lie in (0, 1], got {}",
                self.adaptation_ratio
            )));
        }
        if self.batch_scenes == 0 {
            return Err(Error::Config("batch_scenes must be at least 1".into()));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if self.lambda_orth_p1 < 0.0 || self.lambda_orth_p2 < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("regularization weights must be non-negative".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, split: &SplitSpec, f_in: usize) -> ModelConfig {
        ModelConfig {
            f_in,
            backbone_hidden: self.backbone_hidden,
            feat_dim: self.feat_dim,
            head_hidden: self.head_hidden,
            k_base: split.k_base,
            k_novel: split.k_novel,
        }
    }

    pub fn phase2_steps(&self) -> usize {
        (self.adaptation_ratio * self.phase1_iters as f64).ceil() as usize
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Phase1Output {
    pub model: Model,
    /// Basis in adapted-stage `phi` coordinates.
    pub basis: OrthoBasis,
    pub report: MetricsReport,
    pub losses: Vec<f64>,
}

fn check_loss(phase: &'static str, iteration: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { phase, iteration, loss })
    }
}

/// Base pretraining followed by basis construction. `lambda_orth_p1` is used
/// as given.
pub fn phase1_train(cfg: &TrainConfig, data: &Dataset) -> Result<Phase1Output> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Empty("phase1_train: no base scenes"));
    }
    let split = data.config.split;
    let mcfg = cfg.model_config(&split, data.config.f_in());
    let mut model = Model::new_base(mcfg, &mut stream_rng(cfg.seed, Stream::Init, 0));
    let adam = cfg.adam(cfg.lr_phase1);
    let (mut params, index) = model.flatten_all();
    let mut state = OptimState::new(params.len());
    let mut rng = stream_rng(cfg.seed, Stream::Phase1Batches, 0);
    let mut losses = Vec::with_capacity(cfg.phase1_iters);
    for it in 0..cfg.phase1_iters {
        let idx = objective::sample_batch_indices(&mut rng, data.train.len(), cfg.batch_scenes);
        let scenes: Vec<&Scene> = idx.iter().map(|&i| &data.train[i]).collect();
        let batch = Batch::from_scenes(&scenes)?;
        let value = phase1_objective(&model, &batch, cfg.lambda_orth_p1)?;
        check_loss("phase1", it, value.loss)?;
        losses.push(value.loss);
        adam_step(&mut params, &value.grad, &mut state, &adam)?;
        model.scatter_all(&params, &index)?;
    }

    let bank = collect_base_gradients(
        &model,
        &data.train,
        &CollectConfig {
            batches: cfg.grad_batches,
            batch_scenes: cfg.batch_scenes,
            lambda_orth: cfg.lambda_orth_p1,
            seed: derive_seed(cfg.seed, Stream::GradientBatches, 0),
        },
    )?;
    let lifted = lift_to_adapted(&bank, &index, &ParamIndex::for_stage(&mcfg, true), &mcfg)?;
    let basis = build_basis(&lifted, cfg.rank_tol)?;
    let report = evaluate(&model, &data.test, &split)?;
    Ok(Phase1Output {
        model,
        basis,
        report,
        losses,
    })
}

/// Support scenes with their adaptation labels, one entry per
/// (novel class, selected scene).
#[derive(Debug, Clone)]
pub struct SupportSet {
    /// Selected pool indices per novel class.
    pub selection: Vec<Vec<usize>>,
    pub batch: Batch,
}

/// Selects the support scenes and assembles their labels: the designated
/// novel class from ground truth, base and background from the pseudo-label
/// stub run with the base model.
pub fn build_support(cfg: &TrainConfig, data: &Dataset, base_model: &Model) -> Result<SupportSet> {
    let split = data.config.split;
    let selection = sample_support(
        &split,
        data.config.min_points,
        &data.support_pool,
        derive_seed(cfg.seed, Stream::SupportSelect, 0),
    )?;
    let mut parts = Vec::new();
    for (class, picks) in split.novel_classes().into_iter().zip(&selection) {
        for &i in picks {
            let scene = &data.support_pool[i];
            let stub = pseudo_label_stub(base_model, scene, cfg.pseudo_label)?;
            parts.push((&scene.feats, support_labels(&split, scene, class, &stub)));
        }
    }
    let batch = Batch::from_parts(parts.iter().map(|(f, l)| (*f, l.as_slice())))?;
    Ok(SupportSet { selection, batch })
}

/// ℓ2-normalized mean backbone feature of the support points of each novel
/// class.
pub fn init_novel_prototypes(model: &Model, support: &Batch, split: &SplitSpec) -> Result<Mat> {
    let features = model.features(&support.feats)?;
    let c = features.cols();
    let mut rows = Vec::with_capacity(split.k_novel);
    for class in split.novel_classes() {
        let mut mean = vec![0.0; c];
        let mut count = 0usize;
        for (f, _) in features.row_iter().zip(&support.labels).filter(|(_, &l)| l == class) {
            mean.iter_mut().zip(f).for_each(|(m, v)| *m += v);
            count += 1;
        }
        if count == 0 {
            return Err(Error::Empty("novel class without support points"));
        }
        rows.push(l2_normalize(&mean)?);
    }
    if rows.is_empty() {
        return Ok(Mat::zeros(0, c));
    }
    Mat::from_rows(&rows)
}

#[derive(Debug, Clone)]
pub struct Phase2Output {
    pub model: Model,
    pub report: MetricsReport,
    pub losses: Vec<f64>,
    pub selection: Vec<Vec<usize>>,
}

/// Novel-class adaptation of a base-stage model.
pub fn phase2_train(cfg: &TrainConfig, base_model: &Model, basis: &OrthoBasis, data: &Dataset, flags: Flags) -> Result<Phase2Output> {
    cfg.validate()?;
    if base_model.is_adapted() {
        return Err(Error::Stage("phase2_train expects the base-stage model"));
    }
    let split = data.config.split;
    let support = build_support(cfg, data, base_model)?;
    let novel_raw = init_novel_prototypes(base_model, &support.batch, &split)?;
    let mut model = base_model
        .clone()
        .into_adapted(novel_raw, &mut stream_rng(cfg.seed, Stream::Phase2, 0))?;
    let (mut params, index) = model.flatten_all();
    if flags.hop_grad && basis.rank() > 0 && basis.dim() != index.phi_len {
        return Err(Error::DimensionMismatch {
            context: "projection basis dimension",
            expected: index.phi_len,
            actual: basis.dim(),
        });
    }
    let novel = split.novel_classes();
    let settings = Phase2Settings {
        lambda_orth: if flags.hop_rep { cfg.lambda_orth_p2 } else { 0.0 },
        entropy: &cfg.entropy,
        entropy_mode: flags.hop_ent,
        novel: &novel,
    };
    let adam = cfg.adam(cfg.lr_phase2);
    let mut state = OptimState::new(params.len());
    let phi = index.phi_len;
    let steps = cfg.phase2_steps();
    let mut losses = Vec::with_capacity(steps);
    for it in 0..steps {
        let value = phase2_objective(&model, &support.batch, &settings)?;
        check_loss("phase2", it, value.loss)?;
        losses.push(value.loss);
        let grad = if flags.hop_grad {
            match cfg.project_scope {
                ProjectScope::Full => {
                    let mut g = value.full_grad();
                    let projected = project_phase2_gradient(&g[..phi], basis)?;
                    g[..phi].copy_from_slice(&projected);
                    g
                }
                ProjectScope::NovelTermOnly => {
                    let mut g = value.grad_novel.clone();
                    let projected = project_phase2_gradient(&g[..phi], basis)?;
                    g[..phi].copy_from_slice(&projected);
                    g.iter_mut().zip(&value.grad_rest).for_each(|(a, b)| *a += b);
                    g
                }
            }
        } else {
            value.full_grad()
        };
        adam_step(&mut params, &grad, &mut state, &adam)?;
        model.scatter_all(&params, &index)?;
    }
    let report = evaluate(&model, &data.test, &split)?;
    Ok(Phase2Output {
        model,
        report,
        losses,
        selection: support.selection,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DataConfig;
    use crate::hop_rep::PrototypeRole;

    fn tiny() -> (DataConfig, TrainConfig) {
        let data = DataConfig {
            points_per_scene: 256,
            blob_points: 48,
            min_points: 32,
            train_scenes: 12,
            support_pool_scenes: 16,
            test_scenes: 4,
            ..Default::default()
        };
        let train = TrainConfig {
            backbone_hidden: 8,
            feat_dim: 6,
            head_hidden: 6,
            phase1_iters: 60,
            grad_batches: 4,
            ..Default::default()
        };
        (data, train)
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            adaptation_ratio: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            lr_phase1: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(TrainConfig::default().phase2_steps(), 60);
    }

    #[test]
    fn zero_iterations_gives_random_model_and_basis() {
        let (data, mut train) = tiny();
        train.phase1_iters = 0;
        train.grad_batches = 0;
        let ds = Dataset::generate(&data).unwrap();
        let out = phase1_train(&train, &ds).unwrap();
        assert!(out.losses.is_empty());
        assert_eq!(out.basis.rank(), 0);
        let mcfg = train.model_config(&data.split, data.f_in());
        assert_eq!(out.basis.dim(), ParamIndex::for_stage(&mcfg, true).phi_len);
        assert_eq!(out.report.points, (data.points_per_scene * data.test_scenes) as u64);
    }

    #[test]
    fn phase1_then_phase2_runs_and_is_reproducible() {
        let (data, train) = tiny();
        let ds = Dataset::generate(&data).unwrap();
        let p1 = phase1_train(&train, &ds).unwrap();
        assert!(p1.basis.rank() > 0 && p1.basis.rank() <= train.grad_batches);
        assert!(p1.losses.last().unwrap() < &p1.losses[0]);
        assert_eq!(p1.report.miou_n, Some(0.0));
        let a = phase2_train(&train, &p1.model, &p1.basis, &ds, Flags::FULL).unwrap();
        let b = phase2_train(&train, &p1.model, &p1.basis, &ds, Flags::FULL).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.losses.len(), train.phase2_steps());
        assert!(a.model.is_adapted());
        assert!(a.report.hm.is_some());
    }

    #[test]
    fn projected_phi_step_leaves_span_alone() {
        // with the full phi-gradient inside span(B) the phi slice is unchanged
        let (data, mut train) = tiny();
        train.phase1_iters = 10;
        train.adaptation_ratio = 0.1;
        let ds = Dataset::generate(&data).unwrap();
        let p1 = phase1_train(&train, &ds).unwrap();
        let full = OrthoBasis::from_orthonormal_columns(
            p1.basis.dim(),
            (0..p1.basis.dim())
                .map(|i| {
                    let mut e = vec![0.0; p1.basis.dim()];
                    e[i] = 1.0;
                    e
                })
                .collect(),
            1e-12,
        )
        .unwrap();
        train.weight_decay = 0.0;
        let out = phase2_train(&train, &p1.model, &full, &ds, Flags::FULL).unwrap();
        let support = build_support(&train, &ds, &p1.model).unwrap();
        let novel = init_novel_prototypes(&p1.model, &support.batch, &ds.config.split).unwrap();
        let start = p1
            .model
            .clone()
            .into_adapted(novel, &mut stream_rng(train.seed, Stream::Phase2, 0))
            .unwrap();
        assert_eq!(out.model.flatten_phi().0, start.flatten_phi().0);
        assert_ne!(out.model.backbone(), start.backbone());
        assert_eq!(out.model.base_prototypes().role, PrototypeRole::Base);
    }

    #[test]
    fn novel_prototype_init_is_normalized_class_mean() {
        let (data, train) = tiny();
        let ds = Dataset::generate(&data).unwrap();
        let p1 = phase1_train(&TrainConfig { phase1_iters: 0, grad_batches: 0, ..train }, &ds).unwrap();
        let support = build_support(&train, &ds, &p1.model).unwrap();
        let protos = init_novel_prototypes(&p1.model, &support.batch, &data.split).unwrap();
        let feats = p1.model.features(&support.batch.feats).unwrap();
        for (r, class) in data.split.novel_classes().into_iter().enumerate() {
            let pts: Vec<&[f64]> = feats
                .row_iter()
                .zip(&support.batch.labels)
                .filter(|(_, &l)| l == class)
                .map(|(f, _)| f)
                .collect();
            let mean: Vec<f64> = (0..feats.cols())
                .map(|j| pts.iter().map(|p| p[j]).sum::<f64>() / pts.len() as f64)
                .collect();
            let n = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
            for j in 0..feats.cols() {
                assert!((protos[(r, j)] - mean[j] / n).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn diverging_run_is_reported() {
        let (data, mut train) = tiny();
        train.lr_phase1 = 1e300;
        train.phase1_iters = 5;
        let ds = Dataset::generate(&data).unwrap();
        let err = phase1_train(&train, &ds).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. } | Error::NonFinite { .. } | Error::ZeroNorm), "{err}");
    }
}
