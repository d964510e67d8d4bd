//! Run configuration: defaults, TOML file, `--set key=value` overrides.

use std::path::Path;

use anyhow::{bail, Context, Result};
use hop_core::data::{DataConfig, PseudoLabelMode, SplitSpec};
use hop_core::hop_ent::{EntropyConfig, EntropyMode};
use hop_core::trainer::{Flags, ProjectScope, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predictor {
    Model,
    /// Ground truth, for checking the metric pipeline.
    Oracle,
}

/// Every tunable of a run. See the README for the meaning of each key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    pub k_base: usize,
    pub k_novel: usize,
    pub shots: usize,
    pub points_per_scene: usize,
    pub signature_dim: usize,
    pub signature_scale: f64,
    pub noise_std: f64,
    pub blob_sigma: f64,
    pub classes_per_scene: usize,
    pub blob_points: usize,
    pub min_points: usize,
    pub train_scenes: usize,
    pub support_pool_scenes: usize,
    pub test_scenes: usize,

    pub backbone_hidden: usize,
    pub feat_dim: usize,
    pub head_hidden: usize,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    pub lambda_orth_p1: f64,
    pub lambda_orth_p2: f64,
    pub lambda_cond: f64,
    pub lambda_marg: f64,
    pub tau: f64,
    pub renormalize: bool,
    pub phase1_iters: usize,
    pub adaptation_ratio: f64,
    pub batch_scenes: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_batches: usize,
    pub rank_tol: f64,
    pub project_scope: ProjectScope,
    pub pseudo_label: PseudoLabelMode,

    pub hop_grad: bool,
    pub hop_rep: bool,
    pub hop_ent: EntropyMode,

    pub eval_predictor: Predictor,
    /// Number of consecutive seeds, starting at `seed`, used by `ablate`.
    pub ablate_seeds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let d = DataConfig::default();
        let t = TrainConfig::default();
        let f = Flags::default();
        Self {
            seed: 0,
            k_base: d.split.k_base,
            k_novel: d.split.k_novel,
            shots: d.split.shots,
            points_per_scene: d.points_per_scene,
            signature_dim: d.signature_dim,
            signature_scale: d.signature_scale,
            noise_std: d.noise_std,
            blob_sigma: d.blob_sigma,
            classes_per_scene: d.classes_per_scene,
            blob_points: d.blob_points,
            min_points: d.min_points,
            train_scenes: d.train_scenes,
            support_pool_scenes: d.support_pool_scenes,
            test_scenes: d.test_scenes,
            backbone_hidden: t.backbone_hidden,
            feat_dim: t.feat_dim,
            head_hidden: t.head_hidden,
            lr_phase1: t.lr_phase1,
            lr_phase2: t.lr_phase2,
            lambda_orth_p1: t.lambda_orth_p1,
            lambda_orth_p2: t.lambda_orth_p2,
            lambda_cond: t.entropy.lambda_cond,
            lambda_marg: t.entropy.lambda_marg,
            tau: t.entropy.tau,
            renormalize: t.entropy.renormalize,
            phase1_iters: t.phase1_iters,
            adaptation_ratio: t.adaptation_ratio,
            batch_scenes: t.batch_scenes,
            weight_decay: t.weight_decay,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            grad_batches: t.grad_batches,
            rank_tol: t.rank_tol,
            project_scope: t.project_scope,
            pseudo_label: t.pseudo_label,
            hop_grad: f.hop_grad,
            hop_rep: f.hop_rep,
            hop_ent: f.hop_ent,
            eval_predictor: Predictor::Model,
            ablate_seeds: 5,
        }
    }
}

impl RunConfig {
    /// Defaults, then the optional TOML file, then each `key=value`
    /// override (values are parsed as TOML, falling back to a bare string).
    pub fn load(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config file {}", path.display()))?;
                text.parse::<toml::Table>()
                    .with_context(|| format!("parsing config file {}", path.display()))?
            }
            None => toml::Table::new(),
        };
        for kv in overrides {
            let Some((key, raw)) = kv.split_once('=') else {
                bail!("override `{kv}` is not of the form key=value");
            };
            let key = key.trim();
            let raw = raw.trim();
            let value = format!("v = {raw}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            table.insert(key.to_string(), value);
        }
        if let Some(seed) = seed {
            table.insert("seed".into(), toml::Value::Integer(seed as i64));
        }
        let cfg: RunConfig = table.try_into().context("invalid configuration")?;
        cfg.data().validate()?;
        cfg.train().validate()?;
        Ok(cfg)
    }

    pub fn data(&self) -> DataConfig {
        DataConfig {
            split: SplitSpec {
                k_base: self.k_base,
                k_novel: self.k_novel,
                shots: self.shots,
                seed: self.seed,
            },
            points_per_scene: self.points_per_scene,
            signature_dim: self.signature_dim,
            signature_scale: self.signature_scale,
            noise_std: self.noise_std,
            blob_sigma: self.blob_sigma,
            classes_per_scene: self.classes_per_scene,
            blob_points: self.blob_points,
            min_points: self.min_points,
            train_scenes: self.train_scenes,
            support_pool_scenes: self.support_pool_scenes,
            test_scenes: self.test_scenes,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            backbone_hidden: self.backbone_hidden,
            feat_dim: self.feat_dim,
            head_hidden: self.head_hidden,
            lr_phase1: self.lr_phase1,
            lr_phase2: self.lr_phase2,
            lambda_orth_p1: if self.hop_rep { self.lambda_orth_p1 } else { 0.0 },
            lambda_orth_p2: self.lambda_orth_p2,
            entropy: EntropyConfig {
                lambda_cond: self.lambda_cond,
                lambda_marg: self.lambda_marg,
                tau: self.tau,
                renormalize: self.renormalize,
            },
            phase1_iters: self.phase1_iters,
            adaptation_ratio: self.adaptation_ratio,
            batch_scenes: self.batch_scenes,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            grad_batches: self.grad_batches,
            rank_tol: self.rank_tol,
            project_scope: self.project_scope,
            pseudo_label: self.pseudo_label,
            seed: self.seed,
        }
    }

    pub fn flags(&self) -> Flags {
        Flags {
            hop_grad: self.hop_grad,
            hop_rep: self.hop_rep,
            hop_ent: self.hop_ent,
        }
    }
}
