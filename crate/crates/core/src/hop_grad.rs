//! Base-gradient subspace projection.
//!
//! After base pretraining the gradient of the base objective is sampled on
//! `T` mini-batches at the converged parameters. The samples are
//! orthonormalized into a fixed basis `B`, and during adaptation every
//! `phi`-gradient `g` is replaced by `g − B(Bᵀg)` so that, to first order,
//! updates leave the base objective unchanged.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Scene;
use crate::error::{check_dim, Error, Result};
use crate::linalg::{modified_gram_schmidt, project_out, OrthoBasis};
use crate::net::{carry_over_pairs, Model, ModelConfig, ParamIndex};
use crate::trainer::objective::{phase1_objective, sample_batch_indices, Batch};

/// Collected base-objective gradients, all of length `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBank {
    dim: usize,
    grads: Vec<Vec<f64>>,
}

impl GradientBank {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            grads: Vec::new(),
        }
    }

    pub fn push(&mut self, g: Vec<f64>) -> Result<()> {
        check_dim("gradient bank entry", self.dim, g.len())?;
        self.grads.push(g);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn grads(&self) -> &[Vec<f64>] {
        &self.grads
    }
}

/// Settings for gradient collection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollectConfig {
    /// Number of mini-batches `T`.
    pub batches: usize,
    pub batch_scenes: usize,
    pub lambda_orth: f64,
    pub seed: u64,
}

/// Base-objective `phi`-gradients of a base-stage model on `T` seeded
/// mini-batches. Parameters are not touched.
pub fn collect_base_gradients(model: &Model, base_scenes: &[Scene], cfg: &CollectConfig) -> Result<GradientBank> {
    if base_scenes.is_empty() {
        return Err(Error::Empty("collect_base_gradients: no base scenes"));
    }
    if model.is_adapted() {
        return Err(Error::Stage("collect_base_gradients requires a base-stage model"));
    }
    let phi_len = model.param_index().phi_len;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut bank = GradientBank::new(phi_len);
    for _ in 0..cfg.batches {
        let idx = sample_batch_indices(&mut rng, base_scenes.len(), cfg.batch_scenes);
        let scenes: Vec<&Scene> = idx.iter().map(|&i| &base_scenes[i]).collect();
        let batch = Batch::from_scenes(&scenes)?;
        let mut g = phase1_objective(model, &batch, cfg.lambda_orth)?.grad;
        g.truncate(phi_len);
        bank.push(g)?;
    }
    Ok(bank)
}

/// Re-expresses base-stage `phi` gradients in adapted-stage `phi`
/// coordinates. Entries that carry over (base prototypes and the blocks that
/// seed `h_b`) are copied; all other adapted entries are zero.
pub fn lift_to_adapted(bank: &GradientBank, base_index: &ParamIndex, adapted_index: &ParamIndex, cfg: &ModelConfig) -> Result<GradientBank> {
    check_dim("lift_to_adapted source", base_index.phi_len, bank.dim())?;
    let pairs: Vec<(usize, usize)> = carry_over_pairs(base_index, adapted_index, cfg)?
        .into_iter()
        .filter(|&(src, dst)| src < base_index.phi_len && dst < adapted_index.phi_len)
        .collect();
    let mut out = GradientBank::new(adapted_index.phi_len);
    for g in &bank.grads {
        let mut lifted = vec![0.0; adapted_index.phi_len];
        for &(src, dst) in &pairs {
            lifted[dst] = g[src];
        }
        out.push(lifted)?;
    }
    Ok(out)
}

/// Orthonormal basis of the bank's span. An empty or all-zero bank gives a
/// rank-0 basis of the bank's dimension.
pub fn build_basis(bank: &GradientBank, rel_tol: f64) -> Result<OrthoBasis> {
    let basis = modified_gram_schmidt(&bank.grads, rel_tol)?;
    if basis.rank() == 0 {
        return Ok(OrthoBasis::empty(bank.dim));
    }
    Ok(basis)
}

/// `g − B(Bᵀg)`.
pub fn project_phase2_gradient(g_phi: &[f64], basis: &OrthoBasis) -> Result<Vec<f64>> {
    check_dim("project_phase2_gradient", basis.dim(), g_phi.len())?;
    project_out(g_phi, basis)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{class_signatures, generate_scene, DataConfig, ScenePhase};
    use crate::linalg::{dot, DEFAULT_RANK_TOL};
    use rand::Rng;

    fn scenes(cfg: &DataConfig, n: u64) -> Vec<Scene> {
        let sig = class_signatures(cfg);
        (0..n).map(|s| generate_scene(s, cfg, &sig, ScenePhase::Base)).collect()
    }

    fn tiny_data() -> DataConfig {
        DataConfig {
            points_per_scene: 64,
            blob_points: 8,
            min_points: 8,
            ..Default::default()
        }
    }

    fn tiny_model(data: &DataConfig, seed: u64) -> Model {
        let cfg = ModelConfig {
            f_in: data.f_in(),
            backbone_hidden: 6,
            feat_dim: 4,
            head_hidden: 5,
            k_base: data.split.k_base,
            k_novel: data.split.k_novel,
        };
        Model::new_base(cfg, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn collect(batches: usize, seed: u64) -> CollectConfig {
        CollectConfig {
            batches,
            batch_scenes: 2,
            lambda_orth: 0.1,
            seed,
        }
    }

    #[test]
    fn collection_is_deterministic_and_leaves_model_alone() {
        let data = tiny_data();
        let sc = scenes(&data, 5);
        let model = tiny_model(&data, 1);
        let before = model.clone();
        let a = collect_base_gradients(&model, &sc, &collect(3, 9)).unwrap();
        let b = collect_base_gradients(&model, &sc, &collect(3, 9)).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a.dim(), model.param_index().phi_len);
        assert_eq!(a, b);
        assert_eq!(model, before);
    }

    #[test]
    fn collection_errors() {
        let data = tiny_data();
        let model = tiny_model(&data, 1);
        assert!(matches!(
            collect_base_gradients(&model, &[], &collect(1, 0)),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn phi_independent_loss_gives_zero_gradient() {
        // every point ignored and no orthogonality term
        let data = tiny_data();
        let mut sc = scenes(&data, 1);
        sc[0].labels.iter_mut().for_each(|l| *l = crate::net::IGNORE);
        let model = tiny_model(&data, 2);
        let mut cfg = collect(1, 0);
        cfg.lambda_orth = 0.0;
        let bank = collect_base_gradients(&model, &sc, &cfg).unwrap();
        assert!(bank.grads()[0].iter().all(|&v| v == 0.0));
        assert_eq!(build_basis(&bank, DEFAULT_RANK_TOL).unwrap().rank(), 0);
    }

    #[test]
    fn collected_gradient_matches_finite_differences() {
        let data = tiny_data();
        let sc = scenes(&data, 4);
        let model = tiny_model(&data, 3);
        let cfg = collect(1, 5);
        let bank = collect_base_gradients(&model, &sc, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let idx = sample_batch_indices(&mut rng, sc.len(), cfg.batch_scenes);
        let refs: Vec<&Scene> = idx.iter().map(|&i| &sc[i]).collect();
        let batch = Batch::from_scenes(&refs).unwrap();
        let (phi, index) = model.flatten_phi();
        let h = 1e-6;
        for (j, &analytic) in bank.grads()[0].iter().enumerate() {
            let mut m = model.clone();
            let mut p = phi.clone();
            p[j] += h;
            m.scatter_phi(&p, &index).unwrap();
            let up = phase1_objective(&m, &batch, cfg.lambda_orth).unwrap().loss;
            p[j] -= 2.0 * h;
            m.scatter_phi(&p, &index).unwrap();
            let down = phase1_objective(&m, &batch, cfg.lambda_orth).unwrap().loss;
            let fd = (up - down) / (2.0 * h);
            let scale = analytic.abs().max(fd.abs()).max(1e-8);
            assert!(
                (analytic.abs() < 1e-9 && fd.abs() < 1e-9) || (analytic - fd).abs() / scale <= 1e-5,
                "phi[{j}]: analytic {analytic} fd {fd}"
            );
        }
    }

    #[test]
    fn lifted_bank_sits_on_carried_entries() {
        let data = tiny_data();
        let sc = scenes(&data, 4);
        let model = tiny_model(&data, 4);
        let bank = collect_base_gradients(&model, &sc, &collect(2, 1)).unwrap();
        let base_index = model.param_index();
        let cfg = *model.config();
        let adapted = model
            .into_adapted(crate::linalg::Mat::identity(4), &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        let adapted_index = adapted.param_index();
        let lifted = lift_to_adapted(&bank, &base_index, &adapted_index, &cfg).unwrap();
        assert_eq!(lifted.dim(), adapted_index.phi_len);
        let novel = adapted_index.get("novel_prototypes").unwrap().range();
        for (g, l) in bank.grads().iter().zip(lifted.grads()) {
            assert!(l[novel.clone()].iter().all(|&v| v == 0.0));
            let bp = base_index.get("base_prototypes").unwrap().range();
            assert_eq!(&l[bp.clone()], &g[bp]);
            // shared-head background row is not carried
            let sb = base_index.get("shared_head.1.bias").unwrap();
            let bb = adapted_index.get("base_head.1.bias").unwrap();
            assert_eq!(l[bb.offset], g[sb.offset + 1]);
        }
    }

    #[test]
    fn basis_rank_cases() {
        let v: Vec<f64> = (0..7).map(|i| i as f64 - 2.5).collect();
        let mut bank = GradientBank::new(7);
        for _ in 0..4 {
            bank.push(v.clone()).unwrap();
        }
        assert_eq!(build_basis(&bank, DEFAULT_RANK_TOL).unwrap().rank(), 1);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = 6;
        let mut full = GradientBank::new(d);
        for _ in 0..d {
            full.push((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        }
        let basis = build_basis(&full, DEFAULT_RANK_TOL).unwrap();
        assert_eq!(basis.rank(), d);
        let g: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        assert!(project_phase2_gradient(&g, &basis).unwrap().iter().all(|v| v.abs() < 1e-12));

        let empty = build_basis(&GradientBank::new(5), DEFAULT_RANK_TOL).unwrap();
        assert_eq!((empty.rank(), empty.dim()), (0, 5));
        assert_eq!(project_phase2_gradient(&[1.0; 5], &empty).unwrap(), vec![1.0; 5]);
        assert!(project_phase2_gradient(&[1.0; 4], &empty).is_err());
        assert!(GradientBank::new(3).push(vec![0.0; 2]).is_err());
    }

    #[test]
    fn gradient_in_span_is_removed() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let d = 10;
        let mut bank = GradientBank::new(d);
        for _ in 0..3 {
            bank.push((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        }
        let basis = build_basis(&bank, DEFAULT_RANK_TOL).unwrap();
        let g: Vec<f64> = (0..d)
            .map(|i| 0.3 * bank.grads()[0][i] - 1.7 * bank.grads()[2][i])
            .collect();
        let p = project_phase2_gradient(&g, &basis).unwrap();
        assert!(p.iter().all(|v| v.abs() < 1e-12));
        let h: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ph = project_phase2_gradient(&h, &basis).unwrap();
        for b in basis.columns() {
            assert!(dot(&ph, b).unwrap().abs() <= 1e-12);
        }
    }

    /// Base loss `½‖Aφ − y‖²` and an unrelated novel loss. A step along the
    /// projected novel gradient changes the base loss only at second order.
    #[test]
    fn two_task_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (d, m) = (8, 3);
        let a: Vec<Vec<f64>> = (0..m).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let y: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let phi: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let base_loss = |p: &[f64]| -> f64 {
            a.iter()
                .zip(&y)
                .map(|(row, yi)| {
                    let r = dot(row, p).unwrap() - yi;
                    0.5 * r * r
                })
                .sum()
        };
        let base_grad = |p: &[f64]| -> Vec<f64> {
            let mut g = vec![0.0; d];
            for (row, yi) in a.iter().zip(&y) {
                let r = dot(row, p).unwrap() - yi;
                g.iter_mut().zip(row).for_each(|(gj, aj)| *gj += r * aj);
            }
            g
        };
        // novel loss ½‖φ − c‖²
        let novel_grad: Vec<f64> = phi.iter().zip(&c).map(|(p, ci)| p - ci).collect();

        // rows of A span the same space as the base gradients
        let mut bank = GradientBank::new(d);
        for row in &a {
            bank.push(row.clone()).unwrap();
        }
        bank.push(base_grad(&phi)).unwrap();
        let basis = build_basis(&bank, DEFAULT_RANK_TOL).unwrap();
        assert_eq!(basis.rank(), m);
        let projected = project_phase2_gradient(&novel_grad, &basis).unwrap();

        // ΔL is exactly quadratic in η along a direction orthogonal to A's rows
        // (it is zero); bound with K = ½‖A g̃‖² = 0 plus rounding.
        let l0 = base_loss(&phi);
        for eta in [1e-1, 1e-2, 1e-3] {
            let step = |g: &[f64]| -> Vec<f64> { phi.iter().zip(g).map(|(p, gi)| p - eta * gi).collect() };
            let d_proj = (base_loss(&step(&projected)) - l0).abs();
            let d_raw = (base_loss(&step(&novel_grad)) - l0).abs();
            assert!(d_proj < d_raw, "eta {eta}: projected {d_proj} raw {d_raw}");
            let k = 0.5 * a.iter().map(|row| dot(row, &projected).unwrap().powi(2)).sum::<f64>();
            assert!(d_proj <= k * eta * eta + 1e-12);
        }
    }
}
