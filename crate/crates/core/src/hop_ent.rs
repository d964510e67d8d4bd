//! Dual-entropy few-shot regularizer.
//!
//! `L_cond` is the mean novel-class prediction entropy over confidently
//! novel points and is minimized. `L_marg` is the entropy of the
//! batch-averaged novel-class distribution and is maximized, so it enters the
//! total loss with a negative sign: `L_ent = λ_cond·L_cond − λ_marg·L_marg`.
//!
//! By default probabilities are the full softmax restricted to the novel
//! classes without renormalization; `renormalize` switches to proper
//! distributions over the novel classes.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result};
use crate::linalg::Mat;
use crate::net::argmax;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyConfig {
    pub lambda_cond: f64,
    pub lambda_marg: f64,
    /// Minimum max-probability for a point to enter the conditional term.
    pub tau: f64,
    pub renormalize: bool,
}

impl Default for EntropyConfig {
    fn default() -> Self {
        Self {
            lambda_cond: 0.1,
            lambda_marg: 0.5,
            tau: 0.7,
            renormalize: false,
        }
    }
}

/// Which entropy terms are active during adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyMode {
    Off,
    MarginalOnly,
    Full,
}

/// Value of an entropy term and its gradient w.r.t. the logits.
#[derive(Debug, Clone)]
pub struct EntropyTerm {
    pub value: f64,
    pub grad_logits: Mat,
}

#[inline]
fn xlogx(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

/// `dL/dp = −(ln p + 1)`, with the `p = 0` limit taken as 0 since it is
/// always multiplied by `p` through the softmax Jacobian.
#[inline]
fn neg_entropy_slope(p: f64) -> f64 {
    if p > 0.0 {
        -(p.ln() + 1.0)
    } else {
        0.0
    }
}

/// Pulls `g = ∂L/∂p` back through a row softmax: `p ⊙ (g − ⟨p, g⟩)`.
fn softmax_pullback(p: &[f64], g: &[f64], out: &mut [f64]) {
    let inner: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    for ((o, &pj), &gj) in out.iter_mut().zip(p).zip(g) {
        *o += pj * (gj - inner);
    }
}

/// Points whose overall argmax is a novel class with probability ≥ `tau`.
pub fn select_confident(probs: &Mat, novel: &[usize], tau: f64) -> Vec<usize> {
    (0..probs.rows())
        .filter(|&i| {
            let row = probs.row(i);
            let c = argmax(row);
            novel.contains(&c) && row[c] >= tau
        })
        .collect()
}

/// Novel-class probabilities of one row, renormalized if requested.
/// Returns the restricted vector and its pre-normalization mass.
fn restrict(row: &[f64], novel: &[usize], renormalize: bool) -> (Vec<f64>, f64) {
    let mut q: Vec<f64> = novel.iter().map(|&c| row[c]).collect();
    let mass: f64 = q.iter().sum();
    if renormalize && mass > 0.0 {
        q.iter_mut().for_each(|v| *v /= mass);
    }
    (q, mass)
}

/// Mean over `selected` of `−Σ_{c∈novel} p(c|x) ln p(c|x)`; 0 when
/// `selected` is empty.
pub fn conditional_entropy(probs: &Mat, selected: &[usize], novel: &[usize], renormalize: bool) -> EntropyTerm {
    let mut grad = Mat::zeros(probs.rows(), probs.cols());
    if selected.is_empty() || novel.is_empty() {
        return EntropyTerm {
            value: 0.0,
            grad_logits: grad,
        };
    }
    let inv = 1.0 / selected.len() as f64;
    let mut total = 0.0;
    for &i in selected {
        let row = probs.row(i);
        let (q, _) = restrict(row, novel, renormalize);
        total -= q.iter().map(|&v| xlogx(v)).sum::<f64>();
        let slope: Vec<f64> = q.iter().map(|&v| inv * neg_entropy_slope(v)).collect();
        if renormalize {
            // q = softmax over the novel logits alone
            let mut gz = vec![0.0; q.len()];
            softmax_pullback(&q, &slope, &mut gz);
            let out = grad.row_mut(i);
            for (&c, g) in novel.iter().zip(&gz) {
                out[c] += g;
            }
        } else {
            let mut g_full = vec![0.0; row.len()];
            for (&c, s) in novel.iter().zip(&slope) {
                g_full[c] = *s;
            }
            softmax_pullback(row, &g_full, grad.row_mut(i));
        }
    }
    EntropyTerm {
        value: total * inv,
        grad_logits: grad,
    }
}

/// Entropy of `p̄(c) = (1/N) Σᵢ p(c|xᵢ)` over the novel classes, averaged
/// over every point in the batch.
pub fn marginal_entropy(probs: &Mat, novel: &[usize], renormalize: bool) -> EntropyTerm {
    let n = probs.rows();
    let mut grad = Mat::zeros(n, probs.cols());
    if n == 0 || novel.is_empty() {
        return EntropyTerm {
            value: 0.0,
            grad_logits: grad,
        };
    }
    let inv_n = 1.0 / n as f64;
    let mut mean = vec![0.0; novel.len()];
    for row in probs.row_iter() {
        for (m, &c) in mean.iter_mut().zip(novel) {
            *m += row[c];
        }
    }
    mean.iter_mut().for_each(|m| *m *= inv_n);

    let mass: f64 = mean.iter().sum();
    let (q, dl_dmean): (Vec<f64>, Vec<f64>) = if renormalize && mass > 0.0 {
        let q: Vec<f64> = mean.iter().map(|m| m / mass).collect();
        let h: Vec<f64> = q.iter().map(|&v| neg_entropy_slope(v)).collect();
        let hq: f64 = h.iter().zip(&q).map(|(a, b)| a * b).sum();
        let d = h.iter().map(|hc| (hc - hq) / mass).collect();
        (q, d)
    } else {
        let d = mean.iter().map(|&v| neg_entropy_slope(v)).collect();
        (mean.clone(), d)
    };
    let value = -q.iter().map(|&v| xlogx(v)).sum::<f64>();

    let mut g_full = vec![0.0; probs.cols()];
    for i in 0..n {
        g_full.iter_mut().for_each(|v| *v = 0.0);
        for (&c, d) in novel.iter().zip(&dl_dmean) {
            g_full[c] = d * inv_n;
        }
        softmax_pullback(probs.row(i), &g_full, grad.row_mut(i));
    }
    EntropyTerm {
        value,
        grad_logits: grad,
    }
}

/// `λ_cond·L_cond − λ_marg·L_marg`.
pub fn entropy_loss(cond: f64, marg: f64, cfg: &EntropyConfig) -> f64 {
    cfg.lambda_cond * cond - cfg.lambda_marg * marg
}

/// Combined regularizer for one batch of logits, as used in training.
#[derive(Debug, Clone)]
pub struct EntropyBreakdown {
    pub cond: f64,
    pub marg: f64,
    pub loss: f64,
    pub selected: usize,
    pub grad_logits: Mat,
}

pub fn entropy_objective(
    probs: &Mat,
    novel: &[usize],
    cfg: &EntropyConfig,
    mode: EntropyMode,
) -> Result<EntropyBreakdown> {
    if let Some(&max) = novel.iter().max().filter(|&&m| m >= probs.cols()) {
        check_dim("entropy_objective novel index", probs.cols(), max)?;
    }
    let mut grad = Mat::zeros(probs.rows(), probs.cols());
    let (mut cond, mut marg, mut selected) = (0.0, 0.0, 0);
    if mode == EntropyMode::Full {
        let s = select_confident(probs, novel, cfg.tau);
        selected = s.len();
        let t = conditional_entropy(probs, &s, novel, cfg.renormalize);
        cond = t.value;
        crate::linalg::axpy(cfg.lambda_cond, t.grad_logits.as_slice(), grad.as_mut_slice());
    }
    if mode != EntropyMode::Off {
        let t = marginal_entropy(probs, novel, cfg.renormalize);
        marg = t.value;
        crate::linalg::axpy(-cfg.lambda_marg, t.grad_logits.as_slice(), grad.as_mut_slice());
    }
    Ok(EntropyBreakdown {
        cond,
        marg,
        // inactive terms are left at zero
        loss: entropy_loss(cond, marg, cfg),
        selected,
        grad_logits: grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::softmax;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN4: f64 = 1.3862943611198906;

    fn random_logits(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Mat {
        Mat::from_vec(n, k, (0..n * k).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
    }

    /// Finite-difference check of a logits → scalar map.
    fn check_grad(logits: &Mat, f: impl Fn(&Mat) -> (f64, Mat)) {
        let (_, g) = f(logits);
        let h = 1e-5;
        for idx in 0..logits.as_slice().len() {
            let mut p = logits.clone();
            p.as_mut_slice()[idx] += h;
            let lp = f(&p).0;
            p.as_mut_slice()[idx] -= 2.0 * h;
            let lm = f(&p).0;
            let fd = (lp - lm) / (2.0 * h);
            let a = g.as_slice()[idx];
            // entries that are structurally zero only see roundoff in the
            // central difference (~1e-11 at h = 1e-5)
            let both_zero = a.abs() < 1e-9 && fd.abs() < 1e-9;
            let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-8);
            assert!(both_zero || rel <= 1e-5, "idx {idx}: fd {fd} analytic {a}");
        }
    }

    #[test]
    fn selection_rule() {
        let probs = Mat::from_rows(&[
            vec![0.02, 0.03, 0.95, 0.0],
            vec![0.9, 0.05, 0.05, 0.0],
            vec![0.1, 0.2, 0.4, 0.3],
        ])
        .unwrap();
        assert_eq!(select_confident(&probs, &[2, 3], 0.7), vec![0]);
        assert!(select_confident(&probs, &[2, 3], 0.99).is_empty());
    }

    #[test]
    fn selection_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let probs = softmax(&random_logits(&mut rng, 200, 6));
        let novel = [3, 4, 5];
        let mut oracle = Vec::new();
        for i in 0..200 {
            let mut best = 0;
            for j in 1..6 {
                if probs[(i, j)] > probs[(i, best)] {
                    best = j;
                }
            }
            if best >= 3 && probs[(i, best)] >= 0.5 {
                oracle.push(i);
            }
        }
        assert_eq!(select_confident(&probs, &novel, 0.5), oracle);
    }

    #[test]
    fn conditional_entropy_extremes() {
        let uniform = Mat::from_rows(&[vec![0.0, 0.25, 0.25, 0.25, 0.25]]).unwrap();
        let novel = [1, 2, 3, 4];
        let t = conditional_entropy(&uniform, &[0], &novel, false);
        assert!((t.value - LN4).abs() < 1e-12);
        let one_hot = Mat::from_rows(&[vec![0.0, 0.0, 1.0, 0.0, 0.0]]).unwrap();
        let t = conditional_entropy(&one_hot, &[0], &novel, false);
        assert_eq!(t.value, 0.0);
        assert!(t.grad_logits.is_finite());
        assert_eq!(conditional_entropy(&one_hot, &[], &novel, false).value, 0.0);
    }

    #[test]
    fn marginal_entropy_extremes() {
        let novel = [1, 2, 3, 4];
        let batch = Mat::from_rows(&[
            vec![0.0, 0.5, 0.5, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 0.5, 0.5],
        ])
        .unwrap();
        assert!((marginal_entropy(&batch, &novel, false).value - LN4).abs() < 1e-12);
        let peaked = Mat::from_rows(&vec![vec![0.0, 1.0, 0.0, 0.0, 0.0]; 3]).unwrap();
        let t = marginal_entropy(&peaked, &novel, false);
        assert_eq!(t.value, 0.0);
        assert!(t.grad_logits.is_finite());
    }

    #[test]
    fn conditional_entropy_matches_oracle_and_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = random_logits(&mut rng, 8, 6);
        let novel = [3, 4, 5];
        let probs = softmax(&logits);
        let sel: Vec<usize> = vec![0, 2, 5, 7];
        for renorm in [false, true] {
            let t = conditional_entropy(&probs, &sel, &novel, renorm);
            let mut oracle = 0.0;
            for &i in &sel {
                let mass: f64 = novel.iter().map(|&c| probs[(i, c)]).sum();
                for &c in &novel {
                    let p = if renorm { probs[(i, c)] / mass } else { probs[(i, c)] };
                    oracle -= p * p.ln();
                }
            }
            oracle /= sel.len() as f64;
            assert!((t.value - oracle).abs() <= 1e-12);
            check_grad(&logits, |z| {
                let t = conditional_entropy(&softmax(z), &sel, &novel, renorm);
                (t.value, t.grad_logits)
            });
        }
    }

    #[test]
    fn marginal_entropy_matches_oracle_and_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = random_logits(&mut rng, 7, 5);
        let novel = [2, 3, 4];
        let probs = softmax(&logits);
        for renorm in [false, true] {
            let t = marginal_entropy(&probs, &novel, renorm);
            let mut pbar = [0.0; 3];
            for i in 0..7 {
                for (k, &c) in novel.iter().enumerate() {
                    pbar[k] += probs[(i, c)] / 7.0;
                }
            }
            let mass: f64 = pbar.iter().sum();
            let oracle: f64 = pbar
                .iter()
                .map(|&p| if renorm { p / mass } else { p })
                .map(|p| -p * p.ln())
                .sum();
            assert!((t.value - oracle).abs() <= 1e-12);
            check_grad(&logits, |z| {
                let t = marginal_entropy(&softmax(z), &novel, renorm);
                (t.value, t.grad_logits)
            });
        }
    }

    #[test]
    fn entropy_loss_arithmetic() {
        let zero = EntropyConfig {
            lambda_cond: 0.0,
            lambda_marg: 0.0,
            ..Default::default()
        };
        assert_eq!(entropy_loss(1.0, 2.0, &zero), 0.0);
        let cfg = EntropyConfig::default();
        assert!((entropy_loss(LN4, 0.0, &cfg) - 0.138629).abs() < 1e-6);
    }

    #[test]
    fn full_objective_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // confident novel rows so that the selection is non-empty and
        // stable under the finite-difference perturbation
        let mut logits = random_logits(&mut rng, 10, 6);
        for i in 0..5 {
            logits[(i, 3 + i % 3)] += 6.0;
        }
        let novel = [3, 4, 5];
        let cfg = EntropyConfig::default();
        let sel = select_confident(&softmax(&logits), &novel, cfg.tau);
        assert!(!sel.is_empty());
        check_grad(&logits, |z| {
            let b = entropy_objective(&softmax(z), &novel, &cfg, EntropyMode::Full).unwrap();
            (b.loss, b.grad_logits)
        });
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn entropy_bounds(seed in 0u64..10_000, n in 1usize..20) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let probs = softmax(&random_logits(&mut rng, n, 7));
                let novel = [3, 4, 5, 6];
                let ln_k = (novel.len() as f64).ln();
                let all: Vec<usize> = (0..n).collect();

                let c = conditional_entropy(&probs, &all, &novel, true).value;
                prop_assert!(c >= -1e-15 && c <= ln_k + 1e-12);
                let m = marginal_entropy(&probs, &novel, true).value;
                prop_assert!(m >= -1e-15 && m <= ln_k + 1e-12);

                // literal form: per row −Σ p ln p ≤ m ln K − m ln m with m the novel mass
                let c_lit = conditional_entropy(&probs, &all, &novel, false).value;
                let mut bound = 0.0;
                for i in 0..n {
                    let mass: f64 = novel.iter().map(|&k| probs[(i, k)]).sum();
                    bound += mass * ln_k - xlogx(mass);
                }
                prop_assert!(c_lit >= 0.0 && c_lit <= bound / n as f64 + 1e-12);
                let m_lit = marginal_entropy(&probs, &novel, false).value;
                prop_assert!(m_lit >= 0.0 && m_lit <= ln_k + (-1f64).exp() + 1e-12);
            }
        }
    }
}
