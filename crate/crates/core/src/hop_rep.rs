//! Hierarchical prototype decomposition and the prototype orthogonality
//! regularizer.
//!
//! Features are split into a base-aligned part `f_b = Σ_k ⟨f, ŝ_k⟩ ŝ_k` and a
//! residual `r0 = f − f_b`; in the adapted stage the residual is split again
//! against the novel prototypes into `f_n` and `r1`. The projections are the
//! literal sums of rank-1 projections, so `r0 ⊥ ŝ_k` only holds when the
//! prototypes are orthonormal. The orthogonality loss is what pushes them
//! toward that regime.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{axpy, dot_unchecked, norm, Mat};
use crate::net::{Mlp, MlpTape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PrototypeRole {
    Base,
    Novel,
}

/// Trainable prototypes, one per row. Every consumer works on the
/// row-normalized view.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub raw: Mat,
    pub role: PrototypeRole,
}

impl PrototypeSet {
    pub fn new(raw: Mat, role: PrototypeRole) -> Self {
        Self { raw, role }
    }

    pub fn len(&self) -> usize {
        self.raw.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.raw.cols()
    }

    pub fn normalized(&self) -> Result<Mat> {
        normalize_rows(&self.raw)
    }
}

pub fn normalize_rows(raw: &Mat) -> Result<Mat> {
    let mut hat = raw.clone();
    for i in 0..hat.rows() {
        let row = hat.row_mut(i);
        let n = norm(row);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::ZeroNorm);
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(hat)
}

/// Chain rule through `ŝ = s / ‖s‖`, row by row.
pub fn normalize_rows_backward(raw: &Mat, hat: &Mat, g_hat: &Mat) -> Mat {
    let mut g = Mat::zeros(raw.rows(), raw.cols());
    for i in 0..raw.rows() {
        let n = norm(raw.row(i));
        let h = hat.row(i);
        let gh = g_hat.row(i);
        let c = dot_unchecked(h, gh);
        for ((gi, &ghj), &hj) in g.row_mut(i).iter_mut().zip(gh).zip(h) {
            *gi = (ghj - c * hj) / n;
        }
    }
    g
}

/// Result of projecting every row of an input onto a prototype set.
#[derive(Debug, Clone)]
pub struct Projection {
    /// `Σ_k ⟨x, ŝ_k⟩ ŝ_k` per row.
    pub proj: Mat,
    /// `x − proj`.
    pub resid: Mat,
    /// `⟨x, ŝ_k⟩`, shape `N × K`.
    pub coeffs: Mat,
}

/// Sum of rank-1 projections of each row of `x` onto the rows of `hat`.
pub fn project_onto(x: &Mat, hat: &Mat) -> Result<Projection> {
    check_dim("prototype projection feature width", hat.cols(), x.cols())?;
    let coeffs = x.matmul_t(hat)?;
    let mut proj = Mat::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let out = proj.row_mut(i);
        for (k, &a) in coeffs.row(i).iter().enumerate() {
            axpy(a, hat.row(k), out);
        }
    }
    let resid = x.sub(&proj)?;
    Ok(Projection {
        proj,
        resid,
        coeffs,
    })
}

/// Reverse pass of [`project_onto`]: returns `(∂L/∂x, ∂L/∂ŝ)`.
pub fn project_onto_backward(
    x: &Mat,
    hat: &Mat,
    coeffs: &Mat,
    g_proj: &Mat,
    g_resid: &Mat,
) -> Result<(Mat, Mat)> {
    // resid = x − proj, so the effective upstream on proj is g_proj − g_resid
    let g = g_proj.sub(g_resid)?;
    let u = g.matmul_t(hat)?;
    let mut g_x = g_resid.clone();
    g_x.add_assign(&u.matmul(hat)?)?;
    let mut g_hat = Mat::zeros(hat.rows(), hat.cols());
    for i in 0..x.rows() {
        let (xi, gi) = (x.row(i), g.row(i));
        for k in 0..hat.rows() {
            let out = g_hat.row_mut(k);
            axpy(u[(i, k)], xi, out);
            axpy(coeffs[(i, k)], gi, out);
        }
    }
    Ok((g_x, g_hat))
}

/// Base-aligned component and first residual.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub f_b: Mat,
    pub r0: Mat,
    /// Present only once novel prototypes exist.
    pub f_n: Option<Mat>,
    pub r1: Option<Mat>,
}

pub fn decompose_base(features: &Mat, base: &PrototypeSet) -> Result<(Mat, Mat)> {
    if base.role != PrototypeRole::Base {
        return Err(Error::Stage("decompose_base expects BASE prototypes"));
    }
    let p = project_onto(features, &base.normalized()?)?;
    Ok((p.proj, p.resid))
}

pub fn decompose_novel(r0: &Mat, novel: &PrototypeSet) -> Result<(Mat, Mat)> {
    if novel.role != PrototypeRole::Novel {
        return Err(Error::Stage("decompose_novel expects NOVEL prototypes"));
    }
    let p = project_onto(r0, &novel.normalized()?)?;
    Ok((p.proj, p.resid))
}

/// `Σ_{i<j} |ŝᵢᵀŝⱼ|` over the rows of `raw`, with the gradient taken
/// through the row normalization. Fewer than two rows give zero.
pub fn orthogonality_loss(raw: &Mat) -> Result<(f64, Mat)> {
    let k = raw.rows();
    if k < 2 {
        return Ok((0.0, Mat::zeros(k, raw.cols())));
    }
    let hat = normalize_rows(raw)?;
    let mut loss = 0.0;
    let mut g_hat = Mat::zeros(k, raw.cols());
    for i in 0..k {
        for j in (i + 1)..k {
            let c = dot_unchecked(hat.row(i), hat.row(j));
            loss += c.abs();
            let s = if c > 0.0 {
                1.0
            } else if c < 0.0 {
                -1.0
            } else {
                0.0
            };
            if s != 0.0 {
                let (hi, hj) = (hat.row(i).to_vec(), hat.row(j).to_vec());
                axpy(s, &hj, g_hat.row_mut(i));
                axpy(s, &hi, g_hat.row_mut(j));
            }
        }
    }
    Ok((loss, normalize_rows_backward(raw, &hat, &g_hat)))
}

/// Pairwise cosine similarities of the prototype rows.
pub fn cosine_similarity_matrix(raw: &Mat) -> Result<Mat> {
    let hat = normalize_rows(raw)?;
    let mut s = hat.matmul_t(&hat)?;
    for i in 0..s.rows() {
        s[(i, i)] = 1.0;
    }
    Ok(s)
}

/// Mean of `|cos|` over the off-diagonal entries; 0 for a single prototype.
pub fn mean_offdiag_abs_cosine(raw: &Mat) -> Result<f64> {
    let s = cosine_similarity_matrix(raw)?;
    let k = s.rows();
    if k < 2 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for i in 0..k {
        for j in 0..k {
            if i != j {
                total += s[(i, j)].abs();
            }
        }
    }
    Ok(total / (k * (k - 1)) as f64)
}

/// Shared head over `[f_b | r0]`. Output column 0 is the background logit,
/// columns `1..=K_b` the base classes, matching the label numbering.
pub fn phase1_logits(f_b: &Mat, r0: &Mat, shared_head: &Mlp) -> Result<(Mat, MlpTape)> {
    check_dim("phase1_logits head input", 2 * f_b.cols(), shared_head.in_dim())?;
    shared_head.forward(&f_b.hcat(r0)?)
}

/// Tapes recorded by [`phase2_logits`].
#[derive(Debug, Clone)]
pub struct Phase2HeadTapes {
    pub base: MlpTape,
    pub novel: MlpTape,
}

/// `z = [h_b(f_b) ‖ h_n(f_n, r1)]`, laid out in label order: background
/// (first output of `h_n`), then the `K_b` base logits of `h_b`, then the
/// `K_n` novel logits of `h_n`.
pub fn phase2_logits(
    f_b: &Mat,
    f_n: &Mat,
    r1: &Mat,
    base_head: &Mlp,
    novel_head: &Mlp,
) -> Result<(Mat, Phase2HeadTapes)> {
    check_dim("phase2_logits h_b input", f_b.cols(), base_head.in_dim())?;
    check_dim("phase2_logits h_n input", f_n.cols() + r1.cols(), novel_head.in_dim())?;
    let (zb, base) = base_head.forward(f_b)?;
    let (zn, novel) = novel_head.forward(&f_n.hcat(r1)?)?;
    let k_b = zb.cols();
    let k_n = zn.cols() - 1;
    let mut z = Mat::zeros(f_b.rows(), 1 + k_b + k_n);
    for i in 0..z.rows() {
        let (b, n) = (zb.row(i), zn.row(i));
        let row = z.row_mut(i);
        row[0] = n[0];
        row[1..=k_b].copy_from_slice(b);
        row[k_b + 1..].copy_from_slice(&n[1..]);
    }
    Ok((z, Phase2HeadTapes { base, novel }))
}

/// Splits `∂L/∂z` back into the upstream gradients of `h_b` and `h_n`.
pub fn phase2_split_grad(dz: &Mat, k_base: usize) -> (Mat, Mat) {
    let k_n = dz.cols() - 1 - k_base;
    let mut gb = Mat::zeros(dz.rows(), k_base);
    let mut gn = Mat::zeros(dz.rows(), k_n + 1);
    for i in 0..dz.rows() {
        let row = dz.row(i);
        gb.row_mut(i).copy_from_slice(&row[1..=k_base]);
        let n = gn.row_mut(i);
        n[0] = row[0];
        n[1..].copy_from_slice(&row[k_base + 1..]);
    }
    (gb, gn)
}
