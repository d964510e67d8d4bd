//! Dense row-major matrices, modified Gram-Schmidt and orthogonal-complement
//! projection.
//!
//! Vectors are plain `[f64]` slices. [`Mat`] is a minimal row-major matrix
//! that owns its storage; the hot loops in the network code index it
//! directly through [`Mat::row`] / [`Mat::row_mut`].

use std::ops::{Index, IndexMut};

use crate::error::{check_dim, Error, Result};

/// Default rank-truncation tolerance for [`modified_gram_schmidt`], relative
/// to each input vector's norm.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_dim("Mat::from_vec", rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_dim("Mat::from_rows", cols, r.as_ref().len())?;
            data.extend_from_slice(r.as_ref());
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact on an empty slice with cols == 0 would panic
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Mat) -> Result<Mat> {
        check_dim("Mat::matmul", self.cols, other.rows)?;
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let o = out.row_mut(i);
            for (k, &aik) in a.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                axpy(aik, other.row(k), o);
            }
        }
        Ok(out)
    }

    /// `self * otherᵀ`, i.e. row-by-row inner products.
    pub fn matmul_t(&self, other: &Mat) -> Result<Mat> {
        check_dim("Mat::matmul_t", self.cols, other.cols)?;
        let mut out = Mat::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out[(i, j)] = dot_unchecked(a, other.row(j));
            }
        }
        Ok(out)
    }

    /// Horizontal concatenation `[self | other]`.
    pub fn hcat(&self, other: &Mat) -> Result<Mat> {
        check_dim("Mat::hcat", self.rows, other.rows)?;
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Ok(Mat {
            rows: self.rows,
            cols,
            data,
        })
    }

    /// Splits columns at `at`, inverse of [`Mat::hcat`].
    pub fn hsplit(&self, at: usize) -> (Mat, Mat) {
        assert!(at <= self.cols, "hsplit index out of range");
        let mut left = Mat::zeros(self.rows, at);
        let mut right = Mat::zeros(self.rows, self.cols - at);
        for i in 0..self.rows {
            let r = self.row(i);
            left.row_mut(i).copy_from_slice(&r[..at]);
            right.row_mut(i).copy_from_slice(&r[at..]);
        }
        (left, right)
    }

    /// Vertical concatenation.
    pub fn vcat(&self, other: &Mat) -> Result<Mat> {
        check_dim("Mat::vcat", self.cols, other.cols)?;
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Mat {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn sub(&self, other: &Mat) -> Result<Mat> {
        check_dim("Mat::sub rows", self.rows, other.rows)?;
        check_dim("Mat::sub cols", self.cols, other.cols)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Mat {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Mat) -> Result<()> {
        check_dim("Mat::add_assign rows", self.rows, other.rows)?;
        check_dim("Mat::add_assign cols", self.cols, other.cols)?;
        axpy(1.0, &other.data, &mut self.data);
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub(crate) fn dot_unchecked(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`.
#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim("dot", a.len(), b.len())?;
    Ok(dot_unchecked(a, b))
}

pub fn norm(a: &[f64]) -> f64 {
    dot_unchecked(a, a).sqrt()
}

pub fn l2_normalize(a: &[f64]) -> Result<Vec<f64>> {
    let n = norm(a);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::ZeroNorm);
    }
    Ok(a.iter().map(|v| v / n).collect())
}

/// Orthonormal basis `B ∈ R^{d×r}` with `BᵀB = I_r`.
///
/// Columns are stored one per row of an `r × d` matrix so that each basis
/// vector is a contiguous slice.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthoBasis {
    dim: usize,
    columns: Mat,
}

impl OrthoBasis {
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            columns: Mat::zeros(0, dim),
        }
    }

    /// Wraps columns that are already orthonormal (e.g. loaded from a
    /// checkpoint). Orthonormality is checked to `tol` in max-abs norm.
    pub fn from_orthonormal_columns(dim: usize, columns: Vec<Vec<f64>>, tol: f64) -> Result<Self> {
        let cols = if columns.is_empty() {
            Mat::zeros(0, dim)
        } else {
            Mat::from_rows(&columns)?
        };
        check_dim("OrthoBasis column length", dim, cols.cols())?;
        let basis = Self { dim, columns: cols };
        let dev = basis.orthonormality_error();
        if dev > tol {
            return Err(Error::Format(format!(
                "basis columns are not orthonormal (max |BᵀB - I| = {dev:e})"
            )));
        }
        Ok(basis)
    }

    /// Ambient dimension `d`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Effective rank `r`.
    pub fn rank(&self) -> usize {
        self.columns.rows()
    }

    pub fn column(&self, k: usize) -> &[f64] {
        self.columns.row(k)
    }

    pub fn columns(&self) -> impl Iterator<Item = &[f64]> {
        self.columns.row_iter()
    }

    /// `B` as a `d × r` matrix.
    pub fn to_matrix(&self) -> Mat {
        self.columns.transpose()
    }

    /// `max |BᵀB − I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let r = self.rank();
        let mut worst: f64 = 0.0;
        for i in 0..r {
            for j in 0..r {
                let target = if i == j { 1.0 } else { 0.0 };
                let v = dot_unchecked(self.column(i), self.column(j));
                worst = worst.max((v - target).abs());
            }
        }
        worst
    }
}

/// Orthonormalizes `vectors` in order with modified Gram-Schmidt.
///
/// Each candidate is swept against the accepted columns twice (the second
/// sweep restores orthogonality lost to cancellation when the candidate is
/// nearly dependent). A candidate whose residual norm falls below
/// `rel_tol × ‖v‖` is dropped; the number of survivors is the effective rank.
pub fn modified_gram_schmidt<V: AsRef<[f64]>>(vectors: &[V], rel_tol: f64) -> Result<OrthoBasis> {
    if !(rel_tol > 0.0) {
        return Err(Error::Config(format!("rel_tol must be positive, got {rel_tol}")));
    }
    let Some(first) = vectors.first() else {
        return Ok(OrthoBasis::empty(0));
    };
    let dim = first.as_ref().len();
    if dim == 0 {
        return Err(Error::Empty("modified_gram_schmidt: zero-dimensional vectors"));
    }
    let mut accepted: Vec<Vec<f64>> = Vec::new();
    for v in vectors {
        let v = v.as_ref();
        check_dim("modified_gram_schmidt", dim, v.len())?;
        let original = norm(v);
        if original == 0.0 {
            continue;
        }
        if !original.is_finite() {
            return Err(Error::NonFinite {
                context: "modified_gram_schmidt input",
                index: accepted.len(),
                value: original,
            });
        }
        let mut w = v.to_vec();
        for _ in 0..2 {
            for q in &accepted {
                let c = dot_unchecked(q, &w);
                axpy(-c, q, &mut w);
            }
        }
        let residual = norm(&w);
        if residual < rel_tol * original || accepted.len() == dim {
            continue;
        }
        w.iter_mut().for_each(|x| *x /= residual);
        accepted.push(w);
    }
    let columns = if accepted.is_empty() {
        Mat::zeros(0, dim)
    } else {
        Mat::from_rows(&accepted)?
    };
    Ok(OrthoBasis { dim, columns })
}

/// Coefficients `Bᵀg`.
pub fn basis_coefficients(g: &[f64], basis: &OrthoBasis) -> Result<Vec<f64>> {
    if basis.rank() == 0 {
        return Ok(Vec::new());
    }
    check_dim("basis_coefficients", basis.dim(), g.len())?;
    Ok(basis.columns().map(|b| dot_unchecked(b, g)).collect())
}

/// `g − B(Bᵀg)`: the component of `g` in the orthogonal complement of
/// `span(B)`.
pub fn project_out(g: &[f64], basis: &OrthoBasis) -> Result<Vec<f64>> {
    if basis.rank() == 0 {
        return Ok(g.to_vec());
    }
    let coeffs = basis_coefficients(g, basis)?;
    let mut out = g.to_vec();
    for (c, b) in coeffs.iter().zip(basis.columns()) {
        axpy(-c, b, &mut out);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn gram_schmidt_two_step() {
        let b = modified_gram_schmidt(&[vec![1.0, 0.0], vec![1.0, 1.0]], 1e-10).unwrap();
        assert_eq!(b.rank(), 2);
        assert_eq!(b.column(0), &[1.0, 0.0]);
        assert!((b.column(1)[0]).abs() < 1e-15);
        assert!((b.column(1)[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gram_schmidt_drops_duplicate_direction() {
        let b = modified_gram_schmidt(&[vec![2.0, 0.0, 0.0], vec![4.0, 0.0, 0.0]], 1e-10).unwrap();
        assert_eq!(b.rank(), 1);
        assert_eq!(b.column(0), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn gram_schmidt_empty_and_mismatch() {
        let empty: Vec<Vec<f64>> = Vec::new();
        assert_eq!(modified_gram_schmidt(&empty, 1e-10).unwrap().rank(), 0);
        let err = modified_gram_schmidt(&[vec![1.0, 0.0], vec![1.0]], 1e-10);
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn gram_schmidt_zero_vectors_give_rank_zero() {
        let b = modified_gram_schmidt(&[vec![0.0; 5], vec![0.0; 5]], 1e-10).unwrap();
        assert_eq!(b.rank(), 0);
        assert_eq!(b.dim(), 5);
    }

    #[test]
    fn gram_schmidt_never_exceeds_dimension() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vs: Vec<Vec<f64>> = (0..6).map(|_| random_vec(&mut rng, 4)).collect();
        let b = modified_gram_schmidt(&vs, 1e-10).unwrap();
        assert_eq!(b.rank(), 4);
        assert!(b.orthonormality_error() < 1e-10);
    }

    #[test]
    fn gram_schmidt_ill_conditioned_input() {
        // columns of a Läuchli-style matrix, condition number ~1e6
        let eps = 1e-6;
        let n = 5;
        let vs: Vec<Vec<f64>> = (0..n)
            .map(|j| {
                let mut v = vec![1.0; n + 1];
                for (i, x) in v.iter_mut().enumerate().skip(1) {
                    *x = if i - 1 == j { 1.0 + eps } else { 1.0 };
                }
                v
            })
            .collect();
        let b = modified_gram_schmidt(&vs, 1e-10).unwrap();
        assert_eq!(b.rank(), n);
        assert!(b.orthonormality_error() <= 1e-8);
    }

    #[test]
    fn project_out_single_axis() {
        let b = modified_gram_schmidt(&[vec![1.0, 0.0, 0.0]], 1e-10).unwrap();
        assert_eq!(project_out(&[1.0, 2.0, 3.0], &b).unwrap(), vec![0.0, 2.0, 3.0]);
        assert_eq!(project_out(&[5.0, 0.0, 0.0], &b).unwrap(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn project_out_empty_basis_is_identity() {
        let b = OrthoBasis::empty(3);
        assert_eq!(project_out(&[1.0, 2.0, 3.0], &b).unwrap(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn project_out_dimension_mismatch() {
        let b = modified_gram_schmidt(&[vec![1.0, 0.0, 0.0]], 1e-10).unwrap();
        assert!(project_out(&[1.0, 2.0], &b).is_err());
    }

    #[test]
    fn project_out_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vs: Vec<Vec<f64>> = (0..3).map(|_| random_vec(&mut rng, 8)).collect();
        let b = modified_gram_schmidt(&vs, 1e-10).unwrap();
        let g = random_vec(&mut rng, 8);
        // g − Σᵢ⟨g,bᵢ⟩bᵢ, one element at a time
        let mut expected = g.clone();
        for k in 0..b.rank() {
            let mut c = 0.0;
            for i in 0..8 {
                c += g[i] * b.column(k)[i];
            }
            for i in 0..8 {
                expected[i] -= c * b.column(k)[i];
            }
        }
        let got = project_out(&g, &b).unwrap();
        for (a, e) in got.iter().zip(&expected) {
            assert!((a - e).abs() < 1e-14);
        }
    }

    #[test]
    fn dot_and_normalize() {
        assert_eq!(dot(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);
        let n = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((n[0] - 0.6).abs() < 1e-15 && (n[1] - 0.8).abs() < 1e-15);
        assert!(matches!(l2_normalize(&[0.0, 0.0]), Err(Error::ZeroNorm)));
        assert!(dot(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn dot_matches_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_vec(&mut rng, 16);
        let b = random_vec(&mut rng, 16);
        let mut oracle = 0.0;
        for i in 0..16 {
            oracle += a[i] * b[i];
        }
        let got = dot(&a, &b).unwrap();
        assert!((got - oracle).abs() <= 1e-12 * oracle.abs().max(1e-300));
    }

    #[test]
    fn matrix_helpers() {
        let a = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let i = Mat::identity(2);
        assert_eq!(a.matmul(&i).unwrap(), a);
        assert_eq!(a.matmul_t(&i).unwrap(), a);
        let h = a.hcat(&i).unwrap();
        let (l, r) = h.hsplit(2);
        assert_eq!(l, a);
        assert_eq!(r, i);
        assert_eq!(a.transpose()[(0, 1)], 3.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn basis_and_vector() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>)> {
            (2usize..12, 1usize..6).prop_flat_map(|(d, r)| {
                (
                    prop::collection::vec(prop::collection::vec(-10.0f64..10.0, d), r),
                    prop::collection::vec(-100.0f64..100.0, d),
                )
            })
        }

        proptest! {
            #[test]
            fn projection_is_idempotent_and_orthogonal((vs, g) in basis_and_vector()) {
                let b = modified_gram_schmidt(&vs, DEFAULT_RANK_TOL).unwrap();
                let p = project_out(&g, &b).unwrap();
                let pp = project_out(&p, &b).unwrap();
                let scale = norm(&g).max(1.0);
                for (x, y) in p.iter().zip(&pp) {
                    prop_assert!((x - y).abs() <= 1e-9 * scale);
                }
                for col in b.columns() {
                    prop_assert!(dot_unchecked(col, &p).abs() <= 1e-8 * scale);
                }
                prop_assert!(norm(&p) <= norm(&g) * (1.0 + 1e-12));
            }
        }
    }
}
