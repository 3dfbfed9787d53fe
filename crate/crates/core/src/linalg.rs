//! Dense decompositions and the reduced-rank regression solver.
//!
//! Symmetric eigendecomposition and SVD are backed by `nalgebra`; this module
//! adds the descending-order convention, the numerical guards, and the
//! closed-form solution of
//!
//! ```text
//! min ‖Z − M·Y‖_F²   subject to   rank(M) ≤ d′
//! ```
//!
//! computed by whitening the regressors: with `YYᵀ = E·Λ·Eᵀ`, the matrix
//! `T = Z·Yᵀ·E·Λ^{-1/2}` is truncated to rank `d′` by SVD and mapped back, so
//! `M = U_{d′}·S_{d′}·V_{d′}ᵀ` with `V = E·Λ^{-1/2}·Ṽ` satisfying
//! `Vᵀ·(YYᵀ)·V = I`.

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};

use crate::error::{Error, Result};

/// Eigenvalues below this fraction of the largest are treated as zero when
/// whitening.
const WHITEN_FLOOR: f64 = 1e-12;

/// Relative size below which a singular value counts as numerically zero.
const RANK_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    /// Sorted descending.
    pub values: DVector<f64>,
    /// Orthonormal eigenvectors, one per column, in the order of `values`.
    pub vectors: DMatrix<f64>,
}

impl EigenDecomposition {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.vectors * DMatrix::from_diagonal(&self.values) * self.vectors.transpose()
    }
}

/// Thin SVD, `A = U·diag(S)·Vᵀ`, singular values descending.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: DMatrix<f64>,
    pub s: DVector<f64>,
    pub v: DMatrix<f64>,
}

impl Svd {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.u * DMatrix::from_diagonal(&self.s) * self.v.transpose()
    }
}

/// Rank-constrained least-squares solution `M = U·diag(S)·Vᵀ`.
#[derive(Debug, Clone)]
pub struct RrrSolution {
    pub m: DMatrix<f64>,
    pub rank: usize,
    pub u: DMatrix<f64>,
    pub s: DVector<f64>,
    pub v: DMatrix<f64>,
}

/// Stable descending order: equal values keep their original relative order.
fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    idx
}

fn permute_columns(m: &DMatrix<f64>, order: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), order.len(), |r, c| m[(r, order[c])])
}

pub fn sym_eig(s: &DMatrix<f64>) -> Result<EigenDecomposition> {
    if !s.is_square() {
        return Err(Error::Shape(format!(
            "sym_eig needs a square matrix, got {}x{}",
            s.nrows(),
            s.ncols()
        )));
    }
    let scale = s.amax().max(1.0);
    for i in 0..s.nrows() {
        for j in 0..i {
            if (s[(i, j)] - s[(j, i)]).abs() > 1e-8 * scale {
                return Err(Error::Input(format!(
                    "matrix is not symmetric at ({i}, {j}): {} vs {}",
                    s[(i, j)],
                    s[(j, i)]
                )));
            }
        }
    }
    let eig = SymmetricEigen::new(s.clone());
    let raw: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    let order = descending_order(&raw);
    Ok(EigenDecomposition {
        values: DVector::from_iterator(order.len(), order.iter().map(|&i| raw[i])),
        vectors: permute_columns(&eig.eigenvectors, &order),
    })
}

pub fn svd(a: &DMatrix<f64>) -> Svd {
    let dec = SVD::new(a.clone(), true, true);
    let u = dec.u.expect("requested U");
    let v = dec.v_t.expect("requested V").transpose();
    let raw: Vec<f64> = dec.singular_values.iter().copied().collect();
    let order = descending_order(&raw);
    Svd {
        u: permute_columns(&u, &order),
        s: DVector::from_iterator(order.len(), order.iter().map(|&i| raw[i])),
        v: permute_columns(&v, &order),
    }
}

/// Solves `min ‖Z − M·Y‖_F²` s.t. `rank(M) ≤ d_prime`.
///
/// `ridge` is relative: `ridge · trace(YYᵀ) / d` is added to the diagonal of
/// `YYᵀ` before whitening. With `ridge == 0` a numerically singular `YYᵀ` is
/// reported as a conditioning error.
pub fn reduced_rank_regression(
    y: &DMatrix<f64>,
    z: &DMatrix<f64>,
    d_prime: usize,
    ridge: f64,
) -> Result<RrrSolution> {
    if y.ncols() != z.ncols() {
        return Err(Error::Shape(format!(
            "Y has {} samples but Z has {}",
            y.ncols(),
            z.ncols()
        )));
    }
    let gram = y * y.transpose();
    let cross = z * y.transpose();
    rrr_from_gram(&gram, &cross, d_prime, ridge)
}

/// Reduced-rank regression from sufficient statistics `YYᵀ` and `ZYᵀ`.
pub fn rrr_from_gram(
    gram: &DMatrix<f64>,
    cross: &DMatrix<f64>,
    d_prime: usize,
    ridge: f64,
) -> Result<RrrSolution> {
    let d = gram.nrows();
    if cross.ncols() != d {
        return Err(Error::Shape(format!(
            "ZYᵀ has {} columns, YYᵀ is {d}x{d}",
            cross.ncols()
        )));
    }
    if d_prime == 0 || d_prime > d.min(cross.nrows()) {
        return Err(Error::Input(format!(
            "rank {d_prime} outside 1..={}",
            d.min(cross.nrows())
        )));
    }
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::Input(format!("ridge must be a finite non-negative value, got {ridge}")));
    }
    let trace = gram.trace();
    if !trace.is_finite() {
        return Err(Error::Conditioning("non-finite regressor covariance".into()));
    }
    if trace <= 0.0 {
        // Regressors carry no variance: the best map is zero.
        return Ok(RrrSolution {
            m: DMatrix::zeros(cross.nrows(), d),
            rank: d_prime,
            u: DMatrix::zeros(cross.nrows(), d_prime),
            s: DVector::zeros(d_prime),
            v: DMatrix::zeros(d, d_prime),
        });
    }

    let mut g = gram.clone();
    let shift = ridge * trace / d as f64;
    for i in 0..d {
        g[(i, i)] += shift;
    }
    let eig = sym_eig(&g)?;
    let lmax = eig.values[0];
    let lmin = eig.values[d - 1];
    if ridge == 0.0 && lmin <= WHITEN_FLOOR * lmax {
        return Err(Error::Conditioning(format!(
            "YYᵀ is singular (eigenvalue ratio {:.3e}); use a positive ridge",
            lmin / lmax
        )));
    }
    let inv_sqrt = eig.values.map(|l| {
        if l > WHITEN_FLOOR * lmax {
            1.0 / l.sqrt()
        } else {
            0.0
        }
    });
    let whiten = &eig.vectors * DMatrix::from_diagonal(&inv_sqrt);
    let t = cross * &whiten;
    let dec = svd(&t);

    let u = dec.u.columns(0, d_prime).into_owned();
    let s = dec.s.rows(0, d_prime).into_owned();
    let v = &whiten * dec.v.columns(0, d_prime);
    let m = &u * DMatrix::from_diagonal(&s) * v.transpose();
    Ok(RrrSolution {
        m,
        rank: d_prime,
        u,
        s,
        v,
    })
}

/// `‖Z − M·Y‖_F²`.
pub fn regression_error(y: &DMatrix<f64>, z: &DMatrix<f64>, m: &DMatrix<f64>) -> f64 {
    (z - m * y).norm_squared()
}

/// Factors a rank-`d_prime` matrix as `M = P·Qᵀ` with `P = U·S^{1/2}` and
/// `Q = V·S^{1/2}`.
pub fn split_m(m: &DMatrix<f64>, d_prime: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let dec = svd(m);
    let n = dec.s.len();
    if d_prime == 0 || d_prime > n {
        return Err(Error::Input(format!("rank {d_prime} outside 1..={n}")));
    }
    let smax = dec.s[0];
    if d_prime < n && dec.s[d_prime] > RANK_TOL * smax.max(f64::MIN_POSITIVE) {
        return Err(Error::Input(format!(
            "matrix has effective rank above {d_prime} (σ[{d_prime}] / σ_max = {:.3e})",
            dec.s[d_prime] / smax
        )));
    }
    let root = DMatrix::from_diagonal(&dec.s.rows(0, d_prime).map(f64::sqrt));
    let p = dec.u.columns(0, d_prime) * &root;
    let q = dec.v.columns(0, d_prime) * &root;
    Ok((p, q))
}

/// Column mean of a `d × n` sample matrix.
pub fn column_mean(x: &DMatrix<f64>) -> DVector<f64> {
    if x.ncols() == 0 {
        return DVector::zeros(x.nrows());
    }
    x.column_sum() / x.ncols() as f64
}

/// Subtracts `mean` from every column.
pub fn centered(x: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    for mut col in out.column_iter_mut() {
        col -= mean;
    }
    out
}
