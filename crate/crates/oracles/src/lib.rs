//! Brute-force reference implementations used by the test suites.
//!
//! Everything here is deliberately naive: plain loops over row-major
//! `Vec<f64>` matrices, no shared code with the library under test, and no
//! attention to speed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Mat::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.data[r * cols + c] = f(r, c);
            }
        }
        m
    }

    pub fn identity(n: usize) -> Self {
        Mat::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn mul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows);
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for j in 0..other.cols {
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += self.get(i, k) * other.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|a| a * s).collect(),
        }
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// `A = U·diag(s)·Vᵀ` by one-sided Jacobi rotations; singular values
/// descending. `U` is `m×n`, `V` is `n×n` (thin, for `m ≥ n`; wide inputs are
/// handled by transposing).
pub fn jacobi_svd(a: &Mat) -> (Mat, Vec<f64>, Mat) {
    if a.rows < a.cols {
        let (u, s, v) = jacobi_svd(&a.transpose());
        return (v, s, u);
    }
    let (m, n) = (a.rows, a.cols);
    let mut u = a.clone();
    let mut v = Mat::identity(n);
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..m {
                    let (x, y) = (u.get(i, p), u.get(i, q));
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma == 0.0 {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt().max(f64::MIN_POSITIVE));
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let (x, y) = (u.get(i, p), u.get(i, q));
                    u.set(i, p, c * x - s * y);
                    u.set(i, q, s * x + c * y);
                }
                for i in 0..n {
                    let (x, y) = (v.get(i, p), v.get(i, q));
                    v.set(i, p, c * x - s * y);
                    v.set(i, q, s * x + c * y);
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    let mut sv: Vec<(f64, usize)> = (0..n)
        .map(|j| ((0..m).map(|i| u.get(i, j).powi(2)).sum::<f64>().sqrt(), j))
        .collect();
    sv.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut uu = Mat::zeros(m, n);
    let mut vv = Mat::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    for (k, &(sigma, j)) in sv.iter().enumerate() {
        s.push(sigma);
        for i in 0..m {
            uu.set(i, k, if sigma > 0.0 { u.get(i, j) / sigma } else { 0.0 });
        }
        for i in 0..n {
            vv.set(i, k, v.get(i, j));
        }
    }
    (uu, s, vv)
}

/// Best rank-`r` approximation of `a` (Eckart–Young via [`jacobi_svd`]).
pub fn truncate_rank(a: &Mat, r: usize) -> Mat {
    let (u, s, v) = jacobi_svd(a);
    Mat::from_fn(a.rows, a.cols, |i, j| (0..r.min(s.len())).map(|k| u.get(i, k) * s[k] * v.get(j, k)).sum())
}

/// `‖Z − M·Y‖²_F`.
pub fn rrr_objective(y: &Mat, z: &Mat, m: &Mat) -> f64 {
    z.sub(&m.mul(y)).frobenius_sq()
}

/// Minimizes `‖Z − M·Y‖²_F` over rank-`d′` matrices `M` by projected
/// gradient descent from `starts` starting points (the zero matrix plus
/// random ones), returning the best objective found.
pub fn pgd_rrr_oracle(y: &Mat, z: &Mat, d_prime: usize, starts: usize, seed: u64) -> f64 {
    let g = y.mul(&y.transpose());
    let c = z.mul(&y.transpose());
    // step 1/L with L = 2·λmax(YYᵀ), λmax by power iteration
    let mut x = vec![1.0; g.rows];
    let mut lambda = 0.0;
    for _ in 0..500 {
        let gx: Vec<f64> = (0..g.rows).map(|i| (0..g.cols).map(|j| g.get(i, j) * x[j]).sum()).collect();
        let norm = gx.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        lambda = norm / x.iter().map(|v| v * v).sum::<f64>().sqrt();
        x = gx.iter().map(|v| v / norm).collect();
    }
    if lambda == 0.0 {
        return z.frobenius_sq();
    }
    let step = 1.0 / (2.0 * lambda * 1.01);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = f64::INFINITY;
    for s in 0..starts.max(1) {
        let mut m = if s == 0 {
            Mat::zeros(z.rows, y.rows)
        } else {
            truncate_rank(&Mat::from_fn(z.rows, y.rows, |_, _| rng.random_range(-1.0..1.0)), d_prime)
        };
        let mut prev = rrr_objective(y, z, &m);
        for _ in 0..20_000 {
            // ∇ = 2(M·G − C)
            let grad = m.mul(&g).sub(&c).scale(2.0);
            m = truncate_rank(&m.sub(&grad.scale(step)), d_prime);
            let obj = rrr_objective(y, z, &m);
            if (prev - obj).abs() <= 1e-15 * prev.max(1e-300) {
                prev = obj;
                break;
            }
            prev = obj;
        }
        best = best.min(prev);
    }
    best
}

/// Objective of the elementwise ReLU subproblem.
pub fn z_objective(y: f64, y_prime: f64, lambda: f64, z: f64) -> f64 {
    (y.max(0.0) - z.max(0.0)).powi(2) + lambda * (z - y_prime).powi(2)
}

/// Dense grid search (step 1e-4 over [−10, 10]) for the ReLU subproblem.
/// Returns `(argmin, objective)`; the first grid point wins ties.
pub fn grid_z_oracle(y: f64, y_prime: f64, lambda: f64) -> (f64, f64) {
    let steps = 200_000;
    let mut best = (f64::NAN, f64::INFINITY);
    for i in 0..=steps {
        let z = -10.0 + 20.0 * i as f64 / steps as f64;
        let v = z_objective(y, y_prime, lambda, z);
        if v < best.1 {
            best = (z, v);
        }
    }
    best
}

/// One layer for the rank oracle: descending eigenvalues and full-rank cost.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub eigenvalues: Vec<f64>,
    pub complexity: f64,
}

/// Enumerates every rank tuple with `1 ≤ d′_l ≤ d_l` and
/// `Σ (d′_l/d_l)·C_l ≤ budget`, returning the best `(ranks, log E)`, or `None`
/// if nothing is feasible.
pub fn exhaustive_rank_oracle(spectra: &[Spectrum], budget: f64) -> Option<(Vec<usize>, f64)> {
    fn rec(
        spectra: &[Spectrum],
        budget: f64,
        l: usize,
        ranks: &mut Vec<usize>,
        cost: f64,
        log_e: f64,
        best: &mut Option<(Vec<usize>, f64)>,
    ) {
        if l == spectra.len() {
            if cost <= budget && best.as_ref().is_none_or(|b| log_e > b.1) {
                *best = Some((ranks.clone(), log_e));
            }
            return;
        }
        let s = &spectra[l];
        let d = s.eigenvalues.len();
        for r in 1..=d {
            let energy: f64 = s.eigenvalues[..r].iter().sum();
            ranks.push(r);
            rec(
                spectra,
                budget,
                l + 1,
                ranks,
                cost + r as f64 / d as f64 * s.complexity,
                log_e + energy.ln(),
                best,
            );
            ranks.pop();
        }
    }
    let mut best = None;
    rec(spectra, budget, 0, &mut Vec::new(), 0.0, 0.0, &mut best);
    best
}

/// Geometry of a convolution for [`naive_conv`].
#[derive(Debug, Clone, Copy)]
pub struct ConvGeometry {
    pub kh: usize,
    pub kw: usize,
    pub c: usize,
    pub d: usize,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub relu: bool,
}

impl ConvGeometry {
    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad.0 - self.kh) / self.stride.0 + 1,
            (w + 2 * self.pad.1 - self.kw) / self.stride.1 + 1,
        )
    }
}

/// Direct convolution in f64. `input` is `c×h×w` row-major, `weights` holds
/// `d` rows of `c·kh·kw` taps (channel-major, then row, then column) followed
/// by the bias.
pub fn naive_conv(input: &[f32], h: usize, w: usize, weights: &[f32], g: &ConvGeometry) -> Vec<f64> {
    assert_eq!(input.len(), g.c * h * w);
    assert_eq!(weights.len(), g.d * (g.c * g.kh * g.kw + 1));
    let (ho, wo) = g.output_hw(h, w);
    let row = g.c * g.kh * g.kw + 1;
    let mut out = vec![0.0; g.d * ho * wo];
    for o in 0..g.d {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = weights[o * row + row - 1] as f64;
                for ch in 0..g.c {
                    for i in 0..g.kh {
                        for j in 0..g.kw {
                            let iy = (oy * g.stride.0 + i) as isize - g.pad.0 as isize;
                            let ix = (ox * g.stride.1 + j) as isize - g.pad.1 as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let x = input[ch * h * w + iy as usize * w + ix as usize] as f64;
                            acc += weights[o * row + (ch * g.kh + i) * g.kw + j] as f64 * x;
                        }
                    }
                }
                out[o * ho * wo + oy * wo + ox] = if g.relu { acc.max(0.0) } else { acc };
            }
        }
    }
    out
}

/// Multiplies of a `kh×kw`, `c → d` convolution producing `ho×wo` outputs.
pub fn conv_count(kh: usize, kw: usize, c: usize, d: usize, ho: usize, wo: usize) -> u64 {
    (d * kh * kw * c * ho * wo) as u64
}

/// `(k×k, d′)` followed by `(1×1, d)` at `hw` output positions:
/// `d′k²c·HW + dd′·HW`.
pub fn pair_count(k: usize, c: usize, d: usize, d_prime: usize, hw: usize) -> u64 {
    ((d_prime * k * k * c + d * d_prime) * hw) as u64
}

/// `(k×1, d″)`, `(1×k, d′)`, `(1×1, d)` with every stage at `hw` positions:
/// `d″kc·HW + d′kd″·HW + dd′·HW`.
pub fn triple_count(k: usize, c: usize, d: usize, d_prime: usize, d_dprime: usize, hw: usize) -> u64 {
    ((d_dprime * k * c + d_prime * k * d_dprime + d * d_prime) * hw) as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (m, n) in [(5, 3), (3, 5), (4, 4)] {
            let a = Mat::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
            let (u, s, v) = jacobi_svd(&a);
            let back = Mat::from_fn(m, n, |i, j| (0..s.len()).map(|k| u.get(i, k) * s[k] * v.get(j, k)).sum());
            assert!(back.sub(&a).frobenius_sq() < 1e-24);
            assert!(s.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn grid_oracle_examples() {
        assert!((grid_z_oracle(-1.0, -2.0, 0.5).0 + 2.0).abs() < 1e-9);
        assert!((grid_z_oracle(3.0, 3.0, 1.0).0 - 3.0).abs() < 1e-9);
        assert!((grid_z_oracle(2.0, -1.0, 1.0).0 + 1.0).abs() < 1e-9);
    }

    #[test]
    fn pgd_full_rank_is_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = Mat::from_fn(3, 20, |_, _| rng.random_range(-1.0..1.0));
        let m = Mat::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
        let z = m.mul(&y);
        assert!(pgd_rrr_oracle(&y, &z, 3, 1, 0) < 1e-12);
    }

    #[test]
    fn exhaustive_single_layer() {
        let s = [Spectrum { eigenvalues: vec![4.0, 2.0, 1.0, 1.0], complexity: 8.0 }];
        let (ranks, log_e) = exhaustive_rank_oracle(&s, 4.0).unwrap();
        assert_eq!(ranks, vec![2]);
        assert!((log_e - 6f64.ln()).abs() < 1e-15);
        assert!(exhaustive_rank_oracle(&s, 1.0).is_none());
    }

    #[test]
    fn naive_conv_identity_and_scaling() {
        let input: Vec<f32> = (0..12).map(|v| v as f32).collect();
        let g = ConvGeometry { kh: 1, kw: 1, c: 1, d: 1, stride: (1, 1), pad: (0, 0), relu: false };
        assert_eq!(naive_conv(&input, 3, 4, &[1.0, 0.0], &g), input.iter().map(|&v| v as f64).collect::<Vec<_>>());
        assert_eq!(naive_conv(&input, 3, 4, &[2.0, 0.0], &g)[5], 10.0);
    }

    #[test]
    fn count_formulas() {
        assert_eq!(conv_count(3, 3, 4, 8, 5, 5), 8 * 9 * 4 * 25);
        assert_eq!(pair_count(3, 4, 8, 2, 25), (2 * 36 + 16) * 25);
        assert_eq!(triple_count(3, 4, 8, 2, 3, 25), (36 + 18 + 16) * 25);
    }
}
