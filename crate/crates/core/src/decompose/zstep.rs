//! The elementwise auxiliary-variable subproblem
//!
//! ```text
//! min_z (r(y) − r(z))² + λ·(z − y′)²
//! ```

use crate::tensor::{relu, Activation};

#[inline]
fn objective(r: impl Fn(f64) -> f64, y: f64, y_prime: f64, lambda: f64, z: f64) -> f64 {
    let a = r(y) - r(z);
    let b = z - y_prime;
    a * a + lambda * b * b
}

/// Closed-form minimizer for ReLU.
///
/// The negative branch is `z₀ = min(0, y′)`, the non-negative branch
/// `z₁ = max(0, (λ·y′ + r(y)) / (λ + 1))`; the better of the two wins, with
/// ties going to `z₁`.
#[inline]
pub fn solve_z(y: f64, y_prime: f64, lambda: f64) -> f64 {
    let ry = relu(y);
    let z0 = y_prime.min(0.0);
    let z1 = ((lambda * y_prime + ry) / (lambda + 1.0)).max(0.0);
    if objective(relu, y, y_prime, lambda, z0) < objective(relu, y, y_prime, lambda, z1) {
        z0
    } else {
        z1
    }
}

/// Dispatches on the layer nonlinearity; the identity case is the weighted
/// mean of `y` and `y′`.
#[inline]
pub fn solve_z_for(activation: Activation, y: f64, y_prime: f64, lambda: f64) -> f64 {
    match activation {
        Activation::Relu => solve_z(y, y_prime, lambda),
        Activation::Identity => (y + lambda * y_prime) / (1.0 + lambda),
    }
}

const GRID: usize = 400;
const GOLDEN_STEPS: usize = 80;

/// Minimizes the subproblem for an arbitrary nonlinearity `r`.
///
/// Any minimizer satisfies `λ(z − y′)² ≤ (r(y) − r(y′))²`, which bounds the
/// search to `y′ ± |r(y) − r(y′)| / √λ`. That interval is scanned on a uniform
/// grid and the best cell is refined by golden-section search.
pub fn solve_z_with(r: impl Fn(f64) -> f64, y: f64, y_prime: f64, lambda: f64) -> f64 {
    let radius = (r(y) - r(y_prime)).abs() / lambda.sqrt();
    if radius == 0.0 || !radius.is_finite() {
        return y_prime;
    }
    let f = |z: f64| objective(&r, y, y_prime, lambda, z);
    let lo = y_prime - radius;
    let step = 2.0 * radius / GRID as f64;
    let mut best = y_prime;
    let mut best_val = f(y_prime);
    let mut best_i = GRID / 2;
    for i in 0..=GRID {
        let z = lo + step * i as f64;
        let v = f(z);
        if v < best_val {
            best_val = v;
            best = z;
            best_i = i;
        }
    }
    let (mut a, mut b) = (
        lo + step * best_i.saturating_sub(1) as f64,
        lo + step * (best_i + 1).min(GRID) as f64,
    );
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    for _ in 0..GOLDEN_STEPS {
        if f(c) < f(d) {
            b = d;
        } else {
            a = c;
        }
        c = b - inv_phi * (b - a);
        d = a + inv_phi * (b - a);
    }
    let refined = 0.5 * (a + b);
    if f(refined) <= best_val {
        refined
    } else {
        best
    }
}
