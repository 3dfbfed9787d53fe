use nalgebra::{DMatrix, DVector};

use super::zstep::solve_z_for;
use super::{Decomposition, IterationRecord, SolverKind, SolverOptions};
use crate::error::{Error, Result};
use crate::linalg::{centered, column_mean, rrr_from_gram, split_m, sym_eig};
use crate::sampler::SampleSet;
use crate::tensor::{Activation, ConvLayer};

fn check_rank(d_prime: usize, d: usize) -> Result<()> {
    if d_prime == 0 || d_prime > d {
        return Err(Error::Input(format!("rank d' = {d_prime} must lie in 1..={d}")));
    }
    Ok(())
}

/// PCA solution: `P = Q = U_{d′}` from the centered response Gram matrix and
/// `b = ȳ − M·ȳ`.
pub fn solve_linear(samples: &SampleSet, d_prime: usize) -> Result<Decomposition> {
    let d = samples.response_dim();
    check_rank(d_prime, d)?;
    if samples.is_empty() {
        return Err(Error::Input("no samples".into()));
    }
    let mean = column_mean(&samples.y);
    let eig = sym_eig(&samples.centered_gram())?;
    let u = eig.vectors.columns(0, d_prime).into_owned();
    let b = &mean - &u * (u.transpose() * &mean);
    Ok(Decomposition {
        layer_id: samples.layer_id.clone(),
        d_prime,
        p: u.clone(),
        q: u,
        b,
        solver: SolverKind::Linear,
        objective_trace: Vec::new(),
        iterations: Vec::new(),
    })
}

/// Alternating solver on the layer's own responses (targets and regressors
/// are both `Y = W·X`).
pub fn solve_nonlinear(
    samples: &SampleSet,
    d_prime: usize,
    opts: &SolverOptions,
) -> Result<Decomposition> {
    let mut dec = solve_regression(&samples.layer_id, &samples.y, None, d_prime, opts)?;
    dec.solver = SolverKind::Nonlinear;
    Ok(dec)
}

/// Alternating solver with true responses `W·x` as targets and responses to
/// the approximated inputs `W·x̂` as regressors.
pub fn solve_asymmetric(
    samples: &SampleSet,
    layer: &ConvLayer,
    d_prime: usize,
    opts: &SolverOptions,
) -> Result<Decomposition> {
    let y_hat = samples.approx_responses(layer)?;
    let mut dec = solve_regression(&samples.layer_id, &samples.y, Some(&y_hat), d_prime, opts)?;
    dec.solver = SolverKind::Asymmetric;
    Ok(dec)
}

/// Error after the nonlinearity, `Σ ‖r(t) − r(M·y + b)‖²`, where `t` are the
/// target pre-activations and `y` the regressors.
pub fn nonlinear_error(
    targets: &DMatrix<f64>,
    regressors: &DMatrix<f64>,
    activation: Activation,
    dec: &Decomposition,
) -> f64 {
    let pred = dec.apply(regressors);
    targets
        .iter()
        .zip(pred.iter())
        .map(|(&t, &p)| {
            let e = activation.apply(t) - activation.apply(p);
            e * e
        })
        .sum()
}

/// Core of the nonlinear and asymmetric solvers.
///
/// Minimizes `Σ ‖r(t_i) − r(z_i)‖² + λ‖z_i − (M·y_i + b)‖²` subject to
/// `rank(M) ≤ d′` by exact alternation: the `(M, b)` step is a reduced-rank
/// regression of centered `z` on centered `y` with `b = z̄ − M·ȳ`, the `z` step
/// is elementwise. `regressors = None` means the regressors are the targets.
/// The starting point is the linear (PCA, or rank-constrained least squares
/// in the asymmetric case) solution.
pub fn solve_regression(
    layer_id: &str,
    targets: &DMatrix<f64>,
    regressors: Option<&DMatrix<f64>>,
    d_prime: usize,
    opts: &SolverOptions,
) -> Result<Decomposition> {
    opts.schedule.validate()?;
    let d = targets.nrows();
    check_rank(d_prime, d)?;
    let n = targets.ncols();
    if n == 0 {
        return Err(Error::Input("no samples".into()));
    }
    let regs = regressors.unwrap_or(targets);
    if regs.shape() != targets.shape() {
        return Err(Error::Shape(format!(
            "regressors {:?} do not match targets {:?}",
            regs.shape(),
            targets.shape()
        )));
    }
    let act = opts.activation;

    let reg_mean = column_mean(regs);
    let reg_c = centered(regs, &reg_mean);
    let gram = &reg_c * reg_c.transpose();
    let fitted_targets = targets.map(|v| act.apply(v));

    let (mut m, mut b) = if regressors.is_none() {
        let eig = sym_eig(&gram)?;
        let u = eig.vectors.columns(0, d_prime).into_owned();
        let m = &u * u.transpose();
        let b = &reg_mean - &m * &reg_mean;
        (m, b)
    } else {
        let t_mean = column_mean(targets);
        let cross = centered(targets, &t_mean) * reg_c.transpose();
        let m = rrr_from_gram(&gram, &cross, d_prime, opts.ridge)?.m;
        let b = &t_mean - &m * &reg_mean;
        (m, b)
    };

    let predict = |m: &DMatrix<f64>, b: &DVector<f64>| {
        let mut p = m * regs;
        for mut col in p.column_iter_mut() {
            col += b;
        }
        p
    };
    let objective = |z: &DMatrix<f64>, pred: &DMatrix<f64>, lambda: f64| -> f64 {
        let mut fit = 0.0;
        let mut pen = 0.0;
        for ((&rt, &zv), &pv) in fitted_targets.iter().zip(z.iter()).zip(pred.iter()) {
            let e = rt - act.apply(zv);
            fit += e * e;
            let g = zv - pv;
            pen += g * g;
        }
        fit + lambda * pen
    };

    let mut pred = predict(&m, &b);
    let mut z = DMatrix::<f64>::zeros(d, n);
    let mut have_z = false;
    let mut trace = Vec::with_capacity(opts.schedule.total_iterations());
    let mut records = Vec::with_capacity(opts.schedule.total_iterations());

    for (stage_idx, stage) in opts.schedule.stages.iter().enumerate() {
        let lambda = stage.lambda;
        for _ in 0..stage.iterations {
            let before = have_z.then(|| objective(&z, &pred, lambda));

            for ((zv, &t), &p) in z.iter_mut().zip(targets.iter()).zip(pred.iter()) {
                *zv = solve_z_for(act, t, p, lambda);
            }
            have_z = true;
            let after_z = objective(&z, &pred, lambda);

            let z_mean = column_mean(&z);
            let cross = centered(&z, &z_mean) * reg_c.transpose();
            m = rrr_from_gram(&gram, &cross, d_prime, opts.ridge)?.m;
            b = &z_mean - &m * &reg_mean;
            pred = predict(&m, &b);
            let after_mb = objective(&z, &pred, lambda);

            trace.push(after_mb);
            records.push(IterationRecord {
                stage: stage_idx,
                lambda,
                before,
                after_z,
                after_mb,
            });
            if let (Some(tol), Some(prev)) = (opts.early_exit, before) {
                if (prev - after_mb).abs() <= tol * prev.abs().max(f64::MIN_POSITIVE) {
                    break;
                }
            }
        }
    }

    let (p, q) = split_m(&m, d_prime)?;
    Ok(Decomposition {
        layer_id: layer_id.to_string(),
        d_prime,
        p,
        q,
        b,
        solver: if regressors.is_some() {
            SolverKind::Asymmetric
        } else {
            SolverKind::Nonlinear
        },
        objective_trace: trace,
        iterations: records,
    })
}
