//! Sparse orthonormal bases: minimize `Σ|X| + λ‖YᵀX‖²_F` over matrices with
//! orthonormal columns, by Cayley-transform curvilinear search on a
//! Huber-smoothed objective.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::StiefelL1Config;
use crate::error::{Error, Result};
use crate::linalg::{max_abs, orthonormal_complement, symmetric_orthonormalize};

/// Huber width at the start of continuation; the final width is 1e-8.
const MU_START: f64 = 1e-2;
const MU_END: f64 = 1e-8;
const ARMIJO: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerOutcome {
    #[serde(with = "crate::serde_util::matrix")]
    pub x: DMatrix<f64>,
    pub objective: f64,
    pub initial_objective: f64,
    /// True objective of every accepted iterate, starting with the initialization.
    pub trace: Vec<f64>,
    pub iterations: usize,
    /// Continuation reached the final smoothing width before the iteration cap.
    pub converged: bool,
    /// The optimized basis was worse than the start and was discarded.
    pub reverted: bool,
}

/// `Σ|X_ij| + λ ‖YᵀX‖²_F`.
pub fn l1_objective(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> f64 {
    let l1: f64 = x.iter().map(|v| v.abs()).sum();
    if y.ncols() == 0 {
        return l1;
    }
    l1 + lambda * (y.transpose() * x).norm_squared()
}

fn smoothed(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64, mu: f64) -> (f64, DMatrix<f64>) {
    let mut f = 0.0;
    let mut g = x.map(|t| {
        let a = t.abs();
        if a <= mu {
            f += t * t / (2.0 * mu);
            t / mu
        } else {
            f += a - mu / 2.0;
            t.signum()
        }
    });
    if y.ncols() > 0 {
        let ytx = y.transpose() * x;
        f += lambda * ytx.norm_squared();
        g += y * ytx * (2.0 * lambda);
    }
    (f, g)
}

fn cayley(x: &DMatrix<f64>, w: &DMatrix<f64>, tau: f64) -> Option<DMatrix<f64>> {
    let n = x.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let lhs = &eye + w * (tau / 2.0);
    let rhs = (&eye - w * (tau / 2.0)) * x;
    lhs.lu().solve(&rhs)
}

/// Sparse orthonormal `n × count` basis that is (softly) orthogonal to the
/// orthonormal columns of `fixed`.
pub fn regularized_orthogonal_basis(
    fixed: &DMatrix<f64>,
    count: usize,
    cfg: &StiefelL1Config,
) -> Result<OptimizerOutcome> {
    let n = fixed.nrows();
    let k = fixed.ncols();
    if k + count > n {
        return Err(Error::InfeasibleInit(format!("{k} fixed + {count} free vectors exceed dimension {n}")));
    }
    if k > 0 && max_abs(&(fixed.transpose() * fixed - DMatrix::identity(k, k))) > 1e-8 {
        return Err(Error::InfeasibleInit("fixed vectors are not orthonormal".into()));
    }
    let lambda = cfg.lambda_orth;
    let x0 = orthonormal_complement(fixed, n)?.columns(0, count).into_owned();
    let f0 = l1_objective(&x0, fixed, lambda);
    let mut out = OptimizerOutcome {
        x: x0.clone(),
        objective: f0,
        initial_objective: f0,
        trace: vec![f0],
        iterations: 0,
        converged: true,
        reverted: false,
    };
    if count == 0 {
        return Ok(out);
    }

    let mut x = x0.clone();
    let mut f_true = f0;
    let mut mu = MU_START;
    let mut tau = 0.1;
    let mut converged = false;
    let mut iters = 0;
    while iters < cfg.max_iters {
        iters += 1;
        let (f_mu, g) = smoothed(&x, fixed, lambda, mu);
        let w = &g * x.transpose() - &x * g.transpose();
        let wn2 = w.norm_squared();
        let mut accepted = None;
        if wn2.sqrt() > 1e-12 {
            let mut t = tau;
            while t > 1e-14 {
                if let Some(xn) = cayley(&x, &w, t) {
                    let (fn_mu, _) = smoothed(&xn, fixed, lambda, mu);
                    let fn_true = l1_objective(&xn, fixed, lambda);
                    if fn_mu <= f_mu - ARMIJO * t * 0.5 * wn2 && fn_true <= f_true {
                        accepted = Some((xn, fn_true, t));
                        break;
                    }
                }
                t *= 0.5;
            }
        }
        let stalled = match accepted {
            Some((xn, fn_true, t)) => {
                let step = (&xn - &x).norm();
                x = xn;
                f_true = fn_true;
                out.trace.push(f_true);
                tau = (2.0 * t).min(10.0);
                step < cfg.step_tolerance
            }
            None => true,
        };
        if stalled {
            if mu <= MU_END {
                converged = true;
                break;
            }
            mu = (mu * 0.1).max(MU_END);
            tau = 0.1;
        }
    }
    out.iterations = iters;
    out.converged = converged;

    // exact feasibility: project out the fixed block and re-orthonormalize
    let projected = if k > 0 { &x - fixed * (fixed.transpose() * &x) } else { x.clone() };
    let finished = symmetric_orthonormalize(&projected);
    match finished {
        Some(xf) if l1_objective(&xf, fixed, lambda) <= f0 => {
            out.objective = l1_objective(&xf, fixed, lambda);
            out.x = xf;
        }
        _ => {
            out.reverted = true;
        }
    }
    Ok(out)
}
