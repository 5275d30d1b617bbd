//! Quasi-Newton maximization and profile likelihoods.
//!
//! [`maximize`] runs BFGS on a dense inverse-Hessian approximation with a
//! backtracking line search. Every accepted step has a non-decreasing
//! objective. Convergence is declared when the gradient sup-norm drops to
//! `gtol_rel · (1 + |f|)` (or an absolute `gtol` if one is set).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::engine::ParamVector;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptOptions {
    /// Relative gradient tolerance; the stopping threshold is `gtol_rel · (1 + |f|)`.
    pub gtol_rel: f64,
    /// Absolute gradient tolerance overriding `gtol_rel` when set.
    pub gtol_abs: Option<f64>,
    pub max_iter: usize,
    pub keep_trace: bool,
}

impl Default for OptOptions {
    fn default() -> Self {
        Self {
            gtol_rel: 1e-8,
            gtol_abs: None,
            max_iter: 500,
            keep_trace: false,
        }
    }
}

impl OptOptions {
    pub fn tolerance(&self, objective: f64) -> f64 {
        self.gtol_abs
            .unwrap_or(self.gtol_rel * (1.0 + objective.abs()))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TracePoint {
    pub objective: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptResult {
    pub theta_hat: ParamVector,
    pub objective: f64,
    /// Sup-norm of the gradient at `theta_hat`.
    pub grad_norm: f64,
    /// Threshold `grad_norm` was tested against.
    pub gtol: f64,
    pub iterations: usize,
    pub converged: bool,
    pub gradient: Vec<f64>,
    pub trace: Option<Vec<TracePoint>>,
}

fn sup_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

fn evaluate<F>(objective: &mut F, theta: &[f64]) -> Result<(f64, DVector<f64>)>
where
    F: FnMut(&[f64]) -> Result<(f64, DVector<f64>)>,
{
    let (f, g) = objective(theta)?;
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteObjective {
            theta: theta.to_vec(),
        });
    }
    Ok((f, g))
}

/// Maximizes `objective`, which returns the value and gradient at `θ`.
///
/// Non-finite values (or errors) at trial points during the line search
/// shrink the step; only a non-finite value at the start is fatal.
/// Exhausting `max_iter` returns `converged = false`.
pub fn maximize<F>(mut objective: F, theta0: &ParamVector, opts: &OptOptions) -> Result<OptResult>
where
    F: FnMut(&[f64]) -> Result<(f64, DVector<f64>)>,
{
    const ARMIJO: f64 = 1e-4;
    const MAX_HALVINGS: usize = 60;

    let d = theta0.len();
    let mut x = DVector::from_column_slice(theta0.values());
    let (mut f, mut g) = evaluate(&mut objective, x.as_slice())?;
    // inverse of the negative Hessian
    let mut h = DMatrix::<f64>::identity(d, d);
    let mut h_is_identity = true;
    let mut trace = opts.keep_trace.then(Vec::new);
    let mut iterations = 0;
    let mut converged = false;

    if let Some(t) = trace.as_mut() {
        t.push(TracePoint {
            objective: f,
            grad_norm: sup_norm(&g),
        });
    }

    while iterations < opts.max_iter {
        let gnorm = sup_norm(&g);
        if gnorm <= opts.tolerance(f) {
            converged = true;
            break;
        }
        let mut dir = &h * &g;
        let mut slope = g.dot(&dir);
        if slope <= 0.0 || !slope.is_finite() {
            h = DMatrix::identity(d, d);
            h_is_identity = true;
            dir = g.clone();
            slope = g.dot(&dir);
        }
        // keep identity-scaled steps bounded
        let mut alpha = if h_is_identity {
            (1.0 / sup_norm(&dir)).min(1.0)
        } else {
            1.0
        };

        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let trial = &x + alpha * &dir;
            if let Ok((ft, gt)) = evaluate(&mut objective, trial.as_slice()) {
                let sufficient = ft >= f + ARMIJO * alpha * slope;
                // near the optimum rounding can mask the Armijo gain
                let plateau = ft >= f && sup_norm(&gt) < gnorm;
                if sufficient || plateau {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            alpha *= 0.5;
        }

        let Some((x_new, f_new, g_new)) = accepted else {
            if !h_is_identity {
                h = DMatrix::identity(d, d);
                h_is_identity = true;
                continue;
            }
            break;
        };

        let s = &x_new - &x;
        // gradient change of the minimized function −f
        let y = &g - &g_new;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() && sy > 0.0 {
            if h_is_identity {
                h = DMatrix::identity(d, d) * (sy / y.dot(&y));
                h_is_identity = false;
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H ← H − ρ(H y sᵀ + s yᵀ H) + (ρ² yᵀHy + ρ) s sᵀ
            h -= rho * (&hy * s.transpose() + &s * hy.transpose());
            h += (rho * rho * yhy + rho) * (&s * s.transpose());
        }

        x = x_new;
        f = f_new;
        g = g_new;
        iterations += 1;
        if let Some(t) = trace.as_mut() {
            t.push(TracePoint {
                objective: f,
                grad_norm: sup_norm(&g),
            });
        }
    }

    let grad_norm = sup_norm(&g);
    let gtol = opts.tolerance(f);
    if !converged && grad_norm <= gtol {
        converged = true;
    }
    Ok(OptResult {
        theta_hat: theta0.with_values(x.as_slice().to_vec())?,
        objective: f,
        grad_norm,
        gtol,
        iterations,
        converged,
        gradient: g.as_slice().to_vec(),
        trace,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProfilePoint {
    pub value: f64,
    pub loglik: f64,
    pub theta: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// Profiles the objective over coordinate `coord`.
///
/// For each grid value the coordinate is pinned and the remaining
/// coordinates are maximized, starting from the previous grid point's
/// maximizer (the first solve starts from `theta0`).
pub fn profile<F>(
    mut objective: F,
    theta0: &ParamVector,
    coord: usize,
    grid: &[f64],
    opts: &OptOptions,
) -> Result<Vec<ProfilePoint>>
where
    F: FnMut(&[f64]) -> Result<(f64, DVector<f64>)>,
{
    let d = theta0.len();
    if grid.is_empty() {
        return Err(Error::InvalidArgument("profile grid is empty".into()));
    }
    if coord >= d {
        return Err(Error::InvalidArgument(format!(
            "profile coordinate {coord} out of range for dimension {d}"
        )));
    }
    let free_layout = crate::engine::ParamLayout::new([("free", d - 1)]);
    let mut free: Vec<f64> = theta0
        .values()
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != coord)
        .map(|(_, v)| *v)
        .collect();
    let embed = |free: &[f64], value: f64| -> Vec<f64> {
        let mut full = Vec::with_capacity(d);
        full.extend_from_slice(&free[..coord]);
        full.push(value);
        full.extend_from_slice(&free[coord..]);
        full
    };

    let mut out = Vec::with_capacity(grid.len());
    for &value in grid {
        let tag = |e: Error| Error::Profile {
            value,
            source: Box::new(e),
        };
        if d == 1 {
            let (f, _) = evaluate(&mut objective, &[value]).map_err(tag)?;
            out.push(ProfilePoint {
                value,
                loglik: f,
                theta: vec![value],
                converged: true,
                iterations: 0,
            });
            continue;
        }
        let start = ParamVector::new(free.clone(), free_layout.clone())?;
        let res = maximize(
            |z: &[f64]| {
                let (f, g) = objective(&embed(z, value))?;
                let gz: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .filter(|(k, _)| *k != coord)
                    .map(|(_, v)| *v)
                    .collect();
                Ok((f, DVector::from_vec(gz)))
            },
            &start,
            opts,
        )
        .map_err(tag)?;
        free = res.theta_hat.values().to_vec();
        out.push(ProfilePoint {
            value,
            loglik: res.objective,
            theta: embed(&free, value),
            converged: res.converged,
            iterations: res.iterations,
        });
    }
    Ok(out)
}
