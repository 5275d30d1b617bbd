//! Simulation experiments on GLMMs.
//!
//! All randomness is derived from one master seed: replicate `r` simulates
//! its data from `derive_seed(seed, DATA, r)` and its Monte Carlo sample
//! from `derive_seed(seed, MONTE_CARLO, r)`. Replicates run in parallel and
//! are merged in index order, so results are bitwise reproducible.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{self, FreshSamples, ObservedData, ParamVector, SampleSource};
use crate::error::{Error, Result};
use crate::glmm::{self, Glmm, GlmmDesign, GlmmParams};
use crate::infer::{self, Ellipsoid, InferenceReport, DEFAULT_CONDITION_CAP};
use crate::optim::{self, OptOptions};
use crate::oracle::{self, QuadratureRule};
use crate::rng::{derive_seed, label};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EllipseMode {
    /// `J⁻¹(J/n + W/m)J⁻¹` from the exact oracle at the truth (assumes `V = J`).
    ExactTheory,
    /// Sandwich plug-ins at each replicate's estimate.
    PlugIn,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub index: usize,
    pub data_seed: u64,
    pub mc_seed: u64,
    pub theta_hat: Vec<f64>,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    /// `None` for invalid replicates.
    pub covered: Option<bool>,
    pub error: Option<String>,
}

impl ReplicateOutcome {
    pub fn is_valid(&self) -> bool {
        self.covered.is_some()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CoverageResult {
    pub replicates: usize,
    pub covered: usize,
    pub invalid: usize,
    pub level: f64,
    pub ellipse_used: EllipseMode,
    pub n: usize,
    pub m: usize,
    pub seed: u64,
    pub truth: Vec<f64>,
    pub parameter_names: Vec<String>,
    /// `θ̂` per replicate, in replicate order (δ canonicalized to `|δ|`).
    pub estimates: Vec<Vec<f64>>,
    /// Covariance of the exact-theory ellipse, when used.
    pub exact_vcov: Option<DMatrix<f64>>,
    pub outcomes: Vec<ReplicateOutcome>,
}

/// Thin wrapper over [`glmm::simulate_y`].
pub fn generate_dataset(design: &GlmmDesign, truth: &GlmmParams, n: usize, seed: u64) -> Result<ObservedData<Vec<u8>>> {
    glmm::simulate_y(design, truth, n, seed)
}

/// Fits the MCMLE for one dataset and sample.
///
/// The result is the maximizer of this sample's Monte Carlo log likelihood,
/// so δ may come out negative; see [`GlmmDesign::canonicalize`] for how to
/// report it.
pub fn fit_mcmle<S: SampleSource + ?Sized>(
    model: &Glmm,
    data: &ObservedData<Vec<u8>>,
    sample: &S,
    start: &[f64],
    opts: &OptOptions,
) -> Result<optim::OptResult> {
    let theta0 = ParamVector::new(start.to_vec(), model.design().layout())?;
    optim::maximize(
        |t: &[f64]| engine::mc_value_and_score(model, t, data, sample),
        &theta0,
        opts,
    )
}

/// Repeatedly simulates data at `truth`, fits the MCMLE with a fresh Monte
/// Carlo sample, and checks whether the truth lies in the `level`
/// confidence ellipsoid centered at the estimate.
#[allow(clippy::too_many_arguments)]
pub fn coverage_study(
    design: &GlmmDesign,
    truth: &GlmmParams,
    n: usize,
    m: usize,
    replicates: usize,
    level: f64,
    seed: u64,
    mode: EllipseMode,
    opts: &OptOptions,
) -> Result<CoverageResult> {
    if replicates == 0 {
        return Err(Error::InvalidArgument("coverage study needs replicates >= 1".into()));
    }
    let truth_theta = truth.to_theta();
    GlmmParams::from_theta(design, &truth_theta)?;
    infer::chi_square_quantile(design.theta_dim(), level)?;
    let model = Glmm::new(design.clone());

    let exact_vcov = match mode {
        EllipseMode::ExactTheory => {
            let info = oracle::exact_jvw(design, truth, &QuadratureRule::default_rule())?;
            Some(infer::sandwich_vcov(&info.j, &info.j, &info.w, n, Some(m), DEFAULT_CONDITION_CAP)?)
        }
        EllipseMode::PlugIn => None,
    };

    let outcomes: Vec<ReplicateOutcome> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let data_seed = derive_seed(seed, label::DATA, r as u64);
            let mc_seed = derive_seed(seed, label::MONTE_CARLO, r as u64);
            let mut outcome = ReplicateOutcome {
                index: r,
                data_seed,
                mc_seed,
                theta_hat: Vec::new(),
                loglik: f64::NAN,
                converged: false,
                iterations: 0,
                covered: None,
                error: None,
            };
            let run = || -> Result<(optim::OptResult, Option<bool>)> {
                let data = generate_dataset(design, truth, n, data_seed)?;
                let sample = engine::draw_sample(&model, m, mc_seed)?;
                let fit = fit_mcmle(&model, &data, &sample, &design.default_start(), opts)?;
                if !fit.converged {
                    return Ok((fit, None));
                }
                let signs = design.reflection(fit.theta_hat.values());
                let vcov = match &exact_vcov {
                    Some(v) => v.clone(),
                    None => {
                        let rep = InferenceReport::compute(&model, &fit.theta_hat, &data, &sample, DEFAULT_CONDITION_CAP)?
                            .reflected(&signs)?;
                        match rep.vcov {
                            Some(v) => v,
                            None => return Ok((fit, None)),
                        }
                    }
                };
                let mut canonical = fit.theta_hat.values().to_vec();
                design.canonicalize(&mut canonical);
                let region = Ellipsoid::new(&vcov, &canonical, level)?;
                let covered = region.contains(&truth_theta);
                Ok((fit, Some(covered)))
            };
            match run() {
                Ok((fit, covered)) => {
                    outcome.theta_hat = fit.theta_hat.values().to_vec();
                    design.canonicalize(&mut outcome.theta_hat);
                    outcome.loglik = fit.objective;
                    outcome.converged = fit.converged;
                    outcome.iterations = fit.iterations;
                    outcome.covered = covered;
                    if covered.is_none() {
                        outcome.error = Some(if fit.converged {
                            "ill-conditioned information".into()
                        } else {
                            "optimizer did not converge".into()
                        });
                    }
                }
                Err(e) => outcome.error = Some(e.to_string()),
            }
            outcome
        })
        .collect();

    let invalid = outcomes.iter().filter(|o| !o.is_valid()).count();
    if invalid * 20 > replicates {
        return Err(Error::StudyFailed { invalid, replicates });
    }
    let covered = outcomes.iter().filter(|o| o.covered == Some(true)).count();
    Ok(CoverageResult {
        replicates,
        covered,
        invalid,
        level,
        ellipse_used: mode,
        n,
        m,
        seed,
        truth: truth_theta,
        parameter_names: design.layout().names(),
        estimates: outcomes.iter().map(|o| o.theta_hat.clone()).collect(),
        exact_vcov,
        outcomes,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub m: usize,
    pub rmse: f64,
    pub mean_error: f64,
    pub seeds: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub exact: f64,
    pub rows: Vec<ConvergenceRow>,
    /// Least-squares slope of `ln RMSE` on `ln m`; `None` if any RMSE is 0.
    pub slope: Option<f64>,
}

/// RMSE of the Monte Carlo log marginal of `y` against the quadrature value,
/// over `seeds_per_m` independent samples at each `m`.
pub fn convergence_experiment(
    design: &GlmmDesign,
    params: &GlmmParams,
    y: &[u8],
    m_grid: &[usize],
    seeds_per_m: usize,
    seed: u64,
) -> Result<ConvergenceTable> {
    if m_grid.is_empty() || seeds_per_m == 0 {
        return Err(Error::InvalidArgument("convergence experiment needs m values and seeds".into()));
    }
    design.validate_record(y)?;
    let data = ObservedData::new(vec![y.to_vec()])?;
    let exact = oracle::gh_loglik(design, params, &data, &QuadratureRule::default_rule())?;
    let model = Glmm::new(design.clone());
    let theta = params.to_theta();
    let y = y.to_vec();

    let mut rows = Vec::with_capacity(m_grid.len());
    for (a, &m) in m_grid.iter().enumerate() {
        let errors: Vec<f64> = (0..seeds_per_m)
            .into_par_iter()
            .map(|s| -> Result<f64> {
                let idx = (a * seeds_per_m + s) as u64;
                let sample = engine::draw_sample(&model, m, derive_seed(seed, label::REPLICATE, idx))?;
                Ok(engine::log_marginal_mc(&model, &theta, &y, &sample)? - exact)
            })
            .collect::<Result<_>>()?;
        let k = errors.len() as f64;
        rows.push(ConvergenceRow {
            m,
            rmse: (errors.iter().map(|e| e * e).sum::<f64>() / k).sqrt(),
            mean_error: errors.iter().sum::<f64>() / k,
            seeds: seeds_per_m,
        });
    }
    let slope = if rows.len() >= 2 && rows.iter().all(|r| r.rmse > 0.0) {
        let xs: Vec<f64> = rows.iter().map(|r| (r.m as f64).ln()).collect();
        let ys: Vec<f64> = rows.iter().map(|r| r.rmse.ln()).collect();
        Some(ls_slope(&xs, &ys))
    } else {
        None
    };
    Ok(ConvergenceTable { exact, rows, slope })
}

fn ls_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SchemeComparison {
    /// `m · tr Cov[(1/n) score]` under the shared scheme; estimates `tr W`.
    pub trace_shared: f64,
    /// `n m · tr Cov[(1/n) score]` under the fresh scheme; estimates `tr W̃`.
    pub trace_fresh: f64,
    pub se_shared: f64,
    pub se_fresh: f64,
    /// Jackknife standard error of `trace_fresh − trace_shared`.
    pub se_difference: f64,
    pub replicates: usize,
}

/// Trace of the sample covariance and its delete-one jackknife SE.
fn trace_cov_jackknife(rows: &[DVector<f64>]) -> (f64, f64) {
    let r = rows.len() as f64;
    let d = rows[0].len();
    // center first; the closed forms below are translation invariant
    let mean = rows.iter().fold(DVector::zeros(d), |acc, x| acc + x) / r;
    let centered: Vec<DVector<f64>> = rows.iter().map(|x| x - &mean).collect();
    let rows = &centered;
    let s1 = rows.iter().fold(DVector::zeros(d), |acc, x| acc + x);
    let s2: f64 = rows.iter().map(|x| x.norm_squared()).sum();
    let full = (s2 - s1.norm_squared() / r) / (r - 1.0);
    let loo: Vec<f64> = rows
        .iter()
        .map(|x| {
            let mean = (&s1 - x) / (r - 1.0);
            ((s2 - x.norm_squared()) - (r - 1.0) * mean.norm_squared()) / (r - 2.0)
        })
        .collect();
    let mean_loo = loo.iter().sum::<f64>() / r;
    let var = (r - 1.0) / r * loo.iter().map(|t| (t - mean_loo).powi(2)).sum::<f64>();
    (full, var.sqrt())
}

/// Compares the replicate-to-replicate variability of the Monte Carlo score
/// at fixed `θ` under the shared and fresh-per-record sampling schemes.
///
/// Both traces are normalized per draw so they estimate `tr W` and `tr W̃`;
/// with `n = 1` the two schemes coincide.
pub fn scheme_variance_compare(
    design: &GlmmDesign,
    params: &GlmmParams,
    data: &ObservedData<Vec<u8>>,
    m: usize,
    replicates: usize,
    seed: u64,
) -> Result<SchemeComparison> {
    if replicates < 100 {
        return Err(Error::InvalidArgument("scheme comparison needs at least 100 replicates".into()));
    }
    let model = Glmm::new(design.clone());
    let theta = params.to_theta();
    GlmmParams::from_theta(design, &theta)?;
    let n = data.n() as f64;

    let shared: Vec<DVector<f64>> = (0..replicates)
        .into_par_iter()
        .map(|r| -> Result<DVector<f64>> {
            let sample = engine::draw_sample(&model, m, derive_seed(seed, label::MONTE_CARLO, r as u64))?;
            Ok(engine::mc_score(&model, &theta, data, &sample)? / n)
        })
        .collect::<Result<_>>()?;
    let fresh: Vec<DVector<f64>> = (0..replicates)
        .into_par_iter()
        .map(|r| -> Result<DVector<f64>> {
            let samples = FreshSamples::draw(&model, data.n(), m, derive_seed(seed, label::FRESH, r as u64))?;
            Ok(engine::mc_score(&model, &theta, data, &samples)? / n)
        })
        .collect::<Result<_>>()?;

    let (ts, ses) = trace_cov_jackknife(&shared);
    let (tf, sef) = trace_cov_jackknife(&fresh);
    let mf = m as f64;
    let (trace_shared, se_shared) = (mf * ts, mf * ses);
    let (trace_fresh, se_fresh) = (n * mf * tf, n * mf * sef);
    Ok(SchemeComparison {
        trace_shared,
        trace_fresh,
        se_shared,
        se_fresh,
        se_difference: (se_shared * se_shared + se_fresh * se_fresh).sqrt(),
        replicates,
    })
}
