//! Plug-in estimates of `J`, `V`, `W`, the sandwich covariance, standard
//! errors and confidence ellipsoids.
//!
//! With `u_i(y)` the normalized importance weights, `s_{ij} = ∇_θ ρ(θ, X_i, Y_j)`,
//! `g_j = Σ_i u_i(Y_j) s_{ij}` the per-record Monte Carlo score and
//! `w_{ij} = m·u_i(Y_j)`:
//!
//! ```text
//! Ĵ = −(1/n) Σ_j ∇² log f_{θ,m}(Y_j)
//! V̂ = (1/n) Σ_j g_j g_jᵀ                  (uncentered)
//! Ŝ_i = (1/n) Σ_j w_{ij} (s_{ij} − g_j)
//! Ŵ = (1/m) Σ_i Ŝ_i Ŝ_iᵀ
//! vcov = Ĵ⁻¹ (V̂/n + Ŵ/m) Ĵ⁻¹
//! ```
//!
//! `Ŝ_i` is `∇f_θ(X_i | Y_j)/h(X_i)` averaged over records after replacing
//! `f_θ(x | y)` by `f_θ(x, y)/f_{θ,m}(y)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::engine::{self, MissingDataModel, MonteCarloSample, ObservedData, ParamVector, SampleSource};
use crate::error::{Error, Result};

/// Default cap on the condition number of `Ĵ`.
pub const DEFAULT_CONDITION_CAP: f64 = 1e12;

pub fn estimate_j<M, S>(model: &M, theta: &[f64], data: &ObservedData<M::Record>, samples: &S) -> Result<DMatrix<f64>>
where
    M: MissingDataModel,
    S: SampleSource + ?Sized,
{
    let h = engine::mc_hessian(model, theta, data, samples)?;
    Ok(h * (-1.0 / data.n() as f64))
}

pub fn estimate_v<M, S>(model: &M, theta: &[f64], data: &ObservedData<M::Record>, samples: &S) -> Result<DMatrix<f64>>
where
    M: MissingDataModel,
    S: SampleSource + ?Sized,
{
    let scores = engine::per_record_scores(model, theta, data, samples)?;
    Ok(outer_mean(&scores, model.theta_dim()))
}

fn outer_mean(vectors: &[Vec<f64>], d: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(d, d);
    for v in vectors {
        for a in 0..d {
            for b in 0..d {
                out[(a, b)] += v[a] * v[b];
            }
        }
    }
    out / vectors.len() as f64
}

/// Records are reduced in fixed-size chunks whose partial sums are added in
/// chunk order, so the result does not depend on the thread count.
const RECORD_CHUNK: usize = 32;

/// `Ŝ_1..Ŝ_m` (row-major `m × d`) for the shared-sample scheme.
pub fn s_hat<M: MissingDataModel>(
    model: &M,
    theta: &[f64],
    data: &ObservedData<M::Record>,
    sample: &MonteCarloSample,
) -> Result<Vec<f64>> {
    let d = model.theta_dim();
    let m = sample.m();
    let n = data.n();
    let partials: Vec<Vec<f64>> = data
        .records()
        .par_chunks(RECORD_CHUNK)
        .enumerate()
        .map(|(c, chunk)| -> Result<Vec<f64>> {
            let mut acc = vec![0.0; m * d];
            for (k, y) in chunk.iter().enumerate() {
                let j = c * RECORD_CHUNK + k;
                let (rho, scores) = engine::point_scores(model, theta, y, sample)?;
                let u = engine::softmax(&rho).map_err(|e| match e {
                    Error::AllImpossible { .. } => Error::AllImpossible { record: Some(j) },
                    other => other,
                })?;
                let mut g = vec![0.0; d];
                for i in 0..m {
                    for a in 0..d {
                        g[a] += u[i] * scores[i * d + a];
                    }
                }
                for i in 0..m {
                    let w = m as f64 * u[i];
                    if w == 0.0 {
                        continue;
                    }
                    for a in 0..d {
                        acc[i * d + a] += w * (scores[i * d + a] - g[a]);
                    }
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut s = vec![0.0; m * d];
    for p in &partials {
        for (a, b) in s.iter_mut().zip(p) {
            *a += b;
        }
    }
    s.iter_mut().for_each(|v| *v /= n as f64);
    Ok(s)
}

pub fn estimate_w<M: MissingDataModel>(
    model: &M,
    theta: &[f64],
    data: &ObservedData<M::Record>,
    sample: &MonteCarloSample,
) -> Result<DMatrix<f64>> {
    let d = model.theta_dim();
    let s = s_hat(model, theta, data, sample)?;
    let rows: Vec<Vec<f64>> = s.chunks(d.max(1)).map(|c| c.to_vec()).collect();
    if d == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    Ok(outer_mean(&rows, d))
}

/// Plug-in `W̃` for the fresh-sample scheme:
/// `(1/n) Σ_j (1/m_j) Σ_i w_{ij}² (s_{ij} − g_j)(s_{ij} − g_j)ᵀ`.
pub fn estimate_w_fresh<M, S>(model: &M, theta: &[f64], data: &ObservedData<M::Record>, samples: &S) -> Result<DMatrix<f64>>
where
    M: MissingDataModel,
    S: SampleSource + ?Sized,
{
    let d = model.theta_dim();
    let per: Vec<DMatrix<f64>> = data
        .records()
        .par_iter()
        .enumerate()
        .map(|(j, y)| -> Result<DMatrix<f64>> {
            let sample = samples.for_record(j);
            let m = sample.m();
            let (rho, scores) = engine::point_scores(model, theta, y, sample)?;
            let u = engine::softmax(&rho).map_err(|e| match e {
                Error::AllImpossible { .. } => Error::AllImpossible { record: Some(j) },
                other => other,
            })?;
            let mut g = vec![0.0; d];
            for i in 0..m {
                for a in 0..d {
                    g[a] += u[i] * scores[i * d + a];
                }
            }
            let mut acc = DMatrix::zeros(d, d);
            for i in 0..m {
                let w = m as f64 * u[i];
                for a in 0..d {
                    let ea = w * (scores[i * d + a] - g[a]);
                    for b in 0..d {
                        acc[(a, b)] += ea * w * (scores[i * d + b] - g[b]);
                    }
                }
            }
            Ok(acc / m as f64)
        })
        .collect::<Result<_>>()?;
    let mut total = DMatrix::zeros(d, d);
    for p in &per {
        total += p;
    }
    Ok(total / data.n() as f64)
}

/// `Ĵ⁻¹ (V̂/n + Ŵ/m) Ĵ⁻¹` via the eigendecomposition of `Ĵ`.
///
/// Fails with [`Error::Ridge`] when the condition number of `Ĵ` exceeds
/// `condition_cap` (or `Ĵ` is not positive definite), reporting the
/// smallest eigenvalue.
pub fn sandwich_vcov(
    j_hat: &DMatrix<f64>,
    v_hat: &DMatrix<f64>,
    w_hat: &DMatrix<f64>,
    n: usize,
    m: Option<usize>,
    condition_cap: f64,
) -> Result<DMatrix<f64>> {
    let d = j_hat.nrows();
    let sym = (j_hat + j_hat.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let smallest = eig.eigenvalues.min();
    let largest = eig.eigenvalues.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let condition = if smallest > 0.0 { largest / smallest } else { f64::INFINITY };
    if !(condition <= condition_cap) {
        return Err(Error::Ridge {
            smallest_eigenvalue: smallest,
            condition,
        });
    }
    let mut middle = v_hat / n as f64;
    if let Some(m) = m {
        middle += w_hat / m as f64;
    }
    // Q Λ⁻¹ Qᵀ M Q Λ⁻¹ Qᵀ
    let q = &eig.eigenvectors;
    let inv = DVector::from_iterator(d, eig.eigenvalues.iter().map(|l| 1.0 / l));
    let mut core = q.transpose() * middle * q;
    for a in 0..d {
        for b in 0..d {
            core[(a, b)] *= inv[a] * inv[b];
        }
    }
    let out = q * core * q.transpose();
    Ok((&out + out.transpose()) * 0.5)
}

/// Everything inference needs at one parameter value.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InferenceReport {
    pub j_hat: DMatrix<f64>,
    pub v_hat: DMatrix<f64>,
    pub w_hat: DMatrix<f64>,
    /// `None` when `Ĵ` is too ill-conditioned; see `ridge`.
    pub vcov: Option<DMatrix<f64>>,
    pub se: Option<Vec<f64>>,
    pub ridge: Option<String>,
    pub m: usize,
    pub n: usize,
    pub theta_ref: ParamVector,
}

impl InferenceReport {
    /// Shared-sample plug-ins at `theta`.
    pub fn compute<M: MissingDataModel>(
        model: &M,
        theta: &ParamVector,
        data: &ObservedData<M::Record>,
        sample: &MonteCarloSample,
        condition_cap: f64,
    ) -> Result<Self> {
        let t = theta.values();
        let j_hat = estimate_j(model, t, data, sample)?;
        let v_hat = estimate_v(model, t, data, sample)?;
        let w_hat = estimate_w(model, t, data, sample)?;
        Self::assemble(j_hat, v_hat, w_hat, data.n(), sample.m(), theta.clone(), condition_cap)
    }

    /// Fresh-scheme plug-ins: `W̃` replaces `W` and the Monte Carlo size is
    /// the total number of draws `n · m_per_obs`.
    pub fn compute_fresh<M: MissingDataModel>(
        model: &M,
        theta: &ParamVector,
        data: &ObservedData<M::Record>,
        samples: &engine::FreshSamples,
        condition_cap: f64,
    ) -> Result<Self> {
        let t = theta.values();
        let j_hat = estimate_j(model, t, data, samples)?;
        let v_hat = estimate_v(model, t, data, samples)?;
        let w_hat = estimate_w_fresh(model, t, data, samples)?;
        let m_total = data.n() * samples.m_per_obs();
        Self::assemble(j_hat, v_hat, w_hat, data.n(), m_total, theta.clone(), condition_cap)
    }

    pub fn assemble(
        j_hat: DMatrix<f64>,
        v_hat: DMatrix<f64>,
        w_hat: DMatrix<f64>,
        n: usize,
        m: usize,
        theta_ref: ParamVector,
        condition_cap: f64,
    ) -> Result<Self> {
        let (vcov, ridge) = match sandwich_vcov(&j_hat, &v_hat, &w_hat, n, Some(m), condition_cap) {
            Ok(v) => (Some(v), None),
            Err(e @ Error::Ridge { .. }) => (None, Some(e.to_string())),
            Err(e) => return Err(e),
        };
        let se = vcov.as_ref().map(diag_sqrt).transpose()?;
        Ok(Self {
            j_hat,
            v_hat,
            w_hat,
            vcov,
            se,
            ridge,
            m,
            n,
            theta_ref,
        })
    }

    /// The same report in coordinates `θ' = Dθ` with `D = diag(signs)`:
    /// each matrix `M` becomes `D M D`; standard errors are unchanged.
    pub fn reflected(mut self, signs: &[f64]) -> Result<Self> {
        let d = self.j_hat.nrows();
        if signs.len() != d {
            return Err(Error::DimensionMismatch {
                what: "reflection signs",
                expected: d,
                got: signs.len(),
            });
        }
        let flip = |m: &mut DMatrix<f64>| {
            for a in 0..d {
                for c in 0..d {
                    m[(a, c)] *= signs[a] * signs[c];
                }
            }
        };
        flip(&mut self.j_hat);
        flip(&mut self.v_hat);
        flip(&mut self.w_hat);
        if let Some(v) = self.vcov.as_mut() {
            flip(v);
        }
        let theta: Vec<f64> = self.theta_ref.values().iter().zip(signs).map(|(t, s)| t * s).collect();
        self.theta_ref = self.theta_ref.with_values(theta)?;
        Ok(self)
    }

    pub fn standard_errors(&self) -> Result<Vec<(String, f64)>> {
        let vcov = self.vcov.as_ref().ok_or_else(|| {
            Error::InvalidArgument(self.ridge.clone().unwrap_or_else(|| "no covariance".into()))
        })?;
        standard_errors(vcov, &self.theta_ref.layout().names())
    }
}

fn diag_sqrt(vcov: &DMatrix<f64>) -> Result<Vec<f64>> {
    (0..vcov.nrows())
        .map(|k| {
            let v = vcov[(k, k)];
            if v < 0.0 || !v.is_finite() {
                Err(Error::NonFinite(format!("variance {v} for coordinate {k}")))
            } else {
                Ok(v.sqrt())
            }
        })
        .collect()
}

/// `sqrt(vcov_kk)` labeled by `names`.
pub fn standard_errors(vcov: &DMatrix<f64>, names: &[String]) -> Result<Vec<(String, f64)>> {
    if names.len() != vcov.nrows() {
        return Err(Error::DimensionMismatch {
            what: "parameter names",
            expected: vcov.nrows(),
            got: names.len(),
        });
    }
    Ok(names.iter().cloned().zip(diag_sqrt(vcov)?).collect())
}

/// `χ²_d` quantile; closed form `−2 ln(1 − level)` for two degrees of freedom.
pub fn chi_square_quantile(dof: usize, level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!("level {level} outside (0, 1)")));
    }
    match dof {
        0 => Err(Error::InvalidArgument("zero degrees of freedom".into())),
        2 => Ok(-2.0 * (-level).ln_1p()),
        _ => {
            let dist = ChiSquared::new(dof as f64).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            Ok(dist.inverse_cdf(level))
        }
    }
}

/// `{θ : (θ − c)ᵀ Σ⁻¹ (θ − c) ≤ χ²_d(level)}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: DVector<f64>,
    /// Principal axes as columns.
    pub axes: DMatrix<f64>,
    /// Semi-axis lengths `sqrt(λ_k χ²)`.
    pub radii: DVector<f64>,
    pub chi2: f64,
    pub level: f64,
    precision: DMatrix<f64>,
}

impl Ellipsoid {
    pub fn new(vcov: &DMatrix<f64>, center: &[f64], level: f64) -> Result<Self> {
        let d = vcov.nrows();
        if vcov.ncols() != d || center.len() != d {
            return Err(Error::DimensionMismatch {
                what: "ellipsoid",
                expected: d,
                got: center.len(),
            });
        }
        let asym = (vcov - vcov.transpose()).abs().max();
        if asym > 1e-10 * (1.0 + vcov.abs().max()) {
            return Err(Error::NotPositiveDefinite("covariance is not symmetric".into()));
        }
        let chi2 = chi_square_quantile(d, level)?;
        let eig = SymmetricEigen::new((vcov + vcov.transpose()) * 0.5);
        if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::NotPositiveDefinite(format!(
                "covariance eigenvalues {:?}",
                eig.eigenvalues.as_slice()
            )));
        }
        let precision = vcov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("Cholesky factorization failed".into()))?
            .inverse();
        Ok(Self {
            center: DVector::from_column_slice(center),
            radii: eig.eigenvalues.map(|l| (l * chi2).sqrt()),
            axes: eig.eigenvectors,
            chi2,
            level,
            precision,
        })
    }

    /// `(θ − c)ᵀ Σ⁻¹ (θ − c)`.
    pub fn quadratic_form(&self, point: &[f64]) -> f64 {
        let diff = DVector::from_column_slice(point) - &self.center;
        (diff.transpose() * &self.precision * &diff)[(0, 0)]
    }

    pub fn contains(&self, point: &[f64]) -> bool {
        self.quadratic_form(point) <= self.chi2
    }
}

/// Two-dimensional confidence ellipse.
pub fn confidence_ellipse(vcov2: &DMatrix<f64>, center: &[f64], level: f64) -> Result<Ellipsoid> {
    if vcov2.nrows() != 2 || vcov2.ncols() != 2 {
        return Err(Error::DimensionMismatch {
            what: "ellipse covariance",
            expected: 2,
            got: vcov2.nrows(),
        });
    }
    Ellipsoid::new(vcov2, center, level)
}

pub fn ellipse_contains(ellipse: &Ellipsoid, point: &[f64]) -> bool {
    ellipse.contains(point)
}
