//! Ground truth for GLMMs with at most one random effect.
//!
//! The observed-data likelihood `f_θ(y) = ∫ f_θ(y | b) φ(b) db` is computed
//! by adaptive Gauss–Hermite quadrature: for each record the rule is
//! recentered at the mode of `log f_θ(y | b) + log φ(b)` and rescaled by its
//! curvature, which keeps the integrand close to the rule's Gaussian weight
//! even when large `δ` and long records make it sharply peaked. With the
//! response space `{0,1}^T` small enough to enumerate, the population
//! quantities of the asymptotic theory are exact sums:
//!
//! ```text
//! J = −Σ_y f(y) ∇² log f(y)
//! V = Σ_y f(y) ∇log f(y) ∇log f(y)ᵀ
//! W = var_b  Σ_y f(y | b) [∇ log f(b, y) − ∇ log f(y)]
//! W̃ = Σ_y f(y) var_b  f(b | y)/φ(b) [∇ log f(b, y) − ∇ log f(y)]
//! ```
//!
//! with the data distribution taken as the model at the supplied parameter.
//! `W` uses a second, finer rule for its outer integral over `b`; `W̃` is
//! integrated per outcome with its own adapted rule.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{MissingDataModel, ObservedData, ParamVector};
use crate::error::{Error, Result};
use crate::glmm::{Glmm, GlmmDesign, GlmmParams};
use crate::optim::{self, OptOptions, OptResult};

/// Default number of quadrature nodes.
pub const DEFAULT_ORDER: usize = 64;

/// Largest `T` the enumeration oracle accepts (`2^16` outcomes).
pub const MAX_ENUMERATION_T: usize = 16;

/// Nodes and weights for `∫ f(b) φ(b) db`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadratureRule {
    pub order: usize,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    /// `ln` of the weights; accurate even where the weights underflow.
    pub log_weights: Vec<f64>,
}

impl QuadratureRule {
    /// Probabilists' Gauss–Hermite rule.
    ///
    /// Nodes start from the eigenvalues of the Jacobi matrix and are
    /// polished by Newton steps on the orthonormal Hermite polynomial;
    /// weights are Christoffel numbers `1 / Σ_k p_k(x)²` evaluated with
    /// running rescaling so large orders do not overflow.
    pub fn gauss_hermite(order: usize) -> Result<Self> {
        if order == 0 {
            return Err(Error::InvalidArgument("quadrature order must be >= 1".into()));
        }
        let jacobi = DMatrix::from_fn(order, order, |a, b| {
            if a + 1 == b || b + 1 == a {
                (a.max(b) as f64).sqrt()
            } else {
                0.0
            }
        });
        let mut nodes: Vec<f64> = SymmetricEigen::new(jacobi).eigenvalues.iter().copied().collect();
        nodes.sort_by(|a, b| a.partial_cmp(b).unwrap());

        for x in nodes.iter_mut() {
            for _ in 0..8 {
                let (pn, pn1, _) = orthonormal_hermite(order, *x);
                let step = pn / ((order as f64).sqrt() * pn1);
                *x -= step;
                if step.abs() <= 1e-15 * x.abs().max(1.0) {
                    break;
                }
            }
        }
        for i in 0..order / 2 {
            let s = 0.5 * (nodes[order - 1 - i] - nodes[i]);
            nodes[i] = -s;
            nodes[order - 1 - i] = s;
        }
        if order % 2 == 1 {
            nodes[order / 2] = 0.0;
        }

        let log_weights: Vec<f64> = nodes.iter().map(|&x| -orthonormal_hermite(order, x).2).collect();
        // renormalize against accumulated rounding
        let lmax = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = log_weights.iter().map(|l| (l - lmax).exp()).sum();
        let shift = lmax + total.ln();
        let log_weights: Vec<f64> = log_weights.iter().map(|l| l - shift).collect();
        let weights = log_weights.iter().map(|l| l.exp()).collect();
        Ok(Self {
            order,
            nodes,
            weights,
            log_weights,
        })
    }

    pub fn default_rule() -> Self {
        Self::gauss_hermite(DEFAULT_ORDER).expect("default order is valid")
    }

    /// `Σ_t w_t f(x_t)`.
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }
}

/// `(p_n(x), p_{n−1}(x), ln Σ_{k<n} p_k(x)²)` for orthonormal probabilists'
/// Hermite polynomials. The first two share an arbitrary positive scale.
fn orthonormal_hermite(n: usize, x: f64) -> (f64, f64, f64) {
    let mut prev = 0.0;
    let mut cur = 1.0;
    let mut sum = 0.0;
    let mut log_scale = 0.0;
    for k in 0..n {
        sum += cur * cur;
        let next = (x * cur - (k as f64).sqrt() * prev) / ((k + 1) as f64).sqrt();
        prev = cur;
        cur = next;
        if cur.abs() > 1e100 {
            cur *= 1e-100;
            prev *= 1e-100;
            sum *= 1e-200;
            log_scale += 100.0 * std::f64::consts::LN_10;
        }
    }
    (cur, prev, sum.ln() + 2.0 * log_scale)
}

fn check_one_dim(design: &GlmmDesign) -> Result<()> {
    if design.q() > 1 {
        return Err(Error::QuadratureDimension { q: design.q() });
    }
    Ok(())
}

/// Nodes as random-effect points; a single unit-weight node when `q = 0`.
fn node_points(design: &GlmmDesign, rule: &QuadratureRule) -> Vec<(Vec<f64>, f64)> {
    if design.q() == 0 {
        return vec![(Vec::new(), 0.0)];
    }
    rule.nodes
        .iter()
        .zip(&rule.log_weights)
        .map(|(&x, &lw)| (vec![x], lw))
        .collect()
}

/// Mode and curvature scale of `power · ρ(b) − b²/2` for a one-dimensional
/// random effect. The function is strictly concave, so damped Newton from
/// `b = 0` converges.
fn posterior_mode(design: &GlmmDesign, theta: &[f64], y: &[u8], power: f64) -> (f64, f64) {
    let p = design.p();
    let delta = theta[p + design.delta_index(0)];
    let eta0: Vec<f64> = (0..design.t())
        .map(|k| (0..p).map(|c| design.x(k, c) * theta[c]).sum())
        .collect();
    let coef: Vec<f64> = (0..design.t()).map(|k| design.z(k, 0) * delta).collect();
    let objective = |b: f64| -> f64 {
        let rho: f64 = (0..design.t())
            .map(|k| {
                let eta = eta0[k] + coef[k] * b;
                y[k] as f64 * eta - crate::glmm::softplus(eta)
            })
            .sum();
        power * rho - 0.5 * b * b
    };
    let derivs = |b: f64| -> (f64, f64) {
        let mut d1 = -b;
        let mut d2 = -1.0;
        for k in 0..design.t() {
            let pk = crate::glmm::logistic(eta0[k] + coef[k] * b);
            d1 += power * (y[k] as f64 - pk) * coef[k];
            d2 -= power * pk * (1.0 - pk) * coef[k] * coef[k];
        }
        (d1, d2)
    };
    let mut b = 0.0;
    let mut value = objective(b);
    for _ in 0..200 {
        let (d1, d2) = derivs(b);
        let mut step = -d1 / d2;
        let mut moved = false;
        for _ in 0..60 {
            let cand = b + step;
            let v = objective(cand);
            if v >= value {
                b = cand;
                value = v;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if !moved || step.abs() <= 1e-13 * (1.0 + b.abs()) {
            break;
        }
    }
    let (_, d2) = derivs(b);
    (b, (-d2).sqrt().recip())
}

/// Nodes and log weights for `∫ g(b) φ(b) db` adapted to the integrand
/// `exp(power · ρ(θ, b, y)) φ(b)`: `b_t = μ + s z_t` with log weight
/// `log w_t + log s + (z_t² − b_t²)/2`.
fn adapted_nodes(design: &GlmmDesign, theta: &[f64], y: &[u8], rule: &QuadratureRule, power: f64) -> Vec<(Vec<f64>, f64)> {
    if design.q() == 0 {
        return vec![(Vec::new(), 0.0)];
    }
    let (mu, scale) = posterior_mode(design, theta, y, power);
    let log_scale = scale.ln();
    rule.nodes
        .iter()
        .zip(&rule.log_weights)
        .map(|(&z, &lw)| {
            let b = mu + scale * z;
            (vec![b], lw + log_scale + 0.5 * (z * z - b * b))
        })
        .collect()
}

/// Exact `log f(y)`, its gradient and row-major Hessian.
#[derive(Clone, Debug)]
struct Marginal {
    log_f: f64,
    score: Vec<f64>,
    hessian: Vec<f64>,
}

fn marginal(model: &Glmm, theta: &[f64], y: &Vec<u8>, rule: &QuadratureRule, with_hessian: bool) -> Marginal {
    let nodes = adapted_nodes(model.design(), theta, y, rule, 1.0);
    let d = model.theta_dim();
    let mut la = Vec::with_capacity(nodes.len());
    let mut grads = Vec::with_capacity(nodes.len() * d);
    let mut hesses = Vec::with_capacity(if with_hessian { nodes.len() * d * d } else { 0 });
    let mut g = vec![0.0; d];
    let mut h = vec![0.0; d * d];
    for (b, lw) in &nodes {
        let rho = if with_hessian {
            let r = model.log_ratio_hess(theta, b, y, &mut g, &mut h);
            hesses.extend_from_slice(&h);
            r
        } else {
            model.log_ratio_grad(theta, b, y, &mut g)
        };
        la.push(lw + rho);
        grads.extend_from_slice(&g);
    }
    let max = la.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = la.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = e.iter().sum();
    let log_f = max + total.ln();
    let mut score = vec![0.0; d];
    for (t, et) in e.iter().enumerate() {
        let u = et / total;
        for a in 0..d {
            score[a] += u * grads[t * d + a];
        }
    }
    let mut hessian = Vec::new();
    if with_hessian {
        hessian = vec![0.0; d * d];
        for (t, et) in e.iter().enumerate() {
            let u = et / total;
            let s = &grads[t * d..(t + 1) * d];
            for a in 0..d {
                for c in 0..d {
                    hessian[a * d + c] += u * (hesses[t * d * d + a * d + c] + (s[a] - score[a]) * (s[c] - score[c]));
                }
            }
        }
    }
    Marginal { log_f, score, hessian }
}

fn params_theta(design: &GlmmDesign, params: &GlmmParams) -> Result<Vec<f64>> {
    params.check(design)
}

fn check_records(design: &GlmmDesign, data: &ObservedData<Vec<u8>>) -> Result<()> {
    for (j, y) in data.records().iter().enumerate() {
        design
            .validate_record(y)
            .map_err(|e| Error::InvalidArgument(format!("record {j}: {e}")))?;
    }
    Ok(())
}

/// Exact log likelihood `Σ_j log f_θ(Y_j)` by quadrature.
pub fn gh_loglik(
    design: &GlmmDesign,
    params: &GlmmParams,
    data: &ObservedData<Vec<u8>>,
    rule: &QuadratureRule,
) -> Result<f64> {
    check_one_dim(design)?;
    let theta = params_theta(design, params)?;
    Ok(gh_value_and_score(design, &theta, data, rule)?.0)
}

/// Value and gradient of the exact log likelihood.
pub fn gh_value_and_score(
    design: &GlmmDesign,
    theta: &[f64],
    data: &ObservedData<Vec<u8>>,
    rule: &QuadratureRule,
) -> Result<(f64, DVector<f64>)> {
    check_one_dim(design)?;
    check_records(design, data)?;
    GlmmParams::from_theta(design, theta)?;
    let model = Glmm::new(design.clone());
    let per: Vec<Marginal> = data
        .records()
        .par_iter()
        .map(|y| marginal(&model, theta, y, rule, false))
        .collect();
    let d = design.theta_dim();
    let mut value = 0.0;
    let mut grad = DVector::zeros(d);
    for m in &per {
        value += m.log_f;
        for a in 0..d {
            grad[a] += m.score[a];
        }
    }
    Ok((value, grad))
}

/// Hessian of the exact log likelihood.
pub fn gh_hessian(
    design: &GlmmDesign,
    theta: &[f64],
    data: &ObservedData<Vec<u8>>,
    rule: &QuadratureRule,
) -> Result<DMatrix<f64>> {
    check_one_dim(design)?;
    check_records(design, data)?;
    GlmmParams::from_theta(design, theta)?;
    let model = Glmm::new(design.clone());
    let d = design.theta_dim();
    let per: Vec<Marginal> = data
        .records()
        .par_iter()
        .map(|y| marginal(&model, theta, y, rule, true))
        .collect();
    let mut h = DMatrix::zeros(d, d);
    for m in &per {
        for a in 0..d {
            for c in 0..d {
                h[(a, c)] += m.hessian[a * d + c];
            }
        }
    }
    Ok(h)
}

/// Per-record exact scores, in record order.
pub fn gh_record_scores(
    design: &GlmmDesign,
    theta: &[f64],
    data: &ObservedData<Vec<u8>>,
    rule: &QuadratureRule,
) -> Result<Vec<Vec<f64>>> {
    check_one_dim(design)?;
    check_records(design, data)?;
    GlmmParams::from_theta(design, theta)?;
    let model = Glmm::new(design.clone());
    Ok(data
        .records()
        .par_iter()
        .map(|y| marginal(&model, theta, y, rule, false).score)
        .collect())
}

/// Exact MLE by quasi-Newton ascent on the quadrature likelihood; δ is
/// reported as `|δ|`.
pub fn gh_mle(
    design: &GlmmDesign,
    data: &ObservedData<Vec<u8>>,
    rule: &QuadratureRule,
    theta0: &[f64],
    opts: &OptOptions,
) -> Result<OptResult> {
    check_one_dim(design)?;
    let start = ParamVector::new(theta0.to_vec(), design.layout())?;
    let mut res = optim::maximize(|t: &[f64]| gh_value_and_score(design, t, data, rule), &start, opts)?;
    let mut theta = res.theta_hat.values().to_vec();
    design.canonicalize(&mut theta);
    res.theta_hat = res.theta_hat.with_values(theta)?;
    Ok(res)
}

fn outcomes(t: usize) -> impl Iterator<Item = Vec<u8>> {
    (0..1usize << t).map(move |code| (0..t).map(|k| ((code >> k) & 1) as u8).collect())
}

fn check_enumerable(design: &GlmmDesign) -> Result<()> {
    check_one_dim(design)?;
    if design.t() > MAX_ENUMERATION_T {
        return Err(Error::EnumerationTooLarge {
            t: design.t(),
            cap: MAX_ENUMERATION_T,
        });
    }
    Ok(())
}

/// Exact population quantities at one parameter value.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExactInformation {
    pub j: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub w: DMatrix<f64>,
    /// Fresh-sample counterpart of `w`.
    pub w_tilde: DMatrix<f64>,
    /// `Σ_y f(y)`; 1 up to quadrature error.
    pub total_probability: f64,
    pub inner_order: usize,
    pub outer_order: usize,
    /// Largest relative Frobenius change under order doubling.
    pub refinement_change: f64,
}

fn jvw_at_orders(model: &Glmm, theta: &[f64], inner: &QuadratureRule, outer: &QuadratureRule) -> ExactInformation {
    let design = model.design();
    let d = design.theta_dim();
    let ys: Vec<Vec<u8>> = outcomes(design.t()).collect();
    let margins: Vec<Marginal> = ys
        .par_iter()
        .map(|y| marginal(model, theta, y, inner, true))
        .collect();

    let mut total = 0.0;
    let mut j = DMatrix::zeros(d, d);
    let mut v = DMatrix::zeros(d, d);
    let mut mean = DVector::<f64>::zeros(d);
    for mg in &margins {
        let f = mg.log_f.exp();
        total += f;
        for a in 0..d {
            mean[a] += f * mg.score[a];
            for c in 0..d {
                j[(a, c)] -= f * mg.hessian[a * d + c];
                v[(a, c)] += f * mg.score[a] * mg.score[c];
            }
        }
    }
    v -= &mean * mean.transpose();

    let (w, w_tilde) = if design.q() == 0 {
        (DMatrix::zeros(d, d), DMatrix::zeros(d, d))
    } else {
        let outer_nodes: Vec<(f64, f64)> = outer.nodes.iter().copied().zip(outer.weights.iter().copied()).collect();
        // S(b) = Σ_y f(y | b) (s(b, y) − score(y)) at each outer node
        let per_node: Vec<DVector<f64>> = outer_nodes
            .par_iter()
            .map(|&(b, _)| {
                let mut s_b = DVector::zeros(d);
                let mut g = vec![0.0; d];
                for (y, mg) in ys.iter().zip(&margins) {
                    let cond = model.log_ratio_grad(theta, &[b], y, &mut g).exp();
                    if cond == 0.0 {
                        continue;
                    }
                    for a in 0..d {
                        s_b[a] += cond * (g[a] - mg.score[a]);
                    }
                }
                s_b
            })
            .collect();
        let mut w = DMatrix::zeros(d, d);
        let mut s_mean = DVector::zeros(d);
        for ((_, wt), s_b) in outer_nodes.iter().zip(&per_node) {
            w += *wt * (s_b * s_b.transpose());
            s_mean += *wt * s_b;
        }
        w -= &s_mean * s_mean.transpose();

        // W̃ term for each y: ∫ f(y | b)² / f(y) (s − score)(s − score)ᵀ φ(b) db
        let per_y: Vec<DMatrix<f64>> = ys
            .par_iter()
            .zip(&margins)
            .map(|(y, mg)| {
                let mut acc = DMatrix::zeros(d, d);
                let mut g = vec![0.0; d];
                for (b, lw) in adapted_nodes(design, theta, y, outer, 2.0) {
                    let rho = model.log_ratio_grad(theta, &b, y, &mut g);
                    let wt = (lw + 2.0 * rho - mg.log_f).exp();
                    for a in 0..d {
                        for c in 0..d {
                            acc[(a, c)] += wt * (g[a] - mg.score[a]) * (g[c] - mg.score[c]);
                        }
                    }
                }
                acc
            })
            .collect();
        let mut w_tilde = DMatrix::zeros(d, d);
        for term in &per_y {
            w_tilde += term;
        }
        (w, w_tilde)
    };

    let sym = |a: DMatrix<f64>| (&a + a.transpose()) * 0.5;
    ExactInformation {
        j: sym(j),
        v: sym(v),
        w: sym(w),
        w_tilde: sym(w_tilde),
        total_probability: total,
        inner_order: inner.order,
        outer_order: outer.order,
        refinement_change: 0.0,
    }
}

fn rel_change(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = b.norm();
    if scale == 0.0 {
        (a - b).norm()
    } else {
        (a - b).norm() / scale
    }
}

/// Exact `J`, `V`, `W` (and `W̃`) by enumeration of `{0,1}^T`.
///
/// `rule` is the inner rule for marginals; the outer integral for `W` uses
/// twice its order. The whole computation is repeated at doubled orders and
/// fails if any matrix moves by more than 1e-6 (relative Frobenius).
pub fn exact_jvw(design: &GlmmDesign, params: &GlmmParams, rule: &QuadratureRule) -> Result<ExactInformation> {
    check_enumerable(design)?;
    let theta = params_theta(design, params)?;
    let model = Glmm::new(design.clone());
    let outer = QuadratureRule::gauss_hermite(2 * rule.order)?;
    let fine_inner = QuadratureRule::gauss_hermite(2 * rule.order)?;
    let fine_outer = QuadratureRule::gauss_hermite(4 * rule.order)?;
    let mut base = jvw_at_orders(&model, &theta, rule, &outer);
    let fine = jvw_at_orders(&model, &theta, &fine_inner, &fine_outer);
    let change = [
        rel_change(&base.j, &fine.j),
        rel_change(&base.v, &fine.v),
        rel_change(&base.w, &fine.w),
        rel_change(&base.w_tilde, &fine.w_tilde),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    if !(change <= 1e-6) {
        return Err(Error::QuadratureNotConverged { change });
    }
    base.refinement_change = change;
    Ok(base)
}

/// Kullback–Leibler information `Σ_y f₀(y) [log f₀(y) − log f_θ(y)]`.
pub fn kl_info(
    design: &GlmmDesign,
    params_true: &GlmmParams,
    params: &GlmmParams,
    rule: &QuadratureRule,
) -> Result<f64> {
    check_enumerable(design)?;
    let t0 = params_theta(design, params_true)?;
    let t1 = params_theta(design, params)?;
    let model = Glmm::new(design.clone());
    let terms: Vec<f64> = outcomes(design.t())
        .collect::<Vec<_>>()
        .par_iter()
        .map(|y| {
            let l0 = marginal(&model, &t0, y, rule, false).log_f;
            let l1 = marginal(&model, &t1, y, rule, false).log_f;
            l0.exp() * (l0 - l1)
        })
        .collect();
    Ok(terms.iter().sum())
}

/// Marginal success probabilities `P(y_k = 1)` for a one-dimensional design.
pub fn marginal_success_probabilities(
    design: &GlmmDesign,
    params: &GlmmParams,
    rule: &QuadratureRule,
) -> Result<Vec<f64>> {
    check_one_dim(design)?;
    params_theta(design, params)?;
    let mut probs = vec![0.0; design.t()];
    for (b, lw) in node_points(design, rule) {
        let eta = crate::glmm::linear_predictor(design, params, &b)?;
        for (p, e) in probs.iter_mut().zip(eta) {
            *p += lw.exp() * crate::glmm::logistic(e);
        }
    }
    Ok(probs)
}
