//! Generic Monte Carlo likelihood engine.
//!
//! For a missing-data model with complete-data density `f_θ(x, y)` and an
//! importance density `h`, the marginal `f_θ(y)` is estimated by
//! `f_{θ,m}(y) = (1/m) Σ_i f_θ(X_i, y) / h(X_i)` over one fixed sample
//! `X_1..X_m ~ h`. Everything here works with the log ratio
//! `ρ(θ, x, y) = log f_θ(x, y) − log h(x)` and reduces over sample points
//! with a streaming log-sum-exp, so no exponentials of raw ratios are ever
//! formed.
//!
//! Reductions over records are evaluated record-by-record (possibly in
//! parallel) and then summed sequentially in record order, which keeps all
//! results bitwise identical regardless of the thread count.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{McStream, GENERATOR_ID};

/// Capabilities a missing-data model must provide to the engine.
///
/// Gradients and Hessians are with respect to `θ`; since `h` does not depend
/// on `θ` they coincide with derivatives of `log f_θ(x, y)`. Hessians are
/// written row-major into a `d × d` slice.
pub trait MissingDataModel: Sync {
    type Record: Sync;

    fn theta_dim(&self) -> usize;
    fn missing_dim(&self) -> usize;
    fn layout(&self) -> ParamLayout;

    fn log_ratio(&self, theta: &[f64], x: &[f64], y: &Self::Record) -> f64;

    /// Writes `∇_θ ρ` into `grad` and returns `ρ`.
    fn log_ratio_grad(&self, theta: &[f64], x: &[f64], y: &Self::Record, grad: &mut [f64])
        -> f64;

    /// Writes `∇_θ ρ` and `∇²_θ ρ` and returns `ρ`.
    fn log_ratio_hess(
        &self,
        theta: &[f64],
        x: &[f64],
        y: &Self::Record,
        grad: &mut [f64],
        hess: &mut [f64],
    ) -> f64;

    /// Fills `out` (length `missing_dim`) with one draw from `h`.
    fn sample_importance(&self, stream: &mut McStream, out: &mut [f64]);
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

/// Maps coordinates of `θ` to named blocks (`beta`, `delta`, ...).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    blocks: Vec<ParamBlock>,
}

impl ParamLayout {
    pub fn new<S: Into<String>>(blocks: impl IntoIterator<Item = (S, usize)>) -> Self {
        let mut start = 0;
        let blocks = blocks
            .into_iter()
            .map(|(name, len)| {
                let b = ParamBlock {
                    name: name.into(),
                    start,
                    len,
                };
                start += len;
                b
            })
            .collect();
        Self { blocks }
    }

    pub fn dim(&self) -> usize {
        self.blocks.iter().map(|b| b.len).sum()
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn block(&self, name: &str) -> Option<&ParamBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    /// Coordinate labels, `beta1, beta2, ..., delta1, ...`.
    pub fn names(&self) -> Vec<String> {
        self.blocks
            .iter()
            .flat_map(|b| (1..=b.len).map(move |k| format!("{}{}", b.name, k)))
            .collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names().iter().position(|n| n == name)
    }
}

/// A parameter value together with its layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: ParamLayout,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layout: ParamLayout) -> Result<Self> {
        if values.len() != layout.dim() {
            return Err(Error::DimensionMismatch {
                what: "parameter vector",
                expected: layout.dim(),
                got: values.len(),
            });
        }
        Ok(Self { values, layout })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn block_values(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .block(name)
            .map(|b| &self.values[b.start..b.start + b.len])
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(values, self.layout.clone())
    }
}

impl AsRef<[f64]> for ParamVector {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

/// Immutable i.i.d. draws `X_1..X_m` from the importance density.
#[derive(Clone, Debug, PartialEq)]
pub struct MonteCarloSample {
    points: Vec<f64>,
    dim: usize,
    m: usize,
    seed: u64,
    stream: u64,
    generator_id: String,
}

impl MonteCarloSample {
    /// Wraps externally supplied points (row-major, `m × dim`).
    pub fn from_points(points: Vec<f64>, dim: usize, seed: u64, generator_id: &str) -> Result<Self> {
        let Some(m) = points.len().checked_div(dim) else {
            return Err(Error::InvalidArgument(
                "from_points needs dim >= 1; zero-dimensional samples come from draw_sample".into(),
            ));
        };
        if m == 0 || !points.len().is_multiple_of(dim) {
            return Err(Error::InvalidArgument(format!(
                "{} values do not form a nonempty sample of dimension {dim}",
                points.len()
            )));
        }
        Ok(Self {
            points,
            dim,
            m,
            seed,
            stream: 0,
            generator_id: generator_id.to_string(),
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn generator_id(&self) -> &str {
        &self.generator_id
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> + '_ {
        (0..self.m).map(move |i| self.point(i))
    }

    pub fn raw(&self) -> &[f64] {
        &self.points
    }

    /// A copy with the points reordered by `perm`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.m {
            return Err(Error::DimensionMismatch {
                what: "permutation",
                expected: self.m,
                got: perm.len(),
            });
        }
        let mut points = Vec::with_capacity(self.points.len());
        for &i in perm {
            points.extend_from_slice(self.point(i));
        }
        Ok(Self {
            points,
            ..self.clone()
        })
    }
}

/// Observed records `Y_1..Y_n`.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservedData<R> {
    records: Vec<R>,
}

impl<R> ObservedData<R> {
    pub fn new(records: Vec<R>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InvalidArgument("observed data needs n >= 1 records".into()));
        }
        Ok(Self { records })
    }

    pub fn n(&self) -> usize {
        self.records.len()
    }

    pub fn records(&self) -> &[R] {
        &self.records
    }

    pub fn record(&self, j: usize) -> &R {
        &self.records[j]
    }
}

/// Where record `j` takes its Monte Carlo sample from.
///
/// A single [`MonteCarloSample`] is the shared scheme: every record reuses
/// the same draws. [`FreshSamples`] gives each record its own block.
pub trait SampleSource: Sync {
    fn for_record(&self, j: usize) -> &MonteCarloSample;
}

impl SampleSource for MonteCarloSample {
    fn for_record(&self, _j: usize) -> &MonteCarloSample {
        self
    }
}

/// Independent per-record samples; record `j` uses ChaCha stream `j`.
#[derive(Clone, Debug)]
pub struct FreshSamples {
    samples: Vec<MonteCarloSample>,
}

impl FreshSamples {
    pub fn draw<M: MissingDataModel>(model: &M, n: usize, m_per_obs: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("fresh scheme needs n >= 1".into()));
        }
        let samples = (0..n as u64)
            .map(|j| draw_sample_stream(model, m_per_obs, seed, j))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[MonteCarloSample] {
        &self.samples
    }

    pub fn m_per_obs(&self) -> usize {
        self.samples[0].m()
    }
}

impl SampleSource for FreshSamples {
    fn for_record(&self, j: usize) -> &MonteCarloSample {
        &self.samples[j]
    }
}

/// Draws `m` i.i.d. points from the model's importance density.
pub fn draw_sample<M: MissingDataModel>(model: &M, m: usize, seed: u64) -> Result<MonteCarloSample> {
    draw_sample_stream(model, m, seed, 0)
}

pub fn draw_sample_stream<M: MissingDataModel>(
    model: &M,
    m: usize,
    seed: u64,
    stream: u64,
) -> Result<MonteCarloSample> {
    if m == 0 {
        return Err(Error::InvalidArgument("Monte Carlo sample size m must be >= 1".into()));
    }
    let dim = model.missing_dim();
    let mut points = vec![0.0; m * dim];
    let mut rng = McStream::new(seed, stream);
    if dim > 0 {
        for chunk in points.chunks_exact_mut(dim) {
            model.sample_importance(&mut rng, chunk);
        }
    }
    Ok(MonteCarloSample {
        points,
        dim,
        m,
        seed,
        stream,
        generator_id: GENERATOR_ID.to_string(),
    })
}

fn check_theta<M: MissingDataModel>(model: &M, theta: &[f64]) -> Result<()> {
    if theta.len() != model.theta_dim() {
        return Err(Error::DimensionMismatch {
            what: "theta",
            expected: model.theta_dim(),
            got: theta.len(),
        });
    }
    Ok(())
}

fn check_sample<M: MissingDataModel>(model: &M, sample: &MonteCarloSample) -> Result<()> {
    if sample.dim() != model.missing_dim() {
        return Err(Error::DimensionMismatch {
            what: "sample point",
            expected: model.missing_dim(),
            got: sample.dim(),
        });
    }
    Ok(())
}

/// How many derivatives a record pass accumulates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Order {
    Value,
    Score,
    Hessian,
}

/// Per-record log marginal and (optionally) its derivatives.
#[derive(Clone, Debug)]
pub struct RecordTerms {
    pub log_marginal: f64,
    /// `Σ_i u_i s_i`, the derivative of `log f_{θ,m}(y)`.
    pub score: Vec<f64>,
    /// Row-major second derivative of `log f_{θ,m}(y)`.
    pub hessian: Vec<f64>,
}

/// Streaming weighted reduction over sample points.
///
/// Holds `Σ e_i`, `Σ e_i s_i`, `Σ e_i (H_i + s_i s_iᵀ)` with
/// `e_i = exp(ρ_i − max_ρ)`, rescaling whenever the running maximum grows.
struct Accumulator {
    order: Order,
    d: usize,
    max: f64,
    total: f64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl Accumulator {
    fn new(order: Order, d: usize) -> Self {
        Self {
            order,
            d,
            max: f64::NEG_INFINITY,
            total: 0.0,
            first: if order >= Order::Score { vec![0.0; d] } else { Vec::new() },
            second: if order >= Order::Hessian { vec![0.0; d * d] } else { Vec::new() },
        }
    }

    fn push(&mut self, rho: f64, grad: &[f64], hess: &[f64]) {
        if rho == f64::NEG_INFINITY {
            return;
        }
        if rho > self.max {
            let c = (self.max - rho).exp();
            self.total *= c;
            self.first.iter_mut().for_each(|v| *v *= c);
            self.second.iter_mut().for_each(|v| *v *= c);
            self.max = rho;
        }
        let e = (rho - self.max).exp();
        self.total += e;
        if self.order >= Order::Score {
            for (f, g) in self.first.iter_mut().zip(grad) {
                *f += e * g;
            }
        }
        if self.order >= Order::Hessian {
            let d = self.d;
            for a in 0..d {
                let ega = e * grad[a];
                let row = &mut self.second[a * d..(a + 1) * d];
                let hrow = &hess[a * d..(a + 1) * d];
                for b in 0..d {
                    row[b] += e * hrow[b] + ega * grad[b];
                }
            }
        }
    }

    fn finish(self, m: usize) -> Result<RecordTerms> {
        if self.max == f64::NEG_INFINITY {
            return Err(Error::AllImpossible { record: None });
        }
        if !self.max.is_finite() || !self.total.is_finite() {
            return Err(Error::NonFinite(format!("log ratio maximum {}", self.max)));
        }
        let log_marginal = self.max + self.total.ln() - (m as f64).ln();
        let score: Vec<f64> = self.first.iter().map(|v| v / self.total).collect();
        let mut hessian: Vec<f64> = self.second.iter().map(|v| v / self.total).collect();
        if self.order >= Order::Hessian {
            let d = self.d;
            for a in 0..d {
                for b in 0..d {
                    hessian[a * d + b] -= score[a] * score[b];
                }
            }
            // exact symmetry
            for a in 0..d {
                for b in (a + 1)..d {
                    let s = 0.5 * (hessian[a * d + b] + hessian[b * d + a]);
                    hessian[a * d + b] = s;
                    hessian[b * d + a] = s;
                }
            }
        }
        Ok(RecordTerms {
            log_marginal,
            score,
            hessian,
        })
    }
}

fn record_pass<M: MissingDataModel>(
    model: &M,
    theta: &[f64],
    y: &M::Record,
    sample: &MonteCarloSample,
    order: Order,
) -> Result<RecordTerms> {
    let d = model.theta_dim();
    let mut acc = Accumulator::new(order, d);
    let mut grad = vec![0.0; if order >= Order::Score { d } else { 0 }];
    let mut hess = vec![0.0; if order >= Order::Hessian { d * d } else { 0 }];
    for i in 0..sample.m() {
        let x = sample.point(i);
        let rho = match order {
            Order::Value => model.log_ratio(theta, x, y),
            Order::Score => model.log_ratio_grad(theta, x, y, &mut grad),
            Order::Hessian => model.log_ratio_hess(theta, x, y, &mut grad, &mut hess),
        };
        if rho.is_nan() || rho == f64::INFINITY {
            return Err(Error::NonFinite(format!("log ratio {rho} at sample point {i}")));
        }
        acc.push(rho, &grad, &hess);
    }
    acc.finish(sample.m())
}

/// Log marginal, score and Hessian of `log f_{θ,m}(y)` for one record.
pub fn record_terms<M: MissingDataModel>(
    model: &M,
    theta: &[f64],
    y: &M::Record,
    sample: &MonteCarloSample,
) -> Result<RecordTerms> {
    check_theta(model, theta)?;
    check_sample(model, sample)?;
    record_pass(model, theta, y, sample, Order::Hessian)
}

/// `log f_{θ,m}(y) = logsumexp_i ρ(θ, X_i, y) − log m`.
pub fn log_marginal_mc<M: MissingDataModel>(
    model: &M,
    theta: &[f64],
    y: &M::Record,
    sample: &MonteCarloSample,
) -> Result<f64> {
    check_theta(model, theta)?;
    check_sample(model, sample)?;
    Ok(record_pass(model, theta, y, sample, Order::Value)?.log_marginal)
}

/// Raw log ratios `ρ(θ, X_i, y)` in sample order.
pub fn log_ratios<M: MissingDataModel>(
    model: &M,
    theta: &[f64],
    y: &M::Record,
    sample: &MonteCarloSample,
) -> Result<Vec<f64>> {
    check_theta(model, theta)?;
    check_sample(model, sample)?;
    Ok(sample.points().map(|x| model.log_ratio(theta, x, y)).collect())
}

/// Normalized importance weights `u_i = softmax_i ρ(θ, X_i, y)`.
pub fn weights<M: MissingDataModel>(
    model: &M,
    theta: &[f64],
    y: &M::Record,
    sample: &MonteCarloSample,
) -> Result<Vec<f64>> {
    let rho = log_ratios(model, theta, y, sample)?;
    softmax(&rho)
}

pub(crate) fn softmax(rho: &[f64]) -> Result<Vec<f64>> {
    let max = rho.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::AllImpossible { record: None });
    }
    if !max.is_finite() {
        return Err(Error::NonFinite(format!("log ratio maximum {max}")));
    }
    let mut u: Vec<f64> = rho.iter().map(|r| (r - max).exp()).collect();
    let total: f64 = u.iter().sum();
    u.iter_mut().for_each(|v| *v /= total);
    Ok(u)
}

fn tag_record(err: Error, j: usize) -> Error {
    match err {
        Error::AllImpossible { .. } => Error::AllImpossible { record: Some(j) },
        other => other,
    }
}

fn all_records<M, S>(
    model: &M,
    theta: &[f64],
    data: &ObservedData<M::Record>,
    samples: &S,
    order: Order,
) -> Result<Vec<RecordTerms>>
where
    M: MissingDataModel,
    S: SampleSource + ?Sized,
{
    check_theta(model, theta)?;
    for j in 0..data.n() {
        check_sample(model, samples.for_record(j))?;
    }
    data.records()
        .par_iter()
        .enumerate()
        .map(|(j, y)| {
            record_pass(model, theta, y, samples.for_record(j), order).map_err(|e| tag_record(e, j))
        })
        .collect()
}

/// `l_{m,n}(θ) = Σ_j log f_{θ,m}(Y_j)`.
pub fn mc_loglik<M, S>(model: &M, theta: &[f64], data: &ObservedData<M::Record>, samples: &S) -> Result<f64>
where
    M: MissingDataModel,
    S: SampleSource + ?Sized,
{
    let terms = all_records(model, theta, data, samples, Order::Value)?;
    Ok(terms.iter().map(|t| t.log_marginal).sum())
}

/// Gradient of [`mc_loglik`] for the fixed sample.
pub fn mc_score<M, S>(
    model: &M,
    theta: &[f64],
    data: &ObservedData<M::Record>,
    samples: &S,
) -> Result<DVector<f64>>
where
    M: MissingDataModel,
    S: SampleSource + ?Sized,
{
    Ok(mc_value_and_score(model, theta, data, samples)?.1)
}

/// [`mc_loglik`] and [`mc_score`] in one pass; the optimizer objective.
pub fn mc_value_and_score<M, S>(
    model: &M,
    theta: &[f64],
    data: &ObservedData<M::Record>,
    samples: &S,
) -> Result<(f64, DVector<f64>)>
where
    M: MissingDataModel,
    S: SampleSource + ?Sized,
{
    let terms = all_records(model, theta, data, samples, Order::Score)?;
    let d = model.theta_dim();
    let mut value = 0.0;
    let mut grad = DVector::zeros(d);
    for t in &terms {
        value += t.log_marginal;
        for a in 0..d {
            grad[a] += t.score[a];
        }
    }
    Ok((value, grad))
}

/// Hessian of [`mc_loglik`] for the fixed sample.
pub fn mc_hessian<M, S>(
    model: &M,
    theta: &[f64],
    data: &ObservedData<M::Record>,
    samples: &S,
) -> Result<DMatrix<f64>>
where
    M: MissingDataModel,
    S: SampleSource + ?Sized,
{
    let terms = all_records(model, theta, data, samples, Order::Hessian)?;
    let d = model.theta_dim();
    let mut hess = DMatrix::zeros(d, d);
    for t in &terms {
        for a in 0..d {
            for b in 0..d {
                hess[(a, b)] += t.hessian[a * d + b];
            }
        }
    }
    Ok(hess)
}

/// Per-record terms with full derivatives, in record order.
pub fn per_record_terms<M, S>(
    model: &M,
    theta: &[f64],
    data: &ObservedData<M::Record>,
    samples: &S,
) -> Result<Vec<RecordTerms>>
where
    M: MissingDataModel,
    S: SampleSource + ?Sized,
{
    all_records(model, theta, data, samples, Order::Hessian)
}

/// Per-record scores `g_j = ∇ log f_{θ,m}(Y_j)`, in record order.
pub fn per_record_scores<M, S>(
    model: &M,
    theta: &[f64],
    data: &ObservedData<M::Record>,
    samples: &S,
) -> Result<Vec<Vec<f64>>>
where
    M: MissingDataModel,
    S: SampleSource + ?Sized,
{
    Ok(all_records(model, theta, data, samples, Order::Score)?
        .into_iter()
        .map(|t| t.score)
        .collect())
}

/// Log ratios and per-point scores for one record (`m` and `m × d`, row-major).
pub fn point_scores<M: MissingDataModel>(
    model: &M,
    theta: &[f64],
    y: &M::Record,
    sample: &MonteCarloSample,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_theta(model, theta)?;
    check_sample(model, sample)?;
    let d = model.theta_dim();
    let mut rho = Vec::with_capacity(sample.m());
    let mut scores = vec![0.0; sample.m() * d];
    for (i, x) in sample.points().enumerate() {
        rho.push(model.log_ratio_grad(theta, x, y, &mut scores[i * d..(i + 1) * d]));
    }
    Ok((rho, scores))
}

/// Monte Carlo log likelihood under the fresh-sample scheme: record `j`
/// uses its own `m_per_obs` draws from stream `j` of `seed`.
pub fn mc_loglik_fresh<M: MissingDataModel>(
    model: &M,
    theta: &[f64],
    data: &ObservedData<M::Record>,
    m_per_obs: usize,
    seed: u64,
) -> Result<f64> {
    let fresh = FreshSamples::draw(model, data.n(), m_per_obs, seed)?;
    mc_loglik(model, theta, data, &fresh)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `x ~ N(0,1)`, `y | x ~ N(θ₀ + θ₁ x, 1)`: ratio is Gaussian in θ.
    struct LinearGaussian;

    impl MissingDataModel for LinearGaussian {
        type Record = f64;
        fn theta_dim(&self) -> usize {
            2
        }
        fn missing_dim(&self) -> usize {
            1
        }
        fn layout(&self) -> ParamLayout {
            ParamLayout::new([("theta", 2)])
        }
        fn log_ratio(&self, t: &[f64], x: &[f64], y: &f64) -> f64 {
            let r = y - t[0] - t[1] * x[0];
            -0.5 * r * r - 0.5 * (2.0 * std::f64::consts::PI).ln()
        }
        fn log_ratio_grad(&self, t: &[f64], x: &[f64], y: &f64, g: &mut [f64]) -> f64 {
            let r = y - t[0] - t[1] * x[0];
            g[0] = r;
            g[1] = r * x[0];
            self.log_ratio(t, x, y)
        }
        fn log_ratio_hess(&self, t: &[f64], x: &[f64], y: &f64, g: &mut [f64], h: &mut [f64]) -> f64 {
            h[0] = -1.0;
            h[1] = -x[0];
            h[2] = -x[0];
            h[3] = -x[0] * x[0];
            self.log_ratio_grad(t, x, y, g)
        }
        fn sample_importance(&self, s: &mut McStream, out: &mut [f64]) {
            out[0] = s.standard_normal();
        }
    }

    /// Ratio is `-inf` unless `x > y`.
    struct Truncated;

    impl MissingDataModel for Truncated {
        type Record = f64;
        fn theta_dim(&self) -> usize {
            1
        }
        fn missing_dim(&self) -> usize {
            1
        }
        fn layout(&self) -> ParamLayout {
            ParamLayout::new([("t", 1)])
        }
        fn log_ratio(&self, t: &[f64], x: &[f64], y: &f64) -> f64 {
            if x[0] > *y {
                t[0]
            } else {
                f64::NEG_INFINITY
            }
        }
        fn log_ratio_grad(&self, t: &[f64], x: &[f64], y: &f64, g: &mut [f64]) -> f64 {
            g[0] = 1.0;
            self.log_ratio(t, x, y)
        }
        fn log_ratio_hess(&self, t: &[f64], x: &[f64], y: &f64, g: &mut [f64], h: &mut [f64]) -> f64 {
            h[0] = 0.0;
            self.log_ratio_grad(t, x, y, g)
        }
        fn sample_importance(&self, s: &mut McStream, out: &mut [f64]) {
            out[0] = s.standard_normal();
        }
    }

    #[test]
    fn zero_sample_size_rejected() {
        assert!(matches!(
            draw_sample(&LinearGaussian, 0, 1),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn stream_prefix_property() {
        let one = draw_sample(&LinearGaussian, 1, 17).unwrap();
        let two = draw_sample(&LinearGaussian, 2, 17).unwrap();
        assert_eq!(one.point(0), two.point(0));
    }

    #[test]
    fn single_point_sum_is_the_ratio() {
        let s = draw_sample(&LinearGaussian, 1, 3).unwrap();
        let theta = [0.3, -0.7];
        let lm = log_marginal_mc(&LinearGaussian, &theta, &1.2, &s).unwrap();
        assert_eq!(lm, LinearGaussian.log_ratio(&theta, s.point(0), &1.2));
        assert_eq!(weights(&LinearGaussian, &theta, &1.2, &s).unwrap(), vec![1.0]);
    }

    #[test]
    fn all_impossible_is_an_error_with_record_index() {
        let s = draw_sample(&Truncated, 50, 1).unwrap();
        assert!(matches!(
            log_marginal_mc(&Truncated, &[0.0], &100.0, &s),
            Err(Error::AllImpossible { record: None })
        ));
        let data = ObservedData::new(vec![-1.0, 100.0]).unwrap();
        assert!(matches!(
            mc_loglik(&Truncated, &[0.0], &data, &s),
            Err(Error::AllImpossible { record: Some(1) })
        ));
    }

    #[test]
    fn partially_impossible_points_are_skipped() {
        let s = draw_sample(&Truncated, 1000, 1).unwrap();
        let above = s.points().filter(|x| x[0] > 0.0).count();
        let lm = log_marginal_mc(&Truncated, &[0.25], &0.0, &s).unwrap();
        let expect = 0.25 + (above as f64 / 1000.0).ln();
        assert!((lm - expect).abs() < 1e-12);
    }

    #[test]
    fn large_ratios_do_not_overflow() {
        let s = draw_sample(&Truncated, 10, 2).unwrap();
        let lm = log_marginal_mc(&Truncated, &[5000.0], &-10.0, &s).unwrap();
        assert!((lm - 5000.0).abs() < 1e-9);
    }

    #[test]
    fn gaussian_marginal_matches_closed_form() {
        // y ~ N(θ₀, 1 + θ₁²)
        let s = draw_sample(&LinearGaussian, 200_000, 5).unwrap();
        let theta = [0.5, 0.8];
        let y = 1.1;
        let v: f64 = 1.0 + 0.64;
        let exact = -0.5 * (2.0 * std::f64::consts::PI * v).ln() - 0.5 * (y - 0.5) * (y - 0.5) / v;
        let lm = log_marginal_mc(&LinearGaussian, &theta, &y, &s).unwrap();
        assert!((lm - exact).abs() < 0.01, "{lm} vs {exact}");
    }

    #[test]
    fn score_and_hessian_match_differences() {
        let s = draw_sample(&LinearGaussian, 300, 11).unwrap();
        let data = ObservedData::new(vec![0.2, -1.3, 2.5]).unwrap();
        let theta = [0.1, 0.9];
        let g = mc_score(&LinearGaussian, &theta, &data, &s).unwrap();
        let h = mc_hessian(&LinearGaussian, &theta, &data, &s).unwrap();
        let eps = 1e-5;
        for a in 0..2 {
            let mut tp = theta;
            let mut tm = theta;
            tp[a] += eps;
            tm[a] -= eps;
            let fd = (mc_loglik(&LinearGaussian, &tp, &data, &s).unwrap()
                - mc_loglik(&LinearGaussian, &tm, &data, &s).unwrap())
                / (2.0 * eps);
            assert!((fd - g[a]).abs() < 1e-6 * (1.0 + g[a].abs()));
            let gp = mc_score(&LinearGaussian, &tp, &data, &s).unwrap();
            let gm = mc_score(&LinearGaussian, &tm, &data, &s).unwrap();
            for b in 0..2 {
                let fd2 = (gp[b] - gm[b]) / (2.0 * eps);
                assert!((fd2 - h[(b, a)]).abs() < 1e-5 * (1.0 + h[(b, a)].abs()));
            }
        }
    }

    #[test]
    fn fresh_scheme_with_one_record_equals_shared() {
        let data = ObservedData::new(vec![0.7]).unwrap();
        let s = draw_sample(&LinearGaussian, 64, 99).unwrap();
        let shared = mc_loglik(&LinearGaussian, &[0.0, 1.0], &data, &s).unwrap();
        let fresh = mc_loglik_fresh(&LinearGaussian, &[0.0, 1.0], &data, 64, 99).unwrap();
        assert_eq!(shared.to_bits(), fresh.to_bits());
    }

    #[test]
    fn fresh_samples_are_independent_per_record() {
        let f = FreshSamples::draw(&LinearGaussian, 3, 5, 1).unwrap();
        assert_ne!(f.for_record(0).raw(), f.for_record(1).raw());
        assert_eq!(f.for_record(2).stream(), 2);
    }

    #[test]
    fn theta_dimension_is_checked() {
        let s = draw_sample(&LinearGaussian, 4, 1).unwrap();
        assert!(matches!(
            log_marginal_mc(&LinearGaussian, &[0.0], &0.0, &s),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn layout_names_and_lookup() {
        let l = ParamLayout::new([("beta", 2), ("delta", 1)]);
        assert_eq!(l.names(), vec!["beta1", "beta2", "delta1"]);
        assert_eq!(l.index_of("delta1"), Some(2));
        assert_eq!(l.index_of("sigma"), None);
        let p = ParamVector::new(vec![1.0, 2.0, 3.0], l).unwrap();
        assert_eq!(p.block_values("delta"), Some(&[3.0][..]));
    }
}
