//! Logit–Normal GLMM: Bernoulli responses with normal random effects.
//!
//! Each record is a binary vector of length `T` with independent components
//! given the random effect `b ~ N(0, I_q)`, and
//!
//! ```text
//! η = Xβ + ZΔb,   P(y_k = 1 | b) = logistic(η_k)
//! ```
//!
//! where `Δ` is diagonal with entries `δ_{delta_map(s)}` (square roots of
//! variance components, shared across slots through `delta_map`). The
//! importance density is the standard normal law of `b`, so the importance
//! ratio is the conditional Bernoulli likelihood `f_θ(y | b)`.
//!
//! `θ = (β, δ)` with layout blocks `beta` (length `p`) and `delta`
//! (length `r`). The augmented design `M(b) = [X | C(b)]`, with
//! `C(b)_{kl} = Σ_{s: delta_map(s) = l} Z_{ks} b_s`, satisfies `η = M(b) θ`,
//! so derivatives are those of a logistic regression on `M(b)`.

use serde::{Deserialize, Serialize};

use crate::engine::{MissingDataModel, ObservedData, ParamLayout};
use crate::error::{Error, Result};
use crate::rng::McStream;

/// `log(1 + e^η)` without overflow.
#[inline]
pub fn softplus(eta: f64) -> f64 {
    eta.max(0.0) + (-eta.abs()).exp().ln_1p()
}

#[inline]
pub fn logistic(eta: f64) -> f64 {
    let e = (-eta.abs()).exp();
    if eta >= 0.0 {
        1.0 / (1.0 + e)
    } else {
        e / (1.0 + e)
    }
}

/// Softplus and logistic sharing one exponential.
#[inline]
fn softplus_logistic(eta: f64) -> (f64, f64) {
    let e = (-eta.abs()).exp();
    let sp = eta.max(0.0) + e.ln_1p();
    let p = if eta >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
    (sp, p)
}

/// Design matrices for `η = Xβ + ZΔb`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DesignSpec", into = "DesignSpec")]
pub struct GlmmDesign {
    name: Option<String>,
    t: usize,
    p: usize,
    q: usize,
    r: usize,
    /// Row-major `T × p`.
    x: Vec<f64>,
    /// Row-major `T × q`.
    z: Vec<f64>,
    /// Zero-based δ index for each column of `Z`.
    delta_map: Vec<usize>,
    /// Nonzero `(s, Z_ks)` per row, for the random-effect part.
    z_rows: Vec<Vec<(usize, f64)>>,
}

/// Serialized model spec: `{"name": ..., "X": [[..]], "Z": [[..]], "delta_map": [1, ..]}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DesignSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(rename = "X")]
    pub x: Vec<Vec<f64>>,
    #[serde(rename = "Z", default)]
    pub z: Vec<Vec<f64>>,
    #[serde(default)]
    pub delta_map: Vec<usize>,
}

impl TryFrom<DesignSpec> for GlmmDesign {
    type Error = Error;

    fn try_from(spec: DesignSpec) -> Result<Self> {
        let t = spec.x.len();
        if t == 0 {
            return Err(Error::InvalidArgument("field \"X\": needs at least one row".into()));
        }
        let p = spec.x[0].len();
        if let Some(k) = spec.x.iter().position(|row| row.len() != p) {
            return Err(Error::InvalidArgument(format!(
                "field \"X\": row {} has {} columns, expected {p}",
                k + 1,
                spec.x[k].len()
            )));
        }
        let z = if spec.z.is_empty() {
            vec![Vec::new(); t]
        } else {
            spec.z
        };
        if z.len() != t {
            return Err(Error::InvalidArgument(format!(
                "field \"Z\": has {} rows but \"X\" has {t}",
                z.len()
            )));
        }
        let q = z[0].len();
        if let Some(k) = z.iter().position(|row| row.len() != q) {
            return Err(Error::InvalidArgument(format!(
                "field \"Z\": row {} has {} columns, expected {q}",
                k + 1,
                z[k].len()
            )));
        }
        if spec.delta_map.len() != q {
            return Err(Error::InvalidArgument(format!(
                "field \"delta_map\": has {} entries but \"Z\" has {q} columns",
                spec.delta_map.len()
            )));
        }
        if spec.delta_map.contains(&0) {
            return Err(Error::InvalidArgument(
                "field \"delta_map\": indices are 1-based".into(),
            ));
        }
        let r = spec.delta_map.iter().copied().max().unwrap_or(0);
        for l in 1..=r {
            if !spec.delta_map.contains(&l) {
                return Err(Error::InvalidArgument(format!(
                    "field \"delta_map\": index {l} is unused (indices must cover 1..={r})"
                )));
            }
        }
        let flat = |rows: &[Vec<f64>], field: &str| -> Result<Vec<f64>> {
            let v: Vec<f64> = rows.iter().flatten().copied().collect();
            if v.iter().any(|a| !a.is_finite()) {
                return Err(Error::InvalidArgument(format!("field \"{field}\": non-finite entry")));
            }
            Ok(v)
        };
        let x = flat(&spec.x, "X")?;
        let z = flat(&z, "Z")?;
        let delta_map: Vec<usize> = spec.delta_map.iter().map(|l| l - 1).collect();
        Ok(Self::assemble(spec.name, t, p, q, r, x, z, delta_map))
    }
}

impl From<GlmmDesign> for DesignSpec {
    fn from(d: GlmmDesign) -> Self {
        DesignSpec {
            name: d.name.clone(),
            x: (0..d.t).map(|k| d.x[k * d.p..(k + 1) * d.p].to_vec()).collect(),
            z: (0..d.t).map(|k| d.z[k * d.q..(k + 1) * d.q].to_vec()).collect(),
            delta_map: d.delta_map.iter().map(|l| l + 1).collect(),
        }
    }
}

impl GlmmDesign {
    /// Builds a design from row-major matrices and a 1-based `delta_map`.
    pub fn new(x: Vec<Vec<f64>>, z: Vec<Vec<f64>>, delta_map: Vec<usize>) -> Result<Self> {
        Self::try_from(DesignSpec {
            name: None,
            x,
            z,
            delta_map,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        name: Option<String>,
        t: usize,
        p: usize,
        q: usize,
        r: usize,
        x: Vec<f64>,
        z: Vec<f64>,
        delta_map: Vec<usize>,
    ) -> Self {
        let z_rows = (0..t)
            .map(|k| {
                (0..q)
                    .filter_map(|s| {
                        let v = z[k * q + s];
                        (v != 0.0).then_some((s, v))
                    })
                    .collect()
            })
            .collect();
        Self {
            name,
            t,
            p,
            q,
            r,
            x,
            z,
            delta_map,
            z_rows,
        }
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    /// The one-dimensional random-intercept model used for the Booth–Hobert
    /// data: `η_k = β·(k/T) + σ·b`, `k = 1..T`.
    pub fn mcculloch(t: usize) -> Self {
        let x = (1..=t).map(|k| vec![k as f64 / t as f64]).collect();
        let z = vec![vec![1.0]; t];
        Self::new(x, z, vec![1])
            .expect("static design")
            .with_name(format!("mcculloch-t{t}"))
    }

    /// The four-outbreak influenza design with a six-dimensional `b` and
    /// `δ` slots `(δ₁, δ₂, δ₃, δ₃, δ₃, δ₃)`.
    ///
    /// The induced covariance of `ZΔb` has common variance
    /// `σ² = δ₁² + δ₂² + δ₃²`, correlation `ρ₁ = (δ₁² + δ₂²)/σ²` among the
    /// first three outbreaks and `ρ₂ = (δ₁² − δ₂²)/σ²` between each of them
    /// and the fourth; see [`influenza_correlation_params`].
    pub fn influenza() -> Self {
        let x = (0..4)
            .map(|k| (0..4).map(|c| if c == k { 1.0 } else { 0.0 }).collect())
            .collect();
        let z = vec![
            vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0],
            vec![1.0, 1.0, 0.0, 1.0, 0.0, 0.0],
            vec![1.0, 1.0, 0.0, 0.0, 1.0, 0.0],
            vec![1.0, -1.0, 0.0, 0.0, 0.0, 1.0],
        ];
        Self::new(x, z, vec![1, 2, 3, 3, 3, 3])
            .expect("static design")
            .with_name("influenza")
    }

    /// A crossed female/male random-effects design for mating experiments.
    ///
    /// Each entry of `matings` is `(female, male, female_type, male_type)`
    /// with 0-based animal ids and types in `{0, 1}`. `X` holds indicators of
    /// the four type crosses in the order `(00, 01, 10, 11)`; `Z` has one
    /// column per female followed by one per male, with `δ₁` shared by all
    /// females and `δ₂` by all males.
    pub fn crossed_mating(matings: &[(usize, usize, u8, u8)]) -> Result<Self> {
        if matings.is_empty() {
            return Err(Error::InvalidArgument("no matings supplied".into()));
        }
        let nf = matings.iter().map(|m| m.0).max().unwrap() + 1;
        let nm = matings.iter().map(|m| m.1).max().unwrap() + 1;
        let mut x = Vec::with_capacity(matings.len());
        let mut z = Vec::with_capacity(matings.len());
        for &(f, m, ft, mt) in matings {
            if ft > 1 || mt > 1 {
                return Err(Error::InvalidArgument("animal types must be 0 or 1".into()));
            }
            let mut row = vec![0.0; 4];
            row[(2 * ft + mt) as usize] = 1.0;
            x.push(row);
            let mut zr = vec![0.0; nf + nm];
            zr[f] = 1.0;
            zr[nf + m] = 1.0;
            z.push(zr);
        }
        let delta_map = (0..nf).map(|_| 1).chain((0..nm).map(|_| 2)).collect();
        Self::new(x, z, delta_map)
    }

    pub fn name(&self) -> Option<&str> {
        self.name.as_deref()
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn theta_dim(&self) -> usize {
        self.p + self.r
    }

    pub fn x(&self, k: usize, c: usize) -> f64 {
        self.x[k * self.p + c]
    }

    pub fn z(&self, k: usize, s: usize) -> f64 {
        self.z[k * self.q + s]
    }

    /// Zero-based δ index of random-effect slot `s`.
    pub fn delta_index(&self, s: usize) -> usize {
        self.delta_map[s]
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new([("beta", self.p), ("delta", self.r)])
    }

    /// Default optimizer start: `β = 0`, `δ = 0.1` (zero is a saddle of the
    /// δ sign symmetry).
    pub fn default_start(&self) -> Vec<f64> {
        let mut theta = vec![0.0; self.theta_dim()];
        theta[self.p..].iter_mut().for_each(|v| *v = 0.1);
        theta
    }

    /// Replaces each δ by its absolute value.
    ///
    /// The exact likelihood is even in each δ. A Monte Carlo likelihood is
    /// not: flipping δ_l equals negating the sample coordinates that δ_l
    /// scales. Plug-ins must therefore be evaluated at the uncanonicalized
    /// maximizer and then mapped with [`GlmmDesign::reflection`].
    pub fn canonicalize(&self, theta: &mut [f64]) {
        theta[self.p..].iter_mut().for_each(|v| *v = v.abs());
    }

    /// Diagonal of `D` with `canonical θ = Dθ`: `-1` for each negative δ,
    /// `+1` elsewhere.
    pub fn reflection(&self, theta: &[f64]) -> Vec<f64> {
        theta
            .iter()
            .enumerate()
            .map(|(k, v)| if k >= self.p && *v < 0.0 { -1.0 } else { 1.0 })
            .collect()
    }

    pub fn validate_record(&self, y: &[u8]) -> Result<()> {
        if y.len() != self.t {
            return Err(Error::DimensionMismatch {
                what: "response record",
                expected: self.t,
                got: y.len(),
            });
        }
        if let Some(k) = y.iter().position(|&v| v > 1) {
            return Err(Error::InvalidArgument(format!(
                "response entry {} is {}, expected 0 or 1",
                k + 1,
                y[k]
            )));
        }
        Ok(())
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.theta_dim() {
            return Err(Error::DimensionMismatch {
                what: "theta",
                expected: self.theta_dim(),
                got: theta.len(),
            });
        }
        Ok(())
    }

    fn check_b(&self, b: &[f64]) -> Result<()> {
        if b.len() != self.q {
            return Err(Error::DimensionMismatch {
                what: "random effect",
                expected: self.q,
                got: b.len(),
            });
        }
        Ok(())
    }

    #[inline]
    fn eta_k(&self, theta: &[f64], b: &[f64], k: usize) -> f64 {
        let p = self.p;
        let mut eta = 0.0;
        for (c, &beta) in theta[..p].iter().enumerate() {
            eta += self.x[k * p + c] * beta;
        }
        for &(s, zv) in &self.z_rows[k] {
            eta += zv * theta[p + self.delta_map[s]] * b[s];
        }
        eta
    }

    /// Row `k` of the augmented design `M(b)` added into `out` scaled by `w`.
    #[inline]
    fn add_augmented_row(&self, b: &[f64], k: usize, w: f64, out: &mut [f64]) {
        let p = self.p;
        for (o, x) in out[..p].iter_mut().zip(&self.x[k * p..(k + 1) * p]) {
            *o += w * x;
        }
        for &(s, zv) in &self.z_rows[k] {
            out[p + self.delta_map[s]] += w * zv * b[s];
        }
    }

    fn augmented_row(&self, b: &[f64], k: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        self.add_augmented_row(b, k, 1.0, out);
    }

    fn log_ratio_unchecked(&self, theta: &[f64], b: &[f64], y: &[u8]) -> f64 {
        let mut total = 0.0;
        for (k, &yk) in y.iter().enumerate() {
            let eta = self.eta_k(theta, b, k);
            total += if yk == 1 { eta } else { 0.0 } - softplus(eta);
        }
        total
    }

    fn log_ratio_grad_unchecked(&self, theta: &[f64], b: &[f64], y: &[u8], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|v| *v = 0.0);
        let mut total = 0.0;
        for (k, &yk) in y.iter().enumerate() {
            let eta = self.eta_k(theta, b, k);
            let (sp, pk) = softplus_logistic(eta);
            let yf = yk as f64;
            total += yf * eta - sp;
            self.add_augmented_row(b, k, yf - pk, grad);
        }
        total
    }

    fn log_ratio_hess_unchecked(
        &self,
        theta: &[f64],
        b: &[f64],
        y: &[u8],
        grad: &mut [f64],
        hess: &mut [f64],
    ) -> f64 {
        let d = self.theta_dim();
        grad.iter_mut().for_each(|v| *v = 0.0);
        hess.iter_mut().for_each(|v| *v = 0.0);
        let mut row = vec![0.0; d];
        let mut total = 0.0;
        for (k, &yk) in y.iter().enumerate() {
            let eta = self.eta_k(theta, b, k);
            let (sp, pk) = softplus_logistic(eta);
            let yf = yk as f64;
            total += yf * eta - sp;
            self.augmented_row(b, k, &mut row);
            let w = pk * (1.0 - pk);
            for a in 0..d {
                grad[a] += (yf - pk) * row[a];
                let wa = w * row[a];
                if wa != 0.0 {
                    for c in 0..d {
                        hess[a * d + c] -= wa * row[c];
                    }
                }
            }
        }
        total
    }
}

/// `(σ, ρ₁, ρ₂)` implied by influenza-design `(δ₁, δ₂, δ₃)`.
pub fn influenza_correlation_params(delta: &[f64]) -> (f64, f64, f64) {
    let (a, b, c) = (delta[0] * delta[0], delta[1] * delta[1], delta[2] * delta[2]);
    let s2 = a + b + c;
    (s2.sqrt(), (a + b) / s2, (a - b) / s2)
}

/// Inverse of [`influenza_correlation_params`] with `δ ≥ 0`; needs
/// `ρ₁ ≥ |ρ₂|` and `ρ₁ ≤ 1`.
pub fn influenza_delta(sigma: f64, rho1: f64, rho2: f64) -> Result<[f64; 3]> {
    let a = sigma * sigma * (rho1 + rho2) / 2.0;
    let b = sigma * sigma * (rho1 - rho2) / 2.0;
    let c = sigma * sigma * (1.0 - rho1);
    if a < 0.0 || b < 0.0 || c < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "(sigma, rho1, rho2) = ({sigma}, {rho1}, {rho2}) is not representable"
        )));
    }
    Ok([a.sqrt(), b.sqrt(), c.sqrt()])
}

/// `β` and `δ` in named form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlmmParams {
    pub beta: Vec<f64>,
    pub delta: Vec<f64>,
}

impl GlmmParams {
    pub fn new(beta: Vec<f64>, delta: Vec<f64>) -> Self {
        Self { beta, delta }
    }

    pub fn from_theta(design: &GlmmDesign, theta: &[f64]) -> Result<Self> {
        design.check_theta(theta)?;
        Ok(Self {
            beta: theta[..design.p].to_vec(),
            delta: theta[design.p..].to_vec(),
        })
    }

    pub fn to_theta(&self) -> Vec<f64> {
        self.beta.iter().chain(&self.delta).copied().collect()
    }

    pub(crate) fn check(&self, design: &GlmmDesign) -> Result<Vec<f64>> {
        if self.beta.len() != design.p {
            return Err(Error::DimensionMismatch {
                what: "beta",
                expected: design.p,
                got: self.beta.len(),
            });
        }
        if self.delta.len() != design.r {
            return Err(Error::DimensionMismatch {
                what: "delta",
                expected: design.r,
                got: self.delta.len(),
            });
        }
        let theta = self.to_theta();
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("GLMM parameters".into()));
        }
        Ok(theta)
    }
}

/// `η = Xβ + ZΔb`.
pub fn linear_predictor(design: &GlmmDesign, params: &GlmmParams, b: &[f64]) -> Result<Vec<f64>> {
    let theta = params.check(design)?;
    design.check_b(b)?;
    Ok((0..design.t).map(|k| design.eta_k(&theta, b, k)).collect())
}

/// `log f_θ(y | b) = Σ_k [y_k η_k − log(1 + e^{η_k})]`.
pub fn log_ratio(design: &GlmmDesign, params: &GlmmParams, b: &[f64], y: &[u8]) -> Result<f64> {
    let theta = params.check(design)?;
    design.check_b(b)?;
    design.validate_record(y)?;
    Ok(design.log_ratio_unchecked(&theta, b, y))
}

/// `M(b)ᵀ (y − p)`.
pub fn log_ratio_grad(design: &GlmmDesign, params: &GlmmParams, b: &[f64], y: &[u8]) -> Result<Vec<f64>> {
    let theta = params.check(design)?;
    design.check_b(b)?;
    design.validate_record(y)?;
    let mut g = vec![0.0; design.theta_dim()];
    design.log_ratio_grad_unchecked(&theta, b, y, &mut g);
    Ok(g)
}

/// `−M(b)ᵀ diag(p(1 − p)) M(b)`, row-major.
pub fn log_ratio_hess(design: &GlmmDesign, params: &GlmmParams, b: &[f64], y: &[u8]) -> Result<Vec<f64>> {
    let theta = params.check(design)?;
    design.check_b(b)?;
    design.validate_record(y)?;
    let d = design.theta_dim();
    let mut g = vec![0.0; d];
    let mut h = vec![0.0; d * d];
    design.log_ratio_hess_unchecked(&theta, b, y, &mut g, &mut h);
    Ok(h)
}

/// Simulates `n` records: `b ~ N(0, I_q)`, then independent Bernoulli
/// responses. Uses stream 0 of `seed`.
pub fn simulate_y(design: &GlmmDesign, params: &GlmmParams, n: usize, seed: u64) -> Result<ObservedData<Vec<u8>>> {
    let theta = params.check(design)?;
    if n == 0 {
        return Err(Error::InvalidArgument("simulate_y needs n >= 1".into()));
    }
    let mut rng = McStream::new(seed, 0);
    let mut b = vec![0.0; design.q];
    let records = (0..n)
        .map(|_| {
            b.iter_mut().for_each(|v| *v = rng.standard_normal());
            (0..design.t)
                .map(|k| u8::from(rng.bernoulli(logistic(design.eta_k(&theta, &b, k)))))
                .collect()
        })
        .collect();
    ObservedData::new(records)
}

/// Validates binary records against the design.
pub fn observed_data(design: &GlmmDesign, records: Vec<Vec<u8>>) -> Result<ObservedData<Vec<u8>>> {
    for (j, y) in records.iter().enumerate() {
        design.validate_record(y).map_err(|e| match e {
            Error::InvalidArgument(msg) => Error::InvalidArgument(format!("record {}: {msg}", j + 1)),
            other => other,
        })?;
    }
    ObservedData::new(records)
}

/// The GLMM as a [`MissingDataModel`] with `h = N(0, I_q)`.
///
/// Records are assumed validated (see [`observed_data`]).
#[derive(Clone, Debug)]
pub struct Glmm {
    design: GlmmDesign,
}

impl Glmm {
    pub fn new(design: GlmmDesign) -> Self {
        Self { design }
    }

    pub fn design(&self) -> &GlmmDesign {
        &self.design
    }
}

impl MissingDataModel for Glmm {
    type Record = Vec<u8>;

    fn theta_dim(&self) -> usize {
        self.design.theta_dim()
    }

    fn missing_dim(&self) -> usize {
        self.design.q
    }

    fn layout(&self) -> ParamLayout {
        self.design.layout()
    }

    fn log_ratio(&self, theta: &[f64], x: &[f64], y: &Vec<u8>) -> f64 {
        self.design.log_ratio_unchecked(theta, x, y)
    }

    fn log_ratio_grad(&self, theta: &[f64], x: &[f64], y: &Vec<u8>, grad: &mut [f64]) -> f64 {
        self.design.log_ratio_grad_unchecked(theta, x, y, grad)
    }

    fn log_ratio_hess(&self, theta: &[f64], x: &[f64], y: &Vec<u8>, grad: &mut [f64], hess: &mut [f64]) -> f64 {
        self.design.log_ratio_hess_unchecked(theta, x, y, grad, hess)
    }

    fn sample_importance(&self, stream: &mut McStream, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = stream.standard_normal();
        }
    }
}
