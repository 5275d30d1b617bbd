//! JSON report types.
//!
//! Floats are written by serde_json in shortest round-trip form, so every
//! binary64 value reads back unchanged. Non-finite values become `null`.

use std::fmt;

use mcmle::optim::OptResult;
use nalgebra::DMatrix;
use serde::de::{MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Values keyed by parameter name, serialized as a JSON object in
/// parameter order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Labeled(pub Vec<(String, f64)>);

impl Labeled {
    pub fn new(names: &[String], values: &[f64]) -> Self {
        Self(names.iter().cloned().zip(values.iter().copied()).collect())
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.0.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn values(&self) -> Vec<f64> {
        self.0.iter().map(|(_, v)| *v).collect()
    }
}

impl Serialize for Labeled {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.0.len()))?;
        for (k, v) in &self.0 {
            map.serialize_entry(k, v)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for Labeled {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = Labeled;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an object of parameter values")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Labeled, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, f64>()? {
                    out.push((k, v));
                }
                Ok(Labeled(out))
            }
        }
        d.deserialize_map(V)
    }
}

/// Row-major nested arrays.
pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerDiagnostics {
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
    pub gtol: f64,
    pub gradient: Vec<f64>,
}

impl From<&OptResult> for OptimizerDiagnostics {
    fn from(r: &OptResult) -> Self {
        Self {
            converged: r.converged,
            iterations: r.iterations,
            grad_norm: r.grad_norm,
            gtol: r.gtol,
            gradient: r.gradient.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub spec_sha256: String,
    pub data_sha256: String,
    pub tool_version: String,
}

impl Provenance {
    pub fn new(spec_sha256: String, data_sha256: String) -> Self {
        Self {
            spec_sha256,
            data_sha256,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    MonteCarlo,
    Quadrature,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Shared,
    Fresh,
}

/// How the data-sampling part of the covariance was estimated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingVariance {
    /// `Ĵ⁻¹ V̂ Ĵ⁻¹` with the empirical score second moment `V̂`.
    Sandwich,
    /// `V̂` replaced by `Ĵ`, from the information identity `V = J`.
    ModelBased,
}

/// Output of `fit` and `exact`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub model_name: Option<String>,
    pub method: Method,
    /// Monte Carlo sampling scheme; absent for quadrature fits.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<Scheme>,
    pub sampling_variance: SamplingVariance,
    pub parameter_names: Vec<String>,
    pub theta_hat: Labeled,
    /// δ's whose sign was flipped to report `|δ|`. The Monte Carlo log
    /// likelihood is not even in δ, so `loglik` is attained at the reported
    /// point with the corresponding sample coordinates negated. Matrices
    /// and the gradient are given in the reported coordinates.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reflected: Vec<String>,
    pub loglik: f64,
    /// Absent when the information matrix is near singular; see `ridge`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub se: Option<Labeled>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vcov: Option<Vec<Vec<f64>>>,
    #[serde(rename = "J_hat")]
    pub j_hat: Vec<Vec<f64>>,
    #[serde(rename = "V_hat")]
    pub v_hat: Vec<Vec<f64>>,
    /// Monte Carlo variance; absent for quadrature fits.
    #[serde(rename = "W_hat", default, skip_serializing_if = "Option::is_none")]
    pub w_hat: Option<Vec<Vec<f64>>>,
    /// Warning set when the covariance could not be formed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ridge: Option<String>,
    /// Total number of Monte Carlo draws; absent for quadrature fits.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_per_record: Option<usize>,
    /// Gauss–Hermite order, for quadrature fits.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quadrature_order: Option<usize>,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator_id: Option<String>,
    pub optimizer: OptimizerDiagnostics,
    pub provenance: Provenance,
    /// Seconds; the only field that varies between identical runs.
    pub wall_time: f64,
}

impl FitReport {
    /// JSON with `wall_time` zeroed, for comparing runs.
    pub fn canonical_json(&self) -> String {
        let mut copy = self.clone();
        copy.wall_time = 0.0;
        serde_json::to_string(&copy).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labeled_keeps_order_and_round_trips() {
        let names: Vec<String> = (1..=11).map(|k| format!("beta{k}")).collect();
        let vals: Vec<f64> = (0..11).map(|k| 1.0 / (k as f64 + 3.0)).collect();
        let l = Labeled::new(&names, &vals);
        let s = serde_json::to_string(&l).unwrap();
        assert!(s.find("beta2").unwrap() < s.find("beta10").unwrap());
        let back: Labeled = serde_json::from_str(&s).unwrap();
        assert_eq!(back, l);
        assert_eq!(back.get("beta3"), Some(0.2));
    }
}
