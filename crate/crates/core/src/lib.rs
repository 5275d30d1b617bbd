//! Monte Carlo maximum likelihood for missing-data models.
//!
//! The observed-data likelihood `f_θ(y) = ∫ f_θ(x, y) dx` is replaced by an
//! importance-sampling average over one fixed simulated sample of missing
//! data. Maximizing the resulting Monte Carlo log likelihood gives the
//! Monte Carlo MLE, and sandwich plug-in estimates combine the sampling and
//! Monte Carlo variability into confidence regions.
//!
//! Modules:
//!
//! - [`engine`]: generic Monte Carlo likelihood, score and Hessian.
//! - [`glmm`]: the Logit–Normal GLMM family `η = Xβ + ZΔb`.
//! - [`optim`]: quasi-Newton maximization and profile likelihoods.
//! - [`infer`]: plug-in `J`, `V`, `W`, sandwich covariance, ellipses.
//! - [`oracle`]: Gauss–Hermite quadrature and enumeration ground truth.
//! - [`study`]: coverage, convergence-rate and sampling-scheme experiments.
//! - [`rng`]: seeded, splittable random streams.

// `!(x <= cap)` is used on purpose so that NaN fails the check
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod engine;
pub mod error;
pub mod glmm;
pub mod infer;
pub mod optim;
pub mod oracle;
pub mod rng;
pub mod study;

pub use engine::{
    MissingDataModel, MonteCarloSample, ObservedData, ParamLayout, ParamVector, SampleSource,
};
pub use error::{Error, Result};
pub use glmm::{Glmm, GlmmDesign, GlmmParams};
