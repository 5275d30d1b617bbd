//! Subcommand definitions and implementations.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mcmle::engine::{self, FreshSamples};
use mcmle::infer::{self, InferenceReport, DEFAULT_CONDITION_CAP};
use mcmle::optim::{self, OptOptions};
use mcmle::oracle::{self, QuadratureRule};
use mcmle::study::{self, CoverageResult, EllipseMode};
use mcmle::{Glmm, GlmmDesign, GlmmParams, ObservedData, ParamVector};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::io::{self, Loaded, ProfileTable};
use crate::report::{matrix_rows, FitReport, Labeled, Method, OptimizerDiagnostics, Provenance, SamplingVariance, Scheme};
use crate::{CliError, Outcome};

#[derive(Debug, Parser)]
#[command(name = "mcmle", version, about = "Monte Carlo maximum likelihood for logit-normal GLMMs")]
pub struct Cli {
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, env = "MCMLE_THREADS", default_value_t = 0)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the Monte Carlo MLE and its sandwich standard errors.
    Fit(FitArgs),
    /// Profile Monte Carlo log likelihood over one parameter.
    Profile(ProfileArgs),
    /// Confidence-region coverage study on simulated data.
    Coverage(CoverageArgs),
    /// Simulate 0/1 responses from the model.
    Simulate(SimulateArgs),
    /// Exact MLE by Gauss–Hermite quadrature (one random effect only).
    Exact(ExactArgs),
}

#[derive(Debug, Args)]
pub struct OptimizerArgs {
    /// Iteration budget for each optimization.
    #[arg(long, default_value_t = 500)]
    pub max_iter: usize,
    /// Relative gradient tolerance (threshold is gtol·(1 + |loglik|)).
    #[arg(long, default_value_t = 1e-8)]
    pub gtol: f64,
}

impl OptimizerArgs {
    fn options(&self) -> Result<OptOptions, CliError> {
        if !(self.gtol > 0.0 && self.gtol.is_finite()) {
            return Err(CliError::Input(format!("--gtol must be positive, got {}", self.gtol)));
        }
        Ok(OptOptions {
            gtol_rel: self.gtol,
            max_iter: self.max_iter,
            ..OptOptions::default()
        })
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Model spec JSON.
    #[arg(long)]
    pub model: PathBuf,
    /// Responses CSV, one 0/1 record per row.
    #[arg(long)]
    pub data: PathBuf,
    /// Monte Carlo sample size (per record with --fresh).
    #[arg(long)]
    pub m: usize,
    #[arg(long)]
    pub seed: u64,
    /// Starting values, comma separated (default β = 0, δ = 0.1).
    #[arg(long, allow_hyphen_values = true)]
    pub start: Option<String>,
    /// Draw an independent sample for every record.
    #[arg(long)]
    pub fresh: bool,
    /// Use Ĵ in place of the plug-in V̂ (valid under correct specification).
    /// Needed when the data are one record, where V̂ vanishes at the estimate.
    #[arg(long)]
    pub model_based: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub optimizer: OptimizerArgs,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub m: usize,
    #[arg(long)]
    pub seed: u64,
    /// Parameter to profile, e.g. `delta1`.
    #[arg(long)]
    pub param: String,
    /// Grid `lo:hi:k`.
    #[arg(long, allow_hyphen_values = true)]
    pub grid: String,
    #[arg(long, allow_hyphen_values = true)]
    pub start: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub optimizer: OptimizerArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EllipseChoice {
    /// Exact theory when quadrature applies, otherwise plug-in.
    Auto,
    ExactTheory,
    PlugIn,
}

#[derive(Debug, Args)]
pub struct CoverageArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// True parameter values, comma separated.
    #[arg(long, allow_hyphen_values = true)]
    pub truth: String,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub m: usize,
    #[arg(long)]
    pub reps: usize,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = EllipseChoice::Auto)]
    pub ellipse: EllipseChoice,
    #[arg(long)]
    pub out: PathBuf,
    /// Estimate cloud CSV (default: next to --out with suffix `.estimates.csv`).
    #[arg(long)]
    pub cloud: Option<PathBuf>,
    #[command(flatten)]
    pub optimizer: OptimizerArgs,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    pub truth: String,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExactArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    pub start: Option<String>,
    /// Gauss–Hermite order.
    #[arg(long, default_value_t = oracle::DEFAULT_ORDER)]
    pub order: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub optimizer: OptimizerArgs,
}

pub fn run(cli: &Cli) -> Result<Outcome, CliError> {
    match &cli.command {
        Command::Fit(a) => fit(a),
        Command::Profile(a) => profile(a),
        Command::Coverage(a) => coverage(a),
        Command::Simulate(a) => simulate(a),
        Command::Exact(a) => exact(a),
    }
}

struct Inputs {
    design: GlmmDesign,
    data: ObservedData<Vec<u8>>,
    provenance: Provenance,
}

fn load_inputs(model: &Path, data: &Path) -> Result<Inputs, CliError> {
    let spec = io::read_spec(model)?;
    let Loaded { value: records, sha256 } = io::read_responses(data)?;
    let t = spec.value.t();
    if let Some(j) = records.iter().position(|r| r.len() != t) {
        return Err(CliError::Input(format!(
            "{}: record {} has {} responses but the model has T = {t}",
            data.display(),
            j + 1,
            records[j].len()
        )));
    }
    let data = mcmle::glmm::observed_data(&spec.value, records)?;
    Ok(Inputs {
        design: spec.value,
        data,
        provenance: Provenance::new(spec.sha256, sha256),
    })
}

fn start_values(design: &GlmmDesign, start: Option<&str>) -> Result<Vec<f64>, CliError> {
    match start {
        None => Ok(design.default_start()),
        Some(s) => {
            let v = io::parse_values("--start", s)?;
            check_dim("--start", design, &v)?;
            Ok(v)
        }
    }
}

fn check_dim(what: &str, design: &GlmmDesign, v: &[f64]) -> Result<(), CliError> {
    if v.len() != design.theta_dim() {
        return Err(CliError::Input(format!(
            "{what}: expected {} values ({}), got {}",
            design.theta_dim(),
            design.layout().names().join(", "),
            v.len()
        )));
    }
    Ok(())
}

fn parse_truth(design: &GlmmDesign, s: &str) -> Result<GlmmParams, CliError> {
    let v = io::parse_values("--truth", s)?;
    check_dim("--truth", design, &v)?;
    Ok(GlmmParams::from_theta(design, &v)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    io::write_atomic(path, text.as_bytes())
}

fn positive(what: &str, v: usize) -> Result<(), CliError> {
    if v == 0 {
        return Err(CliError::Input(format!("{what} must be at least 1")));
    }
    Ok(())
}

pub fn fit(a: &FitArgs) -> Result<Outcome, CliError> {
    let clock = Instant::now();
    positive("--m", a.m)?;
    let opts = a.optimizer.options()?;
    let inputs = load_inputs(&a.model, &a.data)?;
    let start = start_values(&inputs.design, a.start.as_deref())?;
    let model = Glmm::new(inputs.design.clone());
    let data = &inputs.data;

    let (fit, inference, scheme, m_total, m_per_record, generator_id) = if a.fresh {
        let samples = FreshSamples::draw(&model, data.n(), a.m, a.seed)?;
        let fit = study::fit_mcmle(&model, data, &samples, &start, &opts)?;
        let inf = InferenceReport::compute_fresh(&model, &fit.theta_hat, data, &samples, DEFAULT_CONDITION_CAP)?;
        let id = samples.samples()[0].generator_id().to_string();
        (fit, inf, Scheme::Fresh, data.n() * a.m, Some(a.m), id)
    } else {
        let sample = engine::draw_sample(&model, a.m, a.seed)?;
        let fit = study::fit_mcmle(&model, data, &sample, &start, &opts)?;
        let inf = InferenceReport::compute(&model, &fit.theta_hat, data, &sample, DEFAULT_CONDITION_CAP)?;
        let id = sample.generator_id().to_string();
        (fit, inf, Scheme::Shared, a.m, None, id)
    };

    let inference = if a.model_based {
        InferenceReport::assemble(
            inference.j_hat.clone(),
            inference.j_hat,
            inference.w_hat,
            inference.n,
            inference.m,
            inference.theta_ref,
            DEFAULT_CONDITION_CAP,
        )?
    } else {
        inference
    };
    // report |δ|, with every matrix and the gradient in the same coordinates
    let signs = inputs.design.reflection(fit.theta_hat.values());
    let inference = inference.reflected(&signs)?;
    let mut optimizer = OptimizerDiagnostics::from(&fit);
    optimizer.gradient.iter_mut().zip(&signs).for_each(|(g, s)| *g *= s);
    let names = inputs.design.layout().names();
    let reflected: Vec<String> = names.iter().zip(&signs).filter(|(_, s)| **s < 0.0).map(|(n, _)| n.clone()).collect();
    let report = FitReport {
        model_name: inputs.design.name().map(str::to_string),
        method: Method::MonteCarlo,
        sampling_variance: if a.model_based { SamplingVariance::ModelBased } else { SamplingVariance::Sandwich },
        scheme: Some(scheme),
        theta_hat: Labeled::new(&names, inference.theta_ref.values()),
        reflected,
        loglik: fit.objective,
        se: inference.se.as_ref().map(|se| Labeled::new(&names, se)),
        vcov: inference.vcov.as_ref().map(matrix_rows),
        j_hat: matrix_rows(&inference.j_hat),
        v_hat: matrix_rows(&inference.v_hat),
        w_hat: Some(matrix_rows(&inference.w_hat)),
        ridge: inference.ridge.clone(),
        m: Some(m_total),
        m_per_record,
        quadrature_order: None,
        n: data.n(),
        seed: Some(a.seed),
        generator_id: Some(generator_id),
        optimizer,
        provenance: inputs.provenance,
        parameter_names: names,
        wall_time: clock.elapsed().as_secs_f64(),
    };
    write_json(&a.out, &report)?;
    Ok(if fit.converged { Outcome::Done } else { Outcome::NotConverged })
}

pub fn profile(a: &ProfileArgs) -> Result<Outcome, CliError> {
    positive("--m", a.m)?;
    let opts = a.optimizer.options()?;
    let inputs = load_inputs(&a.model, &a.data)?;
    let design = &inputs.design;
    let names = design.layout().names();
    let coord = design.layout().index_of(&a.param).ok_or_else(|| {
        CliError::Input(format!(
            "--param: unknown parameter {:?} (this model has {})",
            a.param,
            names.join(", ")
        ))
    })?;
    let grid = io::parse_grid(&a.grid)?;
    let start = ParamVector::new(start_values(design, a.start.as_deref())?, design.layout())?;
    let model = Glmm::new(design.clone());
    let sample = engine::draw_sample(&model, a.m, a.seed)?;
    let points = optim::profile(
        |t: &[f64]| engine::mc_value_and_score(&model, t, &inputs.data, &sample),
        &start,
        coord,
        &grid,
        &opts,
    )?;

    let mut columns = vec!["grid_value".to_string(), "profile_loglik".to_string()];
    columns.extend(names.iter().enumerate().filter(|(k, _)| *k != coord).map(|(_, n)| n.clone()));
    let rows = points
        .iter()
        .map(|p| {
            let mut theta = p.theta.clone();
            design.canonicalize(&mut theta);
            let mut row = vec![p.value, p.loglik];
            row.extend(theta.iter().enumerate().filter(|(k, _)| *k != coord).map(|(_, v)| *v));
            row
        })
        .collect();
    let table = ProfileTable { columns, rows };
    io::write_atomic(&a.out, table.to_csv().as_bytes())?;
    Ok(if points.iter().all(|p| p.converged) {
        Outcome::Done
    } else {
        Outcome::NotConverged
    })
}

/// Output of `coverage`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CoverageReport {
    pub model_name: Option<String>,
    #[serde(flatten)]
    pub result: CoverageResult,
    pub generator_id: String,
    pub spec_sha256: String,
    pub tool_version: String,
    pub wall_time: f64,
}

fn default_cloud_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "coverage".into());
    out.with_file_name(format!("{stem}.estimates.csv"))
}

fn cloud_csv(result: &CoverageResult) -> String {
    let mut out = String::from("replicate");
    for n in &result.parameter_names {
        out.push(',');
        out.push_str(n);
    }
    out.push_str(",covered\n");
    for o in &result.outcomes {
        out.push_str(&o.index.to_string());
        if o.theta_hat.is_empty() {
            for _ in &result.parameter_names {
                out.push(',');
            }
        }
        for v in &o.theta_hat {
            out.push_str(&format!(",{v}"));
        }
        out.push_str(match o.covered {
            Some(true) => ",1\n",
            Some(false) => ",0\n",
            None => ",\n",
        });
    }
    out
}

pub fn coverage(a: &CoverageArgs) -> Result<Outcome, CliError> {
    let clock = Instant::now();
    positive("--n", a.n)?;
    positive("--m", a.m)?;
    positive("--reps", a.reps)?;
    let opts = a.optimizer.options()?;
    let spec = io::read_spec(&a.model)?;
    let design = &spec.value;
    let truth = parse_truth(design, &a.truth)?;
    let mode = match a.ellipse {
        EllipseChoice::ExactTheory => EllipseMode::ExactTheory,
        EllipseChoice::PlugIn => EllipseMode::PlugIn,
        EllipseChoice::Auto if design.q() <= 1 && design.t() <= oracle::MAX_ENUMERATION_T => EllipseMode::ExactTheory,
        EllipseChoice::Auto => EllipseMode::PlugIn,
    };
    let result = study::coverage_study(design, &truth, a.n, a.m, a.reps, a.level, a.seed, mode, &opts)?;
    let cloud = a.cloud.clone().unwrap_or_else(|| default_cloud_path(&a.out));
    io::write_atomic(&cloud, cloud_csv(&result).as_bytes())?;
    let report = CoverageReport {
        model_name: design.name().map(str::to_string),
        result,
        generator_id: mcmle::rng::GENERATOR_ID.to_string(),
        spec_sha256: spec.sha256,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        wall_time: clock.elapsed().as_secs_f64(),
    };
    write_json(&a.out, &report)?;
    Ok(Outcome::Done)
}

pub fn simulate(a: &SimulateArgs) -> Result<Outcome, CliError> {
    positive("--n", a.n)?;
    let spec = io::read_spec(&a.model)?;
    let truth = parse_truth(&spec.value, &a.truth)?;
    let data = study::generate_dataset(&spec.value, &truth, a.n, a.seed)?;
    io::write_atomic(&a.out, io::format_responses(data.records()).as_bytes())?;
    Ok(Outcome::Done)
}

pub fn exact(a: &ExactArgs) -> Result<Outcome, CliError> {
    let clock = Instant::now();
    let opts = a.optimizer.options()?;
    let inputs = load_inputs(&a.model, &a.data)?;
    let design = &inputs.design;
    let data = &inputs.data;
    let start = start_values(design, a.start.as_deref())?;
    let rule = QuadratureRule::gauss_hermite(a.order)?;
    let fit = oracle::gh_mle(design, data, &rule, &start, &opts)?;
    let theta = fit.theta_hat.values();
    let n = data.n() as f64;
    let j_hat = oracle::gh_hessian(design, theta, data, &rule)? * (-1.0 / n);
    let d = design.theta_dim();
    let mut v_hat = DMatrix::zeros(d, d);
    for s in oracle::gh_record_scores(design, theta, data, &rule)? {
        let s = nalgebra::DVector::from_vec(s);
        v_hat += &s * s.transpose();
    }
    v_hat /= n;
    let (vcov, ridge) =
        match infer::sandwich_vcov(&j_hat, &v_hat, &DMatrix::zeros(d, d), data.n(), None, DEFAULT_CONDITION_CAP) {
            Ok(v) => (Some(v), None),
            Err(e @ mcmle::Error::Ridge { .. }) => (None, Some(e.to_string())),
            Err(e) => return Err(e.into()),
        };
    let names = design.layout().names();
    let se = match &vcov {
        Some(v) => Some(Labeled(infer::standard_errors(v, &names)?)),
        None => None,
    };
    let report = FitReport {
        model_name: design.name().map(str::to_string),
        method: Method::Quadrature,
        sampling_variance: SamplingVariance::Sandwich,
        scheme: None,
        theta_hat: Labeled::new(&names, theta),
        reflected: Vec::new(),
        loglik: fit.objective,
        se,
        vcov: vcov.as_ref().map(matrix_rows),
        j_hat: matrix_rows(&j_hat),
        v_hat: matrix_rows(&v_hat),
        w_hat: None,
        ridge,
        m: None,
        m_per_record: None,
        quadrature_order: Some(a.order),
        n: data.n(),
        seed: None,
        generator_id: None,
        optimizer: OptimizerDiagnostics::from(&fit),
        provenance: inputs.provenance,
        parameter_names: names,
        wall_time: clock.elapsed().as_secs_f64(),
    };
    write_json(&a.out, &report)?;
    Ok(if fit.converged { Outcome::Done } else { Outcome::NotConverged })
}
