//! Profile Monte Carlo log likelihood of the influenza model over the common
//! random-effect scale σ, maximizing over β and the correlations.
//!
//! With `|δ| = σ` fixed, δ is written in spherical coordinates
//! `δ = σ (cos φ₁, sin φ₁ cos φ₂, sin φ₁ sin φ₂)` and `(β, φ₁, φ₂)` are
//! maximized at each grid value, warm-started from the previous one.
//!
//! Usage: influenza_sigma_profile DATA.csv M SEED LO:HI:K OUT.csv
//!
//! DATA.csv holds one 0/1 record of four outbreaks per line; a header line
//! is skipped.

use std::error::Error;
use std::fmt::Write as _;

use mcmle::glmm::{self, influenza_correlation_params};
use mcmle::optim::{self, OptOptions};
use mcmle::{engine, Glmm, GlmmDesign, ParamLayout, ParamVector};
use nalgebra::DVector;

fn read_records(path: &str) -> Result<Vec<Vec<u8>>, Box<dyn Error>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let cells: Vec<&str> = line.split(',').map(str::trim).filter(|c| !c.is_empty()).collect();
        if cells.is_empty() || (i == 0 && cells.iter().all(|c| c.parse::<f64>().is_err())) {
            continue;
        }
        let rec = cells
            .iter()
            .map(|c| match *c {
                "0" => Ok(0),
                "1" => Ok(1),
                other => Err(format!("line {}: expected 0 or 1, found {other:?}", i + 1)),
            })
            .collect::<Result<Vec<u8>, _>>()?;
        out.push(rec);
    }
    Ok(out)
}

fn main() -> Result<(), Box<dyn Error>> {
    let args: Vec<String> = std::env::args().collect();
    if args.len() != 6 {
        return Err("usage: influenza_sigma_profile DATA.csv M SEED LO:HI:K OUT.csv".into());
    }
    let records = read_records(&args[1])?;
    let m: usize = args[2].parse()?;
    let seed: u64 = args[3].parse()?;
    let parts: Vec<f64> = args[4].split(':').map(str::parse).collect::<Result<_, _>>()?;
    let [lo, hi, k] = parts[..] else {
        return Err("grid must be LO:HI:K".into());
    };
    let k = k as usize;
    let grid: Vec<f64> = (0..k)
        .map(|i| if k == 1 { lo } else { lo + (hi - lo) * i as f64 / (k - 1) as f64 })
        .collect();

    let design = GlmmDesign::influenza();
    let data = glmm::observed_data(&design, records)?;
    let model = Glmm::new(design);
    let sample = engine::draw_sample(&model, m, seed)?;
    eprintln!("n = {}, m = {m}", data.n());

    let layout = ParamLayout::new([("beta", 4), ("angle", 2)]);
    let mut free = vec![0.0, 0.0, 0.0, 0.0, 0.9, 0.9];
    let mut csv = String::from("sigma,profile_loglik,beta1,beta2,beta3,beta4,rho1,rho2,converged\n");
    for &sigma in &grid {
        let to_theta = |z: &[f64]| -> [f64; 7] {
            let (s1, c1) = z[4].sin_cos();
            let (s2, c2) = z[5].sin_cos();
            [z[0], z[1], z[2], z[3], sigma * c1, sigma * s1 * c2, sigma * s1 * s2]
        };
        let objective = |z: &[f64]| {
            let theta = to_theta(z);
            let (f, g) = engine::mc_value_and_score(&model, &theta, &data, &sample)?;
            let (s1, c1) = z[4].sin_cos();
            let (s2, c2) = z[5].sin_cos();
            let d_phi1 = sigma * (-s1 * g[4] + c1 * c2 * g[5] + c1 * s2 * g[6]);
            let d_phi2 = sigma * s1 * (-s2 * g[5] + c2 * g[6]);
            Ok((f, DVector::from_vec(vec![g[0], g[1], g[2], g[3], d_phi1, d_phi2])))
        };
        let start = ParamVector::new(free.clone(), layout.clone())?;
        let res = optim::maximize(objective, &start, &OptOptions::default())?;
        free = res.theta_hat.values().to_vec();
        let theta = to_theta(&free);
        let (_, rho1, rho2) = influenza_correlation_params(&theta[4..]);
        writeln!(
            csv,
            "{sigma},{},{},{},{},{},{rho1},{rho2},{}",
            res.objective, theta[0], theta[1], theta[2], theta[3], res.converged
        )?;
        eprintln!("sigma = {sigma}: loglik {} (converged {})", res.objective, res.converged);
    }
    std::fs::write(&args[5], csv)?;
    Ok(())
}
