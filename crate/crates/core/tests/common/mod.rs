#![allow(dead_code)]

use mcmle::{GlmmDesign, GlmmParams};
use nalgebra::{DMatrix, DVector};

pub fn desk_truth() -> GlmmParams {
    GlmmParams::new(vec![5.0], vec![0.5f64.sqrt()])
}

pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

pub fn all_outcomes(t: usize) -> Vec<Vec<u8>> {
    (0..1usize << t)
        .map(|c| (0..t).map(|k| ((c >> k) & 1) as u8).collect())
        .collect()
}

/// Central-difference gradient.
pub fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|a| {
            let mut up = x.to_vec();
            let mut dn = x.to_vec();
            up[a] += h;
            dn[a] -= h;
            (f(&up) - f(&dn)) / (2.0 * h)
        })
        .collect()
}

/// Central-difference Jacobian of a vector function, `out[(a, c)] = ∂g_a/∂x_c`.
pub fn fd_jacobian(g: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> DMatrix<f64> {
    let d = x.len();
    let mut out = DMatrix::zeros(d, d);
    for c in 0..d {
        let mut up = x.to_vec();
        let mut dn = x.to_vec();
        up[c] += h;
        dn[c] -= h;
        let (gu, gd) = (g(&up), g(&dn));
        for a in 0..gu.len() {
            out[(a, c)] = (gu[a] - gd[a]) / (2.0 * h);
        }
    }
    out
}

/// `ρ` written out term by term with plain `ln(1 + e^η)`, valid for moderate `η`.
pub fn naive_log_ratio(design: &GlmmDesign, params: &GlmmParams, b: &[f64], y: &[u8]) -> f64 {
    let mut total = 0.0;
    for k in 0..design.t() {
        let mut eta = 0.0;
        for c in 0..design.p() {
            eta += design.x(k, c) * params.beta[c];
        }
        for s in 0..design.q() {
            eta += design.z(k, s) * params.delta[design.delta_index(s)] * b[s];
        }
        total += y[k] as f64 * eta - (1.0 + eta.exp()).ln();
    }
    total
}

/// Logistic regression by iteratively reweighted least squares, for rows
/// of `x` repeated over every record.
pub fn irls(x: &[Vec<f64>], records: &[Vec<u8>]) -> Vec<f64> {
    let p = x[0].len();
    let mut beta = DVector::<f64>::zeros(p);
    for _ in 0..100 {
        let mut xtwx = DMatrix::<f64>::zeros(p, p);
        let mut xtr = DVector::<f64>::zeros(p);
        for y in records {
            for (k, row) in x.iter().enumerate() {
                let xr = DVector::from_column_slice(row);
                let eta = xr.dot(&beta);
                let mu = 1.0 / (1.0 + (-eta).exp());
                xtwx += &xr * xr.transpose() * (mu * (1.0 - mu));
                xtr += &xr * (y[k] as f64 - mu);
            }
        }
        let step = xtwx.cholesky().expect("IRLS information not PD").solve(&xtr);
        beta += &step;
        if step.amax() < 1e-14 {
            break;
        }
    }
    beta.iter().copied().collect()
}
