mod common;

use common::*;
use mcmle::engine;
use mcmle::glmm::{self, Glmm};
use mcmle::rng::McStream;
use mcmle::{GlmmDesign, GlmmParams};
use nalgebra::{DMatrix, DVector};

fn rel_vec(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(1.0)
}

fn random_theta(design: &GlmmDesign, rng: &mut McStream) -> Vec<f64> {
    let mut theta: Vec<f64> = (0..design.p()).map(|_| -2.0 + 6.0 * rng.uniform()).collect();
    for _ in 0..design.r() {
        let mag = 0.1 + 1.9 * rng.uniform();
        theta.push(if rng.uniform() < 0.2 { -mag } else { mag });
    }
    theta
}

fn check_engine(design: GlmmDesign, points: usize, seed: u64) {
    let model = Glmm::new(design.clone());
    let truth = GlmmParams::from_theta(&design, &random_theta(&design, &mut McStream::new(seed, 9))).unwrap();
    let data = glmm::simulate_y(&design, &truth, 25, seed).unwrap();
    let sample = engine::draw_sample(&model, 300, seed + 1).unwrap();
    let mut rng = McStream::new(seed, 7);
    for _ in 0..points {
        let theta = random_theta(&design, &mut rng);
        let (_, g) = engine::mc_value_and_score(&model, &theta, &data, &sample).unwrap();
        let fd = fd_grad(|t| engine::mc_loglik(&model, t, &data, &sample).unwrap(), &theta, 1e-5);
        let g: Vec<f64> = g.iter().copied().collect();
        assert!(rel_vec(&g, &fd) < 1e-5, "score at {theta:?}: {g:?} vs {fd:?}");

        let h = engine::mc_hessian(&model, &theta, &data, &sample).unwrap();
        let fdh = fd_jacobian(
            |t| engine::mc_score(&model, t, &data, &sample).unwrap().iter().copied().collect(),
            &theta,
            1e-5,
        );
        assert!((&h - &fdh).norm() / fdh.norm().max(1.0) < 1e-4, "hessian at {theta:?}");
        assert!((&h - h.transpose()).norm() < 1e-12 * h.norm().max(1.0));
    }
}

#[test]
fn engine_derivatives_desk_model() {
    check_engine(GlmmDesign::mcculloch(10), 20, 3);
}

#[test]
fn engine_derivatives_multivariate_effects() {
    check_engine(GlmmDesign::influenza(), 20, 11);
}

#[test]
fn glmm_log_ratio_derivatives() {
    let designs = [GlmmDesign::mcculloch(15), GlmmDesign::influenza()];
    let mut rng = McStream::new(21, 0);
    for design in &designs {
        for _ in 0..20 {
            let theta = random_theta(design, &mut rng);
            let params = GlmmParams::from_theta(design, &theta).unwrap();
            let b: Vec<f64> = (0..design.q()).map(|_| rng.standard_normal()).collect();
            let y: Vec<u8> = (0..design.t()).map(|_| rng.bernoulli(0.5) as u8).collect();
            let rho = |t: &[f64]| glmm::log_ratio(design, &GlmmParams::from_theta(design, t).unwrap(), &b, &y).unwrap();
            let grad = glmm::log_ratio_grad(design, &params, &b, &y).unwrap();
            let fd = fd_grad(rho, &theta, 1e-6);
            assert!(rel_vec(&grad, &fd) < 1e-6);

            let d = theta.len();
            let hess = DMatrix::from_row_slice(d, d, &glmm::log_ratio_hess(design, &params, &b, &y).unwrap());
            let fdh = fd_jacobian(
                |t| glmm::log_ratio_grad(design, &GlmmParams::from_theta(design, t).unwrap(), &b, &y).unwrap(),
                &theta,
                1e-6,
            );
            assert!((&hess - &fdh).norm() / fdh.norm().max(1.0) < 1e-6);
            // a sum of Bernoulli log probabilities is never positive
            assert!(rho(&theta) <= 0.0);
        }
    }
}

#[test]
fn log_ratio_matches_naive_formula() {
    let design = GlmmDesign::influenza();
    let mut rng = McStream::new(4, 0);
    for _ in 0..50 {
        let theta = random_theta(&design, &mut rng);
        let params = GlmmParams::from_theta(&design, &theta).unwrap();
        let b: Vec<f64> = (0..design.q()).map(|_| rng.standard_normal()).collect();
        let y: Vec<u8> = (0..design.t()).map(|_| rng.bernoulli(0.3) as u8).collect();
        let ours = glmm::log_ratio(&design, &params, &b, &y).unwrap();
        let naive = naive_log_ratio(&design, &params, &b, &y);
        assert!((ours - naive).abs() < 1e-12 * naive.abs().max(1.0));
    }
}

#[test]
fn hessian_is_negative_definite_near_mcmle() {
    let design = GlmmDesign::mcculloch(15);
    let model = Glmm::new(design.clone());
    let data = glmm::simulate_y(&design, &desk_truth(), 200, 14).unwrap();
    let sample = engine::draw_sample(&model, 500, 15).unwrap();
    let fit = mcmle::study::fit_mcmle(&model, &data, &sample, &design.default_start(), &Default::default()).unwrap();
    assert!(fit.converged);
    let h = engine::mc_hessian(&model, fit.theta_hat.values(), &data, &sample).unwrap();
    assert!(h.symmetric_eigenvalues().max() < 0.0);
    let g: DVector<f64> = engine::mc_score(&model, fit.theta_hat.values(), &data, &sample).unwrap();
    assert!(g.amax() <= fit.gtol);
}
