mod common;

use common::*;
use mcmle::engine::{self, FreshSamples};
use mcmle::glmm::{self, Glmm};
use mcmle::infer::{self, Ellipsoid};
use mcmle::optim::OptOptions;
use mcmle::{GlmmDesign, GlmmParams, ObservedData};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn desk_setup(t: usize, n: usize, m: usize, seed: u64) -> (Glmm, ObservedData<Vec<u8>>, mcmle::MonteCarloSample) {
    let design = GlmmDesign::mcculloch(t);
    let data = glmm::simulate_y(&design, &desk_truth(), n, seed).unwrap();
    let model = Glmm::new(design);
    let sample = engine::draw_sample(&model, m, seed ^ 0xabc).unwrap();
    (model, data, sample)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weights_form_a_simplex(beta in -10.0..10.0f64, delta in -4.0..4.0f64, code in 0u32..(1 << 10), seed in 0u64..1000) {
        let model = Glmm::new(GlmmDesign::mcculloch(10));
        let y: Vec<u8> = (0..10).map(|k| ((code >> k) & 1) as u8).collect();
        let sample = engine::draw_sample(&model, 50, seed).unwrap();
        let u = engine::weights(&model, &[beta, delta], &y, &sample).unwrap();
        prop_assert!(u.iter().all(|&w| w >= 0.0));
        prop_assert!((u.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn s_hat_has_mean_zero(beta in -2.0..8.0f64, delta in 0.05..3.0f64, seed in 0u64..1000) {
        let (model, data, sample) = desk_setup(8, 20, 40, seed);
        let s = infer::s_hat(&model, &[beta, delta], &data, &sample).unwrap();
        for a in 0..2 {
            let mean = (0..40).map(|i| s[i * 2 + a]).sum::<f64>() / 40.0;
            prop_assert!(mean.abs() < 1e-10, "mean {mean}");
        }
    }

    #[test]
    fn log_ratio_never_positive(beta in -30.0..30.0f64, delta in -10.0..10.0f64, b in -8.0..8.0f64, code in 0u32..(1 << 15)) {
        let design = GlmmDesign::mcculloch(15);
        let y: Vec<u8> = (0..15).map(|k| ((code >> k) & 1) as u8).collect();
        let rho = glmm::log_ratio(&design, &GlmmParams::new(vec![beta], vec![delta]), &[b], &y).unwrap();
        prop_assert!(rho <= 0.0 && rho.is_finite());
    }

    #[test]
    fn sample_order_does_not_matter(beta in 0.0..8.0f64, delta in 0.1..2.0f64, seed in 0u64..1000) {
        let (model, data, sample) = desk_setup(6, 15, 30, seed);
        let perm: Vec<usize> = (0..30).rev().collect();
        let shuffled = sample.permuted(&perm).unwrap();
        let a = engine::mc_loglik(&model, &[beta, delta], &data, &sample).unwrap();
        let b = engine::mc_loglik(&model, &[beta, delta], &data, &shuffled).unwrap();
        prop_assert!((a - b).abs() < 1e-10 * a.abs().max(1.0));
    }

    #[test]
    fn plug_in_matrices_are_psd(beta in 2.0..8.0f64, delta in 0.1..2.0f64, seed in 0u64..1000) {
        let (model, data, sample) = desk_setup(6, 15, 30, seed);
        let theta = [beta, delta];
        let v = infer::estimate_v(&model, &theta, &data, &sample).unwrap();
        let w = infer::estimate_w(&model, &theta, &data, &sample).unwrap();
        let j = infer::estimate_j(&model, &theta, &data, &sample).unwrap();
        prop_assert!(v.clone().symmetric_eigenvalues().min() >= -1e-10);
        prop_assert!(w.clone().symmetric_eigenvalues().min() >= -1e-10);
        prop_assert!((&j - j.transpose()).norm() <= 1e-12 * j.norm().max(1.0));
    }
}

#[test]
fn constant_ratio_likelihood_is_exact() {
    let (n, t) = (37usize, 15usize);
    let design = GlmmDesign::mcculloch(t);
    let data = glmm::simulate_y(&design, &GlmmParams::new(vec![0.0], vec![0.0]), n, 2).unwrap();
    let model = Glmm::new(design);
    for m in [1, 7, 1000] {
        let sample = engine::draw_sample(&model, m, 5).unwrap();
        let l = engine::mc_loglik(&model, &[0.0, 0.0], &data, &sample).unwrap();
        let exact = -((n * t) as f64) * std::f64::consts::LN_2;
        // exact up to rounding in the n·T-term sum
        assert!((l - exact).abs() <= (n * t) as f64 * f64::EPSILON * exact.abs(), "m = {m}: {l} vs {exact}");
    }
}

#[test]
fn fresh_scheme_with_one_record_equals_shared() {
    let (model, data, _) = desk_setup(10, 1, 1, 4);
    let shared = engine::draw_sample(&model, 200, 99).unwrap();
    let fresh = FreshSamples::draw(&model, 1, 200, 99).unwrap();
    let theta = [4.0, 0.8];
    let a = engine::mc_value_and_score(&model, &theta, &data, &shared).unwrap();
    let b = engine::mc_value_and_score(&model, &theta, &data, &fresh).unwrap();
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert_eq!(a.1, b.1);
}

#[test]
fn degenerate_plug_ins() {
    // a single draw carries no Monte Carlo variability
    let (model, data, _) = desk_setup(8, 30, 1, 6);
    let one = engine::draw_sample(&model, 1, 1).unwrap();
    let w = infer::estimate_w(&model, &[5.0, 0.7], &data, &one).unwrap();
    assert!(w.amax() < 1e-12);

    // one record at its own MCMLE: the score vanishes, so V̂ does too
    let (model, data, sample) = desk_setup(8, 1, 200, 7);
    let data = ObservedData::new(vec![{
        let mut y = data.record(0).clone();
        y[0] = 0;
        y[7] = 1;
        y
    }])
    .unwrap();
    let fit = mcmle::study::fit_mcmle(&model, &data, &sample, &[0.0, 0.1], &OptOptions::default()).unwrap();
    assert!(fit.converged);
    let v = infer::estimate_v(&model, fit.theta_hat.values(), &data, &sample).unwrap();
    assert!(v.amax() < 1e-12);
}

#[test]
fn bernoulli_half_information() {
    let design = GlmmDesign::new(vec![vec![1.0]], vec![vec![1.0]], vec![1]).unwrap();
    let model = Glmm::new(design);
    let data = ObservedData::new(vec![vec![0u8], vec![1u8], vec![1u8], vec![0u8]]).unwrap();
    let sample = engine::draw_sample(&model, 13, 2).unwrap();
    let j = infer::estimate_j(&model, &[0.0, 0.0], &data, &sample).unwrap();
    assert!((j[(0, 0)] - 0.25).abs() < 1e-15);
}

#[test]
fn sandwich_special_cases() {
    let eye = DMatrix::<f64>::identity(2, 2);
    let zero = DMatrix::<f64>::zeros(2, 2);
    let v = infer::sandwich_vcov(&eye, &eye, &zero, 100, Some(10), 1e12).unwrap();
    assert!((v - &eye / 100.0).amax() < 1e-15);

    // dropping the Monte Carlo term leaves J⁻¹VJ⁻¹/n
    let j = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
    let vv = DMatrix::from_row_slice(2, 2, &[1.5, -0.2, -0.2, 0.7]);
    let w = DMatrix::from_row_slice(2, 2, &[0.4, 0.1, 0.1, 0.2]);
    let jinv = j.clone().try_inverse().unwrap();
    let direct = &jinv * &vv * &jinv / 50.0;
    let ours = infer::sandwich_vcov(&j, &vv, &w, 50, None, 1e12).unwrap();
    assert!((ours - &direct).amax() < 1e-15);
    let with_mc = infer::sandwich_vcov(&j, &vv, &w, 50, Some(20), 1e12).unwrap();
    let direct = &jinv * (&vv / 50.0 + &w / 20.0) * &jinv;
    assert!((with_mc - direct).amax() < 1e-14);

    let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
    match infer::sandwich_vcov(&singular, &eye, &zero, 10, None, 1e12) {
        Err(mcmle::Error::Ridge { smallest_eigenvalue, .. }) => assert!(smallest_eigenvalue.abs() < 1e-12),
        other => panic!("expected ridge error, got {other:?}"),
    }
}

#[test]
fn ellipse_geometry() {
    let chi2 = infer::chi_square_quantile(2, 0.95).unwrap();
    assert!((chi2 - 5.991464547107979).abs() < 1e-14);
    let eye = DMatrix::<f64>::identity(2, 2);
    let e = infer::confidence_ellipse(&eye, &[1.0, 2.0], 0.95).unwrap();
    assert!(e.radii.iter().all(|r| (r * r - chi2).abs() < 1e-12));
    assert!(infer::ellipse_contains(&e, &[1.0, 2.0]));

    let (a, b) = (4.0, 0.25);
    let diag = DMatrix::from_row_slice(2, 2, &[a, 0.0, 0.0, b]);
    let e = Ellipsoid::new(&diag, &[0.0, 0.0], 0.95).unwrap();
    let boundary = [(a * chi2).sqrt(), 0.0];
    assert!((e.quadratic_form(&boundary) - chi2).abs() < 1e-12);
    assert!(!e.contains(&[1.01 * boundary[0], 0.0]));
    assert!(Ellipsoid::new(&-diag, &[0.0, 0.0], 0.95).is_err());
}

#[test]
fn standard_errors_are_square_roots() {
    let vcov = DMatrix::from_row_slice(2, 2, &[4.0, 0.5, 0.5, 9.0]);
    let se = infer::standard_errors(&vcov, &["beta1".into(), "delta1".into()]).unwrap();
    assert_eq!(se, vec![("beta1".to_string(), 2.0), ("delta1".to_string(), 3.0)]);
}

#[test]
fn refit_from_estimate_is_a_fixed_point() {
    let (model, data, sample) = desk_setup(15, 100, 300, 8);
    let opts = OptOptions::default();
    let fit = mcmle::study::fit_mcmle(&model, &data, &sample, &[0.0, 0.1], &opts).unwrap();
    assert!(fit.converged);
    let again = mcmle::study::fit_mcmle(&model, &data, &sample, fit.theta_hat.values(), &opts).unwrap();
    assert!(again.iterations <= 2);
    for (a, b) in fit.theta_hat.values().iter().zip(again.theta_hat.values()) {
        assert!((a - b).abs() < 1e-6);
    }
    // the MCMLE does not move when the sample is shuffled
    let perm: Vec<usize> = (0..300).map(|i| (i * 7) % 300).collect();
    let shuffled = sample.permuted(&perm).unwrap();
    let other = mcmle::study::fit_mcmle(&model, &data, &shuffled, &[0.0, 0.1], &opts).unwrap();
    for (a, b) in fit.theta_hat.values().iter().zip(other.theta_hat.values()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn exact_and_monte_carlo_information_agree_in_large_samples() {
    // coarse consistency at a cheap scale; the acceptance suite runs the
    // full configuration
    let design = GlmmDesign::mcculloch(5);
    let info = mcmle::oracle::exact_jvw(&design, &desk_truth(), &mcmle::oracle::QuadratureRule::default_rule()).unwrap();
    let model = Glmm::new(design.clone());
    let data = glmm::simulate_y(&design, &desk_truth(), 4000, 31).unwrap();
    let sample = engine::draw_sample(&model, 1000, 32).unwrap();
    let j = infer::estimate_j(&model, &desk_truth().to_theta(), &data, &sample).unwrap();
    assert!(rel_frobenius(&j, &info.j) < 0.15, "{j} vs {}", info.j);
}

#[test]
fn negative_delta_estimates_reflect_with_the_sample() {
    // a finite sample is not symmetric, so the Monte Carlo likelihood is
    // not even in δ; flipping δ is the same as negating the sample
    let design = GlmmDesign::mcculloch(15);
    let y = vec![0u8, 0, 0, 0, 0, 1, 0, 0, 1, 1, 1, 0, 1, 1, 1];
    let data = glmm::observed_data(&design, vec![y]).unwrap();
    let model = Glmm::new(design.clone());
    let sample = engine::draw_sample(&model, 500, 6).unwrap();
    let mirrored = mcmle::MonteCarloSample::from_points(sample.raw().iter().map(|b| -b).collect(), 1, 6, "mirrored").unwrap();
    let at = |theta: &[f64], s: &mcmle::MonteCarloSample| engine::mc_loglik(&model, theta, &data, s).unwrap();
    assert_eq!(at(&[6.0, -2.0], &sample).to_bits(), at(&[6.0, 2.0], &mirrored).to_bits());
    assert!((at(&[6.0, -2.0], &sample) - at(&[6.0, 2.0], &sample)).abs() > 1e-3);

    let fit = mcmle::study::fit_mcmle(&model, &data, &sample, &design.default_start(), &OptOptions::default()).unwrap();
    assert!(fit.converged);
    let raw = fit.theta_hat.values().to_vec();
    assert!(raw[1] < 0.0, "this record and sample give a negative δ̂: {raw:?}");
    assert_eq!(design.reflection(&raw), vec![1.0, -1.0]);
    let mut canonical = raw.clone();
    design.canonicalize(&mut canonical);

    // plug-ins at the raw maximizer, reflected, equal plug-ins at the
    // canonical point under the mirrored sample
    let raw_vec = mcmle::ParamVector::new(raw.clone(), design.layout()).unwrap();
    let reflected = infer::InferenceReport::compute(&model, &raw_vec, &data, &sample, 1e12).unwrap().reflected(&[1.0, -1.0]).unwrap();
    let canon_vec = raw_vec.with_values(canonical.clone()).unwrap();
    let direct = infer::InferenceReport::compute(&model, &canon_vec, &data, &mirrored, 1e12).unwrap();
    assert_eq!(reflected.theta_ref.values(), canonical.as_slice());
    for (a, b) in [(&reflected.j_hat, &direct.j_hat), (&reflected.v_hat, &direct.v_hat), (&reflected.w_hat, &direct.w_hat)] {
        assert!((a - b).amax() <= 1e-12 * b.amax().max(1.0), "{a} vs {b}");
    }
    // the raw maximizer is a maximum: Ĵ is positive definite there, while
    // the same sample at the canonical point is not at a maximum
    assert!(reflected.j_hat.clone().symmetric_eigenvalues().min() > 0.0);
    let g = engine::mc_score(&model, &canonical, &data, &sample).unwrap();
    assert!(g.amax() > 1e-3);
}
