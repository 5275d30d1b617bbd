mod common;

use common::*;
use mcmle::infer::{self, Ellipsoid};
use mcmle::optim::OptOptions;
use mcmle::study::{self, EllipseMode};
use mcmle::{GlmmDesign, GlmmParams};

#[test]
fn single_replicate_is_structurally_sound() {
    let design = GlmmDesign::mcculloch(15);
    let truth = desk_truth();
    let r = study::coverage_study(&design, &truth, 1000, 300, 1, 0.999, 5, EllipseMode::ExactTheory, &OptOptions::default())
        .unwrap();
    assert_eq!(r.replicates, 1);
    assert_eq!(r.estimates.len(), 1);
    assert!(r.covered <= 1);
    assert_eq!(r.invalid, 0);
    // membership agrees with a direct ellipse test
    let vcov = r.exact_vcov.as_ref().unwrap();
    let e = Ellipsoid::new(vcov, &r.estimates[0], 0.999).unwrap();
    assert_eq!(r.covered == 1, infer::ellipse_contains(&e, &truth.to_theta()));
}

#[test]
fn coverage_is_reproducible_and_plug_in_mode_runs() {
    let design = GlmmDesign::mcculloch(8);
    let truth = GlmmParams::new(vec![3.0], vec![0.8]);
    let opts = OptOptions::default();
    let a = study::coverage_study(&design, &truth, 150, 100, 6, 0.9, 77, EllipseMode::PlugIn, &opts).unwrap();
    let b = study::coverage_study(&design, &truth, 150, 100, 6, 0.9, 77, EllipseMode::PlugIn, &opts).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert!(a.covered <= a.replicates);
    assert!(a.exact_vcov.is_none());
    let c = study::coverage_study(&design, &truth, 150, 100, 6, 0.9, 78, EllipseMode::PlugIn, &opts).unwrap();
    assert_ne!(a.estimates, c.estimates);
}

#[test]
fn convergence_rmse_decreases_and_vanishes_for_constant_ratio() {
    let design = GlmmDesign::mcculloch(5);
    let y = [1u8, 0, 1, 1, 1];
    let t = study::convergence_experiment(&design, &desk_truth(), &y, &[50, 500, 5000], 60, 3).unwrap();
    for pair in t.rows.windows(2) {
        // non-increasing up to twice the sampling noise of an RMSE over 60 seeds
        let noise = 2.0 * pair[1].rmse * (2.0 / 60.0f64).sqrt();
        assert!(pair[1].rmse <= pair[0].rmse + noise);
    }
    let zero = study::convergence_experiment(&design, &GlmmParams::new(vec![0.0], vec![0.0]), &y, &[10, 100], 5, 1).unwrap();
    // zero up to the rounding of the quadrature weights' sum
    assert!(zero.rows.iter().all(|r| r.rmse < 1e-13));
}

#[test]
fn schemes_coincide_for_one_record() {
    let design = GlmmDesign::mcculloch(5);
    let truth = desk_truth();
    let data = study::generate_dataset(&design, &truth, 1, 9).unwrap();
    let c = study::scheme_variance_compare(&design, &truth, &data, 50, 300, 4).unwrap();
    assert!((c.trace_fresh - c.trace_shared).abs() <= 3.0 * c.se_difference);
}

#[test]
fn schemes_have_no_variance_for_constant_ratio() {
    // at β = δ = 0 the δ-score is b·Σ(y − 1/2), so it is free of b only for
    // records with as many ones as zeros
    let design = GlmmDesign::mcculloch(4);
    let zero = GlmmParams::new(vec![0.0], vec![0.0]);
    let records = vec![vec![1, 1, 0, 0], vec![0, 1, 0, 1], vec![1, 0, 0, 1]];
    let data = mcmle::glmm::observed_data(&design, records).unwrap();
    let c = study::scheme_variance_compare(&design, &zero, &data, 30, 100, 4).unwrap();
    assert_eq!(c.trace_shared, 0.0);
    assert_eq!(c.trace_fresh, 0.0);
}

#[test]
fn generated_data_is_deterministic() {
    let design = GlmmDesign::mcculloch(15);
    let a = study::generate_dataset(&design, &desk_truth(), 40, 12).unwrap();
    let b = study::generate_dataset(&design, &desk_truth(), 40, 12).unwrap();
    assert_eq!(a.records(), b.records());
    let fair = study::generate_dataset(&design, &GlmmParams::new(vec![0.0], vec![0.0]), 2000, 1).unwrap();
    let ones: usize = fair.records().iter().map(|y| y.iter().map(|&v| v as usize).sum::<usize>()).sum();
    let total = (2000 * 15) as f64;
    let sd = (total * 0.25).sqrt();
    assert!((ones as f64 - total / 2.0).abs() < 3.0 * sd);
}

#[test]
fn too_many_invalid_replicates_fail_the_study() {
    // an iteration budget of one makes every fit non-convergent
    let design = GlmmDesign::mcculloch(5);
    let opts = OptOptions {
        max_iter: 1,
        ..OptOptions::default()
    };
    let err = study::coverage_study(&design, &desk_truth(), 50, 20, 4, 0.95, 1, EllipseMode::ExactTheory, &opts).unwrap_err();
    assert!(matches!(err, mcmle::Error::StudyFailed { invalid: 4, replicates: 4 }));
}
