use bcp_demo::{bcp_size_curve, bcp_size_curve_json, lplus_explorer, lplus_explorer_json, predictive_curves};

#[test]
fn lplus_histogram_matches_beta_moments() {
    let v = lplus_explorer(99, 20, 0.2, 50_000, 3).unwrap();
    assert_eq!(v.counts.iter().sum::<usize>(), 50_000);
    assert_eq!(v.bin_edges.len(), v.counts.len() + 1);
    assert!((v.expected_mean - 21.0 / 100.0).abs() < 1e-12);
    assert!((v.mean - v.expected_mean).abs() < 2e-3);
    assert!((v.prob_below_alpha - v.exact_prob).abs() < 0.01);
}

#[test]
fn lplus_rejects_bad_input_as_json_error() {
    assert!(lplus_explorer(10, 11, 0.2, 100, 1).is_err());
    let out: serde_json::Value = serde_json::from_str(&lplus_explorer_json(10, 3, 1.5, 100, 1)).unwrap();
    assert!(out["error"].is_string());
}

fn normal_pdf(x: f64, var: f64) -> f64 {
    (-0.5 * x * x / var).exp() / (std::f64::consts::TAU * var).sqrt()
}

#[test]
fn predictive_curves_match_gaussian_oracles() {
    let (s, tau) = (1.0, 1.0);
    let v = predictive_curves(20_000, s, tau, 5).unwrap();
    let dy = v.y[1] - v.y[0];
    assert!((v.mean_density.iter().sum::<f64>() * dy - 1.0).abs() < 0.01);
    for (i, &y) in v.y.iter().enumerate().step_by(10).filter(|(_, y)| y.abs() <= 3.0) {
        let mean = normal_pdf(y, s * s + tau * tau);
        let second = normal_pdf(y, s * s + tau * tau / 2.0) / (2.0 * std::f64::consts::PI.sqrt() * tau);
        // Relative Monte Carlo standard error of the mean density estimate.
        let rel_se = ((second / (mean * mean) - 1.0) / 20_000.0).sqrt();
        assert!((v.mean_density[i] - mean).abs() < 4.0 * rel_se * mean, "mean at {y}: {} vs {mean}", v.mean_density[i]);
        let aoi = second / mean;
        assert!((v.aoi_density[i] - aoi).abs() < 6.0 * rel_se * aoi, "aoi at {y}: {} vs {aoi}", v.aoi_density[i]);
    }
    // A point-mass posterior makes both curves the same normal.
    let p = predictive_curves(5, 0.0, 0.7, 5).unwrap();
    for (a, b) in p.mean_density.iter().zip(&p.aoi_density) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn size_curve_is_monotone_and_reproducible() {
    let v = bcp_size_curve(0.2, 0.8, 1.0, 2).unwrap();
    assert!(!v.lambda.is_empty());
    assert!(v.lambda.windows(2).all(|w| w[0] <= w[1]));
    assert!(v.size.windows(2).all(|w| w[0] <= w[1] + 1e-9));
    assert!((0.0..=1.0).contains(&v.test_coverage));
    assert!(v.test_width > 0.0);
    assert_eq!(bcp_size_curve_json(0.2, 0.8, 1.0, 2), bcp_size_curve_json(0.2, 0.8, 1.0, 2));
}
