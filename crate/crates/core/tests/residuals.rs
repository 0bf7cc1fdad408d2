mod common;

use common::{seizures, synthetic};
use mnbr::estimation::{fit, poisson_fit, FitOptions};
use mnbr::model::{Cluster, LongitudinalDataset, ThetaParams};
use mnbr::numerics::std_normal_cdf;
use mnbr::residuals::{
    nb_total_cdf, nb_total_pmf, pearson_residuals, quantile_residuals, quantile_residuals_at, simulated_envelope,
    BandRule, EnvelopeModel, EnvelopeOptions, ResidualError, ResidualKind,
};

fn ks_distance(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = std_normal_cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn cdf_matches_extended_precision_sums() {
    // term-by-term sums at 40 significant digits
    let cases = [
        (5, 3.0, 1.5, 0.83216844355418281489),
        (0, 2.0, 2.0, 0.25),
        (40, 12.5, 0.7, 0.94060463809856852504),
        (302, 100.0, 1.6, 0.97397623852851181707),
    ];
    for (y, mu, phi, want) in cases {
        let got: f64 = nb_total_cdf(y, mu, phi).unwrap();
        assert!((got - want).abs() <= 1e-12, "F({y}; {mu}, {phi}) = {got}, want {want}");
    }
}

#[test]
fn cdf_increments_are_the_pmf() {
    for &(mu, phi) in &[(0.3, 0.5), (3.0, 1.5), (25.0, 4.0), (200.0, 0.8)] {
        let mut prev = 0.0;
        for y in 0..400u64 {
            let f: f64 = nb_total_cdf(y, mu, phi).unwrap();
            let p = nb_total_pmf(y, mu, phi).unwrap();
            assert!(f >= prev);
            assert!((f - prev - p).abs() <= 1e-12, "mu {mu} phi {phi} y {y}");
            prev = f;
        }
    }
}

#[test]
fn pearson_residual_hand_values() {
    let c = Cluster::new("a", vec![4, 1], vec![vec![1.0], vec![1.0]], vec![0.0, 0.0]).unwrap();
    let data = LongitudinalDataset::new(vec![c], vec!["(Intercept)".into()]).unwrap();
    let baseline = mnbr::estimation::PoissonFit {
        beta_hat: vec![0.0_f64],
        fitted_means: vec![vec![1.0, 1.0]],
        loglik: 0.0,
        iterations: 0,
        grad_norm: 0.0,
    };
    let r = pearson_residuals(&baseline, &data).unwrap();
    assert_eq!(r.kind, ResidualKind::PearsonPoisson);
    assert!((r.residuals[0] - 3.0).abs() < 1e-15);
    assert!(r.residuals[1].abs() < 1e-15);
    assert_eq!(r.measurement, Some(vec![0, 1]));
}

#[test]
fn seizure_pearson_signals_overdispersion() {
    let data = seizures();
    let base = poisson_fit(&data).unwrap();
    let r = pearson_residuals(&base, &data).unwrap();
    assert_eq!(r.residuals.len(), data.n_measurements());
    let ss: f64 = r.residuals.iter().map(|x| x * x).sum();
    let df = (data.n_measurements() - data.n_covariates()) as f64;
    assert!(ss / df > 2.0, "{}", ss / df);
}

#[test]
fn seizure_residuals_single_out_patient_49() {
    let data = seizures();
    let f = fit(&data, &FitOptions::default()).unwrap();
    for seed in [1, 7, 2024] {
        let r = quantile_residuals(&f, &data, seed).unwrap();
        assert_eq!(r.residuals.len(), 59);
        assert!(r.residuals.iter().all(|x| x.is_finite()));
        let (i, _) = r
            .residuals
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .unwrap();
        assert_eq!(r.cluster_ids[i], "49", "seed {seed}");
    }
}

#[test]
fn residuals_are_reproducible() {
    let data = seizures();
    let f = fit(&data, &FitOptions::default()).unwrap();
    let a = quantile_residuals(&f, &data, 11).unwrap();
    let b = quantile_residuals(&f, &data, 11).unwrap();
    let c = quantile_residuals(&f, &data, 12).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.residuals, c.residuals);
}

#[test]
fn unconverged_fit_is_rejected() {
    let data = seizures();
    let mut f = fit(&data, &FitOptions::default()).unwrap();
    f.converged = false;
    assert!(matches!(quantile_residuals(&f, &data, 1), Err(ResidualError::NotConverged)));
}

#[test]
fn residuals_are_standard_normal_under_the_model() {
    let theta = ThetaParams::new(vec![1.0, 0.5, -0.3], 2.0).unwrap();
    let mut passed = 0;
    for seed in 0..20 {
        let data = synthetic(500 + seed, 200, 3, &theta);
        let f = fit(&data, &FitOptions::default()).unwrap();
        let r = quantile_residuals(&f, &data, seed).unwrap().residuals;
        if ks_distance(&r) <= 0.12 {
            passed += 1;
        }
    }
    assert!(passed >= 18, "{passed} of 20");

    let data = synthetic(77, 500, 3, &theta);
    let f = fit(&data, &FitOptions::default()).unwrap();
    let r = quantile_residuals(&f, &data, 77).unwrap().residuals;
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    let var = r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    assert!(mean.abs() <= 0.1, "mean {mean}");
    assert!((0.85..=1.15).contains(&var), "var {var}");
}

#[test]
fn zero_totals_land_below_the_cdf_at_zero() {
    let theta = ThetaParams::new(vec![-2.0], 0.5).unwrap();
    let data = synthetic(3, 60, 2, &theta);
    let r = quantile_residuals_at(&theta, &data, 5).unwrap();
    for (c, &q) in data.clusters().iter().zip(&r.residuals) {
        if c.total() == 0 {
            let mu_plus: f64 = c.offset().iter().map(|o| (o - 2.0_f64).exp()).sum();
            let f0 = nb_total_cdf(0, mu_plus, 0.5).unwrap();
            assert!(std_normal_cdf(q) <= f0 + 1e-12);
        }
    }
}

#[test]
fn envelope_shape_and_ordering() {
    let data = seizures();
    let f = fit(&data, &FitOptions::default()).unwrap();
    let model = EnvelopeModel::Mnb(f.theta_hat.clone());
    let band = simulated_envelope(&model, &data, &EnvelopeOptions { nsim: 39, ..EnvelopeOptions::default() }).unwrap();
    assert_eq!(band.nsim, 39);
    for v in [&band.lower, &band.median, &band.upper, &band.observed, &band.theoretical] {
        assert_eq!(v.len(), 59);
    }
    for i in 0..59 {
        assert!(band.lower[i] <= band.median[i] && band.median[i] <= band.upper[i]);
    }
    assert!(band.observed.windows(2).all(|w| w[0] <= w[1]));
    let again = simulated_envelope(&model, &data, &EnvelopeOptions { nsim: 39, ..EnvelopeOptions::default() }).unwrap();
    assert_eq!(band, again);

    let compat = simulated_envelope(&model, &data, &EnvelopeOptions::compat(3)).unwrap();
    assert_eq!(compat.nsim, 21);
    let wider = simulated_envelope(
        &model,
        &data,
        &EnvelopeOptions {
            band: BandRule::Central(0.5),
            ..EnvelopeOptions::compat(3)
        },
    )
    .unwrap();
    for i in 0..59 {
        assert!(compat.lower[i] <= wider.lower[i] && wider.upper[i] <= compat.upper[i]);
    }

    let base = poisson_fit(&data).unwrap();
    let pband = simulated_envelope(&EnvelopeModel::Poisson(base.beta_hat), &data, &EnvelopeOptions::compat(1)).unwrap();
    assert_eq!(pband.observed.len(), data.n_measurements());
}

#[test]
fn envelope_rejects_too_few_replicates() {
    let data = seizures();
    let f = fit(&data, &FitOptions::default()).unwrap();
    let opts = EnvelopeOptions { nsim: 18, ..EnvelopeOptions::default() };
    assert!(matches!(
        simulated_envelope(&EnvelopeModel::Mnb(f.theta_hat), &data, &opts),
        Err(ResidualError::InvalidArgument(_))
    ));
}

#[test]
fn envelope_is_calibrated_under_the_model() {
    let theta = ThetaParams::new(vec![1.0, 0.5], 2.0).unwrap();
    let mut good = 0;
    for trial in 0..20 {
        let data = synthetic(900 + trial, 60, 3, &theta);
        let f = fit(&data, &FitOptions::default()).unwrap();
        let opts = EnvelopeOptions { seed: trial, ..EnvelopeOptions::default() };
        let band = simulated_envelope(&EnvelopeModel::Mnb(f.theta_hat), &data, &opts).unwrap();
        let outside = (0..band.observed.len())
            .filter(|&i| band.observed[i] < band.lower[i] || band.observed[i] > band.upper[i])
            .count();
        if outside as f64 / band.observed.len() as f64 <= 0.10 {
            good += 1;
        }
    }
    assert!(good >= 19, "{good} of 20");
}

#[test]
fn single_cluster_envelope() {
    let c = Cluster::new("only", vec![3, 5], vec![vec![1.0], vec![1.0]], vec![0.0, 0.0]).unwrap();
    let data = LongitudinalDataset::new(vec![c], vec!["(Intercept)".into()]).unwrap();
    let theta = ThetaParams::new(vec![1.3], 1.0).unwrap();
    let opts = EnvelopeOptions { nsim: 21, refit: false, ..EnvelopeOptions::default() };
    let band = simulated_envelope(&EnvelopeModel::Mnb(theta), &data, &opts).unwrap();
    assert_eq!(band.lower.len(), 1);
    assert!(band.lower[0] <= band.upper[0]);
}
