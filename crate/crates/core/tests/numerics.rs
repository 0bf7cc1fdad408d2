use mnbr::numerics::{
    cholesky_solve, digamma, log_gamma, max_eigpair, std_normal_cdf, std_normal_quantile, trigamma,
    Cholesky, NumericsError, SymMatrix,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn grid() -> impl Iterator<Item = f64> {
    (1..=500).map(|k| k as f64 * 0.1)
}

#[test]
fn log_gamma_recurrence_on_grid() {
    for x in grid() {
        let lhs = log_gamma(x + 1.0).unwrap();
        let rhs = log_gamma(x).unwrap() + x.ln();
        assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0), "x = {x}: {lhs} vs {rhs}");
    }
}

#[test]
fn digamma_and_trigamma_recurrences_on_grid() {
    for x in grid() {
        let d = digamma(x + 1.0).unwrap() - digamma(x).unwrap() - 1.0 / x;
        assert!(d.abs() <= 1e-10, "digamma at {x}: {d:e}");
        let t = trigamma(x + 1.0).unwrap() - trigamma(x).unwrap() + 1.0 / (x * x);
        assert!(t.abs() <= 1e-10, "trigamma at {x}: {t:e}");
    }
}

#[test]
fn digamma_matches_log_gamma_difference_quotient() {
    let h = 1e-5;
    for x in [0.7_f64, 2.2, 10.3, 33.0] {
        let fd = (log_gamma(x + h).unwrap() - log_gamma(x - h).unwrap()) / (2.0 * h);
        let psi = digamma(x).unwrap();
        assert!((fd - psi).abs() <= 1e-8 * psi.abs().max(1.0), "x = {x}: fd {fd} psi {psi}");
    }
}

#[test]
fn trigamma_matches_digamma_difference_quotient() {
    let h = 1e-5;
    for x in [0.9_f64, 3.0, 7.25, 40.0] {
        let fd = (digamma(x + h).unwrap() - digamma(x - h).unwrap()) / (2.0 * h);
        let t = trigamma(x).unwrap();
        assert!((fd - t).abs() <= 1e-7 * t, "x = {x}: fd {fd} trigamma {t}");
    }
}

#[test]
fn log_gamma_extreme_arguments() {
    // ln Gamma(x) ~ -ln x - gamma x for tiny x
    let x = 1e-6_f64;
    let expected = -x.ln() - 0.577_215_664_901_532_9 * x;
    assert!((log_gamma(x).unwrap() / expected - 1.0).abs() < 1e-12);
    // Stirling at 1e12
    let x = 1e12_f64;
    let expected = (x - 0.5) * x.ln() - x + 0.5 * (2.0 * std::f64::consts::PI).ln() + 1.0 / (12.0 * x);
    assert!((log_gamma(x).unwrap() / expected - 1.0).abs() < 1e-14);
    assert!((digamma(1e12_f64).unwrap() / (1e12_f64.ln() - 0.5e-12) - 1.0).abs() < 1e-14);
}

/// Composite Simpson integral of the standard normal density over [a, b].
fn simpson_density(a: f64, b: f64, intervals: usize) -> f64 {
    let h = (b - a) / intervals as f64;
    let f = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut acc = f(a) + f(b);
    for k in 1..intervals {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + k as f64 * h);
    }
    acc * h / 3.0
}

#[test]
fn quantile_inverts_integrated_density() {
    for &p in &[1e-6_f64, 0.001, 0.025, 0.1, 0.3, 0.5, 0.7, 0.9, 0.975, 0.999] {
        let q = std_normal_quantile(p).unwrap();
        let integral = simpson_density(-40.0, q, 400_000);
        assert!((integral - p).abs() <= 1e-12, "p = {p}: integral {integral}");
        assert!((std_normal_cdf(q) - p).abs() <= 1e-12);
    }
    let q: f64 = std_normal_quantile(0.975).unwrap();
    assert!((q - 1.959_963_985).abs() < 1e-9);
}

proptest! {
    #[test]
    fn quantile_round_trip(p in 1e-10f64..(1.0 - 1e-10)) {
        let q = std_normal_quantile(p).unwrap();
        prop_assert!((std_normal_cdf(q) - p).abs() <= 1e-12);
    }
}

fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> SymMatrix<f64> {
    let m: Vec<f64> = (0..n * n).map(|_| rng.sample(StandardNormal)).collect();
    SymMatrix::from_fn(n, |i, j| {
        let g: f64 = (0..n).map(|k| m[k * n + i] * m[k * n + j]).sum();
        if i == j {
            g + 0.5
        } else {
            g
        }
    })
}

#[test]
fn cholesky_residuals_over_many_systems() {
    let mut rng = ChaCha8Rng::seed_from_u64(20_190_301);
    for case in 0..1000 {
        let n = 1 + case % 20;
        let a = random_spd(&mut rng, n);
        let b: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let x = cholesky_solve(&a, &b).unwrap();
        let ax = a.mul_vec(&x);
        let bnorm = b.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let resid = ax.iter().zip(&b).fold(0.0_f64, |m, (u, v)| m.max((u - v).abs()));
        assert!(resid <= 1e-10 * bnorm, "case {case}, n = {n}: residual {resid:e}");
    }
}

#[test]
fn cholesky_random_six_by_six() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = random_spd(&mut rng, 6);
    let b: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = Cholesky::factor(&a).unwrap().solve(&b);
    for (u, v) in a.mul_vec(&x).iter().zip(&b) {
        assert!((u - v).abs() <= 1e-10);
    }
}

#[test]
fn cholesky_dimension_mismatch_is_reported() {
    let a = SymMatrix::<f64>::identity(2);
    assert!(matches!(
        cholesky_solve(&a, &[1.0, 2.0, 3.0]),
        Err(NumericsError::DimensionMismatch { .. })
    ));
}

/// Cyclic Jacobi eigenvalues of a symmetric matrix.
fn jacobi_eigenvalues(a: &SymMatrix<f64>) -> Vec<f64> {
    let n = a.dim();
    let mut m = a.to_rows();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum();
        if off < 1e-26 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k][p];
                    let mkq = m[k][q];
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p][k];
                    let mqk = m[q][k];
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    (0..n).map(|i| m[i][i]).collect()
}

fn check_eigen_residual(a: &SymMatrix<f64>, value: f64, vector: &[f64]) {
    let av = a.mul_vec(vector);
    let resid = av
        .iter()
        .zip(vector)
        .fold(0.0_f64, |m, (u, v)| m.max((u - value * v).abs()));
    assert!(resid <= 1e-8 * value, "residual {resid:e} for eigenvalue {value}");
    let norm: f64 = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() < 1e-12);
    let first = vector.iter().find(|v| **v != 0.0).unwrap();
    assert!(*first > 0.0);
}

#[test]
fn top_eigenpair_agrees_with_jacobi_on_59_by_59() {
    let mut rng = ChaCha8Rng::seed_from_u64(59);
    // rank-5 PSD matrix plus a small ridge, like a curvature matrix
    let n = 59;
    let cols: Vec<Vec<f64>> = (0..5)
        .map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let a = SymMatrix::from_fn(n, |i, j| {
        cols.iter().map(|c| c[i] * c[j]).sum::<f64>() + if i == j { 1e-3 } else { 0.0 }
    });
    let pair = max_eigpair(&a).unwrap();
    let reference = jacobi_eigenvalues(&a)
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    assert!((pair.value - reference).abs() <= 1e-9 * reference, "{} vs {reference}", pair.value);
    check_eigen_residual(&a, pair.value, &pair.vector);
}

#[test]
fn top_eigenvalue_bounds_rayleigh_quotients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let a = random_spd(&mut rng, 12);
    let pair = max_eigpair(&a).unwrap();
    check_eigen_residual(&a, pair.value, &pair.vector);
    for _ in 0..1000 {
        let v: Vec<f64> = (0..12).map(|_| rng.sample(StandardNormal)).collect();
        let norm2: f64 = v.iter().map(|x| x * x).sum();
        let rq = a.quad_form(&v) / norm2;
        assert!(rq <= pair.value * (1.0 + 1e-10), "Rayleigh quotient {rq} above {}", pair.value);
    }
}
