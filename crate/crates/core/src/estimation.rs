//! Maximum likelihood fitting: BFGS on `(beta, ln phi)` with Newton
//! polishing, Wald tables, and the independent-Poisson baseline.

use crate::model::{
    log_likelihood, observed_information, score, LongitudinalDataset, ModelError, ThetaParams,
};
use crate::numerics::{norm_inf, two_sided_p_value, Cholesky, SymMatrix};
use crate::Real;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Armijo sufficient-decrease constant.
const ARMIJO_C1: f64 = 1e-4;
const BACKTRACK_SHRINK: f64 = 0.5;
const MAX_BACKTRACKS: usize = 60;
/// Score norm below which Newton steps on the analytic information are tried.
const POLISH_THRESHOLD: f64 = 1e-3;
const PHI_INIT_RANGE: (f64, f64) = (0.01, 100.0);
const PHI_INIT_FLOOR: f64 = 1e-3;
const POISSON_GRAD_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FitError {
    #[error("no convergence after {iterations} iterations (score norm {grad_norm:e})")]
    MaxIterationsExceeded { iterations: usize, grad_norm: f64 },
    #[error("line search stalled after {iterations} iterations (score norm {grad_norm:e})")]
    Stalled { iterations: usize, grad_norm: f64 },
    #[error("observed information is not positive definite: {0}")]
    SingularInformation(String),
    #[error("degenerate data: {0}")]
    DataDegenerate(String),
    #[error("invalid options: {0}")]
    InvalidOptions(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions<T> {
    pub init: Option<ThetaParams<T>>,
    pub grad_tol: T,
    pub max_iter: usize,
    /// Optimize over `ln phi` instead of `phi`.
    pub phi_log_scale: bool,
}

impl<T: Real> Default for FitOptions<T> {
    fn default() -> Self {
        Self {
            init: None,
            grad_tol: T::of(1e-6),
            max_iter: 500,
            phi_log_scale: true,
        }
    }
}

impl<T: Real> FitOptions<T> {
    fn validate(&self) -> Result<(), FitError> {
        if !(self.grad_tol > T::zero()) {
            return Err(FitError::InvalidOptions("grad_tol must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(FitError::InvalidOptions("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

/// One line of the coefficient table. `z` and `p_value` are absent for phi.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaldRow<T> {
    pub name: String,
    pub estimate: T,
    pub se: T,
    pub z: Option<T>,
    pub p_value: Option<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult<T> {
    pub theta_hat: ThetaParams<T>,
    pub loglik: T,
    /// Observed information at `theta_hat`, `(beta, phi)` order.
    pub info: SymMatrix<T>,
    /// Standard errors in `(beta, phi)` order.
    pub se: Vec<T>,
    /// Wald statistics for beta only.
    pub z: Vec<T>,
    pub p_values: Vec<T>,
    pub lambda_hat: T,
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: T,
    pub covariate_names: Vec<String>,
    pub diagnostic: Option<String>,
}

impl<T: Real> FitResult<T> {
    pub fn wald_table(&self) -> Vec<WaldRow<T>> {
        let p = self.theta_hat.beta.len();
        let mut rows: Vec<WaldRow<T>> = (0..p)
            .map(|k| WaldRow {
                name: self.covariate_names[k].clone(),
                estimate: self.theta_hat.beta[k],
                se: self.se[k],
                z: Some(self.z[k]),
                p_value: Some(self.p_values[k]),
            })
            .collect();
        rows.push(WaldRow {
            name: "phi".into(),
            estimate: self.theta_hat.phi,
            se: self.se[p],
            z: None,
            p_value: None,
        });
        rows
    }

    /// Inverse observed information.
    pub fn covariance(&self) -> Result<SymMatrix<T>, FitError> {
        Cholesky::factor(&self.info)
            .map(|c| c.inverse())
            .map_err(|e| FitError::SingularInformation(e.to_string()))
    }
}

/// Independent-Poisson fit with the same linear predictor and offsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoissonFit<T> {
    pub beta_hat: Vec<T>,
    pub fitted_means: Vec<Vec<T>>,
    /// Full log-likelihood, including the `-ln y!` terms.
    pub loglik: T,
    pub iterations: usize,
    pub grad_norm: T,
}

impl<T: Real> PoissonFit<T> {
    /// Pearson chi-square statistic and its residual degrees of freedom.
    pub fn pearson(&self, data: &LongitudinalDataset<T>) -> (T, usize) {
        let stat = data
            .clusters()
            .iter()
            .zip(&self.fitted_means)
            .flat_map(|(c, mu)| c.counts().iter().zip(mu.iter()))
            .map(|(&y, &m)| {
                let r = T::count(y) - m;
                r * r / m
            })
            .sum();
        (stat, data.n_measurements().saturating_sub(self.beta_hat.len()))
    }
}

fn check_data<T: Real>(data: &LongitudinalDataset<T>) -> Result<(), FitError> {
    let p = data.n_covariates();
    if data.n_clusters() < p + 1 {
        return Err(FitError::DataDegenerate(format!(
            "{} clusters cannot identify {} parameters",
            data.n_clusters(),
            p + 1
        )));
    }
    if data.all_counts().all(|y| y == 0) {
        return Err(FitError::DataDegenerate("all counts are zero".into()));
    }
    let mut xtx = SymMatrix::zeros(p);
    for c in data.clusters() {
        for j in 0..c.len() {
            let row = c.design_row(j);
            for r in 0..p {
                for s in r..p {
                    xtx.add_to(r, s, row[r] * row[s]);
                }
            }
        }
    }
    Cholesky::factor(&xtx).map_err(|_| {
        FitError::DataDegenerate("design matrix is rank deficient (constant or collinear columns)".into())
    })?;
    Ok(())
}

/// Poisson log-likelihood without the `ln y!` constant, and the sum of the
/// absolute terms (the scale of its rounding error).
fn poisson_loglik<T: Real>(beta: &[T], data: &LongitudinalDataset<T>) -> Result<(T, T), ModelError> {
    let mut total = T::zero();
    let mut magnitude = T::zero();
    for c in data.clusters() {
        let mu = crate::model::cluster_means(beta, c)?;
        for (&y, &m) in c.counts().iter().zip(&mu) {
            let a = T::count(y) * m.ln();
            total += a - m;
            magnitude += a.abs() + m;
        }
    }
    Ok((total, magnitude))
}

/// Gradient and information of the Poisson log-likelihood.
fn poisson_derivatives<T: Real>(
    beta: &[T],
    data: &LongitudinalDataset<T>,
) -> Result<(Vec<T>, SymMatrix<T>), ModelError> {
    let p = beta.len();
    let mut grad = vec![T::zero(); p];
    let mut info = SymMatrix::zeros(p);
    for c in data.clusters() {
        let mu = crate::model::cluster_means(beta, c)?;
        for (j, (&y, &m)) in c.counts().iter().zip(&mu).enumerate() {
            let row = c.design_row(j);
            let r = T::count(y) - m;
            for a in 0..p {
                grad[a] += r * row[a];
                for b in a..p {
                    info.add_to(a, b, m * row[a] * row[b]);
                }
            }
        }
    }
    Ok((grad, info))
}

/// Newton–Raphson for the independent-Poisson log-linear model.
pub fn poisson_fit<T: Real>(data: &LongitudinalDataset<T>) -> Result<PoissonFit<T>, FitError> {
    check_data(data)?;
    let p = data.n_covariates();
    // least squares on log(y + 1/2) - offset as a start
    let mut xtx = SymMatrix::zeros(p);
    let mut xtz = vec![T::zero(); p];
    for c in data.clusters() {
        for (j, &y) in c.counts().iter().enumerate() {
            let row = c.design_row(j);
            let z = (T::count(y) + T::of(0.5)).ln() - c.offset()[j];
            for a in 0..p {
                xtz[a] += row[a] * z;
                for b in a..p {
                    xtx.add_to(a, b, row[a] * row[b]);
                }
            }
        }
    }
    let mut beta = Cholesky::factor(&xtx)
        .map_err(|e| FitError::DataDegenerate(e.to_string()))?
        .solve(&xtz);
    let (mut ll, mut magnitude) = poisson_loglik(&beta, data)?;
    let max_iter = 200;
    for iteration in 0..=max_iter {
        let (grad, info) = poisson_derivatives(&beta, data)?;
        let gnorm = norm_inf(&grad);
        let step = Cholesky::factor(&info)
            .map_err(|e| FitError::SingularInformation(e.to_string()))?
            .solve(&grad);
        // in low precision the gradient floor can sit above the tolerance;
        // a step below rounding level means the iteration has converged
        let at_fixed_point =
            norm_inf(&step) <= T::epsilon() * T::of(8.0) * norm_inf(&beta).max(T::one());
        if gnorm <= T::of(POISSON_GRAD_TOL) || at_fixed_point {
            let fitted_means = data
                .clusters()
                .iter()
                .map(|c| crate::model::cluster_means(&beta, c))
                .collect::<Result<_, _>>()?;
            let mut log_factorials = T::zero();
            for c in data.clusters() {
                for &y in c.counts() {
                    log_factorials += crate::numerics::log_gamma(T::count(y) + T::one())
                        .map_err(|e| FitError::DataDegenerate(e.to_string()))?;
                }
            }
            return Ok(PoissonFit {
                beta_hat: beta,
                fitted_means,
                loglik: ll - log_factorials,
                iterations: iteration,
                grad_norm: gnorm,
            });
        }
        if iteration == max_iter {
            return Err(FitError::MaxIterationsExceeded {
                iterations: iteration,
                grad_norm: gnorm.to_f64_lossy(),
            });
        }
        let mut t = T::one();
        let mut accepted = false;
        for _ in 0..MAX_BACKTRACKS {
            let trial: Vec<T> = beta.iter().zip(&step).map(|(b, s)| *b + t * *s).collect();
            if let Ok((l, mag)) = poisson_loglik(&trial, data) {
                // near the optimum the objective is flat to rounding; accept
                // any step that does not lose more than that
                let slack = T::epsilon() * T::of(16.0) * magnitude.max(T::one());
                if l >= ll - slack {
                    beta = trial;
                    ll = l;
                    magnitude = mag;
                    accepted = true;
                    break;
                }
            }
            t *= T::of(BACKTRACK_SHRINK);
        }
        if !accepted {
            return Err(FitError::Stalled {
                iterations: iteration,
                grad_norm: gnorm.to_f64_lossy(),
            });
        }
    }
    unreachable!("loop returns on its last iteration")
}

/// Method-of-moments starting value for phi from a Poisson fit:
/// `sum mu^2 / max(sum (y - mu)^2 - sum mu, floor)`, clamped.
pub fn initial_phi<T: Real>(data: &LongitudinalDataset<T>, baseline: &PoissonFit<T>) -> T {
    let mut mu2 = T::zero();
    let mut excess = T::zero();
    for (c, mu) in data.clusters().iter().zip(&baseline.fitted_means) {
        for (&y, &m) in c.counts().iter().zip(mu) {
            let r = T::count(y) - m;
            mu2 += m * m;
            excess += r * r - m;
        }
    }
    let phi = mu2 / excess.max(T::of(PHI_INIT_FLOOR));
    phi.max(T::of(PHI_INIT_RANGE.0)).min(T::of(PHI_INIT_RANGE.1))
}

/// Default start: Poisson coefficients and the moment estimate of phi.
pub fn default_start<T: Real>(data: &LongitudinalDataset<T>) -> Result<ThetaParams<T>, FitError> {
    let baseline = poisson_fit(data)?;
    let phi = initial_phi(data, &baseline);
    Ok(ThetaParams::new(baseline.beta_hat, phi)?)
}

/// Internal optimization coordinates.
struct Coordinates {
    log_phi: bool,
}

impl Coordinates {
    fn to_eta<T: Real>(&self, theta: &ThetaParams<T>) -> Vec<T> {
        let mut v = theta.beta.clone();
        v.push(if self.log_phi { theta.phi.ln() } else { theta.phi });
        v
    }

    fn to_theta<T: Real>(&self, eta: &[T]) -> Option<ThetaParams<T>> {
        let (last, beta) = eta.split_last()?;
        let phi = if self.log_phi { last.exp() } else { *last };
        ThetaParams::new(beta.to_vec(), phi).ok()
    }

    /// Gradient of the negative log-likelihood in eta.
    fn gradient<T: Real>(&self, theta: &ThetaParams<T>, u: &[T]) -> Vec<T> {
        let p = theta.beta.len();
        let mut g: Vec<T> = u.iter().map(|v| -*v).collect();
        if self.log_phi {
            g[p] = g[p] * theta.phi;
        }
        g
    }

    /// Hessian of the negative log-likelihood in eta.
    fn hessian<T: Real>(&self, theta: &ThetaParams<T>, u: &[T], info: &SymMatrix<T>) -> SymMatrix<T> {
        if !self.log_phi {
            return info.clone();
        }
        let p = theta.beta.len();
        let phi = theta.phi;
        SymMatrix::from_fn(p + 1, |i, j| match (i == p, j == p) {
            (false, false) => info.get(i, j),
            (true, true) => phi * phi * info.get(p, p) - phi * u[p],
            _ => phi * info.get(i, j),
        })
    }
}

fn objective<T: Real>(theta: &ThetaParams<T>, data: &LongitudinalDataset<T>) -> Option<T> {
    log_likelihood(theta, data).ok().filter(|v| v.is_finite()).map(|v| -v)
}

/// Maximum likelihood fit of the MNB regression model.
pub fn fit<T: Real>(data: &LongitudinalDataset<T>, opts: &FitOptions<T>) -> Result<FitResult<T>, FitError> {
    opts.validate()?;
    check_data(data)?;
    let start = match &opts.init {
        Some(init) => {
            if init.beta.len() != data.n_covariates() {
                return Err(ModelError::DimensionMismatch(format!(
                    "initial beta has length {}, design has {} columns",
                    init.beta.len(),
                    data.n_covariates()
                ))
                .into());
            }
            init.validate()?;
            init.clone()
        }
        None => default_start(data)?,
    };
    let coords = Coordinates {
        log_phi: opts.phi_log_scale,
    };
    let dim = data.n_covariates() + 1;

    let mut theta = start;
    let mut f = objective(&theta, data).ok_or_else(|| {
        FitError::Model(ModelError::Domain("log-likelihood is not finite at the start".into()))
    })?;
    let mut u = score(&theta, data)?;
    let mut eta = coords.to_eta(&theta);
    let mut g = coords.gradient(&theta, &u);
    let mut h_inv = fresh_inverse(&coords, &theta, &u, data)?;
    let mut fresh = true;
    let mut iterations = 0usize;

    loop {
        let gnorm = norm_inf(&u);
        if gnorm <= opts.grad_tol {
            break;
        }
        if iterations >= opts.max_iter {
            return Err(FitError::MaxIterationsExceeded {
                iterations,
                grad_norm: gnorm.to_f64_lossy(),
            });
        }
        iterations += 1;

        if gnorm <= T::of(POLISH_THRESHOLD) {
            if let Some((t, fv, uv)) = newton_step(&theta, &u, f, data)? {
                theta = t;
                f = fv;
                u = uv;
                eta = coords.to_eta(&theta);
                g = coords.gradient(&theta, &u);
                continue;
            }
        }

        let mut dir: Vec<T> = h_inv.mul_vec(&g).into_iter().map(|v| -v).collect();
        let mut slope = crate::numerics::dot(&g, &dir);
        if !(slope < T::zero()) {
            h_inv = fresh_inverse(&coords, &theta, &u, data)?;
            fresh = true;
            dir = h_inv.mul_vec(&g).into_iter().map(|v| -v).collect();
            slope = crate::numerics::dot(&g, &dir);
        }
        match armijo(&coords, &eta, &dir, f, slope, data) {
            Some((new_eta, new_theta, new_f)) => {
                let new_u = score(&new_theta, data)?;
                let new_g = coords.gradient(&new_theta, &new_u);
                let s: Vec<T> = new_eta.iter().zip(&eta).map(|(a, b)| *a - *b).collect();
                let y: Vec<T> = new_g.iter().zip(&g).map(|(a, b)| *a - *b).collect();
                bfgs_update(&mut h_inv, &s, &y);
                eta = new_eta;
                theta = new_theta;
                f = new_f;
                u = new_u;
                g = new_g;
                fresh = false;
            }
            None if !fresh => {
                h_inv = fresh_inverse(&coords, &theta, &u, data)?;
                fresh = true;
            }
            None => {
                // rounding-level objective changes: fall back to Newton on the score
                if let Some((t, fv, uv)) = newton_step(&theta, &u, f, data)? {
                    theta = t;
                    f = fv;
                    u = uv;
                    eta = coords.to_eta(&theta);
                    g = coords.gradient(&theta, &u);
                    continue;
                }
                return Err(FitError::Stalled {
                    iterations,
                    grad_norm: gnorm.to_f64_lossy(),
                });
            }
        }
    }
    debug_assert_eq!(u.len(), dim);
    finish(theta, -f, u, iterations, data)
}

fn finish<T: Real>(
    theta: ThetaParams<T>,
    loglik: T,
    u: Vec<T>,
    iterations: usize,
    data: &LongitudinalDataset<T>,
) -> Result<FitResult<T>, FitError> {
    let p = theta.beta.len();
    let info = observed_information(&theta, data)?;
    let grad_norm = norm_inf(&u);
    let (se, converged, diagnostic) = match Cholesky::factor(&info) {
        Ok(chol) => {
            let cov = chol.inverse();
            (cov.diagonal().into_iter().map(|v| v.sqrt()).collect::<Vec<T>>(), true, None)
        }
        Err(e) => (
            vec![T::nan(); p + 1],
            false,
            Some(format!("observed information at the stationary point is not positive definite: {e}")),
        ),
    };
    let z: Vec<T> = theta.beta.iter().zip(&se).map(|(b, s)| *b / *s).collect();
    let p_values = z.iter().map(|v| two_sided_p_value(*v)).collect();
    Ok(FitResult {
        lambda_hat: theta.lambda(),
        theta_hat: theta,
        loglik,
        info,
        se,
        z,
        p_values,
        converged,
        iterations,
        grad_norm,
        covariate_names: data.covariate_names().to_vec(),
        diagnostic,
    })
}

/// Inverse Hessian in eta from the analytic information, or a scaled
/// identity when that is not positive definite.
fn fresh_inverse<T: Real>(
    coords: &Coordinates,
    theta: &ThetaParams<T>,
    u: &[T],
    data: &LongitudinalDataset<T>,
) -> Result<SymMatrix<T>, FitError> {
    let info = observed_information(theta, data)?;
    let h = coords.hessian(theta, u, &info);
    match Cholesky::factor(&h) {
        Ok(c) => Ok(c.inverse()),
        Err(_) => {
            let scale = h.max_abs_diagonal().max(T::one());
            Ok(SymMatrix::identity(h.dim()).scaled(scale.recip()))
        }
    }
}

fn armijo<T: Real>(
    coords: &Coordinates,
    eta: &[T],
    dir: &[T],
    f: T,
    slope: T,
    data: &LongitudinalDataset<T>,
) -> Option<(Vec<T>, ThetaParams<T>, T)> {
    let mut t = T::one();
    for _ in 0..MAX_BACKTRACKS {
        let trial: Vec<T> = eta.iter().zip(dir).map(|(e, d)| *e + t * *d).collect();
        if let Some(theta) = coords.to_theta(&trial) {
            if let Some(ft) = objective(&theta, data) {
                if ft <= f + T::of(ARMIJO_C1) * t * slope && ft < f {
                    return Some((trial, theta, ft));
                }
            }
        }
        t *= T::of(BACKTRACK_SHRINK);
    }
    None
}

fn bfgs_update<T: Real>(h: &mut SymMatrix<T>, s: &[T], y: &[T]) {
    let sy = crate::numerics::dot(s, y);
    if !(sy > T::epsilon() * crate::numerics::norm2(s) * crate::numerics::norm2(y)) {
        return;
    }
    let rho = sy.recip();
    let hy = h.mul_vec(y);
    let yhy = crate::numerics::dot(y, &hy);
    let n = s.len();
    let updated = SymMatrix::from_fn(n, |i, j| {
        h.get(i, j) - rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j]
    });
    *h = updated;
}

/// Newton step on `(beta, phi)` using the analytic information. Accepted
/// when the score norm drops and the log-likelihood does not fall by more
/// than rounding.
///
/// When the full information is indefinite (typically phi drifting towards
/// the Poisson boundary, where the likelihood is still convex in phi) the
/// beta block takes a Newton step with phi fixed and `ln phi` moves by a
/// one-dimensional Newton step, or doubles/halves if that is not a descent.
#[allow(clippy::type_complexity)]
fn newton_step<T: Real>(
    theta: &ThetaParams<T>,
    u: &[T],
    f: T,
    data: &LongitudinalDataset<T>,
) -> Result<Option<(ThetaParams<T>, T, Vec<T>)>, FitError> {
    let info = observed_information(theta, data)?;
    let p = theta.beta.len();
    let current = theta.to_vec();
    let step: Vec<T> = match Cholesky::factor(&info) {
        Ok(chol) => chol.solve(u),
        Err(_) => {
            let block = SymMatrix::from_fn(p, |i, j| info.get(i, j));
            let Ok(chol) = Cholesky::factor(&block) else {
                return Ok(None);
            };
            let mut step = chol.solve(&u[..p]);
            let phi = theta.phi;
            let curvature = phi * phi * info.get(p, p) - phi * u[p];
            let dlog = if curvature > T::zero() {
                phi * u[p] / curvature
            } else {
                T::LN_2().copysign(u[p])
            };
            step.push(phi * dlog.exp() - phi);
            step
        }
    };
    let gnorm = norm_inf(u);
    let slack = T::epsilon() * T::of(64.0) * f.abs().max(T::one());
    let mut t = T::one();
    for _ in 0..30 {
        let trial: Vec<T> = current.iter().zip(&step).map(|(a, s)| *a + t * *s).collect();
        if let Ok(candidate) = ThetaParams::from_slice(&trial) {
            if let Some(fc) = objective(&candidate, data) {
                if fc <= f + slack {
                    let uc = score(&candidate, data)?;
                    if norm_inf(&uc) < gnorm {
                        return Ok(Some((candidate, fc, uc)));
                    }
                }
            }
        }
        t *= T::of(BACKTRACK_SHRINK);
    }
    Ok(None)
}

/// Refit on the data without the listed clusters, started at `warm_start`.
pub fn refit_excluding<T: Real>(
    data: &LongitudinalDataset<T>,
    exclude: &[&str],
    warm_start: &ThetaParams<T>,
    opts: &FitOptions<T>,
) -> Result<FitResult<T>, FitError> {
    let reduced = data.without(exclude)?;
    let opts = FitOptions {
        init: Some(warm_start.clone()),
        ..opts.clone()
    };
    fit(&reduced, &opts)
}
