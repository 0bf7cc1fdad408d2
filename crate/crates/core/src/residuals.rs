//! Randomized quantile residuals on cluster totals, Pearson residuals for
//! the Poisson baseline, and simulated envelopes for both.

use crate::estimation::{fit, poisson_fit, FitError, FitOptions, FitResult, PoissonFit};
use crate::model::{cluster_means, LongitudinalDataset, ModelError, ThetaParams};
use crate::numerics::{log_gamma_unchecked, std_normal_quantile};
use crate::simulation::{replication_rng, simulate_mnb_counts, simulate_poisson_counts, SimulationError};
use crate::Real;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Uniform draws are kept this far from 0 and 1 before inversion.
pub const UNIFORM_CLAMP: f64 = 1e-12;
pub const MIN_ENVELOPE_REPLICATES: usize = 19;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ResidualError {
    #[error("the fit did not converge")]
    NotConverged,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualKind {
    QuantileMnb,
    PearsonPoisson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport<T> {
    /// One entry per residual; repeated per measurement for Pearson residuals.
    pub cluster_ids: Vec<String>,
    /// Measurement index within the cluster (Pearson residuals only).
    pub measurement: Option<Vec<usize>>,
    pub residuals: Vec<T>,
    pub kind: ResidualKind,
    pub seed: Option<u64>,
}

fn check_nb_args<T: Real>(mu_plus: T, phi: T) -> Result<(), ResidualError> {
    if !(mu_plus > T::zero() && mu_plus.is_finite()) {
        return Err(ResidualError::InvalidArgument(format!("mu_plus must be positive, got {mu_plus}")));
    }
    if !(phi > T::zero() && phi.is_finite()) {
        return Err(ResidualError::InvalidArgument(format!("phi must be positive, got {phi}")));
    }
    Ok(())
}

/// Negative binomial pmf of a cluster total, `q = phi / (phi + mu_plus)`.
pub fn nb_total_pmf<T: Real>(y_plus: u64, mu_plus: T, phi: T) -> Result<T, ResidualError> {
    check_nb_args(mu_plus, phi)?;
    let t = T::count(y_plus);
    let log_q = -(mu_plus / phi).ln_1p();
    let log_1mq = -(phi / mu_plus).ln_1p();
    let lp = log_gamma_unchecked(t + phi) - log_gamma_unchecked(phi) - log_gamma_unchecked(t + T::one())
        + phi * log_q
        + t * log_1mq;
    Ok(lp.exp())
}

/// Distribution function of the cluster total, summed term by term with
/// the ratio recursion `p(t+1)/p(t) = (t + phi)/(t + 1) (1 - q)` in log space.
pub fn nb_total_cdf<T: Real>(y_plus: u64, mu_plus: T, phi: T) -> Result<T, ResidualError> {
    check_nb_args(mu_plus, phi)?;
    let log_q = -(mu_plus / phi).ln_1p();
    let log_1mq = -(phi / mu_plus).ln_1p();
    let mut log_term = phi * log_q;
    // running sum stored as exp(scale) * acc
    let mut scale = log_term;
    let mut acc = T::one();
    for t in 0..y_plus {
        let tt = T::count(t);
        log_term += ((tt + phi) / (tt + T::one())).ln() + log_1mq;
        if log_term > scale {
            acc = acc * (scale - log_term).exp() + T::one();
            scale = log_term;
        } else {
            acc += (log_term - scale).exp();
        }
    }
    Ok((scale.exp() * acc).min(T::one()))
}

/// Quantile residual of one cluster given its total, fitted total mean and
/// a uniform `v` in (0, 1].
fn quantile_residual<T: Real>(y_plus: u64, mu_plus: T, phi: T, v: T) -> Result<T, ResidualError> {
    let a = if y_plus == 0 {
        T::zero()
    } else {
        nb_total_cdf(y_plus - 1, mu_plus, phi)?
    };
    let b = nb_total_cdf(y_plus, mu_plus, phi)?;
    let lo = T::of(UNIFORM_CLAMP);
    let u = (a + (b - a) * v).max(lo).min(T::one() - lo);
    std_normal_quantile(u).map_err(|e| ResidualError::InvalidArgument(e.to_string()))
}

/// Uniform on (0, 1].
fn open_closed_uniform<T: Real, R: Rng + ?Sized>(rng: &mut R) -> T {
    T::of(1.0 - rng.random::<f64>())
}

fn quantile_residuals_with<T: Real, R: Rng + ?Sized>(
    theta: &ThetaParams<T>,
    data: &LongitudinalDataset<T>,
    rng: &mut R,
) -> Result<Vec<T>, ResidualError> {
    data.clusters()
        .iter()
        .map(|c| {
            let mu_plus: T = cluster_means(&theta.beta, c)?.into_iter().sum();
            let v = open_closed_uniform(rng);
            quantile_residual(c.total(), mu_plus, theta.phi, v)
        })
        .collect()
}

/// One randomized quantile residual per cluster, built on the cluster total.
pub fn quantile_residuals<T: Real>(
    fit: &FitResult<T>,
    data: &LongitudinalDataset<T>,
    seed: u64,
) -> Result<ResidualReport<T>, ResidualError> {
    if !fit.converged {
        return Err(ResidualError::NotConverged);
    }
    quantile_residuals_at(&fit.theta_hat, data, seed)
}

/// Quantile residuals at arbitrary parameters.
pub fn quantile_residuals_at<T: Real>(
    theta: &ThetaParams<T>,
    data: &LongitudinalDataset<T>,
    seed: u64,
) -> Result<ResidualReport<T>, ResidualError> {
    let mut rng = replication_rng(seed, 0);
    Ok(ResidualReport {
        cluster_ids: data.cluster_ids(),
        measurement: None,
        residuals: quantile_residuals_with(theta, data, &mut rng)?,
        kind: ResidualKind::QuantileMnb,
        seed: Some(seed),
    })
}

fn pearson_values<T: Real>(beta: &[T], data: &LongitudinalDataset<T>) -> Result<Vec<T>, ResidualError> {
    let mut out = Vec::with_capacity(data.n_measurements());
    for c in data.clusters() {
        let mu = cluster_means(beta, c)?;
        out.extend(c.counts().iter().zip(&mu).map(|(&y, &m)| (T::count(y) - m) / m.sqrt()));
    }
    Ok(out)
}

/// `(y - mu) / sqrt(mu)` for every measurement under the Poisson fit.
pub fn pearson_residuals<T: Real>(
    baseline: &PoissonFit<T>,
    data: &LongitudinalDataset<T>,
) -> Result<ResidualReport<T>, ResidualError> {
    let mut ids = Vec::new();
    let mut index = Vec::new();
    for c in data.clusters() {
        for j in 0..c.len() {
            ids.push(c.id().to_string());
            index.push(j);
        }
    }
    Ok(ResidualReport {
        cluster_ids: ids,
        measurement: Some(index),
        residuals: pearson_values(&baseline.beta_hat, data)?,
        kind: ResidualKind::PearsonPoisson,
        seed: None,
    })
}

/// Fitted model an envelope is simulated from.
#[derive(Debug, Clone, PartialEq)]
pub enum EnvelopeModel<T> {
    Mnb(ThetaParams<T>),
    Poisson(Vec<T>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandRule<T> {
    /// Central pointwise interval with this coverage.
    Central(T),
    /// Pointwise minimum and maximum over replicates.
    MinMax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeOptions<T> {
    pub nsim: usize,
    pub band: BandRule<T>,
    pub seed: u64,
    /// Re-estimate the model on each replicate before computing residuals.
    pub refit: bool,
}

impl<T: Real> Default for EnvelopeOptions<T> {
    fn default() -> Self {
        Self {
            nsim: 100,
            band: BandRule::Central(T::of(0.95)),
            seed: 0,
            refit: true,
        }
    }
}

impl<T: Real> EnvelopeOptions<T> {
    /// Twenty-one replicates with min/max bounds.
    pub fn compat(seed: u64) -> Self {
        Self {
            nsim: 21,
            band: BandRule::MinMax,
            seed,
            refit: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeBand<T> {
    /// Position of each sorted observed residual in the original order.
    pub sorted_index: Vec<usize>,
    /// Normal scores `Phi^-1((i - 3/8) / (n + 1/4))` for plotting.
    pub theoretical: Vec<T>,
    pub lower: Vec<T>,
    pub median: Vec<T>,
    pub upper: Vec<T>,
    pub observed: Vec<T>,
    pub nsim: usize,
    pub seed: u64,
}

/// Sample quantile with linear interpolation between order statistics
/// (Hyndman–Fan type 7). `sorted` must be ascending and non-empty.
pub fn type7_quantile<T: Real>(sorted: &[T], prob: T) -> T {
    let n = sorted.len();
    let h = T::idx(n - 1) * prob;
    let lo = h.floor().to_usize().unwrap_or(0).min(n - 1);
    let hi = (lo + 1).min(n - 1);
    let frac = h - T::idx(lo);
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

fn sort_values<T: Real>(v: &mut [T]) {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
}

fn replicate_residuals<T: Real>(
    model: &EnvelopeModel<T>,
    data: &LongitudinalDataset<T>,
    opts: &EnvelopeOptions<T>,
    r: usize,
) -> Result<Vec<T>, ResidualError> {
    let mut rng = replication_rng(opts.seed, r as u64 + 1);
    let mut values = match model {
        EnvelopeModel::Mnb(theta) => {
            let counts = simulate_mnb_counts(theta, data, &mut rng)?;
            let replicate = data.with_counts(counts)?;
            let at = if opts.refit {
                let fit_opts = FitOptions {
                    init: Some(theta.clone()),
                    ..FitOptions::default()
                };
                let refit = fit(&replicate, &fit_opts)?;
                if !refit.converged {
                    return Err(ResidualError::NotConverged);
                }
                refit.theta_hat
            } else {
                theta.clone()
            };
            quantile_residuals_with(&at, &replicate, &mut rng)?
        }
        EnvelopeModel::Poisson(beta) => {
            let means = data
                .clusters()
                .iter()
                .map(|c| cluster_means(beta, c))
                .collect::<Result<Vec<_>, _>>()?;
            let replicate = data.with_counts(simulate_poisson_counts(&means, &mut rng))?;
            let at = if opts.refit {
                poisson_fit(&replicate)?.beta_hat
            } else {
                beta.clone()
            };
            pearson_values(&at, &replicate)?
        }
    };
    sort_values(&mut values);
    Ok(values)
}

/// Pointwise envelope of sorted residuals over replicates simulated from
/// the fitted model.
pub fn simulated_envelope<T: Real>(
    model: &EnvelopeModel<T>,
    data: &LongitudinalDataset<T>,
    opts: &EnvelopeOptions<T>,
) -> Result<EnvelopeBand<T>, ResidualError> {
    if opts.nsim < MIN_ENVELOPE_REPLICATES {
        return Err(ResidualError::InvalidArgument(format!(
            "nsim must be at least {MIN_ENVELOPE_REPLICATES}, got {}",
            opts.nsim
        )));
    }
    let (lo_p, hi_p) = match opts.band {
        BandRule::Central(b) if b > T::zero() && b < T::one() => {
            let tail = (T::one() - b) * T::of(0.5);
            (tail, T::one() - tail)
        }
        BandRule::Central(b) => {
            return Err(ResidualError::InvalidArgument(format!("band must lie in (0, 1), got {b}")))
        }
        BandRule::MinMax => (T::zero(), T::one()),
    };
    let observed_raw = match model {
        EnvelopeModel::Mnb(theta) => quantile_residuals_at(theta, data, opts.seed)?.residuals,
        EnvelopeModel::Poisson(beta) => pearson_values(beta, data)?,
    };
    let replicates = (0..opts.nsim)
        .into_par_iter()
        .map(|r| replicate_residuals(model, data, opts, r))
        .collect::<Result<Vec<_>, _>>()?;

    let len = observed_raw.len();
    let mut sorted_index: Vec<usize> = (0..len).collect();
    sorted_index.sort_by(|&a, &b| {
        observed_raw[a]
            .partial_cmp(&observed_raw[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let observed: Vec<T> = sorted_index.iter().map(|&i| observed_raw[i]).collect();
    let (mut lower, mut median, mut upper) = (Vec::new(), Vec::new(), Vec::new());
    let mut column = vec![T::zero(); opts.nsim];
    for i in 0..len {
        for (slot, rep) in column.iter_mut().zip(&replicates) {
            *slot = rep[i];
        }
        sort_values(&mut column);
        lower.push(type7_quantile(&column, lo_p));
        median.push(type7_quantile(&column, T::of(0.5)));
        upper.push(type7_quantile(&column, hi_p));
    }
    let n = T::idx(len);
    let theoretical = (1..=len)
        .map(|i| {
            let p = (T::idx(i) - T::of(0.375)) / (n + T::of(0.25));
            std_normal_quantile(p).unwrap_or(T::zero())
        })
        .collect();
    Ok(EnvelopeBand {
        sorted_index,
        theoretical,
        lower,
        median,
        upper,
        observed,
        nsim: opts.nsim,
        seed: opts.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cdf_at_zero_is_q_to_the_phi() {
        let v: f64 = nb_total_cdf(0, 2.0, 2.0).unwrap();
        assert!((v - 0.25).abs() < 1e-15);
    }

    #[test]
    fn cdf_reaches_one() {
        let v: f64 = nb_total_cdf(500, 3.0, 1.5).unwrap();
        assert!((v - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn zero_total_uses_left_limit_zero() {
        let f0: f64 = nb_total_cdf(0, 2.0, 1.0).unwrap();
        for v in [1e-9, 0.3, 1.0] {
            let r = quantile_residual(0, 2.0, 1.0, v).unwrap();
            let u = (f0 * v).max(UNIFORM_CLAMP);
            assert!((r - std_normal_quantile(u).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn type7_matches_hand_values() {
        let s = [1.0_f64, 2.0, 3.0, 4.0];
        assert_eq!(type7_quantile(&s, 0.0), 1.0);
        assert_eq!(type7_quantile(&s, 1.0), 4.0);
        assert!((type7_quantile(&s, 0.5) - 2.5).abs() < 1e-15);
        assert!((type7_quantile(&s, 0.25) - 1.75).abs() < 1e-15);
    }

    #[test]
    fn invalid_arguments() {
        assert!(nb_total_cdf(3, 0.0_f64, 1.0).is_err());
        assert!(nb_total_cdf(3, 1.0_f64, -1.0).is_err());
    }
}
