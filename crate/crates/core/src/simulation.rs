//! Count generators and the Monte Carlo engine for bias, RMSE and
//! coverage studies.
//!
//! Every replication draws from its own ChaCha stream keyed by
//! `(seed, replication)`, so results do not depend on scheduling.

use crate::estimation::{fit, FitOptions};
use crate::model::{cluster_means, Cluster, LongitudinalDataset, ModelError, ThetaParams};
use crate::numerics::{std_normal_quantile, Cholesky, NumericsError, SymMatrix};
use crate::Real;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest Poisson mean the sampler accepts.
const MAX_POISSON_MEAN: f64 = 1e18;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimulationError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("random-effect covariance is not positive definite: {0}")]
    NotPositiveDefinite(NumericsError),
    #[error("all {requested} replications failed to converge")]
    AllReplicationsFailed { requested: usize },
    #[error("all counts are zero; the variance-to-mean ratio is undefined")]
    ZeroMean,
    #[error("at least two measurements are needed, got {0}")]
    TooFewMeasurements(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// The RNG stream for replication `r` of a study seeded with `seed`.
pub fn replication_rng(seed: u64, r: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(r);
    rng
}

fn poisson_draw<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> u64 {
    if !(lambda > 0.0) {
        return 0;
    }
    let lambda = lambda.min(MAX_POISSON_MEAN);
    Poisson::new(lambda).map(|d| d.sample(rng) as u64).unwrap_or(0)
}

/// One cluster from the multivariate negative binomial model: a mean-one
/// gamma frailty `g ~ Gamma(phi, rate phi)` shared by independent
/// `Poisson(mu_j g)` counts.
pub fn gen_mnb_cluster<T: Real, R: Rng + ?Sized>(
    mu: &[T],
    phi: T,
    rng: &mut R,
) -> Result<Vec<u64>, SimulationError> {
    let phi = phi.to_f64_lossy();
    if !(phi > 0.0 && phi.is_finite()) {
        return Err(SimulationError::InvalidConfig(format!("phi must be positive, got {phi}")));
    }
    let mu: Vec<f64> = mu.iter().map(|m| m.to_f64_lossy()).collect();
    if mu.iter().any(|m| !(*m > 0.0 && m.is_finite())) {
        return Err(SimulationError::InvalidConfig("means must be positive and finite".into()));
    }
    let g = Gamma::new(phi, 1.0 / phi)
        .map_err(|e| SimulationError::InvalidConfig(e.to_string()))?
        .sample(rng);
    Ok(mu.iter().map(|m| poisson_draw(m * g, rng)).collect())
}

/// Normal random intercept for the misspecification studies.
#[derive(Debug, Clone)]
pub enum RandomEffect<T> {
    /// One `b ~ N(0, sigma2)` shared by all measurements in a cluster.
    Iid { sigma2: T },
    /// `b ~ N_m(0, Sigma)`, one component per measurement (unit loading).
    Correlated { factor: Cholesky<T> },
}

impl<T: Real> RandomEffect<T> {
    pub fn iid(sigma2: T) -> Result<Self, SimulationError> {
        if !(sigma2 > T::zero() && sigma2.is_finite()) {
            return Err(SimulationError::InvalidConfig(format!("sigma2 must be positive, got {sigma2}")));
        }
        Ok(Self::Iid { sigma2 })
    }

    pub fn correlated(sigma: &SymMatrix<T>) -> Result<Self, SimulationError> {
        let factor = Cholesky::factor(sigma).map_err(SimulationError::NotPositiveDefinite)?;
        Ok(Self::Correlated { factor })
    }
}

/// One cluster from the Poisson model with a normal random intercept.
pub fn gen_poisson_normal_cluster<T: Real, R: Rng + ?Sized>(
    mu: &[T],
    effect: &RandomEffect<T>,
    rng: &mut R,
) -> Result<Vec<u64>, SimulationError> {
    let m = mu.len();
    let b: Vec<f64> = match effect {
        RandomEffect::Iid { sigma2 } => {
            let sd = sigma2.to_f64_lossy().sqrt();
            let b = Normal::new(0.0, sd)
                .map_err(|e| SimulationError::InvalidConfig(e.to_string()))?
                .sample(rng);
            vec![b; m]
        }
        RandomEffect::Correlated { factor } => {
            if factor.dim() != m {
                return Err(SimulationError::InvalidConfig(format!(
                    "covariance is {0}x{0} but the cluster has {m} measurements",
                    factor.dim()
                )));
            }
            let z: Vec<T> = (0..m).map(|_| T::of(rng.sample(StandardNormal))).collect();
            factor.lower_mul(&z).into_iter().map(|v| v.to_f64_lossy()).collect()
        }
    };
    Ok(mu
        .iter()
        .zip(&b)
        .map(|(m, b)| poisson_draw(m.to_f64_lossy() * b.exp(), rng))
        .collect())
}

/// New counts for every cluster of `data`, drawn from the fitted model.
pub fn simulate_mnb_counts<T: Real, R: Rng + ?Sized>(
    theta: &ThetaParams<T>,
    data: &LongitudinalDataset<T>,
    rng: &mut R,
) -> Result<Vec<Vec<u64>>, SimulationError> {
    data.clusters()
        .iter()
        .map(|c| {
            let mu = cluster_means(&theta.beta, c)?;
            gen_mnb_cluster(&mu, theta.phi, rng)
        })
        .collect()
}

/// Independent Poisson counts with the given means.
pub fn simulate_poisson_counts<T: Real, R: Rng + ?Sized>(means: &[Vec<T>], rng: &mut R) -> Vec<Vec<u64>> {
    means
        .iter()
        .map(|mu| mu.iter().map(|m| poisson_draw(m.to_f64_lossy(), rng)).collect())
        .collect()
}

/// Pooled variance-to-mean ratio of all counts (sample variance with an
/// `N - 1` denominator).
pub fn vmr<T: Real>(data: &LongitudinalDataset<T>) -> Result<T, SimulationError> {
    let counts: Vec<T> = data.all_counts().map(T::count).collect();
    let n = counts.len();
    if n < 2 {
        return Err(SimulationError::TooFewMeasurements(n));
    }
    let mean = counts.iter().copied().sum::<T>() / T::idx(n);
    if mean == T::zero() {
        return Err(SimulationError::ZeroMean);
    }
    let ss: T = counts.iter().map(|y| (*y - mean) * (*y - mean)).sum();
    Ok(ss / T::idx(n - 1) / mean)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Generator<T> {
    PoissonGlg { phi: T },
    PoissonNormalIid { sigma2: T },
    /// Random-effect covariance across the `m` measurements.
    PoissonNormalCorrelated { sigma: SymMatrix<T> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateSpec {
    /// `N(0, 1)`, drawn per measurement.
    StandardNormal,
    /// `U(0, 1)`, drawn per measurement.
    Uniform01,
    /// Cluster-level 0/1 indicator: the first half of the clusters get 0.
    DummyTwoLevel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig<T> {
    pub generator: Generator<T>,
    pub n: usize,
    pub m: usize,
    /// Intercept first, then one coefficient per covariate.
    pub beta_true: Vec<T>,
    pub covariates: Vec<CovariateSpec>,
    pub replications: usize,
    pub confidence: T,
    pub seed: u64,
    pub track_vmr: bool,
}

impl<T: Real> StudyConfig<T> {
    /// Design of the correctly specified study: `m = 3`, `x1 ~ N(0,1)`,
    /// `x2` a balanced dummy, `beta = (1.5, 1.0, 0.0)`.
    pub fn mnb_design(n: usize, phi: T, replications: usize, seed: u64) -> Self {
        Self {
            generator: Generator::PoissonGlg { phi },
            n,
            m: 3,
            beta_true: vec![T::of(1.5), T::one(), T::zero()],
            covariates: vec![CovariateSpec::StandardNormal, CovariateSpec::DummyTwoLevel],
            replications,
            confidence: T::of(0.95),
            seed,
            track_vmr: false,
        }
    }

    /// Misspecified study with a shared normal intercept: `m = 3`,
    /// `x1 ~ U(0,1)`, `beta = (1.5, 1.0)`.
    pub fn normal_intercept_design(n: usize, sigma2: T, replications: usize, seed: u64) -> Self {
        Self {
            generator: Generator::PoissonNormalIid { sigma2 },
            n,
            m: 3,
            beta_true: vec![T::of(1.5), T::one()],
            covariates: vec![CovariateSpec::Uniform01],
            replications,
            confidence: T::of(0.95),
            seed,
            track_vmr: false,
        }
    }

    /// Misspecified study with correlated normal effects: diagonal
    /// `sigma2`, off-diagonals -0.5, -0.1, -1.0.
    pub fn correlated_design(n: usize, sigma2: T, replications: usize, seed: u64) -> Self {
        let off = [[T::zero(), T::of(-0.5), T::of(-0.1)], [T::of(-0.5), T::zero(), T::of(-1.0)], [
            T::of(-0.1),
            T::of(-1.0),
            T::zero(),
        ]];
        let sigma = SymMatrix::from_fn(3, |i, j| if i == j { sigma2 } else { off[i][j] });
        Self {
            generator: Generator::PoissonNormalCorrelated { sigma },
            ..Self::normal_intercept_design(n, sigma2, replications, seed)
        }
    }

    /// Dispersion implied by the generator, used as the target for phi.
    pub fn phi_reference(&self) -> T {
        match &self.generator {
            Generator::PoissonGlg { phi } => *phi,
            Generator::PoissonNormalIid { sigma2 } => sigma2.recip(),
            Generator::PoissonNormalCorrelated { sigma } => sigma.get(0, 0).recip(),
        }
    }

    pub fn parameter_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.beta_true.len()).map(|k| format!("beta{k}")).collect();
        names.push("phi".into());
        names
    }

    pub fn validate(&self) -> Result<(), SimulationError> {
        let bad = |s: &str| Err(SimulationError::InvalidConfig(s.into()));
        if self.replications < 1 {
            return bad("at least one replication is required");
        }
        if self.n < 2 {
            return bad("at least two clusters are required");
        }
        if self.m < 1 {
            return bad("clusters need at least one measurement");
        }
        if self.beta_true.len() != self.covariates.len() + 1 {
            return bad("beta_true needs an intercept plus one entry per covariate");
        }
        if !(self.confidence > T::zero() && self.confidence < T::one()) {
            return bad("confidence must lie in (0, 1)");
        }
        match &self.generator {
            Generator::PoissonGlg { phi } if !(*phi > T::zero()) => bad("phi must be positive"),
            Generator::PoissonNormalIid { sigma2 } if !(*sigma2 > T::zero()) => bad("sigma2 must be positive"),
            Generator::PoissonNormalCorrelated { sigma } if sigma.dim() != self.m => {
                bad("sigma must be m x m")
            }
            _ => Ok(()),
        }
    }
}

/// Replication `r` of a study. A pure function of `(config, r)`.
pub fn simulate_dataset<T: Real>(
    config: &StudyConfig<T>,
    r: u64,
) -> Result<LongitudinalDataset<T>, SimulationError> {
    config.validate()?;
    let effect = match &config.generator {
        Generator::PoissonGlg { .. } => None,
        Generator::PoissonNormalIid { sigma2 } => Some(RandomEffect::iid(*sigma2)?),
        Generator::PoissonNormalCorrelated { sigma } => Some(RandomEffect::correlated(sigma)?),
    };
    let mut rng = replication_rng(config.seed, r);
    let mut clusters = Vec::with_capacity(config.n);
    for i in 0..config.n {
        let rows: Vec<Vec<T>> = (0..config.m)
            .map(|_| {
                let mut row = vec![T::one()];
                for spec in &config.covariates {
                    row.push(match spec {
                        CovariateSpec::StandardNormal => T::of(rng.sample(StandardNormal)),
                        CovariateSpec::Uniform01 => T::of(rng.random::<f64>()),
                        CovariateSpec::DummyTwoLevel => {
                            if i < config.n / 2 {
                                T::zero()
                            } else {
                                T::one()
                            }
                        }
                    });
                }
                row
            })
            .collect();
        let offset = vec![T::zero(); config.m];
        let cluster = Cluster::new(format!("{}", i + 1), vec![0; config.m], rows, offset)?;
        let mu = cluster_means(&config.beta_true, &cluster)?;
        let y = match (&config.generator, &effect) {
            (Generator::PoissonGlg { phi }, _) => gen_mnb_cluster(&mu, *phi, &mut rng)?,
            (_, Some(effect)) => gen_poisson_normal_cluster(&mu, effect, &mut rng)?,
            (_, None) => unreachable!("normal generators always build an effect"),
        };
        clusters.push(cluster.with_counts(y)?);
    }
    let mut names = vec!["(Intercept)".to_string()];
    names.extend((1..=config.covariates.len()).map(|k| format!("x{k}")));
    Ok(LongitudinalDataset::new(clusters, names)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary<T> {
    pub parameters: Vec<String>,
    pub truth: Vec<T>,
    pub mean_estimate: Vec<T>,
    pub bias: Vec<T>,
    pub rmse: Vec<T>,
    /// Percent of Wald intervals containing the true value.
    pub coverage: Vec<T>,
    pub vmr_range: Option<(T, T)>,
    pub r_requested: usize,
    pub r_effective: usize,
}

struct Replicate<T> {
    estimate: Vec<T>,
    covered: Vec<bool>,
    vmr: Option<T>,
}

fn run_replication<T: Real>(config: &StudyConfig<T>, r: u64, z: T, truth: &[T]) -> Option<Replicate<T>> {
    let data = simulate_dataset(config, r).ok()?;
    let vmr = if config.track_vmr { vmr(&data).ok() } else { None };
    let result = fit(&data, &FitOptions::default()).ok()?;
    if !result.converged {
        return None;
    }
    let estimate = result.theta_hat.to_vec();
    let covered = estimate
        .iter()
        .zip(&result.se)
        .zip(truth)
        .map(|((e, s), t)| (*e - *t).abs() <= z * *s)
        .collect();
    Some(Replicate { estimate, covered, vmr })
}

/// Fits the model to `R` simulated datasets and aggregates bias, RMSE and
/// Wald coverage. Non-converged replications are dropped.
pub fn monte_carlo<T: Real>(config: &StudyConfig<T>) -> Result<SimulationSummary<T>, SimulationError> {
    config.validate()?;
    let mut truth = config.beta_true.clone();
    truth.push(config.phi_reference());
    let alpha = (T::one() - config.confidence) * T::of(0.5);
    let z = std_normal_quantile(T::one() - alpha).map_err(|e| SimulationError::InvalidConfig(e.to_string()))?;
    // check the generator once so configuration errors are not mistaken for
    // failed replications
    simulate_dataset(config, 0)?;
    let reps: Vec<Option<Replicate<T>>> = (0..config.replications as u64)
        .into_par_iter()
        .map(|r| run_replication(config, r, z, &truth))
        .collect();
    let ok: Vec<&Replicate<T>> = reps.iter().flatten().collect();
    if ok.is_empty() {
        return Err(SimulationError::AllReplicationsFailed {
            requested: config.replications,
        });
    }
    let k = T::idx(ok.len());
    let dim = truth.len();
    let mut mean_estimate = vec![T::zero(); dim];
    let mut sq = vec![T::zero(); dim];
    let mut hits = vec![0usize; dim];
    for rep in &ok {
        for d in 0..dim {
            mean_estimate[d] += rep.estimate[d];
            let e = rep.estimate[d] - truth[d];
            sq[d] += e * e;
            hits[d] += rep.covered[d] as usize;
        }
    }
    mean_estimate.iter_mut().for_each(|m| *m /= k);
    let bias = mean_estimate.iter().zip(&truth).map(|(m, t)| *m - *t).collect();
    let rmse = sq.iter().map(|s| (*s / k).sqrt()).collect();
    let coverage = hits.iter().map(|h| T::idx(*h) * T::of(100.0) / k).collect();
    let vmr_range = if config.track_vmr {
        let values: Vec<T> = reps.iter().flatten().filter_map(|r| r.vmr).collect();
        values.iter().copied().fold(None, |acc: Option<(T, T)>, v| {
            Some(acc.map_or((v, v), |(lo, hi)| (lo.min(v), hi.max(v))))
        })
    } else {
        None
    };
    Ok(SimulationSummary {
        parameters: config.parameter_names(),
        truth,
        mean_estimate,
        bias,
        rmse,
        coverage,
        vmr_range,
        r_requested: config.replications,
        r_effective: ok.len(),
    })
}
