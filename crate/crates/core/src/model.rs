//! Clustered count data and the multivariate negative binomial likelihood.
//!
//! A cluster `i` with counts `y_i1..y_im` and means `mu_ij = exp(x_ij'beta +
//! offset_ij)` has joint probability
//!
//! ```text
//! f(y_i) = Gamma(phi + y_i+) phi^phi / (prod_j y_ij! Gamma(phi))
//!          * prod_j mu_ij^y_ij / (phi + mu_i+)^(phi + y_i+)
//! ```
//!
//! All gamma ratios are evaluated as log-gamma differences.

use crate::numerics::{
    digamma_unchecked, log_gamma_unchecked, trigamma_unchecked, NumericsError, SymMatrix,
};
use crate::Real;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use thiserror::Error;

/// Linear predictor values above this are reported instead of overflowing.
pub const LINEAR_PREDICTOR_LIMIT: f64 = 700.0;

/// Largest cluster total for which the dispersion score uses the finite sum
/// `sum_{j < y} 1/(j + phi)` rather than a digamma difference.
pub const FINITE_SUM_MAX_TOTAL: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid argument: {0}")]
    Domain(String),
    #[error("mean overflow in cluster {cluster} measurement {measurement}: linear predictor {eta}")]
    NonFiniteMean {
        cluster: String,
        measurement: usize,
        eta: f64,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// One subject: its counts, design rows and offsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster<T> {
    id: String,
    y: Vec<u64>,
    /// Row-major `m x p` design.
    x: Vec<T>,
    p: usize,
    offset: Vec<T>,
}

impl<T: Real> Cluster<T> {
    pub fn new(
        id: impl Into<String>,
        y: Vec<u64>,
        rows: Vec<Vec<T>>,
        offset: Vec<T>,
    ) -> Result<Self, ModelError> {
        let id = id.into();
        if y.is_empty() {
            return Err(ModelError::InvalidData(format!("cluster {id} has no measurements")));
        }
        if rows.len() != y.len() || offset.len() != y.len() {
            return Err(ModelError::DimensionMismatch(format!(
                "cluster {id}: {} counts, {} design rows, {} offsets",
                y.len(),
                rows.len(),
                offset.len()
            )));
        }
        let p = rows[0].len();
        if p == 0 {
            return Err(ModelError::InvalidData(format!("cluster {id} has an empty design")));
        }
        if rows.iter().any(|r| r.len() != p) {
            return Err(ModelError::DimensionMismatch(format!(
                "cluster {id}: ragged design rows"
            )));
        }
        let x: Vec<T> = rows.into_iter().flatten().collect();
        if x.iter().chain(offset.iter()).any(|v| !v.is_finite()) {
            return Err(ModelError::InvalidData(format!(
                "cluster {id} has non-finite design or offset entries"
            )));
        }
        Ok(Self { id, y, x, p, offset })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn counts(&self) -> &[u64] {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_covariates(&self) -> usize {
        self.p
    }

    pub fn design_row(&self, j: usize) -> &[T] {
        &self.x[j * self.p..(j + 1) * self.p]
    }

    pub fn offset(&self) -> &[T] {
        &self.offset
    }

    /// `y_i+`.
    pub fn total(&self) -> u64 {
        self.y.iter().sum()
    }

    /// Copy of this cluster with different counts (same design and offset).
    pub fn with_counts(&self, y: Vec<u64>) -> Result<Self, ModelError> {
        if y.len() != self.y.len() {
            return Err(ModelError::DimensionMismatch(format!(
                "cluster {}: expected {} counts, got {}",
                self.id,
                self.y.len(),
                y.len()
            )));
        }
        Ok(Self { y, ..self.clone() })
    }

    /// Copy with `delta[j]` added to design column `k` of row `j`.
    pub fn with_shifted_covariate(&self, k: usize, shift: T) -> Self {
        let mut out = self.clone();
        for j in 0..out.len() {
            out.x[j * out.p + k] += shift;
        }
        out
    }

    /// Copy with `shift` added to every offset.
    pub fn with_shifted_offset(&self, shift: T) -> Self {
        let mut out = self.clone();
        out.offset.iter_mut().for_each(|o| *o += shift);
        out
    }
}

/// Ordered collection of clusters sharing one design width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongitudinalDataset<T> {
    clusters: Vec<Cluster<T>>,
    covariate_names: Vec<String>,
}

impl<T: Real> LongitudinalDataset<T> {
    pub fn new(clusters: Vec<Cluster<T>>, covariate_names: Vec<String>) -> Result<Self, ModelError> {
        if clusters.is_empty() {
            return Err(ModelError::InvalidData("dataset has no clusters".into()));
        }
        let p = covariate_names.len();
        if let Some(bad) = clusters.iter().find(|c| c.n_covariates() != p) {
            return Err(ModelError::DimensionMismatch(format!(
                "cluster {} has {} covariates, expected {p}",
                bad.id(),
                bad.n_covariates()
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = covariate_names.iter().find(|n| !seen.insert(n.as_str())) {
            return Err(ModelError::InvalidData(format!("duplicate covariate name {dup}")));
        }
        Ok(Self {
            clusters,
            covariate_names,
        })
    }

    pub fn clusters(&self) -> &[Cluster<T>] {
        &self.clusters
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn n_measurements(&self) -> usize {
        self.clusters.iter().map(Cluster::len).sum()
    }

    pub fn cluster_ids(&self) -> Vec<String> {
        self.clusters.iter().map(|c| c.id().to_string()).collect()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.clusters.iter().position(|c| c.id() == id)
    }

    /// The dataset without the listed cluster ids; unknown ids are ignored.
    pub fn without(&self, exclude: &[&str]) -> Result<Self, ModelError> {
        let kept = self
            .clusters
            .iter()
            .filter(|c| !exclude.contains(&c.id()))
            .cloned()
            .collect();
        Self::new(kept, self.covariate_names.clone())
    }

    /// Same design and offsets, new counts.
    pub fn with_counts(&self, counts: Vec<Vec<u64>>) -> Result<Self, ModelError> {
        if counts.len() != self.clusters.len() {
            return Err(ModelError::DimensionMismatch(format!(
                "expected counts for {} clusters, got {}",
                self.clusters.len(),
                counts.len()
            )));
        }
        let clusters = self
            .clusters
            .iter()
            .zip(counts)
            .map(|(c, y)| c.with_counts(y))
            .collect::<Result<_, _>>()?;
        Self::new(clusters, self.covariate_names.clone())
    }

    pub fn map_clusters(&self, f: impl FnMut(&Cluster<T>) -> Cluster<T>) -> Result<Self, ModelError> {
        Self::new(self.clusters.iter().map(f).collect(), self.covariate_names.clone())
    }

    /// All counts in cluster order.
    pub fn all_counts(&self) -> impl Iterator<Item = u64> + '_ {
        self.clusters.iter().flat_map(|c| c.counts().iter().copied())
    }
}

/// Regression coefficients and dispersion `phi > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaParams<T> {
    pub beta: Vec<T>,
    pub phi: T,
}

impl<T: Real> ThetaParams<T> {
    pub fn new(beta: Vec<T>, phi: T) -> Result<Self, ModelError> {
        let theta = Self { beta, phi };
        theta.validate()?;
        Ok(theta)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.phi > T::zero() && self.phi.is_finite()) {
            return Err(ModelError::Domain(format!("phi must be positive and finite, got {}", self.phi)));
        }
        if self.beta.iter().any(|b| !b.is_finite()) {
            return Err(ModelError::Domain("beta has non-finite entries".into()));
        }
        Ok(())
    }

    /// GLG shape `lambda = phi^(-1/2)`.
    pub fn lambda(&self) -> T {
        self.phi.sqrt().recip()
    }

    /// Parameters stacked in the order `(beta_1, .., beta_p, phi)`.
    pub fn to_vec(&self) -> Vec<T> {
        let mut v = self.beta.clone();
        v.push(self.phi);
        v
    }

    pub fn from_slice(v: &[T]) -> Result<Self, ModelError> {
        let (phi, beta) = v
            .split_last()
            .ok_or_else(|| ModelError::Domain("empty parameter vector".into()))?;
        Self::new(beta.to_vec(), *phi)
    }

    pub fn dim(&self) -> usize {
        self.beta.len() + 1
    }
}

/// Marginal mean, covariance and correlation of one cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentSummary<T> {
    pub mean: Vec<T>,
    pub cov: SymMatrix<T>,
    pub corr: SymMatrix<T>,
}

fn check_theta<T: Real>(theta: &ThetaParams<T>, p: usize) -> Result<(), ModelError> {
    theta.validate()?;
    if theta.beta.len() != p {
        return Err(ModelError::DimensionMismatch(format!(
            "beta has length {}, design has {p} columns",
            theta.beta.len()
        )));
    }
    Ok(())
}

/// Cluster means `mu_ij = exp(x_ij'beta + offset_ij)`.
pub fn linear_predictor<T: Real>(
    theta: &ThetaParams<T>,
    cluster: &Cluster<T>,
) -> Result<Vec<T>, ModelError> {
    check_theta(theta, cluster.n_covariates())?;
    cluster_means(&theta.beta, cluster)
}

pub(crate) fn cluster_means<T: Real>(beta: &[T], cluster: &Cluster<T>) -> Result<Vec<T>, ModelError> {
    (0..cluster.len())
        .map(|j| {
            let eta = crate::numerics::dot(cluster.design_row(j), beta) + cluster.offset()[j];
            let mu = eta.exp();
            if !(eta <= T::of(LINEAR_PREDICTOR_LIMIT)) || !mu.is_finite() || !(mu > T::zero()) {
                return Err(ModelError::NonFiniteMean {
                    cluster: cluster.id().to_string(),
                    measurement: j,
                    eta: eta.to_f64_lossy(),
                });
            }
            Ok(mu)
        })
        .collect()
}

fn ln_factorial<T: Real>(y: u64) -> T {
    if y < 2 {
        T::zero()
    } else {
        log_gamma_unchecked(T::count(y) + T::one())
    }
}

/// Log probability of one cluster's count vector.
pub fn mnb_log_pmf<T: Real>(y: &[u64], mu: &[T], phi: T) -> Result<T, ModelError> {
    if y.len() != mu.len() || y.is_empty() {
        return Err(ModelError::DimensionMismatch(format!(
            "{} counts but {} means",
            y.len(),
            mu.len()
        )));
    }
    if !(phi > T::zero() && phi.is_finite()) {
        return Err(ModelError::Domain(format!("phi must be positive, got {phi}")));
    }
    if mu.iter().any(|m| !(*m > T::zero() && m.is_finite())) {
        return Err(ModelError::Domain("means must be positive and finite".into()));
    }
    Ok(log_pmf_unchecked(y, mu, phi))
}

fn log_pmf_unchecked<T: Real>(y: &[u64], mu: &[T], phi: T) -> T {
    let y_plus: u64 = y.iter().sum();
    let mu_plus: T = mu.iter().copied().sum();
    let yp = T::count(y_plus);
    let mut value = phi * phi.ln() - (phi + yp) * (phi + mu_plus).ln();
    if y_plus > 0 {
        value += log_gamma_unchecked(phi + yp) - log_gamma_unchecked(phi);
    }
    for (&yj, &mj) in y.iter().zip(mu) {
        if yj > 0 {
            value += T::count(yj) * mj.ln() - ln_factorial::<T>(yj);
        }
    }
    value
}

/// Contribution of a single cluster to the log-likelihood.
pub fn cluster_log_likelihood<T: Real>(
    theta: &ThetaParams<T>,
    cluster: &Cluster<T>,
) -> Result<T, ModelError> {
    let mu = linear_predictor(theta, cluster)?;
    Ok(log_pmf_unchecked(cluster.counts(), &mu, theta.phi))
}

/// Log-likelihood summed over clusters.
pub fn log_likelihood<T: Real>(
    theta: &ThetaParams<T>,
    data: &LongitudinalDataset<T>,
) -> Result<T, ModelError> {
    check_theta(theta, data.n_covariates())?;
    let mut total = T::zero();
    for cluster in data.clusters() {
        let mu = cluster_means(&theta.beta, cluster)?;
        total += log_pmf_unchecked(cluster.counts(), &mu, theta.phi);
    }
    Ok(total)
}

/// How the dispersion component of the score is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DispersionScoreForm {
    /// Finite sum up to `FINITE_SUM_MAX_TOTAL`, digamma difference beyond.
    Auto,
    FiniteSum,
    Digamma,
}

/// `sum_{j=0}^{y-1} 1/(j + phi)` = `psi(phi + y) - psi(phi)`.
pub(crate) fn rising_digamma_diff<T: Real>(phi: T, y: u64, form: DispersionScoreForm) -> T {
    let use_sum = match form {
        DispersionScoreForm::FiniteSum => true,
        DispersionScoreForm::Digamma => false,
        DispersionScoreForm::Auto => y <= FINITE_SUM_MAX_TOTAL,
    };
    if use_sum {
        (0..y).map(|j| (T::count(j) + phi).recip()).sum()
    } else {
        digamma_unchecked(phi + T::count(y)) - digamma_unchecked(phi)
    }
}

/// `sum_{j=0}^{y-1} 1/(j + phi)^2` = `psi'(phi) - psi'(phi + y)`.
pub(crate) fn rising_trigamma_diff<T: Real>(phi: T, y: u64) -> T {
    if y <= FINITE_SUM_MAX_TOTAL {
        (0..y)
            .map(|j| {
                let t = T::count(j) + phi;
                (t * t).recip()
            })
            .sum()
    } else {
        trigamma_unchecked(phi) - trigamma_unchecked(phi + T::count(y))
    }
}

/// Per-cluster quantities shared by score, information and influence code.
#[derive(Debug, Clone)]
pub(crate) struct ClusterTerms<T> {
    pub mu: Vec<T>,
    pub mu_plus: T,
    pub y_plus: u64,
    /// `sum_j mu_ij x_ij`
    pub weighted_design: Vec<T>,
}

impl<T: Real> ClusterTerms<T> {
    pub fn compute(beta: &[T], cluster: &Cluster<T>) -> Result<Self, ModelError> {
        let mu = cluster_means(beta, cluster)?;
        let p = cluster.n_covariates();
        let mut weighted_design = vec![T::zero(); p];
        for (j, &m) in mu.iter().enumerate() {
            for (acc, &x) in weighted_design.iter_mut().zip(cluster.design_row(j)) {
                *acc += m * x;
            }
        }
        Ok(Self {
            mu_plus: mu.iter().copied().sum(),
            y_plus: cluster.total(),
            mu,
            weighted_design,
        })
    }
}

/// Score contribution of one cluster, `(d l_i / d beta, d l_i / d phi)`.
pub(crate) fn cluster_score_terms<T: Real>(
    phi: T,
    cluster: &Cluster<T>,
    terms: &ClusterTerms<T>,
    form: DispersionScoreForm,
) -> Vec<T> {
    let p = cluster.n_covariates();
    let yp = T::count(terms.y_plus);
    let denom = phi + terms.mu_plus;
    let a = (phi + yp) / denom;
    let mut out = vec![T::zero(); p + 1];
    for (j, (&yj, &mj)) in cluster.counts().iter().zip(&terms.mu).enumerate() {
        let resid = T::count(yj) - a * mj;
        for (o, &x) in out.iter_mut().zip(cluster.design_row(j)) {
            *o += resid * x;
        }
    }
    out[p] = rising_digamma_diff(phi, terms.y_plus, form) - (terms.mu_plus / phi).ln_1p()
        + (terms.mu_plus - yp) / denom;
    out
}

/// Score contribution of a single cluster.
pub fn cluster_score<T: Real>(
    theta: &ThetaParams<T>,
    cluster: &Cluster<T>,
) -> Result<Vec<T>, ModelError> {
    check_theta(theta, cluster.n_covariates())?;
    let terms = ClusterTerms::compute(&theta.beta, cluster)?;
    Ok(cluster_score_terms(theta.phi, cluster, &terms, DispersionScoreForm::Auto))
}

/// Analytic score `(U_beta', U_phi)'`.
pub fn score<T: Real>(
    theta: &ThetaParams<T>,
    data: &LongitudinalDataset<T>,
) -> Result<Vec<T>, ModelError> {
    score_with_form(theta, data, DispersionScoreForm::Auto)
}

/// Score with an explicit choice of dispersion-score evaluation.
pub fn score_with_form<T: Real>(
    theta: &ThetaParams<T>,
    data: &LongitudinalDataset<T>,
    form: DispersionScoreForm,
) -> Result<Vec<T>, ModelError> {
    check_theta(theta, data.n_covariates())?;
    let mut total = vec![T::zero(); theta.dim()];
    for cluster in data.clusters() {
        let terms = ClusterTerms::compute(&theta.beta, cluster)?;
        let s = cluster_score_terms(theta.phi, cluster, &terms, form);
        total.iter_mut().zip(s).for_each(|(t, v)| *t += v);
    }
    Ok(total)
}

/// Observed information `-d^2 l / d theta d theta'` in `(beta, phi)` order.
pub fn observed_information<T: Real>(
    theta: &ThetaParams<T>,
    data: &LongitudinalDataset<T>,
) -> Result<SymMatrix<T>, ModelError> {
    check_theta(theta, data.n_covariates())?;
    let p = data.n_covariates();
    let phi = theta.phi;
    let mut info = SymMatrix::zeros(p + 1);
    for cluster in data.clusters() {
        let terms = ClusterTerms::compute(&theta.beta, cluster)?;
        let yp = T::count(terms.y_plus);
        let denom = phi + terms.mu_plus;
        let denom2 = denom * denom;
        let a = (phi + yp) / denom;
        let b = (phi + yp) / denom2;
        // beta-beta: a sum_j mu x x' - b (sum mu x)(sum mu x)'
        for (j, &mj) in terms.mu.iter().enumerate() {
            let row = cluster.design_row(j);
            for r in 0..p {
                let w = a * mj * row[r];
                for c in r..p {
                    info.add_to(r, c, w * row[c]);
                }
            }
        }
        let s = &terms.weighted_design;
        for r in 0..p {
            for c in r..p {
                info.add_to(r, c, -b * s[r] * s[c]);
            }
        }
        // beta-phi: sum mu x (mu+ - y+)/(phi + mu+)^2
        let cross = (terms.mu_plus - yp) / denom2;
        for r in 0..p {
            info.add_to(r, p, s[r] * cross);
        }
        // phi-phi: -(d/dphi) U_phi
        let d_phi = -rising_trigamma_diff(phi, terms.y_plus) + terms.mu_plus / (phi * denom)
            - (terms.mu_plus - yp) / denom2;
        info.add_to(p, p, -d_phi);
    }
    Ok(info)
}

/// Mean, covariance and correlation implied for one cluster.
pub fn marginal_moments<T: Real>(
    theta: &ThetaParams<T>,
    cluster: &Cluster<T>,
) -> Result<MomentSummary<T>, ModelError> {
    let mean = linear_predictor(theta, cluster)?;
    let phi = theta.phi;
    let m = mean.len();
    let cov = SymMatrix::from_fn(m, |i, j| {
        let c = mean[i] * mean[j] / phi;
        if i == j {
            mean[i] + c
        } else {
            c
        }
    });
    let corr = SymMatrix::from_fn(m, |i, j| {
        if i == j {
            T::one()
        } else {
            (mean[i] * mean[j]).sqrt() / ((phi + mean[i]).sqrt() * (phi + mean[j]).sqrt())
        }
    });
    Ok(MomentSummary { mean, cov, corr })
}
