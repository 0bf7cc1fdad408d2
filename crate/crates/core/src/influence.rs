//! Case-deletion and local influence diagnostics.
//!
//! Local influence follows the usual recipe: for a perturbed log-likelihood
//! `l(theta | omega)` with a null point `omega0`, the matrix
//! `Delta = d^2 l / d theta d omega'` at `(theta_hat, omega0)` together with
//! the observed information gives the normal curvature in any direction.

use crate::estimation::{refit_excluding, FitError, FitOptions, FitResult};
use crate::model::{
    cluster_means, log_likelihood, observed_information, rising_digamma_diff, rising_trigamma_diff, Cluster,
    ClusterTerms, DispersionScoreForm, LongitudinalDataset, ModelError, ThetaParams,
};
use crate::numerics::{log_gamma_unchecked, max_eigpair, norm2, Cholesky, NumericsError, SymMatrix};
use crate::Real;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Components of the fitted parameters smaller than this have no PRD.
pub const PRD_ZERO_GUARD: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InfluenceError {
    #[error("the fit did not converge")]
    NotConverged,
    #[error("need at least {needed} clusters, found {found}")]
    InsufficientClusters { needed: usize, found: usize },
    #[error("scheme not applicable: {0}")]
    SchemeInapplicable(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("fits are not of the same model: {0}")]
    ModelMismatch(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fit(#[from] FitError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    CaseWeightSubject,
    CaseWeightMeasurement,
    Explanatory,
    Dispersion,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 4] = [
        SchemeKind::CaseWeightSubject,
        SchemeKind::CaseWeightMeasurement,
        SchemeKind::Explanatory,
        SchemeKind::Dispersion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::CaseWeightSubject => "case_weight_subject",
            SchemeKind::CaseWeightMeasurement => "case_weight_measurement",
            SchemeKind::Explanatory => "explanatory",
            SchemeKind::Dispersion => "dispersion",
        }
    }

    pub fn is_measurement_level(self) -> bool {
        self == SchemeKind::CaseWeightMeasurement
    }
}

impl std::fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SchemeKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SchemeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown scheme '{s}'"))
    }
}

/// A perturbation scheme with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Scheme<T> {
    CaseWeightSubject,
    CaseWeightMeasurement,
    /// `x*_ijk = x_ijk + omega_i * scale`; `scale` defaults to the sample
    /// standard deviation of covariate `covariate`.
    Explanatory { covariate: usize, scale: Option<T> },
    /// `phi*_i = omega_i * phi`.
    Dispersion,
}

impl<T: Real> Scheme<T> {
    pub fn kind(&self) -> SchemeKind {
        match self {
            Scheme::CaseWeightSubject => SchemeKind::CaseWeightSubject,
            Scheme::CaseWeightMeasurement => SchemeKind::CaseWeightMeasurement,
            Scheme::Explanatory { .. } => SchemeKind::Explanatory,
            Scheme::Dispersion => SchemeKind::Dispersion,
        }
    }

    /// Length of the perturbation vector.
    pub fn width(&self, data: &LongitudinalDataset<T>) -> usize {
        if self.kind().is_measurement_level() {
            data.n_measurements()
        } else {
            data.n_clusters()
        }
    }

    /// The point at which the perturbed model is the original one.
    pub fn null_point(&self, data: &LongitudinalDataset<T>) -> Vec<T> {
        let fill = match self {
            Scheme::Explanatory { .. } => T::zero(),
            _ => T::one(),
        };
        vec![fill; self.width(data)]
    }
}

/// `d^2 l(theta | omega) / d theta d omega'` at the fit and the null point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaMatrix<T> {
    pub scheme: SchemeKind,
    /// `entries[r][v]`, rows in parameter order `beta_1..beta_p, phi`.
    pub entries: Vec<Vec<T>>,
    /// Cluster id, or `id:j` (1-based measurement) for measurement-level schemes.
    pub labels: Vec<String>,
    pub covariate: Option<usize>,
    pub scale: Option<T>,
}

impl<T: Real> DeltaMatrix<T> {
    pub fn rows(&self) -> usize {
        self.entries.len()
    }

    pub fn cols(&self) -> usize {
        self.labels.len()
    }

    pub fn column(&self, v: usize) -> Vec<T> {
        self.entries.iter().map(|r| r[v]).collect()
    }

    /// Reorders columns; `order[new] = old`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|r| order.iter().map(|&o| r[o]).collect())
                .collect(),
            labels: order.iter().map(|&o| self.labels[o].clone()).collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalInfluenceReport<T> {
    pub scheme: SchemeKind,
    pub labels: Vec<String>,
    pub c_dmax: T,
    /// Unit eigenvector, largest-magnitude component positive.
    pub d_max: Vec<T>,
    /// Total local curvature per column.
    pub c_i: Vec<T>,
    /// `mean(C_i) + 2 sd(C_i)`.
    pub benchmark: T,
}

impl<T: Real> LocalInfluenceReport<T> {
    /// Indices with `C_i` above the benchmark, largest first.
    pub fn flagged(&self) -> Vec<usize> {
        flag_above(&self.c_i, self.benchmark)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalInfluenceReport<T> {
    pub cluster_ids: Vec<String>,
    /// Generalized Cook distance; `None` where the deletion refit failed.
    pub gd: Vec<Option<T>>,
    /// Likelihood displacement.
    pub ld: Vec<Option<T>>,
    pub theta_deleted: Vec<Option<ThetaParams<T>>>,
    /// Failure message per cluster when the refit failed.
    pub failures: Vec<Option<String>>,
    /// `mean(GD) + 2 sd(GD)` over the available entries.
    pub benchmark: T,
}

impl<T: Real> GlobalInfluenceReport<T> {
    pub fn flagged(&self) -> Vec<usize> {
        let gd: Vec<T> = self.gd.iter().map(|g| g.unwrap_or(T::neg_infinity())).collect();
        flag_above(&gd, self.benchmark)
    }

    /// Cluster indices ordered by decreasing GD, missing entries last.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.gd.len()).collect();
        idx.sort_by(|&a, &b| {
            let ga = self.gd[a].unwrap_or(T::neg_infinity());
            let gb = self.gd[b].unwrap_or(T::neg_infinity());
            gb.partial_cmp(&ga).unwrap_or(std::cmp::Ordering::Equal)
        });
        idx
    }
}

fn flag_above<T: Real>(values: &[T], threshold: T) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).filter(|&i| values[i] > threshold).collect();
    idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap_or(std::cmp::Ordering::Equal));
    idx
}

/// Mean plus two sample standard deviations.
pub fn benchmark<T: Real>(values: &[T]) -> T {
    let n = values.len();
    if n == 0 {
        return T::zero();
    }
    let mean = values.iter().copied().sum::<T>() / T::idx(n);
    if n == 1 {
        return mean;
    }
    let var = values.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / T::idx(n - 1);
    mean + T::of(2.0) * var.sqrt()
}

fn require_converged<T: Real>(fit: &FitResult<T>) -> Result<(), InfluenceError> {
    if fit.converged {
        Ok(())
    } else {
        Err(InfluenceError::NotConverged)
    }
}

/// Sample standard deviation of covariate `k` over all measurements.
pub fn covariate_sd<T: Real>(data: &LongitudinalDataset<T>, k: usize) -> T {
    let values: Vec<T> = data
        .clusters()
        .iter()
        .flat_map(|c| (0..c.len()).map(move |j| c.design_row(j)[k]))
        .collect();
    let n = T::idx(values.len());
    let mean = values.iter().copied().sum::<T>() / n;
    (values.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / (n - T::one())).sqrt()
}

/// Checks that covariate `k` is a continuous column and returns the scale.
fn explanatory_scale<T: Real>(
    data: &LongitudinalDataset<T>,
    covariate: usize,
    scale: Option<T>,
) -> Result<T, InfluenceError> {
    let p = data.n_covariates();
    if covariate >= p {
        return Err(InfluenceError::InvalidArgument(format!(
            "covariate index {covariate} out of range for {p} columns"
        )));
    }
    let name = &data.covariate_names()[covariate];
    let mut distinct: Vec<T> = Vec::new();
    for c in data.clusters() {
        for j in 0..c.len() {
            let v = c.design_row(j)[covariate];
            if !distinct.contains(&v) {
                distinct.push(v);
                if distinct.len() > 2 {
                    break;
                }
            }
        }
        if distinct.len() > 2 {
            break;
        }
    }
    if distinct.len() <= 2 {
        return Err(InfluenceError::SchemeInapplicable(format!(
            "column '{name}' takes {} distinct value(s); the explanatory scheme needs a continuous covariate",
            distinct.len()
        )));
    }
    let s = scale.unwrap_or_else(|| covariate_sd(data, covariate));
    if !(s > T::zero() && s.is_finite()) {
        return Err(InfluenceError::InvalidArgument(format!("scale must be positive, got {s}")));
    }
    Ok(s)
}

fn check_omega<T: Real>(scheme: &Scheme<T>, data: &LongitudinalDataset<T>, omega: &[T]) -> Result<(), InfluenceError> {
    let v = scheme.width(data);
    if omega.len() != v {
        return Err(InfluenceError::InvalidArgument(format!(
            "perturbation vector has length {}, scheme needs {v}",
            omega.len()
        )));
    }
    if omega.iter().any(|w| !w.is_finite()) {
        return Err(InfluenceError::InvalidArgument("perturbation vector must be finite".into()));
    }
    if scheme.kind() == SchemeKind::Dispersion && omega.iter().any(|&w| w <= T::zero()) {
        return Err(InfluenceError::InvalidArgument("dispersion weights must be positive".into()));
    }
    Ok(())
}

fn log_factorials<T: Real>(c: &Cluster<T>) -> Vec<T> {
    c.counts()
        .iter()
        .map(|&y| log_gamma_unchecked(T::count(y) + T::one()))
        .collect()
}

/// Log-likelihood of the perturbed model, written out term by term.
pub fn perturbed_log_likelihood<T: Real>(
    theta: &ThetaParams<T>,
    data: &LongitudinalDataset<T>,
    scheme: &Scheme<T>,
    omega: &[T],
) -> Result<T, InfluenceError> {
    theta.validate()?;
    if theta.beta.len() != data.n_covariates() {
        return Err(InfluenceError::InvalidArgument(format!(
            "theta has {} coefficients, data has {} covariates",
            theta.beta.len(),
            data.n_covariates()
        )));
    }
    check_omega(scheme, data, omega)?;
    let phi = theta.phi;
    let mut total = T::zero();
    let mut offset = 0;
    for (i, c) in data.clusters().iter().enumerate() {
        let yp = T::count(c.total());
        let lf = log_factorials(c);
        match *scheme {
            Scheme::CaseWeightSubject | Scheme::Dispersion | Scheme::Explanatory { .. } => {
                let (phi_i, mu) = match *scheme {
                    Scheme::Dispersion => (omega[i] * phi, cluster_means(&theta.beta, c)?),
                    Scheme::Explanatory { covariate, scale } => {
                        let s = scale.unwrap_or_else(|| covariate_sd(data, covariate));
                        (phi, cluster_means(&theta.beta, &c.with_shifted_covariate(covariate, omega[i] * s))?)
                    }
                    _ => (phi, cluster_means(&theta.beta, c)?),
                };
                let mu_plus: T = mu.iter().copied().sum();
                let mut li = log_gamma_unchecked(phi_i + yp) - log_gamma_unchecked(phi_i) + phi_i * phi_i.ln()
                    - phi_i * (phi_i + mu_plus).ln();
                for (j, (&y, &m)) in c.counts().iter().zip(&mu).enumerate() {
                    let y = T::count(y);
                    li += -lf[j] + y * m.ln() - y * (phi_i + mu_plus).ln();
                }
                let w = if let Scheme::CaseWeightSubject = scheme { omega[i] } else { T::one() };
                total += w * li;
            }
            Scheme::CaseWeightMeasurement => {
                let mu = cluster_means(&theta.beta, c)?;
                let mu_plus: T = mu.iter().copied().sum();
                let inv_m = T::one() / T::idx(c.len());
                let shared = log_gamma_unchecked(phi + yp) - log_gamma_unchecked(phi) + phi * phi.ln()
                    - phi * (phi + mu_plus).ln();
                for (j, (&y, &m)) in c.counts().iter().zip(&mu).enumerate() {
                    let y = T::count(y);
                    let term = inv_m * shared - lf[j] + y * m.ln() - y * (phi + mu_plus).ln();
                    total += omega[offset + j] * term;
                }
            }
        }
        offset += c.len();
    }
    Ok(total)
}

fn labels_for<T: Real>(scheme: SchemeKind, data: &LongitudinalDataset<T>) -> Vec<String> {
    if scheme.is_measurement_level() {
        data.clusters()
            .iter()
            .flat_map(|c| (1..=c.len()).map(move |j| format!("{}:{j}", c.id())))
            .collect()
    } else {
        data.cluster_ids()
    }
}

/// Closed-form `Delta` at the fitted parameters.
pub fn delta_matrix<T: Real>(
    fit: &FitResult<T>,
    data: &LongitudinalDataset<T>,
    scheme: &Scheme<T>,
) -> Result<DeltaMatrix<T>, InfluenceError> {
    require_converged(fit)?;
    delta_matrix_at(&fit.theta_hat, data, scheme)
}

/// `Delta` at arbitrary parameters (the null point of `omega` is implied).
pub fn delta_matrix_at<T: Real>(
    theta: &ThetaParams<T>,
    data: &LongitudinalDataset<T>,
    scheme: &Scheme<T>,
) -> Result<DeltaMatrix<T>, InfluenceError> {
    theta.validate()?;
    let p = data.n_covariates();
    if theta.beta.len() != p {
        return Err(InfluenceError::InvalidArgument(format!(
            "theta has {} coefficients, data has {p} covariates",
            theta.beta.len()
        )));
    }
    let kind = scheme.kind();
    let (covariate, scale) = match *scheme {
        Scheme::Explanatory { covariate, scale } => (Some(covariate), Some(explanatory_scale(data, covariate, scale)?)),
        _ => (None, None),
    };
    let phi = theta.phi;
    let form = DispersionScoreForm::Auto;
    let mut columns: Vec<Vec<T>> = Vec::with_capacity(scheme.width(data));
    for c in data.clusters() {
        let terms = ClusterTerms::compute(&theta.beta, c)?;
        let yp = T::count(terms.y_plus);
        let mu_plus = terms.mu_plus;
        let denom = phi + mu_plus;
        let s = &terms.weighted_design;
        let digamma_diff = rising_digamma_diff(phi, terms.y_plus, form);
        match kind {
            SchemeKind::CaseWeightSubject => {
                let a = (phi + yp) / denom;
                let mut col = vec![T::zero(); p + 1];
                for (j, (&y, &m)) in c.counts().iter().zip(&terms.mu).enumerate() {
                    let r = T::count(y) - a * m;
                    for (o, &x) in col.iter_mut().zip(c.design_row(j)) {
                        *o += r * x;
                    }
                }
                col[p] = digamma_diff + (phi / denom).ln() + (mu_plus - yp) / denom;
                columns.push(col);
            }
            SchemeKind::CaseWeightMeasurement => {
                let inv_m = T::one() / T::idx(c.len());
                let phi_part = inv_m * digamma_diff + inv_m * (T::one() + phi.ln() - denom.ln());
                for (j, &y) in c.counts().iter().enumerate() {
                    let y = T::count(y);
                    let w = (phi * inv_m + y) / denom;
                    let mut col: Vec<T> = c.design_row(j).iter().zip(s).map(|(&x, &sk)| y * x - w * sk).collect();
                    col.push(phi_part - w);
                    columns.push(col);
                }
            }
            SchemeKind::Explanatory => {
                let k = covariate.unwrap_or(0);
                let sx = scale.unwrap_or(T::one());
                let bk = theta.beta[k];
                let d2 = denom * denom;
                let mut col: Vec<T> = s.iter().map(|&st| -sx * phi * bk * st * (phi + yp) / d2).collect();
                col[k] += sx * phi * (yp - mu_plus) / denom;
                col.push(bk * sx * mu_plus * (yp - mu_plus) / d2);
                columns.push(col);
            }
            SchemeKind::Dispersion => {
                let d2 = denom * denom;
                let mut col: Vec<T> = s.iter().map(|&sk| phi * sk * (yp - mu_plus) / d2).collect();
                let u_phi = digamma_diff - (mu_plus / phi).ln_1p() + (mu_plus - yp) / denom;
                let second = -rising_trigamma_diff(phi, terms.y_plus) + mu_plus / (phi * denom) - (mu_plus - yp) / d2;
                col.push(u_phi + phi * second);
                columns.push(col);
            }
        }
    }
    let entries = (0..=p).map(|r| columns.iter().map(|col| col[r]).collect()).collect();
    Ok(DeltaMatrix {
        scheme: kind,
        entries,
        labels: labels_for(kind, data),
        covariate,
        scale,
    })
}

/// `Z = L^-1 Delta` with `L L' = info`, stored by column.
fn whitened_columns<T: Real>(delta: &DeltaMatrix<T>, info: &SymMatrix<T>) -> Result<Vec<Vec<T>>, InfluenceError> {
    if info.dim() != delta.rows() {
        return Err(InfluenceError::InvalidArgument(format!(
            "information is {0}x{0}, Delta has {1} rows",
            info.dim(),
            delta.rows()
        )));
    }
    let chol = Cholesky::factor(info)?;
    Ok((0..delta.cols()).map(|v| chol.forward_solve(&delta.column(v))).collect())
}

/// Normal curvature `C_d = 2 d' Delta' info^-1 Delta d` in direction `d`.
pub fn normal_curvature<T: Real>(delta: &DeltaMatrix<T>, info: &SymMatrix<T>, d: &[T]) -> Result<T, InfluenceError> {
    if d.len() != delta.cols() {
        return Err(InfluenceError::InvalidArgument(format!(
            "direction has length {}, Delta has {} columns",
            d.len(),
            delta.cols()
        )));
    }
    let rows: Vec<T> = delta.entries.iter().map(|r| r.iter().zip(d).map(|(&a, &b)| a * b).sum()).collect();
    let chol = Cholesky::factor(info)?;
    let z = chol.forward_solve(&rows);
    Ok(T::of(2.0) * z.iter().map(|&x| x * x).sum::<T>())
}

/// Maximum curvature, its direction and the total local curvatures.
pub fn curvature<T: Real>(delta: &DeltaMatrix<T>, info: &SymMatrix<T>) -> Result<LocalInfluenceReport<T>, InfluenceError> {
    let z = whitened_columns(delta, info)?;
    let q = delta.rows();
    let v = delta.cols();
    let two = T::of(2.0);
    let c_i: Vec<T> = z.iter().map(|col| two * col.iter().map(|&x| x * x).sum::<T>()).collect();
    // the nonzero spectrum of Z'Z (v x v) is that of Z Z' (q x q)
    let small = SymMatrix::from_fn(q, |a, b| z.iter().map(|col| col[a] * col[b]).sum());
    let top = max_eigpair(&small)?;
    let mut d: Vec<T> = z.iter().map(|col| col.iter().zip(&top.vector).map(|(&a, &b)| a * b).sum()).collect();
    let norm = norm2(&d);
    if norm > T::zero() {
        d.iter_mut().for_each(|x| *x /= norm);
    } else {
        d = vec![T::zero(); v];
        if v > 0 {
            d[0] = T::one();
        }
    }
    let lead = d
        .iter()
        .copied()
        .fold(T::zero(), |best, x| if x.abs() > best.abs() { x } else { best });
    if lead < T::zero() {
        d.iter_mut().for_each(|x| *x = -*x);
    }
    Ok(LocalInfluenceReport {
        scheme: delta.scheme,
        labels: delta.labels.clone(),
        c_dmax: two * top.value,
        d_max: d,
        benchmark: benchmark(&c_i),
        c_i,
    })
}

/// `Delta` plus curvature at a converged fit.
pub fn local_influence<T: Real>(
    fit: &FitResult<T>,
    data: &LongitudinalDataset<T>,
    scheme: &Scheme<T>,
) -> Result<LocalInfluenceReport<T>, InfluenceError> {
    let delta = delta_matrix(fit, data, scheme)?;
    curvature(&delta, &fit.info)
}

/// Generalized Cook distance and likelihood displacement for deleting each
/// cluster in turn. Refits run in parallel, warm-started at the full fit.
pub fn global_influence<T: Real>(
    fit: &FitResult<T>,
    data: &LongitudinalDataset<T>,
) -> Result<GlobalInfluenceReport<T>, InfluenceError> {
    global_influence_with(fit, data, &FitOptions::default())
}

pub fn global_influence_with<T: Real>(
    fit: &FitResult<T>,
    data: &LongitudinalDataset<T>,
    opts: &FitOptions<T>,
) -> Result<GlobalInfluenceReport<T>, InfluenceError> {
    require_converged(fit)?;
    let n = data.n_clusters();
    let needed = data.n_covariates() + 2;
    if n < needed {
        return Err(InfluenceError::InsufficientClusters { needed, found: n });
    }
    // information and log-likelihood on the full data at theta_hat
    let info = observed_information(&fit.theta_hat, data)?;
    let ll_full = log_likelihood(&fit.theta_hat, data)?;
    let full = fit.theta_hat.to_vec();
    let ids = data.cluster_ids();
    let outcomes: Vec<Result<(T, T, ThetaParams<T>), String>> = ids
        .par_iter()
        .map(|id| {
            let refit = refit_excluding(data, &[id.as_str()], &fit.theta_hat, opts).map_err(|e| e.to_string())?;
            if !refit.converged {
                return Err(refit.diagnostic.unwrap_or_else(|| "refit did not converge".into()));
            }
            let diff: Vec<T> = refit.theta_hat.to_vec().iter().zip(&full).map(|(&a, &b)| a - b).collect();
            let gd = info.quad_form(&diff);
            let ll = log_likelihood(&refit.theta_hat, data).map_err(|e| e.to_string())?;
            let mut ld = T::of(2.0) * (ll_full - ll);
            // theta_hat maximizes the full likelihood; anything below zero is rounding
            let floor = T::epsilon() * T::of(64.0) * ll_full.abs().max(T::one());
            if ld < T::zero() && ld > -floor {
                ld = T::zero();
            }
            Ok((gd, ld, refit.theta_hat))
        })
        .collect();
    let mut report = GlobalInfluenceReport {
        cluster_ids: ids,
        gd: Vec::with_capacity(n),
        ld: Vec::with_capacity(n),
        theta_deleted: Vec::with_capacity(n),
        failures: Vec::with_capacity(n),
        benchmark: T::zero(),
    };
    for outcome in outcomes {
        match outcome {
            Ok((gd, ld, theta)) => {
                report.gd.push(Some(gd));
                report.ld.push(Some(ld));
                report.theta_deleted.push(Some(theta));
                report.failures.push(None);
            }
            Err(msg) => {
                report.gd.push(None);
                report.ld.push(None);
                report.theta_deleted.push(None);
                report.failures.push(Some(msg));
            }
        }
    }
    let available: Vec<T> = report.gd.iter().flatten().copied().collect();
    report.benchmark = benchmark(&available);
    Ok(report)
}

/// Percentage relative deviation `100 (theta_hat - theta_star) / theta_hat`
/// in the order `phi, beta_1, .., beta_p`; `None` where the full-data
/// estimate is numerically zero.
pub fn prd<T: Real>(full: &FitResult<T>, reduced: &FitResult<T>) -> Result<Vec<Option<T>>, InfluenceError> {
    if full.covariate_names != reduced.covariate_names {
        return Err(InfluenceError::ModelMismatch(format!(
            "covariates {:?} vs {:?}",
            full.covariate_names, reduced.covariate_names
        )));
    }
    if full.theta_hat.dim() != reduced.theta_hat.dim() {
        return Err(InfluenceError::ModelMismatch("parameter dimensions differ".into()));
    }
    let order = |t: &ThetaParams<T>| {
        let mut v = vec![t.phi];
        v.extend(t.beta.iter().copied());
        v
    };
    let a = order(&full.theta_hat);
    let b = order(&reduced.theta_hat);
    Ok(a.iter()
        .zip(&b)
        .map(|(&x, &y)| {
            if x.abs() < T::of(PRD_ZERO_GUARD) {
                None
            } else {
                Some((x - y) / x * T::of(100.0))
            }
        })
        .collect())
}

/// Names matching [`prd`] output order.
pub fn prd_names(covariate_names: &[String]) -> Vec<String> {
    let mut v = vec!["phi".to_string()];
    v.extend(covariate_names.iter().cloned());
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn benchmark_of_constant_is_the_constant() {
        assert_eq!(benchmark(&[2.0_f64, 2.0, 2.0]), 2.0);
        assert_eq!(benchmark::<f64>(&[]), 0.0);
    }

    #[test]
    fn single_column_curvature() {
        let info = SymMatrix::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]).unwrap();
        let c = [1.0_f64, -2.0];
        let delta = DeltaMatrix {
            scheme: SchemeKind::CaseWeightSubject,
            entries: vec![vec![0.0, c[0], 0.0], vec![0.0, c[1], 0.0]],
            labels: vec!["a".into(), "b".into(), "c".into()],
            covariate: None,
            scale: None,
        };
        let r = curvature(&delta, &info).unwrap();
        let want = 2.0 * crate::numerics::cholesky_solve(&info, &c)
            .unwrap()
            .iter()
            .zip(&c)
            .map(|(a, b)| a * b)
            .sum::<f64>();
        assert!((r.c_dmax - want).abs() < 1e-12 * want);
        assert!((r.d_max[1] - 1.0).abs() < 1e-12);
        assert!(r.d_max[0].abs() < 1e-12 && r.d_max[2].abs() < 1e-12);
        assert!((r.c_i[1] - want).abs() < 1e-12 * want);
    }

    #[test]
    fn scheme_names_round_trip() {
        for k in SchemeKind::ALL {
            assert_eq!(k.name().parse::<SchemeKind>().unwrap(), k);
        }
        assert!("bogus".parse::<SchemeKind>().is_err());
    }
}
