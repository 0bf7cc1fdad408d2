//! Flat `key = value` study configuration for the `simulate` command.
//!
//! ```text
//! # correctly specified study
//! generator = poisson_glg
//! phi = 3
//! n = 100
//! m = 3
//! beta = 1.5, 1.0, 0.0
//! covariates = standard_normal, dummy_two_level
//! replications = 1000
//! confidence = 0.95
//! seed = 2024
//! track_vmr = false
//! ```
//!
//! `poisson_normal_iid` takes `sigma2`; `poisson_normal_correlated` takes
//! `sigma` as `;`-separated rows of a comma list.

use mnbr::numerics::SymMatrix;
use mnbr::simulation::{CovariateSpec, Generator, StudyConfig};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected key = value")]
    Syntax { line: usize },
    #[error("line {line}: duplicate key '{key}'")]
    Duplicate { line: usize, key: String },
    #[error("unknown key '{0}'")]
    UnknownKey(String),
    #[error("missing key '{0}'")]
    Missing(String),
    #[error("key '{key}': {reason}")]
    Value { key: String, reason: String },
}

const KEYS: [&str; 12] = [
    "generator",
    "phi",
    "sigma2",
    "sigma",
    "n",
    "m",
    "beta",
    "covariates",
    "replications",
    "confidence",
    "seed",
    "track_vmr",
];

pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
        let key = k.trim().to_string();
        if !KEYS.contains(&key.as_str()) {
            return Err(ConfigError::UnknownKey(key));
        }
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(ConfigError::Duplicate { line: i + 1, key });
        }
    }
    Ok(out)
}

fn value<T: std::str::FromStr>(pairs: &BTreeMap<String, String>, key: &str) -> Result<Option<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    pairs
        .get(key)
        .map(|v| {
            v.parse::<T>().map_err(|e| ConfigError::Value {
                key: key.into(),
                reason: e.to_string(),
            })
        })
        .transpose()
}

fn required<T: std::str::FromStr>(pairs: &BTreeMap<String, String>, key: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value(pairs, key)?.ok_or_else(|| ConfigError::Missing(key.into()))
}

fn list(raw: &str, key: &str) -> Result<Vec<f64>, ConfigError> {
    raw.split(',')
        .map(|s| {
            s.trim().parse::<f64>().map_err(|e| ConfigError::Value {
                key: key.into(),
                reason: e.to_string(),
            })
        })
        .collect()
}

fn covariate(raw: &str) -> Result<CovariateSpec, ConfigError> {
    match raw.trim() {
        "standard_normal" => Ok(CovariateSpec::StandardNormal),
        "uniform01" => Ok(CovariateSpec::Uniform01),
        "dummy_two_level" => Ok(CovariateSpec::DummyTwoLevel),
        other => Err(ConfigError::Value {
            key: "covariates".into(),
            reason: format!("unknown covariate kind '{other}'"),
        }),
    }
}

pub fn parse_study(text: &str) -> Result<StudyConfig<f64>, ConfigError> {
    let pairs = parse_pairs(text)?;
    let generator_name: String = required(&pairs, "generator")?;
    let generator = match generator_name.as_str() {
        "poisson_glg" => Generator::PoissonGlg {
            phi: required(&pairs, "phi")?,
        },
        "poisson_normal_iid" => Generator::PoissonNormalIid {
            sigma2: required(&pairs, "sigma2")?,
        },
        "poisson_normal_correlated" => {
            let raw: String = required(&pairs, "sigma")?;
            let rows = raw
                .split(';')
                .map(|r| list(r, "sigma"))
                .collect::<Result<Vec<_>, _>>()?;
            let sigma = SymMatrix::from_rows(&rows).map_err(|e| ConfigError::Value {
                key: "sigma".into(),
                reason: e.to_string(),
            })?;
            Generator::PoissonNormalCorrelated { sigma }
        }
        other => {
            return Err(ConfigError::Value {
                key: "generator".into(),
                reason: format!("unknown generator '{other}'"),
            })
        }
    };
    let beta = list(&required::<String>(&pairs, "beta")?, "beta")?;
    let covariates = match pairs.get("covariates") {
        Some(raw) if !raw.trim().is_empty() => raw.split(',').map(covariate).collect::<Result<_, _>>()?,
        _ => Vec::new(),
    };
    Ok(StudyConfig {
        generator,
        n: required(&pairs, "n")?,
        m: required(&pairs, "m")?,
        beta_true: beta,
        covariates,
        replications: required(&pairs, "replications")?,
        confidence: value(&pairs, "confidence")?.unwrap_or(0.95),
        seed: value(&pairs, "seed")?.unwrap_or(0),
        track_vmr: value(&pairs, "track_vmr")?.unwrap_or(false),
    })
}

/// Writes a study back in the same flat format.
pub fn render_study(config: &StudyConfig<f64>) -> String {
    let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ");
    let mut out = String::new();
    match &config.generator {
        Generator::PoissonGlg { phi } => out.push_str(&format!("generator = poisson_glg\nphi = {phi:?}\n")),
        Generator::PoissonNormalIid { sigma2 } => {
            out.push_str(&format!("generator = poisson_normal_iid\nsigma2 = {sigma2:?}\n"))
        }
        Generator::PoissonNormalCorrelated { sigma } => {
            let rows: Vec<String> = sigma.to_rows().iter().map(|r| join(r)).collect();
            out.push_str(&format!("generator = poisson_normal_correlated\nsigma = {}\n", rows.join("; ")));
        }
    }
    let covs: Vec<&str> = config
        .covariates
        .iter()
        .map(|c| match c {
            CovariateSpec::StandardNormal => "standard_normal",
            CovariateSpec::Uniform01 => "uniform01",
            CovariateSpec::DummyTwoLevel => "dummy_two_level",
        })
        .collect();
    out.push_str(&format!(
        "n = {}\nm = {}\nbeta = {}\ncovariates = {}\nreplications = {}\nconfidence = {:?}\nseed = {}\ntrack_vmr = {}\n",
        config.n,
        config.m,
        join(&config.beta_true),
        covs.join(", "),
        config.replications,
        config.confidence,
        config.seed,
        config.track_vmr
    ));
    out
}
