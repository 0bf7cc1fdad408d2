use crate::config::parse_study;
use crate::error::CliError;
use crate::ingest::{ingest_csv, sha256_hex, ModelFormulaLite};
use crate::manifest::RunManifest;
use clap::{Args, Parser, Subcommand, ValueEnum};
use mnbr::estimation::{fit, poisson_fit, refit_excluding, FitOptions, FitResult, PoissonFit, WaldRow};
use mnbr::influence::{curvature, delta_matrix, global_influence_with, prd, prd_names, Scheme, SchemeKind};
use mnbr::model::{LongitudinalDataset, ThetaParams};
use mnbr::residuals::{
    pearson_residuals, quantile_residuals, simulated_envelope, BandRule, EnvelopeModel, EnvelopeOptions,
};
use mnbr::simulation::{monte_carlo, StudyConfig};
use serde::Serialize;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(name = "mnbr", version, about = "Multivariate negative binomial regression for clustered counts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Maximum likelihood fit with a Wald table.
    Fit(FitArgs),
    /// Randomized quantile residuals (or Pearson residuals of the Poisson fit).
    Residuals(ResidualArgs),
    /// Simulated envelope for the residual normal plot.
    Envelope(EnvelopeArgs),
    /// Case-deletion and local influence.
    Influence(InfluenceArgs),
    /// Monte Carlo study from a key = value config file.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    /// CSV file with a header row.
    #[arg(long)]
    pub data: PathBuf,
    /// Cluster id column.
    #[arg(long)]
    pub id: String,
    /// Count column.
    #[arg(long)]
    pub response: String,
    /// Comma list of terms; `a:b` for an interaction, `factor(c)` for a categorical.
    #[arg(long, default_value = "")]
    pub terms: String,
    /// `none`, `log:<col>` or `<col>`.
    #[arg(long, default_value = "none")]
    pub offset: String,
    #[arg(long)]
    pub no_intercept: bool,
    /// Starting values `beta_1,..,beta_p,phi`.
    #[arg(long)]
    pub init: Option<String>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RunArgs {
    /// Output directory.
    #[arg(long, default_value = ".")]
    #[serde(skip)]
    pub out: PathBuf,
    /// Worker threads (default: available parallelism).
    #[arg(long)]
    #[serde(skip)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FitArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    /// Comma list of cluster ids to delete; adds PRD output.
    #[arg(long)]
    pub drop: Option<String>,
    #[command(flatten)]
    #[serde(skip)]
    pub run: RunArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelChoice {
    Mnb,
    Poisson,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ResidualArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "mnb")]
    pub model: ModelChoice,
    #[command(flatten)]
    #[serde(skip)]
    pub run: RunArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EnvelopeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub nsim: usize,
    /// Pointwise coverage of the band.
    #[arg(long, default_value_t = 0.95)]
    pub band: f64,
    /// 21 replicates with min/max bounds.
    #[arg(long)]
    pub compat: bool,
    #[arg(long, value_enum, default_value = "mnb")]
    pub model: ModelChoice,
    #[command(flatten)]
    #[serde(skip)]
    pub run: RunArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeChoice {
    Weight,
    WeightObs,
    Explanatory,
    Dispersion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Subject,
    Measurement,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct InfluenceArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value = "weight")]
    pub scheme: SchemeChoice,
    /// With `--scheme weight`, `measurement` is the same as `weight-obs`.
    #[arg(long, value_enum)]
    pub level: Option<Level>,
    /// Design column perturbed by the explanatory scheme.
    #[arg(long)]
    pub covariate: Option<String>,
    /// Scale of the explanatory perturbation (default: the column's sd).
    #[arg(long)]
    pub scale_sx: Option<f64>,
    #[arg(long)]
    pub drop: Option<String>,
    #[command(flatten)]
    #[serde(skip)]
    pub run: RunArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(skip)]
    pub run: RunArgs,
}

impl Command {
    fn run_args(&self) -> &RunArgs {
        match self {
            Command::Fit(a) => &a.run,
            Command::Residuals(a) => &a.run,
            Command::Envelope(a) => &a.run,
            Command::Influence(a) => &a.run,
            Command::Simulate(a) => &a.run,
        }
    }
}

/// Runs one command; the thread pool is scoped to the call.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let threads = cli.command.run_args().threads;
    if threads == Some(0) {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| CliError::Io(e.to_string()))?;
    pool.install(|| match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Residuals(a) => cmd_residuals(a),
        Command::Envelope(a) => cmd_envelope(a),
        Command::Influence(a) => cmd_influence(a),
        Command::Simulate(a) => cmd_simulate(a),
    })
}

fn options_of<T: Serialize>(args: &T) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    if let Ok(serde_json::Value::Object(map)) = serde_json::to_value(args) {
        for (k, v) in map {
            let s = match v {
                serde_json::Value::Null => continue,
                serde_json::Value::String(s) => s,
                other => other.to_string(),
            };
            out.insert(k, s);
        }
    }
    out
}

struct Loaded {
    data: LongitudinalDataset<f64>,
    digest: String,
}

fn load(args: &DataArgs) -> Result<Loaded, CliError> {
    let bytes = fs::read(&args.data).map_err(|e| CliError::Data(format!("{}: {e}", args.data.display())))?;
    let formula = ModelFormulaLite::parse(&args.response, &args.terms, &args.offset, !args.no_intercept)?;
    let data = ingest_csv(&args.data, &args.id, &formula)?;
    Ok(Loaded {
        data,
        digest: sha256_hex(&bytes),
    })
}

fn fit_options(args: &DataArgs, p: usize) -> Result<FitOptions<f64>, CliError> {
    let mut opts = FitOptions::default();
    if let Some(raw) = &args.init {
        let v = raw
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::Usage(format!("--init: {e}")))?;
        if v.len() != p + 1 {
            return Err(CliError::Usage(format!(
                "--init needs {} values (coefficients then phi), got {}",
                p + 1,
                v.len()
            )));
        }
        opts.init = Some(ThetaParams::from_slice(&v).map_err(|e| CliError::Usage(format!("--init: {e}")))?);
    }
    Ok(opts)
}

fn split_ids(raw: &str, data: &LongitudinalDataset<f64>) -> Result<Vec<String>, CliError> {
    let ids: Vec<String> = raw.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    if ids.is_empty() {
        return Err(CliError::Usage("--drop needs at least one cluster id".into()));
    }
    for id in &ids {
        if data.position(id).is_none() {
            return Err(CliError::Data(format!("--drop: no cluster with id '{id}'")));
        }
    }
    Ok(ids)
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

struct Outputs<'a> {
    dir: &'a Path,
    written: Vec<String>,
}

impl<'a> Outputs<'a> {
    fn new(dir: &'a Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir, written: Vec::new() })
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(self.dir.join(name), text)?;
        self.written.push(name.to_string());
        Ok(())
    }

    fn csv(&mut self, name: &str, header: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
        let mut w = csv::Writer::from_path(self.dir.join(name))?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
        self.written.push(name.to_string());
        Ok(())
    }

    fn finish(mut self, mut manifest: RunManifest) -> Result<(), CliError> {
        manifest.outputs = std::mem::take(&mut self.written);
        self.json("manifest.json", &manifest)
    }
}

fn header(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Serialize)]
struct PoissonSummary {
    loglik: f64,
    pearson: f64,
    df: usize,
    pearson_over_df: f64,
}

#[derive(Debug, Serialize)]
struct PrdRow {
    parameter: String,
    full: f64,
    reduced: f64,
    prd: Option<f64>,
}

#[derive(Debug, Serialize)]
struct Deletion {
    dropped: Vec<String>,
    converged: bool,
    loglik: f64,
    coefficients: Vec<WaldRow<f64>>,
    prd: Vec<PrdRow>,
}

#[derive(Debug, Serialize)]
struct FitReport {
    converged: bool,
    diagnostic: Option<String>,
    iterations: usize,
    grad_norm: f64,
    loglik: f64,
    n_clusters: usize,
    n_measurements: usize,
    coefficients: Vec<WaldRow<f64>>,
    phi: f64,
    lambda: f64,
    poisson: Option<PoissonSummary>,
    deletion: Option<Deletion>,
}

fn poisson_summary(base: &PoissonFit<f64>, data: &LongitudinalDataset<f64>) -> PoissonSummary {
    let (pearson, df) = base.pearson(data);
    PoissonSummary {
        loglik: base.loglik,
        pearson,
        df,
        pearson_over_df: pearson / df.max(1) as f64,
    }
}

fn deletion(
    data: &LongitudinalDataset<f64>,
    full: &FitResult<f64>,
    ids: &[String],
    opts: &FitOptions<f64>,
) -> Result<(Deletion, FitResult<f64>), CliError> {
    let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
    let reduced = refit_excluding(data, &refs, &full.theta_hat, opts)?;
    let values = prd(full, &reduced)?;
    let names = prd_names(&full.covariate_names);
    let order = |t: &ThetaParams<f64>| {
        let mut v = vec![t.phi];
        v.extend(&t.beta);
        v
    };
    let (a, b) = (order(&full.theta_hat), order(&reduced.theta_hat));
    let rows = names
        .into_iter()
        .enumerate()
        .map(|(k, parameter)| PrdRow {
            parameter,
            full: a[k],
            reduced: b[k],
            prd: values[k],
        })
        .collect();
    Ok((
        Deletion {
            dropped: ids.to_vec(),
            converged: reduced.converged,
            loglik: reduced.loglik,
            coefficients: reduced.wald_table(),
            prd: rows,
        },
        reduced,
    ))
}

fn write_prd(out: &mut Outputs, d: &Deletion) -> Result<(), CliError> {
    let rows: Vec<Vec<String>> = d
        .prd
        .iter()
        .map(|r| vec![r.parameter.clone(), fmt(r.full), fmt(r.reduced), fmt_opt(r.prd)])
        .collect();
    out.csv("prd.csv", &header(&["parameter", "full", "reduced", "prd"]), &rows)
}

fn converged_or_fail(f: &FitResult<f64>) -> Result<(), CliError> {
    if f.converged {
        Ok(())
    } else {
        Err(CliError::Convergence(
            f.diagnostic.clone().unwrap_or_else(|| "fit did not converge".into()),
        ))
    }
}

pub fn cmd_fit(a: &FitArgs) -> Result<(), CliError> {
    let loaded = load(&a.data)?;
    let data = &loaded.data;
    let opts = fit_options(&a.data, data.n_covariates())?;
    let drop = a.drop.as_deref().map(|d| split_ids(d, data)).transpose()?;
    let f = fit(data, &opts)?;
    let mut out = Outputs::new(&a.run.out)?;
    let mut report = FitReport {
        converged: f.converged,
        diagnostic: f.diagnostic.clone(),
        iterations: f.iterations,
        grad_norm: f.grad_norm,
        loglik: f.loglik,
        n_clusters: data.n_clusters(),
        n_measurements: data.n_measurements(),
        coefficients: f.wald_table(),
        phi: f.theta_hat.phi,
        lambda: f.lambda_hat,
        poisson: poisson_fit(data).ok().map(|b| poisson_summary(&b, data)),
        deletion: None,
    };
    let mut reduced_ok = true;
    if let (Some(ids), true) = (&drop, f.converged) {
        let (d, reduced) = deletion(data, &f, ids, &opts)?;
        reduced_ok = reduced.converged;
        write_prd(&mut out, &d)?;
        report.deletion = Some(d);
    }
    out.json("fit.json", &report)?;
    out.finish(RunManifest::new("fit", loaded.digest, None, options_of(a)))?;
    converged_or_fail(&f)?;
    if !reduced_ok {
        return Err(CliError::Convergence("fit after deletion did not converge".into()));
    }
    Ok(())
}

pub fn cmd_residuals(a: &ResidualArgs) -> Result<(), CliError> {
    let loaded = load(&a.data)?;
    let data = &loaded.data;
    let report = match a.model {
        ModelChoice::Mnb => {
            let f = fit(data, &fit_options(&a.data, data.n_covariates())?)?;
            converged_or_fail(&f)?;
            quantile_residuals(&f, data, a.seed)?
        }
        ModelChoice::Poisson => pearson_residuals(&poisson_fit(data)?, data)?,
    };
    let rows: Vec<Vec<String>> = report
        .residuals
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let j = report.measurement.as_ref().map(|m| (m[i] + 1).to_string()).unwrap_or_default();
            vec![(i + 1).to_string(), report.cluster_ids[i].clone(), j, fmt(r)]
        })
        .collect();
    let mut out = Outputs::new(&a.run.out)?;
    out.csv("residuals.csv", &header(&["index", "id", "measurement", "value"]), &rows)?;
    out.finish(RunManifest::new("residuals", loaded.digest, Some(a.seed), options_of(a)))
}

pub fn cmd_envelope(a: &EnvelopeArgs) -> Result<(), CliError> {
    let loaded = load(&a.data)?;
    let data = &loaded.data;
    let model = match a.model {
        ModelChoice::Mnb => {
            let f = fit(data, &fit_options(&a.data, data.n_covariates())?)?;
            converged_or_fail(&f)?;
            EnvelopeModel::Mnb(f.theta_hat)
        }
        ModelChoice::Poisson => EnvelopeModel::Poisson(poisson_fit(data)?.beta_hat),
    };
    let opts = if a.compat {
        EnvelopeOptions::compat(a.seed)
    } else {
        EnvelopeOptions {
            nsim: a.nsim,
            band: BandRule::Central(a.band),
            seed: a.seed,
            refit: true,
        }
    };
    let band = simulated_envelope(&model, data, &opts)?;
    // label each sorted residual with its cluster (and measurement)
    let labels: Vec<String> = match a.model {
        ModelChoice::Mnb => data.cluster_ids(),
        ModelChoice::Poisson => data
            .clusters()
            .iter()
            .flat_map(|c| (1..=c.len()).map(move |j| format!("{}:{j}", c.id())))
            .collect(),
    };
    let rows: Vec<Vec<String>> = (0..band.observed.len())
        .map(|i| {
            vec![
                (i + 1).to_string(),
                labels[band.sorted_index[i]].clone(),
                fmt(band.theoretical[i]),
                fmt(band.lower[i]),
                fmt(band.median[i]),
                fmt(band.upper[i]),
                fmt(band.observed[i]),
            ]
        })
        .collect();
    let mut out = Outputs::new(&a.run.out)?;
    out.csv(
        "envelope.csv",
        &header(&["index", "id", "theoretical", "lower", "median", "upper", "observed"]),
        &rows,
    )?;
    out.finish(RunManifest::new("envelope", loaded.digest, Some(a.seed), options_of(a)))
}

#[derive(Debug, Serialize)]
struct LocalSummary {
    scheme: SchemeKind,
    covariate: Option<String>,
    scale: Option<f64>,
    c_dmax: f64,
    benchmark: f64,
    max_abs_dmax: String,
    flagged: Vec<String>,
}

#[derive(Debug, Serialize)]
struct GlobalSummary {
    benchmark: f64,
    flagged: Vec<String>,
    ranking: Vec<String>,
    failed: Vec<String>,
}

#[derive(Debug, Serialize)]
struct InfluenceSummary {
    local: LocalSummary,
    global: GlobalSummary,
    deletion: Option<Deletion>,
}

fn scheme_from(a: &InfluenceArgs, data: &LongitudinalDataset<f64>) -> Result<Scheme<f64>, CliError> {
    let choice = match (a.scheme, a.level) {
        (SchemeChoice::Weight, Some(Level::Measurement)) => SchemeChoice::WeightObs,
        (s, Some(Level::Measurement)) if s != SchemeChoice::WeightObs => {
            return Err(CliError::Usage("--level measurement applies only to the weight scheme".into()))
        }
        (s, _) => s,
    };
    Ok(match choice {
        SchemeChoice::Weight => Scheme::CaseWeightSubject,
        SchemeChoice::WeightObs => Scheme::CaseWeightMeasurement,
        SchemeChoice::Dispersion => Scheme::Dispersion,
        SchemeChoice::Explanatory => {
            let name = a
                .covariate
                .as_deref()
                .ok_or_else(|| CliError::Usage("--scheme explanatory needs --covariate".into()))?;
            let covariate = data
                .covariate_names()
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| CliError::Usage(format!("--covariate: no design column '{name}'")))?;
            Scheme::Explanatory {
                covariate,
                scale: a.scale_sx,
            }
        }
    })
}

pub fn cmd_influence(a: &InfluenceArgs) -> Result<(), CliError> {
    let loaded = load(&a.data)?;
    let data = &loaded.data;
    let opts = fit_options(&a.data, data.n_covariates())?;
    let scheme = scheme_from(a, data)?;
    let drop = a.drop.as_deref().map(|d| split_ids(d, data)).transpose()?;
    let f = fit(data, &opts)?;
    converged_or_fail(&f)?;

    let delta = delta_matrix(&f, data, &scheme)?;
    let local = curvature(&delta, &f.info)?;
    let global = global_influence_with(&f, data, &opts)?;
    let mut out = Outputs::new(&a.run.out)?;

    let local_flags = local.flagged();
    let rows: Vec<Vec<String>> = (0..local.c_i.len())
        .map(|i| {
            vec![
                (i + 1).to_string(),
                local.labels[i].clone(),
                fmt(local.d_max[i]),
                fmt(local.d_max[i].abs()),
                fmt(local.c_i[i]),
                local_flags.contains(&i).to_string(),
            ]
        })
        .collect();
    out.csv(
        "local_influence.csv",
        &header(&["index", "label", "d_max", "abs_d_max", "c_i", "flagged"]),
        &rows,
    )?;

    let global_flags = global.flagged();
    let mut head = header(&["index", "id", "gd", "ld", "flagged"]);
    head.extend(f.covariate_names.iter().map(|n| format!("{n}_deleted")));
    head.push("phi_deleted".into());
    head.push("error".into());
    let p = data.n_covariates();
    let rows: Vec<Vec<String>> = (0..global.gd.len())
        .map(|i| {
            let mut r = vec![
                (i + 1).to_string(),
                global.cluster_ids[i].clone(),
                fmt_opt(global.gd[i]),
                fmt_opt(global.ld[i]),
                global_flags.contains(&i).to_string(),
            ];
            match &global.theta_deleted[i] {
                Some(t) => r.extend(t.to_vec().into_iter().map(fmt)),
                None => r.extend(std::iter::repeat_n(String::new(), p + 1)),
            }
            r.push(global.failures[i].clone().unwrap_or_default());
            r
        })
        .collect();
    out.csv("global_influence.csv", &head, &rows)?;

    let (argmax, _) = local
        .d_max
        .iter()
        .enumerate()
        .fold((0, -1.0), |best, (i, &v)| if v.abs() > best.1 { (i, v.abs()) } else { best });
    let mut summary = InfluenceSummary {
        local: LocalSummary {
            scheme: local.scheme,
            covariate: delta.covariate.map(|k| f.covariate_names[k].clone()),
            scale: delta.scale,
            c_dmax: local.c_dmax,
            benchmark: local.benchmark,
            max_abs_dmax: local.labels.get(argmax).cloned().unwrap_or_default(),
            flagged: local_flags.iter().map(|&i| local.labels[i].clone()).collect(),
        },
        global: GlobalSummary {
            benchmark: global.benchmark,
            flagged: global_flags.iter().map(|&i| global.cluster_ids[i].clone()).collect(),
            ranking: global.ranking().iter().map(|&i| global.cluster_ids[i].clone()).collect(),
            failed: (0..global.gd.len())
                .filter(|&i| global.gd[i].is_none())
                .map(|i| global.cluster_ids[i].clone())
                .collect(),
        },
        deletion: None,
    };
    let mut reduced_ok = true;
    if let Some(ids) = &drop {
        let (d, reduced) = deletion(data, &f, ids, &opts)?;
        reduced_ok = reduced.converged;
        write_prd(&mut out, &d)?;
        summary.deletion = Some(d);
    }
    out.json("influence.json", &summary)?;
    out.finish(RunManifest::new("influence", loaded.digest, None, options_of(a)))?;
    if !reduced_ok {
        return Err(CliError::Convergence("fit after deletion did not converge".into()));
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct SimulationReport {
    config: StudyConfig<f64>,
    summary: mnbr::simulation::SimulationSummary<f64>,
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<(), CliError> {
    let bytes = fs::read(&a.config).map_err(|e| CliError::Data(format!("{}: {e}", a.config.display())))?;
    let text = String::from_utf8(bytes.clone()).map_err(|_| CliError::Data("config is not UTF-8".into()))?;
    let mut config = parse_study(&text)?;
    config.seed = a.seed;
    let summary = monte_carlo(&config)?;
    let mut out = Outputs::new(&a.run.out)?;
    out.json("simulation.json", &SimulationReport { config, summary })?;
    out.finish(RunManifest::new("simulate", sha256_hex(&bytes), Some(a.seed), options_of(a)))
}
