//! CSV ingestion and a small formula language for building design matrices.

use mnbr::model::{Cluster, LongitudinalDataset, ModelError};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use thiserror::Error;

/// Errors name the file line (header = line 1) where one applies.
#[derive(Debug, Error)]
pub enum IngestError {
    #[error("column '{column}' not found in header")]
    MissingColumn { column: String },
    #[error("line {line}: response '{value}' is not an integer count")]
    NonIntegerResponse { line: usize, value: String },
    #[error("line {line}: response {value} is negative")]
    NegativeCount { line: usize, value: String },
    #[error("line {line}: level '{value}' of column '{column}' was not seen when the encoding was built")]
    UnseenLevel { line: usize, column: String, value: String },
    #[error("line {line}: empty cluster id")]
    EmptyCluster { line: usize },
    #[error("line {line}: column '{column}' value '{value}' is not usable: {reason}")]
    InvalidValue {
        line: usize,
        column: String,
        value: String,
        reason: String,
    },
    #[error("formula: {0}")]
    Formula(String),
    #[error("file has no data rows")]
    Empty,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Term {
    Main(String),
    Interaction(String, String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OffsetSpec {
    None,
    Log(String),
    Column(String),
}

impl std::str::FromStr for OffsetSpec {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.is_empty() || s == "none" {
            Ok(OffsetSpec::None)
        } else if let Some(col) = s.strip_prefix("log:") {
            if col.is_empty() {
                return Err(IngestError::Formula("offset 'log:' needs a column".into()));
            }
            Ok(OffsetSpec::Log(col.to_string()))
        } else {
            Ok(OffsetSpec::Column(s.to_string()))
        }
    }
}

/// `response ~ terms + offset`, with `factor(col)` forcing a column to be
/// treated as categorical.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelFormulaLite {
    pub response: String,
    pub terms: Vec<Term>,
    pub offset: OffsetSpec,
    pub intercept: bool,
    pub factors: Vec<String>,
}

impl ModelFormulaLite {
    /// Parses a comma list such as `trt,period,trt:period` or `factor(year)`.
    pub fn parse(response: &str, terms: &str, offset: &str, intercept: bool) -> Result<Self, IngestError> {
        let mut parsed = Vec::new();
        let mut factors = Vec::new();
        let mut unwrap = |raw: &str| -> Result<String, IngestError> {
            let raw = raw.trim();
            if let Some(inner) = raw.strip_prefix("factor(").and_then(|r| r.strip_suffix(')')) {
                let inner = inner.trim().to_string();
                if !factors.contains(&inner) {
                    factors.push(inner.clone());
                }
                Ok(inner)
            } else if raw.is_empty() {
                Err(IngestError::Formula("empty term".into()))
            } else {
                Ok(raw.to_string())
            }
        };
        for piece in terms.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let parts: Vec<&str> = piece.split(':').collect();
            match parts.as_slice() {
                [a] => parsed.push(Term::Main(unwrap(a)?)),
                [a, b] => parsed.push(Term::Interaction(unwrap(a)?, unwrap(b)?)),
                _ => return Err(IngestError::Formula(format!("only two-way interactions are supported: '{piece}'"))),
            }
        }
        let formula = Self {
            response: response.trim().to_string(),
            terms: parsed,
            offset: offset.parse()?,
            intercept,
            factors,
        };
        formula.check()?;
        Ok(formula)
    }

    fn check(&self) -> Result<(), IngestError> {
        let mains: Vec<&String> = self
            .terms
            .iter()
            .filter_map(|t| if let Term::Main(c) = t { Some(c) } else { None })
            .collect();
        for t in &self.terms {
            if let Term::Interaction(a, b) = t {
                for side in [a, b] {
                    if !mains.contains(&side) {
                        return Err(IngestError::Formula(format!(
                            "interaction {a}:{b} uses '{side}', which is not a main term"
                        )));
                    }
                }
            }
        }
        if !self.intercept && self.terms.is_empty() {
            return Err(IngestError::Formula("model has no columns".into()));
        }
        Ok(())
    }

    fn columns(&self) -> Vec<&str> {
        let mut cols = vec![self.response.as_str()];
        for t in &self.terms {
            match t {
                Term::Main(c) => cols.push(c),
                Term::Interaction(a, b) => {
                    cols.push(a);
                    cols.push(b);
                }
            }
        }
        match &self.offset {
            OffsetSpec::Log(c) | OffsetSpec::Column(c) => cols.push(c),
            OffsetSpec::None => {}
        }
        cols
    }
}

/// How each covariate column was encoded.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Encoding {
    /// Sorted levels of categorical columns; the first is the reference.
    pub levels: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self, IngestError> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
        let header = reader.headers()?.iter().map(str::to_string).collect();
        let rows = reader
            .records()
            .map(|r| r.map(|rec| rec.iter().map(str::to_string).collect()))
            .collect::<Result<Vec<Vec<String>>, _>>()?;
        if rows.is_empty() {
            return Err(IngestError::Empty);
        }
        Ok(Self { header, rows })
    }

    fn index(&self, column: &str) -> Result<usize, IngestError> {
        self.header
            .iter()
            .position(|h| h == column)
            .ok_or_else(|| IngestError::MissingColumn { column: column.to_string() })
    }
}

fn parse_count(raw: &str, line: usize) -> Result<u64, IngestError> {
    if let Ok(v) = raw.parse::<i64>() {
        return u64::try_from(v).map_err(|_| IngestError::NegativeCount { line, value: raw.into() });
    }
    match raw.parse::<f64>() {
        Ok(v) if v < 0.0 => Err(IngestError::NegativeCount { line, value: raw.into() }),
        Ok(v) if v.fract() == 0.0 && v <= u64::MAX as f64 => Ok(v as u64),
        _ => Err(IngestError::NonIntegerResponse { line, value: raw.into() }),
    }
}

fn parse_number(raw: &str, column: &str, line: usize) -> Result<f64, IngestError> {
    raw.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| IngestError::InvalidValue {
            line,
            column: column.into(),
            value: raw.into(),
            reason: "not a finite number".into(),
        })
}

/// Named columns produced by one main term, evaluated per row.
struct Block {
    names: Vec<String>,
    values: Vec<Vec<f64>>,
}

fn main_block(
    table: &Table,
    column: &str,
    force_factor: bool,
    encoding: &mut Encoding,
    fixed: bool,
) -> Result<Block, IngestError> {
    let idx = table.index(column)?;
    let raw: Vec<&str> = table.rows.iter().map(|r| r[idx].as_str()).collect();
    let numeric = !force_factor && !encoding.levels.contains_key(column) && raw.iter().all(|v| v.parse::<f64>().is_ok());
    if numeric {
        let values = raw
            .iter()
            .enumerate()
            .map(|(r, v)| parse_number(v, column, r + 2).map(|x| vec![x]))
            .collect::<Result<_, _>>()?;
        return Ok(Block {
            names: vec![column.to_string()],
            values,
        });
    }
    if !encoding.levels.contains_key(column) {
        if fixed {
            return Err(IngestError::UnseenLevel {
                line: 2,
                column: column.into(),
                value: raw[0].into(),
            });
        }
        let mut levels: Vec<String> = raw.iter().map(|s| s.to_string()).collect();
        levels.sort();
        levels.dedup();
        encoding.levels.insert(column.to_string(), levels);
    }
    let levels = &encoding.levels[column];
    let names = levels[1..].iter().map(|l| format!("{column}{l}")).collect();
    let values = raw
        .iter()
        .enumerate()
        .map(|(r, v)| {
            let pos = levels.iter().position(|l| l == v).ok_or_else(|| IngestError::UnseenLevel {
                line: r + 2,
                column: column.into(),
                value: v.to_string(),
            })?;
            Ok((1..levels.len()).map(|k| if k == pos { 1.0 } else { 0.0 }).collect())
        })
        .collect::<Result<_, IngestError>>()?;
    Ok(Block { names, values })
}

/// Reads a CSV into clusters. Levels of categorical columns are inferred
/// from the file.
pub fn ingest_csv(path: &Path, id_column: &str, formula: &ModelFormulaLite) -> Result<LongitudinalDataset<f64>, IngestError> {
    let table = Table::read(path)?;
    build_dataset(&table, id_column, formula, &mut Encoding::default(), false)
}

/// Reads a CSV with a previously built encoding; levels not in it are an error.
pub fn ingest_csv_with(
    path: &Path,
    id_column: &str,
    formula: &ModelFormulaLite,
    encoding: &Encoding,
) -> Result<LongitudinalDataset<f64>, IngestError> {
    let table = Table::read(path)?;
    build_dataset(&table, id_column, formula, &mut encoding.clone(), true)
}

pub fn build_dataset(
    table: &Table,
    id_column: &str,
    formula: &ModelFormulaLite,
    encoding: &mut Encoding,
    fixed_levels: bool,
) -> Result<LongitudinalDataset<f64>, IngestError> {
    let id_idx = table.index(id_column)?;
    for col in formula.columns() {
        table.index(col)?;
    }
    let y_idx = table.index(&formula.response)?;
    let mut blocks: HashMap<String, Block> = HashMap::new();
    for t in &formula.terms {
        let cols = match t {
            Term::Main(c) => vec![c],
            Term::Interaction(a, b) => vec![a, b],
        };
        for c in cols {
            if !blocks.contains_key(c) {
                let forced = formula.factors.contains(c);
                blocks.insert(c.clone(), main_block(table, c, forced, encoding, fixed_levels)?);
            }
        }
    }
    let mut names: Vec<String> = Vec::new();
    if formula.intercept {
        names.push("(Intercept)".into());
    }
    for t in &formula.terms {
        match t {
            Term::Main(c) => names.extend(blocks[c].names.iter().cloned()),
            Term::Interaction(a, b) => {
                for na in &blocks[a].names {
                    for nb in &blocks[b].names {
                        names.push(format!("{na}:{nb}"));
                    }
                }
            }
        }
    }
    let offset_idx = match &formula.offset {
        OffsetSpec::None => None,
        OffsetSpec::Log(c) | OffsetSpec::Column(c) => Some(table.index(c)?),
    };

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, (Vec<u64>, Vec<Vec<f64>>, Vec<f64>)> = HashMap::new();
    for (r, row) in table.rows.iter().enumerate() {
        let line = r + 2;
        let id = row[id_idx].clone();
        if id.is_empty() {
            return Err(IngestError::EmptyCluster { line });
        }
        let y = parse_count(&row[y_idx], line)?;
        let mut x = Vec::with_capacity(names.len());
        if formula.intercept {
            x.push(1.0);
        }
        for t in &formula.terms {
            match t {
                Term::Main(c) => x.extend(&blocks[c].values[r]),
                Term::Interaction(a, b) => {
                    for va in &blocks[a].values[r] {
                        for vb in &blocks[b].values[r] {
                            x.push(va * vb);
                        }
                    }
                }
            }
        }
        let offset = match (&formula.offset, offset_idx) {
            (OffsetSpec::Log(c), Some(i)) => {
                let v = parse_number(&row[i], c, line)?;
                if v <= 0.0 {
                    return Err(IngestError::InvalidValue {
                        line,
                        column: c.clone(),
                        value: row[i].clone(),
                        reason: "log offset needs a positive value".into(),
                    });
                }
                v.ln()
            }
            (OffsetSpec::Column(c), Some(i)) => parse_number(&row[i], c, line)?,
            _ => 0.0,
        };
        let entry = groups.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            (Vec::new(), Vec::new(), Vec::new())
        });
        entry.0.push(y);
        entry.1.push(x);
        entry.2.push(offset);
    }
    let clusters = order
        .into_iter()
        .map(|id| {
            let (y, x, o) = groups.remove(&id).expect("grouped id");
            Cluster::new(id, y, x, o)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(LongitudinalDataset::new(clusters, names)?)
}

/// Canonical flat form: `id,y,offset,<design columns>`, numbers written
/// in shortest round-trip form.
pub fn canonical_csv(data: &LongitudinalDataset<f64>) -> Result<String, IngestError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id".to_string(), "y".to_string(), "offset".to_string()];
    header.extend(data.covariate_names().iter().cloned());
    w.write_record(&header)?;
    for c in data.clusters() {
        for j in 0..c.len() {
            let mut rec = vec![c.id().to_string(), c.counts()[j].to_string(), format!("{:?}", c.offset()[j])];
            rec.extend(c.design_row(j).iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| IngestError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Formula that re-reads a canonical CSV.
pub fn canonical_formula(data: &LongitudinalDataset<f64>) -> ModelFormulaLite {
    ModelFormulaLite {
        response: "y".into(),
        terms: data.covariate_names().iter().map(|n| Term::Main(n.clone())).collect(),
        offset: OffsetSpec::Column("offset".into()),
        intercept: false,
        factors: Vec::new(),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Content hash of a dataset, through its canonical CSV.
pub fn dataset_digest(data: &LongitudinalDataset<f64>) -> Result<String, IngestError> {
    Ok(sha256_hex(canonical_csv(data)?.as_bytes()))
}
