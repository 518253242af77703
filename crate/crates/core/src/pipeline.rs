//! Batch analysis of a main study against an external validation study:
//! CSV ingestion, log transform, IQR outlier rules, covariate imputation,
//! one shared calibration fit, the per-constituent estimator loop and
//! Benjamini-Hochberg adjustment.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{CalibrationModel, MeatRows, ValidationStudy};
use crate::dml::{dml_estimate_with_spec, slr_estimate, DmlConfig, DmlEstimate, MainStudy, Mode};
use crate::error::{Error, Result};
use crate::learners::{DesignSpec, LearnerConfig};
use crate::rng::{child, name_hash};
use crate::simulation::Method;

/// Multiplier on the interquartile range for the outlier fences.
pub const IQR_MULTIPLIER: f64 = 3.0;

/// FDR level used for significance flags.
pub const FDR_ALPHA: f64 = 0.05;

// ---------------------------------------------------------------------------
// schema

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateKind {
    Continuous,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateSpec {
    pub name: String,
    pub kind: CovariateKind,
}

/// One exposure: its surrogate (monitor) column and, in the validation
/// study, its personal (true) column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExposureSpec {
    pub name: String,
    pub surrogate: String,
    pub personal: String,
}

/// Column roles for both input files, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSchema {
    #[serde(default)]
    pub id: Option<String>,
    pub outcome: String,
    pub exposures: Vec<ExposureSpec>,
    /// Total mass: adjusted for in every model, never the exposure of interest.
    #[serde(default)]
    pub total_mass: Option<ExposureSpec>,
    /// Calibrate total mass as an extra exposure (otherwise its surrogate is
    /// taken as error-free and joins the covariates).
    #[serde(default = "yes")]
    pub calibrate_total_mass: bool,
    #[serde(default = "yes")]
    pub log_transform: bool,
    #[serde(default)]
    pub covariates: Vec<CovariateSpec>,
}

fn yes() -> bool {
    true
}

impl ColumnSchema {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let schema: Self = toml::from_str(text).map_err(|e| Error::Config(format!("schema: {e}")))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read schema {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.exposures.is_empty() {
            return Err(Error::Config("schema declares no exposures".into()));
        }
        let mut names = HashSet::new();
        for e in self.exposures.iter().chain(&self.total_mass) {
            if !names.insert(e.name.as_str()) {
                return Err(Error::Config(format!("duplicate exposure name '{}'", e.name)));
            }
        }
        let mut columns = HashSet::new();
        let mut all: Vec<&str> = vec![self.outcome.as_str()];
        all.extend(self.id.as_deref());
        for e in self.exposures.iter().chain(&self.total_mass) {
            all.push(&e.surrogate);
            all.push(&e.personal);
        }
        all.extend(self.covariates.iter().map(|c| c.name.as_str()));
        for c in all {
            if !columns.insert(c) {
                return Err(Error::Config(format!("column '{c}' is assigned more than one role")));
            }
        }
        Ok(())
    }

    fn exposure_columns(&self) -> impl Iterator<Item = &ExposureSpec> {
        self.exposures.iter().chain(&self.total_mass)
    }

    fn covariate_kinds(&self) -> Vec<(String, CovariateKind)> {
        self.covariates.iter().map(|c| (c.name.clone(), c.kind)).collect()
    }

    /// Declared columns of the main-study file.
    pub fn main_columns(&self) -> Vec<(String, CovariateKind)> {
        let mut cols = vec![(self.outcome.clone(), CovariateKind::Continuous)];
        cols.extend(self.exposure_columns().map(|e| (e.surrogate.clone(), CovariateKind::Continuous)));
        cols.extend(self.covariate_kinds());
        cols
    }

    /// Declared columns of the validation-study file.
    pub fn validation_columns(&self) -> Vec<(String, CovariateKind)> {
        let mut cols: Vec<(String, CovariateKind)> = Vec::new();
        for e in self.exposure_columns() {
            cols.push((e.surrogate.clone(), CovariateKind::Continuous));
            cols.push((e.personal.clone(), CovariateKind::Continuous));
        }
        cols.extend(self.covariate_kinds());
        cols
    }
}

// ---------------------------------------------------------------------------
// tables

#[derive(Debug, Clone, PartialEq)]
pub enum ColumnData {
    Numeric(Vec<Option<f64>>),
    /// Level codes index `levels`, which keep first-appearance order.
    Categorical {
        codes: Vec<Option<usize>>,
        levels: Vec<String>,
    },
}

impl ColumnData {
    pub fn len(&self) -> usize {
        match self {
            ColumnData::Numeric(v) => v.len(),
            ColumnData::Categorical { codes, .. } => codes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_missing(&self, row: usize) -> bool {
        match self {
            ColumnData::Numeric(v) => v[row].is_none(),
            ColumnData::Categorical { codes, .. } => codes[row].is_none(),
        }
    }

    pub fn missing_count(&self) -> usize {
        (0..self.len()).filter(|&r| self.is_missing(r)).count()
    }

    fn retain(&mut self, keep: &[bool]) {
        fn filter<T: Clone>(v: &mut Vec<T>, keep: &[bool]) {
            let mut it = keep.iter();
            v.retain(|_| *it.next().unwrap());
        }
        match self {
            ColumnData::Numeric(v) => filter(v, keep),
            ColumnData::Categorical { codes, .. } => filter(codes, keep),
        }
    }
}

/// Typed columns in declaration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    names: Vec<String>,
    columns: Vec<ColumnData>,
    n_rows: usize,
}

impl Table {
    pub fn new(columns: Vec<(String, ColumnData)>) -> Result<Self> {
        let n_rows = columns.first().map_or(0, |(_, c)| c.len());
        let mut table = Self {
            n_rows,
            ..Self::default()
        };
        for (name, data) in columns {
            table.push(name, data)?;
        }
        Ok(table)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn column(&self, name: &str) -> Result<&ColumnData> {
        self.index(name).map(|i| &self.columns[i])
    }

    pub fn numeric(&self, name: &str) -> Result<&[Option<f64>]> {
        match self.column(name)? {
            ColumnData::Numeric(v) => Ok(v),
            _ => Err(Error::Data(format!("column '{name}' is not numeric"))),
        }
    }

    fn numeric_mut(&mut self, name: &str) -> Result<&mut Vec<Option<f64>>> {
        let i = self.index(name)?;
        match &mut self.columns[i] {
            ColumnData::Numeric(v) => Ok(v),
            _ => Err(Error::Data(format!("column '{name}' is not numeric"))),
        }
    }

    fn index(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Data(format!("missing column '{name}'")))
    }

    pub fn push(&mut self, name: String, data: ColumnData) -> Result<()> {
        if self.names.contains(&name) {
            return Err(Error::Data(format!("duplicate column '{name}'")));
        }
        if self.names.is_empty() {
            self.n_rows = data.len();
        } else if data.len() != self.n_rows {
            return Err(Error::Data(format!(
                "column '{name}' has {} rows, table has {}",
                data.len(),
                self.n_rows
            )));
        }
        self.names.push(name);
        self.columns.push(data);
        Ok(())
    }

    /// Keeps the rows where `keep` is true.
    pub fn retain_rows(&mut self, keep: &[bool]) {
        for c in &mut self.columns {
            c.retain(keep);
        }
        self.n_rows = keep.iter().filter(|&&k| k).count();
    }
}

/// Reads the declared columns of a CSV file. Other columns are ignored.
pub fn ingest_csv(path: &Path, declared: &[(String, CovariateKind)]) -> Result<Table> {
    let file = std::fs::File::open(path).map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    read_table(file, declared)
}

/// As [`ingest_csv`] from any reader. Empty cells are missing; data rows are
/// numbered from 1 in error messages.
pub fn read_table<R: Read>(reader: R, declared: &[(String, CovariateKind)]) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    let mut positions = Vec::with_capacity(declared.len());
    for (name, _) in declared {
        let pos = header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("declared column '{name}' not found in header")))?;
        positions.push(pos);
    }
    let mut columns: Vec<ColumnData> = declared
        .iter()
        .map(|(_, kind)| match kind {
            CovariateKind::Continuous => ColumnData::Numeric(Vec::new()),
            CovariateKind::Categorical => ColumnData::Categorical {
                codes: Vec::new(),
                levels: Vec::new(),
            },
        })
        .collect();
    let mut lookup: Vec<HashMap<String, usize>> = vec![HashMap::new(); declared.len()];
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        for (c, &pos) in positions.iter().enumerate() {
            let cell = record.get(pos).unwrap_or("");
            match &mut columns[c] {
                ColumnData::Numeric(v) => {
                    if cell.is_empty() {
                        v.push(None);
                    } else {
                        let x: f64 = cell.parse().map_err(|_| {
                            Error::Data(format!(
                                "row {} column '{}': cannot parse '{cell}' as a number",
                                r + 1,
                                declared[c].0
                            ))
                        })?;
                        if !x.is_finite() {
                            return Err(Error::Data(format!(
                                "row {} column '{}': non-finite value '{cell}'",
                                r + 1,
                                declared[c].0
                            )));
                        }
                        v.push(Some(x));
                    }
                }
                ColumnData::Categorical { codes, levels } => {
                    if cell.is_empty() {
                        codes.push(None);
                    } else {
                        let next = levels.len();
                        let code = *lookup[c].entry(cell.to_string()).or_insert(next);
                        if code == next {
                            levels.push(cell.to_string());
                        }
                        codes.push(Some(code));
                    }
                }
            }
        }
    }
    Table::new(declared.iter().map(|(n, _)| n.clone()).zip(columns).collect())
}

/// Writes a table as CSV; numbers use the shortest exact decimal form.
pub fn write_table<W: Write>(table: &Table, out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(&table.names)?;
    for r in 0..table.n_rows {
        let row: Vec<String> = table
            .columns
            .iter()
            .map(|c| match c {
                ColumnData::Numeric(v) => v[r].map(|x| x.to_string()).unwrap_or_default(),
                ColumnData::Categorical { codes, levels } => codes[r].map(|k| levels[k].clone()).unwrap_or_default(),
            })
            .collect();
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// preprocessing

/// Natural log in place. Fails, changing nothing, if any targeted value is
/// not positive.
pub fn log_transform(table: &mut Table, columns: &[String]) -> Result<()> {
    let mut offenders = Vec::new();
    for name in columns {
        for (r, v) in table.numeric(name)?.iter().enumerate() {
            if let Some(x) = v {
                if *x <= 0.0 {
                    offenders.push(format!("{name}[row {}] = {x}", r + 1));
                }
            }
        }
    }
    if !offenders.is_empty() {
        let shown = offenders.iter().take(20).cloned().collect::<Vec<_>>().join(", ");
        return Err(Error::Data(format!(
            "log transform needs positive values; {} offending cells: {shown}",
            offenders.len()
        )));
    }
    for name in columns {
        for v in table.numeric_mut(name)?.iter_mut().flatten() {
            *v = v.ln();
        }
    }
    Ok(())
}

/// Quantile by linear interpolation between order statistics at
/// `h = (n - 1) p`. `sorted` must be ascending and nonempty.
pub fn quantile_linear(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `[Q1 - 3 IQR, Q3 + 3 IQR]` over the observed values.
pub fn iqr_bounds(values: &[Option<f64>]) -> Result<(f64, f64)> {
    let mut v: Vec<f64> = values.iter().flatten().copied().collect();
    if v.len() < 4 {
        return Err(Error::InsufficientSamples {
            block: None,
            available: v.len(),
            required: 4,
        });
    }
    v.sort_by(f64::total_cmp);
    let q1 = quantile_linear(&v, 0.25);
    let q3 = quantile_linear(&v, 0.75);
    let iqr = q3 - q1;
    Ok((q1 - IQR_MULTIPLIER * iqr, q3 + IQR_MULTIPLIER * iqr))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutlierPolicy {
    /// Remove the whole row if any listed column is outside its fences.
    DropRow,
    /// Mark only the offending cell missing.
    DropCell,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ColumnFences {
    pub column: String,
    pub lower: f64,
    pub upper: f64,
    pub flagged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutlierAudit {
    pub policy: OutlierPolicy,
    pub fences: Vec<ColumnFences>,
    pub rows_dropped: usize,
    pub cells_dropped: usize,
}

/// Applies the IQR rule to `columns`. All fences are computed before any
/// value is removed.
pub fn remove_outliers(table: &mut Table, columns: &[String], policy: OutlierPolicy) -> Result<OutlierAudit> {
    let mut fences = Vec::with_capacity(columns.len());
    for name in columns {
        let (lower, upper) = iqr_bounds(table.numeric(name)?).map_err(|e| match e {
            Error::InsufficientSamples { available, .. } => Error::Data(format!(
                "column '{name}' has {available} observed values; the outlier rule needs at least 4"
            )),
            other => other,
        })?;
        fences.push(ColumnFences {
            column: name.clone(),
            lower,
            upper,
            flagged: 0,
        });
    }
    let n = table.n_rows();
    let mut keep = vec![true; n];
    let mut cells_dropped = 0;
    for f in &mut fences {
        let col = table.numeric_mut(&f.column)?;
        for (r, v) in col.iter_mut().enumerate() {
            if let Some(x) = *v {
                if x < f.lower || x > f.upper {
                    f.flagged += 1;
                    match policy {
                        OutlierPolicy::DropRow => keep[r] = false,
                        OutlierPolicy::DropCell => {
                            *v = None;
                            cells_dropped += 1;
                        }
                    }
                }
            }
        }
    }
    let rows_dropped = keep.iter().filter(|&&k| !k).count();
    if rows_dropped > 0 {
        table.retain_rows(&keep);
    }
    Ok(OutlierAudit {
        policy,
        fences,
        rows_dropped,
        cells_dropped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Imputation {
    pub column: String,
    pub imputed: usize,
    /// Mean or modal level used for the fill.
    pub value: String,
    pub indicator: Option<String>,
}

/// Mean (continuous) or mode (categorical, ties to the earliest level)
/// imputation. Every column with missing cells gains a `<name>_missing`
/// 0/1 indicator. Returns the covariate list with indicators appended.
pub fn impute(table: &mut Table, covariates: &[String]) -> Result<(Vec<String>, Vec<Imputation>)> {
    let mut names = covariates.to_vec();
    let mut audit = Vec::new();
    for name in covariates {
        let i = table.index(name)?;
        let missing: Vec<bool> = (0..table.n_rows).map(|r| table.columns[i].is_missing(r)).collect();
        let count = missing.iter().filter(|&&m| m).count();
        if count == 0 {
            continue;
        }
        if count == table.n_rows {
            return Err(Error::Data(format!("covariate '{name}' is entirely missing and cannot be imputed")));
        }
        let value = match &mut table.columns[i] {
            ColumnData::Numeric(v) => {
                let obs: Vec<f64> = v.iter().flatten().copied().collect();
                let mean = obs.iter().sum::<f64>() / obs.len() as f64;
                for x in v.iter_mut().filter(|x| x.is_none()) {
                    *x = Some(mean);
                }
                mean.to_string()
            }
            ColumnData::Categorical { codes, levels } => {
                let mut counts = vec![0usize; levels.len()];
                for c in codes.iter().flatten() {
                    counts[*c] += 1;
                }
                // max_by_key keeps the last maximum; scan in reverse for the first
                let mode = (0..levels.len()).rev().max_by_key(|&k| counts[k]).unwrap_or(0);
                for c in codes.iter_mut().filter(|c| c.is_none()) {
                    *c = Some(mode);
                }
                levels[mode].clone()
            }
        };
        let indicator = format!("{name}_missing");
        let flags = missing.iter().map(|&m| Some(if m { 1.0 } else { 0.0 })).collect();
        table.push(indicator.clone(), ColumnData::Numeric(flags))?;
        names.push(indicator.clone());
        audit.push(Imputation {
            column: name.clone(),
            imputed: count,
            value,
            indicator: Some(indicator),
        });
    }
    Ok((names, audit))
}

/// Benjamini-Hochberg step-up adjusted p-values, in input order.
pub fn bh_adjust(pvalues: &[f64]) -> Result<Vec<f64>> {
    if let Some(p) = pvalues.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Data(format!("p-value {p} is outside [0, 1]")));
    }
    let m = pvalues.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| pvalues[a].total_cmp(&pvalues[b]));
    let mut adjusted = vec![0.0; m];
    let mut running = 1.0_f64;
    for rank in (0..m).rev() {
        let i = order[rank];
        running = running.min(pvalues[i] * m as f64 / (rank + 1) as f64);
        adjusted[i] = running.min(1.0);
    }
    Ok(adjusted)
}

/// Per-column missing-cell bookkeeping over the retained rows:
/// `missing_out = missing_in + outlier_cells - imputed`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ColumnAudit {
    pub column: String,
    pub missing_in: usize,
    pub outlier_cells: usize,
    pub imputed: usize,
    pub missing_out: usize,
}

/// Preprocessing record for one input table:
/// `rows_in = rows_out + rows_dropped_outlier + rows_dropped_incomplete`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableAudit {
    pub rows_in: usize,
    pub rows_out: usize,
    pub rows_dropped_outlier: usize,
    pub rows_dropped_incomplete: usize,
    pub log_transformed: Vec<String>,
    pub outliers: Vec<OutlierAudit>,
    pub imputations: Vec<Imputation>,
    pub columns: Vec<ColumnAudit>,
    /// Imputation statistics are computed after outlier removal.
    pub imputed_after_outliers: bool,
}

/// Which study a table comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Study {
    Main,
    Validation,
}

/// Log transform, outlier rules and covariate imputation for one study.
///
/// Surrogate outliers drop the row; personal-exposure outliers drop the
/// cell. Rows missing the outcome or a surrogate are dropped. Returns the
/// covariate names after imputation (indicators appended).
pub fn preprocess(table: &mut Table, schema: &ColumnSchema, study: Study) -> Result<(Vec<String>, TableAudit)> {
    let rows_in = table.n_rows();
    let surrogates: Vec<String> = schema.exposure_columns().map(|e| e.surrogate.clone()).collect();
    let personal: Vec<String> = schema.exposure_columns().map(|e| e.personal.clone()).collect();
    let covariates: Vec<String> = schema.covariates.iter().map(|c| c.name.clone()).collect();

    let mut logged = surrogates.clone();
    if study == Study::Validation {
        logged.extend(personal.iter().cloned());
    }
    let log_transformed = if schema.log_transform {
        log_transform(table, &logged)?;
        logged
    } else {
        Vec::new()
    };

    let mut outliers = vec![remove_outliers(table, &surrogates, OutlierPolicy::DropRow)?];
    let rows_dropped_outlier = outliers[0].rows_dropped;

    let mut required = surrogates.clone();
    if study == Study::Main {
        required.push(schema.outcome.clone());
    }
    let keep: Vec<bool> = (0..table.n_rows())
        .map(|r| required.iter().all(|c| !table.column(c).map_or(true, |col| col.is_missing(r))))
        .collect();
    let rows_dropped_incomplete = keep.iter().filter(|&&k| !k).count();
    table.retain_rows(&keep);

    let tracked: Vec<String> = match study {
        Study::Main => covariates.clone(),
        Study::Validation => personal.iter().chain(&covariates).cloned().collect(),
    };
    let mut columns: Vec<ColumnAudit> = tracked
        .iter()
        .map(|c| {
            Ok(ColumnAudit {
                column: c.clone(),
                missing_in: table.column(c)?.missing_count(),
                outlier_cells: 0,
                imputed: 0,
                missing_out: 0,
            })
        })
        .collect::<Result<_>>()?;

    if study == Study::Validation {
        let cells = remove_outliers(table, &personal, OutlierPolicy::DropCell)?;
        for f in &cells.fences {
            if let Some(a) = columns.iter_mut().find(|a| a.column == f.column) {
                a.outlier_cells = f.flagged;
            }
        }
        outliers.push(cells);
    }

    let (names, imputations) = impute(table, &covariates)?;
    for imp in &imputations {
        if let Some(a) = columns.iter_mut().find(|a| a.column == imp.column) {
            a.imputed = imp.imputed;
        }
    }
    for a in &mut columns {
        a.missing_out = table.column(&a.column)?.missing_count();
    }
    Ok((
        names,
        TableAudit {
            rows_in,
            rows_out: table.n_rows(),
            rows_dropped_outlier,
            rows_dropped_incomplete,
            log_transformed,
            outliers,
            imputations,
            columns,
            imputed_after_outliers: true,
        },
    ))
}

// ---------------------------------------------------------------------------
// numeric assembly

fn numeric_matrix(table: &Table, columns: &[String]) -> Result<DMatrix<f64>> {
    let n = table.n_rows();
    let mut out = DMatrix::zeros(n, columns.len());
    for (c, name) in columns.iter().enumerate() {
        for (r, v) in table.numeric(name)?.iter().enumerate() {
            out[(r, c)] = v.unwrap_or(f64::NAN);
        }
    }
    Ok(out)
}

fn append_column(m: DMatrix<f64>, col: &DMatrix<f64>) -> DMatrix<f64> {
    let k = m.ncols();
    let mut out = m.insert_column(k, 0.0);
    out.set_column(k, &col.column(0));
    out
}

/// Reference-coded covariates shared by both studies. Categorical levels
/// follow first appearance in the first table, then new levels of the next;
/// the first level is the reference. Columns constant in any table are
/// dropped, since they are collinear with the intercept there.
fn encode_covariates(
    tables: &[&Table],
    covariates: &[Vec<String>],
    notes: &mut Vec<String>,
) -> Result<(Vec<String>, Vec<DMatrix<f64>>)> {
    let mut all: Vec<String> = Vec::new();
    for list in covariates {
        for c in list {
            if !all.contains(c) {
                all.push(c.clone());
            }
        }
    }
    let mut names = Vec::new();
    let mut cols: Vec<Vec<Vec<f64>>> = Vec::new();
    for name in &all {
        let present: Vec<Option<&ColumnData>> = tables.iter().map(|t| t.column(name).ok()).collect();
        let kind = present.iter().flatten().next().expect("listed covariate exists");
        match kind {
            ColumnData::Numeric(_) => {
                let per: Vec<Vec<f64>> = tables
                    .iter()
                    .zip(&present)
                    .map(|(t, col)| match col {
                        // an indicator created in one study only is all zero elsewhere
                        None => vec![0.0; t.n_rows()],
                        Some(ColumnData::Numeric(v)) => v.iter().map(|x| x.unwrap_or(f64::NAN)).collect(),
                        Some(_) => vec![f64::NAN; t.n_rows()],
                    })
                    .collect();
                names.push(name.clone());
                cols.push(per);
            }
            ColumnData::Categorical { .. } => {
                let mut levels: Vec<String> = Vec::new();
                for col in present.iter().flatten() {
                    if let ColumnData::Categorical { levels: l, .. } = col {
                        for level in l {
                            if !levels.contains(level) {
                                levels.push(level.clone());
                            }
                        }
                    }
                }
                for level in levels.iter().skip(1) {
                    let per: Vec<Vec<f64>> = tables
                        .iter()
                        .zip(&present)
                        .map(|(t, col)| match col {
                            Some(ColumnData::Categorical { codes, levels: l }) => codes
                                .iter()
                                .map(|c| c.map_or(f64::NAN, |k| f64::from(u8::from(&l[k] == level))))
                                .collect(),
                            _ => vec![0.0; t.n_rows()],
                        })
                        .collect();
                    names.push(format!("{name}={level}"));
                    cols.push(per);
                }
            }
        }
    }
    let mut keep_names = Vec::new();
    let mut keep_cols = Vec::new();
    for (name, per) in names.into_iter().zip(cols) {
        let constant = per.iter().any(|v| v.iter().all(|x| *x == v[0]));
        if constant {
            notes.push(format!("covariate column '{name}' is constant in a study and was dropped"));
        } else {
            keep_names.push(name);
            keep_cols.push(per);
        }
    }
    let matrices = tables
        .iter()
        .enumerate()
        .map(|(t, table)| DMatrix::from_fn(table.n_rows(), keep_cols.len(), |r, c| keep_cols[c][t][r]))
        .collect();
    Ok((keep_names, matrices))
}

/// Numeric inputs of an analysis after preprocessing. Exposure columns are
/// the constituents in schema order, then calibrated total mass if any.
#[derive(Debug, Clone)]
pub struct AnalysisData {
    pub constituents: Vec<String>,
    pub total_mass: TotalMass,
    pub covariate_names: Vec<String>,
    pub ms_y: DVector<f64>,
    pub ms_z: DMatrix<f64>,
    pub ms_w: DMatrix<f64>,
    pub evs_x: DMatrix<f64>,
    pub evs_z: DMatrix<f64>,
    pub evs_w: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TotalMass {
    Absent,
    Calibrated,
    ErrorFree,
}

impl AnalysisData {
    /// Assembles matrices from preprocessed tables.
    pub fn from_tables(
        ms: &Table,
        evs: &Table,
        schema: &ColumnSchema,
        ms_covariates: &[String],
        evs_covariates: &[String],
        notes: &mut Vec<String>,
    ) -> Result<Self> {
        let total_mass = match (&schema.total_mass, schema.calibrate_total_mass) {
            (None, _) => TotalMass::Absent,
            (Some(_), true) => TotalMass::Calibrated,
            (Some(_), false) => TotalMass::ErrorFree,
        };
        let mut exposures: Vec<&ExposureSpec> = schema.exposures.iter().collect();
        if total_mass == TotalMass::Calibrated {
            exposures.extend(&schema.total_mass);
        }
        let sur: Vec<String> = exposures.iter().map(|e| e.surrogate.clone()).collect();
        let per: Vec<String> = exposures.iter().map(|e| e.personal.clone()).collect();
        let (mut covariate_names, w) =
            encode_covariates(&[ms, evs], &[ms_covariates.to_vec(), evs_covariates.to_vec()], notes)?;
        let (mut ms_w, mut evs_w) = (w[0].clone(), w[1].clone());
        if total_mass == TotalMass::ErrorFree {
            let t = schema.total_mass.as_ref().expect("total mass declared");
            let tcol = [t.surrogate.clone()];
            ms_w = append_column(ms_w, &numeric_matrix(ms, &tcol)?);
            evs_w = append_column(evs_w, &numeric_matrix(evs, &tcol)?);
            covariate_names.push(t.name.clone());
        }
        let ms_y = numeric_matrix(ms, &[schema.outcome.clone()])?.column(0).into_owned();
        Ok(Self {
            constituents: schema.exposures.iter().map(|e| e.name.clone()).collect(),
            total_mass,
            covariate_names,
            ms_y,
            ms_z: numeric_matrix(ms, &sur)?,
            ms_w,
            evs_x: numeric_matrix(evs, &per)?,
            evs_z: numeric_matrix(evs, &sur)?,
            evs_w,
        })
    }

    fn has_calibrated_mass(&self) -> bool {
        self.total_mass == TotalMass::Calibrated
    }

    fn exposure_names(&self, schema_mass: Option<&str>) -> Vec<String> {
        let mut v = self.constituents.clone();
        if self.has_calibrated_mass() {
            v.push(schema_mass.unwrap_or("total_mass").to_string());
        }
        v
    }

    /// Validation study over exposure columns `cols`.
    fn validation(&self, cols: &[usize]) -> Result<ValidationStudy> {
        ValidationStudy::new(self.evs_x.select_columns(cols), self.evs_z.select_columns(cols), self.evs_w.clone())
    }
}

// ---------------------------------------------------------------------------
// analysis

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Analysis {
    /// Exposure of interest plus total mass and covariates.
    Single,
    /// All constituents, main effects.
    MultiMain,
    /// All constituents, main effects and pairwise interactions (DML only).
    MultiInteraction,
}

impl Analysis {
    pub fn as_str(&self) -> &'static str {
        match self {
            Analysis::Single => "single",
            Analysis::MultiMain => "multi_main",
            Analysis::MultiInteraction => "multi_interaction",
        }
    }
}

/// One report column: an estimator under an analysis form and mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ReportColumn {
    pub mode: Mode,
    pub analysis: Analysis,
    pub method: Method,
}

impl ReportColumn {
    pub fn label(&self) -> String {
        format!("{}/{}/{}", self.mode, self.analysis.as_str(), self.method.as_str())
    }

    fn sort_key(&self) -> (u8, Analysis, Method) {
        (u8::from(self.mode == Mode::Corrected), self.analysis, self.method)
    }
}

/// Parses `slr,dml:corrected,...`. A bare method means both modes.
pub fn parse_methods(list: &str) -> Result<Vec<(Method, Mode)>> {
    let mut out = Vec::new();
    for token in list.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let (m, mode) = match token.split_once(':') {
            Some((m, mode)) => (m, Some(mode)),
            None => (token, None),
        };
        let method = match m {
            "slr" => Method::Slr,
            "dml" => Method::Dml,
            other => return Err(Error::Config(format!("unknown method '{other}' (expected slr or dml)"))),
        };
        let modes = match mode {
            None => vec![Mode::Uncorrected, Mode::Corrected],
            Some("uncorrected") => vec![Mode::Uncorrected],
            Some("corrected") => vec![Mode::Corrected],
            Some(other) => {
                return Err(Error::Config(format!(
                    "unknown mode '{other}' (expected uncorrected or corrected)"
                )))
            }
        };
        for mode in modes {
            if !out.contains(&(method, mode)) {
                out.push((method, mode));
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Config("no methods requested".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct AnalysisOptions {
    pub methods: Vec<(Method, Mode)>,
    pub interactions: bool,
    pub single_pollutant: bool,
    pub seed: u64,
    pub learner: LearnerConfig,
    pub folds: usize,
    pub meat_rows: MeatRows,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            methods: vec![
                (Method::Slr, Mode::Uncorrected),
                (Method::Slr, Mode::Corrected),
                (Method::Dml, Mode::Uncorrected),
                (Method::Dml, Mode::Corrected),
            ],
            interactions: false,
            single_pollutant: false,
            seed: 0,
            learner: LearnerConfig::default(),
            folds: 2,
            meat_rows: MeatRows::CompleteCase,
        }
    }
}

impl AnalysisOptions {
    /// Report columns in a fixed order: uncorrected before corrected, then
    /// single, multi-main, multi-interaction, then SLR before DML.
    pub fn columns(&self) -> Vec<ReportColumn> {
        let mut cols = Vec::new();
        for &(method, mode) in &self.methods {
            cols.push(ReportColumn {
                mode,
                analysis: Analysis::MultiMain,
                method,
            });
            if self.single_pollutant {
                cols.push(ReportColumn {
                    mode,
                    analysis: Analysis::Single,
                    method,
                });
            }
            if self.interactions && method == Method::Dml {
                cols.push(ReportColumn {
                    mode,
                    analysis: Analysis::MultiInteraction,
                    method,
                });
            }
        }
        cols.sort_by_key(ReportColumn::sort_key);
        cols
    }
}

/// One cell of the report table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportEstimate {
    pub column: String,
    pub beta: f64,
    pub ase: f64,
    pub ci95: [f64; 2],
    pub p: f64,
    pub p_adjusted: f64,
    pub significant: bool,
    pub per_fold: Vec<f64>,
    pub var_components: [f64; 2],
}

impl ReportEstimate {
    fn from_estimate(column: String, e: &DmlEstimate) -> Self {
        Self {
            column,
            beta: e.beta,
            ase: e.ase,
            ci95: e.ci95,
            p: e.p_value,
            p_adjusted: f64::NAN,
            significant: false,
            per_fold: e.per_fold.clone(),
            var_components: e.var_components,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstituentReport {
    pub name: String,
    pub seed: u64,
    pub estimates: Vec<ReportEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Failure {
    pub constituent: String,
    pub column: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationSummary {
    pub exposures: Vec<String>,
    pub covariates: Vec<String>,
    pub n: usize,
    pub complete_rows: usize,
    pub sigma2: Vec<f64>,
    pub meat_rows: MeatRows,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportMeta {
    pub version: String,
    pub seed: u64,
    pub columns: Vec<String>,
    pub fdr_alpha: f64,
    pub flags: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Preprocessing {
    pub main: Option<TableAudit>,
    pub validation: Option<TableAudit>,
    pub notes: Vec<String>,
}

/// One row per constituent (sorted by name), one estimate per column.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisReport {
    pub meta: ReportMeta,
    pub preprocessing: Preprocessing,
    pub calibration: Option<CalibrationSummary>,
    pub constituents: Vec<ConstituentReport>,
    pub failures: Vec<Failure>,
}

impl AnalysisReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Exit status for the CLI: 5 when any estimate failed.
    pub fn exit_code(&self) -> i32 {
        if self.failures.is_empty() {
            0
        } else {
            5
        }
    }
}

fn decision_flags(data: &AnalysisData, options: &AnalysisOptions) -> BTreeMap<String, String> {
    let flags = [
        ("calibration_meat_rows", format!("{:?}", options.meat_rows).to_lowercase()),
        ("calibration_shared_across_constituents", "true".into()),
        ("single_pollutant_calibration", "refit_on_exposure_and_total_mass".into()),
        ("total_mass", format!("{:?}", data.total_mass).to_lowercase()),
        ("quantile_rule", "linear_interpolation_h=(n-1)p".into()),
        ("outlier_fence", format!("{IQR_MULTIPLIER}xIQR")),
        ("imputation_after_outlier_removal", "true".into()),
        ("categorical_coding", "reference_first_appearance".into()),
        ("slr_variance", "two_component_single_fold".into()),
        ("outcome_nuisance", "outcome_minus_preliminary_beta_times_exposure_fit".into()),
        ("exposure_of_interest_centered", "true".into()),
        ("learner", format!("{:?}", options.learner)),
        ("folds", options.folds.to_string()),
    ];
    flags.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// Seed for one constituent; independent of its position in the schema.
pub fn constituent_seed(seed: u64, name: &str) -> u64 {
    child(seed, name_hash(name))
}

/// Runs every requested estimator for each constituent in turn.
///
/// The calibration model is fitted once on all exposures, with constituents
/// in name order, and reordered per constituent so that it becomes exposure
/// 0. Confounders always appear in name order, so results for a constituent
/// do not depend on the column order of the schema. Failures of individual
/// estimates are recorded and the loop continues.
pub fn multi_pollutant_analyze(
    data: &AnalysisData,
    mass_name: Option<&str>,
    options: &AnalysisOptions,
    preprocessing: Preprocessing,
) -> Result<AnalysisReport> {
    let e = data.constituents.len();
    let columns = options.columns();
    let exposure_names = data.exposure_names(mass_name);
    let mut canonical: Vec<usize> = (0..e).collect();
    canonical.sort_by(|&a, &b| data.constituents[a].cmp(&data.constituents[b]));
    if data.has_calibrated_mass() {
        canonical.push(e);
    }
    let needs_model = columns.iter().any(|c| c.mode == Mode::Corrected && c.analysis != Analysis::Single);
    let (model, calibration) = if needs_model {
        let evs = data.validation(&canonical)?;
        let model = CalibrationModel::fit(&evs, options.meat_rows)?;
        let summary = CalibrationSummary {
            exposures: canonical.iter().map(|&j| exposure_names[j].clone()).collect(),
            covariates: data.covariate_names.clone(),
            n: evs.n(),
            complete_rows: (0..evs.n()).filter(|&r| evs.row_complete(r)).count(),
            sigma2: model.sigma2().to_vec(),
            meat_rows: options.meat_rows,
        };
        (Some(model), Some(summary))
    } else {
        (None, None)
    };

    let by_name: Vec<usize> = canonical.iter().copied().filter(|&j| j < e).collect();
    let jobs: Vec<(ConstituentReport, Vec<Failure>)> = by_name
        .into_par_iter()
        .map(|k| analyze_constituent(data, k, &canonical, &exposure_names, model.as_ref(), &columns, options))
        .collect();

    let mut constituents = Vec::with_capacity(e);
    let mut failures = Vec::new();
    for (report, fails) in jobs {
        constituents.push(report);
        failures.extend(fails);
    }
    for col in &columns {
        let label = col.label();
        let cells: Vec<(usize, usize)> = constituents
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.estimates.iter().position(|x| x.column == label).map(|j| (i, j)))
            .collect();
        let raw: Vec<f64> = cells.iter().map(|&(i, j)| constituents[i].estimates[j].p).collect();
        let adjusted = bh_adjust(&raw)?;
        for (&(i, j), q) in cells.iter().zip(adjusted) {
            let est = &mut constituents[i].estimates[j];
            est.p_adjusted = q;
            est.significant = q < FDR_ALPHA;
        }
    }
    Ok(AnalysisReport {
        meta: ReportMeta {
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: options.seed,
            columns: columns.iter().map(ReportColumn::label).collect(),
            fdr_alpha: FDR_ALPHA,
            flags: decision_flags(data, options),
        },
        preprocessing,
        calibration,
        constituents,
        failures,
    })
}

fn analyze_constituent(
    data: &AnalysisData,
    k: usize,
    canonical: &[usize],
    exposure_names: &[String],
    model: Option<&CalibrationModel>,
    columns: &[ReportColumn],
    options: &AnalysisOptions,
) -> (ConstituentReport, Vec<Failure>) {
    let name = &data.constituents[k];
    let seed = constituent_seed(options.seed, name);
    let mut estimates = Vec::new();
    let mut failures = Vec::new();
    // positions in the canonical model, exposure of interest first
    let pos = canonical.iter().position(|&j| j == k).expect("constituent in canonical order");
    let mut order = vec![pos];
    order.extend((0..canonical.len()).filter(|&i| i != pos));
    let multi_cols: Vec<usize> = order.iter().map(|&i| canonical[i]).collect();
    let mut single_cols = vec![k];
    if data.has_calibrated_mass() {
        single_cols.push(data.constituents.len());
    }

    let multi = prepare_run(data, &multi_cols, exposure_names, model.map(|m| m.reorder(&order)));
    let single = if columns.iter().any(|c| c.analysis == Analysis::Single) {
        let needs = columns.iter().any(|c| c.analysis == Analysis::Single && c.mode == Mode::Corrected);
        let model = needs.then(|| {
            data.validation(&single_cols)
                .and_then(|evs| CalibrationModel::fit(&evs, options.meat_rows))
        });
        Some(prepare_run(data, &single_cols, exposure_names, model))
    } else {
        None
    };

    for col in columns {
        let label = col.label();
        let run = match col.analysis {
            Analysis::Single => single.as_ref().expect("single run prepared"),
            _ => &multi,
        };
        let result = run.as_ref().map_err(|e| e.to_string()).and_then(|(ms, spec, model)| {
            estimate_column(ms, spec, model.as_ref(), col, options, child(seed, name_hash(&label)))
                .map_err(|e| e.to_string())
        });
        match result {
            Ok(est) => estimates.push(ReportEstimate::from_estimate(label, &est)),
            Err(error) => failures.push(Failure {
                constituent: name.clone(),
                column: label,
                error,
            }),
        }
    }
    (
        ConstituentReport {
            name: name.clone(),
            seed,
            estimates,
        },
        failures,
    )
}

type PreparedRun = Result<(MainStudy, DesignSpec, Option<CalibrationModel>)>;

fn prepare_run(
    data: &AnalysisData,
    cols: &[usize],
    exposure_names: &[String],
    model: Option<Result<CalibrationModel>>,
) -> PreparedRun {
    let ms = MainStudy::new(data.ms_y.clone(), data.ms_z.select_columns(cols), data.ms_w.clone())?;
    let confounders = cols[1..].iter().map(|&j| exposure_names[j].clone()).collect();
    let spec = DesignSpec::new(confounders, data.covariate_names.clone(), false);
    let model = model.transpose()?;
    Ok((ms, spec, model))
}

fn estimate_column(
    ms: &MainStudy,
    spec: &DesignSpec,
    model: Option<&CalibrationModel>,
    col: &ReportColumn,
    options: &AnalysisOptions,
    seed: u64,
) -> Result<DmlEstimate> {
    let model = if col.mode == Mode::Corrected { model } else { None };
    match col.method {
        Method::Slr => slr_estimate(ms, model, col.mode, crate::dml::DEFAULT_DELTA),
        Method::Dml => {
            let cfg = DmlConfig {
                folds: options.folds,
                seed,
                learner: options.learner.clone(),
                interactions: col.analysis == Analysis::MultiInteraction,
                ..DmlConfig::default()
            };
            let spec = DesignSpec::new(
                spec.exposure_names.clone(),
                spec.covariate_names.clone(),
                cfg.interactions,
            );
            dml_estimate_with_spec(ms, model, &cfg, col.mode, &spec)
        }
    }
}

/// End-to-end analysis of two CSV files.
pub fn analyze_files(
    main: &Path,
    validation: &Path,
    schema: &ColumnSchema,
    options: &AnalysisOptions,
) -> Result<AnalysisReport> {
    let mut ms = ingest_csv(main, &schema.main_columns())?;
    let mut evs = ingest_csv(validation, &schema.validation_columns())?;
    analyze_tables(&mut ms, &mut evs, schema, options)
}

/// As [`analyze_files`] on tables already read.
pub fn analyze_tables(
    ms: &mut Table,
    evs: &mut Table,
    schema: &ColumnSchema,
    options: &AnalysisOptions,
) -> Result<AnalysisReport> {
    let (ms_cov, ms_audit) = preprocess(ms, schema, Study::Main)?;
    let (evs_cov, evs_audit) = preprocess(evs, schema, Study::Validation)?;
    let mut notes = Vec::new();
    let data = AnalysisData::from_tables(ms, evs, schema, &ms_cov, &evs_cov, &mut notes)?;
    let preprocessing = Preprocessing {
        main: Some(ms_audit),
        validation: Some(evs_audit),
        notes,
    };
    let mass = schema.total_mass.as_ref().map(|t| t.name.as_str());
    multi_pollutant_analyze(&data, mass, options, preprocessing)
}

/// Preprocesses a validation file alone and fits the joint calibration
/// model with exposures in schema order (total mass last when calibrated).
pub fn calibrate_file(validation: &Path, schema: &ColumnSchema, meat_rows: MeatRows) -> Result<CalibrationModel> {
    let mut evs = ingest_csv(validation, &schema.validation_columns())?;
    let (cov, _) = preprocess(&mut evs, schema, Study::Validation)?;
    let mut notes = Vec::new();
    let (_, w) = encode_covariates(&[&evs], &[cov], &mut notes)?;
    let mut exposures: Vec<&ExposureSpec> = schema.exposures.iter().collect();
    let mut w = w[0].clone();
    match (&schema.total_mass, schema.calibrate_total_mass) {
        (Some(t), true) => exposures.push(t),
        (Some(t), false) => {
            w = append_column(w, &numeric_matrix(&evs, &[t.surrogate.clone()])?);
        }
        (None, _) => {}
    }
    let sur: Vec<String> = exposures.iter().map(|e| e.surrogate.clone()).collect();
    let per: Vec<String> = exposures.iter().map(|e| e.personal.clone()).collect();
    let study = ValidationStudy::new(numeric_matrix(&evs, &per)?, numeric_matrix(&evs, &sur)?, w)?;
    CalibrationModel::fit(&study, meat_rows)
}
