//! Monte-Carlo harness: scenario data generation, replicate runs over the
//! six estimator/mode combinations, and aggregate metrics.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Bernoulli, Distribution, Normal, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{CalibrationModel, MeatRows, ValidationStudy};
use crate::dml::{dml_estimate, slr_estimate, DmlConfig, DmlEstimate, MainStudy, Mode, DEFAULT_DELTA};
use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, nearest_correlation, symmetrize};
use crate::rng::{child, replicate_seed, stream, Rng};

/// Constituent order used throughout the harness. Index 0 is the exposure
/// of interest, index 1 is the first confounding constituent.
pub const CONSTITUENTS: [&str; 12] = ["Br", "Ca", "Cu", "Fe", "Mn", "Ni", "S", "Se", "Si", "Ti", "V", "Zn"];

const P1: usize = 12;

#[rustfmt::skip]
const SURROGATE_CORR: [[f64; 12]; 12] = [
    [ 1.00,  0.08,  0.24,  0.28,  0.31,  0.17,  0.00,  0.15, -0.02,  0.06,  0.22,  0.36],
    [ 0.08,  1.00,  0.69,  0.74,  0.76,  0.48, -0.28, -0.40,  0.73,  0.61,  0.62,  0.56],
    [ 0.24,  0.69,  1.00,  0.74,  0.69,  0.38, -0.14, -0.33,  0.47,  0.66,  0.45,  0.50],
    [ 0.28,  0.74,  0.74,  1.00,  0.73,  0.48, -0.03, -0.28,  0.61,  0.67,  0.56,  0.69],
    [ 0.31,  0.76,  0.69,  0.73,  1.00,  0.48, -0.20, -0.20,  0.45,  0.47,  0.62,  0.67],
    [ 0.17,  0.48,  0.38,  0.48,  0.48,  1.00,  0.11, -0.19,  0.20,  0.30,  0.68,  0.60],
    [ 0.00, -0.28, -0.14, -0.03, -0.20,  0.11,  1.00,  0.20,  0.01,  0.11, -0.09, -0.02],
    [ 0.15, -0.40, -0.33, -0.28, -0.20, -0.19,  0.20,  1.00, -0.27, -0.26, -0.12, -0.22],
    [-0.02,  0.73,  0.47,  0.61,  0.45,  0.20,  0.01, -0.27,  1.00,  0.72,  0.32,  0.15],
    [ 0.06,  0.61,  0.66,  0.67,  0.47,  0.30,  0.11, -0.26,  0.72,  1.00,  0.32,  0.28],
    [ 0.22,  0.62,  0.45,  0.56,  0.62,  0.68, -0.09, -0.12,  0.32,  0.32,  1.00,  0.57],
    [ 0.36,  0.56,  0.50,  0.69,  0.67,  0.60, -0.02, -0.22,  0.15,  0.28,  0.57,  1.00],
];

#[rustfmt::skip]
const ERROR_CORR: [[f64; 12]; 12] = [
    [ 1.00,  0.25,  0.13,  0.37,  0.17,  0.25,  0.51, -0.07,  0.19,  0.21,  0.06,  0.27],
    [ 0.25,  1.00,  0.25,  0.60,  0.20,  0.28,  0.46, -0.05,  0.66,  0.73,  0.19,  0.34],
    [ 0.13,  0.25,  1.00,  0.42,  0.12,  0.11,  0.23, -0.10,  0.37,  0.28,  0.27,  0.41],
    [ 0.37,  0.60,  0.42,  1.00,  0.36,  0.40,  0.53,  0.02,  0.51,  0.58,  0.14,  0.54],
    [ 0.17,  0.20,  0.12,  0.36,  1.00,  0.19,  0.26,  0.02,  0.16,  0.15,  0.17,  0.14],
    [ 0.25,  0.28,  0.11,  0.40,  0.19,  1.00,  0.33, -0.05,  0.15,  0.24,  0.01,  0.22],
    [ 0.51,  0.46,  0.23,  0.53,  0.26,  0.33,  1.00,  0.16,  0.36,  0.25,  0.23,  0.36],
    [-0.07, -0.05, -0.10,  0.02,  0.02, -0.05,  0.16,  1.00, -0.16, -0.15, -0.08, -0.15],
    [ 0.19,  0.66,  0.37,  0.51,  0.16,  0.15,  0.36, -0.16,  1.00,  0.69,  0.24,  0.32],
    [ 0.21,  0.73,  0.28,  0.58,  0.15,  0.24,  0.25, -0.15,  0.69,  1.00,  0.21,  0.26],
    [ 0.06,  0.19,  0.27,  0.14,  0.17,  0.01,  0.23, -0.08,  0.24,  0.21,  1.00,  0.10],
    [ 0.27,  0.34,  0.41,  0.54,  0.14,  0.22,  0.36, -0.15,  0.32,  0.26,  0.10,  1.00],
];

/// Eigenvalue floor used when projecting the tabulated correlations.
pub const PSD_FLOOR: f64 = 1e-8;

/// Target share of outcome variance explained, per scenario.
pub const TARGET_R2: [f64; 8] = [0.40, 0.60, 0.40, 0.60, 0.42, 0.59, 0.40, 0.58];

/// Outcome noise variances giving [`TARGET_R2`] under the default exposure
/// distribution. Produced by [`calibrate_sigma_xi2`] with 50,000 rows and
/// seed [`PILOT_SEED`], then frozen.
pub const DEFAULT_SIGMA_XI2: [f64; 8] = [
    826.377534, 367.278904, 1803.038031, 801.350236, 87.248200, 43.904559, 110.168585, 53.184834,
];

/// Seed of the pilots that fix error scales and noise variances.
pub const PILOT_SEED: u64 = 0x5EED_0F_C0FFEE;

const ERROR_PILOT_DRAWS: usize = 100_000;
const ACCEPTANCE_PILOT_DRAWS: usize = 10_000;
const MIN_ACCEPTANCE: f64 = 1e-3;
const BERNOULLI_P: f64 = 0.16;
const AGE_RANGE: (f64, f64) = (18.0, 91.0);
const X1_W2_SHIFT: f64 = 0.1;

/// Default exposure correlation (surrogate correlation table, projected).
pub fn default_exposure_corr() -> DMatrix<f64> {
    nearest_correlation(&table(&SURROGATE_CORR), PSD_FLOOR)
}

/// Default measurement-error correlation (error correlation table, projected).
pub fn default_error_corr() -> DMatrix<f64> {
    nearest_correlation(&table(&ERROR_CORR), PSD_FLOOR)
}

fn table(t: &[[f64; 12]; 12]) -> DMatrix<f64> {
    DMatrix::from_fn(12, 12, |i, j| t[i][j])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Default,
    Config,
}

/// Inputs of one simulation scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub scenario: u8,
    pub rho: f64,
    pub n_main: usize,
    pub n_validation: usize,
    pub replicates: usize,
    pub beta0: f64,
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub err_corr: DMatrix<f64>,
    pub sigma_xi2: f64,
    pub seed: u64,
    pub sigma_source: Source,
    pub err_corr_source: Source,
    pub sigma_xi2_source: Source,
}

impl ScenarioConfig {
    pub fn new(scenario: u8, rho: f64) -> Result<Self> {
        let cfg = Self {
            scenario,
            rho,
            n_main: 1000,
            n_validation: 350,
            replicates: 2000,
            beta0: 8.0,
            mu: DVector::from_element(P1, 3.0),
            sigma: default_exposure_corr(),
            err_corr: default_error_corr(),
            sigma_xi2: DEFAULT_SIGMA_XI2[scenario.clamp(1, 8) as usize - 1],
            seed: 0,
            sigma_source: Source::Default,
            err_corr_source: Source::Default,
            sigma_xi2_source: Source::Default,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=8).contains(&self.scenario) {
            return Err(Error::Config(format!("scenario must be 1-8, got {}", self.scenario)));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Config(format!("rho must be in (0, 1], got {}", self.rho)));
        }
        if self.n_main < 4 || self.n_validation < P1 + 2 + 3 {
            return Err(Error::Config(format!(
                "sample sizes too small: N={} n={} (need N >= 4, n >= {})",
                self.n_main,
                self.n_validation,
                P1 + 5
            )));
        }
        if self.mu.len() != P1 || self.sigma.shape() != (P1, P1) || self.err_corr.shape() != (P1, P1) {
            return Err(Error::Config("mu must have 12 entries and matrices must be 12x12".into()));
        }
        for (name, m) in [("sigma", &self.sigma), ("err_corr", &self.err_corr)] {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("{name} has non-finite entries")));
            }
            if (m - m.transpose()).amax() > 1e-12 {
                return Err(Error::Config(format!("{name} must be symmetric")));
            }
            if min_eigenvalue(m) < -1e-8 * m.trace().abs().max(1.0) {
                return Err(Error::Config(format!("{name} must be positive semidefinite")));
            }
        }
        if (0..P1).any(|j| (self.err_corr[(j, j)] - 1.0).abs() > 1e-12) {
            return Err(Error::Config("err_corr must have a unit diagonal".into()));
        }
        if !(self.sigma_xi2 >= 0.0) || !self.beta0.is_finite() {
            return Err(Error::Config("sigma_xi2 must be nonnegative".into()));
        }
        Ok(())
    }

    /// Applies command-line overrides. A default noise variance follows the
    /// new scenario; one set in a file is kept.
    pub fn with_overrides(mut self, scenario: Option<u8>, rho: Option<f64>) -> Result<Self> {
        if let Some(s) = scenario {
            if !(1..=8).contains(&s) {
                return Err(Error::Config(format!("scenario must be 1-8, got {s}")));
            }
            self.scenario = s;
            if self.sigma_xi2_source == Source::Default {
                self.sigma_xi2 = DEFAULT_SIGMA_XI2[s as usize - 1];
            }
        }
        if let Some(r) = rho {
            self.rho = r;
        }
        self.validate()?;
        Ok(self)
    }

    /// Reads a TOML scenario file. Matrices are inline arrays of rows or a
    /// path to a headerless CSV, resolved relative to the file.
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base)
    }

    pub fn from_toml_str(text: &str, base: &Path) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(format!("scenario file: {e}")))?;
        let scenario = raw.scenario.unwrap_or(1);
        let rho = raw.rho.unwrap_or(0.8);
        if !(1..=8).contains(&scenario) {
            return Err(Error::Config(format!("scenario must be 1-8, got {scenario}")));
        }
        let mut cfg = Self::new(scenario, rho)?;
        if let Some(v) = raw.n_main {
            cfg.n_main = v;
        }
        if let Some(v) = raw.n_validation {
            cfg.n_validation = v;
        }
        if let Some(v) = raw.replicates {
            cfg.replicates = v;
        }
        if let Some(v) = raw.seed {
            cfg.seed = v;
        }
        if let Some(v) = raw.sigma_xi2 {
            cfg.sigma_xi2 = v;
            cfg.sigma_xi2_source = Source::Config;
        }
        match raw.mu {
            Some(MuSpec::Scalar(m)) => cfg.mu = DVector::from_element(P1, m),
            Some(MuSpec::Vector(v)) => cfg.mu = DVector::from_vec(v),
            None => {}
        }
        if let Some(m) = raw.sigma {
            cfg.sigma = m.load(base)?;
            cfg.sigma_source = Source::Config;
        }
        if let Some(m) = raw.err_corr {
            cfg.err_corr = m.load(base)?;
            cfg.err_corr_source = Source::Config;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    scenario: Option<u8>,
    rho: Option<f64>,
    #[serde(rename = "N")]
    n_main: Option<usize>,
    #[serde(rename = "n")]
    n_validation: Option<usize>,
    #[serde(rename = "R")]
    replicates: Option<usize>,
    mu: Option<MuSpec>,
    sigma: Option<MatrixSpec>,
    err_corr: Option<MatrixSpec>,
    sigma_xi2: Option<f64>,
    seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum MuSpec {
    Scalar(f64),
    Vector(Vec<f64>),
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum MatrixSpec {
    Inline(Vec<Vec<f64>>),
    Path(String),
}

impl MatrixSpec {
    fn load(self, base: &Path) -> Result<DMatrix<f64>> {
        let rows = match self {
            MatrixSpec::Inline(rows) => rows,
            MatrixSpec::Path(p) => read_matrix_csv(&base.join(p))?,
        };
        let nr = rows.len();
        let nc = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != nc) {
            return Err(Error::Config("matrix rows have different lengths".into()));
        }
        Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
    }
}

fn read_matrix_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_path(path)?;
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .enumerate()
            .map(|(j, s)| {
                s.parse::<f64>()
                    .map_err(|_| Error::Config(format!("{}: bad number {s:?} at row {}, column {}", path.display(), i + 1, j + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

fn sqrt_factor(a: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(c) = Cholesky::new(a.clone()) {
        return c.l();
    }
    let eig = symmetrize(a).symmetric_eigen();
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root)
}

fn draw_mvn(mu: &DVector<f64>, factor: &DMatrix<f64>, rng: &mut Rng, out: &mut [f64], z: &mut [f64]) {
    for v in z.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    let k = mu.len();
    for i in 0..k {
        let mut acc = mu[i];
        for (j, zj) in z.iter().enumerate().take(i + 1) {
            acc += factor[(i, j)] * zj;
        }
        // non-triangular fallback factors
        for (j, zj) in z.iter().enumerate().skip(i + 1) {
            acc += factor[(i, j)] * zj;
        }
        out[i] = acc;
    }
}

/// Share of `draws` untruncated MVN draws that are positive in every
/// component.
pub fn positivity_acceptance(mu: &DVector<f64>, sigma: &DMatrix<f64>, draws: usize, seed: u64) -> f64 {
    let factor = sqrt_factor(sigma);
    let mut rng = stream(seed, 7);
    let k = mu.len();
    let (mut out, mut z) = (vec![0.0; k], vec![0.0; k]);
    let mut hits = 0usize;
    for _ in 0..draws {
        draw_mvn(mu, &factor, &mut rng, &mut out, &mut z);
        if out.iter().all(|&v| v > 0.0) {
            hits += 1;
        }
    }
    hits as f64 / draws as f64
}

/// Rejection sampler for `MVN(mu, sigma)` restricted to the positive
/// orthant. Returns exactly `count` rows.
pub fn sample_truncated_mvn(mu: &DVector<f64>, sigma: &DMatrix<f64>, count: usize, seed: u64) -> Result<DMatrix<f64>> {
    if sigma.shape() != (mu.len(), mu.len()) {
        return Err(Error::DimensionMismatch("mean and covariance sizes differ".into()));
    }
    let acceptance = positivity_acceptance(mu, sigma, ACCEPTANCE_PILOT_DRAWS, child(seed, 0xACC));
    if acceptance < MIN_ACCEPTANCE {
        return Err(Error::InfeasibleTruncation { acceptance });
    }
    let factor = sqrt_factor(sigma);
    let mut rng = stream(seed, 1);
    Ok(truncated_rows(mu, &factor, count, &mut rng))
}

fn truncated_rows(mu: &DVector<f64>, factor: &DMatrix<f64>, count: usize, rng: &mut Rng) -> DMatrix<f64> {
    let k = mu.len();
    let mut m = DMatrix::zeros(count, k);
    let (mut out, mut z) = (vec![0.0; k], vec![0.0; k]);
    let mut filled = 0;
    while filled < count {
        draw_mvn(mu, factor, rng, &mut out, &mut z);
        if out.iter().all(|&v| v > 0.0) {
            for (j, v) in out.iter().enumerate() {
                m[(filled, j)] = *v;
            }
            filled += 1;
        }
    }
    m
}

/// Error SDs making each true-surrogate correlation equal `rho` under
/// classical error: `sd_x * sqrt(1 - rho^2) / rho`.
pub fn error_scales_for_rho(sd_x: &[f64], rho: f64) -> Vec<f64> {
    let f = (1.0 - rho * rho).max(0.0).sqrt() / rho;
    sd_x.iter().map(|s| s * f).collect()
}

fn logistic(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Confounding function of a scenario. `x2` holds the confounding
/// constituents, `w` is (age, binary covariate).
pub fn g_star(scenario: u8, x2: &[f64], w: &[f64]) -> f64 {
    match scenario {
        1 | 2 => 1.0 + 22.0 * x2[0],
        3 | 4 => 1.0 + 12.0 * (x2[0] + x2[1] + x2[2] + w[1]),
        5 | 6 => 1.0 + 16.0 * logistic(20.0 * x2[0] - 0.4),
        7 | 8 => {
            1.0 + 8.0 * logistic(20.0 * x2[0] - 0.4)
                + 8.0 * logistic(30.0 * x2[1] - 0.3)
                + 8.0 * logistic(500.0 * x2[2] - 0.02)
                + 8.0 * w[1]
        }
        _ => panic!("scenario must be 1-8"),
    }
}

/// Scenario with sampling factors and error scales resolved once.
#[derive(Debug, Clone)]
pub struct PreparedScenario {
    pub cfg: ScenarioConfig,
    pub exposure_sd: Vec<f64>,
    pub error_sd: Vec<f64>,
    pub acceptance: f64,
    x_factor: DMatrix<f64>,
    err_factor: DMatrix<f64>,
}

impl PreparedScenario {
    pub fn new(cfg: &ScenarioConfig) -> Result<Self> {
        cfg.validate()?;
        let acceptance = positivity_acceptance(&cfg.mu, &cfg.sigma, ACCEPTANCE_PILOT_DRAWS, child(PILOT_SEED, 0xACC));
        if acceptance < MIN_ACCEPTANCE {
            return Err(Error::InfeasibleTruncation { acceptance });
        }
        let x_factor = sqrt_factor(&cfg.sigma);
        let exposure_sd = pilot_exposure_sd(cfg, &x_factor);
        let error_sd = error_scales_for_rho(&exposure_sd, cfg.rho);
        let d = DMatrix::from_diagonal(&DVector::from_vec(error_sd.clone()));
        let sigma_eps = &d * &cfg.err_corr * &d;
        let err_factor = sqrt_factor(&symmetrize(&sigma_eps));
        Ok(Self {
            cfg: cfg.clone(),
            exposure_sd,
            error_sd,
            acceptance,
            x_factor,
            err_factor,
        })
    }

    /// Measurement-error covariance.
    pub fn sigma_eps(&self) -> DMatrix<f64> {
        &self.err_factor * self.err_factor.transpose()
    }
}

fn pilot_exposure_sd(cfg: &ScenarioConfig, factor: &DMatrix<f64>) -> Vec<f64> {
    let mut rng = stream(PILOT_SEED, 2);
    let x = truncated_rows(&cfg.mu, factor, ERROR_PILOT_DRAWS, &mut rng);
    let bern = Bernoulli::new(BERNOULLI_P).expect("valid probability");
    let mut wrng = stream(PILOT_SEED, 3);
    (0..P1)
        .map(|j| {
            let col: Vec<f64> = (0..ERROR_PILOT_DRAWS)
                .map(|i| {
                    let shift = if j == 0 && bern.sample(&mut wrng) { X1_W2_SHIFT } else { 0.0 };
                    x[(i, j)] + shift
                })
                .collect();
            sample_sd(&col)
        })
        .collect()
}

fn sample_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// One simulated dataset.
#[derive(Debug, Clone)]
pub struct GeneratedStudy {
    /// Main study with surrogate exposures.
    pub ms: MainStudy,
    /// True main-study exposures, for the oracle mode only.
    pub ms_true: DMatrix<f64>,
    /// Validation study (no outcome).
    pub evs: ValidationStudy,
}

impl GeneratedStudy {
    /// Main study carrying the true exposures.
    pub fn oracle_main(&self) -> Result<MainStudy> {
        MainStudy::new(self.ms.y().clone(), self.ms_true.clone(), self.ms.w().clone())
    }
}

struct Population {
    x: DMatrix<f64>,
    z: DMatrix<f64>,
    w: DMatrix<f64>,
}

fn draw_population(prep: &PreparedScenario, rows: usize, seed: u64) -> Population {
    let cfg = &prep.cfg;
    let mut x = truncated_rows(&cfg.mu, &prep.x_factor, rows, &mut stream(seed, 1));
    let mut wrng = stream(seed, 2);
    let age = Uniform::new(AGE_RANGE.0, AGE_RANGE.1).expect("valid range");
    let bern = Bernoulli::new(BERNOULLI_P).expect("valid probability");
    let mut w = DMatrix::zeros(rows, 2);
    for i in 0..rows {
        w[(i, 0)] = age.sample(&mut wrng);
        w[(i, 1)] = if bern.sample(&mut wrng) { 1.0 } else { 0.0 };
        x[(i, 0)] += X1_W2_SHIFT * w[(i, 1)];
    }
    let mut erng = stream(seed, 3);
    let zero = DVector::zeros(P1);
    let (mut e, mut buf) = (vec![0.0; P1], vec![0.0; P1]);
    let mut z = x.clone();
    for i in 0..rows {
        draw_mvn(&zero, &prep.err_factor, &mut erng, &mut e, &mut buf);
        for j in 0..P1 {
            z[(i, j)] += e[j];
        }
    }
    Population { x, z, w }
}

fn signal(scenario: u8, beta0: f64, x: &DMatrix<f64>, w: &DMatrix<f64>, i: usize) -> f64 {
    let x2: Vec<f64> = (1..P1).map(|j| x[(i, j)]).collect();
    beta0 * x[(i, 0)] + g_star(scenario, &x2, &[w[(i, 0)], w[(i, 1)]])
}

/// Draws a main study (first N rows) and validation study (next n rows).
pub fn generate_study(prep: &PreparedScenario, seed: u64) -> Result<GeneratedStudy> {
    let cfg = &prep.cfg;
    let total = cfg.n_main + cfg.n_validation;
    let pop = draw_population(prep, total, seed);
    let noise = Normal::new(0.0, cfg.sigma_xi2.sqrt()).map_err(|e| Error::Config(e.to_string()))?;
    let mut yrng = stream(seed, 4);
    let y = DVector::from_fn(cfg.n_main, |i, _| {
        signal(cfg.scenario, cfg.beta0, &pop.x, &pop.w, i) + noise.sample(&mut yrng)
    });
    let ms_rows: Vec<usize> = (0..cfg.n_main).collect();
    let vs_rows: Vec<usize> = (cfg.n_main..total).collect();
    let ms = MainStudy::new(y, pop.z.select_rows(&ms_rows), pop.w.select_rows(&ms_rows))?;
    let evs = ValidationStudy::new(
        pop.x.select_rows(&vs_rows),
        pop.z.select_rows(&vs_rows),
        pop.w.select_rows(&vs_rows),
    )?;
    Ok(GeneratedStudy {
        ms,
        ms_true: pop.x.select_rows(&ms_rows),
        evs,
    })
}

/// Noise variance giving share `TARGET_R2` of explained outcome variance,
/// from a pilot of `rows` draws.
pub fn calibrate_sigma_xi2(cfg: &ScenarioConfig, rows: usize, seed: u64) -> Result<f64> {
    let prep = PreparedScenario::new(cfg)?;
    let pop = draw_population(&prep, rows, seed);
    let s: Vec<f64> = (0..rows).map(|i| signal(cfg.scenario, cfg.beta0, &pop.x, &pop.w, i)).collect();
    let v = sample_sd(&s).powi(2);
    let r2 = TARGET_R2[cfg.scenario as usize - 1];
    Ok(v * (1.0 - r2) / r2)
}

/// Sample share of variance explained by the noiseless signal.
pub fn realized_r2(cfg: &ScenarioConfig, rows: usize, seed: u64) -> Result<f64> {
    let prep = PreparedScenario::new(cfg)?;
    let pop = draw_population(&prep, rows, seed);
    let noise = Normal::new(0.0, cfg.sigma_xi2.sqrt()).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = stream(seed, 4);
    let s: Vec<f64> = (0..rows).map(|i| signal(cfg.scenario, cfg.beta0, &pop.x, &pop.w, i)).collect();
    let y: Vec<f64> = s.iter().map(|v| v + noise.sample(&mut rng)).collect();
    Ok(sample_sd(&s).powi(2) / sample_sd(&y).powi(2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Slr,
    Dml,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Slr => "slr",
            Method::Dml => "dml",
        }
    }
}

/// All six estimator/mode pairs in report order.
pub fn all_methods() -> Vec<(Method, Mode)> {
    let mut v = Vec::new();
    for method in [Method::Slr, Method::Dml] {
        for mode in [Mode::True, Mode::Uncorrected, Mode::Corrected] {
            v.push((method, mode));
        }
    }
    v
}

/// Estimate and SE from one replicate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Draw {
    pub beta: f64,
    pub ase: f64,
    pub ci: [f64; 2],
}

impl From<&DmlEstimate> for Draw {
    fn from(e: &DmlEstimate) -> Self {
        Self {
            beta: e.beta,
            ase: e.ase,
            ci: e.ci95,
        }
    }
}

/// Runs every requested estimator on one generated study.
pub fn run_one(study: &GeneratedStudy, methods: &[(Method, Mode)], dml: &DmlConfig) -> Vec<Result<Draw>> {
    let needs_model = methods.iter().any(|(_, m)| *m == Mode::Corrected);
    let model = if needs_model {
        Some(CalibrationModel::fit(&study.evs, MeatRows::CompleteCase))
    } else {
        None
    };
    let oracle = if methods.iter().any(|(_, m)| *m == Mode::True) {
        Some(study.oracle_main())
    } else {
        None
    };
    methods
        .iter()
        .map(|&(method, mode)| {
            let ms = match mode {
                Mode::True => match oracle.as_ref().expect("oracle prepared") {
                    Ok(ms) => ms,
                    Err(e) => return Err(Error::InternalConsistency(e.to_string())),
                },
                _ => &study.ms,
            };
            let calib = match (mode, &model) {
                (Mode::Corrected, Some(Ok(m))) => Some(m),
                (Mode::Corrected, Some(Err(e))) => return Err(Error::InternalConsistency(format!("calibration: {e}"))),
                _ => None,
            };
            let est = match method {
                Method::Slr => slr_estimate(ms, calib, mode, dml.delta),
                Method::Dml => dml_estimate(ms, calib, dml, mode),
            }?;
            Ok(Draw::from(&est))
        })
        .collect()
}

/// Per-(method, mode) metrics over successful replicates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub scenario: u8,
    pub rho: f64,
    pub method: Method,
    pub mode: Mode,
    pub replicates: usize,
    pub failures: usize,
    pub relative_bias: f64,
    pub coverage: f64,
    pub ese: f64,
    pub ase_mean: f64,
    pub ase_ese_ratio: f64,
    pub bias_ratio: Option<f64>,
    pub mse_ratio: Option<f64>,
    pub degenerate_ase: usize,
}

/// Basic replicate statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DrawStats {
    pub count: usize,
    pub mean: f64,
    pub bias: f64,
    pub relative_bias: f64,
    pub mse: f64,
    pub ese: f64,
    pub ase_mean: f64,
    pub coverage: f64,
    pub degenerate_ase: usize,
}

fn is_degenerate(d: &Draw) -> bool {
    !(d.ase > 1e-12 * d.beta.abs().max(1.0))
}

/// Aggregates replicate draws against the true effect `beta0`. A draw with a
/// vanishing SE counts as covering only if it hits `beta0` to 1e-8.
pub fn draw_stats(draws: &[Draw], beta0: f64) -> DrawStats {
    let n = draws.len();
    let nf = n as f64;
    let mean = draws.iter().map(|d| d.beta).sum::<f64>() / nf;
    let bias = mean - beta0;
    let mse = draws.iter().map(|d| (d.beta - beta0).powi(2)).sum::<f64>() / nf;
    let ese = if n >= 2 {
        (draws.iter().map(|d| (d.beta - mean).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt()
    } else {
        f64::NAN
    };
    let ase_mean = draws.iter().map(|d| d.ase).sum::<f64>() / nf;
    let mut covered = 0usize;
    let mut degenerate = 0usize;
    for d in draws {
        if is_degenerate(d) {
            degenerate += 1;
            if (d.beta - beta0).abs() <= 1e-8 * beta0.abs().max(1.0) {
                covered += 1;
            }
        } else if d.ci[0] <= beta0 && beta0 <= d.ci[1] {
            covered += 1;
        }
    }
    DrawStats {
        count: n,
        mean,
        bias,
        relative_bias: bias / beta0,
        mse,
        ese,
        ase_mean,
        coverage: covered as f64 / nf,
        degenerate_ase: degenerate,
    }
}

/// Metric table for one scenario run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsSummary {
    pub rows: Vec<MetricRow>,
}

impl MetricsSummary {
    pub fn get(&self, method: Method, mode: Mode) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.method == method && r.mode == mode)
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::InternalConsistency(e.to_string()))
    }
}

/// Builds the metric table from per-replicate outcomes, indexed
/// `[replicate][method]`.
pub fn summarize(
    cfg: &ScenarioConfig,
    methods: &[(Method, Mode)],
    outcomes: &[Vec<Result<Draw>>],
) -> Result<MetricsSummary> {
    let total = outcomes.len();
    let mut stats = Vec::with_capacity(methods.len());
    for (k, _) in methods.iter().enumerate() {
        let draws: Vec<Draw> = outcomes.iter().filter_map(|o| o[k].as_ref().ok().copied()).collect();
        let failed = total - draws.len();
        if failed * 100 > total {
            return Err(Error::ReplicateFailures { failed, total });
        }
        if draws.is_empty() {
            return Err(Error::ReplicateFailures { failed, total });
        }
        stats.push((draw_stats(&draws, cfg.beta0), failed));
    }
    let rows = methods
        .iter()
        .enumerate()
        .map(|(k, &(method, mode))| {
            let (s, failures) = stats[k];
            let slr = methods.iter().position(|&(m, md)| m == Method::Slr && md == mode);
            let (bias_ratio, mse_ratio) = match (method, slr) {
                (Method::Dml, Some(j)) => (Some(s.bias / stats[j].0.bias), Some(s.mse / stats[j].0.mse)),
                _ => (None, None),
            };
            MetricRow {
                scenario: cfg.scenario,
                rho: cfg.rho,
                method,
                mode,
                replicates: s.count,
                failures,
                relative_bias: s.relative_bias,
                coverage: s.coverage,
                ese: s.ese,
                ase_mean: s.ase_mean,
                ase_ese_ratio: s.ase_mean / s.ese,
                bias_ratio,
                mse_ratio,
                degenerate_ase: s.degenerate_ase,
            }
        })
        .collect();
    Ok(MetricsSummary { rows })
}

/// Options of a replicate run.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub methods: Vec<(Method, Mode)>,
    pub dml: DmlConfig,
    /// Worker threads; `None` uses the global pool.
    pub threads: Option<usize>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            methods: all_methods(),
            dml: DmlConfig {
                delta: DEFAULT_DELTA,
                ..DmlConfig::default()
            },
            threads: None,
        }
    }
}

/// Runs `replicates` independent studies with seeds `base_seed ^ r`.
/// Results do not depend on the worker count.
pub fn run_replicates(cfg: &ScenarioConfig, replicates: usize, base_seed: u64, opts: &RunOptions) -> Result<MetricsSummary> {
    if replicates < 2 {
        return Err(Error::Config("at least two replicates are required".into()));
    }
    let prep = PreparedScenario::new(cfg)?;
    let job = |r: usize| -> Vec<Result<Draw>> {
        let seed = replicate_seed(base_seed, r as u64);
        match generate_study(&prep, seed) {
            Ok(study) => {
                let dml = DmlConfig {
                    seed: child(seed, 0xD3),
                    ..opts.dml.clone()
                };
                run_one(&study, &opts.methods, &dml)
            }
            Err(e) => opts.methods.iter().map(|_| Err(Error::InternalConsistency(e.to_string()))).collect(),
        }
    };
    let outcomes: Vec<Vec<Result<Draw>>> = match opts.threads {
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| Error::Config(e.to_string()))?;
            pool.install(|| (0..replicates).into_par_iter().map(job).collect())
        }
        None => (0..replicates).into_par_iter().map(job).collect(),
    };
    summarize(cfg, &opts.methods, &outcomes)
}

/// Metadata describing where scenario inputs came from.
#[derive(Debug, Clone, Serialize)]
pub struct RunMeta {
    pub scenario: u8,
    pub rho: f64,
    pub n_main: usize,
    pub n_validation: usize,
    pub replicates: usize,
    pub seed: u64,
    pub sigma_xi2: f64,
    pub sigma_source: Source,
    pub err_corr_source: Source,
    pub sigma_xi2_source: Source,
    pub exposure_sd: Vec<f64>,
    pub error_sd: Vec<f64>,
    pub truncation_acceptance: f64,
    pub constituents: Vec<&'static str>,
}

impl RunMeta {
    pub fn new(cfg: &ScenarioConfig, replicates: usize, seed: u64) -> Result<Self> {
        let prep = PreparedScenario::new(cfg)?;
        Ok(Self {
            scenario: cfg.scenario,
            rho: cfg.rho,
            n_main: cfg.n_main,
            n_validation: cfg.n_validation,
            replicates,
            seed,
            sigma_xi2: cfg.sigma_xi2,
            sigma_source: cfg.sigma_source,
            err_corr_source: cfg.err_corr_source,
            sigma_xi2_source: cfg.sigma_xi2_source,
            exposure_sd: prep.exposure_sd,
            error_sd: prep.error_sd,
            truncation_acceptance: prep.acceptance,
            constituents: CONSTITUENTS.to_vec(),
        })
    }
}
