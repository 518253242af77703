//! Nuisance learners: design expansion, least squares, and coordinate-descent
//! LASSO with a cross-validated penalty.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::PivotedCholesky;
use crate::split::make_folds;

/// Column layout of the confounder basis: other exposures, then covariates,
/// then (optionally) all pairwise products.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub exposure_names: Vec<String>,
    pub covariate_names: Vec<String>,
    pub interactions: bool,
}

impl DesignSpec {
    pub fn new(exposure_names: Vec<String>, covariate_names: Vec<String>, interactions: bool) -> Self {
        Self {
            exposure_names,
            covariate_names,
            interactions,
        }
    }

    /// Anonymous spec with generated names `x1..`, `w1..`.
    pub fn anonymous(p: usize, q: usize, interactions: bool) -> Self {
        Self::new(
            (1..=p).map(|i| format!("x{i}")).collect(),
            (1..=q).map(|i| format!("w{i}")).collect(),
            interactions,
        )
    }

    pub fn n_main(&self) -> usize {
        self.exposure_names.len() + self.covariate_names.len()
    }

    pub fn n_columns(&self) -> usize {
        let d = self.n_main();
        if self.interactions {
            d + d * d.saturating_sub(1) / 2
        } else {
            d
        }
    }

    pub fn column_names(&self) -> Vec<String> {
        let main: Vec<&String> = self
            .exposure_names
            .iter()
            .chain(self.covariate_names.iter())
            .collect();
        let mut names: Vec<String> = main.iter().map(|s| s.to_string()).collect();
        if self.interactions {
            for a in 0..main.len() {
                for b in (a + 1)..main.len() {
                    names.push(format!("{}:{}", main[a], main[b]));
                }
            }
        }
        names
    }

    /// Writes the basis row for `(x2, w)` into `out` (length `n_columns`).
    pub fn expand_into(&self, x2: &[f64], w: &[f64], out: &mut [f64]) {
        let p = x2.len();
        let d = p + w.len();
        out[..p].copy_from_slice(x2);
        out[p..d].copy_from_slice(w);
        if self.interactions {
            let mut pos = d;
            for a in 0..d {
                let va = out[a];
                for b in (a + 1)..d {
                    out[pos] = va * out[b];
                    pos += 1;
                }
            }
        }
    }
}

/// Main effects in input order, then pairwise products in lexicographic
/// index order when interactions are on.
pub fn expand_basis(spec: &DesignSpec, x2: &[f64], w: &[f64]) -> Result<Vec<f64>> {
    if x2.len() != spec.exposure_names.len() || w.len() != spec.covariate_names.len() {
        return Err(Error::DimensionMismatch(format!(
            "basis expects {} exposures and {} covariates, got {} and {}",
            spec.exposure_names.len(),
            spec.covariate_names.len(),
            x2.len(),
            w.len()
        )));
    }
    let mut out = vec![0.0; spec.n_columns()];
    spec.expand_into(x2, w, &mut out);
    Ok(out)
}

/// Expands every row of `(x2, w)`.
pub fn expand_matrix(spec: &DesignSpec, x2: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x2.nrows() != w.nrows() {
        return Err(Error::DimensionMismatch("basis inputs have different row counts".into()));
    }
    let cols = spec.n_columns();
    let mut out = DMatrix::zeros(x2.nrows(), cols);
    let mut buf = vec![0.0; cols];
    for i in 0..x2.nrows() {
        let xr: Vec<f64> = x2.row(i).iter().copied().collect();
        let wr: Vec<f64> = w.row(i).iter().copied().collect();
        if xr.len() != spec.exposure_names.len() || wr.len() != spec.covariate_names.len() {
            return Err(Error::DimensionMismatch("basis inputs do not match design spec".into()));
        }
        spec.expand_into(&xr, &wr, &mut buf);
        for c in 0..cols {
            out[(i, c)] = buf[c];
        }
    }
    Ok(out)
}

/// A linear prediction function on the original column scale.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub names: Vec<String>,
    /// Penalty used; 0 for least squares.
    pub lambda: f64,
    /// Per-column `(mean, scale)` applied before fitting.
    pub standardization: Vec<(f64, f64)>,
}

impl LinearFit {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.intercept
            + self
                .coefficients
                .iter()
                .zip(row)
                .map(|(c, x)| c * x)
                .sum::<f64>()
    }

    pub fn predict(&self, design: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_fn(design.nrows(), |i, _| {
            let mut v = self.intercept;
            for (c, coef) in self.coefficients.iter().enumerate() {
                v += coef * design[(i, c)];
            }
            v
        })
    }

    pub fn l1_norm(&self) -> f64 {
        self.coefficients.iter().map(|c| c.abs()).sum()
    }

    pub fn n_nonzero(&self) -> usize {
        self.coefficients.iter().filter(|&&c| c != 0.0).count()
    }

    /// Same fit with coefficients `a - scale * b` (intercepts likewise).
    pub fn combine(&self, other: &LinearFit, scale: f64) -> LinearFit {
        LinearFit {
            intercept: self.intercept - scale * other.intercept,
            coefficients: self
                .coefficients
                .iter()
                .zip(&other.coefficients)
                .map(|(a, b)| a - scale * b)
                .collect(),
            names: self.names.clone(),
            lambda: self.lambda,
            standardization: self.standardization.clone(),
        }
    }

    fn with_names(mut self, names: &[String]) -> Self {
        if names.len() == self.coefficients.len() {
            self.names = names.to_vec();
        }
        self
    }
}

impl Serialize for LinearFit {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Repr<'a> {
            intercept: f64,
            lambda: f64,
            coefficients: BTreeMap<&'a str, f64>,
        }
        Repr {
            intercept: self.intercept,
            lambda: self.lambda,
            coefficients: self
                .names
                .iter()
                .map(String::as_str)
                .zip(self.coefficients.iter().copied())
                .collect(),
        }
        .serialize(serializer)
    }
}

fn default_names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("c{i}")).collect()
}

fn check_xy(design: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
    if design.nrows() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "design has {} rows but response has {}",
            design.nrows(),
            y.len()
        )));
    }
    Ok(())
}

/// Ordinary least squares with intercept.
pub fn ols_fit(design: &DMatrix<f64>, y: &DVector<f64>) -> Result<LinearFit> {
    check_xy(design, y)?;
    let (n, k) = design.shape();
    if n <= k + 1 {
        return Err(Error::InsufficientSamples {
            block: None,
            available: n,
            required: k + 2,
        });
    }
    let problem = Standardized::new(design, y);
    let mut coef_std = vec![0.0; k];
    if k > 0 {
        if let Some(c) = problem.scales.iter().position(|&s| s == 0.0) {
            return Err(Error::SingularDesign {
                block: None,
                pivot: c,
                size: k,
            });
        }
        let chol = PivotedCholesky::new(&problem.gram).map_err(|e| Error::SingularDesign {
            block: None,
            pivot: e.pivot,
            size: e.size,
        })?;
        coef_std = chol.solve(&problem.xty).iter().copied().collect();
    }
    Ok(problem.to_fit(&coef_std, 0.0))
}

/// Stopping rule for coordinate descent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LassoOptions {
    pub max_sweeps: usize,
    /// Convergence threshold on the largest standardized coefficient change.
    pub tol: f64,
}

impl Default for LassoOptions {
    fn default() -> Self {
        Self {
            max_sweeps: 10_000,
            tol: 1e-8,
        }
    }
}

/// Minimizes `(1/2N)||y - b - X beta||^2 + lambda ||beta||_1` over
/// standardized columns; the intercept is unpenalized.
pub fn lasso_fit(design: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> Result<LinearFit> {
    lasso_fit_with(design, y, lambda, LassoOptions::default())
}

pub fn lasso_fit_with(
    design: &DMatrix<f64>,
    y: &DVector<f64>,
    lambda: f64,
    options: LassoOptions,
) -> Result<LinearFit> {
    check_xy(design, y)?;
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be nonnegative, got {lambda}")));
    }
    if design.nrows() < 2 {
        return Err(Error::InsufficientSamples {
            block: None,
            available: design.nrows(),
            required: 2,
        });
    }
    let problem = Standardized::new(design, y);
    let mut solver = CoordinateDescent::new(&problem);
    solver.solve(lambda, options)?;
    Ok(problem.to_fit(&solver.beta, lambda))
}

/// Largest penalty with a nonzero solution, `max_k |<x_k, y - ybar>| / N`
/// over standardized columns.
pub fn lambda_max(design: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    Standardized::new(design, y).lambda_max()
}

/// `count` log-spaced penalties from `top` down to `ratio * top`.
pub fn log_grid(top: f64, ratio: f64, count: usize) -> Vec<f64> {
    if count <= 1 || top <= 0.0 {
        return vec![top.max(0.0)];
    }
    let lo = (top * ratio).ln();
    let hi = top.ln();
    (0..count)
        .map(|i| (hi + (lo - hi) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

/// Penalty-selection settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoCvConfig {
    pub folds: usize,
    pub grid_size: usize,
    /// Smallest grid value as a fraction of `lambda_max`.
    pub grid_ratio: f64,
    pub options: LassoOptions,
}

impl Default for LassoCvConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            grid_size: 100,
            grid_ratio: 1e-3,
            options: LassoOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LassoCvResult {
    pub lambda: f64,
    pub fit: LinearFit,
    pub grid: Vec<f64>,
    /// Mean out-of-fold squared error per grid value.
    pub cv_error: Vec<f64>,
}

/// Picks the penalty minimizing mean out-of-fold squared error over a seeded
/// fold split, then refits on all rows. Ties go to the larger penalty.
pub fn lasso_cv(
    design: &DMatrix<f64>,
    y: &DVector<f64>,
    folds: usize,
    grid: Option<&[f64]>,
    seed: u64,
) -> Result<LassoCvResult> {
    let cfg = LassoCvConfig {
        folds,
        ..LassoCvConfig::default()
    };
    lasso_cv_with(design, y, &cfg, grid, seed)
}

pub fn lasso_cv_with(
    design: &DMatrix<f64>,
    y: &DVector<f64>,
    cfg: &LassoCvConfig,
    grid: Option<&[f64]>,
    seed: u64,
) -> Result<LassoCvResult> {
    check_xy(design, y)?;
    let grid: Vec<f64> = match grid {
        Some(g) => {
            if g.is_empty() {
                return Err(Error::Config("penalty grid is empty".into()));
            }
            if g.windows(2).any(|w| w[0] < w[1]) || g.iter().any(|&l| !(l >= 0.0)) {
                return Err(Error::Config("penalty grid must be nonnegative and descending".into()));
            }
            g.to_vec()
        }
        None => log_grid(lambda_max(design, y), cfg.grid_ratio, cfg.grid_size),
    };
    let plan = make_folds(design.nrows(), cfg.folds, seed)?;

    let mut sse = vec![0.0; grid.len()];
    for fold in 0..plan.k {
        let train = plan.complement_rows(fold);
        let test = plan.fold_rows(fold);
        let problem = Standardized::new(&design.select_rows(&train), &y.select_rows(&train));
        let test_x = design.select_rows(&test);
        let test_y = y.select_rows(&test);
        let mut solver = CoordinateDescent::new(&problem);
        for (g, &lambda) in grid.iter().enumerate() {
            solver.solve(lambda, cfg.options)?;
            let pred = problem.to_fit(&solver.beta, lambda).predict(&test_x);
            sse[g] += (&test_y - pred).norm_squared();
        }
    }
    let n = design.nrows() as f64;
    let cv_error: Vec<f64> = sse.iter().map(|s| s / n).collect();
    let mut best = 0;
    for g in 1..grid.len() {
        if cv_error[g] < cv_error[best] {
            best = g;
        }
    }

    let problem = Standardized::new(design, y);
    let mut solver = CoordinateDescent::new(&problem);
    for &lambda in &grid[..=best] {
        solver.solve(lambda, cfg.options)?;
    }
    let fit = problem.to_fit(&solver.beta, grid[best]);
    Ok(LassoCvResult {
        lambda: grid[best],
        fit,
        grid,
        cv_error,
    })
}

/// Which learner fits the nuisance regressions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerConfig {
    LassoCv(LassoCvConfig),
    Ols,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig::LassoCv(LassoCvConfig::default())
    }
}

impl LearnerConfig {
    pub fn fit(&self, design: &DMatrix<f64>, y: &DVector<f64>, names: &[String], seed: u64) -> Result<LinearFit> {
        let fit = match self {
            LearnerConfig::LassoCv(cfg) => lasso_cv_with(design, y, cfg, None, seed)?.fit,
            LearnerConfig::Ols => ols_fit(design, y)?,
        };
        Ok(fit.with_names(names))
    }
}

/// Centered, unit-scaled copy of a regression problem, stored as its Gram
/// matrix (covariance updates).
struct Standardized {
    means: Vec<f64>,
    /// Population SD (1/N); 0 marks a constant column.
    scales: Vec<f64>,
    y_mean: f64,
    /// `X_s^T X_s / N`
    gram: DMatrix<f64>,
    /// `X_s^T (y - ybar) / N`
    xty: DVector<f64>,
    n_cols: usize,
}

impl Standardized {
    fn new(design: &DMatrix<f64>, y: &DVector<f64>) -> Self {
        let (n, k) = design.shape();
        let nf = n as f64;
        let y_mean = y.mean();
        let means: Vec<f64> = (0..k).map(|c| design.column(c).mean()).collect();
        let scales: Vec<f64> = (0..k)
            .map(|c| {
                let m = means[c];
                let var = design.column(c).iter().map(|v| (v - m) * (v - m)).sum::<f64>() / nf;
                let sd = var.sqrt();
                // constant up to rounding
                if sd <= 1e-12 * m.abs().max(1.0) {
                    0.0
                } else {
                    sd
                }
            })
            .collect();
        let mut xs = DMatrix::zeros(n, k);
        for c in 0..k {
            if scales[c] > 0.0 {
                for i in 0..n {
                    xs[(i, c)] = (design[(i, c)] - means[c]) / scales[c];
                }
            }
        }
        let yc = y.add_scalar(-y_mean);
        let gram = xs.tr_mul(&xs) / nf;
        let xty = xs.tr_mul(&yc) / nf;
        Self {
            means,
            scales,
            y_mean,
            gram,
            xty,
            n_cols: k,
        }
    }

    fn lambda_max(&self) -> f64 {
        self.xty.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    fn to_fit(&self, beta_std: &[f64], lambda: f64) -> LinearFit {
        let coefficients: Vec<f64> = (0..self.n_cols)
            .map(|c| {
                if self.scales[c] > 0.0 {
                    beta_std[c] / self.scales[c]
                } else {
                    0.0
                }
            })
            .collect();
        let intercept = self.y_mean
            - coefficients
                .iter()
                .zip(&self.means)
                .map(|(b, m)| b * m)
                .sum::<f64>();
        LinearFit {
            intercept,
            coefficients,
            names: default_names(self.n_cols),
            lambda,
            standardization: self.means.iter().copied().zip(self.scales.iter().copied()).collect(),
        }
    }
}

/// Cyclic coordinate descent state; `beta` persists between calls so a
/// descending penalty path is warm-started.
struct CoordinateDescent<'a> {
    problem: &'a Standardized,
    beta: Vec<f64>,
    /// `xty - gram * beta`
    grad: Vec<f64>,
}

impl<'a> CoordinateDescent<'a> {
    fn new(problem: &'a Standardized) -> Self {
        Self {
            problem,
            beta: vec![0.0; problem.n_cols],
            grad: problem.xty.iter().copied().collect(),
        }
    }

    fn solve(&mut self, lambda: f64, options: LassoOptions) -> Result<usize> {
        let k = self.problem.n_cols;
        let gram = &self.problem.gram;
        let active: Vec<usize> = (0..k).filter(|&c| self.problem.scales[c] > 0.0).collect();
        let mut max_change = f64::INFINITY;
        for sweep in 1..=options.max_sweeps {
            max_change = 0.0;
            for &c in &active {
                let diag = gram[(c, c)];
                let z = self.grad[c] + diag * self.beta[c];
                let updated = soft_threshold(z, lambda) / diag;
                let delta = updated - self.beta[c];
                if delta != 0.0 {
                    self.beta[c] = updated;
                    let col = gram.column(c);
                    for (g, gc) in self.grad.iter_mut().zip(col.iter()) {
                        *g -= gc * delta;
                    }
                    max_change = max_change.max(delta.abs());
                }
            }
            if max_change < options.tol {
                return Ok(sweep);
            }
            let pattern: Vec<i8> = self.beta.iter().map(|b| b.signum() as i8 * (*b != 0.0) as i8).collect();
            self.try_active_set_solve(lambda, &pattern);
        }
        Err(Error::Convergence {
            iterations: options.max_sweeps,
            max_change,
        })
    }

    /// Primal active-set polish on the current support with signs held
    /// fixed: solve `G_AA beta_A = xty_A - lambda sign_A`, step toward it,
    /// and drop the first coefficient that would cross zero. Every step
    /// lowers the objective; the sweep loop still decides convergence.
    fn try_active_set_solve(&mut self, lambda: f64, pattern: &[i8]) {
        let gram = &self.problem.gram;
        let mut support: Vec<usize> = (0..pattern.len()).filter(|&c| pattern[c] != 0).collect();
        while !support.is_empty() {
            let g = DMatrix::from_fn(support.len(), support.len(), |a, b| gram[(support[a], support[b])]);
            let rhs = DVector::from_fn(support.len(), |a, _| {
                self.problem.xty[support[a]] - lambda * pattern[support[a]] as f64
            });
            let Some(chol) = nalgebra::Cholesky::new(g) else {
                break;
            };
            let sol = chol.solve(&rhs);
            if sol.iter().any(|v| !v.is_finite()) {
                break;
            }
            let mut step = 1.0;
            let mut blocking = None;
            for (a, (&c, v)) in support.iter().zip(sol.iter()).enumerate() {
                if v * pattern[c] as f64 <= 0.0 {
                    let t = self.beta[c] / (self.beta[c] - v);
                    if t < step {
                        step = t;
                        blocking = Some(a);
                    }
                }
            }
            for (&c, v) in support.iter().zip(sol.iter()) {
                self.beta[c] += step * (v - self.beta[c]);
            }
            match blocking {
                Some(a) => {
                    self.beta[support[a]] = 0.0;
                    support.remove(a);
                }
                None => break,
            }
        }
        let k = self.problem.n_cols;
        for r in 0..k {
            let mut acc = self.problem.xty[r];
            for c in (0..k).filter(|&c| self.beta[c] != 0.0) {
                acc -= gram[(r, c)] * self.beta[c];
            }
            self.grad[r] = acc;
        }
    }
}

fn soft_threshold(z: f64, gamma: f64) -> f64 {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}
