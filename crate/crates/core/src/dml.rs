//! Cross-fit orthogonalized estimation of the exposure effect in the
//! partially linear model `Y = X1 * beta + g(X2, W) + xi`.
//!
//! Exposures are used as given (`Mode::True`, `Mode::Uncorrected`) or first
//! replaced by calibrated predictions (`Mode::Corrected`). In corrected mode
//! the variance gains a second component that propagates the calibration
//! parameter covariance through a forward-difference derivative of the score.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use libm::erfc;

use crate::calibration::{CalibrationDims, CalibrationModel};
use crate::error::{Error, Result};
use crate::learners::{expand_matrix, ols_fit, DesignSpec, LearnerConfig, LinearFit};
use crate::rng::child;
pub use crate::split::{make_folds, SplitPlan};

/// Two-sided 95% normal quantile.
pub const Z_975: f64 = 1.959964;

/// Default finite-difference step for the score derivative.
pub const DEFAULT_DELTA: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// True exposures (simulation oracle).
    True,
    /// Surrogates used as if they were true exposures.
    Uncorrected,
    /// Surrogates replaced by calibrated predictions.
    Corrected,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::True => "true",
            Mode::Uncorrected => "uncorrected",
            Mode::Corrected => "corrected",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Outcome, exposures (column 0 is the exposure of interest) and error-free
/// covariates for the main study.
#[derive(Debug, Clone)]
pub struct MainStudy {
    y: DVector<f64>,
    exposures: DMatrix<f64>,
    w: DMatrix<f64>,
}

impl MainStudy {
    pub fn new(y: DVector<f64>, exposures: DMatrix<f64>, w: DMatrix<f64>) -> Result<Self> {
        let n = y.len();
        if exposures.nrows() != n || w.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "main study rows differ: Y {n}, exposures {}, W {}",
                exposures.nrows(),
                w.nrows()
            )));
        }
        if exposures.ncols() == 0 {
            return Err(Error::DimensionMismatch("main study needs at least one exposure".into()));
        }
        if y.iter().chain(exposures.iter()).chain(w.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Data("main study must be complete and finite".into()));
        }
        Ok(Self { y, exposures, w })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn exposures(&self) -> &DMatrix<f64> {
        &self.exposures
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn n_exposures(&self) -> usize {
        self.exposures.ncols()
    }

    pub fn n_covariates(&self) -> usize {
        self.w.ncols()
    }

    /// Working exposures for a mode: the stored matrix, or calibrated
    /// predictions from it.
    pub fn working_exposures(&self, mode: Mode, model: Option<&CalibrationModel>) -> Result<DMatrix<f64>> {
        match (mode, model) {
            (Mode::Corrected, Some(m)) => m.predict_matrix(&self.exposures, &self.w),
            (Mode::Corrected, None) => Err(Error::Config("corrected mode needs a calibration model".into())),
            _ => Ok(self.exposures.clone()),
        }
    }
}

/// Estimator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmlConfig {
    pub folds: usize,
    pub seed: u64,
    pub learner: LearnerConfig,
    pub interactions: bool,
    pub delta: f64,
    pub outcome: OutcomeNuisance,
}

impl Default for DmlConfig {
    fn default() -> Self {
        Self {
            folds: 2,
            seed: 0,
            learner: LearnerConfig::default(),
            interactions: false,
            delta: DEFAULT_DELTA,
            outcome: OutcomeNuisance::default(),
        }
    }
}

impl DmlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=10).contains(&self.folds) {
            return Err(Error::Config(format!("fold count must be in 2..=10, got {}", self.folds)));
        }
        if !(self.delta > 0.0) {
            return Err(Error::Config("finite-difference step must be positive".into()));
        }
        Ok(())
    }
}

/// How the outcome nuisance `g` is obtained from the training rows.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeNuisance {
    /// Learner fit of `Y - beta_pre * X1` on the basis.
    Refit,
    /// `l - beta_pre * m`, reusing the outcome and exposure fits.
    #[default]
    Combined,
    /// The plain outcome regression `E[Y | basis]`.
    Reduced,
    /// Basis part of a joint fit of `Y` on `(X1, basis)` with `X1`
    /// unpenalized.
    Joint,
}

/// Outcome and exposure nuisance fits trained off one estimation fold.
///
/// `g_hat` targets the structural confounding function, i.e. it regresses
/// `Y - beta_pre * X1` on the basis where `beta_pre` is a partialling-out
/// estimate computed on the training rows. `l_hat` is the plain outcome
/// regression used to obtain `beta_pre`.
#[derive(Debug, Clone, Serialize)]
pub struct NuisancePair {
    pub fold: usize,
    pub g_hat: LinearFit,
    pub m_hat: LinearFit,
    pub l_hat: LinearFit,
    pub preliminary_beta: f64,
}

impl NuisancePair {
    /// Pair with a fixed structural `g` and exposure model `m`.
    pub fn from_fits(fold: usize, g_hat: LinearFit, m_hat: LinearFit) -> Self {
        Self {
            fold,
            l_hat: g_hat.clone(),
            g_hat,
            m_hat,
            preliminary_beta: 0.0,
        }
    }
}

/// Fits the nuisance regressions on `train_rows` of a precomputed basis.
pub fn fit_nuisances(
    train_rows: &[usize],
    fold: usize,
    y: &DVector<f64>,
    x1: &DVector<f64>,
    basis: &DMatrix<f64>,
    names: &[String],
    learner: &LearnerConfig,
    outcome: OutcomeNuisance,
    seed: u64,
) -> Result<NuisancePair> {
    let b = basis.select_rows(train_rows);
    let yt = y.select_rows(train_rows);
    let xt = x1.select_rows(train_rows);
    let m_hat = learner.fit(&b, &xt, names, child(seed, 2))?;
    if outcome == OutcomeNuisance::Joint {
        let (g_hat, preliminary_beta) = joint_outcome_fit(&b, &yt, &xt, names, learner, child(seed, 1))?;
        return Ok(NuisancePair {
            fold,
            l_hat: g_hat.clone(),
            g_hat,
            m_hat,
            preliminary_beta,
        });
    }
    let l_hat = learner.fit(&b, &yt, names, child(seed, 1))?;
    let v = &xt - m_hat.predict(&b);
    let u = &yt - l_hat.predict(&b);
    let vv = v.norm_squared();
    let preliminary_beta = if vv > 0.0 { v.dot(&u) / vv } else { 0.0 };
    let g_hat = match outcome {
        OutcomeNuisance::Refit => {
            let target = &yt - &xt * preliminary_beta;
            learner.fit(&b, &target, names, child(seed, 3))?
        }
        OutcomeNuisance::Combined => l_hat.combine(&m_hat, preliminary_beta),
        OutcomeNuisance::Reduced => l_hat.clone(),
        OutcomeNuisance::Joint => unreachable!(),
    };
    Ok(NuisancePair {
        fold,
        g_hat,
        m_hat,
        l_hat,
        preliminary_beta,
    })
}

/// Fits `Y ~ a + X1 beta + basis gamma` with only `gamma` penalized. With
/// `(1, X1)` unpenalized the problem reduces to the learner applied after
/// partialling `(1, X1)` out of `Y` and every basis column.
fn joint_outcome_fit(
    basis: &DMatrix<f64>,
    y: &DVector<f64>,
    x1: &DVector<f64>,
    names: &[String],
    learner: &LearnerConfig,
    seed: u64,
) -> Result<(LinearFit, f64)> {
    let xc = x1.add_scalar(-x1.mean());
    let sxx = xc.norm_squared();
    if !(sxx > 0.0) {
        return Err(Error::DegenerateOrthogonalization {
            fold: 0,
            denominator: sxx,
        });
    }
    let resid = |v: DVector<f64>| -> DVector<f64> {
        let vc = v.add_scalar(-v.mean());
        let slope = xc.dot(&vc) / sxx;
        vc - &xc * slope
    };
    let mut bt = DMatrix::zeros(basis.nrows(), basis.ncols());
    for c in 0..basis.ncols() {
        bt.set_column(c, &resid(basis.column(c).into_owned()));
    }
    let partial = learner.fit(&bt, &resid(y.clone()), names, seed)?;
    // recover the unpenalized part on the original scale
    let gamma = &partial.coefficients;
    let rest = DVector::from_fn(y.len(), |i, _| {
        y[i] - gamma.iter().enumerate().map(|(c, g)| g * basis[(i, c)]).sum::<f64>()
    });
    let rc = rest.add_scalar(-rest.mean());
    let beta = xc.dot(&rc) / sxx;
    let intercept = rest.mean() - beta * x1.mean();
    let g = LinearFit {
        intercept,
        coefficients: gamma.clone(),
        names: partial.names.clone(),
        lambda: partial.lambda,
        standardization: partial.standardization.clone(),
    };
    Ok((g, beta))
}

/// `[sum X1 (X1 - m)]^{-1} sum (X1 - m)(Y - g)` over `fold_rows`.
pub fn orthogonal_beta(
    fold_rows: &[usize],
    y: &DVector<f64>,
    x1: &DVector<f64>,
    basis: &DMatrix<f64>,
    pair: &NuisancePair,
) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    let mut scale = 0.0;
    let mut row = vec![0.0; basis.ncols()];
    for &i in fold_rows {
        for (c, r) in row.iter_mut().enumerate() {
            *r = basis[(i, c)];
        }
        let v = x1[i] - pair.m_hat.predict_row(&row);
        num += v * (y[i] - pair.g_hat.predict_row(&row));
        den += x1[i] * v;
        scale += x1[i] * x1[i];
    }
    if !(den.abs() >= 1e-10 * scale) || den == 0.0 {
        return Err(Error::DegenerateOrthogonalization {
            fold: pair.fold,
            denominator: den,
        });
    }
    Ok(num / den)
}

/// Per-observation score `(x1 - m(b)) (y - x1 beta - g(b))` with
/// `b = basis(x2, w)`.
pub fn score_from_exposures(
    y: f64,
    xhat: &[f64],
    w: &[f64],
    beta: f64,
    pair: &NuisancePair,
    spec: &DesignSpec,
    buf: &mut Vec<f64>,
) -> f64 {
    buf.resize(spec.n_columns(), 0.0);
    spec.expand_into(&xhat[1..], w, buf);
    let x1 = xhat[0];
    (x1 - pair.m_hat.predict_row(buf)) * (y - x1 * beta - pair.g_hat.predict_row(buf))
}

/// Score of one main-study observation with exposures recomputed from
/// `theta`, so perturbations of `theta` flow through the predictions.
pub fn score_i(
    y: f64,
    z: &[f64],
    w: &[f64],
    beta: f64,
    theta: &DVector<f64>,
    dims: CalibrationDims,
    pair: &NuisancePair,
    spec: &DesignSpec,
) -> Result<f64> {
    if z.len() != dims.n_exposures() || w.len() != dims.q || theta.len() != dims.theta_len() {
        return Err(Error::DimensionMismatch("score inputs do not match calibration dims".into()));
    }
    let l = design_vec(z, w);
    let d = dims.design_len();
    let xhat: Vec<f64> = (0..dims.n_exposures())
        .map(|j| block_dot(&theta.as_slice()[j * d..(j + 1) * d], &l))
        .collect();
    let mut buf = Vec::new();
    Ok(score_from_exposures(y, &xhat, w, beta, pair, spec, &mut buf))
}

fn design_vec(z: &[f64], w: &[f64]) -> Vec<f64> {
    let mut l = Vec::with_capacity(1 + z.len() + w.len());
    l.push(1.0);
    l.extend_from_slice(z);
    l.extend_from_slice(w);
    l
}

fn block_dot(block: &[f64], l: &[f64]) -> f64 {
    block.iter().zip(l).fold(0.0, |acc, (t, v)| acc + t * v)
}

/// Nuisances and fold assignment from a cross-fit run. Observation `i` is
/// scored with `pairs[plan.assignment[i]]`. With `center` set, the exposure
/// of interest enters the score minus its main-study mean, and that mean is
/// recomputed whenever the calibration parameters move.
#[derive(Debug, Clone)]
pub struct CrossFit {
    pub plan: SplitPlan,
    pub pairs: Vec<NuisancePair>,
    pub center: bool,
}

impl CrossFit {
    pub fn pair_for(&self, row: usize) -> &NuisancePair {
        &self.pairs[self.plan.assignment[row]]
    }
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Forward-difference derivative of the mean score with respect to every
/// calibration parameter:
/// `[(1/N) sum S(theta + delta e_j) - (1/N) sum S(theta)] / delta`.
/// Nuisances stay fixed; each observation uses its fold's pair.
pub fn numeric_score_gradient(
    ms: &MainStudy,
    beta: f64,
    model: &CalibrationModel,
    crossfit: &CrossFit,
    spec: &DesignSpec,
    delta: f64,
) -> Result<DVector<f64>> {
    if !(delta > 0.0) {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let dims = model.dims();
    if ms.n_exposures() != dims.n_exposures() || ms.n_covariates() != dims.q {
        return Err(Error::DimensionMismatch("main study does not match calibration dims".into()));
    }
    let n = ms.n();
    let d = dims.design_len();
    let e = dims.n_exposures();
    let theta = model.theta();
    let z_rows = rows_of(ms.exposures());
    let w_rows = rows_of(ms.w());
    let l_rows: Vec<Vec<f64>> = (0..n).map(|i| design_vec(&z_rows[i], &w_rows[i])).collect();
    let mut xhat: Vec<Vec<f64>> = l_rows
        .iter()
        .map(|l| (0..e).map(|j| block_dot(&theta.as_slice()[j * d..(j + 1) * d], l)).collect())
        .collect();
    let center = |xhat: &[Vec<f64>]| -> f64 {
        if crossfit.center {
            xhat.iter().map(|r| r[0]).sum::<f64>() / n as f64
        } else {
            0.0
        }
    };
    let c0 = center(&xhat);
    for r in xhat.iter_mut() {
        r[0] -= c0;
    }
    let mut fresh = vec![0.0; n];

    let mut buf = Vec::new();
    let mut base = Vec::with_capacity(n);
    for i in 0..n {
        base.push(score_from_exposures(
            ms.y[i],
            &xhat[i],
            &w_rows[i],
            beta,
            crossfit.pair_for(i),
            spec,
            &mut buf,
        ));
    }
    let base_mean = mean_ordered(&base);

    let mut grad = DVector::zeros(dims.theta_len());
    let mut block = vec![0.0; d];
    for j in 0..dims.theta_len() {
        let b = j / d;
        block.copy_from_slice(&theta.as_slice()[b * d..(b + 1) * d]);
        block[j % d] += delta;
        for (i, f) in fresh.iter_mut().enumerate() {
            *f = block_dot(&block, &l_rows[i]);
        }
        let shift = if b == 0 && crossfit.center {
            fresh.iter().sum::<f64>() / n as f64
        } else {
            0.0
        };
        let mut total = 0.0;
        for i in 0..n {
            let saved = xhat[i][b];
            xhat[i][b] = fresh[i] - shift;
            total += score_from_exposures(
                ms.y[i],
                &xhat[i],
                &w_rows[i],
                beta,
                crossfit.pair_for(i),
                spec,
                &mut buf,
            );
            xhat[i][b] = saved;
        }
        grad[j] = (total / n as f64 - base_mean) / delta;
    }
    Ok(grad)
}

fn mean_ordered(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Variance of the cross-fit estimator:
/// `J^{-2} [ (1/N^2) sum S_i^2 + grad^T Var(theta) grad ]`
/// with `J = (1/N) sum X1 (X1 - m)`. The second component is zero when no
/// calibration model is supplied.
pub fn variance_total(
    ms: &MainStudy,
    xhat: &DMatrix<f64>,
    beta_hat: f64,
    model: Option<&CalibrationModel>,
    crossfit: &CrossFit,
    spec: &DesignSpec,
    delta: f64,
) -> Result<(f64, (f64, f64))> {
    let n = ms.n();
    let nf = n as f64;
    let rows = rows_of(xhat);
    let w_rows = rows_of(ms.w());
    let mut buf = Vec::new();
    let mut jac = 0.0;
    let mut ss = 0.0;
    for i in 0..n {
        let pair = crossfit.pair_for(i);
        buf.resize(spec.n_columns(), 0.0);
        spec.expand_into(&rows[i][1..], &w_rows[i], &mut buf);
        let x1 = rows[i][0];
        let v = x1 - pair.m_hat.predict_row(&buf);
        let s = v * (ms.y[i] - x1 * beta_hat - pair.g_hat.predict_row(&buf));
        jac += x1 * v;
        ss += s * s;
    }
    jac /= nf;
    let c1 = ss / (nf * nf);
    let c2 = match model {
        None => 0.0,
        Some(m) => {
            let g = numeric_score_gradient(ms, beta_hat, m, crossfit, spec, delta)?;
            let v = m.var_theta();
            let quad = (g.transpose() * v * &g)[(0, 0)];
            let tol = 1e-10 * g.norm_squared() * v.trace().abs();
            if quad < -tol {
                return Err(Error::InternalConsistency(format!(
                    "negative calibration variance component {quad:e}"
                )));
            }
            quad.max(0.0)
        }
    };
    if jac == 0.0 || !jac.is_finite() {
        return Err(Error::DegenerateOrthogonalization {
            fold: 0,
            denominator: jac,
        });
    }
    Ok(((c1 + c2) / (jac * jac), (c1, c2)))
}

/// Settings echoed into serialized estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateConfig {
    pub estimator: String,
    pub folds: usize,
    pub seed: u64,
    pub interactions: bool,
    pub delta: f64,
    pub learner: String,
    pub basis_columns: usize,
}

/// Per-fold record of a cross-fit run.
#[derive(Debug, Clone, Serialize)]
pub struct FoldDiagnostics {
    pub fold: usize,
    pub n_train: usize,
    pub n_estimate: usize,
    pub beta: f64,
    pub g_hat: LinearFit,
    pub m_hat: LinearFit,
}

/// Point estimate, asymptotic SE and inference for one estimator run.
#[derive(Debug, Clone, Serialize)]
pub struct DmlEstimate {
    pub mode: Mode,
    pub beta: f64,
    pub ase: f64,
    pub ci95: [f64; 2],
    #[serde(rename = "p")]
    pub p_value: f64,
    pub per_fold: Vec<f64>,
    pub var_components: [f64; 2],
    pub config: EstimateConfig,
    pub diagnostics: Vec<FoldDiagnostics>,
}

impl DmlEstimate {
    fn assemble(
        mode: Mode,
        beta: f64,
        var: f64,
        components: (f64, f64),
        per_fold: Vec<f64>,
        config: EstimateConfig,
        diagnostics: Vec<FoldDiagnostics>,
    ) -> Self {
        let ase = var.max(0.0).sqrt();
        Self {
            mode,
            beta,
            ase,
            ci95: [beta - Z_975 * ase, beta + Z_975 * ase],
            p_value: two_sided_p(beta, ase),
            per_fold,
            var_components: [components.0, components.1],
            config,
            diagnostics,
        }
    }

    pub fn covers(&self, value: f64) -> bool {
        self.ci95[0] <= value && value <= self.ci95[1]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// `2 (1 - Phi(|beta| / ase))`.
pub fn two_sided_p(beta: f64, ase: f64) -> f64 {
    if ase > 0.0 {
        erfc((beta / ase).abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn learner_label(learner: &LearnerConfig) -> String {
    match learner {
        LearnerConfig::LassoCv(c) => format!("lasso_cv(folds={},grid={})", c.folds, c.grid_size),
        LearnerConfig::Ols => "ols".into(),
    }
}

fn design_spec(ms: &MainStudy, interactions: bool) -> DesignSpec {
    DesignSpec::anonymous(ms.n_exposures() - 1, ms.n_covariates(), interactions)
}

/// Cross-fit DML estimate of the effect of exposure 0.
///
/// The exposure of interest is centered at its main-study mean first. The
/// model is unchanged (the shift moves into `g`), but the uncentered
/// denominator `sum X1 (X1 - m)` would otherwise scale fold-level mean
/// shifts of `X1 - m` by the exposure level.
pub fn dml_estimate(
    ms: &MainStudy,
    model: Option<&CalibrationModel>,
    cfg: &DmlConfig,
    mode: Mode,
) -> Result<DmlEstimate> {
    let spec = design_spec(ms, cfg.interactions);
    dml_estimate_with_spec(ms, model, cfg, mode, &spec)
}

/// As [`dml_estimate`] with explicit basis column names.
pub fn dml_estimate_with_spec(
    ms: &MainStudy,
    model: Option<&CalibrationModel>,
    cfg: &DmlConfig,
    mode: Mode,
    spec: &DesignSpec,
) -> Result<DmlEstimate> {
    cfg.validate()?;
    check_spec(ms, spec)?;
    let mut xhat = ms.working_exposures(mode, model)?;
    let shift = xhat.column(0).mean();
    xhat.column_mut(0).add_scalar_mut(-shift);
    let x1 = xhat.column(0).into_owned();
    let x2 = xhat.columns(1, xhat.ncols() - 1).into_owned();
    let basis = expand_matrix(spec, &x2, ms.w())?;
    let names = spec.column_names();
    let plan = make_folds(ms.n(), cfg.folds, child(cfg.seed, 0xF01D))?;

    let mut pairs = Vec::with_capacity(plan.k);
    let mut per_fold = Vec::with_capacity(plan.k);
    let mut diagnostics = Vec::with_capacity(plan.k);
    for fold in 0..plan.k {
        let train = plan.complement_rows(fold);
        let est = plan.fold_rows(fold);
        let pair = fit_nuisances(
            &train,
            fold,
            ms.y(),
            &x1,
            &basis,
            &names,
            &cfg.learner,
            cfg.outcome,
            child(cfg.seed, 0x100 + fold as u64),
        )?;
        let beta = orthogonal_beta(&est, ms.y(), &x1, &basis, &pair)?;
        per_fold.push(beta);
        diagnostics.push(FoldDiagnostics {
            fold,
            n_train: train.len(),
            n_estimate: est.len(),
            beta,
            g_hat: pair.g_hat.clone(),
            m_hat: pair.m_hat.clone(),
        });
        pairs.push(pair);
    }
    let beta = per_fold.iter().sum::<f64>() / per_fold.len() as f64;
    let crossfit = CrossFit {
        plan,
        pairs,
        center: true,
    };
    let calib = if mode == Mode::Corrected { model } else { None };
    let (var, comps) = variance_total(ms, &xhat, beta, calib, &crossfit, spec, cfg.delta)?;
    let config = EstimateConfig {
        estimator: "dml".into(),
        folds: cfg.folds,
        seed: cfg.seed,
        interactions: spec.interactions,
        delta: cfg.delta,
        learner: learner_label(&cfg.learner),
        basis_columns: spec.n_columns(),
    };
    Ok(DmlEstimate::assemble(mode, beta, var, comps, per_fold, config, diagnostics))
}

fn check_spec(ms: &MainStudy, spec: &DesignSpec) -> Result<()> {
    if spec.exposure_names.len() + 1 != ms.n_exposures() || spec.covariate_names.len() != ms.n_covariates() {
        return Err(Error::DimensionMismatch(format!(
            "design spec names {} confounding exposures and {} covariates; data has {} and {}",
            spec.exposure_names.len(),
            spec.covariate_names.len(),
            ms.n_exposures().saturating_sub(1),
            ms.n_covariates()
        )));
    }
    Ok(())
}

/// Saturated linear regression of `Y` on `(1, X1, X2, W)`. The variance uses
/// the same two-component form with a single fold, where `m` is the OLS fit
/// of `X1` on `(X2, W)` and `g` the implied partial fit of `Y - beta X1`.
pub fn slr_estimate(
    ms: &MainStudy,
    model: Option<&CalibrationModel>,
    mode: Mode,
    delta: f64,
) -> Result<DmlEstimate> {
    let spec = design_spec(ms, false);
    let xhat = ms.working_exposures(mode, model)?;
    let n = ms.n();
    let x1 = xhat.column(0).into_owned();
    let x2 = xhat.columns(1, xhat.ncols() - 1).into_owned();
    let basis = expand_matrix(&spec, &x2, ms.w())?;
    let mut full = DMatrix::zeros(n, 1 + basis.ncols());
    full.set_column(0, &x1);
    full.view_mut((0, 1), (n, basis.ncols())).copy_from(&basis);
    let fit = ols_fit(&full, ms.y())?;
    let beta = fit.coefficients[0];

    let names = spec.column_names();
    let m_hat = ols_fit(&basis, &x1)?;
    let g_hat = LinearFit {
        intercept: fit.intercept,
        coefficients: fit.coefficients[1..].to_vec(),
        names: names.clone(),
        lambda: 0.0,
        standardization: fit.standardization[1..].to_vec(),
    };
    let mut m_named = m_hat;
    m_named.names = names;
    let pair = NuisancePair::from_fits(0, g_hat, m_named);
    let plan = SplitPlan {
        k: 1,
        assignment: vec![0; n],
        seed: 0,
    };
    let crossfit = CrossFit {
        plan,
        pairs: vec![pair],
        center: false,
    };
    let calib = if mode == Mode::Corrected { model } else { None };
    let (var, comps) = variance_total(ms, &xhat, beta, calib, &crossfit, &spec, delta)?;
    let config = EstimateConfig {
        estimator: "slr".into(),
        folds: 1,
        seed: 0,
        interactions: false,
        delta,
        learner: "ols".into(),
        basis_columns: spec.n_columns(),
    };
    let diagnostics = vec![FoldDiagnostics {
        fold: 0,
        n_train: n,
        n_estimate: n,
        beta,
        g_hat: crossfit.pairs[0].g_hat.clone(),
        m_hat: crossfit.pairs[0].m_hat.clone(),
    }];
    Ok(DmlEstimate::assemble(mode, beta, var, comps, vec![beta], config, diagnostics))
}
