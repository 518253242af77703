//! Linear regression calibration fitted on an external validation study.
//!
//! The measurement-error model regresses every true exposure on the design
//! row `L = (1, Z, W)`. It is solved as a working-independence GEE, which
//! decouples into one least-squares fit per exposure (one "block" of the
//! stacked parameter vector per constituent). The sandwich covariance of the
//! stacked parameter vector feeds the second variance component of the
//! corrected estimator.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{symmetrize, PivotedCholesky};

/// Paired true and surrogate exposures plus error-free covariates.
///
/// Missing true-exposure cells are stored as `NaN`; surrogates and covariates
/// must be complete.
#[derive(Debug, Clone)]
pub struct ValidationStudy {
    x: DMatrix<f64>,
    z: DMatrix<f64>,
    w: DMatrix<f64>,
}

impl ValidationStudy {
    pub fn new(x: DMatrix<f64>, z: DMatrix<f64>, w: DMatrix<f64>) -> Result<Self> {
        let n = x.nrows();
        if z.nrows() != n || w.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "validation rows differ: X {} Z {} W {}",
                n,
                z.nrows(),
                w.nrows()
            )));
        }
        if x.ncols() != z.ncols() || x.ncols() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "X has {} columns but Z has {}",
                x.ncols(),
                z.ncols()
            )));
        }
        if z.iter().chain(w.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Data(
                "surrogate exposures and covariates must be complete and finite".into(),
            ));
        }
        if x.iter().any(|v| v.is_infinite()) {
            return Err(Error::Data("true exposures contain infinite values".into()));
        }
        Ok(Self { x, z, w })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    /// Number of exposures, `p + 1`.
    pub fn n_exposures(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_covariates(&self) -> usize {
        self.w.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn dims(&self) -> CalibrationDims {
        CalibrationDims {
            p: self.n_exposures() - 1,
            q: self.n_covariates(),
            n: self.n(),
        }
    }

    pub fn is_observed(&self, row: usize, exposure: usize) -> bool {
        !self.x[(row, exposure)].is_nan()
    }

    pub fn row_complete(&self, row: usize) -> bool {
        (0..self.n_exposures()).all(|j| self.is_observed(row, j))
    }

    pub fn design_row(&self, row: usize) -> DVector<f64> {
        design_row(
            self.z.row(row).iter().copied(),
            self.w.row(row).iter().copied(),
            self.dims().design_len(),
        )
    }

    /// The `n x (p+q+2)` matrix whose rows are `L_i`.
    pub fn design_matrix(&self) -> DMatrix<f64> {
        let d = self.dims().design_len();
        let mut out = DMatrix::zeros(self.n(), d);
        for i in 0..self.n() {
            out.set_row(i, &self.design_row(i).transpose());
        }
        out
    }

    /// Returns a copy holding only the given rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(rows),
            z: self.z.select_rows(rows),
            w: self.w.select_rows(rows),
        }
    }
}

/// `(p, q, n)`: `p + 1` exposures, `q` covariates, `n` validation rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibrationDims {
    pub p: usize,
    pub q: usize,
    pub n: usize,
}

impl CalibrationDims {
    pub fn n_exposures(&self) -> usize {
        self.p + 1
    }

    /// Length of a design row, `p + q + 2`.
    pub fn design_len(&self) -> usize {
        self.p + self.q + 2
    }

    /// Length of the stacked parameter vector, `(p+1)(p+q+2)`.
    pub fn theta_len(&self) -> usize {
        self.n_exposures() * self.design_len()
    }
}

/// Builds `L = (1, z, w)`.
pub fn design_row(
    z: impl IntoIterator<Item = f64>,
    w: impl IntoIterator<Item = f64>,
    len: usize,
) -> DVector<f64> {
    let mut out = Vec::with_capacity(len);
    out.push(1.0);
    out.extend(z);
    out.extend(w);
    DVector::from_vec(out)
}

/// Which validation rows enter the sandwich covariance when some true
/// exposure cells are missing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeatRows {
    /// Rows observed in every constituent.
    #[default]
    CompleteCase,
    /// Block `(j, k)` uses rows observed in both `j` and `k`.
    PairwiseComplete,
}

/// Fitted calibration model.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationModel {
    dims: CalibrationDims,
    theta: DVector<f64>,
    sigma2: Vec<f64>,
    var_theta: DMatrix<f64>,
    meat_rows: MeatRows,
}

impl CalibrationModel {
    /// Fits the parameters, residual variances and sandwich covariance.
    pub fn fit(evs: &ValidationStudy, meat_rows: MeatRows) -> Result<Self> {
        let theta = fit_theta(evs)?;
        let sigma2 = residual_variances(evs, &theta)?;
        let var_theta = sandwich_var_theta(evs, &theta, &sigma2, meat_rows)?;
        Ok(Self {
            dims: evs.dims(),
            theta,
            sigma2,
            var_theta,
            meat_rows,
        })
    }

    pub fn from_parts(
        dims: CalibrationDims,
        theta: DVector<f64>,
        sigma2: Vec<f64>,
        var_theta: DMatrix<f64>,
    ) -> Result<Self> {
        let t = dims.theta_len();
        if theta.len() != t
            || sigma2.len() != dims.n_exposures()
            || var_theta.nrows() != t
            || var_theta.ncols() != t
        {
            return Err(Error::DimensionMismatch(format!(
                "calibration parts do not match p={} q={}",
                dims.p, dims.q
            )));
        }
        Ok(Self {
            dims,
            theta,
            sigma2,
            var_theta,
            meat_rows: MeatRows::CompleteCase,
        })
    }

    pub fn dims(&self) -> CalibrationDims {
        self.dims
    }

    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    /// Block `j`: the coefficients mapping `L` to the `j`-th true exposure.
    pub fn block(&self, j: usize) -> &[f64] {
        let d = self.dims.design_len();
        &self.theta.as_slice()[j * d..(j + 1) * d]
    }

    pub fn sigma2(&self) -> &[f64] {
        &self.sigma2
    }

    pub fn var_theta(&self) -> &DMatrix<f64> {
        &self.var_theta
    }

    pub fn meat_rows(&self) -> MeatRows {
        self.meat_rows
    }

    /// Same model with a zero parameter covariance.
    pub fn without_uncertainty(&self) -> Self {
        let mut out = self.clone();
        out.var_theta.fill(0.0);
        out
    }

    /// Predicted true exposures for one main-study row.
    pub fn predict(&self, z: &[f64], w: &[f64]) -> Result<DVector<f64>> {
        predict_exposures(self, z, w)
    }

    /// Predicted true exposures for every row of `(z, w)`.
    pub fn predict_matrix(&self, z: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_predict_dims(self.dims, z.ncols(), w.ncols())?;
        if z.nrows() != w.nrows() {
            return Err(Error::DimensionMismatch("Z and W row counts differ".into()));
        }
        Ok(predict_with_theta(&self.theta, self.dims, z, w))
    }

    /// Reorders the exposures so that new exposure `k` is old exposure
    /// `order[k]`. Blocks, the surrogate entries of every block, and the
    /// covariance are permuted consistently, so predictions are unchanged up
    /// to the same relabeling.
    pub fn reorder(&self, order: &[usize]) -> Result<Self> {
        let e = self.dims.n_exposures();
        let d = self.dims.design_len();
        let mut seen = vec![false; e];
        if order.len() != e || order.iter().any(|&o| o >= e || std::mem::replace(&mut seen[o], true)) {
            return Err(Error::DimensionMismatch(format!(
                "exposure order {order:?} is not a permutation of 0..{e}"
            )));
        }
        // within-block map: new position -> old position
        let mut within: Vec<usize> = (0..d).collect();
        for (k, &o) in order.iter().enumerate() {
            within[1 + k] = 1 + o;
        }
        let index: Vec<usize> = (0..e)
            .flat_map(|j| within.iter().map(move |&c| order[j] * d + c))
            .collect();
        let theta = DVector::from_iterator(index.len(), index.iter().map(|&i| self.theta[i]));
        let t = index.len();
        let var_theta = DMatrix::from_fn(t, t, |a, b| self.var_theta[(index[a], index[b])]);
        let sigma2 = order.iter().map(|&o| self.sigma2[o]).collect();
        Ok(Self {
            dims: self.dims,
            theta,
            sigma2,
            var_theta,
            meat_rows: self.meat_rows,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&CalibrationJson::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: CalibrationJson = serde_json::from_str(text)?;
        raw.try_into()
    }
}

fn check_predict_dims(dims: CalibrationDims, z_len: usize, w_len: usize) -> Result<()> {
    if z_len != dims.n_exposures() || w_len != dims.q {
        return Err(Error::DimensionMismatch(format!(
            "expected {} surrogates and {} covariates, got {z_len} and {w_len}",
            dims.n_exposures(),
            dims.q
        )));
    }
    Ok(())
}

/// Closed-form working-independence GEE solution. Block `j` is the least
/// squares fit of `X[., j]` on `L` over the rows where `X[., j]` is observed.
pub fn fit_theta(evs: &ValidationStudy) -> Result<DVector<f64>> {
    let dims = evs.dims();
    let d = dims.design_len();
    let design = evs.design_matrix();
    let mut theta = DVector::zeros(dims.theta_len());
    let mut cached: Option<(Vec<bool>, PivotedCholesky)> = None;

    for j in 0..dims.n_exposures() {
        let mask: Vec<bool> = (0..evs.n()).map(|i| evs.is_observed(i, j)).collect();
        let count = mask.iter().filter(|&&m| m).count();
        if count <= d {
            return Err(Error::InsufficientSamples {
                block: Some(j),
                available: count,
                required: d + 1,
            });
        }
        let reuse = matches!(&cached, Some((m, _)) if *m == mask);
        if !reuse {
            let gram = masked_gram(&design, &mask);
            let chol = PivotedCholesky::new(&gram).map_err(|e| Error::SingularDesign {
                block: Some(j),
                pivot: e.pivot,
                size: e.size,
            })?;
            cached = Some((mask.clone(), chol));
        }
        let chol = &cached.as_ref().expect("factor cached above").1;
        let mut rhs = DVector::zeros(d);
        for i in (0..evs.n()).filter(|&i| mask[i]) {
            let xij = evs.x[(i, j)];
            for c in 0..d {
                rhs[c] += design[(i, c)] * xij;
            }
        }
        let block = chol.solve(&rhs);
        theta.rows_mut(j * d, d).copy_from(&block);
    }
    Ok(theta)
}

/// Solves the stacked estimating equations literally,
/// `sum_i (I ⊗ L_i) V^{-1} [X_i - (I ⊗ L_i^T) theta] = 0`, with a constant
/// diagonal working covariance `V = diag(v)`. Uses rows complete in all
/// exposures. Mainly useful to check the block decomposition.
pub fn fit_theta_stacked(evs: &ValidationStudy, v: &[f64]) -> Result<DVector<f64>> {
    let dims = evs.dims();
    let e = dims.n_exposures();
    if v.len() != e || v.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::DimensionMismatch(
            "working variances must be positive, one per exposure".into(),
        ));
    }
    let t = dims.theta_len();
    let mut lhs = DMatrix::zeros(t, t);
    let mut rhs = DVector::zeros(t);
    let v_inv = DMatrix::from_diagonal(&DVector::from_iterator(e, v.iter().map(|s| 1.0 / s)));
    let ident = DMatrix::<f64>::identity(e, e);
    for i in (0..evs.n()).filter(|&i| evs.row_complete(i)) {
        let l = evs.design_row(i);
        // (I ⊗ L_i): t x e
        let a = ident.kronecker(&l);
        let xi = evs.x.row(i).transpose();
        let av = &a * &v_inv;
        lhs += &av * a.transpose();
        rhs += av * xi;
    }
    let chol = PivotedCholesky::new(&lhs).map_err(|e| Error::SingularDesign {
        block: None,
        pivot: e.pivot,
        size: e.size,
    })?;
    Ok(chol.solve(&rhs))
}

/// Squared residual RMS, relative to the mean square of the exposure, below
/// which a calibration block counts as an exact fit.
pub const EXACT_FIT_RATIO: f64 = 1e-24;

/// `sigma_j^2 = (1/n_j) sum_i [X_ij - (e_j ⊗ L_i)^T theta]^2` over observed cells.
pub fn residual_variances(evs: &ValidationStudy, theta: &DVector<f64>) -> Result<Vec<f64>> {
    let dims = evs.dims();
    check_theta(dims, theta)?;
    let d = dims.design_len();
    let mut out = Vec::with_capacity(dims.n_exposures());
    for j in 0..dims.n_exposures() {
        let block = theta.rows(j * d, d);
        let mut ss = 0.0;
        let mut count = 0usize;
        for i in (0..evs.n()).filter(|&i| evs.is_observed(i, j)) {
            let r = evs.x[(i, j)] - evs.design_row(i).dot(&block);
            ss += r * r;
            count += 1;
        }
        if count == 0 {
            return Err(Error::InsufficientSamples {
                block: Some(j),
                available: 0,
                required: 1,
            });
        }
        out.push(ss / count as f64);
    }
    Ok(out)
}

/// Sandwich covariance of the stacked calibration parameters, with
/// `V_i = diag(sigma2)` and `Var(X_i) = r_i r_i^T`.
pub fn sandwich_var_theta(
    evs: &ValidationStudy,
    theta: &DVector<f64>,
    sigma2: &[f64],
    meat_rows: MeatRows,
) -> Result<DMatrix<f64>> {
    let dims = evs.dims();
    check_theta(dims, theta)?;
    let e = dims.n_exposures();
    let d = dims.design_len();
    let t = dims.theta_len();
    if sigma2.len() != e {
        return Err(Error::DimensionMismatch(format!(
            "expected {e} residual variances, got {}",
            sigma2.len()
        )));
    }

    let design = evs.design_matrix();
    // residuals, NaN where X is missing
    let mut resid = DMatrix::from_element(evs.n(), e, f64::NAN);
    for i in 0..evs.n() {
        for j in (0..e).filter(|&j| evs.is_observed(i, j)) {
            let fitted: f64 = (0..d).map(|c| design[(i, c)] * theta[j * d + c]).sum();
            resid[(i, j)] = evs.x[(i, j)] - fitted;
        }
    }
    let complete: Vec<bool> = (0..evs.n()).map(|i| evs.row_complete(i)).collect();
    let use_row = |i: usize, j: usize, k: usize| match meat_rows {
        MeatRows::CompleteCase => complete[i],
        MeatRows::PairwiseComplete => evs.is_observed(i, j) && evs.is_observed(i, k),
    };

    // A block fits exactly when its residual RMS is at rounding level
    // relative to the exposure itself.
    let exact: Vec<bool> = (0..e)
        .map(|j| {
            let (ss, count) = (0..evs.n())
                .filter(|&i| evs.is_observed(i, j))
                .fold((0.0, 0usize), |(s, c), i| (s + evs.x[(i, j)].powi(2), c + 1));
            !(sigma2[j] > EXACT_FIT_RATIO * ss / count.max(1) as f64)
        })
        .collect();
    if exact.iter().all(|&x| x) {
        return Ok(DMatrix::zeros(t, t));
    }
    if let Some(j) = exact.iter().position(|&x| x) {
        return Err(Error::DegenerateVariance { block: j });
    }

    // Bread: [sum_i V^{-1} ⊗ L_i L_i^T]^{-1} is block diagonal with blocks
    // sigma_j^2 * G_j^{-1}.
    let mut bread: Vec<DMatrix<f64>> = Vec::with_capacity(e);
    for j in 0..e {
        let mask: Vec<bool> = (0..evs.n()).map(|i| use_row(i, j, j)).collect();
        let count = mask.iter().filter(|&&m| m).count();
        if count <= d {
            return Err(Error::InsufficientSamples {
                block: Some(j),
                available: count,
                required: d + 1,
            });
        }
        let chol = PivotedCholesky::new(&masked_gram(&design, &mask)).map_err(|err| {
            Error::SingularDesign {
                block: Some(j),
                pivot: err.pivot,
                size: err.size,
            }
        })?;
        bread.push(chol.inverse() * sigma2[j]);
    }

    let mut out = DMatrix::zeros(t, t);
    for j in 0..e {
        for k in j..e {
            // Meat block (j, k): sum_i r_ij r_ik / (s_j s_k) L_i L_i^T
            let mut meat = DMatrix::zeros(d, d);
            let scale = 1.0 / (sigma2[j] * sigma2[k]);
            for i in (0..evs.n()).filter(|&i| use_row(i, j, k)) {
                let wgt = resid[(i, j)] * resid[(i, k)] * scale;
                if wgt == 0.0 {
                    continue;
                }
                let l = design.row(i);
                for a in 0..d {
                    let la = l[a] * wgt;
                    for b in 0..d {
                        meat[(a, b)] += la * l[b];
                    }
                }
            }
            let block = &bread[j] * meat * &bread[k];
            out.view_mut((j * d, k * d), (d, d)).copy_from(&block);
            if j != k {
                out.view_mut((k * d, j * d), (d, d)).copy_from(&block.transpose());
            }
        }
    }
    Ok(symmetrize(&out))
}

/// `X_hat = (I ⊗ L^T) theta` for one row.
pub fn predict_exposures(model: &CalibrationModel, z: &[f64], w: &[f64]) -> Result<DVector<f64>> {
    let dims = model.dims;
    check_predict_dims(dims, z.len(), w.len())?;
    let l = design_row(z.iter().copied(), w.iter().copied(), dims.design_len());
    let d = dims.design_len();
    Ok(DVector::from_fn(dims.n_exposures(), |j, _| {
        model.theta.rows(j * d, d).dot(&l)
    }))
}

/// Batch prediction with an explicit parameter vector.
pub fn predict_with_theta(
    theta: &DVector<f64>,
    dims: CalibrationDims,
    z: &DMatrix<f64>,
    w: &DMatrix<f64>,
) -> DMatrix<f64> {
    let d = dims.design_len();
    let e = dims.n_exposures();
    let mut out = DMatrix::zeros(z.nrows(), e);
    for i in 0..z.nrows() {
        for j in 0..e {
            let b = &theta.as_slice()[j * d..(j + 1) * d];
            let mut v = b[0];
            for c in 0..e {
                v += b[1 + c] * z[(i, c)];
            }
            for c in 0..dims.q {
                v += b[1 + e + c] * w[(i, c)];
            }
            out[(i, j)] = v;
        }
    }
    out
}

fn check_theta(dims: CalibrationDims, theta: &DVector<f64>) -> Result<()> {
    if theta.len() != dims.theta_len() {
        return Err(Error::DimensionMismatch(format!(
            "theta has length {}, expected {}",
            theta.len(),
            dims.theta_len()
        )));
    }
    Ok(())
}

fn masked_gram(design: &DMatrix<f64>, mask: &[bool]) -> DMatrix<f64> {
    let d = design.ncols();
    let mut gram = DMatrix::zeros(d, d);
    for i in (0..design.nrows()).filter(|&i| mask[i]) {
        let l = design.row(i);
        for a in 0..d {
            for b in a..d {
                gram[(a, b)] += l[a] * l[b];
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
    }
    gram
}

#[derive(Serialize, Deserialize)]
struct CalibrationJson {
    p: usize,
    q: usize,
    n: usize,
    theta: Vec<Vec<f64>>,
    sigma2: Vec<f64>,
    var_theta: Vec<Vec<f64>>,
    #[serde(default)]
    meat_rows: MeatRows,
}

impl From<&CalibrationModel> for CalibrationJson {
    fn from(m: &CalibrationModel) -> Self {
        let e = m.dims.n_exposures();
        Self {
            p: m.dims.p,
            q: m.dims.q,
            n: m.dims.n,
            theta: (0..e).map(|j| m.block(j).to_vec()).collect(),
            sigma2: m.sigma2.clone(),
            var_theta: m
                .var_theta
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
            meat_rows: m.meat_rows,
        }
    }
}

impl TryFrom<CalibrationJson> for CalibrationModel {
    type Error = Error;

    fn try_from(raw: CalibrationJson) -> Result<Self> {
        let dims = CalibrationDims {
            p: raw.p,
            q: raw.q,
            n: raw.n,
        };
        let d = dims.design_len();
        if raw.theta.len() != dims.n_exposures() || raw.theta.iter().any(|b| b.len() != d) {
            return Err(Error::DimensionMismatch("theta blocks do not match p, q".into()));
        }
        let t = dims.theta_len();
        if raw.var_theta.len() != t || raw.var_theta.iter().any(|r| r.len() != t) {
            return Err(Error::DimensionMismatch("var_theta is not square of theta length".into()));
        }
        let theta = DVector::from_iterator(t, raw.theta.into_iter().flatten());
        let var_theta = DMatrix::from_row_iterator(t, t, raw.var_theta.into_iter().flatten());
        let mut model = CalibrationModel::from_parts(dims, theta, raw.sigma2, var_theta)?;
        model.meat_rows = raw.meat_rows;
        Ok(model)
    }
}
