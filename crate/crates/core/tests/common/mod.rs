//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use dmlrc::calibration::{CalibrationModel, MeatRows, ValidationStudy};
use dmlrc::dml::{fit_nuisances, make_folds, CrossFit, MainStudy, OutcomeNuisance};
use dmlrc::learners::{expand_matrix, DesignSpec, LearnerConfig};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Least squares through the normal equations with an LU solve.
pub fn normal_equations(x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    (x.transpose() * x).lu().solve(&(x.transpose() * y)).expect("nonsingular normal equations")
}

/// Validation study with correlated exposures, surrogates `X + noise` and
/// covariates entering `X`.
pub fn random_evs(rng: &mut ChaCha8Rng, n: usize, e: usize, q: usize) -> ValidationStudy {
    let w = DMatrix::from_fn(n, q, |_, _| normal(rng));
    let common = DVector::from_fn(n, |_, _| normal(rng));
    let mut x = DMatrix::from_fn(n, e, |i, _| 0.5 * common[i]);
    for i in 0..n {
        for j in 0..e {
            x[(i, j)] += normal(rng) + 2.0;
            for k in 0..q {
                x[(i, j)] += 0.2 * w[(i, k)];
            }
        }
    }
    let z = DMatrix::from_fn(n, e, |i, j| x[(i, j)] + 0.7 * normal(rng));
    ValidationStudy::new(x, z, w).unwrap()
}

/// Main study plus calibration model with `e` exposures and `q` covariates.
pub struct Calibrated {
    pub ms: MainStudy,
    pub model: CalibrationModel,
}

pub fn calibrated(seed: u64, n_main: usize, n_val: usize, e: usize, q: usize) -> Calibrated {
    let mut r = rng(seed);
    let all = random_evs(&mut r, n_main + n_val, e, q);
    let vs: Vec<usize> = (n_main..n_main + n_val).collect();
    let ms_rows: Vec<usize> = (0..n_main).collect();
    let evs = all.select_rows(&vs);
    let model = CalibrationModel::fit(&evs, MeatRows::CompleteCase).unwrap();
    let x = all.x().select_rows(&ms_rows);
    let w = all.w().select_rows(&ms_rows);
    let y = DVector::from_fn(n_main, |i, _| {
        8.0 * x[(i, 0)] + (1..e).map(|j| x[(i, j)]).sum::<f64>() + 0.5 * w.row(i).sum() + normal(&mut r)
    });
    let ms = MainStudy::new(y, all.z().select_rows(&ms_rows), w).unwrap();
    Calibrated { ms, model }
}

/// Cross-fit OLS nuisances on the centered calibrated exposures, as the
/// estimator builds them.
pub fn ols_crossfit(c: &Calibrated, seed: u64) -> (CrossFit, DesignSpec) {
    let ms = &c.ms;
    let mut xhat = c.model.predict_matrix(ms.exposures(), ms.w()).unwrap();
    let mean = xhat.column(0).mean();
    xhat.column_mut(0).add_scalar_mut(-mean);
    let e = xhat.ncols();
    let spec = DesignSpec::anonymous(e - 1, ms.n_covariates(), false);
    let basis = expand_matrix(&spec, &xhat.columns(1, e - 1).into_owned(), ms.w()).unwrap();
    let x1 = xhat.column(0).into_owned();
    let plan = make_folds(ms.n(), 2, seed).unwrap();
    let pairs = (0..2)
        .map(|k| {
            fit_nuisances(
                &plan.complement_rows(k),
                k,
                ms.y(),
                &x1,
                &basis,
                &spec.column_names(),
                &LearnerConfig::Ols,
                OutcomeNuisance::Refit,
                seed,
            )
            .unwrap()
        })
        .collect();
    (CrossFit { plan, pairs, center: true }, spec)
}

/// Exact derivative of the mean score with respect to the calibration
/// parameters when both nuisances are affine in the basis and the basis has
/// no interactions. The exposure of interest is centered at its mean.
pub fn analytic_score_gradient(c: &Calibrated, cf: &CrossFit, beta: f64) -> DVector<f64> {
    let ms = &c.ms;
    let dims = c.model.dims();
    let d = dims.design_len();
    let e = dims.n_exposures();
    let n = ms.n();
    let l = DMatrix::from_fn(n, d, |i, k| match k {
        0 => 1.0,
        k if k <= e => ms.exposures()[(i, k - 1)],
        k => ms.w()[(i, k - 1 - e)],
    });
    let lbar: Vec<f64> = (0..d).map(|k| l.column(k).mean()).collect();
    let theta = c.model.theta();
    let xhat = DMatrix::from_fn(n, e, |i, j| (0..d).map(|k| theta[j * d + k] * l[(i, k)]).sum::<f64>());
    let x1bar = xhat.column(0).mean();
    let mut grad = DVector::zeros(dims.theta_len());
    for i in 0..n {
        let pair = cf.pair_for(i);
        let (g, m) = (&pair.g_hat, &pair.m_hat);
        let basis: Vec<f64> = (1..e).map(|j| xhat[(i, j)]).chain(ms.w().row(i).iter().copied()).collect();
        let x1 = xhat[(i, 0)] - x1bar;
        let a = x1 - m.predict_row(&basis);
        let b = ms.y()[i] - beta * x1 - g.predict_row(&basis);
        for k in 0..d {
            let dx = l[(i, k)] - lbar[k];
            grad[k] += dx * b + a * (-beta * dx);
        }
        for j in 1..e {
            for k in 0..d {
                let da = -m.coefficients[j - 1] * l[(i, k)];
                let db = -g.coefficients[j - 1] * l[(i, k)];
                grad[j * d + k] += da * b + a * db;
            }
        }
    }
    grad / n as f64
}

use dmlrc::pipeline::{ColumnData, ColumnSchema, Table};

/// Schema with `e` constituents, total mass, one continuous and one
/// categorical covariate.
pub fn schema_text(names: &[&str], total_mass: bool) -> String {
    let mut s = String::from("id = \"pid\"\noutcome = \"y\"\n");
    for n in names {
        s.push_str(&format!(
            "[[exposures]]\nname = \"{n}\"\nsurrogate = \"{n}_s\"\npersonal = \"{n}_p\"\n"
        ));
    }
    if total_mass {
        s.push_str("[total_mass]\nname = \"pm\"\nsurrogate = \"pm_s\"\npersonal = \"pm_p\"\n");
    }
    s.push_str("[[covariates]]\nname = \"age\"\nkind = \"continuous\"\n");
    s.push_str("[[covariates]]\nname = \"smoke\"\nkind = \"categorical\"\n");
    s
}

pub fn schema(names: &[&str], total_mass: bool) -> ColumnSchema {
    ColumnSchema::from_toml_str(&schema_text(names, total_mass)).unwrap()
}

/// Random main and validation tables for `schema` with positive exposures,
/// scattered missing cells and a few gross outliers. Cell-level defects are
/// drawn with probability `defect`.
pub fn fuzz_tables(seed: u64, schema: &ColumnSchema, n_main: usize, n_val: usize, defect: f64) -> (Table, Table) {
    let mut r = rng(seed);
    let exposures: Vec<_> = schema.exposures.iter().chain(&schema.total_mass).cloned().collect();
    let make = |n: usize, validation: bool, r: &mut ChaCha8Rng| -> Table {
        let mut cols: Vec<(String, ColumnData)> = Vec::new();
        let cell = |r: &mut ChaCha8Rng, v: f64| defective(r, v, defect);
        if !validation {
            let y = (0..n)
                .map(|_| {
                    let v = normal(r);
                    if r.random::<f64>() < defect { None } else { Some(v) }
                })
                .collect();
            cols.push(("y".into(), ColumnData::Numeric(y)));
        }
        for e in &exposures {
            let truth: Vec<f64> = (0..n).map(|_| (0.3 * normal(r)).exp()).collect();
            let s = truth
                .iter()
                .map(|t| {
                    let v = t * (0.2 * normal(r)).exp();
                    cell(r, v)
                })
                .collect();
            cols.push((e.surrogate.clone(), ColumnData::Numeric(s)));
            if validation {
                let p = truth.iter().map(|&t| cell(r, t)).collect();
                cols.push((e.personal.clone(), ColumnData::Numeric(p)));
            }
        }
        let age = (0..n).map(|_| if r.random::<f64>() < defect { None } else { Some(50.0 + 10.0 * normal(r)) }).collect();
        cols.push(("age".into(), ColumnData::Numeric(age)));
        let levels = vec!["never".to_string(), "past".to_string(), "current".to_string()];
        let codes = (0..n)
            .map(|_| if r.random::<f64>() < defect { None } else { Some(r.random_range(0..3usize)) })
            .collect();
        cols.push(("smoke".into(), ColumnData::Categorical { codes, levels }));
        Table::new(cols).unwrap()
    };
    let ms = make(n_main, false, &mut r);
    let evs = make(n_val, true, &mut r);
    (ms, evs)
}

fn defective(r: &mut ChaCha8Rng, v: f64, defect: f64) -> Option<f64> {
    let u: f64 = r.random();
    if u < defect {
        None
    } else if u < 2.0 * defect {
        Some(v * 1e4)
    } else {
        Some(v)
    }
}

/// Main and validation tables on the raw (positive) scale for the schema
/// `schema(&["A", "B", "C"], true)`. On the log scale the outcome is
/// `beta_a * A + 0.4 * C + 0.3 * pm` plus covariate effects and unit noise;
/// B has no effect. Surrogates are personal exposures plus log-scale error.
pub fn synthetic_tables(seed: u64, n_main: usize, n_val: usize, beta_a: f64) -> (Table, Table) {
    let mut r = rng(seed);
    let levels = vec!["never".to_string(), "past".to_string(), "current".to_string()];
    let mut draw = |n: usize, validation: bool| -> Table {
        let mut x = vec![Vec::with_capacity(n); 4];
        let mut z = vec![Vec::with_capacity(n); 4];
        let (mut y, mut age, mut smoke) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..n {
            let common = normal(&mut r);
            let a = 50.0 + 10.0 * normal(&mut r);
            let s = r.random_range(0..3usize);
            let mut lx = [0.0; 4];
            for (k, v) in lx.iter_mut().enumerate() {
                let centre = if k == 3 { 1.5 } else { 1.0 };
                *v = centre + 0.5 * (0.6 * common + 0.8 * normal(&mut r));
            }
            for k in 0..4 {
                x[k].push(Some(lx[k].exp()));
                z[k].push(Some((lx[k] + 0.25 * normal(&mut r)).exp()));
            }
            let signal = beta_a * lx[0] + 0.4 * lx[2] + 0.3 * lx[3] + 0.02 * a + if s == 2 { 0.5 } else { 0.0 };
            y.push(Some(signal + normal(&mut r)));
            age.push(Some(a));
            smoke.push(Some(s));
        }
        let mut cols: Vec<(String, ColumnData)> = Vec::new();
        if !validation {
            cols.push(("y".into(), ColumnData::Numeric(y)));
        }
        for (k, name) in ["A", "B", "C", "pm"].iter().enumerate() {
            cols.push((format!("{name}_s"), ColumnData::Numeric(z[k].clone())));
            if validation {
                cols.push((format!("{name}_p"), ColumnData::Numeric(x[k].clone())));
            }
        }
        cols.push(("age".into(), ColumnData::Numeric(age)));
        cols.push((
            "smoke".into(),
            ColumnData::Categorical {
                codes: smoke,
                levels: levels.clone(),
            },
        ));
        Table::new(cols).unwrap()
    };
    let ms = draw(n_main, false);
    let evs = draw(n_val, true);
    (ms, evs)
}
