mod common;

use common::*;
use dmlrc::calibration::{CalibrationModel, MeatRows, ValidationStudy};
use dmlrc::dml::{slr_estimate, MainStudy, Mode, DEFAULT_DELTA};
use dmlrc::pipeline::{
    analyze_files, analyze_tables, parse_methods, preprocess, read_table, write_table, AnalysisData,
    AnalysisOptions, AnalysisReport, ColumnData, ColumnSchema, CovariateKind, Study, Table,
};
use rand::Rng;
use serde_json::Value;

fn options(methods: &str, seed: u64) -> AnalysisOptions {
    AnalysisOptions {
        methods: parse_methods(methods).unwrap(),
        seed,
        ..AnalysisOptions::default()
    }
}

fn analyze(seed: u64, n_main: usize, beta_a: f64, methods: &str) -> AnalysisReport {
    let schema = schema(&["A", "B", "C"], true);
    let (mut ms, mut evs) = synthetic_tables(seed, n_main, 300, beta_a);
    analyze_tables(&mut ms, &mut evs, &schema, &options(methods, seed)).unwrap()
}

fn estimate<'a>(report: &'a AnalysisReport, name: &str, column: &str) -> &'a dmlrc::pipeline::ReportEstimate {
    report
        .constituents
        .iter()
        .find(|c| c.name == name)
        .and_then(|c| c.estimates.iter().find(|e| e.column == column))
        .unwrap_or_else(|| panic!("no estimate for {name} {column}"))
}

#[test]
fn planted_effect_is_found_and_null_is_not() {
    let (mut hit, mut quiet) = (0, 0);
    for seed in 0..50u64 {
        let report = analyze(seed, 2000, 0.6, "dml:corrected");
        let col = "corrected/multi_main/dml";
        hit += usize::from(estimate(&report, "A", col).p < 0.05);
        quiet += usize::from(estimate(&report, "B", col).p > 0.05);
    }
    assert!(hit >= 45, "A significant in {hit}/50 runs");
    assert!(quiet >= 45, "B quiet in {quiet}/50 runs");
}

#[test]
fn correction_undoes_attenuation() {
    let report = analyze(3, 3000, 0.6, "slr");
    let naive = estimate(&report, "A", "uncorrected/multi_main/slr").beta;
    let corrected = estimate(&report, "A", "corrected/multi_main/slr").beta;
    assert!(naive < corrected);
    assert!((corrected - 0.6).abs() < 0.2, "corrected {corrected}");
}

#[test]
fn report_does_not_depend_on_schema_order() {
    let forward = schema(&["A", "B", "C"], true);
    let reversed = schema(&["C", "B", "A"], true);
    let (ms, evs) = synthetic_tables(9, 600, 200, 0.5);
    let opts = AnalysisOptions {
        methods: parse_methods("slr,dml").unwrap(),
        single_pollutant: true,
        seed: 4,
        ..AnalysisOptions::default()
    };
    let a = analyze_tables(&mut ms.clone(), &mut evs.clone(), &forward, &opts).unwrap();
    let b = analyze_tables(&mut ms.clone(), &mut evs.clone(), &reversed, &opts).unwrap();
    let names: Vec<&str> = a.constituents.iter().map(|c| c.name.as_str()).collect();
    assert_eq!(names, ["A", "B", "C"]);
    assert_eq!(
        serde_json::to_string(&a.constituents).unwrap(),
        serde_json::to_string(&b.constituents).unwrap()
    );
}

#[test]
fn one_calibration_serves_every_constituent() {
    let schema = schema(&["A", "B", "C"], true);
    let (mut ms, mut evs) = synthetic_tables(12, 500, 200, 0.5);
    let report = analyze_tables(&mut ms.clone(), &mut evs.clone(), &schema, &options("slr:corrected", 1)).unwrap();

    let (ms_cov, _) = preprocess(&mut ms, &schema, Study::Main).unwrap();
    let (evs_cov, _) = preprocess(&mut evs, &schema, Study::Validation).unwrap();
    let data = AnalysisData::from_tables(&ms, &evs, &schema, &ms_cov, &evs_cov, &mut Vec::new()).unwrap();
    // A, B, C are already in name order; calibrated total mass sits last
    let canonical = [0usize, 1, 2, 3];
    let shared = CalibrationModel::fit(
        &ValidationStudy::new(
            data.evs_x.select_columns(&canonical),
            data.evs_z.select_columns(&canonical),
            data.evs_w.clone(),
        )
        .unwrap(),
        MeatRows::CompleteCase,
    )
    .unwrap();
    assert_eq!(report.calibration.as_ref().unwrap().sigma2, shared.sigma2());
    for (k, name) in ["A", "B", "C"].iter().enumerate() {
        let mut order = vec![k];
        order.extend((0..4).filter(|&j| j != k));
        let ms_k = MainStudy::new(data.ms_y.clone(), data.ms_z.select_columns(&order), data.ms_w.clone()).unwrap();
        let model = shared.reorder(&order).unwrap();
        let direct = slr_estimate(&ms_k, Some(&model), Mode::Corrected, DEFAULT_DELTA).unwrap();
        let reported = estimate(&report, name, "corrected/multi_main/slr");
        assert_eq!(reported.beta.to_bits(), direct.beta.to_bits());
        assert_eq!(reported.ase.to_bits(), direct.ase.to_bits());
    }
}

#[test]
fn constant_exposure_fails_alone() {
    let schema = schema(&["A", "B", "C"], true);
    let (mut ms, mut evs) = synthetic_tables(5, 400, 150, 0.5);
    let n = ms.n_rows();
    let mut cols: Vec<(String, ColumnData)> = ms
        .names()
        .iter()
        .map(|name| (name.clone(), ms.column(name).unwrap().clone()))
        .collect();
    for (name, data) in cols.iter_mut() {
        if name == "B_s" {
            *data = ColumnData::Numeric(vec![Some(2.0); n]);
        }
    }
    ms = Table::new(cols).unwrap();
    let report = analyze_tables(&mut ms, &mut evs, &schema, &options("dml:uncorrected", 2)).unwrap();
    assert_eq!(report.exit_code(), 5);
    assert!(report.failures.iter().all(|f| f.constituent == "B"));
    assert!(!report.failures.is_empty());
    for name in ["A", "C"] {
        assert!(estimate(&report, name, "uncorrected/multi_main/dml").ase > 0.0);
    }
}

#[test]
fn significance_uses_adjusted_p_values() {
    let report = analyze(21, 1500, 0.6, "dml");
    for c in &report.constituents {
        for e in &c.estimates {
            assert!(e.p_adjusted >= 0.0 && e.p_adjusted <= 1.0);
            assert_eq!(e.significant, e.p_adjusted < 0.05);
        }
    }
}

fn expect_keys(v: &Value, keys: &[&str]) {
    let obj = v.as_object().unwrap_or_else(|| panic!("expected object, got {v}"));
    for k in keys {
        assert!(obj.contains_key(*k), "missing key '{k}' in {}", serde_json::to_string(v).unwrap());
    }
}

#[test]
fn report_json_has_documented_shape() {
    let dir = tempfile::tempdir().unwrap();
    let schema = schema(&["A", "B", "C"], true);
    let (ms, evs) = synthetic_tables(8, 400, 150, 0.5);
    let (main_path, val_path) = (dir.path().join("main.csv"), dir.path().join("val.csv"));
    write_table(&ms, std::fs::File::create(&main_path).unwrap()).unwrap();
    write_table(&evs, std::fs::File::create(&val_path).unwrap()).unwrap();
    let opts = AnalysisOptions {
        interactions: true,
        single_pollutant: true,
        ..options("slr,dml", 6)
    };
    let report = analyze_files(&main_path, &val_path, &schema, &opts).unwrap();
    let v: Value = serde_json::from_str(&report.to_json().unwrap()).unwrap();

    expect_keys(&v, &["meta", "preprocessing", "calibration", "constituents", "failures"]);
    expect_keys(&v["meta"], &["version", "seed", "columns", "fdr_alpha", "flags"]);
    let columns = v["meta"]["columns"].as_array().unwrap();
    // interactions exist for DML only
    assert_eq!(columns.len(), 2 * (2 * 2 + 1));
    expect_keys(&v["preprocessing"], &["main", "validation", "notes"]);
    for study in ["main", "validation"] {
        expect_keys(
            &v["preprocessing"][study],
            &["rows_in", "rows_out", "rows_dropped_outlier", "rows_dropped_incomplete", "columns", "imputations"],
        );
    }
    expect_keys(&v["calibration"], &["exposures", "covariates", "n", "sigma2", "meat_rows"]);
    let constituents = v["constituents"].as_array().unwrap();
    assert_eq!(constituents.len(), 3);
    for c in constituents {
        expect_keys(c, &["name", "seed", "estimates"]);
        let estimates = c["estimates"].as_array().unwrap();
        assert_eq!(estimates.len(), columns.len());
        for (e, col) in estimates.iter().zip(columns) {
            expect_keys(e, &["column", "beta", "ase", "ci95", "p", "p_adjusted", "significant", "per_fold", "var_components"]);
            assert_eq!(&e["column"], col);
            assert_eq!(e["ci95"].as_array().unwrap().len(), 2);
            assert!(e["beta"].is_f64() && e["p"].is_f64() && e["significant"].is_boolean());
        }
    }
    assert!(v["failures"].as_array().unwrap().is_empty());
}

#[test]
fn tables_round_trip_through_csv_exactly() {
    let mut r = rng(44);
    let n = 500;
    let values: Vec<Option<f64>> = (0..n)
        .map(|i| match i % 5 {
            0 => None,
            1 => Some(f64::from_bits(r.random::<u64>() >> 2)),
            2 => Some(-r.random::<f64>() * 1e-300),
            3 => Some(0.1 + 0.2),
            _ => Some(normal(&mut r) * 1e12),
        })
        .filter(|v| v.is_none_or(|x| x.is_finite()))
        .collect();
    let m = values.len();
    let codes: Vec<Option<usize>> = (0..m).map(|i| if i % 7 == 0 { None } else { Some(i % 3) }).collect();
    let levels = vec!["a".to_string(), "b b".to_string(), "c,d".to_string()];
    let table = Table::new(vec![
        ("x".into(), ColumnData::Numeric(values.clone())),
        ("g".into(), ColumnData::Categorical { codes, levels }),
    ])
    .unwrap();
    let mut buf = Vec::new();
    write_table(&table, &mut buf).unwrap();
    let declared = [("x".to_string(), CovariateKind::Continuous), ("g".to_string(), CovariateKind::Categorical)];
    let back = read_table(buf.as_slice(), &declared).unwrap();
    let got = back.numeric("x").unwrap();
    for (a, b) in values.iter().zip(got) {
        assert_eq!(a.map(f64::to_bits), b.map(f64::to_bits));
    }
    let labels = |t: &Table| -> Vec<Option<String>> {
        match t.column("g").unwrap() {
            ColumnData::Categorical { codes, levels } => codes.iter().map(|c| c.map(|k| levels[k].clone())).collect(),
            _ => unreachable!(),
        }
    };
    assert_eq!(labels(&table), labels(&back));
}

#[test]
fn schema_file_parses_and_rejects_unknown_keys() {
    let text = schema_text(&["A"], false);
    let parsed = ColumnSchema::from_toml_str(&text).unwrap();
    assert_eq!(parsed.exposures[0].personal, "A_p");
    assert!(ColumnSchema::from_toml_str(&format!("{text}\nextra = 1\n")).is_err());
}

#[test]
fn error_free_total_mass_joins_covariates() {
    let mut text = schema_text(&["A", "B", "C"], true);
    text = text.replacen("outcome = \"y\"\n", "outcome = \"y\"\ncalibrate_total_mass = false\n", 1);
    let schema = ColumnSchema::from_toml_str(&text).unwrap();
    let (mut ms, mut evs) = synthetic_tables(14, 400, 150, 0.5);
    let report = analyze_tables(&mut ms, &mut evs, &schema, &options("slr:corrected", 3)).unwrap();
    let calib = report.calibration.unwrap();
    assert_eq!(calib.exposures, ["A", "B", "C"]);
    assert!(calib.covariates.iter().any(|c| c == "pm"));
}

#[test]
fn missing_surrogate_rows_are_dropped_and_audited() {
    let schema = schema(&["A", "B", "C"], true);
    let (ms, mut evs) = synthetic_tables(15, 300, 120, 0.5);
    let mut cols: Vec<(String, ColumnData)> =
        ms.names().iter().map(|n| (n.clone(), ms.column(n).unwrap().clone())).collect();
    for (name, data) in cols.iter_mut() {
        if let ("A_s", ColumnData::Numeric(v)) = (name.as_str(), data) {
            for cell in v.iter_mut().take(10) {
                *cell = None;
            }
        }
    }
    let mut ms = Table::new(cols).unwrap();
    let report = analyze_tables(&mut ms, &mut evs, &schema, &options("slr:uncorrected", 3)).unwrap();
    let main = report.preprocessing.main.unwrap();
    assert_eq!(main.rows_in, 300);
    assert!(main.rows_dropped_incomplete >= 10);
    assert_eq!(main.rows_out + main.rows_dropped_incomplete + main.rows_dropped_outlier, 300);
}
