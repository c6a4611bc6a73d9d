//! Ingestion, splitting, standardization and scenario generation.

mod common;

use std::io::Write as _;

use ndarray::{Array2, Axis};
use proptest::prelude::*;
use tasfar::dataio::{load_csv, split_by_predicate, SplitRule, Standardizer, TrueFunction};
use tasfar::{gen_scenario, Dataset};

fn write_table(rows: &[(f64, f64, f64)]) -> tempfile::NamedTempFile {
    let mut file = tempfile::NamedTempFile::new().unwrap();
    writeln!(file, "lon,x,y").unwrap();
    for (lon, x, y) in rows {
        writeln!(file, "{lon},{x},{y}").unwrap();
    }
    file.flush().unwrap();
    file
}

/// Ordinary least squares with an intercept, via the normal equations.
fn least_squares(x: &Array2<f64>, y: &[f64]) -> Vec<f64> {
    let n = x.nrows();
    let k = x.ncols() + 1;
    let design = ndarray::concatenate(Axis(1), &[x.view(), Array2::ones((n, 1)).view()]).unwrap();
    let mut a = design.t().dot(&design);
    let mut b = design.t().dot(&ndarray::Array1::from(y.to_vec()));
    for col in 0..k {
        let pivot = (col..k).max_by(|&i, &j| a[[i, col]].abs().partial_cmp(&a[[j, col]].abs()).unwrap()).unwrap();
        for j in 0..k {
            a.swap([col, j], [pivot, j]);
        }
        b.swap(col, pivot);
        for row in 0..k {
            if row != col {
                let factor = a[[row, col]] / a[[col, col]];
                for j in 0..k {
                    a[[row, j]] -= factor * a[[col, j]];
                }
                b[row] -= factor * b[col];
            }
        }
    }
    (0..k).map(|i| b[i] / a[[i, i]]).collect()
}

#[test]
fn longitude_threshold_matches_a_row_scan() {
    let mut rows = Vec::new();
    for i in 0..20 {
        for j in 0..15 {
            rows.push((-124.0 + 0.37 * i as f64, j as f64, (i * j) as f64));
        }
    }
    let file = write_table(&rows);
    let data = load_csv::<f64>(file.path(), &["y".to_string()], &["x".to_string()]).unwrap();
    let rule: SplitRule = "lon<=-119.5".parse().unwrap();
    let (source, target) = split_by_predicate(&data, &rule).unwrap();
    let expected: Vec<f64> = rows.iter().filter(|r| r.0 <= -119.5).map(|r| r.2).collect();
    let got: Vec<f64> = target.labels().unwrap().iter().copied().collect();
    assert_eq!(got, expected);
    assert_eq!(source.len() + target.len(), rows.len());
}

#[test]
fn dataset_csv_round_trip() {
    let (source, _) = gen_scenario::<f64>(&common::concentrated_spec(3, 50)).unwrap();
    let file = tempfile::NamedTempFile::new().unwrap();
    source.save_csv(file.path()).unwrap();
    let back = load_csv::<f64>(file.path(), &["y".to_string()], &[]).unwrap();
    let raw = back.standardizer.as_ref().unwrap().invert(&back.features).unwrap();
    assert_eq!(back.feature_names, source.feature_names);
    assert!((&raw - &source.features).iter().all(|d| d.abs() < 1e-9));
    assert_eq!(back.labels().unwrap(), source.labels().unwrap());
}

#[test]
fn source_and_target_share_the_conditional() {
    let mut spec = common::concentrated_spec(11, 3000);
    spec.true_function = TrueFunction::Linear {
        weights: vec![0.8, -0.5, 0.3, 1.1],
        bias: 0.2,
    };
    spec.target_input.mean = vec![0.5; 4];
    spec.target_label_mode.center = 1.0;
    spec.target_label_mode.spread = 0.5;
    let (source, target) = gen_scenario::<f64>(&spec).unwrap();
    let fit = |d: &Dataset<f64>| least_squares(&d.features, d.labels().unwrap().column(0).as_slice().unwrap());
    let (a, b) = (fit(&source), fit(&target));
    let truth = [0.8, -0.5, 0.3, 1.1, 0.2];
    for i in 0..5 {
        assert!((a[i] - truth[i]).abs() < 0.02, "source coefficient {i}: {}", a[i]);
        assert!((b[i] - truth[i]).abs() < 0.02, "target coefficient {i}: {}", b[i]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn predicate_split_is_a_partition(
        values in prop::collection::vec(-100i32..100, 2..80),
        cut in -100i32..100,
    ) {
        let rows: Vec<(f64, f64, f64)> = values.iter().enumerate().map(|(i, &v)| (v as f64, i as f64, i as f64)).collect();
        prop_assume!(rows.iter().any(|r| r.0 < cut as f64) && rows.iter().any(|r| r.0 >= cut as f64));
        let file = write_table(&rows);
        let data = load_csv::<f64>(file.path(), &["y".to_string()], &["x".to_string()]).unwrap();
        let rule: SplitRule = format!("lon<{cut}").parse().unwrap();
        let (source, target) = split_by_predicate(&data, &rule).unwrap();
        prop_assert_eq!(source.len() + target.len(), rows.len());
        let mut ids: Vec<f64> = source.labels().unwrap().iter().chain(target.labels().unwrap().iter()).copied().collect();
        ids.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let expected: Vec<f64> = (0..rows.len()).map(|i| i as f64).collect();
        prop_assert_eq!(ids, expected);
        prop_assert!(target.columns["lon"].iter().all(|v| v.parse::<f64>().unwrap() < cut as f64));
    }

    #[test]
    fn standardization_round_trips(
        cells in prop::collection::vec(-1e4..1e4f64, 6..60),
        constant in -50.0..50.0f64,
    ) {
        let n = cells.len() / 2;
        let varied = Array2::from_shape_vec((n, 2), cells[..2 * n].to_vec()).unwrap();
        let x = ndarray::concatenate(Axis(1), &[varied.view(), Array2::from_elem((n, 1), constant).view()]).unwrap();
        let names = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let s = Standardizer::fit(&x, &names);
        prop_assert!(s.zero_variance[2]);
        let back = s.invert(&s.apply(&x).unwrap()).unwrap();
        for (p, q) in back.iter().zip(x.iter()) {
            prop_assert!((p - q).abs() <= 1e-9 * q.abs().max(1.0));
        }
    }
}
