//! Aggregation, improvement, correlation and report emission.

use std::fs::File;
use std::sync::Arc;

use kgce_core::analysis::{
    aggregate, emit_report, improve_pct, improvement, pearson, pearson_matrix, AnalysisError, Report, RunAggregate,
};
use kgce_core::eval::{evaluate_episode, CpaDefinition, Metric, MetricsReport};
use kgce_core::task_graph::TaskGraph;
use kgce_testkit::{fixtures_dir, random_dag, random_episode};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn reports(seed: u64, n: usize) -> Vec<MetricsReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let max_steps = rng.gen_range(1..=12);
            let graph = Arc::new(TaskGraph::new(random_dag(&mut rng, 6, max_steps)).unwrap());
            evaluate_episode(&random_episode(&mut rng, graph, 12), CpaDefinition::default()).unwrap()
        })
        .collect()
}

#[test]
fn mean_of_two_and_identity() {
    let mut rs = reports(1, 2);
    rs[0].cr = 0.5;
    rs[1].cr = 1.0;
    assert_eq!(aggregate(&rs, "x").unwrap().cr, 0.75);
    let one = aggregate(&rs[..1], "x").unwrap();
    for m in Metric::ALL {
        assert_eq!(one.value(m), rs[0].value(m));
    }
    assert!(matches!(aggregate(&[], "empty"), Err(AnalysisError::EmptyRun(_))));
}

#[test]
fn large_ensemble_matches_streaming_recount() {
    let rs = reports(104, 104);
    let agg = aggregate(&rs, "run").unwrap();
    assert_eq!(agg.episodes, 104);
    for m in Metric::ALL {
        // Kahan-compensated second pass.
        let (mut sum, mut c) = (0.0f64, 0.0f64);
        for r in &rs {
            let y = r.value(m) - c;
            let t = sum + y;
            c = (t - sum) - y;
            sum = t;
        }
        assert!((agg.value(m) - sum / 104.0).abs() < 1e-12, "{m}");
    }
    let rms = rs.iter().filter(|r| r.rms).count() as f64 / 104.0;
    assert!((agg.rms_fraction - rms).abs() < 1e-15);
}

#[test]
fn reference_examples_for_improvement() {
    let close = |a: f64, b: f64| (a - b).abs() <= 0.02;
    assert!(close(improve_pct(60.02, 75.26).unwrap(), 25.39));
    assert!(close(improve_pct(52.01, 41.47).unwrap(), -20.27));
    assert!(close(improve_pct(5.82, 12.09).unwrap(), 107.73));
}

#[test]
fn table_two_fixture_reproduces_improve_column() {
    let load = |arm: &str| {
        RunAggregate::from_reader(File::open(fixtures_dir().join(format!("reference/pooled/{arm}/aggregate.json"))).unwrap())
            .unwrap()
    };
    let rows = improvement(&load("without_kb"), &load("with_kb"));
    let published = [25.39, 56.37, 33.06, 18.66, 32.39, -20.27, -43.81, -32.51];
    for (row, want) in rows.iter().zip(published) {
        let got = row.improve_pct.unwrap();
        assert!((got - want).abs() <= 0.02, "{}: {got} vs {want}", row.metric);
    }
}

#[test]
fn csv_has_header_and_eight_metric_rows() {
    let a = RunAggregate::from_values("a", 3, [0.5; 8]);
    let b = RunAggregate::from_values("b", 3, [0.25; 8]);
    let rows = improvement(&a, &b);
    let text = String::from_utf8(emit_report(&[a, b], &rows, None, "csv").unwrap()).unwrap();
    let section: Vec<&str> = text.lines().skip_while(|l| *l != "# improvement").skip(1).collect();
    assert_eq!(section.len(), 9);
    assert!(section[0].starts_with("metric,without,with,improve_pct"));
    let names: Vec<&str> = section[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["CR", "CPA", "Precision", "Recall", "F1", "BR", "OoR", "RMS"]);
    assert!(section[1].ends_with(",-50.00"));
}

#[test]
fn zero_baseline_row_is_not_applicable() {
    let a = RunAggregate::from_values("a", 1, [0.0; 8]);
    let b = RunAggregate::from_values("b", 1, [0.5; 8]);
    let rows = improvement(&a, &b);
    assert!(rows.iter().all(|r| r.improve_pct.is_none()));
    let text = String::from_utf8(emit_report(&[], &rows, None, "csv").unwrap()).unwrap();
    assert!(text.lines().any(|l| l.starts_with("CR,0,0.5,,") && l.ends_with(",n/a")));
}

#[test]
fn zero_variance_columns_are_not_applicable() {
    let mut rs = reports(5, 10);
    for r in &mut rs {
        r.rms = false;
    }
    let m = pearson_matrix(&rs, &Metric::ALL).unwrap();
    for other in Metric::ALL {
        assert_eq!(m.get(Metric::Rms, other), None);
    }
    assert!(matches!(pearson_matrix(&rs[..1], &Metric::ALL), Err(AnalysisError::InsufficientData(1))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn matrix_is_symmetric_with_unit_diagonal(seed in any::<u64>(), n in 2usize..40) {
        let rs = reports(seed, n);
        let m = pearson_matrix(&rs, &Metric::ALL).unwrap();
        for i in 0..8 {
            let col: Vec<f64> = rs.iter().map(|r| r.value(Metric::ALL[i])).collect();
            let constant = col.iter().all(|v| *v == col[0]);
            prop_assert_eq!(m.values[i][i], if constant { None } else { Some(1.0) });
            for j in 0..8 {
                prop_assert_eq!(m.values[i][j], m.values[j][i]);
                if let Some(r) = m.values[i][j] {
                    prop_assert!((-1.0..=1.0).contains(&r));
                }
            }
        }
    }

    #[test]
    fn pearson_is_scale_and_shift_invariant(xs in proptest::collection::vec(-1e3f64..1e3, 3..20), a in 0.5f64..4.0, b in -10f64..10.0) {
        let ys: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
        if let Some(r) = pearson(&xs, &ys) {
            prop_assert!((r - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn aggregate_ignores_order(seed in any::<u64>(), n in 1usize..30) {
        let rs = reports(seed, n);
        let mut shuffled = rs.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        prop_assert_eq!(aggregate(&rs, "r").unwrap(), aggregate(&shuffled, "r").unwrap());
    }

    #[test]
    fn improvement_follows_its_formula(w in 0.01f64..1.0, v in 0.0f64..1.0) {
        let pct = improve_pct(w, v).unwrap();
        prop_assert_eq!(pct, (v - w) / w * 100.0);
        prop_assert_eq!(pct > 0.0, v > w);
        prop_assert_eq!(pct < 0.0, v < w);
        let back = improve_pct(v.max(1e-9), w);
        if v > 0.0 {
            prop_assert_eq!(back.unwrap(), (w - v) / v * 100.0);
        }
    }

    #[test]
    fn json_report_round_trips(seed in any::<u64>()) {
        let rs = reports(seed, 12);
        let (a, b) = rs.split_at(6);
        let (a, b) = (aggregate(a, "without").unwrap(), aggregate(b, "with").unwrap());
        let rows = improvement(&a, &b);
        let m = pearson_matrix(&rs, &Metric::ALL).unwrap();
        let bytes = emit_report(&[a.clone(), b.clone()], &rows, Some(&m), "json").unwrap();
        let back = Report::from_json(&bytes).unwrap();
        prop_assert_eq!(back.aggregates, vec![a, b]);
        prop_assert_eq!(back.improvements, rows);
        prop_assert_eq!(back.correlation, Some(m));
    }
}
