use std::sync::OnceLock;

use fedcache_core::engine::{run_experiment, ExperimentConfig};
use fedcache_core::report::{emit_report, read_report, write_round_log, write_table, Format, CSV_HEADER};
use fedcache_core::sweep::{recommend_all, recommend_strategy, run_sweep, sort_rows, Objective, SweepRow, SweepSpec};
use fedcache_core::{Error, Policy};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn default_rows() -> Vec<SweepRow> {
    static ROWS: OnceLock<Vec<SweepRow>> = OnceLock::new();
    ROWS.get_or_init(|| {
        let outcome = run_sweep(&SweepSpec::new(ExperimentConfig::default()), 2).unwrap();
        assert!(outcome.succeeded());
        outcome.rows
    })
    .clone()
}

#[test]
fn default_sweep_table_shape() {
    let rows = default_rows();
    assert_eq!(rows.len(), 48);
    for policy in Policy::CACHING {
        assert_eq!(rows.iter().filter(|r| r.policy == policy).count(), 12);
    }
    for row in rows.iter().filter(|r| r.policy == Policy::None) {
        assert_eq!(row.cache_hits, 0);
        assert_eq!(row.peak_mem_bytes, 0);
    }
    // At τ=0.01 on this workload nothing is withheld, so every policy matches the baseline.
    for row in rows.iter().filter(|r| r.tau == 0.01) {
        assert_eq!(row.comm_bytes, 1_696_000);
        assert_eq!(row.reduction_vs_baseline, Some(0.0));
    }

    let mut csv = Vec::new();
    write_table(&rows, Format::Csv, &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    assert_eq!(lines.count(), 48);
}

#[test]
fn recommendation_on_default_benchmark() {
    let rows = default_rows();
    let rec = recommend_strategy(&rows, 0.10, 4, Objective::default()).unwrap();
    assert_eq!(rec.policy, Policy::Fifo);
    assert!(rec.feasible);
    assert_eq!(rec.candidates.len(), 3);

    // A floor nobody reaches falls back to the most accurate policy.
    let rec = recommend_strategy(&rows, 0.10, 4, Objective::MinCommAtAccuracyFloor { floor: 1.1 }).unwrap();
    assert!(!rec.feasible);
    let best = rec
        .candidates
        .iter()
        .map(|c| c.mean_final_accuracy)
        .fold(f64::NEG_INFINITY, f64::max);
    let chosen = rec.candidates.iter().find(|c| c.policy == rec.policy).unwrap();
    assert_eq!(chosen.mean_final_accuracy, best);
}

#[test]
fn recommendation_ignores_row_order() {
    let rows = default_rows();
    let expected = recommend_all(&rows, Objective::default()).unwrap();
    let budget = Objective::MaxAccuracyAtCommBudget { budget: 1_000_000 };
    let expected_budget = recommend_all(&rows, budget).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let mut shuffled = rows.clone();
        shuffled.shuffle(&mut rng);
        assert_eq!(recommend_all(&shuffled, Objective::default()).unwrap(), expected);
        assert_eq!(recommend_all(&shuffled, budget).unwrap(), expected_budget);
    }
}

#[test]
fn recommendation_needs_every_caching_policy() {
    let rows: Vec<SweepRow> = default_rows().into_iter().filter(|r| r.policy != Policy::Lru).collect();
    match recommend_strategy(&rows, 0.10, 4, Objective::default()) {
        Err(Error::IncompleteTable(missing)) => assert_eq!(missing, vec!["LRU@tau=0.1,C=4".to_string()]),
        other => panic!("expected incomplete table, got {other:?}"),
    }
}

#[test]
fn report_round_trips_in_both_formats() {
    let mut rows = default_rows();
    rows[0].reduction_vs_baseline = None;
    sort_rows(&mut rows);
    let dir = tempfile::tempdir().unwrap();
    for name in ["table.csv", "table.json"] {
        let path = dir.path().join(name);
        let format = Format::from_path(&path);
        emit_report(&rows, format, &path).unwrap();
        assert_eq!(read_report(&path, format).unwrap(), rows, "{name}");
    }
}

#[test]
fn round_log_is_reproducible() {
    let config = ExperimentConfig { rounds: 30, seed: 9, policy: Policy::Pbr, ..ExperimentConfig::default() };
    let render = || {
        let result = run_experiment(&config).unwrap();
        let mut buf = Vec::new();
        write_round_log(&result.log, &mut buf).unwrap();
        buf
    };
    let first = render();
    assert_eq!(first, render());
    assert_eq!(String::from_utf8(first).unwrap().lines().count(), 31);
}

#[test]
fn no_update_counted_twice() {
    for policy in Policy::ALL {
        let config = ExperimentConfig { rounds: 40, policy, cache_capacity: 3, ..ExperimentConfig::default() };
        let result = run_experiment(&config).unwrap();
        let m = &result.metrics;
        assert_eq!(m.transmissions_total + m.cache_hits_total + m.skips_total, 40 * 10);
        for o in &result.log {
            for id in &o.cache_hit_ids {
                assert!(!o.transmitted_ids.contains(id), "{policy} round {}: client {id} both sent and cached", o.round);
            }
        }
    }
}
