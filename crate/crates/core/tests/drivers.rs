//! Every experiment driver at toy scale: runs, writes its documented files,
//! and reproduces its metric columns under the same seed.

use rrm_core::bench::{self, ExperimentConfig, ExperimentId, Table};
use serde_json::json;

fn tiny(id: ExperimentId, out: &std::path::Path) -> ExperimentConfig {
    let mut overlay = json!({
        "train_sizes": [60],
        "val_size": 20,
        "test_size": 20,
        "hidden_width": 16,
        "train": {"max_epochs": 2, "patience": 2},
        "out_dir": out,
    });
    let extra = match id {
        ExperimentId::Cs1Subcarriers => json!({"subcarriers": [4, 8], "k": [2]}),
        ExperimentId::Cs1Trainsize => json!({"subcarriers": [4], "train_sizes": [40, 60], "k": [2]}),
        ExperimentId::Cs1Layers => json!({"subcarriers": [4], "hidden_layers": [1, 2], "k": [2]}),
        ExperimentId::Cs1Nonstat => json!({"subcarriers": [4], "k": [1, 3], "l_max": 2, "m_max": 3}),
        ExperimentId::Ageing | ExperimentId::SemiOnline => json!({
            "subcarriers": [8],
            "k": [4],
            "hidden_layers": [1],
            "stream": {"len": 300, "shift_at": 100},
            "semi_online": {"update_period": 40, "window": 50, "retrain_samples": 80, "train": {"max_epochs": 2, "patience": 2}},
        }),
        ExperimentId::Cs2Nonstat => json!({"users": [2], "subcarriers": [4], "k": [1, 2], "l_max": 2, "m_max": 3}),
        ExperimentId::Cs2bUsers => json!({"users": [2, 3], "dqn_episodes": 10}),
        ExperimentId::DqnCurves => json!({"dqn_episodes": 30, "eval_episodes": 10, "dqn": {"warmup_episodes": 5}}),
        ExperimentId::Cs3Time | ExperimentId::Cs3Rate => json!({"subcarriers": [2, 4], "test_size": 5}),
        ExperimentId::Cs3Cdf => json!({"subcarriers": [4], "test_size": 5}),
    };
    for (k, v) in extra.as_object().unwrap() {
        overlay[k] = v.clone();
    }
    ExperimentConfig::with_overlay(id, &overlay).unwrap()
}

fn expected_files(id: ExperimentId) -> &'static [&'static str] {
    match id {
        ExperimentId::Cs1Subcarriers | ExperimentId::Cs1Trainsize | ExperimentId::Cs1Layers | ExperimentId::Cs1Nonstat => &["cs1"],
        ExperimentId::Ageing | ExperimentId::SemiOnline => &["trace", "summary"],
        ExperimentId::Cs2Nonstat => &["cs2_nonstat"],
        ExperimentId::Cs2bUsers => &["cs2b_users"],
        ExperimentId::DqnCurves => &["dqn_training", "dqn_eval", "dqn_summary"],
        ExperimentId::Cs3Time => &["cs3_time"],
        ExperimentId::Cs3Rate => &["cs3_rate"],
        ExperimentId::Cs3Cdf => &["cs3_rates", "cs3_power", "cs3_summary"],
    }
}

#[test]
fn every_driver_writes_its_tables_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    for id in ExperimentId::ALL {
        let cfg = tiny(id, dir.path());
        let first = bench::run_experiment(&cfg, Some("a")).unwrap();
        let second = bench::run_experiment(&cfg, Some("b")).unwrap();
        let names: Vec<&str> = first.tables.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, expected_files(id), "{id}");
        assert!(first.dir.join("run.json").exists());
        for ((name, a), (_, b)) in first.tables.iter().zip(&second.tables) {
            assert!(!a.rows.is_empty(), "{id}/{name} is empty");
            assert_eq!(a.columns[0], "seed");
            assert_eq!(a.without_timings(), b.without_timings(), "{id}/{name} is not reproducible");
            let disk = Table::read(&first.dir.join(format!("{name}.csv"))).unwrap();
            assert_eq!(disk.columns, a.columns);
            assert_eq!(disk.rows.len(), a.rows.len());
        }
        let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(first.dir.join("run.json")).unwrap()).unwrap();
        assert_eq!(meta["id"], id.id());
        assert_eq!(meta["config"]["seeds"], json!([1]));
    }
}

#[test]
fn sweep_rows_follow_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(ExperimentId::Cs1Nonstat, dir.path());
    cfg.seeds = vec![3, 4];
    let tables = bench::collect(&cfg).unwrap();
    let cs1 = &tables[0].1;
    assert_eq!(cs1.numbers("seed").unwrap(), vec![3.0, 3.0, 4.0, 4.0]);
    assert_eq!(cs1.numbers("k").unwrap(), vec![1.0, 3.0, 1.0, 3.0]);
    assert!(cs1.numbers("unseen_r_bar").unwrap().iter().all(|x| x.is_finite()));
}

#[test]
fn default_run_id_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(ExperimentId::Cs3Time, dir.path());
    assert_eq!(cfg.hash(), cfg.clone().hash());
    let mut other = cfg.clone();
    other.beta = 2.0;
    assert_ne!(cfg.hash(), other.hash());
}
