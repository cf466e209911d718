//! Harness runs, result files and the command-line interface.

use std::fs;
use std::path::Path;
use std::process::Command;

use hnet_unlearn::harness::{self, DatasetSpec, RunConfig};
use hnet_unlearn::metrics::{AccuracyTrace, MetricsReport};

fn synthetic(sequence: &str, seeds: Vec<u64>) -> RunConfig {
    RunConfig {
        dataset: DatasetSpec::Synthetic {
            classes: 10,
            dim: 20,
            n_per_class: 300,
            separation: 8.0,
            seed: 1,
        },
        sequence: sequence.into(),
        main_hidden: vec![32],
        seeds,
        ..RunConfig::default()
    }
}

fn tiny(sequence: &str) -> RunConfig {
    RunConfig {
        dataset: DatasetSpec::Synthetic {
            classes: 3,
            dim: 6,
            n_per_class: 30,
            separation: 5.0,
            seed: 2,
        },
        sequence: sequence.into(),
        main_hidden: vec![8],
        hypernet: hnet_unlearn::HypernetConfig {
            hidden: vec![16],
            ..Default::default()
        },
        seeds: vec![0, 1],
        ..RunConfig::default()
    }
}

#[test]
fn single_learn_reaches_high_accuracy() {
    let r = harness::run_sequence(&synthetic("L0", vec![0])).unwrap();
    let acc = r.seeds[0].trace.accuracy(0, 0).unwrap();
    assert!(acc > 95.0, "{acc}");
}

#[test]
fn learn_then_unlearn_returns_to_chance() {
    let r = harness::run_sequence(&synthetic("L0 U0", vec![0, 1])).unwrap();
    for s in &r.seeds {
        let acc = s.trace.accuracy(0, 1).unwrap();
        assert!((acc - 10.0).abs() <= 5.0, "seed {}: {acc}", s.seed);
    }
}

#[test]
fn forgotten_task_does_not_relapse() {
    let r = harness::run_sequence(&synthetic("L0 L1 U0 L2", vec![0])).unwrap();
    let trace = &r.seeds[0].trace;
    for op in 2..trace.len() {
        let acc = trace.accuracy(0, op).unwrap();
        assert!((acc - 10.0).abs() <= 5.0, "op {op}: {acc}");
    }
    assert!(r.seeds[0].report.relapse[0].value < 5.0);
}

#[test]
fn only_learning_comparison_shares_seeds_and_retained_tasks() {
    let c = harness::compare_only_learning(&tiny("L0 L1 U0 L2")).unwrap();
    assert_eq!(c.retained, vec![1, 2]);
    assert_eq!(c.only_learning.sequence, "L0 L1 L2");
    assert_eq!(c.ra_with_unlearning.len(), 2);
    assert_eq!(c.ra_only_learning.len(), 2);
    let seeds = |r: &harness::RunResult| r.seeds.iter().map(|s| s.seed).collect::<Vec<_>>();
    assert_eq!(seeds(&c.with_unlearning), seeds(&c.only_learning));
    assert!(harness::compare_only_learning(&tiny("L0 L1")).is_err());
}

fn csv_rows(path: &Path) -> usize {
    csv::Reader::from_path(path).unwrap().records().count()
}

#[test]
fn emitted_results_reload_and_rerun_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny("L0 L1 U0 L2 U1");
    let result = harness::run_sequence(&cfg).unwrap();
    harness::emit_results(&result, &cfg, dir.path()).unwrap();

    for s in &result.seeds {
        let trace = AccuracyTrace::read_csv(fs::File::open(harness::trace_file(dir.path(), s.seed)).unwrap()).unwrap();
        assert_eq!(trace, s.trace);
        let stored = fs::read_to_string(harness::report_file(dir.path(), s.seed)).unwrap();
        let rebuilt = MetricsReport::from_trace(&trace, s.report.mia).unwrap().to_json().unwrap();
        assert_eq!(rebuilt, stored);
    }

    let ops = result.seeds[0].trace.len();
    let tasks = result.seeds[0].trace.tasks().count();
    assert_eq!(csv_rows(&dir.path().join("plot.csv")), ops * tasks);

    let echoed = RunConfig::load(&dir.path().join("config.json")).unwrap();
    assert_eq!(echoed, cfg);
    let again = harness::run_sequence(&echoed).unwrap();
    assert!(again.seeds.iter().zip(&result.seeds).all(|(a, b)| a.same_outcome(b)));
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hnet-unlearn"))
}

fn write_config(dir: &Path, cfg: &RunConfig) -> std::path::PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string(cfg).unwrap()).unwrap();
    path
}

#[test]
fn cli_run_writes_outputs_and_flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &tiny("L0 L1 U0"));
    let out = dir.path().join("out");
    let status = cli()
        .args(["run", "--config"])
        .arg(&config)
        .args(["--seed", "3,4", "--sequence", "L0 U0", "--strategy", "norm_reduce", "--no-anneal", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(status.status.success());
    let echoed = RunConfig::load(&out.join("config.json")).unwrap();
    assert_eq!(echoed.seeds, vec![3, 4]);
    assert_eq!(echoed.sequence, "L0 U0");
    assert_eq!(echoed.unlearn.strategy.as_str(), "norm_reduce");
    assert!(!echoed.unlearn.anneal);
    assert!(harness::trace_file(&out, 4).exists());

    let metrics = cli().arg("metrics").arg(harness::trace_file(&out, 3)).output().unwrap();
    assert!(metrics.status.success());
    let report: serde_json::Value = serde_json::from_slice(&metrics.stdout).unwrap();
    assert!(report.get("fa").is_some());
}

#[test]
fn cli_run_can_include_the_only_learning_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny("L0 L1 U0 L2");
    cfg.compare_only_learning = true;
    let config = write_config(dir.path(), &cfg);
    let out = dir.path().join("out");
    let run = cli().args(["run", "--config"]).arg(&config).arg("--out").arg(&out).output().unwrap();
    assert!(run.status.success());
    let c: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("comparison.json")).unwrap()).unwrap();
    assert_eq!(c["retained"], serde_json::json!([1, 2]));
    assert!(out.join("plot.csv").exists());
}

#[test]
fn cli_exit_codes_follow_error_category() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &tiny("L0"));
    let code = |args: &[&str]| cli().args(args).output().unwrap().status.code();

    let cfg = config.to_str().unwrap();
    assert_eq!(code(&["run", "--config", cfg, "--sequence", "U0"]), Some(3));

    let broken = dir.path().join("broken.json");
    fs::write(&broken, "{").unwrap();
    assert_eq!(code(&["run", "--config", broken.to_str().unwrap()]), Some(2));

    let bad_trace = dir.path().join("trace.csv");
    fs::write(&bad_trace, "op_index,instruction,task_id,measured_task,accuracy\n0,X,0,0,1.0\n").unwrap();
    assert_eq!(code(&["metrics", bad_trace.to_str().unwrap()]), Some(6));

    let mut missing = tiny("L0");
    missing.dataset = DatasetSpec::PermutedMnist {
        path: dir.path().join("no-such-dir"),
        n_train: 10,
        n_test: 10,
        seed: 0,
    };
    let missing_cfg = dir.path().join("missing.json");
    fs::write(&missing_cfg, serde_json::to_string(&missing).unwrap()).unwrap();
    assert_eq!(code(&["run", "--config", missing_cfg.to_str().unwrap()]), Some(5));

    assert_eq!(code(&["verify"]), Some(0));
}
