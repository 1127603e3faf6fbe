use std::process::Command;

use gfn_teacher::config::{Exploration, L1Method, Objective, RunConfig, Task};
use gfn_teacher::exploration::BehaviorSchedule;
use gfn_teacher::grid::GridEnv;
use gfn_teacher::grid_policy::GridPolicy;
use gfn_teacher::harness::{run, run_into, train_rng, write_metrics_csv, GridTrainer};
use gfn_teacher::nn::LearningRates;
use gfn_teacher::Error;

fn small(exploration: Exploration, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::grid(2, 8, exploration, seed);
    cfg.budget = Some(800);
    cfg.model.hidden = Some(vec![16, 16]);
    cfg.eval.l1_method = L1Method::Exact;
    cfg
}

fn csv_of(cfg: &RunConfig) -> String {
    let (rows, _) = run(cfg).unwrap();
    let mut out = Vec::new();
    write_metrics_csv(&rows, &mut out).unwrap();
    String::from_utf8(out).unwrap()
}

#[test]
fn minimal_config_file_parses_with_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, "task = \"grid\"\n\n[grid]\ndim = 2\nside = 128\n").unwrap();
    let cfg = RunConfig::from_path(&path).unwrap();
    assert_eq!(cfg.exploration, Exploration::OnPolicy);
    assert_eq!(cfg.objective, Objective::Tb);
    assert_eq!(cfg.budget(), 96_000);
    assert_eq!(cfg.batch_size(), 16);
    assert_eq!(cfg.model.lr_policy, 1e-3);
    assert_eq!(cfg.model.lr_log_z, 1e-1);
    assert_eq!(cfg.eval.every_fraction, 0.02);
    assert_eq!(cfg.eval.l1_samples, 100_000);
}

#[test]
fn misspelled_key_is_a_hard_error() {
    let text = "task = \"grid\"\n[grid]\ndim = 2\nside = 8\n[teacher]\nalpah = 0.5\n";
    match RunConfig::from_toml_str(text).unwrap_err() {
        Error::Config { key, line, .. } => assert_eq!((key.as_str(), line), ("alpah", 6)),
        other => panic!("unexpected {other}"),
    }
    match RunConfig::from_toml_str("task = \"grid\"\nbatch_size = -3\n[grid]\ndim = 2\nside = 8\n").unwrap_err() {
        Error::Config { key, line, .. } => assert_eq!((key.as_str(), line), ("batch_size", 2)),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn full_config_round_trips_through_text() {
    let mut cfg = RunConfig::diffusion(Task::Gmm25, Exploration::Teacher, 11);
    cfg.ratio = Some(BehaviorSchedule::new(3, 1, 2).unwrap());
    cfg.buffer.capacity = Some(5000);
    cfg.teacher.threshold_quantile = Some(0.8);
    cfg.sde.sigma = Some(2.0);
    let cfg = cfg.resolved().unwrap();
    let text = cfg.to_toml_string().unwrap();
    assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
}

#[test]
fn zero_budget_runs_no_rounds() {
    let mut cfg = small(Exploration::Teacher, 0);
    cfg.budget = Some(0);
    let (rows, summary) = run(&cfg).unwrap();
    assert!(rows.is_empty());
    assert_eq!(summary.rounds, 0);
    assert_eq!(summary.reward_calls, 0);
}

#[test]
fn identical_configs_give_identical_csv() {
    let mut cfg = small(Exploration::TeacherLocalSearch, 9);
    cfg.local_search.every_n_batches = 4;
    assert_eq!(csv_of(&cfg), csv_of(&cfg));
    let mut other = cfg.clone();
    other.seed = 10;
    assert_ne!(csv_of(&cfg), csv_of(&other));

    let mut diff = RunConfig::diffusion(Task::Gmm25, Exploration::Teacher, 4);
    diff.batch_size = Some(8);
    diff.sde.steps = 8;
    diff.sde.max_rounds = 18;
    diff.teacher.threshold_samples = 16;
    diff.eval.bound_samples = Some(32);
    diff.model.hidden = Some(vec![8]);
    assert_eq!(csv_of(&diff), csv_of(&diff));
}

#[test]
fn reward_calls_stay_within_one_batch_of_the_budget() {
    for (exploration, budget) in [
        (Exploration::OnPolicy, 800),
        (Exploration::Teacher, 805),
        (Exploration::TeacherLocalSearch, 1000),
        (Exploration::Prt, 817),
        (Exploration::Epsilon, 16),
        (Exploration::Teacher, 15),
    ] {
        let mut cfg = small(exploration, 1);
        cfg.budget = Some(budget);
        cfg.local_search.every_n_batches = 3;
        let (rows, s) = run(&cfg).unwrap();
        assert!(s.reward_calls <= budget, "{exploration} spent {}", s.reward_calls);
        assert!(s.reward_calls + 16 > budget, "{exploration} left {} unused", budget - s.reward_calls);
        assert!(rows.iter().all(|r| r.reward_calls <= budget));
    }
}

#[test]
fn on_policy_run_matches_a_teacher_free_tb_loop() {
    let cfg = small(Exploration::OnPolicy, 21);
    let mut trainer = GridTrainer::new(&cfg).unwrap();
    assert!(trainer.teacher().is_none());
    for _ in 0..10 {
        trainer.round().unwrap().unwrap();
    }

    let env = GridEnv::new(cfg.grid.clone().unwrap()).unwrap();
    let mut rng = train_rng(cfg.seed);
    let lr = LearningRates {
        layers: cfg.model.lr_policy,
        scalars: cfg.model.lr_log_z,
    };
    let mut policy = GridPolicy::new(&env, &cfg.hidden(), cfg.activation(), false, lr, cfg.model.adam, &mut rng).unwrap();
    for _ in 0..10 {
        let trajs = env.sample_trajectories(&policy, cfg.batch_size(), 0.0, &mut rng).unwrap();
        let log_r: Vec<f64> = trajs.iter().map(|t| env.log_reward_of(t.terminal())).collect();
        policy.tb_step(&env, &trajs, &log_r).unwrap();
    }
    assert_eq!(trainer.student().params(), policy.params());
    assert_eq!(trainer.student().adam_steps(), 10);
}

#[test]
fn divergence_aborts_with_a_diagnostic_row() {
    let mut cfg = small(Exploration::OnPolicy, 2);
    cfg.model.lr_log_z = 1e308;
    let mut rows = Vec::new();
    let err = run_into(&cfg, &mut rows).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    assert!(rows.last().unwrap().student_loss.unwrap().is_nan());
}

#[test]
fn cli_writes_csv_and_rejects_bad_configs() {
    let bin = env!("CARGO_BIN_EXE_gfn-teacher");
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.toml");
    let out = dir.path().join("metrics.csv");
    let cfg = small(Exploration::Teacher, 0);
    std::fs::write(&cfg_path, cfg.to_toml_string().unwrap()).unwrap();
    let status = Command::new(bin)
        .args(["train", "--config"])
        .arg(&cfg_path)
        .args(["--seed", "3", "--algo", "prt", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let mut expected = cfg.clone();
    expected.seed = 3;
    expected.exploration = Exploration::Prt;
    assert_eq!(std::fs::read_to_string(&out).unwrap(), csv_of(&expected));

    std::fs::write(&cfg_path, "task = \"grid\"\nbudgte = 5\n[grid]\ndim = 2\nside = 8\n").unwrap();
    let bad = Command::new(bin).args(["train", "--config"]).arg(&cfg_path).output().unwrap();
    assert!(!bad.status.success());
    let msg = String::from_utf8_lossy(&bad.stderr);
    assert!(msg.contains("budgte") && msg.contains("line 2"), "{msg}");

    let target = dir.path().join("target.csv");
    let ok = Command::new(bin)
        .args(["grid-target", "--dim", "2", "--side", "4", "--out"])
        .arg(&target)
        .status()
        .unwrap();
    assert!(ok.success());
    assert_eq!(std::fs::read_to_string(&target).unwrap().lines().count(), 17);
}
