use std::fs;
use std::path::{Path, PathBuf};

use shopgraph::dispatch::DispatchRule;
use shopgraph::harness::{
    cmd_baseline, cmd_eval, cmd_train, run_baseline, save_agents, train_from_config, HarnessError, Overrides,
    RunConfig,
};
use shopgraph::imm::instance::shipped_instance;

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, body).unwrap();
    path
}

const SMALL_RMC: &str = "env = \"rmc\"\nseed = 5\n[rmc]\ntarget_wp1 = 2\ntarget_wp2 = 2\nmax_steps = 60\n\
[encoder]\nrounds = 1\nmessage_width = 4\nhidden = [8]\n[heads]\nhidden = [16]\n[schedule]\nepisodes = 6\neval_every = 3\n";

fn out(dir: &Path, name: &str) -> Overrides {
    Overrides {
        out: Some(dir.join(name)),
        ..Overrides::default()
    }
}

#[test]
fn zero_episodes_writes_header_only_curves() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_RMC);
    let o = Overrides {
        episodes: Some(0),
        ..out(dir.path(), "run")
    };
    let res = cmd_train(&cfg, &o).unwrap();
    assert_eq!(res.report.episodes, 0);
    let curves = fs::read_to_string(dir.path().join("run/curves.csv")).unwrap();
    assert_eq!(curves, "episode,agent_id,return,episode_steps,success_flag,makespan\n");
    assert!(dir.path().join("run/checkpoints/agent1_policy.net").exists());
}

#[test]
fn training_writes_one_curve_row_per_agent_and_episode() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_RMC);
    cmd_train(&cfg, &out(dir.path(), "run")).unwrap();
    let curves = fs::read_to_string(dir.path().join("run/curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 6 * 2);
    let evals = fs::read_to_string(dir.path().join("run/evaluations.csv")).unwrap();
    assert_eq!(evals.lines().count(), 1 + 2);
    let manifest = RunConfig::load(&dir.path().join("run/run-manifest.toml")).unwrap();
    assert_eq!(manifest.seed, 5);
    assert_eq!(manifest.schedule.episodes, 6);
}

#[test]
fn different_seeds_give_different_curves() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_RMC);
    cmd_train(&cfg, &out(dir.path(), "a")).unwrap();
    let o = Overrides {
        seed: Some(6),
        ..out(dir.path(), "b")
    };
    cmd_train(&cfg, &o).unwrap();
    let a = fs::read(dir.path().join("a/curves.csv")).unwrap();
    let b = fs::read(dir.path().join("b/curves.csv")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn eval_of_checkpoints_writes_one_row_per_episode() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_RMC);
    cmd_train(&cfg, &out(dir.path(), "run")).unwrap();
    let runs = cmd_eval(&dir.path().join("run/checkpoints"), &cfg, 1, false, &out(dir.path(), "eval")).unwrap();
    assert_eq!(runs.len(), 1);
    let report = fs::read_to_string(dir.path().join("eval/report.csv")).unwrap();
    assert_eq!(report.lines().count(), 2);
    assert!(report.starts_with("policy,seed,makespan,steps,success\ntrained,5,"));
}

#[test]
fn checkpoint_shape_mismatch_names_the_network() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_RMC);
    cmd_train(&cfg, &out(dir.path(), "run")).unwrap();
    let wider = write_config(dir.path(), &SMALL_RMC.replace("hidden = [16]", "hidden = [17]"));
    let err = cmd_eval(&dir.path().join("run/checkpoints"), &wider, 1, false, &out(dir.path(), "eval")).unwrap_err();
    match err {
        HarnessError::CheckpointShape { net, .. } => assert_eq!(net, "agent0_policy.net"),
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn missing_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_RMC);
    let err = cmd_eval(&dir.path().join("nowhere"), &cfg, 1, false, &out(dir.path(), "eval")).unwrap_err();
    assert!(matches!(err, HarnessError::Checkpoint { .. }), "{err}");
}

#[test]
fn untrained_sampled_policy_behaves_like_random_dispatch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "env = \"imm\"\nseed = 0\n[encoder]\nrounds = 1\nmessage_width = 4\nhidden = [8]\n");
    let config = RunConfig::load(&cfg).unwrap();
    let env = config.make_env().unwrap();
    let bindings =
        shopgraph::agents::build_bindings(env.as_ref(), &config.encoder, &config.heads, config.seed).unwrap();
    save_agents(&dir.path().join("ckpt"), &bindings).unwrap();
    let runs = cmd_eval(&dir.path().join("ckpt"), &cfg, 20, true, &out(dir.path(), "eval")).unwrap();
    let mean = |ms: Vec<u64>| ms.iter().sum::<u64>() as f64 / ms.len() as f64;
    let policy = mean(runs.iter().map(|r| r.makespan.unwrap()).collect());
    let random = mean(
        (0..20)
            .map(|s| run_baseline(&config, DispatchRule::Random, s).unwrap().makespan.unwrap())
            .collect(),
    );
    assert!((policy - random).abs() / random < 0.05, "{policy} vs {random}");
}

#[test]
fn fifo_on_a_single_job_takes_its_total_time() {
    let dir = tempfile::tempdir().unwrap();
    let inst = shipped_instance().subset(&[1]).unwrap();
    fs::write(dir.path().join("one.txt"), inst.to_text()).unwrap();
    let cfg = write_config(dir.path(), "env = \"imm\"\nseed = 0\n[imm]\ninstance = \"one.txt\"\n");
    let runs = cmd_baseline(&cfg, "fifo", 3, &out(dir.path(), "base")).unwrap();
    assert!(runs.iter().all(|r| r.makespan == Some(56) && r.policy == "FIFO"));
    let summary = fs::read_to_string(dir.path().join("base/summary.csv")).unwrap();
    assert_eq!(summary.lines().nth(1), Some("FIFO,3,1,56,56,56"));
}

#[test]
fn unknown_rule_lists_the_valid_ones() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "env = \"imm\"\nseed = 0\n");
    let err = cmd_baseline(&cfg, "LPT", 1, &out(dir.path(), "base")).unwrap_err();
    assert!(err.to_string().contains("FIFO, SPT, RANDOM"), "{err}");
    assert!(!dir.path().join("base").exists());
}

#[test]
fn rmc_rejects_priority_rules() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_RMC);
    assert!(cmd_baseline(&cfg, "SPT", 1, &out(dir.path(), "base")).is_err());
    let runs = cmd_baseline(&cfg, "random", 4, &out(dir.path(), "base")).unwrap();
    assert_eq!(runs.len(), 4);
}

#[test]
fn training_from_a_parsed_config_needs_no_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = RunConfig::parse(SMALL_RMC, Path::new("inline")).unwrap();
    config.out_dir = dir.path().join("inline");
    let res = train_from_config(&config, |_| {}).unwrap();
    assert_eq!(res.bindings.len(), 2);
    assert_eq!(res.report.curves.len(), 12);
}

#[test]
fn cli_verbs_run_and_fail_cleanly() {
    let bin = env!("CARGO_BIN_EXE_shopgraph");
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_RMC);
    let run = |args: &[&str]| std::process::Command::new(bin).args(args).output().unwrap();
    let out_dir = dir.path().join("cli");
    let out_dir = out_dir.to_str().unwrap();
    let cfg = cfg.to_str().unwrap();

    assert!(run(&["train", "--config", cfg, "--out", out_dir, "--episodes", "2", "--seed", "1"]).status.success());
    let ckpt = format!("{out_dir}/checkpoints");
    assert!(run(&["eval", "--config", cfg, "--checkpoints", &ckpt, "--out", out_dir, "--episodes", "2"]).status.success());
    assert!(run(&["baseline", "--config", cfg, "--rule", "RANDOM", "--out", out_dir, "--episodes", "2"]).status.success());
    assert!(run(&["gradcheck", "--episodes", "3"]).status.success());

    let bad = run(&["baseline", "--config", cfg, "--rule", "LPT"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("FIFO, SPT, RANDOM"));
    assert!(!run(&["train", "--config", "/nonexistent.toml"]).status.success());
}
