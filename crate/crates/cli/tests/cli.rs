use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "seed = 2
[data]
kind = \"blobs\"
classes = 3
dim = 4
per_class = 40
[partition]
devices = 6
beta = 0.5
[pretrain]
rounds = 3
[federated]
fraction = 0.5
total_rounds = 8
[hyper]
local_epochs = 1
";

fn cyclicfl(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cyclicfl"))
        .args(args)
        .current_dir(dir)
        .env_remove("CYCLICFL_SEED")
        .env_remove("CYCLICFL_OUT")
        .output()
        .unwrap()
}

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.toml"), config).unwrap();
    dir
}

fn stderr_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    assert_eq!(text.lines().count(), 1, "{text}");
    serde_json::from_str(text.trim()).unwrap()
}

#[test]
fn missing_config_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = cyclicfl(&["run", "--config", "nowhere/cfg.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "config");
    assert!(err["message"].as_str().unwrap().contains("nowhere/cfg.toml"));
}

#[test]
fn invalid_configs_exit_with_two() {
    for bad in ["sede = 1", "[federated]\nfraction = 0.0", "[pretrain]\nrounds = 5000"] {
        let dir = setup(bad);
        let out = cyclicfl(&["comm", "--config", "cfg.toml"], dir.path());
        assert_eq!(out.status.code(), Some(2), "{bad}");
        assert_eq!(stderr_json(&out)["error"], "config");
    }
}

#[test]
fn divergence_exits_with_three() {
    let dir = setup(&format!("{SMALL}lr = 1e150\n"));
    let out = cyclicfl(&["run", "--config", "cfg.toml", "--out", "r"], dir.path());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stderr_json(&out)["error"], "divergence");
}

#[test]
fn run_writes_every_artifact() {
    let dir = setup(SMALL);
    let out = cyclicfl(&["run", "--config", "cfg.toml", "--out", "r"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("r");
    let csv = fs::read_to_string(run.join("rounds.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "round,phase,sampled_count,train_loss,test_acc,grad_norm_sq,cum_comm_units"
    );
    let phases: Vec<&str> = lines.map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(phases, ["P1", "P1", "P1", "P2", "P2", "P2", "P2", "P2"]);

    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["comm_units"], summary["comm_units_closed_form"]);
    assert!(summary["max_accuracy"].as_f64().is_some());

    let resolved = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(resolved.contains("out = \"r\""));
    let params = cyclicfl::checkpoint::load(run.join("model.bin")).unwrap();
    assert_eq!(params.len(), 4 * 32 + 32 + 32 * 3 + 3);
    assert!(run.join("pretrained.bin").exists());

    // the resolved config reproduces the run
    fs::copy(run.join("config.toml"), dir.path().join("again.toml")).unwrap();
    let again = cyclicfl(&["run", "--config", "again.toml"], dir.path());
    assert!(again.status.success());
    assert_eq!(fs::read(run.join("rounds.csv")).unwrap(), csv.as_bytes());
}

#[test]
fn p1_rounds_override_keeps_the_total() {
    let dir = setup(SMALL);
    let out = cyclicfl(&["run", "--config", "cfg.toml", "--out", "r", "--p1-rounds", "0"], dir.path());
    assert!(out.status.success());
    let csv = fs::read_to_string(dir.path().join("r/rounds.csv")).unwrap();
    let phases: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(phases.len(), 8);
    assert!(phases.iter().all(|p| *p == "P2"));
    assert!(!dir.path().join("r/pretrained.bin").exists());
}

#[test]
fn environment_overrides_and_flag_precedence() {
    let dir = setup(SMALL);
    let run = |extra: &[&str], seed: &str| {
        let out = Command::new(env!("CARGO_BIN_EXE_cyclicfl"))
            .args(["run", "--config", "cfg.toml"])
            .args(extra)
            .current_dir(dir.path())
            .env("CYCLICFL_SEED", seed)
            .env("CYCLICFL_OUT", "from-env")
            .output()
            .unwrap();
        assert!(out.status.success());
    };
    run(&[], "7");
    let resolved = fs::read_to_string(dir.path().join("from-env/config.toml")).unwrap();
    assert!(resolved.starts_with("seed = 7"), "{resolved}");
    run(&["--seed", "9", "--out", "flag"], "7");
    let resolved = fs::read_to_string(dir.path().join("flag/config.toml")).unwrap();
    assert!(resolved.starts_with("seed = 9"));
}

#[test]
fn strategy_and_beta_flags() {
    let dir = setup(SMALL);
    let out = cyclicfl(&["run", "--config", "cfg.toml", "--out", "r", "--strategy", "SCAFFOLD", "--beta", "2.5"], dir.path());
    assert!(out.status.success());
    let resolved = fs::read_to_string(dir.path().join("r/config.toml")).unwrap();
    assert!(resolved.contains("strategy = \"scaffold\""));
    assert!(resolved.contains("beta = 2.5"));
    let bad = cyclicfl(&["run", "--strategy", "fedsgd"], dir.path());
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn landscape_consistency_and_partition_stats() {
    let dir = setup(&format!("{SMALL}[landscape]\nresolution = 5\n[consistency]\nprobe_size = 10\n"));
    assert!(cyclicfl(&["run", "--config", "cfg.toml", "--out", "r"], dir.path()).status.success());

    let out = cyclicfl(&["landscape", "--config", "cfg.toml", "--out", "r"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("sharpness="));
    let grid = fs::read_to_string(dir.path().join("r/landscape.csv")).unwrap();
    assert_eq!(grid.lines().count(), 26);
    assert_eq!(grid.lines().next(), Some("a,b,loss"));

    let pre = cyclicfl(&["landscape", "--config", "cfg.toml", "--out", "p", "--checkpoint", "r/pretrained.bin"], dir.path());
    assert!(pre.status.success());
    let wrong = setup("[data]\nkind = \"blobs\"\ndim = 3\n");
    fs::copy(dir.path().join("r/model.bin"), wrong.path().join("model.bin")).unwrap();
    let mismatch = cyclicfl(&["landscape", "--config", "cfg.toml", "--checkpoint", "model.bin"], wrong.path());
    assert_eq!(mismatch.status.code(), Some(2));

    let out = cyclicfl(&["consistency", "--config", "cfg.toml"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("lambda_p=") && text.contains("discrepancy=") && text.contains("n_p=10"));

    let out = cyclicfl(&["partition-stats", "--config", "cfg.toml"], dir.path());
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 7);
    assert!(text.contains("mean_label_entropy="));
}

#[test]
fn quadratic_runs_report_the_distance() {
    let dir = setup(
        "[data]\nkind = \"quadratics\"\n[partition]\ndevices = 4\n[pretrain]\nrounds = 2\n[federated]\nfraction = 0.5\ntotal_rounds = 10\n",
    );
    let out = cyclicfl(&["run", "--config", "cfg.toml", "--out", "q"], dir.path());
    assert!(out.status.success());
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("q/summary.json")).unwrap()).unwrap();
    assert!(summary["distance_to_optimum"].as_f64().unwrap() > 0.0);
    assert!(summary["max_accuracy"].is_null());
    assert_eq!(cyclicfl(&["consistency", "--config", "cfg.toml"], dir.path()).status.code(), Some(2));
}
