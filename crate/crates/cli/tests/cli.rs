use std::path::Path;
use std::process::{Command, Output};

fn hatlab(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hatlab"))
        .arg("--config")
        .arg(config)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn value<'a>(out: &'a str, key: &str) -> &'a str {
    out.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in output:\n{out}"))
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let p = dir.join("pipeline.toml");
    std::fs::write(&p, body).unwrap();
    p
}

const SMALL: &str = r#"
seed = 11
workers = 1
out_dir = "run"

[templates]
max_atoms = 30

[hat]
n_configs = 260
n_interp = 6

[train]
max_epochs = 2

[eval]
curve_sizes = [100, 200]
transfer_threshold = 20
"#;

#[test]
fn missing_config_is_a_usage_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_hatlab")).arg("generate").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let o = Command::new(env!("CARGO_BIN_EXE_hatlab")).args(["--config", "x.toml", "frobnicate"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unknown_key_fails_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seed = 1\nout_dir = \"run\"\n[hat]\nn_config = 5\n");
    let o = hatlab(&cfg, &["generate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("n_config"));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn commands_need_their_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let o = hatlab(&cfg, &["train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("generate"));
}

#[test]
fn label_failures_over_threshold_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!(
        "{}\n[label]\nmax_failure_rate = 0.1\n[label.calculator]\nkind = \"external\"\ncommand = \"exit 1 # {{input}} {{output}}\"\ncache_dir = \"cache\"\n",
        SMALL.replace("n_configs = 260", "n_configs = 8").replace("n_interp = 6", "n_interp = 0")
    );
    let cfg = write_config(dir.path(), &body);
    assert_eq!(hatlab(&cfg, &["generate"]).status.code(), Some(0));
    let o = hatlab(&cfg, &["label"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(value(&stdout(&o), "failed"), "8");
}

#[test]
fn full_command_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let run = |args: &[&str]| {
        let o = hatlab(&cfg, args);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        stdout(&o)
    };
    let g = run(&["generate"]);
    assert_eq!(value(&g, "single_systems"), "260");
    assert_eq!(value(&g, "interp_systems"), "6");
    let hash = value(&g, "config_hash").to_owned();
    let manifest = dir.path().join("run/dataset/manifest.jsonl");
    let first = std::fs::read(&manifest).unwrap();
    run(&["generate"]);
    assert_eq!(std::fs::read(&manifest).unwrap(), first);

    assert_eq!(value(&run(&["label"]), "failed"), "0");
    assert!(run(&["split"]).contains("stratum="));
    assert!(value(&run(&["train"]), "param_hash").len() == 64);
    let e = run(&["eval"]);
    for key in ["energy_mae_mev", "energy_per_atom_mae_mev", "force_mae_mev_ang", "barrier_mae_all_mev"] {
        assert!(value(&e, key).parse::<f64>().unwrap() >= 0.0);
    }
    run(&["barriers"]);

    run(&["curve"]);
    let csv = std::fs::read_to_string(dir.path().join("run/reports/learning_curve.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], format!("# config_hash={hash} seed=11"));
    assert_eq!(lines[1], "size,energy_mae_mev,force_mae_mev_ang,barrier_mae_mev,train_seconds");
    assert_eq!(lines.len(), 4);
    assert!(lines[2].starts_with("100,") && lines[3].starts_with("200,"));

    run(&["transfer"]);
    let t = std::fs::read_to_string(dir.path().join("run/reports/transferability.csv")).unwrap();
    assert!(t.starts_with("# config_hash="));
    assert!(t.lines().any(|l| l.starts_with("small,")));
}

#[test]
fn overrides_change_seed_and_output() {
    let dir = tempfile::tempdir().unwrap();
    let small = SMALL.replace("n_configs = 260", "n_configs = 5").replace("n_interp = 6", "n_interp = 1");
    let cfg = write_config(dir.path(), &small);
    let out = dir.path().join("elsewhere");
    let o = hatlab(&cfg, &["--seed-override", "99", "--out", out.to_str().unwrap(), "generate"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(value(&stdout(&o), "seed"), "99");
    assert!(out.join("dataset/manifest.jsonl").exists());
}
