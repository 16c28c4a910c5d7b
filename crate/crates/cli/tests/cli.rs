use std::path::Path;
use std::process::{Command, Output};

fn trocar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trocar"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SHORT_PAIR: &str = r#"[
  {"label": "p", "controller": "p_approach", "scenario": {"alpha": 0.5}, "sim": {"duration": 1.5}},
  {"label": "z", "controller": "z_approach", "scenario": {"alpha": 0.5}, "sim": {"duration": 1.5}}
]"#;

#[test]
fn run_writes_artifacts_and_metrics_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("pair.json");
    std::fs::write(&config, SHORT_PAIR).unwrap();
    let out = dir.path().join("out");
    let run = trocar(&[
        "run",
        "--config",
        path(&config),
        "--out",
        path(&out),
        "--jobs",
        "2",
    ]);
    assert_eq!(
        run.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(stdout.contains("peak_ratio"));
    assert!(out.join("comparison.txt").exists() && out.join("comparison.json").exists());

    let run_dir = out.join("00_p");
    let metrics = trocar(&[
        "metrics",
        "--trace",
        path(&run_dir.join("trace.csv")),
        "--json",
    ]);
    assert_eq!(metrics.status.code(), Some(0));
    let recomputed: serde_json::Value = serde_json::from_slice(&metrics.stdout).unwrap();
    let stored: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("metrics.json")).unwrap())
            .unwrap();
    assert_eq!(recomputed, stored);

    let compare = trocar(&[
        "compare",
        "--metrics",
        path(&run_dir.join("metrics.json")),
        path(&out.join("01_z").join("metrics.json")),
    ]);
    assert_eq!(compare.status.code(), Some(0));
    let table = String::from_utf8_lossy(&compare.stdout);
    assert!(table
        .lines()
        .any(|l| l.starts_with("00_p") && l.trim_end().ends_with("1.000       1.000")));
    assert!(table.lines().any(|l| l.starts_with("01_z")));
}

#[test]
fn sweep_runs_every_config_in_a_directory() {
    let dir = tempfile::tempdir().unwrap();
    let configs = dir.path().join("configs");
    std::fs::create_dir(&configs).unwrap();
    for alpha in ["0.75", "0.25"] {
        let text = format!(
            r#"{{"label": "a{alpha}", "controller": "p_approach", "scenario": {{"alpha": {alpha}}}, "sim": {{"duration": 1.2}}}}"#
        );
        std::fs::write(configs.join(format!("a{alpha}.json")), text).unwrap();
    }
    std::fs::write(configs.join("notes.txt"), "ignored").unwrap();
    let out = dir.path().join("out");
    let sweep = trocar(&["sweep", "--configs", path(&configs), "--out", path(&out)]);
    assert_eq!(sweep.status.code(), Some(0));
    assert!(out.join("00_a0.25").join("trace.csv").exists());
    assert!(out.join("01_a0.75").join("trace.csv").exists());
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(
        &bad,
        r#"{"controller": "p_approach", "scenario": {"alpha": 1.2}}"#,
    )
    .unwrap();
    let run = trocar(&["run", "--config", path(&bad), "--out", path(dir.path())]);
    assert_eq!(run.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&run.stderr).contains("scenario.alpha"));

    let missing = trocar(&["run", "--config", path(&dir.path().join("missing.json"))]);
    assert_eq!(missing.status.code(), Some(2));
    let empty = trocar(&[
        "sweep",
        "--configs",
        path(dir.path().join("nothing").as_path()),
    ]);
    assert_eq!(empty.status.code(), Some(2));
}

#[test]
fn divergence_exits_with_three_and_names_the_tick() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("unstable.json");
    std::fs::write(
        &config,
        r#"{"label": "unstable", "controller": "p_approach",
            "gains": {"k_fp": 1e9, "k_fd": 0, "k_np": 0, "k_nd": 0},
            "scenario": {"alpha": 0.5, "q0": [0.1, -0.6854, 0.1, -2.2562, 0.1, 1.6708, 0.8854]},
            "sim": {"duration": 1.2}}"#,
    )
    .unwrap();
    let run = trocar(&[
        "run",
        "--config",
        path(&config),
        "--out",
        path(&dir.path().join("out")),
    ]);
    assert_eq!(run.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&run.stderr).contains("tick"));
}
