use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cil(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cil"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "cil failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

const SMALL: &str = r#"{
    "method": "METHOD",
    "seed": 5,
    "dataset": {"synthetic": {"classes": 6, "train_per_class": 20, "test_per_class": 5, "dim": 5, "spread": 0.3}},
    "backbone": {"hidden_dim": 6, "num_blocks": 3},
    "budget": {"align_to": {"method": "der", "exemplars": 12}},
    "learner": {"epochs": 3},
    "probes": {"enabled": true, "cka_samples": 20}
}"#;

fn write_config(dir: &Path, method: &str) -> String {
    let name = format!("{method}.json");
    fs::write(dir.join(&name), SMALL.replace("METHOD", method)).unwrap();
    name
}

#[test]
fn align_reports_the_table_endpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = stdout(&cil(
        &[
            "align",
            "--params",
            "463504",
            "--bytes-per-exemplar",
            "3072",
            "--target-mb",
            "1.76812744140625",
        ],
        dir.path(),
    ));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["exemplar_equivalent_of_model"], 603);
    assert_eq!(v["exemplars"], 0);
    assert_eq!(v["model_bytes"], 1_854_016);

    let o = cil(
        &[
            "align",
            "--params",
            "463504",
            "--bytes-per-exemplar",
            "3072",
            "--target-mb",
            "1",
        ],
        dir.path(),
    );
    assert!(!o.status.success());
}

#[test]
fn run_then_probe_every_figure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "der");
    stdout(&cil(&["run", "--config", &cfg, "--out", "der-run"], dir.path()));
    let record = dir.path().join("der-run/record.json");
    assert!(record.exists());
    let record = record.to_str().unwrap();

    let grad = stdout(&cil(&["probe", "--run", record, "--figure", "gradnorm"], dir.path()));
    let mut lines = grad.lines();
    assert_eq!(lines.next(), Some("block,value,stage"));
    // 3 stages of 3 blocks.
    assert_eq!(lines.count(), 9);

    let shift = stdout(&cil(&["probe", "--run", record, "--figure", "shift"], dir.path()));
    assert_eq!(shift.lines().count(), 10);

    let cka = stdout(&cil(&["probe", "--run", record, "--figure", "cka"], dir.path()));
    assert_eq!(cka.lines().next(), Some("depth,row,col,value"));
    // Two depths of a 3×3 matrix.
    assert_eq!(cka.lines().count(), 1 + 2 * 9);
}

#[test]
fn cka_probe_needs_several_backbones() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "replay");
    stdout(&cil(&["run", "--config", &cfg, "--out", "r"], dir.path()));
    let o = cil(&["probe", "--run", "r/record.json", "--figure", "cka"], dir.path());
    assert!(!o.status.success());
}

#[test]
fn sweep_and_metrics_build_tables() {
    let dir = tempfile::tempdir().unwrap();
    for method in ["replay", "memo"] {
        let cfg = write_config(dir.path(), method);
        let curve = stdout(&cil(
            &[
                "sweep",
                "--config",
                &cfg,
                "--memory-points",
                "0.03,0.02",
                "--out",
                &format!("runs/{method}"),
            ],
            dir.path(),
        ));
        let rows: Vec<&str> = curve.lines().collect();
        assert_eq!(rows[0], "memory_mb,avg_acc,last_acc");
        assert_eq!(rows.len(), 3);
        assert!(rows[1].starts_with("0.0199"), "{}", rows[1]);
        assert!(dir.path().join(format!("runs/{method}/curve.csv")).exists());
    }
    stdout(&cil(&["metrics", "--runs", "runs", "--table", "table.csv"], dir.path()));
    let table = fs::read_to_string(dir.path().join("table.csv")).unwrap();
    let mut rdr = csv::Reader::from_reader(table.as_bytes());
    let headers = rdr.headers().unwrap().clone();
    assert_eq!(&headers[0], "method");
    assert_eq!(rdr.records().count(), 4);
}

#[test]
fn bad_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), r#"{"method": "nope"}"#).unwrap();
    let o = cil(&["run", "--config", "bad.json", "--out", "x"], dir.path());
    assert!(!o.status.success());
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());

    let cfg = write_config(dir.path(), "wa");
    let o = cil(&["sweep", "--config", &cfg, "--memory-points", "0.03,abc"], dir.path());
    assert!(!o.status.success());

    fs::create_dir(dir.path().join("empty")).unwrap();
    let o = cil(&["metrics", "--runs", "empty", "--table", "t.csv"], dir.path());
    assert!(!o.status.success());
}
