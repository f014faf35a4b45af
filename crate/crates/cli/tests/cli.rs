use std::fs;
use std::net::UdpSocket;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const SMALL: &[&str] = &["--set", "data.cycles=1500", "--set", "train.max_epochs=2", "--set", "run.cycles=30"];

fn hcci(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hcci"))
        .arg("--out")
        .arg(out)
        .args(SMALL)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn hcci")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = hcci(out, args);
    assert!(o.status.success(), "hcci {args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

/// A trained run directory shared by the tests that only read it.
fn trained() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let d = tempfile::tempdir().unwrap();
        ok(d.path(), &["gen-data"]);
        ok(d.path(), &["train"]);
        d
    })
    .path()
}

fn column(path: &Path, names: &[&str]) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let h = r.headers().unwrap().clone();
    let idx: Vec<usize> = names.iter().map(|n| h.iter().position(|c| c == *n).unwrap()).collect();
    r.records()
        .map(|row| {
            let row = row.unwrap();
            idx.iter().map(|&i| row[i].to_string()).collect()
        })
        .collect()
}

fn free_port() -> String {
    UdpSocket::bind("127.0.0.1:0").unwrap().local_addr().unwrap().to_string()
}

#[test]
fn pipeline_runs_unattended_and_snapshots_config() {
    let d = trained();
    ok(d, &["eval"]);
    let summary = ok(d, &["closed-loop"]);
    assert!(summary.contains("IMEP RMSE"), "{summary}");
    for stage in ["data", "model", "eval", "closed-loop"] {
        let snap = hcci_nmpc::config::ExperimentConfig::load(d.join(stage).join("config.toml")).unwrap();
        assert_eq!(snap.data.cycles, 1500);
        assert_eq!(snap.output_dir, d);
    }
    assert_eq!(column(&d.join("closed-loop/cycles.csv"), &["cycle"]).len(), 30);

    let listed = ok(d, &["report", d.join("closed-loop").to_str().unwrap()]);
    for f in ["tracking.csv", "actuations.csv", "lstm_states.csv", "timing.csv", "summary.txt"] {
        let p: PathBuf = d.join("closed-loop/report").join(f);
        assert!(p.exists() && listed.contains(f), "{f}");
    }
    assert_eq!(column(&d.join("closed-loop/report/lstm_states.csv"), &["h3"]).len(), 30);
}

#[test]
fn same_seed_reproduces_bit_identically() {
    let a = tempfile::tempdir().unwrap();
    ok(a.path(), &["gen-data"]);
    ok(a.path(), &["train"]);
    let d = trained();
    for f in ["data/dataset.csv", "model/weights.nnw", "model/history.csv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(d.join(f)).unwrap(), "{f}");
    }
    let b = tempfile::tempdir().unwrap();
    let model = d.join("model/weights.nnw");
    for dir in [a.path(), b.path()] {
        ok(dir, &["closed-loop", "--model", model.to_str().unwrap()]);
    }
    assert_eq!(
        fs::read(a.path().join("closed-loop/cycles.csv")).unwrap(),
        fs::read(b.path().join("closed-loop/cycles.csv")).unwrap()
    );

    let c = tempfile::tempdir().unwrap();
    ok(c.path(), &["--seed", "2", "gen-data"]);
    assert_ne!(fs::read(c.path().join("data/dataset.csv")).unwrap(), fs::read(d.join("data/dataset.csv")).unwrap());
}

#[test]
fn missing_artifacts_name_their_producer() {
    let d = tempfile::tempdir().unwrap();
    for (cmd, producer) in [("train", "hcci gen-data"), ("closed-loop", "hcci train"), ("eval", "hcci train"), ("bench", "hcci train")] {
        let o = hcci(d.path(), &[cmd]);
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(!o.status.success() && err.contains(producer), "{cmd}: {err}");
    }
    let o = hcci(d.path(), &["report", d.path().to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("hcci closed-loop"));
}

#[test]
fn flags_and_file_compose() {
    let d = tempfile::tempdir().unwrap();
    let file = d.path().join("exp.toml");
    fs::write(&file, "seed = 7\n[controller]\nhorizon = 4\n").unwrap();
    let shown = ok(d.path(), &["--config", file.to_str().unwrap(), "--set", "controller.horizon=6", "show-config"]);
    let cfg = hcci_nmpc::config::ExperimentConfig::from_toml(&shown).unwrap();
    assert_eq!((cfg.seed, cfg.controller.horizon, cfg.train.max_epochs), (7, 6, 2));

    let o = hcci(d.path(), &["--set", "controller.horizn=4", "show-config"]);
    assert!(!o.status.success() && String::from_utf8_lossy(&o.stderr).contains("horizn"));
    let o = hcci(d.path(), &["--set", "clock.budget_ms=99", "show-config"]);
    assert!(!o.status.success() && String::from_utf8_lossy(&o.stderr).contains("budget"));
}

#[test]
fn split_nodes_match_in_process_loop() {
    let d = trained();
    let out = tempfile::tempdir().unwrap();
    let model = d.join("model/weights.nnw");
    let (plant, ctrl) = (free_port(), free_port());
    let clock = ["--set", "clock.period_ms=60", "--set", "clock.budget_ms=50"];
    let mut controller = Command::new(env!("CARGO_BIN_EXE_hcci"))
        .arg("--out")
        .arg(out.path())
        .args(SMALL)
        .args(clock)
        .args(["controller-node", "--model", model.to_str().unwrap(), "--bind", &ctrl, "--stop-after", "30"])
        .env("RUST_LOG", "warn")
        .spawn()
        .unwrap();
    std::thread::sleep(std::time::Duration::from_millis(300));
    let mut args = clock.to_vec();
    args.extend(["plant-node", "--bind", &plant, "--controller", &ctrl]);
    ok(out.path(), &args);
    assert!(controller.wait().unwrap().success());
    ok(out.path(), &["closed-loop", "--model", model.to_str().unwrap()]);

    let act = ["doi_fuel", "doi_water", "nvo"];
    let split = column(&out.path().join("plant-node/plant.csv"), &act);
    let direct = column(&out.path().join("closed-loop/cycles.csv"), &act);
    assert_eq!(split.len(), 30);
    assert_eq!(split, direct);
    assert!(column(&out.path().join("plant-node/plant.csv"), &["missed"]).iter().all(|m| m[0] == "0"));
    assert_eq!(column(&out.path().join("controller-node/controller.csv"), &["seq"]).len(), 30);

    ok(out.path(), &["report", out.path().join("plant-node").to_str().unwrap()]);
    assert!(out.path().join("plant-node/report/timing.csv").exists());
    assert!(!out.path().join("plant-node/report/lstm_states.csv").exists());
}
