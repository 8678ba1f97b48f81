use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfran-isac")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cli(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn scenario_then_simulate() {
    let dir = tempfile::tempdir().unwrap();
    let scen = dir.path().join("s.toml");
    let stdout = ok(&["gen-scenario", "--seed", "4", "--mobile-reflectors", "2", "-o", p(&scen)]);
    assert!(stdout.contains("10 RRUs"));
    let out = dir.path().join("sim");
    let stdout = ok(&["simulate", "--scenario", p(&scen), "--sigma-range", "0.2", "--accuracy", "1.0", "-o", p(&out)]);
    assert!(stdout.contains("idle statistic"));

    let params = std::fs::read_to_string(out.join("params.csv")).unwrap();
    assert!(params.starts_with("d,u,l,tau0,phi0,theta0,nu0"));
    assert!(std::fs::read_to_string(out.join("fused.csv")).unwrap().lines().count() >= 1);
    let trial: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("trial.json")).unwrap()).unwrap();
    assert_eq!(trial["result"]["correct"], trial["result"]["classified"]);
    assert_eq!(trial["idle_checks"].as_array().unwrap().len(), 5);
    let reloaded = std::fs::read_to_string(out.join("scenario.toml")).unwrap();
    assert_eq!(reloaded, std::fs::read_to_string(&scen).unwrap());
}

#[test]
fn single_downlink_simulation() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("single");
    let stdout = ok(&["simulate", "--mode", "single", "--trial", "2", "-o", p(&out)]);
    assert!(stdout.contains("single-downlink"));
    assert!(stdout.contains("classified 0 paths"));
}

#[test]
fn train_then_use_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("train");
    ok(&["train-classifier", "--samples-per-rru", "40", "--symbols", "128", "--save-dataset", "-o", p(&out)]);
    for f in ["model.json", "fingerprints.json", "accuracy.json", "accuracy.txt", "dataset.json", "config.toml"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let acc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("accuracy.json")).unwrap()).unwrap();
    assert_eq!(acc["total"], 40);

    let config = dir.path().join("campaign.toml");
    std::fs::write(
        &config,
        format!(
            "trials = 2\nsigma_range = [0.5]\n\n[classifier]\nkind = \"trained\"\nmodel = {:?}\nfingerprints = {:?}\n",
            p(&out.join("model.json")),
            p(&out.join("fingerprints.json"))
        ),
    )
    .unwrap();
    let stdout = ok(&["sweep", "--config", p(&config), "-o", p(&dir.path().join("sweep"))]);
    assert!(stdout.contains("trained"));
}

#[test]
fn sweep_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let sweep = ok(&["compare", "--trials", "3", "--sigma-range", "0.1,1.0", "--accuracy", "0.95", "-o", p(&run)]);
    let report = ok(&["report", "--run", p(&run)]);
    assert!(sweep.contains(report.trim_end()));
    assert_eq!(std::fs::read_to_string(run.join("report.txt")).unwrap(), report);
    let config = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(config.contains("trials = 3"));
}

#[test]
fn bad_input_fails_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(&["report", "--run", p(&dir.path().join("missing"))]);
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "trials = 0\n").unwrap();
    let out = cli(&["sweep", "--config", p(&bad), "-o", p(&dir.path().join("x"))]);
    assert!(!out.status.success());

    let out = cli(&["sweep", "--accuracy", "1.5", "--trials", "1", "-o", p(&dir.path().join("y"))]);
    assert!(!out.status.success());

    let out = cli(&["gen-scenario", "--num-rrus", "1", "-o", p(&dir.path().join("z.toml"))]);
    assert!(!out.status.success());
}
