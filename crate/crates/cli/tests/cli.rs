use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SCENARIO: &str = r#"
n_mss = 2
n_mh = 10
byzantine_set = [10]
causal_latency = 3
transit_delay = 2

[initial_assignment]
h1 = "s1"
h2 = "s1"
h3 = "s1"
h4 = "s1"
h5 = "s1"
h6 = "s2"
h7 = "s2"
h8 = "s2"
h9 = "s2"
h10 = "s2"

[adversary_strategy]
h10 = { strategy = "silent" }

[[workload]]
kind = "broadcast"
tick = 0
mh = "h1"
payload = "hello"

[[workload]]
kind = "handoff"
tick = 3
mh = "h2"
dest = "s2"

[[workload]]
kind = "broadcast"
tick = 12
mh = "h6"
payload = "world"

[[workload]]
kind = "mss_broadcast"
tick = 14
mss = "s1"
payload = "station"

[mobility_model]
poisson_rates = [0.0, 1.5, 0.0, 0.0]
horizon_ticks = 40
target_mss = "s1"
"#;

fn bcm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bcm")).args(args).env_remove("BCM_SEED").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn scenario(dir: &TempDir) -> PathBuf {
    let p = dir.path().join("scenario.toml");
    fs::write(&p, SCENARIO).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn table1_verifies() {
    let o = bcm(&["table1", "--verify"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 11);
    assert!(out.lines().nth(3).unwrap().starts_with("3,0.986246,"), "{out}");
}

#[test]
fn replay_then_check_passes() {
    let dir = TempDir::new().unwrap();
    let (trace, config) = (dir.path().join("g.trace"), dir.path().join("g.toml"));
    let o = bcm(&["replay-437", "--trace-out", s(&trace), "--scenario-out", s(&config)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 37);

    let report = dir.path().join("report.csv");
    let summary = dir.path().join("summary.json");
    let o = bcm(&["check", s(&trace), s(&config), "--report-out", s(&report), "--summary-out", s(&summary)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = fs::read_to_string(&report).unwrap();
    assert_eq!(table.lines().count(), 14);
    assert!(table.lines().skip(1).all(|l| l.split(',').nth(1) == Some("true")), "{table}");
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&summary).unwrap()).unwrap();
    assert_eq!(json["all_hold"], true);
}

#[test]
fn check_flags_a_dropped_delivery() {
    let dir = TempDir::new().unwrap();
    let (trace, config) = (dir.path().join("g.trace"), dir.path().join("g.toml"));
    assert_eq!(code(&bcm(&["replay-437", "--trace-out", s(&trace), "--scenario-out", s(&config)])), 0);
    let text = fs::read_to_string(&trace).unwrap();
    let victim = text.lines().position(|l| l.contains("\"BcmHDeliver\"") && l.contains("\"h6\"")).unwrap();
    let kept: Vec<&str> = text.lines().enumerate().filter(|(i, _)| *i != victim).map(|(_, l)| l).collect();
    fs::write(&trace, kept.join("\n")).unwrap();
    let o = bcm(&["check", s(&trace), s(&config)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("Termination"), "{}", stderr(&o));
}

#[test]
fn check_rejects_a_foreign_trace() {
    let dir = TempDir::new().unwrap();
    let (trace, config) = (dir.path().join("g.trace"), dir.path().join("g.toml"));
    assert_eq!(code(&bcm(&["replay-437", "--trace-out", s(&trace), "--scenario-out", s(&config)])), 0);
    let o = bcm(&["check", s(&trace), s(&scenario(&dir))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("not produced by"), "{}", stderr(&o));
}

#[test]
fn malformed_scenario_names_the_field() {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("bad.toml");
    fs::write(&p, SCENARIO.replace("n_mss = 2", "n_mss = 0")).unwrap();
    let o = bcm(&["run", s(&p)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("n_mss"), "{}", stderr(&o));

    fs::write(&p, SCENARIO.replace("byzantine_set = [10]", "byzantine_set = [11]")).unwrap();
    let o = bcm(&["run", s(&p)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("byzantine_set"), "{}", stderr(&o));

    fs::write(&p, format!("colour = 3\n{SCENARIO}")).unwrap();
    let o = bcm(&["run", s(&p)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("colour"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&bcm(&["table1", "--bogus"])), 2);
    assert_eq!(code(&bcm(&["nonsense"])), 2);
    assert_eq!(code(&bcm(&["run", "/nonexistent/scenario.toml"])), 2);
    assert_eq!(code(&bcm(&["thresholds", "9", "3"])), 2);
    assert_eq!(code(&bcm(&["fig7", "--rates", "4,-1"])), 2);
}

#[test]
fn run_is_byte_identical() {
    let dir = TempDir::new().unwrap();
    let sc = scenario(&dir);
    let mut traces = Vec::new();
    let mut accounts = Vec::new();
    for k in 0..2 {
        let (t, a) = (dir.path().join(format!("t{k}")), dir.path().join(format!("a{k}.csv")));
        let o = bcm(&["run", s(&sc), "--seed", "11", "--trace-out", s(&t), "--accounting-out", s(&a)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        traces.push(fs::read(&t).unwrap());
        accounts.push(fs::read_to_string(&a).unwrap());
    }
    assert_eq!(traces[0], traces[1]);
    assert_eq!(accounts[0], accounts[1]);
    assert!(accounts[0].starts_with("broadcast_id,init,echo,ready,global,forward,catchup,steps\n"));

    let o = bcm(&["check", s(&dir.path().join("t0")), s(&sc)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn seed_comes_from_the_environment() {
    let dir = TempDir::new().unwrap();
    let sc = scenario(&dir);
    let t = dir.path().join("t");
    let o = Command::new(env!("CARGO_BIN_EXE_bcm"))
        .args(["run", s(&sc), "--trace-out", s(&t)])
        .env("BCM_SEED", "42")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let header: serde_json::Value =
        serde_json::from_str(fs::read_to_string(&t).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(header["seed"], 42);
}

#[test]
fn sweep_ignores_worker_count() {
    let dir = TempDir::new().unwrap();
    let sc = scenario(&dir);
    let mut summaries = Vec::new();
    for workers in ["1", "4"] {
        let out = dir.path().join(format!("sweep{workers}.json"));
        let o = bcm(&["sweep", s(&sc), "--seeds", "0..40", "--workers", workers, "--summary-out", s(&out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        summaries.push(fs::read_to_string(&out).unwrap());
    }
    assert_eq!(summaries[0], summaries[1]);
    let json: serde_json::Value = serde_json::from_str(&summaries[0]).unwrap();
    assert_eq!(json["runs"], 40);
    assert_eq!(json["t_condition_violated"], 0);
    assert_eq!(json["passing"], 40);
}

#[test]
fn thresholds_for_the_loss_scenario() {
    let o = bcm(&["thresholds", "30", "7"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    let value =
        |key: &str| out.lines().find(|l| l.contains(key)).unwrap().split_whitespace().last().unwrap().to_string();
    assert_eq!(value("honest leaves"), "9");
    assert_eq!(value("(fixed)"), "3");
    assert_eq!(value("(growing)"), "5");
}

#[test]
fn fig7_grid_shape() {
    let o = bcm(&["fig7", "--rates", "4,8", "--k3s", "1,3,5"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert_eq!(out.lines().next().unwrap(), "k3,lambda=4,lambda=8");
    assert_eq!(out.lines().nth(2).unwrap(), "3,0.761897,0.986246");
    assert_eq!(out.lines().count(), 4);
}
