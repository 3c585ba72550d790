use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn wqsp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wqsp")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = wqsp(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn out_dir(root: &Path, name: &str) -> String {
    root.join(name).display().to_string()
}

fn rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn column(table: &[Vec<String>], name: &str) -> Vec<f64> {
    let idx = table[0].iter().position(|h| h == name).unwrap();
    table[1..].iter().map(|r| r[idx].parse().unwrap()).collect()
}

#[test]
fn three_node_single_sensor_is_the_junction() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = out_dir(tmp.path(), "p");
    let out = ok(&["place", "--network", "bundled:three-node", "-r", "1", "-o", &dir]);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "J2");
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("p/placement.json")).unwrap()).unwrap();
    assert_eq!(json["nodes"], serde_json::json!(["J2"]));

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("p/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "place");
    assert_eq!(manifest["config"]["r"], 1);
    assert!(manifest["inputs"].as_object().unwrap().contains_key("bundled:three-node"));
    for f in ["placement.json", "occupation.csv", "metric_trace.csv"] {
        assert!(manifest["outputs"].as_array().unwrap().iter().any(|o| o == f));
    }
}

#[test]
fn zero_sensors_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = wqsp(&["place", "--network", "bundled:three-node", "-r", "0", "-o", &out_dir(tmp.path(), "p")]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let out = wqsp(&["inspect", "--network", "bundled:three-node", "--set", "no_such_key=1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn zero_threads_is_a_config_error() {
    let out = wqsp(&["--threads", "0", "inspect", "--network", "bundled:three-node"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn placement_is_byte_identical_across_runs_and_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let a = out_dir(tmp.path(), "a");
    let b = out_dir(tmp.path(), "b");
    ok(&["place", "--network", "bundled:net1", "--steps", "3", "-r", "2", "-o", &a]);
    ok(&["--threads", "1", "place", "--network", "bundled:net1", "--steps", "3", "-r", "2", "-o", &b]);
    for f in ["placement.json", "occupation.csv", "metric_trace.csv"] {
        assert_eq!(
            fs::read(tmp.path().join("a").join(f)).unwrap(),
            fs::read(tmp.path().join("b").join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn zero_duration_simulation_writes_only_the_header() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = out_dir(tmp.path(), "s");
    ok(&["simulate", "--network", "bundled:three-node", "--duration-s", "0", "-o", &dir]);
    let text = fs::read_to_string(tmp.path().join("s/states.csv")).unwrap();
    assert_eq!(text.lines().count(), 1);
}

#[test]
fn three_node_simulation_stays_within_source_bounds() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = out_dir(tmp.path(), "s");
    ok(&["simulate", "--network", "bundled:three-node", "-o", &dir]);
    let table = rows(&tmp.path().join("s/states.csv"));
    assert!(table.len() > 2);
    for row in &table[1..] {
        for v in &row[1..] {
            let v: f64 = v.parse().unwrap();
            assert!((-1e-9..=0.8 + 1e-9).contains(&v), "{v}");
        }
    }
}

#[test]
fn noisy_simulation_is_reproducible_from_the_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str| {
        let dir = out_dir(tmp.path(), name);
        ok(&[
            "simulate", "--network", "bundled:three-node", "--duration-s", "600", "--process-std", "0.01", "--seed", seed,
            "-o", &dir,
        ]);
        fs::read(tmp.path().join(name).join("states.csv")).unwrap()
    };
    let a = run("a", "7");
    let b = run("b", "7");
    let c = run("c", "8");
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn noisy_simulation_without_seed_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = wqsp(&[
        "simulate", "--network", "bundled:three-node", "--process-std", "0.01", "-o", &out_dir(tmp.path(), "s"),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn evaluate_rejects_an_unknown_node() {
    let tmp = tempfile::tempdir().unwrap();
    let out = wqsp(&[
        "evaluate", "--network", "bundled:three-node", "--sensors", "J99", "--seed", "1", "-o",
        &out_dir(tmp.path(), "e"),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn greedy_placement_beats_random_placements() {
    let tmp = tempfile::tempdir().unwrap();
    let p = out_dir(tmp.path(), "p");
    let e = out_dir(tmp.path(), "e");
    ok(&["place", "--network", "bundled:three-node", "-r", "1", "-o", &p]);
    let placement = tmp.path().join("p/placement.json").display().to_string();
    ok(&[
        "evaluate", "--network", "bundled:three-node", "--placement", &placement, "--seed", "3", "--count", "5", "-o", &e,
    ]);
    let table = rows(&tmp.path().join("e/random_delta.csv"));
    assert_eq!(table.len(), 25);
    for row in &table[1..] {
        for v in &row[1..] {
            assert!(v.parse::<f64>().unwrap() >= -1e-9);
        }
    }
}

#[test]
fn inspect_reports_dimensions() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = out_dir(tmp.path(), "i");
    let out = ok(&["inspect", "--network", "bundled:three-node", "--steps", "1", "-o", &dir]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("154"));
    assert_eq!(column(&rows(&tmp.path().join("i/inspect.csv")), "n_x"), [154.0]);

    let grid = out_dir(tmp.path(), "g");
    ok(&["inspect", "--network", "bundled:grid", "--steps", "1", "-o", &grid]);
    let sparsity = column(&rows(&tmp.path().join("g/inspect.csv")), "sparsity");
    assert!(sparsity[0] > 0.999, "{sparsity:?}");
}

#[test]
fn doubling_the_target_step_halves_the_segments() {
    let tmp = tempfile::tempdir().unwrap();
    let total = |name: &str, dt: &str| {
        let dir = out_dir(tmp.path(), name);
        ok(&["inspect", "--network", "bundled:net1", "--steps", "1", "--policy", "dynamic", "--dt-target", dt, "-o", &dir]);
        column(&rows(&tmp.path().join(name).join("inspect.csv")), "segments_total")[0]
    };
    let fine = total("fine", "10");
    let coarse = total("coarse", "20");
    let ratio = fine / coarse;
    assert!((1.8..=2.2).contains(&ratio), "{fine} / {coarse}");
}

#[test]
fn hydraulics_file_round_trips_through_place() {
    let tmp = tempfile::tempdir().unwrap();
    let h = out_dir(tmp.path(), "h");
    ok(&["gen-hydraulics", "--network", "bundled:three-node", "--steps", "4", "-o", &h]);
    let file = tmp.path().join("h/hydraulics.json");
    assert!(file.exists());

    let config = tmp.path().join("run.json");
    fs::write(
        &config,
        r#"{"network": "bundled:three-node", "hydraulics": "h/hydraulics.json", "r": 1, "out": "p"}"#,
    )
    .unwrap();
    let out = ok(&["place", "-c", &config.display().to_string()]);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "J2");
    assert!(tmp.path().join("p/placement.json").exists());
}

#[test]
fn estimate_writes_an_error_trace() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = out_dir(tmp.path(), "k");
    ok(&["estimate", "--network", "bundled:three-node", "--sensors", "J2", "--seed", "5", "-o", &dir]);
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("k/estimation.json")).unwrap()).unwrap();
    assert!(json["mean_rmse"].as_f64().unwrap().is_finite());
    assert!(rows(&tmp.path().join("k/rmse.csv")).len() > 1);
}
