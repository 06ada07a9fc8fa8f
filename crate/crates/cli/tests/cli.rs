use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn cachesub(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cachesub")).args(args).output().unwrap()
}

fn run_ok(args: &[&str]) {
    let out = cachesub(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Data rows of a CSV written by the tool, without the comment block.
fn rows(path: &Path) -> Vec<Vec<String>> {
    let text = fs::read_to_string(path).unwrap();
    let body: String = text.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect();
    let mut r = csv::Reader::from_reader(body.as_bytes());
    r.records().map(|x| x.unwrap().iter().map(String::from).collect()).collect()
}

fn error_report(out: &Output) -> Value {
    let v: Value = serde_json::from_slice(&out.stderr).unwrap();
    v["error"].clone()
}

#[test]
fn tradeoff_reference_point_saves_over_seventy_percent() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&["tradeoff", "--scenario", s(&scenario("tradeoff_wide_leaves.toml")), "--out", s(dir.path())]);
    let csv = dir.path().join("tradeoff.csv");
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("# tool: cachesub "));
    assert!(text.contains("\n# scenario_sha256: "));
    assert!(text.contains("gamma,subset,saving_fraction,C1,C2,C3"));
    let row = rows(&csv).into_iter().find(|r| r[0] == "133" && r[1] == "1+2+3").unwrap();
    assert!(row[2].parse::<f64>().unwrap() > 0.70, "{row:?}");
}

#[test]
fn coalition_errors_vanish_at_equal_shares() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&["coalition-verify", "--scenario", s(&scenario("coalition.toml")), "--out", s(dir.path()), "--ledger"]);
    let r = rows(&dir.path().join("coalition_errors.csv"));
    let half = r.iter().find(|r| r[0] == "0.5").unwrap();
    assert!(half.last().unwrap().parse::<f64>().unwrap().abs() <= 1e-9);
    let ledger: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("coalition_ledger.json")).unwrap()).unwrap();
    assert_eq!(ledger["data"].as_array().unwrap().len(), 10);
}

#[test]
fn missing_scenario_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = cachesub(&["optimize", "--scenario", "/no/such/scenario.toml", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let e = error_report(&out);
    assert_eq!(e["kind"], "file_not_found");
    assert!(e["message"].as_str().unwrap().contains("file not found"));
}

#[test]
fn schema_violation_points_at_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(scenario("small_tree.toml")).unwrap().replacen("parent = 1", "parent = 9", 1);
    let path = dir.path().join("bad.toml");
    fs::write(&path, &text).unwrap();
    let out = cachesub(&["optimize", "--scenario", s(&path), "--out", s(&dir.path().join("out"))]);
    assert_eq!(out.status.code(), Some(2));
    let e = error_report(&out);
    assert_eq!(e["kind"], "schema");
    let d = &e["diagnostics"][0];
    assert_eq!(d["field"], "network.nodes[2].parent");
    let line = text.lines().position(|l| l == "parent = 9").unwrap() + 1;
    assert_eq!(d["line"], line);
}

#[test]
fn unknown_key_is_a_hard_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(scenario("small_tree.toml")).unwrap().replace("seed = 5", "seed = 5\nsede = 6");
    let path = dir.path().join("bad.toml");
    fs::write(&path, text).unwrap();
    let out = cachesub(&["optimize", "--scenario", s(&path), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_report(&out)["message"].as_str().unwrap().contains("sede"));
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let sc = scenario("small_tree.toml");
    run_ok(&["optimize", "--scenario", s(&sc), "--out", s(a.path())]);
    let out = Command::new(env!("CARGO_BIN_EXE_cachesub"))
        .args(["optimize", "--scenario", s(&sc), "--out", s(b.path())])
        .env("CACHESUB_WORKERS", "2")
        .output()
        .unwrap();
    assert!(out.status.success());
    let (x, y) = (read_dir_sorted(a.path()), read_dir_sorted(b.path()));
    assert_eq!(x.len(), 3);
    assert_eq!(x, y);
}

#[test]
fn seed_flag_changes_the_demand() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let sc = scenario("small_tree.toml");
    run_ok(&["optimize", "--scenario", s(&sc), "--out", s(a.path()), "--seed", "11"]);
    run_ok(&["optimize", "--scenario", s(&sc), "--out", s(b.path()), "--seed", "12"]);
    let ta = fs::read_to_string(a.path().join("trace.csv")).unwrap();
    assert!(ta.contains("# seed: 11"));
    let pa = fs::read_to_string(a.path().join("placement.json")).unwrap();
    let pb = fs::read_to_string(b.path().join("placement.json")).unwrap();
    assert_ne!(pa, pb);
}

#[test]
fn settle_reproduces_the_forecast_settlement() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario("small_tree.toml");
    let opt = dir.path().join("opt");
    run_ok(&["optimize", "--scenario", s(&sc), "--out", s(&opt)]);
    let st = dir.path().join("settle");
    run_ok(&["settle", "--scenario", s(&sc), "--out", s(&st), "--placement", s(&opt.join("placement.json"))]);
    assert_eq!(fs::read(opt.join("settlement.csv")).unwrap(), fs::read(st.join("settlement.csv")).unwrap());

    // Halving every measured traffic table changes the subsidies.
    let dump: Value = serde_json::from_str(&fs::read_to_string(opt.join("placement.json")).unwrap()).unwrap();
    let reports = dump["data"]["reports"].as_array().unwrap();
    let half = |key: &str, leaf_only: bool| -> Value {
        reports
            .iter()
            .map(|r| {
                r[key]
                    .as_array()
                    .unwrap()
                    .iter()
                    .enumerate()
                    .map(|(n, x)| if leaf_only && n < 2 { 0.0 } else { x.as_f64().unwrap() / 2.0 })
                    .collect::<Vec<f64>>()
            })
            .collect::<Vec<_>>()
            .into()
    };
    let measured = serde_json::json!({
        "leaf": half("offered", true),
        "residual": half("residual", false),
        "transit": half("transit_by_ano", false),
    });
    let mpath = dir.path().join("measured.json");
    fs::write(&mpath, measured.to_string()).unwrap();
    let st2 = dir.path().join("settle2");
    run_ok(&[
        "settle",
        "--scenario",
        s(&sc),
        "--out",
        s(&st2),
        "--placement",
        s(&opt.join("placement.json")),
        "--measured",
        s(&mpath),
    ]);
    let a = rows(&st.join("settlement.csv"));
    let b = rows(&st2.join("settlement.csv"));
    assert_ne!(a[0][4], b[0][4]);
}

#[test]
fn protocol_sim_matches_optimize_and_passes_audit() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario("small_tree.toml");
    let (opt, sim) = (dir.path().join("opt"), dir.path().join("sim"));
    run_ok(&["optimize", "--scenario", s(&sc), "--out", s(&opt)]);
    run_ok(&["protocol-sim", "--scenario", s(&sc), "--out", s(&sim)]);
    assert_eq!(fs::read(opt.join("trace.csv")).unwrap(), fs::read(sim.join("trace.csv")).unwrap());
    let audit: Value = serde_json::from_str(&fs::read_to_string(sim.join("audit.json")).unwrap()).unwrap();
    assert_eq!(audit["data"]["ok"], true);
    let transcript = fs::read_to_string(sim.join("transcript.jsonl")).unwrap();
    assert!(transcript.lines().all(|l| serde_json::from_str::<Value>(l).is_ok()));
}

#[test]
fn dropped_provider_stops_the_protocol() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario("small_tree.toml");
    run_ok(&["protocol-sim", "--scenario", s(&sc), "--out", s(dir.path()), "--drop-cp", "1"]);
    let dump: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("placement.json")).unwrap()).unwrap();
    assert_eq!(dump["data"]["status"], "aborted");
    assert_eq!(dump["data"]["stop"]["kind"], "missing_report");
}

#[test]
fn ufl_prints_open_nodes_and_servers() {
    let dir = tempfile::tempdir().unwrap();
    let out = cachesub(&["ufl", "--scenario", s(&scenario("small_tree.toml")), "--out", s(dir.path()), "--cp", "1"]);
    assert!(out.status.success());
    let text = fs::read_to_string(dir.path().join("ufl.txt")).unwrap();
    assert!(String::from_utf8_lossy(&out.stdout).starts_with(&text));
    assert!(text.contains("open: 2 3"), "{text}");
    assert!(text.contains("leaf 2 <- node 2"));
    let bad = cachesub(&["ufl", "--scenario", s(&scenario("small_tree.toml")), "--out", s(dir.path()), "--cp", "7"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn json_format_carries_metadata() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&[
        "tradeoff",
        "--scenario",
        s(&scenario("tradeoff_many_intermediates.toml")),
        "--out",
        s(dir.path()),
        "--format",
        "json",
    ]);
    let v: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("tradeoff.json")).unwrap()).unwrap();
    assert_eq!(v["meta"]["seed"], 0);
    assert_eq!(v["meta"]["scenario_sha256"].as_str().unwrap().len(), 64);
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 41 * 4);
    assert!(rows.iter().all(|r| r["saving_fraction"].as_f64().unwrap() >= 0.0));
}

#[test]
fn infeasible_scenario_exits_nonzero_with_trace() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(scenario("small_tree.toml"))
        .unwrap()
        .replace("uplink_cap_mbps = 20.0", "uplink_cap_mbps = 1.0")
        .replace("[shares]", "[algorithm]\ntau_max = 20\n\n[shares]");
    let path = dir.path().join("tight.toml");
    fs::write(&path, text).unwrap();
    let out_dir = dir.path().join("out");
    let out = cachesub(&["optimize", "--scenario", s(&path), "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_report(&out)["kind"], "infeasible");
    // Iterations run while tau < tau_max.
    assert_eq!(rows(&out_dir.join("trace.csv")).len(), 19);
}
