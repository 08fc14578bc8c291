use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cgnscope"))
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn report_fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/report10").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok_lines(args: &[&str]) -> Vec<Value> {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap().lines().map(|l| serde_json::from_str(l).expect("JSON line")).collect()
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_prints_the_trace() {
    let lines = ok_lines(&["simulate", "--topology", arg(&fixture("probe_net.toml"))]);
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["verdict"], "dropped_ttl");
    assert_eq!(lines[0]["hop"], 2);
    assert_eq!(lines[1]["verdict"], "delivered");
}

#[test]
fn simulated_crawl_feeds_dht_detection() {
    let dir = tempfile::tempdir().unwrap();
    let records = dir.path().join("records.jsonl");
    let topo = format!("sim:{}", arg(&fixture("dht_net.toml")));
    let out = run(&["crawl", "--transport", &topo, "--budget", "100", "--seed", "1", "--out", arg(&records)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let verdicts = ok_lines(&["detect-dht", "--records", arg(&records), "--routing", arg(&fixture("routing.csv"))]);
    let cgn = verdicts.iter().find(|v| v["asn"] == 64501).expect("carrier AS classified");
    assert_eq!(cgn["verdict"], "cgn_positive");
    assert_eq!(cgn["range"], "100X");
    assert!(verdicts.iter().all(|v| v["asn"] == 64501 || v["verdict"] != "cgn_positive"));
}

#[test]
fn seeded_runs_repeat() {
    let topo = format!("sim:{}", arg(&fixture("dht_net.toml")));
    let a = run(&["crawl", "--transport", &topo, "--budget", "20", "--seed", "4"]);
    let b = run(&["crawl", "--transport", &topo, "--budget", "20", "--seed", "4"]);
    assert!(a.status.success() && !a.stdout.is_empty());
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn synthetic_sessions_classify_by_kind() {
    let dir = tempfile::tempdir().unwrap();
    let sessions = dir.path().join("sessions.jsonl");
    let truth = dir.path().join("truth.jsonl");
    let out = run(&["synth", "sessions", "--subscribers", "30", "--seed", "2", "--truth", arg(&truth)]);
    assert!(out.status.success());
    std::fs::write(&sessions, &out.stdout).unwrap();
    let table = dir.path().join("routing.csv");
    let rows: Vec<Value> =
        std::fs::read_to_string(&truth).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 4);
    let routing: String = rows
        .iter()
        .map(|r| {
            let asn = r["asn"].as_u64().unwrap();
            format!("{},{asn}\n", prefix_of(&sessions, asn))
        })
        .collect();
    std::fs::write(&table, routing).unwrap();
    let verdicts = ok_lines(&["detect-sessions", "--sessions", arg(&sessions), "--routing", arg(&table)]);
    for r in &rows {
        let v = verdicts.iter().find(|v| v["asn"] == r["asn"]).expect("every AS classified");
        let want =
            if matches!(r["kind"].as_str(), Some("nat444" | "cellular_cgn")) { "cgn_positive" } else { "negative" };
        assert_eq!(v["verdict"], want, "{r}");
    }
}

/// The /16 holding the public addresses of one AS's sessions.
fn prefix_of(sessions: &Path, asn: u64) -> String {
    let text = std::fs::read_to_string(sessions).unwrap();
    let s: Value = text.lines().map(|l| serde_json::from_str::<Value>(l).unwrap()).find(|s| s["asn"] == asn).unwrap();
    let ip: std::net::Ipv4Addr = s["ip_pub"].as_str().unwrap().parse().unwrap();
    let o = ip.octets();
    format!("{}.{}.0.0/16", o[0], o[1])
}

#[test]
fn probe_on_a_simulated_nat444_path() {
    let topo = format!("sim:{}", arg(&fixture("probe_net.toml")));
    let lines = ok_lines(&["probe", "--transport", &topo, "--server", "server", "--asn", "64500"]);
    let s = &lines[0];
    assert_eq!(s["stun"]["mapping"], "symmetric");
    assert_eq!(s["ip_pub"], "203.0.113.1");
    assert_eq!(s["flows"].as_array().unwrap().len(), 10);
    let nats = s["ttl_result"]["nats"].as_array().unwrap();
    assert_eq!(nats.len(), 1);
    assert_eq!(nats[0]["hop"], 3);
    assert_eq!((nats[0]["timeout_low"].as_u64(), nats[0]["timeout_high"].as_u64()), (Some(60), Some(70)));
}

#[test]
fn report_matches_the_ten_as_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.json");
    let verdicts = format!("{},{}", arg(&report_fixture("dht.jsonl")), arg(&report_fixture("session.jsonl")));
    let eyeball = format!("{},{}", arg(&report_fixture("pbl.csv")), arg(&report_fixture("apnic.csv")));
    let o = run(&[
        "report",
        "--verdicts",
        &verdicts,
        "--population",
        arg(&report_fixture("routed.csv")),
        "--eyeball",
        &eyeball,
        "--rir",
        arg(&report_fixture("rir.csv")),
        "--routing",
        arg(&report_fixture("routing.csv")),
        "--out",
        arg(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(r["schema"], 1);
    assert!(r["metadata"]["routing_fingerprint"].is_string());
    let union = r["rows"]
        .as_array()
        .unwrap()
        .iter()
        .find(|row| row["population"] == "routed" && row["method"] == "union")
        .unwrap();
    assert_eq!((union["covered"].as_u64(), union["positive"].as_u64()), (Some(9), Some(5)));
    assert_eq!(union["positive_pct"], 55.6);
    assert_eq!(r["regions"].as_array().unwrap().len(), 5);
}

#[test]
fn bad_input_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{not json}\n").unwrap();
    let o = run(&["detect-dht", "--records", arg(&bad), "--routing", arg(&fixture("routing.csv"))]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 1"));
    let o =
        run(&["detect-dht", "--records", arg(&dir.path().join("missing")), "--routing", arg(&fixture("routing.csv"))]);
    assert!(!o.status.success());
    let o = run(&["crawl", "--transport", "carrier-pigeon"]);
    assert!(!o.status.success());
}

#[test]
fn matrix_emits_every_configuration() {
    let lines = ok_lines(&["synth", "matrix", "--seed", "5"]);
    assert_eq!(lines.len(), 32);
}
