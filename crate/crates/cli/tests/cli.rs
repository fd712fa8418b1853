use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mcint_core::harness::affinity::allowed_cpus;
use mcint_core::harness::{ClockSkew, Role, RunTrace, TraceHeader, TraceRecord, CLOCK_DOMAIN};
use mcint_core::{Campaign, TOOL_VERSION};

const QUAD: &str = r#"{"cores": [0, 1, 2, 3], "line_size": 64, "caches": [
    {"level": 1, "capacity": 4096, "associativity": 4, "shared_by": [0]},
    {"level": 1, "capacity": 4096, "associativity": 4, "shared_by": [1]},
    {"level": 1, "capacity": 4096, "associativity": 4, "shared_by": [2]},
    {"level": 1, "capacity": 4096, "associativity": 4, "shared_by": [3]},
    {"level": 2, "capacity": 65536, "associativity": 8, "shared_by": [0, 1, 2, 3]}
], "dram_nodes": 1}"#;

const APPS: &str = r#"{"applications": [{"label": "nav", "kernel": {"target": "shared-l2-c0c1c2c3",
    "pattern": "SEQ_READ", "working_set": 8192, "stride": 64, "inner_ops": 128, "seed": 1}}],
  "requirements": [{"id": "REQ-1", "workload": "nav", "max_margin": 0.05}]}"#;

fn cpu_list() -> String {
    vec![allowed_cpus().unwrap()[0].to_string(); 4].join(",")
}

fn mcint(args: &[&dyn AsRef<std::ffi::OsStr>]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcint"))
        .args(args.iter().map(|a| a.as_ref()))
        .env("MCINT_COUNTERS", "simulated")
        .env("MCINT_CORE_LIST", cpu_list())
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn plan(dir: &Path, apps: Option<&str>, samples: &str) -> PathBuf {
    fs::write(dir.join("topology.json"), QUAD).unwrap();
    let cfg = dir.join("campaign.json");
    let topo = dir.join("topology.json");
    let out = match apps {
        Some(a) => {
            fs::write(dir.join("apps.json"), a).unwrap();
            let apps = dir.join("apps.json");
            mcint(&[
                &"plan",
                &"--topology",
                &topo,
                &"--applications",
                &apps,
                &"-o",
                &cfg,
                &"--samples",
                &samples,
            ])
        }
        None => mcint(&[&"plan", &"--topology", &topo, &"-o", &cfg, &"--samples", &samples]),
    };
    assert!(out.status.success(), "{}", stderr(&out));
    cfg
}

/// Traces where every contended victim is `slowdown` times slower.
fn synthetic_traces(c: &Campaign, dir: &Path, slowdown: f64) {
    fs::create_dir_all(dir).unwrap();
    for s in &c.config.scenarios {
        let scale = if s.adversaries.is_empty() { 1.0 } else { slowdown };
        let mut t = 1_000u64;
        let mut records: Vec<TraceRecord> = (0..s.samples)
            .map(|i| {
                let d = ((1_000 + (i * 37) % 200) as f64 * scale) as u64;
                let r = TraceRecord {
                    scenario: s.id.clone(),
                    rep: 0,
                    core: s.victim.core,
                    role: Role::Victim,
                    iter: i,
                    start_ns: t,
                    end_ns: t + d,
                    ctr: Default::default(),
                };
                t += d + 10;
                r
            })
            .collect();
        for a in &s.adversaries {
            records.push(TraceRecord {
                scenario: s.id.clone(),
                rep: 0,
                core: a.core,
                role: Role::Adversary,
                iter: 0,
                start_ns: 500,
                end_ns: t + 500,
                ctr: Default::default(),
            });
        }
        let trace = RunTrace {
            header: TraceHeader {
                tool_version: TOOL_VERSION.into(),
                config_hash: c.hash.clone(),
                topology_hash: c.topology_hash.clone(),
                scenario: s.id.clone(),
                rep: 0,
                clock_domain: CLOCK_DOMAIN.into(),
                clock_skew: ClockSkew::default(),
                core_map: Default::default(),
                valid: true,
                flags: Vec::new(),
                error: None,
            },
            records,
        };
        fs::write(dir.join(format!("{}.rep0.jsonl", s.id)), trace.to_jsonl()).unwrap();
    }
}

#[test]
fn plan_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = plan(tmp.path(), Some(APPS), "50");
    let first = fs::read(&cfg).unwrap();
    plan(tmp.path(), Some(APPS), "50");
    assert_eq!(first, fs::read(&cfg).unwrap());
    let c = Campaign::load(&cfg).unwrap();
    // 4 channels x (1 isolation + 3 contended) + application isolation + 4 channels.
    assert_eq!(c.config.scenarios.len(), 21);
}

#[test]
fn single_core_plan_is_empty_with_warning() {
    let tmp = tempfile::tempdir().unwrap();
    let topo = tmp.path().join("one.json");
    fs::write(
        &topo,
        r#"{"cores": [0], "line_size": 64, "caches": [{"level": 1, "capacity": 4096, "associativity": 4, "shared_by": [0]}], "dram_nodes": 1}"#,
    )
    .unwrap();
    let cfg = tmp.path().join("c.json");
    let out = mcint(&[&"plan", &"--topology", &topo, &"-o", &cfg]);
    assert!(out.status.success());
    assert!(stderr(&out).contains("\"warning\""));
    assert!(Campaign::load(&cfg).unwrap().config.scenarios.is_empty());
}

#[test]
fn invalid_inputs_exit_1_with_diagnostic() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"cores": [], "line_size": 64, "caches": [], "dram_nodes": 1}"#).unwrap();
    let cfg = tmp.path().join("c.json");
    let out = mcint(&[&"plan", &"--topology", &bad, &"-o", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    let line = stderr(&out).lines().next().unwrap().to_string();
    let d: serde_json::Value = serde_json::from_str(&line).unwrap();
    assert_eq!(d["level"], "error");
    assert_eq!(d["code"], "validation");

    let missing = tmp.path().join("nope.json");
    assert_eq!(mcint(&[&"run", &"--config", &missing]).status.code(), Some(1));

    let cfg = plan(tmp.path(), None, "20");
    let out = mcint(&[&"fingerprint", &"--config", &cfg, &"--workload", &"ghost"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn run_without_affinity_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = plan(tmp.path(), None, "10");
    let out = Command::new(env!("CARGO_BIN_EXE_mcint"))
        .args(["run", "--config"])
        .arg(&cfg)
        .env("MCINT_COUNTERS", "simulated")
        .env("MCINT_CORE_LIST", "100000,100001,100002,100003")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("\"capability\""));
}

#[test]
fn requirement_fail_exits_3_and_still_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = plan(tmp.path(), Some(APPS), "40");
    let c = Campaign::load(&cfg).unwrap();
    let traces = tmp.path().join("traces");
    synthetic_traces(&c, &traces, 1.5);
    let out_dir = tmp.path().join("out");
    let out = mcint(&[&"analyze", &"--config", &cfg, &"--traces", &traces, &"--out", &out_dir]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("REQ-1"));
    let analysis = out_dir.join("analysis.json");
    let out = mcint(&[&"report", &"--config", &cfg, &"--analysis", &analysis]);
    assert_eq!(out.status.code(), Some(3));
    let md = fs::read_to_string(out_dir.join("report.md")).unwrap();
    assert!(md.contains("REQ-1") && md.contains("Fail"));
    assert!(out_dir.join("report.json").exists());
}

#[test]
fn requirement_pass_exits_0() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = plan(tmp.path(), Some(APPS), "40");
    let c = Campaign::load(&cfg).unwrap();
    let traces = tmp.path().join("traces");
    synthetic_traces(&c, &traces, 1.0);
    let out_dir = tmp.path().join("out");
    let out = mcint(&[&"analyze", &"--config", &cfg, &"--traces", &traces, &"--out", &out_dir]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
}

#[test]
fn artifacts_from_another_config_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    fs::create_dir_all(&a).unwrap();
    fs::create_dir_all(&b).unwrap();
    let cfg_a = plan(&a, None, "20");
    let cfg_b = plan(&b, None, "30");
    let traces = tmp.path().join("traces");
    synthetic_traces(&Campaign::load(&cfg_a).unwrap(), &traces, 1.0);
    let out = mcint(&[&"analyze", &"--config", &cfg_b, &"--traces", &traces]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("cannot be mixed"), "{}", stderr(&out));
}

#[test]
fn run_then_analyze_twice_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = plan(tmp.path(), None, "15");
    let traces = tmp.path().join("t");
    let out = mcint(&[&"run", &"--config", &cfg, &"--out", &traces]);
    assert!(out.status.success(), "{}", stderr(&out));
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(traces.join("campaign.json")).unwrap()).unwrap();
    assert_eq!(manifest["traces"].as_array().unwrap().len(), 16);
    let mut docs = Vec::new();
    for round in ["x", "y"] {
        let dir = tmp.path().join(round);
        let out = mcint(&[&"analyze", &"--config", &cfg, &"--traces", &traces, &"--out", &dir]);
        assert!(out.status.success(), "{}", stderr(&out));
        docs.push(fs::read(dir.join("analysis.json")).unwrap());
    }
    assert_eq!(docs[0], docs[1]);
}
