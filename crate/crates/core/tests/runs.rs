mod common;

use std::process::Command;

use comal::agent::{MemoryStore, Role, ScriptedBackend};
use comal::harness::{export, read_trajectories, run, run_with_memory, sweep, HarnessError};
use comal::llm_client::{RemoteBackend, ReplayBackend, Transcript};
use comal::scenario::{catalog, find, ScenarioConfig, ScenarioError};

fn short(name: &str) -> ScenarioConfig {
    ScenarioConfig {
        horizon: 40.0,
        ..find(name).unwrap()
    }
}

/// Violent noise with the failsafe off: a crash within the first seconds.
fn crashing() -> ScenarioConfig {
    let mut cfg = ScenarioConfig {
        name: "crash".into(),
        noise_std: 200.0,
        ..short("Ring 0").all_human()
    };
    cfg.gating.failsafe = false;
    cfg
}

#[test]
fn catalog_lookup() {
    assert_eq!(catalog().len(), 11);
    assert_eq!(find("fe-1").unwrap().name, "FE 1");
    assert_eq!(find("MERGE4").unwrap().penetration, 0.90);
    assert!(matches!(find("Ring 9"), Err(ScenarioError::Unknown(_))));
}

#[test]
fn overrides_merge_and_validate() {
    let cfg = find("Ring 1")
        .unwrap()
        .with_overrides(r#"{"seed": 9, "agent": {"max_rounds": 1}}"#)
        .unwrap();
    assert_eq!((cfg.seed, cfg.agent.max_rounds), (9, 1));
    assert_eq!(
        cfg.agent.sensing_horizon,
        find("Ring 1").unwrap().agent.sensing_horizon
    );
    assert!(find("Ring 1")
        .unwrap()
        .with_overrides(r#"{"bogus": 1}"#)
        .is_err());
    assert!(find("Ring 1")
        .unwrap()
        .with_overrides(r#"{"dt": -1}"#)
        .is_err());
    assert!(find("Ring 1").unwrap().with_overrides("[1]").is_err());
}

#[test]
fn export_round_trips_trajectories() {
    let result = run(&short("FE 1"), &ScriptedBackend).unwrap();
    let dir = tempfile::tempdir().unwrap();
    export(&result, dir.path()).unwrap();
    let names: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(names.len(), 2, "{names:?}");
    let csv = std::fs::read_to_string(dir.path().join("trajectories.csv")).unwrap();
    assert!(csv.starts_with("time,vehicle_id,position,speed\n"));
    assert_eq!(
        read_trajectories(&dir.path().join("trajectories.csv")).unwrap(),
        result.samples
    );
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("metrics.json")).unwrap())
            .unwrap();
    assert_eq!(m["avg_speed"].as_f64().unwrap(), result.avg_speed);
    assert_eq!(m["roles"].as_array().unwrap().len(), 7);
}

#[test]
fn failed_export_leaves_no_temp_files() {
    let result = run(&short("Ring 1"), &ScriptedBackend).unwrap();
    let dir = tempfile::tempdir().unwrap();
    // a non-empty directory where a file should go blocks the rename
    std::fs::create_dir_all(dir.path().join("trajectories.csv/x")).unwrap();
    assert!(matches!(
        export(&result, dir.path()),
        Err(HarnessError::Io { .. })
    ));
    let leftovers: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".tmp"))
        .collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
}

#[test]
fn replay_runs_dry() {
    let cfg = short("Ring 1");
    let stub = common::scripted_stub();
    let recorded = run(&cfg, &RemoteBackend::new(stub.config()).unwrap()).unwrap();
    let lines = recorded.transcript.to_jsonl();
    for line in lines.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in [
            "timestamp",
            "run_id",
            "agent_id",
            "stage",
            "request",
            "response",
            "latency_ms",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }
    // a longer run asks for more planners than were recorded
    let longer = ScenarioConfig {
        horizon: 80.0,
        ..cfg
    };
    let replay = ReplayBackend::new(&Transcript::from_jsonl(&lines).unwrap());
    let out = run(&longer, &replay).unwrap();
    assert!(out.flags.reason_fallbacks > 0 && out.flags.transport_failures > 0);
    assert!(out.transcript.entries().iter().any(|e| e.response["error"]
        .as_str()
        .is_some_and(|s| s.contains("replay exhausted"))));
}

#[test]
fn unreachable_backend_falls_back_everywhere() {
    let stub = common::serve(|_, _| (500, "down".into()));
    let config = comal::llm_client::BackendConfig {
        max_retries: 0,
        ..stub.config()
    };
    let cfg = short("FE 1");
    let out = run(&cfg, &RemoteBackend::new(config).unwrap()).unwrap();
    assert!(out.flags.brainstorm_fallback);
    assert_eq!(
        out.roles.iter().filter(|a| a.role == Role::Leader).count(),
        1
    );
    assert_eq!(out.flags.reason_fallbacks as usize, out.planners.len());
    // same roles and planners as the scripted path, since fallbacks are the scripted policies
    let scripted = run(&cfg, &ScriptedBackend).unwrap();
    assert_eq!(out.planners, scripted.planners);
}

#[test]
fn late_merge_arrivals_get_roles() {
    let out = run(&short("Merge 4"), &ScriptedBackend).unwrap();
    assert!(!out.roles.is_empty());
    assert!(out.roles.iter().all(|a| a.role == Role::WaveDampener));
    assert!(out
        .roles
        .iter()
        .any(|a| a.rationale.contains("after the brainstorm")));
}

#[test]
fn feature_toggles_change_prompts() {
    let stub = common::scripted_stub();
    let remote = RemoteBackend::new(stub.config()).unwrap();
    let mut cfg = short("Ring 1");
    cfg.features.perception = false;
    cfg.features.memory = false;
    let out = run(&cfg, &remote).unwrap();
    let prompt = out.transcript.entries().last().unwrap().request["messages"][1]["content"]
        .as_str()
        .unwrap()
        .to_string();
    assert!(
        prompt.contains("[NEIGHBORS] none") && prompt.contains("headway=n/a"),
        "{prompt}"
    );
    assert!(!prompt.contains(&MemoryStore::builtin().experiences()[0].text));
}

#[test]
fn memory_writeback_appends_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = short("Ring 1");
    cfg.agent.memory_writeback = true;
    let mut memory = MemoryStore::builtin();
    let before = memory.experiences().len();
    run_with_memory(&cfg, &ScriptedBackend, &mut memory, Some(dir.path())).unwrap();
    assert_eq!(memory.experiences().len(), before + 1);
    assert!(memory.experiences().last().unwrap().text.contains("Ring 1"));
    assert_eq!(
        MemoryStore::load_dir(dir.path())
            .unwrap()
            .experiences()
            .len(),
        1
    );
}

#[test]
fn sweep_isolates_failing_cells() {
    let ok = short("Ring 1");
    let table = sweep(&[ok, crashing()], &[0, 1], &[], &ScriptedBackend).unwrap();
    assert_eq!(table.cells[0].avgs.len(), 2);
    assert!(table.cells[1].failed());
    assert_eq!(table.cells[1].errors.len(), 2);
    assert!(table.to_text().contains("FAILED"));
    assert_eq!(table.to_csv().lines().count(), 3);
}

#[test]
fn collision_keeps_partial_samples() {
    let crash = crashing();
    let out = run(&crash, &ScriptedBackend).unwrap();
    assert!(out.collided());
    assert!(!out.samples.is_empty());
    assert!(out.samples.last().unwrap().time < crash.horizon);
}

fn comal(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_comal"))
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn cli_list_run_and_errors() {
    let list = String::from_utf8(comal(&["list"]).stdout).unwrap();
    assert_eq!(list.lines().count(), 12);

    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("fe");
    let out = comal(&[
        "run",
        "--scenario",
        "FE 1",
        "--seed",
        "2",
        "--out",
        out_dir.to_str().unwrap(),
        "--no-collab",
        "--config",
        r#"{"horizon": 30}"#,
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("fe1-seed2") && !stdout.contains("leader"));
    assert!(out_dir.join("metrics.json").exists());

    let bad = comal(&[
        "run",
        "--scenario",
        "nope",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(bad.status.code(), Some(1));
    let replay = comal(&[
        "run",
        "--scenario",
        "FE 1",
        "--backend",
        "replay",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(String::from_utf8_lossy(&replay.stderr).contains("--transcript"));

    let sweep = comal(&[
        "sweep",
        "--scenarios",
        "Ring 1",
        "--seeds",
        "0..2",
        "--config",
        r#"{"horizon": 30}"#,
    ]);
    assert!(sweep.status.success());
    assert!(String::from_utf8(sweep.stdout).unwrap().contains("Ring 1"));
}
