//! Loading, validating and running the bundled scenarios.

use std::io::Write;
use std::path::{Path, PathBuf};

use balsim::harness::{check, load_scenario, run, RunOptions, Scenario, ScenarioFile, Simulation};
use balsim::model::AvatarFile;
use balsim::model::humanoid::{build, HumanoidParams};
use balsim::Error;

fn bundled(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(rel)
}

fn minimal() -> serde_json::Value {
    serde_json::json!({
        "name": "tiny",
        "avatar": { "humanoid": { "name": "a", "height": 1.8, "mass": 75.0 } },
        "duration": 0.05,
        "supports": ["l_sole", "r_sole"],
    })
}

fn write_temp(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::File::create(&p).unwrap().write_all(text.as_bytes()).unwrap();
    p
}

#[test]
fn every_bundled_scenario_loads_and_steps() {
    for name in ["standing", "giant_to_dwarf", "table_lean", "drill"] {
        let sc = load_scenario(bundled(&format!("{name}.json"))).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(sc.file.name, name);
        let mut sim = Simulation::new(sc).unwrap();
        for _ in 0..20 {
            let m = sim.step().unwrap();
            assert!(m.com.iter().all(|x| x.is_finite()), "{name}");
        }
        assert_eq!(sim.steps(), 20);
    }
}

#[test]
fn standing_has_no_targets() {
    let sc = load_scenario(bundled("standing.json")).unwrap();
    assert!(sc.file.targets.is_empty());
    assert!(sc.stream.is_none());
}

#[test]
fn giant_to_dwarf_carries_two_morphologies() {
    let sc = load_scenario(bundled("giant_to_dwarf.json")).unwrap();
    let r = sc.file.retarget.as_ref().expect("retarget section");
    assert!(r.actor_morphology.root_height > r.avatar_morphology.root_height);
    assert_eq!(r.task_limbs.len(), 2);
    assert!(sc.stream.is_some());
    assert!(sc.model.total_mass() < 50.0);
}

#[test]
fn bundled_avatars_match_the_generator() {
    for (name, height, mass) in [("reference", 1.8, 75.0), ("dwarf", 1.2, 40.0)] {
        let text = std::fs::read_to_string(bundled(&format!("avatars/{name}.json"))).unwrap();
        let on_disk: serde_json::Value = serde_json::from_str(&text).unwrap();
        let generated = AvatarFile::from_model(&build(&HumanoidParams::new(name, height, mass)).unwrap());
        same_json(&on_disk, &serde_json::to_value(generated).unwrap(), name);
    }
}

/// Structural equality with numbers compared to a relative 1e-12, since the
/// default JSON float parser may land one ulp away.
fn same_json(a: &serde_json::Value, b: &serde_json::Value, at: &str) {
    use serde_json::Value::*;
    match (a, b) {
        (Number(x), Number(y)) => {
            let (x, y) = (x.as_f64().unwrap(), y.as_f64().unwrap());
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "{at}: {x} vs {y}");
        }
        (Array(x), Array(y)) => {
            assert_eq!(x.len(), y.len(), "{at}");
            for (i, (u, v)) in x.iter().zip(y).enumerate() {
                same_json(u, v, &format!("{at}[{i}]"));
            }
        }
        (Object(x), Object(y)) => {
            assert_eq!(x.keys().collect::<Vec<_>>(), y.keys().collect::<Vec<_>>(), "{at}");
            for (k, u) in x {
                same_json(u, &y[k], &format!("{at}.{k}"));
            }
        }
        _ => assert_eq!(a, b, "{at}"),
    }
}

#[test]
fn out_of_range_timestep_names_the_field() {
    let mut v = minimal();
    v["timestep"] = 0.5.into();
    let file: ScenarioFile = serde_json::from_value(v).unwrap();
    match Scenario::from_file(file, None) {
        Err(Error::Validation { field, .. }) => assert_eq!(field, "timestep"),
        other => panic!("expected a validation error, got {other:?}"),
    }
}

#[test]
fn unknown_joint_and_frame_are_config_errors() {
    let mut v = minimal();
    v["initial"] = serde_json::json!({ "joints": { "tail": 0.3 } });
    let file: ScenarioFile = serde_json::from_value(v).unwrap();
    assert!(matches!(Scenario::from_file(file, None), Err(Error::Config(m)) if m.contains("tail")));

    let mut v = minimal();
    v["targets"] = serde_json::json!([{ "task": "third_hand" }]);
    let file: ScenarioFile = serde_json::from_value(v).unwrap();
    assert!(matches!(Scenario::from_file(file, None), Err(Error::Config(m)) if m.contains("third_hand")));
}

#[test]
fn syntax_errors_report_a_position() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_temp(dir.path(), "bad.json", "{\n  \"name\": \"x\",\n  \"duration\": ,\n}\n");
    match load_scenario(&p) {
        Err(Error::Parse { path, message }) => {
            assert_eq!(path, p);
            assert!(message.contains("line 3"), "{message}");
        }
        other => panic!("expected a parse error, got {other:?}"),
    }
    let p = write_temp(dir.path(), "extra.json", &{
        let mut v = minimal();
        v["colour"] = "red".into();
        v.to_string()
    });
    assert!(matches!(load_scenario(&p), Err(Error::Parse { .. })));
}

#[test]
fn stream_problems_surface_at_load() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = minimal();
    v["targets"] = serde_json::json!([{ "task": "r_hand" }]);
    v["target_stream"] = "s.csv".into();
    let scenario = write_temp(dir.path(), "s.json", &v.to_string());

    write_temp(dir.path(), "s.csv", "t,task,x,y,z\n0.2,r_hand,0.5,0,1\n0.1,r_hand,0.5,0,1\n");
    assert!(matches!(load_scenario(&scenario), Err(Error::Format(m)) if m.contains("line 3")));

    write_temp(dir.path(), "s.csv", "t,task,x,y,z\n0,l_hand,0.5,0,1\n");
    assert!(matches!(load_scenario(&scenario), Err(Error::Config(m)) if m.contains("l_hand")));

    std::fs::remove_file(dir.path().join("s.csv")).unwrap();
    assert!(matches!(load_scenario(&scenario), Err(Error::Io { .. })));
}

#[test]
fn reset_replays_the_same_trajectory() {
    let mut sim = Simulation::new(load_scenario(bundled("table_lean.json")).unwrap()).unwrap();
    let first: Vec<_> = (0..200).map(|_| sim.step().unwrap()).collect();
    sim.set_balance(false);
    sim.set_target("r_hand", [0.3, -0.4, 1.0].into()).unwrap();
    sim.step().unwrap();
    sim.reset();
    assert_eq!(sim.steps(), 0);
    assert!(sim.balance_enabled());
    let second: Vec<_> = (0..200).map(|_| sim.step().unwrap()).collect();
    assert_eq!(first, second);
}

#[test]
fn unknown_names_are_rejected_by_the_simulation() {
    let mut sim = Simulation::new(load_scenario(bundled("drill.json")).unwrap()).unwrap();
    assert!(matches!(sim.set_target("tail", [0.0; 3].into()), Err(Error::Config(_))));
    assert!(matches!(sim.set_guide("nope", false), Err(Error::Config(_))));
    sim.set_guide("bit", false).unwrap();
}

#[test]
fn run_writes_a_header_then_one_row_per_step() {
    let sc = load_scenario(bundled("standing.json")).unwrap();
    let opts = RunOptions {
        duration: Some(0.1),
        ..Default::default()
    };
    let (summary, out) = run(sc, &opts, Vec::new()).unwrap();
    let text = String::from_utf8(out).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert!(lines[0].starts_with("# balsim metrics scenario=standing"));
    assert!(lines[1].starts_with("t,"));
    assert_eq!(lines.len() - 2, summary.steps);
    assert_eq!(summary.steps, 100);
    let width = lines[1].split(',').count();
    assert!(lines[2..].iter().all(|l| l.split(',').count() == width));
}

#[test]
fn self_check_passes_on_the_dwarf() {
    let sim = Simulation::new(load_scenario(bundled("giant_to_dwarf.json")).unwrap()).unwrap();
    let report = check::self_check(&sim, 5, 50).unwrap();
    assert_eq!(report.lines.len(), 4);
    assert!(report.passed(), "{report}");
}
