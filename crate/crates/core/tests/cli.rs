mod common;

use std::path::Path;
use std::process::{Command, Output};

fn twin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_twin"))
        .args(args)
        .output()
        .expect("run twin")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn asset(name: &str) -> String {
    common::assets().join(name).to_string_lossy().into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

const ZERO_FIT: &str = r#"{"intercept":[0,0,0,0],"B":[[0,0,0],[0,0,0],[0,0,0],[0,0,0]],"valid_range":[-90,120],"residual_rms_deg":[0,0,0,0]}"#;

#[test]
fn fit_exact_cubic_reports_zero_residual() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fit.json");
    let o = twin(&["fit", "--csv", &asset("calibration.csv"), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o).matches("rms residual 0.000°").count(), 4, "{}", stdout(&o));
    let fit = gripper_twin::calibration::CubicFit::load(&out).unwrap();
    assert_eq!(fit.valid_range, [-90.0, 120.0]);

    // Without --out the JSON is the only thing on stdout.
    let o = twin(&["fit", "--csv", &asset("calibration.csv")]);
    assert!(serde_json::from_slice::<serde_json::Value>(&o.stdout).is_ok());
}

#[test]
fn fit_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let few = write(
        dir.path(),
        "few.csv",
        "pressure_kpa,theta1_deg,theta2_deg,theta3_deg,theta4_deg\n0,0,0,0,0\n5,1,1,1,1\n10,2,2,2,2\n",
    );
    let o = twin(&["fit", "--csv", &few]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("need ≥5 distinct pressures"), "{}", stderr(&o));

    let typo = write(dir.path(), "typo.csv", "pressure_kpa,theta1_deg,theta2_dge,theta3_deg,theta4_deg\n0,0,0,0,0\n");
    let o = twin(&["fit", "--csv", &typo]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("theta2_deg"), "{}", stderr(&o));

    let bad = write(
        dir.path(),
        "bad.csv",
        "pressure_kpa,theta1_deg,theta2_deg,theta3_deg,theta4_deg\n0,0,0,0,0\n5,1,1,oops,1\n",
    );
    let o = twin(&["fit", "--csv", &bad]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn pose_prints_matrix_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let fit = write(dir.path(), "fit.json", ZERO_FIT);
    let o = twin(&["pose", "--pressure", "0", "--fit", &fit]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("position_mm: 0.000000 0.000000 55.710000"), "{text}");
    assert!(text.contains("quaternion_wxyz: 1.000000000 0.000000000 0.000000000 0.000000000"));
    assert!(stderr(&o).is_empty());

    let o = twin(&["pose", "--pressure", "200", "--fit", &fit]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("EXTRAPOLATED"));
    assert!(stdout(&o).contains("position_mm"));
}

#[test]
fn pose_with_flange_and_config() {
    let o = twin(&[
        "pose", "--pressure", "100", "--config", &asset("twin.json"), "--flange-t", "10,-20,300", "--json",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let state: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(state["flange_pose"]["translation"][1], -20.0);
    assert!(state["end_pose"][2][3].as_f64().unwrap() > 300.0);
}

#[test]
fn pose_without_fit_is_an_input_error() {
    assert_eq!(twin(&["pose", "--pressure", "10", "--fit", "/nonexistent/fit.json"]).status.code(), Some(2));
    assert_eq!(twin(&["pose", "--pressure", "10"]).status.code(), Some(2));
}

#[test]
fn demo_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = twin(&[
            "demo", "--script", &asset("demo_steps.csv"), "--config", &asset("twin.json"),
            "--deterministic", "--tau", "0.05", "--out", out.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        std::fs::read(out).unwrap()
    };
    let a = run("a.csv");
    assert_eq!(a, run("b.csv"));
    let rows = gripper_twin::demo::read_states_csv(a.as_slice()).unwrap();
    // 0..=4000 ms at 50 Hz.
    assert_eq!(rows.len(), 201);
    let plateau = |t: u64| rows.iter().find(|r| r.timestamp_ms == t).unwrap().pressure;
    assert_eq!((plateau(1480), plateau(2980), plateau(4000)), (50.0, 100.0, 120.0));
}

#[test]
fn demo_script_errors() {
    let dir = tempfile::tempdir().unwrap();
    let fit = write(dir.path(), "fit.json", ZERO_FIT);
    let empty = write(dir.path(), "empty.csv", "time_ms,type,value\n");
    let o = twin(&["demo", "--script", &empty, "--fit", &fit, "--deterministic"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).lines().count(), 1);
    assert!(stdout(&o).starts_with("timestamp_ms,pressure_kpa,"));

    let backwards = write(dir.path(), "back.csv", "time_ms,type,value\n100,set_pos_target,50\n50,set_pos_trigger,1\n");
    let o = twin(&["demo", "--script", &backwards, "--fit", &fit, "--deterministic"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn port_conflicts_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let fit = write(dir.path(), "fit.json", ZERO_FIT);
    let script = write(dir.path(), "s.csv", "time_ms,type,value\n0,set_pos_target,50\n");
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = taken.local_addr().unwrap().to_string();

    let o = twin(&["demo", "--script", &script, "--fit", &fit, "--bind", &addr]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains(&addr));

    let o = twin(&["controller-sim", "--bind", &addr]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn wall_clock_demo_records_states() {
    let dir = tempfile::tempdir().unwrap();
    let fit = write(dir.path(), "fit.json", ZERO_FIT);
    let script = write(dir.path(), "s.csv", "time_ms,type,value\n0,set_pos_target,50\n0,set_pos_trigger,1\n");
    let o = twin(&[
        "demo", "--script", &script, "--fit", &fit, "--bind", "127.0.0.1:0", "--tau", "0.05", "--tail-ms", "500",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows = gripper_twin::demo::read_states_csv(o.stdout.as_slice()).unwrap();
    assert!(rows.len() >= 15, "{} rows", rows.len());
    assert!(rows.windows(2).all(|w| w[1].timestamp_ms > w[0].timestamp_ms));
    assert!((rows.last().unwrap().pressure - 50.0).abs() < 1.0);
}

#[test]
fn eval_reports_relative_error() {
    let dir = tempfile::tempdir().unwrap();
    let fit = write(dir.path(), "fit.json", ZERO_FIT);
    let o = twin(&["eval", "--reference", "0,0,56.16", "--pressure", "0", "--fit", &fit]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let err: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let e = err["relative_percent"].as_f64().unwrap();
    assert!((e - 0.45 / 56.16 * 100.0).abs() < 1e-9, "{e}");

    let pose = twin(&["pose", "--pressure", "0", "--fit", &fit, "--json"]);
    let state = write(dir.path(), "state.json", &stdout(&pose));
    let o = twin(&["eval", "--reference", "0,0,55.71", "--state", &state]);
    let err: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(err["relative_percent"].as_f64().unwrap() < 1e-12);

    let o = twin(&["eval", "--reference", "0,0,0", "--state", &state]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn measure_produces_calibration_rows() {
    let o = twin(&["measure", "--camera", &asset("camera.json"), "--points", &asset("points.csv")]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let samples = gripper_twin::calibration::read_samples_csv(o.stdout.as_slice()).unwrap();
    assert_eq!(samples.len(), 5);
    assert_eq!(samples[4].pressure, 120.0);
    assert!((samples[4].thetas[0] - 17.472).abs() < 1e-3, "{:?}", samples[4]);
}

#[test]
fn help_lists_every_subcommand() {
    let text = stdout(&twin(&["--help"]));
    for cmd in ["fit", "pose", "controller-sim", "serve", "demo", "eval", "measure"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}
