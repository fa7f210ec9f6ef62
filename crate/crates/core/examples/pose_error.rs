//! Compares the twin's predicted tip with externally measured references.
//!
//! cargo run --example pose_error

use std::path::Path;

use gripper_twin::calibration::CubicFit;
use gripper_twin::kinematics::FlangePose;
use gripper_twin::twin::{evaluate_pose_error, pipeline_step, pose_error, Pipeline};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let e = pose_error([0.0, 0.0, 99.2], [0.0, 0.0, 100.0])?;
    println!("axial 0.8 mm short of 100 mm: E = {:.2}%", e.relative_percent);
    let e = pose_error([0.0, 3.4, 100.0], [0.0, 0.0, 100.0])?;
    println!("3.4 mm sideways at 100 mm:   E = {:.2}%", e.relative_percent);

    let fit = CubicFit::load(Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/sample_fit.json"))?;
    let pipeline = Pipeline::from_fit(fit)?;
    let state = pipeline_step(60.0, &FlangePose::identity(), &pipeline);
    let p = state.position();
    // A reference as an external tracker might report it, a little off.
    let reference = [p[0] + 0.5, p[1], p[2] - 0.3];
    let e = evaluate_pose_error(&state, reference)?;
    println!("60 kPa: twin {p:.3?}, reference {reference:.3?}");
    println!("{}", serde_json::to_string_pretty(&e)?);
    Ok(())
}
