//! Section angles from picked RGB-D pixels, with and without lens correction.
//!
//! cargo run --example camera_measurement

use std::fs::File;
use std::path::Path;

use gripper_twin::calibration::{measure_thetas, CameraModel, MeasurementSetup};
use gripper_twin::cli::read_points_csv;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let assets = Path::new(env!("CARGO_MANIFEST_DIR")).join("assets");
    let camera = CameraModel::load(assets.join("camera.json"))?;
    let rows = read_points_csv(File::open(assets.join("points.csv"))?).map_err(|f| f.message)?;

    let corrected = MeasurementSetup {
        camera,
        plane: Default::default(),
        reference: Default::default(),
        skip_undistort: false,
    };
    let raw = MeasurementSetup { skip_undistort: true, ..corrected };

    println!("pressure_kpa  corrected thetas (deg)                 uncorrected");
    for (pressure, pairs) in &rows {
        let a = measure_thetas(pairs, &corrected)?;
        let b = measure_thetas(pairs, &raw)?;
        println!("{pressure:>8.1}      {a:8.3?}  {b:8.3?}");
    }
    Ok(())
}
