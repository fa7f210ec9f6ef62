//! Fits the cubic pressure-to-angle map and queries it, including outside
//! the calibrated range.
//!
//! cargo run --example cubic_calibration

use std::fs::File;
use std::path::Path;

use gripper_twin::calibration::{fit_cubic, predict_thetas, read_samples_csv};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/calibration.csv");
    let samples = read_samples_csv(File::open(path)?)?;
    let fit = fit_cubic(&samples)?;

    println!("valid range {:?} kPa", fit.valid_range);
    for s in 0..4 {
        println!(
            "section {}: theta = {:.4} + {:.6} p + {:.3e} p^2 + {:.3e} p^3, rms {:.3}°",
            s + 1,
            fit.intercept[s],
            fit.b[s][0],
            fit.b[s][1],
            fit.b[s][2],
            fit.residual_rms_deg[s]
        );
    }
    for p in [0.0, 60.0, 120.0, 150.0] {
        let pred = predict_thetas(&fit, p);
        let note = if pred.extrapolated { "  (clamped)" } else { "" };
        println!("{p:>6.1} kPa -> {:.3?}°{note}", pred.thetas);
    }
    println!("{}", fit.to_json_pretty());
    Ok(())
}
