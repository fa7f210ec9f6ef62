//! Digital twin of a four-section soft pneumatic gripper.
//!
//! Pressure from a pneumatic controller is mapped to per-section bending
//! angles through a cubic calibration, then to curvatures and a
//! piecewise-constant-curvature chain that gives the fingertip pose in the
//! robot base frame.
//!
//! - [`kinematics`] arc transforms, chain composition, flange mounting
//! - [`calibration`] camera back-projection, angle measurement, cubic fit
//! - [`modbus`] Modbus/TCP codec and async client
//! - [`controller`] simulated pressure controller served over Modbus/TCP
//! - [`twin`] polling engine and HTTP/SSE API
//! - [`demo`] scripted replay of controller and twin together
//! - [`cli`] the `twin` command line

pub mod calibration;
pub mod cli;
pub mod controller;
pub mod demo;
pub mod kinematics;
pub mod modbus;
pub mod twin;

/// Parses `"x,y,z"` into three finite numbers.
pub fn parse_triple(s: &str) -> Result<[f64; 3], String> {
    let v = parse_list(s, 3)?;
    Ok([v[0], v[1], v[2]])
}

/// Parses `"a,b,c,d"` into four finite numbers.
pub fn parse_quad(s: &str) -> Result<[f64; 4], String> {
    let v = parse_list(s, 4)?;
    Ok([v[0], v[1], v[2], v[3]])
}

fn parse_list(s: &str, n: usize) -> Result<Vec<f64>, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != n {
        return Err(format!("expected {n} comma-separated numbers, got `{s}`"));
    }
    parts
        .iter()
        .map(|p| match p.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(format!("`{p}` is not a finite number")),
        })
        .collect()
}
