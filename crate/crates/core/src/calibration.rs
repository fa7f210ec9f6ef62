//! Pressure → bending-angle calibration.
//!
//! Two halves: camera geometry for measuring section angles from depth-camera
//! pixels, and the cubic least-squares fit from controller pressure to the
//! four measured angles.
//!
//! Observed pixels are treated as distorted. The measurement path is
//! normalize → iterative undistort → scale by depth.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::SECTION_COUNT;

/// Iteration cap for [`undistort`].
pub const UNDISTORT_MAX_ITERATIONS: usize = 50;
/// Step size at which [`undistort`] stops iterating.
pub const UNDISTORT_STEP_TOLERANCE: f64 = 1e-12;
/// Minimum number of distinct pressures accepted by [`fit_cubic`].
pub const MIN_DISTINCT_PRESSURES: usize = 5;

/// Expected header of a calibration CSV.
pub const CALIBRATION_CSV_HEADER: [&str; 5] = [
    "pressure_kpa",
    "theta1_deg",
    "theta2_deg",
    "theta3_deg",
    "theta4_deg",
];

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("undistortion did not converge after {iterations} iterations (last iterate {last:?})")]
    Convergence { iterations: usize, last: [f64; 2] },
    #[error("need ≥{MIN_DISTINCT_PRESSURES} distinct pressures, got {distinct}")]
    InsufficientData { distinct: usize },
    #[error("design matrix is rank deficient (pivot ratio {ratio:e})")]
    Conditioning { ratio: f64 },
    #[error("line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error("invalid fit file: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CalibrationError>;

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(CalibrationError::InvalidArgument(format!(
                "intrinsics need fx, fy > 0 and finite principal point, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Brown–Conrady radial (k1..k3) and tangential (p1, p2) coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DistortionCoeffs {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub p1: f64,
    pub p2: f64,
}

impl DistortionCoeffs {
    pub fn radial(k1: f64) -> Self {
        Self {
            k1,
            ..Self::default()
        }
    }

    fn is_zero(&self) -> bool {
        *self == Self::default()
    }
}

/// Intrinsics plus distortion, as stored in the camera JSON file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    #[serde(flatten)]
    pub intrinsics: CameraIntrinsics,
    #[serde(flatten)]
    pub distortion: DistortionCoeffs,
}

impl CameraModel {
    pub fn from_json(text: &str) -> Result<Self> {
        let model: CameraModel = serde_json::from_str(text)?;
        model.intrinsics.validate()?;
        let d = &model.distortion;
        if [d.k1, d.k2, d.k3, d.p1, d.p2].iter().any(|v| !v.is_finite()) {
            return Err(CalibrationError::InvalidArgument(
                "distortion coefficients must be finite".into(),
            ));
        }
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// A colour pixel with its aligned depth reading (mm).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthPixel {
    pub u: f64,
    pub v: f64,
    pub z: f64,
}

/// Point in the camera frame, mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

/// Pixel to normalized image coordinates.
pub fn normalize_pixel(u: f64, v: f64, intr: &CameraIntrinsics) -> [f64; 2] {
    [(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy]
}

/// Applies radial and tangential distortion to normalized coordinates.
pub fn distort(x: f64, y: f64, d: &DistortionCoeffs) -> [f64; 2] {
    let r2 = x * x + y * y;
    let radial = 1.0 + d.k1 * r2 + d.k2 * r2 * r2 + d.k3 * r2 * r2 * r2;
    [
        x * radial + 2.0 * d.p1 * x * y + d.p2 * (r2 + 2.0 * x * x),
        y * radial + d.p1 * (r2 + 2.0 * y * y) + 2.0 * d.p2 * x * y,
    ]
}

/// Inverts [`distort`] with a damped Newton iteration starting from the
/// distorted point.
///
/// Plain substitution x ← (x_d − tangential) / radial stops contracting once
/// |k1|·r² approaches 1/3, well inside the supported envelope, so each step
/// solves the linearized distortion instead and halves the step until the
/// residual drops. Converged when the step is below
/// [`UNDISTORT_STEP_TOLERANCE`].
pub fn undistort(xd: f64, yd: f64, d: &DistortionCoeffs) -> Result<[f64; 2]> {
    if !xd.is_finite() || !yd.is_finite() {
        return Err(CalibrationError::InvalidArgument(format!(
            "non-finite distorted point ({xd}, {yd})"
        )));
    }
    let residual = |x: f64, y: f64| {
        let [fx, fy] = distort(x, y, d);
        [fx - xd, fy - yd]
    };
    let (mut x, mut y) = (xd, yd);
    let mut f = residual(x, y);
    let mut iterations = 0;
    while iterations < UNDISTORT_MAX_ITERATIONS {
        iterations += 1;
        let norm = f[0].hypot(f[1]);
        if norm == 0.0 {
            return Ok([x, y]);
        }
        let r2 = x * x + y * y;
        let radial = 1.0 + d.k1 * r2 + d.k2 * r2 * r2 + d.k3 * r2 * r2 * r2;
        let dradial = d.k1 + 2.0 * d.k2 * r2 + 3.0 * d.k3 * r2 * r2;
        let jxx = radial + 2.0 * x * x * dradial + 2.0 * d.p1 * y + 6.0 * d.p2 * x;
        let jxy = 2.0 * x * y * dradial + 2.0 * d.p1 * x + 2.0 * d.p2 * y;
        let jyy = radial + 2.0 * y * y * dradial + 6.0 * d.p1 * y + 2.0 * d.p2 * x;
        let det = jxx * jyy - jxy * jxy;
        if det == 0.0 || !det.is_finite() {
            break;
        }
        let sx = (jyy * f[0] - jxy * f[1]) / det;
        let sy = (jxx * f[1] - jxy * f[0]) / det;

        let mut t = 1.0;
        let (nx, ny, nf) = loop {
            let (nx, ny) = (x - t * sx, y - t * sy);
            let nf = residual(nx, ny);
            if nf[0].hypot(nf[1]) < norm {
                break (nx, ny, nf);
            }
            t *= 0.5;
            if t < 1e-9 {
                // No descent: only round-off is left, or there is no preimage.
                return if norm < UNDISTORT_STEP_TOLERANCE {
                    Ok([x, y])
                } else {
                    Err(CalibrationError::Convergence {
                        iterations,
                        last: [x, y],
                    })
                };
            }
        };
        let step = (nx - x).hypot(ny - y);
        x = nx;
        y = ny;
        f = nf;
        if step < UNDISTORT_STEP_TOLERANCE {
            return Ok([x, y]);
        }
    }
    Err(CalibrationError::Convergence {
        iterations,
        last: [x, y],
    })
}

/// Back-projects an observed (distorted) pixel with depth into the camera
/// frame.
pub fn pixel_to_camera(
    px: &DepthPixel,
    intr: &CameraIntrinsics,
    d: &DistortionCoeffs,
) -> Result<CameraPoint> {
    check_depth(px)?;
    let [xd, yd] = normalize_pixel(px.u, px.v, intr);
    let [x, y] = if d.is_zero() { [xd, yd] } else { undistort(xd, yd, d)? };
    Ok(CameraPoint {
        x: x * px.z,
        y: y * px.z,
        z: px.z,
    })
}

/// Back-projection that skips undistortion and scales the normalized observed
/// pixel by depth directly.
pub fn pixel_to_camera_uncorrected(px: &DepthPixel, intr: &CameraIntrinsics) -> Result<CameraPoint> {
    check_depth(px)?;
    let [x, y] = normalize_pixel(px.u, px.v, intr);
    Ok(CameraPoint {
        x: x * px.z,
        y: y * px.z,
        z: px.z,
    })
}

fn check_depth(px: &DepthPixel) -> Result<()> {
    if !(px.z > 0.0) || !px.z.is_finite() || !px.u.is_finite() || !px.v.is_finite() {
        return Err(CalibrationError::InvalidArgument(format!(
            "pixel needs finite coordinates and positive depth, got {px:?}"
        )));
    }
    Ok(())
}

/// Plane in which bending angles are measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeasurementPlane {
    Xy,
    #[default]
    Xz,
    Yz,
}

impl MeasurementPlane {
    pub fn project(&self, p: &CameraPoint) -> [f64; 2] {
        match self {
            MeasurementPlane::Xy => [p.x, p.y],
            MeasurementPlane::Xz => [p.x, p.z],
            MeasurementPlane::Yz => [p.y, p.z],
        }
    }
}

/// Reference line in the measurement plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub origin: [f64; 2],
    pub direction: [f64; 2],
}

impl Line {
    /// Vertical line through the origin.
    pub fn vertical() -> Self {
        Self {
            origin: [0.0, 0.0],
            direction: [0.0, 1.0],
        }
    }
}

impl Default for Line {
    fn default() -> Self {
        Self::vertical()
    }
}

/// Unsigned angle in degrees, in [0, 180), between segment p1→p2 and the
/// reference direction.
pub fn angle_from_points(p1: [f64; 2], p2: [f64; 2], reference: &Line) -> Result<f64> {
    let seg = [p2[0] - p1[0], p2[1] - p1[1]];
    let dir = reference.direction;
    if seg[0] == 0.0 && seg[1] == 0.0 {
        return Err(CalibrationError::InvalidArgument("coincident points".into()));
    }
    if dir[0] == 0.0 && dir[1] == 0.0 {
        return Err(CalibrationError::InvalidArgument(
            "reference line has zero direction".into(),
        ));
    }
    let cross = seg[0] * dir[1] - seg[1] * dir[0];
    let dot = seg[0] * dir[0] + seg[1] * dir[1];
    let deg = cross.abs().atan2(dot).to_degrees();
    Ok(if deg >= 180.0 { 0.0 } else { deg })
}

/// [`angle_from_points`] for camera-frame points, projected onto `plane`.
pub fn angle_from_camera_points(
    p1: &CameraPoint,
    p2: &CameraPoint,
    plane: MeasurementPlane,
    reference: &Line,
) -> Result<f64> {
    angle_from_points(plane.project(p1), plane.project(p2), reference)
}

/// One calibration observation: controller pressure and the four measured
/// angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PressureSample {
    pub pressure: f64,
    pub thetas: [f64; SECTION_COUNT],
}

/// Cubic model θ = intercept + B·[p, p², p³] per section, angles in degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubicFit {
    pub intercept: [f64; SECTION_COUNT],
    #[serde(rename = "B")]
    pub b: [[f64; 3]; SECTION_COUNT],
    pub valid_range: [f64; 2],
    #[serde(default)]
    pub residual_rms_deg: [f64; SECTION_COUNT],
}

/// Result of [`predict_thetas`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaPrediction {
    pub thetas: [f64; SECTION_COUNT],
    /// The pressure was outside the fit range and was clamped.
    pub extrapolated: bool,
    /// Pressure actually used for evaluation.
    pub pressure: f64,
}

impl CubicFit {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.valid_range;
        if !(lo <= hi) {
            return Err(CalibrationError::InvalidArgument(format!(
                "valid_range [{lo}, {hi}] is not ordered"
            )));
        }
        let finite = self
            .intercept
            .iter()
            .chain(self.b.iter().flatten())
            .chain(self.valid_range.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(CalibrationError::InvalidArgument(
                "fit coefficients must be finite".into(),
            ));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let fit: CubicFit = serde_json::from_str(text)?;
        fit.validate()?;
        Ok(fit)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("fit serializes")
    }

    pub fn evaluate(&self, p: f64) -> [f64; SECTION_COUNT] {
        let mut out = [0.0; SECTION_COUNT];
        for (i, theta) in out.iter_mut().enumerate() {
            let [b1, b2, b3] = self.b[i];
            *theta = self.intercept[i] + p * (b1 + p * (b2 + p * b3));
        }
        out
    }
}

/// Evaluates the fit at `p`, clamping to the valid range.
pub fn predict_thetas(fit: &CubicFit, p: f64) -> ThetaPrediction {
    let [lo, hi] = fit.valid_range;
    let clamped = p.clamp(lo, hi);
    ThetaPrediction {
        thetas: fit.evaluate(clamped),
        extrapolated: clamped != p,
        pressure: clamped,
    }
}

/// Least-squares cubic per section.
///
/// Columns [1, p, p², p³] are scaled to unit norm and solved by Householder
/// QR. Samples are sorted first so the result does not depend on input order.
pub fn fit_cubic(samples: &[PressureSample]) -> Result<CubicFit> {
    if samples
        .iter()
        .any(|s| !s.pressure.is_finite() || s.thetas.iter().any(|t| !t.is_finite()))
    {
        return Err(CalibrationError::InvalidArgument(
            "samples must be finite".into(),
        ));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| {
        a.pressure
            .total_cmp(&b.pressure)
            .then_with(|| {
                a.thetas
                    .iter()
                    .zip(b.thetas.iter())
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
    });
    let mut distinct = sorted.iter().map(|s| s.pressure).collect::<Vec<_>>();
    distinct.dedup();
    if distinct.len() < MIN_DISTINCT_PRESSURES {
        return Err(CalibrationError::InsufficientData {
            distinct: distinct.len(),
        });
    }

    let n = sorted.len();
    let mut design = DMatrix::from_fn(n, 4, |r, c| sorted[r].pressure.powi(c as i32));
    let mut scale = [0.0; 4];
    for (c, s) in scale.iter_mut().enumerate() {
        let norm = design.column(c).norm();
        *s = if norm > 0.0 { norm } else { 1.0 };
        design.column_mut(c).unscale_mut(*s);
    }

    let qr = design.clone().qr();
    let r = qr.r();
    let diag = r.diagonal().map(f64::abs);
    let ratio = diag.min() / diag.max();
    if !(ratio > 1e-12) {
        return Err(CalibrationError::Conditioning { ratio });
    }

    let mut intercept = [0.0; SECTION_COUNT];
    let mut b = [[0.0; 3]; SECTION_COUNT];
    let mut residual_rms_deg = [0.0; SECTION_COUNT];
    for sec in 0..SECTION_COUNT {
        let y = DVector::from_fn(n, |r, _| sorted[r].thetas[sec]);
        let mut qty = y.clone();
        qr.q_tr_mul(&mut qty);
        let scaled = r
            .solve_upper_triangular(&qty.rows(0, 4).into_owned())
            .ok_or(CalibrationError::Conditioning { ratio })?;
        let residual = &y - &design * &scaled;
        residual_rms_deg[sec] = (residual.norm_squared() / n as f64).sqrt();
        intercept[sec] = scaled[0] / scale[0];
        b[sec] = [
            scaled[1] / scale[1],
            scaled[2] / scale[2],
            scaled[3] / scale[3],
        ];
    }

    Ok(CubicFit {
        intercept,
        b,
        valid_range: [distinct[0], distinct[distinct.len() - 1]],
        residual_rms_deg,
    })
}

/// Reads calibration samples from CSV with the
/// `pressure_kpa,theta1_deg,...,theta4_deg` header.
pub fn read_samples_csv<R: Read>(reader: R) -> Result<Vec<PressureSample>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers().map_err(|e| csv_error(1, e))?.clone();
    if headers.len() != CALIBRATION_CSV_HEADER.len() {
        return Err(CalibrationError::Csv {
            line: 1,
            message: format!(
                "expected {} columns ({}), found {}",
                CALIBRATION_CSV_HEADER.len(),
                CALIBRATION_CSV_HEADER.join(","),
                headers.len()
            ),
        });
    }
    for (i, (got, want)) in headers.iter().zip(CALIBRATION_CSV_HEADER).enumerate() {
        if got != want {
            return Err(CalibrationError::Csv {
                line: 1,
                message: format!("column {} is `{got}`, expected `{want}`", i + 1),
            });
        }
    }

    let mut samples = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            csv_error(line, e)
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let mut values = [0.0f64; 5];
        for (i, v) in values.iter_mut().enumerate() {
            let field = record.get(i).unwrap_or("");
            *v = field.parse().map_err(|_| CalibrationError::Csv {
                line,
                message: format!("`{field}` in column `{}` is not a number", CALIBRATION_CSV_HEADER[i]),
            })?;
            if !v.is_finite() {
                return Err(CalibrationError::Csv {
                    line,
                    message: format!("non-finite value in column `{}`", CALIBRATION_CSV_HEADER[i]),
                });
            }
        }
        samples.push(PressureSample {
            pressure: values[0],
            thetas: [values[1], values[2], values[3], values[4]],
        });
    }
    Ok(samples)
}

fn csv_error(line: u64, e: csv::Error) -> CalibrationError {
    CalibrationError::Csv {
        line,
        message: e.to_string(),
    }
}

pub fn write_samples_csv<W: Write>(writer: W, samples: &[PressureSample]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let to_io = |e: csv::Error| CalibrationError::Io(e.into());
    w.write_record(CALIBRATION_CSV_HEADER).map_err(to_io)?;
    for s in samples {
        let mut row = vec![s.pressure.to_string()];
        row.extend(s.thetas.iter().map(|t| t.to_string()));
        w.write_record(&row).map_err(to_io)?;
    }
    w.flush()?;
    Ok(())
}

/// Two picked points marking one section's cut line, as observed pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointPair {
    pub first: DepthPixel,
    pub second: DepthPixel,
}

/// Measurement settings for turning picked pixel pairs into angles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSetup {
    pub camera: CameraModel,
    #[serde(default)]
    pub plane: MeasurementPlane,
    #[serde(default)]
    pub reference: Line,
    /// Back-project without undistortion.
    #[serde(default)]
    pub skip_undistort: bool,
}

/// Angles (degrees) of the four section cut lines relative to the reference.
pub fn measure_thetas(
    pairs: &[PointPair; SECTION_COUNT],
    setup: &MeasurementSetup,
) -> Result<[f64; SECTION_COUNT]> {
    let mut out = [0.0; SECTION_COUNT];
    for (theta, pair) in out.iter_mut().zip(pairs) {
        let project = |px: &DepthPixel| {
            if setup.skip_undistort {
                pixel_to_camera_uncorrected(px, &setup.camera.intrinsics)
            } else {
                pixel_to_camera(px, &setup.camera.intrinsics, &setup.camera.distortion)
            }
        };
        let a = project(&pair.first)?;
        let b = project(&pair.second)?;
        *theta = angle_from_camera_points(&a, &b, setup.plane, &setup.reference)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(600.0, 600.0, 320.0, 240.0).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_pixel(320.0, 240.0, &intr()), [0.0, 0.0]);
        assert_eq!(normalize_pixel(920.0, 240.0, &intr()), [1.0, 0.0]);
        assert_eq!(normalize_pixel(320.0, -360.0, &intr()), [0.0, -1.0]);
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 600.0, 0.0, 0.0).is_err());
        assert!(CameraIntrinsics::new(600.0, -1.0, 0.0, 0.0).is_err());
        assert!(CameraIntrinsics::new(600.0, 600.0, f64::NAN, 0.0).is_err());
    }

    #[test]
    fn distort_examples() {
        let zero = DistortionCoeffs::default();
        assert_eq!(distort(0.3, -0.7, &zero), [0.3, -0.7]);

        let [x, y] = distort(0.5, 0.0, &DistortionCoeffs::radial(0.1));
        assert!(close(x, 0.5125, 1e-15) && y == 0.0);

        let d = DistortionCoeffs {
            p1: 0.01,
            ..Default::default()
        };
        let [x, y] = distort(0.3, 0.4, &d);
        assert!(close(x, 0.3024, 1e-15), "{x}");
        assert!(close(y, 0.4057, 1e-15), "{y}");
    }

    #[test]
    fn undistort_examples() {
        assert_eq!(undistort(0.2, 0.1, &DistortionCoeffs::default()).unwrap(), [0.2, 0.1]);
        let [x, y] = undistort(0.5125, 0.0, &DistortionCoeffs::radial(0.1)).unwrap();
        assert!(close(x, 0.5, 1e-8) && close(y, 0.0, 1e-8));
    }

    #[test]
    fn undistort_reports_missing_preimage() {
        // With p1 = 1 alone, y_d = y + x² + 3y² never drops below -1/12.
        let d = DistortionCoeffs {
            p1: 1.0,
            ..Default::default()
        };
        assert!(matches!(
            undistort(0.0, -10.0, &d),
            Err(CalibrationError::Convergence { .. })
        ));
    }

    #[test]
    fn undistort_handles_strong_barrel_corner() {
        let d = DistortionCoeffs::radial(-0.3);
        let [xd, yd] = distort(0.7, -0.7, &d);
        let [x, y] = undistort(xd, yd, &d).unwrap();
        assert!(close(x, 0.7, 1e-12) && close(y, -0.7, 1e-12), "{x} {y}");
    }

    #[test]
    fn pixel_to_camera_examples() {
        let z = DistortionCoeffs::default();
        let p = pixel_to_camera(&DepthPixel { u: 320.0, v: 240.0, z: 321.0 }, &intr(), &z).unwrap();
        assert_eq!((p.x, p.y, p.z), (0.0, 0.0, 321.0));
        let p = pixel_to_camera(&DepthPixel { u: 920.0, v: 240.0, z: 500.0 }, &intr(), &z).unwrap();
        assert_eq!((p.x, p.y, p.z), (500.0, 0.0, 500.0));
        assert!(pixel_to_camera(&DepthPixel { u: 1.0, v: 1.0, z: 0.0 }, &intr(), &z).is_err());
    }

    #[test]
    fn angle_examples() {
        let v = Line::vertical();
        assert_eq!(angle_from_points([0.0, 0.0], [0.0, 1.0], &v).unwrap(), 0.0);
        assert!(close(angle_from_points([0.0, 0.0], [1.0, 1.0], &v).unwrap(), 45.0, 1e-12));
        assert!(close(angle_from_points([0.0, 0.0], [1.0, 0.0], &v).unwrap(), 90.0, 1e-12));
        // Anti-parallel folds onto 0.
        assert_eq!(angle_from_points([0.0, 0.0], [0.0, -1.0], &v).unwrap(), 0.0);
        assert!(matches!(
            angle_from_points([1.0, 2.0], [1.0, 2.0], &v),
            Err(CalibrationError::InvalidArgument(_))
        ));
    }

    #[test]
    fn plane_projection() {
        let p = CameraPoint { x: 1.0, y: 2.0, z: 3.0 };
        assert_eq!(MeasurementPlane::Xz.project(&p), [1.0, 3.0]);
        assert_eq!(MeasurementPlane::Xy.project(&p), [1.0, 2.0]);
        assert_eq!(MeasurementPlane::Yz.project(&p), [2.0, 3.0]);
    }

    #[test]
    fn constant_data_fits_constant() {
        let samples: Vec<_> = (0..10)
            .map(|i| PressureSample {
                pressure: i as f64 * 5.0,
                thetas: [30.0; 4],
            })
            .collect();
        let fit = fit_cubic(&samples).unwrap();
        for s in 0..4 {
            assert!(close(fit.intercept[s], 30.0, 1e-10));
            for c in fit.b[s] {
                assert!(c.abs() < 1e-10, "{c}");
            }
        }
        assert_eq!(fit.valid_range, [0.0, 45.0]);
    }

    #[test]
    fn too_few_pressures() {
        let samples: Vec<_> = [0.0, 5.0, 10.0, 10.0, 0.0, 5.0]
            .iter()
            .map(|&p| PressureSample {
                pressure: p,
                thetas: [p; 4],
            })
            .collect();
        assert!(matches!(
            fit_cubic(&samples),
            Err(CalibrationError::InsufficientData { distinct: 3 })
        ));
        let msg = fit_cubic(&samples).unwrap_err().to_string();
        assert!(msg.contains("need ≥5 distinct pressures"), "{msg}");
    }

    #[test]
    fn near_duplicate_pressures_are_ill_conditioned() {
        let samples: Vec<_> = [0.0, 1e-9, 2e-9, 3e-9, 4e-9]
            .iter()
            .map(|&p| PressureSample {
                pressure: 100.0 + p,
                thetas: [1.0; 4],
            })
            .collect();
        assert!(matches!(
            fit_cubic(&samples),
            Err(CalibrationError::Conditioning { .. })
        ));
    }

    #[test]
    fn predict_examples() {
        let fit = CubicFit {
            intercept: [0.0; 4],
            b: [[1.0, 0.0, 0.0]; 4],
            valid_range: [-90.0, 120.0],
            residual_rms_deg: [0.0; 4],
        };
        let p = predict_thetas(&fit, 50.0);
        assert_eq!(p.thetas, [50.0; 4]);
        assert!(!p.extrapolated);

        let fit = CubicFit {
            intercept: [5.0; 4],
            b: [[0.1, 0.001, -0.00001]; 4],
            ..fit
        };
        for t in predict_thetas(&fit, 100.0).thetas {
            assert!(close(t, 15.0, 1e-12), "{t}");
        }

        let p = predict_thetas(&fit, 200.0);
        assert!(p.extrapolated);
        assert_eq!(p.pressure, 120.0);
        assert_eq!(p.thetas, fit.evaluate(120.0));
        assert!(predict_thetas(&fit, -200.0).extrapolated);
    }

    #[test]
    fn fit_json_shape() {
        let fit = CubicFit {
            intercept: [1.0, 2.0, 3.0, 4.0],
            b: [[0.5, 0.0, 0.0]; 4],
            valid_range: [-90.0, 120.0],
            residual_rms_deg: [0.0; 4],
        };
        let v: serde_json::Value = serde_json::to_value(&fit).unwrap();
        assert_eq!(v["B"].as_array().unwrap().len(), 4);
        assert_eq!(v["B"][0].as_array().unwrap().len(), 3);
        assert_eq!(v["valid_range"], serde_json::json!([-90.0, 120.0]));
        assert!(v.get("residual_rms_deg").is_some());
        assert_eq!(CubicFit::from_json(&v.to_string()).unwrap(), fit);

        let bad = r#"{"intercept":[0,0,0,0],"B":[[0,0,0],[0,0,0],[0,0,0],[0,0,0]],"valid_range":[5,1]}"#;
        assert!(CubicFit::from_json(bad).is_err());
    }

    #[test]
    fn csv_header_typo_names_column() {
        let text = "pressure_kpa,theta1_deg,theta_2deg,theta3_deg,theta4_deg\n0,1,2,3,4\n";
        let err = read_samples_csv(text.as_bytes()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("theta_2deg") && msg.contains("theta2_deg"), "{msg}");
    }

    #[test]
    fn csv_bad_value_reports_line() {
        let text = "pressure_kpa,theta1_deg,theta2_deg,theta3_deg,theta4_deg\n0,1,2,3,4\n5,1,x,3,4\n";
        match read_samples_csv(text.as_bytes()) {
            Err(CalibrationError::Csv { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("theta2_deg"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_round_trip() {
        let samples = vec![
            PressureSample { pressure: -90.0, thetas: [1.5, 2.0, 3.0, 4.0] },
            PressureSample { pressure: 5.0, thetas: [0.1, 0.2, 0.3, 0.4] },
        ];
        let mut buf = Vec::new();
        write_samples_csv(&mut buf, &samples).unwrap();
        assert!(buf.starts_with(b"pressure_kpa,theta1_deg,theta2_deg,theta3_deg,theta4_deg\n"));
        assert_eq!(read_samples_csv(buf.as_slice()).unwrap(), samples);
    }

    #[test]
    fn camera_json_format() {
        let text = r#"{"fx":600,"fy":600,"cx":320,"cy":240,"k1":0.1,"k2":0,"k3":0,"p1":0,"p2":0}"#;
        let m = CameraModel::from_json(text).unwrap();
        assert_eq!(m.intrinsics, intr());
        assert_eq!(m.distortion, DistortionCoeffs::radial(0.1));
    }

    #[test]
    fn measure_section_angles() {
        let setup = MeasurementSetup {
            camera: CameraModel {
                intrinsics: intr(),
                distortion: DistortionCoeffs::default(),
            },
            plane: MeasurementPlane::Xy,
            reference: Line::vertical(),
            skip_undistort: false,
        };
        // Same depth; pixel offsets (0, 100), (100, 100), (100, 0), (-100, 100).
        let px = |u: f64, v: f64| DepthPixel { u, v, z: 400.0 };
        let pairs = [
            PointPair { first: px(320.0, 240.0), second: px(320.0, 340.0) },
            PointPair { first: px(320.0, 240.0), second: px(420.0, 340.0) },
            PointPair { first: px(320.0, 240.0), second: px(420.0, 240.0) },
            PointPair { first: px(320.0, 240.0), second: px(220.0, 340.0) },
        ];
        let thetas = measure_thetas(&pairs, &setup).unwrap();
        let expected = [0.0, 45.0, 90.0, 45.0];
        for (t, e) in thetas.iter().zip(expected) {
            assert!(close(*t, e, 1e-9), "{thetas:?}");
        }
    }
}
