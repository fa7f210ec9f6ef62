//! Piecewise-constant-curvature forward kinematics.
//!
//! Maps per-section arc parameters (curvature, bending-plane rotation, arc
//! length) to the pose of the gripper tip. Each section contributes one
//! homogeneous transform; the four are chained base to tip, prefixed by the
//! mount transform and, for the task-space pose, the robot flange pose.
//!
//! Lengths are millimetres, angles radians. Section 1 sits at the mount,
//! section 4 at the tip.

use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Number of constant-curvature sections in the gripper model.
pub const SECTION_COUNT: usize = 4;

/// Arc lengths of the four sections, mm.
pub const DEFAULT_ARC_LENGTHS: [f64; SECTION_COUNT] = [14.0, 14.0, 12.32, 15.39];

/// Below this bending angle |κ·l| the straight-section limit is used.
pub const STRAIGHT_THRESHOLD: f64 = 1e-9;

/// Tolerance on the quaternion norm accepted by [`flange_transform`].
pub const QUATERNION_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KinematicsError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, KinematicsError>;

fn invalid(msg: impl Into<String>) -> KinematicsError {
    KinematicsError::InvalidArgument(msg.into())
}

/// Configuration-space variables of one section.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArcParams {
    /// Curvature, 1/mm.
    pub kappa: f64,
    /// Rotation of the bending plane about the section's base z-axis, rad.
    pub phi: f64,
    /// Arc length, mm.
    pub length: f64,
}

impl ArcParams {
    pub fn new(kappa: f64, phi: f64, length: f64) -> Result<Self> {
        let arc = Self { kappa, phi, length };
        arc.validate()?;
        Ok(arc)
    }

    /// Straight section of the given length.
    pub fn straight(length: f64) -> Result<Self> {
        Self::new(0.0, 0.0, length)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.kappa.is_finite() || !self.phi.is_finite() || !self.length.is_finite() {
            return Err(invalid(format!("non-finite arc parameters {self:?}")));
        }
        if self.length <= 0.0 {
            return Err(invalid(format!("arc length must be positive, got {}", self.length)));
        }
        Ok(())
    }

    /// Total bending angle κ·l, rad.
    pub fn bend_angle(&self) -> f64 {
        self.kappa * self.length
    }
}

/// The four-section gripper, ordered base to tip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GripperConfig {
    pub sections: [ArcParams; SECTION_COUNT],
}

impl GripperConfig {
    pub fn new(sections: [ArcParams; SECTION_COUNT]) -> Result<Self> {
        for s in &sections {
            s.validate()?;
        }
        Ok(Self { sections })
    }

    /// All sections straight, default lengths.
    pub fn straight() -> Self {
        let sections = DEFAULT_ARC_LENGTHS.map(|length| ArcParams {
            kappa: 0.0,
            phi: 0.0,
            length,
        });
        Self { sections }
    }

    pub fn total_length(&self) -> f64 {
        self.sections.iter().map(|s| s.length).sum()
    }

    pub fn kappas(&self) -> [f64; SECTION_COUNT] {
        self.sections.map(|s| s.kappa)
    }
}

impl Default for GripperConfig {
    fn default() -> Self {
        Self::straight()
    }
}

/// 4×4 rigid homogeneous transform; translation in mm.
///
/// Serialized as four rows of four numbers.
#[derive(Clone, Copy, PartialEq)]
pub struct HomTransform(Matrix4<f64>);

impl HomTransform {
    pub fn identity() -> Self {
        Self(Matrix4::identity())
    }

    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        Self(m)
    }

    /// Builds from row-major entries, checking the rigid-transform invariants.
    pub fn from_rows(rows: [[f64; 4]; 4]) -> Result<Self> {
        let t = Self(Matrix4::from_fn(|r, c| rows[r][c]));
        t.check_rigid(1e-9)?;
        Ok(t)
    }

    pub fn translation_only(t: [f64; 3]) -> Self {
        Self::from_parts(Matrix3::identity(), Vector3::from(t))
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.0
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.0.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn position(&self) -> [f64; 3] {
        let t = self.translation();
        [t.x, t.y, t.z]
    }

    pub fn rows(&self) -> [[f64; 4]; 4] {
        let mut out = [[0.0; 4]; 4];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = self.0[(r, c)];
            }
        }
        out
    }

    /// Orientation as a scalar-first unit quaternion (w, x, y, z).
    pub fn quaternion(&self) -> [f64; 4] {
        let rot = Rotation3::from_matrix_unchecked(self.rotation());
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        [q.w, q.i, q.j, q.k]
    }

    /// Checks bottom row, orthonormality and handedness within `tol`.
    pub fn check_rigid(&self, tol: f64) -> Result<()> {
        let m = &self.0;
        if m.iter().any(|v| !v.is_finite()) {
            return Err(invalid("transform has non-finite entries"));
        }
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(invalid(format!("bottom row is {bottom:?}, expected [0, 0, 0, 1]")));
        }
        let r = self.rotation();
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        if ortho > tol {
            return Err(invalid(format!("rotation not orthonormal (deviation {ortho:e})")));
        }
        let det = r.determinant();
        if (det - 1.0).abs() > tol {
            return Err(invalid(format!("rotation determinant {det}, expected 1")));
        }
        Ok(())
    }

    pub fn is_rigid(&self, tol: f64) -> bool {
        self.check_rigid(tol).is_ok()
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation().transpose();
        Self::from_parts(rt, -(rt * self.translation()))
    }

    /// Largest absolute entry-wise difference.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        (self.0 - other.0).abs().max()
    }
}

impl Default for HomTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl Mul for HomTransform {
    type Output = HomTransform;

    fn mul(self, rhs: HomTransform) -> HomTransform {
        HomTransform(self.0 * rhs.0)
    }
}

impl Mul<&HomTransform> for &HomTransform {
    type Output = HomTransform;

    fn mul(self, rhs: &HomTransform) -> HomTransform {
        HomTransform(self.0 * rhs.0)
    }
}

impl fmt::Debug for HomTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("HomTransform").field(&self.rows()).finish()
    }
}

impl fmt::Display for HomTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for row in self.rows() {
            writeln!(
                f,
                "[{:>12.6} {:>12.6} {:>12.6} {:>12.6}]",
                row[0], row[1], row[2], row[3]
            )?;
        }
        Ok(())
    }
}

impl Serialize for HomTransform {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.rows().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for HomTransform {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let rows = <[[f64; 4]; 4]>::deserialize(deserializer)?;
        HomTransform::from_rows(rows).map_err(serde::de::Error::custom)
    }
}

/// Robot flange pose: tool-centre-point position plus orientation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlangePose {
    /// (t_x, t_y, t_z), mm.
    pub translation: [f64; 3],
    /// Unit quaternion, scalar first (q_w, q_x, q_y, q_z).
    pub orientation: [f64; 4],
}

impl FlangePose {
    pub fn identity() -> Self {
        Self {
            translation: [0.0; 3],
            orientation: [1.0, 0.0, 0.0, 0.0],
        }
    }

    pub fn new(translation: [f64; 3], orientation: [f64; 4]) -> Result<Self> {
        let pose = Self {
            translation,
            orientation,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn validate(&self) -> Result<()> {
        if self
            .translation
            .iter()
            .chain(self.orientation.iter())
            .any(|v| !v.is_finite())
        {
            return Err(invalid("flange pose has non-finite components"));
        }
        let norm = self.orientation.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > QUATERNION_NORM_TOLERANCE {
            return Err(invalid(format!("flange quaternion norm is {norm}, expected 1")));
        }
        Ok(())
    }
}

impl Default for FlangePose {
    fn default() -> Self {
        Self::identity()
    }
}

/// Gripper base frame relative to the flange frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GripperMount {
    pub mount_transform: HomTransform,
}

impl GripperMount {
    pub fn new(mount_transform: HomTransform) -> Result<Self> {
        mount_transform.check_rigid(1e-9)?;
        Ok(Self { mount_transform })
    }
}

/// Homogeneous transform of a single constant-curvature arc.
///
/// Rotation is Rz(φ)·Ry(κl); the tip sits at
/// Rz(φ)·((1 − cos κl)/κ, 0, sin κl/κ). For |κl| below
/// [`STRAIGHT_THRESHOLD`] the straight limit Rz(φ) with translation (0, 0, l)
/// is returned.
pub fn arc_transform(arc: &ArcParams) -> Result<HomTransform> {
    arc.validate()?;
    let (sp, cp) = arc.phi.sin_cos();
    let bend = arc.bend_angle();

    if bend.abs() < STRAIGHT_THRESHOLD {
        let rotation = Matrix3::new(cp, -sp, 0.0, sp, cp, 0.0, 0.0, 0.0, 1.0);
        return Ok(HomTransform::from_parts(
            rotation,
            Vector3::new(0.0, 0.0, arc.length),
        ));
    }

    let (sb, cb) = bend.sin_cos();
    // (1 - cos x) written as 2 sin^2(x/2) to avoid cancellation at small x.
    let half = (0.5 * bend).sin();
    let radial = 2.0 * half * half / arc.kappa;
    let axial = sb / arc.kappa;

    #[rustfmt::skip]
    let rotation = Matrix3::new(
        cp * cb, -sp, cp * sb,
        sp * cb,  cp, sp * sb,
        -sb,     0.0, cb,
    );
    Ok(HomTransform::from_parts(
        rotation,
        Vector3::new(cp * radial, sp * radial, axial),
    ))
}

/// Tip of section 4 relative to the flange: mount · T₁ · T₂ · T₃ · T₄.
pub fn chain_transform(config: &GripperConfig, mount: &GripperMount) -> Result<HomTransform> {
    config
        .sections
        .iter()
        .try_fold(mount.mount_transform, |acc, arc| Ok(acc * arc_transform(arc)?))
}

/// Flange pose relative to the robot base, from position and quaternion.
///
/// The quaternion must already be unit length; it is never renormalized.
pub fn flange_transform(pose: &FlangePose) -> Result<HomTransform> {
    pose.validate()?;
    let [w, x, y, z] = pose.orientation;
    let [tx, ty, tz] = pose.translation;

    #[rustfmt::skip]
    let rotation = Matrix3::new(
        1.0 - 2.0 * y * y - 2.0 * z * z, 2.0 * x * y - 2.0 * z * w,       2.0 * x * z + 2.0 * y * w,
        2.0 * x * y + 2.0 * z * w,       1.0 - 2.0 * x * x - 2.0 * z * z, 2.0 * y * z - 2.0 * x * w,
        2.0 * x * z - 2.0 * y * w,       2.0 * y * z + 2.0 * x * w,       1.0 - 2.0 * x * x - 2.0 * y * y,
    );
    Ok(HomTransform::from_parts(rotation, Vector3::new(tx, ty, tz)))
}

/// Gripper tip relative to the robot base.
pub fn end_effector(
    pose: &FlangePose,
    config: &GripperConfig,
    mount: &GripperMount,
) -> Result<HomTransform> {
    Ok(flange_transform(pose)? * chain_transform(config, mount)?)
}

/// Builds a gripper configuration from per-section bending angles via κ = θ/l.
pub fn thetas_to_config(
    thetas: &[f64; SECTION_COUNT],
    phis: &[f64; SECTION_COUNT],
    lengths: &[f64; SECTION_COUNT],
) -> Result<GripperConfig> {
    let mut sections = [ArcParams {
        kappa: 0.0,
        phi: 0.0,
        length: 1.0,
    }; SECTION_COUNT];
    for i in 0..SECTION_COUNT {
        if !(lengths[i] > 0.0) {
            return Err(invalid(format!(
                "section {} length must be positive, got {}",
                i + 1,
                lengths[i]
            )));
        }
        sections[i] = ArcParams::new(thetas[i] / lengths[i], phis[i], lengths[i])?;
    }
    Ok(GripperConfig { sections })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    fn assert_rotation(t: &HomTransform, expected: [[f64; 3]; 3], tol: f64) {
        let r = t.rotation();
        for i in 0..3 {
            for j in 0..3 {
                assert_close(r[(i, j)], expected[i][j], tol);
            }
        }
    }

    #[test]
    fn straight_arc_is_pure_translation() {
        let t = arc_transform(&ArcParams::new(0.0, 0.0, 14.0).unwrap()).unwrap();
        assert_eq!(t.position(), [0.0, 0.0, 14.0]);
        assert_rotation(&t, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], 0.0);
    }

    #[test]
    fn quarter_circle_arc() {
        let t = arc_transform(&ArcParams::new(PI / 28.0, 0.0, 14.0).unwrap()).unwrap();
        assert_rotation(&t, [[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]], 1e-15);
        let r = 28.0 / PI;
        let p = t.position();
        assert_close(p[0], r, 1e-12);
        assert_close(p[1], 0.0, 1e-15);
        assert_close(p[2], r, 1e-12);
        assert_close(r, 8.9127, 1e-4);
    }

    #[test]
    fn quarter_circle_rotated_bending_plane() {
        let t = arc_transform(&ArcParams::new(PI / 28.0, FRAC_PI_2, 14.0).unwrap()).unwrap();
        let p = t.position();
        assert_close(p[0], 0.0, 1e-12);
        assert_close(p[1], 28.0 / PI, 1e-12);
        assert_close(p[2], 28.0 / PI, 1e-12);
    }

    #[test]
    fn non_finite_arc_rejected() {
        let bad = ArcParams {
            kappa: f64::NAN,
            phi: 0.0,
            length: 1.0,
        };
        assert!(matches!(arc_transform(&bad), Err(KinematicsError::InvalidArgument(_))));
        assert!(ArcParams::new(0.0, f64::INFINITY, 1.0).is_err());
        assert!(ArcParams::new(0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn straight_chain_length() {
        let t = chain_transform(&GripperConfig::straight(), &GripperMount::default()).unwrap();
        let p = t.position();
        assert_eq!([p[0], p[1]], [0.0, 0.0]);
        assert_close(p[2], 55.71, 1e-12);
    }

    #[test]
    fn flange_identity_quaternion() {
        let pose = FlangePose::new([100.0, 0.0, 50.0], [1.0, 0.0, 0.0, 0.0]).unwrap();
        let t = flange_transform(&pose).unwrap();
        assert_eq!(t.position(), [100.0, 0.0, 50.0]);
        assert_rotation(&t, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], 0.0);
    }

    #[test]
    fn flange_quarter_turn_about_z() {
        let h = 0.5f64.sqrt();
        let t = flange_transform(&FlangePose::new([0.0; 3], [h, 0.0, 0.0, h]).unwrap()).unwrap();
        assert_rotation(&t, [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]], 1e-15);
    }

    #[test]
    fn flange_half_turn_about_x() {
        let t =
            flange_transform(&FlangePose::new([0.0; 3], [0.0, 1.0, 0.0, 0.0]).unwrap()).unwrap();
        assert_rotation(&t, [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]], 0.0);
    }

    #[test]
    fn flange_rejects_non_unit_quaternion() {
        let pose = FlangePose {
            translation: [0.0; 3],
            orientation: [1.0, 0.01, 0.0, 0.0],
        };
        assert!(flange_transform(&pose).is_err());
        // Within tolerance is accepted as is.
        let pose = FlangePose {
            translation: [0.0; 3],
            orientation: [1.0 + 5e-7, 0.0, 0.0, 0.0],
        };
        assert!(flange_transform(&pose).is_ok());
    }

    #[test]
    fn end_effector_with_rotated_flange() {
        let h = 0.5f64.sqrt();
        let pose = FlangePose::new([200.0, 0.0, 300.0], [h, 0.0, 0.0, h]).unwrap();
        let t = end_effector(&pose, &GripperConfig::straight(), &GripperMount::default()).unwrap();
        let p = t.position();
        assert_close(p[0], 200.0, 1e-12);
        assert_close(p[1], 0.0, 1e-12);
        assert_close(p[2], 355.71, 1e-12);
        assert_rotation(&t, [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]], 1e-15);
    }

    #[test]
    fn thetas_divide_by_length() {
        let cfg = thetas_to_config(&[0.0; 4], &[0.0; 4], &DEFAULT_ARC_LENGTHS).unwrap();
        assert_eq!(cfg.kappas(), [0.0; 4]);

        let cfg =
            thetas_to_config(&[FRAC_PI_2, 0.0, 0.0, 0.0], &[0.0; 4], &DEFAULT_ARC_LENGTHS).unwrap();
        assert_close(cfg.sections[0].kappa, PI / 28.0, 1e-15);

        // Degrees [10, 20, 15, 5] over the default lengths, values from a
        // separate script.
        let thetas = [10.0f64, 20.0, 15.0, 5.0].map(f64::to_radians);
        let cfg = thetas_to_config(&thetas, &[0.0; 4], &DEFAULT_ARC_LENGTHS).unwrap();
        let expected = [
            0.01246663751424521,
            0.02493327502849042,
            0.021249950308372515,
            0.00567033545157352,
        ];
        for (k, e) in cfg.kappas().iter().zip(expected) {
            assert_close(*k, e, 1e-15);
        }
    }

    #[test]
    fn thetas_reject_bad_length() {
        let err = thetas_to_config(&[0.0; 4], &[0.0; 4], &[14.0, 0.0, 12.32, 15.39]);
        assert!(matches!(err, Err(KinematicsError::InvalidArgument(_))));
        assert!(thetas_to_config(&[0.0; 4], &[0.0; 4], &[14.0, -1.0, 12.32, 15.39]).is_err());
    }

    #[test]
    fn transform_serializes_as_rows() {
        let t = HomTransform::translation_only([1.0, 2.0, 3.0]);
        let json = serde_json::to_string(&t).unwrap();
        assert_eq!(
            json,
            "[[1.0,0.0,0.0,1.0],[0.0,1.0,0.0,2.0],[0.0,0.0,1.0,3.0],[0.0,0.0,0.0,1.0]]"
        );
        let back: HomTransform = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
        assert!(serde_json::from_str::<HomTransform>(
            "[[2,0,0,0],[0,1,0,0],[0,0,1,0],[0,0,0,1]]"
        )
        .is_err());
    }

    #[test]
    fn quaternion_summary_round_trips() {
        let h = 0.5f64.sqrt();
        let t = flange_transform(&FlangePose::new([0.0; 3], [h, 0.0, 0.0, h]).unwrap()).unwrap();
        let q = t.quaternion();
        for (a, b) in q.iter().zip([h, 0.0, 0.0, h]) {
            assert_close(*a, b, 1e-12);
        }
    }
}
