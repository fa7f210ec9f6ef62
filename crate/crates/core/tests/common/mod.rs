#![allow(dead_code)]

use std::f64::consts::PI;

use gripper_twin::kinematics::{ArcParams, GripperConfig, SECTION_COUNT};
use rand::Rng;

pub type Mat3 = [[f64; 3]; 3];

#[derive(Debug, Clone, Copy)]
pub struct Frame {
    pub r: Mat3,
    pub p: [f64; 3],
}

impl Frame {
    pub fn identity() -> Self {
        Frame {
            r: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            p: [0.0; 3],
        }
    }

    pub fn compose(&self, other: &Frame) -> Frame {
        let mut r = [[0.0; 3]; 3];
        let mut p = self.p;
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = (0..3).map(|k| self.r[i][k] * other.r[k][j]).sum();
            }
            p[i] += (0..3).map(|k| self.r[i][k] * other.p[k]).sum::<f64>();
        }
        Frame { r, p }
    }
}

/// Integrates one arc as `steps` straight segments.
///
/// The backbone tangent turns by κ·h per segment in the bending plane;
/// positions use the midpoint tangent. The tangent angle is advanced by
/// repeated multiplication with a fixed rotation, never evaluated in closed
/// form, and the final frame is rebuilt from the integrated tangent.
pub fn integrate_arc(kappa: f64, phi: f64, length: f64, steps: usize) -> Frame {
    let h = length / steps as f64;
    let (ds, dc) = (kappa * h).sin_cos();
    let (mut s, mut c) = (0.5 * kappa * h).sin_cos();
    let (mut x, mut z) = (0.0, 0.0);
    for _ in 0..steps {
        x += h * s;
        z += h * c;
        let (s2, c2) = (s * dc + c * ds, c * dc - s * ds);
        s = s2;
        c = c2;
    }
    // Back up half a step from the last midpoint to the tip.
    let (hs, hc) = (0.5 * kappa * h).sin_cos();
    let (s_end, c_end) = (s * hc - c * hs, c * hc + s * hs);

    let (sp, cp) = phi.sin_cos();
    let rz: Mat3 = [[cp, -sp, 0.0], [sp, cp, 0.0], [0.0, 0.0, 1.0]];
    let bend = Frame {
        r: [[c_end, 0.0, s_end], [0.0, 1.0, 0.0], [-s_end, 0.0, c_end]],
        p: [x, 0.0, z],
    };
    Frame { r: rz, p: [0.0; 3] }.compose(&bend)
}

pub fn integrate_chain(config: &GripperConfig, steps: usize) -> Frame {
    config.sections.iter().fold(Frame::identity(), |acc, a| {
        acc.compose(&integrate_arc(a.kappa, a.phi, a.length, steps))
    })
}

/// Random four-section configuration with |κl| ≤ max_bend.
pub fn random_config<R: Rng>(rng: &mut R, max_bend: f64) -> GripperConfig {
    let sections = std::array::from_fn::<_, SECTION_COUNT, _>(|_| {
        let length = rng.random_range(5.0..20.0);
        let bend = rng.random_range(-max_bend..=max_bend);
        let phi = rng.random_range(-PI..=PI);
        ArcParams::new(bend / length, phi, length).unwrap()
    });
    GripperConfig::new(sections).unwrap()
}

/// Max position and rotation-entry differences between a transform and an oracle frame.
pub fn frame_errors(t: &gripper_twin::kinematics::HomTransform, f: &Frame) -> (f64, f64) {
    let rows = t.rows();
    let mut pos: f64 = 0.0;
    let mut rot: f64 = 0.0;
    for i in 0..3 {
        pos = pos.max((rows[i][3] - f.p[i]).abs());
        for j in 0..3 {
            rot = rot.max((rows[i][j] - f.r[i][j]).abs());
        }
    }
    (pos, rot)
}

pub fn assets() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("assets")
}
