//! The digital twin: pressure → bending angles → gripper pose.
//!
//! [`pipeline_step`] is the pure mapping. [`engine`] runs it against a live
//! controller and publishes [`TwinState`] snapshots; [`http`] serves them.

pub mod engine;
pub mod http;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::calibration::{predict_thetas, CalibrationError, CubicFit};
use crate::controller::{registers, NEG_TARGET_RANGE, POS_TARGET_RANGE};
use crate::kinematics::{
    end_effector, thetas_to_config, FlangePose, GripperMount, HomTransform, KinematicsError,
    DEFAULT_ARC_LENGTHS, SECTION_COUNT,
};
use crate::modbus::pressure_to_register;

pub const DEFAULT_POLL_HZ: f64 = 50.0;
pub const POLL_HZ_RANGE: [f64; 2] = [1.0, 500.0];

#[derive(Debug, Error)]
pub enum TwinError {
    #[error("invalid twin configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("trajectory {path} line {line}: {message}")]
    Trajectory {
        path: PathBuf,
        line: u64,
        message: String,
    },
}

/// How measured angles relate to the sections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AngleInterpretation {
    /// Each angle is measured from the reference line; section bending is the
    /// difference to the previous cut line.
    #[default]
    Cumulative,
    /// Each angle already is the section's own bending.
    Incremental,
}

impl AngleInterpretation {
    /// Per-section bending angles from measured angles (same unit).
    pub fn section_bends(&self, thetas: &[f64; SECTION_COUNT]) -> [f64; SECTION_COUNT] {
        match self {
            AngleInterpretation::Incremental => *thetas,
            AngleInterpretation::Cumulative => {
                let mut out = *thetas;
                for i in 1..SECTION_COUNT {
                    out[i] = thetas[i] - thetas[i - 1];
                }
                out
            }
        }
    }
}

/// Fit given inline or as a path to a fit JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FitSource {
    Inline(CubicFit),
    Path(PathBuf),
}

/// Robot flange pose provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlangeSource {
    Static(FlangePose),
    /// CSV `t_ms,tx,ty,tz,qw,qx,qy,qz`.
    Trajectory(PathBuf),
}

impl Default for FlangeSource {
    fn default() -> Self {
        FlangeSource::Static(FlangePose::identity())
    }
}

/// `twin.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwinConfig {
    /// Controller address, `host:port`.
    #[serde(default = "default_controller")]
    pub controller: String,
    #[serde(default = "default_unit_id")]
    pub unit_id: u8,
    #[serde(default = "default_poll_hz")]
    pub poll_hz: f64,
    pub fit: FitSource,
    #[serde(default = "default_lengths")]
    pub arc_lengths: [f64; SECTION_COUNT],
    /// Bending-plane rotations, rad.
    #[serde(default)]
    pub phis: [f64; SECTION_COUNT],
    #[serde(default)]
    pub mount: GripperMount,
    #[serde(default)]
    pub flange: FlangeSource,
    #[serde(default)]
    pub angles: AngleInterpretation,
    /// +1 bends toward the section frame's +x, -1 toward -x.
    #[serde(default = "default_bend_sign", deserialize_with = "unit_sign")]
    pub bend_sign: f64,
    /// HTTP listen address for `serve`.
    #[serde(default = "default_http")]
    pub http: String,
}

fn default_controller() -> String {
    format!("127.0.0.1:{}", crate::modbus::DEFAULT_PORT)
}
fn default_unit_id() -> u8 {
    1
}
fn default_poll_hz() -> f64 {
    DEFAULT_POLL_HZ
}
fn default_lengths() -> [f64; SECTION_COUNT] {
    DEFAULT_ARC_LENGTHS
}
fn default_bend_sign() -> f64 {
    1.0
}
fn default_http() -> String {
    "127.0.0.1:8080".into()
}

fn unit_sign<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    let v = f64::deserialize(d)?;
    if v == 1.0 || v == -1.0 {
        Ok(v)
    } else {
        Err(serde::de::Error::custom(format!("bend_sign must be 1 or -1, got {v}")))
    }
}

impl TwinConfig {
    /// Minimal configuration around a fit, everything else default.
    pub fn with_fit(fit: CubicFit) -> Self {
        Self {
            controller: default_controller(),
            unit_id: default_unit_id(),
            poll_hz: DEFAULT_POLL_HZ,
            fit: FitSource::Inline(fit),
            arc_lengths: DEFAULT_ARC_LENGTHS,
            phis: [0.0; SECTION_COUNT],
            mount: GripperMount::default(),
            flange: FlangeSource::default(),
            angles: AngleInterpretation::default(),
            bend_sign: 1.0,
            http: default_http(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TwinError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| TwinError::Io {
            path: path.into(),
            source,
        })?;
        let mut cfg: TwinConfig = serde_json::from_str(&text).map_err(|source| TwinError::Json {
            path: path.into(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase_paths(base);
        Ok(cfg)
    }

    /// Makes relative file references relative to `base`.
    pub fn rebase_paths(&mut self, base: &Path) {
        if let FitSource::Path(p) = &mut self.fit {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let FlangeSource::Trajectory(p) = &mut self.flange {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    /// Loads referenced files and validates everything.
    pub fn resolve(&self) -> Result<ResolvedTwin, TwinError> {
        if !(self.poll_hz >= POLL_HZ_RANGE[0] && self.poll_hz <= POLL_HZ_RANGE[1]) {
            return Err(TwinError::Config(format!(
                "poll_hz {} outside [{}, {}]",
                self.poll_hz, POLL_HZ_RANGE[0], POLL_HZ_RANGE[1]
            )));
        }
        let fit = match &self.fit {
            FitSource::Inline(fit) => {
                fit.validate()?;
                fit.clone()
            }
            FitSource::Path(p) => CubicFit::load(p)?,
        };
        let pipeline = Pipeline::new(
            fit,
            self.arc_lengths,
            self.phis,
            self.mount,
            self.angles,
            self.bend_sign,
        )?;
        let flange = match &self.flange {
            FlangeSource::Static(pose) => {
                pose.validate()?;
                FlangeTrack::fixed(*pose)
            }
            FlangeSource::Trajectory(path) => FlangeTrack::load(path)?,
        };
        let mut config = self.clone();
        config.fit = FitSource::Inline(pipeline.fit.clone());
        Ok(ResolvedTwin {
            config,
            pipeline,
            flange,
        })
    }
}

/// A validated configuration with files loaded.
#[derive(Debug, Clone)]
pub struct ResolvedTwin {
    /// The configuration with the fit inlined.
    pub config: TwinConfig,
    pub pipeline: Pipeline,
    pub flange: FlangeTrack,
}

/// Everything `pipeline_step` needs besides the pressure and flange pose.
#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    pub fit: CubicFit,
    pub arc_lengths: [f64; SECTION_COUNT],
    pub phis: [f64; SECTION_COUNT],
    pub mount: GripperMount,
    pub angles: AngleInterpretation,
    pub bend_sign: f64,
}

impl Pipeline {
    pub fn new(
        fit: CubicFit,
        arc_lengths: [f64; SECTION_COUNT],
        phis: [f64; SECTION_COUNT],
        mount: GripperMount,
        angles: AngleInterpretation,
        bend_sign: f64,
    ) -> Result<Self, TwinError> {
        fit.validate()?;
        if arc_lengths.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
            return Err(TwinError::Config(format!(
                "arc lengths must be positive, got {arc_lengths:?}"
            )));
        }
        if phis.iter().any(|p| !p.is_finite()) {
            return Err(TwinError::Config("phis must be finite".into()));
        }
        if bend_sign != 1.0 && bend_sign != -1.0 {
            return Err(TwinError::Config(format!("bend_sign must be ±1, got {bend_sign}")));
        }
        mount.mount_transform.check_rigid(1e-9)?;
        Ok(Self {
            fit,
            arc_lengths,
            phis,
            mount,
            angles,
            bend_sign,
        })
    }

    /// Default geometry around a fit.
    pub fn from_fit(fit: CubicFit) -> Result<Self, TwinError> {
        Self::new(
            fit,
            DEFAULT_ARC_LENGTHS,
            [0.0; SECTION_COUNT],
            GripperMount::default(),
            AngleInterpretation::Cumulative,
            1.0,
        )
    }

    /// End pose for measured angles (degrees) at the given flange pose.
    pub fn end_pose_for(
        &self,
        thetas_deg: &[f64; SECTION_COUNT],
        flange: &FlangePose,
    ) -> Result<(HomTransform, [f64; SECTION_COUNT]), KinematicsError> {
        let bends = self
            .angles
            .section_bends(thetas_deg)
            .map(|d| self.bend_sign * d.to_radians());
        let config = thetas_to_config(&bends, &self.phis, &self.arc_lengths)?;
        let pose = end_effector(flange, &config, &self.mount)?;
        Ok((pose, config.kappas()))
    }
}

/// Flange pose over time: one fixed pose or a sample-and-hold trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct FlangeTrack {
    /// (t_ms, pose), sorted by time, never empty.
    samples: Vec<(f64, FlangePose)>,
}

impl FlangeTrack {
    pub fn fixed(pose: FlangePose) -> Self {
        Self {
            samples: vec![(0.0, pose)],
        }
    }

    pub fn from_samples(mut samples: Vec<(f64, FlangePose)>) -> Result<Self, TwinError> {
        if samples.is_empty() {
            return Err(TwinError::Config("flange trajectory is empty".into()));
        }
        for (_, pose) in &samples {
            pose.validate()?;
        }
        samples.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(Self { samples })
    }

    pub fn load(path: &Path) -> Result<Self, TwinError> {
        let file = std::fs::File::open(path).map_err(|source| TwinError::Io {
            path: path.into(),
            source,
        })?;
        let traj_err = |line: u64, message: String| TwinError::Trajectory {
            path: path.into(),
            line,
            message,
        };
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(file);
        let expected = ["t_ms", "tx", "ty", "tz", "qw", "qx", "qy", "qz"];
        let headers = rdr.headers().map_err(|e| traj_err(1, e.to_string()))?;
        if headers.iter().ne(expected.iter().copied()) {
            return Err(traj_err(1, format!("header must be {}", expected.join(","))));
        }
        let mut samples = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| traj_err(0, e.to_string()))?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            let v: Vec<f64> = rec
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| traj_err(line, e.to_string()))?;
            if v.len() != 8 {
                return Err(traj_err(line, format!("expected 8 fields, got {}", v.len())));
            }
            let pose = FlangePose::new([v[1], v[2], v[3]], [v[4], v[5], v[6], v[7]])
                .map_err(|e| traj_err(line, e.to_string()))?;
            samples.push((v[0], pose));
        }
        Self::from_samples(samples)
    }

    /// Latest sample at or before `t_ms`, the first sample before that.
    pub fn pose_at(&self, t_ms: f64) -> FlangePose {
        let idx = self.samples.partition_point(|(t, _)| *t <= t_ms);
        self.samples[idx.saturating_sub(1)].1
    }
}

/// One published twin snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinState {
    /// Monotonic milliseconds since the twin started.
    pub timestamp: u64,
    /// Controller true pressure, kPa.
    pub pressure: f64,
    /// Predicted measured angles, degrees.
    pub thetas: [f64; SECTION_COUNT],
    /// Section curvatures, 1/mm.
    pub kappas: [f64; SECTION_COUNT],
    /// Gripper tip relative to the robot base.
    pub end_pose: HomTransform,
    pub flange_pose: FlangePose,
    /// Pressure was outside the fit range and was clamped.
    pub extrapolated: bool,
    pub controller_faults: u16,
    pub link_ok: bool,
    /// Pipeline failure for this sample, if any.
    pub error: Option<String>,
}

impl TwinState {
    /// Placeholder before the first successful poll.
    pub fn initial(flange_pose: FlangePose) -> Self {
        Self {
            timestamp: 0,
            pressure: 0.0,
            thetas: [0.0; SECTION_COUNT],
            kappas: [0.0; SECTION_COUNT],
            end_pose: HomTransform::identity(),
            flange_pose,
            extrapolated: false,
            controller_faults: 0,
            link_ok: false,
            error: None,
        }
    }

    pub fn position(&self) -> [f64; 3] {
        self.end_pose.position()
    }
}

/// Pressure → angles → curvatures → tip pose. Failures are reported in the
/// state's `error` field, never as a panic or early return.
pub fn pipeline_step(pressure: f64, flange: &FlangePose, pipeline: &Pipeline) -> TwinState {
    let mut state = TwinState::initial(*flange);
    state.pressure = pressure;
    state.link_ok = true;
    if !pressure.is_finite() {
        state.error = Some(format!("non-finite pressure {pressure}"));
        return state;
    }
    let prediction = predict_thetas(&pipeline.fit, pressure);
    state.thetas = prediction.thetas;
    state.extrapolated = prediction.extrapolated;
    match pipeline.end_pose_for(&prediction.thetas, flange) {
        Ok((pose, kappas)) => {
            state.end_pose = pose;
            state.kappas = kappas;
        }
        Err(e) => state.error = Some(e.to_string()),
    }
    state
}

/// Relative task-space position error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    /// Reference tip position, mm.
    pub reference: [f64; 3],
    /// Twin tip position, mm.
    pub computed: [f64; 3],
    /// ‖computed − reference‖, mm.
    pub absolute_mm: f64,
    /// ‖computed − reference‖ / ‖reference‖, percent.
    pub relative_percent: f64,
}

pub fn evaluate_pose_error(state: &TwinState, reference: [f64; 3]) -> Result<PoseError, TwinError> {
    pose_error(state.position(), reference)
}

pub fn pose_error(computed: [f64; 3], reference: [f64; 3]) -> Result<PoseError, TwinError> {
    let norm = |v: [f64; 3]| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    let ref_norm = norm(reference);
    if !(ref_norm > 0.0) || !ref_norm.is_finite() {
        return Err(TwinError::Config(format!(
            "reference position {reference:?} must be finite and non-zero"
        )));
    }
    let diff = [
        computed[0] - reference[0],
        computed[1] - reference[1],
        computed[2] - reference[2],
    ];
    let absolute_mm = norm(diff);
    Ok(PoseError {
        reference,
        computed,
        absolute_mm,
        relative_percent: 100.0 * absolute_mm / ref_norm,
    })
}

/// Operator command forwarded to the controller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum Command {
    /// kPa, [0, 200].
    SetPosTarget(f64),
    /// kPa, [-100, 0].
    SetNegTarget(f64),
    SetPosTrigger(#[serde(deserialize_with = "bool_or_bit")] bool),
    SetNegTrigger(#[serde(deserialize_with = "bool_or_bit")] bool),
}

fn bool_or_bit<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Bool(bool),
        Num(f64),
    }
    match Raw::deserialize(d)? {
        Raw::Bool(b) => Ok(b),
        Raw::Num(n) if n == 0.0 => Ok(false),
        Raw::Num(n) if n == 1.0 => Ok(true),
        Raw::Num(n) => Err(serde::de::Error::custom(format!("trigger value must be 0 or 1, got {n}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CommandError {
    #[error("{0}")]
    OutOfRange(String),
    #[error("unknown command type `{0}`")]
    UnknownType(String),
    #[error("invalid value `{0}`")]
    BadValue(String),
}

impl Command {
    /// Parses the `type` / `value` pair used by demo scripts.
    pub fn parse(kind: &str, value: &str) -> Result<Self, CommandError> {
        let num = || {
            value
                .trim()
                .parse::<f64>()
                .map_err(|_| CommandError::BadValue(value.to_string()))
        };
        let flag = || match value.trim() {
            "1" | "true" | "on" => Ok(true),
            "0" | "false" | "off" => Ok(false),
            other => Err(CommandError::BadValue(other.to_string())),
        };
        Ok(match kind.trim() {
            "set_pos_target" => Command::SetPosTarget(num()?),
            "set_neg_target" => Command::SetNegTarget(num()?),
            "set_pos_trigger" => Command::SetPosTrigger(flag()?),
            "set_neg_trigger" => Command::SetNegTrigger(flag()?),
            other => return Err(CommandError::UnknownType(other.to_string())),
        })
    }

    /// Register write for this command, validated against the register map.
    pub fn register_write(&self) -> Result<(u16, u16), CommandError> {
        let target = |kpa: f64, range: [f64; 2], name: &str| {
            if !kpa.is_finite() || kpa < range[0] || kpa > range[1] {
                return Err(CommandError::OutOfRange(format!(
                    "{name} {kpa} kPa outside [{}, {}]",
                    range[0], range[1]
                )));
            }
            pressure_to_register(kpa).map_err(|e| CommandError::OutOfRange(e.to_string()))
        };
        Ok(match *self {
            Command::SetPosTarget(kpa) => (
                registers::POS_TARGET,
                target(kpa, POS_TARGET_RANGE, "pos_target")?,
            ),
            Command::SetNegTarget(kpa) => (
                registers::NEG_TARGET,
                target(kpa, NEG_TARGET_RANGE, "neg_target")?,
            ),
            Command::SetPosTrigger(on) => (registers::POS_TRIGGER, on as u16),
            Command::SetNegTrigger(on) => (registers::NEG_TRIGGER, on as u16),
        })
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            Command::SetPosTarget(_) => "set_pos_target",
            Command::SetNegTarget(_) => "set_neg_target",
            Command::SetPosTrigger(_) => "set_pos_trigger",
            Command::SetNegTrigger(_) => "set_neg_trigger",
        }
    }

    pub fn value_string(&self) -> String {
        match self {
            Command::SetPosTarget(v) | Command::SetNegTarget(v) => v.to_string(),
            Command::SetPosTrigger(b) | Command::SetNegTrigger(b) => (*b as u8).to_string(),
        }
    }
}

/// Controller exception as reported to operators.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExceptionInfo {
    pub code: u8,
    pub name: String,
    pub register: String,
}

/// Outcome of a forwarded command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandAck {
    pub ok: bool,
    pub command: Command,
    pub register: u16,
    pub raw_value: u16,
    pub exception: Option<ExceptionInfo>,
}
