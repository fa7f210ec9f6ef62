//! The `twin` command line.
//!
//! Machine-readable output goes to stdout, diagnostics to stderr.
//!
//! | exit | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | runtime failure |
//! | 2 | bad input: usage, malformed file, missing fit, bad script |
//! | 3 | calibration data cannot be fitted |
//! | 4 | address already in use / cannot bind |

use std::fs::File;
use std::io::{self, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::calibration::{
    self, CalibrationError, CameraModel, CubicFit, DepthPixel, Line, MeasurementPlane,
    MeasurementSetup, PointPair, PressureSample,
};
use crate::controller::{self, Dynamics, IdleBehavior, SimConfig, SimError};
use crate::demo::{self, DemoError, DemoScript, DemoSettings};
use crate::kinematics::{FlangePose, SECTION_COUNT};
use crate::twin::engine::TwinEngine;
use crate::twin::{self, FlangeSource, Pipeline, ResolvedTwin, TwinConfig, TwinState};

pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_INPUT: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_BIND: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "twin", version, about = "Digital twin of a four-section soft pneumatic gripper")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Fit the cubic pressure→angle model to a calibration CSV.
    Fit(FitArgs),
    /// One-shot pressure → tip pose.
    Pose(PoseArgs),
    /// Run the simulated pressure controller as a Modbus/TCP server.
    ControllerSim(SimArgs),
    /// Run the live twin: poll the controller, serve HTTP + SSE.
    Serve(ServeArgs),
    /// Replay a command script against an in-process simulator and record states as CSV.
    Demo(DemoArgs),
    /// Relative tip position error against a reference point.
    Eval(EvalArgs),
    /// Turn picked pixel pairs into bending angles (calibration CSV rows).
    Measure(MeasureArgs),
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Calibration CSV: pressure_kpa,theta1_deg,theta2_deg,theta3_deg,theta4_deg
    #[arg(long)]
    pub csv: PathBuf,
    /// Write the fit JSON here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Where the pipeline comes from: a bare fit with default geometry, or a
/// full twin configuration.
#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Fit JSON; default arc lengths, zero phis, identity mount.
    #[arg(long, conflicts_with = "config")]
    pub fit: Option<PathBuf>,
    /// twin.json; its static flange pose is used unless overridden.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Flange translation in the robot base frame, mm: x,y,z
    #[arg(long, value_parser = crate::parse_triple, allow_hyphen_values = true)]
    pub flange_t: Option<[f64; 3]>,
    /// Flange orientation quaternion: w,x,y,z
    #[arg(long, value_parser = crate::parse_quad, allow_hyphen_values = true)]
    pub flange_q: Option<[f64; 4]>,
}

#[derive(Debug, Args)]
pub struct PoseArgs {
    /// Pressure, kPa.
    #[arg(long, allow_hyphen_values = true)]
    pub pressure: f64,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// Print the whole state as JSON instead of the matrix summary.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct SimArgs {
    #[arg(long, default_value = "0.0.0.0:1502")]
    pub bind: String,
    /// Time constant of the first-order pressure lag, s.
    #[arg(long, default_value_t = controller::DEFAULT_TAU_S)]
    pub tau: f64,
    #[arg(long, default_value_t = controller::DEFAULT_TICK_HZ)]
    pub tick_hz: f64,
    /// Hold pressure when no trigger is set, instead of venting to 0 kPa.
    #[arg(long)]
    pub hold_on_idle: bool,
}

impl SimArgs {
    fn sim_config(&self) -> Result<SimConfig, Failure> {
        Ok(SimConfig {
            bind: self.bind.clone(),
            tick_hz: self.tick_hz,
            dynamics: dynamics(self.tau, self.hold_on_idle)?,
        })
    }
}

fn dynamics(tau: f64, hold: bool) -> Result<Dynamics, Failure> {
    let idle = if hold { IdleBehavior::Hold } else { IdleBehavior::Vent };
    Dynamics::new(tau, idle).map_err(|e| Failure::input(e.to_string()))
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Override the HTTP listen address.
    #[arg(long)]
    pub http: Option<String>,
    /// Override the controller address.
    #[arg(long)]
    pub controller: Option<String>,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    /// Command script CSV: time_ms,type,value
    #[arg(long)]
    pub script: PathBuf,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// Virtual clock instead of real time; output is reproducible byte for byte.
    #[arg(long)]
    pub deterministic: bool,
    /// Output CSV; stdout if omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = controller::DEFAULT_TAU_S)]
    pub tau: f64,
    #[arg(long, default_value_t = controller::DEFAULT_TICK_HZ)]
    pub tick_hz: f64,
    #[arg(long, default_value_t = twin::DEFAULT_POLL_HZ)]
    pub poll_hz: f64,
    #[arg(long)]
    pub hold_on_idle: bool,
    /// Keep recording this long after the last command, ms.
    #[arg(long, default_value_t = 1000)]
    pub tail_ms: u64,
    /// Simulator address in wall-clock mode.
    #[arg(long, default_value = "127.0.0.1:1502")]
    pub bind: String,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Reference tip position in the robot base frame, mm: x,y,z
    #[arg(long, value_parser = crate::parse_triple, allow_hyphen_values = true)]
    pub reference: [f64; 3],
    /// TwinState JSON (as served by GET /state); `-` reads stdin.
    #[arg(long, default_value = "-", conflicts_with = "pressure")]
    pub state: String,
    /// Evaluate a one-shot pose at this pressure instead of a recorded state.
    #[arg(long, allow_hyphen_values = true)]
    pub pressure: Option<f64>,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PlaneArg {
    Xy,
    Xz,
    Yz,
}

#[derive(Debug, Args)]
pub struct MeasureArgs {
    /// Camera JSON: fx,fy,cx,cy,k1,k2,k3,p1,p2
    #[arg(long)]
    pub camera: PathBuf,
    /// Point CSV: pressure_kpa,section,u1,v1,z1,u2,v2,z2 (four sections per pressure)
    #[arg(long)]
    pub points: PathBuf,
    #[arg(long, value_enum, default_value = "xz")]
    pub plane: PlaneArg,
    /// Reference line direction in the measurement plane: dx,dy
    #[arg(long, default_value = "0,1", allow_hyphen_values = true)]
    pub reference: String,
    /// Use the observed pixels as is, without undistortion.
    #[arg(long)]
    pub skip_undistort: bool,
    /// Calibration CSV output; stdout if omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub const POINTS_CSV_HEADER: [&str; 8] =
    ["pressure_kpa", "section", "u1", "v1", "z1", "u2", "v2", "z2"];

/// An error with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
    fn input(message: impl Into<String>) -> Self {
        Self::new(EXIT_INPUT, message)
    }
    fn runtime(message: impl Into<String>) -> Self {
        Self::new(EXIT_RUNTIME, message)
    }
}

impl From<CalibrationError> for Failure {
    fn from(e: CalibrationError) -> Self {
        let code = match e {
            CalibrationError::InsufficientData { .. } | CalibrationError::Conditioning { .. } => {
                EXIT_DATA
            }
            _ => EXIT_INPUT,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<DemoError> for Failure {
    fn from(e: DemoError) -> Self {
        let code = match e {
            DemoError::Script { .. } => EXIT_INPUT,
            DemoError::Bind(_) => EXIT_BIND,
            DemoError::Runtime(_) | DemoError::Io(_) => EXIT_RUNTIME,
        };
        Failure::new(code, e.to_string())
    }
}

fn sim_failure(e: SimError) -> Failure {
    match e {
        e @ SimError::Bind { .. } => Failure::new(EXIT_BIND, e.to_string()),
        e => Failure::input(e.to_string()),
    }
}

/// Parses `std::env::args` and runs; the bin's whole `main`.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Cmd::Fit(a) => cmd_fit(&a),
        Cmd::Pose(a) => cmd_pose(&a),
        Cmd::ControllerSim(a) => runtime()?.block_on(cmd_controller_sim(a)),
        Cmd::Serve(a) => runtime()?.block_on(cmd_serve(a)),
        Cmd::Demo(a) => cmd_demo(&a),
        Cmd::Eval(a) => cmd_eval(&a),
        Cmd::Measure(a) => cmd_measure(&a),
    }
}

fn runtime() -> Result<tokio::runtime::Runtime, Failure> {
    tokio::runtime::Runtime::new().map_err(|e| Failure::runtime(e.to_string()))
}

fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Failure::input(format!("cannot open {}: {e}", path.display())))
}

fn write_output(path: Option<&Path>, bytes: &[u8]) -> Result<(), Failure> {
    match path {
        Some(p) => std::fs::write(p, bytes)
            .map_err(|e| Failure::runtime(format!("cannot write {}: {e}", p.display()))),
        None => io::stdout()
            .write_all(bytes)
            .map_err(|e| Failure::runtime(e.to_string())),
    }
}

fn cmd_fit(a: &FitArgs) -> Result<(), Failure> {
    let samples = calibration::read_samples_csv(open(&a.csv)?)
        .map_err(|e| Failure::from(e).prefixed(&a.csv))?;
    let fit = calibration::fit_cubic(&samples)?;
    let json = fit.to_json_pretty() + "\n";
    let report = residual_report(&fit, samples.len());
    match &a.out {
        Some(out) => {
            write_output(Some(out), json.as_bytes())?;
            print!("{report}");
        }
        None => {
            write_output(None, json.as_bytes())?;
            eprint!("{report}");
        }
    }
    Ok(())
}

fn residual_report(fit: &CubicFit, n: usize) -> String {
    let mut s = format!(
        "fitted {n} samples over [{}, {}] kPa\n",
        fit.valid_range[0], fit.valid_range[1]
    );
    for (i, r) in fit.residual_rms_deg.iter().enumerate() {
        s += &format!("section {}: rms residual {r:.3}°\n", i + 1);
    }
    s
}

impl Failure {
    fn prefixed(self, path: &Path) -> Self {
        Failure {
            message: format!("{}: {}", path.display(), self.message),
            ..self
        }
    }
}

/// Pipeline and flange pose from `--fit`/`--config` plus flange overrides.
fn load_pipeline(a: &PipelineArgs) -> Result<(Pipeline, FlangePose), Failure> {
    let (pipeline, mut flange) = match (&a.config, &a.fit) {
        (Some(cfg), _) => {
            let resolved = load_config(cfg)?;
            let flange = match &resolved.config.flange {
                FlangeSource::Static(p) => *p,
                FlangeSource::Trajectory(_) => resolved.flange.pose_at(0.0),
            };
            (resolved.pipeline, flange)
        }
        (None, Some(fit)) => {
            if !fit.exists() {
                return Err(Failure::input(format!("fit file {} not found", fit.display())));
            }
            let fit = CubicFit::load(fit).map_err(|e| Failure::input(format!("{}: {e}", fit.display())))?;
            let pipeline = Pipeline::from_fit(fit).map_err(|e| Failure::input(e.to_string()))?;
            (pipeline, FlangePose::identity())
        }
        (None, None) => return Err(Failure::input("a fit is required: pass --fit or --config")),
    };
    if a.flange_t.is_some() || a.flange_q.is_some() {
        flange = FlangePose::new(
            a.flange_t.unwrap_or(flange.translation),
            a.flange_q.unwrap_or(flange.orientation),
        )
        .map_err(|e| Failure::input(e.to_string()))?;
    }
    Ok((pipeline, flange))
}

fn load_config(path: &Path) -> Result<ResolvedTwin, Failure> {
    TwinConfig::load(path)
        .and_then(|c| c.resolve())
        .map_err(|e| Failure::input(e.to_string()))
}

fn one_shot(pressure: f64, a: &PipelineArgs) -> Result<TwinState, Failure> {
    let (pipeline, flange) = load_pipeline(a)?;
    let state = twin::pipeline_step(pressure, &flange, &pipeline);
    if let Some(e) = &state.error {
        return Err(Failure::input(e.clone()));
    }
    if state.extrapolated {
        let [lo, hi] = pipeline.fit.valid_range;
        eprintln!("EXTRAPOLATED: {pressure} kPa outside fit range [{lo}, {hi}], clamped");
    }
    Ok(state)
}

fn cmd_pose(a: &PoseArgs) -> Result<(), Failure> {
    let state = one_shot(a.pressure, &a.pipeline)?;
    let out = if a.json {
        serde_json::to_string_pretty(&state).expect("state serializes") + "\n"
    } else {
        let [x, y, z] = state.end_pose.position();
        let [qw, qx, qy, qz] = state.end_pose.quaternion();
        let t = &state.thetas;
        format!(
            "{}position_mm: {x:.6} {y:.6} {z:.6}\nquaternion_wxyz: {qw:.9} {qx:.9} {qy:.9} {qz:.9}\nthetas_deg: {:.6} {:.6} {:.6} {:.6}\n",
            state.end_pose, t[0], t[1], t[2], t[3]
        )
    };
    write_output(None, out.as_bytes())
}

async fn shutdown_signal() {
    if tokio::signal::ctrl_c().await.is_err() {
        std::future::pending::<()>().await;
    }
}

async fn cmd_controller_sim(a: SimArgs) -> Result<(), Failure> {
    let server = controller::serve(a.sim_config()?).await.map_err(sim_failure)?;
    println!("{}", server.local_addr());
    eprintln!(
        "controller simulator on {} (tau {} s, {} Hz), ctrl-c to stop",
        server.local_addr(),
        a.tau,
        a.tick_hz
    );
    shutdown_signal().await;
    server.shutdown().await;
    Ok(())
}

async fn cmd_serve(a: ServeArgs) -> Result<(), Failure> {
    let mut cfg = TwinConfig::load(&a.config).map_err(|e| Failure::input(e.to_string()))?;
    if let Some(http) = a.http {
        cfg.http = http;
    }
    if let Some(c) = a.controller {
        cfg.controller = c;
    }
    let resolved = cfg.resolve().map_err(|e| Failure::input(e.to_string()))?;
    let listener = tokio::net::TcpListener::bind(&cfg.http)
        .await
        .map_err(|e| Failure::new(EXIT_BIND, format!("cannot bind {}: {e}", cfg.http)))?;
    let addr = listener
        .local_addr()
        .map_err(|e| Failure::runtime(e.to_string()))?;
    println!("http://{addr}");
    eprintln!("twin polling {} at {} Hz", cfg.controller, cfg.poll_hz);
    let engine = TwinEngine::spawn(resolved);
    let served = twin::http::serve(listener, engine.shared(), shutdown_signal()).await;
    engine.shutdown().await;
    served.map_err(|e| Failure::runtime(e.to_string()))
}

fn cmd_demo(a: &DemoArgs) -> Result<(), Failure> {
    let script = DemoScript::from_csv(open(&a.script)?)
        .map_err(|e| Failure::from(e).prefixed(&a.script))?;
    let settings = DemoSettings {
        dynamics: dynamics(a.tau, a.hold_on_idle)?,
        tick_hz: a.tick_hz,
        poll_hz: a.poll_hz,
        tail_ms: a.tail_ms,
    };
    let resolved = match (&a.pipeline.config, &a.pipeline.fit) {
        (Some(cfg), _) => load_config(cfg)?,
        (None, Some(_)) => {
            let (pipeline, flange) = load_pipeline(&a.pipeline)?;
            let mut config = TwinConfig::with_fit(pipeline.fit.clone());
            config.flange = FlangeSource::Static(flange);
            config.resolve().map_err(|e| Failure::input(e.to_string()))?
        }
        (None, None) => return Err(Failure::input("a fit is required: pass --fit or --config")),
    };
    let mut flange = resolved.flange.clone();
    if a.pipeline.flange_t.is_some() || a.pipeline.flange_q.is_some() {
        flange = twin::FlangeTrack::fixed(load_pipeline(&a.pipeline)?.1);
    }
    let states = if a.deterministic {
        demo::run_deterministic(&script, &resolved.pipeline, &flange, &settings)?
    } else {
        let resolved = ResolvedTwin { flange, ..resolved };
        runtime()?.block_on(demo::run_wall_clock(&script, resolved, &settings, &a.bind))?
    };
    let mut buf = Vec::new();
    demo::write_states_csv(&mut buf, &states).map_err(|e| Failure::runtime(e.to_string()))?;
    write_output(a.out.as_deref(), &buf)?;
    eprintln!("recorded {} states", states.len());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<(), Failure> {
    let state = match a.pressure {
        Some(p) => one_shot(p, &a.pipeline)?,
        None => {
            let mut text = String::new();
            if a.state == "-" {
                io::stdin()
                    .read_to_string(&mut text)
                    .map_err(|e| Failure::input(e.to_string()))?;
            } else {
                open(Path::new(&a.state))?
                    .read_to_string(&mut text)
                    .map_err(|e| Failure::input(e.to_string()))?;
            }
            serde_json::from_str::<TwinState>(&text)
                .map_err(|e| Failure::input(format!("bad state JSON: {e}")))?
        }
    };
    let err = twin::evaluate_pose_error(&state, a.reference)
        .map_err(|e| Failure::input(e.to_string()))?;
    let json = serde_json::to_string_pretty(&err).expect("pose error serializes") + "\n";
    write_output(None, json.as_bytes())?;
    eprintln!("E = {:.3}%", err.relative_percent);
    Ok(())
}

fn cmd_measure(a: &MeasureArgs) -> Result<(), Failure> {
    let camera = CameraModel::load(&a.camera)
        .map_err(|e| Failure::input(format!("{}: {e}", a.camera.display())))?;
    let [dx, dy] = parse_pair(&a.reference)?;
    let setup = MeasurementSetup {
        camera,
        plane: match a.plane {
            PlaneArg::Xy => MeasurementPlane::Xy,
            PlaneArg::Xz => MeasurementPlane::Xz,
            PlaneArg::Yz => MeasurementPlane::Yz,
        },
        reference: Line {
            origin: [0.0, 0.0],
            direction: [dx, dy],
        },
        skip_undistort: a.skip_undistort,
    };
    let groups = read_points_csv(open(&a.points)?).map_err(|f| f.prefixed(&a.points))?;
    let mut samples = Vec::with_capacity(groups.len());
    for (pressure, pairs) in groups {
        let thetas = calibration::measure_thetas(&pairs, &setup)
            .map_err(|e| Failure::input(format!("pressure {pressure} kPa: {e}")))?;
        samples.push(PressureSample { pressure, thetas });
    }
    let mut buf = Vec::new();
    calibration::write_samples_csv(&mut buf, &samples)?;
    write_output(a.out.as_deref(), &buf)
}

fn parse_pair(s: &str) -> Result<[f64; 2], Failure> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| Failure::input(format!("expected dx,dy, got `{s}`")))?;
    match parts[..] {
        [x, y] => Ok([x, y]),
        _ => Err(Failure::input(format!("expected dx,dy, got `{s}`"))),
    }
}

/// Groups point rows by pressure, in order of first appearance. Every
/// pressure needs exactly one row per section.
pub fn read_points_csv<R: Read>(reader: R) -> Result<Vec<(f64, [PointPair; SECTION_COUNT])>, Failure> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| Failure::input(format!("line 1: {e}")))?;
    for (i, want) in POINTS_CSV_HEADER.iter().enumerate() {
        match headers.get(i) {
            Some(got) if got == *want => {}
            got => {
                return Err(Failure::input(format!(
                    "line 1: column {} should be `{want}`, found `{}`",
                    i + 1,
                    got.unwrap_or("")
                )))
            }
        }
    }
    let mut groups: Vec<(f64, [Option<PointPair>; SECTION_COUNT])> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Failure::input(e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let num = |i: usize| -> Result<f64, Failure> {
            match rec[i].parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Failure::input(format!(
                    "line {line}: `{}` in column `{}` is not a number",
                    &rec[i], POINTS_CSV_HEADER[i]
                ))),
            }
        };
        let pressure = num(0)?;
        let section: usize = match rec[1].parse() {
            Ok(s @ 1..=SECTION_COUNT) => s,
            _ => {
                return Err(Failure::input(format!(
                    "line {line}: section must be 1..{SECTION_COUNT}, got `{}`",
                    &rec[1]
                )))
            }
        };
        let pair = PointPair {
            first: DepthPixel { u: num(2)?, v: num(3)?, z: num(4)? },
            second: DepthPixel { u: num(5)?, v: num(6)?, z: num(7)? },
        };
        let idx = match groups.iter().position(|(p, _)| *p == pressure) {
            Some(i) => i,
            None => {
                groups.push((pressure, [None; SECTION_COUNT]));
                groups.len() - 1
            }
        };
        let slot = &mut groups[idx].1[section - 1];
        if slot.is_some() {
            return Err(Failure::input(format!(
                "line {line}: section {section} repeated for {pressure} kPa"
            )));
        }
        *slot = Some(pair);
    }
    groups
        .into_iter()
        .map(|(p, pairs)| {
            let missing: Vec<String> = pairs
                .iter()
                .enumerate()
                .filter(|(_, s)| s.is_none())
                .map(|(i, _)| (i + 1).to_string())
                .collect();
            if missing.is_empty() {
                Ok((p, pairs.map(|s| s.expect("checked"))))
            } else {
                Err(Failure::input(format!(
                    "{p} kPa is missing section(s) {}",
                    missing.join(", ")
                )))
            }
        })
        .collect()
}
