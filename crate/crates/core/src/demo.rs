//! Scripted end-to-end replay: controller simulator + twin in one process.
//!
//! The deterministic mode drives both sides from a virtual clock. Every
//! command and poll still goes through encoded Modbus frames, just over an
//! in-memory loopback instead of TCP.

use std::io::{Read, Write};
use std::time::Duration;

use thiserror::Error;

use crate::controller::{
    self, registers, ControllerState, Dynamics, SimConfig, SimError,
};
use crate::modbus::{
    decode_frame, register_to_pressure, Decoded, Direction, Frame, ModbusError, Pdu,
};
use crate::twin::engine::TwinEngine;
use crate::twin::{
    pipeline_step, Command, CommandError, FlangeTrack, Pipeline, ResolvedTwin, TwinState,
};

pub const DEMO_SCRIPT_HEADER: [&str; 3] = ["time_ms", "type", "value"];

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("script line {line}: {message}")]
    Script { line: u64, message: String },
    #[error(transparent)]
    Bind(SimError),
    #[error("{0}")]
    Runtime(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScriptStep {
    pub time_ms: u64,
    pub command: Command,
}

/// Commands to replay, with non-decreasing times.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DemoScript {
    pub steps: Vec<ScriptStep>,
}

impl DemoScript {
    pub fn new(steps: Vec<ScriptStep>) -> Result<Self, DemoError> {
        for (i, pair) in steps.windows(2).enumerate() {
            if pair[1].time_ms < pair[0].time_ms {
                return Err(DemoError::Script {
                    line: i as u64 + 3,
                    message: format!(
                        "time {} ms is before the previous step at {} ms",
                        pair[1].time_ms, pair[0].time_ms
                    ),
                });
            }
        }
        Ok(Self { steps })
    }

    /// Parses `time_ms,type,value` CSV.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self, DemoError> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let script_err = |line: u64, message: String| DemoError::Script { line, message };
        let headers = rdr.headers().map_err(|e| script_err(1, e.to_string()))?;
        if headers.iter().ne(DEMO_SCRIPT_HEADER) {
            return Err(script_err(
                1,
                format!("header must be {}", DEMO_SCRIPT_HEADER.join(",")),
            ));
        }
        let mut steps = Vec::new();
        let mut prev = 0u64;
        for rec in rdr.records() {
            let rec = rec.map_err(|e| {
                script_err(e.position().map_or(0, |p| p.line()), e.to_string())
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            let time_ms: u64 = rec[0]
                .parse()
                .map_err(|_| script_err(line, format!("bad time `{}`", &rec[0])))?;
            if time_ms < prev {
                return Err(script_err(
                    line,
                    format!("time {time_ms} ms is before the previous step at {prev} ms"),
                ));
            }
            prev = time_ms;
            let command = Command::parse(&rec[1], &rec[2])
                .map_err(|e: CommandError| script_err(line, e.to_string()))?;
            steps.push(ScriptStep { time_ms, command });
        }
        Ok(Self { steps })
    }

    pub fn end_ms(&self) -> Option<u64> {
        self.steps.last().map(|s| s.time_ms)
    }
}

#[derive(Debug, Clone)]
pub struct DemoSettings {
    pub dynamics: Dynamics,
    pub tick_hz: f64,
    pub poll_hz: f64,
    /// Recording continues this long after the last command.
    pub tail_ms: u64,
}

impl Default for DemoSettings {
    fn default() -> Self {
        Self {
            dynamics: Dynamics::default(),
            tick_hz: controller::DEFAULT_TICK_HZ,
            poll_hz: crate::twin::DEFAULT_POLL_HZ,
            tail_ms: 1000,
        }
    }
}

/// In-memory Modbus link to a simulated controller.
pub struct Loopback {
    pub controller: ControllerState,
    next_transaction: u16,
}

impl Loopback {
    pub fn new(controller: ControllerState) -> Self {
        Self {
            controller,
            next_transaction: 1,
        }
    }

    /// Encodes `pdu`, lets the controller answer, decodes the reply.
    pub fn call(&mut self, pdu: Pdu) -> Result<Pdu, ModbusError> {
        let txn = self.next_transaction;
        self.next_transaction = self.next_transaction.wrapping_add(1);
        let request = Frame::new(txn, 1, pdu)?.encode()?;
        let Decoded::Complete { frame, .. } = decode_frame(&request, Direction::Request)? else {
            unreachable!("complete frame");
        };
        let reply = self.controller.handle_request(&frame.pdu);
        let response = Frame::new(frame.header.transaction_id, frame.header.unit_id, reply)?
            .encode()?;
        match decode_frame(&response, Direction::Response)? {
            Decoded::Complete { frame, .. } => Ok(frame.pdu),
            Decoded::NeedMore(_) => unreachable!("complete frame"),
        }
    }
}

/// Runs the script against the simulator on a virtual clock.
///
/// Within one microsecond instant the order is: commands, dynamics tick,
/// twin poll. Timestamps are virtual milliseconds.
pub fn run_deterministic(
    script: &DemoScript,
    pipeline: &Pipeline,
    flange: &FlangeTrack,
    settings: &DemoSettings,
) -> Result<Vec<TwinState>, DemoError> {
    let Some(last_ms) = script.end_ms() else {
        return Ok(Vec::new());
    };
    if !(settings.tick_hz > 0.0) || !(settings.poll_hz > 0.0) {
        return Err(DemoError::Runtime("tick and poll rates must be positive".into()));
    }
    let end_us = (last_ms + settings.tail_ms) * 1000;
    let tick_us = ((1e6 / settings.tick_hz).round() as u64).max(1);
    let poll_us = ((1e6 / settings.poll_hz).round() as u64).max(1);
    let dt = tick_us as f64 * 1e-6;

    let mut link = Loopback::new(ControllerState::default());
    let mut states = Vec::new();
    let mut next_step = 0usize;
    let mut next_tick = tick_us;
    let mut next_poll = 0u64;

    loop {
        let next_cmd = script
            .steps
            .get(next_step)
            .map_or(u64::MAX, |s| s.time_ms * 1000);
        let now = next_cmd.min(next_tick).min(next_poll);
        if now > end_us {
            break;
        }
        while let Some(step) = script.steps.get(next_step) {
            if step.time_ms * 1000 != now {
                break;
            }
            send_command(&mut link, &step.command)?;
            next_step += 1;
        }
        if next_tick == now {
            link.controller = link.controller.tick(dt, &settings.dynamics);
            next_tick += tick_us;
        }
        if next_poll == now {
            let regs = match link.call(Pdu::ReadHoldingRegisters {
                address: registers::TRUE_PRESSURE,
                count: 2,
            }) {
                Ok(Pdu::ReadHoldingRegistersResponse { values }) => values,
                other => return Err(DemoError::Runtime(format!("poll failed: {other:?}"))),
            };
            let t_ms = now / 1000;
            let mut state =
                pipeline_step(register_to_pressure(regs[0]), &flange.pose_at(t_ms as f64), pipeline);
            state.controller_faults = regs[1];
            state.timestamp = t_ms;
            states.push(state);
            next_poll += poll_us;
        }
    }
    Ok(states)
}

fn send_command(link: &mut Loopback, cmd: &Command) -> Result<(), DemoError> {
    let (address, value) = cmd
        .register_write()
        .map_err(|e| DemoError::Runtime(format!("{}: {e}", cmd.type_name())))?;
    match link.call(Pdu::WriteSingleRegister { address, value }) {
        Ok(Pdu::WriteSingleRegister { .. }) => Ok(()),
        Ok(Pdu::Exception { code, .. }) => {
            tracing::warn!(command = cmd.type_name(), %code, "controller rejected command");
            Ok(())
        }
        other => Err(DemoError::Runtime(format!("command failed: {other:?}"))),
    }
}

/// Runs the script in real time against a TCP simulator bound to `bind`.
pub async fn run_wall_clock(
    script: &DemoScript,
    resolved: ResolvedTwin,
    settings: &DemoSettings,
    bind: &str,
) -> Result<Vec<TwinState>, DemoError> {
    let Some(last_ms) = script.end_ms() else {
        return Ok(Vec::new());
    };
    let sim = controller::serve(SimConfig {
        bind: bind.to_string(),
        tick_hz: settings.tick_hz,
        dynamics: settings.dynamics,
    })
    .await
    .map_err(|e| match e {
        e @ SimError::Bind { .. } => DemoError::Bind(e),
        e => DemoError::Runtime(e.to_string()),
    })?;

    let mut resolved = resolved;
    resolved.config.controller = sim.local_addr().to_string();
    resolved.config.poll_hz = settings.poll_hz;
    let engine = TwinEngine::spawn(resolved);
    let twin = engine.shared();
    let mut rx = twin.subscribe();

    let collector = tokio::spawn(async move {
        let mut states = Vec::new();
        while rx.changed().await.is_ok() {
            let s = rx.borrow_and_update().clone();
            if s.link_ok {
                states.push(s);
            }
        }
        states
    });

    // Wait for the link before replaying.
    let mut probe = twin.subscribe();
    // The guard returned by `wait_for` blocks the publisher; drop it at once.
    let linked = tokio::time::timeout(Duration::from_secs(5), probe.wait_for(|s| s.link_ok))
        .await
        .is_ok_and(|r| r.is_ok());
    if !linked {
        return Err(DemoError::Runtime("twin never connected to the simulator".into()));
    }
    let origin = tokio::time::Instant::now();
    for step in &script.steps {
        tokio::time::sleep_until(origin + Duration::from_millis(step.time_ms)).await;
        match twin.command(step.command).await {
            Ok(ack) if !ack.ok => {
                tracing::warn!(?ack, "controller rejected command");
            }
            Ok(_) => {}
            Err(e) => return Err(DemoError::Runtime(e.to_string())),
        }
    }
    tokio::time::sleep_until(origin + Duration::from_millis(last_ms + settings.tail_ms)).await;

    engine.shutdown().await;
    sim.shutdown().await;
    collector
        .await
        .map_err(|e| DemoError::Runtime(e.to_string()))
}

/// Column names of the recorded-state CSV.
pub fn state_csv_header() -> Vec<String> {
    let mut cols: Vec<String> = vec!["timestamp_ms".into(), "pressure_kpa".into()];
    cols.extend((1..=4).map(|i| format!("theta{i}_deg")));
    cols.extend((1..=4).map(|i| format!("kappa{i}_per_mm")));
    cols.extend(
        ["extrapolated", "controller_faults", "link_ok"]
            .iter()
            .map(|s| s.to_string()),
    );
    cols.extend(
        ["flange_tx", "flange_ty", "flange_tz", "flange_qw", "flange_qx", "flange_qy", "flange_qz"]
            .iter()
            .map(|s| s.to_string()),
    );
    for r in 0..3 {
        for c in 0..4 {
            cols.push(format!("t{r}{c}"));
        }
    }
    cols
}

/// Writes states as CSV. Floats use shortest round-trip formatting, so
/// reading the file back yields bit-identical values.
pub fn write_states_csv<W: Write>(writer: W, states: &[TwinState]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(state_csv_header())?;
    for s in states {
        let mut row: Vec<String> = vec![s.timestamp.to_string(), s.pressure.to_string()];
        row.extend(s.thetas.iter().map(|v| v.to_string()));
        row.extend(s.kappas.iter().map(|v| v.to_string()));
        row.push((s.extrapolated as u8).to_string());
        row.push(s.controller_faults.to_string());
        row.push((s.link_ok as u8).to_string());
        row.extend(s.flange_pose.translation.iter().map(|v| v.to_string()));
        row.extend(s.flange_pose.orientation.iter().map(|v| v.to_string()));
        let rows = s.end_pose.rows();
        for r in rows.iter().take(3) {
            row.extend(r.iter().map(|v| v.to_string()));
        }
        w.write_record(&row)?;
    }
    w.flush()
}

/// One parsed row of the recorded-state CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct StateRow {
    pub timestamp_ms: u64,
    pub pressure: f64,
    pub thetas: [f64; 4],
    pub kappas: [f64; 4],
    pub extrapolated: bool,
    pub controller_faults: u16,
    pub link_ok: bool,
    pub flange_translation: [f64; 3],
    pub flange_orientation: [f64; 4],
    /// First three rows of the end pose.
    pub end_pose: [[f64; 4]; 3],
}

pub fn read_states_csv<R: Read>(reader: R) -> Result<Vec<StateRow>, DemoError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let err = |line: u64, message: String| DemoError::Script { line, message };
    let header = state_csv_header();
    if rdr
        .headers()
        .map_err(|e| err(1, e.to_string()))?
        .iter()
        .ne(header.iter().map(String::as_str))
    {
        return Err(err(1, "unexpected state CSV header".into()));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| err(0, e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let f = |i: usize| -> Result<f64, DemoError> {
            rec[i]
                .parse()
                .map_err(|_| err(line, format!("bad number `{}`", &rec[i])))
        };
        let mut end_pose = [[0.0; 4]; 3];
        for (r, row) in end_pose.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = f(20 + r * 4 + c)?;
            }
        }
        rows.push(StateRow {
            timestamp_ms: rec[0].parse().map_err(|_| err(line, "bad timestamp".into()))?,
            pressure: f(1)?,
            thetas: [f(2)?, f(3)?, f(4)?, f(5)?],
            kappas: [f(6)?, f(7)?, f(8)?, f(9)?],
            extrapolated: &rec[10] == "1",
            controller_faults: rec[11].parse().map_err(|_| err(line, "bad faults".into()))?,
            link_ok: &rec[12] == "1",
            flange_translation: [f(13)?, f(14)?, f(15)?],
            flange_orientation: [f(16)?, f(17)?, f(18)?, f(19)?],
            end_pose,
        });
    }
    Ok(rows)
}
