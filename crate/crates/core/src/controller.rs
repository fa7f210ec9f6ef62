//! Simulated pneumatic pressure controller served over Modbus TCP.
//!
//! Register map (holding registers, unit id ignored):
//!
//! | addr   | item            | encoding               | access |
//! |--------|-----------------|------------------------|--------|
//! | 0x0000 | positive trigger| 0/1                    | R/W    |
//! | 0x0001 | negative trigger| 0/1                    | R/W    |
//! | 0x0002 | positive target | 0.1 kPa, signed        | R/W    |
//! | 0x0003 | negative target | 0.1 kPa, signed        | R/W    |
//! | 0x0004 | true pressure   | 0.1 kPa, signed        | R      |
//! | 0x0005 | fault flags     | bit0 = both triggers   | R      |
//!
//! The map is a stand-in; the real device's addresses are not public.

use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::watch;
use tokio::task::JoinHandle;

use crate::modbus::{
    pressure_to_register, register_to_pressure, Direction, ExceptionCode, Frame, FrameReader,
    ModbusError, Pdu,
};

pub mod registers {
    pub const POS_TRIGGER: u16 = 0x0000;
    pub const NEG_TRIGGER: u16 = 0x0001;
    pub const POS_TARGET: u16 = 0x0002;
    pub const NEG_TARGET: u16 = 0x0003;
    pub const TRUE_PRESSURE: u16 = 0x0004;
    pub const FAULT_FLAGS: u16 = 0x0005;
    /// Number of mapped registers.
    pub const COUNT: u16 = 6;

    pub fn name(address: u16) -> &'static str {
        match address {
            POS_TRIGGER => "pos_trigger",
            NEG_TRIGGER => "neg_trigger",
            POS_TARGET => "pos_target",
            NEG_TARGET => "neg_target",
            TRUE_PRESSURE => "true_pressure",
            FAULT_FLAGS => "fault_flags",
            _ => "unmapped",
        }
    }
}

/// Fault bit: both triggers set at once.
pub const FAULT_CONFLICTING_TRIGGERS: u16 = 0x0001;

pub const POS_TARGET_RANGE: [f64; 2] = [0.0, 200.0];
pub const NEG_TARGET_RANGE: [f64; 2] = [-100.0, 0.0];
pub const PRESSURE_ENVELOPE: [f64; 2] = [-100.0, 200.0];

pub const DEFAULT_TAU_S: f64 = 0.15;
pub const DEFAULT_TICK_HZ: f64 = 100.0;

/// What the valve does when neither trigger is set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdleBehavior {
    /// Pressure decays to atmospheric (0 kPa).
    #[default]
    Vent,
    /// Pressure holds where it is.
    Hold,
}

/// First-order lag parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dynamics {
    /// Time constant, seconds.
    pub tau: f64,
    pub idle: IdleBehavior,
}

impl Dynamics {
    pub fn new(tau: f64, idle: IdleBehavior) -> Result<Self, SimError> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(SimError::Config(format!("tau must be positive, got {tau}")));
        }
        Ok(Self { tau, idle })
    }
}

impl Default for Dynamics {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU_S,
            idle: IdleBehavior::Vent,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerState {
    pub pos_trigger: bool,
    pub neg_trigger: bool,
    /// kPa, in [0, 200].
    pub pos_target: f64,
    /// kPa, in [-100, 0].
    pub neg_target: f64,
    /// kPa, in [-100, 200].
    pub true_pressure: f64,
    pub fault_flags: u16,
    /// Target the pressure is currently tracking.
    pub active_target: f64,
}

impl Default for ControllerState {
    fn default() -> Self {
        Self {
            pos_trigger: false,
            neg_trigger: false,
            pos_target: 0.0,
            neg_target: 0.0,
            true_pressure: 0.0,
            fault_flags: 0,
            active_target: 0.0,
        }
    }
}

impl ControllerState {
    fn refresh_faults(&mut self) {
        if self.pos_trigger && self.neg_trigger {
            self.fault_flags |= FAULT_CONFLICTING_TRIGGERS;
        } else {
            self.fault_flags &= !FAULT_CONFLICTING_TRIGGERS;
        }
    }

    /// Advances the pressure by `dt` seconds.
    ///
    /// Positive trigger alone tracks the positive target, negative alone the
    /// negative target, neither vents to 0 (or holds). Both set keeps the
    /// previous target and raises the conflict fault.
    pub fn tick(&self, dt: f64, dynamics: &Dynamics) -> ControllerState {
        let mut next = *self;
        next.refresh_faults();
        next.active_target = match (self.pos_trigger, self.neg_trigger) {
            (true, false) => self.pos_target,
            (false, true) => self.neg_target,
            (false, false) => match dynamics.idle {
                IdleBehavior::Vent => 0.0,
                IdleBehavior::Hold => self.true_pressure,
            },
            (true, true) => self.active_target,
        };
        if !(dt > 0.0) || !dt.is_finite() {
            return next;
        }
        let target = next.active_target;
        let decay = (-dt / dynamics.tau).exp();
        next.true_pressure = (target + (self.true_pressure - target) * decay)
            .clamp(PRESSURE_ENVELOPE[0], PRESSURE_ENVELOPE[1]);
        next
    }

    pub fn register(&self, address: u16) -> Option<u16> {
        use registers::*;
        Some(match address {
            POS_TRIGGER => self.pos_trigger as u16,
            NEG_TRIGGER => self.neg_trigger as u16,
            POS_TARGET => encode_pressure(self.pos_target),
            NEG_TARGET => encode_pressure(self.neg_target),
            TRUE_PRESSURE => encode_pressure(self.true_pressure),
            FAULT_FLAGS => self.fault_flags,
            _ => return None,
        })
    }

    /// All six registers in address order.
    pub fn registers(&self) -> [u16; registers::COUNT as usize] {
        std::array::from_fn(|i| self.register(i as u16).expect("mapped"))
    }

    /// Services one request PDU, returning the response PDU. Failures are
    /// Modbus exceptions; multi-register writes apply all or nothing.
    pub fn handle_request(&mut self, pdu: &Pdu) -> Pdu {
        let function = pdu.function_code();
        let result = match pdu {
            Pdu::ReadHoldingRegisters { address, count } => {
                self.read_window(*address, *count).map(|values| {
                    Pdu::ReadHoldingRegistersResponse { values }
                })
            }
            Pdu::WriteSingleRegister { address, value } => self
                .write_window(*address, std::slice::from_ref(value))
                .map(|_| pdu.clone()),
            Pdu::WriteMultipleRegisters { address, values } => {
                self.write_window(*address, values).map(|_| {
                    Pdu::WriteMultipleRegistersResponse {
                        address: *address,
                        count: values.len() as u16,
                    }
                })
            }
            _ => Err(ExceptionCode::IllegalFunction),
        };
        result.unwrap_or_else(|code| Pdu::Exception {
            function: function & 0x7F,
            code,
        })
    }

    fn read_window(&self, address: u16, count: u16) -> Result<Vec<u16>, ExceptionCode> {
        let end = address as u32 + count as u32;
        if count == 0 || end > registers::COUNT as u32 {
            return Err(ExceptionCode::IllegalDataAddress);
        }
        Ok((address..address + count)
            .map(|a| self.register(a).expect("in map"))
            .collect())
    }

    fn write_window(&mut self, address: u16, values: &[u16]) -> Result<(), ExceptionCode> {
        let end = address as u32 + values.len() as u32;
        if values.is_empty() || end > registers::COUNT as u32 {
            return Err(ExceptionCode::IllegalDataAddress);
        }
        if end > registers::TRUE_PRESSURE as u32 {
            return Err(ExceptionCode::IllegalDataAddress);
        }
        let mut next = *self;
        for (offset, &raw) in values.iter().enumerate() {
            next.apply_write(address + offset as u16, raw)?;
        }
        next.refresh_faults();
        *self = next;
        Ok(())
    }

    fn apply_write(&mut self, address: u16, raw: u16) -> Result<(), ExceptionCode> {
        use registers::*;
        match address {
            POS_TRIGGER | NEG_TRIGGER => {
                let on = match raw {
                    0 => false,
                    1 => true,
                    _ => return Err(ExceptionCode::IllegalDataValue),
                };
                if address == POS_TRIGGER {
                    self.pos_trigger = on;
                } else {
                    self.neg_trigger = on;
                }
            }
            POS_TARGET => self.pos_target = decode_in_range(raw, POS_TARGET_RANGE)?,
            NEG_TARGET => self.neg_target = decode_in_range(raw, NEG_TARGET_RANGE)?,
            _ => return Err(ExceptionCode::IllegalDataAddress),
        }
        Ok(())
    }
}

fn encode_pressure(kpa: f64) -> u16 {
    // Every stored pressure lies inside the envelope, well within the codec range.
    pressure_to_register(kpa).expect("pressure within register range")
}

fn decode_in_range(raw: u16, range: [f64; 2]) -> Result<f64, ExceptionCode> {
    let kpa = register_to_pressure(raw);
    if kpa < range[0] || kpa > range[1] {
        return Err(ExceptionCode::IllegalDataValue);
    }
    Ok(kpa)
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulator configuration: {0}")]
    Config(String),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub bind: String,
    pub tick_hz: f64,
    pub dynamics: Dynamics,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            bind: format!("0.0.0.0:{}", crate::modbus::DEFAULT_PORT),
            tick_hz: DEFAULT_TICK_HZ,
            dynamics: Dynamics::default(),
        }
    }
}

/// Running simulator: accept loop, dynamics ticker and client connections.
pub struct SimServer {
    local_addr: SocketAddr,
    state: Arc<Mutex<ControllerState>>,
    shutdown: watch::Sender<bool>,
    tasks: Vec<JoinHandle<()>>,
}

impl SimServer {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn snapshot(&self) -> ControllerState {
        *self.state.lock().expect("controller state poisoned")
    }

    /// Shared state handle, for in-process inspection.
    pub fn state(&self) -> Arc<Mutex<ControllerState>> {
        Arc::clone(&self.state)
    }

    /// Stops accepting, lets connections finish their in-flight response and
    /// waits for all tasks.
    pub async fn shutdown(self) {
        let _ = self.shutdown.send(true);
        for task in self.tasks {
            let _ = task.await;
        }
    }
}

/// Binds and starts the simulator on the current tokio runtime.
pub async fn serve(config: SimConfig) -> Result<SimServer, SimError> {
    if !(config.tick_hz > 0.0) || !config.tick_hz.is_finite() {
        return Err(SimError::Config(format!(
            "tick rate must be positive, got {}",
            config.tick_hz
        )));
    }
    Dynamics::new(config.dynamics.tau, config.dynamics.idle)?;
    let listener = TcpListener::bind(&config.bind)
        .await
        .map_err(|source| SimError::Bind {
            addr: config.bind.clone(),
            source,
        })?;
    let local_addr = listener.local_addr().map_err(|source| SimError::Bind {
        addr: config.bind.clone(),
        source,
    })?;
    let state = Arc::new(Mutex::new(ControllerState::default()));
    let (shutdown, shutdown_rx) = watch::channel(false);

    let ticker = tokio::spawn(run_ticker(
        Arc::clone(&state),
        config.tick_hz,
        config.dynamics,
        shutdown_rx.clone(),
    ));
    let acceptor = tokio::spawn(run_acceptor(listener, Arc::clone(&state), shutdown_rx));
    tracing::info!(%local_addr, tau = config.dynamics.tau, tick_hz = config.tick_hz, "controller simulator listening");

    Ok(SimServer {
        local_addr,
        state,
        shutdown,
        tasks: vec![ticker, acceptor],
    })
}

async fn run_ticker(
    state: Arc<Mutex<ControllerState>>,
    tick_hz: f64,
    dynamics: Dynamics,
    mut shutdown: watch::Receiver<bool>,
) {
    let mut interval = tokio::time::interval(Duration::from_secs_f64(1.0 / tick_hz));
    interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    let mut last = Instant::now();
    loop {
        tokio::select! {
            _ = interval.tick() => {
                let now = Instant::now();
                let dt = now.duration_since(last).as_secs_f64();
                last = now;
                let mut s = state.lock().expect("controller state poisoned");
                *s = s.tick(dt, &dynamics);
            }
            _ = shutdown.changed() => break,
        }
    }
}

async fn run_acceptor(
    listener: TcpListener,
    state: Arc<Mutex<ControllerState>>,
    mut shutdown: watch::Receiver<bool>,
) {
    let mut connections = Vec::new();
    loop {
        tokio::select! {
            accepted = listener.accept() => match accepted {
                Ok((stream, peer)) => {
                    tracing::debug!(%peer, "client connected");
                    connections.push(tokio::spawn(serve_connection(
                        stream,
                        Arc::clone(&state),
                        shutdown.clone(),
                    )));
                    connections.retain(|c: &JoinHandle<()>| !c.is_finished());
                }
                Err(e) => tracing::warn!("accept failed: {e}"),
            },
            _ = shutdown.changed() => break,
        }
    }
    drop(listener);
    for c in connections {
        let _ = c.await;
    }
}

async fn serve_connection(
    mut stream: TcpStream,
    state: Arc<Mutex<ControllerState>>,
    mut shutdown: watch::Receiver<bool>,
) {
    let _ = stream.set_nodelay(true);
    let mut reader = FrameReader::new(Direction::Request);
    let mut chunk = [0u8; 1024];
    loop {
        let n = tokio::select! {
            read = stream.read(&mut chunk) => match read {
                Ok(0) | Err(_) => break,
                Ok(n) => n,
            },
            _ = shutdown.changed() => break,
        };
        reader.push(&chunk[..n]);
        let mut out = Vec::new();
        let mut fatal = false;
        while let Some(next) = reader.next_frame() {
            match respond(next, &state) {
                Ok(Some(bytes)) => out.extend_from_slice(&bytes),
                Ok(None) => {}
                Err(e) => {
                    tracing::warn!("dropping connection: {e}");
                    fatal = true;
                    break;
                }
            }
        }
        if !out.is_empty() && stream.write_all(&out).await.is_err() {
            break;
        }
        if fatal {
            break;
        }
    }
}

/// Response bytes for one decoded request, `None` for frames that cannot be
/// answered, `Err` when the stream cannot be resynchronized.
fn respond(
    decoded: Result<Frame, ModbusError>,
    state: &Mutex<ControllerState>,
) -> Result<Option<Vec<u8>>, ModbusError> {
    let (header, pdu) = match decoded {
        Ok(frame) => {
            let pdu = state
                .lock()
                .expect("controller state poisoned")
                .handle_request(&frame.pdu);
            (frame.header, pdu)
        }
        Err(e) => match e.exception_reply() {
            Some((header, function, code)) => (
                header,
                Pdu::Exception {
                    function: function & 0x7F,
                    code,
                },
            ),
            None if e.frame_len().is_some() => return Ok(None),
            None => return Err(e),
        },
    };
    let frame = Frame::new(header.transaction_id, header.unit_id, pdu)?;
    Ok(Some(frame.encode()?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use registers::*;

    fn dyn_(tau: f64) -> Dynamics {
        Dynamics::new(tau, IdleBehavior::Vent).unwrap()
    }

    fn write(state: &mut ControllerState, address: u16, value: u16) -> Pdu {
        state.handle_request(&Pdu::WriteSingleRegister { address, value })
    }

    #[test]
    fn one_time_constant_step() {
        let s = ControllerState {
            pos_trigger: true,
            pos_target: 100.0,
            ..Default::default()
        };
        let next = s.tick(0.15, &dyn_(0.15));
        let expected = 100.0 * (1.0 - (-1.0f64).exp());
        assert!((next.true_pressure - expected).abs() < 1e-12);
        assert!((next.true_pressure - 63.212).abs() < 1e-3);
    }

    #[test]
    fn fixed_point_is_stable() {
        let s = ControllerState {
            pos_trigger: true,
            pos_target: 42.0,
            true_pressure: 42.0,
            active_target: 42.0,
            ..Default::default()
        };
        for dt in [1e-3, 0.1, 10.0] {
            assert_eq!(s.tick(dt, &dyn_(0.15)).true_pressure, 42.0);
        }
    }

    #[test]
    fn conflicting_triggers_keep_previous_target() {
        let mut s = ControllerState {
            pos_trigger: true,
            pos_target: 100.0,
            neg_target: -50.0,
            ..Default::default()
        };
        s = s.tick(0.05, &dyn_(0.15));
        let before = s.true_pressure;
        s.neg_trigger = true;
        s = s.tick(0.05, &dyn_(0.15));
        assert_eq!(s.fault_flags & FAULT_CONFLICTING_TRIGGERS, 1);
        assert_eq!(s.active_target, 100.0);
        assert!(s.true_pressure > before);
        s.pos_trigger = false;
        s = s.tick(0.05, &dyn_(0.15));
        assert_eq!(s.fault_flags, 0);
        assert_eq!(s.active_target, -50.0);
    }

    #[test]
    fn idle_vent_and_hold() {
        let s = ControllerState {
            true_pressure: 80.0,
            ..Default::default()
        };
        assert!(s.tick(0.1, &dyn_(0.15)).true_pressure < 80.0);
        let hold = Dynamics::new(0.15, IdleBehavior::Hold).unwrap();
        assert_eq!(s.tick(0.1, &hold).true_pressure, 80.0);
    }

    #[test]
    fn envelope_clamp() {
        let s = ControllerState {
            true_pressure: 250.0,
            active_target: 250.0,
            ..Default::default()
        };
        let hold = Dynamics::new(0.15, IdleBehavior::Hold).unwrap();
        assert_eq!(s.tick(0.01, &hold).true_pressure, 200.0);
    }

    #[test]
    fn write_then_read_target() {
        let mut s = ControllerState::default();
        assert_eq!(
            write(&mut s, POS_TARGET, 1000),
            Pdu::WriteSingleRegister { address: POS_TARGET, value: 1000 }
        );
        assert_eq!(
            s.handle_request(&Pdu::ReadHoldingRegisters { address: POS_TARGET, count: 1 }),
            Pdu::ReadHoldingRegistersResponse { values: vec![1000] }
        );
        assert_eq!(s.pos_target, 100.0);
    }

    #[test]
    fn read_only_and_range_exceptions() {
        let mut s = ControllerState::default();
        assert_eq!(
            write(&mut s, TRUE_PRESSURE, 10),
            Pdu::Exception { function: 0x06, code: ExceptionCode::IllegalDataAddress }
        );
        assert_eq!(
            write(&mut s, FAULT_FLAGS, 0),
            Pdu::Exception { function: 0x06, code: ExceptionCode::IllegalDataAddress }
        );
        assert_eq!(
            write(&mut s, POS_TRIGGER, 2),
            Pdu::Exception { function: 0x06, code: ExceptionCode::IllegalDataValue }
        );
        // -5 kPa positive target, +5 kPa negative target, 200.1 kPa.
        for (addr, raw) in [(POS_TARGET, (-50i16) as u16), (NEG_TARGET, 50), (POS_TARGET, 2001)] {
            assert_eq!(
                write(&mut s, addr, raw),
                Pdu::Exception { function: 0x06, code: ExceptionCode::IllegalDataValue }
            );
        }
        assert_eq!(
            write(&mut s, 0x0010, 0),
            Pdu::Exception { function: 0x06, code: ExceptionCode::IllegalDataAddress }
        );
        assert_eq!(
            s.handle_request(&Pdu::ReadHoldingRegisters { address: 4, count: 3 }),
            Pdu::Exception { function: 0x03, code: ExceptionCode::IllegalDataAddress }
        );
        assert_eq!(s, ControllerState::default());
    }

    #[test]
    fn multi_write_is_all_or_nothing() {
        let mut s = ControllerState::default();
        let bad = Pdu::WriteMultipleRegisters {
            address: POS_TRIGGER,
            values: vec![1, 0, 500, 5],
        };
        assert!(matches!(s.handle_request(&bad), Pdu::Exception { .. }));
        assert_eq!(s, ControllerState::default());

        let good = Pdu::WriteMultipleRegisters {
            address: POS_TRIGGER,
            values: vec![1, 0, 500, (-300i16) as u16],
        };
        assert_eq!(
            s.handle_request(&good),
            Pdu::WriteMultipleRegistersResponse { address: 0, count: 4 }
        );
        assert!(s.pos_trigger && !s.neg_trigger);
        assert_eq!((s.pos_target, s.neg_target), (50.0, -30.0));

        let spans_read_only = Pdu::WriteMultipleRegisters {
            address: NEG_TARGET,
            values: vec![0, 0],
        };
        assert_eq!(
            s.handle_request(&spans_read_only),
            Pdu::Exception { function: 0x10, code: ExceptionCode::IllegalDataAddress }
        );
    }

    #[test]
    fn register_snapshot_matches_state() {
        let s = ControllerState {
            pos_trigger: true,
            neg_trigger: true,
            pos_target: 120.0,
            neg_target: -90.0,
            true_pressure: 33.36,
            fault_flags: 1,
            active_target: 0.0,
        };
        assert_eq!(s.registers(), [1, 1, 1200, 0xFC7C, 334, 1]);
    }

    #[test]
    fn response_pdu_as_request_is_illegal_function() {
        let mut s = ControllerState::default();
        assert_eq!(
            s.handle_request(&Pdu::ReadHoldingRegistersResponse { values: vec![1] }),
            Pdu::Exception { function: 0x03, code: ExceptionCode::IllegalFunction }
        );
    }

    #[test]
    fn tau_must_be_positive() {
        assert!(Dynamics::new(0.0, IdleBehavior::Vent).is_err());
        assert!(Dynamics::new(f64::NAN, IdleBehavior::Vent).is_err());
    }
}
