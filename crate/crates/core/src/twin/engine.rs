//! Live twin: polls the controller, runs the pipeline, publishes snapshots.
//!
//! One writer task owns publication through a `watch` channel, so readers
//! always see the latest complete [`TwinState`] without blocking it.
//! Commands share the Modbus connection with the poller and serialize on it.

use std::sync::Arc;
use std::time::{Duration, Instant};

use thiserror::Error;
use tokio::sync::{watch, Mutex};
use tokio::task::JoinHandle;

use super::{
    pipeline_step, Command, CommandAck, CommandError, ExceptionInfo, FlangeTrack, Pipeline,
    ResolvedTwin, TwinConfig, TwinState,
};
use crate::controller::registers;
use crate::modbus::client::{ClientError, ModbusClient};
use crate::modbus::register_to_pressure;

/// Upper bound on the reconnect backoff.
pub const MAX_BACKOFF: Duration = Duration::from_secs(2);

#[derive(Debug, Error)]
pub enum CommandFailure {
    #[error("rejected: {0}")]
    Invalid(#[from] CommandError),
    #[error("controller unavailable: {0}")]
    Unavailable(String),
}

struct Link {
    addr: String,
    unit_id: u8,
    timeout: Duration,
    client: Option<ModbusClient>,
}

impl Link {
    async fn client(&mut self) -> Result<&mut ModbusClient, ClientError> {
        if self.client.is_none() {
            let c = ModbusClient::connect(self.addr.as_str(), self.unit_id, self.timeout).await?;
            tracing::info!(addr = %self.addr, "controller link up");
            self.client = Some(c);
        }
        Ok(self.client.as_mut().expect("just connected"))
    }

    /// Reads true pressure and fault flags.
    async fn poll(&mut self) -> Result<(f64, u16), ClientError> {
        let result = async {
            let client = self.client().await?;
            client.read_holding(registers::TRUE_PRESSURE, 2).await
        }
        .await;
        match result {
            Ok(regs) => Ok((register_to_pressure(regs[0]), regs[1])),
            Err(e) => {
                if e.is_link_error() {
                    self.client = None;
                }
                Err(e)
            }
        }
    }
}

/// Cloneable view of a running twin, shared with the HTTP layer.
#[derive(Clone)]
pub struct TwinShared {
    state: watch::Receiver<TwinState>,
    link: Arc<Mutex<Link>>,
    config: Arc<TwinConfig>,
    pipeline: Arc<Pipeline>,
}

impl TwinShared {
    pub fn latest(&self) -> TwinState {
        self.state.borrow().clone()
    }

    /// A receiver that observes every publish from now on.
    pub fn subscribe(&self) -> watch::Receiver<TwinState> {
        self.state.clone()
    }

    pub fn config(&self) -> &TwinConfig {
        &self.config
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.pipeline
    }

    /// Forwards an operator command as a single-register write.
    pub async fn command(&self, cmd: Command) -> Result<CommandAck, CommandFailure> {
        let (register, raw_value) = cmd.register_write()?;
        let mut link = self.link.lock().await;
        let Some(client) = link.client.as_mut() else {
            return Err(CommandFailure::Unavailable("link down".into()));
        };
        match client.write_single(register, raw_value).await {
            Ok(()) => Ok(CommandAck {
                ok: true,
                command: cmd,
                register,
                raw_value,
                exception: None,
            }),
            Err(ClientError::Exception { code, .. }) => Ok(CommandAck {
                ok: false,
                command: cmd,
                register,
                raw_value,
                exception: Some(ExceptionInfo {
                    code: code.code(),
                    name: code.name().to_string(),
                    register: registers::name(register).to_string(),
                }),
            }),
            Err(e) => {
                link.client = None;
                Err(CommandFailure::Unavailable(e.to_string()))
            }
        }
    }
}

/// Handle to the polling task.
pub struct TwinEngine {
    shared: TwinShared,
    shutdown: watch::Sender<bool>,
    task: JoinHandle<()>,
}

impl TwinEngine {
    /// Starts polling on the current tokio runtime.
    pub fn spawn(resolved: ResolvedTwin) -> Self {
        let ResolvedTwin {
            config,
            pipeline,
            flange,
        } = resolved;
        let period = Duration::from_secs_f64(1.0 / config.poll_hz);
        let link = Arc::new(Mutex::new(Link {
            addr: config.controller.clone(),
            unit_id: config.unit_id,
            timeout: period.max(Duration::from_millis(10)),
            client: None,
        }));
        let (tx, rx) = watch::channel(TwinState::initial(flange.pose_at(0.0)));
        let (shutdown, shutdown_rx) = watch::channel(false);
        let pipeline = Arc::new(pipeline);
        let task = tokio::spawn(run_loop(
            Arc::clone(&link),
            Arc::clone(&pipeline),
            flange,
            period,
            tx,
            shutdown_rx,
        ));
        Self {
            shared: TwinShared {
                state: rx,
                link,
                config: Arc::new(config),
                pipeline,
            },
            shutdown,
            task,
        }
    }

    pub fn shared(&self) -> TwinShared {
        self.shared.clone()
    }

    pub async fn shutdown(self) {
        let _ = self.shutdown.send(true);
        let _ = self.task.await;
    }
}

async fn run_loop(
    link: Arc<Mutex<Link>>,
    pipeline: Arc<Pipeline>,
    flange: FlangeTrack,
    period: Duration,
    tx: watch::Sender<TwinState>,
    mut shutdown: watch::Receiver<bool>,
) {
    let start = Instant::now();
    let mut interval = tokio::time::interval(period);
    interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
    let mut last_ts = 0u64;
    let mut backoff: Option<Duration> = None;
    let mut retry_at = start;

    loop {
        tokio::select! {
            _ = interval.tick() => {}
            _ = shutdown.changed() => break,
        }
        let now = Instant::now();
        if now < retry_at {
            continue;
        }
        let mut timestamp = now.duration_since(start).as_millis() as u64;
        if timestamp <= last_ts {
            timestamp = last_ts + 1;
        }

        let polled = link.lock().await.poll().await;
        let state = match polled {
            Ok((pressure, faults)) => {
                if backoff.take().is_some() {
                    tracing::info!("controller link restored");
                }
                let flange_pose = flange.pose_at(timestamp as f64);
                let mut s = pipeline_step(pressure, &flange_pose, &pipeline);
                s.controller_faults = faults;
                s
            }
            Err(e) => {
                let mut s = tx.borrow().clone();
                if e.is_link_error() {
                    s.link_ok = false;
                    let next = backoff.map_or(period, |b| (b * 2).min(MAX_BACKOFF));
                    if backoff.is_none() {
                        tracing::warn!("controller link lost: {e}");
                    }
                    backoff = Some(next);
                    retry_at = Instant::now() + next;
                } else {
                    s.error = Some(e.to_string());
                }
                s
            }
        };
        last_ts = timestamp;
        tx.send_replace(TwinState { timestamp, ..state });
    }
}
