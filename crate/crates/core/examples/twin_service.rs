//! Full live setup: controller simulator, twin engine and HTTP API, all in
//! one process. Sends a command through the engine and reads the state
//! back over HTTP.
//!
//! cargo run --example twin_service

use std::io::{Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::time::Duration;

use gripper_twin::calibration::CubicFit;
use gripper_twin::controller::{self, SimConfig};
use gripper_twin::twin::{engine::TwinEngine, http, Command, TwinConfig};

fn http_get(addr: std::net::SocketAddr, path: &str) -> std::io::Result<String> {
    let mut s = TcpStream::connect(addr)?;
    write!(s, "GET {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n")?;
    let mut out = String::new();
    s.read_to_string(&mut out)?;
    Ok(out.split("\r\n\r\n").nth(1).unwrap_or_default().to_string())
}

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sim = controller::serve(SimConfig { bind: "127.0.0.1:0".into(), ..SimConfig::default() }).await?;

    let fit = CubicFit::load(Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/sample_fit.json"))?;
    let mut config = TwinConfig::with_fit(fit);
    config.controller = sim.local_addr().to_string();
    let engine = TwinEngine::spawn(config.resolve()?);
    let twin = engine.shared();

    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
    let api = listener.local_addr()?;
    let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(http::serve(listener, twin.clone(), async {
        let _ = stopped.await;
    }));
    println!("API on http://{api}");

    tokio::time::sleep(Duration::from_millis(300)).await;
    println!("ack: {:?}", twin.command(Command::SetPosTarget(100.0)).await?);
    println!("ack: {:?}", twin.command(Command::SetPosTrigger(true)).await?);
    tokio::time::sleep(Duration::from_secs(1)).await;

    let health = tokio::task::spawn_blocking(move || http_get(api, "/health")).await??;
    println!("/health {health}");
    let state = tokio::task::spawn_blocking(move || http_get(api, "/state")).await??;
    let state: serde_json::Value = serde_json::from_str(&state)?;
    println!("pressure {} kPa, thetas {}", state["pressure"], state["thetas"]);

    let _ = stop.send(());
    server.await??;
    engine.shutdown().await;
    sim.shutdown().await;
    Ok(())
}
