//! Starts the simulated pressure controller on a free port, steps it to
//! 80 kPa over TCP and watches the true pressure settle.
//!
//! cargo run --example controller_sim

use std::time::Duration;

use gripper_twin::controller::{self, registers, Dynamics, IdleBehavior, SimConfig};
use gripper_twin::modbus::client::ModbusClient;
use gripper_twin::modbus::{pressure_to_register, register_to_pressure};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sim = controller::serve(SimConfig {
        bind: "127.0.0.1:0".into(),
        tick_hz: 100.0,
        dynamics: Dynamics::new(0.15, IdleBehavior::Vent)?,
    })
    .await?;
    println!("controller on {}", sim.local_addr());

    let mut client = ModbusClient::connect(sim.local_addr(), 1, Duration::from_secs(1)).await?;
    client.write_single(registers::POS_TARGET, pressure_to_register(80.0)?).await?;
    client.write_single(registers::POS_TRIGGER, 1).await?;

    for _ in 0..10 {
        tokio::time::sleep(Duration::from_millis(100)).await;
        let regs = client.read_holding(0, registers::COUNT).await?;
        println!(
            "true pressure {:6.1} kPa, faults 0x{:04X}",
            register_to_pressure(regs[registers::TRUE_PRESSURE as usize]),
            regs[registers::FAULT_FLAGS as usize]
        );
    }

    // Writing a read-only register comes back as a Modbus exception.
    if let Err(e) = client.write_single(registers::TRUE_PRESSURE, 0).await {
        println!("rejected: {e}");
    }
    sim.shutdown().await;
    Ok(())
}
