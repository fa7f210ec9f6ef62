use std::time::Duration;

use gripper_twin::controller::{self, registers, Dynamics, IdleBehavior, SimConfig, SimError};
use gripper_twin::modbus::client::{ClientError, ModbusClient};
use gripper_twin::modbus::{pressure_to_register, ExceptionCode};

const TIMEOUT: Duration = Duration::from_secs(2);

async fn start(tau: f64) -> controller::SimServer {
    controller::serve(SimConfig {
        bind: "127.0.0.1:0".into(),
        tick_hz: 100.0,
        dynamics: Dynamics::new(tau, IdleBehavior::Vent).unwrap(),
    })
    .await
    .unwrap()
}

#[tokio::test]
async fn fresh_controller_reads_all_zero() {
    let sim = start(0.15).await;
    let mut c = ModbusClient::connect(sim.local_addr(), 1, TIMEOUT).await.unwrap();
    assert_eq!(c.read_holding(0, registers::COUNT).await.unwrap(), vec![0; 6]);
    sim.shutdown().await;
}

#[tokio::test]
async fn pressure_approaches_target_monotonically() {
    let tau = 0.05;
    let sim = start(tau).await;
    let mut c = ModbusClient::connect(sim.local_addr(), 1, TIMEOUT).await.unwrap();
    c.write_single(registers::POS_TARGET, pressure_to_register(50.0).unwrap()).await.unwrap();
    c.write_single(registers::POS_TRIGGER, 1).await.unwrap();

    let start = tokio::time::Instant::now();
    let mut last = 0i32;
    let mut settled_at = None;
    while start.elapsed() < Duration::from_secs(1) {
        let raw = c.read_holding(registers::TRUE_PRESSURE, 1).await.unwrap()[0] as i16 as i32;
        assert!(raw >= last - 1, "pressure fell from {last} to {raw}");
        assert!(raw <= 501, "overshoot {raw}");
        last = last.max(raw);
        if settled_at.is_none() && (500 - raw).abs() < 1 {
            settled_at = Some(start.elapsed());
        }
        tokio::time::sleep(Duration::from_millis(2)).await;
    }
    // An exact first-order lag needs ln(500)·τ ≈ 6.2τ to come within one
    // LSB of a 50 kPa step; allow scheduling slack on top.
    let settled = settled_at.expect("never settled");
    assert!(settled.as_secs_f64() < 10.0 * tau, "settled after {settled:?}");
    sim.shutdown().await;
}

#[tokio::test]
async fn read_only_and_invalid_writes_are_exceptions() {
    let sim = start(0.15).await;
    let mut c = ModbusClient::connect(sim.local_addr(), 1, TIMEOUT).await.unwrap();
    match c.write_single(registers::TRUE_PRESSURE, 1).await {
        Err(ClientError::Exception { code, .. }) => assert_eq!(code, ExceptionCode::IllegalDataAddress),
        other => panic!("{other:?}"),
    }
    match c.write_single(registers::POS_TRIGGER, 2).await {
        Err(ClientError::Exception { code, .. }) => assert_eq!(code, ExceptionCode::IllegalDataValue),
        other => panic!("{other:?}"),
    }
    // The connection survives exceptions.
    c.write_single(registers::POS_TARGET, 1000).await.unwrap();
    assert_eq!(c.read_holding(registers::POS_TARGET, 1).await.unwrap(), vec![1000]);
    sim.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn multi_register_writes_are_never_torn() {
    let sim = start(0.15).await;
    let addr = sim.local_addr();
    let writer = tokio::spawn(async move {
        let mut c = ModbusClient::connect(addr, 1, TIMEOUT).await.unwrap();
        for v in 0..400u16 {
            let v = v * 2;
            c.write_multiple(registers::POS_TARGET, &[v, (-(v as i16)) as u16]).await.unwrap();
        }
    });
    let reader = tokio::spawn(async move {
        let mut c = ModbusClient::connect(addr, 1, TIMEOUT).await.unwrap();
        let mut reads = 0;
        for _ in 0..400 {
            let r = c.read_holding(registers::POS_TARGET, 2).await.unwrap();
            assert_eq!(r[0] as i16, -(r[1] as i16), "torn write {r:?}");
            reads += 1;
        }
        reads
    });
    writer.await.unwrap();
    assert_eq!(reader.await.unwrap(), 400);
    sim.shutdown().await;
}

#[tokio::test]
async fn conflicting_triggers_raise_fault() {
    let sim = start(0.05).await;
    let mut c = ModbusClient::connect(sim.local_addr(), 1, TIMEOUT).await.unwrap();
    c.write_multiple(registers::POS_TRIGGER, &[1, 1]).await.unwrap();
    tokio::time::sleep(Duration::from_millis(50)).await;
    assert_eq!(c.read_holding(registers::FAULT_FLAGS, 1).await.unwrap()[0] & 1, 1);
    c.write_single(registers::NEG_TRIGGER, 0).await.unwrap();
    tokio::time::sleep(Duration::from_millis(50)).await;
    assert_eq!(c.read_holding(registers::FAULT_FLAGS, 1).await.unwrap()[0] & 1, 0);
    sim.shutdown().await;
}

#[tokio::test]
async fn bind_conflict_names_the_address() {
    let sim = start(0.15).await;
    let addr = sim.local_addr().to_string();
    let err = controller::serve(SimConfig { bind: addr.clone(), ..SimConfig::default() })
        .await
        .err()
        .expect("second bind must fail");
    assert!(matches!(err, SimError::Bind { .. }));
    assert!(err.to_string().contains(&addr));
    sim.shutdown().await;
}

#[tokio::test]
async fn shutdown_closes_connections() {
    let sim = start(0.15).await;
    let addr = sim.local_addr();
    let mut c = ModbusClient::connect(addr, 1, TIMEOUT).await.unwrap();
    c.read_holding(0, 1).await.unwrap();
    tokio::time::timeout(Duration::from_secs(2), sim.shutdown()).await.expect("shutdown hung");
    assert!(c.read_holding(0, 1).await.unwrap_err().is_link_error());
    assert!(ModbusClient::connect(addr, 1, Duration::from_millis(200)).await.is_err());
}
