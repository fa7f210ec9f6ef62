//! Encodes the three basic Modbus TCP frames and reassembles a byte stream
//! that arrives in awkward chunks.
//!
//! cargo run --example modbus_frames

use gripper_twin::modbus::{
    decode_frame, pressure_to_register, register_to_pressure, Decoded, Direction, Frame,
    FrameReader, Pdu,
};

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02X}")).collect::<Vec<_>>().join(" ")
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let read = Frame::new(1, 1, Pdu::ReadHoldingRegisters { address: 0, count: 6 })?;
    let write = Frame::new(2, 1, Pdu::WriteSingleRegister { address: 2, value: pressure_to_register(50.0)? })?;
    let multi = Frame::new(3, 1, Pdu::WriteMultipleRegisters {
        address: 2,
        values: vec![pressure_to_register(120.0)?, pressure_to_register(-90.0)?],
    })?;
    for f in [&read, &write, &multi] {
        println!("fc 0x{:02X}: {}", f.pdu.function_code(), hex(&f.encode()?));
    }

    let exception = [0x00, 0x03, 0x00, 0x00, 0x00, 0x03, 0x01, 0x83, 0x02];
    if let Decoded::Complete { frame, .. } = decode_frame(&exception, Direction::Response)? {
        println!("response {}: {:?}", hex(&exception), frame.pdu);
    }

    let mut stream = Vec::new();
    for f in [&read, &write, &multi] {
        stream.extend(f.encode()?);
    }
    let mut reader = FrameReader::new(Direction::Request);
    for chunk in stream.chunks(5) {
        reader.push(chunk);
        while let Some(frame) = reader.next_frame() {
            println!("reassembled txn {}", frame?.header.transaction_id);
        }
    }

    println!("-90 kPa -> 0x{:04X} -> {} kPa", pressure_to_register(-90.0)?, register_to_pressure(pressure_to_register(-90.0)?));
    Ok(())
}
