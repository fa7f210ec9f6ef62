//! Modbus TCP framing and PDU codec.
//!
//! Only holding-register traffic is supported: read holding registers (0x03),
//! write single register (0x06) and write multiple registers (0x10), plus
//! exception responses. Everything is big-endian.
//!
//! The codec is pure; [`FrameReader`] adds per-connection stream reassembly
//! and [`client::ModbusClient`] an async TCP client on top.

pub mod client;

use std::fmt;

use thiserror::Error;

/// Size of the MBAP header on the wire.
pub const MBAP_LEN: usize = 7;
/// Largest accepted MBAP length field.
pub const MAX_MBAP_LENGTH: u16 = 260;
/// Register count limits for 0x03 and 0x10.
pub const MAX_READ_COUNT: u16 = 125;
pub const MAX_WRITE_COUNT: u16 = 123;

/// Default TCP port. The standard port 502 needs privileges.
pub const DEFAULT_PORT: u16 = 1502;

pub const FC_READ_HOLDING: u8 = 0x03;
pub const FC_WRITE_SINGLE: u8 = 0x06;
pub const FC_WRITE_MULTIPLE: u8 = 0x10;

/// Largest pressure magnitude representable at 0.1 kPa per LSB.
pub const MAX_PRESSURE_KPA: f64 = 3276.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MbapHeader {
    pub transaction_id: u16,
    pub protocol_id: u16,
    /// Bytes following the length field, including the unit id.
    pub length: u16,
    pub unit_id: u8,
}

impl MbapHeader {
    fn parse(bytes: &[u8]) -> Self {
        Self {
            transaction_id: u16::from_be_bytes([bytes[0], bytes[1]]),
            protocol_id: u16::from_be_bytes([bytes[2], bytes[3]]),
            length: u16::from_be_bytes([bytes[4], bytes[5]]),
            unit_id: bytes[6],
        }
    }

    /// Total frame size implied by the length field.
    pub fn frame_len(&self) -> usize {
        6 + self.length as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExceptionCode {
    IllegalFunction,
    IllegalDataAddress,
    IllegalDataValue,
    ServerDeviceFailure,
    Other(u8),
}

impl ExceptionCode {
    pub fn code(self) -> u8 {
        match self {
            ExceptionCode::IllegalFunction => 0x01,
            ExceptionCode::IllegalDataAddress => 0x02,
            ExceptionCode::IllegalDataValue => 0x03,
            ExceptionCode::ServerDeviceFailure => 0x04,
            ExceptionCode::Other(c) => c,
        }
    }

    pub fn from_code(code: u8) -> Self {
        match code {
            0x01 => ExceptionCode::IllegalFunction,
            0x02 => ExceptionCode::IllegalDataAddress,
            0x03 => ExceptionCode::IllegalDataValue,
            0x04 => ExceptionCode::ServerDeviceFailure,
            c => ExceptionCode::Other(c),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ExceptionCode::IllegalFunction => "illegal-function",
            ExceptionCode::IllegalDataAddress => "illegal-data-address",
            ExceptionCode::IllegalDataValue => "illegal-data-value",
            ExceptionCode::ServerDeviceFailure => "server-device-failure",
            ExceptionCode::Other(_) => "other",
        }
    }
}

impl fmt::Display for ExceptionCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "0x{:02X} {}", self.code(), self.name())
    }
}

/// Protocol data unit. Requests and responses of 0x06 share a layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Pdu {
    ReadHoldingRegisters { address: u16, count: u16 },
    ReadHoldingRegistersResponse { values: Vec<u16> },
    WriteSingleRegister { address: u16, value: u16 },
    WriteMultipleRegisters { address: u16, values: Vec<u16> },
    WriteMultipleRegistersResponse { address: u16, count: u16 },
    Exception { function: u8, code: ExceptionCode },
}

impl Pdu {
    pub fn function_code(&self) -> u8 {
        match self {
            Pdu::ReadHoldingRegisters { .. } | Pdu::ReadHoldingRegistersResponse { .. } => {
                FC_READ_HOLDING
            }
            Pdu::WriteSingleRegister { .. } => FC_WRITE_SINGLE,
            Pdu::WriteMultipleRegisters { .. } | Pdu::WriteMultipleRegistersResponse { .. } => {
                FC_WRITE_MULTIPLE
            }
            Pdu::Exception { function, .. } => function | 0x80,
        }
    }

    /// Encoded PDU bytes (function code + payload).
    pub fn encode(&self) -> Result<Vec<u8>, ModbusError> {
        let mut out = vec![self.function_code()];
        match self {
            Pdu::ReadHoldingRegisters { address, count } => {
                check_count(*count, MAX_READ_COUNT)?;
                out.extend_from_slice(&address.to_be_bytes());
                out.extend_from_slice(&count.to_be_bytes());
            }
            Pdu::ReadHoldingRegistersResponse { values } => {
                check_count(values.len(), MAX_READ_COUNT)?;
                out.push((values.len() * 2) as u8);
                for v in values {
                    out.extend_from_slice(&v.to_be_bytes());
                }
            }
            Pdu::WriteSingleRegister { address, value } => {
                out.extend_from_slice(&address.to_be_bytes());
                out.extend_from_slice(&value.to_be_bytes());
            }
            Pdu::WriteMultipleRegisters { address, values } => {
                check_count(values.len(), MAX_WRITE_COUNT)?;
                out.extend_from_slice(&address.to_be_bytes());
                out.extend_from_slice(&(values.len() as u16).to_be_bytes());
                out.push((values.len() * 2) as u8);
                for v in values {
                    out.extend_from_slice(&v.to_be_bytes());
                }
            }
            Pdu::WriteMultipleRegistersResponse { address, count } => {
                check_count(*count, MAX_WRITE_COUNT)?;
                out.extend_from_slice(&address.to_be_bytes());
                out.extend_from_slice(&count.to_be_bytes());
            }
            Pdu::Exception { function, code } => {
                if *function & 0x80 != 0 {
                    return Err(ModbusError::Encode(format!(
                        "exception function 0x{function:02X} already has the high bit set"
                    )));
                }
                out.push(code.code());
            }
        }
        Ok(out)
    }
}

fn check_count(count: impl Into<usize>, max: u16) -> Result<(), ModbusError> {
    let count = count.into();
    if count == 0 || count > max as usize {
        return Err(ModbusError::Encode(format!(
            "register count {count} outside [1, {max}]"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub header: MbapHeader,
    pub pdu: Pdu,
}

impl Frame {
    /// Builds a frame with protocol id 0 and the length field filled in.
    pub fn new(transaction_id: u16, unit_id: u8, pdu: Pdu) -> Result<Self, ModbusError> {
        let pdu_len = pdu.encode()?.len();
        Ok(Self {
            header: MbapHeader {
                transaction_id,
                protocol_id: 0,
                length: pdu_len as u16 + 1,
                unit_id,
            },
            pdu,
        })
    }

    pub fn encode(&self) -> Result<Vec<u8>, ModbusError> {
        encode_frame(&self.header, &self.pdu)
    }
}

/// Which side sent the bytes; 0x03 and 0x10 have different request and
/// response layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Request,
    Response,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModbusError {
    #[error("encode error: {0}")]
    Encode(String),
    #[error("protocol id {protocol_id} is not Modbus (0)")]
    Protocol { protocol_id: u16 },
    #[error("MBAP length {length} exceeds {MAX_MBAP_LENGTH}")]
    FrameTooLong { length: u16 },
    #[error("unsupported function code 0x{function:02X}")]
    UnsupportedFunction { header: MbapHeader, function: u8 },
    #[error("malformed PDU for function 0x{function:02X}: {reason}")]
    InvalidPdu {
        header: MbapHeader,
        function: u8,
        reason: String,
    },
    #[error("malformed frame: {reason}")]
    Malformed { frame_len: usize, reason: String },
    #[error("pressure {0} kPa outside ±{MAX_PRESSURE_KPA} kPa register range")]
    PressureOutOfRange(f64),
}

impl ModbusError {
    /// Length of the offending frame when the stream can skip past it.
    pub fn frame_len(&self) -> Option<usize> {
        match self {
            ModbusError::UnsupportedFunction { header, .. }
            | ModbusError::InvalidPdu { header, .. } => Some(header.frame_len()),
            ModbusError::Malformed { frame_len, .. } => Some(*frame_len),
            _ => None,
        }
    }

    /// Exception a server should answer with, if the request can be answered.
    pub fn exception_reply(&self) -> Option<(MbapHeader, u8, ExceptionCode)> {
        match self {
            ModbusError::UnsupportedFunction { header, function } => {
                Some((*header, *function, ExceptionCode::IllegalFunction))
            }
            ModbusError::InvalidPdu {
                header, function, ..
            } => Some((*header, *function, ExceptionCode::IllegalDataValue)),
            _ => None,
        }
    }
}

/// Outcome of a decode attempt on a byte prefix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decoded {
    Complete { frame: Frame, consumed: usize },
    /// At least this many more bytes are required.
    NeedMore(usize),
}

/// Encodes MBAP header and PDU. The header's length field is recomputed.
pub fn encode_frame(header: &MbapHeader, pdu: &Pdu) -> Result<Vec<u8>, ModbusError> {
    if header.protocol_id != 0 {
        return Err(ModbusError::Encode(format!(
            "protocol id must be 0, got {}",
            header.protocol_id
        )));
    }
    let body = pdu.encode()?;
    let length = body.len() as u16 + 1;
    let mut out = Vec::with_capacity(MBAP_LEN + body.len());
    out.extend_from_slice(&header.transaction_id.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&length.to_be_bytes());
    out.push(header.unit_id);
    out.extend_from_slice(&body);
    Ok(out)
}

/// Alias of [`encode_frame`] for the client side.
pub fn encode_request(header: &MbapHeader, pdu: &Pdu) -> Result<Vec<u8>, ModbusError> {
    encode_frame(header, pdu)
}

/// Decodes one frame from the start of `bytes`.
pub fn decode_frame(bytes: &[u8], direction: Direction) -> Result<Decoded, ModbusError> {
    if bytes.len() < MBAP_LEN {
        return Ok(Decoded::NeedMore(MBAP_LEN - bytes.len()));
    }
    let header = MbapHeader::parse(bytes);
    if header.protocol_id != 0 {
        return Err(ModbusError::Protocol {
            protocol_id: header.protocol_id,
        });
    }
    if header.length > MAX_MBAP_LENGTH {
        return Err(ModbusError::FrameTooLong {
            length: header.length,
        });
    }
    let frame_len = header.frame_len();
    if header.length < 2 {
        return Err(ModbusError::Malformed {
            frame_len,
            reason: format!("MBAP length {} leaves no room for a function code", header.length),
        });
    }
    if bytes.len() < frame_len {
        return Ok(Decoded::NeedMore(frame_len - bytes.len()));
    }
    let function = bytes[MBAP_LEN];
    let payload = &bytes[MBAP_LEN + 1..frame_len];
    let pdu = match direction {
        Direction::Request => decode_request_pdu(&header, function, payload)?,
        Direction::Response => decode_response_pdu(&header, function, payload)?,
    };
    Ok(Decoded::Complete {
        frame: Frame { header, pdu },
        consumed: frame_len,
    })
}

fn be16(b: &[u8], at: usize) -> u16 {
    u16::from_be_bytes([b[at], b[at + 1]])
}

fn registers(b: &[u8]) -> Vec<u16> {
    b.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
}

fn decode_request_pdu(header: &MbapHeader, function: u8, p: &[u8]) -> Result<Pdu, ModbusError> {
    let invalid = |reason: String| ModbusError::InvalidPdu {
        header: *header,
        function,
        reason,
    };
    match function {
        FC_READ_HOLDING => {
            if p.len() != 4 {
                return Err(invalid(format!("payload is {} bytes, expected 4", p.len())));
            }
            let count = be16(p, 2);
            if count == 0 || count > MAX_READ_COUNT {
                return Err(invalid(format!("read count {count} outside [1, {MAX_READ_COUNT}]")));
            }
            Ok(Pdu::ReadHoldingRegisters {
                address: be16(p, 0),
                count,
            })
        }
        FC_WRITE_SINGLE => {
            if p.len() != 4 {
                return Err(invalid(format!("payload is {} bytes, expected 4", p.len())));
            }
            Ok(Pdu::WriteSingleRegister {
                address: be16(p, 0),
                value: be16(p, 2),
            })
        }
        FC_WRITE_MULTIPLE => {
            if p.len() < 5 {
                return Err(invalid(format!("payload is {} bytes, expected ≥5", p.len())));
            }
            let count = be16(p, 2);
            let byte_count = p[4] as usize;
            if count == 0 || count > MAX_WRITE_COUNT {
                return Err(invalid(format!("write count {count} outside [1, {MAX_WRITE_COUNT}]")));
            }
            if byte_count != 2 * count as usize || p.len() != 5 + byte_count {
                return Err(invalid(format!(
                    "byte count {byte_count} inconsistent with {count} registers and {} payload bytes",
                    p.len()
                )));
            }
            Ok(Pdu::WriteMultipleRegisters {
                address: be16(p, 0),
                values: registers(&p[5..]),
            })
        }
        _ => Err(ModbusError::UnsupportedFunction {
            header: *header,
            function,
        }),
    }
}

fn decode_response_pdu(header: &MbapHeader, function: u8, p: &[u8]) -> Result<Pdu, ModbusError> {
    let invalid = |reason: String| ModbusError::InvalidPdu {
        header: *header,
        function,
        reason,
    };
    if function & 0x80 != 0 {
        if p.len() != 1 {
            return Err(invalid(format!("exception payload is {} bytes, expected 1", p.len())));
        }
        return Ok(Pdu::Exception {
            function: function & 0x7F,
            code: ExceptionCode::from_code(p[0]),
        });
    }
    match function {
        FC_READ_HOLDING => {
            let Some((&byte_count, data)) = p.split_first() else {
                return Err(invalid("missing byte count".into()));
            };
            let byte_count = byte_count as usize;
            if byte_count == 0
                || !byte_count.is_multiple_of(2)
                || byte_count > 2 * MAX_READ_COUNT as usize
                || data.len() != byte_count
            {
                return Err(invalid(format!(
                    "byte count {byte_count} inconsistent with {} data bytes",
                    data.len()
                )));
            }
            Ok(Pdu::ReadHoldingRegistersResponse {
                values: registers(data),
            })
        }
        FC_WRITE_SINGLE => {
            if p.len() != 4 {
                return Err(invalid(format!("payload is {} bytes, expected 4", p.len())));
            }
            Ok(Pdu::WriteSingleRegister {
                address: be16(p, 0),
                value: be16(p, 2),
            })
        }
        FC_WRITE_MULTIPLE => {
            if p.len() != 4 {
                return Err(invalid(format!("payload is {} bytes, expected 4", p.len())));
            }
            let count = be16(p, 2);
            if count == 0 || count > MAX_WRITE_COUNT {
                return Err(invalid(format!("write count {count} outside [1, {MAX_WRITE_COUNT}]")));
            }
            Ok(Pdu::WriteMultipleRegistersResponse {
                address: be16(p, 0),
                count,
            })
        }
        _ => Err(ModbusError::UnsupportedFunction {
            header: *header,
            function,
        }),
    }
}

/// Incremental frame reassembly for one TCP connection.
#[derive(Debug, Clone)]
pub struct FrameReader {
    direction: Direction,
    buf: Vec<u8>,
}

impl FrameReader {
    pub fn new(direction: Direction) -> Self {
        Self {
            direction,
            buf: Vec::new(),
        }
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    /// Next complete frame, `None` if more bytes are needed.
    ///
    /// A frame that fails to decode but has a trustworthy length is skipped.
    /// Header-level errors clear the buffer; the stream cannot be resynced and
    /// the connection should be dropped.
    pub fn next_frame(&mut self) -> Option<Result<Frame, ModbusError>> {
        match decode_frame(&self.buf, self.direction) {
            Ok(Decoded::NeedMore(_)) => None,
            Ok(Decoded::Complete { frame, consumed }) => {
                self.buf.drain(..consumed);
                Some(Ok(frame))
            }
            Err(e) => {
                match e.frame_len() {
                    Some(n) => {
                        self.buf.drain(..n.min(self.buf.len()));
                    }
                    None => self.buf.clear(),
                }
                Some(Err(e))
            }
        }
    }
}

/// Pressure in kPa to a signed 0.1 kPa register.
pub fn pressure_to_register(kpa: f64) -> Result<u16, ModbusError> {
    if !kpa.is_finite() || kpa.abs() > MAX_PRESSURE_KPA {
        return Err(ModbusError::PressureOutOfRange(kpa));
    }
    Ok(((kpa * 10.0).round() as i16) as u16)
}

pub fn register_to_pressure(raw: u16) -> f64 {
    raw as i16 as f64 / 10.0
}
