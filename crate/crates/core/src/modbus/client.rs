//! Async Modbus TCP client for holding registers.

use std::time::Duration;

use thiserror::Error;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpStream, ToSocketAddrs};

use super::{Direction, ExceptionCode, Frame, FrameReader, ModbusError, Pdu};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("connection closed by peer")]
    Closed,
    #[error(transparent)]
    Codec(#[from] ModbusError),
    #[error("server exception for function 0x{function:02X}: {code}")]
    Exception { function: u8, code: ExceptionCode },
    #[error("response transaction id {got} does not match request {expected}")]
    TransactionMismatch { expected: u16, got: u16 },
    #[error("unexpected response {0:?}")]
    UnexpectedResponse(Pdu),
}

impl ClientError {
    /// True when the connection is unusable and must be re-established.
    pub fn is_link_error(&self) -> bool {
        !matches!(self, ClientError::Exception { .. })
    }
}

pub struct ModbusClient {
    stream: TcpStream,
    reader: FrameReader,
    next_transaction: u16,
    unit_id: u8,
    timeout: Duration,
}

impl ModbusClient {
    pub async fn connect(
        addr: impl ToSocketAddrs,
        unit_id: u8,
        timeout: Duration,
    ) -> Result<Self, ClientError> {
        let stream = tokio::time::timeout(timeout, TcpStream::connect(addr))
            .await
            .map_err(|_| ClientError::Timeout(timeout))??;
        stream.set_nodelay(true)?;
        Ok(Self {
            stream,
            reader: FrameReader::new(Direction::Response),
            next_transaction: 1,
            unit_id,
            timeout,
        })
    }

    /// Sends one request and waits for the matching response PDU.
    /// Exception responses are returned as [`ClientError::Exception`].
    pub async fn call(&mut self, pdu: Pdu) -> Result<Pdu, ClientError> {
        let txn = self.next_transaction;
        self.next_transaction = self.next_transaction.wrapping_add(1);
        let bytes = Frame::new(txn, self.unit_id, pdu)?.encode()?;
        let timeout = self.timeout;
        let frame = tokio::time::timeout(timeout, self.exchange(&bytes))
            .await
            .map_err(|_| ClientError::Timeout(timeout))??;
        if frame.header.transaction_id != txn {
            return Err(ClientError::TransactionMismatch {
                expected: txn,
                got: frame.header.transaction_id,
            });
        }
        match frame.pdu {
            Pdu::Exception { function, code } => Err(ClientError::Exception { function, code }),
            pdu => Ok(pdu),
        }
    }

    async fn exchange(&mut self, bytes: &[u8]) -> Result<Frame, ClientError> {
        self.stream.write_all(bytes).await?;
        let mut chunk = [0u8; 512];
        loop {
            if let Some(frame) = self.reader.next_frame() {
                return Ok(frame?);
            }
            let n = self.stream.read(&mut chunk).await?;
            if n == 0 {
                return Err(ClientError::Closed);
            }
            self.reader.push(&chunk[..n]);
        }
    }

    pub async fn read_holding(&mut self, address: u16, count: u16) -> Result<Vec<u16>, ClientError> {
        match self.call(Pdu::ReadHoldingRegisters { address, count }).await? {
            Pdu::ReadHoldingRegistersResponse { values } if values.len() == count as usize => {
                Ok(values)
            }
            other => Err(ClientError::UnexpectedResponse(other)),
        }
    }

    pub async fn write_single(&mut self, address: u16, value: u16) -> Result<(), ClientError> {
        match self.call(Pdu::WriteSingleRegister { address, value }).await? {
            Pdu::WriteSingleRegister { address: a, value: v } if a == address && v == value => {
                Ok(())
            }
            other => Err(ClientError::UnexpectedResponse(other)),
        }
    }

    pub async fn write_multiple(&mut self, address: u16, values: &[u16]) -> Result<(), ClientError> {
        let pdu = Pdu::WriteMultipleRegisters {
            address,
            values: values.to_vec(),
        };
        match self.call(pdu).await? {
            Pdu::WriteMultipleRegistersResponse { address: a, count }
                if a == address && count as usize == values.len() =>
            {
                Ok(())
            }
            other => Err(ClientError::UnexpectedResponse(other)),
        }
    }
}
