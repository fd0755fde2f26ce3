//! Peer wire format.
//!
//! Every frame starts with a fixed 35-byte little-endian header followed by
//! `reason_len` bytes of reason text and `payload_len` bytes of payload:
//!
//! ```text
//! magic u32 | exec_id [u8; 16] | index u32 | status u8 | reason_len u16 | payload_len u64
//! ```
//!
//! Status `0` is an ok delivery, `1` a soft-error delivery and `0x80` an
//! activation, whose reason field carries the DT node id and whose payload is
//! the GetBatch request JSON.

use bytes::{BufMut, Bytes, BytesMut};
use thiserror::Error;

use crate::model::{parse_batch_request, BatchRequest, ExecutionId, ItemStatus, RequestError};
use crate::placement::NodeId;

pub const MAGIC: u32 = 0x4742_4154;
pub const HEADER_LEN: usize = 35;
/// Upper bound accepted on decode.
pub const MAX_PAYLOAD: u64 = 1 << 36;

const STATUS_OK: u8 = 0;
const STATUS_SOFT: u8 = 1;
const STATUS_ACTIVATION: u8 = 0x80;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FrameError {
    #[error("bad magic {0:#010x}")]
    Magic(u32),
    #[error("unknown frame status {0:#04x}")]
    Status(u8),
    #[error("payload of {0} bytes exceeds limit")]
    TooLarge(u64),
    #[error("soft-error frame carries a payload")]
    SoftWithPayload,
    #[error("frame length mismatch")]
    Length,
    #[error("reason is not UTF-8")]
    Reason,
    #[error("bad activation: {0}")]
    Activation(#[from] RequestError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeliveryFrame {
    pub exec_id: ExecutionId,
    pub index: u32,
    pub status: ItemStatus,
    pub reason: Option<String>,
    pub payload: Bytes,
}

impl DeliveryFrame {
    pub fn ok(exec_id: ExecutionId, index: u32, payload: Bytes) -> Self {
        DeliveryFrame {
            exec_id,
            index,
            status: ItemStatus::Ok,
            reason: None,
            payload,
        }
    }

    pub fn soft_error(exec_id: ExecutionId, index: u32, reason: impl Into<String>) -> Self {
        DeliveryFrame {
            exec_id,
            index,
            status: ItemStatus::SoftError,
            reason: Some(reason.into()),
            payload: Bytes::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationMessage {
    pub exec_id: ExecutionId,
    pub dt_node: NodeId,
    pub request: BatchRequest,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    Delivery(DeliveryFrame),
    Activation(ActivationMessage),
}

/// Decoded fixed header; tells the reader how many more bytes to pull.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameHeader {
    pub exec_id: ExecutionId,
    pub index: u32,
    pub status: u8,
    pub reason_len: u16,
    pub payload_len: u64,
}

impl FrameHeader {
    pub fn parse(b: &[u8; HEADER_LEN]) -> Result<Self, FrameError> {
        let magic = u32::from_le_bytes(b[0..4].try_into().unwrap());
        if magic != MAGIC {
            return Err(FrameError::Magic(magic));
        }
        let exec_id = ExecutionId::from_bytes(b[4..20].try_into().unwrap());
        let index = u32::from_le_bytes(b[20..24].try_into().unwrap());
        let status = b[24];
        let reason_len = u16::from_le_bytes(b[25..27].try_into().unwrap());
        let payload_len = u64::from_le_bytes(b[27..35].try_into().unwrap());
        if !matches!(status, STATUS_OK | STATUS_SOFT | STATUS_ACTIVATION) {
            return Err(FrameError::Status(status));
        }
        if payload_len > MAX_PAYLOAD {
            return Err(FrameError::TooLarge(payload_len));
        }
        if status == STATUS_SOFT && payload_len != 0 {
            return Err(FrameError::SoftWithPayload);
        }
        Ok(FrameHeader {
            exec_id,
            index,
            status,
            reason_len,
            payload_len,
        })
    }

    pub fn body_len(&self) -> u64 {
        u64::from(self.reason_len) + self.payload_len
    }

    fn write(&self, out: &mut BytesMut) {
        out.put_u32_le(MAGIC);
        out.put_slice(&self.exec_id.to_bytes());
        out.put_u32_le(self.index);
        out.put_u8(self.status);
        out.put_u16_le(self.reason_len);
        out.put_u64_le(self.payload_len);
    }
}

fn reason_bytes(s: &str) -> &[u8] {
    let b = s.as_bytes();
    let mut end = b.len().min(u16::MAX as usize);
    while !s.is_char_boundary(end) {
        end -= 1;
    }
    &b[..end]
}

impl Frame {
    pub fn exec_id(&self) -> ExecutionId {
        match self {
            Frame::Delivery(d) => d.exec_id,
            Frame::Activation(a) => a.exec_id,
        }
    }

    /// Header plus reason as one buffer, and the payload kept separate so large
    /// payloads are never copied.
    pub fn encode_parts(&self) -> (Bytes, Bytes) {
        let (exec_id, index, status, reason, payload): (_, _, _, &[u8], Bytes) = match self {
            Frame::Delivery(d) => (
                d.exec_id,
                d.index,
                match d.status {
                    ItemStatus::Ok => STATUS_OK,
                    ItemStatus::SoftError => STATUS_SOFT,
                },
                d.reason.as_deref().map(reason_bytes).unwrap_or_default(),
                if d.status == ItemStatus::Ok {
                    d.payload.clone()
                } else {
                    Bytes::new()
                },
            ),
            Frame::Activation(a) => (
                a.exec_id,
                0,
                STATUS_ACTIVATION,
                reason_bytes(a.dt_node.as_str()),
                Bytes::from(a.request.to_json()),
            ),
        };
        let h = FrameHeader {
            exec_id,
            index,
            status,
            reason_len: reason.len() as u16,
            payload_len: payload.len() as u64,
        };
        let mut head = BytesMut::with_capacity(HEADER_LEN + reason.len());
        h.write(&mut head);
        head.put_slice(reason);
        (head.freeze(), payload)
    }

    pub fn encode(&self) -> Vec<u8> {
        let (head, payload) = self.encode_parts();
        let mut v = Vec::with_capacity(head.len() + payload.len());
        v.extend_from_slice(&head);
        v.extend_from_slice(&payload);
        v
    }

    /// Activation frame around request bytes that are forwarded unparsed.
    pub fn encode_activation_raw(exec_id: ExecutionId, dt_node: &NodeId, request: Bytes) -> (Bytes, Bytes) {
        let reason = reason_bytes(dt_node.as_str());
        let h = FrameHeader {
            exec_id,
            index: 0,
            status: STATUS_ACTIVATION,
            reason_len: reason.len() as u16,
            payload_len: request.len() as u64,
        };
        let mut head = BytesMut::with_capacity(HEADER_LEN + reason.len());
        h.write(&mut head);
        head.put_slice(reason);
        (head.freeze(), request)
    }

    /// Builds a frame from a parsed header and the bytes that followed it.
    pub fn from_parts(h: FrameHeader, reason: &[u8], payload: Bytes) -> Result<Self, FrameError> {
        if reason.len() != h.reason_len as usize || payload.len() as u64 != h.payload_len {
            return Err(FrameError::Length);
        }
        let reason = std::str::from_utf8(reason).map_err(|_| FrameError::Reason)?;
        Ok(match h.status {
            STATUS_ACTIVATION => Frame::Activation(ActivationMessage {
                exec_id: h.exec_id,
                dt_node: NodeId::new(reason),
                request: parse_batch_request(&payload)?,
            }),
            STATUS_OK => Frame::Delivery(DeliveryFrame {
                exec_id: h.exec_id,
                index: h.index,
                status: ItemStatus::Ok,
                reason: None,
                payload,
            }),
            STATUS_SOFT => Frame::Delivery(DeliveryFrame {
                exec_id: h.exec_id,
                index: h.index,
                status: ItemStatus::SoftError,
                reason: Some(reason.to_string()),
                payload,
            }),
            other => return Err(FrameError::Status(other)),
        })
    }

    /// Decodes exactly one frame occupying all of `buf`.
    pub fn decode(buf: &[u8]) -> Result<Self, FrameError> {
        if buf.len() < HEADER_LEN {
            return Err(FrameError::Length);
        }
        let h = FrameHeader::parse(buf[..HEADER_LEN].try_into().unwrap())?;
        let rest = &buf[HEADER_LEN..];
        if rest.len() as u64 != h.body_len() {
            return Err(FrameError::Length);
        }
        let (reason, payload) = rest.split_at(h.reason_len as usize);
        Frame::from_parts(h, reason, Bytes::copy_from_slice(payload))
    }
}
