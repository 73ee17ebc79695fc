//! Length-prefixed frames exchanged with subprocess workers over stdin/stdout.
//!
//! ```text
//! +----------------+--------+-----------------+-------------+
//! | length: u32 LE | opcode | task_id: u64 LE | payload ... |
//! +----------------+--------+-----------------+-------------+
//! ```
//!
//! `length` counts the opcode byte, the task id and the payload. Call payloads
//! carry the function name: `name_len: u16 LE | name | argument bytes`.

use std::io::{self, Read, Write};

/// Bytes before the payload that `length` covers: opcode + task id.
pub const FIXED_BODY_LEN: usize = 1 + 8;
/// Length prefix size.
pub const PREFIX_LEN: usize = 4;
/// Largest accepted `length` value.
pub const MAX_FRAME_LEN: u32 = 1 << 30;

/// Version exchanged at handshake.
pub const PROTOCOL_VERSION: u32 = 1;
pub(crate) const HANDSHAKE_FN: &str = "__handshake";
const HANDSHAKE_MAGIC: &[u8; 4] = b"SPDL";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Opcode {
    Call = 0,
    Result = 1,
    Error = 2,
    Shutdown = 3,
}

impl TryFrom<u8> for Opcode {
    type Error = WireError;

    fn try_from(v: u8) -> Result<Self, WireError> {
        Ok(match v {
            0 => Opcode::Call,
            1 => Opcode::Result,
            2 => Opcode::Error,
            3 => Opcode::Shutdown,
            other => return Err(WireError::UnknownOpcode(other)),
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum WireError {
    #[error("unknown opcode {0}")]
    UnknownOpcode(u8),
    #[error("frame length {0} is shorter than the fixed body")]
    LengthTooShort(u32),
    #[error("frame length {0} exceeds the maximum")]
    TooLarge(u32),
    #[error("incomplete frame: need {needed} more bytes")]
    Incomplete { needed: usize },
    #[error("malformed call payload: {0}")]
    BadCall(&'static str),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireFrame {
    pub opcode: Opcode,
    pub task_id: u64,
    pub payload: Vec<u8>,
}

impl WireFrame {
    pub fn new(opcode: Opcode, task_id: u64, payload: Vec<u8>) -> Self {
        Self {
            opcode,
            task_id,
            payload,
        }
    }

    pub fn shutdown() -> Self {
        Self::new(Opcode::Shutdown, 0, Vec::new())
    }

    /// Value of the length prefix.
    pub fn body_len(&self) -> usize {
        FIXED_BODY_LEN + self.payload.len()
    }

    pub fn encoded_len(&self) -> usize {
        PREFIX_LEN + self.body_len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.encode_into(&mut out);
        out
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.body_len() as u32).to_le_bytes());
        out.push(self.opcode as u8);
        out.extend_from_slice(&self.task_id.to_le_bytes());
        out.extend_from_slice(&self.payload);
    }

    /// Decodes one frame from the front of `buf`, returning it and the bytes consumed.
    pub fn decode(buf: &[u8]) -> Result<(Self, usize), WireError> {
        if buf.len() < PREFIX_LEN {
            return Err(WireError::Incomplete {
                needed: PREFIX_LEN - buf.len(),
            });
        }
        let len = u32::from_le_bytes(buf[..PREFIX_LEN].try_into().unwrap());
        check_len(len)?;
        let total = PREFIX_LEN + len as usize;
        if buf.len() < total {
            return Err(WireError::Incomplete {
                needed: total - buf.len(),
            });
        }
        let frame = Self::from_body(&buf[PREFIX_LEN..total])?;
        Ok((frame, total))
    }

    fn from_body(body: &[u8]) -> Result<Self, WireError> {
        let opcode = Opcode::try_from(body[0])?;
        let task_id = u64::from_le_bytes(body[1..FIXED_BODY_LEN].try_into().unwrap());
        Ok(Self::new(opcode, task_id, body[FIXED_BODY_LEN..].to_vec()))
    }
}

fn check_len(len: u32) -> Result<(), WireError> {
    if (len as usize) < FIXED_BODY_LEN {
        return Err(WireError::LengthTooShort(len));
    }
    if len > MAX_FRAME_LEN {
        return Err(WireError::TooLarge(len));
    }
    Ok(())
}

/// Reads one frame. `Ok(None)` on a clean end of stream at a frame boundary.
pub fn read_frame(r: &mut impl Read) -> Result<Option<WireFrame>, WireError> {
    let mut prefix = [0u8; PREFIX_LEN];
    let mut got = 0;
    while got < PREFIX_LEN {
        match r.read(&mut prefix[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => {
                return Err(WireError::Incomplete {
                    needed: PREFIX_LEN - got,
                })
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_le_bytes(prefix);
    check_len(len)?;
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => WireError::Incomplete {
            needed: len as usize,
        },
        _ => WireError::Io(e),
    })?;
    WireFrame::from_body(&body).map(Some)
}

pub fn write_frame(w: &mut impl Write, frame: &WireFrame) -> io::Result<()> {
    w.write_all(&frame.encode())?;
    w.flush()
}

/// Builds a call payload: `name_len: u16 LE | name | args`.
pub fn encode_call(name: &str, args: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(2 + name.len() + args.len());
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(args);
    out
}

/// Encodes a complete call frame in a single pass over `args`.
pub fn encode_call_frame(task_id: u64, name: &str, args: &[u8]) -> Vec<u8> {
    let body_len = FIXED_BODY_LEN + 2 + name.len() + args.len();
    let mut out = Vec::with_capacity(PREFIX_LEN + body_len);
    out.extend_from_slice(&(body_len as u32).to_le_bytes());
    out.push(Opcode::Call as u8);
    out.extend_from_slice(&task_id.to_le_bytes());
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(args);
    out
}

pub fn decode_call(payload: &[u8]) -> Result<(&str, &[u8]), WireError> {
    if payload.len() < 2 {
        return Err(WireError::BadCall("missing name length"));
    }
    let n = u16::from_le_bytes([payload[0], payload[1]]) as usize;
    let name = payload
        .get(2..2 + n)
        .ok_or(WireError::BadCall("truncated name"))?;
    let name = std::str::from_utf8(name).map_err(|_| WireError::BadCall("name is not utf-8"))?;
    Ok((name, &payload[2 + n..]))
}

pub(crate) fn handshake_payload(digest: &[u8; 32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(40);
    out.extend_from_slice(HANDSHAKE_MAGIC);
    out.extend_from_slice(&PROTOCOL_VERSION.to_le_bytes());
    out.extend_from_slice(digest);
    out
}

pub(crate) fn parse_handshake(payload: &[u8]) -> Option<(u32, [u8; 32])> {
    if payload.len() != 40 || &payload[..4] != HANDSHAKE_MAGIC {
        return None;
    }
    let version = u32::from_le_bytes(payload[4..8].try_into().unwrap());
    Some((version, payload[8..40].try_into().unwrap()))
}
