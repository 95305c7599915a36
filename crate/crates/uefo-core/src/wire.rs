//! Acquisition wire protocol: HELLO / PAGE / END frames.
//!
//! Every frame is `kind: u8`, `payload_len: u32` (little-endian), then the
//! payload. All integers are little-endian.
//!
//! * `Hello` (kind 1): magic `"UEFO"`, `version: u16` (= 1),
//!   `page_size: u32`, `range_count: u32`, then per range
//!   `start: u64`, `end: u64`, `purpose: u8` (1 = system RAM, 2 = reserved).
//! * `Page` (kind 2): `address: u64`, `timestamp_ns: u64`, then
//!   `page_size` bytes of data.
//! * `End` (kind 3): `page_count: u64`, then a 32-byte SHA-256 digest over
//!   all page data bytes in send order.

use thiserror::Error;

use crate::memory::{MemoryRange, Purpose};

pub const WIRE_MAGIC: [u8; 4] = *b"UEFO";
pub const WIRE_VERSION: u16 = 1;
/// Upper bound on `payload_len`; anything larger is rejected outright.
pub const MAX_PAYLOAD_LEN: u32 = 16 * 1024 * 1024;
/// Bytes of framing before the payload: kind + payload_len.
pub const FRAME_HEADER_LEN: usize = 5;

pub const KIND_HELLO: u8 = 1;
pub const KIND_PAGE: u8 = 2;
pub const KIND_END: u8 = 3;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("bad magic in hello frame")]
    BadMagic,
    #[error("unknown frame kind {0}")]
    UnknownKind(u8),
    #[error("truncated frame")]
    Truncated,
    #[error("payload length {0} exceeds the {MAX_PAYLOAD_LEN}-byte limit")]
    LengthOverflow(u32),
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u16),
    #[error("malformed payload: {0}")]
    Malformed(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WireMessage {
    Hello {
        page_size: u32,
        ranges: Vec<MemoryRange>,
    },
    Page {
        address: u64,
        timestamp_ns: u64,
        data: Vec<u8>,
    },
    End {
        page_count: u64,
        digest: [u8; 32],
    },
}

fn purpose_byte(p: Purpose) -> u8 {
    match p {
        Purpose::SystemRam => 1,
        Purpose::Reserved => 2,
    }
}

fn purpose_from_byte(b: u8) -> Result<Purpose, WireError> {
    match b {
        1 => Ok(Purpose::SystemRam),
        2 => Ok(Purpose::Reserved),
        _ => Err(WireError::Malformed("unknown purpose byte")),
    }
}

/// Encodes one message into a self-contained frame.
pub fn encode_message(msg: &WireMessage) -> Result<Vec<u8>, WireError> {
    let payload = match msg {
        WireMessage::Hello { page_size, ranges } => {
            let mut p = Vec::with_capacity(14 + ranges.len() * 17);
            p.extend_from_slice(&WIRE_MAGIC);
            p.extend_from_slice(&WIRE_VERSION.to_le_bytes());
            p.extend_from_slice(&page_size.to_le_bytes());
            p.extend_from_slice(&(ranges.len() as u32).to_le_bytes());
            for r in ranges {
                p.extend_from_slice(&r.start.to_le_bytes());
                p.extend_from_slice(&r.end.to_le_bytes());
                p.push(purpose_byte(r.purpose));
            }
            p
        }
        WireMessage::Page {
            address,
            timestamp_ns,
            data,
        } => {
            let mut p = Vec::with_capacity(16 + data.len());
            p.extend_from_slice(&address.to_le_bytes());
            p.extend_from_slice(&timestamp_ns.to_le_bytes());
            p.extend_from_slice(data);
            p
        }
        WireMessage::End { page_count, digest } => {
            let mut p = Vec::with_capacity(40);
            p.extend_from_slice(&page_count.to_le_bytes());
            p.extend_from_slice(digest);
            p
        }
    };
    if payload.len() > MAX_PAYLOAD_LEN as usize {
        return Err(WireError::LengthOverflow(payload.len() as u32));
    }
    let kind = match msg {
        WireMessage::Hello { .. } => KIND_HELLO,
        WireMessage::Page { .. } => KIND_PAGE,
        WireMessage::End { .. } => KIND_END,
    };
    let mut frame = Vec::with_capacity(FRAME_HEADER_LEN + payload.len());
    frame.push(kind);
    frame.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    frame.extend_from_slice(&payload);
    Ok(frame)
}

/// Decodes the first full frame in `buf`, returning the message and the
/// number of bytes consumed.
pub fn decode_message(buf: &[u8]) -> Result<(WireMessage, usize), WireError> {
    if buf.len() < FRAME_HEADER_LEN {
        return Err(WireError::Truncated);
    }
    let kind = buf[0];
    let payload_len = u32::from_le_bytes(buf[1..5].try_into().unwrap());
    if payload_len > MAX_PAYLOAD_LEN {
        return Err(WireError::LengthOverflow(payload_len));
    }
    let total = FRAME_HEADER_LEN + payload_len as usize;
    if buf.len() < total {
        return Err(WireError::Truncated);
    }
    let payload = &buf[FRAME_HEADER_LEN..total];
    let msg = decode_payload(kind, payload)?;
    Ok((msg, total))
}

/// Decodes a payload whose framing has already been stripped.
pub fn decode_payload(kind: u8, payload: &[u8]) -> Result<WireMessage, WireError> {
    match kind {
        KIND_HELLO => decode_hello(payload),
        KIND_PAGE => decode_page(payload),
        KIND_END => decode_end(payload),
        other => Err(WireError::UnknownKind(other)),
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() - self.pos < n {
            return Err(WireError::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn rest(self) -> &'a [u8] {
        &self.buf[self.pos..]
    }

    fn finished(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn decode_hello(payload: &[u8]) -> Result<WireMessage, WireError> {
    let mut c = Cursor::new(payload);
    if c.take(4)? != WIRE_MAGIC {
        return Err(WireError::BadMagic);
    }
    let version = c.u16()?;
    if version != WIRE_VERSION {
        return Err(WireError::UnsupportedVersion(version));
    }
    let page_size = c.u32()?;
    let range_count = c.u32()?;
    let mut ranges = Vec::with_capacity(range_count.min(4096) as usize);
    for _ in 0..range_count {
        let start = c.u64()?;
        let end = c.u64()?;
        let purpose = purpose_from_byte(c.u8()?)?;
        ranges.push(MemoryRange::new(start, end, purpose));
    }
    if !c.finished() {
        return Err(WireError::Malformed("trailing bytes after hello ranges"));
    }
    Ok(WireMessage::Hello { page_size, ranges })
}

fn decode_page(payload: &[u8]) -> Result<WireMessage, WireError> {
    let mut c = Cursor::new(payload);
    let address = c.u64()?;
    let timestamp_ns = c.u64()?;
    Ok(WireMessage::Page {
        address,
        timestamp_ns,
        data: c.rest().to_vec(),
    })
}

fn decode_end(payload: &[u8]) -> Result<WireMessage, WireError> {
    let mut c = Cursor::new(payload);
    let page_count = c.u64()?;
    let digest: [u8; 32] = c.take(32)?.try_into().unwrap();
    if !c.finished() {
        return Err(WireError::Malformed("trailing bytes after end digest"));
    }
    Ok(WireMessage::End { page_count, digest })
}
