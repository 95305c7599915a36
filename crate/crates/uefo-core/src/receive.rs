//! Acquisition receiver: reconstructs a flat raw dump from the page stream.
//!
//! Each session writes `<name>.raw` (length = highest announced `end + 1`,
//! non-received bytes zero) and `<name>.meta.json` with the announced map,
//! the first/last page timestamps, and the digest verdict. A digest mismatch
//! is recorded as evidence (`digest_verified = false`), not raised as an
//! error; protocol violations (out-of-order or non-announced addresses,
//! malformed frames) abort the session.

use std::fs::{self, File};
use std::io::{BufWriter, ErrorKind, Read, Seek, SeekFrom, Write};
use std::net::{TcpListener, ToSocketAddrs};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::memory::{hexaddr, MemoryMap, Purpose};
use crate::wire::{decode_payload, WireError, WireMessage, FRAME_HEADER_LEN, MAX_PAYLOAD_LEN};

#[derive(Debug, Error)]
pub enum ReceiveError {
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("dump metadata not found or incomplete: {0}")]
    MissingMetadata(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<WireError> for ReceiveError {
    fn from(e: WireError) -> Self {
        ReceiveError::ProtocolViolation(e.to_string())
    }
}

/// The files a completed session produced, plus the integrity verdict.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DumpArtifact {
    pub raw_dump_path: PathBuf,
    pub metadata_path: PathBuf,
    pub atomicity_window_ns: u64,
    pub digest_verified: bool,
}

/// Sidecar metadata written next to every received dump.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DumpMetadata {
    pub page_size: u64,
    pub ranges: Vec<MetaRange>,
    pub pages_received: u64,
    pub first_ts_ns: Option<u64>,
    pub last_ts_ns: Option<u64>,
    /// Hex SHA-256 over the received page data in arrival order.
    pub digest: String,
    pub digest_verified: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetaRange {
    #[serde(with = "hexaddr")]
    pub start: u64,
    #[serde(with = "hexaddr")]
    pub end: u64,
    pub purpose: Purpose,
}

impl DumpMetadata {
    pub fn load(path: &Path) -> Result<Self, ReceiveError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ReceiveError::MissingMetadata(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| ReceiveError::MissingMetadata(format!("{}: {e}", path.display())))
    }
}

/// Time between the first and last acquired page, per the dump metadata.
pub fn atomicity_window(metadata_path: &Path) -> Result<u64, ReceiveError> {
    let meta = DumpMetadata::load(metadata_path)?;
    match (meta.first_ts_ns, meta.last_ts_ns) {
        (Some(first), Some(last)) => Ok(last.saturating_sub(first)),
        _ => Err(ReceiveError::MissingMetadata(
            "metadata has no page timestamps".to_string(),
        )),
    }
}

/// Binds `listen`, accepts a single session, and reconstructs its dump.
pub fn receive<A: ToSocketAddrs>(
    listen: A,
    out_dir: &Path,
    name: &str,
) -> Result<DumpArtifact, ReceiveError> {
    let listener = TcpListener::bind(listen)?;
    accept_one(&listener, out_dir, name)
}

/// Accepts one connection from an already-bound listener.
pub fn accept_one(
    listener: &TcpListener,
    out_dir: &Path,
    name: &str,
) -> Result<DumpArtifact, ReceiveError> {
    let (stream, _) = listener.accept()?;
    receive_session(stream, out_dir, name)
}

/// Serves `sessions` connections, one thread per session, each isolated in
/// its own output files (`base`, `base-1`, `base-2`, ...).
pub fn serve(
    listener: &TcpListener,
    out_dir: &Path,
    base_name: &str,
    sessions: usize,
) -> Vec<Result<DumpArtifact, ReceiveError>> {
    let mut handles = Vec::new();
    for i in 0..sessions {
        match listener.accept() {
            Ok((stream, _)) => {
                let name = if i == 0 {
                    base_name.to_string()
                } else {
                    format!("{base_name}-{i}")
                };
                let dir = out_dir.to_path_buf();
                handles.push(std::thread::spawn(move || {
                    receive_session(stream, &dir, &name)
                }));
            }
            Err(e) => return vec![Err(ReceiveError::Io(e))],
        }
    }
    handles
        .into_iter()
        .map(|h| {
            h.join().unwrap_or_else(|_| {
                Err(ReceiveError::ProtocolViolation(
                    "session thread panicked".to_string(),
                ))
            })
        })
        .collect()
}

/// Reconstructs one dump from a raw frame stream.
pub fn receive_session<R: Read>(
    mut stream: R,
    out_dir: &Path,
    name: &str,
) -> Result<DumpArtifact, ReceiveError> {
    fs::create_dir_all(out_dir)?;
    let raw_path = out_dir.join(format!("{name}.raw"));
    let meta_path = out_dir.join(format!("{name}.meta.json"));

    let hello = read_frame(&mut stream)?
        .ok_or_else(|| ReceiveError::ProtocolViolation("stream ended before hello".into()))?;
    let (page_size, ranges) = match hello {
        WireMessage::Hello { page_size, ranges } => (page_size as u64, ranges),
        _ => {
            return Err(ReceiveError::ProtocolViolation(
                "first frame was not hello".into(),
            ))
        }
    };
    let map = MemoryMap::new(ranges.clone())
        .map_err(|e| ReceiveError::ProtocolViolation(format!("announced map invalid: {e}")))?;
    let top = map.top();

    let file = File::create(&raw_path)?;
    file.set_len(top)?;
    let mut writer = DumpWriter::new(file);

    let mut hasher = Sha256::new();
    let mut pages_received = 0u64;
    let mut first_ts_ns = None;
    let mut last_ts_ns = None;
    let mut last_addr: Option<u64> = None;
    let announced_digest;

    loop {
        let frame = read_frame(&mut stream)?.ok_or_else(|| {
            ReceiveError::ProtocolViolation("stream ended before end-of-dump frame".into())
        })?;
        match frame {
            WireMessage::Page {
                address,
                timestamp_ns,
                data,
            } => {
                if data.len() as u64 != page_size {
                    return Err(ReceiveError::ProtocolViolation(format!(
                        "page 0x{address:x} carries {} bytes, expected {page_size}",
                        data.len()
                    )));
                }
                if address % page_size != 0 {
                    return Err(ReceiveError::ProtocolViolation(format!(
                        "page address 0x{address:x} is not aligned"
                    )));
                }
                if let Some(prev) = last_addr {
                    if address <= prev {
                        return Err(ReceiveError::ProtocolViolation(format!(
                            "page address 0x{address:x} not above previous 0x{prev:x}"
                        )));
                    }
                }
                let announced = map.range_containing(address).map(|r| r.purpose);
                if announced != Some(Purpose::SystemRam)
                    || map
                        .range_containing(address + page_size - 1)
                        .map(|r| r.purpose)
                        != Some(Purpose::SystemRam)
                {
                    return Err(ReceiveError::ProtocolViolation(format!(
                        "page address 0x{address:x} is not inside an announced system RAM range"
                    )));
                }
                writer.write_at(address, &data)?;
                hasher.update(&data);
                if first_ts_ns.is_none() {
                    first_ts_ns = Some(timestamp_ns);
                }
                last_ts_ns = Some(timestamp_ns);
                last_addr = Some(address);
                pages_received += 1;
            }
            WireMessage::End { page_count, digest } => {
                if page_count != pages_received {
                    return Err(ReceiveError::ProtocolViolation(format!(
                        "end frame announces {page_count} pages, received {pages_received}"
                    )));
                }
                announced_digest = digest;
                break;
            }
            WireMessage::Hello { .. } => {
                return Err(ReceiveError::ProtocolViolation(
                    "duplicate hello frame".into(),
                ));
            }
        }
    }
    writer.finish()?;

    let computed: [u8; 32] = hasher.finalize().into();
    let digest_verified = computed == announced_digest;

    let metadata = DumpMetadata {
        page_size,
        ranges: ranges
            .iter()
            .map(|r| MetaRange {
                start: r.start,
                end: r.end,
                purpose: r.purpose,
            })
            .collect(),
        pages_received,
        first_ts_ns,
        last_ts_ns,
        digest: hex::encode(computed),
        digest_verified,
    };
    fs::write(
        &meta_path,
        serde_json::to_string_pretty(&metadata).expect("metadata serializes"),
    )?;

    Ok(DumpArtifact {
        raw_dump_path: raw_path,
        metadata_path: meta_path,
        atomicity_window_ns: last_ts_ns
            .unwrap_or(0)
            .saturating_sub(first_ts_ns.unwrap_or(0)),
        digest_verified,
    })
}

/// Sequential dump writer that buffers contiguous pages and seeks over gaps.
struct DumpWriter {
    inner: BufWriter<File>,
    pos: u64,
}

impl DumpWriter {
    fn new(file: File) -> Self {
        DumpWriter {
            inner: BufWriter::with_capacity(1 << 20, file),
            pos: 0,
        }
    }

    fn write_at(&mut self, addr: u64, data: &[u8]) -> std::io::Result<()> {
        if addr != self.pos {
            self.inner.flush()?;
            self.inner.get_mut().seek(SeekFrom::Start(addr))?;
            self.pos = addr;
        }
        self.inner.write_all(data)?;
        self.pos += data.len() as u64;
        Ok(())
    }

    fn finish(mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

/// Reads one frame; `Ok(None)` on clean EOF at a frame boundary.
fn read_frame<R: Read>(stream: &mut R) -> Result<Option<WireMessage>, ReceiveError> {
    let mut header = [0u8; FRAME_HEADER_LEN];
    match stream.read_exact(&mut header) {
        Ok(()) => {}
        Err(e) if e.kind() == ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(ReceiveError::Io(e)),
    }
    let kind = header[0];
    let payload_len = u32::from_le_bytes(header[1..5].try_into().unwrap());
    if payload_len > MAX_PAYLOAD_LEN {
        return Err(WireError::LengthOverflow(payload_len).into());
    }
    let mut payload = vec![0u8; payload_len as usize];
    stream.read_exact(&mut payload).map_err(|e| {
        if e.kind() == ErrorKind::UnexpectedEof {
            ReceiveError::ProtocolViolation("frame truncated mid-payload".to_string())
        } else {
            ReceiveError::Io(e)
        }
    })?;
    Ok(Some(decode_payload(kind, &payload)?))
}
