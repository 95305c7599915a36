//! Acquisition agent: streams a memory image page-wise to a receiver.
//!
//! The agent sends one `Hello` announcing the memory map, then one `Page`
//! per system RAM page in strictly ascending address order (each stamped
//! with a fresh monotonic timestamp), then an `End` frame carrying the
//! SHA-256 digest over all page data in send order.

use std::io::{BufWriter, ErrorKind, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::memory::{MemoryImage, PAGE_SIZE};
use crate::wire::{encode_message, WireMessage, KIND_END, KIND_PAGE};

#[derive(Debug, Error)]
pub enum AcquireError {
    #[error("could not connect to receiver: {0}")]
    ConnectionFailed(std::io::Error),
    #[error("receiver closed the connection mid-stream")]
    PeerClosed,
    #[error("i/o error during acquisition: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default)]
pub struct AcquireOptions {
    /// Only pages whose address lies in `[start, end]` are sent.
    pub range_filter: Option<(u64, u64)>,
    /// Optional delay inserted after every page, for rate-limited runs.
    pub page_delay: Option<Duration>,
}

/// What the agent saw: page/byte counters, the first and last page
/// timestamps (the atomicity window endpoints), and the stream digest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AcquisitionSummary {
    pub pages_sent: u64,
    pub bytes_sent: u64,
    pub first_ts_ns: u64,
    pub last_ts_ns: u64,
    pub digest: [u8; 32],
}

/// Process-wide monotonic clock in nanoseconds.
pub fn monotonic_ns() -> u64 {
    static START: OnceLock<Instant> = OnceLock::new();
    START.get_or_init(Instant::now).elapsed().as_nanos() as u64
}

/// Connects to `endpoint` and streams `image` over TCP.
pub fn acquire<A: ToSocketAddrs>(
    image: &MemoryImage,
    endpoint: A,
    options: &AcquireOptions,
) -> Result<AcquisitionSummary, AcquireError> {
    let stream = TcpStream::connect(endpoint).map_err(AcquireError::ConnectionFailed)?;
    let mut writer = BufWriter::with_capacity(1 << 20, stream);
    let summary = stream_image(image, &mut writer, options)?;
    writer.flush().map_err(map_io)?;
    Ok(summary)
}

/// The transport-agnostic agent: writes the full frame sequence to `w`.
pub fn stream_image<W: Write>(
    image: &MemoryImage,
    w: &mut W,
    options: &AcquireOptions,
) -> Result<AcquisitionSummary, AcquireError> {
    let map = image.map();
    let hello = WireMessage::Hello {
        page_size: PAGE_SIZE as u32,
        ranges: map.ranges().to_vec(),
    };
    w.write_all(&encode_message(&hello).expect("hello frame encodes"))
        .map_err(map_io)?;

    let mut hasher = Sha256::new();
    let mut pages_sent = 0u64;
    let mut first_ts_ns = 0u64;
    let mut last_ts_ns = 0u64;
    let mut header = [0u8; 21];
    header[0] = KIND_PAGE;
    header[1..5].copy_from_slice(&((16 + PAGE_SIZE) as u32).to_le_bytes());

    for range in map.system_ram() {
        let mut addr = range.start;
        while addr <= range.end {
            if let Some((lo, hi)) = options.range_filter {
                if addr < lo || addr > hi {
                    addr += PAGE_SIZE;
                    continue;
                }
            }
            let data = &image.content()[addr as usize..(addr + PAGE_SIZE) as usize];
            let ts = monotonic_ns();
            header[5..13].copy_from_slice(&addr.to_le_bytes());
            header[13..21].copy_from_slice(&ts.to_le_bytes());
            w.write_all(&header).map_err(map_io)?;
            w.write_all(data).map_err(map_io)?;
            hasher.update(data);
            if pages_sent == 0 {
                first_ts_ns = ts;
            }
            last_ts_ns = ts;
            pages_sent += 1;
            if let Some(delay) = options.page_delay {
                std::thread::sleep(delay);
            }
            addr += PAGE_SIZE;
        }
    }

    let digest: [u8; 32] = hasher.finalize().into();
    let mut end = [0u8; 5 + 40];
    end[0] = KIND_END;
    end[1..5].copy_from_slice(&40u32.to_le_bytes());
    end[5..13].copy_from_slice(&pages_sent.to_le_bytes());
    end[13..45].copy_from_slice(&digest);
    w.write_all(&end).map_err(map_io)?;
    w.flush().map_err(map_io)?;

    Ok(AcquisitionSummary {
        pages_sent,
        bytes_sent: pages_sent * PAGE_SIZE,
        first_ts_ns,
        last_ts_ns,
        digest,
    })
}

fn map_io(e: std::io::Error) -> AcquireError {
    match e.kind() {
        ErrorKind::BrokenPipe
        | ErrorKind::ConnectionReset
        | ErrorKind::ConnectionAborted
        | ErrorKind::UnexpectedEof => AcquireError::PeerClosed,
        _ => AcquireError::Io(e),
    }
}
