//! Agent/receiver integration over real loopback TCP.

use std::net::TcpListener;
use std::path::Path;
use std::time::Duration;

use uefo_core::acquire::{acquire, AcquireError, AcquireOptions};
use uefo_core::memory::{MemoryImage, MemoryMap, MemoryRange, Purpose, PAGE_SIZE};
use uefo_core::receive::{accept_one, atomicity_window, serve, DumpMetadata};

fn ram_map(pages: u64) -> MemoryMap {
    MemoryMap::new(vec![MemoryRange::new(
        0,
        pages * PAGE_SIZE - 1,
        Purpose::SystemRam,
    )])
    .unwrap()
}

fn loopback() -> (TcpListener, std::net::SocketAddr) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    (listener, addr)
}

#[test]
fn loopback_dump_is_byte_identical_to_source() {
    let dir = tempfile::tempdir().unwrap();
    let map = MemoryMap::new(vec![
        MemoryRange::new(0, 0x1f_ffff, Purpose::SystemRam),
        MemoryRange::new(0x20_0000, 0x20_ffff, Purpose::Reserved),
        MemoryRange::new(0x30_0000, 0x3f_ffff, Purpose::SystemRam),
    ])
    .unwrap();
    let image = MemoryImage::new(map, 42);
    let (listener, addr) = loopback();
    let out = dir.path().to_path_buf();
    let receiver = std::thread::spawn(move || accept_one(&listener, &out, "loop"));
    let summary = acquire(&image, addr, &AcquireOptions::default()).unwrap();
    let artifact = receiver.join().unwrap().unwrap();

    assert!(artifact.digest_verified);
    assert_eq!(summary.pages_sent, image.map().system_ram_pages());

    // Oracle: direct file compare against the flat dump of the source.
    let source_path = dir.path().join("source.raw");
    image.write_raw_dump(&source_path).unwrap();
    let received = std::fs::read(&artifact.raw_dump_path).unwrap();
    let source = std::fs::read(&source_path).unwrap();
    assert_eq!(received, source);

    let meta = DumpMetadata::load(&artifact.metadata_path).unwrap();
    assert_eq!(meta.pages_received, summary.pages_sent);
    assert_eq!(meta.digest, hex::encode(summary.digest));
    assert_eq!(
        atomicity_window(&artifact.metadata_path).unwrap(),
        artifact.atomicity_window_ns
    );
    assert_eq!(
        artifact.atomicity_window_ns,
        summary.last_ts_ns - summary.first_ts_ns
    );
}

#[test]
fn receiver_closing_early_yields_peer_closed() {
    // Enough data that the socket buffers cannot swallow the whole stream.
    let image = MemoryImage::new(ram_map(16 * 1024), 7); // 64 MiB
    let (listener, addr) = loopback();
    let receiver = std::thread::spawn(move || {
        let (mut stream, _) = listener.accept().unwrap();
        // Read a short prefix (the hello), then drop the connection.
        use std::io::Read;
        let mut prefix = [0u8; 128];
        let _ = stream.read(&mut prefix);
        drop(stream);
    });
    let err = acquire(&image, addr, &AcquireOptions::default()).unwrap_err();
    receiver.join().unwrap();
    assert!(matches!(err, AcquireError::PeerClosed), "got {err:?}");
}

#[test]
fn concurrent_sessions_are_isolated() {
    let dir = tempfile::tempdir().unwrap();
    let (listener, addr) = loopback();
    let out = dir.path().to_path_buf();
    let server = std::thread::spawn(move || serve(&listener, &out, "session", 2));

    let image_a = MemoryImage::new(ram_map(64), 1);
    let image_b = MemoryImage::new(ram_map(128), 2);
    let agent_a = std::thread::spawn(move || {
        acquire(
            &image_a,
            addr,
            &AcquireOptions {
                page_delay: Some(Duration::from_micros(50)),
                ..Default::default()
            },
        )
        .unwrap()
    });
    let agent_b =
        std::thread::spawn(move || acquire(&image_b, addr, &AcquireOptions::default()).unwrap());
    let summary_a = agent_a.join().unwrap();
    let summary_b = agent_b.join().unwrap();
    let results = server.join().unwrap();
    assert_eq!(results.len(), 2);
    let artifacts: Vec<_> = results.into_iter().map(|r| r.unwrap()).collect();
    assert!(artifacts.iter().all(|a| a.digest_verified));

    // Each dump matches exactly one of the two sources, matched by digest.
    let mut sizes: Vec<u64> = artifacts
        .iter()
        .map(|a| std::fs::metadata(&a.raw_dump_path).unwrap().len())
        .collect();
    sizes.sort_unstable();
    assert_eq!(sizes, vec![64 * PAGE_SIZE, 128 * PAGE_SIZE]);
    let digests: Vec<String> = artifacts
        .iter()
        .map(|a| DumpMetadata::load(&a.metadata_path).unwrap().digest)
        .collect();
    assert!(digests.contains(&hex::encode(summary_a.digest)));
    assert!(digests.contains(&hex::encode(summary_b.digest)));
}

#[test]
fn range_filtered_acquisition_zero_fills_the_rest() {
    let dir = tempfile::tempdir().unwrap();
    let image = MemoryImage::new(ram_map(8), 3);
    let (listener, addr) = loopback();
    let out = dir.path().to_path_buf();
    let receiver = std::thread::spawn(move || accept_one(&listener, &out, "partial"));
    let options = AcquireOptions {
        range_filter: Some((2 * PAGE_SIZE, 3 * PAGE_SIZE)),
        page_delay: None,
    };
    let summary = acquire(&image, addr, &options).unwrap();
    let artifact = receiver.join().unwrap().unwrap();
    assert_eq!(summary.pages_sent, 2);
    assert!(artifact.digest_verified);
    let received = std::fs::read(&artifact.raw_dump_path).unwrap();
    assert_eq!(received.len() as u64, image.map().top());
    let lo = (2 * PAGE_SIZE) as usize;
    let hi = (4 * PAGE_SIZE) as usize;
    assert_eq!(&received[lo..hi], &image.content()[lo..hi]);
    assert!(received[..lo].iter().all(|&b| b == 0));
    assert!(received[hi..].iter().all(|&b| b == 0));
}

#[test]
fn timestamps_are_nondecreasing_across_the_stream() {
    let dir = tempfile::tempdir().unwrap();
    let image = MemoryImage::new(ram_map(32), 4);
    let mut stream = Vec::new();
    uefo_core::acquire::stream_image(&image, &mut stream, &AcquireOptions::default()).unwrap();
    // Decode and check page timestamps directly from the captured stream.
    let mut offset = 0;
    let mut last_ts = 0u64;
    let mut pages = 0;
    while offset < stream.len() {
        let (msg, used) = uefo_core::wire::decode_message(&stream[offset..]).unwrap();
        offset += used;
        if let uefo_core::wire::WireMessage::Page { timestamp_ns, .. } = msg {
            assert!(timestamp_ns >= last_ts);
            last_ts = timestamp_ns;
            pages += 1;
        }
    }
    assert_eq!(pages, 32);
    // The same stream replays into the receiver.
    let artifact =
        uefo_core::receive::receive_session(stream.as_slice(), dir.path(), "replay").unwrap();
    assert!(artifact.digest_verified);
    assert!(Path::new(&artifact.raw_dump_path).exists());
}
