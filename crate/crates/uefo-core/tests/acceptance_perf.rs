//! Performance acceptance: the full-size dump diff must finish under 30 s
//! with bounded resident memory. Kept in its own test binary so the
//! process-wide memory high-water mark reflects the diff alone; the input
//! files are generated with streaming writes for the same reason.
//!
//! ```text
//! cargo test -p uefo-core --test acceptance_perf
//! ```

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use uefo_core::diff::diff_files;

const DUMP_LEN: u64 = 2 * 1024 * 1024 * 1024; // 2 GiB
const GEN_CHUNK: usize = 4 * 1024 * 1024;

/// Streams a pseudorandom dump to disk without holding it in memory,
/// flipping one byte every `mutate_every` bytes when nonzero.
fn write_dump(path: &Path, seed: u64, mutate_every: u64) -> std::io::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut writer = BufWriter::with_capacity(GEN_CHUNK, File::create(path)?);
    let mut buf = vec![0u8; GEN_CHUNK];
    let mut written = 0u64;
    while written < DUMP_LEN {
        let take = ((DUMP_LEN - written) as usize).min(GEN_CHUNK);
        rng.fill_bytes(&mut buf[..take]);
        if mutate_every > 0 {
            // Flip the bytes at absolute positions k * mutate_every, k >= 1.
            let mut pos = written.div_ceil(mutate_every).max(1) * mutate_every;
            while pos < written + take as u64 {
                buf[(pos - written) as usize] ^= 0xff;
                pos += mutate_every;
            }
        }
        writer.write_all(&buf[..take])?;
        written += take as u64;
    }
    writer.flush()
}

/// Peak resident set size of this process, in KiB.
fn resident_high_water_kib() -> u64 {
    let mut usage: libc::rusage = unsafe { std::mem::zeroed() };
    let rc = unsafe { libc::getrusage(libc::RUSAGE_SELF, &mut usage) };
    assert_eq!(rc, 0, "getrusage failed");
    usage.ru_maxrss as u64
}

#[test]
fn criterion_full_size_diff_time_and_memory() {
    let dir = tempfile::tempdir_in(env!("CARGO_TARGET_TMPDIR")).unwrap();
    let path_a = dir.path().join("a.raw");
    let path_b = dir.path().join("b.raw");
    // Same stream with a sparse sprinkling of differences in b.
    write_dump(&path_a, 6, 0).unwrap();
    write_dump(&path_b, 6, 9_137_131).unwrap();

    let started = Instant::now();
    let report = diff_files(&path_a, &path_b, "a", "b").unwrap();
    let elapsed = started.elapsed();

    let expected_diffs = (DUMP_LEN - 1) / 9_137_131;
    assert_eq!(report.total_bytes_differing, expected_diffs);
    assert_eq!(report.total_pages_differing, expected_diffs);
    assert_eq!(report.total_bytes, DUMP_LEN);

    assert!(
        elapsed < Duration::from_secs(30),
        "full-size diff took {elapsed:?} (budget 30 s)"
    );
    let peak_kib = resident_high_water_kib();
    assert!(
        peak_kib < 256 * 1024,
        "resident high-water mark {peak_kib} KiB exceeds the 256 MiB budget"
    );
    println!("full-size diff: {elapsed:?}, peak resident {peak_kib} KiB");
}
