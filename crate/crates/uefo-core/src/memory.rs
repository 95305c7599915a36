//! Physical memory maps, memory images, and the firmware reboot footprint.
//!
//! A [`MemoryMap`] is an ordered set of page-aligned physical ranges, each
//! either [`Purpose::SystemRam`] or [`Purpose::Reserved`]. A [`MemoryImage`]
//! is the flat byte content of such a map (addresses `0..top`), with reserved
//! ranges and holes pinned to zero so dumps stay directly comparable by byte
//! offset. [`FootprintProfile`] models what a reboot does to RAM: a set of
//! overwritten regions plus an optional Bernoulli bit-flip decay.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Fixed page granularity of maps, images, the wire protocol, and diffs.
pub const PAGE_SIZE: u64 = 4096;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MemoryError {
    #[error("ranges {first} and {second} overlap")]
    OverlappingRanges { first: usize, second: usize },
    #[error("range {index} is not aligned to the {PAGE_SIZE}-byte page size")]
    UnalignedRange { index: usize },
    #[error("range {index} has start 0x{start:x} beyond end 0x{end:x}")]
    InvertedRange { index: usize, start: u64, end: u64 },
    #[error("memory map contains no system RAM range")]
    NoSystemRam,
    #[error("footprint region {index} does not lie inside a system RAM range")]
    RegionOutOfBounds { index: usize },
    #[error("address 0x{addr:x} is not page-aligned")]
    UnalignedAddress { addr: u64 },
    #[error("address 0x{addr:x} is outside the memory map (top 0x{top:x})")]
    OutOfBounds { addr: u64, top: u64 },
    #[error("raw dump length {actual} does not match map top {expected}")]
    LengthMismatch { expected: u64, actual: u64 },
    #[error("unsupported page size {0} (only {PAGE_SIZE} is supported)")]
    UnsupportedPageSize(u64),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for MemoryError {
    fn from(e: std::io::Error) -> Self {
        MemoryError::Io(e.to_string())
    }
}

/// What a physical range is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Purpose {
    SystemRam,
    Reserved,
}

/// A page-aligned physical address range with an inclusive end.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryRange {
    pub start: u64,
    /// Inclusive end address; `end + 1` is a page multiple.
    pub end: u64,
    pub purpose: Purpose,
}

impl MemoryRange {
    pub fn new(start: u64, end: u64, purpose: Purpose) -> Self {
        MemoryRange {
            start,
            end,
            purpose,
        }
    }

    /// Size in bytes; never zero for a validated range.
    pub fn byte_len(&self) -> u64 {
        self.end - self.start + 1
    }

    pub fn page_count(&self) -> u64 {
        self.byte_len() / PAGE_SIZE
    }

    pub fn contains(&self, addr: u64) -> bool {
        addr >= self.start && addr <= self.end
    }

    fn is_aligned(&self) -> bool {
        self.start.is_multiple_of(PAGE_SIZE) && self.end.wrapping_add(1).is_multiple_of(PAGE_SIZE)
    }
}

/// An ordered, pairwise-disjoint set of [`MemoryRange`]s.
///
/// Construction sorts ranges by start address and rejects maps violating the
/// invariants, so every held `MemoryMap` is valid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryMap {
    ranges: Vec<MemoryRange>,
}

impl MemoryMap {
    pub fn new(mut ranges: Vec<MemoryRange>) -> Result<Self, MemoryError> {
        ranges.sort_by_key(|r| r.start);
        validate_ranges(&ranges)?;
        Ok(MemoryMap { ranges })
    }

    /// The 2 GiB QEMU/OVMF-style fixture: 640 kiB of low RAM, the PCI hole,
    /// and one large RAM range up to 0x7fffffff.
    pub fn vm_2gib() -> Self {
        MemoryMap::new(vec![
            MemoryRange::new(0x0000_0000, 0x0009_ffff, Purpose::SystemRam),
            MemoryRange::new(0x000a_0000, 0x000b_ffff, Purpose::Reserved),
            MemoryRange::new(0x0010_0000, 0x7fff_ffff, Purpose::SystemRam),
        ])
        .expect("fixture map is valid")
    }

    pub fn page_size(&self) -> u64 {
        PAGE_SIZE
    }

    /// Highest `end + 1` across all ranges; the flat image length.
    pub fn top(&self) -> u64 {
        self.ranges.last().map_or(0, |r| r.end + 1)
    }

    pub fn ranges(&self) -> &[MemoryRange] {
        &self.ranges
    }

    pub fn system_ram(&self) -> impl Iterator<Item = &MemoryRange> {
        self.ranges
            .iter()
            .filter(|r| r.purpose == Purpose::SystemRam)
    }

    pub fn system_ram_pages(&self) -> u64 {
        self.system_ram().map(MemoryRange::page_count).sum()
    }

    pub fn range_containing(&self, addr: u64) -> Option<&MemoryRange> {
        self.ranges.iter().find(|r| r.contains(addr))
    }

    pub fn to_sidecar_json(&self) -> String {
        let sidecar = SidecarMap {
            page_size: PAGE_SIZE,
            ranges: self
                .ranges
                .iter()
                .map(|r| SidecarRange {
                    start: r.start,
                    end: r.end,
                    purpose: r.purpose,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&sidecar).expect("sidecar serializes")
    }

    pub fn from_sidecar_json(text: &str) -> Result<Self, MemoryError> {
        let sidecar: SidecarMap =
            serde_json::from_str(text).map_err(|e| MemoryError::Io(e.to_string()))?;
        if sidecar.page_size != PAGE_SIZE {
            return Err(MemoryError::UnsupportedPageSize(sidecar.page_size));
        }
        MemoryMap::new(
            sidecar
                .ranges
                .into_iter()
                .map(|r| MemoryRange::new(r.start, r.end, r.purpose))
                .collect(),
        )
    }

    pub fn save_sidecar(&self, path: &Path) -> Result<(), MemoryError> {
        fs::write(path, self.to_sidecar_json())?;
        Ok(())
    }

    pub fn load_sidecar(path: &Path) -> Result<Self, MemoryError> {
        let text = fs::read_to_string(path)?;
        MemoryMap::from_sidecar_json(&text)
    }
}

/// Checks the map invariants over ranges already sorted by start.
pub fn validate_ranges(ranges: &[MemoryRange]) -> Result<(), MemoryError> {
    for (i, r) in ranges.iter().enumerate() {
        if r.start > r.end {
            return Err(MemoryError::InvertedRange {
                index: i,
                start: r.start,
                end: r.end,
            });
        }
        if !r.is_aligned() {
            return Err(MemoryError::UnalignedRange { index: i });
        }
    }
    for i in 1..ranges.len() {
        if ranges[i].start <= ranges[i - 1].end {
            return Err(MemoryError::OverlappingRanges {
                first: i - 1,
                second: i,
            });
        }
    }
    if !ranges.iter().any(|r| r.purpose == Purpose::SystemRam) {
        return Err(MemoryError::NoSystemRam);
    }
    Ok(())
}

/// Sidecar map file schema: hex-string addresses, explicit page size.
#[derive(Serialize, Deserialize)]
struct SidecarMap {
    page_size: u64,
    ranges: Vec<SidecarRange>,
}

#[derive(Serialize, Deserialize)]
struct SidecarRange {
    #[serde(with = "hexaddr")]
    start: u64,
    #[serde(with = "hexaddr")]
    end: u64,
    purpose: Purpose,
}

/// Serde adapter for `u64` addresses as `"0x..."` strings.
pub mod hexaddr {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("0x{v:x}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let text = String::deserialize(d)?;
        let digits = text
            .strip_prefix("0x")
            .or_else(|| text.strip_prefix("0X"))
            .unwrap_or(&text);
        u64::from_str_radix(digits, 16).map_err(serde::de::Error::custom)
    }
}

/// How an overwritten footprint region is refilled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillMode {
    Zero,
    PseudoRandom { seed: u64 },
}

/// One contiguous region a reboot (or an acquisition tool) overwrites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverwriteRegion {
    #[serde(with = "hexaddr")]
    pub start: u64,
    #[serde(with = "hexaddr")]
    pub length: u64,
    pub fill: FillMode,
}

/// The memory effect of a firmware pass: overwritten regions plus an
/// optional independent per-bit decay probability for everything else.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FootprintProfile {
    pub regions: Vec<OverwriteRegion>,
    #[serde(default)]
    pub decay_bitflip_rate: f64,
}

impl FootprintProfile {
    pub fn empty() -> Self {
        FootprintProfile {
            regions: Vec::new(),
            decay_bitflip_rate: 0.0,
        }
    }

    /// Default reboot footprint for the 2 GiB fixture map: roughly 7 MiB
    /// zeroed low (starting at 16 MiB) plus ~17.5 MiB rewritten near the top
    /// of RAM. The extent is configuration, not ground truth.
    pub fn vm_2gib_reboot() -> Self {
        FootprintProfile {
            regions: vec![
                OverwriteRegion {
                    start: 0x0100_0000,
                    length: 7 * 1024 * 1024,
                    fill: FillMode::Zero,
                },
                OverwriteRegion {
                    start: 0x7ee0_0000,
                    length: 0x0118_0000,
                    fill: FillMode::PseudoRandom { seed: 0xF1F0 },
                },
            ],
            decay_bitflip_rate: 0.0,
        }
    }

    /// Total bytes covered by overwrite regions.
    pub fn overwrite_bytes(&self) -> u64 {
        self.regions.iter().map(|r| r.length).sum()
    }

    /// Page indices intersecting any overwrite region, ascending and deduped.
    pub fn touched_pages(&self) -> Vec<u64> {
        let mut pages: Vec<u64> = Vec::new();
        for r in &self.regions {
            if r.length == 0 {
                continue;
            }
            let first = r.start / PAGE_SIZE;
            let last = (r.start + r.length - 1) / PAGE_SIZE;
            pages.extend(first..=last);
        }
        pages.sort_unstable();
        pages.dedup();
        pages
    }

    pub fn validate_for(&self, map: &MemoryMap) -> Result<(), MemoryError> {
        for (i, r) in self.regions.iter().enumerate() {
            if r.length == 0 {
                continue;
            }
            let inside = map
                .system_ram()
                .any(|range| range.contains(r.start) && range.contains(r.start + r.length - 1));
            if !inside {
                return Err(MemoryError::RegionOutOfBounds { index: i });
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), MemoryError> {
        fs::write(
            path,
            serde_json::to_string_pretty(self).expect("profile serializes"),
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MemoryError> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| MemoryError::Io(e.to_string()))
    }
}

/// Flat byte content of a memory map, addresses `0..top`.
///
/// Immutable after construction: every operation returns a new image.
/// Reserved ranges and holes are always zero.
#[derive(Clone, PartialEq, Eq)]
pub struct MemoryImage {
    map: MemoryMap,
    content: Vec<u8>,
    provenance: String,
}

impl std::fmt::Debug for MemoryImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MemoryImage")
            .field("provenance", &self.provenance)
            .field("top", &self.map.top())
            .finish()
    }
}

impl MemoryImage {
    /// Simulates a machine with the OS running: every system RAM byte comes
    /// from a deterministic pseudorandom stream keyed by `seed`.
    pub fn new(map: MemoryMap, seed: u64) -> Self {
        let mut content = vec![0u8; map.top() as usize];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for range in map.system_ram() {
            rng.fill_bytes(&mut content[range.start as usize..=range.end as usize]);
        }
        MemoryImage {
            map,
            content,
            provenance: String::new(),
        }
    }

    pub fn zeroed(map: MemoryMap) -> Self {
        let content = vec![0u8; map.top() as usize];
        MemoryImage {
            map,
            content,
            provenance: String::new(),
        }
    }

    pub fn with_provenance(mut self, label: &str) -> Self {
        self.provenance = label.to_string();
        self
    }

    pub fn map(&self) -> &MemoryMap {
        &self.map
    }

    pub fn content(&self) -> &[u8] {
        &self.content
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn read_page(&self, addr: u64) -> Result<&[u8], MemoryError> {
        if !addr.is_multiple_of(PAGE_SIZE) {
            return Err(MemoryError::UnalignedAddress { addr });
        }
        if addr >= self.map.top() {
            return Err(MemoryError::OutOfBounds {
                addr,
                top: self.map.top(),
            });
        }
        let start = addr as usize;
        Ok(&self.content[start..start + PAGE_SIZE as usize])
    }

    /// Applies a footprint: overwrite regions are refilled per their fill
    /// mode, then every remaining system RAM bit flips independently with
    /// `decay_bitflip_rate`. Deterministic given `seed`.
    pub fn apply_footprint(
        &self,
        profile: &FootprintProfile,
        seed: u64,
    ) -> Result<MemoryImage, MemoryError> {
        profile.validate_for(&self.map)?;
        let mut content = self.content.clone();
        for region in &profile.regions {
            if region.length == 0 {
                continue;
            }
            let span = &mut content[region.start as usize..(region.start + region.length) as usize];
            match region.fill {
                FillMode::Zero => span.fill(0),
                FillMode::PseudoRandom { seed } => ChaCha8Rng::seed_from_u64(seed).fill_bytes(span),
            }
        }
        if profile.decay_bitflip_rate > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for (start, len) in decay_intervals(&self.map, profile) {
                decay_bits(
                    &mut content[start as usize..(start + len) as usize],
                    profile.decay_bitflip_rate,
                    &mut rng,
                );
            }
        }
        Ok(MemoryImage {
            map: self.map.clone(),
            content,
            provenance: self.provenance.clone(),
        })
    }

    /// Writes the flat byte-for-byte dump file (length = `map.top`).
    pub fn write_raw_dump(&self, path: &Path) -> Result<(), MemoryError> {
        let mut file = std::io::BufWriter::new(fs::File::create(path)?);
        file.write_all(&self.content)?;
        file.flush()?;
        Ok(())
    }

    /// Loads a flat dump file against a map. The file length must equal
    /// `map.top`; reserved ranges and holes are forced back to zero so the
    /// image invariant holds for foreign files too.
    pub fn load_raw_dump(path: &Path, map: MemoryMap) -> Result<MemoryImage, MemoryError> {
        let meta = fs::metadata(path)?;
        if meta.len() != map.top() {
            return Err(MemoryError::LengthMismatch {
                expected: map.top(),
                actual: meta.len(),
            });
        }
        let mut content = fs::read(path)?;
        let mut pos = 0u64;
        for range in map.ranges() {
            if range.start > pos {
                content[pos as usize..range.start as usize].fill(0);
            }
            if range.purpose == Purpose::Reserved {
                content[range.start as usize..=range.end as usize].fill(0);
            }
            pos = range.end + 1;
        }
        let provenance = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(MemoryImage {
            map,
            content,
            provenance,
        })
    }
}

/// System RAM intervals minus the profile's overwrite regions, as
/// `(start, len)` pairs in ascending address order.
fn decay_intervals(map: &MemoryMap, profile: &FootprintProfile) -> Vec<(u64, u64)> {
    let mut cuts: Vec<(u64, u64)> = profile
        .regions
        .iter()
        .filter(|r| r.length > 0)
        .map(|r| (r.start, r.start + r.length))
        .collect();
    cuts.sort_unstable();
    let mut out = Vec::new();
    for range in map.system_ram() {
        let mut pos = range.start;
        let end = range.end + 1;
        for &(c_start, c_end) in &cuts {
            if c_end <= pos || c_start >= end {
                continue;
            }
            if c_start > pos {
                out.push((pos, c_start - pos));
            }
            pos = pos.max(c_end);
        }
        if pos < end {
            out.push((pos, end - pos));
        }
    }
    out
}

/// Flips each bit of `bytes` independently with probability `rate`, using
/// geometric gap sampling so sparse rates stay cheap.
fn decay_bits(bytes: &mut [u8], rate: f64, rng: &mut ChaCha8Rng) {
    if rate >= 1.0 {
        for b in bytes.iter_mut() {
            *b = !*b;
        }
        return;
    }
    let nbits = bytes.len() as u64 * 8;
    let log_q = (1.0 - rate).ln();
    let mut bit = geometric_gap(rng, log_q);
    while bit < nbits {
        bytes[(bit / 8) as usize] ^= 1 << (bit % 8);
        bit = bit
            .saturating_add(1)
            .saturating_add(geometric_gap(rng, log_q));
    }
}

/// Number of Bernoulli failures before the next success, sampled by
/// inversion: floor(ln(1-U) / ln(1-p)).
fn geometric_gap(rng: &mut ChaCha8Rng, log_q: f64) -> u64 {
    let u: f64 = rand::Rng::random(rng);
    let gap = (1.0 - u).ln() / log_q;
    if gap >= u64::MAX as f64 {
        u64::MAX
    } else {
        gap as u64
    }
}
