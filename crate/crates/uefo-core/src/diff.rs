//! Byte- and page-wise dump differencing.
//!
//! A page differs when at least one of its bytes differs. Reports carry the
//! differing page count, differing byte count, the proportion of total
//! memory changed, and a per-page bitmap for rendering. File comparison is
//! streamed in chunks (bounded memory) and may fan out across threads; the
//! resulting report is byte-identical regardless of parallelism.

use std::fs::File;
use std::os::unix::fs::FileExt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::{MemoryImage, PAGE_SIZE};

/// Pages per streamed comparison chunk (1 MiB of data per file).
const CHUNK_PAGES: u64 = 256;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("input lengths differ: {len_a} vs {len_b}")]
    LengthMismatch { len_a: u64, len_b: u64 },
    #[error("need at least two dumps, got {0}")]
    NotEnoughDumps(usize),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// One bit per page; bit set means the page differs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PageBitmap {
    words: Vec<u64>,
    pages: u64,
}

impl PageBitmap {
    pub fn new(pages: u64) -> Self {
        PageBitmap {
            words: vec![0; pages.div_ceil(64) as usize],
            pages,
        }
    }

    pub fn len(&self) -> u64 {
        self.pages
    }

    pub fn is_empty(&self) -> bool {
        self.pages == 0
    }

    pub fn set(&mut self, page: u64) {
        debug_assert!(page < self.pages);
        self.words[(page / 64) as usize] |= 1 << (page % 64);
    }

    pub fn get(&self, page: u64) -> bool {
        if page >= self.pages {
            return false;
        }
        self.words[(page / 64) as usize] & (1 << (page % 64)) != 0
    }

    pub fn count_ones(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }

    pub fn iter_set(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.pages).filter(|&p| self.get(p))
    }
}

/// Metrics for one pair of dumps.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffReport {
    pub dump_a: String,
    pub dump_b: String,
    pub total_pages_differing: u64,
    pub total_bytes_differing: u64,
    /// `total_bytes_differing / total_bytes`.
    pub proportion: f64,
    pub total_bytes: u64,
    pub page_bitmap: PageBitmap,
}

/// JSON shape of one report row: `{a, b, pages, bytes, proportion}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub a: String,
    pub b: String,
    pub pages: u64,
    pub bytes: u64,
    pub proportion: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportSet {
    pub pairs: Vec<ReportRow>,
}

impl DiffReport {
    pub fn to_row(&self) -> ReportRow {
        ReportRow {
            a: self.dump_a.clone(),
            b: self.dump_b.clone(),
            pages: self.total_pages_differing,
            bytes: self.total_bytes_differing,
            proportion: self.proportion,
        }
    }
}

pub fn report_set(reports: &[DiffReport]) -> ReportSet {
    ReportSet {
        pairs: reports.iter().map(DiffReport::to_row).collect(),
    }
}

struct ChunkDiff {
    bytes: u64,
    /// Page indices relative to the chunk's first page.
    pages: Vec<u32>,
}

fn compare_chunk(a: &[u8], b: &[u8]) -> ChunkDiff {
    debug_assert_eq!(a.len(), b.len());
    let mut diff = ChunkDiff {
        bytes: 0,
        pages: Vec::new(),
    };
    let page = PAGE_SIZE as usize;
    let mut offset = 0;
    let mut local_page = 0u32;
    while offset < a.len() {
        let hi = (offset + page).min(a.len());
        let (pa, pb) = (&a[offset..hi], &b[offset..hi]);
        if pa != pb {
            diff.pages.push(local_page);
            diff.bytes += pa.iter().zip(pb).filter(|(x, y)| x != y).count() as u64;
        }
        offset = hi;
        local_page += 1;
    }
    diff
}

fn assemble(label_a: &str, label_b: &str, total_bytes: u64, chunks: Vec<ChunkDiff>) -> DiffReport {
    let total_pages = total_bytes.div_ceil(PAGE_SIZE);
    let mut bitmap = PageBitmap::new(total_pages);
    let mut bytes = 0u64;
    for (idx, chunk) in chunks.iter().enumerate() {
        let first_page = idx as u64 * CHUNK_PAGES;
        bytes += chunk.bytes;
        for &p in &chunk.pages {
            bitmap.set(first_page + p as u64);
        }
    }
    let pages = bitmap.count_ones();
    DiffReport {
        dump_a: label_a.to_string(),
        dump_b: label_b.to_string(),
        total_pages_differing: pages,
        total_bytes_differing: bytes,
        proportion: if total_bytes == 0 {
            0.0
        } else {
            bytes as f64 / total_bytes as f64
        },
        total_bytes,
        page_bitmap: bitmap,
    }
}

/// Compares two in-memory buffers.
pub fn diff_slices(
    a: &[u8],
    b: &[u8],
    label_a: &str,
    label_b: &str,
) -> Result<DiffReport, DiffError> {
    if a.len() != b.len() {
        return Err(DiffError::LengthMismatch {
            len_a: a.len() as u64,
            len_b: b.len() as u64,
        });
    }
    let chunk_bytes = (CHUNK_PAGES * PAGE_SIZE) as usize;
    let chunks: Vec<ChunkDiff> = if a.is_empty() {
        Vec::new()
    } else {
        a.par_chunks(chunk_bytes)
            .zip(b.par_chunks(chunk_bytes))
            .map(|(ca, cb)| compare_chunk(ca, cb))
            .collect()
    };
    Ok(assemble(label_a, label_b, a.len() as u64, chunks))
}

/// Compares two images, labelled by their provenance.
pub fn diff_images(a: &MemoryImage, b: &MemoryImage) -> Result<DiffReport, DiffError> {
    diff_slices(a.content(), b.content(), a.provenance(), b.provenance())
}

/// Streamed comparison of two equally-sized files.
pub fn diff_files(
    path_a: &Path,
    path_b: &Path,
    label_a: &str,
    label_b: &str,
) -> Result<DiffReport, DiffError> {
    let file_a = File::open(path_a)?;
    let file_b = File::open(path_b)?;
    let len_a = file_a.metadata()?.len();
    let len_b = file_b.metadata()?.len();
    if len_a != len_b {
        return Err(DiffError::LengthMismatch { len_a, len_b });
    }
    let chunk_bytes = CHUNK_PAGES * PAGE_SIZE;
    let chunk_count = len_a.div_ceil(chunk_bytes);
    let chunks: Vec<ChunkDiff> = (0..chunk_count)
        .into_par_iter()
        .map_init(
            || {
                (
                    vec![0u8; chunk_bytes as usize],
                    vec![0u8; chunk_bytes as usize],
                )
            },
            |(buf_a, buf_b), idx| {
                let offset = idx * chunk_bytes;
                let take = (len_a - offset).min(chunk_bytes) as usize;
                file_a.read_exact_at(&mut buf_a[..take], offset)?;
                file_b.read_exact_at(&mut buf_b[..take], offset)?;
                Ok(compare_chunk(&buf_a[..take], &buf_b[..take]))
            },
        )
        .collect::<Result<_, std::io::Error>>()?;
    Ok(assemble(label_a, label_b, len_a, chunks))
}

/// Reports for every unordered pair, in index order:
/// `(0,1), (0,2), ..., (0,n-1), (1,2), ...`.
pub fn pairwise_files(
    dumps: &[(String, std::path::PathBuf)],
) -> Result<Vec<DiffReport>, DiffError> {
    if dumps.len() < 2 {
        return Err(DiffError::NotEnoughDumps(dumps.len()));
    }
    let mut reports = Vec::new();
    for i in 0..dumps.len() {
        for j in i + 1..dumps.len() {
            reports.push(diff_files(
                &dumps[i].1,
                &dumps[j].1,
                &dumps[i].0,
                &dumps[j].0,
            )?);
        }
    }
    Ok(reports)
}

pub fn pairwise_images(images: &[&MemoryImage]) -> Result<Vec<DiffReport>, DiffError> {
    if images.len() < 2 {
        return Err(DiffError::NotEnoughDumps(images.len()));
    }
    let mut reports = Vec::new();
    for i in 0..images.len() {
        for j in i + 1..images.len() {
            reports.push(diff_images(images[i], images[j])?);
        }
    }
    Ok(reports)
}

/// Rounds to one decimal, half away from zero.
fn round1(v: f64) -> f64 {
    (v * 10.0 + 0.5).floor() / 10.0
}

pub fn format_mib(bytes: u64) -> String {
    format!("{:.1} MiB", round1(bytes as f64 / (1024.0 * 1024.0)))
}

pub fn format_percent(proportion: f64) -> String {
    format!("{:.1} %", round1(proportion * 100.0))
}

/// Renders reports as an aligned table:
/// index, labels, differing pages, differing size in MiB, proportion.
pub fn format_table(reports: &[DiffReport]) -> String {
    let mut rows: Vec<[String; 6]> = vec![[
        "#".into(),
        "Dump 1".into(),
        "Dump 2".into(),
        "Total Pages".into(),
        "Total Size".into(),
        "Proportion".into(),
    ]];
    for (i, r) in reports.iter().enumerate() {
        rows.push([
            (i + 1).to_string(),
            r.dump_a.clone(),
            r.dump_b.clone(),
            r.total_pages_differing.to_string(),
            format_mib(r.total_bytes_differing),
            format_percent(r.proportion),
        ]);
    }
    let widths: Vec<usize> = (0..6)
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &rows {
        for (c, cell) in row.iter().enumerate() {
            if c > 0 {
                out.push_str("  ");
            }
            if c == 1 || c == 2 {
                out.push_str(&format!("{:<width$}", cell, width = widths[c]));
            } else {
                out.push_str(&format!("{:>width$}", cell, width = widths[c]));
            }
        }
        while out.ends_with(' ') {
            out.pop();
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::{MemoryMap, MemoryRange, Purpose};

    /// Naive reference comparator used as the oracle for metric checks.
    fn naive_diff(a: &[u8], b: &[u8]) -> (u64, u64, Vec<u64>) {
        assert_eq!(a.len(), b.len());
        let mut bytes = 0u64;
        let mut pages = Vec::new();
        for page in 0..(a.len() as u64).div_ceil(PAGE_SIZE) {
            let lo = (page * PAGE_SIZE) as usize;
            let hi = (lo + PAGE_SIZE as usize).min(a.len());
            let n = a[lo..hi]
                .iter()
                .zip(&b[lo..hi])
                .filter(|(x, y)| x != y)
                .count() as u64;
            if n > 0 {
                pages.push(page);
                bytes += n;
            }
        }
        (pages.len() as u64, bytes, pages)
    }

    #[test]
    fn identical_inputs_yield_zero_report() {
        let a = vec![7u8; 8192];
        let report = diff_slices(&a, &a, "x", "x").unwrap();
        assert_eq!(report.total_pages_differing, 0);
        assert_eq!(report.total_bytes_differing, 0);
        assert_eq!(report.proportion, 0.0);
    }

    #[test]
    fn three_flipped_bytes_in_two_pages() {
        // 64-page images; bytes flipped in pages 2 (twice) and 7.
        let a = vec![0u8; 64 * PAGE_SIZE as usize];
        let mut b = a.clone();
        b[2 * 4096 + 10] ^= 1;
        b[2 * 4096 + 999] ^= 1;
        b[7 * 4096] ^= 1;
        let report = diff_slices(&a, &b, "a", "b").unwrap();
        let (pages, bytes, page_list) = naive_diff(&a, &b);
        assert_eq!(report.total_pages_differing, pages);
        assert_eq!(report.total_pages_differing, 2);
        assert_eq!(report.total_bytes_differing, bytes);
        assert_eq!(report.total_bytes_differing, 3);
        assert_eq!(report.page_bitmap.iter_set().collect::<Vec<_>>(), page_list);
    }

    #[test]
    fn length_mismatch_rejected() {
        let err = diff_slices(&[0u8; 10], &[0u8; 11], "a", "b").unwrap_err();
        assert!(matches!(
            err,
            DiffError::LengthMismatch {
                len_a: 10,
                len_b: 11
            }
        ));
    }

    #[test]
    fn proportion_formats_like_the_published_row() {
        // 25794969 differing bytes over 2048 MiB: 24.6 MiB and 1.2 %.
        let bytes = 25_794_969u64;
        let total = 2048u64 * 1024 * 1024;
        assert_eq!(format_mib(bytes), "24.6 MiB");
        assert_eq!(format_percent(bytes as f64 / total as f64), "1.2 %");
    }

    #[test]
    fn zero_report_formats_as_zeros() {
        assert_eq!(format_mib(0), "0.0 MiB");
        assert_eq!(format_percent(0.0), "0.0 %");
    }

    #[test]
    fn published_row_renders_exactly() {
        let total = 2048u64 * 1024 * 1024;
        let report = DiffReport {
            dump_a: "Q1".to_string(),
            dump_b: "Q2".to_string(),
            total_pages_differing: 8143,
            total_bytes_differing: 25_794_969,
            proportion: 25_794_969f64 / total as f64,
            total_bytes: total,
            page_bitmap: PageBitmap::new(0),
        };
        let table = format_table(std::slice::from_ref(&report));
        let row = table.lines().nth(1).unwrap();
        assert!(row.contains("Q1"), "{row}");
        assert!(row.contains("8143"), "{row}");
        assert!(row.contains("24.6 MiB"), "{row}");
        assert!(row.contains("1.2 %"), "{row}");
    }

    #[test]
    fn table_has_one_row_per_report_pair() {
        let a = vec![0u8; 4096];
        let b = vec![1u8; 4096];
        let reports = vec![
            diff_slices(&a, &a, "Q1", "Q2").unwrap(),
            diff_slices(&a, &b, "Q1", "UF").unwrap(),
        ];
        let table = format_table(&reports);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].contains("Total Pages"));
        assert!(lines[1].contains("0.0 MiB"));
        assert!(lines[2].contains("100.0 %"));
    }

    #[test]
    fn pairwise_order_matches_index_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let names = ["Q1", "Q2", "UF", "Q3"];
        let mut dumps = Vec::new();
        for (i, name) in names.iter().enumerate() {
            let path = dir.path().join(format!("{name}.raw"));
            std::fs::write(&path, vec![i as u8; 4096]).unwrap();
            dumps.push((name.to_string(), path));
        }
        let reports = pairwise_files(&dumps).unwrap();
        let pairs: Vec<(String, String)> = reports
            .iter()
            .map(|r| (r.dump_a.clone(), r.dump_b.clone()))
            .collect();
        assert_eq!(
            pairs,
            [
                ("Q1", "Q2"),
                ("Q1", "UF"),
                ("Q1", "Q3"),
                ("Q2", "UF"),
                ("Q2", "Q3"),
                ("UF", "Q3")
            ]
            .map(|(a, b)| (a.to_string(), b.to_string()))
        );
    }

    #[test]
    fn two_identical_dumps_one_zero_report() {
        let dir = tempfile::tempdir().unwrap();
        let path_a = dir.path().join("a.raw");
        let path_b = dir.path().join("b.raw");
        std::fs::write(&path_a, vec![9u8; 8192]).unwrap();
        std::fs::write(&path_b, vec![9u8; 8192]).unwrap();
        let reports = pairwise_files(&[("a".into(), path_a), ("b".into(), path_b)]).unwrap();
        assert_eq!(reports.len(), 1);
        assert_eq!(reports[0].total_bytes_differing, 0);
    }

    #[test]
    fn file_and_slice_paths_agree() {
        let dir = tempfile::tempdir().unwrap();
        let map = MemoryMap::new(vec![MemoryRange::new(
            0,
            300 * PAGE_SIZE - 1, // spans multiple chunks
            Purpose::SystemRam,
        )])
        .unwrap();
        let img_a = MemoryImage::new(map.clone(), 1);
        let img_b = MemoryImage::new(map, 2);
        let path_a = dir.path().join("a.raw");
        let path_b = dir.path().join("b.raw");
        img_a.write_raw_dump(&path_a).unwrap();
        img_b.write_raw_dump(&path_b).unwrap();
        let by_file = diff_files(&path_a, &path_b, "a", "b").unwrap();
        let by_slice = diff_slices(img_a.content(), img_b.content(), "a", "b").unwrap();
        assert_eq!(by_file, by_slice);
    }

    #[test]
    fn report_is_identical_across_parallelism_degrees() {
        let map = MemoryMap::new(vec![MemoryRange::new(
            0,
            600 * PAGE_SIZE - 1,
            Purpose::SystemRam,
        )])
        .unwrap();
        let a = MemoryImage::new(map.clone(), 3);
        let b = MemoryImage::new(map, 4);
        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let many = rayon::ThreadPoolBuilder::new()
            .num_threads(8)
            .build()
            .unwrap();
        let r1 = single.install(|| diff_images(&a, &b)).unwrap();
        let r8 = many.install(|| diff_images(&a, &b)).unwrap();
        assert_eq!(r1, r8);
    }
}
