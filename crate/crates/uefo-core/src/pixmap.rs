//! Diff visualization: one pixel per page, 512 pages per row.
//!
//! Blue marks an equal page, red a differing page, black pads rows past the
//! last page. Addresses grow from left to right and from the bottom to the
//! top, so page 0 is the bottom-left pixel.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::diff::DiffReport;

pub const PIXMAP_WIDTH: u64 = 512;

pub const COLOR_EQUAL: [u8; 3] = [0, 0, 255];
pub const COLOR_DIFFERS: [u8; 3] = [255, 0, 0];
pub const COLOR_PADDING: [u8; 3] = [0, 0, 0];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiffPixmap {
    pub width: u64,
    pub height: u64,
    /// Row-major RGB triples, top row first.
    pub pixels: Vec<[u8; 3]>,
}

/// Pixel coordinates of a page index, given the pixmap height.
pub fn page_to_pixel(page: u64, height: u64) -> (u64, u64) {
    (page % PIXMAP_WIDTH, height - 1 - page / PIXMAP_WIDTH)
}

/// Page index shown at pixel `(x, y)`.
pub fn pixel_to_page(x: u64, y: u64, height: u64) -> u64 {
    (height - 1 - y) * PIXMAP_WIDTH + x
}

impl DiffPixmap {
    pub fn pixel(&self, x: u64, y: u64) -> [u8; 3] {
        self.pixels[(y * self.width + x) as usize]
    }

    /// Serializes as a binary portable pixmap (P6, maxval 255).
    pub fn write_ppm<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        for px in &self.pixels {
            w.write_all(px)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_ppm(&mut w)?;
        w.flush()
    }
}

/// Renders a report's page bitmap into a pixmap.
pub fn render_diff(report: &DiffReport) -> DiffPixmap {
    let pages = report.page_bitmap.len();
    let height = pages.div_ceil(PIXMAP_WIDTH).max(1);
    let mut pixels = vec![COLOR_PADDING; (PIXMAP_WIDTH * height) as usize];
    for page in 0..pages {
        let (x, y) = page_to_pixel(page, height);
        pixels[(y * PIXMAP_WIDTH + x) as usize] = if report.page_bitmap.get(page) {
            COLOR_DIFFERS
        } else {
            COLOR_EQUAL
        };
    }
    DiffPixmap {
        width: PIXMAP_WIDTH,
        height,
        pixels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::diff_slices;
    use crate::memory::PAGE_SIZE;

    fn report_for(pages: u64, differing: &[u64]) -> DiffReport {
        let a = vec![0u8; (pages * PAGE_SIZE) as usize];
        let mut b = a.clone();
        for &p in differing {
            b[(p * PAGE_SIZE) as usize] ^= 0xff;
        }
        diff_slices(&a, &b, "a", "b").unwrap()
    }

    #[test]
    fn full_size_dump_renders_512_by_1024() {
        // 524288 pages: 1024 rows with 512 pages per line.
        let height = 524_288u64.div_ceil(PIXMAP_WIDTH);
        assert_eq!(height, 1024);
        let (x, y) = page_to_pixel(0, height);
        assert_eq!((x, y), (0, 1023)); // bottom-left
        let (x, y) = page_to_pixel(524_287, height);
        assert_eq!((x, y), (511, 0)); // top-right
    }

    #[test]
    fn all_equal_single_row_is_blue() {
        let report = report_for(512, &[]);
        let pixmap = render_diff(&report);
        assert_eq!(pixmap.width, 512);
        assert_eq!(pixmap.height, 1);
        assert!(pixmap.pixels.iter().all(|&p| p == COLOR_EQUAL));
    }

    #[test]
    fn page_zero_lands_bottom_left_in_red() {
        let report = report_for(1024, &[0]);
        let pixmap = render_diff(&report);
        assert_eq!(pixmap.height, 2);
        assert_eq!(pixmap.pixel(0, 1), COLOR_DIFFERS);
        assert_eq!(pixmap.pixel(1, 1), COLOR_EQUAL);
        assert_eq!(pixmap.pixel(0, 0), COLOR_EQUAL);
    }

    #[test]
    fn partial_last_row_is_padded_black() {
        let report = report_for(520, &[519]);
        let pixmap = render_diff(&report);
        assert_eq!(pixmap.height, 2);
        // Pages 512..520 occupy the start of the top row.
        assert_eq!(pixmap.pixel(7, 0), COLOR_DIFFERS);
        assert_eq!(pixmap.pixel(8, 0), COLOR_PADDING);
        assert_eq!(pixmap.pixel(511, 0), COLOR_PADDING);
    }

    #[test]
    fn ppm_header_and_size() {
        let report = report_for(512, &[]);
        let pixmap = render_diff(&report);
        let mut buf = Vec::new();
        pixmap.write_ppm(&mut buf).unwrap();
        assert!(buf.starts_with(b"P6\n512 1\n255\n"));
        assert_eq!(buf.len(), 13 + 512 * 3);
    }

    #[test]
    fn page_pixel_mapping_is_a_bijection() {
        for pages in [1u64, 5, 511, 512, 513, 1024, 10_000] {
            let height = pages.div_ceil(PIXMAP_WIDTH).max(1);
            for page in 0..pages {
                let (x, y) = page_to_pixel(page, height);
                assert!(x < PIXMAP_WIDTH && y < height);
                assert_eq!(pixel_to_page(x, y, height), page);
            }
        }
    }
}
