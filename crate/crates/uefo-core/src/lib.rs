//! Desk-scale cold-boot memory forensics toolkit.
//!
//! The crate simulates the full acquisition story end to end:
//!
//! * [`memory`] — physical memory maps, pseudorandom memory images, and the
//!   firmware footprint a reboot stamps onto RAM.
//! * [`wire`] / [`acquire`] / [`receive`] — a page-wise TCP acquisition
//!   protocol (agent and receiver) with SHA-256 integrity evidence and an
//!   atomicity window derived from per-page timestamps.
//! * [`diff`] / [`pixmap`] — byte- and page-wise dump comparison with metric
//!   tables and red/blue diff pixmaps.
//! * [`rts`] — a 14-slot UEFI-style runtime-service dispatch table with hook
//!   installation, virtual-address conversion, chunked JSON trace emission,
//!   and scenario workload generation.
//! * [`analysis`] — the offline trace parser: record reassembly, per-service
//!   call statistics, and scenario comparison.
//! * [`pipeline`] — the orchestrated Q1/Q2/UF/Q3 dump-and-diff run.

pub mod acquire;
pub mod analysis;
pub mod diff;
pub mod memory;
pub mod pipeline;
pub mod pixmap;
pub mod receive;
pub mod rts;
pub mod wire;

pub use memory::{FillMode, FootprintProfile, MemoryImage, MemoryMap, MemoryRange, Purpose};
