//! Orchestrated end-to-end run: simulate, reboot, acquire, diff, render.
//!
//! Produces the four-dump set and its pairwise comparison:
//!
//! * `Q1` — ground truth, the machine with the OS running.
//! * `Q2` — after the reboot footprint (the firmware's overwrite regions).
//! * `UF` — the dump acquired over loopback TCP from the post-reboot image,
//!   optionally perturbed by a configurable acquisition footprint standing
//!   in for the acquisition tool's own memory effect.
//! * `Q3` — the post-acquisition snapshot.
//!
//! Any stage failure aborts the run with the stage name.

use std::fmt::Display;
use std::net::TcpListener;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::acquire::{acquire, AcquireOptions};
use crate::diff::{format_table, pairwise_files, report_set, DiffReport};
use crate::memory::{FootprintProfile, MemoryImage, MemoryMap};
use crate::pixmap::render_diff;
use crate::receive::{accept_one, DumpArtifact};

#[derive(Debug, Error)]
#[error("pipeline stage '{stage}' failed: {message}")]
pub struct PipelineError {
    pub stage: &'static str,
    pub message: String,
}

fn stage<T, E: Display>(name: &'static str, result: Result<T, E>) -> Result<T, PipelineError> {
    result.map_err(|e| PipelineError {
        stage: name,
        message: e.to_string(),
    })
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub map: MemoryMap,
    pub seed: u64,
    /// What the reboot does to RAM between Q1 and Q2.
    pub reboot_footprint: FootprintProfile,
    /// What the acquisition itself does to RAM between Q2 and UF/Q3.
    /// Empty by default: the simulated agent reads memory without touching it.
    pub acquisition_footprint: FootprintProfile,
    /// Loopback receiver endpoint; an ephemeral port when unset.
    pub listen: Option<String>,
    pub out_dir: PathBuf,
}

impl PipelineConfig {
    pub fn new(map: MemoryMap, out_dir: PathBuf) -> Self {
        PipelineConfig {
            map,
            seed: 0,
            reboot_footprint: FootprintProfile::empty(),
            acquisition_footprint: FootprintProfile::empty(),
            listen: None,
            out_dir,
        }
    }
}

#[derive(Debug)]
pub struct PipelineOutcome {
    /// `(label, raw dump path)` for Q1, Q2, UF, Q3 in order.
    pub dumps: Vec<(String, PathBuf)>,
    pub artifact: DumpArtifact,
    pub reports: Vec<DiffReport>,
    pub table_text: String,
    pub report_json_path: PathBuf,
    pub table_path: PathBuf,
    pub pixmap_paths: Vec<PathBuf>,
}

/// Writes `Q1.raw` (pre-reset) and `Q2.raw` (post-reset) with map sidecars.
pub fn simulate(
    map: &MemoryMap,
    seed: u64,
    profile: &FootprintProfile,
    out_dir: &Path,
) -> Result<(PathBuf, PathBuf), PipelineError> {
    stage("simulate", std::fs::create_dir_all(out_dir))?;
    let q1 = MemoryImage::new(map.clone(), seed).with_provenance("Q1");
    let q1_path = out_dir.join("Q1.raw");
    stage("simulate", q1.write_raw_dump(&q1_path))?;
    stage("simulate", map.save_sidecar(&out_dir.join("Q1.map.json")))?;
    let q2 = stage("footprint", q1.apply_footprint(profile, seed))?;
    let q2_path = out_dir.join("Q2.raw");
    stage("footprint", q2.write_raw_dump(&q2_path))?;
    stage("footprint", map.save_sidecar(&out_dir.join("Q2.map.json")))?;
    Ok((q1_path, q2_path))
}

/// Runs the full dump-and-diff pipeline.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutcome, PipelineError> {
    stage("validate", cfg.reboot_footprint.validate_for(&cfg.map))?;
    stage("validate", cfg.acquisition_footprint.validate_for(&cfg.map))?;
    stage("validate", std::fs::create_dir_all(&cfg.out_dir))?;

    // Q1: ground truth.
    let q1 = MemoryImage::new(cfg.map.clone(), cfg.seed).with_provenance("Q1");
    let q1_path = cfg.out_dir.join("Q1.raw");
    stage("simulate", q1.write_raw_dump(&q1_path))?;
    stage(
        "simulate",
        cfg.map.save_sidecar(&cfg.out_dir.join("Q1.map.json")),
    )?;

    // Q2: the reboot's footprint applied.
    let q2 = stage(
        "footprint",
        q1.apply_footprint(&cfg.reboot_footprint, cfg.seed),
    )?;
    drop(q1);
    let q2_path = cfg.out_dir.join("Q2.raw");
    stage("footprint", q2.write_raw_dump(&q2_path))?;

    // The memory the agent actually reads: Q2 plus the acquisition's own
    // footprint (none by default).
    let acquired_state = if cfg.acquisition_footprint.regions.is_empty()
        && cfg.acquisition_footprint.decay_bitflip_rate == 0.0
    {
        q2
    } else {
        let perturbed = stage(
            "acquisition-footprint",
            q2.apply_footprint(&cfg.acquisition_footprint, cfg.seed.wrapping_add(1)),
        )?;
        drop(q2);
        perturbed
    };

    // UF: loopback acquisition of the post-reboot image.
    let listen = cfg
        .listen
        .clone()
        .unwrap_or_else(|| "127.0.0.1:0".to_string());
    let listener = stage("acquire", TcpListener::bind(&listen))?;
    let endpoint = stage("acquire", listener.local_addr())?;
    let out_dir = cfg.out_dir.clone();
    let receiver = std::thread::spawn(move || accept_one(&listener, &out_dir, "UF"));
    let summary = stage(
        "acquire",
        acquire(&acquired_state, endpoint, &AcquireOptions::default()),
    )?;
    let artifact = stage(
        "receive",
        receiver.join().unwrap_or_else(|_| {
            Err(crate::receive::ReceiveError::ProtocolViolation(
                "receiver thread panicked".to_string(),
            ))
        }),
    )?;
    if !artifact.digest_verified {
        return Err(PipelineError {
            stage: "receive",
            message: "received dump failed digest verification".to_string(),
        });
    }
    if summary.digest != hex_digest(&artifact) {
        return Err(PipelineError {
            stage: "receive",
            message: "agent and receiver digests disagree".to_string(),
        });
    }

    // Q3: snapshot after the acquisition completed.
    let q3_path = cfg.out_dir.join("Q3.raw");
    stage("snapshot", acquired_state.write_raw_dump(&q3_path))?;
    drop(acquired_state);

    let dumps = vec![
        ("Q1".to_string(), q1_path),
        ("Q2".to_string(), q2_path),
        ("UF".to_string(), artifact.raw_dump_path.clone()),
        ("Q3".to_string(), q3_path),
    ];

    let reports = stage("diff", pairwise_files(&dumps))?;

    let mut pixmap_paths = Vec::new();
    for report in &reports {
        let path = cfg
            .out_dir
            .join(format!("diff-{}-{}.ppm", report.dump_a, report.dump_b));
        stage("render", render_diff(report).save(&path))?;
        pixmap_paths.push(path);
    }

    let table_text = format_table(&reports);
    let table_path = cfg.out_dir.join("table.txt");
    stage("report", std::fs::write(&table_path, &table_text))?;
    let report_json_path = cfg.out_dir.join("reports.json");
    stage(
        "report",
        std::fs::write(
            &report_json_path,
            serde_json::to_string_pretty(&report_set(&reports)).expect("reports serialize"),
        ),
    )?;

    Ok(PipelineOutcome {
        dumps,
        artifact,
        reports,
        table_text,
        report_json_path,
        table_path,
        pixmap_paths,
    })
}

fn hex_digest(artifact: &DumpArtifact) -> [u8; 32] {
    let meta = crate::receive::DumpMetadata::load(&artifact.metadata_path)
        .expect("metadata was just written");
    let bytes = hex::decode(&meta.digest).expect("digest is hex");
    bytes.try_into().expect("digest is 32 bytes")
}
