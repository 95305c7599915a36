//! `uefo` — desk-scale cold-boot forensics pipeline.
//!
//! Subcommands cover the full story: simulate memory images and reboot
//! footprints, stream dumps over TCP (agent and receiver), diff and render
//! dump pairs, and generate or analyze runtime-service traces.

use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use uefo_core::acquire::{acquire, AcquireOptions};
use uefo_core::analysis::{
    compare_scenarios, format_stats_table, service_row_order, stats_json, ScenarioObservation,
};
use uefo_core::diff::{diff_files, format_table, report_set, DiffReport, ReportSet};
use uefo_core::memory::{FootprintProfile, MemoryImage, MemoryMap};
use uefo_core::pipeline::{run_pipeline, simulate, PipelineConfig};
use uefo_core::pixmap::render_diff;
use uefo_core::receive::{serve, DumpArtifact};
use uefo_core::rts::scenario::{run_scenario, ScenarioSpec, BUILTIN_NAMES};
use uefo_core::rts::{Hook, ServiceTable};

#[derive(Parser)]
#[command(
    name = "uefo",
    version,
    about = "Cold-boot style memory acquisition, dump diffing, and runtime-service tracing"
)]
struct Cli {
    /// Deterministic seed for image synthesis and trace generation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Memory map sidecar (JSON). Defaults to the built-in 2 GiB layout.
    #[arg(long, global = true)]
    map: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print machine-readable JSON instead of human-readable text.
    #[arg(long, global = true)]
    json: bool,
    /// JSON config file; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write Q1.raw (pre-reset) and Q2.raw (post-reset) images.
    Simulate(SimulateArgs),
    /// Stream a memory image page-wise to a receiver.
    Acquire(AcquireArgs),
    /// Receive one or more dumps and write raw + metadata files.
    Receive(ReceiveArgs),
    /// Full run: simulate, acquire over loopback, diff, render, report.
    Pipeline(PipelineArgs),
    /// Compare two raw dumps byte- and page-wise.
    Diff(DiffArgs),
    /// Render the page-wise diff of two dumps as a P6 pixmap.
    Render(RenderArgs),
    /// Print a stored report set as an aligned table.
    Table(TableArgs),
    /// Generate a scenario trace log.
    Trace(TraceArgs),
    /// Per-service call counts of a trace log.
    TraceStats(TraceStatsArgs),
    /// Compare two trace logs.
    TraceDiff(TraceDiffArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Footprint profile applied between Q1 and Q2 (JSON).
    #[arg(long)]
    profile: Option<PathBuf>,
}

#[derive(Args)]
struct AcquireArgs {
    /// Raw image file to stream.
    #[arg(long)]
    image: PathBuf,
    /// Receiver endpoint, host:port.
    #[arg(long)]
    to: Option<String>,
    /// Microseconds to sleep after each page.
    #[arg(long)]
    throttle_us: Option<u64>,
    /// Only send pages inside this address window, `start:end` (hex ok).
    #[arg(long)]
    filter: Option<String>,
}

#[derive(Args)]
struct ReceiveArgs {
    /// Listen endpoint, host:port.
    #[arg(long)]
    listen: Option<String>,
    /// Base name of the written dump files.
    #[arg(long, default_value = "dump")]
    name: String,
    /// Number of sessions to serve before exiting.
    #[arg(long, default_value_t = 1)]
    sessions: usize,
}

#[derive(Args)]
struct PipelineArgs {
    /// Reboot footprint profile (JSON).
    #[arg(long)]
    profile: Option<PathBuf>,
    /// Acquisition footprint profile (JSON); empty by default.
    #[arg(long)]
    acq_profile: Option<PathBuf>,
    /// Loopback receiver endpoint; an ephemeral port by default.
    #[arg(long)]
    listen: Option<String>,
}

#[derive(Args)]
struct DiffArgs {
    a: PathBuf,
    b: PathBuf,
    #[arg(long)]
    label_a: Option<String>,
    #[arg(long)]
    label_b: Option<String>,
    /// Also write the report set as JSON to this path.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    a: PathBuf,
    b: PathBuf,
    /// Output pixmap path; defaults to `<out>/diff.ppm`.
    #[arg(long)]
    out_file: Option<PathBuf>,
}

#[derive(Args)]
struct TableArgs {
    /// Report set JSON written by `diff` or `pipeline`.
    report: PathBuf,
}

#[derive(Args)]
struct TraceArgs {
    /// Built-in scenario name or a scenario spec JSON file.
    #[arg(long)]
    scenario: Option<String>,
    /// Log file path; defaults to `<out>/<scenario>.log`.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Export the (built-in or loaded) scenario spec as JSON.
    #[arg(long)]
    export_spec: Option<PathBuf>,
}

#[derive(Args)]
struct TraceStatsArgs {
    log: PathBuf,
}

#[derive(Args)]
struct TraceDiffArgs {
    log_a: PathBuf,
    log_b: PathBuf,
}

/// Optional JSON config: flags override these fields.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    map: Option<PathBuf>,
    seed: Option<u64>,
    footprint_profile: Option<PathBuf>,
    acquisition_footprint: Option<PathBuf>,
    out: Option<PathBuf>,
    scenario: Option<String>,
    #[serde(default)]
    endpoints: Endpoints,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct Endpoints {
    acquire_to: Option<String>,
    listen: Option<String>,
}

/// Flag/config/default resolution for the options shared across commands.
struct Settings {
    map_path: Option<PathBuf>,
    seed: u64,
    out: PathBuf,
    json: bool,
    config: ConfigFile,
}

impl Settings {
    fn resolve(cli: &Cli) -> Result<Settings> {
        let config = match &cli.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", path.display()))?
            }
            None => ConfigFile::default(),
        };
        Ok(Settings {
            map_path: cli.map.clone().or_else(|| config.map.clone()),
            seed: cli.seed.or(config.seed).unwrap_or(0),
            out: cli
                .out
                .clone()
                .or_else(|| config.out.clone())
                .unwrap_or_else(|| PathBuf::from(".")),
            json: cli.json,
            config,
        })
    }

    fn load_map(&self) -> Result<MemoryMap> {
        match &self.map_path {
            Some(path) => MemoryMap::load_sidecar(path)
                .with_context(|| format!("loading memory map {}", path.display())),
            None => Ok(MemoryMap::vm_2gib()),
        }
    }

    /// Footprint profile: explicit path, else the built-in reboot footprint
    /// when running on the built-in map, else no footprint.
    fn load_profile(&self, flag: &Option<PathBuf>) -> Result<FootprintProfile> {
        let path = flag
            .clone()
            .or_else(|| self.config.footprint_profile.clone());
        match path {
            Some(path) => FootprintProfile::load(&path)
                .with_context(|| format!("loading footprint profile {}", path.display())),
            None if self.map_path.is_none() => Ok(FootprintProfile::vm_2gib_reboot()),
            None => Ok(FootprintProfile::empty()),
        }
    }

    fn print(&self, human: String, json: serde_json::Value) {
        if self.json {
            println!(
                "{}",
                serde_json::to_string_pretty(&json).expect("json serializes")
            );
        } else {
            print!("{human}");
            if !human.ends_with('\n') {
                println!();
            }
        }
    }
}

fn main() -> std::process::ExitCode {
    match run() {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    let settings = Settings::resolve(&cli)?;
    match &cli.command {
        Command::Simulate(args) => cmd_simulate(&settings, args),
        Command::Acquire(args) => cmd_acquire(&settings, args),
        Command::Receive(args) => cmd_receive(&settings, args),
        Command::Pipeline(args) => cmd_pipeline(&settings, args),
        Command::Diff(args) => cmd_diff(&settings, args),
        Command::Render(args) => cmd_render(&settings, args),
        Command::Table(args) => cmd_table(&settings, args),
        Command::Trace(args) => cmd_trace(&settings, args),
        Command::TraceStats(args) => cmd_trace_stats(&settings, args),
        Command::TraceDiff(args) => cmd_trace_diff(&settings, args),
    }
}

fn cmd_simulate(settings: &Settings, args: &SimulateArgs) -> Result<()> {
    let map = settings.load_map()?;
    let profile = settings.load_profile(&args.profile)?;
    let (q1, q2) = simulate(&map, settings.seed, &profile, &settings.out)?;
    settings.print(
        format!("wrote {}\nwrote {}\n", q1.display(), q2.display()),
        serde_json::json!({ "q1": q1, "q2": q2, "seed": settings.seed }),
    );
    Ok(())
}

fn cmd_acquire(settings: &Settings, args: &AcquireArgs) -> Result<()> {
    let map = settings.load_map()?;
    let image = MemoryImage::load_raw_dump(&args.image, map)
        .with_context(|| format!("loading image {}", args.image.display()))?;
    let endpoint = args
        .to
        .clone()
        .or_else(|| settings.config.endpoints.acquire_to.clone())
        .context("no receiver endpoint: pass --to host:port")?;
    let options = AcquireOptions {
        range_filter: args.filter.as_deref().map(parse_window).transpose()?,
        page_delay: args.throttle_us.map(Duration::from_micros),
    };
    let summary = acquire(&image, endpoint.as_str(), &options)?;
    settings.print(
        format!(
            "sent {} pages ({} bytes), atomicity window {} ns, digest {}\n",
            summary.pages_sent,
            summary.bytes_sent,
            summary.last_ts_ns - summary.first_ts_ns,
            hex::encode(summary.digest),
        ),
        serde_json::json!({
            "pages_sent": summary.pages_sent,
            "bytes_sent": summary.bytes_sent,
            "first_ts_ns": summary.first_ts_ns,
            "last_ts_ns": summary.last_ts_ns,
            "atomicity_window_ns": summary.last_ts_ns - summary.first_ts_ns,
            "digest": hex::encode(summary.digest),
        }),
    );
    Ok(())
}

fn parse_window(text: &str) -> Result<(u64, u64)> {
    let (lo, hi) = text.split_once(':').context("window must be start:end")?;
    let parse = |s: &str| -> Result<u64> {
        let s = s.trim();
        if let Some(hex) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
            u64::from_str_radix(hex, 16).context("bad hex address")
        } else {
            s.parse().context("bad address")
        }
    };
    Ok((parse(lo)?, parse(hi)?))
}

fn artifact_json(artifact: &DumpArtifact) -> serde_json::Value {
    serde_json::json!({
        "raw": artifact.raw_dump_path,
        "metadata": artifact.metadata_path,
        "atomicity_window_ns": artifact.atomicity_window_ns,
        "digest_verified": artifact.digest_verified,
    })
}

fn cmd_receive(settings: &Settings, args: &ReceiveArgs) -> Result<()> {
    let listen = args
        .listen
        .clone()
        .or_else(|| settings.config.endpoints.listen.clone())
        .context("no listen endpoint: pass --listen host:port")?;
    let listener = TcpListener::bind(&listen).with_context(|| format!("binding {listen}"))?;
    if !settings.json {
        println!("listening on {}", listener.local_addr()?);
    }
    let results = serve(&listener, &settings.out, &args.name, args.sessions);
    let mut artifacts = Vec::new();
    for result in results {
        artifacts.push(result?);
    }
    let human = artifacts
        .iter()
        .map(|a| {
            format!(
                "wrote {} (digest {}, atomicity window {} ns)\n",
                a.raw_dump_path.display(),
                if a.digest_verified {
                    "verified"
                } else {
                    "MISMATCH"
                },
                a.atomicity_window_ns,
            )
        })
        .collect::<String>();
    let json = serde_json::json!({
        "artifacts": artifacts.iter().map(artifact_json).collect::<Vec<_>>(),
    });
    settings.print(human, json);
    if artifacts.iter().any(|a| !a.digest_verified) {
        bail!("digest verification failed for at least one session");
    }
    Ok(())
}

fn cmd_pipeline(settings: &Settings, args: &PipelineArgs) -> Result<()> {
    let map = settings.load_map()?;
    let reboot_footprint = settings.load_profile(&args.profile)?;
    let acquisition_footprint = match args
        .acq_profile
        .clone()
        .or_else(|| settings.config.acquisition_footprint.clone())
    {
        Some(path) => FootprintProfile::load(&path)
            .with_context(|| format!("loading acquisition footprint {}", path.display()))?,
        None => FootprintProfile::empty(),
    };
    let cfg = PipelineConfig {
        map,
        seed: settings.seed,
        reboot_footprint,
        acquisition_footprint,
        listen: args
            .listen
            .clone()
            .or_else(|| settings.config.endpoints.listen.clone()),
        out_dir: settings.out.clone(),
    };
    let outcome = run_pipeline(&cfg)?;
    let json = serde_json::json!({
        "dumps": outcome.dumps.iter().map(|(l, p)| serde_json::json!({"label": l, "path": p})).collect::<Vec<_>>(),
        "artifact": artifact_json(&outcome.artifact),
        "reports": report_set(&outcome.reports),
        "table": outcome.table_path,
        "report_json": outcome.report_json_path,
        "pixmaps": outcome.pixmap_paths,
    });
    settings.print(outcome.table_text.clone(), json);
    Ok(())
}

fn labelled(path: &Path, label: &Option<String>) -> String {
    label.clone().unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    })
}

fn cmd_diff(settings: &Settings, args: &DiffArgs) -> Result<()> {
    let report = diff_files(
        &args.a,
        &args.b,
        &labelled(&args.a, &args.label_a),
        &labelled(&args.b, &args.label_b),
    )?;
    if let Some(path) = &args.report {
        let set = report_set(std::slice::from_ref(&report));
        std::fs::write(path, serde_json::to_string_pretty(&set)?)
            .with_context(|| format!("writing report {}", path.display()))?;
    }
    settings.print(
        format_table(std::slice::from_ref(&report)),
        serde_json::to_value(report.to_row())?,
    );
    Ok(())
}

fn cmd_render(settings: &Settings, args: &RenderArgs) -> Result<()> {
    let report = diff_files(
        &args.a,
        &args.b,
        &labelled(&args.a, &None),
        &labelled(&args.b, &None),
    )?;
    let pixmap = render_diff(&report);
    let out_file = match &args.out_file {
        Some(path) => path.clone(),
        None => {
            std::fs::create_dir_all(&settings.out)?;
            settings
                .out
                .join(format!("diff-{}-{}.ppm", report.dump_a, report.dump_b))
        }
    };
    pixmap
        .save(&out_file)
        .with_context(|| format!("writing {}", out_file.display()))?;
    settings.print(
        format!(
            "wrote {} ({}x{})\n",
            out_file.display(),
            pixmap.width,
            pixmap.height
        ),
        serde_json::json!({ "pixmap": out_file, "width": pixmap.width, "height": pixmap.height }),
    );
    Ok(())
}

fn cmd_table(settings: &Settings, args: &TableArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.report)
        .with_context(|| format!("reading {}", args.report.display()))?;
    let set: ReportSet = serde_json::from_str(&text).context("parsing report set")?;
    // Rebuild display-only reports from the stored rows.
    let reports: Vec<DiffReport> = set
        .pairs
        .iter()
        .map(|row| DiffReport {
            dump_a: row.a.clone(),
            dump_b: row.b.clone(),
            total_pages_differing: row.pages,
            total_bytes_differing: row.bytes,
            proportion: row.proportion,
            total_bytes: 0,
            page_bitmap: uefo_core::diff::PageBitmap::new(0),
        })
        .collect();
    settings.print(format_table(&reports), serde_json::to_value(&set)?);
    Ok(())
}

fn load_scenario(settings: &Settings, flag: &Option<String>) -> Result<ScenarioSpec> {
    let choice = flag
        .clone()
        .or_else(|| settings.config.scenario.clone())
        .context("no scenario: pass --scenario <name|spec.json>")?;
    if BUILTIN_NAMES.contains(&choice.as_str()) {
        return Ok(ScenarioSpec::builtin(&choice)?);
    }
    let path = Path::new(&choice);
    if path.exists() {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading scenario {}", path.display()))?;
        return Ok(ScenarioSpec::from_json(&text)?);
    }
    bail!(
        "unknown scenario {choice:?}: expected one of {} or a spec file",
        BUILTIN_NAMES.join("/")
    );
}

fn cmd_trace(settings: &Settings, args: &TraceArgs) -> Result<()> {
    let spec = load_scenario(settings, &args.scenario)?;
    if let Some(path) = &args.export_spec {
        std::fs::write(path, spec.to_json())
            .with_context(|| format!("writing scenario spec {}", path.display()))?;
    }
    let mut table = ServiceTable::new();
    table
        .install_hooks(&Hook::trace_all())
        .expect("fresh table accepts hooks");
    let run = run_scenario(&spec, &mut table, settings.seed)?;
    let log_path = match &args.log {
        Some(path) => path.clone(),
        None => {
            std::fs::create_dir_all(&settings.out)?;
            settings.out.join(format!("{}.log", spec.name))
        }
    };
    let mut text = run.lines.join("\n");
    text.push('\n');
    std::fs::write(&log_path, text)
        .with_context(|| format!("writing log {}", log_path.display()))?;
    settings.print(
        format!(
            "wrote {} ({} records, {} calls)\n{}",
            log_path.display(),
            run.lines.len(),
            run.stats.total,
            format_stats_table(&[(spec.name.clone(), &run.stats)]),
        ),
        serde_json::json!({
            "log": log_path,
            "records": run.lines.len(),
            "stats": stats_json(&spec.name, &run.stats),
        }),
    );
    Ok(())
}

fn observe_log(path: &Path) -> Result<(ScenarioObservation, usize)> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading log {}", path.display()))?;
    let (obs, issues) = ScenarioObservation::from_log(&text);
    for issue in &issues {
        eprintln!("{}:{}: {}", path.display(), issue.line, issue.reason);
    }
    Ok((obs, issues.len()))
}

fn cmd_trace_stats(settings: &Settings, args: &TraceStatsArgs) -> Result<()> {
    let (obs, issue_count) = observe_log(&args.log)?;
    let name = args
        .log
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut json = stats_json(&name, &obs.stats);
    json["issues"] = serde_json::json!(issue_count);
    settings.print(format_stats_table(&[(name.clone(), &obs.stats)]), json);
    Ok(())
}

fn cmd_trace_diff(settings: &Settings, args: &TraceDiffArgs) -> Result<()> {
    let (obs_a, _) = observe_log(&args.log_a)?;
    let (obs_b, _) = observe_log(&args.log_b)?;
    let delta = compare_scenarios(&obs_a, &obs_b);
    let name = |p: &Path| {
        p.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    };
    let mut human = format!("{} -> {}\n", name(&args.log_a), name(&args.log_b));
    for service in service_row_order(delta.per_service.keys().map(String::as_str)) {
        human.push_str(&format!("{service:<26}{:+}\n", delta.per_service[&service]));
    }
    human.push_str(&format!("{:<26}{:+}\n", "Total", delta.total));
    if !delta.get_variable_names.is_empty() {
        human.push_str("GetVariable by name:\n");
        for (variable, d) in &delta.get_variable_names {
            human.push_str(&format!("  {variable:<24}{d:+}\n"));
        }
    }
    settings.print(human, serde_json::to_value(&delta)?);
    Ok(())
}
