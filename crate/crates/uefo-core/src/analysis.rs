//! Offline trace-log analysis: parsing, call reassembly, statistics.
//!
//! The parser is deliberately lenient. Consoles interleave firmware output
//! with OS text, so lines without the `[RTSTracer]` marker are skipped
//! silently, and a malformed record becomes a reported issue rather than an
//! abort. Single-quoted pseudo-JSON and the historical `argmuent` key
//! spelling are accepted.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::rts::trace::{RecordType, TRACE_PREFIX};
use crate::rts::{ArgData, ArgValue, Argument, ServiceName};

/// One parsed trace line.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub service: String,
    pub id: u64,
    pub rtype: RecordType,
    pub argument: String,
    pub part: u32,
    pub data: ArgData,
    /// 1-based source line, for issue reporting.
    pub line: usize,
}

/// A non-fatal parse or reassembly problem.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseIssue {
    pub line: usize,
    pub reason: String,
}

impl ParseIssue {
    fn new(line: usize, reason: impl Into<String>) -> Self {
        ParseIssue {
            line,
            reason: reason.into(),
        }
    }
}

/// Parses a whole log. Never fails: bad records become issues.
pub fn parse_log(input: &str) -> (Vec<TraceRecord>, Vec<ParseIssue>) {
    let mut records = Vec::new();
    let mut issues = Vec::new();
    for (i, raw) in input.lines().enumerate() {
        let line_no = i + 1;
        let Some(pos) = raw.find(TRACE_PREFIX) else {
            continue; // console noise
        };
        let payload = raw[pos + TRACE_PREFIX.len()..].trim();
        match parse_record(payload, line_no) {
            Ok(record) => records.push(record),
            Err(reason) => issues.push(ParseIssue::new(line_no, reason)),
        }
    }
    (records, issues)
}

fn parse_record(payload: &str, line_no: usize) -> Result<TraceRecord, String> {
    let value: serde_json::Value = match serde_json::from_str(payload) {
        Ok(v) => v,
        // Firmware-style single-quoted objects: retry with quotes swapped.
        Err(_) => serde_json::from_str(&payload.replace('\'', "\""))
            .map_err(|e| format!("invalid JSON: {e}"))?,
    };
    let obj = value.as_object().ok_or("record is not a JSON object")?;

    let service = obj
        .get("service")
        .and_then(|v| v.as_str())
        .ok_or("missing or non-string 'service'")?
        .to_string();
    let id = obj
        .get("id")
        .and_then(|v| v.as_u64())
        .ok_or("missing or non-integer 'id'")?;
    let rtype = match obj.get("type").and_then(|v| v.as_str()) {
        Some("IN") => RecordType::In,
        Some("OUT") => RecordType::Out,
        Some(other) => return Err(format!("unknown record type {other:?}")),
        None => return Err("missing 'type'".to_string()),
    };
    let argument = obj
        .get("argument")
        .or_else(|| obj.get("argmuent"))
        .and_then(|v| v.as_str())
        .ok_or("missing or non-string 'argument'")?
        .to_string();
    let part = match obj.get("part") {
        None => 0,
        Some(v) => v.as_u64().ok_or("non-integer 'part'")? as u32,
    };
    let data_obj = obj
        .get("data")
        .and_then(|v| v.as_object())
        .ok_or("missing or non-object 'data'")?;
    let mut data = Vec::with_capacity(data_obj.len());
    for (k, v) in data_obj {
        let value = match v {
            serde_json::Value::Number(n) => ArgValue::Int(
                n.as_i64()
                    .ok_or_else(|| format!("non-integer data value for {k:?}"))?,
            ),
            serde_json::Value::String(s) => ArgValue::Str(s.clone()),
            _ => return Err(format!("non-scalar data value for {k:?}")),
        };
        data.push((k.clone(), value));
    }
    Ok(TraceRecord {
        service,
        id,
        rtype,
        argument,
        part,
        data,
        line: line_no,
    })
}

/// One reassembled call. `segment` counts machine runs within the log: call
/// ids restart at zero after a reboot, and an id moving backwards starts a
/// new segment.
#[derive(Debug, Clone, PartialEq)]
pub struct CallSummary {
    pub segment: usize,
    pub id: u64,
    pub service: String,
    pub in_args: Vec<Argument>,
    pub out_args: Vec<Argument>,
}

/// Groups records into calls, concatenating chunked argument data in
/// ascending part order. A gap or duplicate part drops the whole call and
/// reports an issue.
pub fn reassemble_calls(records: &[TraceRecord]) -> (Vec<CallSummary>, Vec<ParseIssue>) {
    let mut issues = Vec::new();

    // Segment detection: ids are monotone within one machine run.
    let mut segmented: Vec<(usize, &TraceRecord)> = Vec::with_capacity(records.len());
    let mut segment = 0usize;
    let mut last_id: Option<u64> = None;
    for record in records {
        if let Some(prev) = last_id {
            if record.id < prev {
                segment += 1;
            }
        }
        last_id = Some(record.id);
        segmented.push((segment, record));
    }

    type GroupKey = (RecordType, String);
    struct CallBuilder<'a> {
        order: Vec<GroupKey>,
        chunks: BTreeMap<GroupKey, Vec<&'a TraceRecord>>,
        first_line: usize,
    }

    let mut calls: BTreeMap<(usize, u64, String), CallBuilder> = BTreeMap::new();
    for (seg, record) in segmented {
        let call_key = (seg, record.id, record.service.clone());
        let builder = calls.entry(call_key).or_insert_with(|| CallBuilder {
            order: Vec::new(),
            chunks: BTreeMap::new(),
            first_line: record.line,
        });
        let group_key = (record.rtype, record.argument.clone());
        if !builder.chunks.contains_key(&group_key) {
            builder.order.push(group_key.clone());
        }
        builder.chunks.entry(group_key).or_default().push(record);
    }

    let mut summaries = Vec::new();
    'calls: for ((segment, id, service), builder) in calls {
        let mut in_args = Vec::new();
        let mut out_args = Vec::new();
        for key in &builder.order {
            let mut chunks = builder.chunks[key].clone();
            chunks.sort_by_key(|r| r.part);
            for (expected, chunk) in chunks.iter().enumerate() {
                if chunk.part as usize != expected {
                    issues.push(ParseIssue::new(
                        builder.first_line,
                        format!(
                            "call {id} ({service}): argument {:?} missing part {expected}",
                            key.1
                        ),
                    ));
                    continue 'calls;
                }
            }
            let mut data = Vec::new();
            for chunk in &chunks {
                data.extend(chunk.data.iter().cloned());
            }
            let arg = Argument::new(key.1.clone(), data);
            match key.0 {
                RecordType::In => in_args.push(arg),
                RecordType::Out => out_args.push(arg),
            }
        }
        summaries.push(CallSummary {
            segment,
            id,
            service,
            in_args,
            out_args,
        });
    }
    (summaries, issues)
}

/// Per-service call counts.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CallStats {
    pub counts: BTreeMap<String, u64>,
    pub total: u64,
}

impl CallStats {
    pub fn from_counts(counts: BTreeMap<String, u64>) -> Self {
        let total = counts.values().sum();
        CallStats { counts, total }
    }

    pub fn get(&self, service: &str) -> u64 {
        self.counts.get(service).copied().unwrap_or(0)
    }

    pub fn add(&mut self, other: &CallStats) {
        for (k, v) in &other.counts {
            *self.counts.entry(k.clone()).or_insert(0) += v;
        }
        self.total += other.total;
    }
}

pub fn count_by_service(calls: &[CallSummary]) -> CallStats {
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for call in calls {
        *counts.entry(call.service.clone()).or_insert(0) += 1;
    }
    CallStats::from_counts(counts)
}

/// Counts per segment (contiguous machine runs), in segment order.
pub fn count_by_segment(calls: &[CallSummary]) -> Vec<CallStats> {
    let segments = calls.iter().map(|c| c.segment).max().map_or(0, |m| m + 1);
    (0..segments)
        .map(|seg| {
            let segment_calls: Vec<CallSummary> =
                calls.iter().filter(|c| c.segment == seg).cloned().collect();
            count_by_service(&segment_calls)
        })
        .collect()
}

/// Per-variable-name call counts for one service (by the `VariableName`
/// argument's `Name` value).
pub fn variable_name_counts(calls: &[CallSummary], service: &str) -> BTreeMap<String, u64> {
    let mut counts = BTreeMap::new();
    for call in calls.iter().filter(|c| c.service == service) {
        if let Some(name) = call
            .in_args
            .iter()
            .find(|a| a.name == "VariableName")
            .and_then(|a| a.get("Name"))
            .and_then(|v| match v {
                ArgValue::Str(s) => Some(s.clone()),
                ArgValue::Int(_) => None,
            })
        {
            *counts.entry(name).or_insert(0) += 1;
        }
    }
    counts
}

/// A scenario's worth of reassembled calls plus their counts.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioObservation {
    pub stats: CallStats,
    pub calls: Vec<CallSummary>,
}

impl ScenarioObservation {
    pub fn from_calls(calls: Vec<CallSummary>) -> Self {
        ScenarioObservation {
            stats: count_by_service(&calls),
            calls,
        }
    }

    /// Parses and reassembles a full log.
    pub fn from_log(input: &str) -> (Self, Vec<ParseIssue>) {
        let (records, mut issues) = parse_log(input);
        let (calls, more) = reassemble_calls(&records);
        issues.extend(more);
        (Self::from_calls(calls), issues)
    }
}

/// Signed per-service differences `b - a`, with a per-variable-name
/// breakdown of the GetVariable delta.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ScenarioDelta {
    pub per_service: BTreeMap<String, i64>,
    pub total: i64,
    pub get_variable_names: BTreeMap<String, i64>,
}

pub fn compare_scenarios(a: &ScenarioObservation, b: &ScenarioObservation) -> ScenarioDelta {
    let mut per_service = BTreeMap::new();
    for key in a.stats.counts.keys().chain(b.stats.counts.keys()) {
        per_service.insert(
            key.clone(),
            b.stats.get(key) as i64 - a.stats.get(key) as i64,
        );
    }
    let names_a = variable_name_counts(&a.calls, "GetVariable");
    let names_b = variable_name_counts(&b.calls, "GetVariable");
    let mut get_variable_names = BTreeMap::new();
    for name in names_a.keys().chain(names_b.keys()) {
        let delta = names_b.get(name).copied().unwrap_or(0) as i64
            - names_a.get(name).copied().unwrap_or(0) as i64;
        if delta != 0 {
            get_variable_names.insert(name.clone(), delta);
        }
    }
    ScenarioDelta {
        per_service,
        total: b.stats.total as i64 - a.stats.total as i64,
        get_variable_names,
    }
}

/// Canonical row order: the 14 services first, unknown names after.
pub fn service_row_order<'a>(keys: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut known: Vec<String> = Vec::new();
    let mut unknown: Vec<String> = Vec::new();
    let mut present: Vec<&str> = keys.collect();
    present.sort_unstable();
    present.dedup();
    for service in ServiceName::ALL {
        if present.contains(&service.as_str()) {
            known.push(service.as_str().to_string());
        }
    }
    for key in present {
        if ServiceName::ALL.iter().all(|s| s.as_str() != key) {
            unknown.push(key.to_string());
        }
    }
    known.extend(unknown);
    known
}

/// Renders per-scenario counts as an aligned table: one row per service,
/// one column per scenario, and a trailing `Total` row.
pub fn format_stats_table(columns: &[(String, &CallStats)]) -> String {
    let rows = service_row_order(
        columns
            .iter()
            .flat_map(|(_, s)| s.counts.keys().map(String::as_str)),
    );
    let mut grid: Vec<Vec<String>> = Vec::new();
    let mut header = vec!["Runtime Service".to_string()];
    header.extend(columns.iter().map(|(name, _)| name.clone()));
    grid.push(header);
    for row in &rows {
        let mut line = vec![row.clone()];
        line.extend(columns.iter().map(|(_, s)| s.get(row).to_string()));
        grid.push(line);
    }
    let mut total_row = vec!["Total".to_string()];
    total_row.extend(columns.iter().map(|(_, s)| s.total.to_string()));
    grid.push(total_row);

    let cols = grid[0].len();
    let widths: Vec<usize> = (0..cols)
        .map(|c| grid.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &grid {
        for (c, cell) in row.iter().enumerate() {
            if c == 0 {
                out.push_str(&format!("{:<width$}", cell, width = widths[0]));
            } else {
                out.push_str(&format!("  {:>width$}", cell, width = widths[c]));
            }
        }
        while out.ends_with(' ') {
            out.pop();
        }
        out.push('\n');
    }
    out
}

/// Machine-readable stats: `{scenario, counts, total}`.
pub fn stats_json(scenario: &str, stats: &CallStats) -> serde_json::Value {
    serde_json::json!({
        "scenario": scenario,
        "counts": stats.counts,
        "total": stats.total,
    })
}
