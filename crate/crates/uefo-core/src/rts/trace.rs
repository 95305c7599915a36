//! Trace record emission.
//!
//! Each emitted line is the literal prefix `[RTSTracer]` followed by one
//! single-line JSON object of at most 255 characters (the prefix does not
//! count against the limit). Key order is fixed: `service`, `id`, `type`,
//! `argument`, `part`, `data`. Argument data that does not fit in one object
//! is split across multiple objects sharing service/id/type/argument with an
//! ascending `part` index; `part` is omitted on the first chunk.

use thiserror::Error;

use super::{ArgData, ArgValue};

pub const TRACE_PREFIX: &str = "[RTSTracer]";
/// Maximum characters of one JSON object, prefix excluded.
pub const MAX_RECORD_CHARS: usize = 255;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TraceError {
    #[error(
        "entry {key:?} of argument {argument:?} cannot be serialized within \
         a {MAX_RECORD_CHARS}-character record"
    )]
    UnserializableValue { argument: String, key: String },
}

/// Destination for emitted trace lines. One writer per table run.
pub trait TraceSink {
    fn append(&mut self, line: &str);
}

impl TraceSink for Vec<String> {
    fn append(&mut self, line: &str) {
        self.push(line.to_string());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum RecordType {
    In,
    Out,
}

impl RecordType {
    pub fn as_str(&self) -> &'static str {
        match self {
            RecordType::In => "IN",
            RecordType::Out => "OUT",
        }
    }
}

/// One logical argument record: a single argument of a single call.
#[derive(Debug, Clone, Copy)]
pub struct ArgRecord<'a> {
    pub service: &'a str,
    pub id: u64,
    pub rtype: RecordType,
    pub argument: &'a str,
    pub data: &'a [(String, ArgValue)],
}

fn json_string(s: &str) -> String {
    serde_json::to_string(s).expect("strings serialize")
}

fn render_value(v: &ArgValue) -> String {
    match v {
        ArgValue::Int(i) => i.to_string(),
        ArgValue::Str(s) => json_string(s),
    }
}

fn head(rec: &ArgRecord, part: usize) -> String {
    let mut s = format!(
        "{{\"service\":{},\"id\":{},\"type\":\"{}\",\"argument\":{}",
        json_string(rec.service),
        rec.id,
        rec.rtype.as_str(),
        json_string(rec.argument),
    );
    if part > 0 {
        s.push_str(&format!(",\"part\":{part}"));
    }
    s.push_str(",\"data\":{");
    s
}

fn chars(s: &str) -> usize {
    s.chars().count()
}

/// Renders one logical record as one or more prefixed trace lines.
pub fn emit_trace(rec: &ArgRecord) -> Result<Vec<String>, TraceError> {
    let entries: Vec<String> = rec
        .data
        .iter()
        .map(|(k, v)| format!("{}:{}", json_string(k), render_value(v)))
        .collect();

    let mut lines: Vec<String> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut current_len = 0usize; // entry chars incl. separating commas

    let flush = |lines: &mut Vec<String>, current: &[usize]| {
        let part = lines.len();
        let mut obj = head(rec, part);
        for (i, &e) in current.iter().enumerate() {
            if i > 0 {
                obj.push(',');
            }
            obj.push_str(&entries[e]);
        }
        obj.push_str("}}");
        debug_assert!(chars(&obj) <= MAX_RECORD_CHARS);
        lines.push(format!("{TRACE_PREFIX}{obj}"));
    };

    for (i, rendered) in entries.iter().enumerate() {
        let entry_chars = chars(rendered);
        let part = lines.len();
        let head_chars = chars(&head(rec, part));
        let sep = if current.is_empty() { 0 } else { 1 };
        if head_chars + current_len + sep + entry_chars + 2 <= MAX_RECORD_CHARS {
            current_len += sep + entry_chars;
            current.push(i);
            continue;
        }
        if current.is_empty() {
            return Err(TraceError::UnserializableValue {
                argument: rec.argument.to_string(),
                key: rec.data[i].0.clone(),
            });
        }
        flush(&mut lines, &current);
        current.clear();
        // Re-check the entry alone against the next chunk's head (the part
        // field makes it slightly longer).
        let head_chars = chars(&head(rec, lines.len()));
        if head_chars + entry_chars + 2 > MAX_RECORD_CHARS {
            return Err(TraceError::UnserializableValue {
                argument: rec.argument.to_string(),
                key: rec.data[i].0.clone(),
            });
        }
        current_len = entry_chars;
        current.push(i);
    }
    flush(&mut lines, &current);
    Ok(lines)
}

/// Convenience used by tests: emits a whole call (all IN then all OUT args)
/// under one id.
pub fn emit_call(
    service: &str,
    id: u64,
    in_args: &[(String, ArgData)],
    out_args: &[(String, ArgData)],
) -> Result<Vec<String>, TraceError> {
    let mut lines = Vec::new();
    for (rtype, args) in [(RecordType::In, in_args), (RecordType::Out, out_args)] {
        for (name, data) in args {
            lines.extend(emit_trace(&ArgRecord {
                service,
                id,
                rtype,
                argument: name,
                data,
            })?);
        }
    }
    Ok(lines)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rts::entry;

    fn example_time_data() -> ArgData {
        vec![
            entry("Year", 2020),
            entry("Month", 9),
            entry("Day", 22),
            entry("Hour", 16),
            entry("Minute", 12),
            entry("Second", 49),
            entry("Pad1", 0),
            entry("Nanoseconds", 0),
            entry("TimeZone", 2047),
            entry("Daylight", 0),
            entry("Pad2", 0),
        ]
    }

    #[test]
    fn get_time_record_fits_one_line() {
        let data = example_time_data();
        let lines = emit_trace(&ArgRecord {
            service: "GetTime",
            id: 0,
            rtype: RecordType::Out,
            argument: "Time",
            data: &data,
        })
        .unwrap();
        assert_eq!(lines.len(), 1);
        let payload = lines[0].strip_prefix(TRACE_PREFIX).unwrap();
        assert!(payload.chars().count() <= MAX_RECORD_CHARS);
        let value: serde_json::Value = serde_json::from_str(payload).unwrap();
        assert_eq!(value["service"], "GetTime");
        assert_eq!(value["id"], 0);
        assert_eq!(value["type"], "OUT");
        assert_eq!(value["argument"], "Time");
        assert_eq!(value["data"]["TimeZone"], 2047);
        assert!(value.get("part").is_none());
    }

    #[test]
    fn empty_data_map_emits_one_line() {
        let lines = emit_trace(&ArgRecord {
            service: "SetTime",
            id: 3,
            rtype: RecordType::In,
            argument: "Time",
            data: &[],
        })
        .unwrap();
        assert_eq!(lines.len(), 1);
        assert!(lines[0].ends_with("\"data\":{}}"));
    }

    #[test]
    fn oversized_map_splits_into_parts() {
        let data: ArgData = (0..40)
            .map(|i| entry(format!("Field{i:05}"), i as i64))
            .collect();
        let lines = emit_trace(&ArgRecord {
            service: "GetVariable",
            id: 9,
            rtype: RecordType::Out,
            argument: "Data",
            data: &data,
        })
        .unwrap();
        assert!(lines.len() > 1);
        for (i, line) in lines.iter().enumerate() {
            let payload = line.strip_prefix(TRACE_PREFIX).unwrap();
            assert!(
                payload.chars().count() <= MAX_RECORD_CHARS,
                "line {i} too long"
            );
            let value: serde_json::Value = serde_json::from_str(payload).unwrap();
            if i == 0 {
                assert!(value.get("part").is_none());
            } else {
                assert_eq!(value["part"], i as u64);
            }
        }
        // All entries survive, in order, across the chunks.
        let mut seen = Vec::new();
        for line in &lines {
            let payload = line.strip_prefix(TRACE_PREFIX).unwrap();
            let value: serde_json::Value = serde_json::from_str(payload).unwrap();
            for (k, v) in value["data"].as_object().unwrap() {
                seen.push((k.clone(), v.as_i64().unwrap()));
            }
        }
        let expected: Vec<(String, i64)> = (0..40)
            .map(|i| (format!("Field{i:05}"), i as i64))
            .collect();
        assert_eq!(seen, expected);
    }

    #[test]
    fn single_oversized_entry_is_unserializable() {
        let data: ArgData = vec![entry("Blob", "x".repeat(300).as_str())];
        let err = emit_trace(&ArgRecord {
            service: "GetVariable",
            id: 0,
            rtype: RecordType::Out,
            argument: "Data",
            data: &data,
        })
        .unwrap_err();
        assert_eq!(
            err,
            TraceError::UnserializableValue {
                argument: "Data".to_string(),
                key: "Blob".to_string()
            }
        );
    }

    #[test]
    fn string_values_are_escaped() {
        let data: ArgData = vec![entry("Name", "quo\"te\\path")];
        let lines = emit_trace(&ArgRecord {
            service: "GetVariable",
            id: 1,
            rtype: RecordType::In,
            argument: "VariableName",
            data: &data,
        })
        .unwrap();
        let payload = lines[0].strip_prefix(TRACE_PREFIX).unwrap();
        let value: serde_json::Value = serde_json::from_str(payload).unwrap();
        assert_eq!(value["data"]["Name"], "quo\"te\\path");
    }
}
