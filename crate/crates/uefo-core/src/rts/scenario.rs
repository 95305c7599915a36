//! Scenario workload generation.
//!
//! A scenario is one or more boot segments, each a multiset of runtime
//! service calls with a variable-name distribution for the variable
//! services. Each segment models one machine run: the table is power-cycled
//! between segments, so trace call ids restart from zero. Call order within
//! a segment is a seeded shuffle; only the counts and name mixes are
//! contractual.
//!
//! Six scenarios ship built in: `boot`, `login`, `working`, `hour`,
//! `switch`, and `reboot`. A login (or logout) adds 32 GetVariable calls,
//! split evenly between `OsIndicationsSupported` and `OsIndications`. The
//! reboot scenario runs two boot segments; its second boot replays the first
//! with 45 more GetVariable calls, 69 more GetNextVariableName calls, and 55
//! fewer SetVariable calls, since most variables are only registered once.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::{MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::analysis::CallStats;
use crate::rts::trace::TraceSink;
use crate::rts::{
    entry, get_variable_request, Argument, CallRequest, RtsError, ServiceName, ServiceTable,
    GLOBAL_VARIABLE_GUID,
};

/// Ordered variable-name distribution: `(name, call count)` pairs.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct VariableMix(pub Vec<(String, u64)>);

impl VariableMix {
    pub fn total(&self) -> u64 {
        self.0.iter().map(|(_, n)| n).sum()
    }

    pub fn count_of(&self, name: &str) -> u64 {
        self.0
            .iter()
            .filter(|(n, _)| n == name)
            .map(|(_, c)| c)
            .sum()
    }

    /// Merges `deltas` into a copy of `self`, preserving existing order and
    /// appending new names at the end.
    fn with_added(&self, deltas: &[(&str, u64)]) -> VariableMix {
        let mut out = self.0.clone();
        for &(name, add) in deltas {
            match out.iter_mut().find(|(n, _)| n == name) {
                Some((_, c)) => *c += add,
                None => out.push((name.to_string(), add)),
            }
        }
        VariableMix(out)
    }

    fn expand(&self) -> Vec<&str> {
        let mut names = Vec::with_capacity(self.total() as usize);
        for (name, count) in &self.0 {
            for _ in 0..*count {
                names.push(name.as_str());
            }
        }
        names
    }
}

impl Serialize for VariableMix {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.0.len()))?;
        for (k, v) in &self.0 {
            map.serialize_entry(k, v)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for VariableMix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct MixVisitor;
        impl<'de> Visitor<'de> for MixVisitor {
            type Value = VariableMix;

            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a map of variable name to call count")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<Self::Value, A::Error> {
                let mut entries = Vec::new();
                while let Some((k, v)) = access.next_entry::<String, u64>()? {
                    entries.push((k, v));
                }
                Ok(VariableMix(entries))
            }
        }
        d.deserialize_map(MixVisitor)
    }
}

/// One boot segment: per-service call counts plus the name mixes for the
/// three variable services.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSpec {
    pub counts: BTreeMap<ServiceName, u64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub variable_mix: BTreeMap<ServiceName, VariableMix>,
}

impl SegmentSpec {
    fn validate(&self, index: usize) -> Result<(), RtsError> {
        for (service, mix) in &self.variable_mix {
            let count = self.counts.get(service).copied().unwrap_or(0);
            if mix.total() != count {
                return Err(RtsError::InvalidScenario(format!(
                    "segment {index}: {service} mix totals {} but count is {count}",
                    mix.total()
                )));
            }
        }
        Ok(())
    }

    fn total(&self) -> u64 {
        self.counts.values().sum()
    }
}

/// A named scenario: one or more boot segments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioSpec {
    pub name: String,
    pub segments: Vec<SegmentSpec>,
}

pub const BUILTIN_NAMES: [&str; 6] = ["boot", "login", "working", "hour", "switch", "reboot"];

impl ScenarioSpec {
    pub fn builtin(name: &str) -> Result<ScenarioSpec, RtsError> {
        let segments = match name {
            "boot" => vec![boot_segment()],
            "login" | "working" | "hour" => vec![login_segment()],
            "switch" => vec![switch_segment()],
            "reboot" => vec![login_segment(), second_boot_segment()],
            _ => return Err(RtsError::UnknownScenario(name.to_string())),
        };
        Ok(ScenarioSpec {
            name: name.to_string(),
            segments,
        })
    }

    pub fn boot_segments(&self) -> usize {
        self.segments.len()
    }

    pub fn total_counts(&self) -> BTreeMap<ServiceName, u64> {
        let mut totals = BTreeMap::new();
        for seg in &self.segments {
            for (&svc, &n) in &seg.counts {
                *totals.entry(svc).or_insert(0) += n;
            }
        }
        totals
    }

    pub fn total_calls(&self) -> u64 {
        self.segments.iter().map(SegmentSpec::total).sum()
    }

    pub fn validate(&self) -> Result<(), RtsError> {
        if self.segments.is_empty() {
            return Err(RtsError::InvalidScenario(
                "scenario has no segments".to_string(),
            ));
        }
        for (i, seg) in self.segments.iter().enumerate() {
            seg.validate(i)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut variable_mix: BTreeMap<ServiceName, VariableMix> = BTreeMap::new();
        for seg in &self.segments {
            for (&svc, mix) in &seg.variable_mix {
                let merged = variable_mix.entry(svc).or_default();
                *merged = merged.with_added(
                    &mix.0
                        .iter()
                        .map(|(n, c)| (n.as_str(), *c))
                        .collect::<Vec<_>>(),
                );
            }
        }
        let file = ScenarioFile {
            name: self.name.clone(),
            boot_segments: self.segments.len(),
            counts: self.total_counts(),
            variable_mix,
            segments: if self.segments.len() > 1 {
                self.segments.clone()
            } else {
                Vec::new()
            },
        };
        serde_json::to_string_pretty(&file).expect("scenario serializes")
    }

    pub fn from_json(text: &str) -> Result<ScenarioSpec, RtsError> {
        let file: ScenarioFile =
            serde_json::from_str(text).map_err(|e| RtsError::InvalidScenario(e.to_string()))?;
        let segments = if !file.segments.is_empty() {
            if file.segments.len() != file.boot_segments {
                return Err(RtsError::InvalidScenario(format!(
                    "boot_segments is {} but {} segments are listed",
                    file.boot_segments,
                    file.segments.len()
                )));
            }
            file.segments
        } else {
            split_evenly(&file.counts, &file.variable_mix, file.boot_segments.max(1))
        };
        let spec = ScenarioSpec {
            name: file.name,
            segments,
        };
        spec.validate()?;
        // The summary fields must agree with the segment detail.
        for (svc, total) in spec.total_counts() {
            if file.counts.get(&svc).copied().unwrap_or(0) != total {
                return Err(RtsError::InvalidScenario(format!(
                    "counts entry for {svc} disagrees with segment totals"
                )));
            }
        }
        Ok(spec)
    }
}

#[derive(Serialize, Deserialize)]
struct ScenarioFile {
    name: String,
    boot_segments: usize,
    counts: BTreeMap<ServiceName, u64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    variable_mix: BTreeMap<ServiceName, VariableMix>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    segments: Vec<SegmentSpec>,
}

/// Splits flat totals over `n` equal segments (remainder to the first).
fn split_evenly(
    counts: &BTreeMap<ServiceName, u64>,
    mixes: &BTreeMap<ServiceName, VariableMix>,
    n: usize,
) -> Vec<SegmentSpec> {
    let n64 = n as u64;
    (0..n64)
        .map(|i| {
            let share = |total: u64| total / n64 + if i < total % n64 { 1 } else { 0 };
            let seg_counts = counts.iter().map(|(&s, &c)| (s, share(c))).collect();
            let seg_mixes = mixes
                .iter()
                .map(|(&s, mix)| {
                    let entries = mix
                        .0
                        .iter()
                        .map(|(name, c)| (name.clone(), share(*c)))
                        .filter(|(_, c)| *c > 0)
                        .collect();
                    (s, VariableMix(entries))
                })
                .collect();
            SegmentSpec {
                counts: seg_counts,
                variable_mix: seg_mixes,
            }
        })
        .collect()
}

fn mix(entries: &[(&str, u64)]) -> VariableMix {
    VariableMix(entries.iter().map(|&(n, c)| (n.to_string(), c)).collect())
}

/// GetVariable names requested during a plain boot (754 calls).
const GET_VARIABLE_BOOT: &[(&str, u64)] = &[
    ("OsIndications", 29),
    ("OsIndicationsSupported", 30),
    ("BootOrder", 118),
    ("BootCurrent", 64),
    ("Boot0000", 52),
    ("Boot0001", 40),
    ("Boot0002", 28),
    ("Timeout", 36),
    ("PlatformLang", 74),
    ("Lang", 48),
    ("ConIn", 42),
    ("ConOut", 46),
    ("ErrOut", 34),
    ("SecureBoot", 45),
    ("SetupMode", 41),
    ("PlatformLangCodes", 27),
];

/// SetVariable writes during a plain boot (110 calls).
const SET_VARIABLE_BOOT: &[(&str, u64)] = &[
    ("BootOrder", 18),
    ("BootCurrent", 22),
    ("Boot0000", 12),
    ("OsIndications", 8),
    ("Timeout", 10),
    ("PlatformLang", 14),
    ("ConOut", 12),
    ("Lang", 14),
];

/// GetNextVariableName cursor values during a plain boot (499 calls).
const NEXT_NAME_BOOT: &[(&str, u64)] = &[
    ("", 5),
    ("BootOrder", 60),
    ("Boot0000", 60),
    ("Boot0001", 60),
    ("BootCurrent", 59),
    ("ConIn", 55),
    ("ConOut", 55),
    ("Lang", 55),
    ("PlatformLang", 45),
    ("SecureBoot", 45),
];

/// GetVariable calls added by one login or logout: 16 + 16.
const LOGIN_DELTA: &[(&str, u64)] = &[("OsIndicationsSupported", 16), ("OsIndications", 16)];

/// Extra GetVariable calls of a second boot (+45, OsIndications one more
/// than on the first boot).
const SECOND_BOOT_GET_DELTA: &[(&str, u64)] = &[
    ("OsIndications", 1),
    ("BootOrder", 12),
    ("BootCurrent", 8),
    ("Boot0000", 6),
    ("PlatformLang", 10),
    ("SecureBoot", 8),
];

/// SetVariable writes of a second boot (55: most variables are already
/// registered, OsIndications is only set on the first boot).
const SET_VARIABLE_SECOND: &[(&str, u64)] = &[
    ("BootCurrent", 22),
    ("BootOrder", 9),
    ("Timeout", 5),
    ("PlatformLang", 7),
    ("ConOut", 6),
    ("Lang", 6),
];

/// Extra GetNextVariableName calls of a second boot (+69).
const NEXT_NAME_SECOND_DELTA: &[(&str, u64)] = &[
    ("BootOrder", 20),
    ("Boot0000", 20),
    ("ConIn", 15),
    ("Lang", 14),
];

fn segment(
    get_time: u64,
    convert_pointer: u64,
    get_variable: VariableMix,
    set_variable: VariableMix,
    next_name: VariableMix,
) -> SegmentSpec {
    let mut counts = BTreeMap::new();
    counts.insert(ServiceName::GetTime, get_time);
    counts.insert(ServiceName::ConvertPointer, convert_pointer);
    counts.insert(ServiceName::GetVariable, get_variable.total());
    counts.insert(ServiceName::SetVariable, set_variable.total());
    counts.insert(ServiceName::GetNextVariableName, next_name.total());
    let mut variable_mix = BTreeMap::new();
    variable_mix.insert(ServiceName::GetVariable, get_variable);
    variable_mix.insert(ServiceName::SetVariable, set_variable);
    variable_mix.insert(ServiceName::GetNextVariableName, next_name);
    SegmentSpec {
        counts,
        variable_mix,
    }
}

fn boot_segment() -> SegmentSpec {
    segment(
        46,
        91,
        mix(GET_VARIABLE_BOOT),
        mix(SET_VARIABLE_BOOT),
        mix(NEXT_NAME_BOOT),
    )
}

fn login_segment() -> SegmentSpec {
    segment(
        46,
        91,
        mix(GET_VARIABLE_BOOT).with_added(LOGIN_DELTA),
        mix(SET_VARIABLE_BOOT),
        mix(NEXT_NAME_BOOT),
    )
}

fn switch_segment() -> SegmentSpec {
    // Boot, login, then a user switch: logout + login, 32 calls each.
    segment(
        46,
        91,
        mix(GET_VARIABLE_BOOT)
            .with_added(LOGIN_DELTA)
            .with_added(LOGIN_DELTA)
            .with_added(LOGIN_DELTA),
        mix(SET_VARIABLE_BOOT),
        mix(NEXT_NAME_BOOT),
    )
}

fn second_boot_segment() -> SegmentSpec {
    segment(
        46,
        91,
        mix(GET_VARIABLE_BOOT)
            .with_added(LOGIN_DELTA)
            .with_added(SECOND_BOOT_GET_DELTA),
        mix(SET_VARIABLE_SECOND),
        mix(NEXT_NAME_BOOT).with_added(NEXT_NAME_SECOND_DELTA),
    )
}

/// The product of a scenario run: the trace, overall per-service counts,
/// and per-segment counts.
#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub lines: Vec<String>,
    pub stats: CallStats,
    pub segment_stats: Vec<CallStats>,
}

/// Synthesizes and dispatches the scenario's call sequence through `table`.
///
/// The table should be hooked with trace-only hooks; segments after the
/// first power-cycle it (same hooks, fresh call ids). Deterministic for a
/// given `(spec, seed)`.
pub fn run_scenario(
    spec: &ScenarioSpec,
    table: &mut ServiceTable,
    seed: u64,
) -> Result<ScenarioRun, RtsError> {
    spec.validate()?;
    let mut lines: Vec<String> = Vec::new();
    let mut segment_stats = Vec::new();
    for (index, seg) in spec.segments.iter().enumerate() {
        if index > 0 {
            table.reboot();
        }
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut requests = build_requests(seg, &mut rng);
        requests.shuffle(&mut rng);
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        for req in &requests {
            table.dispatch(req, &mut lines as &mut dyn TraceSink)?;
            *counts.entry(req.service.to_string()).or_insert(0) += 1;
        }
        segment_stats.push(CallStats::from_counts(counts));
    }
    let mut stats = CallStats::default();
    for seg in &segment_stats {
        stats.add(seg);
    }
    Ok(ScenarioRun {
        lines,
        stats,
        segment_stats,
    })
}

fn build_requests(seg: &SegmentSpec, rng: &mut ChaCha8Rng) -> Vec<CallRequest> {
    let mut requests = Vec::with_capacity(seg.total() as usize);
    for (&service, &count) in &seg.counts {
        match service {
            ServiceName::GetVariable => {
                for name in names_for(seg, service, count) {
                    requests.push(get_variable_request(&name));
                }
            }
            ServiceName::SetVariable => {
                for name in names_for(seg, service, count) {
                    let size = (name.len() as i64 + 1) * 2;
                    requests.push(
                        CallRequest::new(ServiceName::SetVariable)
                            .with_arg(Argument::new(
                                "VariableName",
                                vec![entry("Name", name.as_str())],
                            ))
                            .with_arg(Argument::new(
                                "VendorGuid",
                                vec![entry("Guid", GLOBAL_VARIABLE_GUID)],
                            ))
                            .with_arg(Argument::new("Data", vec![entry("Size", size)])),
                    );
                }
            }
            ServiceName::GetNextVariableName => {
                for name in names_for(seg, service, count) {
                    requests.push(CallRequest::new(ServiceName::GetNextVariableName).with_arg(
                        Argument::new("VariableName", vec![entry("Name", name.as_str())]),
                    ));
                }
            }
            ServiceName::ConvertPointer => {
                for _ in 0..count {
                    let address = (rng.random::<u32>() as i64) & !0xfff;
                    requests.push(
                        CallRequest::new(ServiceName::ConvertPointer)
                            .with_arg(Argument::new("Pointer", vec![entry("Address", address)])),
                    );
                }
            }
            _ => {
                for _ in 0..count {
                    requests.push(CallRequest::new(service));
                }
            }
        }
    }
    requests
}

fn names_for(seg: &SegmentSpec, service: ServiceName, count: u64) -> Vec<String> {
    match seg.variable_mix.get(&service) {
        Some(mix) => mix.expand().into_iter().map(str::to_string).collect(),
        None => vec!["Variable".to_string(); count as usize],
    }
}
