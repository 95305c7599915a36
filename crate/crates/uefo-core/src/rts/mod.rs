//! Runtime-service dispatch table simulation.
//!
//! Models the firmware's 14-slot runtime-service table the way a tracing
//! driver sees it: each slot holds a handler pointer; installing a hook
//! stores the original pointer and swaps in the hook dispatcher; the one-shot
//! virtual-address-map conversion rebases every stored pointer by a signed
//! offset. Dispatching through a hooked slot emits trace records for every
//! IN argument, forwards to the stored original handler exactly once, then
//! emits records for every OUT argument.

pub mod scenario;
pub mod trace;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use trace::{emit_trace, ArgRecord, RecordType, TraceError, TraceSink};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RtsError {
    #[error("unknown runtime service {0:?}")]
    UnknownService(String),
    #[error("service {0} is already hooked")]
    AlreadyHooked(ServiceName),
    #[error("hooks can only be installed while the table is in physical (DXE) mode")]
    WrongPhase,
    #[error("virtual address map has already been set")]
    AlreadyVirtual,
    #[error("no handler registered at address 0x{0:x}")]
    DanglingHandler(u64),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
}

/// The 14 runtime services.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ServiceName {
    GetTime,
    SetTime,
    GetWakeupTime,
    SetWakeupTime,
    SetVirtualAddressMap,
    ConvertPointer,
    GetVariable,
    GetNextVariableName,
    SetVariable,
    GetNextHighMonotonicCount,
    ResetSystem,
    UpdateCapsule,
    QueryCapsuleCapabilities,
    QueryVariableInfo,
}

pub const SERVICE_COUNT: usize = 14;

impl ServiceName {
    pub const ALL: [ServiceName; SERVICE_COUNT] = [
        ServiceName::GetTime,
        ServiceName::SetTime,
        ServiceName::GetWakeupTime,
        ServiceName::SetWakeupTime,
        ServiceName::SetVirtualAddressMap,
        ServiceName::ConvertPointer,
        ServiceName::GetVariable,
        ServiceName::GetNextVariableName,
        ServiceName::SetVariable,
        ServiceName::GetNextHighMonotonicCount,
        ServiceName::ResetSystem,
        ServiceName::UpdateCapsule,
        ServiceName::QueryCapsuleCapabilities,
        ServiceName::QueryVariableInfo,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ServiceName::GetTime => "GetTime",
            ServiceName::SetTime => "SetTime",
            ServiceName::GetWakeupTime => "GetWakeupTime",
            ServiceName::SetWakeupTime => "SetWakeupTime",
            ServiceName::SetVirtualAddressMap => "SetVirtualAddressMap",
            ServiceName::ConvertPointer => "ConvertPointer",
            ServiceName::GetVariable => "GetVariable",
            ServiceName::GetNextVariableName => "GetNextVariableName",
            ServiceName::SetVariable => "SetVariable",
            ServiceName::GetNextHighMonotonicCount => "GetNextHighMonotonicCount",
            ServiceName::ResetSystem => "ResetSystem",
            ServiceName::UpdateCapsule => "UpdateCapsule",
            ServiceName::QueryCapsuleCapabilities => "QueryCapsuleCapabilities",
            ServiceName::QueryVariableInfo => "QueryVariableInfo",
        }
    }

    fn index(&self) -> usize {
        Self::ALL
            .iter()
            .position(|s| s == self)
            .expect("service is in ALL")
    }
}

impl fmt::Display for ServiceName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ServiceName {
    type Err = RtsError;

    fn from_str(s: &str) -> Result<Self, RtsError> {
        Self::ALL
            .iter()
            .find(|svc| svc.as_str() == s)
            .copied()
            .ok_or_else(|| RtsError::UnknownService(s.to_string()))
    }
}

/// A flat scalar value inside an argument's data map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ArgValue {
    Int(i64),
    Str(String),
}

impl From<i64> for ArgValue {
    fn from(v: i64) -> Self {
        ArgValue::Int(v)
    }
}

impl From<&str> for ArgValue {
    fn from(v: &str) -> Self {
        ArgValue::Str(v.to_string())
    }
}

pub type ArgData = Vec<(String, ArgValue)>;

/// One named argument of a call with its flat key/value data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Argument {
    pub name: String,
    pub data: ArgData,
}

impl Argument {
    pub fn new<N: Into<String>>(name: N, data: ArgData) -> Self {
        Argument {
            name: name.into(),
            data,
        }
    }

    pub fn get(&self, key: &str) -> Option<&ArgValue> {
        self.data.iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }
}

pub fn entry<K: Into<String>, V: Into<ArgValue>>(key: K, value: V) -> (String, ArgValue) {
    (key.into(), value.into())
}

/// A call about to be dispatched: the service plus its IN arguments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallRequest {
    pub service: ServiceName,
    pub in_args: Vec<Argument>,
}

impl CallRequest {
    pub fn new(service: ServiceName) -> Self {
        CallRequest {
            service,
            in_args: Vec::new(),
        }
    }

    pub fn with_arg(mut self, arg: Argument) -> Self {
        self.in_args.push(arg);
        self
    }

    /// The requested variable name, for variable services.
    pub fn variable_name(&self) -> Option<&str> {
        match self
            .in_args
            .iter()
            .find(|a| a.name == "VariableName")?
            .get("Name")?
        {
            ArgValue::Str(s) => Some(s),
            ArgValue::Int(_) => None,
        }
    }
}

/// What dispatch produced. With trace-only hooks this is identical to the
/// unhooked result; the trace is a pure side channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DispatchResult {
    Completed { out_args: Vec<Argument> },
    ResetTriggered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AddressMode {
    Physical,
    Virtual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HookPhase {
    Dxe,
    Runtime,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HookAction {
    /// Record the call and forward to the original handler.
    TraceOnly,
    /// On a GetVariable for the named variable, trigger a reset instead of
    /// invoking the original handler.
    ForcedReset { variable: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hook {
    pub service: ServiceName,
    pub action: HookAction,
}

impl Hook {
    pub fn trace(service: ServiceName) -> Self {
        Hook {
            service,
            action: HookAction::TraceOnly,
        }
    }

    pub fn trace_all() -> Vec<Hook> {
        ServiceName::ALL.iter().copied().map(Hook::trace).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct InstalledHook {
    action: HookAction,
    installed_at: HookPhase,
}

/// One dispatch-table slot as seen from outside.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotView {
    pub current: u64,
    pub original: Option<u64>,
    pub address_mode: AddressMode,
    pub hooked: bool,
}

#[derive(Debug, Clone)]
struct Slot {
    current: u64,
    original: Option<u64>,
    mode: AddressMode,
    hook: Option<InstalledHook>,
}

#[derive(Debug, Clone, Copy)]
enum Handler {
    Canned(ServiceName),
    Hook(ServiceName),
}

/// The canned GetTime result; configurable so traces stay deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClockConfig {
    pub year: i64,
    pub month: i64,
    pub day: i64,
    pub hour: i64,
    pub minute: i64,
    pub second: i64,
    pub pad1: i64,
    pub nanoseconds: i64,
    pub time_zone: i64,
    pub daylight: i64,
    pub pad2: i64,
}

impl Default for ClockConfig {
    fn default() -> Self {
        ClockConfig {
            year: 2020,
            month: 9,
            day: 22,
            hour: 16,
            minute: 12,
            second: 49,
            pad1: 0,
            nanoseconds: 0,
            time_zone: 2047,
            daylight: 0,
            pad2: 0,
        }
    }
}

impl ClockConfig {
    fn time_entries(&self) -> ArgData {
        vec![
            entry("Year", self.year),
            entry("Month", self.month),
            entry("Day", self.day),
            entry("Hour", self.hour),
            entry("Minute", self.minute),
            entry("Second", self.second),
            entry("Pad1", self.pad1),
            entry("Nanoseconds", self.nanoseconds),
            entry("TimeZone", self.time_zone),
            entry("Daylight", self.daylight),
            entry("Pad2", self.pad2),
        ]
    }
}

fn canned_addr(service: ServiceName) -> u64 {
    0x4000_0000 + service.index() as u64 * 0x40
}

fn hook_addr(service: ServiceName) -> u64 {
    0x5000_0000 + service.index() as u64 * 0x40
}

/// Fixed enumeration order used by the canned GetNextVariableName handler.
const VARIABLE_CYCLE: [&str; 8] = [
    "BootOrder",
    "BootCurrent",
    "Boot0000",
    "ConIn",
    "ConOut",
    "Lang",
    "OsIndications",
    "OsIndicationsSupported",
];

/// The simulated runtime-service table of one machine.
///
/// Strictly single-threaded during a run; distinct tables may run on
/// distinct threads.
#[derive(Debug, Clone)]
pub struct ServiceTable {
    slots: Vec<Slot>,
    registry: HashMap<u64, Handler>,
    virt_offset: Option<i64>,
    next_id: u64,
    clock: ClockConfig,
}

impl Default for ServiceTable {
    fn default() -> Self {
        Self::new()
    }
}

impl ServiceTable {
    /// A fresh table: 14 slots in physical mode, default canned handlers,
    /// nothing hooked.
    pub fn new() -> Self {
        let mut registry = HashMap::with_capacity(SERVICE_COUNT * 2);
        let mut slots = Vec::with_capacity(SERVICE_COUNT);
        for service in ServiceName::ALL {
            registry.insert(canned_addr(service), Handler::Canned(service));
            registry.insert(hook_addr(service), Handler::Hook(service));
            slots.push(Slot {
                current: canned_addr(service),
                original: None,
                mode: AddressMode::Physical,
                hook: None,
            });
        }
        ServiceTable {
            slots,
            registry,
            virt_offset: None,
            next_id: 0,
            clock: ClockConfig::default(),
        }
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    pub fn hooked_count(&self) -> usize {
        self.slots.iter().filter(|s| s.hook.is_some()).count()
    }

    pub fn slot(&self, service: ServiceName) -> SlotView {
        let s = &self.slots[service.index()];
        SlotView {
            current: s.current,
            original: s.original,
            address_mode: s.mode,
            hooked: s.hook.is_some(),
        }
    }

    /// Looks a slot up by service name string; `None` for unknown names.
    pub fn slot_by_name(&self, name: &str) -> Option<SlotView> {
        ServiceName::from_str(name).ok().map(|s| self.slot(s))
    }

    pub fn address_mode(&self) -> AddressMode {
        if self.virt_offset.is_some() {
            AddressMode::Virtual
        } else {
            AddressMode::Physical
        }
    }

    pub fn set_clock(&mut self, clock: ClockConfig) {
        self.clock = clock;
    }

    /// Installs hooks while still in the physical (DXE) phase. For each
    /// hooked slot the previous handler pointer is stored as the original
    /// and the slot is pointed at the hook dispatcher. Re-hooking a service
    /// is an error.
    pub fn install_hooks(&mut self, hooks: &[Hook]) -> Result<(), RtsError> {
        if self.virt_offset.is_some() {
            return Err(RtsError::WrongPhase);
        }
        let mut seen = [false; SERVICE_COUNT];
        for hook in hooks {
            let i = hook.service.index();
            if seen[i] || self.slots[i].hook.is_some() {
                return Err(RtsError::AlreadyHooked(hook.service));
            }
            seen[i] = true;
        }
        for hook in hooks {
            let slot = &mut self.slots[hook.service.index()];
            slot.original = Some(slot.current);
            slot.current = hook_addr(hook.service);
            slot.hook = Some(InstalledHook {
                action: hook.action.clone(),
                installed_at: HookPhase::Dxe,
            });
        }
        Ok(())
    }

    /// One-shot pointer conversion: every current and stored original
    /// handler reference is rebased by `offset` and the table switches to
    /// virtual mode. Routing through hooks is unaffected.
    pub fn set_virtual_address_map(&mut self, offset: i64) -> Result<(), RtsError> {
        if self.virt_offset.is_some() {
            return Err(RtsError::AlreadyVirtual);
        }
        for slot in &mut self.slots {
            slot.current = slot.current.wrapping_add(offset as u64);
            if let Some(orig) = slot.original {
                slot.original = Some(orig.wrapping_add(offset as u64));
            }
            slot.mode = AddressMode::Virtual;
        }
        self.virt_offset = Some(offset);
        Ok(())
    }

    /// Power-cycles the machine: fresh physical pointers, the same hook
    /// configuration reinstalled at DXE, and the trace call counter reset.
    pub fn reboot(&mut self) {
        let hooks: Vec<Hook> = ServiceName::ALL
            .iter()
            .filter_map(|&service| {
                self.slots[service.index()].hook.as_ref().map(|h| Hook {
                    service,
                    action: h.action.clone(),
                })
            })
            .collect();
        let clock = self.clock;
        *self = ServiceTable::new();
        self.clock = clock;
        self.install_hooks(&hooks)
            .expect("fresh table accepts hooks");
    }

    fn resolve(&self, addr: u64) -> Result<Handler, RtsError> {
        let physical = match self.virt_offset {
            Some(offset) => addr.wrapping_sub(offset as u64),
            None => addr,
        };
        self.registry
            .get(&physical)
            .copied()
            .ok_or(RtsError::DanglingHandler(addr))
    }

    /// Dispatches one call through the table. Hooked slots emit one trace
    /// record group per IN argument, invoke the original handler exactly
    /// once, then emit one group per OUT argument; unhooked slots produce
    /// the result with no trace at all.
    pub fn dispatch(
        &mut self,
        req: &CallRequest,
        sink: &mut dyn TraceSink,
    ) -> Result<DispatchResult, RtsError> {
        let idx = req.service.index();
        match self.resolve(self.slots[idx].current)? {
            Handler::Canned(target) => Ok(DispatchResult::Completed {
                out_args: self.canned_out_args(target, req),
            }),
            Handler::Hook(hooked_service) => {
                let id = self.next_id;
                self.next_id += 1;
                for arg in &req.in_args {
                    self.emit(sink, hooked_service, id, RecordType::In, arg)?;
                }
                let action = self.slots[idx]
                    .hook
                    .as_ref()
                    .map(|h| h.action.clone())
                    .unwrap_or(HookAction::TraceOnly);
                if let HookAction::ForcedReset { variable } = &action {
                    if hooked_service == ServiceName::GetVariable
                        && req.variable_name() == Some(variable.as_str())
                    {
                        return Ok(DispatchResult::ResetTriggered);
                    }
                }
                let original = self.slots[idx]
                    .original
                    .ok_or(RtsError::DanglingHandler(self.slots[idx].current))?;
                let Handler::Canned(target) = self.resolve(original)? else {
                    return Err(RtsError::DanglingHandler(original));
                };
                let out_args = self.canned_out_args(target, req);
                for arg in &out_args {
                    self.emit(sink, hooked_service, id, RecordType::Out, arg)?;
                }
                Ok(DispatchResult::Completed { out_args })
            }
        }
    }

    fn emit(
        &self,
        sink: &mut dyn TraceSink,
        service: ServiceName,
        id: u64,
        rtype: RecordType,
        arg: &Argument,
    ) -> Result<(), RtsError> {
        let lines = emit_trace(&ArgRecord {
            service: service.as_str(),
            id,
            rtype,
            argument: &arg.name,
            data: &arg.data,
        })?;
        for line in lines {
            sink.append(&line);
        }
        Ok(())
    }

    /// Canned, stateless simulation results for each service.
    fn canned_out_args(&self, service: ServiceName, req: &CallRequest) -> Vec<Argument> {
        match service {
            ServiceName::GetTime => vec![
                Argument::new("Time", self.clock.time_entries()),
                Argument::new(
                    "Capabilities",
                    vec![
                        entry("Resolution", 0),
                        entry("Accuracy", 0),
                        entry("SetsToZero", 0),
                    ],
                ),
            ],
            ServiceName::GetWakeupTime => vec![Argument::new(
                "Wakeup",
                vec![entry("Enabled", 0), entry("Pending", 0)],
            )],
            ServiceName::ConvertPointer => {
                let addr = req
                    .in_args
                    .iter()
                    .find(|a| a.name == "Pointer")
                    .and_then(|a| a.get("Address"))
                    .and_then(|v| match v {
                        ArgValue::Int(i) => Some(*i),
                        ArgValue::Str(_) => None,
                    })
                    .unwrap_or(0);
                vec![Argument::new("Pointer", vec![entry("Address", addr)])]
            }
            ServiceName::GetVariable => {
                let len = req.variable_name().map_or(0, |n| n.len() as i64);
                vec![Argument::new("Data", vec![entry("Size", (len + 1) * 2)])]
            }
            ServiceName::GetNextVariableName => {
                let prev = req.variable_name().unwrap_or("");
                let next = VARIABLE_CYCLE
                    .iter()
                    .position(|&n| n == prev)
                    .map(|i| VARIABLE_CYCLE[(i + 1) % VARIABLE_CYCLE.len()])
                    .unwrap_or(VARIABLE_CYCLE[0]);
                vec![Argument::new("NextVariableName", vec![entry("Name", next)])]
            }
            ServiceName::GetNextHighMonotonicCount => {
                vec![Argument::new("HighCount", vec![entry("Count", 1)])]
            }
            ServiceName::QueryCapsuleCapabilities => vec![Argument::new(
                "Capabilities",
                vec![entry("MaximumCapsuleSize", 65536), entry("ResetType", 0)],
            )],
            ServiceName::QueryVariableInfo => vec![Argument::new(
                "VariableInfo",
                vec![
                    entry("MaximumVariableStorageSize", 65536),
                    entry("RemainingVariableStorageSize", 32768),
                    entry("MaximumVariableSize", 1024),
                ],
            )],
            ServiceName::SetTime
            | ServiceName::SetWakeupTime
            | ServiceName::SetVirtualAddressMap
            | ServiceName::SetVariable
            | ServiceName::ResetSystem
            | ServiceName::UpdateCapsule => Vec::new(),
        }
    }
}

/// The EFI global-variable vendor GUID used by synthesized variable calls.
pub const GLOBAL_VARIABLE_GUID: &str = "8be4df61-93ca-11d2-aa0d-00e098032b8c";

/// Builds a GetVariable request for `name` under the global vendor GUID.
pub fn get_variable_request(name: &str) -> CallRequest {
    CallRequest::new(ServiceName::GetVariable)
        .with_arg(Argument::new("VariableName", vec![entry("Name", name)]))
        .with_arg(Argument::new(
            "VendorGuid",
            vec![entry("Guid", GLOBAL_VARIABLE_GUID)],
        ))
}
