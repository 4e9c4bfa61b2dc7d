//! Runtime control-transfer policy engine.
//!
//! The monitor mirrors the kernel's view of loaded modules and page
//! permissions, and judges every indirect control transfer against a simple
//! rule: execution may only land on an executable page that belongs to a
//! registered module, and never below the kernel boundary. It is passive
//! until configured, configuration happens exactly once, and every check is
//! safe to issue from any thread.
//!
//! Checking and reacting are deliberately split: `check_transfer` computes a
//! verdict with no side effects beyond recording the event, while `react`
//! turns a verdict into a continue/halt decision and a log line. A logging
//! failure never changes a decision — the log is evidence, not policy.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::fs::OpenOptions;
use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, RwLock};

pub const PAGE_SIZE: u32 = 0x1000;
/// Addresses at or above this are kernel space; transfers below it are
/// user-space targets and always denied.
pub const DEFAULT_KERNEL_BOUNDARY: u32 = 0x8000_0000;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MonitorError {
    /// `configure` was called a second time.
    AlreadyConfigured,
    /// The new module's range intersects an existing registration.
    ModuleOverlap { existing: String, base: u32 },
    /// No module registered at this base.
    UnknownModule(u32),
    /// The configured log path could not be opened.
    LogOpen(String),
}

impl fmt::Display for MonitorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MonitorError::AlreadyConfigured => write!(f, "monitor is already configured"),
            MonitorError::ModuleOverlap { existing, base } => {
                write!(f, "module at {base:#010x} overlaps registered module {existing}")
            }
            MonitorError::UnknownModule(base) => {
                write!(f, "no module registered at {base:#010x}")
            }
            MonitorError::LogOpen(e) => write!(f, "cannot open log file: {e}"),
        }
    }
}

impl std::error::Error for MonitorError {}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReactionMode {
    /// Record violations but let execution continue (observation mode).
    LogContinue,
    /// Record violations and stop the offending execution.
    LogHalt,
}

fn default_boundary() -> u32 {
    DEFAULT_KERNEL_BOUNDARY
}

/// Accept `"0x80000000"`, `"80000000"`, or a plain integer.
fn hex_or_int<'de, D>(de: D) -> Result<u32, D::Error>
where
    D: serde::Deserializer<'de>,
{
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(u32),
        Text(String),
    }
    match Raw::deserialize(de)? {
        Raw::Num(v) => Ok(v),
        Raw::Text(s) => {
            let t = s.trim();
            let (digits, radix) = match t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
                Some(h) => (h, 16),
                None => (t, 16),
            };
            u32::from_str_radix(digits, radix)
                .map_err(|_| serde::de::Error::custom(format!("bad address {s:?}")))
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub reaction: ReactionMode,
    /// Violations go to this file; without a path they are kept in memory.
    #[serde(default)]
    pub log_path: Option<String>,
    #[serde(default = "default_boundary", deserialize_with = "hex_or_int")]
    pub kernel_boundary: u32,
    /// Also deny transfers onto writable pages (strict W^X).
    #[serde(default)]
    pub strict_writable_deny: bool,
    /// Log allowed transfers too, not only violations.
    #[serde(default)]
    pub verbose: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            reaction: ReactionMode::LogHalt,
            log_path: None,
            kernel_boundary: DEFAULT_KERNEL_BOUNDARY,
            strict_writable_deny: false,
            verbose: false,
        }
    }
}

// ---------------------------------------------------------------------------
// Events
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferKind {
    Call,
    Jmp,
    Ret,
}

impl TransferKind {
    /// Stable numeric code used by instrumentation stubs.
    pub fn code(self) -> u32 {
        match self {
            TransferKind::Call => 1,
            TransferKind::Jmp => 2,
            TransferKind::Ret => 3,
        }
    }

    pub fn from_code(code: u32) -> Option<TransferKind> {
        match code {
            1 => Some(TransferKind::Call),
            2 => Some(TransferKind::Jmp),
            3 => Some(TransferKind::Ret),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TransferKind::Call => "call",
            TransferKind::Jmp => "jmp",
            TransferKind::Ret => "ret",
        }
    }
}

/// Why a transfer was denied, in the order the checks run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenyReason {
    /// Target is below the kernel boundary.
    UserSpaceTarget,
    /// Target page is not mapped at all.
    Unmapped,
    /// Target page is mapped but not executable.
    NotExecutable,
    /// Target page is executable but belongs to no registered module.
    OutsideModules,
    /// Strict mode: target page is writable.
    WritableTarget,
}

impl DenyReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DenyReason::UserSpaceTarget => "user_space_target",
            DenyReason::Unmapped => "unmapped",
            DenyReason::NotExecutable => "not_executable",
            DenyReason::OutsideModules => "outside_modules",
            DenyReason::WritableTarget => "writable_target",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Allowed,
    Denied(DenyReason),
}

impl Verdict {
    pub fn is_denied(self) -> bool {
        matches!(self, Verdict::Denied(_))
    }

    pub fn as_str(self) -> String {
        match self {
            Verdict::Allowed => "allow".to_string(),
            Verdict::Denied(r) => format!("deny:{}", r.as_str()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransferEvent {
    /// Monotonic sequence number, unique across threads.
    pub ts: u64,
    pub kind: TransferKind,
    pub source: u32,
    pub target: u32,
    pub verdict: Verdict,
}

impl TransferEvent {
    pub fn log_line(&self) -> String {
        format!(
            "{} {} {:#010x}->{:#010x} {}",
            self.ts,
            self.kind.as_str(),
            self.source,
            self.target,
            self.verdict.as_str()
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reaction {
    Continue,
    Halt,
}

// ---------------------------------------------------------------------------
// Module map
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModuleInfo {
    pub name: String,
    pub base: u32,
    pub size: u32,
}

impl ModuleInfo {
    fn contains(&self, addr: u32) -> bool {
        addr >= self.base && (addr - self.base) < self.size
    }

    fn overlaps(&self, base: u32, size: u32) -> bool {
        let a_end = self.base as u64 + self.size as u64;
        let b_end = base as u64 + size as u64;
        (self.base as u64) < b_end && (base as u64) < a_end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PagePerms {
    pub executable: bool,
    pub writable: bool,
}

/// What a system-information query is asking for. Only the module list is
/// sensitive: it tells an attacker where every driver lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InfoClass {
    SystemModuleInformation,
    SystemPerformanceInformation,
    SystemTimeOfDayInformation,
}

struct MapState {
    config: Option<PolicyConfig>,
    modules: BTreeMap<u32, ModuleInfo>,
    pages: BTreeMap<u32, PagePerms>,
}

enum LogSink {
    File(std::fs::File),
    Memory(Vec<String>),
}

// ---------------------------------------------------------------------------
// Monitor
// ---------------------------------------------------------------------------

/// Shared policy monitor. Lock order is always state before log; never hold
/// both across a call out of this module.
pub struct Monitor {
    state: RwLock<MapState>,
    log: Mutex<LogSink>,
    events: Mutex<Vec<TransferEvent>>,
    ts: AtomicU64,
    log_failures: AtomicU64,
    queries_filtered: AtomicU64,
}

impl Default for Monitor {
    fn default() -> Self {
        Monitor::new()
    }
}

impl Monitor {
    pub fn new() -> Monitor {
        Monitor {
            state: RwLock::new(MapState {
                config: None,
                modules: BTreeMap::new(),
                pages: BTreeMap::new(),
            }),
            log: Mutex::new(LogSink::Memory(Vec::new())),
            events: Mutex::new(Vec::new()),
            ts: AtomicU64::new(0),
            log_failures: AtomicU64::new(0),
            queries_filtered: AtomicU64::new(0),
        }
    }

    /// Apply the policy. Succeeds exactly once; the configuration is
    /// immutable afterwards.
    pub fn configure(&self, config: PolicyConfig) -> Result<(), MonitorError> {
        let mut state = self.state.write().unwrap();
        if state.config.is_some() {
            return Err(MonitorError::AlreadyConfigured);
        }
        let sink = match &config.log_path {
            Some(path) => {
                let file = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| MonitorError::LogOpen(format!("{path}: {e}")))?;
                LogSink::File(file)
            }
            None => LogSink::Memory(Vec::new()),
        };
        *self.log.lock().unwrap() = sink;
        state.config = Some(config);
        Ok(())
    }

    pub fn is_configured(&self) -> bool {
        self.state.read().unwrap().config.is_some()
    }

    pub fn config(&self) -> Option<PolicyConfig> {
        self.state.read().unwrap().config.clone()
    }

    // ---------- module and page map ----------

    pub fn register_module(&self, info: ModuleInfo) -> Result<(), MonitorError> {
        let mut state = self.state.write().unwrap();
        if let Some(hit) = state
            .modules
            .values()
            .find(|m| m.overlaps(info.base, info.size))
        {
            return Err(MonitorError::ModuleOverlap {
                existing: hit.name.clone(),
                base: info.base,
            });
        }
        state.modules.insert(info.base, info);
        Ok(())
    }

    pub fn unregister_module(&self, base: u32) -> Result<ModuleInfo, MonitorError> {
        let mut state = self.state.write().unwrap();
        state
            .modules
            .remove(&base)
            .ok_or(MonitorError::UnknownModule(base))
    }

    pub fn modules(&self) -> Vec<ModuleInfo> {
        self.state.read().unwrap().modules.values().cloned().collect()
    }

    /// Record permissions for every page touching `[addr, addr+len)`.
    pub fn set_pages(&self, addr: u32, len: u32, perms: PagePerms) {
        if len == 0 {
            return;
        }
        let mut state = self.state.write().unwrap();
        let first = addr & !(PAGE_SIZE - 1);
        let last = (addr as u64 + len as u64 - 1) as u32 & !(PAGE_SIZE - 1);
        let mut page = first;
        loop {
            state.pages.insert(page, perms);
            if page == last {
                break;
            }
            page += PAGE_SIZE;
        }
    }

    pub fn clear_pages(&self, addr: u32, len: u32) {
        if len == 0 {
            return;
        }
        let mut state = self.state.write().unwrap();
        let first = addr & !(PAGE_SIZE - 1);
        let last = (addr as u64 + len as u64 - 1) as u32 & !(PAGE_SIZE - 1);
        let mut page = first;
        loop {
            state.pages.remove(&page);
            if page == last {
                break;
            }
            page += PAGE_SIZE;
        }
    }

    pub fn page_perms(&self, addr: u32) -> Option<PagePerms> {
        self.state
            .read()
            .unwrap()
            .pages
            .get(&(addr & !(PAGE_SIZE - 1)))
            .copied()
    }

    // ---------- policy ----------

    /// Judge a control transfer. Before configuration everything is allowed;
    /// afterwards the checks run in a fixed order (boundary, mapping,
    /// executability, module membership, then strict writability) and the
    /// first failure becomes the verdict.
    pub fn check_transfer(&self, kind: TransferKind, source: u32, target: u32) -> TransferEvent {
        let state = self.state.read().unwrap();
        let verdict = match &state.config {
            None => Verdict::Allowed,
            Some(cfg) => {
                if target < cfg.kernel_boundary {
                    Verdict::Denied(DenyReason::UserSpaceTarget)
                } else {
                    match state.pages.get(&(target & !(PAGE_SIZE - 1))) {
                        None => Verdict::Denied(DenyReason::Unmapped),
                        Some(p) if !p.executable => Verdict::Denied(DenyReason::NotExecutable),
                        Some(p) => {
                            if !state.modules.values().any(|m| m.contains(target)) {
                                Verdict::Denied(DenyReason::OutsideModules)
                            } else if cfg.strict_writable_deny && p.writable {
                                Verdict::Denied(DenyReason::WritableTarget)
                            } else {
                                Verdict::Allowed
                            }
                        }
                    }
                }
            }
        };
        drop(state);
        let event = TransferEvent {
            ts: self.ts.fetch_add(1, Ordering::SeqCst) + 1,
            kind,
            source,
            target,
            verdict,
        };
        self.events.lock().unwrap().push(event);
        event
    }

    /// Turn a verdict into a decision, logging it as a side effect. Logging
    /// problems are counted and reported but never alter the decision.
    pub fn react(&self, event: &TransferEvent) -> Reaction {
        let (reaction_mode, verbose) = {
            let state = self.state.read().unwrap();
            match &state.config {
                None => return Reaction::Continue,
                Some(c) => (c.reaction, c.verbose),
            }
        };
        if event.verdict.is_denied() || verbose {
            let line = event.log_line();
            let mut sink = self.log.lock().unwrap();
            let outcome = match &mut *sink {
                LogSink::File(f) => writeln!(f, "{line}"),
                LogSink::Memory(v) => {
                    v.push(line);
                    Ok(())
                }
            };
            if let Err(e) = outcome {
                self.log_failures.fetch_add(1, Ordering::Relaxed);
                eprintln!("policy log write failed: {e}");
            }
        }
        match (reaction_mode, event.verdict.is_denied()) {
            (ReactionMode::LogHalt, true) => Reaction::Halt,
            _ => Reaction::Continue,
        }
    }

    /// Screen a system-information request: the module list is only visible
    /// to privileged callers, everything else passes through.
    pub fn filter_module_query(&self, privileged: bool, class: InfoClass) -> bool {
        let allowed = privileged || class != InfoClass::SystemModuleInformation;
        if !allowed {
            self.queries_filtered.fetch_add(1, Ordering::Relaxed);
        }
        allowed
    }

    // ---------- introspection ----------

    pub fn events(&self) -> Vec<TransferEvent> {
        self.events.lock().unwrap().clone()
    }

    pub fn denied_count(&self) -> usize {
        self.events
            .lock()
            .unwrap()
            .iter()
            .filter(|e| e.verdict.is_denied())
            .count()
    }

    /// Lines collected by the in-memory sink; `None` once a file sink is in
    /// use.
    pub fn log_lines(&self) -> Option<Vec<String>> {
        match &*self.log.lock().unwrap() {
            LogSink::Memory(v) => Some(v.clone()),
            LogSink::File(_) => None,
        }
    }

    pub fn log_failure_count(&self) -> u64 {
        self.log_failures.load(Ordering::Relaxed)
    }

    pub fn filtered_query_count(&self) -> u64 {
        self.queries_filtered.load(Ordering::Relaxed)
    }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
