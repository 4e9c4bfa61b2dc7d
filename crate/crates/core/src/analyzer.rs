//! Code discovery: turns a parsed image into functions and basic blocks.
//!
//! Discovery is seeded three ways: the image entry point, a plain-text symbol
//! sidecar, and every relocated 32-bit value that points into an executable
//! section. Seeds from the first two are *solid* (we trust them); relocation
//! landings are *prospects* (a relocated pointer into code is probably a
//! function pointer, but might be data that merely looks like one). The
//! distinction matters because misclassifying data as code must never damage
//! the image: a prospect that disagrees with already-discovered code is
//! simply abandoned, and prospects face stricter patchability checks.
//!
//! Each function is explored by recursive traversal with its own private
//! instruction map, so two functions may both own a shared tail block. Any
//! decode failure, branch into a non-executable section, or branch into the
//! middle of an existing instruction terminates that path and taints the
//! function as unpatchable — it is safer to leave real code uninstrumented
//! than to rewrite bytes that might be data.

use crate::disasm::{self, Instruction, XferClass};
use crate::pe::PeImage;
use serde_json::json;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::time::Instant;

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    /// Entry point or symbol-file seed: definitely code.
    Solid,
    /// Relocation-landing seed: probably code.
    Prospect,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Solid => "solid",
            Origin::Prospect => "prospect",
        }
    }
}

/// Why the last instruction ends its basic block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Terminator {
    /// Block was cut by a label or a gap, not by a transfer.
    Fallthrough,
    Jmp,
    Jcc,
    /// Ends with a call; execution resumes at the next instruction.
    CallFallthrough,
    Ret,
    /// Indirect jump: successors unknown statically.
    Indirect,
}

impl Terminator {
    pub fn as_str(self) -> &'static str {
        match self {
            Terminator::Fallthrough => "fallthrough",
            Terminator::Jmp => "jmp",
            Terminator::Jcc => "jcc",
            Terminator::CallFallthrough => "call_fallthrough",
            Terminator::Ret => "ret",
            Terminator::Indirect => "indirect",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BasicBlock {
    pub start: u32,
    /// One past the last instruction byte.
    pub end: u32,
    pub instructions: Vec<Instruction>,
    pub terminator: Terminator,
    /// Block-start RVAs control may continue at (taken target first for
    /// conditional branches).
    pub successors: Vec<u32>,
}

impl BasicBlock {
    pub fn byte_len(&self) -> u32 {
        self.end - self.start
    }
}

/// Why a function was left unpatched in place.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    EntryBlockTooSmall,
    ProspectSingleBlock,
    ProspectAllText,
    DecodeFailure,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::EntryBlockTooSmall => "entry_block_too_small",
            RejectReason::ProspectSingleBlock => "prospect_single_block",
            RejectReason::ProspectAllText => "prospect_all_text",
            RejectReason::DecodeFailure => "decode_failure",
        }
    }
}

#[derive(Debug, Clone)]
pub struct FunctionRecord {
    pub entry: u32,
    pub origin: Origin,
    pub name: Option<String>,
    /// Entry block first, remaining blocks in ascending address order.
    pub blocks: Vec<BasicBlock>,
    pub patchable: bool,
    pub reject_reason: Option<RejectReason>,
    pub had_decode_failure: bool,
}

impl FunctionRecord {
    pub fn entry_block(&self) -> &BasicBlock {
        &self.blocks[0]
    }

    pub fn instruction_count(&self) -> usize {
        self.blocks.iter().map(|b| b.instructions.len()).sum()
    }

    /// Blocks in plain address order (the layout they occupy in the image).
    pub fn blocks_by_address(&self) -> Vec<&BasicBlock> {
        let mut v: Vec<&BasicBlock> = self.blocks.iter().collect();
        v.sort_by_key(|b| b.start);
        v
    }
}

#[derive(Debug, Clone, Default)]
pub struct AnalyzerTimings {
    /// Time spent decoding instruction paths.
    pub decode_us: u128,
    /// Time spent forming blocks and judging patchability.
    pub blocks_us: u128,
}

#[derive(Debug, Clone)]
pub struct CodeGraph {
    pub functions: BTreeMap<u32, FunctionRecord>,
    /// RVAs where discovery hit an inconsistency: decode failures on live
    /// paths, branches out of executable sections, or seeds/branches landing
    /// inside an already-decoded instruction.
    pub conflicts: Vec<u32>,
    pub timings: AnalyzerTimings,
}

impl CodeGraph {
    pub fn instruction_count(&self) -> usize {
        self.functions.values().map(|f| f.instruction_count()).sum()
    }

    pub fn block_count(&self) -> usize {
        self.functions.values().map(|f| f.blocks.len()).sum()
    }

    pub fn patchable_count(&self) -> usize {
        self.functions.values().filter(|f| f.patchable).count()
    }

    /// Structured JSON view of the graph for tooling.
    pub fn to_json(&self) -> serde_json::Value {
        let functions: Vec<serde_json::Value> = self
            .functions
            .values()
            .map(|f| {
                json!({
                    "entry": format!("{:#x}", f.entry),
                    "origin": f.origin.as_str(),
                    "name": f.name,
                    "patchable": f.patchable,
                    "reject_reason": f.reject_reason.map(RejectReason::as_str),
                    "blocks": f.blocks.iter().map(|b| json!({
                        "start": format!("{:#x}", b.start),
                        "end": format!("{:#x}", b.end),
                        "instructions": b.instructions.len(),
                        "terminator": b.terminator.as_str(),
                        "successors": b.successors.iter().map(|s| format!("{s:#x}")).collect::<Vec<_>>(),
                    })).collect::<Vec<_>>(),
                })
            })
            .collect();
        json!({
            "functions": functions,
            "conflicts": self.conflicts.iter().map(|c| format!("{c:#x}")).collect::<Vec<_>>(),
            "instruction_count": self.instruction_count(),
            "block_count": self.block_count(),
        })
    }
}

// ---------------------------------------------------------------------------
// Symbol sidecar
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SidecarKind {
    Func,
    /// Function that never returns; the bytes after a call to it may be data.
    NoReturn,
}

#[derive(Debug, Clone)]
pub struct SidecarEntry {
    pub rva: u32,
    pub kind: SidecarKind,
    pub name: String,
}

#[derive(Debug, Clone, Default)]
pub struct SymbolTable {
    pub entries: Vec<SidecarEntry>,
}

impl SymbolTable {
    pub fn noreturn_set(&self) -> BTreeSet<u32> {
        self.entries
            .iter()
            .filter(|e| e.kind == SidecarKind::NoReturn)
            .map(|e| e.rva)
            .collect()
    }

    pub fn name_of(&self, rva: u32) -> Option<&str> {
        self.entries
            .iter()
            .find(|e| e.rva == rva)
            .map(|e| e.name.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SidecarError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for SidecarError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "symbol file line {}: {}", self.line, self.message)
    }
}

impl std::error::Error for SidecarError {}

/// Parse a symbol sidecar: one `RVA kind name` triple per line, where RVA is
/// hex (with or without `0x`) and kind is `func` or `noreturn`. `#` starts a
/// comment.
pub fn parse_sidecar(text: &str) -> Result<SymbolTable, SidecarError> {
    let mut entries = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let err = |message: String| SidecarError {
            line: n + 1,
            message,
        };
        let rva_s = parts.next().unwrap();
        let rva = u32::from_str_radix(rva_s.trim_start_matches("0x"), 16)
            .map_err(|_| err(format!("bad RVA {rva_s:?}")))?;
        let kind = match parts.next() {
            Some("func") => SidecarKind::Func,
            Some("noreturn") => SidecarKind::NoReturn,
            other => return Err(err(format!("bad kind {other:?}"))),
        };
        let name = parts
            .next()
            .ok_or_else(|| err("missing symbol name".to_string()))?
            .to_string();
        if parts.next().is_some() {
            return Err(err("trailing tokens".to_string()));
        }
        entries.push(SidecarEntry { rva, kind, name });
    }
    Ok(SymbolTable { entries })
}

// ---------------------------------------------------------------------------
// Seeding
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Seed {
    pub rva: u32,
    pub origin: Origin,
    pub name: Option<String>,
}

fn in_executable_section(image: &PeImage, rva: u32) -> bool {
    image
        .section_containing(rva)
        .is_some_and(|i| image.sections()[i].executable())
}

/// Collect discovery seeds: entry point and sidecar symbols as solid seeds,
/// then every relocated value that lands in executable code as a prospect.
pub fn seed_entries(image: &PeImage, sidecar: Option<&SymbolTable>) -> Vec<Seed> {
    let mut seeds = Vec::new();
    let mut seen = BTreeSet::new();

    let mut push = |rva: u32, origin: Origin, name: Option<String>, seeds: &mut Vec<Seed>| {
        if seen.insert(rva) {
            seeds.push(Seed { rva, origin, name });
        }
    };

    if image.entry_point() != 0 {
        let name = sidecar
            .and_then(|s| s.name_of(image.entry_point()))
            .map(str::to_string);
        push(image.entry_point(), Origin::Solid, name, &mut seeds);
    }
    if let Some(table) = sidecar {
        for e in &table.entries {
            push(e.rva, Origin::Solid, Some(e.name.clone()), &mut seeds);
        }
    }

    let mut prospects = BTreeSet::new();
    for r in image.relocations() {
        let Some(value) = image.read_u32(r.rva) else {
            continue;
        };
        let Some(rva) = value.checked_sub(image.image_base()) else {
            continue;
        };
        if in_executable_section(image, rva) {
            prospects.insert(rva);
        }
    }
    for rva in prospects {
        push(rva, Origin::Prospect, None, &mut seeds);
    }
    seeds
}

// ---------------------------------------------------------------------------
// Text detection
// ---------------------------------------------------------------------------

fn printable(b: u8) -> bool {
    matches!(b, 0x09 | 0x0A | 0x0D | 0x20..=0x7E)
}

/// Is this byte run plausible ASCII or UTF-16LE text? Used to demote
/// prospect "functions" that are really string data whose bytes happen to
/// decode as instructions.
pub fn is_all_text(bytes: &[u8]) -> bool {
    if bytes.is_empty() {
        return false;
    }
    if bytes.iter().all(|&b| printable(b)) {
        return true;
    }
    bytes.len().is_multiple_of(2)
        && bytes
            .chunks_exact(2)
            .all(|p| printable(p[0]) && p[1] == 0)
}

// ---------------------------------------------------------------------------
// Per-function exploration
// ---------------------------------------------------------------------------

struct Explored {
    decoded: BTreeMap<u32, Instruction>,
    block_starts: BTreeSet<u32>,
    conflicts: Vec<u32>,
    had_decode_failure: bool,
    call_targets: Vec<u32>,
}

fn lands_mid_instruction(decoded: &BTreeMap<u32, Instruction>, rva: u32) -> bool {
    decoded
        .range(..=rva)
        .next_back()
        .is_some_and(|(&s, i)| s != rva && rva < s + i.length as u32)
}

/// Walk every path reachable from `entry` inside executable sections,
/// recording instruction frames. Paths stop at returns, indirect jumps,
/// calls to no-return functions, and on any inconsistency.
fn explore_function(image: &PeImage, entry: u32, noreturn: &BTreeSet<u32>) -> Explored {
    let mut ex = Explored {
        decoded: BTreeMap::new(),
        block_starts: BTreeSet::new(),
        conflicts: Vec::new(),
        had_decode_failure: false,
        call_targets: Vec::new(),
    };
    let mut pending = vec![entry];
    ex.block_starts.insert(entry);

    while let Some(start) = pending.pop() {
        let mut pc = start;
        loop {
            if ex.decoded.contains_key(&pc) {
                break; // joined a previously walked path
            }
            if lands_mid_instruction(&ex.decoded, pc) {
                ex.conflicts.push(pc);
                ex.had_decode_failure = true;
                break;
            }
            let window = image
                .section_containing(pc)
                .filter(|&i| image.sections()[i].executable())
                .and_then(|i| {
                    let s = &image.sections()[i];
                    let off = (pc - s.rva) as usize;
                    let end = s.raw_data.len().min(off + 16);
                    s.raw_data.get(off..end)
                });
            let Some(window) = window else {
                ex.conflicts.push(pc);
                ex.had_decode_failure = true;
                break;
            };
            let instr = match disasm::decode(window, pc) {
                Ok(i) => i,
                Err(_) => {
                    ex.conflicts.push(pc);
                    ex.had_decode_failure = true;
                    break;
                }
            };
            let next = instr.end_rva();
            let xfer = instr.xfer;
            let rel = instr.rel_target();
            ex.decoded.insert(pc, instr);
            match xfer {
                XferClass::None => pc = next,
                XferClass::CallRel => {
                    let target = rel.expect("relative call has a target");
                    if in_executable_section(image, target) {
                        ex.call_targets.push(target);
                    } else {
                        ex.conflicts.push(target);
                        ex.had_decode_failure = true;
                    }
                    if noreturn.contains(&target) {
                        break; // bytes after a no-return call may be data
                    }
                    ex.block_starts.insert(next);
                    pc = next;
                }
                XferClass::CallInd => {
                    ex.block_starts.insert(next);
                    pc = next;
                }
                XferClass::Jcc => {
                    let target = rel.expect("jcc has a target");
                    if in_executable_section(image, target) {
                        ex.block_starts.insert(target);
                        pending.push(target);
                    } else {
                        ex.conflicts.push(target);
                        ex.had_decode_failure = true;
                    }
                    ex.block_starts.insert(next);
                    pc = next;
                }
                XferClass::JmpRel => {
                    let target = rel.expect("relative jmp has a target");
                    if in_executable_section(image, target) {
                        ex.block_starts.insert(target);
                        pending.push(target);
                    } else {
                        ex.conflicts.push(target);
                        ex.had_decode_failure = true;
                    }
                    break;
                }
                XferClass::JmpInd | XferClass::Ret => break,
            }
        }
    }
    ex
}

/// Group a function's decoded instructions into basic blocks.
fn build_blocks(ex: &Explored, noreturn: &BTreeSet<u32>) -> Vec<BasicBlock> {
    let mut blocks = Vec::new();
    let mut cur: Vec<Instruction> = Vec::new();
    let mut cur_start = 0u32;

    let rvas: Vec<u32> = ex.decoded.keys().copied().collect();
    for (n, &rva) in rvas.iter().enumerate() {
        let instr = &ex.decoded[&rva];
        if cur.is_empty() {
            cur_start = rva;
        }
        cur.push(instr.clone());
        let next = instr.end_rva();
        let next_is_contiguous = rvas.get(n + 1) == Some(&next);

        let close = instr.is_transfer()
            || !next_is_contiguous
            || ex.block_starts.contains(&next);
        if !close {
            continue;
        }
        let (terminator, successors) = match instr.xfer {
            XferClass::Jcc => (
                Terminator::Jcc,
                vec![instr.rel_target().expect("jcc target"), next],
            ),
            XferClass::JmpRel => (Terminator::Jmp, vec![instr.rel_target().expect("jmp target")]),
            XferClass::JmpInd => (Terminator::Indirect, Vec::new()),
            XferClass::Ret => (Terminator::Ret, Vec::new()),
            XferClass::CallRel => {
                let target = instr.rel_target().expect("call target");
                if noreturn.contains(&target) {
                    (Terminator::CallFallthrough, Vec::new())
                } else {
                    (Terminator::CallFallthrough, vec![next])
                }
            }
            XferClass::CallInd => (Terminator::CallFallthrough, vec![next]),
            XferClass::None => {
                // Cut by a label or a gap.
                if next_is_contiguous {
                    (Terminator::Fallthrough, vec![next])
                } else {
                    (Terminator::Fallthrough, Vec::new())
                }
            }
        };
        blocks.push(BasicBlock {
            start: cur_start,
            end: next,
            instructions: std::mem::take(&mut cur),
            terminator,
            successors,
        });
    }
    blocks
}

// ---------------------------------------------------------------------------
// Patchability
// ---------------------------------------------------------------------------

/// Decide whether a function can be safely moved and instrumented, recording
/// the first disqualifying reason otherwise. A five-byte jump must fit in
/// the entry block, prospects need more than one block and must not read as
/// plain text, and any discovery inconsistency disqualifies outright.
pub fn decide_patchability(f: &mut FunctionRecord) {
    let reason = patch_reject_reason(f);
    f.patchable = reason.is_none();
    f.reject_reason = reason;
}

fn patch_reject_reason(f: &FunctionRecord) -> Option<RejectReason> {
    if f.blocks.is_empty() {
        return Some(RejectReason::DecodeFailure);
    }
    let entry_len: u32 = f.entry_block().byte_len();
    if entry_len < 5 {
        return Some(RejectReason::EntryBlockTooSmall);
    }
    if f.origin == Origin::Prospect {
        if f.blocks.len() == 1 {
            return Some(RejectReason::ProspectSingleBlock);
        }
        let mut bytes = Vec::new();
        for b in f.blocks_by_address() {
            for i in &b.instructions {
                bytes.extend_from_slice(&disasm::encode(i).expect("decoded instruction encodes"));
            }
        }
        if is_all_text(&bytes) {
            return Some(RejectReason::ProspectAllText);
        }
    }
    if f.had_decode_failure {
        return Some(RejectReason::DecodeFailure);
    }
    None
}

// ---------------------------------------------------------------------------
// Whole-image analysis
// ---------------------------------------------------------------------------

struct Coverage {
    // rva of instruction start -> length
    map: BTreeMap<u32, u8>,
}

impl Coverage {
    fn new() -> Self {
        Coverage {
            map: BTreeMap::new(),
        }
    }

    fn mid_instruction(&self, rva: u32) -> bool {
        self.map
            .range(..=rva)
            .next_back()
            .is_some_and(|(&s, &l)| s != rva && rva < s + l as u32)
    }

    /// Record a function's frames. Returns RVAs where the new frames
    /// disagree with existing ones (either direction).
    fn merge(&mut self, decoded: &BTreeMap<u32, Instruction>) -> Vec<u32> {
        let mut conflicts = Vec::new();
        for (&rva, i) in decoded {
            if self.mid_instruction(rva) {
                conflicts.push(rva);
                continue;
            }
            let end = rva + i.length as u32;
            for (&other, _) in self.map.range(rva + 1..end) {
                conflicts.push(other);
            }
            self.map.entry(rva).or_insert(i.length);
        }
        conflicts
    }
}

/// Discover all functions in `image`, decide patchability for each, and
/// report framing conflicts.
pub fn analyze(image: &PeImage, sidecar: Option<&SymbolTable>) -> CodeGraph {
    let noreturn = sidecar.map(SymbolTable::noreturn_set).unwrap_or_default();
    let seeds = seed_entries(image, sidecar);

    let mut functions: BTreeMap<u32, FunctionRecord> = BTreeMap::new();
    let mut coverage = Coverage::new();
    let mut conflicts: Vec<u32> = Vec::new();
    let mut done: BTreeSet<u32> = BTreeSet::new();
    let mut timings = AnalyzerTimings::default();

    // Solid seeds first so prospects can never displace trusted code, then
    // prospects in ascending address order. Call targets inherit the
    // discovering function's origin and are processed in the same wave.
    for wave in [Origin::Solid, Origin::Prospect] {
        let mut queue: VecDeque<Seed> = seeds
            .iter()
            .filter(|s| s.origin == wave)
            .cloned()
            .collect();
        while let Some(seed) = queue.pop_front() {
            if !done.insert(seed.rva) {
                continue;
            }
            if coverage.mid_instruction(seed.rva) {
                // Lands inside an instruction someone else already owns.
                conflicts.push(seed.rva);
                continue;
            }
            let t0 = Instant::now();
            let ex = explore_function(image, seed.rva, &noreturn);
            timings.decode_us += t0.elapsed().as_micros();
            if ex.decoded.is_empty() {
                // Data that never decoded: abandon the seed quietly unless it
                // produced a real inconsistency record.
                if seed.origin == Origin::Solid {
                    conflicts.extend(ex.conflicts);
                }
                continue;
            }
            let frame_conflicts = {
                let mut probe = Vec::new();
                for (&rva, i) in &ex.decoded {
                    if coverage.mid_instruction(rva) {
                        probe.push(rva);
                        continue;
                    }
                    let end = rva + i.length as u32;
                    probe.extend(coverage.map.range(rva + 1..end).map(|(&o, _)| o));
                }
                probe
            };
            if seed.origin == Origin::Prospect && !frame_conflicts.is_empty() {
                // A prospect that contradicts existing frames is noise.
                conflicts.extend(frame_conflicts);
                continue;
            }
            conflicts.extend(coverage.merge(&ex.decoded));
            conflicts.extend(ex.conflicts.iter().copied());

            let t1 = Instant::now();
            let blocks = build_blocks(&ex, &noreturn);
            let mut record = FunctionRecord {
                entry: seed.rva,
                origin: seed.origin,
                name: seed.name.clone(),
                blocks: order_blocks(blocks, seed.rva),
                patchable: false,
                reject_reason: None,
                had_decode_failure: ex.had_decode_failure,
            };
            decide_patchability(&mut record);
            timings.blocks_us += t1.elapsed().as_micros();

            for target in ex.call_targets {
                if !done.contains(&target) {
                    queue.push_back(Seed {
                        rva: target,
                        origin: seed.origin,
                        name: sidecar.and_then(|s| s.name_of(target)).map(str::to_string),
                    });
                }
            }
            functions.insert(seed.rva, record);
        }
    }

    conflicts.sort_unstable();
    conflicts.dedup();
    CodeGraph {
        functions,
        conflicts,
        timings,
    }
}

/// Entry block first, the rest by ascending address.
fn order_blocks(mut blocks: Vec<BasicBlock>, entry: u32) -> Vec<BasicBlock> {
    blocks.sort_by_key(|b| b.start);
    if let Some(pos) = blocks.iter().position(|b| b.start == entry) {
        let e = blocks.remove(pos);
        blocks.insert(0, e);
    }
    blocks
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{reloc_blob, PeBuilder, SectionSpec, CODE_SECTION, DATA_SECTION, RDATA_SECTION};

    const TEXT_RVA: u32 = 0x1000;
    const DATA_RVA: u32 = 0x2000;
    const RELOC_RVA: u32 = 0x3000;
    const BASE: u32 = 0x0040_0000;

    /// Image with a .text section, optional .data contents, and optional
    /// relocations; `entry` of 0 leaves the image without an entry seed.
    fn image_with(text: Vec<u8>, data: Vec<u8>, reloc_rvas: &[u32], entry: u32) -> PeImage {
        let mut b = PeBuilder::new();
        b.entry_point = entry;
        b.sections
            .push(SectionSpec::new(".text", TEXT_RVA, text, CODE_SECTION));
        if !data.is_empty() {
            b.sections
                .push(SectionSpec::new(".data", DATA_RVA, data, DATA_SECTION));
        }
        if !reloc_rvas.is_empty() {
            let blob = reloc_blob(reloc_rvas);
            b.reloc_dir = Some((RELOC_RVA, blob.len() as u32));
            b.sections
                .push(SectionSpec::new(".reloc", RELOC_RVA, blob, RDATA_SECTION));
        }
        PeImage::parse(&b.build()).expect("test image parses")
    }

    /// .data cell holding an absolute pointer to `target_rva`, plus the
    /// relocation RVA for it, at data offset `off`.
    fn pointer_cell(data: &mut Vec<u8>, off: usize, target_rva: u32) -> u32 {
        if data.len() < off + 4 {
            data.resize(off + 4, 0);
        }
        data[off..off + 4].copy_from_slice(&(BASE + target_rva).to_le_bytes());
        DATA_RVA + off as u32
    }

    // ---------- sidecar ----------

    #[test]
    fn sidecar_parses_and_reports_errors() {
        let table = parse_sidecar(
            "# comment\n\
             1000 func main\n\
             0x1040 noreturn fatal_stop # trailing comment\n\
             \n\
             2000 func helper\n",
        )
        .expect("valid sidecar");
        assert_eq!(table.entries.len(), 3);
        assert_eq!(table.entries[0].rva, 0x1000);
        assert_eq!(table.entries[1].kind, SidecarKind::NoReturn);
        assert_eq!(table.entries[1].name, "fatal_stop");
        assert_eq!(table.noreturn_set().into_iter().collect::<Vec<_>>(), vec![0x1040]);
        assert_eq!(table.name_of(0x2000), Some("helper"));

        assert_eq!(parse_sidecar("zzzz func a").unwrap_err().line, 1);
        assert!(parse_sidecar("1000 banana a").unwrap_err().message.contains("kind"));
        assert!(parse_sidecar("1000 func").unwrap_err().message.contains("name"));
        assert!(parse_sidecar("ok\n1000 func a extra")
            .unwrap_err()
            .message
            .contains("bad RVA"));
    }

    // ---------- block formation ----------

    #[test]
    fn straight_line_function() {
        // mov eax, 7; add eax, 1; ret
        let text = vec![0xB8, 7, 0, 0, 0, 0x05, 1, 0, 0, 0, 0xC3];
        let g = analyze(&image_with(text, vec![], &[], TEXT_RVA), None);
        assert_eq!(g.functions.len(), 1);
        let f = &g.functions[&TEXT_RVA];
        assert_eq!(f.origin, Origin::Solid);
        assert_eq!(f.blocks.len(), 1);
        assert_eq!(f.blocks[0].terminator, Terminator::Ret);
        assert!(f.blocks[0].successors.is_empty());
        assert_eq!(f.instruction_count(), 3);
        assert!(f.patchable, "reject: {:?}", f.reject_reason);
        assert!(g.conflicts.is_empty());
    }

    #[test]
    fn diamond_control_flow() {
        // 1000: mov eax, 7
        // 1005: test eax, eax
        // 1007: jz 1010
        // 1009: mov eax, 1
        // 100e: jmp 1015
        // 1010: mov eax, 2
        // 1015: ret
        let text = vec![
            0xB8, 7, 0, 0, 0, //
            0x85, 0xC0, //
            0x74, 0x07, //
            0xB8, 1, 0, 0, 0, //
            0xEB, 0x05, //
            0xB8, 2, 0, 0, 0, //
            0xC3,
        ];
        let g = analyze(&image_with(text, vec![], &[], TEXT_RVA), None);
        let f = &g.functions[&TEXT_RVA];
        assert_eq!(f.blocks.len(), 4);
        let starts: Vec<u32> = f.blocks.iter().map(|b| b.start).collect();
        assert_eq!(starts, vec![0x1000, 0x1009, 0x1010, 0x1015]);
        assert_eq!(f.blocks[0].terminator, Terminator::Jcc);
        assert_eq!(f.blocks[0].successors, vec![0x1010, 0x1009], "taken target first");
        assert_eq!(f.blocks[1].terminator, Terminator::Jmp);
        assert_eq!(f.blocks[1].successors, vec![0x1015]);
        assert_eq!(f.blocks[2].terminator, Terminator::Fallthrough);
        assert_eq!(f.blocks[2].successors, vec![0x1015]);
        assert!(f.patchable, "reject: {:?}", f.reject_reason);
    }

    #[test]
    fn loop_backedge_splits_body() {
        // 1000: mov ecx, 3
        // 1005: inc eax        <- backedge target
        // 1006: dec ecx
        // 1007: jnz 1005
        // 1009: ret
        let text = vec![0xB9, 3, 0, 0, 0, 0x40, 0x49, 0x75, 0xFC, 0xC3];
        let g = analyze(&image_with(text, vec![], &[], TEXT_RVA), None);
        let f = &g.functions[&TEXT_RVA];
        let starts: Vec<u32> = f.blocks.iter().map(|b| b.start).collect();
        assert_eq!(starts, vec![0x1000, 0x1005, 0x1009]);
        assert_eq!(f.blocks[0].terminator, Terminator::Fallthrough);
        assert_eq!(f.blocks[0].successors, vec![0x1005]);
        assert_eq!(f.blocks[1].terminator, Terminator::Jcc);
        assert_eq!(f.blocks[1].successors, vec![0x1005, 0x1009]);
    }

    // ---------- call discovery ----------

    #[test]
    fn calls_discover_new_functions() {
        // 1000: push ebx          (padding so the entry block is >= 5 bytes)
        // 1001: call 1010
        // 1006: call 1020
        // 100b: pop ebx
        // 100c: ret
        // 1010: mov eax, 5; ret   (helper_a)
        // 1020: xor eax, eax; inc eax; inc eax; inc eax; ret
        let mut text = vec![0u8; 0x30];
        text[0] = 0x53;
        text[1..6].copy_from_slice(&[0xE8, 0x0A, 0, 0, 0]);
        text[6..11].copy_from_slice(&[0xE8, 0x15, 0, 0, 0]);
        text[11] = 0x5B;
        text[12] = 0xC3;
        text[0x10..0x16].copy_from_slice(&[0xB8, 5, 0, 0, 0, 0xC3]);
        text[0x20..0x26].copy_from_slice(&[0x31, 0xC0, 0x40, 0x40, 0x40, 0xC3]);

        let sidecar = parse_sidecar("1010 func helper_a").unwrap();
        let g = analyze(&image_with(text, vec![], &[], TEXT_RVA), Some(&sidecar));
        assert_eq!(
            g.functions.keys().copied().collect::<Vec<_>>(),
            vec![0x1000, 0x1010, 0x1020]
        );
        let main = &g.functions[&0x1000];
        assert_eq!(main.blocks.len(), 3);
        assert_eq!(main.blocks[0].terminator, Terminator::CallFallthrough);
        assert_eq!(main.blocks[0].successors, vec![0x1006]);
        assert_eq!(g.functions[&0x1010].name.as_deref(), Some("helper_a"));
        assert_eq!(g.functions[&0x1010].origin, Origin::Solid);
        assert!(g.functions[&0x1020].name.is_none());
        assert!(g.conflicts.is_empty());
    }

    #[test]
    fn noreturn_call_stops_the_path() {
        // 1000: push eax; push ecx; call 1010; <junk 0xFF 0xFF>
        // 1010: mov eax, 1; ret    (declared noreturn)
        let mut text = vec![0u8; 0x20];
        text[0] = 0x50;
        text[1] = 0x51;
        text[2..7].copy_from_slice(&[0xE8, 0x09, 0, 0, 0]);
        text[7] = 0xFF;
        text[8] = 0xFF;
        text[0x10..0x16].copy_from_slice(&[0xB8, 1, 0, 0, 0, 0xC3]);

        let sidecar = parse_sidecar("1010 noreturn stop_here").unwrap();
        let g = analyze(&image_with(text, vec![], &[], TEXT_RVA), Some(&sidecar));
        let main = &g.functions[&0x1000];
        assert_eq!(main.blocks.len(), 1);
        assert_eq!(main.blocks[0].end, 0x1007, "junk after the call is never decoded");
        assert_eq!(main.blocks[0].terminator, Terminator::CallFallthrough);
        assert!(main.blocks[0].successors.is_empty());
        assert!(!main.had_decode_failure);
        assert!(main.patchable);
        assert!(g.conflicts.is_empty());
    }

    #[test]
    fn shared_tail_owned_by_both_functions() {
        // 1000 (f_a): push eax; push ecx; jmp 1020
        // 1010 (f_b): push edx; push ebx; jmp 1020
        // 1020 (tail): pop eax; ret
        let mut text = vec![0u8; 0x30];
        text[0..2].copy_from_slice(&[0x50, 0x51]);
        text[2..4].copy_from_slice(&[0xEB, 0x1C]);
        text[0x10..0x12].copy_from_slice(&[0x52, 0x53]);
        text[0x12..0x14].copy_from_slice(&[0xEB, 0x0C]);
        text[0x20..0x22].copy_from_slice(&[0x58, 0xC3]);

        let sidecar = parse_sidecar("1000 func f_a\n1010 func f_b").unwrap();
        let g = analyze(&image_with(text, vec![], &[], TEXT_RVA), Some(&sidecar));
        assert_eq!(g.functions.len(), 2);
        for entry in [0x1000u32, 0x1010] {
            let f = &g.functions[&entry];
            assert_eq!(f.blocks.len(), 2, "fn {entry:#x} owns its copy of the tail");
            assert_eq!(f.blocks[1].start, 0x1020);
            assert_eq!(f.blocks[1].terminator, Terminator::Ret);
        }
        assert!(g.conflicts.is_empty(), "identical frames are not a conflict");
    }

    // ---------- prospects ----------

    #[test]
    fn relocated_pointer_seeds_a_prospect() {
        // 1000 (entry): trivial solid function.
        // 1010 (prospect): push eax; push ecx; test; jz +1; inc eax; pops; ret
        let mut text = vec![0u8; 0x20];
        text[0..5].copy_from_slice(&[0xB8, 0, 0, 0, 0]);
        text[5] = 0xC3;
        text[0x10..0x1A].copy_from_slice(&[0x50, 0x51, 0x85, 0xC0, 0x74, 0x01, 0x40, 0x59, 0x58, 0xC3]);
        let mut data = Vec::new();
        let site = pointer_cell(&mut data, 0, 0x1010);
        let g = analyze(&image_with(text, data, &[site], TEXT_RVA), None);
        let f = &g.functions[&0x1010];
        assert_eq!(f.origin, Origin::Prospect);
        assert_eq!(f.blocks.len(), 3);
        assert!(f.patchable, "reject: {:?}", f.reject_reason);
    }

    #[test]
    fn prospect_single_block_is_rejected() {
        // 1010: push ebp; mov ebp, esp; pop ebp; ret  (one block, 5 bytes)
        let mut text = vec![0u8; 0x20];
        text[0..5].copy_from_slice(&[0xB8, 0, 0, 0, 0]);
        text[5] = 0xC3;
        text[0x10..0x15].copy_from_slice(&[0x55, 0x8B, 0xEC, 0x5D, 0xC3]);
        let mut data = Vec::new();
        let site = pointer_cell(&mut data, 0, 0x1010);
        let g = analyze(&image_with(text, data, &[site], TEXT_RVA), None);
        let f = &g.functions[&0x1010];
        assert!(!f.patchable);
        assert_eq!(f.reject_reason, Some(RejectReason::ProspectSingleBlock));

        // The same shape reached through a direct call is solid and patchable.
        let mut text2 = vec![0u8; 0x20];
        text2[0..5].copy_from_slice(&[0xE8, 0x0B, 0, 0, 0]);
        text2[5] = 0xC3;
        text2[0x10..0x15].copy_from_slice(&[0x55, 0x8B, 0xEC, 0x5D, 0xC3]);
        let g2 = analyze(&image_with(text2, vec![], &[], TEXT_RVA), None);
        assert!(g2.functions[&0x1010].patchable);
    }

    #[test]
    fn prospect_reading_as_ascii_is_rejected() {
        // A printable-ASCII blob that decodes as a 4-block "function":
        //   1000: push eax/ecx/edx/ebx ("PQRS"), jo +0x2e ("p.")
        //   1006: push esp ("T"), jno +0x2b ("q+")
        //   1009: inc ecx x43 ("AAA...")
        //   1034: pops ("XYZ[\"), then a non-text guard byte stops decoding.
        let mut blob = Vec::new();
        blob.extend_from_slice(b"PQRSp.Tq+");
        blob.extend_from_slice(&[b'A'; 43]);
        blob.extend_from_slice(b"XYZ[\\");
        blob.push(0xFE);
        let mut text = vec![0u8; 0x80];
        text[0..5].copy_from_slice(&[0xB8, 0, 0, 0, 0]);
        text[5] = 0xC3;
        text[0x10..0x10 + blob.len()].copy_from_slice(&blob);

        let mut data = Vec::new();
        let site = pointer_cell(&mut data, 0, 0x1010);
        let g = analyze(&image_with(text, data, &[site], TEXT_RVA), None);
        let f = &g.functions[&0x1010];
        assert_eq!(f.blocks.len(), 4);
        assert!(f.had_decode_failure, "guard byte taints the walk");
        assert_eq!(
            f.reject_reason,
            Some(RejectReason::ProspectAllText),
            "text check outranks the decode failure"
        );
    }

    #[test]
    fn entry_block_too_small_is_rejected() {
        // 1010: xor eax, eax; ret  (3 bytes: no room for a 5-byte patch)
        let mut text = vec![0u8; 0x20];
        text[0..5].copy_from_slice(&[0xE8, 0x0B, 0, 0, 0]);
        text[5] = 0xC3;
        text[0x10..0x13].copy_from_slice(&[0x31, 0xC0, 0xC3]);
        let g = analyze(&image_with(text, vec![], &[], TEXT_RVA), None);
        let f = &g.functions[&0x1010];
        assert!(!f.patchable);
        assert_eq!(f.reject_reason, Some(RejectReason::EntryBlockTooSmall));
        // The caller itself is 6 bytes and fine.
        assert!(g.functions[&0x1000].patchable);
    }

    // ---------- conflicts ----------

    #[test]
    fn prospect_landing_mid_instruction_is_discarded() {
        // Entry decodes mov eax, imm32 at 1000; a relocated "pointer" aims at
        // 1003, inside the immediate.
        let mut text = vec![0u8; 0x10];
        text[0..5].copy_from_slice(&[0xB8, 0x90, 0x90, 0x90, 0x90]);
        text[5] = 0xC3;
        let mut data = Vec::new();
        let site = pointer_cell(&mut data, 0, 0x1003);
        let g = analyze(&image_with(text, data, &[site], TEXT_RVA), None);
        assert!(!g.functions.contains_key(&0x1003));
        assert_eq!(g.conflicts, vec![0x1003]);
        assert!(g.functions.contains_key(&0x1000), "solid function is unaffected");
    }

    #[test]
    fn prospect_frames_disagreeing_with_solid_are_dropped() {
        // Solid path decodes [1000: mov eax,imm32][1005: ret]. A prospect
        // seed at 1001 decodes the immediate bytes as instructions whose
        // frames overlap the solid ones mid-instruction.
        let mut text = vec![0u8; 0x10];
        // 1000: B8 40 40 40 40  mov eax, 0x40404040 ; 1005: C3
        text[0..5].copy_from_slice(&[0xB8, 0x40, 0x40, 0x40, 0x40]);
        text[5] = 0xC3;
        let mut data = Vec::new();
        let site = pointer_cell(&mut data, 0, 0x1001);
        let g = analyze(&image_with(text, data, &[site], TEXT_RVA), None);
        assert!(
            !g.functions.contains_key(&0x1001),
            "prospect must never displace solid frames"
        );
        assert!(!g.conflicts.is_empty());
    }

    #[test]
    fn jump_out_of_code_sections_taints() {
        // 1000: push eax x4; jz -> 0x2000 (.data) ; ret
        let mut text = vec![0u8; 0x10];
        text[0..4].copy_from_slice(&[0x50, 0x50, 0x50, 0x50]);
        // 0F 84 rel32: target = 0x100a + rel
        text[4..10].copy_from_slice(&[0x0F, 0x84, 0xF6, 0x0F, 0, 0]);
        text[10] = 0xC3;
        let g = analyze(&image_with(text, vec![0u8; 8], &[], TEXT_RVA), None);
        let f = &g.functions[&0x1000];
        assert!(f.had_decode_failure);
        assert_eq!(f.reject_reason, Some(RejectReason::DecodeFailure));
        assert!(g.conflicts.contains(&0x2000));
    }

    #[test]
    fn invalid_byte_on_live_path_taints() {
        // 1000: mov eax,1; test eax,eax; jz 100e; 0xF1 junk ... 100e: ret
        let mut text = vec![0u8; 0x10];
        text[0..5].copy_from_slice(&[0xB8, 1, 0, 0, 0]);
        text[5..7].copy_from_slice(&[0x85, 0xC0]);
        text[7..9].copy_from_slice(&[0x74, 0x05]);
        text[9] = 0xF1;
        text[0xE] = 0xC3;
        let g = analyze(&image_with(text, vec![], &[], TEXT_RVA), None);
        let f = &g.functions[&0x1000];
        assert!(f.had_decode_failure);
        assert_eq!(f.reject_reason, Some(RejectReason::DecodeFailure));
        assert!(g.conflicts.contains(&0x1009));
        // The taken path still decoded.
        assert!(f.blocks.iter().any(|b| b.start == 0x100E));
    }

    // ---------- seeds ----------

    #[test]
    fn seeds_are_deduplicated_and_ordered() {
        // Entry at 0x1000 also appears in the sidecar; a relocated pointer
        // to it exists too. One solid seed must result, named.
        let mut text = vec![0u8; 0x20];
        text[0..5].copy_from_slice(&[0xB8, 1, 0, 0, 0]);
        text[5] = 0xC3;
        text[0x10..0x15].copy_from_slice(&[0xB8, 2, 0, 0, 0]);
        text[0x15] = 0xC3;
        let mut data = Vec::new();
        let s1 = pointer_cell(&mut data, 0, 0x1000);
        let s2 = pointer_cell(&mut data, 4, 0x1010);
        let image = image_with(text, data, &[s1, s2], TEXT_RVA);
        let sidecar = parse_sidecar("1000 func main").unwrap();
        let seeds = seed_entries(&image, Some(&sidecar));
        assert_eq!(seeds.len(), 2);
        assert_eq!(seeds[0].rva, 0x1000);
        assert_eq!(seeds[0].origin, Origin::Solid);
        assert_eq!(seeds[0].name.as_deref(), Some("main"));
        assert_eq!(seeds[1].rva, 0x1010);
        assert_eq!(seeds[1].origin, Origin::Prospect);

        let g = analyze(&image, Some(&sidecar));
        assert_eq!(g.functions[&0x1000].origin, Origin::Solid);
        assert_eq!(g.functions[&0x1010].origin, Origin::Prospect);
    }

    #[test]
    fn pointers_into_data_are_not_seeds() {
        let mut text = vec![0u8; 0x10];
        text[0..5].copy_from_slice(&[0xB8, 1, 0, 0, 0]);
        text[5] = 0xC3;
        let mut data = Vec::new();
        // Relocated value pointing into .data itself, and one below base.
        let s1 = pointer_cell(&mut data, 0, DATA_RVA + 8);
        data.extend_from_slice(&[0, 0, 0, 0]);
        data[4..8].copy_from_slice(&0x1234u32.to_le_bytes());
        let image = image_with(text, data, &[s1, DATA_RVA + 4], TEXT_RVA);
        let seeds = seed_entries(&image, None);
        assert_eq!(seeds.len(), 1, "only the entry point seeds");
    }

    #[test]
    fn sidecar_only_function_is_discovered() {
        // 1010 is never called and never pointed to; only the sidecar knows.
        let mut text = vec![0u8; 0x20];
        text[0..5].copy_from_slice(&[0xB8, 1, 0, 0, 0]);
        text[5] = 0xC3;
        text[0x10..0x15].copy_from_slice(&[0xB8, 2, 0, 0, 0]);
        text[0x15..0x17].copy_from_slice(&[0x85, 0xC0]);
        text[0x17..0x19].copy_from_slice(&[0x74, 0x01]);
        text[0x19] = 0x40;
        text[0x1A] = 0xC3;
        let sidecar = parse_sidecar("1010 func orphan").unwrap();
        let g = analyze(&image_with(text, vec![], &[], TEXT_RVA), Some(&sidecar));
        let f = &g.functions[&0x1010];
        assert_eq!(f.name.as_deref(), Some("orphan"));
        assert_eq!(f.origin, Origin::Solid);
        assert!(f.patchable);
    }

    // ---------- text detection ----------

    #[test]
    fn text_detection() {
        assert!(is_all_text(b"Hello, world! This is a string.\r\n"));
        assert!(is_all_text(b"H\0e\0l\0l\0o\0 \0w\0o\0r\0l\0d\0"));
        assert!(!is_all_text(b""));
        assert!(!is_all_text(&[0x90, 0x90, 0xC3]));
        assert!(!is_all_text(b"almost text\xFF"));
        assert!(!is_all_text(b"H\0e\0l\0l\0o\0!"), "odd tail breaks UTF-16");
        assert!(!is_all_text(&[b'H', 1, b'i', 0]), "high byte must be zero");
        assert!(is_all_text(b"tab\tand\nnewline\rok"));
    }

    // ---------- JSON view ----------

    #[test]
    fn json_view_shape() {
        let text = vec![0xB8, 7, 0, 0, 0, 0xC3];
        let g = analyze(&image_with(text, vec![], &[], TEXT_RVA), None);
        let v = g.to_json();
        assert_eq!(v["instruction_count"], 2);
        assert_eq!(v["block_count"], 1);
        let f = &v["functions"][0];
        assert_eq!(f["entry"], "0x1000");
        assert_eq!(f["origin"], "solid");
        assert_eq!(f["patchable"], true);
        assert_eq!(f["blocks"][0]["terminator"], "ret");
    }
}
