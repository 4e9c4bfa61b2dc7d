//! Static image rewriting: relocate functions into a host section with
//! policy check sequences woven in front of every indirect transfer.
//!
//! The pipeline runs in three conceptual phases over the discovered code.
//! *Instrumentation* copies each patchable function instruction by
//! instruction, widening short branches to their 32-bit forms and planting a
//! check stub ahead of every indirect call, indirect jump, and return
//! (import-table calls are exempt: their targets are loader-controlled).
//! *Calculation* assigns the copies their new addresses inside the host
//! section and works out which copied fields still need base relocations.
//! *Repairing* fixes every relative branch for its new home — intra-function
//! branches aim at the moved copy, direct calls aim back at the callee's
//! original entry so the decision to patch stays local to each function —
//! and finally overwrites each original entry with a five-byte jump to its
//! copy.
//!
//! A rewritten image stays inert until a host process arms the gate cell the
//! stubs test; unarmed, every stub falls through in a handful of cycles.

use crate::analyzer::{self, FunctionRecord, SymbolTable};
use crate::disasm::{self, EncPref, Instruction, MemRef, Mnemonic, Operand, Reg, XferClass};
use crate::monitor::TransferKind;
use crate::pe::{PeError, PeImage, HOST_TRAILER_MAGIC};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::time::Instant;

// ---------------------------------------------------------------------------
// Errors, options, report
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub enum RewriteError {
    Pe(PeError),
    /// A branch inside a patched function aims at an address that was never
    /// part of the function's plan. Discovery should make this impossible;
    /// it is kept as a hard error rather than silently emitting a wild jump.
    DanglingTarget { function: u32, target: u32 },
    Encode(String),
}

impl fmt::Display for RewriteError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RewriteError::Pe(e) => write!(f, "{e}"),
            RewriteError::DanglingTarget { function, target } => write!(
                f,
                "function {function:#x}: branch to {target:#x} has no relocated copy"
            ),
            RewriteError::Encode(m) => write!(f, "re-encoding failed: {m}"),
        }
    }
}

impl std::error::Error for RewriteError {}

impl From<PeError> for RewriteError {
    fn from(e: PeError) -> Self {
        RewriteError::Pe(e)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RewriteOptions {
    /// Also check direct calls (their targets are static, so this buys
    /// little and costs a stub per call site; off by default).
    pub instrument_direct_calls: bool,
}

/// Everything a batch run wants to know about one rewrite, one row per file.
/// Timings are kept in microseconds and the memory peak in KiB internally;
/// the CSV/JSON emitters convert to the documented seconds/bytes units.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RewriteReport {
    pub size_org: u64,
    pub size_int: u64,
    pub t_disasm_us: u64,
    pub t_basicblock_us: u64,
    pub instructions: u64,
    pub basic_blocks: u64,
    pub memory_peak_kb: u64,
    pub t_int_us: u64,
    pub functions_total: u64,
    pub functions_patched: u64,
    pub stubs_emitted: u64,
    /// Bytes of original code that was relocated (patched functions only).
    pub code_bytes_org: u64,
    /// Bytes of instrumented code emitted into the host section.
    pub code_bytes_int: u64,
    /// RVAs of every displacement field the repair phase wrote: branch
    /// fields inside the copies plus the prologue-patch fields. Not part of
    /// the report row; verification uses it to aim mutations.
    pub repaired_sites: Vec<u32>,
}

fn secs(us: u64) -> String {
    format!("{:.6}", us as f64 / 1e6)
}

impl RewriteReport {
    pub const CSV_HEADER: &'static str = "file,size_org,size_int,t_disasm,t_basicblock,\
instructions,basic_blocks,memory_peak,t_int,functions_total,functions_patched,stubs_emitted";

    pub fn csv_row(&self, file: &str) -> String {
        format!(
            "{file},{},{},{},{},{},{},{},{},{},{},{}",
            self.size_org,
            self.size_int,
            secs(self.t_disasm_us),
            secs(self.t_basicblock_us),
            self.instructions,
            self.basic_blocks,
            self.memory_peak_kb * 1024,
            secs(self.t_int_us),
            self.functions_total,
            self.functions_patched,
            self.stubs_emitted
        )
    }

    pub fn to_json(&self, file: &str) -> serde_json::Value {
        serde_json::json!({
            "file": file,
            "size_org": self.size_org,
            "size_int": self.size_int,
            "t_disasm": self.t_disasm_us as f64 / 1e6,
            "t_basicblock": self.t_basicblock_us as f64 / 1e6,
            "instructions": self.instructions,
            "basic_blocks": self.basic_blocks,
            "memory_peak": self.memory_peak_kb * 1024,
            "t_int": self.t_int_us as f64 / 1e6,
            "functions_total": self.functions_total,
            "functions_patched": self.functions_patched,
            "stubs_emitted": self.stubs_emitted,
        })
    }
}

/// Peak resident set of this process in KiB, if the kernel exposes it.
pub fn peak_rss_kb() -> u64 {
    let Ok(status) = std::fs::read_to_string("/proc/self/status") else {
        return 0;
    };
    for line in status.lines() {
        if let Some(rest) = line.strip_prefix("VmHWM:") {
            return rest
                .trim()
                .trim_end_matches("kB")
                .trim()
                .parse()
                .unwrap_or(0);
        }
    }
    0
}

// ---------------------------------------------------------------------------
// Check stubs
// ---------------------------------------------------------------------------

/// Stub length without the target push: pushfd(1) + cmp(7) + je(6) +
/// push-kind(5) + call-filter(6) + popfd(1).
pub const STUB_BASE_LEN: u32 = 26;
/// Offset of the gate-cell displacement inside a stub.
pub const STUB_GATE_SITE: u32 = 3;
/// Offset of the filter-slot displacement, plus the push length.
pub const STUB_FILTER_SITE_BASE: u32 = 21;

/// The "push the would-be target" part of a stub, precomputed because its
/// bytes are position-independent.
#[derive(Debug, Clone)]
struct TargetPush {
    bytes: Vec<u8>,
    /// Offset within `bytes` of an absolute 32-bit field that needs a base
    /// relocation at its new home.
    reloc_off: Option<usize>,
}

/// `pushfd; cmp [gate],0; je past; push <target>; push kind; call [filter];
/// popfd` — flags are preserved around the whole sequence, and an unarmed
/// gate (zero) skips the check entirely.
fn assemble_stub(push: &TargetPush, kind: TransferKind, gate_va: u32, filter_slot_va: u32) -> Vec<u8> {
    let p = push.bytes.len() as u32;
    let mut b = Vec::with_capacity((STUB_BASE_LEN + p) as usize);
    b.push(0x9C); // pushfd
    b.extend_from_slice(&[0x83, 0x3D]); // cmp dword [gate], 0
    b.extend_from_slice(&gate_va.to_le_bytes());
    b.push(0x00);
    b.extend_from_slice(&[0x0F, 0x84]); // je past (to the popfd)
    b.extend_from_slice(&(11 + p).to_le_bytes());
    b.extend_from_slice(&push.bytes);
    b.push(0x68); // push kind
    b.extend_from_slice(&kind.code().to_le_bytes());
    b.extend_from_slice(&[0xFF, 0x15]); // call [filter]
    b.extend_from_slice(&filter_slot_va.to_le_bytes());
    b.push(0x9D); // popfd
    debug_assert_eq!(b.len() as u32, STUB_BASE_LEN + p);
    b
}

fn encode_push(op: Operand) -> Result<TargetPush, RewriteError> {
    let made = disasm::make(0, Mnemonic::Push, None, vec![op], EncPref::ModrmRm)
        .map_err(|e| RewriteError::Encode(format!("{e}")))?;
    let bytes = disasm::encode(&made).map_err(|e| RewriteError::Encode(format!("{e}")))?;
    let reloc_off = made.reloc_sites.first().map(|&o| o as usize);
    Ok(TargetPush { bytes, reloc_off })
}

/// Build the target push for an instrumented transfer. `carry_reloc` says
/// whether the original operand's 32-bit field was relocated (and the copy
/// must be too).
fn push_for(instr: &Instruction, image: &PeImage) -> Result<Option<(TransferKind, TargetPush)>, RewriteError> {
    match instr.xfer {
        XferClass::CallInd | XferClass::JmpInd => {
            if disasm::classify_iat_indirect(instr, image.image_base(), image.iat_slots()) {
                return Ok(None);
            }
            let kind = if instr.xfer == XferClass::CallInd {
                TransferKind::Call
            } else {
                TransferKind::Jmp
            };
            let push = match &instr.operands[0] {
                Operand::Reg(r) => TargetPush {
                    bytes: vec![0x50 | r.index()],
                    reloc_off: None,
                },
                Operand::Mem(m) => {
                    // The stub's pushfd moved ESP down by 4; compensate.
                    let adjusted = if m.base == Some(Reg::Esp) {
                        m.with_disp(m.disp.wrapping_add(4))
                    } else {
                        *m
                    };
                    let carry = instr
                        .reloc_site_rvas()
                        .next()
                        .is_some_and(|site| image.has_relocation_at(site));
                    let mut push = encode_push(Operand::Mem(adjusted))?;
                    if !carry {
                        push.reloc_off = None;
                    }
                    push
                }
                other => {
                    return Err(RewriteError::Encode(format!(
                        "indirect transfer with unexpected operand {other:?}"
                    )))
                }
            };
            Ok(Some((kind, push)))
        }
        XferClass::Ret => {
            // The return target sits above the pushed flags.
            let push = encode_push(Operand::Mem(MemRef::base_disp(Reg::Esp, 4)))?;
            Ok(Some((TransferKind::Ret, push)))
        }
        _ => Ok(None),
    }
}

fn direct_call_push(target_rva: u32, image: &PeImage) -> TargetPush {
    let mut bytes = vec![0x68];
    bytes.extend_from_slice(&(image.image_base().wrapping_add(target_rva)).to_le_bytes());
    TargetPush {
        bytes,
        reloc_off: Some(1),
    }
}

// ---------------------------------------------------------------------------
// Per-function planning
// ---------------------------------------------------------------------------

enum Item {
    Instr(Instruction),
    Stub { kind: TransferKind, push: TargetPush },
}

impl Item {
    fn len(&self) -> u32 {
        match self {
            Item::Instr(i) => i.length as u32,
            Item::Stub { push, .. } => STUB_BASE_LEN + push.bytes.len() as u32,
        }
    }
}

struct FnPlan {
    entry: u32,
    items: Vec<(u32, Item)>,
    len: u32,
    /// Total bytes of the original instructions behind this plan.
    orig_len: u32,
    entry_off: u32,
    /// Original instruction RVA -> offset of its copy within this plan.
    copy_off: BTreeMap<u32, u32>,
    stubs: u32,
}

fn plan_function(
    f: &FunctionRecord,
    image: &PeImage,
    opts: &RewriteOptions,
) -> Result<FnPlan, RewriteError> {
    let mut items = Vec::new();
    let mut copy_off = BTreeMap::new();
    let mut offset = 0u32;
    let mut orig_len = 0u32;
    let mut entry_off = 0u32;
    let mut stubs = 0u32;
    for block in f.blocks_by_address() {
        for ins in &block.instructions {
            if copy_off.contains_key(&ins.rva) {
                continue;
            }
            orig_len += ins.length as u32;
            let expanded = disasm::expand_short(ins);
            let stub = match push_for(&expanded, image)? {
                Some(pair) => Some(pair),
                None if expanded.xfer == XferClass::CallRel && opts.instrument_direct_calls => {
                    let target = expanded.rel_target().expect("direct call target");
                    Some((TransferKind::Call, direct_call_push(target, image)))
                }
                None => None,
            };
            if let Some((kind, push)) = stub {
                let item = Item::Stub { kind, push };
                let l = item.len();
                items.push((offset, item));
                offset += l;
                stubs += 1;
            }
            if ins.rva == f.entry {
                entry_off = offset;
            }
            copy_off.insert(ins.rva, offset);
            items.push((offset, Item::Instr(expanded.clone())));
            offset += expanded.length as u32;
        }
    }
    Ok(FnPlan {
        entry: f.entry,
        items,
        len: offset,
        orig_len,
        entry_off,
        copy_off,
        stubs,
    })
}

/// Rebuild a relative-branch instruction with a fresh 32-bit displacement.
fn with_rel32(ins: &Instruction, rel: i32) -> Result<Vec<u8>, RewriteError> {
    let mut c = ins.clone();
    for op in c.operands.iter_mut() {
        if matches!(op, Operand::Rel32(_) | Operand::Rel8(_)) {
            *op = Operand::Rel32(rel);
        }
    }
    disasm::encode(&c).map_err(|e| RewriteError::Encode(format!("{e}")))
}

// ---------------------------------------------------------------------------
// Whole-image rewrite
// ---------------------------------------------------------------------------

/// Rewrite `image` in place. On success the image carries a host section
/// with the instrumented copies, a gate/filter cell pair, a refreshed
/// relocation table, and a discovery trailer; every patched function's
/// original entry is a jump to its copy.
pub fn rewrite_image(
    image: &mut PeImage,
    sidecar: Option<&SymbolTable>,
    opts: &RewriteOptions,
) -> Result<RewriteReport, RewriteError> {
    let graph = analyzer::analyze(image, sidecar);
    let t0 = Instant::now();

    // A branch from anywhere into the middle of a would-be entry patch means
    // that function cannot safely lose its first five bytes.
    let mut branch_targets: BTreeSet<u32> = BTreeSet::new();
    for f in graph.functions.values() {
        for b in &f.blocks {
            for ins in &b.instructions {
                if let Some(t) = ins.rel_target() {
                    if ins.xfer != XferClass::CallRel {
                        branch_targets.insert(t);
                    }
                }
            }
        }
    }
    let patched: Vec<&FunctionRecord> = graph
        .functions
        .values()
        .filter(|f| f.patchable)
        .filter(|f| !branch_targets.range(f.entry + 1..f.entry + 5).next().is_some())
        .collect();

    let mut plans = Vec::with_capacity(patched.len());
    let mut code_len = 0u32;
    let mut stubs_emitted = 0u32;
    for f in &patched {
        let plan = plan_function(f, image, opts)?;
        code_len += plan.len;
        stubs_emitted += plan.stubs;
        plans.push(plan);
    }

    // Host selection. The estimate reserves room for the code, both cells,
    // the trailer, and a regrown relocation table; the appends below settle
    // the exact sizes.
    let blob_now = image.serialize_relocations().len() as u32;
    let new_site_bound = stubs_emitted * 3 + 8;
    let needed = 8 + code_len + 12 + blob_now + new_site_bound * 12 + 2 * image.file_alignment();
    let host = image.expand_host_section(needed)?;
    let payload_rva = image.sections()[host].rva + image.sections()[host].raw_data.len() as u32;
    let gate_rva = payload_rva;
    let filter_rva = payload_rva + 4;
    let code_base = payload_rva + 8;
    let gate_va = image.image_base() + gate_rva;
    let filter_va = image.image_base() + filter_rva;

    // Repair: emit the payload with final addresses.
    let mut payload = vec![0u8; 8]; // gate and filter cells start disarmed
    let mut new_relocs: Vec<u32> = Vec::new();
    let mut repaired_sites: Vec<u32> = Vec::new();
    let mut fn_bases = Vec::with_capacity(plans.len());
    {
        let mut base = code_base;
        for plan in &plans {
            fn_bases.push(base);
            base += plan.len;
        }
    }
    for (plan, &fn_base) in plans.iter().zip(&fn_bases) {
        for (off, item) in &plan.items {
            let at = fn_base + off;
            debug_assert_eq!(code_base as usize + (payload.len() - 8), at as usize);
            match item {
                Item::Stub { kind, push } => {
                    let p = push.bytes.len() as u32;
                    payload.extend_from_slice(&assemble_stub(push, *kind, gate_va, filter_va));
                    new_relocs.push(at + STUB_GATE_SITE);
                    new_relocs.push(at + STUB_FILTER_SITE_BASE + p);
                    if let Some(ro) = push.reloc_off {
                        new_relocs.push(at + 14 + ro as u32);
                    }
                }
                Item::Instr(ins) => {
                    let bytes = match ins.xfer {
                        XferClass::JmpRel | XferClass::Jcc => {
                            let target = ins.rel_target().expect("relative branch target");
                            let Some(&toff) = plan.copy_off.get(&target) else {
                                return Err(RewriteError::DanglingTarget {
                                    function: plan.entry,
                                    target,
                                });
                            };
                            let dest = fn_base + toff;
                            let rel = dest.wrapping_sub(at + ins.length as u32) as i32;
                            repaired_sites.push(at + ins.length as u32 - 4);
                            with_rel32(ins, rel)?
                        }
                        XferClass::CallRel => {
                            // Aim at the *original* callee entry: if the
                            // callee was patched its entry forwards, and if
                            // not the original body runs unchanged.
                            let target = ins.rel_target().expect("direct call target");
                            let rel = target.wrapping_sub(at + ins.length as u32) as i32;
                            repaired_sites.push(at + ins.length as u32 - 4);
                            with_rel32(ins, rel)?
                        }
                        _ => disasm::encode(ins).map_err(|e| RewriteError::Encode(format!("{e}")))?,
                    };
                    // Copied absolute fields keep their relocations at the
                    // new offsets.
                    for site in ins.reloc_site_rvas() {
                        if image.has_relocation_at(site) {
                            new_relocs.push(at + (site - ins.rva));
                        }
                    }
                    payload.extend_from_slice(&bytes);
                }
            }
        }
    }

    let placed_rva = image.append_to_section(host, &payload)?;
    debug_assert_eq!(placed_rva, payload_rva);

    // Patch prologues: a five-byte jump to the copy, with any relocations in
    // the overwritten range retired first.
    let mut erased = 0usize;
    for (plan, &fn_base) in plans.iter().zip(&fn_bases) {
        let new_entry = fn_base + plan.entry_off;
        erased += image.erase_relocations_in(plan.entry, 5);
        let rel = new_entry.wrapping_sub(plan.entry + 5);
        let mut patch = vec![0xE9];
        patch.extend_from_slice(&rel.to_le_bytes());
        image.write_bytes(plan.entry, &patch)?;
        repaired_sites.push(plan.entry + 1);
    }

    for rva in new_relocs.iter().copied() {
        image.add_relocation(rva)?;
    }
    if (!new_relocs.is_empty() || erased > 0) && !image.relocations().is_empty() {
        image.place_relocation_blob(host)?;
    }

    // Discovery trailer: cell RVAs plus magic, always the last raw bytes.
    let mut trailer = Vec::with_capacity(12);
    trailer.extend_from_slice(&gate_rva.to_le_bytes());
    trailer.extend_from_slice(&filter_rva.to_le_bytes());
    trailer.extend_from_slice(HOST_TRAILER_MAGIC);
    image.append_to_section(host, &trailer)?;

    Ok(RewriteReport {
        size_org: 0,
        size_int: 0,
        t_disasm_us: graph.timings.decode_us as u64,
        t_basicblock_us: graph.timings.blocks_us as u64,
        instructions: graph.instruction_count() as u64,
        basic_blocks: graph.block_count() as u64,
        memory_peak_kb: peak_rss_kb(),
        t_int_us: t0.elapsed().as_micros() as u64,
        functions_total: graph.functions.len() as u64,
        functions_patched: plans.len() as u64,
        stubs_emitted: stubs_emitted as u64,
        code_bytes_org: plans.iter().map(|p| p.orig_len as u64).sum(),
        code_bytes_int: code_len as u64,
        repaired_sites,
    })
}

/// Parse, rewrite, and re-emit a file, filling in the size columns.
pub fn rewrite_file(
    bytes: &[u8],
    sidecar: Option<&SymbolTable>,
    opts: &RewriteOptions,
) -> Result<(Vec<u8>, RewriteReport), RewriteError> {
    let mut image = PeImage::parse(bytes)?;
    let mut report = rewrite_image(&mut image, sidecar, opts)?;
    let out = image.emit()?;
    report.size_org = bytes.len() as u64;
    report.size_int = out.len() as u64;
    Ok((out, report))
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{reloc_blob, PeBuilder, SectionSpec, CODE_SECTION, DATA_SECTION, RDATA_SECTION};
    use crate::emulator::{self, HarnessOptions, StopReason, OUT_BASE};
    use crate::monitor::{Monitor, PolicyConfig, ReactionMode};
    use std::sync::Arc;

    const BASE: u32 = 0x0040_0000;
    /// Equivalence runs load above the kernel boundary, like a driver.
    const LOAD: u32 = 0xA000_0000;

    // ---------- stub shape ----------

    fn decode_run(bytes: &[u8], rva: u32) -> Vec<Instruction> {
        let mut out = Vec::new();
        let mut pc = 0usize;
        while pc < bytes.len() {
            let i = disasm::decode(&bytes[pc..], rva + pc as u32).expect("stub decodes");
            pc += i.length as usize;
            out.push(i);
        }
        out
    }

    #[test]
    fn stub_bytes_decode_to_the_check_sequence() {
        for (push, p_len, p_desc) in [
            (
                TargetPush {
                    bytes: vec![0x50],
                    reloc_off: None,
                },
                1usize,
                "push eax",
            ),
            (
                encode_push(Operand::Mem(MemRef::base_disp(Reg::Esp, 4))).unwrap(),
                4,
                "push dword [esp+0x4]",
            ),
            (
                encode_push(Operand::Mem(MemRef::abs(0x1122_3344))).unwrap(),
                6,
                "push dword [0x11223344]",
            ),
        ] {
            let b = assemble_stub(&push, TransferKind::Ret, 0x0040_8000, 0x0040_8004);
            assert_eq!(b.len(), STUB_BASE_LEN as usize + p_len);
            let seq = decode_run(&b, 0);
            let texts: Vec<String> = seq.iter().map(|i| i.to_string()).collect();
            assert_eq!(texts[0], "pushfd");
            assert_eq!(texts[1], "cmp dword [0x408000], 0x0");
            assert_eq!(texts[3], p_desc);
            assert_eq!(texts[4], "push 0x3");
            assert_eq!(texts[5], "call dword [0x408004]");
            assert_eq!(texts[6], "popfd");
            // The conditional skip lands exactly on the popfd.
            let je = &seq[2];
            assert_eq!(je.rel_target().unwrap() as usize, b.len() - 1);
            // Field offsets used for relocation bookkeeping.
            assert_eq!(&b[STUB_GATE_SITE as usize..STUB_GATE_SITE as usize + 4], &0x0040_8000u32.to_le_bytes());
            let fs = (STUB_FILTER_SITE_BASE as usize) + p_len;
            assert_eq!(&b[fs..fs + 4], &0x0040_8004u32.to_le_bytes());
        }
    }

    // ---------- fixtures ----------

    /// main: add eax,ebx; call helper1; store; load fptr; call edx; store; ret
    /// helper1: add eax,5; ret
    /// helper2 (via function pointer in .data): xor eax,0x55; ret
    fn three_function_image() -> (PeImage, SymbolTable) {
        let mut text = vec![0u8; 0x50];
        fn w(buf: &mut [u8], off: usize, bytes: &[u8]) {
            buf[off..off + bytes.len()].copy_from_slice(bytes);
        }
        w(&mut text, 0x00, &[0x01, 0xD8]); // add eax, ebx
        w(&mut text, 0x02, &[0xE8, 0x29, 0x00, 0x00, 0x00]); // call 0x1030
        w(&mut text, 0x07, &[0x89, 0x05]);
        w(&mut text, 0x09, &OUT_BASE.to_le_bytes());
        w(&mut text, 0x0D, &[0x8B, 0x15]);
        w(&mut text, 0x0F, &(BASE + 0x2000).to_le_bytes());
        w(&mut text, 0x13, &[0xFF, 0xD2]); // call edx
        w(&mut text, 0x15, &[0x89, 0x05]);
        w(&mut text, 0x17, &(OUT_BASE + 4).to_le_bytes());
        w(&mut text, 0x1B, &[0xC3]);
        w(&mut text, 0x30, &[0x05, 0x05, 0x00, 0x00, 0x00, 0xC3]); // helper1
        w(&mut text, 0x40, &[0x35, 0x55, 0x00, 0x00, 0x00, 0xC3]); // helper2

        let mut data = vec![0u8; 8];
        data[0..4].copy_from_slice(&(BASE + 0x1040).to_le_bytes());

        let mut b = PeBuilder::new();
        b.entry_point = 0x1000;
        b.sections.push(SectionSpec::new(".text", 0x1000, text, CODE_SECTION));
        b.sections.push(SectionSpec::new(".data", 0x2000, data, DATA_SECTION));
        let blob = reloc_blob(&[0x100F, 0x2000]);
        b.reloc_dir = Some((0x3000, blob.len() as u32));
        b.sections
            .push(SectionSpec::new(".reloc", 0x3000, blob, RDATA_SECTION));
        let image = PeImage::parse(&b.build()).unwrap();
        let sidecar = analyzer::parse_sidecar("1000 func main\n1030 func helper1\n1040 func helper2")
            .unwrap();
        (image, sidecar)
    }

    fn armed_monitor(reaction: ReactionMode) -> Arc<Monitor> {
        let m = Arc::new(Monitor::new());
        m.configure(PolicyConfig {
            reaction,
            ..PolicyConfig::default()
        })
        .unwrap();
        m
    }

    fn out_values(out: &emulator::RunOutcome) -> Vec<(u32, u32)> {
        out.out_writes.iter().map(|w| (w.addr, w.value)).collect()
    }

    // ---------- end-to-end behavior ----------

    #[test]
    fn rewrite_preserves_behavior_and_passes_policy() {
        let (image, sidecar) = three_function_image();
        let original = image.emit().unwrap();
        let (rewritten, report) =
            rewrite_file(&original, Some(&sidecar), &RewriteOptions::default()).unwrap();

        assert_eq!(report.functions_total, 3);
        assert_eq!(report.functions_patched, 3);
        // Stubs: call edx, plus one ret per function.
        assert_eq!(report.stubs_emitted, 4);
        assert!(report.size_int > report.size_org);

        let image_r = PeImage::parse(&rewritten).expect("rewritten image parses");
        assert!(image_r.find_monitor_slots().is_some());

        let inputs = [10u32, 3, 0, 0, 0, 0];
        let plain = emulator::run_image(
            &PeImage::parse(&original).unwrap(),
            LOAD,
            &inputs,
            &HarnessOptions::default(),
        )
        .unwrap();
        assert_eq!(plain.stop, StopReason::ExitReached);
        assert_eq!(&plain.out[..4], &18u32.to_le_bytes());
        assert_eq!(&plain.out[4..8], &0x47u32.to_le_bytes());

        // Unarmed rewritten run: stubs fall through.
        let unarmed = emulator::run_image(
            &image_r,
            LOAD,
            &inputs,
            &HarnessOptions {
                arm: false,
                ..HarnessOptions::default()
            },
        )
        .unwrap();
        assert_eq!(unarmed.stop, StopReason::ExitReached);
        assert_eq!(unarmed.out, plain.out);

        // Armed run under a halting policy: same outputs, zero denials.
        let monitor = armed_monitor(ReactionMode::LogHalt);
        let armed = emulator::run_image(
            &image_r,
            LOAD,
            &inputs,
            &HarnessOptions {
                monitor: Some(Arc::clone(&monitor)),
                ..HarnessOptions::default()
            },
        )
        .unwrap();
        assert_eq!(armed.stop, StopReason::ExitReached);
        assert_eq!(armed.out, plain.out);
        assert_eq!(out_values(&armed), out_values(&plain));
        assert_eq!(monitor.denied_count(), 0);
        // The checks really ran: one event per stub execution.
        assert_eq!(monitor.events().len(), 4);
        assert!(armed.steps > plain.steps);
    }

    #[test]
    fn prologue_patch_points_at_the_copy() {
        let (mut image, sidecar) = three_function_image();
        rewrite_image(&mut image, Some(&sidecar), &RewriteOptions::default()).unwrap();

        // Entry bytes must now be a five-byte jump.
        let patch = image.read_bytes(0x1000, 5).unwrap();
        assert_eq!(patch[0], 0xE9);
        let rel = i32::from_le_bytes(patch[1..5].try_into().unwrap());
        let target = 0x1005u32.wrapping_add(rel as u32);
        let host = image.find_monitor_slots().unwrap().host_section;
        let hs = &image.sections()[host];
        assert!(
            target >= hs.rva && target < hs.rva + hs.virtual_span(),
            "patch target {target:#x} lies in the host section"
        );

        // The copy at the target begins with main's first instruction.
        let first = disasm::decode(image.read_bytes(target, 16).unwrap(), target).unwrap();
        assert_eq!(first.to_string(), "add eax, ebx");
    }

    #[test]
    fn relocations_are_retired_and_carried() {
        // Entry instruction holds a relocated immediate: mov eax, <cell VA>;
        // then mov eax,[eax]; store; ret.
        let mut text = vec![0u8; 0x20];
        text[0] = 0xB8;
        text[1..5].copy_from_slice(&(BASE + 0x2000).to_le_bytes());
        text[5..7].copy_from_slice(&[0x8B, 0x00]);
        text[7..9].copy_from_slice(&[0x89, 0x05]);
        text[9..13].copy_from_slice(&OUT_BASE.to_le_bytes());
        text[13] = 0xC3;
        let mut data = vec![0u8; 4];
        data.copy_from_slice(&77u32.to_le_bytes());
        let mut b = PeBuilder::new();
        b.entry_point = 0x1000;
        b.sections.push(SectionSpec::new(".text", 0x1000, text, CODE_SECTION));
        b.sections.push(SectionSpec::new(".data", 0x2000, data, DATA_SECTION));
        let blob = reloc_blob(&[0x1001]);
        b.reloc_dir = Some((0x3000, blob.len() as u32));
        b.sections
            .push(SectionSpec::new(".reloc", 0x3000, blob, RDATA_SECTION));
        let mut image = PeImage::parse(&b.build()).unwrap();

        rewrite_image(&mut image, None, &RewriteOptions::default()).unwrap();

        // The patched range lost its relocation...
        assert!(!image.has_relocation_at(0x1001), "old site erased");
        // ...and the copy gained one at its own immediate field.
        let patch = image.read_bytes(0x1000, 5).unwrap();
        let rel = i32::from_le_bytes(patch[1..5].try_into().unwrap());
        let copy_entry = 0x1005u32.wrapping_add(rel as u32);
        assert!(image.has_relocation_at(copy_entry + 1), "copied site relocated");

        // Behavior: rebased run still reads the cell.
        let bytes = image.emit().unwrap();
        let reparsed = PeImage::parse(&bytes).unwrap();
        let out = emulator::run_image(&reparsed, LOAD, &[0; 6], &HarnessOptions::default()).unwrap();
        assert_eq!(out.stop, StopReason::ExitReached);
        assert_eq!(&out.out[..4], &77u32.to_le_bytes());
    }

    #[test]
    fn short_branches_are_widened_and_still_work() {
        // Diamond with short jumps:
        //   test eax,eax ; jz +3 ; inc eax ; jmp +1 ; dec eax ; store ; ret
        let mut text = vec![0u8; 0x20];
        let prog: &[u8] = &[
            0xB8, 0x02, 0x00, 0x00, 0x00, // mov eax, 2
            0x85, 0xC0, // test eax, eax
            0x74, 0x03, // jz +3 -> dec
            0x40, // inc eax
            0xEB, 0x01, // jmp +1 -> store
            0x48, // dec eax
            0x89, 0x05, 0, 0, 0, 0, // mov [OUT], eax (patched below)
            0xC3,
        ];
        text[..prog.len()].copy_from_slice(prog);
        text[15..19].copy_from_slice(&OUT_BASE.to_le_bytes());
        let mut b = PeBuilder::new();
        b.entry_point = 0x1000;
        b.sections.push(SectionSpec::new(".text", 0x1000, text, CODE_SECTION));
        let original = b.build();
        let (rewritten, _) = rewrite_file(&original, None, &RewriteOptions::default()).unwrap();
        let image_r = PeImage::parse(&rewritten).unwrap();

        // The copy contains no short branches.
        let slots = image_r.find_monitor_slots().unwrap();
        let hs = &image_r.sections()[slots.host_section];
        let code = &hs.raw_data[(slots.gate_rva - hs.rva) as usize + 8..];
        let mut pc = 0usize;
        let mut seen_wide_jcc = false;
        while pc < code.len() {
            let Ok(i) = disasm::decode(&code[pc..], slots.gate_rva + 8 + pc as u32) else {
                break; // trailing padding / relocation blob
            };
            assert!(
                !matches!(i.operands.first(), Some(Operand::Rel8(_))),
                "short branch survived at {:#x}",
                i.rva
            );
            if i.mnemonic == Mnemonic::Jcc {
                seen_wide_jcc = true;
            }
            if i.mnemonic == Mnemonic::Ret {
                break;
            }
            pc += i.length as usize;
        }
        assert!(seen_wide_jcc);

        let a = emulator::run_image(
            &PeImage::parse(&original).unwrap(),
            LOAD,
            &[0; 6],
            &HarnessOptions::default(),
        )
        .unwrap();
        let bb = emulator::run_image(&image_r, LOAD, &[0; 6], &HarnessOptions::default()).unwrap();
        assert_eq!(a.stop, StopReason::ExitReached);
        assert_eq!(bb.stop, StopReason::ExitReached);
        assert_eq!(a.out, bb.out);
        assert_eq!(&a.out[..4], &3u32.to_le_bytes());
    }

    #[test]
    fn iat_indirect_calls_are_not_instrumented() {
        use crate::corpus::plan_imports;
        let plan = plan_imports(0x3000, &[("NTOS.dll", &["KeQuery"][..])]);
        let slot = plan.slots[0].iat_slot_rva;
        // call [iat_slot]; store; ret  -> only the ret gets a stub.
        let mut text = Vec::new();
        text.extend_from_slice(&[0xFF, 0x15]);
        text.extend_from_slice(&(BASE + slot).to_le_bytes());
        text.extend_from_slice(&[0x89, 0x05]);
        text.extend_from_slice(&OUT_BASE.to_le_bytes());
        text.push(0xC3);
        let mut b = PeBuilder::new();
        b.entry_point = 0x1000;
        b.sections.push(SectionSpec::new(".text", 0x1000, text, CODE_SECTION));
        b.sections.push(SectionSpec::new(
            ".idata",
            0x3000,
            plan.bytes.clone(),
            RDATA_SECTION,
        ));
        b.import_dir = Some((0x3000, plan.dir_size));
        // The call's displacement holds an absolute slot address.
        let blob = reloc_blob(&[0x1002]);
        b.reloc_dir = Some((0x4000, blob.len() as u32));
        b.sections
            .push(SectionSpec::new(".reloc", 0x4000, blob, RDATA_SECTION));
        let original = b.build();
        let (rewritten, report) =
            rewrite_file(&original, None, &RewriteOptions::default()).unwrap();
        assert_eq!(report.stubs_emitted, 1, "only the ret is stubbed");

        let image_r = PeImage::parse(&rewritten).unwrap();
        let monitor = armed_monitor(ReactionMode::LogHalt);
        let out = emulator::run_image(
            &image_r,
            LOAD,
            &[0; 6],
            &HarnessOptions {
                monitor: Some(Arc::clone(&monitor)),
                ..HarnessOptions::default()
            },
        )
        .unwrap();
        assert_eq!(out.stop, StopReason::ExitReached);
        assert_eq!(&out.out[..4], &0xC0DE_0000u32.to_le_bytes());
        // One event: the final ret. The import call went unchecked.
        assert_eq!(monitor.events().len(), 1);
        assert_eq!(monitor.events()[0].kind, TransferKind::Ret);
    }

    #[test]
    fn direct_call_instrumentation_is_optional() {
        let (image, sidecar) = three_function_image();
        let original = image.emit().unwrap();
        let opts = RewriteOptions {
            instrument_direct_calls: true,
        };
        let (rewritten, report) = rewrite_file(&original, Some(&sidecar), &opts).unwrap();
        // call edx + 3 rets + the direct call to helper1.
        assert_eq!(report.stubs_emitted, 5);

        let image_r = PeImage::parse(&rewritten).unwrap();
        let monitor = armed_monitor(ReactionMode::LogHalt);
        let out = emulator::run_image(
            &image_r,
            LOAD,
            &[10, 3, 0, 0, 0, 0],
            &HarnessOptions {
                monitor: Some(Arc::clone(&monitor)),
                ..HarnessOptions::default()
            },
        )
        .unwrap();
        assert_eq!(out.stop, StopReason::ExitReached);
        assert_eq!(&out.out[..4], &18u32.to_le_bytes());
        assert_eq!(monitor.events().len(), 5);
        assert_eq!(monitor.denied_count(), 0);
    }

    #[test]
    fn esp_relative_targets_account_for_the_pushed_flags() {
        // push <&helper> ; call [esp] ; add esp,4 ; store ; ret
        // helper: add eax, 9 ; ret
        let mut text = vec![0u8; 0x40];
        text[0] = 0x68;
        text[1..5].copy_from_slice(&(BASE + 0x1030).to_le_bytes());
        text[5..8].copy_from_slice(&[0xFF, 0x14, 0x24]); // call [esp]
        text[8..11].copy_from_slice(&[0x83, 0xC4, 0x04]); // add esp, 4
        text[11..13].copy_from_slice(&[0x89, 0x05]);
        text[13..17].copy_from_slice(&OUT_BASE.to_le_bytes());
        text[17] = 0xC3;
        text[0x30..0x36].copy_from_slice(&[0x05, 0x09, 0x00, 0x00, 0x00, 0xC3]);
        let mut b = PeBuilder::new();
        b.entry_point = 0x1000;
        b.sections.push(SectionSpec::new(".text", 0x1000, text, CODE_SECTION));
        let blob = reloc_blob(&[0x1001]);
        b.reloc_dir = Some((0x3000, blob.len() as u32));
        b.sections
            .push(SectionSpec::new(".reloc", 0x3000, blob, RDATA_SECTION));
        let original = b.build();
        let sidecar = analyzer::parse_sidecar("1030 func helper").unwrap();
        let (rewritten, _) = rewrite_file(&original, Some(&sidecar), &RewriteOptions::default())
            .unwrap();
        let image_r = PeImage::parse(&rewritten).unwrap();

        // The stub push reads one slot above where the original operand did.
        let slots = image_r.find_monitor_slots().unwrap();
        let hs = &image_r.sections()[slots.host_section];
        let code_off = (slots.gate_rva - hs.rva) as usize + 8;
        let code_rva = slots.gate_rva + 8;
        let listing: Vec<String> = {
            let mut v = Vec::new();
            let mut pc = 0usize;
            while code_off + pc < hs.raw_data.len() {
                match disasm::decode(&hs.raw_data[code_off + pc..], code_rva + pc as u32) {
                    Ok(i) => {
                        pc += i.length as usize;
                        let done = i.mnemonic == Mnemonic::Ret;
                        v.push(i.to_string());
                        if done && v.iter().filter(|s| s.starts_with("ret")).count() >= 2 {
                            break;
                        }
                    }
                    Err(_) => break,
                }
            }
            v
        };
        assert!(
            listing.iter().any(|s| s == "push dword [esp+0x4]"),
            "adjusted push missing from {listing:?}"
        );

        let monitor = armed_monitor(ReactionMode::LogHalt);
        let a = emulator::run_image(
            &PeImage::parse(&original).unwrap(),
            LOAD,
            &[100, 0, 0, 0, 0, 0],
            &HarnessOptions::default(),
        )
        .unwrap();
        let bb = emulator::run_image(
            &image_r,
            LOAD,
            &[100, 0, 0, 0, 0, 0],
            &HarnessOptions {
                monitor: Some(Arc::clone(&monitor)),
                ..HarnessOptions::default()
            },
        )
        .unwrap();
        assert_eq!(a.stop, StopReason::ExitReached);
        assert_eq!(bb.stop, StopReason::ExitReached);
        assert_eq!(a.out, bb.out);
        assert_eq!(&a.out[..4], &109u32.to_le_bytes());
        assert_eq!(monitor.denied_count(), 0);
    }

    #[test]
    fn host_section_reuses_trailing_reloc_section() {
        let (image, sidecar) = three_function_image();
        let n_before = image.sections().len();
        let mut image = image;
        rewrite_image(&mut image, Some(&sidecar), &RewriteOptions::default()).unwrap();
        assert_eq!(image.sections().len(), n_before, "reloc section grew in place");
        let host = image.find_monitor_slots().unwrap().host_section;
        assert_eq!(image.sections()[host].name_str(), ".reloc");
        assert!(image.sections()[host].executable());
        // Emit and reparse to prove the converted layout is valid.
        let bytes = image.emit().unwrap();
        PeImage::parse(&bytes).unwrap();
    }

    #[test]
    fn host_section_appends_when_reloc_is_not_last() {
        // Sections: .text, .reloc, .data — the reloc table is not last, so a
        // fresh host section must be appended.
        let mut text = vec![0u8; 0x10];
        text[0..5].copy_from_slice(&[0xB8, 0x01, 0x00, 0x00, 0x00]);
        text[5] = 0xC3;
        let mut b = PeBuilder::new();
        b.entry_point = 0x1000;
        b.sections.push(SectionSpec::new(".text", 0x1000, text, CODE_SECTION));
        let blob = reloc_blob(&[0x3000]);
        b.reloc_dir = Some((0x2000, blob.len() as u32));
        b.sections
            .push(SectionSpec::new(".reloc", 0x2000, blob, RDATA_SECTION));
        let mut data = vec![0u8; 8];
        data[0..4].copy_from_slice(&(BASE + 0x1000).to_le_bytes());
        b.sections.push(SectionSpec::new(".data", 0x3000, data, DATA_SECTION));
        let mut image = PeImage::parse(&b.build()).unwrap();
        let n_before = image.sections().len();
        rewrite_image(&mut image, None, &RewriteOptions::default()).unwrap();
        assert_eq!(image.sections().len(), n_before + 1);
        let host = image.find_monitor_slots().unwrap().host_section;
        assert_eq!(image.sections()[host].name_str(), ".shep");
        let bytes = image.emit().unwrap();
        PeImage::parse(&bytes).unwrap();
    }

    #[test]
    fn unpatchable_functions_keep_their_bytes() {
        // Entry calls a 3-byte helper that cannot host a patch.
        let mut text = vec![0u8; 0x20];
        text[0..5].copy_from_slice(&[0xE8, 0x0B, 0x00, 0x00, 0x00]);
        text[5] = 0xC3;
        text[0x10..0x13].copy_from_slice(&[0x31, 0xC0, 0xC3]);
        let mut b = PeBuilder::new();
        b.entry_point = 0x1000;
        b.sections.push(SectionSpec::new(".text", 0x1000, text, CODE_SECTION));
        let original = b.build();
        let (rewritten, report) = rewrite_file(&original, None, &RewriteOptions::default()).unwrap();
        assert_eq!(report.functions_total, 2);
        assert_eq!(report.functions_patched, 1);
        let image_r = PeImage::parse(&rewritten).unwrap();
        // The helper's bytes are untouched; the entry is patched.
        assert_eq!(image_r.read_bytes(0x1010, 3).unwrap(), &[0x31, 0xC0, 0xC3]);
        assert_eq!(image_r.read_bytes(0x1000, 1).unwrap(), &[0xE9]);
        // And the mixed image still behaves.
        let out = emulator::run_image(&image_r, LOAD, &[9; 6], &HarnessOptions::default()).unwrap();
        assert_eq!(out.stop, StopReason::ExitReached);
    }

    #[test]
    fn emission_is_stable_and_reparses() {
        let (image, sidecar) = three_function_image();
        let original = image.emit().unwrap();
        let (rewritten, _) = rewrite_file(&original, Some(&sidecar), &RewriteOptions::default())
            .unwrap();
        let reparsed = PeImage::parse(&rewritten).unwrap();
        assert_eq!(reparsed.emit().unwrap(), rewritten, "emit is a fixed point");
        // Rewriting is deterministic.
        let (again, _) = rewrite_file(&original, Some(&sidecar), &RewriteOptions::default())
            .unwrap();
        assert_eq!(again, rewritten);
    }

    #[test]
    fn report_columns_match_the_header() {
        let (image, sidecar) = three_function_image();
        let original = image.emit().unwrap();
        let (_, report) = rewrite_file(&original, Some(&sidecar), &RewriteOptions::default())
            .unwrap();
        let header_cols = RewriteReport::CSV_HEADER.split(',').count();
        let row = report.csv_row("sample.sys");
        assert_eq!(row.split(',').count(), header_cols);
        assert!(row.starts_with("sample.sys,"));
        assert_eq!(report.functions_total, 3);
        assert!(report.instructions > 0);
        assert!(report.basic_blocks > 0);
    }
}
