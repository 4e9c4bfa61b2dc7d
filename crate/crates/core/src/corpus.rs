//! Synthetic PE32 workload builder.
//!
//! Two layers live here. The bottom layer (`PeBuilder`, `reloc_blob`,
//! `plan_imports`) assembles well-formed PE32 files from explicit parts and
//! is deliberately independent of the parser in [`crate::pe`], so the two
//! act as cross-checks on each other. The top layer
//! ([`generate_program`] / [`generate_corpus`]) emits randomized but
//! *evaluable* programs: every generated program computes a deterministic
//! function of its initial registers, described by a [`ProgramSpec`] mirror
//! that predicts the output window without running any code — so a harness
//! can verify that an image (original or rewritten) still computes the same
//! thing. Each program also plants a fixed set of discovery traps, and
//! [`trampoline_scenario`] / [`forged_index_scenario`] build small hostile
//! modules with benign twins for policy testing.

use crate::emulator::{self, HarnessOptions, StopReason, API_RESULT_BASE, OUT_BASE};
use crate::monitor::{Monitor, PolicyConfig, ReactionMode, TransferEvent};
use crate::pe::{
    align_up, PeImage, SCN_CNT_CODE, SCN_CNT_INITIALIZED_DATA, SCN_MEM_EXECUTE, SCN_MEM_NOT_PAGED,
    SCN_MEM_READ, SCN_MEM_WRITE,
};
use crate::rewriter::{self, RewriteOptions};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

// ---------------------------------------------------------------------------
// Byte helpers
// ---------------------------------------------------------------------------

fn wr_u16(b: &mut [u8], off: usize, v: u16) {
    b[off..off + 2].copy_from_slice(&v.to_le_bytes());
}

fn wr_u32(b: &mut [u8], off: usize, v: u32) {
    b[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

/// Characteristics for a normal code section.
pub const CODE_SECTION: u32 = SCN_CNT_CODE | SCN_MEM_READ | SCN_MEM_EXECUTE | SCN_MEM_NOT_PAGED;
/// Characteristics for a read/write data section.
pub const DATA_SECTION: u32 = SCN_CNT_INITIALIZED_DATA | SCN_MEM_READ | SCN_MEM_WRITE;
/// Characteristics for read-only metadata sections (.idata, .reloc).
pub const RDATA_SECTION: u32 = SCN_CNT_INITIALIZED_DATA | SCN_MEM_READ;

// ---------------------------------------------------------------------------
// File assembly
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SectionSpec {
    pub name: [u8; 8],
    pub rva: u32,
    pub content: Vec<u8>,
    /// 0 means "same as content length".
    pub virtual_size: u32,
    pub characteristics: u32,
}

impl SectionSpec {
    pub fn new(name: &str, rva: u32, content: Vec<u8>, characteristics: u32) -> SectionSpec {
        let mut n = [0u8; 8];
        n[..name.len()].copy_from_slice(name.as_bytes());
        SectionSpec {
            name: n,
            rva,
            content,
            virtual_size: 0,
            characteristics,
        }
    }
}

/// Assembles a complete PE32 file from explicit sections and directory
/// pointers. Section raw data is packed sequentially after the headers at
/// file-alignment boundaries, in the order given (which must be ascending
/// by RVA).
#[derive(Debug, Clone)]
pub struct PeBuilder {
    pub image_base: u32,
    pub entry_point: u32,
    pub size_of_headers: u32,
    pub file_alignment: u32,
    pub section_alignment: u32,
    pub with_checksum: bool,
    pub sections: Vec<SectionSpec>,
    pub reloc_dir: Option<(u32, u32)>,
    pub import_dir: Option<(u32, u32)>,
}

impl Default for PeBuilder {
    fn default() -> Self {
        PeBuilder {
            image_base: 0x0040_0000,
            entry_point: 0,
            size_of_headers: 0x400,
            file_alignment: 0x200,
            section_alignment: 0x1000,
            with_checksum: true,
            sections: Vec::new(),
            reloc_dir: None,
            import_dir: None,
        }
    }
}

impl PeBuilder {
    pub fn new() -> PeBuilder {
        PeBuilder::default()
    }

    pub fn build(&self) -> Vec<u8> {
        let fa = self.file_alignment;
        let mut rows = Vec::new();
        let mut cursor = self.size_of_headers;
        for s in &self.sections {
            let declared = align_up((s.content.len() as u32).max(1), fa);
            rows.push((s, cursor, declared));
            cursor += declared;
        }

        let mut out = vec![0u8; cursor as usize];
        out[0] = b'M';
        out[1] = b'Z';
        wr_u32(&mut out, 0x3C, 0x40);
        out[0x40..0x44].copy_from_slice(b"PE\0\0");

        let coff = 0x44;
        wr_u16(&mut out, coff, 0x014C); // i386
        wr_u16(&mut out, coff + 2, self.sections.len() as u16);
        wr_u16(&mut out, coff + 16, 0xE0); // optional header size
        wr_u16(&mut out, coff + 18, 0x0102); // executable, 32-bit

        let opt = 0x58;
        wr_u16(&mut out, opt, 0x010B); // PE32
        wr_u32(&mut out, opt + 16, self.entry_point);
        wr_u32(&mut out, opt + 28, self.image_base);
        wr_u32(&mut out, opt + 32, self.section_alignment);
        wr_u32(&mut out, opt + 36, fa);
        let size_of_image = rows
            .iter()
            .map(|(s, _, d)| {
                let span = s.virtual_size.max(*d).max(s.content.len() as u32).max(1);
                s.rva + align_up(span, self.section_alignment)
            })
            .max()
            .unwrap_or(self.section_alignment);
        wr_u32(&mut out, opt + 56, size_of_image);
        wr_u32(&mut out, opt + 60, self.size_of_headers);
        wr_u16(&mut out, opt + 68, 1); // native subsystem
        wr_u32(&mut out, opt + 92, 16); // directory count
        if let Some((rva, sz)) = self.import_dir {
            wr_u32(&mut out, opt + 96 + 8, rva);
            wr_u32(&mut out, opt + 96 + 12, sz);
        }
        if let Some((rva, sz)) = self.reloc_dir {
            wr_u32(&mut out, opt + 96 + 40, rva);
            wr_u32(&mut out, opt + 96 + 44, sz);
        }

        let table = opt + 0xE0;
        for (i, (s, ptr, declared)) in rows.iter().enumerate() {
            let row = table + i * 40;
            out[row..row + 8].copy_from_slice(&s.name);
            let vsize = if s.virtual_size == 0 {
                s.content.len() as u32
            } else {
                s.virtual_size
            };
            wr_u32(&mut out, row + 8, vsize);
            wr_u32(&mut out, row + 12, s.rva);
            wr_u32(&mut out, row + 16, *declared);
            wr_u32(&mut out, row + 20, *ptr);
            wr_u32(&mut out, row + 36, s.characteristics);
            let p = *ptr as usize;
            out[p..p + s.content.len()].copy_from_slice(&s.content);
        }

        if self.with_checksum {
            let ck_off = opt + 64;
            let ck = crate::pe::checksum_of(&out, ck_off);
            wr_u32(&mut out, ck_off, ck);
        }
        out
    }
}

/// Serialize HIGHLOW relocation RVAs into the on-disk block format: one
/// block per 4 KiB page, each padded to a 4-byte size with a type-0 entry.
pub fn reloc_blob(rvas: &[u32]) -> Vec<u8> {
    let mut sorted: Vec<u32> = rvas.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut out = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let page = sorted[i] & !0xFFF;
        let mut entries = Vec::new();
        while i < sorted.len() && sorted[i] & !0xFFF == page {
            entries.push((0x3000 | (sorted[i] & 0xFFF)) as u16);
            i += 1;
        }
        if entries.len() % 2 == 1 {
            entries.push(0);
        }
        out.extend_from_slice(&page.to_le_bytes());
        out.extend_from_slice(&((8 + entries.len() * 2) as u32).to_le_bytes());
        for e in entries {
            out.extend_from_slice(&e.to_le_bytes());
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Import planning
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannedImport {
    pub library: String,
    pub symbol: String,
    pub iat_slot_rva: u32,
}

#[derive(Debug, Clone)]
pub struct ImportPlan {
    /// Content of the import section, to place at the RVA given to
    /// [`plan_imports`].
    pub bytes: Vec<u8>,
    pub slots: Vec<PlannedImport>,
    /// Size to record in the import directory entry.
    pub dir_size: u32,
}

/// Lay out an import directory at `idata_rva`: descriptor table, original
/// and bound thunk arrays, hint/name entries, and library name strings.
/// Returns the section bytes plus the IAT slot RVA assigned to each symbol,
/// so code can be generated against known slot addresses.
pub fn plan_imports(idata_rva: u32, libs: &[(&str, &[&str])]) -> ImportPlan {
    let desc_len = (libs.len() + 1) * 20;

    // First pass: sizes. Per library: OFT and FT arrays of (n+1) entries.
    let mut thunk_offs = Vec::new();
    let mut off = desc_len;
    for (_, syms) in libs {
        let oft = off;
        off += (syms.len() + 1) * 4;
        let ft = off;
        off += (syms.len() + 1) * 4;
        thunk_offs.push((oft, ft));
    }
    // Hint/name entries, each 2-byte hint + name + NUL, padded to even.
    let mut name_offs = Vec::new();
    for (_, syms) in libs {
        let mut per = Vec::new();
        for s in syms.iter() {
            per.push(off);
            let mut len = 2 + s.len() + 1;
            if len % 2 == 1 {
                len += 1;
            }
            off += len;
        }
        name_offs.push(per);
    }
    let mut lib_name_offs = Vec::new();
    for (lib, _) in libs {
        lib_name_offs.push(off);
        off += lib.len() + 1;
    }

    let mut bytes = vec![0u8; off];
    let mut slots = Vec::new();
    for (li, (lib, syms)) in libs.iter().enumerate() {
        let d = li * 20;
        let (oft, ft) = thunk_offs[li];
        wr_u32(&mut bytes, d, idata_rva + oft as u32);
        wr_u32(&mut bytes, d + 12, idata_rva + lib_name_offs[li] as u32);
        wr_u32(&mut bytes, d + 16, idata_rva + ft as u32);
        for (si, sym) in syms.iter().enumerate() {
            let name_rva = idata_rva + name_offs[li][si] as u32;
            wr_u32(&mut bytes, oft + si * 4, name_rva);
            wr_u32(&mut bytes, ft + si * 4, name_rva);
            let n = name_offs[li][si];
            bytes[n + 2..n + 2 + sym.len()].copy_from_slice(sym.as_bytes());
            slots.push(PlannedImport {
                library: lib.to_string(),
                symbol: sym.to_string(),
                iat_slot_rva: idata_rva + (ft + si * 4) as u32,
            });
        }
        let l = lib_name_offs[li];
        bytes[l..l + lib.len()].copy_from_slice(lib.as_bytes());
    }

    ImportPlan {
        bytes,
        slots,
        dir_size: desc_len as u32,
    }
}

// ---------------------------------------------------------------------------
// Evaluable program model
// ---------------------------------------------------------------------------

const TEXT_RVA: u32 = 0x1000;
const DATA_RVA: u32 = 0x2000;
/// Corpus images are loaded here during verification: above the kernel
/// boundary, like a driver mapped into system space.
pub const CORPUS_LOAD_BASE: u32 = 0xA000_0000;
/// Alternate base used for rebase-invariance checks.
pub const CORPUS_REBASE_DELTA: u32 = 0x0001_0000;

/// Marker for "call the 3-byte helper that is too small to patch".
pub const TINY_HELPER: u8 = 0xFF;

/// One value-transforming operation inside a generated helper. Every
/// variant has a fixed encoding whose effect the mirror reproduces exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EvalOp {
    Add(u32),
    Xor(u32),
    Sub(u32),
    Or(u32),
    And(u32),
    /// `if x & mask != 0 { x + add } else { x ^ xor }`, encoded as a
    /// two-armed diamond; `wide` picks 32-bit branch forms, otherwise the
    /// short forms (which the rewriter must widen).
    Branch { mask: u32, add: u32, xor: u32, wide: bool },
    /// `x + k`, `n` times, via a counted loop (clobbers ECX).
    Repeat { n: u32, k: u32 },
}

impl EvalOp {
    pub fn apply(&self, x: u32) -> u32 {
        match *self {
            EvalOp::Add(k) => x.wrapping_add(k),
            EvalOp::Xor(k) => x ^ k,
            EvalOp::Sub(k) => x.wrapping_sub(k),
            EvalOp::Or(k) => x | k,
            EvalOp::And(k) => x & k,
            EvalOp::Branch { mask, add, xor, .. } => {
                if x & mask != 0 {
                    x.wrapping_add(add)
                } else {
                    x ^ xor
                }
            }
            EvalOp::Repeat { n, k } => x.wrapping_add(k.wrapping_mul(n)),
        }
    }

    fn encoded_len(&self) -> u32 {
        match self {
            EvalOp::Add(_) | EvalOp::Xor(_) | EvalOp::Sub(_) | EvalOp::Or(_) | EvalOp::And(_) => 5,
            EvalOp::Branch { wide: false, .. } => 24,
            EvalOp::Branch { wide: true, .. } => 31,
            EvalOp::Repeat { .. } => 13,
        }
    }

    fn emit(&self, buf: &mut Vec<u8>) {
        match *self {
            EvalOp::Add(k) => {
                buf.push(0x05);
                buf.extend_from_slice(&k.to_le_bytes());
            }
            EvalOp::Xor(k) => {
                buf.push(0x35);
                buf.extend_from_slice(&k.to_le_bytes());
            }
            EvalOp::Sub(k) => {
                buf.push(0x2D);
                buf.extend_from_slice(&k.to_le_bytes());
            }
            EvalOp::Or(k) => {
                buf.push(0x0D);
                buf.extend_from_slice(&k.to_le_bytes());
            }
            EvalOp::And(k) => {
                buf.push(0x25);
                buf.extend_from_slice(&k.to_le_bytes());
            }
            EvalOp::Branch { mask, add, xor, wide } => {
                buf.extend_from_slice(&[0x89, 0xC2]); // mov edx, eax
                buf.extend_from_slice(&[0x81, 0xE2]); // and edx, mask
                buf.extend_from_slice(&mask.to_le_bytes());
                buf.extend_from_slice(&[0x85, 0xD2]); // test edx, edx
                if wide {
                    buf.extend_from_slice(&[0x0F, 0x84, 0x0A, 0x00, 0x00, 0x00]); // jz else
                    buf.push(0x05); // add eax, add
                    buf.extend_from_slice(&add.to_le_bytes());
                    buf.extend_from_slice(&[0xE9, 0x05, 0x00, 0x00, 0x00]); // jmp end
                } else {
                    buf.extend_from_slice(&[0x74, 0x07]); // jz else
                    buf.push(0x05);
                    buf.extend_from_slice(&add.to_le_bytes());
                    buf.extend_from_slice(&[0xEB, 0x05]); // jmp end
                }
                buf.push(0x35); // else: xor eax, xor
                buf.extend_from_slice(&xor.to_le_bytes());
            }
            EvalOp::Repeat { n, k } => {
                buf.push(0xB9); // mov ecx, n
                buf.extend_from_slice(&n.to_le_bytes());
                buf.push(0x05); // body: add eax, k
                buf.extend_from_slice(&k.to_le_bytes());
                buf.push(0x49); // dec ecx
                buf.extend_from_slice(&[0x75, 0xF8]); // jnz body
            }
        }
    }
}

/// How a generated call step reaches its callee.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mech {
    /// `call rel32` straight at the helper.
    Direct,
    /// `call [cell]` through a function-pointer variable in `.data`.
    MemPtr,
    /// `mov edx, [cell]; call edx`.
    RegFromPtr,
    /// `mov edx, k; call [edx*4 + table]` through the `.data` jump table.
    TableReg(u8),
    /// `call [iat_slot]` — resolved by the loader, exempt from stubs.
    Import(u8),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallStep {
    /// Which initial input (0..6) seeds the call's argument.
    pub input: u8,
    pub pre_add: Option<u32>,
    /// Helper index, or [`TINY_HELPER`] for the unpatchable 3-byte callee.
    pub helper: u8,
    pub mech: Mech,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HelperSpec {
    pub ops: Vec<EvalOp>,
    /// Ends with a jump to the shared return instead of its own `ret`.
    pub shares_tail: bool,
}

impl HelperSpec {
    pub fn eval(&self, mut x: u32) -> u32 {
        for op in &self.ops {
            x = op.apply(x);
        }
        x
    }

    fn encoded_len(&self) -> u32 {
        let body: u32 = self.ops.iter().map(EvalOp::encoded_len).sum();
        body + if self.shares_tail { 2 } else { 1 }
    }
}

/// The complete, evaluable description of a generated program. The emitted
/// machine code and [`ProgramSpec::expected_out`] are two renderings of this
/// one structure; agreement between them is what verification checks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProgramSpec {
    pub helpers: Vec<HelperSpec>,
    /// Four-slot jump table: table\[k\] names a helper index.
    pub table: [u8; 4],
    pub steps: Vec<CallStep>,
    /// Put the relocation section last so the rewriter can grow it in
    /// place; otherwise a fresh host section must be appended.
    pub reloc_last: bool,
}

impl ProgramSpec {
    pub fn n_outputs(&self) -> usize {
        6 + self.steps.len()
    }

    fn step_result(&self, step: &CallStep, inputs: &[u32; 6]) -> u32 {
        let mut x = inputs[step.input as usize];
        if let Some(k) = step.pre_add {
            x = x.wrapping_add(k);
        }
        match step.mech {
            Mech::Import(i) => API_RESULT_BASE + i as u32,
            Mech::TableReg(k) => self.helpers[self.table[k as usize] as usize].eval(x),
            _ if step.helper == TINY_HELPER => 0, // xor eax, eax; ret
            _ => self.helpers[step.helper as usize].eval(x),
        }
    }

    /// The exact output-window words the program writes: the six inputs,
    /// then one result per call step.
    pub fn expected_out(&self, inputs: &[u32; 6]) -> Vec<u32> {
        let mut out: Vec<u32> = inputs.to_vec();
        for step in &self.steps {
            out.push(self.step_result(step, inputs));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Program emission
// ---------------------------------------------------------------------------

/// Where the planted discovery traps ended up, for tests that assert on the
/// analyzer's verdicts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrapSites {
    /// 3-byte callee: too small for a 5-byte entry patch.
    pub tiny: u32,
    /// Pointer-discovered single-block function.
    pub single_block: u32,
    /// Pointer-discovered printable-ASCII blob.
    pub all_text: u32,
    /// A `.data` relocation whose value lands inside an instruction.
    pub mid_instruction_target: u32,
    /// Function named only by the symbol sidecar; never called.
    pub orphan: u32,
}

#[derive(Debug, Clone)]
pub struct GeneratedProgram {
    pub name: String,
    pub seed: u64,
    pub bytes: Vec<u8>,
    /// Symbol sidecar text naming main, the helpers, and the orphan.
    pub sidecar: String,
    pub spec: ProgramSpec,
    pub traps: TrapSites,
}

/// Store `[OUT + 4*slot] <- reg` / load `eax <- [OUT + 4*slot]` encodings
/// use the absolute output-window address, which does not move with the
/// module and therefore carries no relocation.
const INPUT_REG_CODES: [u8; 6] = [0, 3, 1, 2, 6, 7]; // eax ebx ecx edx esi edi

fn mech_len(m: Mech) -> u32 {
    match m {
        Mech::Direct => 5,
        Mech::MemPtr | Mech::Import(_) => 6,
        Mech::RegFromPtr => 8,
        Mech::TableReg(_) => 12,
    }
}

fn step_len(s: &CallStep) -> u32 {
    6 + if s.pre_add.is_some() { 5 } else { 0 } + mech_len(s.mech) + 6
}

fn printable_blob() -> Vec<u8> {
    let mut blob = Vec::new();
    blob.extend_from_slice(b"PQRSp.Tq+");
    blob.extend_from_slice(&[b'A'; 43]);
    blob.extend_from_slice(b"XYZ[\\");
    blob.push(0xFE); // guard byte: stops the decode walk, is not text
    blob
}

struct TextLayout {
    main_len: u32,
    helper_offs: Vec<u32>,
    shared_ret_off: Option<u32>,
    tiny_off: u32,
    single_off: u32,
    all_text_off: u32,
    orphan_off: u32,
    total: u32,
}

fn align4(x: u32) -> u32 {
    (x + 3) & !3
}

fn layout_text(spec: &ProgramSpec) -> TextLayout {
    let main_len = 36 + spec.steps.iter().map(step_len).sum::<u32>() + 1;
    let mut off = align4(main_len);
    let mut helper_offs = Vec::new();
    for h in &spec.helpers {
        helper_offs.push(off);
        off = align4(off + h.encoded_len());
    }
    let shared_ret_off = if spec.helpers.iter().any(|h| h.shares_tail) {
        let o = off;
        off = align4(off + 1);
        Some(o)
    } else {
        None
    };
    let tiny_off = off;
    off = align4(off + 3);
    let single_off = off;
    off = align4(off + 5);
    let all_text_off = off;
    off = align4(off + printable_blob().len() as u32);
    let orphan_off = off;
    off = align4(off + 6);
    TextLayout {
        main_len,
        helper_offs,
        shared_ret_off,
        tiny_off,
        single_off,
        all_text_off,
        orphan_off,
        total: off,
    }
}

struct TextEmit {
    buf: Vec<u8>,
    /// Text-relative offsets of absolute 32-bit fields needing relocation.
    reloc_offs: Vec<u32>,
}

impl TextEmit {
    fn pad_to(&mut self, off: u32) {
        assert!(self.buf.len() <= off as usize, "layout overflow");
        while self.buf.len() < off as usize {
            self.buf.push(0xCC);
        }
    }

    fn raw(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Absolute address that moves with the module: record a relocation.
    fn abs32(&mut self, va: u32) {
        self.reloc_offs.push(self.buf.len() as u32);
        self.buf.extend_from_slice(&va.to_le_bytes());
    }

    /// Absolute address outside the module (the output window): no
    /// relocation.
    fn ext32(&mut self, va: u32) {
        self.buf.extend_from_slice(&va.to_le_bytes());
    }
}

fn emit_text(
    spec: &ProgramSpec,
    lay: &TextLayout,
    pvar_va: &dyn Fn(u8) -> u32,
    table_va: u32,
    iat_va: &dyn Fn(u8) -> u32,
) -> TextEmit {
    let mut e = TextEmit {
        buf: Vec::with_capacity(lay.total as usize),
        reloc_offs: Vec::new(),
    };

    // main: spill the six inputs, then run the call steps.
    for (i, &rc) in INPUT_REG_CODES.iter().enumerate() {
        e.raw(&[0x89, 0x05 | (rc << 3)]);
        e.ext32(OUT_BASE + 4 * i as u32);
    }
    for (i, step) in spec.steps.iter().enumerate() {
        e.raw(&[0x8B, 0x05]); // mov eax, [OUT + 4*input]
        e.ext32(OUT_BASE + 4 * step.input as u32);
        if let Some(k) = step.pre_add {
            e.raw(&[0x05]);
            e.raw(&k.to_le_bytes());
        }
        match step.mech {
            Mech::Direct => {
                let target_off = if step.helper == TINY_HELPER {
                    lay.tiny_off
                } else {
                    lay.helper_offs[step.helper as usize]
                };
                let next = e.buf.len() as u32 + 5;
                let rel = target_off.wrapping_sub(next);
                e.raw(&[0xE8]);
                e.raw(&rel.to_le_bytes());
            }
            Mech::MemPtr => {
                e.raw(&[0xFF, 0x15]);
                e.abs32(pvar_va(step.helper));
            }
            Mech::RegFromPtr => {
                e.raw(&[0x8B, 0x15]); // mov edx, [cell]
                e.abs32(pvar_va(step.helper));
                e.raw(&[0xFF, 0xD2]); // call edx
            }
            Mech::TableReg(k) => {
                e.raw(&[0xBA]); // mov edx, k
                e.raw(&(k as u32).to_le_bytes());
                e.raw(&[0xFF, 0x14, 0x95]); // call [edx*4 + table]
                e.abs32(table_va);
            }
            Mech::Import(idx) => {
                e.raw(&[0xFF, 0x15]);
                e.abs32(iat_va(idx));
            }
        }
        e.raw(&[0x89, 0x05]); // mov [OUT + 4*(6+i)], eax
        e.ext32(OUT_BASE + 4 * (6 + i) as u32);
    }
    e.raw(&[0xC3]);
    assert_eq!(e.buf.len() as u32, lay.main_len, "main length model");

    // Helpers.
    for (hi, h) in spec.helpers.iter().enumerate() {
        e.pad_to(lay.helper_offs[hi]);
        for op in &h.ops {
            op.emit(&mut e.buf);
        }
        if h.shares_tail {
            let shared = lay.shared_ret_off.expect("shared tail present");
            let next = e.buf.len() as u32 + 2;
            let rel = shared.wrapping_sub(next);
            assert!((rel as i32).unsigned_abs() < 0x80, "tail jump stays short");
            e.raw(&[0xEB, rel as u8]);
        } else {
            e.raw(&[0xC3]);
        }
    }
    if let Some(shared) = lay.shared_ret_off {
        e.pad_to(shared);
        e.raw(&[0xC3]);
    }

    // Traps.
    e.pad_to(lay.tiny_off);
    e.raw(&[0x31, 0xC0, 0xC3]); // xor eax, eax; ret
    e.pad_to(lay.single_off);
    e.raw(&[0x55, 0x8B, 0xEC, 0x5D, 0xC3]); // push ebp; mov ebp,esp; pop ebp; ret
    e.pad_to(lay.all_text_off);
    e.raw(&printable_blob());
    e.pad_to(lay.orphan_off);
    e.raw(&[0xB8, 0x7B, 0x00, 0x00, 0x00, 0xC3]); // mov eax, 123; ret
    e.pad_to(lay.total);
    e
}

/// Render a program spec into a complete PE32 file with its sidecar.
pub fn build_program(spec: &ProgramSpec, name: &str, seed: u64) -> GeneratedProgram {
    let lay = layout_text(spec);
    let image_base = 0x0040_0000u32;

    // .data layout: one pointer cell per helper, the 4-slot table, then the
    // three trap cells and an inert UTF-16 string.
    let n_helpers = spec.helpers.len() as u32;
    let pvar_rva = |h: u8| DATA_RVA + 4 * h as u32;
    let table_rva = DATA_RVA + 4 * n_helpers;
    let single_cell = table_rva + 16;
    let all_text_cell = single_cell + 4;
    let mid_cell = all_text_cell + 4;
    let utf16_off = mid_cell + 4 - DATA_RVA;

    let (idata_rva, reloc_rva) = if spec.reloc_last {
        (0x3000, 0x4000)
    } else {
        (0x4000, 0x3000)
    };
    let imports = plan_imports(
        idata_rva,
        &[("ntoskrnl.exe", &["KeQueryPerformanceCounter", "KeBugCheckEx"][..])],
    );

    let text = emit_text(
        spec,
        &lay,
        &|h| image_base + pvar_rva(h),
        image_base + table_rva,
        &|i| image_base + imports.slots[i as usize].iat_slot_rva,
    );

    let mut data = vec![0u8; utf16_off as usize];
    let mut data_relocs = Vec::new();
    {
        let mut cell = |rva: u32, value_rva: u32| {
            let off = (rva - DATA_RVA) as usize;
            data[off..off + 4].copy_from_slice(&(image_base + value_rva).to_le_bytes());
            data_relocs.push(rva);
        };
        for h in 0..spec.helpers.len() as u8 {
            cell(pvar_rva(h), TEXT_RVA + lay.helper_offs[h as usize]);
        }
        for (j, &hidx) in spec.table.iter().enumerate() {
            cell(table_rva + 4 * j as u32, TEXT_RVA + lay.helper_offs[hidx as usize]);
        }
        cell(single_cell, TEXT_RVA + lay.single_off);
        cell(all_text_cell, TEXT_RVA + lay.all_text_off);
        // Lands one byte into main's first instruction.
        cell(mid_cell, TEXT_RVA + 1);
    }
    for ch in "Driver Version 1.0".encode_utf16() {
        data.extend_from_slice(&ch.to_le_bytes());
    }
    data.extend_from_slice(&[0, 0]);

    let mut relocs: Vec<u32> = text.reloc_offs.iter().map(|o| TEXT_RVA + o).collect();
    relocs.extend(&data_relocs);
    let blob = reloc_blob(&relocs);

    let mut b = PeBuilder::new();
    b.entry_point = TEXT_RVA;
    b.size_of_headers = 0x200;
    b.sections
        .push(SectionSpec::new(".text", TEXT_RVA, text.buf, CODE_SECTION));
    b.sections
        .push(SectionSpec::new(".data", DATA_RVA, data, DATA_SECTION));
    b.import_dir = Some((idata_rva, imports.dir_size));
    b.reloc_dir = Some((reloc_rva, blob.len() as u32));
    if spec.reloc_last {
        b.sections
            .push(SectionSpec::new(".idata", idata_rva, imports.bytes.clone(), RDATA_SECTION));
        b.sections
            .push(SectionSpec::new(".reloc", reloc_rva, blob, RDATA_SECTION));
    } else {
        b.sections
            .push(SectionSpec::new(".reloc", reloc_rva, blob, RDATA_SECTION));
        b.sections
            .push(SectionSpec::new(".idata", idata_rva, imports.bytes.clone(), RDATA_SECTION));
    }

    let mut sidecar = format!("{:x} func main\n", TEXT_RVA);
    for (hi, off) in lay.helper_offs.iter().enumerate() {
        sidecar.push_str(&format!("{:x} func helper_{hi}\n", TEXT_RVA + off));
    }
    sidecar.push_str(&format!("{:x} func orphan\n", TEXT_RVA + lay.orphan_off));

    GeneratedProgram {
        name: name.to_string(),
        seed,
        bytes: b.build(),
        sidecar,
        spec: spec.clone(),
        traps: TrapSites {
            tiny: TEXT_RVA + lay.tiny_off,
            single_block: TEXT_RVA + lay.single_off,
            all_text: TEXT_RVA + lay.all_text_off,
            mid_instruction_target: TEXT_RVA + 1,
            orphan: TEXT_RVA + lay.orphan_off,
        },
    }
}

// ---------------------------------------------------------------------------
// Randomized generation
// ---------------------------------------------------------------------------

fn rand_below(rng: &mut ChaCha8Rng, n: u32) -> u32 {
    rng.next_u32() % n
}

fn random_op(rng: &mut ChaCha8Rng) -> EvalOp {
    match rand_below(rng, 8) {
        0 => EvalOp::Add(rng.next_u32()),
        1 => EvalOp::Xor(rng.next_u32()),
        2 => EvalOp::Sub(rng.next_u32()),
        3 => EvalOp::Or(rng.next_u32() | 1),
        4 => EvalOp::And(rng.next_u32() | 0xFF),
        5 | 6 => EvalOp::Branch {
            mask: 1 << rand_below(rng, 8),
            add: rng.next_u32(),
            xor: rng.next_u32(),
            wide: rng.next_u32() & 1 == 0,
        },
        _ => EvalOp::Repeat {
            n: 1 + rand_below(rng, 4),
            k: rng.next_u32(),
        },
    }
}

/// Build a random but evaluable program spec. Every mechanism appears at
/// least once so one file exercises direct, pointer, register, table, and
/// import call paths.
pub fn random_spec(seed: u64) -> ProgramSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_helpers = 2 + rand_below(&mut rng, 3) as usize;
    let mut helpers = Vec::new();
    for _ in 0..n_helpers {
        let n_ops = 1 + rand_below(&mut rng, 3);
        let ops = (0..n_ops).map(|_| random_op(&mut rng)).collect();
        helpers.push(HelperSpec {
            ops,
            shares_tail: false,
        });
    }
    if n_helpers >= 2 {
        helpers[n_helpers - 2].shares_tail = true;
        helpers[n_helpers - 1].shares_tail = true;
    }
    let table = [
        rand_below(&mut rng, n_helpers as u32) as u8,
        rand_below(&mut rng, n_helpers as u32) as u8,
        rand_below(&mut rng, n_helpers as u32) as u8,
        rand_below(&mut rng, n_helpers as u32) as u8,
    ];

    let mut mechs = vec![
        Mech::Direct,
        Mech::MemPtr,
        Mech::RegFromPtr,
        Mech::TableReg(rand_below(&mut rng, 4) as u8),
        Mech::Import(rand_below(&mut rng, 2) as u8),
    ];
    for _ in 0..rand_below(&mut rng, 3) {
        mechs.push(match rand_below(&mut rng, 4) {
            0 => Mech::Direct,
            1 => Mech::MemPtr,
            2 => Mech::RegFromPtr,
            _ => Mech::TableReg(rand_below(&mut rng, 4) as u8),
        });
    }
    // Fisher-Yates shuffle, so mechanism order varies per file.
    for i in (1..mechs.len()).rev() {
        let j = rand_below(&mut rng, (i + 1) as u32) as usize;
        mechs.swap(i, j);
    }

    let mut steps: Vec<CallStep> = mechs
        .into_iter()
        .map(|mech| CallStep {
            input: rand_below(&mut rng, 6) as u8,
            pre_add: if rng.next_u32() & 1 == 0 {
                Some(rng.next_u32())
            } else {
                None
            },
            helper: rand_below(&mut rng, n_helpers as u32) as u8,
            mech,
        })
        .collect();
    // Every helper is reachable from main: top up with pointer calls to any
    // helper the random steps missed, so the whole code graph executes.
    let mut referenced = [false; 256];
    for s in &steps {
        match s.mech {
            Mech::Direct | Mech::MemPtr | Mech::RegFromPtr => {
                referenced[s.helper as usize] = true
            }
            Mech::TableReg(k) => referenced[table[k as usize] as usize] = true,
            Mech::Import(_) => {}
        }
    }
    for h in 0..n_helpers as u8 {
        if !referenced[h as usize] {
            steps.push(CallStep {
                input: rand_below(&mut rng, 6) as u8,
                pre_add: None,
                helper: h,
                mech: Mech::MemPtr,
            });
        }
    }
    steps.push(CallStep {
        input: rand_below(&mut rng, 6) as u8,
        pre_add: None,
        helper: TINY_HELPER,
        mech: Mech::Direct,
    });

    ProgramSpec {
        helpers,
        table,
        steps,
        reloc_last: rng.next_u32() & 1 == 0,
    }
}

pub fn generate_program(seed: u64, name: &str) -> GeneratedProgram {
    build_program(&random_spec(seed), name, seed)
}

/// Deterministic input vectors for verification runs.
pub fn input_vectors(seed: u64, n: usize) -> Vec<[u32; 6]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1A2B_3C4D_5E6F_7788);
    (0..n)
        .map(|_| {
            let mut v = [0u32; 6];
            for slot in v.iter_mut() {
                *slot = rng.next_u32();
            }
            v
        })
        .collect()
}

/// Run the program's original bytes against its own mirror: parse/emit
/// round-trip, then emulate each input vector and compare the output window
/// word for word.
pub fn validate_program(p: &GeneratedProgram, vectors: &[[u32; 6]]) -> Result<(), String> {
    let image = PeImage::parse(&p.bytes).map_err(|e| format!("{}: parse: {e}", p.name))?;
    let emitted = image.emit().map_err(|e| format!("{}: emit: {e}", p.name))?;
    if emitted != p.bytes {
        return Err(format!("{}: emit(parse(b)) differs from b", p.name));
    }
    for (vi, inputs) in vectors.iter().enumerate() {
        let run = emulator::run_image(&image, CORPUS_LOAD_BASE, inputs, &HarnessOptions::default())
            .map_err(|e| format!("{}: setup: {e}", p.name))?;
        if run.stop != StopReason::ExitReached {
            return Err(format!("{}: vector {vi}: stopped with {}", p.name, run.stop));
        }
        let expect = p.spec.expected_out(inputs);
        for (w, &want) in expect.iter().enumerate() {
            let got = u32::from_le_bytes(run.out[4 * w..4 * w + 4].try_into().unwrap());
            if got != want {
                return Err(format!(
                    "{}: vector {vi}: output {w} is {got:#x}, expected {want:#x}",
                    p.name
                ));
            }
        }
    }
    Ok(())
}

/// Generate `count` validated programs. Every file is checked against its
/// mirror on two input vectors before being admitted.
pub fn generate_corpus(seed: u64, count: usize) -> Result<Vec<GeneratedProgram>, String> {
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let file_seed = seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let p = generate_program(file_seed, &format!("toy{i:02}.sys"));
        validate_program(&p, &input_vectors(file_seed, 2))?;
        out.push(p);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Attack scenarios
// ---------------------------------------------------------------------------

/// A hostile (or deliberately benign) module plus the machine state that
/// triggers it. `bytes` is the *original* module; the runner instruments it
/// first, as the deployment pipeline would.
#[derive(Debug, Clone)]
pub struct AttackScenario {
    pub name: String,
    pub bytes: Vec<u8>,
    pub load_base: u32,
    pub inputs: [u32; 6],
    /// Raw writes staged before the run (attacker-controlled memory).
    pub pokes: Vec<(u32, Vec<u8>)>,
    /// Region whose execution would mean the attack succeeded.
    pub staged_at: u32,
    pub staged_len: u32,
    pub expect_clean: bool,
    /// The denied target the first violation must report (attack runs).
    pub expect_target: u32,
    /// Output word 0 after a clean run (benign twins).
    pub expect_out0: Option<u32>,
}

/// Trampoline payload staged in the firmware scratch area: a predictable,
/// executable address outside every registered module.
pub const STAGED_CODE_VA: u32 = 0x5000;
/// Attacker-controlled pointer cell for the forged-index scenario.
pub const FORGED_CELL_VA: u32 = 0x2000;

fn trampoline_module() -> Vec<u8> {
    // main: push ebp; mov ebp,esp; call eax; mov [OUT],eax; pop ebp; ret
    // helper (never patched, reached by register in the benign twin).
    let mut text = vec![0u8; 0x18];
    text[0x00..0x05].copy_from_slice(&[0x55, 0x8B, 0xEC, 0xFF, 0xD0]);
    text[0x05..0x07].copy_from_slice(&[0x89, 0x05]);
    text[0x07..0x0B].copy_from_slice(&OUT_BASE.to_le_bytes());
    text[0x0B..0x0D].copy_from_slice(&[0x5D, 0xC3]);
    text[0x10..0x16].copy_from_slice(&[0xB8, 0x2A, 0x00, 0x00, 0x00, 0xC3]);
    let mut data = vec![0u8; 4];
    data.copy_from_slice(&(0x0040_0000u32 + TEXT_RVA + 0x10).to_le_bytes());
    let mut b = PeBuilder::new();
    b.entry_point = TEXT_RVA;
    b.sections.push(SectionSpec::new(".text", TEXT_RVA, text, CODE_SECTION));
    b.sections.push(SectionSpec::new(".data", DATA_RVA, data, DATA_SECTION));
    let blob = reloc_blob(&[DATA_RVA]);
    b.reloc_dir = Some((0x3000, blob.len() as u32));
    b.sections.push(SectionSpec::new(".reloc", 0x3000, blob, RDATA_SECTION));
    b.build()
}

/// `call eax` with EAX aimed at code the attacker staged outside any module.
pub fn trampoline_scenario() -> AttackScenario {
    AttackScenario {
        name: "trampoline".into(),
        bytes: trampoline_module(),
        load_base: CORPUS_LOAD_BASE,
        inputs: [STAGED_CODE_VA, 0, 0, 0, 0, 0],
        pokes: vec![(
            STAGED_CODE_VA,
            vec![0xB8, 0x77, 0x66, 0x00, 0x00, 0xC3], // mov eax, 0x6677; ret
        )],
        staged_at: STAGED_CODE_VA,
        staged_len: 6,
        expect_clean: false,
        expect_target: STAGED_CODE_VA,
        expect_out0: None,
    }
}

/// The same module with EAX aimed at its own helper: must run clean.
pub fn trampoline_benign() -> AttackScenario {
    AttackScenario {
        name: "trampoline_benign".into(),
        bytes: trampoline_module(),
        load_base: CORPUS_LOAD_BASE,
        inputs: [CORPUS_LOAD_BASE + TEXT_RVA + 0x10, 0, 0, 0, 0, 0],
        pokes: Vec::new(),
        staged_at: STAGED_CODE_VA,
        staged_len: 6,
        expect_clean: true,
        expect_target: 0,
        expect_out0: Some(42),
    }
}

fn forged_index_module() -> Vec<u8> {
    // main: push ebp; mov ebp,esp; call [ecx*4 + table]; mov [OUT],eax;
    //       pop ebp; ret
    // f0..f3: mov eax, 10+k; ret
    let image_base = 0x0040_0000u32;
    let mut text = vec![0u8; 0x40];
    text[0x00..0x03].copy_from_slice(&[0x55, 0x8B, 0xEC]);
    text[0x03..0x06].copy_from_slice(&[0xFF, 0x14, 0x8D]);
    text[0x06..0x0A].copy_from_slice(&(image_base + DATA_RVA).to_le_bytes());
    text[0x0A..0x0C].copy_from_slice(&[0x89, 0x05]);
    text[0x0C..0x10].copy_from_slice(&OUT_BASE.to_le_bytes());
    text[0x10..0x12].copy_from_slice(&[0x5D, 0xC3]);
    for k in 0u32..4 {
        let off = 0x20 + 8 * k as usize;
        text[off] = 0xB8;
        text[off + 1..off + 5].copy_from_slice(&(10 + k).to_le_bytes());
        text[off + 5] = 0xC3;
    }
    let mut data = vec![0u8; 16];
    for k in 0..4usize {
        data[4 * k..4 * k + 4]
            .copy_from_slice(&(image_base + TEXT_RVA + 0x20 + 8 * k as u32).to_le_bytes());
    }
    let mut b = PeBuilder::new();
    b.entry_point = TEXT_RVA;
    b.sections.push(SectionSpec::new(".text", TEXT_RVA, text, CODE_SECTION));
    b.sections.push(SectionSpec::new(".data", DATA_RVA, data, DATA_SECTION));
    let blob = reloc_blob(&[0x1006, DATA_RVA, DATA_RVA + 4, DATA_RVA + 8, DATA_RVA + 12]);
    b.reloc_dir = Some((0x3000, blob.len() as u32));
    b.sections.push(SectionSpec::new(".reloc", 0x3000, blob, RDATA_SECTION));
    b.build()
}

/// An out-of-range table index walks the indexed call outside its table
/// into an attacker-controlled cell.
pub fn forged_index_scenario() -> AttackScenario {
    let table_va = CORPUS_LOAD_BASE + DATA_RVA;
    let forged = FORGED_CELL_VA.wrapping_sub(table_va) >> 2;
    AttackScenario {
        name: "forged_index".into(),
        bytes: forged_index_module(),
        load_base: CORPUS_LOAD_BASE,
        inputs: [0, 0, forged, 0, 0, 0],
        pokes: vec![(FORGED_CELL_VA, vec![0x61, 0x62, 0x63, 0x60])],
        staged_at: FORGED_CELL_VA,
        staged_len: 4,
        expect_clean: false,
        expect_target: 0x6063_6261,
        expect_out0: None,
    }
}

/// The same module with an in-range index: must run clean.
pub fn forged_index_benign() -> AttackScenario {
    AttackScenario {
        name: "forged_index_benign".into(),
        bytes: forged_index_module(),
        load_base: CORPUS_LOAD_BASE,
        inputs: [0, 0, 2, 0, 0, 0],
        pokes: Vec::new(),
        staged_at: FORGED_CELL_VA,
        staged_len: 4,
        expect_clean: true,
        expect_target: 0,
        expect_out0: Some(12),
    }
}

// ---------------------------------------------------------------------------
// Scenario runner
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct ScenarioOutcome {
    pub stop: StopReason,
    pub steps: u64,
    pub denials: u64,
    pub first_denied: Option<TransferEvent>,
    /// Whether the staged region was ever executed.
    pub staged_executed: bool,
    pub out0: u32,
}

impl ScenarioOutcome {
    /// The first policy violation named exactly the expected target.
    pub fn detected_at_first_bad_transfer(&self, expect_target: u32) -> bool {
        matches!(self.first_denied, Some(ev) if ev.target == expect_target)
    }
}

/// Instrument the scenario's module, load and arm it, stage the attacker's
/// memory, and run under a fresh monitor in the given reaction mode.
pub fn run_scenario(
    sc: &AttackScenario,
    reaction: ReactionMode,
) -> Result<ScenarioOutcome, String> {
    run_scenario_with(
        sc,
        PolicyConfig {
            reaction,
            ..PolicyConfig::default()
        },
    )
}

/// Like [`run_scenario`], but with full control over the monitor policy
/// (strict writability, log destination).
pub fn run_scenario_with(
    sc: &AttackScenario,
    config: PolicyConfig,
) -> Result<ScenarioOutcome, String> {
    let (rewritten, _) = rewriter::rewrite_file(&sc.bytes, None, &RewriteOptions::default())
        .map_err(|e| format!("{}: rewrite: {e}", sc.name))?;
    let image = PeImage::parse(&rewritten).map_err(|e| format!("{}: reparse: {e}", sc.name))?;

    let monitor = Arc::new(Monitor::new());
    monitor
        .configure(config)
        .map_err(|e| format!("{}: configure: {e}", sc.name))?;

    let mut emu = emulator::Emulator::new();
    emu.monitor = Some(Arc::clone(&monitor));
    emu.setup_harness().map_err(|e| format!("{}: {e}", sc.name))?;
    let module = emu
        .load_image(&image, sc.load_base, &sc.name)
        .map_err(|e| format!("{}: {e}", sc.name))?;
    emu.set_trace_module(module.base, module.size);
    if !emu.arm_module(&module).map_err(|e| format!("{}: {e}", sc.name))? {
        return Err(format!("{}: instrumented module carries no gate", sc.name));
    }
    for (addr, bytes) in &sc.pokes {
        emu.mem
            .poke(*addr, bytes)
            .map_err(|f| format!("{}: poke at {:#x} failed", sc.name, f.addr))?;
    }
    let watch = emu.add_watchpoint(sc.staged_at, sc.staged_len);
    emu.prepare_call(module.entry_va, &sc.inputs)
        .map_err(|e| format!("{}: {e}", sc.name))?;
    let stop = emu.run();

    let first_denied = monitor
        .events()
        .iter()
        .find(|ev| ev.verdict.is_denied())
        .copied();
    Ok(ScenarioOutcome {
        stop,
        steps: emu.steps,
        denials: monitor.denied_count() as u64,
        first_denied,
        staged_executed: emu.watch_hit(watch),
        out0: emu.mem.peek_u32(OUT_BASE).unwrap_or(0),
    })
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
