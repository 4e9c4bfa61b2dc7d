//! Deterministic user-space CPU model for exercising images end to end.
//!
//! The emulator executes the same 32-bit subset the decoder understands,
//! over sparse 4 KiB pages with read/write/execute permissions. A small
//! fixed "machine" surrounds loaded images: a stack, an output window that
//! records every store for equivalence checking, synthetic API stubs bound
//! into each image's import table, an exit gate, and a policy filter entry
//! whose address behaves like a system call — executing it consults the
//! [`crate::monitor::Monitor`] and either resumes or halts the run.
//!
//! Instrumented images interoperate with the filter purely through memory:
//! the harness arms the gate/filter cells the rewriter reserved, and the
//! injected check sequences then feed every indirect transfer through the
//! filter before it happens.

use crate::disasm::{self, Instruction, MemRef, Mnemonic, Operand, Reg};
use crate::monitor::{Monitor, PagePerms, Reaction, TransferEvent, TransferKind};
use crate::pe::PeImage;
use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

// ---------------------------------------------------------------------------
// Fixed machine layout
// ---------------------------------------------------------------------------

/// Reaching this address ends the run normally; the harness seeds it as the
/// top-level return address.
pub const EXIT_VA: u32 = 0xFFC0_0000;
/// Executing this address performs a policy check instead of an instruction.
pub const FILTER_ENTRY_VA: u32 = 0xFFD0_0000;
pub const STACK_BASE: u32 = 0xD000_0000;
pub const STACK_PAGES: u32 = 16;
pub const STACK_TOP: u32 = STACK_BASE + STACK_PAGES * PAGE;
/// Writable window whose stores are recorded in order.
pub const OUT_BASE: u32 = 0xD400_0000;
pub const OUT_LEN: u32 = 0x1000;
/// Synthetic import stubs are laid out from here, 16 bytes apiece.
pub const API_STUB_BASE: u32 = 0xE000_0000;
/// Imported symbol `k` returns `API_RESULT_BASE + k` in EAX.
pub const API_RESULT_BASE: u32 = 0xC0DE_0000;
/// Low RWX scratch region analogous to legacy firmware mappings: mapped,
/// executable, and intentionally *not* registered as a module.
pub const BIOS_BASE: u32 = 0x1000;
pub const BIOS_LEN: u32 = 0x1F000;
pub const DEFAULT_STEP_LIMIT: u64 = 10_000_000;

const PAGE: u32 = 0x1000;

// ---------------------------------------------------------------------------
// Memory
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemPerms {
    pub read: bool,
    pub write: bool,
    pub exec: bool,
}

impl MemPerms {
    pub const RW: MemPerms = MemPerms {
        read: true,
        write: true,
        exec: false,
    };
    pub const RX: MemPerms = MemPerms {
        read: true,
        write: false,
        exec: true,
    };
    pub const RWX: MemPerms = MemPerms {
        read: true,
        write: true,
        exec: true,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    Read,
    Write,
    Exec,
}

impl Access {
    pub fn as_str(self) -> &'static str {
        match self {
            Access::Read => "read",
            Access::Write => "write",
            Access::Exec => "exec",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemFault {
    pub addr: u32,
    pub access: Access,
}

struct MemPage {
    bytes: Box<[u8; PAGE as usize]>,
    perms: MemPerms,
}

/// Sparse paged memory. `read`/`write`/`fetch` honor permissions;
/// `peek`/`poke` are harness back doors that only require the page to exist.
#[derive(Default)]
pub struct Memory {
    pages: BTreeMap<u32, MemPage>,
}

impl Memory {
    pub fn new() -> Memory {
        Memory::default()
    }

    /// Map zeroed pages covering `[addr, addr+len)`. Fails if any page in
    /// the range is already mapped.
    pub fn map(&mut self, addr: u32, len: u32, perms: MemPerms) -> Result<(), String> {
        if len == 0 {
            return Ok(());
        }
        let first = addr & !(PAGE - 1);
        let last = ((addr as u64 + len as u64 - 1) as u32) & !(PAGE - 1);
        let mut p = first;
        loop {
            if self.pages.contains_key(&p) {
                return Err(format!("page {p:#010x} is already mapped"));
            }
            if p == last {
                break;
            }
            p += PAGE;
        }
        let mut p = first;
        loop {
            self.pages.insert(
                p,
                MemPage {
                    bytes: Box::new([0u8; PAGE as usize]),
                    perms,
                },
            );
            if p == last {
                break;
            }
            p += PAGE;
        }
        Ok(())
    }

    pub fn is_mapped(&self, addr: u32) -> bool {
        self.pages.contains_key(&(addr & !(PAGE - 1)))
    }

    pub fn perms_at(&self, addr: u32) -> Option<MemPerms> {
        self.pages.get(&(addr & !(PAGE - 1))).map(|p| p.perms)
    }

    fn page_for(&self, addr: u32, access: Access) -> Result<&MemPage, MemFault> {
        let page = self.pages.get(&(addr & !(PAGE - 1))).ok_or(MemFault { addr, access })?;
        let ok = match access {
            Access::Read => page.perms.read,
            Access::Write => page.perms.write,
            Access::Exec => page.perms.exec,
        };
        if ok {
            Ok(page)
        } else {
            Err(MemFault { addr, access })
        }
    }

    pub fn read_u8(&self, addr: u32) -> Result<u8, MemFault> {
        let page = self.page_for(addr, Access::Read)?;
        Ok(page.bytes[(addr & (PAGE - 1)) as usize])
    }

    pub fn read_u32(&self, addr: u32) -> Result<u32, MemFault> {
        let mut v = [0u8; 4];
        for (i, b) in v.iter_mut().enumerate() {
            *b = self.read_u8(addr.wrapping_add(i as u32))?;
        }
        Ok(u32::from_le_bytes(v))
    }

    pub fn write_u8(&mut self, addr: u32, v: u8) -> Result<(), MemFault> {
        self.page_for(addr, Access::Write)?;
        let page = self.pages.get_mut(&(addr & !(PAGE - 1))).unwrap();
        page.bytes[(addr & (PAGE - 1)) as usize] = v;
        Ok(())
    }

    pub fn write_u32(&mut self, addr: u32, v: u32) -> Result<(), MemFault> {
        for (i, b) in v.to_le_bytes().iter().enumerate() {
            self.write_u8(addr.wrapping_add(i as u32), *b)?;
        }
        Ok(())
    }

    /// Up to 16 instruction bytes starting at `addr`, shortened at the first
    /// non-executable byte. Empty means the first byte itself is not
    /// executable.
    pub fn fetch_window(&self, addr: u32) -> Vec<u8> {
        let mut out = Vec::with_capacity(16);
        for i in 0..16u32 {
            let a = addr.wrapping_add(i);
            match self.page_for(a, Access::Exec) {
                Ok(page) => out.push(page.bytes[(a & (PAGE - 1)) as usize]),
                Err(_) => break,
            }
        }
        out
    }

    pub fn poke(&mut self, addr: u32, bytes: &[u8]) -> Result<(), MemFault> {
        for (i, &b) in bytes.iter().enumerate() {
            let a = addr.wrapping_add(i as u32);
            let page = self
                .pages
                .get_mut(&(a & !(PAGE - 1)))
                .ok_or(MemFault { addr: a, access: Access::Write })?;
            page.bytes[(a & (PAGE - 1)) as usize] = b;
        }
        Ok(())
    }

    pub fn peek(&self, addr: u32, len: usize) -> Option<Vec<u8>> {
        let mut out = Vec::with_capacity(len);
        for i in 0..len {
            let a = addr.wrapping_add(i as u32);
            let page = self.pages.get(&(a & !(PAGE - 1)))?;
            out.push(page.bytes[(a & (PAGE - 1)) as usize]);
        }
        Some(out)
    }

    pub fn poke_u32(&mut self, addr: u32, v: u32) -> Result<(), MemFault> {
        self.poke(addr, &v.to_le_bytes())
    }

    pub fn peek_u32(&self, addr: u32) -> Option<u32> {
        self.peek(addr, 4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}

// ---------------------------------------------------------------------------
// CPU
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default)]
pub struct Cpu {
    pub regs: [u32; 8],
    pub eip: u32,
    pub zf: bool,
    pub sf: bool,
    pub cf: bool,
    pub of: bool,
}

impl Cpu {
    pub fn reg(&self, r: Reg) -> u32 {
        self.regs[r.index() as usize]
    }

    pub fn set_reg(&mut self, r: Reg, v: u32) {
        self.regs[r.index() as usize] = v;
    }

    /// Pack the modeled flags into an EFLAGS image (reserved bit 1 set).
    pub fn eflags(&self) -> u32 {
        let mut f = 0x2;
        if self.cf {
            f |= 1 << 0;
        }
        if self.zf {
            f |= 1 << 6;
        }
        if self.sf {
            f |= 1 << 7;
        }
        if self.of {
            f |= 1 << 11;
        }
        f
    }

    pub fn set_eflags(&mut self, v: u32) {
        self.cf = v & (1 << 0) != 0;
        self.zf = v & (1 << 6) != 0;
        self.sf = v & (1 << 7) != 0;
        self.of = v & (1 << 11) != 0;
    }
}

// ---------------------------------------------------------------------------
// Stop reasons
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StopReason {
    /// Control reached the exit gate: a normal, successful run.
    ExitReached,
    /// The monitor denied a transfer and the policy says halt.
    PolicyHalt(TransferEvent),
    StepLimit,
    MemoryFault { addr: u32, access: Access },
    DecodeFault { va: u32 },
    /// An `int3` was executed.
    Breakpoint { va: u32 },
    /// The filter was entered with a malformed argument frame.
    ProtocolFault(String),
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StopReason::ExitReached => write!(f, "exit"),
            StopReason::PolicyHalt(ev) => write!(f, "policy_halt({})", ev.log_line()),
            StopReason::StepLimit => write!(f, "step_limit"),
            StopReason::MemoryFault { addr, access } => {
                write!(f, "memory_fault({} at {addr:#010x})", access.as_str())
            }
            StopReason::DecodeFault { va } => write!(f, "decode_fault({va:#010x})"),
            StopReason::Breakpoint { va } => write!(f, "breakpoint({va:#010x})"),
            StopReason::ProtocolFault(m) => write!(f, "protocol_fault({m})"),
        }
    }
}

impl StopReason {
    pub fn is_clean_exit(&self) -> bool {
        matches!(self, StopReason::ExitReached)
    }
}

/// One recorded store into the output window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutWrite {
    pub step: u64,
    pub addr: u32,
    pub size: u8,
    pub value: u32,
}

// ---------------------------------------------------------------------------
// Emulator
// ---------------------------------------------------------------------------

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub struct Emulator {
    pub cpu: Cpu,
    pub mem: Memory,
    pub monitor: Option<Arc<Monitor>>,
    pub step_limit: u64,
    pub steps: u64,
    exit_va: u32,
    filter_entry: u32,
    /// Module window for the trace hash: only addresses inside it are
    /// hashed, relative to its base, so the hash survives rebasing.
    trace_module: Option<(u32, u32)>,
    trace_hash: u64,
    collect_trace_lines: bool,
    trace_lines: Vec<String>,
    out_region: Option<(u32, u32)>,
    out_writes: Vec<OutWrite>,
    watchpoints: Vec<(u32, u32)>,
    watch_hits: Vec<bool>,
    stub_count: u32,
}

impl Default for Emulator {
    fn default() -> Self {
        Emulator::new()
    }
}

impl Emulator {
    pub fn new() -> Emulator {
        Emulator {
            cpu: Cpu::default(),
            mem: Memory::new(),
            monitor: None,
            step_limit: DEFAULT_STEP_LIMIT,
            steps: 0,
            exit_va: 0,
            filter_entry: 0,
            trace_module: None,
            trace_hash: FNV_OFFSET,
            collect_trace_lines: false,
            trace_lines: Vec::new(),
            out_region: None,
            out_writes: Vec::new(),
            watchpoints: Vec::new(),
            watch_hits: Vec::new(),
            stub_count: 0,
        }
    }

    pub fn set_exit_va(&mut self, va: u32) {
        self.exit_va = va;
    }

    pub fn set_filter_entry(&mut self, va: u32) {
        self.filter_entry = va;
    }

    pub fn set_trace_module(&mut self, base: u32, size: u32) {
        self.trace_module = Some((base, size));
    }

    pub fn enable_trace_lines(&mut self) {
        self.collect_trace_lines = true;
    }

    pub fn set_out_region(&mut self, base: u32, len: u32) {
        self.out_region = Some((base, len));
    }

    /// Flag executions landing in `[lo, lo+len)`; returns the watch index.
    pub fn add_watchpoint(&mut self, lo: u32, len: u32) -> usize {
        self.watchpoints.push((lo, len));
        self.watch_hits.push(false);
        self.watch_hits.len() - 1
    }

    pub fn watch_hit(&self, idx: usize) -> bool {
        self.watch_hits[idx]
    }

    pub fn trace_hash(&self) -> u64 {
        self.trace_hash
    }

    pub fn trace_lines(&self) -> &[String] {
        &self.trace_lines
    }

    pub fn out_writes(&self) -> &[OutWrite] {
        &self.out_writes
    }

    // ---------- stepping ----------

    pub fn run(&mut self) -> StopReason {
        loop {
            if let Some(stop) = self.step() {
                return stop;
            }
        }
    }

    pub fn step(&mut self) -> Option<StopReason> {
        if self.steps >= self.step_limit {
            return Some(StopReason::StepLimit);
        }
        let eip = self.cpu.eip;
        if self.exit_va != 0 && eip == self.exit_va {
            return Some(StopReason::ExitReached);
        }
        for (i, &(lo, len)) in self.watchpoints.iter().enumerate() {
            if eip >= lo && eip.wrapping_sub(lo) < len {
                self.watch_hits[i] = true;
            }
        }
        if self.filter_entry != 0 && eip == self.filter_entry {
            return self.filter_call();
        }
        let window = self.mem.fetch_window(eip);
        if window.is_empty() {
            return Some(StopReason::MemoryFault {
                addr: eip,
                access: Access::Exec,
            });
        }
        let instr = match disasm::decode(&window, eip) {
            Ok(i) => i,
            Err(_) => return Some(StopReason::DecodeFault { va: eip }),
        };
        self.steps += 1;
        if let Some((base, size)) = self.trace_module {
            if eip >= base && eip.wrapping_sub(base) < size {
                for b in (eip - base).to_le_bytes() {
                    self.trace_hash ^= b as u64;
                    self.trace_hash = self.trace_hash.wrapping_mul(FNV_PRIME);
                }
            }
        }
        if self.collect_trace_lines {
            let bytes: String = window[..instr.length as usize]
                .iter()
                .map(|b| format!("{b:02x}"))
                .collect();
            self.trace_lines
                .push(format!("{} {:#010x} {} {}", self.steps, eip, bytes, instr));
        }
        self.execute(&instr)
    }

    /// The filter pseudo-call: pop `[ret, kind, target]`, consult the
    /// monitor, and either halt or return to the check sequence with the
    /// arguments consumed. With no monitor attached everything passes.
    fn filter_call(&mut self) -> Option<StopReason> {
        let esp = self.cpu.reg(Reg::Esp);
        let ret = match self.mem.read_u32(esp) {
            Ok(v) => v,
            Err(f) => return Some(StopReason::MemoryFault { addr: f.addr, access: f.access }),
        };
        let kind_code = match self.mem.read_u32(esp.wrapping_add(4)) {
            Ok(v) => v,
            Err(f) => return Some(StopReason::MemoryFault { addr: f.addr, access: f.access }),
        };
        let target = match self.mem.read_u32(esp.wrapping_add(8)) {
            Ok(v) => v,
            Err(f) => return Some(StopReason::MemoryFault { addr: f.addr, access: f.access }),
        };
        let Some(kind) = TransferKind::from_code(kind_code) else {
            return Some(StopReason::ProtocolFault(format!(
                "bad transfer kind code {kind_code}"
            )));
        };
        self.steps += 1;
        if let Some(monitor) = self.monitor.clone() {
            let event = monitor.check_transfer(kind, ret, target);
            if monitor.react(&event) == Reaction::Halt {
                return Some(StopReason::PolicyHalt(event));
            }
        }
        self.cpu.set_reg(Reg::Esp, esp.wrapping_add(12));
        self.cpu.eip = ret;
        None
    }

    // ---------- operand plumbing ----------

    fn ea(&self, m: &MemRef) -> u32 {
        let mut a = m.disp as u32;
        if let Some(base) = m.base {
            a = a.wrapping_add(self.cpu.reg(base));
        }
        if let Some((idx, scale)) = m.index {
            a = a.wrapping_add(self.cpu.reg(idx).wrapping_mul(scale as u32));
        }
        a
    }

    fn load(&self, op: &Operand) -> Result<u32, MemFault> {
        match op {
            Operand::Reg(r) => Ok(self.cpu.reg(*r)),
            Operand::Imm8(v) => Ok(*v as i32 as u32),
            Operand::Imm16(v) => Ok(*v as u32),
            Operand::Imm32(v) => Ok(*v),
            Operand::Mem(m) => self.mem.read_u32(self.ea(m)),
            Operand::Rel8(_) | Operand::Rel32(_) => {
                unreachable!("relative operands are resolved by the transfer logic")
            }
        }
    }

    fn store(&mut self, op: &Operand, v: u32) -> Result<(), MemFault> {
        match op {
            Operand::Reg(r) => {
                self.cpu.set_reg(*r, v);
                Ok(())
            }
            Operand::Mem(m) => self.write_mem_u32(self.ea(m), v),
            _ => unreachable!("store target must be a register or memory"),
        }
    }

    fn write_mem_u32(&mut self, addr: u32, v: u32) -> Result<(), MemFault> {
        self.mem.write_u32(addr, v)?;
        if let Some((lo, len)) = self.out_region {
            if addr >= lo && addr.wrapping_sub(lo) < len {
                self.out_writes.push(OutWrite {
                    step: self.steps,
                    addr,
                    size: 4,
                    value: v,
                });
            }
        }
        Ok(())
    }

    fn push(&mut self, v: u32) -> Result<(), MemFault> {
        let esp = self.cpu.reg(Reg::Esp).wrapping_sub(4);
        self.write_mem_u32(esp, v)?;
        self.cpu.set_reg(Reg::Esp, esp);
        Ok(())
    }

    fn pop(&mut self) -> Result<u32, MemFault> {
        let esp = self.cpu.reg(Reg::Esp);
        let v = self.mem.read_u32(esp)?;
        self.cpu.set_reg(Reg::Esp, esp.wrapping_add(4));
        Ok(v)
    }

    // ---------- flags ----------

    fn set_zs(&mut self, r: u32) {
        self.cpu.zf = r == 0;
        self.cpu.sf = (r as i32) < 0;
    }

    fn alu_add(&mut self, a: u32, b: u32) -> u32 {
        let r = a.wrapping_add(b);
        self.cpu.cf = (a as u64 + b as u64) > u32::MAX as u64;
        self.cpu.of = ((a ^ r) & (b ^ r) & 0x8000_0000) != 0;
        self.set_zs(r);
        r
    }

    fn alu_sub(&mut self, a: u32, b: u32) -> u32 {
        let r = a.wrapping_sub(b);
        self.cpu.cf = a < b;
        self.cpu.of = ((a ^ b) & (a ^ r) & 0x8000_0000) != 0;
        self.set_zs(r);
        r
    }

    fn alu_logic(&mut self, r: u32) -> u32 {
        self.cpu.cf = false;
        self.cpu.of = false;
        self.set_zs(r);
        r
    }

    fn cond_taken(&self, cond: disasm::Cond) -> bool {
        use disasm::Cond::*;
        let c = &self.cpu;
        match cond {
            O => c.of,
            No => !c.of,
            B => c.cf,
            Ae => !c.cf,
            E => c.zf,
            Ne => !c.zf,
            Be => c.cf || c.zf,
            A => !c.cf && !c.zf,
            S => c.sf,
            Ns => !c.sf,
            // Parity is not modeled: treat it as always clear.
            P => false,
            Np => true,
            L => c.sf != c.of,
            Ge => c.sf == c.of,
            Le => c.zf || c.sf != c.of,
            G => !c.zf && c.sf == c.of,
        }
    }

    // ---------- execution ----------

    fn execute(&mut self, instr: &Instruction) -> Option<StopReason> {
        let next = instr.end_rva();
        let fault = |f: MemFault| StopReason::MemoryFault { addr: f.addr, access: f.access };
        macro_rules! try_mem {
            ($e:expr) => {
                match $e {
                    Ok(v) => v,
                    Err(f) => return Some(fault(f)),
                }
            };
        }

        let ops = &instr.operands;
        match instr.mnemonic {
            Mnemonic::Nop => {}
            Mnemonic::Int3 => {
                return Some(StopReason::Breakpoint { va: instr.rva });
            }
            Mnemonic::Mov => {
                let v = try_mem!(self.load(&ops[1]));
                try_mem!(self.store(&ops[0], v));
            }
            Mnemonic::Lea => {
                let Operand::Mem(ref m) = ops[1] else {
                    unreachable!("lea source is memory");
                };
                let a = self.ea(m);
                try_mem!(self.store(&ops[0], a));
            }
            Mnemonic::Add | Mnemonic::Or | Mnemonic::And | Mnemonic::Sub | Mnemonic::Xor => {
                let a = try_mem!(self.load(&ops[0]));
                let b = try_mem!(self.load(&ops[1]));
                let r = match instr.mnemonic {
                    Mnemonic::Add => self.alu_add(a, b),
                    Mnemonic::Sub => self.alu_sub(a, b),
                    Mnemonic::Or => self.alu_logic(a | b),
                    Mnemonic::And => self.alu_logic(a & b),
                    Mnemonic::Xor => self.alu_logic(a ^ b),
                    _ => unreachable!(),
                };
                try_mem!(self.store(&ops[0], r));
            }
            Mnemonic::Cmp => {
                let a = try_mem!(self.load(&ops[0]));
                let b = try_mem!(self.load(&ops[1]));
                self.alu_sub(a, b);
            }
            Mnemonic::Test => {
                let a = try_mem!(self.load(&ops[0]));
                let b = try_mem!(self.load(&ops[1]));
                self.alu_logic(a & b);
            }
            Mnemonic::Inc => {
                let a = try_mem!(self.load(&ops[0]));
                let r = a.wrapping_add(1);
                self.cpu.of = a == 0x7FFF_FFFF;
                self.set_zs(r);
                try_mem!(self.store(&ops[0], r));
            }
            Mnemonic::Dec => {
                let a = try_mem!(self.load(&ops[0]));
                let r = a.wrapping_sub(1);
                self.cpu.of = a == 0x8000_0000;
                self.set_zs(r);
                try_mem!(self.store(&ops[0], r));
            }
            Mnemonic::Push => {
                let v = try_mem!(self.load(&ops[0]));
                try_mem!(self.push(v));
            }
            Mnemonic::Pop => {
                let v = try_mem!(self.pop());
                try_mem!(self.store(&ops[0], v));
            }
            Mnemonic::Pushfd => {
                let f = self.cpu.eflags();
                try_mem!(self.push(f));
            }
            Mnemonic::Popfd => {
                let v = try_mem!(self.pop());
                self.cpu.set_eflags(v);
            }
            Mnemonic::Call => {
                let target = match &ops[0] {
                    Operand::Rel32(_) | Operand::Rel8(_) => {
                        instr.rel_target().expect("relative call target")
                    }
                    other => try_mem!(self.load(other)),
                };
                try_mem!(self.push(next));
                self.cpu.eip = target;
                return None;
            }
            Mnemonic::Jmp => {
                let target = match &ops[0] {
                    Operand::Rel32(_) | Operand::Rel8(_) => {
                        instr.rel_target().expect("relative jmp target")
                    }
                    other => try_mem!(self.load(other)),
                };
                self.cpu.eip = target;
                return None;
            }
            Mnemonic::Jcc => {
                let cond = instr.cond.expect("jcc carries a condition");
                if self.cond_taken(cond) {
                    self.cpu.eip = instr.rel_target().expect("jcc target");
                    return None;
                }
            }
            Mnemonic::Ret => {
                let addr = try_mem!(self.pop());
                if let Some(Operand::Imm16(n)) = ops.first() {
                    let esp = self.cpu.reg(Reg::Esp).wrapping_add(*n as u32);
                    self.cpu.set_reg(Reg::Esp, esp);
                }
                self.cpu.eip = addr;
                return None;
            }
        }
        self.cpu.eip = next;
        None
    }
}

// ---------------------------------------------------------------------------
// Loader
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SetupError(pub String);

impl fmt::Display for SetupError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "setup failed: {}", self.0)
    }
}

impl std::error::Error for SetupError {}

#[derive(Debug, Clone)]
pub struct LoadedModule {
    pub name: String,
    pub base: u32,
    pub size: u32,
    pub entry_va: u32,
    /// Gate/filter cell VAs if the image carries instrumentation.
    pub gate_va: Option<u32>,
    pub filter_slot_va: Option<u32>,
}

fn section_perms(readable: bool, writable: bool, executable: bool) -> MemPerms {
    MemPerms {
        read: readable,
        write: writable,
        exec: executable,
    }
}

impl Emulator {
    /// Map an image at `base`, apply relocations, bind its imports to
    /// synthetic stubs, and (if a monitor is attached) register it as a
    /// module with its page permissions.
    pub fn load_image(
        &mut self,
        image: &PeImage,
        base: u32,
        name: &str,
    ) -> Result<LoadedModule, SetupError> {
        let align = image.section_alignment();
        let mut total_span = 0u32;
        for s in image.sections() {
            let span = crate::pe::align_up(s.virtual_span().max(1), align);
            let va = base
                .checked_add(s.rva)
                .ok_or_else(|| SetupError(format!("{name}: section VA overflows")))?;
            let perms = section_perms(s.readable(), s.writable(), s.executable());
            self.mem
                .map(va, span, perms)
                .map_err(|e| SetupError(format!("{name}: {e}")))?;
            self.mem
                .poke(va, &s.raw_data)
                .map_err(|f| SetupError(format!("{name}: cannot seed section at {:#x}", f.addr)))?;
            total_span = total_span.max(s.rva + span);
            if let Some(m) = &self.monitor {
                m.set_pages(
                    va,
                    span,
                    PagePerms {
                        executable: s.executable(),
                        writable: s.writable(),
                    },
                );
            }
        }

        // Rebase: every relocated 32-bit cell shifts by the load delta.
        let delta = base.wrapping_sub(image.image_base());
        if delta != 0 {
            for r in image.relocations() {
                let va = base + r.rva;
                let v = self
                    .mem
                    .peek_u32(va)
                    .ok_or_else(|| SetupError(format!("{name}: relocation at unmapped {va:#x}")))?;
                self.mem
                    .poke_u32(va, v.wrapping_add(delta))
                    .map_err(|_| SetupError(format!("{name}: relocation write at {va:#x}")))?;
            }
        }

        self.bind_imports(image, base, name)?;

        let (gate_va, filter_slot_va) = match image.find_monitor_slots() {
            Some(slots) => (Some(base + slots.gate_rva), Some(base + slots.filter_rva)),
            None => (None, None),
        };

        if let Some(m) = &self.monitor {
            m.register_module(crate::monitor::ModuleInfo {
                name: name.to_string(),
                base,
                size: total_span,
            })
            .map_err(|e| SetupError(format!("{name}: {e}")))?;
        }

        Ok(LoadedModule {
            name: name.to_string(),
            base,
            size: total_span,
            entry_va: base + image.entry_point(),
            gate_va,
            filter_slot_va,
        })
    }

    /// Point every IAT slot at a 16-byte synthetic stub that returns a
    /// distinctive value. Stubs are shared across modules by symbol.
    fn bind_imports(&mut self, image: &PeImage, base: u32, name: &str) -> Result<(), SetupError> {
        if image.imports().is_empty() {
            return Ok(());
        }
        for imp in image.imports() {
            let idx = self.stub_count;
            let stub_va = API_STUB_BASE + idx * 16;
            if stub_va & (PAGE - 1) == 0 {
                self.mem
                    .map(stub_va, PAGE, MemPerms::RX)
                    .map_err(|e| SetupError(format!("stub page: {e}")))?;
                if let Some(m) = &self.monitor {
                    m.set_pages(
                        stub_va,
                        PAGE,
                        PagePerms {
                            executable: true,
                            writable: false,
                        },
                    );
                }
            }
            // mov eax, API_RESULT_BASE+idx ; ret
            let mut code = vec![0xB8u8];
            code.extend_from_slice(&(API_RESULT_BASE + idx).to_le_bytes());
            code.push(0xC3);
            self.mem
                .poke(stub_va, &code)
                .map_err(|_| SetupError(format!("{name}: stub write")))?;
            let slot_va = base + imp.iat_slot_rva;
            self.mem
                .poke_u32(slot_va, stub_va)
                .map_err(|_| SetupError(format!("{name}: IAT slot at {slot_va:#x}")))?;
            self.stub_count += 1;
        }
        if let Some(m) = &self.monitor {
            // One registration covering all stub pages mapped so far.
            let span = crate::pe::align_up(self.stub_count * 16, PAGE).max(PAGE);
            let _ = m.unregister_module(API_STUB_BASE);
            m.register_module(crate::monitor::ModuleInfo {
                name: "api_stubs".to_string(),
                base: API_STUB_BASE,
                size: span,
            })
            .map_err(|e| SetupError(format!("api stubs: {e}")))?;
        }
        Ok(())
    }

    /// Map the fixed machine: stack, output window, exit gate, filter page,
    /// and the low RWX scratch region.
    pub fn setup_harness(&mut self) -> Result<(), SetupError> {
        self.mem
            .map(STACK_BASE, STACK_PAGES * PAGE, MemPerms::RW)
            .map_err(SetupError)?;
        self.mem.map(OUT_BASE, OUT_LEN, MemPerms::RW).map_err(SetupError)?;
        self.mem.map(EXIT_VA, PAGE, MemPerms::RX).map_err(SetupError)?;
        self.mem.map(FILTER_ENTRY_VA, PAGE, MemPerms::RX).map_err(SetupError)?;
        self.mem.map(BIOS_BASE, BIOS_LEN, MemPerms::RWX).map_err(SetupError)?;
        self.set_exit_va(EXIT_VA);
        self.set_filter_entry(FILTER_ENTRY_VA);
        self.set_out_region(OUT_BASE, OUT_LEN);
        if let Some(m) = &self.monitor {
            for (va, module_name) in [(EXIT_VA, "exit_gate"), (FILTER_ENTRY_VA, "policy_filter")] {
                m.set_pages(
                    va,
                    PAGE,
                    PagePerms {
                        executable: true,
                        writable: false,
                    },
                );
                m.register_module(crate::monitor::ModuleInfo {
                    name: module_name.to_string(),
                    base: va,
                    size: PAGE,
                })
                .map_err(|e| SetupError(format!("{module_name}: {e}")))?;
            }
            m.set_pages(
                BIOS_BASE,
                BIOS_LEN,
                PagePerms {
                    executable: true,
                    writable: true,
                },
            );
            // The scratch region is deliberately not registered: landing
            // there is exactly what the policy should catch.
        }
        Ok(())
    }

    /// Arm a loaded module's instrumentation: nonzero gate, filter slot
    /// pointing at the filter entry.
    pub fn arm_module(&mut self, module: &LoadedModule) -> Result<bool, SetupError> {
        match (module.gate_va, module.filter_slot_va) {
            (Some(gate), Some(slot)) => {
                self.mem
                    .poke_u32(gate, 1)
                    .map_err(|_| SetupError(format!("{}: gate poke", module.name)))?;
                self.mem
                    .poke_u32(slot, FILTER_ENTRY_VA)
                    .map_err(|_| SetupError(format!("{}: filter slot poke", module.name)))?;
                Ok(true)
            }
            _ => Ok(false),
        }
    }

    /// Standard register state: six inputs in EAX,EBX,ECX,EDX,ESI,EDI, a
    /// stack whose top holds the exit address, and EIP at `entry_va`.
    pub fn prepare_call(&mut self, entry_va: u32, inputs: &[u32; 6]) -> Result<(), SetupError> {
        let [eax, ebx, ecx, edx, esi, edi] = *inputs;
        self.cpu.set_reg(Reg::Eax, eax);
        self.cpu.set_reg(Reg::Ebx, ebx);
        self.cpu.set_reg(Reg::Ecx, ecx);
        self.cpu.set_reg(Reg::Edx, edx);
        self.cpu.set_reg(Reg::Esi, esi);
        self.cpu.set_reg(Reg::Edi, edi);
        self.cpu.set_reg(Reg::Ebp, 0);
        let esp = STACK_TOP - 4;
        self.cpu.set_reg(Reg::Esp, esp);
        self.mem
            .poke_u32(esp, EXIT_VA)
            .map_err(|_| SetupError("stack seed".to_string()))?;
        self.cpu.eip = entry_va;
        Ok(())
    }

    pub fn out_snapshot(&self) -> Vec<u8> {
        self.mem.peek(OUT_BASE, OUT_LEN as usize).unwrap_or_default()
    }
}

// ---------------------------------------------------------------------------
// One-shot harness
// ---------------------------------------------------------------------------

#[derive(Clone)]
pub struct HarnessOptions {
    pub monitor: Option<Arc<Monitor>>,
    /// Arm gate/filter cells when the image carries them.
    pub arm: bool,
    pub step_limit: u64,
    pub trace_lines: bool,
}

impl Default for HarnessOptions {
    fn default() -> Self {
        HarnessOptions {
            monitor: None,
            arm: true,
            step_limit: DEFAULT_STEP_LIMIT,
            trace_lines: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub stop: StopReason,
    pub steps: u64,
    /// Final general-purpose registers, EAX..EDI in encoding order.
    pub regs: [u32; 8],
    /// Final arithmetic flags in EFLAGS layout.
    pub eflags: u32,
    pub out: Vec<u8>,
    pub out_writes: Vec<OutWrite>,
    pub trace_hash: u64,
    pub trace_lines: Vec<String>,
}

/// Load a single image into a fresh machine, run it from its entry point,
/// and capture the output window.
pub fn run_image(
    image: &PeImage,
    base: u32,
    inputs: &[u32; 6],
    opts: &HarnessOptions,
) -> Result<RunOutcome, SetupError> {
    let mut emu = Emulator::new();
    emu.monitor = opts.monitor.clone();
    emu.step_limit = opts.step_limit;
    if opts.trace_lines {
        emu.enable_trace_lines();
    }
    emu.setup_harness()?;
    let module = emu.load_image(image, base, "main_module")?;
    emu.set_trace_module(module.base, module.size);
    if opts.arm {
        emu.arm_module(&module)?;
    }
    emu.prepare_call(module.entry_va, inputs)?;
    let stop = emu.run();
    Ok(RunOutcome {
        stop,
        steps: emu.steps,
        regs: emu.cpu.regs,
        eflags: emu.cpu.eflags(),
        out: emu.out_snapshot(),
        out_writes: emu.out_writes.clone(),
        trace_hash: emu.trace_hash(),
        trace_lines: emu.trace_lines.clone(),
    })
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
