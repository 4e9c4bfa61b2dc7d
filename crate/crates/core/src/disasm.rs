//! x86-32 instruction subset: decoder, encoder, and branch helpers.
//!
//! The compiler-generated kernel modules this toolkit targets use a small,
//! regular slice of the IA-32 encoding space; everything outside it is
//! treated as data and refused with [`DecodeError::InvalidOpcode`]. The
//! decoder and encoder are exact inverses over that subset: decoding a byte
//! string and re-encoding it reproduces the original bytes, including
//! redundant ModRM/SIB spellings and displacement widths, which is what lets
//! the rewriter copy untouched instructions verbatim.
//!
//! Every decoded instruction also carries `reloc_sites`: the offsets of its
//! 32-bit immediate and displacement fields. Those are the only places a
//! base relocation may legally point into an instruction, and the analyzer
//! and rewriter both lean on that.

use std::fmt;

// ---------------------------------------------------------------------------
// Registers and conditions
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Reg {
    Eax = 0,
    Ecx = 1,
    Edx = 2,
    Ebx = 3,
    Esp = 4,
    Ebp = 5,
    Esi = 6,
    Edi = 7,
}

impl Reg {
    pub fn from_index(i: u8) -> Reg {
        match i & 7 {
            0 => Reg::Eax,
            1 => Reg::Ecx,
            2 => Reg::Edx,
            3 => Reg::Ebx,
            4 => Reg::Esp,
            5 => Reg::Ebp,
            6 => Reg::Esi,
            _ => Reg::Edi,
        }
    }

    pub fn index(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        ["eax", "ecx", "edx", "ebx", "esp", "ebp", "esi", "edi"][self as usize]
    }
}

/// Branch conditions in hardware encoding order (`Jcc` opcode low nibble).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cond {
    O = 0,
    No = 1,
    B = 2,
    Ae = 3,
    E = 4,
    Ne = 5,
    Be = 6,
    A = 7,
    S = 8,
    Ns = 9,
    P = 10,
    Np = 11,
    L = 12,
    Ge = 13,
    Le = 14,
    G = 15,
}

impl Cond {
    pub fn from_nibble(n: u8) -> Cond {
        use Cond::*;
        [O, No, B, Ae, E, Ne, Be, A, S, Ns, P, Np, L, Ge, Le, G][(n & 0xF) as usize]
    }

    pub fn nibble(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        [
            "jo", "jno", "jb", "jae", "je", "jne", "jbe", "ja", "js", "jns", "jp", "jnp", "jl",
            "jge", "jle", "jg",
        ][self as usize]
    }
}

// ---------------------------------------------------------------------------
// Operands
// ---------------------------------------------------------------------------

/// How a memory operand's displacement was (or should be) encoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DispEnc {
    None,
    Disp8,
    Disp32,
}

/// A ModRM/SIB memory reference: `[base + index*scale + disp]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MemRef {
    pub base: Option<Reg>,
    /// Index register and scale (1, 2, 4 or 8). ESP cannot be an index.
    pub index: Option<(Reg, u8)>,
    pub disp: i32,
    pub disp_enc: DispEnc,
    /// A SIB byte was used even though the plain form would do; kept so
    /// re-encoding is byte-identical.
    pub force_sib: bool,
}

impl MemRef {
    fn canonical_disp(base: Option<Reg>, disp: i32) -> DispEnc {
        if disp == 0 && base != Some(Reg::Ebp) {
            DispEnc::None
        } else if (-128..=127).contains(&disp) {
            DispEnc::Disp8
        } else {
            DispEnc::Disp32
        }
    }

    /// Absolute `[disp32]`.
    pub fn abs(addr: u32) -> MemRef {
        MemRef {
            base: None,
            index: None,
            disp: addr as i32,
            disp_enc: DispEnc::Disp32,
            force_sib: false,
        }
    }

    /// `[base + disp]` with the smallest displacement encoding.
    pub fn base_disp(base: Reg, disp: i32) -> MemRef {
        MemRef {
            base: Some(base),
            index: None,
            disp,
            disp_enc: Self::canonical_disp(Some(base), disp),
            force_sib: false,
        }
    }

    /// `[base + index*scale + disp]`.
    pub fn base_index(base: Reg, index: Reg, scale: u8, disp: i32) -> MemRef {
        MemRef {
            base: Some(base),
            index: Some((index, scale)),
            disp,
            disp_enc: Self::canonical_disp(Some(base), disp),
            force_sib: false,
        }
    }

    /// `[index*scale + disp32]` with no base, as used for jump tables.
    pub fn index_disp(index: Reg, scale: u8, disp: u32) -> MemRef {
        MemRef {
            base: None,
            index: Some((index, scale)),
            disp: disp as i32,
            disp_enc: DispEnc::Disp32,
            force_sib: false,
        }
    }

    /// Plain absolute reference (no base, no index)?
    pub fn is_absolute_direct(&self) -> bool {
        self.base.is_none() && self.index.is_none()
    }

    /// The same reference with a different displacement, re-deriving the
    /// narrowest encoding for the new value (baseless forms always carry a
    /// 32-bit displacement).
    pub fn with_disp(&self, disp: i32) -> MemRef {
        let disp_enc = if self.base.is_none() {
            DispEnc::Disp32
        } else {
            Self::canonical_disp(self.base, disp)
        };
        MemRef {
            disp,
            disp_enc,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Operand {
    Reg(Reg),
    Mem(MemRef),
    Imm8(i8),
    Imm16(u16),
    Imm32(u32),
    Rel8(i8),
    Rel32(i32),
}

// ---------------------------------------------------------------------------
// Instructions
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mnemonic {
    Mov,
    Lea,
    Push,
    Pop,
    Add,
    Or,
    And,
    Sub,
    Xor,
    Cmp,
    Test,
    Inc,
    Dec,
    Nop,
    Int3,
    Pushfd,
    Popfd,
    Call,
    Jmp,
    Jcc,
    Ret,
}

/// Control-transfer class, the property the rewriter keys on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum XferClass {
    None,
    CallRel,
    CallInd,
    JmpRel,
    JmpInd,
    Jcc,
    Ret,
}

/// Which of several equivalent encodings an instruction uses. `Compact` is
/// the short form (`push reg`, `mov reg, imm32`, accumulator-immediate);
/// `ModrmMr` and `ModrmRm` distinguish the two-opcode ALU/MOV pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EncPref {
    Compact,
    ModrmMr,
    ModrmRm,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instruction {
    pub rva: u32,
    pub length: u8,
    pub mnemonic: Mnemonic,
    pub cond: Option<Cond>,
    pub operands: Vec<Operand>,
    pub xfer: XferClass,
    pub enc: EncPref,
    /// Offsets (from the instruction start) of 32-bit immediate or
    /// displacement fields — the only bytes a base relocation may touch.
    pub reloc_sites: Vec<u8>,
}

impl Instruction {
    pub fn end_rva(&self) -> u32 {
        self.rva.wrapping_add(self.length as u32)
    }

    pub fn is_transfer(&self) -> bool {
        self.xfer != XferClass::None
    }

    /// Target of a PC-relative branch or call, if this is one.
    pub fn rel_target(&self) -> Option<u32> {
        for op in &self.operands {
            match op {
                Operand::Rel8(d) => return Some(self.end_rva().wrapping_add(*d as i32 as u32)),
                Operand::Rel32(d) => return Some(self.end_rva().wrapping_add(*d as u32)),
                _ => {}
            }
        }
        None
    }

    /// RVAs of this instruction's 32-bit immediate/displacement fields.
    pub fn reloc_site_rvas(&self) -> impl Iterator<Item = u32> + '_ {
        self.reloc_sites.iter().map(move |&o| self.rva + o as u32)
    }
}

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DecodeError {
    /// First byte (or opcode extension) is outside the supported subset.
    InvalidOpcode { rva: u32, byte: u8 },
    /// The byte window ended mid-instruction.
    Truncated { rva: u32 },
}

impl fmt::Display for DecodeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodeError::InvalidOpcode { rva, byte } => {
                write!(f, "invalid opcode {byte:#04x} at {rva:#010x}")
            }
            DecodeError::Truncated { rva } => write!(f, "truncated instruction at {rva:#010x}"),
        }
    }
}

impl std::error::Error for DecodeError {}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodeError(pub String);

impl fmt::Display for EncodeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unencodable instruction: {}", self.0)
    }
}

impl std::error::Error for EncodeError {}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

enum RmOp {
    Reg(Reg),
    Mem(MemRef),
}

impl RmOp {
    fn into_operand(self) -> Operand {
        match self {
            RmOp::Reg(r) => Operand::Reg(r),
            RmOp::Mem(m) => Operand::Mem(m),
        }
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    rva: u32,
    sites: Vec<u8>,
}

impl<'a> Cursor<'a> {
    fn u8(&mut self) -> Result<u8, DecodeError> {
        let b = *self
            .buf
            .get(self.pos)
            .ok_or(DecodeError::Truncated { rva: self.rva })?;
        self.pos += 1;
        Ok(b)
    }

    fn u16(&mut self) -> Result<u16, DecodeError> {
        let lo = self.u8()? as u16;
        let hi = self.u8()? as u16;
        Ok(lo | hi << 8)
    }

    fn u32_plain(&mut self) -> Result<u32, DecodeError> {
        let mut v = 0u32;
        for i in 0..4 {
            v |= (self.u8()? as u32) << (8 * i);
        }
        Ok(v)
    }

    /// A 32-bit field that may carry a base relocation (imm32 or disp32).
    fn u32_site(&mut self) -> Result<u32, DecodeError> {
        self.sites.push(self.pos as u8);
        self.u32_plain()
    }

    fn modrm(&mut self) -> Result<(u8, RmOp), DecodeError> {
        let m = self.u8()?;
        let md = m >> 6;
        let reg = (m >> 3) & 7;
        let rm = m & 7;
        if md == 3 {
            return Ok((reg, RmOp::Reg(Reg::from_index(rm))));
        }
        let base;
        let mut index = None;
        let mut force_sib = false;
        if rm == 4 {
            let sib = self.u8()?;
            let ss = sib >> 6;
            let idx = (sib >> 3) & 7;
            let sib_base = sib & 7;
            if idx != 4 {
                index = Some((Reg::from_index(idx), 1u8 << ss));
            } else if ss != 0 {
                // Scale bits without an index register: legal but meaningless,
                // never compiler-emitted, and not re-encodable byte-for-byte.
                return Err(DecodeError::InvalidOpcode {
                    rva: self.rva,
                    byte: sib,
                });
            }
            if sib_base == 5 && md == 0 {
                base = None;
            } else {
                base = Some(Reg::from_index(sib_base));
            }
            // The encoder only reaches for SIB when it must (index present
            // or ESP base); remember gratuitous uses so re-encoding is exact.
            let needed = index.is_some() || base == Some(Reg::Esp);
            force_sib = !needed;
        } else if rm == 5 && md == 0 {
            base = None;
        } else {
            base = Some(Reg::from_index(rm));
        }
        let (disp, disp_enc) = match md {
            0 => {
                if base.is_none() && index.is_none() {
                    (self.u32_site()? as i32, DispEnc::Disp32)
                } else if base.is_none() {
                    // SIB with no base always carries disp32.
                    (self.u32_site()? as i32, DispEnc::Disp32)
                } else {
                    (0, DispEnc::None)
                }
            }
            1 => (self.u8()? as i8 as i32, DispEnc::Disp8),
            _ => (self.u32_site()? as i32, DispEnc::Disp32),
        };
        Ok((
            reg,
            RmOp::Mem(MemRef {
                base,
                index,
                disp,
                disp_enc,
                force_sib,
            }),
        ))
    }
}

/// Decode one instruction from the start of `buf`.
pub fn decode(buf: &[u8], rva: u32) -> Result<Instruction, DecodeError> {
    let mut c = Cursor {
        buf,
        pos: 0,
        rva,
        sites: Vec::new(),
    };
    let op = c.u8()?;
    let bad = |byte| DecodeError::InvalidOpcode { rva, byte };

    // (mnemonic, cond, operands, xfer, enc)
    let built: (Mnemonic, Option<Cond>, Vec<Operand>, XferClass, EncPref) = match op {
        // ---------- ALU: op rm,r / op r,rm / op eax,imm32 ----------
        0x01 | 0x09 | 0x21 | 0x29 | 0x31 | 0x39 => {
            let (reg, rm) = c.modrm()?;
            let m = alu_for_base(op);
            (
                m,
                None,
                vec![rm.into_operand(), Operand::Reg(Reg::from_index(reg))],
                XferClass::None,
                EncPref::ModrmMr,
            )
        }
        0x03 | 0x0B | 0x23 | 0x2B | 0x33 | 0x3B => {
            let (reg, rm) = c.modrm()?;
            let m = alu_for_base(op);
            (
                m,
                None,
                vec![Operand::Reg(Reg::from_index(reg)), rm.into_operand()],
                XferClass::None,
                EncPref::ModrmRm,
            )
        }
        0x05 | 0x0D | 0x25 | 0x2D | 0x35 | 0x3D => {
            let m = alu_for_base(op);
            let imm = c.u32_site()?;
            (
                m,
                None,
                vec![Operand::Reg(Reg::Eax), Operand::Imm32(imm)],
                XferClass::None,
                EncPref::Compact,
            )
        }
        // ---------- jcc rel32 ----------
        0x0F => {
            let op2 = c.u8()?;
            if !(0x80..=0x8F).contains(&op2) {
                return Err(bad(op2));
            }
            let d = c.u32_plain()? as i32;
            (
                Mnemonic::Jcc,
                Some(Cond::from_nibble(op2 & 0xF)),
                vec![Operand::Rel32(d)],
                XferClass::Jcc,
                EncPref::Compact,
            )
        }
        // ---------- inc/dec/push/pop reg ----------
        0x40..=0x47 => (
            Mnemonic::Inc,
            None,
            vec![Operand::Reg(Reg::from_index(op - 0x40))],
            XferClass::None,
            EncPref::Compact,
        ),
        0x48..=0x4F => (
            Mnemonic::Dec,
            None,
            vec![Operand::Reg(Reg::from_index(op - 0x48))],
            XferClass::None,
            EncPref::Compact,
        ),
        0x50..=0x57 => (
            Mnemonic::Push,
            None,
            vec![Operand::Reg(Reg::from_index(op - 0x50))],
            XferClass::None,
            EncPref::Compact,
        ),
        0x58..=0x5F => (
            Mnemonic::Pop,
            None,
            vec![Operand::Reg(Reg::from_index(op - 0x58))],
            XferClass::None,
            EncPref::Compact,
        ),
        // ---------- push imm ----------
        0x68 => {
            let imm = c.u32_site()?;
            (
                Mnemonic::Push,
                None,
                vec![Operand::Imm32(imm)],
                XferClass::None,
                EncPref::Compact,
            )
        }
        0x6A => {
            let imm = c.u8()? as i8;
            (
                Mnemonic::Push,
                None,
                vec![Operand::Imm8(imm)],
                XferClass::None,
                EncPref::Compact,
            )
        }
        // ---------- jcc rel8 ----------
        0x70..=0x7F => {
            let d = c.u8()? as i8;
            (
                Mnemonic::Jcc,
                Some(Cond::from_nibble(op & 0xF)),
                vec![Operand::Rel8(d)],
                XferClass::Jcc,
                EncPref::Compact,
            )
        }
        // ---------- group 1: op rm, imm ----------
        0x81 | 0x83 => {
            let (ext, rm) = c.modrm()?;
            let m = match ext {
                0 => Mnemonic::Add,
                1 => Mnemonic::Or,
                4 => Mnemonic::And,
                5 => Mnemonic::Sub,
                6 => Mnemonic::Xor,
                7 => Mnemonic::Cmp,
                _ => return Err(bad(op)),
            };
            let imm = if op == 0x81 {
                Operand::Imm32(c.u32_site()?)
            } else {
                Operand::Imm8(c.u8()? as i8)
            };
            (
                m,
                None,
                vec![rm.into_operand(), imm],
                XferClass::None,
                EncPref::ModrmMr,
            )
        }
        // ---------- test rm, r ----------
        0x85 => {
            let (reg, rm) = c.modrm()?;
            (
                Mnemonic::Test,
                None,
                vec![rm.into_operand(), Operand::Reg(Reg::from_index(reg))],
                XferClass::None,
                EncPref::ModrmMr,
            )
        }
        // ---------- mov ----------
        0x89 => {
            let (reg, rm) = c.modrm()?;
            (
                Mnemonic::Mov,
                None,
                vec![rm.into_operand(), Operand::Reg(Reg::from_index(reg))],
                XferClass::None,
                EncPref::ModrmMr,
            )
        }
        0x8B => {
            let (reg, rm) = c.modrm()?;
            (
                Mnemonic::Mov,
                None,
                vec![Operand::Reg(Reg::from_index(reg)), rm.into_operand()],
                XferClass::None,
                EncPref::ModrmRm,
            )
        }
        0x8D => {
            let (reg, rm) = c.modrm()?;
            let mem = match rm {
                RmOp::Mem(m) => m,
                RmOp::Reg(_) => return Err(bad(op)),
            };
            (
                Mnemonic::Lea,
                None,
                vec![Operand::Reg(Reg::from_index(reg)), Operand::Mem(mem)],
                XferClass::None,
                EncPref::ModrmRm,
            )
        }
        // ---------- pop rm ----------
        0x8F => {
            let (ext, rm) = c.modrm()?;
            if ext != 0 {
                return Err(bad(op));
            }
            (
                Mnemonic::Pop,
                None,
                vec![rm.into_operand()],
                XferClass::None,
                EncPref::ModrmMr,
            )
        }
        0x90 => (
            Mnemonic::Nop,
            None,
            vec![],
            XferClass::None,
            EncPref::Compact,
        ),
        0x9C => (
            Mnemonic::Pushfd,
            None,
            vec![],
            XferClass::None,
            EncPref::Compact,
        ),
        0x9D => (
            Mnemonic::Popfd,
            None,
            vec![],
            XferClass::None,
            EncPref::Compact,
        ),
        // ---------- test eax, imm32 ----------
        0xA9 => {
            let imm = c.u32_site()?;
            (
                Mnemonic::Test,
                None,
                vec![Operand::Reg(Reg::Eax), Operand::Imm32(imm)],
                XferClass::None,
                EncPref::Compact,
            )
        }
        // ---------- mov reg, imm32 ----------
        0xB8..=0xBF => {
            let imm = c.u32_site()?;
            (
                Mnemonic::Mov,
                None,
                vec![Operand::Reg(Reg::from_index(op - 0xB8)), Operand::Imm32(imm)],
                XferClass::None,
                EncPref::Compact,
            )
        }
        // ---------- ret ----------
        0xC2 => {
            let n = c.u16()?;
            (
                Mnemonic::Ret,
                None,
                vec![Operand::Imm16(n)],
                XferClass::Ret,
                EncPref::Compact,
            )
        }
        0xC3 => (
            Mnemonic::Ret,
            None,
            vec![],
            XferClass::Ret,
            EncPref::Compact,
        ),
        // ---------- mov rm, imm32 ----------
        0xC7 => {
            let (ext, rm) = c.modrm()?;
            if ext != 0 {
                return Err(bad(op));
            }
            let imm = c.u32_site()?;
            (
                Mnemonic::Mov,
                None,
                vec![rm.into_operand(), Operand::Imm32(imm)],
                XferClass::None,
                EncPref::ModrmMr,
            )
        }
        0xCC => (
            Mnemonic::Int3,
            None,
            vec![],
            XferClass::None,
            EncPref::Compact,
        ),
        // ---------- call/jmp rel ----------
        0xE8 => {
            let d = c.u32_plain()? as i32;
            (
                Mnemonic::Call,
                None,
                vec![Operand::Rel32(d)],
                XferClass::CallRel,
                EncPref::Compact,
            )
        }
        0xE9 => {
            let d = c.u32_plain()? as i32;
            (
                Mnemonic::Jmp,
                None,
                vec![Operand::Rel32(d)],
                XferClass::JmpRel,
                EncPref::Compact,
            )
        }
        0xEB => {
            let d = c.u8()? as i8;
            (
                Mnemonic::Jmp,
                None,
                vec![Operand::Rel8(d)],
                XferClass::JmpRel,
                EncPref::Compact,
            )
        }
        // ---------- test rm, imm32 ----------
        0xF7 => {
            let (ext, rm) = c.modrm()?;
            if ext != 0 {
                return Err(bad(op));
            }
            let imm = c.u32_site()?;
            (
                Mnemonic::Test,
                None,
                vec![rm.into_operand(), Operand::Imm32(imm)],
                XferClass::None,
                EncPref::ModrmMr,
            )
        }
        // ---------- group 5 ----------
        0xFF => {
            let (ext, rm) = c.modrm()?;
            match ext {
                0 => (
                    Mnemonic::Inc,
                    None,
                    vec![rm.into_operand()],
                    XferClass::None,
                    EncPref::ModrmMr,
                ),
                1 => (
                    Mnemonic::Dec,
                    None,
                    vec![rm.into_operand()],
                    XferClass::None,
                    EncPref::ModrmMr,
                ),
                2 => (
                    Mnemonic::Call,
                    None,
                    vec![rm.into_operand()],
                    XferClass::CallInd,
                    EncPref::ModrmMr,
                ),
                4 => (
                    Mnemonic::Jmp,
                    None,
                    vec![rm.into_operand()],
                    XferClass::JmpInd,
                    EncPref::ModrmMr,
                ),
                6 => (
                    Mnemonic::Push,
                    None,
                    vec![rm.into_operand()],
                    XferClass::None,
                    EncPref::ModrmMr,
                ),
                _ => return Err(bad(op)),
            }
        }
        other => return Err(bad(other)),
    };

    let (mnemonic, cond, operands, xfer, enc) = built;
    Ok(Instruction {
        rva,
        length: c.pos as u8,
        mnemonic,
        cond,
        operands,
        xfer,
        enc,
        reloc_sites: c.sites,
    })
}

fn alu_for_base(base_op: u8) -> Mnemonic {
    match base_op & 0x38 {
        0x00 => Mnemonic::Add,
        0x08 => Mnemonic::Or,
        0x20 => Mnemonic::And,
        0x28 => Mnemonic::Sub,
        0x30 => Mnemonic::Xor,
        _ => Mnemonic::Cmp,
    }
}

// ---------------------------------------------------------------------------
// Encoding
// ---------------------------------------------------------------------------

fn enc_err(m: impl Into<String>) -> EncodeError {
    EncodeError(m.into())
}

fn alu_base_ext(m: Mnemonic) -> (u8, u8) {
    match m {
        Mnemonic::Add => (0x00, 0),
        Mnemonic::Or => (0x08, 1),
        Mnemonic::And => (0x20, 4),
        Mnemonic::Sub => (0x28, 5),
        Mnemonic::Xor => (0x30, 6),
        Mnemonic::Cmp => (0x38, 7),
        _ => unreachable!("not a group-1 ALU mnemonic"),
    }
}

fn emit_rm(out: &mut Vec<u8>, reg_field: u8, rm: &Operand) -> Result<(), EncodeError> {
    match rm {
        Operand::Reg(r) => {
            out.push(0xC0 | reg_field << 3 | r.index());
            Ok(())
        }
        Operand::Mem(m) => emit_mem(out, reg_field, m),
        _ => Err(enc_err("register or memory operand required")),
    }
}

fn emit_mem(out: &mut Vec<u8>, reg_field: u8, m: &MemRef) -> Result<(), EncodeError> {
    if let Some((idx, scale)) = m.index {
        if idx == Reg::Esp {
            return Err(enc_err("esp cannot be an index register"));
        }
        if !matches!(scale, 1 | 2 | 4 | 8) {
            return Err(enc_err("scale must be 1, 2, 4 or 8"));
        }
    }
    // Plain absolute [disp32]: mod=00 rm=101.
    if m.base.is_none() && m.index.is_none() && !m.force_sib {
        if m.disp_enc != DispEnc::Disp32 {
            return Err(enc_err("absolute reference requires disp32"));
        }
        out.push(reg_field << 3 | 5);
        out.extend_from_slice(&m.disp.to_le_bytes());
        return Ok(());
    }
    let needs_sib = m.force_sib || m.index.is_some() || m.base == Some(Reg::Esp) || m.base.is_none();
    let (md, disp_bytes): (u8, Vec<u8>) = match m.disp_enc {
        DispEnc::None => {
            if m.base == Some(Reg::Ebp) {
                return Err(enc_err("[ebp] must carry at least a disp8"));
            }
            if m.base.is_none() {
                return Err(enc_err("baseless reference requires disp32"));
            }
            (0, Vec::new())
        }
        DispEnc::Disp8 => {
            if !(-128..=127).contains(&m.disp) {
                return Err(enc_err("disp8 out of range"));
            }
            (1, vec![m.disp as i8 as u8])
        }
        DispEnc::Disp32 => {
            // A baseless SIB reference is only expressible with mod=00.
            let md = if m.base.is_none() { 0 } else { 2 };
            (md, m.disp.to_le_bytes().to_vec())
        }
    };
    if needs_sib {
        out.push(md << 6 | reg_field << 3 | 4);
        let ss: u8 = match m.index.map(|(_, s)| s).unwrap_or(1) {
            1 => 0,
            2 => 1,
            4 => 2,
            _ => 3,
        };
        let idx = m.index.map(|(r, _)| r.index()).unwrap_or(4);
        let base = m.base.map(|r| r.index()).unwrap_or(5);
        out.push(ss << 6 | idx << 3 | base);
    } else {
        out.push(md << 6 | reg_field << 3 | m.base.unwrap().index());
    }
    out.extend_from_slice(&disp_bytes);
    Ok(())
}

/// Encode an instruction back to bytes. Inverse of [`decode`] over the
/// supported subset: for any decoded instruction this reproduces the exact
/// input bytes.
pub fn encode(i: &Instruction) -> Result<Vec<u8>, EncodeError> {
    use Mnemonic::*;
    use Operand as O;
    let mut out = Vec::with_capacity(12);
    let ops = i.operands.as_slice();
    match (i.mnemonic, ops) {
        (Add | Or | And | Sub | Xor | Cmp, [dst, src]) => {
            let (base, ext) = alu_base_ext(i.mnemonic);
            match (dst, src) {
                (O::Reg(Reg::Eax), O::Imm32(v)) if i.enc == EncPref::Compact => {
                    out.push(base + 5);
                    out.extend_from_slice(&v.to_le_bytes());
                }
                (d, O::Imm32(v)) => {
                    out.push(0x81);
                    emit_rm(&mut out, ext, d)?;
                    out.extend_from_slice(&v.to_le_bytes());
                }
                (d, O::Imm8(v)) => {
                    out.push(0x83);
                    emit_rm(&mut out, ext, d)?;
                    out.push(*v as u8);
                }
                (d, O::Reg(r)) if i.enc != EncPref::ModrmRm => {
                    out.push(base + 1);
                    emit_rm(&mut out, r.index(), d)?;
                }
                (O::Reg(r), s) => {
                    out.push(base + 3);
                    emit_rm(&mut out, r.index(), s)?;
                }
                _ => return Err(enc_err("bad ALU operand combination")),
            }
        }
        (Test, [dst, src]) => match (dst, src) {
            (O::Reg(Reg::Eax), O::Imm32(v)) if i.enc == EncPref::Compact => {
                out.push(0xA9);
                out.extend_from_slice(&v.to_le_bytes());
            }
            (d, O::Imm32(v)) => {
                out.push(0xF7);
                emit_rm(&mut out, 0, d)?;
                out.extend_from_slice(&v.to_le_bytes());
            }
            (d, O::Reg(r)) => {
                out.push(0x85);
                emit_rm(&mut out, r.index(), d)?;
            }
            _ => return Err(enc_err("bad TEST operand combination")),
        },
        (Mov, [dst, src]) => match (dst, src) {
            (O::Reg(r), O::Imm32(v)) if i.enc == EncPref::Compact => {
                out.push(0xB8 + r.index());
                out.extend_from_slice(&v.to_le_bytes());
            }
            (d, O::Imm32(v)) => {
                out.push(0xC7);
                emit_rm(&mut out, 0, d)?;
                out.extend_from_slice(&v.to_le_bytes());
            }
            (d, O::Reg(r)) if i.enc != EncPref::ModrmRm => {
                out.push(0x89);
                emit_rm(&mut out, r.index(), d)?;
            }
            (O::Reg(r), s) => {
                out.push(0x8B);
                emit_rm(&mut out, r.index(), s)?;
            }
            _ => return Err(enc_err("bad MOV operand combination")),
        },
        (Lea, [O::Reg(r), O::Mem(m)]) => {
            out.push(0x8D);
            emit_mem(&mut out, r.index(), m)?;
        }
        (Push, [op]) => match op {
            O::Reg(r) if i.enc == EncPref::Compact => out.push(0x50 + r.index()),
            O::Imm8(v) => {
                out.push(0x6A);
                out.push(*v as u8);
            }
            O::Imm32(v) => {
                out.push(0x68);
                out.extend_from_slice(&v.to_le_bytes());
            }
            rm @ (O::Reg(_) | O::Mem(_)) => {
                out.push(0xFF);
                emit_rm(&mut out, 6, rm)?;
            }
            _ => return Err(enc_err("bad PUSH operand")),
        },
        (Pop, [op]) => match op {
            O::Reg(r) if i.enc == EncPref::Compact => out.push(0x58 + r.index()),
            rm @ (O::Reg(_) | O::Mem(_)) => {
                out.push(0x8F);
                emit_rm(&mut out, 0, rm)?;
            }
            _ => return Err(enc_err("bad POP operand")),
        },
        (Inc, [op]) => match op {
            O::Reg(r) if i.enc == EncPref::Compact => out.push(0x40 + r.index()),
            rm @ (O::Reg(_) | O::Mem(_)) => {
                out.push(0xFF);
                emit_rm(&mut out, 0, rm)?;
            }
            _ => return Err(enc_err("bad INC operand")),
        },
        (Dec, [op]) => match op {
            O::Reg(r) if i.enc == EncPref::Compact => out.push(0x48 + r.index()),
            rm @ (O::Reg(_) | O::Mem(_)) => {
                out.push(0xFF);
                emit_rm(&mut out, 1, rm)?;
            }
            _ => return Err(enc_err("bad DEC operand")),
        },
        (Nop, []) => out.push(0x90),
        (Int3, []) => out.push(0xCC),
        (Pushfd, []) => out.push(0x9C),
        (Popfd, []) => out.push(0x9D),
        (Call, [O::Rel32(d)]) => {
            out.push(0xE8);
            out.extend_from_slice(&d.to_le_bytes());
        }
        (Call, [rm @ (O::Reg(_) | O::Mem(_))]) => {
            out.push(0xFF);
            emit_rm(&mut out, 2, rm)?;
        }
        (Jmp, [O::Rel8(d)]) => {
            out.push(0xEB);
            out.push(*d as u8);
        }
        (Jmp, [O::Rel32(d)]) => {
            out.push(0xE9);
            out.extend_from_slice(&d.to_le_bytes());
        }
        (Jmp, [rm @ (O::Reg(_) | O::Mem(_))]) => {
            out.push(0xFF);
            emit_rm(&mut out, 4, rm)?;
        }
        (Jcc, [O::Rel8(d)]) => {
            let cond = i.cond.ok_or_else(|| enc_err("jcc without condition"))?;
            out.push(0x70 + cond.nibble());
            out.push(*d as u8);
        }
        (Jcc, [O::Rel32(d)]) => {
            let cond = i.cond.ok_or_else(|| enc_err("jcc without condition"))?;
            out.push(0x0F);
            out.push(0x80 + cond.nibble());
            out.extend_from_slice(&d.to_le_bytes());
        }
        (Ret, []) => out.push(0xC3),
        (Ret, [O::Imm16(n)]) => {
            out.push(0xC2);
            out.extend_from_slice(&n.to_le_bytes());
        }
        _ => {
            return Err(enc_err(format!(
                "no encoding for {:?} with {} operand(s)",
                i.mnemonic,
                ops.len()
            )))
        }
    }
    Ok(out)
}

/// Build a canonical instruction from parts: encodes, then decodes the bytes
/// so length, transfer class, relocation sites and encoding preference are
/// all derived from the actual machine form.
pub fn make(
    rva: u32,
    mnemonic: Mnemonic,
    cond: Option<Cond>,
    operands: Vec<Operand>,
    enc: EncPref,
) -> Result<Instruction, EncodeError> {
    let proto = Instruction {
        rva,
        length: 0,
        mnemonic,
        cond,
        operands,
        xfer: XferClass::None,
        enc,
        reloc_sites: Vec::new(),
    };
    let bytes = encode(&proto)?;
    decode(&bytes, rva).map_err(|e| enc_err(format!("encoder produced undecodable bytes: {e}")))
}

// ---------------------------------------------------------------------------
// Branch helpers
// ---------------------------------------------------------------------------

/// Rewrite a short (`rel8`) jump or conditional jump as its 32-bit form,
/// preserving the absolute target. Other instructions pass through unchanged.
pub fn expand_short(i: &Instruction) -> Instruction {
    let is_short = matches!(
        (i.mnemonic, i.operands.first()),
        (Mnemonic::Jmp, Some(Operand::Rel8(_))) | (Mnemonic::Jcc, Some(Operand::Rel8(_)))
    );
    if !is_short {
        return i.clone();
    }
    let target = i.rel_target().expect("rel8 branch has a target");
    let new_len: u32 = if i.mnemonic == Mnemonic::Jmp { 5 } else { 6 };
    let rel = target.wrapping_sub(i.rva.wrapping_add(new_len)) as i32;
    make(
        i.rva,
        i.mnemonic,
        i.cond,
        vec![Operand::Rel32(rel)],
        EncPref::Compact,
    )
    .expect("rel32 branches always encode")
}

/// Does this indirect call/jump go through an import-table slot? Such sites
/// already point at code the loader resolved and are left uninstrumented.
pub fn classify_iat_indirect(
    i: &Instruction,
    image_base: u32,
    iat_slots: &std::collections::BTreeSet<u32>,
) -> bool {
    if i.xfer != XferClass::CallInd && i.xfer != XferClass::JmpInd {
        return false;
    }
    match i.operands.first() {
        Some(Operand::Mem(m)) if m.is_absolute_direct() => {
            let va = m.disp as u32;
            va.checked_sub(image_base)
                .is_some_and(|rva| iat_slots.contains(&rva))
        }
        _ => false,
    }
}

// ---------------------------------------------------------------------------
// Formatting
// ---------------------------------------------------------------------------

impl fmt::Display for MemRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "dword [")?;
        let mut wrote = false;
        if let Some(b) = self.base {
            write!(f, "{}", b.name())?;
            wrote = true;
        }
        if let Some((r, s)) = self.index {
            if wrote {
                write!(f, "+")?;
            }
            write!(f, "{}*{}", r.name(), s)?;
            wrote = true;
        }
        if !wrote {
            write!(f, "{:#x}", self.disp as u32)?;
        } else if self.disp > 0 || self.disp_enc != DispEnc::None && self.disp >= 0 {
            write!(f, "+{:#x}", self.disp)?;
        } else if self.disp < 0 {
            write!(f, "-{:#x}", -(self.disp as i64))?;
        }
        write!(f, "]")
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.mnemonic {
            Mnemonic::Jcc => self.cond.map(Cond::name).unwrap_or("j??"),
            Mnemonic::Mov => "mov",
            Mnemonic::Lea => "lea",
            Mnemonic::Push => "push",
            Mnemonic::Pop => "pop",
            Mnemonic::Add => "add",
            Mnemonic::Or => "or",
            Mnemonic::And => "and",
            Mnemonic::Sub => "sub",
            Mnemonic::Xor => "xor",
            Mnemonic::Cmp => "cmp",
            Mnemonic::Test => "test",
            Mnemonic::Inc => "inc",
            Mnemonic::Dec => "dec",
            Mnemonic::Nop => "nop",
            Mnemonic::Int3 => "int3",
            Mnemonic::Pushfd => "pushfd",
            Mnemonic::Popfd => "popfd",
            Mnemonic::Call => "call",
            Mnemonic::Jmp => "jmp",
            Mnemonic::Ret => "ret",
        };
        write!(f, "{name}")?;
        for (n, op) in self.operands.iter().enumerate() {
            write!(f, "{}", if n == 0 { " " } else { ", " })?;
            match op {
                Operand::Reg(r) => write!(f, "{}", r.name())?,
                Operand::Mem(m) => write!(f, "{m}")?,
                Operand::Imm8(v) => write!(f, "{:#x}", *v as i32)?,
                Operand::Imm16(v) => write!(f, "{v:#x}")?,
                Operand::Imm32(v) => write!(f, "{v:#x}")?,
                Operand::Rel8(_) | Operand::Rel32(_) => {
                    write!(f, "{:#010x}", self.rel_target().unwrap_or(0))?
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
