//! PE32 image model.
//!
//! Parses 32-bit portable executables into a structured [`PeImage`] and writes
//! them back byte-for-byte when nothing was modified. The model is
//! deliberately strict: anything this module cannot re-emit faithfully is
//! rejected at parse time rather than silently normalized, because the
//! rewriting pipeline depends on `parse(emit(x)) == x` holding exactly.
//!
//! Only the features needed by kernel-style driver modules are supported:
//! i386 machine type, PE32 optional header, HIGHLOW base relocations, and a
//! conventional import directory. PE32+ and other architectures are refused
//! with a distinct error so callers can tell "broken" from "out of scope".

use std::collections::BTreeSet;
use std::fmt;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

/// Failure modes for parsing and editing PE images.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PeError {
    /// Structurally invalid or internally inconsistent image.
    MalformedHeader(String),
    /// Valid PE, but a flavor this model does not handle (PE32+, non-i386).
    Unsupported(String),
    /// An edit would not fit in the available file or header space.
    LayoutOverflow(String),
    /// The request itself is meaningless (zero-size expansion, duplicate
    /// relocation, write outside mapped data).
    InvalidRequest(String),
}

impl fmt::Display for PeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PeError::MalformedHeader(m) => write!(f, "malformed PE header: {m}"),
            PeError::Unsupported(m) => write!(f, "unsupported PE flavor: {m}"),
            PeError::LayoutOverflow(m) => write!(f, "layout overflow: {m}"),
            PeError::InvalidRequest(m) => write!(f, "invalid request: {m}"),
        }
    }
}

impl std::error::Error for PeError {}

// ---------------------------------------------------------------------------
// Constants
// ---------------------------------------------------------------------------

pub const SCN_CNT_CODE: u32 = 0x0000_0020;
pub const SCN_CNT_INITIALIZED_DATA: u32 = 0x0000_0040;
pub const SCN_MEM_DISCARDABLE: u32 = 0x0200_0000;
pub const SCN_MEM_NOT_PAGED: u32 = 0x0800_0000;
pub const SCN_MEM_EXECUTE: u32 = 0x2000_0000;
pub const SCN_MEM_READ: u32 = 0x4000_0000;
pub const SCN_MEM_WRITE: u32 = 0x8000_0000;

const MACHINE_I386: u16 = 0x014C;
const OPT_MAGIC_PE32: u16 = 0x010B;
const OPT_MAGIC_PE32PLUS: u16 = 0x020B;
const SECTION_ROW_LEN: usize = 40;
const RELOC_HIGHLOW: u16 = 3;
const RELOC_ABSOLUTE: u16 = 0;

/// Marker written at the end of the instrumentation host section so the
/// runtime side can find the gate and filter slots without symbols. Layout:
/// `gate_rva: u32, filter_rva: u32, b"SHP1"`.
pub const HOST_TRAILER_MAGIC: &[u8; 4] = b"SHP1";

/// Name given to a freshly appended instrumentation host section.
pub const HOST_SECTION_NAME: &[u8; 8] = b".shep\0\0\0";

// ---------------------------------------------------------------------------
// Little-endian helpers
// ---------------------------------------------------------------------------

fn rd_u16(b: &[u8], off: usize) -> Option<u16> {
    b.get(off..off + 2).map(|s| u16::from_le_bytes([s[0], s[1]]))
}

fn rd_u32(b: &[u8], off: usize) -> Option<u32> {
    b.get(off..off + 4)
        .map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
}

fn wr_u16(b: &mut [u8], off: usize, v: u16) {
    b[off..off + 2].copy_from_slice(&v.to_le_bytes());
}

fn wr_u32(b: &mut [u8], off: usize, v: u32) {
    b[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

pub(crate) fn align_up(v: u32, align: u32) -> u32 {
    debug_assert!(align.is_power_of_two());
    (v + align - 1) & !(align - 1)
}

// ---------------------------------------------------------------------------
// Structures
// ---------------------------------------------------------------------------

/// One section: header row fields plus its raw file bytes.
///
/// `raw_data.len()` always equals the on-disk `SizeOfRawData`, so re-emitting
/// an unmodified section reproduces its bytes exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub name: [u8; 8],
    pub rva: u32,
    pub virtual_size: u32,
    pub raw_ptr: u32,
    pub raw_data: Vec<u8>,
    pub characteristics: u32,
}

impl Section {
    pub fn readable(&self) -> bool {
        self.characteristics & SCN_MEM_READ != 0
    }
    pub fn writable(&self) -> bool {
        self.characteristics & SCN_MEM_WRITE != 0
    }
    pub fn executable(&self) -> bool {
        self.characteristics & SCN_MEM_EXECUTE != 0
    }
    pub fn pageable(&self) -> bool {
        self.characteristics & SCN_MEM_NOT_PAGED == 0
    }

    /// Size of the section's address range once mapped, before alignment.
    pub fn virtual_span(&self) -> u32 {
        self.virtual_size.max(self.raw_data.len() as u32)
    }

    /// Does `rva` fall inside this section's mapped range?
    pub fn contains_rva(&self, rva: u32, section_alignment: u32) -> bool {
        let span = align_up(self.virtual_span().max(1), section_alignment);
        rva >= self.rva && rva - self.rva < span
    }

    pub fn name_str(&self) -> String {
        let end = self.name.iter().position(|&c| c == 0).unwrap_or(8);
        String::from_utf8_lossy(&self.name[..end]).into_owned()
    }
}

/// A single HIGHLOW base relocation: the image has a 32-bit absolute address
/// stored at `rva` that the loader adjusts when the image is rebased.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct RelocationEntry {
    pub rva: u32,
}

/// One imported symbol and the IAT slot the loader resolves it into.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImportEntry {
    pub library_name: String,
    pub symbol_name: String,
    pub iat_slot_rva: u32,
}

/// Location of the runtime gate/filter slots inside a rewritten image,
/// recovered from the host-section trailer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MonitorSlots {
    pub gate_rva: u32,
    pub filter_rva: u32,
    pub host_section: usize,
}

/// Parsed PE32 image.
///
/// Keeps the original header blob verbatim and patches only the fields this
/// model owns (section table, section count, image size, relocation
/// directory, checksum) when emitting.
#[derive(Debug, Clone)]
pub struct PeImage {
    header: Vec<u8>,
    pe_offset: usize,
    opt_offset: usize,
    opt_size: usize,
    num_dirs: usize,
    image_base: u32,
    entry_point: u32,
    section_alignment: u32,
    file_alignment: u32,
    size_of_headers: u32,
    checksum_present: bool,
    reloc_dir: Option<(u32, u32)>,
    sections: Vec<Section>,
    relocations: Vec<RelocationEntry>,
    relocs_dirty: bool,
    imports: Vec<ImportEntry>,
    iat_slots: BTreeSet<u32>,
    overlay: Vec<u8>,
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

impl PeImage {
    /// Parse a PE32 image from raw file bytes, validating every invariant the
    /// rest of the pipeline relies on.
    pub fn parse(bytes: &[u8]) -> Result<PeImage, PeError> {
        let mal = |m: &str| PeError::MalformedHeader(m.to_string());

        if bytes.len() < 0x40 {
            return Err(mal("file shorter than a DOS header"));
        }
        if &bytes[0..2] != b"MZ" {
            return Err(mal("missing MZ signature"));
        }
        let pe_offset = rd_u32(bytes, 0x3C).unwrap() as usize;
        if pe_offset + 24 > bytes.len() {
            return Err(mal("e_lfanew points past end of file"));
        }
        if &bytes[pe_offset..pe_offset + 4] != b"PE\0\0" {
            return Err(mal("missing PE signature"));
        }

        let coff = pe_offset + 4;
        let machine = rd_u16(bytes, coff).ok_or_else(|| mal("truncated COFF header"))?;
        if machine != MACHINE_I386 {
            return Err(PeError::Unsupported(format!(
                "machine {machine:#06x}, expected i386"
            )));
        }
        let n_sections = rd_u16(bytes, coff + 2).unwrap() as usize;
        let opt_size = rd_u16(bytes, coff + 16).unwrap() as usize;
        let opt_offset = pe_offset + 24;
        if opt_offset + opt_size > bytes.len() {
            return Err(mal("optional header extends past end of file"));
        }
        if opt_size < 96 {
            return Err(mal("optional header too small for PE32"));
        }

        let magic = rd_u16(bytes, opt_offset).unwrap();
        if magic == OPT_MAGIC_PE32PLUS {
            return Err(PeError::Unsupported("PE32+ image".to_string()));
        }
        if magic != OPT_MAGIC_PE32 {
            return Err(mal("unrecognized optional header magic"));
        }

        let entry_point = rd_u32(bytes, opt_offset + 16).unwrap();
        let image_base = rd_u32(bytes, opt_offset + 28).unwrap();
        let section_alignment = rd_u32(bytes, opt_offset + 32).unwrap();
        let file_alignment = rd_u32(bytes, opt_offset + 36).unwrap();
        let size_of_headers = rd_u32(bytes, opt_offset + 60).unwrap();
        let checksum = rd_u32(bytes, opt_offset + 64).unwrap();
        let num_dirs = rd_u32(bytes, opt_offset + 92).unwrap() as usize;

        if !file_alignment.is_power_of_two() || file_alignment < 4 {
            return Err(mal("file alignment must be a power of two"));
        }
        if !section_alignment.is_power_of_two() || section_alignment < file_alignment {
            return Err(mal("section alignment smaller than file alignment"));
        }
        if num_dirs > 16 || opt_size < 96 + 8 * num_dirs {
            return Err(mal("data directory count inconsistent with header size"));
        }

        let table_off = opt_offset + opt_size;
        let table_end = table_off + n_sections * SECTION_ROW_LEN;
        if table_end > bytes.len() || table_end as u32 > size_of_headers {
            return Err(mal("section table extends past the header area"));
        }
        if size_of_headers as usize > bytes.len() {
            return Err(mal("declared header size exceeds file size"));
        }

        // ---------- section table ----------
        let mut sections = Vec::with_capacity(n_sections);
        for i in 0..n_sections {
            let row = table_off + i * SECTION_ROW_LEN;
            let mut name = [0u8; 8];
            name.copy_from_slice(&bytes[row..row + 8]);
            let virtual_size = rd_u32(bytes, row + 8).unwrap();
            let rva = rd_u32(bytes, row + 12).unwrap();
            let raw_size = rd_u32(bytes, row + 16).unwrap();
            let raw_ptr = rd_u32(bytes, row + 20).unwrap();
            let ptr_relocs = rd_u32(bytes, row + 24).unwrap();
            let ptr_lines = rd_u32(bytes, row + 28).unwrap();
            let n_relocs = rd_u16(bytes, row + 32).unwrap();
            let n_lines = rd_u16(bytes, row + 34).unwrap();
            let characteristics = rd_u32(bytes, row + 36).unwrap();

            if ptr_relocs != 0 || ptr_lines != 0 || n_relocs != 0 || n_lines != 0 {
                return Err(mal("COFF-level section relocations are not supported"));
            }
            if !rva.is_multiple_of(section_alignment) {
                return Err(mal("section RVA not aligned"));
            }
            if raw_size > 0 {
                if !raw_ptr.is_multiple_of(file_alignment) {
                    return Err(mal("section raw pointer not aligned"));
                }
                if (raw_ptr as usize) < size_of_headers as usize {
                    return Err(mal("section raw data overlaps headers"));
                }
                let end = raw_ptr as u64 + raw_size as u64;
                if end > bytes.len() as u64 {
                    return Err(mal("section raw data extends past end of file"));
                }
            }
            let raw_data = if raw_size > 0 {
                bytes[raw_ptr as usize..(raw_ptr + raw_size) as usize].to_vec()
            } else {
                Vec::new()
            };
            sections.push(Section {
                name,
                rva,
                virtual_size,
                raw_ptr,
                raw_data,
                characteristics,
            });
        }

        // Ascending, non-overlapping virtual layout.
        for w in sections.windows(2) {
            let span = align_up(w[0].virtual_span().max(1), section_alignment);
            if w[1].rva < w[0].rva.checked_add(span).ok_or_else(|| {
                mal("section address range wraps the 32-bit space")
            })? {
                return Err(mal("sections overlap or are not in ascending order"));
            }
        }
        // Ascending, non-overlapping file layout, with zero-filled gaps only
        // (anything else could not be re-emitted faithfully).
        {
            let mut with_raw: Vec<&Section> =
                sections.iter().filter(|s| !s.raw_data.is_empty()).collect();
            with_raw.sort_by_key(|s| s.raw_ptr);
            let mut prev_end = size_of_headers as usize;
            for s in &with_raw {
                if (s.raw_ptr as usize) < prev_end {
                    return Err(mal("section raw data ranges overlap"));
                }
                if bytes[prev_end..s.raw_ptr as usize].iter().any(|&b| b != 0) {
                    return Err(mal("non-zero padding between sections"));
                }
                prev_end = s.raw_ptr as usize + s.raw_data.len();
            }
        }

        let mut img = PeImage {
            header: bytes[..size_of_headers as usize].to_vec(),
            pe_offset,
            opt_offset,
            opt_size,
            num_dirs,
            image_base,
            entry_point,
            section_alignment,
            file_alignment,
            size_of_headers,
            checksum_present: checksum != 0,
            reloc_dir: None,
            sections,
            relocations: Vec::new(),
            relocs_dirty: false,
            imports: Vec::new(),
            iat_slots: BTreeSet::new(),
            overlay: Vec::new(),
        };

        let file_end = img
            .sections
            .iter()
            .map(|s| s.raw_ptr as usize + s.raw_data.len())
            .max()
            .unwrap_or(size_of_headers as usize)
            .max(size_of_headers as usize);
        img.overlay = bytes[file_end..].to_vec();

        // ---------- entry point ----------
        if entry_point != 0 {
            match img.section_containing(entry_point) {
                Some(idx) if img.sections[idx].executable() => {}
                Some(_) => return Err(mal("entry point in a non-executable section")),
                None => return Err(mal("entry point outside all sections")),
            }
        }

        // ---------- base relocations ----------
        if num_dirs > 5 {
            let dir_rva = rd_u32(bytes, opt_offset + 96 + 5 * 8).unwrap();
            let dir_size = rd_u32(bytes, opt_offset + 96 + 5 * 8 + 4).unwrap();
            if dir_rva != 0 && dir_size != 0 {
                img.reloc_dir = Some((dir_rva, dir_size));
                img.parse_relocations(dir_rva, dir_size)?;
            }
        }

        // ---------- imports ----------
        if num_dirs > 1 {
            let dir_rva = rd_u32(bytes, opt_offset + 96 + 8).unwrap();
            let dir_size = rd_u32(bytes, opt_offset + 96 + 8 + 4).unwrap();
            if dir_rva != 0 && dir_size != 0 {
                img.parse_imports(dir_rva)?;
            }
        }

        Ok(img)
    }

    fn parse_relocations(&mut self, dir_rva: u32, dir_size: u32) -> Result<(), PeError> {
        let mal = |m: &str| PeError::MalformedHeader(m.to_string());
        let blob = self
            .read_bytes(dir_rva, dir_size as usize)
            .ok_or_else(|| mal("relocation directory outside section data"))?
            .to_vec();
        let mut off = 0usize;
        let mut entries = Vec::new();
        while off + 8 <= blob.len() {
            let page = rd_u32(&blob, off).unwrap();
            let block_size = rd_u32(&blob, off + 4).unwrap() as usize;
            if block_size == 0 && page == 0 {
                break; // zero terminator some linkers leave in the slack
            }
            if block_size < 8 || !block_size.is_multiple_of(2) || off + block_size > blob.len() {
                return Err(mal("relocation block size out of range"));
            }
            for e in (off + 8..off + block_size).step_by(2) {
                let word = rd_u16(&blob, e).unwrap();
                let kind = word >> 12;
                let page_off = (word & 0x0FFF) as u32;
                match kind {
                    RELOC_ABSOLUTE => {} // alignment padding
                    RELOC_HIGHLOW => entries.push(RelocationEntry {
                        rva: page + page_off,
                    }),
                    other => {
                        return Err(mal(&format!(
                            "relocation kind {other} unsupported (only HIGHLOW)"
                        )))
                    }
                }
            }
            off += block_size;
        }
        entries.sort();
        if entries.windows(2).any(|w| w[0] == w[1]) {
            return Err(mal("duplicate relocation RVA"));
        }
        for e in &entries {
            if self.section_containing(e.rva).is_none() {
                return Err(mal("relocation target outside all sections"));
            }
        }
        self.relocations = entries;
        Ok(())
    }

    fn parse_imports(&mut self, dir_rva: u32) -> Result<(), PeError> {
        let mal = |m: &str| PeError::MalformedHeader(m.to_string());
        let mut desc_rva = dir_rva;
        loop {
            let desc = self
                .read_bytes(desc_rva, 20)
                .ok_or_else(|| mal("import descriptor outside section data"))?;
            let oft = rd_u32(desc, 0).unwrap();
            let name_rva = rd_u32(desc, 12).unwrap();
            let ft = rd_u32(desc, 16).unwrap();
            if oft == 0 && name_rva == 0 && ft == 0 {
                break;
            }
            if name_rva == 0 || ft == 0 {
                return Err(mal("import descriptor missing name or IAT"));
            }
            let library_name = self
                .read_cstr(name_rva)
                .ok_or_else(|| mal("import library name outside section data"))?;
            let thunks = if oft != 0 { oft } else { ft };
            let mut i = 0u32;
            loop {
                let slot = self
                    .read_u32(thunks + 4 * i)
                    .ok_or_else(|| mal("import thunk outside section data"))?;
                if slot == 0 {
                    break;
                }
                let symbol_name = if slot & 0x8000_0000 != 0 {
                    format!("#{}", slot & 0xFFFF)
                } else {
                    self.read_cstr(slot + 2)
                        .ok_or_else(|| mal("import hint/name outside section data"))?
                };
                let iat_slot_rva = ft + 4 * i;
                if !self.iat_slots.insert(iat_slot_rva) {
                    return Err(mal("duplicate IAT slot"));
                }
                self.imports.push(ImportEntry {
                    library_name: library_name.clone(),
                    symbol_name,
                    iat_slot_rva,
                });
                i += 1;
            }
            desc_rva += 20;
        }
        Ok(())
    }

    // -----------------------------------------------------------------------
    // Accessors
    // -----------------------------------------------------------------------

    pub fn image_base(&self) -> u32 {
        self.image_base
    }
    pub fn entry_point(&self) -> u32 {
        self.entry_point
    }
    pub fn section_alignment(&self) -> u32 {
        self.section_alignment
    }
    pub fn file_alignment(&self) -> u32 {
        self.file_alignment
    }
    pub fn sections(&self) -> &[Section] {
        &self.sections
    }
    pub fn relocations(&self) -> &[RelocationEntry] {
        &self.relocations
    }
    pub fn imports(&self) -> &[ImportEntry] {
        &self.imports
    }
    pub fn reloc_dir(&self) -> Option<(u32, u32)> {
        self.reloc_dir
    }

    /// True if `rva` is an IAT slot the loader writes a resolved import into.
    pub fn is_iat_slot(&self, rva: u32) -> bool {
        self.iat_slots.contains(&rva)
    }

    pub fn iat_slots(&self) -> &BTreeSet<u32> {
        &self.iat_slots
    }

    /// Index of the section whose mapped range contains `rva`.
    pub fn section_containing(&self, rva: u32) -> Option<usize> {
        self.sections
            .iter()
            .position(|s| s.contains_rva(rva, self.section_alignment))
    }

    /// Raw bytes at `rva..rva+len`, if the range lies inside one section's
    /// file-backed data. Returns `None` for ranges reaching into the
    /// zero-filled virtual tail.
    pub fn read_bytes(&self, rva: u32, len: usize) -> Option<&[u8]> {
        let idx = self.section_containing(rva)?;
        let s = &self.sections[idx];
        let off = (rva - s.rva) as usize;
        s.raw_data.get(off..off + len)
    }

    pub fn read_u32(&self, rva: u32) -> Option<u32> {
        self.read_bytes(rva, 4).map(|b| rd_u32(b, 0).unwrap())
    }

    fn read_cstr(&self, rva: u32) -> Option<String> {
        let idx = self.section_containing(rva)?;
        let s = &self.sections[idx];
        let off = (rva - s.rva) as usize;
        let tail = s.raw_data.get(off..)?;
        let end = tail.iter().position(|&c| c == 0)?;
        Some(String::from_utf8_lossy(&tail[..end]).into_owned())
    }

    /// Overwrite bytes inside a section's file-backed data.
    pub fn write_bytes(&mut self, rva: u32, bytes: &[u8]) -> Result<(), PeError> {
        let idx = self.section_containing(rva).ok_or_else(|| {
            PeError::InvalidRequest(format!("write at {rva:#x} outside all sections"))
        })?;
        let s = &mut self.sections[idx];
        let off = (rva - s.rva) as usize;
        if off + bytes.len() > s.raw_data.len() {
            return Err(PeError::InvalidRequest(format!(
                "write at {rva:#x} beyond raw data of section {}",
                s.name_str()
            )));
        }
        s.raw_data[off..off + bytes.len()].copy_from_slice(bytes);
        Ok(())
    }

    pub fn write_u32(&mut self, rva: u32, v: u32) -> Result<(), PeError> {
        self.write_bytes(rva, &v.to_le_bytes())
    }

    // -----------------------------------------------------------------------
    // Relocation editing
    // -----------------------------------------------------------------------

    /// Is there a relocation exactly at `rva`?
    pub fn has_relocation_at(&self, rva: u32) -> bool {
        self.relocations
            .binary_search(&RelocationEntry { rva })
            .is_ok()
    }

    pub fn add_relocation(&mut self, rva: u32) -> Result<(), PeError> {
        match self.relocations.binary_search(&RelocationEntry { rva }) {
            Ok(_) => Err(PeError::InvalidRequest(format!(
                "relocation at {rva:#x} already present"
            ))),
            Err(pos) => {
                self.relocations.insert(pos, RelocationEntry { rva });
                self.relocs_dirty = true;
                Ok(())
            }
        }
    }

    /// Remove every relocation whose 4-byte field overlaps
    /// `[start_rva, start_rva + len)`. Returns how many were removed.
    pub fn erase_relocations_in(&mut self, start_rva: u32, len: u32) -> usize {
        let end = start_rva as u64 + len as u64;
        let before = self.relocations.len();
        self.relocations
            .retain(|e| (e.rva as u64) + 4 <= start_rva as u64 || (e.rva as u64) >= end);
        let removed = before - self.relocations.len();
        if removed > 0 {
            self.relocs_dirty = true;
        }
        removed
    }

    /// Serialize the current relocation set as base-relocation blocks
    /// (HIGHLOW entries, zero-padded to 4-byte block sizes).
    pub fn serialize_relocations(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < self.relocations.len() {
            let page = self.relocations[i].rva & !0xFFF;
            let mut j = i;
            while j < self.relocations.len() && self.relocations[j].rva & !0xFFF == page {
                j += 1;
            }
            let n = j - i;
            let padded = (n + 1) & !1; // keep block sizes 4-byte multiples
            let block_size = 8 + 2 * padded;
            out.extend_from_slice(&page.to_le_bytes());
            out.extend_from_slice(&(block_size as u32).to_le_bytes());
            for e in &self.relocations[i..j] {
                let word = (RELOC_HIGHLOW << 12) | (e.rva & 0xFFF) as u16;
                out.extend_from_slice(&word.to_le_bytes());
            }
            if padded != n {
                out.extend_from_slice(&0u16.to_le_bytes());
            }
            i = j;
        }
        out
    }

    /// Serialize the relocation set and append it to `section_idx`, updating
    /// the base-relocation directory to point at the new copy. Clears the
    /// dirty flag; use this when the table no longer fits where it was.
    pub fn place_relocation_blob(&mut self, section_idx: usize) -> Result<(u32, u32), PeError> {
        if self.num_dirs <= 5 {
            return Err(PeError::LayoutOverflow(
                "image has no base-relocation directory slot".to_string(),
            ));
        }
        // Blank the superseded copy so stale entries cannot be mistaken for
        // the live table.
        if let Some((old_rva, old_size)) = self.reloc_dir {
            if self.read_bytes(old_rva, old_size as usize).is_some() {
                let zeros = vec![0u8; old_size as usize];
                self.write_bytes(old_rva, &zeros)?;
            }
        }
        let blob = self.serialize_relocations();
        let rva = self.append_to_section(section_idx, &blob)?;
        self.reloc_dir = Some((rva, blob.len() as u32));
        self.relocs_dirty = false;
        Ok((rva, blob.len() as u32))
    }

    // -----------------------------------------------------------------------
    // Section growth
    // -----------------------------------------------------------------------

    fn last_section_index(&self) -> Option<usize> {
        if self.sections.is_empty() {
            return None;
        }
        Some(self.sections.len() - 1)
    }

    fn is_last_in_file(&self, idx: usize) -> bool {
        let end = self.sections[idx].raw_ptr as u64 + self.sections[idx].raw_data.len() as u64;
        self.sections.iter().enumerate().all(|(i, s)| {
            i == idx || s.raw_data.is_empty() || (s.raw_ptr as u64 + s.raw_data.len() as u64) <= end
        })
    }

    /// Make room for `needed` bytes of instrumented code and pick the section
    /// that will host it. If the image's relocation table lives in the last
    /// section, that section is converted to executable, non-pageable code
    /// and grown in place; otherwise a fresh `.shep` section is appended.
    /// Returns the host section index.
    pub fn expand_host_section(&mut self, needed: u32) -> Result<usize, PeError> {
        if needed == 0 {
            return Err(PeError::InvalidRequest(
                "expansion of zero bytes requested".to_string(),
            ));
        }
        let last = self.last_section_index().ok_or_else(|| {
            PeError::MalformedHeader("image has no sections".to_string())
        })?;

        let reloc_host = self.reloc_dir.and_then(|(rva, _)| self.section_containing(rva));
        if reloc_host == Some(last) && self.is_last_in_file(last) {
            let s = &mut self.sections[last];
            let end = s.rva as u64 + s.virtual_span() as u64 + needed as u64;
            if end > u32::MAX as u64 - self.section_alignment as u64 {
                return Err(PeError::LayoutOverflow(
                    "image would exceed the 32-bit address space".to_string(),
                ));
            }
            s.characteristics |= SCN_MEM_READ | SCN_MEM_EXECUTE | SCN_MEM_NOT_PAGED | SCN_CNT_CODE;
            s.characteristics &= !(SCN_MEM_DISCARDABLE | SCN_MEM_WRITE);
            s.virtual_size = s.virtual_span().saturating_add(needed);
            return Ok(last);
        }

        // Append a new host section; the table row must fit in header slack.
        let table_off = self.opt_offset + self.opt_size;
        let table_end = table_off + (self.sections.len() + 1) * SECTION_ROW_LEN;
        if table_end as u32 > self.size_of_headers {
            return Err(PeError::LayoutOverflow(
                "no header space left for another section row".to_string(),
            ));
        }
        let max_vend = self
            .sections
            .iter()
            .map(|s| s.rva as u64 + align_up(s.virtual_span().max(1), self.section_alignment) as u64)
            .max()
            .unwrap_or(self.section_alignment as u64);
        let max_fend = self
            .sections
            .iter()
            .map(|s| s.raw_ptr as u64 + s.raw_data.len() as u64)
            .max()
            .unwrap_or(self.size_of_headers as u64)
            .max(self.size_of_headers as u64);
        let rva = align_up(max_vend as u32, self.section_alignment);
        let raw_ptr = align_up(max_fend as u32, self.file_alignment);
        if rva as u64 + needed as u64 > u32::MAX as u64 - self.section_alignment as u64 {
            return Err(PeError::LayoutOverflow(
                "image would exceed the 32-bit address space".to_string(),
            ));
        }
        self.sections.push(Section {
            name: *HOST_SECTION_NAME,
            rva,
            virtual_size: needed,
            raw_ptr,
            raw_data: Vec::new(),
            characteristics: SCN_CNT_CODE | SCN_MEM_READ | SCN_MEM_EXECUTE | SCN_MEM_NOT_PAGED,
        });
        Ok(self.sections.len() - 1)
    }

    /// Append `payload` to the file-backed data of `section_idx` (which must
    /// be the last section in both file and address order), padding the raw
    /// size back up to the file alignment. Returns the RVA of the payload.
    pub fn append_to_section(&mut self, section_idx: usize, payload: &[u8]) -> Result<u32, PeError> {
        if payload.is_empty() {
            return Err(PeError::InvalidRequest("empty append".to_string()));
        }
        let n = self.sections.len();
        if section_idx + 1 != n {
            return Err(PeError::InvalidRequest(
                "can only append to the last section".to_string(),
            ));
        }
        if !self.is_last_in_file(section_idx) {
            return Err(PeError::LayoutOverflow(
                "section is not last in file order; growing it would shift others".to_string(),
            ));
        }
        let file_alignment = self.file_alignment;
        let s = &mut self.sections[section_idx];
        let start = s.raw_data.len();
        let rva = s.rva as u64 + start as u64;
        if rva + payload.len() as u64 > u32::MAX as u64 {
            return Err(PeError::LayoutOverflow(
                "append would exceed the 32-bit address space".to_string(),
            ));
        }
        s.raw_data.extend_from_slice(payload);
        let padded = align_up(s.raw_data.len() as u32, file_alignment) as usize;
        s.raw_data.resize(padded, 0);
        s.virtual_size = s.virtual_size.max((start + payload.len()) as u32);
        Ok(rva as u32)
    }

    // -----------------------------------------------------------------------
    // Host trailer discovery
    // -----------------------------------------------------------------------

    /// Locate the gate/filter slot trailer a rewritten image carries at the
    /// end of its host section.
    pub fn find_monitor_slots(&self) -> Option<MonitorSlots> {
        for (idx, s) in self.sections.iter().enumerate().rev() {
            if !s.executable() || s.raw_data.len() < 12 {
                continue;
            }
            let raw = &s.raw_data;
            let pos = match raw.windows(4).rposition(|w| w == HOST_TRAILER_MAGIC) {
                Some(p) if p >= 8 => p,
                _ => continue,
            };
            let gate_rva = rd_u32(raw, pos - 8).unwrap();
            let filter_rva = rd_u32(raw, pos - 4).unwrap();
            let sa = self.section_alignment;
            if self.sections[idx].contains_rva(gate_rva, sa)
                && self.sections[idx].contains_rva(filter_rva, sa)
            {
                return Some(MonitorSlots {
                    gate_rva,
                    filter_rva,
                    host_section: idx,
                });
            }
        }
        None
    }

    // -----------------------------------------------------------------------
    // Emission
    // -----------------------------------------------------------------------

    /// Reassemble the image into file bytes. Unmodified images round-trip
    /// exactly. If relocations changed, the table is rewritten in place when
    /// it still fits its original slot; otherwise emission fails with
    /// [`PeError::LayoutOverflow`] and the caller must call
    /// [`PeImage::place_relocation_blob`] first.
    pub fn emit(&self) -> Result<Vec<u8>, PeError> {
        let mut sections = self.sections.clone();
        let mut reloc_dir = self.reloc_dir;

        if self.relocs_dirty {
            let blob = self.serialize_relocations();
            let (dir_rva, dir_cap) = self.reloc_dir.ok_or_else(|| {
                PeError::LayoutOverflow(
                    "image has no relocation directory to hold edited relocations".to_string(),
                )
            })?;
            if blob.len() as u32 > dir_cap {
                return Err(PeError::LayoutOverflow(
                    "edited relocation table outgrew its slot; place it explicitly".to_string(),
                ));
            }
            let idx = self.section_containing(dir_rva).ok_or_else(|| {
                PeError::MalformedHeader("relocation directory outside sections".to_string())
            })?;
            let off = (dir_rva - sections[idx].rva) as usize;
            if off + dir_cap as usize > sections[idx].raw_data.len() {
                return Err(PeError::MalformedHeader(
                    "relocation directory outside raw data".to_string(),
                ));
            }
            sections[idx].raw_data[off..off + dir_cap as usize].fill(0);
            sections[idx].raw_data[off..off + blob.len()].copy_from_slice(&blob);
            reloc_dir = Some((dir_rva, blob.len() as u32));
        }

        let file_end = sections
            .iter()
            .map(|s| s.raw_ptr as usize + s.raw_data.len())
            .max()
            .unwrap_or(0)
            .max(self.size_of_headers as usize);
        let mut out = vec![0u8; file_end];
        out[..self.header.len()].copy_from_slice(&self.header);
        for s in &sections {
            let p = s.raw_ptr as usize;
            out[p..p + s.raw_data.len()].copy_from_slice(&s.raw_data);
        }
        out.extend_from_slice(&self.overlay);

        // ---------- header patches ----------
        let coff = self.pe_offset + 4;
        wr_u16(&mut out, coff + 2, sections.len() as u16);
        let size_of_image = sections
            .iter()
            .map(|s| s.rva + align_up(s.virtual_span().max(1), self.section_alignment))
            .max()
            .unwrap_or(self.size_of_headers);
        wr_u32(&mut out, self.opt_offset + 56, size_of_image);
        if self.num_dirs > 5 {
            let (r, sz) = reloc_dir.unwrap_or((0, 0));
            wr_u32(&mut out, self.opt_offset + 96 + 5 * 8, r);
            wr_u32(&mut out, self.opt_offset + 96 + 5 * 8 + 4, sz);
        }
        let table_off = self.opt_offset + self.opt_size;
        for (i, s) in sections.iter().enumerate() {
            let row = table_off + i * SECTION_ROW_LEN;
            out[row..row + 8].copy_from_slice(&s.name);
            wr_u32(&mut out, row + 8, s.virtual_size);
            wr_u32(&mut out, row + 12, s.rva);
            wr_u32(&mut out, row + 16, s.raw_data.len() as u32);
            wr_u32(&mut out, row + 20, if s.raw_data.is_empty() { 0 } else { s.raw_ptr });
            wr_u32(&mut out, row + 24, 0);
            wr_u32(&mut out, row + 28, 0);
            wr_u16(&mut out, row + 32, 0);
            wr_u16(&mut out, row + 34, 0);
            wr_u32(&mut out, row + 36, s.characteristics);
        }

        // ---------- checksum ----------
        let ck_off = self.opt_offset + 64;
        if self.checksum_present {
            wr_u32(&mut out, ck_off, 0);
            let ck = pe_checksum(&out, ck_off);
            wr_u32(&mut out, ck_off, ck);
        } else {
            wr_u32(&mut out, ck_off, 0);
        }
        Ok(out)
    }
}

/// The standard PE checksum computed over `data` with the 4-byte field at
/// `checksum_off` excluded.
pub(crate) fn checksum_of(data: &[u8], checksum_off: usize) -> u32 {
    pe_checksum(data, checksum_off)
}

/// The standard PE checksum: ones-complement-style 16-bit folded sum over the
/// whole file with the checksum field excluded, plus the file length.
fn pe_checksum(data: &[u8], checksum_off: usize) -> u32 {
    let mut sum: u64 = 0;
    let mut i = 0usize;
    while i < data.len() {
        if i == checksum_off {
            i += 4;
            continue;
        }
        let lo = data[i] as u64;
        let hi = if i + 1 < data.len() { data[i + 1] as u64 } else { 0 };
        sum += lo | (hi << 8);
        i += 2;
    }
    while sum >> 16 != 0 {
        sum = (sum & 0xFFFF) + (sum >> 16);
    }
    (sum as u32).wrapping_add(data.len() as u32)
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    struct SecSpec {
        name: &'static [u8],
        rva: u32,
        chars: u32,
        content: Vec<u8>,
    }

    struct Tweaks {
        machine: u16,
        opt_magic: u16,
        checksum: u32,
        size_of_headers: u32,
        entry: u32,
        reloc_dir: (u32, u32),
        import_dir: (u32, u32),
    }

    impl Default for Tweaks {
        fn default() -> Self {
            Tweaks {
                machine: MACHINE_I386,
                opt_magic: OPT_MAGIC_PE32,
                checksum: 0,
                size_of_headers: 0x400,
                entry: 0x1000,
                reloc_dir: (0, 0),
                import_dir: (0, 0),
            }
        }
    }

    /// Hand-assembled PE32 used as the reference input for parser tests.
    /// Section raw pointers are assigned sequentially after the headers.
    fn build_pe(specs: &[SecSpec], t: &Tweaks) -> Vec<u8> {
        let fa = 0x200u32;
        let mut rows = Vec::new();
        let mut cursor = t.size_of_headers;
        for s in specs {
            let declared = align_up(s.content.len().max(1) as u32, fa);
            rows.push((s, cursor, declared));
            cursor += declared;
        }
        let mut out = vec![0u8; cursor as usize];
        out[0] = b'M';
        out[1] = b'Z';
        wr_u32(&mut out, 0x3C, 0x40);
        out[0x40..0x44].copy_from_slice(b"PE\0\0");
        let coff = 0x44;
        wr_u16(&mut out, coff, t.machine);
        wr_u16(&mut out, coff + 2, specs.len() as u16);
        wr_u16(&mut out, coff + 16, 0xE0);
        wr_u16(&mut out, coff + 18, 0x0102);
        let opt = 0x58;
        wr_u16(&mut out, opt, t.opt_magic);
        wr_u32(&mut out, opt + 16, t.entry);
        wr_u32(&mut out, opt + 28, 0x0040_0000);
        wr_u32(&mut out, opt + 32, 0x1000);
        wr_u32(&mut out, opt + 36, fa);
        let size_of_image = rows
            .iter()
            .map(|(s, _, d)| s.rva + align_up((s.content.len() as u32).max(*d).max(1), 0x1000))
            .max()
            .unwrap_or(0x1000);
        wr_u32(&mut out, opt + 56, size_of_image);
        wr_u32(&mut out, opt + 60, t.size_of_headers);
        wr_u32(&mut out, opt + 64, t.checksum);
        wr_u16(&mut out, opt + 68, 1);
        wr_u32(&mut out, opt + 92, 16);
        wr_u32(&mut out, opt + 96 + 8, t.import_dir.0);
        wr_u32(&mut out, opt + 96 + 12, t.import_dir.1);
        wr_u32(&mut out, opt + 96 + 40, t.reloc_dir.0);
        wr_u32(&mut out, opt + 96 + 44, t.reloc_dir.1);
        let table = opt + 0xE0;
        for (i, (s, ptr, declared)) in rows.iter().enumerate() {
            let row = table + i * SECTION_ROW_LEN;
            out[row..row + s.name.len()].copy_from_slice(s.name);
            wr_u32(&mut out, row + 8, s.content.len() as u32);
            wr_u32(&mut out, row + 12, s.rva);
            wr_u32(&mut out, row + 16, *declared);
            wr_u32(&mut out, row + 20, *ptr);
            wr_u32(&mut out, row + 36, s.chars);
            let p = *ptr as usize;
            out[p..p + s.content.len()].copy_from_slice(&s.content);
        }
        out
    }

    /// One relocation block per entry; deliberately not the grouped layout
    /// `serialize_relocations` produces, so parsing is tested independently.
    fn loose_reloc_blob(rvas: &[u32]) -> Vec<u8> {
        let mut b = Vec::new();
        for &rva in rvas {
            b.extend_from_slice(&(rva & !0xFFF).to_le_bytes());
            b.extend_from_slice(&12u32.to_le_bytes());
            b.extend_from_slice(&(((RELOC_HIGHLOW as u32) << 12 | (rva & 0xFFF)) as u16).to_le_bytes());
            b.extend_from_slice(&0u16.to_le_bytes());
        }
        b
    }

    fn two_section_image(reloc_rvas: &[u32]) -> Vec<u8> {
        let blob = loose_reloc_blob(reloc_rvas);
        let dir = (0x2000, blob.len() as u32);
        build_pe(
            &[
                SecSpec {
                    name: b".text\0\0\0",
                    rva: 0x1000,
                    chars: SCN_CNT_CODE | SCN_MEM_READ | SCN_MEM_EXECUTE | SCN_MEM_NOT_PAGED,
                    content: vec![0x90; 0x40],
                },
                SecSpec {
                    name: b".reloc\0\0",
                    rva: 0x2000,
                    chars: SCN_CNT_INITIALIZED_DATA | SCN_MEM_READ | SCN_MEM_DISCARDABLE,
                    content: blob,
                },
            ],
            &Tweaks {
                reloc_dir: dir,
                ..Tweaks::default()
            },
        )
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let bytes = two_section_image(&[0x1004, 0x1010, 0x1022]);
        let img = PeImage::parse(&bytes).unwrap();
        assert_eq!(img.emit().unwrap(), bytes);
    }

    #[test]
    fn round_trip_preserves_overlay() {
        let mut bytes = two_section_image(&[0x1004]);
        bytes.extend_from_slice(b"overlay-data");
        let img = PeImage::parse(&bytes).unwrap();
        assert_eq!(img.emit().unwrap(), bytes);
    }

    #[test]
    fn parse_reads_relocations_sorted() {
        let bytes = two_section_image(&[0x1022, 0x1004, 0x1010]);
        let img = PeImage::parse(&bytes).unwrap();
        let rvas: Vec<u32> = img.relocations().iter().map(|e| e.rva).collect();
        assert_eq!(rvas, vec![0x1004, 0x1010, 0x1022]);
        assert!(img.has_relocation_at(0x1010));
        assert!(!img.has_relocation_at(0x1011));
    }

    #[test]
    fn rejects_bad_signatures_and_flavors() {
        let good = two_section_image(&[]);

        let mut b = good.clone();
        b[0] = b'X';
        assert!(matches!(PeImage::parse(&b), Err(PeError::MalformedHeader(_))));

        let b = build_pe(
            &[SecSpec {
                name: b".text\0\0\0",
                rva: 0x1000,
                chars: SCN_MEM_READ | SCN_MEM_EXECUTE,
                content: vec![0x90; 4],
            }],
            &Tweaks {
                machine: 0x8664,
                ..Tweaks::default()
            },
        );
        assert!(matches!(PeImage::parse(&b), Err(PeError::Unsupported(_))));

        let b = build_pe(
            &[SecSpec {
                name: b".text\0\0\0",
                rva: 0x1000,
                chars: SCN_MEM_READ | SCN_MEM_EXECUTE,
                content: vec![0x90; 4],
            }],
            &Tweaks {
                opt_magic: OPT_MAGIC_PE32PLUS,
                ..Tweaks::default()
            },
        );
        assert!(matches!(PeImage::parse(&b), Err(PeError::Unsupported(_))));
    }

    #[test]
    fn rejects_overlapping_sections() {
        let b = build_pe(
            &[
                SecSpec {
                    name: b".a\0\0\0\0\0\0",
                    rva: 0x1000,
                    chars: SCN_MEM_READ | SCN_MEM_EXECUTE,
                    content: vec![0x90; 0x1800],
                },
                SecSpec {
                    name: b".b\0\0\0\0\0\0",
                    rva: 0x2000,
                    chars: SCN_MEM_READ,
                    content: vec![0; 0x10],
                },
            ],
            &Tweaks::default(),
        );
        assert!(matches!(PeImage::parse(&b), Err(PeError::MalformedHeader(_))));
    }

    #[test]
    fn rejects_entry_point_outside_executable_code() {
        let mk = |entry| {
            build_pe(
                &[
                    SecSpec {
                        name: b".text\0\0\0",
                        rva: 0x1000,
                        chars: SCN_MEM_READ | SCN_MEM_EXECUTE,
                        content: vec![0x90; 0x10],
                    },
                    SecSpec {
                        name: b".data\0\0\0",
                        rva: 0x2000,
                        chars: SCN_MEM_READ | SCN_MEM_WRITE,
                        content: vec![0; 0x10],
                    },
                ],
                &Tweaks {
                    entry,
                    ..Tweaks::default()
                },
            )
        };
        assert!(matches!(
            PeImage::parse(&mk(0x2004)),
            Err(PeError::MalformedHeader(_))
        ));
        assert!(matches!(
            PeImage::parse(&mk(0x9000)),
            Err(PeError::MalformedHeader(_))
        ));
        assert!(PeImage::parse(&mk(0)).is_ok());
    }

    #[test]
    fn rejects_non_highlow_relocations() {
        let mut blob = loose_reloc_blob(&[0x1004]);
        // Flip the entry kind from HIGHLOW to DIR64.
        blob[8] &= 0x0F;
        blob[9] = (blob[9] & 0x0F) | 0xA0;
        let dir = (0x2000, blob.len() as u32);
        let b = build_pe(
            &[
                SecSpec {
                    name: b".text\0\0\0",
                    rva: 0x1000,
                    chars: SCN_MEM_READ | SCN_MEM_EXECUTE,
                    content: vec![0x90; 0x10],
                },
                SecSpec {
                    name: b".reloc\0\0",
                    rva: 0x2000,
                    chars: SCN_MEM_READ,
                    content: blob,
                },
            ],
            &Tweaks {
                reloc_dir: dir,
                ..Tweaks::default()
            },
        );
        let err = PeImage::parse(&b).unwrap_err();
        assert!(matches!(err, PeError::MalformedHeader(ref m) if m.contains("HIGHLOW")));
    }

    #[test]
    fn rejects_duplicate_relocations() {
        let b = two_section_image(&[0x1004, 0x1004]);
        assert!(matches!(PeImage::parse(&b), Err(PeError::MalformedHeader(_))));
    }

    #[test]
    fn rejects_nonzero_gap_between_sections() {
        // Shift the second section's raw data from 0x600 to 0x800, leaving a
        // file gap the model would have to reproduce on emit.
        let shift_reloc_raw = || {
            let mut b = two_section_image(&[0x1004]);
            b.resize(b.len() + 0x200, 0);
            let moved: Vec<u8> = b[0x600..0x800].to_vec();
            b[0x800..0xA00].copy_from_slice(&moved);
            b[0x600..0x800].fill(0);
            // Second section row: raw pointer field.
            let row = 0x58 + 0xE0 + SECTION_ROW_LEN;
            wr_u32(&mut b, row + 20, 0x800);
            b
        };
        let clean = shift_reloc_raw();
        assert!(PeImage::parse(&clean).is_ok(), "zero-filled gap is fine");
        let mut dirty = shift_reloc_raw();
        dirty[0x700] = 0xAB;
        assert!(matches!(
            PeImage::parse(&dirty),
            Err(PeError::MalformedHeader(ref m)) if m.contains("padding")
        ));
    }

    #[test]
    fn checksum_known_answers() {
        // 8 bytes, no field skipped: words 1,2,3,4 sum to 10, plus length 8.
        let data = [1u8, 0, 2, 0, 3, 0, 4, 0];
        assert_eq!(pe_checksum(&data, usize::MAX), 18);
        // Skipping the first dword removes words 1 and 2.
        assert_eq!(pe_checksum(&data, 0), 3 + 4 + 8);
        // Carry folding: 0xFFFF + 0xFFFF = 0x1FFFE folds to 0xFFFF.
        let data = [0xFF, 0xFF, 0xFF, 0xFF];
        assert_eq!(pe_checksum(&data, usize::MAX), 0xFFFF + 4);
    }

    #[test]
    fn checksum_recomputed_only_when_originally_present() {
        let with = {
            let t = Tweaks {
                checksum: 0xDEAD_BEEF, // wrong on purpose
                ..Tweaks::default()
            };
            build_pe(
                &[SecSpec {
                    name: b".text\0\0\0",
                    rva: 0x1000,
                    chars: SCN_MEM_READ | SCN_MEM_EXECUTE,
                    content: vec![0x90; 0x10],
                }],
                &t,
            )
        };
        let img = PeImage::parse(&with).unwrap();
        let out = img.emit().unwrap();
        let ck = rd_u32(&out, 0x58 + 64).unwrap();
        assert_ne!(ck, 0xDEAD_BEEF);
        assert_ne!(ck, 0);
        // Independent recomputation over the emitted file agrees.
        let mut probe = out.clone();
        wr_u32(&mut probe, 0x58 + 64, 0);
        assert_eq!(ck, pe_checksum(&probe, 0x58 + 64));
        // Emission is a fixed point once the checksum is right.
        let img2 = PeImage::parse(&out).unwrap();
        assert_eq!(img2.emit().unwrap(), out);
    }

    #[test]
    fn serialize_relocations_exact_bytes() {
        let bytes = two_section_image(&[0x1004, 0x1008, 0x2000]);
        let img = PeImage::parse(&bytes).unwrap();
        let blob = img.serialize_relocations();
        #[rustfmt::skip]
        let expect = vec![
            0x00, 0x10, 0x00, 0x00, 0x0C, 0x00, 0x00, 0x00,
            0x04, 0x30, 0x08, 0x30,
            0x00, 0x20, 0x00, 0x00, 0x0C, 0x00, 0x00, 0x00,
            0x00, 0x30, 0x00, 0x00,
        ];
        assert_eq!(blob, expect);
    }

    #[test]
    fn erase_relocations_matches_naive_filter() {
        // Seeded xorshift so the case set is stable.
        let mut state = 0x2545_F491_4F6C_DD1Du64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state
        };
        for _ in 0..200 {
            let mut rvas: Vec<u32> = (0..20)
                .map(|_| 0x1000 + (next() % 0x3E) as u32)
                .collect();
            rvas.sort();
            rvas.dedup();
            let bytes = two_section_image(&rvas);
            let mut img = PeImage::parse(&bytes).unwrap();
            let start = 0x1000 + (next() % 0x40) as u32;
            let len = (next() % 12) as u32;
            let expected: Vec<u32> = rvas
                .iter()
                .copied()
                .filter(|&r| {
                    let overlaps = r < start + len && r + 4 > start;
                    !overlaps
                })
                .collect();
            let removed = img.erase_relocations_in(start, len);
            let got: Vec<u32> = img.relocations().iter().map(|e| e.rva).collect();
            assert_eq!(got, expected, "erase [{start:#x}..+{len:#x}) over {rvas:x?}");
            assert_eq!(removed, rvas.len() - expected.len());
        }
    }

    #[test]
    fn emit_rewrites_shrunken_table_in_place() {
        let bytes = two_section_image(&[0x1004, 0x1010, 0x1022]);
        let mut img = PeImage::parse(&bytes).unwrap();
        assert_eq!(img.erase_relocations_in(0x1010, 4), 1);
        let out = img.emit().unwrap();
        let re = PeImage::parse(&out).unwrap();
        let rvas: Vec<u32> = re.relocations().iter().map(|e| e.rva).collect();
        assert_eq!(rvas, vec![0x1004, 0x1022]);
        // Directory shrank but stayed put.
        assert_eq!(re.reloc_dir().unwrap().0, 0x2000);
    }

    #[test]
    fn emit_refuses_grown_table_until_placed() {
        let bytes = two_section_image(&[0x1004]);
        let mut img = PeImage::parse(&bytes).unwrap();
        // New page => new block => blob outgrows its 12-byte slot.
        img.add_relocation(0x2F80).unwrap();
        assert!(matches!(img.emit(), Err(PeError::LayoutOverflow(_))));
        let last = img.sections().len() - 1;
        let (new_rva, new_len) = img.place_relocation_blob(last).unwrap();
        assert!(new_rva >= 0x2000 + 12);
        assert_eq!(new_len, 24);
        let out = img.emit().unwrap();
        let re = PeImage::parse(&out).unwrap();
        let rvas: Vec<u32> = re.relocations().iter().map(|e| e.rva).collect();
        assert_eq!(rvas, vec![0x1004, 0x2F80]);
        assert_eq!(re.reloc_dir().unwrap(), (new_rva, new_len));
    }

    #[test]
    fn expand_grows_reloc_section_when_last() {
        let bytes = two_section_image(&[0x1004]);
        let mut img = PeImage::parse(&bytes).unwrap();
        let idx = img.expand_host_section(0x800).unwrap();
        assert_eq!(idx, 1);
        let s = &img.sections()[idx];
        assert!(s.executable() && !s.pageable() && !s.writable());
        assert!(s.virtual_size >= 0x800);
        let out = img.emit().unwrap();
        let re = PeImage::parse(&out).unwrap();
        assert!(re.sections()[1].executable());
        assert_eq!(re.sections().len(), 2);
    }

    #[test]
    fn expand_appends_fresh_section_when_reloc_not_last() {
        let blob = loose_reloc_blob(&[0x2004]);
        let dir = (0x1000, blob.len() as u32);
        let b = build_pe(
            &[
                SecSpec {
                    name: b".reloc\0\0",
                    rva: 0x1000,
                    chars: SCN_MEM_READ,
                    content: blob,
                },
                SecSpec {
                    name: b".text\0\0\0",
                    rva: 0x2000,
                    chars: SCN_MEM_READ | SCN_MEM_EXECUTE,
                    content: vec![0x90; 0x10],
                },
            ],
            &Tweaks {
                entry: 0x2000,
                reloc_dir: dir,
                ..Tweaks::default()
            },
        );
        let mut img = PeImage::parse(&b).unwrap();
        let idx = img.expand_host_section(0x100).unwrap();
        assert_eq!(idx, 2);
        let s = &img.sections()[2];
        assert_eq!(&s.name, HOST_SECTION_NAME);
        assert_eq!(s.rva, 0x3000);
        assert_eq!(s.rva % 0x1000, 0);
        assert!(s.executable() && !s.pageable());
        let rva = img.append_to_section(2, &[0xCC; 0x20]).unwrap();
        assert_eq!(rva, 0x3000);
        let out = img.emit().unwrap();
        let re = PeImage::parse(&out).unwrap();
        assert_eq!(re.sections().len(), 3);
        assert_eq!(re.read_bytes(0x3000, 0x20).unwrap(), &[0xCC; 0x20]);
    }

    #[test]
    fn expand_rejects_zero_and_full_table() {
        let bytes = two_section_image(&[]);
        let mut img = PeImage::parse(&bytes).unwrap();
        assert!(matches!(
            img.expand_host_section(0),
            Err(PeError::InvalidRequest(_))
        ));

        // Five sections with a 0x200-byte header leave no row slack.
        let mut specs = Vec::new();
        let names: [&'static [u8]; 5] = [b".s0", b".s1", b".s2", b".s3", b".s4"];
        for (i, n) in names.iter().enumerate() {
            specs.push(SecSpec {
                name: n,
                rva: 0x1000 * (i as u32 + 1),
                chars: if i == 0 {
                    SCN_MEM_READ | SCN_MEM_EXECUTE
                } else {
                    SCN_MEM_READ
                },
                content: vec![if i == 0 { 0x90 } else { 0 }; 8],
            });
        }
        let b = build_pe(
            &specs,
            &Tweaks {
                size_of_headers: 0x200,
                ..Tweaks::default()
            },
        );
        let mut img = PeImage::parse(&b).unwrap();
        assert!(matches!(
            img.expand_host_section(0x100),
            Err(PeError::LayoutOverflow(_))
        ));
    }

    #[test]
    fn append_pads_to_file_alignment_and_updates_sizes() {
        let bytes = two_section_image(&[0x1004]);
        let mut img = PeImage::parse(&bytes).unwrap();
        let idx = img.expand_host_section(0x1000).unwrap();
        let base = img.sections()[idx].raw_data.len() as u32 + img.sections()[idx].rva;
        let r1 = img.append_to_section(idx, &[1, 2, 3]).unwrap();
        assert_eq!(r1, base);
        assert_eq!(img.sections()[idx].raw_data.len() % 0x200, 0);
        let r2 = img.append_to_section(idx, &[4; 5]).unwrap();
        assert_eq!(r2 % 0x200, base % 0x200);
        assert!(r2 > r1);
        let out = img.emit().unwrap();
        let re = PeImage::parse(&out).unwrap();
        assert_eq!(re.read_bytes(r1, 3).unwrap(), &[1, 2, 3]);
        assert_eq!(re.read_bytes(r2, 5).unwrap(), &[4; 5]);
    }

    #[test]
    fn monitor_slot_trailer_round_trips() {
        let bytes = two_section_image(&[0x1004]);
        let mut img = PeImage::parse(&bytes).unwrap();
        let idx = img.expand_host_section(0x100).unwrap();
        let start = img.sections()[idx].rva + img.sections()[idx].raw_data.len() as u32;
        let mut payload = vec![0u8; 8]; // gate + filter slots
        payload.extend_from_slice(&[0x90; 0x10]);
        payload.extend_from_slice(&start.to_le_bytes());
        payload.extend_from_slice(&(start + 4).to_le_bytes());
        payload.extend_from_slice(HOST_TRAILER_MAGIC);
        img.append_to_section(idx, &payload).unwrap();
        let out = img.emit().unwrap();
        let re = PeImage::parse(&out).unwrap();
        let slots = re.find_monitor_slots().unwrap();
        assert_eq!(slots.gate_rva, start);
        assert_eq!(slots.filter_rva, start + 4);
        assert_eq!(slots.host_section, idx);
        // An ordinary image has no trailer.
        assert!(PeImage::parse(&bytes).unwrap().find_monitor_slots().is_none());
    }

    #[test]
    fn imports_parsed_with_slots() {
        let idata_rva = 0x3000u32;
        let mut d = vec![0u8; 0x90];
        // descriptor 0
        wr_u32(&mut d, 0, idata_rva + 0x28); // OriginalFirstThunk
        wr_u32(&mut d, 12, idata_rva + 0x50); // name
        wr_u32(&mut d, 16, idata_rva + 0x38); // FirstThunk (IAT)
        // lookup + IAT arrays
        for off in [0x28usize, 0x38] {
            wr_u32(&mut d, off, idata_rva + 0x60);
            wr_u32(&mut d, off + 4, idata_rva + 0x70);
        }
        d[0x50..0x58].copy_from_slice(b"HAL.dll\0");
        wr_u16(&mut d, 0x60, 1);
        d[0x62..0x6D].copy_from_slice(b"KeBugCheck\0");
        wr_u16(&mut d, 0x70, 2);
        d[0x72..0x81].copy_from_slice(b"IoCreateDevice\0");

        let b = build_pe(
            &[
                SecSpec {
                    name: b".text\0\0\0",
                    rva: 0x1000,
                    chars: SCN_MEM_READ | SCN_MEM_EXECUTE,
                    content: vec![0x90; 0x10],
                },
                SecSpec {
                    name: b".idata\0\0",
                    rva: idata_rva,
                    chars: SCN_MEM_READ,
                    content: d,
                },
            ],
            &Tweaks {
                import_dir: (idata_rva, 40),
                ..Tweaks::default()
            },
        );
        let img = PeImage::parse(&b).unwrap();
        assert_eq!(img.imports().len(), 2);
        assert_eq!(img.imports()[0].library_name, "HAL.dll");
        assert_eq!(img.imports()[0].symbol_name, "KeBugCheck");
        assert_eq!(img.imports()[0].iat_slot_rva, idata_rva + 0x38);
        assert_eq!(img.imports()[1].symbol_name, "IoCreateDevice");
        assert!(img.is_iat_slot(idata_rva + 0x3C));
        assert!(!img.is_iat_slot(idata_rva + 0x40));
        assert_eq!(img.emit().unwrap(), b);
    }

    #[test]
    fn align_up_basics() {
        assert_eq!(align_up(0, 0x200), 0);
        assert_eq!(align_up(1, 0x200), 0x200);
        assert_eq!(align_up(0x200, 0x200), 0x200);
        assert_eq!(align_up(0x201, 0x200), 0x400);
    }
}
