//! Byte-level field splitter for a one-byte-opcode subset of x86-64.
//!
//! Supported: legacy prefixes `26 2E 36 3E 64 65 66 67 F0` (each at most
//! once, at most one segment override), followed by a one-byte opcode from
//! the table below, its ModRM/SIB/displacement as the ModRM byte dictates,
//! and a fixed-size immediate. Decoding assumes 64-bit mode without REX.
//! Everything else (REX, VEX, `0F` escapes, `F2`/`F3`, opcodes invalid in
//! 64-bit mode, `ENTER`) is rejected as unsupported.

use super::{split_233, InstructionRecord, Segment};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Imm {
    None,
    Byte,
    Word,
    /// 4 bytes, or 2 under an operand-size override.
    Z,
    /// Only for the `TEST` forms (`reg` 0 or 1) of `F6`/`F7`.
    TestByte,
    TestZ,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Entry {
    Prefix,
    Unsupported(&'static str),
    Op {
        modrm: bool,
        imm: Imm,
    },
    /// `A0`-`A3`: absolute memory offset, 8 bytes (4 under `67`).
    Moffs,
    /// Near relative `CALL`/`JMP` with a 32-bit displacement; `66` not supported.
    Rel32,
}

fn entry(op: u8) -> Entry {
    use Entry::*;
    let plain = Op {
        modrm: false,
        imm: Imm::None,
    };
    let rm = |imm| Op { modrm: true, imm };
    let imm = |imm| Op { modrm: false, imm };
    match op {
        0x26 | 0x2E | 0x36 | 0x3E | 0x64 | 0x65 | 0x66 | 0x67 | 0xF0 => Prefix,
        0x0F => Unsupported("two-byte opcode escape 0F"),
        0x06 | 0x07 | 0x0E | 0x16 | 0x17 | 0x1E | 0x1F | 0x27 | 0x2F | 0x37 | 0x3F => {
            Unsupported("opcode invalid in 64-bit mode")
        }
        0x00..=0x3F => match op & 7 {
            0..=3 => rm(Imm::None),
            4 => imm(Imm::Byte),
            _ => imm(Imm::Z),
        },
        0x40..=0x4F => Unsupported("REX prefix"),
        0x50..=0x5F => plain,
        0x60..=0x62 => Unsupported("opcode invalid in 64-bit mode"),
        0x63 => rm(Imm::None),
        0x68 => imm(Imm::Z),
        0x69 => rm(Imm::Z),
        0x6A => imm(Imm::Byte),
        0x6B => rm(Imm::Byte),
        0x6C..=0x6F => plain,
        0x70..=0x7F => imm(Imm::Byte),
        0x80 | 0x83 => rm(Imm::Byte),
        0x81 => rm(Imm::Z),
        0x82 => Unsupported("opcode invalid in 64-bit mode"),
        0x84..=0x8F => rm(Imm::None),
        0x90..=0x99 | 0x9B..=0x9F => plain,
        0x9A => Unsupported("opcode invalid in 64-bit mode"),
        0xA0..=0xA3 => Moffs,
        0xA4..=0xA7 | 0xAA..=0xAF => plain,
        0xA8 => imm(Imm::Byte),
        0xA9 => imm(Imm::Z),
        0xB0..=0xB7 => imm(Imm::Byte),
        0xB8..=0xBF => imm(Imm::Z),
        0xC0 | 0xC1 => rm(Imm::Byte),
        0xC2 | 0xCA => imm(Imm::Word),
        0xC3 | 0xC9 | 0xCB | 0xCC | 0xCF => plain,
        0xC4 | 0xC5 => Unsupported("VEX prefix"),
        0xC6 => rm(Imm::Byte),
        0xC7 => rm(Imm::Z),
        0xC8 => Unsupported("ENTER carries two immediates"),
        0xCD => imm(Imm::Byte),
        0xCE | 0xD4 | 0xD5 | 0xD6 => Unsupported("opcode invalid in 64-bit mode"),
        0xD0..=0xD3 | 0xD8..=0xDF => rm(Imm::None),
        0xD7 => plain,
        0xE0..=0xE7 | 0xEB => imm(Imm::Byte),
        0xE8 | 0xE9 => Rel32,
        0xEA => Unsupported("opcode invalid in 64-bit mode"),
        0xEC..=0xEF | 0xF1 | 0xF4 | 0xF5 | 0xF8..=0xFD => plain,
        0xF2 | 0xF3 => Unsupported("REP prefixes are outside the encoded prefix set"),
        0xF6 => rm(Imm::TestByte),
        0xF7 => rm(Imm::TestZ),
        0xFE | 0xFF => rm(Imm::None),
    }
}

/// Opcode-specific constraints on the ModRM byte.
fn modrm_supported(op: u8, modrm: u8) -> std::result::Result<(), &'static str> {
    let (md, reg, _) = split_233(modrm);
    let ok = match op {
        0x8C => reg <= 5,
        0x8E => reg <= 5 && reg != 1,
        0x8D => md != 3,
        0x8F | 0xC6 | 0xC7 => reg == 0,
        0xFE => reg <= 1,
        0xFF => reg != 7 && !(md == 3 && (reg == 3 || reg == 5)),
        0xD8..=0xDF => x87_supported(op, modrm),
        _ => true,
    };
    if ok {
        Ok(())
    } else {
        Err("ModRM form outside the supported subset")
    }
}

/// Rejects the reserved slots of the x87 escape opcodes.
fn x87_supported(op: u8, modrm: u8) -> bool {
    let (md, reg, _) = split_233(modrm);
    if md != 3 {
        return !matches!((op, reg), (0xD9, 1) | (0xDB, 4) | (0xDB, 6) | (0xDD, 5));
    }
    match (op, reg) {
        (0xD9, 2) => modrm == 0xD0,
        (0xD9, 4) => matches!(modrm, 0xE0 | 0xE1 | 0xE4 | 0xE5),
        (0xD9, 5) => modrm != 0xEF,
        (0xDA, 4) | (0xDA, 6) | (0xDA, 7) | (0xDB, 7) | (0xDD, 6) | (0xDD, 7) | (0xDF, 7) => false,
        (0xDA, 5) => modrm == 0xE9,
        (0xDB, 4) => modrm <= 0xE4,
        (0xDE, 3) => modrm == 0xD9,
        (0xDF, 4) => modrm == 0xE0,
        _ => true,
    }
}

fn imm_width(imm: Imm, modrm: Option<u8>, operand_size: bool) -> usize {
    let z = if operand_size { 2 } else { 4 };
    let test = || modrm.map(|m| split_233(m).1 <= 1).unwrap_or(false);
    match imm {
        Imm::None => 0,
        Imm::Byte => 1,
        Imm::Word => 2,
        Imm::Z => z,
        Imm::TestByte if test() => 1,
        Imm::TestZ if test() => z,
        Imm::TestByte | Imm::TestZ => 0,
    }
}

/// Displacement width implied by a ModRM byte and (when present) its SIB.
fn modrm_disp_width(modrm: u8, sib: Option<u8>) -> usize {
    let (md, _, rm) = split_233(modrm);
    match md {
        1 => 1,
        2 => 4,
        0 if rm == 5 => 4,
        0 if rm == 4 && sib.map(|s| s & 7 == 5).unwrap_or(false) => 4,
        _ => 0,
    }
}

fn needs_sib(modrm: u8) -> bool {
    let (md, _, rm) = split_233(modrm);
    md != 3 && rm == 4
}

fn read_signed(bytes: &[u8]) -> i64 {
    let mut buf = [0u8; 8];
    buf[..bytes.len()].copy_from_slice(bytes);
    let shift = 64 - 8 * bytes.len() as u32;
    (i64::from_le_bytes(buf) << shift) >> shift
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Unsupported(format!(
                "truncated instruction: missing {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02X}")).collect::<Vec<_>>().join(" ")
}

/// Decodes exactly one instruction.
pub fn split_bytes(bytes: &[u8]) -> Result<InstructionRecord> {
    let unsupported = |why: &str| Error::Unsupported(format!("{}: {why}", hex(bytes)));
    let mut rec = InstructionRecord::default();
    let mut cur = Cursor { bytes, pos: 0 };
    let mut seen = [false; 4];
    let opcode = loop {
        let b = *cur.take(1, "opcode")?.first().expect("one byte");
        if entry(b) != Entry::Prefix {
            break b;
        }
        let slot = match b {
            0x66 => 1,
            0x67 => 2,
            0xF0 => 3,
            _ => 0,
        };
        if seen[slot] {
            return Err(unsupported("repeated or conflicting prefix"));
        }
        seen[slot] = true;
        match b {
            0x66 => rec.operand_size = true,
            0x67 => rec.address_size = true,
            0xF0 => rec.lock = true,
            _ => rec.segment = Segment::from_prefix_byte(b).expect("segment prefix"),
        }
    };
    rec.opcode = opcode;

    match entry(opcode) {
        Entry::Prefix => unreachable!("prefix loop consumes prefixes"),
        Entry::Unsupported(why) => return Err(unsupported(why)),
        Entry::Moffs => {
            let w = if rec.address_size { 4 } else { 8 };
            rec.displacement = Some(read_signed(cur.take(w, "memory offset")?));
        }
        Entry::Rel32 => {
            if rec.operand_size {
                return Err(unsupported("operand-size override on near branch"));
            }
            rec.immediate = Some(read_signed(cur.take(4, "rel32")?));
        }
        Entry::Op { modrm, imm } => {
            if modrm {
                let m = cur.take(1, "ModRM")?[0];
                modrm_supported(opcode, m).map_err(unsupported)?;
                rec.modrm = Some(m);
                if needs_sib(m) {
                    rec.sib = Some(cur.take(1, "SIB")?[0]);
                }
                let dw = modrm_disp_width(m, rec.sib);
                if dw > 0 {
                    rec.displacement = Some(read_signed(cur.take(dw, "displacement")?));
                }
            }
            let iw = imm_width(imm, rec.modrm, rec.operand_size);
            if iw > 0 {
                rec.immediate = Some(read_signed(cur.take(iw, "immediate")?));
            }
        }
    }
    if cur.pos != bytes.len() {
        return Err(unsupported("trailing bytes after instruction"));
    }
    Ok(rec)
}

/// Parses whitespace-separated hex bytes such as `"F0 01 D8"` and decodes them.
pub fn split_hex(text: &str) -> Result<InstructionRecord> {
    split_bytes(&parse_hex(text)?)
}

pub fn parse_hex(text: &str) -> Result<Vec<u8>> {
    let compact: String = text.chars().filter(|c| !c.is_whitespace()).collect();
    if !compact.len().is_multiple_of(2) {
        return Err(Error::invalid(format!("odd number of hex digits in `{text}`")));
    }
    (0..compact.len())
        .step_by(2)
        .map(|i| {
            u8::from_str_radix(&compact[i..i + 2], 16).map_err(|_| Error::invalid(format!("bad hex byte in `{text}`")))
        })
        .collect()
}

fn push_signed(out: &mut Vec<u8>, value: i64, width: usize, what: &str) -> Result<()> {
    let bits = 8 * width as u32;
    if bits < 64 {
        let min = -(1i64 << (bits - 1));
        let max = (1i64 << (bits - 1)) - 1;
        if value < min || value > max {
            return Err(Error::InvalidRecord(format!(
                "{what} {value} does not fit in {width} byte(s)"
            )));
        }
    }
    out.extend_from_slice(&value.to_le_bytes()[..width]);
    Ok(())
}

/// Inverse of [`split_bytes`]: emits prefixes in the canonical order
/// segment, `66`, `67`, `F0`, then the opcode and its operands.
pub fn serialize_record(rec: &InstructionRecord) -> Result<Vec<u8>> {
    rec.validate()?;
    let mismatch = |what: &str| Error::InvalidRecord(format!("opcode {:02X}: {what}", rec.opcode));
    let mut out = Vec::new();
    out.extend(rec.segment.prefix_byte());
    if rec.operand_size {
        out.push(0x66);
    }
    if rec.address_size {
        out.push(0x67);
    }
    if rec.lock {
        out.push(0xF0);
    }
    out.push(rec.opcode);
    let (disp_w, imm_w) = match entry(rec.opcode) {
        Entry::Prefix | Entry::Unsupported(_) => return Err(mismatch("not in the supported subset")),
        Entry::Moffs => (if rec.address_size { 4 } else { 8 }, 0),
        Entry::Rel32 => (0, 4),
        Entry::Op { modrm, imm } => {
            match (modrm, rec.modrm) {
                (true, Some(m)) => {
                    out.push(m);
                    if needs_sib(m) != rec.sib.is_some() {
                        return Err(mismatch("SIB presence disagrees with ModRM"));
                    }
                    out.extend(rec.sib);
                }
                (false, None) => {}
                _ => return Err(mismatch("ModRM presence disagrees with opcode")),
            }
            let dw = rec.modrm.map(|m| modrm_disp_width(m, rec.sib)).unwrap_or(0);
            (dw, imm_width(imm, rec.modrm, rec.operand_size))
        }
    };
    match (disp_w, rec.displacement) {
        (0, None) => {}
        (w, Some(d)) if w > 0 => push_signed(&mut out, d, w, "displacement")?,
        _ => return Err(mismatch("displacement presence disagrees with addressing form")),
    }
    match (imm_w, rec.immediate) {
        (0, None) => {}
        (w, Some(i)) if w > 0 => push_signed(&mut out, i, w, "immediate")?,
        _ => return Err(mismatch("immediate presence disagrees with opcode")),
    }
    Ok(out)
}

/// Every `(opcode, modrm)` pair accepted by the splitter, with `modrm`
/// `None` for opcodes that take no ModRM byte. Used to enumerate the
/// supported subset.
pub fn supported_forms() -> Vec<(u8, Option<u8>)> {
    let mut forms = Vec::new();
    for op in 0..=255u8 {
        match entry(op) {
            Entry::Op { modrm: true, .. } => {
                for m in 0..=255u8 {
                    if modrm_supported(op, m).is_ok() {
                        forms.push((op, Some(m)));
                    }
                }
            }
            Entry::Op { modrm: false, .. } | Entry::Moffs | Entry::Rel32 => forms.push((op, None)),
            Entry::Prefix | Entry::Unsupported(_) => {}
        }
    }
    forms
}
