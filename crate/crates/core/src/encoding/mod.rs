//! Rule-based x86-64 instruction vectors.
//!
//! Each instruction becomes a 439-wide binary vector:
//!
//! | block        | width | content                                                  |
//! |--------------|-------|----------------------------------------------------------|
//! | prefix       | 10    | segment one-hot `[none, ES, CS, SS, DS, FS, GS]`, then `[0x66, 0x67, lock]` flags |
//! | opcode       | 256   | one-hot on the opcode byte                               |
//! | modrm        | 20    | `mod` one-hot-4, `reg` one-hot-8, `rm` one-hot-8         |
//! | sib          | 20    | `scale` one-hot-4, `index` one-hot-8, `base` one-hot-8   |
//! | displacement | 64    | two's-complement bits, least significant first           |
//! | immediate    | 64    | two's-complement bits, least significant first           |
//! | option       | 5     | presence of `[prefix, modrm, sib, displacement, immediate]` |
//!
//! Absent components leave their block at zero.

mod decode;
mod text;

pub use decode::{parse_hex, serialize_record, split_bytes, split_hex, supported_forms};
pub use text::{parse_blocks, write_blocks, BasicBlock};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PREFIX_WIDTH: usize = 10;
pub const OPCODE_WIDTH: usize = 256;
pub const MODRM_WIDTH: usize = 20;
pub const SIB_WIDTH: usize = 20;
pub const DISP_WIDTH: usize = 64;
pub const IMM_WIDTH: usize = 64;
pub const OPTION_WIDTH: usize = 5;

pub const PREFIX_OFFSET: usize = 0;
pub const OPCODE_OFFSET: usize = PREFIX_OFFSET + PREFIX_WIDTH;
pub const MODRM_OFFSET: usize = OPCODE_OFFSET + OPCODE_WIDTH;
pub const SIB_OFFSET: usize = MODRM_OFFSET + MODRM_WIDTH;
pub const DISP_OFFSET: usize = SIB_OFFSET + SIB_WIDTH;
pub const IMM_OFFSET: usize = DISP_OFFSET + DISP_WIDTH;
pub const OPTION_OFFSET: usize = IMM_OFFSET + IMM_WIDTH;
pub const ENCODED_WIDTH: usize = OPTION_OFFSET + OPTION_WIDTH;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Segment {
    #[default]
    None,
    ES,
    CS,
    SS,
    DS,
    FS,
    GS,
}

impl Segment {
    pub const ALL: [Segment; 7] = [
        Segment::None,
        Segment::ES,
        Segment::CS,
        Segment::SS,
        Segment::DS,
        Segment::FS,
        Segment::GS,
    ];

    /// Position inside the prefix one-hot.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn prefix_byte(self) -> Option<u8> {
        match self {
            Segment::None => None,
            Segment::ES => Some(0x26),
            Segment::CS => Some(0x2E),
            Segment::SS => Some(0x36),
            Segment::DS => Some(0x3E),
            Segment::FS => Some(0x64),
            Segment::GS => Some(0x65),
        }
    }

    pub fn from_prefix_byte(b: u8) -> Option<Segment> {
        Segment::ALL[1..].iter().copied().find(|s| s.prefix_byte() == Some(b))
    }
}

/// One instruction split into its encoding components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub segment: Segment,
    pub operand_size: bool,
    pub address_size: bool,
    pub lock: bool,
    pub opcode: u8,
    pub modrm: Option<u8>,
    pub sib: Option<u8>,
    pub displacement: Option<i64>,
    pub immediate: Option<i64>,
}

impl InstructionRecord {
    pub fn opcode(opcode: u8) -> Self {
        InstructionRecord {
            opcode,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sib.is_some() && self.modrm.is_none() {
            return Err(Error::InvalidRecord("SIB byte without ModRM".into()));
        }
        Ok(())
    }

    pub fn has_prefix(&self) -> bool {
        self.segment != Segment::None || self.operand_size || self.address_size || self.lock
    }
}

/// A 439-wide binary instruction vector.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedInstruction(Vec<f64>);

impl EncodedInstruction {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn block(&self, offset: usize, width: usize) -> &[f64] {
        &self.0[offset..offset + width]
    }
}

fn one_hot(out: &mut [f64], offset: usize, index: usize) {
    out[offset + index] = 1.0;
}

fn bits(out: &mut [f64], offset: usize, value: i64) {
    let pattern = value as u64;
    for i in 0..64 {
        out[offset + i] = ((pattern >> i) & 1) as f64;
    }
}

/// Splits a ModRM/SIB-style byte into its 2-3-3 fields.
pub fn split_233(byte: u8) -> (usize, usize, usize) {
    ((byte >> 6) as usize, ((byte >> 3) & 7) as usize, (byte & 7) as usize)
}

fn fields_233(out: &mut [f64], offset: usize, byte: u8) {
    let (hi, mid, lo) = split_233(byte);
    one_hot(out, offset, hi);
    one_hot(out, offset + 4, mid);
    one_hot(out, offset + 12, lo);
}

pub fn encode_instruction(rec: &InstructionRecord) -> EncodedInstruction {
    let mut v = vec![0.0; ENCODED_WIDTH];
    one_hot(&mut v, PREFIX_OFFSET, rec.segment.index());
    v[PREFIX_OFFSET + 7] = rec.operand_size as u8 as f64;
    v[PREFIX_OFFSET + 8] = rec.address_size as u8 as f64;
    v[PREFIX_OFFSET + 9] = rec.lock as u8 as f64;
    one_hot(&mut v, OPCODE_OFFSET, rec.opcode as usize);
    if let Some(m) = rec.modrm {
        fields_233(&mut v, MODRM_OFFSET, m);
    }
    if let Some(s) = rec.sib {
        fields_233(&mut v, SIB_OFFSET, s);
    }
    if let Some(d) = rec.displacement {
        bits(&mut v, DISP_OFFSET, d);
    }
    if let Some(i) = rec.immediate {
        bits(&mut v, IMM_OFFSET, i);
    }
    let present = [
        rec.has_prefix(),
        rec.modrm.is_some(),
        rec.sib.is_some(),
        rec.displacement.is_some(),
        rec.immediate.is_some(),
    ];
    for (k, p) in present.into_iter().enumerate() {
        v[OPTION_OFFSET + k] = p as u8 as f64;
    }
    EncodedInstruction(v)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockAggregation {
    #[default]
    Mean,
    Max,
}

fn random_value<R: Rng + ?Sized>(rng: &mut R) -> i64 {
    match rng.random_range(0..3) {
        0 => rng.random::<i8>() as i64,
        1 => rng.random::<i32>() as i64,
        _ => rng.random::<i64>(),
    }
}

/// A structurally valid record with every field drawn at random. Values
/// are not restricted to what the byte decoder supports.
pub fn random_record<R: Rng + ?Sized>(rng: &mut R) -> InstructionRecord {
    let modrm = rng.random_bool(0.5).then(|| rng.random::<u8>());
    InstructionRecord {
        segment: Segment::ALL[rng.random_range(0..Segment::ALL.len())],
        operand_size: rng.random_bool(0.3),
        address_size: rng.random_bool(0.3),
        lock: rng.random_bool(0.2),
        opcode: rng.random(),
        modrm,
        sib: modrm.and_then(|_| rng.random_bool(0.4).then(|| rng.random())),
        displacement: rng.random_bool(0.4).then(|| random_value(rng)),
        immediate: rng.random_bool(0.4).then(|| random_value(rng)),
    }
}

/// Pools the instruction vectors of one basic block into a node vector.
pub fn aggregate_block(instrs: &[EncodedInstruction], mode: BlockAggregation) -> Result<Vec<f64>> {
    let first = instrs
        .first()
        .ok_or_else(|| Error::invalid("cannot aggregate an empty basic block"))?;
    let mut out = first.0.clone();
    for e in &instrs[1..] {
        for (o, x) in out.iter_mut().zip(&e.0) {
            match mode {
                BlockAggregation::Mean => *o += x,
                BlockAggregation::Max => *o = o.max(*x),
            }
        }
    }
    if mode == BlockAggregation::Mean {
        let n = instrs.len() as f64;
        out.iter_mut().for_each(|o| *o /= n);
    }
    Ok(out)
}
