//! Line-oriented instruction record files.
//!
//! ```text
//! # comment
//! BLOCK entry -> loop exit
//! -	55	-	-	-	-	-
//! ES	8B	45	-	-8	-	ol
//! BLOCK loop
//! ...
//! ```
//!
//! A `BLOCK <id>` header opens a basic block; an optional `-> <id> ...`
//! tail lists its control-flow successors. Each record line has seven
//! tab-separated fields `seg op modrm sib disp imm flags`:
//!
//! * `seg`: `-` or one of `ES CS SS DS FS GS`
//! * `op`, `modrm`, `sib`: hex bytes, `-` when absent
//! * `disp`, `imm`: signed decimal integers, `-` when absent
//! * `flags`: `-` or any of `o` (operand-size override), `a`
//!   (address-size override), `l` (lock)

#![allow(clippy::tabs_in_doc_comments)]

use super::{InstructionRecord, Segment};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BasicBlock {
    pub id: String,
    pub successors: Vec<String>,
    pub instructions: Vec<InstructionRecord>,
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

fn opt<T>(field: &str, f: impl FnOnce(&str) -> Option<T>) -> std::result::Result<Option<T>, ()> {
    if field == "-" {
        Ok(None)
    } else {
        f(field).map(Some).ok_or(())
    }
}

fn hex_byte(s: &str) -> Option<u8> {
    let s = s.strip_prefix("0x").unwrap_or(s);
    u8::from_str_radix(s, 16).ok()
}

fn segment(s: &str) -> Option<Segment> {
    Some(match s {
        "-" => Segment::None,
        "ES" => Segment::ES,
        "CS" => Segment::CS,
        "SS" => Segment::SS,
        "DS" => Segment::DS,
        "FS" => Segment::FS,
        "GS" => Segment::GS,
        _ => return None,
    })
}

fn parse_record(line_no: usize, line: &str) -> Result<InstructionRecord> {
    let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
    if fields.len() != 7 {
        return Err(parse_err(
            line_no,
            format!("expected 7 tab-separated fields, found {}", fields.len()),
        ));
    }
    let bad = |name: &str, v: &str| parse_err(line_no, format!("bad {name} field `{v}`"));
    let mut rec = InstructionRecord {
        segment: segment(fields[0]).ok_or_else(|| bad("segment", fields[0]))?,
        opcode: hex_byte(fields[1]).ok_or_else(|| bad("opcode", fields[1]))?,
        modrm: opt(fields[2], hex_byte).map_err(|_| bad("modrm", fields[2]))?,
        sib: opt(fields[3], hex_byte).map_err(|_| bad("sib", fields[3]))?,
        displacement: opt(fields[4], |s| s.parse().ok()).map_err(|_| bad("displacement", fields[4]))?,
        immediate: opt(fields[5], |s| s.parse().ok()).map_err(|_| bad("immediate", fields[5]))?,
        ..Default::default()
    };
    if fields[6] != "-" {
        for c in fields[6].chars() {
            let flag = match c {
                'o' => &mut rec.operand_size,
                'a' => &mut rec.address_size,
                'l' => &mut rec.lock,
                _ => return Err(bad("flags", fields[6])),
            };
            if *flag {
                return Err(bad("flags", fields[6]));
            }
            *flag = true;
        }
    }
    rec.validate().map_err(|e| parse_err(line_no, e.to_string()))?;
    Ok(rec)
}

pub fn parse_blocks(text: &str) -> Result<Vec<BasicBlock>> {
    let mut blocks: Vec<(usize, BasicBlock)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix("BLOCK") {
            let (id_part, succ_part) = match rest.split_once("->") {
                Some((a, b)) => (a, Some(b)),
                None => (rest, None),
            };
            let id = id_part.trim();
            if id.is_empty() || id.contains(char::is_whitespace) {
                return Err(parse_err(line_no, "BLOCK header needs a single id"));
            }
            if blocks.iter().any(|(_, b)| b.id == id) {
                return Err(parse_err(line_no, format!("duplicate block id `{id}`")));
            }
            let successors = succ_part
                .map(|s| s.split_whitespace().map(String::from).collect())
                .unwrap_or_default();
            blocks.push((
                line_no,
                BasicBlock {
                    id: id.to_string(),
                    successors,
                    instructions: Vec::new(),
                },
            ));
            continue;
        }
        let rec = parse_record(line_no, line)?;
        match blocks.last_mut() {
            Some((_, b)) => b.instructions.push(rec),
            None => return Err(parse_err(line_no, "record before the first BLOCK header")),
        }
    }
    for (line_no, b) in &blocks {
        if b.instructions.is_empty() {
            return Err(parse_err(*line_no, format!("block `{}` has no instructions", b.id)));
        }
        for s in &b.successors {
            if !blocks.iter().any(|(_, o)| &o.id == s) {
                return Err(parse_err(*line_no, format!("unknown successor block `{s}`")));
            }
        }
    }
    Ok(blocks.into_iter().map(|(_, b)| b).collect())
}

fn fmt_opt<T>(v: Option<T>, f: impl Fn(T) -> String) -> String {
    v.map(f).unwrap_or_else(|| "-".into())
}

pub fn write_blocks(blocks: &[BasicBlock]) -> String {
    let mut out = String::new();
    for b in blocks {
        out.push_str("BLOCK ");
        out.push_str(&b.id);
        if !b.successors.is_empty() {
            out.push_str(" -> ");
            out.push_str(&b.successors.join(" "));
        }
        out.push('\n');
        for r in &b.instructions {
            let seg = match r.segment {
                Segment::None => "-".to_string(),
                s => format!("{s:?}"),
            };
            let mut flags = String::new();
            for (on, c) in [(r.operand_size, 'o'), (r.address_size, 'a'), (r.lock, 'l')] {
                if on {
                    flags.push(c);
                }
            }
            if flags.is_empty() {
                flags.push('-');
            }
            out.push_str(&format!(
                "{seg}\t{:02X}\t{}\t{}\t{}\t{}\t{flags}\n",
                r.opcode,
                fmt_opt(r.modrm, |m| format!("{m:02X}")),
                fmt_opt(r.sib, |s| format!("{s:02X}")),
                fmt_opt(r.displacement, |d| d.to_string()),
                fmt_opt(r.immediate, |i| i.to_string()),
            ));
        }
    }
    out
}
