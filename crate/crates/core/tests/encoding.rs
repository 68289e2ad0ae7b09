mod common;

use cfgmoe::encoding::*;
use common::{rng, supported_byte_strings};
use iced_x86::{Decoder, DecoderOptions, Register};
use rand::Rng;

fn ones(v: &[f64]) -> usize {
    v.iter().filter(|&&x| x == 1.0).count()
}

fn assert_layout(rec: &InstructionRecord) {
    let e = encode_instruction(rec);
    let v = e.as_slice();
    assert_eq!(v.len(), 439);
    assert!(v.iter().all(|&x| x == 0.0 || x == 1.0));

    let prefix = e.block(PREFIX_OFFSET, PREFIX_WIDTH);
    assert_eq!(ones(&prefix[..7]), 1);
    assert_eq!(prefix[rec.segment.index()], 1.0);
    assert_eq!(
        prefix[7..],
        [
            rec.operand_size as u8 as f64,
            rec.address_size as u8 as f64,
            rec.lock as u8 as f64
        ]
    );

    let opcode = e.block(OPCODE_OFFSET, OPCODE_WIDTH);
    assert_eq!(ones(opcode), 1);
    assert_eq!(opcode[rec.opcode as usize], 1.0);

    for (offset, byte) in [(MODRM_OFFSET, rec.modrm), (SIB_OFFSET, rec.sib)] {
        let block = e.block(offset, 20);
        let parts = [&block[..4], &block[4..12], &block[12..]];
        match byte {
            Some(b) => {
                for p in parts {
                    assert_eq!(ones(p), 1);
                }
                assert_eq!(block[(b >> 6) as usize], 1.0);
                assert_eq!(block[4 + ((b >> 3) & 7) as usize], 1.0);
                assert_eq!(block[12 + (b & 7) as usize], 1.0);
            }
            None => assert_eq!(ones(block), 0),
        }
    }

    for (offset, value) in [(DISP_OFFSET, rec.displacement), (IMM_OFFSET, rec.immediate)] {
        let block = e.block(offset, 64);
        let pattern = value.unwrap_or(0) as u64;
        for (i, &bit) in block.iter().enumerate() {
            assert_eq!(bit, ((pattern >> i) & 1) as f64);
        }
    }

    let option = e.block(OPTION_OFFSET, OPTION_WIDTH);
    let expected = [
        rec.has_prefix(),
        rec.modrm.is_some(),
        rec.sib.is_some(),
        rec.displacement.is_some(),
        rec.immediate.is_some(),
    ];
    for (flag, want) in option.iter().zip(expected) {
        assert_eq!(*flag, want as u8 as f64);
    }
}

#[test]
fn ten_thousand_random_records_satisfy_layout() {
    let mut r = rng(2024);
    for _ in 0..10_000 {
        let rec = random_record(&mut r);
        rec.validate().unwrap();
        assert_layout(&rec);
    }
}

#[test]
fn layout_examples() {
    let nop = encode_instruction(&InstructionRecord::opcode(0x90));
    assert_eq!(ones(nop.as_slice()), 2);
    assert_eq!(nop.as_slice()[PREFIX_OFFSET], 1.0);
    assert_eq!(nop.as_slice()[OPCODE_OFFSET + 0x90], 1.0);

    let es_lock = InstructionRecord {
        segment: Segment::ES,
        lock: true,
        ..InstructionRecord::opcode(0x01)
    };
    let e = encode_instruction(&es_lock);
    let prefix = e.block(PREFIX_OFFSET, PREFIX_WIDTH);
    assert_eq!(prefix, [0., 1., 0., 0., 0., 0., 0., 0., 0., 1.]);
    assert_eq!(e.block(OPTION_OFFSET, OPTION_WIDTH)[0], 1.0);

    let minus_one = InstructionRecord {
        displacement: Some(-1),
        ..InstructionRecord::opcode(0x8B)
    };
    assert!(encode_instruction(&minus_one)
        .block(DISP_OFFSET, 64)
        .iter()
        .all(|&b| b == 1.0));
}

#[test]
fn block_aggregation() {
    let a = encode_instruction(&InstructionRecord::opcode(0x90));
    let b = encode_instruction(&InstructionRecord::opcode(0xC3));
    assert_eq!(
        aggregate_block(std::slice::from_ref(&a), BlockAggregation::Max).unwrap(),
        a.as_slice()
    );
    let mean = aggregate_block(&[a.clone(), b.clone()], BlockAggregation::Mean).unwrap();
    assert_eq!(mean[OPCODE_OFFSET + 0x90], 0.5);
    assert_eq!(mean[OPCODE_OFFSET + 0xC3], 0.5);
    let max = aggregate_block(&[a, b], BlockAggregation::Max).unwrap();
    assert_eq!(max[OPCODE_OFFSET + 0x90], 1.0);
    assert_eq!(max[OPCODE_OFFSET + 0xC3], 1.0);
    assert!(aggregate_block(&[], BlockAggregation::Mean).is_err());
}

#[test]
fn mean_aggregation_stays_within_componentwise_bounds() {
    let mut r = rng(5);
    for _ in 0..200 {
        let n = r.random_range(1..6);
        let instrs: Vec<EncodedInstruction> = (0..n).map(|_| encode_instruction(&random_record(&mut r))).collect();
        let mean = aggregate_block(&instrs, BlockAggregation::Mean).unwrap();
        for (k, m) in mean.iter().enumerate() {
            let lo = instrs.iter().map(|e| e.as_slice()[k]).fold(f64::INFINITY, f64::min);
            let hi = instrs.iter().map(|e| e.as_slice()[k]).fold(f64::NEG_INFINITY, f64::max);
            assert!(lo <= *m && *m <= hi);
        }
    }
}

#[test]
fn split_then_serialize_round_trips_supported_subset() {
    let strings = supported_byte_strings(1, true);
    assert_eq!(strings.len(), supported_forms().len());
    assert!(strings.len() > 16_000);
    for bytes in strings {
        let rec = split_bytes(&bytes).unwrap();
        assert_eq!(serialize_record(&rec).unwrap(), bytes, "{rec:?}");
    }
}

#[test]
fn instruction_lengths_agree_with_reference_decoder() {
    for bytes in supported_byte_strings(2, false) {
        let mut d = Decoder::new(64, &bytes, DecoderOptions::NONE);
        let ins = d.decode();
        assert!(!ins.is_invalid(), "reference rejects {bytes:02X?}");
        assert_eq!(ins.len(), bytes.len(), "length of {bytes:02X?}");
    }
}

#[test]
fn nop_and_lock_add_match_reference_decoder() {
    assert_eq!(split_hex("90").unwrap(), InstructionRecord::opcode(0x90));
    let mut d = Decoder::new(64, &[0x90], DecoderOptions::NONE);
    let ins = d.decode();
    assert_eq!(ins.len(), 1);
    assert_eq!(ins.op_count(), 0);

    let rec = split_hex("F0 01 D8").unwrap();
    assert_eq!(
        rec,
        InstructionRecord {
            lock: true,
            modrm: Some(0xD8),
            ..InstructionRecord::opcode(0x01)
        }
    );
    assert_eq!(split_233(0xD8), (3, 3, 0));
    // LOCK on a register destination faults at run time but still decodes
    let mut d = Decoder::new(64, &[0xF0, 0x01, 0xD8], DecoderOptions::NO_INVALID_CHECK);
    let ins = d.decode();
    assert_eq!(ins.len(), 3);
    assert!(ins.has_lock_prefix());
    // ADD r/m32, r32: rm = 0 is EAX, reg = 3 is EBX
    assert_eq!(ins.op0_register(), Register::EAX);
    assert_eq!(ins.op1_register(), Register::EBX);
}

#[test]
fn out_of_subset_bytes_are_reported_not_guessed() {
    for text in ["0F AE F0", "48 89 C8", "F3 90", "C5 F8 77", "62", "C8 10 00 00"] {
        let err = split_hex(text).unwrap_err();
        assert!(matches!(err, cfgmoe::Error::Unsupported(_)), "{text}: {err}");
    }
    assert!(split_hex("8B").is_err());
    assert!(split_hex("90 90").is_err());
}
