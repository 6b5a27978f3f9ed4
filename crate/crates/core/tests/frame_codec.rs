//! Codec soundness tests for the covert packet frame.
//!
//! Expected wire bytes come from two oracles that share no code with
//! the implementation: a push-one-bit-at-a-time header packer and a
//! bit-serial CRC-32. The CRC oracle is anchored to the standard check
//! value before it is trusted.

use covertcard_core::frame::{
    crc32, decode_frame, decode_frame_prefix, encode_frame, is_terminator, parse_cascade,
    rewrite_status, Direction, Frame, FrameError, FrameHeader, TransmissionStatus, HEADER_BYTES,
};
use proptest::prelude::*;

// ---- oracles ----

/// MSB-first bit packer. Field layout: direction (1 bit), CRC flag
/// (1 bit), status (2 bits), counter (12 bits), payload length
/// (16 bits).
fn header_oracle(direction: u8, crc: bool, status: u8, counter: u16, len: u16) -> [u8; 4] {
    let mut bits = Vec::with_capacity(32);
    let mut push = |value: u32, width: usize| {
        for i in (0..width).rev() {
            bits.push((value >> i) & 1 == 1);
        }
    };
    push(direction as u32, 1);
    push(crc as u32, 1);
    push(status as u32, 2);
    push(counter as u32, 12);
    push(len as u32, 16);
    let mut out = [0u8; 4];
    for (i, bit) in bits.iter().enumerate() {
        if *bit {
            out[i / 8] |= 1 << (7 - i % 8);
        }
    }
    out
}

/// Bit-serial reflected CRC-32 (polynomial 0x04C11DB7, init and final
/// xor all ones).
fn crc32_oracle(data: &[u8]) -> u32 {
    let mut crc: u32 = 0xFFFF_FFFF;
    for &byte in data {
        crc ^= byte as u32;
        for _ in 0..8 {
            crc = if crc & 1 != 0 {
                (crc >> 1) ^ 0xEDB8_8320
            } else {
                crc >> 1
            };
        }
    }
    !crc
}

#[test]
fn crc_oracle_matches_standard_check_value() {
    assert_eq!(crc32_oracle(b"123456789"), 0xCBF4_3926);
    assert_eq!(crc32_oracle(b""), 0x0000_0000);
}

#[test]
fn crc32_matches_oracle() {
    assert_eq!(crc32(b""), 0x0000_0000);
    assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
    let samples: [&[u8]; 4] = [b"a", b"hello frame", &[0u8; 40], &[0xFF; 7]];
    for s in samples {
        assert_eq!(crc32(s), crc32_oracle(s));
    }
}

#[test]
fn crc32_collision_smoke_test() {
    // Distinct short inputs should not collide in a tiny sample.
    let inputs: Vec<Vec<u8>> = (0u16..256).map(|i| i.to_be_bytes().to_vec()).collect();
    let mut seen = std::collections::BTreeSet::new();
    for input in &inputs {
        assert!(seen.insert(crc32(input)), "collision on {input:?}");
    }
}

// ---- header byte layout ----

#[test]
fn status_only_frame_is_exactly_four_bytes() {
    let frame = Frame::status(Direction::AToB, TransmissionStatus::Succeeded, 7).unwrap();
    let bytes = encode_frame(&frame).unwrap();
    assert_eq!(bytes.len(), 4);
    assert_eq!(bytes, header_oracle(0, false, 0b01, 7, 0));
    assert_eq!(bytes, [0x10, 0x07, 0x00, 0x00]);
}

#[test]
fn crc_frame_layout_matches_oracle() {
    let frame = Frame::data(Direction::AToB, 1, b"hello".to_vec(), true).unwrap();
    let bytes = encode_frame(&frame).unwrap();
    assert_eq!(bytes.len(), 13);
    let header = header_oracle(0, true, 0b00, 1, 5);
    assert_eq!(header, [0x40, 0x01, 0x00, 0x05]);
    assert_eq!(&bytes[..4], &header);
    assert_eq!(&bytes[4..9], b"hello");
    let mut covered = header.to_vec();
    covered.extend_from_slice(b"hello");
    assert_eq!(&bytes[9..], &crc32_oracle(&covered).to_be_bytes());
}

#[test]
fn direction_bit_is_the_most_significant() {
    let a = Frame::status(Direction::AToB, TransmissionStatus::QueryStatus, 9).unwrap();
    let b = Frame::status(Direction::BToA, TransmissionStatus::QueryStatus, 9).unwrap();
    let ea = encode_frame(&a).unwrap();
    let eb = encode_frame(&b).unwrap();
    assert_eq!(ea[0] & 0x80, 0x00);
    assert_eq!(eb[0] & 0x80, 0x80);
    assert_eq!(ea[0], header_oracle(0, false, 0b11, 9, 0)[0]);
    assert_eq!(eb[0], header_oracle(1, false, 0b11, 9, 0)[0]);
}

#[test]
fn twelve_bit_counter_spans_header_bytes() {
    let frame = Frame::data(Direction::BToA, 0xABC, vec![0x55], false).unwrap();
    let bytes = encode_frame(&frame).unwrap();
    assert_eq!(&bytes[..4], &header_oracle(1, false, 0, 0xABC, 1));
    assert_eq!(&bytes[..4], &[0x8A, 0xBC, 0x00, 0x01]);
}

// ---- encode/decode contracts ----

#[test]
fn decode_inverts_encode_on_fixed_frames() {
    let frames = [
        Frame::data(Direction::AToB, 1, vec![], false).unwrap(),
        Frame::data(Direction::AToB, 4095, vec![1, 2, 3], true).unwrap(),
        Frame::status(Direction::BToA, TransmissionStatus::AskAgain, 77).unwrap(),
        Frame::status(Direction::AToB, TransmissionStatus::QueryStatus, 4094).unwrap(),
    ];
    for frame in frames {
        let bytes = encode_frame(&frame).unwrap();
        let back = decode_frame(&bytes).unwrap();
        assert_eq!(back, frame);
        assert_eq!(encode_frame(&back).unwrap(), bytes);
    }
}

#[test]
fn truncated_inputs_are_framing_errors() {
    assert!(matches!(
        decode_frame(&[0x10, 0x07, 0x00]),
        Err(FrameError::Truncated { .. })
    ));
    let frame = Frame::data(Direction::AToB, 1, vec![9; 10], true).unwrap();
    let bytes = encode_frame(&frame).unwrap();
    assert!(matches!(
        decode_frame(&bytes[..bytes.len() - 3]),
        Err(FrameError::Truncated { .. })
    ));
}

#[test]
fn normal_frames_require_a_nonzero_counter() {
    assert!(matches!(
        Frame::data(Direction::AToB, 0, vec![1], false),
        Err(FrameError::ZeroCounter)
    ));
    // A wire header claiming Normal with counter 0 is invalid too.
    let bytes = [0x00, 0x00, 0x00, 0x01, 0xAA];
    assert!(matches!(decode_frame(&bytes), Err(FrameError::ZeroCounter)));
}

#[test]
fn counter_range_is_enforced() {
    assert!(matches!(
        Frame::data(Direction::AToB, 4096, vec![], false),
        Err(FrameError::CounterRange(4096))
    ));
}

#[test]
fn status_frames_refuse_payload() {
    let mut frame = Frame::status(Direction::AToB, TransmissionStatus::Succeeded, 3).unwrap();
    frame.payload = vec![1];
    frame.header.payload_len = 1;
    assert!(matches!(
        encode_frame(&frame),
        Err(FrameError::PayloadOnStatusFrame)
    ));
}

#[test]
fn every_single_bit_flip_of_a_crc_frame_is_detected() {
    let frame = Frame::data(Direction::AToB, 42, b"sixteen byte pay".to_vec(), true).unwrap();
    let clean = encode_frame(&frame).unwrap();
    assert_eq!(decode_frame(&clean).unwrap(), frame);
    for bit in 0..clean.len() * 8 {
        let mut corrupt = clean.clone();
        corrupt[bit / 8] ^= 1 << (bit % 8);
        match decode_frame(&corrupt) {
            Ok(decoded) => panic!("bit {bit} undetected: {decoded:?}"),
            Err(_) => {}
        }
    }
}

#[test]
fn crc_mismatch_is_distinct_from_framing_errors() {
    let frame = Frame::data(Direction::AToB, 42, vec![7; 8], true).unwrap();
    let mut bytes = encode_frame(&frame).unwrap();
    bytes[6] ^= 0x01;
    assert!(matches!(
        decode_frame(&bytes),
        Err(FrameError::CrcMismatch { .. })
    ));
}

// ---- cascades ----

#[test]
fn empty_region_parses_to_nothing() {
    let region = vec![0u8; 64];
    let result = parse_cascade(&region, 64);
    assert!(result.frames.is_empty());
    assert!(result.error.is_none());
}

#[test]
fn back_to_back_frames_parse_in_order() {
    let f1 = Frame::data(Direction::AToB, 1, b"one".to_vec(), true).unwrap();
    let f2 = Frame::status(Direction::BToA, TransmissionStatus::Succeeded, 9).unwrap();
    let f3 = Frame::data(Direction::BToA, 2, b"three".to_vec(), false).unwrap();
    let mut region = Vec::new();
    for f in [&f1, &f2, &f3] {
        region.extend_from_slice(&encode_frame(f).unwrap());
    }
    region.resize(128, 0);
    let result = parse_cascade(&region, 128);
    assert!(result.error.is_none());
    assert_eq!(result.frames, vec![f1, f2, f3]);
}

#[test]
fn corrupt_frame_yields_prefix_plus_error_marker() {
    let f1 = Frame::data(Direction::AToB, 1, b"fine".to_vec(), true).unwrap();
    let f2 = Frame::data(Direction::AToB, 2, b"broken".to_vec(), true).unwrap();
    let mut region = encode_frame(&f1).unwrap();
    let offset = region.len();
    let mut bad = encode_frame(&f2).unwrap();
    bad[5] ^= 0x20;
    region.extend_from_slice(&bad);
    region.resize(96, 0);
    let result = parse_cascade(&region, 96);
    assert_eq!(result.frames, vec![f1]);
    let issue = result.error.expect("error marker");
    assert_eq!(issue.offset, offset);
    assert!(matches!(issue.error, FrameError::CrcMismatch { .. }));
    let header = issue.header.expect("header still parseable");
    assert_eq!(header.counter, 2);
}

#[test]
fn cascade_stops_short_of_header_space() {
    let f1 = Frame::data(Direction::AToB, 1, vec![5; 4], false).unwrap();
    let mut region = encode_frame(&f1).unwrap();
    region.extend_from_slice(&[0, 0]); // too short to hold another header
    let result = parse_cascade(&region, region.len());
    assert_eq!(result.frames.len(), 1);
    assert!(result.error.is_none());
}

#[test]
fn terminator_is_all_zero_header() {
    assert!(is_terminator(&[0, 0, 0, 0, 9, 9]));
    assert!(!is_terminator(&[0, 0, 0, 1]));
    assert!(!is_terminator(&[0, 0, 0]));
}

// ---- in-place status rewrite ----

#[test]
fn rewrite_folds_crc_into_length_and_clears_the_flag() {
    let frame = Frame::data(Direction::AToB, 1, vec![0xEE; 500], true).unwrap();
    let mut region = encode_frame(&frame).unwrap();
    let original = region.clone();
    rewrite_status(&mut region, 0, TransmissionStatus::Succeeded).unwrap();
    // Header becomes: Succeeded, no CRC, length 504.
    assert_eq!(&region[..4], &[0x10, 0x01, 0x01, 0xF8]);
    // Payload bytes are untouched.
    assert_eq!(&region[4..], &original[4..]);
    // The cascade still walks past the rewritten frame.
    let parsed = parse_cascade(&region, region.len());
    assert!(parsed.error.is_none());
    assert_eq!(parsed.frames.len(), 1);
    assert_eq!(parsed.frames[0].header.status, TransmissionStatus::Succeeded);
    assert_eq!(parsed.frames[0].header.payload_len, 504);
    assert!(parsed.frames[0].payload.is_empty());
}

#[test]
fn rewrite_to_ask_again_matches_frozen_bytes() {
    let frame = Frame::data(Direction::AToB, 1, vec![0xEE; 500], true).unwrap();
    let mut region = encode_frame(&frame).unwrap();
    rewrite_status(&mut region, 0, TransmissionStatus::AskAgain).unwrap();
    assert_eq!(&region[..4], &[0x20, 0x01, 0x01, 0xF8]);
}

#[test]
fn rewrite_of_query_answer_touches_status_bits_only() {
    let query = Frame::status(Direction::AToB, TransmissionStatus::QueryStatus, 55).unwrap();
    let mut region = encode_frame(&query).unwrap();
    rewrite_status(&mut region, 0, TransmissionStatus::Succeeded).unwrap();
    assert_eq!(region, [0x10, 0x37, 0x00, 0x00]);
}

// ---- properties ----

fn arbitrary_frame() -> impl Strategy<Value = Frame> {
    let direction = prop_oneof![Just(Direction::AToB), Just(Direction::BToA)];
    let status = prop_oneof![
        Just(TransmissionStatus::Normal),
        Just(TransmissionStatus::Succeeded),
        Just(TransmissionStatus::AskAgain),
        Just(TransmissionStatus::QueryStatus),
    ];
    (direction, status, 1u16..=4095, any::<bool>(), proptest::collection::vec(any::<u8>(), 0..600))
        .prop_map(|(direction, status, counter, crc, payload)| {
            if status == TransmissionStatus::Normal {
                Frame::data(direction, counter, payload, crc).unwrap()
            } else {
                Frame::status(direction, status, counter).unwrap()
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn round_trip_over_random_frames(frame in arbitrary_frame()) {
        let bytes = encode_frame(&frame).unwrap();
        prop_assert_eq!(bytes.len(), 4 + frame.header.payload_len as usize
            + if frame.header.crc_present { 4 } else { 0 });
        let back = decode_frame(&bytes).unwrap();
        prop_assert_eq!(&back, &frame);
        prop_assert_eq!(encode_frame(&back).unwrap(), bytes);
    }

    #[test]
    fn headers_round_trip_through_the_oracle(
        direction in 0u8..=1,
        crc in any::<bool>(),
        status in 0u8..=3,
        counter in 0u16..=4095,
        len in any::<u16>(),
    ) {
        // Compare raw header packing against the bit oracle, without
        // the semantic validity rules.
        let header = FrameHeader {
            direction: Direction::from_bit(direction).unwrap(),
            crc_present: crc,
            status: TransmissionStatus::from_bits(status).unwrap(),
            counter,
            payload_len: len,
        };
        prop_assert_eq!(header.pack(), header_oracle(direction, crc, status, counter, len));
        prop_assert_eq!(FrameHeader::unpack(header.pack()), header);
    }

    #[test]
    fn cascades_round_trip(frames in proptest::collection::vec(arbitrary_frame(), 0..6)) {
        let mut region = Vec::new();
        for f in &frames {
            region.extend_from_slice(&encode_frame(f).unwrap());
        }
        let payload_area = region.len().max(8) + 8;
        region.resize(payload_area, 0);
        let result = parse_cascade(&region, payload_area);
        prop_assert!(result.error.is_none());
        prop_assert_eq!(result.frames, frames);
    }
}

#[test]
fn decode_prefix_reports_consumed_length() {
    let f1 = Frame::data(Direction::AToB, 3, vec![1, 2, 3, 4], true).unwrap();
    let mut bytes = encode_frame(&f1).unwrap();
    let len1 = bytes.len();
    bytes.extend_from_slice(&[0xFF; 10]);
    let (frame, used) = decode_frame_prefix(&bytes).unwrap();
    assert_eq!(frame, f1);
    assert_eq!(used, len1);
    assert_eq!(used, HEADER_BYTES + 4 + 4);
}
