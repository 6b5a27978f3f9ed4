//! Acceptance gate: one test per stated success criterion, each
//! printing the measurement behind its verdict. Run with
//! `cargo test --test acceptance -- --nocapture` to see the numbers.

use std::process::Command;
use std::time::Instant;

use covertcard_core::auth::{
    handshake, white_list_insert, white_list_touch, AppRecord, CaDirectory, ReaderSession,
    ReaderState, TagSession, TagStep, WhiteListEntry,
};
use covertcard_core::card::{
    reference_service_blocks, BlockAddress, CardImage, CardLayout, CardType,
};
use covertcard_core::frame::{
    decode_frame, encode_frame, parse_cascade, Direction, Frame, TransmissionStatus,
};
use covertcard_core::sim::{run_scenario, seeded_bytes, Attack, Mode, ScenarioConfig};
use covertcard_core::suite::{AesGcmSuite, Key};
use rand::rngs::mock::StepRng;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn covertcard(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_covertcard"))
        .args(args)
        .output()
        .expect("binary runs")
}

#[test]
fn criterion_1_daily_capacity_table_is_exact() {
    let started = Instant::now();
    let out = covertcard(&["capacity", "--all", "--users", "10", "--alternations", "2"]);
    let elapsed = started.elapsed();
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    let raws: Vec<u64> = stdout
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(3).unwrap().parse().unwrap())
        .collect();
    println!("criterion 1: raw daily capacities {raws:?} in {elapsed:?}");
    assert_eq!(
        raws,
        [28_800, 120_960, 71_680, 145_920, 294_400],
        "criterion 1 FAIL: raw capacity column is off"
    );
    assert!(
        elapsed.as_secs_f64() < 1.0,
        "criterion 1 FAIL: {elapsed:?} is over the 1 s budget"
    );
}

#[test]
fn criterion_2_s50_reservation_leaves_45_blocks_720_bytes() {
    let layout =
        CardLayout::new(CardType::S50, &reference_service_blocks(CardType::S50)).unwrap();
    println!(
        "criterion 2: S50 usable blocks {} bytes {}",
        layout.usable_block_count(),
        layout.usable_capacity()
    );
    assert_eq!(layout.usable_block_count(), 45);
    assert_eq!(layout.usable_capacity(), 720);

    let out = covertcard(&["capacity", "S50"]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let row: Vec<&str> = stdout.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[1], "45");
    assert_eq!(row[2], "720");
}

#[test]
fn criterion_3_one_day_leak_of_a_20kb_secret() {
    let started = Instant::now();
    let mut config = ScenarioConfig::new(CardType::S50, 10, 1, 333);
    config.secret = seeded_bytes(333, "secret", 20_000);
    let out = run_scenario(&config).unwrap();
    let elapsed = started.elapsed();
    println!(
        "criterion 3: delivered {} of 20000 bytes, raw {} of 28800 allowed, \
         clean prefix {}, in {elapsed:?}",
        out.report.payload_bytes_a_to_b,
        out.report.raw_bytes,
        out.delivered_a_to_b == config.secret[..out.delivered_a_to_b.len()],
    );
    assert!(
        elapsed.as_secs_f64() < 5.0,
        "criterion 3 FAIL: {elapsed:?} is over the 5 s budget"
    );
    assert!(
        out.report.raw_bytes <= 28_800,
        "criterion 3 FAIL: raw bytes {} over the daily ceiling",
        out.report.raw_bytes
    );
    assert_eq!(
        out.delivered_a_to_b,
        config.secret[..out.delivered_a_to_b.len()].to_vec(),
        "criterion 3 FAIL: delivered bytes are not a clean prefix of the secret"
    );
    assert!(
        out.report.a_to_b_complete,
        "criterion 3 FAIL: {} of 20000 secret bytes arrived within one simulated day. \
         A one-way ceiling blocks this as stated: each of the 10 cards meets the sending \
         reader twice a day, so at most 10 x 2 x 720 = 14400 raw bytes can enter the \
         forward channel per day, and 20000 > 14400 before frame or acknowledgment \
         overhead is counted. The 28800-byte daily figure sums both directions of the \
         alternation. A second day completes the transfer.",
        out.report.payload_bytes_a_to_b
    );
}

#[test]
fn criterion_4_hooked_books_match_clean_books_across_seeds() {
    let mut rng = ChaCha20Rng::seed_from_u64(20_240_814);
    let mut legacy_pairs = 0;
    for _ in 0..100 {
        let seed = rng.next_u64();
        let mut hooked = ScenarioConfig::new(CardType::S50, 3, 1, seed);
        hooked.secret = seeded_bytes(seed, "books", 700);
        let mut clean = hooked.clone();
        clean.attack = Attack::None;
        let a = serde_json::to_string(&run_scenario(&hooked).unwrap().business).unwrap();
        let b = serde_json::to_string(&run_scenario(&clean).unwrap().business).unwrap();
        assert_eq!(a, b, "criterion 4 FAIL: legacy books diverged at seed {seed}");
        legacy_pairs += 1;
    }
    let mut secure_pairs = 0;
    for _ in 0..25 {
        let seed = rng.next_u64();
        let mut hooked = ScenarioConfig::new(CardType::S50, 2, 1, seed);
        hooked.mode = Mode::Secure;
        hooked.secret = seeded_bytes(seed, "books", 300);
        let mut clean = hooked.clone();
        clean.attack = Attack::None;
        let a = serde_json::to_string(&run_scenario(&hooked).unwrap().business).unwrap();
        let b = serde_json::to_string(&run_scenario(&clean).unwrap().business).unwrap();
        assert_eq!(a, b, "criterion 4 FAIL: secure books diverged at seed {seed}");
        secure_pairs += 1;
    }
    println!("criterion 4: {legacy_pairs} legacy + {secure_pairs} secure seed pairs byte-identical");
}

fn random_frame(rng: &mut ChaCha20Rng) -> Frame {
    let direction = if rng.next_u32() % 2 == 0 {
        Direction::AToB
    } else {
        Direction::BToA
    };
    if rng.next_u32() % 4 == 0 {
        let status = [
            TransmissionStatus::Succeeded,
            TransmissionStatus::AskAgain,
            TransmissionStatus::QueryStatus,
        ][rng.next_u32() as usize % 3];
        Frame::status(direction, status, (rng.next_u32() % 0x0FFF) as u16 + 1).unwrap()
    } else {
        let counter = (rng.next_u32() % 0x0FFF) as u16 + 1;
        let len = rng.next_u32() as usize % 301;
        let mut payload = vec![0u8; len];
        rng.fill_bytes(&mut payload);
        Frame::data(direction, counter, payload, rng.next_u32() % 2 == 0).unwrap()
    }
}

#[test]
fn criterion_5_codec_round_trip_corruption_and_cascades() {
    let mut rng = ChaCha20Rng::seed_from_u64(555);
    for i in 0..10_000 {
        let frame = random_frame(&mut rng);
        let bytes = encode_frame(&frame).unwrap();
        let back = decode_frame(&bytes).unwrap();
        assert_eq!(back, frame, "criterion 5 FAIL: frame {i} did not round-trip");
    }

    let payload: Vec<u8> = (0..64u8).collect();
    let frame = Frame::data(Direction::AToB, 77, payload, true).unwrap();
    let clean = encode_frame(&frame).unwrap();
    let bits = clean.len() * 8;
    for bit in 0..bits {
        let mut dirty = clean.clone();
        dirty[bit / 8] ^= 1 << (bit % 8);
        assert!(
            decode_frame(&dirty).is_err(),
            "criterion 5 FAIL: flipping bit {bit} of a CRC frame went undetected"
        );
    }

    let mut cascades = 0;
    for _ in 0..200 {
        let mut frames = Vec::new();
        let mut used = 0;
        loop {
            let frame = random_frame(&mut rng);
            let len = frame.encoded_len();
            if used + len > 720 {
                break;
            }
            used += len;
            frames.push(frame);
            if rng.next_u32() % 8 == 0 {
                break;
            }
        }
        let mut region = Vec::new();
        for frame in &frames {
            region.extend(encode_frame(frame).unwrap());
        }
        if 720 - used >= 4 {
            region.extend([0u8; 4]);
        }
        let result = parse_cascade(&region, 720);
        assert!(result.error.is_none(), "criterion 5 FAIL: {result:?}");
        assert_eq!(result.frames, frames, "criterion 5 FAIL: cascade changed");
        cascades += 1;
    }
    println!("criterion 5: 10000 round-trips, {bits} bit flips all caught, {cascades} cascades");
}

#[test]
fn criterion_6_secure_mode_delivers_zero_covert_bytes_for_30_days() {
    let mut config = ScenarioConfig::new(CardType::S50, 10, 30, 606);
    config.mode = Mode::Secure;
    config.secret = seeded_bytes(606, "secret", 20_000);
    config.reverse_secret = seeded_bytes(606, "reverse", 5_000);
    let out = run_scenario(&config).unwrap();
    println!(
        "criterion 6: covert bytes fwd {} rev {} raw {}, denials {}, \
         {} access rows and {} till rows all clean over {} swipes",
        out.report.payload_bytes_a_to_b,
        out.report.payload_bytes_b_to_a,
        out.report.raw_bytes,
        out.report.covert_denials,
        out.business.guard_log.len(),
        out.business.canteen_log.len(),
        out.report.swipes
    );
    assert_eq!(out.report.payload_bytes_a_to_b, 0, "criterion 6 FAIL: forward leak");
    assert_eq!(out.report.payload_bytes_b_to_a, 0, "criterion 6 FAIL: reverse leak");
    assert_eq!(out.report.raw_bytes, 0, "criterion 6 FAIL: hooks wrote the region");
    assert_eq!(out.report.business_errors, 0, "criterion 6 FAIL: business broke");
    assert_eq!(out.business.guard_log.len(), 10 * 2 * 30);
    assert!(out.business.guard_log.iter().all(|r| r.allowed));
    assert!(out.business.canteen_log.iter().all(|r| r.ok));
    assert_eq!(out.report.covert_denials, 10 * 4 * 30);
}

struct AuthWorld {
    suite: AesGcmSuite,
    ca: CaDirectory,
    guard: ReaderState,
    canteen: ReaderState,
    rogue: ReaderState,
    cards: Vec<covertcard_core::auth::SecureCard>,
}

fn addr(sector: u8, block: u8) -> BlockAddress {
    BlockAddress { sector, block }
}

fn auth_world(rng: &mut ChaCha20Rng, cards: usize) -> AuthWorld {
    let suite = AesGcmSuite;
    let mut ca = CaDirectory::new(rng);
    ca.define_app(1, vec![addr(1, 0)]).unwrap();
    ca.define_app(2, vec![addr(1, 1)]).unwrap();
    ca.register_sp(1);
    ca.register_sp(2);
    let mut guard = ReaderState::new(0xA1).unwrap();
    ca.register_reader(1, &mut guard, 1, rng).unwrap();
    let mut canteen = ReaderState::new(0xB1).unwrap();
    ca.register_reader(2, &mut canteen, 2, rng).unwrap();
    let mut rogue = ReaderState::new(0xE1).unwrap();
    rogue.install_app(1, ca.app_key_of(1).unwrap());
    let cards = (0..cards)
        .map(|i| {
            let mut tid = [0xB0; 8];
            tid[7] = i as u8;
            let image = CardImage::new_card(CardType::S50, tid, &[]).unwrap();
            ca.issue_card(image, rng).unwrap()
        })
        .collect();
    AuthWorld {
        suite,
        ca,
        guard,
        canteen,
        rogue,
        cards,
    }
}

/// Runs one honest handshake step by step, returning the banked
/// messages. Panics on any rejection: honest traffic must always pass.
fn honest_session(
    world: &mut AuthWorld,
    reader_is_guard: bool,
    card_idx: usize,
    rng: &mut ChaCha20Rng,
) -> (Vec<u8>, Vec<u8>, Vec<u8>) {
    let (reader, app_id, sp_id) = if reader_is_guard {
        (&world.guard, 1u32, 1u32)
    } else {
        (&world.canteen, 2u32, 2u32)
    };
    let sp = world.ca.sp_directory(sp_id).unwrap();
    let card = &mut world.cards[card_idx];
    card.begin_contact();
    let (mut rs, m1) = ReaderSession::start(reader, app_id, rng, &world.suite).unwrap();
    let (mut ts, m2) = TagSession::on_m1(card, &m1, rng, &world.suite).expect("honest m1");
    let m4 = rs.on_m2(&m2, sp, rng, &world.suite).expect("honest m2");
    let (m6, tag_key) = match ts.on_m4(card, &m4, rng, &world.suite) {
        TagStep::Accept { m6, session } => (m6, session.key_bytes()),
        TagStep::Challenge { m5a } => {
            let m5b = rs.on_m5a(&m5a, rng, &world.suite).expect("command present");
            match ts.on_m5b(card, &m5b, rng, &world.suite) {
                TagStep::Accept { m6, session } => (m6, session.key_bytes()),
                other => panic!("honest command path rejected: {other:?}"),
            }
        }
        TagStep::Reject { reason, .. } => panic!("honest m4 rejected: {reason}"),
    };
    let reader_key = rs.on_m6(&m6, &world.suite).expect("honest m6");
    assert_eq!(
        *reader_key.as_bytes(),
        tag_key,
        "accepted peers must share one session key"
    );
    (m2, m4, m6)
}

#[test]
fn criterion_7a_no_false_accepts_across_10k_adversarial_sessions() {
    let mut rng = ChaCha20Rng::seed_from_u64(7_777);
    let mut world = auth_world(&mut rng, 3);
    let mut bank_m2: Vec<Vec<u8>> = Vec::new();
    let mut bank_m4: Vec<Vec<u8>> = Vec::new();
    let mut honest = 0u32;
    let mut adversarial = 0u32;
    let mut false_accepts = 0u32;

    for _ in 0..10_000 {
        let roll = rng.next_u32() % 8;
        let card_idx = rng.next_u32() as usize % world.cards.len();
        let pick = |bank: &Vec<Vec<u8>>, r: &mut ChaCha20Rng| {
            bank[r.next_u32() as usize % bank.len()].clone()
        };
        match roll {
            0..=2 => {
                let guard_side = rng.next_u32() % 2 == 0;
                let (m2, m4, _m6) = honest_session(&mut world, guard_side, card_idx, &mut rng);
                bank_m2.push(m2);
                bank_m4.push(m4);
                honest += 1;
            }
            3 if !bank_m2.is_empty() => {
                // Replayed m2 against a fresh reader session.
                let old = pick(&bank_m2, &mut rng);
                let sp = world.ca.sp_directory(1).unwrap();
                let (mut rs, _m1) =
                    ReaderSession::start(&world.guard, 1, &mut rng, &world.suite).unwrap();
                if rs.on_m2(&old, sp, &mut rng, &world.suite).is_ok() {
                    false_accepts += 1;
                }
                adversarial += 1;
            }
            4 if !bank_m2.is_empty() => {
                // Live hash spliced onto an old ciphertext.
                let old = pick(&bank_m2, &mut rng);
                let sp = world.ca.sp_directory(1).unwrap();
                let card = &mut world.cards[card_idx];
                card.begin_contact();
                let (mut rs, m1) =
                    ReaderSession::start(&world.guard, 1, &mut rng, &world.suite).unwrap();
                let (_ts, live) =
                    TagSession::on_m1(card, &m1, &mut rng, &world.suite).expect("live m1");
                let mut spliced = live[..32].to_vec();
                spliced.extend_from_slice(&old[32..]);
                if rs.on_m2(&spliced, sp, &mut rng, &world.suite).is_ok() {
                    false_accepts += 1;
                }
                adversarial += 1;
            }
            5 if !bank_m4.is_empty() => {
                // Replayed m4 against a live tag session.
                let old = pick(&bank_m4, &mut rng);
                let card = &mut world.cards[card_idx];
                card.begin_contact();
                let (_rs, m1) =
                    ReaderSession::start(&world.guard, 1, &mut rng, &world.suite).unwrap();
                let (mut ts, _m2) =
                    TagSession::on_m1(card, &m1, &mut rng, &world.suite).expect("live m1");
                match ts.on_m4(card, &old, &mut rng, &world.suite) {
                    TagStep::Reject { .. } => {}
                    _ => false_accepts += 1,
                }
                adversarial += 1;
            }
            6 => {
                // Honest up to the confirmation, then one flipped bit.
                let guard_side = rng.next_u32() % 2 == 0;
                let (reader, app_id, sp_id) = if guard_side {
                    (&world.guard, 1u32, 1u32)
                } else {
                    (&world.canteen, 2u32, 2u32)
                };
                let sp = world.ca.sp_directory(sp_id).unwrap();
                let card = &mut world.cards[card_idx];
                card.begin_contact();
                let (mut rs, m1) =
                    ReaderSession::start(reader, app_id, &mut rng, &world.suite).unwrap();
                let (mut ts, m2) =
                    TagSession::on_m1(card, &m1, &mut rng, &world.suite).expect("live m1");
                let m4 = rs.on_m2(&m2, sp, &mut rng, &world.suite).expect("live m2");
                let m6 = match ts.on_m4(card, &m4, &mut rng, &world.suite) {
                    TagStep::Accept { m6, .. } => Some(m6),
                    TagStep::Challenge { m5a } => {
                        let m5b = rs.on_m5a(&m5a, &mut rng, &world.suite).expect("command");
                        match ts.on_m5b(card, &m5b, &mut rng, &world.suite) {
                            TagStep::Accept { m6, .. } => Some(m6),
                            _ => None,
                        }
                    }
                    TagStep::Reject { reason, .. } => panic!("honest prefix rejected: {reason}"),
                };
                if let Some(m6) = m6 {
                    let mut bad = m6.clone();
                    let i = rng.next_u32() as usize % bad.len();
                    bad[i] ^= 1 << (rng.next_u32() % 8);
                    if rs.on_m6(&bad, &world.suite).is_ok() {
                        false_accepts += 1;
                    }
                }
                adversarial += 1;
            }
            7 if rng.next_u32() % 2 == 0 => {
                // Cross-session splice: session 1's m4 delivered into
                // session 2, possibly on the same card.
                let other_idx = rng.next_u32() as usize % world.cards.len();
                let sp = world.ca.sp_directory(1).unwrap();
                let (mut rs1, m1a) =
                    ReaderSession::start(&world.guard, 1, &mut rng, &world.suite).unwrap();
                world.cards[card_idx].begin_contact();
                let (_ts1, m2a) = TagSession::on_m1(
                    &mut world.cards[card_idx],
                    &m1a,
                    &mut rng,
                    &world.suite,
                )
                .expect("live m1");
                let m4a = rs1.on_m2(&m2a, sp, &mut rng, &world.suite).expect("live m2");
                let (mut rs2, m1b) =
                    ReaderSession::start(&world.guard, 1, &mut rng, &world.suite).unwrap();
                world.cards[other_idx].begin_contact();
                let (mut ts2, m2b) = TagSession::on_m1(
                    &mut world.cards[other_idx],
                    &m1b,
                    &mut rng,
                    &world.suite,
                )
                .expect("live m1");
                let _m4b = rs2.on_m2(&m2b, sp, &mut rng, &world.suite).expect("live m2");
                match ts2.on_m4(&mut world.cards[other_idx], &m4a, &mut rng, &world.suite) {
                    TagStep::Reject { .. } => {}
                    _ => false_accepts += 1,
                }
                adversarial += 1;
            }
            7 => {
                // Rogue reader with a stolen app key and no command.
                let sp = world.ca.sp_directory(1).unwrap();
                let card = &mut world.cards[card_idx];
                card.begin_contact();
                let (mut rs, m1) =
                    ReaderSession::start(&world.rogue, 1, &mut rng, &world.suite).unwrap();
                let (mut ts, m2) =
                    TagSession::on_m1(card, &m1, &mut rng, &world.suite).expect("live m1");
                let m4 = rs.on_m2(&m2, sp, &mut rng, &world.suite).expect("live m2");
                match ts.on_m4(card, &m4, &mut rng, &world.suite) {
                    TagStep::Accept { .. } => false_accepts += 1,
                    TagStep::Challenge { m5a } => {
                        if rs.on_m5a(&m5a, &mut rng, &world.suite).is_ok() {
                            false_accepts += 1;
                        }
                    }
                    TagStep::Reject { .. } => {}
                }
                adversarial += 1;
            }
            _ => {
                // Bank still empty: run another honest session.
                let guard_side = rng.next_u32() % 2 == 0;
                let (m2, m4, _m6) = honest_session(&mut world, guard_side, card_idx, &mut rng);
                bank_m2.push(m2);
                bank_m4.push(m4);
                honest += 1;
            }
        }
    }
    println!(
        "criterion 7a: {honest} honest sessions all paired, {adversarial} adversarial \
         sessions, {false_accepts} false accepts"
    );
    assert!(honest > 1_000);
    assert!(adversarial > 1_000);
    assert_eq!(false_accepts, 0, "criterion 7a FAIL: an adversarial session was accepted");
}

#[test]
fn criterion_7b_no_long_term_key_bytes_in_any_transcript() {
    let mut scanned = 0usize;
    for seed in 0..50u64 {
        let mut rng = ChaCha20Rng::seed_from_u64(900 + seed);
        let mut world = auth_world(&mut rng, 2);
        let mut needles: Vec<[u8; 16]> = vec![world.ca.ca_key_bytes()];
        for card in &world.cards {
            needles.push(world.ca.master_key_of(card.tid()).unwrap());
        }
        needles.push(*world.ca.app_key_of(1).unwrap().as_bytes());
        needles.push(*world.ca.app_key_of(2).unwrap().as_bytes());

        let mut transcripts = Vec::new();
        for round in 0..4 {
            for card_idx in 0..world.cards.len() {
                let (reader, app_id, sp_id) = if round % 2 == 0 {
                    (&world.guard, 1u32, 1u32)
                } else {
                    (&world.canteen, 2u32, 2u32)
                };
                let sp = world.ca.sp_directory(sp_id).unwrap();
                let card = &mut world.cards[card_idx];
                card.begin_contact();
                let (t, _session) =
                    handshake(reader, card, sp, app_id, &mut rng, &world.suite).unwrap();
                transcripts.push(t);
                // A denied attempt also goes on the wire.
                let sp = world.ca.sp_directory(1).unwrap();
                let (t, _none) =
                    handshake(&world.rogue, card, sp, 1, &mut rng, &world.suite).unwrap();
                transcripts.push(t);
            }
        }
        for t in &transcripts {
            if let Some(sk) = t.session_key {
                needles.push(*sk.as_bytes());
            }
        }
        for t in &transcripts {
            for m in &t.messages {
                for needle in &needles {
                    assert!(
                        !m.bytes.windows(16).any(|w| w == needle),
                        "criterion 7b FAIL: key bytes visible in step {} at seed {seed}",
                        m.step
                    );
                }
                scanned += m.bytes.len();
            }
        }
    }
    println!("criterion 7b: scanned {scanned} transcript bytes across 50 worlds, no key bytes");
}

/// Naive transcription of the white-list rules, kept separate from the
/// production code so the two can disagree.
#[derive(Clone, Debug, PartialEq)]
struct RefList {
    entries: Vec<(u32, u8)>,
    version: u16,
}

impl RefList {
    fn touch(&mut self, rid: u32, draw: u32) {
        let Some(i) = self.entries.iter().position(|e| e.0 == rid) else {
            return;
        };
        if self.entries[i].1 >= 15 {
            return;
        }
        self.entries[i].1 += 1;
        let others: Vec<usize> = (0..self.entries.len()).filter(|&j| j != i).collect();
        if others.is_empty() {
            return;
        }
        let victim = others[draw as usize % others.len()];
        self.entries[victim].1 = self.entries[victim].1.saturating_sub(1);
    }

    fn insert(&mut self, rid: u32, cv: u16, capacity: usize) {
        if cv < self.version {
            return;
        }
        if cv > self.version {
            self.entries.clear();
            self.version = cv;
        }
        if self.entries.iter().any(|e| e.0 == rid) {
            return;
        }
        if self.entries.len() < capacity {
            self.entries.push((rid, 8));
            return;
        }
        let min = self.entries.iter().map(|e| e.1).min().unwrap();
        let i = self.entries.iter().position(|e| e.1 == min).unwrap();
        self.entries[i] = (rid, min);
    }
}

fn app_from(entries: &[(u32, u8)], version: u16, capacity: usize) -> AppRecord {
    AppRecord {
        app_id: 1,
        version,
        white_list: entries
            .iter()
            .map(|&(rid, frequentness)| WhiteListEntry { rid, frequentness })
            .collect(),
        white_list_capacity: capacity,
        app_key: Key::from_bytes([7; 16]),
        data_region: Vec::new(),
    }
}

fn entries_of(app: &AppRecord) -> Vec<(u32, u8)> {
    app.white_list
        .iter()
        .map(|e| (e.rid, e.frequentness))
        .collect()
}

#[test]
fn criterion_7c_white_list_agrees_with_brute_force_reference() {
    let rids = [10u32, 20, 30];
    let freqs = [0u8, 8, 15];
    let capacity = 3;
    let mut states: Vec<Vec<(u32, u8)>> = vec![Vec::new()];
    for len in 1..=3usize {
        let combos = 3usize.pow(len as u32);
        for c in 0..combos {
            let mut entries = Vec::new();
            let mut k = c;
            for r in 0..len {
                entries.push((rids[r], freqs[k % 3]));
                k /= 3;
            }
            states.push(entries);
        }
    }

    let mut cases = 0usize;
    for entries in &states {
        for rid in [10u32, 20, 30, 99] {
            for draw in 0..3u32 {
                let mut app = app_from(entries, 1, capacity);
                let mut reference = RefList {
                    entries: entries.clone(),
                    version: 1,
                };
                white_list_touch(&mut app, rid, &mut StepRng::new(draw as u64, 0));
                reference.touch(rid, draw);
                assert_eq!(
                    entries_of(&app),
                    reference.entries,
                    "criterion 7c FAIL: touch({rid}, draw {draw}) on {entries:?}"
                );
                assert!(app.white_list.iter().all(|e| e.frequentness <= 15));
                cases += 1;
            }
        }
        for rid in [10u32, 99] {
            for cv in [0u16, 1, 2] {
                let mut app = app_from(entries, 1, capacity);
                let mut reference = RefList {
                    entries: entries.clone(),
                    version: 1,
                };
                let min_before = app.white_list.iter().map(|e| e.frequentness).min();
                white_list_insert(&mut app, rid, cv);
                reference.insert(rid, cv, capacity);
                assert_eq!(
                    (entries_of(&app), app.version),
                    (reference.entries.clone(), reference.version),
                    "criterion 7c FAIL: insert({rid}, cv {cv}) on {entries:?}"
                );
                assert!(app.version >= 1, "version went backwards");
                assert!(app.white_list.len() <= capacity);
                if cv == 2 {
                    assert_eq!(entries_of(&app), vec![(rid, 8)], "bump must clear the list");
                }
                if cv == 1
                    && entries.len() == capacity
                    && !entries.iter().any(|e| e.0 == rid)
                {
                    let inserted = app.white_list.iter().find(|e| e.rid == rid).unwrap();
                    assert_eq!(
                        Some(inserted.frequentness),
                        min_before,
                        "eviction must hand the newcomer the evicted minimum"
                    );
                }
                cases += 1;
            }
        }
    }
    println!("criterion 7c: {cases} enumerated cases agree with the reference model");
    assert!(cases > 300);
}

#[test]
fn criterion_8_stolen_keys_leak_in_legacy_not_secure() {
    let mut legacy = ScenarioConfig::new(CardType::S50, 2, 2, 808);
    legacy.attack = Attack::StolenKeys { correct_keys: true };
    legacy.secret = seeded_bytes(808, "secret", 2_000);
    let leak = run_scenario(&legacy).unwrap();

    let mut wrong = legacy.clone();
    wrong.attack = Attack::StolenKeys {
        correct_keys: false,
    };
    let blocked = run_scenario(&wrong).unwrap();

    let mut secure = legacy.clone();
    secure.mode = Mode::Secure;
    let starved = run_scenario(&secure).unwrap();

    println!(
        "criterion 8: legacy stolen keys delivered {} of 2000, wrong keys {}, \
         secure stolen app keys {} with {} denials",
        leak.report.payload_bytes_a_to_b,
        blocked.report.payload_bytes_a_to_b,
        starved.report.payload_bytes_a_to_b,
        starved.report.covert_denials
    );
    assert!(leak.report.a_to_b_complete, "criterion 8 FAIL: stolen sector keys must leak");
    assert_eq!(blocked.report.payload_bytes_a_to_b, 0);
    assert_eq!(
        starved.report.payload_bytes_a_to_b, 0,
        "criterion 8 FAIL: app keys without a command must move nothing"
    );
    assert!(starved.report.covert_denials > 0);
    assert_eq!(starved.report.raw_bytes, 0);
}
