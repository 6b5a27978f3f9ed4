//! Store-and-forward message channel between two parties that never
//! meet, relayed through the spare blocks of a card that visits both.
//!
//! Each party runs an [`EndpointState`]. When the card shows up, the
//! endpoint reads the shared region, reacts to every frame in the
//! cascade, rebuilds the region, and writes back only the blocks that
//! changed. Frames the endpoint sent earlier come back as in-place
//! status rewrites: `Succeeded` retires the frame, `AskAgain` triggers
//! a retransmission with the same counter. Frames from the peer are
//! delivered in counter order, acknowledged by rewriting their status,
//! and deduplicated against a half-range window so a retransmitted
//! copy is confirmed but not delivered twice.
//!
//! A frame that disappears from the card without a verdict (the region
//! was overwritten or truncated) is chased with a `QueryStatus` frame
//! after `staleness_threshold` fruitless visits. The peer answers by
//! rewriting the query to `Succeeded` or `AskAgain`, which feeds back
//! into the regular retire/retransmit paths. The query's presence on
//! the card is the only pending-state: if it vanishes too, it is
//! simply issued again.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::card::{
    reference_service_blocks, BlockAddress, CardError, CardImage, CardLayout, CardType,
    SectorToken, BLOCK_BYTES, DEFAULT_KEY,
};
use crate::frame::{
    decode_frame_prefix, encode_frame, is_terminator, rewrite_status, Direction, Frame,
    FrameError, FrameHeader, TransmissionStatus, CRC_BYTES, HEADER_BYTES,
};

const COUNTER_MAX: u16 = 0x0FFF;
const COUNTER_HALF_RANGE: u16 = 2048;

/// Fixed knobs of one endpoint. Both parties must agree on
/// `crc_on_new_frames`: when set, bare frames from the peer are
/// treated as damaged and asked again.
#[derive(Clone, Debug)]
pub struct ChannelConfig {
    /// The flow this endpoint transmits on.
    pub direction: Direction,
    /// Largest payload put in a single frame.
    pub per_frame_payload: usize,
    /// Append a CRC-32 to freshly written frames and require one on
    /// delivery.
    pub crc_on_new_frames: bool,
    /// Own contacts a sent frame may stay unseen before a status query
    /// is written for it.
    pub staleness_threshold: u32,
}

/// Counters for one card contact. Card-level fields stay zero when the
/// exchange runs over a bare byte region.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContactReport {
    pub bytes_read: usize,
    pub bytes_written: usize,
    pub sectors_skipped: usize,
    pub frames_sent: usize,
    pub frames_retransmitted: usize,
    pub frames_acked: usize,
    pub frames_nacked: usize,
    pub frames_queried: usize,
    pub queries_answered: usize,
    pub frames_delivered: usize,
    pub duplicate_frames: usize,
    pub payload_bytes_delivered: usize,
    pub frames_marked_ask_again: usize,
}

impl ContactReport {
    pub fn absorb(&mut self, other: &ContactReport) {
        self.bytes_read += other.bytes_read;
        self.bytes_written += other.bytes_written;
        self.sectors_skipped += other.sectors_skipped;
        self.frames_sent += other.frames_sent;
        self.frames_retransmitted += other.frames_retransmitted;
        self.frames_acked += other.frames_acked;
        self.frames_nacked += other.frames_nacked;
        self.frames_queried += other.frames_queried;
        self.queries_answered += other.queries_answered;
        self.frames_delivered += other.frames_delivered;
        self.duplicate_frames += other.duplicate_frames;
        self.payload_bytes_delivered += other.payload_bytes_delivered;
        self.frames_marked_ask_again += other.frames_marked_ask_again;
    }
}

struct InFlight {
    payload: Vec<u8>,
    with_crc: bool,
    /// Own contacts since the frame was last seen on the card.
    age: u32,
}

pub struct EndpointState {
    config: ChannelConfig,
    next_counter: u16,
    in_flight: BTreeMap<u16, InFlight>,
    send_queue: VecDeque<Vec<u8>>,
    expected_next: u16,
    reassembly: BTreeMap<u16, Vec<u8>>,
    delivered: Vec<u8>,
}

/// Splits a message into per-frame payload chunks; only the last chunk
/// may be short. An empty message yields no chunks.
pub fn segment_message(msg: &[u8], per_frame_payload: usize) -> Vec<Vec<u8>> {
    assert!(per_frame_payload > 0, "per-frame payload must be positive");
    msg.chunks(per_frame_payload).map(<[u8]>::to_vec).collect()
}

fn next_counter(c: u16) -> u16 {
    if c >= COUNTER_MAX {
        1
    } else {
        c + 1
    }
}

/// Position of a counter on the 1..=4095 ring.
fn ring_index(c: u16) -> u16 {
    c - 1
}

impl EndpointState {
    pub fn new(config: ChannelConfig) -> EndpointState {
        assert!(
            config.per_frame_payload >= 1 && config.per_frame_payload <= u16::MAX as usize,
            "per-frame payload must fit the 16-bit length field"
        );
        assert!(config.staleness_threshold >= 1);
        EndpointState {
            config,
            next_counter: 1,
            in_flight: BTreeMap::new(),
            send_queue: VecDeque::new(),
            expected_next: 1,
            reassembly: BTreeMap::new(),
            delivered: Vec::new(),
        }
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.config
    }

    /// Queues a message for transmission over the next contacts.
    pub fn queue_message(&mut self, msg: &[u8]) {
        for chunk in segment_message(msg, self.config.per_frame_payload) {
            self.send_queue.push_back(chunk);
        }
    }

    /// Everything received from the peer so far, in order.
    pub fn delivered(&self) -> &[u8] {
        &self.delivered
    }

    /// Frames sent but unconfirmed plus chunks not yet written.
    pub fn pending(&self) -> usize {
        self.in_flight.len() + self.send_queue.len()
    }

    /// Chunks still waiting for their first write.
    pub fn queued_chunks(&self) -> usize {
        self.send_queue.len()
    }

    /// True when `c` falls behind the delivery window, meaning it was
    /// already consumed.
    fn already_delivered(&self, c: u16) -> bool {
        if c == self.expected_next {
            return false;
        }
        let ahead = (ring_index(c) + COUNTER_MAX - ring_index(self.expected_next)) % COUNTER_MAX;
        ahead >= COUNTER_HALF_RANGE
    }

    fn has_received(&self, c: u16) -> bool {
        self.already_delivered(c) || self.reassembly.contains_key(&c)
    }

    /// Accepts a peer frame; returns false for a duplicate. In-order
    /// payload is drained into the delivered stream.
    fn receive(&mut self, counter: u16, payload: Vec<u8>) -> bool {
        if self.has_received(counter) {
            return false;
        }
        self.reassembly.insert(counter, payload);
        while let Some(p) = self.reassembly.remove(&self.expected_next) {
            self.delivered.extend_from_slice(&p);
            self.expected_next = next_counter(self.expected_next);
        }
        true
    }

    fn allocate_counter(&mut self) -> u16 {
        let mut c = self.next_counter;
        while self.in_flight.contains_key(&c) {
            c = next_counter(c);
        }
        self.next_counter = next_counter(c);
        c
    }

    /// One card contact over a raw region buffer. Reads the cascade,
    /// reacts to every frame, and rewrites the region in place.
    pub fn exchange(&mut self, region: &mut [u8]) -> ContactReport {
        let capacity = region.len();
        let own = self.config.direction;
        let mut report = ContactReport::default();
        let mut kept: Vec<Vec<u8>> = Vec::new();
        let mut retransmit: Vec<u16> = Vec::new();
        let mut seen_own: BTreeSet<u16> = BTreeSet::new();
        let mut queries_on_card: BTreeSet<u16> = BTreeSet::new();
        let delivered_before = self.delivered.len();

        let mut offset = 0;
        while capacity - offset >= HEADER_BYTES {
            let rest = &region[offset..];
            if is_terminator(rest) {
                break;
            }
            match decode_frame_prefix(rest) {
                Ok((frame, used)) => {
                    let h = frame.header;
                    let segment = &rest[..used];
                    if h.direction == own {
                        seen_own.insert(h.counter);
                        match h.status {
                            TransmissionStatus::Normal => {
                                // Still waiting for the peer; unknown
                                // counters are stale leftovers.
                                if self.in_flight.contains_key(&h.counter) {
                                    kept.push(segment.to_vec());
                                }
                            }
                            TransmissionStatus::Succeeded => {
                                if self.in_flight.remove(&h.counter).is_some() {
                                    report.frames_acked += 1;
                                }
                            }
                            TransmissionStatus::AskAgain => {
                                if self.in_flight.contains_key(&h.counter) {
                                    report.frames_nacked += 1;
                                    retransmit.push(h.counter);
                                }
                            }
                            TransmissionStatus::QueryStatus => {
                                if self.in_flight.contains_key(&h.counter) {
                                    queries_on_card.insert(h.counter);
                                    kept.push(segment.to_vec());
                                }
                            }
                        }
                    } else {
                        match h.status {
                            TransmissionStatus::Normal => {
                                if h.crc_present || !self.config.crc_on_new_frames {
                                    if self.receive(h.counter, frame.payload) {
                                        report.frames_delivered += 1;
                                    } else {
                                        report.duplicate_frames += 1;
                                    }
                                    let mut seg = segment.to_vec();
                                    rewrite_status(&mut seg, 0, TransmissionStatus::Succeeded)
                                        .expect("segment starts with a header");
                                    kept.push(seg);
                                } else {
                                    // Policy demands a CRC; treat a bare
                                    // frame as damaged in transit.
                                    let mut seg = segment.to_vec();
                                    rewrite_status(&mut seg, 0, TransmissionStatus::AskAgain)
                                        .expect("segment starts with a header");
                                    report.frames_marked_ask_again += 1;
                                    kept.push(seg);
                                }
                            }
                            TransmissionStatus::Succeeded | TransmissionStatus::AskAgain => {
                                // Verdicts we issued earlier, awaiting
                                // pickup by the peer.
                                kept.push(segment.to_vec());
                            }
                            TransmissionStatus::QueryStatus => {
                                let verdict = if self.has_received(h.counter) {
                                    TransmissionStatus::Succeeded
                                } else {
                                    TransmissionStatus::AskAgain
                                };
                                let mut seg = segment.to_vec();
                                rewrite_status(&mut seg, 0, verdict)
                                    .expect("segment starts with a header");
                                report.queries_answered += 1;
                                kept.push(seg);
                            }
                        }
                    }
                    offset += used;
                }
                Err(FrameError::CrcMismatch { .. }) => {
                    // The header still frames the bytes; use its length
                    // to stay aligned with the rest of the cascade.
                    let h = FrameHeader::unpack([rest[0], rest[1], rest[2], rest[3]]);
                    let total = h.encoded_len();
                    if total > rest.len() {
                        break;
                    }
                    if h.direction == own {
                        seen_own.insert(h.counter);
                        if self.in_flight.contains_key(&h.counter) {
                            retransmit.push(h.counter);
                        }
                    } else {
                        let mut seg = rest[..total].to_vec();
                        rewrite_status(&mut seg, 0, TransmissionStatus::AskAgain)
                            .expect("segment starts with a header");
                        report.frames_marked_ask_again += 1;
                        kept.push(seg);
                    }
                    offset += total;
                }
                Err(_) => {
                    // Unframeable bytes; everything from here on is
                    // dead space. Losses surface through staleness.
                    break;
                }
            }
        }

        for (counter, fl) in self.in_flight.iter_mut() {
            if seen_own.contains(counter) {
                fl.age = 0;
            } else {
                fl.age += 1;
            }
        }

        let mut content: Vec<u8> = Vec::with_capacity(capacity);
        for seg in &kept {
            content.extend_from_slice(seg);
        }

        let mut retransmitted: BTreeSet<u16> = BTreeSet::new();
        for counter in retransmit {
            let Some(fl) = self.in_flight.get_mut(&counter) else {
                continue;
            };
            let frame = Frame::data(own, counter, fl.payload.clone(), fl.with_crc)
                .expect("in-flight frames were validated when queued");
            let bytes = encode_frame(&frame).expect("constructor output is encodable");
            if content.len() + bytes.len() <= capacity {
                content.extend_from_slice(&bytes);
                fl.age = 0;
                report.frames_retransmitted += 1;
                retransmitted.insert(counter);
            }
        }

        while let Some(chunk) = self.send_queue.front() {
            let with_crc = self.config.crc_on_new_frames;
            let encoded = HEADER_BYTES + chunk.len() + if with_crc { CRC_BYTES } else { 0 };
            if content.len() + encoded > capacity {
                break;
            }
            let chunk = self.send_queue.pop_front().expect("front checked above");
            let counter = self.allocate_counter();
            let frame = Frame::data(own, counter, chunk.clone(), with_crc)
                .expect("queued chunks fit the length field");
            content.extend_from_slice(&encode_frame(&frame).expect("fresh frame encodes"));
            self.in_flight.insert(
                counter,
                InFlight {
                    payload: chunk,
                    with_crc,
                    age: 0,
                },
            );
            report.frames_sent += 1;
        }

        let stale: Vec<u16> = self
            .in_flight
            .iter()
            .filter(|(c, fl)| {
                fl.age >= self.config.staleness_threshold
                    && !queries_on_card.contains(c)
                    && !retransmitted.contains(c)
            })
            .map(|(c, _)| *c)
            .collect();
        for counter in stale {
            if content.len() + HEADER_BYTES > capacity {
                break;
            }
            let frame = Frame::status(own, TransmissionStatus::QueryStatus, counter)
                .expect("query status is not Normal");
            content.extend_from_slice(&encode_frame(&frame).expect("status frame encodes"));
            report.frames_queried += 1;
        }

        if content.len() + HEADER_BYTES <= capacity {
            content.extend_from_slice(&[0; HEADER_BYTES]);
        }
        region[..content.len()].copy_from_slice(&content);

        report.payload_bytes_delivered = self.delivered.len() - delivered_before;
        report
    }
}

/// Sector keys a party brings to a contact.
#[derive(Clone, Debug)]
pub struct KeyRing {
    pub default: [u8; 6],
    pub overrides: BTreeMap<u8, [u8; 6]>,
}

impl KeyRing {
    pub fn all_default() -> KeyRing {
        KeyRing {
            default: DEFAULT_KEY,
            overrides: BTreeMap::new(),
        }
    }

    pub fn key_for(&self, sector: u8) -> [u8; 6] {
        self.overrides.get(&sector).copied().unwrap_or(self.default)
    }
}

impl Default for KeyRing {
    fn default() -> KeyRing {
        KeyRing::all_default()
    }
}

/// One contact against a real card image: authenticate sector by
/// sector, assemble the region from the readable spare blocks, run the
/// exchange, and write back only the blocks that changed. Sectors that
/// refuse the offered key are skipped; both parties must bring the
/// same keys for the region to line up.
///
/// The caller marks the physical presentation with
/// [`CardImage::begin_contact`]; business traffic and this exchange
/// share that contact.
pub fn on_contact(
    endpoint: &mut EndpointState,
    card: &mut CardImage,
    region: &CardLayout,
    keys: &KeyRing,
) -> Result<ContactReport, CardError> {
    let mut tokens: BTreeMap<u8, SectorToken> = BTreeMap::new();
    let mut denied: BTreeSet<u8> = BTreeSet::new();
    let mut blocks: Vec<BlockAddress> = Vec::new();
    for addr in region.usable_blocks() {
        if denied.contains(&addr.sector) {
            continue;
        }
        if !tokens.contains_key(&addr.sector) {
            match card.legacy_authenticate(addr.sector, keys.key_for(addr.sector)) {
                Ok(token) => {
                    tokens.insert(addr.sector, token);
                }
                Err(CardError::AuthDenied { .. }) => {
                    denied.insert(addr.sector);
                    continue;
                }
                Err(other) => return Err(other),
            }
        }
        blocks.push(addr);
    }

    let mut originals: Vec<[u8; BLOCK_BYTES]> = Vec::with_capacity(blocks.len());
    let mut buf: Vec<u8> = Vec::with_capacity(blocks.len() * BLOCK_BYTES);
    for addr in &blocks {
        let data = card.read_block(&tokens[&addr.sector], *addr)?;
        originals.push(data);
        buf.extend_from_slice(&data);
    }

    let mut report = endpoint.exchange(&mut buf);
    report.bytes_read = blocks.len() * BLOCK_BYTES;
    report.sectors_skipped = denied.len();

    for (i, addr) in blocks.iter().enumerate() {
        let chunk: [u8; BLOCK_BYTES] = buf[i * BLOCK_BYTES..(i + 1) * BLOCK_BYTES]
            .try_into()
            .expect("region is block aligned");
        if chunk != originals[i] {
            card.write_block(&tokens[&addr.sector], *addr, chunk)?;
            report.bytes_written += BLOCK_BYTES;
        }
    }
    Ok(report)
}

/// Daily movement ceilings for a card shuttling between two readers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DailyCapacity {
    pub card_type: CardType,
    /// Spare bytes per card pass, after structural and service
    /// reservations.
    pub usable_bytes: usize,
    /// Region bytes per day: 2 readers x cards x passes x usable.
    pub raw: u64,
    /// Payload under a flat 6-byte-per-pass overhead estimate.
    pub payload_flat6: u64,
    /// Payload when one bare frame fills the whole region.
    pub payload_frame: u64,
    /// Payload when one CRC frame fills the whole region.
    pub payload_frame_crc: u64,
}

/// Ceiling for `cards` cards passing both readers `passes_per_day`
/// times a day, with the reference service blocks reserved.
pub fn daily_capacity(card_type: CardType, cards: u32, passes_per_day: u32) -> DailyCapacity {
    let layout = CardLayout::new(card_type, &reference_service_blocks(card_type))
        .expect("reference service blocks are valid");
    let s = layout.usable_capacity();
    let passes = 2 * cards as u64 * passes_per_day as u64;
    DailyCapacity {
        card_type,
        usable_bytes: s,
        raw: passes * s as u64,
        payload_flat6: passes * (s as u64 - 6),
        payload_frame: passes * (s as u64 - HEADER_BYTES as u64),
        payload_frame_crc: passes * (s as u64 - (HEADER_BYTES + CRC_BYTES) as u64),
    }
}
