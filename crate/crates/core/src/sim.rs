//! Scenario driver: a campus with an entrance guard and a canteen
//! till, one card per user, four swipes a day. Business runs first on
//! every contact; tampered readers squeeze their covert exchange into
//! the same contact afterwards.
//!
//! The daily pattern per user is guard, canteen, guard, canteen, so
//! each card alternates twice between the two systems. Covert traffic
//! is striped across the whole card population: every chunk carries a
//! global sequence number so the receiving side can stitch the streams
//! back together no matter which card delivered what.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::auth::{
    handshake, AuthError, CaDirectory, HandshakeTranscript, Outcome, ReaderState, SecureCard,
    SecureSession,
};
use crate::card::{
    reference_service_blocks, BlockAddress, CardError, CardImage, CardLayout, CardType,
    BLOCK_BYTES, DEFAULT_KEY,
};
use crate::channel::{on_contact, ChannelConfig, ContactReport, EndpointState, KeyRing};
use crate::frame::Direction;
use crate::suite::AesGcmSuite;

pub const GUARD_APP_ID: u32 = 1;
pub const CANTEEN_APP_ID: u32 = 2;
pub const MEAL_PRICE: u32 = 30;
pub const RECHARGE_AMOUNT: u32 = 100;

const GUARD_SP: u32 = 1;
const CANTEEN_SP: u32 = 2;
const GUARD_READER_RID: u32 = 0x00A1;
const CANTEEN_READER_RID: u32 = 0x00B1;
const HIDDEN_READER_RID: u32 = 0x00A2;

/// Sequence number plus chunk length, prefixed to every striped chunk.
const STRIPE_HEADER: usize = 6;

const SLOTS_PER_DAY: u8 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Shared default sector keys, no handshake.
    Legacy,
    /// Per-card master keys and the four-party handshake.
    Secure,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attack {
    /// No reader is tampered with.
    None,
    /// Both providers' readers carry the covert hook.
    Colluding,
    /// Outsider hooks armed with leaked keys: sector keys in legacy
    /// mode, the peer's app key in secure mode. Never a sealed
    /// command.
    StolenKeys { correct_keys: bool },
    /// A hidden second reader, properly registered to the guard
    /// provider, rides inside the canteen shell.
    TwoReaderShell,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub card_type: CardType,
    pub users: u32,
    pub days: u32,
    pub seed: u64,
    /// Covert payload moved from the guard side to the canteen side.
    pub secret: Vec<u8>,
    /// Covert payload for the opposite direction.
    pub reverse_secret: Vec<u8>,
    pub mode: Mode,
    pub attack: Attack,
    /// Payload bytes per frame; 0 picks the largest size that fits
    /// the region (halved when both directions carry traffic).
    pub per_frame_payload: usize,
    pub crc_frames: bool,
    /// Per hook contact probability that the region write is cut off
    /// at a random offset.
    pub fault_truncate: f64,
    /// Per hook contact probability that one region bit flips.
    pub fault_corrupt: f64,
}

impl ScenarioConfig {
    pub fn new(card_type: CardType, users: u32, days: u32, seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            card_type,
            users,
            days,
            seed,
            secret: Vec::new(),
            reverse_secret: Vec::new(),
            mode: Mode::Legacy,
            attack: Attack::Colluding,
            per_frame_payload: 0,
            crc_frames: true,
            fault_truncate: 0.0,
            fault_corrupt: 0.0,
        }
    }
}

#[derive(Error, Debug)]
pub enum SimError {
    #[error(transparent)]
    Card(#[from] CardError),
    #[error(transparent)]
    Auth(#[from] AuthError),
    #[error("account for tid {} already exists", hex::encode(.0))]
    DuplicateAccount([u8; 8]),
    #[error("no account for tid {}", hex::encode(.0))]
    UnknownAccount([u8; 8]),
    #[error("{0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessRow {
    pub day: u32,
    pub slot: u8,
    pub user: u32,
    pub allowed: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TollAction {
    Recharge,
    Pay,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TollRow {
    pub day: u32,
    pub slot: u8,
    pub user: u32,
    pub action: TollAction,
    pub amount: u32,
    pub balance_after: u32,
    pub ok: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanteenAccountRow {
    pub tid_hex: String,
    pub user: u32,
    pub username: String,
    pub balance: u32,
}

/// Everything the two legitimate systems produced: used to prove the
/// hooks change nothing a provider can see in its books.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BusinessSnapshot {
    pub guard_enrolled: u32,
    pub guard_log: Vec<AccessRow>,
    pub canteen_accounts: Vec<CanteenAccountRow>,
    pub canteen_log: Vec<TollRow>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub card_type: CardType,
    pub mode: Mode,
    pub attack: Attack,
    pub users: u32,
    pub days: u32,
    pub seed: u64,
    pub usable_bytes: u64,
    pub per_frame_payload: u64,
    pub swipes: u64,
    /// Region bytes the hooks physically rewrote.
    pub raw_bytes: u64,
    /// Secret bytes reassembled in order at each receiving side.
    pub payload_bytes_a_to_b: u64,
    pub payload_bytes_b_to_a: u64,
    pub retransmissions: u64,
    pub sectors_skipped: u64,
    pub business_errors: u64,
    /// Covert handshake attempts the protocol turned away.
    pub covert_denials: u64,
    /// Contacts in which a card accepted two different reader serials.
    pub double_read_flags: u64,
    pub secret_sha256: String,
    pub delivered_a_to_b_sha256: String,
    pub reverse_secret_sha256: String,
    pub delivered_b_to_a_sha256: String,
    /// True when every secret byte arrived; trivially true for an
    /// empty secret.
    pub a_to_b_complete: bool,
    pub b_to_a_complete: bool,
}

pub struct ScenarioOutcome {
    pub report: ScenarioReport,
    pub business: BusinessSnapshot,
    pub delivered_a_to_b: Vec<u8>,
    pub delivered_b_to_a: Vec<u8>,
    pub transcripts: Vec<HandshakeTranscript>,
}

/// Deterministic filler bytes, e.g. for generated secrets.
pub fn seeded_bytes(seed: u64, label: &str, n: usize) -> Vec<u8> {
    let mut rng = stream(seed, label);
    let mut out = vec![0u8; n];
    rng.fill_bytes(&mut out);
    out
}

/// Deterministic card serial for user `i`.
pub fn user_tid(i: u32) -> [u8; 8] {
    let mut tid = [0u8; 8];
    tid[..4].copy_from_slice(&(i + 1).to_be_bytes());
    tid[4..].copy_from_slice(b"CARD");
    tid
}

/// One card, reachable either through bare sector keys or through an
/// authenticated session.
pub enum CardHandle<'a> {
    Legacy(&'a mut CardImage),
    Secure {
        card: &'a mut SecureCard,
        session: &'a SecureSession,
    },
}

impl CardHandle<'_> {
    pub fn tid(&self) -> [u8; 8] {
        match self {
            CardHandle::Legacy(card) => card.tid(),
            CardHandle::Secure { card, .. } => card.tid(),
        }
    }

    fn read(&self, addr: BlockAddress) -> Result<[u8; BLOCK_BYTES], SimError> {
        match self {
            CardHandle::Legacy(card) => {
                let token = card.legacy_authenticate(addr.sector, DEFAULT_KEY)?;
                Ok(card.read_block(&token, addr)?)
            }
            CardHandle::Secure { card, session } => Ok(card.secure_read(session, addr)?),
        }
    }

    fn write(&mut self, addr: BlockAddress, data: [u8; BLOCK_BYTES]) -> Result<(), SimError> {
        match self {
            CardHandle::Legacy(card) => {
                let token = card.legacy_authenticate(addr.sector, DEFAULT_KEY)?;
                Ok(card.write_block(&token, addr, data)?)
            }
            CardHandle::Secure { card, session } => Ok(card.secure_write(session, addr, data)?),
        }
    }
}

/// Access control at the gates: an account row per card, a log row
/// per check.
#[derive(Clone, Debug, Default)]
pub struct EntranceGuard {
    accounts: BTreeMap<[u8; 8], u32>,
    log: Vec<AccessRow>,
}

impl EntranceGuard {
    pub fn new() -> EntranceGuard {
        EntranceGuard::default()
    }

    pub fn create_account(&mut self, tid: [u8; 8], user: u32) -> Result<(), SimError> {
        if self.accounts.contains_key(&tid) {
            return Err(SimError::DuplicateAccount(tid));
        }
        self.accounts.insert(tid, user);
        Ok(())
    }

    pub fn enrolled(&self) -> u32 {
        self.accounts.len() as u32
    }

    /// Records a decision that was already made, e.g. by a completed
    /// handshake standing in for the card read.
    pub fn note_access(&mut self, tid: [u8; 8], day: u32, slot: u8, granted: bool) -> AccessRow {
        let (user, allowed) = match self.accounts.get(&tid) {
            Some(&user) => (user, granted),
            None => (u32::MAX, false),
        };
        let row = AccessRow {
            day,
            slot,
            user,
            allowed,
        };
        self.log.push(row);
        row
    }

    /// Legacy check: read the card serial off the manufacturer block
    /// and look it up.
    pub fn check_access(
        &mut self,
        card: &CardImage,
        day: u32,
        slot: u8,
    ) -> Result<AccessRow, SimError> {
        let token = card.legacy_authenticate(0, DEFAULT_KEY)?;
        let block = card.read_block(&token, BlockAddress { sector: 0, block: 0 })?;
        let mut tid = [0u8; 8];
        tid.copy_from_slice(&block[..8]);
        Ok(self.note_access(tid, day, slot, true))
    }

    pub fn log(&self) -> &[AccessRow] {
        &self.log
    }
}

#[derive(Clone, Debug)]
struct CanteenAccount {
    user: u32,
    username: String,
    balance: u32,
}

/// Stored-value till: username and balance live on the card, the
/// till keeps a mirror and flags any disagreement.
#[derive(Clone, Debug)]
pub struct CanteenToll {
    username_block: BlockAddress,
    balance_block: BlockAddress,
    accounts: BTreeMap<[u8; 8], CanteenAccount>,
    log: Vec<TollRow>,
    mismatches: u64,
}

impl CanteenToll {
    pub fn new(card_type: CardType) -> CanteenToll {
        let service = reference_service_blocks(card_type);
        CanteenToll {
            username_block: service[0],
            balance_block: service[1],
            accounts: BTreeMap::new(),
            log: Vec::new(),
            mismatches: 0,
        }
    }

    pub fn create_account(&mut self, card: &mut CardHandle<'_>, user: u32) -> Result<(), SimError> {
        let tid = card.tid();
        if self.accounts.contains_key(&tid) {
            return Err(SimError::DuplicateAccount(tid));
        }
        let username = format!("user-{user}");
        let mut name_block = [0u8; BLOCK_BYTES];
        let n = username.len().min(BLOCK_BYTES);
        name_block[..n].copy_from_slice(&username.as_bytes()[..n]);
        card.write(self.username_block, name_block)?;
        card.write(self.balance_block, [0u8; BLOCK_BYTES])?;
        self.accounts.insert(
            tid,
            CanteenAccount {
                user,
                username,
                balance: 0,
            },
        );
        Ok(())
    }

    pub fn enrolled(&self) -> u32 {
        self.accounts.len() as u32
    }

    pub fn balance_of(&self, tid: [u8; 8]) -> Option<u32> {
        self.accounts.get(&tid).map(|a| a.balance)
    }

    pub fn recharge(
        &mut self,
        card: &mut CardHandle<'_>,
        day: u32,
        slot: u8,
        amount: u32,
    ) -> Result<TollRow, SimError> {
        self.transact(card, day, slot, TollAction::Recharge, amount)
    }

    pub fn pay(
        &mut self,
        card: &mut CardHandle<'_>,
        day: u32,
        slot: u8,
        amount: u32,
    ) -> Result<TollRow, SimError> {
        self.transact(card, day, slot, TollAction::Pay, amount)
    }

    fn transact(
        &mut self,
        card: &mut CardHandle<'_>,
        day: u32,
        slot: u8,
        action: TollAction,
        amount: u32,
    ) -> Result<TollRow, SimError> {
        let tid = card.tid();
        let account = self
            .accounts
            .get(&tid)
            .ok_or(SimError::UnknownAccount(tid))?;
        let on_card = u32::from_be_bytes(self.card_balance_bytes(card)?);
        if on_card != account.balance {
            self.mismatches += 1;
        }
        let (new_balance, ok) = match action {
            TollAction::Recharge => (on_card.saturating_add(amount), true),
            TollAction::Pay if on_card >= amount => (on_card - amount, true),
            TollAction::Pay => (on_card, false),
        };
        if ok {
            let mut block = [0u8; BLOCK_BYTES];
            block[..4].copy_from_slice(&new_balance.to_be_bytes());
            card.write(self.balance_block, block)?;
        }
        let user = account.user;
        self.accounts.get_mut(&tid).unwrap().balance = new_balance;
        let row = TollRow {
            day,
            slot,
            user,
            action,
            amount,
            balance_after: new_balance,
            ok,
        };
        self.log.push(row);
        Ok(row)
    }

    fn card_balance_bytes(&self, card: &CardHandle<'_>) -> Result<[u8; 4], SimError> {
        let block = card.read(self.balance_block)?;
        let mut out = [0u8; 4];
        out.copy_from_slice(&block[..4]);
        Ok(out)
    }

    pub fn log(&self) -> &[TollRow] {
        &self.log
    }

    pub fn mismatches(&self) -> u64 {
        self.mismatches
    }

    fn account_rows(&self) -> Vec<CanteenAccountRow> {
        self.accounts
            .iter()
            .map(|(tid, a)| CanteenAccountRow {
                tid_hex: hex::encode(tid),
                user: a.user,
                username: a.username.clone(),
                balance: a.balance,
            })
            .collect()
    }
}

/// Cuts one byte stream into sequence-numbered chunks and feeds them
/// to per-card endpoints one at a time.
struct Striper {
    data: Vec<u8>,
    cursor: usize,
    next_seq: u32,
    chunk: usize,
}

impl Striper {
    fn new(data: Vec<u8>, chunk: usize) -> Striper {
        Striper {
            data,
            cursor: 0,
            next_seq: 0,
            chunk,
        }
    }

    fn feed(&mut self, endpoint: &mut EndpointState) {
        if self.cursor >= self.data.len() || endpoint.queued_chunks() > 0 {
            return;
        }
        let n = self.chunk.min(self.data.len() - self.cursor);
        let mut msg = Vec::with_capacity(STRIPE_HEADER + n);
        msg.extend_from_slice(&self.next_seq.to_be_bytes());
        msg.extend_from_slice(&(n as u16).to_be_bytes());
        msg.extend_from_slice(&self.data[self.cursor..self.cursor + n]);
        endpoint.queue_message(&msg);
        self.cursor += n;
        self.next_seq += 1;
    }
}

/// Collects chunks from every card's delivery stream and re-emits the
/// original byte order.
struct Destriper {
    parsed: Vec<usize>,
    chunks: BTreeMap<u32, Vec<u8>>,
    next_seq: u32,
    out: Vec<u8>,
}

impl Destriper {
    fn new(cards: usize) -> Destriper {
        Destriper {
            parsed: vec![0; cards],
            chunks: BTreeMap::new(),
            next_seq: 0,
            out: Vec::new(),
        }
    }

    fn absorb(&mut self, card: usize, delivered: &[u8]) {
        let mut off = self.parsed[card];
        while delivered.len() - off >= STRIPE_HEADER {
            let mut seq = [0u8; 4];
            seq.copy_from_slice(&delivered[off..off + 4]);
            let len = u16::from_be_bytes([delivered[off + 4], delivered[off + 5]]) as usize;
            if delivered.len() - off - STRIPE_HEADER < len {
                break;
            }
            let body = delivered[off + STRIPE_HEADER..off + STRIPE_HEADER + len].to_vec();
            self.chunks.insert(u32::from_be_bytes(seq), body);
            off += STRIPE_HEADER + len;
        }
        self.parsed[card] = off;
        while let Some(body) = self.chunks.remove(&self.next_seq) {
            self.out.extend_from_slice(&body);
            self.next_seq += 1;
        }
    }
}

fn stream(seed: u64, label: &str) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    ChaCha20Rng::from_seed(h.finalize().into())
}

fn bernoulli(rng: &mut ChaCha20Rng, p: f64) -> bool {
    if p <= 0.0 {
        return false;
    }
    if p >= 1.0 {
        return true;
    }
    let unit = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    unit < p
}

/// Contact-loss model, applied after a hook wrote the region: a write
/// cut off partway (card pulled early) or a single flipped bit.
fn apply_faults(
    image: &mut CardImage,
    blocks: &[BlockAddress],
    rng: &mut ChaCha20Rng,
    truncate_p: f64,
    corrupt_p: f64,
) -> Result<(), CardError> {
    let total = blocks.len() * BLOCK_BYTES;
    if total == 0 {
        return Ok(());
    }
    if bernoulli(rng, truncate_p) {
        let start = (rng.next_u64() as usize) % total;
        for (i, &addr) in blocks.iter().enumerate() {
            let lo = i * BLOCK_BYTES;
            if lo + BLOCK_BYTES <= start {
                continue;
            }
            let mut data = image.raw_read(addr)?;
            for byte in lo.max(start)..lo + BLOCK_BYTES {
                data[byte - lo] = 0;
            }
            image.raw_write(addr, data)?;
        }
    }
    if bernoulli(rng, corrupt_p) {
        let bit = (rng.next_u64() as usize) % (total * 8);
        let addr = blocks[bit / 8 / BLOCK_BYTES];
        let mut data = image.raw_read(addr)?;
        data[bit / 8 % BLOCK_BYTES] ^= 1 << (bit % 8);
        image.raw_write(addr, data)?;
    }
    Ok(())
}

/// Covert exchange through an authenticated session: read the app
/// region, run the frame walk, write back only changed blocks.
fn secure_exchange(
    endpoint: &mut EndpointState,
    card: &mut SecureCard,
    session: &SecureSession,
    blocks: &[BlockAddress],
) -> Result<ContactReport, SimError> {
    let mut originals = Vec::with_capacity(blocks.len());
    let mut region = Vec::with_capacity(blocks.len() * BLOCK_BYTES);
    for &addr in blocks {
        let data = card.secure_read(session, addr)?;
        originals.push(data);
        region.extend_from_slice(&data);
    }
    let mut report = endpoint.exchange(&mut region);
    report.bytes_read = region.len();
    for (i, &addr) in blocks.iter().enumerate() {
        let mut block = [0u8; BLOCK_BYTES];
        block.copy_from_slice(&region[i * BLOCK_BYTES..(i + 1) * BLOCK_BYTES]);
        if block != originals[i] {
            card.secure_write(session, addr, block)?;
            report.bytes_written += BLOCK_BYTES;
        }
    }
    Ok(report)
}

fn auto_frame_payload(usable: usize, crc: bool, bidirectional: bool) -> usize {
    let overhead = if crc { 8 } else { 4 };
    if bidirectional {
        (usable.saturating_sub(4)) / 2 - overhead.min((usable.saturating_sub(4)) / 2)
    } else {
        usable.saturating_sub(overhead)
    }
}

struct Tally {
    swipes: u64,
    raw_bytes: u64,
    retransmissions: u64,
    sectors_skipped: u64,
    covert_denials: u64,
    business_errors: u64,
}

impl Tally {
    fn new() -> Tally {
        Tally {
            swipes: 0,
            raw_bytes: 0,
            retransmissions: 0,
            sectors_skipped: 0,
            covert_denials: 0,
            business_errors: 0,
        }
    }

    fn absorb(&mut self, report: &ContactReport) {
        self.raw_bytes += report.bytes_written as u64;
        self.retransmissions += report.frames_retransmitted as u64;
        self.sectors_skipped += report.sectors_skipped as u64;
    }
}

pub fn run_scenario(config: &ScenarioConfig) -> Result<ScenarioOutcome, SimError> {
    if config.users > 100_000 {
        return Err(SimError::InvalidConfig(format!(
            "{} users is past the supported population",
            config.users
        )));
    }
    for (name, p) in [
        ("fault_truncate", config.fault_truncate),
        ("fault_corrupt", config.fault_corrupt),
    ] {
        if !(0.0..=1.0).contains(&p) {
            return Err(SimError::InvalidConfig(format!(
                "{name} must be a probability, got {p}"
            )));
        }
    }
    let service = reference_service_blocks(config.card_type);
    let hook_layout = CardLayout::new(config.card_type, &service)?;
    let usable = hook_layout.usable_capacity();
    let bidirectional = !config.secret.is_empty() && !config.reverse_secret.is_empty();
    let per_frame = if config.per_frame_payload == 0 {
        auto_frame_payload(usable, config.crc_frames, bidirectional)
    } else {
        config.per_frame_payload
    };
    let wire_overhead = if config.crc_frames { 8 } else { 4 };
    if per_frame <= STRIPE_HEADER {
        return Err(SimError::InvalidConfig(format!(
            "per-frame payload {per_frame} cannot carry the {STRIPE_HEADER}-byte chunk header"
        )));
    }
    if per_frame + wire_overhead > usable {
        return Err(SimError::InvalidConfig(format!(
            "per-frame payload {per_frame} never fits the {usable}-byte region"
        )));
    }
    match config.mode {
        Mode::Legacy => run_legacy(config, &hook_layout, per_frame),
        Mode::Secure => run_secure(config, &hook_layout, per_frame),
    }
}

fn channel_endpoints(config: &ScenarioConfig, per_frame: usize) -> (Vec<EndpointState>, Vec<EndpointState>) {
    let make = |direction: Direction| ChannelConfig {
        direction,
        per_frame_payload: per_frame,
        crc_on_new_frames: config.crc_frames,
        staleness_threshold: 2,
    };
    let a = (0..config.users)
        .map(|_| EndpointState::new(make(Direction::AToB)))
        .collect();
    let b = (0..config.users)
        .map(|_| EndpointState::new(make(Direction::BToA)))
        .collect();
    (a, b)
}

fn finish(
    config: &ScenarioConfig,
    usable: usize,
    per_frame: usize,
    tally: Tally,
    guard: EntranceGuard,
    canteen: CanteenToll,
    fwd: Destriper,
    rev: Destriper,
    double_read_flags: u64,
    transcripts: Vec<HandshakeTranscript>,
) -> ScenarioOutcome {
    let business = BusinessSnapshot {
        guard_enrolled: guard.enrolled(),
        guard_log: guard.log().to_vec(),
        canteen_accounts: canteen.account_rows(),
        canteen_log: canteen.log().to_vec(),
    };
    let sha_hex = |bytes: &[u8]| hex::encode(Sha256::digest(bytes));
    let report = ScenarioReport {
        card_type: config.card_type,
        mode: config.mode,
        attack: config.attack,
        users: config.users,
        days: config.days,
        seed: config.seed,
        usable_bytes: usable as u64,
        per_frame_payload: per_frame as u64,
        swipes: tally.swipes,
        raw_bytes: tally.raw_bytes,
        payload_bytes_a_to_b: fwd.out.len() as u64,
        payload_bytes_b_to_a: rev.out.len() as u64,
        retransmissions: tally.retransmissions,
        sectors_skipped: tally.sectors_skipped,
        business_errors: tally.business_errors + canteen.mismatches(),
        covert_denials: tally.covert_denials,
        double_read_flags,
        secret_sha256: sha_hex(&config.secret),
        delivered_a_to_b_sha256: sha_hex(&fwd.out),
        reverse_secret_sha256: sha_hex(&config.reverse_secret),
        delivered_b_to_a_sha256: sha_hex(&rev.out),
        a_to_b_complete: fwd.out == config.secret,
        b_to_a_complete: rev.out == config.reverse_secret,
    };
    ScenarioOutcome {
        report,
        business,
        delivered_a_to_b: fwd.out,
        delivered_b_to_a: rev.out,
        transcripts,
    }
}

fn run_legacy(
    config: &ScenarioConfig,
    hook_layout: &CardLayout,
    per_frame: usize,
) -> Result<ScenarioOutcome, SimError> {
    let service = reference_service_blocks(config.card_type);
    let hooks_active = config.attack != Attack::None;
    let hook_keys = match config.attack {
        Attack::StolenKeys {
            correct_keys: false,
        } => KeyRing {
            default: [0u8; 6],
            overrides: BTreeMap::new(),
        },
        _ => KeyRing::all_default(),
    };

    let mut guard = EntranceGuard::new();
    let mut canteen = CanteenToll::new(config.card_type);
    let mut cards = Vec::with_capacity(config.users as usize);
    for i in 0..config.users {
        let mut card = CardImage::new_card(config.card_type, user_tid(i), &service)?;
        card.begin_contact();
        guard.create_account(card.tid(), i)?;
        let mut handle = CardHandle::Legacy(&mut card);
        canteen.create_account(&mut handle, i)?;
        cards.push(card);
    }

    let (mut eps_a, mut eps_b) = channel_endpoints(config, per_frame);
    let mut striper_a = Striper::new(config.secret.clone(), per_frame - STRIPE_HEADER);
    let mut striper_b = Striper::new(config.reverse_secret.clone(), per_frame - STRIPE_HEADER);
    let mut fwd = Destriper::new(config.users as usize);
    let mut rev = Destriper::new(config.users as usize);
    let mut fault_rng = stream(config.seed, "faults");
    let mut tally = Tally::new();

    for day in 1..=config.days {
        for slot in 0..SLOTS_PER_DAY {
            for u in 0..config.users as usize {
                let card = &mut cards[u];
                card.begin_contact();
                tally.swipes += 1;
                if slot % 2 == 0 {
                    guard.check_access(card, day, slot)?;
                    if hooks_active {
                        striper_a.feed(&mut eps_a[u]);
                        let report = on_contact(&mut eps_a[u], card, hook_layout, &hook_keys)?;
                        tally.absorb(&report);
                        apply_faults(
                            card,
                            &hook_layout.usable_blocks(),
                            &mut fault_rng,
                            config.fault_truncate,
                            config.fault_corrupt,
                        )?;
                        rev.absorb(u, eps_a[u].delivered());
                    }
                } else {
                    let mut handle = CardHandle::Legacy(card);
                    run_toll_slot(&mut canteen, &mut handle, day, slot)?;
                    if hooks_active {
                        striper_b.feed(&mut eps_b[u]);
                        let report = on_contact(&mut eps_b[u], card, hook_layout, &hook_keys)?;
                        tally.absorb(&report);
                        apply_faults(
                            card,
                            &hook_layout.usable_blocks(),
                            &mut fault_rng,
                            config.fault_truncate,
                            config.fault_corrupt,
                        )?;
                        fwd.absorb(u, eps_b[u].delivered());
                    }
                }
            }
        }
    }

    Ok(finish(
        config,
        hook_layout.usable_capacity(),
        per_frame,
        tally,
        guard,
        canteen,
        fwd,
        rev,
        0,
        Vec::new(),
    ))
}

fn run_toll_slot(
    canteen: &mut CanteenToll,
    handle: &mut CardHandle<'_>,
    day: u32,
    slot: u8,
) -> Result<(), SimError> {
    let balance = canteen.balance_of(handle.tid()).unwrap_or(0);
    if balance < MEAL_PRICE {
        canteen.recharge(handle, day, slot, RECHARGE_AMOUNT)?;
    }
    canteen.pay(handle, day, slot, MEAL_PRICE)?;
    Ok(())
}

fn run_secure(
    config: &ScenarioConfig,
    hook_layout: &CardLayout,
    per_frame: usize,
) -> Result<ScenarioOutcome, SimError> {
    let service = reference_service_blocks(config.card_type);
    let guard_region = hook_layout.usable_blocks();
    let suite = AesGcmSuite;
    let mut issue_rng = stream(config.seed, "issue");
    let mut auth_rng = stream(config.seed, "auth");
    let mut fault_rng = stream(config.seed, "faults");

    let mut ca = CaDirectory::new(&mut issue_rng);
    ca.define_app(GUARD_APP_ID, guard_region.clone())?;
    ca.define_app(CANTEEN_APP_ID, service.to_vec())?;
    ca.register_sp(GUARD_SP);
    ca.register_sp(CANTEEN_SP);

    let mut guard_reader = ReaderState::new(GUARD_READER_RID)?;
    ca.register_reader(GUARD_SP, &mut guard_reader, GUARD_APP_ID, &mut issue_rng)?;
    let mut canteen_reader = ReaderState::new(CANTEEN_READER_RID)?;
    ca.register_reader(CANTEEN_SP, &mut canteen_reader, CANTEEN_APP_ID, &mut issue_rng)?;

    // Hooks with leaked material: the peer provider's app key lands on
    // the tampered reader, but no CA-sealed command ever does.
    match config.attack {
        Attack::Colluding => {
            guard_reader.install_app(CANTEEN_APP_ID, ca.app_key_of(CANTEEN_APP_ID).unwrap());
            canteen_reader.install_app(GUARD_APP_ID, ca.app_key_of(GUARD_APP_ID).unwrap());
        }
        Attack::StolenKeys { correct_keys } => {
            let (guard_side, canteen_side) = if correct_keys {
                (
                    ca.app_key_of(CANTEEN_APP_ID).unwrap(),
                    ca.app_key_of(GUARD_APP_ID).unwrap(),
                )
            } else {
                (
                    crate::suite::Key::from_bytes([0x5A; 16]),
                    crate::suite::Key::from_bytes([0xA5; 16]),
                )
            };
            guard_reader.install_app(CANTEEN_APP_ID, guard_side);
            canteen_reader.install_app(GUARD_APP_ID, canteen_side);
        }
        Attack::None | Attack::TwoReaderShell => {}
    }
    let mut hidden_reader = None;
    if config.attack == Attack::TwoReaderShell {
        let mut hidden = ReaderState::new(HIDDEN_READER_RID)?;
        ca.register_reader(GUARD_SP, &mut hidden, GUARD_APP_ID, &mut issue_rng)?;
        hidden_reader = Some(hidden);
    }

    let mut guard = EntranceGuard::new();
    let mut canteen = CanteenToll::new(config.card_type);
    let mut transcripts: Vec<HandshakeTranscript> = Vec::new();
    let mut tally = Tally::new();

    let mut cards = Vec::with_capacity(config.users as usize);
    for i in 0..config.users {
        let image = CardImage::new_card(config.card_type, user_tid(i), &[])?;
        let mut card = ca.issue_card(image, &mut issue_rng)?;
        guard.create_account(card.tid(), i)?;
        card.begin_contact();
        let sp = ca.sp_directory(CANTEEN_SP).unwrap();
        let (t, session) = handshake(
            &canteen_reader,
            &mut card,
            sp,
            CANTEEN_APP_ID,
            &mut auth_rng,
            &suite,
        )?;
        transcripts.push(t);
        match session {
            Some(session) => {
                let mut handle = CardHandle::Secure {
                    card: &mut card,
                    session: &session,
                };
                canteen.create_account(&mut handle, i)?;
            }
            None => tally.business_errors += 1,
        }
        cards.push(card);
    }

    let (mut eps_a, mut eps_b) = channel_endpoints(config, per_frame);
    let mut striper_a = Striper::new(config.secret.clone(), per_frame - STRIPE_HEADER);
    let mut striper_b = Striper::new(config.reverse_secret.clone(), per_frame - STRIPE_HEADER);
    let mut fwd = Destriper::new(config.users as usize);
    let mut rev = Destriper::new(config.users as usize);

    for day in 1..=config.days {
        for slot in 0..SLOTS_PER_DAY {
            for u in 0..config.users as usize {
                let card = &mut cards[u];
                card.begin_contact();
                tally.swipes += 1;
                if slot % 2 == 0 {
                    let sp = ca.sp_directory(GUARD_SP).unwrap();
                    let (t, session) = handshake(
                        &guard_reader,
                        card,
                        sp,
                        GUARD_APP_ID,
                        &mut auth_rng,
                        &suite,
                    )?;
                    transcripts.push(t);
                    let granted = session.is_some();
                    guard.note_access(card.tid(), day, slot, granted);
                    if !granted {
                        tally.business_errors += 1;
                    }
                    match config.attack {
                        Attack::Colluding | Attack::StolenKeys { .. } => {
                            covert_attempt(
                                &guard_reader,
                                card,
                                &ca,
                                GUARD_SP,
                                CANTEEN_APP_ID,
                                &mut auth_rng,
                                &suite,
                                &mut transcripts,
                                &mut tally,
                            )?;
                        }
                        Attack::TwoReaderShell => {
                            if let Some(session) = &session {
                                striper_a.feed(&mut eps_a[u]);
                                let report =
                                    secure_exchange(&mut eps_a[u], card, session, &guard_region)?;
                                tally.absorb(&report);
                                apply_faults(
                                    card.image_mut(),
                                    &guard_region,
                                    &mut fault_rng,
                                    config.fault_truncate,
                                    config.fault_corrupt,
                                )?;
                                rev.absorb(u, eps_a[u].delivered());
                            }
                        }
                        Attack::None => {}
                    }
                } else {
                    let sp = ca.sp_directory(CANTEEN_SP).unwrap();
                    let (t, session) = handshake(
                        &canteen_reader,
                        card,
                        sp,
                        CANTEEN_APP_ID,
                        &mut auth_rng,
                        &suite,
                    )?;
                    transcripts.push(t);
                    match session {
                        Some(session) => {
                            let mut handle = CardHandle::Secure {
                                card,
                                session: &session,
                            };
                            run_toll_slot(&mut canteen, &mut handle, day, slot)?;
                        }
                        None => tally.business_errors += 1,
                    }
                    match config.attack {
                        Attack::Colluding | Attack::StolenKeys { .. } => {
                            covert_attempt(
                                &canteen_reader,
                                card,
                                &ca,
                                CANTEEN_SP,
                                GUARD_APP_ID,
                                &mut auth_rng,
                                &suite,
                                &mut transcripts,
                                &mut tally,
                            )?;
                        }
                        Attack::TwoReaderShell => {
                            let hidden = hidden_reader.as_ref().unwrap();
                            let sp = ca.sp_directory(GUARD_SP).unwrap();
                            let (t, session) =
                                handshake(hidden, card, sp, GUARD_APP_ID, &mut auth_rng, &suite)?;
                            transcripts.push(t);
                            match session {
                                Some(session) => {
                                    striper_b.feed(&mut eps_b[u]);
                                    let report = secure_exchange(
                                        &mut eps_b[u],
                                        card,
                                        &session,
                                        &guard_region,
                                    )?;
                                    tally.absorb(&report);
                                    apply_faults(
                                        card.image_mut(),
                                        &guard_region,
                                        &mut fault_rng,
                                        config.fault_truncate,
                                        config.fault_corrupt,
                                    )?;
                                    fwd.absorb(u, eps_b[u].delivered());
                                }
                                None => tally.covert_denials += 1,
                            }
                        }
                        Attack::None => {}
                    }
                }
            }
        }
    }

    let double_read_flags = cards.iter().map(|c| c.double_read_flags()).sum();
    Ok(finish(
        config,
        hook_layout.usable_capacity(),
        per_frame,
        tally,
        guard,
        canteen,
        fwd,
        rev,
        double_read_flags,
        transcripts,
    ))
}

/// One covert handshake attempt against an app the reader was never
/// granted. Counts the denial; an accept would be a protocol hole, so
/// it feeds no traffic and is left visible in the transcript list.
#[allow(clippy::too_many_arguments)]
fn covert_attempt(
    reader: &ReaderState,
    card: &mut SecureCard,
    ca: &CaDirectory,
    sp_id: u32,
    target_app: u32,
    rng: &mut ChaCha20Rng,
    suite: &AesGcmSuite,
    transcripts: &mut Vec<HandshakeTranscript>,
    tally: &mut Tally,
) -> Result<(), SimError> {
    let sp = ca.sp_directory(sp_id).unwrap();
    let (t, session) = handshake(reader, card, sp, target_app, rng, suite)?;
    let rejected = matches!(t.outcome, Outcome::Rejected { .. });
    transcripts.push(t);
    if rejected || session.is_none() {
        tally.covert_denials += 1;
    }
    Ok(())
}
