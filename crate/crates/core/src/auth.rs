//! Four-party authentication between readers, tags, service providers
//! and a certificate authority, with per-application access control on
//! the tag.
//!
//! A handshake runs over the public reader-tag channel:
//!
//! ```text
//! m1   reader -> tag   challenge nonce r1
//! m2   tag -> reader   hash(tid xor r1) || E_mk(r1 || r2)
//! m4   reader -> tag   E_mk(app || E_appk(r2 || r3) || rid)
//! m5a  tag -> reader   E_appk(r3 || "Query Auth" || app)   only if rid unlisted
//! m5b  reader -> tag   E_appk(r3 || command)
//! m6   tag -> reader   E_sk("SKCONFRM" || r3)
//! ```
//!
//! Between m2 and m4 the reader resolves the tag through its service
//! provider's directory (step 3). That leg runs on the provider's own
//! network, never on the tag channel, so it does not appear in
//! transcripts. The session key sk is derived from r2 and r3, which
//! travel only under the master and application keys.
//!
//! Each tag keeps a short white list of reader serials per
//! application. Listed readers get a session immediately; unlisted
//! ones must present a command sealed by the authority for exactly
//! this reader, application and version. Commands go stale when the
//! authority bumps the version, which also sweeps the list on first
//! use, so reassigning an application revokes every old reader at
//! once.

use crate::card::{BlockAddress, CardError, CardImage, CardLayout, BLOCK_BYTES};
use crate::suite::{AesGcmSuite, CryptoSuite, Key, ENC_OVERHEAD, HASH_BYTES, KEY_BYTES};
use rand::RngCore;
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use thiserror::Error;

/// Width of the challenge nonces r1, r2 and r3.
pub const NONCE_BYTES: usize = 8;

/// White list slots per application on a tag.
pub const WHITE_LIST_CAPACITY: usize = 8;

/// Frequentness given to a freshly inserted white list entry.
pub const FREQUENTNESS_INITIAL: u8 = 8;

/// Frequentness ceiling; entries saturate here.
pub const FREQUENTNESS_CAP: u8 = 15;

/// Reader serials must fit in this many bits.
pub const RID_BITS: u32 = 28;

const QUERY_AUTH: &[u8; 10] = b"Query Auth";
const KEY_CONFIRM: &[u8; 8] = b"SKCONFRM";
const COMMAND_PLAINTEXT_BYTES: usize = 10;
const COMMAND_BYTES: usize = COMMAND_PLAINTEXT_BYTES + ENC_OVERHEAD;
const INNER_BLOB_BYTES: usize = 2 * NONCE_BYTES + ENC_OVERHEAD;

#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum AuthError {
    #[error("reader serial {0:#x} does not fit in 28 bits")]
    RidTooWide(u32),
    #[error("app {0} is already defined")]
    DuplicateApp(u32),
    #[error("app {0} is not defined")]
    UnknownApp(u32),
    #[error("provider {0} is not registered")]
    UnknownSp(u32),
    #[error("tid {tid} was already issued", tid = hex::encode(.0))]
    DuplicateTid([u8; 8]),
    #[error("reader serial {rid:#x} is registered to provider {owner}")]
    RidOwnedByOtherSp { rid: u32, owner: u32 },
    #[error("app {app_id} is granted to provider {owner}")]
    AppOwnedByOtherSp { app_id: u32, owner: u32 },
    #[error("reader serial {rid:#x} already holds a grant for app {app_id}")]
    DuplicateGrant { rid: u32, app_id: u32 },
    #[error("no grant for reader serial {rid:#x} on app {app_id}")]
    UnknownGrant { rid: u32, app_id: u32 },
    #[error("reader holds no key for app {0}")]
    ReaderMissingApp(u32),
    #[error("app {app_id} region block {addr} overlaps app {other}")]
    RegionOverlap {
        app_id: u32,
        addr: BlockAddress,
        other: u32,
    },
    #[error("app {app_id} region block {addr} is reserved or absent")]
    RegionInvalid { app_id: u32, addr: BlockAddress },
    #[error("session does not cover block {addr}")]
    AccessDenied { addr: BlockAddress },
    #[error("session is from a previous contact")]
    StaleSession,
    #[error("{context} csv line {line}: {problem}")]
    BadCsv {
        context: &'static str,
        line: usize,
        problem: String,
    },
    #[error(transparent)]
    Card(#[from] CardError),
}

/// Why a handshake was refused.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RejectReason {
    /// A tag-to-reader message failed decryption or echoed the wrong
    /// nonce.
    BadTagEcho,
    /// No directory row matched the tid hash.
    UnknownTid,
    /// A reader-to-tag message failed decryption or echoed the wrong
    /// nonce.
    BadReaderEcho,
    /// The tag asked for a command and the reader had none.
    NotWhitelistedNoCommand,
    /// The presented command was not sealed for this reader and app.
    CommandMismatch,
    /// The presented command carries an old version.
    CommandStale,
    /// The tag refuses this reader serial for the rest of the contact.
    Halted,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RejectReason::BadTagEcho => "bad_tag_echo",
            RejectReason::UnknownTid => "unknown_tid",
            RejectReason::BadReaderEcho => "bad_reader_echo",
            RejectReason::NotWhitelistedNoCommand => "not_whitelisted_no_command",
            RejectReason::CommandMismatch => "command_mismatch",
            RejectReason::CommandStale => "command_stale",
            RejectReason::Halted => "halted",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Accepted,
    Rejected { reason: RejectReason, halted: bool },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MsgDirection {
    ReaderToTag,
    TagToReader,
}

impl fmt::Display for MsgDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MsgDirection::ReaderToTag => "reader_to_tag",
            MsgDirection::TagToReader => "tag_to_reader",
        })
    }
}

/// One message as observed on the public channel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TranscriptMessage {
    pub step: String,
    pub direction: MsgDirection,
    pub bytes: Vec<u8>,
}

/// Everything an eavesdropper on the reader-tag channel sees, plus
/// the secrets the driver itself knew (for analysis, not on the
/// wire).
#[derive(Clone, Debug)]
pub struct HandshakeTranscript {
    pub r1: [u8; NONCE_BYTES],
    pub r2: Option<[u8; NONCE_BYTES]>,
    pub r3: Option<[u8; NONCE_BYTES]>,
    pub messages: Vec<TranscriptMessage>,
    pub outcome: Outcome,
    pub session_key: Option<Key>,
}

impl HandshakeTranscript {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,direction,bytes_hex\n");
        for m in &self.messages {
            out.push_str(&format!(
                "{},{},{}\n",
                m.step,
                m.direction,
                hex::encode(&m.bytes)
            ));
        }
        out
    }
}

/// Parses the output of [`HandshakeTranscript::to_csv`].
pub fn parse_transcript_csv(csv: &str) -> Result<Vec<TranscriptMessage>, AuthError> {
    let bad = |line: usize, problem: String| AuthError::BadCsv {
        context: "transcript",
        line,
        problem,
    };
    let mut lines = csv.lines();
    match lines.next() {
        Some(h) if h.trim() == "step,direction,bytes_hex" => {}
        _ => return Err(bad(1, "missing step,direction,bytes_hex header".into())),
    }
    let mut out = Vec::new();
    for (i, raw) in lines.enumerate() {
        let line = i + 2;
        if raw.trim().is_empty() {
            continue;
        }
        let mut fields = raw.splitn(3, ',');
        let step = fields.next().unwrap_or("").trim();
        let dir = fields.next().unwrap_or("").trim();
        let bytes_hex = fields.next().unwrap_or("").trim();
        if step.is_empty() {
            return Err(bad(line, "empty step".into()));
        }
        let direction = match dir {
            "reader_to_tag" => MsgDirection::ReaderToTag,
            "tag_to_reader" => MsgDirection::TagToReader,
            other => return Err(bad(line, format!("unknown direction {other:?}"))),
        };
        let bytes = hex::decode(bytes_hex).map_err(|e| bad(line, e.to_string()))?;
        out.push(TranscriptMessage {
            step: step.to_string(),
            direction,
            bytes,
        });
    }
    Ok(out)
}

/// One slot of a per-application white list.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WhiteListEntry {
    pub rid: u32,
    pub frequentness: u8,
}

/// Per-application state held on a tag.
#[derive(Clone, Debug)]
pub struct AppRecord {
    pub app_id: u32,
    pub version: u16,
    pub white_list: Vec<WhiteListEntry>,
    pub white_list_capacity: usize,
    pub app_key: Key,
    pub data_region: Vec<BlockAddress>,
}

/// Records one more successful use of `rid`. The entry gains a point
/// (saturating at [`FREQUENTNESS_CAP`]) and one randomly drawn other
/// entry loses one (stopping at zero), so idle readers decay and get
/// evicted first. The victim index is `next_u32() % others` into the
/// other entries in list order.
pub fn white_list_touch(app: &mut AppRecord, rid: u32, rng: &mut dyn RngCore) {
    let Some(i) = app.white_list.iter().position(|e| e.rid == rid) else {
        return;
    };
    if app.white_list[i].frequentness >= FREQUENTNESS_CAP {
        return;
    }
    app.white_list[i].frequentness += 1;
    let others: Vec<usize> = (0..app.white_list.len()).filter(|&j| j != i).collect();
    if others.is_empty() {
        return;
    }
    let victim = others[rng.next_u32() as usize % others.len()];
    let f = &mut app.white_list[victim].frequentness;
    *f = f.saturating_sub(1);
}

/// Admits `rid` after a valid command of version `command_version`.
/// A newer version first clears the whole list and becomes the app's
/// version; an older one is ignored (callers reject stale commands
/// before getting here). A full list evicts the first entry of
/// minimal frequentness, and the newcomer inherits that frequentness
/// instead of the usual [`FREQUENTNESS_INITIAL`].
pub fn white_list_insert(app: &mut AppRecord, rid: u32, command_version: u16) {
    if command_version < app.version {
        return;
    }
    if command_version > app.version {
        app.white_list.clear();
        app.version = command_version;
    }
    if app.white_list.iter().any(|e| e.rid == rid) {
        return;
    }
    if app.white_list.len() < app.white_list_capacity {
        app.white_list.push(WhiteListEntry {
            rid,
            frequentness: FREQUENTNESS_INITIAL,
        });
        return;
    }
    let min = app
        .white_list
        .iter()
        .map(|e| e.frequentness)
        .min()
        .expect("list is full, hence non-empty");
    let at = app
        .white_list
        .iter()
        .position(|e| e.frequentness == min)
        .expect("a minimum exists");
    app.white_list[at] = WhiteListEntry {
        rid,
        frequentness: min,
    };
}

/// Long-term secrets and application state stored inside a tag.
#[derive(Clone, Debug)]
pub struct TagSecureState {
    tid: [u8; 8],
    master_key: Key,
    ca_key: Key,
    apps: Vec<AppRecord>,
}

impl TagSecureState {
    pub fn tid(&self) -> [u8; 8] {
        self.tid
    }

    pub fn apps(&self) -> &[AppRecord] {
        &self.apps
    }

    pub fn app(&self, app_id: u32) -> Option<&AppRecord> {
        self.apps.iter().find(|a| a.app_id == app_id)
    }

    fn app_mut(&mut self, app_id: u32) -> Option<&mut AppRecord> {
        self.apps.iter_mut().find(|a| a.app_id == app_id)
    }
}

/// A card whose memory is gated by the handshake instead of sector
/// keys. There is deliberately no raw block access here: the only
/// way to data is a [`SecureSession`] scoped to one application and
/// one contact.
pub struct SecureCard {
    image: CardImage,
    state: TagSecureState,
    halted_rids: BTreeSet<u32>,
    accepted_rids: Vec<u32>,
    double_read_flags: u64,
}

impl SecureCard {
    pub fn tid(&self) -> [u8; 8] {
        self.state.tid
    }

    pub fn state(&self) -> &TagSecureState {
        &self.state
    }

    pub fn app(&self, app_id: u32) -> Option<&AppRecord> {
        self.state.app(app_id)
    }

    /// Starts a new reader contact: sessions from the previous one
    /// die and per-contact lockouts are lifted.
    pub fn begin_contact(&mut self) {
        self.image.begin_contact();
        self.halted_rids.clear();
        self.accepted_rids.clear();
    }

    pub fn contact_epoch(&self) -> u64 {
        self.image.contact_epoch()
    }

    /// How often two different reader serials completed handshakes
    /// within a single contact. A legitimate pass holds the card to
    /// one reader, so anything above zero points at a relay or a
    /// shell reader.
    pub fn double_read_flags(&self) -> u64 {
        self.double_read_flags
    }

    pub(crate) fn image_mut(&mut self) -> &mut CardImage {
        &mut self.image
    }

    pub fn secure_read(
        &self,
        session: &SecureSession,
        addr: BlockAddress,
    ) -> Result<[u8; BLOCK_BYTES], AuthError> {
        self.check_session(session, addr)?;
        Ok(self.image.raw_read(addr)?)
    }

    pub fn secure_write(
        &mut self,
        session: &SecureSession,
        addr: BlockAddress,
        data: [u8; BLOCK_BYTES],
    ) -> Result<(), AuthError> {
        self.check_session(session, addr)?;
        Ok(self.image.raw_write(addr, data)?)
    }

    fn check_session(&self, session: &SecureSession, addr: BlockAddress) -> Result<(), AuthError> {
        if session.epoch != self.image.contact_epoch() {
            return Err(AuthError::StaleSession);
        }
        let app = self
            .state
            .app(session.app_id)
            .ok_or(AuthError::UnknownApp(session.app_id))?;
        if !app.data_region.contains(&addr) {
            return Err(AuthError::AccessDenied { addr });
        }
        Ok(())
    }

    fn note_accept(&mut self, rid: u32) {
        if self.accepted_rids.iter().any(|&r| r != rid) {
            self.double_read_flags += 1;
        }
        if !self.accepted_rids.contains(&rid) {
            self.accepted_rids.push(rid);
        }
    }
}

/// Proof of a completed handshake: read and write access to one
/// application's region for the rest of the current contact. Only
/// the tag constructs these.
#[derive(Clone, Debug)]
pub struct SecureSession {
    rid: u32,
    app_id: u32,
    key: Key,
    epoch: u64,
}

impl SecureSession {
    pub fn rid(&self) -> u32 {
        self.rid
    }

    pub fn app_id(&self) -> u32 {
        self.app_id
    }

    pub fn key_bytes(&self) -> [u8; KEY_BYTES] {
        *self.key.as_bytes()
    }
}

/// What a reader carries for one application.
#[derive(Clone, Debug)]
pub struct ReaderAppCredential {
    pub app_id: u32,
    pub app_key: Key,
    pub command: Option<Vec<u8>>,
}

/// A reader terminal: a serial number plus the credentials installed
/// on it.
#[derive(Clone, Debug)]
pub struct ReaderState {
    rid: u32,
    creds: BTreeMap<u32, ReaderAppCredential>,
}

impl ReaderState {
    pub fn new(rid: u32) -> Result<Self, AuthError> {
        if rid >> RID_BITS != 0 {
            return Err(AuthError::RidTooWide(rid));
        }
        Ok(ReaderState {
            rid,
            creds: BTreeMap::new(),
        })
    }

    pub fn rid(&self) -> u32 {
        self.rid
    }

    pub fn install_app(&mut self, app_id: u32, app_key: Key) {
        self.creds.insert(
            app_id,
            ReaderAppCredential {
                app_id,
                app_key,
                command: None,
            },
        );
    }

    /// Stores a sealed command. The app key must already be
    /// installed; for an unknown app this does nothing.
    pub fn install_command(&mut self, app_id: u32, command: Vec<u8>) {
        if let Some(cred) = self.creds.get_mut(&app_id) {
            cred.command = Some(command);
        }
    }

    pub fn credential(&self, app_id: u32) -> Option<&ReaderAppCredential> {
        self.creds.get(&app_id)
    }
}

/// One provider's back-office table: a row per issued card. Lookup
/// is by scanning, exactly what the blinded tid in m2 forces.
#[derive(Clone, Debug)]
pub struct SpDirectory {
    sp_id: u32,
    rows: Vec<([u8; 8], Key)>,
}

impl SpDirectory {
    fn new(sp_id: u32) -> Self {
        SpDirectory {
            sp_id,
            rows: Vec::new(),
        }
    }

    pub fn sp_id(&self) -> u32 {
        self.sp_id
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Finds the row whose tid hashes to `probe` under the challenge
    /// `r1`.
    pub fn lookup(
        &self,
        suite: &dyn CryptoSuite,
        probe: &[u8],
        r1: &[u8; NONCE_BYTES],
    ) -> Option<([u8; 8], Key)> {
        for &(tid, mk) in &self.rows {
            if suite.hash(&xor_tid(tid, r1)) == probe {
                return Some((tid, mk));
            }
        }
        None
    }

    fn insert_row(&mut self, tid: [u8; 8], master_key: Key) {
        self.rows.push((tid, master_key));
    }
}

fn xor_tid(tid: [u8; 8], r1: &[u8; NONCE_BYTES]) -> [u8; 8] {
    let mut out = [0u8; 8];
    for i in 0..8 {
        out[i] = tid[i] ^ r1[i];
    }
    out
}

#[derive(Clone, Debug)]
struct AppDef {
    app_key: Key,
    data_region: Vec<BlockAddress>,
}

#[derive(Clone, Debug)]
struct Grant {
    sp_id: u32,
    rid: u32,
    app_id: u32,
    version: u16,
}

/// The certificate authority: defines applications, issues cards,
/// registers readers under providers and seals their commands.
///
/// Commands and app keys use the default crypto suite; a deployment
/// running the handshake under a different suite needs a matching
/// authority.
pub struct CaDirectory {
    ca_key: Key,
    apps: BTreeMap<u32, AppDef>,
    sps: BTreeMap<u32, SpDirectory>,
    grants: Vec<Grant>,
    issued: BTreeMap<[u8; 8], Key>,
}

impl CaDirectory {
    pub fn new(rng: &mut dyn RngCore) -> Self {
        CaDirectory {
            ca_key: Key::random(rng),
            apps: BTreeMap::new(),
            sps: BTreeMap::new(),
            grants: Vec::new(),
            issued: BTreeMap::new(),
        }
    }

    /// Defines an application and the card blocks it owns. The app
    /// key is derived from the authority key, so a directory rebuilt
    /// from its grant table hands out identical credentials.
    pub fn define_app(&mut self, app_id: u32, data_region: Vec<BlockAddress>) -> Result<(), AuthError> {
        if self.apps.contains_key(&app_id) {
            return Err(AuthError::DuplicateApp(app_id));
        }
        for &addr in &data_region {
            if addr.sector == 0 && addr.block == 0 {
                return Err(AuthError::RegionInvalid { app_id, addr });
            }
            for (&other_id, other) in &self.apps {
                if other.data_region.contains(&addr) {
                    return Err(AuthError::RegionOverlap {
                        app_id,
                        addr,
                        other: other_id,
                    });
                }
            }
        }
        let app_key = derive_app_key(&self.ca_key, app_id);
        self.apps.insert(app_id, AppDef { app_key, data_region });
        Ok(())
    }

    /// Registers a provider. It immediately receives a directory row
    /// for every card issued so far.
    pub fn register_sp(&mut self, sp_id: u32) {
        if self.sps.contains_key(&sp_id) {
            return;
        }
        let mut sp = SpDirectory::new(sp_id);
        for (&tid, &mk) in &self.issued {
            sp.insert_row(tid, mk);
        }
        self.sps.insert(sp_id, sp);
    }

    /// Grants `app_id` to the reader under provider `sp_id`, installs
    /// the app key plus a fresh command on the reader, and returns
    /// the command. A serial stays with one provider for life, and an
    /// application is never granted across two providers.
    pub fn register_reader(
        &mut self,
        sp_id: u32,
        reader: &mut ReaderState,
        app_id: u32,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<u8>, AuthError> {
        if !self.sps.contains_key(&sp_id) {
            return Err(AuthError::UnknownSp(sp_id));
        }
        let app_key = self
            .apps
            .get(&app_id)
            .ok_or(AuthError::UnknownApp(app_id))?
            .app_key;
        self.check_grant_conflicts(sp_id, reader.rid(), app_id)?;
        self.grants.push(Grant {
            sp_id,
            rid: reader.rid(),
            app_id,
            version: 1,
        });
        let command = self.issue_command(reader.rid(), app_id, rng)?;
        reader.install_app(app_id, app_key);
        reader.install_command(app_id, command.clone());
        Ok(command)
    }

    fn check_grant_conflicts(&self, sp_id: u32, rid: u32, app_id: u32) -> Result<(), AuthError> {
        for g in &self.grants {
            if g.rid == rid && g.app_id == app_id {
                return Err(AuthError::DuplicateGrant { rid, app_id });
            }
            if g.rid == rid && g.sp_id != sp_id {
                return Err(AuthError::RidOwnedByOtherSp {
                    rid,
                    owner: g.sp_id,
                });
            }
            if g.app_id == app_id && g.sp_id != sp_id {
                return Err(AuthError::AppOwnedByOtherSp {
                    app_id,
                    owner: g.sp_id,
                });
            }
        }
        Ok(())
    }

    /// Seals the current command for an existing grant: the reader
    /// serial, the application and the grant's version, under the
    /// authority key.
    pub fn issue_command(
        &self,
        rid: u32,
        app_id: u32,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<u8>, AuthError> {
        let grant = self
            .grants
            .iter()
            .find(|g| g.rid == rid && g.app_id == app_id)
            .ok_or(AuthError::UnknownGrant { rid, app_id })?;
        let mut pt = Vec::with_capacity(COMMAND_PLAINTEXT_BYTES);
        pt.extend_from_slice(&rid.to_be_bytes());
        pt.extend_from_slice(&app_id.to_be_bytes());
        pt.extend_from_slice(&grant.version.to_be_bytes());
        Ok(AesGcmSuite.enc(&self.ca_key, &pt, rng))
    }

    /// Raises the grant's version. Tags adopt the new version the
    /// first time they see it and drop their white list, so every
    /// command sealed before the bump goes stale.
    pub fn bump_version(&mut self, rid: u32, app_id: u32) -> Result<u16, AuthError> {
        let grant = self
            .grants
            .iter_mut()
            .find(|g| g.rid == rid && g.app_id == app_id)
            .ok_or(AuthError::UnknownGrant { rid, app_id })?;
        grant.version += 1;
        Ok(grant.version)
    }

    /// Issues a card: draws its master key, replicates the (tid,
    /// master key) row into every provider directory and installs the
    /// application table on the tag.
    pub fn issue_card(
        &mut self,
        image: CardImage,
        rng: &mut dyn RngCore,
    ) -> Result<SecureCard, AuthError> {
        let tid = image.tid();
        if self.issued.contains_key(&tid) {
            return Err(AuthError::DuplicateTid(tid));
        }
        let card_type = image.card_type();
        for (&app_id, def) in &self.apps {
            for &addr in &def.data_region {
                if !CardLayout::contains(card_type, addr)
                    || CardLayout::is_structural_reserved(card_type, addr)
                {
                    return Err(AuthError::RegionInvalid { app_id, addr });
                }
            }
        }
        let master_key = Key::random(rng);
        let apps = self
            .apps
            .iter()
            .map(|(&app_id, def)| AppRecord {
                app_id,
                version: 1,
                white_list: Vec::new(),
                white_list_capacity: WHITE_LIST_CAPACITY,
                app_key: def.app_key,
                data_region: def.data_region.clone(),
            })
            .collect();
        self.issued.insert(tid, master_key);
        for sp in self.sps.values_mut() {
            sp.insert_row(tid, master_key);
        }
        Ok(SecureCard {
            image,
            state: TagSecureState {
                tid,
                master_key,
                ca_key: self.ca_key,
                apps,
            },
            halted_rids: BTreeSet::new(),
            accepted_rids: Vec::new(),
            double_read_flags: 0,
        })
    }

    pub fn sp_directory(&self, sp_id: u32) -> Option<&SpDirectory> {
        self.sps.get(&sp_id)
    }

    pub fn ca_key_bytes(&self) -> [u8; KEY_BYTES] {
        *self.ca_key.as_bytes()
    }

    pub fn master_key_of(&self, tid: [u8; 8]) -> Option<[u8; KEY_BYTES]> {
        self.issued.get(&tid).map(|k| *k.as_bytes())
    }

    pub fn app_key_of(&self, app_id: u32) -> Option<Key> {
        self.apps.get(&app_id).map(|d| d.app_key)
    }

    /// Grant table as CSV, sorted for stable output.
    pub fn export_grants(&self) -> String {
        let mut rows: Vec<&Grant> = self.grants.iter().collect();
        rows.sort_by_key(|g| (g.sp_id, g.rid, g.app_id));
        let mut out = String::from("sp_id,rid,app_id,version\n");
        for g in rows {
            out.push_str(&format!("{},{},{},{}\n", g.sp_id, g.rid, g.app_id, g.version));
        }
        out
    }

    /// Merges grant rows exported by [`export_grants`]. Providers are
    /// registered on sight; apps must already be defined. Returns the
    /// number of rows added.
    pub fn import_grants(&mut self, csv: &str) -> Result<usize, AuthError> {
        let bad = |line: usize, problem: String| AuthError::BadCsv {
            context: "grants",
            line,
            problem,
        };
        let mut lines = csv.lines();
        match lines.next() {
            Some(h) if h.trim() == "sp_id,rid,app_id,version" => {}
            _ => return Err(bad(1, "missing sp_id,rid,app_id,version header".into())),
        }
        let mut added = 0;
        for (i, raw) in lines.enumerate() {
            let line = i + 2;
            if raw.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = raw.split(',').collect();
            if fields.len() != 4 {
                return Err(bad(line, format!("expected 4 fields, got {}", fields.len())));
            }
            let parse =
                |s: &str| -> Result<u32, AuthError> { s.trim().parse().map_err(|e: std::num::ParseIntError| bad(line, e.to_string())) };
            let sp_id = parse(fields[0])?;
            let rid = parse(fields[1])?;
            let app_id = parse(fields[2])?;
            let version: u16 = fields[3]
                .trim()
                .parse()
                .map_err(|e: std::num::ParseIntError| bad(line, e.to_string()))?;
            if rid >> RID_BITS != 0 {
                return Err(AuthError::RidTooWide(rid));
            }
            if !self.apps.contains_key(&app_id) {
                return Err(AuthError::UnknownApp(app_id));
            }
            self.check_grant_conflicts(sp_id, rid, app_id)?;
            self.register_sp(sp_id);
            self.grants.push(Grant {
                sp_id,
                rid,
                app_id,
                version,
            });
            added += 1;
        }
        Ok(added)
    }
}

fn derive_app_key(ca_key: &Key, app_id: u32) -> Key {
    let mut h = Sha256::new();
    h.update(ca_key.as_bytes());
    h.update(b"app-key");
    h.update(app_id.to_be_bytes());
    let digest = h.finalize();
    let mut out = [0u8; KEY_BYTES];
    out.copy_from_slice(&digest[..KEY_BYTES]);
    Key::from_bytes(out)
}

fn fresh_nonce(rng: &mut dyn RngCore) -> [u8; NONCE_BYTES] {
    let mut n = [0u8; NONCE_BYTES];
    rng.fill_bytes(&mut n);
    n
}

fn nonzero_nonce(rng: &mut dyn RngCore) -> [u8; NONCE_BYTES] {
    loop {
        let n = fresh_nonce(rng);
        if n.iter().any(|&b| b != 0) {
            return n;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ReaderStage {
    AwaitM2,
    AwaitVerdict,
    AwaitM6,
    Done,
    Failed,
}

/// Reader half of the handshake, one instance per attempt. The raw
/// state machine is public so that out-of-order and spliced inputs
/// can be driven directly; [`handshake`] wires the honest flow.
pub struct ReaderSession {
    rid: u32,
    app_id: u32,
    app_key: Key,
    command: Option<Vec<u8>>,
    r1: [u8; NONCE_BYTES],
    r2: Option<[u8; NONCE_BYTES]>,
    r3: Option<[u8; NONCE_BYTES]>,
    master_key: Option<Key>,
    session_key: Option<Key>,
    stage: ReaderStage,
}

impl ReaderSession {
    /// Draws r1 and emits m1.
    pub fn start(
        reader: &ReaderState,
        app_id: u32,
        rng: &mut dyn RngCore,
        _suite: &dyn CryptoSuite,
    ) -> Result<(Self, Vec<u8>), AuthError> {
        let cred = reader
            .credential(app_id)
            .ok_or(AuthError::ReaderMissingApp(app_id))?;
        let r1 = nonzero_nonce(rng);
        Ok((
            ReaderSession {
                rid: reader.rid(),
                app_id,
                app_key: cred.app_key,
                command: cred.command.clone(),
                r1,
                r2: None,
                r3: None,
                master_key: None,
                session_key: None,
                stage: ReaderStage::AwaitM2,
            },
            r1.to_vec(),
        ))
    }

    pub fn r1(&self) -> [u8; NONCE_BYTES] {
        self.r1
    }

    pub fn r3(&self) -> Option<[u8; NONCE_BYTES]> {
        self.r3
    }

    fn fail(&mut self, reason: RejectReason) -> RejectReason {
        self.stage = ReaderStage::Failed;
        reason
    }

    /// Verifies m2 against the provider directory and builds m4.
    pub fn on_m2(
        &mut self,
        m2: &[u8],
        sp: &SpDirectory,
        rng: &mut dyn RngCore,
        suite: &dyn CryptoSuite,
    ) -> Result<Vec<u8>, RejectReason> {
        if self.stage != ReaderStage::AwaitM2 {
            return Err(self.fail(RejectReason::BadTagEcho));
        }
        if m2.len() != HASH_BYTES + 2 * NONCE_BYTES + ENC_OVERHEAD {
            return Err(self.fail(RejectReason::BadTagEcho));
        }
        let (probe, blob) = m2.split_at(HASH_BYTES);
        let Some((_tid, master_key)) = sp.lookup(suite, probe, &self.r1) else {
            return Err(self.fail(RejectReason::UnknownTid));
        };
        let pt = match suite.dec(&master_key, blob) {
            Ok(pt) => pt,
            Err(_) => return Err(self.fail(RejectReason::BadTagEcho)),
        };
        if pt.len() != 2 * NONCE_BYTES || pt[..NONCE_BYTES] != self.r1 {
            return Err(self.fail(RejectReason::BadTagEcho));
        }
        let mut r2 = [0u8; NONCE_BYTES];
        r2.copy_from_slice(&pt[NONCE_BYTES..]);
        let r3 = nonzero_nonce(rng);

        let mut nonces = Vec::with_capacity(2 * NONCE_BYTES);
        nonces.extend_from_slice(&r2);
        nonces.extend_from_slice(&r3);
        let inner = suite.enc(&self.app_key, &nonces, rng);
        let mut outer = Vec::with_capacity(4 + inner.len() + 4);
        outer.extend_from_slice(&self.app_id.to_be_bytes());
        outer.extend_from_slice(&inner);
        outer.extend_from_slice(&self.rid.to_be_bytes());
        let m4 = suite.enc(&master_key, &outer, rng);

        self.master_key = Some(master_key);
        self.r2 = Some(r2);
        self.r3 = Some(r3);
        self.stage = ReaderStage::AwaitVerdict;
        Ok(m4)
    }

    /// Answers the tag's command request with m5b.
    pub fn on_m5a(
        &mut self,
        m5a: &[u8],
        rng: &mut dyn RngCore,
        suite: &dyn CryptoSuite,
    ) -> Result<Vec<u8>, RejectReason> {
        if self.stage != ReaderStage::AwaitVerdict {
            return Err(self.fail(RejectReason::BadTagEcho));
        }
        let (Some(r3), _) = (self.r3, ()) else {
            return Err(self.fail(RejectReason::BadTagEcho));
        };
        let pt = match suite.dec(&self.app_key, m5a) {
            Ok(pt) => pt,
            Err(_) => return Err(self.fail(RejectReason::BadTagEcho)),
        };
        let mut expected = Vec::with_capacity(NONCE_BYTES + QUERY_AUTH.len() + 4);
        expected.extend_from_slice(&r3);
        expected.extend_from_slice(QUERY_AUTH);
        expected.extend_from_slice(&self.app_id.to_be_bytes());
        if pt != expected {
            return Err(self.fail(RejectReason::BadTagEcho));
        }
        let Some(command) = self.command.clone() else {
            return Err(self.fail(RejectReason::NotWhitelistedNoCommand));
        };
        let mut reply = Vec::with_capacity(NONCE_BYTES + command.len());
        reply.extend_from_slice(&r3);
        reply.extend_from_slice(&command);
        let m5b = suite.enc(&self.app_key, &reply, rng);
        self.stage = ReaderStage::AwaitM6;
        Ok(m5b)
    }

    /// Checks the tag's key confirmation and returns the session key.
    pub fn on_m6(&mut self, m6: &[u8], suite: &dyn CryptoSuite) -> Result<Key, RejectReason> {
        if !matches!(self.stage, ReaderStage::AwaitVerdict | ReaderStage::AwaitM6) {
            return Err(self.fail(RejectReason::BadTagEcho));
        }
        let (Some(r2), Some(r3)) = (self.r2, self.r3) else {
            return Err(self.fail(RejectReason::BadTagEcho));
        };
        let sk = suite.kdf(&r2, &r3);
        let pt = match suite.dec(&sk, m6) {
            Ok(pt) => pt,
            Err(_) => return Err(self.fail(RejectReason::BadTagEcho)),
        };
        let mut expected = Vec::with_capacity(KEY_CONFIRM.len() + NONCE_BYTES);
        expected.extend_from_slice(KEY_CONFIRM);
        expected.extend_from_slice(&r3);
        if pt != expected {
            return Err(self.fail(RejectReason::BadTagEcho));
        }
        self.session_key = Some(sk);
        self.stage = ReaderStage::Done;
        Ok(sk)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum TagStage {
    AwaitM4,
    AwaitM5b,
    Done,
    Failed,
}

/// What the tag does with a reader-to-tag message.
#[derive(Debug)]
pub enum TagStep {
    /// Handshake complete: key confirmation for the reader and the
    /// granted session.
    Accept {
        m6: Vec<u8>,
        session: SecureSession,
    },
    /// The serial is not on the white list; the reader must present
    /// its command.
    Challenge { m5a: Vec<u8> },
    Reject {
        reason: RejectReason,
        halted: bool,
    },
}

/// Tag half of the handshake, one instance per attempt.
pub struct TagSession {
    r2: [u8; NONCE_BYTES],
    rid: Option<u32>,
    app_id: Option<u32>,
    r3: Option<[u8; NONCE_BYTES]>,
    session_key: Option<Key>,
    stage: TagStage,
}

impl TagSession {
    /// Consumes m1 and emits m2.
    pub fn on_m1(
        card: &mut SecureCard,
        m1: &[u8],
        rng: &mut dyn RngCore,
        suite: &dyn CryptoSuite,
    ) -> Result<(Self, Vec<u8>), RejectReason> {
        if m1.len() != NONCE_BYTES || m1.iter().all(|&b| b == 0) {
            return Err(RejectReason::BadReaderEcho);
        }
        let mut r1 = [0u8; NONCE_BYTES];
        r1.copy_from_slice(m1);
        let r2 = fresh_nonce(rng);

        let probe = suite.hash(&xor_tid(card.state.tid, &r1));
        let mut echo = Vec::with_capacity(2 * NONCE_BYTES);
        echo.extend_from_slice(&r1);
        echo.extend_from_slice(&r2);
        let blob = suite.enc(&card.state.master_key, &echo, rng);
        let mut m2 = Vec::with_capacity(probe.len() + blob.len());
        m2.extend_from_slice(&probe);
        m2.extend_from_slice(&blob);

        Ok((
            TagSession {
                r2,
                rid: None,
                app_id: None,
                r3: None,
                session_key: None,
                stage: TagStage::AwaitM4,
            },
            m2,
        ))
    }

    pub fn r2(&self) -> [u8; NONCE_BYTES] {
        self.r2
    }

    fn fail(&mut self, reason: RejectReason) -> TagStep {
        self.stage = TagStage::Failed;
        TagStep::Reject {
            reason,
            halted: false,
        }
    }

    fn fail_halting(
        &mut self,
        card: &mut SecureCard,
        rid: u32,
        reason: RejectReason,
    ) -> TagStep {
        card.halted_rids.insert(rid);
        self.stage = TagStage::Failed;
        TagStep::Reject {
            reason,
            halted: true,
        }
    }

    /// Consumes m4; either grants directly, challenges for a command,
    /// or rejects.
    pub fn on_m4(
        &mut self,
        card: &mut SecureCard,
        m4: &[u8],
        rng: &mut dyn RngCore,
        suite: &dyn CryptoSuite,
    ) -> TagStep {
        if self.stage != TagStage::AwaitM4 {
            return self.fail(RejectReason::BadReaderEcho);
        }
        let outer = match suite.dec(&card.state.master_key, m4) {
            Ok(pt) => pt,
            Err(_) => return self.fail(RejectReason::BadReaderEcho),
        };
        if outer.len() != 4 + INNER_BLOB_BYTES + 4 {
            return self.fail(RejectReason::BadReaderEcho);
        }
        let app_id = u32::from_be_bytes(outer[..4].try_into().expect("4 bytes"));
        let rid = u32::from_be_bytes(outer[4 + INNER_BLOB_BYTES..].try_into().expect("4 bytes"));
        if card.halted_rids.contains(&rid) {
            self.stage = TagStage::Failed;
            return TagStep::Reject {
                reason: RejectReason::Halted,
                halted: false,
            };
        }
        let (listed, app_key) = match card.state.app(app_id) {
            Some(app) => (app.white_list.iter().any(|e| e.rid == rid), app.app_key),
            None => return self.fail(RejectReason::BadReaderEcho),
        };
        let inner = match suite.dec(&app_key, &outer[4..4 + INNER_BLOB_BYTES]) {
            Ok(pt) => pt,
            Err(_) => return self.fail(RejectReason::BadReaderEcho),
        };
        if inner.len() != 2 * NONCE_BYTES || inner[..NONCE_BYTES] != self.r2 {
            return self.fail(RejectReason::BadReaderEcho);
        }
        let mut r3 = [0u8; NONCE_BYTES];
        r3.copy_from_slice(&inner[NONCE_BYTES..]);
        self.rid = Some(rid);
        self.app_id = Some(app_id);
        self.r3 = Some(r3);

        if listed {
            white_list_touch(
                card.state.app_mut(app_id).expect("app checked above"),
                rid,
                rng,
            );
            return self.grant(card, rid, app_id, r3, rng, suite);
        }
        let mut challenge = Vec::with_capacity(NONCE_BYTES + QUERY_AUTH.len() + 4);
        challenge.extend_from_slice(&r3);
        challenge.extend_from_slice(QUERY_AUTH);
        challenge.extend_from_slice(&app_id.to_be_bytes());
        let m5a = suite.enc(&app_key, &challenge, rng);
        self.stage = TagStage::AwaitM5b;
        TagStep::Challenge { m5a }
    }

    /// Consumes m5b. Any verification failure here halts the serial
    /// for the rest of the contact.
    pub fn on_m5b(
        &mut self,
        card: &mut SecureCard,
        m5b: &[u8],
        rng: &mut dyn RngCore,
        suite: &dyn CryptoSuite,
    ) -> TagStep {
        if self.stage != TagStage::AwaitM5b {
            return self.fail(RejectReason::BadReaderEcho);
        }
        let (Some(rid), Some(app_id), Some(r3)) = (self.rid, self.app_id, self.r3) else {
            return self.fail(RejectReason::BadReaderEcho);
        };
        let (app_key, version) = match card.state.app(app_id) {
            Some(app) => (app.app_key, app.version),
            None => return self.fail(RejectReason::BadReaderEcho),
        };
        let pt = match suite.dec(&app_key, m5b) {
            Ok(pt) => pt,
            Err(_) => return self.fail_halting(card, rid, RejectReason::BadReaderEcho),
        };
        if pt.len() != NONCE_BYTES + COMMAND_BYTES || pt[..NONCE_BYTES] != r3 {
            return self.fail_halting(card, rid, RejectReason::BadReaderEcho);
        }
        let command = match suite.dec(&card.state.ca_key, &pt[NONCE_BYTES..]) {
            Ok(pt) => pt,
            Err(_) => return self.fail_halting(card, rid, RejectReason::CommandMismatch),
        };
        if command.len() != COMMAND_PLAINTEXT_BYTES {
            return self.fail_halting(card, rid, RejectReason::CommandMismatch);
        }
        let cmd_rid = u32::from_be_bytes(command[..4].try_into().expect("4 bytes"));
        let cmd_app = u32::from_be_bytes(command[4..8].try_into().expect("4 bytes"));
        let cmd_version = u16::from_be_bytes(command[8..10].try_into().expect("2 bytes"));
        if cmd_rid != rid || cmd_app != app_id {
            return self.fail_halting(card, rid, RejectReason::CommandMismatch);
        }
        if cmd_version < version {
            return self.fail_halting(card, rid, RejectReason::CommandStale);
        }
        white_list_insert(
            card.state.app_mut(app_id).expect("app checked above"),
            rid,
            cmd_version,
        );
        self.grant(card, rid, app_id, r3, rng, suite)
    }

    fn grant(
        &mut self,
        card: &mut SecureCard,
        rid: u32,
        app_id: u32,
        r3: [u8; NONCE_BYTES],
        rng: &mut dyn RngCore,
        suite: &dyn CryptoSuite,
    ) -> TagStep {
        let sk = suite.kdf(&self.r2, &r3);
        let mut confirm = Vec::with_capacity(KEY_CONFIRM.len() + NONCE_BYTES);
        confirm.extend_from_slice(KEY_CONFIRM);
        confirm.extend_from_slice(&r3);
        let m6 = suite.enc(&sk, &confirm, rng);
        card.note_accept(rid);
        self.session_key = Some(sk);
        self.stage = TagStage::Done;
        TagStep::Accept {
            m6,
            session: SecureSession {
                rid,
                app_id,
                key: sk,
                epoch: card.image.contact_epoch(),
            },
        }
    }
}

struct Flow {
    r1: [u8; NONCE_BYTES],
    r2: Option<[u8; NONCE_BYTES]>,
    r3: Option<[u8; NONCE_BYTES]>,
    messages: Vec<TranscriptMessage>,
}

impl Flow {
    fn push(&mut self, step: &str, direction: MsgDirection, bytes: &[u8]) {
        self.messages.push(TranscriptMessage {
            step: step.to_string(),
            direction,
            bytes: bytes.to_vec(),
        });
    }

    fn rejected(
        self,
        reason: RejectReason,
        halted: bool,
    ) -> (HandshakeTranscript, Option<SecureSession>) {
        (
            HandshakeTranscript {
                r1: self.r1,
                r2: self.r2,
                r3: self.r3,
                messages: self.messages,
                outcome: Outcome::Rejected { reason, halted },
                session_key: None,
            },
            None,
        )
    }

    fn accepted(
        self,
        key: Key,
        session: SecureSession,
    ) -> (HandshakeTranscript, Option<SecureSession>) {
        (
            HandshakeTranscript {
                r1: self.r1,
                r2: self.r2,
                r3: self.r3,
                messages: self.messages,
                outcome: Outcome::Accepted,
                session_key: Some(key),
            },
            Some(session),
        )
    }
}

/// Runs one honest end-to-end handshake between a reader and a card,
/// resolving the tag through the given provider directory. Fails
/// only on configuration errors (reader without the app key);
/// protocol-level refusals land in the transcript's outcome.
pub fn handshake(
    reader: &ReaderState,
    card: &mut SecureCard,
    sp: &SpDirectory,
    app_id: u32,
    rng: &mut dyn RngCore,
    suite: &dyn CryptoSuite,
) -> Result<(HandshakeTranscript, Option<SecureSession>), AuthError> {
    let (mut rs, m1) = ReaderSession::start(reader, app_id, rng, suite)?;
    let mut flow = Flow {
        r1: rs.r1(),
        r2: None,
        r3: None,
        messages: Vec::new(),
    };
    flow.push("m1", MsgDirection::ReaderToTag, &m1);

    let (mut ts, m2) = match TagSession::on_m1(card, &m1, rng, suite) {
        Ok(v) => v,
        Err(reason) => return Ok(flow.rejected(reason, false)),
    };
    flow.r2 = Some(ts.r2());
    flow.push("m2", MsgDirection::TagToReader, &m2);

    let m4 = match rs.on_m2(&m2, sp, rng, suite) {
        Ok(v) => v,
        Err(reason) => return Ok(flow.rejected(reason, false)),
    };
    flow.r3 = rs.r3();
    flow.push("m4", MsgDirection::ReaderToTag, &m4);

    let (m6, session) = match ts.on_m4(card, &m4, rng, suite) {
        TagStep::Accept { m6, session } => (m6, session),
        TagStep::Challenge { m5a } => {
            flow.push("m5a", MsgDirection::TagToReader, &m5a);
            let m5b = match rs.on_m5a(&m5a, rng, suite) {
                Ok(v) => v,
                Err(reason) => return Ok(flow.rejected(reason, false)),
            };
            flow.push("m5b", MsgDirection::ReaderToTag, &m5b);
            match ts.on_m5b(card, &m5b, rng, suite) {
                TagStep::Accept { m6, session } => (m6, session),
                TagStep::Challenge { .. } => unreachable!("one challenge per handshake"),
                TagStep::Reject { reason, halted } => return Ok(flow.rejected(reason, halted)),
            }
        }
        TagStep::Reject { reason, halted } => return Ok(flow.rejected(reason, halted)),
    };
    flow.push("m6", MsgDirection::TagToReader, &m6);

    match rs.on_m6(&m6, suite) {
        Ok(key) => Ok(flow.accepted(key, session)),
        Err(reason) => Ok(flow.rejected(reason, false)),
    }
}
