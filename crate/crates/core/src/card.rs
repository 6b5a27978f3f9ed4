//! Sectored card memory with legacy per-sector key access control.
//!
//! Five card models are supported. The two Classic models use 16-byte
//! blocks grouped into sectors with a key trailer in the last block of
//! each sector. The three D-series models are mapped onto the same
//! sector/block abstraction: 64-block applications whose last six
//! blocks are reserved for keys and settings. Reservation rules are
//! chosen so that the usable capacity of every model reproduces the
//! published per-card figures (720 / 3024 / 1792 / 3648 / 7360 bytes
//! under the reference two-block service reservation).

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Every block holds exactly this many bytes.
pub const BLOCK_BYTES: usize = 16;

/// Transport key programmed into fresh cards.
pub const DEFAULT_KEY: [u8; 6] = [0xFF; 6];

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub enum CardType {
    S50,
    S70,
    D21,
    D41,
    D81,
}

impl CardType {
    pub const ALL: [CardType; 5] = [
        CardType::S50,
        CardType::S70,
        CardType::D21,
        CardType::D41,
        CardType::D81,
    ];

    pub fn total_bytes(self) -> usize {
        self.total_blocks() * BLOCK_BYTES
    }

    pub fn total_blocks(self) -> usize {
        (0..self.sector_count()).map(|s| self.blocks_in_sector(s)).sum()
    }

    pub fn sector_count(self) -> usize {
        match self {
            CardType::S50 => 16,
            CardType::S70 => 40,
            CardType::D21 => 2,
            CardType::D41 => 4,
            CardType::D81 => 8,
        }
    }

    pub fn blocks_in_sector(self, sector: usize) -> usize {
        match self {
            CardType::S50 => 4,
            CardType::S70 => {
                if sector < 32 {
                    4
                } else {
                    16
                }
            }
            CardType::D21 | CardType::D41 | CardType::D81 => 64,
        }
    }

    /// One-byte tag used by the flat image serialization.
    pub fn type_tag(self) -> u8 {
        match self {
            CardType::S50 => 0x01,
            CardType::S70 => 0x02,
            CardType::D21 => 0x21,
            CardType::D41 => 0x41,
            CardType::D81 => 0x81,
        }
    }

    pub fn from_type_tag(tag: u8) -> Option<CardType> {
        CardType::ALL.into_iter().find(|ct| ct.type_tag() == tag)
    }
}

impl fmt::Display for CardType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            CardType::S50 => "S50",
            CardType::S70 => "S70",
            CardType::D21 => "D21",
            CardType::D41 => "D41",
            CardType::D81 => "D81",
        };
        f.write_str(name)
    }
}

impl FromStr for CardType {
    type Err = CardError;

    fn from_str(s: &str) -> Result<Self, CardError> {
        match s.to_ascii_uppercase().as_str() {
            "S50" => Ok(CardType::S50),
            "S70" => Ok(CardType::S70),
            "D21" => Ok(CardType::D21),
            "D41" => Ok(CardType::D41),
            "D81" => Ok(CardType::D81),
            other => Err(CardError::Malformed(format!("unknown card type {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct BlockAddress {
    pub sector: u8,
    pub block: u8,
}

impl fmt::Display for BlockAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.sector, self.block)
    }
}

#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum CardError {
    #[error("invalid block address {sector},{block} for {card_type}")]
    InvalidAddress {
        card_type: CardType,
        sector: u8,
        block: u8,
    },
    #[error("authentication denied for sector {sector}")]
    AuthDenied { sector: u8 },
    #[error("token does not grant access to sector {sector}")]
    WrongSector { sector: u8 },
    #[error("session token from a previous contact")]
    StaleToken,
    #[error("write refused on structurally reserved block {addr}")]
    ReservedWrite { addr: BlockAddress },
    #[error("malformed card image: {0}")]
    Malformed(String),
}

/// The two blocks claimed by the secondary service (username and
/// balance) in the reference scenario. The published capacity figures
/// assume this reservation. The D21 model has only two 64-block
/// applications, so its pair lives in application 1 instead of 3.
pub fn reference_service_blocks(card_type: CardType) -> [BlockAddress; 2] {
    let sector = match card_type {
        CardType::D21 => 1,
        _ => 3,
    };
    [
        BlockAddress { sector, block: 0 },
        BlockAddress { sector, block: 2 },
    ]
}

/// A card's reservation map: structural blocks (manufacturer area and
/// key trailers) plus any blocks claimed by services. Usable blocks are
/// everything else, in address order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CardLayout {
    card_type: CardType,
    service_reserved: BTreeSet<BlockAddress>,
}

impl CardLayout {
    pub fn new(card_type: CardType, service_reserved: &[BlockAddress]) -> Result<Self, CardError> {
        let mut set = BTreeSet::new();
        for &addr in service_reserved {
            if !Self::contains(card_type, addr) {
                return Err(CardError::InvalidAddress {
                    card_type,
                    sector: addr.sector,
                    block: addr.block,
                });
            }
            set.insert(addr);
        }
        Ok(CardLayout {
            card_type,
            service_reserved: set,
        })
    }

    pub fn card_type(&self) -> CardType {
        self.card_type
    }

    pub fn contains(card_type: CardType, addr: BlockAddress) -> bool {
        (addr.sector as usize) < card_type.sector_count()
            && (addr.block as usize) < card_type.blocks_in_sector(addr.sector as usize)
    }

    /// Blocks the card itself refuses to treat as data: the
    /// manufacturer area and per-sector key space.
    pub fn is_structural_reserved(card_type: CardType, addr: BlockAddress) -> bool {
        let blocks = card_type.blocks_in_sector(addr.sector as usize);
        match card_type {
            CardType::S50 | CardType::S70 => {
                (addr.sector == 0 && addr.block == 0)
                    || addr.block as usize == blocks - 1
                    || (blocks == 16 && matches!(addr.block, 3 | 7 | 11))
            }
            CardType::D21 | CardType::D41 | CardType::D81 => {
                (addr.sector == 0 && addr.block <= 1) || addr.block as usize >= blocks - 6
            }
        }
    }

    pub fn is_service_reserved(&self, addr: BlockAddress) -> bool {
        self.service_reserved.contains(&addr)
    }

    pub fn is_reserved(&self, addr: BlockAddress) -> bool {
        Self::is_structural_reserved(self.card_type, addr) || self.is_service_reserved(addr)
    }

    /// Non-reserved blocks in address order.
    pub fn usable_blocks(&self) -> Vec<BlockAddress> {
        let ct = self.card_type;
        let mut out = Vec::new();
        for sector in 0..ct.sector_count() {
            for block in 0..ct.blocks_in_sector(sector) {
                let addr = BlockAddress {
                    sector: sector as u8,
                    block: block as u8,
                };
                if !self.is_reserved(addr) {
                    out.push(addr);
                }
            }
        }
        out
    }

    pub fn usable_block_count(&self) -> usize {
        self.usable_blocks().len()
    }

    /// Usable bytes: 16 per usable block.
    pub fn usable_capacity(&self) -> usize {
        self.usable_block_count() * BLOCK_BYTES
    }
}

/// Grants read/write on one sector for the duration of one contact.
#[derive(Clone, Copy, Debug)]
pub struct SectorToken {
    epoch: u64,
    sector: u8,
}

impl SectorToken {
    pub fn sector(&self) -> u8 {
        self.sector
    }
}

/// Simulated tag memory. Mutation is single-threaded; determinism in
/// the simulator follows from that.
#[derive(Clone, Debug)]
pub struct CardImage {
    tid: [u8; 8],
    layout: CardLayout,
    blocks: Vec<[u8; BLOCK_BYTES]>,
    sector_keys: Vec<[u8; 6]>,
    epoch: u64,
}

impl CardImage {
    /// Fresh card: default key in every sector, data blocks zeroed, the
    /// manufacturer block holding the serial number in its first eight
    /// bytes.
    pub fn new_card(
        card_type: CardType,
        tid: [u8; 8],
        service_reserved: &[BlockAddress],
    ) -> Result<Self, CardError> {
        let layout = CardLayout::new(card_type, service_reserved)?;
        let mut blocks = vec![[0u8; BLOCK_BYTES]; card_type.total_blocks()];
        blocks[0][..8].copy_from_slice(&tid);
        Ok(CardImage {
            tid,
            layout,
            blocks,
            sector_keys: vec![DEFAULT_KEY; card_type.sector_count()],
            epoch: 0,
        })
    }

    pub fn tid(&self) -> [u8; 8] {
        self.tid
    }

    pub fn layout(&self) -> &CardLayout {
        &self.layout
    }

    pub fn card_type(&self) -> CardType {
        self.layout.card_type()
    }

    /// Starts a new reader contact. Tokens from earlier contacts die.
    pub fn begin_contact(&mut self) {
        self.epoch += 1;
    }

    /// Serial number of the current contact.
    pub fn contact_epoch(&self) -> u64 {
        self.epoch
    }

    pub fn legacy_authenticate(&self, sector: u8, key: [u8; 6]) -> Result<SectorToken, CardError> {
        let stored = self
            .sector_keys
            .get(sector as usize)
            .ok_or(CardError::InvalidAddress {
                card_type: self.card_type(),
                sector,
                block: 0,
            })?;
        if *stored != key {
            return Err(CardError::AuthDenied { sector });
        }
        Ok(SectorToken {
            epoch: self.epoch,
            sector,
        })
    }

    fn check_token(&self, token: &SectorToken, sector: u8) -> Result<(), CardError> {
        if token.epoch != self.epoch {
            return Err(CardError::StaleToken);
        }
        if token.sector != sector {
            return Err(CardError::WrongSector { sector });
        }
        Ok(())
    }

    fn block_index(&self, addr: BlockAddress) -> Result<usize, CardError> {
        let ct = self.card_type();
        if !CardLayout::contains(ct, addr) {
            return Err(CardError::InvalidAddress {
                card_type: ct,
                sector: addr.sector,
                block: addr.block,
            });
        }
        let before: usize = (0..addr.sector as usize).map(|s| ct.blocks_in_sector(s)).sum();
        Ok(before + addr.block as usize)
    }

    pub fn read_block(
        &self,
        token: &SectorToken,
        addr: BlockAddress,
    ) -> Result<[u8; BLOCK_BYTES], CardError> {
        self.check_token(token, addr.sector)?;
        let idx = self.block_index(addr)?;
        Ok(self.blocks[idx])
    }

    pub fn write_block(
        &mut self,
        token: &SectorToken,
        addr: BlockAddress,
        data: [u8; BLOCK_BYTES],
    ) -> Result<(), CardError> {
        self.check_token(token, addr.sector)?;
        if CardLayout::is_structural_reserved(self.card_type(), addr) {
            return Err(CardError::ReservedWrite { addr });
        }
        let idx = self.block_index(addr)?;
        self.blocks[idx] = data;
        Ok(())
    }

    /// Rewrites the key of the token's sector.
    pub fn set_sector_key(&mut self, token: &SectorToken, key: [u8; 6]) -> Result<(), CardError> {
        self.check_token(token, token.sector)?;
        self.sector_keys[token.sector as usize] = key;
        Ok(())
    }

    /// Raw access for the post-legacy authentication path, which gates
    /// by application region instead of sector keys.
    pub(crate) fn raw_read(&self, addr: BlockAddress) -> Result<[u8; BLOCK_BYTES], CardError> {
        let idx = self.block_index(addr)?;
        Ok(self.blocks[idx])
    }

    pub(crate) fn raw_write(
        &mut self,
        addr: BlockAddress,
        data: [u8; BLOCK_BYTES],
    ) -> Result<(), CardError> {
        let idx = self.block_index(addr)?;
        self.blocks[idx] = data;
        Ok(())
    }

    /// Flat image: 8-byte TID, 1-byte type tag, all blocks in address
    /// order, then one 6-byte key per sector. Service reservations are
    /// scenario knowledge, not card state, so the caller re-supplies
    /// them on load.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(9 + self.blocks.len() * BLOCK_BYTES + self.sector_keys.len() * 6);
        out.extend_from_slice(&self.tid);
        out.push(self.card_type().type_tag());
        for block in &self.blocks {
            out.extend_from_slice(block);
        }
        for key in &self.sector_keys {
            out.extend_from_slice(key);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], service_reserved: &[BlockAddress]) -> Result<Self, CardError> {
        if bytes.len() < 9 {
            return Err(CardError::Malformed("image shorter than header".into()));
        }
        let card_type = CardType::from_type_tag(bytes[8])
            .ok_or_else(|| CardError::Malformed(format!("unknown type tag 0x{:02X}", bytes[8])))?;
        let expected = 9 + card_type.total_bytes() + 6 * card_type.sector_count();
        if bytes.len() != expected {
            return Err(CardError::Malformed(format!(
                "image length {} does not match {card_type} (expected {expected})",
                bytes.len()
            )));
        }
        let mut tid = [0u8; 8];
        tid.copy_from_slice(&bytes[..8]);
        let layout = CardLayout::new(card_type, service_reserved)?;
        let mut off = 9;
        let mut blocks = Vec::with_capacity(card_type.total_blocks());
        for _ in 0..card_type.total_blocks() {
            let mut b = [0u8; BLOCK_BYTES];
            b.copy_from_slice(&bytes[off..off + BLOCK_BYTES]);
            blocks.push(b);
            off += BLOCK_BYTES;
        }
        let mut sector_keys = Vec::with_capacity(card_type.sector_count());
        for _ in 0..card_type.sector_count() {
            let mut k = [0u8; 6];
            k.copy_from_slice(&bytes[off..off + 6]);
            sector_keys.push(k);
            off += 6;
        }
        Ok(CardImage {
            tid,
            layout,
            blocks,
            sector_keys,
            epoch: 0,
        })
    }
}
