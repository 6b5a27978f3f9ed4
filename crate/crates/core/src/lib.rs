//! Simulation library for a storage covert channel between two service
//! providers that share multipurpose RFID cards, plus the four-party
//! authentication protocol that closes the channel.
//!
//! The crate is organized bottom-up:
//!
//! - [`card`]: sectored card memory with legacy per-sector key access.
//! - [`frame`]: the bit-exact covert packet codec (header, payload, CRC).
//! - [`channel`]: sender/receiver endpoints that move messages through
//!   card contacts, with acks, retransmission and status queries.
//! - [`suite`]: pluggable cipher/hash/KDF suite used by the protocol.
//! - [`auth`]: card administrator, service provider directories, reader
//!   registration, the six-step mutual authentication and white lists.
//! - [`sim`]: the end-to-end scenario runner (entrance guard + canteen
//!   toll businesses with covert hooks, legacy or secure mode).
//!
//! Everything is deterministic under a caller-supplied seed. No wall
//! clock, no threads, no global state.

pub mod auth;
pub mod card;
pub mod channel;
pub mod frame;
pub mod sim;
pub mod suite;
