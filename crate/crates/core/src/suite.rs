//! Pluggable crypto primitives for the authentication protocol.
//!
//! The protocol needs three things: an authenticated cipher, a hash,
//! and a way to derive a session key from two nonces. They are kept
//! behind a trait so the handshake logic stays independent of the
//! concrete algorithms; the default suite is AES-128-GCM + SHA-256.

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes128Gcm, Nonce};
use rand::RngCore;
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Symmetric key width. Everything in the system (master keys, app
/// keys, the CA key, session keys) uses the same width.
pub const KEY_BYTES: usize = 16;

/// Ciphertext expansion of [`CryptoSuite::enc`]: a 12-byte nonce in
/// front and a 16-byte authentication tag behind.
pub const ENC_OVERHEAD: usize = 28;

/// Digest width of [`CryptoSuite::hash`].
pub const HASH_BYTES: usize = 32;

const GCM_NONCE_BYTES: usize = 12;

/// A symmetric key that does not print its bytes.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Key([u8; KEY_BYTES]);

impl Key {
    pub fn from_bytes(bytes: [u8; KEY_BYTES]) -> Self {
        Key(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; KEY_BYTES] {
        &self.0
    }

    /// Draws a fresh key from the given randomness source.
    pub fn random(rng: &mut dyn RngCore) -> Self {
        let mut bytes = [0u8; KEY_BYTES];
        rng.fill_bytes(&mut bytes);
        Key(bytes)
    }
}

impl std::fmt::Debug for Key {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("Key(..)")
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum CryptoError {
    /// The ciphertext failed authentication (wrong key or modified).
    #[error("ciphertext failed authentication")]
    AuthFailure,
    /// The ciphertext is too short to even carry the envelope.
    #[error("ciphertext shorter than the envelope")]
    Malformed,
}

/// The primitive set used by readers, tags and providers.
pub trait CryptoSuite {
    /// Authenticated encryption. The returned blob is
    /// `plaintext.len() + ENC_OVERHEAD` bytes and decrypts only under
    /// the same key and unmodified.
    fn enc(&self, key: &Key, plaintext: &[u8], rng: &mut dyn RngCore) -> Vec<u8>;

    /// Inverse of [`enc`](CryptoSuite::enc).
    fn dec(&self, key: &Key, blob: &[u8]) -> Result<Vec<u8>, CryptoError>;

    /// Collision-resistant hash.
    fn hash(&self, data: &[u8]) -> [u8; HASH_BYTES];

    /// Session key derivation: the truncated hash of both session
    /// nonces in protocol order.
    fn kdf(&self, r2: &[u8], r3: &[u8]) -> Key {
        let mut joined = Vec::with_capacity(r2.len() + r3.len());
        joined.extend_from_slice(r2);
        joined.extend_from_slice(r3);
        let digest = self.hash(&joined);
        let mut key = [0u8; KEY_BYTES];
        key.copy_from_slice(&digest[..KEY_BYTES]);
        Key(key)
    }
}

/// AES-128-GCM with a random 96-bit nonce per call, SHA-256 for
/// hashing and derivation.
#[derive(Debug, Default, Clone, Copy)]
pub struct AesGcmSuite;

impl CryptoSuite for AesGcmSuite {
    fn enc(&self, key: &Key, plaintext: &[u8], rng: &mut dyn RngCore) -> Vec<u8> {
        let cipher = Aes128Gcm::new_from_slice(&key.0).expect("key width is fixed");
        let mut nonce = [0u8; GCM_NONCE_BYTES];
        rng.fill_bytes(&mut nonce);
        let sealed = cipher
            .encrypt(Nonce::from_slice(&nonce), Payload::from(plaintext))
            .expect("in-memory encryption cannot fail");
        let mut blob = Vec::with_capacity(GCM_NONCE_BYTES + sealed.len());
        blob.extend_from_slice(&nonce);
        blob.extend_from_slice(&sealed);
        blob
    }

    fn dec(&self, key: &Key, blob: &[u8]) -> Result<Vec<u8>, CryptoError> {
        if blob.len() < ENC_OVERHEAD {
            return Err(CryptoError::Malformed);
        }
        let cipher = Aes128Gcm::new_from_slice(&key.0).expect("key width is fixed");
        let (nonce, sealed) = blob.split_at(GCM_NONCE_BYTES);
        cipher
            .decrypt(Nonce::from_slice(nonce), Payload::from(sealed))
            .map_err(|_| CryptoError::AuthFailure)
    }

    fn hash(&self, data: &[u8]) -> [u8; HASH_BYTES] {
        let digest = Sha256::digest(data);
        let mut out = [0u8; HASH_BYTES];
        out.copy_from_slice(&digest);
        out
    }
}
