//! Bit-exact codec for the covert packet frame.
//!
//! Wire layout, most significant bit first:
//!
//! ```text
//! bit  1      direction: 0 = A to B, 1 = B to A
//! bit  2      CRC flag: a 32-bit CRC follows the payload
//! bits 3-4    status: 00 Normal, 01 Succeeded, 10 AskAgain, 11 QueryStatus
//! bits 5-16   frame counter (12 bits)
//! bits 17-32  payload length in bytes (16 bits)
//! ```
//!
//! After the 4-byte header come `payload_len` payload bytes, then a
//! big-endian CRC-32 over header plus payload when the CRC flag is set.
//! Only Normal frames carry payload or CRC; their counter is never 0,
//! so an all-zero header can serve as a cascade terminator on zeroed
//! card blocks.
//!
//! A receiver acknowledges a frame by rewriting its header in place,
//! setting the status to Succeeded or AskAgain. The rewrite clears the
//! CRC flag (the stored CRC no longer matches the altered header) and
//! folds the 4 CRC bytes into `payload_len`, so later frames in the
//! cascade keep their byte offsets. Decoding treats the leftover
//! payload bytes of a non-Normal frame as dead space to skip.

use thiserror::Error;

pub const HEADER_BYTES: usize = 4;
pub const CRC_BYTES: usize = 4;

/// Standard reflected CRC-32, polynomial 0x04C11DB7.
pub fn crc32(bytes: &[u8]) -> u32 {
    crc32fast::hash(bytes)
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Direction {
    AToB,
    BToA,
}

impl Direction {
    pub fn bit(self) -> u8 {
        match self {
            Direction::AToB => 0,
            Direction::BToA => 1,
        }
    }

    pub fn from_bit(bit: u8) -> Option<Direction> {
        match bit {
            0 => Some(Direction::AToB),
            1 => Some(Direction::BToA),
            _ => None,
        }
    }

    pub fn reverse(self) -> Direction {
        match self {
            Direction::AToB => Direction::BToA,
            Direction::BToA => Direction::AToB,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum TransmissionStatus {
    Normal,
    Succeeded,
    AskAgain,
    QueryStatus,
}

impl TransmissionStatus {
    pub fn bits(self) -> u8 {
        match self {
            TransmissionStatus::Normal => 0b00,
            TransmissionStatus::Succeeded => 0b01,
            TransmissionStatus::AskAgain => 0b10,
            TransmissionStatus::QueryStatus => 0b11,
        }
    }

    pub fn from_bits(bits: u8) -> Option<TransmissionStatus> {
        match bits {
            0b00 => Some(TransmissionStatus::Normal),
            0b01 => Some(TransmissionStatus::Succeeded),
            0b10 => Some(TransmissionStatus::AskAgain),
            0b11 => Some(TransmissionStatus::QueryStatus),
            _ => None,
        }
    }
}

#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum FrameError {
    #[error("frame truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("{extra} bytes left over after one frame")]
    TrailingBytes { extra: usize },
    #[error("counter {0} does not fit in 12 bits")]
    CounterRange(u16),
    #[error("Normal frames require a nonzero counter")]
    ZeroCounter,
    #[error("payload of {0} bytes does not fit a 16-bit length")]
    PayloadTooLong(usize),
    #[error("header length {header} does not match payload of {actual} bytes")]
    LengthMismatch { header: u16, actual: usize },
    #[error("status frames carry no payload")]
    PayloadOnStatusFrame,
    #[error("status frames carry no CRC")]
    CrcOnStatusFrame,
    #[error("CRC mismatch: stored {stored:#010X}, computed {computed:#010X}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("expected a non-Normal status")]
    NotAStatus,
    #[error("region holds {len} bytes but capacity is {capacity}")]
    RegionOverflow { len: usize, capacity: usize },
    #[error("length field overflow while folding CRC bytes")]
    LengthOverflow,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct FrameHeader {
    pub direction: Direction,
    pub crc_present: bool,
    pub status: TransmissionStatus,
    pub counter: u16,
    pub payload_len: u16,
}

impl FrameHeader {
    /// Raw bit packing, no semantic validation.
    pub fn pack(&self) -> [u8; HEADER_BYTES] {
        let b0 = (self.direction.bit() << 7)
            | ((self.crc_present as u8) << 6)
            | (self.status.bits() << 4)
            | ((self.counter >> 8) as u8 & 0x0F);
        [
            b0,
            (self.counter & 0xFF) as u8,
            (self.payload_len >> 8) as u8,
            (self.payload_len & 0xFF) as u8,
        ]
    }

    /// Raw bit unpacking; every bit pattern maps to some header.
    pub fn unpack(bytes: [u8; HEADER_BYTES]) -> FrameHeader {
        FrameHeader {
            direction: Direction::from_bit(bytes[0] >> 7).unwrap(),
            crc_present: bytes[0] & 0x40 != 0,
            status: TransmissionStatus::from_bits((bytes[0] >> 4) & 0x03).unwrap(),
            counter: ((bytes[0] as u16 & 0x0F) << 8) | bytes[1] as u16,
            payload_len: ((bytes[2] as u16) << 8) | bytes[3] as u16,
        }
    }

    /// Bytes the frame occupies on the wire, dead payload included.
    pub fn encoded_len(&self) -> usize {
        HEADER_BYTES
            + self.payload_len as usize
            + if self.crc_present { CRC_BYTES } else { 0 }
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Frame {
    pub header: FrameHeader,
    pub payload: Vec<u8>,
    pub crc: Option<u32>,
}

impl Frame {
    /// Normal frame carrying payload.
    pub fn data(
        direction: Direction,
        counter: u16,
        payload: Vec<u8>,
        with_crc: bool,
    ) -> Result<Frame, FrameError> {
        if counter > 0x0FFF {
            return Err(FrameError::CounterRange(counter));
        }
        if counter == 0 {
            return Err(FrameError::ZeroCounter);
        }
        if payload.len() > u16::MAX as usize {
            return Err(FrameError::PayloadTooLong(payload.len()));
        }
        let header = FrameHeader {
            direction,
            crc_present: with_crc,
            status: TransmissionStatus::Normal,
            counter,
            payload_len: payload.len() as u16,
        };
        let crc = with_crc.then(|| {
            let mut covered = header.pack().to_vec();
            covered.extend_from_slice(&payload);
            crc32(&covered)
        });
        Ok(Frame {
            header,
            payload,
            crc,
        })
    }

    /// Payload-free status frame. For QueryStatus the counter names the
    /// frame being asked about.
    pub fn status(
        direction: Direction,
        status: TransmissionStatus,
        counter: u16,
    ) -> Result<Frame, FrameError> {
        if status == TransmissionStatus::Normal {
            return Err(FrameError::NotAStatus);
        }
        if counter > 0x0FFF {
            return Err(FrameError::CounterRange(counter));
        }
        Ok(Frame {
            header: FrameHeader {
                direction,
                crc_present: false,
                status,
                counter,
                payload_len: 0,
            },
            payload: Vec::new(),
            crc: None,
        })
    }

    pub fn encoded_len(&self) -> usize {
        self.header.encoded_len()
    }
}

pub fn encode_frame(frame: &Frame) -> Result<Vec<u8>, FrameError> {
    let h = &frame.header;
    if h.counter > 0x0FFF {
        return Err(FrameError::CounterRange(h.counter));
    }
    if h.status == TransmissionStatus::Normal {
        if h.counter == 0 {
            return Err(FrameError::ZeroCounter);
        }
    } else {
        if !frame.payload.is_empty() || h.payload_len != 0 {
            return Err(FrameError::PayloadOnStatusFrame);
        }
        if h.crc_present {
            return Err(FrameError::CrcOnStatusFrame);
        }
    }
    if frame.payload.len() > u16::MAX as usize {
        return Err(FrameError::PayloadTooLong(frame.payload.len()));
    }
    if h.payload_len as usize != frame.payload.len() {
        return Err(FrameError::LengthMismatch {
            header: h.payload_len,
            actual: frame.payload.len(),
        });
    }
    let mut out = h.pack().to_vec();
    out.extend_from_slice(&frame.payload);
    if h.crc_present {
        let value = crc32(&out);
        out.extend_from_slice(&value.to_be_bytes());
    }
    Ok(out)
}

/// Decodes one frame from the front of `bytes`, returning it and the
/// number of bytes consumed. Trailing bytes are left for the caller.
pub fn decode_frame_prefix(bytes: &[u8]) -> Result<(Frame, usize), FrameError> {
    if bytes.len() < HEADER_BYTES {
        return Err(FrameError::Truncated {
            needed: HEADER_BYTES,
            have: bytes.len(),
        });
    }
    let header = FrameHeader::unpack([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if header.status == TransmissionStatus::Normal {
        if header.counter == 0 {
            return Err(FrameError::ZeroCounter);
        }
        let total = header.encoded_len();
        if bytes.len() < total {
            return Err(FrameError::Truncated {
                needed: total,
                have: bytes.len(),
            });
        }
        let payload = bytes[HEADER_BYTES..HEADER_BYTES + header.payload_len as usize].to_vec();
        let crc = if header.crc_present {
            let stored = u32::from_be_bytes([
                bytes[total - 4],
                bytes[total - 3],
                bytes[total - 2],
                bytes[total - 1],
            ]);
            let computed = crc32(&bytes[..total - CRC_BYTES]);
            if stored != computed {
                return Err(FrameError::CrcMismatch { stored, computed });
            }
            Some(stored)
        } else {
            None
        };
        Ok((
            Frame {
                header,
                payload,
                crc,
            },
            total,
        ))
    } else {
        if header.crc_present {
            return Err(FrameError::CrcOnStatusFrame);
        }
        // A rewritten data frame keeps its length so the cascade stays
        // aligned; the stale payload bytes are skipped, not returned.
        let total = header.encoded_len();
        if bytes.len() < total {
            return Err(FrameError::Truncated {
                needed: total,
                have: bytes.len(),
            });
        }
        Ok((
            Frame {
                header,
                payload: Vec::new(),
                crc: None,
            },
            total,
        ))
    }
}

/// Decodes a buffer holding exactly one frame.
pub fn decode_frame(bytes: &[u8]) -> Result<Frame, FrameError> {
    let (frame, used) = decode_frame_prefix(bytes)?;
    if used != bytes.len() {
        return Err(FrameError::TrailingBytes {
            extra: bytes.len() - used,
        });
    }
    Ok(frame)
}

/// True when the next four bytes are the all-zero end-of-cascade
/// marker.
pub fn is_terminator(bytes: &[u8]) -> bool {
    bytes.len() >= HEADER_BYTES && bytes[..HEADER_BYTES] == [0, 0, 0, 0]
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CascadeIssue {
    /// Byte offset of the frame that failed to decode.
    pub offset: usize,
    /// Its header as unpacked bits, still useful for recovery.
    pub header: Option<FrameHeader>,
    pub error: FrameError,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CascadeResult {
    pub frames: Vec<Frame>,
    pub error: Option<CascadeIssue>,
}

/// Greedily decodes consecutive frames from a card region. Stops at an
/// all-zero terminator header, when the remaining bytes cannot hold a
/// header, or at the first decode error, which is reported alongside
/// the frames decoded so far.
pub fn parse_cascade(bytes: &[u8], capacity: usize) -> CascadeResult {
    if bytes.len() > capacity {
        return CascadeResult {
            frames: Vec::new(),
            error: Some(CascadeIssue {
                offset: 0,
                header: None,
                error: FrameError::RegionOverflow {
                    len: bytes.len(),
                    capacity,
                },
            }),
        };
    }
    let mut frames = Vec::new();
    let mut offset = 0;
    while bytes.len() - offset >= HEADER_BYTES {
        let rest = &bytes[offset..];
        if is_terminator(rest) {
            break;
        }
        match decode_frame_prefix(rest) {
            Ok((frame, used)) => {
                frames.push(frame);
                offset += used;
            }
            Err(error) => {
                return CascadeResult {
                    frames,
                    error: Some(CascadeIssue {
                        offset,
                        header: Some(FrameHeader::unpack([
                            rest[0], rest[1], rest[2], rest[3],
                        ])),
                        error,
                    }),
                };
            }
        }
    }
    CascadeResult {
        frames,
        error: None,
    }
}

/// Rewrites the status bits of the frame starting at `offset`,
/// acknowledging it in place. Clears the CRC flag and folds the CRC
/// bytes into the length so following frames keep their offsets.
pub fn rewrite_status(
    region: &mut [u8],
    offset: usize,
    new_status: TransmissionStatus,
) -> Result<(), FrameError> {
    if !matches!(
        new_status,
        TransmissionStatus::Succeeded | TransmissionStatus::AskAgain
    ) {
        return Err(FrameError::NotAStatus);
    }
    if region.len() < offset + HEADER_BYTES {
        return Err(FrameError::Truncated {
            needed: offset + HEADER_BYTES,
            have: region.len(),
        });
    }
    let mut header = FrameHeader::unpack([
        region[offset],
        region[offset + 1],
        region[offset + 2],
        region[offset + 3],
    ]);
    if header.crc_present {
        header.payload_len = header
            .payload_len
            .checked_add(CRC_BYTES as u16)
            .ok_or(FrameError::LengthOverflow)?;
        header.crc_present = false;
    }
    header.status = new_status;
    region[offset..offset + HEADER_BYTES].copy_from_slice(&header.pack());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pack_is_the_inverse_of_unpack_on_all_first_bytes() {
        for b0 in 0u8..=255 {
            let header = FrameHeader::unpack([b0, 0x12, 0x34, 0x56]);
            assert_eq!(header.pack(), [b0, 0x12, 0x34, 0x56]);
        }
    }

    #[test]
    fn encoded_len_counts_dead_payload_and_crc() {
        let header = FrameHeader {
            direction: Direction::AToB,
            crc_present: true,
            status: TransmissionStatus::Normal,
            counter: 1,
            payload_len: 10,
        };
        assert_eq!(header.encoded_len(), 18);
    }
}
