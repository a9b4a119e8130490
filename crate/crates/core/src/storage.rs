//! Byte layout of the per-server storage of one bucket.
//!
//! A server's level-0 block is the concatenation of the pieces it holds:
//!
//! ```text
//! [count: u32 BE][body_len: u16 BE] then per piece
//! [key: u64 BE][index: u16 BE][version: u64 BE][body: body_len bytes]
//! ```
//!
//! The block of column `x` at level `l + 1` is the group codeword
//!
//! ```text
//! [len(d(l, x)): u32 BE][d(l, x)][parity fragment]
//! ```
//!
//! Group coding runs over framed blocks (`[len: u32 BE][block]`) zero padded
//! to `f * (k - 1)` bytes, where `f` is the common parity length, so a block
//! recovered from a group can be trimmed exactly.

use std::sync::Arc;

use thiserror::Error;

use crate::buckets::HashFamily;
use crate::codec::{self, BlockGroupCodeword, CodecError, Piece};

pub const BLOCK_HEADER_LEN: usize = 6;
pub const PIECE_HEADER_LEN: usize = 18;
pub const FRAME_LEN: usize = 4;
pub const TIMESTAMP_LEN: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LayoutError {
    #[error("truncated block: {0}")]
    Truncated(&'static str),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

pub fn piece_wire_len(body_len: usize) -> usize {
    PIECE_HEADER_LEN + body_len
}

/// Serializes pieces (sorted by key, then index) into a level-0 block.
pub fn encode_level0(pieces: &[Piece], body_len: usize) -> Vec<u8> {
    let mut sorted: Vec<&Piece> = pieces.iter().collect();
    sorted.sort_by_key(|p| (p.item_key, p.index));
    let mut out = Vec::with_capacity(BLOCK_HEADER_LEN + sorted.len() * piece_wire_len(body_len));
    out.extend_from_slice(&(sorted.len() as u32).to_be_bytes());
    out.extend_from_slice(&(body_len as u16).to_be_bytes());
    for p in sorted {
        debug_assert_eq!(p.body.len(), body_len);
        out.extend_from_slice(&p.item_key.to_be_bytes());
        out.extend_from_slice(&p.index.to_be_bytes());
        out.extend_from_slice(&p.version.to_be_bytes());
        out.extend_from_slice(&p.body);
    }
    out
}

fn be_u64(b: &[u8]) -> u64 {
    u64::from_be_bytes(b.try_into().expect("8 bytes"))
}

fn be_u32(b: &[u8]) -> u32 {
    u32::from_be_bytes(b.try_into().expect("4 bytes"))
}

pub fn decode_level0(block: &[u8]) -> Result<Vec<Piece>, LayoutError> {
    if block.len() < BLOCK_HEADER_LEN {
        return Err(LayoutError::Truncated("level-0 header"));
    }
    let count = be_u32(&block[0..4]) as usize;
    let body_len = u16::from_be_bytes([block[4], block[5]]) as usize;
    let stride = piece_wire_len(body_len);
    if block.len() < BLOCK_HEADER_LEN + count * stride {
        return Err(LayoutError::Truncated("level-0 pieces"));
    }
    Ok((0..count)
        .map(|i| {
            let p = &block[BLOCK_HEADER_LEN + i * stride..BLOCK_HEADER_LEN + (i + 1) * stride];
            Piece {
                item_key: be_u64(&p[0..8]),
                index: u16::from_be_bytes([p[8], p[9]]),
                version: be_u64(&p[10..18]),
                body: p[18..].to_vec(),
            }
        })
        .collect())
}

/// Finds piece `index` of `key` in a level-0 block without decoding all of it.
pub fn find_piece(block: &[u8], key: u64, index: u16) -> Result<Option<Piece>, LayoutError> {
    if block.len() < BLOCK_HEADER_LEN {
        return Err(LayoutError::Truncated("level-0 header"));
    }
    let count = be_u32(&block[0..4]) as usize;
    let body_len = u16::from_be_bytes([block[4], block[5]]) as usize;
    let stride = piece_wire_len(body_len);
    if block.len() < BLOCK_HEADER_LEN + count * stride {
        return Err(LayoutError::Truncated("level-0 pieces"));
    }
    let at = |i: usize| {
        let p = &block[BLOCK_HEADER_LEN + i * stride..BLOCK_HEADER_LEN + (i + 1) * stride];
        ((be_u64(&p[0..8]), u16::from_be_bytes([p[8], p[9]])), p)
    };
    // pieces are sorted by (key, index)
    let (mut lo, mut hi) = (0usize, count);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if at(mid).0 < (key, index) {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    if lo < count {
        let (id, p) = at(lo);
        if id == (key, index) {
            return Ok(Some(Piece {
                item_key: key,
                index,
                version: be_u64(&p[10..18]),
                body: p[18..].to_vec(),
            }));
        }
    }
    Ok(None)
}

pub fn frame(block: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(FRAME_LEN + block.len());
    out.extend_from_slice(&(block.len() as u32).to_be_bytes());
    out.extend_from_slice(block);
    out
}

pub fn unframe(padded: &[u8]) -> Result<Vec<u8>, LayoutError> {
    if padded.len() < FRAME_LEN {
        return Err(LayoutError::Truncated("frame header"));
    }
    let len = be_u32(&padded[0..4]) as usize;
    padded
        .get(FRAME_LEN..FRAME_LEN + len)
        .map(<[u8]>::to_vec)
        .ok_or(LayoutError::Truncated("frame body"))
}

/// `[len(own)][own][parity]`.
pub fn codeword_bytes(own: &[u8], parity: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(FRAME_LEN + own.len() + parity.len());
    out.extend_from_slice(&(own.len() as u32).to_be_bytes());
    out.extend_from_slice(own);
    out.extend_from_slice(parity);
    out
}

pub fn split_codeword(bytes: &[u8]) -> Result<(&[u8], &[u8]), LayoutError> {
    if bytes.len() < FRAME_LEN {
        return Err(LayoutError::Truncated("codeword header"));
    }
    let len = be_u32(&bytes[0..4]) as usize;
    if bytes.len() < FRAME_LEN + len {
        return Err(LayoutError::Truncated("codeword body"));
    }
    Ok((&bytes[FRAME_LEN..FRAME_LEN + len], &bytes[FRAME_LEN + len..]))
}

/// Parities for one group: entry `i` is the fragment stored by member `i`
/// at the next level.
pub fn encode_group_level(blocks: &[&[u8]]) -> Result<Vec<Vec<u8>>, LayoutError> {
    let k = blocks.len();
    let framed: Vec<Vec<u8>> = blocks.iter().map(|b| frame(b)).collect();
    let longest = framed.iter().map(Vec::len).max().unwrap_or(0);
    let z = codec::fragment_len(longest, k) * (k - 1);
    let refs: Vec<&[u8]> = framed.iter().map(Vec::as_slice).collect();
    Ok(codec::group_encode(&refs, z)?
        .into_iter()
        .map(|cw| cw.parity_fragment)
        .collect())
}

/// Recovers the level-`l` block of the single missing member of a group from
/// the level-`l + 1` blocks of the others.
///
/// `members[i]` is the level-`l + 1` block of group member `i` when known.
pub fn recover_in_group(members: &[Option<&[u8]>]) -> Result<Vec<u8>, LayoutError> {
    let k = members.len();
    let mut parity_len = None;
    let mut codewords = Vec::with_capacity(k);
    for (i, m) in members.iter().enumerate() {
        match m {
            Some(bytes) => {
                let (own, parity) = split_codeword(bytes)?;
                parity_len = Some(parity.len());
                codewords.push(Some(BlockGroupCodeword {
                    own_block: frame(own),
                    parity_fragment: parity.to_vec(),
                    group_index: i,
                }));
            }
            None => codewords.push(None),
        }
    }
    let missing = codewords.iter().position(Option::is_none);
    let (Some(f), Some(m)) = (parity_len, missing) else {
        return Err(CodecError::InsufficientCodewords {
            missing: missing.map_or(0, |_| k),
            k,
        }
        .into());
    };
    let refs: Vec<Option<&BlockGroupCodeword>> = codewords.iter().map(Option::as_ref).collect();
    let blocks = codec::group_decode(&refs, f * (k - 1))?;
    unframe(&blocks[m])
}

/// What one server stores for one bucket.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelStack {
    pub timestamp: u64,
    pub hashes: HashFamily,
    pub level0: Arc<[u8]>,
    /// Parity fragment for levels `1..=d`.
    pub parities: Vec<Vec<u8>>,
}

impl LevelStack {
    pub fn top_level(&self) -> usize {
        self.parities.len()
    }

    /// `d(level, column)` of the column this stack belongs to.
    pub fn block_at(&self, level: usize) -> Vec<u8> {
        let mut block = self.level0.to_vec();
        for parity in &self.parities[..level] {
            block = codeword_bytes(&block, parity);
        }
        block
    }

    /// Bytes stored, control data included.
    pub fn stored_bytes(&self) -> usize {
        self.level0.len()
            + self
                .parities
                .iter()
                .map(|p| FRAME_LEN + p.len())
                .sum::<usize>()
            + TIMESTAMP_LEN
            + self.hashes.byte_len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn piece(key: u64, index: u16, fill: u8) -> Piece {
        Piece {
            item_key: key,
            index,
            version: 9,
            body: vec![fill; 5],
        }
    }

    #[test]
    fn level0_roundtrip_and_lookup() {
        let pieces = vec![piece(4, 2, 1), piece(1, 7, 2), piece(4, 1, 3)];
        let block = encode_level0(&pieces, 5);
        assert_eq!(block.len(), BLOCK_HEADER_LEN + 3 * piece_wire_len(5));
        let back = decode_level0(&block).unwrap();
        assert_eq!(back[0], pieces[1]);
        assert_eq!(back[1], pieces[2]);
        assert_eq!(find_piece(&block, 4, 2).unwrap(), Some(pieces[0].clone()));
        assert_eq!(find_piece(&block, 4, 3).unwrap(), None);
        assert_eq!(find_piece(&encode_level0(&[], 5), 4, 3).unwrap(), None);
    }

    #[test]
    fn group_level_recovers_each_member() {
        let blocks: Vec<Vec<u8>> = vec![b"first block".to_vec(), b"2nd".to_vec(), vec![], b"fourth!".to_vec()];
        let refs: Vec<&[u8]> = blocks.iter().map(Vec::as_slice).collect();
        let parities = encode_group_level(&refs).unwrap();
        let upper: Vec<Vec<u8>> = blocks
            .iter()
            .zip(&parities)
            .map(|(b, p)| codeword_bytes(b, p))
            .collect();
        for m in 0..4 {
            let members: Vec<Option<&[u8]>> = (0..4)
                .map(|i| (i != m).then(|| upper[i].as_slice()))
                .collect();
            assert_eq!(recover_in_group(&members).unwrap(), blocks[m]);
        }
    }
}
