//! Erasure codes used by the store.
//!
//! Two codes live here:
//!
//! * the piece code: an MDS code over GF(2^8) that turns a data item payload
//!   into `c` pieces, any `⌈c/3⌉` of which reconstruct the payload;
//! * the group code: an XOR-only code over `k` equally sized blocks in which
//!   block `i` is stored next to a parity fragment, so that any `k - 1`
//!   codewords of a group reconstruct all `k` blocks.
//!
//! The group code splits every block into `k - 1` fragments. Codeword `i`
//! carries `p_i = XOR_{j != i} frag_j[(j - i) mod k]`, where fragment indices
//! run over `1..k`. When column `m` is lost, each surviving parity `p_i`
//! contains exactly one unknown term, fragment `(m - i) mod k` of block `m`,
//! and the `k - 1` survivors name every fragment once.

use thiserror::Error;

use crate::gf256;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("invalid codec parameter: {0}")]
    InvalidParameter(String),
    #[error("insufficient pieces: have {have}, need {need}")]
    InsufficientPieces { have: usize, need: usize },
    #[error("pieces carry mixed versions")]
    MixedVersion,
    #[error("pieces belong to different items")]
    MixedItems,
    #[error("insufficient codewords: {missing} of {k} missing, at most one may be missing")]
    InsufficientCodewords { missing: usize, k: usize },
}

pub type Result<T> = std::result::Result<T, CodecError>;

/// A data item: the unit that is written and looked up.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DataItem {
    pub key: u64,
    pub payload: Vec<u8>,
    pub version: u64,
}

/// One MDS share of a data item.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Piece {
    pub item_key: u64,
    /// 1-based piece index.
    pub index: u16,
    pub version: u64,
    pub body: Vec<u8>,
}

/// Number of pieces needed to reconstruct an item.
pub fn rs_threshold(c: usize) -> usize {
    c.div_ceil(3)
}

/// Length of every piece body for payloads of `payload_len` bytes.
pub fn piece_body_len(payload_len: usize, c: usize) -> usize {
    payload_len.div_ceil(rs_threshold(c))
}

fn check_piece_count(c: usize) -> Result<()> {
    if c < 3 {
        return Err(CodecError::InvalidParameter(format!("c = {c}, need c >= 3")));
    }
    if c > 255 {
        return Err(CodecError::InvalidParameter(format!(
            "c = {c}, GF(256) evaluation points allow at most 255 pieces"
        )));
    }
    Ok(())
}

/// Splits the payload into `t` shares of equal length and evaluates the
/// share polynomial at `x = 1..=c` byte by byte.
pub fn rs_encode(item: &DataItem, c: usize) -> Result<Vec<Piece>> {
    check_piece_count(c)?;
    if item.payload.is_empty() {
        return Err(CodecError::InvalidParameter("payload is empty".into()));
    }
    let t = rs_threshold(c);
    let len = piece_body_len(item.payload.len(), c);
    let coeff = |j: usize, b: usize| item.payload.get(j * len + b).copied().unwrap_or(0);

    let pieces = (1..=c)
        .map(|index| {
            let x = index as u8;
            let powers: Vec<u8> = (0..t).map(|j| gf256::pow(x, j as u32)).collect();
            let body = (0..len)
                .map(|b| {
                    powers
                        .iter()
                        .enumerate()
                        .fold(0u8, |acc, (j, &p)| acc ^ gf256::mul(coeff(j, b), p))
                })
                .collect();
            Piece {
                item_key: item.key,
                index: index as u16,
                version: item.version,
                body,
            }
        })
        .collect();
    Ok(pieces)
}

/// Reconstructs the payload from at least `⌈c/3⌉` pieces of one item version.
pub fn rs_decode(pieces: &[Piece], c: usize, expected_len: usize) -> Result<Vec<u8>> {
    check_piece_count(c)?;
    let t = rs_threshold(c);

    let mut chosen: Vec<&Piece> = Vec::with_capacity(t);
    for piece in pieces {
        if piece.index == 0 || piece.index as usize > c {
            return Err(CodecError::InvalidParameter(format!(
                "piece index {} outside 1..={c}",
                piece.index
            )));
        }
        if let Some(first) = pieces.first() {
            if piece.item_key != first.item_key {
                return Err(CodecError::MixedItems);
            }
            if piece.version != first.version {
                return Err(CodecError::MixedVersion);
            }
        }
        if chosen.len() < t && !chosen.iter().any(|p| p.index == piece.index) {
            chosen.push(piece);
        }
    }
    if chosen.len() < t {
        return Err(CodecError::InsufficientPieces {
            have: chosen.len(),
            need: t,
        });
    }

    let len = piece_body_len(expected_len, c);
    if chosen.iter().any(|p| p.body.len() != len) {
        return Err(CodecError::InvalidParameter(format!(
            "piece body length differs from expected {len}"
        )));
    }

    let points: Vec<u8> = chosen.iter().map(|p| p.index as u8).collect();
    let inverse = gf256::vandermonde_inverse(&points).ok_or_else(|| {
        CodecError::InvalidParameter("evaluation points are not distinct".into())
    })?;

    let mut payload = vec![0u8; t * len];
    for b in 0..len {
        for (j, inv_row) in inverse.iter().enumerate() {
            payload[j * len + b] = inv_row
                .iter()
                .zip(&chosen)
                .fold(0u8, |acc, (&m, p)| acc ^ gf256::mul(m, p.body[b]));
        }
    }
    payload.truncate(expected_len);
    Ok(payload)
}

/// Codeword of the group code: the block itself plus one parity fragment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockGroupCodeword {
    pub own_block: Vec<u8>,
    pub parity_fragment: Vec<u8>,
    pub group_index: usize,
}

impl BlockGroupCodeword {
    pub fn len(&self) -> usize {
        self.own_block.len() + self.parity_fragment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn fragment_len(block_len: usize, k: usize) -> usize {
    block_len.div_ceil(k - 1)
}

fn fragment(block: &[u8], k: usize, f: usize) -> &[u8] {
    // f in 1..k
    let flen = fragment_len(block.len(), k);
    let start = ((f - 1) * flen).min(block.len());
    let end = (f * flen).min(block.len());
    &block[start..end]
}

fn xor_into(dst: &mut [u8], src: &[u8]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d ^= s;
    }
}

/// `f(i, j) = (j - i) mod k`, always in `1..k` for `i != j`.
fn fragment_index(i: usize, j: usize, k: usize) -> usize {
    (j + k - i) % k
}

/// Encodes a group of `k` blocks of common length `z`.
///
/// Blocks shorter than `z` are zero padded; `own_block` keeps the unpadded
/// bytes, so callers that need exact lengths after decoding must frame their
/// blocks.
pub fn group_encode(blocks: &[&[u8]], z: usize) -> Result<Vec<BlockGroupCodeword>> {
    let k = blocks.len();
    if k < 2 {
        return Err(CodecError::InvalidParameter(format!("group of {k} blocks, need k >= 2")));
    }
    if let Some(long) = blocks.iter().find(|b| b.len() > z) {
        return Err(CodecError::InvalidParameter(format!(
            "block of length {} does not fit padded length {z}",
            long.len()
        )));
    }
    let padded: Vec<Vec<u8>> = blocks
        .iter()
        .map(|b| {
            let mut v = b.to_vec();
            v.resize(z, 0);
            v
        })
        .collect();
    let flen = fragment_len(z, k);

    Ok((0..k)
        .map(|i| {
            let mut parity = vec![0u8; flen];
            for (j, block) in padded.iter().enumerate() {
                if j != i {
                    xor_into(&mut parity, fragment(block, k, fragment_index(i, j, k)));
                }
            }
            BlockGroupCodeword {
                own_block: blocks[i].to_vec(),
                parity_fragment: parity,
                group_index: i,
            }
        })
        .collect())
}

/// Recovers all `k` blocks (padded to `z`) from the codewords that survived.
///
/// `codewords` holds `Some` for every surviving group index. At most one
/// entry may be `None`.
pub fn group_decode(codewords: &[Option<&BlockGroupCodeword>], z: usize) -> Result<Vec<Vec<u8>>> {
    let k = codewords.len();
    if k < 2 {
        return Err(CodecError::InvalidParameter(format!("group of {k} blocks, need k >= 2")));
    }
    let missing: Vec<usize> = (0..k).filter(|&i| codewords[i].is_none()).collect();
    if missing.len() > 1 {
        return Err(CodecError::InsufficientCodewords {
            missing: missing.len(),
            k,
        });
    }

    let mut blocks: Vec<Vec<u8>> = codewords
        .iter()
        .map(|cw| {
            let mut v = cw.map(|c| c.own_block.clone()).unwrap_or_default();
            v.resize(z, 0);
            v
        })
        .collect();

    if let Some(&m) = missing.first() {
        let flen = fragment_len(z, k);
        let mut lost = vec![0u8; (k - 1) * flen];
        for (i, cw) in codewords.iter().enumerate() {
            let Some(cw) = cw else { continue };
            if cw.parity_fragment.len() != flen {
                return Err(CodecError::InvalidParameter(format!(
                    "parity fragment of length {} where {flen} expected",
                    cw.parity_fragment.len()
                )));
            }
            let mut frag = cw.parity_fragment.clone();
            for (j, block) in blocks.iter().enumerate() {
                if j != i && j != m {
                    xor_into(&mut frag, fragment(block, k, fragment_index(i, j, k)));
                }
            }
            let f = fragment_index(i, m, k);
            lost[(f - 1) * flen..f * flen].copy_from_slice(&frag);
        }
        lost.truncate(z);
        blocks[m] = lost;
    }
    Ok(blocks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(payload: Vec<u8>) -> DataItem {
        DataItem {
            key: 7,
            payload,
            version: 3,
        }
    }

    #[test]
    fn c3_every_piece_is_a_full_share() {
        let p = item(b"hello world".to_vec());
        let pieces = rs_encode(&p, 3).unwrap();
        assert_eq!(pieces.len(), 3);
        for piece in &pieces {
            assert_eq!(rs_decode(std::slice::from_ref(piece), 3, 11).unwrap(), p.payload);
        }
    }

    #[test]
    fn all_zero_payload_decodes_to_zero() {
        let p = item(vec![0; 40]);
        let pieces = rs_encode(&p, 9).unwrap();
        assert!(pieces.iter().all(|pc| pc.body.iter().all(|&b| b == 0)));
        assert_eq!(rs_decode(&pieces[4..7], 9, 40).unwrap(), vec![0; 40]);
    }

    #[test]
    fn below_threshold_is_rejected() {
        let p = item((0..30).collect());
        let pieces = rs_encode(&p, 9).unwrap();
        assert_eq!(
            rs_decode(&pieces[..2], 9, 30),
            Err(CodecError::InsufficientPieces { have: 2, need: 3 })
        );
        // duplicates of one index do not count twice
        let dup = vec![pieces[0].clone(), pieces[0].clone(), pieces[1].clone()];
        assert!(matches!(rs_decode(&dup, 9, 30), Err(CodecError::InsufficientPieces { .. })));
    }

    #[test]
    fn mixed_versions_are_rejected() {
        let p = item((0..30).collect());
        let mut pieces = rs_encode(&p, 6).unwrap();
        pieces[1].version += 1;
        assert_eq!(rs_decode(&pieces[..2], 6, 30), Err(CodecError::MixedVersion));
    }

    #[test]
    fn parameter_errors() {
        assert!(matches!(rs_encode(&item(vec![1]), 2), Err(CodecError::InvalidParameter(_))));
        assert!(matches!(rs_encode(&item(vec![]), 6), Err(CodecError::InvalidParameter(_))));
        assert!(matches!(group_encode(&[b"ab".as_slice()], 2), Err(CodecError::InvalidParameter(_))));
        assert!(matches!(
            group_encode(&[b"abc".as_slice(), b"a".as_slice()], 2),
            Err(CodecError::InvalidParameter(_))
        ));
    }

    #[test]
    fn k2_degenerates_to_replication() {
        let a = b"AAAA".as_slice();
        let b = b"BBBB".as_slice();
        let cws = group_encode(&[a, b], 4).unwrap();
        assert_eq!(cws[0].own_block, a);
        assert_eq!(cws[0].parity_fragment, b);
        assert_eq!(cws[1].own_block, b);
        assert_eq!(cws[1].parity_fragment, a);
    }

    #[test]
    fn zero_blocks_have_zero_parity() {
        let z = [0u8; 12];
        let cws = group_encode(&[&z[..], &z[..], &z[..], &z[..]], 12).unwrap();
        assert!(cws.iter().all(|c| c.parity_fragment == vec![0; 4]));
    }

    #[test]
    fn decode_with_nothing_missing_is_identity() {
        let blocks: Vec<Vec<u8>> = (0..4u8).map(|i| vec![i; 9]).collect();
        let refs: Vec<&[u8]> = blocks.iter().map(|b| b.as_slice()).collect();
        let cws = group_encode(&refs, 9).unwrap();
        let all: Vec<Option<&BlockGroupCodeword>> = cws.iter().map(Some).collect();
        assert_eq!(group_decode(&all, 9).unwrap(), blocks);
    }

    #[test]
    fn two_missing_is_rejected() {
        let blocks: Vec<Vec<u8>> = (0..4u8).map(|i| vec![i; 9]).collect();
        let refs: Vec<&[u8]> = blocks.iter().map(|b| b.as_slice()).collect();
        let cws = group_encode(&refs, 9).unwrap();
        let partial = vec![None, Some(&cws[1]), None, Some(&cws[3])];
        assert_eq!(
            group_decode(&partial, 9),
            Err(CodecError::InsufficientCodewords { missing: 2, k: 4 })
        );
    }

    #[test]
    fn short_blocks_are_padded() {
        let blocks: Vec<&[u8]> = vec![b"abcdefg", b"xy", b""];
        let cws = group_encode(&blocks, 7).unwrap();
        let partial = vec![Some(&cws[0]), None, Some(&cws[2])];
        let out = group_decode(&partial, 7).unwrap();
        assert_eq!(&out[1][..2], b"xy");
        assert!(out[1][2..].iter().all(|&b| b == 0));
        assert_eq!(out[0], b"abcdefg");
    }
}
