//! The zone/bucket binary tree over key bits.
//!
//! Bucket `(z, p)` holds items whose low `z` key bits `d_0 … d_{z-1}` equal
//! `p`. The root `(0, ε)` may hold any item; the child reached from zone `l`
//! is chosen by `bit(d, l)`.

use std::fmt;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BucketError {
    #[error("zone {zone} exceeds address width {width}")]
    ZoneOutOfRange { zone: usize, width: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct BucketId {
    pub zone: usize,
    /// Bit `i` is `d_i` of every member key.
    pub prefix: u64,
}

impl BucketId {
    pub const ROOT: BucketId = BucketId { zone: 0, prefix: 0 };

    pub fn is_root(&self) -> bool {
        self.zone == 0
    }

    pub fn child(&self, bit: u8) -> BucketId {
        BucketId {
            zone: self.zone + 1,
            prefix: self.prefix | (u64::from(bit & 1) << self.zone),
        }
    }

    pub fn contains(&self, key: u64) -> bool {
        key & low_mask(self.zone) == self.prefix
    }

    /// Prefix as the bit string `d_0 d_1 … d_{zone-1}`.
    pub fn label(&self) -> String {
        (0..self.zone)
            .map(|i| if self.prefix >> i & 1 == 1 { '1' } else { '0' })
            .collect()
    }
}

impl fmt::Display for BucketId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.zone == 0 {
            write!(f, "B(0,ε)")
        } else {
            write!(f, "B({},{})", self.zone, self.label())
        }
    }
}

fn low_mask(bits: usize) -> u64 {
    if bits >= 64 {
        u64::MAX
    } else {
        (1u64 << bits) - 1
    }
}

pub fn bit(key: u64, i: usize) -> u8 {
    (key >> i & 1) as u8
}

/// The unique bucket that may hold `key` in zone `zone`.
pub fn fbucket(zone: usize, key: u64, address_bits: usize) -> Result<BucketId, BucketError> {
    if zone > address_bits {
        return Err(BucketError::ZoneOutOfRange {
            zone,
            width: address_bits,
        });
    }
    Ok(BucketId {
        zone,
        prefix: key & low_mask(zone),
    })
}

/// splitmix64 finalizer.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// The seeded maps `h_1 … h_c : U -> [n]` of one bucket encoding.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct HashFamily {
    seeds: Arc<[u64]>,
}

impl HashFamily {
    pub fn new(seeds: Vec<u64>) -> Self {
        Self { seeds: seeds.into() }
    }

    pub fn c(&self) -> usize {
        self.seeds.len()
    }

    pub fn seeds(&self) -> &[u64] {
        &self.seeds
    }

    /// `h_j(key)` for 1-based `j`.
    pub fn server_for(&self, key: u64, j: usize, n: usize) -> usize {
        let h = mix64(self.seeds[j - 1] ^ mix64(key));
        ((h as u128 * n as u128) >> 64) as usize
    }

    pub fn byte_len(&self) -> usize {
        8 * self.seeds.len()
    }
}

/// Bucket metadata. Per-server level blocks are held by the servers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BucketState {
    pub id: BucketId,
    pub timestamp: u64,
    pub hashes: HashFamily,
    pub item_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("bucket {bucket} holds {count} items, allowed {allowed}")]
pub struct SizeViolation {
    pub bucket: BucketId,
    pub count: usize,
    pub allowed: String,
}

/// Non-root buckets hold 0 or between n and 2n items; the root at most 2n.
pub fn bucket_size_check(id: BucketId, item_count: usize, n: usize) -> Result<(), SizeViolation> {
    let ok = if id.is_root() {
        item_count <= 2 * n
    } else {
        item_count == 0 || (n..=2 * n).contains(&item_count)
    };
    if ok {
        Ok(())
    } else {
        Err(SizeViolation {
            bucket: id,
            count: item_count,
            allowed: if id.is_root() {
                format!("0..={}", 2 * n)
            } else {
                format!("0 or {n}..={}", 2 * n)
            },
        })
    }
}

impl BucketState {
    pub fn size_check(&self, n: usize) -> Result<(), SizeViolation> {
        bucket_size_check(self.id, self.item_count, n)
    }
}

/// One line of the bucket-tree snapshot export.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BucketRecord {
    pub zone: usize,
    pub prefix: String,
    pub items: usize,
    pub timestamp: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn root_holds_every_key() {
        for key in [0u64, 1, 99, u32::MAX as u64] {
            assert_eq!(fbucket(0, key, 12).unwrap(), BucketId::ROOT);
        }
    }

    #[test]
    fn child_rule_follows_low_bits() {
        // d_0 = 1, d_1 = 0, d_2 = 1
        let key = 0b101u64 | (1 << 5);
        let b = fbucket(3, key, 8).unwrap();
        assert_eq!(b.label(), "101");
        let mut walk = BucketId::ROOT;
        for z in 0..3 {
            walk = walk.child(bit(key, z));
        }
        assert_eq!(walk, b);
    }

    #[test]
    fn zones_form_an_ancestor_chain() {
        let key = 0xdead_beef;
        for z in 0..32 {
            let a = fbucket(z, key, 32).unwrap();
            let b = fbucket(z + 1, key, 32).unwrap();
            assert!(b.label().starts_with(&a.label()));
            assert!(a.contains(key) && b.contains(key));
        }
        assert!(fbucket(33, key, 32).is_err());
    }

    #[test]
    fn size_rule_boundaries() {
        let n = 16;
        let child = BucketId::ROOT.child(1);
        assert!(bucket_size_check(child, 0, n).is_ok());
        assert!(bucket_size_check(child, n - 1, n).is_err());
        assert!(bucket_size_check(child, n, n).is_ok());
        assert!(bucket_size_check(child, 2 * n, n).is_ok());
        assert!(bucket_size_check(child, 2 * n + 1, n).is_err());
        assert!(bucket_size_check(BucketId::ROOT, 2 * n, n).is_ok());
        assert!(bucket_size_check(BucketId::ROOT, 3, n).is_ok());
        assert!(bucket_size_check(BucketId::ROOT, 2 * n + 1, n).is_err());
    }

    #[test]
    fn hash_family_is_seeded_and_in_range() {
        let h = HashFamily::new(vec![1, 2, 3]);
        let g = HashFamily::new(vec![1, 2, 4]);
        for key in 0..200u64 {
            for j in 1..=3 {
                assert!(h.server_for(key, j, 81) < 81);
            }
            assert_eq!(h.server_for(key, 1, 81), g.server_for(key, 1, 81));
        }
        let differs = (0..200u64).any(|key| h.server_for(key, 3, 81) != g.server_for(key, 3, 81));
        assert!(differs);
    }
}
