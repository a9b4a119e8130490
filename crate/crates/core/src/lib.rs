//! A deterministic simulator of a crash-robust distributed key-value store
//! built on a bucket tree over a k-ary butterfly.

pub mod adversary;
pub mod buckets;
pub mod butterfly;
pub mod cluster;
pub mod codec;
pub mod gf256;
pub mod harness;
pub mod lookup_protocol;
pub mod oracle;
pub mod params;
pub mod recovery;
pub mod rng;
pub mod simnet;
pub mod storage;
pub mod write_protocol;
