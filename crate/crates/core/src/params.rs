//! System parameters shared by every protocol component.

use thiserror::Error;

use crate::butterfly::{Topology, TopologyError};
use crate::codec;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParamError {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("invalid value for `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ParamError {
    ParamError::Invalid {
        field,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub topology: Topology,
    /// Key universe is `n^p`.
    pub p: usize,
    /// Number of key bits that select buckets; zones run `0..=address_bits`.
    pub address_bits: usize,
    /// Pieces per item.
    pub c: usize,
    /// Payload length of every data item.
    pub payload_len: usize,
    /// Probing congestion factor.
    pub alpha: f64,
    /// Decoding congestion factor.
    pub beta: f64,
    /// Metadata samples per lookup are `c_kappa * ceil(log2 n)`.
    pub c_kappa: usize,
    /// Most servers the adversary may crash in one period.
    pub crash_budget: usize,
}

pub fn ceil_log2(n: usize) -> usize {
    (usize::BITS - n.saturating_sub(1).leading_zeros()) as usize
}

impl Params {
    /// Defaults for `n = k^d` servers.
    pub fn new(topology: Topology) -> Self {
        let n = topology.n();
        let p = 1;
        let address_bits = p * ceil_log2(n);
        Self {
            topology,
            p,
            address_bits,
            c: default_c(address_bits),
            payload_len: 64,
            alpha: 73.0,
            beta: 3.0,
            c_kappa: 4,
            crash_budget: default_crash_budget(n),
        }
    }

    pub fn for_servers(n: usize) -> Result<Self, ParamError> {
        Ok(Self::new(Topology::for_servers(n)?))
    }

    pub fn with_c(mut self, c: usize) -> Self {
        self.c = c;
        self
    }

    pub fn with_p(mut self, p: usize) -> Self {
        self.p = p;
        self.address_bits = p * ceil_log2(self.n());
        self
    }

    pub fn with_payload_len(mut self, len: usize) -> Self {
        self.payload_len = len;
        self
    }

    pub fn with_crash_budget(mut self, f: usize) -> Self {
        self.crash_budget = f;
        self
    }

    pub fn n(&self) -> usize {
        self.topology.n()
    }

    pub fn k(&self) -> usize {
        self.topology.k()
    }

    pub fn d(&self) -> usize {
        self.topology.d()
    }

    pub fn log2_n(&self) -> f64 {
        (self.n() as f64).log2()
    }

    pub fn threshold(&self) -> usize {
        codec::rs_threshold(self.c)
    }

    pub fn body_len(&self) -> usize {
        codec::piece_body_len(self.payload_len, self.c)
    }

    pub fn kappa(&self) -> usize {
        self.c_kappa * ceil_log2(self.n()).max(1)
    }

    /// Keys live in `0..2^address_bits`.
    pub fn key_limit(&self) -> u64 {
        1u64 << self.address_bits
    }

    /// `ceil(5c/6)`: active probes needed to place a request at a level.
    pub fn active_quorum(&self) -> usize {
        (5 * self.c).div_ceil(6)
    }

    pub fn validate(&self) -> Result<(), ParamError> {
        if self.c < 3 || self.c > 255 {
            return Err(invalid("c", format!("{} not in 3..=255", self.c)));
        }
        if self.p == 0 {
            return Err(invalid("p", "must be at least 1"));
        }
        if self.address_bits == 0 || self.address_bits > 63 {
            return Err(invalid("p", format!("address width {} not in 1..=63", self.address_bits)));
        }
        if self.payload_len == 0 || self.payload_len > u16::MAX as usize {
            return Err(invalid("payload_len", format!("{} not in 1..=65535", self.payload_len)));
        }
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(invalid("alpha", "congestion factors must be positive"));
        }
        if self.c_kappa == 0 {
            return Err(invalid("c_kappa", "must be at least 1"));
        }
        if self.crash_budget >= self.n() {
            return Err(invalid("crash_budget", format!("{} leaves no intact server", self.crash_budget)));
        }
        Ok(())
    }
}

/// `18 * ceil(log2 m)` capped at the field size.
pub fn default_c(address_bits: usize) -> usize {
    (18 * address_bits).clamp(3, 255)
}

/// `floor(n^(1 / log2 log2 n) / 72)`.
pub fn default_crash_budget(n: usize) -> usize {
    let l = (n as f64).log2();
    if l <= 2.0 {
        return 0;
    }
    ((n as f64).powf(1.0 / l.log2()) / 72.0).floor() as usize
}
