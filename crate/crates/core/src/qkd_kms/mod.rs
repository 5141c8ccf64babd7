//! Paired QKD devices per link with ETSI GS QKD 014 delivery semantics.
//!
//! Both endpoints of a link see the same ordered key store. The initiator takes the
//! oldest fresh key with [`QkdLinkState::get_enc_key`]; that key is then reserved for
//! the peer, which redeems it once by ID with [`QkdLinkState::get_dec_key`].

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::netmodel::{LinkId, NodeId};
use crate::simcore::RngStream;

pub mod service;

pub const KEY_SIZE_BYTES: usize = 32;
pub const KEY_SIZE_BITS: usize = KEY_SIZE_BYTES * 8;
pub const DEFAULT_RATE_KEYS_PER_S: f64 = 10.0;
pub const DEFAULT_BUFFER_CAP: usize = 1000;

/// 256-bit key plus its UUID identifier.
#[derive(Clone, PartialEq, Eq)]
pub struct KeyRecord {
    pub key_id: Uuid,
    pub key: [u8; KEY_SIZE_BYTES],
}

impl std::fmt::Debug for KeyRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KeyRecord").field("key_id", &self.key_id).finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KmsError {
    #[error("no key available on link {0}")]
    NoKeyAvailable(LinkId),
    #[error("unknown or already consumed key id {0}")]
    UnknownKeyId(Uuid),
    #[error("{node} is not an endpoint of link {link}")]
    NotAnEndpoint { node: NodeId, link: LinkId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    Lo,
    Hi,
}

/// Configuration of one QKD link's key supply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QkdLinkConfig {
    pub a: NodeId,
    pub b: NodeId,
    #[serde(default = "default_rate")]
    pub rate: f64,
    #[serde(default = "default_cap")]
    pub cap: usize,
    /// Keep serving buffered keys after the device stops.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub drain_residual: bool,
}

fn default_rate() -> f64 {
    DEFAULT_RATE_KEYS_PER_S
}

fn default_cap() -> usize {
    DEFAULT_BUFFER_CAP
}

impl QkdLinkConfig {
    pub fn new(a: impl Into<String>, b: impl Into<String>) -> Self {
        QkdLinkConfig {
            a: NodeId::new(a),
            b: NodeId::new(b),
            rate: DEFAULT_RATE_KEYS_PER_S,
            cap: DEFAULT_BUFFER_CAP,
            drain_residual: false,
        }
    }

    pub fn id(&self) -> LinkId {
        LinkId::new(&self.a, &self.b)
    }
}

/// Key supply and KMS pair of one QKD link.
#[derive(Debug, Clone)]
pub struct QkdLinkState {
    link: LinkId,
    rate_keys_per_s: f64,
    buffer_cap: usize,
    operational: bool,
    drain_residual: bool,
    /// Fractional keys carried between ticks, in key-milliseconds (rate * ms).
    accum_milli_keys: f64,
    /// Held by both sides, oldest first.
    fresh: VecDeque<(Uuid, [u8; KEY_SIZE_BYTES])>,
    /// Taken by one endpoint via enc_keys; redeemable only by the other one.
    issued: HashMap<Uuid, ([u8; KEY_SIZE_BYTES], Side)>,
    generated: u64,
    consumed_lo: u64,
    consumed_hi: u64,
}

impl QkdLinkState {
    pub fn new(link: LinkId, rate_keys_per_s: f64, buffer_cap: usize) -> Self {
        assert!(rate_keys_per_s >= 0.0, "rate must be non-negative");
        assert!(buffer_cap >= 1, "buffer cap must be at least one");
        QkdLinkState {
            link,
            rate_keys_per_s,
            buffer_cap,
            operational: true,
            drain_residual: false,
            accum_milli_keys: 0.0,
            fresh: VecDeque::new(),
            issued: HashMap::new(),
            generated: 0,
            consumed_lo: 0,
            consumed_hi: 0,
        }
    }

    pub fn from_config(cfg: &QkdLinkConfig) -> Self {
        let mut st = Self::new(cfg.id(), cfg.rate, cfg.cap);
        st.drain_residual = cfg.drain_residual;
        st
    }

    pub fn link(&self) -> &LinkId {
        &self.link
    }

    pub fn is_operational(&self) -> bool {
        self.operational
    }

    pub fn set_operational(&mut self, up: bool) {
        self.operational = up;
    }

    /// Allow enc_keys to hand out buffered keys after termination (off by default).
    pub fn set_drain_residual(&mut self, drain: bool) {
        self.drain_residual = drain;
    }

    pub fn buffer_len(&self) -> usize {
        self.fresh.len() + self.issued.len()
    }

    /// Keys the given endpoint could still take via enc_keys.
    pub fn available_for(&self, node: &NodeId) -> Result<usize, KmsError> {
        self.side_of(node)?;
        Ok(self.fresh.len())
    }

    pub fn generated(&self) -> u64 {
        self.generated
    }

    pub fn consumed_by(&self, node: &NodeId) -> Result<u64, KmsError> {
        Ok(match self.side_of(node)? {
            Side::Lo => self.consumed_lo,
            Side::Hi => self.consumed_hi,
        })
    }

    fn side_of(&self, node: &NodeId) -> Result<Side, KmsError> {
        if node == self.link.lo() {
            Ok(Side::Lo)
        } else if node == self.link.hi() {
            Ok(Side::Hi)
        } else {
            Err(KmsError::NotAnEndpoint { node: node.clone(), link: self.link.clone() })
        }
    }

    fn consume(&mut self, side: Side) {
        match side {
            Side::Lo => self.consumed_lo += 1,
            Side::Hi => self.consumed_hi += 1,
        }
    }

    /// Advance generation by `dt_ms`. Fractional keys carry over between calls;
    /// nothing is produced while non-operational or while the buffer is full.
    pub fn tick_generate(&mut self, dt_ms: u64, rng: &mut RngStream) -> usize {
        if !self.operational {
            return 0;
        }
        self.accum_milli_keys += self.rate_keys_per_s * dt_ms as f64;
        let whole = (self.accum_milli_keys / 1000.0 + 1e-9).floor();
        self.accum_milli_keys -= whole * 1000.0;
        if self.accum_milli_keys < 0.0 {
            self.accum_milli_keys = 0.0;
        }
        let room = self.buffer_cap.saturating_sub(self.buffer_len());
        let n = (whole as usize).min(room);
        for _ in 0..n {
            let mut id_bytes = [0u8; 16];
            rng.fill(&mut id_bytes);
            let key_id = uuid::Builder::from_random_bytes(id_bytes).into_uuid();
            let key = rng.bytes32();
            self.fresh.push_back((key_id, key));
        }
        self.generated += n as u64;
        if n < whole as usize {
            // buffer full: surplus is discarded, not banked
            self.accum_milli_keys = 0.0;
        }
        n
    }

    /// Insert a specific record (tests and prefilled serve mode).
    pub fn push_record(&mut self, rec: KeyRecord) -> bool {
        let known = self.issued.contains_key(&rec.key_id) || self.fresh.iter().any(|(id, _)| *id == rec.key_id);
        if self.buffer_len() >= self.buffer_cap || known {
            return false;
        }
        self.fresh.push_back((rec.key_id, rec.key));
        self.generated += 1;
        true
    }

    /// Oldest fresh key, consumed on the requester's side and reserved for the peer.
    pub fn get_enc_key(&mut self, requester: &NodeId) -> Result<KeyRecord, KmsError> {
        let side = self.side_of(requester)?;
        if !self.operational && !self.drain_residual {
            return Err(KmsError::NoKeyAvailable(self.link.clone()));
        }
        let Some((key_id, key)) = self.fresh.pop_front() else {
            return Err(KmsError::NoKeyAvailable(self.link.clone()));
        };
        self.issued.insert(key_id, (key, side));
        let rec = KeyRecord { key_id, key };
        self.consume(side);
        Ok(rec)
    }

    /// Redeem a key id issued to the peer. Each id works once.
    pub fn get_dec_key(&mut self, requester: &NodeId, key_id: &Uuid) -> Result<[u8; KEY_SIZE_BYTES], KmsError> {
        let side = self.side_of(requester)?;
        match self.issued.get(key_id) {
            Some((_, issuer)) if *issuer != side => {}
            _ => return Err(KmsError::UnknownKeyId(*key_id)),
        }
        let (key, _) = self.issued.remove(key_id).expect("checked above");
        self.consume(side);
        Ok(key)
    }
}
