//! Per-hop key rotation agent (Arnika-like).
//!
//! The lexicographically smaller node of a hop initiates: it pulls a key from its
//! KMS, sends the key ID to the peer over the plain classical channel, the peer
//! redeems the ID at its own KMS and acknowledges. On the ack both ends arm the
//! key as the hop tunnel PSK. If nothing succeeds for `failsafe_ms`, each end
//! injects an independent random PSK.

use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::hop_tunnel::{Side, TunnelState};
use crate::netmodel::{LinkId, NodeId};
use crate::qkd_kms::{KeyRecord, KmsError, QkdLinkState, KEY_SIZE_BYTES};
use crate::simcore::{RngStream, SimTime};

pub const DEFAULT_PERIOD_MS: u64 = 120_000;
pub const DEFAULT_FAILSAFE_MS: u64 = 180_000;
pub const NEGOTIATION_TIMEOUT_MS: u64 = 10_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("message too short: {0} bytes")]
    Truncated(usize),
    #[error("unknown message type {0:#04x}")]
    UnknownType(u8),
    #[error("hop id is not valid utf-8")]
    BadHop,
}

const TYPE_KEY_ID: u8 = 0x01;
const TYPE_ACK: u8 = 0x02;

/// Messages exchanged between the two agents of a hop. Only identifiers travel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NegoMessage {
    KeyId(KeyIdMessage),
    Ack { hop: String, seq: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyIdMessage {
    pub hop: String,
    pub key_id: Uuid,
    pub seq: u64,
}

impl NegoMessage {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            NegoMessage::KeyId(m) => {
                out.push(TYPE_KEY_ID);
                out.extend_from_slice(&m.seq.to_be_bytes());
                out.extend_from_slice(m.key_id.as_bytes());
                out.extend_from_slice(m.hop.as_bytes());
            }
            NegoMessage::Ack { hop, seq } => {
                out.push(TYPE_ACK);
                out.extend_from_slice(&seq.to_be_bytes());
                out.extend_from_slice(hop.as_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let (&ty, rest) = bytes.split_first().ok_or(WireError::Truncated(0))?;
        if rest.len() < 8 {
            return Err(WireError::Truncated(bytes.len()));
        }
        let seq = u64::from_be_bytes(rest[..8].try_into().unwrap());
        let rest = &rest[8..];
        match ty {
            TYPE_KEY_ID => {
                if rest.len() < 16 {
                    return Err(WireError::Truncated(bytes.len()));
                }
                let key_id = Uuid::from_slice(&rest[..16]).expect("16 bytes");
                let hop = std::str::from_utf8(&rest[16..]).map_err(|_| WireError::BadHop)?;
                Ok(NegoMessage::KeyId(KeyIdMessage { hop: hop.to_owned(), key_id, seq }))
            }
            TYPE_ACK => {
                let hop = std::str::from_utf8(rest).map_err(|_| WireError::BadHop)?;
                Ok(NegoMessage::Ack { hop: hop.to_owned(), seq })
            }
            other => Err(WireError::UnknownType(other)),
        }
    }
}

/// Properties of the channel the agents negotiate over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelDescriptor {
    pub encrypted: bool,
    pub authenticated: bool,
    pub observable: bool,
    pub key_material_exposed: bool,
}

pub fn negotiation_channel_properties(_hop: &LinkId) -> ChannelDescriptor {
    ChannelDescriptor { encrypted: false, authenticated: false, observable: true, key_material_exposed: false }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FailReason {
    Kms(KmsError),
    Timeout,
    Malformed(WireError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RotationOutcome {
    Rotated { key_id: Uuid },
    Failed(FailReason),
}

#[derive(Debug, Clone)]
struct InFlight {
    seq: u64,
    record: KeyRecord,
    started_at: SimTime,
}

/// Rotation state of one hop (both agents, which only talk through messages).
#[derive(Debug, Clone)]
pub struct RotationState {
    hop: LinkId,
    period_ms: u64,
    failsafe_ms: u64,
    last_success_at: Option<SimTime>,
    next_seq: u64,
    in_flight: Option<InFlight>,
    pending: Option<(u64, KeyRecord)>,
    injected_for: Option<SimTime>,
}

impl RotationState {
    pub fn new(hop: LinkId) -> Self {
        Self::with_timers(hop, DEFAULT_PERIOD_MS, DEFAULT_FAILSAFE_MS)
    }

    pub fn with_timers(hop: LinkId, period_ms: u64, failsafe_ms: u64) -> Self {
        RotationState {
            hop,
            period_ms,
            failsafe_ms,
            last_success_at: None,
            next_seq: 0,
            in_flight: None,
            pending: None,
            injected_for: None,
        }
    }

    pub fn hop(&self) -> &LinkId {
        &self.hop
    }

    pub fn initiator(&self) -> &NodeId {
        self.hop.lo()
    }

    pub fn responder(&self) -> &NodeId {
        self.hop.hi()
    }

    pub fn period_ms(&self) -> u64 {
        self.period_ms
    }

    pub fn failsafe_ms(&self) -> u64 {
        self.failsafe_ms
    }

    pub fn last_success_at(&self) -> Option<SimTime> {
        self.last_success_at
    }

    pub fn in_progress(&self) -> bool {
        self.in_flight.is_some()
    }

    /// Initiator step: fetch a key and build the key-ID message.
    pub fn begin(&mut self, now: SimTime, kms: &mut QkdLinkState) -> Result<NegoMessage, FailReason> {
        let record = kms.get_enc_key(self.initiator()).map_err(FailReason::Kms)?;
        let seq = self.next_seq;
        self.next_seq += 1;
        let msg = KeyIdMessage { hop: self.hop.to_string(), key_id: record.key_id, seq };
        self.in_flight = Some(InFlight { seq, record, started_at: now });
        Ok(NegoMessage::KeyId(msg))
    }

    /// Responder step: redeem the received ID and build the acknowledgement.
    pub fn on_key_id(&mut self, wire: &[u8], kms: &mut QkdLinkState) -> Result<NegoMessage, FailReason> {
        let msg = match NegoMessage::decode(wire).map_err(FailReason::Malformed)? {
            NegoMessage::KeyId(m) => m,
            NegoMessage::Ack { .. } => return Err(FailReason::Malformed(WireError::UnknownType(TYPE_ACK))),
        };
        let key = kms.get_dec_key(self.responder(), &msg.key_id).map_err(FailReason::Kms)?;
        self.pending = Some((msg.seq, KeyRecord { key_id: msg.key_id, key }));
        Ok(NegoMessage::Ack { hop: msg.hop, seq: msg.seq })
    }

    /// Initiator receives the ack: both ends arm the shared key on `tunnel`.
    /// Returns `None` for a stale or foreign ack.
    pub fn on_ack(&mut self, wire: &[u8], tunnel: &mut TunnelState) -> Option<Uuid> {
        let seq = match NegoMessage::decode(wire) {
            Ok(NegoMessage::Ack { seq, .. }) => seq,
            _ => return None,
        };
        let flight = self.in_flight.as_ref().filter(|f| f.seq == seq)?;
        let (pseq, pending) = self.pending.as_ref()?;
        if *pseq != seq {
            return None;
        }
        let flight = flight.clone();
        let responder_key = pending.key;
        self.pending = None;
        self.in_flight = None;
        tunnel.set_psk(Side::Initiator, &flight.record.key).expect("32-byte key");
        tunnel.set_psk(Side::Responder, &responder_key).expect("32-byte key");
        if self.last_success_at.is_none_or(|t| flight.started_at > t) {
            self.last_success_at = Some(flight.started_at);
        }
        self.injected_for = None;
        Some(flight.record.key_id)
    }

    /// Abort the attempt with sequence `seq` (negotiation timeout). Returns whether
    /// that attempt was still open.
    pub fn fail(&mut self, seq: u64) -> bool {
        let open = self.in_flight.as_ref().is_some_and(|f| f.seq == seq);
        if open {
            self.in_flight = None;
        }
        if self.pending.as_ref().is_some_and(|(s, _)| *s == seq) {
            self.pending = None;
        }
        open
    }

    /// Sequence number of the open attempt, if any.
    pub fn open_seq(&self) -> Option<u64> {
        self.in_flight.as_ref().map(|f| f.seq)
    }

    pub fn failsafe_deadline(&self) -> Option<SimTime> {
        self.last_success_at.map(|t| t.plus_millis(self.failsafe_ms))
    }

    /// Inject independent random PSKs on both ends once the deadline has passed.
    /// Happens at most once per outage.
    pub fn on_failsafe_deadline(&mut self, now: SimTime, tunnel: &mut TunnelState, rng: &mut RngStream) -> bool {
        let Some(deadline) = self.failsafe_deadline() else {
            return false;
        };
        if now < deadline || self.injected_for == Some(deadline) {
            return false;
        }
        self.injected_for = Some(deadline);
        let a = rng.bytes32();
        let mut b = rng.bytes32();
        while b == a {
            b = rng.bytes32();
        }
        tunnel.set_psk(Side::Initiator, &a).expect("32-byte key");
        tunnel.set_psk(Side::Responder, &b).expect("32-byte key");
        true
    }

    /// Run a whole rotation synchronously. `carry` models the classical channel:
    /// it receives each encoded message and returns the bytes that arrive, or
    /// `None` if the message was lost.
    pub fn rotate(
        &mut self,
        now: SimTime,
        kms: &mut QkdLinkState,
        tunnel: &mut TunnelState,
        mut carry: impl FnMut(&[u8]) -> Option<Vec<u8>>,
    ) -> RotationOutcome {
        let msg = match self.begin(now, kms) {
            Ok(m) => m,
            Err(e) => return RotationOutcome::Failed(e),
        };
        let seq = self.open_seq().expect("attempt open");
        let Some(arrived) = carry(&msg.encode()) else {
            self.fail(seq);
            return RotationOutcome::Failed(FailReason::Timeout);
        };
        let ack = match self.on_key_id(&arrived, kms) {
            Ok(a) => a,
            Err(e) => {
                self.fail(seq);
                return RotationOutcome::Failed(e);
            }
        };
        let Some(arrived) = carry(&ack.encode()) else {
            self.fail(seq);
            return RotationOutcome::Failed(FailReason::Timeout);
        };
        match self.on_ack(&arrived, tunnel) {
            Some(key_id) => RotationOutcome::Rotated { key_id },
            None => {
                self.fail(seq);
                RotationOutcome::Failed(FailReason::Timeout)
            }
        }
    }
}

/// True if any 32-byte window of `payload` equals `key`.
pub fn contains_key_bytes(payload: &[u8], key: &[u8; KEY_SIZE_BYTES]) -> bool {
    payload.windows(KEY_SIZE_BYTES).any(|w| w == key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hop_tunnel::HandshakeOutcome;
    use crate::simcore::ComponentId;

    fn setup(prefill: usize) -> (RotationState, QkdLinkState, TunnelState, RngStream) {
        let hop = LinkId::new(&NodeId::new("t1"), &NodeId::new("alice"));
        let mut kms = QkdLinkState::new(hop.clone(), 1.0, 100);
        let mut rng = RngStream::for_component(3, &ComponentId::new("kms:test"));
        kms.tick_generate(prefill as u64 * 1000, &mut rng);
        (RotationState::new(hop), kms, TunnelState::new("wg:alice--t1"), rng)
    }

    fn t(s: u64) -> SimTime {
        SimTime::from_secs(s)
    }

    #[test]
    fn smaller_node_initiates() {
        let (st, ..) = setup(0);
        assert_eq!(st.initiator().as_str(), "alice");
        assert_eq!(st.responder().as_str(), "t1");
    }

    #[test]
    fn successful_rotation_arms_identical_psks() {
        let (mut st, mut kms, mut tun, _) = setup(3);
        let out = st.rotate(t(0), &mut kms, &mut tun, |m| Some(m.to_vec()));
        assert!(matches!(out, RotationOutcome::Rotated { .. }));
        assert_eq!(tun.psk(Side::Initiator), tun.psk(Side::Responder));
        assert!(tun.psk(Side::Initiator).is_some());
        assert_eq!(st.last_success_at(), Some(t(0)));
        assert!(matches!(tun.attempt_handshake(t(0), true), HandshakeOutcome::Established { .. }));
    }

    #[test]
    fn no_key_fails_and_leaves_psks() {
        let (mut st, mut kms, mut tun, _) = setup(0);
        let out = st.rotate(t(0), &mut kms, &mut tun, |m| Some(m.to_vec()));
        assert!(matches!(out, RotationOutcome::Failed(FailReason::Kms(KmsError::NoKeyAvailable(_)))));
        assert_eq!(tun.psk(Side::Initiator), None);
        assert_eq!(st.last_success_at(), None);
    }

    #[test]
    fn lost_key_id_times_out_without_redemption() {
        let (mut st, mut kms, mut tun, _) = setup(2);
        let out = st.rotate(t(0), &mut kms, &mut tun, |_| None);
        assert_eq!(out, RotationOutcome::Failed(FailReason::Timeout));
        assert_eq!(kms.consumed_by(st.responder()).unwrap(), 0);
        assert_eq!(kms.consumed_by(st.initiator()).unwrap(), 1);
    }

    #[test]
    fn lost_ack_discards_pending_key() {
        let (mut st, mut kms, mut tun, _) = setup(2);
        let mut n = 0;
        let out = st.rotate(t(0), &mut kms, &mut tun, |m| {
            n += 1;
            (n == 1).then(|| m.to_vec())
        });
        assert_eq!(out, RotationOutcome::Failed(FailReason::Timeout));
        assert_eq!(tun.psk(Side::Responder), None);
        assert!(!st.in_progress());
    }

    #[test]
    fn wire_carries_ids_only() {
        let (mut st, mut kms, mut tun, _) = setup(20);
        let mut transcript: Vec<Vec<u8>> = Vec::new();
        let mut keys = Vec::new();
        for i in 0..10 {
            st.rotate(t(120 * i), &mut kms, &mut tun, |m| {
                transcript.push(m.to_vec());
                Some(m.to_vec())
            });
            keys.push(*tun.psk(Side::Initiator).unwrap().as_bytes());
        }
        let ids = transcript
            .iter()
            .filter(|m| matches!(NegoMessage::decode(m), Ok(NegoMessage::KeyId(_))))
            .count();
        assert_eq!(ids, 10);
        for k in &keys {
            assert!(transcript.iter().all(|m| !contains_key_bytes(m, k)));
        }
        let ch = negotiation_channel_properties(st.hop());
        assert!(ch.observable && !ch.key_material_exposed && !ch.encrypted && !ch.authenticated);
    }

    #[test]
    fn failsafe_injects_once_at_deadline() {
        let (mut st, mut kms, mut tun, mut rng) = setup(2);
        st.rotate(t(0), &mut kms, &mut tun, |m| Some(m.to_vec()));
        assert_eq!(st.failsafe_deadline(), Some(t(180)));
        assert!(!st.on_failsafe_deadline(SimTime::from_millis(179_999), &mut tun, &mut rng));
        assert!(st.on_failsafe_deadline(t(180), &mut tun, &mut rng));
        assert_ne!(tun.psk(Side::Initiator), tun.psk(Side::Responder));
        assert!(!st.on_failsafe_deadline(t(200), &mut tun, &mut rng));
        assert_eq!(tun.attempt_handshake(t(240), true), HandshakeOutcome::PskMismatch);
    }

    #[test]
    fn success_before_deadline_resets_it() {
        let (mut st, mut kms, mut tun, mut rng) = setup(3);
        st.rotate(t(0), &mut kms, &mut tun, |m| Some(m.to_vec()));
        st.rotate(t(179), &mut kms, &mut tun, |m| Some(m.to_vec()));
        assert!(!st.on_failsafe_deadline(t(180), &mut tun, &mut rng));
        assert_eq!(st.failsafe_deadline(), Some(t(359)));
    }

    #[test]
    fn codec_round_trip_and_errors() {
        let m = NegoMessage::KeyId(KeyIdMessage { hop: "a--b".into(), key_id: Uuid::from_u128(7), seq: 9 });
        assert_eq!(NegoMessage::decode(&m.encode()).unwrap(), m);
        let a = NegoMessage::Ack { hop: "a--b".into(), seq: 1 };
        assert_eq!(NegoMessage::decode(&a.encode()).unwrap(), a);
        assert_eq!(NegoMessage::decode(&[]), Err(WireError::Truncated(0)));
        assert_eq!(NegoMessage::decode(&[9; 20]), Err(WireError::UnknownType(9)));
    }

    #[test]
    fn tampered_messages_never_yield_mismatched_success() {
        // Mutation oracle: flip one bit anywhere in either message. The rotation
        // must either fail or arm identical keys drawn from the KMS record.
        let mut rng = RngStream::new(11, 0);
        for trial in 0..500 {
            let (mut st, mut kms, mut tun, _) = setup(3);
            let target_msg = trial % 2;
            let mut idx = 0;
            let flip = rng.draw_below(8 * 40) as usize;
            let out = st.rotate(t(0), &mut kms, &mut tun, |m| {
                let mut m = m.to_vec();
                if idx == target_msg {
                    let bit = flip % (8 * m.len());
                    m[bit / 8] ^= 1 << (bit % 8);
                }
                idx += 1;
                Some(m)
            });
            match out {
                RotationOutcome::Rotated { .. } => {
                    assert_eq!(tun.psk(Side::Initiator), tun.psk(Side::Responder));
                }
                RotationOutcome::Failed(_) => {
                    assert_eq!(tun.psk(Side::Initiator), None);
                    assert_eq!(tun.psk(Side::Responder), None);
                }
            }
        }
    }
}
