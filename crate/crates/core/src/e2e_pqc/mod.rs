//! End-to-end PQC key exchange (Rosenpass-like) keyed into the data tunnel.
//!
//! A session has one or more paths. Each path runs its own four-message KEM
//! handshake through the hop tunnels and yields a 32-byte output key (OSK) on
//! both endpoints. The data-tunnel PSK is the SHA-256 combination of the per-path
//! keys, taken in ascending path-id order.

pub mod kem;

use std::sync::Arc;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::hop_tunnel::{Side, TunnelState};
use crate::netmodel::NodeId;
use crate::simcore::{RngStream, SimTime};

pub use kem::{Ciphertext, Kem, KemError, KemRegistry, PublicKey, SecretKey, StubKem};

pub const DEFAULT_PERIOD_MS: u64 = 120_000;
pub const DEFAULT_FAILSAFE_MS: u64 = 180_000;
pub const HANDSHAKE_MESSAGES: u64 = 4;
/// Path id used for sessions routed dynamically instead of over pinned chains.
pub const DYNAMIC_PATH_ID: &str = "dynamic";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PqcError {
    #[error(transparent)]
    Kem(#[from] KemError),
    #[error("unknown KEM suite `{0}`")]
    UnknownSuite(String),
    #[error("unexpected handshake message")]
    UnexpectedMessage,
    #[error("key confirmation failed")]
    ConfirmMismatch,
    #[error("no output key available yet")]
    MissingKey,
    #[error("constituent key must be 32 bytes, got {0}")]
    BadKeyLength(usize),
    #[error("at least one constituent key is required")]
    NoKeys,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PqcMessage {
    InitHello { pk: PublicKey },
    RespHello { pk: PublicKey, ct: Ciphertext },
    InitConf { ct: Ciphertext },
    EmptyData { confirm: [u8; 16] },
}

impl PqcMessage {
    /// Position in the exchange (0..4); even indices travel initiator to responder.
    pub fn index(&self) -> u64 {
        match self {
            PqcMessage::InitHello { .. } => 0,
            PqcMessage::RespHello { .. } => 1,
            PqcMessage::InitConf { .. } => 2,
            PqcMessage::EmptyData { .. } => 3,
        }
    }

    pub fn from_initiator(&self) -> bool {
        self.index().is_multiple_of(2)
    }
}

fn derive_osk(suite: &str, ss1: &[u8; 32], ss2: &[u8; 32]) -> [u8; 32] {
    Sha256::new()
        .chain_update(b"osk")
        .chain_update(suite.as_bytes())
        .chain_update(ss1)
        .chain_update(ss2)
        .finalize()
        .into()
}

fn confirm_tag(osk: &[u8; 32]) -> [u8; 16] {
    let d = Sha256::new().chain_update(b"confirm").chain_update(osk).finalize();
    d[..16].try_into().unwrap()
}

/// Initiator half of one handshake.
pub struct InitiatorHs {
    kem: Arc<dyn Kem>,
    sk: SecretKey,
    osk: Option<[u8; 32]>,
}

impl InitiatorHs {
    pub fn start(kem: Arc<dyn Kem>, rng: &mut RngStream) -> (Self, PqcMessage) {
        let (pk, sk) = kem.keygen(rng);
        (InitiatorHs { kem, sk, osk: None }, PqcMessage::InitHello { pk })
    }

    pub fn on_resp_hello(&mut self, msg: &PqcMessage, rng: &mut RngStream) -> Result<PqcMessage, PqcError> {
        let PqcMessage::RespHello { pk, ct } = msg else {
            return Err(PqcError::UnexpectedMessage);
        };
        let ss1 = self.kem.decaps(&self.sk, ct)?;
        let (ct2, ss2) = self.kem.encaps(pk, rng)?;
        self.osk = Some(derive_osk(self.kem.suite_id(), &ss1, &ss2));
        Ok(PqcMessage::InitConf { ct: ct2 })
    }

    /// Final message: check the responder derived the same key.
    pub fn on_empty_data(&self, msg: &PqcMessage) -> Result<[u8; 32], PqcError> {
        let PqcMessage::EmptyData { confirm } = msg else {
            return Err(PqcError::UnexpectedMessage);
        };
        let osk = self.osk.ok_or(PqcError::UnexpectedMessage)?;
        if confirm_tag(&osk) != *confirm {
            return Err(PqcError::ConfirmMismatch);
        }
        Ok(osk)
    }
}

/// Responder half of one handshake.
pub struct ResponderHs {
    kem: Arc<dyn Kem>,
    sk: SecretKey,
    ss1: [u8; 32],
}

impl ResponderHs {
    pub fn on_init_hello(kem: Arc<dyn Kem>, msg: &PqcMessage, rng: &mut RngStream) -> Result<(Self, PqcMessage), PqcError> {
        let PqcMessage::InitHello { pk: peer } = msg else {
            return Err(PqcError::UnexpectedMessage);
        };
        let (ct1, ss1) = kem.encaps(peer, rng)?;
        let (pk, sk) = kem.keygen(rng);
        Ok((ResponderHs { kem, sk, ss1 }, PqcMessage::RespHello { pk, ct: ct1 }))
    }

    /// Returns the responder's OSK (held until the exchange completes) and the final message.
    pub fn on_init_conf(&self, msg: &PqcMessage) -> Result<([u8; 32], PqcMessage), PqcError> {
        let PqcMessage::InitConf { ct } = msg else {
            return Err(PqcError::UnexpectedMessage);
        };
        let ss2 = self.kem.decaps(&self.sk, ct)?;
        let osk = derive_osk(self.kem.suite_id(), &self.ss1, &ss2);
        Ok((osk, PqcMessage::EmptyData { confirm: confirm_tag(&osk) }))
    }
}

/// SHA-256 over the constituent keys concatenated in ascending path-id order.
pub fn combine_paths<P: AsRef<str>, K: AsRef<[u8]>>(keys: &[(P, K)]) -> Result<[u8; 32], PqcError> {
    if keys.is_empty() {
        return Err(PqcError::NoKeys);
    }
    let mut sorted: Vec<(&str, &[u8])> = keys.iter().map(|(p, k)| (p.as_ref(), k.as_ref())).collect();
    sorted.sort_by(|a, b| a.0.cmp(b.0));
    let mut h = Sha256::new();
    for (_, k) in sorted {
        if k.len() != 32 {
            return Err(PqcError::BadKeyLength(k.len()));
        }
        h.update(k);
    }
    Ok(h.finalize().into())
}

/// Per-path handshake state of a session.
#[derive(Debug, Clone)]
pub struct PathKeys {
    pub path_id: String,
    /// Pinned node chain, or `None` when the route is looked up per attempt.
    pub nodes: Option<Vec<NodeId>>,
    pub initiator_suite: String,
    pub responder_suite: String,
    osk: [Option<[u8; 32]>; 2],
    last_success_at: Option<SimTime>,
    injected_for: Option<SimTime>,
}

impl PathKeys {
    pub fn new(path_id: impl Into<String>, nodes: Option<Vec<NodeId>>, initiator_suite: &str, responder_suite: &str) -> Self {
        PathKeys {
            path_id: path_id.into(),
            nodes,
            initiator_suite: initiator_suite.to_owned(),
            responder_suite: responder_suite.to_owned(),
            osk: [None, None],
            last_success_at: None,
            injected_for: None,
        }
    }

    pub fn osk(&self, side: Side) -> Option<[u8; 32]> {
        self.osk[side_index(side)]
    }

    pub fn last_success_at(&self) -> Option<SimTime> {
        self.last_success_at
    }
}

fn side_index(side: Side) -> usize {
    match side {
        Side::Initiator => 0,
        Side::Responder => 1,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PqcOutcome {
    Established { osk: [u8; 32] },
    Undelivered { message: u64 },
    Failed(PqcError),
}

/// One end-to-end PQC session between two endpoints.
#[derive(Debug, Clone)]
pub struct PqcSession {
    pub id: String,
    initiator: NodeId,
    responder: NodeId,
    paths: Vec<PathKeys>,
    period_ms: u64,
    failsafe_ms: u64,
}

impl PqcSession {
    /// The smaller endpoint id initiates. Paths are kept in ascending id order.
    pub fn new(id: impl Into<String>, a: &NodeId, b: &NodeId, mut paths: Vec<PathKeys>) -> Self {
        assert!(!paths.is_empty(), "a session needs at least one path");
        paths.sort_by(|x, y| x.path_id.cmp(&y.path_id));
        let (initiator, responder) = if a <= b { (a.clone(), b.clone()) } else { (b.clone(), a.clone()) };
        PqcSession {
            id: id.into(),
            initiator,
            responder,
            paths,
            period_ms: DEFAULT_PERIOD_MS,
            failsafe_ms: DEFAULT_FAILSAFE_MS,
        }
    }

    pub fn with_timers(mut self, period_ms: u64, failsafe_ms: u64) -> Self {
        self.period_ms = period_ms;
        self.failsafe_ms = failsafe_ms;
        self
    }

    pub fn initiator(&self) -> &NodeId {
        &self.initiator
    }

    pub fn responder(&self) -> &NodeId {
        &self.responder
    }

    pub fn paths(&self) -> &[PathKeys] {
        &self.paths
    }

    pub fn path(&self, idx: usize) -> &PathKeys {
        &self.paths[idx]
    }

    pub fn period_ms(&self) -> u64 {
        self.period_ms
    }

    pub fn failsafe_ms(&self) -> u64 {
        self.failsafe_ms
    }

    /// Arm a finished handshake on both endpoints. The success time is the
    /// attempt's start.
    pub fn complete_path(&mut self, idx: usize, started_at: SimTime, initiator_osk: [u8; 32], responder_osk: [u8; 32]) {
        let p = &mut self.paths[idx];
        p.osk = [Some(initiator_osk), Some(responder_osk)];
        if p.last_success_at.is_none_or(|t| started_at > t) {
            p.last_success_at = Some(started_at);
        }
        p.injected_for = None;
    }

    pub fn failsafe_deadline(&self, idx: usize) -> Option<SimTime> {
        self.paths[idx].last_success_at.map(|t| t.plus_millis(self.failsafe_ms))
    }

    /// Replace both endpoints' key for path `idx` with independent random keys
    /// once its deadline has passed. At most once per outage.
    pub fn on_failsafe_deadline(&mut self, idx: usize, now: SimTime, rng: &mut RngStream) -> bool {
        let Some(deadline) = self.failsafe_deadline(idx) else {
            return false;
        };
        let p = &mut self.paths[idx];
        if now < deadline || p.injected_for == Some(deadline) {
            return false;
        }
        p.injected_for = Some(deadline);
        let a = rng.bytes32();
        let mut b = rng.bytes32();
        while b == a {
            b = rng.bytes32();
        }
        p.osk = [Some(a), Some(b)];
        true
    }

    /// Data-tunnel PSK for one endpoint: the combination of its per-path keys.
    pub fn data_psk(&self, side: Side) -> Result<[u8; 32], PqcError> {
        let keys = self
            .paths
            .iter()
            .map(|p| p.osk(side).map(|k| (p.path_id.as_str(), k)).ok_or(PqcError::MissingKey))
            .collect::<Result<Vec<_>, _>>()?;
        combine_paths(&keys)
    }

    pub fn inject_osk(&self, side: Side, data_tunnel: &mut TunnelState) -> Result<bool, PqcError> {
        let psk = self.data_psk(side)?;
        Ok(data_tunnel.set_psk(side, &psk).expect("32-byte key"))
    }

    /// Run the four-message exchange for path `idx` synchronously. `deliver`
    /// decides whether each message arrives.
    pub fn handshake(
        &mut self,
        idx: usize,
        now: SimTime,
        registry: &KemRegistry,
        rng: &mut RngStream,
        mut deliver: impl FnMut(&PqcMessage) -> bool,
    ) -> PqcOutcome {
        let path = &self.paths[idx];
        let Some(ik) = registry.get(&path.initiator_suite) else {
            return PqcOutcome::Failed(PqcError::UnknownSuite(path.initiator_suite.clone()));
        };
        let Some(rk) = registry.get(&path.responder_suite) else {
            return PqcOutcome::Failed(PqcError::UnknownSuite(path.responder_suite.clone()));
        };
        let (mut init, m1) = InitiatorHs::start(ik, rng);
        if !deliver(&m1) {
            return PqcOutcome::Undelivered { message: 0 };
        }
        let (resp, m2) = match ResponderHs::on_init_hello(rk, &m1, rng) {
            Ok(x) => x,
            Err(e) => return PqcOutcome::Failed(e),
        };
        if !deliver(&m2) {
            return PqcOutcome::Undelivered { message: 1 };
        }
        let m3 = match init.on_resp_hello(&m2, rng) {
            Ok(m) => m,
            Err(e) => return PqcOutcome::Failed(e),
        };
        if !deliver(&m3) {
            return PqcOutcome::Undelivered { message: 2 };
        }
        let (resp_osk, m4) = match resp.on_init_conf(&m3) {
            Ok(x) => x,
            Err(e) => return PqcOutcome::Failed(e),
        };
        if !deliver(&m4) {
            return PqcOutcome::Undelivered { message: 3 };
        }
        match init.on_empty_data(&m4) {
            Ok(osk) => {
                self.complete_path(idx, now, osk, resp_osk);
                PqcOutcome::Established { osk }
            }
            Err(e) => PqcOutcome::Failed(e),
        }
    }
}

/// Result of serving `n` handshakes back to back on one responder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduleReport {
    pub sessions: usize,
    pub service_ms: u64,
    pub period_ms: u64,
    pub last_completion_ms: u64,
    /// Indices of sessions finishing after the period.
    pub overflowed: Vec<usize>,
}

impl ScheduleReport {
    pub fn all_within_period(&self) -> bool {
        self.overflowed.is_empty()
    }
}

/// Serialized service model: session `i` completes at `(i + 1) * service_ms`.
/// `service_ms` is a model input, not a measured figure.
pub fn schedule_many(n: usize, service_ms: u64, period_ms: u64) -> ScheduleReport {
    assert!(n >= 1, "at least one session");
    let overflowed = (0..n).filter(|&i| (i as u64 + 1) * service_ms > period_ms).collect();
    ScheduleReport {
        sessions: n,
        service_ms,
        period_ms,
        last_completion_ms: n as u64 * service_ms,
        overflowed,
    }
}
