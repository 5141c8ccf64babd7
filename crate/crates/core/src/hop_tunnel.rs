//! WireGuard-style tunnel state: PSK mixing, periodic rekey and grace expiry.
//!
//! Used for hop tunnels (PSK from QKD via the rotation agent) and for the end-to-end
//! data tunnel (PSK from the PQC handshake). The classical Noise exchange is assumed
//! to always work; a handshake succeeds exactly when both sides hold the same PSK
//! and all three handshake packets arrive.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simcore::SimTime;

pub const DEFAULT_REKEY_PERIOD_MS: u64 = 120_000;
pub const DEFAULT_GRACE_MS: u64 = 60_000;
pub const HANDSHAKE_PACKETS: u64 = 3;

/// 32-byte pre-shared key.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Psk([u8; 32]);

impl Psk {
    pub fn new(bytes: [u8; 32]) -> Self {
        Psk(bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self, TunnelError> {
        let arr: [u8; 32] = bytes.try_into().map_err(|_| TunnelError::BadKeyLength(bytes.len()))?;
        Ok(Psk(arr))
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for Psk {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Psk({:02x}{:02x}..)", self.0[0], self.0[1])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TunnelError {
    #[error("pre-shared key must be 32 bytes, got {0}")]
    BadKeyLength(usize),
    #[error("tunnel {0} is down")]
    TunnelDown(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Initiator,
    Responder,
}

impl Side {
    fn index(self) -> usize {
        match self {
            Side::Initiator => 0,
            Side::Responder => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Down,
    Established,
}

/// PSKs of both sides captured when a handshake is initiated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HandshakeAttempt {
    pub tunnel: String,
    pub initiator_psk: Option<Psk>,
    pub responder_psk: Option<Psk>,
    pub started_at: SimTime,
}

impl HandshakeAttempt {
    pub fn psk_match(&self) -> bool {
        matches!((self.initiator_psk, self.responder_psk), (Some(a), Some(b)) if a == b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HandshakeOutcome {
    Established { epoch: u64 },
    PskMismatch,
    Undelivered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimerOutcome {
    /// Grace expired now; the tunnel stops forwarding.
    WentDown,
    /// Still alive; next rekey is due at the given instant.
    RekeyAt(SimTime),
    /// Already down (or never up).
    Idle,
}

#[derive(Debug, Clone)]
pub struct TunnelState {
    id: String,
    phase: Phase,
    psk: [Option<Psk>; 2],
    session_epoch: u64,
    last_session_at: Option<SimTime>,
    rekey_period_ms: u64,
    grace_ms: u64,
    phase_offset_ms: u64,
}

impl TunnelState {
    pub fn new(id: impl Into<String>) -> Self {
        Self::with_timers(id, DEFAULT_REKEY_PERIOD_MS, DEFAULT_GRACE_MS)
    }

    pub fn with_timers(id: impl Into<String>, rekey_period_ms: u64, grace_ms: u64) -> Self {
        assert!(rekey_period_ms > 0);
        TunnelState {
            id: id.into(),
            phase: Phase::Down,
            psk: [None, None],
            session_epoch: 0,
            last_session_at: None,
            rekey_period_ms,
            grace_ms,
            phase_offset_ms: 0,
        }
    }

    /// Offset of this tunnel's rekey grid within the period.
    pub fn with_phase_offset(mut self, offset_ms: u64) -> Self {
        self.phase_offset_ms = offset_ms % self.rekey_period_ms;
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn is_established(&self) -> bool {
        self.phase == Phase::Established
    }

    pub fn session_epoch(&self) -> u64 {
        self.session_epoch
    }

    pub fn last_session_at(&self) -> Option<SimTime> {
        self.last_session_at
    }

    pub fn psk(&self, side: Side) -> Option<Psk> {
        self.psk[side.index()]
    }

    pub fn rekey_period_ms(&self) -> u64 {
        self.rekey_period_ms
    }

    pub fn grace_ms(&self) -> u64 {
        self.grace_ms
    }

    /// Replace one side's PSK. Takes effect at the next handshake; returns whether
    /// the stored value changed.
    pub fn set_psk(&mut self, side: Side, psk: &[u8]) -> Result<bool, TunnelError> {
        let psk = Psk::from_slice(psk)?;
        let slot = &mut self.psk[side.index()];
        let changed = *slot != Some(psk);
        *slot = Some(psk);
        Ok(changed)
    }

    /// Snapshot the PSKs for a handshake starting at `now`.
    pub fn begin_handshake(&self, now: SimTime) -> HandshakeAttempt {
        HandshakeAttempt {
            tunnel: self.id.clone(),
            initiator_psk: self.psk[0],
            responder_psk: self.psk[1],
            started_at: now,
        }
    }

    /// Record a successful handshake; the session counts from the attempt's start.
    pub fn complete_handshake(&mut self, attempt: &HandshakeAttempt) -> u64 {
        debug_assert!(attempt.psk_match());
        self.phase = Phase::Established;
        self.session_epoch += 1;
        let started = attempt.started_at;
        if self.last_session_at.is_none_or(|t| started > t) {
            self.last_session_at = Some(started);
        }
        self.session_epoch
    }

    /// Run a whole handshake at `now` given whether all packets were delivered.
    /// Failure leaves the state untouched.
    pub fn attempt_handshake(&mut self, now: SimTime, delivered: bool) -> HandshakeOutcome {
        let attempt = self.begin_handshake(now);
        if !attempt.psk_match() {
            return HandshakeOutcome::PskMismatch;
        }
        if !delivered {
            return HandshakeOutcome::Undelivered;
        }
        HandshakeOutcome::Established { epoch: self.complete_handshake(&attempt) }
    }

    /// Instant at which the current session expires (last success + period + grace).
    pub fn expiry(&self) -> Option<SimTime> {
        self.last_session_at
            .map(|t| t.plus_millis(self.rekey_period_ms + self.grace_ms))
    }

    pub fn is_expired(&self, now: SimTime) -> bool {
        self.expiry().is_some_and(|e| now >= e)
    }

    pub fn on_timer(&mut self, now: SimTime) -> TimerOutcome {
        if self.phase == Phase::Down {
            return TimerOutcome::Idle;
        }
        if self.is_expired(now) {
            self.phase = Phase::Down;
            return TimerOutcome::WentDown;
        }
        match self.last_session_at {
            Some(_) => TimerOutcome::RekeyAt(self.next_rekey_after(now)),
            None => TimerOutcome::Idle,
        }
    }

    /// First point of this tunnel's rekey grid strictly after `now`.
    pub fn next_rekey_after(&self, now: SimTime) -> SimTime {
        next_grid_point(now, self.rekey_period_ms, self.phase_offset_ms)
    }

    /// Check that payload may be sent through the tunnel.
    pub fn transmit(&self) -> Result<(), TunnelError> {
        match self.phase {
            Phase::Established => Ok(()),
            Phase::Down => Err(TunnelError::TunnelDown(self.id.clone())),
        }
    }
}

/// Smallest `offset + k * period` strictly greater than `now`.
pub fn next_grid_point(now: SimTime, period_ms: u64, offset_ms: u64) -> SimTime {
    let t = now.as_millis();
    let offset = offset_ms % period_ms;
    if t < offset {
        return SimTime::from_millis(offset);
    }
    let k = (t - offset) / period_ms + 1;
    SimTime::from_millis(offset + k * period_ms)
}

#[cfg(test)]
mod tests {
    use super::*;

    const K1: [u8; 32] = [1; 32];
    const K2: [u8; 32] = [2; 32];

    fn s(secs: u64) -> SimTime {
        SimTime::from_secs(secs)
    }

    fn armed(k_init: [u8; 32], k_resp: [u8; 32]) -> TunnelState {
        let mut t = TunnelState::new("wg:a--b");
        t.set_psk(Side::Initiator, &k_init).unwrap();
        t.set_psk(Side::Responder, &k_resp).unwrap();
        t
    }

    #[test]
    fn matching_psks_establish() {
        let mut t = armed(K1, K1);
        assert_eq!(t.attempt_handshake(s(0), true), HandshakeOutcome::Established { epoch: 1 });
        assert!(t.transmit().is_ok());
    }

    #[test]
    fn mismatched_psk_fails_without_state_change() {
        let mut t = armed(K1, K1);
        t.attempt_handshake(s(0), true);
        t.set_psk(Side::Responder, &K2).unwrap();
        assert_eq!(t.attempt_handshake(s(120), true), HandshakeOutcome::PskMismatch);
        assert_eq!(t.session_epoch(), 1);
        assert_eq!(t.last_session_at(), Some(s(0)));
        // old session still carries traffic inside the grace window
        assert!(t.transmit().is_ok());
    }

    #[test]
    fn lost_packets_fail() {
        let mut t = armed(K1, K1);
        assert_eq!(t.attempt_handshake(s(0), false), HandshakeOutcome::Undelivered);
        assert_eq!(t.phase(), Phase::Down);
        assert_eq!(t.transmit(), Err(TunnelError::TunnelDown("wg:a--b".into())));
    }

    #[test]
    fn set_psk_is_idempotent_and_checks_length() {
        let mut t = armed(K1, K1);
        t.attempt_handshake(s(0), true);
        assert!(!t.set_psk(Side::Initiator, &K1).unwrap());
        assert_eq!(t.session_epoch(), 1);
        assert_eq!(t.set_psk(Side::Initiator, &[0u8; 31]), Err(TunnelError::BadKeyLength(31)));
    }

    #[test]
    fn unset_psk_never_matches() {
        let mut t = TunnelState::new("x");
        assert_eq!(t.attempt_handshake(s(0), true), HandshakeOutcome::PskMismatch);
        t.set_psk(Side::Initiator, &K1).unwrap();
        assert_eq!(t.attempt_handshake(s(0), true), HandshakeOutcome::PskMismatch);
    }

    #[test]
    fn grace_expiry_three_hundred_seconds() {
        let mut t = armed(K1, K1);
        t.attempt_handshake(s(0), true);
        t.attempt_handshake(s(120), true);
        t.set_psk(Side::Responder, &K2).unwrap();
        assert_eq!(t.attempt_handshake(s(240), true), HandshakeOutcome::PskMismatch);
        assert_eq!(t.on_timer(SimTime::from_millis(299_999)), TimerOutcome::RekeyAt(s(360)));
        assert_eq!(t.on_timer(s(300)), TimerOutcome::WentDown);
        assert_eq!(t.phase(), Phase::Down);
        assert_eq!(t.on_timer(s(301)), TimerOutcome::Idle);
    }

    #[test]
    fn data_tunnel_down_at_540() {
        let mut t = armed(K1, K1);
        t.attempt_handshake(s(360), true);
        t.set_psk(Side::Initiator, &K2).unwrap();
        assert_eq!(t.attempt_handshake(s(480), true), HandshakeOutcome::PskMismatch);
        assert!(t.is_established());
        assert_eq!(t.on_timer(s(539)), TimerOutcome::RekeyAt(s(600)));
        assert_eq!(t.on_timer(s(540)), TimerOutcome::WentDown);
    }

    #[test]
    fn continuous_success_never_expires() {
        let mut t = armed(K1, K1);
        for k in 0..50 {
            t.attempt_handshake(s(120 * k), true);
            assert_eq!(t.on_timer(s(120 * k + 119)), TimerOutcome::RekeyAt(s(120 * (k + 1))));
        }
        assert!(t.is_established());
    }

    #[test]
    fn grid_points() {
        assert_eq!(next_grid_point(s(0), 120_000, 0), s(120));
        assert_eq!(next_grid_point(s(119), 120_000, 0), s(120));
        assert_eq!(next_grid_point(s(120), 120_000, 0), s(240));
        assert_eq!(next_grid_point(s(5), 120_000, 30_000), s(30));
        assert_eq!(next_grid_point(s(30), 120_000, 30_000), s(150));
    }
}
