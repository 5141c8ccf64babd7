//! Deterministic discrete-event engine.
//!
//! Virtual time is an integer count of milliseconds. Events are dispatched in
//! `(fire_at, seq)` order where `seq` is the insertion counter, so two events
//! due at the same instant always fire in the order they were scheduled.
//! Randomness comes from named per-component streams so that adding draws to
//! one component never shifts the draws of another.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::fmt;
use std::io::{self, Write};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Milliseconds since simulation start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimTime(u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub const fn from_millis(millis: u64) -> Self {
        SimTime(millis)
    }

    pub const fn from_secs(secs: u64) -> Self {
        SimTime(secs * 1000)
    }

    pub const fn as_millis(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1000.0
    }

    pub const fn saturating_sub(self, other: SimTime) -> u64 {
        self.0.saturating_sub(other.0)
    }

    pub const fn plus_millis(self, ms: u64) -> SimTime {
        SimTime(self.0 + ms)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:03}s", self.0 / 1000, self.0 % 1000)
    }
}

/// Name of a simulated component ("arnika:alice--t01", "wg:alice--t01", ...).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ComponentId(String);

impl ComponentId {
    pub fn new(name: impl Into<String>) -> Self {
        ComponentId(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Stable 64-bit stream id derived from the name.
    pub fn stream_id(&self) -> u64 {
        let digest = Sha256::digest(self.0.as_bytes());
        let mut word = [0u8; 8];
        word.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(word)
    }
}

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ComponentId {
    fn from(s: &str) -> Self {
        ComponentId::new(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("cannot schedule at {fire_at}, clock is already at {now}")]
    SchedulingInPast { fire_at: SimTime, now: SimTime },
}

/// A dispatched (or pending) event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event<K> {
    pub fire_at: SimTime,
    pub target: ComponentId,
    pub kind: K,
    pub seq: u64,
}

/// Cancellation token returned by [`Scheduler::schedule`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EventHandle(u64);

impl EventHandle {
    pub fn seq(self) -> u64 {
        self.0
    }
}

struct Queued<K>(Event<K>);

impl<K> PartialEq for Queued<K> {
    fn eq(&self, other: &Self) -> bool {
        self.0.fire_at == other.0.fire_at && self.0.seq == other.0.seq
    }
}

impl<K> Eq for Queued<K> {}

impl<K> PartialOrd for Queued<K> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<K> Ord for Queued<K> {
    // BinaryHeap is a max-heap; invert so the earliest (fire_at, seq) is on top.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.0.fire_at, other.0.seq).cmp(&(self.0.fire_at, self.0.seq))
    }
}

/// Virtual clock plus pending-event queue.
pub struct Scheduler<K> {
    now: SimTime,
    next_seq: u64,
    queue: BinaryHeap<Queued<K>>,
    cancelled: HashSet<u64>,
    dispatched: u64,
}

impl<K> Default for Scheduler<K> {
    fn default() -> Self {
        Self::new()
    }
}

impl<K> Scheduler<K> {
    pub fn new() -> Self {
        Scheduler {
            now: SimTime::ZERO,
            next_seq: 0,
            queue: BinaryHeap::new(),
            cancelled: HashSet::new(),
            dispatched: 0,
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    /// Total events dispatched over the scheduler's lifetime.
    pub fn dispatched(&self) -> u64 {
        self.dispatched
    }

    pub fn pending(&self) -> usize {
        self.queue.len() - self.cancelled.len()
    }

    pub fn schedule(
        &mut self,
        fire_at: SimTime,
        target: ComponentId,
        kind: K,
    ) -> Result<EventHandle, SimError> {
        if fire_at < self.now {
            return Err(SimError::SchedulingInPast { fire_at, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Queued(Event { fire_at, target, kind, seq }));
        Ok(EventHandle(seq))
    }

    /// Schedule `delay_ms` after the current instant. Never fails.
    pub fn schedule_in(&mut self, delay_ms: u64, target: ComponentId, kind: K) -> EventHandle {
        let at = self.now.plus_millis(delay_ms);
        self.schedule(at, target, kind)
            .expect("relative schedule is never in the past")
    }

    /// Cancel a pending event. Cancelling a fired or already cancelled event is a no-op.
    pub fn cancel(&mut self, handle: EventHandle) {
        if handle.0 < self.next_seq && self.queue.iter().any(|q| q.0.seq == handle.0) {
            self.cancelled.insert(handle.0);
        }
    }

    fn purge_cancelled_top(&mut self) {
        while let Some(top) = self.queue.peek() {
            if self.cancelled.remove(&top.0.seq) {
                self.queue.pop();
            } else {
                break;
            }
        }
    }

    /// Earliest live event, if any.
    pub fn peek(&mut self) -> Option<&Event<K>> {
        self.purge_cancelled_top();
        self.queue.peek().map(|q| &q.0)
    }

    /// True if a live event due exactly at `t` satisfies `pred`.
    pub fn any_pending_at(&self, t: SimTime, mut pred: impl FnMut(&K) -> bool) -> bool {
        self.queue
            .iter()
            .any(|q| q.0.fire_at == t && !self.cancelled.contains(&q.0.seq) && pred(&q.0.kind))
    }

    /// Pop the next live event due at or before `limit`, advancing the clock to it.
    pub fn pop_until(&mut self, limit: SimTime) -> Option<Event<K>> {
        self.purge_cancelled_top();
        let due = matches!(self.queue.peek(), Some(q) if q.0.fire_at <= limit);
        if !due {
            return None;
        }
        let Queued(ev) = self.queue.pop()?;
        debug_assert!(ev.fire_at >= self.now);
        self.now = ev.fire_at;
        self.dispatched += 1;
        Some(ev)
    }

    /// Move the clock forward to `t` without dispatching (used after draining).
    pub fn advance_to(&mut self, t: SimTime) {
        if t > self.now {
            self.now = t;
        }
    }

    /// Dispatch every event due at or before `t` through `handler`, then set the clock to `t`.
    ///
    /// The handler may schedule further events; those due before `t` are dispatched
    /// in the same call. Returns the number of events dispatched.
    pub fn run_until<F>(&mut self, t: SimTime, mut handler: F) -> u64
    where
        F: FnMut(&mut Scheduler<K>, Event<K>),
    {
        let mut count = 0;
        while let Some(ev) = self.pop_until(t) {
            count += 1;
            handler(self, ev);
        }
        self.advance_to(t);
        count
    }
}

/// Reproducible random stream identified by `(seed, stream_id)`.
#[derive(Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    draws: u64,
    rng: ChaCha8Rng,
}

impl fmt::Debug for RngStream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RngStream")
            .field("seed", &self.seed)
            .field("stream_id", &self.stream_id)
            .field("draws", &self.draws)
            .finish()
    }
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        RngStream { seed, stream_id, draws: 0, rng }
    }

    pub fn for_component(seed: u64, component: &ComponentId) -> Self {
        Self::new(seed, component.stream_id())
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Uniform draw in `[lo, hi)`; returns `lo` when `lo == hi`.
    pub fn draw_uniform(&mut self, lo: f64, hi: f64) -> f64 {
        assert!(lo <= hi, "draw_uniform requires lo <= hi");
        self.draws += 1;
        let u: f64 = self.rng.random();
        if lo == hi {
            return lo;
        }
        let v = lo + (hi - lo) * u;
        if v >= hi {
            lo
        } else {
            v
        }
    }

    /// Uniform integer in `[lo, hi]` (inclusive).
    pub fn draw_range_inclusive(&mut self, lo: i64, hi: i64) -> i64 {
        self.draws += 1;
        self.rng.random_range(lo..=hi)
    }

    /// Uniform integer in `[0, bound)`; `0` when `bound == 0`.
    pub fn draw_below(&mut self, bound: u64) -> u64 {
        self.draws += 1;
        if bound == 0 {
            0
        } else {
            self.rng.random_range(0..bound)
        }
    }

    /// Bernoulli trial.
    pub fn chance(&mut self, p: f64) -> bool {
        if p <= 0.0 {
            self.draws += 1;
            let _: f64 = self.rng.random();
            return false;
        }
        self.draw_uniform(0.0, 1.0) < p
    }

    pub fn fill(&mut self, buf: &mut [u8]) {
        self.draws += 1;
        self.rng.fill_bytes(buf);
    }

    pub fn bytes32(&mut self) -> [u8; 32] {
        let mut out = [0u8; 32];
        self.fill(&mut out);
        out
    }

    pub fn as_rng(&mut self) -> &mut ChaCha8Rng {
        self.draws += 1;
        &mut self.rng
    }
}

/// One line of the exported event trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t_ms: u64,
    pub component: String,
    pub kind: String,
    pub detail: String,
}

/// Append-only event trace, exported as one JSON object per line.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    records: Vec<TraceRecord>,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, t: SimTime, component: &ComponentId, kind: &str, detail: impl Into<String>) {
        self.records.push(TraceRecord {
            t_ms: t.as_millis(),
            component: component.as_str().to_owned(),
            kind: kind.to_owned(),
            detail: detail.into(),
        });
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn of_kind<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = &'a TraceRecord> + 'a {
        self.records.iter().filter(move |r| r.kind == kind)
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Trace { records })
    }
}
