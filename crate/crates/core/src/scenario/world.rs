//! One simulation instance: KMS links, rotation agents, hop tunnels, PQC
//! sessions and data tunnels driven by a single scheduler.

use std::collections::{BTreeMap, BTreeSet};

use crate::e2e_pqc::{InitiatorHs, KemRegistry, PathKeys, PqcMessage, PqcSession, ResponderHs, DYNAMIC_PATH_ID};
use crate::hop_tunnel::{next_grid_point, HandshakeAttempt, Psk, Side, TimerOutcome, TunnelState};
use crate::netmodel::{
    compute_routes, forward_along, message_size, send, DeliveryOutcome, DropReason, Graph, LayerTag, LinkId, LinkSpec,
    NodeId, Packet, TrafficCounters,
};
use crate::qkd_kms::{KmsError, QkdLinkState};
use crate::rotation_agent::{FailReason, RotationState};
use crate::simcore::{ComponentId, RngStream, Scheduler, SimTime, Trace};

use super::spec::{FaultKind, FaultSpec, ScenarioError, TimerSpec, TopologySpec};
use super::summary::{ProbeStats, RunSummary};

const PROBE_BYTES: u32 = 64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Fault {
    KillQkd(LinkId),
    ReviveQkd(LinkId),
    KillNode(NodeId),
    ReviveNode(NodeId),
}

impl Fault {
    pub fn from_spec(spec: &TopologySpec, f: &FaultSpec) -> Result<Fault, ScenarioError> {
        spec.check_fault_target(f.kind, &f.target)?;
        Ok(match f.kind {
            FaultKind::KillQkd | FaultKind::ReviveQkd => {
                let q = spec.qkd_links.iter().find(|q| q.id().to_string() == f.target).expect("checked");
                if f.kind == FaultKind::KillQkd {
                    Fault::KillQkd(q.id())
                } else {
                    Fault::ReviveQkd(q.id())
                }
            }
            FaultKind::KillNode => Fault::KillNode(NodeId::new(f.target.as_str())),
            FaultKind::ReviveNode => Fault::ReviveNode(NodeId::new(f.target.as_str())),
        })
    }

    pub fn kind(&self) -> FaultKind {
        match self {
            Fault::KillQkd(_) => FaultKind::KillQkd,
            Fault::ReviveQkd(_) => FaultKind::ReviveQkd,
            Fault::KillNode(_) => FaultKind::KillNode,
            Fault::ReviveNode(_) => FaultKind::ReviveNode,
        }
    }

    fn component(&self) -> ComponentId {
        match self {
            Fault::KillQkd(l) | Fault::ReviveQkd(l) => ComponentId::new(format!("kms:{l}")),
            Fault::KillNode(n) | Fault::ReviveNode(n) => ComponentId::new(format!("node:{n}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TunnelRef {
    Hop(usize),
    Data(usize),
}

#[derive(Debug, Clone)]
enum Ev {
    ArnikaAttempt { hop: usize, periodic: bool },
    ArnikaMsg { hop: usize, wire: Vec<u8>, to_responder: bool },
    ArnikaTimeout { hop: usize, seq: u64 },
    ArnikaFailsafe { hop: usize, deadline: SimTime },
    WgAttempt { tunnel: TunnelRef, periodic: bool },
    WgMsg { tunnel: TunnelRef, seq: u64, index: u64 },
    WgTimeout { tunnel: TunnelRef, seq: u64 },
    Expiry { tunnel: TunnelRef, epoch: u64 },
    PqcAttempt { session: usize, path: usize, periodic: bool },
    PqcMsg { session: usize, path: usize, seq: u64, msg: Box<PqcMessage> },
    PqcTimeout { session: usize, path: usize, seq: u64 },
    PqcFailsafe { session: usize, path: usize, deadline: SimTime },
    ProbeTick { session: usize },
    ProbeArrive { session: usize },
    Fault(Fault),
}

/// When a component makes its attempts: retries until the first success, then
/// once per period on its own grid.
#[derive(Debug, Clone)]
struct Cadence {
    phase_ms: u64,
    retry_ms: u64,
    bootstrapped: bool,
}

impl Cadence {
    fn new(rng: &mut RngStream, timers: &TimerSpec, retry_ms: u64) -> (Cadence, u64) {
        let span = timers.boot_max_ms - timers.boot_min_ms;
        let boot = timers.boot_min_ms + if span == 0 { 0 } else { rng.draw_below(span) };
        let phase = if timers.aligned_phases { 0 } else { rng.draw_below(timers.period_ms) };
        (Cadence { phase_ms: phase, retry_ms, bootstrapped: false }, boot)
    }
}

struct WgFlight {
    seq: u64,
    attempt: HandshakeAttempt,
    path: Vec<NodeId>,
    drop: Option<DropReason>,
}

struct WgRun {
    comp: ComponentId,
    tunnel: TunnelState,
    cad: Cadence,
    layer: LayerTag,
    next_seq: u64,
    flight: Option<WgFlight>,
}

struct HopRun {
    id: LinkId,
    kms: QkdLinkState,
    kms_rng: RngStream,
    kms_tick: SimTime,
    qkd_killed: bool,
    arnika_comp: ComponentId,
    rotation: RotationState,
    arnika: Cadence,
    arnika_rng: RngStream,
    arnika_note: Option<String>,
    wg: WgRun,
}

impl HopRun {
    fn tick_kms(&mut self, now: SimTime) {
        let dt = now.saturating_sub(self.kms_tick);
        self.kms.tick_generate(dt, &mut self.kms_rng);
        self.kms_tick = now;
    }
}

struct PqcFlight {
    seq: u64,
    started_at: SimTime,
    nodes: Vec<NodeId>,
    init: InitiatorHs,
    resp: Option<ResponderHs>,
    resp_osk: Option<[u8; 32]>,
    drop: Option<DropReason>,
}

struct PathRun {
    comp: ComponentId,
    cad: Cadence,
    rng: RngStream,
    next_seq: u64,
    flight: Option<PqcFlight>,
}

struct SessionRun {
    pqc: PqcSession,
    paths: Vec<PathRun>,
    data: WgRun,
    probing: bool,
    first_delivery: Option<SimTime>,
}

/// A running simulation of one scenario under one seed.
pub struct Simulation {
    spec: TopologySpec,
    seed: u64,
    sched: Scheduler<Ev>,
    trace: Trace,
    counters: TrafficCounters,
    links: BTreeMap<LinkId, (LinkSpec, RngStream)>,
    down_nodes: BTreeSet<NodeId>,
    hops: Vec<HopRun>,
    hop_index: BTreeMap<LinkId, usize>,
    sessions: Vec<SessionRun>,
    registry: KemRegistry,
    first_kill: Option<SimTime>,
    probes: ProbeStats,
}

/// Send one packet hop by hop along `path`, accounting every link it crosses.
fn carry(
    links: &mut BTreeMap<LinkId, (LinkSpec, RngStream)>,
    down: &BTreeSet<NodeId>,
    counters: &mut TrafficCounters,
    path: &[NodeId],
    packet: Packet,
) -> DeliveryOutcome {
    forward_along(&packet, path, |p, a, b| {
        if down.contains(a) || down.contains(b) {
            return DeliveryOutcome::Dropped(DropReason::LinkDown);
        }
        match links.get_mut(&LinkId::new(a, b)) {
            Some((spec, rng)) => send(p, spec, rng, counters),
            None => DeliveryOutcome::Dropped(DropReason::LinkDown),
        }
    })
}

fn with_drop(reason: &str, drop: Option<DropReason>) -> String {
    match drop {
        Some(d) => format!("reason={reason} last_drop={}", d.as_str()),
        None => format!("reason={reason}"),
    }
}

impl Simulation {
    pub fn new(spec: &TopologySpec, seed: u64) -> Self {
        let timers = spec.timers.clone();
        let mut sched = Scheduler::new();
        let links = spec
            .classical_links
            .iter()
            .map(|l| {
                let rng = RngStream::for_component(seed, &ComponentId::new(format!("link:{}", l.id())));
                (l.id(), (l.clone(), rng))
            })
            .collect();

        let mut hops = Vec::new();
        let mut hop_index = BTreeMap::new();
        for q in &spec.qkd_links {
            let id = q.id();
            let kms_comp = ComponentId::new(format!("kms:{id}"));
            let arnika_comp = ComponentId::new(format!("arnika:{id}"));
            let wg_comp = ComponentId::new(format!("wg:{id}"));
            let mut arnika_rng = RngStream::for_component(seed, &arnika_comp);
            let (arnika, a_boot) = Cadence::new(&mut arnika_rng, &timers, timers.arnika_retry_ms);
            let mut wg_rng = RngStream::for_component(seed, &wg_comp);
            let (wg_cad, w_boot) = Cadence::new(&mut wg_rng, &timers, timers.wg_retry_ms);
            let idx = hops.len();
            sched
                .schedule(SimTime::from_millis(a_boot), arnika_comp.clone(), Ev::ArnikaAttempt { hop: idx, periodic: false })
                .expect("future");
            sched
                .schedule(
                    SimTime::from_millis(w_boot),
                    wg_comp.clone(),
                    Ev::WgAttempt { tunnel: TunnelRef::Hop(idx), periodic: false },
                )
                .expect("future");
            hops.push(HopRun {
                id: id.clone(),
                kms: QkdLinkState::from_config(q),
                kms_rng: RngStream::for_component(seed, &kms_comp),
                kms_tick: SimTime::ZERO,
                qkd_killed: false,
                arnika_comp,
                rotation: RotationState::with_timers(id.clone(), timers.period_ms, timers.failsafe_ms()),
                arnika,
                arnika_rng,
                arnika_note: None,
                wg: WgRun {
                    tunnel: TunnelState::with_timers(wg_comp.as_str(), timers.period_ms, timers.grace_ms)
                        .with_phase_offset(wg_cad.phase_ms),
                    comp: wg_comp,
                    cad: wg_cad,
                    layer: LayerTag::WgHandshake,
                    next_seq: 0,
                    flight: None,
                },
            });
            hop_index.insert(id, idx);
        }

        let mut sessions = Vec::new();
        for s in &spec.sessions {
            let sidx = sessions.len();
            let mut entries: Vec<(String, Option<Vec<NodeId>>, String, String)> = if s.paths.is_empty() {
                let rs = s.responder_suites.as_ref().map_or(&s.suites[0], |r| &r[0]);
                vec![(DYNAMIC_PATH_ID.to_owned(), None, s.suites[0].clone(), rs.clone())]
            } else {
                s.paths
                    .iter()
                    .enumerate()
                    .map(|(i, pid)| {
                        let rs = s.responder_suites.as_ref().map_or(&s.suites[i], |r| &r[i]);
                        let nodes = spec.path(pid).expect("validated").nodes.clone();
                        (pid.clone(), Some(nodes), s.suites[i].clone(), rs.clone())
                    })
                    .collect()
            };
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            let mut keys = Vec::new();
            let mut paths = Vec::new();
            for (pid, nodes, isuite, rsuite) in entries {
                let comp = ComponentId::new(format!("pqc:{}/{pid}", s.id));
                let mut rng = RngStream::for_component(seed, &comp);
                let (cad, boot) = Cadence::new(&mut rng, &timers, timers.pqc_retry_ms);
                sched
                    .schedule(
                        SimTime::from_millis(boot),
                        comp.clone(),
                        Ev::PqcAttempt { session: sidx, path: paths.len(), periodic: false },
                    )
                    .expect("future");
                keys.push(PathKeys::new(pid, nodes, &isuite, &rsuite));
                paths.push(PathRun { comp, cad, rng, next_seq: 0, flight: None });
            }
            let pqc = PqcSession::new(s.id.clone(), &s.endpoints[0], &s.endpoints[1], keys)
                .with_timers(timers.period_ms, timers.failsafe_ms());
            let data_comp = ComponentId::new(format!("data:{}", s.id));
            let mut data_rng = RngStream::for_component(seed, &data_comp);
            let (data_cad, d_boot) = Cadence::new(&mut data_rng, &timers, timers.data_retry_ms);
            sched
                .schedule(
                    SimTime::from_millis(d_boot),
                    data_comp.clone(),
                    Ev::WgAttempt { tunnel: TunnelRef::Data(sidx), periodic: false },
                )
                .expect("future");
            sessions.push(SessionRun {
                pqc,
                paths,
                data: WgRun {
                    tunnel: TunnelState::with_timers(data_comp.as_str(), timers.period_ms, timers.grace_ms)
                        .with_phase_offset(data_cad.phase_ms),
                    comp: data_comp,
                    cad: data_cad,
                    layer: LayerTag::WgDataHandshake,
                    next_seq: 0,
                    flight: None,
                },
                probing: false,
                first_delivery: None,
            });
        }

        Simulation {
            spec: spec.clone(),
            seed,
            sched,
            trace: Trace::new(),
            counters: TrafficCounters::new(),
            links,
            down_nodes: BTreeSet::new(),
            hops,
            hop_index,
            sessions,
            registry: KemRegistry::default(),
            first_kill: None,
            probes: ProbeStats::default(),
        }
    }

    /// Build a simulation and schedule the faults listed in the scenario.
    pub fn from_spec(spec: &TopologySpec, seed: u64) -> Result<Self, ScenarioError> {
        let mut sim = Simulation::new(spec, seed);
        for f in &spec.faults {
            let fault = Fault::from_spec(spec, f)?;
            sim.inject_fault(SimTime::from_millis(f.at_ms), fault)?;
        }
        Ok(sim)
    }

    pub fn with_registry(mut self, registry: KemRegistry) -> Self {
        self.registry = registry;
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn now(&self) -> SimTime {
        self.sched.now()
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn counters(&self) -> &TrafficCounters {
        &self.counters
    }

    /// Schedule a fault. Faults take effect after everything else due at the same instant.
    pub fn inject_fault(&mut self, at: SimTime, fault: Fault) -> Result<(), ScenarioError> {
        let known = match &fault {
            Fault::KillQkd(l) | Fault::ReviveQkd(l) => self.hop_index.contains_key(l),
            Fault::KillNode(n) | Fault::ReviveNode(n) => self.spec.nodes.iter().any(|x| &x.id == n),
        };
        if !known {
            let name = match &fault {
                Fault::KillQkd(l) | Fault::ReviveQkd(l) => l.to_string(),
                Fault::KillNode(n) | Fault::ReviveNode(n) => n.to_string(),
            };
            return Err(ScenarioError::UnknownTarget(name));
        }
        let comp = fault.component();
        self.sched.schedule(at, comp, Ev::Fault(fault)).map_err(|e| ScenarioError::Validation {
            field: "faults.at_ms".into(),
            message: e.to_string(),
        })?;
        Ok(())
    }

    /// Dispatch everything due up to `t`; returns the number of events handled.
    pub fn run_until(&mut self, t: SimTime) -> u64 {
        let mut n = 0;
        while let Some(ev) = self.sched.pop_until(t) {
            if matches!(ev.kind, Ev::Fault(_))
                && self.sched.any_pending_at(ev.fire_at, |k| !matches!(k, Ev::Fault(_)))
            {
                self.sched.schedule(ev.fire_at, ev.target, ev.kind).expect("same instant");
                continue;
            }
            n += 1;
            self.handle(ev.kind);
        }
        self.sched.advance_to(t);
        n
    }

    pub fn hop_established(&self, hop: &LinkId) -> Option<bool> {
        self.hop_index.get(hop).map(|&i| self.hops[i].wg.tunnel.is_established())
    }

    pub fn hop_psks(&self, hop: &LinkId) -> Option<(Option<Psk>, Option<Psk>)> {
        self.hop_index.get(hop).map(|&i| {
            let t = &self.hops[i].wg.tunnel;
            (t.psk(Side::Initiator), t.psk(Side::Responder))
        })
    }

    fn session_idx(&self, id: &str) -> Option<usize> {
        self.sessions.iter().position(|s| s.pqc.id == id)
    }

    pub fn data_tunnel(&self, session: &str) -> Option<&TunnelState> {
        self.session_idx(session).map(|i| &self.sessions[i].data.tunnel)
    }

    pub fn pqc_session(&self, session: &str) -> Option<&PqcSession> {
        self.session_idx(session).map(|i| &self.sessions[i].pqc)
    }

    pub fn first_delivery(&self, session: &str) -> Option<SimTime> {
        self.session_idx(session).and_then(|i| self.sessions[i].first_delivery)
    }

    pub fn probes(&self) -> ProbeStats {
        self.probes
    }

    pub fn node_up(&self, n: &NodeId) -> bool {
        !self.down_nodes.contains(n)
    }

    /// Current route over established hop tunnels.
    pub fn tunnel_route(&self, from: &NodeId, to: &NodeId) -> Option<Vec<NodeId>> {
        compute_routes(&self.hop_graph(), from).path_to(to).map(<[NodeId]>::to_vec)
    }

    fn hop_graph(&self) -> Graph {
        let mut g = Graph::new();
        for h in &self.hops {
            if h.wg.tunnel.is_established() && self.node_up(h.id.lo()) && self.node_up(h.id.hi()) {
                g.add_edge(h.id.lo(), h.id.hi());
            }
        }
        g
    }

    fn classical_graph(&self) -> Graph {
        let mut g = Graph::new();
        for (id, _) in self.links.values() {
            if self.node_up(&id.a) && self.node_up(&id.b) {
                g.add_edge(&id.a, &id.b);
            }
        }
        g
    }

    fn path_usable(&self, nodes: &[NodeId]) -> bool {
        nodes.iter().all(|n| self.node_up(n))
            && nodes.windows(2).all(|w| {
                self.hop_index
                    .get(&LinkId::new(&w[0], &w[1]))
                    .is_some_and(|&i| self.hops[i].wg.tunnel.is_established())
            })
    }

    fn at(&mut self, t: SimTime, comp: &ComponentId, ev: Ev) {
        self.sched.schedule(t, comp.clone(), ev).expect("never in the past");
    }

    fn after(&mut self, delay_ms: u64, comp: &ComponentId, ev: Ev) {
        self.sched.schedule_in(delay_ms, comp.clone(), ev);
    }

    fn record(&mut self, comp: &ComponentId, kind: &str, detail: impl Into<String>) {
        let now = self.now();
        self.trace.record(now, comp, kind, detail);
    }

    fn handle(&mut self, ev: Ev) {
        match ev {
            Ev::ArnikaAttempt { hop, periodic } => self.arnika_attempt(hop, periodic),
            Ev::ArnikaMsg { hop, wire, to_responder } => self.arnika_msg(hop, &wire, to_responder),
            Ev::ArnikaTimeout { hop, seq } => self.arnika_timeout(hop, seq),
            Ev::ArnikaFailsafe { hop, deadline } => self.arnika_failsafe(hop, deadline),
            Ev::WgAttempt { tunnel, periodic } => self.wg_attempt(tunnel, periodic),
            Ev::WgMsg { tunnel, seq, index } => self.wg_msg(tunnel, seq, index),
            Ev::WgTimeout { tunnel, seq } => self.wg_timeout(tunnel, seq),
            Ev::Expiry { tunnel, epoch } => self.expiry(tunnel, epoch),
            Ev::PqcAttempt { session, path, periodic } => self.pqc_attempt(session, path, periodic),
            Ev::PqcMsg { session, path, seq, msg } => self.pqc_msg(session, path, seq, *msg),
            Ev::PqcTimeout { session, path, seq } => self.pqc_timeout(session, path, seq),
            Ev::PqcFailsafe { session, path, deadline } => self.pqc_failsafe(session, path, deadline),
            Ev::ProbeTick { session } => self.probe_tick(session),
            Ev::ProbeArrive { session } => self.probe_arrive(session),
            Ev::Fault(f) => self.apply_fault(f),
        }
    }

    // ---- cadence -------------------------------------------------------

    /// Follow-up scheduling after an attempt resolved (or could not start).
    fn settle(&mut self, cad: Cadence, comp: &ComponentId, ok: bool, ev: impl Fn(bool) -> Ev) -> Cadence {
        let mut cad = cad;
        if cad.bootstrapped {
            return cad;
        }
        let now = self.now();
        if ok {
            cad.bootstrapped = true;
            let next = next_grid_point(now, self.spec.timers.period_ms, cad.phase_ms);
            self.at(next, comp, ev(true));
        } else {
            self.after(cad.retry_ms, comp, ev(false));
        }
        cad
    }

    fn reschedule_periodic(&mut self, phase_ms: u64, comp: &ComponentId, ev: Ev) {
        let next = next_grid_point(self.now(), self.spec.timers.period_ms, phase_ms);
        self.at(next, comp, ev);
    }

    fn arnika_settle(&mut self, hop: usize, ok: bool) {
        let cad = self.hops[hop].arnika.clone();
        let comp = self.hops[hop].arnika_comp.clone();
        self.hops[hop].arnika = self.settle(cad, &comp, ok, |periodic| Ev::ArnikaAttempt { hop, periodic });
    }

    fn wg_run(&self, t: TunnelRef) -> &WgRun {
        match t {
            TunnelRef::Hop(i) => &self.hops[i].wg,
            TunnelRef::Data(s) => &self.sessions[s].data,
        }
    }

    fn wg_run_mut(&mut self, t: TunnelRef) -> &mut WgRun {
        match t {
            TunnelRef::Hop(i) => &mut self.hops[i].wg,
            TunnelRef::Data(s) => &mut self.sessions[s].data,
        }
    }

    fn wg_settle(&mut self, tunnel: TunnelRef, ok: bool) {
        let cad = self.wg_run(tunnel).cad.clone();
        let comp = self.wg_run(tunnel).comp.clone();
        let cad = self.settle(cad, &comp, ok, |periodic| Ev::WgAttempt { tunnel, periodic });
        self.wg_run_mut(tunnel).cad = cad;
    }

    fn pqc_settle(&mut self, session: usize, path: usize, ok: bool) {
        let cad = self.sessions[session].paths[path].cad.clone();
        let comp = self.sessions[session].paths[path].comp.clone();
        let cad = self.settle(cad, &comp, ok, |periodic| Ev::PqcAttempt { session, path, periodic });
        self.sessions[session].paths[path].cad = cad;
    }

    // ---- rotation agent -------------------------------------------------

    fn arnika_attempt(&mut self, hop: usize, periodic: bool) {
        let now = self.now();
        let comp = self.hops[hop].arnika_comp.clone();
        if periodic {
            let phase = self.hops[hop].arnika.phase_ms;
            self.reschedule_periodic(phase, &comp, Ev::ArnikaAttempt { hop, periodic: true });
        }
        if self.hops[hop].rotation.in_progress() {
            return;
        }
        let initiator = self.hops[hop].rotation.initiator().clone();
        if !self.node_up(&initiator) {
            self.arnika_settle(hop, false);
            return;
        }
        let h = &mut self.hops[hop];
        h.tick_kms(now);
        h.arnika_note = None;
        match h.rotation.begin(now, &mut h.kms) {
            Err(reason) => {
                self.record(&comp, "rotation_fail", reason.detail());
                self.arnika_settle(hop, false);
            }
            Ok(msg) => {
                let seq = h.rotation.open_seq().expect("attempt open");
                let wire = msg.encode();
                let path = [h.id.lo().clone(), h.id.hi().clone()];
                self.arnika_send(hop, &path, wire, 0, true);
                let timeout = self.spec.timers.negotiation_timeout_ms;
                self.after(timeout, &comp, Ev::ArnikaTimeout { hop, seq });
            }
        }
    }

    fn arnika_send(&mut self, hop: usize, path: &[NodeId], wire: Vec<u8>, index: u64, to_responder: bool) {
        let size = message_size(LayerTag::ArnikaNego, index);
        let ttl = self.spec.ttl_default;
        let pkt = Packet::new(&path[0], &path[1], ttl, size, LayerTag::ArnikaNego, wire.clone());
        match carry(&mut self.links, &self.down_nodes, &mut self.counters, path, pkt) {
            DeliveryOutcome::Delivered { delay_ms } => {
                let comp = self.hops[hop].arnika_comp.clone();
                self.after(delay_ms, &comp, Ev::ArnikaMsg { hop, wire, to_responder });
            }
            DeliveryOutcome::Dropped(d) => self.hops[hop].arnika_note = Some(format!("last_drop={}", d.as_str())),
        }
    }

    fn arnika_msg(&mut self, hop: usize, wire: &[u8], to_responder: bool) {
        let now = self.now();
        if to_responder {
            let h = &mut self.hops[hop];
            h.tick_kms(now);
            match h.rotation.on_key_id(wire, &mut h.kms) {
                Ok(ack) => {
                    let path = [h.id.hi().clone(), h.id.lo().clone()];
                    self.arnika_send(hop, &path, ack.encode(), 1, false);
                }
                Err(reason) => h.arnika_note = Some(reason.detail()),
            }
            return;
        }
        let h = &mut self.hops[hop];
        if let Some(key_id) = h.rotation.on_ack(wire, &mut h.wg.tunnel) {
            let deadline = h.rotation.failsafe_deadline().expect("just succeeded");
            let comp = h.arnika_comp.clone();
            self.record(&comp, "rotation_ok", format!("key_id={key_id}"));
            self.at(deadline, &comp, Ev::ArnikaFailsafe { hop, deadline });
            self.arnika_settle(hop, true);
        }
    }

    fn arnika_timeout(&mut self, hop: usize, seq: u64) {
        if !self.hops[hop].rotation.fail(seq) {
            return;
        }
        let comp = self.hops[hop].arnika_comp.clone();
        let detail = match self.hops[hop].arnika_note.take() {
            Some(note) => format!("reason=timeout {note}"),
            None => "reason=timeout".to_owned(),
        };
        self.record(&comp, "rotation_fail", detail);
        self.arnika_settle(hop, false);
    }

    fn arnika_failsafe(&mut self, hop: usize, deadline: SimTime) {
        let now = self.now();
        let h = &mut self.hops[hop];
        if h.rotation.failsafe_deadline() != Some(deadline) {
            return;
        }
        if h.rotation.on_failsafe_deadline(now, &mut h.wg.tunnel, &mut h.arnika_rng) {
            let comp = h.arnika_comp.clone();
            let last = h.rotation.last_success_at().expect("deadline implies success");
            self.record(&comp, "random_psk_injected", format!("last_success_ms={}", last.as_millis()));
        }
    }

    // ---- WireGuard-style tunnels -----------------------------------------

    fn wg_endpoints(&self, tunnel: TunnelRef) -> (NodeId, NodeId) {
        match tunnel {
            TunnelRef::Hop(i) => (self.hops[i].id.lo().clone(), self.hops[i].id.hi().clone()),
            TunnelRef::Data(s) => (self.sessions[s].pqc.initiator().clone(), self.sessions[s].pqc.responder().clone()),
        }
    }

    fn wg_attempt(&mut self, tunnel: TunnelRef, periodic: bool) {
        let now = self.now();
        let comp = self.wg_run(tunnel).comp.clone();
        if periodic {
            let phase = self.wg_run(tunnel).cad.phase_ms;
            self.reschedule_periodic(phase, &comp, Ev::WgAttempt { tunnel, periodic: true });
        }
        if self.wg_run(tunnel).flight.is_some() {
            return;
        }
        let (init, resp) = self.wg_endpoints(tunnel);
        let path = match tunnel {
            TunnelRef::Hop(_) => Some(vec![init.clone(), resp.clone()]),
            TunnelRef::Data(_) => compute_routes(&self.classical_graph(), &init).path_to(&resp).map(<[NodeId]>::to_vec),
        };
        let run = self.wg_run(tunnel);
        let armed = run.tunnel.psk(Side::Initiator).is_some() && run.tunnel.psk(Side::Responder).is_some();
        let Some(path) = path.filter(|_| armed && self.node_up(&init)) else {
            self.wg_settle(tunnel, false);
            return;
        };
        let run = self.wg_run_mut(tunnel);
        let seq = run.next_seq;
        run.next_seq += 1;
        let attempt = run.tunnel.begin_handshake(now);
        run.flight = Some(WgFlight { seq, attempt, path, drop: None });
        self.wg_send(tunnel, seq, 0);
        let timeout = self.spec.timers.handshake_timeout_ms;
        self.after(timeout, &comp, Ev::WgTimeout { tunnel, seq });
    }

    fn wg_send(&mut self, tunnel: TunnelRef, seq: u64, index: u64) {
        let ttl = self.spec.ttl_default;
        let run = self.wg_run(tunnel);
        let layer = run.layer;
        let comp = run.comp.clone();
        let flight = run.flight.as_ref().expect("open flight");
        let mut path = flight.path.clone();
        if index % 2 == 1 {
            path.reverse();
        }
        let pkt = Packet::new(&path[0], path.last().unwrap(), ttl, message_size(layer, index), layer, Vec::new());
        match carry(&mut self.links, &self.down_nodes, &mut self.counters, &path, pkt) {
            DeliveryOutcome::Delivered { delay_ms } => self.after(delay_ms, &comp, Ev::WgMsg { tunnel, seq, index }),
            DeliveryOutcome::Dropped(d) => {
                if let Some(f) = self.wg_run_mut(tunnel).flight.as_mut() {
                    f.drop = Some(d);
                }
            }
        }
    }

    fn wg_msg(&mut self, tunnel: TunnelRef, seq: u64, index: u64) {
        if !self.wg_run(tunnel).flight.as_ref().is_some_and(|f| f.seq == seq) {
            return;
        }
        if index + 1 < crate::hop_tunnel::HANDSHAKE_PACKETS {
            self.wg_send(tunnel, seq, index + 1);
            return;
        }
        let run = self.wg_run_mut(tunnel);
        let flight = run.flight.take().expect("checked");
        let comp = run.comp.clone();
        if !flight.attempt.psk_match() {
            self.record(&comp, "rekey_fail", "reason=psk_mismatch");
            self.wg_settle(tunnel, false);
            return;
        }
        let was_up = run.tunnel.is_established();
        let epoch = run.tunnel.complete_handshake(&flight.attempt);
        let expiry = run.tunnel.expiry().expect("just succeeded");
        self.record(&comp, if was_up { "rekey_ok" } else { "tunnel_up" }, format!("epoch={epoch}"));
        self.at(expiry, &comp, Ev::Expiry { tunnel, epoch });
        self.wg_settle(tunnel, true);
        if let TunnelRef::Data(s) = tunnel {
            if !self.sessions[s].probing {
                self.sessions[s].probing = true;
                self.after(0, &comp, Ev::ProbeTick { session: s });
            }
        }
    }

    fn wg_timeout(&mut self, tunnel: TunnelRef, seq: u64) {
        let run = self.wg_run_mut(tunnel);
        if !run.flight.as_ref().is_some_and(|f| f.seq == seq) {
            return;
        }
        let flight = run.flight.take().expect("checked");
        let comp = run.comp.clone();
        self.record(&comp, "rekey_fail", with_drop("timeout", flight.drop));
        self.wg_settle(tunnel, false);
    }

    fn expiry(&mut self, tunnel: TunnelRef, epoch: u64) {
        let now = self.now();
        let run = self.wg_run_mut(tunnel);
        if run.tunnel.session_epoch() != epoch {
            return;
        }
        if run.tunnel.on_timer(now) == TimerOutcome::WentDown {
            let comp = run.comp.clone();
            let last = run.tunnel.last_session_at().expect("was up");
            self.record(&comp, "tunnel_down", format!("last_success_ms={}", last.as_millis()));
        }
    }

    // ---- PQC sessions ----------------------------------------------------

    fn pqc_fail(&mut self, session: usize, path: usize, detail: String) {
        let comp = self.sessions[session].paths[path].comp.clone();
        self.record(&comp, "pqc_fail", detail);
        self.pqc_settle(session, path, false);
    }

    fn pqc_attempt(&mut self, session: usize, path: usize, periodic: bool) {
        let now = self.now();
        let comp = self.sessions[session].paths[path].comp.clone();
        if periodic {
            let phase = self.sessions[session].paths[path].cad.phase_ms;
            self.reschedule_periodic(phase, &comp, Ev::PqcAttempt { session, path, periodic: true });
        }
        if self.sessions[session].paths[path].flight.is_some() {
            return;
        }
        let sess = &self.sessions[session];
        let init = sess.pqc.initiator().clone();
        let resp = sess.pqc.responder().clone();
        if !self.node_up(&init) {
            self.pqc_settle(session, path, false);
            return;
        }
        let keys = sess.pqc.path(path);
        let nodes = match &keys.nodes {
            Some(n) => Some(n.clone()),
            None => self.tunnel_route(&init, &resp),
        };
        let Some(nodes) = nodes else {
            self.pqc_fail(session, path, "reason=no_route".into());
            return;
        };
        if !self.path_usable(&nodes) {
            self.pqc_fail(session, path, "reason=tunnel_down".into());
            return;
        }
        let Some(kem) = self.registry.get(&keys.initiator_suite) else {
            let detail = format!("reason=unknown_suite suite={}", keys.initiator_suite);
            self.pqc_fail(session, path, detail);
            return;
        };
        let run = &mut self.sessions[session].paths[path];
        let (hs, m1) = InitiatorHs::start(kem, &mut run.rng);
        let seq = run.next_seq;
        run.next_seq += 1;
        run.flight = Some(PqcFlight { seq, started_at: now, nodes, init: hs, resp: None, resp_osk: None, drop: None });
        self.pqc_send(session, path, seq, m1);
        let timeout = self.spec.timers.handshake_timeout_ms;
        self.after(timeout, &comp, Ev::PqcTimeout { session, path, seq });
    }

    fn pqc_send(&mut self, session: usize, path: usize, seq: u64, msg: PqcMessage) {
        let ttl = self.spec.ttl_default;
        let run = &self.sessions[session].paths[path];
        let comp = run.comp.clone();
        let mut nodes = run.flight.as_ref().expect("open flight").nodes.clone();
        if !msg.from_initiator() {
            nodes.reverse();
        }
        let idx = msg.index();
        let size = message_size(LayerTag::PqcHandshake, idx);
        let pkt = Packet::new(&nodes[0], nodes.last().unwrap(), ttl, size, LayerTag::PqcHandshake, Vec::new());
        match carry(&mut self.links, &self.down_nodes, &mut self.counters, &nodes, pkt) {
            DeliveryOutcome::Delivered { delay_ms } => {
                self.after(delay_ms, &comp, Ev::PqcMsg { session, path, seq, msg: Box::new(msg) })
            }
            DeliveryOutcome::Dropped(d) => {
                if let Some(f) = self.sessions[session].paths[path].flight.as_mut() {
                    f.drop = Some(d);
                }
            }
        }
    }

    fn pqc_msg(&mut self, session: usize, path: usize, seq: u64, msg: PqcMessage) {
        let resp_suite = self.sessions[session].pqc.path(path).responder_suite.clone();
        let run = &mut self.sessions[session].paths[path];
        let Some(flight) = run.flight.as_mut().filter(|f| f.seq == seq) else {
            return;
        };
        let step = match msg.index() {
            0 => match self.registry.get(&resp_suite) {
                None => Err(format!("reason=unknown_suite suite={resp_suite}")),
                Some(kem) => ResponderHs::on_init_hello(kem, &msg, &mut run.rng)
                    .map(|(hs, reply)| {
                        flight.resp = Some(hs);
                        Some(reply)
                    })
                    .map_err(|e| format!("reason=handshake error={e}")),
            },
            1 => flight.init.on_resp_hello(&msg, &mut run.rng).map(Some).map_err(|e| format!("reason=handshake error={e}")),
            2 => match flight.resp.as_ref() {
                None => Err("reason=handshake error=out_of_order".into()),
                Some(hs) => hs
                    .on_init_conf(&msg)
                    .map(|(osk, reply)| {
                        flight.resp_osk = Some(osk);
                        Some(reply)
                    })
                    .map_err(|e| format!("reason=handshake error={e}")),
            },
            _ => match flight.init.on_empty_data(&msg) {
                Ok(osk) => {
                    let resp_osk = flight.resp_osk.expect("responder derived its key");
                    let started = flight.started_at;
                    run.flight = None;
                    self.sessions[session].pqc.complete_path(path, started, osk, resp_osk);
                    Ok(None)
                }
                Err(e) => Err(format!("reason=handshake error={e}")),
            },
        };
        match step {
            Ok(Some(reply)) => self.pqc_send(session, path, seq, reply),
            Ok(None) => self.pqc_done(session, path),
            Err(detail) => {
                self.sessions[session].paths[path].flight = None;
                self.pqc_fail(session, path, detail);
            }
        }
    }

    fn pqc_done(&mut self, session: usize, path: usize) {
        let comp = self.sessions[session].paths[path].comp.clone();
        let deadline = self.sessions[session].pqc.failsafe_deadline(path).expect("just succeeded");
        self.record(&comp, "pqc_ok", "");
        self.at(deadline, &comp, Ev::PqcFailsafe { session, path, deadline });
        self.inject_data_psk(session);
        self.pqc_settle(session, path, true);
    }

    /// Hand the combined key to both ends of the data tunnel, once every path has one.
    fn inject_data_psk(&mut self, session: usize) {
        let s = &mut self.sessions[session];
        for side in [Side::Initiator, Side::Responder] {
            let _ = s.pqc.inject_osk(side, &mut s.data.tunnel);
        }
    }

    fn pqc_timeout(&mut self, session: usize, path: usize, seq: u64) {
        let run = &mut self.sessions[session].paths[path];
        if !run.flight.as_ref().is_some_and(|f| f.seq == seq) {
            return;
        }
        let flight = run.flight.take().expect("checked");
        self.pqc_fail(session, path, with_drop("timeout", flight.drop));
    }

    fn pqc_failsafe(&mut self, session: usize, path: usize, deadline: SimTime) {
        let now = self.now();
        let s = &mut self.sessions[session];
        if s.pqc.failsafe_deadline(path) != Some(deadline) {
            return;
        }
        if s.pqc.on_failsafe_deadline(path, now, &mut s.paths[path].rng) {
            let comp = s.paths[path].comp.clone();
            let last = s.pqc.path(path).last_success_at().expect("deadline implies success");
            self.record(&comp, "pqc_random_injected", format!("last_success_ms={}", last.as_millis()));
            self.inject_data_psk(session);
        }
    }

    // ---- data probes -----------------------------------------------------

    fn probe_tick(&mut self, session: usize) {
        let comp = self.sessions[session].data.comp.clone();
        let interval = self.spec.timers.probe_interval_ms;
        self.after(interval, &comp, Ev::ProbeTick { session });
        let s = &self.sessions[session];
        if s.data.tunnel.transmit().is_err() {
            return;
        }
        let (init, resp) = (s.pqc.initiator().clone(), s.pqc.responder().clone());
        if !self.node_up(&init) {
            return;
        }
        let Some(route) = self.tunnel_route(&init, &resp) else {
            return;
        };
        self.probes.sent += 1;
        let pkt = Packet::new(&init, &resp, self.spec.ttl_default, PROBE_BYTES, LayerTag::Data, Vec::new());
        match carry(&mut self.links, &self.down_nodes, &mut self.counters, &route, pkt) {
            DeliveryOutcome::Delivered { delay_ms } => self.after(delay_ms, &comp, Ev::ProbeArrive { session }),
            DeliveryOutcome::Dropped(_) => self.probes.dropped += 1,
        }
    }

    fn probe_arrive(&mut self, session: usize) {
        self.probes.delivered += 1;
        if self.sessions[session].first_delivery.is_none() {
            let now = self.now();
            self.sessions[session].first_delivery = Some(now);
            let comp = self.sessions[session].data.comp.clone();
            self.record(&comp, "data_up", "");
        }
    }

    // ---- faults ------------------------------------------------------------

    fn refresh_qkd(&mut self, hop: usize) {
        let now = self.now();
        let up = !self.hops[hop].qkd_killed
            && self.node_up(&self.hops[hop].id.lo().clone())
            && self.node_up(&self.hops[hop].id.hi().clone());
        let h = &mut self.hops[hop];
        h.tick_kms(now);
        h.kms.set_operational(up);
    }

    fn apply_fault(&mut self, fault: Fault) {
        let now = self.now();
        let comp = fault.component();
        match &fault {
            Fault::KillQkd(l) | Fault::ReviveQkd(l) => {
                let hop = self.hop_index[l];
                self.hops[hop].qkd_killed = matches!(fault, Fault::KillQkd(_));
                self.refresh_qkd(hop);
            }
            Fault::KillNode(n) | Fault::ReviveNode(n) => {
                if matches!(fault, Fault::KillNode(_)) {
                    self.down_nodes.insert(n.clone());
                } else {
                    self.down_nodes.remove(n);
                }
                let touching: Vec<usize> =
                    self.hops.iter().enumerate().filter(|(_, h)| h.id.has_endpoint(n)).map(|(i, _)| i).collect();
                for hop in touching {
                    self.refresh_qkd(hop);
                }
            }
        }
        if matches!(fault, Fault::KillQkd(_) | Fault::KillNode(_)) && self.first_kill.is_none() {
            self.first_kill = Some(now);
        }
        self.record(&comp, fault.kind().as_str(), "");
    }

    // ---- results -------------------------------------------------------------

    pub fn summary(&self) -> RunSummary {
        let setup = self
            .sessions
            .iter()
            .map(|s| s.first_delivery)
            .collect::<Option<Vec<_>>>()
            .and_then(|v| v.into_iter().max())
            .filter(|_| !self.sessions.is_empty());
        let disruption = self.first_kill.and_then(|k| {
            self.trace
                .records()
                .iter()
                .find(|r| r.kind == "tunnel_down" && r.component.starts_with("data:") && r.t_ms >= k.as_millis())
                .map(|r| (r.t_ms - k.as_millis()) as f64 / 1000.0)
        });
        let failure = if setup.is_some() {
            None
        } else {
            Some(
                self.trace
                    .records()
                    .iter()
                    .rev()
                    .find(|r| matches!(r.kind.as_str(), "pqc_fail" | "rekey_fail" | "rotation_fail"))
                    .map_or_else(
                        || "no_attempt_completed".to_owned(),
                        |r| format!("{} {} at {} ms: {}", r.kind, r.component, r.t_ms, r.detail),
                    ),
            )
        };
        let mut events = BTreeMap::new();
        for r in self.trace.records() {
            *events.entry(r.kind.clone()).or_insert(0u64) += 1;
        }
        RunSummary {
            scenario: self.spec.name.clone(),
            seed: self.seed,
            until_s: self.now().as_secs_f64(),
            setup_time_s: setup.map(SimTime::as_secs_f64),
            disruption_time_s: disruption,
            failure,
            probes: self.probes,
            events,
            traffic: self.counters.rows(),
        }
    }
}

trait Detail {
    fn detail(&self) -> String;
}

impl Detail for FailReason {
    fn detail(&self) -> String {
        match self {
            FailReason::Kms(e) => format!(
                "reason=kms error={}",
                match e {
                    KmsError::NoKeyAvailable(_) => "no_key_available",
                    KmsError::UnknownKeyId(_) => "unknown_key_id",
                    KmsError::NotAnEndpoint { .. } => "not_an_endpoint",
                }
            ),
            FailReason::Timeout => "reason=timeout".into(),
            FailReason::Malformed(e) => format!("reason=malformed error={e}"),
        }
    }
}
