//! Classical links, TTL-limited forwarding, hop-count routing and traffic accounting.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::simcore::RngStream;

/// Default IP TTL when a scenario does not override it.
pub const DEFAULT_TTL: u8 = 64;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Self {
        NodeId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        NodeId::new(s)
    }
}

/// Undirected link key, endpoints stored in ascending order.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LinkId {
    lo: NodeId,
    hi: NodeId,
}

impl LinkId {
    pub fn new(a: &NodeId, b: &NodeId) -> Self {
        if a <= b {
            LinkId { lo: a.clone(), hi: b.clone() }
        } else {
            LinkId { lo: b.clone(), hi: a.clone() }
        }
    }

    pub fn lo(&self) -> &NodeId {
        &self.lo
    }

    pub fn hi(&self) -> &NodeId {
        &self.hi
    }

    pub fn has_endpoint(&self, n: &NodeId) -> bool {
        &self.lo == n || &self.hi == n
    }

    pub fn other(&self, n: &NodeId) -> Option<&NodeId> {
        if &self.lo == n {
            Some(&self.hi)
        } else if &self.hi == n {
            Some(&self.lo)
        } else {
            None
        }
    }
}

impl fmt::Display for LinkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}--{}", self.lo, self.hi)
    }
}

impl Serialize for LinkId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LinkId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let (a, b) = s
            .split_once("--")
            .ok_or_else(|| serde::de::Error::custom(format!("link id `{s}` is not of the form a--b")))?;
        Ok(LinkId::new(&NodeId::new(a), &NodeId::new(b)))
    }
}

/// Classical link with impairments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub a: NodeId,
    pub b: NodeId,
    #[serde(default)]
    pub latency_ms: u64,
    #[serde(default)]
    pub jitter_ms: u64,
    #[serde(default)]
    pub loss_prob: f64,
}

impl LinkSpec {
    pub fn new(a: impl Into<String>, b: impl Into<String>) -> Self {
        LinkSpec {
            a: NodeId::new(a),
            b: NodeId::new(b),
            latency_ms: 0,
            jitter_ms: 0,
            loss_prob: 0.0,
        }
    }

    pub fn with_latency(mut self, latency_ms: u64, jitter_ms: u64) -> Self {
        self.latency_ms = latency_ms;
        self.jitter_ms = jitter_ms;
        self
    }

    pub fn with_loss(mut self, loss_prob: f64) -> Self {
        self.loss_prob = loss_prob;
        self
    }

    pub fn id(&self) -> LinkId {
        LinkId::new(&self.a, &self.b)
    }

    /// One-way delay, uniform in `[latency - jitter, latency + jitter]`, clamped at zero.
    pub fn sample_delay(&self, rng: &mut RngStream) -> u64 {
        if self.jitter_ms == 0 {
            return self.latency_ms;
        }
        let j = self.jitter_ms as i64;
        let d = self.latency_ms as i64 + rng.draw_range_inclusive(-j, j);
        d.max(0) as u64
    }

    pub fn sample_loss(&self, rng: &mut RngStream) -> bool {
        if self.loss_prob <= 0.0 {
            return false;
        }
        rng.chance(self.loss_prob)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerTag {
    WgHandshake,
    ArnikaNego,
    PqcHandshake,
    Data,
    WgDataHandshake,
}

impl LayerTag {
    pub const ALL: [LayerTag; 5] = [
        LayerTag::WgHandshake,
        LayerTag::ArnikaNego,
        LayerTag::PqcHandshake,
        LayerTag::Data,
        LayerTag::WgDataHandshake,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LayerTag::WgHandshake => "wg_handshake",
            LayerTag::ArnikaNego => "arnika_nego",
            LayerTag::PqcHandshake => "pqc_handshake",
            LayerTag::Data => "data",
            LayerTag::WgDataHandshake => "wg_data_handshake",
        }
    }
}

/// Packets and bytes of one complete exchange of a given layer (Table 1 of the testbed
/// measurements). `None` for plain data packets.
pub fn handshake_cost(tag: LayerTag) -> Option<(u64, u64)> {
    match tag {
        LayerTag::WgHandshake | LayerTag::WgDataHandshake => Some((3, 398)),
        LayerTag::ArnikaNego => Some((2, 78)),
        LayerTag::PqcHandshake => Some((4, 4772)),
        LayerTag::Data => None,
    }
}

/// Size of message `index` (0-based) of a handshake: total split evenly,
/// remainder carried by the last message.
pub fn message_size(tag: LayerTag, index: u64) -> u32 {
    let (packets, bytes) = handshake_cost(tag).expect("data packets have no fixed size");
    assert!(index < packets, "message index out of range");
    let base = bytes / packets;
    let size = if index + 1 == packets { bytes - base * (packets - 1) } else { base };
    size as u32
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub src: NodeId,
    pub dst: NodeId,
    pub ttl: u8,
    pub size_bytes: u32,
    pub layer_tag: LayerTag,
    pub payload: Vec<u8>,
}

impl Packet {
    pub fn new(src: &NodeId, dst: &NodeId, ttl: u8, size_bytes: u32, layer_tag: LayerTag, payload: Vec<u8>) -> Self {
        assert!(size_bytes > 0, "packets carry at least one byte");
        Packet {
            src: src.clone(),
            dst: dst.clone(),
            ttl,
            size_bytes,
            layer_tag,
            payload,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropReason {
    Loss,
    TtlExceeded,
    /// The link or one of its endpoints is out of service.
    LinkDown,
}

impl DropReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DropReason::Loss => "loss",
            DropReason::TtlExceeded => "ttl_exceeded",
            DropReason::LinkDown => "link_down",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeliveryOutcome {
    /// Arrives `delay_ms` after the send instant.
    Delivered { delay_ms: u64 },
    Dropped(DropReason),
}

impl DeliveryOutcome {
    pub fn is_delivered(self) -> bool {
        matches!(self, DeliveryOutcome::Delivered { .. })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counter {
    pub packets: u64,
    pub bytes: u64,
}

/// Per (link, layer) packet and byte totals.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrafficCounters {
    inner: BTreeMap<(LinkId, LayerTag), Counter>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterRow {
    pub link: LinkId,
    pub layer: LayerTag,
    pub packets: u64,
    pub bytes: u64,
}

impl TrafficCounters {
    pub fn new() -> Self {
        Self::default()
    }

    /// Count `packet` as sent on `link`.
    pub fn account(&mut self, packet: &Packet, link: &LinkId) {
        let c = self.inner.entry((link.clone(), packet.layer_tag)).or_default();
        c.packets += 1;
        c.bytes += u64::from(packet.size_bytes);
    }

    pub fn get(&self, link: &LinkId, layer: LayerTag) -> Counter {
        self.inner.get(&(link.clone(), layer)).copied().unwrap_or_default()
    }

    pub fn links(&self) -> BTreeSet<LinkId> {
        self.inner.keys().map(|(l, _)| l.clone()).collect()
    }

    pub fn rows(&self) -> Vec<CounterRow> {
        self.inner
            .iter()
            .map(|((link, layer), c)| CounterRow {
                link: link.clone(),
                layer: *layer,
                packets: c.packets,
                bytes: c.bytes,
            })
            .collect()
    }

    pub fn total(&self, layer: LayerTag) -> Counter {
        self.inner
            .iter()
            .filter(|((_, l), _)| *l == layer)
            .fold(Counter::default(), |acc, (_, c)| Counter {
                packets: acc.packets + c.packets,
                bytes: acc.bytes + c.bytes,
            })
    }
}

/// Send `packet` across a single link: counts it, then samples loss and delay.
pub fn send(packet: &Packet, link: &LinkSpec, rng: &mut RngStream, counters: &mut TrafficCounters) -> DeliveryOutcome {
    counters.account(packet, &link.id());
    if link.sample_loss(rng) {
        return DeliveryOutcome::Dropped(DropReason::Loss);
    }
    DeliveryOutcome::Delivered { delay_ms: link.sample_delay(rng) }
}

/// TTL handling at a forwarding node: a packet arriving with ttl 0 is dropped,
/// anything else is decremented once and passed on.
pub fn forward_ttl(ttl: u8) -> Option<u8> {
    ttl.checked_sub(1)
}

/// Forward `packet` along `path` (first element is the sender, last the receiver).
///
/// Every intermediate node decrements the TTL before handing the packet to
/// `hop(packet, from, to)`, which performs the single-link [`send`].
pub fn forward_along<H>(packet: &Packet, path: &[NodeId], mut hop: H) -> DeliveryOutcome
where
    H: FnMut(&Packet, &NodeId, &NodeId) -> DeliveryOutcome,
{
    assert!(path.len() >= 2, "a path needs at least two nodes");
    let mut pkt = packet.clone();
    let mut total = 0u64;
    for (i, pair) in path.windows(2).enumerate() {
        if i > 0 {
            match forward_ttl(pkt.ttl) {
                Some(t) => pkt.ttl = t,
                None => return DeliveryOutcome::Dropped(DropReason::TtlExceeded),
            }
        }
        match hop(&pkt, &pair[0], &pair[1]) {
            DeliveryOutcome::Delivered { delay_ms } => total += delay_ms,
            dropped => return dropped,
        }
    }
    DeliveryOutcome::Delivered { delay_ms: total }
}

/// Undirected graph of usable links.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Graph {
    adj: BTreeMap<NodeId, BTreeSet<NodeId>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, n: &NodeId) {
        self.adj.entry(n.clone()).or_default();
    }

    pub fn add_edge(&mut self, a: &NodeId, b: &NodeId) {
        self.adj.entry(a.clone()).or_default().insert(b.clone());
        self.adj.entry(b.clone()).or_default().insert(a.clone());
    }

    pub fn neighbours(&self, n: &NodeId) -> impl Iterator<Item = &NodeId> {
        self.adj.get(n).into_iter().flatten()
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeId> {
        self.adj.keys()
    }

    pub fn has_edge(&self, a: &NodeId, b: &NodeId) -> bool {
        self.adj.get(a).is_some_and(|s| s.contains(b))
    }
}

/// Shortest (fewest-hop) paths from one source; ties go to the lexicographically
/// smallest node-id sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RouteTable {
    source: NodeId,
    paths: BTreeMap<NodeId, Vec<NodeId>>,
}

impl RouteTable {
    pub fn source(&self) -> &NodeId {
        &self.source
    }

    pub fn path_to(&self, dst: &NodeId) -> Option<&[NodeId]> {
        self.paths.get(dst).map(Vec::as_slice)
    }

    pub fn next_hop(&self, dst: &NodeId) -> Option<&NodeId> {
        self.paths.get(dst).and_then(|p| p.get(1))
    }

    pub fn destinations(&self) -> impl Iterator<Item = &NodeId> {
        self.paths.keys().filter(move |d| *d != &self.source)
    }
}

/// BFS with neighbours visited in ascending id order. Because the queue at each depth
/// is ordered by the lexicographic order of the discovered paths, first discovery
/// yields the lexicographically smallest shortest path.
pub fn compute_routes(graph: &Graph, source: &NodeId) -> RouteTable {
    let mut paths: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    if graph.adj.contains_key(source) {
        paths.insert(source.clone(), vec![source.clone()]);
        let mut queue = VecDeque::from([source.clone()]);
        while let Some(u) = queue.pop_front() {
            let base = paths[&u].clone();
            for v in graph.neighbours(&u) {
                if !paths.contains_key(v) {
                    let mut p = base.clone();
                    p.push(v.clone());
                    paths.insert(v.clone(), p);
                    queue.push_back(v.clone());
                }
            }
        }
    }
    RouteTable { source: source.clone(), paths }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simcore::{ComponentId, RngStream};

    fn n(s: &str) -> NodeId {
        NodeId::new(s)
    }

    fn rng(name: &str) -> RngStream {
        RngStream::for_component(99, &ComponentId::new(name))
    }

    fn pkt(tag: LayerTag, size: u32) -> Packet {
        Packet::new(&n("a"), &n("b"), 64, size, tag, Vec::new())
    }

    #[test]
    fn fixed_latency_delivery() {
        let link = LinkSpec::new("a", "b").with_latency(300, 0);
        let mut c = TrafficCounters::new();
        let out = send(&pkt(LayerTag::Data, 100), &link, &mut rng("l"), &mut c);
        assert_eq!(out, DeliveryOutcome::Delivered { delay_ms: 300 });
        assert_eq!(c.get(&link.id(), LayerTag::Data), Counter { packets: 1, bytes: 100 });
    }

    #[test]
    fn jitter_stays_in_band_and_clamps() {
        let link = LinkSpec::new("a", "b").with_latency(300, 100);
        let mut r = rng("j");
        for _ in 0..2000 {
            let d = link.sample_delay(&mut r);
            assert!((200..=400).contains(&d));
        }
        let tight = LinkSpec::new("a", "b").with_latency(5, 50);
        for _ in 0..2000 {
            assert!(tight.sample_delay(&mut r) <= 55);
        }
    }

    #[test]
    fn ttl_zero_at_forwarder_is_dropped() {
        assert_eq!(forward_ttl(0), None);
        assert_eq!(forward_ttl(1), Some(0));
        assert_eq!(forward_ttl(2), Some(1));
        let (nodes, links) = chain(1);
        let mut c = TrafficCounters::new();
        let mut r = rng("t");
        let p = Packet::new(&nodes[0], &nodes[2], 0, 10, LayerTag::Data, vec![]);
        let out = forward_along(&p, &nodes, |pkt, a, b| send(pkt, &links[&LinkId::new(a, b)], &mut r, &mut c));
        assert_eq!(out, DeliveryOutcome::Dropped(DropReason::TtlExceeded));
        // reached the forwarder on the first link, never forwarded
        assert_eq!(c.total(LayerTag::Data).packets, 1);
    }

    #[test]
    fn binomial_loss_rate() {
        // 10^5 Bernoulli(0.01) trials: mean 1000, sigma = sqrt(n p (1-p)) ~ 31.46
        let link = LinkSpec::new("a", "b").with_loss(0.01);
        let mut r = rng("loss");
        let mut c = TrafficCounters::new();
        let p = pkt(LayerTag::Data, 1);
        let drops = (0..100_000)
            .filter(|_| !send(&p, &link, &mut r, &mut c).is_delivered())
            .count() as f64;
        let sigma = (100_000.0f64 * 0.01 * 0.99).sqrt();
        assert!((drops - 1000.0).abs() <= 3.0 * sigma, "drops {drops}");
        assert_eq!(c.total(LayerTag::Data).packets, 100_000);
    }

    #[test]
    fn table_one_message_sizes_sum_to_totals() {
        for tag in [LayerTag::WgHandshake, LayerTag::ArnikaNego, LayerTag::PqcHandshake, LayerTag::WgDataHandshake] {
            let (packets, bytes) = handshake_cost(tag).unwrap();
            let sum: u64 = (0..packets).map(|i| u64::from(message_size(tag, i))).sum();
            assert_eq!(sum, bytes, "{tag:?}");
        }
        assert_eq!(message_size(LayerTag::PqcHandshake, 3), 1193);
        assert_eq!(message_size(LayerTag::WgHandshake, 2), 134);
        assert_eq!(message_size(LayerTag::ArnikaNego, 0), 39);
    }

    #[test]
    fn account_adds_table_one_constants() {
        let link = LinkId::new(&n("a"), &n("b"));
        let mut c = TrafficCounters::new();
        for tag in [LayerTag::WgHandshake, LayerTag::ArnikaNego, LayerTag::PqcHandshake] {
            let (packets, _) = handshake_cost(tag).unwrap();
            for i in 0..packets {
                c.account(&pkt(tag, message_size(tag, i)), &link);
            }
        }
        assert_eq!(c.get(&link, LayerTag::WgHandshake), Counter { packets: 3, bytes: 398 });
        assert_eq!(c.get(&link, LayerTag::ArnikaNego), Counter { packets: 2, bytes: 78 });
        assert_eq!(c.get(&link, LayerTag::PqcHandshake), Counter { packets: 4, bytes: 4772 });
    }

    fn chain(k: usize) -> (Vec<NodeId>, BTreeMap<LinkId, LinkSpec>) {
        let nodes: Vec<NodeId> = (0..=k + 1).map(|i| n(&format!("n{i:03}"))).collect();
        let links = nodes
            .windows(2)
            .map(|w| {
                let l = LinkSpec::new(w[0].as_str(), w[1].as_str()).with_latency(1, 0);
                (l.id(), l)
            })
            .collect();
        (nodes, links)
    }

    fn deliver_chain(k: usize, ttl: u8) -> DeliveryOutcome {
        let (nodes, links) = chain(k);
        let mut r = rng("chain");
        let mut c = TrafficCounters::new();
        let p = Packet::new(&nodes[0], nodes.last().unwrap(), ttl, 10, LayerTag::PqcHandshake, vec![]);
        forward_along(&p, &nodes, |pkt, a, b| send(pkt, &links[&LinkId::new(a, b)], &mut r, &mut c))
    }

    #[test]
    fn default_ttl_cannot_cross_one_hundred_forwarders() {
        assert!(!deliver_chain(100, DEFAULT_TTL).is_delivered());
        assert_eq!(deliver_chain(100, 99), DeliveryOutcome::Dropped(DropReason::TtlExceeded));
        assert_eq!(deliver_chain(100, 100), DeliveryOutcome::Delivered { delay_ms: 101 });
        assert!(deliver_chain(10, DEFAULT_TTL).is_delivered());
    }

    #[test]
    fn single_link_route() {
        let mut g = Graph::new();
        g.add_edge(&n("A"), &n("B"));
        let rt = compute_routes(&g, &n("A"));
        assert_eq!(rt.next_hop(&n("B")), Some(&n("B")));
        assert_eq!(rt.destinations().count(), 1);
    }

    #[test]
    fn unreachable_destinations_absent() {
        let mut g = Graph::new();
        g.add_edge(&n("A"), &n("B"));
        g.add_node(&n("C"));
        let rt = compute_routes(&g, &n("A"));
        assert!(rt.path_to(&n("C")).is_none());
    }
}
