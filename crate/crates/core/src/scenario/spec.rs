//! Scenario files: TOML documents with a `schema_version` of 1.
//!
//! ```toml
//! schema_version = 1
//! name = "fig3"
//! seed = 0
//! ttl_default = 64
//! until_s = 120
//!
//! [timers]
//! aligned_phases = false
//!
//! [[nodes]]
//! id = "alice"
//! kind = "end"
//!
//! [[qkd_links]]
//! a = "alice"
//! b = "t1"
//!
//! [[classical_links]]
//! a = "alice"
//! b = "t1"
//! latency_ms = 1
//!
//! [[sessions]]
//! id = "ab"
//! endpoints = ["alice", "bob"]
//! ```
//!
//! Sessions without `paths` route dynamically over established hop tunnels.
//! `suites` gives one KEM suite per path (both endpoints use it unless
//! `responder_suites` overrides the responder side).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::e2e_pqc::{KemRegistry, DYNAMIC_PATH_ID};
use crate::netmodel::{LinkId, LinkSpec, NodeId, DEFAULT_TTL};
use crate::qkd_kms::QkdLinkConfig;
use crate::security_model::{SecurityTopology, SessionPaths};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScenarioError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("invalid `{field}`: {message}")]
    Validation { field: String, message: String },
    #[error("unknown fault target `{0}`")]
    UnknownTarget(String),
}

impl ScenarioError {
    fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        ScenarioError::Validation { field: field.into(), message: message.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    End,
    Trusted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: NodeId,
    pub kind: NodeKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathSpec {
    pub id: String,
    pub nodes: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionSpec {
    pub id: String,
    pub endpoints: [NodeId; 2],
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub paths: Vec<String>,
    #[serde(default = "default_suites")]
    pub suites: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub responder_suites: Option<Vec<String>>,
}

fn default_suites() -> Vec<String> {
    vec!["stub-v1".to_owned()]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    KillQkd,
    ReviveQkd,
    KillNode,
    ReviveNode,
}

impl FaultKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FaultKind::KillQkd => "kill_qkd",
            FaultKind::ReviveQkd => "revive_qkd",
            FaultKind::KillNode => "kill_node",
            FaultKind::ReviveNode => "revive_node",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub at_ms: u64,
    pub kind: FaultKind,
    /// A QKD link `a--b` for the qkd kinds, a node id for the node kinds.
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimerSpec {
    pub period_ms: u64,
    pub grace_ms: u64,
    /// All components rekey on the same grid (offset 0) instead of random offsets.
    pub aligned_phases: bool,
    pub boot_min_ms: u64,
    pub boot_max_ms: u64,
    pub negotiation_timeout_ms: u64,
    pub handshake_timeout_ms: u64,
    pub arnika_retry_ms: u64,
    pub wg_retry_ms: u64,
    pub pqc_retry_ms: u64,
    pub data_retry_ms: u64,
    pub probe_interval_ms: u64,
}

impl Default for TimerSpec {
    fn default() -> Self {
        TimerSpec {
            period_ms: 120_000,
            grace_ms: 60_000,
            aligned_phases: false,
            boot_min_ms: 8_000,
            boot_max_ms: 10_000,
            negotiation_timeout_ms: 10_000,
            handshake_timeout_ms: 5_000,
            arnika_retry_ms: 5_000,
            wg_retry_ms: 5_000,
            pqc_retry_ms: 1_000,
            data_retry_ms: 5_000,
            probe_interval_ms: 1_000,
        }
    }
}

impl TimerSpec {
    pub fn failsafe_ms(&self) -> u64 {
        self.period_ms + self.grace_ms
    }
}

fn default_ttl() -> u8 {
    DEFAULT_TTL
}

fn default_until() -> u64 {
    600
}

fn default_schema() -> u32 {
    SCHEMA_VERSION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologySpec {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_ttl")]
    pub ttl_default: u8,
    #[serde(default = "default_until")]
    pub until_s: u64,
    #[serde(default)]
    pub timers: TimerSpec,
    pub nodes: Vec<NodeSpec>,
    pub qkd_links: Vec<QkdLinkConfig>,
    pub classical_links: Vec<LinkSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub paths: Vec<PathSpec>,
    #[serde(default)]
    pub sessions: Vec<SessionSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub faults: Vec<FaultSpec>,
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rfind('\n').map_or(before.len(), |nl| before.len() - nl - 1) + 1;
    (line, column)
}

/// Parse and validate a scenario document.
pub fn load_scenario(text: &str) -> Result<TopologySpec, ScenarioError> {
    let spec: TopologySpec = toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
        ScenarioError::Parse { line, column, message: e.message().to_owned() }
    })?;
    spec.validate()?;
    Ok(spec)
}

pub fn serialize(spec: &TopologySpec) -> String {
    toml::to_string(spec).expect("scenario specs always serialize")
}

impl TopologySpec {
    pub fn node_kind(&self, id: &NodeId) -> Option<NodeKind> {
        self.nodes.iter().find(|n| &n.id == id).map(|n| n.kind)
    }

    pub fn trusted_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Trusted).count()
    }

    pub fn path(&self, id: &str) -> Option<&PathSpec> {
        self.paths.iter().find(|p| p.id == id)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ScenarioError::invalid(
                "schema_version",
                format!("unsupported version {} (expected {SCHEMA_VERSION})", self.schema_version),
            ));
        }
        let mut ids = BTreeSet::new();
        for n in &self.nodes {
            if n.id.as_str().is_empty() || n.id.as_str().contains("--") || n.id.as_str().contains('/') {
                return Err(ScenarioError::invalid("nodes.id", format!("`{}` is not a valid node id", n.id)));
            }
            if !ids.insert(&n.id) {
                return Err(ScenarioError::invalid("nodes.id", format!("duplicate node `{}`", n.id)));
            }
        }
        let t = &self.timers;
        if t.period_ms == 0 {
            return Err(ScenarioError::invalid("timers.period_ms", "must be positive"));
        }
        if t.boot_max_ms < t.boot_min_ms {
            return Err(ScenarioError::invalid("timers.boot_max_ms", "must not be below boot_min_ms"));
        }
        if t.probe_interval_ms == 0 || t.arnika_retry_ms == 0 || t.wg_retry_ms == 0 || t.pqc_retry_ms == 0 || t.data_retry_ms == 0 {
            return Err(ScenarioError::invalid("timers", "retry and probe intervals must be positive"));
        }

        let known = |n: &NodeId, field: &str| -> Result<(), ScenarioError> {
            if ids.contains(n) {
                Ok(())
            } else {
                Err(ScenarioError::invalid(field, format!("undeclared node `{n}`")))
            }
        };

        let mut classical = BTreeSet::new();
        for l in &self.classical_links {
            known(&l.a, "classical_links.a")?;
            known(&l.b, "classical_links.b")?;
            if l.a == l.b {
                return Err(ScenarioError::invalid("classical_links", format!("self-loop at `{}`", l.a)));
            }
            if !(0.0..=1.0).contains(&l.loss_prob) {
                return Err(ScenarioError::invalid("classical_links.loss_prob", format!("{} outside [0, 1]", l.loss_prob)));
            }
            if !classical.insert(l.id()) {
                return Err(ScenarioError::invalid("classical_links", format!("duplicate link {}", l.id())));
            }
        }

        let mut qkd = BTreeSet::new();
        for q in &self.qkd_links {
            known(&q.a, "qkd_links.a")?;
            known(&q.b, "qkd_links.b")?;
            if q.a == q.b {
                return Err(ScenarioError::invalid("qkd_links", format!("self-loop at `{}`", q.a)));
            }
            if !(q.rate >= 0.0 && q.rate.is_finite()) {
                return Err(ScenarioError::invalid("qkd_links.rate", "must be a non-negative number"));
            }
            if q.cap == 0 {
                return Err(ScenarioError::invalid("qkd_links.cap", "must be at least 1"));
            }
            if !qkd.insert(q.id()) {
                return Err(ScenarioError::invalid("qkd_links", format!("duplicate link {}", q.id())));
            }
            if !classical.contains(&q.id()) {
                return Err(ScenarioError::invalid(
                    "qkd_links",
                    format!("{} has no classical link for key-id negotiation", q.id()),
                ));
            }
        }

        let mut path_ids = BTreeSet::new();
        for p in &self.paths {
            if !path_ids.insert(p.id.as_str()) {
                return Err(ScenarioError::invalid("paths.id", format!("duplicate path `{}`", p.id)));
            }
            if p.id == DYNAMIC_PATH_ID {
                return Err(ScenarioError::invalid("paths.id", format!("`{DYNAMIC_PATH_ID}` is reserved")));
            }
            if p.nodes.len() < 2 {
                return Err(ScenarioError::invalid("paths.nodes", format!("path `{}` needs two nodes", p.id)));
            }
            let distinct: BTreeSet<_> = p.nodes.iter().collect();
            if distinct.len() != p.nodes.len() {
                return Err(ScenarioError::invalid("paths.nodes", format!("path `{}` revisits a node", p.id)));
            }
            for n in &p.nodes {
                known(n, "paths.nodes")?;
            }
            for w in p.nodes.windows(2) {
                let id = LinkId::new(&w[0], &w[1]);
                if !qkd.contains(&id) {
                    return Err(ScenarioError::invalid(
                        "paths.nodes",
                        format!("path `{}` uses {id}, which is not a declared qkd link", p.id),
                    ));
                }
            }
        }

        let registry = KemRegistry::default();
        let mut session_ids = BTreeSet::new();
        for s in &self.sessions {
            if s.id.is_empty() || s.id.contains('/') || !session_ids.insert(s.id.as_str()) {
                return Err(ScenarioError::invalid("sessions.id", format!("bad or duplicate session id `{}`", s.id)));
            }
            for e in &s.endpoints {
                known(e, "sessions.endpoints")?;
                if self.node_kind(e) != Some(NodeKind::End) {
                    return Err(ScenarioError::invalid("sessions.endpoints", format!("`{e}` is not an end node")));
                }
            }
            if s.endpoints[0] == s.endpoints[1] {
                return Err(ScenarioError::invalid("sessions.endpoints", "endpoints must differ"));
            }
            let n_paths = s.paths.len().max(1);
            if s.suites.len() != n_paths {
                return Err(ScenarioError::invalid(
                    "sessions.suites",
                    format!("session `{}` needs {n_paths} suite(s), got {}", s.id, s.suites.len()),
                ));
            }
            if let Some(rs) = &s.responder_suites {
                if rs.len() != n_paths {
                    return Err(ScenarioError::invalid("sessions.responder_suites", "one suite per path"));
                }
            }
            for suite in s.suites.iter().chain(s.responder_suites.iter().flatten()) {
                if !registry.contains(suite) {
                    return Err(ScenarioError::invalid("sessions.suites", format!("unknown KEM suite `{suite}`")));
                }
            }
            let ends: BTreeSet<&NodeId> = s.endpoints.iter().collect();
            let mut seen = BTreeSet::new();
            for pid in &s.paths {
                let p = self
                    .path(pid)
                    .ok_or_else(|| ScenarioError::invalid("sessions.paths", format!("undeclared path `{pid}`")))?;
                if !seen.insert(pid) {
                    return Err(ScenarioError::invalid("sessions.paths", format!("path `{pid}` listed twice")));
                }
                let pe: BTreeSet<&NodeId> = [p.nodes.first().unwrap(), p.nodes.last().unwrap()].into();
                if pe != ends {
                    return Err(ScenarioError::invalid(
                        "sessions.paths",
                        format!("path `{pid}` does not join the endpoints of session `{}`", s.id),
                    ));
                }
            }
        }

        for f in &self.faults {
            self.check_fault_target(f.kind, &f.target)?;
        }
        Ok(())
    }

    pub fn check_fault_target(&self, kind: FaultKind, target: &str) -> Result<(), ScenarioError> {
        let ok = match kind {
            FaultKind::KillQkd | FaultKind::ReviveQkd => self.qkd_links.iter().any(|q| q.id().to_string() == target),
            FaultKind::KillNode | FaultKind::ReviveNode => self.nodes.iter().any(|n| n.id.as_str() == target),
        };
        if ok {
            Ok(())
        } else {
            Err(ScenarioError::UnknownTarget(target.to_owned()))
        }
    }

    /// Static view for the breach checker. Dynamic sessions use the shortest
    /// route over the QKD graph.
    pub fn security_view(&self) -> (SecurityTopology, Vec<SessionPaths>) {
        let topo = SecurityTopology {
            end_nodes: self.nodes.iter().filter(|n| n.kind == NodeKind::End).map(|n| n.id.clone()).collect(),
            trusted_nodes: self.nodes.iter().filter(|n| n.kind == NodeKind::Trusted).map(|n| n.id.clone()).collect(),
            hops: self.qkd_links.iter().map(|q| q.id()).collect(),
        };
        let mut graph = crate::netmodel::Graph::new();
        for n in &self.nodes {
            graph.add_node(&n.id);
        }
        for q in &self.qkd_links {
            graph.add_edge(&q.a, &q.b);
        }
        let sessions = self
            .sessions
            .iter()
            .map(|s| {
                let mut paths = BTreeMap::new();
                if s.paths.is_empty() {
                    let rt = crate::netmodel::compute_routes(&graph, &s.endpoints[0]);
                    if let Some(p) = rt.path_to(&s.endpoints[1]) {
                        paths.insert(DYNAMIC_PATH_ID.to_owned(), p.to_vec());
                    }
                } else {
                    for pid in &s.paths {
                        paths.insert(pid.clone(), self.path(pid).expect("validated").nodes.clone());
                    }
                }
                SessionPaths { id: s.id.clone(), paths }
            })
            .collect();
        (topo, sessions)
    }
}

fn node(id: &str, kind: NodeKind) -> NodeSpec {
    NodeSpec { id: NodeId::new(id), kind }
}

fn tn_name(prefix: &str, i: usize, n: usize) -> String {
    let width = n.to_string().len().max(2);
    format!("{prefix}{i:0width$}")
}

fn base(name: &str) -> TopologySpec {
    TopologySpec {
        schema_version: SCHEMA_VERSION,
        name: name.to_owned(),
        seed: 0,
        ttl_default: DEFAULT_TTL,
        until_s: default_until(),
        timers: TimerSpec::default(),
        nodes: Vec::new(),
        qkd_links: Vec::new(),
        classical_links: Vec::new(),
        paths: Vec::new(),
        sessions: Vec::new(),
        faults: Vec::new(),
    }
}

fn link_pair(spec: &mut TopologySpec, a: &NodeId, b: &NodeId) {
    spec.qkd_links.push(QkdLinkConfig::new(a.as_str(), b.as_str()));
    spec.classical_links.push(LinkSpec::new(a.as_str(), b.as_str()).with_latency(1, 0));
}

fn chain_nodes(prefix: &str, n: usize) -> Vec<NodeId> {
    let mut v = vec![NodeId::new("alice")];
    v.extend((1..=n).map(|i| NodeId::new(tn_name(prefix, i, n))));
    v.push(NodeId::new("bob"));
    v
}

fn session(id: &str, paths: &[&str], suites: &[&str]) -> SessionSpec {
    SessionSpec {
        id: id.to_owned(),
        endpoints: [NodeId::new("alice"), NodeId::new("bob")],
        paths: paths.iter().map(|p| (*p).to_owned()).collect(),
        suites: suites.iter().map(|s| (*s).to_owned()).collect(),
        responder_suites: None,
    }
}

/// Alice, `n` trusted nodes in a line, Bob; one dynamically routed session.
pub fn chain(name: &str, n: usize) -> TopologySpec {
    let mut spec = base(name);
    let nodes = chain_nodes("t", n);
    for (i, id) in nodes.iter().enumerate() {
        let kind = if i == 0 || i == nodes.len() - 1 { NodeKind::End } else { NodeKind::Trusted };
        spec.nodes.push(NodeSpec { id: id.clone(), kind });
    }
    for w in nodes.windows(2) {
        link_pair(&mut spec, &w[0], &w[1]);
    }
    spec.sessions.push(session("ab", &[], &["stub-v1"]));
    spec
}

/// Alice - trusted node - Bob.
pub fn fig3() -> TopologySpec {
    let mut spec = base("fig3");
    spec.nodes = vec![node("alice", NodeKind::End), node("tn", NodeKind::Trusted), node("bob", NodeKind::End)];
    link_pair(&mut spec, &NodeId::new("alice"), &NodeId::new("tn"));
    link_pair(&mut spec, &NodeId::new("tn"), &NodeId::new("bob"));
    spec.sessions.push(session("ab", &[], &["stub-v1"]));
    spec.until_s = 60;
    spec
}

/// Meshed layered network with a spare route around T1, and a third end node on T2.
pub fn fig2() -> TopologySpec {
    let mut spec = base("fig2");
    for e in ["alice", "bob", "carol"] {
        spec.nodes.push(node(e, NodeKind::End));
    }
    for t in ["t1", "t2", "t3", "t4", "t5"] {
        spec.nodes.push(node(t, NodeKind::Trusted));
    }
    for (a, b) in [
        ("alice", "t1"),
        ("alice", "t4"),
        ("t1", "t2"),
        ("t1", "t5"),
        ("t4", "t5"),
        ("t2", "t3"),
        ("t5", "t3"),
        ("t3", "bob"),
        ("carol", "t2"),
    ] {
        link_pair(&mut spec, &NodeId::new(a), &NodeId::new(b));
    }
    spec.sessions.push(session("ab", &[], &["stub-v1"]));
    spec.sessions.push(SessionSpec {
        id: "ac".into(),
        endpoints: [NodeId::new("alice"), NodeId::new("carol")],
        paths: vec![],
        suites: vec!["stub-v1".into()],
        responder_suites: None,
    });
    spec
}

pub fn test1_chain5() -> TopologySpec {
    chain("test1_chain5", 4)
}

pub fn test2_chain10() -> TopologySpec {
    let mut s = chain("test2_chain10", 10);
    s.until_s = 120;
    s
}

/// 100 trusted nodes; the hop limit is raised so end-to-end packets can cross.
pub fn test2_chain100() -> TopologySpec {
    let mut s = chain("test2_chain100", 100);
    s.ttl_default = 100;
    s.until_s = 120;
    s
}

/// Two disjoint 50-node chains, one PQC instance per chain with incompatible
/// suites, keys combined into one data PSK.
pub fn test3_dualpath() -> TopologySpec {
    let mut spec = base("test3_dualpath");
    spec.ttl_default = 100;
    spec.until_s = 120;
    let north = chain_nodes("n", 50);
    let south = chain_nodes("s", 50);
    spec.nodes.push(node("alice", NodeKind::End));
    spec.nodes.push(node("bob", NodeKind::End));
    for id in north[1..51].iter().chain(&south[1..51]) {
        spec.nodes.push(NodeSpec { id: id.clone(), kind: NodeKind::Trusted });
    }
    for chain in [&north, &south] {
        for w in chain.windows(2) {
            link_pair(&mut spec, &w[0], &w[1]);
        }
    }
    spec.paths.push(PathSpec { id: "north".into(), nodes: north });
    spec.paths.push(PathSpec { id: "south".into(), nodes: south });
    spec.sessions.push(session("ab", &["north", "south"], &["stub-v1", "stub-v2"]));
    spec
}

/// Alice - T1 - T2 - Bob with an impaired middle link.
pub fn test4_degraded() -> TopologySpec {
    let mut spec = chain("test4_degraded", 2);
    spec.until_s = 300;
    for l in &mut spec.classical_links {
        if l.id() == LinkId::new(&NodeId::new("t01"), &NodeId::new("t02")) {
            *l = LinkSpec::new("t01", "t02").with_latency(300, 100).with_loss(0.01);
        }
    }
    spec
}

/// Same as [`test4_degraded`] without the impairments.
pub fn test4_baseline() -> TopologySpec {
    let mut spec = chain("test4_baseline", 2);
    spec.until_s = 300;
    spec
}

/// Ten trusted nodes; the QKD device of the first hop dies at 600 s.
pub fn test5_failsafe() -> TopologySpec {
    let mut spec = chain("test5_failsafe", 10);
    spec.until_s = 1500;
    spec.faults.push(FaultSpec { at_ms: 600_000, kind: FaultKind::KillQkd, target: "alice--t01".into() });
    spec
}

pub fn test5_failsafe_aligned() -> TopologySpec {
    let mut spec = test5_failsafe();
    spec.name = "test5_failsafe_aligned".into();
    spec.timers.aligned_phases = true;
    spec
}

/// Shipped scenario files by name.
pub fn canned(name: &str) -> Option<TopologySpec> {
    Some(match name {
        "fig2" => fig2(),
        "fig3" => fig3(),
        "test1_chain5" => test1_chain5(),
        "test2_chain10" => test2_chain10(),
        "test2_chain100" => test2_chain100(),
        "test3_dualpath" => test3_dualpath(),
        "test4_degraded" => test4_degraded(),
        "test4_baseline" => test4_baseline(),
        "test5_failsafe" => test5_failsafe(),
        "test5_failsafe_aligned" => test5_failsafe_aligned(),
        _ => return None,
    })
}

pub const CANNED: [&str; 10] = [
    "fig2",
    "fig3",
    "test1_chain5",
    "test2_chain10",
    "test2_chain100",
    "test3_dualpath",
    "test4_baseline",
    "test4_degraded",
    "test5_failsafe",
    "test5_failsafe_aligned",
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canned_specs_validate_and_round_trip() {
        for name in CANNED {
            let spec = canned(name).unwrap();
            spec.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(load_scenario(&serialize(&spec)).unwrap(), spec, "{name}");
        }
    }

    #[test]
    fn chain100_has_101_qkd_links() {
        let s = test2_chain100();
        assert_eq!(s.qkd_links.len(), 101);
        assert_eq!(s.trusted_count(), 100);
        assert_eq!(s.nodes[1].id.as_str(), "t001");
    }

    #[test]
    fn path_over_missing_link_rejected() {
        let mut s = test3_dualpath();
        s.paths[0].nodes.swap(1, 2);
        let err = s.validate().unwrap_err();
        assert!(matches!(err, ScenarioError::Validation { ref field, .. } if field == "paths.nodes"), "{err}");
    }

    #[test]
    fn qkd_link_needs_classical_link() {
        let mut s = fig3();
        s.classical_links.pop();
        assert!(matches!(s.validate(), Err(ScenarioError::Validation { .. })));
    }

    #[test]
    fn parse_error_has_position() {
        let err = load_scenario("schema_version = 1\nnodes = [\n  { id = 3 }\n]\n").unwrap_err();
        match err {
            ScenarioError::Parse { line, .. } => assert!(line >= 1),
            other => panic!("{other:?}"),
        }
        let err = load_scenario("schema_version = 1\nname = \n").unwrap_err();
        assert!(matches!(err, ScenarioError::Parse { line: 2, .. }), "{err:?}");
    }

    #[test]
    fn wrong_schema_version_rejected() {
        let mut s = fig3();
        s.schema_version = 2;
        assert!(load_scenario(&serialize(&s)).is_err());
    }

    #[test]
    fn unknown_fault_target() {
        let mut s = fig3();
        s.faults.push(FaultSpec { at_ms: 0, kind: FaultKind::KillQkd, target: "alice--bob".into() });
        assert_eq!(s.validate(), Err(ScenarioError::UnknownTarget("alice--bob".into())));
    }

    #[test]
    fn suites_per_path() {
        let mut s = test3_dualpath();
        s.sessions[0].suites.pop();
        assert!(s.validate().is_err());
        let mut s = fig3();
        s.sessions[0].suites = vec!["kyber-real".into()];
        assert!(s.validate().is_err());
    }

    #[test]
    fn security_view_of_dual_path() {
        let (topo, sessions) = test3_dualpath().security_view();
        assert_eq!(topo.trusted_nodes.len(), 100);
        assert_eq!(sessions[0].paths.len(), 2);
        let (_, fig) = fig2().security_view();
        let ab = &fig[0].paths[DYNAMIC_PATH_ID];
        assert_eq!(ab.iter().map(|n| n.as_str()).collect::<Vec<_>>(), ["alice", "t1", "t2", "t3", "bob"]);
    }
}
