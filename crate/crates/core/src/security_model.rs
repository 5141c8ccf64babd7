//! Symbolic confidentiality checker for the three-layer key hierarchy.
//!
//! A hop is readable when the adversary can both break the classical tunnel
//! exchange and recover the QKD PSK, or when it holds one of the hop's endpoints.
//! A path's PQC key falls when the adversary breaks PQC and sees the handshake
//! somewhere on the path. The data tunnel falls when the classical exchange
//! breaks and every path key is known.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netmodel::{LinkId, NodeId};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SecurityError {
    #[error("hop {0} is not part of the topology")]
    UnknownHop(LinkId),
    #[error("path `{0}` is not usable: {1}")]
    UnknownPath(String, String),
    #[error("node `{0}` is not part of the topology")]
    UnknownNode(NodeId),
    #[error("end node `{0}` cannot be compromised in this model")]
    EndNodeCompromised(NodeId),
}

/// Nodes and QKD hops as seen by the checker.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecurityTopology {
    pub end_nodes: BTreeSet<NodeId>,
    pub trusted_nodes: BTreeSet<NodeId>,
    pub hops: BTreeSet<LinkId>,
}

impl SecurityTopology {
    fn knows(&self, n: &NodeId) -> bool {
        self.end_nodes.contains(n) || self.trusted_nodes.contains(n)
    }
}

/// A session's endpoints and its node chains keyed by path id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionPaths {
    pub id: String,
    pub paths: BTreeMap<String, Vec<NodeId>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AdversaryCapabilities {
    #[serde(default)]
    pub breaks_classical: bool,
    #[serde(default)]
    pub breaks_pqc: bool,
    #[serde(default)]
    pub breaks_qkd: bool,
    #[serde(default)]
    pub compromised_nodes: BTreeSet<NodeId>,
}

impl AdversaryCapabilities {
    pub fn flags(c: bool, p: bool, q: bool) -> Self {
        AdversaryCapabilities { breaks_classical: c, breaks_pqc: p, breaks_qkd: q, compromised_nodes: BTreeSet::new() }
    }

    pub fn with_nodes<I: IntoIterator<Item = NodeId>>(mut self, nodes: I) -> Self {
        self.compromised_nodes = nodes.into_iter().collect();
        self
    }

    /// Componentwise order: every flag and node of `self` is also in `other`.
    pub fn is_subset_of(&self, other: &Self) -> bool {
        (!self.breaks_classical || other.breaks_classical)
            && (!self.breaks_pqc || other.breaks_pqc)
            && (!self.breaks_qkd || other.breaks_qkd)
            && self.compromised_nodes.is_subset(&other.compromised_nodes)
    }

    pub fn validate(&self, topo: &SecurityTopology) -> Result<(), SecurityError> {
        for n in &self.compromised_nodes {
            if topo.end_nodes.contains(n) {
                return Err(SecurityError::EndNodeCompromised(n.clone()));
            }
            if !topo.trusted_nodes.contains(n) {
                return Err(SecurityError::UnknownNode(n.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfidentialityVerdict {
    pub hop_readable: BTreeMap<String, bool>,
    pub pqc_key_compromised: BTreeMap<String, bool>,
    pub data_compromised: bool,
    pub witness: Vec<String>,
}

pub fn hop_readable(topo: &SecurityTopology, hop: &LinkId, caps: &AdversaryCapabilities) -> Result<bool, SecurityError> {
    if !topo.hops.contains(hop) {
        return Err(SecurityError::UnknownHop(hop.clone()));
    }
    Ok(hop_readable_unchecked(hop, caps))
}

fn hop_readable_unchecked(hop: &LinkId, caps: &AdversaryCapabilities) -> bool {
    (caps.breaks_classical && caps.breaks_qkd)
        || caps.compromised_nodes.contains(hop.lo())
        || caps.compromised_nodes.contains(hop.hi())
}

fn path_hops(topo: &SecurityTopology, path_id: &str, nodes: &[NodeId]) -> Result<Vec<LinkId>, SecurityError> {
    if nodes.len() < 2 {
        return Err(SecurityError::UnknownPath(path_id.to_owned(), "fewer than two nodes".into()));
    }
    if let Some(n) = nodes.iter().find(|n| !topo.knows(n)) {
        return Err(SecurityError::UnknownPath(path_id.to_owned(), format!("unknown node {n}")));
    }
    nodes
        .windows(2)
        .map(|w| {
            let id = LinkId::new(&w[0], &w[1]);
            if topo.hops.contains(&id) {
                Ok(id)
            } else {
                Err(SecurityError::UnknownPath(path_id.to_owned(), format!("no hop {id}")))
            }
        })
        .collect()
}

pub fn pqc_key_compromised(
    topo: &SecurityTopology,
    path_id: &str,
    nodes: &[NodeId],
    caps: &AdversaryCapabilities,
) -> Result<bool, SecurityError> {
    let hops = path_hops(topo, path_id, nodes)?;
    Ok(path_verdict(&hops, nodes, caps).is_some())
}

/// Why a path's key falls, if it does.
fn path_verdict(hops: &[LinkId], nodes: &[NodeId], caps: &AdversaryCapabilities) -> Option<String> {
    if !caps.breaks_pqc {
        return None;
    }
    let inner = &nodes[1..nodes.len() - 1];
    if let Some(n) = inner.iter().find(|n| caps.compromised_nodes.contains(*n)) {
        return Some(format!("handshake plaintext seen at {n}"));
    }
    hops.iter()
        .find(|h| hop_readable_unchecked(h, caps))
        .map(|h| format!("handshake read on hop {h}"))
}

pub fn data_compromised(
    topo: &SecurityTopology,
    session: &SessionPaths,
    caps: &AdversaryCapabilities,
) -> Result<ConfidentialityVerdict, SecurityError> {
    caps.validate(topo)?;
    if session.paths.is_empty() {
        return Err(SecurityError::UnknownPath(session.id.clone(), "session has no paths".into()));
    }
    let mut hop_readable = BTreeMap::new();
    let mut pqc = BTreeMap::new();
    let mut witness = Vec::new();
    for (pid, nodes) in &session.paths {
        let hops = path_hops(topo, pid, nodes)?;
        for h in &hops {
            hop_readable.insert(h.to_string(), hop_readable_unchecked(h, caps));
        }
        let why = path_verdict(&hops, nodes, caps);
        match &why {
            Some(w) => witness.push(format!("path {pid}: PQC key derived ({w})")),
            None => witness.push(format!("path {pid}: PQC key intact")),
        }
        pqc.insert(pid.clone(), why.is_some());
    }
    let all_paths = pqc.values().all(|&b| b);
    let data = caps.breaks_classical && all_paths;
    witness.push(match (caps.breaks_classical, all_paths) {
        (true, true) => "data tunnel: PSK known and classical exchange broken".to_owned(),
        (false, _) => "data tunnel: classical exchange intact".to_owned(),
        (true, false) => "data tunnel: combined PSK has an unknown constituent".to_owned(),
    });
    Ok(ConfidentialityVerdict { hop_readable, pqc_key_compromised: pqc, data_compromised: data, witness })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub caps: AdversaryCapabilities,
    pub verdict: ConfidentialityVerdict,
}

/// Up to this many trusted nodes, every subset is enumerated.
pub const EXHAUSTIVE_NODE_LIMIT: usize = 10;

/// Compromised-node sets examined by [`enumerate_matrix`].
pub fn candidate_node_sets(topo: &SecurityTopology, session: &SessionPaths) -> Vec<BTreeSet<NodeId>> {
    let tns: Vec<NodeId> = topo.trusted_nodes.iter().cloned().collect();
    if tns.len() <= EXHAUSTIVE_NODE_LIMIT {
        return (0u32..1 << tns.len())
            .map(|mask| tns.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, n)| n.clone()).collect())
            .collect();
    }
    let mut sets: BTreeSet<BTreeSet<NodeId>> = BTreeSet::new();
    sets.insert(BTreeSet::new());
    for n in &tns {
        sets.insert(BTreeSet::from([n.clone()]));
    }
    let firsts: Vec<NodeId> = session
        .paths
        .values()
        .filter_map(|p| p.get(1).filter(|n| topo.trusted_nodes.contains(*n)).cloned())
        .collect();
    for k in 1..=firsts.len() {
        sets.insert(firsts[..k].iter().cloned().collect());
    }
    sets.insert(tns.iter().cloned().collect());
    sets.into_iter().collect()
}

/// Verdicts for all eight capability-flag combinations times the candidate node sets.
pub fn enumerate_matrix(topo: &SecurityTopology, session: &SessionPaths) -> Result<Vec<MatrixRow>, SecurityError> {
    let sets = candidate_node_sets(topo, session);
    let mut rows = Vec::with_capacity(sets.len() * 8);
    for flags in 0..8u8 {
        for nodes in &sets {
            let caps = AdversaryCapabilities::flags(flags & 1 != 0, flags & 2 != 0, flags & 4 != 0)
                .with_nodes(nodes.iter().cloned());
            let verdict = data_compromised(topo, session, &caps)?;
            rows.push(MatrixRow { caps, verdict });
        }
    }
    Ok(rows)
}

/// The three adversary models of the threat model plus the full conjunction.
pub fn threat_model_rows(topo: &SecurityTopology) -> Vec<(&'static str, AdversaryCapabilities)> {
    let all = topo.trusted_nodes.iter().cloned().collect::<Vec<_>>();
    vec![
        ("quantum_adversary", AdversaryCapabilities::flags(true, true, false)),
        ("trusted_nodes_without_pqc_break", AdversaryCapabilities::flags(true, false, false).with_nodes(all.clone())),
        ("trusted_nodes_with_pqc_break", AdversaryCapabilities::flags(false, true, false).with_nodes(all.clone())),
        ("full_conjunction", AdversaryCapabilities::flags(true, true, true).with_nodes(all)),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn n(s: &str) -> NodeId {
        NodeId::new(s)
    }

    fn chain_topo(tns: &[&str]) -> (SecurityTopology, SessionPaths) {
        let mut nodes = vec![n("alice")];
        nodes.extend(tns.iter().map(|t| n(t)));
        nodes.push(n("bob"));
        let topo = SecurityTopology {
            end_nodes: [n("alice"), n("bob")].into(),
            trusted_nodes: tns.iter().map(|t| n(t)).collect(),
            hops: nodes.windows(2).map(|w| LinkId::new(&w[0], &w[1])).collect(),
        };
        let session = SessionPaths { id: "s".into(), paths: BTreeMap::from([("p".to_owned(), nodes)]) };
        (topo, session)
    }

    #[test]
    fn hop_rules() {
        let (topo, _) = chain_topo(&["t1", "t5"]);
        let hop = LinkId::new(&n("t1"), &n("t5"));
        let cp = AdversaryCapabilities::flags(true, true, false);
        assert!(!hop_readable(&topo, &hop, &cp).unwrap());
        let node = AdversaryCapabilities::default().with_nodes([n("t5")]);
        assert!(hop_readable(&topo, &hop, &node).unwrap());
        assert!(!hop_readable(&topo, &hop, &AdversaryCapabilities::default()).unwrap());
        let missing = LinkId::new(&n("alice"), &n("bob"));
        assert_eq!(hop_readable(&topo, &missing, &cp), Err(SecurityError::UnknownHop(missing)));
    }

    #[test]
    fn pqc_rules() {
        let (topo, s) = chain_topo(&["t1"]);
        let path = &s.paths["p"];
        let tn = AdversaryCapabilities::default().with_nodes([n("t1")]);
        assert!(!pqc_key_compromised(&topo, "p", path, &tn).unwrap());
        let mut tnp = tn.clone();
        tnp.breaks_pqc = true;
        assert!(pqc_key_compromised(&topo, "p", path, &tnp).unwrap());
        let p_only = AdversaryCapabilities::flags(false, true, false);
        assert!(!pqc_key_compromised(&topo, "p", path, &p_only).unwrap());
        assert!(matches!(
            pqc_key_compromised(&topo, "x", &[n("alice"), n("bob")], &p_only),
            Err(SecurityError::UnknownPath(..))
        ));
    }

    #[test]
    fn data_rules() {
        let (topo, s) = chain_topo(&["t1", "t2"]);
        let full = AdversaryCapabilities::flags(true, true, true).with_nodes([n("t1")]);
        assert!(data_compromised(&topo, &s, &full).unwrap().data_compromised);
        let no_c = AdversaryCapabilities::flags(false, true, true).with_nodes([n("t1")]);
        let v = data_compromised(&topo, &s, &no_c).unwrap();
        assert!(!v.data_compromised);
        assert!(v.pqc_key_compromised["p"]);
    }

    #[test]
    fn end_nodes_cannot_be_compromised() {
        let (topo, s) = chain_topo(&["t1"]);
        let bad = AdversaryCapabilities::default().with_nodes([n("alice")]);
        assert_eq!(data_compromised(&topo, &s, &bad), Err(SecurityError::EndNodeCompromised(n("alice"))));
    }

    #[test]
    fn published_models_are_safe_and_conjunction_is_not() {
        let (topo, s) = chain_topo(&["t1", "t2", "t3"]);
        let rows = threat_model_rows(&topo);
        for (name, caps) in &rows[..3] {
            assert!(!data_compromised(&topo, &s, caps).unwrap().data_compromised, "{name}");
        }
        assert!(data_compromised(&topo, &s, &rows[3].1).unwrap().data_compromised);
    }

    #[test]
    fn matrix_sizes() {
        let (topo, s) = chain_topo(&["t1", "t2", "t3"]);
        assert_eq!(enumerate_matrix(&topo, &s).unwrap().len(), 8 * 8);
        let (big, s) = chain_topo(&["a1", "a2", "a3", "a4", "a5", "a6", "a7", "a8", "a9", "b1", "b2"]);
        // empty, 11 singles (the first intermediate is one of them), all
        assert_eq!(candidate_node_sets(&big, &s).len(), 1 + 11 + 1);
    }

    #[test]
    fn zero_capability_rows_safe() {
        let (topo, s) = chain_topo(&["t1", "t2"]);
        let rows = enumerate_matrix(&topo, &s).unwrap();
        let zero = rows.iter().find(|r| r.caps == AdversaryCapabilities::default()).unwrap();
        assert!(!zero.verdict.data_compromised);
        let top = rows.iter().find(|r| r.caps == threat_model_rows(&topo)[3].1).unwrap();
        assert!(top.verdict.data_compromised);
    }
}
