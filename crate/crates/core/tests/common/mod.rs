#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use qkdsim_core::e2e_pqc::kem::{Kem, StubKem};
use qkdsim_core::netmodel::{LinkId, NodeId};
use qkdsim_core::qkd_kms::QkdLinkState;
use qkdsim_core::security_model::{AdversaryCapabilities, SecurityTopology, SessionPaths};
use qkdsim_core::simcore::RngStream;
use uuid::Uuid;

/// Random multi-path session between `a` and `b` over chains drawn from a small node pool.
pub fn random_topology(rng: &mut RngStream) -> (SecurityTopology, SessionPaths) {
    let pool = 1 + rng.draw_below(8) as usize;
    let tns: Vec<NodeId> = (0..pool).map(|i| NodeId::new(format!("t{i}"))).collect();
    let a = NodeId::new("a");
    let b = NodeId::new("b");
    let mut hops = BTreeSet::new();
    let mut paths = BTreeMap::new();
    for p in 0..1 + rng.draw_below(3) {
        let mut chain = vec![a.clone()];
        let mut used = BTreeSet::new();
        for _ in 0..rng.draw_below(4) {
            let t = tns[rng.draw_below(pool as u64) as usize].clone();
            if used.insert(t.clone()) {
                chain.push(t);
            }
        }
        chain.push(b.clone());
        for w in chain.windows(2) {
            hops.insert(LinkId::new(&w[0], &w[1]));
        }
        paths.insert(format!("p{p}"), chain);
    }
    let topo = SecurityTopology {
        end_nodes: [a, b].into_iter().collect(),
        trusted_nodes: tns.into_iter().collect(),
        hops,
    };
    (topo, SessionPaths { id: "s".into(), paths })
}

/// Knowledge closure: grow the set of facts the adversary learns until nothing changes.
pub fn closure_oracle(topo: &SecurityTopology, s: &SessionPaths, caps: &AdversaryCapabilities) -> bool {
    #[derive(Clone, PartialEq, Eq, PartialOrd, Ord)]
    enum Fact {
        HopTraffic(LinkId),
        PlaintextAt(NodeId),
        PathKey(String),
        DataPsk,
        Data,
    }
    let mut known = BTreeSet::new();
    let mut queue = VecDeque::new();
    for n in &caps.compromised_nodes {
        queue.push_back(Fact::PlaintextAt(n.clone()));
    }
    for h in &topo.hops {
        // A hop key comes from QKD and is mixed with a classical exchange.
        if caps.breaks_qkd && caps.breaks_classical {
            queue.push_back(Fact::HopTraffic(h.clone()));
        }
    }
    while let Some(f) = queue.pop_front() {
        if !known.insert(f.clone()) {
            continue;
        }
        if let Fact::PlaintextAt(node) = &f {
            for h in topo.hops.iter().filter(|h| h.has_endpoint(node)) {
                queue.push_back(Fact::HopTraffic(h.clone()));
            }
        }
        for (pid, chain) in &s.paths {
            let seen = chain[1..chain.len() - 1].iter().any(|x| known.contains(&Fact::PlaintextAt(x.clone())))
                || chain.windows(2).any(|w| known.contains(&Fact::HopTraffic(LinkId::new(&w[0], &w[1]))));
            if seen && caps.breaks_pqc {
                queue.push_back(Fact::PathKey(pid.clone()));
            }
        }
        if s.paths.keys().all(|p| known.contains(&Fact::PathKey(p.clone()))) {
            queue.push_back(Fact::DataPsk);
        }
        if known.contains(&Fact::DataPsk) && caps.breaks_classical {
            queue.push_back(Fact::Data);
        }
    }
    known.contains(&Fact::Data)
}

pub fn random_caps(topo: &SecurityTopology, rng: &mut RngStream) -> AdversaryCapabilities {
    let nodes: Vec<NodeId> = topo.trusted_nodes.iter().filter(|_| rng.chance(0.3)).cloned().collect();
    AdversaryCapabilities::flags(rng.chance(0.5), rng.chance(0.5), rng.chance(0.5)).with_nodes(nodes)
}

/// Drive a KMS link with `ops` random operations and check it against a counting model.
pub fn kms_random_ops(seed: u64, ops: usize) -> Result<(), String> {
    let ends = [NodeId::new("a"), NodeId::new("b")];
    let mut kms = QkdLinkState::new(LinkId::new(&ends[0], &ends[1]), 10.0, 50);
    let mut rng = RngStream::new(seed, 0);
    let mut gen_rng = RngStream::new(seed, 1);
    let mut fresh = 0usize;
    let mut issued: HashMap<Uuid, ([u8; 32], usize)> = HashMap::new();
    let mut redeemed: Vec<Uuid> = Vec::new();
    let mut seen: BTreeSet<Uuid> = BTreeSet::new();
    for step in 0..ops {
        let side = rng.draw_below(2) as usize;
        match rng.draw_below(4) {
            0 => fresh += kms.tick_generate(rng.draw_below(2000), &mut gen_rng),
            1 => match kms.get_enc_key(&ends[side]) {
                Ok(rec) => {
                    if fresh == 0 || !seen.insert(rec.key_id) {
                        return Err(format!("step {step}: unexpected or repeated key {}", rec.key_id));
                    }
                    fresh -= 1;
                    issued.insert(rec.key_id, (rec.key, side));
                }
                Err(_) if fresh == 0 => {}
                Err(e) => return Err(format!("step {step}: {e} with {fresh} fresh keys")),
            },
            2 => {
                let pick = if !issued.is_empty() && rng.chance(0.8) {
                    *issued.keys().nth(rng.draw_below(issued.len() as u64) as usize).unwrap()
                } else if !redeemed.is_empty() && rng.chance(0.5) {
                    redeemed[rng.draw_below(redeemed.len() as u64) as usize]
                } else {
                    Uuid::from_bytes(rng.bytes32()[..16].try_into().unwrap())
                };
                let expect = issued.get(&pick).filter(|(_, issuer)| *issuer != side).map(|(k, _)| *k);
                match (kms.get_dec_key(&ends[side], &pick), expect) {
                    (Ok(k), Some(e)) if k == e => {
                        issued.remove(&pick);
                        redeemed.push(pick);
                    }
                    (Err(_), None) => {}
                    (got, want) => return Err(format!("step {step}: dec {pick} gave {got:?}, model {want:?}")),
                }
            }
            _ => {
                let avail = kms.available_for(&ends[side]).map_err(|e| e.to_string())?;
                if avail != fresh || kms.buffer_len() != fresh + issued.len() {
                    return Err(format!("step {step}: available {avail}, model {fresh}"));
                }
            }
        }
    }
    Ok(())
}

/// decaps(encaps(pk)) == shared secret for `n` fresh keypairs.
pub fn kem_roundtrips(seed: u64, n: usize) -> Result<(), String> {
    let kem = StubKem::new("stub-v1");
    let mut rng = RngStream::new(seed, 0);
    for i in 0..n {
        let (pk, sk) = kem.keygen(&mut rng);
        let (ct, ss) = kem.encaps(&pk, &mut rng).map_err(|e| e.to_string())?;
        if kem.decaps(&sk, &ct).map_err(|e| e.to_string())? != ss {
            return Err(format!("keypair {i}: shared secrets differ"));
        }
    }
    Ok(())
}
