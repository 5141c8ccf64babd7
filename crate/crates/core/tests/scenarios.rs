use qkdsim_core::netmodel::{LayerTag, LinkId, NodeId};
use qkdsim_core::scenario::{self, canned, load_scenario, serialize, Fault, Simulation, CANNED};
use qkdsim_core::simcore::{SimTime, Trace};

fn shipped(name: &str) -> String {
    std::fs::read_to_string(format!("{}/scenarios/{name}.scn", env!("CARGO_MANIFEST_DIR"))).unwrap()
}

fn kinds_at(trace: &Trace, component: &str) -> Vec<(u64, String)> {
    trace
        .records()
        .iter()
        .filter(|r| r.component == component)
        .map(|r| (r.t_ms, r.kind.clone()))
        .collect()
}

#[test]
fn shipped_files_match_builders() {
    for name in CANNED {
        let text = shipped(name);
        assert_eq!(text, serialize(&canned(name).unwrap()), "{name}");
        assert_eq!(load_scenario(&text).unwrap(), canned(name).unwrap());
    }
}

#[test]
fn same_seed_same_trace() {
    let spec = canned("fig2").unwrap();
    let (a, ta) = scenario::run(&spec, Some(400)).unwrap();
    let (b, tb) = scenario::run(&spec, Some(400)).unwrap();
    assert_eq!(a, b);
    assert_eq!(ta.to_jsonl(), tb.to_jsonl());
    let (c, _) = scenario::run_seed(&spec, spec.seed + 1, Some(400)).unwrap();
    assert_ne!(a.setup_time_s, c.setup_time_s);
}

#[test]
fn batch_is_order_free() {
    let spec = canned("fig3").unwrap();
    let batch = scenario::run_batch(&spec, 8, None).unwrap();
    assert_eq!(batch.seeds, (0..8).collect::<Vec<_>>());
    for r in &batch.runs {
        let (solo, _) = scenario::run_seed(&spec, r.seed, None).unwrap();
        assert_eq!(&solo, r);
    }
}

#[test]
fn aligned_failsafe_golden_timeline() {
    let (s, trace) = scenario::run(&canned("test5_failsafe_aligned").unwrap(), None).unwrap();
    assert_eq!(s.disruption_time_s, Some(540.0));
    let after = |c: &str, kind: &str| -> Vec<u64> {
        kinds_at(&trace, c).into_iter().filter(|(t, k)| *t >= 600_000 && k == kind).map(|(t, _)| t / 1000).collect()
    };
    assert_eq!(after("arnika:alice--t01", "random_psk_injected"), vec![780]);
    assert_eq!(after("wg:alice--t01", "tunnel_down"), vec![900]);
    assert_eq!(after("pqc:ab/dynamic", "pqc_random_injected"), vec![1020]);
    assert_eq!(after("data:ab", "tunnel_down"), vec![1140]);
    assert_eq!(after("pqc:ab/dynamic", "pqc_ok").last(), Some(&840));
}

#[test]
fn revive_before_deadline_avoids_fallback() {
    let spec = canned("test5_failsafe_aligned").unwrap();
    let mut sim = Simulation::from_spec(&spec, spec.seed).unwrap();
    let hop = LinkId::new(&NodeId::new("alice"), &NodeId::new("t01"));
    sim.inject_fault(SimTime::from_secs(650), Fault::ReviveQkd(hop)).unwrap();
    sim.run_until(SimTime::from_secs(1500));
    let s = sim.summary();
    assert_eq!(s.events.get("random_psk_injected"), None);
    assert_eq!(s.events.get("tunnel_down"), None);
    assert_eq!(s.disruption_time_s, None);
}

#[test]
fn node_kill_reroutes_sessions() {
    let spec = canned("fig2").unwrap();
    let mut sim = Simulation::from_spec(&spec, spec.seed).unwrap();
    let t1 = NodeId::new("t1");
    sim.inject_fault(SimTime::from_secs(100), Fault::KillNode(t1.clone())).unwrap();
    sim.run_until(SimTime::from_secs(150));
    let delivered = sim.probes().delivered;
    let route = sim.tunnel_route(&NodeId::new("alice"), &NodeId::new("bob")).unwrap();
    assert!(!route.contains(&t1));
    assert!(route.contains(&NodeId::new("t4")));
    sim.run_until(SimTime::from_secs(400));
    // Two sessions probing once per second.
    assert!(sim.probes().delivered >= delivered + 2 * 240);
    assert!(sim.data_tunnel("ab").unwrap().is_established());
    assert!(sim.data_tunnel("ac").unwrap().is_established());
    let downs: Vec<&str> = sim.trace().of_kind("tunnel_down").map(|r| r.component.as_str()).collect();
    assert!(!downs.is_empty());
    assert!(downs.iter().all(|c| c.starts_with("wg:") && c.contains("t1")), "{downs:?}");
}

#[test]
fn unknown_fault_target_rejected() {
    let spec = canned("fig3").unwrap();
    let mut sim = Simulation::new(&spec, 0);
    let err = sim.inject_fault(SimTime::from_secs(1), Fault::KillNode(NodeId::new("mallory")));
    assert!(err.is_err());
}

#[test]
fn handshake_traffic_is_table_multiples() {
    let (s, _) = scenario::run(&canned("fig3").unwrap(), None).unwrap();
    for row in &s.traffic {
        let per = match row.layer {
            LayerTag::WgHandshake | LayerTag::WgDataHandshake => (3, 398),
            LayerTag::ArnikaNego => (2, 78),
            LayerTag::PqcHandshake => (4, 4772),
            LayerTag::Data => continue,
        };
        assert_eq!(row.packets % per.0, 0, "{row:?}");
        assert_eq!(row.bytes * per.0, row.packets * per.1, "{row:?}");
    }
}

#[test]
fn failed_setup_reports_reason() {
    let mut spec = canned("test2_chain100").unwrap();
    spec.ttl_default = 64;
    let (s, _) = scenario::run(&spec, None).unwrap();
    assert_eq!(s.setup_time_s, None);
    let why = s.failure.unwrap();
    assert!(why.contains("ttl_exceeded"), "{why}");
}

#[test]
fn direct_neighbours_without_trusted_nodes() {
    let spec = qkdsim_core::scenario::spec::chain("direct", 0);
    let (s, _) = scenario::run(&spec, Some(60)).unwrap();
    assert!(s.setup_time_s.is_some(), "{:?}", s.failure);
}
