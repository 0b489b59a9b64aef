use std::collections::BTreeMap;

use rand::Rng;

use circsel::config::ExperimentConfig;
use circsel::network::{great_circle_km, EndpointDescriptor, EndpointKind, Position, RelayDescriptor, Topology};
use circsel::pool::TargetN;
use circsel::sim::{RngStream, SimTime};
use circsel::strategy::StrategyId;
use circsel::workload::{ClientKind, StreamOutcome};
use circsel::world::Simulation;

fn line_topology(gen: &mut RngStream) -> Topology {
    let mut pos = || Position::new(gen.random_range(-60.0..60.0), gen.random_range(-150.0..150.0));
    let relays = (0..3u32)
        .map(|id| RelayDescriptor {
            relay_id: id,
            bandwidth: 100_000,
            is_guard: id == 0,
            is_exit: id == 2,
            position: pos(),
            exit_policy: if id == 2 { [80].into() } else { Default::default() },
            is_malicious: false,
        })
        .collect();
    let ep = |id, kind, position| EndpointDescriptor {
        endpoint_id: id,
        kind,
        position,
        bandwidth: 100_000,
    };
    Topology {
        relays,
        clients: vec![ep(0, EndpointKind::Client, pos())],
        servers: vec![ep(0, EndpointKind::Server, pos())],
    }
}

#[test]
fn build_time_at_least_three_guard_round_trips() {
    let mut gen = RngStream::new(0, "build-bound");
    for case in 0..25u64 {
        let topo = line_topology(&mut gen);
        let mut cfg = ExperimentConfig::default();
        cfg.link.jitter_ms = 0.0;
        cfg.link.packet_loss = 0.0;
        cfg.workload.web_clients = 1;
        cfg.workload.bulk_clients = 0;
        let link = cfg.link.clone();
        let mut sim = Simulation::new(&topo, cfg.run_spec(), case);
        let id = sim.launch_circuit(0, [0, 1, 2]);
        sim.run_until(SimTime::from_secs(30));
        let built = sim.circuit(0, id).and_then(|c| c.built_at).expect("circuit builds");
        let one_way = link.base_propagation(great_circle_km(topo.clients[0].position, topo.relays[0].position));
        let bound = SimTime::from_micros(6 * one_way.as_micros());
        assert!(built >= bound, "case {case}: built at {built}, bound {bound}");
    }
}

#[test]
fn stream_records_are_consistent() {
    let mut cfg = ExperimentConfig::default();
    cfg.experiment.duration_s = 600.0;
    cfg.experiment.strategy = StrategyId::RttOnly;
    cfg.pool.target_n = TargetN::Fixed(3);
    let topo = cfg.topology_for(3).unwrap();
    let out = Simulation::new(&topo, cfg.run_spec(), 3).run();
    assert!(!out.records.is_empty());
    let mut by_client: BTreeMap<u32, Vec<_>> = BTreeMap::new();
    for r in &out.records {
        if r.outcome == StreamOutcome::Completed {
            let attached = r.circuit_attached_at.unwrap();
            let (first, last) = (r.first_byte_at.unwrap(), r.last_byte_at.unwrap());
            assert!(r.requested_at <= attached && attached <= first && first <= last, "{r:?}");
            assert!(r.path.is_some() && r.circuit_id.is_some());
            assert!(r.ttfb().unwrap() <= r.ttlb().unwrap());
        }
        by_client.entry(r.client_id).or_default().push(r);
    }
    // Bulk clients request again the moment the previous download ends; web
    // clients pause between 1 and 20 seconds.
    for (client, recs) in by_client {
        for w in recs.windows(2) {
            let Some(done) = w[0].last_byte_at else { continue };
            let gap = (w[1].requested_at - done).as_secs_f64();
            match out.client_kinds[client as usize] {
                ClientKind::Bulk => assert_eq!(gap, 0.0),
                ClientKind::Web => assert!((1.0..=20.0).contains(&gap), "gap {gap}"),
            }
        }
    }
    let summary = circsel::workload::aggregate(&out.records, &out.usage, &out.client_kinds, SimTime::ZERO);
    for c in &summary.clients {
        assert!(c.used <= c.created);
    }
}

#[test]
fn offline_exit_fails_streams_without_panicking() {
    let mut cfg = ExperimentConfig::default();
    cfg.experiment.duration_s = 200.0;
    let topo = cfg.topology_for(5).unwrap();
    let mut sim = Simulation::new(&topo, cfg.run_spec(), 5);
    for r in topo.relays.iter().filter(|r| r.is_exit) {
        sim.network_mut().set_online(circsel::network::NodeRef::Relay(r.relay_id), false);
    }
    let out = sim.run();
    assert!(out.records.iter().all(|r| r.outcome != StreamOutcome::Completed));
    assert!(out.counters.build_failures > 0);
}
