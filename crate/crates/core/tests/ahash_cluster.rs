//! Replicated-store behavior on the simulation transport: replication,
//! redirects, elections, catch-up and membership.

use std::collections::BTreeMap;
use std::sync::Arc;

use chelonia::ahash::log::{DiskRegistry, LogEntry, NodeStorage};
use chelonia::ahash::store::{ChangeRequest, Condition, ObjectStore};
use chelonia::ahash::{AHashConfig, AHashNode, Role, NODE_LIST_ID, NODE_LIST_SECTION};
use chelonia::codec::Msg;
use chelonia::hed::envelope::{codes, CallError};
use chelonia::hed::sim::{Sim, SimPort};
use chelonia::hed::{ServiceSpec, WorkerPoolConfig};
use chelonia::vtime::secs;

struct Cluster {
    nodes: Vec<Arc<AHashNode>>,
    urls: Vec<String>,
}

fn ahash_trust(_ids: &[String]) -> std::collections::BTreeSet<String> {
    // Trust lists are static configuration: a deployment that may grow to
    // four nodes authorizes the fourth DN up front.
    let mut t: std::collections::BTreeSet<String> = (1..=4)
        .map(|i| format!("CN=ahash{i}"))
        .collect();
    t.insert("CN=librarian".to_string());
    t.insert("CN=admin".to_string());
    t
}

fn build_cluster(
    sim: &Sim,
    n: usize,
    registry: &DiskRegistry,
    tweak: impl Fn(usize, &mut AHashConfig),
) -> Cluster {
    let ids: Vec<String> = (1..=n).map(|i| format!("ahash{i}")).collect();
    let peers: BTreeMap<String, String> = ids
        .iter()
        .map(|id| (id.clone(), format!("sim://{id}/AHash")))
        .collect();
    let mut nodes = Vec::new();
    let mut urls = Vec::new();
    for (i, id) in ids.iter().enumerate() {
        sim.add_host(id, WorkerPoolConfig::default());
        let url = format!("sim://{id}/AHash");
        let mut cfg = AHashConfig::new(id, &url, peers.clone());
        cfg.tick_phase = (i as u64) * 37_000_000;
        tweak(i, &mut cfg);
        let node = AHashNode::new(cfg, registry.disk(id));
        sim.register_service(
            id,
            ServiceSpec {
                name: "AHash".to_string(),
                dn: format!("CN={id}"),
                trusted: ahash_trust(&ids),
                service: node.clone(),
            },
        )
        .unwrap();
        sim.start_host(id);
        nodes.push(node);
        urls.push(url);
    }
    Cluster { nodes, urls }
}

fn master_index(cluster: &Cluster) -> Option<usize> {
    cluster
        .nodes
        .iter()
        .position(|n| n.view().role == Role::Master)
}

fn wait_for_master(sim: &Sim, cluster: &Cluster, budget: u64) -> usize {
    let deadline = sim.now() + budget;
    loop {
        if let Some(idx) = master_index(cluster) {
            return idx;
        }
        assert!(sim.now() < deadline, "no master elected within budget");
        sim.run_for(secs(0.2));
    }
}

fn set_req(id: &str, key: &str, value: &str) -> Msg {
    let mut changes = BTreeMap::new();
    changes.insert(
        "0".to_string(),
        ChangeRequest::set(id, "states", key, value).to_msg(),
    );
    Msg::map().field("changes", Msg::Map(changes)).build()
}

fn lib_call(port: &SimPort, url: &str, op: &str, payload: Msg) -> Result<Msg, CallError> {
    port.call_in_session(None, 0, url, op, payload)
}

#[test]
fn cold_start_elects_highest_node_id() {
    let sim = Sim::new(11);
    let registry = DiskRegistry::new();
    let cluster = build_cluster(&sim, 3, &registry, |_, _| {});
    let idx = wait_for_master(&sim, &cluster, secs(10.0));
    // Equal (empty) logs everywhere: the tie breaks on the node id.
    assert_eq!(cluster.nodes[idx].node_id(), "ahash3");
    sim.shutdown();
}

#[test]
fn writes_replicate_and_clients_redirect() {
    let sim = Sim::new(12);
    let registry = DiskRegistry::new();
    let cluster = build_cluster(&sim, 3, &registry, |_, _| {});
    let master = wait_for_master(&sim, &cluster, secs(10.0));
    let port = sim.driver_port("CN=librarian");

    // Write 114 MB metadata guarded by no-key: applied once, then the
    // replay fails its condition.
    let mut changes = BTreeMap::new();
    changes.insert(
        "0".to_string(),
        ChangeRequest::set("g1", "states", "size", "114000000")
            .when(Condition::no_key("states", "size"))
            .to_msg(),
    );
    let payload = Msg::map().field("changes", Msg::Map(changes)).build();
    let resp = lib_call(&port, &cluster.urls[master], "change", payload.clone()).unwrap();
    assert_eq!(resp.get("results").get_str("0"), Some("applied"));
    let resp = lib_call(&port, &cluster.urls[master], "change", payload).unwrap();
    assert_eq!(resp.get("results").get_str("0"), Some("condition-failed"));

    // A write to a client replica is redirected with the master endpoint.
    let client = (master + 1) % 3;
    let err = lib_call(&port, &cluster.urls[client], "change", set_req("g2", "k", "v"))
        .unwrap_err();
    match err {
        CallError::Remote(e) => {
            assert!(e.is(codes::NOT_MASTER));
            assert_eq!(e.data.as_str(), Some(cluster.urls[master].as_str()));
        }
        other => panic!("expected not-master, got {other:?}"),
    }

    // Reads on any replica see the committed value; never a torn object.
    sim.run_for(secs(1.0));
    for url in &cluster.urls {
        let got = lib_call(
            &port,
            url,
            "get",
            Msg::map()
                .field("ids", Msg::List(vec![Msg::str("g1")]))
                .build(),
        )
        .unwrap();
        assert_eq!(
            got.get("objects").get("g1").get("states").get_str("size"),
            Some("114000000")
        );
    }
    // Unknown ids map to empty objects.
    let got = lib_call(
        &port,
        &cluster.urls[0],
        "get",
        Msg::map()
            .field("ids", Msg::List(vec![Msg::str("nope")]))
            .build(),
    )
    .unwrap();
    assert_eq!(got.get("objects").get("nope"), &Msg::Map(BTreeMap::new()));
    sim.shutdown();
}

#[test]
fn atomic_batch_is_never_torn_across_reads() {
    let sim = Sim::new(13);
    let registry = DiskRegistry::new();
    let cluster = build_cluster(&sim, 3, &registry, |_, _| {});
    let master = wait_for_master(&sim, &cluster, secs(10.0));
    let master_url = cluster.urls[master].clone();
    let read_urls = cluster.urls.clone();

    sim.add_host("writer", WorkerPoolConfig::default());
    sim.add_host("reader", WorkerPoolConfig::default());
    // Writer flips two keys of one object in one batch, repeatedly.
    sim.spawn("writer", "CN=librarian", move |port| {
        for round in 0..30u64 {
            let mut changes = BTreeMap::new();
            changes.insert(
                "a".to_string(),
                ChangeRequest::set("pair", "s", "x", &round.to_string()).to_msg(),
            );
            changes.insert(
                "b".to_string(),
                ChangeRequest::set("pair", "s", "y", &round.to_string()).to_msg(),
            );
            let payload = Msg::map().field("changes", Msg::Map(changes)).build();
            port.call_in_session(None, 0, &master_url, "change", payload)
                .unwrap();
        }
    });
    let torn = Arc::new(parking_lot::Mutex::new(0u64));
    let torn2 = torn.clone();
    sim.spawn("reader", "CN=librarian", move |port| {
        for i in 0..200u64 {
            let url = &read_urls[(i % 3) as usize];
            let resp = port
                .call_in_session(
                    None,
                    0,
                    url,
                    "get",
                    Msg::map()
                        .field("ids", Msg::List(vec![Msg::str("pair")]))
                        .build(),
                )
                .unwrap();
            let obj = resp.get("objects").get("pair");
            let x = obj.get("s").get_str("x");
            let y = obj.get("s").get_str("y");
            if x != y {
                *torn2.lock() += 1;
            }
            port.sleep(3_000_000);
        }
    });
    sim.run_for(secs(5.0));
    assert_eq!(*torn.lock(), 0, "object reads must never be torn");
    sim.shutdown();
}

#[test]
fn master_failure_elects_highest_seq_and_blocks_writes_meanwhile() {
    let sim = Sim::new(14);
    let registry = DiskRegistry::new();
    let cluster = build_cluster(&sim, 3, &registry, |_, _| {});
    let master = wait_for_master(&sim, &cluster, secs(10.0));
    let port = sim.driver_port("CN=librarian");

    for i in 0..5 {
        lib_call(
            &port,
            &cluster.urls[master],
            "change",
            set_req("obj", &format!("k{i}"), "v"),
        )
        .unwrap();
    }
    sim.run_for(secs(2.0));

    // All replicas are caught up; kill the master.
    let master_host = format!("ahash{}", master + 1);
    sim.kill(&master_host);

    // Writes are unavailable while no master exists; reads keep working.
    let survivor = (master + 1) % 3;
    let err = lib_call(&port, &cluster.urls[survivor], "change", set_req("o", "k", "v"))
        .unwrap_err();
    assert!(matches!(err, CallError::Remote(ref e) if e.is(codes::NO_MASTER) || e.is(codes::NOT_MASTER)));
    lib_call(
        &port,
        &cluster.urls[survivor],
        "get",
        Msg::map().field("ids", Msg::List(vec![Msg::str("obj")])).build(),
    )
    .unwrap();

    // A new master appears within master_timeout + election time.
    let deadline = sim.now() + secs(15.0);
    let new_master = loop {
        if let Some(idx) = master_index(&cluster) {
            if idx != master {
                break idx;
            }
        }
        assert!(sim.now() < deadline, "no re-election happened");
        sim.run_for(secs(0.2));
    };
    // Both survivors held seq 6 (5 writes + bootstrap): the higher node id
    // among them wins.
    let expect = cluster
        .nodes
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != master)
        .map(|(i, n)| (n.view().last_applied, n.node_id().to_string(), i))
        .max()
        .unwrap()
        .2;
    assert_eq!(new_master, expect);

    // Writes work again.
    lib_call(&port, &cluster.urls[new_master], "change", set_req("o2", "k", "v")).unwrap();
    sim.shutdown();
}

#[test]
fn restarted_replica_catches_up_from_snapshot_or_log() {
    let sim = Sim::new(15);
    let registry = DiskRegistry::new();
    let cluster = build_cluster(&sim, 3, &registry, |_, c| {
        c.snapshot_every = 4; // force snapshot-based catch-up
    });
    let master = wait_for_master(&sim, &cluster, secs(10.0));
    let port = sim.driver_port("CN=librarian");

    let victim = (master + 1) % 3;
    let victim_host = format!("ahash{}", victim + 1);
    sim.kill(&victim_host);

    for i in 0..12 {
        lib_call(
            &port,
            &cluster.urls[master],
            "change",
            set_req("obj", &format!("k{i}"), &format!("v{i}")),
        )
        .unwrap();
    }
    let master_seq = cluster.nodes[master].view().last_applied;

    sim.restart(&victim_host);
    // Recovery is exact: the node reloads its own last applied seq first.
    let recovered = cluster.nodes[victim].view().last_applied;
    assert!(recovered < master_seq);

    // Then the master's pings drive catch-up to the tip.
    let deadline = sim.now() + secs(10.0);
    while cluster.nodes[victim].view().last_applied < master_seq {
        assert!(sim.now() < deadline, "victim never caught up");
        sim.run_for(secs(0.5));
    }
    assert_eq!(
        cluster.nodes[victim].store_clone().canonical_bytes(),
        cluster.nodes[master].store_clone().canonical_bytes(),
        "stores must converge byte-identically"
    );
    sim.shutdown();
}

#[test]
fn membership_change_propagates_node_list() {
    let sim = Sim::new(16);
    let registry = DiskRegistry::new();
    let cluster = build_cluster(&sim, 3, &registry, |_, _| {});
    let master = wait_for_master(&sim, &cluster, secs(10.0));
    let port = sim.driver_port("CN=librarian");

    let resp = lib_call(&port, &cluster.urls[0], "node_list", Msg::Null).unwrap();
    assert_eq!(resp.get("nodes").as_map().unwrap().len(), 3);

    // Start a fourth node pointing at the existing deployment, then add it
    // to the replicated list.
    let ids: Vec<String> = (1..=4).map(|i| format!("ahash{i}")).collect();
    let mut peers: BTreeMap<String, String> = ids
        .iter()
        .map(|id| (id.clone(), format!("sim://{id}/AHash")))
        .collect();
    peers.remove("ahash4"); // not yet in anyone's list
    sim.add_host("ahash4", WorkerPoolConfig::default());
    let mut cfg = AHashConfig::new("ahash4", "sim://ahash4/AHash", {
        let mut p = peers.clone();
        p.insert("ahash4".into(), "sim://ahash4/AHash".into());
        p
    });
    cfg.startup_election_delay = secs(30.0); // joiner must not force elections
    let node4 = AHashNode::new(cfg, registry.disk("ahash4"));
    sim.register_service(
        "ahash4",
        ServiceSpec {
            name: "AHash".to_string(),
            dn: "CN=ahash4".to_string(),
            trusted: ahash_trust(&ids),
            service: node4.clone(),
        },
    )
    .unwrap();
    sim.start_host("ahash4");

    let mut changes = BTreeMap::new();
    changes.insert(
        "0".to_string(),
        ChangeRequest::set(NODE_LIST_ID, NODE_LIST_SECTION, "ahash4", "sim://ahash4/AHash")
            .to_msg(),
    );
    lib_call(
        &port,
        &cluster.urls[master],
        "change",
        Msg::map().field("changes", Msg::Map(changes)).build(),
    )
    .unwrap();
    sim.run_for(secs(5.0));

    for url in cluster.urls.iter().chain(["sim://ahash4/AHash".to_string()].iter()) {
        let resp = lib_call(&port, url, "node_list", Msg::Null).unwrap();
        assert_eq!(
            resp.get("nodes").as_map().unwrap().len(),
            4,
            "every replica reports 4 endpoints ({url})"
        );
    }
    assert_eq!(
        node4.view().last_applied,
        cluster.nodes[master].view().last_applied,
        "joiner synced the whole history"
    );
    sim.shutdown();
}

#[test]
fn two_dead_nodes_leave_no_majority_and_writes_blocked() {
    let sim = Sim::new(17);
    let registry = DiskRegistry::new();
    let cluster = build_cluster(&sim, 3, &registry, |_, _| {});
    let master = wait_for_master(&sim, &cluster, secs(10.0));
    let survivor = (master + 1) % 3;
    for i in 0..3 {
        if i != survivor {
            sim.kill(&format!("ahash{}", i + 1));
        }
    }
    sim.run_for(secs(40.0));
    let port = sim.driver_port("CN=librarian");
    assert_ne!(cluster.nodes[survivor].view().role, Role::Master);
    let err = lib_call(&port, &cluster.urls[survivor], "change", set_req("o", "k", "v"))
        .unwrap_err();
    assert!(matches!(err, CallError::Remote(ref e) if e.is(codes::NO_MASTER)));
    // Reads still served by the live replica.
    lib_call(
        &port,
        &cluster.urls[survivor],
        "get",
        Msg::map().field("ids", Msg::List(vec![Msg::str("x")])).build(),
    )
    .unwrap();
    sim.shutdown();
}

#[test]
fn replicate_from_non_master_identity_is_rejected() {
    let sim = Sim::new(18);
    let registry = DiskRegistry::new();
    let cluster = build_cluster(&sim, 3, &registry, |_, _| {});
    wait_for_master(&sim, &cluster, secs(10.0));
    // An admin DN is trusted at the container level, but replication
    // additionally requires the claimed master identity.
    let port = sim.driver_port("CN=admin");
    let entry = LogEntry {
        seq: 99,
        term: 99,
        batch: vec![ChangeRequest::set("evil", "s", "k", "v")],
    };
    let payload = Msg::map()
        .field("entry", entry.to_msg())
        .int_field("commit", 0)
        .str_field("master", "ahash1")
        .build();
    let err = lib_call(&port, &cluster.urls[1], "replicate", payload).unwrap_err();
    assert!(matches!(err, CallError::Remote(ref e) if e.is(codes::NOT_FROM_MASTER)));
    sim.shutdown();
}

/// Elections must pick the participant with the greatest
/// (last entry term, last applied seq, node id) over every log-length
/// assignment; verified exhaustively for three nodes with logs seeded on
/// disk before boot.
#[test]
fn election_winner_rule_exhaustive_over_seq_assignments() {
    let shared_history: Vec<LogEntry> = (1..=3)
        .map(|seq| LogEntry {
            seq,
            term: 1,
            batch: vec![ChangeRequest::set("obj", "s", &format!("k{seq}"), "v")],
        })
        .collect();

    for s1 in 0..=3u64 {
        for s2 in 0..=3u64 {
            for s3 in 0..=3u64 {
                let seqs = [s1, s2, s3];
                let sim = Sim::new(1000 + s1 * 16 + s2 * 4 + s3);
                let registry = DiskRegistry::new();
                // Seed disks before the nodes boot.
                for (i, s) in seqs.iter().enumerate() {
                    let disk = registry.disk(&format!("ahash{}", i + 1));
                    disk.save_vote(1, None);
                    for e in shared_history.iter().take(*s as usize) {
                        disk.append_entry(e);
                    }
                }
                let cluster = build_cluster(&sim, 3, &registry, |_, _| {});
                let idx = wait_for_master(&sim, &cluster, secs(15.0));
                // Independent oracle: max by (seq, node id); terms equal.
                let expect = (0..3)
                    .map(|i| (seqs[i], format!("ahash{}", i + 1)))
                    .max()
                    .unwrap()
                    .1;
                assert_eq!(
                    cluster.nodes[idx].node_id(),
                    expect,
                    "seqs {seqs:?} must elect {expect}"
                );
                sim.shutdown();
            }
        }
    }
}

#[test]
fn deposed_master_discards_unreplicated_tail_on_rejoin() {
    let sim = Sim::new(19);
    let registry = DiskRegistry::new();
    let cluster = build_cluster(&sim, 3, &registry, |_, _| {});
    let master = wait_for_master(&sim, &cluster, secs(10.0));
    let port = sim.driver_port("CN=librarian");
    lib_call(&port, &cluster.urls[master], "change", set_req("base", "k", "v")).unwrap();
    sim.run_for(secs(1.0));

    // Cut the master off: its next write appends locally but cannot reach
    // either replica, so it is never acknowledged.
    let master_host = format!("ahash{}", master + 1);
    let others: Vec<String> = (0..3)
        .filter(|i| *i != master)
        .map(|i| format!("ahash{}", i + 1))
        .collect();
    sim.partition(&[vec![master_host.clone()], others.clone()]);
    let err = lib_call(&port, &cluster.urls[master], "change", set_req("lost", "k", "v"));
    assert!(err.is_err(), "isolated master cannot confirm a majority");
    let stale_seq = cluster.nodes[master].view().last_applied;

    // The majority side elects and accepts new writes.
    let deadline = sim.now() + secs(20.0);
    let new_master = loop {
        if let Some(idx) = master_index(&cluster) {
            if idx != master && cluster.nodes[idx].view().role == Role::Master {
                break idx;
            }
        }
        assert!(sim.now() < deadline, "majority side never elected");
        sim.run_for(secs(0.5));
    };
    lib_call(&port, &cluster.urls[new_master], "change", set_req("fresh", "k", "v")).unwrap();

    // Heal: the deposed master rejoins as a client and truncates its
    // unreplicated tail in favor of the new history.
    sim.heal();
    sim.run_for(secs(15.0));
    let view = cluster.nodes[master].view();
    assert_eq!(view.role, Role::Client);
    let store = cluster.nodes[master].store_clone();
    assert!(store.get("lost").is_none(), "unacknowledged write discarded");
    assert!(store.get("fresh").is_some(), "new history adopted");
    assert!(view.last_applied >= stale_seq.saturating_sub(1));
    assert_eq!(
        store.canonical_bytes(),
        cluster.nodes[new_master].store_clone().canonical_bytes()
    );
    sim.shutdown();
}

#[test]
fn restart_recovers_last_applied_exactly() {
    let registry = DiskRegistry::new();
    {
        let disk = registry.disk("solo");
        disk.save_vote(2, None);
        let mut store = ObjectStore::new();
        for seq in 1..=7 {
            let e = LogEntry {
                seq,
                term: 2,
                batch: vec![ChangeRequest::set("o", "s", &format!("k{seq}"), "v")],
            };
            store.apply(&e.batch);
            disk.append_entry(&e);
        }
        disk.save_snapshot(5, &{
            let mut s = ObjectStore::new();
            for seq in 1..=5 {
                s.apply(&[ChangeRequest::set("o", "s", &format!("k{seq}"), "v")]);
            }
            s
        });
    }
    let loaded = registry.disk("solo").load();
    assert_eq!(loaded.snapshot_seq, 5);
    assert_eq!(loaded.entries.len(), 2);
}
