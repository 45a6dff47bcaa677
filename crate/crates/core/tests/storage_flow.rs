//! Whole-system behavior on the simulation transport: namespace
//! operations, transfers, replication fan-out, repair, policies, mounts.

use chelonia::client::{GetOutcome, StorageClient, Transport};
use chelonia::content::Content;
use chelonia::harness::deploy::{Deployment, TopologySpec};
use chelonia::harness::fsck;
use chelonia::harness::sample::take_sample;
use chelonia::hed::envelope::codes;
use chelonia::meta::ReplicaState;
use chelonia::vtime::secs;

fn small_deployment(seed: u64, shepherds: usize, needed: u32) -> Deployment {
    let spec = TopologySpec {
        seed,
        ahash_nodes: 1,
        librarians: 1,
        bartenders: 1,
        shepherds,
        shepherd_capacity: 10_000_000_000,
        default_needed: needed,
        heartbeat_period: secs(15.0),
        grace: secs(5.0),
        monitor_period: secs(5.0),
        check_period: secs(20.0),
        ..TopologySpec::default()
    };
    let d = Deployment::build(spec);
    d.wait_for_master(secs(10.0));
    d.run_for(secs(2.0));
    d
}

#[test]
fn mkdir_put_get_roundtrip_preserves_bytes() {
    let d = small_deployment(21, 2, 2);
    let client = d.driver_client("CN=user");
    client.mkdir("/user").unwrap();
    client.mkdir("/user/me").unwrap();

    for (name, content) in [
        ("empty.bin", Content::Bytes(Vec::new())),
        ("one.bin", Content::Bytes(vec![42])),
        ("orange.jpg", Content::Bytes((0..200_000u32).map(|i| i as u8).collect())),
    ] {
        let ln = format!("/user/me/{name}");
        client.put(&ln, content.clone(), Some(2)).unwrap();
        match client.get(&ln).unwrap() {
            GetOutcome::Data(got) => assert_eq!(got.materialize(), content.materialize(), "{ln}"),
            other => panic!("expected data, got {other:?}"),
        }
    }
    // Replication to the second shepherd settles within a few periods.
    d.run_for(secs(60.0));
    let sample = take_sample(&d);
    assert_eq!(sample.alive, 6, "3 files x 2 replicas");
    let report = fsck::check_deployment(&d, true);
    assert!(report.ok(), "fsck: {:?}", report.errors);
    d.shutdown();
}

#[test]
fn namespace_errors_are_stable() {
    let d = small_deployment(22, 1, 1);
    let client = d.driver_client("CN=user");
    client.mkdir("/a").unwrap();
    assert_eq!(client.mkdir("/a").unwrap_err().code, codes::NAME_TAKEN);
    assert_eq!(
        client.mkdir("/missing/sub").unwrap_err().code,
        codes::PARENT_MISSING
    );
    assert_eq!(client.stat("/missing").unwrap_err().code, codes::NOT_FOUND);
    assert_eq!(
        client
            .put("/missing/f", Content::Bytes(vec![1]), None)
            .unwrap_err()
            .code,
        codes::PARENT_MISSING
    );
    client.put("/a/f", Content::Bytes(vec![1, 2, 3]), Some(1)).unwrap();
    assert_eq!(client.rmdir("/a").unwrap_err().code, codes::NOT_EMPTY);
    assert_eq!(client.rmdir("/a/f").unwrap_err().code, codes::NOT_A_COLLECTION);
    assert_eq!(client.del("/a").unwrap_err().code, codes::NOT_A_FILE);

    // move preserves the GUID; delete makes the name unresolvable.
    client.mkdir("/b").unwrap();
    let guid_before = client.stat("/a/f").unwrap().get_str("guid").unwrap().to_string();
    client.mv("/a/f", "/b/f").unwrap();
    let guid_after = client.stat("/b/f").unwrap().get_str("guid").unwrap().to_string();
    assert_eq!(guid_before, guid_after);
    assert_eq!(client.stat("/a/f").unwrap_err().code, codes::NOT_FOUND);
    client.del("/b/f").unwrap();
    assert_eq!(client.stat("/b/f").unwrap_err().code, codes::NOT_FOUND);
    client.rmdir("/b").unwrap();
    assert_eq!(client.list("/b").unwrap_err().code, codes::NOT_FOUND);
    d.shutdown();
}

#[test]
fn mountpoints_resolve_to_external_urls() {
    let d = small_deployment(23, 1, 1);
    let client = d.driver_client("CN=user");
    client.mkdir("/my").unwrap();
    client.mount("/my/dCache", "ext://dcache.example").unwrap();
    match client.get("/my/dCache/fruits/apple.jpg").unwrap() {
        GetOutcome::External(url) => assert_eq!(url, "ext://dcache.example/fruits/apple.jpg"),
        other => panic!("expected external url, got {other:?}"),
    }
    // Mounting over an existing name is refused.
    assert_eq!(
        client.mount("/my/dCache", "ext://other").unwrap_err().code,
        codes::NAME_TAKEN
    );
    // Unmounting (delFile on the mountpoint) makes external paths vanish.
    client.del("/my/dCache").unwrap();
    assert_eq!(
        client.get("/my/dCache/fruits/apple.jpg").unwrap_err().code,
        codes::NOT_FOUND
    );
    d.shutdown();
}

#[test]
fn policy_denies_untrusted_identities_every_operation() {
    let d = small_deployment(24, 1, 1);
    let owner = d.driver_client("CN=owner");
    owner.mkdir("/private").unwrap();

    // The default policy grants the creator everything and ANY read-only.
    let stranger = d.driver_client("CN=stranger");
    assert!(stranger.list("/private").is_ok(), "ANY may read by default");
    assert_eq!(
        stranger.mkdir("/private/sub").unwrap_err().code,
        codes::ACCESS_DENIED
    );
    assert_eq!(
        stranger
            .put("/private/f", Content::Bytes(vec![1]), None)
            .unwrap_err()
            .code,
        codes::ACCESS_DENIED
    );
    owner.put("/private/f", Content::Bytes(vec![1]), Some(1)).unwrap();
    assert_eq!(stranger.del("/private/f").unwrap_err().code, codes::ACCESS_DENIED);
    assert_eq!(
        stranger.mount("/private/m", "ext://x").unwrap_err().code,
        codes::ACCESS_DENIED
    );
    owner.mkdir("/pub").unwrap();
    assert_eq!(
        stranger.mv("/private/f", "/pub/f").unwrap_err().code,
        codes::ACCESS_DENIED
    );
    d.shutdown();
}

#[test]
fn ticket_is_single_use_and_expires() {
    let d = small_deployment(25, 1, 1);
    let client = d.driver_client("CN=user");
    client.mkdir("/t").unwrap();
    client.put("/t/f", Content::Bytes(b"payload".to_vec()), Some(1)).unwrap();

    // Redeem a download ticket twice: the second access is refused.
    let resp = client.stat("/t/f").unwrap();
    assert_eq!(resp.get_int("size"), Some(7));
    let turl = {
        let r = client
            .transport
            .call("get_file", chelonia::codec::Msg::map().str_field("ln", "/t/f").build())
            .unwrap();
        r.get_str("turl").unwrap().to_string()
    };
    assert!(client.transport.transfer(&turl, None).is_ok());
    let second = client.transport.transfer(&turl, None);
    assert!(second.is_err(), "second redemption must be refused");

    // An expired ticket (ttl passed in virtual time) is refused too.
    let turl = {
        let r = client
            .transport
            .call("get_file", chelonia::codec::Msg::map().str_field("ln", "/t/f").build())
            .unwrap();
        r.get_str("turl").unwrap().to_string()
    };
    d.run_for(secs(301.0));
    assert!(client.transport.transfer(&turl, None).is_err());
    d.shutdown();
}

#[test]
fn killed_shepherd_replicas_go_offline_then_repair_then_thirdwheel() {
    let d = small_deployment(26, 3, 2);
    let client = d.driver_client("CN=user");
    client.mkdir("/data").unwrap();
    for i in 0..4 {
        client
            .put(
                &format!("/data/f{i}"),
                Content::synthetic(100 + i, 1_000_000),
                Some(2),
            )
            .unwrap();
    }
    d.run_for(secs(90.0));
    let sample = take_sample(&d);
    assert_eq!(sample.alive, 8, "4 files x 2 replicas before the kill");

    // Kill the shepherd holding some replicas; the librarian marks them
    // OFFLINE after one heartbeat period + grace, and the survivors repair.
    let victim = d.shepherd_hosts[0].clone();
    let victim_url = d.shepherd_urls[0].clone();
    d.sim.kill(&victim);
    d.run_for(secs(30.0));
    let sample = take_sample(&d);
    assert!(sample.offline > 0, "dead shepherd's replicas are OFFLINE");
    d.run_for(secs(120.0));
    let sample = take_sample(&d);
    assert_eq!(sample.alive, 8, "repair restored the replica count");
    assert_eq!(
        sample.per_shepherd.get(&victim_url).copied().unwrap_or(0),
        sample.offline,
        "only the dead shepherd's replicas stay OFFLINE"
    );

    // Restart: its replicas come back ALIVE, surplus turns THIRDWHEEL and
    // is eventually deleted; the system returns to exactly 8 ALIVE.
    d.sim.restart(&victim);
    d.run_for(secs(200.0));
    let sample = take_sample(&d);
    assert_eq!(sample.alive, 8, "back to target replica count");
    assert_eq!(sample.offline, 0);
    assert_eq!(sample.thirdwheel, 0);
    let report = fsck::check_deployment(&d, true);
    assert!(report.ok(), "fsck: {:?}", report.errors);
    d.shutdown();
}

#[test]
fn corrupted_replica_is_invalidated_replaced_and_never_served() {
    let d = small_deployment(27, 3, 2);
    let client = d.driver_client("CN=user");
    client.mkdir("/c").unwrap();
    let body = Content::Bytes((0..10_000u32).map(|i| (i * 7) as u8).collect());
    client.put("/c/f", body.clone(), Some(2)).unwrap();
    d.run_for(secs(90.0));
    assert_eq!(take_sample(&d).alive, 2, "both replicas settled");

    // Flip a byte in one stored replica, wherever it landed.
    let mut corrupted = false;
    'outer: for shep in &d.shepherds {
        for (reference, rec) in shep.records() {
            if rec.state == ReplicaState::Alive {
                corrupted = shep.store_handle().corrupt(&reference, 100, 0x01);
                break 'outer;
            }
        }
    }
    assert!(corrupted, "no stored replica found to corrupt");

    // A download between corruption and scrub must not serve bad bytes.
    match client.get("/c/f") {
        Ok(GetOutcome::Data(got)) => {
            assert_eq!(got.materialize(), body.materialize(), "served bytes match checksum")
        }
        Ok(other) => panic!("unexpected outcome {other:?}"),
        Err(e) => assert_ne!(e.code, "", "refusal is acceptable: {e}"),
    }

    // The scrub marks it INVALID and a fresh replica replaces it.
    d.run_for(secs(150.0));
    let sample = take_sample(&d);
    assert_eq!(sample.alive, 2, "replaced by a valid replica");
    assert_eq!(sample.invalid, 0, "invalid replica removed");
    match client.get("/c/f").unwrap() {
        GetOutcome::Data(got) => assert_eq!(got.materialize(), body.materialize()),
        other => panic!("expected data, got {other:?}"),
    }
    let report = fsck::check_deployment(&d, true);
    assert!(report.ok(), "fsck: {:?}", report.errors);
    d.shutdown();
}

#[test]
fn no_eligible_shepherd_when_all_hold_the_file() {
    let d = small_deployment(28, 2, 2);
    let client = d.driver_client("CN=user");
    client.mkdir("/x").unwrap();
    client.put("/x/f", Content::Bytes(vec![9; 64]), Some(3)).unwrap();
    // needed=3 but only 2 shepherds exist: repair stalls at 2 ALIVE
    // replicas on distinct shepherds without thrashing.
    d.run_for(secs(120.0));
    let sample = take_sample(&d);
    assert_eq!(sample.alive, 2);
    assert_eq!(sample.creating, 0, "no futile creations linger");
    d.shutdown();
}

#[test]
fn statelessness_librarian_and_bartender_restart_loses_nothing() {
    let spec = TopologySpec {
        seed: 29,
        ahash_nodes: 1,
        librarians: 2,
        bartenders: 2,
        shepherds: 2,
        default_needed: 1,
        heartbeat_period: secs(15.0),
        grace: secs(5.0),
        monitor_period: secs(5.0),
        check_period: secs(20.0),
        ..TopologySpec::default()
    };
    let d = Deployment::build(spec);
    d.wait_for_master(secs(10.0));
    d.run_for(secs(2.0));
    let client = d.driver_client("CN=user");
    client.mkdir("/s").unwrap();
    client.put("/s/f", Content::Bytes(vec![1, 2]), Some(1)).unwrap();

    d.sim.kill(&d.librarian_hosts[0]);
    d.sim.kill(&d.bartender_hosts[0]);
    d.sim.restart(&d.librarian_hosts[0]);
    d.sim.restart(&d.bartender_hosts[0]);
    d.run_for(secs(5.0));

    // Any bartender over any librarian gives identical answers.
    let again = d.driver_client("CN=user");
    let listing = again.list("/s").unwrap();
    assert!(listing.contains_key("f"));
    match again.get("/s/f").unwrap() {
        GetOutcome::Data(got) => assert_eq!(got.materialize(), vec![1, 2]),
        other => panic!("{other:?}"),
    }
    d.shutdown();
}
