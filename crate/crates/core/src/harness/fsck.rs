//! Integrity oracle: an independent brute-force walk over raw store
//! contents that rebuilds the namespace tree and replica tallies and
//! cross-checks them against what the services report. Runs on quiescent
//! deployments; it deliberately shares no code with the traversal path it
//! checks.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::ahash::store::ObjectStore;
use crate::meta::{
    shepherd_index_id, split_location_key, ReplicaState, REGISTRY_ID, ROOT_GUID,
};

use super::deploy::Deployment;

#[derive(Debug, Default)]
pub struct FsckReport {
    pub errors: Vec<String>,
    pub reachable_entries: usize,
    pub files: usize,
    pub replicas_alive: usize,
}

impl FsckReport {
    pub fn ok(&self) -> bool {
        self.errors.is_empty()
    }

    fn err(&mut self, msg: String) {
        self.errors.push(msg);
    }
}

fn is_system_object(id: &str) -> bool {
    id == REGISTRY_ID || id == "ahash-nodes" || id.starts_with("shepherd-replicas ")
}

/// Walk one raw store dump.
pub fn check_store(store: &ObjectStore, expect_replicas_converged: bool) -> FsckReport {
    let mut report = FsckReport::default();

    // Rebuild the tree from the root by raw section access.
    let mut reachable: BTreeSet<String> = BTreeSet::new();
    let mut referenced_by: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut queue: VecDeque<String> = VecDeque::new();
    if store.get(ROOT_GUID).is_none() {
        report.err("no root collection object".to_string());
        return report;
    }
    queue.push_back(ROOT_GUID.to_string());
    reachable.insert(ROOT_GUID.to_string());
    while let Some(guid) = queue.pop_front() {
        let Some(obj) = store.get(&guid) else {
            report.err(format!("dangling link target {guid}"));
            continue;
        };
        let entry_type = obj
            .get("states")
            .and_then(|s| s.get("type"))
            .cloned()
            .unwrap_or_default();
        if entry_type.is_empty() {
            report.err(format!("{guid} has no entry type"));
        }
        if let Some(entries) = obj.get("entries") {
            if entry_type != "collection" {
                report.err(format!("{guid} is a {entry_type} with child entries"));
            }
            for (name, value) in entries {
                if name.contains('/') || name.is_empty() {
                    report.err(format!("{guid} has invalid child name {name:?}"));
                }
                let Some((child, _t)) = value.split_once('|') else {
                    report.err(format!("{guid} child {name} has malformed value"));
                    continue;
                };
                referenced_by
                    .entry(child.to_string())
                    .or_default()
                    .push(format!("{guid}/{name}"));
                if reachable.insert(child.to_string()) {
                    queue.push_back(child.to_string());
                }
            }
        }
    }
    report.reachable_entries = reachable.len();

    // Single-reference rule: every entry except the root is linked exactly
    // once (hard links are not permitted).
    for (guid, refs) in &referenced_by {
        if refs.len() > 1 {
            report.err(format!("{guid} linked {} times: {refs:?}", refs.len()));
        }
    }

    // Orphans: non-system objects unreachable from the root.
    for id in store.object_ids() {
        if !is_system_object(id) && !reachable.contains(id) {
            report.err(format!("orphan object {id}"));
        }
    }

    // Replica accounting per file, plus the location/index cross-check.
    let mut index_view: BTreeMap<(String, String), (String, String)> = BTreeMap::new();
    let registry = store.get(REGISTRY_ID);
    let shepherd_urls: Vec<String> = registry
        .map(|r| r.keys().cloned().collect())
        .unwrap_or_default();
    for url in &shepherd_urls {
        if let Some(index) = store.get(&shepherd_index_id(url)) {
            if let Some(entries) = index.get("replicas") {
                for (reference, value) in entries {
                    let mut parts = value.split('|');
                    let guid = parts.next().unwrap_or_default().to_string();
                    let _size = parts.next();
                    let state = parts.next().unwrap_or_default().to_string();
                    index_view.insert((url.clone(), reference.clone()), (guid, state));
                }
            }
        }
    }

    let mut seen_locations: BTreeSet<(String, String)> = BTreeSet::new();
    for guid in &reachable {
        let Some(obj) = store.get(guid) else { continue };
        let entry_type = obj.get("states").and_then(|s| s.get("type"));
        if entry_type.map(String::as_str) != Some("file") {
            continue;
        }
        report.files += 1;
        let needed: usize = obj
            .get("states")
            .and_then(|s| s.get("neededReplicas"))
            .and_then(|v| v.parse().ok())
            .unwrap_or(0);
        let mut alive_shepherds = BTreeSet::new();
        let mut alive = 0usize;
        for (key, state) in obj.get("locations").into_iter().flatten() {
            let Some((shep, reference)) = split_location_key(key) else {
                report.err(format!("file {guid} has malformed location key {key}"));
                continue;
            };
            seen_locations.insert((shep.to_string(), reference.to_string()));
            let state = ReplicaState::parse(state);
            if state == Some(ReplicaState::Alive) {
                alive += 1;
                report.replicas_alive += 1;
                if !alive_shepherds.insert(shep.to_string()) {
                    report.err(format!(
                        "file {guid} has two ALIVE replicas on {shep}"
                    ));
                }
            }
            // Index agreement (CREATING may predate its first report).
            match index_view.get(&(shep.to_string(), reference.to_string())) {
                Some((idx_guid, idx_state)) => {
                    if idx_guid != guid {
                        report.err(format!(
                            "index on {shep} maps {reference} to {idx_guid}, location says {guid}"
                        ));
                    } else if state.map(|s| s.as_str().to_string())
                        != Some(idx_state.clone())
                    {
                        report.err(format!(
                            "index state mismatch for {guid} on {shep}: location {state:?}, index {idx_state}"
                        ));
                    }
                }
                None => {
                    if state != Some(ReplicaState::Creating) {
                        report.err(format!(
                            "location {key} of {guid} missing from shepherd index"
                        ));
                    }
                }
            }
        }
        if expect_replicas_converged && alive != needed {
            report.err(format!(
                "file {guid} has {alive} ALIVE replicas, needs {needed}"
            ));
        }
    }

    // Stale index entries: indexed replicas whose file location vanished.
    for ((shep, reference), (guid, _state)) in &index_view {
        if !seen_locations.contains(&(shep.clone(), reference.clone())) {
            report.err(format!(
                "index on {shep} lists {reference} (guid {guid}) with no matching location"
            ));
        }
    }

    report
}

/// Full oracle over a deployment: store convergence across replicas, raw
/// walk, and agreement between shepherd-local tables and the store.
pub fn check_deployment(deployment: &Deployment, expect_converged: bool) -> FsckReport {
    // Byte-identical canonical serialization across live replicas.
    let mut dumps: Vec<(String, ObjectStore)> = Vec::new();
    for (node, host) in deployment
        .ahash_nodes
        .iter()
        .zip(&deployment.ahash_hosts)
    {
        if deployment.sim.is_alive(host) {
            dumps.push((host.clone(), node.store_clone()));
        }
    }
    let mut report = match dumps.first() {
        Some((_, store)) => check_store(store, expect_converged),
        None => {
            let mut r = FsckReport::default();
            r.err("no live store replica".to_string());
            return r;
        }
    };
    let reference_bytes = dumps[0].1.canonical_bytes();
    for (host, store) in &dumps[1..] {
        if store.canonical_bytes() != reference_bytes {
            report.err(format!(
                "store on {host} diverges from {}",
                dumps[0].0
            ));
        }
    }

    // Shepherd-local truth against the namespace view.
    let store = &dumps[0].1;
    for ((shep_arc, host), url) in deployment
        .shepherds
        .iter()
        .zip(&deployment.shepherd_hosts)
        .zip(&deployment.shepherd_urls)
    {
        if !deployment.sim.is_alive(host) {
            continue;
        }
        for (reference, rec) in shep_arc.records() {
            let file = store.get(&rec.guid);
            let loc_state = file
                .and_then(|o| o.get("locations"))
                .and_then(|l| l.get(&crate::meta::location_key(url, &reference)))
                .cloned();
            match (&rec.state, loc_state) {
                (ReplicaState::Creating, None) => {} // registration in flight
                (local, Some(remote)) if local.as_str() == remote => {}
                (local, remote) => report.err(format!(
                    "{host}: replica {reference} of {} is {local:?} locally, {remote:?} in the store",
                    rec.guid
                )),
            }
        }
    }

    report
}
