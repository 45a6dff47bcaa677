//! State sampling: replica-state tallies as recorded in the store, without
//! touching the transport (the sampler must not disturb message counts).

use std::collections::BTreeMap;

use crate::ahash::store::ObjectStore;
use crate::meta::{split_location_key, ReplicaState, REGISTRY_ID};
use crate::vtime::Nanos;

use super::deploy::Deployment;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StateSample {
    pub at: Nanos,
    pub alive: u64,
    pub offline: u64,
    pub creating: u64,
    pub thirdwheel: u64,
    pub invalid: u64,
    pub per_shepherd: BTreeMap<String, u64>,
    pub messages: u64,
    pub bytes: u64,
}

impl StateSample {
    pub fn total(&self) -> u64 {
        self.alive + self.offline + self.creating + self.thirdwheel + self.invalid
    }
}

/// Count replica locations across every file object in a store.
pub fn count_states(store: &ObjectStore) -> StateSample {
    let mut sample = StateSample::default();
    for id in store.object_ids() {
        if id == REGISTRY_ID || id.starts_with("shepherd-replicas ") || id == "ahash-nodes" {
            continue;
        }
        let Some(obj) = store.get(id) else { continue };
        let Some(locations) = obj.get("locations") else {
            continue;
        };
        for (key, state) in locations {
            let Some(state) = ReplicaState::parse(state) else {
                continue;
            };
            match state {
                ReplicaState::Alive => sample.alive += 1,
                ReplicaState::Offline => sample.offline += 1,
                ReplicaState::Creating => sample.creating += 1,
                ReplicaState::Thirdwheel => sample.thirdwheel += 1,
                ReplicaState::Invalid => sample.invalid += 1,
            }
            if let Some((shep, _)) = split_location_key(key) {
                *sample.per_shepherd.entry(shep.to_string()).or_insert(0) += 1;
            }
        }
    }
    sample
}

/// Sample the deployment off the first live store replica.
pub fn take_sample(deployment: &Deployment) -> StateSample {
    let store = deployment
        .ahash_nodes
        .iter()
        .zip(&deployment.ahash_hosts)
        .find(|(_, host)| deployment.sim.is_alive(host))
        .map(|(node, _)| node.store_clone())
        .unwrap_or_default();
    let mut sample = count_states(&store);
    sample.at = deployment.sim.now();
    let stats = deployment.sim.stats();
    sample.messages = stats.message_count;
    sample.bytes = stats.bytes_sent;
    sample
}
