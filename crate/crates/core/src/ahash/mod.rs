//! The replicated object store.
//!
//! A deployment runs N nodes. One node is the writable master; all nodes
//! serve reads. A write batch commits as one log entry: the master appends
//! locally, replicates to every live peer, and acknowledges the caller only
//! after each live replica confirmed application. Liveness is tracked by
//! master pings; a replica that misses a confirmation is excluded as
//! catching-up until it re-syncs.
//!
//! When the master becomes unreachable for longer than `master_timeout`,
//! any node polls all peers for an election. With grants from a majority of
//! the node list, the winner is the participant with the greatest
//! `(last_term, last_applied, node_id)`; a candidate that polled the
//! majority but did not win nominates the winner. Terms make each election
//! single-winner, and a master holds its role on a lease shorter than the
//! election timeout, so a partitioned master steps down before a successor
//! can exist.
//!
//! The node list itself lives in the store (object `ahash-nodes`), so
//! membership is self-describing and replicates like any other object.

pub mod client;
pub mod log;
pub mod store;

use std::collections::{BTreeMap, VecDeque};
use std::sync::{Arc, Weak};

use parking_lot::Mutex;

use crate::codec::Msg;
use crate::hed::envelope::{codes, CallError, ServiceError};
use crate::hed::{BackgroundTask, CallCtx, Runtime, Service};
use crate::vtime::{secs, Nanos};

use log::{LogEntry, NodeStorage};
use store::{object_to_msg, ChangeOutcome, ChangeRequest, ObjectStore};

/// Store object holding the replicated node list.
pub const NODE_LIST_ID: &str = "ahash-nodes";
pub const NODE_LIST_SECTION: &str = "nodes";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Master,
    Client,
    Candidate,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Master => "MASTER",
            Role::Client => "CLIENT",
            Role::Candidate => "CANDIDATE",
        }
    }
}

#[derive(Debug, Clone)]
pub struct AHashConfig {
    pub node_id: String,
    pub self_url: String,
    /// node id -> service url; includes this node. Used until the
    /// replicated node-list object exists.
    pub initial_peers: BTreeMap<String, String>,
    pub master_timeout: Nanos,
    pub ping_interval: Nanos,
    /// Stagger of the periodic tick, so node timers interleave predictably.
    pub tick_phase: Nanos,
    /// Delay before a booting node with no known master forces an election.
    pub startup_election_delay: Nanos,
    pub election_backoff: Nanos,
    pub snapshot_every: u64,
}

impl AHashConfig {
    pub fn new(node_id: &str, self_url: &str, initial_peers: BTreeMap<String, String>) -> Self {
        AHashConfig {
            node_id: node_id.to_string(),
            self_url: self_url.to_string(),
            initial_peers,
            master_timeout: secs(10.0),
            ping_interval: secs(1.0),
            tick_phase: 0,
            startup_election_delay: secs(1.0),
            election_backoff: secs(1.0),
            snapshot_every: 512,
        }
    }

    fn lease(&self) -> Nanos {
        // Strictly below master_timeout by more than two tick periods: a
        // cut-off master demotes itself before the remaining majority can
        // elect a successor, even with timers firing at tick granularity
        // (demotion happens by lease + one tick; an election starts no
        // earlier than master_timeout after the last contact).
        assert!(
            self.master_timeout >= 4 * self.ping_interval,
            "master_timeout must be at least 4x ping_interval"
        );
        self.master_timeout - 2 * self.ping_interval
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct PeerTrack {
    last_ack: Nanos,
    acked_seq: u64,
    catching_up: bool,
}

/// One master tenure, for the harness safety checker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Reign {
    pub term: u64,
    pub start: Nanos,
    pub end: Option<Nanos>,
}

struct NodeState {
    incarnation: u64,
    role: Role,
    term: u64,
    voted_for: Option<(u64, String)>,
    master: Option<String>,
    store: ObjectStore,
    snapshot: ObjectStore,
    snapshot_seq: u64,
    entries: VecDeque<LogEntry>,
    last_applied: u64,
    commit_seq: u64,
    peer_track: BTreeMap<String, PeerTrack>,
    last_majority_ack: Nanos,
    last_master_contact: Nanos,
    election_due: Nanos,
    writing: bool,
}

impl NodeState {
    fn last_term(&self) -> u64 {
        self.entries.back().map(|e| e.term).unwrap_or(0)
    }

    fn log_term_at(&self, seq: u64) -> Option<u64> {
        if seq == 0 {
            return Some(0);
        }
        if seq <= self.snapshot_seq {
            return None; // compacted; matches by definition of committed
        }
        self.entries
            .iter()
            .find(|e| e.seq == seq)
            .map(|e| e.term)
    }
}

pub struct AHashNode {
    cfg: AHashConfig,
    storage: Arc<dyn NodeStorage>,
    st: Mutex<NodeState>,
    reigns: Mutex<Vec<Reign>>,
    weak_self: Weak<AHashNode>,
}

#[derive(Debug, Clone)]
pub struct NodeView {
    pub node_id: String,
    pub role: Role,
    pub term: u64,
    pub last_applied: u64,
    pub commit_seq: u64,
    pub master: Option<String>,
}

impl AHashNode {
    pub fn new(cfg: AHashConfig, storage: Arc<dyn NodeStorage>) -> Arc<AHashNode> {
        Arc::new_cyclic(|weak_self| AHashNode {
            weak_self: weak_self.clone(),
            cfg,
            storage,
            st: Mutex::new(NodeState {
                incarnation: 0,
                role: Role::Client,
                term: 0,
                voted_for: None,
                master: None,
                store: ObjectStore::new(),
                snapshot: ObjectStore::new(),
                snapshot_seq: 0,
                entries: VecDeque::new(),
                last_applied: 0,
                commit_seq: 0,
                peer_track: BTreeMap::new(),
                last_majority_ack: 0,
                last_master_contact: 0,
                election_due: 0,
                writing: false,
            }),
            reigns: Mutex::new(Vec::new()),
        })
    }

    pub fn view(&self) -> NodeView {
        let st = self.st.lock();
        NodeView {
            node_id: self.cfg.node_id.clone(),
            role: st.role,
            term: st.term,
            last_applied: st.last_applied,
            commit_seq: st.commit_seq,
            master: st.master.clone(),
        }
    }

    /// Master tenures observed so far (inclusive start, exclusive end).
    pub fn reigns(&self) -> Vec<Reign> {
        self.reigns.lock().clone()
    }

    /// Fault-injection bookkeeping: a killed process reigns over nothing,
    /// so the harness closes any open tenure at the kill instant.
    pub fn mark_stopped(&self, at: Nanos) {
        self.end_reign(at);
    }

    /// Zero-message snapshot of the store, for harness oracles.
    pub fn store_clone(&self) -> ObjectStore {
        self.st.lock().store.clone()
    }

    pub fn node_id(&self) -> &str {
        &self.cfg.node_id
    }

    fn peers(&self, st: &NodeState) -> BTreeMap<String, String> {
        match st.store.get(NODE_LIST_ID).and_then(|o| o.get(NODE_LIST_SECTION)) {
            Some(nodes) if !nodes.is_empty() => nodes
                .iter()
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            _ => self.cfg.initial_peers.clone(),
        }
    }

    fn majority(&self, st: &NodeState) -> usize {
        self.peers(st).len() / 2 + 1
    }

    fn url_of(&self, st: &NodeState, node_id: &str) -> Option<String> {
        self.peers(st).get(node_id).cloned()
    }

    fn begin_reign(&self, term: u64, now: Nanos) {
        self.reigns.lock().push(Reign {
            term,
            start: now,
            end: None,
        });
    }

    fn end_reign(&self, now: Nanos) {
        if let Some(last) = self.reigns.lock().last_mut() {
            if last.end.is_none() {
                last.end = Some(now);
            }
        }
    }

    fn step_down(&self, st: &mut NodeState, now: Nanos, new_term: u64, master: Option<String>) {
        if st.role == Role::Master {
            self.end_reign(now);
        }
        if new_term > st.term {
            st.term = new_term;
            st.voted_for = None;
            self.storage.save_vote(st.term, None);
        }
        st.role = Role::Client;
        st.master = master;
        if st.master.is_some() {
            st.last_master_contact = now;
        }
    }

    /// Append an entry created by this master and apply it locally.
    fn append_local(&self, st: &mut NodeState, entry: LogEntry) {
        self.storage.append_entry(&entry);
        st.store.apply(&entry.batch);
        st.last_applied = entry.seq;
        st.entries.push_back(entry);
    }

    /// Rebuild state to `seq` from snapshot + log, dropping the tail.
    fn revert_to(&self, st: &mut NodeState, seq: u64) {
        assert!(
            seq >= st.snapshot_seq,
            "cannot revert below snapshot ({} < {})",
            seq,
            st.snapshot_seq
        );
        let mut store = st.snapshot.clone();
        for e in st.entries.iter().filter(|e| e.seq <= seq) {
            store.apply(&e.batch);
        }
        st.entries.retain(|e| e.seq <= seq);
        st.store = store;
        st.last_applied = seq;
        self.storage.truncate_from(seq + 1);
    }

    fn maybe_snapshot(&self, st: &mut NodeState) {
        if st.commit_seq == st.last_applied
            && st.last_applied - st.snapshot_seq >= self.cfg.snapshot_every
        {
            st.snapshot = st.store.clone();
            st.snapshot_seq = st.last_applied;
            st.entries.clear();
            self.storage.save_snapshot(st.snapshot_seq, &st.snapshot);
        }
    }

    /// Pull entries `from..` from a peer, resolving term conflicts by
    /// truncating the local uncommitted tail. Returns false on transport
    /// failure.
    fn sync_from(&self, rt: &dyn Runtime, trace: u64, source_url: &str, from: u64) -> bool {
        let payload = Msg::map().int_field("from", from as i64).build();
        let resp = match rt.call_raw(trace, source_url, "fetch_log", payload) {
            Ok(m) => m,
            Err(_) => return false,
        };
        let mut st = self.st.lock();
        // The source is the current master: a local tail it does not have
        // is unacknowledged history and must be discarded.
        if let Some(src_last) = resp.get_int("last_seq").map(|v| v as u64) {
            if st.last_applied > src_last
                && src_last >= st.commit_seq
                && src_last >= st.snapshot_seq
            {
                self.revert_to(&mut st, src_last);
            }
        }
        if let Some(snap_store) = resp
            .as_map()
            .and_then(|m| m.get("snapshot"))
            .and_then(ObjectStore::from_msg)
        {
            let snap_seq = resp.get_int("snapshot_seq").unwrap_or(0) as u64;
            if snap_seq > st.last_applied {
                st.snapshot = snap_store.clone();
                st.snapshot_seq = snap_seq;
                st.store = snap_store;
                st.last_applied = snap_seq;
                st.commit_seq = st.commit_seq.max(snap_seq);
                st.entries.clear();
                self.storage.save_snapshot(snap_seq, &st.snapshot);
            }
        }
        for entry in resp.get("entries").as_list().unwrap_or(&[]) {
            let Some(e) = LogEntry::from_msg(entry) else {
                continue;
            };
            if e.seq <= st.last_applied {
                match st.log_term_at(e.seq) {
                    Some(t) if t == e.term => continue, // already have it
                    None => continue,                   // compacted == committed
                    Some(_) => {
                        // Conflicting uncommitted tail: discard ours.
                        self.revert_to(&mut st, e.seq - 1);
                    }
                }
            }
            if e.seq == st.last_applied + 1 {
                self.append_local(&mut st, e);
            }
        }
        true
    }

    /// Commit a batch as master. Replicates to every live peer and requires
    /// self + confirmations to reach a majority.
    fn master_commit(
        &self,
        rt: &dyn Runtime,
        trace: u64,
        batch: BTreeMap<String, ChangeRequest>,
    ) -> Result<(BTreeMap<String, ChangeOutcome>, u64), ServiceError> {
        // Writer gate: one write pipeline per node. Cooperative wait, since
        // the state lock must not be held across calls.
        let incarnation = loop {
            let mut st = self.st.lock();
            if st.role != Role::Master {
                return Err(self.not_master_err(&st));
            }
            if !st.writing {
                st.writing = true;
                break st.incarnation;
            }
            drop(st);
            rt.sleep(200_000);
        };
        let result = self.master_commit_gated(rt, trace, batch, incarnation);
        let mut st = self.st.lock();
        if st.incarnation == incarnation {
            st.writing = false;
        }
        result
    }

    fn not_master_err(&self, st: &NodeState) -> ServiceError {
        match &st.master {
            Some(m) if st.role == Role::Client => {
                let url = self.url_of(st, m).unwrap_or_default();
                ServiceError::with_data(codes::NOT_MASTER, "not the master", Msg::str(url))
            }
            _ => ServiceError::new(codes::NO_MASTER, "no master elected; writes unavailable"),
        }
    }

    fn master_commit_gated(
        &self,
        rt: &dyn Runtime,
        trace: u64,
        batch: BTreeMap<String, ChangeRequest>,
        incarnation: u64,
    ) -> Result<(BTreeMap<String, ChangeOutcome>, u64), ServiceError> {
        let now = rt.now();
        let (entry, outcomes, peers, term) = {
            let mut st = self.st.lock();
            if st.incarnation != incarnation || st.role != Role::Master {
                return Err(self.not_master_err(&st));
            }
            if now.saturating_sub(st.last_majority_ack) > self.cfg.lease() {
                let term = st.term;
                self.step_down(&mut st, now, term, None);
                return Err(ServiceError::new(
                    codes::NO_MASTER,
                    "master lease expired",
                ));
            }
            let (accepted, outcomes) = st.store.filter_batch(&batch);
            if accepted.is_empty() {
                let seq = st.last_applied;
                return Ok((outcomes, seq));
            }
            let entry = LogEntry {
                seq: st.last_applied + 1,
                term: st.term,
                batch: accepted,
            };
            self.append_local(&mut st, entry.clone());
            let peers = self.peers(&st);
            (entry, outcomes, peers, st.term)
        };

        // Replicate to all live peers; confirmation from each live replica
        // is required before acknowledging, and self + confirmations must
        // still form a majority.
        let prior_commit = {
            let st = self.st.lock();
            st.commit_seq
        };
        let mut confirmed = 1usize;
        for (peer_id, url) in &peers {
            if *peer_id == self.cfg.node_id {
                continue;
            }
            let live = {
                let st = self.st.lock();
                let track = st.peer_track.get(peer_id).copied().unwrap_or_default();
                !track.catching_up
                    && now.saturating_sub(track.last_ack) <= self.cfg.master_timeout
            };
            if !live {
                continue;
            }
            let payload = Msg::map()
                .field("entry", entry.to_msg())
                .int_field("commit", prior_commit as i64)
                .str_field("master", &self.cfg.node_id)
                .build();
            match rt.call_raw(trace, url, "replicate", payload) {
                Ok(resp) => {
                    let acked = resp.get_int("ack").unwrap_or(0) as u64;
                    let mut st = self.st.lock();
                    if st.incarnation != incarnation {
                        return Err(ServiceError::new(codes::NODE_DOWN, "node restarted"));
                    }
                    let track = st.peer_track.entry(peer_id.clone()).or_default();
                    track.last_ack = rt.now();
                    track.acked_seq = acked;
                    if acked >= entry.seq {
                        confirmed += 1;
                    } else {
                        track.catching_up = true;
                    }
                }
                Err(CallError::Remote(e)) if e.is(codes::NOT_FROM_MASTER) => {
                    // A higher term exists: step down immediately.
                    let higher = e.data.as_int().unwrap_or(0) as u64;
                    let mut st = self.st.lock();
                    if st.incarnation == incarnation {
                        let t = higher.max(st.term);
                        self.step_down(&mut st, rt.now(), t, None);
                    }
                    return Err(ServiceError::new(
                        codes::NO_MASTER,
                        "deposed during replication",
                    ));
                }
                Err(_) => {
                    let mut st = self.st.lock();
                    if st.incarnation == incarnation {
                        st.peer_track.entry(peer_id.clone()).or_default().catching_up = true;
                    }
                }
            }
        }

        let mut st = self.st.lock();
        if st.incarnation != incarnation || st.role != Role::Master || st.term != term {
            return Err(ServiceError::new(codes::NO_MASTER, "deposed during write"));
        }
        if confirmed < self.majority(&st) {
            return Err(ServiceError::new(
                codes::NO_QUORUM,
                "write not confirmed by a majority",
            ));
        }
        st.commit_seq = st.commit_seq.max(entry.seq);
        st.last_majority_ack = rt.now();
        self.maybe_snapshot(&mut st);
        Ok((outcomes, entry.seq))
    }

    fn become_master(&self, rt: &dyn Runtime, trace: u64, term: u64) {
        let now = rt.now();
        let (last_seq, last_term, commit, peers) = {
            let mut st = self.st.lock();
            if term < st.term || st.role == Role::Master {
                return;
            }
            st.term = term;
            self.storage.save_vote(st.term, st.voted_for.as_ref().map(|(_, v)| v.as_str()));
            st.role = Role::Master;
            st.master = Some(self.cfg.node_id.clone());
            st.last_majority_ack = now;
            st.last_master_contact = now;
            let peers = self.peers(&st);
            for peer_id in peers.keys() {
                if *peer_id != self.cfg.node_id {
                    // Optimistic: every peer starts live and in sync.
                    st.peer_track.insert(
                        peer_id.clone(),
                        PeerTrack {
                            last_ack: now,
                            acked_seq: 0,
                            catching_up: false,
                        },
                    );
                }
            }
            (st.last_applied, st.last_term(), st.commit_seq, peers)
        };
        self.begin_reign(term, now);
        for (peer_id, url) in &peers {
            if *peer_id == self.cfg.node_id {
                continue;
            }
            let payload = Msg::map()
                .int_field("term", term as i64)
                .str_field("master", &self.cfg.node_id)
                .int_field("last_seq", last_seq as i64)
                .int_field("last_entry_term", last_term as i64)
                .int_field("commit", commit as i64)
                .build();
            if let Ok(resp) = rt.call_raw(trace, url, "master_claim", payload) {
                if !resp.get("ok").as_bool().unwrap_or(false) {
                    let peer_term = resp.get_int("term").unwrap_or(0) as u64;
                    let mut st = self.st.lock();
                    if peer_term > st.term {
                        self.step_down(&mut st, rt.now(), peer_term, None);
                        return;
                    }
                }
            }
        }
        // Ensure the node list is stored once a master exists.
        let need_bootstrap = {
            let st = self.st.lock();
            st.role == Role::Master && st.store.get(NODE_LIST_ID).is_none()
        };
        if need_bootstrap {
            let mut batch = BTreeMap::new();
            for (i, (node_id, url)) in self.cfg.initial_peers.iter().enumerate() {
                batch.insert(
                    format!("n{i:03}"),
                    ChangeRequest::set(NODE_LIST_ID, NODE_LIST_SECTION, node_id, url),
                );
            }
            let _ = self.master_commit(rt, trace, batch);
        }
    }

    fn start_election(&self, rt: &dyn Runtime) {
        let trace = 0;
        let now = rt.now();
        let (term, peers, my_seq, my_last_term) = {
            let mut st = self.st.lock();
            if st.role == Role::Master {
                return;
            }
            let term = st.term + 1;
            st.term = term;
            st.voted_for = Some((term, self.cfg.node_id.clone()));
            self.storage.save_vote(term, Some(&self.cfg.node_id));
            st.role = Role::Candidate;
            st.master = None;
            st.election_due = now + self.cfg.election_backoff
                + rt.rand_u64() % self.cfg.election_backoff.max(1);
            (term, self.peers(&st), st.last_applied, st.last_term())
        };

        let mut participants: Vec<(u64, u64, String)> =
            vec![(my_last_term, my_seq, self.cfg.node_id.clone())];
        for (peer_id, url) in &peers {
            if *peer_id == self.cfg.node_id {
                continue;
            }
            let payload = Msg::map()
                .int_field("term", term as i64)
                .str_field("candidate", &self.cfg.node_id)
                .build();
            let Ok(resp) = rt.call_raw(trace, url, "elect_poll", payload) else {
                continue;
            };
            let peer_term = resp.get_int("term").unwrap_or(0) as u64;
            if peer_term > term {
                let mut st = self.st.lock();
                if peer_term > st.term {
                    self.step_down(&mut st, rt.now(), peer_term, None);
                }
                return;
            }
            if resp.get("granted").as_bool() == Some(true) {
                participants.push((
                    resp.get_int("last_term").unwrap_or(0) as u64,
                    resp.get_int("seq").unwrap_or(0) as u64,
                    resp.get_str("node").unwrap_or_default().to_string(),
                ));
            }
        }

        let majority = {
            let st = self.st.lock();
            if st.term != term {
                return; // superseded meanwhile
            }
            self.majority(&st)
        };
        if participants.len() < majority {
            // no-majority: stay candidate, retry after backoff.
            return;
        }
        let winner = participants
            .iter()
            .max()
            .expect("participants nonempty")
            .2
            .clone();
        if winner == self.cfg.node_id {
            self.become_master(rt, trace, term);
        } else {
            let url = {
                let st = self.st.lock();
                self.url_of(&st, &winner)
            };
            if let Some(url) = url {
                let payload = Msg::map()
                    .int_field("term", term as i64)
                    .str_field("winner", &winner)
                    .build();
                let _ = rt.call_raw(trace, &url, "nominate", payload);
            }
        }
    }

    /// Periodic maintenance: master pings and lease, client failure
    /// detection and elections.
    fn tick(&self, rt: &dyn Runtime) {
        let now = rt.now();
        let role = {
            let st = self.st.lock();
            st.role
        };
        match role {
            Role::Master => self.master_tick(rt, now),
            Role::Client | Role::Candidate => self.client_tick(rt, now),
        }
    }

    fn master_tick(&self, rt: &dyn Runtime, now: Nanos) {
        let (peers, term, commit, last_seq, last_term) = {
            let st = self.st.lock();
            if st.role != Role::Master {
                return;
            }
            (
                self.peers(&st),
                st.term,
                st.commit_seq,
                st.last_applied,
                st.last_term(),
            )
        };
        let mut acks = 0usize;
        for (peer_id, url) in &peers {
            if *peer_id == self.cfg.node_id {
                continue;
            }
            let payload = Msg::map()
                .int_field("term", term as i64)
                .str_field("master", &self.cfg.node_id)
                .int_field("commit", commit as i64)
                .int_field("last_seq", last_seq as i64)
                .int_field("last_entry_term", last_term as i64)
                .build();
            match rt.call_raw(0, url, "ping", payload) {
                Ok(resp) => {
                    let peer_term = resp.get_int("term").unwrap_or(0) as u64;
                    if peer_term > term {
                        let mut st = self.st.lock();
                        self.step_down(&mut st, rt.now(), peer_term, None);
                        return;
                    }
                    let seq = resp.get_int("seq").unwrap_or(0) as u64;
                    acks += 1;
                    let mut st = self.st.lock();
                    let track = st.peer_track.entry(peer_id.clone()).or_default();
                    track.last_ack = rt.now();
                    track.acked_seq = seq;
                    if seq >= last_seq {
                        track.catching_up = false;
                    }
                }
                Err(_) => {}
            }
        }
        let mut st = self.st.lock();
        if st.role != Role::Master {
            return;
        }
        if acks + 1 >= self.majority(&st) {
            st.last_majority_ack = rt.now();
        }
        if now.saturating_sub(st.last_majority_ack) > self.cfg.lease() {
            let term = st.term;
            self.step_down(&mut st, rt.now(), term, None);
            return;
        }
        self.maybe_snapshot(&mut st);
    }

    fn client_tick(&self, rt: &dyn Runtime, now: Nanos) {
        // Adopt an existing master if any peer knows one.
        let (master_known, contact_fresh, election_due, peers) = {
            let st = self.st.lock();
            (
                st.master.is_some(),
                now.saturating_sub(st.last_master_contact) <= self.cfg.master_timeout,
                st.election_due,
                self.peers(&st),
            )
        };
        if master_known && contact_fresh {
            return;
        }
        if !master_known {
            for (peer_id, url) in &peers {
                if *peer_id == self.cfg.node_id {
                    continue;
                }
                let Ok(resp) = rt.call_raw(0, url, "status", Msg::Null) else {
                    continue;
                };
                if resp.get_str("role") == Some("MASTER") {
                    let m = resp.get_str("node").unwrap_or_default().to_string();
                    let term = resp.get_int("term").unwrap_or(0) as u64;
                    let master_url = url.clone();
                    {
                        let mut st = self.st.lock();
                        if term >= st.term {
                            if term > st.term {
                                st.term = term;
                                st.voted_for = None;
                                self.storage.save_vote(term, None);
                            }
                            st.master = Some(m);
                            st.last_master_contact = now;
                            st.role = Role::Client;
                        }
                    }
                    // Catch up from the discovered master; start at the
                    // committed prefix so a conflicting tail is replaced.
                    let from = {
                        let st = self.st.lock();
                        st.commit_seq.min(st.last_applied) + 1
                    };
                    self.sync_from(rt, 0, &master_url, from);
                    return;
                }
            }
        }
        if now >= election_due {
            self.start_election(rt);
        }
    }

    // ------------------------------------------------------------------
    // Handlers
    // ------------------------------------------------------------------

    fn handle_get(&self, payload: &Msg) -> Result<Msg, ServiceError> {
        let st = self.st.lock();
        let mut objects = BTreeMap::new();
        for id in payload.get("ids").as_list().unwrap_or(&[]) {
            let Some(id) = id.as_str() else { continue };
            let obj = match st.store.get(id) {
                Some(o) => object_to_msg(o),
                None => Msg::Map(BTreeMap::new()), // absent == zero sections
            };
            objects.insert(id.to_string(), obj);
        }
        Ok(Msg::map().field("objects", Msg::Map(objects)).build())
    }

    fn handle_change(&self, ctx: &CallCtx<'_>, payload: &Msg) -> Result<Msg, ServiceError> {
        let mut batch = BTreeMap::new();
        for (change_id, req) in payload.get("changes").as_map().into_iter().flatten() {
            let req = ChangeRequest::from_msg(req)
                .ok_or_else(|| ServiceError::new(codes::BAD_REQUEST, "malformed change"))?;
            batch.insert(change_id.clone(), req);
        }
        {
            let st = self.st.lock();
            if st.role != Role::Master {
                return Err(self.not_master_err(&st));
            }
        }
        let (outcomes, seq) = self.master_commit(ctx.rt, ctx.trace, batch)?;
        let results = outcomes
            .into_iter()
            .map(|(id, o)| (id, Msg::str(o.as_str())))
            .collect();
        Ok(Msg::map()
            .field("results", Msg::Map(results))
            .int_field("seq", seq as i64)
            .build())
    }

    fn handle_replicate(&self, ctx: &CallCtx<'_>, payload: &Msg) -> Result<Msg, ServiceError> {
        let master = payload.get_str("master").unwrap_or_default().to_string();
        let entry = LogEntry::from_msg(payload.get("entry"))
            .ok_or_else(|| ServiceError::new(codes::BAD_REQUEST, "malformed entry"))?;
        let commit = payload.get_int("commit").unwrap_or(0) as u64;

        // The caller must be the master it claims to be.
        if ctx.caller_dn != format!("CN={master}") {
            let st = self.st.lock();
            return Err(ServiceError::with_data(
                codes::NOT_FROM_MASTER,
                "replication from a non-master identity",
                Msg::Int(st.term as i64),
            ));
        }
        let master_url = {
            let mut st = self.st.lock();
            if entry.term < st.term {
                return Err(ServiceError::with_data(
                    codes::NOT_FROM_MASTER,
                    "stale term",
                    Msg::Int(st.term as i64),
                ));
            }
            if entry.term > st.term || st.master.as_deref() != Some(master.as_str()) {
                let t = entry.term;
                self.step_down(&mut st, ctx.rt.now(), t, Some(master.clone()));
            }
            st.last_master_contact = ctx.rt.now();
            self.url_of(&st, &master)
        };

        // Fast path: next-in-sequence entry.
        let applied = {
            let mut st = self.st.lock();
            if entry.seq == st.last_applied + 1 {
                self.append_local(&mut st, entry.clone());
                st.commit_seq = st.commit_seq.max(commit.min(st.last_applied));
                self.maybe_snapshot(&mut st);
                true
            } else if entry.seq <= st.last_applied
                && st.log_term_at(entry.seq).map(|t| t == entry.term).unwrap_or(true)
            {
                true // duplicate delivery
            } else {
                false
            }
        };
        if !applied {
            // Gap or conflict: catch up from the master, then retry once.
            let from = {
                let st = self.st.lock();
                st.commit_seq.min(st.last_applied) + 1
            };
            let source = master_url
                .ok_or_else(|| ServiceError::new(codes::GAP_DETECTED, "unknown master url"))?;
            self.sync_from(ctx.rt, ctx.trace, &source, from);
            let mut st = self.st.lock();
            if entry.seq == st.last_applied + 1 {
                self.append_local(&mut st, entry.clone());
            }
            if st.last_applied < entry.seq {
                let have = st.last_applied;
                return Err(ServiceError::with_data(
                    codes::GAP_DETECTED,
                    format!("log gap: have {have}, got {}", entry.seq),
                    Msg::Int(have as i64),
                ));
            }
            st.commit_seq = st.commit_seq.max(commit.min(st.last_applied));
        }
        let st = self.st.lock();
        Ok(Msg::map().int_field("ack", st.last_applied as i64).build())
    }

    fn handle_fetch_log(&self, payload: &Msg) -> Result<Msg, ServiceError> {
        let from = payload.get_int("from").unwrap_or(1).max(1) as u64;
        let st = self.st.lock();
        let mut out = Msg::map().int_field("last_seq", st.last_applied as i64);
        if from <= st.snapshot_seq {
            out = out
                .int_field("snapshot_seq", st.snapshot_seq as i64)
                .field("snapshot", st.snapshot.to_msg());
        }
        let entries: Vec<Msg> = st
            .entries
            .iter()
            .filter(|e| e.seq >= from)
            .map(LogEntry::to_msg)
            .collect();
        Ok(out.field("entries", Msg::List(entries)).build())
    }

    fn handle_elect_poll(&self, ctx: &CallCtx<'_>, payload: &Msg) -> Result<Msg, ServiceError> {
        let term = payload.get_int("term").unwrap_or(0) as u64;
        let candidate = payload.get_str("candidate").unwrap_or_default().to_string();
        let mut st = self.st.lock();
        if term > st.term {
            self.step_down(&mut st, ctx.rt.now(), term, None);
        }
        let granted = term == st.term
            && match &st.voted_for {
                Some((t, v)) => *t == term && *v == candidate,
                None => true,
            };
        if granted {
            st.voted_for = Some((term, candidate));
            self.storage
                .save_vote(term, st.voted_for.as_ref().map(|(_, v)| v.as_str()));
            if st.role == Role::Master {
                let t = st.term;
                self.step_down(&mut st, ctx.rt.now(), t, None);
            }
            st.master = None; // election in progress: writes unavailable
            // Give the candidate room to claim before electing ourselves.
            st.election_due = ctx.rt.now()
                + self.cfg.election_backoff
                + ctx.rt.rand_u64() % self.cfg.election_backoff.max(1);
        }
        Ok(Msg::map()
            .field("granted", Msg::Bool(granted))
            .int_field("term", st.term as i64)
            .str_field("node", &self.cfg.node_id)
            .int_field("seq", st.last_applied as i64)
            .int_field("last_term", st.last_term() as i64)
            .build())
    }

    fn handle_nominate(&self, ctx: &CallCtx<'_>, payload: &Msg) -> Result<Msg, ServiceError> {
        let term = payload.get_int("term").unwrap_or(0) as u64;
        let winner = payload.get_str("winner").unwrap_or_default();
        if winner != self.cfg.node_id {
            return Err(ServiceError::new(codes::BAD_REQUEST, "nominated wrong node"));
        }
        {
            let st = self.st.lock();
            if term < st.term {
                return Ok(Msg::map()
                    .field("ok", Msg::Bool(false))
                    .int_field("term", st.term as i64)
                    .build());
            }
        }
        self.become_master(ctx.rt, ctx.trace, term);
        let st = self.st.lock();
        Ok(Msg::map()
            .field("ok", Msg::Bool(st.role == Role::Master))
            .int_field("term", st.term as i64)
            .build())
    }

    fn handle_master_claim(&self, ctx: &CallCtx<'_>, payload: &Msg) -> Result<Msg, ServiceError> {
        let term = payload.get_int("term").unwrap_or(0) as u64;
        let master = payload.get_str("master").unwrap_or_default().to_string();
        let last_seq = payload.get_int("last_seq").unwrap_or(0) as u64;
        let claim_last_term = payload.get_int("last_entry_term").unwrap_or(0) as u64;
        let need_sync;
        {
            let mut st = self.st.lock();
            if term < st.term {
                return Ok(Msg::map()
                    .field("ok", Msg::Bool(false))
                    .int_field("term", st.term as i64)
                    .build());
            }
            if st.role == Role::Master && st.term == term && self.cfg.node_id != master {
                // Cannot happen with single-winner terms; be loud if it does.
                return Err(ServiceError::new(codes::BAD_REQUEST, "duplicate claim"));
            }
            self.step_down(&mut st, ctx.rt.now(), term, Some(master.clone()));
            st.last_master_contact = ctx.rt.now();
            need_sync = st.last_applied != last_seq
                || (st.last_applied == last_seq && st.last_term() != claim_last_term);
        }
        if need_sync {
            let (from, url) = {
                let st = self.st.lock();
                (st.commit_seq.min(st.last_applied) + 1, self.url_of(&st, &master))
            };
            if let Some(url) = url {
                self.sync_from(ctx.rt, ctx.trace, &url, from);
            }
        }
        let st = self.st.lock();
        Ok(Msg::map()
            .field("ok", Msg::Bool(true))
            .int_field("term", st.term as i64)
            .build())
    }

    fn handle_ping(&self, ctx: &CallCtx<'_>, payload: &Msg) -> Result<Msg, ServiceError> {
        let term = payload.get_int("term").unwrap_or(0) as u64;
        let master = payload.get_str("master").unwrap_or_default().to_string();
        let commit = payload.get_int("commit").unwrap_or(0) as u64;
        let master_seq = payload.get_int("last_seq").unwrap_or(0) as u64;
        let master_last_term = payload.get_int("last_entry_term").unwrap_or(0) as u64;
        let (behind, master_url) = {
            let mut st = self.st.lock();
            if term < st.term {
                return Ok(Msg::map()
                    .str_field("node", &self.cfg.node_id)
                    .int_field("seq", st.last_applied as i64)
                    .int_field("term", st.term as i64)
                    .build());
            }
            if term > st.term || st.master.as_deref() != Some(master.as_str()) {
                self.step_down(&mut st, ctx.rt.now(), term, Some(master.clone()));
            }
            st.last_master_contact = ctx.rt.now();
            st.commit_seq = st.commit_seq.max(commit.min(st.last_applied));
            // Either short on entries, or holding a tail the master's log
            // contradicts (same length, different last term).
            let diverged = st.last_applied != master_seq
                || (st.last_applied == master_seq && st.last_term() != master_last_term);
            (diverged, self.url_of(&st, &master))
        };
        if behind {
            if let Some(url) = master_url {
                let from = {
                    let st = self.st.lock();
                    st.commit_seq.min(st.last_applied) + 1
                };
                self.sync_from(ctx.rt, ctx.trace, &url, from);
            }
        }
        let st = self.st.lock();
        Ok(Msg::map()
            .str_field("node", &self.cfg.node_id)
            .int_field("seq", st.last_applied as i64)
            .int_field("term", st.term as i64)
            .build())
    }

    fn handle_status(&self) -> Result<Msg, ServiceError> {
        let st = self.st.lock();
        let mut out = Msg::map()
            .str_field("node", &self.cfg.node_id)
            .str_field("role", st.role.as_str())
            .int_field("term", st.term as i64)
            .int_field("seq", st.last_applied as i64)
            .int_field("commit", st.commit_seq as i64);
        if let Some(m) = &st.master {
            out = out.str_field("master", m);
            if let Some(url) = self.url_of(&st, m) {
                out = out.str_field("master_url", &url);
            }
        }
        Ok(out.build())
    }

    fn handle_node_list(&self) -> Result<Msg, ServiceError> {
        let st = self.st.lock();
        let nodes = self
            .peers(&st)
            .into_iter()
            .map(|(id, url)| (id, Msg::Str(url)))
            .collect();
        Ok(Msg::map().field("nodes", Msg::Map(nodes)).build())
    }

    fn handle_dump(&self) -> Result<Msg, ServiceError> {
        let st = self.st.lock();
        Ok(Msg::map()
            .int_field("seq", st.last_applied as i64)
            .field("store", st.store.to_msg())
            .build())
    }
}

impl Service for AHashNode {
    fn handle(&self, ctx: &CallCtx<'_>, op: &str, payload: &Msg) -> Result<Msg, ServiceError> {
        match op {
            "get" => self.handle_get(payload),
            "change" => self.handle_change(ctx, payload),
            "replicate" => self.handle_replicate(ctx, payload),
            "fetch_log" => self.handle_fetch_log(payload),
            "elect_poll" => self.handle_elect_poll(ctx, payload),
            "nominate" => self.handle_nominate(ctx, payload),
            "master_claim" => self.handle_master_claim(ctx, payload),
            "ping" => self.handle_ping(ctx, payload),
            "status" => self.handle_status(),
            "node_list" => self.handle_node_list(),
            "dump" => self.handle_dump(),
            _ => Err(ServiceError::new(codes::BAD_REQUEST, format!("unknown op {op}"))),
        }
    }

    fn on_start(&self, rt: &dyn Runtime) {
        let loaded = self.storage.load();
        let mut st = self.st.lock();
        st.incarnation += 1;
        st.role = Role::Client;
        st.term = loaded.term;
        st.voted_for = loaded.voted_for;
        st.master = None;
        st.snapshot = loaded.snapshot.clone().unwrap_or_default();
        st.snapshot_seq = loaded.snapshot_seq;
        let mut store = st.snapshot.clone();
        let mut entries = VecDeque::new();
        let mut last = st.snapshot_seq;
        for e in loaded.entries {
            if e.seq == last + 1 {
                store.apply(&e.batch);
                last = e.seq;
                entries.push_back(e);
            }
        }
        st.store = store;
        st.entries = entries;
        st.last_applied = last;
        st.commit_seq = st.snapshot_seq;
        st.peer_track.clear();
        st.last_majority_ack = 0;
        st.last_master_contact = rt.now();
        st.election_due = rt.now() + self.cfg.startup_election_delay;
        st.writing = false;
    }

    fn background_tasks(&self) -> Vec<BackgroundTask> {
        let weak = self.weak_self.clone();
        vec![BackgroundTask {
            name: format!("{}-tick", self.cfg.node_id),
            period: self.cfg.ping_interval,
            phase: self.cfg.tick_phase,
            tick: Arc::new(move |rt| {
                if let Some(node) = weak.upgrade() {
                    node.tick(rt);
                }
            }),
        }]
    }
}
