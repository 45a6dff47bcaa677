//! The storage-node service.
//!
//! A shepherd owns replica bytes behind a [`ReplicaStore`] backend, issues
//! one-time transfer tickets, validates checksums on upload, download and
//! periodic scrub, and drives the replica lifecycle: it reports every state
//! transition to a librarian in heartbeats, creates additional replicas
//! when a file is under-replicated (brokered by a bartender), marks its own
//! surplus replicas THIRDWHEEL, and deletes aged THIRDWHEEL/INVALID ones.

pub mod backend;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Weak};

use parking_lot::Mutex;

use crate::codec::Msg;
use crate::content::Content;
use crate::hed::envelope::{codes, ServiceError};
use crate::hed::{BackgroundTask, CallCtx, Runtime, Service, TransferHandler};
use crate::meta::ReplicaState;
use crate::vtime::{secs, Nanos};

use backend::{ReplicaRecord, ReplicaStore};

#[derive(Debug, Clone)]
pub struct ShepherdConfig {
    /// This shepherd's service URL; the namespace keys locations by it.
    pub self_url: String,
    /// Base of issued ticket URLs, `scheme://host[:port]`.
    pub transfer_base: String,
    pub librarian_urls: Vec<String>,
    pub bartender_urls: Vec<String>,
    pub heartbeat_period: Nanos,
    pub check_period: Nanos,
    pub check_phase: Nanos,
    pub ticket_ttl: Nanos,
}

impl ShepherdConfig {
    pub fn new(self_url: &str, transfer_base: &str) -> ShepherdConfig {
        ShepherdConfig {
            self_url: self_url.to_string(),
            transfer_base: transfer_base.to_string(),
            librarian_urls: Vec::new(),
            bartender_urls: Vec::new(),
            heartbeat_period: secs(60.0),
            check_period: secs(60.0),
            check_phase: 0,
            ticket_ttl: secs(300.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TicketKind {
    Upload,
    Download,
}

/// A one-time transfer authorization. Consumed on first access.
#[derive(Debug, Clone)]
pub struct TransferTicket {
    pub token: String,
    pub kind: TicketKind,
    pub reference_id: String,
    pub issued_at: Nanos,
    pub ttl: Nanos,
}

struct ShepState {
    tickets: BTreeMap<String, TransferTicket>,
    /// State transitions not yet acknowledged by a librarian; value is the
    /// latest state string ("DELETED" for removals) plus guid and size.
    pending: BTreeMap<String, (String, String, u64)>,
    /// Replicas to reconcile promptly (fresh uploads, scrub findings).
    wake: BTreeSet<String>,
    /// One report in flight at a time, or a stale snapshot could land
    /// after a newer one and roll a location state back.
    flushing: bool,
}

pub struct Shepherd {
    cfg: ShepherdConfig,
    store: Arc<dyn ReplicaStore>,
    st: Mutex<ShepState>,
    weak_self: Weak<Shepherd>,
}

impl Shepherd {
    pub fn new(cfg: ShepherdConfig, store: Arc<dyn ReplicaStore>) -> Arc<Shepherd> {
        Arc::new_cyclic(|weak_self| Shepherd {
            cfg,
            store,
            st: Mutex::new(ShepState {
                tickets: BTreeMap::new(),
                pending: BTreeMap::new(),
                wake: BTreeSet::new(),
                flushing: false,
            }),
            weak_self: weak_self.clone(),
        })
    }

    pub fn store_handle(&self) -> Arc<dyn ReplicaStore> {
        self.store.clone()
    }

    pub fn records(&self) -> BTreeMap<String, ReplicaRecord> {
        self.store.load_records()
    }

    fn buffer_report(&self, reference: &str, guid: &str, state: &str, size: u64) {
        self.st.lock().pending.insert(
            reference.to_string(),
            (state.to_string(), guid.to_string(), size),
        );
    }

    fn issue_ticket(&self, rt: &dyn Runtime, kind: TicketKind, reference: &str) -> (String, String) {
        let mut st = self.st.lock();
        let token = loop {
            let t = rt.rand_hex(16);
            if !st.tickets.contains_key(&t) {
                break t;
            }
        };
        st.tickets.insert(
            token.clone(),
            TransferTicket {
                token: token.clone(),
                kind,
                reference_id: reference.to_string(),
                issued_at: rt.now(),
                ttl: self.cfg.ticket_ttl,
            },
        );
        let turl = format!("{}/{token}", self.cfg.transfer_base);
        (token, turl)
    }

    /// Single use: the first redemption removes the ticket whatever happens
    /// afterwards.
    fn consume_ticket(&self, rt: &dyn Runtime, token: &str, kind: TicketKind) -> Result<TransferTicket, ServiceError> {
        let mut st = self.st.lock();
        let Some(ticket) = st.tickets.remove(token) else {
            return Err(ServiceError::new(codes::TICKET_INVALID, "unknown or used ticket"));
        };
        if ticket.kind != kind {
            return Err(ServiceError::new(codes::TICKET_INVALID, "wrong direction"));
        }
        if rt.now() > ticket.issued_at + ticket.ttl {
            return Err(ServiceError::new(codes::TICKET_INVALID, "ticket expired"));
        }
        Ok(ticket)
    }

    fn handle_put(&self, ctx: &CallCtx<'_>, payload: &Msg) -> Result<Msg, ServiceError> {
        let guid = payload.get_str("guid").unwrap_or_default().to_string();
        let size = payload.get_int("size").unwrap_or(0).max(0) as u64;
        let checksum = payload.get_str("checksum").unwrap_or_default().to_string();
        let checksum_type = payload.get_str("checksumType").unwrap_or_default().to_string();
        if guid.is_empty() {
            return Err(ServiceError::new(codes::BAD_REQUEST, "put without guid"));
        }
        let free = self.store.capacity().saturating_sub(self.store.used());
        if size > free {
            return Err(ServiceError::new(
                codes::INSUFFICIENT_SPACE,
                format!("need {size}, free {free}"),
            ));
        }
        let reference = format!("r{}", ctx.rt.rand_hex(8));
        self.store.save_record(&ReplicaRecord {
            reference_id: reference.clone(),
            guid: guid.clone(),
            state: ReplicaState::Creating,
            checksum,
            checksum_type,
            size,
            state_since: ctx.now(),
        });
        // The new CREATING replica reaches the index with the next report.
        self.buffer_report(&reference, &guid, ReplicaState::Creating.as_str(), size);
        let (_, turl) = self.issue_ticket(ctx.rt, TicketKind::Upload, &reference);
        Ok(Msg::map()
            .str_field("ref", &reference)
            .str_field("turl", &turl)
            .build())
    }

    fn handle_get(&self, ctx: &CallCtx<'_>, payload: &Msg) -> Result<Msg, ServiceError> {
        let guid = payload.get_str("guid").unwrap_or_default();
        let records = self.store.load_records();
        let alive = records
            .values()
            .find(|r| r.guid == guid && r.state == ReplicaState::Alive);
        let Some(rec) = alive else {
            return Err(ServiceError::new(
                codes::NO_ALIVE_REPLICA,
                format!("no ALIVE replica of {guid} here"),
            ));
        };
        let (_, turl) = self.issue_ticket(ctx.rt, TicketKind::Download, &rec.reference_id);
        Ok(Msg::map().str_field("turl", &turl).build())
    }

    fn handle_abort_put(&self, payload: &Msg) -> Result<Msg, ServiceError> {
        let reference = payload.get_str("ref").unwrap_or_default();
        if let Some(rec) = self.store.record(reference) {
            if rec.state == ReplicaState::Creating && self.store.get_content(reference).is_none() {
                self.store.remove_record(reference);
                let mut st = self.st.lock();
                st.tickets.retain(|_, t| t.reference_id != reference);
                st.pending.remove(reference);
            }
        }
        Ok(Msg::Null)
    }

    fn handle_list_replicas(&self) -> Result<Msg, ServiceError> {
        let records = self.store.load_records();
        Ok(Msg::map()
            .field(
                "replicas",
                Msg::List(records.values().map(ReplicaRecord::to_msg).collect()),
            )
            .field("capacity", Msg::Int(self.store.capacity() as i64))
            .field("used", Msg::Int(self.store.used() as i64))
            .build())
    }

    /// Send buffered transitions to a librarian. Keeps the buffer intact on
    /// failure so nothing is lost across librarian outages.
    fn flush_report(&self, rt: &dyn Runtime) -> Result<(), ServiceError> {
        loop {
            let mut st = self.st.lock();
            if !st.flushing {
                st.flushing = true;
                break;
            }
            drop(st);
            rt.sleep(50_000_000);
        }
        let result = self.flush_report_gated(rt);
        self.st.lock().flushing = false;
        result
    }

    fn flush_report_gated(&self, rt: &dyn Runtime) -> Result<(), ServiceError> {
        let pending: Vec<(String, (String, String, u64))> = {
            let st = self.st.lock();
            st.pending.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
        };
        let changes: Vec<Msg> = pending
            .iter()
            .map(|(reference, (state, guid, size))| {
                Msg::map()
                    .str_field("ref", reference)
                    .str_field("guid", guid)
                    .str_field("state", state)
                    .int_field("size", *size as i64)
                    .build()
            })
            .collect();
        let payload = Msg::map()
            .str_field("shepherd", &self.cfg.self_url)
            .int_field("capacity", self.store.capacity() as i64)
            .int_field("used", self.store.used() as i64)
            .field("changes", Msg::List(changes))
            .build();
        let mut last_err = None;
        for url in &self.cfg.librarian_urls {
            match rt.call_raw(0, url, "report", payload.clone()) {
                Ok(resp) => {
                    let results = resp.get("results").as_list().unwrap_or(&[]).to_vec();
                    let mut st = self.st.lock();
                    for (i, (reference, sent)) in pending.iter().enumerate() {
                        // Only clear what was actually delivered unchanged.
                        if st.pending.get(reference) == Some(sent) {
                            st.pending.remove(reference);
                        }
                        // A location update refused with condition-failed
                        // means the file is gone; drop the replica.
                        if results.get(i).and_then(|r| r.as_str()) == Some("condition-failed")
                            && sent.0 != "DELETED"
                        {
                            drop(st);
                            self.purge_replica(reference, &sent.1, sent.2);
                            st = self.st.lock();
                        }
                    }
                    return Ok(());
                }
                Err(e) => last_err = Some(e),
            }
        }
        Err(ServiceError::new(
            codes::AHASH_UNAVAILABLE,
            format!("no librarian reachable: {last_err:?}"),
        ))
    }

    fn purge_replica(&self, reference: &str, guid: &str, size: u64) {
        self.store.remove_record(reference);
        self.buffer_report(reference, guid, "DELETED", size);
        let mut st = self.st.lock();
        st.tickets.retain(|_, t| t.reference_id != reference);
    }

    /// Upload completion: verify the checksum over stored bytes; a match
    /// makes the replica ALIVE, a mismatch makes it INVALID with the bytes
    /// dropped. Either way the transition is reported, and reconciliation
    /// runs promptly to create further replicas if the file needs them.
    fn on_upload_complete(&self, rt: &dyn Runtime, reference: &str) {
        let Some(mut rec) = self.store.record(reference) else {
            return;
        };
        let Some(content) = self.store.get_content(reference) else {
            return;
        };
        let computed = content.checksum();
        if computed == rec.checksum {
            rec.state = ReplicaState::Alive;
            rec.state_since = rt.now();
            self.store.save_record(&rec);
            self.buffer_report(reference, &rec.guid, rec.state.as_str(), rec.size);
        } else {
            rec.state = ReplicaState::Invalid;
            rec.state_since = rt.now();
            self.store.save_record(&rec);
            self.store.delete_content(reference);
            self.buffer_report(reference, &rec.guid, rec.state.as_str(), rec.size);
        }
        // Report the transition, then let the reconciler drive replication.
        let _ = self.flush_report(rt);
        self.st.lock().wake.insert(reference.to_string());
    }

    /// Ask a bartender for a destination and push our bytes to it.
    fn push_new_replica(&self, rt: &dyn Runtime, rec: &ReplicaRecord) {
        let Some(content) = self.store.get_content(&rec.reference_id) else {
            return;
        };
        let payload = Msg::map().str_field("guid", &rec.guid).build();
        for url in &self.cfg.bartender_urls {
            match rt.call_raw(0, url, "add_replica", payload.clone()) {
                Ok(resp) => {
                    if let Some(turl) = resp.get_str("turl") {
                        let _ = rt.transfer_raw(0, turl, Some(content));
                    }
                    return;
                }
                Err(crate::hed::envelope::CallError::Remote(e))
                    if e.is(codes::NOT_UNDER_REPLICATED) || e.is(codes::NO_ELIGIBLE_SHEPHERD) =>
                {
                    return; // nothing to do / nowhere to put it this cycle
                }
                Err(_) => continue, // try the next bartender
            }
        }
    }

    /// Reconcile one local replica against the namespace: scrub its bytes,
    /// fix under-replication, mark surplus, age out THIRDWHEEL/INVALID.
    fn reconcile(&self, rt: &dyn Runtime, reference: &str) {
        let Some(mut rec) = self.store.record(reference) else {
            return;
        };
        let now = rt.now();

        // Stuck CREATING with no bytes and an expired (or consumed) ticket.
        if rec.state == ReplicaState::Creating {
            if self.store.get_content(reference).is_some() {
                // Upload landed but completion was interrupted; re-verify.
                self.on_upload_complete(rt, reference);
                return;
            }
            let ticket_live = {
                let st = self.st.lock();
                st.tickets
                    .values()
                    .any(|t| t.reference_id == reference && now <= t.issued_at + t.ttl)
            };
            if !ticket_live && now.saturating_sub(rec.state_since) > self.cfg.ticket_ttl {
                self.purge_replica(reference, &rec.guid.clone(), rec.size);
            }
            return;
        }

        // Scrub: recompute the checksum of stored bytes.
        if rec.state == ReplicaState::Alive {
            let valid = self
                .store
                .get_content(reference)
                .map(|c| c.checksum() == rec.checksum)
                .unwrap_or(false);
            if !valid {
                rec.state = ReplicaState::Invalid;
                rec.state_since = now;
                self.store.save_record(&rec);
                self.store.delete_content(reference);
                self.buffer_report(reference, &rec.guid, rec.state.as_str(), rec.size);
                let _ = self.flush_report(rt);
                return;
            }
        }

        // Age out surplus and invalid replicas once they have been visible
        // for a full check period.
        if matches!(rec.state, ReplicaState::Thirdwheel | ReplicaState::Invalid) {
            if now.saturating_sub(rec.state_since) > self.cfg.check_period {
                self.store.delete_content(reference);
                self.purge_replica(reference, &rec.guid.clone(), rec.size);
            }
            return;
        }

        // Compare the namespace view of this file with its needs.
        let payload = Msg::map().str_field("guid", &rec.guid).build();
        let mut count_resp = None;
        for url in &self.cfg.librarian_urls {
            if let Ok(resp) = rt.call_raw(0, url, "replica_count", payload.clone()) {
                count_resp = Some(resp);
                break;
            }
        }
        let Some(resp) = count_resp else {
            return; // librarian unavailable: skip this cycle
        };
        if resp.get("exists").as_bool() != Some(true) {
            // The file was deleted; drop bytes and clean the index.
            self.store.delete_content(reference);
            self.purge_replica(reference, &rec.guid.clone(), rec.size);
            return;
        }
        let needed = resp.get_int("needed").unwrap_or(0).max(0) as usize;
        let alive = resp.get_int("alive").unwrap_or(0).max(0) as usize;
        let creating = resp.get_int("creating").unwrap_or(0).max(0) as usize;
        let locseq = resp.get_int("locseq").unwrap_or(0) as u64;

        if rec.state == ReplicaState::Alive && alive + creating < needed {
            self.push_new_replica(rt, &rec);
        } else if rec.state == ReplicaState::Alive && alive > needed {
            // First noticer marks its own replica; the compare-and-set on
            // locseq keeps concurrent noticers from over-deleting.
            let payload = Msg::map()
                .str_field("guid", &rec.guid)
                .str_field("shepherd", &self.cfg.self_url)
                .str_field("ref", reference)
                .int_field("locseq", locseq as i64)
                .build();
            for url in &self.cfg.librarian_urls {
                match rt.call_raw(0, url, "mark_surplus", payload.clone()) {
                    Ok(resp) => {
                        if resp.get_str("result") == Some("applied") {
                            rec.state = ReplicaState::Thirdwheel;
                            rec.state_since = now;
                            self.store.save_record(&rec);
                            self.buffer_report(
                                reference,
                                &rec.guid,
                                rec.state.as_str(),
                                rec.size,
                            );
                            let _ = self.flush_report(rt);
                        }
                        break;
                    }
                    Err(_) => continue,
                }
            }
        }
    }

    fn self_check(&self, rt: &dyn Runtime) {
        let records = self.store.load_records();
        for reference in records.keys() {
            self.reconcile(rt, reference);
        }
        let _ = self.flush_report(rt);
    }

    /// Prompt reconciliation of replicas touched since the last pass.
    fn drain_wake(&self, rt: &dyn Runtime) {
        loop {
            let next = {
                let mut st = self.st.lock();
                let next = st.wake.iter().next().cloned();
                if let Some(n) = &next {
                    st.wake.remove(n);
                }
                next
            };
            match next {
                Some(reference) => self.reconcile(rt, &reference),
                None => return,
            }
        }
    }

    fn heartbeat(&self, rt: &dyn Runtime) {
        let _ = self.flush_report(rt);
    }
}

impl Service for Shepherd {
    fn handle(&self, ctx: &CallCtx<'_>, op: &str, payload: &Msg) -> Result<Msg, ServiceError> {
        match op {
            "put" => self.handle_put(ctx, payload),
            "get" => self.handle_get(ctx, payload),
            "abort_put" => self.handle_abort_put(payload),
            "list_replicas" => self.handle_list_replicas(),
            _ => Err(ServiceError::new(
                codes::BAD_REQUEST,
                format!("unknown op {op}"),
            )),
        }
    }

    fn on_start(&self, rt: &dyn Runtime) {
        // Rescan the backend. Every surviving replica is revalidated before
        // its state is reported again (reappearance after downtime flips
        // OFFLINE locations back to ALIVE, so the bytes must be checked).
        let mut st = self.st.lock();
        st.tickets.clear();
        st.pending.clear();
        st.wake.clear();
        st.flushing = false;
        drop(st);
        for (reference, mut rec) in self.store.load_records() {
            if rec.state == ReplicaState::Alive {
                let valid = self
                    .store
                    .get_content(&reference)
                    .map(|c| c.checksum() == rec.checksum)
                    .unwrap_or(false);
                if !valid {
                    rec.state = ReplicaState::Invalid;
                    rec.state_since = rt.now();
                    self.store.save_record(&rec);
                    self.store.delete_content(&reference);
                }
            }
            // Everything is re-reported: the previous report tracking died
            // with the old process.
            self.buffer_report(&reference, &rec.guid, rec.state.as_str(), rec.size);
        }
    }

    fn background_tasks(&self) -> Vec<BackgroundTask> {
        let hb = self.weak_self.clone();
        let check = self.weak_self.clone();
        let wake = self.weak_self.clone();
        vec![
            BackgroundTask {
                name: "heartbeat".to_string(),
                period: self.cfg.heartbeat_period,
                phase: self.cfg.check_phase + 1_000_000,
                tick: Arc::new(move |rt| {
                    if let Some(s) = hb.upgrade() {
                        s.heartbeat(rt);
                    }
                }),
            },
            BackgroundTask {
                name: "self-check".to_string(),
                period: self.cfg.check_period,
                phase: self.cfg.check_phase,
                tick: Arc::new(move |rt| {
                    if let Some(s) = check.upgrade() {
                        s.self_check(rt);
                    }
                }),
            },
            BackgroundTask {
                name: "reconciler".to_string(),
                period: secs(1.0),
                phase: self.cfg.check_phase + 2_000_000,
                tick: Arc::new(move |rt| {
                    if let Some(s) = wake.upgrade() {
                        s.drain_wake(rt);
                    }
                }),
            },
        ]
    }
}

impl TransferHandler for Shepherd {
    fn upload(&self, rt: &dyn Runtime, token: &str, content: Content) -> Result<(), ServiceError> {
        let ticket = self.consume_ticket(rt, token, TicketKind::Upload)?;
        let Some(rec) = self.store.record(&ticket.reference_id) else {
            return Err(ServiceError::new(codes::TICKET_INVALID, "replica gone"));
        };
        if rec.state != ReplicaState::Creating {
            return Err(ServiceError::new(codes::TICKET_INVALID, "not awaiting upload"));
        }
        self.store.put_content(&ticket.reference_id, &content);
        self.on_upload_complete(rt, &ticket.reference_id);
        Ok(())
    }

    fn download(&self, rt: &dyn Runtime, token: &str) -> Result<Content, ServiceError> {
        let ticket = self.consume_ticket(rt, token, TicketKind::Download)?;
        let Some(rec) = self.store.record(&ticket.reference_id) else {
            return Err(ServiceError::new(codes::TICKET_INVALID, "replica gone"));
        };
        let Some(content) = self.store.get_content(&ticket.reference_id) else {
            return Err(ServiceError::new(codes::NO_ALIVE_REPLICA, "no bytes stored"));
        };
        // Never serve bytes that no longer match the recorded checksum.
        if content.checksum() != rec.checksum {
            let mut rec = rec;
            rec.state = ReplicaState::Invalid;
            rec.state_since = rt.now();
            self.store.save_record(&rec);
            self.store.delete_content(&ticket.reference_id);
            self.buffer_report(&ticket.reference_id, &rec.guid, rec.state.as_str(), rec.size);
            let _ = self.flush_report(rt);
            self.st.lock().wake.insert(ticket.reference_id.clone());
            return Err(ServiceError::new(
                codes::TICKET_INVALID,
                "stored bytes fail checksum; replica invalidated",
            ));
        }
        Ok(content)
    }
}
