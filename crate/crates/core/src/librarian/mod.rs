//! The namespace and metadata service.
//!
//! Librarians are stateless: every durable fact lives in the replicated
//! store, so any number of instances over the same store answer alike. The
//! service resolves logical names level by level (one store read per
//! level), creates and links entries, applies shepherd-reported replica
//! state transitions, and marks the replicas of silent shepherds offline.

use std::collections::BTreeMap;
use std::sync::{Arc, Weak};

use crate::ahash::client::{AHashClient, RetryPolicy};
use crate::ahash::store::{ChangeOutcome, ChangeRequest, Condition};
use crate::bartender::policy::PolicyRule;
use crate::codec::Msg;
use crate::hed::envelope::{codes, ServiceError};
use crate::hed::{BackgroundTask, CallCtx, Runtime, Service};
use crate::meta::{
    location_key, new_guid, shepherd_index_id, EntryMeta, EntryType, LogicalName, ReplicaState,
    REGISTRY_ID, ROOT_GUID,
};
use crate::vtime::{secs, Nanos};

#[derive(Debug, Clone)]
pub struct LibrarianConfig {
    pub initial_ahash: Vec<String>,
    pub heartbeat_period: Nanos,
    /// Extra slack past one heartbeat period before offlining.
    pub grace: Nanos,
    pub monitor_period: Nanos,
    pub root_policy: Vec<PolicyRule>,
    pub retry: RetryPolicy,
}

impl LibrarianConfig {
    pub fn new(initial_ahash: Vec<String>) -> LibrarianConfig {
        LibrarianConfig {
            initial_ahash,
            heartbeat_period: secs(60.0),
            grace: secs(60.0),
            monitor_period: secs(15.0),
            root_policy: vec![PolicyRule::allow_any_all()],
            retry: RetryPolicy::default(),
        }
    }
}

pub struct Librarian {
    cfg: LibrarianConfig,
    store: AHashClient,
    weak_self: Weak<Librarian>,
}

fn err_bad(msg: &str) -> ServiceError {
    ServiceError::new(codes::BAD_REQUEST, msg.to_string())
}

impl Librarian {
    pub fn new(cfg: LibrarianConfig) -> Arc<Librarian> {
        Arc::new_cyclic(|weak_self| Librarian {
            store: AHashClient::new(cfg.initial_ahash.clone(), cfg.retry.clone()),
            cfg,
            weak_self: weak_self.clone(),
        })
    }

    /// Create the root collection if this deployment has none yet.
    fn ensure_root(&self, ctx: &CallCtx<'_>) -> Result<(), ServiceError> {
        if !self.store.get_one(ctx, ROOT_GUID)?.is_empty() {
            return Ok(());
        }
        let mut batch = BTreeMap::new();
        batch.insert(
            "type".to_string(),
            ChangeRequest::set(ROOT_GUID, "states", "type", "collection")
                .when(Condition::no_key("states", "type")),
        );
        batch.insert(
            "created".to_string(),
            ChangeRequest::set(ROOT_GUID, "states", "created", &ctx.now().to_string())
                .when(Condition::no_key("states", "type")),
        );
        for (i, rule) in self.cfg.root_policy.iter().enumerate() {
            batch.insert(
                format!("p{i:04}"),
                ChangeRequest::set(ROOT_GUID, "policy", &format!("{i:04}"), &rule.to_string())
                    .when(Condition::no_key("states", "type")),
            );
        }
        // condition-failed just means another librarian won the race.
        self.store.change(ctx, batch)?;
        Ok(())
    }

    fn handle_traverse(&self, ctx: &CallCtx<'_>, payload: &Msg) -> Result<Msg, ServiceError> {
        let ln = LogicalName::parse(payload.get_str("ln").unwrap_or_default())
            .map_err(|e| err_bad(&e.to_string()))?;
        let full = payload.get("full").as_bool().unwrap_or(false);

        let mut levels: Vec<Msg> = Vec::new();
        let mut remainder: Vec<String> = ln.components().to_vec();
        let mut current_guid = ROOT_GUID.to_string();
        let mut current_name = String::new();
        let mut terminal_full: Option<Msg> = None;

        loop {
            let mut obj = self.store.get_one(ctx, &current_guid)?;
            if obj.is_empty() && current_guid == ROOT_GUID {
                self.ensure_root(ctx)?;
                obj = self.store.get_one(ctx, &current_guid)?;
            }
            let meta = EntryMeta::from_object(&obj);
            if !meta.exists() {
                // Dangling link: stop with this component unresolved.
                remainder.insert(0, current_name.clone());
                break;
            }
            levels.push(meta.to_msg(&current_guid, &current_name, false));
            let is_mount = meta.entry_type == Some(EntryType::Mountpoint);
            if is_mount && !remainder.is_empty() {
                break; // gateway handles the rest
            }
            if remainder.is_empty() {
                if full {
                    terminal_full = Some(meta.to_msg(&current_guid, &current_name, true));
                }
                break;
            }
            let next = remainder[0].clone();
            match meta.entries.get(&next) {
                Some((guid, _)) => {
                    remainder.remove(0);
                    current_guid = guid.clone();
                    current_name = next;
                }
                None => break, // unresolved suffix stays in `remainder`
            }
        }

        let mut out = Msg::map()
            .field("levels", Msg::List(levels))
            .field(
                "remainder",
                Msg::List(remainder.iter().map(|c| Msg::str(c.clone())).collect()),
            );
        if let Some(t) = terminal_full {
            out = out.field("terminal", t);
        }
        Ok(out.build())
    }

    fn handle_create_entry(&self, ctx: &CallCtx<'_>, payload: &Msg) -> Result<Msg, ServiceError> {
        let parent = payload.get_str("parent").unwrap_or_default().to_string();
        let name = payload.get_str("name").unwrap_or_default().to_string();
        crate::meta::validate_child_name(&name).map_err(|e| err_bad(&e.to_string()))?;
        let etype = payload
            .get_str("type")
            .and_then(EntryType::parse)
            .ok_or_else(|| err_bad("missing entry type"))?;
        let guid = new_guid(ctx.rt);

        // Create the entry object first; link it under the parent second.
        // A crash in between leaves an unreachable object (found by fsck),
        // never a reachable partial entry.
        let mut create = BTreeMap::new();
        let guard = Condition::no_key("states", "type");
        create.insert(
            "type".into(),
            ChangeRequest::set(&guid, "states", "type", etype.as_str()).when(guard.clone()),
        );
        create.insert(
            "created".into(),
            ChangeRequest::set(&guid, "states", "created", &ctx.now().to_string())
                .when(guard.clone()),
        );
        if etype == EntryType::File {
            for (key, field) in [
                ("size", "size"),
                ("checksum", "checksum"),
                ("checksumType", "checksumType"),
                ("neededReplicas", "neededReplicas"),
            ] {
                let value = match payload.get(field) {
                    Msg::Int(v) => v.to_string(),
                    Msg::Str(s) => s.clone(),
                    _ => continue,
                };
                create.insert(
                    key.into(),
                    ChangeRequest::set(&guid, "states", key, &value).when(guard.clone()),
                );
            }
            create.insert(
                "locseq".into(),
                ChangeRequest::set(&guid, "states", "locseq", "0").when(guard.clone()),
            );
        }
        if etype == EntryType::Mountpoint {
            let url = payload
                .get_str("mountURL")
                .ok_or_else(|| err_bad("mountpoint needs mountURL"))?;
            create.insert(
                "mount".into(),
                ChangeRequest::set(&guid, "mount", "url", url).when(guard.clone()),
            );
        }
        for (i, rule) in payload
            .get("policy")
            .as_list()
            .unwrap_or(&[])
            .iter()
            .enumerate()
        {
            if let Some(rule) = rule.as_str() {
                create.insert(
                    format!("p{i:04}"),
                    ChangeRequest::set(&guid, "policy", &format!("{i:04}"), rule)
                        .when(guard.clone()),
                );
            }
        }
        let outcomes = self.store.change(ctx, create)?;
        if outcomes.values().any(|o| *o != ChangeOutcome::Applied) {
            return Err(ServiceError::new(
                codes::BACKEND_FAILURE,
                "guid collision on entry creation",
            ));
        }

        match self.link_child(ctx, &parent, &name, &guid, etype)? {
            LinkOutcome::Linked => Ok(Msg::map().str_field("guid", &guid).build()),
            outcome => {
                // Roll the orphan back; a crash here leaves it for fsck.
                let mut cleanup = BTreeMap::new();
                cleanup.insert("del".to_string(), ChangeRequest::delete_object(&guid));
                let _ = self.store.change(ctx, cleanup);
                Err(match outcome {
                    LinkOutcome::NameTaken => {
                        ServiceError::new(codes::NAME_TAKEN, format!("{name} exists"))
                    }
                    _ => ServiceError::new(codes::PARENT_MISSING, "parent vanished"),
                })
            }
        }
    }

    fn link_child(
        &self,
        ctx: &CallCtx<'_>,
        parent: &str,
        name: &str,
        guid: &str,
        etype: EntryType,
    ) -> Result<LinkOutcome, ServiceError> {
        let mut batch = BTreeMap::new();
        batch.insert(
            "link".to_string(),
            ChangeRequest::set(parent, "entries", name, &format!("{guid}|{etype}"))
                .when(Condition::no_key("entries", name))
                .when(Condition::has_key("states", "type")),
        );
        let outcomes = self.store.change(ctx, batch)?;
        if outcomes.get("link") == Some(&ChangeOutcome::Applied) {
            return Ok(LinkOutcome::Linked);
        }
        // Classify the failure with one read.
        let parent_obj = self.store.get_one(ctx, parent)?;
        let parent_meta = EntryMeta::from_object(&parent_obj);
        if !parent_meta.exists() {
            Ok(LinkOutcome::ParentMissing)
        } else {
            Ok(LinkOutcome::NameTaken)
        }
    }

    fn handle_link(&self, ctx: &CallCtx<'_>, payload: &Msg) -> Result<Msg, ServiceError> {
        let parent = payload.get_str("parent").unwrap_or_default();
        let name = payload.get_str("name").unwrap_or_default();
        let guid = payload.get_str("guid").unwrap_or_default();
        let etype = payload
            .get_str("type")
            .and_then(EntryType::parse)
            .ok_or_else(|| err_bad("missing type"))?;
        crate::meta::validate_child_name(name).map_err(|e| err_bad(&e.to_string()))?;
        match self.link_child(ctx, parent, name, guid, etype)? {
            LinkOutcome::Linked => Ok(Msg::Null),
            LinkOutcome::NameTaken => Err(ServiceError::new(codes::NAME_TAKEN, name)),
            LinkOutcome::ParentMissing => Err(ServiceError::new(codes::PARENT_MISSING, parent)),
        }
    }

    fn handle_unlink(&self, ctx: &CallCtx<'_>, payload: &Msg) -> Result<Msg, ServiceError> {
        let parent = payload.get_str("parent").unwrap_or_default();
        let name = payload.get_str("name").unwrap_or_default();
        let guid = payload.get_str("guid").unwrap_or_default();
        let etype = payload
            .get_str("type")
            .and_then(EntryType::parse)
            .ok_or_else(|| err_bad("missing type"))?;
        let delete_object = payload.get("delete").as_bool().unwrap_or(false);

        let mut batch = BTreeMap::new();
        batch.insert(
            "unlink".to_string(),
            ChangeRequest::unset(parent, "entries", name).when(Condition::value_equals(
                "entries",
                name,
                &format!("{guid}|{etype}"),
            )),
        );
        let outcomes = self.store.change(ctx, batch)?;
        if outcomes.get("unlink") != Some(&ChangeOutcome::Applied) {
            return Err(ServiceError::new(codes::NOT_FOUND, format!("{name} not linked")));
        }
        if delete_object {
            let mut del = BTreeMap::new();
            del.insert("del".to_string(), ChangeRequest::delete_object(guid));
            self.store.change(ctx, del)?;
        }
        Ok(Msg::Null)
    }

    fn handle_rename(&self, ctx: &CallCtx<'_>, payload: &Msg) -> Result<Msg, ServiceError> {
        let parent = payload.get_str("parent").unwrap_or_default();
        let from = payload.get_str("from").unwrap_or_default();
        let to = payload.get_str("to").unwrap_or_default();
        let guid = payload.get_str("guid").unwrap_or_default();
        let etype = payload
            .get_str("type")
            .and_then(EntryType::parse)
            .ok_or_else(|| err_bad("missing type"))?;
        crate::meta::validate_child_name(to).map_err(|e| err_bad(&e.to_string()))?;
        let value = format!("{guid}|{etype}");
        // Same-collection rename is a single atomic batch on one object.
        let mut batch = BTreeMap::new();
        batch.insert(
            "a-link".to_string(),
            ChangeRequest::set(parent, "entries", to, &value)
                .when(Condition::no_key("entries", to))
                .when(Condition::value_equals("entries", from, &value)),
        );
        batch.insert(
            "b-unlink".to_string(),
            ChangeRequest::unset(parent, "entries", from)
                .when(Condition::no_key("entries", to))
                .when(Condition::value_equals("entries", from, &value)),
        );
        let outcomes = self.store.change(ctx, batch)?;
        if outcomes.values().all(|o| *o == ChangeOutcome::Applied) {
            Ok(Msg::Null)
        } else {
            Err(ServiceError::new(codes::NAME_TAKEN, to))
        }
    }

    fn handle_get_metadata(&self, ctx: &CallCtx<'_>, payload: &Msg) -> Result<Msg, ServiceError> {
        let ids: Vec<String> = payload
            .get("guids")
            .as_list()
            .unwrap_or(&[])
            .iter()
            .filter_map(|m| m.as_str().map(String::from))
            .collect();
        let objects = self.store.get(ctx, &ids)?;
        let mut metas = BTreeMap::new();
        for id in &ids {
            let msg = match objects.get(id) {
                Some(obj) if !obj.is_empty() => {
                    EntryMeta::from_object(obj).to_msg(id, "", true)
                }
                _ => Msg::Null, // unknown GUIDs reported absent
            };
            metas.insert(id.clone(), msg);
        }
        Ok(Msg::map().field("metas", Msg::Map(metas)).build())
    }

    fn handle_modify_metadata(&self, ctx: &CallCtx<'_>, payload: &Msg) -> Result<Msg, ServiceError> {
        let mut batch = BTreeMap::new();
        for (cid, req) in payload.get("changes").as_map().into_iter().flatten() {
            batch.insert(
                cid.clone(),
                ChangeRequest::from_msg(req).ok_or_else(|| err_bad("malformed change"))?,
            );
        }
        let outcomes = self.store.change(ctx, batch)?;
        let results = outcomes
            .into_iter()
            .map(|(id, o)| (id, Msg::str(o.as_str())))
            .collect();
        Ok(Msg::map().field("results", Msg::Map(results)).build())
    }

    fn handle_replica_count(&self, ctx: &CallCtx<'_>, payload: &Msg) -> Result<Msg, ServiceError> {
        let guid = payload.get_str("guid").unwrap_or_default();
        let obj = self.store.get_one(ctx, guid)?;
        let meta = EntryMeta::from_object(&obj);
        Ok(Msg::map()
            .field("exists", Msg::Bool(meta.exists()))
            .int_field("needed", meta.needed_replicas as i64)
            .int_field("alive", meta.alive_count() as i64)
            .int_field("creating", meta.creating_count() as i64)
            .int_field("total", meta.locations.len() as i64)
            .int_field("locseq", meta.locseq as i64)
            .build())
    }

    /// Guarded registration of a new CREATING location: both requests hang
    /// off the same locseq compare-and-set, so concurrent repairs register
    /// at most the outstanding deficit.
    fn handle_register_location(
        &self,
        ctx: &CallCtx<'_>,
        payload: &Msg,
    ) -> Result<Msg, ServiceError> {
        let guid = payload.get_str("guid").unwrap_or_default();
        let shepherd = payload.get_str("shepherd").unwrap_or_default();
        let reference = payload.get_str("ref").unwrap_or_default();
        let locseq = payload.get_int("locseq").unwrap_or(0) as u64;
        let key = location_key(shepherd, reference);

        let cas = Condition::value_equals("states", "locseq", &locseq.to_string());
        let mut batch = BTreeMap::new();
        batch.insert(
            "loc".to_string(),
            ChangeRequest::set(guid, "locations", &key, ReplicaState::Creating.as_str())
                .when(cas.clone())
                .when(Condition::no_key("locations", &key))
                .when(Condition::has_key("states", "type")),
        );
        batch.insert(
            "seq".to_string(),
            ChangeRequest::set(guid, "states", "locseq", &(locseq + 1).to_string())
                .when(cas)
                .when(Condition::no_key("locations", &key))
                .when(Condition::has_key("states", "type")),
        );
        let outcomes = self.store.change(ctx, batch)?;
        let applied = outcomes.values().all(|o| *o == ChangeOutcome::Applied);
        Ok(Msg::map()
            .str_field("result", if applied { "applied" } else { "stale" })
            .build())
    }

    /// First-noticer surplus marking: flips one ALIVE replica of `guid` on
    /// `shepherd` to THIRDWHEEL under the locseq compare-and-set.
    fn handle_mark_surplus(&self, ctx: &CallCtx<'_>, payload: &Msg) -> Result<Msg, ServiceError> {
        let guid = payload.get_str("guid").unwrap_or_default();
        let shepherd = payload.get_str("shepherd").unwrap_or_default();
        let reference = payload.get_str("ref").unwrap_or_default();
        let locseq = payload.get_int("locseq").unwrap_or(0) as u64;
        let key = location_key(shepherd, reference);

        let cas = Condition::value_equals("states", "locseq", &locseq.to_string());
        let alive = Condition::value_equals("locations", &key, ReplicaState::Alive.as_str());
        let mut batch = BTreeMap::new();
        batch.insert(
            "loc".to_string(),
            ChangeRequest::set(guid, "locations", &key, ReplicaState::Thirdwheel.as_str())
                .when(cas.clone())
                .when(alive.clone()),
        );
        batch.insert(
            "seq".to_string(),
            ChangeRequest::set(guid, "states", "locseq", &(locseq + 1).to_string())
                .when(cas)
                .when(alive),
        );
        let outcomes = self.store.change(ctx, batch)?;
        let applied = outcomes.values().all(|o| *o == ChangeOutcome::Applied);
        Ok(Msg::map()
            .str_field("result", if applied { "applied" } else { "stale" })
            .build())
    }

    fn handle_report(&self, ctx: &CallCtx<'_>, payload: &Msg) -> Result<Msg, ServiceError> {
        let shepherd = payload.get_str("shepherd").unwrap_or_default().to_string();
        if shepherd.is_empty() {
            return Err(err_bad("report without shepherd url"));
        }
        let capacity = payload.get_int("capacity").unwrap_or(0);
        let used = payload.get_int("used").unwrap_or(0);
        let now = ctx.now();
        let index_id = shepherd_index_id(&shepherd);

        let mut batch = BTreeMap::new();
        // Heartbeat bookkeeping; a shepherd auto-registers on first report.
        for (key, value) in [
            ("dn", ctx.caller_dn.to_string()),
            ("last_hb", now.to_string()),
            ("offlined", "0".to_string()),
            ("capacity", capacity.to_string()),
            ("used", used.to_string()),
            (
                "deadline",
                (now + self.cfg.heartbeat_period).to_string(),
            ),
        ] {
            batch.insert(
                format!("hb-{key}"),
                ChangeRequest::set(REGISTRY_ID, &shepherd, key, &value),
            );
        }

        let changes = payload.get("changes").as_list().unwrap_or(&[]).to_vec();
        let mut change_ids = Vec::new();
        for (i, ch) in changes.iter().enumerate() {
            let reference = ch.get_str("ref").unwrap_or_default();
            let guid = ch.get_str("guid").unwrap_or_default();
            let state = ch.get_str("state").unwrap_or_default();
            let size = ch.get_int("size").unwrap_or(0);
            let key = location_key(&shepherd, reference);
            let loc_id = format!("c{i:04}-loc");
            if state == "DELETED" {
                batch.insert(
                    loc_id.clone(),
                    ChangeRequest::unset(guid, "locations", &key),
                );
                batch.insert(
                    format!("c{i:04}-idx"),
                    ChangeRequest::unset(&index_id, "replicas", reference),
                );
            } else {
                if ReplicaState::parse(state).is_none() {
                    return Err(err_bad(&format!("bad replica state {state}")));
                }
                // Never resurrect a deleted file's object.
                batch.insert(
                    loc_id.clone(),
                    ChangeRequest::set(guid, "locations", &key, state)
                        .when(Condition::has_key("states", "type")),
                );
                batch.insert(
                    format!("c{i:04}-idx"),
                    ChangeRequest::set(
                        &index_id,
                        "replicas",
                        reference,
                        &format!("{guid}|{size}|{state}"),
                    ),
                );
            }
            change_ids.push(loc_id);
        }

        let outcomes = self.store.change(ctx, batch)?;
        let results: Vec<Msg> = change_ids
            .iter()
            .map(|id| {
                Msg::str(
                    outcomes
                        .get(id)
                        .map(|o| o.as_str())
                        .unwrap_or("failed"),
                )
            })
            .collect();
        Ok(Msg::map()
            .int_field("deadline", (now + self.cfg.heartbeat_period) as i64)
            .field("results", Msg::List(results))
            .build())
    }

    fn handle_registry(&self, ctx: &CallCtx<'_>, _payload: &Msg) -> Result<Msg, ServiceError> {
        let reg = self.store.get_one(ctx, REGISTRY_ID)?;
        let urls: Vec<String> = reg.keys().cloned().collect();
        let index_ids: Vec<String> = urls.iter().map(|u| shepherd_index_id(u)).collect();
        let indexes = if index_ids.is_empty() {
            BTreeMap::new()
        } else {
            self.store.get(ctx, &index_ids)?
        };
        let now = ctx.now();
        let mut shepherds = BTreeMap::new();
        for url in &urls {
            let rec = reg.get(url).cloned().unwrap_or_default();
            let last_hb: u64 = rec.get("last_hb").and_then(|v| v.parse().ok()).unwrap_or(0);
            let alive =
                now <= last_hb + self.cfg.heartbeat_period + self.cfg.grace;
            // Fresh usage: sum of replica sizes currently indexed for the
            // shepherd, independent of heartbeat lag.
            let mut used = 0i64;
            let mut replicas = 0i64;
            if let Some(index) = indexes.get(&shepherd_index_id(url)) {
                if let Some(entries) = index.get("replicas") {
                    for value in entries.values() {
                        let mut parts = value.split('|');
                        let _guid = parts.next();
                        if let Some(size) = parts.next().and_then(|s| s.parse::<i64>().ok()) {
                            used += size;
                            replicas += 1;
                        }
                    }
                }
            }
            shepherds.insert(
                url.clone(),
                Msg::map()
                    .str_field("dn", rec.get("dn").cloned().unwrap_or_default())
                    .field("alive", Msg::Bool(alive))
                    .int_field(
                        "capacity",
                        rec.get("capacity")
                            .and_then(|v| v.parse().ok())
                            .unwrap_or(0),
                    )
                    .int_field("used", used)
                    .int_field("replicas", replicas)
                    .int_field("last_hb", last_hb as i64)
                    .build(),
            );
        }
        Ok(Msg::map().field("shepherds", Msg::Map(shepherds)).build())
    }

    /// Offline-marking sweep. Safe to run from any number of librarians
    /// concurrently: the registry flip is a compare-and-set on the exact
    /// heartbeat value, so exactly one sweep applies.
    pub fn check_shepherds(&self, ctx: &CallCtx<'_>) -> Result<Vec<String>, ServiceError> {
        let reg = self.store.get_one(ctx, REGISTRY_ID)?;
        let now = ctx.now();
        let mut offlined = Vec::new();
        for (url, rec) in &reg {
            let last_hb: u64 = rec.get("last_hb").and_then(|v| v.parse().ok()).unwrap_or(0);
            let flagged = rec.get("offlined").map(String::as_str) == Some("1");
            if flagged || now <= last_hb + self.cfg.heartbeat_period + self.cfg.grace {
                continue;
            }
            let index_id = shepherd_index_id(url);
            let index = self.store.get_one(ctx, &index_id)?;
            let mut batch = BTreeMap::new();
            let seen_hb = Condition::value_equals(url, "last_hb", &last_hb.to_string());
            let not_flagged = Condition::value_equals(url, "offlined", "0");
            batch.insert(
                "flag".to_string(),
                ChangeRequest::set(REGISTRY_ID, url, "offlined", "1")
                    .when(seen_hb.clone())
                    .when(not_flagged.clone()),
            );
            if let Some(entries) = index.get("replicas") {
                for (reference, value) in entries {
                    let mut parts = value.split('|');
                    let guid = parts.next().unwrap_or_default().to_string();
                    let size = parts.next().unwrap_or("0").to_string();
                    let state = parts.next().unwrap_or_default();
                    if !matches!(state, "ALIVE" | "CREATING") {
                        continue;
                    }
                    let key = location_key(url, reference);
                    batch.insert(
                        format!("loc-{reference}"),
                        ChangeRequest::set(&guid, "locations", &key, "OFFLINE")
                            .when(Condition::value_equals("locations", &key, state)),
                    );
                    batch.insert(
                        format!("idx-{reference}"),
                        ChangeRequest::set(
                            &index_id,
                            "replicas",
                            reference,
                            &format!("{guid}|{size}|OFFLINE"),
                        )
                        .when(Condition::value_equals(
                            "replicas",
                            reference,
                            value,
                        )),
                    );
                }
            }
            let outcomes = self.store.change(ctx, batch)?;
            if outcomes.get("flag") == Some(&ChangeOutcome::Applied) {
                offlined.push(url.clone());
            }
        }
        Ok(offlined)
    }

    fn monitor_tick(&self, rt: &dyn Runtime) {
        let ctx = CallCtx {
            caller_dn: &rt.self_endpoint().dn.clone(),
            trace: 0,
            rt,
        };
        let _ = self.ensure_root(&ctx);
        // ahash-unavailable here just means retry next period.
        let _ = self.check_shepherds(&ctx);
    }
}

enum LinkOutcome {
    Linked,
    NameTaken,
    ParentMissing,
}

impl Service for Librarian {
    fn handle(&self, ctx: &CallCtx<'_>, op: &str, payload: &Msg) -> Result<Msg, ServiceError> {
        match op {
            "traverse" => self.handle_traverse(ctx, payload),
            "create_entry" => self.handle_create_entry(ctx, payload),
            "link" => self.handle_link(ctx, payload),
            "unlink" => self.handle_unlink(ctx, payload),
            "rename" => self.handle_rename(ctx, payload),
            "get_metadata" => self.handle_get_metadata(ctx, payload),
            "modify_metadata" => self.handle_modify_metadata(ctx, payload),
            "replica_count" => self.handle_replica_count(ctx, payload),
            "register_location" => self.handle_register_location(ctx, payload),
            "mark_surplus" => self.handle_mark_surplus(ctx, payload),
            "report" => self.handle_report(ctx, payload),
            "registry" => self.handle_registry(ctx, payload),
            "check_shepherds" => {
                let offlined = self.check_shepherds(ctx)?;
                Ok(Msg::map()
                    .field(
                        "offlined",
                        Msg::List(offlined.into_iter().map(Msg::Str).collect()),
                    )
                    .build())
            }
            _ => Err(err_bad(&format!("unknown op {op}"))),
        }
    }

    fn background_tasks(&self) -> Vec<BackgroundTask> {
        let weak = self.weak_self.clone();
        vec![BackgroundTask {
            name: "shepherd-monitor".to_string(),
            period: self.cfg.monitor_period,
            phase: self.cfg.monitor_period / 3,
            tick: Arc::new(move |rt| {
                if let Some(lib) = weak.upgrade() {
                    lib.monitor_tick(rt);
                }
            }),
        }]
    }
}
