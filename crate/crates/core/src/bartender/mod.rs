//! The user-facing service.
//!
//! Clients talk only to bartenders: namespace commands, policy evaluation,
//! and transfer brokering. File bytes never pass through here; uploads and
//! downloads hand the client a one-time ticket URL against a storage node.
//! Mount points turn into external URLs without contacting any shepherd.
//! Shepherds call back in for repair brokering (`add_replica`).

pub mod policy;

use std::sync::{Arc, Weak};

use crate::codec::Msg;
use crate::hed::envelope::{codes, CallError, ServiceError};
use crate::hed::{CallCtx, Service};
use crate::meta::{EntryMeta, EntryType, LogicalName, ReplicaState};

use policy::{evaluate, Action, PolicyRule};

#[derive(Debug, Clone)]
pub struct BartenderConfig {
    pub librarian_urls: Vec<String>,
    /// Identities allowed to call the repair brokerage.
    pub default_needed_replicas: u32,
}

impl BartenderConfig {
    pub fn new(librarian_urls: Vec<String>) -> BartenderConfig {
        BartenderConfig {
            librarian_urls,
            default_needed_replicas: 2,
        }
    }
}

pub struct Bartender {
    cfg: BartenderConfig,
    #[allow(dead_code)]
    weak_self: Weak<Bartender>,
}

/// Result of resolving a logical name through a librarian.
struct Resolved {
    levels: Vec<EntryMeta>,
    level_guids: Vec<String>,
    remainder: Vec<String>,
    terminal: Option<EntryMeta>,
}

impl Resolved {
    fn fully_resolved(&self) -> bool {
        self.remainder.is_empty()
    }

    fn terminal_summary(&self) -> Option<&EntryMeta> {
        if self.fully_resolved() {
            self.levels.last()
        } else {
            None
        }
    }

    fn terminal_guid(&self) -> Option<&str> {
        if self.fully_resolved() {
            self.level_guids.last().map(String::as_str)
        } else {
            None
        }
    }

    /// The mountpoint cut, if traversal stopped at one.
    fn mount_cut(&self) -> Option<(&EntryMeta, &[String])> {
        let last = self.levels.last()?;
        if last.entry_type == Some(EntryType::Mountpoint) {
            Some((last, &self.remainder))
        } else {
            None
        }
    }

    /// Parent of the terminal entry (depth >= 1 paths only).
    fn parent(&self) -> Option<(&str, &EntryMeta)> {
        if !self.fully_resolved() || self.levels.len() < 2 {
            return None;
        }
        let idx = self.levels.len() - 2;
        Some((&self.level_guids[idx], &self.levels[idx]))
    }
}

fn not_found(ln: &str) -> ServiceError {
    ServiceError::new(codes::NOT_FOUND, format!("{ln} does not resolve"))
}

fn access_denied(action: Action, ln: &str) -> ServiceError {
    ServiceError::new(
        codes::ACCESS_DENIED,
        format!("{} on {ln} denied", action.as_str()),
    )
}

impl Bartender {
    pub fn new(cfg: BartenderConfig) -> Arc<Bartender> {
        Arc::new_cyclic(|weak_self| Bartender {
            cfg,
            weak_self: weak_self.clone(),
        })
    }

    /// Forward an operation to any reachable librarian.
    fn librarian(&self, ctx: &CallCtx<'_>, op: &str, payload: Msg) -> Result<Msg, ServiceError> {
        let mut last: Option<CallError> = None;
        for url in &self.cfg.librarian_urls {
            match ctx.call(url, op, payload.clone()) {
                Ok(msg) => return Ok(msg),
                Err(CallError::Remote(e)) => return Err(e),
                Err(e) => last = Some(e),
            }
        }
        Err(ServiceError::new(
            codes::AHASH_UNAVAILABLE,
            format!("no librarian reachable: {last:?}"),
        ))
    }

    fn traverse(&self, ctx: &CallCtx<'_>, ln: &str, full: bool) -> Result<Resolved, ServiceError> {
        let payload = Msg::map()
            .str_field("ln", ln)
            .field("full", Msg::Bool(full))
            .build();
        let resp = self.librarian(ctx, "traverse", payload)?;
        let mut levels = Vec::new();
        let mut level_guids = Vec::new();
        for level in resp.get("levels").as_list().unwrap_or(&[]) {
            level_guids.push(level.get_str("guid").unwrap_or_default().to_string());
            levels.push(EntryMeta::from_msg(level));
        }
        let remainder = resp
            .get("remainder")
            .as_list()
            .unwrap_or(&[])
            .iter()
            .filter_map(|m| m.as_str().map(String::from))
            .collect();
        let terminal = match resp.get("terminal") {
            Msg::Null => None,
            t => Some(EntryMeta::from_msg(t)),
        };
        Ok(Resolved {
            levels,
            level_guids,
            remainder,
            terminal,
        })
    }

    fn check(
        &self,
        meta: &EntryMeta,
        identity: &str,
        action: Action,
        ln: &str,
    ) -> Result<(), ServiceError> {
        if evaluate(&meta.policy, identity, action) {
            Ok(())
        } else {
            Err(access_denied(action, ln))
        }
    }

    /// Resolve the parent collection of `ln` and check `action` on it.
    fn parent_of<'r>(
        &self,
        resolved: &'r Resolved,
        ln: &LogicalName,
        identity: &str,
        action: Action,
    ) -> Result<(&'r str, &'r EntryMeta), ServiceError> {
        // The traversal was over the parent path itself.
        let Some(meta) = resolved.terminal_summary() else {
            return Err(ServiceError::new(
                codes::PARENT_MISSING,
                format!("parent of {ln} does not resolve"),
            ));
        };
        if meta.entry_type != Some(EntryType::Collection) {
            return Err(ServiceError::new(
                codes::PARENT_MISSING,
                format!("parent of {ln} is not a collection"),
            ));
        }
        self.check(meta, identity, action, &ln.to_string())?;
        Ok((resolved.terminal_guid().unwrap(), meta))
    }

    fn default_policy(&self, identity: &str) -> Vec<String> {
        let mut rules = PolicyRule::owner_rules(identity);
        rules.push(PolicyRule::allow("ANY", [Action::Read]));
        policy::render(&rules)
    }

    fn policy_from_payload(&self, payload: &Msg, identity: &str) -> Vec<String> {
        let given: Vec<String> = payload
            .get("policy")
            .as_list()
            .unwrap_or(&[])
            .iter()
            .filter_map(|m| m.as_str().map(String::from))
            .collect();
        if given.is_empty() {
            self.default_policy(identity)
        } else {
            given
        }
    }

    fn handle_make_collection(
        &self,
        ctx: &CallCtx<'_>,
        payload: &Msg,
    ) -> Result<Msg, ServiceError> {
        let ln = LogicalName::parse(payload.get_str("ln").unwrap_or_default())
            .map_err(|e| ServiceError::new(codes::BAD_REQUEST, e.to_string()))?;
        let Some(parent_ln) = ln.parent() else {
            return Err(ServiceError::new(codes::NAME_TAKEN, "root already exists"));
        };
        let resolved = self.traverse(ctx, &parent_ln.to_string(), false)?;
        let (parent_guid, _) = self.parent_of(&resolved, &ln, ctx.caller_dn, Action::AddEntry)?;
        let create = Msg::map()
            .str_field("parent", parent_guid)
            .str_field("name", ln.leaf().unwrap())
            .str_field("type", "collection")
            .field(
                "policy",
                Msg::List(
                    self.policy_from_payload(payload, ctx.caller_dn)
                        .into_iter()
                        .map(Msg::Str)
                        .collect(),
                ),
            )
            .build();
        let resp = self.librarian(ctx, "create_entry", create)?;
        Ok(Msg::map()
            .str_field("guid", resp.get_str("guid").unwrap_or_default())
            .build())
    }

    fn handle_put_file(&self, ctx: &CallCtx<'_>, payload: &Msg) -> Result<Msg, ServiceError> {
        let ln = LogicalName::parse(payload.get_str("ln").unwrap_or_default())
            .map_err(|e| ServiceError::new(codes::BAD_REQUEST, e.to_string()))?;
        let Some(parent_ln) = ln.parent() else {
            return Err(ServiceError::new(codes::NAME_TAKEN, "cannot overwrite root"));
        };
        let size = payload.get_int("size").unwrap_or(0).max(0) as u64;
        let checksum = payload.get_str("checksum").unwrap_or_default().to_string();
        let checksum_type = payload.get_str("checksumType").unwrap_or_default().to_string();
        let needed = payload
            .get_int("neededReplicas")
            .map(|n| n.max(1) as u32)
            .unwrap_or(self.cfg.default_needed_replicas);

        let resolved = self.traverse(ctx, &parent_ln.to_string(), false)?;
        let (parent_guid, _) = self.parent_of(&resolved, &ln, ctx.caller_dn, Action::AddEntry)?;

        // Choose a destination before touching the namespace.
        let shepherds = self.shepherd_pool(ctx)?;
        let eligible: Vec<&ShepherdInfo> = shepherds
            .iter()
            .filter(|s| s.alive && s.capacity.saturating_sub(s.used) >= size)
            .collect();
        if eligible.is_empty() {
            return Err(ServiceError::new(
                codes::NO_SHEPHERD_AVAILABLE,
                "no live shepherd with enough space",
            ));
        }

        let create = Msg::map()
            .str_field("parent", parent_guid)
            .str_field("name", ln.leaf().unwrap())
            .str_field("type", "file")
            .int_field("size", size as i64)
            .str_field("checksum", &checksum)
            .str_field("checksumType", &checksum_type)
            .int_field("neededReplicas", needed as i64)
            .field(
                "policy",
                Msg::List(
                    self.policy_from_payload(payload, ctx.caller_dn)
                        .into_iter()
                        .map(Msg::Str)
                        .collect(),
                ),
            )
            .build();
        let resp = self.librarian(ctx, "create_entry", create)?;
        let guid = resp.get_str("guid").unwrap_or_default().to_string();

        // Least-used placement, ties broken by endpoint order.
        match self.place_replica(ctx, &guid, size, &checksum, &checksum_type, 0, &eligible) {
            Ok(turl) => Ok(Msg::map()
                .str_field("guid", &guid)
                .str_field("turl", &turl)
                .build()),
            Err(e) => {
                // Roll the entry back so no zero-location file lingers.
                let unlink = Msg::map()
                    .str_field("parent", parent_guid)
                    .str_field("name", ln.leaf().unwrap())
                    .str_field("guid", &guid)
                    .str_field("type", "file")
                    .field("delete", Msg::Bool(true))
                    .build();
                let _ = self.librarian(ctx, "unlink", unlink);
                Err(e)
            }
        }
    }

    /// put + conditional registration against one eligible shepherd after
    /// another (least-used first).
    fn place_replica(
        &self,
        ctx: &CallCtx<'_>,
        guid: &str,
        size: u64,
        checksum: &str,
        checksum_type: &str,
        locseq: u64,
        eligible: &[&ShepherdInfo],
    ) -> Result<String, ServiceError> {
        let mut ranked: Vec<&&ShepherdInfo> = eligible.iter().collect();
        ranked.sort_by_key(|s| (s.used, s.url.clone()));
        let mut last = ServiceError::new(codes::NO_SHEPHERD_AVAILABLE, "placement failed");
        for shep in ranked {
            let put = Msg::map()
                .str_field("guid", guid)
                .int_field("size", size as i64)
                .str_field("checksum", checksum)
                .str_field("checksumType", checksum_type)
                .build();
            let resp = match ctx.call(&shep.url, "put", put) {
                Ok(r) => r,
                Err(CallError::Remote(e)) => {
                    last = e;
                    continue;
                }
                Err(e) => {
                    last = ServiceError::new(codes::NO_SHEPHERD_AVAILABLE, e.to_string());
                    continue;
                }
            };
            let reference = resp.get_str("ref").unwrap_or_default().to_string();
            let turl = resp.get_str("turl").unwrap_or_default().to_string();

            let register = Msg::map()
                .str_field("guid", guid)
                .str_field("shepherd", &shep.url)
                .str_field("ref", &reference)
                .int_field("locseq", locseq as i64)
                .build();
            let reg = self.librarian(ctx, "register_location", register)?;
            if reg.get_str("result") == Some("applied") {
                return Ok(turl);
            }
            // Lost the registration race: release the reservation.
            let abort = Msg::map().str_field("ref", &reference).build();
            let _ = ctx.call(&shep.url, "abort_put", abort);
            return Err(ServiceError::new(
                codes::NOT_UNDER_REPLICATED,
                "another replica registration won",
            ));
        }
        Err(last)
    }

    fn handle_get_file(&self, ctx: &CallCtx<'_>, payload: &Msg) -> Result<Msg, ServiceError> {
        let ln_str = payload.get_str("ln").unwrap_or_default().to_string();
        LogicalName::parse(&ln_str)
            .map_err(|e| ServiceError::new(codes::BAD_REQUEST, e.to_string()))?;
        let resolved = self.traverse(ctx, &ln_str, true)?;

        // Through a mountpoint: hand out the external URL, touch nothing.
        if let Some((mount, remainder)) = resolved.mount_cut() {
            self.check(mount, ctx.caller_dn, Action::Read, &ln_str)?;
            let base = mount.mount_url.clone().unwrap_or_default();
            let url = if remainder.is_empty() {
                base
            } else {
                format!("{}/{}", base.trim_end_matches('/'), remainder.join("/"))
            };
            return Ok(Msg::map().str_field("external", &url).build());
        }

        if !resolved.fully_resolved() {
            return Err(not_found(&ln_str));
        }
        let terminal = resolved.terminal.as_ref().ok_or_else(|| not_found(&ln_str))?;
        self.check(terminal, ctx.caller_dn, Action::Read, &ln_str)?;
        if terminal.entry_type != Some(EntryType::File) {
            return Err(ServiceError::new(codes::NOT_A_FILE, ln_str));
        }
        let alive: Vec<&String> = terminal
            .locations
            .iter()
            .filter(|(_, s)| **s == ReplicaState::Alive)
            .map(|(k, _)| k)
            .collect();
        if alive.is_empty() {
            return Err(ServiceError::new(codes::NO_ALIVE_REPLICA, ln_str));
        }
        // Uniform random choice among ALIVE replicas.
        let pick = (ctx.rt.rand_u64() % alive.len() as u64) as usize;
        let Some((shep_url, _)) = crate::meta::split_location_key(alive[pick]) else {
            return Err(ServiceError::new(codes::NO_ALIVE_REPLICA, "bad location"));
        };
        let guid = resolved.terminal_guid().unwrap_or_default();
        let resp = ctx
            .call(shep_url, "get", Msg::map().str_field("guid", guid).build())
            .map_err(|e| match e {
                CallError::Remote(e) => e,
                other => ServiceError::new(codes::NO_ALIVE_REPLICA, other.to_string()),
            })?;
        Ok(Msg::map()
            .str_field("turl", resp.get_str("turl").unwrap_or_default())
            .build())
    }

    fn handle_stat(&self, ctx: &CallCtx<'_>, payload: &Msg) -> Result<Msg, ServiceError> {
        let ln = payload.get_str("ln").unwrap_or_default().to_string();
        LogicalName::parse(&ln)
            .map_err(|e| ServiceError::new(codes::BAD_REQUEST, e.to_string()))?;
        let resolved = self.traverse(ctx, &ln, true)?;
        if !resolved.fully_resolved() {
            return Err(not_found(&ln));
        }
        let terminal = resolved.terminal.as_ref().ok_or_else(|| not_found(&ln))?;
        self.check(terminal, ctx.caller_dn, Action::Read, &ln)?;
        let name = ln.trim_end_matches('/').rsplit('/').next().unwrap_or("");
        Ok(terminal.to_msg(resolved.terminal_guid().unwrap_or_default(), name, true))
    }

    fn handle_list(&self, ctx: &CallCtx<'_>, payload: &Msg) -> Result<Msg, ServiceError> {
        let ln = payload.get_str("ln").unwrap_or_default().to_string();
        let resolved = self.traverse(ctx, &ln, true)?;
        if !resolved.fully_resolved() {
            return Err(not_found(&ln));
        }
        let terminal = resolved.terminal.as_ref().ok_or_else(|| not_found(&ln))?;
        self.check(terminal, ctx.caller_dn, Action::Read, &ln)?;
        if terminal.entry_type != Some(EntryType::Collection) {
            return Err(ServiceError::new(codes::NOT_A_COLLECTION, ln));
        }
        let entries = terminal
            .entries
            .iter()
            .map(|(name, (guid, t))| {
                (
                    name.clone(),
                    Msg::map()
                        .str_field("guid", guid)
                        .str_field("type", t.as_str())
                        .build(),
                )
            })
            .collect();
        Ok(Msg::map().field("entries", Msg::Map(entries)).build())
    }

    fn handle_del_file(&self, ctx: &CallCtx<'_>, payload: &Msg) -> Result<Msg, ServiceError> {
        let ln = LogicalName::parse(payload.get_str("ln").unwrap_or_default())
            .map_err(|e| ServiceError::new(codes::BAD_REQUEST, e.to_string()))?;
        let ln_str = ln.to_string();
        let resolved = self.traverse(ctx, &ln_str, false)?;
        if !resolved.fully_resolved() {
            return Err(not_found(&ln_str));
        }
        let terminal = resolved.terminal_summary().ok_or_else(|| not_found(&ln_str))?;
        let etype = terminal.entry_type.ok_or_else(|| not_found(&ln_str))?;
        if etype == EntryType::Collection {
            return Err(ServiceError::new(codes::NOT_A_FILE, ln_str));
        }
        let guid = resolved.terminal_guid().unwrap().to_string();
        let (parent_guid, parent_meta) = resolved
            .parent()
            .ok_or_else(|| ServiceError::new(codes::BAD_REQUEST, "cannot delete root"))?;
        self.check(parent_meta, ctx.caller_dn, Action::RemoveEntry, &ln_str)?;

        // Unlink, then drop the object. Shepherds notice the vanished
        // metadata on their next check and delete replica bytes.
        let unlink = Msg::map()
            .str_field("parent", parent_guid)
            .str_field("name", ln.leaf().unwrap())
            .str_field("guid", &guid)
            .str_field("type", etype.as_str())
            .field("delete", Msg::Bool(true))
            .build();
        self.librarian(ctx, "unlink", unlink)?;
        Ok(Msg::Null)
    }

    fn handle_unmake_collection(
        &self,
        ctx: &CallCtx<'_>,
        payload: &Msg,
    ) -> Result<Msg, ServiceError> {
        let ln = LogicalName::parse(payload.get_str("ln").unwrap_or_default())
            .map_err(|e| ServiceError::new(codes::BAD_REQUEST, e.to_string()))?;
        let ln_str = ln.to_string();
        let resolved = self.traverse(ctx, &ln_str, false)?;
        if !resolved.fully_resolved() {
            return Err(not_found(&ln_str));
        }
        let terminal = resolved.terminal_summary().ok_or_else(|| not_found(&ln_str))?;
        if terminal.entry_type != Some(EntryType::Collection) {
            return Err(ServiceError::new(codes::NOT_A_COLLECTION, ln_str));
        }
        if terminal.child_count > 0 {
            return Err(ServiceError::new(codes::NOT_EMPTY, ln_str));
        }
        let guid = resolved.terminal_guid().unwrap().to_string();
        let (parent_guid, parent_meta) = resolved
            .parent()
            .ok_or_else(|| ServiceError::new(codes::BAD_REQUEST, "cannot remove root"))?;
        self.check(parent_meta, ctx.caller_dn, Action::RemoveEntry, &ln_str)?;
        let unlink = Msg::map()
            .str_field("parent", parent_guid)
            .str_field("name", ln.leaf().unwrap())
            .str_field("guid", &guid)
            .str_field("type", "collection")
            .field("delete", Msg::Bool(true))
            .build();
        self.librarian(ctx, "unlink", unlink)?;
        Ok(Msg::Null)
    }

    fn handle_move(&self, ctx: &CallCtx<'_>, payload: &Msg) -> Result<Msg, ServiceError> {
        let src = LogicalName::parse(payload.get_str("src").unwrap_or_default())
            .map_err(|e| ServiceError::new(codes::BAD_REQUEST, e.to_string()))?;
        let dst = LogicalName::parse(payload.get_str("dst").unwrap_or_default())
            .map_err(|e| ServiceError::new(codes::BAD_REQUEST, e.to_string()))?;
        let (Some(_), Some(dst_parent)) = (src.parent(), dst.parent()) else {
            return Err(ServiceError::new(codes::BAD_REQUEST, "cannot move the root"));
        };
        let src_str = src.to_string();

        let resolved = self.traverse(ctx, &src_str, false)?;
        if !resolved.fully_resolved() {
            return Err(not_found(&src_str));
        }
        let terminal = resolved.terminal_summary().ok_or_else(|| not_found(&src_str))?;
        let etype = terminal.entry_type.ok_or_else(|| not_found(&src_str))?;
        let guid = resolved.terminal_guid().unwrap().to_string();
        let (src_parent_guid, src_parent_meta) = resolved
            .parent()
            .ok_or_else(|| ServiceError::new(codes::BAD_REQUEST, "cannot move the root"))?;
        self.check(src_parent_meta, ctx.caller_dn, Action::RemoveEntry, &src_str)?;

        // Same-collection rename commits atomically in one batch.
        if src.parent() == Some(dst_parent.clone()) {
            self.check(src_parent_meta, ctx.caller_dn, Action::AddEntry, &dst.to_string())?;
            let rename = Msg::map()
                .str_field("parent", src_parent_guid)
                .str_field("from", src.leaf().unwrap())
                .str_field("to", dst.leaf().unwrap())
                .str_field("guid", &guid)
                .str_field("type", etype.as_str())
                .build();
            self.librarian(ctx, "rename", rename)?;
            return Ok(Msg::map().str_field("guid", &guid).build());
        }

        let src_parent_guid = src_parent_guid.to_string();
        let dst_resolved = self.traverse(ctx, &dst_parent.to_string(), false)?;
        let (dst_parent_guid, _) =
            self.parent_of(&dst_resolved, &dst, ctx.caller_dn, Action::AddEntry)?;

        // Link at the destination first so the entry is never unreachable;
        // then retire the source link.
        let link = Msg::map()
            .str_field("parent", dst_parent_guid)
            .str_field("name", dst.leaf().unwrap())
            .str_field("guid", &guid)
            .str_field("type", etype.as_str())
            .build();
        self.librarian(ctx, "link", link)?;
        let unlink = Msg::map()
            .str_field("parent", &src_parent_guid)
            .str_field("name", src.leaf().unwrap())
            .str_field("guid", &guid)
            .str_field("type", etype.as_str())
            .field("delete", Msg::Bool(false))
            .build();
        self.librarian(ctx, "unlink", unlink)?;
        Ok(Msg::map().str_field("guid", &guid).build())
    }

    fn handle_mount(&self, ctx: &CallCtx<'_>, payload: &Msg) -> Result<Msg, ServiceError> {
        let ln = LogicalName::parse(payload.get_str("ln").unwrap_or_default())
            .map_err(|e| ServiceError::new(codes::BAD_REQUEST, e.to_string()))?;
        let url = payload.get_str("url").unwrap_or_default();
        if url.is_empty() {
            return Err(ServiceError::new(codes::BAD_REQUEST, "mount needs a url"));
        }
        let Some(parent_ln) = ln.parent() else {
            return Err(ServiceError::new(codes::NAME_TAKEN, "cannot mount over root"));
        };
        let resolved = self.traverse(ctx, &parent_ln.to_string(), false)?;
        let (parent_guid, _) = self.parent_of(&resolved, &ln, ctx.caller_dn, Action::AddEntry)?;
        let create = Msg::map()
            .str_field("parent", parent_guid)
            .str_field("name", ln.leaf().unwrap())
            .str_field("type", "mountpoint")
            .str_field("mountURL", url)
            .field(
                "policy",
                Msg::List(
                    self.policy_from_payload(payload, ctx.caller_dn)
                        .into_iter()
                        .map(Msg::Str)
                        .collect(),
                ),
            )
            .build();
        let resp = self.librarian(ctx, "create_entry", create)?;
        Ok(Msg::map()
            .str_field("guid", resp.get_str("guid").unwrap_or_default())
            .build())
    }

    /// Repair brokerage for shepherds: choose a destination distinct from
    /// every current holder, reserve, register conditionally, return the
    /// upload ticket.
    fn handle_add_replica(&self, ctx: &CallCtx<'_>, payload: &Msg) -> Result<Msg, ServiceError> {
        let guid = payload.get_str("guid").unwrap_or_default().to_string();
        let metas = self.librarian(
            ctx,
            "get_metadata",
            Msg::map()
                .field("guids", Msg::List(vec![Msg::str(guid.clone())]))
                .build(),
        )?;
        let meta_msg = metas.get("metas").get(&guid).clone();
        if meta_msg == Msg::Null {
            return Err(ServiceError::new(codes::NOT_FOUND, guid));
        }
        let meta = EntryMeta::from_msg(&meta_msg);
        let needed = meta.needed_replicas as usize;
        if meta.alive_count() + meta.creating_count() >= needed {
            return Err(ServiceError::new(
                codes::NOT_UNDER_REPLICATED,
                "replica count already satisfied",
            ));
        }
        let holders = meta.holders();
        let shepherds = self.shepherd_pool(ctx)?;
        let eligible: Vec<&ShepherdInfo> = shepherds
            .iter()
            .filter(|s| {
                s.alive
                    && !holders.contains(&s.url)
                    && s.capacity.saturating_sub(s.used) >= meta.size
            })
            .collect();
        if eligible.is_empty() {
            return Err(ServiceError::new(
                codes::NO_ELIGIBLE_SHEPHERD,
                "every live shepherd already holds this file or lacks space",
            ));
        }
        let turl = self.place_replica(
            ctx,
            &guid,
            meta.size,
            &meta.checksum,
            &meta.checksum_type,
            meta.locseq,
            &eligible,
        )?;
        Ok(Msg::map().str_field("turl", &turl).build())
    }

    fn shepherd_pool(&self, ctx: &CallCtx<'_>) -> Result<Vec<ShepherdInfo>, ServiceError> {
        let resp = self.librarian(ctx, "registry", Msg::Null)?;
        let mut out = Vec::new();
        for (url, info) in resp.get("shepherds").as_map().into_iter().flatten() {
            out.push(ShepherdInfo {
                url: url.clone(),
                alive: info.get("alive").as_bool().unwrap_or(false),
                capacity: info.get_int("capacity").unwrap_or(0).max(0) as u64,
                used: info.get_int("used").unwrap_or(0).max(0) as u64,
            });
        }
        Ok(out)
    }
}

struct ShepherdInfo {
    url: String,
    alive: bool,
    capacity: u64,
    used: u64,
}

impl Service for Bartender {
    fn handle(&self, ctx: &CallCtx<'_>, op: &str, payload: &Msg) -> Result<Msg, ServiceError> {
        match op {
            "make_collection" => self.handle_make_collection(ctx, payload),
            "unmake_collection" => self.handle_unmake_collection(ctx, payload),
            "put_file" => self.handle_put_file(ctx, payload),
            "get_file" => self.handle_get_file(ctx, payload),
            "del_file" => self.handle_del_file(ctx, payload),
            "move" => self.handle_move(ctx, payload),
            "list" => self.handle_list(ctx, payload),
            "stat" => self.handle_stat(ctx, payload),
            "mount" => self.handle_mount(ctx, payload),
            "add_replica" => self.handle_add_replica(ctx, payload),
            _ => Err(ServiceError::new(
                codes::BAD_REQUEST,
                format!("unknown op {op}"),
            )),
        }
    }

    /// Client-facing operations skip the container trust gate: users are
    /// authorized per entry by policy. Repair brokering stays inter-service.
    fn is_internal(&self, op: &str) -> bool {
        op == "add_replica"
    }
}
