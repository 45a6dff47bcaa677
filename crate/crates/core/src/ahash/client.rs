//! Client-side access to a replicated store deployment.
//!
//! Reads go to a sticky preferred replica and fail over on connection
//! errors. Writes follow the master: the client cannot know a priori which
//! node is the master, so it discovers it via `status`, chases `not-master`
//! redirects, and retries with backoff through elections. The node list is
//! refreshed from the store itself both on failure and when asked.

use std::collections::BTreeMap;

use parking_lot::Mutex;

use crate::codec::Msg;
use crate::hed::envelope::{codes, CallError, ServiceError};
use crate::hed::CallCtx;
use crate::vtime::{secs, Nanos};

use super::store::{object_from_msg, ChangeOutcome, ChangeRequest, Object};

#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub attempts: usize,
    pub backoff_base: Nanos,
    pub backoff_cap: Nanos,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 12,
            backoff_base: secs(0.5),
            backoff_cap: secs(2.0),
        }
    }
}

impl RetryPolicy {
    pub fn backoff(&self, attempt: usize) -> Nanos {
        let mut b = self.backoff_base;
        for _ in 0..attempt {
            b = (b * 3 / 2).min(self.backoff_cap);
        }
        b
    }
}

struct Cached {
    nodes: Vec<String>,
    preferred: usize,
    master_url: Option<String>,
}

pub struct AHashClient {
    cache: Mutex<Cached>,
    initial: Vec<String>,
    policy: RetryPolicy,
}

impl AHashClient {
    pub fn new(initial_urls: Vec<String>, policy: RetryPolicy) -> AHashClient {
        assert!(!initial_urls.is_empty(), "need at least one store endpoint");
        AHashClient {
            cache: Mutex::new(Cached {
                nodes: initial_urls.clone(),
                preferred: 0,
                master_url: None,
            }),
            initial: initial_urls,
            policy,
        }
    }

    pub fn known_nodes(&self) -> Vec<String> {
        self.cache.lock().nodes.clone()
    }

    fn unavailable(detail: &str) -> ServiceError {
        ServiceError::new(codes::AHASH_UNAVAILABLE, detail.to_string())
    }

    /// Read from any live replica: sticky preferred node, rotate on
    /// connection failure, refresh the node list after a full sweep.
    fn read_call(&self, ctx: &CallCtx<'_>, op: &str, payload: Msg) -> Result<Msg, ServiceError> {
        for attempt in 0..self.policy.attempts {
            let (nodes, start) = {
                let c = self.cache.lock();
                (c.nodes.clone(), c.preferred)
            };
            for i in 0..nodes.len() {
                let idx = (start + i) % nodes.len();
                match ctx.call(&nodes[idx], op, payload.clone()) {
                    Ok(msg) => {
                        let mut c = self.cache.lock();
                        c.preferred = idx;
                        return Ok(msg);
                    }
                    Err(CallError::Remote(e)) => return Err(e),
                    Err(_) => continue, // node down; try the next replica
                }
            }
            self.refresh_node_list(ctx);
            ctx.rt.sleep(self.policy.backoff(attempt));
        }
        Err(Self::unavailable("no store replica reachable"))
    }

    /// Refresh the cached node list from any replica that answers,
    /// falling back to the initial bootstrap endpoints.
    pub fn refresh_node_list(&self, ctx: &CallCtx<'_>) {
        let candidates: Vec<String> = {
            let c = self.cache.lock();
            c.nodes
                .iter()
                .chain(self.initial.iter())
                .cloned()
                .collect()
        };
        for url in candidates {
            if let Ok(resp) = ctx.call(&url, "node_list", Msg::Null) {
                let mut nodes: Vec<String> = resp
                    .get("nodes")
                    .as_map()
                    .map(|m| m.values().filter_map(|v| v.as_str().map(String::from)).collect())
                    .unwrap_or_default();
                nodes.sort();
                if !nodes.is_empty() {
                    let mut c = self.cache.lock();
                    c.nodes = nodes;
                    c.preferred = c.preferred.min(c.nodes.len() - 1);
                    return;
                }
            }
        }
        let mut c = self.cache.lock();
        c.nodes = self.initial.clone();
        c.preferred = 0;
    }

    fn discover_master(&self, ctx: &CallCtx<'_>) -> Option<String> {
        let nodes = {
            let c = self.cache.lock();
            c.nodes.clone()
        };
        for url in &nodes {
            if let Ok(resp) = ctx.call(url, "status", Msg::Null) {
                if let Some(master_url) = resp.get_str("master_url") {
                    if !master_url.is_empty() {
                        let mut c = self.cache.lock();
                        c.master_url = Some(master_url.to_string());
                        return Some(master_url.to_string());
                    }
                }
            }
        }
        None
    }

    pub fn get(
        &self,
        ctx: &CallCtx<'_>,
        ids: &[String],
    ) -> Result<BTreeMap<String, Object>, ServiceError> {
        let payload = Msg::map()
            .field(
                "ids",
                Msg::List(ids.iter().map(|s| Msg::Str(s.clone())).collect()),
            )
            .build();
        let resp = self.read_call(ctx, "get", payload)?;
        let mut out = BTreeMap::new();
        for (id, obj) in resp.get("objects").as_map().into_iter().flatten() {
            out.insert(
                id.clone(),
                object_from_msg(obj).unwrap_or_default(),
            );
        }
        Ok(out)
    }

    pub fn get_one(&self, ctx: &CallCtx<'_>, id: &str) -> Result<Object, ServiceError> {
        Ok(self
            .get(ctx, &[id.to_string()])?
            .remove(id)
            .unwrap_or_default())
    }

    /// Submit a batch to the master, following redirects and elections.
    pub fn change(
        &self,
        ctx: &CallCtx<'_>,
        batch: BTreeMap<String, ChangeRequest>,
    ) -> Result<BTreeMap<String, ChangeOutcome>, ServiceError> {
        let changes: BTreeMap<String, Msg> = batch
            .iter()
            .map(|(id, req)| (id.clone(), req.to_msg()))
            .collect();
        let payload = Msg::map().field("changes", Msg::Map(changes)).build();

        for attempt in 0..self.policy.attempts {
            let target = {
                let c = self.cache.lock();
                c.master_url.clone()
            };
            let target = match target {
                Some(t) => Some(t),
                None => self.discover_master(ctx),
            };
            let Some(target) = target else {
                ctx.rt.sleep(self.policy.backoff(attempt));
                self.refresh_node_list(ctx);
                continue;
            };
            match ctx.call(&target, "change", payload.clone()) {
                Ok(resp) => {
                    let mut out = BTreeMap::new();
                    for (id, outcome) in resp.get("results").as_map().into_iter().flatten() {
                        let o = match outcome.as_str() {
                            Some("applied") => ChangeOutcome::Applied,
                            Some("condition-failed") => ChangeOutcome::ConditionFailed,
                            _ => ChangeOutcome::Failed,
                        };
                        out.insert(id.clone(), o);
                    }
                    return Ok(out);
                }
                Err(CallError::Remote(e)) if e.is(codes::NOT_MASTER) => {
                    let hint = e.data.as_str().unwrap_or_default().to_string();
                    let mut c = self.cache.lock();
                    c.master_url = if hint.is_empty() { None } else { Some(hint) };
                    // Redirects are free retries: do not burn an attempt.
                    continue;
                }
                Err(CallError::Remote(e))
                    if e.is(codes::NO_MASTER) || e.is(codes::NO_QUORUM) =>
                {
                    self.cache.lock().master_url = None;
                    ctx.rt.sleep(self.policy.backoff(attempt));
                }
                Err(CallError::Remote(e)) => return Err(e),
                Err(_) => {
                    self.cache.lock().master_url = None;
                    self.refresh_node_list(ctx);
                    ctx.rt.sleep(self.policy.backoff(attempt));
                }
            }
        }
        Err(Self::unavailable("no writable master within retry budget"))
    }

    /// One-request convenience for a single conditional change.
    pub fn change_one(
        &self,
        ctx: &CallCtx<'_>,
        req: ChangeRequest,
    ) -> Result<ChangeOutcome, ServiceError> {
        let mut batch = BTreeMap::new();
        batch.insert("0".to_string(), req);
        let out = self.change(ctx, batch)?;
        Ok(*out.get("0").unwrap_or(&ChangeOutcome::Failed))
    }
}
