//! The service container: hosts services, routes request messages, bounds
//! concurrency with a worker pool, and enforces inter-service trust.
//!
//! Two transports implement the same contract: a deterministic in-process
//! simulation ([`sim`]) driven by a virtual clock, and a real TCP transport
//! ([`socket`]) with length-prefixed frames. Services are written against
//! [`CallCtx`]/[`Runtime`] only, so the same service code runs on both.

pub mod config;
pub mod envelope;
pub mod sim;
pub mod socket;

use std::collections::BTreeSet;
use std::sync::Arc;

use crate::codec::Msg;
use crate::content::Content;
use crate::vtime::Nanos;
use envelope::{CallError, CallResult, ServiceError};

/// A routable service address plus the identity it runs under.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct ServiceEndpoint {
    pub url: String,
    pub dn: String,
}

/// Worker-pool bounds of one host.
#[derive(Debug, Clone, Copy)]
pub struct WorkerPoolConfig {
    pub max_concurrent: usize,
    pub queue_capacity: usize,
}

impl Default for WorkerPoolConfig {
    fn default() -> Self {
        WorkerPoolConfig {
            max_concurrent: 64,
            queue_capacity: 256,
        }
    }
}

impl WorkerPoolConfig {
    pub fn new(max_concurrent: usize, queue_capacity: usize) -> Self {
        assert!(max_concurrent >= 1, "worker pool needs at least one worker");
        WorkerPoolConfig {
            max_concurrent,
            queue_capacity,
        }
    }
}

/// Message counters of a transport. Counters only grow; `reset` is explicit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TransportStats {
    pub message_count: u64,
    pub bytes_sent: u64,
    /// Base per-message latency currently configured (simulation only).
    pub simulated_latency: Nanos,
}

/// Per-trace message/byte tallies, used by benchmarks to attribute cost to
/// an individual root operation regardless of background traffic.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TraceStats {
    pub messages: u64,
    pub bytes: u64,
}

/// What a service sees of its surroundings. Implemented by both transports;
/// services must obtain time, randomness and sleeping from here so that
/// simulated runs stay deterministic.
pub trait Runtime: Send + Sync {
    /// Issue a request as `self_endpoint().dn`, propagating `trace`.
    fn call_raw(&self, trace: u64, target_url: &str, op: &str, payload: Msg) -> CallResult;
    /// Redeem a transfer ticket: upload when `body` is `Some`, download when
    /// `None`. Byte-stream lane, not subject to the worker pool.
    fn transfer_raw(
        &self,
        trace: u64,
        turl: &str,
        body: Option<Content>,
    ) -> Result<Option<Content>, CallError>;
    fn now(&self) -> Nanos;
    fn sleep(&self, ns: Nanos);
    fn rand_u64(&self) -> u64;
    fn self_endpoint(&self) -> &ServiceEndpoint;
    fn is_simulation(&self) -> bool;
}

impl dyn Runtime + '_ {
    pub fn rand_hex(&self, bytes: usize) -> String {
        let mut out = String::with_capacity(bytes * 2);
        let mut remaining = bytes;
        while remaining > 0 {
            let chunk = self.rand_u64().to_le_bytes();
            let take = remaining.min(8);
            out.push_str(&hex::encode(&chunk[..take]));
            remaining -= take;
        }
        out
    }
}

/// Per-request context handed to a handler.
pub struct CallCtx<'a> {
    pub caller_dn: &'a str,
    pub trace: u64,
    pub rt: &'a dyn Runtime,
}

impl<'a> CallCtx<'a> {
    pub fn call(&self, target_url: &str, op: &str, payload: Msg) -> CallResult {
        self.rt.call_raw(self.trace, target_url, op, payload)
    }

    pub fn now(&self) -> Nanos {
        self.rt.now()
    }
}

/// A periodic activity owned by a service instance (heartbeats, scrubbing,
/// election timers). The transport runs `tick` every `period` of transport
/// time, starting after `phase`.
pub struct BackgroundTask {
    pub name: String,
    pub period: Nanos,
    pub phase: Nanos,
    pub tick: Arc<dyn Fn(&dyn Runtime) + Send + Sync>,
}

/// A hosted service: an operation dispatch function plus trust metadata and
/// lifecycle hooks.
pub trait Service: Send + Sync {
    fn handle(&self, ctx: &CallCtx<'_>, op: &str, payload: &Msg) -> Result<Msg, ServiceError>;

    /// Whether `op` is inter-service (subject to the trusted-DN check).
    /// Client-facing operations return false.
    fn is_internal(&self, _op: &str) -> bool {
        true
    }

    /// Called when the hosting process starts or restarts, before any
    /// request is delivered. Volatile state must be rebuilt here.
    fn on_start(&self, _rt: &dyn Runtime) {}

    fn background_tasks(&self) -> Vec<BackgroundTask> {
        Vec::new()
    }
}

/// Byte-stream endpoint of a host (the storage-element side of a shepherd).
/// Handlers get a runtime because completing a transfer has consequences:
/// checksum verification, state reports, repair brokering.
pub trait TransferHandler: Send + Sync {
    fn upload(&self, rt: &dyn Runtime, token: &str, content: Content) -> Result<(), ServiceError>;
    fn download(&self, rt: &dyn Runtime, token: &str) -> Result<Content, ServiceError>;
}

/// The trusted-DN decision: allow iff the caller's DN is in the target's
/// list. An empty list denies all inter-service calls.
pub fn check_trust(caller_dn: &str, trusted: &BTreeSet<String>) -> bool {
    trusted.contains(caller_dn)
}

/// A registered service instance as the container sees it.
pub struct ServiceSpec {
    pub name: String,
    pub dn: String,
    pub trusted: BTreeSet<String>,
    pub service: Arc<dyn Service>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trust_is_list_membership() {
        let mut trusted = BTreeSet::new();
        assert!(!check_trust("CN=shepherd1", &trusted), "empty list denies");
        trusted.insert("CN=shepherd1".to_string());
        assert!(check_trust("CN=shepherd1", &trusted));
        assert!(!check_trust("CN=rogue", &trusted));
    }
}
