//! Request envelopes and the error surface of the RPC layer.

use crate::codec::Msg;
use thiserror::Error;

/// Stable error code strings. These cross the wire and are matched on by
/// clients, so they must never change.
pub mod codes {
    pub const DUPLICATE_NAME: &str = "duplicate-name";
    pub const UNKNOWN_TARGET: &str = "unknown-target";
    pub const QUEUE_FULL: &str = "queue-full";
    pub const TRANSPORT_FAILURE: &str = "transport-failure";
    pub const TIMEOUT: &str = "timeout";
    pub const TRUST_DENIED: &str = "trust-denied";
    pub const NOT_SIMULATION: &str = "not-simulation-transport";
    pub const BAD_REQUEST: &str = "bad-request";

    pub const NODE_DOWN: &str = "node-down";
    pub const NOT_MASTER: &str = "not-master";
    pub const NO_MASTER: &str = "no-master";
    pub const NO_QUORUM: &str = "no-quorum";
    pub const GAP_DETECTED: &str = "gap-detected";
    pub const NOT_FROM_MASTER: &str = "not-from-master";
    pub const NO_MAJORITY: &str = "no-majority";

    pub const AHASH_UNAVAILABLE: &str = "ahash-unavailable";
    pub const UNKNOWN_SHEPHERD: &str = "unknown-shepherd";

    pub const INSUFFICIENT_SPACE: &str = "insufficient-space";
    pub const BACKEND_FAILURE: &str = "backend-failure";
    pub const NO_ALIVE_REPLICA: &str = "no-alive-replica";
    pub const TICKET_INVALID: &str = "ticket-invalid";

    pub const ACCESS_DENIED: &str = "access-denied";
    pub const PARENT_MISSING: &str = "parent-missing";
    pub const NAME_TAKEN: &str = "name-taken";
    pub const NOT_FOUND: &str = "not-found";
    pub const NOT_EMPTY: &str = "not-empty";
    pub const NOT_A_FILE: &str = "not-a-file";
    pub const NOT_A_COLLECTION: &str = "not-a-collection";
    pub const NO_SHEPHERD_AVAILABLE: &str = "no-shepherd-available";
    pub const NO_ELIGIBLE_SHEPHERD: &str = "no-eligible-shepherd";
    pub const NOT_UNDER_REPLICATED: &str = "not-under-replicated";
}

/// An application-level error returned by a service handler. The optional
/// `data` carries structured hints (e.g. the current master endpoint on
/// `not-master`).
#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("{code}: {message}")]
pub struct ServiceError {
    pub code: String,
    pub message: String,
    pub data: Msg,
}

impl ServiceError {
    pub fn new(code: &str, message: impl Into<String>) -> ServiceError {
        ServiceError {
            code: code.to_string(),
            message: message.into(),
            data: Msg::Null,
        }
    }

    pub fn with_data(code: &str, message: impl Into<String>, data: Msg) -> ServiceError {
        ServiceError {
            code: code.to_string(),
            message: message.into(),
            data,
        }
    }

    pub fn is(&self, code: &str) -> bool {
        self.code == code
    }

    pub fn to_msg(&self) -> Msg {
        Msg::map()
            .str_field("code", &self.code)
            .str_field("message", &self.message)
            .field("data", self.data.clone())
            .build()
    }

    pub fn from_msg(msg: &Msg) -> ServiceError {
        ServiceError {
            code: msg.get_str("code").unwrap_or("unknown").to_string(),
            message: msg.get_str("message").unwrap_or_default().to_string(),
            data: msg.get("data").clone(),
        }
    }
}

/// Errors observed by the caller of `call`. Transport-level outcomes are
/// distinguished from errors the remote handler returned.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum CallError {
    #[error("remote error: {0}")]
    Remote(ServiceError),
    #[error("unknown target {0}")]
    UnknownTarget(String),
    #[error("worker queue full at {0}")]
    QueueFull(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("call timed out")]
    Timeout,
}

impl CallError {
    /// Stable code for CLI/client reporting.
    pub fn code(&self) -> &str {
        match self {
            CallError::Remote(e) => &e.code,
            CallError::UnknownTarget(_) => codes::UNKNOWN_TARGET,
            CallError::QueueFull(_) => codes::QUEUE_FULL,
            CallError::Transport(_) => codes::TRANSPORT_FAILURE,
            CallError::Timeout => codes::TIMEOUT,
        }
    }

    pub fn remote(code: &str, message: impl Into<String>) -> CallError {
        CallError::Remote(ServiceError::new(code, message))
    }

    /// True for outcomes worth retrying against the same or another replica.
    pub fn is_retryable(&self) -> bool {
        match self {
            CallError::Remote(e) => {
                e.is(codes::QUEUE_FULL)
                    || e.is(codes::NO_MASTER)
                    || e.is(codes::NO_QUORUM)
                    || e.is(codes::NODE_DOWN)
            }
            CallError::UnknownTarget(_) => false,
            CallError::QueueFull(_) | CallError::Transport(_) | CallError::Timeout => true,
        }
    }
}

pub type CallResult = Result<Msg, CallError>;

/// One request message. `payload_size` is the encoded payload length and is
/// what the transport accounts against bandwidth and byte counters.
#[derive(Debug, Clone)]
pub struct RequestEnvelope {
    pub request_id: u64,
    pub caller_dn: String,
    pub target_url: String,
    pub service: String,
    pub operation: String,
    pub trace: u64,
    pub payload: Msg,
}

impl RequestEnvelope {
    /// Encoded request size: payload plus the fixed header fields.
    pub fn wire_size(&self) -> u64 {
        let header = 8 // request id
            + self.caller_dn.len()
            + self.target_url.len()
            + self.operation.len()
            + 8 // trace
            + 16; // tags and length fields
        header as u64 + self.payload.encoded_len() as u64
    }
}

/// Encoded response size for accounting: payload plus a small fixed header.
pub fn response_wire_size(result: &CallResult) -> u64 {
    let body = match result {
        Ok(msg) => msg.encoded_len(),
        Err(CallError::Remote(e)) => e.to_msg().encoded_len(),
        Err(_) => 32,
    };
    16 + body as u64
}

/// Split `scheme://host/Service` into (host, service).
pub fn parse_service_url(url: &str) -> Option<(String, String)> {
    let rest = url.split_once("://")?.1;
    let (host, service) = rest.split_once('/')?;
    if host.is_empty() || service.is_empty() || service.contains('/') {
        return None;
    }
    Some((host.to_string(), service.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn url_parsing() {
        assert_eq!(
            parse_service_url("sim://host1/Bartender"),
            Some(("host1".into(), "Bartender".into()))
        );
        assert_eq!(
            parse_service_url("chel://127.0.0.1:4001/AHash"),
            Some(("127.0.0.1:4001".into(), "AHash".into()))
        );
        assert_eq!(parse_service_url("no-scheme/Service"), None);
        assert_eq!(parse_service_url("sim://host-only"), None);
    }

    #[test]
    fn service_error_roundtrip() {
        let err = ServiceError::with_data(
            codes::NOT_MASTER,
            "redirect",
            Msg::str("sim://ahash2/AHash"),
        );
        assert_eq!(ServiceError::from_msg(&err.to_msg()), err);
    }
}
