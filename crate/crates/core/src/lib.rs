//! A self-healing distributed storage system.
//!
//! Four cooperating services form the storage cloud:
//!
//! * [`ahash`] — the replicated object store holding all persistent state:
//!   single writable master, any-replica reads, majority election.
//! * [`librarian`] — stateless namespace and metadata service over the
//!   store; monitors storage-node heartbeats.
//! * [`shepherd`] — storage node: replica bytes, one-time transfer tickets,
//!   checksum scrubbing and the replica lifecycle state machine.
//! * [`bartender`] — the user-facing API: namespace commands, policy
//!   checks, upload/download brokering (tickets only, never bytes) and
//!   mount-point gateways.
//!
//! Services run inside the [`hed`] container, which provides either a
//! deterministic in-process simulation or a real TCP transport. The
//! [`harness`] builds whole simulated deployments, injects faults on a
//! virtual-time schedule and reproduces the reference experiments as CSV
//! timelines.

pub mod ahash;
pub mod bartender;
pub mod client;
pub mod codec;
pub mod content;
pub mod harness;
pub mod hed;
pub mod librarian;
pub mod meta;
pub mod shepherd;
pub mod vtime;
