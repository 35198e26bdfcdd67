//! Safe memory reclamation (SMR) for lock-free data structures.
//!
//! Concurrent lock-free structures cannot free an unlinked node as long as
//! another thread may still be reading it. This crate bundles six reclamation
//! schemes behind a single guard/region interface so that the same data
//! structure code runs unchanged under any of them:
//!
//! * [`stamp::StampIt`] — threads order themselves in a lock-free
//!   doubly-linked list by a global entry stamp; retired nodes carry the stamp
//!   current at retire time and become reclaimable once no thread with a lower
//!   stamp remains in a critical region. Reclamation touches only nodes it can
//!   actually reclaim.
//! * [`hazard::HazardPointer`] — per-thread single-writer slots publish the
//!   nodes in use; a scan reclaims retired nodes absent from all slots.
//!   Static (k slots) and dynamic (growable) modes.
//! * [`epoch::Ebr`] / [`epoch::Nebr`] — three-epoch limbo lists with a global
//!   epoch counter; NER widens critical regions over many operations.
//! * [`epoch::Qsbr`] — quiescent-state-based reclamation with a non-blocking
//!   fuzzy barrier.
//! * [`refcount::RefCount`] — lock-free reference counting with a claim bit
//!   and free-list recycling (padded and thread-local-buffer variants).
//!
//! The [`ds`] module provides a Michael–Scott queue, a Harris–Michael ordered
//! list set and a fixed-bucket hash map, all generic over the reclaimer. The
//! [`bench`] module (and the `bench` binary) drives them through throughput,
//! guard-overhead and reclamation-efficiency experiments and writes CSV.
//!
//! Thread participation is explicit: a thread calls
//! [`Collector::register`](collector::Collector::register) for a
//! [`ThreadContext`](collector::ThreadContext) and creates guards and regions
//! through it. Nothing is stored in TLS, so tests can drive several logical
//! threads from one OS thread.

pub mod bench;
pub mod collector;
pub mod ds;
pub mod epoch;
pub mod hazard;
pub mod refcount;
pub mod stamp;
#[doc(hidden)]
pub mod testing;

pub use collector::{Collector, Config, Guard, Reclaimer, RegionGuard, ThreadContext};
