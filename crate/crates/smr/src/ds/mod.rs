//! Benchmark data structures, generic over the reclamation scheme: a
//! Michael–Scott queue, a Harris–Michael ordered list set and a fixed-bucket
//! hash map with FIFO eviction.

pub mod list;
pub mod map;
pub mod queue;

pub use list::ListSet;
pub use map::{HashMap, ValueRef};
pub use queue::MsQueue;
