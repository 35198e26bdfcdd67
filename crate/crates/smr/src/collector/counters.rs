//! Per-thread instrumentation counters.
//!
//! Counters are updated only by the owning thread with relaxed stores; other
//! threads (the efficiency sampler, the aggregation at deregistration) read
//! them with relaxed loads and may observe slightly stale but never negative
//! values.

use std::sync::atomic::{AtomicU64, Ordering::Relaxed};

macro_rules! counter_fields {
    ($($(#[$doc:meta])* $name:ident),+ $(,)?) => {
        /// One thread's counter block, owned by a registry entry.
        #[derive(Default)]
        pub struct Counters {
            $($(#[$doc])* pub $name: AtomicU64,)+
        }

        /// A plain snapshot of [`Counters`].
        #[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
        pub struct CounterSnapshot {
            $(pub $name: u64,)+
        }

        impl Counters {
            pub fn snapshot(&self) -> CounterSnapshot {
                CounterSnapshot { $($name: self.$name.load(Relaxed),)+ }
            }

            /// Adds the current values into `agg` and resets them to zero.
            /// Called when a departing thread merges into the process-wide
            /// aggregate before its entry is recycled.
            pub(crate) fn drain_into(&self, agg: &Counters) {
                $(
                    agg.$name.fetch_add(self.$name.load(Relaxed), Relaxed);
                    self.$name.store(0, Relaxed);
                )+
            }
        }

        impl CounterSnapshot {
            pub fn add(&mut self, other: &CounterSnapshot) {
                $(self.$name += other.$name;)+
            }
        }
    };
}

counter_fields! {
    /// Nodes obtained fresh from the allocator.
    allocated,
    /// Nodes destroyed (or recycled for the first time).
    reclaimed,
    /// Nodes handed to a reclamation scheme.
    retired,
    /// Outermost critical-region entries (one seq-cst entry protocol each).
    region_entries,
    /// Stamp order-list insertion attempts.
    push_iterations,
    /// Stamp order-list insertions.
    push_ops,
    /// Iterations unlinking a control block from its predecessor.
    remove_prev_iterations,
    /// Completed predecessor-side unlinks.
    remove_prev_ops,
    /// Iterations repairing the successor's backlink.
    remove_next_iterations,
    /// Completed successor-side repairs.
    remove_next_ops,
    /// Node visits performed by global retire-list scans.
    global_scan_visits,
}

impl Counters {
    /// Single-writer increment; cheaper than an RMW and sufficient because
    /// only the owning thread writes.
    #[inline]
    pub fn bump(field: &AtomicU64, by: u64) {
        field.store(field.load(Relaxed) + by, Relaxed);
    }
}

impl CounterSnapshot {
    /// Allocated minus reclaimed; the sampler's notion of unreclaimed nodes.
    pub fn unreclaimed(&self) -> u64 {
        self.allocated.saturating_sub(self.reclaimed)
    }
}
