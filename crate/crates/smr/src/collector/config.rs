//! Collector configuration knobs shared by all schemes.

/// Hazard-pointer slot allocation mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HpMode {
    /// Fixed number of slots per thread; exceeding it is a contract violation.
    Static(u32),
    /// Slots grow on demand in blocks.
    Dynamic(u32),
}

impl HpMode {
    pub fn base_slots(self) -> u32 {
        match self {
            HpMode::Static(k) | HpMode::Dynamic(k) => k,
        }
    }

    pub fn is_dynamic(self) -> bool {
        matches!(self, HpMode::Dynamic(_))
    }
}

/// Tuning parameters for a [`Collector`](super::Collector).
///
/// Defaults follow the values used throughout the benchmark suite: 2 hazard
/// slots, scan threshold `100 + 2·H`, epoch advance attempt every 100 region
/// entries, stamp retire/donation thresholds of 64 nodes and no thread-local
/// free-list buffering for reference counting.
#[derive(Debug, Clone, Copy)]
pub struct Config {
    /// Hazard-pointer mode (slot count, static or dynamic).
    pub hp_mode: HpMode,
    /// Additive part of the hazard-pointer scan threshold R.
    pub hp_threshold_base: u64,
    /// Per-slot multiplier of the scan threshold R.
    pub hp_threshold_mult: u64,
    /// Number of region entries between epoch advance attempts.
    pub epoch_advance_interval: u64,
    /// Local retire-list length that triggers an eager reclaim pass.
    pub stamp_retire_threshold: usize,
    /// Remaining-node count above which a leaving thread donates its local
    /// retire list to the global list.
    pub stamp_donate_threshold: usize,
    /// Capacity of the per-thread reference-counting free-list buffer.
    pub lfrc_local_free_cap: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            hp_mode: HpMode::Static(2),
            hp_threshold_base: 100,
            hp_threshold_mult: 2,
            epoch_advance_interval: 100,
            stamp_retire_threshold: 64,
            stamp_donate_threshold: 64,
            lfrc_local_free_cap: 0,
        }
    }
}
