//! Hazard-pointer reclamation: per-thread single-writer, multi-reader slots
//! with scan-based reclamation. Static mode fixes the slot count per thread;
//! dynamic mode grows an overflow chain on demand (required by workloads that
//! hold unbounded numbers of guards, like the hash-map benchmark).

use std::sync::atomic::{AtomicPtr, AtomicU32, AtomicU64, AtomicUsize, Ordering};

use crate::collector::{
    make_retired, unmark, Collector, Config, Counters, Entry, HeapPool, HpMode, Node, Reclaimer,
    RetireList, ThreadContext, NO_TOKEN,
};

const OVERFLOW_BLOCK: usize = 16;

pub struct HpGlobal {
    mode: HpMode,
    r_base: u64,
    r_mult: u64,
    /// Σ Kᵢ over registered threads; input to the scan threshold.
    total_slots: AtomicU64,
}

struct SlotBlock {
    slots: [AtomicUsize; OVERFLOW_BLOCK],
    next: AtomicPtr<SlotBlock>,
}

impl SlotBlock {
    fn new() -> Box<SlotBlock> {
        Box::new(SlotBlock {
            slots: std::array::from_fn(|_| AtomicUsize::new(0)),
            next: AtomicPtr::new(std::ptr::null_mut()),
        })
    }
}

/// One thread's hazard slots: a fixed base array plus a growable overflow
/// chain. Padded so remote scans do not share lines with neighbours.
#[repr(align(128))]
pub struct HpSlots {
    base: Box<[AtomicUsize]>,
    overflow: AtomicPtr<SlotBlock>,
}

impl HpSlots {
    fn cell(&self, idx: u32) -> &AtomicUsize {
        let idx = idx as usize;
        if idx < self.base.len() {
            return &self.base[idx];
        }
        let mut rel = idx - self.base.len();
        let mut block = self.overflow.load(Ordering::Acquire);
        while rel >= OVERFLOW_BLOCK {
            debug_assert!(!block.is_null());
            block = unsafe { (*block).next.load(Ordering::Acquire) };
            rel -= OVERFLOW_BLOCK;
        }
        debug_assert!(!block.is_null());
        unsafe { &(*block).slots[rel] }
    }

    fn capacity(&self) -> u32 {
        let mut cap = self.base.len();
        let mut block = self.overflow.load(Ordering::Acquire);
        while !block.is_null() {
            cap += OVERFLOW_BLOCK;
            block = unsafe { (*block).next.load(Ordering::Acquire) };
        }
        cap as u32
    }

    fn clear_all(&self) {
        for slot in self.base.iter() {
            slot.store(0, Ordering::Release);
        }
        let mut block = self.overflow.load(Ordering::Acquire);
        while !block.is_null() {
            let b = unsafe { &*block };
            for slot in &b.slots {
                slot.store(0, Ordering::Release);
            }
            block = b.next.load(Ordering::Acquire);
        }
    }

    fn collect_into(&self, out: &mut Vec<usize>) {
        for slot in self.base.iter() {
            let v = slot.load(Ordering::SeqCst);
            if v != 0 {
                out.push(v);
            }
        }
        let mut block = self.overflow.load(Ordering::Acquire);
        while !block.is_null() {
            let b = unsafe { &*block };
            for slot in &b.slots {
                let v = slot.load(Ordering::SeqCst);
                if v != 0 {
                    out.push(v);
                }
            }
            block = b.next.load(Ordering::Acquire);
        }
    }
}

impl Drop for HpSlots {
    fn drop(&mut self) {
        let mut block = *self.overflow.get_mut();
        while !block.is_null() {
            let b = unsafe { Box::from_raw(block) };
            block = b.next.load(Ordering::Relaxed);
        }
    }
}

pub struct HpLocal {
    free: Vec<u32>,
    capacity: u32,
    retired: RetireList,
}

/// Hazard-pointer reclaimer.
pub struct HazardPointer;

impl HazardPointer {
    /// Current scan threshold `R = base + mult · Σ Kᵢ`.
    pub fn scan_threshold<'a>(collector: &Collector<Self>) -> u64 {
        let g = collector.global();
        g.r_base + g.r_mult * g.total_slots.load(Ordering::Relaxed)
    }
}

/// The publish/re-read validation loop. `on_pass` is a test seam invoked
/// after each publication, before the validating re-read.
fn protect_loop(
    cell: &AtomicUsize,
    slot: &AtomicUsize,
    mut on_pass: impl FnMut(u32),
) -> (usize, u32) {
    let mut passes = 0;
    loop {
        let w1 = cell.load(Ordering::SeqCst);
        if unmark(w1) == 0 {
            slot.store(0, Ordering::Release);
            return (w1, passes);
        }
        slot.store(unmark(w1), Ordering::SeqCst);
        on_pass(passes);
        let w2 = cell.load(Ordering::SeqCst);
        if w1 == w2 {
            return (w1, passes);
        }
        passes += 1;
    }
}

fn acquire_slot(ctx: &ThreadContext<HazardPointer>) -> u32 {
    let local = unsafe { ctx.local_mut() };
    if let Some(idx) = local.free.pop() {
        return idx;
    }
    let global = ctx.global();
    match global.mode {
        HpMode::Static(k) => panic!(
            "hazard slot budget exhausted (static mode, k = {k}); this workload needs dynamic mode"
        ),
        HpMode::Dynamic(_) => {}
    }
    // Grow our own overflow chain; only the owner appends, scanners only read.
    let shared = ctx.shared();
    let block = Box::into_raw(SlotBlock::new());
    let mut tail = &shared.overflow;
    loop {
        let cur = tail.load(Ordering::Acquire);
        if cur.is_null() {
            tail.store(block, Ordering::Release);
            break;
        }
        tail = unsafe { &(*cur).next };
    }
    global.total_slots.fetch_add(OVERFLOW_BLOCK as u64, Ordering::Relaxed);
    let base = local.capacity;
    local.capacity += OVERFLOW_BLOCK as u32;
    for idx in (base + 1..base + OVERFLOW_BLOCK as u32).rev() {
        local.free.push(idx);
    }
    base
}

fn scan(ctx: &ThreadContext<HazardPointer>) -> u64 {
    // Snapshot every thread's published hazards into a sorted lookup set.
    let mut hazards: Vec<usize> = Vec::new();
    ctx.collector().registry().for_each(|entry| {
        entry.shared.collect_into(&mut hazards);
    });
    hazards.sort_unstable();

    let mut reclaimed = 0;
    let local = unsafe { ctx.local_mut() };
    let mut keep = RetireList::default();
    while let Some(rec) = local.retired.pop_front() {
        if hazards.binary_search(&(rec.node() as usize)).is_ok() {
            keep.push_back(rec);
        } else {
            unsafe { ctx.run_retired(rec) };
            reclaimed += 1;
        }
    }
    if let Some((head, tail, len)) = keep.take_chain() {
        local.retired.append_chain(head, tail, len);
    }

    // Steal the orphan list; survivors are re-added batch by batch.
    for mut batch in ctx.collector().orphans().steal_all() {
        let mut survive = RetireList::default();
        while let Some(rec) = batch.pop_front() {
            if hazards.binary_search(&(rec.node() as usize)).is_ok() {
                survive.push_back(rec);
            } else {
                unsafe { ctx.run_retired(rec) };
                reclaimed += 1;
            }
        }
        if let Some((head, tail, len)) = survive.take_chain() {
            ctx.collector().orphans().push(head, tail, len);
        }
    }
    reclaimed
}

unsafe impl Reclaimer for HazardPointer {
    const NAME: &'static str = "HazardPointer";
    const GUARD_IS_REGION: bool = false;
    const REGION_GUARD_IS_REGION: bool = false;

    type Global = HpGlobal;
    type EntryShared = HpSlots;
    type Local = HpLocal;
    type Header = ();
    type Pool<N: Node<Self>> = HeapPool<Self, N>;

    fn new_global(cfg: &Config) -> HpGlobal {
        HpGlobal {
            mode: cfg.hp_mode,
            r_base: cfg.hp_threshold_base,
            r_mult: cfg.hp_threshold_mult,
            total_slots: AtomicU64::new(0),
        }
    }

    fn new_entry_shared(global: &HpGlobal) -> HpSlots {
        let k = global.mode.base_slots() as usize;
        HpSlots {
            base: (0..k).map(|_| AtomicUsize::new(0)).collect(),
            overflow: AtomicPtr::new(std::ptr::null_mut()),
        }
    }

    fn reset_entry(global: &HpGlobal, entry: &Entry<Self>) {
        entry.shared.clear_all();
        global
            .total_slots
            .fetch_add(entry.shared.capacity() as u64, Ordering::Relaxed);
    }

    fn new_local(_: &Collector<Self>, entry: &Entry<Self>) -> HpLocal {
        let capacity = entry.shared.capacity();
        HpLocal {
            free: (0..capacity).rev().collect(),
            capacity,
            retired: RetireList::default(),
        }
    }

    fn enter(_: &ThreadContext<Self>) {}
    fn leave(_: &ThreadContext<Self>) {}

    unsafe fn protect<N: Node<Self>>(
        ctx: &ThreadContext<Self>,
        cell: &AtomicUsize,
    ) -> (usize, u32) {
        let slot_idx = acquire_slot(ctx);
        let slot = ctx.shared().cell(slot_idx);
        let (word, _) = protect_loop(cell, slot, |_| {});
        if unmark(word) == 0 {
            unsafe { ctx.local_mut() }.free.push(slot_idx);
            (word, NO_TOKEN)
        } else {
            (word, slot_idx)
        }
    }

    unsafe fn extend<N: Node<Self>>(ctx: &ThreadContext<Self>, word: usize, _: u32) -> u32 {
        if unmark(word) == 0 {
            return NO_TOKEN;
        }
        // The originating guard keeps the node safe while we copy.
        let slot_idx = acquire_slot(ctx);
        ctx.shared().cell(slot_idx).store(unmark(word), Ordering::SeqCst);
        slot_idx
    }

    unsafe fn unprotect<N: Node<Self>>(ctx: &ThreadContext<Self>, _word: usize, token: u32) {
        if token != NO_TOKEN {
            ctx.shared().cell(token).store(0, Ordering::Release);
            unsafe { ctx.local_mut() }.free.push(token);
        }
    }

    unsafe fn link_cas<N: Node<Self>>(
        _ctx: &ThreadContext<Self>,
        cell: &AtomicUsize,
        current: usize,
        new: usize,
    ) -> bool {
        // Seq-cst so a retiring thread's scan is ordered after any validated
        // publication that read the pre-unlink value.
        cell.compare_exchange(current, new, Ordering::SeqCst, Ordering::SeqCst)
            .is_ok()
    }

    unsafe fn retire<N: Node<Self>>(ctx: &ThreadContext<Self>, node: *mut N, poison: bool) {
        let rec = make_retired::<Self, N>(node, poison);
        Counters::bump(&ctx.counters().retired, 1);
        let threshold = HazardPointer::scan_threshold(ctx.collector());
        let local = unsafe { ctx.local_mut() };
        local.retired.push_back(rec);
        if local.retired.len() as u64 >= threshold {
            scan(ctx);
        }
    }

    fn on_deregister(ctx: &ThreadContext<Self>) {
        let local = unsafe { ctx.local_mut() };
        ctx.shared().clear_all();
        ctx.global()
            .total_slots
            .fetch_sub(local.capacity as u64, Ordering::Relaxed);
        if let Some((head, tail, len)) = local.retired.take_chain() {
            ctx.collector().orphans().push(head, tail, len);
        }
    }
}

impl HazardPointer {
    /// Runs a scan outside the retire path; used by tests and drain helpers.
    pub fn force_scan(ctx: &ThreadContext<Self>) -> u64 {
        scan(ctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collector::Pool;
    use crate::testing::{DestroyLog, TestNode, TestPool};
    use std::sync::Arc;

    fn dynamic_cfg() -> Config {
        Config { hp_mode: HpMode::Dynamic(2), ..Config::default() }
    }

    #[test]
    fn threshold_formula_matches_static_configuration() {
        // k = 2, p = 4 => R = 100 + 2·8 = 116.
        let collector = Collector::<HazardPointer>::with_defaults();
        let ctxs: Vec<_> = (0..4).map(|_| collector.register()).collect();
        assert_eq!(HazardPointer::scan_threshold(&collector), 116);
        drop(ctxs);
        assert_eq!(HazardPointer::scan_threshold(&collector), 100);
    }

    #[test]
    fn protect_validates_stable_source_in_one_pass() {
        let cell = AtomicUsize::new(0x10);
        let slot = AtomicUsize::new(0);
        let (word, passes) = protect_loop(&cell, &slot, |_| {});
        assert_eq!(word, 0x10);
        assert_eq!(passes, 0);
        assert_eq!(slot.load(Ordering::SeqCst), 0x10);
    }

    #[test]
    fn protect_retries_exactly_once_when_source_moves() {
        let cell = AtomicUsize::new(0x10);
        let slot = AtomicUsize::new(0);
        let (word, passes) = protect_loop(&cell, &slot, |pass| {
            if pass == 0 {
                cell.store(0x20, Ordering::SeqCst);
            }
        });
        assert_eq!(word, 0x20);
        assert_eq!(passes, 1);
        assert_eq!(slot.load(Ordering::SeqCst), 0x20);
    }

    #[test]
    fn protect_empty_source_clears_slot() {
        let cell = AtomicUsize::new(0);
        let slot = AtomicUsize::new(0x99);
        let (word, _) = protect_loop(&cell, &slot, |_| {});
        assert_eq!(word, 0);
        assert_eq!(slot.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn retire_threshold_triggers_full_scan() {
        let collector = Collector::<HazardPointer>::with_defaults();
        let ctx = collector.register();
        let pool = TestPool::new(&collector, false);
        let log = DestroyLog::default();
        let r = HazardPointer::scan_threshold(&collector);
        for i in 0..r {
            let node = pool.alloc_logged(&ctx, &log);
            unsafe { pool.retire(&ctx, node) };
            if i + 1 < r {
                assert_eq!(log.destroyed(), 0);
            }
        }
        // The R-th retire scans and reclaims everything (nothing protected).
        assert_eq!(log.destroyed(), r);
        assert_eq!(collector.unreclaimed(), 0);
    }

    #[test]
    fn protected_node_survives_scan_until_cleared() {
        let collector = Collector::<HazardPointer>::with_defaults();
        let reader = collector.register();
        let writer = collector.register();
        let pool = TestPool::new(&collector, false);
        let log = DestroyLog::default();

        let node = pool.alloc_logged(&writer, &log);
        let link = pool.link_to(&writer, node);
        let guard = reader.guard(&link);
        assert_eq!(guard.ptr(), node);

        assert!(pool.unlink_and_retire(&writer, &link));
        HazardPointer::force_scan(&writer);
        assert_eq!(log.destroyed(), 0, "scan reclaimed a protected node");

        drop(guard);
        HazardPointer::force_scan(&writer);
        assert_eq!(log.destroyed(), 1);
    }

    #[test]
    fn dynamic_mode_grows_and_reuses_slots() {
        let collector = Collector::<HazardPointer>::new(dynamic_cfg());
        let ctx = collector.register();
        let pool = TestPool::new(&collector, false);
        let before = HazardPointer::scan_threshold(&collector);

        let nodes: Vec<_> = (0..100).map(|_| pool.alloc_plain(&ctx)).collect();
        let links: Vec<_> = nodes.iter().map(|&n| pool.link_to(&ctx, n)).collect();
        {
            let guards: Vec<_> = links.iter().map(|l| ctx.guard(l)).collect();
            // 100 simultaneous guards: slots must be distinct.
            let mut published = Vec::new();
            ctx.shared().collect_into(&mut published);
            published.sort_unstable();
            published.dedup();
            assert_eq!(published.len(), 100);
            assert!(guards.iter().all(|g| !g.is_null()));
        }
        // Growth raised the threshold; released slots are reused.
        assert!(HazardPointer::scan_threshold(&collector) > before);
        let local_free = unsafe { ctx.local_mut() }.free.len();
        assert_eq!(local_free as u32, unsafe { ctx.local_mut() }.capacity);
        {
            let _g = ctx.guard(&links[0]);
            let free_now = unsafe { ctx.local_mut() }.free.len();
            assert_eq!(free_now as u32 + 1, unsafe { ctx.local_mut() }.capacity);
        }
    }

    #[test]
    #[should_panic(expected = "hazard slot budget exhausted")]
    fn static_mode_panics_beyond_k_slots() {
        let collector = Collector::<HazardPointer>::with_defaults();
        let ctx = collector.register();
        let pool = TestPool::new(&collector, false);
        let nodes: Vec<_> = (0..3).map(|_| pool.alloc_plain(&ctx)).collect();
        let links: Vec<_> = nodes.iter().map(|&n| pool.link_to(&ctx, n)).collect();
        let _guards: Vec<_> = links.iter().map(|l| ctx.guard(l)).collect();
    }

    #[test]
    fn deregister_hands_unreclaimed_nodes_to_orphans() {
        let collector = Collector::<HazardPointer>::with_defaults();
        let reader = collector.register();
        let writer = collector.register();
        let pool = TestPool::new(&collector, false);
        let log = DestroyLog::default();

        let node = pool.alloc_logged(&writer, &log);
        let link = pool.link_to(&writer, node);
        let guard = reader.guard(&link);

        for _ in 0..5 {
            let n = pool.alloc_logged(&writer, &log);
            unsafe { pool.retire(&writer, n) };
        }
        assert!(pool.unlink_and_retire(&writer, &link));
        drop(writer); // hands its 6 retired nodes to the orphan list
        assert_eq!(collector.orphaned_nodes(), 6);

        drop(guard);
        let drainer = collector.register();
        HazardPointer::force_scan(&drainer);
        assert_eq!(log.destroyed(), 6);
        assert_eq!(collector.orphaned_nodes(), 0);
    }

    #[test]
    fn concurrent_registrations_have_distinct_identities() {
        let collector = Collector::<HazardPointer>::with_defaults();
        let barrier = Arc::new(std::sync::Barrier::new(8));
        let mut handles = Vec::new();
        for _ in 0..8 {
            let collector = Arc::clone(&collector);
            let barrier = Arc::clone(&barrier);
            handles.push(std::thread::spawn(move || {
                let ctx = collector.register();
                let id = ctx.entry().id();
                barrier.wait();
                let seen = collector.registered_threads();
                barrier.wait(); // keep everyone registered until all have read
                assert_eq!(seen, 8);
                id
            }));
        }
        let mut ids: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 8);
        assert_eq!(collector.registered_threads(), 0);
    }

    #[test]
    fn slot_extend_copies_protection() {
        let collector = Collector::<HazardPointer>::with_defaults();
        let ctx = collector.register();
        let pool = TestPool::<HazardPointer>::new(&collector, false);
        let node: *mut TestNode<HazardPointer> = pool.alloc_plain(&ctx);
        let link = pool.link_to(&ctx, node);
        let g1 = ctx.guard(&link);
        let g2 = g1.duplicate();
        drop(g1);
        let mut published = Vec::new();
        ctx.shared().collect_into(&mut published);
        assert_eq!(published, vec![node as usize]);
        drop(g2);
    }
}
