//! Stamp-ordered reclamation.
//!
//! A thread entering a critical region takes a strictly increasing stamp from
//! a global counter and links a control block into the thread order list;
//! retiring a node tags it with the counter's current value and appends it to
//! a thread-local retire list, which is therefore ordered by tag. A node is
//! reclaimable once its tag is at or below the lowest stamp of any thread
//! still inside a region: a thread whose stamp is at least the tag entered
//! after the counter passed the tag, hence after the node was already
//! unlinked, and can never reach it.
//!
//! Leaving a region removes the control block. The leaver that held the
//! lowest stamp advances the cached lowest stamp and additionally scans the
//! global retire list, a stack of sorted sublists donated by threads that
//! could not reclaim everything themselves; each sublist is scanned only up
//! to its first unreclaimable node, and a pass restarts when the lowest stamp
//! advanced meanwhile. A departing thread donates its leftovers to the same
//! global list, and the last registered thread drains it completely.

mod order_list;

pub use order_list::{BlockRef, ControlBlock, OrderList};

use std::ptr;
use std::sync::atomic::{AtomicPtr, AtomicU64, AtomicUsize, Ordering};

use crate::collector::{
    make_retired, Collector, Config, Counters, Entry, HeapPool, Node, Reclaimer, RetireList,
    ThreadContext, NO_TOKEN,
};

pub struct StampGlobal {
    list: OrderList,
    global_retired: SublistStack,
    retire_threshold: usize,
    donate_threshold: usize,
}

pub struct StampLocal {
    episode: Option<Episode>,
    retired: RetireList,
}

#[derive(Clone, Copy)]
struct Episode {
    block: BlockRef,
    stamp: u64,
}

/// Stamp-ordered reclaimer.
pub struct StampIt;

impl StampIt {
    /// The next stamp the order list will assign.
    pub fn highest_stamp(collector: &Collector<Self>) -> u64 {
        collector.global().list.highest_stamp()
    }

    /// The cached lowest live stamp.
    pub fn lowest_stamp(collector: &Collector<Self>) -> u64 {
        collector.global().list.lowest_stamp()
    }

    /// The stamp of the calling thread's open region, if any.
    pub fn current_stamp(ctx: &ThreadContext<Self>) -> Option<u64> {
        unsafe { ctx.local_mut() }.episode.map(|e| e.stamp)
    }

    /// Number of this thread's locally retired, not yet reclaimed nodes.
    pub fn local_retired_len(ctx: &ThreadContext<Self>) -> usize {
        unsafe { ctx.local_mut() }.retired.len()
    }

    /// Nodes currently parked on the global retire list.
    pub fn global_retired_len(collector: &Collector<Self>) -> u64 {
        collector.global().global_retired.nodes.load(Ordering::SeqCst)
    }

    /// Live region stamps in entry order, for tests at quiescent points.
    pub fn live_stamps(collector: &Collector<Self>) -> Vec<u64> {
        collector.global().list.live_stamps_ascending()
    }

    /// Reclaims from the local retire list everything with a tag at or below
    /// the current lowest stamp; stops at the first node above it.
    pub fn reclaim_local(ctx: &ThreadContext<Self>) -> u64 {
        let lowest = ctx.global().list.lowest_stamp();
        let local = unsafe { ctx.local_mut() };
        let mut reclaimed = 0;
        while let Some(rec) = local.retired.pop_front_if(|tag| tag <= lowest) {
            unsafe { ctx.run_retired(rec) };
            reclaimed += 1;
        }
        reclaimed
    }

    /// Detaches the global retire list and reclaims every node with a tag at
    /// or below the lowest stamp, restarting while the lowest stamp advances;
    /// remainders are re-installed as sorted sublists.
    pub fn reclaim_global(ctx: &ThreadContext<Self>) -> u64 {
        let global = ctx.global();
        let mut sublists = global.global_retired.detach_all();
        if sublists.is_empty() {
            return 0;
        }
        let mut reclaimed = 0;
        let mut visits = 0u64;
        let mut lowest = global.list.lowest_stamp();
        loop {
            let mut remainder = Vec::new();
            for mut sub in sublists {
                loop {
                    match sub.pop_front_if(|tag| tag <= lowest) {
                        Some(rec) => {
                            visits += 1;
                            unsafe { ctx.run_retired(rec) };
                            reclaimed += 1;
                        }
                        None => {
                            if !sub.is_empty() {
                                visits += 1; // the node that stopped the scan
                                remainder.push(sub);
                            }
                            break;
                        }
                    }
                }
            }
            let now = global.list.lowest_stamp();
            if now > lowest && !remainder.is_empty() {
                lowest = now;
                sublists = remainder;
                continue;
            }
            for sub in remainder {
                global.global_retired.push(sub);
            }
            break;
        }
        global.global_retired.nodes.fetch_sub(reclaimed, Ordering::SeqCst);
        Counters::bump(&ctx.counters().global_scan_visits, visits);
        reclaimed
    }

    /// Moves the whole local retire list to the global list as one sorted
    /// sublist.
    fn donate(ctx: &ThreadContext<Self>) {
        let local = unsafe { ctx.local_mut() };
        let len = local.retired.len() as u64;
        if len == 0 {
            return;
        }
        let mut list = RetireList::default();
        if let Some((head, tail, n)) = local.retired.take_chain() {
            list.append_chain(head, tail, n);
        }
        ctx.global().global_retired.nodes.fetch_add(len, Ordering::SeqCst);
        ctx.global().global_retired.push(list);
    }
}

unsafe impl Reclaimer for StampIt {
    const NAME: &'static str = "StampIt";
    const GUARD_IS_REGION: bool = true;
    const REGION_GUARD_IS_REGION: bool = true;

    type Global = StampGlobal;
    type EntryShared = ();
    type Local = StampLocal;
    type Header = ();
    type Pool<N: Node<Self>> = HeapPool<Self, N>;

    fn new_global(cfg: &Config) -> StampGlobal {
        StampGlobal {
            list: OrderList::default(),
            global_retired: SublistStack::default(),
            retire_threshold: cfg.stamp_retire_threshold,
            donate_threshold: cfg.stamp_donate_threshold,
        }
    }

    fn new_entry_shared(_: &StampGlobal) {}
    fn reset_entry(_: &StampGlobal, _: &Entry<Self>) {}

    fn new_local(_: &Collector<Self>, _: &Entry<Self>) -> StampLocal {
        StampLocal { episode: None, retired: RetireList::default() }
    }

    fn enter(ctx: &ThreadContext<Self>) {
        let global = ctx.global();
        let block = global.list.acquire_block();
        let stamp = global.list.push(block, ctx.counters());
        let local = unsafe { ctx.local_mut() };
        debug_assert!(local.episode.is_none());
        local.episode = Some(Episode { block, stamp });
    }

    fn leave(ctx: &ThreadContext<Self>) {
        let global = ctx.global();
        let episode = {
            let local = unsafe { ctx.local_mut() };
            local.episode.take().expect("leave without a matching enter")
        };
        let was_last = global.list.remove(episode.block, ctx.counters());
        global.list.release_block(episode.block);
        if was_last {
            global.list.raise_lowest();
            Self::reclaim_local(ctx);
            Self::reclaim_global(ctx);
        } else {
            Self::reclaim_local(ctx);
            let pending = unsafe { ctx.local_mut() }.retired.len();
            if pending > global.donate_threshold {
                Self::donate(ctx);
            }
        }
    }

    unsafe fn protect<N: Node<Self>>(
        ctx: &ThreadContext<Self>,
        cell: &AtomicUsize,
    ) -> (usize, u32) {
        debug_assert!(ctx.in_region(), "protected load outside a critical region");
        (cell.load(Ordering::Acquire), NO_TOKEN)
    }

    unsafe fn retire<N: Node<Self>>(ctx: &ThreadContext<Self>, node: *mut N, poison: bool) {
        let global = ctx.global();
        let mut rec = make_retired::<Self, N>(node, poison);
        rec.tag = global.list.highest_stamp();
        Counters::bump(&ctx.counters().retired, 1);
        let pending = {
            let local = unsafe { ctx.local_mut() };
            debug_assert!(local.retired.first_tag().map_or(true, |t| t <= rec.tag));
            local.retired.push_back(rec);
            local.retired.len()
        };
        if pending > global.retire_threshold {
            Self::reclaim_local(ctx);
        }
    }

    fn on_deregister(ctx: &ThreadContext<Self>) {
        debug_assert!(unsafe { ctx.local_mut() }.episode.is_none());
        Self::donate(ctx);
        Self::reclaim_global(ctx);
        // The last registered thread (we are still counted) drains the global
        // list: with no thread inside a region, every region open at any
        // retire has closed, so everything parked is unreachable.
        if ctx.collector().registry().active() == 1 {
            let global = ctx.global();
            while global.global_retired.nodes.load(Ordering::SeqCst) != 0 {
                if Self::reclaim_global(ctx) == 0 {
                    // Tags sit above the cached lowest; with no open regions
                    // the counter itself is the bound.
                    global.list.raise_lowest();
                    if global.list.lowest_stamp() < global.list.highest_stamp() {
                        break; // a region opened concurrently; leave the rest
                    }
                }
            }
        }
    }
}

/// Lock-free stack of sorted retire sublists. Consumers detach the whole
/// stack with a swap, which keeps the pop path ABA-free.
#[derive(Default)]
struct SublistStack {
    head: AtomicPtr<SublistNode>,
    nodes: AtomicU64,
}

struct SublistNode {
    list: RetireList,
    next: *mut SublistNode,
}

impl SublistStack {
    fn push(&self, list: RetireList) {
        debug_assert!(!list.is_empty());
        let sub = Box::into_raw(Box::new(SublistNode { list, next: ptr::null_mut() }));
        let mut head = self.head.load(Ordering::Relaxed);
        loop {
            unsafe { (*sub).next = head };
            match self
                .head
                .compare_exchange_weak(head, sub, Ordering::Release, Ordering::Acquire)
            {
                Ok(_) => return,
                Err(actual) => head = actual,
            }
        }
    }

    fn detach_all(&self) -> Vec<RetireList> {
        let mut cur = self.head.swap(ptr::null_mut(), Ordering::Acquire);
        let mut out = Vec::new();
        while !cur.is_null() {
            let sub = unsafe { Box::from_raw(cur) };
            cur = sub.next;
            out.push(sub.list);
        }
        out
    }
}

impl Drop for SublistStack {
    fn drop(&mut self) {
        for mut list in self.detach_all() {
            while list.pop_front().is_some() {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::{DestroyLog, TestPool};
    use std::sync::Arc;

    fn donate_eagerly() -> Config {
        Config { stamp_donate_threshold: 0, ..Config::default() }
    }

    /// Force the counter and the cached lowest stamp for prefix-rule tests.
    fn set_stamps(collector: &Collector<StampIt>, highest: u64, lowest: u64) {
        let g = collector.global();
        while g.list.highest_stamp() < highest {
            g.list.head_bump_for_test();
        }
        g.list.set_lowest_for_test(lowest);
    }

    #[test]
    fn region_entry_assigns_increasing_stamps() {
        let collector = Collector::<StampIt>::with_defaults();
        let t1 = collector.register();
        let t2 = collector.register();
        let t3 = collector.register();

        let r1 = t1.region();
        assert_eq!(StampIt::current_stamp(&t1), Some(0));
        assert_eq!(StampIt::highest_stamp(&collector), 1);
        let r2 = t2.region();
        assert_eq!(StampIt::current_stamp(&t2), Some(1));
        let r3 = t3.region();
        assert_eq!(StampIt::current_stamp(&t3), Some(2));
        assert_eq!(StampIt::highest_stamp(&collector), 3);
        assert_eq!(StampIt::live_stamps(&collector), vec![0, 1, 2]);
        drop(r2);
        drop(r1);
        drop(r3);
        assert_eq!(StampIt::lowest_stamp(&collector), StampIt::highest_stamp(&collector));
    }

    #[test]
    fn retire_tags_with_next_to_assign_stamp() {
        let collector = Collector::<StampIt>::with_defaults();
        let ctx = collector.register();
        let pool = TestPool::<StampIt>::new(&collector, false);
        let log = DestroyLog::default();

        let _r = ctx.region();
        let node = pool.alloc_logged(&ctx, &log);
        unsafe { pool.retire(&ctx, node) };
        // Our own stamp is 0, the counter stands at 1, so the tag is 1.
        let local = unsafe { ctx.local_mut() };
        assert_eq!(local.retired.first_tag(), Some(1));
    }

    #[test]
    fn empty_list_retire_is_immediately_reclaimable() {
        let collector = Collector::<StampIt>::with_defaults();
        let ctx = collector.register();
        let pool = TestPool::<StampIt>::new(&collector, false);
        let log = DestroyLog::default();
        let node = pool.alloc_logged(&ctx, &log);
        unsafe { pool.retire(&ctx, node) };
        // No thread in a region: lowest equals the counter, tag reclaimable.
        assert_eq!(StampIt::reclaim_local(&ctx), 1);
        assert_eq!(log.destroyed(), 1);
    }

    #[test]
    fn reclaim_local_stops_at_first_high_tag() {
        let collector = Collector::<StampIt>::with_defaults();
        let ctx = collector.register();
        let log = DestroyLog::default();
        let pool = TestPool::<StampIt>::new(&collector, false);

        let mut push_tagged = |tag: u64| {
            let node = pool.alloc_logged(&ctx, &log);
            let mut rec = make_retired::<StampIt, _>(node, false);
            rec.tag = tag;
            unsafe { ctx.local_mut() }.retired.push_back(rec);
        };

        // [2,3] with lowest 2: one node reclaimed, scan stops.
        push_tagged(2);
        push_tagged(3);
        set_stamps(&collector, 4, 2);
        assert_eq!(StampIt::reclaim_local(&ctx), 1);
        assert_eq!(log.destroyed(), 1);
        assert_eq!(unsafe { ctx.local_mut() }.retired.first_tag(), Some(3));
        set_stamps(&collector, 4, 3);
        assert_eq!(StampIt::reclaim_local(&ctx), 1);

        // [2,3,5,8] with lowest 5: three nodes reclaimed.
        for tag in [2u64, 3, 5, 8] {
            push_tagged(tag);
        }
        set_stamps(&collector, 9, 5);
        assert_eq!(StampIt::reclaim_local(&ctx), 3);
        assert_eq!(unsafe { ctx.local_mut() }.retired.first_tag(), Some(8));
        set_stamps(&collector, 9, 8);
        assert_eq!(StampIt::reclaim_local(&ctx), 1);

        // Empty local list reclaims nothing.
        assert_eq!(StampIt::reclaim_local(&ctx), 0);
    }

    #[test]
    fn global_reclaim_scans_each_sublist_to_first_survivor() {
        // Sublists [1,4] and [2,3] with lowest 3: reclaims tags {1,2,3},
        // remainder [4]; node visits bounded by n + m = 3 + 2.
        let collector = Collector::<StampIt>::with_defaults();
        let ctx = collector.register();
        let log = DestroyLog::default();
        let pool = TestPool::<StampIt>::new(&collector, false);

        let mk_list = |tags: &[u64]| {
            let mut list = RetireList::default();
            for &tag in tags {
                let node = pool.alloc_logged(&ctx, &log);
                let mut rec = make_retired::<StampIt, _>(node, false);
                rec.tag = tag;
                list.push_back(rec);
            }
            list
        };
        let g = collector.global();
        g.global_retired.nodes.fetch_add(4, Ordering::SeqCst);
        g.global_retired.push(mk_list(&[1, 4]));
        g.global_retired.push(mk_list(&[2, 3]));
        set_stamps(&collector, 5, 3);

        let visits_before = ctx.thread_counters().global_scan_visits;
        assert_eq!(StampIt::reclaim_global(&ctx), 3);
        let visits = ctx.thread_counters().global_scan_visits - visits_before;
        assert_eq!(log.destroyed(), 3);
        assert!(visits <= 3 + 2, "visits {visits} exceed n + m");
        assert_eq!(StampIt::global_retired_len(&collector), 1);

        set_stamps(&collector, 5, 4);
        assert_eq!(StampIt::reclaim_global(&ctx), 1);
        assert_eq!(log.destroyed(), 4);
        assert_eq!(StampIt::global_retired_len(&collector), 0);
        assert_eq!(StampIt::reclaim_global(&ctx), 0);
    }

    #[test]
    fn leave_donates_above_threshold_and_last_leaver_drains() {
        let collector = Collector::<StampIt>::new(donate_eagerly());
        let t1 = collector.register();
        let t2 = collector.register();
        let pool = TestPool::<StampIt>::new(&collector, false);
        let log = DestroyLog::default();

        let r1 = t1.region(); // stamp 0 keeps everything pinned
        {
            let _r2 = t2.region();
            let node = pool.alloc_logged(&t2, &log);
            unsafe { pool.retire(&t2, node) };
        }
        // t2 left (not last): node unreclaimable (t1 holds stamp 0), donated.
        assert_eq!(log.destroyed(), 0);
        assert_eq!(StampIt::global_retired_len(&collector), 1);

        drop(r1); // the last leaver scans the global list
        assert_eq!(log.destroyed(), 1);
        assert_eq!(StampIt::global_retired_len(&collector), 0);
    }

    #[test]
    fn deregistration_of_last_thread_drains_everything() {
        let collector = Collector::<StampIt>::with_defaults();
        let log = DestroyLog::default();
        let pool = TestPool::<StampIt>::new(&collector, false);
        {
            let blocker = collector.register();
            let worker = collector.register();
            let _rb = blocker.region();
            {
                let _rw = worker.region();
                for _ in 0..5 {
                    let node = pool.alloc_logged(&worker, &log);
                    unsafe { pool.retire(&worker, node) };
                }
            }
            drop(worker); // leftovers go to the global sorted-sublist list
            assert_eq!(log.destroyed(), 0);
            assert_eq!(StampIt::global_retired_len(&collector), 5);
        }
        // blocker (last registered thread) deregistered above: full drain.
        assert_eq!(log.destroyed(), 5, "last deregistration must drain");
        assert_eq!(collector.unreclaimed(), 0);
    }

    #[test]
    fn concurrent_region_storm_reclaims_everything() {
        let collector = Collector::<StampIt>::with_defaults();
        let pool = Arc::new(TestPool::<StampIt>::new(&collector, false));
        let mut handles = Vec::new();
        for _ in 0..8 {
            let collector = Arc::clone(&collector);
            let pool = Arc::clone(&pool);
            handles.push(std::thread::spawn(move || {
                let ctx = collector.register();
                for _ in 0..10_000u64 {
                    let _r = ctx.region();
                    let node = pool.alloc_plain(&ctx);
                    unsafe { pool.retire(&ctx, node) };
                }
            }));
        }
        for h in handles {
            h.join().unwrap();
        }
        let c = collector.counters();
        assert_eq!(c.allocated, 80_000);
        assert_eq!(c.reclaimed, 80_000, "stamp scheme left nodes unreclaimed");
        assert_eq!(collector.unreclaimed(), 0);
    }
}
