//! The grace-period family: epoch-based reclamation with three limbo lists
//! ([`Ebr`]), the widened-region variant ([`Nebr`]) and quiescent-state-based
//! reclamation over a non-blocking fuzzy barrier ([`Qsbr`]).

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

use crate::collector::{
    make_retired, Collector, Config, Counters, Entry, HeapPool, Node, Reclaimer, RetireList,
    ThreadContext, NO_TOKEN,
};

pub struct EpochGlobal {
    epoch: AtomicU64,
    advance_interval: u64,
}

pub struct EpochSlot {
    active: AtomicBool,
    epoch: AtomicU64,
}

pub struct EpochLocal {
    limbo: [RetireList; 3],
    entries: u64,
}

fn epoch_new_global(cfg: &Config) -> EpochGlobal {
    EpochGlobal { epoch: AtomicU64::new(0), advance_interval: cfg.epoch_advance_interval }
}

fn epoch_new_entry() -> EpochSlot {
    EpochSlot { active: AtomicBool::new(false), epoch: AtomicU64::new(0) }
}

fn epoch_new_local() -> EpochLocal {
    EpochLocal { limbo: Default::default(), entries: 0 }
}

/// Sets the active flag, then observes the global epoch. The two seq-cst
/// accesses form the fence that lets an advancing thread either see our flag
/// or let us see the new epoch.
fn epoch_enter<R>(ctx: &ThreadContext<R>)
where
    R: Reclaimer<Global = EpochGlobal, EntryShared = EpochSlot, Local = EpochLocal>,
{
    let slot = ctx.shared();
    slot.active.store(true, Ordering::SeqCst);
    let global = ctx.global();
    let epoch = global.epoch.load(Ordering::SeqCst);
    slot.epoch.store(epoch, Ordering::SeqCst);

    let local = unsafe { ctx.local_mut() };
    local.entries += 1;
    if local.entries % global.advance_interval == 0 {
        epoch_try_advance(ctx);
    }
}

fn epoch_leave<R>(ctx: &ThreadContext<R>)
where
    R: Reclaimer<EntryShared = EpochSlot>,
{
    ctx.shared().active.store(false, Ordering::Release);
}

fn epoch_retire<R, N>(ctx: &ThreadContext<R>, node: *mut N, poison: bool)
where
    R: Reclaimer<Global = EpochGlobal, Local = EpochLocal>,
    N: Node<R>,
{
    let epoch = ctx.global().epoch.load(Ordering::SeqCst);
    let mut rec = make_retired::<R, N>(node, poison);
    rec.tag = epoch;
    Counters::bump(&ctx.counters().retired, 1);
    let local = unsafe { ctx.local_mut() };
    local.limbo[(epoch % 3) as usize].push_back(rec);
}

/// Attempts to bump the global epoch; succeeds only when every active thread
/// has observed the current one. On success the caller reclaims its own limbo
/// list from two epochs ago and processes the orphan list.
pub(crate) fn epoch_try_advance<R>(ctx: &ThreadContext<R>) -> bool
where
    R: Reclaimer<Global = EpochGlobal, EntryShared = EpochSlot, Local = EpochLocal>,
{
    let global = ctx.global();
    let epoch = global.epoch.load(Ordering::SeqCst);
    let mut all_observed = true;
    ctx.collector().registry().for_each_active(|entry| {
        let slot = &entry.shared;
        if slot.active.load(Ordering::SeqCst) {
            let local_epoch = slot.epoch.load(Ordering::SeqCst);
            debug_assert!(
                local_epoch == epoch || local_epoch + 1 == epoch,
                "active thread lags global epoch by more than one"
            );
            if local_epoch != epoch {
                all_observed = false;
            }
        }
    });
    if !all_observed {
        return false;
    }
    if global
        .epoch
        .compare_exchange(epoch, epoch + 1, Ordering::SeqCst, Ordering::SeqCst)
        .is_err()
    {
        return false;
    }
    let new_epoch = epoch + 1;

    // Our own limbo list from two epochs ago is now safe.
    let local = unsafe { ctx.local_mut() };
    let safe = &mut local.limbo[((new_epoch + 1) % 3) as usize];
    while let Some(rec) = safe.pop_front() {
        debug_assert!(rec.tag + 2 <= new_epoch, "limbo list reused before its grace period");
        unsafe { ctx.run_retired(rec) };
    }

    // Steal/re-add pass over departed threads' nodes.
    let stolen = ctx.collector().orphans().steal_all();
    for mut batch in stolen {
        let mut keep = RetireList::default();
        while let Some(rec) = batch.pop_front() {
            if rec.tag + 2 <= new_epoch {
                unsafe { ctx.run_retired(rec) };
            } else {
                keep.push_back(rec);
            }
        }
        if let Some((head, tail, len)) = keep.take_chain() {
            ctx.collector().orphans().push(head, tail, len);
        }
    }
    true
}

fn epoch_deregister<R>(ctx: &ThreadContext<R>)
where
    R: Reclaimer<EntryShared = EpochSlot, Local = EpochLocal>,
{
    let local = unsafe { ctx.local_mut() };
    for list in &mut local.limbo {
        if let Some((head, tail, len)) = list.take_chain() {
            ctx.collector().orphans().push(head, tail, len);
        }
    }
    ctx.shared().active.store(false, Ordering::Release);
}

macro_rules! epoch_reclaimer {
    ($(#[$doc:meta])* $name:ident, region_guard: $rg:expr) => {
        $(#[$doc])*
        pub struct $name;

        unsafe impl Reclaimer for $name {
            const NAME: &'static str = stringify!($name);
            const GUARD_IS_REGION: bool = true;
            const REGION_GUARD_IS_REGION: bool = $rg;

            type Global = EpochGlobal;
            type EntryShared = EpochSlot;
            type Local = EpochLocal;
            type Header = ();
            type Pool<N: Node<Self>> = HeapPool<Self, N>;

            fn new_global(cfg: &Config) -> EpochGlobal {
                epoch_new_global(cfg)
            }

            fn new_entry_shared(_: &EpochGlobal) -> EpochSlot {
                epoch_new_entry()
            }

            fn reset_entry(_: &EpochGlobal, entry: &Entry<Self>) {
                entry.shared.active.store(false, Ordering::Release);
            }

            fn new_local(_: &Collector<Self>, _: &Entry<Self>) -> EpochLocal {
                epoch_new_local()
            }

            fn enter(ctx: &ThreadContext<Self>) {
                epoch_enter(ctx);
            }

            fn leave(ctx: &ThreadContext<Self>) {
                epoch_leave(ctx);
            }

            unsafe fn protect<N: Node<Self>>(
                ctx: &ThreadContext<Self>,
                cell: &std::sync::atomic::AtomicUsize,
            ) -> (usize, u32) {
                debug_assert!(ctx.in_region(), "protected load outside a critical region");
                (cell.load(Ordering::Acquire), NO_TOKEN)
            }

            unsafe fn retire<N: Node<Self>>(
                ctx: &ThreadContext<Self>,
                node: *mut N,
                poison: bool,
            ) {
                epoch_retire(ctx, node, poison);
            }

            fn on_deregister(ctx: &ThreadContext<Self>) {
                epoch_deregister(ctx);
            }
        }
    };
}

epoch_reclaimer! {
    /// Epoch-based reclamation: every operation forms its own critical
    /// region, so each guard acquisition pays the entry fence.
    Ebr, region_guard: false
}

epoch_reclaimer! {
    /// New epoch-based reclamation: critical regions span the lifetime of any
    /// guard or region guard, amortizing the entry fence over many
    /// operations.
    Nebr, region_guard: true
}

pub struct QsbrGlobal {
    round: AtomicU64,
}

pub struct QsbrSlot {
    seen: AtomicU64,
}

pub struct QsbrLocal {
    current: RetireList,
    previous: RetireList,
    /// Highest retire round in `previous`.
    previous_max_tag: u64,
}

/// Quiescent-state-based reclamation. A thread is conceptually always inside
/// a critical region; it passes through a quiescent state when its last guard
/// or region guard is released, announcing the round it has seen on a fuzzy
/// barrier that never blocks.
pub struct Qsbr;

fn qsbr_quiesce(ctx: &ThreadContext<Qsbr>) {
    let global = ctx.global();
    let round = global.round.load(Ordering::SeqCst);
    ctx.shared().seen.store(round, Ordering::SeqCst);

    let mut min_seen = u64::MAX;
    ctx.collector().registry().for_each_active(|entry| {
        min_seen = min_seen.min(entry.shared.seen.load(Ordering::SeqCst));
    });

    let local = unsafe { ctx.local_mut() };

    // A batch retired in round r is destroyed only once every registered
    // thread has published seen_round >= r + 1; everybody quiesced after the
    // round in which the batch's last node was retired.
    if !local.previous.is_empty() && min_seen > local.previous_max_tag {
        while let Some(rec) = local.previous.pop_front() {
            debug_assert!(rec.tag < min_seen);
            unsafe { ctx.run_retired(rec) };
        }
    }
    if local.previous.is_empty() && !local.current.is_empty() {
        let (head, tail, len) = local.current.take_chain().unwrap();
        local.previous.append_chain(head, tail, len);
        local.previous_max_tag = unsafe { (*tail).tag };
    }

    // Fuzzy barrier: whoever observes everyone past the current round bumps
    // it; nobody waits.
    if min_seen >= round
        && global
            .round
            .compare_exchange(round, round + 1, Ordering::SeqCst, Ordering::SeqCst)
            .is_ok()
    {
        // Stolen orphans join the current batch and wait out a fresh grace
        // period; what we cannot take responsibility for is re-added at
        // deregistration.
        for mut batch in ctx.collector().orphans().steal_all() {
            while let Some(mut rec) = batch.pop_front() {
                rec.tag = round + 1;
                local.current.push_back(rec);
            }
        }
    }
}

unsafe impl Reclaimer for Qsbr {
    const NAME: &'static str = "Qsbr";
    const GUARD_IS_REGION: bool = true;
    const REGION_GUARD_IS_REGION: bool = true;

    type Global = QsbrGlobal;
    type EntryShared = QsbrSlot;
    type Local = QsbrLocal;
    type Header = ();
    type Pool<N: Node<Self>> = HeapPool<Self, N>;

    fn new_global(_: &Config) -> QsbrGlobal {
        QsbrGlobal { round: AtomicU64::new(0) }
    }

    fn new_entry_shared(global: &QsbrGlobal) -> QsbrSlot {
        QsbrSlot { seen: AtomicU64::new(global.round.load(Ordering::SeqCst)) }
    }

    fn reset_entry(global: &QsbrGlobal, entry: &Entry<Self>) {
        // A newly registered thread is quiescent as of now.
        entry.shared.seen.store(global.round.load(Ordering::SeqCst), Ordering::SeqCst);
    }

    fn new_local(_: &Collector<Self>, _: &Entry<Self>) -> QsbrLocal {
        QsbrLocal {
            current: RetireList::default(),
            previous: RetireList::default(),
            previous_max_tag: 0,
        }
    }

    fn enter(_: &ThreadContext<Self>) {}

    fn leave(ctx: &ThreadContext<Self>) {
        qsbr_quiesce(ctx);
    }

    unsafe fn protect<N: Node<Self>>(
        ctx: &ThreadContext<Self>,
        cell: &std::sync::atomic::AtomicUsize,
    ) -> (usize, u32) {
        debug_assert!(ctx.in_region(), "protected load outside a critical region");
        (cell.load(Ordering::Acquire), NO_TOKEN)
    }

    unsafe fn retire<N: Node<Self>>(ctx: &ThreadContext<Self>, node: *mut N, poison: bool) {
        let mut rec = make_retired::<Self, N>(node, poison);
        rec.tag = ctx.global().round.load(Ordering::SeqCst);
        Counters::bump(&ctx.counters().retired, 1);
        unsafe { ctx.local_mut() }.current.push_back(rec);
    }

    fn on_deregister(ctx: &ThreadContext<Self>) {
        let local = unsafe { ctx.local_mut() };
        for list in [&mut local.previous, &mut local.current] {
            if let Some((head, tail, len)) = list.take_chain() {
                ctx.collector().orphans().push(head, tail, len);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collector::Pool;
    use crate::testing::{DestroyLog, TestPool};

    fn advance_until<R>(ctx: &ThreadContext<R>, target: u64)
    where
        R: Reclaimer<Global = EpochGlobal, EntryShared = EpochSlot, Local = EpochLocal>,
    {
        for _ in 0..16 {
            if ctx.global().epoch.load(Ordering::SeqCst) >= target {
                return;
            }
            assert!(epoch_try_advance(ctx));
        }
        panic!("epoch did not reach {target}");
    }

    #[test]
    fn enter_observes_global_and_leave_clears() {
        let collector = Collector::<Ebr>::with_defaults();
        let ctx = collector.register();
        let pool = TestPool::<Ebr>::new(&collector, false);
        let node = pool.alloc_plain(&ctx);
        let link = pool.link_to(&ctx, node);
        {
            // For EBR the guard itself forms the critical region.
            let g = ctx.guard(&link);
            assert_eq!(g.ptr(), node);
            assert!(ctx.shared().active.load(Ordering::SeqCst));
            assert_eq!(ctx.shared().epoch.load(Ordering::SeqCst), 0);
        }
        assert!(!ctx.shared().active.load(Ordering::SeqCst));
    }

    #[test]
    fn node_destroyed_two_epochs_later() {
        let collector = Collector::<Ebr>::with_defaults();
        let ctx = collector.register();
        let log = DestroyLog::default();
        let pool = TestPool::<Ebr>::new(&collector, false);
        let node = pool.alloc_logged(&ctx, &log);
        let retire_epoch = ctx.global().epoch.load(Ordering::SeqCst);
        unsafe { pool.retire(&ctx, node) };

        advance_until(&ctx, retire_epoch + 1);
        assert_eq!(log.destroyed(), 0);
        advance_until(&ctx, retire_epoch + 2);
        // The advance to retire_epoch + 2 reclaims the list populated two
        // epochs ago.
        assert_eq!(log.destroyed(), 1);
        assert_eq!(collector.unreclaimed(), 0);
    }

    #[test]
    fn lagging_active_thread_blocks_advance() {
        let collector = Collector::<Ebr>::with_defaults();
        let a = collector.register();
        let b = collector.register();
        let pool = TestPool::<Ebr>::new(&collector, false);
        let node = pool.alloc_plain(&b);
        let link = pool.link_to(&b, node);

        let region_b = b.guard(&link); // b active, epoch 0
        assert!(epoch_try_advance(&a)); // all active observed 0 -> epoch 1
        assert_eq!(a.global().epoch.load(Ordering::SeqCst), 1);
        // b is still active with local epoch 0: lags by exactly one.
        assert_eq!(b.shared().epoch.load(Ordering::SeqCst), 0);
        assert!(!epoch_try_advance(&a));
        drop(region_b);
        assert!(epoch_try_advance(&a));
    }

    #[test]
    fn ner_amortizes_entries_over_region() {
        let collector = Collector::<Nebr>::with_defaults();
        let ctx = collector.register();
        let pool = TestPool::<Nebr>::new(&collector, false);
        let node = pool.alloc_plain(&ctx);
        let link = pool.link_to(&ctx, node);

        {
            let _region = ctx.region();
            for _ in 0..100 {
                let g = ctx.guard(&link);
                assert_eq!(g.ptr(), node);
            }
        }
        // One region entry despite 100 guard acquisitions.
        assert_eq!(ctx.thread_counters().region_entries, 1);

        let collector = Collector::<Ebr>::with_defaults();
        let ctx = collector.register();
        let pool = TestPool::<Ebr>::new(&collector, false);
        let node = pool.alloc_plain(&ctx);
        let link = pool.link_to(&ctx, node);
        {
            let _region = ctx.region(); // no-op for Ebr
            for _ in 0..100 {
                let g = ctx.guard(&link);
                assert_eq!(g.ptr(), node);
            }
        }
        assert_eq!(ctx.thread_counters().region_entries, 100);
    }

    #[test]
    fn retire_tags_current_epoch_and_shares_list() {
        let collector = Collector::<Ebr>::with_defaults();
        let ctx = collector.register();
        let pool = TestPool::<Ebr>::new(&collector, false);
        let log = DestroyLog::default();
        let a = pool.alloc_logged(&ctx, &log);
        let b = pool.alloc_logged(&ctx, &log);
        unsafe {
            pool.retire(&ctx, a);
            pool.retire(&ctx, b);
        }
        let epoch = ctx.global().epoch.load(Ordering::SeqCst);
        {
            let local = unsafe { ctx.local_mut() };
            assert_eq!(local.limbo[(epoch % 3) as usize].len(), 2);
        }
        advance_until(&ctx, epoch + 2);
        assert_eq!(log.destroyed(), 2);
    }

    #[test]
    fn qsbr_round_robin_quiescence_reclaims_within_two_rounds() {
        let collector = Collector::<Qsbr>::with_defaults();
        let ctxs: Vec<_> = (0..4).map(|_| collector.register()).collect();
        let pool = TestPool::<Qsbr>::new(&collector, false);
        let log = DestroyLog::default();
        let node = pool.alloc_logged(&ctxs[0], &log);
        unsafe { pool.retire(&ctxs[0], node) };

        for _round in 0..2 {
            for ctx in &ctxs {
                drop(ctx.region()); // open and immediately close: a quiescent pass
            }
        }
        assert_eq!(log.destroyed(), 1, "batch not destroyed within two rounds");
        assert_eq!(collector.unreclaimed(), 0);
    }

    #[test]
    fn qsbr_single_thread_two_passes_destroy() {
        let collector = Collector::<Qsbr>::with_defaults();
        let ctx = collector.register();
        let pool = TestPool::<Qsbr>::new(&collector, false);
        let log = DestroyLog::default();
        let node = pool.alloc_logged(&ctx, &log);
        unsafe { pool.retire(&ctx, node) };

        drop(ctx.region());
        assert_eq!(log.destroyed(), 0);
        drop(ctx.region());
        assert_eq!(log.destroyed(), 1);
    }

    #[test]
    fn qsbr_pinned_thread_starves_reclamation() {
        let collector = Collector::<Qsbr>::with_defaults();
        let pinned = collector.register();
        let worker = collector.register();
        let pool = TestPool::<Qsbr>::new(&collector, false);
        let log = DestroyLog::default();

        let node = pool.alloc_plain(&pinned);
        let link = pool.link_to(&pinned, node);
        let _pin = pinned.guard(&link); // never released below

        for _ in 0..50 {
            let n = pool.alloc_logged(&worker, &log);
            unsafe { pool.retire(&worker, n) };
            drop(worker.region());
        }
        assert_eq!(log.destroyed(), 0, "QSBR reclaimed under a never-quiescing reader");
        assert!(collector.unreclaimed() >= 50);
    }
}
