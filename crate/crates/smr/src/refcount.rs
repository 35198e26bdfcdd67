//! Lock-free reference counting with a claim bit.
//!
//! Every managed node carries a counter word; acquiring a reference is a
//! fetch-and-add followed by a validating re-read of the source link, and the
//! final decrement sets a claim bit in the same compare-and-swap, electing
//! exactly one thread to recycle the node. Reclaimed nodes are not returned to
//! the allocator: they go to a per-structure free list (optionally buffered in
//! bounded thread-local lists) and are reused in the same structure, so a
//! stale counter access always touches valid memory.
//!
//! The padded variant wraps the counter in a cache-line-sized header to avoid
//! false sharing between the counter and neighbouring data.

use std::marker::PhantomData;
use std::ptr;
use std::sync::atomic::{AtomicPtr, AtomicU32, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;

use crate::collector::{
    unmark, Collector, Config, Counters, Entry, Node, Pool, Reclaimer, ThreadContext, NO_TOKEN,
};

const CLAIM: u64 = 1 << 63;
/// Set once the node's first reclamation has been counted; recycles do not
/// count again, keeping `allocated >= reclaimed`.
const COUNTED: u64 = 1 << 62;
const COUNT_MASK: u64 = COUNTED - 1;
const NIL: u32 = u32::MAX;

const SEG_SHIFT: u32 = 12;
const SEG_LEN: usize = 1 << SEG_SHIFT;
const MAX_SEGS: usize = 256;
const LOCAL_BUFFERS: usize = 512;

/// Pads the wrapped value to a destructive-interference-free size.
#[repr(align(128))]
#[derive(Default)]
pub struct CachePadded<T>(pub T);

/// The reference-count header embedded in every managed node.
pub struct RcCore {
    word: AtomicU64,
    slot: AtomicU32,
    free_next: AtomicU32,
    arena: AtomicPtr<()>,
}

impl Default for RcCore {
    fn default() -> Self {
        RcCore {
            word: AtomicU64::new(0),
            slot: AtomicU32::new(NIL),
            free_next: AtomicU32::new(NIL),
            arena: AtomicPtr::new(ptr::null_mut()),
        }
    }
}

impl RcCore {
    /// Current reference count (live references plus in-flight speculation).
    pub fn count(&self) -> u64 {
        self.word.load(Ordering::SeqCst) & COUNT_MASK
    }

    pub fn is_claimed(&self) -> bool {
        self.word.load(Ordering::SeqCst) & CLAIM != 0
    }
}

/// Access to the counter core through either header layout.
pub trait RcHeader: Default + Send + Sync + 'static {
    fn core(&self) -> &RcCore;
}

impl RcHeader for RcCore {
    fn core(&self) -> &RcCore {
        self
    }
}

impl RcHeader for CachePadded<RcCore> {
    fn core(&self) -> &RcCore {
        &self.0
    }
}

/// Selects the header layout of [`RefCount`].
pub trait Padding: Send + Sync + 'static {
    type Header: RcHeader;
    const NAME: &'static str;
}

pub struct Unpadded;
pub struct Padded;

impl Padding for Unpadded {
    type Header = RcCore;
    const NAME: &'static str = "RefCount";
}

impl Padding for Padded {
    type Header = CachePadded<RcCore>;
    const NAME: &'static str = "RefCountPadded";
}

/// Lock-free reference-counting reclaimer.
pub struct RefCount<P: Padding = Unpadded>(PhantomData<P>);

pub type RefCountPadded = RefCount<Padded>;

/// Outcome of one atomic step of the decrement/claim machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReleaseStep {
    /// The compare-and-swap lost a race; run another step.
    Retry,
    /// A reference was dropped; the node stays alive.
    Released,
    /// This step dropped the last reference and won the claim bit.
    /// `first` is true if this is the node's first reclamation.
    Claimed { first: bool },
}

/// One load + compare-and-swap attempt of a release. The production release
/// loop and the exhaustive interleaving tests drive the same transition.
pub fn release_step_word(word: &AtomicU64) -> ReleaseStep {
    let w = word.load(Ordering::SeqCst);
    let count = w & COUNT_MASK;
    assert!(count >= 1, "reference count underflow");
    if count > 1 || (w & CLAIM != 0) {
        // Plain decrement; if the claim bit is set this is a stale
        // speculative reference draining off a free-listed node.
        match word.compare_exchange(w, w - 1, Ordering::SeqCst, Ordering::SeqCst) {
            Ok(_) => ReleaseStep::Released,
            Err(_) => ReleaseStep::Retry,
        }
    } else {
        // Last reference: drop it and set the claim bit in the same CAS.
        let new = (w - 1) | CLAIM | COUNTED;
        match word.compare_exchange(w, new, Ordering::SeqCst, Ordering::SeqCst) {
            Ok(_) => ReleaseStep::Claimed { first: w & COUNTED == 0 },
            Err(_) => ReleaseStep::Retry,
        }
    }
}

fn core_of<'a, P: Padding, N: Node<RefCount<P>>>(node: *mut N) -> &'a RcCore {
    unsafe { (*N::header_ptr(node)).core() }
}

/// Drops one reference from `node`, claiming and recycling it (and,
/// transitively, anything its outgoing links referenced) when the count hits
/// zero.
unsafe fn release_ref<P: Padding, N: Node<RefCount<P>>>(
    ctx: &ThreadContext<RefCount<P>>,
    node: *mut N,
) {
    let mut work: Vec<*mut N> = vec![node];
    while let Some(n) = work.pop() {
        let core = core_of::<P, N>(n);
        loop {
            match release_step_word(&core.word) {
                ReleaseStep::Retry => continue,
                ReleaseStep::Released => break,
                ReleaseStep::Claimed { first } => {
                    // Exclusive owner now: release outgoing links, destroy the
                    // payload and recycle the slot.
                    let mut links = Vec::new();
                    N::collect_links(n, &mut links);
                    for raw in links {
                        let target = unmark(raw);
                        if target != 0 {
                            work.push(target as *mut N);
                        }
                    }
                    if first {
                        Counters::bump(&ctx.counters().reclaimed, 1);
                    }
                    let arena = core.arena.load(Ordering::Acquire) as *const RcArena<P, N>;
                    debug_assert!(!arena.is_null());
                    (*arena).recycle(ctx, n, core);
                    break;
                }
            }
        }
    }
}

struct LocalBuf {
    buf: std::cell::UnsafeCell<Vec<u32>>,
}

// Accessed only by the thread owning the matching registry entry.
unsafe impl Sync for LocalBuf {}
unsafe impl Send for LocalBuf {}

/// Grow-only node arena with a versioned-index free list. Node memory is
/// never handed back to the allocator while the arena lives.
struct RcArena<P: Padding, N: Node<RefCount<P>>> {
    segments: [AtomicPtr<N>; MAX_SEGS],
    bump: AtomicU32,
    free_head: AtomicU64,
    locals: Box<[CachePadded<LocalBuf>]>,
    local_cap: usize,
    poison: bool,
    collector: Arc<Collector<RefCount<P>>>,
}

unsafe impl<P: Padding, N: Node<RefCount<P>>> Send for RcArena<P, N> {}
unsafe impl<P: Padding, N: Node<RefCount<P>>> Sync for RcArena<P, N> {}

impl<P: Padding, N: Node<RefCount<P>>> RcArena<P, N> {
    fn node_ptr(&self, idx: u32) -> *mut N {
        let seg = (idx >> SEG_SHIFT) as usize;
        let off = idx as usize & (SEG_LEN - 1);
        let base = self.segments[seg].load(Ordering::Acquire);
        debug_assert!(!base.is_null());
        unsafe { base.add(off) }
    }

    fn core_at(&self, idx: u32) -> &RcCore {
        core_of::<P, N>(self.node_ptr(idx))
    }

    fn ensure_segment(&self, seg: usize) {
        let cell = &self.segments[seg];
        if !cell.load(Ordering::Acquire).is_null() {
            return;
        }
        let layout = std::alloc::Layout::array::<N>(SEG_LEN).unwrap();
        let mem = unsafe { std::alloc::alloc(layout) } as *mut N;
        assert!(!mem.is_null(), "arena segment allocation failed");
        if cell
            .compare_exchange(ptr::null_mut(), mem, Ordering::AcqRel, Ordering::Acquire)
            .is_err()
        {
            unsafe { std::alloc::dealloc(mem as *mut u8, layout) };
        }
    }

    fn free_pop(&self) -> Option<u32> {
        let mut head = self.free_head.load(Ordering::Acquire);
        loop {
            let idx = head as u32;
            if idx == NIL {
                return None;
            }
            let next = self.core_at(idx).free_next.load(Ordering::Acquire);
            let new = ((head >> 32).wrapping_add(1)) << 32 | next as u64;
            match self.free_head.compare_exchange_weak(
                head,
                new,
                Ordering::AcqRel,
                Ordering::Acquire,
            ) {
                Ok(_) => return Some(idx),
                Err(actual) => head = actual,
            }
        }
    }

    fn free_push(&self, idx: u32) {
        let core = self.core_at(idx);
        let mut head = self.free_head.load(Ordering::Acquire);
        loop {
            core.free_next.store(head as u32, Ordering::Relaxed);
            let new = ((head >> 32).wrapping_add(1)) << 32 | idx as u64;
            match self.free_head.compare_exchange_weak(
                head,
                new,
                Ordering::AcqRel,
                Ordering::Acquire,
            ) {
                Ok(_) => return,
                Err(actual) => head = actual,
            }
        }
    }

    #[allow(clippy::mut_from_ref)]
    fn local_buf(&self, entry_id: u32) -> Option<&mut Vec<u32>> {
        if self.local_cap == 0 || entry_id as usize >= self.locals.len() {
            return None;
        }
        // Single-owner: a registry entry id maps to exactly one live thread.
        Some(unsafe { &mut *self.locals[entry_id as usize].0.buf.get() })
    }

    /// Claimed-node disposal: payload destruction plus free-list recycling
    /// (or poisoning, in which case the slot is quarantined until the arena
    /// drops).
    unsafe fn recycle(&self, ctx: &ThreadContext<RefCount<P>>, node: *mut N, core: &RcCore) {
        if self.poison {
            N::poison_payload(node);
            return;
        }
        N::drop_payload(node);
        let idx = core.slot.load(Ordering::Relaxed);
        if let Some(buf) = self.local_buf(ctx.entry().id()) {
            if buf.len() < self.local_cap {
                buf.push(idx);
                return;
            }
        }
        self.free_push(idx);
    }

    /// Pops a recycled node (thread-local buffer first, then the global free
    /// list), re-arming its claim word, or claims a fresh slot.
    fn checkout(&self, ctx: &ThreadContext<RefCount<P>>) -> *mut N {
        let recycled = self
            .local_buf(ctx.entry().id())
            .and_then(|buf| buf.pop())
            .or_else(|| self.free_pop());
        if let Some(idx) = recycled {
            let core = self.core_at(idx);
            let mut w = core.word.load(Ordering::SeqCst);
            loop {
                debug_assert!(w & CLAIM != 0, "free-listed node without claim bit");
                // Keep any in-flight speculative counts: +1 for the new local
                // reference, claim cleared.
                let new = (w & !CLAIM) + 1;
                match core.word.compare_exchange(w, new, Ordering::SeqCst, Ordering::SeqCst) {
                    Ok(_) => return self.node_ptr(idx),
                    Err(actual) => w = actual,
                }
            }
        }

        let idx = self.bump.fetch_add(1, Ordering::Relaxed);
        assert!((idx as usize) < MAX_SEGS * SEG_LEN, "arena capacity exhausted");
        self.ensure_segment((idx >> SEG_SHIFT) as usize);
        let node = self.node_ptr(idx);
        let header = P::Header::default();
        {
            let core = header.core();
            core.word.store(1, Ordering::Relaxed);
            core.slot.store(idx, Ordering::Relaxed);
            core.arena.store(self as *const Self as *mut (), Ordering::Relaxed);
        }
        unsafe { N::header_ptr(node).write(header) };
        Counters::bump(&ctx.counters().allocated, 1);
        node
    }
}

impl<P: Padding, N: Node<RefCount<P>>> Drop for RcArena<P, N> {
    fn drop(&mut self) {
        let layout = std::alloc::Layout::array::<N>(SEG_LEN).unwrap();
        for cell in &mut self.segments {
            let base = *cell.get_mut();
            if !base.is_null() {
                unsafe { std::alloc::dealloc(base as *mut u8, layout) };
            }
        }
    }
}

/// Per-structure pool backed by a pinned [`RcArena`].
pub struct RcPool<P: Padding, N: Node<RefCount<P>>> {
    arena: Arc<RcArena<P, N>>,
}

impl<P: Padding, N: Node<RefCount<P>>> Pool<RefCount<P>, N> for RcPool<P, N> {
    fn new(collector: &Arc<Collector<RefCount<P>>>, poison: bool) -> Self {
        let local_cap = collector.config().lfrc_local_free_cap;
        let locals = if local_cap > 0 {
            let mut v = Vec::with_capacity(LOCAL_BUFFERS);
            v.resize_with(LOCAL_BUFFERS, || {
                CachePadded(LocalBuf { buf: std::cell::UnsafeCell::new(Vec::new()) })
            });
            v.into_boxed_slice()
        } else {
            Box::new([]) as Box<[CachePadded<LocalBuf>]>
        };
        RcPool {
            arena: Arc::new(RcArena {
                segments: std::array::from_fn(|_| AtomicPtr::new(ptr::null_mut())),
                bump: AtomicU32::new(0),
                free_head: AtomicU64::new(NIL as u64),
                locals,
                local_cap,
                poison,
                collector: Arc::clone(collector),
            }),
        }
    }

    fn alloc(&self, ctx: &ThreadContext<RefCount<P>>) -> *mut N {
        self.arena.checkout(ctx)
    }

    unsafe fn free_unpublished(&self, ctx: &ThreadContext<RefCount<P>>, node: *mut N) {
        release_ref::<P, N>(ctx, node);
    }

    unsafe fn retire(&self, ctx: &ThreadContext<RefCount<P>>, node: *mut N) {
        Counters::bump(&ctx.counters().retired, 1);
        // Retiring under reference counting is dropping the structure's
        // reference; destruction happens at the claim.
        release_ref::<P, N>(ctx, node);
    }

    unsafe fn free_owned(&self, node: *mut N) {
        let core = core_of::<P, N>(node);
        let w = core.word.load(Ordering::Relaxed);
        if w & COUNTED == 0 {
            core.word.store(w | COUNTED, Ordering::Relaxed);
            self.arena.collector.count_teardown_reclaim(1);
        }
        N::drop_payload(node);
    }
}

impl<P: Padding, N: Node<RefCount<P>>> RcPool<P, N> {
    /// Number of nodes currently parked in the global free list.
    pub fn global_free_len(&self) -> usize {
        let mut n = 0;
        let mut idx = self.arena.free_head.load(Ordering::SeqCst) as u32;
        while idx != NIL {
            n += 1;
            idx = self.arena.core_at(idx).free_next.load(Ordering::SeqCst);
        }
        n
    }

    /// Number of nodes in one thread's local free buffer.
    pub fn local_free_len(&self, ctx: &ThreadContext<RefCount<P>>) -> usize {
        self.arena.local_buf(ctx.entry().id()).map_or(0, |b| b.len())
    }
}

unsafe impl<P: Padding> Reclaimer for RefCount<P> {
    const NAME: &'static str = P::NAME;
    const GUARD_IS_REGION: bool = false;
    const REGION_GUARD_IS_REGION: bool = false;

    type Global = ();
    type EntryShared = ();
    type Local = ();
    type Header = P::Header;
    type Pool<N: Node<Self>> = RcPool<P, N>;

    fn new_global(_: &Config) {}
    fn new_entry_shared(_: &()) {}
    fn reset_entry(_: &(), _: &Entry<Self>) {}
    fn new_local(_: &Collector<Self>, _: &Entry<Self>) {}

    fn enter(_: &ThreadContext<Self>) {}
    fn leave(_: &ThreadContext<Self>) {}

    unsafe fn protect<N: Node<Self>>(
        ctx: &ThreadContext<Self>,
        cell: &AtomicUsize,
    ) -> (usize, u32) {
        loop {
            let w1 = cell.load(Ordering::SeqCst);
            let target = unmark(w1);
            if target == 0 {
                return (w1, NO_TOKEN);
            }
            let node = target as *mut N;
            core_of::<P, N>(node).word.fetch_add(1, Ordering::SeqCst);
            let w2 = cell.load(Ordering::SeqCst);
            if unmark(w2) == target {
                return (w2, NO_TOKEN);
            }
            // The link moved on: drop the speculative count and restart.
            release_ref::<P, N>(ctx, node);
        }
    }

    unsafe fn extend<N: Node<Self>>(_: &ThreadContext<Self>, word: usize, _: u32) -> u32 {
        let target = unmark(word);
        if target != 0 {
            core_of::<P, N>(target as *mut N).word.fetch_add(1, Ordering::SeqCst);
        }
        NO_TOKEN
    }

    unsafe fn unprotect<N: Node<Self>>(ctx: &ThreadContext<Self>, word: usize, _: u32) {
        let target = unmark(word);
        if target != 0 {
            release_ref::<P, N>(ctx, target as *mut N);
        }
    }

    unsafe fn link_init<N: Node<Self>>(_: &ThreadContext<Self>, cell: &AtomicUsize, word: usize) {
        let target = unmark(word);
        if target != 0 {
            core_of::<P, N>(target as *mut N).word.fetch_add(1, Ordering::SeqCst);
        }
        cell.store(word, Ordering::Relaxed);
    }

    unsafe fn link_cas<N: Node<Self>>(
        ctx: &ThreadContext<Self>,
        cell: &AtomicUsize,
        current: usize,
        new: usize,
    ) -> bool {
        let cur_t = unmark(current);
        let new_t = unmark(new);
        if cur_t == new_t {
            // Mark-only change; the link's reference is untouched.
            return cell
                .compare_exchange(current, new, Ordering::SeqCst, Ordering::SeqCst)
                .is_ok();
        }
        if new_t != 0 {
            core_of::<P, N>(new_t as *mut N).word.fetch_add(1, Ordering::SeqCst);
        }
        if cell
            .compare_exchange(current, new, Ordering::SeqCst, Ordering::SeqCst)
            .is_ok()
        {
            if cur_t != 0 {
                // The displaced link's reference is ours to drop.
                release_ref::<P, N>(ctx, cur_t as *mut N);
            }
            true
        } else {
            if new_t != 0 {
                release_ref::<P, N>(ctx, new_t as *mut N);
            }
            false
        }
    }

    unsafe fn retire<N: Node<Self>>(ctx: &ThreadContext<Self>, node: *mut N, _poison: bool) {
        // The pool's poison flag governs disposal; the flag argument is for
        // allocator-backed schemes.
        Counters::bump(&ctx.counters().retired, 1);
        release_ref::<P, N>(ctx, node);
    }

    fn on_deregister(_: &ThreadContext<Self>) {}
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collector::MarkedWord;
    use crate::testing::{for_each_interleaving, DestroyLog, TestNode, TestPool};

    type Rc = RefCount<Unpadded>;

    fn count_of(node: *mut TestNode<Rc>) -> u64 {
        core_of::<Unpadded, TestNode<Rc>>(node).count()
    }

    #[test]
    fn acquire_increments_and_validates_stable_source() {
        let collector = Collector::<Rc>::with_defaults();
        let ctx = collector.register();
        let pool = TestPool::<Rc>::new(&collector, false);
        let node = pool.alloc_plain(&ctx);
        assert_eq!(count_of(node), 1);
        let link = pool.link_to(&ctx, node);
        assert_eq!(count_of(node), 2);
        {
            let g = ctx.guard(&link);
            assert_eq!(g.ptr(), node);
            assert_eq!(count_of(node), 3);
        }
        assert_eq!(count_of(node), 2);
    }

    #[test]
    fn acquire_of_empty_source_touches_nothing() {
        let collector = Collector::<Rc>::with_defaults();
        let ctx = collector.register();
        let link: crate::collector::Link<TestNode<Rc>, Rc> = crate::collector::Link::null();
        let g = ctx.guard(&link);
        assert!(g.is_null());
    }

    #[test]
    fn abandoned_acquire_rebalances_counts() {
        // A speculative count on a node that left the link is dropped again,
        // leaving net +1 on the returned node and 0 on the abandoned one.
        let collector = Collector::<Rc>::with_defaults();
        let ctx = collector.register();
        let pool = TestPool::<Rc>::new(&collector, false);
        let a = pool.alloc_plain(&ctx);
        let b = pool.alloc_plain(&ctx);
        let link = pool.link_to(&ctx, a);

        core_of::<Unpadded, _>(a).word.fetch_add(1, Ordering::SeqCst); // speculation on a
        assert!(link.compare_exchange(&ctx, MarkedWord::new(a, false), MarkedWord::new(b, false)));
        unsafe { release_ref::<Unpadded, _>(&ctx, a) }; // re-read failed: abandon
        let g = ctx.guard(&link);
        assert_eq!(g.ptr(), b);
        assert_eq!(count_of(a), 1, "abandoned node keeps only our alloc reference");
        assert_eq!(count_of(b), 3, "returned node: alloc + link + guard");
    }

    #[test]
    fn last_release_claims_and_recycles() {
        let collector = Collector::<Rc>::with_defaults();
        let ctx = collector.register();
        let pool = TestPool::<Rc>::new(&collector, false);
        let log = DestroyLog::default();
        let node = pool.alloc_logged(&ctx, &log);
        assert_eq!(collector.counters().allocated, 1);

        unsafe { pool.retire(&ctx, node) }; // drops the only reference
        assert_eq!(log.destroyed(), 1);
        assert_eq!(collector.counters().reclaimed, 1);
        assert_eq!(pool.pool().global_free_len(), 1);

        // The recycled slot comes back with a fresh count of one.
        let again = pool.alloc_plain(&ctx);
        assert_eq!(again, node, "free list did not recycle the slot");
        assert_eq!(count_of(again), 1);
        // Recycled allocation is not a fresh allocation.
        assert_eq!(collector.counters().allocated, 1);
    }

    #[test]
    fn claim_cascades_through_outgoing_links() {
        let collector = Collector::<Rc>::with_defaults();
        let ctx = collector.register();
        let pool = TestPool::<Rc>::new(&collector, false);
        let log = DestroyLog::default();
        let a = pool.alloc_logged(&ctx, &log);
        let b = pool.alloc_logged(&ctx, &log);
        unsafe {
            (*a).next.init(&ctx, MarkedWord::new(b, false));
            release_ref::<Unpadded, _>(&ctx, b); // a's link keeps b alive
        }
        assert_eq!(log.destroyed(), 0);
        unsafe { release_ref::<Unpadded, _>(&ctx, a) };
        assert_eq!(log.destroyed(), 2, "claiming a did not cascade into b");
        assert_eq!(collector.unreclaimed(), 0);
    }

    #[test]
    fn two_node_cycle_is_never_reclaimed() {
        // Documented limitation: circular structures leak.
        let collector = Collector::<Rc>::with_defaults();
        let ctx = collector.register();
        let pool = TestPool::<Rc>::new(&collector, false);
        let log = DestroyLog::default();
        let a = pool.alloc_logged(&ctx, &log);
        let b = pool.alloc_logged(&ctx, &log);
        unsafe {
            (*a).next.init(&ctx, MarkedWord::new(b, false));
            (*b).next.init(&ctx, MarkedWord::new(a, false));
            release_ref::<Unpadded, _>(&ctx, a);
            release_ref::<Unpadded, _>(&ctx, b);
        }
        assert_eq!(log.destroyed(), 0);
        assert_eq!(collector.unreclaimed(), 2, "the cycle should stay leaked");
    }

    #[test]
    fn exhaustive_two_thread_last_release_has_one_claimer() {
        // Drive two release machines over a count of two through every
        // interleaving of their load+CAS steps.
        let mut schedules = 0;
        for_each_interleaving(4, 4, |schedule| {
            let word = AtomicU64::new(2);
            let mut done = [false, false];
            let mut claims = 0;
            let mut run_one = |word: &AtomicU64, done: &mut [bool; 2], claims: &mut i32, i: usize| {
                if done[i] {
                    return;
                }
                match release_step_word(word) {
                    ReleaseStep::Retry => {}
                    ReleaseStep::Released => done[i] = true,
                    ReleaseStep::Claimed { .. } => {
                        *claims += 1;
                        done[i] = true;
                    }
                }
            };
            for &who in schedule {
                run_one(&word, &mut done, &mut claims, usize::from(who));
            }
            // Finish any machine the schedule left mid-flight.
            for i in 0..2 {
                while !done[i] {
                    run_one(&word, &mut done, &mut claims, i);
                }
            }
            assert_eq!(claims, 1, "schedule produced {claims} claim winners");
            assert_eq!(word.load(Ordering::SeqCst) & COUNT_MASK, 0);
            assert!(word.load(Ordering::SeqCst) & CLAIM != 0);
            schedules += 1;
        });
        assert!(schedules >= 70, "expected the full interleaving space");
    }

    #[test]
    fn local_free_buffer_spills_to_global() {
        let cfg = Config { lfrc_local_free_cap: 20, ..Config::default() };
        let collector = Collector::<Rc>::new(cfg);
        let ctx = collector.register();
        let pool = TestPool::<Rc>::new(&collector, false);
        let nodes: Vec<_> = (0..25).map(|_| pool.alloc_plain(&ctx)).collect();
        for n in nodes {
            unsafe { pool.retire(&ctx, n) };
        }
        assert_eq!(pool.pool().local_free_len(&ctx), 20);
        assert_eq!(pool.pool().global_free_len(), 5);
        // Allocation drains the local buffer first.
        let _n = pool.alloc_plain(&ctx);
        assert_eq!(pool.pool().local_free_len(&ctx), 19);
    }

    #[test]
    fn padded_header_occupies_a_full_line() {
        assert!(size_of::<CachePadded<RcCore>>() >= 128);
        assert!(size_of::<RcCore>() <= 64);
        assert_eq!(align_of::<CachePadded<RcCore>>(), 128);
    }

    #[test]
    fn randomized_guard_storm_keeps_counts_exact() {
        use crate::testing::SplitMix64;
        let collector = Collector::<Rc>::with_defaults();
        let ctx = collector.register();
        let pool = TestPool::<Rc>::new(&collector, false);
        let node = pool.alloc_plain(&ctx);
        let link = pool.link_to(&ctx, node);

        let mut rng = SplitMix64::new(0xC0FFEE);
        let mut guards = Vec::new();
        for _ in 0..100_000 {
            if rng.next_f64() < 0.5 {
                guards.push(ctx.guard(&link));
            } else {
                guards.pop();
            }
            // count = alloc ref + link ref + live guards
            assert_eq!(count_of(node), 2 + guards.len() as u64);
        }
    }
}
