//! The reclaimer-agnostic core: thread registration, guards, critical
//! regions, retire plumbing and the orphan hand-off for departing threads.

use std::alloc::Layout;
use std::cell::{Cell, UnsafeCell};
use std::marker::PhantomData;
use std::sync::atomic::AtomicUsize;
use std::sync::Arc;

mod config;
mod counters;
mod link;
mod registry;
mod retired;
mod slab;

pub use config::{Config, HpMode};
pub use counters::{CounterSnapshot, Counters};
pub use link::{Link, MarkedWord};
pub use retired::{DestroyCtx, Graveyard, OrphanList, Retired, RetireList};
pub use retired::{CANARY_DEAD, CANARY_LIVE, POISON_BYTE};

pub(crate) use link::unmark;
pub(crate) use registry::{Entry, Registry};
pub(crate) use slab::{Slab, SlabSlot};

/// Guard token meaning "no per-guard resource held".
pub(crate) const NO_TOKEN: u32 = u32::MAX;

/// A memory reclamation scheme.
///
/// Implementations provide the per-thread state, the guard validation
/// protocol and the retire bookkeeping; the orchestration (region reference
/// counting, registration, orphan hand-off) lives in this module.
///
/// # Safety
/// An implementation must guarantee that a node handed to
/// [`retire`](Reclaimer::retire) has its destruction action run at most once,
/// and never while a guard returned by [`protect`](Reclaimer::protect) for
/// that node is live or, for region-based schemes, while any thread that was
/// inside a critical region at retire time has not yet left it.
pub unsafe trait Reclaimer: Sized + Send + Sync + 'static {
    const NAME: &'static str;
    /// Guards participate in the critical-region reference count.
    const GUARD_IS_REGION: bool;
    /// Explicit region guards participate in the reference count.
    const REGION_GUARD_IS_REGION: bool;

    type Global: Send + Sync;
    type EntryShared: Send + Sync;
    type Local: Send;
    type Header: Send + Sync + Default;
    type Pool<N: Node<Self>>: Pool<Self, N>;

    fn new_global(cfg: &Config) -> Self::Global;
    fn new_entry_shared(global: &Self::Global) -> Self::EntryShared;
    /// Prepares a recycled (or fresh) registry entry for a new owner.
    fn reset_entry(global: &Self::Global, entry: &Entry<Self>);
    fn new_local(collector: &Collector<Self>, entry: &Entry<Self>) -> Self::Local;

    /// Outermost critical-region entry.
    fn enter(ctx: &ThreadContext<Self>);
    /// Outermost critical-region exit; may reclaim.
    fn leave(ctx: &ThreadContext<Self>);

    /// Validated protected load of a link cell: returns a `(word, token)`
    /// pair such that the scheme's safety protocol covered the word's target
    /// at some instant of the call.
    ///
    /// # Safety
    /// `cell` must be a link cell of a structure managed by this scheme and
    /// nodes of type `N`.
    unsafe fn protect<N: Node<Self>>(
        ctx: &ThreadContext<Self>,
        cell: &AtomicUsize,
    ) -> (usize, u32);

    /// Duplicates protection of an already-protected word.
    ///
    /// # Safety
    /// `(word, token)` must come from a live guard of this thread.
    unsafe fn extend<N: Node<Self>>(ctx: &ThreadContext<Self>, word: usize, token: u32) -> u32 {
        let _ = (ctx, word, token);
        NO_TOKEN
    }

    /// Releases protection.
    ///
    /// # Safety
    /// `(word, token)` must come from a live guard of this thread.
    unsafe fn unprotect<N: Node<Self>>(ctx: &ThreadContext<Self>, word: usize, token: u32) {
        let _ = (ctx, word, token);
    }

    /// Initializes a link in a not-yet-published node.
    ///
    /// # Safety
    /// The node owning `cell` must be unpublished; `word`'s target, if any,
    /// must be protected or owned by the caller.
    unsafe fn link_init<N: Node<Self>>(
        ctx: &ThreadContext<Self>,
        cell: &AtomicUsize,
        word: usize,
    ) {
        let _ = ctx;
        cell.store(word, std::sync::atomic::Ordering::Relaxed);
    }

    /// Link update with scheme-specific reference transfer.
    ///
    /// # Safety
    /// `current`'s and `new`'s targets must be protected or owned by the
    /// caller for the duration of the call.
    unsafe fn link_cas<N: Node<Self>>(
        ctx: &ThreadContext<Self>,
        cell: &AtomicUsize,
        current: usize,
        new: usize,
    ) -> bool {
        use std::sync::atomic::Ordering;
        let _ = ctx;
        cell.compare_exchange(current, new, Ordering::AcqRel, Ordering::Acquire)
            .is_ok()
    }

    /// Hands an unlinked node to the scheme for eventual destruction.
    ///
    /// # Safety
    /// The node must be fully unlinked (no new references obtainable), not
    /// retired before, and its payload drop must not call back into this
    /// collector.
    unsafe fn retire<N: Node<Self>>(ctx: &ThreadContext<Self>, node: *mut N, poison: bool);

    /// Moves still-unreclaimed nodes to the orphan list and clears shared
    /// entry state; runs right before the registry entry is released.
    fn on_deregister(ctx: &ThreadContext<Self>);
}

/// A node manageable by scheme `R`: exposes its embedded header, its outgoing
/// managed links and payload destruction.
///
/// # Safety
/// `header_ptr` must point at a `R::Header` field embedded in the node that
/// stays valid for the node's whole allocation lifetime. `collect_links` must
/// report every managed link the node owns.
pub unsafe trait Node<R: Reclaimer>: Sized + Send {
    /// Location of the scheme header inside the (possibly uninitialized) node.
    unsafe fn header_ptr(node: *mut Self) -> *mut R::Header;

    fn header(&self) -> &R::Header {
        unsafe { &*Self::header_ptr(self as *const Self as *mut Self) }
    }

    /// Pushes the raw words of all outgoing managed links.
    unsafe fn collect_links(node: *mut Self, out: &mut Vec<usize>);

    /// Drops the payload fields (links and header excluded).
    unsafe fn drop_payload(node: *mut Self);

    /// Overwrites the payload with the poison pattern instead of dropping it.
    unsafe fn poison_payload(node: *mut Self);

    /// Debug-build canary assertion; no-op unless the node type carries one.
    fn check_canary(&self) {}
}

/// Node allocation and retirement front-end for one structure.
pub trait Pool<R: Reclaimer, N: Node<R>>: Send + Sync {
    fn new(collector: &Arc<Collector<R>>, poison: bool) -> Self;

    /// Allocates a node with its header initialized. All other fields are
    /// uninitialized; the caller writes them before publishing.
    fn alloc(&self, ctx: &ThreadContext<R>) -> *mut N;

    /// Frees a node that was never published to other threads.
    ///
    /// # Safety
    /// `node` must come from this pool with fully initialized fields and must
    /// never have been reachable by another thread.
    unsafe fn free_unpublished(&self, ctx: &ThreadContext<R>, node: *mut N);

    /// Retires an unlinked node.
    ///
    /// # Safety
    /// Same contract as [`Reclaimer::retire`].
    unsafe fn retire(&self, ctx: &ThreadContext<R>, node: *mut N);

    /// Directly destroys a node still owned by the structure; used by
    /// single-threaded teardown.
    ///
    /// # Safety
    /// No other thread may be able to reach the node.
    unsafe fn free_owned(&self, node: *mut N);
}

pub(crate) unsafe fn destroy_free<R: Reclaimer, N: Node<R>>(node: *mut (), _ctx: &DestroyCtx) {
    let node = node as *mut N;
    N::drop_payload(node);
    std::alloc::dealloc(node as *mut u8, Layout::new::<N>());
}

pub(crate) unsafe fn destroy_poison<R: Reclaimer, N: Node<R>>(node: *mut (), ctx: &DestroyCtx) {
    let node = node as *mut N;
    N::poison_payload(node);
    ctx.graveyard.push(node as *mut u8, Layout::new::<N>());
}

/// Builds a retire record for `node` with the appropriate destroy action.
pub(crate) fn make_retired<R: Reclaimer, N: Node<R>>(node: *mut N, poison: bool) -> Box<Retired> {
    let destroy = if poison { destroy_poison::<R, N> } else { destroy_free::<R, N> };
    Retired::new(node as *mut (), destroy)
}

/// Heap-backed pool for schemes that return reclaimed memory to the allocator.
pub struct HeapPool<R: Reclaimer, N: Node<R>> {
    collector: Arc<Collector<R>>,
    poison: bool,
    _pd: PhantomData<fn(N) -> N>,
}

impl<R: Reclaimer, N: Node<R>> Pool<R, N> for HeapPool<R, N> {
    fn new(collector: &Arc<Collector<R>>, poison: bool) -> Self {
        HeapPool { collector: Arc::clone(collector), poison, _pd: PhantomData }
    }

    fn alloc(&self, ctx: &ThreadContext<R>) -> *mut N {
        let node = unsafe { std::alloc::alloc(Layout::new::<N>()) } as *mut N;
        assert!(!node.is_null(), "node allocation failed");
        unsafe { N::header_ptr(node).write(R::Header::default()) };
        Counters::bump(&ctx.counters().allocated, 1);
        node
    }

    unsafe fn free_unpublished(&self, ctx: &ThreadContext<R>, node: *mut N) {
        N::drop_payload(node);
        std::alloc::dealloc(node as *mut u8, Layout::new::<N>());
        Counters::bump(&ctx.counters().reclaimed, 1);
    }

    unsafe fn retire(&self, ctx: &ThreadContext<R>, node: *mut N) {
        R::retire(ctx, node, self.poison);
    }

    unsafe fn free_owned(&self, node: *mut N) {
        N::drop_payload(node);
        std::alloc::dealloc(node as *mut u8, Layout::new::<N>());
        self.collector.count_teardown_reclaim(1);
    }
}

/// One collector instance: a registry of participating threads plus the
/// scheme's global state. Structures and thread contexts created from the
/// same collector cooperate; separate collectors are fully independent.
pub struct Collector<R: Reclaimer> {
    cfg: Config,
    global: R::Global,
    registry: Registry<R>,
    orphans: OrphanList,
    graveyard: Graveyard,
    departed: Counters,
}

impl<R: Reclaimer> Collector<R> {
    pub fn new(cfg: Config) -> Arc<Self> {
        Arc::new(Collector {
            global: R::new_global(&cfg),
            cfg,
            registry: Registry::default(),
            orphans: OrphanList::default(),
            graveyard: Graveyard::default(),
            departed: Counters::default(),
        })
    }

    pub fn with_defaults() -> Arc<Self> {
        Self::new(Config::default())
    }

    /// Registers the calling thread and returns its context.
    pub fn register(self: &Arc<Self>) -> ThreadContext<R> {
        let entry = self.registry.acquire(&self.global);
        let entry_ref = unsafe { &*entry };
        R::reset_entry(&self.global, entry_ref);
        ThreadContext {
            local: UnsafeCell::new(R::new_local(self, entry_ref)),
            collector: Arc::clone(self),
            entry,
            region_refs: Cell::new(0),
            region_depth: Cell::new(0),
        }
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub(crate) fn global(&self) -> &R::Global {
        &self.global
    }

    pub(crate) fn registry(&self) -> &Registry<R> {
        &self.registry
    }

    pub(crate) fn orphans(&self) -> &OrphanList {
        &self.orphans
    }

    pub(crate) fn graveyard(&self) -> &Graveyard {
        &self.graveyard
    }

    /// Number of currently registered threads.
    pub fn registered_threads(&self) -> u32 {
        self.registry.active()
    }

    /// Sum of all per-thread counters plus the departed-thread aggregate.
    pub fn counters(&self) -> CounterSnapshot {
        let mut snap = self.departed.snapshot();
        self.registry.for_each(|entry| snap.add(&entry.counters.snapshot()));
        snap
    }

    /// Allocated minus reclaimed nodes, including orphaned and live ones.
    pub fn unreclaimed(&self) -> u64 {
        self.counters().unreclaimed()
    }

    /// Retired nodes currently parked on the orphan list.
    pub fn orphaned_nodes(&self) -> u64 {
        self.orphans.node_count()
    }

    /// Nodes parked in the poison-test graveyard.
    pub fn graveyard_len(&self) -> u64 {
        self.graveyard.len()
    }

    pub(crate) fn count_teardown_reclaim(&self, n: u64) {
        use std::sync::atomic::Ordering::Relaxed;
        self.departed.reclaimed.fetch_add(n, Relaxed);
    }
}

/// A registered thread's handle to the collector.
///
/// The context is the identity the spec calls the thread state: guards and
/// regions are created through it and borrow it, so it can only migrate to
/// another OS thread while no guards are live. Dropping it deregisters the
/// thread and hands still-unreclaimed nodes to the orphan list.
pub struct ThreadContext<R: Reclaimer> {
    collector: Arc<Collector<R>>,
    entry: *mut Entry<R>,
    local: UnsafeCell<R::Local>,
    region_refs: Cell<u32>,
    region_depth: Cell<u32>,
}

// The raw entry pointer stays valid for the collector's lifetime (entries are
// never freed while it lives) and all interior state is single-owner.
unsafe impl<R: Reclaimer> Send for ThreadContext<R> {}

impl<R: Reclaimer> ThreadContext<R> {
    pub fn collector(&self) -> &Arc<Collector<R>> {
        &self.collector
    }

    pub(crate) fn entry(&self) -> &Entry<R> {
        unsafe { &*self.entry }
    }

    pub(crate) fn counters(&self) -> &Counters {
        &self.entry().counters
    }

    pub(crate) fn shared(&self) -> &R::EntryShared {
        &self.entry().shared
    }

    pub(crate) fn global(&self) -> &R::Global {
        self.collector.global()
    }

    /// Exclusive access to the scheme's thread-private state.
    ///
    /// # Safety
    /// The caller must not hold another `local_mut` borrow; scheme code never
    /// re-enters itself through destroy actions (payload drops are plain).
    #[allow(clippy::mut_from_ref)]
    pub(crate) unsafe fn local_mut(&self) -> &mut R::Local {
        &mut *self.local.get()
    }

    /// Snapshot of this thread's counters.
    pub fn thread_counters(&self) -> CounterSnapshot {
        self.counters().snapshot()
    }

    /// Acquires a guard on the value read from `link`, validated by the
    /// scheme's safety protocol. The guard's target may be null.
    pub fn guard<'t, N: Node<R>>(&'t self, link: &Link<N, R>) -> Guard<'t, N, R> {
        if R::GUARD_IS_REGION {
            self.protection_enter();
        }
        let (word, token) = unsafe { R::protect::<N>(self, link.cell()) };
        Guard { ctx: self, word, token, _pd: PhantomData }
    }

    /// Opens a critical region; regions nest by counting.
    pub fn region(&self) -> RegionGuard<'_, R> {
        let depth = self.region_depth.get();
        self.region_depth.set(depth + 1);
        if depth == 0 && R::REGION_GUARD_IS_REGION {
            self.protection_enter();
        }
        RegionGuard { ctx: self }
    }

    /// Current region nesting depth.
    pub fn region_depth(&self) -> u32 {
        self.region_depth.get()
    }

    /// Whether the scheme currently considers this thread inside a region.
    pub fn in_region(&self) -> bool {
        self.region_refs.get() > 0
    }

    /// Retires an unlinked node.
    ///
    /// # Safety
    /// Same contract as [`Reclaimer::retire`]; under reference counting the
    /// node must have been allocated from a pool of this collector.
    pub unsafe fn retire<N: Node<R>>(&self, node: *mut N, poison: bool) {
        R::retire(self, node, poison);
    }

    fn protection_enter(&self) {
        let refs = self.region_refs.get();
        self.region_refs.set(refs + 1);
        if refs == 0 {
            Counters::bump(&self.counters().region_entries, 1);
            R::enter(self);
        }
    }

    fn protection_exit(&self) {
        let refs = self.region_refs.get();
        debug_assert!(refs > 0, "region exit without matching entry");
        self.region_refs.set(refs - 1);
        if refs == 1 {
            R::leave(self);
        }
    }

    pub(crate) fn destroy_ctx(&self) -> DestroyCtx<'_> {
        DestroyCtx { graveyard: self.collector.graveyard() }
    }

    /// Runs a retire record's destroy action and counts the reclamation.
    ///
    /// # Safety
    /// `rec` must be an owned record whose node is safe to destroy.
    pub(crate) unsafe fn run_retired(&self, rec: Box<Retired>) {
        Retired::run(Box::into_raw(rec), &self.destroy_ctx());
        Counters::bump(&self.counters().reclaimed, 1);
    }
}

impl<R: Reclaimer> Drop for ThreadContext<R> {
    fn drop(&mut self) {
        debug_assert_eq!(self.region_refs.get(), 0, "deregistering with open guards");
        debug_assert_eq!(self.region_depth.get(), 0, "deregistering with open regions");
        R::on_deregister(self);
        self.entry().counters.drain_into(&self.collector.departed);
        self.collector.registry.release(self.entry());
    }
}

/// A scoped token making one node safe from reclamation.
pub struct Guard<'t, N: Node<R>, R: Reclaimer> {
    ctx: &'t ThreadContext<R>,
    word: usize,
    token: u32,
    _pd: PhantomData<*mut N>,
}

impl<'t, N: Node<R>, R: Reclaimer> Guard<'t, N, R> {
    /// The protected word as read from the source link (mark bit included).
    pub fn word(&self) -> MarkedWord<N> {
        MarkedWord::from_raw(self.word)
    }

    /// The protected node pointer, mark stripped.
    pub fn ptr(&self) -> *mut N {
        self.word().ptr()
    }

    pub fn is_null(&self) -> bool {
        self.ptr().is_null()
    }

    pub fn is_marked(&self) -> bool {
        self.word().is_marked()
    }

    /// Dereferences the protected node.
    pub fn get(&self) -> Option<&N> {
        // Guard semantics keep the target alive while `self` lives.
        unsafe { self.ptr().as_ref() }
    }

    /// A second guard on the same node.
    pub fn duplicate(&self) -> Guard<'t, N, R> {
        if R::GUARD_IS_REGION {
            self.ctx.protection_enter();
        }
        let token = unsafe { R::extend::<N>(self.ctx, self.word, self.token) };
        Guard { ctx: self.ctx, word: self.word, token, _pd: PhantomData }
    }

    pub(crate) fn ctx(&self) -> &'t ThreadContext<R> {
        self.ctx
    }
}

impl<N: Node<R>, R: Reclaimer> Drop for Guard<'_, N, R> {
    fn drop(&mut self) {
        unsafe { R::unprotect::<N>(self.ctx, self.word, self.token) };
        if R::GUARD_IS_REGION {
            self.ctx.protection_exit();
        }
    }
}

/// A scoped critical region. Nested regions only adjust the nesting depth;
/// the outermost open/close runs the scheme's enter/leave protocol.
pub struct RegionGuard<'t, R: Reclaimer> {
    ctx: &'t ThreadContext<R>,
}

impl<R: Reclaimer> Drop for RegionGuard<'_, R> {
    fn drop(&mut self) {
        let depth = self.ctx.region_depth.get();
        debug_assert!(depth > 0, "region close without matching open");
        self.ctx.region_depth.set(depth - 1);
        if depth == 1 && R::REGION_GUARD_IS_REGION {
            self.ctx.protection_exit();
        }
    }
}
