//! Test support: a minimal managed node type usable under every scheme, with
//! an optional destruction log. Used by the crate's own tests and the
//! acceptance suite; not part of the stable API.
#![doc(hidden)]

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;

use crate::collector::{
    Collector, Guard, Link, MarkedWord, Node, Pool, Reclaimer, ThreadContext, CANARY_DEAD,
    CANARY_LIVE,
};

/// Shared counter a test node reports its destruction to.
#[derive(Clone, Default)]
pub struct DestroyLog {
    inner: Arc<AtomicU64>,
}

impl DestroyLog {
    pub fn destroyed(&self) -> u64 {
        self.inner.load(Ordering::SeqCst)
    }
}

/// A managed node with one outgoing link and a canary/payload word.
pub struct TestNode<R: Reclaimer> {
    header: R::Header,
    pub next: Link<TestNode<R>, R>,
    log: *const AtomicU64,
    pub value: AtomicU64,
}

unsafe impl<R: Reclaimer> Send for TestNode<R> {}
unsafe impl<R: Reclaimer> Sync for TestNode<R> {}

unsafe impl<R: Reclaimer> Node<R> for TestNode<R> {
    unsafe fn header_ptr(node: *mut Self) -> *mut R::Header {
        std::ptr::addr_of_mut!((*node).header)
    }

    unsafe fn collect_links(node: *mut Self, out: &mut Vec<usize>) {
        let word = (*node).next.load_word(Ordering::Relaxed);
        if !word.is_null() {
            out.push(word.raw());
        }
    }

    unsafe fn drop_payload(node: *mut Self) {
        let log = (*node).log;
        if !log.is_null() {
            (*log).fetch_add(1, Ordering::SeqCst);
        }
    }

    unsafe fn poison_payload(node: *mut Self) {
        let log = (*node).log;
        if !log.is_null() {
            (*log).fetch_add(1, Ordering::SeqCst);
        }
        (*node).value.store(CANARY_DEAD, Ordering::SeqCst);
    }

    fn check_canary(&self) {
        debug_assert_ne!(
            self.value.load(Ordering::SeqCst),
            CANARY_DEAD,
            "observed a poisoned node under a live guard"
        );
    }
}

/// Pool wrapper for [`TestNode`], generic over the scheme.
pub struct TestPool<R: Reclaimer> {
    pool: R::Pool<TestNode<R>>,
    // Keeps the logs of logged nodes alive until the pool goes away.
    logs: std::sync::Mutex<Vec<Arc<AtomicU64>>>,
}

impl<R: Reclaimer> TestPool<R> {
    pub fn new(collector: &Arc<Collector<R>>, poison: bool) -> Self {
        TestPool { pool: R::Pool::new(collector, poison), logs: std::sync::Mutex::new(Vec::new()) }
    }

    fn alloc(&self, ctx: &ThreadContext<R>, log: *const AtomicU64) -> *mut TestNode<R> {
        let node = self.pool.alloc(ctx);
        unsafe {
            std::ptr::addr_of_mut!((*node).next).write(Link::null());
            std::ptr::addr_of_mut!((*node).log).write(log);
            std::ptr::addr_of_mut!((*node).value).write(AtomicU64::new(CANARY_LIVE));
        }
        node
    }

    pub fn alloc_plain(&self, ctx: &ThreadContext<R>) -> *mut TestNode<R> {
        self.alloc(ctx, std::ptr::null())
    }

    pub fn alloc_logged(&self, ctx: &ThreadContext<R>, log: &DestroyLog) -> *mut TestNode<R> {
        self.logs.lock().unwrap().push(Arc::clone(&log.inner));
        self.alloc(ctx, Arc::as_ptr(&log.inner))
    }

    /// A standalone link cell referencing `node`, as a stand-in for a
    /// structure root.
    pub fn link_to(&self, ctx: &ThreadContext<R>, node: *mut TestNode<R>) -> Link<TestNode<R>, R> {
        let link = Link::null();
        link.init(ctx, MarkedWord::new(node, false));
        link
    }

    /// Retires `node`.
    ///
    /// # Safety
    /// Same contract as [`Reclaimer::retire`].
    pub unsafe fn retire(&self, ctx: &ThreadContext<R>, node: *mut TestNode<R>) {
        self.pool.retire(ctx, node);
    }

    /// Unlinks `link`'s current target and retires it.
    pub fn unlink_and_retire(
        &self,
        ctx: &ThreadContext<R>,
        link: &Link<TestNode<R>, R>,
    ) -> bool {
        let cur = link.load_word(Ordering::SeqCst);
        if cur.is_null() {
            return false;
        }
        if link.compare_exchange(ctx, cur, MarkedWord::null()) {
            unsafe { self.pool.retire(ctx, cur.ptr()) };
            true
        } else {
            false
        }
    }

    pub fn pool(&self) -> &R::Pool<TestNode<R>> {
        &self.pool
    }
}

/// Reads the canary/payload word under a guard, asserting it is not poisoned.
pub fn read_guarded<R: Reclaimer>(guard: &Guard<'_, TestNode<R>, R>) -> Option<u64> {
    guard.get().map(|node| {
        node.check_canary();
        let v = node.value.load(Ordering::SeqCst);
        assert_ne!(v, CANARY_DEAD, "observed a poisoned node under a live guard");
        v
    })
}

/// Deterministic 64-bit splittable generator for seeded test/benchmark
/// randomness.
#[derive(Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform value in `[0, bound)`.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        if bound == 0 {
            return 0;
        }
        self.next_u64() % bound
    }

    /// Uniform float in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

/// Enumerates all interleavings of two scripts of atomic steps, invoking
/// `run` with each schedule (a bitmask-style vec: false = thread A's next
/// step, true = thread B's).
pub fn for_each_interleaving(a_steps: usize, b_steps: usize, mut run: impl FnMut(&[bool])) {
    fn rec(a_left: usize, b_left: usize, cur: &mut Vec<bool>, run: &mut impl FnMut(&[bool])) {
        if a_left == 0 && b_left == 0 {
            run(cur);
            return;
        }
        if a_left > 0 {
            cur.push(false);
            rec(a_left - 1, b_left, cur, run);
            cur.pop();
        }
        if b_left > 0 {
            cur.push(true);
            rec(a_left, b_left - 1, cur, run);
            cur.pop();
        }
    }
    rec(a_steps, b_steps, &mut Vec::new(), &mut run);
}
