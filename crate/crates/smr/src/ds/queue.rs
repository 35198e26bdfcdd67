//! A Michael–Scott lock-free FIFO queue.

use std::mem::MaybeUninit;
use std::ptr;
use std::sync::atomic::Ordering;
use std::sync::Arc;

use crate::collector::{
    Collector, Counters, Link, MarkedWord, Node, Pool, Reclaimer, ThreadContext,
};
#[cfg(debug_assertions)]
use crate::collector::{CANARY_DEAD, CANARY_LIVE};

pub struct QueueNode<T, R: Reclaimer> {
    header: R::Header,
    /// Live in every node except the current dummy; ownership is managed by
    /// the queue (moved out on dequeue), so `drop_payload` leaves it alone.
    value: MaybeUninit<T>,
    next: Link<QueueNode<T, R>, R>,
    #[cfg(debug_assertions)]
    canary: std::sync::atomic::AtomicU64,
}

unsafe impl<T: Send, R: Reclaimer> Send for QueueNode<T, R> {}
unsafe impl<T: Send, R: Reclaimer> Sync for QueueNode<T, R> {}

unsafe impl<T: Send, R: Reclaimer> Node<R> for QueueNode<T, R> {
    unsafe fn header_ptr(node: *mut Self) -> *mut R::Header {
        ptr::addr_of_mut!((*node).header)
    }

    unsafe fn collect_links(node: *mut Self, out: &mut Vec<usize>) {
        let w = (*node).next.load_word(Ordering::Relaxed);
        if !w.is_null() {
            out.push(w.raw());
        }
    }

    unsafe fn drop_payload(_: *mut Self) {
        // Retired queue nodes are former dummies; their value slot is empty.
    }

    unsafe fn poison_payload(node: *mut Self) {
        ptr::write_bytes(
            ptr::addr_of_mut!((*node).value) as *mut u8,
            crate::collector::POISON_BYTE,
            size_of::<MaybeUninit<T>>(),
        );
        #[cfg(debug_assertions)]
        (*node).canary.store(CANARY_DEAD, Ordering::SeqCst);
    }

    fn check_canary(&self) {
        #[cfg(debug_assertions)]
        debug_assert_ne!(
            self.canary.load(Ordering::SeqCst),
            CANARY_DEAD,
            "queue traversal observed a poisoned node under a live guard"
        );
    }
}

/// Lock-free FIFO queue; dequeued nodes are retired through the configured
/// reclaimer.
pub struct MsQueue<T: Send, R: Reclaimer> {
    pool: R::Pool<QueueNode<T, R>>,
    head: Link<QueueNode<T, R>, R>,
    tail: Link<QueueNode<T, R>, R>,
}

unsafe impl<T: Send, R: Reclaimer> Send for MsQueue<T, R> {}
unsafe impl<T: Send, R: Reclaimer> Sync for MsQueue<T, R> {}

impl<T: Send, R: Reclaimer> MsQueue<T, R> {
    pub fn new(collector: &Arc<Collector<R>>, ctx: &ThreadContext<R>) -> Self {
        Self::with_pool(R::Pool::new(collector, false), ctx)
    }

    /// A queue whose retired nodes are poisoned and quarantined instead of
    /// freed; canary checks in debug builds then catch any read of a
    /// reclaimed node. Testing facility.
    pub fn new_poisoned(collector: &Arc<Collector<R>>, ctx: &ThreadContext<R>) -> Self {
        Self::with_pool(R::Pool::new(collector, true), ctx)
    }

    fn with_pool(pool: R::Pool<QueueNode<T, R>>, ctx: &ThreadContext<R>) -> Self {
        let dummy = Self::alloc_node(&pool, ctx);
        let queue = MsQueue { pool, head: Link::null(), tail: Link::null() };
        queue.head.init(ctx, MarkedWord::new(dummy, false));
        queue.tail.init(ctx, MarkedWord::new(dummy, false));
        queue
    }

    fn alloc_node(pool: &R::Pool<QueueNode<T, R>>, ctx: &ThreadContext<R>) -> *mut QueueNode<T, R> {
        let node = pool.alloc(ctx);
        unsafe {
            ptr::addr_of_mut!((*node).next).write(Link::null());
            #[cfg(debug_assertions)]
            ptr::addr_of_mut!((*node).canary).write(std::sync::atomic::AtomicU64::new(CANARY_LIVE));
        }
        node
    }

    pub fn enqueue(&self, ctx: &ThreadContext<R>, value: T) {
        let node = Self::alloc_node(&self.pool, ctx);
        unsafe { ptr::addr_of_mut!((*node).value).write(MaybeUninit::new(value)) };
        let node_word = MarkedWord::new(node, false);
        loop {
            let tail_guard = ctx.guard(&self.tail);
            let tail_node = tail_guard.get().expect("queue tail is never null");
            tail_node.check_canary();
            let next = tail_node.next.load_word(Ordering::Acquire);
            if !next.is_null() {
                // Tail lags; help it forward. The successor cannot have been
                // retired while the tail link still references its
                // predecessor.
                self.tail.compare_exchange(ctx, tail_guard.word(), next);
                continue;
            }
            if tail_node.next.compare_exchange(ctx, MarkedWord::null(), node_word) {
                self.tail.compare_exchange(ctx, tail_guard.word(), node_word);
                return;
            }
        }
    }

    pub fn dequeue(&self, ctx: &ThreadContext<R>) -> Option<T> {
        loop {
            let head_guard = ctx.guard(&self.head);
            let head_node = head_guard.get().expect("queue head is never null");
            let tail_word = self.tail.load_word(Ordering::Acquire);
            let next_guard = ctx.guard(&head_node.next);
            if self.head.load_word(Ordering::SeqCst) != head_guard.word() {
                continue; // head moved while we were protecting its successor
            }
            let Some(next_node) = next_guard.get() else {
                return None; // empty
            };
            next_node.check_canary();
            if head_guard.ptr() == tail_word.ptr() {
                // Non-empty but tail still points at the dummy: help.
                self.tail.compare_exchange(ctx, tail_word, next_guard.word());
                continue;
            }
            if self.head.compare_exchange(ctx, head_guard.word(), next_guard.word()) {
                // The successor becomes the new dummy; the winner moves its
                // value out, the old dummy is retired.
                let value = unsafe { ptr::addr_of!((*next_guard.ptr()).value).read().assume_init() };
                unsafe { self.pool.retire(ctx, head_guard.ptr()) };
                return Some(value);
            }
        }
    }

    /// Drains remaining values single-threadedly; used by tests and teardown.
    pub fn drain(&self, ctx: &ThreadContext<R>) -> usize {
        let mut n = 0;
        while self.dequeue(ctx).is_some() {
            n += 1;
        }
        n
    }
}

impl<T: Send, R: Reclaimer> Drop for MsQueue<T, R> {
    fn drop(&mut self) {
        // Sole owner at this point: free the dummy and any queued nodes,
        // dropping the values still inside.
        let mut cur = self.head.load_word(Ordering::Relaxed).ptr();
        let mut is_dummy = true;
        while !cur.is_null() {
            let next = unsafe { (*cur).next.load_word(Ordering::Relaxed).ptr() };
            unsafe {
                if !is_dummy {
                    ptr::addr_of_mut!((*cur).value).read().assume_init_drop();
                }
                self.pool.free_owned(cur);
            }
            is_dummy = false;
            cur = next;
        }
    }
}

/// Per-scheme smoke coverage lives in tests/structures.rs; the unit tests
/// here pin the single-threaded contract.
#[cfg(test)]
mod tests {
    use super::*;
    use crate::epoch::Nebr;
    use crate::hazard::HazardPointer;
    use crate::refcount::{RefCount, Unpadded};
    use crate::stamp::StampIt;

    fn fifo_smoke<R: Reclaimer>() {
        let collector = Collector::<R>::with_defaults();
        let ctx = collector.register();
        let queue = MsQueue::<u64, R>::new(&collector, &ctx);
        {
            let _region = ctx.region();
            queue.enqueue(&ctx, 1);
            queue.enqueue(&ctx, 2);
            assert_eq!(queue.dequeue(&ctx), Some(1));
            assert_eq!(queue.dequeue(&ctx), Some(2));
            assert_eq!(queue.dequeue(&ctx), None);
        }
        let c = collector.counters();
        assert_eq!(c.retired, 2, "each returned value retires exactly one node");
        drop(queue);
        drop(ctx);
        // Conservation after teardown: whatever is not reclaimed sits on the
        // orphan list (zero for schemes that drain at deregistration).
        assert_eq!(collector.unreclaimed(), collector.orphaned_nodes());
    }

    #[test]
    fn fifo_order_and_exact_retires_under_every_scheme() {
        fifo_smoke::<HazardPointer>();
        fifo_smoke::<Nebr>();
        fifo_smoke::<crate::epoch::Ebr>();
        fifo_smoke::<crate::epoch::Qsbr>();
        fifo_smoke::<StampIt>();
        fifo_smoke::<RefCount<Unpadded>>();
    }

    #[test]
    fn values_survive_interleaved_operations() {
        let collector = Collector::<Nebr>::with_defaults();
        let ctx = collector.register();
        let queue = MsQueue::<u64, Nebr>::new(&collector, &ctx);
        let _region = ctx.region();
        let mut expect = std::collections::VecDeque::new();
        let mut rng = crate::testing::SplitMix64::new(7);
        for i in 0..10_000u64 {
            if rng.next_f64() < 0.55 {
                queue.enqueue(&ctx, i);
                expect.push_back(i);
            } else {
                assert_eq!(queue.dequeue(&ctx), expect.pop_front());
            }
        }
    }
}
