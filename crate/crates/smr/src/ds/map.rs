//! Fixed-bucket hash map over the list-set machinery, with approximate FIFO
//! eviction driven by an internal key queue.

use std::ptr;
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;

use super::list::{core_ops, ListNode};
use super::queue::MsQueue;
use crate::collector::{Collector, Guard, Link, Node, Pool, Reclaimer, ThreadContext};

/// Multiplicative Fibonacci hashing.
fn fib_hash(key: u64) -> u64 {
    key.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// A value reference held under a guard: the entry cannot be reclaimed while
/// the reference lives.
pub struct ValueRef<'a, V: Send, R: Reclaimer> {
    guard: Guard<'a, ListNode<V, R>, R>,
    _map: std::marker::PhantomData<&'a ()>,
}

impl<V: Send, R: Reclaimer> std::ops::Deref for ValueRef<'_, V, R> {
    type Target = V;

    fn deref(&self) -> &V {
        let node = self.guard.get().expect("value guard is never null");
        node.check_canary();
        node.value()
    }
}

/// Outcome of [`HashMap::get_or_insert`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lookup {
    Hit,
    /// The caller's produced value was inserted.
    Inserted,
    /// The caller produced a value but lost the insert race; the candidate
    /// was discarded and the winner's entry is returned.
    LostRace,
}

pub struct HashMap<V: Send, R: Reclaimer> {
    pool: R::Pool<ListNode<V, R>>,
    buckets: Box<[Link<ListNode<V, R>, R>]>,
    bucket_shift: u32,
    fifo: MsQueue<u64, R>,
    size: AtomicI64,
}

unsafe impl<V: Send, R: Reclaimer> Send for HashMap<V, R> {}
unsafe impl<V: Send + Sync, R: Reclaimer> Sync for HashMap<V, R> {}

impl<V: Send, R: Reclaimer> HashMap<V, R> {
    /// `buckets` must be a power of two.
    pub fn new(collector: &Arc<Collector<R>>, ctx: &ThreadContext<R>, buckets: usize) -> Self {
        Self::build(collector, ctx, buckets, false)
    }

    pub fn new_poisoned(
        collector: &Arc<Collector<R>>,
        ctx: &ThreadContext<R>,
        buckets: usize,
    ) -> Self {
        Self::build(collector, ctx, buckets, true)
    }

    fn build(
        collector: &Arc<Collector<R>>,
        ctx: &ThreadContext<R>,
        buckets: usize,
        poison: bool,
    ) -> Self {
        assert!(buckets.is_power_of_two(), "bucket count must be a power of two");
        let pool = R::Pool::new(collector, poison);
        HashMap {
            pool,
            buckets: (0..buckets).map(|_| Link::null()).collect(),
            bucket_shift: 64 - buckets.trailing_zeros(),
            fifo: if poison {
                MsQueue::new_poisoned(collector, ctx)
            } else {
                MsQueue::new(collector, ctx)
            },
            size: AtomicI64::new(0),
        }
    }

    pub fn bucket_of(&self, key: u64) -> usize {
        (fib_hash(key) >> self.bucket_shift) as usize
    }

    pub fn bucket_count(&self) -> usize {
        self.buckets.len()
    }

    /// Entries currently in the map, up to in-flight inserts and evictions.
    pub fn approx_len(&self) -> i64 {
        self.size.load(Ordering::Relaxed)
    }

    /// Looks the key up, producing and inserting the value on a miss. The
    /// producer may run more than once (an insert race or an eviction racing
    /// the re-lookup); exactly one produced value survives per insert, losers
    /// are discarded.
    pub fn get_or_insert<'a>(
        &'a self,
        ctx: &'a ThreadContext<R>,
        key: u64,
        mut producer: impl FnMut() -> V,
    ) -> (ValueRef<'a, V, R>, Lookup) {
        let head = &self.buckets[self.bucket_of(key)];
        let mut outcome = Lookup::Hit;
        loop {
            let pos = core_ops::find(ctx, head, &self.pool, key);
            if pos.found {
                return (ValueRef { guard: pos.curr, _map: std::marker::PhantomData }, outcome);
            }
            drop(pos);
            if core_ops::insert(ctx, head, &self.pool, key, producer()) {
                self.size.fetch_add(1, Ordering::Relaxed);
                self.fifo.enqueue(ctx, key);
                outcome = Lookup::Inserted;
            } else {
                outcome = Lookup::LostRace;
            }
            // Re-find to hand out the surviving entry under a guard; only a
            // concurrent eviction can make this miss again.
        }
    }

    /// Evicts oldest-inserted keys while the map holds more than
    /// `max_entries` entries. Best-effort FIFO: a popped key that has already
    /// gone only costs the pop.
    pub fn evict_fifo(&self, ctx: &ThreadContext<R>, max_entries: i64) -> u64 {
        let mut evicted = 0;
        while self.size.load(Ordering::Relaxed) > max_entries {
            let Some(key) = self.fifo.dequeue(ctx) else {
                break;
            };
            let head = &self.buckets[self.bucket_of(key)];
            if core_ops::remove(ctx, head, &self.pool, key) {
                self.size.fetch_sub(1, Ordering::Relaxed);
                evicted += 1;
            }
        }
        evicted
    }

    pub fn contains(&self, ctx: &ThreadContext<R>, key: u64) -> bool {
        core_ops::find(ctx, &self.buckets[self.bucket_of(key)], &self.pool, key).found
    }
}

impl<V: Send, R: Reclaimer> Drop for HashMap<V, R> {
    fn drop(&mut self) {
        for head in self.buckets.iter() {
            let mut cur = head.load_word(Ordering::Relaxed).ptr();
            while !cur.is_null() {
                let next = unsafe { (*cur).next.load_word(Ordering::Relaxed).ptr() };
                unsafe { self.pool.free_owned(cur) };
                cur = next;
            }
        }
    }
}
