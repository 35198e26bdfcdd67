//! A Harris–Michael ordered list set with integer keys and an inline value
//! per node. Logical deletion sets the low-order mark bit of the victim's
//! next link; traversals physically unlink marked nodes they encounter.

use std::ptr;
use std::sync::atomic::Ordering;
use std::sync::Arc;

use crate::collector::{
    Collector, Guard, Link, MarkedWord, Node, Pool, Reclaimer, ThreadContext,
};
#[cfg(debug_assertions)]
use crate::collector::{CANARY_DEAD, CANARY_LIVE};

pub struct ListNode<V, R: Reclaimer> {
    header: R::Header,
    key: u64,
    value: V,
    pub(crate) next: Link<ListNode<V, R>, R>,
    #[cfg(debug_assertions)]
    canary: std::sync::atomic::AtomicU64,
}

unsafe impl<V: Send, R: Reclaimer> Send for ListNode<V, R> {}
unsafe impl<V: Send + Sync, R: Reclaimer> Sync for ListNode<V, R> {}

impl<V, R: Reclaimer> ListNode<V, R> {
    pub fn key(&self) -> u64 {
        self.key
    }

    pub fn value(&self) -> &V {
        &self.value
    }
}

unsafe impl<V: Send, R: Reclaimer> Node<R> for ListNode<V, R> {
    unsafe fn header_ptr(node: *mut Self) -> *mut R::Header {
        ptr::addr_of_mut!((*node).header)
    }

    unsafe fn collect_links(node: *mut Self, out: &mut Vec<usize>) {
        let w = (*node).next.load_word(Ordering::Relaxed);
        if !w.is_null() {
            out.push(w.raw());
        }
    }

    unsafe fn drop_payload(node: *mut Self) {
        ptr::drop_in_place(ptr::addr_of_mut!((*node).value));
    }

    unsafe fn poison_payload(node: *mut Self) {
        ptr::write_bytes(
            ptr::addr_of_mut!((*node).value) as *mut u8,
            crate::collector::POISON_BYTE,
            size_of::<V>(),
        );
        #[cfg(debug_assertions)]
        (*node).canary.store(CANARY_DEAD, Ordering::SeqCst);
    }

    fn check_canary(&self) {
        #[cfg(debug_assertions)]
        debug_assert_ne!(
            self.canary.load(Ordering::SeqCst),
            CANARY_DEAD,
            "list traversal observed a poisoned node under a live guard"
        );
    }
}

/// Result of a list search: the insertion point and, when the key was found,
/// a guard on its node.
pub(crate) struct Position<'t, V: Send, R: Reclaimer> {
    /// Cell to CAS for an insert or unlink; kept alive by `_prev_guard` or by
    /// being the list head.
    prev_cell: *const Link<ListNode<V, R>, R>,
    _prev_guard: Option<Guard<'t, ListNode<V, R>, R>>,
    pub curr: Guard<'t, ListNode<V, R>, R>,
    pub found: bool,
}

impl<V: Send, R: Reclaimer> Position<'_, V, R> {
    fn prev_cell(&self) -> &Link<ListNode<V, R>, R> {
        unsafe { &*self.prev_cell }
    }
}

/// Shared list machinery: `ListSet` is one head cell with its own pool, the
/// hash map runs the same routines over per-bucket head cells and one pool.
pub(crate) mod core_ops {
    use super::*;

    /// Michael's find: returns with `curr` on the first node whose key is at
    /// least `key` (null when none), unlinking marked nodes along the way.
    pub(crate) fn find<'t, V: Send, R: Reclaimer>(
        ctx: &'t ThreadContext<R>,
        head: &Link<ListNode<V, R>, R>,
        pool: &R::Pool<ListNode<V, R>>,
        key: u64,
    ) -> Position<'t, V, R> {
        'retry: loop {
            let mut prev_cell: *const Link<ListNode<V, R>, R> = head;
            let mut prev_guard: Option<Guard<'t, ListNode<V, R>, R>> = None;
            let mut curr = ctx.guard(unsafe { &*prev_cell });
            loop {
                if curr.is_marked() {
                    // The node owning prev_cell was logically deleted under
                    // us; restart from the head.
                    continue 'retry;
                }
                let Some(node) = curr.get() else {
                    return Position { prev_cell, _prev_guard: prev_guard, curr, found: false };
                };
                node.check_canary();
                let next = node.next.load_word(Ordering::Acquire);
                if next.is_marked() {
                    // curr is logically deleted: unlink it here. The
                    // successor cannot be retired while curr is still linked,
                    // so installing it is safe.
                    if !unsafe { &*prev_cell }.compare_exchange(
                        ctx,
                        curr.word().without_mark(),
                        next.without_mark(),
                    ) {
                        continue 'retry;
                    }
                    unsafe { pool.retire(ctx, curr.ptr()) };
                    curr = ctx.guard(unsafe { &*prev_cell });
                    continue;
                }
                if node.key >= key {
                    let found = node.key == key;
                    return Position { prev_cell, _prev_guard: prev_guard, curr, found };
                }
                let node_ptr = curr.ptr();
                prev_guard = Some(curr); // old prev guard drops; two hands max
                prev_cell = unsafe { ptr::addr_of!((*node_ptr).next) };
                curr = ctx.guard(unsafe { &*prev_cell });
            }
        }
    }

    /// Set insert. The prepared node is reused across CAS retries and freed
    /// if the key turns out to exist (its value is discarded, as for any
    /// rejected insert).
    pub(crate) fn insert<V: Send, R: Reclaimer>(
        ctx: &ThreadContext<R>,
        head: &Link<ListNode<V, R>, R>,
        pool: &R::Pool<ListNode<V, R>>,
        key: u64,
        value: V,
    ) -> bool {
        let mut value = Some(value);
        let mut node: *mut ListNode<V, R> = ptr::null_mut();
        loop {
            let pos = find(ctx, head, pool, key);
            if pos.found {
                if !node.is_null() {
                    unsafe { pool.free_unpublished(ctx, node) };
                }
                return false;
            }
            let succ = pos.curr.word().without_mark();
            if node.is_null() {
                node = pool.alloc(ctx);
                unsafe {
                    ptr::addr_of_mut!((*node).key).write(key);
                    ptr::addr_of_mut!((*node).value).write(value.take().expect("single move"));
                    ptr::addr_of_mut!((*node).next).write(Link::null());
                    (*node).next.init(ctx, succ);
                    #[cfg(debug_assertions)]
                    ptr::addr_of_mut!((*node).canary)
                        .write(std::sync::atomic::AtomicU64::new(CANARY_LIVE));
                }
            } else {
                // Re-aim the unpublished node's next link at the new
                // successor (reference transfers included).
                let old = unsafe { (*node).next.load_word(Ordering::Relaxed) };
                let swapped = unsafe { (*node).next.compare_exchange(ctx, old, succ) };
                debug_assert!(swapped);
            }
            if pos.prev_cell().compare_exchange(
                ctx,
                pos.curr.word().without_mark(),
                MarkedWord::new(node, false),
            ) {
                return true;
            }
        }
    }

    /// Set remove: mark, then try to unlink; traversals finish the unlink if
    /// the CAS here loses.
    pub(crate) fn remove<V: Send, R: Reclaimer>(
        ctx: &ThreadContext<R>,
        head: &Link<ListNode<V, R>, R>,
        pool: &R::Pool<ListNode<V, R>>,
        key: u64,
    ) -> bool {
        loop {
            let pos = find(ctx, head, pool, key);
            if !pos.found {
                return false;
            }
            let node = pos.curr.get().unwrap();
            let next = node.next.load_word(Ordering::Acquire);
            if next.is_marked() {
                continue; // another remover got it; re-find settles the race
            }
            if !node.next.compare_exchange(ctx, next, next.with_mark()) {
                continue;
            }
            if pos.prev_cell().compare_exchange(
                ctx,
                pos.curr.word().without_mark(),
                next.without_mark(),
            ) {
                unsafe { pool.retire(ctx, pos.curr.ptr()) };
            }
            return true;
        }
    }
}

/// Ordered set of `u64` keys (with an optional value payload per key).
pub struct ListSet<V: Send, R: Reclaimer> {
    pool: R::Pool<ListNode<V, R>>,
    head: Link<ListNode<V, R>, R>,
}

unsafe impl<V: Send, R: Reclaimer> Send for ListSet<V, R> {}
unsafe impl<V: Send + Sync, R: Reclaimer> Sync for ListSet<V, R> {}

impl<V: Send, R: Reclaimer> ListSet<V, R> {
    pub fn new(collector: &Arc<Collector<R>>) -> Self {
        ListSet { pool: R::Pool::new(collector, false), head: Link::null() }
    }

    /// Poisoning variant for canary tests; see [`MsQueue::new_poisoned`].
    ///
    /// [`MsQueue::new_poisoned`]: crate::ds::MsQueue::new_poisoned
    pub fn new_poisoned(collector: &Arc<Collector<R>>) -> Self {
        ListSet { pool: R::Pool::new(collector, true), head: Link::null() }
    }

    pub fn insert(&self, ctx: &ThreadContext<R>, key: u64, value: V) -> bool {
        core_ops::insert(ctx, &self.head, &self.pool, key, value)
    }

    pub fn remove(&self, ctx: &ThreadContext<R>, key: u64) -> bool {
        core_ops::remove(ctx, &self.head, &self.pool, key)
    }

    pub fn contains(&self, ctx: &ThreadContext<R>, key: u64) -> bool {
        core_ops::find(ctx, &self.head, &self.pool, key).found
    }

    /// Keys in ascending order; single-threaded use.
    pub fn iter_keys(&self, ctx: &ThreadContext<R>) -> Vec<u64> {
        let mut out = Vec::new();
        let _region = ctx.region();
        let mut cell: *const Link<ListNode<V, R>, R> = &self.head;
        let mut guard = ctx.guard(unsafe { &*cell });
        while let Some(node) = guard.get() {
            if !node.next.load_word(Ordering::Acquire).is_marked() {
                out.push(node.key);
            }
            let p = guard.ptr();
            cell = unsafe { ptr::addr_of!((*p).next) };
            let next_guard = ctx.guard(unsafe { &*cell });
            guard = next_guard;
        }
        out
    }
}

impl<V: Send, R: Reclaimer> Drop for ListSet<V, R> {
    fn drop(&mut self) {
        let mut cur = self.head.load_word(Ordering::Relaxed).ptr();
        while !cur.is_null() {
            let next = unsafe { (*cur).next.load_word(Ordering::Relaxed).ptr() };
            unsafe { self.pool.free_owned(cur) };
            cur = next;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::epoch::{Ebr, Nebr, Qsbr};
    use crate::hazard::HazardPointer;
    use crate::refcount::RefCount;
    use crate::stamp::StampIt;
    use crate::testing::SplitMix64;

    fn set_semantics<R: Reclaimer>() {
        let collector = Collector::<R>::with_defaults();
        let ctx = collector.register();
        let set = ListSet::<(), R>::new(&collector);
        let _region = ctx.region();
        assert!(set.insert(&ctx, 5, ()));
        assert!(!set.insert(&ctx, 5, ()), "duplicate insert must fail");
        assert!(!set.remove(&ctx, 7), "removing an absent key must fail");
        assert!(set.contains(&ctx, 5));
        assert!(set.remove(&ctx, 5));
        assert!(!set.contains(&ctx, 5));
    }

    #[test]
    fn set_semantics_under_every_scheme() {
        set_semantics::<HazardPointer>();
        set_semantics::<Ebr>();
        set_semantics::<Nebr>();
        set_semantics::<Qsbr>();
        set_semantics::<StampIt>();
        set_semantics::<RefCount>();
    }

    fn oracle_replay<R: Reclaimer>(ops: usize) {
        let collector = Collector::<R>::with_defaults();
        let ctx = collector.register();
        let set = ListSet::<(), R>::new(&collector);
        let mut model = std::collections::BTreeSet::new();
        let mut rng = SplitMix64::new(0xACE);
        for i in 0..ops {
            let _region = ctx.region();
            let key = rng.next_below(64);
            match rng.next_below(3) {
                0 => assert_eq!(set.insert(&ctx, key, ()), model.insert(key), "op {i}"),
                1 => assert_eq!(set.remove(&ctx, key), model.remove(&key), "op {i}"),
                _ => assert_eq!(set.contains(&ctx, key), model.contains(&key), "op {i}"),
            }
        }
        assert_eq!(set.iter_keys(&ctx), model.into_iter().collect::<Vec<_>>());
    }

    #[test]
    fn randomized_trace_matches_sorted_set_oracle() {
        oracle_replay::<HazardPointer>(20_000);
        oracle_replay::<StampIt>(20_000);
        oracle_replay::<RefCount>(20_000);
    }

    #[test]
    fn keys_stay_sorted_and_reclaimer_drains() {
        let collector = Collector::<StampIt>::with_defaults();
        let ctx = collector.register();
        let set = ListSet::<u64, StampIt>::new(&collector);
        {
            let _region = ctx.region();
            for key in [5u64, 1, 9, 3, 7] {
                assert!(set.insert(&ctx, key, key * 10));
            }
            assert_eq!(set.iter_keys(&ctx), vec![1, 3, 5, 7, 9]);
            for key in [1u64, 9] {
                assert!(set.remove(&ctx, key));
            }
            assert_eq!(set.iter_keys(&ctx), vec![3, 5, 7]);
        }
        drop(set);
        let drainer = collector.register();
        drop(drainer);
        assert_eq!(collector.unreclaimed(), 0);
    }
}
