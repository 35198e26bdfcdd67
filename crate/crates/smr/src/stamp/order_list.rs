//! The thread order list: a lock-free doubly-linked list of control blocks
//! ordered by region-entry stamp, in the style of Sundell and Tsigas.
//!
//! Sentinel head and tail blocks store the highest (next-to-assign) and the
//! cached lowest stamp. `push` assigns a stamp with one fetch-and-add and
//! links the block right after head; `remove` marks the block's next link,
//! then its prev link, unlinks it from the forward chain (helping bypasses
//! one marked block per compare-and-swap) and repairs the successor's
//! backlink. `remove` reports whether the block was the tail's predecessor,
//! i.e. held the lowest live stamp.
//!
//! Control blocks live in a grow-only slab and are addressed by versioned
//! references (version | index | mark packed in one word). A block's version
//! is bumped when it is returned to the slab, so a compare-and-swap whose
//! expected value refers to an earlier episode fails deterministically; this
//! removes the reuse ABA without double-width CAS.
//!
//! Forward-chain validity invariant: a bypass installs the word taken from
//! the bypassed block's frozen next cell, and succeeds only while the
//! bypassed block is still linked. A block's frozen successor cannot be freed
//! before the block itself is bypassed (the only unmarked cell that could
//! unlink the successor is created by that very bypass), so every installed
//! word is version-current at install time.
//!
//! Lowest-stamp maintenance. Because a push takes its stamp before linking,
//! the chain can transiently hold locally inverted stamps (a later FAA linked
//! earlier), so neither the tail predecessor nor any single block is
//! guaranteed to carry the minimum. A raise therefore walks the chain for the
//! minimum unmarked stamp (head's stamp if none) and validates the walk
//! against a pair of enter-event counters: if no region entry started or was
//! in flight across the walk, every block linked at the compare-and-swap was
//! either seen by the walk or entered after it with a stamp at least the
//! candidate, so the published lowest stamp can never pass a thread that may
//! already be reading.

use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};

use crate::collector::{Counters, Slab, SlabSlot};

const MARK: u64 = 1;
const IDX_SHIFT: u32 = 1;
const IDX_BITS: u32 = 20;
const VER_SHIFT: u32 = IDX_SHIFT + IDX_BITS;
const VER_MASK: u64 = (1 << (64 - VER_SHIFT)) - 1;

pub const HEAD: u32 = 0;
pub const TAIL: u32 = 1;

/// A versioned, markable reference to a control block slot.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct BlockRef(u64);

impl BlockRef {
    pub fn new(idx: u32, ver: u64) -> BlockRef {
        debug_assert!(idx < (1 << IDX_BITS));
        BlockRef((ver & VER_MASK) << VER_SHIFT | (idx as u64) << IDX_SHIFT)
    }

    fn raw(self) -> u64 {
        self.0
    }

    fn from_raw(raw: u64) -> BlockRef {
        BlockRef(raw)
    }

    pub fn idx(self) -> u32 {
        ((self.0 >> IDX_SHIFT) & ((1 << IDX_BITS) - 1)) as u32
    }

    fn ver(self) -> u64 {
        self.0 >> VER_SHIFT
    }

    fn is_marked(self) -> bool {
        self.0 & MARK != 0
    }

    fn with_mark(self) -> BlockRef {
        BlockRef(self.0 | MARK)
    }

    fn without_mark(self) -> BlockRef {
        BlockRef(self.0 & !MARK)
    }
}

impl std::fmt::Debug for BlockRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "BlockRef(idx={}, ver={}, mark={})", self.idx(), self.ver(), self.is_marked())
    }
}

/// A slot in the thread order list.
#[repr(align(64))]
pub struct ControlBlock {
    stamp: AtomicU64,
    next: AtomicU64,
    prev: AtomicU64,
    version: AtomicU64,
    free_next: AtomicU32,
}

impl Default for ControlBlock {
    fn default() -> Self {
        ControlBlock {
            stamp: AtomicU64::new(0),
            next: AtomicU64::new(0),
            prev: AtomicU64::new(0),
            version: AtomicU64::new(0),
            free_next: AtomicU32::new(u32::MAX),
        }
    }
}

impl SlabSlot for ControlBlock {
    fn free_next(&self) -> &AtomicU32 {
        &self.free_next
    }
}

pub struct OrderList {
    slab: Slab<ControlBlock>,
    /// Region entries that have taken a stamp (bumped before the stamp FAA).
    enter_starts: AtomicU64,
    /// Region entries whose block is linked (bumped after the insert CAS).
    enter_finishes: AtomicU64,
}

impl Default for OrderList {
    fn default() -> Self {
        let slab = Slab::<ControlBlock>::default();
        let (h, _) = slab.acquire();
        let (t, _) = slab.acquire();
        assert_eq!((h, t), (HEAD, TAIL));
        let head = slab.get(HEAD);
        let tail = slab.get(TAIL);
        head.next.store(BlockRef::new(TAIL, 0).raw(), Ordering::Relaxed);
        head.prev.store(BlockRef::new(TAIL, 0).raw(), Ordering::Relaxed);
        tail.next.store(BlockRef::new(HEAD, 0).raw(), Ordering::Relaxed);
        tail.prev.store(BlockRef::new(HEAD, 0).raw(), Ordering::Relaxed);
        OrderList { slab, enter_starts: AtomicU64::new(0), enter_finishes: AtomicU64::new(0) }
    }
}

impl OrderList {
    fn block(&self, r: BlockRef) -> &ControlBlock {
        self.slab.get(r.idx())
    }

    fn is_current(&self, r: BlockRef) -> bool {
        self.block(r).version.load(Ordering::Acquire) & VER_MASK == r.ver()
    }

    fn head(&self) -> &ControlBlock {
        self.slab.get(HEAD)
    }

    fn tail(&self) -> &ControlBlock {
        self.slab.get(TAIL)
    }

    fn head_ref() -> BlockRef {
        BlockRef::new(HEAD, 0)
    }

    fn tail_ref() -> BlockRef {
        BlockRef::new(TAIL, 0)
    }

    /// The next stamp to assign; head's stamp field is the global counter.
    pub fn highest_stamp(&self) -> u64 {
        self.head().stamp.load(Ordering::SeqCst)
    }

    /// Cached lowest live stamp, stored in the tail sentinel.
    pub fn lowest_stamp(&self) -> u64 {
        self.tail().stamp.load(Ordering::SeqCst)
    }

    /// Claims a control block for one region episode.
    pub fn acquire_block(&self) -> BlockRef {
        let (idx, _) = self.slab.acquire();
        debug_assert!(idx != HEAD && idx != TAIL);
        let ver = self.slab.get(idx).version.load(Ordering::Relaxed) & VER_MASK;
        BlockRef::new(idx, ver)
    }

    /// Returns a removed block to the slab; its version bump invalidates any
    /// stale references.
    pub fn release_block(&self, r: BlockRef) {
        self.block(r).version.fetch_add(1, Ordering::Release);
        self.slab.release(r.idx());
    }

    /// Assigns a fresh stamp to the block and links it right after head.
    /// Returns the stamp.
    pub fn push(&self, me: BlockRef, counters: &Counters) -> u64 {
        let blk = self.block(me);
        self.enter_starts.fetch_add(1, Ordering::SeqCst);
        let stamp = self.head().stamp.fetch_add(1, Ordering::SeqCst);
        blk.stamp.store(stamp, Ordering::SeqCst);
        blk.prev.store(Self::head_ref().raw(), Ordering::Relaxed);

        let mut iterations = 1;
        loop {
            let first = BlockRef::from_raw(self.head().next.load(Ordering::SeqCst));
            blk.next.store(first.raw(), Ordering::Relaxed);
            if self
                .head()
                .next
                .compare_exchange(first.raw(), me.raw(), Ordering::SeqCst, Ordering::SeqCst)
                .is_ok()
            {
                // Best-effort backlink fix on the displaced first block.
                let fb = self.block(first);
                if first.idx() != TAIL && self.is_current(first) {
                    let fp = BlockRef::from_raw(fb.prev.load(Ordering::SeqCst));
                    if !fp.is_marked() && fp != me {
                        let _ = fb.prev.compare_exchange(
                            fp.raw(),
                            me.raw(),
                            Ordering::SeqCst,
                            Ordering::SeqCst,
                        );
                    }
                } else if first.idx() == TAIL {
                    let tp = BlockRef::from_raw(self.tail().prev.load(Ordering::SeqCst));
                    if tp != me {
                        let _ = self.tail().prev.compare_exchange(
                            tp.raw(),
                            me.raw(),
                            Ordering::SeqCst,
                            Ordering::SeqCst,
                        );
                    }
                }
                break;
            }
            iterations += 1;
        }
        Counters::bump(&counters.push_iterations, iterations);
        Counters::bump(&counters.push_ops, 1);
        self.enter_finishes.fetch_add(1, Ordering::SeqCst);
        debug_assert!(self.lowest_stamp() <= stamp);
        stamp
    }

    /// Unlinks the block from both directions. Returns true iff the block was
    /// the tail's predecessor when its next link froze.
    pub fn remove(&self, me: BlockRef, counters: &Counters) -> bool {
        let blk = self.block(me);

        // Freeze the forward link first, then the backlink.
        let mut next;
        loop {
            next = BlockRef::from_raw(blk.next.load(Ordering::SeqCst));
            debug_assert!(!next.is_marked(), "control block removed twice");
            if blk
                .next
                .compare_exchange(
                    next.raw(),
                    next.with_mark().raw(),
                    Ordering::SeqCst,
                    Ordering::SeqCst,
                )
                .is_ok()
            {
                break;
            }
        }
        let was_last = next.idx() == TAIL;
        let mut prev;
        loop {
            prev = BlockRef::from_raw(blk.prev.load(Ordering::SeqCst));
            if blk
                .prev
                .compare_exchange(
                    prev.without_mark().raw(),
                    prev.without_mark().with_mark().raw(),
                    Ordering::SeqCst,
                    Ordering::SeqCst,
                )
                .is_ok()
            {
                prev = prev.without_mark();
                break;
            }
        }

        self.remove_from_prev(me, prev, counters);
        self.remove_from_next(me, next.without_mark(), prev, counters);
        was_last
    }

    /// Unlinks `me` from the forward chain: finds the live predecessor whose
    /// next points at `me` and swings it to `me`'s frozen successor.
    fn remove_from_prev(&self, me: BlockRef, hint: BlockRef, counters: &Counters) {
        let mut iterations = 0;
        let result = loop {
            iterations += 1;
            match self.find_pred(me, hint) {
                PredSearch::Found(pred) => {
                    let frozen =
                        BlockRef::from_raw(self.block(me).next.load(Ordering::SeqCst));
                    debug_assert!(frozen.is_marked());
                    if self
                        .block(pred)
                        .next
                        .compare_exchange(
                            me.raw(),
                            frozen.without_mark().raw(),
                            Ordering::SeqCst,
                            Ordering::SeqCst,
                        )
                        .is_ok()
                    {
                        break true;
                    }
                }
                PredSearch::Gone => break false, // a helper already bypassed us
            }
        };
        let _ = result;
        Counters::bump(&counters.remove_prev_iterations, iterations);
        Counters::bump(&counters.remove_prev_ops, 1);
    }

    /// Repairs the backlink of `me`'s successor so prev hints stay usable.
    fn remove_from_next(&self, me: BlockRef, succ: BlockRef, prev: BlockRef, counters: &Counters) {
        let mut iterations = 0;
        loop {
            iterations += 1;
            let sb = self.block(succ);
            if succ.idx() != TAIL {
                if !self.is_current(succ) {
                    break; // successor already gone; its remover repairs onward
                }
                if BlockRef::from_raw(sb.next.load(Ordering::SeqCst)).is_marked() {
                    break; // successor is being removed itself
                }
            }
            let sp = BlockRef::from_raw(sb.prev.load(Ordering::SeqCst));
            if sp.is_marked() || sp.without_mark() != me {
                break; // nothing of ours to repair
            }
            if sb
                .prev
                .compare_exchange(sp.raw(), prev.raw(), Ordering::SeqCst, Ordering::SeqCst)
                .is_ok()
            {
                break;
            }
        }
        Counters::bump(&counters.remove_next_iterations, iterations);
        Counters::bump(&counters.remove_next_ops, 1);
    }

    /// Walks toward the tail looking for the live block whose next link holds
    /// `me`, helping to bypass marked blocks one step at a time. A linked
    /// block stays reachable from head until it is bypassed, so reaching the
    /// tail proves `me` is already unlinked.
    fn find_pred(&self, me: BlockRef, hint: BlockRef) -> PredSearch {
        let mut p = if hint.idx() == HEAD || self.is_current(hint) { hint } else { Self::head_ref() };
        loop {
            let pb = self.block(p);
            if p.idx() != HEAD && !self.is_current(p) {
                // Our foothold went away; restart from the sentinel.
                p = Self::head_ref();
                continue;
            }
            let pn = BlockRef::from_raw(pb.next.load(Ordering::SeqCst));
            if pn.is_marked() {
                // p is mid-removal: step left through its (frozen) backlink.
                p = BlockRef::from_raw(pb.prev.load(Ordering::SeqCst)).without_mark();
                if p.idx() != HEAD && !self.is_current(p) {
                    p = Self::head_ref();
                }
                continue;
            }
            if pn == me {
                return PredSearch::Found(p);
            }
            if pn.idx() == TAIL {
                return PredSearch::Gone;
            }
            let nb = self.block(pn);
            if !self.is_current(pn) {
                continue; // p.next changed under us; re-read
            }
            let nn = BlockRef::from_raw(nb.next.load(Ordering::SeqCst));
            if nn.is_marked() {
                // Help: bypass exactly one marked block. The CAS can only
                // succeed while pn is still linked, so the installed word is
                // version-current.
                let _ = pb.next.compare_exchange(
                    pn.raw(),
                    nn.without_mark().raw(),
                    Ordering::SeqCst,
                    Ordering::SeqCst,
                );
                continue;
            }
            p = pn;
        }
    }

    /// After a was-last removal: advance tail's stamp toward the minimum
    /// stamp of the blocks still linked (head's stamp when none are). The
    /// enter-event window makes a successful raise safe: any thread whose
    /// entry overlapped the walk forces a retry, and any entry starting after
    /// the re-check holds a stamp at least the candidate.
    pub fn raise_lowest(&self) {
        for _ in 0..8 {
            let starts = self.enter_starts.load(Ordering::SeqCst);
            if self.enter_finishes.load(Ordering::SeqCst) != starts {
                return; // an entry is in flight; skip the raise
            }
            let old = self.tail().stamp.load(Ordering::SeqCst);
            let candidate = match self.walk_min_stamp() {
                Some(c) => c,
                None => return, // too much churn; skip, reclamation stays safe
            };
            if self.enter_starts.load(Ordering::SeqCst) != starts {
                continue; // entries began during the walk; retry
            }
            if candidate <= old {
                return;
            }
            if self
                .tail()
                .stamp
                .compare_exchange(old, candidate, Ordering::SeqCst, Ordering::SeqCst)
                .is_ok()
            {
                return;
            }
        }
    }

    /// Minimum stamp over linked, unmarked blocks, or head's stamp if the
    /// chain is empty. Concurrent pushes can leave the chain locally
    /// unsorted, so the whole chain is scanned.
    fn walk_min_stamp(&self) -> Option<u64> {
        'restart: for _ in 0..8 {
            let mut cur = Self::head_ref();
            let mut min_live: Option<u64> = None;
            loop {
                let cb = self.block(cur);
                if cur.idx() != HEAD && !self.is_current(cur) {
                    continue 'restart;
                }
                let w = BlockRef::from_raw(cb.next.load(Ordering::SeqCst));
                if cur.idx() != HEAD && !w.is_marked() {
                    let s = cb.stamp.load(Ordering::SeqCst);
                    if min_live.is_none_or(|m| s < m) {
                        min_live = Some(s);
                    }
                }
                let t = w.without_mark();
                if t.idx() == TAIL {
                    return Some(match min_live {
                        Some(s) => s,
                        None => self.highest_stamp(),
                    });
                }
                if !self.is_current(t) {
                    continue 'restart;
                }
                cur = t;
            }
        }
        None
    }

    #[cfg(test)]
    pub(crate) fn head_bump_for_test(&self) {
        self.head().stamp.fetch_add(1, Ordering::SeqCst);
    }

    #[cfg(test)]
    pub(crate) fn set_lowest_for_test(&self, value: u64) {
        self.tail().stamp.store(value, Ordering::SeqCst);
    }

    /// Stamps of live blocks in tail-to-head order, for tests at quiescent
    /// points.
    pub fn live_stamps_ascending(&self) -> Vec<u64> {
        let mut out = Vec::new();
        let mut cur = Self::head_ref();
        loop {
            let cb = self.block(cur);
            let w = BlockRef::from_raw(cb.next.load(Ordering::SeqCst));
            if cur.idx() != HEAD && !w.is_marked() {
                out.push(cb.stamp.load(Ordering::SeqCst));
            }
            if w.without_mark().idx() == TAIL {
                break;
            }
            cur = w.without_mark();
        }
        out.reverse();
        out
    }
}

enum PredSearch {
    Found(BlockRef),
    Gone,
}
