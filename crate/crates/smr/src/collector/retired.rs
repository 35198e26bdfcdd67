//! Retired-node records, retire lists, the orphan hand-off list and the
//! poison-test graveyard.

use std::alloc::Layout;
use std::ptr;
use std::sync::atomic::{AtomicPtr, AtomicU64, Ordering};

/// Byte written over the payload of a poisoned node.
pub const POISON_BYTE: u8 = 0xDE;
/// Canary value stored in live debug nodes.
pub const CANARY_LIVE: u64 = 0x600D_600D_600D_600D;
/// Canary value a poisoning destroy writes.
pub const CANARY_DEAD: u64 = 0xDEAD_DEAD_DEAD_DEAD;

/// Context handed to destroy actions.
pub struct DestroyCtx<'a> {
    pub graveyard: &'a Graveyard,
}

/// A reclamation record: the node it stands for, its destruction action, the
/// scheme tag (stamp or epoch) and an intrusive link to the next record.
pub struct Retired {
    node: *mut (),
    destroy: unsafe fn(*mut (), &DestroyCtx),
    pub tag: u64,
    pub(crate) next: *mut Retired,
}

unsafe impl Send for Retired {}

impl Retired {
    pub fn new(node: *mut (), destroy: unsafe fn(*mut (), &DestroyCtx)) -> Box<Retired> {
        Box::new(Retired { node, destroy, tag: 0, next: ptr::null_mut() })
    }

    pub fn node(&self) -> *mut () {
        self.node
    }

    /// Runs the destruction action and frees the record itself.
    ///
    /// # Safety
    /// Must be called exactly once, after the scheme has established that no
    /// guard or region can still protect the node.
    pub unsafe fn run(this: *mut Retired, ctx: &DestroyCtx) {
        let rec = Box::from_raw(this);
        (rec.destroy)(rec.node, ctx);
    }
}

/// An intrusive FIFO list of retired records.
///
/// Records are appended at the tail, so a list retired under a monotonically
/// increasing tag source is ordered by non-decreasing tag.
pub struct RetireList {
    head: *mut Retired,
    tail: *mut Retired,
    len: usize,
}

unsafe impl Send for RetireList {}

impl Default for RetireList {
    fn default() -> Self {
        RetireList { head: ptr::null_mut(), tail: ptr::null_mut(), len: 0 }
    }
}

impl RetireList {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn push_back(&mut self, rec: Box<Retired>) {
        let raw = Box::into_raw(rec);
        unsafe { (*raw).next = ptr::null_mut() };
        if self.tail.is_null() {
            self.head = raw;
        } else {
            unsafe { (*self.tail).next = raw };
        }
        self.tail = raw;
        self.len += 1;
    }

    pub fn first_tag(&self) -> Option<u64> {
        if self.head.is_null() {
            None
        } else {
            Some(unsafe { (*self.head).tag })
        }
    }

    /// Unlinks and returns the first record if `pred` accepts its tag.
    pub fn pop_front_if(&mut self, pred: impl FnOnce(u64) -> bool) -> Option<Box<Retired>> {
        if self.head.is_null() {
            return None;
        }
        unsafe {
            if !pred((*self.head).tag) {
                return None;
            }
            let rec = Box::from_raw(self.head);
            self.head = rec.next;
            if self.head.is_null() {
                self.tail = ptr::null_mut();
            }
            self.len -= 1;
            Some(rec)
        }
    }

    pub fn pop_front(&mut self) -> Option<Box<Retired>> {
        self.pop_front_if(|_| true)
    }

    /// Takes the whole chain out of the list, returning `(head, tail, len)`.
    pub fn take_chain(&mut self) -> Option<(*mut Retired, *mut Retired, usize)> {
        if self.head.is_null() {
            return None;
        }
        let out = (self.head, self.tail, self.len);
        self.head = ptr::null_mut();
        self.tail = ptr::null_mut();
        self.len = 0;
        Some(out)
    }

    /// Appends a chain previously produced by [`take_chain`](Self::take_chain).
    pub fn append_chain(&mut self, head: *mut Retired, tail: *mut Retired, len: usize) {
        if head.is_null() {
            return;
        }
        if self.tail.is_null() {
            self.head = head;
        } else {
            unsafe { (*self.tail).next = head };
        }
        self.tail = tail;
        self.len += len;
    }
}

impl Drop for RetireList {
    fn drop(&mut self) {
        // Dropping a non-empty retire list would leak its nodes; schemes must
        // drain or hand off before the owning thread state goes away.
        debug_assert!(self.is_empty(), "retire list dropped with pending nodes");
        while let Some(rec) = self.pop_front() {
            drop(rec); // leak the node itself, reclaim the record
        }
    }
}

/// A batch of retired records handed off by a departing thread.
pub struct OrphanBatch {
    pub head: *mut Retired,
    pub tail: *mut Retired,
    pub len: usize,
    next: AtomicPtr<OrphanBatch>,
}

unsafe impl Send for OrphanBatch {}

/// Lock-free list of orphan batches.
///
/// Pushes are CAS loops; consumers always steal the whole list with a swap,
/// which keeps the structure ABA-free, and re-add what they cannot reclaim.
#[derive(Default)]
pub struct OrphanList {
    head: AtomicPtr<OrphanBatch>,
    nodes: AtomicU64,
}

impl OrphanList {
    pub fn push(&self, head: *mut Retired, tail: *mut Retired, len: usize) {
        if head.is_null() {
            return;
        }
        let batch = Box::into_raw(Box::new(OrphanBatch {
            head,
            tail,
            len,
            next: AtomicPtr::new(ptr::null_mut()),
        }));
        self.nodes.fetch_add(len as u64, Ordering::Relaxed);
        let mut cur = self.head.load(Ordering::Relaxed);
        loop {
            unsafe { (*batch).next.store(cur, Ordering::Relaxed) };
            match self.head.compare_exchange_weak(
                cur,
                batch,
                Ordering::Release,
                Ordering::Relaxed,
            ) {
                Ok(_) => return,
                Err(actual) => cur = actual,
            }
        }
    }

    /// Steals every batch currently in the list.
    pub fn steal_all(&self) -> Vec<RetireList> {
        let mut cur = self.head.swap(ptr::null_mut(), Ordering::Acquire);
        let mut out = Vec::new();
        while !cur.is_null() {
            let batch = unsafe { Box::from_raw(cur) };
            self.nodes.fetch_sub(batch.len as u64, Ordering::Relaxed);
            let mut list = RetireList::default();
            list.append_chain(batch.head, batch.tail, batch.len);
            out.push(list);
            cur = batch.next.load(Ordering::Relaxed);
        }
        out
    }

    /// Number of retired nodes currently orphaned (approximate under churn).
    pub fn node_count(&self) -> u64 {
        self.nodes.load(Ordering::Relaxed)
    }
}

impl Drop for OrphanList {
    fn drop(&mut self) {
        for mut list in self.steal_all() {
            while let Some(rec) = list.pop_front() {
                drop(rec);
            }
        }
    }
}

struct Grave {
    ptr: *mut u8,
    layout: Layout,
    next: *mut Grave,
}

/// Holds poisoned nodes alive so canary tests can read them; deallocated when
/// the collector drops.
#[derive(Default)]
pub struct Graveyard {
    head: AtomicPtr<Grave>,
    len: AtomicU64,
}

unsafe impl Send for Graveyard {}
unsafe impl Sync for Graveyard {}

impl Graveyard {
    pub fn push(&self, ptr: *mut u8, layout: Layout) {
        let grave = Box::into_raw(Box::new(Grave { ptr, layout, next: ptr::null_mut() }));
        self.len.fetch_add(1, Ordering::Relaxed);
        let mut cur = self.head.load(Ordering::Relaxed);
        loop {
            unsafe { (*grave).next = cur };
            match self.head.compare_exchange_weak(
                cur,
                grave,
                Ordering::Release,
                Ordering::Relaxed,
            ) {
                Ok(_) => return,
                Err(actual) => cur = actual,
            }
        }
    }

    pub fn len(&self) -> u64 {
        self.len.load(Ordering::Relaxed)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Drop for Graveyard {
    fn drop(&mut self) {
        let mut cur = *self.head.get_mut();
        while !cur.is_null() {
            let grave = unsafe { Box::from_raw(cur) };
            unsafe { std::alloc::dealloc(grave.ptr, grave.layout) };
            cur = grave.next;
        }
    }
}
