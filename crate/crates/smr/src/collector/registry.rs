//! Lock-free thread registry.
//!
//! Entries are appended once and never freed while the collector lives; a
//! departing thread clears its `in_use` flag and a registering thread first
//! tries to recycle a cleared entry. Scans may therefore traverse the whole
//! chain without synchronizing with registration.

use std::ptr;
use std::sync::atomic::{AtomicBool, AtomicPtr, AtomicU32, Ordering};

use super::counters::Counters;
use super::Reclaimer;

pub struct Entry<R: Reclaimer> {
    pub shared: R::EntryShared,
    pub counters: Counters,
    in_use: AtomicBool,
    id: u32,
    next: AtomicPtr<Entry<R>>,
}

impl<R: Reclaimer> Entry<R> {
    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn is_in_use(&self) -> bool {
        self.in_use.load(Ordering::Acquire)
    }
}

pub struct Registry<R: Reclaimer> {
    head: AtomicPtr<Entry<R>>,
    total: AtomicU32,
    active: AtomicU32,
}

impl<R: Reclaimer> Default for Registry<R> {
    fn default() -> Self {
        Registry {
            head: AtomicPtr::new(ptr::null_mut()),
            total: AtomicU32::new(0),
            active: AtomicU32::new(0),
        }
    }
}

impl<R: Reclaimer> Registry<R> {
    /// Recycles a free entry or appends a new one. Lock-free: a stalled
    /// departing thread can never block a registering one.
    pub fn acquire(&self, global: &R::Global) -> *mut Entry<R> {
        self.active.fetch_add(1, Ordering::Relaxed);
        let mut cur = self.head.load(Ordering::Acquire);
        while !cur.is_null() {
            let entry = unsafe { &*cur };
            if !entry.in_use.load(Ordering::Relaxed)
                && entry
                    .in_use
                    .compare_exchange(false, true, Ordering::AcqRel, Ordering::Relaxed)
                    .is_ok()
            {
                return cur;
            }
            cur = entry.next.load(Ordering::Acquire);
        }

        let id = self.total.fetch_add(1, Ordering::Relaxed);
        let entry = Box::into_raw(Box::new(Entry {
            shared: R::new_entry_shared(global),
            counters: Counters::default(),
            in_use: AtomicBool::new(true),
            id,
            next: AtomicPtr::new(ptr::null_mut()),
        }));
        let mut head = self.head.load(Ordering::Relaxed);
        loop {
            unsafe { (*entry).next.store(head, Ordering::Relaxed) };
            match self.head.compare_exchange_weak(
                head,
                entry,
                Ordering::Release,
                Ordering::Acquire,
            ) {
                Ok(_) => return entry,
                Err(actual) => head = actual,
            }
        }
    }

    /// Marks an entry free for recycling. The caller must already have merged
    /// counters and reset scheme state.
    pub fn release(&self, entry: &Entry<R>) {
        self.active.fetch_sub(1, Ordering::Relaxed);
        entry.in_use.store(false, Ordering::Release);
    }

    /// Registered (in-use) entry count.
    pub fn active(&self) -> u32 {
        self.active.load(Ordering::SeqCst)
    }

    /// Entries ever created, including free ones.
    pub fn capacity(&self) -> u32 {
        self.total.load(Ordering::Relaxed)
    }

    /// Visits every entry, in use or not.
    pub fn for_each(&self, mut f: impl FnMut(&Entry<R>)) {
        let mut cur = self.head.load(Ordering::Acquire);
        while !cur.is_null() {
            let entry = unsafe { &*cur };
            f(entry);
            cur = entry.next.load(Ordering::Acquire);
        }
    }

    /// Folds `f` over every in-use entry.
    pub fn for_each_active(&self, mut f: impl FnMut(&Entry<R>)) {
        self.for_each(|e| {
            if e.is_in_use() {
                f(e);
            }
        });
    }
}

impl<R: Reclaimer> Drop for Registry<R> {
    fn drop(&mut self) {
        let mut cur = *self.head.get_mut();
        while !cur.is_null() {
            let entry = unsafe { Box::from_raw(cur) };
            cur = entry.next.load(Ordering::Relaxed);
        }
    }
}
