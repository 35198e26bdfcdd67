//! A grow-only slab with a versioned-index free list.
//!
//! Slots are addressed by a `u32` index and never returned to the allocator
//! while the slab lives, so a stale index always resolves to valid memory.
//! The free-list head packs a 32-bit version with the index and bumps it on
//! every successful push or pop, which defeats ABA without double-width CAS.

use std::sync::atomic::{AtomicPtr, AtomicU32, AtomicU64, Ordering};

pub const SEG_SHIFT: u32 = 12;
pub const SEG_LEN: usize = 1 << SEG_SHIFT; // 4096 slots per segment
pub const MAX_SEGS: usize = 256; // 2^20 slots total

const NIL: u32 = u32::MAX;

/// Implemented by slot types so the slab can chain free slots through them.
pub trait SlabSlot: Default {
    fn free_next(&self) -> &AtomicU32;
}

pub struct Slab<T> {
    segments: [AtomicPtr<T>; MAX_SEGS],
    bump: AtomicU32,
    // (version << 32) | head index, NIL when empty.
    free_head: AtomicU64,
}

unsafe impl<T: Send> Send for Slab<T> {}
unsafe impl<T: Send + Sync> Sync for Slab<T> {}

impl<T: SlabSlot> Default for Slab<T> {
    fn default() -> Self {
        Slab {
            segments: std::array::from_fn(|_| AtomicPtr::new(std::ptr::null_mut())),
            bump: AtomicU32::new(0),
            free_head: AtomicU64::new(NIL as u64),
        }
    }
}

impl<T: SlabSlot> Slab<T> {
    /// Resolves an index to its slot. The slot may belong to a different
    /// episode by the time the reference is used; callers validate.
    pub fn get(&self, idx: u32) -> &T {
        let seg = (idx >> SEG_SHIFT) as usize;
        let off = idx as usize & (SEG_LEN - 1);
        let base = self.segments[seg].load(Ordering::Acquire);
        debug_assert!(!base.is_null(), "slab index {idx} out of bounds");
        unsafe { &*base.add(off) }
    }

    /// Pops a recycled slot or claims a fresh one. Returns `(index, fresh)`.
    pub fn acquire(&self) -> (u32, bool) {
        let mut head = self.free_head.load(Ordering::Acquire);
        loop {
            let idx = head as u32;
            if idx == NIL {
                break;
            }
            let next = self.get(idx).free_next().load(Ordering::Acquire);
            let new = ((head >> 32).wrapping_add(1)) << 32 | next as u64;
            match self.free_head.compare_exchange_weak(
                head,
                new,
                Ordering::AcqRel,
                Ordering::Acquire,
            ) {
                Ok(_) => return (idx, false),
                Err(actual) => head = actual,
            }
        }
        let idx = self.bump.fetch_add(1, Ordering::Relaxed);
        assert!((idx as usize) < MAX_SEGS * SEG_LEN, "slab capacity exhausted");
        self.ensure_segment(idx >> SEG_SHIFT);
        (idx, true)
    }

    /// Returns a slot to the free list.
    pub fn release(&self, idx: u32) {
        let slot = self.get(idx);
        let mut head = self.free_head.load(Ordering::Acquire);
        loop {
            slot.free_next().store(head as u32, Ordering::Relaxed);
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

    /// Number of slots ever claimed.
    pub fn high_water(&self) -> u32 {
        self.bump.load(Ordering::Relaxed)
    }

    fn ensure_segment(&self, seg: u32) {
        let cell = &self.segments[seg as usize];
        if !cell.load(Ordering::Acquire).is_null() {
            return;
        }
        let mut mem: Vec<T> = Vec::with_capacity(SEG_LEN);
        mem.resize_with(SEG_LEN, T::default);
        let boxed: Box<[T]> = mem.into_boxed_slice();
        let raw = Box::into_raw(boxed) as *mut T;
        if cell
            .compare_exchange(std::ptr::null_mut(), raw, Ordering::AcqRel, Ordering::Acquire)
            .is_err()
        {
            // Lost the race; free our copy.
            unsafe {
                drop(Box::from_raw(std::ptr::slice_from_raw_parts_mut(raw, SEG_LEN)));
            }
        }
    }

    /// Visits every ever-claimed slot.
    pub fn for_each(&self, mut f: impl FnMut(u32, &T)) {
        let top = self.high_water();
        for idx in 0..top {
            let seg = (idx >> SEG_SHIFT) as usize;
            if self.segments[seg].load(Ordering::Acquire).is_null() {
                // Concurrent fresh acquire that has not mapped its segment yet.
                break;
            }
            f(idx, self.get(idx));
        }
    }
}

impl<T> Drop for Slab<T> {
    fn drop(&mut self) {
        for cell in &mut self.segments {
            let base = *cell.get_mut();
            if !base.is_null() {
                unsafe {
                    drop(Box::from_raw(std::ptr::slice_from_raw_parts_mut(base, SEG_LEN)));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[derive(Default)]
    struct Slot {
        free_next: AtomicU32,
        value: AtomicU32,
    }

    impl SlabSlot for Slot {
        fn free_next(&self) -> &AtomicU32 {
            &self.free_next
        }
    }

    #[test]
    fn acquire_release_reuses_slots() {
        let slab = Slab::<Slot>::default();
        let (a, fresh_a) = slab.acquire();
        let (b, _) = slab.acquire();
        assert!(fresh_a);
        assert_ne!(a, b);
        slab.release(a);
        let (c, fresh_c) = slab.acquire();
        assert_eq!(c, a);
        assert!(!fresh_c);
        assert_eq!(slab.high_water(), 2);
    }

    #[test]
    fn concurrent_acquire_yields_distinct_slots() {
        let slab = Arc::new(Slab::<Slot>::default());
        let mut handles = Vec::new();
        for _ in 0..8 {
            let slab = Arc::clone(&slab);
            handles.push(std::thread::spawn(move || {
                let mut got = Vec::new();
                for _ in 0..1000 {
                    let (idx, _) = slab.acquire();
                    slab.get(idx).value.fetch_add(1, Ordering::Relaxed);
                    got.push(idx);
                    if got.len() % 3 == 0 {
                        slab.release(got.pop().unwrap());
                    }
                }
                got
            }));
        }
        let mut all: Vec<u32> = Vec::new();
        for h in handles {
            all.extend(h.join().unwrap());
        }
        let before = all.len();
        all.sort_unstable();
        all.dedup();
        // Slots still held must be unique across threads.
        assert_eq!(before, all.len());
    }
}
