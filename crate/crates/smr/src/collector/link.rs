//! Marked link words and the shared link cell used by the data structures.

use std::marker::PhantomData;
use std::sync::atomic::{AtomicUsize, Ordering};

use super::{Node, Reclaimer, ThreadContext};

const MARK: usize = 1;

/// A possibly-marked pointer word. The low-order bit encodes logical deletion,
/// which requires nodes to be aligned to at least 2 bytes.
pub struct MarkedWord<N> {
    raw: usize,
    _pd: PhantomData<*mut N>,
}

impl<N> Clone for MarkedWord<N> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<N> Copy for MarkedWord<N> {}

impl<N> PartialEq for MarkedWord<N> {
    fn eq(&self, other: &Self) -> bool {
        self.raw == other.raw
    }
}
impl<N> Eq for MarkedWord<N> {}

impl<N> std::fmt::Debug for MarkedWord<N> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "MarkedWord({:#x})", self.raw)
    }
}

impl<N> MarkedWord<N> {
    pub fn null() -> Self {
        MarkedWord { raw: 0, _pd: PhantomData }
    }

    pub fn new(ptr: *mut N, marked: bool) -> Self {
        debug_assert!(align_of::<N>() >= 2);
        debug_assert_eq!(ptr as usize & MARK, 0);
        MarkedWord { raw: ptr as usize | usize::from(marked), _pd: PhantomData }
    }

    pub fn from_raw(raw: usize) -> Self {
        MarkedWord { raw, _pd: PhantomData }
    }

    pub fn raw(self) -> usize {
        self.raw
    }

    /// The pointer with the mark bit stripped.
    pub fn ptr(self) -> *mut N {
        (self.raw & !MARK) as *mut N
    }

    pub fn is_null(self) -> bool {
        self.ptr().is_null()
    }

    pub fn is_marked(self) -> bool {
        self.raw & MARK != 0
    }

    pub fn with_mark(self) -> Self {
        MarkedWord { raw: self.raw | MARK, _pd: PhantomData }
    }

    pub fn without_mark(self) -> Self {
        MarkedWord { raw: self.raw & !MARK, _pd: PhantomData }
    }
}

/// Strips the mark bit from a raw link word.
pub(crate) fn unmark(raw: usize) -> usize {
    raw & !MARK
}

/// A shared link cell holding a marked pointer to an `N` managed by scheme `R`.
///
/// All loads that will be dereferenced go through [`ThreadContext::guard`];
/// updates go through [`Link::compare_exchange`], which lets the scheme attach
/// reference-count transfers to the swing.
pub struct Link<N, R> {
    word: AtomicUsize,
    _pd: PhantomData<(*mut N, R)>,
}

unsafe impl<N: Send, R> Send for Link<N, R> {}
unsafe impl<N: Send, R> Sync for Link<N, R> {}

impl<N: Node<R>, R: Reclaimer> Link<N, R> {
    pub fn null() -> Self {
        Link { word: AtomicUsize::new(0), _pd: PhantomData }
    }

    pub(crate) fn cell(&self) -> &AtomicUsize {
        &self.word
    }

    /// An unprotected snapshot. The result may only be dereferenced while a
    /// guard or region protocol covers the target.
    pub fn load_word(&self, order: Ordering) -> MarkedWord<N> {
        MarkedWord::from_raw(self.word.load(order))
    }

    /// Initializes a link inside a node that is not yet published, handing the
    /// target an extra reference under counted schemes.
    pub fn init(&self, ctx: &ThreadContext<R>, word: MarkedWord<N>) {
        unsafe { R::link_init::<N>(ctx, &self.word, word.raw()) };
    }

    /// Swings the link from `current` to `new` with the scheme's reference
    /// bookkeeping. Returns false and performs no transfer when the cell no
    /// longer holds `current`.
    pub fn compare_exchange(
        &self,
        ctx: &ThreadContext<R>,
        current: MarkedWord<N>,
        new: MarkedWord<N>,
    ) -> bool {
        unsafe { R::link_cas::<N>(ctx, &self.word, current.raw(), new.raw()) }
    }
}

impl<N, R> Link<N, R> {
    /// Direct word store for single-threaded setup/teardown paths.
    pub(crate) fn store_raw(&self, raw: usize, order: Ordering) {
        self.word.store(raw, order);
    }
}
