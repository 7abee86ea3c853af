//! Accounting for similarity-block buffers.
//!
//! The chunked pairwise loss allocates its score blocks through
//! [`SimilarityBuffer`], which keeps a per-thread tally of live floats and the
//! high-water mark. Tests reset the mark, run a loss, and read it back.

use std::cell::Cell;

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

/// Clears the high-water mark for the current thread.
pub fn similarity_peak_reset() {
    PEAK.with(|p| p.set(LIVE.with(|l| l.get())));
}

/// Largest number of similarity floats simultaneously live on this thread
/// since the last reset.
pub fn similarity_peak() -> usize {
    PEAK.with(|p| p.get())
}

/// A tracked scratch buffer.
pub struct SimilarityBuffer<T> {
    buf: Vec<T>,
}

impl<T: Copy + Default> SimilarityBuffer<T> {
    pub fn new(len: usize) -> Self {
        LIVE.with(|l| {
            let live = l.get() + len;
            l.set(live);
            PEAK.with(|p| p.set(p.get().max(live)));
        });
        SimilarityBuffer {
            buf: vec![T::default(); len],
        }
    }

    pub fn as_slice(&self) -> &[T] {
        &self.buf
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.buf
    }
}

impl<T> Drop for SimilarityBuffer<T> {
    fn drop(&mut self) {
        let len = self.buf.len();
        LIVE.with(|l| l.set(l.get() - len));
    }
}
