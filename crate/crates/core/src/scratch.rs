//! Thread-local pool of reusable f64 buffers.
//!
//! Large per-batch temporaries allocated fresh each call cross glibc's mmap
//! threshold, so every forward pass would pay thousands of page faults.
//! Checking buffers out of a thread-local pool touches the pages once.
//! Buffers come back with stale contents; callers must fully overwrite
//! (or explicitly zero) what they read.

use std::cell::RefCell;
use std::ops::{Deref, DerefMut};

thread_local! {
    static POOL: RefCell<Vec<Vec<f64>>> = const { RefCell::new(Vec::new()) };
}

/// A pooled buffer; returns to the thread-local pool on drop.
pub struct ScratchVec {
    buf: Vec<f64>,
}

impl ScratchVec {
    /// Checks out a buffer of exactly `len` elements with arbitrary contents.
    pub fn take(len: usize) -> ScratchVec {
        let mut buf = POOL
            .with(|p| p.borrow_mut().pop())
            .unwrap_or_default();
        if buf.capacity() < len {
            buf.reserve_exact(len - buf.len());
        }
        buf.resize(len, 0.0);
        ScratchVec { buf }
    }

    /// Checks out a zero-filled buffer.
    pub fn take_zeroed(len: usize) -> ScratchVec {
        let mut s = Self::take(len);
        s.buf.fill(0.0);
        s
    }

    /// Consumes the scratch handle and keeps the data as a plain vector
    /// (the buffer does not return to the pool).
    pub fn into_vec(mut self) -> Vec<f64> {
        std::mem::take(&mut self.buf)
    }
}

impl Drop for ScratchVec {
    fn drop(&mut self) {
        if self.buf.capacity() > 0 {
            POOL.with(|p| p.borrow_mut().push(std::mem::take(&mut self.buf)));
        }
    }
}

impl Deref for ScratchVec {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.buf
    }
}

impl DerefMut for ScratchVec {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.buf
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn take_resizes_and_reuses() {
        {
            let mut a = ScratchVec::take(100);
            a[99] = 7.0;
        }
        let b = ScratchVec::take(50);
        assert_eq!(b.len(), 50);
        let c = ScratchVec::take_zeroed(200);
        assert!(c.iter().all(|&v| v == 0.0));
    }
}
