//! Order-preserving parallel map over index chunks.
//!
//! Chunk boundaries depend only on `chunk`, never on the worker count, and
//! results come back in chunk order, so any reduction over them is
//! reproducible bit for bit.

use alloc::vec::Vec;
use core::ops::Range;

pub(crate) fn map_chunks<T, F>(len: usize, chunk: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(Range<usize>) -> T + Sync + Send,
{
    let chunk = chunk.max(1);
    let n_chunks = len.div_ceil(chunk);
    let range_of = |c: usize| c * chunk..((c + 1) * chunk).min(len);
    #[cfg(feature = "std")]
    {
        use rayon::prelude::*;
        (0..n_chunks).into_par_iter().map(|c| f(range_of(c))).collect()
    }
    #[cfg(not(feature = "std"))]
    {
        (0..n_chunks).map(|c| f(range_of(c))).collect()
    }
}
