//! Execution policy and deterministic reductions.
//!
//! Work is split over independent items (targets, particles, trials); every
//! item is computed sequentially and reductions run in a fixed pairwise order,
//! so results are bitwise identical for any thread count. Without the
//! `parallel` feature every policy runs sequentially.

/// How data-parallel loops are executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

/// Maps `f` over `0..n`, collecting results in index order.
pub fn map_indexed<T, F>(exec: Exec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Fills `out` in chunks of `width`, calling `f(index, chunk)` for each.
pub fn for_each_chunk<T, F>(exec: Exec, out: &mut [T], width: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        out.par_chunks_mut(width)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = exec;
    out.chunks_mut(width).enumerate().for_each(|(i, c)| f(i, c));
}

const BLOCK: usize = 32;

/// Streaming pairwise (cascade) summation.
///
/// Values are summed sequentially in blocks of 32; block sums are merged on a
/// binary-counter stack, giving an O(log n) error growth with a tree shape
/// that depends only on the number of terms.
#[derive(Debug, Clone, Default)]
pub struct PairwiseSum {
    block: f64,
    in_block: usize,
    stack: Vec<(u32, f64)>,
}

impl PairwiseSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        self.block += x;
        self.in_block += 1;
        if self.in_block == BLOCK {
            self.flush();
        }
    }

    fn flush(&mut self) {
        let mut level = 0u32;
        let mut value = self.block;
        while let Some(&(l, v)) = self.stack.last() {
            if l != level {
                break;
            }
            self.stack.pop();
            value += v;
            level += 1;
        }
        self.stack.push((level, value));
        self.block = 0.0;
        self.in_block = 0;
    }

    pub fn total(&self) -> f64 {
        let mut acc = self.block;
        for &(_, v) in self.stack.iter().rev() {
            acc += v;
        }
        acc
    }
}

/// Pairwise sum of a slice.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    let mut s = PairwiseSum::new();
    for &x in xs {
        s.add(x);
    }
    s.total()
}
