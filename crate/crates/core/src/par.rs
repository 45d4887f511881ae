//! Data-parallel helpers. With the `parallel` feature these fan out over
//! rayon; without it they run the same closures in order. Every helper
//! returns results in input order so reductions stay bit-reproducible.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Work below this many scalar multiply-adds is not worth splitting.
pub const MIN_PARALLEL_WORK: usize = 1 << 15;

/// Map `f` over `0..n`, collecting in index order.
pub fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        sequential::map_indices(n, f)
    }
}

/// Map `f` over a slice, collecting in order.
pub fn map_slice<S, T, F>(items: &[S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        sequential::map_slice(items, f)
    }
}

/// Apply `f(row_index, row)` to consecutive `width`-sized chunks of `out`.
/// Splits only when `work` exceeds [`MIN_PARALLEL_WORK`].
pub fn for_each_row<F>(out: &mut [f64], width: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if width == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        if work >= MIN_PARALLEL_WORK {
            out.par_chunks_mut(width).enumerate().for_each(|(i, row)| f(i, row));
            return;
        }
    }
    let _ = work;
    sequential::for_each_row(out, width, f);
}

/// Whether this build fans work out across threads.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

/// The in-order fallbacks, always available (benchmarks compare against them).
pub mod sequential {
    pub fn map_indices<T, F: Fn(usize) -> T>(n: usize, f: F) -> Vec<T> {
        (0..n).map(f).collect()
    }

    pub fn map_slice<S, T, F: Fn(&S) -> T>(items: &[S], f: F) -> Vec<T> {
        items.iter().map(f).collect()
    }

    pub fn for_each_row<F: Fn(usize, &mut [f64])>(out: &mut [f64], width: usize, f: F) {
        if width == 0 {
            return;
        }
        out.chunks_mut(width).enumerate().for_each(|(i, row)| f(i, row));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree() {
        let items: Vec<u64> = (0..1000).collect();
        assert_eq!(map_slice(&items, |v| v * v), sequential::map_slice(&items, |v| v * v));
        assert_eq!(map_indices(77, |i| i as f64 * 0.5), sequential::map_indices(77, |i| i as f64 * 0.5));
        let (mut a, mut b) = (vec![0.0; 3 * 50_000], vec![0.0; 3 * 50_000]);
        let kernel = |i: usize, row: &mut [f64]| row.iter_mut().enumerate().for_each(|(j, v)| *v = (i * 3 + j) as f64);
        for_each_row(&mut a, 3, usize::MAX, kernel);
        sequential::for_each_row(&mut b, 3, kernel);
        assert_eq!(a, b);
    }
}
