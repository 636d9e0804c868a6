//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) these fan out over the rayon global
//! pool; without it they run the same closures sequentially. Every helper
//! assigns each output element to exactly one closure call, so results are
//! bit-identical between the two builds and across thread counts.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `items`, preserving order.
pub fn map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Maps `f` over `0..n`, preserving order.
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Calls `f(row_index, row)` for every `row_len`-sized row of `data`.
pub fn for_rows<F>(data: &mut [f64], row_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    debug_assert!(row_len > 0 && data.len().is_multiple_of(row_len));
    #[cfg(feature = "parallel")]
    {
        // Small rows are batched so rayon's per-task overhead stays negligible.
        let rows_per_task = (4096 / row_len).max(1);
        data.par_chunks_mut(row_len * rows_per_task).enumerate().for_each(|(chunk, block)| {
            for (r, row) in block.chunks_mut(row_len).enumerate() {
                f(chunk * rows_per_task + r, row);
            }
        });
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (r, row) in data.chunks_mut(row_len).enumerate() {
            f(r, row);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let v: Vec<u32> = (0..1000).collect();
        let out = map(&v, |x| x * 2);
        assert!(out.iter().enumerate().all(|(i, &y)| y == 2 * i as u32));
    }

    #[test]
    fn for_rows_visits_every_row_once() {
        let mut data = vec![0.0; 7 * 3];
        for_rows(&mut data, 3, |r, row| row.iter_mut().for_each(|x| *x += r as f64));
        for (r, row) in data.chunks(3).enumerate() {
            assert!(row.iter().all(|&x| x == r as f64));
        }
    }
}
