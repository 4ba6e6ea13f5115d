//! Deterministic parallel execution helpers.
//!
//! All reductions in this crate go through a fixed block decomposition:
//! the input is split into blocks of [`BLOCK`] elements, each block is
//! reduced sequentially, and the per-block partials are combined in block
//! order. Because the block boundaries and the combine order never depend
//! on the thread count, results are bit-identical for any number of rayon
//! workers, and identical to the sequential fallback built without the
//! `parallel` feature.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Reduction block size, fixed so numeric results do not depend on scheduling.
pub const BLOCK: usize = 4096;

/// Reduce `data` block-by-block and fold the partials in block order.
pub fn block_reduce<T, P, M, F>(data: &[T], map_block: M, mut fold: F, init: P) -> P
where
    T: Sync,
    P: Send,
    M: Fn(&[T]) -> P + Sync,
    F: FnMut(P, P) -> P,
{
    let partials = map_blocks(data, map_block);
    partials.into_iter().fold(init, |acc, p| fold(acc, p))
}

/// Map fixed-size blocks of `data`, returning the per-block results in order.
#[cfg(feature = "parallel")]
pub fn map_blocks<T, P, M>(data: &[T], map_block: M) -> Vec<P>
where
    T: Sync,
    P: Send,
    M: Fn(&[T]) -> P + Sync,
{
    data.par_chunks(BLOCK).map(|b| map_block(b)).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_blocks<T, P, M>(data: &[T], map_block: M) -> Vec<P>
where
    T: Sync,
    P: Send,
    M: Fn(&[T]) -> P + Sync,
{
    data.chunks(BLOCK).map(|b| map_block(b)).collect()
}

/// Apply `f` elementwise, writing into `out` (same length as `data`).
#[cfg(feature = "parallel")]
pub fn for_each_zip<T, U, F>(data: &[T], out: &mut [U], f: F)
where
    T: Sync,
    U: Send,
    F: Fn(&T, &mut U) + Sync,
{
    assert_eq!(data.len(), out.len());
    out.par_chunks_mut(BLOCK)
        .zip(data.par_chunks(BLOCK))
        .for_each(|(ob, db)| {
            for (o, d) in ob.iter_mut().zip(db) {
                f(d, o);
            }
        });
}

#[cfg(not(feature = "parallel"))]
pub fn for_each_zip<T, U, F>(data: &[T], out: &mut [U], f: F)
where
    T: Sync,
    U: Send,
    F: Fn(&T, &mut U) + Sync,
{
    assert_eq!(data.len(), out.len());
    for (o, d) in out.iter_mut().zip(data) {
        f(d, o);
    }
}

/// Map every element of `items`, preserving order.
#[cfg(feature = "parallel")]
pub fn map_items<T, P, M>(items: &[T], f: M) -> Vec<P>
where
    T: Sync,
    P: Send,
    M: Fn(&T) -> P + Sync,
{
    items.par_iter().map(|x| f(x)).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_items<T, P, M>(items: &[T], f: M) -> Vec<P>
where
    T: Sync,
    P: Send,
    M: Fn(&T) -> P + Sync,
{
    items.iter().map(|x| f(x)).collect()
}

/// Zip `BLOCK`-sized chunks of `a` with `BLOCK * k`-sized chunks of `b`,
/// returning the per-block results in order.
#[cfg(feature = "parallel")]
pub fn map_zip_blocks<T, U, P, F>(a: &[T], b: &[U], k: usize, f: F) -> Vec<P>
where
    T: Sync,
    U: Sync,
    P: Send,
    F: Fn(&[T], &[U]) -> P + Sync,
{
    assert_eq!(a.len() * k, b.len());
    a.par_chunks(BLOCK)
        .zip(b.par_chunks(BLOCK * k))
        .map(|(ab, bb)| f(ab, bb))
        .collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_zip_blocks<T, U, P, F>(a: &[T], b: &[U], k: usize, f: F) -> Vec<P>
where
    T: Sync,
    U: Sync,
    P: Send,
    F: Fn(&[T], &[U]) -> P + Sync,
{
    assert_eq!(a.len() * k, b.len());
    a.chunks(BLOCK)
        .zip(b.chunks(BLOCK * k))
        .map(|(ab, bb)| f(ab, bb))
        .collect()
}

/// Like [`map_zip_blocks`] but with mutable access to the `b` chunks.
#[cfg(feature = "parallel")]
pub fn map_zip_blocks_mut<T, U, P, F>(a: &[T], b: &mut [U], k: usize, f: F) -> Vec<P>
where
    T: Sync,
    U: Send,
    P: Send,
    F: Fn(&[T], &mut [U]) -> P + Sync,
{
    assert_eq!(a.len() * k, b.len());
    a.par_chunks(BLOCK)
        .zip(b.par_chunks_mut(BLOCK * k))
        .map(|(ab, bb)| f(ab, bb))
        .collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_zip_blocks_mut<T, U, P, F>(a: &[T], b: &mut [U], k: usize, f: F) -> Vec<P>
where
    T: Sync,
    U: Send,
    P: Send,
    F: Fn(&[T], &mut [U]) -> P + Sync,
{
    assert_eq!(a.len() * k, b.len());
    a.chunks(BLOCK)
        .zip(b.chunks_mut(BLOCK * k))
        .map(|(ab, bb)| f(ab, bb))
        .collect()
}

/// Sum of `f` over `data`, with the deterministic block decomposition.
pub fn block_sum<T, F>(data: &[T], f: F) -> f64
where
    T: Sync,
    F: Fn(&T) -> f64 + Sync,
{
    block_reduce(
        data,
        |block| block.iter().map(&f).sum::<f64>(),
        |a, b| a + b,
        0.0,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_sum_matches_sequential_fold() {
        let data: Vec<f64> = (0..20_000).map(|i| (i as f64).sin()).collect();
        let expected = data
            .chunks(BLOCK)
            .map(|b| b.iter().sum::<f64>())
            .fold(0.0, |a, b| a + b);
        let got = block_sum(&data, |&x| x);
        assert_eq!(got.to_bits(), expected.to_bits());
    }

    #[test]
    fn for_each_zip_is_elementwise() {
        let data: Vec<f64> = (0..10_000).map(|i| i as f64).collect();
        let mut out = vec![0.0f64; data.len()];
        for_each_zip(&data, &mut out, |&x, o| *o = 2.0 * x);
        assert!(out.iter().enumerate().all(|(i, &v)| v == 2.0 * i as f64));
    }
}
