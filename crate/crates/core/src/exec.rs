//! Ordered data-parallel map.
//!
//! Results always come back in input order, and callers reduce them
//! sequentially, so parallel and sequential builds produce bit-identical
//! numbers. The `parallel` feature (on by default) backs [`map_ordered`]
//! with rayon; without it, [`map_ordered`] is [`sequential::map_ordered`].

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[cfg(feature = "parallel")]
pub fn map_ordered<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_ordered<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    sequential::map_ordered(items, f)
}

/// Indexed variant of [`map_ordered`] over `0..n`.
#[cfg(feature = "parallel")]
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    sequential::map_range(n, f)
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

/// Runtime choice between the build's default map and the sequential one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Schedule {
    #[default]
    Auto,
    Sequential,
}

pub fn map_ordered_with<T, R, F>(schedule: Schedule, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match schedule {
        Schedule::Auto => map_ordered(items, f),
        Schedule::Sequential => sequential::map_ordered(items, f),
    }
}

/// Always-sequential implementations, available in every build so the
/// benches can compare both paths.
pub mod sequential {
    pub fn map_ordered<T, R, F>(items: &[T], f: F) -> Vec<R>
    where
        F: Fn(&T) -> R,
    {
        items.iter().map(f).collect()
    }

    pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
    where
        F: Fn(usize) -> R,
    {
        (0..n).map(f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree_in_order() {
        let xs: Vec<u64> = (0..1000).collect();
        let a = map_ordered(&xs, |x| x * x);
        let b = sequential::map_ordered(&xs, |x| x * x);
        assert_eq!(a, b);
        assert_eq!(map_range(10, |i| i + 1), (1..=10).collect::<Vec<_>>());
    }
}
