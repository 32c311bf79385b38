//! Order-preserving data parallelism.
//!
//! With the `parallel` feature (default) work is spread over the rayon
//! pool; without it everything runs on the calling thread. Results come
//! back in input order either way, so downstream reductions are identical.

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Parallelism {
    Sequential,
    #[default]
    Auto,
}

impl Parallelism {
    /// Map `f` over `items`, keeping input order.
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &T) -> R + Sync + Send,
    {
        match self {
            Parallelism::Sequential => items.iter().enumerate().map(|(i, x)| f(i, x)).collect(),
            Parallelism::Auto => par_map(items, f),
        }
    }

    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Parallelism::Auto
    }
}

#[cfg(feature = "parallel")]
fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
}
