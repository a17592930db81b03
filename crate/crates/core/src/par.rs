//! Order-preserving map over slices, on a rayon pool when the `parallel`
//! feature is on and sequentially otherwise.

/// Maps in input order on the calling thread.
pub fn map_sequential<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Maps on a dedicated pool of `threads` workers, so at most `threads` calls
/// of `f` run at once. Output order matches input order.
#[cfg(feature = "parallel")]
pub fn map_bounded<T, U, F>(items: &[T], threads: usize, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .thread_name(|i| format!("unspsc-worker-{i}"))
        .build()
        .expect("failed to build worker pool");
    pool.install(|| items.par_iter().map(f).collect())
}

#[cfg(not(feature = "parallel"))]
pub fn map_bounded<T, U, F>(items: &[T], _threads: usize, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    map_sequential(items, f)
}

/// Maps with at most `parallelism` concurrent calls; 1 stays on this thread.
pub fn map_ordered<T, U, F>(items: &[T], parallelism: usize, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    if parallelism <= 1 || items.len() <= 1 {
        map_sequential(items, f)
    } else {
        map_bounded(items, parallelism.min(items.len()), f)
    }
}

/// CPU-bound map on the global pool.
#[cfg(feature = "parallel")]
pub fn map_all<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_all<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    map_sequential(items, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::time::Duration;

    #[test]
    fn preserves_order() {
        let items: Vec<u64> = (0..500).collect();
        let expected: Vec<u64> = items.iter().map(|x| x * x).collect();
        for p in [1, 2, 7, 64] {
            assert_eq!(map_ordered(&items, p, |x| x * x), expected);
        }
        assert_eq!(map_all(&items, |x| x * x), expected);
    }

    #[test]
    fn respects_bound() {
        let in_flight = AtomicUsize::new(0);
        let peak = AtomicUsize::new(0);
        let items: Vec<usize> = (0..40).collect();
        map_ordered(&items, 3, |_| {
            let now = in_flight.fetch_add(1, Ordering::SeqCst) + 1;
            peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(2));
            in_flight.fetch_sub(1, Ordering::SeqCst);
        });
        assert!(peak.load(Ordering::SeqCst) <= 3);
    }
}
