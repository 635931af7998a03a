//! Seeded replication fan-out.
//!
//! Replication `r` always draws from stream `r` of a ChaCha generator keyed
//! by the master seed, so results do not depend on the number of workers or
//! on scheduling. Results are collected in replication order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Environment variable consulted when no worker count is configured.
pub const THREADS_ENV: &str = "MMQ_THREADS";

/// Generator for replication `rep` under `seed`.
pub fn replication_rng(seed: u64, rep: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep);
    rng
}

/// Worker count from the configured value, then `MMQ_THREADS`, then the
/// number of available cores.
pub fn resolve_workers(configured: Option<usize>) -> usize {
    configured
        .filter(|&w| w > 0)
        .or_else(|| std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse().ok()).filter(|&w: &usize| w > 0))
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs `job(rep, rng)` for `rep in 0..reps` and returns the results in order.
/// The first error (in replication order) is returned.
pub fn replicate<T, E, F>(reps: usize, seed: u64, workers: Option<usize>, job: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize, &mut ChaCha8Rng) -> Result<T, E> + Sync + Send,
{
    let run = |rep: usize| job(rep, &mut replication_rng(seed, rep as u64));
    #[cfg(feature = "parallel")]
    {
        let workers = resolve_workers(workers);
        if workers > 1 && reps > 1 {
            use rayon::prelude::*;
            let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build();
            if let Ok(pool) = pool {
                return pool.install(|| (0..reps).into_par_iter().map(run).collect());
            }
            log::warn!("could not start a thread pool; running replications serially");
        }
    }
    #[cfg(not(feature = "parallel"))]
    let _ = workers;
    (0..reps).map(run).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn order_and_seed_determine_results() {
        let job = |rep: usize, rng: &mut ChaCha8Rng| Ok::<_, ()>((rep, rng.random::<u64>()));
        let a = replicate(20, 9, Some(1), job).unwrap();
        let b = replicate(20, 9, Some(3), job).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().enumerate().all(|(i, (r, _))| *r == i));
        let c = replicate(20, 10, Some(1), job).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn streams_differ() {
        let x: u64 = replication_rng(1, 0).random();
        let y: u64 = replication_rng(1, 1).random();
        assert_ne!(x, y);
    }

    #[test]
    fn first_error_wins() {
        let r = replicate(10, 0, Some(2), |rep, _| if rep >= 4 { Err(rep) } else { Ok(rep) });
        assert_eq!(r, Err(4));
    }
}
