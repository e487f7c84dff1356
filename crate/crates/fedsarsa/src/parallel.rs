use fedsarsa_core::{AgentExecutor, AgentSlot};
use rayon::prelude::*;

/// Steps agents concurrently on the current rayon pool.
#[derive(Debug, Clone, Copy, Default)]
pub struct RayonExecutor;

impl AgentExecutor for RayonExecutor {
    fn for_each_agent<F>(&self, slots: &mut [AgentSlot], f: F)
    where
        F: Fn(usize, &mut AgentSlot) + Sync + Send,
    {
        slots.par_iter_mut().enumerate().for_each(|(i, slot)| f(i, slot));
    }
}

/// Dedicated pool with exactly `workers` threads.
pub fn pool(workers: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool construction")
}
