use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seeded pick among runnable processes.
///
/// Every pick is uniform over the runnable set, so a process that stays
/// runnable is chosen with probability one eventually.
#[derive(Debug, Clone)]
pub struct Scheduler {
    seed: u64,
    rng: ChaCha8Rng,
    steps: u64,
}

impl Scheduler {
    pub fn new(seed: u64) -> Self {
        Scheduler {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            steps: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Continues step numbering after a restart.
    pub fn with_step_offset(mut self, steps: u64) -> Self {
        self.steps = steps;
        self
    }

    /// Picks one of `runnable` (which must be non-empty) and advances the step counter.
    pub fn pick<T: Copy>(&mut self, runnable: &[T]) -> T {
        assert!(!runnable.is_empty(), "pick from an empty runnable set");
        let i = if runnable.len() == 1 {
            0
        } else {
            self.rng.random_range(0..runnable.len())
        };
        self.steps += 1;
        runnable[i]
    }
}
