use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract_err, Result};

/// Endless shuffled pass over `0..n`: reshuffles whenever it runs dry.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    cycles: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(n: usize, mut rng: ChaCha8Rng) -> Result<Self> {
        if n == 0 {
            return Err(contract_err!("cannot sample from an empty domain"));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Ok(BatchSampler {
            order,
            pos: 0,
            cycles: 0,
            rng,
        })
    }

    pub fn next_batch(&mut self, bs: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(bs);
        while out.len() < bs {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            if self.pos == 0 {
                self.cycles += 1;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }

    /// Passes started over the domain so far.
    pub fn cycles(&self) -> usize {
        self.cycles
    }
}

/// One sampler per domain; an epoch is long enough to cover the largest.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    samplers: Vec<BatchSampler>,
    sizes: Vec<usize>,
    batch_size: usize,
}

impl EpochSampler {
    pub fn new(sizes: &[usize], batch_size: usize, rngs: Vec<ChaCha8Rng>) -> Result<Self> {
        if batch_size == 0 {
            return Err(contract_err!("batch size must be positive"));
        }
        if sizes.len() != rngs.len() || sizes.is_empty() {
            return Err(contract_err!("need one rng per domain"));
        }
        let samplers = sizes
            .iter()
            .zip(rngs)
            .map(|(&n, r)| BatchSampler::new(n, r))
            .collect::<Result<_>>()?;
        Ok(EpochSampler {
            samplers,
            sizes: sizes.to_vec(),
            batch_size,
        })
    }

    /// `ceil(max N / bs)`.
    pub fn steps_per_epoch(&self) -> usize {
        let max = self.sizes.iter().copied().max().unwrap_or(0);
        max.div_ceil(self.batch_size)
    }

    /// One batch of row indices per domain.
    pub fn sample_round(&mut self) -> Vec<Vec<usize>> {
        let bs = self.batch_size;
        self.samplers.iter_mut().map(|s| s.next_batch(bs)).collect()
    }

    /// Batch for a single domain, leaving the others untouched.
    pub fn sample_one(&mut self, slot: usize) -> Vec<usize> {
        self.samplers[slot].next_batch(self.batch_size)
    }

    pub fn cycles(&self, slot: usize) -> usize {
        self.samplers[slot].cycles()
    }
}
