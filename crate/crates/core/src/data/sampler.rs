//! Balanced P×K identity sampling.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{DpaError, Result};

/// One batch: `P` identities × `K` entries, grouped by identity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PkBatch {
    /// Dataset entry indices, `P·K` of them.
    pub indices: Vec<usize>,
    /// Identity of each position.
    pub identities: Vec<usize>,
    pub p: usize,
    pub k: usize,
}

#[derive(Debug, Clone)]
pub struct PkSampler {
    pool: Vec<(usize, Vec<usize>)>,
    p: usize,
    k: usize,
    rng: ChaCha8Rng,
}

impl PkSampler {
    /// `groups` maps identity → entry indices (each non-empty).
    pub fn new(groups: &BTreeMap<usize, Vec<usize>>, p: usize, k: usize, seed: u64) -> Result<Self> {
        if p == 0 || k == 0 {
            return Err(DpaError::config("P and K must be positive"));
        }
        let pool: Vec<(usize, Vec<usize>)> = groups
            .iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(&id, v)| (id, v.clone()))
            .collect();
        if pool.len() < p {
            return Err(DpaError::InsufficientIdentities {
                needed: p,
                available: pool.len(),
            });
        }
        Ok(PkSampler {
            pool,
            p,
            k,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.pool.len().div_ceil(self.p)
    }

    /// One epoch: a random permutation of identities consumed `P` at a time.
    /// A short final group is topped up with other randomly chosen identities.
    pub fn epoch(&mut self) -> Vec<PkBatch> {
        let mut order: Vec<usize> = (0..self.pool.len()).collect();
        order.shuffle(&mut self.rng);
        let mut out = Vec::with_capacity(self.batches_per_epoch());
        for chunk in order.chunks(self.p) {
            let mut group = chunk.to_vec();
            if group.len() < self.p {
                let mut rest: Vec<usize> = (0..self.pool.len()).filter(|i| !group.contains(i)).collect();
                rest.shuffle(&mut self.rng);
                group.extend(rest.into_iter().take(self.p - group.len()));
            }
            out.push(self.batch_for(&group));
        }
        out
    }

    fn batch_for(&mut self, group: &[usize]) -> PkBatch {
        let mut indices = Vec::with_capacity(self.p * self.k);
        let mut identities = Vec::with_capacity(self.p * self.k);
        for &g in group {
            let (id, members) = &self.pool[g];
            let picks = pick_k(members, self.k, &mut self.rng);
            identities.extend(std::iter::repeat_n(*id, picks.len()));
            indices.extend(picks);
        }
        PkBatch {
            indices,
            identities,
            p: self.p,
            k: self.k,
        }
    }
}

/// `k` members without replacement when possible; otherwise every member once
/// and the remainder drawn with replacement.
fn pick_k<R: Rng>(members: &[usize], k: usize, rng: &mut R) -> Vec<usize> {
    if members.len() >= k {
        return sample(rng, members.len(), k).into_iter().map(|i| members[i]).collect();
    }
    let mut out = members.to_vec();
    while out.len() < k {
        out.push(members[rng.gen_range(0..members.len())]);
    }
    out.shuffle(rng);
    out
}
