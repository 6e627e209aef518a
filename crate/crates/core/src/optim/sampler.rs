//! Class-balanced minibatches.
//!
//! Each draw picks `min(batch, #classes)` distinct classes uniformly, then
//! `⌊batch / classes⌋` samples per class with replacement; the remainder is
//! handed out one sample at a time to the picked classes in order.

use rand::seq::index::sample as sample_indices;
use rand::Rng;

#[derive(Debug, Clone)]
pub struct BalancedSampler {
    groups: Vec<(usize, Vec<usize>)>,
}

impl BalancedSampler {
    /// `groups` maps each class to its (nonempty) sample indices.
    pub fn new(groups: Vec<(usize, Vec<usize>)>) -> Self {
        debug_assert!(groups.iter().all(|(_, v)| !v.is_empty()));
        Self { groups }
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.groups.len()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R, batch: usize) -> Vec<usize> {
        if self.groups.is_empty() || batch == 0 {
            return Vec::new();
        }
        let picked = sample_indices(rng, self.groups.len(), batch.min(self.groups.len())).into_vec();
        let per = batch / picked.len();
        let extra = batch % picked.len();
        let mut out = Vec::with_capacity(batch);
        for (slot, &g) in picked.iter().enumerate() {
            let members = &self.groups[g].1;
            let count = per + usize::from(slot < extra);
            for _ in 0..count {
                out.push(members[rng.random_range(0..members.len())]);
            }
        }
        out
    }

    /// Up to `per_class` distinct samples from every class, uniformly without replacement.
    pub fn sample_each<R: Rng>(&self, rng: &mut R, per_class: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for (_, members) in &self.groups {
            let take = per_class.min(members.len());
            out.extend(sample_indices(rng, members.len(), take).into_iter().map(|i| members[i]));
        }
        out
    }
}
