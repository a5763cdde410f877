//! Popular item mining from the change in broadcast item embeddings.
//!
//! Items that many users interact with keep receiving large gradients long
//! after the long tail has settled, so summing the per-item L2 change
//! between the rounds a client observes ranks items by popularity.

use std::collections::BTreeSet;

/// Per-client Δ-Norm accumulators.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MiningState {
    accumulated: Vec<f64>,
    snapshot: Vec<f64>,
    dim: usize,
    observations: usize,
}

impl MiningState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn observations(&self) -> usize {
        self.observations
    }

    pub fn accumulated(&self) -> &[f64] {
        &self.accumulated
    }

    /// Records one broadcast of the row-major item embedding matrix.
    pub fn observe(&mut self, embeddings: &[f64], dim: usize) {
        if self.observations == 0 {
            assert!(
                dim > 0 && embeddings.len().is_multiple_of(dim),
                "embedding matrix is not a multiple of dim {dim}"
            );
            self.dim = dim;
            self.accumulated = vec![0.0; embeddings.len() / dim];
        } else {
            assert!(
                dim == self.dim && embeddings.len() == self.snapshot.len(),
                "embedding shape drifted between observations"
            );
            for ((acc, now), before) in self
                .accumulated
                .iter_mut()
                .zip(embeddings.chunks_exact(dim))
                .zip(self.snapshot.chunks_exact(dim))
            {
                *acc += now
                    .iter()
                    .zip(before)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
            }
        }
        self.snapshot.clear();
        self.snapshot.extend_from_slice(embeddings);
        self.observations += 1;
    }

    /// Top-`n` items once `mining_rounds + 1` observations have been made,
    /// `None` while mining is still in progress.
    pub fn finalize(
        &self,
        mining_rounds: usize,
        n: usize,
        exclude: &BTreeSet<usize>,
    ) -> Option<PopularSet> {
        if self.observations < mining_rounds + 1 {
            return None;
        }
        Some(PopularSet::top_n(&self.accumulated, n, exclude))
    }
}

/// Mined popular items, most popular first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PopularSet(Vec<usize>);

impl PopularSet {
    /// Items with the largest scores (ties by smaller id), skipping `exclude`.
    pub fn top_n(scores: &[f64], n: usize, exclude: &BTreeSet<usize>) -> Self {
        let mut ids: Vec<usize> = (0..scores.len()).filter(|j| !exclude.contains(j)).collect();
        ids.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        ids.truncate(n);
        PopularSet(ids)
    }

    pub fn from_ordered(items: Vec<usize>) -> Self {
        PopularSet(items)
    }

    pub fn items(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, item: usize) -> bool {
        self.0.contains(&item)
    }
}
