//! Recommendation metrics and the analytics behind the attack and defense
//! design: exposure/hit ratios, PKL, user coverage, the expected share of
//! poisonous gradients per item, and Δ-Norm popularity reports.

use std::collections::BTreeSet;

use log::warn;
use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;

use crate::data::{InteractionDataset, UserData};
use crate::model::GlobalModel;
use crate::rng::{substream, Stream};
use crate::similarity::embedding_kl;

/// Top-`k` items for one user among items outside their training positives,
/// best first, ties by smaller id.
pub fn top_k(model: &GlobalModel, user: &[f64], data: &UserData, k: usize) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = (0..model.num_items)
        .filter(|&j| !data.has_positive(j))
        .map(|j| (model.ranking_score(user, model.item(j)), j))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if k < scored.len() {
        if k == 0 {
            return Vec::new();
        }
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_by(cmp);
    scored.into_iter().map(|(_, j)| j).collect()
}

/// Top-`k` lists for every benign user, in user order.
pub fn top_k_lists(
    model: &GlobalModel,
    users: &[Vec<f64>],
    dataset: &InteractionDataset,
    k: usize,
) -> Vec<Vec<usize>> {
    users
        .par_iter()
        .zip(dataset.users.par_iter())
        .map(|(u, d)| top_k(model, u, d, k))
        .collect()
}

/// ER@K for one target: share of users who never interacted with it whose
/// list contains it. `None` when every user interacted with it.
pub fn exposure_ratio_for(
    lists: &[Vec<usize>],
    dataset: &InteractionDataset,
    target: usize,
) -> Option<f64> {
    let mut eligible = 0usize;
    let mut exposed = 0usize;
    for (list, user) in lists.iter().zip(&dataset.users) {
        if user.has_interacted(target) {
            continue;
        }
        eligible += 1;
        exposed += usize::from(list.contains(&target));
    }
    if eligible == 0 {
        warn!("target {target} skipped: every evaluated user interacted with it");
        return None;
    }
    Some(exposed as f64 / eligible as f64)
}

/// Mean ER@K over targets with a defined ratio, plus the per-target values.
pub fn exposure_ratio(
    lists: &[Vec<usize>],
    dataset: &InteractionDataset,
    targets: &[usize],
) -> (f64, Vec<Option<f64>>) {
    assert!(!targets.is_empty(), "no target items");
    let per: Vec<Option<f64>> = targets
        .iter()
        .map(|&t| exposure_ratio_for(lists, dataset, t))
        .collect();
    let defined: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    (mean, per)
}

/// HR@K: share of users whose held-out item is in their list.
pub fn hit_ratio(lists: &[Vec<usize>], dataset: &InteractionDataset) -> f64 {
    if lists.is_empty() {
        return 0.0;
    }
    let hits = lists
        .iter()
        .zip(&dataset.users)
        .filter(|(list, user)| list.contains(&user.test_item))
        .count();
    hits as f64 / lists.len() as f64
}

/// One evaluation of the benign population.
#[derive(Clone, Debug, PartialEq)]
pub struct EvaluationReport {
    pub round: usize,
    pub k: usize,
    pub er_mean: f64,
    pub er_per_target: Vec<Option<f64>>,
    pub hr: f64,
}

pub fn evaluate(
    model: &GlobalModel,
    users: &[Vec<f64>],
    dataset: &InteractionDataset,
    targets: &[usize],
    k: usize,
    round: usize,
) -> EvaluationReport {
    let lists = top_k_lists(model, users, dataset, k);
    let (er_mean, er_per_target) = if targets.is_empty() {
        (0.0, Vec::new())
    } else {
        exposure_ratio(&lists, dataset, targets)
    };
    EvaluationReport {
        round,
        k,
        er_mean,
        er_per_target,
        hr: hit_ratio(&lists, dataset),
    }
}

/// Average pairwise KL divergence between two embedding sets.
pub fn pkl(a: &[&[f64]], b: &[&[f64]]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty(), "PKL needs nonempty sets");
    let total: f64 = a
        .iter()
        .flat_map(|x| b.iter().map(move |y| embedding_kl(x, y)))
        .sum();
    total / (a.len() * b.len()) as f64
}

/// Share of users with at least one interaction in `items`.
pub fn ucr(items: &BTreeSet<usize>, dataset: &InteractionDataset) -> f64 {
    if dataset.users.is_empty() {
        return 0.0;
    }
    let covered = dataset
        .users
        .iter()
        .filter(|u| items.contains(&u.test_item) || u.positives.iter().any(|j| items.contains(j)))
        .count();
    covered as f64 / dataset.users.len() as f64
}

/// Expected share of poisonous gradients for an item whose training-set
/// inclusion probability among benign users is `p_j`.
pub fn expected_poison_ratio(malicious_ratio: f64, p_j: f64) -> f64 {
    let denom = (1.0 - malicious_ratio) * p_j + malicious_ratio;
    if denom == 0.0 {
        0.0
    } else {
        malicious_ratio / denom
    }
}

/// Mean over users of the probability that `item` is in their training set.
pub fn estimate_p_j(dataset: &InteractionDataset, item: usize) -> f64 {
    let n = dataset.num_items as f64;
    let total: f64 = dataset
        .users
        .iter()
        .map(|u| {
            if u.has_positive(item) {
                1.0
            } else {
                let pos = u.positives.len() as f64;
                (dataset.q * pos / (n - pos)).min(1.0)
            }
        })
        .sum();
    total / dataset.users.len() as f64
}

/// Empirical share of poisonous gradients for `item` over simulated rounds.
/// Each round samples `batch` of the benign plus `malicious` users; every
/// selected malicious user uploads for the item and each selected benign user
/// does so if the item is a training positive or, otherwise, with the
/// negative-sampling probability of a freshly drawn training set.
pub fn monte_carlo_poison_ratio(
    dataset: &InteractionDataset,
    item: usize,
    malicious: usize,
    batch: usize,
    rounds: usize,
    seed: u64,
) -> f64 {
    let benign = dataset.users.len();
    let n = dataset.num_items as f64;
    let inclusion: Vec<f64> = dataset
        .users
        .iter()
        .map(|u| {
            if u.has_positive(item) {
                1.0
            } else {
                let pos = u.positives.len() as f64;
                (dataset.q * pos / (n - pos)).min(1.0)
            }
        })
        .collect();
    let mut rng = substream(seed, Stream::MonteCarlo, item as u64);
    let (mut poison, mut total) = (0u64, 0u64);
    for _ in 0..rounds {
        for id in index::sample(&mut rng, benign + malicious, batch) {
            if id >= benign {
                poison += 1;
                total += 1;
            } else if rng.random::<f64>() < inclusion[id] {
                total += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        poison as f64 / total as f64
    }
}

/// Δ-Norm ranking at one round: the top-`m` items by embedding change with
/// their true popularity rank.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaNormSnapshot {
    pub round: usize,
    /// (item, Δ-Norm, true popularity rank, 1 = most popular).
    pub top: Vec<(usize, f64, usize)>,
    /// How many of the top items fall outside the popular band.
    pub outside_band: usize,
    pub all_static: bool,
}

/// Builds Δ-Norm snapshots for the requested rounds from per-round
/// embedding-change vectors (`history[r][j]` = change of item j at round r).
pub fn delta_norm_rank_report(
    history: &[Vec<f64>],
    popularity_ranks: &[usize],
    top_m: usize,
    band: usize,
    rounds: &[usize],
) -> Vec<DeltaNormSnapshot> {
    rounds
        .iter()
        .filter(|&&r| r < history.len())
        .map(|&r| {
            let deltas = &history[r];
            let mut ids: Vec<usize> = (0..deltas.len()).collect();
            ids.sort_by(|&a, &b| deltas[b].total_cmp(&deltas[a]).then(a.cmp(&b)));
            ids.truncate(top_m);
            let top: Vec<(usize, f64, usize)> = ids
                .iter()
                .map(|&j| (j, deltas[j], popularity_ranks[j]))
                .collect();
            DeltaNormSnapshot {
                round: r,
                outside_band: top.iter().filter(|t| t.2 > band).count(),
                all_static: deltas.iter().all(|&d| d == 0.0),
                top,
            }
        })
        .collect()
}
