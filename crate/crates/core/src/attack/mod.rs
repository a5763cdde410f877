//! Poisoning plugins run by malicious clients.
//!
//! A malicious client sees only what a participant legitimately receives:
//! the broadcast [`GlobalModel`], its own mining state, the learning rate
//! and the attack configuration. The oracle attack is the single exception
//! and is handed benign user embeddings explicitly through [`OracleAccess`].

mod mining;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use mining::{MiningState, PopularSet};

use crate::model::{GlobalModel, GradientUpdate};
use crate::similarity::{add_cosine_grad_wrt_second, cosine, linear_rank_weights};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    #[default]
    None,
    /// Item popularity enhancement.
    PieckIpe,
    /// User embedding approximation.
    PieckUea,
    /// Knows every benign user embedding. Evaluation-only upper bound.
    Oracle,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::PieckIpe => "pieckipe",
            AttackKind::PieckUea => "pieckuea",
            AttackKind::Oracle => "oracle",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "noattack" => Some(AttackKind::None),
            "pieckipe" | "ipe" => Some(AttackKind::PieckIpe),
            "pieckuea" | "uea" => Some(AttackKind::PieckUea),
            "oracle" => Some(AttackKind::Oracle),
            _ => None,
        }
    }

    /// Mined set size used when the config leaves it unset.
    pub fn default_mined_count(self) -> usize {
        match self {
            AttackKind::PieckUea => 50,
            _ => 10,
        }
    }
}

/// How gradients for several targets are produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiTarget {
    /// Optimize the first target and upload copies for every target.
    #[default]
    TrainOneCopy,
    /// Optimize all targets jointly.
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackParams {
    pub mining_rounds: usize,
    /// `None` picks [`AttackKind::default_mined_count`].
    pub mined_count: Option<usize>,
    pub lambda: f64,
    pub uea_batch: usize,
    pub uea_round_size: usize,
    pub multi_target: MultiTarget,
}

impl Default for AttackParams {
    fn default() -> Self {
        AttackParams {
            mining_rounds: 2,
            mined_count: None,
            lambda: 1.0,
            uea_batch: 5,
            uea_round_size: 3,
            multi_target: MultiTarget::TrainOneCopy,
        }
    }
}

/// L_IPE: negative λ-scaled, rank-weighted mean cosine between each target
/// and the popular items on the same side of it, averaged over targets.
pub fn pieckipe_loss(
    model: &GlobalModel,
    popular: &PopularSet,
    targets: &[usize],
    lambda: f64,
) -> f64 {
    let mut total = 0.0;
    for &j in targets {
        let vj = model.item(j);
        for subset in split_by_sign(model, popular, vj) {
            if subset.is_empty() {
                continue;
            }
            let weights = linear_rank_weights(subset.len());
            let sum: f64 = subset
                .iter()
                .zip(&weights)
                .map(|(&k, w)| w * cosine(model.item(k), vj))
                .sum();
            total += lambda * sum / subset.len() as f64;
        }
    }
    -total / targets.len() as f64
}

/// Popular items with positive cosine to `vj`, then those with cosine ≤ 0,
/// each in mined order.
fn split_by_sign(model: &GlobalModel, popular: &PopularSet, vj: &[f64]) -> [Vec<usize>; 2] {
    let (pos, neg): (Vec<usize>, Vec<usize>) = popular
        .items()
        .iter()
        .partition(|&&k| cosine(model.item(k), vj) > 0.0);
    [pos, neg]
}

fn ipe_target_gradients(
    model: &GlobalModel,
    popular: &PopularSet,
    targets: &[usize],
    lambda: f64,
) -> BTreeMap<usize, Vec<f64>> {
    let mut out = BTreeMap::new();
    for &j in targets {
        let vj = model.item(j);
        let mut g = vec![0.0; model.dim];
        for subset in split_by_sign(model, popular, vj) {
            if subset.is_empty() {
                continue;
            }
            let weights = linear_rank_weights(subset.len());
            let scale = -lambda / (subset.len() as f64 * targets.len() as f64);
            for (&k, w) in subset.iter().zip(&weights) {
                add_cosine_grad_wrt_second(model.item(k), vj, scale * w, &mut g);
            }
        }
        out.insert(j, g);
    }
    out
}

/// Gradient of L_IPE with respect to the target embeddings; popular
/// embeddings are constants.
pub fn pieckipe_gradients(
    model: &GlobalModel,
    popular: &PopularSet,
    targets: &[usize],
    lambda: f64,
    multi: MultiTarget,
) -> GradientUpdate {
    assert!(!popular.is_empty(), "popular set is empty");
    let items = match multi {
        MultiTarget::Joint => ipe_target_gradients(model, popular, targets, lambda),
        MultiTarget::TrainOneCopy => {
            let g = ipe_target_gradients(model, popular, &targets[..1], lambda)
                .remove(&targets[0])
                .expect("first target present");
            targets.iter().map(|&t| (t, g.clone())).collect()
        }
    };
    GradientUpdate { items, mlp: None }
}

/// L_UEA: mean `−log Ψ(v_k, v_j)` with popular embeddings standing in for users.
pub fn pieckuea_loss(model: &GlobalModel, popular: &PopularSet, targets: &[usize]) -> f64 {
    let users: Vec<&[f64]> = popular.items().iter().map(|&k| model.item(k)).collect();
    let target_vecs: Vec<&[f64]> = targets.iter().map(|&j| model.item(j)).collect();
    positive_bce(model, &users, &target_vecs)
}

fn positive_bce(model: &GlobalModel, users: &[&[f64]], targets: &[&[f64]]) -> f64 {
    let mut total = 0.0;
    for u in users {
        for v in targets {
            total += model.pair_bce(u, v, 1.0).0;
        }
    }
    total / (users.len() * targets.len()) as f64
}

/// ∂/∂v_j of `mean_{u, j} −log Ψ(u, v_j)` for every row of `targets`.
fn positive_bce_grads(
    model: &GlobalModel,
    users: &[&[f64]],
    targets: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let scale = 1.0 / (users.len() * targets.len()) as f64;
    let mut scratch_u = vec![0.0; model.dim];
    targets
        .iter()
        .map(|v| {
            let mut g = vec![0.0; model.dim];
            for u in users {
                let (_, dlogit) = model.pair_bce(u, v, 1.0);
                model.backprop_pair(u, v, dlogit * scale, &mut scratch_u, &mut g, None);
            }
            g
        })
        .collect()
}

/// Runs `rounds` passes of mini-batch descent with step `eta` over `users`
/// on private copies of the targets, then reports the displacement as a
/// gradient, so that the server's `−η·g` step lands on the optimized values.
fn optimize_and_upload(
    model: &GlobalModel,
    users: &[&[f64]],
    targets: &[usize],
    eta: f64,
    batch: usize,
    rounds: usize,
    multi: MultiTarget,
) -> GradientUpdate {
    assert!(!users.is_empty(), "no pseudo-users to optimize against");
    assert!(eta > 0.0, "learning rate must be positive");
    let trained: &[usize] = match multi {
        MultiTarget::Joint => targets,
        MultiTarget::TrainOneCopy => &targets[..1],
    };
    let mut local: Vec<Vec<f64>> = trained.iter().map(|&j| model.item(j).to_vec()).collect();
    let batch = batch.max(1);
    for _ in 0..rounds {
        for chunk in users.chunks(batch) {
            let grads = positive_bce_grads(model, chunk, &local);
            for (v, g) in local.iter_mut().zip(grads) {
                for (x, d) in v.iter_mut().zip(g) {
                    *x -= eta * d;
                }
            }
        }
    }
    let displacement = |j: usize, fin: &[f64]| -> Vec<f64> {
        model
            .item(j)
            .iter()
            .zip(fin)
            .map(|(b, f)| (b - f) / eta)
            .collect()
    };
    let items = match multi {
        MultiTarget::Joint => trained
            .iter()
            .zip(&local)
            .map(|(&j, f)| (j, displacement(j, f)))
            .collect(),
        MultiTarget::TrainOneCopy => targets
            .iter()
            .map(|&j| (j, displacement(j, &local[0])))
            .collect(),
    };
    GradientUpdate { items, mlp: None }
}

/// Poisonous target gradients from L_UEA after `round_size` local passes in
/// mini-batches of `batch` pseudo-users.
pub fn pieckuea_gradients(
    model: &GlobalModel,
    popular: &PopularSet,
    targets: &[usize],
    eta: f64,
    batch: usize,
    round_size: usize,
    multi: MultiTarget,
) -> GradientUpdate {
    assert!(!popular.is_empty(), "popular set is empty");
    let users: Vec<&[f64]> = popular.items().iter().map(|&k| model.item(k)).collect();
    optimize_and_upload(model, &users, targets, eta, batch, round_size, multi)
}

/// Benign user embeddings, granted only to the oracle attack.
#[derive(Clone, Copy, Debug)]
pub struct OracleAccess<'a> {
    pub benign_users: &'a [Vec<f64>],
}

/// Gradient of the proxy loss `mean_{i, j} −log Ψ(u_i, v_j)` over the true
/// benign users, optimized with the same number of local steps PIECKUEA
/// takes but on full batches.
pub fn oracle_attack_gradients(
    model: &GlobalModel,
    oracle: OracleAccess<'_>,
    targets: &[usize],
    eta: f64,
    steps: usize,
    multi: MultiTarget,
) -> GradientUpdate {
    let users: Vec<&[f64]> = oracle.benign_users.iter().map(Vec::as_slice).collect();
    optimize_and_upload(model, &users, targets, eta, users.len(), steps, multi)
}

/// Exact single-step proxy gradient over the true benign users.
pub fn oracle_proxy_gradient(
    model: &GlobalModel,
    oracle: OracleAccess<'_>,
    targets: &[usize],
) -> GradientUpdate {
    let users: Vec<&[f64]> = oracle.benign_users.iter().map(Vec::as_slice).collect();
    let local: Vec<Vec<f64>> = targets.iter().map(|&j| model.item(j).to_vec()).collect();
    let grads = positive_bce_grads(model, &users, &local);
    GradientUpdate {
        items: targets.iter().copied().zip(grads).collect(),
        mlp: None,
    }
}

/// Everything a malicious client may read when it is selected.
#[derive(Clone, Copy, Debug)]
pub struct AttackContext<'a> {
    pub model: &'a GlobalModel,
    pub eta: f64,
    pub kind: AttackKind,
    pub params: &'a AttackParams,
    pub targets: &'a [usize],
    pub oracle: Option<OracleAccess<'a>>,
}

/// Private state of one malicious client.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttackerState {
    pub mining: MiningState,
    pub popular: Option<PopularSet>,
}

impl AttackerState {
    /// One participation. Returns nothing while mining is incomplete.
    pub fn act(&mut self, ctx: &AttackContext<'_>) -> Option<GradientUpdate> {
        let params = ctx.params;
        match ctx.kind {
            AttackKind::None => None,
            AttackKind::Oracle => {
                let oracle = ctx.oracle.expect("oracle attack requires oracle access");
                let n = params
                    .mined_count
                    .unwrap_or(AttackKind::PieckUea.default_mined_count());
                let steps = params.uea_round_size * n.div_ceil(params.uea_batch.max(1));
                Some(oracle_attack_gradients(
                    ctx.model,
                    oracle,
                    ctx.targets,
                    ctx.eta,
                    steps,
                    params.multi_target,
                ))
            }
            AttackKind::PieckIpe | AttackKind::PieckUea => {
                if self.popular.is_none() {
                    self.mining
                        .observe(&ctx.model.item_embeddings, ctx.model.dim);
                    let exclude: BTreeSet<usize> = ctx.targets.iter().copied().collect();
                    let n = params.mined_count.unwrap_or(ctx.kind.default_mined_count());
                    self.popular = self.mining.finalize(params.mining_rounds, n, &exclude);
                }
                let popular = self.popular.as_ref()?;
                if popular.is_empty() {
                    return None;
                }
                Some(match ctx.kind {
                    AttackKind::PieckIpe => pieckipe_gradients(
                        ctx.model,
                        popular,
                        ctx.targets,
                        params.lambda,
                        params.multi_target,
                    ),
                    _ => pieckuea_gradients(
                        ctx.model,
                        popular,
                        ctx.targets,
                        ctx.eta,
                        params.uea_batch,
                        params.uea_round_size,
                        params.multi_target,
                    ),
                })
            }
        }
    }
}
