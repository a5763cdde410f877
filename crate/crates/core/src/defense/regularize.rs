//! Client-side regularizers that hide popular-item structure from miners.
//!
//! Re1 is the rank-weighted cosine between the client's non-popular training
//! items and its own mined popular items; Re2 is the rank-weighted KL
//! divergence from each popular item's embedding to the user embedding.
//! Training minimizes `L − β·Re1 − γ·Re2`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attack::PopularSet;
use crate::model::{ClientStep, GlobalModel};
use crate::similarity::{
    add_cosine_grad_wrt_second, add_kl_grad_wrt_second, cosine, embedding_kl,
    exponential_rank_weights,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DefenseParams {
    pub enabled: bool,
    pub beta: f64,
    pub gamma: f64,
    /// Size of each client's own mined popular set.
    pub mined_count: usize,
    pub mining_rounds: usize,
}

impl Default for DefenseParams {
    fn default() -> Self {
        DefenseParams {
            enabled: false,
            beta: 0.5,
            gamma: 0.5,
            mined_count: 10,
            mining_rounds: 2,
        }
    }
}

/// Regularizer values and their gradients.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Regularizers {
    pub re1: f64,
    pub re2: f64,
    /// ∂Re1/∂v_j for every non-popular training item.
    pub item_grads: BTreeMap<usize, Vec<f64>>,
    /// ∂Re2/∂u.
    pub user_grad: Vec<f64>,
}

pub fn defense_regularizers(
    model: &GlobalModel,
    user: &[f64],
    popular: &PopularSet,
    training_items: &[usize],
) -> Regularizers {
    let weights = exponential_rank_weights(popular.len());
    let unpopular: Vec<usize> = training_items
        .iter()
        .copied()
        .filter(|&j| !popular.contains(j))
        .collect();

    let mut re1 = 0.0;
    let mut item_grads = BTreeMap::new();
    if !unpopular.is_empty() {
        let scale = 1.0 / unpopular.len() as f64;
        for &j in &unpopular {
            let vj = model.item(j);
            let mut g = vec![0.0; model.dim];
            for (&k, w) in popular.items().iter().zip(&weights) {
                re1 += scale * w * cosine(model.item(k), vj);
                add_cosine_grad_wrt_second(model.item(k), vj, scale * w, &mut g);
            }
            item_grads.insert(j, g);
        }
    }

    let mut re2 = 0.0;
    let mut user_grad = vec![0.0; model.dim];
    for (&k, w) in popular.items().iter().zip(&weights) {
        re2 += w * embedding_kl(model.item(k), user);
        add_kl_grad_wrt_second(model.item(k), user, *w, &mut user_grad);
    }

    Regularizers {
        re1,
        re2,
        item_grads,
        user_grad,
    }
}

/// Local step on `L − β·Re1 − γ·Re2`. Without a mined set, or with both
/// trade-offs at zero, this is exactly the undefended step.
pub fn defended_client_step(
    model: &GlobalModel,
    user: &[f64],
    samples: &[(usize, f64)],
    popular: Option<&PopularSet>,
    beta: f64,
    gamma: f64,
) -> ClientStep {
    let mut step = model.client_loss_and_grads(user, samples);
    let popular = match popular {
        Some(p) if !p.is_empty() && (beta != 0.0 || gamma != 0.0) => p,
        _ => return step,
    };
    let items: Vec<usize> = samples.iter().map(|s| s.0).collect();
    let reg = defense_regularizers(model, user, popular, &items);
    step.loss -= beta * reg.re1 + gamma * reg.re2;
    for (j, g) in reg.item_grads {
        let dst = step
            .update
            .items
            .get_mut(&j)
            .expect("regularized item is in the training set");
        for (d, x) in dst.iter_mut().zip(g) {
            *d -= beta * x;
        }
    }
    for (d, x) in step.user_grad.iter_mut().zip(reg.user_grad) {
        *d -= gamma * x;
    }
    step
}
