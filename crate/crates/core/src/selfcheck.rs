//! Central finite-difference verification of every analytic gradient:
//! the local BCE loss, L_IPE, L_UEA and both defense regularizers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attack::{
    pieckipe_gradients, pieckipe_loss, pieckuea_gradients, pieckuea_loss, MultiTarget, PopularSet,
};
use crate::defense::defense_regularizers;
use crate::model::{GlobalModel, ModelFamily, ModelSpec};

pub const FD_STEP: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-5;
pub const ABS_TOL: f64 = 1e-8;

/// Whether an analytic derivative agrees with its numerical estimate.
pub fn close(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= ABS_TOL || diff <= REL_TOL * analytic.abs().max(numeric.abs())
}

/// Central difference of `f` along coordinate `x[k]`.
pub fn central_difference(x: &mut [f64], k: usize, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[k];
    x[k] = orig + FD_STEP;
    let plus = f(x);
    x[k] = orig - FD_STEP;
    let minus = f(x);
    x[k] = orig;
    (plus - minus) / (2.0 * FD_STEP)
}

#[derive(Clone, Debug, Default)]
pub struct SelfCheckReport {
    pub checked: usize,
    pub failures: Vec<String>,
}

impl SelfCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    fn record(&mut self, what: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        self.checked += 1;
        if !close(analytic, numeric) && self.failures.len() < 50 {
            self.failures.push(format!(
                "{}: analytic {analytic:e} vs numeric {numeric:e}",
                what()
            ));
        }
    }

    fn merge(&mut self, other: SelfCheckReport) {
        self.checked += other.checked;
        self.failures.extend(other.failures);
    }
}

fn random_model(family: ModelFamily, num_items: usize, rng: &mut ChaCha8Rng) -> GlobalModel {
    let spec = ModelSpec {
        family,
        dim: 8,
        hidden: vec![8, 4],
        init_std: 0.5,
        ..ModelSpec::default()
    };
    let mut model = GlobalModel::init(&spec, num_items, rng);
    if let Some(mlp) = model.mlp.as_mut() {
        let normal = Normal::new(0.0, 0.3).unwrap();
        for layer in &mut mlp.layers {
            layer.bias.iter_mut().for_each(|b| *b = normal.sample(rng));
        }
    }
    model
}

fn random_vec(dim: usize, std: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, std).unwrap();
    (0..dim).map(|_| normal.sample(rng)).collect()
}

/// Local BCE loss: item, user and (DL) tower gradients.
pub fn check_client_loss(
    model: &GlobalModel,
    user: &[f64],
    samples: &[(usize, f64)],
) -> SelfCheckReport {
    let mut report = SelfCheckReport::default();
    let step = model.client_loss_and_grads(user, samples);

    let mut u = user.to_vec();
    for k in 0..u.len() {
        let num = central_difference(&mut u, k, |x| model.client_loss_and_grads(x, samples).loss);
        report.record(|| format!("bce du[{k}]"), step.user_grad[k], num);
    }
    let mut m = model.clone();
    for (&j, g) in &step.update.items {
        for c in 0..model.dim {
            let idx = j * model.dim + c;
            let orig = m.item_embeddings[idx];
            m.item_embeddings[idx] = orig + FD_STEP;
            let plus = m.client_loss_and_grads(user, samples).loss;
            m.item_embeddings[idx] = orig - FD_STEP;
            let minus = m.client_loss_and_grads(user, samples).loss;
            m.item_embeddings[idx] = orig;
            report.record(
                || format!("bce dv[{j}][{c}]"),
                g[c],
                (plus - minus) / (2.0 * FD_STEP),
            );
        }
    }
    if let Some(gm) = &step.update.mlp {
        let names: Vec<String> = gm.tensors().into_iter().map(|(n, _)| n).collect();
        let analytic: Vec<Vec<f64>> = gm.tensors().into_iter().map(|(_, t)| t.to_vec()).collect();
        for (t, name) in names.iter().enumerate() {
            for i in 0..analytic[t].len() {
                let eval = |m: &GlobalModel| m.client_loss_and_grads(user, samples).loss;
                let orig = m.mlp.as_mut().unwrap().tensors_mut()[t][i];
                m.mlp.as_mut().unwrap().tensors_mut()[t][i] = orig + FD_STEP;
                let plus = eval(&m);
                m.mlp.as_mut().unwrap().tensors_mut()[t][i] = orig - FD_STEP;
                let minus = eval(&m);
                m.mlp.as_mut().unwrap().tensors_mut()[t][i] = orig;
                report.record(
                    || format!("bce d{name}[{i}]"),
                    analytic[t][i],
                    (plus - minus) / (2.0 * FD_STEP),
                );
            }
        }
    }
    report
}

/// Finite differences of `loss(model)` against `analytic[j]` for target rows.
fn check_item_rows(
    label: &str,
    model: &GlobalModel,
    rows: &[(usize, Vec<f64>)],
    loss: impl Fn(&GlobalModel) -> f64,
) -> SelfCheckReport {
    let mut report = SelfCheckReport::default();
    let mut m = model.clone();
    for (j, g) in rows {
        for c in 0..model.dim {
            let idx = j * model.dim + c;
            let orig = m.item_embeddings[idx];
            m.item_embeddings[idx] = orig + FD_STEP;
            let plus = loss(&m);
            m.item_embeddings[idx] = orig - FD_STEP;
            let minus = loss(&m);
            m.item_embeddings[idx] = orig;
            report.record(
                || format!("{label} dv[{j}][{c}]"),
                g[c],
                (plus - minus) / (2.0 * FD_STEP),
            );
        }
    }
    report
}

pub fn check_ipe(
    model: &GlobalModel,
    popular: &PopularSet,
    targets: &[usize],
    lambda: f64,
) -> SelfCheckReport {
    let g = pieckipe_gradients(model, popular, targets, lambda, MultiTarget::Joint);
    let rows: Vec<(usize, Vec<f64>)> = g.items.into_iter().collect();
    check_item_rows("ipe", model, &rows, |m| {
        pieckipe_loss(m, popular, targets, lambda)
    })
}

/// A single full-batch internal step uploads exactly ∇L_UEA.
pub fn check_uea(
    model: &GlobalModel,
    popular: &PopularSet,
    targets: &[usize],
    eta: f64,
) -> SelfCheckReport {
    let g = pieckuea_gradients(
        model,
        popular,
        targets,
        eta,
        popular.len(),
        1,
        MultiTarget::Joint,
    );
    let rows: Vec<(usize, Vec<f64>)> = g.items.into_iter().collect();
    check_item_rows("uea", model, &rows, |m| pieckuea_loss(m, popular, targets))
}

pub fn check_regularizers(
    model: &GlobalModel,
    user: &[f64],
    popular: &PopularSet,
    items: &[usize],
) -> SelfCheckReport {
    let reg = defense_regularizers(model, user, popular, items);
    let rows: Vec<(usize, Vec<f64>)> = reg.item_grads.clone().into_iter().collect();
    let mut report = check_item_rows("re1", model, &rows, |m| {
        defense_regularizers(m, user, popular, items).re1
    });
    let mut u = user.to_vec();
    for k in 0..u.len() {
        let num = central_difference(&mut u, k, |x| {
            defense_regularizers(model, x, popular, items).re2
        });
        report.record(|| format!("re2 du[{k}]"), reg.user_grad[k], num);
    }
    report
}

/// Runs `instances` random instances per model family.
pub fn run_selfcheck(instances: usize, seed: u64) -> SelfCheckReport {
    let mut report = SelfCheckReport::default();
    let num_items = 24;
    for family in [ModelFamily::Mf, ModelFamily::Dl] {
        for i in 0..instances {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((i as u64) << 8) ^ family as u64);
            let model = random_model(family, num_items, &mut rng);
            let user = random_vec(model.dim, 0.5, &mut rng);

            let mut items: Vec<usize> = (0..num_items).collect();
            for k in (1..items.len()).rev() {
                items.swap(k, rng.random_range(0..=k));
            }
            let samples: Vec<(usize, f64)> = items[..6]
                .iter()
                .enumerate()
                .map(|(n, &j)| (j, if n % 2 == 0 { 1.0 } else { 0.0 }))
                .collect();
            report.merge(check_client_loss(&model, &user, &samples));

            let popular = PopularSet::from_ordered(items[6..16].to_vec());
            let targets = [items[16], items[17]];
            let lambda = rng.random_range(0.1..=1.0);
            report.merge(check_ipe(&model, &popular, &targets, lambda));
            report.merge(check_uea(&model, &popular, &targets, 0.5));

            let training: Vec<usize> = items[..6].iter().chain(&items[6..8]).copied().collect();
            report.merge(check_regularizers(
                &model,
                &user,
                &PopularSet::from_ordered(items[6..11].to_vec()),
                &training,
            ));
        }
    }
    report
}
