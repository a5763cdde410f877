//! Interaction functions for the two model families and their exact
//! backward passes.
//!
//! MF scores a pair with `sigmoid(u·v)` (or the clamped raw dot product when
//! [`MfLink::RawClamped`] is selected). DL concatenates `u ⊕ v`, runs it
//! through a ReLU tower and projects onto `h` before the sigmoid.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelFamily {
    Mf,
    Dl,
}

/// How MF turns a dot product into a probability.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MfLink {
    #[default]
    Sigmoid,
    RawClamped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub family: ModelFamily,
    pub dim: usize,
    /// Hidden widths of the DL tower; the first layer takes `2 * dim` inputs.
    pub hidden: Vec<usize>,
    pub mf_link: MfLink,
    pub init_std: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            family: ModelFamily::Mf,
            dim: 32,
            hidden: vec![32, 16, 8],
            mf_link: MfLink::Sigmoid,
            init_std: 0.01,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Binary cross-entropy of a probability against a 0/1 label, with clamping.
pub fn bce(prob: f64, label: f64) -> f64 {
    let p = prob.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
}

/// Fully connected layer, `weight` stored row-major as `outputs × inputs`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn affine(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| dot(row, x) + b)
            .collect()
    }
}

/// ReLU tower plus projection vector. The same shape doubles as its own
/// gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub projection: Vec<f64>,
}

struct MlpTrace {
    /// Input to each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Vec<f64>>,
    /// Output of the last ReLU.
    top: Vec<f64>,
}

impl Mlp {
    pub fn zeros(input: usize, hidden: &[usize]) -> Self {
        let mut layers = Vec::with_capacity(hidden.len());
        let mut width = input;
        for &h in hidden {
            layers.push(Dense::zeros(width, h));
            width = h;
        }
        Mlp {
            layers,
            projection: vec![0.0; width],
        }
    }

    pub fn random<R: Rng + ?Sized>(input: usize, hidden: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("valid std");
        let mut mlp = Mlp::zeros(input, hidden);
        for layer in &mut mlp.layers {
            layer
                .weight
                .iter_mut()
                .for_each(|w| *w = normal.sample(rng));
        }
        mlp.projection
            .iter_mut()
            .for_each(|w| *w = normal.sample(rng));
        mlp
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.inputs, l.outputs))
                .collect(),
            projection: vec![0.0; self.projection.len()],
        }
    }

    pub fn input_width(&self) -> usize {
        self.layers
            .first()
            .map_or(self.projection.len(), |l| l.inputs)
    }

    /// Layer widths, input first.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_width()];
        w.extend(self.layers.iter().map(|l| l.outputs));
        w
    }

    /// Named flat views of every tensor: `W1, b1, …, WL, bL, h`.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 1);
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("W{}", l + 1), layer.weight.as_slice()));
            out.push((format!("b{}", l + 1), layer.bias.as_slice()));
        }
        out.push(("h".to_string(), self.projection.as_slice()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 1);
        for layer in &mut self.layers {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        out.push(&mut self.projection);
        out
    }

    fn forward(&self, x: &[f64]) -> (f64, MlpTrace) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut act = x.to_vec();
        for layer in &self.layers {
            let z = layer.affine(&act);
            inputs.push(act);
            act = z.iter().map(|&v| v.max(0.0)).collect();
            pre.push(z);
        }
        let logit = dot(&self.projection, &act);
        (
            logit,
            MlpTrace {
                inputs,
                pre,
                top: act,
            },
        )
    }

    /// Accumulates `dlogit`-scaled parameter gradients into `grad` and returns
    /// the gradient with respect to the input.
    fn backward(&self, trace: &MlpTrace, dlogit: f64, grad: &mut Mlp) -> Vec<f64> {
        axpy(dlogit, &trace.top, &mut grad.projection);
        let mut delta: Vec<f64> = self.projection.iter().map(|h| h * dlogit).collect();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            for (d, z) in delta.iter_mut().zip(&trace.pre[l]) {
                if *z <= 0.0 {
                    *d = 0.0;
                }
            }
            let input = &trace.inputs[l];
            let g = &mut grad.layers[l];
            for (o, &d) in delta.iter().enumerate() {
                if d != 0.0 {
                    axpy(
                        d,
                        input,
                        &mut g.weight[o * layer.inputs..(o + 1) * layer.inputs],
                    );
                    g.bias[o] += d;
                }
            }
            let mut next = vec![0.0; layer.inputs];
            for (o, &d) in delta.iter().enumerate() {
                if d != 0.0 {
                    axpy(
                        d,
                        &layer.weight[o * layer.inputs..(o + 1) * layer.inputs],
                        &mut next,
                    );
                }
            }
            delta = next;
        }
        delta
    }

    fn add_scaled(&mut self, alpha: f64, other: &Mlp) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            axpy(alpha, src.1, dst);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

/// Gradients uploaded by one client (or produced by aggregation).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientUpdate {
    pub items: BTreeMap<usize, Vec<f64>>,
    pub mlp: Option<Mlp>,
}

impl GradientUpdate {
    pub fn is_empty(&self) -> bool {
        self.items.is_empty() && self.mlp.is_none()
    }

    pub fn is_finite(&self) -> bool {
        self.items.values().all(|g| g.iter().all(|v| v.is_finite()))
            && self.mlp.as_ref().is_none_or(Mlp::is_finite)
    }
}

/// Loss and gradients of one client's local objective.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientStep {
    pub loss: f64,
    pub update: GradientUpdate,
    pub user_grad: Vec<f64>,
}

/// Server-side global parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalModel {
    pub family: ModelFamily,
    pub mf_link: MfLink,
    pub dim: usize,
    pub num_items: usize,
    /// Row-major `num_items × dim`.
    pub item_embeddings: Vec<f64>,
    pub mlp: Option<Mlp>,
}

impl GlobalModel {
    pub fn init<R: Rng + ?Sized>(spec: &ModelSpec, num_items: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, spec.init_std).expect("valid init std");
        let item_embeddings = (0..num_items * spec.dim)
            .map(|_| normal.sample(rng))
            .collect();
        let mlp = match spec.family {
            ModelFamily::Mf => None,
            ModelFamily::Dl => Some(Mlp::random(2 * spec.dim, &spec.hidden, spec.init_std, rng)),
        };
        GlobalModel {
            family: spec.family,
            mf_link: spec.mf_link,
            dim: spec.dim,
            num_items,
            item_embeddings,
            mlp,
        }
    }

    pub fn item(&self, j: usize) -> &[f64] {
        &self.item_embeddings[j * self.dim..(j + 1) * self.dim]
    }

    pub fn item_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.item_embeddings[j * self.dim..(j + 1) * self.dim]
    }

    fn check_dims(&self, u: &[f64], v: &[f64]) {
        assert!(
            u.len() == self.dim && v.len() == self.dim,
            "embedding dimension mismatch: model {} vs u {} / v {}",
            self.dim,
            u.len(),
            v.len()
        );
    }

    fn concat(u: &[f64], v: &[f64]) -> Vec<f64> {
        let mut x = Vec::with_capacity(u.len() + v.len());
        x.extend_from_slice(u);
        x.extend_from_slice(v);
        x
    }

    /// Pre-link value: `u·v` for MF, `h·φ_L(…)` for DL.
    pub fn logit(&self, u: &[f64], v: &[f64]) -> f64 {
        self.check_dims(u, v);
        match &self.mlp {
            None => dot(u, v),
            Some(mlp) => mlp.forward(&Self::concat(u, v)).0,
        }
    }

    fn link(&self, logit: f64) -> f64 {
        match (self.family, self.mf_link) {
            (ModelFamily::Mf, MfLink::RawClamped) => logit.clamp(PROB_EPS, 1.0 - PROB_EPS),
            _ => sigmoid(logit),
        }
    }

    /// Predicted preference score in (0, 1).
    pub fn predict(&self, u: &[f64], v: &[f64]) -> f64 {
        self.link(self.logit(u, v))
    }

    /// A value that orders items exactly like [`Self::predict`] but does not
    /// saturate for large sigmoid logits.
    pub fn ranking_score(&self, u: &[f64], v: &[f64]) -> f64 {
        match (self.family, self.mf_link) {
            (ModelFamily::Mf, MfLink::RawClamped) => self.predict(u, v),
            _ => self.logit(u, v),
        }
    }

    /// BCE loss of one pair and its derivative with respect to the logit.
    pub fn pair_bce(&self, u: &[f64], v: &[f64], label: f64) -> (f64, f64) {
        let s = self.logit(u, v);
        let p = self.link(s);
        let loss = bce(p, label);
        let dlogit = match (self.family, self.mf_link) {
            (ModelFamily::Mf, MfLink::RawClamped) => {
                if s > PROB_EPS && s < 1.0 - PROB_EPS {
                    (p - label) / (p * (1.0 - p))
                } else {
                    0.0
                }
            }
            _ => p - label,
        };
        (loss, dlogit)
    }

    /// Backpropagates `dlogit` into the user, item and (DL) tower gradients.
    pub fn backprop_pair(
        &self,
        u: &[f64],
        v: &[f64],
        dlogit: f64,
        grad_u: &mut [f64],
        grad_v: &mut [f64],
        grad_mlp: Option<&mut Mlp>,
    ) {
        self.check_dims(u, v);
        match &self.mlp {
            None => {
                axpy(dlogit, v, grad_u);
                axpy(dlogit, u, grad_v);
            }
            Some(mlp) => {
                let (_, trace) = mlp.forward(&Self::concat(u, v));
                let mut scratch;
                let g = match grad_mlp {
                    Some(g) => g,
                    None => {
                        scratch = mlp.zeros_like();
                        &mut scratch
                    }
                };
                let dx = mlp.backward(&trace, dlogit, g);
                axpy(1.0, &dx[..self.dim], grad_u);
                axpy(1.0, &dx[self.dim..], grad_v);
            }
        }
    }

    /// Mean BCE over `samples` (item, label) and its exact gradients.
    pub fn client_loss_and_grads(&self, user: &[f64], samples: &[(usize, f64)]) -> ClientStep {
        assert!(!samples.is_empty(), "client training set is empty");
        let scale = 1.0 / samples.len() as f64;
        let mut user_grad = vec![0.0; self.dim];
        let mut mlp_grad = self.mlp.as_ref().map(Mlp::zeros_like);
        let mut items = BTreeMap::new();
        let mut loss = 0.0;
        for &(j, label) in samples {
            let v = self.item(j);
            let (l, dlogit) = self.pair_bce(user, v, label);
            loss += l * scale;
            let gv = items.entry(j).or_insert_with(|| vec![0.0; self.dim]);
            self.backprop_pair(
                user,
                v,
                dlogit * scale,
                &mut user_grad,
                gv,
                mlp_grad.as_mut(),
            );
        }
        ClientStep {
            loss,
            update: GradientUpdate {
                items,
                mlp: mlp_grad,
            },
            user_grad,
        }
    }

    /// `θ ← θ − η·g` for every parameter the update carries. Rejects the whole
    /// update, leaving the model untouched, if any entry is non-finite.
    pub fn apply_update(&mut self, update: &GradientUpdate, eta: f64) -> Result<()> {
        for (&j, g) in &update.items {
            if j >= self.num_items {
                return Err(Error::config(format!("gradient for unknown item {j}")));
            }
            if g.len() != self.dim {
                return Err(Error::config(format!(
                    "gradient for item {j} has width {}",
                    g.len()
                )));
            }
            if let Some(k) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("item {j} component {k}")));
            }
        }
        if let Some(gm) = &update.mlp {
            for (name, t) in gm.tensors() {
                if let Some(k) = t.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("{name} entry {k}")));
                }
            }
        }
        for (&j, g) in &update.items {
            axpy(-eta, g, self.item_mut(j));
        }
        if let (Some(mlp), Some(gm)) = (self.mlp.as_mut(), update.mlp.as_ref()) {
            mlp.add_scaled(-eta, gm);
        }
        Ok(())
    }
}

/// Fresh user embedding drawn like the item embeddings.
pub fn init_user<R: Rng + ?Sized>(dim: usize, std: f64, rng: &mut R) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("valid init std");
    (0..dim).map(|_| normal.sample(rng)).collect()
}
