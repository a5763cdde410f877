//! Cosine similarity, rank weights and the softmax-based KL divergence
//! shared by the attacks, the regularization defense and the analytics.

use crate::model::dot;

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let denom = norm(a) * norm(b);
    if denom == 0.0 {
        0.0
    } else {
        dot(a, b) / denom
    }
}

/// Adds `scale · ∂cos(a, b)/∂b` into `out`.
pub fn add_cosine_grad_wrt_second(a: &[f64], b: &[f64], scale: f64, out: &mut [f64]) {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return;
    }
    let cos = dot(a, b) / (na * nb);
    let ca = scale / (na * nb);
    let cb = scale * cos / (nb * nb);
    for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
        *o += ca * x - cb * y;
    }
}

/// Linear inverse-rank weights `(m − r + 1) / Σ_s (m − s + 1)` for ranks 1..=m.
pub fn linear_rank_weights(m: usize) -> Vec<f64> {
    let total = (m * (m + 1)) as f64 / 2.0;
    (1..=m).map(|r| (m - r + 1) as f64 / total).collect()
}

/// Exponential inverse-rank weights `e^{−(r−1)}`, normalized over ranks 1..=m.
pub fn exponential_rank_weights(m: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..m).map(|r| (-(r as f64)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    log_softmax(x).into_iter().map(f64::exp).collect()
}

/// `KL(softmax(a) ‖ softmax(b))`, the divergence used between embeddings.
pub fn embedding_kl(a: &[f64], b: &[f64]) -> f64 {
    let la = log_softmax(a);
    let lb = log_softmax(b);
    la.iter()
        .zip(&lb)
        .map(|(pa, pb)| pa.exp() * (pa - pb))
        .sum::<f64>()
        .max(0.0)
}

/// Adds `scale · ∂KL(softmax(a) ‖ softmax(b))/∂b = scale · (softmax(b) − softmax(a))`.
pub fn add_kl_grad_wrt_second(a: &[f64], b: &[f64], scale: f64, out: &mut [f64]) {
    let pa = softmax(a);
    let pb = softmax(b);
    for ((o, x), y) in out.iter_mut().zip(&pa).zip(&pb) {
        *o += scale * (y - x);
    }
}
