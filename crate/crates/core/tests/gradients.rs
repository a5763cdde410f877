//! Analytic gradients and losses checked against central differences and
//! hand evaluations.

use std::time::Instant;

use fedrec_poison::attack::{pieckipe_loss, pieckuea_loss, PopularSet};
use fedrec_poison::defense::defense_regularizers;
use fedrec_poison::model::{GlobalModel, MfLink, ModelFamily, ModelSpec};
use fedrec_poison::selfcheck::{self, central_difference, close, run_selfcheck};
use fedrec_poison::similarity::{
    embedding_kl, exponential_rank_weights, linear_rank_weights, softmax,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mf_model(rows: &[&[f64]]) -> GlobalModel {
    GlobalModel {
        family: ModelFamily::Mf,
        mf_link: MfLink::Sigmoid,
        dim: rows[0].len(),
        num_items: rows.len(),
        item_embeddings: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        mlp: None,
    }
}

#[test]
fn selfcheck_hundred_instances_per_family() {
    let started = Instant::now();
    let report = run_selfcheck(100, 11);
    assert!(report.passed(), "{:#?}", report.failures);
    // at least the MF item and user coordinates of every instance
    assert!(
        report.checked > 200 * 6 * 8,
        "only {} entries checked",
        report.checked
    );
    assert!(started.elapsed().as_secs_f64() < 30.0);
}

#[test]
fn mf_item_gradient_hand_value() {
    let model = mf_model(&[&[0.0, 0.0]]);
    let step = model.client_loss_and_grads(&[1.0, 0.0], &[(0, 1.0)]);
    assert_eq!(step.update.items[&0], vec![-0.5, 0.0]);
    assert!((step.loss - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn ipe_hand_values() {
    let aligned = mf_model(&[&[0.3, 0.4], &[0.6, 0.8]]);
    let p = PopularSet::from_ordered(vec![0]);
    assert!((pieckipe_loss(&aligned, &p, &[1], 1.0) + 1.0).abs() < 1e-12);
    let orthogonal = mf_model(&[&[1.0, 0.0], &[0.0, 2.0]]);
    assert_eq!(pieckipe_loss(&orthogonal, &p, &[1], 1.0), 0.0);
}

/// Direct transcription of the IPE loss with explicit loops, for comparison.
fn ipe_reference(rows: &[Vec<f64>], popular: &[usize], target: usize, lambda: f64) -> f64 {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let vj = &rows[target];
    let pos: Vec<usize> = popular
        .iter()
        .copied()
        .filter(|&k| cos(&rows[k], vj) > 0.0)
        .collect();
    let neg: Vec<usize> = popular
        .iter()
        .copied()
        .filter(|&k| cos(&rows[k], vj) <= 0.0)
        .collect();
    let mut total = 0.0;
    for subset in [pos, neg] {
        let m = subset.len();
        if m == 0 {
            continue;
        }
        let norm: f64 = (1..=m).map(|r| (m - r + 1) as f64).sum();
        let mut term = 0.0;
        for (r, &k) in subset.iter().enumerate() {
            term += ((m - r) as f64 / norm) * cos(&rows[k], vj);
        }
        total += lambda / m as f64 * term;
    }
    -total
}

#[test]
fn uea_hand_value() {
    let m = mf_model(&[&[0.0, 0.0], &[0.0, 0.0], &[3.0, -1.0]]);
    let p = PopularSet::from_ordered(vec![0, 1]);
    assert!((pieckuea_loss(&m, &p, &[2]) - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn re2_vanishes_when_user_equals_popular_items() {
    let m = mf_model(&[&[0.2, -0.1, 0.4], &[0.2, -0.1, 0.4], &[1.0, 1.0, 1.0]]);
    let p = PopularSet::from_ordered(vec![0, 1]);
    let reg = defense_regularizers(&m, &[0.2, -0.1, 0.4], &p, &[2]);
    assert!(reg.re2.abs() < 1e-15);
}

#[test]
fn dl_selfcheck_covers_tower_parameters() {
    let spec = ModelSpec {
        family: ModelFamily::Dl,
        dim: 8,
        hidden: vec![8, 4],
        init_std: 0.5,
        ..ModelSpec::default()
    };
    let model = GlobalModel::init(&spec, 12, &mut ChaCha8Rng::seed_from_u64(3));
    assert_eq!(model.mlp.as_ref().unwrap().widths(), vec![16, 8, 4]);
    let report = selfcheck::check_client_loss(&model, &[0.3; 8], &[(0, 1.0), (5, 0.0), (7, 1.0)]);
    assert!(report.passed(), "{:?}", report.failures);
    // 3 items × 8 + 8 user coordinates + W1 128 + b1 8 + W2 32 + b2 4 + h 4
    assert_eq!(report.checked, 24 + 8 + 128 + 8 + 32 + 4 + 4);
}

fn vec_strategy(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, dim)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ipe_matches_reference(rows in prop::collection::vec(vec_strategy(4), 6), lambda in 0.05f64..=1.0) {
        prop_assume!(rows.iter().all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-3));
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let model = mf_model(&refs);
        let popular = vec![2, 0, 4, 1];
        let got = pieckipe_loss(&model, &PopularSet::from_ordered(popular.clone()), &[5], lambda);
        let want = ipe_reference(&rows, &popular, 5, lambda);
        prop_assert!((got - want).abs() < 1e-12, "{} vs {}", got, want);
    }

    #[test]
    fn bce_user_gradient_matches_differences(
        rows in prop::collection::vec(vec_strategy(3), 4),
        user in vec_strategy(3),
        labels in prop::collection::vec(any::<bool>(), 4),
    ) {
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let model = mf_model(&refs);
        let samples: Vec<(usize, f64)> = labels.iter().enumerate().map(|(j, &b)| (j, f64::from(u8::from(b)))).collect();
        let step = model.client_loss_and_grads(&user, &samples);
        let mut u = user.clone();
        for k in 0..3 {
            let num = central_difference(&mut u, k, |x| model.client_loss_and_grads(x, &samples).loss);
            prop_assert!(close(step.user_grad[k], num), "du[{}]: {} vs {}", k, step.user_grad[k], num);
        }
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_self(a in vec_strategy(5), b in vec_strategy(5)) {
        prop_assert!(embedding_kl(&a, &b) >= 0.0);
        prop_assert!(embedding_kl(&a, &a).abs() < 1e-15);
        let s: f64 = softmax(&a).iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_weights_are_normalized_and_decreasing(m in 1usize..40) {
        for w in [linear_rank_weights(m), exponential_rank_weights(m)] {
            prop_assert_eq!(w.len(), m);
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(w.windows(2).all(|p| p[0] > p[1]));
        }
    }

    #[test]
    fn ipe_loss_is_bounded_by_lambda(rows in prop::collection::vec(vec_strategy(3), 5), lambda in 0.05f64..=1.0) {
        prop_assume!(rows.iter().all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-3));
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let model = mf_model(&refs);
        let l = pieckipe_loss(&model, &PopularSet::from_ordered(vec![0, 1, 2, 3]), &[4], lambda);
        prop_assert!(l.abs() <= 2.0 * lambda + 1e-12);
    }
}
