use fedrec_poison::attack::AttackKind;
use fedrec_poison::data::{build_dataset, InteractionRecord};
use fedrec_poison::fedsim::{prepare_dataset, run_experiment, select_round_users, Simulation};
use fedrec_poison::rng::{substream, Stream};
use fedrec_poison::ExperimentConfig;

fn small_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.data.synthetic.num_users = 120;
    c.data.synthetic.num_items = 60;
    c.data.synthetic.interactions_per_user = 10;
    c.model.dim = 8;
    c.federation.round_batch = 40;
    c.federation.rounds = 30;
    c.eval.every = 10;
    c
}

#[test]
fn zero_learning_rate_freezes_everything() {
    let mut c = small_config();
    c.federation.eta = 0.0;
    c.attack.malicious_ratio = 0.0;
    let ds = prepare_dataset(&c).unwrap();
    let mut sim = Simulation::new(c, ds).unwrap();
    let model = sim.model.clone();
    let users = sim.benign_embeddings();
    for _ in 0..5 {
        sim.run_round().unwrap();
    }
    assert_eq!(sim.model, model);
    assert_eq!(sim.benign_embeddings(), users);
}

#[test]
fn single_client_moves_only_its_item() {
    // One user with two interactions: item 3 is held out, item 1 is the only
    // training positive, and q = 0.4 rounds to zero negatives.
    let records = [
        InteractionRecord {
            user: 0,
            item: 1,
            rating: 5.0,
            timestamp: 1,
        },
        InteractionRecord {
            user: 0,
            item: 3,
            rating: 5.0,
            timestamp: 2,
        },
    ];
    let ds = build_dataset(&records, 5, 0.4, 0).unwrap();
    assert_eq!(ds.users[0].samples(), vec![(1, 1.0)]);

    let mut c = ExperimentConfig::default();
    c.model.dim = 4;
    c.attack.malicious_ratio = 0.0;
    c.federation.round_batch = 1;
    c.federation.eta = 0.7;
    c.data.q = 0.4;
    let mut sim = Simulation::new(c, ds).unwrap();
    let before = sim.model.clone();
    let user = sim.clients[0].embedding.clone();
    let step = before.client_loss_and_grads(&user, &[(1, 1.0)]);
    sim.run_round().unwrap();
    for j in 0..5 {
        if j == 1 {
            let want: Vec<f64> = before
                .item(1)
                .iter()
                .zip(&step.update.items[&1])
                .map(|(v, g)| v - 0.7 * g)
                .collect();
            assert_eq!(sim.model.item(1), want.as_slice());
        } else {
            assert_eq!(sim.model.item(j), before.item(j), "item {j} moved");
        }
    }
    let want_user: Vec<f64> = user
        .iter()
        .zip(&step.user_grad)
        .map(|(u, g)| u - 0.7 * g)
        .collect();
    assert_eq!(sim.clients[0].embedding, want_user);
}

#[test]
fn single_draw_selection_is_uniform() {
    let n = 20;
    let draws = 100_000;
    let mut counts = vec![0u64; n];
    for r in 0..draws {
        let picked = select_round_users(n, 1, &mut substream(9, Stream::Sampling, r)).unwrap();
        counts[picked[0]] += 1;
    }
    let p = 1.0 / n as f64;
    let mean = draws as f64 * p;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    for (i, &c) in counts.iter().enumerate() {
        assert!(
            (c as f64 - mean).abs() <= 3.0 * sigma,
            "client {i}: {c} draws vs {mean}"
        );
    }
    let chi2: f64 = counts
        .iter()
        .map(|&c| (c as f64 - mean).powi(2) / mean)
        .sum();
    // 99.9th percentile of chi-square with 19 degrees of freedom
    assert!(chi2 < 43.82, "chi-square {chi2}");
}

#[test]
fn selection_depends_only_on_seed_and_round() {
    let a = select_round_users(500, 64, &mut substream(3, Stream::Sampling, 11)).unwrap();
    let b = select_round_users(500, 64, &mut substream(3, Stream::Sampling, 11)).unwrap();
    let c = select_round_users(500, 64, &mut substream(3, Stream::Sampling, 12)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(a.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn results_do_not_depend_on_worker_count() {
    let mut c = small_config();
    c.attack.kind = AttackKind::PieckUea;
    c.attack.malicious_ratio = 0.1;
    c.defense.enabled = true;
    let one = run_experiment(&c, 1).unwrap();
    let four = run_experiment(&c, 4).unwrap();
    let again = run_experiment(&c, 1).unwrap();
    assert_eq!(one.metrics_csv(), four.metrics_csv());
    assert_eq!(one.metrics_csv(), again.metrics_csv());
    assert_eq!(one.model, four.model);
    assert_eq!(one.mined_csv(), four.mined_csv());
}

#[test]
fn attack_without_malicious_clients_is_vacuous() {
    let mut c = small_config();
    c.attack.malicious_ratio = 0.0;
    let quiet = run_experiment(&c, 1).unwrap();
    c.attack.kind = AttackKind::PieckUea;
    let attacked = run_experiment(&c, 1).unwrap();
    assert_eq!(quiet.model, attacked.model);
    assert_eq!(quiet.rows, attacked.rows);
    assert_eq!(attacked.num_malicious, 0);
}

#[test]
fn malicious_clients_stay_silent_while_mining() {
    let mut c = small_config();
    c.attack.kind = AttackKind::PieckIpe;
    c.attack.malicious_ratio = 0.2;
    let ds = prepare_dataset(&c).unwrap();
    let mut sim = Simulation::new(c, ds).unwrap();
    let log = sim.run_round().unwrap().clone();
    // nobody has three observations after one round
    assert!(log.targets.iter().all(|t| t.malicious == 0));
}

#[test]
fn oversized_batch_is_a_config_error() {
    let mut c = small_config();
    c.federation.round_batch = 10_000;
    let err = run_experiment(&c, 1).unwrap_err();
    assert!(err.is_config(), "{err}");
}

#[test]
fn evaluation_cadence_and_final_round() {
    let mut c = small_config();
    c.federation.rounds = 25;
    c.eval.every = 10;
    let report = run_experiment(&c, 1).unwrap();
    let rounds: Vec<usize> = report.rows.iter().map(|r| r.round).collect();
    assert_eq!(rounds, vec![10, 20, 25]);
    let csv = report.metrics_csv();
    assert!(
        csv.starts_with("round,er_at_k_pct,hr_at_k_pct,mean_loss,aggregator,attack,defense,seed\n")
    );
    assert_eq!(csv.lines().count(), 4);
}
