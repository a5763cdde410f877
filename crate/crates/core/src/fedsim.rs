//! The federated round engine.
//!
//! Each round the server samples `round_batch` clients, they compute uploads
//! in parallel against a read-only snapshot of the global model, and the
//! uploads are aggregated in client-id order and applied once. Benign
//! clients also take their own local step on `u_i`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use log::info;
use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;

use crate::attack::{AttackContext, AttackKind, AttackerState, OracleAccess};
use crate::config::ExperimentConfig;
use crate::data::{build_dataset, load_interactions, InteractionDataset, LogFormat};
use crate::defense::defended_client_step;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvaluationReport};
use crate::model::{dot, init_user, GlobalModel, GradientUpdate};
use crate::rng::{substream, Stream};
use crate::synthetic::generate_synthetic;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Benign,
    Malicious,
}

/// One simulated client. Benign client `i` owns `dataset.users[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientState {
    pub id: usize,
    pub role: Role,
    pub embedding: Vec<f64>,
    pub times_sampled: usize,
    /// Popular-item mining state: the attack's for malicious clients, the
    /// defense's for benign ones.
    pub miner: AttackerState,
}

/// Poisoning bookkeeping for one target in one round.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetRoundStats {
    pub item: usize,
    pub malicious: usize,
    pub total: usize,
    /// Inner product of the aggregated gradient with the mean malicious one.
    pub alignment: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundLog {
    pub round: usize,
    pub participants: Vec<usize>,
    /// L2 norm of the aggregated gradient per parameter group
    /// (`items`, then each tower tensor).
    pub aggregated_norms: Vec<(String, f64)>,
    pub mean_loss: f64,
    pub fallbacks: usize,
    pub targets: Vec<TargetRoundStats>,
    pub evaluation: Option<EvaluationReport>,
    pub wall_time: Duration,
}

/// Samples `batch` distinct clients uniformly, returned in ascending order.
pub fn select_round_users<R: Rng + ?Sized>(
    num_users: usize,
    batch: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if batch > num_users {
        return Err(Error::config(format!(
            "round batch {batch} exceeds {num_users} users"
        )));
    }
    let mut ids = index::sample(rng, num_users, batch).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Number of malicious clients so that they make up `ratio` of all clients.
pub fn malicious_count(benign: usize, ratio: f64) -> usize {
    (ratio * benign as f64 / (1.0 - ratio)).round() as usize
}

/// Cold targets: uniformly among items with the fewest interactions,
/// moving to the next count level only when a level is exhausted.
pub fn select_targets(dataset: &InteractionDataset, count: usize, seed: u64) -> Vec<usize> {
    let counts = dataset.item_counts();
    let levels: BTreeSet<usize> = counts.iter().copied().collect();
    let mut rng = substream(seed, Stream::Targets, 0);
    let mut chosen = Vec::with_capacity(count);
    for level in levels {
        if chosen.len() == count {
            break;
        }
        let pool: Vec<usize> = (0..counts.len()).filter(|&j| counts[j] == level).collect();
        let take = (count - chosen.len()).min(pool.len());
        let mut picks: Vec<usize> = index::sample(&mut rng, pool.len(), take)
            .into_iter()
            .map(|k| pool[k])
            .collect();
        picks.sort_unstable();
        chosen.extend(picks);
    }
    chosen
}

/// Loads or generates the configured interaction data and splits it.
pub fn prepare_dataset(config: &ExperimentConfig) -> Result<InteractionDataset> {
    let data = &config.data;
    let (records, num_items) = if data.is_synthetic() {
        let log = generate_synthetic(&data.synthetic)?;
        let n = log.log.num_items();
        (log.log.records, n)
    } else {
        let log = load_interactions(&data.source, LogFormat::TabSeparated)?;
        let n = log.num_items();
        (log.records, n)
    };
    build_dataset(&records, num_items, data.q, config.seed)
}

struct ClientOutput {
    id: usize,
    role: Role,
    update: Option<GradientUpdate>,
    loss: Option<f64>,
}

pub struct Simulation {
    pub config: ExperimentConfig,
    pub dataset: InteractionDataset,
    pub model: GlobalModel,
    pub clients: Vec<ClientState>,
    pub targets: Vec<usize>,
    pub logs: Vec<RoundLog>,
}

impl Simulation {
    pub fn new(config: ExperimentConfig, dataset: InteractionDataset) -> Result<Self> {
        config.validate()?;
        let benign = dataset.num_users();
        let malicious = malicious_count(benign, config.attack.malicious_ratio);
        if config.attack.kind != AttackKind::None
            && config.attack.malicious_ratio > 0.0
            && malicious == 0
        {
            return Err(Error::config(format!(
                "malicious_ratio {} yields no malicious client among {benign} users",
                config.attack.malicious_ratio
            )));
        }
        let targets = if config.attack.targets.is_empty() {
            select_targets(&dataset, config.attack.num_targets, config.seed)
        } else {
            config.attack.targets.clone()
        };
        if let Some(&bad) = targets.iter().find(|&&t| t >= dataset.num_items) {
            return Err(Error::config(format!("target item {bad} out of range")));
        }

        let mut init = substream(config.seed, Stream::Init, 0);
        let model = GlobalModel::init(&config.model, dataset.num_items, &mut init);
        let clients = (0..benign + malicious)
            .map(|id| ClientState {
                id,
                role: if id < benign {
                    Role::Benign
                } else {
                    Role::Malicious
                },
                embedding: init_user(config.model.dim, config.model.init_std, &mut init),
                times_sampled: 0,
                miner: AttackerState::default(),
            })
            .collect();
        info!(
            "{benign} benign + {malicious} malicious clients, {} items, targets {targets:?}",
            dataset.num_items
        );
        Ok(Simulation {
            config,
            dataset,
            model,
            clients,
            targets,
            logs: Vec::new(),
        })
    }

    pub fn rounds_done(&self) -> usize {
        self.logs.len()
    }

    pub fn num_benign(&self) -> usize {
        self.dataset.num_users()
    }

    pub fn benign_embeddings(&self) -> Vec<Vec<f64>> {
        self.clients[..self.num_benign()]
            .iter()
            .map(|c| c.embedding.clone())
            .collect()
    }

    /// Evaluates the current model; the report's round is the number of
    /// completed rounds.
    pub fn evaluate(&self) -> EvaluationReport {
        evaluate(
            &self.model,
            &self.benign_embeddings(),
            &self.dataset,
            &self.targets,
            self.config.eval.k,
            self.rounds_done(),
        )
    }

    fn should_evaluate(&self, completed: usize) -> bool {
        completed.is_multiple_of(self.config.eval.every)
            || completed == self.config.federation.rounds
    }

    /// Runs the next round and returns its log.
    pub fn run_round(&mut self) -> Result<&RoundLog> {
        let started = Instant::now();
        let r = self.rounds_done();
        let cfg = &self.config;
        let mut rng = substream(cfg.seed, Stream::Sampling, r as u64);
        let participants =
            select_round_users(self.clients.len(), cfg.federation.round_batch, &mut rng)?;
        let mut selected = vec![false; self.clients.len()];
        participants.iter().for_each(|&i| selected[i] = true);

        let oracle_users =
            (cfg.attack.kind == AttackKind::Oracle).then(|| self.benign_embeddings());
        let model = &self.model;
        let dataset = &self.dataset;
        let targets = &self.targets;
        let eta = cfg.federation.eta;
        let defense = &cfg.defense;
        let attack = &cfg.attack;

        let outputs: Vec<ClientOutput> = self
            .clients
            .par_iter_mut()
            .filter(|c| selected[c.id])
            .map(|client| {
                client.times_sampled += 1;
                match client.role {
                    Role::Benign => {
                        let samples = dataset.users[client.id].samples();
                        let step = if defense.enabled {
                            if client.miner.popular.is_none() {
                                client
                                    .miner
                                    .mining
                                    .observe(&model.item_embeddings, model.dim);
                                client.miner.popular = client.miner.mining.finalize(
                                    defense.mining_rounds,
                                    defense.mined_count,
                                    &BTreeSet::new(),
                                );
                            }
                            defended_client_step(
                                model,
                                &client.embedding,
                                &samples,
                                client.miner.popular.as_ref(),
                                defense.beta,
                                defense.gamma,
                            )
                        } else {
                            model.client_loss_and_grads(&client.embedding, &samples)
                        };
                        for (u, g) in client.embedding.iter_mut().zip(&step.user_grad) {
                            *u -= eta * g;
                        }
                        ClientOutput {
                            id: client.id,
                            role: Role::Benign,
                            update: Some(step.update),
                            loss: Some(step.loss),
                        }
                    }
                    Role::Malicious => {
                        let ctx = AttackContext {
                            model,
                            eta,
                            kind: attack.kind,
                            params: &attack.params,
                            targets,
                            oracle: oracle_users
                                .as_deref()
                                .map(|u| OracleAccess { benign_users: u }),
                        };
                        ClientOutput {
                            id: client.id,
                            role: Role::Malicious,
                            update: client.miner.act(&ctx),
                            loss: None,
                        }
                    }
                }
            })
            .collect();
        debug_assert!(outputs.windows(2).all(|w| w[0].id < w[1].id));

        let uploads: Vec<&GradientUpdate> =
            outputs.iter().filter_map(|o| o.update.as_ref()).collect();
        let (aggregated, stats) = cfg.aggregator.aggregate(&uploads);

        let target_stats = targets
            .iter()
            .map(|&t| {
                let mut malicious = 0;
                let mut total = 0;
                let mut mal_sum = vec![0.0; model.dim];
                for o in &outputs {
                    if let Some(g) = o.update.as_ref().and_then(|u| u.items.get(&t)) {
                        total += 1;
                        if o.role == Role::Malicious {
                            malicious += 1;
                            mal_sum.iter_mut().zip(g).for_each(|(s, x)| *s += x);
                        }
                    }
                }
                let alignment = match aggregated.items.get(&t) {
                    Some(agg) if malicious > 0 => Some(dot(agg, &mal_sum) / malicious as f64),
                    _ => None,
                };
                TargetRoundStats {
                    item: t,
                    malicious,
                    total,
                    alignment,
                }
            })
            .collect();

        let mut aggregated_norms = vec![(
            "items".to_string(),
            aggregated
                .items
                .values()
                .map(|g| dot(g, g))
                .sum::<f64>()
                .sqrt(),
        )];
        if let Some(mlp) = &aggregated.mlp {
            aggregated_norms.extend(
                mlp.tensors()
                    .into_iter()
                    .map(|(n, t)| (n, dot(t, t).sqrt())),
            );
        }
        let losses: Vec<f64> = outputs.iter().filter_map(|o| o.loss).collect();
        let mean_loss = if losses.is_empty() {
            0.0
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        };

        self.model
            .apply_update(&aggregated, eta)
            .map_err(|e| e.context(format!("round {r}")))?;

        let completed = r + 1;
        let evaluation = self.should_evaluate(completed).then(|| {
            let mut report = self.evaluate();
            report.round = completed;
            report
        });
        self.logs.push(RoundLog {
            round: r,
            participants,
            aggregated_norms,
            mean_loss,
            fallbacks: stats.fallbacks,
            targets: target_stats,
            evaluation,
            wall_time: started.elapsed(),
        });
        Ok(self.logs.last().expect("just pushed"))
    }

    /// Mined popular sets of malicious clients that finished mining.
    pub fn mined_sets(&self) -> Vec<(usize, Vec<usize>)> {
        self.clients
            .iter()
            .filter(|c| c.role == Role::Malicious)
            .filter_map(|c| c.miner.popular.as_ref().map(|p| (c.id, p.items().to_vec())))
            .collect()
    }
}

/// One metrics.csv row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub round: usize,
    pub er: f64,
    pub hr: f64,
    pub mean_loss: f64,
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub rows: Vec<MetricsRow>,
    pub targets: Vec<usize>,
    pub mined_sets: Vec<(usize, Vec<usize>)>,
    pub num_benign: usize,
    pub num_malicious: usize,
    pub model: GlobalModel,
    pub config: ExperimentConfig,
    pub wall_time: Duration,
}

impl ExperimentReport {
    pub fn final_row(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }

    pub fn peak_er(&self) -> f64 {
        self.rows.iter().map(|r| r.er).fold(0.0, f64::max)
    }

    pub fn defense_label(&self) -> String {
        if self.config.defense.enabled {
            "regularize".to_string()
        } else {
            "none".to_string()
        }
    }

    pub fn metrics_csv(&self) -> String {
        let mut out = String::from(
            "round,er_at_k_pct,hr_at_k_pct,mean_loss,aggregator,attack,defense,seed\n",
        );
        for row in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.4},{:.4},{:.6},{},{},{},{}",
                row.round,
                100.0 * row.er,
                100.0 * row.hr,
                row.mean_loss,
                self.config.aggregator.kind.name(),
                self.config.attack.kind.name(),
                self.defense_label(),
                self.config.seed
            );
        }
        out
    }

    pub fn summary(&self) -> String {
        let c = &self.config;
        let mut out = String::new();
        let _ = writeln!(out, "[summary]");
        let _ = writeln!(out, "seed = {}", c.seed);
        let _ = writeln!(out, "dataset = {}", c.data.source);
        let _ = writeln!(out, "family = {:?}", c.model.family);
        let _ = writeln!(out, "benign_clients = {}", self.num_benign);
        let _ = writeln!(out, "malicious_clients = {}", self.num_malicious);
        let _ = writeln!(out, "attack = {}", c.attack.kind.name());
        let _ = writeln!(out, "aggregator = {}", c.aggregator.kind.name());
        let _ = writeln!(out, "defense = {}", self.defense_label());
        let _ = writeln!(out, "targets = {:?}", self.targets);
        let _ = writeln!(out, "rounds = {}", c.federation.rounds);
        if let Some(last) = self.final_row() {
            let _ = writeln!(out, "final_er_at_{}_pct = {:.4}", c.eval.k, 100.0 * last.er);
            let _ = writeln!(out, "final_hr_at_{}_pct = {:.4}", c.eval.k, 100.0 * last.hr);
        }
        let _ = writeln!(
            out,
            "peak_er_at_{}_pct = {:.4}",
            c.eval.k,
            100.0 * self.peak_er()
        );
        out
    }

    pub fn mined_csv(&self) -> String {
        let mut out = String::from("client_id,rank,item_id\n");
        for (client, items) in &self.mined_sets {
            for (rank, item) in items.iter().enumerate() {
                let _ = writeln!(out, "{client},{},{item}", rank + 1);
            }
        }
        out
    }
}

/// Runs a configured experiment on an already prepared dataset.
pub fn run_on_dataset(
    config: &ExperimentConfig,
    dataset: InteractionDataset,
) -> Result<ExperimentReport> {
    let started = Instant::now();
    let mut sim = Simulation::new(config.clone(), dataset)?;
    let mut rows = Vec::new();
    for _ in 0..config.federation.rounds {
        let log = sim.run_round()?;
        if let Some(eval) = &log.evaluation {
            info!(
                "round {:>4}: ER@{} {:6.2}%  HR@{} {:6.2}%",
                eval.round,
                eval.k,
                100.0 * eval.er_mean,
                eval.k,
                100.0 * eval.hr
            );
            rows.push(MetricsRow {
                round: eval.round,
                er: eval.er_mean,
                hr: eval.hr,
                mean_loss: log.mean_loss,
            });
        }
    }
    let num_benign = sim.num_benign();
    Ok(ExperimentReport {
        rows,
        targets: sim.targets.clone(),
        mined_sets: sim.mined_sets(),
        num_benign,
        num_malicious: sim.clients.len() - num_benign,
        model: sim.model,
        config: config.clone(),
        wall_time: started.elapsed(),
    })
}

/// Trains for `rounds` rounds and records each item's embedding change per
/// round: `history[r][j]` is the L2 change of item j during round r
/// (1-based; `history[0]` is all zeros).
pub fn delta_norm_history(
    config: &ExperimentConfig,
    rounds: usize,
) -> Result<(Vec<Vec<f64>>, InteractionDataset)> {
    config.validate()?;
    let dataset = prepare_dataset(config)?;
    let mut sim = Simulation::new(config.clone(), dataset.clone())?;
    let dim = sim.model.dim;
    let mut history = vec![vec![0.0; sim.model.num_items]];
    for _ in 0..rounds {
        let before = sim.model.item_embeddings.clone();
        sim.run_round()?;
        let change = before
            .chunks(dim)
            .zip(sim.model.item_embeddings.chunks(dim))
            .map(|(a, b)| {
                a.iter()
                    .zip(b)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        history.push(change);
    }
    Ok((history, dataset))
}

/// Prepares data and runs the experiment on a pool of `workers` threads.
pub fn run_experiment(config: &ExperimentConfig, workers: usize) -> Result<ExperimentReport> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    pool.install(|| {
        let dataset = prepare_dataset(config)?;
        run_on_dataset(config, dataset)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn exhaustive_batch_selects_everyone() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(
            select_round_users(5, 5, &mut rng).unwrap(),
            vec![0, 1, 2, 3, 4]
        );
    }

    #[test]
    fn oversized_batch_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(select_round_users(3, 4, &mut rng).unwrap_err().is_config());
    }

    #[test]
    fn selection_is_reproducible() {
        let a = select_round_users(100, 10, &mut substream(5, Stream::Sampling, 7)).unwrap();
        let b = select_round_users(100, 10, &mut substream(5, Stream::Sampling, 7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn malicious_share_matches_ratio() {
        assert_eq!(malicious_count(950, 0.05), 50);
        assert_eq!(malicious_count(100, 0.0), 0);
    }
}
