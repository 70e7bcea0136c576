//! IFCA clustered federated training with epsilon-greedy assignment.
//!
//! J server states train concurrently; every round each participating client
//! picks the cluster whose model has the lowest loss on its validation split
//! (or, with probability epsilon, a uniformly random cluster to avoid mode
//! collapse), trains from that cluster's weights, and contributes its update
//! to that cluster's server step only.
//!
//! Plain single-model federated training is the J = 1, epsilon = 0 special
//! case and runs through the identical code path.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::Result;
use crate::fed::{
    self, ClientData, ConvergenceCfg, History, RoundRecord, ServerOptCfg, ServerState,
};
use crate::nn::{ModelParams, Network};
use crate::rng;

/// J concurrent server states plus per-client assignments.
#[derive(Debug, Clone)]
pub struct ClusterEnsemble {
    pub models: Vec<ServerState>,
    /// Current cluster id per client.
    pub assignments: Vec<usize>,
    pub epsilon: f64,
    pub num_clusters: usize,
}

impl ClusterEnsemble {
    /// Distinct seeded initializations per cluster: cluster 0 is a fresh
    /// draw; higher clusters add a small seeded jitter on top of it. Keeping
    /// the clusters statistically equal at the start makes the first
    /// assignment round split on client-data interactions instead of on one
    /// cluster being globally luckier, which is what lets the clusters
    /// populate and then specialize.
    pub fn init(
        net: &Network,
        num_clusters: usize,
        epsilon: f64,
        num_clients: usize,
        opt: &ServerOptCfg,
        seed: u64,
    ) -> Result<Self> {
        if num_clusters == 0 {
            return Err(crate::Error::invalid("need at least one cluster"));
        }
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(crate::Error::invalid("epsilon must be in [0, 1]"));
        }
        let mut base_rng = rng::stream(seed, &[rng::TAG_INIT, 0]);
        let base = net.init_params(&mut base_rng);
        let mut models = Vec::with_capacity(num_clusters);
        for j in 0..num_clusters {
            let weights = if j == 0 {
                base.clone()
            } else {
                let mut jitter_rng = rng::stream(seed, &[rng::TAG_INIT, j as u64]);
                let jitter = net.init_params(&mut jitter_rng);
                let mut w = base.clone();
                for (v, d) in w.values.iter_mut().zip(&jitter.values) {
                    *v += 0.5 * d;
                }
                w
            };
            models.push(ServerState::new(weights, opt)?);
        }
        Ok(ClusterEnsemble {
            models,
            assignments: vec![0; num_clients],
            epsilon,
            num_clusters,
        })
    }

    /// Wrap existing server states (used by the single-model path).
    pub fn from_states(models: Vec<ServerState>, epsilon: f64, num_clients: usize) -> Self {
        let num_clusters = models.len();
        ClusterEnsemble {
            models,
            assignments: vec![0; num_clients],
            epsilon,
            num_clusters,
        }
    }
}

/// One row of the assignment trace.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentRecord {
    pub round: usize,
    pub client_id: usize,
    pub chosen_cluster: usize,
    pub was_exploration: bool,
    /// Validation loss of the client under every cluster model.
    pub losses: Vec<f64>,
}

/// Epsilon-greedy cluster choice for one client: argmin validation loss with
/// probability 1 - epsilon (ties to the lowest id), uniform otherwise.
/// Returns (cluster, was_exploration, per-cluster losses).
pub fn assign_cluster(
    client: &ClientData,
    ensemble: &ClusterEnsemble,
    net: &Network,
    rng: &mut ChaCha8Rng,
) -> Result<(usize, bool, Vec<f64>)> {
    let mut losses = Vec::with_capacity(ensemble.num_clusters);
    for model in &ensemble.models {
        let (loss, _) = fed::eval_metrics(net, &model.weights, &client.val)?;
        losses.push(loss);
    }
    let greedy = argmin(&losses);
    let u: f64 = rng.gen_range(0.0..1.0);
    if u < ensemble.epsilon {
        let j = rng.gen_range(0..ensemble.num_clusters);
        Ok((j, true, losses))
    } else {
        Ok((greedy, false, losses))
    }
}

fn argmin(losses: &[f64]) -> usize {
    let mut best = 0;
    for (j, &l) in losses.iter().enumerate() {
        if l < losses[best] {
            best = j;
        }
    }
    best
}

/// Post-training model selection: pure argmin of validation loss, no
/// exploration. Returns the cluster id and a snapshot of its weights.
pub fn best_cluster_model(
    ensemble: &ClusterEnsemble,
    client: &ClientData,
    net: &Network,
) -> Result<(usize, ModelParams)> {
    let mut best = 0;
    let mut best_loss = f64::INFINITY;
    for (j, model) in ensemble.models.iter().enumerate() {
        let (loss, _) = fed::eval_metrics(net, &model.weights, &client.val)?;
        if loss < best_loss {
            best_loss = loss;
            best = j;
        }
    }
    Ok((best, ensemble.models[best].weights.clone()))
}

/// Stats of one clustered round.
#[derive(Debug, Clone)]
pub struct IfcaRoundStats {
    /// Sample-weighted train loss per cluster; NaN for untouched clusters.
    pub train_loss: Vec<f64>,
    pub local_epochs: usize,
}

/// One clustered round over the selected clients: assign, train from the
/// assigned cluster's weights, aggregate and step per cluster. Clusters with
/// no assigned clients this round are untouched.
pub fn ifca_round(
    ensemble: &mut ClusterEnsemble,
    clients: &[ClientData],
    participating: &[usize],
    cfg: &ConvergenceCfg,
    net: &Network,
    round: usize,
) -> Result<(Vec<AssignmentRecord>, IfcaRoundStats)> {
    let j_count = ensemble.num_clusters;

    // Assignment and local training per client, in parallel; every client
    // draws from its own (seed, round, client) streams.
    struct Piece {
        client_id: usize,
        cluster: usize,
        was_exploration: bool,
        losses: Vec<f64>,
        update: Option<fed::ClientUpdate>,
        train_loss: f64,
        epochs_run: usize,
    }
    let snapshot = &*ensemble;
    let pieces: Vec<Piece> = participating
        .par_iter()
        .map(|&k| -> Result<Piece> {
            let mut assign_rng =
                rng::stream(cfg.seed, &[rng::TAG_ASSIGN, round as u64, k as u64]);
            let (cluster, was_exploration, losses) =
                assign_cluster(&clients[k], snapshot, net, &mut assign_rng)?;
            let start = &snapshot.models[cluster].weights;
            let mut train_rng =
                rng::stream(cfg.seed, &[rng::TAG_LOCAL_TRAIN, round as u64, k as u64]);
            let outcome =
                crate::nn::local_train(start, net, &clients[k].train, &cfg.local, &mut train_rng)?;
            Ok(match outcome {
                crate::nn::LocalOutcome::Trained {
                    params,
                    sample_count,
                    mean_loss,
                    epochs_run,
                } => Piece {
                    client_id: k,
                    cluster,
                    was_exploration,
                    losses,
                    update: Some(fed::ClientUpdate {
                        client_id: k,
                        delta: params.delta(start),
                        sample_count,
                    }),
                    train_loss: mean_loss,
                    epochs_run,
                },
                crate::nn::LocalOutcome::SkippedEmpty => Piece {
                    client_id: k,
                    cluster,
                    was_exploration,
                    losses,
                    update: None,
                    train_loss: 0.0,
                    epochs_run: 0,
                },
            })
        })
        .collect::<Result<_>>()?;

    let mut records = Vec::with_capacity(pieces.len());
    let mut per_cluster: Vec<Vec<fed::ClientUpdate>> = vec![Vec::new(); j_count];
    let mut loss_acc = vec![0.0f64; j_count];
    let mut weight_acc = vec![0.0f64; j_count];
    let mut epochs = 0;
    for p in pieces {
        records.push(AssignmentRecord {
            round,
            client_id: p.client_id,
            chosen_cluster: p.cluster,
            was_exploration: p.was_exploration,
            losses: p.losses,
        });
        ensemble.assignments[p.client_id] = p.cluster;
        if let Some(u) = p.update {
            loss_acc[p.cluster] += p.train_loss * u.sample_count as f64;
            weight_acc[p.cluster] += u.sample_count as f64;
            epochs += p.epochs_run;
            per_cluster[p.cluster].push(u);
        }
    }

    // Server steps in ascending cluster order.
    let mut train_loss = vec![f64::NAN; j_count];
    for j in 0..j_count {
        if let Some(agg) = fed::aggregate(&per_cluster[j])? {
            fed::server_step(&mut ensemble.models[j], &agg);
            train_loss[j] = loss_acc[j] / weight_acc[j];
        }
    }

    Ok((
        records,
        IfcaRoundStats {
            train_loss,
            local_epochs: epochs,
        },
    ))
}

/// The convergence loop shared by clustered and single-model training.
///
/// Early stopping watches the sample-weighted mean validation loss of all
/// clients under their currently assigned cluster models; the best snapshot
/// is restored on exit.
pub fn train_ensemble(
    ensemble: &mut ClusterEnsemble,
    clients: &[ClientData],
    net: &Network,
    cfg: &ConvergenceCfg,
) -> Result<(History, Vec<AssignmentRecord>)> {
    let k_total = clients.len();
    let mut history = History::default();
    let mut trace = Vec::new();
    let mut cumulative_epochs = 0usize;
    let mut best_loss = f64::INFINITY;
    let mut best_snapshot: Option<(Vec<ServerState>, Vec<usize>)> = None;
    let mut bad_evals = 0usize;

    for round in 0..cfg.max_rounds {
        let mut select_rng = rng::stream(cfg.seed, &[rng::TAG_SELECT, round as u64]);
        let plan = fed::select_clients(k_total, cfg.fraction, &mut select_rng)?;
        let (records, stats) = ifca_round(
            ensemble,
            clients,
            &plan.participating,
            cfg,
            net,
            round,
        )?;
        trace.extend(records);
        cumulative_epochs += stats.local_epochs;
        history.rounds_run = round + 1;

        if (round + 1) % cfg.eval_every.max(1) != 0 {
            continue;
        }

        // Validation metrics per client under its assigned cluster.
        let evals: Vec<(f64, f64, usize)> = (0..k_total)
            .into_par_iter()
            .map(|k| {
                let j = ensemble.assignments[k];
                let (loss, acc) =
                    fed::eval_metrics(net, &ensemble.models[j].weights, &clients[k].val)?;
                Ok((loss, acc, clients[k].val.len()))
            })
            .collect::<Result<_>>()?;

        let mut cluster_loss = vec![0.0f64; ensemble.num_clusters];
        let mut cluster_acc = vec![0.0f64; ensemble.num_clusters];
        let mut cluster_n = vec![0.0f64; ensemble.num_clusters];
        let mut total_loss = 0.0;
        let mut total_n = 0.0;
        for (k, (loss, acc, n)) in evals.iter().enumerate() {
            if n == &0 || !loss.is_finite() {
                continue;
            }
            let j = ensemble.assignments[k];
            cluster_loss[j] += loss * *n as f64;
            cluster_acc[j] += acc * *n as f64;
            cluster_n[j] += *n as f64;
            total_loss += loss * *n as f64;
            total_n += *n as f64;
        }
        for j in 0..ensemble.num_clusters {
            let (vl, va) = if cluster_n[j] > 0.0 {
                (cluster_loss[j] / cluster_n[j], cluster_acc[j] / cluster_n[j])
            } else {
                (f64::NAN, f64::NAN)
            };
            history.records.push(RoundRecord {
                round,
                cluster_id: j,
                train_loss: stats.train_loss[j],
                val_loss: vl,
                val_accuracy: va,
                cumulative_local_epochs: cumulative_epochs,
                server_lr: ensemble.models[j].server_lr_now(),
            });
        }

        let mean_val = if total_n > 0.0 {
            total_loss / total_n
        } else {
            f64::INFINITY
        };
        if mean_val < best_loss {
            best_loss = mean_val;
            best_snapshot = Some((ensemble.models.clone(), ensemble.assignments.clone()));
            bad_evals = 0;
        } else {
            bad_evals += 1;
        }
        if round + 1 >= cfg.min_rounds && bad_evals >= cfg.patience {
            history.stopped_early = true;
            break;
        }
    }

    if let Some((models, assignments)) = best_snapshot {
        ensemble.models = models;
        ensemble.assignments = assignments;
    }
    history.total_local_epochs = cumulative_epochs;
    history.best_val_loss = best_loss;
    Ok((history, trace))
}

/// Assignment trace CSV: one row per (round, client) decision.
pub fn assignment_csv_string(records: &[AssignmentRecord], num_clusters: usize) -> String {
    let mut out = String::from("round,client_id,chosen_cluster,was_exploration");
    for j in 0..num_clusters {
        out.push_str(&format!(",val_loss_cluster{j}"));
    }
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{}",
            r.round, r.client_id, r.chosen_cluster, r.was_exploration
        ));
        for l in &r.losses {
            out.push_str(&format!(",{l}"));
        }
        out.push('\n');
    }
    out
}

pub fn write_assignment_csv(
    path: impl AsRef<std::path::Path>,
    records: &[AssignmentRecord],
    num_clusters: usize,
) -> Result<()> {
    std::fs::write(path, assignment_csv_string(records, num_clusters))?;
    Ok(())
}
