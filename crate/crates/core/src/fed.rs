//! Federated round machinery: client selection, local-update collection,
//! sample-weighted aggregation and the FedAvg / FedLion server steps.
//!
//! Server optimizers follow the federated-optimizer construction: the
//! aggregated client delta `U = (1/n) sum n_k (w_k - w_g)` enters the server
//! step as the pseudo-gradient `-U`. For FedAvg that reduces to
//! `w <- w + eta_t * U`; FedLion applies the sign-momentum rule to `-U` with
//! decoupled weight decay.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, LocalOutcome, LocalTrainCfg, ModelParams, Network, TensorDataset};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    FedAvg,
    FedLion,
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OptimizerKind::FedAvg => write!(f, "fedavg"),
            OptimizerKind::FedLion => write!(f, "fedlion"),
        }
    }
}

/// Server optimizer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServerOptCfg {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub lr_decay: f64,
    pub lambda: f64,
    pub beta1: f64,
    pub beta2: f64,
}

/// Global (or per-cluster) model plus FedLion momentum and round counter.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub weights: ModelParams,
    pub momentum: Vec<f32>,
    pub round: u64,
    pub server_lr: f64,
    pub server_lr_decay: f64,
    pub lambda: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub optimizer_kind: OptimizerKind,
}

impl ServerState {
    pub fn new(weights: ModelParams, cfg: &ServerOptCfg) -> Result<ServerState> {
        if !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) {
            return Err(Error::invalid("beta1 and beta2 must be in [0, 1)"));
        }
        let len = weights.values.len();
        Ok(ServerState {
            weights,
            momentum: vec![0.0; len],
            round: 0,
            server_lr: cfg.lr,
            server_lr_decay: cfg.lr_decay,
            lambda: cfg.lambda,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            optimizer_kind: cfg.kind,
        })
    }

    /// Decayed learning rate for the current round: eta / (1 + decay * t).
    pub fn server_lr_now(&self) -> f64 {
        self.server_lr / (1.0 + self.server_lr_decay * self.round as f64)
    }
}

/// The set of clients participating in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundPlan {
    /// Ascending client ids.
    pub participating: Vec<usize>,
    pub fraction: f64,
    pub total_clients: usize,
}

/// Uniform sample without replacement of ceil(fraction * total) clients.
pub fn select_clients(total: usize, fraction: f64, rng: &mut ChaCha8Rng) -> Result<RoundPlan> {
    if total == 0 {
        return Err(Error::invalid("need at least one client"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid("fraction must be in (0, 1]"));
    }
    let count = (fraction * total as f64).ceil() as usize;
    let mut ids: Vec<usize> = (0..total).collect();
    ids.shuffle(rng);
    let mut participating = ids[..count].to_vec();
    participating.sort_unstable();
    Ok(RoundPlan {
        participating,
        fraction,
        total_clients: total,
    })
}

/// One client's contribution to a round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    /// `w_k - w_g` as a flat vector.
    pub delta: Vec<f32>,
    pub sample_count: usize,
}

/// Sample-weighted mean of deltas, summed in ascending client-id order with
/// f64 accumulators. `None` signals an empty round (no-op), distinct from
/// malformed input.
pub fn aggregate(updates: &[ClientUpdate]) -> Result<Option<Vec<f32>>> {
    if updates.is_empty() {
        return Ok(None);
    }
    let len = updates[0].delta.len();
    for u in updates {
        if u.delta.len() != len {
            return Err(Error::invalid("client update length mismatch"));
        }
        if u.sample_count == 0 {
            return Err(Error::invalid("client update with zero samples"));
        }
    }
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by_key(|&i| updates[i].client_id);
    let total: f64 = updates.iter().map(|u| u.sample_count as f64).sum();
    let mut acc = vec![0.0f64; len];
    for &i in &order {
        let w = updates[i].sample_count as f64 / total;
        for (a, d) in acc.iter_mut().zip(&updates[i].delta) {
            *a += w * *d as f64;
        }
    }
    Ok(Some(acc.into_iter().map(|v| v as f32).collect()))
}

/// FedAvg server step: `w <- w + eta_t * U`, then advance the round.
pub fn fedavg_step(state: &mut ServerState, aggregated: &[f32]) {
    debug_assert_eq!(state.optimizer_kind, OptimizerKind::FedAvg);
    let eta = state.server_lr_now();
    for (w, u) in state.weights.values.iter_mut().zip(aggregated) {
        *w = (*w as f64 + eta * *u as f64) as f32;
    }
    state.round += 1;
}

fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// FedLion server step on the pseudo-gradient `g = -U`:
///
/// ```text
/// c  = beta1 * m + (1 - beta1) * g
/// w <- w - eta_t * (sign(c) + lambda * w)
/// m <- beta2 * m + (1 - beta2) * g
/// ```
///
/// Both lines read the old momentum; sign(0) is 0; the whole step including
/// the decoupled decay is scaled by the decayed learning rate.
pub fn fedlion_step(state: &mut ServerState, aggregated: &[f32]) {
    debug_assert_eq!(state.optimizer_kind, OptimizerKind::FedLion);
    let eta = state.server_lr_now();
    let (b1, b2, lambda) = (state.beta1, state.beta2, state.lambda);
    for ((w, m), u) in state
        .weights
        .values
        .iter_mut()
        .zip(state.momentum.iter_mut())
        .zip(aggregated)
    {
        let g = -(*u as f64);
        let m_old = *m as f64;
        let w_old = *w as f64;
        let c = b1 * m_old + (1.0 - b1) * g;
        let w_new = w_old - eta * (sign0(c) + lambda * w_old);
        debug_assert!(
            (w_new - w_old).abs() <= eta * (1.0 + lambda * w_old.abs()) * (1.0 + 1e-12),
            "FedLion step magnitude bound violated"
        );
        *w = w_new as f32;
        *m = (b2 * m_old + (1.0 - b2) * g) as f32;
    }
    state.round += 1;
}

/// Apply the configured server optimizer to an aggregated update.
pub fn server_step(state: &mut ServerState, aggregated: &[f32]) {
    match state.optimizer_kind {
        OptimizerKind::FedAvg => fedavg_step(state, aggregated),
        OptimizerKind::FedLion => fedlion_step(state, aggregated),
    }
}

// ---------------------------------------------------------------------------
// Rounds
// ---------------------------------------------------------------------------

/// One client's local view: training and validation tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientData {
    pub train: TensorDataset,
    pub val: TensorDataset,
}

/// Round-level training configuration shared by all clients.
#[derive(Debug, Clone, Copy)]
pub struct TrainRoundCfg {
    pub local: LocalTrainCfg,
    /// Experiment root seed; per-round, per-client streams derive from it.
    pub seed: u64,
}

/// Result of training one selected client.
pub struct TrainedClient {
    pub client_id: usize,
    pub update: Option<ClientUpdate>,
    pub train_loss: f64,
    pub epochs_run: usize,
}

/// Train every selected client from the given start weights, in parallel.
/// Each client draws from its own `(seed, round, client)` stream, so the
/// result is independent of scheduling.
pub fn train_selected(
    start: &ModelParams,
    clients: &[ClientData],
    ids: &[usize],
    cfg: &TrainRoundCfg,
    net: &Network,
    round: u64,
) -> Result<Vec<TrainedClient>> {
    ids.par_iter()
        .map(|&k| {
            let mut stream = rng::stream(cfg.seed, &[rng::TAG_LOCAL_TRAIN, round, k as u64]);
            let outcome = nn::local_train(start, net, &clients[k].train, &cfg.local, &mut stream)?;
            Ok(match outcome {
                LocalOutcome::Trained {
                    params,
                    sample_count,
                    mean_loss,
                    epochs_run,
                } => TrainedClient {
                    client_id: k,
                    update: Some(ClientUpdate {
                        client_id: k,
                        delta: params.delta(start),
                        sample_count,
                    }),
                    train_loss: mean_loss,
                    epochs_run,
                },
                LocalOutcome::SkippedEmpty => TrainedClient {
                    client_id: k,
                    update: None,
                    train_loss: 0.0,
                    epochs_run: 0,
                },
            })
        })
        .collect()
}

/// Outcome summary of a single federated round.
#[derive(Debug, Clone)]
pub struct RoundReport {
    pub trained: Vec<usize>,
    pub skipped: Vec<usize>,
    /// Sample-weighted mean local training loss.
    pub train_loss: f64,
    pub local_epochs: usize,
    /// False when every client skipped and the round was a no-op.
    pub applied: bool,
}

/// One synchronous round: local training on the selected clients, weighted
/// aggregation, one server step.
pub fn run_round(
    server: &mut ServerState,
    clients: &[ClientData],
    plan: &RoundPlan,
    cfg: &TrainRoundCfg,
    net: &Network,
) -> Result<RoundReport> {
    let results = train_selected(
        &server.weights,
        clients,
        &plan.participating,
        cfg,
        net,
        server.round,
    )?;
    let mut updates = Vec::new();
    let mut trained = Vec::new();
    let mut skipped = Vec::new();
    let mut loss_acc = 0.0;
    let mut weight_acc = 0.0;
    let mut epochs = 0;
    for r in results {
        match r.update {
            Some(u) => {
                loss_acc += r.train_loss * u.sample_count as f64;
                weight_acc += u.sample_count as f64;
                epochs += r.epochs_run;
                trained.push(r.client_id);
                updates.push(u);
            }
            None => skipped.push(r.client_id),
        }
    }
    let applied = match aggregate(&updates)? {
        Some(agg) => {
            server_step(server, &agg);
            true
        }
        None => false,
    };
    Ok(RoundReport {
        trained,
        skipped,
        train_loss: if weight_acc > 0.0 {
            loss_acc / weight_acc
        } else {
            0.0
        },
        local_epochs: epochs,
        applied,
    })
}

// ---------------------------------------------------------------------------
// Convergence loop and history
// ---------------------------------------------------------------------------

/// Training-loop configuration for `train_to_convergence` and the clustered
/// variant in the `cluster` module.
#[derive(Debug, Clone, Copy)]
pub struct ConvergenceCfg {
    pub local: LocalTrainCfg,
    pub fraction: f64,
    pub max_rounds: usize,
    /// Rounds to run before early stopping is armed.
    pub min_rounds: usize,
    /// Consecutive non-improving evaluations tolerated before stopping.
    pub patience: usize,
    /// Rounds between validation evaluations.
    pub eval_every: usize,
    pub seed: u64,
}

/// One history row, per round and cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub cluster_id: usize,
    /// NaN when no client trained into this cluster this round.
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub cumulative_local_epochs: usize,
    pub server_lr: f64,
}

#[derive(Debug, Clone, Default)]
pub struct History {
    pub records: Vec<RoundRecord>,
    pub rounds_run: usize,
    pub total_local_epochs: usize,
    pub stopped_early: bool,
    pub best_val_loss: f64,
}

/// Mean NLL and accuracy of a parameter vector on one dataset, full pass.
pub fn eval_metrics(
    net: &Network,
    params: &ModelParams,
    data: &TensorDataset,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let (batch, labels) = data.full();
    let mut dummy = rng::stream(0, &[]);
    let logits = net.forward(params, &batch, false, &mut dummy)?;
    let (loss, _) = nn::nll_loss(&logits, &labels)?;
    let classes = net.num_outputs();
    let mut correct = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits.data[i * classes..(i + 1) * classes];
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == y {
            correct += 1;
        }
    }
    Ok((loss, correct as f64 / labels.len() as f64))
}

/// Run rounds until the sample-weighted mean validation loss across clients
/// stops improving for `patience` evaluations, or `max_rounds` is reached.
/// Returns the best-validation state and the per-round history.
pub fn train_to_convergence(
    server: ServerState,
    clients: &[ClientData],
    cfg: &ConvergenceCfg,
    net: &Network,
) -> Result<(ServerState, History)> {
    let mut ensemble =
        crate::cluster::ClusterEnsemble::from_states(vec![server], 0.0, clients.len());
    let (history, _) = crate::cluster::train_ensemble(&mut ensemble, clients, net, cfg)?;
    Ok((ensemble.models.into_iter().next().unwrap(), history))
}

/// Write history rows as CSV. NaN losses (untouched clusters) render empty.
pub fn write_history_csv(path: impl AsRef<std::path::Path>, history: &History) -> Result<()> {
    std::fs::write(path, history_csv_string(history))?;
    Ok(())
}

pub fn history_csv_string(history: &History) -> String {
    let mut out = String::new();
    out.push_str(
        "round,cluster_id,train_loss,val_loss,val_accuracy,cumulative_local_epochs,server_lr_t\n",
    );
    for r in &history.records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.round,
            r.cluster_id,
            fmt_opt(r.train_loss),
            fmt_opt(r.val_loss),
            fmt_opt(r.val_accuracy),
            r.cumulative_local_epochs,
            r.server_lr
        ));
    }
    out
}

fn fmt_opt(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::CnnArch;
    use rand::Rng;

    fn tiny_net() -> Network {
        Network::from_cnn(&CnnArch {
            dropout_rate: 0.0,
            ..CnnArch::tiny(4, 3, 4)
        })
        .unwrap()
    }

    fn params_of(net: &Network, seed: u64) -> ModelParams {
        let mut r = rng::stream(seed, &[rng::TAG_INIT]);
        net.init_params(&mut r)
    }

    fn toy_client(net: &Network, n: usize, seed: u64) -> ClientData {
        let (c, h, w) = net.input_shape();
        let mut r = rng::stream(seed, &[99]);
        let mut make = |n: usize| {
            let x = (0..n * c * h * w)
                .map(|_| r.gen_range(-1.0..1.0))
                .collect();
            let y = (0..n).map(|_| r.gen_range(0..net.num_outputs())).collect();
            TensorDataset {
                x,
                y,
                channels: c,
                height: h,
                width: w,
            }
        };
        let train = make(n);
        let val = make(n.max(2));
        ClientData { train, val }
    }

    fn opt_cfg(kind: OptimizerKind) -> ServerOptCfg {
        ServerOptCfg {
            kind,
            lr: 1.0,
            lr_decay: 0.0,
            lambda: 0.0,
            beta1: 0.95,
            beta2: 0.98,
        }
    }

    #[test]
    fn select_all_clients_at_full_fraction() {
        let mut r = rng::stream(1, &[rng::TAG_SELECT]);
        let plan = select_clients(8, 1.0, &mut r).unwrap();
        assert_eq!(plan.participating, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn select_quarter_of_eight_gives_two_distinct() {
        let mut r = rng::stream(1, &[rng::TAG_SELECT]);
        let plan = select_clients(8, 0.25, &mut r).unwrap();
        assert_eq!(plan.participating.len(), 2);
        assert!(plan.participating[0] < plan.participating[1]);
    }

    #[test]
    fn selection_is_deterministic() {
        let pick = || {
            let mut r = rng::stream(5, &[rng::TAG_SELECT, 3]);
            select_clients(10, 0.5, &mut r).unwrap().participating
        };
        assert_eq!(pick(), pick());
    }

    #[test]
    fn aggregate_opposite_deltas_cancel() {
        let updates = [
            ClientUpdate {
                client_id: 0,
                delta: vec![1.0, -2.0, 3.0],
                sample_count: 5,
            },
            ClientUpdate {
                client_id: 1,
                delta: vec![-1.0, 2.0, -3.0],
                sample_count: 5,
            },
        ];
        assert_eq!(aggregate(&updates).unwrap().unwrap(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn aggregate_single_client_passthrough() {
        let updates = [ClientUpdate {
            client_id: 2,
            delta: vec![0.5, -0.25],
            sample_count: 7,
        }];
        assert_eq!(aggregate(&updates).unwrap().unwrap(), vec![0.5, -0.25]);
    }

    #[test]
    fn aggregate_weights_sum_to_one() {
        let v = vec![2.0f32, -4.0];
        let updates: Vec<ClientUpdate> = (0..3)
            .map(|i| ClientUpdate {
                client_id: i,
                delta: v.clone(),
                sample_count: i + 1,
            })
            .collect();
        let agg = aggregate(&updates).unwrap().unwrap();
        for (a, b) in agg.iter().zip(&v) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn aggregate_empty_is_noop_signal() {
        assert!(aggregate(&[]).unwrap().is_none());
    }

    #[test]
    fn aggregate_rejects_length_mismatch() {
        let updates = [
            ClientUpdate {
                client_id: 0,
                delta: vec![1.0],
                sample_count: 1,
            },
            ClientUpdate {
                client_id: 1,
                delta: vec![1.0, 2.0],
                sample_count: 1,
            },
        ];
        assert!(aggregate(&updates).is_err());
    }

    #[test]
    fn aggregate_is_permutation_invariant_bitwise() {
        let mut r = rng::stream(3, &[7]);
        let updates: Vec<ClientUpdate> = (0..5)
            .map(|i| ClientUpdate {
                client_id: i,
                delta: (0..17).map(|_| r.gen_range(-1.0..1.0)).collect(),
                sample_count: r.gen_range(1..50),
            })
            .collect();
        let base = aggregate(&updates).unwrap().unwrap();
        let mut shuffled = updates.clone();
        shuffled.reverse();
        shuffled.swap(0, 2);
        assert_eq!(aggregate(&shuffled).unwrap().unwrap(), base);
    }

    #[test]
    fn fedavg_zero_update_keeps_weights() {
        let net = tiny_net();
        let w = params_of(&net, 1);
        let mut s = ServerState::new(w.clone(), &opt_cfg(OptimizerKind::FedAvg)).unwrap();
        fedavg_step(&mut s, &vec![0.0; w.values.len()]);
        assert_eq!(s.weights.values, w.values);
        assert_eq!(s.round, 1);
    }

    #[test]
    fn fedavg_unit_lr_adds_update() {
        let net = tiny_net();
        let w = params_of(&net, 2);
        let mut s = ServerState::new(w.clone(), &opt_cfg(OptimizerKind::FedAvg)).unwrap();
        let u: Vec<f32> = (0..w.values.len()).map(|i| (i as f32) * 0.01).collect();
        fedavg_step(&mut s, &u);
        for ((new, old), du) in s.weights.values.iter().zip(&w.values).zip(&u) {
            assert!((new - (old + du)).abs() < 1e-6);
        }
    }

    #[test]
    fn fedavg_decay_shrinks_steps() {
        let cfg = ServerOptCfg {
            lr: 1.0,
            lr_decay: 0.5,
            ..opt_cfg(OptimizerKind::FedAvg)
        };
        let w = ModelParams {
            values: vec![0.0],
            layout: vec![],
        };
        let mut s = ServerState::new(w, &cfg).unwrap();
        fedavg_step(&mut s, &[1.0]); // t=0: eta=1
        assert!((s.weights.values[0] - 1.0).abs() < 1e-7);
        fedavg_step(&mut s, &[1.0]); // t=1: eta=1/1.5
        assert!((s.weights.values[0] as f64 - (1.0 + 1.0 / 1.5)).abs() < 1e-7);
    }

    #[test]
    fn fedlion_zero_update_zero_momentum_is_identity() {
        let w = ModelParams {
            values: vec![0.5, -0.25, 0.0],
            layout: vec![],
        };
        let mut s = ServerState::new(w.clone(), &opt_cfg(OptimizerKind::FedLion)).unwrap();
        fedlion_step(&mut s, &[0.0, 0.0, 0.0]);
        assert_eq!(s.weights.values, w.values);
        assert!(s.momentum.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn fedlion_pure_decay_when_update_zero() {
        let cfg = ServerOptCfg {
            lr: 0.1,
            lambda: 0.5,
            ..opt_cfg(OptimizerKind::FedLion)
        };
        let w = ModelParams {
            values: vec![2.0, -4.0],
            layout: vec![],
        };
        let mut s = ServerState::new(w, &cfg).unwrap();
        fedlion_step(&mut s, &[0.0, 0.0]);
        // w <- w - eta * lambda * w
        assert!((s.weights.values[0] as f64 - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-7);
        assert!((s.weights.values[1] as f64 - (-4.0 + 0.1 * 0.5 * 4.0)).abs() < 1e-7);
    }

    #[test]
    fn fedlion_all_positive_update_moves_every_weight_by_eta() {
        // A positive aggregated delta is a negative pseudo-gradient, so
        // sign(c) = -1 everywhere and each weight moves by exactly +eta_t.
        let cfg = ServerOptCfg {
            lr: 0.01,
            ..opt_cfg(OptimizerKind::FedLion)
        };
        let w = ModelParams {
            values: vec![0.3, -0.8, 0.0],
            layout: vec![],
        };
        let mut s = ServerState::new(w.clone(), &cfg).unwrap();
        fedlion_step(&mut s, &[5.0, 0.125, 1e-3]);
        for (new, old) in s.weights.values.iter().zip(&w.values) {
            assert!(((new - old) as f64 - 0.01).abs() < 1e-7);
        }
    }

    #[test]
    fn fedlion_matches_scalar_oracle() {
        // Independent scalar reimplementation of the step, f64 throughout.
        let mut r = rng::stream(11, &[13]);
        for _ in 0..200 {
            let n = 9;
            // |w| <= 1 keeps the final f32 rounding below the 1e-7 budget.
            let w0: Vec<f32> = (0..n).map(|_| r.gen_range(-1.0f64..1.0) as f32).collect();
            let m0: Vec<f32> = (0..n).map(|_| r.gen_range(-1.0f64..1.0) as f32).collect();
            let u: Vec<f32> = (0..n).map(|_| r.gen_range(-1.0f64..1.0) as f32).collect();
            let lr = r.gen_range(1e-4..1e-1);
            let lambda = r.gen_range(0.0..0.5);
            let beta1 = r.gen_range(0.0..0.999);
            let beta2 = r.gen_range(0.0..0.999);
            let decay = r.gen_range(0.0..1e-2);
            let round = r.gen_range(0u64..100);
            let cfg = ServerOptCfg {
                kind: OptimizerKind::FedLion,
                lr,
                lr_decay: decay,
                lambda,
                beta1,
                beta2,
            };
            let mut s = ServerState::new(
                ModelParams {
                    values: w0.clone(),
                    layout: vec![],
                },
                &cfg,
            )
            .unwrap();
            s.momentum = m0.clone();
            s.round = round;
            fedlion_step(&mut s, &u);
            let eta = lr / (1.0 + decay * round as f64);
            for i in 0..n {
                let g = -(u[i] as f64);
                let c = beta1 * m0[i] as f64 + (1.0 - beta1) * g;
                let sgn = if c > 0.0 {
                    1.0
                } else if c < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                let w_expect = w0[i] as f64 - eta * (sgn + lambda * w0[i] as f64);
                let m_expect = beta2 * m0[i] as f64 + (1.0 - beta2) * g;
                assert!((s.weights.values[i] as f64 - w_expect).abs() <= 1e-7);
                assert!((s.momentum[i] as f64 - m_expect).abs() <= 1e-7);
            }
        }
    }

    #[test]
    fn fedlion_sign_is_scale_invariant() {
        let mut r = rng::stream(21, &[5]);
        let n = 32;
        let m: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let u: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let beta1 = 0.95;
        let sign_of = |scale: f64| -> Vec<f64> {
            m.iter()
                .zip(&u)
                .map(|(mi, ui)| sign0(beta1 * scale * mi + (1.0 - beta1) * scale * -ui))
                .collect()
        };
        let base = sign_of(1.0);
        for scale in [0.01, 0.5, 3.0, 1e4] {
            let scaled = sign_of(scale);
            for (a, b) in base.iter().zip(&scaled) {
                if *a != 0.0 {
                    assert_eq!(a, b);
                }
            }
        }
    }

    #[test]
    fn run_round_single_client_unit_lr_adopts_client_weights() {
        let net = tiny_net();
        let clients = vec![toy_client(&net, 6, 1)];
        let w0 = params_of(&net, 5);
        let mut server = ServerState::new(w0.clone(), &opt_cfg(OptimizerKind::FedAvg)).unwrap();
        let cfg = TrainRoundCfg {
            local: LocalTrainCfg {
                epochs: 2,
                batch_size: 4,
                lr: 0.05,
                lr_decay: 0.0,
                weight_decay: 0.0,
            },
            seed: 77,
        };
        let plan = RoundPlan {
            participating: vec![0],
            fraction: 1.0,
            total_clients: 1,
        };
        let report = run_round(&mut server, &clients, &plan, &cfg, &net).unwrap();
        assert!(report.applied);
        // Reproduce the client training directly.
        let mut stream = rng::stream(77, &[rng::TAG_LOCAL_TRAIN, 0, 0]);
        let trained =
            match nn::local_train(&w0, &net, &clients[0].train, &cfg.local, &mut stream).unwrap() {
                LocalOutcome::Trained { params, .. } => params,
                _ => panic!(),
            };
        for (s, c) in server.weights.values.iter().zip(&trained.values) {
            assert!((s - c).abs() < 1e-6);
        }
    }

    #[test]
    fn run_round_zero_epochs_is_identity() {
        let net = tiny_net();
        let clients = vec![toy_client(&net, 4, 2), toy_client(&net, 5, 3)];
        let w0 = params_of(&net, 6);
        let mut server = ServerState::new(w0.clone(), &opt_cfg(OptimizerKind::FedAvg)).unwrap();
        let cfg = TrainRoundCfg {
            local: LocalTrainCfg {
                epochs: 0,
                batch_size: 4,
                lr: 0.05,
                lr_decay: 0.0,
                weight_decay: 0.0,
            },
            seed: 1,
        };
        let plan = RoundPlan {
            participating: vec![0, 1],
            fraction: 1.0,
            total_clients: 2,
        };
        run_round(&mut server, &clients, &plan, &cfg, &net).unwrap();
        assert_eq!(server.weights.values, w0.values);
    }

    #[test]
    fn run_round_all_empty_clients_is_noop_with_signal() {
        let net = tiny_net();
        let (c, h, w) = net.input_shape();
        let empty = ClientData {
            train: TensorDataset {
                channels: c,
                height: h,
                width: w,
                ..TensorDataset::default()
            },
            val: TensorDataset {
                channels: c,
                height: h,
                width: w,
                ..TensorDataset::default()
            },
        };
        let clients = vec![empty.clone(), empty];
        let w0 = params_of(&net, 6);
        let mut server = ServerState::new(w0.clone(), &opt_cfg(OptimizerKind::FedAvg)).unwrap();
        let cfg = TrainRoundCfg {
            local: LocalTrainCfg {
                epochs: 1,
                batch_size: 4,
                lr: 0.05,
                lr_decay: 0.0,
                weight_decay: 0.0,
            },
            seed: 1,
        };
        let plan = RoundPlan {
            participating: vec![0, 1],
            fraction: 1.0,
            total_clients: 2,
        };
        let report = run_round(&mut server, &clients, &plan, &cfg, &net).unwrap();
        assert!(!report.applied);
        assert_eq!(report.skipped, vec![0, 1]);
        assert_eq!(server.weights.values, w0.values);
        assert_eq!(server.round, 0);
    }

    #[test]
    fn fedavg_identity_one_round_equals_weighted_average() {
        // eta=1, no decay, C=1: w + sum (n_k/n)(w_k - w) = sum (n_k/n) w_k.
        let net = tiny_net();
        let clients = vec![
            toy_client(&net, 3, 10),
            toy_client(&net, 9, 11),
            toy_client(&net, 6, 12),
        ];
        let w0 = params_of(&net, 7);
        let mut server = ServerState::new(w0.clone(), &opt_cfg(OptimizerKind::FedAvg)).unwrap();
        let cfg = TrainRoundCfg {
            local: LocalTrainCfg {
                epochs: 1,
                batch_size: 4,
                lr: 0.1,
                lr_decay: 0.0,
                weight_decay: 0.0,
            },
            seed: 13,
        };
        let plan = RoundPlan {
            participating: vec![0, 1, 2],
            fraction: 1.0,
            total_clients: 3,
        };
        run_round(&mut server, &clients, &plan, &cfg, &net).unwrap();

        // Weighted average of independently reproduced client weights.
        let mut expect = vec![0.0f64; w0.values.len()];
        let n_total: f64 = clients.iter().map(|c| c.train.len() as f64).sum();
        for (k, client) in clients.iter().enumerate() {
            let mut stream = rng::stream(13, &[rng::TAG_LOCAL_TRAIN, 0, k as u64]);
            let wk =
                match nn::local_train(&w0, &net, &client.train, &cfg.local, &mut stream).unwrap() {
                    LocalOutcome::Trained { params, .. } => params,
                    _ => panic!(),
                };
            let share = client.train.len() as f64 / n_total;
            for (e, v) in expect.iter_mut().zip(&wk.values) {
                *e += share * *v as f64;
            }
        }
        for (got, want) in server.weights.values.iter().zip(&expect) {
            assert!((*got as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn rounds_are_deterministic_across_thread_counts() {
        let net = tiny_net();
        let clients = vec![toy_client(&net, 8, 20), toy_client(&net, 5, 21)];
        let cfg = TrainRoundCfg {
            local: LocalTrainCfg {
                epochs: 2,
                batch_size: 4,
                lr: 0.05,
                lr_decay: 1e-3,
                weight_decay: 1e-4,
            },
            seed: 99,
        };
        let run_with = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| {
                let w0 = params_of(&net, 8);
                let mut server = ServerState::new(w0, &opt_cfg(OptimizerKind::FedLion)).unwrap();
                let plan = RoundPlan {
                    participating: vec![0, 1],
                    fraction: 1.0,
                    total_clients: 2,
                };
                for _ in 0..3 {
                    run_round(&mut server, &clients, &plan, &cfg, &net).unwrap();
                }
                server.weights.values
            })
        };
        assert_eq!(run_with(1), run_with(4));
    }
}
