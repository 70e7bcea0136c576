//! Experiment orchestration: the per-cell training pipeline (federated
//! global model, IFCA clusters, fine-tuning, mixture-of-experts, local
//! baseline), bootstrap evaluation, sweep execution and CSV reporting.
//!
//! Sweep cells are independent and may run in parallel; all randomness comes
//! from per-cell derived seeds, so output CSVs are byte-identical across
//! reruns and worker counts.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{build_codebook, capacity, generate_scene, synthesize_channels, Codebook};
use crate::cluster::{self, AssignmentRecord, ClusterEnsemble};
use crate::config::ExperimentConfig;
use crate::data::{self, FederatedDataset};
use crate::error::{Error, Result};
use crate::fed::{ClientData, History, OptimizerKind};
use crate::nn::{ModelParams, Network, Tensor};
use crate::personalize::{self, MoeBundle, MoeNets, TrainedModel};
use crate::rng;

const SUB_SINGLE: u64 = 0x20;
const SUB_IFCA: u64 = 0x21;

// ---------------------------------------------------------------------------
// Methods and axes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Local,
    SingleGlobal,
    Ifca,
    Finetuned,
    Moe,
}

impl Method {
    /// Report order used everywhere: local, single_global, ifca, finetuned, moe.
    pub const ALL: [Method; 5] = [
        Method::Local,
        Method::SingleGlobal,
        Method::Ifca,
        Method::Finetuned,
        Method::Moe,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Local => "local",
            Method::SingleGlobal => "single_global",
            Method::Ifca => "ifca",
            Method::Finetuned => "finetuned",
            Method::Moe => "moe",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        match s {
            "local" => Ok(Method::Local),
            "single_global" => Ok(Method::SingleGlobal),
            "ifca" => Ok(Method::Ifca),
            "finetuned" => Ok(Method::Finetuned),
            "moe" => Ok(Method::Moe),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    NumClusters,
    TrainFraction,
    Epsilon,
    UlSnr,
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::NumClusters => "num_clusters",
            SweepAxis::TrainFraction => "train_fraction",
            SweepAxis::Epsilon => "epsilon",
            SweepAxis::UlSnr => "ul_snr",
        }
    }

    pub fn parse(s: &str) -> Result<SweepAxis> {
        match s {
            "num_clusters" => Ok(SweepAxis::NumClusters),
            "train_fraction" => Ok(SweepAxis::TrainFraction),
            "epsilon" => Ok(SweepAxis::Epsilon),
            "ul_snr" => Ok(SweepAxis::UlSnr),
            other => Err(Error::Config(format!("unknown sweep axis {other:?}"))),
        }
    }
}

/// Runtime sweep description.
#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub repeats: usize,
    pub baselines: Vec<Method>,
    pub optimizers: Vec<OptimizerKind>,
}

impl SweepSpec {
    pub fn from_config(cfg: &crate::config::SweepCfg) -> Result<SweepSpec> {
        if cfg.values.is_empty() {
            return Err(Error::Config("sweep.values must be non-empty".into()));
        }
        if cfg.repeats == 0 {
            return Err(Error::Config("sweep.repeats must be >= 1".into()));
        }
        let baselines = cfg
            .baselines
            .iter()
            .map(|s| Method::parse(s))
            .collect::<Result<Vec<_>>>()?;
        let optimizers = cfg
            .optimizers
            .iter()
            .map(|s| match s.to_ascii_lowercase().as_str() {
                "fedavg" => Ok(OptimizerKind::FedAvg),
                "fedlion" => Ok(OptimizerKind::FedLion),
                other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SweepSpec {
            axis: SweepAxis::parse(&cfg.axis)?,
            values: cfg.values.clone(),
            repeats: cfg.repeats,
            baselines,
            optimizers,
        })
    }
}

/// Override one configuration knob with a sweep-axis value.
pub fn apply_axis(base: &ExperimentConfig, axis: SweepAxis, value: f64) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    match axis {
        SweepAxis::NumClusters => {
            if value < 1.0 || value.fract() != 0.0 {
                return Err(Error::Config(format!(
                    "num_clusters value must be a positive integer, got {value}"
                )));
            }
            cfg.federated.clusters = value as usize;
        }
        SweepAxis::TrainFraction => {
            if !(value > 0.0 && value <= 1.0) {
                return Err(Error::Config("train fraction must be in (0, 1]".into()));
            }
            cfg.data.train_frac = value;
        }
        SweepAxis::Epsilon => {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::Config("epsilon must be in [0, 1]".into()));
            }
            cfg.federated.eps = value;
            // The per-optimizer tables would shadow the swept value.
            cfg.fedavg.eps = Some(value);
            cfg.fedlion.eps = Some(value);
        }
        SweepAxis::UlSnr => {
            cfg.data.add_noise = "fixed".into();
            cfg.data.snr = value;
        }
    }
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// What produces beam scores for a batch of inputs.
pub enum Predictor<'a> {
    Model {
        net: &'a Network,
        params: &'a ModelParams,
    },
    Bundle {
        bundle: &'a MoeBundle,
        nets: &'a MoeNets,
    },
    /// Always scores the true label highest: the evaluation upper bound.
    Oracle,
    /// Always predicts one fixed beam: a lower reference bound.
    Constant(usize),
}

/// Raw evaluation counts; pooled rows add these across clients.
#[derive(Debug, Clone, Copy, Default)]
pub struct EvalCounts {
    pub draws: usize,
    pub correct: usize,
    pub top3: usize,
    pub capacity_sum: f64,
}

impl EvalCounts {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.draws as f64
    }

    pub fn top3_accuracy(&self) -> f64 {
        self.top3 as f64 / self.draws as f64
    }

    pub fn mean_capacity(&self) -> f64 {
        self.capacity_sum / self.draws as f64
    }

    pub fn add(&mut self, other: &EvalCounts) {
        self.draws += other.draws;
        self.correct += other.correct;
        self.top3 += other.top3;
        self.capacity_sum += other.capacity_sum;
    }
}

fn score_batch(
    pred: &Predictor,
    dataset: &FederatedDataset,
    idxs: &[usize],
    input_scale: f64,
    classes: usize,
) -> Result<Vec<f32>> {
    match pred {
        Predictor::Oracle => {
            let mut scores = vec![0f32; idxs.len() * classes];
            for (i, &idx) in idxs.iter().enumerate() {
                scores[i * classes + dataset.store[idx].label] = 1.0;
            }
            Ok(scores)
        }
        Predictor::Constant(beam) => {
            let mut scores = vec![0f32; idxs.len() * classes];
            for i in 0..idxs.len() {
                scores[i * classes + beam] = 1.0;
            }
            Ok(scores)
        }
        Predictor::Model { net, params } => {
            let td = data::tensor_for(dataset, idxs, input_scale);
            let (batch, _) = td.full();
            let mut dummy = rng::stream(0, &[]);
            let logits = net.forward(params, &batch, false, &mut dummy)?;
            Ok(logits.data)
        }
        Predictor::Bundle { bundle, nets } => {
            let td = data::tensor_for(dataset, idxs, input_scale);
            let n = td.len();
            let batch = Tensor::new(td.x, vec![n, td.channels, td.height, td.width])?;
            personalize::moe_mixed_probs(bundle, nets, &batch)
        }
    }
}

/// Top-1 with ties to the lowest index.
fn argmax_scores(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// The three highest-scoring beams; ties resolve toward lower indices.
fn top3_scores(row: &[f32]) -> [usize; 3] {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    [order[0], *order.get(1).unwrap_or(&order[0]), *order.get(2).unwrap_or(&order[0])]
}

/// Evaluate a predictor on bootstrap draws: top-1/top-3 accuracy and the mean
/// downlink capacity achieved by the predicted beam. Duplicate draws are
/// scored once and weighted by multiplicity.
pub fn evaluate(
    pred: &Predictor,
    dataset: &FederatedDataset,
    draws: &[usize],
    input_scale: f64,
    codebook: &Codebook,
    subcarrier_bandwidth_dl: f64,
) -> Result<EvalCounts> {
    let mut mult = std::collections::BTreeMap::new();
    for &i in draws {
        *mult.entry(i).or_insert(0usize) += 1;
    }
    let uniques: Vec<usize> = mult.keys().copied().collect();
    let classes = codebook.num_beams();
    let mut counts = EvalCounts::default();
    for chunk in uniques.chunks(512) {
        let scores = score_batch(pred, dataset, chunk, input_scale, classes)?;
        for (i, &idx) in chunk.iter().enumerate() {
            let row = &scores[i * classes..(i + 1) * classes];
            let sample = &dataset.store[idx];
            let predicted = argmax_scores(row);
            let in_top3 = top3_scores(row).contains(&sample.label);
            let cap = capacity(&sample.h_dl, predicted, codebook, subcarrier_bandwidth_dl)?;
            let m = mult[&idx];
            counts.draws += m;
            if predicted == sample.label {
                counts.correct += m;
            }
            if in_top3 {
                counts.top3 += m;
            }
            counts.capacity_sum += cap * m as f64;
        }
    }
    Ok(counts)
}

/// One row of the metrics table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub optimizer: OptimizerKind,
    pub method: Method,
    /// None = pooled over all clients.
    pub client: Option<usize>,
    pub accuracy: f64,
    pub top3_accuracy: f64,
    pub mean_capacity: f64,
    pub local_epochs: usize,
    pub seed: u64,
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

/// Everything one cell trains, kept around for evaluation and checkpointing.
pub struct PipelineOutput {
    pub dataset: FederatedDataset,
    pub input_scale: f64,
    pub clients: Vec<ClientData>,
    pub codebook: Codebook,
    pub subcarrier_bandwidth_dl: f64,
    pub fl_net: Network,
    pub local_net: Network,
    pub local_models: Option<Vec<TrainedModel>>,
    pub single: Option<(ClusterEnsemble, History)>,
    pub ifca: Option<(ClusterEnsemble, History, Vec<AssignmentRecord>)>,
    pub best_clusters: Option<Vec<(usize, ModelParams)>>,
    pub finetuned: Option<Vec<TrainedModel>>,
    pub moe: Option<Vec<(MoeBundle, usize)>>,
}

/// Generate and split the dataset for one cell.
pub fn build_dataset(cfg: &ExperimentConfig, dataset_seed: u64) -> Result<(FederatedDataset, f64)> {
    let scene = generate_scene(&cfg.scene, dataset_seed)?;
    let noise = cfg.noise_model();
    let samples = synthesize_channels(&scene, &noise, dataset_seed);
    let codebook = build_codebook(scene.antennas_dl, scene.num_beams)?;
    let fd = data::partition_by_strongest_bs(
        samples,
        cfg.data.num_clients,
        &codebook,
        scene.subcarrier_bandwidth_dl(),
        dataset_seed,
    )?;
    let fd = data::subsample_train(&fd, cfg.data.train_frac)?;
    let input_scale = if cfg.data.input_scale > 0.0 {
        cfg.data.input_scale
    } else {
        1.0 / data::train_input_rms(&fd)
    };
    Ok((fd, input_scale))
}

/// Train the requested methods (plus their prerequisites) on one cell.
pub fn run_pipeline(
    cfg: &ExperimentConfig,
    kind: OptimizerKind,
    methods: &[Method],
    cell_seed: u64,
) -> Result<PipelineOutput> {
    let need_local = methods.contains(&Method::Local) || methods.contains(&Method::Moe);
    let need_ifca = methods.contains(&Method::Ifca)
        || methods.contains(&Method::Finetuned)
        || methods.contains(&Method::Moe);
    let need_single = methods.contains(&Method::SingleGlobal);
    let need_ft = methods.contains(&Method::Finetuned);
    let need_moe = methods.contains(&Method::Moe);

    let dataset_seed = rng::mix(cell_seed, &[rng::TAG_DATASET]);
    let (dataset, input_scale) = build_dataset(cfg, dataset_seed)?;
    let clients = data::client_tensors(&dataset, input_scale);
    let scene_cb = build_codebook(cfg.scene.antennas_dl, cfg.scene.num_beams)?;
    let w_dl = cfg.scene.bandwidth_dl_hz / cfg.scene.subcarriers_dl as f64;

    let fl_net = Network::from_cnn(&cfg.fl_arch())?;
    let local_net = Network::from_cnn(&cfg.local_arch())?;
    let fed_cfg = cfg.federated_for(kind);
    let opt = cfg.server_opt_cfg(kind);

    let local_models = if need_local {
        let stop = cfg.local_stop_cfg();
        let arch = cfg.local_arch();
        Some(
            (0..clients.len())
                .into_par_iter()
                .map(|k| {
                    let mut stream =
                        rng::stream(cell_seed, &[rng::TAG_LOCAL_MODEL, k as u64]);
                    personalize::train_local_model(&clients[k], &arch, &stop, &mut stream)
                })
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };

    let single = if need_single {
        let seed = rng::mix(cell_seed, &[SUB_SINGLE]);
        let mut ensemble =
            ClusterEnsemble::init(&fl_net, 1, fed_cfg.eps, clients.len(), &opt, seed)?;
        let mut conv = cfg.convergence_cfg(kind, seed);
        // The round floor exists to give cluster assignment time to settle;
        // a single-model run has no assignment dynamics.
        conv.min_rounds = 0;
        let (history, _) = cluster::train_ensemble(&mut ensemble, &clients, &fl_net, &conv)?;
        Some((ensemble, history))
    } else {
        None
    };

    let ifca = if need_ifca {
        // Cluster assignment has a multistable start (which side adopts
        // which cluster is a coin flip that can land on full collapse), so
        // run independent seeded restarts and keep the run with the best
        // final validation loss. J = 1 has no assignment dynamics and runs
        // once.
        let restarts = if fed_cfg.clusters > 1 {
            fed_cfg.fl_restarts.max(1)
        } else {
            1
        };
        let mut best: Option<(ClusterEnsemble, crate::fed::History, Vec<AssignmentRecord>)> = None;
        for r in 0..restarts {
            let seed = rng::mix(cell_seed, &[SUB_IFCA, r as u64]);
            let mut ensemble = ClusterEnsemble::init(
                &fl_net,
                fed_cfg.clusters,
                fed_cfg.eps,
                clients.len(),
                &opt,
                seed,
            )?;
            let mut conv = cfg.convergence_cfg(kind, seed);
            if fed_cfg.clusters == 1 {
                conv.min_rounds = 0;
            }
            let (history, trace) =
                cluster::train_ensemble(&mut ensemble, &clients, &fl_net, &conv)?;
            let better = match &best {
                None => true,
                Some((_, h, _)) => history.best_val_loss < h.best_val_loss,
            };
            if better {
                best = Some((ensemble, history, trace));
            }
        }
        best
    } else {
        None
    };

    let best_clusters = match &ifca {
        Some((ensemble, _, _)) => Some(
            clients
                .par_iter()
                .map(|c| cluster::best_cluster_model(ensemble, c, &fl_net))
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };

    let finetuned = if need_ft {
        let stop = cfg.finetune_stop_cfg();
        let best = best_clusters.as_ref().expect("ifca ran");
        Some(
            (0..clients.len())
                .into_par_iter()
                .map(|k| {
                    let mut stream = rng::stream(cell_seed, &[rng::TAG_FINETUNE, k as u64]);
                    personalize::finetune(&best[k].1, &clients[k], &fl_net, &stop, &mut stream)
                })
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };

    let moe = if need_moe {
        let stop = cfg.moe_stop_cfg();
        let gate_arch = cfg.gate_arch();
        let gate_net = Network::from_gate(&gate_arch)?;
        let locals = local_models.as_ref().expect("local models ran");
        let best = best_clusters.as_ref().expect("ifca ran");
        let fl_arch = cfg.fl_arch();
        let local_arch = cfg.local_arch();
        Some(
            (0..clients.len())
                .into_par_iter()
                .map(|k| {
                    let mut stream = rng::stream(cell_seed, &[rng::TAG_GATE, k as u64]);
                    let mut gate_params = gate_net.init_params(&mut stream);
                    personalize::bias_gate_toward_global(&mut gate_params, 1.5);
                    let bundle = MoeBundle::new(
                        (locals[k].params.clone(), local_arch.clone()),
                        (best[k].1.clone(), fl_arch.clone()),
                        (gate_params, gate_arch.clone()),
                    )?;
                    personalize::moe_train(&bundle, &clients[k], &stop, &mut stream)
                })
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };

    Ok(PipelineOutput {
        dataset,
        input_scale,
        clients,
        codebook: scene_cb,
        subcarrier_bandwidth_dl: w_dl,
        fl_net,
        local_net,
        local_models,
        single,
        ifca,
        best_clusters,
        finetuned,
        moe,
    })
}

/// Evaluate the trained methods of one pipeline on bootstrapped test draws,
/// producing per-client rows plus one pooled row per method.
pub fn evaluate_pipeline(
    po: &PipelineOutput,
    cfg: &ExperimentConfig,
    kind: OptimizerKind,
    methods: &[Method],
    axis: SweepAxis,
    value: f64,
    cell_seed: u64,
) -> Result<Vec<MetricRow>> {
    let draws = data::bootstrap_test(&po.dataset, cfg.data.n_data_test, cell_seed)?;
    let k_total = po.clients.len();
    let mut rows = Vec::new();
    let moe_nets: Option<Vec<MoeNets>> = match &po.moe {
        Some(bundles) => Some(
            bundles
                .iter()
                .map(|(b, _)| MoeNets::compile(b))
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };

    for method in Method::ALL {
        if !methods.contains(&method) {
            continue;
        }
        let mut pooled = EvalCounts::default();
        let mut pooled_epochs = 0usize;
        let mut client_rows = Vec::with_capacity(k_total);
        for k in 0..k_total {
            let (pred, epochs): (Predictor, usize) = match method {
                Method::Local => {
                    let models = po.local_models.as_ref().expect("local trained");
                    (
                        Predictor::Model {
                            net: &po.local_net,
                            params: &models[k].params,
                        },
                        models[k].epochs_run,
                    )
                }
                Method::SingleGlobal => {
                    let (ensemble, history) = po.single.as_ref().expect("single trained");
                    (
                        Predictor::Model {
                            net: &po.fl_net,
                            params: &ensemble.models[0].weights,
                        },
                        history.total_local_epochs,
                    )
                }
                Method::Ifca => {
                    let (_, history, _) = po.ifca.as_ref().expect("ifca trained");
                    let best = po.best_clusters.as_ref().expect("ifca trained");
                    (
                        Predictor::Model {
                            net: &po.fl_net,
                            params: &best[k].1,
                        },
                        history.total_local_epochs,
                    )
                }
                Method::Finetuned => {
                    let (_, history, _) = po.ifca.as_ref().expect("ifca trained");
                    let ft = po.finetuned.as_ref().expect("finetuned trained");
                    (
                        Predictor::Model {
                            net: &po.fl_net,
                            params: &ft[k].params,
                        },
                        history.total_local_epochs + ft[k].epochs_run,
                    )
                }
                Method::Moe => {
                    let (_, history, _) = po.ifca.as_ref().expect("ifca trained");
                    let bundles = po.moe.as_ref().expect("moe trained");
                    let locals = po.local_models.as_ref().expect("local trained");
                    (
                        Predictor::Bundle {
                            bundle: &bundles[k].0,
                            nets: &moe_nets.as_ref().unwrap()[k],
                        },
                        history.total_local_epochs + locals[k].epochs_run + bundles[k].1,
                    )
                }
            };
            let counts = evaluate(
                &pred,
                &po.dataset,
                &draws[k],
                po.input_scale,
                &po.codebook,
                po.subcarrier_bandwidth_dl,
            )?;
            pooled.add(&counts);
            pooled_epochs = match method {
                Method::Local => pooled_epochs + epochs,
                Method::SingleGlobal | Method::Ifca => epochs,
                Method::Finetuned | Method::Moe => {
                    // Shared FL cost counted once; per-client extras add up.
                    let (_, history, _) = po.ifca.as_ref().unwrap();
                    let shared = history.total_local_epochs;
                    let extra = epochs - shared;
                    (pooled_epochs.max(shared)) + extra
                }
            };
            client_rows.push(MetricRow {
                axis,
                value,
                optimizer: kind,
                method,
                client: Some(k),
                accuracy: counts.accuracy(),
                top3_accuracy: counts.top3_accuracy(),
                mean_capacity: counts.mean_capacity(),
                local_epochs: epochs,
                seed: cell_seed,
            });
        }
        rows.extend(client_rows);
        rows.push(MetricRow {
            axis,
            value,
            optimizer: kind,
            method,
            client: None,
            accuracy: pooled.accuracy(),
            top3_accuracy: pooled.top3_accuracy(),
            mean_capacity: pooled.mean_capacity(),
            local_epochs: pooled_epochs,
            seed: cell_seed,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Sweep
// ---------------------------------------------------------------------------

/// Summary of one executed sweep cell.
#[derive(Debug, Clone)]
pub struct CellSummary {
    pub axis: SweepAxis,
    pub value: f64,
    pub optimizer: OptimizerKind,
    pub repeat: usize,
    pub cell_seed: u64,
    pub status: String,
    pub message: String,
    pub ifca_rounds: usize,
    pub total_local_epochs: usize,
    /// Stored model floats of the cluster ensemble: J x parameter count.
    pub storage_floats: usize,
}

pub struct SweepOutput {
    pub rows: Vec<MetricRow>,
    pub cells: Vec<CellSummary>,
    /// Per successful cell: (cell tag, ifca history, single history, trace, clusters).
    pub artifacts: Vec<CellArtifacts>,
}

pub struct CellArtifacts {
    pub tag: String,
    pub ifca_history: Option<History>,
    pub single_history: Option<History>,
    pub assignments: Vec<AssignmentRecord>,
    pub num_clusters: usize,
}

/// Run a full sweep: every value x optimizer x repeat as an independent,
/// seeded cell. A failed cell contributes an error row in the cell summary
/// without aborting the sweep.
pub fn run_sweep(
    spec: &SweepSpec,
    base: &ExperimentConfig,
    root_seed: u64,
) -> Result<SweepOutput> {
    struct CellSpec {
        vi: usize,
        value: f64,
        kind: OptimizerKind,
        repeat: usize,
        cell_seed: u64,
    }
    let mut cells = Vec::new();
    for (vi, &value) in spec.values.iter().enumerate() {
        for (oi, &kind) in spec.optimizers.iter().enumerate() {
            for repeat in 0..spec.repeats {
                cells.push(CellSpec {
                    vi,
                    value,
                    kind,
                    repeat,
                    cell_seed: rng::mix(
                        root_seed,
                        &[rng::TAG_CELL, vi as u64, oi as u64, repeat as u64],
                    ),
                });
            }
        }
    }

    let results: Vec<(Vec<MetricRow>, CellSummary, Option<CellArtifacts>)> = cells
        .par_iter()
        .map(|cell| {
            let tag = format!("v{}_{}_r{}", cell.vi, cell.kind, cell.repeat);
            let outcome = apply_axis(base, spec.axis, cell.value).and_then(|cfg| {
                let po = run_pipeline(&cfg, cell.kind, &spec.baselines, cell.cell_seed)?;
                let rows = evaluate_pipeline(
                    &po,
                    &cfg,
                    cell.kind,
                    &spec.baselines,
                    spec.axis,
                    cell.value,
                    cell.cell_seed,
                )?;
                Ok((po, rows))
            });
            match outcome {
                Ok((po, rows)) => {
                    let (ifca_rounds, total_epochs, storage, trace, j) = match &po.ifca {
                        Some((ensemble, history, trace)) => (
                            history.rounds_run,
                            history.total_local_epochs,
                            ensemble.num_clusters * po.fl_net.param_count(),
                            trace.clone(),
                            ensemble.num_clusters,
                        ),
                        None => (0, 0, 0, Vec::new(), 0),
                    };
                    let summary = CellSummary {
                        axis: spec.axis,
                        value: cell.value,
                        optimizer: cell.kind,
                        repeat: cell.repeat,
                        cell_seed: cell.cell_seed,
                        status: "ok".into(),
                        message: String::new(),
                        ifca_rounds,
                        total_local_epochs: total_epochs,
                        storage_floats: storage,
                    };
                    let artifacts = CellArtifacts {
                        tag,
                        ifca_history: po.ifca.as_ref().map(|(_, h, _)| h.clone()),
                        single_history: po.single.as_ref().map(|(_, h)| h.clone()),
                        assignments: trace,
                        num_clusters: j,
                    };
                    (rows, summary, Some(artifacts))
                }
                Err(e) => (
                    Vec::new(),
                    CellSummary {
                        axis: spec.axis,
                        value: cell.value,
                        optimizer: cell.kind,
                        repeat: cell.repeat,
                        cell_seed: cell.cell_seed,
                        status: "error".into(),
                        message: e.to_string(),
                        ifca_rounds: 0,
                        total_local_epochs: 0,
                        storage_floats: 0,
                    },
                    None,
                ),
            }
        })
        .collect();

    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    let mut artifacts = Vec::new();
    for (r, s, a) in results {
        rows.extend(r);
        summaries.push(s);
        if let Some(a) = a {
            artifacts.push(a);
        }
    }
    Ok(SweepOutput {
        rows,
        cells: summaries,
        artifacts,
    })
}

/// Write every sweep artifact (metrics, cell summaries, histories,
/// assignment traces) under a directory.
pub fn write_sweep_outputs(out: &SweepOutput, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("metrics.csv"), metrics_csv_string(&out.rows))?;
    std::fs::write(dir.join("cells.csv"), cells_csv_string(&out.cells))?;
    let hist_dir = dir.join("history");
    let assign_dir = dir.join("assignments");
    std::fs::create_dir_all(&hist_dir)?;
    std::fs::create_dir_all(&assign_dir)?;
    for a in &out.artifacts {
        if let Some(h) = &a.ifca_history {
            crate::fed::write_history_csv(hist_dir.join(format!("ifca_{}.csv", a.tag)), h)?;
        }
        if let Some(h) = &a.single_history {
            crate::fed::write_history_csv(hist_dir.join(format!("single_{}.csv", a.tag)), h)?;
        }
        cluster::write_assignment_csv(
            assign_dir.join(format!("{}.csv", a.tag)),
            &a.assignments,
            a.num_clusters,
        )?;
    }
    Ok(())
}

pub fn metrics_csv_string(rows: &[MetricRow]) -> String {
    let mut out = String::from(
        "axis,value,optimizer,method,client,accuracy,top3_accuracy,mean_capacity_bps,local_epochs,seed\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.axis.name(),
            r.value,
            r.optimizer,
            r.method.name(),
            r.client.map_or("pooled".to_string(), |c| c.to_string()),
            r.accuracy,
            r.top3_accuracy,
            r.mean_capacity,
            r.local_epochs,
            r.seed
        ));
    }
    out
}

pub fn cells_csv_string(cells: &[CellSummary]) -> String {
    let mut out = String::from(
        "axis,value,optimizer,repeat,cell_seed,status,ifca_rounds,total_local_epochs,storage_floats,message\n",
    );
    for c in cells {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            c.axis.name(),
            c.value,
            c.optimizer,
            c.repeat,
            c.cell_seed,
            c.status,
            c.ifca_rounds,
            c.total_local_epochs,
            c.storage_floats,
            c.message.replace(',', ";")
        ));
    }
    out
}

/// Parse a metrics CSV back into rows (used by `report` and tests).
pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 10 {
            return Err(Error::Format(format!("bad metrics row: {line}")));
        }
        let opt = match parts[2] {
            "fedavg" => OptimizerKind::FedAvg,
            "fedlion" => OptimizerKind::FedLion,
            other => return Err(Error::Format(format!("bad optimizer {other}"))),
        };
        rows.push(MetricRow {
            axis: SweepAxis::parse(parts[0])?,
            value: parts[1].parse().map_err(|_| Error::Format("bad value".into()))?,
            optimizer: opt,
            method: Method::parse(parts[3])?,
            client: if parts[4] == "pooled" {
                None
            } else {
                Some(parts[4].parse().map_err(|_| Error::Format("bad client".into()))?)
            },
            accuracy: parts[5].parse().map_err(|_| Error::Format("bad accuracy".into()))?,
            top3_accuracy: parts[6].parse().map_err(|_| Error::Format("bad top3".into()))?,
            mean_capacity: parts[7].parse().map_err(|_| Error::Format("bad capacity".into()))?,
            local_epochs: parts[8].parse().map_err(|_| Error::Format("bad epochs".into()))?,
            seed: parts[9].parse().map_err(|_| Error::Format("bad seed".into()))?,
        });
    }
    Ok(rows)
}

fn median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median of the pooled rows over repeats, for one (value, optimizer,
/// method) cell and one metric.
pub fn pooled_median(
    rows: &[MetricRow],
    value: f64,
    kind: OptimizerKind,
    method: Method,
    metric: fn(&MetricRow) -> f64,
) -> f64 {
    let mut vals: Vec<f64> = rows
        .iter()
        .filter(|r| {
            r.client.is_none() && r.value == value && r.optimizer == kind && r.method == method
        })
        .map(metric)
        .collect();
    median(&mut vals)
}

/// Render per-figure data files from a metrics CSV: for each optimizer and
/// metric, a table of sweep value x method medians (pooled rows only).
pub fn report(metrics_csv: impl AsRef<Path>, out_dir: impl AsRef<Path>) -> Result<Vec<String>> {
    let rows = read_metrics_csv(metrics_csv)?;
    if rows.is_empty() {
        return Err(Error::invalid("metrics file has no rows"));
    }
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let axis = rows[0].axis;
    let mut values: Vec<f64> = rows.iter().map(|r| r.value).collect();
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values.dedup();
    let mut optimizers: Vec<OptimizerKind> = Vec::new();
    for r in &rows {
        if !optimizers.contains(&r.optimizer) {
            optimizers.push(r.optimizer);
        }
    }
    let methods: Vec<Method> = Method::ALL
        .into_iter()
        .filter(|m| rows.iter().any(|r| r.method == *m))
        .collect();

    type Metric = (&'static str, fn(&MetricRow) -> f64);
    let metrics: [Metric; 4] = [
        ("acc", |r| r.accuracy),
        ("top3", |r| r.top3_accuracy),
        ("capacity", |r| r.mean_capacity),
        ("work", |r| r.local_epochs as f64),
    ];
    let mut written = Vec::new();
    for kind in &optimizers {
        for (name, metric) in &metrics {
            let mut out = String::from("value");
            for m in &methods {
                out.push_str(&format!(",{}", m.name()));
            }
            out.push('\n');
            for &v in &values {
                out.push_str(&format!("{v}"));
                for m in &methods {
                    let med = pooled_median(&rows, v, *kind, *m, *metric);
                    if med.is_nan() {
                        out.push(',');
                    } else {
                        out.push_str(&format!(",{med}"));
                    }
                }
                out.push('\n');
            }
            let fname = format!("{}_vs_{}_{}.csv", name, axis.name(), kind);
            std::fs::write(out_dir.join(&fname), out)?;
            written.push(fname);
        }
    }
    Ok(written)
}
