//! Command-line front end: dataset generation, training, sweeps, checkpoint
//! evaluation and figure-data reporting.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use beamfed_core::channel::file::{read_dataset, write_dataset, DatasetHeader};
use beamfed_core::config::ExperimentConfig;
use beamfed_core::fed::OptimizerKind;
use beamfed_core::harness::{
    self, evaluate, evaluate_pipeline, run_pipeline, run_sweep, EvalCounts, Method, MetricRow,
    Predictor, SweepAxis, SweepSpec,
};
use beamfed_core::nn::file::{read_checkpoint, write_checkpoint};
use beamfed_core::nn::{ArchSpec, Network};
use beamfed_core::{channel, cluster, data, fed, personalize, rng};

#[derive(Parser)]
#[command(
    name = "beamfed",
    about = "Federated mmWave beam selection simulator",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset file plus its JSON sidecar.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Output dataset path; the sidecar lands next to it as .json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training pipeline and write metrics, histories, checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Override federated.server_optim.
        #[arg(long)]
        optimizer: Option<String>,
    },
    /// Run the configured sweep.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads (default: all cores). Output is identical for any
        /// worker count.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Evaluate a saved checkpoint on a saved dataset.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Optional metrics CSV output path (defaults to stdout only).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render per-figure data files from a sweep metrics CSV.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Gen { config, seed, out } => cmd_gen(&config, seed, &out),
        Command::Train {
            config,
            seed,
            out,
            optimizer,
        } => cmd_train(&config, seed, &out, optimizer.as_deref()),
        Command::Sweep {
            config,
            seed,
            out,
            workers,
        } => cmd_sweep(&config, seed, &out, workers),
        Command::Eval {
            config,
            checkpoint,
            dataset,
            seed,
            out,
        } => cmd_eval(&config, &checkpoint, &dataset, seed, out.as_deref()),
        Command::Report { input, out } => {
            let files = harness::report(&input, &out)?;
            for f in files {
                println!("wrote {}", out.join(f).display());
            }
            Ok(())
        }
    }
}

fn sidecar_path(dataset: &Path) -> PathBuf {
    dataset.with_extension("json")
}

fn cmd_gen(config: &Path, seed: u64, out: &Path) -> anyhow::Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let dataset_seed = rng::mix(seed, &[rng::TAG_DATASET]);
    let scene = channel::generate_scene(&cfg.scene, dataset_seed)?;
    let noise = cfg.noise_model();
    let samples = channel::synthesize_channels(&scene, &noise, dataset_seed);
    let codebook = channel::build_codebook(scene.antennas_dl, scene.num_beams)?;
    let fd = data::partition_by_strongest_bs(
        samples,
        cfg.data.num_clients,
        &codebook,
        scene.subcarrier_bandwidth_dl(),
        dataset_seed,
    )?;
    let input_scale = if cfg.data.input_scale > 0.0 {
        cfg.data.input_scale
    } else {
        1.0 / data::train_input_rms(&fd)
    };
    let header = DatasetHeader {
        subcarriers_ul: scene.subcarriers_ul,
        antennas_ul: scene.antennas_ul,
        subcarriers_dl: scene.subcarriers_dl,
        antennas_dl: scene.antennas_dl,
        num_beams: scene.num_beams,
        num_clients: cfg.data.num_clients,
        carrier_ul_hz: scene.carrier_ul_hz,
        carrier_dl_hz: scene.carrier_dl_hz,
        bandwidth_ul_hz: scene.bandwidth_ul_hz,
        bandwidth_dl_hz: scene.bandwidth_dl_hz,
        seed,
        noise,
    };
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    write_dataset(out, &header, &fd.store)?;
    let sidecar = data::Sidecar {
        config: cfg.to_json_value()?,
        seed,
        input_scale,
        splits: fd.clients.clone(),
    };
    data::write_sidecar(sidecar_path(out), &sidecar)?;
    println!(
        "wrote {} ({} samples, {} clients) and sidecar {}",
        out.display(),
        fd.store.len(),
        fd.num_clients(),
        sidecar_path(out).display()
    );
    Ok(())
}

fn parse_optimizer(s: &str) -> anyhow::Result<OptimizerKind> {
    match s.to_ascii_lowercase().as_str() {
        "fedavg" => Ok(OptimizerKind::FedAvg),
        "fedlion" => Ok(OptimizerKind::FedLion),
        other => bail!("unknown optimizer {other:?}"),
    }
}

fn cmd_train(config: &Path, seed: u64, out: &Path, optimizer: Option<&str>) -> anyhow::Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let kind = match optimizer {
        Some(s) => parse_optimizer(s)?,
        None => cfg.optimizer_kind()?,
    };
    let methods: Vec<Method> = if cfg.sweep.baselines.is_empty() {
        Method::ALL.to_vec()
    } else {
        cfg.sweep
            .baselines
            .iter()
            .map(|s| Method::parse(s))
            .collect::<beamfed_core::Result<_>>()?
    };
    std::fs::create_dir_all(out)?;
    let po = run_pipeline(&cfg, kind, &methods, seed)?;
    let axis = SweepAxis::parse(&cfg.sweep.axis).unwrap_or(SweepAxis::NumClusters);
    let rows = evaluate_pipeline(
        &po,
        &cfg,
        kind,
        &methods,
        axis,
        cfg.federated.clusters as f64,
        seed,
    )?;
    std::fs::write(out.join("metrics.csv"), harness::metrics_csv_string(&rows))?;

    if let Some((ensemble, history)) = &po.single {
        fed::write_history_csv(out.join("history_single.csv"), history)?;
        write_checkpoint(
            out.join("single_global.ckpt"),
            &ArchSpec::Cnn(cfg.fl_arch()),
            &ensemble.models[0].weights,
        )?;
    }
    if let Some((ensemble, history, trace)) = &po.ifca {
        fed::write_history_csv(out.join("history_ifca.csv"), history)?;
        cluster::write_assignment_csv(out.join("assignments.csv"), trace, ensemble.num_clusters)?;
        for (j, state) in ensemble.models.iter().enumerate() {
            write_checkpoint(
                out.join(format!("cluster{j}.ckpt")),
                &ArchSpec::Cnn(cfg.fl_arch()),
                &state.weights,
            )?;
        }
    }
    if let Some(models) = &po.local_models {
        for (k, m) in models.iter().enumerate() {
            write_checkpoint(
                out.join(format!("local_client{k}.ckpt")),
                &ArchSpec::Cnn(cfg.local_arch()),
                &m.params,
            )?;
        }
    }
    if let Some(models) = &po.finetuned {
        for (k, m) in models.iter().enumerate() {
            write_checkpoint(
                out.join(format!("finetuned_client{k}.ckpt")),
                &ArchSpec::Cnn(cfg.fl_arch()),
                &m.params,
            )?;
        }
    }
    if let Some(bundles) = &po.moe {
        for (k, (b, _)) in bundles.iter().enumerate() {
            personalize::write_bundle(out.join(format!("moe_client{k}.moe")), b)?;
        }
    }
    for r in rows.iter().filter(|r| r.client.is_none()) {
        println!(
            "{:>13} accuracy {:.4} top3 {:.4} capacity {:.3e}",
            r.method.name(),
            r.accuracy,
            r.top3_accuracy,
            r.mean_capacity
        );
    }
    println!("artifacts in {}", out.display());
    Ok(())
}

fn cmd_sweep(config: &Path, seed: u64, out: &Path, workers: Option<usize>) -> anyhow::Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let spec = SweepSpec::from_config(&cfg.sweep)?;
    let run = || -> anyhow::Result<()> {
        let output = run_sweep(&spec, &cfg, seed)?;
        harness::write_sweep_outputs(&output, out)?;
        let errors = output.cells.iter().filter(|c| c.status != "ok").count();
        println!(
            "{} cells ({} failed), {} metric rows -> {}",
            output.cells.len(),
            errors,
            output.rows.len(),
            out.display()
        );
        Ok(())
    };
    match workers {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .context("building worker pool")?;
            pool.install(run)
        }
        None => run(),
    }
}

fn cmd_eval(
    config: &Path,
    checkpoint: &Path,
    dataset: &Path,
    seed: u64,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let (arch, params) = read_checkpoint(checkpoint)?;
    let net = Network::from_spec(&arch)?;
    let (header, samples) = read_dataset(dataset)?;
    let sidecar = data::read_sidecar(sidecar_path(dataset))?;
    let fd = data::FederatedDataset {
        store: std::sync::Arc::new(samples),
        clients: sidecar.splits.clone(),
        seed: sidecar.seed,
    };
    let codebook = channel::build_codebook(header.antennas_dl, header.num_beams)?;
    let draws = data::bootstrap_test(&fd, cfg.data.n_data_test, seed)?;
    let w_dl = header.subcarrier_bandwidth_dl();
    let mut rows: Vec<MetricRow> = Vec::new();
    let mut pooled = EvalCounts::default();
    for (k, client_draws) in draws.iter().enumerate() {
        let counts = evaluate(
            &Predictor::Model {
                net: &net,
                params: &params,
            },
            &fd,
            client_draws,
            sidecar.input_scale,
            &codebook,
            w_dl,
        )?;
        pooled.add(&counts);
        rows.push(MetricRow {
            axis: SweepAxis::NumClusters,
            value: 0.0,
            optimizer: cfg.optimizer_kind()?,
            method: Method::SingleGlobal,
            client: Some(k),
            accuracy: counts.accuracy(),
            top3_accuracy: counts.top3_accuracy(),
            mean_capacity: counts.mean_capacity(),
            local_epochs: 0,
            seed,
        });
        println!(
            "client {k}: accuracy {:.4} top3 {:.4} capacity {:.3e}",
            counts.accuracy(),
            counts.top3_accuracy(),
            counts.mean_capacity()
        );
    }
    println!(
        "pooled:   accuracy {:.4} top3 {:.4} capacity {:.3e}",
        pooled.accuracy(),
        pooled.top3_accuracy(),
        pooled.mean_capacity()
    );
    if let Some(path) = out {
        std::fs::write(path, harness::metrics_csv_string(&rows))?;
    }
    Ok(())
}
