//! Python bindings for the beam-selection simulator.
//!
//! Exposes the codebook and capacity math, the FedAvg/FedLion server steps,
//! dataset generation and the full training pipeline, so Python scripts can
//! drive experiments or cross-check numerics without the CLI.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use beamfed_core::channel::{self, CGrid};
use beamfed_core::config::ExperimentConfig;
use beamfed_core::fed::{OptimizerKind, ServerOptCfg, ServerState};
use beamfed_core::harness::{self, Method, SweepAxis};
use beamfed_core::nn::ModelParams;
use beamfed_core::{data, rng};

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn grid_from_flat(
    flat: Vec<(f64, f64)>,
    subcarriers: usize,
) -> PyResult<CGrid> {
    if subcarriers == 0 || flat.len() % subcarriers != 0 {
        return Err(PyValueError::new_err(
            "flat channel length must be a multiple of the subcarrier count",
        ));
    }
    let antennas = flat.len() / subcarriers;
    let data = flat
        .into_iter()
        .map(|(re, im)| num_complex::Complex64::new(re, im))
        .collect();
    CGrid::from_data(data, subcarriers, antennas).map_err(err)
}

/// Quantized beam-steering codebook over a half-wavelength ULA.
#[pyclass(name = "Codebook")]
struct PyCodebook {
    inner: channel::Codebook,
}

#[pymethods]
impl PyCodebook {
    #[new]
    fn new(num_antennas: usize, num_beams: usize) -> PyResult<Self> {
        Ok(PyCodebook {
            inner: channel::build_codebook(num_antennas, num_beams).map_err(err)?,
        })
    }

    #[getter]
    fn num_antennas(&self) -> usize {
        self.inner.num_antennas()
    }

    #[getter]
    fn num_beams(&self) -> usize {
        self.inner.num_beams()
    }

    /// Entry (antenna, beam) as a (re, im) pair.
    fn entry(&self, antenna: usize, beam: usize) -> PyResult<(f64, f64)> {
        if antenna >= self.inner.num_antennas() || beam >= self.inner.num_beams() {
            return Err(PyValueError::new_err("index out of range"));
        }
        let v = self.inner.entry(antenna, beam);
        Ok((v.re, v.im))
    }

    /// Steering angle of a beam, radians.
    fn beam_angle(&self, beam: usize) -> f64 {
        self.inner.beam_angle(beam)
    }

    /// |a(angle)^H f(b)| for every beam.
    fn steering_response(&self, angle: f64) -> Vec<f64> {
        channel::steering_response(&self.inner, angle)
    }

    /// Mean capacity of a beam over a flat row-major (re, im) channel grid.
    fn capacity(
        &self,
        h_flat: Vec<(f64, f64)>,
        subcarriers: usize,
        beam: usize,
        subcarrier_bandwidth_hz: f64,
    ) -> PyResult<f64> {
        let grid = grid_from_flat(h_flat, subcarriers)?;
        channel::capacity(&grid, beam, &self.inner, subcarrier_bandwidth_hz).map_err(err)
    }

    /// Index of the capacity-maximizing beam (ties to the lowest index).
    fn label_optimal_beam(&self, h_flat: Vec<(f64, f64)>, subcarriers: usize) -> PyResult<usize> {
        let grid = grid_from_flat(h_flat, subcarriers)?;
        Ok(channel::label_optimal_beam(&grid, &self.inner))
    }
}

/// One FedLion server step: returns (new_weights, new_momentum).
#[pyfunction]
#[allow(clippy::too_many_arguments)]
fn fedlion_step(
    weights: Vec<f32>,
    momentum: Vec<f32>,
    update: Vec<f32>,
    lr: f64,
    lr_decay: f64,
    lambda: f64,
    beta1: f64,
    beta2: f64,
    round: u64,
) -> PyResult<(Vec<f32>, Vec<f32>)> {
    if weights.len() != momentum.len() || weights.len() != update.len() {
        return Err(PyValueError::new_err("length mismatch"));
    }
    let cfg = ServerOptCfg {
        kind: OptimizerKind::FedLion,
        lr,
        lr_decay,
        lambda,
        beta1,
        beta2,
    };
    let params = ModelParams {
        values: weights,
        layout: vec![],
    };
    let mut state = ServerState::new(params, &cfg).map_err(err)?;
    state.momentum = momentum;
    state.round = round;
    beamfed_core::fed::fedlion_step(&mut state, &update);
    Ok((state.weights.values, state.momentum))
}

/// One FedAvg server step: returns the new weights.
#[pyfunction]
fn fedavg_step(
    weights: Vec<f32>,
    update: Vec<f32>,
    lr: f64,
    lr_decay: f64,
    round: u64,
) -> PyResult<Vec<f32>> {
    if weights.len() != update.len() {
        return Err(PyValueError::new_err("length mismatch"));
    }
    let cfg = ServerOptCfg {
        kind: OptimizerKind::FedAvg,
        lr,
        lr_decay,
        lambda: 0.0,
        beta1: 0.95,
        beta2: 0.98,
    };
    let params = ModelParams {
        values: weights,
        layout: vec![],
    };
    let mut state = ServerState::new(params, &cfg).map_err(err)?;
    state.round = round;
    beamfed_core::fed::fedavg_step(&mut state, &update);
    Ok(state.weights.values)
}

/// Generate a dataset file plus sidecar from a TOML/JSON config.
#[pyfunction]
fn gen_dataset(py: Python<'_>, config_path: &str, seed: u64, out_path: &str) -> PyResult<Py<PyDict>> {
    let cfg = ExperimentConfig::load(config_path).map_err(err)?;
    let dataset_seed = rng::mix(seed, &[rng::TAG_DATASET]);
    let scene = channel::generate_scene(&cfg.scene, dataset_seed).map_err(err)?;
    let noise = cfg.noise_model();
    let samples = channel::synthesize_channels(&scene, &noise, dataset_seed);
    let codebook = channel::build_codebook(scene.antennas_dl, scene.num_beams).map_err(err)?;
    let fd = data::partition_by_strongest_bs(
        samples,
        cfg.data.num_clients,
        &codebook,
        scene.subcarrier_bandwidth_dl(),
        dataset_seed,
    )
    .map_err(err)?;
    let input_scale = if cfg.data.input_scale > 0.0 {
        cfg.data.input_scale
    } else {
        1.0 / data::train_input_rms(&fd)
    };
    let header = channel::file::DatasetHeader {
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
    channel::file::write_dataset(out_path, &header, &fd.store).map_err(err)?;
    let sidecar = data::Sidecar {
        config: cfg.to_json_value().map_err(err)?,
        seed,
        input_scale,
        splits: fd.clients.clone(),
    };
    let sidecar_path = std::path::Path::new(out_path).with_extension("json");
    data::write_sidecar(&sidecar_path, &sidecar).map_err(err)?;

    let out = PyDict::new(py);
    out.set_item("samples", fd.store.len())?;
    out.set_item("clients", fd.num_clients())?;
    out.set_item("input_scale", input_scale)?;
    out.set_item(
        "client_sizes",
        fd.clients.iter().map(|c| c.total()).collect::<Vec<_>>(),
    )?;
    Ok(out.into())
}

/// A loaded dataset file.
#[pyclass(name = "Dataset")]
struct PyDataset {
    header: channel::file::DatasetHeader,
    samples: Vec<channel::ChannelSample>,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let (header, samples) = channel::file::read_dataset(path).map_err(err)?;
        Ok(PyDataset { header, samples })
    }

    #[getter]
    fn num_samples(&self) -> usize {
        self.samples.len()
    }

    #[getter]
    fn num_clients(&self) -> usize {
        self.header.num_clients
    }

    #[getter]
    fn num_beams(&self) -> usize {
        self.header.num_beams
    }

    fn label(&self, i: usize) -> PyResult<usize> {
        self.check(i)?;
        Ok(self.samples[i].label)
    }

    fn client_id(&self, i: usize) -> PyResult<usize> {
        self.check(i)?;
        Ok(self.samples[i].client_id)
    }

    fn ul_snr_db(&self, i: usize) -> PyResult<f64> {
        self.check(i)?;
        Ok(self.samples[i].ul_snr_db)
    }

    /// Flat row-major (re, im) uplink grid of one sample.
    fn h_ul(&self, i: usize) -> PyResult<Vec<(f64, f64)>> {
        self.check(i)?;
        Ok(self.samples[i].h_ul.data().iter().map(|c| (c.re, c.im)).collect())
    }

    /// Flat row-major (re, im) downlink grid of one sample.
    fn h_dl(&self, i: usize) -> PyResult<Vec<(f64, f64)>> {
        self.check(i)?;
        Ok(self.samples[i].h_dl.data().iter().map(|c| (c.re, c.im)).collect())
    }

    #[getter]
    fn subcarriers_ul(&self) -> usize {
        self.header.subcarriers_ul
    }

    #[getter]
    fn subcarriers_dl(&self) -> usize {
        self.header.subcarriers_dl
    }
}

impl PyDataset {
    fn check(&self, i: usize) -> PyResult<()> {
        if i >= self.samples.len() {
            return Err(PyValueError::new_err("sample index out of range"));
        }
        Ok(())
    }
}

/// Run one full training pipeline and return pooled metrics per method.
#[pyfunction]
#[pyo3(signature = (config_path, seed, optimizer=None, methods=None))]
fn run_training(
    py: Python<'_>,
    config_path: &str,
    seed: u64,
    optimizer: Option<&str>,
    methods: Option<Vec<String>>,
) -> PyResult<Py<PyDict>> {
    let cfg = ExperimentConfig::load(config_path).map_err(err)?;
    let kind = match optimizer {
        Some("fedavg") => OptimizerKind::FedAvg,
        Some("fedlion") => OptimizerKind::FedLion,
        Some(other) => return Err(PyValueError::new_err(format!("unknown optimizer {other}"))),
        None => cfg.optimizer_kind().map_err(err)?,
    };
    let methods: Vec<Method> = match methods {
        Some(list) => list
            .iter()
            .map(|s| Method::parse(s).map_err(err))
            .collect::<PyResult<_>>()?,
        None => Method::ALL.to_vec(),
    };
    let po = harness::run_pipeline(&cfg, kind, &methods, seed).map_err(err)?;
    let rows = harness::evaluate_pipeline(
        &po,
        &cfg,
        kind,
        &methods,
        SweepAxis::NumClusters,
        cfg.federated.clusters as f64,
        seed,
    )
    .map_err(err)?;
    let out = PyDict::new(py);
    for r in rows.iter().filter(|r| r.client.is_none()) {
        let entry = PyDict::new(py);
        entry.set_item("accuracy", r.accuracy)?;
        entry.set_item("top3_accuracy", r.top3_accuracy)?;
        entry.set_item("mean_capacity_bps", r.mean_capacity)?;
        entry.set_item("local_epochs", r.local_epochs)?;
        out.set_item(r.method.name(), entry)?;
    }
    Ok(out.into())
}

/// Deterministic seed derivation used across the simulator.
#[pyfunction]
fn derive_seed(root: u64, tags: Vec<u64>) -> u64 {
    rng::mix(root, &tags)
}

#[pymodule]
fn beamfed_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyCodebook>()?;
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(fedlion_step, m)?)?;
    m.add_function(wrap_pyfunction!(fedavg_step, m)?)?;
    m.add_function(wrap_pyfunction!(gen_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(run_training, m)?)?;
    m.add_function(wrap_pyfunction!(derive_seed, m)?)?;
    Ok(())
}
