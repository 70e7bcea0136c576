//! Post-federated personalization: from-scratch local baselines, fine-tuning
//! of the best cluster model, and a two-expert mixture with a trained gate.
//!
//! The experts (a purely local model and a frozen copy of the best global
//! cluster model) are fixed during gate training; only the gate learns. The
//! gate sees the same two-channel uplink input as the experts and mixes the
//! experts' softmax outputs in probability space.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fed::{self, ClientData};
use crate::nn::{
    self, ArchSpec, CnnArch, GateArch, ModelParams, Network, Real, Tensor, TensorDataset,
};
use crate::rng;

/// Early-stopped SGD settings shared by local training, fine-tuning and gate
/// training.
#[derive(Debug, Clone, Copy)]
pub struct EarlyStopCfg {
    pub max_epochs: usize,
    /// Consecutive non-improving validation epochs tolerated.
    pub patience: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub params: ModelParams,
    pub epochs_run: usize,
    pub best_val_loss: f64,
}

/// SGD with per-epoch validation, returning the best-validation checkpoint.
/// The starting weights count as the initial best, so the result is never
/// worse on validation than the start.
fn train_early_stop(
    start: &ModelParams,
    net: &Network,
    client: &ClientData,
    cfg: &EarlyStopCfg,
    rng: &mut ChaCha8Rng,
) -> Result<TrainedModel> {
    if client.train.is_empty() {
        return Err(Error::invalid("empty training split"));
    }
    let (start_loss, _) = fed::eval_metrics(net, start, &client.val)?;
    let mut best = TrainedModel {
        params: start.clone(),
        epochs_run: 0,
        best_val_loss: if start_loss.is_nan() {
            f64::INFINITY
        } else {
            start_loss
        },
    };
    let mut current = start.clone();
    let mut bad = 0usize;
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..client.train.len()).collect();
    for epoch in 0..cfg.max_epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (batch, labels) = client.train.batch(chunk);
            let (_, grad) = net.backward(&current, &batch, &labels, true, rng)?;
            let lr_t = cfg.lr / (1.0 + cfg.lr_decay * step as f64);
            nn::sgd_step(&mut current.values, &grad, lr_t, cfg.weight_decay);
            step += 1;
        }
        let (val_loss, _) = fed::eval_metrics(net, &current, &client.val)?;
        if val_loss < best.best_val_loss {
            best = TrainedModel {
                params: current.clone(),
                epochs_run: epoch + 1,
                best_val_loss: val_loss,
            };
            bad = 0;
        } else {
            bad += 1;
        }
        if bad >= cfg.patience {
            best.epochs_run = epoch + 1;
            return Ok(best);
        }
    }
    best.epochs_run = cfg.max_epochs;
    Ok(best)
}

/// Train a purely local model from scratch on the client's training split,
/// early-stopped on its validation split.
pub fn train_local_model(
    client: &ClientData,
    arch: &CnnArch,
    cfg: &EarlyStopCfg,
    rng: &mut ChaCha8Rng,
) -> Result<TrainedModel> {
    let net = Network::from_cnn(arch)?;
    let init = net.init_params(rng);
    train_early_stop(&init, &net, client, cfg, rng)
}

/// Continue SGD from `start` on the client's training split (fine-tuning),
/// keeping the best validation checkpoint.
pub fn finetune(
    start: &ModelParams,
    client: &ClientData,
    net: &Network,
    cfg: &EarlyStopCfg,
    rng: &mut ChaCha8Rng,
) -> Result<TrainedModel> {
    train_early_stop(start, net, client, cfg, rng)
}

// ---------------------------------------------------------------------------
// Mixture of experts
// ---------------------------------------------------------------------------

/// Two frozen experts plus the trainable gate.
#[derive(Debug, Clone)]
pub struct MoeBundle {
    pub local_expert: (ModelParams, CnnArch),
    pub global_expert: (ModelParams, CnnArch),
    pub gate: (ModelParams, GateArch),
}

impl MoeBundle {
    pub fn new(
        local_expert: (ModelParams, CnnArch),
        global_expert: (ModelParams, CnnArch),
        gate: (ModelParams, GateArch),
    ) -> Result<Self> {
        let (l, g) = (&local_expert.1, &global_expert.1);
        if l.num_classes != g.num_classes || l.input_h != g.input_h || l.input_w != g.input_w {
            return Err(Error::invalid(
                "experts must share input shape and class count",
            ));
        }
        if gate.1.input_h != l.input_h || gate.1.input_w != l.input_w {
            return Err(Error::invalid("gate input shape must match the experts"));
        }
        Ok(MoeBundle {
            local_expert,
            global_expert,
            gate,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.local_expert.1.num_classes
    }
}

/// Compiled networks for one bundle.
pub struct MoeNets {
    pub local: Network,
    pub global_: Network,
    pub gate: Network,
}

impl MoeNets {
    pub fn compile(bundle: &MoeBundle) -> Result<MoeNets> {
        Ok(MoeNets {
            local: Network::from_cnn(&bundle.local_expert.1)?,
            global_: Network::from_cnn(&bundle.global_expert.1)?,
            gate: Network::from_gate(&bundle.gate.1)?,
        })
    }
}

/// Row-wise softmax of a logits matrix.
fn softmax_rows<T: Real>(logits: &[T], classes: usize) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    for (row, orow) in logits.chunks(classes).zip(out.chunks_mut(classes)) {
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        for &v in row {
            denom += (v - max).exp();
        }
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp() / denom;
        }
    }
    out
}

/// Gate objective: negative log-likelihood of the mixed probability
/// `p = g0 * p_local + g1 * p_global`, with `(g0, g1) = softmax(gate logits)`.
/// Returns the loss and its gradient with respect to the gate logits.
fn moe_loss_and_dgate<T: Real>(
    gate_logits: &[T],
    p_local: &[T],
    p_global: &[T],
    labels: &[usize],
    classes: usize,
) -> (f64, Vec<T>) {
    let n = labels.len();
    let gates = softmax_rows(gate_logits, 2);
    let mut dz = vec![T::zero(); gate_logits.len()];
    let mut loss = 0.0f64;
    let inv_n = T::from_f64(1.0 / n as f64).unwrap();
    for i in 0..n {
        let y = labels[i];
        let (g0, g1) = (gates[i * 2], gates[i * 2 + 1]);
        let (pl, pg) = (p_local[i * classes + y], p_global[i * classes + y]);
        let pmix = g0 * pl + g1 * pg;
        loss += -pmix.to_f64().unwrap().ln();
        // dL/dg_e = -p_e[y] / pmix / n, then softmax Jacobian to logits.
        let dg0 = -(pl / pmix) * inv_n;
        let dg1 = -(pg / pmix) * inv_n;
        let inner = dg0 * g0 + dg1 * g1;
        dz[i * 2] = g0 * (dg0 - inner);
        dz[i * 2 + 1] = g1 * (dg1 - inner);
    }
    (loss / n as f64, dz)
}

/// Shift the gate's output-layer bias so the mixture initially leans on the
/// global expert. The shared model is the stronger expert at the start of
/// gate training; beginning there lets validation-based early stopping keep
/// any step toward the local expert only when it actually helps.
pub fn bias_gate_toward_global(gate_params: &mut ModelParams, logit_offset: f32) {
    if let Some(entry) = gate_params.layout.last() {
        if entry.name.ends_with(".bias") && entry.shape == [2] {
            gate_params.values[entry.offset + 1] += logit_offset;
        }
    }
}

/// f64 twin of the gate objective for numeric checks: mixed-probability NLL
/// and its gradient with respect to the gate logits.
pub fn moe_gate_loss_f64(
    gate_logits: &[f64],
    p_local: &[f64],
    p_global: &[f64],
    labels: &[usize],
    classes: usize,
) -> (f64, Vec<f64>) {
    moe_loss_and_dgate::<f64>(gate_logits, p_local, p_global, labels, classes)
}

/// Expert softmax outputs for a whole dataset split, computed once since the
/// experts are frozen.
fn expert_probs(
    net: &Network,
    params: &ModelParams,
    data: &TensorDataset,
) -> Result<Vec<f32>> {
    if data.is_empty() {
        return Ok(Vec::new());
    }
    let (batch, _) = data.full();
    let mut dummy = rng::stream(0, &[]);
    let logits = net.forward(params, &batch, false, &mut dummy)?;
    Ok(softmax_rows(&logits.data, net.num_outputs()))
}

fn gather_rows(probs: &[f32], idxs: &[usize], classes: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(idxs.len() * classes);
    for &i in idxs {
        out.extend_from_slice(&probs[i * classes..(i + 1) * classes]);
    }
    out
}

/// Mean mixed-probability NLL of the gate over one split, evaluation mode.
fn moe_val_loss(
    gate_net: &Network,
    gate_params: &ModelParams,
    data: &TensorDataset,
    p_local: &[f32],
    p_global: &[f32],
    classes: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Ok(f64::INFINITY);
    }
    let (batch, labels) = data.full();
    let mut dummy = rng::stream(0, &[]);
    let logits = gate_net.forward(gate_params, &batch, false, &mut dummy)?;
    let (loss, _) = moe_loss_and_dgate::<f32>(&logits.data, p_local, p_global, &labels, classes);
    Ok(loss)
}

/// Train the gate with the experts frozen; early stopping on the client's
/// validation split under the mixed loss. Expert parameters are untouched.
pub fn moe_train(
    bundle: &MoeBundle,
    client: &ClientData,
    cfg: &EarlyStopCfg,
    rng: &mut ChaCha8Rng,
) -> Result<(MoeBundle, usize)> {
    let nets = MoeNets::compile(bundle)?;
    let classes = bundle.num_classes();
    let pl_train = expert_probs(&nets.local, &bundle.local_expert.0, &client.train)?;
    let pg_train = expert_probs(&nets.global_, &bundle.global_expert.0, &client.train)?;
    let pl_val = expert_probs(&nets.local, &bundle.local_expert.0, &client.val)?;
    let pg_val = expert_probs(&nets.global_, &bundle.global_expert.0, &client.val)?;

    let mut current = bundle.gate.0.clone();
    let mut best_params = current.clone();
    let mut best_loss = moe_val_loss(
        &nets.gate,
        &current,
        &client.val,
        &pl_val,
        &pg_val,
        classes,
    )?;
    let mut best_epoch = 0usize;
    let mut bad = 0usize;
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..client.train.len()).collect();
    let mut epochs_run = 0usize;
    for epoch in 0..cfg.max_epochs {
        epochs_run = epoch + 1;
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (batch, labels) = client.train.batch(chunk);
            let pl = gather_rows(&pl_train, chunk, classes);
            let pg = gather_rows(&pg_train, chunk, classes);
            let (_, grad) = nets.gate.backward_with(&current, &batch, true, rng, |logits| {
                moe_loss_and_dgate::<f32>(logits, &pl, &pg, &labels, classes)
            })?;
            let lr_t = cfg.lr / (1.0 + cfg.lr_decay * step as f64);
            nn::sgd_step(&mut current.values, &grad, lr_t, cfg.weight_decay);
            step += 1;
        }
        let val = moe_val_loss(&nets.gate, &current, &client.val, &pl_val, &pg_val, classes)?;
        if val < best_loss {
            best_loss = val;
            best_params = current.clone();
            best_epoch = epoch + 1;
            bad = 0;
        } else {
            bad += 1;
        }
        if bad >= cfg.patience {
            break;
        }
    }
    let _ = best_epoch;
    let out = MoeBundle {
        local_expert: bundle.local_expert.clone(),
        global_expert: bundle.global_expert.clone(),
        gate: (best_params, bundle.gate.1.clone()),
    };
    Ok((out, epochs_run))
}

/// Mixed class probabilities for a batch, shape `[n, classes]`.
pub fn moe_mixed_probs(bundle: &MoeBundle, nets: &MoeNets, batch: &Tensor) -> Result<Vec<f32>> {
    let classes = bundle.num_classes();
    let mut dummy = rng::stream(0, &[]);
    let ll = nets.local.forward(&bundle.local_expert.0, batch, false, &mut dummy)?;
    let gl = nets
        .global_
        .forward(&bundle.global_expert.0, batch, false, &mut dummy)?;
    let zl = nets.gate.forward(&bundle.gate.0, batch, false, &mut dummy)?;
    let pl = softmax_rows(&ll.data, classes);
    let pg = softmax_rows(&gl.data, classes);
    let g = softmax_rows(&zl.data, 2);
    let n = batch.shape[0];
    let mut out = vec![0f32; n * classes];
    for i in 0..n {
        let (g0, g1) = (g[i * 2], g[i * 2 + 1]);
        for c in 0..classes {
            out[i * classes + c] = g0 * pl[i * classes + c] + g1 * pg[i * classes + c];
        }
    }
    Ok(out)
}

/// Predicted beam and mixed probability vector for one input sample; ties
/// break to the lowest index.
pub fn moe_predict(bundle: &MoeBundle, nets: &MoeNets, sample: &Tensor) -> Result<(usize, Vec<f32>)> {
    let probs = moe_mixed_probs(bundle, nets, sample)?;
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    Ok((best, probs))
}

// ---------------------------------------------------------------------------
// Bundle checkpoints
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"BFMO";
const VERSION: u16 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BundleManifest {
    local_arch: ArchSpec,
    global_arch: ArchSpec,
    gate_arch: ArchSpec,
    local_layout: Vec<nn::LayoutEntry>,
    global_layout: Vec<nn::LayoutEntry>,
    gate_layout: Vec<nn::LayoutEntry>,
}

/// Personalized bundle checkpoint: manifest header plus the three parameter
/// vectors (local, global, gate) concatenated, little-endian f32.
pub fn write_bundle(path: impl AsRef<std::path::Path>, bundle: &MoeBundle) -> Result<()> {
    use std::io::Write;
    let manifest = BundleManifest {
        local_arch: ArchSpec::Cnn(bundle.local_expert.1.clone()),
        global_arch: ArchSpec::Cnn(bundle.global_expert.1.clone()),
        gate_arch: ArchSpec::Gate(bundle.gate.1.clone()),
        local_layout: bundle.local_expert.0.layout.clone(),
        global_layout: bundle.global_expert.0.layout.clone(),
        gate_layout: bundle.gate.0.layout.clone(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for part in [
        &bundle.local_expert.0,
        &bundle.global_expert.0,
        &bundle.gate.0,
    ] {
        w.write_all(&(part.values.len() as u32).to_le_bytes())?;
        for v in &part.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_bundle(path: impl AsRef<std::path::Path>) -> Result<MoeBundle> {
    use std::io::Read;
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a beamfed bundle".into()));
    }
    let mut v2 = [0u8; 2];
    r.read_exact(&mut v2)?;
    if u16::from_le_bytes(v2) != VERSION {
        return Err(Error::Format("unsupported bundle version".into()));
    }
    let mut len4 = [0u8; 4];
    r.read_exact(&mut len4)?;
    let mut json = vec![0u8; u32::from_le_bytes(len4) as usize];
    r.read_exact(&mut json)?;
    let manifest: BundleManifest = serde_json::from_slice(&json)?;
    let mut read_params = |layout: Vec<nn::LayoutEntry>| -> Result<ModelParams> {
        r.read_exact(&mut len4)?;
        let count = u32::from_le_bytes(len4) as usize;
        let mut buf = vec![0u8; count * 4];
        r.read_exact(&mut buf)?;
        Ok(ModelParams {
            values: buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            layout,
        })
    };
    let local = read_params(manifest.local_layout)?;
    let global_ = read_params(manifest.global_layout)?;
    let gate = read_params(manifest.gate_layout)?;
    let (ArchSpec::Cnn(la), ArchSpec::Cnn(ga), ArchSpec::Gate(gt)) =
        (manifest.local_arch, manifest.global_arch, manifest.gate_arch)
    else {
        return Err(Error::Format("bundle manifest arch kinds are wrong".into()));
    };
    MoeBundle::new((local, la), (global_, ga), (gate, gt))
}
