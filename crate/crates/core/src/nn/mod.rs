//! Minimal tensor type, the beam-classifier CNN family and its hand-written
//! reverse-mode gradients, plus local stochastic-gradient training.
//!
//! The architecture family is fixed: a stack of same-padded convolutions,
//! rectifier activations, one dropout slot and fully connected layers. Both
//! the expert classifier and the small mixture-of-experts gate are instances
//! of the same stack, so one forward/backward implementation covers both.
//! Kernels are generic over the scalar type: production runs in f32, the
//! gradient checks can run the identical code in f64.

pub mod file;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Tensors and parameters
// ---------------------------------------------------------------------------

/// Dense f32 tensor with an optional gradient buffer of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub data: Vec<f32>,
    pub shape: Vec<usize>,
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(data: Vec<f32>, shape: Vec<usize>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::invalid("tensor data length does not match shape"));
        }
        Ok(Tensor {
            data,
            shape,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            data: vec![0.0; n],
            shape,
            grad: None,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// One named block inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

/// Flat parameter vector plus shape metadata; the unit of exchange between
/// clients and the parameter server.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub values: Vec<f32>,
    pub layout: Vec<LayoutEntry>,
}

impl ModelParams {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Elementwise difference `self - other`.
    pub fn delta(&self, other: &ModelParams) -> Vec<f32> {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Architectures
// ---------------------------------------------------------------------------

/// The beam-classifier CNN: two same-padded convolutions, three fully
/// connected layers, dropout after the first hidden layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnArch {
    pub in_channels: usize,
    pub conv1_filters: usize,
    pub conv2_filters: usize,
    pub filter_size: usize,
    pub fc1_units: usize,
    pub fc2_units: usize,
    pub dropout_rate: f64,
    pub num_classes: usize,
    pub input_h: usize,
    pub input_w: usize,
}

impl CnnArch {
    /// Paper-scale defaults for a 64 x 4 uplink grid and 64 beams.
    pub fn full(input_h: usize, input_w: usize, num_classes: usize) -> Self {
        CnnArch {
            in_channels: 2,
            conv1_filters: 128,
            conv2_filters: 64,
            filter_size: 5,
            fc1_units: 1024,
            fc2_units: 2048,
            dropout_rate: 0.5,
            num_classes,
            input_h,
            input_w,
        }
    }

    /// Desk-scale architecture for fast experiments and the test suite.
    pub fn tiny(input_h: usize, input_w: usize, num_classes: usize) -> Self {
        CnnArch {
            in_channels: 2,
            conv1_filters: 8,
            conv2_filters: 8,
            filter_size: 3,
            fc1_units: 32,
            fc2_units: 32,
            dropout_rate: 0.1,
            num_classes,
            input_h,
            input_w,
        }
    }
}

/// The mixture-of-experts gate: a small CNN on the same uplink input,
/// emitting one logit per expert. Zero counts disable a layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateArch {
    pub filters1: usize,
    pub filters2: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub filter_size: usize,
    pub dropout: f64,
    pub input_h: usize,
    pub input_w: usize,
}

/// Either architecture, for checkpoint headers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchSpec {
    Cnn(CnnArch),
    Gate(GateArch),
}

// ---------------------------------------------------------------------------
// Layer stack
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum LayerSpec {
    Conv { in_ch: usize, out_ch: usize, k: usize },
    Relu,
    Flatten,
    Fc { in_dim: usize, out_dim: usize },
    Dropout { rate: f64 },
}

/// A concrete network: layer stack plus resolved activation dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<LayerSpec>,
    input_c: usize,
    input_h: usize,
    input_w: usize,
    num_outputs: usize,
    layout: Vec<LayoutEntry>,
    param_count: usize,
}

fn check_filter(k: usize) -> Result<()> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::invalid(format!(
            "filter size must be odd and positive, got {k}"
        )));
    }
    Ok(())
}

impl Network {
    pub fn from_cnn(arch: &CnnArch) -> Result<Network> {
        check_filter(arch.filter_size)?;
        if arch.conv1_filters == 0
            || arch.conv2_filters == 0
            || arch.fc1_units == 0
            || arch.fc2_units == 0
            || arch.num_classes == 0
        {
            return Err(Error::invalid("classifier layer sizes must be positive"));
        }
        if !(0.0..1.0).contains(&arch.dropout_rate) {
            return Err(Error::invalid("dropout rate must be in [0, 1)"));
        }
        let k = arch.filter_size;
        let flat = arch.conv2_filters * arch.input_h * arch.input_w;
        let mut layers = vec![
            LayerSpec::Conv {
                in_ch: arch.in_channels,
                out_ch: arch.conv1_filters,
                k,
            },
            LayerSpec::Relu,
            LayerSpec::Conv {
                in_ch: arch.conv1_filters,
                out_ch: arch.conv2_filters,
                k,
            },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Fc {
                in_dim: flat,
                out_dim: arch.fc1_units,
            },
            LayerSpec::Relu,
        ];
        if arch.dropout_rate > 0.0 {
            layers.push(LayerSpec::Dropout {
                rate: arch.dropout_rate,
            });
        }
        layers.push(LayerSpec::Fc {
            in_dim: arch.fc1_units,
            out_dim: arch.fc2_units,
        });
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::Fc {
            in_dim: arch.fc2_units,
            out_dim: arch.num_classes,
        });
        Self::build(layers, arch.in_channels, arch.input_h, arch.input_w)
    }

    pub fn from_gate(arch: &GateArch) -> Result<Network> {
        check_filter(arch.filter_size)?;
        if !(0.0..1.0).contains(&arch.dropout) {
            return Err(Error::invalid("dropout rate must be in [0, 1)"));
        }
        let mut layers = Vec::new();
        let mut ch = 2;
        if arch.filters1 > 0 {
            layers.push(LayerSpec::Conv {
                in_ch: ch,
                out_ch: arch.filters1,
                k: arch.filter_size,
            });
            layers.push(LayerSpec::Relu);
            ch = arch.filters1;
        }
        if arch.filters2 > 0 {
            layers.push(LayerSpec::Conv {
                in_ch: ch,
                out_ch: arch.filters2,
                k: arch.filter_size,
            });
            layers.push(LayerSpec::Relu);
            ch = arch.filters2;
        }
        layers.push(LayerSpec::Flatten);
        let mut dim = ch * arch.input_h * arch.input_w;
        if arch.hidden1 > 0 {
            layers.push(LayerSpec::Fc {
                in_dim: dim,
                out_dim: arch.hidden1,
            });
            layers.push(LayerSpec::Relu);
            if arch.dropout > 0.0 {
                layers.push(LayerSpec::Dropout { rate: arch.dropout });
            }
            dim = arch.hidden1;
        }
        if arch.hidden2 > 0 {
            layers.push(LayerSpec::Fc {
                in_dim: dim,
                out_dim: arch.hidden2,
            });
            layers.push(LayerSpec::Relu);
            dim = arch.hidden2;
        }
        layers.push(LayerSpec::Fc {
            in_dim: dim,
            out_dim: 2,
        });
        Self::build(layers, 2, arch.input_h, arch.input_w)
    }

    pub fn from_spec(spec: &ArchSpec) -> Result<Network> {
        match spec {
            ArchSpec::Cnn(a) => Self::from_cnn(a),
            ArchSpec::Gate(a) => Self::from_gate(a),
        }
    }

    fn build(layers: Vec<LayerSpec>, input_c: usize, input_h: usize, input_w: usize) -> Result<Network> {
        let mut layout = Vec::new();
        let mut offset = 0;
        let mut conv_idx = 0;
        let mut fc_idx = 0;
        let mut num_outputs = 0;
        for layer in &layers {
            match layer {
                LayerSpec::Conv { in_ch, out_ch, k } => {
                    conv_idx += 1;
                    let wlen = out_ch * in_ch * k * k;
                    layout.push(LayoutEntry {
                        name: format!("conv{conv_idx}.weight"),
                        shape: vec![*out_ch, *in_ch, *k, *k],
                        offset,
                    });
                    offset += wlen;
                    layout.push(LayoutEntry {
                        name: format!("conv{conv_idx}.bias"),
                        shape: vec![*out_ch],
                        offset,
                    });
                    offset += out_ch;
                }
                LayerSpec::Fc { in_dim, out_dim } => {
                    fc_idx += 1;
                    layout.push(LayoutEntry {
                        name: format!("fc{fc_idx}.weight"),
                        shape: vec![*out_dim, *in_dim],
                        offset,
                    });
                    offset += out_dim * in_dim;
                    layout.push(LayoutEntry {
                        name: format!("fc{fc_idx}.bias"),
                        shape: vec![*out_dim],
                        offset,
                    });
                    offset += out_dim;
                    num_outputs = *out_dim;
                }
                _ => {}
            }
        }
        Ok(Network {
            layers,
            input_c,
            input_h,
            input_w,
            num_outputs,
            layout,
            param_count: offset,
        })
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn num_outputs(&self) -> usize {
        self.num_outputs
    }

    pub fn layout(&self) -> &[LayoutEntry] {
        &self.layout
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        (self.input_c, self.input_h, self.input_w)
    }

    /// Fan-in-scaled uniform initialization, biases zero. Deterministic for
    /// a given stream.
    pub fn init_params(&self, rng: &mut ChaCha8Rng) -> ModelParams {
        let mut values = vec![0.0f32; self.param_count];
        let mut cursor = 0;
        for layer in &self.layers {
            match layer {
                LayerSpec::Conv { in_ch, out_ch, k } => {
                    let fan_in = in_ch * k * k;
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let wlen = out_ch * in_ch * k * k;
                    for v in &mut values[cursor..cursor + wlen] {
                        *v = rng.gen_range(-bound..bound) as f32;
                    }
                    cursor += wlen + out_ch; // biases stay zero
                }
                LayerSpec::Fc { in_dim, out_dim } => {
                    let bound = 1.0 / (*in_dim as f64).sqrt();
                    let wlen = out_dim * in_dim;
                    for v in &mut values[cursor..cursor + wlen] {
                        *v = rng.gen_range(-bound..bound) as f32;
                    }
                    cursor += wlen + out_dim;
                }
                _ => {}
            }
        }
        ModelParams {
            values,
            layout: self.layout.clone(),
        }
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        if batch.shape.len() != 4
            || batch.shape[1] != self.input_c
            || batch.shape[2] != self.input_h
            || batch.shape[3] != self.input_w
        {
            return Err(Error::invalid(format!(
                "batch shape {:?} does not match network input ({}, {}, {})",
                batch.shape, self.input_c, self.input_h, self.input_w
            )));
        }
        Ok(batch.shape[0])
    }

    /// Run the network and return logits, shape `[n, num_outputs]`.
    ///
    /// With `training = false` this is a pure function; dropout only draws
    /// from `rng` during training.
    pub fn forward(
        &self,
        params: &ModelParams,
        batch: &Tensor,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        let n = self.check_batch(batch)?;
        self.check_params(params)?;
        let (logits, _) = run_forward::<f32>(self, &params.values, &batch.data, n, training, rng);
        Tensor::new(logits, vec![n, self.num_outputs])
    }

    /// Mean NLL of `forward` composed with softmax, plus the exact
    /// reverse-mode gradient with respect to the flat parameter vector.
    pub fn backward(
        &self,
        params: &ModelParams,
        batch: &Tensor,
        labels: &[usize],
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, Vec<f32>)> {
        let n = self.check_batch(batch)?;
        self.check_params(params)?;
        if labels.len() != n {
            return Err(Error::invalid("label count does not match batch"));
        }
        for &y in labels {
            if y >= self.num_outputs {
                return Err(Error::invalid(format!(
                    "label {y} out of range for {} classes",
                    self.num_outputs
                )));
            }
        }
        let (logits, caches) =
            run_forward::<f32>(self, &params.values, &batch.data, n, training, rng);
        let (loss, dlogits) = nll_from_logits::<f32>(&logits, labels, self.num_outputs);
        let grads = run_backward::<f32>(self, &params.values, n, &caches, &dlogits);
        Ok((loss, grads))
    }

    /// Forward pass plus reverse pass from caller-supplied output gradients.
    /// `loss_fn` maps the logits to a loss value and d(loss)/d(logits); used
    /// for losses other than plain NLL, e.g. the mixture-gate objective.
    pub fn backward_with<F>(
        &self,
        params: &ModelParams,
        batch: &Tensor,
        training: bool,
        rng: &mut ChaCha8Rng,
        loss_fn: F,
    ) -> Result<(f64, Vec<f32>)>
    where
        F: FnOnce(&[f32]) -> (f64, Vec<f32>),
    {
        let n = self.check_batch(batch)?;
        self.check_params(params)?;
        let (logits, caches) =
            run_forward::<f32>(self, &params.values, &batch.data, n, training, rng);
        let (loss, dlogits) = loss_fn(&logits);
        let grads = run_backward::<f32>(self, &params.values, n, &caches, &dlogits);
        Ok((loss, grads))
    }

    /// f64 twin of [`Network::backward_with`] for numeric checks.
    pub fn backward_with_f64<F>(
        &self,
        params: &[f64],
        batch: &[f64],
        n: usize,
        training: bool,
        rng: &mut ChaCha8Rng,
        loss_fn: F,
    ) -> (f64, Vec<f64>)
    where
        F: FnOnce(&[f64]) -> (f64, Vec<f64>),
    {
        let (logits, caches) = run_forward::<f64>(self, params, batch, n, training, rng);
        let (loss, dlogits) = loss_fn(&logits);
        let grads = run_backward::<f64>(self, params, n, &caches, &dlogits);
        (loss, grads)
    }

    /// f64 forward returning logits, for numeric checks.
    pub fn forward_f64(
        &self,
        params: &[f64],
        batch: &[f64],
        n: usize,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Vec<f64> {
        run_forward::<f64>(self, params, batch, n, training, rng).0
    }

    /// f64 twin of [`Network::backward`] for numeric checks: identical code
    /// path instantiated at higher precision.
    pub fn backward_f64(
        &self,
        params: &[f64],
        batch: &[f64],
        n: usize,
        labels: &[usize],
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> (f64, Vec<f64>) {
        let (logits, caches) = run_forward::<f64>(self, params, batch, n, training, rng);
        let (loss, dlogits) = nll_from_logits::<f64>(&logits, labels, self.num_outputs);
        let grads = run_backward::<f64>(self, params, n, &caches, &dlogits);
        (loss, grads)
    }

    /// f64 twin of the loss for finite differencing.
    pub fn loss_f64(
        &self,
        params: &[f64],
        batch: &[f64],
        n: usize,
        labels: &[usize],
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> f64 {
        let (logits, _) = run_forward::<f64>(self, params, batch, n, training, rng);
        nll_from_logits::<f64>(&logits, labels, self.num_outputs).0
    }

    /// Mean NLL on a dataset slice, evaluation mode.
    pub fn eval_loss(&self, params: &ModelParams, batch: &Tensor, labels: &[usize]) -> Result<f64> {
        let mut rng = crate::rng::stream(0, &[]);
        let logits = self.forward(params, batch, false, &mut rng)?;
        let (loss, _) = nll_loss(&logits, labels)?;
        Ok(loss)
    }

    fn check_params(&self, params: &ModelParams) -> Result<()> {
        if params.values.len() != self.param_count {
            return Err(Error::invalid(format!(
                "parameter vector length {} does not match network ({})",
                params.values.len(),
                self.param_count
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Generic kernels
// ---------------------------------------------------------------------------

/// Scalar type for the kernels: f32 in production, f64 in check mode.
pub trait Real:
    num_traits::Float + num_traits::FromPrimitive + num_traits::ToPrimitive + std::ops::AddAssign + std::ops::MulAssign + Send + Sync + 'static
{
}
impl Real for f32 {}
impl Real for f64 {}

fn fr<T: Real>(v: f64) -> T {
    T::from_f64(v).unwrap()
}

enum Cache<T> {
    /// Input activations of the layer.
    Input(Vec<T>),
    /// Dropout keep-mask (already scaled by 1/keep_prob).
    Mask(Vec<T>),
    None,
}

fn run_forward<T: Real>(
    net: &Network,
    params: &[T],
    input: &[T],
    n: usize,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> (Vec<T>, Vec<Cache<T>>) {
    let mut act = input.to_vec();
    let mut c = net.input_c;
    let mut h = net.input_h;
    let mut w = net.input_w;
    let mut caches = Vec::with_capacity(net.layers.len());
    let mut offset = 0;
    for layer in &net.layers {
        match layer {
            LayerSpec::Conv { in_ch, out_ch, k } => {
                let wlen = out_ch * in_ch * k * k;
                let weights = &params[offset..offset + wlen];
                let bias = &params[offset + wlen..offset + wlen + out_ch];
                offset += wlen + out_ch;
                let out = conv_forward(&act, n, *in_ch, h, w, weights, bias, *out_ch, *k);
                caches.push(Cache::Input(act));
                act = out;
                c = *out_ch;
            }
            LayerSpec::Relu => {
                caches.push(Cache::Input(act.clone()));
                for v in &mut act {
                    if *v < T::zero() {
                        *v = T::zero();
                    }
                }
            }
            LayerSpec::Flatten => {
                // Memory layout is already [n, c*h*w].
                caches.push(Cache::None);
                c = c * h * w;
                h = 1;
                w = 1;
            }
            LayerSpec::Fc { in_dim, out_dim } => {
                let wlen = out_dim * in_dim;
                let weights = &params[offset..offset + wlen];
                let bias = &params[offset + wlen..offset + wlen + out_dim];
                offset += wlen + out_dim;
                let out = fc_forward(&act, n, *in_dim, weights, bias, *out_dim);
                caches.push(Cache::Input(act));
                act = out;
                c = *out_dim;
            }
            LayerSpec::Dropout { rate } => {
                if training {
                    let keep = 1.0 - rate;
                    let scale = fr::<T>(1.0 / keep);
                    let mask: Vec<T> = (0..act.len())
                        .map(|_| {
                            if rng.gen_range(0.0..1.0) < keep {
                                scale
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    for (v, m) in act.iter_mut().zip(&mask) {
                        *v *= *m;
                    }
                    caches.push(Cache::Mask(mask));
                } else {
                    caches.push(Cache::None);
                }
            }
        }
    }
    let _ = (c, h, w);
    (act, caches)
}

fn run_backward<T: Real>(
    net: &Network,
    params: &[T],
    n: usize,
    caches: &[Cache<T>],
    dlogits: &[T],
) -> Vec<T> {
    // Per-layer activation dims going forward, to replay in reverse.
    let mut dims = Vec::with_capacity(net.layers.len() + 1);
    let mut c = net.input_c;
    let mut h = net.input_h;
    let mut w = net.input_w;
    let mut offsets = Vec::with_capacity(net.layers.len());
    let mut offset = 0;
    for layer in &net.layers {
        dims.push((c, h, w));
        offsets.push(offset);
        match layer {
            LayerSpec::Conv { in_ch, out_ch, k } => {
                offset += out_ch * in_ch * k * k + out_ch;
                c = *out_ch;
            }
            LayerSpec::Fc { in_dim, out_dim } => {
                offset += out_dim * in_dim + out_dim;
                c = *out_dim;
            }
            LayerSpec::Flatten => {
                c = c * h * w;
                h = 1;
                w = 1;
            }
            _ => {}
        }
    }

    let mut grads = vec![T::zero(); net.param_count];
    let mut dact = dlogits.to_vec();
    for (i, layer) in net.layers.iter().enumerate().rev() {
        let (ci, hi, wi) = dims[i];
        match layer {
            LayerSpec::Conv { in_ch, out_ch, k } => {
                let Cache::Input(x) = &caches[i] else { unreachable!() };
                let off = offsets[i];
                let wlen = out_ch * in_ch * k * k;
                let weights = &params[off..off + wlen];
                let (dx, dw, db) =
                    conv_backward(x, n, *in_ch, hi, wi, weights, *out_ch, *k, &dact);
                for (g, v) in grads[off..off + wlen].iter_mut().zip(&dw) {
                    *g += *v;
                }
                for (g, v) in grads[off + wlen..off + wlen + out_ch].iter_mut().zip(&db) {
                    *g += *v;
                }
                dact = dx;
            }
            LayerSpec::Relu => {
                let Cache::Input(x) = &caches[i] else { unreachable!() };
                for (d, v) in dact.iter_mut().zip(x) {
                    if *v <= T::zero() {
                        *d = T::zero();
                    }
                }
            }
            LayerSpec::Flatten => {}
            LayerSpec::Fc { in_dim, out_dim } => {
                let Cache::Input(x) = &caches[i] else { unreachable!() };
                let off = offsets[i];
                let wlen = out_dim * in_dim;
                let weights = &params[off..off + wlen];
                let (dx, dw, db) = fc_backward(x, n, *in_dim, weights, *out_dim, &dact);
                for (g, v) in grads[off..off + wlen].iter_mut().zip(&dw) {
                    *g += *v;
                }
                for (g, v) in grads[off + wlen..off + wlen + out_dim].iter_mut().zip(&db) {
                    *g += *v;
                }
                dact = dx;
            }
            LayerSpec::Dropout { .. } => {
                if let Cache::Mask(mask) = &caches[i] {
                    for (d, m) in dact.iter_mut().zip(mask) {
                        *d *= *m;
                    }
                }
            }
        }
        let _ = ci;
    }
    grads
}

#[allow(clippy::too_many_arguments)]
fn conv_forward<T: Real>(
    x: &[T],
    n: usize,
    in_ch: usize,
    h: usize,
    w: usize,
    weights: &[T],
    bias: &[T],
    out_ch: usize,
    k: usize,
) -> Vec<T> {
    let pad = k / 2;
    let mut out = vec![T::zero(); n * out_ch * h * w];
    for b in 0..n {
        let xb = &x[b * in_ch * h * w..(b + 1) * in_ch * h * w];
        let ob = &mut out[b * out_ch * h * w..(b + 1) * out_ch * h * w];
        for oc in 0..out_ch {
            let wf = &weights[oc * in_ch * k * k..(oc + 1) * in_ch * k * k];
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = bias[oc];
                    for ic in 0..in_ch {
                        let plane = &xb[ic * h * w..(ic + 1) * h * w];
                        let kern = &wf[ic * k * k..(ic + 1) * k * k];
                        for dy in 0..k {
                            let sy = y + dy;
                            if sy < pad || sy - pad >= h {
                                continue;
                            }
                            let row = &plane[(sy - pad) * w..(sy - pad + 1) * w];
                            let krow = &kern[dy * k..(dy + 1) * k];
                            for dx in 0..k {
                                let sx = xx + dx;
                                if sx < pad || sx - pad >= w {
                                    continue;
                                }
                                acc += row[sx - pad] * krow[dx];
                            }
                        }
                    }
                    ob[oc * h * w + y * w + xx] = acc;
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Real>(
    x: &[T],
    n: usize,
    in_ch: usize,
    h: usize,
    w: usize,
    weights: &[T],
    out_ch: usize,
    k: usize,
    dout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let pad = k / 2;
    let mut dx = vec![T::zero(); n * in_ch * h * w];
    let mut dw = vec![T::zero(); out_ch * in_ch * k * k];
    let mut db = vec![T::zero(); out_ch];
    for b in 0..n {
        let xb = &x[b * in_ch * h * w..(b + 1) * in_ch * h * w];
        let dob = &dout[b * out_ch * h * w..(b + 1) * out_ch * h * w];
        let dxb = &mut dx[b * in_ch * h * w..(b + 1) * in_ch * h * w];
        for oc in 0..out_ch {
            let wf = &weights[oc * in_ch * k * k..(oc + 1) * in_ch * k * k];
            let dwf = &mut dw[oc * in_ch * k * k..(oc + 1) * in_ch * k * k];
            for y in 0..h {
                for xx in 0..w {
                    let g = dob[oc * h * w + y * w + xx];
                    if g == T::zero() {
                        continue;
                    }
                    db[oc] += g;
                    for ic in 0..in_ch {
                        for dy in 0..k {
                            let sy = y + dy;
                            if sy < pad || sy - pad >= h {
                                continue;
                            }
                            for dxk in 0..k {
                                let sx = xx + dxk;
                                if sx < pad || sx - pad >= w {
                                    continue;
                                }
                                let xi = ic * h * w + (sy - pad) * w + (sx - pad);
                                let wi = ic * k * k + dy * k + dxk;
                                dwf[wi] += g * xb[xi];
                                dxb[xi] += g * wf[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

fn fc_forward<T: Real>(
    x: &[T],
    n: usize,
    in_dim: usize,
    weights: &[T],
    bias: &[T],
    out_dim: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); n * out_dim];
    for b in 0..n {
        let xb = &x[b * in_dim..(b + 1) * in_dim];
        let ob = &mut out[b * out_dim..(b + 1) * out_dim];
        for o in 0..out_dim {
            let row = &weights[o * in_dim..(o + 1) * in_dim];
            let mut acc = bias[o];
            for i in 0..in_dim {
                acc += row[i] * xb[i];
            }
            ob[o] = acc;
        }
    }
    out
}

fn fc_backward<T: Real>(
    x: &[T],
    n: usize,
    in_dim: usize,
    weights: &[T],
    out_dim: usize,
    dout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); n * in_dim];
    let mut dw = vec![T::zero(); out_dim * in_dim];
    let mut db = vec![T::zero(); out_dim];
    for b in 0..n {
        let xb = &x[b * in_dim..(b + 1) * in_dim];
        let dob = &dout[b * out_dim..(b + 1) * out_dim];
        let dxb = &mut dx[b * in_dim..(b + 1) * in_dim];
        for o in 0..out_dim {
            let g = dob[o];
            if g == T::zero() {
                continue;
            }
            db[o] += g;
            let row = &weights[o * in_dim..(o + 1) * in_dim];
            let drow = &mut dw[o * in_dim..(o + 1) * in_dim];
            for i in 0..in_dim {
                drow[i] += g * xb[i];
                dxb[i] += g * row[i];
            }
        }
    }
    (dx, dw, db)
}

/// Softmax cross-entropy over logits: mean of `-ln softmax(logits)[label]`
/// and gradient `(softmax - onehot) / n`.
fn nll_from_logits<T: Real>(logits: &[T], labels: &[usize], classes: usize) -> (f64, Vec<T>) {
    let n = labels.len();
    let mut grad = vec![T::zero(); logits.len()];
    let mut loss = 0.0f64;
    let inv_n = fr::<T>(1.0 / n as f64);
    for b in 0..n {
        let row = &logits[b * classes..(b + 1) * classes];
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        for &v in row {
            denom += (v - max).exp();
        }
        let log_denom = denom.ln();
        let y = labels[b];
        loss += -((row[y] - max) - log_denom).to_f64().unwrap();
        let grow = &mut grad[b * classes..(b + 1) * classes];
        for (j, &v) in row.iter().enumerate() {
            let p = ((v - max) - log_denom).exp();
            grow[j] = p * inv_n;
        }
        grow[y] = grow[y] - inv_n;
    }
    (loss / n as f64, grad)
}

/// Mean negative log-likelihood of a logits tensor, plus the gradient with
/// respect to the logits.
pub fn nll_loss(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.shape.len() != 2 {
        return Err(Error::invalid("logits must be [n, classes]"));
    }
    let (n, classes) = (logits.shape[0], logits.shape[1]);
    if labels.len() != n {
        return Err(Error::invalid("label count does not match logits"));
    }
    for &y in labels {
        if y >= classes {
            return Err(Error::invalid(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
    }
    let (loss, grad) = nll_from_logits::<f32>(&logits.data, labels, classes);
    Ok((loss, Tensor::new(grad, logits.shape.clone())?))
}

// ---------------------------------------------------------------------------
// Local training
// ---------------------------------------------------------------------------

/// A client-local supervised dataset in training layout.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorDataset {
    pub x: Vec<f32>,
    pub y: Vec<usize>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl TensorDataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn sample_size(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Gather a batch by indices.
    pub fn batch(&self, idxs: &[usize]) -> (Tensor, Vec<usize>) {
        let ss = self.sample_size();
        let mut data = Vec::with_capacity(idxs.len() * ss);
        let mut labels = Vec::with_capacity(idxs.len());
        for &i in idxs {
            data.extend_from_slice(&self.x[i * ss..(i + 1) * ss]);
            labels.push(self.y[i]);
        }
        (
            Tensor {
                data,
                shape: vec![idxs.len(), self.channels, self.height, self.width],
                grad: None,
            },
            labels,
        )
    }

    pub fn full(&self) -> (Tensor, Vec<usize>) {
        let idxs: Vec<usize> = (0..self.len()).collect();
        self.batch(&idxs)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LocalTrainCfg {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Per-step hyperbolic decay: lr_t = lr / (1 + decay * step).
    pub lr_decay: f64,
    /// Decoupled weight decay, applied as lr_t * wd * w.
    pub weight_decay: f64,
}

/// Result of one client-local training call. An empty dataset is a skip
/// signal, not a failure.
#[derive(Debug, Clone)]
pub enum LocalOutcome {
    Trained {
        params: ModelParams,
        sample_count: usize,
        /// Mean training loss over all steps of this call.
        mean_loss: f64,
        epochs_run: usize,
    },
    SkippedEmpty,
}

/// Plain SGD over the client's samples: shuffled minibatches, per-step
/// decayed learning rate, decoupled weight decay.
pub fn local_train(
    params: &ModelParams,
    net: &Network,
    data: &TensorDataset,
    cfg: &LocalTrainCfg,
    rng: &mut ChaCha8Rng,
) -> Result<LocalOutcome> {
    if data.is_empty() {
        return Ok(LocalOutcome::SkippedEmpty);
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut current = params.clone();
    let mut step = 0usize;
    let mut loss_sum = 0.0;
    let mut loss_weight = 0.0;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (batch, labels) = data.batch(chunk);
            let (loss, grad) = net.backward(&current, &batch, &labels, true, rng)?;
            let lr_t = cfg.lr / (1.0 + cfg.lr_decay * step as f64);
            sgd_step(&mut current.values, &grad, lr_t, cfg.weight_decay);
            loss_sum += loss * labels.len() as f64;
            loss_weight += labels.len() as f64;
            step += 1;
        }
    }
    Ok(LocalOutcome::Trained {
        params: current,
        sample_count: data.len(),
        mean_loss: if loss_weight > 0.0 {
            loss_sum / loss_weight
        } else {
            0.0
        },
        epochs_run: cfg.epochs,
    })
}

/// `w <- w - lr * (g + wd * w)`, computed in f64 per coordinate.
pub fn sgd_step(weights: &mut [f32], grad: &[f32], lr: f64, weight_decay: f64) {
    for (w, g) in weights.iter_mut().zip(grad) {
        let wv = *w as f64;
        *w = (wv - lr * (*g as f64 + weight_decay * wv)) as f32;
    }
}
