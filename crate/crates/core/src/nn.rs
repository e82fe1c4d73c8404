//! A small feed-forward network engine.
//!
//! Parameters live in a [`ParameterSet`]: an ordered list of named, flat
//! `f64` layers. Everything the federated machinery does (sensitivity,
//! masking, aggregation) works on that flat view; the network code here
//! reinterprets the flat buffers as matrices only when running a pass.
//!
//! An [`MlpSpec`] with widths `[d, h1, .., C]` produces, per linear block `l`,
//! the layers `fc{l}.weight` (shape `[out, in]`) and `fc{l}.bias`. When
//! normalization is enabled every hidden block also gets `norm{l}.scale`,
//! `norm{l}.shift` and the two running-statistic layers `norm{l}.running_mean`
//! and `norm{l}.running_var`, which carry [`LayerKind::Statistic`] and never
//! receive gradients.

use std::fmt;
use std::hash::Hasher;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    /// Updated by gradient descent.
    Trainable,
    /// Running statistics of a normalization layer; no gradient.
    Statistic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: LayerKind,
    pub values: Vec<f64>,
}

impl Layer {
    pub fn new(
        name: impl Into<String>,
        shape: Vec<usize>,
        kind: LayerKind,
        values: Vec<f64>,
    ) -> Result<Self> {
        let name = name.into();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::config(format!(
                "layer `{name}` has an empty dimension in shape {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::structure(format!(
                "layer `{name}` shape {shape:?} needs {expected} values, got {}",
                values.len()
            )));
        }
        Ok(Self {
            name,
            shape,
            kind,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_trainable(&self) -> bool {
        self.kind == LayerKind::Trainable
    }
}

/// Coordinate of a single scalar parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamIndex {
    pub layer: usize,
    pub offset: usize,
}

/// A model's parameters as an ordered list of named flat layers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet {
    layers: Vec<Layer>,
}

impl ParameterSet {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        for (i, layer) in layers.iter().enumerate() {
            if layers[..i].iter().any(|l| l.name == layer.name) {
                return Err(Error::config(format!("duplicate layer name `{}`", layer.name)));
            }
            if layer.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::data(format!("layer `{}` holds a non-finite value", layer.name)));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// Number of scalars over all layers, statistics included.
    pub fn total_count(&self) -> usize {
        self.layers.iter().map(Layer::len).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.layers.iter().filter(|l| l.is_trainable()).map(Layer::len).sum()
    }

    pub fn same_structure(&self, other: &ParameterSet) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape && a.kind == b.kind)
    }

    pub fn ensure_same_structure(&self, other: &ParameterSet) -> Result<()> {
        if self.same_structure(other) {
            Ok(())
        } else {
            Err(Error::structure(format!(
                "parameter sets differ: [{}] vs [{}]",
                self.describe(),
                other.describe()
            )))
        }
    }

    fn describe(&self) -> String {
        self.layers
            .iter()
            .map(|l| format!("{}{:?}", l.name, l.shape))
            .collect::<Vec<_>>()
            .join(", ")
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|_| 0.0)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|l| Layer {
                values: l.values.iter().map(|&v| f(v)).collect(),
                ..l.clone()
            })
            .collect();
        Self { layers }
    }

    /// Element-wise combination of two structurally identical sets.
    pub fn zip_with(&self, other: &ParameterSet, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.ensure_same_structure(other)?;
        let layers = self
            .layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| Layer {
                values: a.values.iter().zip(&b.values).map(|(&x, &y)| f(x, y)).collect(),
                ..a.clone()
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn get(&self, index: ParamIndex) -> Option<f64> {
        self.layers.get(index.layer)?.values.get(index.offset).copied()
    }

    pub fn set(&mut self, index: ParamIndex, value: f64) -> Result<()> {
        let slot = self
            .layers
            .get_mut(index.layer)
            .and_then(|l| l.values.get_mut(index.offset))
            .ok_or_else(|| Error::config(format!("parameter index {index:?} out of range")))?;
        *slot = value;
        Ok(())
    }

    /// Every scalar coordinate, layer by layer.
    pub fn indices(&self) -> impl Iterator<Item = ParamIndex> + '_ {
        self.layers.iter().enumerate().flat_map(|(layer, l)| {
            (0..l.len()).map(move |offset| ParamIndex { layer, offset })
        })
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.values.iter().all(|v| v.is_finite()))
    }

    /// Trainable layers concatenated in order.
    pub fn flatten_trainable(&self) -> Vec<f64> {
        self.layers
            .iter()
            .filter(|l| l.is_trainable())
            .flat_map(|l| l.values.iter().copied())
            .collect()
    }

    /// Mean over every scalar.
    pub fn mean_value(&self) -> f64 {
        let n = self.total_count();
        if n == 0 {
            return 0.0;
        }
        self.layers.iter().flat_map(|l| &l.values).sum::<f64>() / n as f64
    }

    /// FNV-1a over names, shapes and value bit patterns.
    pub fn digest(&self) -> u64 {
        let mut h = Fnv1a::default();
        for l in &self.layers {
            h.write(l.name.as_bytes());
            for &d in &l.shape {
                h.write_u64(d as u64);
            }
            for v in &l.values {
                h.write_u64(v.to_bits());
            }
        }
        h.finish()
    }
}

struct Fnv1a(u64);

impl Default for Fnv1a {
    fn default() -> Self {
        Fnv1a(0xcbf2_9ce4_8422_2325)
    }
}

impl Hasher for Fnv1a {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        })
    }
}

/// Architecture of a fully connected network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Input width, hidden widths, then number of classes.
    pub layer_widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub use_norm_layer: bool,
}

#[derive(Debug, Clone, Copy)]
struct NormSlots {
    scale: usize,
    shift: usize,
    mean: usize,
    var: usize,
}

#[derive(Debug, Clone, Copy)]
struct BlockSlots {
    weight: usize,
    bias: usize,
    norm: Option<NormSlots>,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation, use_norm_layer: bool) -> Result<Self> {
        let spec = Self {
            layer_widths,
            activation,
            use_norm_layer,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::config("an MLP needs at least an input and an output width"));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::config(format!(
                "layer widths must be positive, got {:?}",
                self.layer_widths
            )));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_widths.last().expect("validated widths")
    }

    pub fn num_blocks(&self) -> usize {
        self.layer_widths.len() - 1
    }

    /// Names of the final linear block (the classifier head).
    pub fn head_layer_names(&self) -> [String; 2] {
        let l = self.num_blocks() - 1;
        [format!("fc{l}.weight"), format!("fc{l}.bias")]
    }

    /// `(name, shape, kind)` for every layer in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>, LayerKind)> {
        let mut out = Vec::new();
        for l in 0..self.num_blocks() {
            let (fan_in, fan_out) = (self.layer_widths[l], self.layer_widths[l + 1]);
            out.push((format!("fc{l}.weight"), vec![fan_out, fan_in], LayerKind::Trainable));
            out.push((format!("fc{l}.bias"), vec![fan_out], LayerKind::Trainable));
            if self.use_norm_layer && l + 1 < self.num_blocks() {
                out.push((format!("norm{l}.scale"), vec![fan_out], LayerKind::Trainable));
                out.push((format!("norm{l}.shift"), vec![fan_out], LayerKind::Trainable));
                out.push((format!("norm{l}.running_mean"), vec![fan_out], LayerKind::Statistic));
                out.push((format!("norm{l}.running_var"), vec![fan_out], LayerKind::Statistic));
            }
        }
        out
    }

    fn slots(&self) -> Vec<BlockSlots> {
        let mut next = 0;
        let mut take = || {
            next += 1;
            next - 1
        };
        (0..self.num_blocks())
            .map(|l| {
                let weight = take();
                let bias = take();
                let norm = (self.use_norm_layer && l + 1 < self.num_blocks()).then(|| NormSlots {
                    scale: take(),
                    shift: take(),
                    mean: take(),
                    var: take(),
                });
                BlockSlots { weight, bias, norm }
            })
            .collect()
    }

    fn build(&self, mut fill: impl FnMut(&str, &[usize]) -> Vec<f64>) -> ParameterSet {
        let layers = self
            .layout()
            .into_iter()
            .map(|(name, shape, kind)| {
                let values = fill(&name, &shape);
                Layer {
                    name,
                    shape,
                    kind,
                    values,
                }
            })
            .collect();
        ParameterSet { layers }
    }

    /// Xavier-uniform weights, zero biases, unit normalization scale, and
    /// running statistics at mean 0 / variance 1.
    pub fn init(&self, rng: &mut impl Rng) -> ParameterSet {
        self.build(|name, shape| {
            let n: usize = shape.iter().product();
            if name.ends_with(".weight") {
                let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-limit..limit)).collect()
            } else {
                vec![default_fill(name); n]
            }
        })
    }

    /// All trainable values zero; statistics at their defaults.
    pub fn zeroed(&self) -> ParameterSet {
        self.build(|name, shape| vec![default_fill(name); shape.iter().product()])
    }

    pub fn check_model(&self, model: &ParameterSet) -> Result<()> {
        let layout = self.layout();
        let ok = layout.len() == model.layers.len()
            && layout
                .iter()
                .zip(&model.layers)
                .all(|((name, shape, kind), l)| *name == l.name && *shape == l.shape && *kind == l.kind);
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!(
                "model layers [{}] do not match spec widths {:?} (norm: {})",
                model.describe(),
                self.layer_widths,
                self.use_norm_layer
            )))
        }
    }
}

fn default_fill(name: &str) -> f64 {
    if name.ends_with(".scale") || name.ends_with(".running_var") {
        1.0
    } else {
        0.0
    }
}

/// Running statistics of one normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
}

impl NormStats {
    /// Exponential moving average towards a batch's mean and unbiased variance.
    pub fn blend(&mut self, batch_mean: ArrayView1<f64>, batch_var: ArrayView1<f64>, batch_size: usize) {
        let correction = if batch_size > 1 {
            batch_size as f64 / (batch_size - 1) as f64
        } else {
            1.0
        };
        let m = self.momentum;
        for (r, &b) in self.running_mean.iter_mut().zip(batch_mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(batch_var) {
            *r = (1.0 - m) * *r + m * b * correction;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Normalization uses batch statistics.
    Train,
    /// Normalization uses running statistics.
    Eval,
}

/// A borrowed mini-batch.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub features: ArrayView2<'a, f64>,
    pub labels: &'a [usize],
}

impl<'a> Batch<'a> {
    pub fn new(features: ArrayView2<'a, f64>, labels: &'a [usize]) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::data(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone)]
struct NormCache {
    x_hat: Array2<f64>,
    inv_std: Array1<f64>,
    batch_mean: Array1<f64>,
    batch_var: Array1<f64>,
}

#[derive(Debug, Clone)]
struct BlockCache {
    input: Array2<f64>,
    /// Input to the activation (after normalization when present).
    act_in: Array2<f64>,
    act_out: Array2<f64>,
    norm: Option<NormCache>,
}

/// Activations recorded by [`forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    mode: Mode,
    hidden: Vec<BlockCache>,
    head_input: Array2<f64>,
}

fn weight_view<'m>(model: &'m ParameterSet, slot: usize) -> ArrayView2<'m, f64> {
    let l = &model.layers[slot];
    ArrayView2::from_shape((l.shape[0], l.shape[1]), &l.values).expect("checked layer shape")
}

fn vector_view(model: &ParameterSet, slot: usize) -> ArrayView1<'_, f64> {
    ArrayView1::from(&model.layers[slot].values[..])
}

pub fn forward(
    model: &ParameterSet,
    spec: &MlpSpec,
    batch: &Batch<'_>,
    mode: Mode,
) -> Result<(Array2<f64>, ForwardCache)> {
    spec.check_model(model)?;
    if batch.features.ncols() != spec.input_width() {
        return Err(Error::config(format!(
            "batch has {} features, model expects {}",
            batch.features.ncols(),
            spec.input_width()
        )));
    }
    let slots = spec.slots();
    let mut act = batch.features.to_owned();
    let mut hidden = Vec::with_capacity(slots.len() - 1);
    let (last, body) = slots.split_last().expect("at least one block");
    for block in body {
        let pre = act.dot(&weight_view(model, block.weight).t()) + vector_view(model, block.bias);
        let (act_in, norm) = match block.norm {
            Some(ns) => {
                let (y, cache) = normalize(model, ns, pre, mode);
                (y, Some(cache))
            }
            None => (pre, None),
        };
        let act_out = act_in.mapv(|x| spec.activation.apply(x));
        let input = std::mem::replace(&mut act, act_out.clone());
        hidden.push(BlockCache {
            input,
            act_in,
            act_out,
            norm,
        });
    }
    let logits = act.dot(&weight_view(model, last.weight).t()) + vector_view(model, last.bias);
    Ok((
        logits,
        ForwardCache {
            mode,
            hidden,
            head_input: act,
        },
    ))
}

fn normalize(model: &ParameterSet, ns: NormSlots, pre: Array2<f64>, mode: Mode) -> (Array2<f64>, NormCache) {
    let m = pre.nrows() as f64;
    let (mean, var) = match mode {
        Mode::Train => {
            let mean = pre.sum_axis(Axis(0)) / m;
            let centered = &pre - &mean;
            let var = (&centered * &centered).sum_axis(Axis(0)) / m;
            (mean, var)
        }
        Mode::Eval => (
            vector_view(model, ns.mean).to_owned(),
            vector_view(model, ns.var).to_owned(),
        ),
    };
    let inv_std = var.mapv(|v| 1.0 / (v + NORM_EPS).sqrt());
    let x_hat = (&pre - &mean) * &inv_std;
    let y = &x_hat * &vector_view(model, ns.scale) + vector_view(model, ns.shift);
    (
        y,
        NormCache {
            x_hat,
            inv_std,
            batch_mean: mean,
            batch_var: var,
        },
    )
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&y| y >= classes) {
        Some(y) => Err(Error::data(format!("label {y} outside [0, {classes})"))),
        None => Ok(()),
    }
}

/// Mean cross-entropy and the gradient of the loss with respect to the logits.
pub fn softmax_cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    check_labels(labels, logits.ncols())?;
    if logits.nrows() != labels.len() || labels.is_empty() {
        return Err(Error::data("cross-entropy needs one label per non-empty logit row"));
    }
    let m = labels.len() as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for ((row, mut g), &y) in logits.outer_iter().zip(grad.outer_iter_mut()).zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        for (gc, &z) in g.iter_mut().zip(row) {
            *gc = (z - lse).exp() / m;
        }
        g[y] -= 1.0 / m;
    }
    Ok((loss / m, grad))
}

/// Mean cross-entropy of `model` on `batch` (training-mode normalization).
pub fn loss(model: &ParameterSet, spec: &MlpSpec, batch: &Batch<'_>) -> Result<f64> {
    let (logits, _) = forward(model, spec, batch, Mode::Train)?;
    softmax_cross_entropy(&logits, batch.labels).map(|(l, _)| l)
}

/// Mean cross-entropy and its gradient with respect to every parameter.
/// Statistic layers get zero gradient.
pub fn loss_and_grad(model: &ParameterSet, spec: &MlpSpec, batch: &Batch<'_>) -> Result<(f64, ParameterSet)> {
    let (loss, grad, _) = loss_grad_cache(model, spec, batch)?;
    Ok((loss, grad))
}

fn loss_grad_cache(
    model: &ParameterSet,
    spec: &MlpSpec,
    batch: &Batch<'_>,
) -> Result<(f64, ParameterSet, ForwardCache)> {
    let (logits, cache) = forward(model, spec, batch, Mode::Train)?;
    let (loss, dlogits) = softmax_cross_entropy(&logits, batch.labels)?;
    let grad = backward(model, spec, &cache, dlogits);
    Ok((loss, grad, cache))
}

fn backward(model: &ParameterSet, spec: &MlpSpec, cache: &ForwardCache, dlogits: Array2<f64>) -> ParameterSet {
    let slots = spec.slots();
    let mut grad = model.zeros_like();
    let mut store = |slot: usize, values: Array2<f64>| {
        grad.layers[slot].values = values.into_iter().collect();
    };
    let (last, body) = slots.split_last().expect("at least one block");

    store(last.weight, dlogits.t().dot(&cache.head_input));
    store(last.bias, dlogits.sum_axis(Axis(0)).insert_axis(Axis(0)));
    let mut d_act = dlogits.dot(&weight_view(model, last.weight));

    for (block, bc) in body.iter().zip(&cache.hidden).rev() {
        let mut d_in = d_act;
        ndarray::Zip::from(&mut d_in)
            .and(&bc.act_in)
            .and(&bc.act_out)
            .for_each(|d, &x, &y| *d *= spec.activation.derivative(x, y));
        let d_pre = match (block.norm, &bc.norm) {
            (Some(ns), Some(nc)) => {
                store(ns.scale, (&d_in * &nc.x_hat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                store(ns.shift, d_in.sum_axis(Axis(0)).insert_axis(Axis(0)));
                let dx_hat = &d_in * &vector_view(model, ns.scale);
                match cache.mode {
                    Mode::Train => {
                        let m = dx_hat.nrows() as f64;
                        let sum_d = dx_hat.sum_axis(Axis(0));
                        let sum_dx = (&dx_hat * &nc.x_hat).sum_axis(Axis(0));
                        ((&dx_hat * m) - &sum_d - &(&nc.x_hat * &sum_dx)) * &(&nc.inv_std / m)
                    }
                    Mode::Eval => dx_hat * &nc.inv_std,
                }
            }
            _ => d_in,
        };
        store(block.weight, d_pre.t().dot(&bc.input));
        store(block.bias, d_pre.sum_axis(Axis(0)).insert_axis(Axis(0)));
        d_act = d_pre.dot(&weight_view(model, block.weight));
    }
    grad
}

/// `v - lr * g` for every scalar.
pub fn sgd_step(model: &ParameterSet, grad: &ParameterSet, lr: f64) -> Result<ParameterSet> {
    let mut out = model.clone();
    sgd_step_in_place(&mut out, grad, lr)?;
    Ok(out)
}

pub fn sgd_step_in_place(model: &mut ParameterSet, grad: &ParameterSet, lr: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::config(format!("learning rate must be finite and non-negative, got {lr}")));
    }
    model.ensure_same_structure(grad)?;
    for (l, g) in model.layers.iter_mut().zip(&grad.layers) {
        for (v, &d) in l.values.iter_mut().zip(&g.values) {
            *v -= lr * d;
        }
    }
    Ok(())
}

/// One SGD step on `batch`, including the running-statistic update of any
/// normalization layers. Returns the pre-step loss.
pub fn train_step(model: &mut ParameterSet, spec: &MlpSpec, batch: &Batch<'_>, lr: f64) -> Result<f64> {
    let (loss, grad, cache) = loss_grad_cache(model, spec, batch)?;
    sgd_step_in_place(model, &grad, lr)?;
    update_running_stats(model, spec, &cache, batch.len());
    Ok(loss)
}

fn update_running_stats(model: &mut ParameterSet, spec: &MlpSpec, cache: &ForwardCache, batch_size: usize) {
    for (block, bc) in spec.slots().iter().zip(&cache.hidden) {
        let (Some(ns), Some(nc)) = (block.norm, &bc.norm) else {
            continue;
        };
        let mut stats = NormStats {
            running_mean: std::mem::take(&mut model.layers[ns.mean].values),
            running_var: std::mem::take(&mut model.layers[ns.var].values),
            momentum: NORM_MOMENTUM,
        };
        stats.blend(nc.batch_mean.view(), nc.batch_var.view(), batch_size);
        model.layers[ns.mean].values = stats.running_mean;
        model.layers[ns.var].values = stats.running_var;
    }
}

/// Arg-max class per row in evaluation mode; ties go to the lower class.
pub fn predict(model: &ParameterSet, spec: &MlpSpec, features: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
    let labels = vec![0; features.nrows()];
    let batch = Batch::new(features, &labels)?;
    let (logits, _) = forward(model, spec, &batch, Mode::Eval)?;
    Ok(logits
        .outer_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &z)| if z > best.1 { (i, z) } else { best })
                .0
        })
        .collect())
}

/// Loss change from zeroing one parameter, measured by re-running the
/// forward pass: `|L(theta) - L(theta with index set to 0)|`.
pub fn exact_sensitivity_oracle(
    model: &ParameterSet,
    spec: &MlpSpec,
    batch: &Batch<'_>,
    index: ParamIndex,
) -> Result<f64> {
    let base = loss(model, spec, batch)?;
    exact_sensitivity_from_base(model, spec, batch, index, base)
}

/// Oracle values for every parameter, sharing one baseline forward pass.
pub fn exact_sensitivity_all(model: &ParameterSet, spec: &MlpSpec, batch: &Batch<'_>) -> Result<Vec<Vec<f64>>> {
    let base = loss(model, spec, batch)?;
    model
        .layers
        .iter()
        .enumerate()
        .map(|(layer, l)| {
            (0..l.len())
                .map(|offset| exact_sensitivity_from_base(model, spec, batch, ParamIndex { layer, offset }, base))
                .collect()
        })
        .collect()
}

fn exact_sensitivity_from_base(
    model: &ParameterSet,
    spec: &MlpSpec,
    batch: &Batch<'_>,
    index: ParamIndex,
    base: f64,
) -> Result<f64> {
    let value = model
        .get(index)
        .ok_or_else(|| Error::config(format!("parameter index {index:?} out of range")))?;
    if value == 0.0 {
        return Ok(0.0);
    }
    let mut zeroed = model.clone();
    zeroed.set(index, 0.0)?;
    Ok((base - loss(&zeroed, spec, batch)?).abs())
}
