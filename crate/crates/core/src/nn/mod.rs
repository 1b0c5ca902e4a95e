//! Dense MLP engine: forward pass, likelihoods and exact reverse-mode
//! gradients. Weight matrices are stored `fan_in × fan_out` (row `k` holds
//! the outgoing weights of input neuron `k`), so a layer computes
//! `y = x·W + b`.

mod io;

pub use io::{read_weights, write_weights, PosteriorArrays, WeightsFile, WEIGHTS_MAGIC};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config, domain, Result};
use crate::prior::SupportMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation output `a`.
    #[inline]
    fn slope(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Classification,
    Regression,
}

/// Layer sizes `[n0, n1, ..., nL]` of a dense MLP.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkDef {
    pub sizes: Vec<usize>,
    pub activation: Activation,
    pub task: Task,
}

impl NetworkDef {
    pub fn new(sizes: Vec<usize>, activation: Activation, task: Task) -> Result<Self> {
        if sizes.len() < 2 {
            return config("a network needs at least one layer");
        }
        if sizes.contains(&0) {
            return config("layer sizes must be positive");
        }
        Ok(Self { sizes, activation, task })
    }

    pub fn classifier(sizes: &[usize]) -> Result<Self> {
        Self::new(sizes.to_vec(), Activation::Relu, Task::Classification)
    }

    pub fn regressor(sizes: &[usize]) -> Result<Self> {
        Self::new(sizes.to_vec(), Activation::Relu, Task::Regression)
    }

    pub fn layer_count(&self) -> usize {
        self.sizes.len() - 1
    }

    /// `(fan_in, fan_out)` of every weight matrix.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        self.sizes.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn input_size(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn weight_count(&self) -> usize {
        self.layer_dims().iter().map(|(k, m)| k * m).sum()
    }
}

/// Row-major real tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return domain(format!("tensor of shape {shape:?} needs {n} values, got {}", data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return domain("tensor values must be finite");
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.shape[1];
        &self.data[i * w..(i + 1) * w]
    }
}

/// Weights and biases of one dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub fan_in: usize,
    pub fan_out: usize,
    /// `fan_in × fan_out`, row-major.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub layers: Vec<LayerWeights>,
}

impl Weights {
    pub fn zeros(net: &NetworkDef) -> Self {
        let layers = net
            .layer_dims()
            .into_iter()
            .map(|(k, m)| LayerWeights { fan_in: k, fan_out: m, w: vec![0.0; k * m], b: vec![0.0; m] })
            .collect();
        Self { layers }
    }

    /// He-normal weights, zero biases.
    pub fn init(net: &NetworkDef, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Self::zeros(net);
        for layer in &mut w.layers {
            let std = (2.0 / layer.fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).unwrap();
            for v in &mut layer.w {
                *v = normal.sample(&mut rng);
            }
        }
        w
    }

    pub fn dims(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.fan_in, l.fan_out)).collect()
    }

    pub fn check(&self, net: &NetworkDef) -> Result<()> {
        if self.dims() != net.layer_dims() {
            return config(format!("weights {:?} do not match network {:?}", self.dims(), net.layer_dims()));
        }
        for l in &self.layers {
            if l.w.len() != l.fan_in * l.fan_out || l.b.len() != l.fan_out {
                return config("weight buffer length does not match layer dims");
            }
        }
        Ok(())
    }

    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len()).sum()
    }

    pub fn nonzero_weights(&self) -> usize {
        self.layers.iter().flat_map(|l| &l.w).filter(|v| **v != 0.0).count()
    }

    /// Zero every weight whose support entry is 0.
    pub fn apply_masks(&mut self, masks: &[SupportMatrix]) -> Result<()> {
        check_masks(&self.dims(), masks)?;
        for (layer, mask) in self.layers.iter_mut().zip(masks) {
            for (v, &s) in layer.w.iter_mut().zip(mask.as_slice()) {
                if s == 0 {
                    *v = 0.0;
                }
            }
        }
        Ok(())
    }

    /// Support of the nonzero weights.
    pub fn nonzero_masks(&self) -> Vec<SupportMatrix> {
        self.layers
            .iter()
            .map(|l| SupportMatrix::from_vec(l.fan_in, l.fan_out, l.w.iter().map(|v| (*v != 0.0) as u8).collect()).unwrap())
            .collect()
    }

    fn fill(&mut self, v: f64) {
        for l in &mut self.layers {
            l.w.iter_mut().for_each(|x| *x = v);
            l.b.iter_mut().for_each(|x| *x = v);
        }
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Weights) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w.iter_mut().zip(&b.w).for_each(|(x, y)| *x += alpha * y);
            a.b.iter_mut().zip(&b.b).for_each(|(x, y)| *x += alpha * y);
        }
    }
}

pub(crate) fn check_masks(dims: &[(usize, usize)], masks: &[SupportMatrix]) -> Result<()> {
    if masks.len() != dims.len() || masks.iter().zip(dims).any(|(m, d)| m.dims() != *d) {
        return config("masks do not match layer dims");
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    Labels(Vec<usize>),
    /// `D × n_out`.
    Values(Tensor),
}

/// `D` input/target pairs; inputs are stored as a `D × n0` tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    inputs: Tensor,
    targets: Targets,
}

impl Dataset {
    pub fn new(inputs: Tensor, targets: Targets) -> Result<Self> {
        if inputs.shape().len() != 2 {
            return domain("dataset inputs must be a D x n0 tensor");
        }
        let d = inputs.shape()[0];
        let nt = match &targets {
            Targets::Labels(l) => l.len(),
            Targets::Values(t) => {
                if t.shape().len() != 2 {
                    return domain("regression targets must be a D x n_out tensor");
                }
                t.shape()[0]
            }
        };
        if nt != d {
            return domain(format!("dataset has {d} inputs but {nt} targets"));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn input(&self, i: usize) -> &[f64] {
        self.inputs.row(i)
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LikelihoodModel {
    /// Softmax + cross-entropy.
    Classification,
    /// Isotropic Gaussian noise with variance `noise_var`.
    Regression { noise_var: f64 },
}

impl LikelihoodModel {
    pub fn validate(&self) -> Result<()> {
        if let LikelihoodModel::Regression { noise_var } = self {
            if !(*noise_var > 0.0 && noise_var.is_finite()) {
                return config(format!("noise variance must be positive, got {noise_var}"));
            }
        }
        Ok(())
    }

    fn check(&self, net: &NetworkDef, data: &Dataset) -> Result<()> {
        self.validate()?;
        if data.input_dim() != net.input_size() {
            return domain(format!("inputs have {} features, network expects {}", data.input_dim(), net.input_size()));
        }
        match (self, data.targets()) {
            (LikelihoodModel::Classification, Targets::Labels(l)) => {
                if let Some(bad) = l.iter().find(|&&y| y >= net.output_size()) {
                    return domain(format!("label {bad} out of range for {} outputs", net.output_size()));
                }
                Ok(())
            }
            (LikelihoodModel::Regression { .. }, Targets::Values(t)) => {
                if t.shape()[1] != net.output_size() {
                    return domain("regression target width does not match network output");
                }
                Ok(())
            }
            _ => domain("likelihood model does not match dataset targets"),
        }
    }
}

/// Reusable activation buffers for one example.
struct Scratch {
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl Scratch {
    fn new(net: &NetworkDef) -> Self {
        let widest = *net.sizes.iter().max().unwrap();
        Self {
            acts: net.sizes.iter().map(|&n| vec![0.0; n]).collect(),
            delta: Vec::with_capacity(widest),
            delta_prev: Vec::with_capacity(widest),
        }
    }
}

fn forward_into(net: &NetworkDef, w: &Weights, x: &[f64], acts: &mut [Vec<f64>]) {
    acts[0].copy_from_slice(x);
    let last = w.layers.len() - 1;
    for (l, layer) in w.layers.iter().enumerate() {
        let (head, tail) = acts.split_at_mut(l + 1);
        let input = &head[l];
        let out = &mut tail[0];
        out.copy_from_slice(&layer.b);
        for (k, &xk) in input.iter().enumerate() {
            if xk == 0.0 {
                continue;
            }
            let row = &layer.w[k * layer.fan_out..(k + 1) * layer.fan_out];
            for (o, &wkm) in out.iter_mut().zip(row) {
                *o += xk * wkm;
            }
        }
        if l != last {
            for o in out.iter_mut() {
                *o = net.activation.apply(*o);
            }
        }
    }
}

/// Network output for a single input.
pub fn forward(net: &NetworkDef, w: &Weights, x: &[f64]) -> Result<Vec<f64>> {
    w.check(net)?;
    if x.len() != net.input_size() {
        return domain(format!("input has {} values, network expects {}", x.len(), net.input_size()));
    }
    let mut acts: Vec<Vec<f64>> = net.sizes.iter().map(|&n| vec![0.0; n]).collect();
    forward_into(net, w, x, &mut acts);
    Ok(acts.pop().unwrap())
}

/// `ln Σ exp(z)` with max shift.
fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Per-example loss; writes `dloss/doutput` into `delta` when asked.
fn example_loss(model: &LikelihoodModel, data: &Dataset, i: usize, out: &[f64], delta: Option<&mut Vec<f64>>) -> f64 {
    match (model, data.targets()) {
        (LikelihoodModel::Classification, Targets::Labels(labels)) => {
            let y = labels[i];
            let lse = log_sum_exp(out);
            if let Some(d) = delta {
                d.clear();
                d.extend(out.iter().map(|z| (z - lse).exp()));
                d[y] -= 1.0;
            }
            lse - out[y]
        }
        (LikelihoodModel::Regression { noise_var }, Targets::Values(t)) => {
            let y = t.row(i);
            let mut sq = 0.0;
            for (o, t) in out.iter().zip(y) {
                sq += (o - t) * (o - t);
            }
            if let Some(d) = delta {
                d.clear();
                d.extend(out.iter().zip(y).map(|(o, t)| (o - t) / noise_var));
            }
            let dim = out.len() as f64;
            sq / (2.0 * noise_var) + 0.5 * dim * (2.0 * std::f64::consts::PI * noise_var).ln()
        }
        _ => unreachable!("checked by LikelihoodModel::check"),
    }
}

fn check_batch(net: &NetworkDef, w: &Weights, data: &Dataset, batch: &[usize], model: &LikelihoodModel) -> Result<()> {
    w.check(net)?;
    model.check(net, data)?;
    if batch.is_empty() {
        return domain("batch must be nonempty");
    }
    if let Some(&bad) = batch.iter().find(|&&i| i >= data.len()) {
        return domain(format!("batch index {bad} out of range for {} examples", data.len()));
    }
    Ok(())
}

/// Mean negative log-likelihood over the examples in `batch`.
pub fn neg_log_likelihood(
    net: &NetworkDef,
    w: &Weights,
    data: &Dataset,
    batch: &[usize],
    model: &LikelihoodModel,
) -> Result<f64> {
    check_batch(net, w, data, batch, model)?;
    let mut scratch = Scratch::new(net);
    let mut total = 0.0;
    for &i in batch {
        forward_into(net, w, data.input(i), &mut scratch.acts);
        total += example_loss(model, data, i, scratch.acts.last().unwrap(), None);
    }
    Ok(total / batch.len() as f64)
}

/// Mean negative log-likelihood and its exact gradient with respect to
/// every weight and bias. Examples are reduced in `batch` order.
pub fn backward(
    net: &NetworkDef,
    w: &Weights,
    data: &Dataset,
    batch: &[usize],
    model: &LikelihoodModel,
) -> Result<(f64, Weights)> {
    check_batch(net, w, data, batch, model)?;
    let mut grad = w.clone();
    grad.fill(0.0);
    let mut s = Scratch::new(net);
    let mut total = 0.0;
    for &i in batch {
        forward_into(net, w, data.input(i), &mut s.acts);
        total += example_loss(model, data, i, s.acts.last().unwrap(), Some(&mut s.delta));
        for l in (0..w.layers.len()).rev() {
            let layer = &w.layers[l];
            let g = &mut grad.layers[l];
            let input = &s.acts[l];
            for (gb, d) in g.b.iter_mut().zip(&s.delta) {
                *gb += d;
            }
            for (k, &xk) in input.iter().enumerate() {
                if xk == 0.0 {
                    continue;
                }
                let row = &mut g.w[k * layer.fan_out..(k + 1) * layer.fan_out];
                for (gw, d) in row.iter_mut().zip(&s.delta) {
                    *gw += xk * d;
                }
            }
            if l > 0 {
                s.delta_prev.clear();
                for (k, &a) in input.iter().enumerate() {
                    let row = &layer.w[k * layer.fan_out..(k + 1) * layer.fan_out];
                    let mut acc = 0.0;
                    for (wkm, d) in row.iter().zip(&s.delta) {
                        acc += wkm * d;
                    }
                    s.delta_prev.push(acc * net.activation.slope(a));
                }
                std::mem::swap(&mut s.delta, &mut s.delta_prev);
            }
        }
    }
    let scale = 1.0 / batch.len() as f64;
    for l in &mut grad.layers {
        l.w.iter_mut().for_each(|v| *v *= scale);
        l.b.iter_mut().for_each(|v| *v *= scale);
    }
    Ok((total * scale, grad))
}

/// Index of the largest output for every example.
pub fn predict_classes(net: &NetworkDef, w: &Weights, data: &Dataset) -> Result<Vec<usize>> {
    w.check(net)?;
    if data.input_dim() != net.input_size() {
        return domain("dataset width does not match network input");
    }
    let mut acts: Vec<Vec<f64>> = net.sizes.iter().map(|&n| vec![0.0; n]).collect();
    Ok((0..data.len())
        .map(|i| {
            forward_into(net, w, data.input(i), &mut acts);
            argmax(acts.last().unwrap())
        })
        .collect())
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Fraction of correctly classified examples.
pub fn accuracy(net: &NetworkDef, w: &Weights, data: &Dataset) -> Result<f64> {
    let Targets::Labels(labels) = data.targets() else {
        return domain("accuracy needs class labels");
    };
    if data.is_empty() {
        return Ok(0.0);
    }
    let pred = predict_classes(net, w, data)?;
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Minibatch SGD settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { lr: 0.01, batch_size: 64, epochs: 20, seed: 0 }
    }
}

/// Epoch-shuffled minibatches drawn from a seeded generator.
pub(crate) fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// Plain SGD on the mean negative log-likelihood. When `masks` is given,
/// masked weights are zeroed first and receive no updates.
pub fn sgd_train(
    net: &NetworkDef,
    w: &mut Weights,
    data: &Dataset,
    model: &LikelihoodModel,
    cfg: &SgdConfig,
    masks: Option<&[SupportMatrix]>,
) -> Result<()> {
    if cfg.batch_size == 0 {
        return config("batch size must be at least 1");
    }
    if let Some(m) = masks {
        w.apply_masks(m)?;
    }
    if cfg.epochs == 0 || data.is_empty() {
        return Ok(());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for epoch in 0..cfg.epochs {
        for batch in epoch_batches(data.len(), cfg.batch_size, &mut rng) {
            let (loss, mut grad) = backward(net, w, data, &batch, model)?;
            if !loss.is_finite() {
                return Err(crate::Error::Divergence(format!("non-finite training loss in epoch {epoch}")));
            }
            if let Some(m) = masks {
                grad.apply_masks(m)?;
            }
            w.axpy(-cfg.lr, &grad);
        }
    }
    Ok(())
}
