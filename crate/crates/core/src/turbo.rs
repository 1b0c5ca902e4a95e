//! Turbo loop: alternate the variational estimator with message passing on
//! the support prior, then extract MAP estimates, prune and fine-tune.

use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::mrf::{build_graph, spmp_run, BernoulliMessage, SpmpConfig, SupportGraph};
use crate::nn::{self, check_masks, Dataset, LikelihoodModel, NetworkDef, SgdConfig, Weights};
use crate::prior::{HierarchicalPrior, SupportMatrix};
use crate::vbi::{run_module_a, ModuleAConfig, PriorInput, VariationalPosterior};

/// Settings of [`turbo_run`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TurboConfig {
    pub imax: usize,
    /// Threshold on `max |Δ v_{h→s}|` that ends the loop.
    pub tol: f64,
    pub pi_init: f64,
    pub threshold: f64,
    pub fine_tune_epochs: usize,
    pub seed: u64,
    pub module_a: ModuleAConfig,
    pub spmp: SpmpConfig,
}

impl Default for TurboConfig {
    fn default() -> Self {
        Self {
            imax: 15,
            tol: 1e-3,
            pi_init: 0.5,
            threshold: 0.5,
            fine_tune_epochs: 15,
            seed: 0,
            module_a: ModuleAConfig::default(),
            spmp: SpmpConfig::default(),
        }
    }
}

impl TurboConfig {
    pub fn validate(&self) -> Result<()> {
        if self.imax == 0 {
            return config("I_max must be at least 1");
        }
        if !(self.tol > 0.0) {
            return config("turbo tolerance must be positive");
        }
        if !(self.pi_init > 0.0 && self.pi_init < 1.0) {
            return config("initial support probability must lie in (0,1)");
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return config("support threshold must lie in [0,1]");
        }
        self.module_a.validate()
    }

    fn module_a_seed(&self) -> u64 {
        stream_seed(self.seed, 1)
    }

    fn fine_tune_sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.module_a.lr,
            batch_size: self.module_a.batch_size,
            epochs: self.fine_tune_epochs,
            seed: stream_seed(self.seed, 2),
        }
    }
}

/// Independent seed per consumer of the run seed.
pub fn stream_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One row of the convergence trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub max_msg_delta: f64,
    pub neg_elbo_surrogate: f64,
    /// Fraction of weights with `π̃ ≥ threshold`.
    pub sparsity: f64,
    /// Accuracy of the thresholded posterior mean on the evaluation set
    /// (training set when none is given); `NaN` for regression.
    pub accuracy: f64,
}

/// Loop state after [`turbo_run`] returns.
#[derive(Debug, Clone)]
pub struct TurboState {
    pub iteration: usize,
    /// `v_{h→s}` per layer.
    pub prior_msgs: Vec<Vec<BernoulliMessage>>,
    /// `v_{η→s}` per layer.
    pub extrinsics: Vec<Vec<BernoulliMessage>>,
    pub posterior: VariationalPosterior,
    pub trace: Vec<TraceRow>,
    pub converged: bool,
    /// Message-passing runs that stopped at their iteration cap.
    pub spmp_unconverged: usize,
}

/// Deterministic point estimates read off the posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct MapEstimate {
    /// Posterior means with unsupported weights set to zero.
    pub weights: Weights,
    /// Gamma modes `(ã − 1)/b̃`.
    pub rho: Vec<Vec<f64>>,
    pub masks: Vec<SupportMatrix>,
}

/// `w* = μ` masked by `s* = [π̃ ≥ threshold]`, `ρ* = (ã−1)/b̃`.
pub fn map_extract(post: &VariationalPosterior, threshold: f64) -> MapEstimate {
    let mut weights = post.mean_weights();
    let mut masks = Vec::with_capacity(post.layers.len());
    let mut rho = Vec::with_capacity(post.layers.len());
    for ((l, lw), &(k, m)) in post.layers.iter().zip(&mut weights.layers).zip(post.dims()) {
        let mask = SupportMatrix::from_fn(k, m, |i, j| l.bern.pi[i * m + j] >= threshold);
        for (v, &s) in lw.w.iter_mut().zip(mask.as_slice()) {
            if s == 0 {
                *v = 0.0;
            }
        }
        rho.push((0..l.gamma.shape.len()).map(|n| l.gamma.mode(n)).collect());
        masks.push(mask);
    }
    MapEstimate { weights, rho, masks }
}

/// Multiply-add count before and after neuron-level pruning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub dense: u64,
    pub pruned: u64,
    /// `(K', M')` per layer: rows and columns of the mask that hold a one.
    pub layer_dims: Vec<(usize, usize)>,
    /// Surviving neurons per network layer, input first. A neuron survives
    /// when any weight into or out of it is kept.
    pub structure: Vec<usize>,
}

impl FlopsReport {
    /// Removed share of dense FLOPs, in percent.
    pub fn reduction_pct(&self) -> f64 {
        if self.dense == 0 {
            0.0
        } else {
            100.0 * (1.0 - self.pruned as f64 / self.dense as f64)
        }
    }
}

/// Dense layers cost `2KM`; pruned layers `2K'M'` on their live rows and
/// columns.
pub fn flops_count(net: &NetworkDef, masks: &[SupportMatrix]) -> Result<FlopsReport> {
    let dims = net.layer_dims();
    check_masks(&dims, masks)?;
    let mut dense = 0u64;
    let mut pruned = 0u64;
    let mut layer_dims = Vec::with_capacity(dims.len());
    let mut live_rows = Vec::with_capacity(dims.len());
    let mut live_cols = Vec::with_capacity(dims.len());
    for (mask, &(k, m)) in masks.iter().zip(&dims) {
        let rows: Vec<bool> = (0..k).map(|i| (0..m).any(|j| mask.get(i, j))).collect();
        let cols: Vec<bool> = (0..m).map(|j| (0..k).any(|i| mask.get(i, j))).collect();
        let kp = rows.iter().filter(|&&b| b).count();
        let mp = cols.iter().filter(|&&b| b).count();
        dense += 2 * (k * m) as u64;
        pruned += 2 * (kp * mp) as u64;
        layer_dims.push((kp, mp));
        live_rows.push(rows);
        live_cols.push(cols);
    }
    let mut structure = Vec::with_capacity(dims.len() + 1);
    structure.push(live_rows[0].iter().filter(|&&b| b).count());
    for l in 0..dims.len() {
        let count = match live_rows.get(l + 1) {
            Some(next) => live_cols[l].iter().zip(next).filter(|(a, b)| **a || **b).count(),
            None => live_cols[l].iter().filter(|&&b| b).count(),
        };
        structure.push(count);
    }
    Ok(FlopsReport { dense, pruned, layer_dims, structure })
}

/// SGD on the kept weights only; masked entries stay exactly zero.
pub fn fine_tune(
    net: &NetworkDef,
    w: &Weights,
    masks: &[SupportMatrix],
    data: &Dataset,
    model: &LikelihoodModel,
    sgd: &SgdConfig,
) -> Result<Weights> {
    let mut out = w.clone();
    nn::sgd_train(net, &mut out, data, model, sgd, Some(masks))?;
    Ok(out)
}

/// Pruned model and its summary metrics.
#[derive(Debug, Clone)]
pub struct PruneResult {
    pub masks: Vec<SupportMatrix>,
    /// Fine-tuned pruned weights.
    pub weights: Weights,
    /// MAP weights before fine-tuning.
    pub map_weights: Weights,
    pub rho: Vec<Vec<f64>>,
    /// Kept weights over all weights.
    pub sparsity: f64,
    pub flops: FlopsReport,
}

/// Per-iteration view handed to the observer of [`turbo_run`].
#[derive(Debug, Clone, Copy)]
pub struct IterationReport<'a> {
    pub row: &'a TraceRow,
    pub masks: &'a [SupportMatrix],
}

fn support_fraction(post: &VariationalPosterior, threshold: f64) -> f64 {
    let total: usize = post.layers.iter().map(|l| l.bern.pi.len()).sum();
    let kept = post.layers.iter().flat_map(|l| &l.bern.pi).filter(|&&p| p >= threshold).count();
    kept as f64 / total as f64
}

fn trace_accuracy(net: &NetworkDef, w: &Weights, data: &Dataset, model: &LikelihoodModel) -> Result<f64> {
    match model {
        LikelihoodModel::Classification => nn::accuracy(net, w, data),
        LikelihoodModel::Regression { .. } => Ok(f64::NAN),
    }
}

fn check_inputs(net: &NetworkDef, init: &Weights, prior: &HierarchicalPrior, cfg: &TurboConfig) -> Result<()> {
    cfg.validate()?;
    init.check(net)?;
    prior.check_dims(&net.layer_dims())
}

fn finish(
    net: &NetworkDef,
    post: &VariationalPosterior,
    data: &Dataset,
    model: &LikelihoodModel,
    cfg: &TurboConfig,
) -> Result<PruneResult> {
    let map = map_extract(post, cfg.threshold);
    let weights = fine_tune(net, &map.weights, &map.masks, data, model, &cfg.fine_tune_sgd())?;
    let total: usize = map.masks.iter().map(|m| m.rows() * m.cols()).sum();
    let kept: usize = map.masks.iter().map(SupportMatrix::count_ones).sum();
    let flops = flops_count(net, &map.masks)?;
    Ok(PruneResult {
        masks: map.masks,
        weights,
        map_weights: map.weights,
        rho: map.rho,
        sparsity: kept as f64 / total as f64,
        flops,
    })
}

/// Runs the turbo loop from point weights `init`.
///
/// Each iteration runs the variational estimator under the current support
/// prior `π`, turns its extrinsic output into unary factors, runs message
/// passing on every layer's support graph and sets `π` from the returned
/// `v_{h→s}`. The loop stops once no message moves by more than `cfg.tol`
/// or after `cfg.imax` iterations. Message-passing runs that hit their cap
/// are counted, not treated as errors.
#[allow(clippy::too_many_arguments)]
pub fn turbo_run(
    net: &NetworkDef,
    init: &Weights,
    data: &Dataset,
    eval: Option<&Dataset>,
    prior: &HierarchicalPrior,
    model: &LikelihoodModel,
    cfg: &TurboConfig,
    mut observer: impl FnMut(IterationReport<'_>),
) -> Result<(TurboState, PruneResult)> {
    check_inputs(net, init, prior, cfg)?;
    let hypers = prior.gamma();
    let eval = eval.unwrap_or(data);

    let mut posterior = VariationalPosterior::from_weights(init, &hypers, cfg.module_a.init_support)?;
    let mut prior_msgs: Vec<Vec<BernoulliMessage>> = prior
        .layers
        .iter()
        .map(|l| vec![BernoulliMessage::from_prob(cfg.pi_init); l.rows * l.cols])
        .collect();
    let mut graphs: Vec<SupportGraph> = prior
        .layers
        .iter()
        .zip(&prior_msgs)
        .map(|(l, u)| build_graph((l.rows, l.cols), &l.mrf, u))
        .collect::<Result<_>>()?;
    let mut extrinsics = Vec::new();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut spmp_unconverged = 0;
    let mut iteration = 0;

    while iteration < cfg.imax {
        iteration += 1;
        let pis: Vec<PriorInput> = prior_msgs.iter().map(|m| PriorInput::from_messages(m)).collect();
        let out = run_module_a(&pis, &hypers, net, posterior, data, model, &cfg.module_a, cfg.module_a_seed())?;
        posterior = out.posterior;
        let mut delta: f64 = 0.0;
        for ((graph, unary), msgs) in graphs.iter_mut().zip(&out.extrinsic).zip(&mut prior_msgs) {
            graph.set_unary(unary)?;
            let res = spmp_run(graph, &cfg.spmp)?;
            if !res.converged {
                spmp_unconverged += 1;
            }
            for (old, new) in msgs.iter().zip(&res.extrinsic) {
                delta = delta.max((old.m1 - new.m1).abs());
            }
            *msgs = res.extrinsic;
        }
        extrinsics = out.extrinsic;

        let map = map_extract(&posterior, cfg.threshold);
        let row = TraceRow {
            iter: iteration,
            max_msg_delta: delta,
            neg_elbo_surrogate: *out.objective.last().unwrap_or(&f64::NAN),
            sparsity: support_fraction(&posterior, cfg.threshold),
            accuracy: trace_accuracy(net, &map.weights, eval, model)?,
        };
        observer(IterationReport { row: &row, masks: &map.masks });
        trace.push(row);
        if delta < cfg.tol {
            converged = true;
            break;
        }
    }

    let result = finish(net, &posterior, data, model, cfg)?;
    let state = TurboState { iteration, prior_msgs, extrinsics, posterior, trace, converged, spmp_unconverged };
    Ok((state, result))
}

/// One variational run under the fixed support prior `π = cfg.pi_init`,
/// followed by the same extraction and fine-tuning as [`turbo_run`].
pub fn plain_vbi_run(
    net: &NetworkDef,
    init: &Weights,
    data: &Dataset,
    prior: &HierarchicalPrior,
    model: &LikelihoodModel,
    cfg: &TurboConfig,
) -> Result<(VariationalPosterior, PruneResult)> {
    check_inputs(net, init, prior, cfg)?;
    let hypers = prior.gamma();
    let posterior = VariationalPosterior::from_weights(init, &hypers, cfg.module_a.init_support)?;
    let pis: Vec<PriorInput> = prior.layers.iter().map(|l| PriorInput::uniform(l.rows * l.cols, cfg.pi_init)).collect();
    let out = run_module_a(&pis, &hypers, net, posterior, data, model, &cfg.module_a, cfg.module_a_seed())?;
    let result = finish(net, &out.posterior, data, model, cfg)?;
    Ok((out.posterior, result))
}
