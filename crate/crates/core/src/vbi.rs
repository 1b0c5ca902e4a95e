//! Sparse variational estimator (the VBI side of the turbo loop).
//!
//! The mean-field posterior factorizes per weight into a Gaussian `q(w)`,
//! a Gamma `q(ρ)` and a Bernoulli `q(s)`. `q(ρ)` and `q(s)` have closed-form
//! coordinate updates; `q(w)` is fitted by minimizing the Gaussian KL to
//! the prior at `E[ρ]` plus the likelihood evaluated at the posterior mean
//! (first-order Taylor surrogate of the expected log-likelihood).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{config, Error, Result};
use crate::mrf::{BernoulliMessage, MSG_FLOOR};
use crate::nn::{self, epoch_batches, Dataset, LayerWeights, LikelihoodModel, NetworkDef, PosteriorArrays, Weights};
use crate::prior::GammaHyper;

/// Per-weight `q(w_n) = N(μ_n, σ_n²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Per-weight `q(ρ_n) = Γ(shape_n, rate_n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaPosterior {
    pub shape: Vec<f64>,
    pub rate: Vec<f64>,
}

impl GammaPosterior {
    /// `E[ρ_n]`.
    pub fn mean(&self, n: usize) -> f64 {
        self.shape[n] / self.rate[n]
    }

    /// `E[ln ρ_n] = ψ(shape) - ln(rate)`.
    pub fn mean_ln(&self, n: usize) -> f64 {
        digamma(self.shape[n]) - self.rate[n].ln()
    }

    /// Variance `1 / E[ρ_n]` of the Gaussian prior the weight is pulled to.
    pub fn prior_variance(&self, n: usize) -> f64 {
        self.rate[n] / self.shape[n]
    }

    /// Posterior mode `(shape - 1) / rate`.
    pub fn mode(&self, n: usize) -> f64 {
        (self.shape[n] - 1.0) / self.rate[n]
    }
}

/// Per-weight `q(s_n = 1) = π̃_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct BernoulliPosterior {
    pub pi: Vec<f64>,
}

/// Support prior `π_n = P(s_n = 1)` handed over by the message-passing side.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorInput {
    pi: Vec<f64>,
}

impl PriorInput {
    /// Clamps every probability into `[ε, 1-ε]`.
    pub fn new(pi: Vec<f64>) -> Self {
        Self { pi: pi.into_iter().map(|p| p.clamp(MSG_FLOOR, 1.0 - MSG_FLOOR)).collect() }
    }

    pub fn uniform(n: usize, p: f64) -> Self {
        Self::new(vec![p; n])
    }

    pub fn from_messages(msgs: &[BernoulliMessage]) -> Self {
        Self::new(msgs.iter().map(|m| m.m1 / (m.m0 + m.m1)).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.pi
    }

    pub fn len(&self) -> usize {
        self.pi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pi.is_empty()
    }
}

/// Closed-form `q(ρ)` update:
/// `shape = π̃a + (1-π̃)ā + 1`, `rate = μ² + σ² + π̃b + (1-π̃)b̄`.
pub fn update_q_rho(gauss: &GaussianPosterior, bern: &BernoulliPosterior, h: &GammaHyper) -> GammaPosterior {
    let n = gauss.mu.len();
    let mut shape = Vec::with_capacity(n);
    let mut rate = Vec::with_capacity(n);
    for i in 0..n {
        let p = bern.pi[i];
        let (mu, sigma) = (gauss.mu[i], gauss.sigma[i]);
        shape.push(p * h.a + (1.0 - p) * h.a_bar + 1.0);
        rate.push(mu * mu + sigma * sigma + p * h.b + (1.0 - p) * h.b_bar);
    }
    GammaPosterior { shape, rate }
}

/// `ln C` for one support state: `ln π + a ln b − ln Γ(a) + (a−1)⟨ln ρ⟩ − b⟨ρ⟩`.
fn ln_support_weight(ln_prior: f64, shape: f64, rate: f64, mean_ln: f64, mean: f64) -> f64 {
    ln_prior + shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * mean_ln - rate * mean
}

/// Closed-form `q(s)` update `π̃ = C₁ / (C₁ + C₂)`, evaluated in the log
/// domain so that `b̄^ā` and `Γ(·)` never overflow.
pub fn update_q_s(gamma: &GammaPosterior, prior: &PriorInput, h: &GammaHyper) -> BernoulliPosterior {
    let pi = (0..gamma.shape.len())
        .map(|n| {
            let p = prior.pi[n];
            let (m, ml) = (gamma.mean(n), gamma.mean_ln(n));
            let c1 = ln_support_weight(p.ln(), h.a, h.b, ml, m);
            let c2 = ln_support_weight((1.0 - p).ln(), h.a_bar, h.b_bar, ml, m);
            logistic(c1 - c2)
        })
        .collect();
    BernoulliPosterior { pi }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `KL(q(w) ‖ N(0, 1/E[ρ]))` summed over weights.
pub fn gaussian_kl(gauss: &GaussianPosterior, gamma: &GammaPosterior) -> f64 {
    (0..gauss.mu.len())
        .map(|n| {
            let var_p = gamma.prior_variance(n);
            let (mu, s) = (gauss.mu[n], gauss.sigma[n]);
            0.5 * (var_p.ln() - (s * s).ln()) + (s * s + mu * mu) / (2.0 * var_p) - 0.5
        })
        .sum()
}

/// Deterministic surrogate for `E_q[g(w)]`: `g` evaluated at the mean.
pub fn taylor_expectation<G: Fn(&[f64]) -> f64>(g: G, gauss: &GaussianPosterior) -> f64 {
    g(&gauss.mu)
}

/// Extrinsic message `q(s_n) / π_n` sent to the support graph.
pub fn message_to_b(bern: &BernoulliPosterior, prior: &PriorInput) -> Vec<BernoulliMessage> {
    bern.pi
        .iter()
        .zip(&prior.pi)
        .map(|(&q, &p)| BernoulliMessage::new((1.0 - q) / (1.0 - p).max(MSG_FLOOR), q / p.max(MSG_FLOOR)))
        .collect()
}

/// Posterior of one weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPosterior {
    pub gauss: GaussianPosterior,
    pub gamma: GammaPosterior,
    pub bern: BernoulliPosterior,
}

/// Mean-field posterior of every prunable layer plus the (unpruned) biases
/// that are trained alongside the means.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalPosterior {
    pub layers: Vec<LayerPosterior>,
    pub biases: Vec<Vec<f64>>,
    dims: Vec<(usize, usize)>,
}

impl VariationalPosterior {
    /// Starts from point weights: `μ = w`, `σ` at the inactive prior std
    /// `sqrt(b̄/ā)`, `q(s)` at `init_support` and `q(ρ)` from one update.
    pub fn from_weights(w: &Weights, hypers: &[GammaHyper], init_support: f64) -> Result<Self> {
        if hypers.len() != w.layers.len() {
            return config("one gamma hyperparameter set per layer required");
        }
        let layers = w
            .layers
            .iter()
            .zip(hypers)
            .map(|(l, h)| {
                let n = l.w.len();
                let gauss = GaussianPosterior { mu: l.w.clone(), sigma: vec![(h.b_bar / h.a_bar).sqrt(); n] };
                let bern = BernoulliPosterior { pi: vec![init_support; n] };
                let gamma = update_q_rho(&gauss, &bern, h);
                LayerPosterior { gauss, gamma, bern }
            })
            .collect();
        Ok(Self { layers, biases: w.layers.iter().map(|l| l.b.clone()).collect(), dims: w.dims() })
    }

    pub fn dims(&self) -> &[(usize, usize)] {
        &self.dims
    }

    /// Point weights at the posterior mean.
    pub fn mean_weights(&self) -> Weights {
        Weights {
            layers: self
                .layers
                .iter()
                .zip(&self.biases)
                .zip(&self.dims)
                .map(|((l, b), &(k, m))| LayerWeights { fan_in: k, fan_out: m, w: l.gauss.mu.clone(), b: b.clone() })
                .collect(),
        }
    }

    pub fn to_arrays(&self) -> Vec<PosteriorArrays> {
        self.layers
            .iter()
            .map(|l| PosteriorArrays {
                mu: l.gauss.mu.clone(),
                sigma: l.gauss.sigma.clone(),
                shape: l.gamma.shape.clone(),
                rate: l.gamma.rate.clone(),
                pi: l.bern.pi.clone(),
            })
            .collect()
    }

    pub fn from_arrays(w: &Weights, arrays: &[PosteriorArrays]) -> Result<Self> {
        if arrays.len() != w.layers.len() {
            return config("posterior arrays do not match layer count");
        }
        let layers = arrays
            .iter()
            .map(|a| LayerPosterior {
                gauss: GaussianPosterior { mu: a.mu.clone(), sigma: a.sigma.clone() },
                gamma: GammaPosterior { shape: a.shape.clone(), rate: a.rate.clone() },
                bern: BernoulliPosterior { pi: a.pi.clone() },
            })
            .collect();
        Ok(Self { layers, biases: w.layers.iter().map(|l| l.b.clone()).collect(), dims: w.dims() })
    }
}

/// Loss value and gradients of the surrogate objective.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grad_mu: Vec<Vec<f64>>,
    pub grad_sigma: Vec<Vec<f64>>,
    pub grad_bias: Vec<Vec<f64>>,
}

fn mean_weights_of(gauss: &[GaussianPosterior], biases: &[Vec<f64>], net: &NetworkDef) -> Result<Weights> {
    let dims = net.layer_dims();
    if gauss.len() != dims.len() || biases.len() != dims.len() {
        return config("posterior layer count does not match network");
    }
    let mut layers = Vec::with_capacity(dims.len());
    for ((g, b), &(k, m)) in gauss.iter().zip(biases).zip(&dims) {
        if g.mu.len() != k * m || g.sigma.len() != k * m || b.len() != m {
            return config("posterior length does not match network weight count");
        }
        layers.push(LayerWeights { fan_in: k, fan_out: m, w: g.mu.clone(), b: b.clone() });
    }
    Ok(Weights { layers })
}

/// Surrogate loss `Σ KL(q(w)‖N(0,1/E[ρ])) + D · mean NLL(batch; w = μ)` and
/// its gradient. The data term does not depend on `σ` under the first-order
/// surrogate, so `grad_sigma` comes from the KL alone.
pub fn loss_and_grad(
    gauss: &[GaussianPosterior],
    gamma: &[GammaPosterior],
    biases: &[Vec<f64>],
    net: &NetworkDef,
    data: &Dataset,
    batch: &[usize],
    model: &LikelihoodModel,
) -> Result<LossGrad> {
    let w = mean_weights_of(gauss, biases, net)?;
    if gamma.len() != gauss.len() {
        return config("gamma posterior layer count mismatch");
    }
    let scale = data.len() as f64;
    let (nll, g) = nn::backward(net, &w, data, batch, model)?;
    let mut loss = nll * scale;
    let mut grad_mu = Vec::with_capacity(gauss.len());
    let mut grad_sigma = Vec::with_capacity(gauss.len());
    for ((q, r), gl) in gauss.iter().zip(gamma).zip(&g.layers) {
        loss += gaussian_kl(q, r);
        let mut gm = Vec::with_capacity(q.mu.len());
        let mut gs = Vec::with_capacity(q.mu.len());
        for n in 0..q.mu.len() {
            let var_p = r.prior_variance(n);
            gm.push(q.mu[n] / var_p + scale * gl.w[n]);
            gs.push(-1.0 / q.sigma[n] + q.sigma[n] / var_p);
        }
        grad_mu.push(gm);
        grad_sigma.push(gs);
    }
    let grad_bias = g.layers.iter().map(|l| l.b.iter().map(|v| v * scale).collect()).collect();
    Ok(LossGrad { loss, grad_mu, grad_sigma, grad_bias })
}

/// Settings of one sparse-VBI run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModuleAConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs_per_round: usize,
    /// Relative change of the tracked objective that ends the BCD loop.
    pub tol: f64,
    pub max_rounds: usize,
    /// `π̃` that `q(s)` is initialized to at the start of every run.
    pub init_support: f64,
}

impl Default for ModuleAConfig {
    fn default() -> Self {
        Self { lr: 0.01, batch_size: 64, epochs_per_round: 3, tol: 1e-4, max_rounds: 10, init_support: 0.0 }
    }
}

impl ModuleAConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return config("learning rate must be positive");
        }
        if self.batch_size == 0 {
            return config("batch size must be at least 1");
        }
        if !(self.tol > 0.0) {
            return config("tol_A must be positive");
        }
        if self.max_rounds == 0 {
            return config("at least one BCD round is required");
        }
        if !(0.0..=1.0).contains(&self.init_support) {
            return config("init_support must lie in [0,1]");
        }
        Ok(())
    }
}

/// Result of [`run_module_a`].
#[derive(Debug, Clone)]
pub struct ModuleAOutput {
    pub posterior: VariationalPosterior,
    /// `q(s_n) / π_n` per layer, for the support graph.
    pub extrinsic: Vec<Vec<BernoulliMessage>>,
    pub rounds: usize,
    /// Surrogate objective after each round.
    pub objective: Vec<f64>,
}

/// Full-dataset value of the surrogate objective.
pub fn surrogate_objective(
    post: &VariationalPosterior,
    net: &NetworkDef,
    data: &Dataset,
    model: &LikelihoodModel,
) -> Result<f64> {
    let w = post.mean_weights();
    let nll = nn::neg_log_likelihood(net, &w, data, &data.all_indices(), model)?;
    let kl: f64 = post.layers.iter().map(|l| gaussian_kl(&l.gauss, &l.gamma)).sum();
    Ok(kl + nll * data.len() as f64)
}

/// Block coordinate descent over `q(ρ)`, `q(s)` and `q(w)` under the
/// independent support prior `prior_msgs`.
///
/// Every round applies the closed-form `q(ρ)` and `q(s)` updates, sets
/// `σ` to its closed-form optimum `sqrt(rate/shape)`, then runs
/// `epochs_per_round` epochs of SGD on the means and biases. Gradient steps
/// use the per-example scale (loss divided by `D`).
#[allow(clippy::too_many_arguments)]
pub fn run_module_a(
    prior_msgs: &[PriorInput],
    hypers: &[GammaHyper],
    net: &NetworkDef,
    mut posterior: VariationalPosterior,
    data: &Dataset,
    model: &LikelihoodModel,
    cfg: &ModuleAConfig,
    seed: u64,
) -> Result<ModuleAOutput> {
    cfg.validate()?;
    let dims = net.layer_dims();
    if posterior.dims() != dims.as_slice() || prior_msgs.len() != dims.len() || hypers.len() != dims.len() {
        return config("module A inputs do not match the network layers");
    }
    for (p, &(k, m)) in prior_msgs.iter().zip(&dims) {
        if p.len() != k * m {
            return config("prior message grid does not match layer dims");
        }
    }
    if data.is_empty() {
        return config("module A needs a nonempty dataset");
    }

    for l in &mut posterior.layers {
        l.bern.pi.iter_mut().for_each(|p| *p = cfg.init_support);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inv_d = 1.0 / data.len() as f64;
    let mut objective = Vec::new();
    let mut rounds = 0;
    while rounds < cfg.max_rounds {
        rounds += 1;
        for ((l, prior), h) in posterior.layers.iter_mut().zip(prior_msgs).zip(hypers) {
            l.gamma = update_q_rho(&l.gauss, &l.bern, h);
            l.bern = update_q_s(&l.gamma, prior, h);
            for n in 0..l.gauss.sigma.len() {
                l.gauss.sigma[n] = l.gamma.prior_variance(n).sqrt();
            }
        }

        let gammas: Vec<GammaPosterior> = posterior.layers.iter().map(|l| l.gamma.clone()).collect();
        for _ in 0..cfg.epochs_per_round {
            for batch in epoch_batches(data.len(), cfg.batch_size, &mut rng) {
                let gauss: Vec<GaussianPosterior> = posterior.layers.iter().map(|l| l.gauss.clone()).collect();
                let lg = loss_and_grad(&gauss, &gammas, &posterior.biases, net, data, &batch, model)?;
                if !lg.loss.is_finite() {
                    return Err(Error::Divergence(format!("non-finite surrogate loss in BCD round {rounds}")));
                }
                for (l, g) in posterior.layers.iter_mut().zip(&lg.grad_mu) {
                    l.gauss.mu.iter_mut().zip(g).for_each(|(m, d)| *m -= cfg.lr * inv_d * d);
                }
                for (b, g) in posterior.biases.iter_mut().zip(&lg.grad_bias) {
                    b.iter_mut().zip(g).for_each(|(v, d)| *v -= cfg.lr * inv_d * d);
                }
            }
        }

        let obj = surrogate_objective(&posterior, net, data, model)?;
        if !obj.is_finite() {
            return Err(Error::Divergence(format!("non-finite objective after BCD round {rounds}")));
        }
        let done = objective.last().is_some_and(|prev: &f64| ((obj - prev) / prev.abs().max(1e-300)).abs() < cfg.tol);
        objective.push(obj);
        if done {
            break;
        }
    }

    let extrinsic = posterior.layers.iter().zip(prior_msgs).map(|(l, p)| message_to_b(&l.bern, p)).collect();
    Ok(ModuleAOutput { posterior, extrinsic, rounds, objective })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Targets, Tensor};
    use rand::Rng;
    use tvbi_oracle::{central_gradient, integrate_split};

    fn gauss1(mu: f64, sigma: f64) -> GaussianPosterior {
        GaussianPosterior { mu: vec![mu], sigma: vec![sigma] }
    }

    #[test]
    fn q_rho_degenerate_cases() {
        let h = GammaHyper::new(2.0, 1.0, 1.0, 1e-3).unwrap();
        let g = update_q_rho(&gauss1(0.0, 0.0), &BernoulliPosterior { pi: vec![1.0] }, &h);
        assert_eq!((g.shape[0], g.rate[0]), (3.0, 1.0));

        let h = GammaHyper::new(1.0, 1.0, 1.0, 1e-3).unwrap();
        let g = update_q_rho(&gauss1(0.0, 1.0), &BernoulliPosterior { pi: vec![0.0] }, &h);
        assert_eq!(g.shape[0], 2.0);
        assert!((g.rate[0] - 1.001).abs() < 1e-15);
    }

    #[test]
    fn q_s_symmetry_and_certainty() {
        let h = GammaHyper::new(1.5, 0.7, 1.5, 0.7).unwrap();
        let gamma = GammaPosterior { shape: vec![2.0, 3.7, 1.2], rate: vec![0.1, 4.0, 9.0] };
        let b = update_q_s(&gamma, &PriorInput::uniform(3, 0.5), &h);
        assert!(b.pi.iter().all(|p| (p - 0.5).abs() < 1e-15));

        // π = 1 is clamped to 1 − ε, so 1 − π̃ ≤ ε·C₂/C₁ rather than exactly 0.
        let h = GammaHyper::default();
        let b = update_q_s(&gamma, &PriorInput::uniform(3, 1.0), &h);
        assert!(b.pi.iter().all(|p| (1.0 - p) < 1e-6), "{:?}", b.pi);
    }

    #[test]
    fn q_s_reference_value() {
        // ⟨ρ⟩ = 1, ⟨ln ρ⟩ = ψ(2) − ln 2, evaluated independently of statrs.
        let h = GammaHyper::new(2.0, 1.0, 1.0, 1e-3).unwrap();
        let gamma = GammaPosterior { shape: vec![2.0], rate: vec![2.0] };
        let b = update_q_s(&gamma, &PriorInput::uniform(1, 0.5), &h);
        let mean_ln = tvbi_oracle::digamma(2.0) - 2f64.ln();
        let c1 = 0.5 * 1.0 / 1.0 * ((2.0 - 1.0) * mean_ln - 1.0f64).exp();
        let c2 = 0.5 * 1e-3 * (0.0 * mean_ln - 1e-3f64).exp();
        let want = c1 / (c1 + c2);
        assert!((b.pi[0] - want).abs() < 1e-12);
        assert!((b.pi[0] - 0.9965).abs() < 1e-4);
    }

    #[test]
    fn q_s_log_domain_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let h = GammaHyper::new(
                rng.random_range(0.5..4.0),
                rng.random_range(0.2..3.0),
                rng.random_range(0.5..4.0),
                rng.random_range(0.01..3.0),
            )
            .unwrap();
            let gamma = GammaPosterior { shape: vec![rng.random_range(1.1..6.0)], rate: vec![rng.random_range(0.1..5.0)] };
            let p = rng.random_range(0.05..0.95);
            let (m, ml) = (gamma.mean(0), gamma.mean_ln(0));
            let naive = |prior: f64, a: f64, b: f64| {
                prior * b.powf(a) / statrs::function::gamma::gamma(a) * ((a - 1.0) * ml - b * m).exp()
            };
            let c1 = naive(p, h.a, h.b);
            let c2 = naive(1.0 - p, h.a_bar, h.b_bar);
            let got = update_q_s(&gamma, &PriorInput::uniform(1, p), &h).pi[0];
            assert!((got - c1 / (c1 + c2)).abs() < 1e-12);
        }
    }

    #[test]
    fn q_s_monotone_in_prior() {
        let h = GammaHyper::default();
        let gamma = GammaPosterior { shape: vec![2.0], rate: vec![0.3] };
        let mut last = -1.0;
        for k in 1..100 {
            let p = k as f64 / 100.0;
            let q = update_q_s(&gamma, &PriorInput::uniform(1, p), &h).pi[0];
            assert!(q >= last);
            assert!((0.0..=1.0).contains(&q));
            last = q;
        }
    }

    #[test]
    fn gaussian_kl_cases() {
        let gamma = GammaPosterior { shape: vec![2.0, 3.0], rate: vec![0.5, 12.0] };
        let sig: Vec<f64> = (0..2).map(|n| gamma.prior_variance(n).sqrt()).collect();
        let q = GaussianPosterior { mu: vec![0.0, 0.0], sigma: sig.clone() };
        assert!(gaussian_kl(&q, &gamma).abs() < 1e-15);

        let g1 = GammaPosterior { shape: vec![2.0], rate: vec![0.5] };
        let st = g1.prior_variance(0).sqrt();
        assert!((gaussian_kl(&gauss1(st, st), &g1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn gaussian_kl_matches_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let mu: f64 = rng.random_range(-2.0..2.0);
            let sigma: f64 = rng.random_range(0.05..1.5);
            let gamma = GammaPosterior { shape: vec![rng.random_range(1.1..5.0)], rate: vec![rng.random_range(0.01..4.0)] };
            let vp = gamma.prior_variance(0);
            let q = |w: f64| (-(w - mu).powi(2) / (2.0 * sigma * sigma)).exp() / (2.0 * std::f64::consts::PI * sigma * sigma).sqrt();
            let lnq = |w: f64| -(w - mu).powi(2) / (2.0 * sigma * sigma) - 0.5 * (2.0 * std::f64::consts::PI * sigma * sigma).ln();
            let lnp = |w: f64| -w * w / (2.0 * vp) - 0.5 * (2.0 * std::f64::consts::PI * vp).ln();
            let lo = mu - 40.0 * sigma;
            let hi = mu + 40.0 * sigma;
            let kl = integrate_split(|w| q(w) * (lnq(w) - lnp(w)), lo, hi, &[mu], 1e-13);
            assert!((kl - gaussian_kl(&gauss1(mu, sigma), &gamma)).abs() < 1e-6);
        }
    }

    #[test]
    fn taylor_surrogate() {
        let q = GaussianPosterior { mu: vec![1.0, -2.0, 0.5], sigma: vec![0.5, 0.1, 3.0] };
        let c = [0.3, 1.5, -2.0];
        let lin = |w: &[f64]| w.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>();
        assert_eq!(taylor_expectation(lin, &q), 0.3 - 3.0 - 1.0);
        assert_eq!(taylor_expectation(|_| 4.25, &q), 4.25);

        // E[(μ + ξσ²)²] = μ² + σ⁴ = 1.0625; the surrogate returns μ² = 1.
        let q = gauss1(1.0, 0.5);
        let sq = taylor_expectation(|w| w[0] * w[0], &q);
        assert_eq!(sq, 1.0);
        let exact = 1.0 + 0.5f64.powi(4);
        assert!((exact - sq - 0.0625).abs() < 1e-15);
    }

    #[test]
    fn extrinsic_message_cases() {
        let m = message_to_b(&BernoulliPosterior { pi: vec![0.7, 0.4, 0.9] }, &PriorInput::new(vec![0.5, 0.4, 0.75]));
        assert!((m[0].m1 - 0.7).abs() < 1e-15);
        assert!((m[1].m1 - 0.5).abs() < 1e-15);
        assert!((m[2].m1 - 0.75).abs() < 1e-12);
    }

    #[test]
    fn kl_gradients_closed_form() {
        let gamma = vec![GammaPosterior { shape: vec![2.5, 3.0], rate: vec![0.4, 2.0] }];
        let gauss = vec![GaussianPosterior { mu: vec![0.3, -1.2], sigma: vec![0.2, 0.8] }];
        let net = NetworkDef::regressor(&[2, 1]).unwrap();
        let data = Dataset::new(
            Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap(),
            Targets::Values(Tensor::new(vec![1, 1], vec![0.0]).unwrap()),
        )
        .unwrap();
        let lg =
            loss_and_grad(&gauss, &gamma, &[vec![0.0]], &net, &data, &[0], &LikelihoodModel::Regression { noise_var: 1.0 })
                .unwrap();
        for n in 0..2 {
            let vp = gamma[0].prior_variance(n);
            assert!((lg.grad_mu[0][n] - gauss[0].mu[n] / vp).abs() < 1e-12);
            let s = gauss[0].sigma[n];
            assert!((lg.grad_sigma[0][n] - (-1.0 / s + s / vp)).abs() < 1e-12);
        }
        let at_opt = GaussianPosterior { mu: vec![0.0], sigma: vec![gamma[0].prior_variance(0).sqrt()] };
        let g1 = GammaPosterior { shape: vec![2.5], rate: vec![0.4] };
        let s = at_opt.sigma[0];
        assert!((-1.0 / s + s / g1.prior_variance(0)).abs() < 1e-12);
    }

    fn tiny_regression(n: usize, seed: u64) -> (NetworkDef, Dataset) {
        let net = NetworkDef::regressor(&[2, 3, 1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = x.chunks(2).map(|p| 0.8 * p[0] - 0.3 * p[1] + 0.05 * rng.random_range(-1.0..1.0)).collect();
        let data = Dataset::new(Tensor::new(vec![n, 2], x).unwrap(), Targets::Values(Tensor::new(vec![n, 1], y).unwrap()))
            .unwrap();
        (net, data)
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        // 2·3 + 3·1 = 9 weights; the 50-weight case lives in the integration tests.
        let (net, data) = tiny_regression(12, 1);
        let w = Weights::init(&net, 2);
        let hypers = vec![GammaHyper::default(); 2];
        let mut post = VariationalPosterior::from_weights(&w, &hypers, 0.5).unwrap();
        for l in &mut post.layers {
            l.gauss.sigma.iter_mut().enumerate().for_each(|(i, s)| *s = 0.1 + 0.05 * i as f64);
        }
        let model = LikelihoodModel::Regression { noise_var: 0.2 };
        let gamma: Vec<_> = post.layers.iter().map(|l| l.gamma.clone()).collect();
        let gauss: Vec<_> = post.layers.iter().map(|l| l.gauss.clone()).collect();
        let batch = data.all_indices();
        let lg = loss_and_grad(&gauss, &gamma, &post.biases, &net, &data, &batch, &model).unwrap();

        let flat: Vec<f64> = gauss.iter().flat_map(|g| g.mu.iter().chain(&g.sigma).copied()).collect();
        let eval = |x: &[f64]| {
            let mut it = x.iter();
            let gs: Vec<GaussianPosterior> = gauss
                .iter()
                .map(|g| {
                    let mu = g.mu.iter().map(|_| *it.next().unwrap()).collect();
                    let sigma = g.sigma.iter().map(|_| *it.next().unwrap()).collect();
                    GaussianPosterior { mu, sigma }
                })
                .collect();
            loss_and_grad(&gs, &gamma, &post.biases, &net, &data, &batch, &model).unwrap().loss
        };
        let fd = central_gradient(eval, &flat, 1e-5);
        let analytic: Vec<f64> =
            lg.grad_mu.iter().zip(&lg.grad_sigma).flat_map(|(m, s)| m.iter().chain(s).copied()).collect();
        for (a, b) in analytic.iter().zip(&fd) {
            assert!((a - b).abs() / a.abs().max(b.abs()).max(1e-6) < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn symmetric_hypers_keep_half_support() {
        let (net, data) = tiny_regression(40, 3);
        let w = Weights::init(&net, 4);
        let h = GammaHyper::new(1.0, 0.5, 1.0, 0.5).unwrap();
        let hypers = vec![h; 2];
        let post = VariationalPosterior::from_weights(&w, &hypers, 0.0).unwrap();
        let priors: Vec<PriorInput> = net.layer_dims().iter().map(|(k, m)| PriorInput::uniform(k * m, 0.5)).collect();
        let cfg = ModuleAConfig { batch_size: 8, max_rounds: 4, tol: 1e-12, ..Default::default() };
        let out =
            run_module_a(&priors, &hypers, &net, post, &data, &LikelihoodModel::Regression { noise_var: 0.1 }, &cfg, 9)
                .unwrap();
        for l in &out.posterior.layers {
            assert!(l.bern.pi.iter().all(|p| (p - 0.5).abs() < 1e-12));
        }
        for e in out.extrinsic.iter().flatten() {
            assert!((e.m1 - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn module_a_is_deterministic() {
        let (net, data) = tiny_regression(30, 5);
        let w = Weights::init(&net, 6);
        let hypers = vec![GammaHyper::default(); 2];
        let priors: Vec<PriorInput> = net.layer_dims().iter().map(|(k, m)| PriorInput::uniform(k * m, 0.3)).collect();
        let cfg = ModuleAConfig { batch_size: 7, max_rounds: 1, ..Default::default() };
        let model = LikelihoodModel::Regression { noise_var: 0.1 };
        let run = || {
            let post = VariationalPosterior::from_weights(&w, &hypers, 0.0).unwrap();
            run_module_a(&priors, &hypers, &net, post, &data, &model, &cfg, 11).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.posterior, b.posterior);
        assert_eq!(a.objective, b.objective);
    }

    #[test]
    fn posterior_invariants_after_updates() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let h = GammaHyper::new(
                rng.random_range(0.1..3.0),
                rng.random_range(0.1..3.0),
                rng.random_range(0.1..3.0),
                rng.random_range(1e-4..3.0),
            )
            .unwrap();
            let q = gauss1(rng.random_range(-3.0..3.0), rng.random_range(1e-3..2.0));
            let b = BernoulliPosterior { pi: vec![rng.random_range(0.0..=1.0)] };
            let g = update_q_rho(&q, &b, &h);
            assert!(g.shape[0] > 1.0 && g.rate[0] > 0.0);
            let s = update_q_s(&g, &PriorInput::uniform(1, rng.random_range(0.0..1.0)), &h);
            assert!((0.0..=1.0).contains(&s.pi[0]));
        }
    }

    #[test]
    fn module_a_rejects_mismatched_inputs() {
        let (net, data) = tiny_regression(10, 1);
        let w = Weights::init(&net, 1);
        let hypers = vec![GammaHyper::default(); 2];
        let post = VariationalPosterior::from_weights(&w, &hypers, 0.0).unwrap();
        let priors = vec![PriorInput::uniform(6, 0.5)];
        let err = run_module_a(
            &priors,
            &hypers,
            &net,
            post,
            &data,
            &LikelihoodModel::Regression { noise_var: 1.0 },
            &ModuleAConfig::default(),
            0,
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
