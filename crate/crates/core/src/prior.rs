//! Three-layer hierarchical sparse prior: an Ising-type support field on
//! each weight matrix, a support-dependent Gamma prior on the precisions and
//! a zero-mean Gaussian prior on the weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{config, domain, Result};

/// Gamma hyperparameters for the active (`a`, `b`) and inactive
/// (`a_bar`, `b_bar`) precision priors. Rates, not scales.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaHyper {
    pub a: f64,
    pub b: f64,
    pub a_bar: f64,
    pub b_bar: f64,
}

impl Default for GammaHyper {
    fn default() -> Self {
        Self { a: 1.0, b: 1.0, a_bar: 1.0, b_bar: 1e-3 }
    }
}

impl GammaHyper {
    pub fn new(a: f64, b: f64, a_bar: f64, b_bar: f64) -> Result<Self> {
        let h = Self { a, b, a_bar, b_bar };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("a", self.a), ("b", self.b), ("a_bar", self.a_bar), ("b_bar", self.b_bar)] {
            if !(v.is_finite() && v > 0.0) {
                return config(format!("gamma hyperparameter {name} must be positive, got {v}"));
            }
        }
        Ok(())
    }

    /// `(shape, rate)` of the precision prior for support state `s`.
    pub fn for_state(&self, active: bool) -> (f64, f64) {
        if active {
            (self.a, self.b)
        } else {
            (self.a_bar, self.b_bar)
        }
    }
}

/// Transition probabilities of the row and column Markov chains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MrfParams {
    pub p01_row: f64,
    pub p10_row: f64,
    pub p01_col: f64,
    pub p10_col: f64,
}

impl Default for MrfParams {
    fn default() -> Self {
        Self { p01_row: 0.05, p10_row: 0.15, p01_col: 0.05, p10_col: 0.15 }
    }
}

impl MrfParams {
    pub fn new(p01_row: f64, p10_row: f64, p01_col: f64, p10_col: f64) -> Result<Self> {
        let p = Self { p01_row, p10_row, p01_col, p10_col };
        p.validate()?;
        Ok(p)
    }

    /// Same transition probabilities along rows and columns.
    pub fn isotropic(p01: f64, p10: f64) -> Result<Self> {
        Self::new(p01, p10, p01, p10)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("p01_row", self.p01_row),
            ("p10_row", self.p10_row),
            ("p01_col", self.p01_col),
            ("p10_col", self.p10_col),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return config(format!("transition probability {name} must lie in (0,1), got {v}"));
            }
        }
        Ok(())
    }

    /// Pairwise row potential `f(s, t) = p(t | s)` indexed `[s][t]`, where
    /// `s` is the left neighbour and `t` the right one.
    pub fn row_potential(&self) -> [[f64; 2]; 2] {
        transition_matrix(self.p01_row, self.p10_row)
    }

    /// Pairwise column potential indexed `[upper][lower]`.
    pub fn col_potential(&self) -> [[f64; 2]; 2] {
        transition_matrix(self.p01_col, self.p10_col)
    }

    /// Stationary probability of an active entry along a row.
    pub fn stationary_row(&self) -> f64 {
        self.p01_row / (self.p01_row + self.p10_row)
    }
}

fn transition_matrix(p01: f64, p10: f64) -> [[f64; 2]; 2] {
    [[1.0 - p01, p01], [p10, 1.0 - p10]]
}

/// Prior of one prunable `rows × cols` weight matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerPrior {
    pub rows: usize,
    pub cols: usize,
    pub gamma: GammaHyper,
    pub mrf: MrfParams,
}

/// `p(w, ρ, s) = p(s) p(ρ|s) p(w|ρ)` over every prunable layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalPrior {
    pub layers: Vec<LayerPrior>,
}

impl HierarchicalPrior {
    /// One shared `(GammaHyper, MrfParams)` pair for every layer.
    pub fn shared(dims: &[(usize, usize)], gamma: GammaHyper, mrf: MrfParams) -> Result<Self> {
        Self::per_layer(dims, &vec![gamma; dims.len()], &vec![mrf; dims.len()])
    }

    pub fn per_layer(dims: &[(usize, usize)], gamma: &[GammaHyper], mrf: &[MrfParams]) -> Result<Self> {
        if gamma.len() != dims.len() || mrf.len() != dims.len() {
            return config(format!(
                "prior needs one entry per layer: {} layers, {} gamma, {} mrf",
                dims.len(),
                gamma.len(),
                mrf.len()
            ));
        }
        let mut layers = Vec::with_capacity(dims.len());
        for ((&(rows, cols), g), m) in dims.iter().zip(gamma).zip(mrf) {
            g.validate()?;
            m.validate()?;
            if rows == 0 || cols == 0 {
                return config("layer dimensions must be positive");
            }
            layers.push(LayerPrior { rows, cols, gamma: *g, mrf: *m });
        }
        Ok(Self { layers })
    }

    pub fn dims(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.rows, l.cols)).collect()
    }

    pub fn gamma(&self) -> Vec<GammaHyper> {
        self.layers.iter().map(|l| l.gamma).collect()
    }

    /// Fails unless the layer dimensions equal `dims`.
    pub fn check_dims(&self, dims: &[(usize, usize)]) -> Result<()> {
        if self.dims() != dims {
            return config(format!("prior dims {:?} do not match network dims {:?}", self.dims(), dims));
        }
        Ok(())
    }
}

/// Binary support matrix, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SupportMatrix {
    rows: usize,
    cols: usize,
    values: Vec<u8>,
}

impl SupportMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, values: vec![0; rows * cols] }
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self { rows, cols, values: vec![1; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != rows * cols {
            return domain(format!("support of {rows}x{cols} needs {} entries, got {}", rows * cols, values.len()));
        }
        if values.iter().any(|&v| v > 1) {
            return domain("support entries must be 0 or 1");
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut values = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                values.push(f(i, j) as u8);
            }
        }
        Self { rows, cols, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.values[i * self.cols + j] == 1
    }

    pub fn set(&mut self, i: usize, j: usize, on: bool) {
        self.values[i * self.cols + j] = on as u8;
    }

    pub fn count_ones(&self) -> usize {
        self.values.iter().map(|&v| v as usize).sum()
    }

    pub fn density(&self) -> f64 {
        if self.values.is_empty() {
            0.0
        } else {
            self.count_ones() as f64 / self.values.len() as f64
        }
    }

    /// Lengths of every maximal run of ones along the rows.
    pub fn row_run_lengths(&self) -> Vec<usize> {
        let mut runs = Vec::new();
        for row in self.values.chunks(self.cols.max(1)) {
            let mut len = 0;
            for &v in row {
                if v == 1 {
                    len += 1;
                } else if len > 0 {
                    runs.push(len);
                    len = 0;
                }
            }
            if len > 0 {
                runs.push(len);
            }
        }
        runs
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if !(rho > 0.0) || !rho.is_finite() {
        return domain(format!("precision must be positive and finite, got {rho}"));
    }
    Ok(())
}

/// `ln Γ(ρ; shape, rate)`.
pub fn ln_gamma_pdf(rho: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * rho.ln() - rate * rho
}

/// Density of the precision given the support state.
pub fn gamma_density(rho: f64, active: bool, h: &GammaHyper) -> Result<f64> {
    check_rho(rho)?;
    let (shape, rate) = h.for_state(active);
    Ok(ln_gamma_pdf(rho, shape, rate).exp())
}

/// `N(w | 0, 1/ρ)`.
pub fn weight_density(w: f64, rho: f64) -> Result<f64> {
    check_rho(rho)?;
    Ok((rho / (2.0 * std::f64::consts::PI)).sqrt() * (-0.5 * rho * w * w).exp())
}

/// Raster-scan Gibbs sampler over the support MRF.
///
/// The unnormalized joint is the product of all row-chain and column-chain
/// transition factors; there are no unary factors.
pub struct GibbsSampler {
    row_pot: [[f64; 2]; 2],
    col_pot: [[f64; 2]; 2],
    state: SupportMatrix,
    rng: ChaCha8Rng,
}

impl GibbsSampler {
    /// Starts from an i.i.d. Bernoulli(1/2) configuration drawn from `seed`.
    pub fn new(params: &MrfParams, dims: (usize, usize), seed: u64) -> Result<Self> {
        params.validate()?;
        let (rows, cols) = dims;
        if rows == 0 || cols == 0 {
            return domain(format!("support dims must have positive area, got {rows}x{cols}"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = SupportMatrix::from_fn(rows, cols, |_, _| rng.random_bool(0.5));
        Ok(Self { row_pot: params.row_potential(), col_pot: params.col_potential(), state, rng })
    }

    fn conditional_one(&self, i: usize, j: usize) -> f64 {
        let s = &self.state;
        let mut w = [1.0f64; 2];
        for (v, wv) in w.iter_mut().enumerate() {
            if j > 0 {
                *wv *= self.row_pot[s.get(i, j - 1) as usize][v];
            }
            if j + 1 < s.cols {
                *wv *= self.row_pot[v][s.get(i, j + 1) as usize];
            }
            if i > 0 {
                *wv *= self.col_pot[s.get(i - 1, j) as usize][v];
            }
            if i + 1 < s.rows {
                *wv *= self.col_pot[v][s.get(i + 1, j) as usize];
            }
        }
        w[1] / (w[0] + w[1])
    }

    /// One full raster-scan sweep over every site.
    pub fn sweep(&mut self) {
        for i in 0..self.state.rows {
            for j in 0..self.state.cols {
                let p1 = self.conditional_one(i, j);
                let on = self.rng.random::<f64>() < p1;
                self.state.set(i, j, on);
            }
        }
    }

    pub fn state(&self) -> &SupportMatrix {
        &self.state
    }

    pub fn into_state(self) -> SupportMatrix {
        self.state
    }
}

/// Final state of `sweeps` Gibbs sweeps from a seeded random start.
pub fn sample_support(params: &MrfParams, dims: (usize, usize), seed: u64, sweeps: usize) -> Result<SupportMatrix> {
    if sweeps == 0 {
        return domain("sample_support needs at least one sweep");
    }
    let mut sampler = GibbsSampler::new(params, dims, seed)?;
    for _ in 0..sweeps {
        sampler.sweep();
    }
    Ok(sampler.into_state())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tvbi_oracle::{integrate_split, ising_state_probs};

    #[test]
    fn gamma_density_values() {
        let h = GammaHyper::new(1.0, 1.0, 1.0, 1e-3).unwrap();
        assert!((gamma_density(1.0, true, &h).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
        let inactive = gamma_density(1.0, false, &h).unwrap();
        assert!((inactive - 1e-3 * (-1e-3f64).exp()).abs() < 1e-15);
        assert!((inactive - 0.000999).abs() < 1e-6);
    }

    #[test]
    fn densities_reject_nonpositive_precision() {
        let h = GammaHyper::default();
        assert!(gamma_density(0.0, true, &h).is_err());
        assert!(gamma_density(-1.0, false, &h).is_err());
        assert!(weight_density(0.3, 0.0).is_err());
        assert!(weight_density(0.3, -2.0).is_err());
    }

    #[test]
    fn weight_density_values() {
        let inv_sqrt_2pi = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        assert!((weight_density(0.0, 1.0).unwrap() - inv_sqrt_2pi).abs() < 1e-15);
        assert!((weight_density(0.0, 4.0).unwrap() - 2.0 * inv_sqrt_2pi).abs() < 1e-15);
        assert!((weight_density(0.0, 1.0).unwrap() - 0.398942).abs() < 1e-6);
    }

    #[test]
    fn densities_integrate_to_one() {
        let h = GammaHyper::new(2.0, 1.0, 1.0, 1e-3).unwrap();
        let mass = integrate_split(|r| gamma_density(r, true, &h).unwrap(), 1e-300, 200.0, &[1.0, 10.0], 1e-12);
        assert!((mass - 1.0).abs() < 1e-6, "gamma mass {mass}");

        let mass = integrate_split(|w| weight_density(w, 2.0).unwrap(), -50.0, 50.0, &[0.0], 1e-12);
        assert!((mass - 1.0).abs() < 1e-6, "gaussian mass {mass}");

        // Inactive precision prior with a long tail: rate 1e-3 has mean 1000.
        let h = GammaHyper::new(1.0, 1.0, 2.0, 0.05).unwrap();
        let mass = integrate_split(|r| gamma_density(r, false, &h).unwrap(), 1e-300, 1500.0, &[40.0, 200.0], 1e-12);
        assert!((mass - 1.0).abs() < 1e-6, "inactive mass {mass}");
    }

    #[test]
    fn invalid_hypers_rejected() {
        assert!(GammaHyper::new(0.0, 1.0, 1.0, 1.0).is_err());
        assert!(MrfParams::new(0.0, 0.5, 0.5, 0.5).is_err());
        assert!(MrfParams::new(0.5, 1.0, 0.5, 0.5).is_err());
    }

    #[test]
    fn sampler_rejects_bad_arguments() {
        let p = MrfParams::isotropic(0.5, 0.5).unwrap();
        assert!(sample_support(&p, (0, 4), 1, 3).is_err());
        assert!(sample_support(&p, (4, 4), 1, 0).is_err());
    }

    #[test]
    fn sampler_is_reproducible() {
        let p = MrfParams::isotropic(0.1, 0.3).unwrap();
        let a = sample_support(&p, (12, 9), 77, 20).unwrap();
        let b = sample_support(&p, (12, 9), 77, 20).unwrap();
        let c = sample_support(&p, (12, 9), 78, 20).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn symmetric_chain_is_iid_half() {
        let p = MrfParams::isotropic(0.5, 0.5).unwrap();
        let s = sample_support(&p, (1, 100_000), 5, 1).unwrap();
        assert!((s.density() - 0.5).abs() < 0.01, "density {}", s.density());
    }

    #[test]
    fn chain_run_length_and_transitions() {
        let p = MrfParams::new(0.1, 0.1, 0.5, 0.5).unwrap();
        let n = 100_000;
        let s = sample_support(&p, (1, n), 11, 400).unwrap();
        let runs = s.row_run_lengths();
        let mean_run = runs.iter().sum::<usize>() as f64 / runs.len() as f64;
        assert!((mean_run - 10.0).abs() < 0.5, "mean run {mean_run}");

        let (mut n0, mut n01, mut n1, mut n10) = (0usize, 0usize, 0usize, 0usize);
        for w in s.as_slice().windows(2) {
            if w[0] == 0 {
                n0 += 1;
                n01 += w[1] as usize;
            } else {
                n1 += 1;
                n10 += (w[1] == 0) as usize;
            }
        }
        assert!((n01 as f64 / n0 as f64 - 0.1).abs() < 0.01);
        assert!((n10 as f64 / n1 as f64 - 0.1).abs() < 0.01);
    }

    #[test]
    fn asymmetric_chain_transitions() {
        let p = MrfParams::new(0.2, 0.4, 0.5, 0.5).unwrap();
        let s = sample_support(&p, (1, 100_001), 3, 200).unwrap();
        let (mut n0, mut n01, mut n1, mut n10) = (0usize, 0usize, 0usize, 0usize);
        for w in s.as_slice().windows(2) {
            if w[0] == 0 {
                n0 += 1;
                n01 += w[1] as usize;
            } else {
                n1 += 1;
                n10 += (w[1] == 0) as usize;
            }
        }
        assert!((n01 as f64 / n0 as f64 - 0.2).abs() < 0.01);
        assert!((n10 as f64 / n1 as f64 - 0.4).abs() < 0.01);
        assert!((s.density() - p.stationary_row()).abs() < 0.01);
    }

    #[test]
    fn gibbs_matches_exhaustive_boltzmann_on_3x3() {
        let p = MrfParams::new(0.3, 0.2, 0.15, 0.35).unwrap();
        let exact = ising_state_probs(3, 3, &[[1.0, 1.0]; 9], p.row_potential(), p.col_potential());

        let sweeps = 1_000_000;
        let mut sampler = GibbsSampler::new(&p, (3, 3), 2024).unwrap();
        let mut counts = vec![0usize; 512];
        for t in 0..sweeps {
            sampler.sweep();
            if t >= sweeps / 2 {
                let idx = sampler
                    .state()
                    .as_slice()
                    .iter()
                    .enumerate()
                    .fold(0usize, |acc, (k, &v)| acc | ((v as usize) << k));
                counts[idx] += 1;
            }
        }
        let total = (sweeps - sweeps / 2) as f64;
        let tv: f64 = 0.5 * exact.iter().zip(&counts).map(|(e, &c)| (e - c as f64 / total).abs()).sum::<f64>();
        assert!(tv < 0.02, "total variation {tv}");
    }

    #[test]
    fn run_lengths() {
        let s = SupportMatrix::from_vec(2, 5, vec![1, 1, 0, 1, 0, 0, 1, 1, 1, 1]).unwrap();
        assert_eq!(s.row_run_lengths(), vec![2, 1, 4]);
        assert_eq!(s.count_ones(), 7);
    }
}
