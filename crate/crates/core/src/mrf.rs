//! Sum-product message passing over the support factor graph of one layer.
//!
//! Every site of the `K × M` support grid has a unary factor carrying the
//! extrinsic belief of the variational estimator, and neighbouring sites are
//! joined by the row/column transition factors of the MRF prior. The output
//! is the extrinsic message from the prior side to every site, i.e. the
//! product of the incoming pairwise messages with the unary factor excluded.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::prior::MrfParams;

/// Lower clamp applied to every normalized message entry.
pub const MSG_FLOOR: f64 = 1e-12;

/// A normalized distribution over `{0, 1}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BernoulliMessage {
    pub m0: f64,
    pub m1: f64,
}

impl Default for BernoulliMessage {
    fn default() -> Self {
        Self::uniform()
    }
}

impl BernoulliMessage {
    pub const fn uniform() -> Self {
        Self { m0: 0.5, m1: 0.5 }
    }

    /// Normalizes `(m0, m1)` and clamps both entries at [`MSG_FLOOR`].
    /// A degenerate pair (both zero or non-finite) becomes uniform.
    pub fn new(m0: f64, m1: f64) -> Self {
        let z = m0 + m1;
        if !(z.is_finite() && z > 0.0) || m0 < 0.0 || m1 < 0.0 {
            return Self::uniform();
        }
        Self::from_prob(m1 / z)
    }

    /// Message with `P(s = 1) = p1`, clamped into `[ε, 1-ε]`.
    pub fn from_prob(p1: f64) -> Self {
        let p1 = if p1.is_nan() { 0.5 } else { p1.clamp(MSG_FLOOR, 1.0 - MSG_FLOOR) };
        Self { m0: (1.0 - p1).max(MSG_FLOOR), m1: p1 }
    }

    pub fn p1(&self) -> f64 {
        self.m1
    }

    fn get(&self, s: usize) -> f64 {
        if s == 0 {
            self.m0
        } else {
            self.m1
        }
    }
}

/// Settings for one message-passing run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpmpConfig {
    pub max_iters: usize,
    /// Weight of the previous message in the damped update, in `[0, 1)`.
    pub damping: f64,
    pub tol: f64,
}

impl Default for SpmpConfig {
    fn default() -> Self {
        Self { max_iters: 50, damping: 0.3, tol: 1e-6 }
    }
}

/// Support factor graph of one `rows × cols` layer with its message store.
///
/// Factor-to-variable messages are stored per site and direction: the
/// message arriving at site `(i, j)` from the row factor it shares with
/// `(i, j-1)` lives in `from_left[i*cols + j]`, and so on.
#[derive(Debug, Clone)]
pub struct SupportGraph {
    rows: usize,
    cols: usize,
    row_pot: [[f64; 2]; 2],
    col_pot: [[f64; 2]; 2],
    unary: Vec<BernoulliMessage>,
    from_left: Vec<BernoulliMessage>,
    from_right: Vec<BernoulliMessage>,
    from_up: Vec<BernoulliMessage>,
    from_down: Vec<BernoulliMessage>,
}

/// Output of [`spmp_run`].
#[derive(Debug, Clone)]
pub struct SpmpResult {
    /// Prior-side extrinsic message per site, unary excluded.
    pub extrinsic: Vec<BernoulliMessage>,
    /// Extrinsic times unary, normalized.
    pub marginals: Vec<BernoulliMessage>,
    pub iterations: usize,
    pub converged: bool,
    /// Largest message change in the last iteration.
    pub last_delta: f64,
}

/// Builds the graph with every pairwise message set to `(0.5, 0.5)`.
pub fn build_graph(dims: (usize, usize), params: &MrfParams, unary: &[BernoulliMessage]) -> Result<SupportGraph> {
    let (rows, cols) = dims;
    if rows == 0 || cols == 0 {
        return domain(format!("support graph needs positive dims, got {rows}x{cols}"));
    }
    if unary.len() != rows * cols {
        return Err(crate::Error::Config(format!(
            "unary grid has {} entries, expected {}x{}",
            unary.len(),
            rows,
            cols
        )));
    }
    params.validate()?;
    let n = rows * cols;
    Ok(SupportGraph {
        rows,
        cols,
        row_pot: params.row_potential(),
        col_pot: params.col_potential(),
        unary: unary.iter().map(|u| BernoulliMessage::new(u.m0, u.m1)).collect(),
        from_left: vec![BernoulliMessage::uniform(); n],
        from_right: vec![BernoulliMessage::uniform(); n],
        from_up: vec![BernoulliMessage::uniform(); n],
        from_down: vec![BernoulliMessage::uniform(); n],
    })
}

impl SupportGraph {
    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn site_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn row_edge_count(&self) -> usize {
        self.rows * (self.cols - 1)
    }

    pub fn col_edge_count(&self) -> usize {
        (self.rows - 1) * self.cols
    }

    pub fn edge_count(&self) -> usize {
        self.row_edge_count() + self.col_edge_count()
    }

    pub fn unary(&self) -> &[BernoulliMessage] {
        &self.unary
    }

    /// Replaces the unary factors, keeping the pairwise messages as a warm
    /// start for the next run.
    pub fn set_unary(&mut self, unary: &[BernoulliMessage]) -> Result<()> {
        if unary.len() != self.site_count() {
            return Err(crate::Error::Config(format!(
                "unary grid has {} entries, expected {}",
                unary.len(),
                self.site_count()
            )));
        }
        self.unary = unary.to_vec();
        Ok(())
    }

    /// Every stored pairwise factor-to-variable message.
    pub fn messages(&self) -> impl Iterator<Item = &BernoulliMessage> + '_ {
        let cols = self.cols;
        let rows = self.rows;
        (0..rows * cols).flat_map(move |n| {
            let (i, j) = (n / cols, n % cols);
            let mut v = Vec::with_capacity(4);
            if j > 0 {
                v.push(&self.from_left[n]);
            }
            if j + 1 < cols {
                v.push(&self.from_right[n]);
            }
            if i > 0 {
                v.push(&self.from_up[n]);
            }
            if i + 1 < rows {
                v.push(&self.from_down[n]);
            }
            v
        })
    }

    /// Product of the incoming messages at `n` with the pairwise factor in
    /// direction `skip` left out (`None` keeps all four). The unary factor
    /// is included only when `with_unary`.
    fn product(&self, n: usize, skip: Option<Dir>, with_unary: bool) -> [f64; 2] {
        let (i, j) = (n / self.cols, n % self.cols);
        let mut p = if with_unary { [self.unary[n].m0, self.unary[n].m1] } else { [1.0, 1.0] };
        let mut mul = |m: &BernoulliMessage| {
            p[0] *= m.m0;
            p[1] *= m.m1;
        };
        if j > 0 && skip != Some(Dir::Left) {
            mul(&self.from_left[n]);
        }
        if j + 1 < self.cols && skip != Some(Dir::Right) {
            mul(&self.from_right[n]);
        }
        if i > 0 && skip != Some(Dir::Up) {
            mul(&self.from_up[n]);
        }
        if i + 1 < self.rows && skip != Some(Dir::Down) {
            mul(&self.from_down[n]);
        }
        p
    }

    fn extrinsic(&self) -> Vec<BernoulliMessage> {
        (0..self.site_count())
            .map(|n| {
                let p = self.product(n, None, false);
                BernoulliMessage::new(p[0], p[1])
            })
            .collect()
    }

    /// One synchronous flooding iteration. Returns the largest absolute
    /// change of any stored message.
    fn flood(&mut self, damping: f64) -> f64 {
        let (rows, cols) = (self.rows, self.cols);
        let n_sites = rows * cols;
        let mut new_left = self.from_left.clone();
        let mut new_right = self.from_right.clone();
        let mut new_up = self.from_up.clone();
        let mut new_down = self.from_down.clone();

        // Variable-to-factor messages are formed from the previous
        // snapshot; the factor then marginalizes out the sending variable.
        let pass = |pot: &[[f64; 2]; 2], v: [f64; 2], sender_first: bool| -> BernoulliMessage {
            let v = BernoulliMessage::new(v[0], v[1]);
            let mut out = [0.0; 2];
            for (r, o) in out.iter_mut().enumerate() {
                for t in 0..2 {
                    let f = if sender_first { pot[t][r] } else { pot[r][t] };
                    *o += f * v.get(t);
                }
            }
            BernoulliMessage::new(out[0], out[1])
        };
        let damp = |new: BernoulliMessage, old: &BernoulliMessage| -> BernoulliMessage {
            if damping == 0.0 {
                new
            } else {
                BernoulliMessage::new(
                    (1.0 - damping) * new.m0 + damping * old.m0,
                    (1.0 - damping) * new.m1 + damping * old.m1,
                )
            }
        };

        for n in 0..n_sites {
            let (i, j) = (n / cols, n % cols);
            if j + 1 < cols {
                // (i,j) sends right through f_row(s_ij, s_i,j+1).
                let msg = pass(&self.row_pot, self.product(n, Some(Dir::Right), true), true);
                new_left[n + 1] = damp(msg, &self.from_left[n + 1]);
            }
            if j > 0 {
                let msg = pass(&self.row_pot, self.product(n, Some(Dir::Left), true), false);
                new_right[n - 1] = damp(msg, &self.from_right[n - 1]);
            }
            if i + 1 < rows {
                let msg = pass(&self.col_pot, self.product(n, Some(Dir::Down), true), true);
                new_up[n + cols] = damp(msg, &self.from_up[n + cols]);
            }
            if i > 0 {
                let msg = pass(&self.col_pot, self.product(n, Some(Dir::Up), true), false);
                new_down[n - cols] = damp(msg, &self.from_down[n - cols]);
            }
        }

        let delta = |a: &[BernoulliMessage], b: &[BernoulliMessage]| {
            a.iter().zip(b).map(|(x, y)| (x.m1 - y.m1).abs()).fold(0.0, f64::max)
        };
        let d = delta(&new_left, &self.from_left)
            .max(delta(&new_right, &self.from_right))
            .max(delta(&new_up, &self.from_up))
            .max(delta(&new_down, &self.from_down));
        self.from_left = new_left;
        self.from_right = new_right;
        self.from_up = new_up;
        self.from_down = new_down;
        d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dir {
    Left,
    Right,
    Up,
    Down,
}

/// Runs flooding-schedule sum-product until the largest message change
/// drops below `cfg.tol` or `cfg.max_iters` iterations have run.
pub fn spmp_run(graph: &mut SupportGraph, cfg: &SpmpConfig) -> Result<SpmpResult> {
    if cfg.max_iters == 0 {
        return domain("spmp needs max_iters >= 1");
    }
    if !(0.0..1.0).contains(&cfg.damping) {
        return domain(format!("damping must lie in [0,1), got {}", cfg.damping));
    }
    let mut iterations = 0;
    let mut last_delta = 0.0;
    let mut converged = graph.edge_count() == 0;
    if !converged {
        while iterations < cfg.max_iters {
            last_delta = graph.flood(cfg.damping);
            iterations += 1;
            if last_delta < cfg.tol {
                converged = true;
                break;
            }
        }
    }
    let extrinsic = graph.extrinsic();
    let marginals = extrinsic
        .iter()
        .zip(&graph.unary)
        .map(|(e, u)| BernoulliMessage::new(e.m0 * u.m0, e.m1 * u.m1))
        .collect();
    Ok(SpmpResult { extrinsic, marginals, iterations, converged, last_delta })
}
