//! Reference computations for tests.
//!
//! Everything here is written independently of the `tvbi` implementation:
//! numerical quadrature, exhaustive enumeration of small binary grids,
//! central finite differences and a straight-line MLP. None of it is tuned
//! for speed.

/// Compensated (Neumaier) summation.
pub fn neumaier_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

// 15-point Kronrod nodes/weights with the embedded 7-point Gauss rule.
const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.000_000_000_000_000_000_000_000_000_000_000,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let dx = half * XGK[j];
        let s = f(center - dx) + f(center + dx);
        kronrod += WGK[j] * s;
        if j % 2 == 1 {
            gauss += WG[j / 2] * s;
        }
    }
    (kronrod * half, ((kronrod - gauss) * half).abs())
}

fn adaptive<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    let (est, err) = gk15(f, a, b);
    if err <= tol || depth == 0 || (b - a).abs() < 1e-300 {
        return est;
    }
    let mid = 0.5 * (a + b);
    adaptive(f, a, mid, 0.5 * tol, depth - 1) + adaptive(f, mid, b, 0.5 * tol, depth - 1)
}

/// Adaptive Gauss–Kronrod (7/15) quadrature of `f` over `[a, b]`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    adaptive(&f, a, b, tol, 48)
}

/// Integral over `[a, b]` after splitting at the supplied interior points,
/// useful when the integrand is sharply peaked somewhere known.
pub fn integrate_split<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, cuts: &[f64], tol: f64) -> f64 {
    let mut pts = vec![a];
    let mut inner: Vec<f64> = cuts.iter().copied().filter(|c| *c > a && *c < b).collect();
    inner.sort_by(|x, y| x.partial_cmp(y).unwrap());
    pts.extend(inner);
    pts.push(b);
    let n = (pts.len() - 1) as f64;
    neumaier_sum(pts.windows(2).map(|w| integrate(&f, w[0], w[1], tol / n)))
}

/// Exact marginals of a binary grid MRF by enumerating all 2^(K·M) states.
///
/// The unnormalized weight of a state is the product of
/// `unary[site][s_site]`, `row_pot[s(i,j)][s(i,j+1)]` and
/// `col_pot[s(i,j)][s(i+1,j)]`. Returns `P(s_site = 1)` per site (row-major).
pub fn ising_marginals(
    rows: usize,
    cols: usize,
    unary: &[[f64; 2]],
    row_pot: [[f64; 2]; 2],
    col_pot: [[f64; 2]; 2],
) -> Vec<f64> {
    let probs = ising_state_probs(rows, cols, unary, row_pot, col_pot);
    let n = rows * cols;
    let mut marg = vec![0.0; n];
    for (state, p) in probs.iter().enumerate() {
        for (site, m) in marg.iter_mut().enumerate() {
            if state >> site & 1 == 1 {
                *m += p;
            }
        }
    }
    marg
}

/// Normalized probability of every state of the grid; bit `site` of the
/// state index is the value of site `site` (row-major).
pub fn ising_state_probs(
    rows: usize,
    cols: usize,
    unary: &[[f64; 2]],
    row_pot: [[f64; 2]; 2],
    col_pot: [[f64; 2]; 2],
) -> Vec<f64> {
    let n = rows * cols;
    assert!(n <= 20, "enumeration limited to 20 sites");
    assert_eq!(unary.len(), n);
    let bit = |state: usize, i: usize, j: usize| (state >> (i * cols + j)) & 1;
    let mut weights = Vec::with_capacity(1 << n);
    for state in 0..(1usize << n) {
        let mut w = 1.0;
        for i in 0..rows {
            for j in 0..cols {
                let s = bit(state, i, j);
                w *= unary[i * cols + j][s];
                if j + 1 < cols {
                    w *= row_pot[s][bit(state, i, j + 1)];
                }
                if i + 1 < rows {
                    w *= col_pot[s][bit(state, i + 1, j)];
                }
            }
        }
        weights.push(w);
    }
    let z = neumaier_sum(weights.iter().copied());
    weights.iter().map(|w| w / z).collect()
}

/// Central finite-difference gradient with step `h`.
pub fn central_gradient<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Straight-line `a (r×k) · b (k×c)`, row-major.
pub fn naive_matmul(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            let mut acc = 0.0;
            for t in 0..k {
                acc += a[i * k + t] * b[t * c + j];
            }
            out[i * c + j] = acc;
        }
    }
    out
}

/// One dense layer: `weights` is `fan_in × fan_out` row-major.
pub struct RefLayer {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Reference MLP forward pass: ReLU between layers, identity at the output.
pub fn mlp_forward(layers: &[RefLayer], x: &[f64]) -> Vec<f64> {
    let mut act = x.to_vec();
    for (li, layer) in layers.iter().enumerate() {
        let mut next = naive_matmul(&act, &layer.weights, 1, layer.fan_in, layer.fan_out);
        for (v, b) in next.iter_mut().zip(&layer.bias) {
            *v += b;
        }
        if li + 1 < layers.len() {
            for v in next.iter_mut() {
                *v = v.max(0.0);
            }
        }
        act = next;
    }
    act
}

/// Per-example cross entropy `-ln softmax(logits)[label]`, evaluated with the
/// max-shift and compensated summation.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z = neumaier_sum(logits.iter().map(|l| (l - m).exp()));
    -(logits[label] - m - z.ln())
}

/// Per-example Gaussian negative log density `-ln N(y | pred, var·I)`.
pub fn gaussian_nll(pred: &[f64], target: &[f64], var: f64) -> f64 {
    let d = pred.len() as f64;
    let sq = neumaier_sum(pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)));
    sq / (2.0 * var) + 0.5 * d * (2.0 * std::f64::consts::PI * var).ln()
}

/// Digamma by upward recurrence plus the asymptotic series; independent of
/// any library implementation.
pub fn digamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 12.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    acc + x.ln() - 0.5 * inv
        - inv2
            * (1.0 / 12.0
                - inv2
                    * (1.0 / 120.0
                        - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0)))))
}

/// `ln Γ(x)` for `x > 0` via recurrence plus Stirling's series.
pub fn ln_gamma(mut x: f64) -> f64 {
    let mut shift = 0.0;
    while x < 20.0 {
        shift -= x.ln();
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    shift + (x - 0.5) * x.ln() - x + 0.5 * (2.0 * std::f64::consts::PI).ln()
        + inv
            * (1.0 / 12.0
                - inv2 * (1.0 / 360.0 - inv2 * (1.0 / 1260.0 - inv2 * (1.0 / 1680.0))))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadrature_of_gaussian() {
        let f = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        assert!((integrate(f, -40.0, 40.0, 1e-12) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn special_functions() {
        // ψ(1) = -γ, ψ(2) = 1 - γ, ln Γ(5) = ln 24
        let euler = 0.577_215_664_901_532_9;
        assert!((digamma(1.0) + euler).abs() < 1e-13);
        assert!((digamma(2.0) - 1.0 + euler).abs() < 1e-13);
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-13);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-13);
    }

    #[test]
    fn enumeration_two_site_chain() {
        let unary = [[0.8, 0.2], [0.5, 0.5]];
        let pot = [[0.7, 0.3], [0.2, 0.8]];
        let m = ising_marginals(1, 2, &unary, pot, [[1.0; 2]; 2]);
        assert!((m[1] - 0.4).abs() < 1e-15);
    }
}
