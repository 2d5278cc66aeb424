//! Theoretical block-norm limits: Monte Carlo, quadrature and closed forms.
//!
//! Scaling conventions of the returned values:
//! * `g_*`: linear CE block, `‖H‖²_F / d`; `C²·g_ii → γe + 1`, `C⁴·g_ij → γe² + 1`.
//! * `h_*`: MLP CE hidden blocks with the output-layer factor included.
//! * `u_*`: MLP MSE hidden blocks *without* the factor 2 of the squared loss,
//!   so an MSE block computed by [`crate::hessian`] has norm `4·u`.
//! * `q_*`: MLP CE output blocks, `‖H‖²_F` of the `m × m` block.

use std::collections::BTreeMap;
use std::f64::consts::{E, PI};
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quadrature::{integrate_interval, integrate_square_adaptive, QuadratureError};
use crate::rng::RngStream;
use crate::stats::{ks_against, par_chunks, std_normal_cdf, PowerSums, MC_CHUNK};

pub const DEFAULT_SAMPLES: u64 = 1_000_000;
const MIN_SAMPLES: u64 = 10_000;

#[derive(Debug, Error, PartialEq)]
pub enum LimitError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
    #[error("{target}: quadrature {quadrature} disagrees with the independent check {check} (± {std_error})")]
    OracleDisagreement {
        target: String,
        quadrature: f64,
        check: f64,
        std_error: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    MonteCarlo,
    Quadrature,
    ClosedForm,
}

/// A limit value with its estimator metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimitEstimate {
    pub target: String,
    pub value: f64,
    pub std_error: f64,
    pub method: Method,
    pub n_samples: u64,
    pub parameters: BTreeMap<String, f64>,
}

impl LimitEstimate {
    fn new(target: &str, value: f64, std_error: f64, method: Method, n_samples: u64) -> Self {
        Self {
            target: target.to_owned(),
            value,
            std_error,
            method,
            n_samples,
            parameters: BTreeMap::new(),
        }
    }

    fn closed(target: &str, value: f64) -> Self {
        Self::new(target, value, 0.0, Method::ClosedForm, 0)
    }

    fn with(mut self, key: &str, value: f64) -> Self {
        self.parameters.insert(key.to_owned(), value);
        self
    }

    /// Same estimate with value and error multiplied by `factor > 0`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            value: self.value * factor,
            std_error: self.std_error * factor,
            ..self.clone()
        }
    }

    /// `|a − b| / sqrt(se_a² + se_b²)`; infinite when both errors vanish and the values differ.
    pub fn z_score(&self, other: &Self) -> f64 {
        let se = self.std_error.hypot(other.std_error);
        let gap = (self.value - other.value).abs();
        if se == 0.0 {
            if gap == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            gap / se
        }
    }
}

/// Diagonal (`ii`) or off-diagonal (`ij`) block pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pair {
    Ii,
    Ij,
}

impl fmt::Display for Pair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pair::Ii => "ii",
            Pair::Ij => "ij",
        })
    }
}

impl FromStr for Pair {
    type Err = LimitError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ii" => Ok(Pair::Ii),
            "ij" => Ok(Pair::Ij),
            other => Err(LimitError::InvalidParameter(format!("pair '{other}'"))),
        }
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), LimitError> {
    if cond {
        Ok(())
    } else {
        Err(LimitError::InvalidParameter(msg()))
    }
}

fn check_common(gamma: f64, classes: usize) -> Result<(), LimitError> {
    check(gamma > 0.0 && gamma.is_finite(), || format!("gamma = {gamma}"))?;
    check(classes >= 2, || format!("C = {classes}"))
}

fn check_samples(n: u64) -> Result<(), LimitError> {
    check(n >= MIN_SAMPLES, || format!("n_samples = {n} < {MIN_SAMPLES}"))
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let top = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    top + z.iter().map(|v| (v - top).exp()).sum::<f64>().ln()
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// `p_1 (1 − p_1)` with `p = softmax(z)`.
pub fn h1(z: &[f64]) -> f64 {
    let rest = log_sum_exp(&z[1..]);
    let all = log_add_exp(z[0], rest);
    (z[0] + rest - 2.0 * all).exp()
}

/// `p_1 p_2` with `p = softmax(z)`.
pub fn h2(z: &[f64]) -> f64 {
    (z[0] + z[1] - 2.0 * log_sum_exp(z)).exp()
}

fn relu_logits(z: &[f64], v: ArrayView2<'_, f64>) -> Vec<f64> {
    v.rows()
        .into_iter()
        .map(|row| row.iter().zip(z).map(|(a, &b)| a * b.max(0.0)).sum())
        .collect()
}

fn softmax_vec(u: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(u);
    u.iter().map(|x| (x - lse).exp()).collect()
}

/// Hidden-unit curvature weight for neuron 1: `1(z_1 > 0) · v₁ᵀ(diag r − r rᵀ)v₁`
/// with `r = softmax(V relu(z))`; `v` is `C × m`, `z` has length `m`.
pub fn xi(z: &[f64], v: ArrayView2<'_, f64>) -> f64 {
    if z[0] <= 0.0 {
        return 0.0;
    }
    let r = softmax_vec(&relu_logits(z, v));
    let col = v.column(0);
    let mean: f64 = r.iter().zip(col).map(|(p, a)| p * a).sum();
    let second: f64 = r.iter().zip(col).map(|(p, a)| p * a * a).sum();
    second - mean * mean
}

/// Cross weight for neurons 1 and 2: `1(z_1 > 0) 1(z_2 > 0) · v₁ᵀ(diag r − r rᵀ)v₂`.
pub fn eta(z: &[f64], v: ArrayView2<'_, f64>) -> f64 {
    if z[0] <= 0.0 || z[1] <= 0.0 {
        return 0.0;
    }
    let r = softmax_vec(&relu_logits(z, v));
    let (a, b) = (v.column(0), v.column(1));
    let ma: f64 = r.iter().zip(a).map(|(p, x)| p * x).sum();
    let mb: f64 = r.iter().zip(b).map(|(p, x)| p * x).sum();
    let cross: f64 = r.iter().zip(a).zip(b).map(|((p, x), y)| p * x * y).sum();
    cross - ma * mb
}

/// `γ E[t²] + (E t)²` from power sums, with the first-order (delta-method) error.
fn gamma_combination(gamma: f64, s: &PowerSums) -> (f64, f64) {
    let (m1, m2, m3, m4) = (s.moment(1), s.moment(2), s.moment(3), s.moment(4));
    let value = gamma * m2 + m1 * m1;
    let var = gamma * gamma * (m4 - m2 * m2) + 4.0 * m1 * m1 * (m2 - m1 * m1) + 4.0 * gamma * m1 * (m3 - m1 * m2);
    (value, (var.max(0.0) / s.n as f64).sqrt())
}

/// Both linear-CE limits from one set of draws: `(g_ii, g_ij)`.
pub fn eval_g_pair(
    gamma: f64,
    classes: usize,
    n_samples: u64,
    rng: &RngStream,
) -> Result<(LimitEstimate, LimitEstimate), LimitError> {
    check_common(gamma, classes)?;
    check_samples(n_samples)?;
    let chunks = par_chunks(n_samples, MC_CHUNK, rng, |mut r, count| {
        let mut z = vec![0.0; classes];
        let (mut ii, mut ij) = (PowerSums::default(), PowerSums::default());
        for _ in 0..count {
            r.fill_normal(&mut z);
            ii.push(h1(&z));
            ij.push(h2(&z));
        }
        (ii, ij)
    });
    let (mut ii, mut ij) = (PowerSums::default(), PowerSums::default());
    for (a, b) in &chunks {
        ii.merge(a);
        ij.merge(b);
    }
    let build = |target: &str, s: &PowerSums| {
        let (value, se) = gamma_combination(gamma, s);
        LimitEstimate::new(target, value, se, Method::MonteCarlo, n_samples)
            .with("gamma", gamma)
            .with("C", classes as f64)
    };
    Ok((build("g_ii", &ii), build("g_ij", &ij)))
}

/// Finite-C linear-CE limit `g = γ E[h²] + (E h)²` over `z ~ N(0, I_C)`.
pub fn eval_g(
    gamma: f64,
    classes: usize,
    which: Pair,
    n_samples: u64,
    rng: &RngStream,
) -> Result<LimitEstimate, LimitError> {
    let (ii, ij) = eval_g_pair(gamma, classes, n_samples, rng)?;
    Ok(match which {
        Pair::Ii => ii,
        Pair::Ij => ij,
    })
}

/// Large-C value of `C²·g_ii` (ii) or `C⁴·g_ij` (ij).
pub fn g_limit(gamma: f64, which: Pair) -> LimitEstimate {
    let value = match which {
        Pair::Ii => gamma * E + 1.0,
        Pair::Ij => gamma * E * E + 1.0,
    };
    LimitEstimate::closed(&format!("lim_g_{which}"), value).with("gamma", gamma)
}

/// MSE hidden-layer limit at finite C (exact V moments times the masked-Gram second moment).
pub fn eval_u(gamma: f64, classes: usize, m: usize, which: Pair) -> Result<LimitEstimate, LimitError> {
    check_common(gamma, classes)?;
    check(m >= 1, || format!("m = {m}"))?;
    let (c, mf) = (classes as f64, m as f64);
    let value = match which {
        // E[(Σ_c v_ci²)²] = (C² + 2C)/m²
        Pair::Ii => (c * c + 2.0 * c) / (mf * mf) * (1.0 + 2.0 * gamma) / 4.0,
        // E[(Σ_c v_ci v_cj)²] = C/m²
        Pair::Ij => c / (mf * mf) * (1.0 + 4.0 * gamma) / 16.0,
    };
    Ok(LimitEstimate::closed(&format!("u_{which}"), value)
        .with("gamma", gamma)
        .with("C", c)
        .with("m", mf))
}

/// Large-C value of `u_ii/C²` or `u_ij/C`.
pub fn u_limit(gamma: f64, m: usize, which: Pair) -> LimitEstimate {
    let m2 = (m * m) as f64;
    let value = match which {
        Pair::Ii => (1.0 + 2.0 * gamma) / (4.0 * m2),
        Pair::Ij => (1.0 + 4.0 * gamma) / (16.0 * m2),
    };
    LimitEstimate::closed(&format!("lim_u_{which}"), value)
        .with("gamma", gamma)
        .with("m", m as f64)
}

/// z-draws sharing one output matrix in [`eval_h`].
const H_GROUP: usize = 16;

fn gaussian_matrix(rows: usize, cols: usize, scale: f64, rng: &mut RngStream) -> Array2<f64> {
    let mut buf = vec![0.0; rows * cols];
    rng.fill_normal(&mut buf);
    buf.iter_mut().for_each(|x| *x *= scale);
    Array2::from_shape_vec((rows, cols), buf).expect("shape matches buffer")
}

/// Finite-C CE hidden-layer limit `γ E[t²] + E_V[(E[t | V])²]`, `t = ξ` (ii) or `η` (ij).
///
/// Draws `V` (`C × m`, entries `N(0, 1/m)`) once per group of 16 `z`-draws; the
/// conditional term is the within-group U-statistic, so the estimator is
/// unbiased and its error comes from the spread of group means.
pub fn eval_h(
    gamma: f64,
    classes: usize,
    m: usize,
    which: Pair,
    n_samples: u64,
    rng: &RngStream,
) -> Result<LimitEstimate, LimitError> {
    check_common(gamma, classes)?;
    check(m >= 3, || format!("m = {m} < 3"))?;
    check_samples(n_samples)?;
    let groups = n_samples.div_ceil(H_GROUP as u64);
    let scale = 1.0 / (m as f64).sqrt();
    let chunks = par_chunks(groups, 64, rng, |mut r, count| {
        let mut acc = PowerSums::default();
        let mut z = vec![0.0; m];
        let mut t = [0.0; H_GROUP];
        for _ in 0..count {
            let v = gaussian_matrix(classes, m, scale, &mut r);
            for tk in t.iter_mut() {
                r.fill_normal(&mut z);
                *tk = match which {
                    Pair::Ii => xi(&z, v.view()),
                    Pair::Ij => eta(&z, v.view()),
                };
            }
            let k = H_GROUP as f64;
            let sum: f64 = t.iter().sum();
            let sq: f64 = t.iter().map(|x| x * x).sum();
            acc.push(gamma * sq / k + (sum * sum - sq) / (k * (k - 1.0)));
        }
        acc
    });
    let mut acc = PowerSums::default();
    chunks.iter().for_each(|c| acc.merge(c));
    Ok(LimitEstimate::new(
        &format!("h_{which}"),
        acc.mean(),
        acc.std_error(),
        Method::MonteCarlo,
        groups * H_GROUP as u64,
    )
    .with("gamma", gamma)
    .with("C", classes as f64)
    .with("m", m as f64))
}

/// Large-C value of `h_ii` (ii) or `C·h_ij` (ij, needs `m ≥ 3`).
pub fn h_limit(gamma: f64, m: usize, which: Pair) -> Result<LimitEstimate, LimitError> {
    check(gamma > 0.0, || format!("gamma = {gamma}"))?;
    let mf = m as f64;
    let value = match which {
        Pair::Ii => {
            check(m >= 1, || format!("m = {m}"))?;
            (1.0 + 2.0 * gamma) / (4.0 * mf * mf)
        }
        Pair::Ij => {
            check(m >= 3, || format!("m = {m} < 3"))?;
            let k = mf - 2.0;
            gamma * (mf - 1.0).powi(2) / (2f64.powi(m as i32) * k.powi(3) * mf)
                * ((mf / k).sqrt() + 1.0).powi(m as i32 - 2)
        }
    };
    Ok(LimitEstimate::closed(&format!("lim_h_{which}"), value)
        .with("gamma", gamma)
        .with("m", mf))
}

/// `E[exp(c σ(Z₁)σ(Z₂)) σ(Z₁)^k σ(Z₂)^k]` for `k ∈ {0, 1, 2}` by one-dimensional
/// integration of the closed-form inner expectation.
///
/// Inner moments over `X ~ N(0,1)` restricted to `X > 0`, with `t = c·y`:
/// `E[e^{tX}] = e^{t²/2}Φ(t)`, `E[X e^{tX}] = e^{t²/2}(tΦ(t) + φ(t))`,
/// `E[X² e^{tX}] = e^{t²/2}((1 + t²)Φ(t) + tφ(t))`.
fn pair_exp_moment_1d(c: f64, k: u32) -> f64 {
    let lambda = 1.0 - c * c;
    let upper = (100.0 / lambda).sqrt();
    let phi = |t: f64| (-0.5 * t * t).exp() / (2.0 * PI).sqrt();
    let integrand = |y: f64| {
        let t = c * y;
        let (cdf, pdf) = (std_normal_cdf(t), phi(t));
        let inner = match k {
            0 => cdf,
            1 => t * cdf + pdf,
            _ => (1.0 + t * t) * cdf + t * pdf,
        };
        (-0.5 * lambda * y * y).exp() / (2.0 * PI).sqrt() * y.powi(k as i32) * inner
    };
    let quadrant = integrate_interval(integrand, 0.0, upper, 400);
    if k == 0 {
        0.75 + quadrant
    } else {
        quadrant
    }
}

/// The six quadrant-integral constants at width `m`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    pub m: usize,
    pub a11: LimitEstimate,
    pub a12: LimitEstimate,
    pub a21: LimitEstimate,
    pub a22: LimitEstimate,
    pub b1: LimitEstimate,
    pub b2: LimitEstimate,
}

impl Constants {
    pub fn all(&self) -> [&LimitEstimate; 6] {
        [&self.a11, &self.a12, &self.a21, &self.a22, &self.b1, &self.b2]
    }

    /// `(a_k1, a_k2, b_k)` for exponent coefficient `k/m`, `k ∈ {1, 2}`.
    fn family(&self, k: u8) -> (f64, f64, f64) {
        match k {
            1 => (self.a11.value, self.a12.value, self.b1.value),
            _ => (self.a21.value, self.a22.value, self.b2.value),
        }
    }
}

/// (target, coefficient numerator k, power of σσ) for each constant.
const CONSTANT_TABLE: [(&str, u8, u32); 6] = [
    ("a11", 1, 1),
    ("a12", 1, 2),
    ("a21", 2, 1),
    ("a22", 2, 2),
    ("b1", 1, 0),
    ("b2", 2, 0),
];

fn quadrant_constant(c: f64, power: u32) -> Result<(f64, usize), QuadratureError> {
    // integrand decays like exp(-(1 - c)/2 · r²) along the diagonal
    let lambda = 0.5 * (1.0 - c);
    let upper = (45.0 / lambda).sqrt().max(12.0);
    let f = |x: f64, y: f64| {
        let s = x * y;
        s.powi(power as i32) * (c * s - 0.5 * (x * x + y * y)).exp() / (2.0 * PI)
    };
    let (v, nodes) = integrate_square_adaptive(&f, upper, 200, 1e-9)?;
    Ok((if power == 0 { 0.75 + v } else { v }, nodes))
}

/// The constants `a11 … b2` by adaptive Gauss–Legendre quadrature on the positive quadrant.
///
/// `b` uses the direct-expectation normalization `3/4 + (1/2π)∫∫…`.
pub fn eval_constants(m: usize) -> Result<Constants, LimitError> {
    check(m >= 3, || format!("m = {m}: the 2/m family diverges for m ≤ 2"))?;
    let mut out = Vec::with_capacity(6);
    for (name, k, power) in CONSTANT_TABLE {
        let (value, nodes) = quadrant_constant(k as f64 / m as f64, power)?;
        out.push(
            LimitEstimate::new(name, value, 0.0, Method::Quadrature, (nodes * nodes) as u64)
                .with("m", m as f64),
        );
    }
    let mut it = out.into_iter();
    let mut next = || it.next().expect("six constants");
    Ok(Constants {
        m,
        a11: next(),
        a12: next(),
        a21: next(),
        a22: next(),
        b1: next(),
        b2: next(),
    })
}

/// Plain Monte Carlo of the constants with `Z₁, Z₂` i.i.d. standard normal.
///
/// The second moment of the `k/m` integrand is finite only for `2k/m < 1`;
/// estimates outside that range are returned with an infinite standard error.
pub fn constants_mc(m: usize, n_samples: u64, rng: &RngStream) -> Result<Vec<LimitEstimate>, LimitError> {
    check(m >= 3, || format!("m = {m}"))?;
    check_samples(n_samples)?;
    let chunks = par_chunks(n_samples, MC_CHUNK, rng, |mut r, count| {
        let mut acc = [PowerSums::default(); 6];
        for _ in 0..count {
            let s = r.normal().max(0.0) * r.normal().max(0.0);
            for (a, (_, k, power)) in acc.iter_mut().zip(CONSTANT_TABLE) {
                a.push(s.powi(power as i32) * (k as f64 * s / m as f64).exp());
            }
        }
        acc
    });
    let mut acc = [PowerSums::default(); 6];
    for c in &chunks {
        acc.iter_mut().zip(c).for_each(|(a, b)| a.merge(b));
    }
    Ok(CONSTANT_TABLE
        .iter()
        .zip(acc)
        .map(|(&(name, k, _), a)| {
            let finite = 2 * (k as usize) < m;
            let se = if finite { a.std_error() } else { f64::INFINITY };
            LimitEstimate::new(name, a.mean(), se, Method::MonteCarlo, n_samples).with("m", m as f64)
        })
        .collect())
}

/// Quadrature constants, released only after they agree with two independent
/// paths: the one-dimensional reduction (relative 1e-8) and, where its variance
/// is finite, plain Monte Carlo (3 standard errors).
pub fn frozen_constants(m: usize, mc_samples: u64, rng: &RngStream) -> Result<Constants, LimitError> {
    let quad = eval_constants(m)?;
    let mc = constants_mc(m, mc_samples, rng)?;
    for ((est, mc_est), (name, k, power)) in quad.all().into_iter().zip(&mc).zip(CONSTANT_TABLE) {
        let reduced = pair_exp_moment_1d(k as f64 / m as f64, power);
        if (reduced - est.value).abs() > 1e-8 * est.value.abs() {
            return Err(LimitError::OracleDisagreement {
                target: name.to_owned(),
                quadrature: est.value,
                check: reduced,
                std_error: 0.0,
            });
        }
        if mc_est.std_error.is_finite() && est.z_score(mc_est) > 3.0 {
            return Err(LimitError::OracleDisagreement {
                target: name.to_owned(),
                quadrature: est.value,
                check: mc_est.value,
                std_error: mc_est.std_error,
            });
        }
    }
    Ok(quad)
}

/// Large-C value of `C²·q_ii` (ii) or `C⁴·q_ij` (ij):
/// `m·a_k2·b_k^{m−1} + m(m−1)·a_k1²·b_k^{m−2}` with `k = 1` or `2`.
pub fn q_limit(constants: &Constants, which: Pair) -> LimitEstimate {
    let k = match which {
        Pair::Ii => 1,
        Pair::Ij => 2,
    };
    let (a1, a2, b) = constants.family(k);
    let mf = constants.m as f64;
    let value = mf * a2 * b.powi(constants.m as i32 - 1) + mf * (mf - 1.0) * a1 * a1 * b.powi(constants.m as i32 - 2);
    let mut est = LimitEstimate::closed(&format!("lim_q_{which}"), value).with("m", mf);
    est.method = Method::Quadrature;
    est
}

/// Sampling scheme for [`eval_q_with`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QSampler {
    /// Direct draws of `(z₁, z₂, V)`. The weight is heavy-tailed (infinite
    /// variance for small `m`), so the reported error can be unreliable.
    Naive,
    /// Exponential tilting of the ReLU pair and of the relevant rows of `V`,
    /// which removes the heavy tail exactly.
    Tilted,
}

/// Draws one coordinate pair `(σ(Z₁), σ(Z₂))` from the law tilted by `exp(c σ σ)`.
fn tilted_relu_pair(c: f64, quadrant_prob: f64, rng: &mut RngStream) -> (f64, f64) {
    if rng.uniform() < quadrant_prob {
        let s = 1.0 / (1.0 - c * c).sqrt();
        let tail = (1.0 - c * c).sqrt();
        loop {
            let (u1, u2) = (rng.normal(), rng.normal());
            let (x, y) = (s * u1, s * (c * u1 + tail * u2));
            if x > 0.0 && y > 0.0 {
                return (x, y);
            }
        }
    } else {
        loop {
            let (u1, u2) = (rng.normal(), rng.normal());
            if !(u1 > 0.0 && u2 > 0.0) {
                return (u1.max(0.0), u2.max(0.0));
            }
        }
    }
}

fn log_softmax_denominator(s: &[f64], v: ArrayView2<'_, f64>) -> (Vec<f64>, f64) {
    let u: Vec<f64> = v.rows().into_iter().map(|row| row.iter().zip(s).map(|(a, b)| a * b).sum()).collect();
    let lse = log_sum_exp(&u);
    (u, lse)
}

/// Finite-C CE output-layer limit `q = E_V[‖E_z[w(z, V) σ(z)σ(z)ᵀ]‖²_F]` with
/// `w = p_i(1 − p_i)` (ii) or `p_i p_j` (ij), using the tilted sampler when the
/// tilt is normalizable and the naive one otherwise.
///
/// The output-layer block is `m × m` with `N → ∞`, so `gamma` does not enter;
/// it is recorded in the parameters only.
pub fn eval_q(
    gamma: f64,
    classes: usize,
    m: usize,
    which: Pair,
    n_samples: u64,
    rng: &RngStream,
) -> Result<LimitEstimate, LimitError> {
    let k = if which == Pair::Ii { 1 } else { 2 };
    let sampler = if k < m { QSampler::Tilted } else { QSampler::Naive };
    eval_q_with(gamma, classes, m, which, n_samples, rng, sampler)
}

pub fn eval_q_with(
    gamma: f64,
    classes: usize,
    m: usize,
    which: Pair,
    n_samples: u64,
    rng: &RngStream,
    sampler: QSampler,
) -> Result<LimitEstimate, LimitError> {
    check_common(gamma, classes)?;
    check(m >= 2, || format!("m = {m} < 2"))?;
    check_samples(n_samples)?;
    let (rows, k) = match which {
        Pair::Ii => (1usize, 1.0),
        Pair::Ij => (2usize, 2.0),
    };
    let mf = m as f64;
    let c = k / mf;
    check(sampler == QSampler::Naive || c < 1.0, || {
        format!("tilted sampler needs k/m < 1, got {c}")
    })?;
    let b = if sampler == QSampler::Tilted { pair_exp_moment_1d(c, 0) } else { 1.0 };
    let quadrant_prob = (b - 0.75) / b;
    // work with C^{2·rows}·q so the accumulated values are O(1)
    let log_scale = 2.0 * rows as f64 * (classes as f64).ln();
    let scale = 1.0 / mf.sqrt();

    let chunks = par_chunks(n_samples, 1024, rng, |mut r, count| {
        let mut acc = PowerSums::default();
        let (mut s1, mut s2) = (vec![0.0; m], vec![0.0; m]);
        for _ in 0..count {
            let mut v = gaussian_matrix(classes, m, scale, &mut r);
            let log_tilt = match sampler {
                QSampler::Tilted => {
                    for h in 0..m {
                        let (x, y) = tilted_relu_pair(c, quadrant_prob, &mut r);
                        s1[h] = x;
                        s2[h] = y;
                    }
                    for row in 0..rows {
                        for h in 0..m {
                            v[[row, h]] += (s1[h] + s2[h]) / mf;
                        }
                    }
                    let norms: f64 = s1.iter().chain(&s2).map(|x| x * x).sum();
                    mf * b.ln() + norms * rows as f64 / (2.0 * mf)
                }
                QSampler::Naive => {
                    for h in 0..m {
                        s1[h] = r.normal().max(0.0);
                        s2[h] = r.normal().max(0.0);
                    }
                    0.0
                }
            };
            let dot: f64 = s1.iter().zip(&s2).map(|(a, b)| a * b).sum();
            if dot == 0.0 {
                acc.push(0.0);
                continue;
            }
            let (u1, lse1) = log_softmax_denominator(&s1, v.view());
            let (u2, lse2) = log_softmax_denominator(&s2, v.view());
            let log_w = match (sampler, which) {
                (QSampler::Tilted, Pair::Ij) => -2.0 * (lse1 + lse2),
                (QSampler::Tilted, Pair::Ii) => {
                    -(lse1 + lse2) + (-(u1[0] - lse1).exp()).ln_1p() + (-(u2[0] - lse2).exp()).ln_1p()
                }
                (QSampler::Naive, Pair::Ij) => u1[0] + u1[1] + u2[0] + u2[1] - 2.0 * (lse1 + lse2),
                (QSampler::Naive, Pair::Ii) => {
                    u1[0] + u2[0] - (lse1 + lse2)
                        + (-(u1[0] - lse1).exp()).ln_1p()
                        + (-(u2[0] - lse2).exp()).ln_1p()
                }
            };
            acc.push((log_scale + log_tilt + log_w + 2.0 * dot.ln()).exp());
        }
        acc
    });
    let mut acc = PowerSums::default();
    chunks.iter().for_each(|c| acc.merge(c));
    let unscale = (-log_scale).exp();
    Ok(LimitEstimate::new(
        &format!("q_{which}"),
        acc.mean() * unscale,
        acc.std_error() * unscale,
        Method::MonteCarlo,
        n_samples,
    )
    .with("gamma", gamma)
    .with("C", classes as f64)
    .with("m", mf))
}

/// Distance of the rescaled softmax weights from their lognormal limits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LognormalReport {
    pub classes: usize,
    pub n_samples: u64,
    /// KS distance of `C√e·h1` from Lognormal(0, 1).
    pub ks_h1: f64,
    /// KS distance of `C²e·h2` from Lognormal(0, 2), the law of a product of two
    /// independent Lognormal(0, 1) variables.
    pub ks_h2: f64,
}

pub fn lognormal_limit_check(classes: usize, n_samples: u64, rng: &RngStream) -> Result<LognormalReport, LimitError> {
    check(classes >= 2, || format!("C = {classes}"))?;
    check(n_samples >= 100, || format!("n_samples = {n_samples}"))?;
    let c = classes as f64;
    let chunks = par_chunks(n_samples, MC_CHUNK, rng, |mut r, count| {
        let mut z = vec![0.0; classes];
        (0..count)
            .map(|_| {
                r.fill_normal(&mut z);
                // compare on the log scale; KS is invariant under monotone maps
                ((c * E.sqrt() * h1(&z)).ln(), (c * c * E * h2(&z)).ln())
            })
            .collect::<Vec<_>>()
    });
    let (a, b): (Vec<f64>, Vec<f64>) = chunks.into_iter().flatten().unzip();
    Ok(LognormalReport {
        classes,
        n_samples,
        ks_h1: ks_against(&a, std_normal_cdf),
        ks_h2: ks_against(&b, |x| std_normal_cdf(x / 2f64.sqrt())),
    })
}
