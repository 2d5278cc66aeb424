//! Eigenvalue spectra, Stieltjes transforms and decoupling surrogates.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::limits::h1;
use crate::limits::Pair;
use crate::rng::RngStream;
use crate::stats::ks_two_sample;

#[derive(Debug, Error, PartialEq)]
pub enum SpectralError {
    #[error("matrix is not symmetric (max asymmetry {asymmetry:e}, scale {scale:e})")]
    NonSymmetric { asymmetry: f64, scale: f64 },
    #[error("fixed point did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("moment fit is ill-conditioned (disagreement {residual:e})")]
    IllConditioned { residual: f64 },
    #[error("invalid measure: {0}")]
    InvalidMeasure(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Sorted eigenvalues of a symmetric matrix plus a free-form description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalSpectrum {
    pub eigenvalues: Vec<f64>,
    pub source: String,
}

impl EmpiricalSpectrum {
    /// `(1/n) Σ λ^k`.
    pub fn moment(&self, k: i32) -> f64 {
        self.eigenvalues.iter().map(|l| l.powi(k)).sum::<f64>() / self.eigenvalues.len() as f64
    }

    pub fn ks_distance(&self, other: &Self) -> f64 {
        ks_two_sample(&self.eigenvalues, &other.eigenvalues)
    }
}

pub fn empirical_spectrum(m: ArrayView2<'_, f64>, source: &str) -> Result<EmpiricalSpectrum, SpectralError> {
    let n = m.nrows();
    if n == 0 || m.ncols() != n {
        return Err(SpectralError::InvalidParameter(format!("matrix is {:?}", m.dim())));
    }
    let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let asymmetry = (0..n)
        .flat_map(|i| (0..i).map(move |j| (i, j)))
        .fold(0.0f64, |a, (i, j)| a.max((m[[i, j]] - m[[j, i]]).abs()));
    if asymmetry > 1e-8 * scale {
        return Err(SpectralError::NonSymmetric { asymmetry, scale });
    }
    let dm = DMatrix::from_fn(n, n, |i, j| 0.5 * (m[[i, j]] + m[[j, i]]));
    let mut eigenvalues: Vec<f64> = dm.symmetric_eigenvalues().iter().copied().collect();
    eigenvalues.sort_by(f64::total_cmp);
    Ok(EmpiricalSpectrum {
        eigenvalues,
        source: source.to_owned(),
    })
}

/// A probability measure on `[0, ∞)`: finitely many atoms, or an equally
/// weighted cached sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeasureRep {
    Atoms { atoms: Vec<(f64, f64)> },
    Samples { samples: Vec<f64> },
}

impl MeasureRep {
    pub fn atoms(atoms: Vec<(f64, f64)>) -> Result<Self, SpectralError> {
        if atoms.is_empty() || atoms.iter().any(|&(x, w)| w < 0.0 || !x.is_finite() || !w.is_finite()) {
            return Err(SpectralError::InvalidMeasure(format!("{atoms:?}")));
        }
        let total: f64 = atoms.iter().map(|a| a.1).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(SpectralError::InvalidMeasure(format!("weights sum to {total}")));
        }
        Ok(MeasureRep::Atoms { atoms })
    }

    pub fn point(x: f64) -> Self {
        MeasureRep::Atoms { atoms: vec![(x, 1.0)] }
    }

    /// `n` cached draws from `draw`.
    pub fn sampled(n: usize, rng: &mut RngStream, mut draw: impl FnMut(&mut RngStream) -> f64) -> Self {
        MeasureRep::Samples {
            samples: (0..n).map(|_| draw(rng)).collect(),
        }
    }

    /// Law of `h1(z)`, `z ~ N(0, I_C)`.
    pub fn softmax_weight_law(classes: usize, n: usize, rng: &mut RngStream) -> Self {
        let mut z = vec![0.0; classes];
        Self::sampled(n, rng, |r| {
            r.fill_normal(&mut z);
            h1(&z)
        })
    }

    pub fn integrate<F: Fn(f64) -> Complex64>(&self, f: F) -> Complex64 {
        match self {
            MeasureRep::Atoms { atoms } => atoms.iter().map(|&(x, w)| f(x) * w).sum(),
            MeasureRep::Samples { samples } => {
                samples.iter().map(|&x| f(x)).sum::<Complex64>() / samples.len() as f64
            }
        }
    }
}

/// One accepted solution of the fixed-point equation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StieltjesPoint {
    pub z_re: f64,
    pub z_im: f64,
    pub s_re: f64,
    pub s_im: f64,
    pub residual: f64,
    pub iterations: usize,
}

impl StieltjesPoint {
    pub fn z(&self) -> Complex64 {
        Complex64::new(self.z_re, self.z_im)
    }

    pub fn s(&self) -> Complex64 {
        Complex64::new(self.s_re, self.s_im)
    }
}

const MAX_ITERATIONS: usize = 100_000;

/// Stieltjes transform at `z ∉ ℝ` of the limiting spectrum of `(1/d) X Λ Xᵀ`
/// (`d/N → γ`, diagonal weights with law `ν`), the solution of
/// `s = 1 / ((1/γ) ∫ t dν(t) / (1 + t s) − z)`.
///
/// Damped fixed-point iteration from `s = −1/z`; the damping starts at 1/2 and
/// halves whenever the step grows. Converged when `|Δs| < 1e-12 · min(1, |s|)`.
pub fn solve_generalized_mp(gamma: f64, nu: &MeasureRep, z: Complex64) -> Result<StieltjesPoint, SpectralError> {
    if !(gamma > 0.0) || z.im == 0.0 || !z.im.is_finite() {
        return Err(SpectralError::InvalidParameter(format!("gamma = {gamma}, z = {z}")));
    }
    // iterates are kept in the half plane of z (ℂ⁺ for the usual queries)
    let side = z.im.signum();
    let rhs = |s: Complex64| {
        let integral = nu.integrate(|t| t / (1.0 + t * s));
        1.0 / (integral / gamma - z)
    };
    let mut s = -1.0 / z;
    let mut alpha = 0.5;
    let mut last_step = f64::INFINITY;
    for it in 1..=MAX_ITERATIONS {
        let target = rhs(s);
        let mut next = (1.0 - alpha) * s + alpha * target;
        if next.im * side <= 0.0 {
            next.im = side * next.im.abs().max(f64::MIN_POSITIVE);
        }
        let step = (next - s).norm();
        if step > last_step {
            alpha = (alpha * 0.5).max(1e-6);
        }
        last_step = step;
        s = next;
        if step < 1e-12 * s.norm().min(1.0) {
            let residual = (s - rhs(s)).norm();
            return Ok(StieltjesPoint {
                z_re: z.re,
                z_im: z.im,
                s_re: s.re,
                s_im: s.im,
                residual,
                iterations: it,
            });
        }
    }
    Err(SpectralError::NonConvergence {
        iterations: MAX_ITERATIONS,
        residual: (s - rhs(s)).norm(),
    })
}

/// Stieltjes transform of MP(y, σ²): the root of `y z σ² s² + (z − σ²(1 − y)) s + 1 = 0`
/// in the upper half plane (and inside the disc `|s| ≤ 1/Im z`).
pub fn mp_closed_form(y: f64, sigma2: f64, z: Complex64) -> Complex64 {
    let a = z * (y * sigma2);
    let b = z - sigma2 * (1.0 - y);
    let disc = (b * b - 4.0 * a).sqrt();
    let roots = [(-b + disc) / (2.0 * a), (-b - disc) / (2.0 * a)];
    let bound = 1.0 / z.im * (1.0 + 1e-9);
    roots
        .iter()
        .copied()
        .filter(|r| r.im > 0.0 && r.norm() <= bound)
        .max_by(|p, q| p.im.total_cmp(&q.im))
        .unwrap_or_else(|| {
            *roots
                .iter()
                .max_by(|p, q| p.im.total_cmp(&q.im))
                .expect("two roots")
        })
}

const MOMENT_RADII: [f64; 3] = [50.0, 100.0, 200.0];

/// Moments `m_1 … m_order` (order ≤ 3) from `s(z) = −Σ_k m_k / z^{k+1}`.
///
/// With `w = −z s(z) − 1` on `z = iR`, `Im w = −m₁/R + m₃/R³ − m₅/R⁵ …` and
/// `Re w = −m₂/R² + m₄/R⁴ − m₆/R⁶ …`; the three radii give a 3×3 solve per
/// part (Richardson extrapolation in `1/R²`). The two-radius estimate serves
/// as the conditioning check.
pub fn moments_from_stieltjes<F>(provider: F, order: usize) -> Result<Vec<f64>, SpectralError>
where
    F: Fn(Complex64) -> Result<Complex64, SpectralError>,
{
    if !(1..=3).contains(&order) {
        return Err(SpectralError::InvalidParameter(format!("order = {order}")));
    }
    let w: Vec<Complex64> = MOMENT_RADII
        .iter()
        .map(|&r| {
            let z = Complex64::new(0.0, r);
            provider(z).map(|s| -z * s - 1.0)
        })
        .collect::<Result<_, _>>()?;
    // rows: [1/R^p, 1/R^{p+2}, 1/R^{p+4}] with alternating signs folded into the unknowns
    let solve = |vals: [f64; 3], p: i32| -> [f64; 3] {
        let a = DMatrix::from_fn(3, 3, |i, j| MOMENT_RADII[i].powi(-(p + 2 * j as i32)));
        let b = nalgebra::DVector::from_row_slice(&vals);
        let x = a.lu().solve(&b).unwrap_or_else(|| nalgebra::DVector::zeros(3));
        [x[0], x[1], x[2]]
    };
    let odd = solve([w[0].im, w[1].im, w[2].im], 1);
    let even = solve([w[0].re, w[1].re, w[2].re], 2);
    let (m1, m3, m2) = (-odd[0], odd[1], -even[0]);

    // first-order Richardson on the two largest radii
    let (r1, r2) = (MOMENT_RADII[1], MOMENT_RADII[2]);
    let m1_two = (-(r2 * r2 * r2) * w[2].im + r1 * r1 * r1 * w[1].im) / (r2 * r2 - r1 * r1);
    let m2_two = (-(r2.powi(4)) * w[2].re + r1.powi(4) * w[1].re) / (r2 * r2 - r1 * r1);
    let disagreement = ((m1 - m1_two).abs() / m1.abs().max(1.0)).max((m2 - m2_two).abs() / m2.abs().max(1.0));
    if disagreement > 1e-3 || !(m1.is_finite() && m2.is_finite() && m3.is_finite()) {
        return Err(SpectralError::IllConditioned { residual: disagreement });
    }
    Ok([m1, m2, m3][..order].to_vec())
}

/// How the decoupled surrogate is built.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecouplingPolicy {
    /// Keep the true per-sample weights (mask or softmax weight) and pair them
    /// with an independent data copy. The weights stay i.i.d. with the right
    /// law and are now independent of the data, which is the decoupled object;
    /// the empirical weight distribution is shared, so the comparison does not
    /// pick up binomial fluctuations of the weight histogram.
    #[default]
    SharedWeights,
    /// Draw the surrogate weights afresh: a new Bernoulli mask, or softmax
    /// weights computed from an independent data copy and applied to the
    /// original data.
    Fresh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecouplingReport {
    pub d: usize,
    pub n: usize,
    pub label: String,
    pub policy: DecouplingPolicy,
    pub ks: f64,
    pub true_second_moment: f64,
    pub surrogate_second_moment: f64,
}

fn gaussian(rows: usize, cols: usize, rng: &mut RngStream) -> Array2<f64> {
    let mut buf = vec![0.0; rows * cols];
    rng.fill_normal(&mut buf);
    Array2::from_shape_vec((rows, cols), buf).expect("shape matches buffer")
}

/// `(1/N) X diag(weights) Xᵀ` for `X` of shape `d × N`.
pub fn weighted_covariance(x: ArrayView2<'_, f64>, weights: &Array1<f64>) -> Array2<f64> {
    let scaled = &x * &weights.view().insert_axis(Axis(0));
    scaled.dot(&x.t()) / x.ncols() as f64
}

fn check_size(d: usize, n: usize) -> Result<(), SpectralError> {
    if d < 50 || n < 50 {
        return Err(SpectralError::InvalidParameter(format!("d = {d}, N = {n}: need at least 50")));
    }
    Ok(())
}

fn report(
    d: usize,
    n: usize,
    label: String,
    policy: DecouplingPolicy,
    truth: &Array2<f64>,
    surrogate: &Array2<f64>,
) -> Result<DecouplingReport, SpectralError> {
    let a = empirical_spectrum(truth.view(), &label)?;
    let b = empirical_spectrum(surrogate.view(), &format!("{label}/surrogate"))?;
    Ok(DecouplingReport {
        d,
        n,
        policy,
        ks: a.ks_distance(&b),
        true_second_moment: a.moment(2),
        surrogate_second_moment: b.moment(2),
        label,
    })
}

/// ReLU-mask Gram matrix `(1/N) X Λ Xᵀ` (Λ from one or two Gaussian hidden
/// units) against its Bernoulli surrogate with `ber(1/2)` (ii) or `ber(1/4)` (ij) weights.
pub fn bernoulli_decoupling_check(
    d: usize,
    n: usize,
    which: Pair,
    policy: DecouplingPolicy,
    rng: &mut RngStream,
) -> Result<DecouplingReport, SpectralError> {
    check_size(d, n)?;
    let x = gaussian(d, n, rng);
    let units = if which == Pair::Ii { 1 } else { 2 };
    let w = gaussian(units, d, rng);
    let pre = w.dot(&x);
    let mask: Array1<f64> = pre
        .axis_iter(Axis(1))
        .map(|col| if col.iter().all(|&v| v > 0.0) { 1.0 } else { 0.0 })
        .collect();
    let x_hat = gaussian(d, n, rng);
    let surrogate_mask = match policy {
        DecouplingPolicy::SharedWeights => mask.clone(),
        DecouplingPolicy::Fresh => {
            let p = if which == Pair::Ii { 0.5 } else { 0.25 };
            (0..n).map(|_| if rng.bernoulli(p) { 1.0 } else { 0.0 }).collect()
        }
    };
    report(
        d,
        n,
        format!("bernoulli_{which}"),
        policy,
        &weighted_covariance(x.view(), &mask),
        &weighted_covariance(x_hat.view(), &surrogate_mask),
    )
}

fn softmax_weights(v: &Array2<f64>, x: ArrayView2<'_, f64>) -> Array1<f64> {
    let logits = v.dot(&x);
    logits
        .axis_iter(Axis(1))
        .map(|col| h1(&col.to_vec()))
        .collect()
}

/// Linear-CE block `(1/N) X diag(p₁(1 − p₁)) Xᵀ` at LeCun-initialized weights
/// against its decoupled version in which the softmax weights no longer
/// depend on the data they multiply.
pub fn lindeberg_decoupling_check(
    d: usize,
    n: usize,
    classes: usize,
    policy: DecouplingPolicy,
    rng: &mut RngStream,
) -> Result<DecouplingReport, SpectralError> {
    check_size(d, n)?;
    if classes < 2 {
        return Err(SpectralError::InvalidParameter(format!("C = {classes}")));
    }
    let x = gaussian(d, n, rng);
    let v = gaussian(classes, d, rng) / (d as f64).sqrt();
    let x_copy = gaussian(d, n, rng);
    let weights = softmax_weights(&v, x.view());
    let truth = weighted_covariance(x.view(), &weights);
    let surrogate = match policy {
        DecouplingPolicy::SharedWeights => weighted_covariance(x_copy.view(), &weights),
        DecouplingPolicy::Fresh => {
            let copy_weights = softmax_weights(&v, x_copy.view());
            weighted_covariance(x.view(), &copy_weights)
        }
    };
    report(d, n, format!("lindeberg_C{classes}"), policy, &truth, &surrogate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identity_spectrum() {
        let s = empirical_spectrum(Array2::<f64>::eye(5).view(), "eye").unwrap();
        assert_eq!(s.eigenvalues, vec![1.0; 5]);
    }

    #[test]
    fn asymmetric_rejected() {
        let m = array![[1.0, 2.0], [0.0, 1.0]];
        assert!(matches!(
            empirical_spectrum(m.view(), "bad"),
            Err(SpectralError::NonSymmetric { .. })
        ));
    }

    #[test]
    fn point_mass_at_zero_gives_minus_inverse_z() {
        let z = Complex64::new(0.3, 0.7);
        let p = solve_generalized_mp(1.0, &MeasureRep::point(0.0), z).unwrap();
        assert!((p.s() + 1.0 / z).norm() < 1e-15);
    }

    #[test]
    fn unit_point_mass_matches_mp() {
        for gamma in [0.5, 1.0, 2.0] {
            let z = Complex64::new(2.0, 1.0);
            let p = solve_generalized_mp(gamma, &MeasureRep::point(1.0), z).unwrap();
            let want = mp_closed_form(gamma, 1.0 / gamma, z);
            assert!((p.s() - want).norm() < 1e-10, "gamma {gamma}");
            assert!(p.residual < 1e-10);
        }
    }

    #[test]
    fn mp_small_ratio_limit() {
        let z = Complex64::new(0.5, 0.2);
        let s = mp_closed_form(1e-9, 2.0, z);
        assert!((s - 1.0 / (2.0 - z)).norm() < 1e-6);
    }

    #[test]
    fn moments_of_point_mass_at_zero() {
        let m = moments_from_stieltjes(|z| Ok(-1.0 / z), 3).unwrap();
        assert!(m.iter().all(|v| v.abs() < 1e-12), "{m:?}");
    }

    #[test]
    fn moment_order_validated() {
        assert!(moments_from_stieltjes(|z| Ok(-1.0 / z), 4).is_err());
    }

    #[test]
    fn measure_weights_validated() {
        assert!(MeasureRep::atoms(vec![(0.0, 0.5), (1.0, 0.4)]).is_err());
        assert!(MeasureRep::atoms(vec![(0.0, -0.5), (1.0, 1.5)]).is_err());
        assert!(MeasureRep::atoms(vec![(0.0, 0.5), (1.0, 0.5)]).is_ok());
    }

    #[test]
    fn small_sizes_rejected() {
        let mut rng = RngStream::new(0, "small");
        assert!(bernoulli_decoupling_check(10, 10, Pair::Ii, DecouplingPolicy::default(), &mut rng).is_err());
        assert!(lindeberg_decoupling_check(60, 60, 1, DecouplingPolicy::default(), &mut rng).is_err());
    }
}
