//! Gauss–Legendre rules and tensor-product integration on rectangles.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum QuadratureError {
    #[error("no convergence to {tol:e} after {nodes} nodes per axis (last change {change:e})")]
    NonConvergence { nodes: usize, tol: f64, change: f64 },
}

/// Nodes and weights of the `n`-point Gauss–Legendre rule on `[-1, 1]`.
///
/// Roots of `P_n` by Newton iteration from the Chebyshev-like initial guess.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n > 0, "at least one node");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { x } else { p1 };
            let pn1 = if n == 1 { 1.0 } else { p0 };
            dp = nf * (x * pn - pn1) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

/// Tensor-product rule with `n` nodes per axis on `[0, t]²`.
pub fn integrate_square<F: Fn(f64, f64) -> f64>(f: &F, t: f64, n: usize) -> f64 {
    let (x, w) = gauss_legendre(n);
    let half = 0.5 * t;
    let pts: Vec<(f64, f64)> = x.iter().zip(&w).map(|(&xi, &wi)| (half * (xi + 1.0), half * wi)).collect();
    pts.iter()
        .map(|&(xa, wa)| wa * pts.iter().map(|&(xb, wb)| wb * f(xa, xb)).sum::<f64>())
        .sum()
}

/// Tensor rule on `[0, t]²`, doubling the node count from `n0` until successive
/// values differ by less than `tol` (relative).
pub fn integrate_square_adaptive<F: Fn(f64, f64) -> f64>(
    f: &F,
    t: f64,
    n0: usize,
    tol: f64,
) -> Result<(f64, usize), QuadratureError> {
    let mut n = n0;
    let mut prev = integrate_square(f, t, n);
    let mut change = f64::INFINITY;
    for _ in 0..4 {
        n *= 2;
        let next = integrate_square(f, t, n);
        change = (next - prev).abs() / next.abs().max(f64::MIN_POSITIVE);
        if change < tol {
            return Ok((next, n));
        }
        prev = next;
    }
    Err(QuadratureError::NonConvergence { nodes: n, tol, change })
}

/// One-dimensional rule with `n` nodes on `[a, b]`.
pub fn integrate_interval<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    let (x, w) = gauss_legendre(n);
    let half = 0.5 * (b - a);
    x.iter()
        .zip(&w)
        .map(|(&xi, &wi)| wi * f(a + half * (xi + 1.0)))
        .sum::<f64>()
        * half
}
