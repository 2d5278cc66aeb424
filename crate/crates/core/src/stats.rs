//! Small statistics toolkit: moment accumulators, KS distances, least squares.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::rng::RngStream;

/// Running power sums `Σ t^k`, `k = 1..4`, mergeable across chunks.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PowerSums {
    pub n: u64,
    pub s: [f64; 4],
}

impl PowerSums {
    pub fn push(&mut self, t: f64) {
        let t2 = t * t;
        self.n += 1;
        self.s[0] += t;
        self.s[1] += t2;
        self.s[2] += t2 * t;
        self.s[3] += t2 * t2;
    }

    pub fn merge(&mut self, other: &Self) {
        self.n += other.n;
        for k in 0..4 {
            self.s[k] += other.s[k];
        }
    }

    /// Raw moment `E[t^k]`, `k = 1..4`.
    pub fn moment(&self, k: usize) -> f64 {
        self.s[k - 1] / self.n as f64
    }

    pub fn mean(&self) -> f64 {
        self.moment(1)
    }

    pub fn variance(&self) -> f64 {
        let n = self.n as f64;
        let m = self.mean();
        ((self.s[1] - n * m * m) / (n - 1.0)).max(0.0)
    }

    pub fn std_error(&self) -> f64 {
        (self.variance() / self.n as f64).sqrt()
    }
}

/// Mean, sample standard deviation and standard error of a slice.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub std_error: f64,
    pub n: usize,
}

pub fn summarize(xs: &[f64]) -> Summary {
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    Summary {
        mean,
        std: var.sqrt(),
        std_error: (var / n as f64).sqrt(),
        n,
    }
}

/// Largest gap between the empirical CDFs of two samples.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut gap: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let t = a[i].min(b[j]);
        while i < a.len() && a[i] <= t {
            i += 1;
        }
        while j < b.len() && b[j] <= t {
            j += 1;
        }
        gap = gap.max((i as f64 / na - j as f64 / nb).abs());
    }
    gap
}

/// Kolmogorov distance between the empirical CDF of `xs` and a continuous `cdf`.
pub fn ks_against<F: Fn(f64) -> f64>(xs: &[f64], cdf: F) -> f64 {
    let mut xs = xs.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter().enumerate().fold(0.0, |gap: f64, (k, &x)| {
        let f = cdf(x);
        gap.max(f - k as f64 / n).max((k + 1) as f64 / n - f)
    })
}

pub fn std_normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

/// Ordinary least squares `y ≈ intercept + slope · x`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_stderr: f64,
}

pub fn ols(x: &[f64], y: &[f64]) -> Option<LineFit> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let slope_stderr = if n > 2 {
        let rss: f64 = x
            .iter()
            .zip(y)
            .map(|(a, b)| (b - intercept - slope * a).powi(2))
            .sum();
        (rss / (nf - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Some(LineFit {
        slope,
        intercept,
        slope_stderr,
    })
}

/// Samples per work unit in chunked Monte Carlo; fixed so results do not
/// depend on the thread count.
pub const MC_CHUNK: u64 = 8192;

/// Runs `f(stream, count)` over `ceil(n / chunk)` chunks, each with its own child
/// stream, and returns the per-chunk results in chunk order.
pub fn par_chunks<T, F>(n: u64, chunk: u64, rng: &RngStream, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(RngStream, u64) -> T + Sync + Send,
{
    let chunks = n.div_ceil(chunk);
    (0..chunks)
        .into_par_iter()
        .map(|k| {
            let count = chunk.min(n - k * chunk);
            f(rng.nth(k), count)
        })
        .collect()
}
