//! Synthetic datasets: i.i.d. Gaussian inputs and clustered inputs.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::RngStream;

#[derive(Debug, Error, PartialEq)]
pub enum DataError {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("invalid cluster config: {0}")]
    InvalidConfig(String),
    #[error("label {label} at sample {index} is not below class count {classes}")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        classes: usize,
    },
}

/// How labels are attached to Gaussian samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelPolicy {
    /// Each label drawn uniformly from `0..C`.
    Uniform,
    /// Consecutive equal-size runs: sample `n` gets label `n * C / N`.
    Blocked,
}

/// Inputs stored column-wise (`d × N`) with integer labels and one-hot targets (`C × N`).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    x: Array2<f64>,
    labels: Vec<usize>,
    onehot: Array2<f64>,
}

impl Dataset {
    pub fn new(x: Array2<f64>, labels: Vec<usize>, classes: usize) -> Result<Self, DataError> {
        let (d, n) = x.dim();
        if d == 0 || n == 0 {
            return Err(DataError::InvalidDimension(format!("X is {d}x{n}")));
        }
        if classes < 2 {
            return Err(DataError::InvalidDimension(format!("C = {classes}, need C >= 2")));
        }
        if labels.len() != n {
            return Err(DataError::InvalidDimension(format!(
                "{} labels for {n} samples",
                labels.len()
            )));
        }
        let mut onehot = Array2::zeros((classes, n));
        for (index, &label) in labels.iter().enumerate() {
            if label >= classes {
                return Err(DataError::LabelOutOfRange {
                    index,
                    label,
                    classes,
                });
            }
            onehot[[label, index]] = 1.0;
        }
        Ok(Self { x, labels, onehot })
    }

    pub fn dim(&self) -> usize {
        self.x.nrows()
    }

    pub fn samples(&self) -> usize {
        self.x.ncols()
    }

    pub fn classes(&self) -> usize {
        self.onehot.nrows()
    }

    pub fn x(&self) -> ArrayView2<'_, f64> {
        self.x.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn onehot(&self) -> ArrayView2<'_, f64> {
        self.onehot.view()
    }

    /// Same labels, inputs multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            x: &self.x * s,
            labels: self.labels.clone(),
            onehot: self.onehot.clone(),
        }
    }
}

/// Standard Gaussian inputs, `d × N`.
pub fn gaussian_dataset(
    d: usize,
    n: usize,
    classes: usize,
    policy: LabelPolicy,
    rng: &mut RngStream,
) -> Result<Dataset, DataError> {
    if d == 0 || n == 0 || classes < 2 {
        return Err(DataError::InvalidDimension(format!(
            "d = {d}, N = {n}, C = {classes}"
        )));
    }
    let mut buf = vec![0.0; d * n];
    rng.fill_normal(&mut buf);
    let x = Array2::from_shape_vec((d, n), buf).expect("shape matches buffer");
    let labels = match policy {
        LabelPolicy::Uniform => (0..n).map(|_| rng.below(classes)).collect(),
        LabelPolicy::Blocked => (0..n).map(|i| i * classes / n).collect(),
    };
    Dataset::new(x, labels, classes)
}

/// Parameters of the clustered generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub n_total: usize,
    pub n_classes: usize,
    pub n_clusters: usize,
    pub d: usize,
    pub noise: f64,
}

impl ClusterConfig {
    pub fn new(n_total: usize, n_classes: usize, n_clusters: usize, d: usize) -> Self {
        Self {
            n_total,
            n_classes,
            n_clusters,
            d,
            noise: 0.05,
        }
    }
}

/// Gaussian blobs around cluster centers, `n_clusters / n_classes` clusters per class.
///
/// In two dimensions the centers sit on a circle of radius 5 at angles
/// `2π k / n_clusters`, `k = 1, 2, ...`; otherwise they are uniform on the unit sphere.
/// Samples left over by the integer divisions are dropped.
pub fn cluster_dataset(cfg: &ClusterConfig, rng: &mut RngStream) -> Result<Dataset, DataError> {
    if cfg.n_classes < 2 || cfg.n_clusters == 0 {
        return Err(DataError::InvalidConfig(format!(
            "{} classes, {} clusters",
            cfg.n_classes, cfg.n_clusters
        )));
    }
    if cfg.n_classes > cfg.n_clusters {
        return Err(DataError::InvalidConfig(format!(
            "{} classes exceed {} clusters",
            cfg.n_classes, cfg.n_clusters
        )));
    }
    if cfg.d < 2 {
        return Err(DataError::InvalidDimension(format!("d = {}, need d >= 2", cfg.d)));
    }
    let per_class = cfg.n_clusters / cfg.n_classes;
    let per_cluster = cfg.n_total / cfg.n_clusters;
    if per_cluster == 0 {
        return Err(DataError::InvalidConfig(format!(
            "{} samples cannot fill {} clusters",
            cfg.n_total, cfg.n_clusters
        )));
    }
    let n = cfg.n_classes * per_class * per_cluster;
    let mut x = Array2::zeros((cfg.d, n));
    let mut labels = Vec::with_capacity(n);
    let mut col = 0;
    let mut k = 0;
    for class in 0..cfg.n_classes {
        for _ in 0..per_class {
            k += 1;
            let center = cluster_center(cfg.d, k, cfg.n_clusters, rng);
            for _ in 0..per_cluster {
                for r in 0..cfg.d {
                    x[[r, col]] = center[r] + cfg.noise * rng.normal();
                }
                labels.push(class);
                col += 1;
            }
        }
    }
    Dataset::new(x, labels, cfg.n_classes)
}

fn cluster_center(d: usize, k: usize, n_clusters: usize, rng: &mut RngStream) -> Array1<f64> {
    if d == 2 {
        let angle = 2.0 * std::f64::consts::PI * k as f64 / n_clusters as f64;
        return Array1::from(vec![5.0 * angle.cos(), 5.0 * angle.sin()]);
    }
    loop {
        let mut c = Array1::zeros(d);
        c.iter_mut().for_each(|v| *v = rng.normal());
        let norm = c.dot(&c).sqrt();
        if norm > 0.0 {
            return c / norm;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smallest_instance() {
        let mut rng = RngStream::new(0, "data");
        let ds = gaussian_dataset(1, 1, 2, LabelPolicy::Uniform, &mut rng).unwrap();
        assert_eq!(ds.x().dim(), (1, 1));
        assert_eq!(ds.onehot().sum(), 1.0);
    }

    #[test]
    fn onehot_matches_labels() {
        let mut rng = RngStream::new(4, "data");
        let ds = gaussian_dataset(3, 50, 7, LabelPolicy::Uniform, &mut rng).unwrap();
        for (n, &y) in ds.labels().iter().enumerate() {
            let col = ds.onehot().column(n).to_owned();
            assert_eq!(col.sum(), 1.0);
            assert_eq!(col[y], 1.0);
        }
    }

    #[test]
    fn blocked_labels_cover_all_classes() {
        let mut rng = RngStream::new(0, "data");
        let ds = gaussian_dataset(2, 12, 4, LabelPolicy::Blocked, &mut rng).unwrap();
        assert_eq!(ds.labels(), &[0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3]);
    }

    #[test]
    fn rejects_bad_dimensions() {
        let mut rng = RngStream::new(0, "data");
        assert!(gaussian_dataset(0, 3, 2, LabelPolicy::Uniform, &mut rng).is_err());
        assert!(gaussian_dataset(3, 3, 1, LabelPolicy::Uniform, &mut rng).is_err());
    }

    #[test]
    fn trace_of_sample_covariance_near_d() {
        let mut rng = RngStream::new(7, "data");
        let (d, n) = (64, 100);
        let ds = gaussian_dataset(d, n, 100, LabelPolicy::Uniform, &mut rng).unwrap();
        let trace: f64 = ds.x().iter().map(|v| v * v).sum::<f64>() / n as f64;
        assert!((trace - d as f64).abs() / (d as f64) < 4.0 / (n as f64).sqrt());
    }

    #[test]
    fn planar_centers_on_radius_five_circle() {
        let mut rng = RngStream::new(0, "clusters");
        let mut cfg = ClusterConfig::new(4, 2, 2, 2);
        cfg.noise = 0.0;
        let ds = cluster_dataset(&cfg, &mut rng).unwrap();
        let x = ds.x();
        // k = 1 -> angle pi, k = 2 -> angle 2 pi
        assert!((x[[0, 0]] + 5.0).abs() < 1e-12 && x[[1, 0]].abs() < 1e-12);
        assert!((x[[0, 2]] - 5.0).abs() < 1e-12 && x[[1, 2]].abs() < 1e-12);
        assert_eq!(ds.labels(), &[0, 0, 1, 1]);
    }

    #[test]
    fn high_dim_centers_are_unit() {
        let mut rng = RngStream::new(0, "clusters");
        let mut cfg = ClusterConfig::new(1000, 2, 100, 64);
        cfg.noise = 0.0;
        let ds = cluster_dataset(&cfg, &mut rng).unwrap();
        for col in ds.x().columns() {
            assert!((col.dot(&col).sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn more_classes_than_clusters_rejected() {
        let mut rng = RngStream::new(0, "clusters");
        let cfg = ClusterConfig::new(100, 5, 4, 3);
        assert!(matches!(
            cluster_dataset(&cfg, &mut rng),
            Err(DataError::InvalidConfig(_))
        ));
    }
}
