//! Model parameters, their flat layout, and LeCun initialization.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::RngStream;

#[derive(Debug, Error, PartialEq)]
pub enum ParamError {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("flat vector has length {got}, layout needs {expected}")]
    LengthMismatch { got: usize, expected: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Linear,
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    Ce,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Linear => "linear",
            ModelKind::Mlp => "mlp",
        })
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Mse => "mse",
            LossKind::Ce => "ce",
        })
    }
}

/// Weights of `f(x) = V x` (linear) or `f(x) = V relu(W x)` (mlp).
///
/// `W` is `m × d`, `V` is `C × d` (linear) or `C × m` (mlp). Rows are the
/// per-neuron / per-class parameter groups `w_i` and `v_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    w: Option<Array2<f64>>,
    v: Array2<f64>,
}

impl ModelParams {
    pub fn linear(v: Array2<f64>) -> Result<Self, ParamError> {
        if v.nrows() < 2 || v.ncols() == 0 {
            return Err(ParamError::InvalidDimension(format!("V is {:?}", v.dim())));
        }
        Ok(Self { w: None, v })
    }

    pub fn mlp(w: Array2<f64>, v: Array2<f64>) -> Result<Self, ParamError> {
        if w.nrows() == 0 || w.ncols() == 0 || v.nrows() < 2 || v.ncols() != w.nrows() {
            return Err(ParamError::InvalidDimension(format!(
                "W is {:?}, V is {:?}",
                w.dim(),
                v.dim()
            )));
        }
        Ok(Self { w: Some(w), v })
    }

    pub fn kind(&self) -> ModelKind {
        if self.w.is_some() {
            ModelKind::Mlp
        } else {
            ModelKind::Linear
        }
    }

    pub fn w(&self) -> Option<&Array2<f64>> {
        self.w.as_ref()
    }

    pub fn v(&self) -> &Array2<f64> {
        &self.v
    }

    pub fn v_mut(&mut self) -> &mut Array2<f64> {
        &mut self.v
    }

    pub fn w_mut(&mut self) -> Option<&mut Array2<f64>> {
        self.w.as_mut()
    }

    pub fn classes(&self) -> usize {
        self.v.nrows()
    }

    /// Input dimension `d`.
    pub fn input_dim(&self) -> usize {
        match &self.w {
            Some(w) => w.ncols(),
            None => self.v.ncols(),
        }
    }

    /// Hidden width `m` (`None` for linear models).
    pub fn hidden(&self) -> Option<usize> {
        self.w.as_ref().map(|w| w.nrows())
    }

    pub fn len(&self) -> usize {
        self.w.as_ref().map_or(0, |w| w.len()) + self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flatten as `[w_1 … w_m | v_1 … v_C]` (rows in order).
    pub fn to_flat(&self) -> Array1<f64> {
        let mut out = Vec::with_capacity(self.len());
        if let Some(w) = &self.w {
            out.extend(w.iter().copied());
        }
        out.extend(self.v.iter().copied());
        Array1::from(out)
    }

    /// Parameters with the same shapes as `self`, filled from a flat vector.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self, ParamError> {
        if flat.len() != self.len() {
            return Err(ParamError::LengthMismatch {
                got: flat.len(),
                expected: self.len(),
            });
        }
        let split = self.w.as_ref().map_or(0, |w| w.len());
        let w = self.w.as_ref().map(|w| {
            Array2::from_shape_vec(w.dim(), flat[..split].to_vec()).expect("row-major shape")
        });
        let v = Array2::from_shape_vec(self.v.dim(), flat[split..].to_vec()).expect("row-major shape");
        Ok(Self { w, v })
    }
}

/// Gaussian weights with variance `1 / fan_in`.
pub fn lecun_init(
    kind: ModelKind,
    d: usize,
    m: usize,
    classes: usize,
    rng: &mut RngStream,
) -> Result<ModelParams, ParamError> {
    if d == 0 || classes < 2 || (kind == ModelKind::Mlp && m == 0) {
        return Err(ParamError::InvalidDimension(format!(
            "d = {d}, m = {m}, C = {classes}"
        )));
    }
    let mut gauss = |rows: usize, cols: usize| {
        let scale = 1.0 / (cols as f64).sqrt();
        let mut buf = vec![0.0; rows * cols];
        rng.fill_normal(&mut buf);
        buf.iter_mut().for_each(|v| *v *= scale);
        Array2::from_shape_vec((rows, cols), buf).expect("shape matches buffer")
    };
    match kind {
        ModelKind::Linear => ModelParams::linear(gauss(classes, d)),
        ModelKind::Mlp => {
            let w = gauss(m, d);
            let v = gauss(classes, m);
            ModelParams::mlp(w, v)
        }
    }
}
