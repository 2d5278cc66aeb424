//! Forward pass, softmax, MSE / cross-entropy losses and their gradients.
//!
//! MSE is `(1/N) Σ_n ‖f(x_n) − y_n‖²`; every derivative carries the factor 2
//! that comes with it.

use ndarray::{Array2, ArrayView2, Axis, Zip};
use thiserror::Error;

use crate::data::Dataset;
use crate::params::{LossKind, ModelParams};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite logit in column {0}")]
    NonFinite(usize),
}

/// Hidden-layer quantities of the mlp: `Z = W X`, `A = relu(Z)`, `mask = 1(Z > 0)`.
#[derive(Clone, Debug)]
pub struct Activations {
    pub z: Array2<f64>,
    pub a: Array2<f64>,
    pub mask: Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: Array2<f64>,
    pub activations: Option<Activations>,
}

/// Column-stochastic `C × N` matrix with `P[i, n] = p_{n,i}`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxProbs(Array2<f64>);

impl SoftmaxProbs {
    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

fn check_shapes(params: &ModelParams, data: &Dataset) -> Result<(), ModelError> {
    if params.input_dim() != data.dim() {
        return Err(ModelError::ShapeMismatch(format!(
            "model expects d = {}, data has d = {}",
            params.input_dim(),
            data.dim()
        )));
    }
    if params.classes() != data.classes() {
        return Err(ModelError::ShapeMismatch(format!(
            "model has C = {}, data has C = {}",
            params.classes(),
            data.classes()
        )));
    }
    Ok(())
}

pub fn forward(params: &ModelParams, data: &Dataset) -> Result<Forward, ModelError> {
    check_shapes(params, data)?;
    let x = data.x();
    match params.w() {
        None => Ok(Forward {
            logits: params.v().dot(&x),
            activations: None,
        }),
        Some(w) => {
            let z = w.dot(&x);
            let mask = z.mapv(|t| if t > 0.0 { 1.0 } else { 0.0 });
            let a = &z * &mask;
            Ok(Forward {
                logits: params.v().dot(&a),
                activations: Some(Activations { z, a, mask }),
            })
        }
    }
}

/// Max-subtracted softmax over each column.
pub fn softmax(logits: ArrayView2<'_, f64>) -> Result<SoftmaxProbs, ModelError> {
    let mut p = logits.to_owned();
    for (n, mut col) in p.axis_iter_mut(Axis(1)).enumerate() {
        let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() || col.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite(n));
        }
        col.mapv_inplace(|v| (v - max).exp());
        let s = col.sum();
        col.mapv_inplace(|v| v / s);
    }
    Ok(SoftmaxProbs(p))
}

/// `log Σ_i exp(t_i)` for one column.
fn log_sum_exp<'a>(col: impl Iterator<Item = &'a f64> + Clone) -> f64 {
    let max = col.clone().copied().fold(f64::NEG_INFINITY, f64::max);
    max + col.map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn loss(params: &ModelParams, data: &Dataset, kind: LossKind) -> Result<f64, ModelError> {
    let fwd = forward(params, data)?;
    Ok(loss_from_logits(fwd.logits.view(), data, kind))
}

pub(crate) fn loss_from_logits(logits: ArrayView2<'_, f64>, data: &Dataset, kind: LossKind) -> f64 {
    let n = data.samples() as f64;
    match kind {
        LossKind::Mse => {
            let diff = &logits - &data.onehot();
            diff.iter().map(|v| v * v).sum::<f64>() / n
        }
        LossKind::Ce => {
            logits
                .axis_iter(Axis(1))
                .zip(data.labels())
                .map(|(col, &y)| log_sum_exp(col.iter()) - col[y])
                .sum::<f64>()
                / n
        }
    }
}

/// `∂ℓ/∂logits`, a `C × N` matrix.
pub(crate) fn logit_residual(
    logits: ArrayView2<'_, f64>,
    data: &Dataset,
    kind: LossKind,
) -> Result<Array2<f64>, ModelError> {
    let n = data.samples() as f64;
    let y = data.onehot();
    Ok(match kind {
        LossKind::Mse => (&logits - &y) * (2.0 / n),
        LossKind::Ce => (softmax(logits)?.0 - &y) / n,
    })
}

/// Exact gradient of [`loss`], shaped like `params`.
pub fn grad(params: &ModelParams, data: &Dataset, kind: LossKind) -> Result<ModelParams, ModelError> {
    let fwd = forward(params, data)?;
    let g = logit_residual(fwd.logits.view(), data, kind)?;
    match (&fwd.activations, params.w()) {
        (None, _) => {
            let dv = g.dot(&data.x().t());
            Ok(ModelParams::linear(dv).expect("shape preserved"))
        }
        (Some(act), Some(_)) => {
            let dv = g.dot(&act.a.t());
            let mut dz = params.v().t().dot(&g);
            Zip::from(&mut dz).and(&act.mask).for_each(|d, &m| *d *= m);
            let dw = dz.dot(&data.x().t());
            Ok(ModelParams::mlp(dw, dv).expect("shape preserved"))
        }
        (Some(_), None) => unreachable!("activations only exist for mlp"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gaussian_dataset, LabelPolicy};
    use crate::params::{lecun_init, ModelKind};
    use crate::rng::RngStream;
    use ndarray::{array, Array1};

    fn instance(kind: ModelKind, seed: u64) -> (ModelParams, Dataset) {
        let mut rng = RngStream::new(seed, "models");
        let data = gaussian_dataset(6, 8, 4, LabelPolicy::Uniform, &mut rng).unwrap();
        let params = lecun_init(kind, 6, 3, 4, &mut rng).unwrap();
        (params, data)
    }

    #[test]
    fn zero_linear_weights_give_zero_logits() {
        let (_, data) = instance(ModelKind::Linear, 0);
        let p = ModelParams::linear(Array2::zeros((4, 6))).unwrap();
        assert!(forward(&p, &data).unwrap().logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_hidden_layer_is_relu() {
        let w = Array2::eye(3);
        let v = Array2::ones((2, 3));
        let p = ModelParams::mlp(w, v).unwrap();
        let data = Dataset::new(array![[1.0], [-1.0], [2.0]], vec![0], 2).unwrap();
        let act = forward(&p, &data).unwrap().activations.unwrap();
        assert_eq!(act.a.column(0).to_vec(), vec![1.0, 0.0, 2.0]);
        assert_eq!(act.mask.column(0).to_vec(), vec![1.0, 0.0, 1.0]);
    }

    #[test]
    fn logits_match_scalar_loops() {
        let (p, data) = instance(ModelKind::Mlp, 11);
        let logits = forward(&p, &data).unwrap().logits;
        let (w, v, x) = (p.w().unwrap(), p.v(), data.x());
        for n in 0..8 {
            for c in 0..4 {
                let mut acc = 0.0;
                for i in 0..3 {
                    let mut z = 0.0;
                    for r in 0..6 {
                        z += w[[i, r]] * x[[r, n]];
                    }
                    acc += v[[c, i]] * z.max(0.0);
                }
                assert!((acc - logits[[c, n]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_softmax_and_ce_is_log_c() {
        let p = softmax(Array2::zeros((4, 3)).view()).unwrap();
        assert!(p.view().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let (_, data) = instance(ModelKind::Linear, 1);
        let zero = ModelParams::linear(Array2::zeros((4, 6))).unwrap();
        assert!((loss(&zero, &data, LossKind::Ce).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!((loss(&zero, &data, LossKind::Mse).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_saturates_and_rejects_nan() {
        let p = softmax(array![[800.0], [0.0]].view()).unwrap();
        assert!((p.view()[[0, 0]] - 1.0).abs() < 1e-15);
        assert!(softmax(array![[f64::NAN], [0.0]].view()).is_err());
    }

    #[test]
    fn losses_match_scalar_loops() {
        let (p, data) = instance(ModelKind::Linear, 2);
        let logits = forward(&p, &data).unwrap().logits;
        let mut ce = 0.0;
        let mut mse = 0.0;
        for n in 0..8 {
            let z: f64 = (0..4).map(|c| logits[[c, n]].exp()).sum();
            ce -= (logits[[data.labels()[n], n]].exp() / z).ln();
            for c in 0..4 {
                let t = if c == data.labels()[n] { 1.0 } else { 0.0 };
                mse += (logits[[c, n]] - t).powi(2);
            }
        }
        assert!((loss(&p, &data, LossKind::Ce).unwrap() - ce / 8.0).abs() < 1e-12);
        assert!((loss(&p, &data, LossKind::Mse).unwrap() - mse / 8.0).abs() < 1e-12);
    }

    #[test]
    fn mse_gradient_at_zero() {
        let (_, data) = instance(ModelKind::Linear, 3);
        let zero = ModelParams::linear(Array2::zeros((4, 6))).unwrap();
        let g = grad(&zero, &data, LossKind::Mse).unwrap();
        let expect = data.onehot().dot(&data.x().t()) * (-2.0 / 8.0);
        assert!((g.v() - &expect).iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn symmetric_binary_ce_gradient_is_antisymmetric() {
        let (_, data6) = instance(ModelKind::Linear, 4);
        let mut rng = RngStream::new(4, "bin");
        let data = gaussian_dataset(6, 8, 2, LabelPolicy::Uniform, &mut rng).unwrap();
        let mut v = Array2::zeros((2, 6));
        for r in 0..6 {
            v[[0, r]] = data6.x()[[r, 0]];
            v[[1, r]] = -data6.x()[[r, 0]];
        }
        let g = grad(&ModelParams::linear(v).unwrap(), &data, LossKind::Ce).unwrap();
        let s = &g.v().row(0) + &g.v().row(1);
        assert!(s.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn directional_derivative_matches_central_difference() {
        for kind in [ModelKind::Linear, ModelKind::Mlp] {
            for loss_kind in [LossKind::Mse, LossKind::Ce] {
                let (p, data) = instance(kind, 5);
                let g = grad(&p, &data, loss_kind).unwrap().to_flat();
                let theta = p.to_flat();
                let mut rng = RngStream::new(9, "dir");
                for _ in 0..20 {
                    let mut u = Array1::zeros(theta.len());
                    u.iter_mut().for_each(|v| *v = rng.normal());
                    let h = 1e-5;
                    let plus = p.with_flat((&theta + &(&u * h)).as_slice().unwrap()).unwrap();
                    let minus = p.with_flat((&theta - &(&u * h)).as_slice().unwrap()).unwrap();
                    let fd = (loss(&plus, &data, loss_kind).unwrap()
                        - loss(&minus, &data, loss_kind).unwrap())
                        / (2.0 * h);
                    let an = g.dot(&u);
                    assert!((an - fd).abs() / (an.abs() + 1e-12) < 1e-5, "{kind} {loss_kind}: {an} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn shape_mismatch_reported() {
        let (p, _) = instance(ModelKind::Linear, 6);
        let mut rng = RngStream::new(0, "other");
        let data = gaussian_dataset(5, 8, 4, LabelPolicy::Uniform, &mut rng).unwrap();
        assert!(matches!(forward(&p, &data), Err(ModelError::ShapeMismatch(_))));
    }
}
