//! Closed-form Hessian blocks, full-Hessian assembly and a finite-difference oracle.
//!
//! Every block is an `N`-sum of weighted outer products, so each one is built as a
//! single weighted Gram product `X diag(w) Yᵀ`.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::models::{self, ModelError};
use crate::params::{LossKind, ModelKind, ModelParams};

/// Default cap on the side length of a materialized full Hessian.
pub const DEFAULT_SIDE_CAP: usize = 5000;
/// Largest parameter count accepted by the finite-difference oracle.
pub const FD_PARAM_CAP: usize = 2000;

#[derive(Debug, Error, PartialEq)]
pub enum HessianError {
    #[error("{pair:?} block index ({i}, {j}) out of range")]
    IndexOutOfRange { pair: PairKind, i: usize, j: usize },
    #[error("{pair:?} blocks do not exist for a {kind} model")]
    WrongModel { pair: PairKind, kind: ModelKind },
    #[error("full Hessian side {side} exceeds cap {cap}")]
    BudgetExceeded { side: usize, cap: usize },
    #[error("finite-difference oracle needs at most {cap} parameters, model has {count}")]
    OracleBudget { count: usize, cap: usize },
    #[error("pre-activation {margin:e} is within the step of a ReLU kink")]
    KinkTooClose { margin: f64 },
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Which parameter groups a block couples. For linear models only `Vv` exists.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    Ww,
    Vv,
    Wv,
}

/// One block `∂²ℓ / ∂θ_i ∂θ_jᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct HessianBlock {
    pub loss: LossKind,
    pub pair: PairKind,
    pub i: usize,
    pub j: usize,
    pub m: Array2<f64>,
}

impl HessianBlock {
    pub fn fro_sq(&self) -> f64 {
        fro_sq(self.m.view())
    }
}

pub fn fro_sq(m: ArrayView2<'_, f64>) -> f64 {
    m.iter().map(|v| v * v).sum()
}

/// `Σ_n w_n a_n b_nᵀ` for column-sample matrices `a` (`p × N`) and `b` (`q × N`).
pub fn weighted_gram(a: ArrayView2<'_, f64>, w: ArrayView1<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    let aw = &a * &w.insert_axis(Axis(0));
    aw.dot(&b.t())
}

/// Forward quantities shared by all blocks of one `(params, data, loss)` triple.
pub struct HessianContext<'a> {
    params: &'a ModelParams,
    data: &'a Dataset,
    loss: LossKind,
    probs: Option<Array2<f64>>,
    act: Option<models::Activations>,
    /// `∂ℓ/∂logits`, already divided by `N`.
    residual: Array2<f64>,
    /// `Vᵀ P`: `pv[i, n] = Σ_c p_{n,c} v_{c,i}` (mlp, CE).
    pv: Option<Array2<f64>>,
}

impl<'a> HessianContext<'a> {
    pub fn new(params: &'a ModelParams, data: &'a Dataset, loss: LossKind) -> Result<Self, HessianError> {
        let fwd = models::forward(params, data)?;
        let residual = models::logit_residual(fwd.logits.view(), data, loss)?;
        let probs = match loss {
            LossKind::Ce => Some(models::softmax(fwd.logits.view())?.into_inner()),
            LossKind::Mse => None,
        };
        let pv = match (&probs, params.kind()) {
            (Some(p), ModelKind::Mlp) => Some(params.v().t().dot(p)),
            _ => None,
        };
        Ok(Self {
            params,
            data,
            loss,
            probs,
            act: fwd.activations,
            residual,
            pv,
        })
    }

    pub fn params(&self) -> &ModelParams {
        self.params
    }

    pub fn loss(&self) -> LossKind {
        self.loss
    }

    fn inv_n(&self) -> f64 {
        1.0 / self.data.samples() as f64
    }

    fn check(&self, pair: PairKind, i: usize, j: usize) -> Result<(), HessianError> {
        let kind = self.params.kind();
        let c = self.params.classes();
        let m = self.params.hidden().unwrap_or(0);
        let (ri, rj) = match (kind, pair) {
            (ModelKind::Linear, PairKind::Vv) => (c, c),
            (ModelKind::Linear, _) => return Err(HessianError::WrongModel { pair, kind }),
            (ModelKind::Mlp, PairKind::Ww) => (m, m),
            (ModelKind::Mlp, PairKind::Vv) => (c, c),
            (ModelKind::Mlp, PairKind::Wv) => (m, c),
        };
        if i >= ri || j >= rj {
            return Err(HessianError::IndexOutOfRange { pair, i, j });
        }
        Ok(())
    }

    /// Features multiplying the output layer: `X` (linear) or `relu(W X)` (mlp).
    fn features(&self) -> ArrayView2<'_, f64> {
        match &self.act {
            Some(act) => act.a.view(),
            None => self.data.x(),
        }
    }

    /// Output-layer curvature weights `∂²ℓ/∂f_i∂f_j` per sample (times `N`).
    fn output_weights(&self, i: usize, j: usize) -> Option<Array1<f64>> {
        match &self.probs {
            None => (i == j).then(|| Array1::from_elem(self.data.samples(), 2.0)),
            Some(p) => {
                let (pi, pj) = (p.row(i), p.row(j));
                let delta = if i == j { 1.0 } else { 0.0 };
                Some(ndarray::Zip::from(&pi).and(&pj).map_collect(|&a, &b| a * (delta - b)))
            }
        }
    }

    /// Block between output groups `v_i` and `v_j`.
    pub fn vv(&self, i: usize, j: usize) -> Result<HessianBlock, HessianError> {
        self.check(PairKind::Vv, i, j)?;
        let f = self.features();
        let k = f.nrows();
        let m = match self.output_weights(i, j) {
            None => Array2::zeros((k, k)),
            Some(w) => weighted_gram(f, w.view(), f) * self.inv_n(),
        };
        Ok(self.block(PairKind::Vv, i, j, m))
    }

    /// Block between hidden groups `w_i` and `w_j`.
    pub fn ww(&self, i: usize, j: usize) -> Result<HessianBlock, HessianError> {
        self.check(PairKind::Ww, i, j)?;
        let act = self.act.as_ref().expect("mlp has activations");
        let v = self.params.v();
        let both = &act.mask.row(i) * &act.mask.row(j);
        let w = match (&self.probs, &self.pv) {
            (Some(p), Some(pv)) => {
                let vij = &v.column(i) * &v.column(j);
                let second = vij.dot(p);
                let cov = second - &pv.row(i) * &pv.row(j);
                cov * &both
            }
            _ => {
                let s: f64 = v.column(i).dot(&v.column(j));
                both * (2.0 * s)
            }
        };
        let x = self.data.x();
        Ok(self.block(PairKind::Ww, i, j, weighted_gram(x, w.view(), x) * self.inv_n()))
    }

    /// Cross-layer block between `w_i` (rows, length `d`) and `v_j` (columns, length `m`).
    ///
    /// With `leading_only` the block keeps just the `(∂ℓ/∂f_j) 1_i x e_iᵀ` part,
    /// which has a single nonzero column at position `i`.
    pub fn wv(&self, i: usize, j: usize, leading_only: bool) -> Result<HessianBlock, HessianError> {
        self.check(PairKind::Wv, i, j)?;
        let act = self.act.as_ref().expect("mlp has activations");
        let x = self.data.x();
        let mask_i = act.mask.row(i);
        let lead = &self.residual.row(j) * &mask_i;
        let mut m = if leading_only {
            Array2::zeros((x.nrows(), act.a.nrows()))
        } else {
            let v = self.params.v();
            let w = match (&self.probs, &self.pv) {
                (Some(p), Some(pv)) => {
                    let centered = pv.row(i).mapv(|t| v[[j, i]] - t);
                    &p.row(j) * &centered * &mask_i * self.inv_n()
                }
                _ => mask_i.mapv(|t| t * 2.0 * v[[j, i]] * self.inv_n()),
            };
            weighted_gram(x, w.view(), act.a.view())
        };
        let col = x.dot(&lead);
        let mut target = m.column_mut(i);
        target += &col;
        Ok(self.block(PairKind::Wv, i, j, m))
    }

    fn block(&self, pair: PairKind, i: usize, j: usize, m: Array2<f64>) -> HessianBlock {
        HessianBlock {
            loss: self.loss,
            pair,
            i,
            j,
            m,
        }
    }

    /// Every block of the upper triangle in layout order (`ww`, then `wv`, then `vv`).
    pub fn for_each_block<F>(&self, mut f: F) -> Result<(), HessianError>
    where
        F: FnMut(HessianBlock) -> Result<(), HessianError>,
    {
        let c = self.params.classes();
        if let Some(m) = self.params.hidden() {
            for i in 0..m {
                for j in i..m {
                    f(self.ww(i, j)?)?;
                }
            }
            for i in 0..m {
                for j in 0..c {
                    f(self.wv(i, j, false)?)?;
                }
            }
        }
        for i in 0..c {
            for j in i..c {
                f(self.vv(i, j)?)?;
            }
        }
        Ok(())
    }
}

pub fn hessian_block_linear(
    params: &ModelParams,
    data: &Dataset,
    loss: LossKind,
    i: usize,
    j: usize,
) -> Result<HessianBlock, HessianError> {
    if params.kind() != ModelKind::Linear {
        return Err(HessianError::LayoutMismatch("expected a linear model".into()));
    }
    HessianContext::new(params, data, loss)?.vv(i, j)
}

pub fn hessian_block_mlp_ww(
    params: &ModelParams,
    data: &Dataset,
    loss: LossKind,
    i: usize,
    j: usize,
) -> Result<HessianBlock, HessianError> {
    HessianContext::new(params, data, loss)?.ww(i, j)
}

pub fn hessian_block_mlp_vv(
    params: &ModelParams,
    data: &Dataset,
    loss: LossKind,
    i: usize,
    j: usize,
) -> Result<HessianBlock, HessianError> {
    if params.kind() != ModelKind::Mlp {
        return Err(HessianError::WrongModel {
            pair: PairKind::Vv,
            kind: params.kind(),
        });
    }
    HessianContext::new(params, data, loss)?.vv(i, j)
}

pub fn hessian_block_mlp_wv(
    params: &ModelParams,
    data: &Dataset,
    loss: LossKind,
    i: usize,
    j: usize,
    leading_only: bool,
) -> Result<HessianBlock, HessianError> {
    HessianContext::new(params, data, loss)?.wv(i, j, leading_only)
}

/// Which layer a parameter group belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    W,
    V,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub kind: GroupKind,
    pub index: usize,
    pub offset: usize,
    pub len: usize,
}

/// Parameter ordering `[w_1 … w_m | v_1 … v_C]` (linear: `[v_1 … v_C]`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub model: ModelKind,
    pub d: usize,
    pub m: Option<usize>,
    pub classes: usize,
    pub groups: Vec<Group>,
}

impl Layout {
    pub fn of(params: &ModelParams) -> Self {
        let d = params.input_dim();
        let c = params.classes();
        let mut groups = Vec::new();
        let mut offset = 0;
        let vlen = params.hidden().unwrap_or(d);
        if let Some(m) = params.hidden() {
            for index in 0..m {
                groups.push(Group {
                    kind: GroupKind::W,
                    index,
                    offset,
                    len: d,
                });
                offset += d;
            }
        }
        for index in 0..c {
            groups.push(Group {
                kind: GroupKind::V,
                index,
                offset,
                len: vlen,
            });
            offset += vlen;
        }
        Self {
            model: params.kind(),
            d,
            m: params.hidden(),
            classes: c,
            groups,
        }
    }

    pub fn side(&self) -> usize {
        self.groups.last().map_or(0, |g| g.offset + g.len)
    }

    pub fn group(&self, kind: GroupKind, index: usize) -> Option<&Group> {
        self.groups.iter().find(|g| g.kind == kind && g.index == index)
    }

    pub fn of_kind(&self, kind: GroupKind) -> impl Iterator<Item = &Group> {
        self.groups.iter().filter(move |g| g.kind == kind)
    }
}

/// Dense symmetric Hessian with its layout.
#[derive(Clone, Debug, PartialEq)]
pub struct FullHessian {
    pub h: Array2<f64>,
    pub layout: Layout,
}

impl FullHessian {
    pub fn block(&self, a: &Group, b: &Group) -> ArrayView2<'_, f64> {
        self.h
            .slice(s![a.offset..a.offset + a.len, b.offset..b.offset + b.len])
    }

    pub fn check_layout(&self) -> Result<(), HessianError> {
        let side = self.layout.side();
        if self.h.dim() != (side, side) {
            return Err(HessianError::LayoutMismatch(format!(
                "matrix is {:?}, layout side is {side}",
                self.h.dim()
            )));
        }
        Ok(())
    }
}

pub fn assemble_full_hessian(
    params: &ModelParams,
    data: &Dataset,
    loss: LossKind,
    side_cap: usize,
) -> Result<FullHessian, HessianError> {
    let layout = Layout::of(params);
    let side = layout.side();
    if side > side_cap {
        return Err(HessianError::BudgetExceeded { side, cap: side_cap });
    }
    let ctx = HessianContext::new(params, data, loss)?;
    let mut h = Array2::zeros((side, side));
    ctx.for_each_block(|b| {
        let (ga, gb) = match b.pair {
            PairKind::Ww => (GroupKind::W, GroupKind::W),
            PairKind::Wv => (GroupKind::W, GroupKind::V),
            PairKind::Vv => (GroupKind::V, GroupKind::V),
        };
        let a = *layout.group(ga, b.i).expect("group exists");
        let c = *layout.group(gb, b.j).expect("group exists");
        h.slice_mut(s![a.offset..a.offset + a.len, c.offset..c.offset + c.len])
            .assign(&b.m);
        if a != c {
            h.slice_mut(s![c.offset..c.offset + c.len, a.offset..a.offset + a.len])
                .assign(&b.m.t());
        }
        Ok(())
    })?;
    Ok(FullHessian { h, layout })
}

/// Smallest `|w_iᵀ x_n|` over all hidden units and samples (`∞` for linear models).
pub fn kink_margin(params: &ModelParams, data: &Dataset) -> f64 {
    match params.w() {
        None => f64::INFINITY,
        Some(w) => w
            .dot(&data.x())
            .iter()
            .fold(f64::INFINITY, |acc, v| acc.min(v.abs())),
    }
}

/// Central differences of the analytic gradient, column by column, then symmetrized.
///
/// Coordinate `k` uses the step `step · (1 + |θ_k|)`.
pub fn fd_hessian_oracle(
    params: &ModelParams,
    data: &Dataset,
    loss: LossKind,
    step: f64,
) -> Result<FullHessian, HessianError> {
    let count = params.len();
    if count > FD_PARAM_CAP {
        return Err(HessianError::OracleBudget {
            count,
            cap: FD_PARAM_CAP,
        });
    }
    let theta = params.to_flat();
    let layout = Layout::of(params);
    if let Some(w) = params.w() {
        let largest_w = theta.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let largest_x = data.x().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let reach = step * (1.0 + largest_w) * largest_x * w.ncols() as f64;
        let margin = kink_margin(params, data);
        if margin <= reach {
            return Err(HessianError::KinkTooClose { margin });
        }
    }
    let mut h = Array2::zeros((count, count));
    let mut probe = theta.to_vec();
    for k in 0..count {
        let hk = step * (1.0 + theta[k].abs());
        probe[k] = theta[k] + hk;
        let gp = models::grad(&params.with_flat(&probe).expect("length"), data, loss)?.to_flat();
        probe[k] = theta[k] - hk;
        let gm = models::grad(&params.with_flat(&probe).expect("length"), data, loss)?.to_flat();
        probe[k] = theta[k];
        h.column_mut(k).assign(&((gp - gm) / (2.0 * hk)));
    }
    let sym = (&h + &h.t()) * 0.5;
    Ok(FullHessian { h: sym, layout })
}
