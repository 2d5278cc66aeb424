//! Block-norm concentration and decay sweeps, structure scores, and training traces.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{gaussian_dataset, DataError, Dataset, LabelPolicy};
use crate::hessian::{
    assemble_full_hessian, fro_sq, FullHessian, GroupKind, HessianContext, HessianError, DEFAULT_SIDE_CAP,
};
use crate::models::{self, ModelError};
use crate::params::{lecun_init, LossKind, ModelKind, ModelParams, ParamError};
use crate::rng::RngStream;
use crate::stats::{ols, summarize, Summary};

#[derive(Debug, Error, PartialEq)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("block side {side} exceeds cap {cap}")]
    BudgetExceeded { side: usize, cap: usize },
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),
    #[error("loss became non-finite at step {step}")]
    Divergence { step: usize },
    #[error(transparent)]
    Hessian(#[from] HessianError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Params(#[from] ParamError),
}

/// Which block family a sweep measures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Case {
    LinearCe,
    MlpCeWw,
    MlpCeVv,
    MlpMseWw,
}

impl Case {
    pub const ALL: [Case; 4] = [Case::LinearCe, Case::MlpCeWw, Case::MlpCeVv, Case::MlpMseWw];

    pub fn model(self) -> ModelKind {
        match self {
            Case::LinearCe => ModelKind::Linear,
            _ => ModelKind::Mlp,
        }
    }

    pub fn loss(self) -> LossKind {
        match self {
            Case::MlpMseWw => LossKind::Mse,
            _ => LossKind::Ce,
        }
    }

    /// Ratio tracked by the decay sweep.
    pub fn ratio(self, r: &BlockNormReport) -> f64 {
        match self {
            Case::LinearCe | Case::MlpCeVv => r.r,
            Case::MlpCeWw | Case::MlpMseWw => r.rtilde.unwrap_or(f64::NAN),
        }
    }
}

impl fmt::Display for Case {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Case::LinearCe => "linear_ce",
            Case::MlpCeWw => "mlp_ce_ww",
            Case::MlpCeVv => "mlp_ce_vv",
            Case::MlpMseWw => "mlp_mse_ww",
        })
    }
}

impl FromStr for Case {
    type Err = ExperimentError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Case::ALL
            .into_iter()
            .find(|c| c.to_string() == s)
            .ok_or_else(|| ExperimentError::InvalidConfig(format!("unknown case '{s}'")))
    }
}

/// Sweep shape shared by concentration and decay runs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub d: usize,
    pub n: usize,
    /// Hidden width (ignored for the linear case).
    pub m: usize,
    pub trials: usize,
}

/// Block norms of one trial.
///
/// Output-layer quantities: `H11 = C²·‖H(v₁,v₁)‖²/d`, `H12 = C⁴·‖H(v₁,v₂)‖²/d`,
/// `r = ‖H(v₁,v₂)‖²/‖H(v₁,v₁)‖²`. For MLP models the output blocks are `m × m`
/// and the `1/d` is dropped. Hidden-layer quantities (MLP only):
/// `H̃11 = ‖H(w₁,w₁)‖²/d`, `H̃12 = C·‖H(w₁,w₂)‖²/d`, `r̃ = ‖H(w₁,w₂)‖²/‖H(w₂,w₂)‖²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockNormReport {
    pub case: Case,
    pub d: usize,
    pub n: usize,
    pub classes: usize,
    pub m: Option<usize>,
    pub loss: LossKind,
    pub trial: usize,
    /// `(pair, i, j, ‖block‖²_F)`.
    pub entries: Vec<(String, usize, usize, f64)>,
    pub h11: f64,
    pub h12: f64,
    pub r: f64,
    pub htilde11: Option<f64>,
    pub htilde12: Option<f64>,
    pub rtilde: Option<f64>,
}

fn trial_stream(rng: &RngStream, classes: usize, trial: usize) -> RngStream {
    rng.child(&format!("C{classes}")).nth(trial as u64)
}

/// Fresh LeCun weights and Gaussian data, then the leading block norms.
pub fn block_norm_trial(
    case: Case,
    cfg: &SweepConfig,
    classes: usize,
    trial: usize,
    rng: &RngStream,
) -> Result<BlockNormReport, ExperimentError> {
    if cfg.d > DEFAULT_SIDE_CAP {
        return Err(ExperimentError::BudgetExceeded {
            side: cfg.d,
            cap: DEFAULT_SIDE_CAP,
        });
    }
    let r = trial_stream(rng, classes, trial);
    let data = gaussian_dataset(cfg.d, cfg.n, classes, LabelPolicy::Uniform, &mut r.child("data"))?;
    let params = lecun_init(case.model(), cfg.d, cfg.m, classes, &mut r.child("init"))?;
    let ctx = HessianContext::new(&params, &data, case.loss())?;
    let (c, d) = (classes as f64, cfg.d as f64);
    let mut entries = Vec::new();
    let mut block = |name: &str, i: usize, j: usize, f: &dyn Fn() -> Result<f64, HessianError>| {
        let v = f()?;
        entries.push((name.to_owned(), i, j, v));
        Ok::<f64, HessianError>(v)
    };
    let v11 = block("vv", 0, 0, &|| Ok(ctx.vv(0, 0)?.fro_sq()))?;
    let v12 = block("vv", 0, 1, &|| Ok(ctx.vv(0, 1)?.fro_sq()))?;
    let out_norm = if case.model() == ModelKind::Linear { d } else { 1.0 };
    let (mut htilde11, mut htilde12, mut rtilde) = (None, None, None);
    if case.model() == ModelKind::Mlp {
        let w11 = block("ww", 0, 0, &|| Ok(ctx.ww(0, 0)?.fro_sq()))?;
        let w12 = block("ww", 0, 1, &|| Ok(ctx.ww(0, 1)?.fro_sq()))?;
        let w22 = block("ww", 1, 1, &|| Ok(ctx.ww(1, 1)?.fro_sq()))?;
        htilde11 = Some(w11 / d);
        htilde12 = Some(c * w12 / d);
        rtilde = Some(w12 / w22);
    }
    Ok(BlockNormReport {
        case,
        d: cfg.d,
        n: cfg.n,
        classes,
        m: params.hidden(),
        loss: case.loss(),
        trial,
        entries,
        h11: c * c * v11 / out_norm,
        h12: c.powi(4) * v12 / out_norm,
        r: v12 / v11,
        htilde11,
        htilde12,
        rtilde,
    })
}

fn check_sweep(case: Case, cfg: &SweepConfig, c_list: &[usize], min_trials: usize) -> Result<(), ExperimentError> {
    let narrow = case.model() == ModelKind::Mlp && cfg.m < 2;
    if cfg.d == 0 || cfg.n == 0 || narrow || cfg.trials < min_trials || c_list.iter().any(|&c| c < 2) {
        return Err(ExperimentError::InvalidConfig(format!(
            "d = {}, N = {}, m = {}, trials = {} (min {min_trials}), C = {c_list:?}",
            cfg.d, cfg.n, cfg.m, cfg.trials
        )));
    }
    Ok(())
}

/// Runs every `(C, trial)` pair in parallel; results come back ordered by C, then trial.
pub fn concentration_sweep(
    case: Case,
    cfg: &SweepConfig,
    c_list: &[usize],
    rng: &RngStream,
) -> Result<Vec<BlockNormReport>, ExperimentError> {
    check_sweep(case, cfg, c_list, 10)?;
    concentration_sweep_unchecked(case, cfg, c_list, rng)
}

/// Per-C summary of a concentration sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationSummary {
    pub classes: usize,
    /// `H11` (output cases) or `H̃11` (hidden cases).
    pub diagonal: Summary,
    /// `H12` or `H̃12`.
    pub off_diagonal: Summary,
    pub ratio: Summary,
}

pub fn summarize_concentration(case: Case, reports: &[BlockNormReport]) -> Vec<ConcentrationSummary> {
    let mut classes: Vec<usize> = reports.iter().map(|r| r.classes).collect();
    classes.dedup();
    classes
        .into_iter()
        .map(|c| {
            let rows: Vec<&BlockNormReport> = reports.iter().filter(|r| r.classes == c).collect();
            let pick = |f: &dyn Fn(&BlockNormReport) -> f64| summarize(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
            let hidden = matches!(case, Case::MlpCeWw | Case::MlpMseWw);
            ConcentrationSummary {
                classes: c,
                diagonal: pick(&|r| if hidden { r.htilde11.unwrap_or(f64::NAN) } else { r.h11 }),
                off_diagonal: pick(&|r| if hidden { r.htilde12.unwrap_or(f64::NAN) } else { r.h12 }),
                ratio: pick(&|r| case.ratio(r)),
            }
        })
        .collect()
}

/// Log–log least-squares fit of mean block ratio against C.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub case: Case,
    pub c_grid: Vec<usize>,
    pub ratios: Vec<f64>,
    pub std_ratios: Vec<f64>,
    pub trials: usize,
    pub slope: f64,
    pub slope_stderr: f64,
    pub intercept: f64,
}

pub fn decay_sweep(case: Case, cfg: &SweepConfig, c_grid: &[usize], rng: &RngStream) -> Result<DecayFit, ExperimentError> {
    let mut distinct = c_grid.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(ExperimentError::DegenerateFit(format!("grid {c_grid:?} has fewer than two class counts")));
    }
    check_sweep(case, cfg, c_grid, 1)?;
    let reports = concentration_sweep_unchecked(case, cfg, c_grid, rng)?;
    let (mut ratios, mut std_ratios) = (Vec::new(), Vec::new());
    for &c in c_grid {
        let vals: Vec<f64> = reports.iter().filter(|r| r.classes == c).map(|r| case.ratio(r)).collect();
        let s = summarize(&vals);
        if !(s.mean > 0.0) {
            return Err(ExperimentError::DegenerateFit(format!("mean ratio {} at C = {c}", s.mean)));
        }
        ratios.push(s.mean);
        std_ratios.push(s.std);
    }
    let lx: Vec<f64> = c_grid.iter().map(|&c| (c as f64).ln()).collect();
    let ly: Vec<f64> = ratios.iter().map(|r| r.ln()).collect();
    let fit = ols(&lx, &ly).ok_or_else(|| ExperimentError::DegenerateFit("regression failed".into()))?;
    Ok(DecayFit {
        case,
        c_grid: c_grid.to_vec(),
        ratios,
        std_ratios,
        trials: cfg.trials,
        slope: fit.slope,
        slope_stderr: fit.slope_stderr,
        intercept: fit.intercept,
    })
}

fn concentration_sweep_unchecked(
    case: Case,
    cfg: &SweepConfig,
    c_list: &[usize],
    rng: &RngStream,
) -> Result<Vec<BlockNormReport>, ExperimentError> {
    let tasks: Vec<(usize, usize)> = c_list
        .iter()
        .flat_map(|&c| (0..cfg.trials).map(move |t| (c, t)))
        .collect();
    tasks
        .into_par_iter()
        .map(|(c, t)| block_norm_trial(case, cfg, c, t, rng))
        .collect()
}

/// Block-energy structure scores of a full Hessian.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureScores {
    /// Share of `H_ww` energy on its diagonal blocks (MLP only).
    pub diag_ww: Option<f64>,
    /// Share of `H_vv` energy on its diagonal blocks.
    pub diag_vv: f64,
    /// Share of all energy on the diagonal blocks of the whole matrix.
    pub diag_full: f64,
    /// Mean share of block `(w_i, v_j)` energy in its column `i` (MLP only).
    pub circulant_wv: Option<f64>,
}

fn diag_share(h: &FullHessian, kinds: &[GroupKind]) -> f64 {
    let groups: Vec<_> = h.layout.groups.iter().filter(|g| kinds.contains(&g.kind)).collect();
    let (mut diag, mut total) = (0.0, 0.0);
    for a in &groups {
        for b in &groups {
            let e = fro_sq(h.block(a, b));
            total += e;
            if a == b {
                diag += e;
            }
        }
    }
    if total == 0.0 {
        1.0
    } else {
        diag / total
    }
}

pub fn structure_metrics(h: &FullHessian) -> Result<StructureScores, ExperimentError> {
    h.check_layout()?;
    let mlp = h.layout.model == ModelKind::Mlp;
    let circulant_wv = mlp.then(|| {
        let shares: Vec<f64> = h
            .layout
            .of_kind(GroupKind::W)
            .flat_map(|w| h.layout.of_kind(GroupKind::V).map(move |v| (w, v)))
            .filter_map(|(w, v)| {
                let block = h.block(w, v);
                let total = fro_sq(block);
                (total > 0.0).then(|| block.column(w.index).iter().map(|x| x * x).sum::<f64>() / total)
            })
            .collect();
        if shares.is_empty() {
            0.0
        } else {
            shares.iter().sum::<f64>() / shares.len() as f64
        }
    });
    Ok(StructureScores {
        diag_ww: mlp.then(|| diag_share(h, &[GroupKind::W])),
        diag_vv: diag_share(h, &[GroupKind::V]),
        diag_full: diag_share(h, &[GroupKind::W, GroupKind::V]),
        circulant_wv,
    })
}

/// Adam with bias correction and a cosine learning-rate schedule annealed to zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: usize,
    pub loss: LossKind,
}

impl TrainConfig {
    pub fn new(steps: usize, loss: LossKind) -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps,
            loss,
        }
    }

    /// Learning rate used by update `t` (0-based).
    pub fn lr_at(&self, t: usize) -> f64 {
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * t as f64 / self.steps as f64).cos())
    }
}

/// Snapshot steps at 0, 10, 25, 50, 75 and 100 % of the budget.
pub fn default_snapshots(steps: usize) -> Vec<usize> {
    let mut s: Vec<usize> = [0.0, 0.1, 0.25, 0.5, 0.75, 1.0]
        .iter()
        .map(|f| (f * steps as f64).round() as usize)
        .collect();
    s.dedup();
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub loss: f64,
    pub scores: StructureScores,
    /// Mean `|p_{n,y_n} − 1|` over the training set (CE only).
    pub label_gap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StructureTrace {
    pub records: Vec<TraceRecord>,
    pub final_params: ModelParams,
}

fn snapshot(params: &ModelParams, data: &Dataset, loss: LossKind, step: usize) -> Result<TraceRecord, ExperimentError> {
    let value = models::loss(params, data, loss)?;
    let h = assemble_full_hessian(params, data, loss, DEFAULT_SIDE_CAP)?;
    let label_gap = match loss {
        LossKind::Ce => {
            let fwd = models::forward(params, data)?;
            let p = models::softmax(fwd.logits.view())?;
            let p = p.view();
            let n = data.samples();
            Some(data.labels().iter().enumerate().map(|(k, &y)| (p[[y, k]] - 1.0).abs()).sum::<f64>() / n as f64)
        }
        LossKind::Mse => None,
    };
    Ok(TraceRecord {
        step,
        loss: value,
        scores: structure_metrics(&h)?,
        label_gap,
    })
}

/// Trains from `params0` and records structure scores at each snapshot step
/// (a snapshot at step `s` is taken after `s` updates).
pub fn train_and_trace(
    params0: &ModelParams,
    data: &Dataset,
    cfg: &TrainConfig,
    snapshot_steps: &[usize],
) -> Result<StructureTrace, ExperimentError> {
    if params0.kind() != ModelKind::Mlp {
        return Err(ExperimentError::InvalidConfig("training traces need an mlp model".into()));
    }
    if !(cfg.lr >= 0.0) || cfg.steps == 0 || snapshot_steps.iter().any(|&s| s > cfg.steps) {
        return Err(ExperimentError::InvalidConfig(format!(
            "lr = {}, steps = {}, snapshots = {snapshot_steps:?}",
            cfg.lr, cfg.steps
        )));
    }
    let mut theta = params0.to_flat().to_vec();
    let mut m1 = vec![0.0; theta.len()];
    let mut m2 = vec![0.0; theta.len()];
    let mut params = params0.clone();
    let mut records = Vec::new();
    let mut wanted: Vec<usize> = snapshot_steps.to_vec();
    wanted.sort_unstable();
    wanted.dedup();
    let mut next = wanted.iter().peekable();
    for t in 0..=cfg.steps {
        if next.peek() == Some(&&t) {
            let rec = snapshot(&params, data, cfg.loss, t)?;
            if !rec.loss.is_finite() {
                return Err(ExperimentError::Divergence { step: t });
            }
            records.push(rec);
            next.next();
        }
        if t == cfg.steps {
            break;
        }
        let g = models::grad(&params, data, cfg.loss).map_err(|e| match e {
            ModelError::NonFinite(_) => ExperimentError::Divergence { step: t },
            other => other.into(),
        })?;
        let g = g.to_flat();
        let k = (t + 1) as i32;
        let (c1, c2) = (1.0 - cfg.beta1.powi(k), 1.0 - cfg.beta2.powi(k));
        let lr = cfg.lr_at(t);
        for (((th, a), b), gi) in theta.iter_mut().zip(&mut m1).zip(&mut m2).zip(g.iter()) {
            *a = cfg.beta1 * *a + (1.0 - cfg.beta1) * gi;
            *b = cfg.beta2 * *b + (1.0 - cfg.beta2) * gi * gi;
            *th -= lr * (*a / c1) / ((*b / c2).sqrt() + cfg.eps);
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(ExperimentError::Divergence { step: t + 1 });
        }
        params = params.with_flat(&theta)?;
    }
    Ok(StructureTrace {
        records,
        final_params: params,
    })
}

/// Heatmap input: entrywise absolute values.
pub fn abs_matrix(h: &Array2<f64>) -> Array2<f64> {
    h.mapv(f64::abs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hessian::Layout;

    fn toy_layout_hessian() -> FullHessian {
        let mut rng = RngStream::new(0, "toy");
        let p = lecun_init(ModelKind::Mlp, 3, 2, 3, &mut rng).unwrap();
        let layout = Layout::of(&p);
        let side = layout.side();
        FullHessian {
            h: Array2::zeros((side, side)),
            layout,
        }
    }

    #[test]
    fn block_diagonal_scores_one() {
        let mut h = toy_layout_hessian();
        for g in h.layout.groups.clone() {
            for k in 0..g.len {
                h.h[[g.offset + k, g.offset + k]] = 1.0 + k as f64;
            }
        }
        let s = structure_metrics(&h).unwrap();
        assert_eq!(s.diag_full, 1.0);
        assert_eq!(s.diag_ww, Some(1.0));
        assert_eq!(s.diag_vv, 1.0);
    }

    #[test]
    fn one_column_block_scores_one() {
        let mut h = toy_layout_hessian();
        let w1 = *h.layout.group(GroupKind::W, 1).unwrap();
        let v0 = *h.layout.group(GroupKind::V, 0).unwrap();
        for r in 0..w1.len {
            h.h[[w1.offset + r, v0.offset + 1]] = 0.5 + r as f64;
            h.h[[v0.offset + 1, w1.offset + r]] = 0.5 + r as f64;
        }
        let s = structure_metrics(&h).unwrap();
        assert_eq!(s.circulant_wv, Some(1.0));
        assert!(s.diag_full < 1.0);
    }

    #[test]
    fn layout_mismatch_reported() {
        let mut h = toy_layout_hessian();
        h.h = Array2::zeros((2, 2));
        assert!(matches!(structure_metrics(&h), Err(ExperimentError::Hessian(_))));
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = TrainConfig::new(100, LossKind::Ce);
        assert_eq!(cfg.lr_at(0), 1e-4);
        assert!(cfg.lr_at(100).abs() < 1e-20);
        assert!((cfg.lr_at(50) - 5e-5).abs() < 1e-18);
        assert_eq!(default_snapshots(2000), vec![0, 200, 500, 1000, 1500, 2000]);
    }

    #[test]
    fn case_names_round_trip() {
        for c in Case::ALL {
            assert_eq!(c.to_string().parse::<Case>().unwrap(), c);
        }
        assert!("mlp_mse_vv".parse::<Case>().is_err());
    }
}
