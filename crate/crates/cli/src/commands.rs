use std::path::{Path, PathBuf};

use hlab::data::{cluster_dataset, gaussian_dataset, ClusterConfig, Dataset, LabelPolicy};
use hlab::experiments::{
    abs_matrix, concentration_sweep, decay_sweep, default_snapshots, structure_metrics, summarize_concentration,
    train_and_trace, Case, SweepConfig, TrainConfig,
};
use hlab::hessian::{assemble_full_hessian, HessianContext};
use hlab::io::{self, RunManifest};
use hlab::limits::{
    constants_mc, eval_constants, eval_g, eval_h, eval_q, eval_u, frozen_constants, g_limit, h_limit,
    lognormal_limit_check, q_limit, u_limit, LimitEstimate, Pair,
};
use hlab::params::{lecun_init, LossKind, ModelKind, ModelParams};
use hlab::rng::RngStream;
use hlab::spectral::{
    bernoulli_decoupling_check, empirical_spectrum, lindeberg_decoupling_check, moments_from_stieltjes,
    solve_generalized_mp, DecouplingPolicy, MeasureRep,
};
use ndarray::ArrayView2;
use num_complex::Complex64;
use serde_json::json;

use crate::failure::Failure;
use crate::grid::parse_grid;
use crate::{
    BlockKind, Command, Common, ConcentrationArgs, ConstantsArgs, DecayArgs, DecoupleArgs, DecoupleKind, GenData,
    HessianArgs, Labels, LimitsArgs, Loss, Measure, Model, OracleArgs, OracleKind, Policy, SpectrumArgs, SweepArgs,
    TrainArgs,
};

/// Writes outputs under one directory and records them in the manifest.
struct Outputs {
    dir: PathBuf,
    manifest: RunManifest,
}

impl Outputs {
    fn new(common: &Common, command: &str) -> Self {
        Self {
            dir: common.out.clone(),
            manifest: RunManifest::new(command, common.seed),
        }
    }

    fn param(&mut self, key: &str, value: impl Into<serde_json::Value>) -> &mut Self {
        self.manifest.param(key, value);
        self
    }

    fn record(&mut self, name: &str, kind: &str, write: impl FnOnce(&Path) -> Result<(), io::IoError>) -> Result<(), Failure> {
        let path = self.dir.join(name);
        write(&path)?;
        self.manifest.add_output(&path, kind)?;
        println!("{}", path.display());
        Ok(())
    }

    fn json<T: serde::Serialize>(&mut self, name: &str, kind: &str, value: &T) -> Result<(), Failure> {
        self.record(name, kind, |p| io::write_json(p, value))
    }

    fn text(&mut self, name: &str, kind: &str, text: &str) -> Result<(), Failure> {
        self.record(name, kind, |p| io::write_text(p, text))
    }

    fn hmat(&mut self, name: &str, kind: &str, m: ArrayView2<'_, f64>) -> Result<(), Failure> {
        self.record(name, kind, |p| io::write_matrix_dump(p, m))
    }

    fn finish(self) -> Result<(), Failure> {
        let path = self.dir.join(format!("{}.manifest.json", self.manifest.command));
        self.manifest.write(&path)?;
        println!("{}", path.display());
        Ok(())
    }
}

impl From<Labels> for LabelPolicy {
    fn from(l: Labels) -> Self {
        match l {
            Labels::Uniform => LabelPolicy::Uniform,
            Labels::Blocked => LabelPolicy::Blocked,
        }
    }
}

impl From<Model> for ModelKind {
    fn from(m: Model) -> Self {
        match m {
            Model::Linear => ModelKind::Linear,
            Model::Mlp => ModelKind::Mlp,
        }
    }
}

impl From<Loss> for LossKind {
    fn from(l: Loss) -> Self {
        match l {
            Loss::Ce => LossKind::Ce,
            Loss::Mse => LossKind::Mse,
        }
    }
}

impl From<Policy> for DecouplingPolicy {
    fn from(p: Policy) -> Self {
        match p {
            Policy::Shared => DecouplingPolicy::SharedWeights,
            Policy::Fresh => DecouplingPolicy::Fresh,
        }
    }
}

fn labels_name(l: Labels) -> &'static str {
    match l {
        Labels::Uniform => "uniform",
        Labels::Blocked => "blocked",
    }
}

pub fn run(common: &Common, command: &Command) -> Result<(), Failure> {
    match command {
        Command::GenData(a) => gen_data(common, a),
        Command::Hessian(a) => hessian(common, a),
        Command::Limits(a) => limits(common, a),
        Command::Constants(a) => constants(common, a),
        Command::Decay(a) => decay(common, a),
        Command::Concentration(a) => concentration(common, a),
        Command::Spectrum(a) => spectrum(common, a),
        Command::DecoupleCheck(a) => decouple(common, a),
        Command::Train(a) => train(common, a),
        Command::McOracle(a) => mc_oracle(common, a),
    }
}

fn write_dataset(out: &mut Outputs, data: &Dataset) -> Result<(), Failure> {
    out.hmat("data_x.hmat", "inputs", data.x())?;
    out.text("data_labels.csv", "labels", &io::labels_csv(data.labels()))
}

fn gen_data(common: &Common, a: &GenData) -> Result<(), Failure> {
    let mut out = Outputs::new(common, "gen-data");
    out.param("d", a.d).param("N", a.n).param("C", a.classes);
    let mut rng = RngStream::new(common.seed, "gen-data");
    let data = match a.clusters {
        Some(k) => {
            out.param("clusters", k).param("noise", a.noise);
            let cfg = ClusterConfig {
                noise: a.noise,
                ..ClusterConfig::new(a.n, a.classes, k, a.d)
            };
            cluster_dataset(&cfg, &mut rng)?
        }
        None => {
            out.param("labels", labels_name(a.labels));
            gaussian_dataset(a.d, a.n, a.classes, a.labels.into(), &mut rng)?
        }
    };
    write_dataset(&mut out, &data)?;
    out.finish()
}

fn model_and_data(
    seed: u64,
    label: &str,
    model: ModelKind,
    (d, m, classes, n): (usize, usize, usize, usize),
    labels: Labels,
) -> Result<(ModelParams, Dataset), Failure> {
    let rng = RngStream::new(seed, label);
    let data = gaussian_dataset(d, n, classes, labels.into(), &mut rng.child("data"))?;
    let params = lecun_init(model, d, m, classes, &mut rng.child("init"))?;
    Ok((params, data))
}

fn hessian(common: &Common, a: &HessianArgs) -> Result<(), Failure> {
    let mut out = Outputs::new(common, "hessian");
    out.param("model", ModelKind::from(a.model).to_string())
        .param("loss", LossKind::from(a.loss).to_string())
        .param("d", a.d)
        .param("m", a.m)
        .param("C", a.classes)
        .param("N", a.n)
        .param("labels", labels_name(a.labels))
        .param("full", a.full);
    let (params, data) = model_and_data(
        common.seed,
        "hessian",
        a.model.into(),
        (a.d, a.m, a.classes, a.n),
        a.labels,
    )?;
    let loss = a.loss.into();
    if a.full {
        out.param("side_cap", a.side_cap);
        let full = assemble_full_hessian(&params, &data, loss, a.side_cap)?;
        let heat = abs_matrix(&full.h);
        let scores = structure_metrics(&full)?;
        out.hmat("hessian.hmat", "hessian", full.h.view())?;
        out.hmat("heatmap.hmat", "heatmap", heat.view())?;
        out.json(
            "heatmap.json",
            "heatmap-layout",
            &json!({ "values": "absolute", "layout": full.layout, "scores": scores }),
        )?;
        if a.pgm {
            let (pgm, side) = io::pgm_p2(heat.view());
            out.text("heatmap.pgm", "heatmap-preview", &pgm)?;
            out.json("heatmap.pgm.json", "heatmap-preview-scale", &side)?;
        }
    } else {
        out.param("block", format!("{:?}", a.block).to_lowercase())
            .param("i", a.i)
            .param("j", a.j)
            .param("leading_only", a.leading_only);
        let ctx = HessianContext::new(&params, &data, loss)?;
        let block = match a.block {
            BlockKind::Ww => ctx.ww(a.i, a.j)?,
            BlockKind::Vv => ctx.vv(a.i, a.j)?,
            BlockKind::Wv => ctx.wv(a.i, a.j, a.leading_only)?,
        };
        out.hmat("block.hmat", "hessian-block", block.m.view())?;
        out.json("block.json", "block-norm", &json!({ "fro_sq": block.fro_sq() }))?;
    }
    out.finish()
}

fn parse_target(target: &str) -> Result<(char, Pair), Failure> {
    let bad = || Failure::Validation(format!("unknown target '{target}'"));
    let (family, pair) = target.split_once('_').ok_or_else(bad)?;
    let family = match family {
        "g" | "u" | "h" | "q" => family.chars().next().unwrap_or('g'),
        _ => return Err(bad()),
    };
    Ok((family, pair.parse().map_err(|_| bad())?))
}

fn limits(common: &Common, a: &LimitsArgs) -> Result<(), Failure> {
    let (family, which) = parse_target(&a.target)?;
    let mut out = Outputs::new(common, "limits");
    out.param("target", a.target.as_str())
        .param("gamma", a.gamma)
        .param("C", a.classes)
        .param("samples", a.samples);
    let rng = RngStream::new(common.seed, "limits");
    let (est, limit): (LimitEstimate, LimitEstimate) = match family {
        'g' => (
            eval_g(a.gamma, a.classes, which, a.samples, &rng)?,
            g_limit(a.gamma, which),
        ),
        'u' => {
            out.param("m", a.m);
            (eval_u(a.gamma, a.classes, a.m, which)?, u_limit(a.gamma, a.m, which))
        }
        'h' => {
            out.param("m", a.m);
            (
                eval_h(a.gamma, a.classes, a.m, which, a.samples, &rng)?,
                h_limit(a.gamma, a.m, which)?,
            )
        }
        _ => {
            out.param("m", a.m);
            let k = eval_constants(a.m)?;
            (eval_q(a.gamma, a.classes, a.m, which, a.samples, &rng)?, q_limit(&k, which))
        }
    };
    out.json("estimate.json", "limit-estimate", &est)?;
    out.json("limit.json", "limit-reference", &limit)?;
    out.finish()
}

fn constants(common: &Common, a: &ConstantsArgs) -> Result<(), Failure> {
    let mut out = Outputs::new(common, "constants");
    out.param("m", a.m).param("mc_samples", a.mc_samples);
    let k = if a.mc_samples == 0 {
        eval_constants(a.m)?
    } else {
        frozen_constants(a.m, a.mc_samples, &RngStream::new(common.seed, "constants"))?
    };
    let limits = json!({ "ii": q_limit(&k, Pair::Ii), "ij": q_limit(&k, Pair::Ij) });
    out.json("constants.json", "constants", &json!({ "constants": k, "output_limits": limits }))?;
    out.finish()
}

fn sweep_setup(out: &mut Outputs, s: &SweepArgs) -> Result<(Case, SweepConfig), Failure> {
    let case: Case = s.case.parse()?;
    out.param("case", case.to_string())
        .param("d", s.d)
        .param("N", s.n)
        .param("m", s.m)
        .param("trials", s.trials);
    Ok((
        case,
        SweepConfig {
            d: s.d,
            n: s.n,
            m: s.m,
            trials: s.trials,
        },
    ))
}

fn decay(common: &Common, a: &DecayArgs) -> Result<(), Failure> {
    let mut out = Outputs::new(common, "decay");
    let (case, cfg) = sweep_setup(&mut out, &a.sweep)?;
    let grid = parse_grid(&a.grid).map_err(Failure::Validation)?;
    out.param("grid", a.grid.as_str());
    let fit = decay_sweep(case, &cfg, &grid, &RngStream::new(common.seed, "decay"))?;
    out.json("decay.json", "decay-fit", &fit)?;
    out.text("decay.csv", "decay-table", &io::decay_csv(&fit))?;
    out.finish()
}

fn concentration(common: &Common, a: &ConcentrationArgs) -> Result<(), Failure> {
    let mut out = Outputs::new(common, "concentration");
    let (case, cfg) = sweep_setup(&mut out, &a.sweep)?;
    let grid = parse_grid(&a.classes).map_err(Failure::Validation)?;
    out.param("C", a.classes.as_str());
    let reports = concentration_sweep(case, &cfg, &grid, &RngStream::new(common.seed, "concentration"))?;
    out.text("concentration.csv", "block-norms", &io::concentration_csv(&reports))?;
    out.json(
        "concentration_summary.json",
        "concentration-summary",
        &summarize_concentration(case, &reports),
    )?;
    out.finish()
}

fn spectrum(common: &Common, a: &SpectrumArgs) -> Result<(), Failure> {
    let mut out = Outputs::new(common, "spectrum");
    if let Some(input) = &a.input {
        out.param("input", input.display().to_string());
        let m = io::read_matrix_dump(input)?;
        let s = empirical_spectrum(m.view(), &input.display().to_string())?;
        out.text("spectrum.csv", "eigenvalues", &io::spectrum_csv(&s.eigenvalues))?;
        let moments = json!({ "m1": s.moment(1), "m2": s.moment(2), "size": s.eigenvalues.len() });
        out.json("spectrum_moments.json", "spectral-moments", &moments)?;
        return out.finish();
    }
    if a.points < 2 || a.eta <= 0.0 || a.re_max <= a.re_min {
        return Err(Failure::Validation("need points ≥ 2, eta > 0 and re_min < re_max".into()));
    }
    out.param("measure", format!("{:?}", a.measure).to_lowercase())
        .param("gamma", a.gamma)
        .param("re_min", a.re_min)
        .param("re_max", a.re_max)
        .param("points", a.points)
        .param("eta", a.eta);
    let nu = match a.measure {
        Measure::Mask => MeasureRep::atoms(vec![(0.0, 0.5), (1.0, 0.5)])?,
        Measure::Point => MeasureRep::point(1.0),
        Measure::Softmax => {
            out.param("C", a.classes).param("measure_samples", a.measure_samples);
            let mut rng = RngStream::new(common.seed, "spectrum");
            MeasureRep::softmax_weight_law(a.classes, a.measure_samples, &mut rng)
        }
    };
    let step = (a.re_max - a.re_min) / (a.points - 1) as f64;
    let points = (0..a.points)
        .map(|k| solve_generalized_mp(a.gamma, &nu, Complex64::new(a.re_min + step * k as f64, a.eta)))
        .collect::<Result<Vec<_>, _>>()?;
    let moments = moments_from_stieltjes(|z| solve_generalized_mp(a.gamma, &nu, z).map(|p| p.s()), 2)?;
    out.json(
        "stieltjes.json",
        "stieltjes",
        &json!({ "points": points, "moments": { "m1": moments[0], "m2": moments[1] } }),
    )?;
    out.finish()
}

fn decouple(common: &Common, a: &DecoupleArgs) -> Result<(), Failure> {
    let mut out = Outputs::new(common, "decouple-check");
    let policy = DecouplingPolicy::from(a.policy);
    out.param("kind", format!("{:?}", a.kind).to_lowercase())
        .param("d", a.d)
        .param("N", a.n)
        .param("policy", serde_json::to_value(policy).map_err(io::IoError::from)?);
    let mut rng = RngStream::new(common.seed, "decouple");
    let report = match a.kind {
        DecoupleKind::Ii => bernoulli_decoupling_check(a.d, a.n, Pair::Ii, policy, &mut rng)?,
        DecoupleKind::Ij => bernoulli_decoupling_check(a.d, a.n, Pair::Ij, policy, &mut rng)?,
        DecoupleKind::Lindeberg => {
            out.param("C", a.classes);
            lindeberg_decoupling_check(a.d, a.n, a.classes, policy, &mut rng)?
        }
    };
    out.json("decouple.json", "decoupling-report", &report)?;
    out.finish()
}

fn train(common: &Common, a: &TrainArgs) -> Result<(), Failure> {
    let mut out = Outputs::new(common, "train");
    out.param("d", a.d)
        .param("m", a.m)
        .param("C", a.classes)
        .param("N", a.n)
        .param("loss", LossKind::from(a.loss).to_string())
        .param("labels", labels_name(a.labels))
        .param("steps", a.steps)
        .param("lr", a.lr);
    let (params, data) = model_and_data(
        common.seed,
        "train",
        ModelKind::Mlp,
        (a.d, a.m, a.classes, a.n),
        a.labels,
    )?;
    let cfg = TrainConfig {
        lr: a.lr,
        ..TrainConfig::new(a.steps, a.loss.into())
    };
    let trace = train_and_trace(&params, &data, &cfg, &default_snapshots(a.steps))?;
    out.text("trace.csv", "structure-trace", &io::trace_csv(&trace.records))?;
    out.json("trace.json", "structure-trace", &trace.records)?;
    let full = assemble_full_hessian(&trace.final_params, &data, cfg.loss, hlab::hessian::DEFAULT_SIDE_CAP)?;
    out.hmat("final_heatmap.hmat", "heatmap", abs_matrix(&full.h).view())?;
    out.finish()
}

fn mc_oracle(common: &Common, a: &OracleArgs) -> Result<(), Failure> {
    let mut out = Outputs::new(common, "mc-oracle");
    out.param("kind", format!("{:?}", a.kind).to_lowercase())
        .param("samples", a.samples);
    let rng = RngStream::new(common.seed, "mc-oracle");
    match a.kind {
        OracleKind::Constants => {
            out.param("m", a.m);
            let quad = eval_constants(a.m)?;
            let mc = constants_mc(a.m, a.samples, &rng)?;
            let rows: Vec<_> = quad
                .all()
                .iter()
                .zip(&mc)
                .map(|(q, m)| {
                    json!({
                        "target": q.target,
                        "quadrature": q.value,
                        "monte_carlo": m.value,
                        "std_error": m.std_error,
                        "z": q.z_score(m),
                    })
                })
                .collect();
            out.json("mc_oracle.json", "oracle-comparison", &rows)?;
        }
        OracleKind::Lognormal => {
            out.param("C", a.classes);
            let report = lognormal_limit_check(a.classes, a.samples, &rng)?;
            out.json("mc_oracle.json", "oracle-comparison", &report)?;
        }
    }
    out.finish()
}
