use hlab::data::{gaussian_dataset, LabelPolicy};
use hlab::experiments::{
    concentration_sweep, decay_sweep, default_snapshots, structure_metrics, summarize_concentration,
    train_and_trace, Case, ExperimentError, SweepConfig, TrainConfig,
};
use hlab::hessian::{assemble_full_hessian, DEFAULT_SIDE_CAP};
use hlab::limits::{eval_g, Pair};
use hlab::params::{lecun_init, LossKind, ModelKind};
use hlab::rng::RngStream;

fn sweep(d: usize, m: usize, trials: usize) -> SweepConfig {
    SweepConfig { d, n: d, m, trials }
}

#[test]
fn mse_blocks_are_exactly_diagonal() {
    let mut rng = RngStream::new(0, "mse");
    let data = gaussian_dataset(6, 20, 4, LabelPolicy::Uniform, &mut rng).unwrap();
    let lin = lecun_init(ModelKind::Linear, 6, 0, 4, &mut rng).unwrap();
    let h = assemble_full_hessian(&lin, &data, LossKind::Mse, DEFAULT_SIDE_CAP).unwrap();
    assert_eq!(structure_metrics(&h).unwrap().diag_full, 1.0);
    let mlp = lecun_init(ModelKind::Mlp, 6, 3, 4, &mut rng).unwrap();
    let h = assemble_full_hessian(&mlp, &data, LossKind::Mse, DEFAULT_SIDE_CAP).unwrap();
    let s = structure_metrics(&h).unwrap();
    assert_eq!(s.diag_vv, 1.0);
    assert!(s.diag_full < 1.0 && s.diag_full >= 0.0);
}

#[test]
fn linear_ce_diagonal_concentrates_near_finite_c_value() {
    let rng = RngStream::new(1, "conc");
    let reports = concentration_sweep(Case::LinearCe, &sweep(150, 8, 30), &[16], &rng).unwrap();
    let summary = &summarize_concentration(Case::LinearCe, &reports)[0];
    let g = eval_g(1.0, 16, Pair::Ii, 200_000, &rng.child("g")).unwrap().scaled(256.0);
    assert!((summary.diagonal.mean / g.value - 1.0).abs() < 0.05, "{} vs {}", summary.diagonal.mean, g.value);
}

#[test]
fn two_class_blocks_have_equal_norms() {
    // with two classes p₁(1 − p₁) = p₁p₂, so the two blocks differ only in sign
    let rng = RngStream::new(2, "c2");
    let reports = concentration_sweep(Case::LinearCe, &sweep(60, 8, 20), &[2], &rng).unwrap();
    assert!(reports.iter().all(|r| (r.r - 1.0).abs() < 1e-12));
    let three = concentration_sweep(Case::LinearCe, &sweep(60, 8, 20), &[3], &rng).unwrap();
    assert!(summarize_concentration(Case::LinearCe, &three)[0].ratio.mean < 1.0);
}

#[test]
fn sweep_is_schedule_independent() {
    let rng = RngStream::new(3, "sched");
    let cfg = sweep(40, 4, 10);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| concentration_sweep(Case::MlpCeWw, &cfg, &[4, 8], &rng).unwrap())
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn single_class_count_is_a_degenerate_fit() {
    let rng = RngStream::new(4, "deg");
    let err = decay_sweep(Case::LinearCe, &sweep(20, 4, 2), &[8, 8], &rng).unwrap_err();
    assert!(matches!(err, ExperimentError::DegenerateFit(_)));
}

#[test]
fn ratios_decrease_over_the_grid() {
    let rng = RngStream::new(5, "mono");
    for case in [Case::LinearCe, Case::MlpCeWw, Case::MlpCeVv] {
        let fit = decay_sweep(case, &sweep(80, 8, 12), &[4, 16, 64], &rng).unwrap();
        assert!(fit.ratios.windows(2).all(|w| w[1] < w[0]), "{case}: {:?}", fit.ratios);
        assert!(fit.slope < 0.0 && fit.slope_stderr > 0.0);
    }
}

#[test]
fn zero_learning_rate_freezes_the_trace() {
    let mut rng = RngStream::new(6, "lr0");
    let data = gaussian_dataset(10, 30, 4, LabelPolicy::Blocked, &mut rng).unwrap();
    let p = lecun_init(ModelKind::Mlp, 10, 3, 4, &mut rng).unwrap();
    let mut cfg = TrainConfig::new(20, LossKind::Ce);
    cfg.lr = 0.0;
    let trace = train_and_trace(&p, &data, &cfg, &default_snapshots(20)).unwrap();
    assert_eq!(trace.final_params, p);
    assert_eq!(trace.records.len(), 6);
    assert!(trace.records.windows(2).all(|w| w[0].loss == w[1].loss && w[0].scores == w[1].scores));
}

#[test]
fn training_loss_stays_finite_on_benchmark_shape() {
    for seed in 0..5 {
        let rng = RngStream::new(seed, "bench");
        let data = gaussian_dataset(64, 320, 32, LabelPolicy::Blocked, &mut rng.child("data")).unwrap();
        let p = lecun_init(ModelKind::Mlp, 64, 8, 32, &mut rng.child("init")).unwrap();
        let cfg = TrainConfig::new(200, LossKind::Ce);
        let steps: Vec<usize> = (0..=200).step_by(50).collect();
        let trace = train_and_trace(&p, &data, &cfg, &steps).unwrap();
        assert!(trace.records.iter().all(|r| r.loss.is_finite()));
        assert!(trace.records.last().unwrap().loss < trace.records[0].loss);
    }
}

#[test]
fn huge_step_diverges() {
    let mut rng = RngStream::new(7, "boom");
    let data = gaussian_dataset(5, 10, 3, LabelPolicy::Uniform, &mut rng).unwrap();
    let p = lecun_init(ModelKind::Mlp, 5, 3, 3, &mut rng).unwrap();
    let mut cfg = TrainConfig::new(10, LossKind::Mse);
    cfg.lr = 1e300;
    let err = train_and_trace(&p, &data, &cfg, &[0, 10]).unwrap_err();
    assert!(matches!(err, ExperimentError::Divergence { .. }), "{err:?}");
}

#[test]
fn linear_model_rejected_for_training() {
    let mut rng = RngStream::new(8, "lin");
    let data = gaussian_dataset(5, 10, 3, LabelPolicy::Uniform, &mut rng).unwrap();
    let p = lecun_init(ModelKind::Linear, 5, 0, 3, &mut rng).unwrap();
    assert!(train_and_trace(&p, &data, &TrainConfig::new(5, LossKind::Ce), &[0]).is_err());
}
