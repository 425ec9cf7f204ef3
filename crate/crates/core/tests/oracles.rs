use tdcd::config::SimConfig;
use tdcd::data::{self, Dataset};
use tdcd::harness::Experiment;
use tdcd::linalg::{largest_eigenvalue_psd, Matrix};
use tdcd::model::{Architecture, LossSpec, ParamBlock, SiloModelSpec};
use tdcd::oracles::{self, BoundConstants, BoundInputs, ConstantSource, ProbeConfig, Problem};
use tdcd::synthetic::{self, SyntheticSpec, Task};

fn ls_config(samples: usize, features: usize, silos: usize, clients: usize, batch: usize) -> SimConfig {
    SimConfig::from_toml_str(&format!(
        r#"
silos = {silos}
clients = {clients}
local_steps = 1
learning_rate = 0.05
batch_size = {batch}
rounds = 10
[model]
architecture = "linear"
[loss]
kind = "squared_error"
[seeds]
data = 41
init = 42
batch = 43
shard = 44
[dataset]
source = "synthetic"
samples = {samples}
features = {features}
task = "least_squares"
noise = 0.3
"#
    ))
    .unwrap()
}

#[test]
fn one_dimensional_smoothness_is_two() {
    let ds = Dataset::new(Matrix::from_vec(2, 1, vec![1.0, 1.0]).unwrap(), vec![0.5, -0.5]).unwrap();
    let parts = data::split_vertical(1, &[1]).unwrap();
    let specs = vec![SiloModelSpec::new(0, 1, 1, Architecture::Linear)];
    let shards = vec![data::shard_horizontal(&parts[0], &ds.labels, 1, 0).unwrap()];
    let problem = Problem {
        dataset: &ds,
        specs: &specs,
        partitions: &parts,
        loss: LossSpec::squared_error(),
    };
    let c = oracles::estimate_constants(&problem, &shards, &[vec![ParamBlock(vec![0.3])]], &ProbeConfig::new(2, 1)).unwrap();
    assert_eq!(c.source, ConstantSource::Analytic);
    assert!((c.smoothness - 2.0).abs() < 1e-12);
    assert!((largest_eigenvalue_psd(&Matrix::from_vec(1, 1, vec![2.0]).unwrap(), 1e-14, 100) - 2.0).abs() < 1e-12);
    // full batch: no sampling noise
    assert_eq!(c.variance, vec![0.0]);
}

#[test]
fn full_batch_has_zero_variance_for_every_silo() {
    let exp = Experiment::build(&ls_config(12, 4, 2, 3, 12)).unwrap();
    let probe = ProbeConfig::new(12, 5);
    let c = oracles::estimate_constants(&exp.problem(), &exp.shards, std::slice::from_ref(&exp.init), &probe).unwrap();
    for v in &c.variance {
        assert!(*v < 1e-25, "{v}");
    }
}

#[test]
fn sampled_smoothness_does_not_exceed_analytic() {
    let exp = Experiment::build(&ls_config(10, 4, 2, 2, 4)).unwrap();
    let analytic = oracles::estimate_constants(&exp.problem(), &exp.shards, std::slice::from_ref(&exp.init), &ProbeConfig::new(4, 1)).unwrap();
    // difference quotients can only under-estimate the exact constant
    let estimated = estimated_constants(&exp, &ProbeConfig::new(4, 1));
    assert_eq!(analytic.source, ConstantSource::Analytic);
    assert!(estimated.smoothness <= analytic.smoothness * (1.0 + 1e-9), "{} > {}", estimated.smoothness, analytic.smoothness);
    assert!(estimated.smoothness > 0.0);
}

/// The sampling estimator applied to a linear least-squares problem: take
/// finite-difference quotients of the exact gradient at random pairs.
fn estimated_constants(exp: &Experiment, probe: &ProbeConfig) -> BoundConstants {
    let mut s = tdcd::rng::Stream::new(probe.seed, tdcd::rng::Purpose::Probe, 7);
    let mut l: f64 = 0.0;
    for _ in 0..probe.pairs {
        let a: Vec<ParamBlock> = exp.init.iter().map(|b| ParamBlock(b.as_slice().iter().map(|v| v + s.uniform(-0.5, 0.5)).collect())).collect();
        let b: Vec<ParamBlock> = exp.init.iter().map(|b| ParamBlock(b.as_slice().iter().map(|v| v + s.uniform(-0.5, 0.5)).collect())).collect();
        let ga = tdcd::GlobalModel::new(exp.specs.clone(), exp.partitions.clone(), a.clone()).unwrap().gradient(&exp.dataset, &exp.loss, None).unwrap();
        let gb = tdcd::GlobalModel::new(exp.specs.clone(), exp.partitions.clone(), b.clone()).unwrap().gradient(&exp.dataset, &exp.loss, None).unwrap();
        let num: f64 = ga.iter().flatten().zip(gb.iter().flatten()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = a.iter().zip(&b).flat_map(|(x, y)| x.as_slice().iter().zip(y.as_slice())).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        l = l.max(num / den);
    }
    BoundConstants {
        smoothness: l,
        max_local_smoothness: 0.0,
        variance: vec![],
        source: ConstantSource::Estimated,
    }
}

#[test]
fn mlp_constants_are_estimated_and_finite() {
    let mut cfg = ls_config(10, 4, 2, 2, 4);
    cfg.model.architecture = tdcd::config::ArchitectureKind::Mlp;
    cfg.model.hidden = Some(3);
    let exp = Experiment::build(&cfg).unwrap();
    let c = oracles::estimate_constants(&exp.problem(), &exp.shards, std::slice::from_ref(&exp.init), &ProbeConfig::new(4, 3)).unwrap();
    assert_eq!(c.source, ConstantSource::Estimated);
    assert!(c.smoothness > 0.0 && c.smoothness.is_finite());
    assert!(c.max_local_smoothness > 0.0 && c.max_local_smoothness.is_finite());
    assert!(c.variance.iter().all(|v| *v > 0.0 && v.is_finite()));
}

#[test]
fn zero_rate_reference_is_constant() {
    let exp = Experiment::build(&ls_config(16, 4, 2, 2, 4)).unwrap();
    let schedule = oracles::batch_schedule(1, 1, 5, 4, 16).unwrap();
    let traj = oracles::centralized_sgd_reference(&exp.problem(), &exp.init, 0.0, &schedule).unwrap();
    assert_eq!(traj.len(), 6);
    assert!(traj.iter().all(|t| t == &traj[0]));
}

#[test]
fn one_full_batch_step_from_zero_matches_closed_form() {
    let exp = Experiment::build(&ls_config(16, 4, 2, 2, 16)).unwrap();
    let zero: Vec<ParamBlock> = exp.specs.iter().map(|s| ParamBlock::zeros(s.param_len())).collect();
    let eta = 0.1;
    let traj = oracles::centralized_sgd_reference(&exp.problem(), &zero, eta, &[(0..16).collect()]).unwrap();
    // ∇L(0) = -(2/M)·Xᵀy, so θ¹ = η·(2/M)·Xᵀy
    let xty = exp.dataset.features.t_matvec(&exp.dataset.labels);
    for (got, v) in traj[1].iter().zip(&xty) {
        assert!((got - eta * 2.0 / 16.0 * v).abs() < 1e-14);
    }
}

#[test]
fn id_weighted_round_start_gradient_is_unbiased() {
    let exp = Experiment::build(&ls_config(8, 4, 2, 2, 4)).unwrap();
    let model = tdcd::GlobalModel::new(exp.specs.clone(), exp.partitions.clone(), exp.init.clone()).unwrap();
    let expect = oracles::expected_round_start_gradient(&exp.problem(), &model, &exp.shards, 4).unwrap();
    let full = model.gradient(&exp.dataset, &exp.loss, None).unwrap();
    for (e, f) in expect.iter().flatten().zip(full.iter().flatten()) {
        assert!((e - f).abs() < 1e-12);
    }
}

#[test]
fn bound_variance_term_is_linear_in_silo_count() {
    let inputs = BoundInputs {
        mean_round_start_grad_sq: 0.1,
        initial_loss: 1.0,
        final_loss: 0.5,
        rounds: 10,
    };
    let terms: Vec<f64> = [2usize, 4, 8]
        .iter()
        .map(|&n| {
            let c = BoundConstants {
                smoothness: 2.0,
                max_local_smoothness: 3.0,
                variance: vec![0.25; n],
                source: ConstantSource::Analytic,
            };
            oracles::convergence_bound(&inputs, &c, 0.001, 2).variance_term
        })
        .collect();
    assert!((terms[1] / terms[0] - 2.0).abs() < 1e-12);
    assert!((terms[2] / terms[0] - 4.0).abs() < 1e-12);
}

#[test]
fn bound_report_serializes() {
    let c = BoundConstants {
        smoothness: 1.0,
        max_local_smoothness: 1.0,
        variance: vec![0.0],
        source: ConstantSource::Analytic,
    };
    let inputs = BoundInputs {
        mean_round_start_grad_sq: 0.0,
        initial_loss: 1.0,
        final_loss: 1.0,
        rounds: 1,
    };
    let r = oracles::convergence_bound(&inputs, &c, 0.01, 1);
    let json = serde_json::to_value(&r).unwrap();
    for k in ["lhs", "rhs", "eta_max", "satisfied"] {
        assert!(json.get(k).is_some(), "{k}");
    }
}

#[test]
fn reduction_preconditions_are_checked() {
    let exp = Experiment::build(&ls_config(16, 4, 2, 2, 4)).unwrap();
    assert!(oracles::reduction_check(oracles::ReductionKind::N1LocalSgd, &exp.reduction_setup(2), 1e-10).is_err());
    assert!(oracles::reduction_check(oracles::ReductionKind::K1Vfl, &exp.reduction_setup(2), 1e-10).is_err());
}

#[test]
fn normal_equation_golden_instance() {
    // frozen from tests/oracles/normal_equations_golden.py (numpy lstsq)
    let spec = SyntheticSpec {
        samples: 8,
        features: 4,
        task: Task::LeastSquares { noise: 0.5 },
        condition: None,
        correlation: 0.0,
    };
    let g = synthetic::generate(&spec, 2024, 0).unwrap();
    let f = g.facts.unwrap();
    let optimum = [0.32465801286040474, -0.3215824965594234, -0.00730688264601682, 1.2468012434369322];
    for (a, b) in f.optimum.iter().zip(optimum) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    assert!((f.optimum_loss - 0.014014170088167681).abs() < 1e-14);
    assert!((f.smoothness - 2.996415326602477).abs() < 1e-10);
    // gradient vanishes at the optimum
    let r: Vec<f64> = g.dataset.features.matvec(&f.optimum).iter().zip(&g.dataset.labels).map(|(a, b)| a - b).collect();
    let grad = g.dataset.features.t_matvec(&r);
    assert!(grad.iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn unit_condition_spread_within_factor_two() {
    let spec = SyntheticSpec {
        samples: 64,
        features: 6,
        task: Task::LeastSquares { noise: 0.1 },
        condition: Some(1.0),
        correlation: 0.0,
    };
    let x = synthetic::generate(&spec, 9, 0).unwrap().dataset.features;
    let g = x.gram();
    let top = largest_eigenvalue_psd(&g, 1e-14, 10_000);
    // smallest eigenvalue via the top eigenvalue of (top·I − G)
    let mut shifted = g.clone();
    shifted.scale(-1.0);
    for i in 0..6 {
        shifted.set(i, i, shifted.get(i, i) + top);
    }
    let bottom = top - largest_eigenvalue_psd(&shifted, 1e-14, 10_000);
    assert!(top / bottom <= 2.0, "{}", top / bottom);
}
