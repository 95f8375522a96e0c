use hertzmpc::coupled::{AugmentedState, ContactSystem};
use hertzmpc::rigid_body::{forward_kinematics, ManipulatorModel};
use hertzmpc::scenario::Scenario;
use hertzmpc::soft_contact::ContactParams;
use hertzmpc::trajopt::admm::{self, initialize};
use hertzmpc::trajopt::ddp::{ddp_solve, trajectory_cost, DdpOptions};
use hertzmpc::trajopt::problem::{ContactCost, PlannerDynamics};
use hertzmpc::trajopt::{solve, AdmmConfig, Initialization, Limits, ProblemSpec, Variant, Weights};
use nalgebra::{DVector, Vector3};

fn nominal() -> (Scenario, ContactSystem, ProblemSpec) {
    let sc = Scenario::builtin("nominal").unwrap();
    let sys = sc.system().unwrap();
    let spec = sc.nominal_problem(&sys).unwrap();
    (sc, sys, spec)
}

fn max_abs_diff(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax()
}

fn planar_hold() -> (ContactSystem, ProblemSpec) {
    let model = ManipulatorModel::planar_2dof();
    let sys = ContactSystem::new(model, ContactParams::default());
    let q0 = DVector::from_vec(vec![0.3, 0.8]);
    let target = forward_kinematics(&sys.model, &q0).unwrap().translation.vector;
    let n_knots = 21;
    let spec = ProblemSpec {
        dt: 0.02,
        x0: AugmentedState::new(q0.clone(), DVector::zeros(2), Vector3::zeros()),
        pose_targets: vec![target; n_knots],
        force_targets: vec![0.0; n_knots],
        path_radius: vec![f64::INFINITY; n_knots],
        weights: Weights::default(),
        limits: Limits::from_model(&sys.model),
        sliding_constraint: true,
        posture: q0,
    };
    (sys, spec)
}

#[test]
fn static_hold_converges_immediately() {
    let (sys, spec) = planar_hold();
    for variant in [Variant::Consensus, Variant::Sequential, Variant::TwoBlock] {
        let cfg = AdmmConfig {
            variant,
            ..AdmmConfig::default()
        };
        let sol = solve(&sys, &spec, &cfg, None).unwrap();
        assert!(sol.converged, "{variant}");
        assert!(sol.iterations() <= 2, "{variant}: {} iterations", sol.iterations());
        let last = sol.trace.last().unwrap();
        assert!(last.max_residual() < 1e-10, "{variant}: {last:?}");
    }
}

#[test]
fn dual_updates_follow_residuals() {
    let (_, sys, spec) = nominal();
    let mut cfg = Scenario::builtin("nominal").unwrap().solver;
    cfg.max_iters = 1;
    let n = sys.n_joints();
    for variant in [Variant::Consensus, Variant::Sequential, Variant::TwoBlock] {
        cfg.variant = variant;
        let first = solve(&sys, &spec, &cfg, None).unwrap();
        let before = Initialization::shifted(&first, 0);
        let prev = before.duals.clone();
        let second = solve(&sys, &spec, &cfg, Some(before)).unwrap();
        let d = &second.duals;
        for i in 0..=spec.horizon() {
            let q = second.xs[i].rows(0, n).into_owned();
            let lambda = second.xs[i].rows(n, n + 3).into_owned();
            let dj = &d.v_j[i] - &prev.v_j[i];
            assert!(max_abs_diff(&dj, &(&q - &second.q_bar[i])) < 1e-12, "{variant} v_j at {i}");
            let df = &d.v_f[i] - &prev.v_f[i];
            assert!(max_abs_diff(&df, &(&lambda - &second.lambda_bar[i])) < 1e-12, "{variant} v_f at {i}");
            let dik = &d.v_ik[i] - &prev.v_ik[i];
            let expected = match variant {
                Variant::Consensus => &second.q_hat[i] - &second.q_bar[i],
                Variant::Sequential => &q - &second.q_hat[i],
                _ => DVector::zeros(n),
            };
            assert!(max_abs_diff(&dik, &expected) < 1e-12, "{variant} v_ik at {i}");
        }
        for i in 0..spec.horizon() {
            let du = &d.v_u[i] - &prev.v_u[i];
            assert!(max_abs_diff(&du, &(&second.us[i] - &second.u_bar[i])) < 1e-12, "{variant} v_u at {i}");
        }
    }
}

#[test]
fn returned_trajectory_is_a_rollout() {
    let (sc, sys, spec) = nominal();
    let sol = solve(&sys, &spec, &sc.solver, None).unwrap();
    let mut x = spec.x0.to_vector();
    assert!(max_abs_diff(&x, &sol.xs[0]) < 1e-12);
    for (i, u) in sol.us.iter().enumerate() {
        x = sys.step_vec(&x, u, spec.dt).unwrap();
        assert!(max_abs_diff(&x, &sol.xs[i + 1]) < 1e-10, "knot {}", i + 1);
    }
}

#[test]
fn consensus_meets_budget_on_nominal_task() {
    let (sc, sys, spec) = nominal();
    let cfg = sc.solver.clone();
    assert_eq!(cfg.variant, Variant::Consensus);
    assert!(cfg.max_iters <= 5 && cfg.ddp.max_iters <= 10);
    let sol = solve(&sys, &spec, &cfg, None).unwrap();
    assert!(sol.converged);
    let last = sol.trace.last().unwrap();
    assert!(last.max_residual() <= 1e-2);
    assert_eq!(sol.trace.len(), sol.iterations());
    assert_eq!(last.cumulative_ddp_iters, sol.ddp_iterations);
    assert_eq!(sol.xs.len(), spec.horizon() + 1);
    assert_eq!(sol.us.len(), spec.horizon());
}

#[test]
fn active_torque_bounds_hold_after_convergence() {
    let (sc, sys, mut spec) = nominal();
    let free = solve(&sys, &spec, &sc.solver, None).unwrap();
    // Cap each loaded joint just below its unconstrained peak torque.
    let n = sys.n_joints();
    let mut active = 0;
    for j in 0..n {
        let peak = free.us.iter().map(|u| u[j].abs()).fold(0.0, f64::max);
        if peak > 1.0 {
            let lo = free.us.iter().map(|u| u[j]).fold(f64::INFINITY, f64::min);
            let hi = free.us.iter().map(|u| u[j]).fold(f64::NEG_INFINITY, f64::max);
            spec.limits.u_lower[j] = lo.min(0.0) - 1.0;
            spec.limits.u_upper[j] = lo.max(0.0) + 0.98 * (hi - lo.max(0.0));
            active += 1;
        }
    }
    assert!(active > 0);
    // Active torque boxes need a stiffer torque consensus than the shipped default.
    let mut cfg = sc.solver.clone();
    cfg.rho_u = 3.0;
    cfg.max_iters = 30;
    for variant in [Variant::Consensus, Variant::Sequential, Variant::TwoBlock] {
        cfg.variant = variant;
        let sol = solve(&sys, &spec, &cfg, None).unwrap();
        assert!(sol.converged, "{variant}: {:?}", sol.trace.last());
        let r_u = sol.trace.last().unwrap().r_u;
        let mut worst: f64 = 0.0;
        for (u, ub) in sol.us.iter().zip(&sol.u_bar) {
            for j in 0..n {
                assert!(ub[j] >= spec.limits.u_lower[j] - 1e-6 && ub[j] <= spec.limits.u_upper[j] + 1e-6);
                let excess = (u[j] - spec.limits.u_upper[j]).max(spec.limits.u_lower[j] - u[j]).max(0.0);
                worst = worst.max(excess);
            }
        }
        // Any remaining violation of the dynamics copy is bounded by the consensus residual.
        assert!(worst <= r_u * (spec.horizon() as f64).sqrt() + 1e-6, "{variant}: {worst} vs r_u {r_u}");
    }
}

/// Smooth instance (planar arm off contact) so that every method reaches the same
/// local minimum; with friction the cost is non-smooth where the sliding direction flips.
#[test]
fn unconstrained_variants_agree_on_cost() {
    let (sys, mut spec) = planar_hold();
    let p0 = spec.pose_targets[0];
    let k = spec.pose_targets.len();
    for (i, t) in spec.pose_targets.iter_mut().enumerate() {
        let s = i as f64 / (k - 1) as f64;
        *t = p0 + Vector3::new(-0.15 * s, 0.1 * s * s, 0.0);
    }
    spec.weights = Weights {
        w_p: 100.0,
        r_ctrl: 1e-2,
        ..Weights::default()
    };
    spec.limits = Limits::unbounded(2);
    spec.sliding_constraint = false;

    let mut cfg = AdmmConfig {
        rho_j: 10.0,
        rho_u: 0.1,
        rho_f: 0.1,
        tolerance: 1e-6,
        max_iters: 500,
        ..AdmmConfig::default()
    };
    cfg.ddp.max_iters = 100;
    cfg.ddp.rel_tol = 1e-14;
    let costs: Vec<(Variant, f64)> = [Variant::Vanilla, Variant::Consensus, Variant::Sequential]
        .into_iter()
        .map(|variant| {
            cfg.variant = variant;
            let sol = solve(&sys, &spec, &cfg, None).unwrap();
            (variant, sol.trace.last().unwrap().cost)
        })
        .collect();
    let reference = costs[0].1;
    for (variant, cost) in &costs[1..] {
        let rel = (cost - reference).abs() / reference.abs();
        assert!(rel <= 1e-4, "{variant}: {cost} vs vanilla {reference} (rel {rel:.2e})");
    }
}

#[test]
fn ddp_cost_does_not_increase_on_nominal_task() {
    let (_, sys, spec) = nominal();
    let init = initialize(&sys, &spec, &AdmmConfig::default()).unwrap();
    let mut cost = ContactCost::tracking(&sys, &spec);
    cost.pose = true;
    let dynamics = PlannerDynamics { sys: &sys, dt: spec.dt };
    let x0 = spec.x0.to_vector();
    let run = |iters: usize| {
        let opts = DdpOptions {
            max_iters: iters,
            ..DdpOptions::default()
        };
        let sol = ddp_solve(&dynamics, &cost, &x0, &init.warm, &opts).unwrap();
        trajectory_cost(&cost, &sol.xs, &sol.us)
    };
    let costs: Vec<f64> = [1, 2, 3, 5, 10].into_iter().map(run).collect();
    assert!(costs.windows(2).all(|w| w[1] <= w[0]), "{costs:?}");
}

#[test]
fn vanilla_records_a_residual_trace() {
    let (sc, sys, spec) = nominal();
    let cfg = AdmmConfig {
        variant: Variant::Vanilla,
        ..sc.solver.clone()
    };
    let sol = solve(&sys, &spec, &cfg, None).unwrap();
    assert!(!sol.trace.is_empty());
    assert!(sol.trace.rows.iter().all(|r| r.r_ik.is_finite() && r.r_j >= 0.0));
}

#[test]
fn solver_config_from_toml() {
    let cfg = admm::config_from_toml_str("variant = \"sequential\"\nrho_j = 2.5\n", "cfg").unwrap();
    assert_eq!(cfg.variant, Variant::Sequential);
    assert_eq!(cfg.rho_j, 2.5);
    assert_eq!(cfg.rho_u, 1.0);
    assert!(admm::config_from_toml_str("variant = \"sqp\"\n", "cfg").is_err());
    assert!(admm::config_from_toml_str("rho_j = -1.0\n", "cfg").is_err());
    assert!(admm::config_from_toml_str("rho = 1.0\n", "cfg").is_err());
}
