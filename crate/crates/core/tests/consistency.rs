//! Cross-module consistency: the continuous synthesis, the exact tree, and
//! the Monte Carlo simulator must tell one story.

use mflq_core::chain::ChainGenerator;
use mflq_core::eta::solve_eta;
use mflq_core::montecarlo::{simulate_closed_loop, ClosedLoopStrategy, SimConfig};
use mflq_core::problem::{split, Field, ProblemSpec, TimeGrid, FLUCT, MEAN};
use mflq_core::riccati::{iterate_strongly_regular, solve_bsdre, IterateConfig, SolverConfig};
use mflq_core::tree::{
    build_tree, closed_loop_rollout, cost_of_state, solve_open_loop, verify_decoupling,
    AdaptedProcess,
};
use nalgebra::{DMatrix, DVector};

fn two_regime_mean_field(steps: usize) -> ProblemSpec {
    let grid = TimeGrid::new(0.0, 0.5, steps).unwrap();
    let chain =
        ChainGenerator::new(DMatrix::from_row_slice(2, 2, &[-0.8, 0.8, 0.6, -0.6])).unwrap();
    let mut spec = ProblemSpec::zeros(1, 1, chain, grid).unwrap();
    let per = |vals: [f64; 2]| move |e: usize, _t: f64| DMatrix::from_element(1, 1, vals[e]);
    let f = |g: &dyn Fn(usize, f64) -> DMatrix<f64>| Field::sample(2, &grid, g);
    spec.dynamics.a = f(&per([0.3, -0.2]));
    spec.dynamics.a_bar = f(&per([0.1, 0.1]));
    spec.dynamics.b = f(&per([1.0, 1.0]));
    spec.dynamics.b_bar = f(&per([0.2, 0.2]));
    spec.dynamics.c = f(&per([0.25, 0.15]));
    spec.dynamics.d = f(&per([0.15, 0.15]));
    spec.cost.q = f(&per([1.0, 0.8]));
    spec.cost.q_bar = f(&per([0.3, 0.3]));
    spec.cost.r = f(&per([1.0, 1.0]));
    spec.dynamics.drift = Field::sample(2, &grid, |e, _| DVector::from_element(1, [0.2, 0.1][e]));
    spec.dynamics.noise = Field::sample(2, &grid, |e, _| DVector::from_element(1, [0.3, 0.25][e]));
    spec.terminal.g[0] = DMatrix::from_element(1, 1, 0.8);
    spec.terminal.g[1] = DMatrix::from_element(1, 1, 0.6);
    spec.terminal.g_lin[0] = DVector::from_element(1, 0.3);
    spec.terminal.g_lin[1] = DVector::from_element(1, -0.2);
    spec
}

/// The synthesized feedback can never beat the exact discrete optimum, and
/// the optimality gap closes at first order in the step.
#[test]
fn feedback_dominates_optimum_and_converges() {
    let spec = two_regime_mean_field(1000);
    let sp = split(&spec).unwrap();
    let cfg = SolverConfig::default();
    let ric = solve_bsdre(&sp, &sp.grid, &cfg).unwrap();
    let eta = solve_eta(&sp, &ric, &ric.grid, &cfg).unwrap();
    let x0 = DVector::from_element(1, 1.0);
    let mut gaps = Vec::new();
    for n in [5usize, 10] {
        let tree = build_tree(&spec, 0, n).unwrap();
        let opt = solve_open_loop(&tree, &spec, &x0).unwrap();
        let gains = |t: f64, e: usize| {
            Ok((
                ric.theta_at(FLUCT, t, e)?,
                ric.theta_at(MEAN, t, e)?,
            ))
        };
        let v = AdaptedProcess::from_chain_fn(&tree, 1, tree.num_steps, |t, e| {
            eta.vbar_at(t, e).expect("vbar in range")
        });
        let (u, x) = closed_loop_rollout(&tree, &spec, gains, Some(&v), &x0).unwrap();
        let j_fb = cost_of_state(&tree, &spec, &x, &u).unwrap();
        let gap = j_fb - opt.cost;
        assert!(gap >= -1e-9, "feedback beat the exact optimum: gap {gap}");
        gaps.push(gap);
    }
    let ratio = gaps[0] / gaps[1];
    assert!(
        ratio >= 1.4,
        "optimality gap should shrink at first order: {gaps:?} (ratio {ratio:.2})"
    );
}

/// Monte Carlo and the tree agree within sampling error when both use the
/// same step: with additive noise and a zero mean path the only systematic
/// difference left is the first-order chain kernel, kept below the noise.
#[test]
fn monte_carlo_matches_tree_at_matching_step() {
    let grid = TimeGrid::new(0.0, 0.5, 500).unwrap();
    let chain =
        ChainGenerator::new(DMatrix::from_row_slice(2, 2, &[-0.25, 0.25, 0.2, -0.2])).unwrap();
    let mut spec = ProblemSpec::zeros(1, 1, chain, grid).unwrap();
    spec.dynamics.a = Field::sample(2, &grid, |e, _| DMatrix::from_element(1, 1, [0.4, -0.3][e]));
    spec.dynamics.a_bar.fill(DMatrix::from_element(1, 1, 0.15));
    spec.dynamics.b.fill(DMatrix::from_element(1, 1, 1.0));
    spec.dynamics.noise =
        Field::sample(2, &grid, |e, _| DVector::from_element(1, [0.5, 0.35][e]));
    spec.cost.q = Field::sample(2, &grid, |e, _| DMatrix::from_element(1, 1, [1.0, 0.7][e]));
    spec.cost.r.fill(DMatrix::from_element(1, 1, 1.0));
    spec.terminal.g[0] = DMatrix::from_element(1, 1, 1.0);
    spec.terminal.g[1] = DMatrix::from_element(1, 1, 0.5);

    let sp = split(&spec).unwrap();
    let cfg = SolverConfig::default();
    let ric = solve_bsdre(&sp, &sp.grid, &cfg).unwrap();
    let eta = solve_eta(&sp, &ric, &ric.grid, &cfg).unwrap();
    let strategy = ClosedLoopStrategy::from_solution(&ric, &eta);
    // x0 = 0 kills the mean path, so the tree's discrete conditional mean
    // and the simulator's integrated mean agree exactly (both zero)
    let x0 = DVector::zeros(1);

    let n = 10usize;
    let tree = build_tree(&spec, 0, n).unwrap();
    let gains = |t: f64, e: usize| {
        Ok((
            ric.theta_at(FLUCT, t, e)?,
            ric.theta_at(MEAN, t, e)?,
        ))
    };
    let (u, x) = closed_loop_rollout(&tree, &spec, gains, None, &x0).unwrap();
    let j_tree = cost_of_state(&tree, &spec, &x, &u).unwrap();

    let mc_cfg = SimConfig {
        num_chain_paths: 10_000,
        num_w_paths_per_chain: 1,
        dt_sim: 0.5 / n as f64,
        master_seed: 21,
        antithetic: false,
        threads: 1,
    };
    let rep = simulate_closed_loop(&sp, &strategy, &x0, 0, &mc_cfg).unwrap();
    let gap = (rep.mean - j_tree).abs();
    assert!(
        gap <= 3.0 * rep.std_error,
        "MC {} ± {} vs tree-exact {} (gap {gap:.2e})",
        rep.mean,
        rep.std_error,
        j_tree
    );
}

/// The costate of the oracle optimum matches the continuous decoupling
/// `Y = P₁(X − Π₂X) + P₂Π₂X + η₂` at first order in the step; with zero
/// weights it matches exactly (everything vanishes).
#[test]
fn decoupling_error_shrinks_at_first_order() {
    // single regime keeps depth-16 trees inside the node budget
    let grid = TimeGrid::new(0.0, 1.0, 2000).unwrap();
    let mut spec = ProblemSpec::zeros(1, 1, ChainGenerator::single(), grid).unwrap();
    spec.dynamics.b.fill(DMatrix::from_element(1, 1, 1.0));
    spec.cost.q.fill(DMatrix::from_element(1, 1, 1.0));
    spec.cost.r.fill(DMatrix::from_element(1, 1, 1.0));
    let sp = split(&spec).unwrap();
    let cfg = SolverConfig::default();
    let ric = solve_bsdre(&sp, &sp.grid, &cfg).unwrap();
    let eta = solve_eta(&sp, &ric, &ric.grid, &cfg).unwrap();
    let x0 = DVector::from_element(1, 1.0);
    let mut errors = Vec::new();
    for n in [8usize, 16] {
        let tree = build_tree(&spec, 0, n).unwrap();
        let report = verify_decoupling(&tree, &spec, &sp, &ric, &eta, &x0).unwrap();
        assert!(report.grad_norm < 1e-9, "oracle not at optimum");
        errors.push(report.max_decoupling_error);
    }
    let ratio = errors[0] / errors[1];
    assert!(
        (1.5..=3.0).contains(&ratio),
        "decoupling errors {errors:?}, ratio {ratio:.2}"
    );

    // zero weights: Y ≡ 0 = P X with P ≡ 0, exactly
    let trivial = ProblemSpec::zeros(1, 1, ChainGenerator::single(), grid).unwrap();
    let mut trivial = {
        let mut t = trivial;
        t.cost.r.fill(DMatrix::from_element(1, 1, 1.0));
        t
    };
    trivial.dynamics.b.fill(DMatrix::from_element(1, 1, 1.0));
    let tsp = split(&trivial).unwrap();
    let tric = solve_bsdre(&tsp, &tsp.grid, &cfg).unwrap();
    let teta = solve_eta(&tsp, &tric, &tric.grid, &cfg).unwrap();
    let tree = build_tree(&trivial, 0, 6).unwrap();
    let report = verify_decoupling(&tree, &trivial, &tsp, &tric, &teta, &x0).unwrap();
    assert!(report.max_decoupling_error <= 1e-12);
    assert!(report.j_star.abs() <= 1e-12);
}

/// Matrix-valued case: symmetry is preserved to tolerance, the terminal
/// condition is exact, and the frozen-gain iterates stay bounded below.
#[test]
fn matrix_case_shape_invariants() {
    let grid = TimeGrid::new(0.0, 1.0, 300).unwrap();
    let chain =
        ChainGenerator::new(DMatrix::from_row_slice(2, 2, &[-0.7, 0.7, 0.5, -0.5])).unwrap();
    let mut spec = ProblemSpec::zeros(2, 2, chain, grid).unwrap();
    spec.dynamics
        .a
        .fill(DMatrix::from_row_slice(2, 2, &[0.2, -0.4, 0.3, 0.1]));
    spec.dynamics
        .a_bar
        .fill(DMatrix::from_row_slice(2, 2, &[0.1, 0.0, -0.2, 0.1]));
    spec.dynamics
        .b
        .fill(DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 0.8]));
    spec.dynamics
        .c
        .fill(DMatrix::from_row_slice(2, 2, &[0.3, 0.1, -0.1, 0.2]));
    spec.dynamics
        .d
        .fill(DMatrix::from_row_slice(2, 2, &[0.2, 0.0, 0.1, 0.1]));
    spec.cost
        .q
        .fill(DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.8]));
    spec.cost
        .s
        .fill(DMatrix::from_row_slice(2, 2, &[0.1, 0.0, -0.1, 0.2]));
    spec.cost.r.fill(DMatrix::identity(2, 2) * 1.5);
    spec.terminal.g[0] = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.1, 0.5]);
    spec.terminal.g[1] = DMatrix::from_row_slice(2, 2, &[0.4, -0.1, -0.1, 0.7]);
    let sp = split(&spec).unwrap();
    let cfg = SolverConfig::default();
    let sol = solve_bsdre(&sp, &sp.grid, &cfg).unwrap();
    for part in 0..2 {
        for e in 0..2 {
            // terminal condition exact
            assert_eq!(sol.p[part].at(e, 300), &sp.g[part][e]);
            for j in 0..=300 {
                let p = sol.p[part].at(e, j);
                assert!((p - p.transpose()).amax() < 1e-10, "asymmetry at {j}");
            }
        }
    }

    // iterates of the frozen-gain scheme stay bounded below (PSD data keeps
    // them PSD up to integrator error)
    let report = iterate_strongly_regular(&sp, &sp.grid, &IterateConfig::default()).unwrap();
    assert!(report.converged);
    for part in 0..2 {
        for e in 0..2 {
            for j in (0..=300).step_by(50) {
                let min_eig = mflq_core::linalg::min_eig_sym(report.solution.p[part].at(e, j));
                assert!(min_eig >= -1e-9, "iterate dipped below the bound: {min_eig}");
            }
        }
    }
}
