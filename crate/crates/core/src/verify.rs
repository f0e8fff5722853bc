//! Acceptance checks: every shipped claim about the solvers, each packaged
//! as a runnable criterion with a pass/fail outcome and a one-line detail.
//!
//! The checks are oracle-based at desk scale: closed forms where available,
//! the exact tree otherwise, and Monte Carlo only for statements that are
//! themselves statistical. All randomness is seeded, so outcomes are
//! reproducible.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::chain::ChainGenerator;
use crate::error::Result;
use crate::eta::{solve_eta, value_function, EtaSolution};
use crate::linalg;
use crate::montecarlo::{compare_many, ClosedLoopStrategy, SimConfig};
use crate::problem::{
    split, ProblemSpec, SplitCoefficients, TimeGrid, FLUCT, MEAN,
};
use crate::riccati::{
    iterate_strongly_regular, solve_bsdre, IterateConfig, RiccatiSolution, SolverConfig,
};
use crate::tree::{
    build_tree, closed_loop_rollout, cost_of_state, cost_of_state_split, forward_state,
    gradient_exact, conditioning_consistency_check, project_chain, solve_open_loop,
    AdaptedProcess, TreeModel,
};

/// Outcome of one acceptance criterion.
#[derive(Debug, Clone)]
pub struct CriterionOutcome {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CriterionOutcome {
    pub fn line(&self) -> String {
        format!(
            "criterion {:2} ({}): {} — {}",
            self.id,
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.detail
        )
    }
}

fn outcome(id: usize, name: &'static str, res: Result<(bool, String)>) -> CriterionOutcome {
    match res {
        Ok((passed, detail)) => CriterionOutcome {
            id,
            name,
            passed,
            detail,
        },
        Err(e) => CriterionOutcome {
            id,
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

/// Run every criterion in order.
pub fn run_all() -> Vec<CriterionOutcome> {
    vec![
        criterion_1_scalar_closed_form(),
        criterion_2_defect_order(),
        criterion_3_monotone_iteration(),
        criterion_4_strong_regularity_floor(),
        criterion_5_oracle_agreement(),
        criterion_6_stationarity(),
        criterion_7_gradient_check(),
        criterion_8_projection_suite(),
        criterion_9_cost_identities(),
        criterion_10_closed_loop_optimality(),
        criterion_11_null_space_invariance(),
    ]
}

// ---------------------------------------------------------------------------
// shared problem builders
// ---------------------------------------------------------------------------

fn single_chain() -> ChainGenerator {
    ChainGenerator::single()
}

fn tanh_spec(steps: usize) -> Result<ProblemSpec> {
    let grid = TimeGrid::new(0.0, 1.0, steps)?;
    let mut spec = ProblemSpec::zeros(1, 1, single_chain(), grid)?;
    spec.dynamics.b.fill(DMatrix::from_element(1, 1, 1.0));
    spec.cost.q.fill(DMatrix::from_element(1, 1, 1.0));
    spec.cost.r.fill(DMatrix::from_element(1, 1, 1.0));
    Ok(spec)
}

fn random_psd(rng: &mut StdRng, n: usize, floor: f64, scale: f64) -> DMatrix<f64> {
    let k = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0) * scale);
    k.transpose() * k / n as f64 + DMatrix::identity(n, n) * floor
}

fn random_mat(rng: &mut StdRng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0) * scale)
}

/// Random 2-regime problem, n = m = 2, constant coefficients with
/// `R_i ⪰ I`, `Q_i ⪰ 0`, `G_i ⪰ 0`, mild mean-field terms.
fn random_two_regime_spec(seed: u64, steps: usize) -> Result<ProblemSpec> {
    let mut rng = StdRng::seed_from_u64(seed);
    let grid = TimeGrid::new(0.0, 1.0, steps)?;
    let chain = ChainGenerator::new(DMatrix::from_row_slice(
        2,
        2,
        &[-0.7, 0.7, 0.5, -0.5],
    ))?;
    let mut spec = ProblemSpec::zeros(2, 2, chain, grid)?;
    for e in 0..2 {
        let set_all = |field: &mut crate::problem::Field<DMatrix<f64>>, v: DMatrix<f64>| {
            for j in 0..grid.num_points() {
                field.set(e, j, v.clone());
            }
        };
        set_all(&mut spec.dynamics.a, random_mat(&mut rng, 2, 2, 0.6));
        set_all(&mut spec.dynamics.a_bar, random_mat(&mut rng, 2, 2, 0.3));
        set_all(&mut spec.dynamics.b, random_mat(&mut rng, 2, 2, 0.8));
        set_all(&mut spec.dynamics.b_bar, random_mat(&mut rng, 2, 2, 0.2));
        set_all(&mut spec.dynamics.c, random_mat(&mut rng, 2, 2, 0.4));
        set_all(&mut spec.dynamics.c_bar, random_mat(&mut rng, 2, 2, 0.2));
        set_all(&mut spec.dynamics.d, random_mat(&mut rng, 2, 2, 0.3));
        set_all(&mut spec.dynamics.d_bar, random_mat(&mut rng, 2, 2, 0.1));
        set_all(&mut spec.cost.q, random_psd(&mut rng, 2, 0.0, 0.8));
        set_all(&mut spec.cost.q_bar, random_psd(&mut rng, 2, 0.0, 0.4));
        set_all(&mut spec.cost.r, random_psd(&mut rng, 2, 1.0, 0.5));
        set_all(&mut spec.cost.r_bar, random_psd(&mut rng, 2, 0.0, 0.3));
        spec.terminal.g[e] = random_psd(&mut rng, 2, 0.0, 0.7);
        spec.terminal.g_bar[e] = random_psd(&mut rng, 2, 0.0, 0.3);
    }
    Ok(spec)
}

/// Scalar 2-regime problem with mean-field terms and nonhomogeneous data,
/// mild enough for coarse trees (`dt·max rate ≤ 0.5` down to N = 4).
fn scalar_two_regime_spec(steps: usize) -> Result<ProblemSpec> {
    scalar_two_regime_spec_horizon(steps, 0.5)
}

fn scalar_two_regime_spec_horizon(steps: usize, horizon: f64) -> Result<ProblemSpec> {
    let grid = TimeGrid::new(0.0, horizon, steps)?;
    let chain = ChainGenerator::new(DMatrix::from_row_slice(
        2,
        2,
        &[-0.8, 0.8, 0.6, -0.6],
    ))?;
    let mut spec = ProblemSpec::zeros(1, 1, chain, grid)?;
    let per_regime = |vals: [f64; 2]| move |e: usize, _t: f64| DMatrix::from_element(1, 1, vals[e]);
    let sample_mat = |f: &dyn Fn(usize, f64) -> DMatrix<f64>| {
        crate::problem::Field::sample(2, &grid, f)
    };
    spec.dynamics.a = sample_mat(&per_regime([0.3, -0.2]));
    spec.dynamics.a_bar = sample_mat(&per_regime([0.1, 0.1]));
    spec.dynamics.b = sample_mat(&per_regime([1.0, 1.0]));
    spec.dynamics.b_bar = sample_mat(&per_regime([0.2, 0.2]));
    spec.dynamics.c = sample_mat(&per_regime([0.25, 0.15]));
    spec.dynamics.c_bar = sample_mat(&per_regime([0.1, 0.1]));
    spec.dynamics.d = sample_mat(&per_regime([0.15, 0.15]));
    spec.cost.q = sample_mat(&per_regime([1.0, 0.8]));
    spec.cost.q_bar = sample_mat(&per_regime([0.3, 0.3]));
    spec.cost.s = sample_mat(&per_regime([0.1, 0.1]));
    spec.cost.r = sample_mat(&per_regime([1.0, 1.0]));
    spec.cost.r_bar = sample_mat(&per_regime([0.2, 0.2]));
    spec.dynamics.drift =
        crate::problem::Field::sample(2, &grid, |e, _| DVector::from_element(1, [0.2, 0.1][e]));
    spec.dynamics.noise =
        crate::problem::Field::sample(2, &grid, |e, _| DVector::from_element(1, [0.3, 0.25][e]));
    spec.cost.state_lin =
        crate::problem::Field::sample(2, &grid, |_, _| DVector::from_element(1, 0.1));
    spec.cost.ctrl_lin =
        crate::problem::Field::sample(2, &grid, |_, _| DVector::from_element(1, 0.05));
    spec.terminal.g[0] = DMatrix::from_element(1, 1, 0.8);
    spec.terminal.g[1] = DMatrix::from_element(1, 1, 0.6);
    spec.terminal.g_bar[0] = DMatrix::from_element(1, 1, 0.2);
    spec.terminal.g_bar[1] = DMatrix::from_element(1, 1, 0.2);
    spec.terminal.g_lin[0] = DVector::from_element(1, 0.3);
    spec.terminal.g_lin[1] = DVector::from_element(1, -0.2);
    spec.terminal.g_lin_bar[0] = DVector::from_element(1, 0.1);
    spec.terminal.g_lin_bar[1] = DVector::from_element(1, 0.1);
    Ok(spec)
}

fn solve_pipeline(
    spec: &ProblemSpec,
) -> Result<(SplitCoefficients, RiccatiSolution, EtaSolution)> {
    let sp = split(spec)?;
    let cfg = SolverConfig::default();
    let ric = solve_bsdre(&sp, &sp.grid, &cfg)?;
    let eta = solve_eta(&sp, &ric, &ric.grid, &cfg)?;
    Ok((sp, ric, eta))
}

fn random_control(tree: &TreeModel, dim: usize, rng: &mut StdRng) -> AdaptedProcess {
    let mut u = AdaptedProcess::zero_control(tree, dim);
    for k in 0..u.num_levels() {
        for v in u.levels[k].iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    u
}

// ---------------------------------------------------------------------------
// criteria
// ---------------------------------------------------------------------------

/// Scalar closed form: `P(t) = tanh(T−t)` to 1e-8 at grid 2000 in < 1 s.
pub fn criterion_1_scalar_closed_form() -> CriterionOutcome {
    outcome(1, "scalar closed-form", (|| {
        let started = Instant::now();
        let spec = tanh_spec(2000)?;
        let sp = split(&spec)?;
        let sol = solve_bsdre(&sp, &sp.grid, &SolverConfig::default())?;
        let mut worst = 0.0_f64;
        for j in 0..sol.grid.num_points() {
            let expect = (1.0 - sol.grid.time(j)).tanh();
            for part in 0..2 {
                worst = worst.max((sol.p[part].at(0, j)[(0, 0)] - expect).abs());
            }
        }
        let elapsed = started.elapsed();
        let passed = worst <= 1e-8 && elapsed.as_secs_f64() < 1.0;
        Ok((passed, format!("max |P − tanh| = {worst:.2e}, runtime {elapsed:.2?}")))
    })())
}

/// Riccati defect drops by 16±4 when the step halves, on 5 random
/// 2-regime problems.
pub fn criterion_2_defect_order() -> CriterionOutcome {
    outcome(2, "riccati defect order", (|| {
        let mut details = Vec::new();
        let mut passed = true;
        for seed in 0..5u64 {
            let coarse = {
                let spec = random_two_regime_spec(1000 + seed, 48)?;
                let sp = split(&spec)?;
                solve_bsdre(&sp, &sp.grid, &SolverConfig::default())?.residual_norm
            };
            let fine = {
                let spec = random_two_regime_spec(1000 + seed, 96)?;
                let sp = split(&spec)?;
                solve_bsdre(&sp, &sp.grid, &SolverConfig::default())?.residual_norm
            };
            let ratio = coarse / fine;
            if !(12.0..=20.0).contains(&ratio) {
                passed = false;
            }
            details.push(format!("{ratio:.1}"));
        }
        Ok((passed, format!("defect ratios on halving: [{}] (want 16±4)", details.join(", "))))
    })())
}

/// Frozen-gain iteration: monotone within 1e-7, fixed point matches the
/// direct solve within 1e-6, at most 30 iterations.
pub fn criterion_3_monotone_iteration() -> CriterionOutcome {
    outcome(3, "monotone iteration", (|| {
        let mut passed = true;
        let mut details = Vec::new();
        for seed in 0..5u64 {
            let spec = random_two_regime_spec(1000 + seed, 400)?;
            let sp = split(&spec)?;
            let report = iterate_strongly_regular(
                &sp,
                &sp.grid,
                &IterateConfig {
                    k_max: 30,
                    tol: 1e-8,
                    ..Default::default()
                },
            )?;
            let worst_mono = report
                .steps
                .iter()
                .filter_map(|s| s.min_monotone_eig)
                .fold(f64::INFINITY, f64::min);
            let direct = solve_bsdre(&sp, &sp.grid, &SolverConfig::default())?;
            let mut gap = 0.0_f64;
            for part in 0..2 {
                for e in 0..2 {
                    for j in 0..sp.grid.num_points() {
                        gap = gap.max(
                            (report.solution.p[part].at(e, j) - direct.p[part].at(e, j)).amax(),
                        );
                    }
                }
            }
            if worst_mono < -1e-7 || gap > 1e-6 || report.iterations > 30 {
                passed = false;
            }
            details.push(format!(
                "k*={} mono={worst_mono:.1e} gap={gap:.1e}",
                report.iterations
            ));
        }
        Ok((passed, details.join("; ")))
    })())
}

/// With `D = D̄ = 0` and `R ⪰ δI` the computed floor is δ to 1e-9.
pub fn criterion_4_strong_regularity_floor() -> CriterionOutcome {
    outcome(4, "strong regularity floor", (|| {
        let delta = 0.5;
        let mut spec = random_two_regime_spec(77, 200)?;
        let zero = DMatrix::zeros(2, 2);
        spec.dynamics.d.fill(zero.clone());
        spec.dynamics.d_bar.fill(zero.clone());
        spec.cost.r.fill(DMatrix::identity(2, 2) * delta);
        spec.cost.r_bar.fill(zero);
        let sp = split(&spec)?;
        let sol = solve_bsdre(&sp, &sp.grid, &SolverConfig::default())?;
        let passed = sol.delta_min() >= delta - 1e-9 && sol.delta_min() <= delta + 1e-9;
        Ok((passed, format!("delta_min = {:.12} (delta = {delta})", sol.delta_min())))
    })())
}

/// Tree optimum vs the Riccati value: first-order agreement in the step and
/// within 5% at N = 8, under 60 s.
pub fn criterion_5_oracle_agreement() -> CriterionOutcome {
    outcome(5, "oracle agreement", (|| {
        let started = Instant::now();
        let spec = scalar_two_regime_spec(2000)?;
        let (sp, ric, eta) = solve_pipeline(&spec)?;
        let x0 = DVector::from_element(1, 1.0);
        let v = value_function(0.0, &x0, 0, &ric, &eta, &sp, &SolverConfig::default())?;
        let mut errs = Vec::new();
        for n in [4usize, 6, 8] {
            let tree = build_tree(&spec, 0, n)?;
            let sol = solve_open_loop(&tree, &spec, &x0)?;
            errs.push((n, (sol.cost - v).abs()));
        }
        let (n0, e0) = errs[0];
        let (n2, e2) = errs[2];
        let order = (e0 / e2).ln() / ((n2 as f64 / n0 as f64).ln());
        let rel = e2 / v.abs().max(1e-12);
        let elapsed = started.elapsed();
        let passed = order >= 0.8 && rel <= 0.05 && elapsed.as_secs_f64() < 60.0;
        Ok((
            passed,
            format!(
                "V = {v:.6}, errors {:?}, order {order:.2}, rel@N=8 {:.2}%, runtime {elapsed:.2?}",
                errs.iter().map(|(n, e)| format!("N{n}:{e:.2e}")).collect::<Vec<_>>(),
                rel * 100.0
            ),
        ))
    })())
}

/// Node-wise stationarity: ~1e-10 at the tree optimum, O(Δt) for the
/// Riccati feedback evaluated on the tree.
pub fn criterion_6_stationarity() -> CriterionOutcome {
    outcome(6, "stationarity", (|| {
        let spec = scalar_two_regime_spec(2000)?;
        let (_sp, ric, eta) = solve_pipeline(&spec)?;
        let x0 = DVector::from_element(1, 1.0);

        // (a) exact optimum
        let tree6 = build_tree(&spec, 0, 6)?;
        let zero = AdaptedProcess::zero_control(&tree6, 1);
        let scale = 1.0 + gradient_exact(&tree6, &spec, &zero, &x0)?.max_abs(&tree6);
        let sol = solve_open_loop(&tree6, &spec, &x0)?;
        let opt_ok = sol.grad_norm <= 1e-10 * scale;

        // (b) continuous feedback on the tree: residual O(Δt)
        let mut residuals = Vec::new();
        for n in [5usize, 10] {
            let tree = build_tree(&spec, 0, n)?;
            let gains = |t: f64, e: usize| {
                Ok((
                    ric.theta_at(FLUCT, t, e)?,
                    ric.theta_at(MEAN, t, e)?,
                ))
            };
            let v = AdaptedProcess::from_chain_fn(&tree, 1, tree.num_steps, |t, e| {
                eta.vbar_at(t, e).expect("vbar in range")
            });
            let (u, _x) = closed_loop_rollout(&tree, &spec, gains, Some(&v), &x0)?;
            let grad = gradient_exact(&tree, &spec, &u, &x0)?;
            residuals.push(grad.max_abs(&tree));
        }
        let ratio = residuals[0] / residuals[1];
        let dt_coarse = 0.5 / 5.0;
        let feedback_ok = ratio >= 1.4 && residuals[0] <= 2.0 * scale * dt_coarse;
        Ok((
            opt_ok && feedback_ok,
            format!(
                "optimum grad {:.1e} (tol {:.1e}); feedback residual N5 {:.2e}, N10 {:.2e}, ratio {ratio:.2}",
                sol.grad_norm,
                1e-10 * scale,
                residuals[0],
                residuals[1]
            ),
        ))
    })())
}

/// Adjoint gradient vs central finite differences: 20 directions × 5
/// random problems at 1e-6 relative.
pub fn criterion_7_gradient_check() -> CriterionOutcome {
    outcome(7, "gradient check", (|| {
        let mut worst = 0.0_f64;
        for seed in 0..5u64 {
            let spec = random_two_regime_spec(3000 + seed, 64)?;
            let tree = build_tree(&spec, (seed % 2) as usize, 4)?;
            let mut rng = StdRng::seed_from_u64(500 + seed);
            let x0 = DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
            let u = random_control(&tree, 2, &mut rng);
            let grad = gradient_exact(&tree, &spec, &u, &x0)?;
            let eps = 1e-5;
            for _ in 0..20 {
                let dir = random_control(&tree, 2, &mut rng);
                let mut up = u.clone();
                up.axpy(eps, &dir);
                let mut um = u.clone();
                um.axpy(-eps, &dir);
                let jp = crate::tree::cost_exact(&tree, &spec, &up, &x0)?;
                let jm = crate::tree::cost_exact(&tree, &spec, &um, &x0)?;
                let fd = (jp - jm) / (2.0 * eps);
                let an = grad.weighted_dot(&dir, &tree);
                worst = worst.max((fd - an).abs() / (1.0 + an.abs()));
            }
        }
        Ok((worst <= 1e-6, format!("max relative gradient error {worst:.2e}")))
    })())
}

/// Exact projection identities and conditional-expectation consistency over
/// 100 randomized processes.
pub fn criterion_8_projection_suite() -> CriterionOutcome {
    outcome(8, "projection suite", (|| {
        let spec = scalar_two_regime_spec(64)?;
        let tree = build_tree(&spec, 0, 6)?;
        let mut rng = StdRng::seed_from_u64(4242);
        let mut worst_idem = 0.0_f64;
        let mut worst_adj = 0.0_f64;
        let mut worst_orth = 0.0_f64;
        let mut worst_w = 0.0_f64;
        let mut cond_ok = true;

        // W as a process (levels 0..=N)
        let mut w_proc = AdaptedProcess::zeros(&tree, 1, tree.num_steps + 1);
        for k in 1..=tree.num_steps {
            for i in 0..tree.levels[k].num_nodes() {
                let mut acc = 0.0;
                let mut node = i;
                for _ in 0..k {
                    acc += tree.branch_dw(node % (2 * tree.num_regimes));
                    node /= 2 * tree.num_regimes;
                }
                w_proc.node_mut(k, i)[0] = acc;
            }
        }

        for trial in 0..100 {
            let phi = random_control(&tree, 1, &mut rng);
            let psi = random_control(&tree, 1, &mut rng);
            let p_phi = project_chain(&tree, &phi);
            let pp_phi = project_chain(&tree, &p_phi);
            worst_idem = worst_idem.max(pp_phi.sub(&p_phi).max_abs(&tree));
            let lhs = p_phi.weighted_dot(&psi, &tree);
            let rhs = phi.weighted_dot(&project_chain(&tree, &psi), &tree);
            worst_adj = worst_adj.max((lhs - rhs).abs());
            let perp = phi.sub(&p_phi);
            worst_orth =
                worst_orth.max(perp.weighted_dot(&project_chain(&tree, &psi), &tree).abs());

            // stochastic integral of an adapted integrand ⊥ chain space
            let mut integral = AdaptedProcess::zeros(&tree, 1, tree.num_steps + 1);
            for k in 1..=tree.num_steps {
                for i in 0..tree.levels[k].num_nodes() {
                    let parent = i / (2 * tree.num_regimes);
                    let local = i % (2 * tree.num_regimes);
                    let prev = integral.node(k - 1, parent)[0];
                    let phi_prev = phi.node(k - 1, parent)[0];
                    integral.node_mut(k, i)[0] = prev + phi_prev * tree.branch_dw(local);
                }
            }
            let chain_meas = AdaptedProcess::from_chain_fn(
                &tree,
                1,
                tree.num_steps + 1,
                |t, e| DVector::from_element(1, (1.0 + t) * (e as f64 + 0.5)),
            );
            worst_w = worst_w.max(integral.weighted_dot(&chain_meas, &tree).abs());
            // and the projection of the integral itself vanishes
            worst_w = worst_w.max(project_chain(&tree, &integral).max_abs(&tree));

            // conditional expectation given chain prefix vs full chain path
            let level = 1 + (trial % tree.num_steps);
            let nn = tree.levels[level].num_nodes();
            let xi: Vec<f64> = (0..nn).map(|_| rng.gen_range(-2.0..2.0)).collect();
            cond_ok &= conditioning_consistency_check(&tree, level, &xi);
        }
        // W itself is orthogonal to the chain space
        worst_w = worst_w.max(project_chain(&tree, &w_proc).max_abs(&tree));

        let tol = 1e-12;
        let passed = worst_idem <= tol
            && worst_adj <= tol
            && worst_orth <= tol
            && worst_w <= tol
            && cond_ok;
        Ok((
            passed,
            format!(
                "idempotence {worst_idem:.1e}, self-adjoint {worst_adj:.1e}, orthogonal {worst_orth:.1e}, dW ⊥ chain {worst_w:.1e}, prefix/full consistency {}",
                if cond_ok { "exact" } else { "VIOLATED" }
            ),
        ))
    })())
}

/// Original vs decomposed cost form (exact), and the feedback-cost identity
/// with continuous-time `P` (first order in the step).
pub fn criterion_9_cost_identities() -> CriterionOutcome {
    outcome(9, "cost identities", (|| {
        // (a) exact equality of the two cost forms
        let spec = scalar_two_regime_spec(64)?;
        let sp = split(&spec)?;
        let tree = build_tree(&spec, 0, 6)?;
        let mut rng = StdRng::seed_from_u64(2024);
        let mut worst_eq = 0.0_f64;
        for _ in 0..5 {
            let u = random_control(&tree, 1, &mut rng);
            let x0 = DVector::from_element(1, rng.gen_range(-1.0..1.0));
            let x = forward_state(&tree, &spec, &u, &x0)?;
            let a = cost_of_state(&tree, &spec, &x, &u)?;
            let b = cost_of_state_split(&tree, &sp, &x, &u)?;
            worst_eq = worst_eq.max((a - b).abs() / (1.0 + a.abs()));
        }

        // (b) homogeneous feedback-cost identity
        let mut homog = scalar_two_regime_spec(2000)?;
        homog.dynamics.drift.fill(DVector::zeros(1));
        homog.dynamics.noise.fill(DVector::zeros(1));
        homog.cost.state_lin.fill(DVector::zeros(1));
        homog.cost.ctrl_lin.fill(DVector::zeros(1));
        for e in 0..2 {
            homog.terminal.g_lin[e] = DVector::zeros(1);
            homog.terminal.g_lin_bar[e] = DVector::zeros(1);
        }
        let (hsp, hric, _) = solve_pipeline(&homog)?;
        let x0 = DVector::from_element(1, 1.0);
        let mut errors = Vec::new();
        for n in [5usize, 10] {
            let tree = build_tree(&homog, 0, n)?;
            // offset: chain-measurable part plus a Brownian-dependent part
            let mut v = AdaptedProcess::from_chain_fn(&tree, 1, tree.num_steps, |t, e| {
                DVector::from_element(1, 0.3 * (1.0 - t) * (e as f64 - 0.4))
            });
            let mut w_part = AdaptedProcess::zero_control(&tree, 1);
            for k in 1..tree.num_steps {
                for i in 0..tree.levels[k].num_nodes() {
                    let mut acc = 0.0;
                    let mut node = i;
                    for _ in 0..k {
                        acc += tree.branch_dw(node % (2 * tree.num_regimes));
                        node /= 2 * tree.num_regimes;
                    }
                    w_part.node_mut(k, i)[0] = 0.2 * acc;
                }
            }
            // keep only the fluctuation part of the Brownian piece
            let w_perp = w_part.sub(&project_chain(&tree, &w_part));
            v.axpy(1.0, &w_perp);

            let gains = |t: f64, e: usize| {
                Ok((
                    hric.theta_at(FLUCT, t, e)?,
                    hric.theta_at(MEAN, t, e)?,
                ))
            };
            let (u, x) = closed_loop_rollout(&tree, &homog, gains, Some(&v), &x0)?;
            let j_tree = cost_of_state(&tree, &homog, &x, &u)?;

            // formula: ½⟨P₂(s,e0)x0,x0⟩ + ½ E ∫ Σ_i ⟨ℛ_i v_i, v_i⟩ dt
            let p2 = hric.p_at(MEAN, 0.0, 0)?;
            let mut formula = (&p2 * &x0).dot(&x0);
            let v2 = project_chain(&tree, &v);
            let v1 = v.sub(&v2);
            for k in 0..tree.num_steps {
                let t = tree.time(k);
                let lv = &tree.levels[k];
                let mut lvl = 0.0;
                for i in 0..lv.num_nodes() {
                    let e = lv.regime[i] as usize;
                    let co = hsp.coeff_at(t, e)?;
                    let p1 = hric.p_at(FLUCT, t, e)?;
                    for (part, vp) in [(FLUCT, &v1), (MEAN, &v2)] {
                        let r_map = &co.r[part] + co.d[part].transpose() * &p1 * &co.d[part];
                        let vv = vp.node(k, i);
                        lvl += lv.prob[i] * r_map[(0, 0)] * vv[0] * vv[0];
                    }
                }
                formula += lvl * tree.dt;
            }
            formula *= 0.5;
            errors.push((j_tree - formula).abs());
        }
        let ratio = errors[0] / errors[1];
        let passed = worst_eq <= 1e-12 && ratio >= 1.4;
        Ok((
            passed,
            format!(
                "cost-form gap {worst_eq:.1e}; feedback identity errors N5 {:.2e}, N10 {:.2e}, ratio {ratio:.2}",
                errors[0], errors[1]
            ),
        ))
    })())
}

/// Synthesized strategy beats 10 random gain perturbations in paired Monte
/// Carlo, within 2 minutes.
pub fn criterion_10_closed_loop_optimality() -> CriterionOutcome {
    outcome(10, "closed-loop optimality", (|| {
        let started = Instant::now();
        let spec = scalar_two_regime_spec(2000)?;
        let (sp, ric, eta) = solve_pipeline(&spec)?;
        let optimal = ClosedLoopStrategy::from_solution(&ric, &eta);
        let x0 = DVector::from_element(1, 1.0);
        let cfg = SimConfig {
            num_chain_paths: 10_000,
            num_w_paths_per_chain: 100,
            dt_sim: 0.005,
            master_seed: 99,
            antithetic: true,
            threads: std::thread::available_parallelism()
                .map(|p| p.get())
                .unwrap_or(1),
        };
        let perturbations: Vec<_> = (0..10u64)
            .map(|k| optimal.perturb_gains(0.1, 7000 + k))
            .collect();
        let reports = compare_many(&sp, &optimal, &perturbations, &x0, 0, &cfg)?;
        let mut passed = true;
        let mut worst_margin = f64::INFINITY;
        for rep in &reports {
            // diff = J_perturbed − J_optimal must not be significantly negative
            let margin = rep.diff_mean + 3.0 * rep.diff_std_error;
            worst_margin = worst_margin.min(margin);
            if margin < 0.0 {
                passed = false;
            }
        }
        let elapsed = started.elapsed();
        if elapsed.as_secs_f64() >= 120.0 {
            passed = false;
        }
        Ok((
            passed,
            format!("worst paired margin {worst_margin:.3e} (≥ 0 wanted), runtime {elapsed:.2?}"),
        ))
    })())
}

/// Two gain/offset selections differing in the null-space component of a
/// rank-deficient `ℛ` give the same tree cost.
pub fn criterion_11_null_space_invariance() -> CriterionOutcome {
    outcome(11, "null-space invariance", (|| {
        // m = 2 with B = [1 0], D = 0, R = diag(1, 0): ℛ = diag(1, 0) is
        // singular, the second control channel touches nothing, and the
        // range condition holds throughout.
        let grid = TimeGrid::new(0.0, 1.0, 200)?;
        let chain = ChainGenerator::new(DMatrix::from_row_slice(
            2,
            2,
            &[-0.5, 0.5, 0.4, -0.4],
        ))?;
        let mut spec = ProblemSpec::zeros(1, 2, chain, grid)?;
        spec.dynamics.a.fill(DMatrix::from_element(1, 1, 0.2));
        spec.dynamics.b.fill(DMatrix::from_row_slice(1, 2, &[1.0, 0.0]));
        spec.dynamics.c.fill(DMatrix::from_element(1, 1, 0.3));
        spec.dynamics.noise.fill(DVector::from_element(1, 0.2));
        spec.cost.q.fill(DMatrix::from_element(1, 1, 1.0));
        spec.cost.r.fill(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]));
        spec.terminal.g[0] = DMatrix::from_element(1, 1, 0.7);
        spec.terminal.g[1] = DMatrix::from_element(1, 1, 0.4);
        spec.terminal.g_lin[0] = DVector::from_element(1, 0.3);
        spec.terminal.g_lin[1] = DVector::from_element(1, 0.3);
        let (sp, ric, eta) = solve_pipeline(&spec)?;
        let _ = &sp;

        let tree = build_tree(&spec, 0, 6)?;
        let x0 = DVector::from_element(1, 1.0);
        let mut rng = StdRng::seed_from_u64(66);
        let null_gain = DMatrix::from_row_slice(2, 1, &[0.0, rng.gen_range(-1.0..1.0)]);
        let null_offset = DVector::from_row_slice(&[0.0, rng.gen_range(-1.0..1.0)]);

        let base_gains = |t: f64, e: usize| {
            Ok((ric.theta_at(FLUCT, t, e)?, ric.theta_at(MEAN, t, e)?))
        };
        let shifted_gains = |t: f64, e: usize| {
            Ok((
                ric.theta_at(FLUCT, t, e)? + &null_gain,
                ric.theta_at(MEAN, t, e)? + &null_gain,
            ))
        };
        let v_base = AdaptedProcess::from_chain_fn(&tree, 2, tree.num_steps, |t, e| {
            eta.vbar_at(t, e).expect("vbar in range")
        });
        let v_shift = AdaptedProcess::from_chain_fn(&tree, 2, tree.num_steps, |t, e| {
            eta.vbar_at(t, e).expect("vbar in range") + &null_offset
        });
        let (u_a, x_a) = closed_loop_rollout(&tree, &spec, base_gains, Some(&v_base), &x0)?;
        let (u_b, x_b) = closed_loop_rollout(&tree, &spec, shifted_gains, Some(&v_shift), &x0)?;
        let j_a = cost_of_state(&tree, &spec, &x_a, &u_a)?;
        let j_b = cost_of_state(&tree, &spec, &x_b, &u_b)?;
        let gap = (j_a - j_b).abs();

        // sanity: the two controls genuinely differ in the null direction
        let ctrl_gap = u_a.sub(&u_b).max_abs(&tree);
        let passed = gap <= 1e-9 && ctrl_gap > 1e-3;
        Ok((
            passed,
            format!("cost gap {gap:.2e} with control gap {ctrl_gap:.2e} (selection changed)"),
        ))
    })())
}

// range-condition helper retained for CLI reporting
pub fn range_condition_summary(split_coeffs: &SplitCoefficients, ric: &RiccatiSolution) -> String {
    let mut worst = 0.0_f64;
    for part in 0..2 {
        for e in 0..split_coeffs.num_regimes() {
            for j in 0..ric.grid.num_points() {
                let t = ric.grid.time(j);
                let Ok(co) = split_coeffs.coeff_at(t, e) else {
                    continue;
                };
                let p_here = [
                    ric.p[FLUCT].at(e, j).clone(),
                    ric.p[MEAN].at(e, j).clone(),
                ];
                let qrs = crate::riccati::eval_qrs(&co, &p_here);
                let r_pinv = linalg::pinv(&qrs.r[part]);
                worst = worst.max(linalg::range_defect(&qrs.r[part], &r_pinv, &qrs.s[part]));
            }
        }
    }
    format!("max range-condition defect {worst:.3e}")
}

#[cfg(test)]
mod tests {
    use super::*;

    // The acceptance suite itself lives in tests/acceptance.rs; here only
    // the cheap plumbing is covered.
    #[test]
    fn outcome_line_formats() {
        let o = CriterionOutcome {
            id: 3,
            name: "x",
            passed: true,
            detail: "ok".into(),
        };
        assert!(o.line().contains("PASS"));
    }
}
