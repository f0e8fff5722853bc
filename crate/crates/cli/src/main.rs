//! Batch front-end: load a problem file, run a pipeline, emit reports and
//! CSV artifacts into the output directory.
//!
//! Commands (`--command`):
//! - `solve` — Riccati + offset solve: `riccati.csv`, `eta.csv`,
//!   `value.csv`, `regularity.txt`
//! - `iterate` — frozen-gain iteration: `iterate.csv`
//! - `tree-check` — exact-tree oracle report: `oracle_report.txt`
//!   (optionally `tree_nodes.csv`)
//! - `simulate` — closed-loop Monte Carlo: `mc_report.csv`
//!   (optionally `paths.csv`)
//! - `verify-all` — run the full acceptance suite, plus validation of the
//!   given problem file when one is supplied
//!
//! Hard errors print a machine-readable JSON block on stderr and exit
//! nonzero (2 for problem-file parse errors, 1 otherwise).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use nalgebra::DVector;

use mflq_core::chain::ChainGenerator;
use mflq_core::error::Error;
use mflq_core::eta::{solve_eta, value_function, EtaSolution};
use mflq_core::montecarlo::{
    dump_paths, simulate_closed_loop, ClosedLoopStrategy, CostReport, MethodTag, SimConfig,
};
use mflq_core::problem::{
    load_problem, split, validate, InitialCondition, ProblemFile, ProblemSpec, SplitCoefficients,
    TimeGrid, FLUCT, MEAN,
};
use mflq_core::riccati::{
    iterate_strongly_regular, solve_bsdre, IterateConfig, RiccatiSolution, SolverConfig,
};
use mflq_core::tree::{
    build_tree, closed_loop_rollout, cost_of_state, cost_of_state_split, forward_state,
    conditioning_consistency_discrepancy, project_chain, solve_open_loop_with, verify_decoupling, AdaptedProcess,
};
use mflq_core::verify;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Command {
    Solve,
    Iterate,
    Simulate,
    TreeCheck,
    VerifyAll,
}

/// Finite-horizon mean-field LQ control with regime switching: coupled
/// backward Riccati solves, feedback synthesis, exact tree oracle, and
/// Monte Carlo verification.
#[derive(Debug, Parser)]
#[command(name = "mflq", version, about)]
struct Args {
    /// Pipeline to run.
    #[arg(long, value_enum)]
    command: Command,

    /// Problem file (JSON; see the repository README for the schema).
    #[arg(long)]
    problem: Option<PathBuf>,

    /// Time-grid intervals for the backward solves.
    #[arg(long, default_value_t = 2000)]
    grid: usize,

    /// Tree depth N for `tree-check`.
    #[arg(long, default_value_t = 6)]
    tree_depth: usize,

    /// Monte Carlo chain paths.
    #[arg(long, default_value_t = 10_000)]
    paths: usize,

    /// Brownian paths per chain path.
    #[arg(long, default_value_t = 100)]
    w_paths: usize,

    /// Monte Carlo step (must divide the horizon).
    #[arg(long, default_value_t = 0.01)]
    dt_sim: f64,

    /// Master seed for all Monte Carlo streams.
    #[arg(long, default_value_t = 1)]
    seed: u64,

    /// Output directory for CSV/report artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,

    /// Worker-thread cap for Monte Carlo (results do not depend on it).
    #[arg(long)]
    threads: Option<usize>,

    /// Disable antithetic Brownian variates.
    #[arg(long, default_value_t = false)]
    no_antithetic: bool,

    /// Initial state override, comma-separated (defaults to the problem
    /// file's `initial.x0`, else the all-ones vector).
    #[arg(long)]
    x0: Option<String>,

    /// Initial regime override.
    #[arg(long)]
    regime: Option<usize>,

    /// Relative SVD cutoff for pseudo-inverses.
    #[arg(long, default_value_t = 1e-10)]
    tol_svd: f64,

    /// Relative range-condition tolerance.
    #[arg(long, default_value_t = 1e-8)]
    tol_range: f64,

    /// Relative conjugate-gradient tolerance for the tree oracle.
    #[arg(long, default_value_t = 1e-10)]
    tol_cg: f64,

    /// Convergence tolerance for the frozen-gain iteration.
    #[arg(long, default_value_t = 1e-9)]
    tol_iterate: f64,

    /// Cap on frozen-gain iterations.
    #[arg(long, default_value_t = 30)]
    max_iterations: usize,

    /// Write per-node tree dump (`tree-check`) or per-path dump
    /// (`simulate`), capped at this many paths.
    #[arg(long)]
    dump: Option<usize>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(code) => code,
        Err(e) => {
            let kind = match &e {
                Error::Parse(_) => "ParseError",
                Error::InvalidProblem(_) => "InvalidProblem",
                Error::Regularity { .. } => "RegularityError",
                Error::RangeCondition { .. } => "RangeError",
                Error::BlowUp { .. } => "BlowUpError",
                Error::NotStronglyRegular { .. } => "NotStronglyRegular",
                Error::MaxIterations { .. } => "MaxIterations",
                Error::NonConvex { .. } => "NonConvex",
                Error::Budget { .. } => "BudgetExceeded",
                Error::StepTooLarge { .. } => "StepTooLarge",
                Error::TimeOutOfRange { .. } => "TimeOutOfRange",
                Error::RegimeOutOfRange { .. } => "RegimeOutOfRange",
                Error::Io(_) => "IoError",
            };
            let block = serde_json::json!({
                "error": { "kind": kind, "message": e.to_string() }
            });
            eprintln!("{block}");
            if matches!(e, Error::Parse(_)) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

struct Loaded {
    spec: ProblemSpec,
    split: SplitCoefficients,
    x0: DVector<f64>,
    regime: usize,
}

fn load(args: &Args) -> Result<Loaded, Error> {
    let path = args
        .problem
        .as_ref()
        .ok_or_else(|| Error::InvalidProblem("--problem is required for this command".into()))?;
    let ProblemFile { mut spec, initial } = load_problem(path)?;

    // re-grid onto the requested solve grid when it differs
    if args.grid != spec.grid.steps {
        spec = regrid(&spec, args.grid)?;
    }

    let report = validate(&spec);
    if !report.passed() {
        let msgs: Vec<String> = report
            .failures()
            .iter()
            .map(|c| format!("{}: {}", c.name, c.detail))
            .collect();
        return Err(Error::InvalidProblem(msgs.join("; ")));
    }

    let n = spec.state_dim;
    let x0 = match (&args.x0, &initial) {
        (Some(text), _) => {
            let vals: Result<Vec<f64>, _> = text.split(',').map(str::trim).map(str::parse).collect();
            let vals = vals.map_err(|e| Error::InvalidProblem(format!("bad --x0: {e}")))?;
            if vals.len() != n {
                return Err(Error::InvalidProblem(format!(
                    "--x0 has {} entries, state dimension is {n}",
                    vals.len()
                )));
            }
            DVector::from_vec(vals)
        }
        (None, Some(InitialCondition { x0, .. })) => x0.clone(),
        (None, None) => DVector::from_element(n, 1.0),
    };
    let regime = args
        .regime
        .or(initial.as_ref().map(|i| i.regime))
        .unwrap_or(0);
    if regime >= spec.num_regimes() {
        return Err(Error::RegimeOutOfRange {
            regime,
            num_regimes: spec.num_regimes(),
        });
    }

    let split = split(&spec)?;
    Ok(Loaded {
        spec,
        split,
        x0,
        regime,
    })
}

/// Resample a problem onto a different uniform grid (linear interpolation of
/// the stored samples).
fn regrid(spec: &ProblemSpec, steps: usize) -> Result<ProblemSpec, Error> {
    let grid = TimeGrid::new(spec.grid.start, spec.grid.end, steps)?;
    let l = spec.num_regimes();
    let chain = ChainGenerator::new(spec.chain.rates().clone())?;
    let mut out = ProblemSpec::zeros(spec.state_dim, spec.control_dim, chain, grid)?;
    macro_rules! resample {
        ($field:ident . $name:ident) => {
            out.$field.$name = mflq_core::problem::Field::sample(l, &grid, |e, t| {
                let (j, w) = spec.grid.locate(t).expect("inside horizon");
                spec.$field.$name.interp(e, j, w)
            });
        };
    }
    resample!(dynamics.a);
    resample!(dynamics.a_bar);
    resample!(dynamics.b);
    resample!(dynamics.b_bar);
    resample!(dynamics.c);
    resample!(dynamics.c_bar);
    resample!(dynamics.d);
    resample!(dynamics.d_bar);
    resample!(dynamics.drift);
    resample!(dynamics.noise);
    resample!(cost.q);
    resample!(cost.q_bar);
    resample!(cost.s);
    resample!(cost.s_bar);
    resample!(cost.r);
    resample!(cost.r_bar);
    resample!(cost.state_lin);
    resample!(cost.state_lin_bar);
    resample!(cost.ctrl_lin);
    resample!(cost.ctrl_lin_bar);
    out.terminal = spec.terminal.clone();
    Ok(out)
}

fn solver_config(args: &Args) -> SolverConfig {
    SolverConfig {
        pinv_cutoff: args.tol_svd,
        range_tol: args.tol_range,
        ..Default::default()
    }
}

fn sim_config(args: &Args, threads_default: usize) -> SimConfig {
    SimConfig {
        num_chain_paths: args.paths,
        num_w_paths_per_chain: args.w_paths,
        dt_sim: args.dt_sim,
        master_seed: args.seed,
        antithetic: !args.no_antithetic,
        threads: args.threads.unwrap_or(threads_default),
    }
}

fn write(out_dir: &PathBuf, name: &str, contents: &str) -> Result<PathBuf, Error> {
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join(name);
    std::fs::write(&path, contents)?;
    Ok(path)
}

fn solve_pipeline(
    loaded: &Loaded,
    cfg: &SolverConfig,
) -> Result<(RiccatiSolution, EtaSolution), Error> {
    let ric = solve_bsdre(&loaded.split, &loaded.split.grid, cfg)?;
    let eta = solve_eta(&loaded.split, &ric, &ric.grid, cfg)?;
    Ok((ric, eta))
}

fn run(args: &Args) -> Result<ExitCode, Error> {
    match args.command {
        Command::Solve => cmd_solve(args),
        Command::Iterate => cmd_iterate(args),
        Command::Simulate => cmd_simulate(args),
        Command::TreeCheck => cmd_tree_check(args),
        Command::VerifyAll => cmd_verify_all(args),
    }
}

fn cmd_solve(args: &Args) -> Result<ExitCode, Error> {
    let loaded = load(args)?;
    let cfg = solver_config(args);
    let (ric, eta) = solve_pipeline(&loaded, &cfg)?;

    write(&args.out, "riccati.csv", &ric.to_csv())?;
    write(&args.out, "eta.csv", &eta.to_csv())?;
    write(&args.out, "regularity.txt", &ric.regularity_text())?;

    // value table: V(s, x0, e0) for every starting regime, plus the P2 and
    // eta2 entries at the initial time
    let s = loaded.split.grid.start;
    let mut value_csv = String::from("quantity,regime,row,col,value\n");
    for e0 in 0..loaded.spec.num_regimes() {
        let v = value_function(s, &loaded.x0, e0, &ric, &eta, &loaded.split, &cfg)?;
        value_csv.push_str(&format!("V,{e0},0,0,{v:.16e}\n"));
        let p2 = ric.p_at(MEAN, s, e0)?;
        for r in 0..p2.nrows() {
            for c in 0..p2.ncols() {
                value_csv.push_str(&format!("P2,{e0},{r},{c},{:.16e}\n", p2[(r, c)]));
            }
        }
        let et = eta.eta_at(s, e0)?;
        for r in 0..et.len() {
            value_csv.push_str(&format!("eta2,{e0},{r},0,{:.16e}\n", et[r]));
        }
    }
    write(&args.out, "value.csv", &value_csv)?;

    println!("solve: wrote riccati.csv, eta.csv, value.csv, regularity.txt to {}", args.out.display());
    println!("{}", ric.regularity_text().trim_end());
    Ok(ExitCode::SUCCESS)
}

fn cmd_iterate(args: &Args) -> Result<ExitCode, Error> {
    let loaded = load(args)?;
    let report = iterate_strongly_regular(
        &loaded.split,
        &loaded.split.grid,
        &IterateConfig {
            k_max: args.max_iterations,
            tol: args.tol_iterate,
            solver: solver_config(args),
            ..Default::default()
        },
    )?;
    let mut csv = String::from("k,max_delta,min_monotone_eig,delta_min,monotone_ok\n");
    for step in &report.steps {
        let (mono, ok) = match step.min_monotone_eig {
            Some(v) => (format!("{v:.16e}"), (v >= -10.0 * args.tol_iterate).to_string()),
            None => (String::new(), String::new()),
        };
        csv.push_str(&format!(
            "{},{:.16e},{mono},{:.16e},{ok}\n",
            step.k, step.max_delta, step.delta_min
        ));
    }
    write(&args.out, "iterate.csv", &csv)?;
    for warning in &report.hypothesis_warnings {
        println!("warning: {warning}");
    }
    println!(
        "iterate: converged in {} iterations, fixed-point defect {:.3e}, wrote iterate.csv to {}",
        report.iterations,
        report.fixed_point_defect,
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_simulate(args: &Args) -> Result<ExitCode, Error> {
    let loaded = load(args)?;
    let cfg = solver_config(args);
    let (ric, eta) = solve_pipeline(&loaded, &cfg)?;
    let strategy = ClosedLoopStrategy::from_solution(&ric, &eta);
    let sim_cfg = sim_config(args, 1);

    let v = value_function(
        loaded.split.grid.start,
        &loaded.x0,
        loaded.regime,
        &ric,
        &eta,
        &loaded.split,
        &cfg,
    )?;
    let formula = CostReport::exact(v, f64::NAN, f64::NAN, MethodTag::RiccatiFormula);
    let mc = simulate_closed_loop(&loaded.split, &strategy, &loaded.x0, loaded.regime, &sim_cfg)?;

    let nan_blank = |x: f64| {
        if x.is_nan() {
            String::new()
        } else {
            format!("{x:.16e}")
        }
    };
    let mut csv = String::from(CostReport::csv_header());
    csv.push('\n');
    for rep in [&formula, &mc] {
        csv.push_str(&format!(
            "{},{:.16e},{},{},{},{}\n",
            rep.method,
            rep.mean,
            nan_blank(rep.std_error),
            nan_blank(rep.running_mean),
            nan_blank(rep.terminal_mean),
            rep.num_samples
        ));
    }
    write(&args.out, "mc_report.csv", &csv)?;
    if let Some(cap) = args.dump {
        let dump = dump_paths(
            &loaded.split,
            &strategy,
            &loaded.x0,
            loaded.regime,
            &sim_cfg,
            cap,
        )?;
        write(&args.out, "paths.csv", &dump)?;
    }
    println!(
        "simulate: value formula {v:.6}, Monte Carlo {:.6} ± {:.6} ({} samples), wrote mc_report.csv to {}",
        mc.mean,
        mc.std_error,
        mc.num_samples,
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_tree_check(args: &Args) -> Result<ExitCode, Error> {
    let loaded = load(args)?;
    let cfg = solver_config(args);
    let (ric, eta) = solve_pipeline(&loaded, &cfg)?;
    let mut report = String::new();

    let depths = if args.tree_depth > 1 {
        vec![args.tree_depth / 2, args.tree_depth]
    } else {
        vec![args.tree_depth]
    };
    for &n in &depths {
        let tree = build_tree(&loaded.spec, loaded.regime, n)?;
        let sol = solve_open_loop_with(&tree, &loaded.spec, &loaded.x0, args.tol_cg)?;
        let dec = verify_decoupling(&tree, &loaded.spec, &loaded.split, &ric, &eta, &loaded.x0)?;
        let v = value_function(
            loaded.split.grid.start,
            &loaded.x0,
            loaded.regime,
            &ric,
            &eta,
            &loaded.split,
            &cfg,
        )?;
        report.push_str(&format!(
            "depth= {n}\nJ_star= {:.16e}\nriccati_value= {:.16e}\nabs_gap= {:.3e}\ngrad_norm= {:.3e}\ncg_iterations= {}\nstationarity_residual= {:.3e}\ndecoupling_error= {:.3e}\n",
            sol.cost,
            v,
            (sol.cost - v).abs(),
            sol.grad_norm,
            sol.cg_iterations,
            dec.stationarity_residual,
            dec.max_decoupling_error,
        ));

        // projection identities and prefix/full conditioning on this tree
        let mut rng_like = 0x9E3779B97F4A7C15u64;
        let mut next = || {
            rng_like = rng_like.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((rng_like >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let mut phi = AdaptedProcess::zero_control(&tree, 1);
        for k in 0..phi.num_levels() {
            for v in phi.levels[k].iter_mut() {
                *v = next();
            }
        }
        let p_phi = project_chain(&tree, &phi);
        let idem = project_chain(&tree, &p_phi).sub(&p_phi).max_abs(&tree);
        let ortho = phi.sub(&p_phi).weighted_dot(&p_phi, &tree).abs();
        let mut cond_worst = 0.0_f64;
        for level in 1..=tree.num_steps.min(4) {
            let nn = tree.levels[level].num_nodes();
            let xi: Vec<f64> = (0..nn).map(|_| next()).collect();
            cond_worst = cond_worst.max(conditioning_consistency_discrepancy(&tree, level, &xi));
        }
        report.push_str(&format!(
            "projection_idempotence= {idem:.3e}\nprojection_orthogonality= {ortho:.3e}\nconditioning_consistency= {cond_worst:.3e}\n",
        ));

        // cost-form equivalence on a rolled-out feedback control
        let gains = |t: f64, e: usize| {
            Ok((ric.theta_at(FLUCT, t, e)?, ric.theta_at(MEAN, t, e)?))
        };
        let voff = AdaptedProcess::from_chain_fn(&tree, loaded.spec.control_dim, tree.num_steps, |t, e| {
            eta.vbar_at(t, e).expect("vbar in range")
        });
        let (u, x) = closed_loop_rollout(&tree, &loaded.spec, gains, Some(&voff), &loaded.x0)?;
        let j_orig = cost_of_state(&tree, &loaded.spec, &x, &u)?;
        let j_split = cost_of_state_split(&tree, &loaded.split, &x, &u)?;
        report.push_str(&format!(
            "feedback_cost= {:.16e}\ncost_form_gap= {:.3e}\n\n",
            j_orig,
            (j_orig - j_split).abs()
        ));

        if args.dump.is_some() && n == args.tree_depth {
            let mut csv = String::from("level,node,t,regime,prob,x,u\n");
            let states = forward_state(&tree, &loaded.spec, &sol.control, &loaded.x0)?;
            for k in 0..=tree.num_steps {
                let lv = &tree.levels[k];
                for i in 0..lv.num_nodes() {
                    let xs: Vec<String> = states
                        .node(k, i)
                        .iter()
                        .map(|v| format!("{v:.9e}"))
                        .collect();
                    let us: Vec<String> = if k < tree.num_steps {
                        sol.control.node(k, i).iter().map(|v| format!("{v:.9e}")).collect()
                    } else {
                        Vec::new()
                    };
                    csv.push_str(&format!(
                        "{k},{i},{:.9e},{},{:.9e},{},{}\n",
                        tree.time(k),
                        lv.regime[i],
                        lv.prob[i],
                        xs.join(";"),
                        us.join(";")
                    ));
                }
            }
            write(&args.out, "tree_nodes.csv", &csv)?;
        }
    }

    write(&args.out, "oracle_report.txt", &report)?;
    print!("{report}");
    println!("tree-check: wrote oracle_report.txt to {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify_all(args: &Args) -> Result<ExitCode, Error> {
    let mut all_ok = true;
    if args.problem.is_some() {
        let loaded = load(args)?;
        println!("problem file: validation PASS ({} regimes, n={}, m={})",
            loaded.spec.num_regimes(), loaded.spec.state_dim, loaded.spec.control_dim);
        let cfg = solver_config(args);
        let (ric, _) = solve_pipeline(&loaded, &cfg)?;
        println!(
            "problem file: riccati solve PASS — delta_min {:.3e}, defect {:.3e}",
            ric.delta_min(),
            ric.residual_norm
        );
    }
    for outcome in verify::run_all() {
        println!("{}", outcome.line());
        all_ok &= outcome.passed;
    }
    if all_ok {
        println!("verify-all: PASS");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("verify-all: FAIL");
        Ok(ExitCode::from(1))
    }
}
