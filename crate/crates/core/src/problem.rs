//! Problem definition, validation, and coefficient splitting.
//!
//! A problem instance consists of a finite-state chain generator, per-regime
//! time-varying dynamics/cost coefficients sampled on a uniform grid, and
//! per-regime terminal weights. Orthogonal projection onto the chain
//! filtration splits every family into a fluctuation part (index 0, the
//! "1" component) and a chain-mean part (index 1, the "2" component):
//!
//! ```text
//! A_1 = A,  A_2 = A + Ā      (same for B, C, D)
//! Q_1 = Q,  Q_2 = Q + Q̄      (same for S, R, G)
//! q_1 = 0,  q_2 = q + q̄      (regime-measurable data has no fluctuation part)
//! ```
//!
//! All nonhomogeneous data here are regime-measurable (functions of
//! `(t, α(t))`), so their fluctuation parts vanish identically; fully general
//! adapted data are exercised only by the tree oracle.

use nalgebra::{DMatrix, DVector};

use crate::chain::ChainGenerator;
use crate::error::{Error, Result};

/// Symmetry / row-sum tolerance used by validation.
pub const VALIDATE_TOL: f64 = 1e-12;

// ---------------------------------------------------------------------------
// time grid
// ---------------------------------------------------------------------------

/// Uniform time grid on `[start, end]` with `steps` intervals
/// (`steps + 1` sample points). Coefficients are piecewise linear in `t`
/// between samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub start: f64,
    pub end: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(start: f64, end: f64, steps: usize) -> Result<Self> {
        if !(start.is_finite() && end.is_finite()) || start >= end || steps == 0 {
            return Err(Error::InvalidProblem(format!(
                "bad time grid: [{start}, {end}] with {steps} steps"
            )));
        }
        Ok(Self { start, end, steps })
    }

    pub fn dt(&self) -> f64 {
        (self.end - self.start) / self.steps as f64
    }

    pub fn num_points(&self) -> usize {
        self.steps + 1
    }

    pub fn time(&self, j: usize) -> f64 {
        if j == self.steps {
            self.end
        } else {
            self.start + j as f64 * self.dt()
        }
    }

    /// Cell index and barycentric weight for `t`: `t ≈ (1-w)·t_j + w·t_{j+1}`,
    /// `j <= steps-1`. Errors if `t` lies outside the horizon (beyond a small
    /// rounding slack).
    pub fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let slack = 1e-9 * (self.end - self.start).max(1.0);
        if t < self.start - slack || t > self.end + slack {
            return Err(Error::TimeOutOfRange {
                t,
                start: self.start,
                end: self.end,
            });
        }
        let t = t.clamp(self.start, self.end);
        let x = (t - self.start) / self.dt();
        let j = (x.floor() as usize).min(self.steps - 1);
        Ok((j, x - j as f64))
    }
}

// ---------------------------------------------------------------------------
// regime-by-grid coefficient storage
// ---------------------------------------------------------------------------

/// Values that can be linearly interpolated.
pub trait Interpolate: Clone {
    fn lerp(a: &Self, b: &Self, w: f64) -> Self;
    fn weighted4(vals: [&Self; 4], w: [f64; 4]) -> Self;
}

impl Interpolate for DMatrix<f64> {
    fn lerp(a: &Self, b: &Self, w: f64) -> Self {
        a * (1.0 - w) + b * w
    }
    fn weighted4(vals: [&Self; 4], w: [f64; 4]) -> Self {
        vals[0] * w[0] + vals[1] * w[1] + vals[2] * w[2] + vals[3] * w[3]
    }
}

impl Interpolate for DVector<f64> {
    fn lerp(a: &Self, b: &Self, w: f64) -> Self {
        a * (1.0 - w) + b * w
    }
    fn weighted4(vals: [&Self; 4], w: [f64; 4]) -> Self {
        vals[0] * w[0] + vals[1] * w[1] + vals[2] * w[2] + vals[3] * w[3]
    }
}

/// One coefficient family: a value per `(regime, grid point)`.
#[derive(Debug, Clone)]
pub struct Field<T> {
    num_regimes: usize,
    num_times: usize,
    vals: Vec<T>,
}

impl<T: Interpolate> Field<T> {
    pub fn from_fill(num_regimes: usize, num_times: usize, v: T) -> Self {
        Self {
            num_regimes,
            num_times,
            vals: vec![v; num_regimes * num_times],
        }
    }

    /// Sample `f(regime, t)` on the grid.
    pub fn sample(num_regimes: usize, grid: &TimeGrid, f: impl Fn(usize, f64) -> T) -> Self {
        let num_times = grid.num_points();
        let mut vals = Vec::with_capacity(num_regimes * num_times);
        for e in 0..num_regimes {
            for j in 0..num_times {
                vals.push(f(e, grid.time(j)));
            }
        }
        Self {
            num_regimes,
            num_times,
            vals,
        }
    }

    pub fn num_regimes(&self) -> usize {
        self.num_regimes
    }

    pub fn num_times(&self) -> usize {
        self.num_times
    }

    pub fn at(&self, regime: usize, j: usize) -> &T {
        &self.vals[regime * self.num_times + j]
    }

    pub fn set(&mut self, regime: usize, j: usize, v: T) {
        self.vals[regime * self.num_times + j] = v;
    }

    pub fn fill(&mut self, v: T) {
        for slot in self.vals.iter_mut() {
            *slot = v.clone();
        }
    }

    /// Linear interpolation between grid points `j` and `j+1`.
    pub fn interp(&self, regime: usize, j: usize, w: f64) -> T {
        if w == 0.0 {
            self.at(regime, j).clone()
        } else if w == 1.0 {
            self.at(regime, j + 1).clone()
        } else {
            T::lerp(self.at(regime, j), self.at(regime, j + 1), w)
        }
    }

    /// Cubic (4-point Lagrange) interpolation at time `t`. Appropriate for
    /// fields holding smooth solution paths; piecewise-linear coefficient
    /// data should use [`Field::interp`]. Falls back to linear when the grid
    /// has fewer than 4 points.
    pub fn interp_cubic(&self, grid: &TimeGrid, regime: usize, t: f64) -> Result<T> {
        let (j, w) = grid.locate(t)?;
        if grid.steps < 3 {
            return Ok(self.interp(regime, j, w));
        }
        if w == 0.0 {
            return Ok(self.at(regime, j).clone());
        }
        let base = j.saturating_sub(1).min(grid.steps - 3);
        let x = (t - grid.time(base)) / grid.dt();
        let w4 = [
            -(x - 1.0) * (x - 2.0) * (x - 3.0) / 6.0,
            x * (x - 2.0) * (x - 3.0) / 2.0,
            -x * (x - 1.0) * (x - 3.0) / 2.0,
            x * (x - 1.0) * (x - 2.0) / 6.0,
        ];
        Ok(T::weighted4(
            [
                self.at(regime, base),
                self.at(regime, base + 1),
                self.at(regime, base + 2),
                self.at(regime, base + 3),
            ],
            w4,
        ))
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), &T)> {
        let nt = self.num_times;
        self.vals
            .iter()
            .enumerate()
            .map(move |(k, v)| ((k / nt, k % nt), v))
    }
}

// ---------------------------------------------------------------------------
// problem spec
// ---------------------------------------------------------------------------

/// Dynamics coefficients of the controlled SDE
///
/// ```text
/// dX = (A X + Ā E^M[X] + B u + B̄ E^M[u] + b) dt
///    + (C X + C̄ E^M[X] + D u + D̄ E^M[u] + σ) dW
/// ```
#[derive(Debug, Clone)]
pub struct Dynamics {
    pub a: Field<DMatrix<f64>>,
    pub a_bar: Field<DMatrix<f64>>,
    pub b: Field<DMatrix<f64>>,
    pub b_bar: Field<DMatrix<f64>>,
    pub c: Field<DMatrix<f64>>,
    pub c_bar: Field<DMatrix<f64>>,
    pub d: Field<DMatrix<f64>>,
    pub d_bar: Field<DMatrix<f64>>,
    /// Nonhomogeneous drift `b(t, e)`.
    pub drift: Field<DVector<f64>>,
    /// Nonhomogeneous diffusion `σ(t, e)`.
    pub noise: Field<DVector<f64>>,
}

/// Running-cost weights of
///
/// ```text
/// ⟨QX,X⟩ + ⟨Q̄ E^M[X], E^M[X]⟩ + 2⟨SX,u⟩ + 2⟨S̄ E^M[X], E^M[u]⟩
///   + ⟨Ru,u⟩ + ⟨R̄ E^M[u], E^M[u]⟩
///   + 2⟨q,X⟩ + 2⟨q̄,E^M[X]⟩ + 2⟨r,u⟩ + 2⟨r̄,E^M[u]⟩
/// ```
#[derive(Debug, Clone)]
pub struct RunningCost {
    pub q: Field<DMatrix<f64>>,
    pub q_bar: Field<DMatrix<f64>>,
    pub s: Field<DMatrix<f64>>,
    pub s_bar: Field<DMatrix<f64>>,
    pub r: Field<DMatrix<f64>>,
    pub r_bar: Field<DMatrix<f64>>,
    /// Linear state weight `q(t, e)`.
    pub state_lin: Field<DVector<f64>>,
    pub state_lin_bar: Field<DVector<f64>>,
    /// Linear control weight `r(t, e)`.
    pub ctrl_lin: Field<DVector<f64>>,
    pub ctrl_lin_bar: Field<DVector<f64>>,
}

/// Terminal weights `⟨G X(T), X(T)⟩ + ⟨Ḡ E^M[X(T)], E^M[X(T)]⟩
/// + 2⟨g, X(T)⟩ + 2⟨ḡ, E^M[X(T)]⟩`, one entry per regime.
#[derive(Debug, Clone)]
pub struct TerminalCost {
    pub g: Vec<DMatrix<f64>>,
    pub g_bar: Vec<DMatrix<f64>>,
    pub g_lin: Vec<DVector<f64>>,
    pub g_lin_bar: Vec<DVector<f64>>,
}

/// A full MF-LQ problem instance. Immutable once handed to the solvers.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub grid: TimeGrid,
    pub state_dim: usize,
    pub control_dim: usize,
    pub chain: ChainGenerator,
    pub dynamics: Dynamics,
    pub cost: RunningCost,
    pub terminal: TerminalCost,
}

/// All original-coordinate coefficients at one `(t, regime)`.
#[derive(Debug, Clone)]
pub struct OriginalSlice {
    pub a: DMatrix<f64>,
    pub a_bar: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub b_bar: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub c_bar: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub d_bar: DMatrix<f64>,
    pub drift: DVector<f64>,
    pub noise: DVector<f64>,
    pub q: DMatrix<f64>,
    pub q_bar: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub s_bar: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub r_bar: DMatrix<f64>,
    pub state_lin: DVector<f64>,
    pub state_lin_bar: DVector<f64>,
    pub ctrl_lin: DVector<f64>,
    pub ctrl_lin_bar: DVector<f64>,
}

impl ProblemSpec {
    /// All-zero problem of the given shape; fill fields afterwards.
    pub fn zeros(
        state_dim: usize,
        control_dim: usize,
        chain: ChainGenerator,
        grid: TimeGrid,
    ) -> Result<Self> {
        if state_dim == 0 || control_dim == 0 {
            return Err(Error::InvalidProblem(
                "state and control dimensions must be >= 1".into(),
            ));
        }
        let l = chain.num_regimes();
        let nt = grid.num_points();
        let (n, m) = (state_dim, control_dim);
        let mat = |r, c| Field::from_fill(l, nt, DMatrix::<f64>::zeros(r, c));
        let vec = |d| Field::from_fill(l, nt, DVector::<f64>::zeros(d));
        Ok(Self {
            grid,
            state_dim,
            control_dim,
            chain,
            dynamics: Dynamics {
                a: mat(n, n),
                a_bar: mat(n, n),
                b: mat(n, m),
                b_bar: mat(n, m),
                c: mat(n, n),
                c_bar: mat(n, n),
                d: mat(n, m),
                d_bar: mat(n, m),
                drift: vec(n),
                noise: vec(n),
            },
            cost: RunningCost {
                q: mat(n, n),
                q_bar: mat(n, n),
                s: mat(m, n),
                s_bar: mat(m, n),
                r: mat(m, m),
                r_bar: mat(m, m),
                state_lin: vec(n),
                state_lin_bar: vec(n),
                ctrl_lin: vec(m),
                ctrl_lin_bar: vec(m),
            },
            terminal: TerminalCost {
                g: vec![DMatrix::zeros(n, n); l],
                g_bar: vec![DMatrix::zeros(n, n); l],
                g_lin: vec![DVector::zeros(n); l],
                g_lin_bar: vec![DVector::zeros(n); l],
            },
        })
    }

    pub fn num_regimes(&self) -> usize {
        self.chain.num_regimes()
    }

    fn check_regime(&self, regime: usize) -> Result<()> {
        if regime >= self.num_regimes() {
            return Err(Error::RegimeOutOfRange {
                regime,
                num_regimes: self.num_regimes(),
            });
        }
        Ok(())
    }

    /// Original (un-split) coefficients at `(t, regime)`, linearly
    /// interpolated in `t`. Used by the tree oracle and the simulator.
    pub fn coeff_at(&self, t: f64, regime: usize) -> Result<OriginalSlice> {
        self.check_regime(regime)?;
        let (j, w) = self.grid.locate(t)?;
        let dy = &self.dynamics;
        let co = &self.cost;
        Ok(OriginalSlice {
            a: dy.a.interp(regime, j, w),
            a_bar: dy.a_bar.interp(regime, j, w),
            b: dy.b.interp(regime, j, w),
            b_bar: dy.b_bar.interp(regime, j, w),
            c: dy.c.interp(regime, j, w),
            c_bar: dy.c_bar.interp(regime, j, w),
            d: dy.d.interp(regime, j, w),
            d_bar: dy.d_bar.interp(regime, j, w),
            drift: dy.drift.interp(regime, j, w),
            noise: dy.noise.interp(regime, j, w),
            q: co.q.interp(regime, j, w),
            q_bar: co.q_bar.interp(regime, j, w),
            s: co.s.interp(regime, j, w),
            s_bar: co.s_bar.interp(regime, j, w),
            r: co.r.interp(regime, j, w),
            r_bar: co.r_bar.interp(regime, j, w),
            state_lin: co.state_lin.interp(regime, j, w),
            state_lin_bar: co.state_lin_bar.interp(regime, j, w),
            ctrl_lin: co.ctrl_lin.interp(regime, j, w),
            ctrl_lin_bar: co.ctrl_lin_bar.interp(regime, j, w),
        })
    }
}

// ---------------------------------------------------------------------------
// validation
// ---------------------------------------------------------------------------

/// One validation check outcome. `detail` names the offending field, regime,
/// and grid index on failure.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Report-only validation result, plus recorded sup/L2 norms per family
/// (boundedness is a hypothesis of the theory; only finiteness is enforced).
#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub checks: Vec<CheckResult>,
    /// `(family, sup norm over (t, e), L2-in-time norm maxed over regimes)`.
    pub norms: Vec<(String, f64, f64)>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

fn push_check(checks: &mut Vec<CheckResult>, name: &str, passed: bool, detail: String) {
    checks.push(CheckResult {
        name: name.to_string(),
        passed,
        detail,
    });
}

/// Check every structural invariant of a problem instance. Report-only:
/// failures name the offending field, regime, and grid index.
pub fn validate(spec: &ProblemSpec) -> ValidationReport {
    let mut checks = Vec::new();
    let mut norms = Vec::new();
    let l = spec.num_regimes();

    // chain generator
    {
        let rates = spec.chain.rates();
        let mut neg_offdiag = Vec::new();
        let mut bad_rows = Vec::new();
        for e in 0..l {
            let mut row_sum = 0.0;
            for e2 in 0..l {
                let v = rates[(e, e2)];
                row_sum += v;
                if e != e2 && v < 0.0 {
                    neg_offdiag.push(format!("rates[{e}][{e2}] = {v}"));
                }
            }
            if row_sum.abs() > VALIDATE_TOL {
                bad_rows.push(format!("row {e} sums to {row_sum:e}"));
            }
        }
        push_check(
            &mut checks,
            "generator off-diagonal nonnegative",
            neg_offdiag.is_empty(),
            if neg_offdiag.is_empty() {
                String::new()
            } else {
                format!("negative off-diagonal rate: {}", neg_offdiag.join(", "))
            },
        );
        push_check(
            &mut checks,
            "generator rows sum to zero",
            bad_rows.is_empty(),
            bad_rows.join(", "),
        );
    }

    // horizon
    push_check(
        &mut checks,
        "horizon well-ordered",
        spec.grid.start < spec.grid.end && spec.grid.start >= 0.0,
        format!("[{}, {}]", spec.grid.start, spec.grid.end),
    );

    let dt = spec.grid.dt();
    let mut scan_mat =
        |name: &str, field: &Field<DMatrix<f64>>, rows: usize, cols: usize, sym: bool| {
            let mut finite_bad = Vec::new();
            let mut dim_bad = Vec::new();
            let mut sym_bad = Vec::new();
            let mut sup = 0.0_f64;
            let mut l2_max = 0.0_f64;
            for e in 0..l {
                let mut sq = 0.0;
                for j in 0..field.num_times() {
                    let v = field.at(e, j);
                    if v.nrows() != rows || v.ncols() != cols {
                        dim_bad.push(format!(
                            "{name} at regime {e}, grid {j}: {}x{}",
                            v.nrows(),
                            v.ncols()
                        ));
                        continue;
                    }
                    if v.iter().any(|x| !x.is_finite()) {
                        finite_bad.push(format!("{name} at regime {e}, grid {j}"));
                    }
                    if sym {
                        let asym = (v - v.transpose()).amax();
                        if asym > VALIDATE_TOL {
                            sym_bad.push(format!(
                                "{name} not symmetric at regime {e}, grid {j} (defect {asym:e})"
                            ));
                        }
                    }
                    sup = sup.max(v.amax());
                    sq += v.norm_squared() * dt;
                }
                l2_max = l2_max.max(sq.sqrt());
            }
            norms.push((name.to_string(), sup, l2_max));
            push_check(
                &mut checks,
                &format!("{name} dimensions {rows}x{cols}"),
                dim_bad.is_empty(),
                dim_bad.join(", "),
            );
            push_check(
                &mut checks,
                &format!("{name} entries finite"),
                finite_bad.is_empty(),
                finite_bad.join(", "),
            );
            if sym {
                push_check(
                    &mut checks,
                    &format!("{name} symmetric"),
                    sym_bad.is_empty(),
                    sym_bad.join(", "),
                );
            }
        };

    let (n, m) = (spec.state_dim, spec.control_dim);
    let dy = &spec.dynamics;
    let co = &spec.cost;
    scan_mat("A", &dy.a, n, n, false);
    scan_mat("A_bar", &dy.a_bar, n, n, false);
    scan_mat("B", &dy.b, n, m, false);
    scan_mat("B_bar", &dy.b_bar, n, m, false);
    scan_mat("C", &dy.c, n, n, false);
    scan_mat("C_bar", &dy.c_bar, n, n, false);
    scan_mat("D", &dy.d, n, m, false);
    scan_mat("D_bar", &dy.d_bar, n, m, false);
    scan_mat("Q", &co.q, n, n, true);
    scan_mat("Q_bar", &co.q_bar, n, n, true);
    scan_mat("S", &co.s, m, n, false);
    scan_mat("S_bar", &co.s_bar, m, n, false);
    scan_mat("R", &co.r, m, m, true);
    scan_mat("R_bar", &co.r_bar, m, m, true);

    let mut scan_vec = |name: &str, field: &Field<DVector<f64>>, len: usize| {
        let mut finite_bad = Vec::new();
        let mut dim_bad = Vec::new();
        let mut sup = 0.0_f64;
        let mut l2_max = 0.0_f64;
        for e in 0..l {
            let mut sq = 0.0;
            for j in 0..field.num_times() {
                let v = field.at(e, j);
                if v.len() != len {
                    dim_bad.push(format!("{name} at regime {e}, grid {j}: len {}", v.len()));
                    continue;
                }
                if v.iter().any(|x| !x.is_finite()) {
                    finite_bad.push(format!("{name} at regime {e}, grid {j}"));
                }
                sup = sup.max(v.amax());
                sq += v.norm_squared() * dt;
            }
            l2_max = l2_max.max(sq.sqrt());
        }
        norms.push((name.to_string(), sup, l2_max));
        push_check(
            &mut checks,
            &format!("{name} length {len}"),
            dim_bad.is_empty(),
            dim_bad.join(", "),
        );
        push_check(
            &mut checks,
            &format!("{name} entries finite"),
            finite_bad.is_empty(),
            finite_bad.join(", "),
        );
    };
    scan_vec("b", &dy.drift, n);
    scan_vec("sigma", &dy.noise, n);
    scan_vec("q", &co.state_lin, n);
    scan_vec("q_bar", &co.state_lin_bar, n);
    scan_vec("r", &co.ctrl_lin, m);
    scan_vec("r_bar", &co.ctrl_lin_bar, m);

    // terminal
    let mut term_bad = Vec::new();
    for (name, mats) in [("G", &spec.terminal.g), ("G_bar", &spec.terminal.g_bar)] {
        if mats.len() != l {
            term_bad.push(format!("{name}: {} regimes, chain has {l}", mats.len()));
            continue;
        }
        for (e, v) in mats.iter().enumerate() {
            if v.nrows() != n || v.ncols() != n {
                term_bad.push(format!("{name} at regime {e}: {}x{}", v.nrows(), v.ncols()));
            } else if v.iter().any(|x| !x.is_finite()) {
                term_bad.push(format!("{name} at regime {e}: non-finite"));
            } else if (v - v.transpose()).amax() > VALIDATE_TOL {
                term_bad.push(format!("{name} not symmetric at regime {e}"));
            }
        }
    }
    for (name, vecs) in [
        ("g", &spec.terminal.g_lin),
        ("g_bar", &spec.terminal.g_lin_bar),
    ] {
        if vecs.len() != l {
            term_bad.push(format!("{name}: {} regimes, chain has {l}", vecs.len()));
            continue;
        }
        for (e, v) in vecs.iter().enumerate() {
            if v.len() != n {
                term_bad.push(format!("{name} at regime {e}: len {}", v.len()));
            } else if v.iter().any(|x| !x.is_finite()) {
                term_bad.push(format!("{name} at regime {e}: non-finite"));
            }
        }
    }
    push_check(
        &mut checks,
        "terminal weights well-formed",
        term_bad.is_empty(),
        term_bad.join(", "),
    );

    ValidationReport { checks, norms }
}

// ---------------------------------------------------------------------------
// split coefficients
// ---------------------------------------------------------------------------

/// Index of the fluctuation part `X - E^M[X]` in the two-component arrays.
pub const FLUCT: usize = 0;
/// Index of the chain-mean part `E^M[X]`.
pub const MEAN: usize = 1;

/// The split coefficient families, precomputed on the grid. Index `[FLUCT]`
/// carries the plain coefficients, `[MEAN]` the summed ones; nonhomogeneous
/// fluctuation parts are identically zero for regime-measurable data.
#[derive(Debug, Clone)]
pub struct SplitCoefficients {
    pub grid: TimeGrid,
    pub state_dim: usize,
    pub control_dim: usize,
    pub chain: ChainGenerator,
    pub a: [Field<DMatrix<f64>>; 2],
    pub b: [Field<DMatrix<f64>>; 2],
    pub c: [Field<DMatrix<f64>>; 2],
    pub d: [Field<DMatrix<f64>>; 2],
    pub q: [Field<DMatrix<f64>>; 2],
    pub s: [Field<DMatrix<f64>>; 2],
    pub r: [Field<DMatrix<f64>>; 2],
    pub state_lin: [Field<DVector<f64>>; 2],
    pub ctrl_lin: [Field<DVector<f64>>; 2],
    pub drift: [Field<DVector<f64>>; 2],
    pub noise: [Field<DVector<f64>>; 2],
    pub g: [Vec<DMatrix<f64>>; 2],
    pub g_lin: [Vec<DVector<f64>>; 2],
}

/// All split coefficients at one `(t, regime)`.
#[derive(Debug, Clone)]
pub struct CoefficientSlice {
    pub a: [DMatrix<f64>; 2],
    pub b: [DMatrix<f64>; 2],
    pub c: [DMatrix<f64>; 2],
    pub d: [DMatrix<f64>; 2],
    pub q: [DMatrix<f64>; 2],
    pub s: [DMatrix<f64>; 2],
    pub r: [DMatrix<f64>; 2],
    pub state_lin: [DVector<f64>; 2],
    pub ctrl_lin: [DVector<f64>; 2],
    pub drift: [DVector<f64>; 2],
    pub noise: [DVector<f64>; 2],
}

/// Split the coefficient families: plain part and summed part per the
/// `E^M` projection, with vanishing fluctuation parts for the
/// regime-measurable nonhomogeneous data.
pub fn split(spec: &ProblemSpec) -> Result<SplitCoefficients> {
    let l = spec.num_regimes();
    let nt = spec.grid.num_points();
    let (n, m) = (spec.state_dim, spec.control_dim);

    let pair_mat = |plain: &Field<DMatrix<f64>>,
                    bar: &Field<DMatrix<f64>>,
                    rows: usize,
                    cols: usize,
                    name: &str|
     -> Result<[Field<DMatrix<f64>>; 2]> {
        let mut sum = Field::from_fill(l, nt, DMatrix::zeros(rows, cols));
        for e in 0..l {
            for j in 0..nt {
                let (p, q) = (plain.at(e, j), bar.at(e, j));
                if p.nrows() != rows
                    || p.ncols() != cols
                    || q.nrows() != rows
                    || q.ncols() != cols
                {
                    return Err(Error::InvalidProblem(format!(
                        "{name} dimension mismatch at regime {e}, grid {j}"
                    )));
                }
                sum.set(e, j, p + q);
            }
        }
        Ok([plain.clone(), sum])
    };
    let zero_and_sum_vec = |plain: &Field<DVector<f64>>,
                            bar: Option<&Field<DVector<f64>>>,
                            len: usize,
                            name: &str|
     -> Result<[Field<DVector<f64>>; 2]> {
        let mut sum = Field::from_fill(l, nt, DVector::zeros(len));
        for e in 0..l {
            for j in 0..nt {
                let p = plain.at(e, j);
                if p.len() != len {
                    return Err(Error::InvalidProblem(format!(
                        "{name} dimension mismatch at regime {e}, grid {j}"
                    )));
                }
                let v = match bar {
                    Some(b) => {
                        if b.at(e, j).len() != len {
                            return Err(Error::InvalidProblem(format!(
                                "{name}_bar dimension mismatch at regime {e}, grid {j}"
                            )));
                        }
                        p + b.at(e, j)
                    }
                    None => p.clone(),
                };
                sum.set(e, j, v);
            }
        }
        Ok([Field::from_fill(l, nt, DVector::zeros(len)), sum])
    };

    let dy = &spec.dynamics;
    let co = &spec.cost;
    let g_sum: Vec<DMatrix<f64>> = spec
        .terminal
        .g
        .iter()
        .zip(&spec.terminal.g_bar)
        .map(|(g, gb)| g + gb)
        .collect();
    let g_lin_sum: Vec<DVector<f64>> = spec
        .terminal
        .g_lin
        .iter()
        .zip(&spec.terminal.g_lin_bar)
        .map(|(g, gb)| g + gb)
        .collect();

    Ok(SplitCoefficients {
        grid: spec.grid,
        state_dim: n,
        control_dim: m,
        chain: spec.chain.clone(),
        a: pair_mat(&dy.a, &dy.a_bar, n, n, "A")?,
        b: pair_mat(&dy.b, &dy.b_bar, n, m, "B")?,
        c: pair_mat(&dy.c, &dy.c_bar, n, n, "C")?,
        d: pair_mat(&dy.d, &dy.d_bar, n, m, "D")?,
        q: pair_mat(&co.q, &co.q_bar, n, n, "Q")?,
        s: pair_mat(&co.s, &co.s_bar, m, n, "S")?,
        r: pair_mat(&co.r, &co.r_bar, m, m, "R")?,
        state_lin: zero_and_sum_vec(&co.state_lin, Some(&co.state_lin_bar), n, "q")?,
        ctrl_lin: zero_and_sum_vec(&co.ctrl_lin, Some(&co.ctrl_lin_bar), m, "r")?,
        drift: zero_and_sum_vec(&dy.drift, None, n, "b")?,
        noise: zero_and_sum_vec(&dy.noise, None, n, "sigma")?,
        g: [spec.terminal.g.clone(), g_sum],
        g_lin: [vec![DVector::zeros(n); l], g_lin_sum],
    })
}

impl SplitCoefficients {
    pub fn num_regimes(&self) -> usize {
        self.chain.num_regimes()
    }

    /// All split coefficients at `(t, regime)`, exact at grid points and
    /// linear between.
    pub fn coeff_at(&self, t: f64, regime: usize) -> Result<CoefficientSlice> {
        if regime >= self.num_regimes() {
            return Err(Error::RegimeOutOfRange {
                regime,
                num_regimes: self.num_regimes(),
            });
        }
        let (j, w) = self.grid.locate(t)?;
        let pick_m =
            |f: &[Field<DMatrix<f64>>; 2]| [f[0].interp(regime, j, w), f[1].interp(regime, j, w)];
        let pick_v =
            |f: &[Field<DVector<f64>>; 2]| [f[0].interp(regime, j, w), f[1].interp(regime, j, w)];
        Ok(CoefficientSlice {
            a: pick_m(&self.a),
            b: pick_m(&self.b),
            c: pick_m(&self.c),
            d: pick_m(&self.d),
            q: pick_m(&self.q),
            s: pick_m(&self.s),
            r: pick_m(&self.r),
            state_lin: pick_v(&self.state_lin),
            ctrl_lin: pick_v(&self.ctrl_lin),
            drift: pick_v(&self.drift),
            noise: pick_v(&self.noise),
        })
    }
}

// ---------------------------------------------------------------------------
// problem file loading
// ---------------------------------------------------------------------------

/// Optional initial condition carried by a problem file.
#[derive(Debug, Clone)]
pub struct InitialCondition {
    pub x0: DVector<f64>,
    pub regime: usize,
}

/// A parsed problem file: the spec plus the optional initial condition.
#[derive(Debug, Clone)]
pub struct ProblemFile {
    pub spec: ProblemSpec,
    pub initial: Option<InitialCondition>,
}

use serde_json::Value;

fn parse_err(path: &str, msg: &str) -> Error {
    Error::Parse(format!("{path}: {msg}"))
}

fn as_f64(v: &Value, path: &str) -> Result<f64> {
    v.as_f64()
        .ok_or_else(|| parse_err(path, "expected a number"))
}

fn as_usize(v: &Value, path: &str) -> Result<usize> {
    v.as_u64()
        .map(|x| x as usize)
        .ok_or_else(|| parse_err(path, "expected a nonnegative integer"))
}

fn nesting_depth(v: &Value) -> usize {
    match v {
        Value::Array(a) => 1 + a.first().map(nesting_depth).unwrap_or(0),
        _ => 0,
    }
}

fn parse_matrix(v: &Value, rows: usize, cols: usize, path: &str) -> Result<DMatrix<f64>> {
    if let Some(x) = v.as_f64() {
        // scalar broadcast, only sensible for 1x1
        if rows == 1 && cols == 1 {
            return Ok(DMatrix::from_element(1, 1, x));
        }
        return Err(parse_err(
            path,
            &format!("scalar given for a {rows}x{cols} matrix"),
        ));
    }
    let outer = v
        .as_array()
        .ok_or_else(|| parse_err(path, "expected a matrix (array of rows)"))?;
    if outer.len() != rows {
        return Err(parse_err(
            path,
            &format!("expected {rows} rows, got {}", outer.len()),
        ));
    }
    let mut out = DMatrix::zeros(rows, cols);
    for (i, row) in outer.iter().enumerate() {
        let row = row
            .as_array()
            .ok_or_else(|| parse_err(path, &format!("row {i} is not an array")))?;
        if row.len() != cols {
            return Err(parse_err(
                path,
                &format!("row {i}: expected {cols} columns, got {}", row.len()),
            ));
        }
        for (j, x) in row.iter().enumerate() {
            out[(i, j)] = as_f64(x, &format!("{path}[{i}][{j}]"))?;
        }
    }
    Ok(out)
}

fn parse_vector(v: &Value, len: usize, path: &str) -> Result<DVector<f64>> {
    if let Some(x) = v.as_f64() {
        if len == 1 {
            return Ok(DVector::from_element(1, x));
        }
        return Err(parse_err(
            path,
            &format!("scalar given for a length-{len} vector"),
        ));
    }
    let arr = v
        .as_array()
        .ok_or_else(|| parse_err(path, "expected a vector (array)"))?;
    if arr.len() != len {
        return Err(parse_err(
            path,
            &format!("expected length {len}, got {}", arr.len()),
        ));
    }
    let mut out = DVector::zeros(len);
    for (i, x) in arr.iter().enumerate() {
        out[i] = as_f64(x, &format!("{path}[{i}]"))?;
    }
    Ok(out)
}

/// Accepted matrix-coefficient shapes:
/// `[regime][grid][rows][cols]`, `[regime][rows][cols]` (constant in t),
/// `[rows][cols]` (constant in t and regime), or a bare number for 1x1.
fn parse_mat_field(
    v: &Value,
    l: usize,
    grid: &TimeGrid,
    rows: usize,
    cols: usize,
    path: &str,
) -> Result<Field<DMatrix<f64>>> {
    let nt = grid.num_points();
    let depth = nesting_depth(v);
    let mut field = Field::from_fill(l, nt, DMatrix::zeros(rows, cols));
    match depth {
        0 | 2 => {
            let m = parse_matrix(v, rows, cols, path)?;
            field.fill(m);
        }
        3 => {
            let arr = v.as_array().unwrap();
            if arr.len() != l {
                return Err(parse_err(
                    path,
                    &format!("expected {l} regimes, got {}", arr.len()),
                ));
            }
            for (e, ve) in arr.iter().enumerate() {
                let m = parse_matrix(ve, rows, cols, &format!("{path}[{e}]"))?;
                for j in 0..nt {
                    field.set(e, j, m.clone());
                }
            }
        }
        4 => {
            let arr = v.as_array().unwrap();
            if arr.len() != l {
                return Err(parse_err(
                    path,
                    &format!("expected {l} regimes, got {}", arr.len()),
                ));
            }
            for (e, ve) in arr.iter().enumerate() {
                let times = ve
                    .as_array()
                    .ok_or_else(|| parse_err(path, &format!("regime {e}: expected grid array")))?;
                if times.len() != nt {
                    return Err(parse_err(
                        path,
                        &format!(
                            "regime {e}: expected {nt} grid samples, got {}",
                            times.len()
                        ),
                    ));
                }
                for (j, vj) in times.iter().enumerate() {
                    field.set(
                        e,
                        j,
                        parse_matrix(vj, rows, cols, &format!("{path}[{e}][{j}]"))?,
                    );
                }
            }
        }
        d => {
            return Err(parse_err(path, &format!("unsupported nesting depth {d}")));
        }
    }
    Ok(field)
}

/// Accepted vector-coefficient shapes: `[regime][grid][len]`,
/// `[regime][len]`, `[len]`, or a bare number for length 1.
fn parse_vec_field(
    v: &Value,
    l: usize,
    grid: &TimeGrid,
    len: usize,
    path: &str,
) -> Result<Field<DVector<f64>>> {
    let nt = grid.num_points();
    let depth = nesting_depth(v);
    let mut field = Field::from_fill(l, nt, DVector::zeros(len));
    match depth {
        0 | 1 => {
            let m = parse_vector(v, len, path)?;
            field.fill(m);
        }
        2 => {
            let arr = v.as_array().unwrap();
            if arr.len() != l {
                return Err(parse_err(
                    path,
                    &format!("expected {l} regimes, got {}", arr.len()),
                ));
            }
            for (e, ve) in arr.iter().enumerate() {
                let m = parse_vector(ve, len, &format!("{path}[{e}]"))?;
                for j in 0..nt {
                    field.set(e, j, m.clone());
                }
            }
        }
        3 => {
            let arr = v.as_array().unwrap();
            if arr.len() != l {
                return Err(parse_err(
                    path,
                    &format!("expected {l} regimes, got {}", arr.len()),
                ));
            }
            for (e, ve) in arr.iter().enumerate() {
                let times = ve
                    .as_array()
                    .ok_or_else(|| parse_err(path, &format!("regime {e}: expected grid array")))?;
                if times.len() != nt {
                    return Err(parse_err(
                        path,
                        &format!(
                            "regime {e}: expected {nt} grid samples, got {}",
                            times.len()
                        ),
                    ));
                }
                for (j, vj) in times.iter().enumerate() {
                    field.set(e, j, parse_vector(vj, len, &format!("{path}[{e}][{j}]"))?);
                }
            }
        }
        d => {
            return Err(parse_err(path, &format!("unsupported nesting depth {d}")));
        }
    }
    Ok(field)
}

/// Per-regime terminal matrix: `[regime][rows][cols]` or `[rows][cols]`.
fn parse_terminal_mats(
    v: &Value,
    l: usize,
    rows: usize,
    cols: usize,
    path: &str,
) -> Result<Vec<DMatrix<f64>>> {
    match nesting_depth(v) {
        0 | 2 => Ok(vec![parse_matrix(v, rows, cols, path)?; l]),
        3 => {
            let arr = v.as_array().unwrap();
            if arr.len() != l {
                return Err(parse_err(
                    path,
                    &format!("expected {l} regimes, got {}", arr.len()),
                ));
            }
            arr.iter()
                .enumerate()
                .map(|(e, ve)| parse_matrix(ve, rows, cols, &format!("{path}[{e}]")))
                .collect()
        }
        d => Err(parse_err(path, &format!("unsupported nesting depth {d}"))),
    }
}

fn parse_terminal_vecs(v: &Value, l: usize, len: usize, path: &str) -> Result<Vec<DVector<f64>>> {
    match nesting_depth(v) {
        0 | 1 => Ok(vec![parse_vector(v, len, path)?; l]),
        2 => {
            let arr = v.as_array().unwrap();
            if arr.len() != l {
                return Err(parse_err(
                    path,
                    &format!("expected {l} regimes, got {}", arr.len()),
                ));
            }
            arr.iter()
                .enumerate()
                .map(|(e, ve)| parse_vector(ve, len, &format!("{path}[{e}]")))
                .collect()
        }
        d => Err(parse_err(path, &format!("unsupported nesting depth {d}"))),
    }
}

/// Parse a problem file. Omitted coefficient families default to zero.
/// See the repository README for the schema.
pub fn parse_problem(text: &str) -> Result<ProblemFile> {
    let root: Value = serde_json::from_str(text)
        .map_err(|e| Error::Parse(format!("line {}, column {}: {}", e.line(), e.column(), e)))?;
    let obj = root
        .as_object()
        .ok_or_else(|| parse_err("<root>", "expected a JSON object"))?;

    let dims = obj
        .get("dims")
        .ok_or_else(|| parse_err("dims", "missing section"))?;
    let n = as_usize(
        dims.get("state")
            .ok_or_else(|| parse_err("dims.state", "missing"))?,
        "dims.state",
    )?;
    let m = as_usize(
        dims.get("control")
            .ok_or_else(|| parse_err("dims.control", "missing"))?,
        "dims.control",
    )?;
    if n == 0 || m == 0 {
        return Err(parse_err("dims", "state and control dims must be >= 1"));
    }

    let horizon = obj
        .get("horizon")
        .ok_or_else(|| parse_err("horizon", "missing section"))?;
    let start = as_f64(
        horizon
            .get("start")
            .ok_or_else(|| parse_err("horizon.start", "missing"))?,
        "horizon.start",
    )?;
    let end = as_f64(
        horizon
            .get("end")
            .ok_or_else(|| parse_err("horizon.end", "missing"))?,
        "horizon.end",
    )?;
    let steps = as_usize(
        obj.get("grid")
            .ok_or_else(|| parse_err("grid", "missing (number of intervals)"))?,
        "grid",
    )?;
    let grid = TimeGrid::new(start, end, steps).map_err(|e| parse_err("horizon", &e.to_string()))?;

    let chain_v = obj
        .get("chain")
        .ok_or_else(|| parse_err("chain", "missing section"))?;
    let rates_v = chain_v
        .get("rates")
        .ok_or_else(|| parse_err("chain.rates", "missing"))?;
    let outer = rates_v
        .as_array()
        .ok_or_else(|| parse_err("chain.rates", "expected a square matrix"))?;
    let l = outer.len();
    if l == 0 {
        return Err(parse_err(
            "chain.rates",
            "chain must have at least one regime",
        ));
    }
    let rates = parse_matrix(rates_v, l, l, "chain.rates")?;
    let chain = ChainGenerator::new(rates)?;

    let mut spec = ProblemSpec::zeros(n, m, chain, grid)?;

    if let Some(coeffs) = obj.get("coefficients") {
        let co = coeffs
            .as_object()
            .ok_or_else(|| parse_err("coefficients", "expected an object"))?;
        let known = [
            "A", "A_bar", "B", "B_bar", "C", "C_bar", "D", "D_bar", "Q", "Q_bar", "S", "S_bar",
            "R", "R_bar", "b", "sigma", "q", "q_bar", "r", "r_bar",
        ];
        for key in co.keys() {
            if !known.contains(&key.as_str()) {
                return Err(parse_err(
                    &format!("coefficients.{key}"),
                    "unknown coefficient (note: keys are case-sensitive)",
                ));
            }
        }
        {
            let dy = &mut spec.dynamics;
            let get_mat =
                |key: &str, rows: usize, cols: usize, dst: &mut Field<DMatrix<f64>>| -> Result<()> {
                    if let Some(v) = co.get(key) {
                        *dst =
                            parse_mat_field(v, l, &grid, rows, cols, &format!("coefficients.{key}"))?;
                    }
                    Ok(())
                };
            get_mat("A", n, n, &mut dy.a)?;
            get_mat("A_bar", n, n, &mut dy.a_bar)?;
            get_mat("B", n, m, &mut dy.b)?;
            get_mat("B_bar", n, m, &mut dy.b_bar)?;
            get_mat("C", n, n, &mut dy.c)?;
            get_mat("C_bar", n, n, &mut dy.c_bar)?;
            get_mat("D", n, m, &mut dy.d)?;
            get_mat("D_bar", n, m, &mut dy.d_bar)?;
        }
        {
            let cost = &mut spec.cost;
            let get_mat =
                |key: &str, rows: usize, cols: usize, dst: &mut Field<DMatrix<f64>>| -> Result<()> {
                    if let Some(v) = co.get(key) {
                        *dst =
                            parse_mat_field(v, l, &grid, rows, cols, &format!("coefficients.{key}"))?;
                    }
                    Ok(())
                };
            get_mat("Q", n, n, &mut cost.q)?;
            get_mat("Q_bar", n, n, &mut cost.q_bar)?;
            get_mat("S", m, n, &mut cost.s)?;
            get_mat("S_bar", m, n, &mut cost.s_bar)?;
            get_mat("R", m, m, &mut cost.r)?;
            get_mat("R_bar", m, m, &mut cost.r_bar)?;
        }
        let get_vec = |key: &str, len: usize, dst: &mut Field<DVector<f64>>| -> Result<()> {
            if let Some(v) = co.get(key) {
                *dst = parse_vec_field(v, l, &grid, len, &format!("coefficients.{key}"))?;
            }
            Ok(())
        };
        get_vec("b", n, &mut spec.dynamics.drift)?;
        get_vec("sigma", n, &mut spec.dynamics.noise)?;
        get_vec("q", n, &mut spec.cost.state_lin)?;
        get_vec("q_bar", n, &mut spec.cost.state_lin_bar)?;
        get_vec("r", m, &mut spec.cost.ctrl_lin)?;
        get_vec("r_bar", m, &mut spec.cost.ctrl_lin_bar)?;
    }

    if let Some(term) = obj.get("terminal") {
        let to = term
            .as_object()
            .ok_or_else(|| parse_err("terminal", "expected an object"))?;
        for key in to.keys() {
            if !["G", "G_bar", "g", "g_bar"].contains(&key.as_str()) {
                return Err(parse_err(
                    &format!("terminal.{key}"),
                    "unknown terminal field",
                ));
            }
        }
        if let Some(v) = to.get("G") {
            spec.terminal.g = parse_terminal_mats(v, l, n, n, "terminal.G")?;
        }
        if let Some(v) = to.get("G_bar") {
            spec.terminal.g_bar = parse_terminal_mats(v, l, n, n, "terminal.G_bar")?;
        }
        if let Some(v) = to.get("g") {
            spec.terminal.g_lin = parse_terminal_vecs(v, l, n, "terminal.g")?;
        }
        if let Some(v) = to.get("g_bar") {
            spec.terminal.g_lin_bar = parse_terminal_vecs(v, l, n, "terminal.g_bar")?;
        }
    }

    let initial = match obj.get("initial") {
        None => None,
        Some(init) => {
            let x0 = parse_vector(
                init.get("x0")
                    .ok_or_else(|| parse_err("initial.x0", "missing"))?,
                n,
                "initial.x0",
            )?;
            let regime = as_usize(
                init.get("regime")
                    .ok_or_else(|| parse_err("initial.regime", "missing"))?,
                "initial.regime",
            )?;
            if regime >= l {
                return Err(parse_err(
                    "initial.regime",
                    &format!("regime {regime} out of range"),
                ));
            }
            Some(InitialCondition { x0, regime })
        }
    };

    Ok(ProblemFile { spec, initial })
}

/// Load and parse a problem file from disk.
pub fn load_problem(path: &std::path::Path) -> Result<ProblemFile> {
    let text = std::fs::read_to_string(path)?;
    parse_problem(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::ChainGenerator;

    fn two_regime_chain() -> ChainGenerator {
        ChainGenerator::new(DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 2.0, -2.0])).unwrap()
    }

    fn scalar_spec() -> ProblemSpec {
        let grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
        ProblemSpec::zeros(1, 1, two_regime_chain(), grid).unwrap()
    }

    #[test]
    fn validate_passes_on_clean_spec() {
        let report = validate(&scalar_spec());
        assert!(report.passed(), "{:?}", report.failures());
    }

    #[test]
    fn validate_flags_asymmetric_q() {
        let mut spec = ProblemSpec::zeros(
            2,
            1,
            two_regime_chain(),
            TimeGrid::new(0.0, 1.0, 2).unwrap(),
        )
        .unwrap();
        let mut q = DMatrix::zeros(2, 2);
        q[(0, 1)] = 1e-3;
        spec.cost.q.set(0, 1, q);
        let report = validate(&spec);
        assert!(!report.passed());
        let fail = report
            .failures()
            .into_iter()
            .find(|c| c.name.contains("Q symmetric"))
            .expect("symmetry failure reported");
        assert!(fail.detail.contains("regime 0"), "{}", fail.detail);
        assert!(fail.detail.contains("grid 1"), "{}", fail.detail);
    }

    #[test]
    fn validate_flags_negative_rate() {
        let chain =
            ChainGenerator::new(DMatrix::from_row_slice(2, 2, &[0.5, -0.5, 2.0, -2.0])).unwrap();
        let spec = ProblemSpec::zeros(1, 1, chain, TimeGrid::new(0.0, 1.0, 2).unwrap()).unwrap();
        let report = validate(&spec);
        let fail = report
            .failures()
            .into_iter()
            .find(|c| c.name.contains("off-diagonal"))
            .expect("rate sign failure reported");
        assert!(fail.detail.contains("negative off-diagonal rate"));
    }

    #[test]
    fn split_sums_pairs() {
        let mut spec = scalar_spec();
        spec.dynamics.a.fill(DMatrix::from_element(1, 1, 2.0));
        spec.dynamics.a_bar.fill(DMatrix::from_element(1, 1, 1.0));
        let sp = split(&spec).unwrap();
        assert_eq!(sp.a[FLUCT].at(0, 0)[(0, 0)], 2.0);
        assert_eq!(sp.a[MEAN].at(0, 0)[(0, 0)], 3.0);
    }

    #[test]
    fn split_no_mean_field_terms_equal() {
        let mut spec = scalar_spec();
        spec.dynamics.a.fill(DMatrix::from_element(1, 1, -0.7));
        spec.cost.q.fill(DMatrix::from_element(1, 1, 0.3));
        let sp = split(&spec).unwrap();
        for e in 0..2 {
            for j in 0..sp.grid.num_points() {
                assert_eq!(sp.a[FLUCT].at(e, j), sp.a[MEAN].at(e, j));
                assert_eq!(sp.q[FLUCT].at(e, j), sp.q[MEAN].at(e, j));
            }
        }
    }

    #[test]
    fn split_perp_linear_parts_vanish() {
        let mut spec = ProblemSpec::zeros(
            2,
            1,
            two_regime_chain(),
            TimeGrid::new(0.0, 1.0, 2).unwrap(),
        )
        .unwrap();
        spec.cost
            .state_lin
            .fill(DVector::from_row_slice(&[1.0, 0.0]));
        spec.cost
            .state_lin_bar
            .fill(DVector::from_row_slice(&[0.0, 1.0]));
        let sp = split(&spec).unwrap();
        assert_eq!(
            sp.state_lin[FLUCT].at(0, 0),
            &DVector::from_row_slice(&[0.0, 0.0])
        );
        assert_eq!(
            sp.state_lin[MEAN].at(1, 2),
            &DVector::from_row_slice(&[1.0, 1.0])
        );
    }

    #[test]
    fn split_roundtrip_recovers_inputs() {
        // A = A_1 and Ā = A_2 − A_1, for every dynamic and weight pair.
        let grid = TimeGrid::new(0.0, 2.0, 3).unwrap();
        let mut spec = ProblemSpec::zeros(2, 1, two_regime_chain(), grid).unwrap();
        spec.dynamics.a = Field::sample(2, &grid, |e, t| {
            DMatrix::from_fn(2, 2, |i, j| (i + 2 * j) as f64 * 0.1 + t + e as f64)
        });
        spec.dynamics.a_bar = Field::sample(2, &grid, |e, t| {
            DMatrix::from_fn(2, 2, |_, j| (j + 1) as f64 * 0.3 - t * 0.5 + e as f64)
        });
        spec.cost.r = Field::sample(2, &grid, |_, t| DMatrix::from_element(1, 1, 1.0 + t));
        spec.cost.r_bar = Field::sample(2, &grid, |e, _| DMatrix::from_element(1, 1, e as f64));
        let sp = split(&spec).unwrap();
        for e in 0..2 {
            for j in 0..grid.num_points() {
                let a = sp.a[FLUCT].at(e, j);
                let a_bar = sp.a[MEAN].at(e, j) - a;
                assert!((a - spec.dynamics.a.at(e, j)).amax() < 1e-15);
                assert!((a_bar - spec.dynamics.a_bar.at(e, j)).amax() < 1e-15);
                let r = sp.r[FLUCT].at(e, j);
                let r_bar = sp.r[MEAN].at(e, j) - r;
                assert!((r - spec.cost.r.at(e, j)).amax() < 1e-15);
                assert!((r_bar - spec.cost.r_bar.at(e, j)).amax() < 1e-15);
            }
        }
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let grid = TimeGrid::new(0.0, 1.0, 2).unwrap();
        let chain = ChainGenerator::new(DMatrix::from_element(1, 1, 0.0)).unwrap();
        let mut spec = ProblemSpec::zeros(1, 1, chain, grid).unwrap();
        spec.dynamics.a.set(0, 0, DMatrix::from_element(1, 1, 0.0));
        spec.dynamics.a.set(0, 1, DMatrix::from_element(1, 1, 2.0));
        spec.dynamics.a.set(0, 2, DMatrix::from_element(1, 1, 6.0));
        let sp = split(&spec).unwrap();
        // exact at grid nodes
        assert_eq!(sp.coeff_at(0.5, 0).unwrap().a[FLUCT][(0, 0)], 2.0);
        // linear at midpoint of [t_0, t_1]
        assert_eq!(sp.coeff_at(0.25, 0).unwrap().a[FLUCT][(0, 0)], 1.0);
        // out-of-range time and regime are hard errors
        assert!(matches!(
            sp.coeff_at(1.5, 0),
            Err(Error::TimeOutOfRange { .. })
        ));
        assert!(matches!(
            sp.coeff_at(0.5, 1),
            Err(Error::RegimeOutOfRange { .. })
        ));
    }

    #[test]
    fn parse_minimal_problem() {
        let text = r#"{
            "dims": {"state": 1, "control": 1},
            "horizon": {"start": 0.0, "end": 1.0},
            "grid": 4,
            "chain": {"rates": [[-1.0, 1.0], [2.0, -2.0]]},
            "coefficients": {"B": 1.0, "Q": 1.0, "R": 1.0},
            "terminal": {"G": 0.5},
            "initial": {"x0": [1.0], "regime": 0}
        }"#;
        let pf = parse_problem(text).unwrap();
        assert_eq!(pf.spec.state_dim, 1);
        assert_eq!(pf.spec.num_regimes(), 2);
        assert_eq!(pf.spec.dynamics.b.at(1, 3)[(0, 0)], 1.0);
        assert_eq!(pf.spec.terminal.g[1][(0, 0)], 0.5);
        assert_eq!(pf.initial.unwrap().regime, 0);
        assert!(validate(&pf.spec).passed());
    }

    #[test]
    fn parse_reports_location() {
        let err = parse_problem("{\n  \"dims\": oops\n}").unwrap_err();
        match err {
            Error::Parse(msg) => assert!(msg.contains("line 2"), "{msg}"),
            other => panic!("unexpected error {other:?}"),
        }
        let err = parse_problem(
            r#"{"dims": {"state": 1, "control": 1},
                "horizon": {"start": 0.0, "end": 1.0},
                "grid": 2,
                "chain": {"rates": [[0.0]]},
                "coefficients": {"A": [[1.0, 2.0]]}}"#,
        )
        .unwrap_err();
        match err {
            Error::Parse(msg) => assert!(msg.contains("coefficients.A"), "{msg}"),
            other => panic!("unexpected error {other:?}"),
        }
    }
}
