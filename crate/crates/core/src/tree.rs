//! Exact discrete-time oracle on a finite probability tree.
//!
//! Each step branches on a binomial Brownian increment (`±√Δt`, probability
//! ½ each) and a chain transition (first-order one-step matrix). A node is a
//! full history, so adaptedness is structural, and conditional expectations
//! are finite sums: the chain projection `Π₂` averages over the Brownian
//! branches within a "chain-history class" (nodes sharing the whole chain
//! path prefix).
//!
//! Everything here is exact at the discrete level: the projection identities,
//! the cost decomposition, the adjoint-based gradient (the true Fréchet
//! derivative of the discrete cost), and the open-loop optimum found by
//! matrix-free conjugate gradient. Agreement with the continuous-time
//! solvers is a matter of convergence tests, not identities.

use nalgebra::{DMatrix, DVector};

use crate::chain::{one_step_matrix, TransitionMatrixCache};
use crate::error::{Error, Result};
use crate::eta::EtaSolution;
use crate::problem::{OriginalSlice, ProblemSpec, SplitCoefficients, FLUCT, MEAN};
use crate::riccati::RiccatiSolution;

/// Hard cap on total node count; the tree grows as `(2L)^N`.
pub const NODE_BUDGET: usize = 5_000_000;

/// Per-level node data. At level `k` there are `(2L)^k` nodes; the child of
/// node `i` under branch `local` (`0..2L`) is node `i*2L + local`, where
/// `local / L` selects the Brownian sign (`0 → +√Δt`) and `local % L` the
/// next regime.
#[derive(Debug, Clone)]
pub struct TreeLevel {
    /// Regime per node.
    pub regime: Vec<u16>,
    /// Unconditional probability per node.
    pub prob: Vec<f64>,
    /// Chain-history class per node (`class*L + next regime` child rule).
    pub class: Vec<u32>,
    /// Probability mass of each class.
    pub class_prob: Vec<f64>,
    /// Node count of each class.
    pub class_count: Vec<u32>,
}

impl TreeLevel {
    pub fn num_nodes(&self) -> usize {
        self.regime.len()
    }
}

/// The full tree: levels `0..=num_steps` with cached probabilities,
/// regimes, and chain-history classes.
#[derive(Debug)]
pub struct TreeModel {
    pub num_steps: usize,
    pub dt: f64,
    pub start: f64,
    pub num_regimes: usize,
    pub initial_regime: usize,
    pub trans: TransitionMatrixCache,
    pub levels: Vec<TreeLevel>,
}

impl TreeModel {
    pub fn time(&self, level: usize) -> f64 {
        self.start + level as f64 * self.dt
    }

    pub fn sqrt_dt(&self) -> f64 {
        self.dt.sqrt()
    }

    /// Brownian increment sign of a child branch.
    pub fn branch_dw(&self, local: usize) -> f64 {
        if local < self.num_regimes {
            self.sqrt_dt()
        } else {
            -self.sqrt_dt()
        }
    }

    pub fn branch_regime(&self, local: usize) -> usize {
        local % self.num_regimes
    }

    /// Ancestor of `node` (at `level`) at the shallower `target` level.
    pub fn ancestor(&self, level: usize, node: usize, target: usize) -> usize {
        let mut i = node;
        for _ in target..level {
            i /= 2 * self.num_regimes;
        }
        i
    }
}

/// Build the tree with `num_steps` steps from `initial_regime`. The step
/// must keep the one-step probabilities valid, and the node count must fit
/// the budget.
pub fn build_tree(spec: &ProblemSpec, initial_regime: usize, num_steps: usize) -> Result<TreeModel> {
    let l = spec.num_regimes();
    if initial_regime >= l {
        return Err(Error::RegimeOutOfRange {
            regime: initial_regime,
            num_regimes: l,
        });
    }
    let dt = (spec.grid.end - spec.grid.start) / num_steps.max(1) as f64;
    let trans = one_step_matrix(&spec.chain, dt)?;

    let branch = 2 * l;
    let mut total: usize = 0;
    let mut count: usize = 1;
    for _ in 0..=num_steps {
        total = total.saturating_add(count);
        if total > NODE_BUDGET {
            return Err(Error::Budget {
                nodes: total,
                budget: NODE_BUDGET,
            });
        }
        count = count.saturating_mul(branch);
    }

    let mut levels = Vec::with_capacity(num_steps + 1);
    levels.push(TreeLevel {
        regime: vec![initial_regime as u16],
        prob: vec![1.0],
        class: vec![0],
        class_prob: vec![1.0],
        class_count: vec![1],
    });
    for k in 0..num_steps {
        let parent = &levels[k];
        let nn = parent.num_nodes() * branch;
        let ncls = parent.class_prob.len() * l;
        let mut regime = vec![0u16; nn];
        let mut prob = vec![0.0; nn];
        let mut class = vec![0u32; nn];
        let mut class_prob = vec![0.0; ncls];
        let mut class_count = vec![0u32; ncls];
        for i in 0..parent.num_nodes() {
            let e = parent.regime[i] as usize;
            let p = parent.prob[i];
            let cls = parent.class[i] as usize;
            for local in 0..branch {
                let child = i * branch + local;
                let e2 = local % l;
                regime[child] = e2 as u16;
                prob[child] = p * 0.5 * trans.prob(e, e2);
                let c2 = cls * l + e2;
                class[child] = c2 as u32;
                class_prob[c2] += prob[child];
                class_count[c2] += 1;
            }
        }
        levels.push(TreeLevel {
            regime,
            prob,
            class,
            class_prob,
            class_count,
        });
    }

    Ok(TreeModel {
        num_steps,
        dt,
        start: spec.grid.start,
        num_regimes: l,
        initial_regime,
        trans,
        levels,
    })
}

// ---------------------------------------------------------------------------
// adapted processes
// ---------------------------------------------------------------------------

/// A process indexed by `(level, node)`, `dim` components per node.
/// Adaptedness is structural: a node is its own history.
#[derive(Debug, Clone)]
pub struct AdaptedProcess {
    pub dim: usize,
    pub levels: Vec<Vec<f64>>,
}

impl AdaptedProcess {
    /// Zero process on levels `0..num_levels`.
    pub fn zeros(tree: &TreeModel, dim: usize, num_levels: usize) -> Self {
        let levels = (0..num_levels)
            .map(|k| vec![0.0; tree.levels[k].num_nodes() * dim])
            .collect();
        Self { dim, levels }
    }

    /// Zero control process (levels `0..num_steps`).
    pub fn zero_control(tree: &TreeModel, dim: usize) -> Self {
        Self::zeros(tree, dim, tree.num_steps)
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn node(&self, level: usize, node: usize) -> &[f64] {
        &self.levels[level][node * self.dim..(node + 1) * self.dim]
    }

    pub fn node_mut(&mut self, level: usize, node: usize) -> &mut [f64] {
        &mut self.levels[level][node * self.dim..(node + 1) * self.dim]
    }

    /// Fill from a chain-measurable function `f(t, regime)`.
    pub fn from_chain_fn(
        tree: &TreeModel,
        dim: usize,
        num_levels: usize,
        mut f: impl FnMut(f64, usize) -> DVector<f64>,
    ) -> Self {
        let mut out = Self::zeros(tree, dim, num_levels);
        for k in 0..num_levels {
            let t = tree.time(k);
            let vals: Vec<DVector<f64>> = (0..tree.num_regimes).map(|e| f(t, e)).collect();
            for i in 0..tree.levels[k].num_nodes() {
                let v = &vals[tree.levels[k].regime[i] as usize];
                out.node_mut(k, i).copy_from_slice(v.as_slice());
            }
        }
        out
    }

    pub fn axpy(&mut self, alpha: f64, other: &Self) {
        for (a, b) in self.levels.iter_mut().zip(&other.levels) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += alpha * y;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for a in self.levels.iter_mut() {
            for x in a.iter_mut() {
                *x *= alpha;
            }
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    /// Probability-and-time-weighted inner product
    /// `Σ_k Σ_node prob · ⟨a, b⟩ · dt`.
    pub fn weighted_dot(&self, other: &Self, tree: &TreeModel) -> f64 {
        let mut acc = 0.0;
        for k in 0..self.num_levels().min(other.num_levels()) {
            let lv = &tree.levels[k];
            let mut lvl_acc = 0.0;
            for i in 0..lv.num_nodes() {
                let a = self.node(k, i);
                let b = other.node(k, i);
                let mut d = 0.0;
                for c in 0..self.dim {
                    d += a[c] * b[c];
                }
                lvl_acc += lv.prob[i] * d;
            }
            acc += lvl_acc * tree.dt;
        }
        acc
    }

    /// Max absolute node value over nodes with positive probability.
    pub fn max_abs(&self, tree: &TreeModel) -> f64 {
        let mut worst = 0.0_f64;
        for k in 0..self.num_levels() {
            let lv = &tree.levels[k];
            for i in 0..lv.num_nodes() {
                if lv.prob[i] > 0.0 {
                    for &x in self.node(k, i) {
                        worst = worst.max(x.abs());
                    }
                }
            }
        }
        worst
    }
}

/// Project one level's node values onto the chain-history classes:
/// the exact conditional expectation given the chain path prefix.
pub fn project_level(tree: &TreeModel, level: usize, values: &[f64], dim: usize) -> Vec<f64> {
    let lv = &tree.levels[level];
    let ncls = lv.class_prob.len();
    let mut sums = vec![0.0; ncls * dim];
    let mut plain = vec![0.0; ncls * dim];
    for i in 0..lv.num_nodes() {
        let cls = lv.class[i] as usize;
        let p = lv.prob[i];
        for c in 0..dim {
            sums[cls * dim + c] += p * values[i * dim + c];
            plain[cls * dim + c] += values[i * dim + c];
        }
    }
    let mut out = vec![0.0; values.len()];
    for i in 0..lv.num_nodes() {
        let cls = lv.class[i] as usize;
        let cp = lv.class_prob[cls];
        for c in 0..dim {
            out[i * dim + c] = if cp > 0.0 {
                sums[cls * dim + c] / cp
            } else {
                // null class: fall back to the unweighted average
                plain[cls * dim + c] / lv.class_count[cls] as f64
            };
        }
    }
    out
}

/// Chain projection `Π₂[φ]` of a whole process; `Π₁[φ] = φ − Π₂[φ]`.
pub fn project_chain(tree: &TreeModel, proc: &AdaptedProcess) -> AdaptedProcess {
    let levels = (0..proc.num_levels())
        .map(|k| project_level(tree, k, &proc.levels[k], proc.dim))
        .collect();
    AdaptedProcess {
        dim: proc.dim,
        levels,
    }
}

// small dense helpers on flat slices (column-major nalgebra storage)
fn gemv(out: &mut [f64], alpha: f64, m: &DMatrix<f64>, x: &[f64]) {
    for c in 0..m.ncols() {
        let xc = alpha * x[c];
        if xc != 0.0 {
            for r in 0..m.nrows() {
                out[r] += m[(r, c)] * xc;
            }
        }
    }
}

fn gemv_t(out: &mut [f64], alpha: f64, m: &DMatrix<f64>, x: &[f64]) {
    for c in 0..m.ncols() {
        let mut acc = 0.0;
        for r in 0..m.nrows() {
            acc += m[(r, c)] * x[r];
        }
        out[c] += alpha * acc;
    }
}

/// `left' · M · right` with `left` along rows and `right` along columns.
fn quad(m: &DMatrix<f64>, left: &[f64], right: &[f64]) -> f64 {
    debug_assert_eq!(left.len(), m.nrows());
    debug_assert_eq!(right.len(), m.ncols());
    let mut acc = 0.0;
    for c in 0..m.ncols() {
        if right[c] != 0.0 {
            let mut col = 0.0;
            for r in 0..m.nrows() {
                col += m[(r, c)] * left[r];
            }
            acc += col * right[c];
        }
    }
    acc
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Original coefficients per regime at one tree level.
fn level_coeffs(tree: &TreeModel, spec: &ProblemSpec, level: usize) -> Result<Vec<OriginalSlice>> {
    let t = tree.time(level).min(spec.grid.end);
    (0..tree.num_regimes)
        .map(|e| spec.coeff_at(t, e))
        .collect()
}

// ---------------------------------------------------------------------------
// forward state and exact cost
// ---------------------------------------------------------------------------

/// Forward Euler state recursion with exact per-level chain projections:
///
/// ```text
/// X_{k+1} = X_k + (A X + Ā Π₂X + B u + B̄ Π₂u + b) Δt
///               + (C X + C̄ Π₂X + D u + D̄ Π₂u + σ) ΔW_k
/// ```
pub fn forward_state(
    tree: &TreeModel,
    spec: &ProblemSpec,
    u: &AdaptedProcess,
    x0: &DVector<f64>,
) -> Result<AdaptedProcess> {
    let n = spec.state_dim;
    let l = tree.num_regimes;
    let mut x = AdaptedProcess::zeros(tree, n, tree.num_steps + 1);
    x.node_mut(0, 0).copy_from_slice(x0.as_slice());
    for k in 0..tree.num_steps {
        let co = level_coeffs(tree, spec, k)?;
        let mx = project_level(tree, k, &x.levels[k], n);
        let mu = project_level(tree, k, &u.levels[k], u.dim);
        let branch = 2 * l;
        let (xs_k, xs_next) = {
            let (a, b) = x.levels.split_at_mut(k + 1);
            (&a[k], &mut b[0])
        };
        for i in 0..tree.levels[k].num_nodes() {
            let e = tree.levels[k].regime[i] as usize;
            let cf = &co[e];
            let xi = &xs_k[i * n..(i + 1) * n];
            let mxi = &mx[i * n..(i + 1) * n];
            let ui = u.node(k, i);
            let mui = &mu[i * u.dim..(i + 1) * u.dim];
            let mut drift = cf.drift.as_slice().to_vec();
            gemv(&mut drift, 1.0, &cf.a, xi);
            gemv(&mut drift, 1.0, &cf.a_bar, mxi);
            gemv(&mut drift, 1.0, &cf.b, ui);
            gemv(&mut drift, 1.0, &cf.b_bar, mui);
            let mut diff = cf.noise.as_slice().to_vec();
            gemv(&mut diff, 1.0, &cf.c, xi);
            gemv(&mut diff, 1.0, &cf.c_bar, mxi);
            gemv(&mut diff, 1.0, &cf.d, ui);
            gemv(&mut diff, 1.0, &cf.d_bar, mui);
            for local in 0..branch {
                let child = i * branch + local;
                let dw = tree.branch_dw(local);
                let out = &mut xs_next[child * n..(child + 1) * n];
                for c in 0..n {
                    out[c] = xi[c] + drift[c] * tree.dt + diff[c] * dw;
                }
            }
        }
    }
    Ok(x)
}

/// Exact probability-weighted cost of an adapted control (left-endpoint
/// rule in time), in the original coefficient form.
pub fn cost_exact(
    tree: &TreeModel,
    spec: &ProblemSpec,
    u: &AdaptedProcess,
    x0: &DVector<f64>,
) -> Result<f64> {
    let x = forward_state(tree, spec, u, x0)?;
    cost_of_state(tree, spec, &x, u)
}

/// Cost given an already-computed state path.
pub fn cost_of_state(
    tree: &TreeModel,
    spec: &ProblemSpec,
    x: &AdaptedProcess,
    u: &AdaptedProcess,
) -> Result<f64> {
    let n = spec.state_dim;
    let mut total = 0.0;
    for k in 0..tree.num_steps {
        let co = level_coeffs(tree, spec, k)?;
        let mx = project_level(tree, k, &x.levels[k], n);
        let mu = project_level(tree, k, &u.levels[k], u.dim);
        let lv = &tree.levels[k];
        let mut lvl = 0.0;
        for i in 0..lv.num_nodes() {
            let e = lv.regime[i] as usize;
            let cf = &co[e];
            let xi = x.node(k, i);
            let mxi = &mx[i * n..(i + 1) * n];
            let ui = u.node(k, i);
            let mui = &mu[i * u.dim..(i + 1) * u.dim];
            let mut val = quad(&cf.q, xi, xi) + quad(&cf.q_bar, mxi, mxi);
            val += 2.0 * quad(&cf.s, ui, xi) + 2.0 * quad(&cf.s_bar, mui, mxi);
            val += quad(&cf.r, ui, ui) + quad(&cf.r_bar, mui, mui);
            val += 2.0 * dot(cf.state_lin.as_slice(), xi)
                + 2.0 * dot(cf.state_lin_bar.as_slice(), mxi);
            val += 2.0 * dot(cf.ctrl_lin.as_slice(), ui)
                + 2.0 * dot(cf.ctrl_lin_bar.as_slice(), mui);
            lvl += lv.prob[i] * val;
        }
        total += lvl * tree.dt;
    }
    // terminal
    let k = tree.num_steps;
    let lv = &tree.levels[k];
    let mx = project_level(tree, k, &x.levels[k], n);
    for i in 0..lv.num_nodes() {
        let e = lv.regime[i] as usize;
        let xi = x.node(k, i);
        let mxi = &mx[i * n..(i + 1) * n];
        let g = &spec.terminal.g[e];
        let g_bar = &spec.terminal.g_bar[e];
        let mut val = quad(g, xi, xi) + quad(g_bar, mxi, mxi);
        val += 2.0 * dot(spec.terminal.g_lin[e].as_slice(), xi)
            + 2.0 * dot(spec.terminal.g_lin_bar[e].as_slice(), mxi);
        total += lv.prob[i] * val;
    }
    Ok(0.5 * total)
}

/// The same cost evaluated in the decomposed (split) form: fluctuation and
/// chain-mean parts summed separately. Equals [`cost_of_state`] to rounding.
pub fn cost_of_state_split(
    tree: &TreeModel,
    split: &SplitCoefficients,
    x: &AdaptedProcess,
    u: &AdaptedProcess,
) -> Result<f64> {
    let n = split.state_dim;
    let m = split.control_dim;
    let mut total = 0.0;
    for k in 0..tree.num_steps {
        let t = tree.time(k).min(split.grid.end);
        let co: Vec<_> = (0..tree.num_regimes)
            .map(|e| split.coeff_at(t, e))
            .collect::<Result<_>>()?;
        let mx = project_level(tree, k, &x.levels[k], n);
        let mu = project_level(tree, k, &u.levels[k], m);
        let lv = &tree.levels[k];
        let mut lvl = 0.0;
        for i in 0..lv.num_nodes() {
            let cf = &co[lv.regime[i] as usize];
            let xi = x.node(k, i);
            let mxi = &mx[i * n..(i + 1) * n];
            let ui = u.node(k, i);
            let mui = &mu[i * m..(i + 1) * m];
            let x1: Vec<f64> = (0..n).map(|c| xi[c] - mxi[c]).collect();
            let u1: Vec<f64> = (0..m).map(|c| ui[c] - mui[c]).collect();
            let parts: [(&[f64], &[f64]); 2] = [(&x1, &u1), (mxi, mui)];
            let mut val = 0.0;
            for (part, (xp, up)) in parts.iter().enumerate() {
                val += quad(&cf.q[part], xp, xp)
                    + 2.0 * quad(&cf.s[part], up, xp)
                    + quad(&cf.r[part], up, up)
                    + 2.0 * dot(cf.state_lin[part].as_slice(), xp)
                    + 2.0 * dot(cf.ctrl_lin[part].as_slice(), up);
            }
            lvl += lv.prob[i] * val;
        }
        total += lvl * tree.dt;
    }
    let k = tree.num_steps;
    let lv = &tree.levels[k];
    let mx = project_level(tree, k, &x.levels[k], n);
    for i in 0..lv.num_nodes() {
        let e = lv.regime[i] as usize;
        let xi = x.node(k, i);
        let mxi = &mx[i * n..(i + 1) * n];
        let x1: Vec<f64> = (0..n).map(|c| xi[c] - mxi[c]).collect();
        let parts: [&[f64]; 2] = [&x1, mxi];
        let mut val = 0.0;
        for (part, xp) in parts.iter().enumerate() {
            val += quad(&split.g[part][e], xp, xp)
                + 2.0 * dot(split.g_lin[part][e].as_slice(), xp);
        }
        total += lv.prob[i] * val;
    }
    Ok(0.5 * total)
}

// ---------------------------------------------------------------------------
// exact gradient via the discrete adjoint
// ---------------------------------------------------------------------------

/// Adjoint sweep products: costate `y` (levels `0..=N`), its one-step
/// predictable projection `y_pred` and the Brownian covariation `z`
/// (levels `0..N`), and the cost gradient (levels `0..N`).
pub struct AdjointData {
    pub y: AdaptedProcess,
    pub y_pred: AdaptedProcess,
    pub z: AdaptedProcess,
    pub grad: AdaptedProcess,
}

/// Backward adjoint recursion on the tree; all conditional expectations are
/// exact. The returned gradient is the exact Fréchet derivative of
/// [`cost_exact`] in the probability-and-time-weighted inner product.
pub fn adjoint_sweep(
    tree: &TreeModel,
    spec: &ProblemSpec,
    x: &AdaptedProcess,
    u: &AdaptedProcess,
) -> Result<AdjointData> {
    let n = spec.state_dim;
    let m = spec.control_dim;
    let l = tree.num_regimes;
    let branch = 2 * l;
    let mut y = AdaptedProcess::zeros(tree, n, tree.num_steps + 1);
    let mut y_pred = AdaptedProcess::zeros(tree, n, tree.num_steps);
    let mut z = AdaptedProcess::zeros(tree, n, tree.num_steps);
    let mut grad = AdaptedProcess::zeros(tree, m, tree.num_steps);

    // terminal costate: G X + Ḡ Π₂X + g + ḡ
    {
        let k = tree.num_steps;
        let lv = &tree.levels[k];
        let mx = project_level(tree, k, &x.levels[k], n);
        for i in 0..lv.num_nodes() {
            let e = lv.regime[i] as usize;
            let yi = y.node_mut(k, i);
            yi.copy_from_slice(spec.terminal.g_lin[e].as_slice());
            for c in 0..n {
                yi[c] += spec.terminal.g_lin_bar[e][c];
            }
            gemv(yi, 1.0, &spec.terminal.g[e], x.node(k, i));
            gemv(yi, 1.0, &spec.terminal.g_bar[e], &mx[i * n..(i + 1) * n]);
        }
    }

    for k in (0..tree.num_steps).rev() {
        let co = level_coeffs(tree, spec, k)?;
        let lv = &tree.levels[k];
        let nn = lv.num_nodes();

        // E_k[Y_{k+1}] and Z_k = E_k[Y_{k+1} ΔW] / dt
        for i in 0..nn {
            let e = lv.regime[i] as usize;
            let (yp, zi) = (vec![0.0; n], vec![0.0; n]);
            let mut yp = yp;
            let mut zi = zi;
            for local in 0..branch {
                let child = i * branch + local;
                let w = 0.5 * tree.trans.prob(e, tree.branch_regime(local));
                if w == 0.0 {
                    continue;
                }
                let yc = y.node(k + 1, child);
                let dw = tree.branch_dw(local);
                for c in 0..n {
                    yp[c] += w * yc[c];
                    zi[c] += w * dw * yc[c];
                }
            }
            for c in 0..n {
                zi[c] /= tree.dt;
            }
            y_pred.node_mut(k, i).copy_from_slice(&yp);
            z.node_mut(k, i).copy_from_slice(&zi);
        }

        let myp = project_level(tree, k, &y_pred.levels[k], n);
        let mz = project_level(tree, k, &z.levels[k], n);
        let mx = project_level(tree, k, &x.levels[k], n);
        let mu = project_level(tree, k, &u.levels[k], m);

        for i in 0..nn {
            let e = lv.regime[i] as usize;
            let cf = &co[e];
            let xi = x.node(k, i);
            let mxi = &mx[i * n..(i + 1) * n];
            let ui = u.node(k, i);
            let mui = &mu[i * m..(i + 1) * m];
            let ypi = y_pred.node(k, i).to_vec();
            let mypi = &myp[i * n..(i + 1) * n];
            let zi = z.node(k, i).to_vec();
            let mzi = &mz[i * n..(i + 1) * n];

            // control gradient
            let gi = grad.node_mut(k, i);
            gi.copy_from_slice(cf.ctrl_lin.as_slice());
            for c in 0..m {
                gi[c] += cf.ctrl_lin_bar[c];
            }
            gemv(gi, 1.0, &cf.s, xi);
            gemv(gi, 1.0, &cf.s_bar, mxi);
            gemv(gi, 1.0, &cf.r, ui);
            gemv(gi, 1.0, &cf.r_bar, mui);
            gemv_t(gi, 1.0, &cf.b, &ypi);
            gemv_t(gi, 1.0, &cf.b_bar, mypi);
            gemv_t(gi, 1.0, &cf.d, &zi);
            gemv_t(gi, 1.0, &cf.d_bar, mzi);

            // costate recursion
            let yi = y.node_mut(k, i);
            for c in 0..n {
                yi[c] = ypi[c] + tree.dt * (cf.state_lin[c] + cf.state_lin_bar[c]);
            }
            gemv_t(yi, tree.dt, &cf.a, &ypi);
            gemv_t(yi, tree.dt, &cf.a_bar, mypi);
            gemv_t(yi, tree.dt, &cf.c, &zi);
            gemv_t(yi, tree.dt, &cf.c_bar, mzi);
            gemv(yi, tree.dt, &cf.q, xi);
            gemv(yi, tree.dt, &cf.q_bar, mxi);
            gemv_t(yi, tree.dt, &cf.s, ui);
            gemv_t(yi, tree.dt, &cf.s_bar, mui);
        }
    }

    Ok(AdjointData {
        y,
        y_pred,
        z,
        grad,
    })
}

/// Exact cost gradient at `u` (per-node stationarity expression).
pub fn gradient_exact(
    tree: &TreeModel,
    spec: &ProblemSpec,
    u: &AdaptedProcess,
    x0: &DVector<f64>,
) -> Result<AdaptedProcess> {
    let x = forward_state(tree, spec, u, x0)?;
    Ok(adjoint_sweep(tree, spec, &x, u)?.grad)
}

// ---------------------------------------------------------------------------
// open-loop optimum by conjugate gradient
// ---------------------------------------------------------------------------

/// Outcome of the discrete open-loop solve.
pub struct OpenLoopSolution {
    pub control: AdaptedProcess,
    pub cost: f64,
    /// Sup-norm of the gradient at the optimum.
    pub grad_norm: f64,
    pub cg_iterations: usize,
}

/// Default relative conjugate-gradient tolerance.
pub const CG_TOL: f64 = 1e-10;

/// Minimize the exact discrete quadratic cost by matrix-free conjugate
/// gradient on the gradient map. Stops when the node-wise gradient drops
/// below `CG_TOL * (1 + scale)` where `scale` is the sup-norm of the
/// gradient at zero. Detects non-positive curvature (loss of uniform
/// convexity at this discretization) as a hard error.
pub fn solve_open_loop(
    tree: &TreeModel,
    spec: &ProblemSpec,
    x0: &DVector<f64>,
) -> Result<OpenLoopSolution> {
    solve_open_loop_with(tree, spec, x0, CG_TOL)
}

/// [`solve_open_loop`] with an explicit relative tolerance.
pub fn solve_open_loop_with(
    tree: &TreeModel,
    spec: &ProblemSpec,
    x0: &DVector<f64>,
    rel_tol: f64,
) -> Result<OpenLoopSolution> {
    let m = spec.control_dim;
    let zero = AdaptedProcess::zero_control(tree, m);
    let psi1 = gradient_exact(tree, spec, &zero, x0)?;
    let scale = psi1.max_abs(tree);
    let tol = rel_tol * (1.0 + scale);

    // A u := grad(u) − grad(0), symmetric positive semidefinite
    let apply = |v: &AdaptedProcess| -> Result<AdaptedProcess> {
        let mut g = gradient_exact(tree, spec, v, x0)?;
        g.axpy(-1.0, &psi1);
        Ok(g)
    };

    let mut u = AdaptedProcess::zero_control(tree, m);
    let mut r = psi1.clone();
    r.scale(-1.0); // r = −grad(u) = −(A u + ψ₁)
    let mut p = r.clone();
    let mut rs = r.weighted_dot(&r, tree);
    let dim: usize = (0..tree.num_steps)
        .map(|k| tree.levels[k].num_nodes() * m)
        .sum();
    let max_iter = dim + 32;
    let mut iters = 0;

    while r.max_abs(tree) > tol {
        if iters >= max_iter {
            return Err(Error::MaxIterations { max: max_iter });
        }
        let ap = apply(&p)?;
        let curv = p.weighted_dot(&ap, tree);
        let p_norm = p.weighted_dot(&p, tree);
        if curv <= 0.0 {
            if curv < -1e-14 * p_norm.max(1e-300) {
                return Err(Error::NonConvex { curvature: curv });
            }
            // numerically flat direction with a still-unmet node-wise
            // tolerance: nothing more CG can do
            break;
        }
        let alpha = rs / curv;
        u.axpy(alpha, &p);
        iters += 1;
        if iters % 25 == 0 {
            // refresh the residual from the true gradient
            let mut g = gradient_exact(tree, spec, &u, x0)?;
            g.scale(-1.0);
            r = g;
        } else {
            r.axpy(-alpha, &ap);
        }
        let rs_new = r.weighted_dot(&r, tree);
        let beta = rs_new / rs;
        rs = rs_new;
        let mut p_new = r.clone();
        p_new.axpy(beta, &p);
        p = p_new;
    }

    // final true gradient
    let grad = gradient_exact(tree, spec, &u, x0)?;
    let cost = cost_exact(tree, spec, &u, x0)?;
    Ok(OpenLoopSolution {
        control: u,
        cost,
        grad_norm: grad.max_abs(tree),
        cg_iterations: iters,
    })
}

// ---------------------------------------------------------------------------
// closed-loop rollout and decoupling verification
// ---------------------------------------------------------------------------

/// Roll the feedback `u = Θ₁ (X − Π₂X) + Θ₂ Π₂X + v` forward on the tree
/// and return `(u, X)`. `theta(t, e)` supplies the two gains; `v`, when
/// given, is an arbitrary adapted offset process.
pub fn closed_loop_rollout(
    tree: &TreeModel,
    spec: &ProblemSpec,
    mut theta: impl FnMut(f64, usize) -> Result<(DMatrix<f64>, DMatrix<f64>)>,
    v: Option<&AdaptedProcess>,
    x0: &DVector<f64>,
) -> Result<(AdaptedProcess, AdaptedProcess)> {
    let n = spec.state_dim;
    let m = spec.control_dim;
    let l = tree.num_regimes;
    let branch = 2 * l;
    let mut x = AdaptedProcess::zeros(tree, n, tree.num_steps + 1);
    let mut u = AdaptedProcess::zero_control(tree, m);
    x.node_mut(0, 0).copy_from_slice(x0.as_slice());

    for k in 0..tree.num_steps {
        let t = tree.time(k);
        let co = level_coeffs(tree, spec, k)?;
        let gains: Vec<(DMatrix<f64>, DMatrix<f64>)> =
            (0..l).map(|e| theta(t, e)).collect::<Result<_>>()?;
        let mx = project_level(tree, k, &x.levels[k], n);
        // feedback control at this level
        for i in 0..tree.levels[k].num_nodes() {
            let e = tree.levels[k].regime[i] as usize;
            let xi = x.node(k, i).to_vec();
            let mxi = &mx[i * n..(i + 1) * n];
            let x1: Vec<f64> = (0..n).map(|c| xi[c] - mxi[c]).collect();
            let ui = u.node_mut(k, i);
            if let Some(vp) = v {
                ui.copy_from_slice(vp.node(k, i));
            }
            gemv(ui, 1.0, &gains[e].0, &x1);
            gemv(ui, 1.0, &gains[e].1, mxi);
        }
        // one Euler step (same recursion as forward_state)
        let mu = project_level(tree, k, &u.levels[k], m);
        let (xs_k, xs_next) = {
            let (a, b) = x.levels.split_at_mut(k + 1);
            (&a[k], &mut b[0])
        };
        for i in 0..tree.levels[k].num_nodes() {
            let e = tree.levels[k].regime[i] as usize;
            let cf = &co[e];
            let xi = &xs_k[i * n..(i + 1) * n];
            let mxi = &mx[i * n..(i + 1) * n];
            let ui = u.node(k, i);
            let mui = &mu[i * m..(i + 1) * m];
            let mut drift = cf.drift.as_slice().to_vec();
            gemv(&mut drift, 1.0, &cf.a, xi);
            gemv(&mut drift, 1.0, &cf.a_bar, mxi);
            gemv(&mut drift, 1.0, &cf.b, ui);
            gemv(&mut drift, 1.0, &cf.b_bar, mui);
            let mut diff = cf.noise.as_slice().to_vec();
            gemv(&mut diff, 1.0, &cf.c, xi);
            gemv(&mut diff, 1.0, &cf.c_bar, mxi);
            gemv(&mut diff, 1.0, &cf.d, ui);
            gemv(&mut diff, 1.0, &cf.d_bar, mui);
            for local in 0..branch {
                let child = i * branch + local;
                let dw = tree.branch_dw(local);
                let out = &mut xs_next[child * n..(child + 1) * n];
                for c in 0..n {
                    out[c] = xi[c] + drift[c] * tree.dt + diff[c] * dw;
                }
            }
        }
    }
    Ok((u, x))
}

/// Report of the decoupling verification at the oracle optimum.
#[derive(Debug, Clone)]
pub struct DecouplingReport {
    /// `max_node |Y − (P₁ (X−Π₂X) + P₂ Π₂X + η₂)|`.
    pub max_decoupling_error: f64,
    /// `max_node` of the per-part stationarity written through the
    /// continuous-time solution: `𝒮_i X_i + ℛ_i u_i + r̂_i`.
    pub stationarity_residual: f64,
    pub j_star: f64,
    pub grad_norm: f64,
}

/// Solve the oracle optimum and compare its adjoint with the continuous
/// decoupling ansatz; both errors shrink at first order in the step.
pub fn verify_decoupling(
    tree: &TreeModel,
    spec: &ProblemSpec,
    split: &SplitCoefficients,
    ric: &RiccatiSolution,
    eta: &EtaSolution,
    x0: &DVector<f64>,
) -> Result<DecouplingReport> {
    let sol = solve_open_loop(tree, spec, x0)?;
    let x = forward_state(tree, spec, &sol.control, x0)?;
    let adj = adjoint_sweep(tree, spec, &x, &sol.control)?;
    let n = spec.state_dim;

    let mut worst = 0.0_f64;
    for k in 0..=tree.num_steps {
        let t = tree.time(k).min(split.grid.end);
        let lv = &tree.levels[k];
        let mx = project_level(tree, k, &x.levels[k], n);
        let p1: Vec<DMatrix<f64>> = (0..tree.num_regimes)
            .map(|e| ric.p_at(FLUCT, t, e))
            .collect::<Result<_>>()?;
        let p2: Vec<DMatrix<f64>> = (0..tree.num_regimes)
            .map(|e| ric.p_at(MEAN, t, e))
            .collect::<Result<_>>()?;
        let et: Vec<DVector<f64>> = (0..tree.num_regimes)
            .map(|e| eta.eta_at(t, e))
            .collect::<Result<_>>()?;
        for i in 0..lv.num_nodes() {
            if lv.prob[i] == 0.0 {
                continue;
            }
            let e = lv.regime[i] as usize;
            let xi = x.node(k, i);
            let mxi = &mx[i * n..(i + 1) * n];
            let x1: Vec<f64> = (0..n).map(|c| xi[c] - mxi[c]).collect();
            let mut pred = et[e].as_slice().to_vec();
            gemv(&mut pred, 1.0, &p1[e], &x1);
            gemv(&mut pred, 1.0, &p2[e], mxi);
            let yi = adj.y.node(k, i);
            for c in 0..n {
                worst = worst.max((yi[c] - pred[c]).abs());
            }
        }
    }

    let stat = stationarity_split_residual(tree, split, ric, eta, &x, &sol.control)?;
    Ok(DecouplingReport {
        max_decoupling_error: worst,
        stationarity_residual: stat,
        j_star: sol.cost,
        grad_norm: sol.grad_norm,
    })
}

/// Max node-wise norm of the per-part stationarity expression
/// `𝒮_i X_i + ℛ_i u_i + r̂_i` with `𝒮_i, ℛ_i, r̂_i` built from the
/// continuous-time solution.
pub fn stationarity_split_residual(
    tree: &TreeModel,
    split: &SplitCoefficients,
    ric: &RiccatiSolution,
    eta: &EtaSolution,
    x: &AdaptedProcess,
    u: &AdaptedProcess,
) -> Result<f64> {
    let n = split.state_dim;
    let m = split.control_dim;
    let mut worst = 0.0_f64;
    for k in 0..tree.num_steps {
        let t = tree.time(k);
        let lv = &tree.levels[k];
        let mx = project_level(tree, k, &x.levels[k], n);
        let mu = project_level(tree, k, &u.levels[k], m);
        for i in 0..lv.num_nodes() {
            if lv.prob[i] == 0.0 {
                continue;
            }
            let e = lv.regime[i] as usize;
            let co = split.coeff_at(t, e)?;
            let p1 = ric.p_at(FLUCT, t, e)?;
            let p2 = ric.p_at(MEAN, t, e)?;
            let eta_te = eta.eta_at(t, e)?;
            let xi = x.node(k, i);
            let mxi = &mx[i * n..(i + 1) * n];
            let ui = u.node(k, i);
            let mui = &mu[i * m..(i + 1) * m];
            let x1: Vec<f64> = (0..n).map(|c| xi[c] - mxi[c]).collect();
            let u1: Vec<f64> = (0..m).map(|c| ui[c] - mui[c]).collect();
            for part in 0..2 {
                let (xp, up): (&[f64], &[f64]) = if part == FLUCT {
                    (&x1, &u1)
                } else {
                    (mxi, mui)
                };
                let p_here = if part == FLUCT { &p1 } else { &p2 };
                let d = &co.d[part];
                let r_map = &co.r[part] + d.transpose() * &p1 * d;
                let s_map = co.b[part].transpose() * p_here
                    + d.transpose() * &p1 * &co.c[part]
                    + &co.s[part];
                // offset target r̂: zero for the fluctuation part here
                let mut resid = vec![0.0; m];
                if part == MEAN {
                    let target = co.b[MEAN].transpose() * &eta_te
                        + d.transpose() * &p1 * &co.noise[MEAN]
                        + &co.ctrl_lin[MEAN];
                    resid.copy_from_slice(target.as_slice());
                }
                gemv(&mut resid, 1.0, &s_map, xp);
                gemv(&mut resid, 1.0, &r_map, up);
                for c in 0..m {
                    worst = worst.max(resid[c].abs());
                }
            }
        }
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// conditional-expectation consistency (chain prefix vs full chain path)
// ---------------------------------------------------------------------------

/// Max discrepancy between the conditional expectation of a level-`k`
/// scalar function given the chain history up to `k` and given the full
/// chain path. Zero in exact arithmetic: the Brownian branches are
/// independent of the later chain moves.
pub fn conditioning_consistency_discrepancy(tree: &TreeModel, level: usize, xi: &[f64]) -> f64 {
    let proj_k = project_level(tree, level, xi, 1);
    // lift ξ to the leaves and project onto full chain paths
    let leaves = tree.num_steps;
    let lv = &tree.levels[leaves];
    let mut lifted = vec![0.0; lv.num_nodes()];
    for (i, slot) in lifted.iter_mut().enumerate() {
        *slot = xi[tree.ancestor(leaves, i, level)];
    }
    let proj_full = project_level(tree, leaves, &lifted, 1);
    let mut worst = 0.0_f64;
    for i in 0..lv.num_nodes() {
        if lv.prob[i] > 0.0 {
            let anc = tree.ancestor(leaves, i, level);
            worst = worst.max((proj_full[i] - proj_k[anc]).abs());
        }
    }
    worst
}

/// `true` when the two conditionings agree to the exactness tolerance.
pub fn conditioning_consistency_check(tree: &TreeModel, level: usize, xi: &[f64]) -> bool {
    let scale = xi.iter().fold(0.0_f64, |a, &b| a.max(b.abs()));
    conditioning_consistency_discrepancy(tree, level, xi) <= 1e-12 * (1.0 + scale)
}
