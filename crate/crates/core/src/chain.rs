//! Finite-state Markov chain: generator, exact path simulation, one-step
//! transition matrices for the tree oracle, and grid sampling of paths.
//!
//! The chain `α(·)` is the source of all coefficient randomness. Its
//! compensated jump martingale is what couples the per-regime Riccati and
//! offset equations through the generator.

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use crate::error::{Error, Result};

/// Derive an independent counter-based RNG stream from `(master seed,
/// stream index)`. Streams are independent of evaluation order, so Monte
/// Carlo reductions don't depend on scheduling.
pub fn stream_rng(master_seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(stream);
    rng
}

/// Jump-rate matrix of a time-homogeneous finite-state Markov chain:
/// `rates[e][e']` for `e' != e` is the jump intensity, diagonal entries are
/// `-sum` of the row's off-diagonal part.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainGenerator {
    rates: DMatrix<f64>,
}

impl ChainGenerator {
    /// Hard structural checks only (square, nonempty, finite); sign and
    /// row-sum invariants are reported by `problem::validate`.
    pub fn new(rates: DMatrix<f64>) -> Result<Self> {
        if rates.nrows() == 0 || rates.nrows() != rates.ncols() {
            return Err(Error::InvalidProblem(format!(
                "chain generator must be square and nonempty, got {}x{}",
                rates.nrows(),
                rates.ncols()
            )));
        }
        if rates.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidProblem(
                "chain generator has non-finite entries".into(),
            ));
        }
        Ok(Self { rates })
    }

    /// Single-regime chain (no switching).
    pub fn single() -> Self {
        Self {
            rates: DMatrix::zeros(1, 1),
        }
    }

    pub fn num_regimes(&self) -> usize {
        self.rates.nrows()
    }

    pub fn rates(&self) -> &DMatrix<f64> {
        &self.rates
    }

    pub fn rate(&self, from: usize, to: usize) -> f64 {
        self.rates[(from, to)]
    }

    /// Total exit rate out of `e`.
    pub fn exit_rate(&self, e: usize) -> f64 {
        (-self.rates[(e, e)]).max(0.0)
    }

    pub fn max_exit_rate(&self) -> f64 {
        (0..self.num_regimes())
            .map(|e| self.exit_rate(e))
            .fold(0.0, f64::max)
    }
}

/// One realization of the chain on `[start, end]`: càdlàg, `states[k]`
/// active on `[jump_times[k], jump_times[k+1])`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimePath {
    pub initial_state: usize,
    /// Strictly increasing jump times in `(start, end]`.
    pub jump_times: Vec<f64>,
    /// State entered at each jump; consecutive entries differ.
    pub states: Vec<usize>,
    pub start: f64,
    pub end: f64,
}

impl RegimePath {
    /// Regime at time `t` (càdlàg: a jump at exactly `t` has happened).
    pub fn regime_at(&self, t: f64) -> usize {
        // number of jump times <= t
        let k = self.jump_times.partition_point(|&jt| jt <= t);
        if k == 0 {
            self.initial_state
        } else {
            self.states[k - 1]
        }
    }

    pub fn num_jumps(&self) -> usize {
        self.jump_times.len()
    }
}

/// Exact-in-law chain sample via exponential holding times and
/// embedded-chain jumps, deterministic given the seed.
pub fn simulate_path(
    gen: &ChainGenerator,
    e0: usize,
    start: f64,
    end: f64,
    seed: u64,
) -> Result<RegimePath> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    simulate_path_with(gen, e0, start, end, &mut rng)
}

/// Same as [`simulate_path`] but driven by a caller-owned RNG stream.
pub fn simulate_path_with(
    gen: &ChainGenerator,
    e0: usize,
    start: f64,
    end: f64,
    rng: &mut impl Rng,
) -> Result<RegimePath> {
    let l = gen.num_regimes();
    if e0 >= l {
        return Err(Error::RegimeOutOfRange {
            regime: e0,
            num_regimes: l,
        });
    }
    let mut t = start;
    let mut e = e0;
    let mut jump_times = Vec::new();
    let mut states = Vec::new();
    loop {
        let lambda = gen.exit_rate(e);
        if lambda <= 0.0 {
            break; // absorbing
        }
        let hold: f64 = Exp::new(lambda)
            .expect("positive rate")
            .sample(rng);
        t += hold;
        if t > end {
            break;
        }
        // embedded chain: jump to e' != e with probability rates[e][e']/lambda
        let mut u: f64 = rng.gen::<f64>() * lambda;
        let mut next = e;
        for e2 in 0..l {
            if e2 == e {
                continue;
            }
            let r = gen.rate(e, e2).max(0.0);
            if u < r {
                next = e2;
                break;
            }
            u -= r;
        }
        if next == e {
            // rounding at the top of the cumulative walk: take the last
            // positive-rate target
            next = (0..l)
                .rev()
                .find(|&e2| e2 != e && gen.rate(e, e2) > 0.0)
                .unwrap_or(e);
            if next == e {
                break;
            }
        }
        jump_times.push(t);
        states.push(next);
        e = next;
    }
    Ok(RegimePath {
        initial_state: e0,
        jump_times,
        states,
        start,
        end,
    })
}

/// First-order one-step transition probabilities on step `dt`:
/// `p[e][e'] = dt * rates[e][e']` off-diagonal, diagonal fills the row to 1.
#[derive(Debug, Clone)]
pub struct TransitionMatrixCache {
    pub dt: f64,
    pub p: DMatrix<f64>,
}

impl TransitionMatrixCache {
    pub fn prob(&self, from: usize, to: usize) -> f64 {
        self.p[(from, to)]
    }
}

/// Build the one-step matrix used by the tree oracle. The step must satisfy
/// `dt * max exit rate <= 0.5`; a larger step is a hard error because
/// clamping probabilities would bias the oracle.
pub fn one_step_matrix(gen: &ChainGenerator, dt: f64) -> Result<TransitionMatrixCache> {
    if dt.is_nan() || dt <= 0.0 {
        return Err(Error::InvalidProblem(format!("step must be positive, got {dt}")));
    }
    let max_rate = gen.max_exit_rate();
    if dt * max_rate > 0.5 {
        return Err(Error::StepTooLarge { dt, max_rate });
    }
    let l = gen.num_regimes();
    let mut p = DMatrix::zeros(l, l);
    for e in 0..l {
        let mut off = 0.0;
        for e2 in 0..l {
            if e2 != e {
                let v = dt * gen.rate(e, e2).max(0.0);
                p[(e, e2)] = v;
                off += v;
            }
        }
        p[(e, e)] = 1.0 - off;
    }
    Ok(TransitionMatrixCache { dt, p })
}

/// Regime active at each grid time (càdlàg sampling: a jump exactly at a
/// grid point yields the post-jump state).
pub fn occupation_weights(path: &RegimePath, times: &[f64]) -> Vec<usize> {
    times.iter().map(|&t| path.regime_at(t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state(r01: f64, r10: f64) -> ChainGenerator {
        ChainGenerator::new(DMatrix::from_row_slice(2, 2, &[-r01, r01, r10, -r10])).unwrap()
    }

    /// Test-only matrix exponential by scaling and squaring a Taylor series;
    /// independent of everything in the crate.
    fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
        let n = a.nrows();
        let norm = a.amax();
        let k = norm.log2().ceil().max(0.0) as u32 + 6;
        let scaled = a / 2f64.powi(k as i32);
        let mut term = DMatrix::<f64>::identity(n, n);
        let mut sum = DMatrix::<f64>::identity(n, n);
        for j in 1..30 {
            term = &term * &scaled / j as f64;
            sum += &term;
        }
        for _ in 0..k {
            sum = &sum * &sum;
        }
        sum
    }

    #[test]
    fn zero_generator_never_jumps() {
        let gen = ChainGenerator::new(DMatrix::zeros(3, 3)).unwrap();
        let path = simulate_path(&gen, 1, 0.0, 100.0, 7).unwrap();
        assert_eq!(path.num_jumps(), 0);
        assert_eq!(path.regime_at(57.0), 1);
    }

    #[test]
    fn paths_are_deterministic_in_seed() {
        let gen = two_state(1.0, 2.0);
        let a = simulate_path(&gen, 0, 0.0, 10.0, 42).unwrap();
        let b = simulate_path(&gen, 0, 0.0, 10.0, 42).unwrap();
        let c = simulate_path(&gen, 0, 0.0, 10.0, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn path_states_alternate_and_times_increase() {
        let gen = two_state(3.0, 1.5);
        for seed in 0..20 {
            let p = simulate_path(&gen, 0, 0.5, 4.0, seed).unwrap();
            let mut prev_t = 0.5;
            let mut prev_e = 0;
            for (k, &t) in p.jump_times.iter().enumerate() {
                assert!(t > prev_t && t <= 4.0);
                assert_ne!(p.states[k], prev_e);
                prev_t = t;
                prev_e = p.states[k];
            }
        }
    }

    #[test]
    fn marginal_law_matches_matrix_exponential() {
        // empirical P(α(t)=1) vs the exp(rates·t) row, 3 standard errors
        let gen = two_state(1.0, 0.5);
        let paths = 100_000;
        for &t in &[1.0, 5.0, 10.0] {
            let p_exact = expm(&(gen.rates() * t))[(0, 1)];
            let mut hits = 0usize;
            for seed in 0..paths {
                let path = simulate_path(&gen, 0, 0.0, 10.0, seed as u64).unwrap();
                if path.regime_at(t) == 1 {
                    hits += 1;
                }
            }
            let freq = hits as f64 / paths as f64;
            let se = (p_exact * (1.0 - p_exact) / paths as f64).sqrt();
            assert!(
                (freq - p_exact).abs() <= 3.0 * se,
                "t={t}: freq {freq} vs exact {p_exact} (se {se})"
            );
        }
    }

    #[test]
    fn one_step_matrix_first_order() {
        let gen = two_state(1.0, 0.0);
        let cache = one_step_matrix(&gen, 0.1).unwrap();
        assert!((cache.prob(0, 1) - 0.1).abs() < 1e-15);
        assert!((cache.prob(0, 0) - 0.9).abs() < 1e-15);

        let id = one_step_matrix(&ChainGenerator::new(DMatrix::zeros(2, 2)).unwrap(), 0.3)
            .unwrap();
        assert_eq!(id.p, DMatrix::identity(2, 2));

        // dt * max rate = 0.6 -> hard error
        assert!(matches!(
            one_step_matrix(&two_state(2.0, 1.0), 0.3),
            Err(Error::StepTooLarge { .. })
        ));
    }

    #[test]
    fn one_step_rows_are_distributions() {
        let gen = ChainGenerator::new(DMatrix::from_row_slice(
            3,
            3,
            &[-1.5, 1.0, 0.5, 0.2, -0.7, 0.5, 0.0, 2.0, -2.0],
        ))
        .unwrap();
        let cache = one_step_matrix(&gen, 0.2).unwrap();
        for e in 0..3 {
            let row_sum: f64 = (0..3).map(|e2| cache.prob(e, e2)).sum();
            assert!((row_sum - 1.0).abs() < 1e-12);
            for e2 in 0..3 {
                let p = cache.prob(e, e2);
                assert!((0.0..=1.0).contains(&p));
            }
        }
    }

    #[test]
    fn one_step_frequencies_match_exact_kernel() {
        // empirical one-step frequencies vs exp(rates·dt), with the
        // first-order matrix within O(dt^2) of the exact kernel
        let gen = two_state(1.0, 0.5);
        let dt = 0.05;
        let cache = one_step_matrix(&gen, dt).unwrap();
        let exact = expm(&(gen.rates() * dt));
        assert!((&cache.p - &exact).amax() < dt * dt * gen.max_exit_rate().powi(2));

        let paths = 100_000;
        let mut hits = 0usize;
        for seed in 0..paths {
            let path = simulate_path(&gen, 0, 0.0, dt, 1_000_000 + seed as u64).unwrap();
            if path.regime_at(dt) == 1 {
                hits += 1;
            }
        }
        let freq = hits as f64 / paths as f64;
        let p = exact[(0, 1)];
        let se = (p * (1.0 - p) / paths as f64).sqrt();
        assert!(
            (freq - p).abs() <= 3.0 * se,
            "freq {freq} vs exact {p} (se {se})"
        );
    }

    #[test]
    fn compensated_jump_count_is_mean_zero() {
        // N_{0->1}(t) − rates[0][1] * occupation(0, [0,t]) has mean 0
        let gen = two_state(1.0, 0.5);
        let t_end = 4.0;
        let paths = 50_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for seed in 0..paths {
            let path = simulate_path(&gen, 0, 0.0, t_end, 7_000_000 + seed as u64).unwrap();
            let mut count = 0.0;
            let mut occ0 = 0.0;
            let mut prev_t = 0.0;
            let mut prev_e = 0usize;
            for (k, &jt) in path.jump_times.iter().enumerate() {
                if prev_e == 0 {
                    occ0 += jt - prev_t;
                    count += if path.states[k] == 1 { 1.0 } else { 0.0 };
                }
                prev_t = jt;
                prev_e = path.states[k];
            }
            if prev_e == 0 {
                occ0 += t_end - prev_t;
            }
            let mart = count - gen.rate(0, 1) * occ0;
            sum += mart;
            sumsq += mart * mart;
        }
        let mean = sum / paths as f64;
        let var = (sumsq / paths as f64 - mean * mean).max(0.0);
        let se = (var / paths as f64).sqrt();
        assert!(mean.abs() <= 3.0 * se, "mean {mean} vs se {se}");
    }

    #[test]
    fn occupation_weights_conventions() {
        let path = RegimePath {
            initial_state: 0,
            jump_times: vec![0.5, 1.25],
            states: vec![1, 0],
            start: 0.0,
            end: 2.0,
        };
        // jump exactly at a grid point -> post-jump state (càdlàg)
        let grid = [0.0, 0.5, 1.0, 1.5, 2.0];
        assert_eq!(occupation_weights(&path, &grid), vec![0, 1, 1, 0, 0]);
        // jump strictly inside a cell: both endpoint samples correct
        assert_eq!(path.regime_at(1.2), 1);
        assert_eq!(path.regime_at(1.3), 0);
    }
}
