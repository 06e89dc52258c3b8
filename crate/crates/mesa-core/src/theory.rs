//! Numerical theory lab for one-step climb games.
//!
//! The object of study is a penalized maximum-likelihood fit of a quadratic
//! joint-Q model to the rewards seen under an exploration strategy. The lab
//! provides:
//!
//! * closed-form solutions of the fit under class-symmetric exploration
//!   profiles ([`solve_mle_reduced`]),
//! * an exact normal-equations oracle for arbitrary per-cell visit
//!   distributions ([`solve_mle_oracle`]), used as ground truth,
//! * the criterion deciding whether the fitted greedy action is the optimal
//!   cell ([`criterion_holds`]),
//! * minimal exploration horizons per strategy ([`min_exploration_steps`]),
//! * and a failure-probability estimate with a checkable upper bound
//!   ([`pfail_estimate`], [`exp_tail_bound`]).
//!
//! Everything is a pure function of its inputs; sweeps parallelize safely.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{stream, tags};
use crate::{Error, Result};

/// Horizon cap for [`min_exploration_steps`]; strategies that do not satisfy
/// the criterion by this horizon are reported as unbounded (`None`).
pub const MAX_EXPLORATION_STEPS: u64 = 1_000_000_000;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

// --- Exploration profiles -----------------------------------------------------

/// Exploration strategies whose step-averaged visit frequencies have closed
/// forms. `greedy` is the joint cell that receives the exploiting mass of the
/// ε-greedy strategies; it must lie in the suboptimal block (both coordinates
/// nonzero).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ExplorationStrategy {
    /// Every cell with probability `1/U²` at every step.
    Uniform,
    /// Both agents play the same uniformly random action: diagonal mass
    /// `1/U`, nothing off the diagonal.
    Structured,
    /// Uniform at the first step, then mixture `ε·uniform + (1−ε)·greedy`.
    EpsGreedyFixed { eps: f64, greedy: (usize, usize) },
    /// Like `EpsGreedyFixed` but with the schedule `ε(t) = 1/t`.
    EpsGreedyDecay { greedy: (usize, usize) },
}

/// Step-averaged class visit frequencies of an exploration strategy on a
/// one-step game with `U` actions per agent: `f0` on the optimal cell
/// `(0,0)`, `f1` split over the `2m` cross cells (`m = U−1`), `f2` over the
/// `m²` block cells. `lambda = T·σ_w²/σ_e²` is the effective prior-to-noise
/// ratio after `T` steps; `t`, `sigma_w`, `sigma_e` are carried for
/// reporting (`t = 0` marks a synthetic profile built from raw fractions).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplorationProfile {
    pub f0: f64,
    pub f1: f64,
    pub f2: f64,
    pub m: usize,
    pub u: usize,
    pub lambda: f64,
    pub t: u64,
    pub sigma_w: f64,
    pub sigma_e: f64,
}

impl ExplorationProfile {
    /// Builds a synthetic profile directly from class fractions, validating
    /// the invariants (nonnegative, summing to 1 within 1e−12, λ > 0).
    pub fn from_fractions(f0: f64, f1: f64, f2: f64, u: usize, lambda: f64) -> Result<Self> {
        if u < 2 {
            return Err(Error::InvalidArgument(format!(
                "profile needs at least 2 actions per agent, got {u}"
            )));
        }
        if !(f0 >= 0.0 && f1 >= 0.0 && f2 >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "class fractions must be nonnegative, got ({f0}, {f1}, {f2})"
            )));
        }
        if ((f0 + f1 + f2) - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "class fractions must sum to 1, got {}",
                f0 + f1 + f2
            )));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lambda must be positive and finite, got {lambda}"
            )));
        }
        Ok(ExplorationProfile {
            f0,
            f1,
            f2,
            m: u - 1,
            u,
            lambda,
            t: 0,
            sigma_w: 1.0,
            sigma_e: 1.0,
        })
    }

    /// The class-symmetric per-cell average matrix implied by the fractions:
    /// `f0` on `(0,0)`, `f1/(2m)` on each cross cell, `f2/m²` on each block
    /// cell. This is the matrix whose exact fit the reduced closed form
    /// describes (the structured strategy is *not* class-symmetric; use
    /// [`structured_matrix`] for its true average).
    pub fn matrix(&self) -> Array2<f64> {
        let (u, m) = (self.u, self.m as f64);
        let mut out = Array2::zeros((u, u));
        out[[0, 0]] = self.f0;
        for i in 1..u {
            out[[0, i]] = self.f1 / (2.0 * m);
            out[[i, 0]] = self.f1 / (2.0 * m);
            for j in 1..u {
                out[[i, j]] = self.f2 / (m * m);
            }
        }
        out
    }

    fn require_nondegenerate(&self) -> Result<()> {
        if self.f0 <= 0.0 || self.f1 <= 0.0 || self.f2 <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "degenerate profile (f0={}, f1={}, f2={}): the closed forms divide \
                 by every class mass; use solve_mle_oracle instead",
                self.f0, self.f1, self.f2
            )));
        }
        Ok(())
    }
}

/// `H(t) = Σ_{i=1..t} 1/i`, exact below 10⁶ and via the asymptotic expansion
/// above (error there is far below f64 round-off of the exact sum).
fn harmonic(t: u64) -> f64 {
    if t < 1_000_000 {
        (1..=t).map(|i| 1.0 / i as f64).sum()
    } else {
        let tf = t as f64;
        tf.ln() + EULER_GAMMA + 1.0 / (2.0 * tf) - 1.0 / (12.0 * tf * tf)
    }
}

/// Step-averaged visit frequencies of `strategy` after `t` steps on a game
/// with `u` actions per agent, with `lambda = t·σ_w²/σ_e²`.
pub fn exploration_profile(
    strategy: ExplorationStrategy,
    u: usize,
    t: u64,
    sigma_w: f64,
    sigma_e: f64,
) -> Result<ExplorationProfile> {
    if u < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 actions per agent, got {u}"
        )));
    }
    if t < 1 {
        return Err(Error::InvalidArgument("need at least 1 step".into()));
    }
    if !(sigma_w > 0.0 && sigma_e > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise scales must be positive, got sigma_w={sigma_w}, sigma_e={sigma_e}"
        )));
    }
    let m = (u - 1) as f64;
    let uu = (u * u) as f64;
    let tf = t as f64;
    let check_greedy = |greedy: (usize, usize)| -> Result<()> {
        if greedy.0 == 0 || greedy.1 == 0 || greedy.0 >= u || greedy.1 >= u {
            return Err(Error::InvalidArgument(format!(
                "greedy cell {greedy:?} must have both coordinates in 1..{u} \
                 (a suboptimal block cell)"
            )));
        }
        Ok(())
    };
    let (f0, f1, f2) = match strategy {
        ExplorationStrategy::Uniform => (1.0 / uu, 2.0 * m / uu, m * m / uu),
        ExplorationStrategy::Structured => (1.0 / u as f64, 0.0, m / u as f64),
        ExplorationStrategy::EpsGreedyFixed { eps, greedy } => {
            check_greedy(greedy)?;
            if !(eps > 0.0 && eps <= 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "eps must lie in (0, 1], got {eps}"
                )));
            }
            // First step uniform; afterwards each cell gets ε/U² and the
            // greedy block cell the remaining 1−ε.
            let per_cell = (1.0 + (tf - 1.0) * eps) / (tf * uu);
            (
                per_cell,
                2.0 * m * per_cell,
                m * m * per_cell + (tf - 1.0) * (1.0 - eps) / tf,
            )
        }
        ExplorationStrategy::EpsGreedyDecay { greedy } => {
            check_greedy(greedy)?;
            let h = harmonic(t);
            let per_cell = h / (tf * uu);
            (
                per_cell,
                2.0 * m * per_cell,
                m * m * per_cell + (tf - h) / tf,
            )
        }
    };
    Ok(ExplorationProfile {
        f0,
        f1,
        f2,
        m: u - 1,
        u,
        lambda: tf * sigma_w * sigma_w / (sigma_e * sigma_e),
        t,
        sigma_w,
        sigma_e,
    })
}

/// Exact per-cell average matrix of the structured (diagonal) strategy:
/// `1/U` on each diagonal cell, zero elsewhere.
pub fn structured_matrix(u: usize) -> Array2<f64> {
    let mut out = Array2::zeros((u, u));
    for i in 0..u {
        out[[i, i]] = 1.0 / u as f64;
    }
    out
}

/// Reward matrix of the one-step game: `r` at `(0,0)`, `r(1−δ)` on the block,
/// zero on the cross cells.
pub fn reward_matrix(u: usize, r: f64, delta: f64) -> Array2<f64> {
    let mut out = Array2::zeros((u, u));
    out[[0, 0]] = r;
    for i in 1..u {
        for j in 1..u {
            out[[i, j]] = r * (1.0 - delta);
        }
    }
    out
}

fn validate_game(r: f64, delta: f64) -> Result<()> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "reward must be positive and finite, got {r}"
        )));
    }
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "penalty gap must lie in (0, 1], got {delta}"
        )));
    }
    Ok(())
}

// --- Reduced closed form ------------------------------------------------------

/// Solution of the penalized fit under a class-symmetric profile, reduced by
/// symmetry to six parameters: `q(0,0) = W0 + 2B + D`, cross cells
/// `W1 + B + C + D`, block cells `W2 + 2C + D`. The residuals satisfy the
/// identity `K0 + K2 = 2·K1 − r(2−δ)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReducedQParams {
    pub w0: f64,
    pub w1: f64,
    pub w2: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub k0: f64,
    pub k1: f64,
    pub k2: f64,
}

impl ReducedQParams {
    /// Fitted value of the optimal cell `(0,0)`.
    pub fn q_optimal(&self) -> f64 {
        self.w0 + 2.0 * self.b + self.d
    }

    /// Fitted value of a cross cell.
    pub fn q_cross(&self) -> f64 {
        self.w1 + self.b + self.c + self.d
    }

    /// Fitted value of a suboptimal block cell.
    pub fn q_block(&self) -> f64 {
        self.w2 + 2.0 * self.c + self.d
    }
}

// Shared denominator of the closed form.
fn criterion_denominator(p: &ExplorationProfile) -> f64 {
    let (f0, f1, f2, lam) = (p.f0, p.f1, p.f2, p.lambda);
    let m = p.m as f64;
    1.0 + 2.0 * f2 * (f1 * lam + 2.0 * m) * m / (f1 * (f2 * lam + m * m))
        + f2 * (f0 * lam + 1.0) * m * m / (f0 * (f2 * lam + m * m))
}

/// Closed-form solution of the penalized fit for a non-degenerate
/// class-symmetric profile. The `(B, C, D)` offsets are the minimum-norm
/// representatives of their gauge class (matching what the oracle's
/// pseudoinverse returns), obtained by minimizing `2B² + 2mC² + D²` subject
/// to the two fitted-value constraints.
pub fn solve_mle_reduced(
    profile: &ExplorationProfile,
    r: f64,
    delta: f64,
) -> Result<ReducedQParams> {
    validate_game(r, delta)?;
    profile.require_nondegenerate()?;
    let (f0, f1, f2, lam) = (profile.f0, profile.f1, profile.f2, profile.lambda);
    let m = profile.m as f64;

    let den = criterion_denominator(profile);
    // The displayed closed form leaves the sign of K2 ambiguous; the ratio
    // equations below only close with the negative root (the identity check
    // at the end would fail otherwise).
    let k2 = -r * (2.0 - delta) / den;
    let k1 = -(f2 * (f1 * lam + 2.0 * m) * m / (f1 * (f2 * lam + m * m))) * k2;
    let k0 = -(f1 * (f0 * lam + 1.0) * m / (f0 * (f1 * lam + 2.0 * m))) * k1;
    let identity_gap = (k0 + k2 - (2.0 * k1 - r * (2.0 - delta))).abs();
    if !(identity_gap < 1e-9 * k2.abs().max(1.0)) {
        return Err(Error::InvalidState(format!(
            "residual identity violated by {identity_gap}; inputs are numerically degenerate"
        )));
    }
    let w0 = -(f0 * lam / (f0 * lam + 1.0)) * k0;
    let w1 = -(f1 * lam / (f1 * lam + 2.0 * m)) * k1;
    let w2 = -(f2 * lam / (f2 * lam + m * m)) * k2;

    // Minimum-norm (B, C, D): minimize 2B² + 2mC² + D² subject to
    // 2B + D = K0 + r and B + C + D = K1. With the constraint matrix
    // A = [[2,0,1],[1,1,1]] and weight inverse diag(1/2, 1/(2m), 1) this is a
    // 2×2 solve for the Lagrange multipliers.
    let k_vec = (k0 + r, k1);
    let g11 = 3.0;
    let g12 = 2.0;
    let g22 = 1.5 + 1.0 / (2.0 * m);
    let det = g11 * g22 - g12 * g12;
    let y1 = (g22 * k_vec.0 - g12 * k_vec.1) / det;
    let y2 = (g11 * k_vec.1 - g12 * k_vec.0) / det;
    let b = y1 + 0.5 * y2;
    let c = y2 / (2.0 * m);
    let d = y1 + y2;

    Ok(ReducedQParams {
        w0,
        w1,
        w2,
        b,
        c,
        d,
        k0,
        k1,
        k2,
    })
}

/// Whether the fitted greedy action is the optimal cell, evaluated from the
/// closed form: `rδ ≥ (f2/f0 − 1)·(m²/(f2λ+m²))·r(2−δ)/den`. Equality counts
/// as holding, and the comparison carries a `1e−9` relative guard so exact
/// boundary values (integer λ*) classify as holding despite round-off.
pub fn criterion_holds(profile: &ExplorationProfile, r: f64, delta: f64) -> Result<bool> {
    validate_game(r, delta)?;
    profile.require_nondegenerate()?;
    let m = profile.m as f64;
    let den = criterion_denominator(profile);
    let rhs = (profile.f2 / profile.f0 - 1.0)
        * (m * m / (profile.f2 * profile.lambda + m * m))
        * r
        * (2.0 - delta)
        / den;
    let lhs = r * delta;
    Ok(lhs - rhs >= -1e-9 * lhs.abs().max(rhs.abs()))
}

// --- Exact oracle -------------------------------------------------------------

/// Exact maximizer of the penalized likelihood for an arbitrary visit
/// distribution: `q(i,j) = W[i,j] + b[i] + c[j] + d`. `unique` is false when
/// the normal system has null directions beyond the two structural gauge
/// shifts (`b ± α, d ∓ α` and `c ± β, d ∓ β`), in which case the returned
/// parameters are the minimum-norm representative.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullQParams {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub c: Array1<f64>,
    pub d: f64,
    pub unique: bool,
}

impl FullQParams {
    /// The fitted value matrix `W + b⊕c + d`.
    pub fn q_matrix(&self) -> Array2<f64> {
        let u = self.b.len();
        let mut out = Array2::zeros((u, u));
        for i in 0..u {
            for j in 0..u {
                out[[i, j]] = self.w[[i, j]] + self.b[i] + self.c[j] + self.d;
            }
        }
        out
    }

    /// First maximal cell of the fitted value matrix.
    pub fn argmax_cell(&self) -> (usize, usize) {
        let q = self.q_matrix();
        let mut best = (0, 0);
        for i in 0..q.nrows() {
            for j in 0..q.ncols() {
                if q[[i, j]] > q[best] {
                    best = (i, j);
                }
            }
        }
        best
    }

    /// Whether the optimal cell `(0,0)` attains the maximal fitted value
    /// within `tol` (boundary ties count as optimal).
    pub fn is_equivalently_optimal(&self, tol: f64) -> bool {
        let q = self.q_matrix();
        let max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        q[[0, 0]] >= max - tol
    }
}

// Flat parameter coordinates touched by cell (i,j): W[i,j], b[i], c[j], d.
fn cell_coords(u: usize, i: usize, j: usize) -> [usize; 4] {
    [i * u + j, u * u + i, u * u + u + j, u * u + 2 * u]
}

/// Solves the penalized fit exactly for an averaged per-cell visit matrix
/// with a given `lambda`. The normal equations carry the ridge `1/λ` on the
/// `W` coordinates only; the solution is the pseudoinverse (minimum-norm)
/// one, with the rank inspected to flag non-uniqueness beyond the structural
/// gauge.
pub fn solve_mle_oracle_avg(
    pe_avg: &Array2<f64>,
    r: f64,
    delta: f64,
    lambda: f64,
) -> Result<FullQParams> {
    validate_game(r, delta)?;
    let u = pe_avg.nrows();
    if u < 2 || pe_avg.ncols() != u {
        return Err(Error::InvalidArgument(format!(
            "visit matrix must be square with U ≥ 2, got {}×{}",
            pe_avg.nrows(),
            pe_avg.ncols()
        )));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "lambda must be positive and finite, got {lambda}"
        )));
    }
    let total: f64 = pe_avg.iter().sum();
    if pe_avg.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "visit matrix must be a distribution over all cells (nonnegative, \
             summing to 1); sum = {total}"
        )));
    }

    let p = u * u + 2 * u + 1;
    // Coordinates not touched by any visited cell decouple exactly: an
    // unvisited W entry is pinned to 0 by its ridge row, and a zero-mass
    // b/c/d coordinate is a pure null direction whose minimum-norm value is
    // 0. Solving only over the active block keeps that structure exact
    // instead of letting a dense factorization smear round-off into it.
    let mut active = vec![false; p];
    let rewards = reward_matrix(u, r, delta);
    for i in 0..u {
        for j in 0..u {
            if pe_avg[[i, j]] > 0.0 {
                for k in cell_coords(u, i, j) {
                    active[k] = true;
                }
            }
        }
    }
    let index: Vec<usize> = (0..p).filter(|&k| active[k]).collect();
    let pos: std::collections::HashMap<usize, usize> =
        index.iter().enumerate().map(|(s, &k)| (k, s)).collect();
    let np = index.len();
    if np == 0 {
        return Err(Error::InvalidArgument(
            "visit matrix has no support".into(),
        ));
    }

    let mut a = nalgebra::DMatrix::<f64>::zeros(np, np);
    let mut rhs = nalgebra::DVector::<f64>::zeros(np);
    for i in 0..u {
        for j in 0..u {
            let f = pe_avg[[i, j]];
            if f == 0.0 {
                continue;
            }
            let idx = cell_coords(u, i, j).map(|k| pos[&k]);
            for &row in &idx {
                for &col in &idx {
                    a[(row, col)] += f;
                }
                rhs[row] += f * rewards[[i, j]];
            }
        }
    }
    for (s, &k) in index.iter().enumerate() {
        if k < u * u {
            a[(s, s)] += 1.0 / lambda;
        }
    }

    let eig = a.clone().symmetric_eigen();
    let emax = eig
        .eigenvalues
        .iter()
        .fold(0.0f64, |acc, &v| acc.max(v.abs()));
    let tol = emax * np as f64 * f64::EPSILON;
    let active_rank = eig.eigenvalues.iter().filter(|v| v.abs() > tol).count();
    let pinv_apply = |v: &nalgebra::DVector<f64>| -> nalgebra::DVector<f64> {
        let mut coords = eig.eigenvectors.transpose() * v;
        for (x, lam) in coords.iter_mut().zip(eig.eigenvalues.iter()) {
            *x = if lam.abs() > tol { *x / *lam } else { 0.0 };
        }
        &eig.eigenvectors * coords
    };
    let mut theta = pinv_apply(&rhs);
    // One round of iterative refinement recovers the accuracy lost to
    // round-off in the factorization.
    let residual = &rhs - &a * &theta;
    theta += pinv_apply(&residual);
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidState(
            "normal equations solve produced non-finite parameters".into(),
        ));
    }

    let fetch = |k: usize| pos.get(&k).map_or(0.0, |&s| theta[s]);
    let mut w = Array2::zeros((u, u));
    for i in 0..u {
        for j in 0..u {
            w[[i, j]] = fetch(i * u + j);
        }
    }
    let b = Array1::from_iter((0..u).map(|i| fetch(u * u + i)));
    let c = Array1::from_iter((0..u).map(|j| fetch(u * u + u + j)));
    let d = fetch(p - 1);
    // Pruned ridge-pinned W coordinates are full-rank by construction;
    // pruned b/c/d coordinates are genuine null directions.
    let inactive_w = (0..u * u).filter(|&k| !active[k]).count();
    let rank = active_rank + inactive_w;
    Ok(FullQParams {
        w,
        b,
        c,
        d,
        // The b/c/d parametrization always leaves the two shift directions
        // free, so full identification is rank P−2.
        unique: rank >= p - 2,
    })
}

/// Solves the penalized fit exactly from a per-step list of visit matrices:
/// the matrices are averaged and `lambda = T·σ_w²/σ_e²` with `T` the number
/// of steps.
pub fn solve_mle_oracle(
    pe: &[Array2<f64>],
    r: f64,
    delta: f64,
    sigma_w: f64,
    sigma_e: f64,
) -> Result<FullQParams> {
    if pe.is_empty() {
        return Err(Error::InvalidArgument(
            "need at least one visit matrix".into(),
        ));
    }
    if !(sigma_w > 0.0 && sigma_e > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise scales must be positive, got sigma_w={sigma_w}, sigma_e={sigma_e}"
        )));
    }
    let u = pe[0].nrows();
    let mut avg = Array2::zeros((u, u));
    for (step, m) in pe.iter().enumerate() {
        if m.nrows() != u || m.ncols() != u {
            return Err(Error::InvalidArgument(format!(
                "visit matrix at step {step} has shape {}×{}, expected {u}×{u}",
                m.nrows(),
                m.ncols()
            )));
        }
        let total: f64 = m.iter().sum();
        if m.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "visit matrix at step {step} is not a distribution (sum {total})"
            )));
        }
        avg += m;
    }
    avg /= pe.len() as f64;
    let lambda = pe.len() as f64 * sigma_w * sigma_w / (sigma_e * sigma_e);
    solve_mle_oracle_avg(&avg, r, delta, lambda)
}

// --- Minimal exploration horizon ----------------------------------------------

/// Smallest horizon `T` at which `strategy` satisfies [`criterion_holds`]
/// (with `r = 1`; the criterion is homogeneous in `r`). Returns `None` when
/// the criterion is not met within [`MAX_EXPLORATION_STEPS`].
///
/// The search brackets the crossing by doubling and then bisection, which
/// presumes a single crossing; this is verified afterwards by probing
/// log-spaced horizons below `T*·(1−1e−6)` (the tiny boundary window absorbs
/// round-off ripple at the crossing itself) and failing loudly if any of
/// them already satisfies the criterion.
pub fn min_exploration_steps(
    strategy: ExplorationStrategy,
    u: usize,
    delta: f64,
    sigma_w: f64,
    sigma_e: f64,
) -> Result<Option<u64>> {
    let ok = |t: u64| -> Result<bool> {
        let profile = exploration_profile(strategy, u, t, sigma_w, sigma_e)?;
        criterion_holds(&profile, 1.0, delta)
    };
    let mut hi = 1u64;
    while !ok(hi)? {
        hi = hi.saturating_mul(2);
        if hi > MAX_EXPLORATION_STEPS {
            return Ok(None);
        }
    }
    let mut lo = (hi / 2).max(1);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if ok(mid)? {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let t_star = lo;

    if t_star > 1 {
        let cutoff = (t_star as f64 * (1.0 - 1e-6)).floor() as u64;
        let probes = 64;
        let mut last = 0;
        for k in 0..=probes {
            let t = ((cutoff as f64).powf(k as f64 / probes as f64)).round() as u64;
            let t = t.clamp(1, cutoff);
            if t == last {
                continue;
            }
            last = t;
            if ok(t)? {
                return Err(Error::InvalidState(format!(
                    "criterion already holds at T={t}, below the bracketed minimum T*={t_star}; \
                     the crossing is not single"
                )));
            }
        }
    }
    Ok(Some(t_star))
}

// --- Failure-probability estimate ----------------------------------------------

/// Probability that `N` exploration draws from `sample` all miss a goal cell
/// drawn from `goal`, three ways: a seeded Monte-Carlo estimate, the exact
/// grid sum `Σ p(x)·(1−ε·q(x))^N`, and (when `ε·N > 16`) the closed-form
/// upper bound from [`exp_tail_bound`] summed over the grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PfailEstimate {
    pub mc: f64,
    pub integral: f64,
    /// `None` when `ε·N ≤ 16`, where the bound's scalar inequality does not
    /// apply.
    pub bound: Option<f64>,
}

fn validate_density(name: &str, d: &[f64]) -> Result<()> {
    if d.is_empty() {
        return Err(Error::InvalidArgument(format!("{name} density is empty")));
    }
    if d.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "{name} density has negative or non-finite entries"
        )));
    }
    let total: f64 = d.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "{name} density sums to {total}, expected 1"
        )));
    }
    Ok(())
}

fn pow_n(base: f64, n: u64) -> f64 {
    if n <= i32::MAX as u64 {
        base.powi(n as i32)
    } else {
        base.powf(n as f64)
    }
}

/// Estimates the probability that `n` draws from the sampling density miss
/// the goal, where each draw hits cell `x` with probability `epsilon·q(x)`.
/// Densities are discretized on a shared grid of cells.
pub fn pfail_estimate(
    goal_density: &[f64],
    sample_density: &[f64],
    epsilon: f64,
    n: u64,
    mc_samples: usize,
    seed: u64,
) -> Result<PfailEstimate> {
    validate_density("goal", goal_density)?;
    validate_density("sample", sample_density)?;
    if goal_density.len() != sample_density.len() {
        return Err(Error::InvalidArgument(format!(
            "densities live on different grids ({} vs {} cells)",
            goal_density.len(),
            sample_density.len()
        )));
    }
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must lie in (0, 1], got {epsilon}"
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one draw".into()));
    }
    if mc_samples == 0 {
        return Err(Error::InvalidArgument(
            "need at least one Monte-Carlo sample".into(),
        ));
    }
    if let Some(bad) = sample_density
        .iter()
        .find(|&&q| epsilon * q > 1.0 + 1e-12)
    {
        return Err(Error::InvalidArgument(format!(
            "epsilon·q = {} exceeds 1: per-step hit masses must be probabilities",
            epsilon * bad
        )));
    }

    let integral: f64 = goal_density
        .iter()
        .zip(sample_density)
        .map(|(&p, &q)| p * pow_n((1.0 - epsilon * q).max(0.0), n))
        .sum();

    // Monte Carlo over goal cells: draw x ~ p, score (1−εq(x))^N.
    let mut rng = stream(seed, tags::THEORY);
    let cdf: Vec<f64> = goal_density
        .iter()
        .scan(0.0, |acc, &p| {
            *acc += p;
            Some(*acc)
        })
        .collect();
    let mut mc = 0.0;
    for _ in 0..mc_samples {
        let draw: f64 = rng.random();
        let cell = cdf
            .partition_point(|&c| c <= draw)
            .min(goal_density.len() - 1);
        mc += pow_n((1.0 - epsilon * sample_density[cell]).max(0.0), n);
    }
    mc /= mc_samples as f64;

    let k = epsilon * n as f64;
    let bound = if k > 16.0 {
        let denom = 0.5 * k.ln();
        let mut total = 0.0;
        for (&p, &q) in goal_density.iter().zip(sample_density) {
            if p == 0.0 {
                continue;
            }
            if q == 0.0 {
                total = f64::INFINITY;
                break;
            }
            total += p * ((1.0 / q).ln() + 2.0 * q + 16.0) / denom;
        }
        if integral > total * (1.0 + 1e-12) {
            return Err(Error::InvalidState(format!(
                "exact integral {integral} exceeds its upper bound {total}"
            )));
        }
        Some(total)
    } else {
        None
    };

    Ok(PfailEstimate {
        mc,
        integral,
        bound,
    })
}

/// Right-hand side of the scalar tail inequality
/// `e^(−kx) ≤ [ln(1/x) + x]/(½·ln k) + x/k`, valid for `k > 16` and
/// `x ∈ (0, 4]`.
pub fn exp_tail_bound(k: f64, x: f64) -> Result<f64> {
    if !(k > 16.0) {
        return Err(Error::InvalidArgument(format!(
            "tail bound requires k > 16, got {k}"
        )));
    }
    if !(x > 0.0 && x <= 4.0) {
        return Err(Error::InvalidArgument(format!(
            "tail bound requires x in (0, 4], got {x}"
        )));
    }
    let half_log_k = 0.5 * k.ln();
    Ok((1.0 / x).ln() / half_log_k + x / half_log_k + x / k)
}

/// Whether the scalar tail inequality holds at `(k, x)` (with a `1e−12`
/// round-off guard).
pub fn exp_tail_holds(k: f64, x: f64) -> Result<bool> {
    Ok((-k * x).exp() <= exp_tail_bound(k, x)? + 1e-12)
}
