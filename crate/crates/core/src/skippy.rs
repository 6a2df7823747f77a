//! Skippy policies: skip probabilities, the greedy action π⁺ and its clipped
//! value C, trajectory generation with stage maps, and the correction terms
//! D, E→, E, φ̄_Q, F and F̄.

use crate::features::{range_over, FeatureTable};
use crate::geometry::{DesignSet, Preconditioning};
use crate::linalg::{Matrix, Vector};
use crate::mdp::{
    argmax_first, evaluate_policy_exact, stage_rng, step_with, MdpError, MemorylessPolicy, Mdp, StateId, Step,
    StepDraws, Trajectory,
};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SkippyError {
    #[error("guess vector at stage {stage} index {index} has norm {norm} above {radius}")]
    GuessNorm { stage: usize, index: usize, norm: f64, radius: f64 },
    #[error("phase budget k = {k} outside [1, {horizon}]")]
    Budget { k: usize, horizon: usize },
    #[error(transparent)]
    Mdp(#[from] MdpError),
}

/// Guessed design parameters ϑ̂_h^i (preconditioned coordinates) for stages
/// 1..H; entry 0 is unused and kept empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Guess {
    pub stages: Vec<Vec<Vector>>,
}

impl Guess {
    pub fn zeros(horizon: usize, d0: usize, dim: usize) -> Self {
        let mut stages = vec![vec![Vector::zeros(dim); d0]; horizon];
        if horizon > 0 {
            stages[0].clear();
        }
        Self { stages }
    }

    /// The design parameters themselves, zero-padded to `d0` per stage.
    pub fn correct(designs: &[DesignSet], d0: usize) -> Self {
        let mut stages: Vec<Vec<Vector>> = designs.iter().map(|d| d.guess_vectors(d0)).collect();
        if let Some(first) = stages.first_mut() {
            first.clear();
        }
        Self { stages }
    }

    pub fn validate(&self, radius: f64) -> Result<(), SkippyError> {
        for (stage, vs) in self.stages.iter().enumerate() {
            for (index, v) in vs.iter().enumerate() {
                let norm = v.norm();
                if norm > radius + 1e-9 {
                    return Err(SkippyError::GuessNorm {
                        stage,
                        index,
                        norm,
                        radius,
                    });
                }
            }
        }
        Ok(())
    }
}

/// θ̄_t for every stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimisticParams {
    pub theta: Vec<Vector>,
}

impl OptimisticParams {
    pub fn zeros(horizon: usize, dim: usize) -> Self {
        Self {
            theta: vec![Vector::zeros(dim); horizon],
        }
    }
}

/// max_k max_{i,j} ⟨Q_h(φ(s,i) − φ(s,j)), ϑ̂_h^k⟩.
pub fn range_q_guess(actions: &[Vector], guess_h: &[Vector], q_h: &Matrix) -> f64 {
    let lifted: Vec<Vector> = guess_h.iter().map(|g| q_h * g).collect();
    range_over(actions, &lifted)
}

/// τ = min{1, range·√(2d)·H/ε}.
pub fn tau_from_range(range: f64, dim: usize, horizon: usize, epsilon: f64) -> f64 {
    (range * (2.0 * dim as f64).sqrt() * horizon as f64 / epsilon).min(1.0)
}

/// (π⁺(s), C(s)) for the features of one state.
pub fn pi_plus_and_c(actions: &[Vector], theta: &Vector, horizon: usize) -> (usize, f64) {
    let vals: Vec<f64> = actions.iter().map(|p| p.dot(theta)).collect();
    let a = argmax_first(&vals);
    (a, vals[a].clamp(0.0, horizon as f64))
}

/// Per-state τ, π⁺ and C, indexed `[stage][state]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkipTables {
    pub horizon: usize,
    pub tau: Vec<Vec<f64>>,
    pub plus: Vec<Vec<usize>>,
    pub c: Vec<Vec<f64>>,
}

impl SkipTables {
    pub fn tau(&self, s: StateId) -> f64 {
        self.tau[s.stage][s.index]
    }
    pub fn plus(&self, s: StateId) -> usize {
        self.plus[s.stage][s.index]
    }
    pub fn c(&self, s: StateId) -> f64 {
        self.c[s.stage][s.index]
    }
}

/// τ for every state; stage 0 is fixed to 1.
pub fn tau_table(phi: &FeatureTable, guess: &Guess, q: &Preconditioning, epsilon: f64) -> Vec<Vec<f64>> {
    let horizon = phi.phi.len();
    (0..horizon)
        .map(|t| {
            phi.phi[t]
                .iter()
                .map(|acts| {
                    if t == 0 {
                        1.0
                    } else {
                        let r = range_q_guess(acts, &guess.stages[t], q.q(t));
                        tau_from_range(r, phi.dim, horizon, epsilon)
                    }
                })
                .collect()
        })
        .collect()
}

pub fn skip_tables(
    phi: &FeatureTable,
    guess: &Guess,
    theta_bar: &OptimisticParams,
    q: &Preconditioning,
    epsilon: f64,
) -> SkipTables {
    let tau = tau_table(phi, guess, q, epsilon);
    with_theta(phi, tau, theta_bar)
}

/// Combine a τ table with π⁺/C computed from θ̄.
pub fn with_theta(phi: &FeatureTable, tau: Vec<Vec<f64>>, theta_bar: &OptimisticParams) -> SkipTables {
    let horizon = phi.phi.len();
    let mut plus = Vec::with_capacity(horizon);
    let mut c = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let (p, cv): (Vec<usize>, Vec<f64>) = phi.phi[t]
            .iter()
            .map(|acts| pi_plus_and_c(acts, &theta_bar.theta[t], horizon))
            .unzip();
        plus.push(p);
        c.push(cv);
    }
    SkipTables { horizon, tau, plus, c }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippyTrajectory {
    pub trajectory: Trajectory,
    /// `stage_map[j]` is the stage of landing j+1; `None` stands for H+1.
    pub stage_map: Vec<Option<usize>>,
    pub taus: Vec<f64>,
    pub landed: Vec<bool>,
    /// Phase budget k ∈ [1, H].
    pub budget: usize,
}

impl SkippyTrajectory {
    /// Stage of the k-th landing (k is 1-based).
    pub fn landing(&self, k: usize) -> Option<usize> {
        self.stage_map.get(k - 1).copied().flatten()
    }

    pub fn steps(&self) -> &[Step] {
        &self.trajectory.steps
    }
}

/// One episode of the skippy policy with phase budget `k`. Randomness at
/// stage t comes from `stage_rng(seed, t)`: first the landing draw, then the
/// reward and transition draws.
pub fn run_skippy_policy(
    mdp: &Mdp,
    tables: &SkipTables,
    k: usize,
    seed: u64,
) -> Result<SkippyTrajectory, SkippyError> {
    let horizon = mdp.horizon();
    if k == 0 || k > horizon {
        return Err(SkippyError::Budget { k, horizon });
    }
    let mut stage_map = vec![None; horizon];
    let mut taus = Vec::with_capacity(horizon);
    let mut landed = Vec::with_capacity(horizon);
    let mut steps = Vec::with_capacity(horizon);
    let mut j = 0;
    let mut s = StateId::initial();
    for t in 0..horizon {
        let mut rng = stage_rng(seed, t);
        let tau = tables.tau(s);
        let land = rng.gen::<f64>() < tau;
        let action = if land {
            stage_map[j] = Some(t);
            j += 1;
            if j <= k {
                tables.plus(s)
            } else {
                0
            }
        } else {
            0
        };
        let (next, reward) = step_with(mdp, s, action, StepDraws::from_rng(&mut rng))?;
        taus.push(tau);
        landed.push(land);
        steps.push(Step {
            state: s,
            action,
            reward,
        });
        if let Some(n) = next {
            s = n;
        }
    }
    Ok(SkippyTrajectory {
        trajectory: Trajectory {
            steps,
            seed: Some(seed),
        },
        stage_map,
        taus,
        landed,
        budget: k,
    })
}

/// (τ, C, r) at one position of a trajectory suffix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuffixPoint {
    pub tau: f64,
    pub c: f64,
    pub reward: f64,
}

/// Suffix points of a trajectory starting at stage `from`.
pub fn suffix_points(steps: &[Step], tables: &SkipTables, from: usize) -> Vec<SuffixPoint> {
    steps[from.min(steps.len())..]
        .iter()
        .map(|st| SuffixPoint {
            tau: tables.tau(st.state),
            c: tables.c(st.state),
            reward: st.reward,
        })
        .collect()
}

/// D at every position: C(s_i) − Σ_{u≥i} r_u.
pub fn d_values(suffix: &[SuffixPoint]) -> Vec<f64> {
    let mut tail = 0.0;
    let mut out = vec![0.0; suffix.len()];
    for i in (0..suffix.len()).rev() {
        tail += suffix[i].reward;
        out[i] = suffix[i].c - tail;
    }
    out
}

/// E→ of the whole suffix by the probability form
/// Σ_j D_j τ_j Π_{j'<j} (1 − τ_{j'}).
pub fn e_to_probability_form(suffix: &[SuffixPoint]) -> f64 {
    let d = d_values(suffix);
    let mut total = 0.0;
    for j in 0..suffix.len() {
        let mut w = suffix[j].tau;
        for p in &suffix[..j] {
            w *= 1.0 - p.tau;
        }
        total += d[j] * w;
    }
    total
}

/// E→ from every position; entry `len` is 0.
pub fn e_to_all(suffix: &[SuffixPoint]) -> Vec<f64> {
    let d = d_values(suffix);
    let mut out = vec![0.0; suffix.len() + 1];
    for i in (0..suffix.len()).rev() {
        let tau = suffix[i].tau;
        out[i] = tau * d[i] + (1.0 - tau) * out[i + 1];
    }
    out
}

/// E_i = τ_i (D_i − E→_{i+1}).
pub fn e_terms(suffix: &[SuffixPoint]) -> Vec<f64> {
    let d = d_values(suffix);
    let to = e_to_all(suffix);
    (0..suffix.len())
        .map(|i| suffix[i].tau * (d[i] - to[i + 1]))
        .collect()
}

/// Σ r + E→ over the suffix.
pub fn estimated_value(suffix: &[SuffixPoint]) -> f64 {
    suffix.iter().map(|p| p.reward).sum::<f64>() + e_to_all(suffix)[0]
}

/// E_I[Σ_{u<I} r_u + 1{I in suffix} C(s_I)] with I the first landing
/// position, by enumerating I.
pub fn estimated_value_by_enumeration(suffix: &[SuffixPoint]) -> f64 {
    let mut total = 0.0;
    let mut survive = 1.0;
    let mut prefix = 0.0;
    for p in suffix {
        total += survive * p.tau * (prefix + p.c);
        survive *= 1.0 - p.tau;
        prefix += p.reward;
    }
    total + survive * prefix
}

/// Least-squares target at landing stage t: Σ_{u≥t} R_u + E→(suffix from t+1).
/// `suffix` starts at stage t.
pub fn lsq_target(suffix: &[SuffixPoint]) -> f64 {
    let tail: f64 = suffix.iter().map(|p| p.reward).sum();
    tail + e_to_all(&suffix[1.min(suffix.len())..])[0]
}

/// Unit vector along the largest Q_h(φ(s,i) − φ(s,j)); zero if all vanish.
pub fn phi_bar_q(actions: &[Vector], q_h: &Matrix) -> Vector {
    let dim = q_h.nrows();
    let mut best = Vector::zeros(dim);
    let mut best_norm = 0.0;
    for i in 0..actions.len() {
        for j in 0..actions.len() {
            let v = q_h * (&actions[i] - &actions[j]);
            let n = v.norm();
            if n > best_norm {
                best_norm = n;
                best = v;
            }
        }
    }
    if best_norm > 0.0 {
        best / best_norm
    } else {
        best
    }
}

pub fn phi_bar_table(phi: &FeatureTable, q: &Preconditioning) -> Vec<Vec<Vector>> {
    phi.phi
        .iter()
        .enumerate()
        .map(|(t, st)| st.iter().map(|acts| phi_bar_q(acts, q.q(t))).collect())
        .collect()
}

/// F = φ̄ φ̄ᵀ E.
pub fn f_matrix(phi_bar: &Vector, e: f64) -> Matrix {
    phi_bar * phi_bar.transpose() * e
}

/// Expected E→ from each state under π⁰, and v^{π⁰}, by backward DP.
pub fn expected_e_to(mdp: &Mdp, tables: &SkipTables) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), SkippyError> {
    let v0 = evaluate_policy_exact(mdp, &MemorylessPolicy::first_action(mdp))?.v;
    let horizon = mdp.horizon();
    let mut e: Vec<Vec<f64>> = vec![Vec::new(); horizon];
    for t in (0..horizon).rev() {
        e[t] = mdp
            .stage_states(t)
            .map(|s| {
                let next = if t + 1 < horizon {
                    mdp.expect_next(s, 0, &e[t + 1])
                } else {
                    0.0
                };
                let tau = tables.tau(s);
                tau * (tables.c(s) - v0[t][s.index]) + (1.0 - tau) * next
            })
            .collect();
    }
    Ok((e, v0))
}

/// F̄(s) = E_{π⁰,s}[F] for every state, exactly.
pub fn bar_f_table(
    mdp: &Mdp,
    tables: &SkipTables,
    phi_bar: &[Vec<Vector>],
) -> Result<Vec<Vec<Matrix>>, SkippyError> {
    let (e, v0) = expected_e_to(mdp, tables)?;
    let horizon = mdp.horizon();
    Ok((0..horizon)
        .map(|t| {
            mdp.stage_states(t)
                .map(|s| {
                    let next = if t + 1 < horizon {
                        mdp.expect_next(s, 0, &e[t + 1])
                    } else {
                        0.0
                    };
                    let mean_e = tables.tau(s) * (tables.c(s) - v0[t][s.index] - next);
                    f_matrix(&phi_bar[t][s.index], mean_e)
                })
                .collect()
        })
        .collect())
}

/// Monte-Carlo estimate of F̄(s) with entrywise standard errors, from
/// rollouts of π⁰ started at `s`.
pub fn bar_f_monte_carlo(
    mdp: &Mdp,
    tables: &SkipTables,
    phi_bar: &[Vec<Vector>],
    s: StateId,
    samples: usize,
    seed: u64,
) -> Result<(Matrix, Matrix), SkippyError> {
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for i in 0..samples {
        let mut rng = stage_rng(seed.wrapping_add(i as u64), s.stage);
        let mut cur = s;
        let mut steps = Vec::new();
        loop {
            let (next, reward) = step_with(mdp, cur, 0, StepDraws::from_rng(&mut rng))?;
            steps.push(Step {
                state: cur,
                action: 0,
                reward,
            });
            match next {
                Some(n) => cur = n,
                None => break,
            }
        }
        let pts = suffix_points(&steps, tables, 0);
        let e = e_terms(&pts)[0];
        sum += e;
        sum_sq += e * e;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    let se = (var / n).sqrt();
    let pb = &phi_bar[s.stage][s.index];
    let outer = pb * pb.transpose();
    Ok((outer.clone() * mean, outer.map(|x| x.abs()) * se))
}

/// Exact v(s1) of the skippy policy with budget `k`, by DP over (state,
/// landings so far).
pub fn evaluate_skippy_exact(mdp: &Mdp, tables: &SkipTables, k: usize) -> Result<f64, SkippyError> {
    let horizon = mdp.horizon();
    if k == 0 || k > horizon {
        return Err(SkippyError::Budget { k, horizon });
    }
    // value[t][s][j], j = landings before stage t
    let mut next_v: Vec<Vec<f64>> = Vec::new();
    for t in (0..horizon).rev() {
        let mut cur = vec![vec![0.0; horizon + 1]; mdp.stage_size(t)];
        for s in mdp.stage_states(t) {
            for j in 0..=horizon.min(t) {
                let go = |a: usize, jn: usize| -> f64 {
                    let r = mdp.mean_reward(s, a);
                    if t + 1 < horizon {
                        let col: Vec<f64> = next_v.iter().map(|row| row[jn]).collect();
                        r + mdp.expect_next(s, a, &col)
                    } else {
                        r
                    }
                };
                let tau = tables.tau(s);
                let land_action = if j < k { tables.plus(s) } else { 0 };
                let jn = (j + 1).min(horizon);
                let mut val = 0.0;
                if tau > 0.0 {
                    val += tau * go(land_action, jn);
                }
                if tau < 1.0 {
                    val += (1.0 - tau) * go(0, j);
                }
                cur[s.index][j] = val;
            }
        }
        next_v = cur;
    }
    Ok(next_v[0][0])
}

/// The budget-H skippy policy as a memoryless policy: π⁺ with probability τ,
/// else action 0.
pub fn skippy_memoryless(mdp: &Mdp, tables: &SkipTables) -> MemorylessPolicy {
    let a = mdp.num_actions();
    MemorylessPolicy::from_fn(mdp, |s| {
        let mut row = vec![0.0; a];
        let tau = tables.tau(s);
        row[0] += 1.0 - tau;
        row[tables.plus(s)] += tau;
        row
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    fn pt(tau: f64, c: f64, reward: f64) -> SuffixPoint {
        SuffixPoint { tau, c, reward }
    }

    #[test]
    fn pi_plus_examples() {
        assert_eq!(pi_plus_and_c(&[v(&[1.0]), v(&[2.0])], &v(&[0.0]), 3), (0, 0.0));
        assert_eq!(pi_plus_and_c(&[v(&[-3.0]), v(&[2.5])], &v(&[1.0]), 2), (1, 2.0));
        assert_eq!(pi_plus_and_c(&[v(&[1.0]), v(&[1.0])], &v(&[1.0]), 3), (0, 1.0));
    }

    #[test]
    fn tau_boundaries() {
        assert_eq!(tau_from_range(0.0, 2, 3, 0.1), 0.0);
        let r = 0.1 / (2.0 * 3.0);
        assert!((tau_from_range(r, 2, 3, 0.1) - 1.0).abs() < 1e-12);
        assert_eq!(tau_from_range(10.0, 2, 3, 0.1), 1.0);
    }

    #[test]
    fn zero_guess_has_zero_range() {
        let acts = vec![v(&[1.0, 0.0]), v(&[0.0, 1.0])];
        assert_eq!(range_q_guess(&acts, &vec![Vector::zeros(2); 3], &Matrix::identity(2, 2)), 0.0);
    }

    #[test]
    fn phi_bar_examples() {
        let acts = vec![v(&[0.0, 0.0]), v(&[3.0, 0.0]), v(&[0.0, 2.0])];
        let pb = phi_bar_q(&acts, &Matrix::identity(2, 2));
        // largest difference is actions (1,2): (3,-2); first among equal norms is (1,2)
        let expect = v(&[3.0, -2.0]) / 13f64.sqrt();
        assert!((pb - expect).norm() < 1e-12);
        let same = vec![v(&[0.5, 0.5]); 2];
        assert_eq!(phi_bar_q(&same, &Matrix::identity(2, 2)), Vector::zeros(2));
    }

    #[test]
    fn phi_bar_two_candidates() {
        let acts = vec![v(&[3.0, 0.0]), v(&[0.0, 0.0])];
        assert_eq!(phi_bar_q(&acts, &Matrix::identity(2, 2)), v(&[1.0, 0.0]));
    }

    #[test]
    fn zero_taus_give_zero_corrections() {
        let s = vec![pt(0.0, 2.0, 0.3), pt(0.0, 1.0, 0.5)];
        assert_eq!(e_to_all(&s)[0], 0.0);
        assert!(e_terms(&s).iter().all(|&e| e == 0.0));
        assert_eq!(lsq_target(&s), 0.8);
    }

    #[test]
    fn full_tau_absorbs() {
        let s = vec![pt(1.0, 2.0, 0.3), pt(0.4, 1.0, 0.5)];
        let d = d_values(&s);
        assert!((e_to_all(&s)[0] - d[0]).abs() < 1e-15);
        // τ(S_{t+1}) = 1 collapses the target to R_t + C(S_{t+1})
        let t = vec![pt(0.2, 9.0, 0.25), pt(1.0, 2.0, 0.3), pt(0.4, 1.0, 0.5)];
        assert!((lsq_target(&t) - (0.25 + 2.0)).abs() < 1e-12);
    }

    #[test]
    fn d_value_bounds() {
        assert_eq!(d_values(&[pt(0.5, 0.0, 0.0)]), vec![0.0]);
        assert_eq!(d_values(&[pt(0.5, 3.0, 0.0), pt(0.5, 0.0, 0.0)])[0], 3.0);
    }

    proptest! {
        #[test]
        fn calculus_identities(
            raw in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0, 0u8..4), 1..9)
        ) {
            let h = raw.len() as f64;
            let s: Vec<SuffixPoint> = raw
                .iter()
                .map(|&(t, c, r, kind)| {
                    let tau = match kind { 0 => 0.0, 1 => 1.0, _ => t };
                    pt(tau, c * h, r)
                })
                .collect();
            let to = e_to_all(&s);
            let es = e_terms(&s);
            prop_assert!((to[0] - e_to_probability_form(&s)).abs() <= 1e-10);
            prop_assert!((to[0] - es.iter().sum::<f64>()).abs() <= 1e-10);
            prop_assert!((estimated_value(&s) - estimated_value_by_enumeration(&s)).abs() <= 1e-10);
            let d = d_values(&s);
            for i in 0..s.len() {
                let tail: f64 = s[i..].iter().map(|p| p.reward).sum();
                prop_assert!(d[i] >= -tail - 1e-12 && d[i] <= h + 1e-12);
                prop_assert!(to[i] >= -tail - 1e-12 && to[i] <= h + 1e-12);
                prop_assert!(es[i].abs() <= 2.0 * s[i].tau * h + 1e-12);
                prop_assert!((es[i] - (to[i] - to[i + 1])).abs() <= 1e-10);
            }
            let target = lsq_target(&s);
            prop_assert!(target >= -1e-12 && target <= 2.0 * h + 1e-12);
        }

        #[test]
        fn f_trace_is_e(x in -1.0f64..1.0, y in -1.0f64..1.0, e in -5.0f64..5.0) {
            let pb = phi_bar_q(&[v(&[0.0, 0.0]), v(&[x, y])], &Matrix::identity(2, 2));
            let f = f_matrix(&pb, e);
            if pb.norm() > 0.0 {
                prop_assert!((f.trace() - e).abs() <= 1e-12);
                prop_assert!((pb.norm() - 1.0).abs() <= 1e-12);
            } else {
                prop_assert!(f.trace() == 0.0);
            }
        }
    }
}
