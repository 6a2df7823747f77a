//! Staged finite-horizon MDPs, memoryless policies, exact evaluation and
//! seeded simulation.
//!
//! Stages and actions are 0-based: stage 0 holds the single initial state and
//! action 0 is the fixed skipping action (the "always take the first action"
//! policy π⁰).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Row-sum tolerance for probability vectors.
pub const PROB_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StateId {
    pub stage: usize,
    pub index: usize,
}

impl StateId {
    pub const fn new(stage: usize, index: usize) -> Self {
        Self { stage, index }
    }

    pub const fn initial() -> Self {
        Self { stage: 0, index: 0 }
    }
}

impl fmt::Display for StateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.stage, self.index)
    }
}

/// Finite-support reward distribution on [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardDist {
    /// (value, probability) pairs.
    pub outcomes: Vec<(f64, f64)>,
}

impl RewardDist {
    pub fn point(value: f64) -> Self {
        Self {
            outcomes: vec![(value, 1.0)],
        }
    }

    pub fn bernoulli(p: f64) -> Self {
        Self {
            outcomes: vec![(0.0, 1.0 - p), (1.0, p)],
        }
    }

    pub fn mean(&self) -> f64 {
        self.outcomes.iter().map(|(v, p)| v * p).sum()
    }

    /// Inverse-CDF draw from a uniform `u ∈ [0,1)`.
    pub fn sample_with(&self, u: f64) -> f64 {
        let probs: Vec<f64> = self.outcomes.iter().map(|o| o.1).collect();
        self.outcomes[categorical(&probs, u)].0
    }
}

/// Per (state, action) data: next-stage distribution and reward law.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionData {
    /// Probabilities over the next stage's states; empty at the last stage.
    pub next: Vec<f64>,
    pub reward: RewardDist,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mdp {
    horizon: usize,
    num_actions: usize,
    /// `stages[t][s][a]`
    stages: Vec<Vec<Vec<ActionData>>>,
}

/// One violated structural invariant.
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    EmptyHorizon,
    NoActions,
    InitialStageSize(usize),
    EmptyStage(usize),
    ActionCount { state: StateId, found: usize },
    TransitionLength { state: StateId, action: usize, found: usize, expected: usize },
    TransitionNegative { state: StateId, action: usize },
    TransitionRowSum { state: StateId, action: usize, sum: f64 },
    RewardOutOfRange { state: StateId, action: usize, value: f64 },
    RewardProbability { state: StateId, action: usize, sum: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyHorizon => write!(f, "horizon must be positive"),
            Violation::NoActions => write!(f, "action count must be positive"),
            Violation::InitialStageSize(n) => {
                write!(f, "initial stage must hold exactly one state, found {n}")
            }
            Violation::EmptyStage(t) => write!(f, "stage {t} has no states"),
            Violation::ActionCount { state, found } => {
                write!(f, "state {state} lists {found} actions")
            }
            Violation::TransitionLength { state, action, found, expected } => write!(
                f,
                "transition row of state {state} action {action} has length {found}, expected {expected}"
            ),
            Violation::TransitionNegative { state, action } => {
                write!(f, "transition row of state {state} action {action} has a negative entry")
            }
            Violation::TransitionRowSum { state, action, sum } => {
                write!(f, "transition row of state {state} action {action} sums to {sum}")
            }
            Violation::RewardOutOfRange { state, action, value } => {
                write!(f, "reward {value} of state {state} action {action} lies outside [0, 1]")
            }
            Violation::RewardProbability { state, action, sum } => write!(
                f,
                "reward probabilities of state {state} action {action} sum to {sum} or are negative"
            ),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            writeln!(f, "{v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MdpError {
    #[error("invalid MDP:\n{0}")]
    Invalid(ValidationReport),
    #[error("state {0} is not part of the MDP")]
    UnknownState(StateId),
    #[error("action {action} out of range (A = {num_actions})")]
    InvalidAction { action: usize, num_actions: usize },
    #[error("policy shape does not match the MDP: {0}")]
    PolicyShape(String),
}

pub fn validate_mdp(mdp: &Mdp) -> ValidationReport {
    let mut violations = Vec::new();
    if mdp.horizon == 0 || mdp.stages.len() != mdp.horizon {
        violations.push(Violation::EmptyHorizon);
        return ValidationReport { violations };
    }
    if mdp.num_actions == 0 {
        violations.push(Violation::NoActions);
    }
    if mdp.stages[0].len() != 1 {
        violations.push(Violation::InitialStageSize(mdp.stages[0].len()));
    }
    for (t, stage) in mdp.stages.iter().enumerate() {
        if stage.is_empty() {
            violations.push(Violation::EmptyStage(t));
        }
        let expected = if t + 1 < mdp.horizon {
            mdp.stages[t + 1].len()
        } else {
            0
        };
        for (s, actions) in stage.iter().enumerate() {
            let state = StateId::new(t, s);
            if actions.len() != mdp.num_actions {
                violations.push(Violation::ActionCount {
                    state,
                    found: actions.len(),
                });
            }
            for (a, data) in actions.iter().enumerate() {
                if data.next.len() != expected {
                    violations.push(Violation::TransitionLength {
                        state,
                        action: a,
                        found: data.next.len(),
                        expected,
                    });
                } else if expected > 0 {
                    if data.next.iter().any(|&p| p < 0.0 || !p.is_finite()) {
                        violations.push(Violation::TransitionNegative { state, action: a });
                    }
                    let sum: f64 = data.next.iter().sum();
                    if (sum - 1.0).abs() > PROB_TOL {
                        violations.push(Violation::TransitionRowSum {
                            state,
                            action: a,
                            sum,
                        });
                    }
                }
                for &(value, _) in &data.reward.outcomes {
                    if !(0.0..=1.0).contains(&value) {
                        violations.push(Violation::RewardOutOfRange {
                            state,
                            action: a,
                            value,
                        });
                    }
                }
                let psum: f64 = data.reward.outcomes.iter().map(|o| o.1).sum();
                let neg = data.reward.outcomes.iter().any(|o| o.1 < 0.0);
                if neg || (psum - 1.0).abs() > PROB_TOL {
                    violations.push(Violation::RewardProbability {
                        state,
                        action: a,
                        sum: psum,
                    });
                }
            }
        }
    }
    ValidationReport { violations }
}

impl Mdp {
    /// Build and validate.
    pub fn new(
        horizon: usize,
        num_actions: usize,
        stages: Vec<Vec<Vec<ActionData>>>,
    ) -> Result<Self, MdpError> {
        let mdp = Self::new_unchecked(horizon, num_actions, stages);
        let report = validate_mdp(&mdp);
        if report.is_valid() {
            Ok(mdp)
        } else {
            Err(MdpError::Invalid(report))
        }
    }

    pub fn new_unchecked(
        horizon: usize,
        num_actions: usize,
        stages: Vec<Vec<Vec<ActionData>>>,
    ) -> Self {
        Self {
            horizon,
            num_actions,
            stages,
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn stage_size(&self, stage: usize) -> usize {
        self.stages[stage].len()
    }

    pub fn stage_sizes(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.len()).collect()
    }

    pub fn num_states(&self) -> usize {
        self.stages.iter().map(|s| s.len()).sum()
    }

    pub fn states(&self) -> impl Iterator<Item = StateId> + '_ {
        self.stages
            .iter()
            .enumerate()
            .flat_map(|(t, st)| (0..st.len()).map(move |i| StateId::new(t, i)))
    }

    pub fn stage_states(&self, stage: usize) -> impl Iterator<Item = StateId> {
        (0..self.stages[stage].len()).map(move |i| StateId::new(stage, i))
    }

    pub fn contains(&self, s: StateId) -> bool {
        s.stage < self.horizon && s.index < self.stages[s.stage].len()
    }

    pub fn action(&self, s: StateId, a: usize) -> &ActionData {
        &self.stages[s.stage][s.index][a]
    }

    pub fn mean_reward(&self, s: StateId, a: usize) -> f64 {
        self.action(s, a).reward.mean()
    }

    pub fn check(&self, s: StateId, a: usize) -> Result<(), MdpError> {
        if !self.contains(s) {
            return Err(MdpError::UnknownState(s));
        }
        if a >= self.num_actions {
            return Err(MdpError::InvalidAction {
                action: a,
                num_actions: self.num_actions,
            });
        }
        Ok(())
    }

    /// Expected value of a stage-(t+1) function after taking `a` in `s`.
    pub fn expect_next(&self, s: StateId, a: usize, f: &[f64]) -> f64 {
        self.action(s, a)
            .next
            .iter()
            .zip(f)
            .map(|(p, v)| p * v)
            .sum()
    }

    /// Number of deterministic memoryless policies, saturating.
    pub fn deterministic_policy_count(&self) -> u128 {
        let mut count: u128 = 1;
        for _ in 0..self.num_states() {
            count = count.saturating_mul(self.num_actions as u128);
        }
        count
    }
}

/// Index drawn from a probability vector by inverse CDF.
pub fn categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc && p > 0.0 {
            return i;
        }
    }
    last_positive
}

/// Uniform draws consumed by one environment step, in a fixed order.
#[derive(Clone, Copy, Debug)]
pub struct StepDraws {
    pub reward: f64,
    pub next: f64,
}

impl StepDraws {
    pub fn from_rng<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            reward: rng.gen(),
            next: rng.gen(),
        }
    }
}

/// Deterministic step given pre-drawn uniforms.
pub fn step_with(
    mdp: &Mdp,
    s: StateId,
    a: usize,
    draws: StepDraws,
) -> Result<(Option<StateId>, f64), MdpError> {
    mdp.check(s, a)?;
    let data = mdp.action(s, a);
    let reward = data.reward.sample_with(draws.reward);
    let next = if s.stage + 1 < mdp.horizon {
        Some(StateId::new(s.stage + 1, categorical(&data.next, draws.next)))
    } else {
        None
    };
    Ok((next, reward))
}

/// One environment step. The reward is drawn before the next state.
pub fn step<R: Rng + ?Sized>(
    mdp: &Mdp,
    s: StateId,
    a: usize,
    rng: &mut R,
) -> Result<(Option<StateId>, f64), MdpError> {
    step_with(mdp, s, a, StepDraws::from_rng(rng))
}

/// Seed of episode `index` under root seed `root` (root + index).
pub fn episode_seed(root: u64, index: u64) -> u64 {
    root.wrapping_add(index)
}

/// Random stream for one stage of one episode. Keyed by (episode seed, stage)
/// so that two policies agreeing on a prefix see identical prefix randomness.
pub fn stage_rng(seed: u64, stage: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage as u64 + 1);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: StateId,
    pub action: usize,
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub seed: Option<u64>,
}

impl Trajectory {
    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

/// Per-state action distributions, indexed `[stage][state][action]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemorylessPolicy {
    pub probs: Vec<Vec<Vec<f64>>>,
}

impl MemorylessPolicy {
    pub fn from_fn(mdp: &Mdp, mut f: impl FnMut(StateId) -> Vec<f64>) -> Self {
        let probs = (0..mdp.horizon())
            .map(|t| mdp.stage_states(t).map(&mut f).collect())
            .collect();
        Self { probs }
    }

    pub fn deterministic_fn(mdp: &Mdp, mut f: impl FnMut(StateId) -> usize) -> Self {
        let a = mdp.num_actions();
        Self::from_fn(mdp, |s| one_hot(a, f(s)))
    }

    /// π⁰: always the first action.
    pub fn first_action(mdp: &Mdp) -> Self {
        Self::deterministic_fn(mdp, |_| 0)
    }

    pub fn uniform(mdp: &Mdp) -> Self {
        let a = mdp.num_actions();
        Self::from_fn(mdp, |_| vec![1.0 / a as f64; a])
    }

    /// Random stochastic policy with normalized uniform weights per state.
    pub fn random<R: Rng + ?Sized>(mdp: &Mdp, rng: &mut R) -> Self {
        let a = mdp.num_actions();
        Self::from_fn(mdp, |_| {
            let w: Vec<f64> = (0..a).map(|_| rng.gen::<f64>() + 1e-9).collect();
            let z: f64 = w.iter().sum();
            w.into_iter().map(|x| x / z).collect()
        })
    }

    /// Random deterministic policy.
    pub fn random_deterministic<R: Rng + ?Sized>(mdp: &Mdp, rng: &mut R) -> Self {
        let a = mdp.num_actions();
        Self::deterministic_fn(mdp, |_| rng.gen_range(0..a))
    }

    pub fn dist(&self, s: StateId) -> &[f64] {
        &self.probs[s.stage][s.index]
    }

    pub fn check(&self, mdp: &Mdp) -> Result<(), MdpError> {
        if self.probs.len() != mdp.horizon() {
            return Err(MdpError::PolicyShape("stage count".into()));
        }
        for s in mdp.states() {
            let row = self
                .probs
                .get(s.stage)
                .and_then(|st| st.get(s.index))
                .ok_or_else(|| MdpError::PolicyShape(format!("missing state {s}")))?;
            if row.len() != mdp.num_actions() {
                return Err(MdpError::PolicyShape(format!("action count at {s}")));
            }
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > PROB_TOL {
                return Err(MdpError::PolicyShape(format!("row at {s} sums to {sum}")));
            }
        }
        if self.probs.iter().zip(mdp.stage_sizes()).any(|(st, n)| st.len() != n) {
            return Err(MdpError::PolicyShape("state count".into()));
        }
        Ok(())
    }
}

pub fn one_hot(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

/// Seeded rollout using per-stage streams derived from `seed`.
pub fn rollout(mdp: &Mdp, policy: &MemorylessPolicy, seed: u64) -> Result<Trajectory, MdpError> {
    let mut steps = Vec::with_capacity(mdp.horizon());
    let mut s = StateId::initial();
    for t in 0..mdp.horizon() {
        let mut rng = stage_rng(seed, t);
        let a = categorical(policy.dist(s), rng.gen());
        let (next, reward) = step(mdp, s, a, &mut rng)?;
        steps.push(Step {
            state: s,
            action: a,
            reward,
        });
        match next {
            Some(n) => s = n,
            None => break,
        }
    }
    Ok(Trajectory {
        steps,
        seed: Some(seed),
    })
}

/// Rollout drawing everything from a single caller-provided stream.
pub fn rollout_with<R: Rng + ?Sized>(
    mdp: &Mdp,
    policy: &MemorylessPolicy,
    rng: &mut R,
) -> Result<Trajectory, MdpError> {
    let mut steps = Vec::with_capacity(mdp.horizon());
    let mut s = StateId::initial();
    loop {
        let a = categorical(policy.dist(s), rng.gen());
        let (next, reward) = step(mdp, s, a, rng)?;
        steps.push(Step {
            state: s,
            action: a,
            reward,
        });
        match next {
            Some(n) => s = n,
            None => break,
        }
    }
    Ok(Trajectory { steps, seed: None })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueTables {
    /// `v[stage][state]`
    pub v: Vec<Vec<f64>>,
    /// `q[stage][state][action]`
    pub q: Vec<Vec<Vec<f64>>>,
}

impl ValueTables {
    pub fn v(&self, s: StateId) -> f64 {
        self.v[s.stage][s.index]
    }

    pub fn q(&self, s: StateId, a: usize) -> f64 {
        self.q[s.stage][s.index][a]
    }

    pub fn v_initial(&self) -> f64 {
        self.v[0][0]
    }
}

/// Backward induction with an arbitrary per-state action rule. `choose`
/// receives the q-row of a state and returns its value.
fn backward(mdp: &Mdp, mut choose: impl FnMut(StateId, &[f64]) -> f64) -> ValueTables {
    let h = mdp.horizon();
    let mut v: Vec<Vec<f64>> = vec![Vec::new(); h];
    let mut q: Vec<Vec<Vec<f64>>> = vec![Vec::new(); h];
    for t in (0..h).rev() {
        let mut vt = Vec::with_capacity(mdp.stage_size(t));
        let mut qt = Vec::with_capacity(mdp.stage_size(t));
        for s in mdp.stage_states(t) {
            let row: Vec<f64> = (0..mdp.num_actions())
                .map(|a| {
                    let r = mdp.mean_reward(s, a);
                    if t + 1 < h {
                        r + mdp.expect_next(s, a, &v[t + 1])
                    } else {
                        r
                    }
                })
                .collect();
            vt.push(choose(s, &row));
            qt.push(row);
        }
        v[t] = vt;
        q[t] = qt;
    }
    ValueTables { v, q }
}

pub fn evaluate_policy_exact(
    mdp: &Mdp,
    policy: &MemorylessPolicy,
) -> Result<ValueTables, MdpError> {
    policy.check(mdp)?;
    Ok(backward(mdp, |s, row| {
        policy.dist(s).iter().zip(row).map(|(p, q)| p * q).sum()
    }))
}

/// Index of the maximum, lowest index on ties.
pub fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Optimal values and the greedy optimal policy (lowest-index tie-break).
pub fn optimal_values(mdp: &Mdp) -> (ValueTables, MemorylessPolicy) {
    let tables = backward(mdp, |_, row| row[argmax_first(row)]);
    let policy = MemorylessPolicy::deterministic_fn(mdp, |s| argmax_first(&tables.q[s.stage][s.index]));
    (tables, policy)
}

/// Distribution over stage-`t` states when starting from `start` with the
/// first action fixed and following `policy` afterwards. Entry `[t]` is the
/// state distribution at stage `t` (earlier stages are empty).
pub fn forward_distributions(
    mdp: &Mdp,
    start: StateId,
    first_action: usize,
    policy: &MemorylessPolicy,
) -> Vec<Vec<f64>> {
    let h = mdp.horizon();
    let mut out = vec![Vec::new(); h];
    let mut cur = vec![0.0; mdp.stage_size(start.stage)];
    cur[start.index] = 1.0;
    out[start.stage] = cur.clone();
    for t in start.stage..h.saturating_sub(1) {
        let mut next = vec![0.0; mdp.stage_size(t + 1)];
        for (i, &mass) in cur.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            let s = StateId::new(t, i);
            let dist: Vec<f64> = if t == start.stage {
                one_hot(mdp.num_actions(), first_action)
            } else {
                policy.dist(s).to_vec()
            };
            for (a, &pa) in dist.iter().enumerate() {
                if pa == 0.0 {
                    continue;
                }
                for (j, &p) in mdp.action(s, a).next.iter().enumerate() {
                    next[j] += mass * pa * p;
                }
            }
        }
        out[t + 1] = next.clone();
        cur = next;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain() -> Mdp {
        let s0 = vec![
            ActionData {
                next: vec![0.5, 0.5],
                reward: RewardDist::bernoulli(0.3),
            },
            ActionData {
                next: vec![1.0, 0.0],
                reward: RewardDist::point(0.2),
            },
        ];
        let last = |r: f64| {
            vec![
                ActionData {
                    next: vec![],
                    reward: RewardDist::point(r),
                },
                ActionData {
                    next: vec![],
                    reward: RewardDist::point(1.0 - r),
                },
            ]
        };
        Mdp::new(2, 2, vec![vec![s0], vec![last(0.1), last(0.6)]]).unwrap()
    }

    #[test]
    fn row_sum_violation_is_named() {
        let mut stages = vec![vec![vec![ActionData {
            next: vec![0.9],
            reward: RewardDist::point(0.0),
        }]]];
        stages.push(vec![vec![ActionData {
            next: vec![],
            reward: RewardDist::point(0.0),
        }]]);
        let mdp = Mdp::new_unchecked(2, 1, stages);
        let report = validate_mdp(&mdp);
        assert!(matches!(
            report.violations.as_slice(),
            [Violation::TransitionRowSum { state, action: 0, .. }] if *state == StateId::new(0, 0)
        ));
    }

    #[test]
    fn reward_range_violation_is_named() {
        let stages = vec![vec![vec![ActionData {
            next: vec![],
            reward: RewardDist::point(1.5),
        }]]];
        let report = validate_mdp(&Mdp::new_unchecked(1, 1, stages));
        assert!(matches!(
            report.violations.as_slice(),
            [Violation::RewardOutOfRange { value, .. }] if *value == 1.5
        ));
    }

    #[test]
    fn step_rejects_bad_action() {
        let mdp = chain();
        let mut rng = stage_rng(0, 0);
        assert!(matches!(
            step(&mdp, StateId::initial(), 5, &mut rng),
            Err(MdpError::InvalidAction { .. })
        ));
        assert!(matches!(
            step(&mdp, StateId::new(4, 0), 0, &mut rng),
            Err(MdpError::UnknownState(_))
        ));
    }

    #[test]
    fn rollout_is_reproducible() {
        let mdp = chain();
        let pi = MemorylessPolicy::uniform(&mdp);
        for seed in 0..20 {
            assert_eq!(rollout(&mdp, &pi, seed).unwrap(), rollout(&mdp, &pi, seed).unwrap());
        }
    }

    #[test]
    fn last_stage_q_is_mean_reward() {
        let mdp = chain();
        let vt = evaluate_policy_exact(&mdp, &MemorylessPolicy::uniform(&mdp)).unwrap();
        assert_eq!(vt.q[1][1], vec![0.6, 0.4]);
    }

    #[test]
    fn greedy_matches_optimal_value() {
        let mdp = chain();
        let (opt, pi) = optimal_values(&mdp);
        let vt = evaluate_policy_exact(&mdp, &pi).unwrap();
        assert!((vt.v_initial() - opt.v_initial()).abs() < 1e-12);
        // action 0: 0.3 + 0.5 * 0.9 + 0.5 * 0.6; action 1: 0.2 + 0.9
        assert!((opt.v_initial() - 1.1).abs() < 1e-12);
    }

    #[test]
    fn categorical_skips_zero_mass() {
        assert_eq!(categorical(&[0.0, 1.0], 0.0), 1);
        assert_eq!(categorical(&[0.5, 0.5, 0.0], 0.999_999_999_999_999_9), 1);
    }
}
