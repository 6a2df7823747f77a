//! The exploration loop: data collection with skippy policies, optimistic
//! estimation, the consistency check with preconditioning updates, and the
//! run log.

use crate::features::{chebyshev_fit, FeatureError, FeatureTable};
use crate::geometry::{
    validate_preconditioning, ConstantSet, DesignError, Preconditioning, PreconditioningError,
};
use crate::linalg::{psd_sqrt, spd_inverse, sym_spectral_norm, symmetrize, top_eigenpair, Matrix, Vector};
use crate::mdp::{episode_seed, evaluate_policy_exact, optimal_values, Mdp, MdpError, MemorylessPolicy, StateId};
use crate::oracles::{stage_designs, ParameterSamples};
use crate::skippy::{
    e_terms, evaluate_skippy_exact, expected_e_to, lsq_target, phi_bar_table, run_skippy_policy, suffix_points,
    tau_table, with_theta, Guess, OptimisticParams, SkipTables, SkippyError, SkippyTrajectory,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("oracle-assisted optimization needs the instance's parameter sample")]
    MissingOracle,
    #[error("stage {stage} received {count} preconditioning updates, above d1 = {d1}")]
    TooManyUpdates { stage: usize, count: usize, d1: usize },
    #[error("infeasible optimistic parameters at stage {stage}: {norm} > {bound}")]
    Infeasible { stage: usize, norm: f64, bound: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Skippy(#[from] SkippyError),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error(transparent)]
    Preconditioning(#[from] PreconditioningError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Opt1Mode {
    /// Multi-start coordinate ascent; returns a search optimum, not a global one.
    Search,
    /// Guess pinned to the correct design parameters of the instance sample.
    Oracle,
}

impl std::str::FromStr for Opt1Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "search" => Ok(Opt1Mode::Search),
            "oracle" => Ok(Opt1Mode::Oracle),
            other => Err(format!("unknown Opt-1 mode {other:?} (expected search or oracle)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnerConfig {
    pub epsilon: f64,
    pub zeta: f64,
    pub opt1: Opt1Mode,
    pub restarts: usize,
    pub rounds: usize,
    pub episode_cap: u64,
    /// Record wall-clock milliseconds per iteration. Off by default since it
    /// breaks bitwise reproducibility of the log.
    pub timing: bool,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            zeta: 0.1,
            opt1: Opt1Mode::Search,
            restarts: 32,
            rounds: 3,
            episode_cap: 1_000_000,
            timing: false,
        }
    }
}

impl LearnerConfig {
    pub fn check(&self) -> Result<(), LearnerError> {
        let unit = |x: f64| x > 0.0 && x < 1.0;
        if !unit(self.epsilon) || !unit(self.zeta) {
            return Err(LearnerError::Config("epsilon and zeta must lie in (0, 1)".into()));
        }
        if self.restarts == 0 || self.rounds == 0 || self.episode_cap == 0 {
            return Err(LearnerError::Config("restarts, rounds and episode_cap must be positive".into()));
        }
        Ok(())
    }
}

/// One recorded episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub iteration: usize,
    pub budget: usize,
    pub episode: u64,
    pub traj: SkippyTrajectory,
    /// p(k) for this record's budget k.
    pub landing: Option<usize>,
    /// φ(S_p, A_p) at the landing p(k).
    pub phi: Option<Vector>,
}

impl Record {
    pub fn new(phi: &FeatureTable, iteration: usize, episode: u64, traj: SkippyTrajectory) -> Self {
        let budget = traj.budget;
        let landing = traj.landing(budget);
        let feat = landing.map(|p| {
            let st = &traj.steps()[p];
            phi.phi(st.state, st.action).clone()
        });
        Self { iteration, budget, episode, traj, landing, phi: feat }
    }
}

/// Accepted data, with the index sets 𝐈(t) of records landing at t.
#[derive(Clone, Debug, Default)]
pub struct DataStore {
    pub records: Vec<Record>,
    /// `members[t]`: indices of records with p(k) = t.
    pub members: Vec<Vec<usize>>,
    pub discarded_episodes: u64,
}

impl DataStore {
    pub fn new(horizon: usize) -> Self {
        Self { records: Vec::new(), members: vec![Vec::new(); horizon], discarded_episodes: 0 }
    }

    pub fn push(&mut self, r: Record) {
        if let Some(t) = r.landing {
            self.members[t].push(self.records.len());
        }
        self.records.push(r);
    }

    /// X_t = λI + Σ_{𝐈(t)} φφᵀ.
    pub fn gram(&self, t: usize, lambda: f64, dim: usize) -> Matrix {
        let mut x = Matrix::identity(dim, dim) * lambda;
        for &r in &self.members[t] {
            let f = self.records[r].phi.as_ref().expect("member records have a landing feature");
            x += f * f.transpose();
        }
        x
    }
}

/// Gram matrices of the accepted data and their inverses.
#[derive(Clone, Debug)]
pub struct LsState {
    pub x: Vec<Matrix>,
    pub x_inv: Vec<Matrix>,
}

impl LsState {
    pub fn new(data: &DataStore, lambda: f64, dim: usize) -> Self {
        let x: Vec<Matrix> = (0..data.members.len()).map(|t| data.gram(t, lambda, dim)).collect();
        let x_inv = x.iter().map(|m| spd_inverse(m).expect("λ > 0 keeps X positive definite")).collect();
        Self { x, x_inv }
    }

    pub fn norm(&self, t: usize, v: &Vector) -> f64 {
        v.dot(&(&self.x[t] * v)).max(0.0).sqrt()
    }

    pub fn inv_norm(&self, t: usize, v: &Vector) -> f64 {
        v.dot(&(&self.x_inv[t] * v)).max(0.0).sqrt()
    }
}

/// Ridge solution θ̂_t against the least-squares targets under `tables`.
pub fn theta_hat(data: &DataStore, ls: &LsState, tables: &SkipTables, t: usize, dim: usize) -> Vector {
    let mut b = Vector::zeros(dim);
    for &r in &data.members[t] {
        let rec = &data.records[r];
        let y = lsq_target(&suffix_points(rec.traj.steps(), tables, t));
        b += rec.phi.as_ref().expect("member") * y;
    }
    &ls.x_inv[t] * b
}

/// Matrix-valued ridge coefficients θ̂^{ti}: entry c is the d×d matrix
/// paired with covariate coordinate c.
pub fn matrix_lse(
    data: &DataStore,
    ls: &LsState,
    tables: &SkipTables,
    phi_bar: &[Vec<Vector>],
    t: usize,
    i: usize,
) -> Vec<Matrix> {
    let dim = ls.x[t].nrows();
    let pdim = phi_bar.first().and_then(|s| s.first()).map_or(dim, |v| v.len());
    let mut out = vec![Matrix::zeros(pdim, pdim); dim];
    if i <= t {
        return out;
    }
    for &r in &data.members[t] {
        let rec = &data.records[r];
        let steps = rec.traj.steps();
        if i >= steps.len() {
            continue;
        }
        let e = e_terms(&suffix_points(steps, tables, i))[0];
        let pb = &phi_bar[i][steps[i].state.index];
        let f = pb * pb.transpose() * e;
        let coef = &ls.x_inv[t] * rec.phi.as_ref().expect("member");
        for c in 0..dim {
            out[c] += &f * coef[c];
        }
    }
    out
}

/// Σ_c φ_c θ̂^{ti}_c.
pub fn predict_matrix(theta: &[Matrix], phi: &Vector) -> Matrix {
    let n = theta.first().map_or(0, |m| m.nrows());
    let mut out = Matrix::zeros(n, n);
    for (c, m) in theta.iter().enumerate() {
        out += m * phi[c];
    }
    out
}

fn project_into_ellipsoid(ls: &LsState, t: usize, center: &Vector, target: &Vector, radius: f64) -> Vector {
    let diff = target - center;
    let n = ls.norm(t, &diff);
    if n <= radius {
        target.clone()
    } else {
        center + diff * (radius / n)
    }
}

/// θ̄_0 maximizing max_a ⟨φ(s1,a), θ̄_0⟩ over the stage-0 confidence ellipsoid.
fn optimistic_first_stage(phi: &FeatureTable, ls: &LsState, th: &Vector, radius: f64) -> Vector {
    let acts = phi.actions(StateId::initial());
    let mut best = th.clone();
    let mut best_val = f64::NEG_INFINITY;
    for f in acts {
        let w = ls.inv_norm(0, f);
        let val = f.dot(th) + radius * w;
        if val > best_val {
            best_val = val;
            best = if w > 0.0 { th + (&ls.x_inv[0] * f) * (radius / w) } else { th.clone() };
        }
    }
    best
}

fn c_initial(phi: &FeatureTable, theta0: &Vector, horizon: usize) -> f64 {
    crate::skippy::pi_plus_and_c(phi.actions(StateId::initial()), theta0, horizon).1
}

/// Proof-construction diagnostics from an oracle-assisted pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimismRecord {
    /// C(s1) of the returned parameters.
    pub c_value: f64,
    /// C(s1) of the realizability construction placed into the confidence sets.
    pub proof_c: f64,
    pub v_star: f64,
    /// Whether every unprojected construction parameter was feasible.
    pub feasible: bool,
    /// Largest fit error of the construction.
    pub fit_error: f64,
}

#[derive(Clone, Debug)]
pub struct Opt1Solution {
    pub guess: Guess,
    pub theta_bar: OptimisticParams,
    pub tables: SkipTables,
    pub c_value: f64,
    pub theta_hat: Vec<Vector>,
    pub optimism: Option<OptimismRecord>,
    /// True in search mode.
    pub search_optimum: bool,
}

struct Ctx<'a> {
    mdp: &'a Mdp,
    phi: &'a FeatureTable,
    consts: &'a ConstantSet,
    q: &'a Preconditioning,
    data: &'a DataStore,
    ls: &'a LsState,
}

impl Ctx<'_> {
    fn radius(&self) -> f64 {
        self.consts.beta * self.mdp.horizon() as f64
    }

    /// Repair stages H−1..1 into their confidence sets, then take the
    /// optimistic stage 0.
    fn evaluate(&self, guess: &Guess, raw: &[Vector]) -> (OptimisticParams, SkipTables, Vec<Vector>, f64) {
        let horizon = self.mdp.horizon();
        let dim = self.phi.dim;
        let tau = tau_table(self.phi, guess, self.q, self.consts.epsilon);
        let mut theta_bar = OptimisticParams { theta: raw.to_vec() };
        let mut hats = vec![Vector::zeros(dim); horizon];
        for t in (0..horizon).rev() {
            let tables = with_theta(self.phi, tau.clone(), &theta_bar);
            let th = theta_hat(self.data, self.ls, &tables, t, dim);
            theta_bar.theta[t] = if t == 0 {
                optimistic_first_stage(self.phi, self.ls, &th, self.radius())
            } else {
                project_into_ellipsoid(self.ls, t, &th, &theta_bar.theta[t], self.radius())
            };
            hats[t] = th;
        }
        let tables = with_theta(self.phi, tau, &theta_bar);
        let c = c_initial(self.phi, &theta_bar.theta[0], horizon);
        (theta_bar, tables, hats, c)
    }
}

/// Oracle-assisted Opt-1: the guess is the correct design guess; stages
/// H−1..1 take the best linear fit of the expected targets, placed into the
/// confidence set, and stage 0 is maximized in closed form.
fn solve_oracle(ctx: &Ctx, guess: Guess, v_star: f64) -> Result<Opt1Solution, LearnerError> {
    let mdp = ctx.mdp;
    let phi = ctx.phi;
    let horizon = mdp.horizon();
    let dim = phi.dim;
    let radius = ctx.radius();
    let tau = tau_table(phi, &guess, ctx.q, ctx.consts.epsilon);
    let q0 = evaluate_policy_exact(mdp, &MemorylessPolicy::first_action(mdp))?;
    let mut theta_bar = OptimisticParams::zeros(horizon, dim);
    let mut hats = vec![Vector::zeros(dim); horizon];
    let mut feasible = true;
    let mut fit_error: f64 = 0.0;
    let mut proof_first = Vector::zeros(dim);
    for t in (0..horizon).rev() {
        let tables = with_theta(phi, tau.clone(), &theta_bar);
        let th = theta_hat(ctx.data, ctx.ls, &tables, t, dim);
        let (e, _) = expected_e_to(mdp, &tables)?;
        let targets: Vec<f64> = mdp
            .stage_states(t)
            .flat_map(|s| (0..mdp.num_actions()).map(move |a| (s, a)))
            .map(|(s, a)| {
                let next = if t + 1 < horizon { mdp.expect_next(s, a, &e[t + 1]) } else { 0.0 };
                q0.q(s, a) + next
            })
            .collect();
        let fit = chebyshev_fit(&phi.stage_rows(t), &targets, dim, ctx.consts.theta_bar_radius())?;
        fit_error = fit_error.max(fit.error);
        if ctx.ls.norm(t, &(&fit.theta - &th)) > radius * (1.0 + 1e-12) {
            feasible = false;
        }
        let projected = project_into_ellipsoid(ctx.ls, t, &th, &fit.theta, radius);
        theta_bar.theta[t] = if t == 0 {
            proof_first = projected;
            optimistic_first_stage(phi, ctx.ls, &th, radius)
        } else {
            projected
        };
        hats[t] = th;
    }
    let tables = with_theta(phi, tau, &theta_bar);
    let c_value = c_initial(phi, &theta_bar.theta[0], horizon);
    let proof_c = c_initial(phi, &proof_first, horizon);
    Ok(Opt1Solution {
        guess,
        theta_bar,
        tables,
        c_value,
        theta_hat: hats,
        optimism: Some(OptimismRecord { c_value, proof_c, v_star, feasible, fit_error }),
        search_optimum: false,
    })
}

fn random_ball(rng: &mut ChaCha8Rng, dim: usize, radius: f64) -> Vector {
    let g = Vector::from_fn(dim, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
    let n = g.norm();
    if n == 0.0 {
        return g;
    }
    g * (radius * rng.gen::<f64>().powf(1.0 / dim as f64) / n)
}

/// Search-mode Opt-1: multi-start coordinate ascent over guess blocks and
/// θ̄ stages, with feasibility repair after each move.
fn solve_search(ctx: &Ctx, restarts: usize, rounds: usize, seed: u64) -> Opt1Solution {
    let horizon = ctx.mdp.horizon();
    let dim = ctx.phi.dim;
    let d0 = ctx.consts.d0;
    let g_radius = ctx.consts.guess_radius();
    let radius = ctx.radius();
    let x_inv_sqrt: Vec<Matrix> = ctx.ls.x_inv.iter().map(psd_sqrt).collect();
    let results: Vec<(f64, Guess, Vec<Vector>)> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (r as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut guess = Guess::zeros(horizon, d0, dim);
            if r > 0 {
                for h in 1..horizon {
                    for g in guess.stages[h].iter_mut() {
                        *g = random_ball(&mut rng, dim, g_radius);
                    }
                }
            }
            let mut raw = vec![Vector::zeros(dim); horizon];
            let (mut tb, _, mut hats, mut best) = ctx.evaluate(&guess, &raw);
            raw = tb.theta.clone();
            for _ in 0..rounds {
                for t in (1..horizon).rev() {
                    // θ̄ block
                    let mut cands = vec![hats[t].clone()];
                    let rows = ctx.phi.stage_rows(t);
                    for _ in 0..2 {
                        let f = &rows[rng.gen_range(0..rows.len())];
                        let w = ctx.ls.inv_norm(t, f);
                        if w > 0.0 {
                            let step = (&ctx.ls.x_inv[t] * f) * (radius / w);
                            cands.push(&hats[t] + &step);
                            cands.push(&hats[t] - &step);
                        }
                    }
                    cands.push(&hats[t] + &x_inv_sqrt[t] * random_ball(&mut rng, dim, radius));
                    for c in cands {
                        let mut trial = raw.clone();
                        trial[t] = c;
                        let (tb2, _, h2, val) = ctx.evaluate(&guess, &trial);
                        if val > best + 1e-12 {
                            best = val;
                            tb = tb2;
                            hats = h2;
                            raw = tb.theta.clone();
                        }
                    }
                    // guess block
                    let current = guess.stages[t].clone();
                    let mut blocks = vec![vec![Vector::zeros(dim); d0]];
                    blocks.push((0..d0).map(|_| random_ball(&mut rng, dim, g_radius)).collect());
                    blocks.push(current.iter().map(|g| g * 0.5).collect());
                    for b in blocks {
                        let mut trial = guess.clone();
                        trial.stages[t] = b;
                        let (tb2, _, h2, val) = ctx.evaluate(&trial, &raw);
                        if val > best + 1e-12 {
                            best = val;
                            guess = trial;
                            tb = tb2;
                            hats = h2;
                            raw = tb.theta.clone();
                        }
                    }
                }
            }
            (best, guess, raw)
        })
        .collect();
    let (_, guess, raw) = results
        .into_iter()
        .fold(None::<(f64, Guess, Vec<Vector>)>, |acc, x| match acc {
            Some(a) if a.0 >= x.0 => Some(a),
            _ => Some(x),
        })
        .expect("at least one restart");
    let (theta_bar, tables, hats, c_value) = ctx.evaluate(&guess, &raw);
    Opt1Solution { guess, theta_bar, tables, c_value, theta_hat: hats, optimism: None, search_optimum: true }
}

/// Per-iteration statistics of the consistency check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyResult {
    pub x: f64,
    pub v: Vector,
    /// Stage i (0-based).
    pub stage: usize,
    /// Budget k (1-based).
    pub budget: usize,
    pub w: Vector,
    /// σ̄_k for k = 1..H.
    pub sigma_bar: Vec<f64>,
    /// wᵀMw − vᵀMv + ε/(dH²ω); nonnegative when the projection is harmless.
    pub consistency_gap: f64,
    /// |vᵀMv − x| from a direct recomputation.
    pub recompute_error: f64,
}

/// y^{ki}, F̂^{ki} and σ̄ on the current batch, then the top eigenpair of
/// y − F̂ over budgets k ∈ 1..H−1 and stages i ≥ k with p(k) < i.
pub fn consistency_check(
    consts: &ConstantSet,
    data: &DataStore,
    ls: &LsState,
    batch: &[Record],
    tables: &SkipTables,
    theta_bar: &OptimisticParams,
    q: &Preconditioning,
    phi_bar: &[Vec<Vector>],
    n: usize,
) -> ConsistencyResult {
    let horizon = tables.horizon;
    let pdim = q.dim;
    let cap = consts.uncertainty_cap();
    let nf = n.max(1) as f64;
    let mut sigma_bar = vec![0.0; horizon];
    let mut y = vec![vec![Matrix::zeros(pdim, pdim); horizon]; horizon + 1];
    let mut fhat = y.clone();
    let mut lse: Vec<Vec<Option<Vec<Matrix>>>> = vec![vec![None; horizon]; horizon];
    for rec in batch {
        let k = rec.budget;
        let (p, f) = match (rec.landing, rec.phi.as_ref()) {
            (Some(p), Some(f)) => (p, f),
            _ => continue,
        };
        let unc = ls.inv_norm(p, f);
        sigma_bar[k - 1] += unc.min(cap) / nf;
        if k >= horizon {
            continue;
        }
        let c = unc < cap && f.dot(&theta_bar.theta[p]) >= 0.0;
        if !c {
            continue;
        }
        let steps = rec.traj.steps();
        let pts = suffix_points(steps, tables, p + 1);
        let es = e_terms(&pts);
        for i in p + 1..horizon {
            let coef = lse[p][i].get_or_insert_with(|| matrix_lse(data, ls, tables, phi_bar, p, i));
            y[k][i] += predict_matrix(coef, f) / nf;
            let pb = &phi_bar[i][steps[i].state.index];
            fhat[k][i] += pb * pb.transpose() * (es[i - p - 1] / nf);
        }
    }
    let mut best: Option<(f64, Vector, usize, usize, Matrix)> = None;
    for k in 1..horizon {
        for i in k..horizon {
            let m = symmetrize(&(&y[k][i] - &fhat[k][i]));
            let (val, vec) = if sym_spectral_norm(&m) == 0.0 {
                let mut e1 = Vector::zeros(pdim);
                e1[0] = 1.0;
                (0.0, e1)
            } else {
                top_eigenpair(&m)
            };
            if best.as_ref().map_or(true, |b| val > b.0) {
                best = Some((val, vec, k, i, m));
            }
        }
    }
    let (x, v, budget, stage, m) = best.unwrap_or_else(|| {
        let mut e1 = Vector::zeros(pdim);
        e1[0] = 1.0;
        (0.0, e1, 1, 0, Matrix::zeros(pdim, pdim))
    });
    let w = q.z_projector(stage) * &v;
    let vmv = v.dot(&(&m * &v));
    let wmw = w.dot(&(&m * &w));
    ConsistencyResult {
        consistency_gap: wmw - vmv + consts.projection_tolerance(),
        recompute_error: (vmv - x).abs(),
        x,
        v,
        stage,
        budget,
        w,
        sigma_bar,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QUpdate {
    pub stage: usize,
    pub budget: usize,
    pub w_norm: f64,
    pub counts: Vec<usize>,
    /// Validity against the instance sample, when one is available.
    pub valid: Option<bool>,
    pub ellipsoid_max: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Redo,
    Accept,
    Return,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub m: usize,
    pub m_prime: usize,
    pub c_value: f64,
    pub x: f64,
    pub k: usize,
    pub i: usize,
    pub sigma_bar: Vec<f64>,
    pub sigma_sum: f64,
    pub uncertainty_threshold: f64,
    pub discrepancy_threshold: f64,
    pub outcome: Outcome,
    pub q_update: Option<QUpdate>,
    pub episodes: u64,
    pub consistency_gap: f64,
    pub recompute_error: f64,
    pub optimism: Option<OptimismRecord>,
    pub search_optimum: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<u64>,
}

/// π^{mH} as (Ĝ, θ̄, k = H) with the preconditioning it was built under.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyDescriptor {
    pub guess: Guess,
    pub theta_bar: OptimisticParams,
    pub budget: usize,
    pub q: Preconditioning,
    pub epsilon: f64,
}

impl PolicyDescriptor {
    pub fn tables(&self, phi: &FeatureTable) -> SkipTables {
        crate::skippy::skip_tables(phi, &self.guess, &self.theta_bar, &self.q, self.epsilon)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    EpisodeCap,
    MMax,
    MPrimeMax,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::Converged => "converged",
            Termination::EpisodeCap => "episode_cap",
            Termination::MMax => "m_max",
            Termination::MPrimeMax => "m_prime_max",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalRecord {
    pub terminated_by: Termination,
    pub m: usize,
    pub m_prime: usize,
    pub episodes: u64,
    pub discarded_episodes: u64,
    pub q_updates: usize,
    pub c_value: f64,
    pub v_pi: f64,
    pub v_star: f64,
    pub descriptor: PolicyDescriptor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogRecord {
    Header { constants: ConstantSet, config: LearnerConfig, seed: u64 },
    Iteration(IterationRecord),
    Final(FinalRecord),
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub log: Vec<LogRecord>,
    pub final_record: FinalRecord,
}

impl RunResult {
    pub fn iterations(&self) -> impl Iterator<Item = &IterationRecord> {
        self.log.iter().filter_map(|r| match r {
            LogRecord::Iteration(it) => Some(it),
            _ => None,
        })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.log {
            out.push_str(&serde_json::to_string(r).expect("log records serialize"));
            out.push('\n');
        }
        out
    }
}

/// Run the exploration loop. `samples` is the instance's per-stage parameter
/// sample; it is required in oracle mode and used for preconditioning audits
/// whenever present.
pub fn run_skippy_eleanor(
    mdp: &Mdp,
    phi: &FeatureTable,
    config: &LearnerConfig,
    consts: &ConstantSet,
    samples: Option<&ParameterSamples>,
    seed: u64,
) -> Result<RunResult, LearnerError> {
    config.check()?;
    if config.opt1 == Opt1Mode::Oracle && samples.is_none() {
        return Err(LearnerError::MissingOracle);
    }
    let horizon = mdp.horizon();
    let dim = phi.dim;
    let n = consts.n.max(1);
    let v_star = optimal_values(mdp).0.v_initial();
    let thetas = samples.map(|s| s.thetas());
    let mut q = Preconditioning::new(horizon, dim, phi.l2, consts.l3);
    let mut data = DataStore::new(horizon);
    let mut log = vec![LogRecord::Header { constants: consts.clone(), config: config.clone(), seed }];
    let mut m = 0usize;
    let mut m_prime = 0usize;
    let mut episodes: u64 = 0;
    let mut q_updates = 0usize;
    let mut guess_cache: Option<(u64, Guess)> = None;
    let mut last: Option<Opt1Solution> = None;

    let termination = loop {
        if m_prime + 1 > consts.m_prime_max {
            break Termination::MPrimeMax;
        }
        if m + 1 > consts.m_max {
            break Termination::MMax;
        }
        if episodes + (n * horizon) as u64 > config.episode_cap {
            break Termination::EpisodeCap;
        }
        m += 1;
        m_prime += 1;
        let started = Instant::now();
        let ls = LsState::new(&data, consts.lambda, dim);
        let ctx = Ctx { mdp, phi, consts, q: &q, data: &data, ls: &ls };
        let sol = match config.opt1 {
            Opt1Mode::Oracle => {
                let guess = match &guess_cache {
                    Some((v, g)) if *v == q.version => g.clone(),
                    _ => {
                        let designs = stage_designs(thetas.as_ref().expect("checked"), &q, consts.d0)?;
                        let g = Guess::correct(&designs, consts.d0);
                        guess_cache = Some((q.version, g.clone()));
                        g
                    }
                };
                solve_oracle(&ctx, guess, v_star)?
            }
            Opt1Mode::Search => {
                let s = seed ^ (m_prime as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
                solve_search(&ctx, config.restarts, config.rounds, s)
            }
        };
        for t in 0..horizon {
            let norm = ls.norm(t, &(&sol.theta_bar.theta[t] - &sol.theta_hat[t]));
            let bound = consts.beta * horizon as f64;
            if norm > bound * (1.0 + 1e-9) + 1e-9 {
                return Err(LearnerError::Infeasible { stage: t, norm, bound });
            }
        }

        let base = episodes;
        let batch: Vec<Record> = (0..horizon * n)
            .into_par_iter()
            .map(|j| {
                let k = j / n + 1;
                let ep = base + j as u64;
                let traj = run_skippy_policy(mdp, &sol.tables, k, episode_seed(seed, ep))?;
                Ok(Record::new(phi, m, ep, traj))
            })
            .collect::<Result<_, LearnerError>>()?;
        episodes += batch.len() as u64;

        let phi_bar = phi_bar_table(phi, &q);
        let cons = consistency_check(consts, &data, &ls, &batch, &sol.tables, &sol.theta_bar, &q, &phi_bar, n);
        let sigma_sum: f64 = cons.sigma_bar.iter().sum();
        let disc = consts.discrepancy_threshold(cons.sigma_bar[cons.budget - 1]);
        let unc = consts.uncertainty_threshold();
        let mut q_update = None;
        let outcome = if cons.x > disc && cons.w.norm() > 0.0 {
            q.append_direction(cons.stage, &cons.w)?;
            q_updates += 1;
            let counts = q.update_counts();
            if counts[cons.stage] > consts.d1 {
                return Err(LearnerError::TooManyUpdates { stage: cons.stage, count: counts[cons.stage], d1: consts.d1 });
            }
            let report = thetas.as_ref().map(|th| validate_preconditioning(&q, th, consts.d1));
            q_update = Some(QUpdate {
                stage: cons.stage,
                budget: cons.budget,
                w_norm: cons.w.norm(),
                counts,
                valid: report.as_ref().map(|r| r.is_valid()),
                ellipsoid_max: report.as_ref().map(|r| r.ellipsoid_max.iter().cloned().fold(0.0, f64::max)),
            });
            data.discarded_episodes += batch.len() as u64;
            m -= 1;
            Outcome::Redo
        } else if sigma_sum <= unc {
            Outcome::Return
        } else {
            for r in batch {
                data.push(r);
            }
            Outcome::Accept
        };
        log.push(LogRecord::Iteration(IterationRecord {
            m: if outcome == Outcome::Redo { m + 1 } else { m },
            m_prime,
            c_value: sol.c_value,
            x: cons.x,
            k: cons.budget,
            i: cons.stage,
            sigma_bar: cons.sigma_bar.clone(),
            sigma_sum,
            uncertainty_threshold: unc,
            discrepancy_threshold: disc,
            outcome,
            q_update,
            episodes,
            consistency_gap: cons.consistency_gap,
            recompute_error: cons.recompute_error,
            optimism: sol.optimism.clone(),
            search_optimum: sol.search_optimum,
            wall_ms: config.timing.then(|| started.elapsed().as_millis() as u64),
        }));
        let done = outcome == Outcome::Return;
        last = Some(sol);
        if done {
            break Termination::Converged;
        }
    };

    // the final descriptor: last solution, or a fresh one when no iteration ran
    let sol = match last {
        Some(s) => s,
        None => {
            let ls = LsState::new(&data, consts.lambda, dim);
            let ctx = Ctx { mdp, phi, consts, q: &q, data: &data, ls: &ls };
            let g = Guess::zeros(horizon, consts.d0, dim);
            let (theta_bar, tables, hats, c_value) = ctx.evaluate(&g, &vec![Vector::zeros(dim); horizon]);
            Opt1Solution { guess: g, theta_bar, tables, c_value, theta_hat: hats, optimism: None, search_optimum: false }
        }
    };
    let v_pi = evaluate_skippy_exact(mdp, &sol.tables, horizon)?;
    let final_record = FinalRecord {
        terminated_by: termination,
        m,
        m_prime,
        episodes,
        discarded_episodes: data.discarded_episodes,
        q_updates,
        c_value: sol.c_value,
        v_pi,
        v_star,
        descriptor: PolicyDescriptor {
            guess: sol.guess,
            theta_bar: sol.theta_bar,
            budget: horizon,
            q: q.clone(),
            epsilon: consts.epsilon,
        },
    };
    log.push(LogRecord::Final(final_record.clone()));
    Ok(RunResult { log, final_record })
}

/// Invariants checked over one run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunAudit {
    pub max_stage_updates: usize,
    pub d1: usize,
    pub max_m: usize,
    pub m_max: usize,
    pub max_m_prime: usize,
    pub m_prime_max: usize,
    /// Every post-update Q valid against the sample (vacuous without updates).
    pub preconditioning_valid: bool,
    pub min_consistency_gap: f64,
    pub max_recompute_error: f64,
    /// min over pass-branch iterations of C − (v* − 2ε).
    pub min_optimism_margin: Option<f64>,
}

impl RunAudit {
    pub fn passes(&self) -> bool {
        self.max_stage_updates <= self.d1
            && self.max_m <= self.m_max
            && self.max_m_prime <= self.m_prime_max
            && self.preconditioning_valid
            && self.min_consistency_gap >= -1e-9
            && self.max_recompute_error <= 1e-9
    }
}

pub fn audit_run(run: &RunResult, consts: &ConstantSet) -> RunAudit {
    let mut audit = RunAudit {
        max_stage_updates: 0,
        d1: consts.d1,
        max_m: 0,
        m_max: consts.m_max,
        max_m_prime: 0,
        m_prime_max: consts.m_prime_max,
        preconditioning_valid: true,
        min_consistency_gap: f64::INFINITY,
        max_recompute_error: 0.0,
        min_optimism_margin: None,
    };
    for it in run.iterations() {
        audit.max_m = audit.max_m.max(it.m);
        audit.max_m_prime = audit.max_m_prime.max(it.m_prime);
        audit.min_consistency_gap = audit.min_consistency_gap.min(it.consistency_gap);
        audit.max_recompute_error = audit.max_recompute_error.max(it.recompute_error);
        if let Some(u) = &it.q_update {
            audit.max_stage_updates = audit.max_stage_updates.max(u.counts.iter().cloned().max().unwrap_or(0));
            if u.valid == Some(false) {
                audit.preconditioning_valid = false;
            }
        }
        if it.outcome != Outcome::Redo {
            if let Some(o) = &it.optimism {
                let margin = o.c_value - (o.v_star - 2.0 * consts.epsilon);
                audit.min_optimism_margin = Some(audit.min_optimism_margin.map_or(margin, |x: f64| x.min(margin)));
            }
        }
    }
    audit
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{compute_constants, Mode};

    #[test]
    fn fig1_returns_an_optimal_policy() {
        let (mdp, phi) = crate::generators::fig1();
        let consts = compute_constants(1, 3, 0.1, 0.1, 1.0, 1.0, Mode::Practical, None).unwrap();
        let samples = crate::oracles::parameter_samples(&mdp, &phi, 1 << 20, 10, 0).unwrap();
        let cfg = LearnerConfig { opt1: Opt1Mode::Oracle, ..Default::default() };
        let run = run_skippy_eleanor(&mdp, &phi, &cfg, &consts, Some(&samples), 3).unwrap();
        assert!((run.final_record.v_pi - 1.0).abs() < 1e-12);
        assert!(audit_run(&run, &consts).passes());
    }
}
