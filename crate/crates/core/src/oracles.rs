//! Brute-force and statistical verifiers: policy enumeration, per-stage
//! parameter samples, the range bound, admissible realizability, the skip
//! conversion to a linear MDP and the least-squares concentration checks.

use crate::features::{chebyshev_fit, fit_q_tables, fit_stage, range_over, FeatureError, FeatureTable, PolicyParameter};
use crate::geometry::{design_for_stage, parallel_perp_projectors, range_q, DesignError, DesignSet, Preconditioning};
use crate::linalg::{psd_pinv, Matrix, Vector};
use crate::mdp::{
    argmax_first, evaluate_policy_exact, ActionData, Mdp, MdpError, MemorylessPolicy, RewardDist, StateId,
    ValueTables,
};
use crate::skippy::{phi_bar_q, range_q_guess};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use thiserror::Error;

/// Largest number of deterministic policies (or per-stage combinations)
/// enumerated exhaustively.
pub const POLICY_CAP: u128 = 1 << 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("{count} deterministic policies exceed the cap {cap}")]
    TooManyPolicies { count: u128, cap: u128 },
    #[error("function has {got} entries, stage {stage} has {expected} states")]
    Shape { stage: usize, got: usize, expected: usize },
    #[error("stage {0} out of range")]
    Stage(usize),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Design(#[from] DesignError),
}

/// Action table `[stage][state]` of a deterministic policy.
pub type ActionTable = Vec<Vec<usize>>;

pub fn deterministic_policy(mdp: &Mdp, table: &ActionTable) -> MemorylessPolicy {
    MemorylessPolicy::deterministic_fn(mdp, |s| table[s.stage][s.index])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyEnumeration {
    pub actions: Vec<ActionTable>,
    pub values: Vec<ValueTables>,
    pub params: Vec<PolicyParameter>,
}

impl PolicyEnumeration {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn eta_hat(&self) -> f64 {
        self.params.iter().flat_map(|p| p.error.iter()).cloned().fold(0.0, f64::max)
    }

    /// Θ̂_h for every stage.
    pub fn thetas(&self) -> Vec<Vec<Vector>> {
        let h = self.params.first().map_or(0, |p| p.theta.len());
        (0..h)
            .map(|t| self.params.iter().map(|p| p.theta[t].clone()).collect())
            .collect()
    }
}

fn decode(mdp: &Mdp, mut code: u128) -> ActionTable {
    let a = mdp.num_actions() as u128;
    (0..mdp.horizon())
        .map(|t| {
            (0..mdp.stage_size(t))
                .map(|_| {
                    let x = (code % a) as usize;
                    code /= a;
                    x
                })
                .collect()
        })
        .collect()
}

/// Every deterministic memoryless policy with exact values and fits.
pub fn enumerate_policies(mdp: &Mdp, phi: &FeatureTable) -> Result<PolicyEnumeration, OracleError> {
    let count = mdp.deterministic_policy_count();
    if count > POLICY_CAP {
        return Err(OracleError::TooManyPolicies { count, cap: POLICY_CAP });
    }
    let actions: Vec<ActionTable> = (0..count).map(|c| decode(mdp, c)).collect();
    let fitted: Vec<(ValueTables, PolicyParameter)> = actions
        .par_iter()
        .map(|t| {
            let values = evaluate_policy_exact(mdp, &deterministic_policy(mdp, t))?;
            let params = fit_q_tables(phi, &values)?;
            Ok((values, params))
        })
        .collect::<Result<_, OracleError>>()?;
    let (values, params) = fitted.into_iter().unzip();
    Ok(PolicyEnumeration { actions, values, params })
}

/// Θ̂_h at one stage with a policy realizing each parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSample {
    pub thetas: Vec<Vector>,
    pub errors: Vec<f64>,
    /// Policy whose stage-h action values produced each parameter. Only its
    /// choices after stage h matter.
    pub policies: Vec<MemorylessPolicy>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterSamples {
    pub stages: Vec<StageSample>,
    /// Largest fit error over the sample: a lower bound on η.
    pub eta_hat: f64,
    /// True when every deterministic policy is covered.
    pub exhaustive: bool,
    pub description: String,
}

impl ParameterSamples {
    pub fn thetas(&self) -> Vec<Vec<Vector>> {
        self.stages.iter().map(|s| s.thetas.clone()).collect()
    }

    /// range(s) over the sample, indexed `[stage][state]`.
    pub fn range_table(&self, phi: &FeatureTable) -> Vec<Vec<f64>> {
        phi.phi
            .iter()
            .zip(&self.stages)
            .map(|(stage, sample)| stage.iter().map(|acts| range_over(acts, &sample.thetas)).collect())
            .collect()
    }
}

fn value_key(v: &[f64]) -> Vec<i64> {
    v.iter().map(|x| (x * 1e9).round() as i64).collect()
}

struct ValueClass {
    v: Vec<f64>,
    /// Actions for stages after the class's own stage minus one.
    suffix: Vec<Vec<usize>>,
}

fn pow_u128(a: u128, n: usize) -> u128 {
    let mut out: u128 = 1;
    for _ in 0..n {
        out = out.saturating_mul(a);
    }
    out
}

/// Θ̂_h for every stage. The stage-h parameter set only depends on the
/// policy after stage h, so deterministic policies are enumerated backward
/// as distinct value vectors. When a stage needs more than `cap` combinations
/// the sample falls back to `fallback` random stochastic policies.
pub fn parameter_samples(
    mdp: &Mdp,
    phi: &FeatureTable,
    cap: u128,
    fallback: usize,
    seed: u64,
) -> Result<ParameterSamples, OracleError> {
    match exhaustive_samples(mdp, phi, cap)? {
        Some(s) => Ok(s),
        None => sampled(mdp, phi, fallback, seed),
    }
}

fn exhaustive_samples(mdp: &Mdp, phi: &FeatureTable, cap: u128) -> Result<Option<ParameterSamples>, OracleError> {
    let horizon = mdp.horizon();
    let na = mdp.num_actions();
    let mut classes = vec![ValueClass { v: Vec::new(), suffix: Vec::new() }];
    let mut stages: Vec<Option<StageSample>> = vec![None; horizon];
    for t in (0..horizon).rev() {
        let n_states = mdp.stage_size(t);
        // q tables of stage t, one per class of stage t+1, deduplicated
        let mut seen: HashMap<Vec<i64>, ()> = HashMap::new();
        let mut tables: Vec<(Vec<Vec<f64>>, usize)> = Vec::new();
        for (ci, c) in classes.iter().enumerate() {
            let q: Vec<Vec<f64>> = mdp
                .stage_states(t)
                .map(|s| {
                    (0..na)
                        .map(|a| {
                            let r = mdp.mean_reward(s, a);
                            if t + 1 < horizon {
                                r + mdp.expect_next(s, a, &c.v)
                            } else {
                                r
                            }
                        })
                        .collect()
                })
                .collect();
            let key = value_key(&q.iter().flatten().cloned().collect::<Vec<_>>());
            if seen.insert(key, ()).is_none() {
                tables.push((q, ci));
            }
        }
        let fits: Vec<_> = tables
            .par_iter()
            .map(|(q, _)| fit_stage(phi, q, t, phi.l2))
            .collect::<Result<_, _>>()?;
        let policies = tables
            .iter()
            .map(|(_, ci)| {
                let suffix = &classes[*ci].suffix;
                MemorylessPolicy::deterministic_fn(mdp, |s| if s.stage > t { suffix[s.stage - t - 1][s.index] } else { 0 })
            })
            .collect();
        stages[t] = Some(StageSample {
            thetas: fits.iter().map(|f| f.theta.clone()).collect(),
            errors: fits.iter().map(|f| f.error).collect(),
            policies,
        });
        if t == 0 {
            break;
        }
        let combos = pow_u128(na as u128, n_states);
        if combos.saturating_mul(tables.len() as u128) > cap {
            return Ok(None);
        }
        let mut next: BTreeMap<Vec<i64>, ValueClass> = BTreeMap::new();
        for (q, ci) in &tables {
            for code in 0..combos {
                let mut x = code;
                let choice: Vec<usize> = (0..n_states)
                    .map(|_| {
                        let a = (x % na as u128) as usize;
                        x /= na as u128;
                        a
                    })
                    .collect();
                let v: Vec<f64> = choice.iter().enumerate().map(|(s, &a)| q[s][a]).collect();
                next.entry(value_key(&v)).or_insert_with(|| {
                    let mut suffix = vec![choice.clone()];
                    suffix.extend(classes[*ci].suffix.iter().cloned());
                    ValueClass { v, suffix }
                });
            }
        }
        classes = next.into_values().collect();
    }
    let stages: Vec<StageSample> = stages.into_iter().map(|s| s.expect("every stage visited")).collect();
    let eta_hat = stages.iter().flat_map(|s| s.errors.iter()).cloned().fold(0.0, f64::max);
    Ok(Some(ParameterSamples {
        stages,
        eta_hat,
        exhaustive: true,
        description: "all deterministic policies (distinct value classes per stage)".into(),
    }))
}

fn sampled(mdp: &Mdp, phi: &FeatureTable, count: usize, seed: u64) -> Result<ParameterSamples, OracleError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut policies = vec![MemorylessPolicy::first_action(mdp), MemorylessPolicy::uniform(mdp)];
    for i in 0..count {
        if i % 2 == 0 {
            policies.push(MemorylessPolicy::random_deterministic(mdp, &mut rng));
        } else {
            policies.push(MemorylessPolicy::random(mdp, &mut rng));
        }
    }
    let params: Vec<PolicyParameter> = policies
        .par_iter()
        .map(|p| {
            let values = evaluate_policy_exact(mdp, p)?;
            Ok(fit_q_tables(phi, &values)?)
        })
        .collect::<Result<_, OracleError>>()?;
    let stages: Vec<StageSample> = (0..mdp.horizon())
        .map(|t| StageSample {
            thetas: params.iter().map(|p| p.theta[t].clone()).collect(),
            errors: params.iter().map(|p| p.error[t]).collect(),
            policies: policies.clone(),
        })
        .collect();
    let eta_hat = stages.iter().flat_map(|s| s.errors.iter()).cloned().fold(0.0, f64::max);
    Ok(ParameterSamples {
        stages,
        eta_hat,
        exhaustive: false,
        description: format!("{} sampled policies (pi0, uniform, random), seed {seed}", policies.len()),
    })
}

/// One design per stage over θ^Q = Q_h^{-1} θ.
pub fn stage_designs(thetas: &[Vec<Vector>], q: &Preconditioning, d0: usize) -> Result<Vec<DesignSet>, DesignError> {
    thetas
        .iter()
        .enumerate()
        .map(|(h, th)| design_for_stage(h, th, q.q_inv(h), d0))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeBoundReport {
    /// max over states of range(s) − √(2d)·range_Q(s).
    pub max_excess: f64,
    pub worst: Option<StateId>,
    pub states: usize,
}

/// Compare range(s) with √(2d)·range_Q(s) at every state.
pub fn check_range_bound(phi: &FeatureTable, thetas: &[Vec<Vector>], designs: &[DesignSet]) -> RangeBoundReport {
    let scale = (2.0 * phi.dim as f64).sqrt();
    let mut max_excess = f64::NEG_INFINITY;
    let mut worst = None;
    let mut states = 0;
    for (t, stage) in phi.phi.iter().enumerate() {
        for (i, acts) in stage.iter().enumerate() {
            let excess = range_over(acts, &thetas[t]) - scale * range_q(acts, &designs[t]);
            states += 1;
            if excess > max_excess {
                max_excess = excess;
                worst = Some(StateId::new(t, i));
            }
        }
    }
    RangeBoundReport { max_excess, worst, states }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdmissibleReport {
    /// max_s |f(s)| − range_Q(s)/α; admissible when ≤ 1e-12.
    pub admissibility_excess: f64,
    pub admissible: bool,
    /// max over t < h and (s, a) of |E f(S_h) − ⟨φ, θ̃_t⟩|.
    pub max_error: f64,
    pub error_bound: f64,
    pub max_norm: f64,
    pub norm_bound: f64,
    /// States whose mixing probability left [0, 1] and was clamped.
    pub clamped: usize,
    pub theta_tilde: Vec<Vector>,
}

impl AdmissibleReport {
    pub fn passes(&self) -> bool {
        self.admissible && self.max_error <= self.error_bound + 1e-8 && self.max_norm <= self.norm_bound
    }
}

/// Build θ̃_t = (2/α) Σ_k (θ_t(π_k⁺) − θ_t(π_k⁻)) for an α-admissible f on
/// stage h and compare ⟨φ, θ̃_t⟩ with E_{π,s,a} f(S_h) for all t < h.
///
/// `sample` must be the stage-h sample the design was computed from, and
/// `base` is the policy followed before stage h.
#[allow(clippy::too_many_arguments)]
pub fn verify_admissible_realizability(
    mdp: &Mdp,
    phi: &FeatureTable,
    h: usize,
    f: &[f64],
    alpha: f64,
    eta: f64,
    d0: usize,
    design: &DesignSet,
    sample: &StageSample,
    base: &MemorylessPolicy,
) -> Result<AdmissibleReport, OracleError> {
    if h >= mdp.horizon() {
        return Err(OracleError::Stage(h));
    }
    if f.len() != mdp.stage_size(h) {
        return Err(OracleError::Shape { stage: h, got: f.len(), expected: mdp.stage_size(h) });
    }
    let dim = phi.dim;
    let error_bound = 5.0 * d0 as f64 * eta / alpha;
    let norm_bound = 4.0 * d0 as f64 * phi.l2 / alpha;
    let admissibility_excess = mdp
        .stage_states(h)
        .map(|s| f[s.index].abs() - range_q(phi.actions(s), design) / alpha)
        .fold(f64::NEG_INFINITY, f64::max);
    let admissible = admissibility_excess <= 1e-12;
    let mut report = AdmissibleReport {
        admissibility_excess,
        admissible,
        max_error: 0.0,
        error_bound,
        max_norm: 0.0,
        norm_bound,
        clamped: 0,
        theta_tilde: vec![Vector::zeros(dim); h],
    };
    if !admissible || h == 0 {
        return Ok(report);
    }

    let support = &design.support;
    let policies: Vec<&MemorylessPolicy> = support.iter().map(|&i| &sample.policies[i]).collect();
    let q_true: Vec<ValueTables> = policies
        .iter()
        .map(|p| evaluate_policy_exact(mdp, p))
        .collect::<Result<_, _>>()?;
    let spread = |row: &[f64]| {
        row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - row.iter().cloned().fold(f64::INFINITY, f64::min)
    };

    // per state at stage h: (ord, a+, a-, f')
    let mut plan = Vec::with_capacity(mdp.stage_size(h));
    for s in mdp.stage_states(h) {
        let mut ord = 0;
        let mut best = f64::NEG_INFINITY;
        for (k, qt) in q_true.iter().enumerate() {
            let r = spread(&qt.q[h][s.index]);
            if r > best {
                best = r;
                ord = k;
            }
        }
        let qhat: Vec<f64> = phi.actions(s).iter().map(|p| p.dot(&design.params[ord])).collect();
        let hi = argmax_first(&qhat);
        let lo = argmax_first(&qhat.iter().map(|x| -x).collect::<Vec<_>>());
        let fs = f[s.index];
        let (ap, am) = if fs >= 0.0 { (hi, lo) } else { (lo, hi) };
        let row = &q_true[ord].q[h][s.index];
        let diff = row[ap] - row[am];
        let mut fp = if alpha * fs.abs() >= 4.0 * eta && fs != 0.0 && diff != 0.0 {
            alpha * fs / 2.0 / diff
        } else {
            0.0
        };
        if !(0.0..=1.0).contains(&fp) {
            report.clamped += 1;
            fp = fp.clamp(0.0, 1.0);
        }
        plan.push((ord, ap, am, fp));
    }

    let na = mdp.num_actions();
    let build = |k: usize, plus: bool| {
        MemorylessPolicy::from_fn(mdp, |s| {
            if s.stage < h {
                base.dist(s).to_vec()
            } else if s.stage == h && plan[s.index].0 == k {
                let (_, ap, am, fp) = plan[s.index];
                let mut d = vec![0.0; na];
                if plus {
                    d[ap] += fp;
                    d[am] += 1.0 - fp;
                } else {
                    d[am] = 1.0;
                }
                d
            } else {
                policies[k].dist(s).to_vec()
            }
        })
    };
    let pairs: Vec<(Vec<Vector>, Vec<Vector>)> = (0..support.len())
        .into_par_iter()
        .map(|k| {
            let fit = |p: MemorylessPolicy| -> Result<Vec<Vector>, OracleError> {
                let values = evaluate_policy_exact(mdp, &p)?;
                (0..h)
                    .map(|t| Ok(fit_stage(phi, &values.q[t], t, phi.l2)?.theta))
                    .collect()
            };
            Ok((fit(build(k, true))?, fit(build(k, false))?))
        })
        .collect::<Result<_, OracleError>>()?;
    for (tp, tm) in &pairs {
        for t in 0..h {
            report.theta_tilde[t] += (&tp[t] - &tm[t]) * (2.0 / alpha);
        }
    }

    // E_{π,s,a} f(S_h) by backward recursion under the base policy
    let mut gv = f.to_vec();
    for t in (0..h).rev() {
        let mut next_v = Vec::with_capacity(mdp.stage_size(t));
        for s in mdp.stage_states(t) {
            let gq: Vec<f64> = (0..na).map(|a| mdp.expect_next(s, a, &gv)).collect();
            for (a, g) in gq.iter().enumerate() {
                let err = (g - phi.phi(s, a).dot(&report.theta_tilde[t])).abs();
                report.max_error = report.max_error.max(err);
            }
            next_v.push(base.dist(s).iter().zip(&gq).map(|(p, g)| p * g).sum());
        }
        gv = next_v;
    }
    report.max_norm = report.theta_tilde.iter().map(|t| t.norm()).fold(0.0, f64::max);
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualAdmissibilityReport {
    /// max_s |tr 𝐟(s)| − range_Q(s)/α.
    pub trace_excess: f64,
    /// max_s sup_{‖v‖=‖w‖=1} |v_∥ᵀ 𝐟(s) w| − range_Q(s)/α.
    pub bilinear_excess: f64,
}

/// Matrix lift 𝐟(s) = φ̄φ̄ᵀ·min(1, range_Q^Ĝ √(2d) H/ε)·f(s) of a bounded
/// stage function, checked against range_Q/α. The trace bound needs the
/// correct guess; the bilinear bound holds for any valid guess.
#[allow(clippy::too_many_arguments)]
pub fn check_dual_admissibility(
    phi: &FeatureTable,
    h: usize,
    guess_h: &[Vector],
    q_h: &Matrix,
    design: &DesignSet,
    gamma: f64,
    alpha: f64,
    epsilon: f64,
    f: &[f64],
) -> DualAdmissibilityReport {
    let horizon = phi.phi.len() as f64;
    let (par, _) = parallel_perp_projectors(design, gamma);
    let mut trace_excess = f64::NEG_INFINITY;
    let mut bilinear_excess = f64::NEG_INFINITY;
    for (i, acts) in phi.phi[h].iter().enumerate() {
        let rg = range_q_guess(acts, guess_h, q_h);
        let c = (rg * (2.0 * phi.dim as f64).sqrt() * horizon / epsilon).min(1.0) * f[i];
        let pb = phi_bar_q(acts, q_h);
        let bound = range_q(acts, design) / alpha;
        trace_excess = trace_excess.max((c * pb.norm_squared()).abs() - bound);
        bilinear_excess = bilinear_excess.max(c.abs() * (&par * &pb).norm() * pb.norm() - bound);
    }
    DualAdmissibilityReport { trace_excess, bilinear_excess }
}

/// Converted state: a copy of an original state, or the episode-over state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Origin {
    Copy(StateId),
    Over,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvertedMdp {
    pub mdp: Mdp,
    pub features: FeatureTable,
    /// `origin[c][i]` for converted state i at stage c.
    pub origin: Vec<Vec<Origin>>,
    /// Whether an original state is kept, `[stage][state]`.
    pub kept: Vec<Vec<bool>>,
    /// Converted rewards are mean skippy-step rewards divided by this.
    pub reward_scale: f64,
}

impl ConvertedMdp {
    pub fn index_of(&self, stage: usize, origin: Origin) -> Option<usize> {
        self.origin.get(stage)?.iter().position(|&o| o == origin)
    }
}

struct SkippyStep {
    reward: f64,
    landings: Vec<(StateId, f64)>,
    end: f64,
}

/// Take `a` at `s`, then follow action 0 through skipped states until a kept
/// state is reached or the episode ends.
fn skippy_step(mdp: &Mdp, kept: &[Vec<bool>], s: StateId, a: usize) -> SkippyStep {
    let horizon = mdp.horizon();
    let data = mdp.action(s, a);
    let mut reward = data.reward.mean();
    let mut landings = Vec::new();
    let mut end = 0.0;
    if s.stage + 1 >= horizon {
        return SkippyStep { reward, landings, end: 1.0 };
    }
    let mut cur = data.next.clone();
    for u in s.stage + 1..horizon {
        let mut next = if u + 1 < horizon { vec![0.0; mdp.stage_size(u + 1)] } else { Vec::new() };
        for (i, &mass) in cur.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            let x = StateId::new(u, i);
            if kept[u][i] {
                landings.push((x, mass));
                continue;
            }
            let d0 = mdp.action(x, 0);
            reward += mass * d0.reward.mean();
            if u + 1 < horizon {
                for (j, &p) in d0.next.iter().enumerate() {
                    next[j] += mass * p;
                }
            } else {
                end += mass;
            }
        }
        cur = next;
    }
    SkippyStep { reward, landings, end }
}

/// Skip every state with range below α (the initial state is always kept)
/// and stitch the remaining states into a stage-counted MDP. Features are
/// lifted to dimension dH + 2: φ in the block of the original stage, then a
/// constant coordinate and an episode-over indicator.
pub fn skip_convert(mdp: &Mdp, phi: &FeatureTable, alpha: f64, ranges: &[Vec<f64>]) -> Result<ConvertedMdp, OracleError> {
    let horizon = mdp.horizon();
    let na = mdp.num_actions();
    let kept: Vec<Vec<bool>> = ranges
        .iter()
        .enumerate()
        .map(|(t, r)| r.iter().enumerate().map(|(i, &x)| (t == 0 && i == 0) || x >= alpha).collect())
        .collect();

    let mut origin: Vec<Vec<Origin>> = vec![vec![Origin::Copy(StateId::initial())]];
    let mut steps: Vec<Vec<Vec<SkippyStep>>> = Vec::new();
    for c in 0..horizon {
        let layer = &origin[c];
        let layer_steps: Vec<Vec<SkippyStep>> = layer
            .iter()
            .map(|o| match o {
                Origin::Copy(s) => (0..na).map(|a| skippy_step(mdp, &kept, *s, a)).collect(),
                Origin::Over => (0..na).map(|_| SkippyStep { reward: 0.0, landings: Vec::new(), end: 1.0 }).collect(),
            })
            .collect();
        if c + 1 < horizon {
            let mut next: Vec<Origin> = Vec::new();
            for st in layer_steps.iter().flatten() {
                for &(x, m) in &st.landings {
                    if m > 0.0 {
                        next.push(Origin::Copy(x));
                    }
                }
                if st.end > 0.0 {
                    next.push(Origin::Over);
                }
            }
            next.sort();
            next.dedup();
            origin.push(next);
        }
        steps.push(layer_steps);
    }

    let reward_scale = steps
        .iter()
        .flatten()
        .flatten()
        .map(|s| s.reward)
        .fold(1.0, f64::max);
    let mut stages = Vec::with_capacity(horizon);
    for c in 0..horizon {
        let stage: Vec<Vec<ActionData>> = steps[c]
            .iter()
            .map(|acts| {
                acts.iter()
                    .map(|st| {
                        let next = if c + 1 < horizon {
                            let mut p = vec![0.0; origin[c + 1].len()];
                            for &(x, m) in &st.landings {
                                let j = origin[c + 1].binary_search(&Origin::Copy(x)).expect("landing registered");
                                p[j] += m;
                            }
                            if st.end > 0.0 {
                                let j = origin[c + 1].binary_search(&Origin::Over).expect("over registered");
                                p[j] += st.end;
                            }
                            p
                        } else {
                            Vec::new()
                        };
                        ActionData { next, reward: RewardDist::point(st.reward / reward_scale) }
                    })
                    .collect()
            })
            .collect();
        stages.push(stage);
    }
    let converted = Mdp::new(horizon, na, stages)?;

    let d = phi.dim;
    let dim = d * horizon + 2;
    let l1 = (phi.l1 * phi.l1 + 1.0).sqrt().max(2f64.sqrt());
    let features = FeatureTable::from_fn(&converted, dim, l1, phi.l2, |s, a| {
        let mut v = Vector::zeros(dim);
        match origin[s.stage][s.index] {
            Origin::Copy(x) => {
                v.rows_mut(x.stage * d, d).copy_from(phi.phi(x, a));
                v[dim - 2] = 1.0;
            }
            Origin::Over => {
                v[dim - 2] = 1.0;
                v[dim - 1] = 1.0;
            }
        }
        v
    })?;
    Ok(ConvertedMdp { mdp: converted, features, origin, kept, reward_scale })
}

/// Value of a converted-MDP policy computed on the original MDP: the skippy
/// policy that plays the converted choice at kept states (indexed by the
/// number of earlier landings) and action 0 elsewhere. Returned in original
/// reward units.
pub fn skippy_value_on_original(mdp: &Mdp, conv: &ConvertedMdp, policy: &MemorylessPolicy) -> f64 {
    let horizon = mdp.horizon();
    let na = mdp.num_actions();
    // value[t][state][j]
    let mut next: Vec<Vec<f64>> = Vec::new();
    for t in (0..horizon).rev() {
        let mut cur = vec![vec![0.0; horizon + 1]; mdp.stage_size(t)];
        for s in mdp.stage_states(t) {
            for j in 0..=t.min(horizon - 1) {
                let (dist, jn): (Vec<f64>, usize) = if conv.kept[t][s.index] {
                    match conv.index_of(j, Origin::Copy(s)) {
                        Some(i) => (policy.dist(StateId::new(j, i)).to_vec(), j + 1),
                        None => continue,
                    }
                } else {
                    (crate::mdp::one_hot(na, 0), j)
                };
                let mut val = 0.0;
                for (a, &pa) in dist.iter().enumerate() {
                    if pa == 0.0 {
                        continue;
                    }
                    let data = mdp.action(s, a);
                    let mut q = data.reward.mean();
                    if t + 1 < horizon {
                        q += data.next.iter().enumerate().map(|(k, p)| p * next[k][jn.min(horizon)]).sum::<f64>();
                    }
                    val += pa * q;
                }
                cur[s.index][j] = val;
            }
        }
        next = cur;
    }
    next[0][0]
}

/// max over policies of |v'(s1)·scale − skippy value on the original MDP|.
pub fn conversion_value_gap(mdp: &Mdp, conv: &ConvertedMdp, policies: &[MemorylessPolicy]) -> Result<f64, OracleError> {
    let gaps: Vec<f64> = policies
        .par_iter()
        .map(|p| {
            let v = evaluate_policy_exact(&conv.mdp, p)?.v_initial() * conv.reward_scale;
            Ok((v - skippy_value_on_original(mdp, conv, p)).abs())
        })
        .collect::<Result<_, OracleError>>()?;
    Ok(gaps.into_iter().fold(0.0, f64::max))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearityCertificate {
    pub reward_residual: f64,
    pub transition_residual: f64,
    /// max of the two residuals; a lower bound on κ since the battery is finite.
    pub kappa_hat: f64,
    pub battery: usize,
    pub max_reward_norm: f64,
    pub max_transition_norm: f64,
}

/// Fit rewards and E f(S') for a battery of functions f: S' → [0, H] with
/// parameters of norm at most `radius`. The battery holds the values of
/// `policies` random converted policies and `random_fns` random functions.
pub fn linearity_certificate(
    conv: &ConvertedMdp,
    policies: usize,
    random_fns: usize,
    radius: f64,
    seed: u64,
) -> Result<LinearityCertificate, OracleError> {
    let mdp = &conv.mdp;
    let horizon = mdp.horizon();
    let na = mdp.num_actions();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut battery: Vec<Vec<Vec<f64>>> = Vec::new();
    for _ in 0..policies {
        let p = MemorylessPolicy::random(mdp, &mut rng);
        battery.push(evaluate_policy_exact(mdp, &p)?.v);
    }
    for _ in 0..random_fns {
        battery.push(
            (0..horizon)
                .map(|t| (0..mdp.stage_size(t)).map(|_| rng.gen::<f64>() * horizon as f64).collect())
                .collect(),
        );
    }
    let dim = conv.features.dim;
    let per_stage: Vec<(f64, f64, f64, f64)> = (0..horizon)
        .into_par_iter()
        .map(|c| {
            let rows = conv.features.stage_rows(c);
            let rewards: Vec<f64> = mdp
                .stage_states(c)
                .flat_map(|s| (0..na).map(move |a| (s, a)))
                .map(|(s, a)| mdp.mean_reward(s, a))
                .collect();
            let rf = chebyshev_fit(&rows, &rewards, dim, radius)?;
            let mut tr: f64 = 0.0;
            let mut tn: f64 = 0.0;
            if c + 1 < horizon {
                for f in &battery {
                    let targets: Vec<f64> = mdp
                        .stage_states(c)
                        .flat_map(|s| (0..na).map(move |a| (s, a)))
                        .map(|(s, a)| mdp.expect_next(s, a, &f[c + 1]))
                        .collect();
                    let fit = chebyshev_fit(&rows, &targets, dim, radius)?;
                    tr = tr.max(fit.error);
                    tn = tn.max(fit.theta.norm());
                }
            }
            Ok((rf.error, rf.theta.norm(), tr, tn))
        })
        .collect::<Result<_, OracleError>>()?;
    let reward_residual = per_stage.iter().map(|x| x.0).fold(0.0, f64::max);
    let max_reward_norm = per_stage.iter().map(|x| x.1).fold(0.0, f64::max);
    let transition_residual = per_stage.iter().map(|x| x.2).fold(0.0, f64::max);
    let max_transition_norm = per_stage.iter().map(|x| x.3).fold(0.0, f64::max);
    Ok(LinearityCertificate {
        reward_residual,
        transition_residual,
        kappa_hat: reward_residual.max(transition_residual),
        battery: battery.len(),
        max_reward_norm,
        max_transition_norm,
    })
}

/// Parameter radius used for the certificate fits: L2·(4Hd0√(2d)/α + 1).
pub fn certificate_radius(l2: f64, horizon: usize, d: usize, d0: usize, alpha: f64) -> f64 {
    l2 * (4.0 * horizon as f64 * d0 as f64 * (2.0 * d as f64).sqrt() / alpha + 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    /// Fraction of trials where the bound held at every step.
    pub coverage: f64,
    pub trials: usize,
    /// Smallest bound − error seen over all trials and steps.
    pub min_slack: f64,
}

/// Ridge regression with σ-Gaussian noise and misspecification
/// Δ_k = ξ·sign(⟨A_k, u⟩); checks ‖θ̂_k − θ*‖_{V_k} ≤ √λ‖θ*‖ + ξ√k +
/// σ√(2 ln(1/ζ) + ln(det V_k / λ^d)) for every k.
pub fn lse_confidence_check(
    sigma: f64,
    xi: f64,
    lambda: f64,
    d: usize,
    steps: usize,
    trials: usize,
    zeta: f64,
    seed: u64,
) -> CoverageReport {
    let results: Vec<(bool, f64)> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(trial as u64));
            let unit = |rng: &mut ChaCha8Rng| {
                let g = Vector::from_fn(d, |_, _| StandardNormal.sample(rng));
                let n = g.norm().max(1e-300);
                g / n
            };
            let theta_star = unit(&mut rng) * rng.gen::<f64>();
            let u = unit(&mut rng);
            let mut v_inv = Matrix::identity(d, d) / lambda;
            let mut b = Vector::zeros(d);
            let mut log_det_ratio = 0.0;
            let mut ok = true;
            let mut min_slack = f64::INFINITY;
            for k in 1..=steps {
                let a = unit(&mut rng) * rng.gen::<f64>().powf(1.0 / d as f64);
                let noise: f64 = StandardNormal.sample(&mut rng);
                let delta = if a.dot(&u) >= 0.0 { xi } else { -xi };
                let x = a.dot(&theta_star) + sigma * noise + delta;
                let va = &v_inv * &a;
                let denom = 1.0 + a.dot(&va);
                log_det_ratio += denom.ln();
                v_inv -= &va * va.transpose() / denom;
                b += &a * x;
                let theta_hat = &v_inv * &b;
                let err = &theta_hat - &theta_star;
                // ‖e‖_V via solving V y = e is avoided: ‖e‖²_V = eᵀ V e with V = (V^{-1})^{-1}
                let v = crate::linalg::spd_inverse(&v_inv).unwrap_or_else(|| psd_pinv(&v_inv, 1e-14));
                let lhs = err.dot(&(&v * &err)).max(0.0).sqrt();
                let rhs = lambda.sqrt() * theta_star.norm()
                    + xi * (k as f64).sqrt()
                    + sigma * (2.0 * (1.0 / zeta).ln() + log_det_ratio).sqrt();
                min_slack = min_slack.min(rhs - lhs);
                if lhs > rhs {
                    ok = false;
                }
            }
            (ok, min_slack)
        })
        .collect();
    let covered = results.iter().filter(|r| r.0).count();
    CoverageReport {
        coverage: covered as f64 / trials.max(1) as f64,
        trials,
        min_slack: results.iter().map(|r| r.1).fold(f64::INFINITY, f64::min),
    }
}

fn gram(a: &[Vector], lambda: f64, d: usize) -> Matrix {
    let mut v = Matrix::identity(d, d) * lambda;
    for x in a {
        v += x * x.transpose();
    }
    v
}

/// nξ² − ‖Σ A_i Δ_i‖²_{V(λ)^{-1}} for |Δ_i| ≤ ξ; always nonnegative.
pub fn misspecification_sum_slack(a: &[Vector], deltas: &[f64], xi: f64, lambda: f64) -> f64 {
    let d = a.first().map_or(0, |x| x.len());
    let v = gram(a, lambda, d);
    let vi = psd_pinv(&v, 1e-14);
    let mut s = Vector::zeros(d);
    for (x, &dl) in a.iter().zip(deltas) {
        s += x * dl;
    }
    a.len() as f64 * xi * xi - s.dot(&(&vi * &s))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EllipticalReport {
    /// Σ min(1, ‖a_i‖²_{V_{i-1}^{-1}})
    pub potential: f64,
    /// 2 ln(det V_n / det V_0)
    pub log_det_bound: f64,
    /// 2d ln(tr V_0/d + n L²/d) − 2 ln det V_0
    pub trace_bound: f64,
}

impl EllipticalReport {
    /// Slacks of both inequalities.
    pub fn slacks(&self) -> (f64, f64) {
        (self.log_det_bound - self.potential, self.trace_bound - self.log_det_bound)
    }
}

/// Elliptical potential for a sequence with ‖a_i‖ ≤ l, starting from V_0.
pub fn elliptical_potential(v0: &Matrix, a: &[Vector], l: f64) -> EllipticalReport {
    let d = v0.nrows() as f64;
    let mut v = v0.clone();
    let mut potential = 0.0;
    for x in a {
        let vi = crate::linalg::spd_inverse(&v).expect("V stays positive definite");
        potential += x.dot(&(&vi * x)).min(1.0);
        v += x * x.transpose();
    }
    let ld0 = crate::linalg::spd_log_det(v0).expect("V0 positive definite");
    let ldn = crate::linalg::spd_log_det(&v).expect("Vn positive definite");
    let n = a.len() as f64;
    EllipticalReport {
        potential,
        log_det_bound: 2.0 * (ldn - ld0),
        trace_bound: 2.0 * d * (v0.trace() / d + n * l * l / d).ln() - 2.0 * ld0,
    }
}

/// Σ ‖a_i‖²_{V_i^{-1}} − min(1, ½ Σ ‖a_i‖²_{V^{-1}}), with V_i = V + Σ_{j≤i} a_j a_jᵀ.
pub fn infrequent_update_slack(v: &Matrix, a: &[Vector]) -> f64 {
    let vi0 = crate::linalg::spd_inverse(v).expect("V positive definite");
    let rhs: f64 = a.iter().map(|x| x.dot(&(&vi0 * x))).sum();
    let mut cur = v.clone();
    let mut lhs = 0.0;
    for x in a {
        cur += x * x.transpose();
        let ci = crate::linalg::spd_inverse(&cur).expect("positive definite");
        lhs += x.dot(&(&ci * x));
    }
    lhs - (0.5 * rhs).min(1.0)
}
