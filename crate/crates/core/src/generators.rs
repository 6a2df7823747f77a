//! Instance generators. Every instance ships with an η̂ certificate and a
//! range table computed from the per-stage parameter samples.

use crate::features::{FeatureError, FeatureTable};
use crate::linalg::Vector;
use crate::mdp::{ActionData, Mdp, MdpError, RewardDist, StateId};
use crate::oracles::{parameter_samples, OracleError, ParameterSamples, POLICY_CAP};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error("invalid generator parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Io(#[from] crate::io::IoError),
}

fn default_actions() -> usize {
    2
}
fn default_states() -> usize {
    3
}

/// Which instance to build.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case", deny_unknown_fields)]
pub enum InstanceSpec {
    Fig1,
    RandomLinear {
        d: usize,
        horizon: usize,
        #[serde(default = "default_actions")]
        actions: usize,
        #[serde(default = "default_states")]
        states: usize,
        #[serde(default)]
        seed: u64,
    },
    PaddedLinear {
        d: usize,
        horizon: usize,
        chain: usize,
        #[serde(default = "default_actions")]
        actions: usize,
        #[serde(default = "default_states")]
        states: usize,
        #[serde(default)]
        seed: u64,
    },
    ZeroRange {
        horizon: usize,
        #[serde(default = "default_actions")]
        actions: usize,
        #[serde(default = "default_states")]
        states: usize,
        #[serde(default)]
        seed: u64,
    },
    Tabular {
        horizon: usize,
        #[serde(default = "default_actions")]
        actions: usize,
        #[serde(default = "default_states")]
        states: usize,
        #[serde(default)]
        seed: u64,
    },
    /// An MDP stored in the JSON format of [`crate::io`].
    File { path: PathBuf },
}

impl InstanceSpec {
    pub fn name(&self) -> String {
        match self {
            InstanceSpec::Fig1 => "fig1".into(),
            InstanceSpec::RandomLinear { d, horizon, seed, .. } => format!("random_linear(d={d},H={horizon},seed={seed})"),
            InstanceSpec::PaddedLinear { d, horizon, chain, seed, .. } => {
                format!("padded_linear(d={d},H={horizon},chain={chain},seed={seed})")
            }
            InstanceSpec::ZeroRange { horizon, seed, .. } => format!("zero_range(H={horizon},seed={seed})"),
            InstanceSpec::Tabular { horizon, seed, .. } => format!("tabular(H={horizon},seed={seed})"),
            InstanceSpec::File { path } => format!("file({})", path.display()),
        }
    }

    /// Same generator with a different seed; files are unchanged.
    pub fn with_seed(&self, new: u64) -> Self {
        let mut out = self.clone();
        match &mut out {
            InstanceSpec::RandomLinear { seed, .. }
            | InstanceSpec::PaddedLinear { seed, .. }
            | InstanceSpec::ZeroRange { seed, .. }
            | InstanceSpec::Tabular { seed, .. } => *seed = new,
            InstanceSpec::Fig1 | InstanceSpec::File { .. } => {}
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceMetadata {
    pub name: String,
    pub eta_hat: f64,
    pub sample_description: String,
    /// range(s), `[stage][state]`.
    pub ranges: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct Instance {
    pub mdp: Mdp,
    pub phi: FeatureTable,
    pub samples: ParameterSamples,
    pub metadata: InstanceMetadata,
}

/// Random policies used when exhaustive enumeration is too large.
pub const FALLBACK_POLICIES: usize = 512;

pub fn generate_instance(spec: &InstanceSpec) -> Result<Instance, GenerateError> {
    let (mdp, phi) = match spec {
        InstanceSpec::Fig1 => fig1(),
        InstanceSpec::RandomLinear { d, horizon, actions, states, seed } => {
            padded_linear(*d, *horizon, 0, *actions, *states, *seed)?
        }
        InstanceSpec::PaddedLinear { d, horizon, chain, actions, states, seed } => {
            padded_linear(*d, *horizon, *chain, *actions, *states, *seed)?
        }
        InstanceSpec::ZeroRange { horizon, actions, states, seed } => zero_range(*horizon, *actions, *states, *seed)?,
        InstanceSpec::Tabular { horizon, actions, states, seed } => tabular(*horizon, *actions, *states, *seed)?,
        InstanceSpec::File { path } => crate::io::read_mdp_file(path)?,
    };
    let seed = match spec {
        InstanceSpec::RandomLinear { seed, .. }
        | InstanceSpec::PaddedLinear { seed, .. }
        | InstanceSpec::ZeroRange { seed, .. }
        | InstanceSpec::Tabular { seed, .. } => *seed,
        _ => 0,
    };
    let samples = parameter_samples(&mdp, &phi, POLICY_CAP, FALLBACK_POLICIES, seed)?;
    let metadata = InstanceMetadata {
        name: spec.name(),
        eta_hat: samples.eta_hat,
        sample_description: samples.description.clone(),
        ranges: samples.range_table(&phi),
    };
    Ok(Instance { mdp, phi, samples, metadata })
}

fn point(next: Vec<f64>, r: f64) -> ActionData {
    ActionData { next, reward: RewardDist::point(r) }
}

/// The four-state example: s1 → s2 (reward 1) or s3 (reward 0.5); s2 → s4
/// with reward 0, s3 → s4 with reward 0.5; s4 ends with reward 0. Both
/// actions share features, φ(s1) = 1, φ(s3) = 0.5, 0 elsewhere.
pub fn fig1() -> (Mdp, FeatureTable) {
    let stages = vec![
        vec![vec![point(vec![1.0, 0.0], 1.0), point(vec![0.0, 1.0], 0.5)]],
        vec![
            vec![point(vec![1.0], 0.0), point(vec![1.0], 0.0)],
            vec![point(vec![1.0], 0.5), point(vec![1.0], 0.5)],
        ],
        vec![vec![point(vec![], 0.0), point(vec![], 0.0)]],
    ];
    let mdp = Mdp::new(3, 2, stages).expect("fig1 is valid");
    let phi = FeatureTable::from_fn(&mdp, 1, 1.0, 1.0, |s, _| {
        let x = match (s.stage, s.index) {
            (0, 0) => 1.0,
            (1, 1) => 0.5,
            _ => 0.0,
        };
        Vector::from_element(1, x)
    })
    .expect("fig1 features are valid");
    (mdp, phi)
}

fn simplex(rng: &mut ChaCha8Rng, d: usize) -> Vector {
    // exponential spacings give a uniform point on the simplex
    let w: Vec<f64> = (0..d).map(|_| -(1.0 - rng.gen::<f64>()).ln() + 1e-12).collect();
    let z: f64 = w.iter().sum();
    Vector::from_iterator(d, w.into_iter().map(|x| x / z))
}

fn random_dist(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v = simplex(rng, n);
    v.iter().cloned().collect()
}

fn mix(phi: &Vector, mus: &[Vec<f64>]) -> Vec<f64> {
    let n = mus[0].len();
    let mut out = vec![0.0; n];
    for (c, mu) in mus.iter().enumerate() {
        for (j, p) in mu.iter().enumerate() {
            out[j] += phi[c] * p;
        }
    }
    let z: f64 = out.iter().sum();
    out.iter().map(|x| x / z).collect()
}

/// Linear MDP with random simplex features and `chain` stages of range-0
/// states inserted after stage 0. Pad stages hold twin pairs sharing one
/// feature across actions and twins; action 0 leads to twin 0 and the other
/// actions to twin 1 of the next pad stage, so transitions at pad states are
/// not linear in φ while every action-value function still is.
pub fn padded_linear(
    d: usize,
    horizon: usize,
    chain: usize,
    actions: usize,
    states: usize,
    seed: u64,
) -> Result<(Mdp, FeatureTable), GenerateError> {
    if d == 0 || actions == 0 || states == 0 || horizon < chain + 1 {
        return Err(GenerateError::Params(format!(
            "need d, A, states >= 1 and H >= chain + 1 (d={d}, A={actions}, states={states}, H={horizon}, chain={chain})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let is_pad = |t: usize| t >= 1 && t <= chain;
    let sizes: Vec<usize> = (0..horizon)
        .map(|t| if t == 0 { 1 } else if is_pad(t) { 2 * states } else { states })
        .collect();
    // features: core φ(s,a), pad ψ_b shared by twins (2b, 2b+1)
    let feats: Vec<Vec<Vec<Vector>>> = (0..horizon)
        .map(|t| {
            if is_pad(t) {
                let base: Vec<Vector> = (0..states).map(|_| simplex(&mut rng, d)).collect();
                (0..sizes[t]).map(|i| vec![base[i / 2].clone(); actions]).collect()
            } else {
                (0..sizes[t]).map(|_| (0..actions).map(|_| simplex(&mut rng, d)).collect()).collect()
            }
        })
        .collect();
    let weights: Vec<Vector> = (0..horizon)
        .map(|_| Vector::from_fn(d, |_, _| rng.gen::<f64>()))
        .collect();
    // μ_c over the next stage (over bases when the next stage is a pad stage)
    let mus: Vec<Vec<Vec<f64>>> = (0..horizon.saturating_sub(1))
        .map(|t| {
            let n = if is_pad(t + 1) { states } else { sizes[t + 1] };
            (0..d).map(|_| random_dist(&mut rng, n)).collect()
        })
        .collect();
    let mut stages = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let mut stage = Vec::with_capacity(sizes[t]);
        for i in 0..sizes[t] {
            let mut row = Vec::with_capacity(actions);
            for a in 0..actions {
                let f = &feats[t][i][a];
                let reward = RewardDist::bernoulli(f.dot(&weights[t]).clamp(0.0, 1.0));
                let next = if t + 1 == horizon {
                    Vec::new()
                } else {
                    let m = mix(f, &mus[t]);
                    if is_pad(t + 1) {
                        let mut p = vec![0.0; sizes[t + 1]];
                        for (b, &pb) in m.iter().enumerate() {
                            if is_pad(t) {
                                let twin = if a == 0 { 0 } else { 1 };
                                p[2 * b + twin] += pb;
                            } else {
                                p[2 * b] += pb / 2.0;
                                p[2 * b + 1] += pb / 2.0;
                            }
                        }
                        p
                    } else {
                        m
                    }
                };
                row.push(ActionData { next, reward });
            }
            stage.push(row);
        }
        stages.push(stage);
    }
    let mdp = Mdp::new(horizon, actions, stages)?;
    let phi = FeatureTable::new(&mdp, d, 1.0, (d as f64).sqrt() * horizon as f64, feats)?;
    Ok((mdp, phi))
}

/// Random MDP where all actions coincide; φ(s,·) = v(s)/H in one dimension.
pub fn zero_range(horizon: usize, actions: usize, states: usize, seed: u64) -> Result<(Mdp, FeatureTable), GenerateError> {
    if horizon == 0 || actions == 0 || states == 0 {
        return Err(GenerateError::Params("need H, A, states >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes: Vec<usize> = (0..horizon).map(|t| if t == 0 { 1 } else { states }).collect();
    let mut stages = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let stage: Vec<Vec<ActionData>> = (0..sizes[t])
            .map(|_| {
                let next = if t + 1 < horizon { random_dist(&mut rng, sizes[t + 1]) } else { Vec::new() };
                let data = ActionData { next, reward: RewardDist::bernoulli(rng.gen()) };
                vec![data; actions]
            })
            .collect();
        stages.push(stage);
    }
    let mdp = Mdp::new(horizon, actions, stages)?;
    let values = crate::mdp::evaluate_policy_exact(&mdp, &crate::mdp::MemorylessPolicy::first_action(&mdp))?;
    let h = horizon as f64;
    let phi = FeatureTable::from_fn(&mdp, 1, 1.0, h, |s: StateId, _| Vector::from_element(1, values.v(s) / h))?;
    Ok((mdp, phi))
}

/// Random MDP with one-hot features over all state-action pairs.
pub fn tabular(horizon: usize, actions: usize, states: usize, seed: u64) -> Result<(Mdp, FeatureTable), GenerateError> {
    if horizon == 0 || actions == 0 || states == 0 {
        return Err(GenerateError::Params("need H, A, states >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes: Vec<usize> = (0..horizon).map(|t| if t == 0 { 1 } else { states }).collect();
    let stages: Vec<Vec<Vec<ActionData>>> = (0..horizon)
        .map(|t| {
            (0..sizes[t])
                .map(|_| {
                    (0..actions)
                        .map(|_| ActionData {
                            next: if t + 1 < horizon { random_dist(&mut rng, sizes[t + 1]) } else { Vec::new() },
                            reward: RewardDist::bernoulli(rng.gen()),
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let mdp = Mdp::new(horizon, actions, stages)?;
    let offsets: Vec<usize> = sizes
        .iter()
        .scan(0, |acc, &n| {
            let o = *acc;
            *acc += n * actions;
            Some(o)
        })
        .collect();
    let d: usize = sizes.iter().sum::<usize>() * actions;
    let phi = FeatureTable::from_fn(&mdp, d, 1.0, (d as f64).sqrt() * horizon as f64, |s, a| {
        let mut v = Vector::zeros(d);
        v[offsets[s.stage] + s.index * actions + a] = 1.0;
        v
    })?;
    Ok((mdp, phi))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fig1_shape() {
        let inst = generate_instance(&InstanceSpec::Fig1).unwrap();
        assert_eq!(inst.mdp.num_states(), 4);
        assert_eq!(inst.mdp.horizon(), 3);
        assert!(inst.metadata.eta_hat < 1e-12);
        assert!(inst.metadata.ranges.iter().flatten().all(|&r| r < 1e-12));
    }

    #[test]
    fn tabular_is_realizable() {
        let inst = generate_instance(&InstanceSpec::Tabular { horizon: 3, actions: 2, states: 2, seed: 4 }).unwrap();
        assert!(inst.metadata.eta_hat < 1e-9);
    }

    #[test]
    fn padded_linear_is_realizable_with_zero_range_pads() {
        let spec = InstanceSpec::PaddedLinear { d: 2, horizon: 5, chain: 2, actions: 2, states: 2, seed: 1 };
        let inst = generate_instance(&spec).unwrap();
        assert!(inst.samples.exhaustive);
        assert!(inst.metadata.eta_hat < 1e-9, "eta {}", inst.metadata.eta_hat);
        for t in 1..=2 {
            assert!(inst.metadata.ranges[t].iter().all(|&r| r < 1e-9));
        }
    }
}
