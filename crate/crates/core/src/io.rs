//! MDP files: JSON with format tag "skippy-mdp" and version 1.
//!
//! ```json
//! {
//!   "format": "skippy-mdp", "version": 1,
//!   "horizon": 2, "num_actions": 2,
//!   "features": { "dim": 1, "l1": 1.0, "l2": 2.0 },
//!   "states": [
//!     { "stage": 0, "index": 0,
//!       "actions": [ { "next": [1.0], "reward": [[1.0, 1.0]], "phi": [0.5] }, ... ] },
//!     ...
//!   ]
//! }
//! ```
//! `reward` lists (value, probability) pairs. `features` and every `phi`
//! must be present together; when absent, one-hot features over all
//! state-action pairs are used.

use crate::features::{FeatureError, FeatureTable};
use crate::linalg::Vector;
use crate::mdp::{ActionData, Mdp, MdpError, RewardDist};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const MDP_FORMAT: &str = "skippy-mdp";
pub const MDP_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("io error on {path}: {source}")]
    File { path: String, source: std::io::Error },
    #[error("malformed MDP file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported format {format:?} version {version}")]
    Format { format: String, version: u32 },
    #[error("malformed MDP file: {0}")]
    Layout(String),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureHeader {
    pub dim: usize,
    pub l1: f64,
    pub l2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionRecord {
    pub next: Vec<f64>,
    pub reward: Vec<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateRecord {
    pub stage: usize,
    pub index: usize,
    pub actions: Vec<ActionRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpFile {
    pub format: String,
    pub version: u32,
    pub horizon: usize,
    pub num_actions: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<FeatureHeader>,
    pub states: Vec<StateRecord>,
}

pub fn to_file(mdp: &Mdp, phi: Option<&FeatureTable>) -> MdpFile {
    let states = mdp
        .states()
        .map(|s| StateRecord {
            stage: s.stage,
            index: s.index,
            actions: (0..mdp.num_actions())
                .map(|a| {
                    let d = mdp.action(s, a);
                    ActionRecord {
                        next: d.next.clone(),
                        reward: d.reward.outcomes.clone(),
                        phi: phi.map(|p| p.phi(s, a).iter().cloned().collect()),
                    }
                })
                .collect(),
        })
        .collect();
    MdpFile {
        format: MDP_FORMAT.into(),
        version: MDP_VERSION,
        horizon: mdp.horizon(),
        num_actions: mdp.num_actions(),
        features: phi.map(|p| FeatureHeader { dim: p.dim, l1: p.l1, l2: p.l2 }),
        states,
    }
}

pub fn from_file(file: &MdpFile) -> Result<(Mdp, FeatureTable), IoError> {
    if file.format != MDP_FORMAT || file.version != MDP_VERSION {
        return Err(IoError::Format { format: file.format.clone(), version: file.version });
    }
    let mut sizes = vec![0usize; file.horizon];
    for s in &file.states {
        if s.stage >= file.horizon {
            return Err(IoError::Layout(format!("state stage {} beyond horizon {}", s.stage, file.horizon)));
        }
        sizes[s.stage] = sizes[s.stage].max(s.index + 1);
    }
    let mut slots: Vec<Vec<Option<&StateRecord>>> = sizes.iter().map(|&n| vec![None; n]).collect();
    for s in &file.states {
        if slots[s.stage][s.index].replace(s).is_some() {
            return Err(IoError::Layout(format!("duplicate state ({}, {})", s.stage, s.index)));
        }
    }
    let mut stages = Vec::with_capacity(file.horizon);
    for (t, row) in slots.iter().enumerate() {
        let mut stage = Vec::with_capacity(row.len());
        for (i, rec) in row.iter().enumerate() {
            let rec = rec.ok_or_else(|| IoError::Layout(format!("missing state ({t}, {i})")))?;
            stage.push(
                rec.actions
                    .iter()
                    .map(|a| ActionData { next: a.next.clone(), reward: RewardDist { outcomes: a.reward.clone() } })
                    .collect(),
            );
        }
        stages.push(stage);
    }
    let mdp = Mdp::new(file.horizon, file.num_actions, stages)?;
    let phi = match &file.features {
        Some(h) => {
            let table = slots
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|rec| {
                            rec.expect("checked above")
                                .actions
                                .iter()
                                .map(|a| {
                                    a.phi
                                        .as_ref()
                                        .map(|v| Vector::from_column_slice(v))
                                        .ok_or_else(|| IoError::Layout("feature header present but phi missing".into()))
                                })
                                .collect::<Result<Vec<_>, _>>()
                        })
                        .collect::<Result<Vec<_>, _>>()
                })
                .collect::<Result<Vec<_>, _>>()?;
            FeatureTable::new(&mdp, h.dim, h.l1, h.l2, table)?
        }
        None => {
            let na = mdp.num_actions();
            let d = mdp.num_states() * na;
            let offsets: Vec<usize> = sizes
                .iter()
                .scan(0, |acc, &n| {
                    let o = *acc;
                    *acc += n * na;
                    Some(o)
                })
                .collect();
            FeatureTable::from_fn(&mdp, d, 1.0, (d as f64).sqrt() * file.horizon as f64, |s, a| {
                let mut v = Vector::zeros(d);
                v[offsets[s.stage] + s.index * na + a] = 1.0;
                v
            })?
        }
    };
    Ok((mdp, phi))
}

pub fn read_mdp_file(path: &Path) -> Result<(Mdp, FeatureTable), IoError> {
    let text = std::fs::read_to_string(path).map_err(|source| IoError::File { path: path.display().to_string(), source })?;
    let file: MdpFile = serde_json::from_str(&text)?;
    from_file(&file)
}

pub fn write_mdp_file(path: &Path, mdp: &Mdp, phi: Option<&FeatureTable>) -> Result<(), IoError> {
    let text = serde_json::to_string_pretty(&to_file(mdp, phi))?;
    std::fs::write(path, text).map_err(|source| IoError::File { path: path.display().to_string(), source })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_fig1() {
        let (mdp, phi) = crate::generators::fig1();
        let file = to_file(&mdp, Some(&phi));
        let text = serde_json::to_string(&file).unwrap();
        let back: MdpFile = serde_json::from_str(&text).unwrap();
        let (m2, p2) = from_file(&back).unwrap();
        assert_eq!(m2, mdp);
        assert_eq!(p2, phi);
    }

    #[test]
    fn rejects_unknown_format() {
        let (mdp, _) = crate::generators::fig1();
        let mut file = to_file(&mdp, None);
        file.version = 7;
        assert!(matches!(from_file(&file), Err(IoError::Format { .. })));
    }
}
