//! Exploration with skippy policies for episodic MDPs whose action-value
//! functions are linear in known features.
//!
//! Conventions: stages and actions are 0-based. Stage 0 holds the single
//! initial state, and action 0 is the fixed action taken at skipped states.

pub mod features;
pub mod generators;
pub mod geometry;
pub mod harness;
pub mod io;
pub mod learner;
pub mod linalg;
pub mod mdp;
pub mod oracles;
pub mod skippy;

pub use features::{FeatureTable, MisspecReport, PolicyParameter};
pub use linalg::{Matrix, Vector};
pub use mdp::{Mdp, MemorylessPolicy, StateId, Trajectory, ValueTables};
