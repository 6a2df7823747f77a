//! Shared fixtures for the benchmarks.

use skippy_core::generators::{generate_instance, Instance, InstanceSpec};
use skippy_core::geometry::{compute_constants, ConstantSet, Mode};

/// A padded linear instance with its practical constants.
pub fn padded(d: usize, horizon: usize, seed: u64) -> (Instance, ConstantSet) {
    let inst = generate_instance(&InstanceSpec::PaddedLinear { d, horizon, chain: 2, actions: 2, states: 3, seed })
        .expect("padded instance");
    let c = compute_constants(d, horizon, 0.1, 0.1, inst.phi.l1, inst.phi.l2, Mode::Practical, None)
        .expect("constants");
    (inst, c)
}
