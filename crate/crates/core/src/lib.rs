//! Quotient geometry of quadratic-activation shallow networks.
//!
//! The network `f_θ(x) = Σᵢ aᵢ (wᵢᵀx)²` is invariant under hidden-unit
//! permutations and neuronwise rescalings `(aᵢ, wᵢ) ↦ (cᵢ⁻²aᵢ, cᵢwᵢ)`. This
//! crate makes the resulting geometry explicit: orbits and their tangents,
//! the function-induced metric, effective Hessians in the `Q = Σᵢ aᵢwᵢwᵢᵀ`
//! chart and on gauge slices, quotient gradient flows, and orbit-level
//! complexity. The [`experiments`] module reproduces three numerical studies
//! as deterministic drivers.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod error;
pub mod numerics;
pub mod model;
pub mod rng;
pub mod symmetry;
pub mod geometry;
pub mod table;
pub mod dynamics;
pub mod complexity;
pub mod experiments;
pub mod checks;

pub use error::{Error, Result};
