//! Numerical approximation of finite-horizon optimal stopping for partially
//! observed discrete-time Markov chains.
//!
//! The hidden/observed pair `(X_t, Y_t)` lives on `𝕏 × 𝕐 ⊂ ℝ^m × ℝ^n` with a
//! transition kernel that has a density `r(u, v, x, y)` with respect to a
//! product of reference probability measures `λ(du) ν(dv)`. Decisions may
//! depend only on the observations, and the goal is the value
//!
//! ```text
//!   sup_τ E[ H(X_τ, Y_τ) ]
//! ```
//!
//! over observation-adapted stopping times `τ ≤ N₀`. The value is computed in
//! two quantization stages:
//!
//! 1. **Reference-measure quantization** ([`quantize`]): an optimal L₂ grid
//!    `Γ_X^N` for `λ`, yielding an approximate Bayes operator `Φ_N` and a
//!    filter–observation Markov chain `Ψ^N = (Θ_t, Y_t)` on the N-simplex × 𝕐
//!    ([`filter`]).
//! 2. **Chain quantization** ([`chain`]): per-time grids and empirical
//!    transition matrices for `Ψ^N`, on which backward dynamic programming
//!    ([`dp`]) produces the value table and the value at the initial state.
//!
//! Every constant in the a-priori error bound (the `K₁ ε_N Σ‖𝔅^k H‖` stage
//! and the `Σ_t L_{V_t} ‖Ψ_t − Ψ̂_t‖₂` stage) is evaluated by [`bounds`] and
//! reported alongside the value.
//!
//! The [`watertank`] module builds the bundled water-tank model (a noisy
//! level measurement, a covering decision, mixed reference measures with
//! boundary atoms), and [`cli`] drives batch runs from a TOML config.

#![forbid(unsafe_code)]

pub mod bounds;
pub mod chain;
pub mod cli;
pub mod dp;
pub mod error;
pub mod filter;
pub mod finite;
pub mod measure;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod quantize;
pub mod rng;
pub mod watertank;

pub use error::{Error, Result};
pub use model::StoppingModel;
pub use quantize::WeightedGrid;
