//! Backward dynamic programming on the quantized chain.
//!
//! With the chain reduced to finite per-time grids and row-stochastic
//! matrices, the value recursion is a max of the extended reward against a
//! matrix–vector product:
//!
//! ```text
//!   V_{N₀}(ψ̂) = H(ψ̂),
//!   V_t(ψ̂_i)  = max{ H(ψ̂_i), Σ_j P_t[i][j] V_{t+1}(ψ̂_j) } .
//! ```
//!
//! Ties stop (deterministic output). The value at the origin — the single
//! t = 0 grid point — is the approximation of the optimal stopping value at
//! the model's initial state. Stop regions are emitted for inspection; only
//! the value carries an error bound, so policies are advisory.

use std::io::Write;

use crate::chain::{QuantizedChain, RowStochastic};
use crate::error::{Error, Result};
use crate::model::StoppingModel;
use crate::quantize::WeightedGrid;

/// DP values and stop flags per grid point per time.
#[derive(Clone, Debug)]
pub struct ValueTable {
    pub values: Vec<Vec<f64>>,
    pub stop_flags: Vec<Vec<bool>>,
    pub value_at_origin: f64,
}

impl ValueTable {
    /// Tabular text export: `t, index, value, stop`.
    pub fn write_table<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "t,index,value,stop")?;
        for (t, (vals, flags)) in self.values.iter().zip(&self.stop_flags).enumerate() {
            for (i, (v, s)) in vals.iter().zip(flags).enumerate() {
                writeln!(w, "{t},{i},{v:.12e},{}", if *s { 1 } else { 0 })?;
            }
        }
        Ok(())
    }
}

/// Extended reward `H(ψ̂) = Σ_j γ_j H(x_j, y)` for every point of a chain
/// grid.
pub fn grid_rewards(
    model: &StoppingModel,
    lambda_grid: &WeightedGrid,
    chain_grid: &WeightedGrid,
) -> Result<Vec<f64>> {
    let n = lambda_grid.len();
    if chain_grid.dim != n + model.dim_y {
        return Err(Error::DimensionMismatch { expected: n + model.dim_y, got: chain_grid.dim });
    }
    (0..chain_grid.len())
        .map(|i| {
            let p = chain_grid.point(i);
            model.eval_performance_ext(lambda_grid, &p[..n], &p[n..])
        })
        .collect()
}

/// One backward step: `values_t[i] = max(H_i, (P_t · values_next)_i)`, stop
/// flag true where the reward attains the max (ties stop).
pub fn backward_step(
    model: &StoppingModel,
    lambda_grid: &WeightedGrid,
    chain_grid_t: &WeightedGrid,
    p_t: &RowStochastic,
    values_next: &[f64],
) -> Result<(Vec<f64>, Vec<bool>)> {
    if p_t.n_rows != chain_grid_t.len() || p_t.n_cols != values_next.len() {
        return Err(Error::DimensionMismatch { expected: p_t.n_cols, got: values_next.len() });
    }
    let rewards = grid_rewards(model, lambda_grid, chain_grid_t)?;
    let mut continuation = vec![0.0; p_t.n_rows];
    p_t.expectation_into(values_next, &mut continuation);
    let mut values = Vec::with_capacity(p_t.n_rows);
    let mut flags = Vec::with_capacity(p_t.n_rows);
    for (h, c) in rewards.iter().zip(&continuation) {
        if h >= c {
            values.push(*h);
            flags.push(true);
        } else {
            values.push(*c);
            flags.push(false);
        }
    }
    Ok((values, flags))
}

/// Full backward solve over the chain; `value_at_origin` is the value at the
/// single t = 0 grid point.
pub fn solve(
    model: &StoppingModel,
    lambda_grid: &WeightedGrid,
    chain: &QuantizedChain,
) -> Result<ValueTable> {
    chain.validate()?;
    let n0 = chain.horizon;
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); n0 + 1];
    let mut flags: Vec<Vec<bool>> = vec![Vec::new(); n0 + 1];
    // Terminal layer equals the extended reward exactly.
    values[n0] = grid_rewards(model, lambda_grid, &chain.grids[n0])?;
    flags[n0] = vec![true; values[n0].len()];
    for t in (0..n0).rev() {
        let (v, f) = backward_step(
            model,
            lambda_grid,
            &chain.grids[t],
            &chain.transitions[t],
            &values[t + 1],
        )?;
        values[t] = v;
        flags[t] = f;
    }
    if values[0].len() != 1 {
        return Err(Error::Format("t=0 layer must have exactly one state".into()));
    }
    let value_at_origin = values[0][0];
    Ok(ValueTable { values, stop_flags: flags, value_at_origin })
}

// Re-exported here because the exhaustive finite-model oracle doubles as the
// reference implementation for the DP layer's tests.
pub use crate::finite::oracle_value_finite;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::ChainQuantParams;
    use crate::filter::FilterChain;
    use crate::model::tests_support::{constant_model, uniform_grid};
    use crate::quantize::ClvqParams;
    use std::sync::Arc;

    #[test]
    fn constant_reward_stops_everywhere() {
        let model = constant_model(4);
        let grid = uniform_grid(3);
        let fc = FilterChain::new(&model, &grid).unwrap();
        let e = fc.simulate_paths(400, 3).unwrap();
        let params = ChainQuantParams {
            clvq: ClvqParams { iterations: 1500, ..Default::default() },
            lloyd_rounds: 1,
        };
        let chain = crate::chain::quantize_chain(&e, 5, &params, 7).unwrap();
        let table = solve(&model, &grid, &chain).unwrap();
        assert!((table.value_at_origin - 0.25).abs() < 1e-12);
        for (vals, flags) in table.values.iter().zip(&table.stop_flags) {
            for (v, s) in vals.iter().zip(flags) {
                assert!((*v - 0.25).abs() < 1e-12);
                assert!(*s, "ties must stop");
            }
        }
    }

    #[test]
    fn backward_step_hand_case() {
        // 2-point grid, row (0.3, 0.7) against next values (1, 0), reward 0.5:
        // continuation 0.3, so stop at 0.5.
        let model = crate::model::StoppingModel {
            performance: Arc::new(|x, _| if x[0] == 0.0 { 0.5 } else { 0.1 }),
            h_sup: 0.5,
            ..constant_model(1)
        };
        let lambda_grid = uniform_grid(2); // points {0, 1}
        let chain_grid = WeightedGrid {
            dim: 3, // γ over 2 points + y
            points: vec![1.0, 0.0, 0.4, 0.0, 1.0, 0.6],
            weights: vec![0.5, 0.5],
            distortion_l2: 0.0,
            pinned: 0,
            seed: 0,
        };
        let p = RowStochastic::from_dense(&[vec![0.3, 0.7], vec![1.0, 0.0]], 2);
        let (vals, flags) =
            backward_step(&model, &lambda_grid, &chain_grid, &p, &[1.0, 0.0]).unwrap();
        // Point 0: reward 0.5 (γ one-hot at grid point 0), continuation 0.3.
        assert_eq!(vals[0], 0.5);
        assert!(flags[0]);
        // Point 1: reward 0.1, continuation 1.0 → continue.
        assert_eq!(vals[1], 1.0);
        assert!(!flags[1]);
    }

    #[test]
    fn one_hot_rows_copy_next_values() {
        let model = constant_model(1);
        let lambda_grid = uniform_grid(2);
        let chain_grid = WeightedGrid {
            dim: 3,
            points: vec![1.0, 0.0, 0.0, 0.0, 1.0, 1.0],
            weights: vec![0.5, 0.5],
            distortion_l2: 0.0,
            pinned: 0,
            seed: 0,
        };
        let p = RowStochastic::from_dense(&[vec![0.0, 1.0], vec![1.0, 0.0]], 2);
        let (vals, _) = backward_step(&model, &lambda_grid, &chain_grid, &p, &[0.9, 0.3]).unwrap();
        // Reward is 0.25 everywhere; continuations are the pointed values.
        assert_eq!(vals, vec![0.3, 0.9]);
    }
}
