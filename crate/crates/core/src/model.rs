//! The partially observed stopping problem: transition density, reference
//! measures, performance function and regularity constants.
//!
//! The transition kernel of the hidden/observed pair has a density
//! `r(u, v, x, y)` with respect to `λ(du) ν(dv)`: `u` is the next hidden
//! point, `v` the next observation, `(x, y)` the current pair. The model
//! carries the constants the error bounds need: `r̄` (sup of r), `L_r`
//! (Lipschitz constant in (u, x, y)), `δ` (so that `r(λ, v, x, y) ≥ 1/δ`),
//! and the bound/Lipschitz constants of the reward `H`.
//!
//! Many models factor as `r(u, v, x, y) = t(u, x) · o(u, v)` — a hidden
//! transition density times an emission density, both normalized against
//! their reference measures. Declaring the factorization lets the filter
//! cache the hidden factor on a grid and sample observations by composition;
//! it must evaluate to exactly the same values as the general form.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::measure::MixedMeasure;
use crate::quantize::WeightedGrid;

/// `f(u, v, x, y)` — the general transition density.
pub type GeneralDensityFn = Arc<dyn Fn(&[f64], &[f64], &[f64], &[f64]) -> f64 + Send + Sync>;
/// `f(a, b)` — a two-point function (hidden factor, emission, reward).
pub type PairFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;
/// Draws an observation from the emission law at hidden point `u`.
pub type EmissionSamplerFn = Arc<dyn Fn(&[f64], &mut ChaCha8Rng, &mut [f64]) + Send + Sync>;

#[derive(Clone)]
pub enum TransitionDensity {
    /// Closed-form `r(u, v, x, y)`.
    General(GeneralDensityFn),
    /// `r(u, v, x, y) = hidden(u, x) · emission(u, v)`, independent of `y`.
    /// `emission_sampler`, when present, draws from the emission law exactly
    /// and enables composition sampling of the observation marginal.
    Factored {
        hidden: PairFn,
        emission: PairFn,
        emission_sampler: Option<EmissionSamplerFn>,
    },
}

/// The stopping problem data (spaces, kernel density, measures, reward,
/// horizon and regularity constants).
#[derive(Clone)]
pub struct StoppingModel {
    pub dim_x: usize,
    pub dim_y: usize,
    /// Number of decision epochs N₀ (decisions at t = 0..=N₀).
    pub horizon: usize,
    pub density: TransitionDensity,
    pub lambda: MixedMeasure,
    pub nu: MixedMeasure,
    /// Reward `H(x, y)`.
    pub performance: PairFn,
    /// Upper bound r̄ on the density.
    pub r_sup: f64,
    /// Lipschitz constant L_r of `r` in (u, x, y).
    pub r_lip: f64,
    /// δ with `r(λ, v, x, y) ≥ 1/δ`.
    pub delta: f64,
    /// Bound on |H|.
    pub h_sup: f64,
    /// Lipschitz constant of H.
    pub h_lip: f64,
    /// Moment exponent of the reference measure (metadata only; not used by
    /// any computation).
    pub beta_moment: f64,
    pub initial_x: Vec<f64>,
    pub initial_y: Vec<f64>,
}

impl StoppingModel {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::ModelDefinition("horizon must be at least 1".into()));
        }
        for (name, v) in [("r_sup", self.r_sup), ("r_lip", self.r_lip), ("delta", self.delta)] {
            if !(v > 0.0) {
                return Err(Error::ModelDefinition(format!("{name} must be positive, got {v}")));
            }
        }
        if self.h_sup < 0.0 || self.h_lip < 0.0 {
            return Err(Error::ModelDefinition("h_sup and h_lip must be nonnegative".into()));
        }
        if self.initial_x.len() != self.dim_x {
            return Err(Error::DimensionMismatch { expected: self.dim_x, got: self.initial_x.len() });
        }
        if self.initial_y.len() != self.dim_y {
            return Err(Error::DimensionMismatch { expected: self.dim_y, got: self.initial_y.len() });
        }
        self.lambda.validate()?;
        self.nu.validate()?;
        Ok(())
    }

    /// Evaluates `r(u, v, x, y)`.
    pub fn eval_density(&self, u: &[f64], v: &[f64], x: &[f64], y: &[f64]) -> Result<f64> {
        let val = match &self.density {
            TransitionDensity::General(f) => f(u, v, x, y),
            TransitionDensity::Factored { hidden, emission, .. } => hidden(u, x) * emission(u, v),
        };
        if val < 0.0 || val.is_nan() {
            return Err(Error::ModelDefinition(format!(
                "density returned {val} at a probe point; must be nonnegative"
            )));
        }
        Ok(val)
    }

    /// `r(λ_N, v, θ, y) = Σ_i Σ_j w_i θ_j r(x_i, v, x_j, y)` — the density
    /// integrated against a grid measure in `u` and a simplex weighting
    /// `θ` over the same grid in `x`.
    pub fn eval_density_mixed(
        &self,
        grid: &WeightedGrid,
        v: &[f64],
        theta: &[f64],
        y: &[f64],
    ) -> Result<f64> {
        if theta.len() != grid.len() {
            return Err(Error::DimensionMismatch { expected: grid.len(), got: theta.len() });
        }
        let n = grid.len();
        let mut total = 0.0;
        match &self.density {
            TransitionDensity::Factored { hidden, emission, .. } => {
                for i in 0..n {
                    let u = grid.point(i);
                    let mut mix = 0.0;
                    for j in 0..n {
                        if theta[j] != 0.0 {
                            mix += theta[j] * hidden(u, grid.point(j));
                        }
                    }
                    total += grid.weights[i] * emission(u, v) * mix;
                }
            }
            TransitionDensity::General(f) => {
                for i in 0..n {
                    let u = grid.point(i);
                    let mut mix = 0.0;
                    for j in 0..n {
                        if theta[j] != 0.0 {
                            mix += theta[j] * f(u, v, grid.point(j), y);
                        }
                    }
                    total += grid.weights[i] * mix;
                }
            }
        }
        if total < 0.0 || total.is_nan() {
            return Err(Error::ModelDefinition(format!("mixed density evaluated to {total}")));
        }
        Ok(total)
    }

    /// Reward at a concrete pair.
    pub fn eval_performance(&self, x: &[f64], y: &[f64]) -> f64 {
        (self.performance)(x, y)
    }

    /// Extended reward `H(ψ) = Σ_j γ_j H(x_j, y)` for a filter state over a
    /// hidden grid.
    pub fn eval_performance_ext(
        &self,
        grid: &WeightedGrid,
        gamma: &[f64],
        y: &[f64],
    ) -> Result<f64> {
        if gamma.len() != grid.len() {
            return Err(Error::DimensionMismatch { expected: grid.len(), got: gamma.len() });
        }
        let mut acc = 0.0;
        for (j, &g) in gamma.iter().enumerate() {
            if g != 0.0 {
                acc += g * (self.performance)(grid.point(j), y);
            }
        }
        Ok(acc)
    }

    /// Samples probe points and reports violations of the declared bounds
    /// (advisory: sampling can refute the assumptions, not prove them).
    pub fn probe_assumptions(&self, n_probes: usize, seed: u64) -> Result<Vec<String>> {
        let mut warnings = Vec::new();
        let mut rng = crate::rng::seeded_rng(seed);
        let tol = 1e-9 * self.r_sup.max(1.0);
        let mut worst_r: f64 = 0.0;
        for _ in 0..n_probes {
            let u = self.lambda.sample(&mut rng);
            let v = self.nu.sample(&mut rng);
            let x = self.lambda.sample(&mut rng);
            let y = self.nu.sample(&mut rng);
            let r = self.eval_density(&u, &v, &x, &y)?;
            worst_r = worst_r.max(r);
            let h = self.eval_performance(&x, &y);
            if h.abs() > self.h_sup + tol {
                warnings.push(format!("|H| = {h} exceeds h_sup = {}", self.h_sup));
            }
        }
        if worst_r > self.r_sup + tol {
            warnings.push(format!("density reached {worst_r}, above r_sup = {}", self.r_sup));
        }
        Ok(warnings)
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use tests_support::constant_model as constant_density_model;

    fn two_point_grid() -> WeightedGrid {
        WeightedGrid {
            dim: 1,
            points: vec![0.0, 1.0],
            weights: vec![0.5, 0.5],
            distortion_l2: 0.0,
            pinned: 0,
            seed: 0,
        }
    }

    #[test]
    fn constant_density_evaluates_to_one() {
        let m = constant_density_model(3);
        assert_eq!(m.eval_density(&[0.2], &[0.3], &[0.4], &[0.5]).unwrap(), 1.0);
        let g = two_point_grid();
        assert_eq!(m.eval_density_mixed(&g, &[0.3], &[1.0, 0.0], &[0.5]).unwrap(), 1.0);
        assert_eq!(m.eval_density_mixed(&g, &[0.3], &[0.25, 0.75], &[0.5]).unwrap(), 1.0);
    }

    #[test]
    fn mixed_density_is_the_weighted_double_sum() {
        // r(x_i, v, x_j, y) distinguishes u only: r = 2 at u = 0, r = 4 at u = 1.
        let m = StoppingModel {
            density: TransitionDensity::General(Arc::new(|u, _, _, _| {
                if u[0] == 0.0 {
                    2.0
                } else {
                    4.0
                }
            })),
            ..constant_density_model(1)
        };
        let g = two_point_grid();
        // Dirac θ at the first grid point: 0.5·2 + 0.5·4 = 3.
        let val = m.eval_density_mixed(&g, &[0.1], &[1.0, 0.0], &[0.0]).unwrap();
        assert_eq!(val, 3.0);
        // Degenerate grid measure and θ: picks out a single evaluation.
        let one_atom = WeightedGrid {
            dim: 1,
            points: vec![1.0],
            weights: vec![1.0],
            distortion_l2: 0.0,
            pinned: 0,
            seed: 0,
        };
        assert_eq!(m.eval_density_mixed(&one_atom, &[0.1], &[1.0], &[0.0]).unwrap(), 4.0);
        // Mismatched θ length errors.
        assert!(m.eval_density_mixed(&g, &[0.1], &[1.0], &[0.0]).is_err());
    }

    #[test]
    fn performance_ext_is_the_weighted_average() {
        let m = StoppingModel {
            performance: Arc::new(|x, _| 1.0 - (x[0] - 0.5).abs()),
            ..constant_density_model(1)
        };
        let g = WeightedGrid {
            dim: 1,
            points: vec![0.2, 0.6],
            weights: vec![0.5, 0.5],
            distortion_l2: 0.0,
            pinned: 0,
            seed: 0,
        };
        // 0.5·(1−0.3) + 0.5·(1−0.1) = 0.8
        let v = m.eval_performance_ext(&g, &[0.5, 0.5], &[0.0]).unwrap();
        assert!((v - 0.8).abs() < 1e-15);
        // One-hot recovers the pointwise reward; constant reward is constant.
        let v = m.eval_performance_ext(&g, &[0.0, 1.0], &[0.0]).unwrap();
        assert!((v - 0.9).abs() < 1e-15);
        let c = constant_density_model(1);
        assert_eq!(c.eval_performance_ext(&g, &[0.3, 0.7], &[0.0]).unwrap(), 0.25);
    }

    #[test]
    fn negative_density_is_a_model_error() {
        let m = StoppingModel {
            density: TransitionDensity::General(Arc::new(|_, _, _, _| -1.0)),
            ..constant_density_model(1)
        };
        assert!(m.eval_density(&[0.0], &[0.0], &[0.0], &[0.0]).is_err());
    }

    #[test]
    fn factored_matches_product() {
        let m = StoppingModel {
            density: TransitionDensity::Factored {
                hidden: Arc::new(|u, x| 1.0 + u[0] * x[0]),
                emission: Arc::new(|u, v| 0.5 + u[0] * v[0]),
                emission_sampler: None,
            },
            ..constant_density_model(1)
        };
        let r = m.eval_density(&[0.5], &[0.25], &[2.0], &[9.0]).unwrap();
        assert!((r - (1.0 + 1.0) * (0.5 + 0.125)).abs() < 1e-15);
    }
}
