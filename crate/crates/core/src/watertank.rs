//! The bundled water-tank model.
//!
//! A tank of capacity `K` fills by i.i.d. exponential rainfall increments and
//! is observed through additive Gaussian noise, both truncated to `[0, K]`:
//!
//! ```text
//!   X̃_{t+1} = min{ (X̃_t + ξ_t)₊, K }      ξ_t ~ f = Exp(rate)
//!   Ỹ_{t+1} = min{ (X̃_{t+1} + ψ_t)₊, K }   ψ_t ~ g = N(0, σ²)
//! ```
//!
//! The goal is to stop (cover the tank) when the unobserved level is closest
//! to a target `α`, rewarded by `H(x, y) = K − |x₁ − α|`. The boundary levels
//! 0 and K carry point mass, so the hidden state is extended with a marker
//! coordinate `x₂ = 1{x₁=K} − 1{x₁=0}` that isolates the two atoms
//! metrically, and the reference measures mix Dirac atoms at the boundaries
//! with a scaled Lebesgue part:
//!
//! ```text
//!   λ = ¼ δ_{(0,−1)} + (1/2K)·Leb×δ₀ + ¼ δ_{(K,1)},
//!   ν = ¼ δ₀ + (1/2K)·Leb + ¼ δ_K .
//! ```
//!
//! The transition density factors into a hidden part (exponential increment
//! with boundary absorption) and an emission part `m(u₁, v)`; both are
//! normalized against their reference measures, and all regularity constants
//! (r̄, L_r, δ, ‖H‖) have closed forms in `rate`, `σ` and `K`.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::measure::{Atom, ContinuousPart, MixedMeasure};
use crate::model::{StoppingModel, TransitionDensity};

/// Water-tank parameters; defaults match the bundled experiment
/// (K = 1, α = 0.5, Exp(5) inflow, N(0, 0.03) noise, horizon 10).
#[derive(Clone, Debug)]
pub struct WaterTankParams {
    pub capacity: f64,
    pub target: f64,
    pub inflow_rate: f64,
    pub noise_sigma: f64,
    pub horizon: usize,
}

impl Default for WaterTankParams {
    fn default() -> Self {
        WaterTankParams {
            capacity: 1.0,
            target: 0.5,
            inflow_rate: 5.0,
            noise_sigma: 0.03,
            horizon: 10,
        }
    }
}

impl WaterTankParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.capacity > 0.0) {
            return Err(Error::ModelDefinition("capacity must be positive".into()));
        }
        if !(self.target > 0.0 && self.target < self.capacity) {
            return Err(Error::ModelDefinition("target must lie strictly inside (0, K)".into()));
        }
        if !(self.inflow_rate > 0.0) || !(self.noise_sigma > 0.0) {
            return Err(Error::ModelDefinition("rate and sigma must be positive".into()));
        }
        if self.horizon == 0 {
            return Err(Error::ModelDefinition("horizon must be at least 1".into()));
        }
        Ok(())
    }

    /// Inflow density `f` on ℝ₊.
    pub fn f_pdf(&self, x: f64) -> f64 {
        if x < 0.0 {
            0.0
        } else {
            self.inflow_rate * (-self.inflow_rate * x).exp()
        }
    }

    /// Inflow CDF `F`.
    pub fn f_cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            0.0
        } else {
            -(-self.inflow_rate * x).exp_m1()
        }
    }

    /// Noise density `g`.
    pub fn g_pdf(&self, x: f64) -> f64 {
        normal_pdf(x, self.noise_sigma)
    }

    /// Noise CDF `G`.
    pub fn g_cdf(&self, x: f64) -> f64 {
        normal_cdf(x, self.noise_sigma)
    }

    /// Lower bound of `g` on [−K, K].
    pub fn g_lower(&self) -> f64 {
        self.g_pdf(self.capacity)
    }
}

fn normal_pdf(x: f64, sigma: f64) -> f64 {
    let z = x / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

/// Standard-accuracy normal CDF. The central range uses erfc; far tails
/// (|z| > 8) switch to the Mills-ratio asymptotic series, which stays
/// accurate down to the subnormal range where erfc underflows.
fn normal_cdf(x: f64, sigma: f64) -> f64 {
    let z = x / sigma;
    if z.abs() <= 8.0 {
        0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)
    } else if z > 0.0 {
        1.0 - normal_tail(z)
    } else {
        normal_tail(-z)
    }
}

/// P(Z > z) for large positive z: φ(z)/z · (1 − 1/z² + 3/z⁴ − 15/z⁶).
fn normal_tail(z: f64) -> f64 {
    let phi = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let z2 = z * z;
    (phi / z) * (1.0 - 1.0 / z2 + 3.0 / (z2 * z2) - 15.0 / (z2 * z2 * z2))
}

/// Classification of an extended hidden point by its marker coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Level {
    Empty,
    Interior,
    Full,
}

fn classify(u: &[f64]) -> Level {
    if u[1] <= -0.5 {
        Level::Empty
    } else if u[1] >= 0.5 {
        Level::Full
    } else {
        Level::Interior
    }
}

/// Closed-form constants of the water-tank model.
#[derive(Clone, Debug)]
pub struct WaterTankConstants {
    pub f_sup: f64,
    pub f_lip: f64,
    pub g_sup: f64,
    pub g_lip: f64,
    pub g_lower: f64,
    pub r_sup: f64,
    pub r_lip: f64,
    pub delta: f64,
    pub h_sup: f64,
    pub h_lip: f64,
}

/// Evaluates the model's regularity constants from the parameters.
pub fn constants(p: &WaterTankParams) -> WaterTankConstants {
    let k = p.capacity;
    let f_sup = p.inflow_rate;
    let f_lip = p.inflow_rate * p.inflow_rate;
    let g_sup = p.g_pdf(0.0);
    // |g'(x)| = (|x|/σ²) g(x) peaks at x = min(σ, K) on [−K, K].
    let x_star = p.noise_sigma.min(k);
    let g_lip = (x_star / (p.noise_sigma * p.noise_sigma)) * p.g_pdf(x_star);

    let gs = 8.0 + 2.0 * k * g_sup;
    let r_sup = (8.0 + 2.0 * k * f_sup) * gs;
    let a = 2.0 * k * (f_lip * gs + f_sup * (8.0 * g_sup + 2.0 * k * g_lip));
    let b = (2.0 * k * f_sup * (8.0 * g_sup + 2.0 * k * g_lip))
        .max((4.0 + 2.0 * k * f_sup + 2.0 * k * f_lip) * gs);
    let r_lip = a
        .max(b)
        .max(8.0 * gs / (k + 2.0))
        .max(gs * (8.0 * f_sup + 2.0 * k * f_lip));

    let g_lower = p.g_lower();
    let floor = (4.0 * p.g_cdf(-k)).min(2.0 * k * g_lower).min(4.0 * (1.0 - p.g_cdf(0.0)));
    let delta = if floor > 0.0 {
        1.0 / ((1.0 - p.f_cdf(k)) * floor)
    } else {
        f64::INFINITY
    };

    WaterTankConstants {
        f_sup,
        f_lip,
        g_sup,
        g_lip,
        g_lower,
        r_sup,
        r_lip,
        delta,
        h_sup: k,
        h_lip: 1.0,
    }
}

/// Emission term `m(u₁, v)`: the ν-density of the observation given the
/// post-transition level `u₁`.
fn emission_term(p: &WaterTankParams, u1: f64, v: &[f64]) -> f64 {
    let k = p.capacity;
    let v = v[0];
    if v == 0.0 {
        4.0 * p.g_cdf(-u1)
    } else if v == k {
        4.0 * (1.0 - p.g_cdf(k - u1))
    } else {
        2.0 * k * p.g_pdf(v - u1)
    }
}

/// Hidden term: the λ-density of the level move from `x₁` to `u`.
fn hidden_term(p: &WaterTankParams, u: &[f64], x: &[f64]) -> f64 {
    let k = p.capacity;
    let x1 = x[0];
    match classify(u) {
        Level::Empty => 4.0 * p.f_cdf(-x1),
        Level::Interior => 2.0 * k * p.f_pdf(u[0] - x1),
        Level::Full => 4.0 * (1.0 - p.f_cdf(k - x1)),
    }
}

/// Builds the water-tank stopping model.
pub fn build_watertank(p: &WaterTankParams) -> Result<StoppingModel> {
    p.validate()?;
    let c = constants(p);
    if p.g_cdf(-p.capacity) <= 0.0 {
        // Cannot happen for a Gaussian with σ > 0, but the δ chain of
        // inequalities needs G(−K) > 0, so check anyway.
        return Err(Error::ModelDefinition("noise CDF vanishes at -K".into()));
    }
    let k = p.capacity;

    let lambda = MixedMeasure {
        dim: 2,
        atoms: vec![
            Atom { point: vec![0.0, -1.0], weight: 0.25 },
            Atom { point: vec![k, 1.0], weight: 0.25 },
        ],
        continuous: vec![ContinuousPart {
            weight: 0.5,
            sampler: Arc::new(move |rng, out| {
                out[0] = rng.random_range(0.0..k);
                out[1] = 0.0;
            }),
        }],
    };
    let nu = MixedMeasure {
        dim: 1,
        atoms: vec![
            Atom { point: vec![0.0], weight: 0.25 },
            Atom { point: vec![k], weight: 0.25 },
        ],
        continuous: vec![ContinuousPart {
            weight: 0.5,
            sampler: Arc::new(move |rng, out| out[0] = rng.random_range(0.0..k)),
        }],
    };

    let ph = p.clone();
    let pe = p.clone();
    let ps = p.clone();
    let target = p.target;
    let model = StoppingModel {
        dim_x: 2,
        dim_y: 1,
        horizon: p.horizon,
        density: TransitionDensity::Factored {
            hidden: Arc::new(move |u, x| hidden_term(&ph, u, x)),
            emission: Arc::new(move |u, v| emission_term(&pe, u[0], v)),
            emission_sampler: Some(Arc::new(move |u, rng, out| {
                let noise = Normal::new(0.0, ps.noise_sigma).unwrap();
                let psi: f64 = noise.sample(rng);
                out[0] = (u[0] + psi).max(0.0).min(ps.capacity);
            })),
        },
        lambda,
        nu,
        performance: Arc::new(move |x, _y| k - (x[0] - target).abs()),
        r_sup: c.r_sup,
        r_lip: c.r_lip,
        delta: c.delta,
        h_sup: c.h_sup,
        h_lip: c.h_lip,
        beta_moment: 1.0,
        initial_x: vec![0.0, -1.0],
        initial_y: vec![0.0],
    };
    model.validate()?;
    Ok(model)
}

/// One step of the truth dynamics given the noise realizations; pure, so the
/// truncation logic is testable without randomness.
pub fn truth_step(p: &WaterTankParams, x1: f64, xi: f64, psi: f64) -> (f64, f64, f64) {
    let k = p.capacity;
    let x1_next = (x1 + xi).max(0.0).min(k);
    let x2_next = if x1_next == k {
        1.0
    } else if x1_next == 0.0 {
        -1.0
    } else {
        0.0
    };
    let y_next = (x1_next + psi).max(0.0).min(k);
    (x1_next, x2_next, y_next)
}

/// Simulates the truth trajectory from the standard initial state (0, −1, 0);
/// returns (x₁, x₂, y) for t = 0..=n_steps.
pub fn simulate_truth(
    p: &WaterTankParams,
    n_steps: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<(f64, f64, f64)> {
    let exp = rand_distr::Exp::new(p.inflow_rate).unwrap();
    let noise = Normal::new(0.0, p.noise_sigma).unwrap();
    let mut out = Vec::with_capacity(n_steps + 1);
    let mut x1 = 0.0;
    out.push((0.0, -1.0, 0.0));
    for _ in 0..n_steps {
        let xi: f64 = exp.sample(rng);
        let psi: f64 = noise.sample(rng);
        let (nx1, nx2, ny) = truth_step(p, x1, xi, psi);
        out.push((nx1, nx2, ny));
        x1 = nx1;
    }
    out
}
