//! The filter–observation Markov chain on the N-simplex × 𝕐.
//!
//! Once the reference measure λ is quantized on a grid `Γ_X^N`, the Bayes
//! operator maps into probability vectors over the grid:
//!
//! ```text
//!   γ'_i ∝ λN_i · Σ_j γ_j r(x_i, v, x_j, y)
//! ```
//!
//! and one chain transition draws the next observation `v` from the marginal
//! with ν-density `r(λ_N, v, γ, y) / r(λ_N, ν, γ, y)`, then applies the Bayes
//! update at `v`. Observation sampling is exact either way it is done here:
//! by rejection against the envelope r̄ (general densities), or by
//! composition — draw the hidden grid point from `λN_i·(Tγ)_i`, then draw
//! from its emission law — when the density declares the factored form.
//!
//! Path simulation assigns each path its own RNG stream, so ensembles are
//! reproducible bit-for-bit regardless of thread count.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{StoppingModel, TransitionDensity};
use crate::quantize::WeightedGrid;
use crate::rng::path_rng;

/// Normalizers below this threshold signal a violated density lower bound.
const DEGENERATE_NORMALIZER: f64 = 1e-300;

/// One state of the chain: a probability vector over the hidden grid and the
/// current observation.
#[derive(Clone, Debug, PartialEq)]
pub struct SimplexState {
    pub gamma: Vec<f64>,
    pub y: Vec<f64>,
}

impl SimplexState {
    /// One-hot filter at grid index `index`.
    pub fn dirac(n: usize, index: usize, y: Vec<f64>) -> Self {
        let mut gamma = vec![0.0; n];
        gamma[index] = 1.0;
        SimplexState { gamma, y }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma.iter().any(|&g| g < 0.0) {
            return Err(Error::Format("negative simplex component".into()));
        }
        let sum: f64 = self.gamma.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Format(format!("simplex sum {sum} not within 1e-12 of 1")));
        }
        Ok(())
    }

    /// Concatenated (γ, y) embedding in ℝ^{N+n}.
    pub fn embed_into(&self, out: &mut [f64]) {
        out[..self.gamma.len()].copy_from_slice(&self.gamma);
        out[self.gamma.len()..].copy_from_slice(&self.y);
    }
}

/// Euclidean projection of a vector onto the probability simplex.
pub fn project_to_simplex(v: &mut [f64]) {
    let n = v.len();
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut acc = 0.0;
    let mut rho = 0usize;
    let mut theta = 0.0;
    for (k, &s) in sorted.iter().enumerate() {
        acc += s;
        let t = (acc - 1.0) / (k as f64 + 1.0);
        if s - t > 0.0 {
            rho = k;
            theta = t;
        }
    }
    let _ = rho;
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - theta).max(0.0);
        sum += *x;
    }
    if sum > 0.0 {
        for x in v.iter_mut() {
            *x /= sum;
        }
    } else {
        for x in v.iter_mut() {
            *x = 1.0 / n as f64;
        }
    }
}

/// How the observation marginal is sampled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObservationSampling {
    /// Composition when the density is factored with an emission sampler;
    /// rejection otherwise.
    Auto,
    /// Always rejection against the envelope r̄.
    Rejection,
}

/// Simulator for the chain on a fixed hidden grid. Construction caches the
/// hidden-factor matrix `T[i][j] = t(x_i, x_j)` for factored densities, so a
/// Bayes step is a matrix–vector product plus N emission evaluations.
pub struct FilterChain<'a> {
    pub model: &'a StoppingModel,
    pub grid: &'a WeightedGrid,
    hidden_matrix: Option<Vec<f64>>,
    pub sampling: ObservationSampling,
    pub rejection_cap: usize,
    init_index: Option<usize>,
}

impl<'a> FilterChain<'a> {
    pub fn new(model: &'a StoppingModel, grid: &'a WeightedGrid) -> Result<Self> {
        if grid.dim != model.dim_x {
            return Err(Error::DimensionMismatch { expected: model.dim_x, got: grid.dim });
        }
        let n = grid.len();
        let hidden_matrix = match &model.density {
            TransitionDensity::Factored { hidden, .. } => {
                let mut t = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        let v = hidden(grid.point(i), grid.point(j));
                        if v < 0.0 || v.is_nan() {
                            return Err(Error::ModelDefinition(format!(
                                "hidden factor returned {v}"
                            )));
                        }
                        t[i * n + j] = v;
                    }
                }
                Some(t)
            }
            TransitionDensity::General(_) => None,
        };
        let init_index = (0..n).find(|&i| grid.point(i) == model.initial_x.as_slice());
        Ok(FilterChain {
            model,
            grid,
            hidden_matrix,
            sampling: ObservationSampling::Auto,
            rejection_cap: 1_000_000,
            init_index,
        })
    }

    pub fn n_points(&self) -> usize {
        self.grid.len()
    }

    /// Index of the pinned initial hidden point, if the grid has it.
    pub fn init_index(&self) -> Option<usize> {
        self.init_index
    }

    /// The chain's initial state (δ at the initial hidden point, initial y).
    pub fn initial_state(&self) -> Result<SimplexState> {
        let idx = self.init_index.ok_or(Error::MissingInitialPoint)?;
        Ok(SimplexState::dirac(self.n_points(), idx, self.model.initial_y.clone()))
    }

    /// `w_i = Σ_j γ_j T[i][j]` for factored densities.
    fn hidden_mix(&self, gamma: &[f64]) -> Option<Vec<f64>> {
        let t = self.hidden_matrix.as_ref()?;
        let n = gamma.len();
        let mut w = vec![0.0; n];
        for i in 0..n {
            let row = &t[i * n..(i + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += row[j] * gamma[j];
            }
            w[i] = acc;
        }
        Some(w)
    }

    /// ν-density of the observation marginal: `r(λ_N, v, γ, y)`.
    fn marginal_density(&self, v: &[f64], state: &SimplexState, w: Option<&[f64]>) -> Result<f64> {
        let n = self.n_points();
        match (&self.model.density, w) {
            (TransitionDensity::Factored { emission, .. }, Some(w)) => {
                let mut acc = 0.0;
                for i in 0..n {
                    if w[i] != 0.0 {
                        acc += self.grid.weights[i] * emission(self.grid.point(i), v) * w[i];
                    }
                }
                Ok(acc)
            }
            _ => self.model.eval_density_mixed(self.grid, v, &state.gamma, &state.y),
        }
    }

    /// Bayes update: the posterior over the grid after observing `v`.
    pub fn bayes_update(&self, v: &[f64], state: &SimplexState) -> Result<Vec<f64>> {
        let w = self.hidden_mix(&state.gamma);
        self.bayes_update_with(v, state, w.as_deref())
    }

    fn bayes_update_with(
        &self,
        v: &[f64],
        state: &SimplexState,
        w: Option<&[f64]>,
    ) -> Result<Vec<f64>> {
        let n = self.n_points();
        if state.gamma.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: state.gamma.len() });
        }
        let mut post = vec![0.0; n];
        match (&self.model.density, w) {
            (TransitionDensity::Factored { emission, .. }, Some(w)) => {
                for i in 0..n {
                    post[i] = self.grid.weights[i] * emission(self.grid.point(i), v) * w[i];
                }
            }
            _ => {
                for (i, p) in post.iter_mut().enumerate() {
                    let u = self.grid.point(i);
                    let mut mix = 0.0;
                    for j in 0..n {
                        if state.gamma[j] != 0.0 {
                            mix += state.gamma[j]
                                * self.model.eval_density(u, v, self.grid.point(j), &state.y)?;
                        }
                    }
                    *p = self.grid.weights[i] * mix;
                }
            }
        }
        let z: f64 = post.iter().sum();
        if !(z > DEGENERATE_NORMALIZER) {
            return Err(Error::DegenerateObservation { normalizer: z });
        }
        for p in post.iter_mut() {
            *p /= z;
        }
        // Second pass pins the sum to 1 within machine precision.
        let s: f64 = post.iter().sum();
        if s != 1.0 && s > 0.0 {
            for p in post.iter_mut() {
                *p /= s;
            }
        }
        Ok(post)
    }

    /// Draws the next observation from the marginal of the quantized kernel.
    pub fn sample_observation(&self, state: &SimplexState, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let w = self.hidden_mix(&state.gamma);
        self.sample_observation_with(state, w.as_deref(), rng)
    }

    fn sample_observation_with(
        &self,
        state: &SimplexState,
        w: Option<&[f64]>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>> {
        if self.sampling == ObservationSampling::Auto {
            if let (
                TransitionDensity::Factored { emission_sampler: Some(sampler), .. },
                Some(w),
            ) = (&self.model.density, w)
            {
                // Composition: hidden point i w.p. ∝ λN_i w_i, then its
                // emission. The mixture density is exactly the target
                // marginal.
                let n = self.n_points();
                let mut z = 0.0;
                for i in 0..n {
                    z += self.grid.weights[i] * w[i];
                }
                if !(z > DEGENERATE_NORMALIZER) {
                    return Err(Error::DegenerateObservation { normalizer: z });
                }
                let mut target = rng.random::<f64>() * z;
                let mut pick = n - 1;
                for i in 0..n {
                    target -= self.grid.weights[i] * w[i];
                    if target <= 0.0 {
                        pick = i;
                        break;
                    }
                }
                let mut out = vec![0.0; self.model.dim_y];
                sampler(self.grid.point(pick), rng, &mut out);
                return Ok(out);
            }
        }
        // Rejection against the envelope r̄: propose v ~ ν, accept with
        // probability r(λ_N, v, γ, y)/r̄.
        let mut v = vec![0.0; self.model.dim_y];
        for _ in 0..self.rejection_cap {
            self.model.nu.sample_into(rng, &mut v);
            let val = self.marginal_density(&v, state, w)?;
            if rng.random::<f64>() * self.model.r_sup < val {
                return Ok(v);
            }
        }
        Err(Error::RejectionCapExceeded { cap: self.rejection_cap })
    }

    /// One chain transition: draw `v`, update the filter, return (γ', v).
    pub fn step(&self, state: &SimplexState, rng: &mut ChaCha8Rng) -> Result<SimplexState> {
        let w = self.hidden_mix(&state.gamma);
        let v = self.sample_observation_with(state, w.as_deref(), rng)?;
        let gamma = self.bayes_update_with(&v, state, w.as_deref())?;
        Ok(SimplexState { gamma, y: v })
    }

    /// Simulates `n_paths` independent trajectories of length horizon+1 from
    /// the deterministic initial state. Requires the initial hidden point to
    /// be a grid point.
    pub fn simulate_paths(&self, n_paths: usize, seed: u64) -> Result<PathEnsemble> {
        let init = self.initial_state()?;
        let horizon = self.model.horizon;
        let n = self.n_points();
        let dim_y = self.model.dim_y;
        let state_dim = n + dim_y;
        let stride = state_dim * (horizon + 1);
        let mut data = vec![0.0f32; n_paths * stride];

        data.par_chunks_mut(stride).enumerate().try_for_each(
            |(path, chunk)| -> Result<()> {
                let mut rng = path_rng(seed, path as u64);
                let mut state = init.clone();
                write_state(&state, &mut chunk[0..state_dim]);
                for t in 1..=horizon {
                    state = self.step(&state, &mut rng)?;
                    write_state(&state, &mut chunk[t * state_dim..(t + 1) * state_dim]);
                }
                Ok(())
            },
        )?;

        Ok(PathEnsemble { n_hidden: n, dim_y, horizon, n_paths, seed, data })
    }
}

fn write_state(state: &SimplexState, out: &mut [f32]) {
    let n = state.gamma.len();
    for (o, g) in out[..n].iter_mut().zip(&state.gamma) {
        *o = *g as f32;
    }
    for (o, y) in out[n..].iter_mut().zip(&state.y) {
        *o = *y as f32;
    }
}

/// A simulated ensemble of chain trajectories, stored as f32 records
/// (path-major, then time): the handoff from simulation to chain
/// quantization.
pub struct PathEnsemble {
    pub n_hidden: usize,
    pub dim_y: usize,
    pub horizon: usize,
    pub n_paths: usize,
    pub seed: u64,
    data: Vec<f32>,
}

impl PathEnsemble {
    pub fn state_dim(&self) -> usize {
        self.n_hidden + self.dim_y
    }

    /// The embedded (γ, y) record of `path` at time `t`.
    pub fn state(&self, path: usize, t: usize) -> &[f32] {
        let sd = self.state_dim();
        let off = (path * (self.horizon + 1) + t) * sd;
        &self.data[off..off + sd]
    }

    pub fn state_f64_into(&self, path: usize, t: usize, out: &mut [f64]) {
        for (o, v) in out.iter_mut().zip(self.state(path, t)) {
            *o = *v as f64;
        }
    }

    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(b"QENS")?;
        w.write_u32::<LittleEndian>(1)?;
        for v in [self.n_hidden, self.dim_y, self.horizon, self.n_paths] {
            w.write_u64::<LittleEndian>(v as u64)?;
        }
        w.write_u64::<LittleEndian>(self.seed)?;
        for &x in &self.data {
            w.write_f32::<LittleEndian>(x)?;
        }
        Ok(())
    }

    pub fn load<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"QENS" {
            return Err(Error::Format("not a path-ensemble file".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != 1 {
            return Err(Error::Format(format!("unsupported ensemble version {version}")));
        }
        let n_hidden = r.read_u64::<LittleEndian>()? as usize;
        let dim_y = r.read_u64::<LittleEndian>()? as usize;
        let horizon = r.read_u64::<LittleEndian>()? as usize;
        let n_paths = r.read_u64::<LittleEndian>()? as usize;
        let seed = r.read_u64::<LittleEndian>()?;
        let len = n_paths * (horizon + 1) * (n_hidden + dim_y);
        let mut data = vec![0.0f32; len];
        for x in data.iter_mut() {
            *x = r.read_f32::<LittleEndian>()?;
        }
        Ok(PathEnsemble { n_hidden, dim_y, horizon, n_paths, seed, data })
    }
}
