//! Optimal L₂ vector quantization: CLVQ training, Lloyd refinement,
//! nearest-neighbor projection and distortion estimation.
//!
//! CLVQ (competitive learning vector quantization) is the stochastic-gradient
//! scheme for the quadratic distortion: at step `t` a sample `ξ` moves its
//! nearest centroid by `ε_t (ξ − c)` with `ε_t = a / (b + t)`. Lloyd rounds
//! (batch centroid re-estimation) stabilize the output. Grid weights are
//! always produced by a frozen-grid counting pass so that they coincide with
//! the empirical cell frequencies of that pass.
//!
//! Mixed measures get special handling: atoms heavy enough to deserve their
//! own cell are pinned as dedicated grid points and excluded from training,
//! so boundary states with point mass are represented exactly.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::measure::MixedMeasure;
use crate::nn::{dist2_partial, NnIndex};
use crate::rng::{derive_seed, seeded_rng};

/// A quantization grid: points, cell probabilities from the counting pass,
/// and the estimated L₂ distortion `‖Z − p_Γ(Z)‖₂`.
#[derive(Clone, Debug)]
pub struct WeightedGrid {
    pub dim: usize,
    /// Row-major point coordinates, `len() * dim` entries.
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
    pub distortion_l2: f64,
    /// Number of leading points that are pinned (atoms, initial state); they
    /// are never moved by training.
    pub pinned: usize,
    pub seed: u64,
}

impl WeightedGrid {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() != self.weights.len() * self.dim {
            return Err(Error::Format("grid points/weights size mismatch".into()));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 || self.weights.iter().any(|&w| w < 0.0) {
            return Err(Error::Format(format!("grid weights sum to {sum}")));
        }
        if self.distortion_l2 < 0.0 {
            return Err(Error::Format("negative distortion".into()));
        }
        Ok(())
    }

    /// Exact binary round-trip (little-endian f64 bit patterns).
    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(b"QGRD")?;
        w.write_u32::<LittleEndian>(1)?;
        w.write_u64::<LittleEndian>(self.dim as u64)?;
        w.write_u64::<LittleEndian>(self.len() as u64)?;
        w.write_u64::<LittleEndian>(self.pinned as u64)?;
        w.write_u64::<LittleEndian>(self.seed)?;
        w.write_f64::<LittleEndian>(self.distortion_l2)?;
        for &p in &self.points {
            w.write_f64::<LittleEndian>(p)?;
        }
        for &p in &self.weights {
            w.write_f64::<LittleEndian>(p)?;
        }
        Ok(())
    }

    pub fn load<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"QGRD" {
            return Err(Error::Format("not a grid file".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != 1 {
            return Err(Error::Format(format!("unsupported grid version {version}")));
        }
        let dim = r.read_u64::<LittleEndian>()? as usize;
        let n = r.read_u64::<LittleEndian>()? as usize;
        let pinned = r.read_u64::<LittleEndian>()? as usize;
        let seed = r.read_u64::<LittleEndian>()?;
        let distortion_l2 = r.read_f64::<LittleEndian>()?;
        let mut points = vec![0.0; n * dim];
        for p in points.iter_mut() {
            *p = r.read_f64::<LittleEndian>()?;
        }
        let mut weights = vec![0.0; n];
        for p in weights.iter_mut() {
            *p = r.read_f64::<LittleEndian>()?;
        }
        Ok(WeightedGrid { dim, points, weights, distortion_l2, pinned, seed })
    }
}

/// CLVQ training knobs. The learning rate at step `t` is `a / (b + t)`.
#[derive(Clone, Debug)]
pub struct ClvqParams {
    pub step_a: f64,
    pub step_b: f64,
    pub iterations: usize,
    /// Samples for the frozen-grid counting pass (weights + distortion).
    /// Zero skips the pass; the caller then owns weights and distortion.
    pub count_samples: usize,
}

impl Default for ClvqParams {
    fn default() -> Self {
        ClvqParams { step_a: 1.0, step_b: 100.0, iterations: 100_000, count_samples: 100_000 }
    }
}

fn bits_key(p: &[f64]) -> Vec<u64> {
    p.iter().map(|x| x.to_bits()).collect()
}

/// Trains a grid of (at most) `n_points` points by CLVQ on i.i.d. draws from
/// `sampler`. `pinned` points are placed first and never moved. If the
/// sampler cannot produce enough distinct points the grid is shrunk.
pub fn clvq_train<F>(
    mut sampler: F,
    dim: usize,
    n_points: usize,
    params: &ClvqParams,
    pinned: &[Vec<f64>],
    seed: u64,
) -> Result<WeightedGrid>
where
    F: FnMut(&mut ChaCha8Rng, &mut [f64]),
{
    if n_points == 0 {
        return Err(Error::Config("n_points must be at least 1".into()));
    }
    let mut rng = seeded_rng(derive_seed(seed, "clvq-init"));
    let mut points: Vec<f64> = Vec::with_capacity(n_points * dim);
    let mut seen: HashSet<Vec<u64>> = HashSet::new();
    for p in pinned {
        if p.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: p.len() });
        }
        if seen.insert(bits_key(p)) {
            points.extend_from_slice(p);
        }
    }
    let n_pinned = points.len() / dim;

    // Initialize free points from i.i.d. draws, deduplicated.
    let mut buf = vec![0.0; dim];
    let mut attempts = 0usize;
    let max_attempts = 200 * n_points.max(8);
    while points.len() / dim < n_points.max(n_pinned) && attempts < max_attempts {
        sampler(&mut rng, &mut buf);
        attempts += 1;
        if seen.insert(bits_key(&buf)) {
            points.extend_from_slice(&buf);
        }
    }
    let n = points.len() / dim;
    if n < n_points.max(n_pinned) {
        log::warn!(
            "clvq: sampler produced only {n} distinct points (requested {n_points}); grid shrunk"
        );
    }

    // CLVQ pass.
    let mut index = NnIndex::build(&points, dim);
    if n > n_pinned {
        let mut train_rng = seeded_rng(derive_seed(seed, "clvq-train"));
        let mut moved = vec![0.0; dim];
        for t in 0..params.iterations {
            sampler(&mut train_rng, &mut buf);
            let (win, _) = index.nearest(&buf);
            if win < n_pinned {
                continue;
            }
            let step = params.step_a / (params.step_b + t as f64);
            let p = index.point(win);
            for k in 0..dim {
                moved[k] = p[k] + step * (buf[k] - p[k]);
            }
            index.move_point(win, &moved);
        }
        for i in 0..n {
            points[i * dim..(i + 1) * dim].copy_from_slice(index.point(i));
        }
    }

    let (points, n) = merge_duplicates(points, dim);
    let mut grid = WeightedGrid {
        dim,
        points,
        weights: vec![1.0 / n as f64; n],
        distortion_l2: 0.0,
        pinned: n_pinned,
        seed,
    };
    if params.count_samples > 0 {
        count_pass(&mut grid, &mut sampler, params.count_samples, derive_seed(seed, "clvq-count"));
    }
    Ok(grid)
}

fn merge_duplicates(points: Vec<f64>, dim: usize) -> (Vec<f64>, usize) {
    let n = points.len() / dim;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(points.len());
    for i in 0..n {
        let p = &points[i * dim..(i + 1) * dim];
        if seen.insert(bits_key(p)) {
            out.extend_from_slice(p);
        }
    }
    let m = out.len() / dim;
    (out, m)
}

/// Frozen-grid counting pass: weights are exact empirical cell frequencies,
/// distortion is the root-mean-square projection distance over the same
/// (held-out) draws.
fn count_pass<F>(grid: &mut WeightedGrid, sampler: &mut F, n_samples: usize, seed: u64)
where
    F: FnMut(&mut ChaCha8Rng, &mut [f64]),
{
    let index = NnIndex::build(&grid.points, grid.dim);
    let mut rng = seeded_rng(seed);
    let mut buf = vec![0.0; grid.dim];
    let mut counts = vec![0u64; grid.len()];
    let mut sum_d2 = 0.0;
    for _ in 0..n_samples {
        sampler(&mut rng, &mut buf);
        let (win, d2) = index.nearest(&buf);
        counts[win] += 1;
        sum_d2 += d2;
    }
    let total = n_samples as f64;
    grid.weights = counts.iter().map(|&c| c as f64 / total).collect();
    grid.distortion_l2 = (sum_d2 / total).sqrt();
}

/// Lloyd (batch k-means) refinement. Each round draws a fresh batch, assigns
/// it to cells and moves every free centroid to its cell mean. Empty free
/// cells are re-seeded from the sampler. Weights and distortion are
/// re-estimated after the last round. `n_rounds == 0` returns the grid
/// unchanged.
pub fn lloyd_refine<F>(
    grid: &WeightedGrid,
    mut sampler: F,
    n_rounds: usize,
    samples_per_round: usize,
    seed: u64,
) -> Result<WeightedGrid>
where
    F: FnMut(&mut ChaCha8Rng, &mut [f64]),
{
    if n_rounds == 0 {
        return Ok(grid.clone());
    }
    let dim = grid.dim;
    let n = grid.len();
    let mut points = grid.points.clone();
    let mut rng = seeded_rng(derive_seed(seed, "lloyd"));
    let mut buf = vec![0.0; dim];
    let mut reseeded = 0usize;
    for _round in 0..n_rounds {
        let index = NnIndex::build(&points, dim);
        let mut sums = vec![0.0; n * dim];
        let mut counts = vec![0u64; n];
        for _ in 0..samples_per_round {
            sampler(&mut rng, &mut buf);
            let (win, _) = index.nearest(&buf);
            counts[win] += 1;
            for k in 0..dim {
                sums[win * dim + k] += buf[k];
            }
        }
        for i in grid.pinned..n {
            if counts[i] == 0 {
                sampler(&mut rng, &mut buf);
                points[i * dim..(i + 1) * dim].copy_from_slice(&buf);
                reseeded += 1;
            } else {
                let c = counts[i] as f64;
                for k in 0..dim {
                    points[i * dim + k] = sums[i * dim + k] / c;
                }
            }
        }
    }
    if reseeded > 0 {
        log::warn!("lloyd: re-seeded {reseeded} empty cells");
    }
    let (points, m) = merge_duplicates(points, dim);
    let mut out = WeightedGrid {
        dim,
        points,
        weights: vec![1.0 / m as f64; m],
        distortion_l2: 0.0,
        pinned: grid.pinned,
        seed: grid.seed,
    };
    count_pass(&mut out, &mut sampler, samples_per_round.max(1), derive_seed(seed, "lloyd-count"));
    Ok(out)
}

/// Closest-neighbor projection: index of the grid point nearest to `z`, ties
/// broken by lowest index.
pub fn project(grid: &WeightedGrid, z: &[f64]) -> Result<usize> {
    if z.len() != grid.dim {
        return Err(Error::DimensionMismatch { expected: grid.dim, got: z.len() });
    }
    let mut best_d2 = f64::INFINITY;
    let mut best = usize::MAX;
    for i in 0..grid.len() {
        let d2 = dist2_partial(z, grid.point(i), best_d2);
        if d2 < best_d2 {
            best_d2 = d2;
            best = i;
        }
    }
    Ok(best)
}

/// Monte-Carlo estimate of `‖Z − p_Γ(Z)‖₂` with its delta-method standard
/// error.
pub fn estimate_distortion<F>(
    grid: &WeightedGrid,
    mut sampler: F,
    n_samples: usize,
    seed: u64,
) -> Result<(f64, f64)>
where
    F: FnMut(&mut ChaCha8Rng, &mut [f64]),
{
    if n_samples < 2 {
        return Err(Error::Config("need at least 2 samples".into()));
    }
    let index = NnIndex::build(&grid.points, grid.dim);
    let mut rng = seeded_rng(seed);
    let mut buf = vec![0.0; grid.dim];
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_samples {
        sampler(&mut rng, &mut buf);
        let (_, d2) = index.nearest(&buf);
        sum += d2;
        sum_sq += d2 * d2;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    let se_mean = (var / n).sqrt();
    let l2 = mean.sqrt();
    // Delta method for x ↦ √x; zero-distortion grids get zero error.
    let se = if l2 > 0.0 { se_mean / (2.0 * l2) } else { 0.0 };
    Ok((l2, se))
}

/// Quantizes a mixed measure. Atoms with weight ≥ 1/(2·n_points) are pinned
/// as dedicated grid points (as is `pin_first`, placed at index 0 — used for
/// the initial hidden state); the remaining points train by CLVQ on the
/// continuous components. Weights and distortion come from a counting pass
/// over the full measure.
pub fn quantize_measure(
    measure: &MixedMeasure,
    n_points: usize,
    params: &ClvqParams,
    pin_first: Option<&[f64]>,
    seed: u64,
) -> Result<WeightedGrid> {
    measure.validate()?;
    let mut pinned: Vec<Vec<f64>> = Vec::new();
    if let Some(p) = pin_first {
        pinned.push(p.to_vec());
    }
    let threshold = 1.0 / (2.0 * n_points as f64);
    for a in &measure.atoms {
        if a.weight >= threshold && !pinned.iter().any(|p| p == &a.point) {
            pinned.push(a.point.clone());
        }
    }

    // Train the free points on the continuous part only; a purely atomic
    // measure trains on the atoms themselves (harmless: draws are grid
    // candidates already).
    let train_measure = continuous_conditional(measure);
    let full = measure.clone();
    let mut train_params = params.clone();
    train_params.count_samples = 0;
    let mut grid = clvq_train(
        move |rng, out| train_measure.sample_into(rng, out),
        measure.dim,
        n_points,
        &train_params,
        &pinned,
        seed,
    )?;
    let mut full_sampler = {
        let m = full.clone();
        move |rng: &mut ChaCha8Rng, out: &mut [f64]| m.sample_into(rng, out)
    };
    count_pass(&mut grid, &mut full_sampler, params.count_samples.max(1), derive_seed(seed, "measure-count"));
    Ok(grid)
}

/// The measure conditioned on its continuous components (the full measure if
/// it has none).
fn continuous_conditional(measure: &MixedMeasure) -> MixedMeasure {
    if measure.continuous.is_empty() {
        return measure.clone();
    }
    let total: f64 = measure.continuous.iter().map(|c| c.weight).sum();
    MixedMeasure {
        dim: measure.dim,
        atoms: Vec::new(),
        continuous: measure
            .continuous
            .iter()
            .map(|c| crate::measure::ContinuousPart {
                weight: c.weight / total,
                sampler: Arc::clone(&c.sampler),
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::{Atom, ContinuousPart};
    use rand::Rng;

    fn uniform01(rng: &mut ChaCha8Rng, out: &mut [f64]) {
        out[0] = rng.random::<f64>();
    }

    #[test]
    fn single_point_on_uniform_is_the_mean() {
        let params = ClvqParams { iterations: 200_000, count_samples: 400_000, ..Default::default() };
        let grid = clvq_train(uniform01, 1, 1, &params, &[], 42).unwrap();
        assert_eq!(grid.len(), 1);
        // E(X − c)² is minimized at c = 1/2 with value 1/12.
        assert!((grid.points[0] - 0.5).abs() < 0.02, "centroid {}", grid.points[0]);
        let d2 = grid.distortion_l2 * grid.distortion_l2;
        assert!((d2 - 1.0 / 12.0).abs() < 0.05 / 12.0, "distortion² {d2}");
    }

    #[test]
    fn dirac_sampler_collapses_to_one_point() {
        let sampler = |_: &mut ChaCha8Rng, out: &mut [f64]| out[0] = 0.3;
        let params = ClvqParams { iterations: 1000, count_samples: 1000, ..Default::default() };
        let grid = clvq_train(sampler, 1, 5, &params, &[], 1).unwrap();
        assert_eq!(grid.len(), 1);
        assert_eq!(grid.points[0], 0.3);
        assert_eq!(grid.weights[0], 1.0);
        assert_eq!(grid.distortion_l2, 0.0);
    }

    #[test]
    fn distortion_rate_scales_as_n_minus_two() {
        // Theorem-rate check in d = 1: log distortion² vs log N has slope −2.
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for &n in &[4usize, 8, 16, 32] {
            let params = ClvqParams { iterations: 300_000, count_samples: 200_000, ..Default::default() };
            let grid = clvq_train(uniform01, 1, n, &params, &[], 7).unwrap();
            let grid = lloyd_refine(&grid, uniform01, 4, 200_000, 7).unwrap();
            xs.push((n as f64).ln());
            ys.push((grid.distortion_l2 * grid.distortion_l2).ln());
        }
        let slope = regress_slope(&xs, &ys);
        assert!((slope + 2.0).abs() < 0.3, "slope {slope}");
    }

    pub(crate) fn regress_slope(xs: &[f64], ys: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        sxy / sxx
    }

    #[test]
    fn lloyd_converges_to_uniform_fixed_point() {
        let grid = WeightedGrid {
            dim: 1,
            points: vec![0.1, 0.2],
            weights: vec![0.5, 0.5],
            distortion_l2: 0.0,
            pinned: 0,
            seed: 0,
        };
        let refined = lloyd_refine(&grid, uniform01, 30, 200_000, 5).unwrap();
        let mut pts = refined.points.clone();
        pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((pts[0] - 0.25).abs() < 0.02, "{pts:?}");
        assert!((pts[1] - 0.75).abs() < 0.02, "{pts:?}");
    }

    #[test]
    fn lloyd_zero_rounds_is_identity() {
        let grid = WeightedGrid {
            dim: 1,
            points: vec![0.1, 0.9],
            weights: vec![0.4, 0.6],
            distortion_l2: 0.25,
            pinned: 0,
            seed: 3,
        };
        let same = lloyd_refine(&grid, uniform01, 0, 1000, 9).unwrap();
        assert_eq!(same.points, grid.points);
        assert_eq!(same.weights, grid.weights);
        assert_eq!(same.distortion_l2, grid.distortion_l2);
    }

    #[test]
    fn project_tie_breaks_low_index() {
        let grid = WeightedGrid {
            dim: 1,
            points: vec![0.0, 1.0],
            weights: vec![0.5, 0.5],
            distortion_l2: 0.0,
            pinned: 0,
            seed: 0,
        };
        assert_eq!(project(&grid, &[0.4]).unwrap(), 0);
        assert_eq!(project(&grid, &[0.5]).unwrap(), 0);
        assert_eq!(project(&grid, &[1.0]).unwrap(), 1);
        assert!(project(&grid, &[0.5, 0.5]).is_err());
    }

    #[test]
    fn projection_is_idempotent_on_grid_points() {
        let mut rng = seeded_rng(19);
        let points: Vec<f64> = (0..60).map(|_| rng.random::<f64>()).collect();
        let grid = WeightedGrid {
            dim: 3,
            points,
            weights: vec![1.0 / 20.0; 20],
            distortion_l2: 0.0,
            pinned: 0,
            seed: 0,
        };
        for i in 0..20 {
            assert_eq!(project(&grid, grid.point(i)).unwrap(), i);
        }
    }

    #[test]
    fn distortion_estimate_matches_uniform_second_moment() {
        let grid = WeightedGrid {
            dim: 1,
            points: vec![0.5],
            weights: vec![1.0],
            distortion_l2: 0.0,
            pinned: 0,
            seed: 0,
        };
        let (l2, se) = estimate_distortion(&grid, uniform01, 1_000_000, 13).unwrap();
        assert!((l2 - 1.0 / 12f64.sqrt()).abs() < 0.001, "l2 {l2} se {se}");
        // Constant-distance case: grid {0, 1}, Dirac at 0.5 → exactly 0.5.
        let grid2 = WeightedGrid {
            dim: 1,
            points: vec![0.0, 1.0],
            weights: vec![0.5, 0.5],
            distortion_l2: 0.0,
            pinned: 0,
            seed: 0,
        };
        let dirac = |_: &mut ChaCha8Rng, out: &mut [f64]| out[0] = 0.5;
        let (l2, se) = estimate_distortion(&grid2, dirac, 1000, 13).unwrap();
        assert_eq!(l2, 0.5);
        assert_eq!(se, 0.0);
    }

    #[test]
    fn mixed_measure_pins_heavy_atoms() {
        let uni = MixedMeasure::uniform_box(vec![0.0], vec![1.0]).unwrap();
        let m = MixedMeasure {
            dim: 1,
            atoms: vec![
                Atom { point: vec![-1.0], weight: 0.25 },
                Atom { point: vec![2.0], weight: 0.25 },
            ],
            continuous: vec![ContinuousPart { weight: 0.5, sampler: uni.continuous[0].sampler.clone() }],
        };
        let params = ClvqParams { iterations: 50_000, count_samples: 200_000, ..Default::default() };
        let grid = quantize_measure(&m, 8, &params, Some(&[-1.0]), 21).unwrap();
        assert_eq!(grid.pinned, 2);
        assert_eq!(grid.point(0), &[-1.0]);
        assert_eq!(grid.point(1), &[2.0]);
        // Atom weights recovered by counting.
        assert!((grid.weights[0] - 0.25).abs() < 0.01);
        assert!((grid.weights[1] - 0.25).abs() < 0.01);
        // Free points stay in the continuous support.
        for i in 2..grid.len() {
            assert!((0.0..1.0).contains(&grid.point(i)[0]));
        }
    }

    #[test]
    fn grid_roundtrip_is_exact() {
        let mut rng = seeded_rng(5);
        let grid = WeightedGrid {
            dim: 3,
            points: (0..30).map(|_| rng.random::<f64>()).collect(),
            weights: {
                let raw: Vec<f64> = (0..10).map(|_| rng.random::<f64>()).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|x| x / s).collect()
            },
            distortion_l2: 0.123,
            pinned: 2,
            seed: 99,
        };
        let mut buf = Vec::new();
        grid.save(&mut buf).unwrap();
        let back = WeightedGrid::load(&mut buf.as_slice()).unwrap();
        assert_eq!(back.dim, grid.dim);
        assert_eq!(back.pinned, 2);
        assert_eq!(back.seed, 99);
        for (a, b) in grid.points.iter().zip(&back.points) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in grid.weights.iter().zip(&back.weights) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
