//! Marginal quantization of the filter–observation chain.
//!
//! Each time slice `t` of a simulated ensemble is quantized by CLVQ (plus
//! Lloyd rounds) into a grid in ℝ^{N+n}; transition matrices are empirical:
//!
//! ```text
//!   P_t[i][j] = #{paths with proj_t = i and proj_{t+1} = j} / #{proj_t = i}
//! ```
//!
//! Rows that no path visits become flagged self-loops — they carry zero
//! weight but must stay row-stochastic so the backward recursion never sees
//! a NaN. The t = 0 grid is the single deterministic initial state. Grid
//! weights equal the cell frequencies of the projection pass exactly (they
//! are the same computation), and the γ-block of every grid point is
//! projected back onto the simplex after training.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::filter::{project_to_simplex, PathEnsemble};
use crate::nn::NnIndex;
use crate::quantize::{clvq_train, lloyd_refine, ClvqParams, WeightedGrid};
use crate::rng::derive_seed;

/// Sparse row-stochastic matrix (CSR). Dense storage is hopeless at
/// M = 10^4 (10^8 entries per time step); the empirical matrices have at
/// most one nonzero per observed transition pair.
#[derive(Clone, Debug)]
pub struct RowStochastic {
    pub n_rows: usize,
    pub n_cols: usize,
    row_ptr: Vec<u32>,
    cols: Vec<u32>,
    vals: Vec<f64>,
    /// Rows that received no visits and were patched to self-loops.
    pub self_loop_rows: Vec<u32>,
}

impl RowStochastic {
    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let lo = self.row_ptr[i] as usize;
        let hi = self.row_ptr[i + 1] as usize;
        (&self.cols[lo..hi], &self.vals[lo..hi])
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.row(i).1.iter().sum()
    }

    /// `out[i] = Σ_j P[i][j]·next[j]`.
    pub fn expectation_into(&self, next: &[f64], out: &mut [f64]) {
        debug_assert_eq!(next.len(), self.n_cols);
        debug_assert_eq!(out.len(), self.n_rows);
        for i in 0..self.n_rows {
            let (cols, vals) = self.row(i);
            let mut acc = 0.0;
            for (c, v) in cols.iter().zip(vals) {
                acc += v * next[*c as usize];
            }
            out[i] = acc;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.row_ptr.len() != self.n_rows + 1 {
            return Err(Error::Format("bad row_ptr length".into()));
        }
        for i in 0..self.n_rows {
            let (cols, vals) = self.row(i);
            if cols.iter().any(|&c| c as usize >= self.n_cols) {
                return Err(Error::Format("column index out of range".into()));
            }
            if vals.iter().any(|&v| v < 0.0) {
                return Err(Error::Format("negative transition probability".into()));
            }
            let s: f64 = vals.iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(Error::Format(format!("row {i} sums to {s}")));
            }
        }
        Ok(())
    }

    /// Builds from dense rows (exact probabilities; zeros dropped).
    pub fn from_dense(rows: &[Vec<f64>], n_cols: usize) -> RowStochastic {
        let n_rows = rows.len();
        let mut row_ptr = vec![0u32; n_rows + 1];
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for (i, r) in rows.iter().enumerate() {
            for (j, &v) in r.iter().enumerate() {
                if v != 0.0 {
                    cols.push(j as u32);
                    vals.push(v);
                }
            }
            row_ptr[i + 1] = cols.len() as u32;
        }
        RowStochastic { n_rows, n_cols, row_ptr, cols, vals, self_loop_rows: Vec::new() }
    }

    /// Builds from sorted transition pair counts for one time step.
    fn from_pairs(n_rows: usize, n_cols: usize, mut pairs: Vec<(u32, u32)>) -> RowStochastic {
        pairs.sort_unstable();
        let mut row_ptr = vec![0u32; n_rows + 1];
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        let mut row_counts = vec![0u64; n_rows];
        for &(i, _) in &pairs {
            row_counts[i as usize] += 1;
        }
        let mut self_loops = Vec::new();
        let mut k = 0usize;
        for i in 0..n_rows {
            if row_counts[i] == 0 {
                cols.push((i.min(n_cols - 1)) as u32);
                vals.push(1.0);
                self_loops.push(i as u32);
            } else {
                let total = row_counts[i] as f64;
                while k < pairs.len() && pairs[k].0 as usize == i {
                    let j = pairs[k].1;
                    let mut c = 1u64;
                    while k + 1 < pairs.len() && pairs[k + 1] == pairs[k] {
                        c += 1;
                        k += 1;
                    }
                    k += 1;
                    cols.push(j);
                    vals.push(c as f64 / total);
                }
            }
            row_ptr[i + 1] = cols.len() as u32;
        }
        RowStochastic { n_rows, n_cols, row_ptr, cols, vals, self_loop_rows: self_loops }
    }

    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_u64::<LittleEndian>(self.n_rows as u64)?;
        w.write_u64::<LittleEndian>(self.n_cols as u64)?;
        w.write_u64::<LittleEndian>(self.cols.len() as u64)?;
        w.write_u64::<LittleEndian>(self.self_loop_rows.len() as u64)?;
        for &p in &self.row_ptr {
            w.write_u32::<LittleEndian>(p)?;
        }
        for &c in &self.cols {
            w.write_u32::<LittleEndian>(c)?;
        }
        for &v in &self.vals {
            w.write_f64::<LittleEndian>(v)?;
        }
        for &r in &self.self_loop_rows {
            w.write_u32::<LittleEndian>(r)?;
        }
        Ok(())
    }

    pub fn load<R: Read>(r: &mut R) -> Result<Self> {
        let n_rows = r.read_u64::<LittleEndian>()? as usize;
        let n_cols = r.read_u64::<LittleEndian>()? as usize;
        let nnz = r.read_u64::<LittleEndian>()? as usize;
        let n_loops = r.read_u64::<LittleEndian>()? as usize;
        let mut row_ptr = vec![0u32; n_rows + 1];
        for p in row_ptr.iter_mut() {
            *p = r.read_u32::<LittleEndian>()?;
        }
        let mut cols = vec![0u32; nnz];
        for c in cols.iter_mut() {
            *c = r.read_u32::<LittleEndian>()?;
        }
        let mut vals = vec![0.0; nnz];
        for v in vals.iter_mut() {
            *v = r.read_f64::<LittleEndian>()?;
        }
        let mut self_loop_rows = vec![0u32; n_loops];
        for v in self_loop_rows.iter_mut() {
            *v = r.read_u32::<LittleEndian>()?;
        }
        Ok(RowStochastic { n_rows, n_cols, row_ptr, cols, vals, self_loop_rows })
    }
}

/// Chain-quantization knobs.
#[derive(Clone, Debug)]
pub struct ChainQuantParams {
    /// CLVQ schedule and budget per time slice; the counting pass is always
    /// the projection pass over the ensemble, so `count_samples` is ignored.
    pub clvq: ClvqParams,
    pub lloyd_rounds: usize,
}

impl Default for ChainQuantParams {
    fn default() -> Self {
        ChainQuantParams { clvq: ClvqParams::default(), lloyd_rounds: 2 }
    }
}

/// Per-time grids, empirical transition matrices and in-sample quantization
/// errors for the chain.
pub struct QuantizedChain {
    pub n_hidden: usize,
    pub dim_y: usize,
    pub horizon: usize,
    pub m_points: usize,
    pub grids: Vec<WeightedGrid>,
    pub transitions: Vec<RowStochastic>,
    /// (L₂ error, standard error) per time, from the training ensemble.
    pub quant_errors: Vec<(f64, f64)>,
    pub n_paths: usize,
    pub seed: u64,
}

impl QuantizedChain {
    pub fn state_dim(&self) -> usize {
        self.n_hidden + self.dim_y
    }

    pub fn validate(&self) -> Result<()> {
        if self.grids.len() != self.horizon + 1 || self.transitions.len() != self.horizon {
            return Err(Error::Format("chain grid/transition counts inconsistent".into()));
        }
        if self.grids[0].len() != 1 || (self.grids[0].weights[0] - 1.0).abs() > 1e-12 {
            return Err(Error::Format("t=0 grid must be the single initial state".into()));
        }
        for (t, g) in self.grids.iter().enumerate() {
            if g.dim != self.state_dim() {
                return Err(Error::DimensionMismatch { expected: self.state_dim(), got: g.dim });
            }
            for i in 0..g.len() {
                let gamma = &g.point(i)[..self.n_hidden];
                let s: f64 = gamma.iter().sum();
                if (s - 1.0).abs() > 1e-9 || gamma.iter().any(|&x| x < -1e-12) {
                    return Err(Error::Format(format!(
                        "grid point off the simplex at t={t}, i={i} (sum {s})"
                    )));
                }
            }
        }
        for (t, p) in self.transitions.iter().enumerate() {
            if p.n_rows != self.grids[t].len() || p.n_cols != self.grids[t + 1].len() {
                return Err(Error::Format(format!("transition {t} shape mismatch")));
            }
            p.validate()?;
        }
        Ok(())
    }

    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(b"QCHN")?;
        w.write_u32::<LittleEndian>(1)?;
        for v in [self.n_hidden, self.dim_y, self.horizon, self.m_points, self.n_paths] {
            w.write_u64::<LittleEndian>(v as u64)?;
        }
        w.write_u64::<LittleEndian>(self.seed)?;
        for g in &self.grids {
            g.save(w)?;
        }
        for p in &self.transitions {
            p.save(w)?;
        }
        for &(e, se) in &self.quant_errors {
            w.write_f64::<LittleEndian>(e)?;
            w.write_f64::<LittleEndian>(se)?;
        }
        Ok(())
    }

    pub fn load<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"QCHN" {
            return Err(Error::Format("not a quantized-chain file".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != 1 {
            return Err(Error::Format(format!("unsupported chain version {version}")));
        }
        let n_hidden = r.read_u64::<LittleEndian>()? as usize;
        let dim_y = r.read_u64::<LittleEndian>()? as usize;
        let horizon = r.read_u64::<LittleEndian>()? as usize;
        let m_points = r.read_u64::<LittleEndian>()? as usize;
        let n_paths = r.read_u64::<LittleEndian>()? as usize;
        let seed = r.read_u64::<LittleEndian>()?;
        let mut grids = Vec::with_capacity(horizon + 1);
        for _ in 0..=horizon {
            grids.push(WeightedGrid::load(r)?);
        }
        let mut transitions = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            transitions.push(RowStochastic::load(r)?);
        }
        let mut quant_errors = Vec::with_capacity(horizon + 1);
        for _ in 0..=horizon {
            let e = r.read_f64::<LittleEndian>()?;
            let se = r.read_f64::<LittleEndian>()?;
            quant_errors.push((e, se));
        }
        Ok(QuantizedChain {
            n_hidden,
            dim_y,
            horizon,
            m_points,
            grids,
            transitions,
            quant_errors,
            n_paths,
            seed,
        })
    }
}

/// Quantizes the chain: trains a grid on every time slice of the ensemble,
/// then counts weights and transition frequencies in one projection pass.
pub fn quantize_chain(
    ensemble: &PathEnsemble,
    m_points: usize,
    params: &ChainQuantParams,
    seed: u64,
) -> Result<QuantizedChain> {
    if ensemble.n_paths == 0 {
        return Err(Error::InsufficientData("empty path ensemble".into()));
    }
    if m_points == 0 {
        return Err(Error::Config("m_points must be at least 1".into()));
    }
    let sd = ensemble.state_dim();
    let horizon = ensemble.horizon;
    let n_paths = ensemble.n_paths;

    // The initial state must be deterministic across paths.
    let first = ensemble.state(0, 0);
    for p in 1..n_paths.min(64) {
        if ensemble.state(p, 0) != first {
            return Err(Error::InsufficientData(
                "paths do not share a deterministic initial state".into(),
            ));
        }
    }
    let mut init_point = vec![0.0f64; sd];
    ensemble.state_f64_into(0, 0, &mut init_point);
    let grid0 = WeightedGrid {
        dim: sd,
        points: init_point,
        weights: vec![1.0],
        distortion_l2: 0.0,
        pinned: 1,
        seed,
    };

    // Train one grid per later time slice (independent, hence parallel).
    let mut grids: Vec<WeightedGrid> = vec![grid0];
    let trained: Vec<Result<WeightedGrid>> = (1..=horizon)
        .into_par_iter()
        .map(|t| {
            let seed_t = derive_seed(seed, &format!("chain-grid-{t}"));
            let sampler = |rng: &mut rand_chacha::ChaCha8Rng, out: &mut [f64]| {
                let p = rng.random_range(0..n_paths);
                ensemble.state_f64_into(p, t, out);
            };
            let mut clvq = params.clvq.clone();
            clvq.count_samples = 0;
            let grid = clvq_train(sampler, sd, m_points, &clvq, &[], seed_t)?;
            let grid = lloyd_refine(&grid, sampler, params.lloyd_rounds, n_paths, seed_t)?;
            Ok(normalize_gamma_blocks(grid, ensemble.n_hidden))
        })
        .collect();
    for g in trained {
        grids.push(g?);
    }

    // Projection pass: assignments for every (path, t).
    let indices: Vec<NnIndex> =
        grids.iter().map(|g| NnIndex::build(&g.points, g.dim)).collect();
    let (assignments, stats) = project_ensemble(ensemble, &indices);

    // Weights = cell frequencies of the pass.
    for (t, grid) in grids.iter_mut().enumerate() {
        let mut counts = vec![0u64; grid.len()];
        for p in 0..n_paths {
            counts[assignments[p * (horizon + 1) + t] as usize] += 1;
        }
        grid.weights = counts.iter().map(|&c| c as f64 / n_paths as f64).collect();
        grid.distortion_l2 = stats[t].0;
    }

    // Transition counts.
    let mut transitions = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let mut pairs = Vec::with_capacity(n_paths);
        for p in 0..n_paths {
            let i = assignments[p * (horizon + 1) + t];
            let j = assignments[p * (horizon + 1) + t + 1];
            pairs.push((i, j));
        }
        let m = RowStochastic::from_pairs(grids[t].len(), grids[t + 1].len(), pairs);
        if !m.self_loop_rows.is_empty() {
            log::warn!(
                "chain: {} unvisited rows at t={} patched to self-loops",
                m.self_loop_rows.len(),
                t
            );
        }
        transitions.push(m);
    }

    let quant_errors = stats;
    let chain = QuantizedChain {
        n_hidden: ensemble.n_hidden,
        dim_y: ensemble.dim_y,
        horizon,
        m_points,
        grids,
        transitions,
        quant_errors,
        n_paths,
        seed,
    };
    chain.validate()?;
    Ok(chain)
}

/// Out-of-sample per-time quantization errors against a fresh ensemble.
pub fn chain_quant_errors(
    chain: &QuantizedChain,
    fresh: &PathEnsemble,
) -> Result<Vec<(f64, f64)>> {
    if fresh.state_dim() != chain.state_dim() || fresh.horizon != chain.horizon {
        return Err(Error::DimensionMismatch {
            expected: chain.state_dim(),
            got: fresh.state_dim(),
        });
    }
    let indices: Vec<NnIndex> =
        chain.grids.iter().map(|g| NnIndex::build(&g.points, g.dim)).collect();
    let (_, stats) = project_ensemble(fresh, &indices);
    Ok(stats)
}

/// Projects every state of the ensemble onto its time grid. Returns the
/// assignment table `[path][t]` and per-time (L₂ error, standard error).
/// Parallel over fixed path blocks folded in order, so results do not depend
/// on the worker count.
fn project_ensemble(
    ensemble: &PathEnsemble,
    indices: &[NnIndex],
) -> (Vec<u32>, Vec<(f64, f64)>) {
    let horizon = ensemble.horizon;
    let n_paths = ensemble.n_paths;
    let per_path = horizon + 1;
    let block = 4096usize;
    let n_blocks = n_paths.div_ceil(block);

    struct BlockOut {
        assign: Vec<u32>,
        sum_d2: Vec<f64>,
        sum_d4: Vec<f64>,
    }

    let blocks: Vec<BlockOut> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let lo = b * block;
            let hi = (lo + block).min(n_paths);
            let mut out = BlockOut {
                assign: Vec::with_capacity((hi - lo) * per_path),
                sum_d2: vec![0.0; per_path],
                sum_d4: vec![0.0; per_path],
            };
            let sd = ensemble.state_dim();
            let mut buf = vec![0.0f64; sd];
            for p in lo..hi {
                for t in 0..per_path {
                    ensemble.state_f64_into(p, t, &mut buf);
                    let (idx, d2) = indices[t].nearest(&buf);
                    out.assign.push(idx as u32);
                    out.sum_d2[t] += d2;
                    out.sum_d4[t] += d2 * d2;
                }
            }
            out
        })
        .collect();

    let mut assignments = Vec::with_capacity(n_paths * per_path);
    let mut sum_d2 = vec![0.0; per_path];
    let mut sum_d4 = vec![0.0; per_path];
    for b in blocks {
        assignments.extend_from_slice(&b.assign);
        for t in 0..per_path {
            sum_d2[t] += b.sum_d2[t];
            sum_d4[t] += b.sum_d4[t];
        }
    }
    let n = n_paths as f64;
    let stats = (0..per_path)
        .map(|t| {
            let mean = sum_d2[t] / n;
            let var = (sum_d4[t] / n - mean * mean).max(0.0);
            let se_mean = (var / n).sqrt();
            let l2 = mean.sqrt();
            let se = if l2 > 0.0 { se_mean / (2.0 * l2) } else { 0.0 };
            (l2, se)
        })
        .collect();
    (assignments, stats)
}

fn normalize_gamma_blocks(mut grid: WeightedGrid, n_hidden: usize) -> WeightedGrid {
    let dim = grid.dim;
    let n = grid.len();
    for i in 0..n {
        let off = i * dim;
        project_to_simplex(&mut grid.points[off..off + n_hidden]);
    }
    grid
}
