//! End-to-end orchestration: quantize the reference measure, simulate the
//! filter chain, quantize the chain, run the backward DP, evaluate the
//! bounds.
//!
//! Every stage draws its randomness from a seed derived from the run seed
//! and a stage tag, so running the stages separately (the CLI's staged
//! subcommands) produces bit-identical artifacts to the end-to-end run.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bounds::{build_report, ErrorReport};
use crate::chain::{chain_quant_errors, quantize_chain, ChainQuantParams, QuantizedChain};
use crate::dp::{solve, ValueTable};
use crate::error::Result;
use crate::filter::{FilterChain, PathEnsemble};
use crate::model::StoppingModel;
use crate::quantize::{estimate_distortion, lloyd_refine, quantize_measure, ClvqParams, WeightedGrid};
use crate::rng::derive_seed;

/// Numeric knobs of one pipeline run.
#[derive(Clone, Debug)]
pub struct PipelineParams {
    pub n_hidden: usize,
    pub m_points: usize,
    pub n_paths: usize,
    pub n_error_paths: usize,
    pub measure_clvq: ClvqParams,
    pub measure_lloyd_rounds: usize,
    pub chain: ChainQuantParams,
    pub seed: u64,
}

impl PipelineParams {
    /// Defaults scaled to the run size: one CLVQ epoch over the ensemble per
    /// chain grid, measure training with a fixed budget.
    pub fn new(n_hidden: usize, m_points: usize, n_paths: usize, seed: u64) -> Self {
        PipelineParams {
            n_hidden,
            m_points,
            n_paths,
            n_error_paths: (n_paths / 5).clamp(2_000, 50_000),
            measure_clvq: ClvqParams {
                iterations: 200_000,
                count_samples: 200_000,
                ..Default::default()
            },
            measure_lloyd_rounds: 4,
            chain: ChainQuantParams {
                clvq: ClvqParams { iterations: n_paths, ..Default::default() },
                lloyd_rounds: 2,
            },
            seed,
        }
    }
}

/// Per-stage seeds derived from the run seed.
#[derive(Clone, Copy, Debug)]
pub struct StageSeeds {
    pub lambda: u64,
    pub epsilon: u64,
    pub paths: u64,
    pub chain: u64,
    pub errors: u64,
}

pub fn stage_seeds(run_seed: u64) -> StageSeeds {
    StageSeeds {
        lambda: derive_seed(run_seed, "lambda"),
        epsilon: derive_seed(run_seed, "epsilon"),
        paths: derive_seed(run_seed, "paths"),
        chain: derive_seed(run_seed, "chain"),
        errors: derive_seed(run_seed, "errors"),
    }
}

/// Wall-clock seconds per stage.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub quantize_lambda_s: f64,
    pub simulate_s: f64,
    pub quantize_chain_s: f64,
    pub chain_errors_s: f64,
    pub dp_s: f64,
    pub total_s: f64,
}

impl StageTimings {
    pub fn zeroed(&self) -> StageTimings {
        StageTimings::default()
    }
}

/// One output record of the pipeline.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub n_hidden: usize,
    pub m_points: usize,
    pub n_paths: usize,
    pub seed: u64,
    pub value_at_origin: f64,
    pub epsilon_n: f64,
    pub epsilon_n_se: f64,
    pub report: ErrorReport,
    pub timings: StageTimings,
}

/// The intermediate artifacts of a run, for export and diagnostics.
pub struct PipelineArtifacts {
    pub lambda_grid: WeightedGrid,
    pub chain: QuantizedChain,
    pub table: ValueTable,
}

/// Stage 1: quantize the reference measure with the initial hidden point
/// pinned, then polish with Lloyd rounds over the full measure.
pub fn quantize_lambda(
    model: &StoppingModel,
    params: &PipelineParams,
    seed: u64,
) -> Result<WeightedGrid> {
    let grid = quantize_measure(
        &model.lambda,
        params.n_hidden,
        &params.measure_clvq,
        Some(&model.initial_x),
        seed,
    )?;
    if params.measure_lloyd_rounds == 0 {
        return Ok(grid);
    }
    let lambda = model.lambda.clone();
    lloyd_refine(
        &grid,
        move |rng, out| lambda.sample_into(rng, out),
        params.measure_lloyd_rounds,
        params.measure_clvq.count_samples.max(1),
        seed,
    )
}

/// Measured ε_N (with standard error) of a reference grid.
pub fn measure_epsilon(
    model: &StoppingModel,
    grid: &WeightedGrid,
    n_samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let lambda = model.lambda.clone();
    estimate_distortion(grid, move |rng, out| lambda.sample_into(rng, out), n_samples, seed)
}

/// Stage 2: simulate the filter–observation chain.
pub fn simulate(
    model: &StoppingModel,
    grid: &WeightedGrid,
    n_paths: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    FilterChain::new(model, grid)?.simulate_paths(n_paths, seed)
}

/// Full pipeline; returns the record and the artifacts.
pub fn run_pipeline(
    model: &StoppingModel,
    params: &PipelineParams,
) -> Result<(RunRecord, PipelineArtifacts)> {
    model.validate()?;
    let seeds = stage_seeds(params.seed);
    let t_start = Instant::now();

    let t0 = Instant::now();
    let lambda_grid = quantize_lambda(model, params, seeds.lambda)?;
    let (epsilon_n, epsilon_n_se) =
        measure_epsilon(model, &lambda_grid, params.measure_clvq.count_samples.max(2), seeds.epsilon)?;
    let quantize_lambda_s = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let ensemble = simulate(model, &lambda_grid, params.n_paths, seeds.paths)?;
    let simulate_s = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let chain = quantize_chain(&ensemble, params.m_points, &params.chain, seeds.chain)?;
    drop(ensemble);
    let quantize_chain_s = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let fresh = simulate(model, &lambda_grid, params.n_error_paths, seeds.errors)?;
    let chain_errors = chain_quant_errors(&chain, &fresh)?;
    drop(fresh);
    let chain_errors_s = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let table = solve(model, &lambda_grid, &chain)?;
    let dp_s = t0.elapsed().as_secs_f64();

    let report = build_report(
        lambda_grid.len(),
        model.horizon,
        model.r_sup,
        model.r_lip,
        model.delta,
        model.h_sup,
        model.h_lip,
        epsilon_n,
        epsilon_n_se,
        &chain_errors,
    );

    let record = RunRecord {
        n_hidden: params.n_hidden,
        m_points: params.m_points,
        n_paths: params.n_paths,
        seed: params.seed,
        value_at_origin: table.value_at_origin,
        epsilon_n,
        epsilon_n_se,
        report,
        timings: StageTimings {
            quantize_lambda_s,
            simulate_s,
            quantize_chain_s,
            chain_errors_s,
            dp_s,
            total_s: t_start.elapsed().as_secs_f64(),
        },
    };
    Ok((record, PipelineArtifacts { lambda_grid, chain, table }))
}
