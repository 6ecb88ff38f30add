//! Batch front end: TOML config, stage subcommands, sweeps and
//! machine-readable output.
//!
//! Output determinism is part of the contract: a config and a seed fully
//! determine every output byte. Timing columns are therefore written as
//! 0.000 unless `--timings` is passed (real timings always go to the log on
//! stderr). CSV column order is fixed for golden-file diffing:
//! `N,M,n_paths,seed,value,epsilon_n,stage1_bound,stage2_bound,total_bound,runtime_s`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::PathEnsemble;
use crate::finite::FiniteHmm;
use crate::model::StoppingModel;
use crate::pipeline::{
    self, run_pipeline, stage_seeds, PipelineParams, RunRecord, StageTimings,
};
use crate::quantize::{ClvqParams, WeightedGrid};
use crate::rng::derive_pair_seed;
use crate::watertank::{build_watertank, WaterTankParams};

// ── Config ───────────────────────────────────────────────────────────────

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub quantize: QuantizeConfig,
    #[serde(default)]
    pub run: RunSection,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// "watertank" or "finite-hmm".
    pub preset: String,
    // Water-tank overrides.
    pub capacity: Option<f64>,
    pub target: Option<f64>,
    pub inflow_rate: Option<f64>,
    pub noise_sigma: Option<f64>,
    pub horizon: Option<usize>,
    /// Bundled finite model name ("two-state", "three-state", "three-obs").
    pub name: Option<String>,
    // Inline finite model.
    pub hidden_labels: Option<Vec<f64>>,
    pub obs_labels: Option<Vec<f64>>,
    pub lambda_weights: Option<Vec<f64>>,
    pub nu_weights: Option<Vec<f64>>,
    pub trans: Option<Vec<Vec<f64>>>,
    pub emit: Option<Vec<Vec<f64>>>,
    pub reward: Option<Vec<Vec<f64>>>,
    pub init_hidden: Option<usize>,
    pub init_obs: Option<usize>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizeConfig {
    pub n_hidden: usize,
    pub m_points: usize,
    pub n_paths: usize,
    pub n_error_paths: usize,
    pub clvq_step_a: f64,
    pub clvq_step_b: f64,
    pub measure_iterations: usize,
    pub measure_count_samples: usize,
    pub measure_lloyd_rounds: usize,
    /// 0 means one CLVQ epoch over the simulated paths.
    pub chain_iterations: usize,
    pub chain_lloyd_rounds: usize,
}

impl Default for QuantizeConfig {
    fn default() -> Self {
        QuantizeConfig {
            n_hidden: 12,
            m_points: 125,
            n_paths: 100_000,
            n_error_paths: 20_000,
            clvq_step_a: 1.0,
            clvq_step_b: 100.0,
            measure_iterations: 200_000,
            measure_count_samples: 200_000,
            measure_lloyd_rounds: 4,
            chain_iterations: 0,
            chain_lloyd_rounds: 2,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    /// "csv" or "json".
    pub format: String,
    pub output: Option<String>,
    pub sweep_n: Vec<usize>,
    pub sweep_m: Vec<usize>,
    pub jobs: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 1,
            format: "csv".into(),
            output: None,
            sweep_n: Vec::new(),
            sweep_m: Vec::new(),
            jobs: 0,
        }
    }
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let q = &self.quantize;
        if q.n_hidden == 0 || q.m_points == 0 || q.n_paths == 0 {
            return Err(Error::Config("n_hidden, m_points and n_paths must be ≥ 1".into()));
        }
        if self.run.format != "csv" && self.run.format != "json" {
            return Err(Error::Config(format!("unknown output format {}", self.run.format)));
        }
        if self.model.preset != "watertank" && self.model.preset != "finite-hmm" {
            return Err(Error::Config(format!("unknown model preset {}", self.model.preset)));
        }
        Ok(())
    }

    pub fn build_model(&self) -> Result<StoppingModel> {
        let m = &self.model;
        match m.preset.as_str() {
            "watertank" => {
                let d = WaterTankParams::default();
                let params = WaterTankParams {
                    capacity: m.capacity.unwrap_or(d.capacity),
                    target: m.target.unwrap_or(d.target),
                    inflow_rate: m.inflow_rate.unwrap_or(d.inflow_rate),
                    noise_sigma: m.noise_sigma.unwrap_or(d.noise_sigma),
                    horizon: m.horizon.unwrap_or(d.horizon),
                };
                build_watertank(&params)
            }
            "finite-hmm" => self.build_finite_hmm()?.to_model(),
            other => Err(Error::Config(format!("unknown model preset {other}"))),
        }
    }

    pub fn build_finite_hmm(&self) -> Result<FiniteHmm> {
        let m = &self.model;
        if let Some(name) = &m.name {
            let mut hmm = match name.as_str() {
                "two-state" => FiniteHmm::two_state_example(),
                "three-state" => FiniteHmm::three_state_example(),
                "three-obs" => FiniteHmm::three_obs_example(),
                other => return Err(Error::Config(format!("unknown bundled model {other}"))),
            };
            if let Some(h) = m.horizon {
                hmm.horizon = h;
            }
            return Ok(hmm);
        }
        let need = |name: &str| Error::Config(format!("finite-hmm config missing `{name}`"));
        Ok(FiniteHmm {
            hidden_labels: m.hidden_labels.clone().ok_or_else(|| need("hidden_labels"))?,
            obs_labels: m.obs_labels.clone().ok_or_else(|| need("obs_labels"))?,
            lambda_weights: m.lambda_weights.clone().ok_or_else(|| need("lambda_weights"))?,
            nu_weights: m.nu_weights.clone().ok_or_else(|| need("nu_weights"))?,
            trans: m.trans.clone().ok_or_else(|| need("trans"))?,
            emit: m.emit.clone().ok_or_else(|| need("emit"))?,
            reward: m.reward.clone().ok_or_else(|| need("reward"))?,
            horizon: m.horizon.unwrap_or(3),
            init_hidden: m.init_hidden.unwrap_or(0),
            init_obs: m.init_obs.unwrap_or(0),
        })
    }

    /// Pipeline knobs for one (N, M) pair; the pair seed is derived from the
    /// master seed so sweep cells are independent of sweep shape.
    pub fn pipeline_params(&self, n: usize, m: usize, master_seed: u64) -> PipelineParams {
        let q = &self.quantize;
        PipelineParams {
            n_hidden: n,
            m_points: m,
            n_paths: q.n_paths,
            n_error_paths: q.n_error_paths,
            measure_clvq: ClvqParams {
                step_a: q.clvq_step_a,
                step_b: q.clvq_step_b,
                iterations: q.measure_iterations,
                count_samples: q.measure_count_samples,
            },
            measure_lloyd_rounds: q.measure_lloyd_rounds,
            chain: crate::chain::ChainQuantParams {
                clvq: ClvqParams {
                    step_a: q.clvq_step_a,
                    step_b: q.clvq_step_b,
                    iterations: if q.chain_iterations == 0 {
                        q.n_paths
                    } else {
                        q.chain_iterations
                    },
                    count_samples: 0,
                },
                lloyd_rounds: q.chain_lloyd_rounds,
            },
            seed: derive_pair_seed(master_seed, n, m),
        }
    }

    /// The sweep cells: cartesian product of the sweep lists, or the single
    /// configured pair.
    pub fn cells(&self) -> Vec<(usize, usize)> {
        let ns = if self.run.sweep_n.is_empty() {
            vec![self.quantize.n_hidden]
        } else {
            self.run.sweep_n.clone()
        };
        let ms = if self.run.sweep_m.is_empty() {
            vec![self.quantize.m_points]
        } else {
            self.run.sweep_m.clone()
        };
        let mut out = Vec::new();
        for &n in &ns {
            for &m in &ms {
                out.push((n, m));
            }
        }
        out
    }

    pub fn config_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let canon = toml::to_string(self).unwrap_or_default();
        let mut h = Sha256::new();
        h.update(canon.as_bytes());
        let digest = h.finalize();
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

// ── Output formatting ────────────────────────────────────────────────────

/// Renders a bound value: plain scientific when finite, reconstructed from
/// log10 when the f64 overflowed.
pub fn fmt_bound(value: f64, log10: f64) -> String {
    if value.is_finite() {
        format!("{value:.6e}")
    } else if log10.is_finite() {
        let exp10 = log10.floor();
        let mant = 10f64.powf(log10 - exp10);
        format!("{mant:.4}e{exp10:+}")
    } else {
        "0.000000e0".to_string()
    }
}

pub const CSV_HEADER: &str =
    "N,M,n_paths,seed,value,epsilon_n,stage1_bound,stage2_bound,total_bound,runtime_s";

pub fn csv_row(r: &RunRecord, timings: bool) -> String {
    let runtime = if timings { r.timings.total_s } else { 0.0 };
    format!(
        "{},{},{},{},{:.6},{:.6e},{},{},{},{:.3}",
        r.n_hidden,
        r.m_points,
        r.n_paths,
        r.seed,
        r.value_at_origin,
        r.epsilon_n,
        fmt_bound(r.report.stage1, r.report.stage1_log10),
        fmt_bound(r.report.stage2, r.report.stage2_log10),
        fmt_bound(r.report.total, r.report.total_log10),
        runtime
    )
}

fn render_records(cfg: &RunConfig, records: &[RunRecord], timings: bool) -> String {
    if cfg.run.format == "json" {
        let cleaned: Vec<RunRecord> = records
            .iter()
            .map(|r| {
                let mut r = r.clone();
                if !timings {
                    r.timings = StageTimings::default();
                }
                r
            })
            .collect();
        let mut s = serde_json::to_string_pretty(&cleaned).unwrap();
        s.push('\n');
        return s;
    }
    let mut out = String::new();
    out.push_str(&format!("# qstop {}\n", env!("CARGO_PKG_VERSION")));
    out.push_str(&format!("# config_hash: {}\n", cfg.config_hash()));
    out.push_str(&format!("# model: {}\n", cfg.model.preset));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&csv_row(r, timings));
        out.push('\n');
    }
    out
}

fn write_output(path: Option<&Path>, content: &str) -> Result<()> {
    match path {
        Some(p) => {
            fs::write(p, content)?;
            Ok(())
        }
        None => {
            std::io::stdout().write_all(content.as_bytes())?;
            Ok(())
        }
    }
}

// ── Subcommand implementations ───────────────────────────────────────────

/// `run` / `table`: execute each sweep cell; failures skip the cell and the
/// exit is nonzero with a partial output.
pub fn cmd_run(
    cfg: &RunConfig,
    out_path: Option<&Path>,
    timings: bool,
) -> Result<(String, usize)> {
    let model = cfg.build_model()?;
    let mut records = Vec::new();
    let mut failures = 0usize;
    for (n, m) in cfg.cells() {
        let params = cfg.pipeline_params(n, m, cfg.run.seed);
        match run_pipeline(&model, &params) {
            Ok((record, _)) => {
                log::info!(
                    "cell N={n} M={m}: value {:.6} in {:.1}s",
                    record.value_at_origin,
                    record.timings.total_s
                );
                records.push(record);
            }
            Err(e) => {
                log::error!("cell N={n} M={m} failed: {e}");
                failures += 1;
            }
        }
    }
    let content = render_records(cfg, &records, timings);
    write_output(out_path, &content)?;
    Ok((content, failures))
}

/// `quantize-measure`: reference grid artifact.
pub fn cmd_quantize_measure(cfg: &RunConfig, out: &Path) -> Result<()> {
    let model = cfg.build_model()?;
    let (n, m) = cfg.cells()[0];
    let params = cfg.pipeline_params(n, m, cfg.run.seed);
    let seeds = stage_seeds(params.seed);
    let grid = pipeline::quantize_lambda(&model, &params, seeds.lambda)?;
    let mut f = fs::File::create(out)?;
    grid.save(&mut f)?;
    log::info!("grid: {} points, distortion {:.4e}", grid.len(), grid.distortion_l2);
    Ok(())
}

fn load_grid(path: &Path, stage: &str) -> Result<WeightedGrid> {
    let mut f = fs::File::open(path).map_err(|_| Error::MissingArtifact {
        stage: stage.into(),
        path: path.display().to_string(),
    })?;
    WeightedGrid::load(&mut f)
}

/// `simulate`: path-ensemble artifact from a grid artifact.
pub fn cmd_simulate(cfg: &RunConfig, grid_path: &Path, out: &Path) -> Result<()> {
    let model = cfg.build_model()?;
    let (n, m) = cfg.cells()[0];
    let params = cfg.pipeline_params(n, m, cfg.run.seed);
    let seeds = stage_seeds(params.seed);
    let grid = load_grid(grid_path, "quantize-measure")?;
    let ensemble = pipeline::simulate(&model, &grid, params.n_paths, seeds.paths)?;
    let mut f = fs::File::create(out)?;
    ensemble.save(&mut f)?;
    Ok(())
}

/// Everything `bounds` needs from a solved run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolvedRun {
    pub n_hidden: usize,
    pub n_lambda_points: usize,
    pub m_points: usize,
    pub n_paths: usize,
    pub seed: u64,
    pub horizon: usize,
    pub value_at_origin: f64,
    pub epsilon_n: f64,
    pub epsilon_n_se: f64,
    pub chain_errors: Vec<(f64, f64)>,
    pub r_sup: f64,
    pub r_lip: f64,
    pub delta: f64,
    pub h_sup: f64,
    pub h_lip: f64,
}

/// `solve`: chain quantization + DP from grid and ensemble artifacts.
pub fn cmd_solve(
    cfg: &RunConfig,
    grid_path: &Path,
    paths_path: &Path,
    out: &Path,
    chain_out: Option<&Path>,
    table_out: Option<&Path>,
) -> Result<()> {
    let model = cfg.build_model()?;
    let (n, m) = cfg.cells()[0];
    let params = cfg.pipeline_params(n, m, cfg.run.seed);
    let seeds = stage_seeds(params.seed);
    let grid = load_grid(grid_path, "quantize-measure")?;
    let mut f = fs::File::open(paths_path).map_err(|_| Error::MissingArtifact {
        stage: "simulate".into(),
        path: paths_path.display().to_string(),
    })?;
    let ensemble = PathEnsemble::load(&mut f)?;

    let (epsilon_n, epsilon_n_se) = pipeline::measure_epsilon(
        &model,
        &grid,
        params.measure_clvq.count_samples.max(2),
        seeds.epsilon,
    )?;
    let n_paths = ensemble.n_paths;
    let chain = crate::chain::quantize_chain(&ensemble, params.m_points, &params.chain, seeds.chain)?;
    drop(ensemble);
    let fresh = pipeline::simulate(&model, &grid, params.n_error_paths, seeds.errors)?;
    let chain_errors = crate::chain::chain_quant_errors(&chain, &fresh)?;
    drop(fresh);
    let table = crate::dp::solve(&model, &grid, &chain)?;

    let solved = SolvedRun {
        n_hidden: params.n_hidden,
        n_lambda_points: grid.len(),
        m_points: params.m_points,
        n_paths,
        seed: params.seed,
        horizon: model.horizon,
        value_at_origin: table.value_at_origin,
        epsilon_n,
        epsilon_n_se,
        chain_errors,
        r_sup: model.r_sup,
        r_lip: model.r_lip,
        delta: model.delta,
        h_sup: model.h_sup,
        h_lip: model.h_lip,
    };
    let mut s = serde_json::to_string_pretty(&solved)
        .map_err(|e| Error::Format(format!("serialize solved run: {e}")))?;
    s.push('\n');
    fs::write(out, s)?;
    if let Some(p) = chain_out {
        let mut f = fs::File::create(p)?;
        chain.save(&mut f)?;
    }
    if let Some(p) = table_out {
        let mut f = fs::File::create(p)?;
        table.write_table(&mut f)?;
    }
    Ok(())
}

/// `bounds`: the error report of a solved run.
pub fn cmd_bounds(solved_path: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(solved_path).map_err(|_| Error::MissingArtifact {
        stage: "solve".into(),
        path: solved_path.display().to_string(),
    })?;
    let solved: SolvedRun =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("solved run parse: {e}")))?;
    let report = crate::bounds::build_report(
        solved.n_lambda_points,
        solved.horizon,
        solved.r_sup,
        solved.r_lip,
        solved.delta,
        solved.h_sup,
        solved.h_lip,
        solved.epsilon_n,
        solved.epsilon_n_se,
        &solved.chain_errors,
    );
    let mut s = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Format(format!("serialize report: {e}")))?;
    s.push('\n');
    fs::write(out, s)?;
    Ok(())
}

/// Process exit code for an error, per the documented contract.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 1,
        Error::Io(_) | Error::Format(_) => 3,
        _ => 2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINI: &str = r#"
[model]
preset = "watertank"
horizon = 2

[quantize]
n_hidden = 6
m_points = 10
n_paths = 300
n_error_paths = 100
measure_iterations = 5000
measure_count_samples = 5000
measure_lloyd_rounds = 1

[run]
seed = 7
"#;

    #[test]
    fn config_parses_and_validates() {
        let cfg: RunConfig = toml::from_str(MINI).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.quantize.n_hidden, 6);
        assert_eq!(cfg.run.seed, 7);
        assert_eq!(cfg.cells(), vec![(6, 10)]);
        assert_eq!(cfg.run.format, "csv");
        assert!(!cfg.config_hash().is_empty());
    }

    #[test]
    fn bad_configs_are_config_errors() {
        let bad = MINI.replace("preset = \"watertank\"", "preset = \"nope\"");
        let cfg: RunConfig = toml::from_str(&bad).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let bad = MINI.replace("n_hidden = 6", "n_hidden = 0");
        let cfg: RunConfig = toml::from_str(&bad).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        // Unknown keys rejected.
        assert!(toml::from_str::<RunConfig>(&format!("{MINI}\nnot_a_key = 1")).is_err());
    }

    #[test]
    fn sweep_cells_are_cartesian_in_order() {
        let mut cfg: RunConfig = toml::from_str(MINI).unwrap();
        cfg.run.sweep_n = vec![12, 25];
        cfg.run.sweep_m = vec![125, 250];
        assert_eq!(cfg.cells(), vec![(12, 125), (12, 250), (25, 125), (25, 250)]);
    }

    #[test]
    fn bound_formatting_is_deterministic() {
        assert_eq!(fmt_bound(1.5, 1.5f64.log10()), "1.500000e0");
        let s = fmt_bound(f64::INFINITY, 499.3145);
        assert!(s.starts_with("2.0") && s.ends_with("e+499"), "{s}");
        assert_eq!(fmt_bound(0.0, f64::NEG_INFINITY), "0.000000e0");
    }

    #[test]
    fn finite_hmm_config_builds() {
        let cfg: RunConfig = toml::from_str(
            r#"
[model]
preset = "finite-hmm"
name = "two-state"
"#,
        )
        .unwrap();
        let model = cfg.build_model().unwrap();
        assert_eq!(model.dim_x, 1);
        assert_eq!(model.horizon, 3);
    }
}
