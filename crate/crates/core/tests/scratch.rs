use qstop::dp::solve;
use qstop::filter::FilterChain;
use qstop::finite::{oracle_value_finite, FiniteHmm};
use qstop::pipeline::{quantize_lambda, stage_seeds, PipelineParams};
use qstop::rng::path_rng;
use qstop::watertank::{build_watertank, WaterTankParams};

#[test]
#[ignore]
fn probe_lambda_grid() {
    let model = build_watertank(&WaterTankParams::default()).unwrap();
    let params = PipelineParams::new(12, 125, 100_000, 1);
    let seeds = stage_seeds(params.seed);
    let grid = quantize_lambda(&model, &params, seeds.lambda).unwrap();
    let mut interior: Vec<f64> = (0..grid.len())
        .filter(|&i| grid.point(i)[1] == 0.0)
        .map(|i| grid.point(i)[0])
        .collect();
    interior.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!("interior points: {interior:?}");
    println!("weights: {:?}", grid.weights);
    println!("distortion: {}", grid.distortion_l2);
}

/// Direct Monte-Carlo value of a simple threshold policy on the
/// *un-quantized* chain: a lower bound on the optimum that bypasses the
/// chain quantization and DP entirely.
#[test]
#[ignore]
fn probe_threshold_policy_value() {
    let model = build_watertank(&WaterTankParams::default()).unwrap();
    let params = PipelineParams::new(12, 125, 100_000, 1);
    let seeds = stage_seeds(params.seed);
    let grid = quantize_lambda(&model, &params, seeds.lambda).unwrap();
    let fc = FilterChain::new(&model, &grid).unwrap();
    for threshold in [0.90, 0.93, 0.95, 0.97] {
        let n_paths = 20_000;
        let mut total = 0.0;
        for p in 0..n_paths {
            let mut rng = path_rng(seeds.paths, p as u64);
            let mut state = fc.initial_state().unwrap();
            let mut reward =
                model.eval_performance_ext(&grid, &state.gamma, &state.y).unwrap();
            let mut stopped = reward >= threshold;
            for _ in 0..model.horizon {
                if stopped {
                    break;
                }
                state = fc.step(&state, &mut rng).unwrap();
                reward = model.eval_performance_ext(&grid, &state.gamma, &state.y).unwrap();
                if reward >= threshold {
                    stopped = true;
                }
            }
            total += reward;
        }
        println!("threshold {threshold}: value {}", total / n_paths as f64);
    }
}

/// E[max_t H(ψ_t)] — the anticipating upper bound on the chain value.
#[test]
#[ignore]
fn probe_pathwise_max_reward() {
    let model = build_watertank(&WaterTankParams::default()).unwrap();
    for n_hidden in [12usize, 25] {
        let params = PipelineParams::new(n_hidden, 125, 100_000, 1);
        let seeds = stage_seeds(params.seed);
        let grid = quantize_lambda(&model, &params, seeds.lambda).unwrap();
        let fc = FilterChain::new(&model, &grid).unwrap();
        let n_paths = 20_000;
        let mut total = 0.0;
        let mut total_truth = 0.0;
        for p in 0..n_paths {
            let mut rng = path_rng(seeds.paths, p as u64);
            let mut state = fc.initial_state().unwrap();
            let mut best = model.eval_performance_ext(&grid, &state.gamma, &state.y).unwrap();
            for _ in 0..model.horizon {
                state = fc.step(&state, &mut rng).unwrap();
                let r = model.eval_performance_ext(&grid, &state.gamma, &state.y).unwrap();
                if r > best {
                    best = r;
                }
            }
            total += best;
            // Independent benchmark: pathwise max reward of the *truth*
            // dynamics (perfect information), same RNG budget.
            let mut rng2 = path_rng(seeds.errors, p as u64);
            let truth = qstop::watertank::simulate_truth(
                &WaterTankParams::default(),
                model.horizon,
                &mut rng2,
            );
            let best_truth = truth
                .iter()
                .map(|&(x1, _, _)| 1.0 - (x1 - 0.5).abs())
                .fold(f64::NEG_INFINITY, f64::max);
            total_truth += best_truth;
        }
        println!(
            "N={n_hidden}: E[max_t H(psi_t)] = {:.4}, truth E[max_t H(X_t)] = {:.4}",
            total / n_paths as f64,
            total_truth / n_paths as f64
        );
    }
}

#[test]
#[ignore]
fn probe_oracle_vs_dp() {
    for (name, hmm) in [
        ("two-state", FiniteHmm::two_state_example()),
        ("three-state", FiniteHmm::three_state_example()),
        ("three-obs", FiniteHmm::three_obs_example()),
    ] {
        let oracle = oracle_value_finite(&hmm).unwrap();
        let model = hmm.to_model().unwrap();
        let grid = hmm.lambda_grid();
        let chain = hmm.exact_chain().unwrap();
        let table = solve(&model, &grid, &chain).unwrap();
        println!(
            "{name}: oracle {oracle:.12} dp {:.12} diff {:.2e}",
            table.value_at_origin,
            (oracle - table.value_at_origin).abs()
        );
    }
}
