//! Finite hidden-Markov oracle models.
//!
//! Small HMMs with finite hidden and observation alphabets serve as exact
//! cross-checks for the whole pipeline:
//!
//! - their reference measures are purely atomic, so the quantized reference
//!   grid is the full support and the approximate Bayes operator coincides
//!   with the exact filter recursion;
//! - the filter chain has finitely many reachable states per time, so the
//!   chain can be enumerated losslessly (exact grids and transition
//!   probabilities, zero quantization error);
//! - the optimal stopping value can be computed by brute force directly from
//!   the weak formulation: enumerate every stopping rule adapted to the
//!   observation filtration on the prefix tree and take the best expected
//!   reward. That enumeration never touches the Bayes operator, the grids or
//!   the DP recursion, so agreement is a real two-route check.

use std::collections::HashMap;
use std::sync::Arc;

use crate::chain::{QuantizedChain, RowStochastic};
use crate::error::{Error, Result};
use crate::measure::MixedMeasure;
use crate::model::{StoppingModel, TransitionDensity};
use crate::quantize::WeightedGrid;

/// Enumerating stopping rules is exponential in the number of decision nodes
/// of the observation-prefix tree; beyond this cap the oracle refuses.
const MAX_DECISION_NODES: usize = 22;

/// A finite hidden-Markov stopping problem. `trans[x][u]` is the hidden
/// transition matrix, `emit[u][v]` the emission matrix (all entries positive
/// so the density lower bound holds), `reward[x][v]` the stopping reward.
/// Hidden states and observations are embedded in ℝ at the given labels.
#[derive(Clone, Debug)]
pub struct FiniteHmm {
    pub hidden_labels: Vec<f64>,
    pub obs_labels: Vec<f64>,
    pub lambda_weights: Vec<f64>,
    pub nu_weights: Vec<f64>,
    pub trans: Vec<Vec<f64>>,
    pub emit: Vec<Vec<f64>>,
    pub reward: Vec<Vec<f64>>,
    pub horizon: usize,
    pub init_hidden: usize,
    pub init_obs: usize,
}

impl FiniteHmm {
    pub fn n_hidden(&self) -> usize {
        self.hidden_labels.len()
    }

    pub fn n_obs(&self) -> usize {
        self.obs_labels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let nx = self.n_hidden();
        let ny = self.n_obs();
        let row_ok = |m: &[Vec<f64>], cols: usize| {
            m.iter().all(|r| {
                r.len() == cols && r.iter().all(|&p| p >= 0.0) && {
                    let s: f64 = r.iter().sum();
                    (s - 1.0).abs() < 1e-12
                }
            })
        };
        if self.trans.len() != nx || !row_ok(&self.trans, nx) {
            return Err(Error::ModelDefinition("bad transition matrix".into()));
        }
        if self.emit.len() != nx || !row_ok(&self.emit, ny) {
            return Err(Error::ModelDefinition("bad emission matrix".into()));
        }
        if self.emit.iter().any(|r| r.iter().any(|&p| p <= 0.0)) {
            return Err(Error::ModelDefinition(
                "emissions must be strictly positive (density lower bound)".into(),
            ));
        }
        if self.reward.len() != nx || self.reward.iter().any(|r| r.len() != ny) {
            return Err(Error::ModelDefinition("bad reward matrix".into()));
        }
        if self.lambda_weights.len() != nx
            || self.nu_weights.len() != ny
            || self.lambda_weights.iter().any(|&w| w <= 0.0)
            || self.nu_weights.iter().any(|&w| w <= 0.0)
        {
            return Err(Error::ModelDefinition("reference weights must be positive".into()));
        }
        if self.init_hidden >= nx || self.init_obs >= ny || self.horizon == 0 {
            return Err(Error::ModelDefinition("bad initial state or horizon".into()));
        }
        Ok(())
    }

    /// Exact one-step filter recursion: `γ'_u ∝ emit[u][v] Σ_x γ_x trans[x][u]`.
    pub fn filter_step(&self, gamma: &[f64], v_idx: usize) -> Vec<f64> {
        let nx = self.n_hidden();
        let mut post = vec![0.0; nx];
        for u in 0..nx {
            let mut pred = 0.0;
            for x in 0..nx {
                pred += gamma[x] * self.trans[x][u];
            }
            post[u] = pred * self.emit[u][v_idx];
        }
        let z: f64 = post.iter().sum();
        for p in post.iter_mut() {
            *p /= z;
        }
        post
    }

    /// P(next observation = v | filter γ).
    pub fn obs_prob(&self, gamma: &[f64], v_idx: usize) -> f64 {
        let nx = self.n_hidden();
        let mut acc = 0.0;
        for u in 0..nx {
            let mut pred = 0.0;
            for x in 0..nx {
                pred += gamma[x] * self.trans[x][u];
            }
            acc += pred * self.emit[u][v_idx];
        }
        acc
    }

    /// The stopping model whose kernel density is this HMM's
    /// transition × emission, normalized against the atomic reference
    /// measures.
    pub fn to_model(&self) -> Result<StoppingModel> {
        self.validate()?;
        let nx = self.n_hidden();
        let ny = self.n_obs();
        let hmm = self.clone();
        let hidden_fn = {
            let hmm = hmm.clone();
            move |u: &[f64], x: &[f64]| {
                let iu = hmm.hidden_index(u[0]);
                let ix = hmm.hidden_index(x[0]);
                hmm.trans[ix][iu] / hmm.lambda_weights[iu]
            }
        };
        let emit_fn = {
            let hmm = hmm.clone();
            move |u: &[f64], v: &[f64]| {
                let iu = hmm.hidden_index(u[0]);
                let iv = hmm.obs_index(v[0]);
                hmm.emit[iu][iv] / hmm.nu_weights[iv]
            }
        };
        let sampler = {
            let hmm = hmm.clone();
            move |u: &[f64], rng: &mut rand_chacha::ChaCha8Rng, out: &mut [f64]| {
                use rand::Rng;
                let iu = hmm.hidden_index(u[0]);
                let mut t = rng.random::<f64>();
                let mut pick = hmm.n_obs() - 1;
                for (v, &p) in hmm.emit[iu].iter().enumerate() {
                    t -= p;
                    if t <= 0.0 {
                        pick = v;
                        break;
                    }
                }
                out[0] = hmm.obs_labels[pick];
            }
        };
        let reward_fn = {
            let hmm = hmm.clone();
            move |x: &[f64], y: &[f64]| {
                hmm.reward[hmm.hidden_index(x[0])][hmm.obs_index(y[0])]
            }
        };

        // Regularity constants by exhaustive evaluation.
        let mut r_sup: f64 = 0.0;
        for u in 0..nx {
            for x in 0..nx {
                for v in 0..ny {
                    let r = self.trans[x][u] / self.lambda_weights[u] * self.emit[u][v]
                        / self.nu_weights[v];
                    r_sup = r_sup.max(r);
                }
            }
        }
        let r_at = |u: usize, v: usize, x: usize| {
            self.trans[x][u] / self.lambda_weights[u] * self.emit[u][v] / self.nu_weights[v]
        };
        let mut r_lip: f64 = 1e-9;
        for v in 0..ny {
            for u in 0..nx {
                for up in 0..nx {
                    for x in 0..nx {
                        for xp in 0..nx {
                            let du = (self.hidden_labels[u] - self.hidden_labels[up]).abs();
                            let dx = (self.hidden_labels[x] - self.hidden_labels[xp]).abs();
                            if du + dx > 0.0 {
                                let diff = (r_at(u, v, x) - r_at(up, v, xp)).abs();
                                r_lip = r_lip.max(diff / (du + dx));
                            }
                        }
                    }
                }
            }
        }
        let mut min_marginal = f64::INFINITY;
        for x in 0..nx {
            for v in 0..ny {
                let mut p = 0.0;
                for u in 0..nx {
                    p += self.trans[x][u] * self.emit[u][v];
                }
                min_marginal = min_marginal.min(p / self.nu_weights[v]);
            }
        }
        let h_sup = self
            .reward
            .iter()
            .flatten()
            .fold(0.0f64, |a, &b| a.max(b.abs()));
        let mut h_lip: f64 = 0.0;
        for x in 0..nx {
            for xp in 0..nx {
                for v in 0..ny {
                    for vp in 0..ny {
                        let d = (self.hidden_labels[x] - self.hidden_labels[xp]).abs()
                            + (self.obs_labels[v] - self.obs_labels[vp]).abs();
                        if d > 0.0 {
                            h_lip = h_lip
                                .max((self.reward[x][v] - self.reward[xp][vp]).abs() / d);
                        }
                    }
                }
            }
        }

        let model = StoppingModel {
            dim_x: 1,
            dim_y: 1,
            horizon: self.horizon,
            density: TransitionDensity::Factored {
                hidden: Arc::new(hidden_fn),
                emission: Arc::new(emit_fn),
                emission_sampler: Some(Arc::new(sampler)),
            },
            lambda: MixedMeasure::atomic(
                1,
                self.hidden_labels
                    .iter()
                    .zip(&self.lambda_weights)
                    .map(|(&l, &w)| (vec![l], w))
                    .collect(),
            )?,
            nu: MixedMeasure::atomic(
                1,
                self.obs_labels
                    .iter()
                    .zip(&self.nu_weights)
                    .map(|(&l, &w)| (vec![l], w))
                    .collect(),
            )?,
            performance: Arc::new(reward_fn),
            r_sup,
            r_lip,
            delta: 1.0 / min_marginal,
            h_sup,
            h_lip,
            beta_moment: 1.0,
            initial_x: vec![self.hidden_labels[self.init_hidden]],
            initial_y: vec![self.obs_labels[self.init_obs]],
        };
        model.validate()?;
        Ok(model)
    }

    /// The lossless reference grid: the full hidden support with its exact
    /// weights and zero distortion, all points pinned.
    pub fn lambda_grid(&self) -> WeightedGrid {
        WeightedGrid {
            dim: 1,
            points: self.hidden_labels.clone(),
            weights: self.lambda_weights.clone(),
            distortion_l2: 0.0,
            pinned: self.n_hidden(),
            seed: 0,
        }
    }

    fn hidden_index(&self, label: f64) -> usize {
        self.hidden_labels
            .iter()
            .position(|&l| l == label)
            .expect("point is not a hidden label")
    }

    fn obs_index(&self, label: f64) -> usize {
        self.obs_labels
            .iter()
            .position(|&l| l == label)
            .expect("point is not an observation label")
    }

    /// Enumerates the reachable filter chain exactly: per-time grids of
    /// distinct (γ, y) states, exact transition matrices, zero quantization
    /// error. A lossless stand-in for the Monte-Carlo chain quantization.
    pub fn exact_chain(&self) -> Result<QuantizedChain> {
        self.validate()?;
        let nx = self.n_hidden();
        let ny = self.n_obs();
        let sd = nx + 1;

        #[derive(Clone)]
        struct Layer {
            states: Vec<(Vec<f64>, usize)>,
            weights: Vec<f64>,
        }
        let init_gamma = {
            let mut g = vec![0.0; nx];
            g[self.init_hidden] = 1.0;
            g
        };
        let mut layers = vec![Layer {
            states: vec![(init_gamma, self.init_obs)],
            weights: vec![1.0],
        }];
        let mut transitions: Vec<RowStochastic> = Vec::new();

        for _t in 0..self.horizon {
            let cur = layers.last().unwrap().clone();
            let mut next_states: Vec<(Vec<f64>, usize)> = Vec::new();
            let mut lookup: HashMap<(Vec<u64>, usize), usize> = HashMap::new();
            let mut rows: Vec<Vec<f64>> = Vec::new();
            for (gamma, _y) in &cur.states {
                let mut row: Vec<f64> = vec![0.0; next_states.len()];
                for v in 0..ny {
                    let p = self.obs_prob(gamma, v);
                    if p <= 0.0 {
                        continue;
                    }
                    let g2 = self.filter_step(gamma, v);
                    let key = (g2.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), v);
                    let j = match lookup.get(&key) {
                        Some(&j) => j,
                        None => {
                            let j = next_states.len();
                            lookup.insert(key, j);
                            next_states.push((g2, v));
                            j
                        }
                    };
                    if row.len() <= j {
                        row.resize(j + 1, 0.0);
                    }
                    row[j] += p;
                }
                rows.push(row);
            }
            let n_next = next_states.len();
            for r in rows.iter_mut() {
                r.resize(n_next, 0.0);
            }
            let mut weights = vec![0.0; n_next];
            for (i, r) in rows.iter().enumerate() {
                for (j, &p) in r.iter().enumerate() {
                    weights[j] += cur.weights[i] * p;
                }
            }
            transitions.push(RowStochastic::from_dense(&rows, n_next));
            layers.push(Layer { states: next_states, weights });
        }

        let grids: Vec<WeightedGrid> = layers
            .iter()
            .map(|layer| {
                let mut points = Vec::with_capacity(layer.states.len() * sd);
                for (g, y) in &layer.states {
                    points.extend_from_slice(g);
                    points.push(self.obs_labels[*y]);
                }
                WeightedGrid {
                    dim: sd,
                    points,
                    weights: layer.weights.clone(),
                    distortion_l2: 0.0,
                    pinned: 0,
                    seed: 0,
                }
            })
            .collect();
        let m_points = grids.iter().map(|g| g.len()).max().unwrap_or(1);
        let chain = QuantizedChain {
            n_hidden: nx,
            dim_y: 1,
            horizon: self.horizon,
            m_points,
            grids,
            transitions,
            quant_errors: vec![(0.0, 0.0); self.horizon + 1],
            n_paths: 0,
            seed: 0,
        };
        chain.validate()?;
        Ok(chain)
    }

    // ── Bundled oracle instances ─────────────────────────────────────────

    /// 2 hidden states, 2 observations, horizon 3.
    pub fn two_state_example() -> FiniteHmm {
        FiniteHmm {
            hidden_labels: vec![0.0, 1.0],
            obs_labels: vec![0.0, 1.0],
            lambda_weights: vec![0.5, 0.5],
            nu_weights: vec![0.5, 0.5],
            trans: vec![vec![0.8, 0.2], vec![0.3, 0.7]],
            emit: vec![vec![0.85, 0.15], vec![0.2, 0.8]],
            reward: vec![vec![0.2, 0.35], vec![0.9, 0.1]],
            horizon: 3,
            init_hidden: 0,
            init_obs: 0,
        }
    }

    /// 3 hidden states, 2 observations, horizon 4.
    pub fn three_state_example() -> FiniteHmm {
        FiniteHmm {
            hidden_labels: vec![0.0, 1.0, 2.0],
            obs_labels: vec![0.0, 1.0],
            lambda_weights: vec![0.4, 0.3, 0.3],
            nu_weights: vec![0.5, 0.5],
            trans: vec![
                vec![0.6, 0.3, 0.1],
                vec![0.2, 0.5, 0.3],
                vec![0.1, 0.2, 0.7],
            ],
            emit: vec![vec![0.7, 0.3], vec![0.5, 0.5], vec![0.15, 0.85]],
            reward: vec![vec![0.1, 0.2], vec![0.6, 0.55], vec![0.3, 0.95]],
            horizon: 4,
            init_hidden: 1,
            init_obs: 0,
        }
    }

    /// 3 hidden states, 3 observations, horizon 3.
    pub fn three_obs_example() -> FiniteHmm {
        FiniteHmm {
            hidden_labels: vec![-1.0, 0.0, 1.0],
            obs_labels: vec![0.0, 0.5, 1.0],
            lambda_weights: vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
            nu_weights: vec![0.25, 0.5, 0.25],
            trans: vec![
                vec![0.5, 0.4, 0.1],
                vec![0.25, 0.5, 0.25],
                vec![0.1, 0.4, 0.5],
            ],
            emit: vec![vec![0.6, 0.3, 0.1], vec![0.2, 0.6, 0.2], vec![0.1, 0.3, 0.6]],
            reward: vec![vec![0.8, 0.3, 0.05], vec![0.25, 0.7, 0.25], vec![0.05, 0.3, 0.8]],
            horizon: 3,
            init_hidden: 1,
            init_obs: 1,
        }
    }
}

/// Exact optimal stopping value by exhaustive enumeration of all stopping
/// rules adapted to the observation filtration.
///
/// The observation-prefix tree carries the unnormalized joint forward
/// measures `α(x) = P(Y₀..Y_t = prefix, X_t = x)`; a stopping rule assigns
/// stop/continue to every interior node, and its value sums the stop
/// rewards `Σ_x α(x)·H(x, y_t)` over the nodes where it first stops.
pub fn oracle_value_finite(hmm: &FiniteHmm) -> Result<f64> {
    hmm.validate()?;
    let nx = hmm.n_hidden();
    let ny = hmm.n_obs();

    struct Node {
        t: usize,
        rho: f64,
        children: Vec<usize>,
        decision: Option<usize>,
    }
    let mut nodes: Vec<Node> = Vec::new();
    let mut stack: Vec<(usize, usize, Vec<f64>)> = Vec::new();
    let root_alpha = {
        let mut a = vec![0.0; nx];
        a[hmm.init_hidden] = 1.0;
        a
    };
    nodes.push(Node {
        t: 0,
        rho: root_alpha
            .iter()
            .enumerate()
            .map(|(x, a)| a * hmm.reward[x][hmm.init_obs])
            .sum(),
        children: Vec::new(),
        decision: None,
    });
    stack.push((0, hmm.init_obs, root_alpha));

    let mut n_decisions = 0usize;
    while let Some((id, _y, alpha)) = stack.pop() {
        let t = nodes[id].t;
        if t == hmm.horizon {
            continue;
        }
        nodes[id].decision = Some(n_decisions);
        n_decisions += 1;
        if n_decisions > MAX_DECISION_NODES {
            return Err(Error::SizeCapExceeded(format!(
                "observation tree has more than {MAX_DECISION_NODES} decision nodes"
            )));
        }
        for v in 0..ny {
            let mut alpha_next = vec![0.0; nx];
            for x in 0..nx {
                if alpha[x] == 0.0 {
                    continue;
                }
                for u in 0..nx {
                    alpha_next[u] += alpha[x] * hmm.trans[x][u] * hmm.emit[u][v];
                }
            }
            let mass: f64 = alpha_next.iter().sum();
            if mass <= 0.0 {
                continue;
            }
            let rho = alpha_next
                .iter()
                .enumerate()
                .map(|(x, a)| a * hmm.reward[x][v])
                .sum();
            let child = nodes.len();
            nodes.push(Node { t: t + 1, rho, children: Vec::new(), decision: None });
            nodes[id].children.push(child);
            stack.push((child, v, alpha_next));
        }
    }

    fn eval(nodes: &[Node], id: usize, mask: u32, horizon: usize) -> f64 {
        let n = &nodes[id];
        let stop = n.t == horizon
            || n.decision.map(|d| mask & (1 << d) != 0).unwrap_or(true);
        if stop {
            n.rho
        } else {
            n.children.iter().map(|&c| eval(nodes, c, mask, horizon)).sum()
        }
    }

    let mut best = f64::NEG_INFINITY;
    for mask in 0u32..(1u32 << n_decisions) {
        let v = eval(&nodes, 0, mask, hmm.horizon);
        if v > best {
            best = v;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::{FilterChain, SimplexState};
    use crate::rng::seeded_rng;

    #[test]
    fn zero_reward_oracle_is_zero() {
        let mut hmm = FiniteHmm::two_state_example();
        hmm.reward = vec![vec![0.0, 0.0], vec![0.0, 0.0]];
        assert_eq!(oracle_value_finite(&hmm).unwrap(), 0.0);
    }

    #[test]
    fn constant_reward_oracle_is_the_constant() {
        let mut hmm = FiniteHmm::two_state_example();
        hmm.reward = vec![vec![0.4, 0.4], vec![0.4, 0.4]];
        let v = oracle_value_finite(&hmm).unwrap();
        assert!((v - 0.4).abs() < 1e-12, "oracle {v}");
    }

    #[test]
    fn oracle_beats_fixed_time_stopping() {
        // The adapted optimum dominates every deterministic stopping epoch.
        let hmm = FiniteHmm::two_state_example();
        let v = oracle_value_finite(&hmm).unwrap();
        for t_stop in 0..=hmm.horizon {
            let fixed = value_of_fixed_time(&hmm, t_stop);
            assert!(
                v >= fixed - 1e-12,
                "oracle {v} below fixed-time-{t_stop} value {fixed}"
            );
        }
    }

    fn value_of_fixed_time(hmm: &FiniteHmm, t_stop: usize) -> f64 {
        // E[H(X_t, Y_t)] by forward propagation of the joint law.
        let nx = hmm.n_hidden();
        let ny = hmm.n_obs();
        let mut joint = vec![vec![0.0; ny]; nx];
        joint[hmm.init_hidden][hmm.init_obs] = 1.0;
        for _ in 0..t_stop {
            let mut next = vec![vec![0.0; ny]; nx];
            for x in 0..nx {
                let px: f64 = joint[x].iter().sum();
                if px == 0.0 {
                    continue;
                }
                for u in 0..nx {
                    for v in 0..ny {
                        next[u][v] += px * hmm.trans[x][u] * hmm.emit[u][v];
                    }
                }
            }
            joint = next;
        }
        let mut acc = 0.0;
        for x in 0..nx {
            for v in 0..ny {
                acc += joint[x][v] * hmm.reward[x][v];
            }
        }
        acc
    }

    #[test]
    fn size_cap_is_enforced() {
        let mut hmm = FiniteHmm::three_obs_example();
        hmm.horizon = 4; // 1 + 3 + 9 + 27 = 40 decision nodes
        assert!(matches!(oracle_value_finite(&hmm), Err(Error::SizeCapExceeded(_))));
    }

    #[test]
    fn bayes_update_matches_exact_filter() {
        // The grid Bayes operator on the lossless grid must reproduce the
        // textbook filter recursion to machine precision.
        for hmm in [
            FiniteHmm::two_state_example(),
            FiniteHmm::three_state_example(),
            FiniteHmm::three_obs_example(),
        ] {
            let model = hmm.to_model().unwrap();
            let grid = hmm.lambda_grid();
            let fc = FilterChain::new(&model, &grid).unwrap();
            let mut rng = seeded_rng(5);
            let mut state = fc.initial_state().unwrap();
            let mut exact = state.gamma.clone();
            for _ in 0..40 {
                let v = fc.sample_observation(&state, &mut rng).unwrap();
                let post = fc.bayes_update(&v, &state).unwrap();
                let v_idx = hmm.obs_index(v[0]);
                exact = hmm.filter_step(&exact, v_idx);
                for (a, b) in post.iter().zip(&exact) {
                    assert!((a - b).abs() < 1e-12, "filter mismatch: {a} vs {b}");
                }
                state = SimplexState { gamma: post, y: v };
            }
        }
    }

    #[test]
    fn exact_chain_is_consistent() {
        let hmm = FiniteHmm::two_state_example();
        let chain = hmm.exact_chain().unwrap();
        chain.validate().unwrap();
        // Layer weights are probability vectors.
        for g in &chain.grids {
            let s: f64 = g.weights.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        // Reachable states: ≤ ny^t distinct filter values per layer.
        for (t, g) in chain.grids.iter().enumerate() {
            assert!(g.len() <= 2usize.pow(t as u32));
        }
    }

    #[test]
    fn density_lower_bound_holds_on_simulated_states() {
        // 1/r(λ_N, v, γ, y) ≤ 2δ with ε_N = 0 (lossless grid), checked on
        // simulated chain states.
        let hmm = FiniteHmm::three_state_example();
        let model = hmm.to_model().unwrap();
        let grid = hmm.lambda_grid();
        let fc = FilterChain::new(&model, &grid).unwrap();
        let mut rng = seeded_rng(9);
        let mut state = fc.initial_state().unwrap();
        for _ in 0..200 {
            let v = fc.sample_observation(&state, &mut rng).unwrap();
            let z = model
                .eval_density_mixed(&grid, &v, &state.gamma, &state.y)
                .unwrap();
            assert!(
                1.0 / z <= 2.0 * model.delta + 1e-9,
                "1/normalizer {} exceeds 2δ = {}",
                1.0 / z,
                2.0 * model.delta
            );
            state = fc.step(&state, &mut rng).unwrap();
        }
    }
}
