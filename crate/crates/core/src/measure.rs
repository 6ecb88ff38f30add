//! Mixed probability measures: weighted Dirac atoms plus density-weighted
//! continuous components.
//!
//! The reference measures `λ` and `ν` of the model need not be absolutely
//! continuous with respect to Lebesgue measure; the water-tank measures mix
//! point masses at the boundary states with a scaled Lebesgue part. Atoms are
//! represented exactly so that quantization grids can pin them and the filter
//! sees the boundary states with their true weights.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Sampler for one continuous component: fills `out` with a draw.
pub type ComponentSampler = Arc<dyn Fn(&mut ChaCha8Rng, &mut [f64]) + Send + Sync>;

/// A Dirac atom with positive weight.
#[derive(Clone)]
pub struct Atom {
    pub point: Vec<f64>,
    pub weight: f64,
}

/// A continuous component with positive weight; `sampler` draws from the
/// normalized component law.
#[derive(Clone)]
pub struct ContinuousPart {
    pub weight: f64,
    pub sampler: ComponentSampler,
}

/// Finitely many atoms plus continuous components; total weight 1.
#[derive(Clone)]
pub struct MixedMeasure {
    pub dim: usize,
    pub atoms: Vec<Atom>,
    pub continuous: Vec<ContinuousPart>,
}

impl MixedMeasure {
    /// Purely atomic measure. Weights must be positive and sum to 1.
    pub fn atomic(dim: usize, atoms: Vec<(Vec<f64>, f64)>) -> Result<Self> {
        let m = MixedMeasure {
            dim,
            atoms: atoms
                .into_iter()
                .map(|(point, weight)| Atom { point, weight })
                .collect(),
            continuous: Vec::new(),
        };
        m.validate()?;
        Ok(m)
    }

    /// Uniform law on an axis-aligned box.
    pub fn uniform_box(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.iter().zip(&hi).any(|(a, b)| a >= b) {
            return Err(Error::ModelDefinition("degenerate box bounds".into()));
        }
        let dim = lo.len();
        let sampler: ComponentSampler = Arc::new(move |rng, out| {
            for k in 0..dim {
                out[k] = rng.random_range(lo[k]..hi[k]);
            }
        });
        Ok(MixedMeasure {
            dim,
            atoms: Vec::new(),
            continuous: vec![ContinuousPart { weight: 1.0, sampler }],
        })
    }

    pub fn validate(&self) -> Result<()> {
        let mut total = 0.0;
        for a in &self.atoms {
            if a.point.len() != self.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dim,
                    got: a.point.len(),
                });
            }
            if a.weight <= 0.0 {
                return Err(Error::ModelDefinition("atom weight must be positive".into()));
            }
            total += a.weight;
        }
        for c in &self.continuous {
            if c.weight <= 0.0 {
                return Err(Error::ModelDefinition(
                    "continuous component weight must be positive".into(),
                ));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::ModelDefinition(format!(
                "measure weights sum to {total}, expected 1"
            )));
        }
        Ok(())
    }

    /// Draws one sample into `out`.
    pub fn sample_into(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim);
        let mut u: f64 = rng.random();
        for a in &self.atoms {
            if u < a.weight {
                out.copy_from_slice(&a.point);
                return;
            }
            u -= a.weight;
        }
        for c in &self.continuous {
            if u < c.weight {
                (c.sampler)(rng, out);
                return;
            }
            u -= c.weight;
        }
        // Rounding left us past the last component; use it.
        if let Some(c) = self.continuous.last() {
            (c.sampler)(rng, out);
        } else if let Some(a) = self.atoms.last() {
            out.copy_from_slice(&a.point);
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.sample_into(rng, &mut out);
        out
    }

    /// Monte-Carlo integral of a bounded test function: (mean, standard error).
    pub fn integrate<F: Fn(&[f64]) -> f64>(
        &self,
        f: F,
        n_samples: usize,
        rng: &mut ChaCha8Rng,
    ) -> (f64, f64) {
        let mut buf = vec![0.0; self.dim];
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n_samples {
            self.sample_into(rng, &mut buf);
            let v = f(&buf);
            sum += v;
            sum_sq += v * v;
        }
        let n = n_samples as f64;
        let mean = sum / n;
        let var = (sum_sq / n - mean * mean).max(0.0);
        (mean, (var / n).sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    #[test]
    fn atomic_weights_must_sum_to_one() {
        assert!(MixedMeasure::atomic(1, vec![(vec![0.0], 0.5), (vec![1.0], 0.5)]).is_ok());
        assert!(MixedMeasure::atomic(1, vec![(vec![0.0], 0.6), (vec![1.0], 0.5)]).is_err());
    }

    #[test]
    fn uniform_box_moments() {
        let m = MixedMeasure::uniform_box(vec![0.0], vec![1.0]).unwrap();
        let mut rng = seeded_rng(1);
        let (mean, se) = m.integrate(|x| x[0], 200_000, &mut rng);
        assert!((mean - 0.5).abs() < 4.0 * se, "mean {mean} se {se}");
        let (m2, se2) = m.integrate(|x| x[0] * x[0], 200_000, &mut rng);
        assert!((m2 - 1.0 / 3.0).abs() < 4.0 * se2);
    }

    #[test]
    fn mixed_atom_frequencies() {
        // Same shape as the water-tank reference measures: two boundary atoms
        // at weight 1/4 plus a uniform middle part at weight 1/2.
        let uni = MixedMeasure::uniform_box(vec![0.0], vec![1.0]).unwrap();
        let m = MixedMeasure {
            dim: 1,
            atoms: vec![
                Atom { point: vec![-1.0], weight: 0.25 },
                Atom { point: vec![2.0], weight: 0.25 },
            ],
            continuous: vec![ContinuousPart { weight: 0.5, sampler: uni.continuous[0].sampler.clone() }],
        };
        m.validate().unwrap();
        let mut rng = seeded_rng(7);
        let n = 100_000;
        let mut low = 0usize;
        let mut high = 0usize;
        let mut buf = [0.0];
        for _ in 0..n {
            m.sample_into(&mut rng, &mut buf);
            if buf[0] == -1.0 {
                low += 1;
            } else if buf[0] == 2.0 {
                high += 1;
            } else {
                assert!((0.0..1.0).contains(&buf[0]));
            }
        }
        let f_low = low as f64 / n as f64;
        let f_high = high as f64 / n as f64;
        assert!((f_low - 0.25).abs() < 0.01, "atom frequency {f_low}");
        assert!((f_high - 0.25).abs() < 0.01, "atom frequency {f_high}");
    }
}
