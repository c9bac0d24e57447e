//! The correlation objective shared by both attacks and the CMA-ES engine
//! that maximizes it.
//!
//! Both the chosen-challenge attack and the reliability attack run the same
//! optimizer; they differ only in the measured quantity correlated against
//! the candidate model's |delta| predictions.

mod cmaes;

use crate::dataset::{NonFlipDataset, ReliabilityDataset};
use crate::error::{Error, Result};
use crate::puf::{FeatureVector, WeightVector};

pub use cmaes::{cmaes_maximize, write_trace, CmaesOutcome, StopReason, TraceRow};

/// Evolution-strategy parameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CmaesConfig {
    /// Population size per generation.
    pub population_k: usize,
    /// Number of top-ranked candidates recombined into the next mean.
    pub parents_l: usize,
    /// Hard iteration cap.
    pub max_iterations: usize,
    /// Initial step size.
    pub initial_step: f64,
    pub seed: u64,
    /// Stop when the best fitness improved by less than
    /// `stagnation_tolerance` over this many consecutive iterations.
    /// A tolerance of zero disables the check.
    pub stagnation_window: usize,
    pub stagnation_tolerance: f64,
}

impl Default for CmaesConfig {
    fn default() -> Self {
        CmaesConfig {
            population_k: 24,
            parents_l: 6,
            max_iterations: 300,
            initial_step: 1.0,
            seed: 0,
            stagnation_window: 30,
            stagnation_tolerance: 1e-4,
        }
    }
}

impl CmaesConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population_k < 2 {
            return Err(Error::InvalidParameter("population must be at least 2".into()));
        }
        if self.parents_l == 0 || self.parents_l >= self.population_k {
            return Err(Error::InvalidParameter(
                "parent count must be in 1..population".into(),
            ));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidParameter("max_iterations must be >= 1".into()));
        }
        if !(self.initial_step > 0.0) {
            return Err(Error::InvalidParameter("initial_step must be positive".into()));
        }
        Ok(())
    }
}

/// A candidate model with its fitness.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FitnessEvaluation {
    pub model: WeightVector,
    /// Pearson coefficient against the measured targets; higher is better.
    pub fitness: f64,
}

/// Sample Pearson correlation coefficient.
///
/// Returns `None` when either sequence has zero variance, since the
/// coefficient is undefined there.
pub fn pearson_correlation(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::InvalidParameter(
            "correlation needs at least two samples".into(),
        ));
    }
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    let mut sab = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let dx = x - mean_a;
        let dy = y - mean_b;
        saa += dx * dx;
        sbb += dy * dy;
        sab += dx * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return Ok(None);
    }
    Ok(Some(sab / (saa * sbb).sqrt()))
}

/// The model's surrogate for the non-flipping probability: the magnitude of
/// the predicted delay difference.
pub fn predicted_non_flip(model: &WeightVector, psi: &FeatureVector) -> Result<f64> {
    Ok(crate::puf::delay_difference(model, psi)?.abs())
}

/// A maximization target over weight vectors.
///
/// Candidates are scored in batches so implementations can amortize passes
/// over large datasets.
pub trait Objective: Sync {
    fn dim(&self) -> usize;

    /// Fitness per candidate, higher is better. Non-finite entries mark
    /// invalid candidates.
    fn evaluate_batch(&self, candidates: &[Vec<f64>]) -> Vec<f64>;
}

/// Correlation between measured targets (non-flipping probabilities or
/// reliabilities) and a candidate's |delta| predictions over a fixed
/// feature matrix.
pub struct CorrelationObjective {
    features: Vec<i8>,
    dim: usize,
    rows: usize,
    target_centered: Vec<f64>,
    target_norm: f64,
}

const MODEL_BLOCK: usize = 8;

impl CorrelationObjective {
    fn new(features: Vec<i8>, dim: usize, targets: &[f64]) -> Result<Self> {
        let rows = targets.len();
        if rows < 2 {
            return Err(Error::Degenerate(
                "correlation objective needs at least two records".into(),
            ));
        }
        debug_assert_eq!(features.len(), rows * dim);
        let mean = targets.iter().sum::<f64>() / rows as f64;
        let target_centered: Vec<f64> = targets.iter().map(|t| t - mean).collect();
        let target_norm = target_centered.iter().map(|t| t * t).sum::<f64>().sqrt();
        if target_norm <= 0.0 {
            return Err(Error::Degenerate(
                "measured targets are constant; no signal to correlate against".into(),
            ));
        }
        Ok(CorrelationObjective {
            features,
            dim,
            rows,
            target_centered,
            target_norm,
        })
    }

    pub fn from_non_flip(ds: &NonFlipDataset) -> Result<Self> {
        let dim = ds.stage_count() + 1;
        let mut features = Vec::with_capacity(ds.len() * dim);
        let mut targets = Vec::with_capacity(ds.len());
        for record in ds.records() {
            features.extend_from_slice(record.psi.elems());
            targets.push(record.f());
        }
        CorrelationObjective::new(features, dim, &targets)
    }

    pub fn from_reliability(ds: &ReliabilityDataset) -> Result<Self> {
        let dim = ds.stage_count() + 1;
        let mut features = Vec::with_capacity(ds.len() * dim);
        let mut targets = Vec::with_capacity(ds.len());
        for record in ds.records() {
            features.extend_from_slice(record.psi.elems());
            targets.push(record.r_metric);
        }
        CorrelationObjective::new(features, dim, &targets)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Correlation for a single model; the scalar view of the batch kernel.
    pub fn fitness(&self, model: &[f64]) -> f64 {
        self.evaluate_batch(std::slice::from_ref(&model.to_vec()))[0]
    }

    fn eval_block(&self, block: &[Vec<f64>], out: &mut [f64]) {
        debug_assert!(block.len() <= MODEL_BLOCK);
        let mb = block.len();
        let dim = self.dim;

        // Interleave the block's weights so the inner loop walks a
        // contiguous panel: wt[d * MODEL_BLOCK + j].
        let mut wt = [0.0f64; 0].to_vec();
        wt.resize(dim * MODEL_BLOCK, 0.0);
        for (j, model) in block.iter().enumerate() {
            for d in 0..dim {
                wt[d * MODEL_BLOCK + j] = model[d];
            }
        }

        let mut sum_p = [0.0f64; MODEL_BLOCK];
        let mut sum_pp = [0.0f64; MODEL_BLOCK];
        let mut sum_tp = [0.0f64; MODEL_BLOCK];

        for row in 0..self.rows {
            let feats = &self.features[row * dim..(row + 1) * dim];
            let mut acc = [0.0f64; MODEL_BLOCK];
            for (d, &feat) in feats.iter().enumerate() {
                let x = f64::from(feat);
                let panel = &wt[d * MODEL_BLOCK..(d + 1) * MODEL_BLOCK];
                for j in 0..MODEL_BLOCK {
                    acc[j] += x * panel[j];
                }
            }
            let tc = self.target_centered[row];
            for j in 0..MODEL_BLOCK {
                let p = acc[j].abs();
                sum_p[j] += p;
                sum_pp[j] += p * p;
                sum_tp[j] += tc * p;
            }
        }

        let rows = self.rows as f64;
        for j in 0..mb {
            let spread = sum_pp[j] - sum_p[j] * sum_p[j] / rows;
            out[j] = if spread <= 0.0 {
                // Constant predictions carry no signal; score them as the
                // worst possible correlation to push the search away.
                -1.0
            } else {
                sum_tp[j] / (spread.sqrt() * self.target_norm)
            };
        }
    }
}

impl Objective for CorrelationObjective {
    fn dim(&self) -> usize {
        self.dim
    }

    fn evaluate_batch(&self, candidates: &[Vec<f64>]) -> Vec<f64> {
        let mut out = vec![0.0; candidates.len()];
        for (block, chunk_out) in candidates
            .chunks(MODEL_BLOCK)
            .zip(out.chunks_mut(MODEL_BLOCK))
        {
            self.eval_block(block, chunk_out);
        }
        out
    }
}
