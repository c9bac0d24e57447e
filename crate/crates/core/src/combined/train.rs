//! Minibatch gradient descent with momentum over the combined loss.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::NonFlipDataset;
use crate::error::{Error, Result};
use crate::puf::{inverse_feature_transform, Challenge, PufInstance, PufOracle};
use crate::rng::{derive_rng, sub_seed, StreamKind};

use super::{
    combined_gradient_batch, Batch, CombinedLossConfig, CombinedModel, CombinedTopology,
    RecordFeatures,
};

/// What the correlation term correlates against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrelationTarget {
    NonFlip,
    Reliability,
}

/// Training material for the combined attack: challenges with responses,
/// optionally paired with per-challenge correlation targets.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedData {
    n: usize,
    challenges: Vec<Challenge>,
    responses: Vec<bool>,
    targets: Option<(CorrelationTarget, Vec<f64>)>,
}

impl CombinedData {
    pub fn new(
        n: usize,
        challenges: Vec<Challenge>,
        responses: Vec<bool>,
        targets: Option<(CorrelationTarget, Vec<f64>)>,
    ) -> Result<Self> {
        if challenges.len() != responses.len() {
            return Err(Error::LengthMismatch {
                expected: challenges.len(),
                actual: responses.len(),
            });
        }
        if let Some((_, t)) = &targets {
            if t.len() != challenges.len() {
                return Err(Error::LengthMismatch {
                    expected: challenges.len(),
                    actual: t.len(),
                });
            }
        }
        if challenges.iter().any(|c| c.len() != n) {
            return Err(Error::InvalidParameter("challenge width mismatch".into()));
        }
        Ok(CombinedData {
            n,
            challenges,
            responses,
            targets,
        })
    }

    /// The chosen-challenge dataset doubles as combined-attack material:
    /// each centroid supplies a response for the logistic term and its
    /// non-flipping probability for the correlation term.
    pub fn from_non_flip(ds: &NonFlipDataset) -> Self {
        let challenges = ds
            .records()
            .iter()
            .map(|r| inverse_feature_transform(&r.psi))
            .collect();
        let responses = ds.records().iter().map(|r| r.centroid_response).collect();
        let targets = ds.records().iter().map(|r| r.f()).collect();
        CombinedData {
            n: ds.stage_count(),
            challenges,
            responses,
            targets: Some((CorrelationTarget::NonFlip, targets)),
        }
    }

    pub fn len(&self) -> usize {
        self.challenges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.challenges.is_empty()
    }

    pub fn stage_count(&self) -> usize {
        self.n
    }

    pub fn has_targets(&self) -> bool {
        self.targets.is_some()
    }

    pub fn target_kind(&self) -> Option<CorrelationTarget> {
        self.targets.as_ref().map(|(kind, _)| *kind)
    }

    /// Drop the correlation targets, leaving pure challenge-response
    /// training material.
    pub fn responses_only(&self) -> CombinedData {
        CombinedData {
            n: self.n,
            challenges: self.challenges.clone(),
            responses: self.responses.clone(),
            targets: None,
        }
    }
}

/// Challenge-reliability pairs for the combined reliability mode: each
/// challenge is measured `m_measurements` times; the majority vote serves
/// as the response label and the distance from a fair coin as the target.
pub fn collect_reliability_pairs<P: PufOracle + ?Sized>(
    puf: &P,
    count: usize,
    m_measurements: u32,
    master_seed: u64,
) -> Result<CombinedData> {
    if m_measurements == 0 {
        return Err(Error::InvalidParameter("m_measurements must be >= 1".into()));
    }
    let n = puf.stage_count();
    let rows: Vec<(Challenge, bool, f64)> = (0..count)
        .into_par_iter()
        .map(|idx| {
            let mut rng = derive_rng(master_seed, StreamKind::Centroid, idx as u64);
            let c = Challenge::random(n, &mut rng);
            let mut ones = 0u32;
            for _ in 0..m_measurements {
                if puf.query(&c, &mut rng)? {
                    ones += 1;
                }
            }
            let majority = 2 * ones >= m_measurements;
            let reliability = (f64::from(m_measurements) / 2.0 - f64::from(ones)).abs();
            Ok((c, majority, reliability))
        })
        .collect::<Result<_>>()?;
    let mut challenges = Vec::with_capacity(count);
    let mut responses = Vec::with_capacity(count);
    let mut targets = Vec::with_capacity(count);
    for (c, r, t) in rows {
        challenges.push(c);
        responses.push(r);
        targets.push(t);
    }
    CombinedData::new(
        n,
        challenges,
        responses,
        Some((CorrelationTarget::Reliability, targets)),
    )
}

/// Plain challenge-response pairs (single measurement each), for the
/// response-only baseline and for holdouts.
pub fn collect_random_crps<P: PufOracle + ?Sized>(
    puf: &P,
    count: usize,
    master_seed: u64,
) -> Result<CombinedData> {
    let n = puf.stage_count();
    let rows: Vec<(Challenge, bool)> = (0..count)
        .into_par_iter()
        .map(|idx| {
            let mut rng = derive_rng(master_seed, StreamKind::Centroid, idx as u64);
            let c = Challenge::random(n, &mut rng);
            let r = puf.query(&c, &mut rng)?;
            Ok((c, r))
        })
        .collect::<Result<_>>()?;
    let (challenges, responses) = rows.into_iter().unzip();
    CombinedData::new(n, challenges, responses, None)
}

/// One epoch point of a trial's training curve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub loss: f64,
    pub holdout_accuracy: f64,
}

/// Result of one independent initialization.
#[derive(Debug, Clone, Serialize)]
pub struct TrialOutcome {
    pub trial_index: usize,
    pub seed: u64,
    pub failed: bool,
    pub message: Option<String>,
    pub best_holdout_accuracy: f64,
    pub curve: Vec<CurveRow>,
}

/// Outcome of the combined attack.
#[derive(Debug, Clone, Serialize)]
pub struct CombinedReport {
    pub topology: CombinedTopology,
    pub trials: Vec<TrialOutcome>,
    /// Best model across trials by holdout accuracy.
    #[serde(skip)]
    pub best_model: Option<CombinedModel>,
    pub best_holdout_accuracy: f64,
    pub records: usize,
    pub millis: u64,
}

/// Columns: `epoch,loss,holdout_accuracy`.
pub fn write_training_curve(curve: &[CurveRow], path: impl AsRef<std::path::Path>) -> Result<()> {
    let mut writer = csv::Writer::from_writer(std::fs::File::create(path.as_ref())?);
    writer.write_record(["epoch", "loss", "holdout_accuracy"])?;
    for row in curve {
        writer.write_record([
            row.epoch.to_string(),
            format!("{:.8}", row.loss),
            format!("{:.6}", row.holdout_accuracy),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// Train the combined model: `cfg.trials` independent initializations of
/// minibatch gradient descent with momentum and step decay, selecting the
/// best model by holdout accuracy. Diverging trials are recorded as failed
/// without aborting the run.
pub fn train_combined(
    data: &CombinedData,
    holdout: &CombinedData,
    topology: CombinedTopology,
    cfg: &CombinedLossConfig,
) -> Result<CombinedReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Degenerate("training data is empty".into()));
    }
    if holdout.is_empty() {
        return Err(Error::Degenerate("holdout is empty".into()));
    }
    if topology.stage_count() != data.stage_count()
        || topology.stage_count() != holdout.stage_count()
    {
        return Err(Error::InvalidParameter(
            "topology stage count does not match the data".into(),
        ));
    }
    if cfg.weight_corr > 0.0 && !data.has_targets() {
        return Err(Error::InvalidParameter(
            "correlation term enabled but the data has no targets".into(),
        ));
    }

    let start = Instant::now();
    let records: Vec<RecordFeatures> = data
        .challenges
        .par_iter()
        .map(|c| RecordFeatures::from_challenge(&topology, c))
        .collect();
    let holdout_records: Vec<RecordFeatures> = holdout
        .challenges
        .par_iter()
        .map(|c| RecordFeatures::from_challenge(&topology, c))
        .collect();
    let targets: Option<&[f64]> = if cfg.weight_corr > 0.0 {
        data.targets.as_ref().map(|(_, t)| t.as_slice())
    } else {
        None
    };

    let trials: Vec<(TrialOutcome, Option<CombinedModel>)> = (0..cfg.trials)
        .into_par_iter()
        .map(|trial_index| {
            let seed = sub_seed(cfg.seed, StreamKind::Trial, trial_index as u64);
            run_trial(
                trial_index,
                seed,
                &records,
                &data.responses,
                targets,
                &holdout_records,
                &holdout.responses,
                topology,
                cfg,
            )
        })
        .collect();

    let mut outcomes = Vec::with_capacity(trials.len());
    let mut best_model: Option<CombinedModel> = None;
    let mut best_accuracy = f64::NEG_INFINITY;
    for (outcome, model) in trials {
        if let Some(model) = model {
            if outcome.best_holdout_accuracy > best_accuracy {
                best_accuracy = outcome.best_holdout_accuracy;
                best_model = Some(model);
            }
        }
        outcomes.push(outcome);
    }

    Ok(CombinedReport {
        topology,
        trials: outcomes,
        best_model,
        best_holdout_accuracy: if best_accuracy.is_finite() {
            best_accuracy
        } else {
            0.0
        },
        records: data.len(),
        millis: start.elapsed().as_millis() as u64,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_trial(
    trial_index: usize,
    seed: u64,
    records: &[RecordFeatures],
    responses: &[bool],
    targets: Option<&[f64]>,
    holdout_records: &[RecordFeatures],
    holdout_responses: &[bool],
    topology: CombinedTopology,
    cfg: &CombinedLossConfig,
) -> (TrialOutcome, Option<CombinedModel>) {
    let mut rng = derive_rng(seed, StreamKind::Trial, 0);
    let mut model = CombinedModel::random(topology, seed);
    let mut velocity: Vec<Vec<f64>> = model.chains.iter().map(|c| vec![0.0; c.len()]).collect();
    let mut tau_velocity = 0.0;

    let mut indices: Vec<usize> = (0..records.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut best_accuracy = f64::NEG_INFINITY;
    let mut best_model: Option<CombinedModel> = None;
    let mut failure: Option<String> = None;

    'training: for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate * cfg.lr_decay.powi((epoch / cfg.decay_every.max(1)) as i32);
        indices.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in indices.chunks(cfg.batch_size) {
            let batch = Batch {
                records,
                responses,
                targets,
                indices: chunk,
            };
            let (loss, grad) = match combined_gradient_batch(&model, &batch, cfg) {
                Ok(x) => x,
                Err(e) => {
                    failure = Some(e.to_string());
                    break 'training;
                }
            };
            if !loss.is_finite() {
                failure = Some(format!("non-finite loss at epoch {epoch}"));
                break 'training;
            }
            epoch_loss += loss;
            batches += 1;

            for (chain, (v, g)) in model
                .chains
                .iter_mut()
                .zip(velocity.iter_mut().zip(&grad.chains))
            {
                for ((w, v), g) in chain.iter_mut().zip(v.iter_mut()).zip(g) {
                    *v = cfg.momentum * *v - lr * g;
                    *w += *v;
                }
            }
            if cfg.learn_tau {
                tau_velocity = cfg.momentum * tau_velocity - lr * grad.tau;
                model.tau = (model.tau + tau_velocity).max(0.05);
            }
        }

        let accuracy = holdout_accuracy(&model, holdout_records, holdout_responses);
        curve.push(CurveRow {
            epoch,
            loss: epoch_loss / batches.max(1) as f64,
            holdout_accuracy: accuracy,
        });
        if accuracy > best_accuracy {
            best_accuracy = accuracy;
            best_model = Some(model.clone());
        }
    }

    let failed = failure.is_some();
    (
        TrialOutcome {
            trial_index,
            seed,
            failed,
            message: failure,
            best_holdout_accuracy: if best_accuracy.is_finite() {
                best_accuracy
            } else {
                0.0
            },
            curve,
        },
        // A diverged trial's snapshots are not trustworthy.
        if failed { None } else { best_model },
    )
}

fn holdout_accuracy(
    model: &CombinedModel,
    records: &[RecordFeatures],
    responses: &[bool],
) -> f64 {
    let hits = records
        .iter()
        .zip(responses)
        .filter(|(record, &r)| model.hard_response(record) == r)
        .count();
    hits as f64 / records.len() as f64
}

/// Response agreement of a trained model with a target's noise-free
/// behavior over fresh random challenges.
pub fn combined_model_accuracy(
    model: &CombinedModel,
    target: &PufInstance,
    n_eval: usize,
    master_seed: u64,
) -> Result<f64> {
    let mut rng = derive_rng(master_seed, StreamKind::Holdout, 1);
    let mut agree = 0usize;
    for _ in 0..n_eval {
        let c = Challenge::random(target.stage_count(), &mut rng);
        if model.predict(&c)? == target.evaluate_noiseless(&c)? {
            agree += 1;
        }
    }
    Ok(agree as f64 / n_eval as f64)
}
