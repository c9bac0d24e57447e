//! Divide-and-conquer attack drivers.
//!
//! Each optimizer restart converges to (at most) one constituent chain of
//! the target. Restarts are deduplicated by response agreement, one
//! representative per recovered chain is kept, and for XOR targets a sign
//! assignment is resolved against held-out responses.

use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{NonFlipDataset, ReliabilityDataset};
use crate::error::{Error, Result};
use crate::optimizer::{cmaes_maximize, CmaesConfig, CorrelationObjective, StopReason};
use crate::puf::{
    delay_difference, feature_transform, response_bit, Challenge, FeatureVector, PufInstance,
    WeightVector,
};
use crate::rng::{derive_rng, sub_seed, StreamKind};

/// Shared configuration of the restart-based attacks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Independent optimizer runs.
    pub restarts: usize,
    /// Optimizer parameters. The seed field is ignored; per-restart seeds
    /// derive from `master_seed`.
    pub cmaes: CmaesConfig,
    /// A restart counts as converged when its fitness exceeds this.
    pub convergence_rho: f64,
    /// Response-agreement level at which two candidates are considered the
    /// same constituent (or its negation).
    pub dedup_agreement: f64,
    /// Size of the random challenge set used for deduplication.
    pub eval_challenges: usize,
    /// Number of XOR constituents to assemble. `None` assembles every
    /// recovered cluster.
    pub xor_k: Option<usize>,
    pub master_seed: u64,
    /// When set, each restart writes its convergence trace to
    /// `trace_restart_<idx>.csv` under this directory.
    #[serde(default)]
    pub trace_dir: Option<std::path::PathBuf>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            restarts: 10,
            cmaes: CmaesConfig::default(),
            convergence_rho: 0.95,
            dedup_agreement: 0.9,
            eval_challenges: 10_000,
            xor_k: None,
            master_seed: 0,
            trace_dir: None,
        }
    }
}

impl AttackConfig {
    /// Default restart budget for a k-XOR target.
    pub fn restarts_for_k(k: usize) -> usize {
        10 * k.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        self.cmaes.validate()?;
        if !(self.convergence_rho > 0.0 && self.convergence_rho < 1.0) {
            return Err(Error::InvalidParameter(
                "convergence_rho must be in (0, 1)".into(),
            ));
        }
        if !(self.dedup_agreement > 0.5 && self.dedup_agreement <= 1.0) {
            return Err(Error::InvalidParameter(
                "dedup_agreement must be in (0.5, 1]".into(),
            ));
        }
        if self.eval_challenges == 0 {
            return Err(Error::InvalidParameter("eval_challenges must be >= 1".into()));
        }
        Ok(())
    }
}

/// A successfully optimized restart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApufModelCandidate {
    /// Unit-normalized recovered weights.
    pub weights: WeightVector,
    pub fitness_rho: f64,
    pub restart_index: usize,
    pub seed: u64,
    pub iterations: usize,
    pub converged: bool,
}

/// Outcome of one restart, successful or not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartOutcome {
    pub restart_index: usize,
    pub seed: u64,
    pub millis: u64,
    pub stop: Option<StopReason>,
    pub candidate: Option<ApufModelCandidate>,
    pub error: Option<String>,
}

/// A group of converged candidates that model the same constituent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterInfo {
    /// Index into the converged-candidate list of the highest-fitness
    /// member.
    pub representative: usize,
    pub members: Vec<usize>,
}

/// Constituents plus the sign assignment that best explains held-out
/// responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XorModelAssembly {
    pub constituents: Vec<WeightVector>,
    pub signs: Vec<i8>,
    pub holdout_accuracy: f64,
    /// False when fewer clusters than requested constituents were found.
    pub complete: bool,
}

/// Compact description of the attacked instance, echoed into reports for
/// table generation. Only available when the driver knows the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSummary {
    pub kind: String,
    pub stage_count: usize,
    pub xors: Option<usize>,
    pub interpose: Option<(usize, usize)>,
    pub noise_kind: String,
    pub sigma_noise: f64,
}

impl From<&PufInstance> for TargetSummary {
    fn from(puf: &PufInstance) -> Self {
        use crate::puf::{NoiseKind, PufTopology};
        fn describe(t: &PufTopology) -> (String, Option<usize>, Option<(usize, usize)>) {
            match t {
                PufTopology::Apuf(_) => ("apuf".into(), Some(1), None),
                PufTopology::XorApuf(ws) => ("xor-apuf".into(), Some(ws.len()), None),
                PufTopology::Interpose { upper, lower, .. } => {
                    ("interpose".into(), None, Some((upper.len(), lower.len())))
                }
                PufTopology::Obfuscated(inner) => {
                    let (kind, xors, interpose) = describe(inner);
                    (format!("obfuscated-{kind}"), xors, interpose)
                }
            }
        }
        let (kind, xors, interpose) = describe(puf.topology());
        TargetSummary {
            kind,
            stage_count: puf.stage_count(),
            xors,
            interpose,
            noise_kind: match puf.noise().kind {
                NoiseKind::None => "none".into(),
                NoiseKind::Weight => "weight".into(),
                NoiseKind::Delta => "delta".into(),
            },
            sigma_noise: puf.noise().sigma_noise,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    Chosen,
    Reliability,
    Combined,
}

/// Full record of an attack run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub kind: AttackKind,
    pub stage_count: usize,
    pub dataset_records: usize,
    pub config: AttackConfig,
    /// True when the measured targets carried no usable signal (for
    /// example, reliabilities of a noiseless PUF).
    pub no_signal: bool,
    pub signal_message: Option<String>,
    pub restarts: Vec<RestartOutcome>,
    /// Clusters over the converged candidates (see [`AttackReport::converged_candidates`]).
    pub clusters: Vec<ClusterInfo>,
    pub assembly: Option<XorModelAssembly>,
    /// Agreement of each ground-truth chain with its best-matching
    /// recovered representative; only available in simulation.
    pub per_constituent_accuracy: Option<Vec<f64>>,
    #[serde(default)]
    pub target: Option<TargetSummary>,
    pub total_millis: u64,
}

impl AttackReport {
    /// All candidates, in restart order.
    pub fn candidates(&self) -> Vec<&ApufModelCandidate> {
        self.restarts
            .iter()
            .filter_map(|r| r.candidate.as_ref())
            .collect()
    }

    /// The converged candidates, in restart order. Cluster member indices
    /// refer to this list.
    pub fn converged_candidates(&self) -> Vec<&ApufModelCandidate> {
        self.restarts
            .iter()
            .filter_map(|r| r.candidate.as_ref())
            .filter(|c| c.converged)
            .collect()
    }

    /// The highest-fitness candidate, if any restart succeeded.
    pub fn best_candidate(&self) -> Option<&ApufModelCandidate> {
        self.candidates()
            .into_iter()
            .max_by(|a, b| a.fitness_rho.partial_cmp(&b.fitness_rho).unwrap())
    }

    pub fn save_json(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::malformed(path, e.to_string()))
    }

    /// Companion CSV: one row per restart.
    pub fn save_restart_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut writer = csv::Writer::from_writer(std::fs::File::create(path.as_ref())?);
        writer.write_record([
            "restart",
            "seed",
            "iterations",
            "fitness_rho",
            "converged",
            "millis",
            "error",
        ])?;
        for outcome in &self.restarts {
            let (iterations, fitness, converged) = match &outcome.candidate {
                Some(c) => (
                    c.iterations.to_string(),
                    format!("{:.6}", c.fitness_rho),
                    c.converged.to_string(),
                ),
                None => (String::new(), String::new(), "false".to_string()),
            };
            writer.write_record([
                outcome.restart_index.to_string(),
                outcome.seed.to_string(),
                iterations,
                fitness,
                converged,
                outcome.millis.to_string(),
                outcome.error.clone().unwrap_or_default(),
            ])?;
        }
        writer.flush()?;
        Ok(())
    }
}

fn run_restarts(objective: &CorrelationObjective, cfg: &AttackConfig) -> Vec<RestartOutcome> {
    (0..cfg.restarts)
        .into_par_iter()
        .map(|idx| {
            let seed = sub_seed(cfg.master_seed, StreamKind::Restart, idx as u64);
            let cmaes_cfg = CmaesConfig {
                seed,
                ..cfg.cmaes.clone()
            };
            let start = Instant::now();
            let mut outcome = RestartOutcome {
                restart_index: idx,
                seed,
                millis: 0,
                stop: None,
                candidate: None,
                error: None,
            };
            match cmaes_maximize(objective, &cmaes_cfg) {
                Ok(run) => {
                    outcome.stop = Some(run.stop);
                    if let Some(dir) = &cfg.trace_dir {
                        let path = dir.join(format!("trace_restart_{idx:03}.csv"));
                        if let Err(e) = crate::optimizer::write_trace(&run.trace, path) {
                            outcome.error = Some(format!("trace write failed: {e}"));
                        }
                    }
                    match run.best.model.normalized() {
                        Ok(weights) => {
                            outcome.candidate = Some(ApufModelCandidate {
                                weights,
                                fitness_rho: run.best.fitness,
                                restart_index: idx,
                                seed,
                                iterations: run.iterations,
                                converged: run.best.fitness > cfg.convergence_rho,
                            });
                        }
                        Err(e) => outcome.error = Some(e.to_string()),
                    }
                }
                Err(e) => outcome.error = Some(e.to_string()),
            }
            outcome.millis = start.elapsed().as_millis() as u64;
            outcome
        })
        .collect()
}

fn no_signal_report(
    kind: AttackKind,
    stage_count: usize,
    dataset_records: usize,
    cfg: &AttackConfig,
    message: String,
) -> AttackReport {
    AttackReport {
        kind,
        stage_count,
        dataset_records,
        config: cfg.clone(),
        no_signal: true,
        signal_message: Some(message),
        restarts: Vec::new(),
        clusters: Vec::new(),
        assembly: None,
        per_constituent_accuracy: None,
        target: None,
        total_millis: 0,
    }
}

/// The chosen-challenge attack: correlate measured non-flipping
/// probabilities with candidate |delta| predictions; each converged restart
/// recovers one constituent.
pub fn chosen_challenge_attack(ds: &NonFlipDataset, cfg: &AttackConfig) -> Result<AttackReport> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::Degenerate("dataset is empty".into()));
    }
    let start = Instant::now();
    let objective = match CorrelationObjective::from_non_flip(ds) {
        Ok(o) => o,
        Err(Error::Degenerate(msg)) => {
            return Ok(no_signal_report(
                AttackKind::Chosen,
                ds.stage_count(),
                ds.len(),
                cfg,
                msg,
            ));
        }
        Err(e) => return Err(e),
    };

    let restarts = run_restarts(&objective, cfg);
    let candidates: Vec<ApufModelCandidate> = restarts
        .iter()
        .filter_map(|r| r.candidate.clone())
        .filter(|c| c.converged)
        .collect();
    let clusters = dedup_candidates(
        &candidates,
        ds.stage_count(),
        cfg.eval_challenges,
        cfg.dedup_agreement,
        cfg.master_seed,
    );

    // Sign resolution reuses the collected centroid responses as the
    // holdout; fresh CRPs can be supplied through `assemble_xor_model`.
    let holdout: Vec<(FeatureVector, bool)> = ds
        .records()
        .iter()
        .map(|r| (r.psi.clone(), r.centroid_response))
        .collect();
    let k = cfg.xor_k.unwrap_or(clusters.len());
    let assembly = if clusters.is_empty() || k == 0 {
        None
    } else {
        Some(assemble_from_features(&clusters, &candidates, k, &holdout))
    };

    Ok(AttackReport {
        kind: AttackKind::Chosen,
        stage_count: ds.stage_count(),
        dataset_records: ds.len(),
        config: cfg.clone(),
        no_signal: false,
        signal_message: None,
        restarts,
        clusters,
        assembly,
        per_constituent_accuracy: None,
        target: None,
        total_millis: start.elapsed().as_millis() as u64,
    })
}

/// The reliability baseline: identical machinery with repeated-measurement
/// reliabilities as the correlation target. On a noiseless target the
/// reliabilities are constant and the attack reports the missing signal
/// instead of running.
pub fn reliability_attack(ds: &ReliabilityDataset, cfg: &AttackConfig) -> Result<AttackReport> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::Degenerate("dataset is empty".into()));
    }
    let start = Instant::now();
    let objective = match CorrelationObjective::from_reliability(ds) {
        Ok(o) => o,
        Err(Error::Degenerate(msg)) => {
            return Ok(no_signal_report(
                AttackKind::Reliability,
                ds.stage_count(),
                ds.len(),
                cfg,
                format!("no reliability signal: {msg}"),
            ));
        }
        Err(e) => return Err(e),
    };

    let restarts = run_restarts(&objective, cfg);
    let candidates: Vec<ApufModelCandidate> = restarts
        .iter()
        .filter_map(|r| r.candidate.clone())
        .filter(|c| c.converged)
        .collect();
    let clusters = dedup_candidates(
        &candidates,
        ds.stage_count(),
        cfg.eval_challenges,
        cfg.dedup_agreement,
        cfg.master_seed,
    );

    Ok(AttackReport {
        kind: AttackKind::Reliability,
        stage_count: ds.stage_count(),
        dataset_records: ds.len(),
        config: cfg.clone(),
        no_signal: false,
        signal_message: None,
        restarts,
        clusters,
        // Reliability data carries no response bits, so sign assignment
        // (and with it assembly) needs externally supplied CRPs.
        assembly: None,
        per_constituent_accuracy: None,
        target: None,
        total_millis: start.elapsed().as_millis() as u64,
    })
}

/// Response bits of a linear model over an evaluation set, packed for fast
/// agreement counting.
struct ResponseSignature {
    blocks: Vec<u64>,
    count: usize,
}

impl ResponseSignature {
    fn of_model(w: &WeightVector, eval: &[FeatureVector]) -> Self {
        let mut blocks = vec![0u64; eval.len().div_ceil(64)];
        for (i, psi) in eval.iter().enumerate() {
            let delta = delay_difference(w, psi).expect("evaluation set matches model width");
            if response_bit(delta) {
                blocks[i / 64] |= 1 << (i % 64);
            }
        }
        ResponseSignature {
            blocks,
            count: eval.len(),
        }
    }

    fn agreement(&self, other: &ResponseSignature) -> f64 {
        let differing: u32 = self
            .blocks
            .iter()
            .zip(&other.blocks)
            .map(|(a, b)| (a ^ b).count_ones())
            .sum();
        1.0 - f64::from(differing) / self.count as f64
    }
}

fn evaluation_features(n: usize, count: usize, master_seed: u64) -> Vec<FeatureVector> {
    let mut rng = derive_rng(master_seed, StreamKind::Evaluation, u64::MAX);
    (0..count)
        .map(|_| feature_transform(&Challenge::random(n, &mut rng)))
        .collect()
}

/// Group candidates that model the same constituent.
///
/// Two candidates belong together when their response agreement on the
/// evaluation set is at least `threshold` or at most `1 - threshold`; the
/// latter catches the global sign ambiguity. Each cluster is represented by
/// its highest-fitness member; clusters are ordered by representative
/// fitness.
pub fn dedup_candidates(
    candidates: &[ApufModelCandidate],
    n: usize,
    eval_challenges: usize,
    threshold: f64,
    master_seed: u64,
) -> Vec<ClusterInfo> {
    if candidates.is_empty() {
        return Vec::new();
    }
    let eval = evaluation_features(n, eval_challenges, master_seed);
    let signatures: Vec<ResponseSignature> = candidates
        .par_iter()
        .map(|c| ResponseSignature::of_model(&c.weights, &eval))
        .collect();

    // Union-find over the agreement relation.
    let mut parent: Vec<usize> = (0..candidates.len()).collect();
    fn find(parent: &mut Vec<usize>, i: usize) -> usize {
        if parent[i] != i {
            let root = find(parent, parent[i]);
            parent[i] = root;
        }
        parent[i]
    }
    for i in 0..candidates.len() {
        for j in (i + 1)..candidates.len() {
            let agreement = signatures[i].agreement(&signatures[j]);
            if agreement >= threshold || agreement <= 1.0 - threshold {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a] = b;
                }
            }
        }
    }

    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..candidates.len() {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(i);
    }

    let mut clusters: Vec<ClusterInfo> = groups
        .into_values()
        .map(|members| {
            let representative = members
                .iter()
                .copied()
                .max_by(|&a, &b| {
                    candidates[a]
                        .fitness_rho
                        .partial_cmp(&candidates[b].fitness_rho)
                        .unwrap()
                })
                .unwrap();
            ClusterInfo {
                representative,
                members,
            }
        })
        .collect();
    clusters.sort_by(|a, b| {
        candidates[b.representative]
            .fitness_rho
            .partial_cmp(&candidates[a.representative].fitness_rho)
            .unwrap()
    });
    clusters
}

/// Pick `k` cluster representatives and resolve their signs against
/// held-out challenge-response pairs by coordinate ascent.
pub fn assemble_xor_model(
    clusters: &[ClusterInfo],
    candidates: &[ApufModelCandidate],
    k: usize,
    holdout: &[(Challenge, bool)],
) -> XorModelAssembly {
    let features: Vec<(FeatureVector, bool)> = holdout
        .iter()
        .map(|(c, r)| (feature_transform(c), *r))
        .collect();
    assemble_from_features(clusters, candidates, k, &features)
}

fn assemble_from_features(
    clusters: &[ClusterInfo],
    candidates: &[ApufModelCandidate],
    k: usize,
    holdout: &[(FeatureVector, bool)],
) -> XorModelAssembly {
    let take = k.min(clusters.len());
    let complete = take == k;
    let reps: Vec<&WeightVector> = clusters[..take]
        .iter()
        .map(|c| &candidates[c.representative].weights)
        .collect();
    let mut signs = vec![1i8; take];

    if holdout.is_empty() || reps.is_empty() {
        return XorModelAssembly {
            constituents: reps.into_iter().cloned().collect(),
            signs,
            holdout_accuracy: 0.0,
            complete,
        };
    }

    // Per-constituent response bits on the holdout.
    let bits: Vec<Vec<bool>> = reps
        .iter()
        .map(|w| {
            holdout
                .iter()
                .map(|(psi, _)| response_bit(delay_difference(w, psi).expect("widths match")))
                .collect()
        })
        .collect();

    let accuracy = |signs: &[i8]| -> f64 {
        let mut hits = 0usize;
        for (row, (_, target)) in holdout.iter().enumerate() {
            let mut xor = false;
            for (j, s) in signs.iter().enumerate() {
                // Negating a model flips its response except exactly on the
                // decision boundary, which has measure zero.
                xor ^= if *s == 1 { bits[j][row] } else { !bits[j][row] };
            }
            if xor == *target {
                hits += 1;
            }
        }
        hits as f64 / holdout.len() as f64
    };

    let mut best = accuracy(&signs);
    loop {
        let mut improved = false;
        for j in 0..signs.len() {
            signs[j] = -signs[j];
            let candidate = accuracy(&signs);
            if candidate > best {
                best = candidate;
                improved = true;
            } else {
                signs[j] = -signs[j];
            }
        }
        if !improved {
            break;
        }
    }

    XorModelAssembly {
        constituents: reps.into_iter().cloned().collect(),
        signs,
        holdout_accuracy: best,
        complete,
    }
}

/// Fresh random challenge-response pairs from the target's noise-free
/// behavior.
pub fn generate_holdout(
    target: &PufInstance,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(Challenge, bool)>> {
    (0..count)
        .map(|_| {
            let c = Challenge::random(target.stage_count(), rng);
            let r = target.evaluate_noiseless(&c)?;
            Ok((c, r))
        })
        .collect()
}

/// Sign-normalized response agreement of a single linear model with the
/// target's noise-free behavior: max(a, 1 - a) over fresh challenges.
pub fn evaluate_model_accuracy(
    model: &WeightVector,
    target: &PufInstance,
    n_eval: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut agree = 0usize;
    for _ in 0..n_eval {
        let c = Challenge::random(target.stage_count(), rng);
        let predicted = response_bit(delay_difference(model, &feature_transform(&c))?);
        if predicted == target.evaluate_noiseless(&c)? {
            agree += 1;
        }
    }
    let a = agree as f64 / n_eval as f64;
    Ok(a.max(1.0 - a))
}

/// Sign-normalized agreement of a model with one ground-truth chain.
pub fn model_agreement_with_chain(
    model: &WeightVector,
    chain: &WeightVector,
    eval: &[FeatureVector],
) -> f64 {
    let a = ResponseSignature::of_model(model, eval)
        .agreement(&ResponseSignature::of_model(chain, eval));
    a.max(1.0 - a)
}

/// Raw response agreement of an assembled XOR model with the target's
/// noise-free behavior.
pub fn evaluate_assembly_accuracy(
    assembly: &XorModelAssembly,
    target: &PufInstance,
    n_eval: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut agree = 0usize;
    for _ in 0..n_eval {
        let c = Challenge::random(target.stage_count(), rng);
        let psi = feature_transform(&c);
        let mut xor = false;
        for (w, s) in assembly.constituents.iter().zip(&assembly.signs) {
            let delta = delay_difference(w, &psi)? * f64::from(*s);
            xor ^= response_bit(delta);
        }
        if xor == target.evaluate_noiseless(&c)? {
            agree += 1;
        }
    }
    Ok(agree as f64 / n_eval as f64)
}

/// For each ground-truth chain, the best sign-normalized agreement achieved
/// by any recovered cluster representative.
pub fn per_constituent_accuracy(
    report: &AttackReport,
    target: &PufInstance,
    eval_challenges: usize,
    master_seed: u64,
) -> Option<Vec<f64>> {
    let chains = target.constituents()?;
    let candidates = report.converged_candidates();
    let eval = evaluation_features(target.stage_count(), eval_challenges, master_seed);
    Some(
        chains
            .iter()
            .map(|chain| {
                report
                    .clusters
                    .iter()
                    .map(|cluster| {
                        model_agreement_with_chain(
                            &candidates[cluster.representative].weights,
                            chain,
                            &eval,
                        )
                    })
                    .fold(0.5, f64::max)
            })
            .collect(),
    )
}

/// Per-constituent convergence rates plus the correlation between each
/// chain's |delta| magnitudes and the measured non-flipping probabilities.
#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceStudy {
    /// Fraction of restarts whose converged model matched each chain.
    pub rates: Vec<f64>,
    /// Correlation of each chain's |delta| with the measured F over the
    /// dataset.
    pub delta_correlations: Vec<f64>,
    pub restarts: usize,
    pub converged: usize,
}

pub fn convergence_rate_study(
    target: &PufInstance,
    ds: &NonFlipDataset,
    restarts: usize,
    cfg: &AttackConfig,
) -> Result<ConvergenceStudy> {
    let chains = target
        .constituents()
        .ok_or_else(|| Error::InvalidParameter("study needs an APUF or XOR APUF target".into()))?;

    let targets: Vec<f64> = ds.records().iter().map(|r| r.f()).collect();
    let delta_correlations = chains
        .iter()
        .map(|chain| {
            let predictions: Vec<f64> = ds
                .records()
                .iter()
                .map(|r| delay_difference(chain, &r.psi).map(f64::abs))
                .collect::<Result<_>>()?;
            Ok(crate::optimizer::pearson_correlation(&targets, &predictions)?.unwrap_or(0.0))
        })
        .collect::<Result<Vec<f64>>>()?;

    if restarts == 0 {
        return Ok(ConvergenceStudy {
            rates: vec![0.0; chains.len()],
            delta_correlations,
            restarts: 0,
            converged: 0,
        });
    }

    let run_cfg = AttackConfig {
        restarts,
        xor_k: Some(chains.len()),
        ..cfg.clone()
    };
    let report = chosen_challenge_attack(ds, &run_cfg)?;
    let eval = evaluation_features(ds.stage_count(), cfg.eval_challenges, cfg.master_seed);

    let mut matched = vec![0usize; chains.len()];
    let mut converged = 0usize;
    for candidate in report.converged_candidates() {
        converged += 1;
        let (best_chain, best_agreement) = chains
            .iter()
            .enumerate()
            .map(|(j, chain)| {
                (
                    j,
                    model_agreement_with_chain(&candidate.weights, chain, &eval),
                )
            })
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap();
        if best_agreement >= cfg.dedup_agreement {
            matched[best_chain] += 1;
        }
    }

    Ok(ConvergenceStudy {
        rates: matched
            .iter()
            .map(|&m| m as f64 / restarts as f64)
            .collect(),
        delta_correlations,
        restarts,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{collect_chosen_dataset, collect_reliability_dataset, measure_non_flip};
    use crate::puf::{NoiseKind, NoiseModel, PufTopology};

    fn all_challenges(n: usize) -> Vec<Challenge> {
        (0..(1u32 << n))
            .map(|value| {
                Challenge::new((0..n).map(|i| ((value >> i) & 1) as u8).collect()).unwrap()
            })
            .collect()
    }

    /// Every challenge as a centroid, every distance-1 neighbor sampled.
    fn exhaustive_dataset(puf: &PufInstance, n: usize) -> NonFlipDataset {
        let records = all_challenges(n)
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let mut rng = derive_rng(1000, StreamKind::Centroid, i as u64);
                measure_non_flip(puf, c, 1, n, &mut rng).unwrap()
            })
            .collect();
        NonFlipDataset::new(records, n, 1).unwrap()
    }

    fn exhaustive_agreement(model: &WeightVector, chain: &WeightVector, n: usize) -> f64 {
        let mut agree = 0usize;
        let challenges = all_challenges(n);
        for c in &challenges {
            let psi = feature_transform(c);
            let a = response_bit(delay_difference(model, &psi).unwrap());
            let b = response_bit(delay_difference(chain, &psi).unwrap());
            if a == b {
                agree += 1;
            }
        }
        let a = agree as f64 / challenges.len() as f64;
        a.max(1.0 - a)
    }

    fn toy_config(restarts: usize, seed: u64) -> AttackConfig {
        AttackConfig {
            restarts,
            master_seed: seed,
            eval_challenges: 2000,
            // The d=1 flip signal is much coarser at eight stages than at
            // production sizes, so toy instances converge at lower rho.
            convergence_rho: 0.3,
            ..AttackConfig::default()
        }
    }

    #[test]
    fn toy_chosen_attack_recovers_constituents() {
        let n = 8;
        let puf = PufInstance::random_xor(n, 2, NoiseModel::none(), 73).unwrap();
        let ds = exhaustive_dataset(&puf, n);
        let report = chosen_challenge_attack(&ds, &toy_config(12, 3)).unwrap();
        let chains = puf.constituents().unwrap();

        let converged = report.converged_candidates();
        assert!(!converged.is_empty(), "no restart converged");
        for candidate in &converged {
            let best = chains
                .iter()
                .map(|chain| exhaustive_agreement(&candidate.weights, chain, n))
                .fold(0.0f64, f64::max);
            assert!(
                best >= 0.95,
                "converged candidate agrees only {best} with its closest chain"
            );
        }

        // Unit-norm invariant on stored candidates.
        for candidate in report.candidates() {
            assert!((candidate.weights.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attack_is_deterministic_modulo_timing() {
        let puf = PufInstance::random_xor(12, 2, NoiseModel::none(), 8).unwrap();
        let ds = collect_chosen_dataset(&puf, 400, 8, 1, 5).unwrap();
        let a = chosen_challenge_attack(&ds, &toy_config(4, 9)).unwrap();
        let b = chosen_challenge_attack(&ds, &toy_config(4, 9)).unwrap();
        for (ra, rb) in a.restarts.iter().zip(&b.restarts) {
            assert_eq!(ra.candidate, rb.candidate);
            assert_eq!(ra.seed, rb.seed);
        }
        assert_eq!(a.clusters, b.clusters);

        let c = chosen_challenge_attack(&ds, &toy_config(4, 10)).unwrap();
        let fitness =
            |r: &AttackReport| r.candidates().iter().map(|c| c.fitness_rho).collect::<Vec<_>>();
        assert_ne!(fitness(&a), fitness(&c));
    }

    #[test]
    fn dedup_groups_sign_flips_and_separates_chains() {
        let n = 64;
        let mut rng = derive_rng(2, StreamKind::Instance, 50);
        let w1 = crate::puf::sample_apuf(n, 1.0, &mut rng).normalized().unwrap();
        let w2 = crate::puf::sample_apuf(n, 1.0, &mut rng).normalized().unwrap();

        let mk = |w: &WeightVector, fitness: f64, idx: usize| ApufModelCandidate {
            weights: w.clone(),
            fitness_rho: fitness,
            restart_index: idx,
            seed: idx as u64,
            iterations: 1,
            converged: true,
        };
        let candidates = vec![
            mk(&w1, 0.99, 0),
            mk(&w1.negated(), 0.98, 1),
            mk(&w2, 0.97, 2),
        ];
        let clusters = dedup_candidates(&candidates, n, 4000, 0.9, 7);
        assert_eq!(clusters.len(), 2);
        assert_eq!(clusters[0].representative, 0);
        assert_eq!(clusters[0].members, vec![0, 1]);
        assert_eq!(clusters[1].members, vec![2]);

        // A single candidate forms a single cluster.
        let single = dedup_candidates(&candidates[..1], n, 4000, 0.9, 7);
        assert_eq!(single.len(), 1);
    }

    #[test]
    fn assembly_with_ground_truth_reaches_full_accuracy() {
        let n = 10;
        let puf = PufInstance::random_xor(n, 3, NoiseModel::none(), 77).unwrap();
        let chains = puf.constituents().unwrap();
        let candidates: Vec<ApufModelCandidate> = chains
            .iter()
            .enumerate()
            .map(|(i, w)| ApufModelCandidate {
                weights: w.normalized().unwrap(),
                fitness_rho: 1.0 - i as f64 * 0.001,
                restart_index: i,
                seed: i as u64,
                iterations: 1,
                converged: true,
            })
            .collect();
        let clusters: Vec<ClusterInfo> = (0..3)
            .map(|i| ClusterInfo {
                representative: i,
                members: vec![i],
            })
            .collect();
        let mut rng = derive_rng(3, StreamKind::Holdout, 0);
        let holdout = generate_holdout(&puf, 2000, &mut rng).unwrap();
        let assembly = assemble_xor_model(&clusters, &candidates, 3, &holdout);
        assert!(assembly.complete);
        assert_eq!(assembly.holdout_accuracy, 1.0);

        // Fewer clusters than requested: partial assembly, flagged.
        let partial = assemble_xor_model(&clusters[..2], &candidates, 3, &holdout);
        assert!(!partial.complete);
        assert_eq!(partial.constituents.len(), 2);
    }

    #[test]
    fn single_model_assembly_normalizes_sign() {
        let n = 12;
        let puf = PufInstance::random_apuf(n, NoiseModel::none(), 70).unwrap();
        let w = match puf.topology() {
            PufTopology::Apuf(w) => w.normalized().unwrap(),
            _ => unreachable!(),
        };
        let candidates = vec![ApufModelCandidate {
            weights: w.negated(),
            fitness_rho: 0.99,
            restart_index: 0,
            seed: 0,
            iterations: 1,
            converged: true,
        }];
        let clusters = vec![ClusterInfo {
            representative: 0,
            members: vec![0],
        }];
        let mut rng = derive_rng(4, StreamKind::Holdout, 0);
        let holdout = generate_holdout(&puf, 1000, &mut rng).unwrap();
        let assembly = assemble_xor_model(&clusters, &candidates, 1, &holdout);
        // Coordinate ascent flips the sign to match the target.
        assert_eq!(assembly.holdout_accuracy, 1.0);
        assert_eq!(assembly.signs, vec![-1]);
    }

    #[test]
    fn accuracy_evaluation_normalizes_sign() {
        let puf = PufInstance::random_apuf(16, NoiseModel::none(), 71).unwrap();
        let w = match puf.topology() {
            PufTopology::Apuf(w) => w.clone(),
            _ => unreachable!(),
        };
        let mut rng = derive_rng(5, StreamKind::Holdout, 0);
        let exact = evaluate_model_accuracy(&w, &puf, 3000, &mut rng).unwrap();
        assert_eq!(exact, 1.0);
        let negated = evaluate_model_accuracy(&w.negated(), &puf, 3000, &mut rng).unwrap();
        assert_eq!(negated, 1.0);

    }

    #[test]
    fn unrelated_models_agree_at_chance_level() {
        // Two independent 64-stage devices: pair-to-pair variation comes
        // from the random angle between weight vectors, so a single pair is
        // only near 0.5; the average over pairs tightens.
        let mut rng = derive_rng(6, StreamKind::Holdout, 1);
        let mut total = 0.0;
        let pairs = 20;
        for i in 0..pairs {
            let target = PufInstance::random_apuf(64, NoiseModel::none(), 500 + i).unwrap();
            let probe = PufInstance::random_apuf(64, NoiseModel::none(), 900 + i).unwrap();
            let model = match probe.topology() {
                PufTopology::Apuf(w) => w.clone(),
                _ => unreachable!(),
            };
            let acc = evaluate_model_accuracy(&model, &target, 2000, &mut rng).unwrap();
            assert!(acc < 0.65, "pair {i} accuracy {acc}");
            total += acc;
        }
        let mean = total / pairs as f64;
        assert!((0.5..0.57).contains(&mean), "mean accuracy {mean}");
    }

    #[test]
    fn reliability_attack_on_noiseless_target_reports_no_signal() {
        let puf = PufInstance::random_apuf(16, NoiseModel::none(), 30).unwrap();
        let ds = collect_reliability_dataset(&puf, 100, 17, 2).unwrap();
        let report = reliability_attack(&ds, &toy_config(4, 1)).unwrap();
        assert!(report.no_signal);
        assert!(report
            .signal_message
            .as_deref()
            .unwrap()
            .contains("no reliability signal"));
        assert!(report.restarts.is_empty());
    }

    #[test]
    fn reliability_attack_recovers_noisy_toy_target() {
        let noise = NoiseModel::new(NoiseKind::Weight, 0.02).unwrap();
        let puf = PufInstance::random_apuf(16, noise, 31).unwrap();
        let ds = collect_reliability_dataset(&puf, 3000, 17, 3).unwrap();
        let report = reliability_attack(&ds, &toy_config(5, 6)).unwrap();
        assert!(!report.no_signal);
        let best = report.best_candidate().expect("a candidate");
        let mut rng = derive_rng(6, StreamKind::Holdout, 0);
        let acc = evaluate_model_accuracy(&best.weights, &puf, 4000, &mut rng).unwrap();
        assert!(acc > 0.9, "reliability attack accuracy {acc}");
    }

    #[test]
    fn convergence_study_vacuous_at_zero_restarts() {
        let puf = PufInstance::random_xor(12, 2, NoiseModel::none(), 90).unwrap();
        let ds = collect_chosen_dataset(&puf, 200, 8, 1, 4).unwrap();
        let study = convergence_rate_study(&puf, &ds, 0, &toy_config(0, 5)).unwrap();
        assert_eq!(study.rates, vec![0.0, 0.0]);
        assert_eq!(study.converged, 0);
        assert_eq!(study.delta_correlations.len(), 2);
    }

    #[test]
    fn report_json_round_trip() {
        let puf = PufInstance::random_apuf(12, NoiseModel::none(), 91).unwrap();
        let ds = collect_chosen_dataset(&puf, 300, 8, 1, 6).unwrap();
        let report = chosen_challenge_attack(&ds, &toy_config(2, 7)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        report.save_json(&path).unwrap();
        let loaded = AttackReport::load_json(&path).unwrap();
        assert_eq!(report, loaded);

        let csv_path = dir.path().join("restarts.csv");
        report.save_restart_csv(&csv_path).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        assert!(text.starts_with("restart,seed,iterations,fitness_rho,converged,millis,error"));
        assert_eq!(text.lines().count(), 1 + report.restarts.len());
    }
}
