//! Gradient-based multi-objective attack.
//!
//! One trainable model carries every constituent chain of the target (k-XOR
//! or interpose). Three loss ingredients combine: a logistic response loss
//! over the soft-XOR probability, a correlation objective pulling each
//! chain's |delta| toward the measured non-flipping probabilities (or
//! reliabilities), and a soft norm constraint pinning the scale that the
//! correlation term leaves free. All gradients are derived by hand and
//! checked against central differences in the tests.

mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::puf::{
    feature_transform, inverse_feature_transform, Challenge, FeatureVector, NoiseModel,
    PufInstance, PufTopology, WeightVector,
};

pub use train::{
    collect_random_crps, collect_reliability_pairs, combined_model_accuracy, train_combined,
    write_training_curve, CombinedData, CombinedReport, CorrelationTarget, CurveRow, TrialOutcome,
};

/// Structure of the trainable model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CombinedTopology {
    Xor {
        n: usize,
        k: usize,
    },
    Interpose {
        n: usize,
        x: usize,
        y: usize,
        insert_position: usize,
    },
}

impl CombinedTopology {
    pub fn interpose_middle(n: usize, x: usize, y: usize) -> Self {
        CombinedTopology::Interpose {
            n,
            x,
            y,
            insert_position: (n + 1) / 2,
        }
    }

    pub fn stage_count(&self) -> usize {
        match self {
            CombinedTopology::Xor { n, .. } | CombinedTopology::Interpose { n, .. } => *n,
        }
    }

    /// Width of each chain's weight vector, in declaration order.
    pub fn chain_dims(&self) -> Vec<usize> {
        match self {
            CombinedTopology::Xor { n, k } => vec![n + 1; *k],
            CombinedTopology::Interpose { n, x, y, .. } => {
                let mut dims = vec![n + 1; *x];
                dims.extend(std::iter::repeat(n + 2).take(*y));
                dims
            }
        }
    }

    pub fn chain_count(&self) -> usize {
        match self {
            CombinedTopology::Xor { k, .. } => *k,
            CombinedTopology::Interpose { x, y, .. } => x + y,
        }
    }
}

/// Trainable parameters: one weight vector per chain plus the shared
/// sigmoid temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinedModel {
    pub topology: CombinedTopology,
    pub chains: Vec<Vec<f64>>,
    pub tau: f64,
}

impl CombinedModel {
    pub fn new(topology: CombinedTopology, chains: Vec<Vec<f64>>, tau: f64) -> Result<Self> {
        let dims = topology.chain_dims();
        if chains.len() != dims.len() {
            return Err(Error::InvalidParameter(format!(
                "expected {} chains, got {}",
                dims.len(),
                chains.len()
            )));
        }
        for (chain, dim) in chains.iter().zip(&dims) {
            if chain.len() != *dim {
                return Err(Error::LengthMismatch {
                    expected: *dim,
                    actual: chain.len(),
                });
            }
            if !chain.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidParameter("non-finite chain weight".into()));
            }
        }
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::InvalidParameter("tau must be positive".into()));
        }
        Ok(CombinedModel {
            topology,
            chains,
            tau,
        })
    }

    /// Standard-normal initialization; the squared norm of each chain then
    /// starts near its dimension, which is also the norm-penalty target.
    pub fn random(topology: CombinedTopology, seed: u64) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = crate::rng::derive_rng(seed, crate::rng::StreamKind::Trial, u64::MAX);
        let chains = topology
            .chain_dims()
            .into_iter()
            .map(|dim| {
                (0..dim)
                    .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                    .collect()
            })
            .collect();
        CombinedModel {
            topology,
            chains,
            tau: 1.0,
        }
    }

    fn upper_count(&self) -> usize {
        match self.topology {
            CombinedTopology::Xor { .. } => 0,
            CombinedTopology::Interpose { x, .. } => x,
        }
    }

    /// Hard-threshold response for a raw challenge.
    pub fn predict(&self, c: &Challenge) -> Result<bool> {
        let record = RecordFeatures::from_challenge(&self.topology, c);
        Ok(self.hard_response(&record))
    }

    fn hard_response(&self, record: &RecordFeatures) -> bool {
        match self.topology {
            CombinedTopology::Xor { .. } => {
                let mut xor = false;
                for chain in &self.chains {
                    xor ^= dot_i8(chain, &record.psi) >= 0.0;
                }
                xor
            }
            CombinedTopology::Interpose { x, .. } => {
                let mut upper = false;
                for chain in &self.chains[..x] {
                    upper ^= dot_i8(chain, &record.psi) >= 0.0;
                }
                // The inserted challenge bit equals the upper response, so
                // the suffix factor it contributes is -1 exactly when the
                // upper response is 1.
                let g = if upper { -1.0 } else { 1.0 };
                let base = record.base.as_ref().expect("interpose features carry base");
                let q = record.insert_position;
                let mut xor = false;
                for chain in &self.chains[x..] {
                    let (a, b) = split_dot(chain, base, q);
                    xor ^= g * a + b >= 0.0;
                }
                xor
            }
        }
    }

    /// Predicted probability that the response is 1, via the soft-XOR of
    /// per-chain tanh responses.
    pub fn response_probability(&self, psi: &FeatureVector) -> Result<f64> {
        if psi.stage_count() != self.topology.stage_count() {
            return Err(Error::LengthMismatch {
                expected: self.topology.stage_count() + 1,
                actual: psi.len(),
            });
        }
        let c = inverse_feature_transform(psi);
        let record = RecordFeatures::from_challenge(&self.topology, &c);
        let mut scratch = Scratch::new(self.topology.chain_count(), self.upper_count());
        Ok(self.soft_response(&record, &mut scratch))
    }

    fn soft_response(&self, record: &RecordFeatures, scratch: &mut Scratch) -> f64 {
        self.forward_deltas(record, scratch);
        let lower_range = self.upper_count()..self.chains.len();
        // p = (1 - prod_j(-tanh(delta_j / tau))) / 2; the signed product is
        // the soft version of the XOR in the +/-1 domain.
        let mut neg_prod = 1.0;
        for j in lower_range {
            let t = (scratch.deltas[j] / self.tau).tanh();
            scratch.tanhs[j] = t;
            neg_prod *= -t;
        }
        0.5 * (1.0 - neg_prod)
    }

    /// Fill `scratch.deltas` (all chains) and, for interpose models,
    /// `scratch.g_soft` and the per-lower-chain (A, B) split.
    fn forward_deltas(&self, record: &RecordFeatures, scratch: &mut Scratch) {
        match self.topology {
            CombinedTopology::Xor { .. } => {
                for (j, chain) in self.chains.iter().enumerate() {
                    scratch.deltas[j] = dot_i8(chain, &record.psi);
                }
            }
            CombinedTopology::Interpose { x, .. } => {
                let mut g = 1.0;
                for (u, chain) in self.chains[..x].iter().enumerate() {
                    let delta = dot_i8(chain, &record.psi);
                    scratch.deltas[u] = delta;
                    let t = (delta / self.tau).tanh();
                    scratch.upper_tanhs[u] = t;
                    g *= -t;
                }
                scratch.g_soft = g;
                let base = record.base.as_ref().expect("interpose features carry base");
                let q = record.insert_position;
                for (l, chain) in self.chains[x..].iter().enumerate() {
                    let (a, b) = split_dot(chain, base, q);
                    scratch.split[l] = (a, b);
                    scratch.deltas[x + l] = g * a + b;
                }
            }
        }
    }

    /// Export as a simulation instance (noise-free), using the shared
    /// instance schema.
    pub fn to_puf_instance(&self, seed: u64) -> Result<PufInstance> {
        let topology = match self.topology {
            CombinedTopology::Xor { .. } => {
                let chains = self
                    .chains
                    .iter()
                    .map(|c| WeightVector::new(c.clone()))
                    .collect::<Result<Vec<_>>>()?;
                if chains.len() == 1 {
                    PufTopology::Apuf(chains.into_iter().next().unwrap())
                } else {
                    PufTopology::XorApuf(chains)
                }
            }
            CombinedTopology::Interpose {
                x,
                insert_position,
                ..
            } => {
                let upper = self.chains[..x]
                    .iter()
                    .map(|c| WeightVector::new(c.clone()))
                    .collect::<Result<Vec<_>>>()?;
                let lower = self.chains[x..]
                    .iter()
                    .map(|c| WeightVector::new(c.clone()))
                    .collect::<Result<Vec<_>>>()?;
                PufTopology::Interpose {
                    upper,
                    lower,
                    insert_position,
                }
            }
        };
        PufInstance::new(topology, NoiseModel::none(), seed)
    }
}

fn dot_i8(w: &[f64], feats: &[i8]) -> f64 {
    debug_assert_eq!(w.len(), feats.len());
    let mut acc = 0.0;
    for (wi, &fi) in w.iter().zip(feats) {
        acc += wi * f64::from(fi);
    }
    acc
}

/// Split dot product of a lower chain against the pure suffix factors:
/// positions up to and including the insertion index are scaled by the
/// inserted factor, the rest are not.
fn split_dot(w: &[f64], base: &[i8], q: usize) -> (f64, f64) {
    let mut a = 0.0;
    for (wi, &bi) in w[..=q].iter().zip(&base[..=q]) {
        a += wi * f64::from(bi);
    }
    let mut b = 0.0;
    for (wi, &bi) in w[q + 1..].iter().zip(&base[q + 1..]) {
        b += wi * f64::from(bi);
    }
    (a, b)
}

/// Per-record features the trainer consumes.
#[derive(Debug, Clone)]
pub(crate) struct RecordFeatures {
    /// Feature vector of the raw challenge (n+1 entries).
    pub psi: Vec<i8>,
    /// For interpose targets: suffix factors of the lower challenge with
    /// the inserted position's factor left out (n+2 entries).
    pub base: Option<Vec<i8>>,
    pub insert_position: usize,
}

impl RecordFeatures {
    pub fn from_challenge(topology: &CombinedTopology, c: &Challenge) -> Self {
        let psi = feature_transform(c).elems().to_vec();
        match topology {
            CombinedTopology::Xor { .. } => RecordFeatures {
                psi,
                base: None,
                insert_position: 0,
            },
            CombinedTopology::Interpose {
                n, insert_position, ..
            } => {
                // Lower challenge: c with a placeholder inserted at q. The
                // placeholder's factor is treated as neutral; the model
                // multiplies it back in as the (soft or hard) upper
                // response.
                let q = *insert_position;
                let mut factors = Vec::with_capacity(n + 1);
                factors.extend(c.bits()[..q].iter().map(|&b| if b == 1 { -1i8 } else { 1 }));
                factors.push(1);
                factors.extend(c.bits()[q..].iter().map(|&b| if b == 1 { -1i8 } else { 1 }));
                let mut base = vec![1i8; n + 2];
                for i in (0..=*n).rev() {
                    base[i] = factors[i] * base[i + 1];
                }
                RecordFeatures {
                    psi,
                    base: Some(base),
                    insert_position: q,
                }
            }
        }
    }

    pub fn from_psi(topology: &CombinedTopology, psi: &FeatureVector) -> Self {
        RecordFeatures::from_challenge(topology, &inverse_feature_transform(psi))
    }
}

/// Reusable per-record buffers.
pub(crate) struct Scratch {
    deltas: Vec<f64>,
    tanhs: Vec<f64>,
    upper_tanhs: Vec<f64>,
    split: Vec<(f64, f64)>,
    g_soft: f64,
}

impl Scratch {
    pub(crate) fn new(chain_count: usize, upper_count: usize) -> Self {
        Scratch {
            deltas: vec![0.0; chain_count],
            tanhs: vec![0.0; chain_count],
            upper_tanhs: vec![0.0; upper_count],
            split: vec![(0.0, 0.0); chain_count - upper_count],
            g_soft: 1.0,
        }
    }
}

/// Loss weights and training schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinedLossConfig {
    /// Weight of the logistic response term.
    pub weight_response: f64,
    /// Weight of the per-chain |delta| correlation term.
    pub weight_corr: f64,
    /// Weight of the squared-norm penalty.
    pub weight_norm_penalty: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Independent initializations; the best-by-holdout model wins.
    pub trials: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Multiplicative step decay applied every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    pub learn_tau: bool,
    pub seed: u64,
}

impl Default for CombinedLossConfig {
    fn default() -> Self {
        CombinedLossConfig {
            weight_response: 1.0,
            weight_corr: 1.0,
            weight_norm_penalty: 1e-2,
            epochs: 25,
            batch_size: 256,
            trials: 6,
            learning_rate: 0.05,
            momentum: 0.9,
            lr_decay: 0.5,
            decay_every: 10,
            learn_tau: true,
            seed: 0,
        }
    }
}

impl CombinedLossConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            self.weight_response,
            self.weight_corr,
            self.weight_norm_penalty,
        ];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidParameter(
                "loss weights must be non-negative".into(),
            ));
        }
        if self.weight_response + self.weight_corr <= 0.0 {
            return Err(Error::InvalidParameter(
                "at least one of the response and correlation terms must be active".into(),
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.trials == 0 {
            return Err(Error::InvalidParameter(
                "epochs, batch_size and trials must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidParameter("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// A view of one minibatch: full arrays plus the indices that belong to the
/// batch, so shuffled epochs need no copying.
pub(crate) struct Batch<'a> {
    pub records: &'a [RecordFeatures],
    pub responses: &'a [bool],
    pub targets: Option<&'a [f64]>,
    pub indices: &'a [usize],
}

const PROB_CLAMP: f64 = 1e-12;

/// Gradient with the same shape as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedGradient {
    pub chains: Vec<Vec<f64>>,
    pub tau: f64,
}

impl CombinedGradient {
    fn zeros(model: &CombinedModel) -> Self {
        CombinedGradient {
            chains: model.chains.iter().map(|c| vec![0.0; c.len()]).collect(),
            tau: 0.0,
        }
    }
}

pub(crate) fn combined_loss_batch(
    model: &CombinedModel,
    batch: &Batch<'_>,
    cfg: &CombinedLossConfig,
) -> Result<f64> {
    Ok(loss_and_gradient(model, batch, cfg, false)?.0)
}

pub(crate) fn combined_gradient_batch(
    model: &CombinedModel,
    batch: &Batch<'_>,
    cfg: &CombinedLossConfig,
) -> Result<(f64, CombinedGradient)> {
    let (loss, grad) = loss_and_gradient(model, batch, cfg, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

/// One forward (and optionally backward) pass over a batch.
///
/// Loss = weight_response * mean BCE(p, r)
///      - weight_corr * mean_j rho(|delta_j|, targets)
///      + weight_norm_penalty * sum_j (|W_j|^2 - dim_j)^2.
fn loss_and_gradient(
    model: &CombinedModel,
    batch: &Batch<'_>,
    cfg: &CombinedLossConfig,
    want_gradient: bool,
) -> Result<(f64, Option<CombinedGradient>)> {
    let indices = batch.indices;
    if indices.is_empty() {
        return Err(Error::Degenerate("empty batch".into()));
    }
    if cfg.weight_corr > 0.0 && batch.targets.is_none() {
        return Err(Error::InvalidParameter(
            "correlation term enabled but the batch carries no targets".into(),
        ));
    }
    let h = indices.len();
    let chain_count = model.topology.chain_count();
    let upper_count = model.upper_count();
    let lower_count = chain_count - upper_count;
    let tau = model.tau;

    // Forward pass, keeping per-record state for the backward pass and the
    // batch-level correlation statistics.
    let mut deltas = vec![0.0f64; h * chain_count];
    let mut probabilities = vec![0.0f64; h];
    let mut g_soft = vec![1.0f64; h];
    let mut splits = vec![(0.0f64, 0.0f64); h * lower_count.max(1)];
    let mut scratch = Scratch::new(chain_count, upper_count);

    let mut bce_sum = 0.0;
    for (pos, &idx) in indices.iter().enumerate() {
        let record = &batch.records[idx];
        let p = model.soft_response(record, &mut scratch);
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        probabilities[pos] = p;
        deltas[pos * chain_count..(pos + 1) * chain_count].copy_from_slice(&scratch.deltas);
        if upper_count > 0 {
            g_soft[pos] = scratch.g_soft;
            splits[pos * lower_count..(pos + 1) * lower_count].copy_from_slice(&scratch.split);
        }
        let r = if batch.responses[idx] { 1.0 } else { 0.0 };
        bce_sum += -(r * p.ln() + (1.0 - r) * (1.0 - p).ln());
    }
    let mut loss = cfg.weight_response * bce_sum / h as f64;

    // Correlation statistics per chain over the batch.
    struct CorrStats {
        rho: f64,
        x_mean: f64,
        sxy_over: f64, // rho / sxx, cached for the gradient
        sqrt_sxx_syy: f64,
        degenerate: bool,
    }
    let mut corr: Vec<CorrStats> = Vec::new();
    let mut y_centered = Vec::new();
    if cfg.weight_corr > 0.0 {
        let targets = batch.targets.unwrap();
        let y_mean = indices.iter().map(|&i| targets[i]).sum::<f64>() / h as f64;
        y_centered = indices
            .iter()
            .map(|&i| targets[i] - y_mean)
            .collect::<Vec<f64>>();
        let syy: f64 = y_centered.iter().map(|v| v * v).sum();
        for j in 0..chain_count {
            let x_mean = (0..h).map(|pos| deltas[pos * chain_count + j].abs()).sum::<f64>()
                / h as f64;
            let mut sxx = 0.0;
            let mut sxy = 0.0;
            for (pos, yc) in y_centered.iter().enumerate() {
                let xc = deltas[pos * chain_count + j].abs() - x_mean;
                sxx += xc * xc;
                sxy += xc * yc;
            }
            if sxx <= 0.0 || syy <= 0.0 {
                corr.push(CorrStats {
                    rho: 0.0,
                    x_mean,
                    sxy_over: 0.0,
                    sqrt_sxx_syy: 1.0,
                    degenerate: true,
                });
                continue;
            }
            let denom = (sxx * syy).sqrt();
            let rho = sxy / denom;
            corr.push(CorrStats {
                rho,
                x_mean,
                sxy_over: rho / sxx,
                sqrt_sxx_syy: denom,
                degenerate: false,
            });
        }
        let rho_mean = corr.iter().map(|c| c.rho).sum::<f64>() / chain_count as f64;
        loss -= cfg.weight_corr * rho_mean;
    }

    // Norm penalty.
    let dims = model.topology.chain_dims();
    if cfg.weight_norm_penalty > 0.0 {
        for (chain, dim) in model.chains.iter().zip(&dims) {
            let sq: f64 = chain.iter().map(|v| v * v).sum();
            let gap = sq - *dim as f64;
            loss += cfg.weight_norm_penalty * gap * gap;
        }
    }

    if !want_gradient {
        return Ok((loss, None));
    }

    let mut grad = CombinedGradient::zeros(model);

    // Backward: accumulate per-record adjoints on the deltas, then map
    // through the feature structure into the weights.
    let corr_scale = cfg.weight_corr / chain_count as f64;
    let mut factors = vec![0.0f64; lower_count];
    let mut adj_all = vec![0.0f64; chain_count];
    for (pos, &idx) in indices.iter().enumerate() {
        let record = &batch.records[idx];
        let row_deltas = &deltas[pos * chain_count..(pos + 1) * chain_count];
        let p = probabilities[pos];
        let r = if batch.responses[idx] { 1.0 } else { 0.0 };
        // d(mean BCE)/dp for this record.
        let dl_dp = cfg.weight_response * (p - r) / (p * (1.0 - p)) / h as f64;

        // Soft-XOR structure over the lower chains: p = (1 - prod f_j)/2
        // with f_j = -tanh(delta_j / tau).
        let lower = &row_deltas[upper_count..];
        for (j, &d) in lower.iter().enumerate() {
            factors[j] = -((d / tau).tanh());
        }
        let loo = leave_one_out_products(&factors);

        // Adjoint on each lower delta plus the direct tau path.
        let mut tau_adj = 0.0;
        adj_all.iter_mut().for_each(|a| *a = 0.0);
        for j in 0..lower_count {
            let t = -factors[j];
            let sech2 = 1.0 - t * t;
            // dp/df_j = -loo_j / 2; df_j/ddelta = -sech2/tau.
            let dp_df = -0.5 * loo[j];
            adj_all[upper_count + j] += dl_dp * dp_df * (-sech2 / tau);
            // df_j/dtau = sech2 * delta / tau^2.
            tau_adj += dl_dp * dp_df * (sech2 * lower[j] / (tau * tau));
        }

        // Correlation adjoints act on |delta| of every chain.
        if cfg.weight_corr > 0.0 {
            for (j, stats) in corr.iter().enumerate() {
                if stats.degenerate {
                    continue;
                }
                let x = row_deltas[j].abs();
                let xc = x - stats.x_mean;
                let drho_dx = y_centered[pos] / stats.sqrt_sxx_syy - stats.sxy_over * xc;
                // Loss carries -corr_scale * rho; |x|' = sign(delta), with
                // subgradient 0 at exactly zero.
                let sign = if row_deltas[j] > 0.0 {
                    1.0
                } else if row_deltas[j] < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                adj_all[j] += -corr_scale * drho_dx * sign;
            }
        }

        // Map adjoints into the weights.
        match model.topology {
            CombinedTopology::Xor { .. } => {
                for (j, adj) in adj_all.iter().enumerate() {
                    if *adj != 0.0 {
                        axpy_i8(&mut grad.chains[j], *adj, &record.psi);
                    }
                }
                grad.tau += tau_adj;
            }
            CombinedTopology::Interpose { x, .. } => {
                let base = record.base.as_ref().expect("interpose features carry base");
                let q = record.insert_position;
                let g = g_soft[pos];
                let row_splits = &splits[pos * lower_count..(pos + 1) * lower_count];

                // Lower chains: delta = g*A + B.
                let mut adj_g = 0.0;
                for j in 0..lower_count {
                    let adj = adj_all[upper_count + j];
                    if adj != 0.0 {
                        let chain_grad = &mut grad.chains[x + j];
                        for i in 0..=q {
                            chain_grad[i] += adj * g * f64::from(base[i]);
                        }
                        for i in (q + 1)..base.len() {
                            chain_grad[i] += adj * f64::from(base[i]);
                        }
                        adj_g += adj * row_splits[j].0;
                    }
                }

                // Upper chains through the soft inserted factor
                // g = prod_u(-tanh(delta_u / tau)).
                let upper_deltas = &row_deltas[..x];
                let mut upper_factors = vec![0.0f64; x];
                for (u, &d) in upper_deltas.iter().enumerate() {
                    upper_factors[u] = -((d / tau).tanh());
                }
                let upper_loo = leave_one_out_products(&upper_factors);
                for u in 0..x {
                    let t = -upper_factors[u];
                    let sech2 = 1.0 - t * t;
                    let mut adj_up = adj_g * upper_loo[u] * (-sech2 / tau);
                    // dg/dtau path.
                    tau_adj += adj_g * upper_loo[u] * (sech2 * upper_deltas[u] / (tau * tau));
                    // Correlation acting directly on the upper |delta|.
                    adj_up += adj_all[u];
                    if adj_up != 0.0 {
                        axpy_i8(&mut grad.chains[u], adj_up, &record.psi);
                    }
                }
                grad.tau += tau_adj;
            }
        }
    }

    // Norm penalty gradient: 4 * weight * (|W|^2 - dim) * W.
    if cfg.weight_norm_penalty > 0.0 {
        for ((chain, chain_grad), dim) in model
            .chains
            .iter()
            .zip(&mut grad.chains)
            .zip(&dims)
        {
            let sq: f64 = chain.iter().map(|v| v * v).sum();
            let scale = 4.0 * cfg.weight_norm_penalty * (sq - *dim as f64);
            for (g, w) in chain_grad.iter_mut().zip(chain) {
                *g += scale * w;
            }
        }
    }

    if !cfg.learn_tau {
        grad.tau = 0.0;
    }

    Ok((loss, Some(grad)))
}

fn leave_one_out_products(factors: &[f64]) -> Vec<f64> {
    let n = factors.len();
    let mut loo = vec![1.0f64; n];
    // Prefix pass then suffix pass; avoids dividing by near-zero factors.
    let mut prefix = 1.0;
    for j in 0..n {
        loo[j] = prefix;
        prefix *= factors[j];
    }
    let mut suffix = 1.0;
    for j in (0..n).rev() {
        loo[j] *= suffix;
        suffix *= factors[j];
    }
    loo
}

fn axpy_i8(acc: &mut [f64], alpha: f64, feats: &[i8]) {
    for (a, &f) in acc.iter_mut().zip(feats) {
        *a += alpha * f64::from(f);
    }
}

/// Public single-batch loss over explicit feature/response/target slices,
/// mainly for diagnostics and the gradient checks.
pub fn combined_loss(
    model: &CombinedModel,
    challenges: &[Challenge],
    responses: &[bool],
    targets: Option<&[f64]>,
    cfg: &CombinedLossConfig,
) -> Result<f64> {
    let records: Vec<RecordFeatures> = challenges
        .iter()
        .map(|c| RecordFeatures::from_challenge(&model.topology, c))
        .collect();
    let indices: Vec<usize> = (0..records.len()).collect();
    combined_loss_batch(
        model,
        &Batch {
            records: &records,
            responses,
            targets,
            indices: &indices,
        },
        cfg,
    )
}

/// Analytic gradient of [`combined_loss`] with respect to every weight and
/// the temperature.
pub fn combined_gradient(
    model: &CombinedModel,
    challenges: &[Challenge],
    responses: &[bool],
    targets: Option<&[f64]>,
    cfg: &CombinedLossConfig,
) -> Result<(f64, CombinedGradient)> {
    let records: Vec<RecordFeatures> = challenges
        .iter()
        .map(|c| RecordFeatures::from_challenge(&model.topology, c))
        .collect();
    let indices: Vec<usize> = (0..records.len()).collect();
    combined_gradient_batch(
        model,
        &Batch {
            records: &records,
            responses,
            targets,
            indices: &indices,
        },
        cfg,
    )
}
