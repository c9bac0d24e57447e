//! Delay models of the Arbiter-PUF family and their simulation.

mod transform;

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{derive_rng, StreamKind};

pub use transform::{feature_transform, inverse_feature_transform, Challenge, FeatureVector};

/// Delay weights of a single arbiter chain, one entry per stage plus the
/// arbiter bias term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.len() < 2 {
            return Err(Error::InvalidParameter(
                "weight vector needs at least two entries".into(),
            ));
        }
        if !w.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter(
                "weight vector entries must be finite".into(),
            ));
        }
        Ok(WeightVector(w))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn stage_count(&self) -> usize {
        self.0.len() - 1
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Unit-length copy. Errors on the zero vector.
    pub fn normalized(&self) -> Result<Self> {
        let norm = self.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Degenerate("cannot normalize zero weight vector".into()));
        }
        Ok(WeightVector(self.0.iter().map(|v| v / norm).collect()))
    }

    pub fn negated(&self) -> Self {
        WeightVector(self.0.iter().map(|v| -v).collect())
    }
}

/// The signed delay difference accumulated along the two racing paths.
pub fn delay_difference(w: &WeightVector, psi: &FeatureVector) -> Result<f64> {
    if w.len() != psi.len() {
        return Err(Error::LengthMismatch {
            expected: w.len(),
            actual: psi.len(),
        });
    }
    Ok(w.as_slice()
        .iter()
        .zip(psi.elems())
        .map(|(&wi, &pi)| wi * f64::from(pi))
        .sum())
}

/// Response convention: the non-negative half-space maps to 1.
#[inline]
pub fn response_bit(delta: f64) -> bool {
    delta >= 0.0
}

/// Draw the weights of a fresh arbiter chain: `n + 1` independent zero-mean
/// normal values with standard deviation `sigma`.
pub fn sample_apuf(n: usize, sigma: f64, rng: &mut impl Rng) -> WeightVector {
    assert!(n >= 1, "stage count must be positive");
    assert!(sigma > 0.0, "manufacturing sigma must be positive");
    let dist = Normal::new(0.0, sigma).expect("valid normal");
    WeightVector((0..=n).map(|_| dist.sample(rng)).collect())
}

/// How measurement noise enters the simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    /// Deterministic evaluation.
    None,
    /// Every weight is perturbed by a fresh normal draw on each evaluation;
    /// the perturbation standard deviation is `sigma_noise` times the
    /// manufacturing sigma (taken as 1).
    Weight,
    /// A single normal perturbation with standard deviation `sigma_noise` is
    /// added to each constituent's delay difference per evaluation.
    Delta,
}

/// Noise attached to a PUF instance. `sigma_noise == 0` normalizes to
/// `NoiseKind::None` so that the noiseless case is exactly deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    pub sigma_noise: f64,
}

impl NoiseModel {
    pub fn new(kind: NoiseKind, sigma_noise: f64) -> Result<Self> {
        if !sigma_noise.is_finite() || sigma_noise < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "sigma_noise must be a non-negative finite value, got {sigma_noise}"
            )));
        }
        if sigma_noise == 0.0 {
            return Ok(NoiseModel {
                kind: NoiseKind::None,
                sigma_noise: 0.0,
            });
        }
        Ok(NoiseModel { kind, sigma_noise })
    }

    pub fn none() -> Self {
        NoiseModel {
            kind: NoiseKind::None,
            sigma_noise: 0.0,
        }
    }

    pub fn is_noiseless(&self) -> bool {
        matches!(self.kind, NoiseKind::None)
    }
}

/// Structure of a simulated PUF.
#[derive(Debug, Clone, PartialEq)]
pub enum PufTopology {
    /// A single arbiter chain.
    Apuf(WeightVector),
    /// Parallel chains sharing one challenge, responses XOR-ed.
    XorApuf(Vec<WeightVector>),
    /// Upper XOR APUF whose response bit is inserted into the lower layer's
    /// challenge at `insert_position`; the lower layer has one more stage.
    Interpose {
        upper: Vec<WeightVector>,
        lower: Vec<WeightVector>,
        insert_position: usize,
    },
    /// The inner PUF is only ever evaluated on a digest of the submitted
    /// challenge, so callers cannot choose correlated inputs.
    Obfuscated(Box<PufTopology>),
}

impl PufTopology {
    /// Challenge length accepted at the outer interface.
    pub fn stage_count(&self) -> usize {
        match self {
            PufTopology::Apuf(w) => w.stage_count(),
            PufTopology::XorApuf(ws) => ws[0].stage_count(),
            PufTopology::Interpose { upper, .. } => upper[0].stage_count(),
            PufTopology::Obfuscated(inner) => inner.stage_count(),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            PufTopology::Apuf(_) => Ok(()),
            PufTopology::XorApuf(ws) => {
                if ws.is_empty() {
                    return Err(Error::InvalidPuf("XOR APUF needs at least one chain".into()));
                }
                let len = ws[0].len();
                if ws.iter().any(|w| w.len() != len) {
                    return Err(Error::InvalidPuf(
                        "all XOR APUF chains must share one stage count".into(),
                    ));
                }
                Ok(())
            }
            PufTopology::Interpose {
                upper,
                lower,
                insert_position,
            } => {
                if upper.is_empty() || lower.is_empty() {
                    return Err(Error::InvalidPuf("interpose layers must be non-empty".into()));
                }
                let n = upper[0].stage_count();
                if upper.iter().any(|w| w.stage_count() != n) {
                    return Err(Error::InvalidPuf("upper layer stage counts differ".into()));
                }
                if lower.iter().any(|w| w.stage_count() != n + 1) {
                    return Err(Error::InvalidPuf(
                        "lower layer must have exactly one more stage than the upper".into(),
                    ));
                }
                if *insert_position > n {
                    return Err(Error::InvalidPuf(format!(
                        "insert position {insert_position} out of range 0..={n}"
                    )));
                }
                Ok(())
            }
            PufTopology::Obfuscated(inner) => {
                if matches!(**inner, PufTopology::Obfuscated(_)) {
                    return Err(Error::InvalidPuf(
                        "nested challenge obfuscation is not supported".into(),
                    ));
                }
                inner.validate()
            }
        }
    }
}

/// A concrete, evaluatable PUF with its noise model.
///
/// Evaluation never mutates the instance; noise draws come from the
/// caller-provided generator so that parallel callers can own disjoint,
/// reproducible streams.
#[derive(Debug, Clone, PartialEq)]
pub struct PufInstance {
    topology: PufTopology,
    noise: NoiseModel,
    seed: u64,
}

impl PufInstance {
    pub fn new(topology: PufTopology, noise: NoiseModel, seed: u64) -> Result<Self> {
        topology.validate()?;
        let noise = NoiseModel::new(noise.kind, noise.sigma_noise)?;
        Ok(PufInstance {
            topology,
            noise,
            seed,
        })
    }

    /// Fresh single APUF with unit manufacturing sigma.
    pub fn random_apuf(n: usize, noise: NoiseModel, seed: u64) -> Result<Self> {
        let mut rng = derive_rng(seed, StreamKind::Instance, 0);
        let w = sample_apuf(n, 1.0, &mut rng);
        PufInstance::new(PufTopology::Apuf(w), noise, seed)
    }

    /// Fresh k-XOR APUF with unit manufacturing sigma.
    pub fn random_xor(n: usize, k: usize, noise: NoiseModel, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidPuf("k must be at least 1".into()));
        }
        let chains = (0..k)
            .map(|j| {
                let mut rng = derive_rng(seed, StreamKind::Instance, j as u64);
                sample_apuf(n, 1.0, &mut rng)
            })
            .collect();
        PufInstance::new(PufTopology::XorApuf(chains), noise, seed)
    }

    /// Fresh (x, y) interpose PUF; the upper response bit is inserted in the
    /// middle of the lower layer's challenge.
    pub fn random_interpose(n: usize, x: usize, y: usize, noise: NoiseModel, seed: u64) -> Result<Self> {
        if x == 0 || y == 0 {
            return Err(Error::InvalidPuf("interpose layer sizes must be at least 1".into()));
        }
        let upper = (0..x)
            .map(|j| {
                let mut rng = derive_rng(seed, StreamKind::Instance, j as u64);
                sample_apuf(n, 1.0, &mut rng)
            })
            .collect();
        let lower = (0..y)
            .map(|j| {
                let mut rng = derive_rng(seed, StreamKind::Instance, (x + j) as u64);
                sample_apuf(n + 1, 1.0, &mut rng)
            })
            .collect();
        PufInstance::new(
            PufTopology::Interpose {
                upper,
                lower,
                insert_position: (n + 1) / 2,
            },
            noise,
            seed,
        )
    }

    /// Wrap this instance's topology behind the challenge digest.
    pub fn obfuscated(self) -> Result<Self> {
        PufInstance::new(
            PufTopology::Obfuscated(Box::new(self.topology)),
            self.noise,
            self.seed,
        )
    }

    pub fn topology(&self) -> &PufTopology {
        &self.topology
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stage_count(&self) -> usize {
        self.topology.stage_count()
    }

    /// Ground-truth constituent chains for accuracy reporting, where the
    /// topology exposes them directly.
    pub fn constituents(&self) -> Option<&[WeightVector]> {
        match &self.topology {
            PufTopology::Apuf(w) => Some(std::slice::from_ref(w)),
            PufTopology::XorApuf(ws) => Some(ws),
            _ => None,
        }
    }

    /// Evaluate one challenge. With a noiseless model the result is a pure
    /// function of the challenge; otherwise fresh perturbations are drawn
    /// from `rng` on every call.
    pub fn evaluate(&self, c: &Challenge, rng: &mut ChaCha8Rng) -> Result<bool> {
        if c.len() != self.stage_count() {
            return Err(Error::LengthMismatch {
                expected: self.stage_count(),
                actual: c.len(),
            });
        }
        evaluate_topology(&self.topology, &self.noise, c, rng)
    }

    /// Noise-free reference response, regardless of the attached model.
    pub fn evaluate_noiseless(&self, c: &Challenge) -> Result<bool> {
        if c.len() != self.stage_count() {
            return Err(Error::LengthMismatch {
                expected: self.stage_count(),
                actual: c.len(),
            });
        }
        // The generator is never touched on the noiseless path.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        evaluate_topology_noise(&self.topology, &NoiseModel::none(), c, &mut rng)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::malformed(path, e.to_string()))
    }
}

use rand_chacha::rand_core::SeedableRng;

fn evaluate_topology(
    topology: &PufTopology,
    noise: &NoiseModel,
    c: &Challenge,
    rng: &mut ChaCha8Rng,
) -> Result<bool> {
    evaluate_topology_noise(topology, noise, c, rng)
}

fn constituent_response(
    w: &WeightVector,
    psi: &FeatureVector,
    noise: &NoiseModel,
    rng: &mut ChaCha8Rng,
) -> Result<bool> {
    let mut delta = delay_difference(w, psi)?;
    match noise.kind {
        NoiseKind::None => {}
        NoiseKind::Weight => {
            // Perturb every weight independently; the +/-1 feature sign
            // carries the perturbation into the delay difference.
            for &p in psi.elems() {
                let eps: f64 = StandardNormal.sample(rng);
                delta += noise.sigma_noise * eps * f64::from(p);
            }
        }
        NoiseKind::Delta => {
            let eps: f64 = StandardNormal.sample(rng);
            delta += noise.sigma_noise * eps;
        }
    }
    Ok(response_bit(delta))
}

fn evaluate_topology_noise(
    topology: &PufTopology,
    noise: &NoiseModel,
    c: &Challenge,
    rng: &mut ChaCha8Rng,
) -> Result<bool> {
    match topology {
        PufTopology::Apuf(w) => {
            let psi = feature_transform(c);
            constituent_response(w, &psi, noise, rng)
        }
        PufTopology::XorApuf(ws) => {
            let psi = feature_transform(c);
            let mut acc = false;
            for w in ws {
                acc ^= constituent_response(w, &psi, noise, rng)?;
            }
            Ok(acc)
        }
        PufTopology::Interpose {
            upper,
            lower,
            insert_position,
        } => {
            let psi = feature_transform(c);
            let mut upper_bit = false;
            for w in upper {
                upper_bit ^= constituent_response(w, &psi, noise, rng)?;
            }
            let mut bits = Vec::with_capacity(c.len() + 1);
            bits.extend_from_slice(&c.bits()[..*insert_position]);
            bits.push(u8::from(upper_bit));
            bits.extend_from_slice(&c.bits()[*insert_position..]);
            let lower_challenge = Challenge::new(bits)?;
            let lower_psi = feature_transform(&lower_challenge);
            let mut acc = false;
            for w in lower {
                acc ^= constituent_response(w, &lower_psi, noise, rng)?;
            }
            Ok(acc)
        }
        PufTopology::Obfuscated(inner) => {
            let scrambled = scramble_challenge(c);
            evaluate_topology_noise(inner, noise, &scrambled, rng)
        }
    }
}

/// Replace a challenge by a fixed cryptographic digest of itself, expanded
/// to the challenge length. Preimage resistance of the digest is what stops
/// an attacker from choosing the effective challenge.
pub fn scramble_challenge(c: &Challenge) -> Challenge {
    let mut packed = vec![0u8; c.len().div_ceil(8)];
    for (i, &b) in c.bits().iter().enumerate() {
        if b == 1 {
            packed[i / 8] |= 1 << (7 - (i % 8));
        }
    }
    let mut bits = Vec::with_capacity(c.len());
    let mut counter: u32 = 0;
    while bits.len() < c.len() {
        let mut hasher = Sha256::new();
        hasher.update(&packed);
        hasher.update(counter.to_le_bytes());
        let digest = hasher.finalize();
        for byte in digest {
            for shift in (0..8).rev() {
                if bits.len() == c.len() {
                    break;
                }
                bits.push((byte >> shift) & 1);
            }
        }
        counter += 1;
    }
    Challenge::new(bits).expect("digest bits are 0/1")
}

// ---------------------------------------------------------------------------
// On-disk representation
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(tag = "topology", rename_all = "kebab-case")]
enum TopologyFile {
    Apuf {
        n: usize,
        weights: Vec<f64>,
    },
    XorApuf {
        n: usize,
        k: usize,
        weights: Vec<Vec<f64>>,
    },
    Interpose {
        n: usize,
        x: usize,
        y: usize,
        insert_position: usize,
        upper_weights: Vec<Vec<f64>>,
        lower_weights: Vec<Vec<f64>>,
    },
    Obfuscated {
        inner: Box<TopologyFile>,
    },
}

#[derive(Serialize, Deserialize)]
struct InstanceFile {
    #[serde(flatten)]
    topology: TopologyFile,
    noise_kind: NoiseKind,
    sigma_noise: f64,
    seed: u64,
}

fn topology_to_file(topology: &PufTopology) -> TopologyFile {
    match topology {
        PufTopology::Apuf(w) => TopologyFile::Apuf {
            n: w.stage_count(),
            weights: w.as_slice().to_vec(),
        },
        PufTopology::XorApuf(ws) => TopologyFile::XorApuf {
            n: ws[0].stage_count(),
            k: ws.len(),
            weights: ws.iter().map(|w| w.as_slice().to_vec()).collect(),
        },
        PufTopology::Interpose {
            upper,
            lower,
            insert_position,
        } => TopologyFile::Interpose {
            n: upper[0].stage_count(),
            x: upper.len(),
            y: lower.len(),
            insert_position: *insert_position,
            upper_weights: upper.iter().map(|w| w.as_slice().to_vec()).collect(),
            lower_weights: lower.iter().map(|w| w.as_slice().to_vec()).collect(),
        },
        PufTopology::Obfuscated(inner) => TopologyFile::Obfuscated {
            inner: Box::new(topology_to_file(inner)),
        },
    }
}

fn topology_from_file(file: TopologyFile) -> Result<PufTopology> {
    let check = |expected: usize, actual: usize, what: &str| -> Result<()> {
        if expected != actual {
            return Err(Error::InvalidPuf(format!(
                "{what}: declared {expected}, found {actual}"
            )));
        }
        Ok(())
    };
    match file {
        TopologyFile::Apuf { n, weights } => {
            check(n + 1, weights.len(), "apuf weight length")?;
            Ok(PufTopology::Apuf(WeightVector::new(weights)?))
        }
        TopologyFile::XorApuf { n, k, weights } => {
            check(k, weights.len(), "chain count")?;
            let ws = weights
                .into_iter()
                .map(|w| {
                    check(n + 1, w.len(), "chain weight length")?;
                    WeightVector::new(w)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(PufTopology::XorApuf(ws))
        }
        TopologyFile::Interpose {
            n,
            x,
            y,
            insert_position,
            upper_weights,
            lower_weights,
        } => {
            check(x, upper_weights.len(), "upper layer size")?;
            check(y, lower_weights.len(), "lower layer size")?;
            let upper = upper_weights
                .into_iter()
                .map(|w| {
                    check(n + 1, w.len(), "upper weight length")?;
                    WeightVector::new(w)
                })
                .collect::<Result<Vec<_>>>()?;
            let lower = lower_weights
                .into_iter()
                .map(|w| {
                    check(n + 2, w.len(), "lower weight length")?;
                    WeightVector::new(w)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(PufTopology::Interpose {
                upper,
                lower,
                insert_position,
            })
        }
        TopologyFile::Obfuscated { inner } => Ok(PufTopology::Obfuscated(Box::new(
            topology_from_file(*inner)?,
        ))),
    }
}

impl Serialize for PufInstance {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        InstanceFile {
            topology: topology_to_file(&self.topology),
            noise_kind: self.noise.kind,
            sigma_noise: self.noise.sigma_noise,
            seed: self.seed,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for PufInstance {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let file = InstanceFile::deserialize(deserializer)?;
        let topology = topology_from_file(file.topology).map_err(serde::de::Error::custom)?;
        let noise =
            NoiseModel::new(file.noise_kind, file.sigma_noise).map_err(serde::de::Error::custom)?;
        PufInstance::new(topology, noise, file.seed).map_err(serde::de::Error::custom)
    }
}

/// Query interface shared by simulated instances and test doubles.
///
/// Dataset collection is generic over this trait so that tests can count
/// queries and hardware-backed oracles can be slotted in.
pub trait PufOracle: Sync {
    fn stage_count(&self) -> usize;
    fn query(&self, c: &Challenge, rng: &mut ChaCha8Rng) -> Result<bool>;
}

impl PufOracle for PufInstance {
    fn stage_count(&self) -> usize {
        PufInstance::stage_count(self)
    }

    fn query(&self, c: &Challenge, rng: &mut ChaCha8Rng) -> Result<bool> {
        self.evaluate(c, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive_rng, StreamKind};

    fn all_challenges(n: usize) -> impl Iterator<Item = Challenge> {
        (0..(1u32 << n)).map(move |value| {
            Challenge::new((0..n).map(|i| ((value >> i) & 1) as u8).collect()).unwrap()
        })
    }

    #[test]
    fn delay_difference_known_values() {
        let w = WeightVector::new(vec![1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let psi = FeatureVector::new(vec![1, 1, 1, 1, 1]).unwrap();
        assert_eq!(delay_difference(&w, &psi).unwrap(), 1.0);

        let w = WeightVector::new(vec![1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        let psi = FeatureVector::new(vec![-1, 1, 1, 1, 1]).unwrap();
        assert_eq!(delay_difference(&w, &psi).unwrap(), 3.0);

        let short = FeatureVector::new(vec![1, 1]).unwrap();
        assert!(delay_difference(&w, &short).is_err());
    }

    #[test]
    fn single_flip_changes_delta_by_twice_the_weight() {
        let mut rng = derive_rng(3, StreamKind::Instance, 0);
        for _ in 0..20 {
            let w = sample_apuf(16, 1.0, &mut rng);
            let c = Challenge::random(16, &mut rng);
            let psi = feature_transform(&c);
            let delta = delay_difference(&w, &psi).unwrap();
            for i in 0..16 {
                let flipped = psi.flipped(i).unwrap();
                let delta2 = delay_difference(&w, &flipped).unwrap();
                let expected = delta - 2.0 * w.as_slice()[i] * f64::from(psi.elems()[i]);
                assert!((delta2 - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn apuf_evaluate_matches_delay_model_exhaustively() {
        let puf = PufInstance::random_apuf(8, NoiseModel::none(), 11).unwrap();
        let w = match puf.topology() {
            PufTopology::Apuf(w) => w.clone(),
            _ => unreachable!(),
        };
        let mut rng = derive_rng(0, StreamKind::Evaluation, 0);
        for c in all_challenges(8) {
            let psi = feature_transform(&c);
            let expected = response_bit(delay_difference(&w, &psi).unwrap());
            assert_eq!(puf.evaluate(&c, &mut rng).unwrap(), expected);
        }
    }

    #[test]
    fn trivial_responses() {
        let w = WeightVector::new(vec![1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let puf = PufInstance::new(PufTopology::Apuf(w.clone()), NoiseModel::none(), 0).unwrap();
        let c = Challenge::new(vec![0, 0, 0, 0]).unwrap();
        let mut rng = derive_rng(0, StreamKind::Evaluation, 0);
        assert!(puf.evaluate(&c, &mut rng).unwrap());

        // Two identical chains XOR to constant 0.
        let xor = PufInstance::new(
            PufTopology::XorApuf(vec![w.clone(), w]),
            NoiseModel::none(),
            0,
        )
        .unwrap();
        for c in all_challenges(4) {
            assert!(!xor.evaluate(&c, &mut rng).unwrap());
        }
    }

    #[test]
    fn xor_composition_exhaustive() {
        let puf = PufInstance::random_xor(8, 3, NoiseModel::none(), 21).unwrap();
        let chains = puf.constituents().unwrap().to_vec();
        let mut rng = derive_rng(0, StreamKind::Evaluation, 0);
        for c in all_challenges(8) {
            let psi = feature_transform(&c);
            let mut expected = false;
            for w in &chains {
                expected ^= response_bit(delay_difference(w, &psi).unwrap());
            }
            assert_eq!(puf.evaluate(&c, &mut rng).unwrap(), expected);
        }
    }

    #[test]
    fn flip_criterion_exhaustive() {
        // Flipping feature element i flips the response exactly when the
        // remaining delay (the sum without the i-th term) is smaller in
        // magnitude than the weight at i. A flip also implies the coarser
        // bound |delta| < 2|w[i]|, since the change in delta is exactly
        // -2 psi[i] w[i].
        let puf = PufInstance::random_apuf(8, NoiseModel::none(), 5).unwrap();
        let w = match puf.topology() {
            PufTopology::Apuf(w) => w.clone(),
            _ => unreachable!(),
        };
        for c in all_challenges(8) {
            let psi = feature_transform(&c);
            let delta = delay_difference(&w, &psi).unwrap();
            for i in 0..8 {
                let wi = w.as_slice()[i];
                let flipped_psi = psi.flipped(i).unwrap();
                let delta2 = delay_difference(&w, &flipped_psi).unwrap();
                let flips = response_bit(delta) != response_bit(delta2);
                let remainder = delta - f64::from(psi.elems()[i]) * wi;
                assert_eq!(flips, remainder.abs() < wi.abs(), "challenge {c:?} position {i}");
                if flips {
                    assert!(delta.abs() < 2.0 * wi.abs());
                }
            }
        }
    }

    #[test]
    fn noiseless_evaluation_is_deterministic() {
        let puf = PufInstance::random_xor(32, 4, NoiseModel::none(), 77).unwrap();
        let mut rng_a = derive_rng(1, StreamKind::Evaluation, 0);
        let mut rng_b = derive_rng(2, StreamKind::Evaluation, 9);
        let mut challenge_rng = derive_rng(3, StreamKind::Evaluation, 0);
        for _ in 0..100 {
            let c = Challenge::random(32, &mut challenge_rng);
            assert_eq!(
                puf.evaluate(&c, &mut rng_a).unwrap(),
                puf.evaluate(&c, &mut rng_b).unwrap()
            );
        }
    }

    #[test]
    fn weight_noise_flips_some_responses() {
        let noise = NoiseModel::new(NoiseKind::Weight, 0.05).unwrap();
        let puf = PufInstance::random_apuf(64, noise, 13).unwrap();
        let mut rng = derive_rng(4, StreamKind::Evaluation, 0);
        let mut challenge_rng = derive_rng(5, StreamKind::Evaluation, 0);
        let mut unstable = 0;
        for _ in 0..500 {
            let c = Challenge::random(64, &mut challenge_rng);
            let first = puf.evaluate(&c, &mut rng).unwrap();
            let any_differs = (0..9).any(|_| puf.evaluate(&c, &mut rng).unwrap() != first);
            if any_differs {
                unstable += 1;
            }
        }
        assert!(unstable > 0, "expected some unstable responses");
        assert!(unstable < 250, "noise level should keep most responses stable");
    }

    #[test]
    fn zero_sigma_normalizes_to_noiseless() {
        let noise = NoiseModel::new(NoiseKind::Weight, 0.0).unwrap();
        assert!(noise.is_noiseless());
    }

    #[test]
    fn sample_apuf_statistics() {
        let mut rng = derive_rng(99, StreamKind::Instance, 0);
        let draws: Vec<f64> = (0..100)
            .flat_map(|_| sample_apuf(999, 1.0, &mut rng).as_slice().to_vec())
            .collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / draws.len() as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.02, "std {}", var.sqrt());

        // Identical seed, doubled sigma scales every draw by two.
        let mut rng_a = derive_rng(7, StreamKind::Instance, 0);
        let mut rng_b = derive_rng(7, StreamKind::Instance, 0);
        let base = sample_apuf(16, 1.0, &mut rng_a);
        let doubled = sample_apuf(16, 2.0, &mut rng_b);
        for (a, b) in base.as_slice().iter().zip(doubled.as_slice()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sample_apuf_deterministic() {
        let mut rng_a = derive_rng(8, StreamKind::Instance, 0);
        let mut rng_b = derive_rng(8, StreamKind::Instance, 0);
        assert_eq!(
            sample_apuf(64, 1.0, &mut rng_a).as_slice(),
            sample_apuf(64, 1.0, &mut rng_b).as_slice()
        );
    }

    #[test]
    fn interpose_evaluation_uses_inserted_bit() {
        let puf = PufInstance::random_interpose(8, 1, 2, NoiseModel::none(), 31).unwrap();
        let (upper, lower, pos) = match puf.topology() {
            PufTopology::Interpose {
                upper,
                lower,
                insert_position,
            } => (upper.clone(), lower.clone(), *insert_position),
            _ => unreachable!(),
        };
        assert_eq!(pos, 4);
        let mut rng = derive_rng(0, StreamKind::Evaluation, 0);
        for c in all_challenges(8) {
            let psi = feature_transform(&c);
            let mut upper_bit = false;
            for w in &upper {
                upper_bit ^= response_bit(delay_difference(w, &psi).unwrap());
            }
            let mut bits = c.bits()[..pos].to_vec();
            bits.push(u8::from(upper_bit));
            bits.extend_from_slice(&c.bits()[pos..]);
            let lower_psi = feature_transform(&Challenge::new(bits).unwrap());
            let mut expected = false;
            for w in &lower {
                expected ^= response_bit(delay_difference(w, &lower_psi).unwrap());
            }
            assert_eq!(puf.evaluate(&c, &mut rng).unwrap(), expected);
        }
    }

    #[test]
    fn obfuscation_scrambles_challenges() {
        let inner = PufInstance::random_xor(64, 2, NoiseModel::none(), 17).unwrap();
        let wrapped = inner.clone().obfuscated().unwrap();
        let mut rng = derive_rng(0, StreamKind::Evaluation, 0);
        let mut challenge_rng = derive_rng(6, StreamKind::Evaluation, 0);
        let mut differing = 0;
        for _ in 0..200 {
            let c = Challenge::random(64, &mut challenge_rng);
            let direct = inner.evaluate(&c, &mut rng).unwrap();
            let scrambled = wrapped.evaluate(&c, &mut rng).unwrap();
            // Same challenge twice gives the same scrambled response.
            assert_eq!(scrambled, wrapped.evaluate(&c, &mut rng).unwrap());
            if direct != scrambled {
                differing += 1;
            }
        }
        assert!(differing > 50, "digest should decorrelate responses");
    }

    #[test]
    fn instance_json_round_trip() {
        let noise = NoiseModel::new(NoiseKind::Delta, 0.316).unwrap();
        for puf in [
            PufInstance::random_apuf(16, NoiseModel::none(), 1).unwrap(),
            PufInstance::random_xor(16, 4, noise, 2).unwrap(),
            PufInstance::random_interpose(16, 1, 4, NoiseModel::none(), 3).unwrap(),
            PufInstance::random_xor(16, 2, NoiseModel::none(), 4)
                .unwrap()
                .obfuscated()
                .unwrap(),
        ] {
            let json = serde_json::to_string(&puf).unwrap();
            let back: PufInstance = serde_json::from_str(&json).unwrap();
            assert_eq!(puf, back);
        }
    }

    #[test]
    fn instance_file_rejects_inconsistent_lengths() {
        let json = r#"{
            "topology": "xor-apuf", "n": 4, "k": 2,
            "weights": [[0.1, 0.2, 0.3, 0.4, 0.5], [0.1, 0.2]],
            "noise_kind": "none", "sigma_noise": 0.0, "seed": 0
        }"#;
        assert!(serde_json::from_str::<PufInstance>(json).is_err());
    }

    #[test]
    fn challenge_length_is_checked() {
        let puf = PufInstance::random_apuf(16, NoiseModel::none(), 1).unwrap();
        let c = Challenge::random(8, &mut derive_rng(0, StreamKind::Evaluation, 0));
        let mut rng = derive_rng(0, StreamKind::Evaluation, 1);
        assert!(puf.evaluate(&c, &mut rng).is_err());
    }
}
