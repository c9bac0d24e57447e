//! Challenges, feature (parity) vectors and the transforms between them.
//!
//! An n-stage arbiter chain is linear in the feature vector, not in the raw
//! challenge: element `i` of the feature vector is the product of
//! `(1 - 2c[j])` over all later challenge bits `j >= i`, with a constant `+1`
//! appended. Flipping a single feature element therefore corresponds to
//! flipping two consecutive challenge bits (or just `c[0]` for element 0),
//! which is what lets an attacker choose challenges that are close in
//! feature space.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An n-bit PUF challenge. Each entry is 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Challenge(Vec<u8>);

impl Challenge {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::InvalidChallenge("challenge must be non-empty".into()));
        }
        if let Some(bad) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::InvalidChallenge(format!(
                "challenge bits must be 0 or 1, got {bad}"
            )));
        }
        Ok(Challenge(bits))
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Uniformly random challenge of length `n`.
    pub fn random(n: usize, rng: &mut impl Rng) -> Self {
        Challenge((0..n).map(|_| u8::from(rng.random::<bool>())).collect())
    }

    /// Parse from a string of '0'/'1' characters.
    pub fn from_bit_string(s: &str) -> Result<Self> {
        let bits = s
            .chars()
            .map(|ch| match ch {
                '0' => Ok(0),
                '1' => Ok(1),
                other => Err(Error::InvalidChallenge(format!(
                    "unexpected character {other:?} in challenge string"
                ))),
            })
            .collect::<Result<Vec<u8>>>()?;
        Challenge::new(bits)
    }

    pub fn to_bit_string(&self) -> String {
        self.0.iter().map(|&b| if b == 1 { '1' } else { '0' }).collect()
    }
}

/// The ±1 feature vector of a challenge, one element longer than the
/// challenge. The last element is always `+1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureVector(Vec<i8>);

impl FeatureVector {
    pub fn new(elems: Vec<i8>) -> Result<Self> {
        if elems.len() < 2 {
            return Err(Error::InvalidFeatureVector(
                "feature vector needs at least two elements".into(),
            ));
        }
        if let Some(bad) = elems.iter().find(|&&e| e != 1 && e != -1) {
            return Err(Error::InvalidFeatureVector(format!(
                "feature elements must be +1 or -1, got {bad}"
            )));
        }
        if *elems.last().unwrap() != 1 {
            return Err(Error::InvalidFeatureVector(
                "last feature element must be +1".into(),
            ));
        }
        Ok(FeatureVector(elems))
    }

    pub fn elems(&self) -> &[i8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of challenge bits this vector corresponds to.
    pub fn stage_count(&self) -> usize {
        self.0.len() - 1
    }

    /// Copy with the sign at `position` flipped. Only positions before the
    /// fixed trailing `+1` may flip.
    pub fn flipped(&self, position: usize) -> Result<Self> {
        if position >= self.stage_count() {
            return Err(Error::InvalidParameter(format!(
                "flip position {position} out of range 0..{}",
                self.stage_count()
            )));
        }
        let mut elems = self.0.clone();
        elems[position] = -elems[position];
        Ok(FeatureVector(elems))
    }

    /// Hamming distance over the full element range.
    pub fn hamming_distance(&self, other: &FeatureVector) -> usize {
        self.0
            .iter()
            .zip(other.0.iter())
            .filter(|(a, b)| a != b)
            .count()
    }

    /// Encoding used by dataset files: '1' for +1, '0' for -1.
    pub fn to_sign_string(&self) -> String {
        self.0.iter().map(|&e| if e == 1 { '1' } else { '0' }).collect()
    }

    pub fn from_sign_string(s: &str) -> Result<Self> {
        let elems = s
            .chars()
            .map(|ch| match ch {
                '1' => Ok(1i8),
                '0' => Ok(-1i8),
                other => Err(Error::InvalidFeatureVector(format!(
                    "unexpected character {other:?} in feature string"
                ))),
            })
            .collect::<Result<Vec<i8>>>()?;
        FeatureVector::new(elems)
    }
}

/// Map a challenge to its feature vector.
pub fn feature_transform(c: &Challenge) -> FeatureVector {
    let n = c.len();
    let mut elems = vec![1i8; n + 1];
    // Suffix products: elems[i] = (1 - 2c[i]) * elems[i + 1].
    for i in (0..n).rev() {
        let factor: i8 = if c.bits()[i] == 1 { -1 } else { 1 };
        elems[i] = factor * elems[i + 1];
    }
    FeatureVector(elems)
}

/// Recover the challenge whose feature vector is `psi`.
///
/// Total on valid feature vectors: consecutive elements determine each
/// challenge bit via `c[j] = (1 - psi[j] * psi[j+1]) / 2`.
pub fn inverse_feature_transform(psi: &FeatureVector) -> Challenge {
    let n = psi.stage_count();
    let e = psi.elems();
    let bits = (0..n)
        .map(|j| u8::from(e[j] != e[j + 1]))
        .collect::<Vec<u8>>();
    Challenge(bits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ch(bits: &[u8]) -> Challenge {
        Challenge::new(bits.to_vec()).unwrap()
    }

    #[test]
    fn transform_known_values() {
        assert_eq!(feature_transform(&ch(&[0, 0, 0, 0])).elems(), &[1, 1, 1, 1, 1]);
        assert_eq!(
            feature_transform(&ch(&[1, 0, 0, 0])).elems(),
            &[-1, 1, 1, 1, 1]
        );
        // Hand evaluation of the suffix products for c = [0,1,0,1].
        assert_eq!(
            feature_transform(&ch(&[0, 1, 0, 1])).elems(),
            &[1, 1, -1, -1, 1]
        );
    }

    #[test]
    fn inverse_known_values() {
        let psi = FeatureVector::new(vec![1, 1, 1, 1, 1]).unwrap();
        assert_eq!(inverse_feature_transform(&psi), ch(&[0, 0, 0, 0]));
        let psi = FeatureVector::new(vec![-1, 1, 1, 1, 1]).unwrap();
        assert_eq!(inverse_feature_transform(&psi), ch(&[1, 0, 0, 0]));
        let psi = FeatureVector::new(vec![1, 1, -1, -1, 1]).unwrap();
        assert_eq!(inverse_feature_transform(&psi), ch(&[0, 1, 0, 1]));
    }

    #[test]
    fn round_trip_exhaustive_small() {
        for n in 1..=10usize {
            for value in 0..(1u32 << n) {
                let bits: Vec<u8> = (0..n).map(|i| ((value >> i) & 1) as u8).collect();
                let c = ch(&bits);
                let psi = feature_transform(&c);
                assert_eq!(inverse_feature_transform(&psi), c);
            }
        }
    }

    #[test]
    fn round_trip_randomized_n64() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let c = Challenge::random(64, &mut rng);
            assert_eq!(inverse_feature_transform(&feature_transform(&c)), c);
        }
    }

    #[test]
    fn psi_flip_maps_to_consecutive_challenge_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let c = Challenge::random(16, &mut rng);
            let psi = feature_transform(&c);
            for i in 0..psi.stage_count() {
                let flipped = psi.flipped(i).unwrap();
                let c2 = inverse_feature_transform(&flipped);
                let differing: Vec<usize> = (0..c.len())
                    .filter(|&j| c.bits()[j] != c2.bits()[j])
                    .collect();
                if i == 0 {
                    assert_eq!(differing, vec![0]);
                } else {
                    assert_eq!(differing, vec![i - 1, i]);
                }
            }
        }
    }

    #[test]
    fn rejects_invalid_inputs() {
        assert!(Challenge::new(vec![0, 2, 0]).is_err());
        assert!(Challenge::new(vec![]).is_err());
        assert!(FeatureVector::new(vec![1, 1, -1]).is_err());
        assert!(FeatureVector::new(vec![1, 0, 1]).is_err());
        assert!(FeatureVector::from_sign_string("110").is_err());
        assert!(Challenge::from_bit_string("01x1").is_err());
    }
}
