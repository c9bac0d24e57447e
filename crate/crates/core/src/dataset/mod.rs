//! Training-data collection for the modeling attacks.
//!
//! The chosen-challenge path samples feature-space neighbors at a fixed
//! Hamming distance around random centroid challenges and records how often
//! the response survives the perturbation. The reliability path repeats the
//! same challenge instead. Both produce immutable datasets that the
//! optimizers consume as (feature, target) pairs.

mod io;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::puf::{feature_transform, inverse_feature_transform, Challenge, FeatureVector, PufOracle};
use crate::rng::{derive_rng, StreamKind};

pub use io::{
    ingest_raw_crps, load_dataset, load_dataset_with_distance, load_reliability_dataset,
    save_dataset, save_raw_crps, save_reliability_dataset,
};

/// One centroid with its measured non-flipping probability.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NonFlipRecord {
    pub psi: FeatureVector,
    /// Number of neighbors whose response matched the centroid's.
    pub non_flips: u32,
    /// Number of neighbors sampled.
    pub m: u32,
    pub centroid_response: bool,
}

impl NonFlipRecord {
    /// The non-flipping probability F, exact as `non_flips / m`.
    pub fn f(&self) -> f64 {
        f64::from(self.non_flips) / f64::from(self.m)
    }
}

/// The chosen-challenge training set. Immutable once collected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NonFlipDataset {
    records: Vec<NonFlipRecord>,
    n: usize,
    d: usize,
}

impl NonFlipDataset {
    pub fn new(records: Vec<NonFlipRecord>, n: usize, d: usize) -> Result<Self> {
        if d < 1 {
            return Err(Error::InvalidParameter("hamming distance must be >= 1".into()));
        }
        for r in &records {
            if r.psi.stage_count() != n {
                return Err(Error::LengthMismatch {
                    expected: n + 1,
                    actual: r.psi.len(),
                });
            }
            if r.non_flips > r.m || r.m == 0 {
                return Err(Error::InvalidParameter(format!(
                    "record has {} non-flips out of {}",
                    r.non_flips, r.m
                )));
            }
        }
        Ok(NonFlipDataset { records, n, d })
    }

    pub fn records(&self) -> &[NonFlipRecord] {
        &self.records
    }

    pub fn stage_count(&self) -> usize {
        self.n
    }

    pub fn hamming_distance(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// One challenge with its repeated-measurement reliability.
#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityRecord {
    pub psi: FeatureVector,
    /// |M/2 - (number of 1 responses)|; ranges from 0 (coin flip) to M/2
    /// (perfectly stable).
    pub r_metric: f64,
    pub m_measurements: u32,
}

/// Training set for the reliability-based attack.
#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityDataset {
    records: Vec<ReliabilityRecord>,
    n: usize,
}

impl ReliabilityDataset {
    pub fn new(records: Vec<ReliabilityRecord>, n: usize) -> Result<Self> {
        for r in &records {
            if r.psi.stage_count() != n {
                return Err(Error::LengthMismatch {
                    expected: n + 1,
                    actual: r.psi.len(),
                });
            }
            if r.m_measurements == 0 || r.r_metric < 0.0 || r.r_metric > f64::from(r.m_measurements) / 2.0
            {
                return Err(Error::InvalidParameter(format!(
                    "reliability {} outside [0, {}/2]",
                    r.r_metric, r.m_measurements
                )));
            }
        }
        Ok(ReliabilityDataset { records, n })
    }

    pub fn records(&self) -> &[ReliabilityRecord] {
        &self.records
    }

    pub fn stage_count(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Row of a raw CRP file as collected on hardware: a centroid followed by
/// its neighbor measurements, grouped by id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawCrpRow {
    pub group_id: u64,
    pub kind: RawRowKind,
    pub challenge: Challenge,
    pub response: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RawRowKind {
    Centroid,
    Neighbor,
}

/// Number of d-subsets of the flippable positions 0..n-1.
pub fn neighbor_count(n: usize, d: usize) -> u128 {
    if d > n {
        return 0;
    }
    let mut result: u128 = 1;
    for i in 0..d {
        result = result * (n - i) as u128 / (i + 1) as u128;
    }
    result
}

/// Sample `m` distinct feature vectors at exact Hamming distance `d` from
/// `psi`, flipping only positions before the fixed trailing +1.
pub fn sample_neighbors(
    psi: &FeatureVector,
    d: usize,
    m: usize,
    rng: &mut impl Rng,
) -> Result<Vec<FeatureVector>> {
    let n = psi.stage_count();
    if d < 1 || d > n {
        return Err(Error::InvalidParameter(format!(
            "hamming distance {d} out of range 1..={n}"
        )));
    }
    let available = neighbor_count(n, d);
    if m as u128 > available {
        return Err(Error::NeighborBudget {
            requested: m as u64,
            available: available.min(u64::MAX as u128) as u64,
            distance: d,
        });
    }

    let apply = |positions: &[usize]| -> FeatureVector {
        let mut elems = psi.elems().to_vec();
        for &p in positions {
            elems[p] = -elems[p];
        }
        FeatureVector::new(elems).expect("flipping interior signs preserves validity")
    };

    if d == 1 {
        // Partial shuffle of the position list.
        let mut positions: Vec<usize> = (0..n).collect();
        let (chosen, _) = positions.partial_shuffle(rng, m);
        return Ok(chosen.iter().map(|&p| apply(&[p])).collect());
    }

    // Dense request: enumerate all combinations and take a random subset.
    if available <= 1 << 20 && (m as u128) * 2 >= available {
        let mut combos = combinations(n, d);
        let (chosen, _) = combos.partial_shuffle(rng, m);
        return Ok(chosen.iter().map(|c| apply(c)).collect());
    }

    // Sparse request: rejection-sample distinct position sets.
    let mut seen = std::collections::HashSet::with_capacity(m);
    let mut out = Vec::with_capacity(m);
    let mut positions: Vec<usize> = (0..n).collect();
    while out.len() < m {
        let (chosen, _) = positions.partial_shuffle(rng, d);
        let mut subset: Vec<usize> = chosen.to_vec();
        subset.sort_unstable();
        if seen.insert(subset.clone()) {
            out.push(apply(&subset));
        }
    }
    Ok(out)
}

fn combinations(n: usize, d: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(d);
    fn rec(start: usize, n: usize, d: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if current.len() == d {
            out.push(current.clone());
            return;
        }
        let remaining = d - current.len();
        for i in start..=(n - remaining) {
            current.push(i);
            rec(i + 1, n, d, current, out);
            current.pop();
        }
    }
    rec(0, n, d, &mut current, &mut out);
    out
}

/// Query the oracle at a centroid and at `m` of its distance-`d` neighbors,
/// recording how many neighbor responses agreed with the centroid's.
///
/// Issues exactly `m + 1` oracle queries.
pub fn measure_non_flip<P: PufOracle + ?Sized>(
    puf: &P,
    c: &Challenge,
    d: usize,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<NonFlipRecord> {
    Ok(measure_non_flip_rows(puf, c, d, m, rng, None)?.0)
}

fn measure_non_flip_rows<P: PufOracle + ?Sized>(
    puf: &P,
    c: &Challenge,
    d: usize,
    m: usize,
    rng: &mut ChaCha8Rng,
    group_id: Option<u64>,
) -> Result<(NonFlipRecord, Vec<RawCrpRow>)> {
    let psi = feature_transform(c);
    let centroid_response = puf.query(c, rng)?;
    let neighbors = sample_neighbors(&psi, d, m, rng)?;

    let mut rows = Vec::new();
    if let Some(id) = group_id {
        rows.push(RawCrpRow {
            group_id: id,
            kind: RawRowKind::Centroid,
            challenge: c.clone(),
            response: centroid_response,
        });
    }

    let mut non_flips = 0u32;
    for neighbor in &neighbors {
        let ci = inverse_feature_transform(neighbor);
        let ri = puf.query(&ci, rng)?;
        if ri == centroid_response {
            non_flips += 1;
        }
        if let Some(id) = group_id {
            rows.push(RawCrpRow {
                group_id: id,
                kind: RawRowKind::Neighbor,
                challenge: ci,
                response: ri,
            });
        }
    }

    Ok((
        NonFlipRecord {
            psi,
            non_flips,
            m: m as u32,
            centroid_response,
        },
        rows,
    ))
}

/// Collect the chosen-challenge training set: `n_centroids` uniform random
/// centroids, each measured with `m` distance-`d` neighbors.
///
/// Total oracle queries: `n_centroids * (m + 1)`. Each centroid owns an RNG
/// stream derived from `(master_seed, index)`, so the result is independent
/// of worker scheduling.
pub fn collect_chosen_dataset<P: PufOracle + ?Sized>(
    puf: &P,
    n_centroids: usize,
    m: usize,
    d: usize,
    master_seed: u64,
) -> Result<NonFlipDataset> {
    let records = collect_records(puf, n_centroids, m, d, master_seed, false)?
        .into_iter()
        .map(|(record, _)| record)
        .collect();
    NonFlipDataset::new(records, puf.stage_count(), d)
}

/// As [`collect_chosen_dataset`], additionally returning the raw CRP rows in
/// the grouped layout of the raw file format.
pub fn collect_chosen_dataset_with_raw<P: PufOracle + ?Sized>(
    puf: &P,
    n_centroids: usize,
    m: usize,
    d: usize,
    master_seed: u64,
) -> Result<(NonFlipDataset, Vec<RawCrpRow>)> {
    let pairs = collect_records(puf, n_centroids, m, d, master_seed, true)?;
    let mut records = Vec::with_capacity(pairs.len());
    let mut rows = Vec::with_capacity(pairs.len() * (m + 1));
    for (record, group_rows) in pairs {
        records.push(record);
        rows.extend(group_rows);
    }
    let ds = NonFlipDataset::new(records, puf.stage_count(), d)?;
    Ok((ds, rows))
}

fn collect_records<P: PufOracle + ?Sized>(
    puf: &P,
    n_centroids: usize,
    m: usize,
    d: usize,
    master_seed: u64,
    with_rows: bool,
) -> Result<Vec<(NonFlipRecord, Vec<RawCrpRow>)>> {
    let n = puf.stage_count();
    (0..n_centroids)
        .into_par_iter()
        .map(|idx| {
            let mut rng = derive_rng(master_seed, StreamKind::Centroid, idx as u64);
            let c = Challenge::random(n, &mut rng);
            let group = if with_rows { Some(idx as u64) } else { None };
            measure_non_flip_rows(puf, &c, d, m, &mut rng, group)
        })
        .collect()
}

/// Repeat one challenge `m_measurements` times and report how far the
/// response counts sit from a fair coin.
pub fn measure_reliability<P: PufOracle + ?Sized>(
    puf: &P,
    c: &Challenge,
    m_measurements: u32,
    rng: &mut ChaCha8Rng,
) -> Result<ReliabilityRecord> {
    if m_measurements == 0 {
        return Err(Error::InvalidParameter("m_measurements must be >= 1".into()));
    }
    let mut ones = 0u32;
    for _ in 0..m_measurements {
        if puf.query(c, rng)? {
            ones += 1;
        }
    }
    Ok(ReliabilityRecord {
        psi: feature_transform(c),
        r_metric: (f64::from(m_measurements) / 2.0 - f64::from(ones)).abs(),
        m_measurements,
    })
}

/// Collect challenge-reliability pairs for the reliability-based attack.
pub fn collect_reliability_dataset<P: PufOracle + ?Sized>(
    puf: &P,
    n_challenges: usize,
    m_measurements: u32,
    master_seed: u64,
) -> Result<ReliabilityDataset> {
    let n = puf.stage_count();
    let records = (0..n_challenges)
        .into_par_iter()
        .map(|idx| {
            let mut rng = derive_rng(master_seed, StreamKind::Centroid, idx as u64);
            let c = Challenge::random(n, &mut rng);
            measure_reliability(puf, &c, m_measurements, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    ReliabilityDataset::new(records, n)
}

/// Fraction of sampled challenges whose `repeats` responses are all equal.
pub fn puf_reliability_metric<P: PufOracle + ?Sized>(
    puf: &P,
    n_challenges: usize,
    repeats: u32,
    master_seed: u64,
) -> Result<f64> {
    if repeats < 2 {
        return Err(Error::InvalidParameter("repeats must be >= 2".into()));
    }
    if n_challenges == 0 {
        return Err(Error::InvalidParameter("n_challenges must be >= 1".into()));
    }
    let n = puf.stage_count();
    let stable: Vec<bool> = (0..n_challenges)
        .into_par_iter()
        .map(|idx| {
            let mut rng = derive_rng(master_seed, StreamKind::Evaluation, idx as u64);
            let c = Challenge::random(n, &mut rng);
            let first = puf.query(&c, &mut rng)?;
            for _ in 1..repeats {
                if puf.query(&c, &mut rng)? != first {
                    return Ok(false);
                }
            }
            Ok(true)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(stable.iter().filter(|&&s| s).count() as f64 / n_challenges as f64)
}


/// Recompute non-flipping probabilities from raw grouped CRP rows.
///
/// Each group must hold one centroid row followed by exactly `m` neighbor
/// rows whose feature vectors sit at Hamming distance `d` from the
/// centroid's.
pub fn aggregate_raw(rows: &[RawCrpRow], d: usize, m: usize) -> Result<NonFlipDataset> {
    if rows.is_empty() {
        return Err(Error::Degenerate("raw CRP list is empty".into()));
    }
    let n = rows[0].challenge.len();
    let mut records = Vec::new();
    let mut i = 0;
    while i < rows.len() {
        let group_id = rows[i].group_id;
        let mut j = i;
        while j < rows.len() && rows[j].group_id == group_id {
            j += 1;
        }
        let group = &rows[i..j];
        if group.len() != m + 1 {
            return Err(Error::InvalidParameter(format!(
                "group {group_id} has {} rows, expected {}",
                group.len(),
                m + 1
            )));
        }
        if group[0].kind != RawRowKind::Centroid
            || group[1..].iter().any(|r| r.kind != RawRowKind::Neighbor)
        {
            return Err(Error::InvalidParameter(format!(
                "group {group_id} must be one centroid followed by neighbors"
            )));
        }
        let psi = feature_transform(&group[0].challenge);
        let centroid_response = group[0].response;
        let mut non_flips = 0u32;
        for row in &group[1..] {
            let neighbor_psi = feature_transform(&row.challenge);
            let dist = psi.hamming_distance(&neighbor_psi);
            if dist != d {
                return Err(Error::InvalidParameter(format!(
                    "group {group_id}: neighbor at feature distance {dist}, expected {d}"
                )));
            }
            if row.response == centroid_response {
                non_flips += 1;
            }
        }
        records.push(NonFlipRecord {
            psi,
            non_flips,
            m: m as u32,
            centroid_response,
        });
        i = j;
    }
    NonFlipDataset::new(records, n, d)
}
