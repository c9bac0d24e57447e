//! CSV persistence for datasets and raw CRP dumps.
//!
//! Formats are fixed:
//! * aggregated dataset: header `psi,f_num,f_den,centroid_response`; `psi`
//!   encodes +1 as '1' and -1 as '0', last character always '1'; F is stored
//!   as the exact rational `f_num / f_den`.
//! * raw CRPs: header `group_id,kind,challenge,response` with kind in
//!   {centroid, neighbor} and the challenge as an n-character bit string.
//! * reliability dataset: header `psi,r_metric,m_measurements`.

use std::fs::File;
use std::path::Path;

use crate::error::{Error, Result};
use crate::puf::{Challenge, FeatureVector};

use super::{
    NonFlipDataset, NonFlipRecord, RawCrpRow, RawRowKind, ReliabilityDataset, ReliabilityRecord,
};

const DATASET_HEADER: [&str; 4] = ["psi", "f_num", "f_den", "centroid_response"];
const RAW_HEADER: [&str; 4] = ["group_id", "kind", "challenge", "response"];
const RELIABILITY_HEADER: [&str; 3] = ["psi", "r_metric", "m_measurements"];

fn check_header(path: &Path, actual: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    let fields: Vec<&str> = actual.iter().collect();
    if fields != expected {
        return Err(Error::malformed(
            path,
            format!("expected header {expected:?}, found {fields:?}"),
        ));
    }
    Ok(())
}

pub fn save_dataset(ds: &NonFlipDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut writer = csv::Writer::from_writer(File::create(path.as_ref())?);
    writer.write_record(DATASET_HEADER)?;
    for record in ds.records() {
        writer.write_record([
            record.psi.to_sign_string(),
            record.non_flips.to_string(),
            record.m.to_string(),
            u8::from(record.centroid_response).to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// Load an aggregated dataset. The on-disk format does not carry the
/// neighbor Hamming distance; the result reports distance 1. Use
/// [`load_dataset_with_distance`] for files collected at other distances.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<NonFlipDataset> {
    load_dataset_with_distance(path, 1)
}

pub fn load_dataset_with_distance(path: impl AsRef<Path>, d: usize) -> Result<NonFlipDataset> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_reader(File::open(path)?);
    check_header(path, reader.headers()?, &DATASET_HEADER)?;

    let mut records = Vec::new();
    let mut n: Option<usize> = None;
    for row in reader.records() {
        let row = row?;
        if row.len() != 4 {
            return Err(Error::malformed(path, format!("expected 4 fields, got {}", row.len())));
        }
        let psi = FeatureVector::from_sign_string(&row[0])
            .map_err(|e| Error::malformed(path, e.to_string()))?;
        match n {
            None => n = Some(psi.stage_count()),
            Some(expected) if expected != psi.stage_count() => {
                return Err(Error::malformed(
                    path,
                    format!(
                        "inconsistent feature length: {} then {}",
                        expected + 1,
                        psi.len()
                    ),
                ));
            }
            _ => {}
        }
        let non_flips: u32 = row[1]
            .parse()
            .map_err(|_| Error::malformed(path, format!("bad f_num {:?}", &row[1])))?;
        let m: u32 = row[2]
            .parse()
            .map_err(|_| Error::malformed(path, format!("bad f_den {:?}", &row[2])))?;
        if m == 0 || non_flips > m {
            return Err(Error::malformed(
                path,
                format!("non-flip count {non_flips} outside 0..={m}"),
            ));
        }
        let centroid_response = match &row[3] {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::malformed(path, format!("bad response {other:?}")));
            }
        };
        records.push(NonFlipRecord {
            psi,
            non_flips,
            m,
            centroid_response,
        });
    }

    // An empty file is a valid empty dataset; pick a placeholder width.
    let n = n.unwrap_or(1);
    NonFlipDataset::new(records, n, d)
}

pub fn save_raw_crps(rows: &[RawCrpRow], path: impl AsRef<Path>) -> Result<()> {
    let mut writer = csv::Writer::from_writer(File::create(path.as_ref())?);
    writer.write_record(RAW_HEADER)?;
    for row in rows {
        let kind = match row.kind {
            RawRowKind::Centroid => "centroid",
            RawRowKind::Neighbor => "neighbor",
        };
        writer.write_record([
            row.group_id.to_string(),
            kind.to_string(),
            row.challenge.to_bit_string(),
            u8::from(row.response).to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// Parse a raw CRP file, checking every challenge against the declared
/// stage count.
pub fn ingest_raw_crps(path: impl AsRef<Path>, n: usize) -> Result<Vec<RawCrpRow>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_reader(File::open(path)?);
    check_header(path, reader.headers()?, &RAW_HEADER)?;

    let mut rows = Vec::new();
    for row in reader.records() {
        let row = row?;
        if row.len() != 4 {
            return Err(Error::malformed(path, format!("expected 4 fields, got {}", row.len())));
        }
        let group_id: u64 = row[0]
            .parse()
            .map_err(|_| Error::malformed(path, format!("bad group id {:?}", &row[0])))?;
        let kind = match &row[1] {
            "centroid" => RawRowKind::Centroid,
            "neighbor" => RawRowKind::Neighbor,
            other => return Err(Error::malformed(path, format!("bad row kind {other:?}"))),
        };
        let challenge = Challenge::from_bit_string(&row[2])
            .map_err(|e| Error::malformed(path, e.to_string()))?;
        if challenge.len() != n {
            return Err(Error::malformed(
                path,
                format!("challenge length {} does not match n={n}", challenge.len()),
            ));
        }
        let response = match &row[3] {
            "0" => false,
            "1" => true,
            other => return Err(Error::malformed(path, format!("bad response {other:?}"))),
        };
        rows.push(RawCrpRow {
            group_id,
            kind,
            challenge,
            response,
        });
    }
    Ok(rows)
}

pub fn save_reliability_dataset(ds: &ReliabilityDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut writer = csv::Writer::from_writer(File::create(path.as_ref())?);
    writer.write_record(RELIABILITY_HEADER)?;
    for record in ds.records() {
        writer.write_record([
            record.psi.to_sign_string(),
            format_r_metric(record.r_metric),
            record.m_measurements.to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

fn format_r_metric(value: f64) -> String {
    // Reliability values are multiples of 1/2; keep them compact and exact.
    if value.fract() == 0.0 {
        format!("{}", value as u64)
    } else {
        format!("{value}")
    }
}

pub fn load_reliability_dataset(path: impl AsRef<Path>) -> Result<ReliabilityDataset> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_reader(File::open(path)?);
    check_header(path, reader.headers()?, &RELIABILITY_HEADER)?;

    let mut records = Vec::new();
    let mut n: Option<usize> = None;
    for row in reader.records() {
        let row = row?;
        if row.len() != 3 {
            return Err(Error::malformed(path, format!("expected 3 fields, got {}", row.len())));
        }
        let psi = FeatureVector::from_sign_string(&row[0])
            .map_err(|e| Error::malformed(path, e.to_string()))?;
        match n {
            None => n = Some(psi.stage_count()),
            Some(expected) if expected != psi.stage_count() => {
                return Err(Error::malformed(path, "inconsistent feature lengths".to_string()));
            }
            _ => {}
        }
        let r_metric: f64 = row[1]
            .parse()
            .map_err(|_| Error::malformed(path, format!("bad r_metric {:?}", &row[1])))?;
        let m_measurements: u32 = row[2]
            .parse()
            .map_err(|_| Error::malformed(path, format!("bad m_measurements {:?}", &row[2])))?;
        records.push(ReliabilityRecord {
            psi,
            r_metric,
            m_measurements,
        });
    }

    let n = n.unwrap_or(1);
    ReliabilityDataset::new(records, n).map_err(|e| Error::malformed(path, e.to_string()))
}
