//! Closed-form flip-probability results and their Monte Carlo validators.
//!
//! Flipping one feature element changes the delay difference by twice the
//! corresponding weight. Over random challenges and fresh manufacturing
//! draws, the probability that this crossing pushes a non-negative delay
//! negative has the closed form `1/2 - arctan(sqrt(n))/pi`. That one-sided
//! (directional) crossing is what [`expected_flip_probability`] and
//! [`monte_carlo_flip_probability`] quantify; a response flip in either
//! direction is exactly twice as likely, which is what the position scans
//! count.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dataset::measure_non_flip;
use crate::error::{Error, Result};
use crate::puf::{
    delay_difference, feature_transform, response_bit, sample_apuf, Challenge, PufInstance,
    PufTopology, WeightVector,
};
use crate::rng::{derive_rng, StreamKind};

/// Analytic vs simulated flip probability for one stage count.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct FlipProbabilityReport {
    pub n: usize,
    pub analytic: f64,
    pub monte_carlo: f64,
    pub trials: u64,
    /// Half width of the 95% confidence interval of the estimate.
    pub half_width: f64,
}

/// Expected probability that flipping one feature element flips a response
/// from 1 to 0, over random challenges and manufacturing draws.
///
/// The symmetric crossing (0 to 1) is equally likely, so the probability of
/// observing a flip in either direction is twice this value.
pub fn expected_flip_probability(n: usize) -> f64 {
    assert!(n >= 1);
    0.5 - (n as f64).sqrt().atan() / std::f64::consts::PI
}

fn directional_flip_trial(w: &WeightVector, rng: &mut ChaCha8Rng) -> bool {
    let n = w.stage_count();
    let c = Challenge::random(n, rng);
    let psi = feature_transform(&c);
    let position = rng.random_range(0..n);
    let before = delay_difference(w, &psi).expect("widths match");
    let after = before - 2.0 * f64::from(psi.elems()[position]) * w.as_slice()[position];
    response_bit(before) && !response_bit(after)
}

/// Estimate the directional flip probability by simulation, drawing a fresh
/// device, challenge and flip position per trial.
pub fn monte_carlo_flip_probability(
    n: usize,
    trials: u64,
    master_seed: u64,
) -> FlipProbabilityReport {
    assert!(trials >= 1);
    let hits = parallel_trials(trials, master_seed, |rng| {
        let w = sample_apuf(n, 1.0, rng);
        directional_flip_trial(&w, rng)
    });
    finish_report(n, hits, trials)
}

/// As [`monte_carlo_flip_probability`], but for one fixed manufactured
/// device instead of the manufacturing average.
pub fn monte_carlo_flip_probability_fixed(
    w: &WeightVector,
    trials: u64,
    master_seed: u64,
) -> FlipProbabilityReport {
    assert!(trials >= 1);
    let hits = parallel_trials(trials, master_seed, |rng| directional_flip_trial(w, rng));
    finish_report(w.stage_count(), hits, trials)
}

fn parallel_trials(
    trials: u64,
    master_seed: u64,
    trial: impl Fn(&mut ChaCha8Rng) -> bool + Sync,
) -> u64 {
    let chunk: u64 = 8192;
    let chunks = trials.div_ceil(chunk);
    (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = derive_rng(master_seed, StreamKind::TheoryTrial, c);
            let lo = c * chunk;
            let hi = (lo + chunk).min(trials);
            (lo..hi).filter(|_| trial(&mut rng)).count() as u64
        })
        .sum()
}

fn finish_report(n: usize, hits: u64, trials: u64) -> FlipProbabilityReport {
    let estimate = hits as f64 / trials as f64;
    let half_width = 1.96 * (estimate * (1.0 - estimate) / trials as f64).sqrt();
    FlipProbabilityReport {
        n,
        analytic: expected_flip_probability(n),
        monte_carlo: estimate,
        trials,
        half_width,
    }
}

/// Probability that a k-XOR response flips when each constituent flips
/// independently with probability `p_flip`.
pub fn xor_flip_probability(p_flip: f64, k: usize) -> f64 {
    assert!((0.0..=1.0).contains(&p_flip));
    assert!(k >= 1);
    0.5 * (1.0 - (1.0 - 2.0 * p_flip).powi(k as i32))
}

/// Per-position response flip probabilities of a k-XOR construction.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SensitivityScan {
    pub n: usize,
    pub k: usize,
    pub trials_per_position: u64,
    /// Fraction of trials in which flipping this feature element flipped
    /// the XOR response (either direction).
    pub per_position: Vec<f64>,
}

impl SensitivityScan {
    pub fn mean(&self) -> f64 {
        if self.per_position.is_empty() {
            return 0.0;
        }
        self.per_position.iter().sum::<f64>() / self.per_position.len() as f64
    }

    pub fn spread(&self) -> f64 {
        if self.per_position.is_empty() {
            return 0.0;
        }
        let max = self.per_position.iter().cloned().fold(f64::MIN, f64::max);
        let min = self.per_position.iter().cloned().fold(f64::MAX, f64::min);
        max - min
    }
}

fn scan_trial(chains: &[WeightVector], n: usize, flips: &mut [u64], rng: &mut ChaCha8Rng) {
    let c = Challenge::random(n, rng);
    let psi = feature_transform(&c);
    // Base delay per chain, then per position an incremental update: the
    // flip changes each delta by -2 psi[i] w[i].
    let deltas: Vec<f64> = chains
        .iter()
        .map(|w| delay_difference(w, &psi).expect("widths match"))
        .collect();
    let mut base_xor = false;
    for &d in &deltas {
        base_xor ^= response_bit(d);
    }
    for i in 0..n {
        let sign = f64::from(psi.elems()[i]);
        let mut flipped_xor = false;
        for (w, &d) in chains.iter().zip(&deltas) {
            flipped_xor ^= response_bit(d - 2.0 * sign * w.as_slice()[i]);
        }
        if flipped_xor != base_xor {
            flips[i] += 1;
        }
    }
}

fn scan_with(
    n: usize,
    k: usize,
    trials_per_position: u64,
    master_seed: u64,
    chains_for_trial: impl Fn(&mut ChaCha8Rng) -> Vec<WeightVector> + Sync,
) -> SensitivityScan {
    if trials_per_position == 0 {
        return SensitivityScan {
            n,
            k,
            trials_per_position: 0,
            per_position: Vec::new(),
        };
    }
    let chunk: u64 = 2048;
    let chunks = trials_per_position.div_ceil(chunk);
    let flips = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = derive_rng(master_seed, StreamKind::TheoryTrial, c);
            let lo = c * chunk;
            let hi = (lo + chunk).min(trials_per_position);
            let mut flips = vec![0u64; n];
            for _ in lo..hi {
                let chains = chains_for_trial(&mut rng);
                scan_trial(&chains, n, &mut flips, &mut rng);
            }
            flips
        })
        .reduce(
            || vec![0u64; n],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
                a
            },
        );
    SensitivityScan {
        n,
        k,
        trials_per_position,
        per_position: flips
            .into_iter()
            .map(|f| f as f64 / trials_per_position as f64)
            .collect(),
    }
}

/// Measure the flip probability of every feature position of a k-XOR
/// construction, drawing a fresh set of chains per trial. All positions
/// share each trial's challenge, so the per-position estimates use common
/// random numbers.
pub fn position_sensitivity_scan(
    n: usize,
    k: usize,
    trials_per_position: u64,
    master_seed: u64,
) -> SensitivityScan {
    scan_with(n, k, trials_per_position, master_seed, |rng| {
        (0..k).map(|_| sample_apuf(n, 1.0, rng)).collect()
    })
}

/// As [`position_sensitivity_scan`], but against one fixed simulated
/// device. Requires a plain APUF or XOR APUF topology; noise is ignored.
pub fn position_sensitivity_scan_fixed(
    puf: &PufInstance,
    trials_per_position: u64,
    master_seed: u64,
) -> Result<SensitivityScan> {
    let chains: Vec<WeightVector> = match puf.topology() {
        PufTopology::Apuf(w) => vec![w.clone()],
        PufTopology::XorApuf(ws) => ws.clone(),
        _ => {
            return Err(Error::InvalidParameter(
                "sensitivity scan needs an APUF or XOR APUF target".into(),
            ));
        }
    };
    let n = puf.stage_count();
    let k = chains.len();
    Ok(scan_with(n, k, trials_per_position, master_seed, |_| {
        chains.clone()
    }))
}

/// Paired (|delta|, F) samples of a single APUF with the correlation over
/// the unsaturated (F < 1) subset.
#[derive(Debug, Clone, serde::Serialize)]
pub struct DeltaFScan {
    /// (|delta|, measured F) per centroid.
    pub pairs: Vec<(f64, f64)>,
    /// Pearson correlation restricted to records with F < 1; `None` when
    /// that subset is degenerate.
    pub rho_unsaturated: Option<f64>,
    /// Perturbation scale used for the reference curve.
    pub sigma_eff: f64,
}

impl DeltaFScan {
    /// Gaussian reference curve: the chance that a centered perturbation of
    /// standard deviation `sigma_eff` leaves the response sign unchanged at
    /// the given delay magnitude.
    pub fn reference_curve(&self, abs_delta: f64) -> f64 {
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        normal.cdf(abs_delta / self.sigma_eff)
    }

    /// Linearity of the underlying response curve: group the unsaturated
    /// records into equal-count |delta| bins and correlate the bin means.
    /// This strips the per-record sampling noise of F, which caps the raw
    /// scatter correlation well below 1 at small neighbor counts.
    pub fn unsaturated_binned_rho(&self, bins: usize) -> Option<f64> {
        let mut unsaturated: Vec<(f64, f64)> = self
            .pairs
            .iter()
            .filter(|(_, f)| *f < 1.0)
            .cloned()
            .collect();
        if unsaturated.len() < bins * 2 || bins < 2 {
            return None;
        }
        unsaturated.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let per_bin = unsaturated.len() / bins;
        let mut xs = Vec::with_capacity(bins);
        let mut ys = Vec::with_capacity(bins);
        for bin in unsaturated.chunks(per_bin).take(bins) {
            xs.push(bin.iter().map(|(d, _)| d).sum::<f64>() / bin.len() as f64);
            ys.push(bin.iter().map(|(_, f)| f).sum::<f64>() / bin.len() as f64);
        }
        crate::optimizer::pearson_correlation(&xs, &ys)
            .ok()
            .flatten()
    }

    /// Largest |delta| at which an unsaturated F was still observed.
    pub fn saturation_threshold(&self) -> Option<f64> {
        let max_unsaturated = self
            .pairs
            .iter()
            .filter(|(_, f)| *f < 1.0)
            .map(|(d, _)| *d)
            .fold(f64::NAN, f64::max);
        if max_unsaturated.is_nan() {
            None
        } else {
            Some(max_unsaturated)
        }
    }
}

/// Measure (|delta|, F) pairs for a single APUF target.
///
/// The deltas come from the ground-truth weights; the F values from real
/// queries, so the scan works for noisy devices too. `sigma_eff` scales the
/// overlay curve; one feature flip perturbs the delay by twice a weight, so
/// twice the manufacturing sigma is the natural default.
pub fn delta_vs_f_scan(
    puf: &PufInstance,
    n_centroids: usize,
    m: usize,
    sigma_eff: f64,
    master_seed: u64,
) -> Result<DeltaFScan> {
    let w = match puf.topology() {
        PufTopology::Apuf(w) => w.clone(),
        _ => {
            return Err(Error::InvalidParameter(
                "delta-vs-F scan expects a single APUF target".into(),
            ));
        }
    };
    let n = puf.stage_count();
    let pairs: Vec<(f64, f64)> = (0..n_centroids)
        .into_par_iter()
        .map(|idx| {
            let mut rng = derive_rng(master_seed, StreamKind::Centroid, idx as u64);
            let c = Challenge::random(n, &mut rng);
            let record = measure_non_flip(puf, &c, 1, m, &mut rng)?;
            let delta = delay_difference(&w, &record.psi)?.abs();
            Ok((delta, record.f()))
        })
        .collect::<Result<_>>()?;

    let unsaturated: Vec<(f64, f64)> = pairs.iter().filter(|(_, f)| *f < 1.0).cloned().collect();
    let rho_unsaturated = if unsaturated.len() >= 2 {
        let deltas: Vec<f64> = unsaturated.iter().map(|(d, _)| *d).collect();
        let fs: Vec<f64> = unsaturated.iter().map(|(_, f)| *f).collect();
        crate::optimizer::pearson_correlation(&deltas, &fs)?
    } else {
        None
    };

    Ok(DeltaFScan {
        pairs,
        rho_unsaturated,
        sigma_eff,
    })
}

/// CSV emission for the scan outputs.
pub mod io {
    use std::path::Path;

    use super::{DeltaFScan, FlipProbabilityReport, SensitivityScan};
    use crate::error::Result;

    /// Columns: `position,flip_probability`.
    pub fn write_sensitivity_csv(scan: &SensitivityScan, path: impl AsRef<Path>) -> Result<()> {
        let mut writer = csv::Writer::from_writer(std::fs::File::create(path.as_ref())?);
        writer.write_record(["position", "flip_probability"])?;
        for (i, p) in scan.per_position.iter().enumerate() {
            writer.write_record([i.to_string(), format!("{p:.8}")])?;
        }
        writer.flush()?;
        Ok(())
    }

    /// Columns: `abs_delta,f_measured,f_reference`.
    pub fn write_delta_f_csv(scan: &DeltaFScan, path: impl AsRef<Path>) -> Result<()> {
        let mut writer = csv::Writer::from_writer(std::fs::File::create(path.as_ref())?);
        writer.write_record(["abs_delta", "f_measured", "f_reference"])?;
        for (delta, f) in &scan.pairs {
            writer.write_record([
                format!("{delta:.8}"),
                format!("{f:.8}"),
                format!("{:.8}", scan.reference_curve(*delta)),
            ])?;
        }
        writer.flush()?;
        Ok(())
    }

    /// Summary JSON with analytic-vs-empirical deltas.
    pub fn write_flip_report_json(
        reports: &[FlipProbabilityReport],
        path: impl AsRef<Path>,
    ) -> Result<()> {
        #[derive(serde::Serialize)]
        struct Row<'a> {
            #[serde(flatten)]
            report: &'a FlipProbabilityReport,
            deviation: f64,
        }
        let rows: Vec<Row> = reports
            .iter()
            .map(|report| Row {
                report,
                deviation: report.monte_carlo - report.analytic,
            })
            .collect();
        std::fs::write(path, serde_json::to_string_pretty(&rows)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::puf::NoiseModel;

    #[test]
    fn analytic_values_match_quoted_table() {
        // Quoted values are truncated at the fourth decimal.
        assert!((expected_flip_probability(64) - 0.0395).abs() < 1e-4);
        assert!((expected_flip_probability(128) - 0.0280).abs() < 1e-4);
        assert!((expected_flip_probability(256) - 0.0198).abs() < 1e-4);
        // arctan(1) = pi/4.
        assert!((expected_flip_probability(1) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn analytic_curve_is_strictly_decreasing() {
        let mut last = expected_flip_probability(1);
        for n in 2..300 {
            let value = expected_flip_probability(n);
            assert!(value < last, "n={n}");
            assert!(value > 0.0 && value < 0.5);
            last = value;
        }
    }

    #[test]
    fn monte_carlo_agrees_with_closed_form() {
        for n in [1usize, 16, 64] {
            let report = monte_carlo_flip_probability(n, 200_000, 5);
            assert!(
                (report.monte_carlo - report.analytic).abs() < 1.5 * report.half_width,
                "n={n}: mc {} vs analytic {} (hw {})",
                report.monte_carlo,
                report.analytic,
                report.half_width
            );
        }
    }

    #[test]
    fn monte_carlo_is_deterministic() {
        let a = monte_carlo_flip_probability(16, 50_000, 9);
        let b = monte_carlo_flip_probability(16, 50_000, 9);
        assert_eq!(a, b);
    }

    #[test]
    fn fixed_device_estimate_is_plausible() {
        let mut rng = derive_rng(3, StreamKind::Instance, 0);
        let w = sample_apuf(16, 1.0, &mut rng);
        let report = monte_carlo_flip_probability_fixed(&w, 100_000, 4);
        assert!(report.monte_carlo > 0.0 && report.monte_carlo < 0.5);
    }

    #[test]
    fn xor_flip_probability_values() {
        assert_eq!(xor_flip_probability(0.123, 1), 0.123);
        assert!((xor_flip_probability(0.04, 15) - 0.3569).abs() < 1e-4);
        assert_eq!(xor_flip_probability(0.5, 7), 0.5);

        // Monotone in k below the fixed point.
        let mut last = 0.0;
        for k in 1..=20 {
            let value = xor_flip_probability(0.08, k);
            assert!(value > last);
            last = value;
        }
    }

    #[test]
    fn sensitivity_scan_is_flat_and_matches_xor_prediction() {
        let base = position_sensitivity_scan(32, 1, 20_000, 6);
        let p1 = base.mean();
        // Total flips run at twice the directional closed form.
        assert!(
            (p1 - 2.0 * expected_flip_probability(32)).abs() < 0.01,
            "k=1 mean {p1}"
        );
        assert!(base.spread() < 0.05, "spread {}", base.spread());

        for k in [3usize, 7] {
            let scan = position_sensitivity_scan(32, k, 20_000, 6);
            let predicted = xor_flip_probability(p1, k);
            assert!(
                (scan.mean() - predicted).abs() < 0.02,
                "k={k}: mean {} predicted {predicted}",
                scan.mean()
            );
        }
    }

    #[test]
    fn fixed_scan_reflects_weight_magnitudes() {
        let puf = PufInstance::random_apuf(24, NoiseModel::none(), 11).unwrap();
        let w = match puf.topology() {
            PufTopology::Apuf(w) => w.clone(),
            _ => unreachable!(),
        };
        let scan = position_sensitivity_scan_fixed(&puf, 40_000, 7).unwrap();
        assert_eq!(scan.per_position.len(), 24);
        // Larger |w[i]| means a wider flip band at position i.
        let mut order: Vec<usize> = (0..24).collect();
        order.sort_by(|&a, &b| {
            w.as_slice()[a]
                .abs()
                .partial_cmp(&w.as_slice()[b].abs())
                .unwrap()
        });
        let weakest = scan.per_position[order[0]];
        let strongest = scan.per_position[order[23]];
        assert!(
            strongest > weakest,
            "strongest {strongest} vs weakest {weakest}"
        );

        let empty = position_sensitivity_scan_fixed(&puf, 0, 7).unwrap();
        assert!(empty.per_position.is_empty());

        let ipuf = PufInstance::random_interpose(8, 1, 2, NoiseModel::none(), 1).unwrap();
        assert!(position_sensitivity_scan_fixed(&ipuf, 10, 7).is_err());
    }

    #[test]
    fn delta_f_scan_shows_linear_rise_and_saturation() {
        let puf = PufInstance::random_apuf(64, NoiseModel::none(), 21).unwrap();
        let scan = delta_vs_f_scan(&puf, 20_000, 16, 2.0, 8).unwrap();
        assert_eq!(scan.pairs.len(), 20_000);

        // Sixteen neighbors leave substantial sampling noise on each F, so
        // the raw scatter correlation sits near 0.78. Binning kills that
        // noise; what remains below 1 is the flattening of the conditional
        // mean near saturation, since at large |delta| only near-saturated
        // records survive the F < 1 filter.
        let rho = scan.rho_unsaturated.expect("unsaturated subset present");
        assert!(rho > 0.7, "unsaturated correlation {rho}");
        let binned = scan.unsaturated_binned_rho(16).expect("enough records");
        assert!(binned > 0.9, "binned curve correlation {binned}");

        // More neighbors per centroid push the scatter correlation up.
        let fine = delta_vs_f_scan(&puf, 10_000, 64, 2.0, 8).unwrap();
        let fine_rho = fine.rho_unsaturated.unwrap();
        assert!(fine_rho > 0.9, "m=64 correlation {fine_rho}");

        // Saturation: beyond the largest unsaturated |delta| every F is 1.
        let threshold = scan.saturation_threshold().unwrap();
        for (delta, f) in &scan.pairs {
            if *delta > threshold {
                assert_eq!(*f, 1.0);
            }
        }
        // The reference curve rises toward 1.
        assert!(scan.reference_curve(0.0) == 0.5);
        assert!(scan.reference_curve(8.0) > 0.99);
    }

    #[test]
    fn degenerate_delta_f_subsets_are_flagged() {
        // With m=1 every F is 0 or 1; the unsaturated subset is constant.
        let puf = PufInstance::random_apuf(16, NoiseModel::none(), 22).unwrap();
        let scan = delta_vs_f_scan(&puf, 500, 1, 2.0, 9).unwrap();
        assert!(scan.rho_unsaturated.is_none());
    }

    #[test]
    fn scan_outputs_serialize() {
        let dir = tempfile::tempdir().unwrap();
        let scan = position_sensitivity_scan(8, 1, 500, 1);
        io::write_sensitivity_csv(&scan, dir.path().join("sens.csv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("sens.csv")).unwrap();
        assert!(text.starts_with("position,flip_probability\n"));
        assert_eq!(text.lines().count(), 9);

        let puf = PufInstance::random_apuf(16, NoiseModel::none(), 23).unwrap();
        let delta_scan = delta_vs_f_scan(&puf, 50, 4, 2.0, 2).unwrap();
        io::write_delta_f_csv(&delta_scan, dir.path().join("df.csv")).unwrap();

        let report = monte_carlo_flip_probability(8, 1000, 3);
        io::write_flip_report_json(&[report], dir.path().join("flip.json")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("flip.json")).unwrap();
        assert!(text.contains("\"deviation\""));
    }
}
