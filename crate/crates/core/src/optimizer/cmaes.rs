//! A (L, K) evolution strategy with full covariance matrix adaptation,
//! maximizing a batch objective. Standard rank-1 plus rank-mu updates with
//! cumulative step-size control.

use nalgebra::{DMatrix, DVector};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::puf::WeightVector;

use super::{CmaesConfig, FitnessEvaluation, Objective};

/// One per-iteration entry of the convergence trace.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub best_fitness: f64,
    pub step_size: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    MaxIterations,
    Stagnation,
}

#[derive(Debug, Clone)]
pub struct CmaesOutcome {
    pub best: FitnessEvaluation,
    pub iterations: usize,
    pub stop: StopReason,
    pub trace: Vec<TraceRow>,
}

struct Strategy {
    dim: usize,
    lambda: usize,
    mu: usize,
    weights: Vec<f64>,
    mu_eff: f64,
    c_sigma: f64,
    d_sigma: f64,
    c_c: f64,
    c_1: f64,
    c_mu: f64,
    chi_n: f64,
}

impl Strategy {
    fn new(dim: usize, lambda: usize, mu: usize) -> Self {
        let n = dim as f64;
        let mut weights: Vec<f64> = (0..mu)
            .map(|i| ((mu as f64) + 0.5).ln() - ((i + 1) as f64).ln())
            .collect();
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();

        let c_sigma = (mu_eff + 2.0) / (n + mu_eff + 5.0);
        let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (n + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
        let c_c = (4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n);
        let c_1 = 2.0 / ((n + 1.3) * (n + 1.3) + mu_eff);
        let c_mu = (1.0 - c_1)
            .min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((n + 2.0) * (n + 2.0) + mu_eff));
        let chi_n = n.sqrt() * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n));

        Strategy {
            dim,
            lambda,
            mu,
            weights,
            mu_eff,
            c_sigma,
            d_sigma,
            c_c,
            c_1,
            c_mu,
            chi_n,
        }
    }
}

/// Run CMA-ES until the iteration cap or stagnation, returning the best
/// candidate ever evaluated.
///
/// Deterministic in `config.seed`. Errors if an entire generation evaluates
/// to non-finite fitness.
pub fn cmaes_maximize(objective: &dyn Objective, config: &CmaesConfig) -> Result<CmaesOutcome> {
    config.validate()?;
    let dim = objective.dim();
    if dim < 2 {
        return Err(Error::InvalidParameter("dimension must be at least 2".into()));
    }

    let strat = Strategy::new(dim, config.population_k, config.parents_l);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // Random initial mean, matching the random initial models the attack
    // starts from.
    let mut mean = DVector::<f64>::from_fn(dim, |_, _| StandardNormal.sample(&mut rng));
    let mut sigma = config.initial_step;
    let mut cov = DMatrix::<f64>::identity(dim, dim);
    let mut path_sigma = DVector::<f64>::zeros(dim);
    let mut path_c = DVector::<f64>::zeros(dim);

    let mut best_model: Option<Vec<f64>> = None;
    let mut best_fitness = f64::NEG_INFINITY;
    let mut best_history: Vec<f64> = Vec::with_capacity(config.max_iterations);
    let mut trace = Vec::with_capacity(config.max_iterations);
    let mut stop = StopReason::MaxIterations;
    let mut iterations = 0;

    for iteration in 0..config.max_iterations {
        iterations = iteration + 1;

        // Eigendecompose the (symmetrized) covariance for sampling and for
        // the inverse square root used by the step-size path.
        let sym = DMatrix::from_fn(dim, dim, |r, c| 0.5 * (cov[(r, c)] + cov[(c, r)]));
        let eigen = sym.symmetric_eigen();
        let mut scales = eigen.eigenvalues.clone();
        let max_eig = scales.iter().cloned().fold(f64::MIN, f64::max).max(1e-30);
        for v in scales.iter_mut() {
            *v = v.max(max_eig * 1e-14).sqrt();
        }
        let basis = eigen.eigenvectors;

        // Sample the generation: x = mean + sigma * B * (scales .* z).
        let mut displacements: Vec<DVector<f64>> = Vec::with_capacity(strat.lambda);
        let mut candidates: Vec<Vec<f64>> = Vec::with_capacity(strat.lambda);
        for _ in 0..strat.lambda {
            let z = DVector::<f64>::from_fn(dim, |_, _| StandardNormal.sample(&mut rng));
            let scaled = DVector::<f64>::from_fn(dim, |i, _| scales[i] * z[i]);
            let y = &basis * scaled;
            let x = &mean + &y * sigma;
            displacements.push(y);
            candidates.push(x.iter().cloned().collect());
        }

        let fitnesses = objective.evaluate_batch(&candidates);
        debug_assert_eq!(fitnesses.len(), strat.lambda);
        if fitnesses.iter().all(|f| !f.is_finite()) {
            return Err(Error::Optimizer(format!(
                "all {} candidates evaluated to non-finite fitness at iteration {}",
                strat.lambda, iteration
            )));
        }

        // Rank by descending fitness; invalid candidates sort last.
        let mut order: Vec<usize> = (0..strat.lambda).collect();
        order.sort_by(|&a, &b| {
            let fa = if fitnesses[a].is_finite() { fitnesses[a] } else { f64::NEG_INFINITY };
            let fb = if fitnesses[b].is_finite() { fitnesses[b] } else { f64::NEG_INFINITY };
            fb.partial_cmp(&fa).unwrap()
        });

        let leader = order[0];
        if fitnesses[leader].is_finite() && fitnesses[leader] > best_fitness {
            best_fitness = fitnesses[leader];
            best_model = Some(candidates[leader].clone());
        }
        best_history.push(best_fitness);
        trace.push(TraceRow {
            iteration,
            best_fitness,
            step_size: sigma,
        });

        // Weighted recombination of the top mu displacements.
        let mut y_w = DVector::<f64>::zeros(dim);
        for (rank, &idx) in order.iter().take(strat.mu).enumerate() {
            y_w.axpy(strat.weights[rank], &displacements[idx], 1.0);
        }
        mean.axpy(sigma, &y_w, 1.0);

        // Step-size path uses C^(-1/2) y_w.
        let mut whitened = basis.transpose() * &y_w;
        for i in 0..dim {
            whitened[i] /= scales[i];
        }
        let whitened = &basis * whitened;
        let cs = strat.c_sigma;
        path_sigma = path_sigma * (1.0 - cs) + whitened * (cs * (2.0 - cs) * strat.mu_eff).sqrt();

        let generation = (iteration + 1) as f64;
        let expected_norm =
            (1.0 - (1.0 - cs).powf(2.0 * generation)).sqrt() * strat.chi_n;
        let h_sigma = path_sigma.norm() / expected_norm < (1.4 + 2.0 / (dim as f64 + 1.0));

        let cc = strat.c_c;
        if h_sigma {
            path_c = path_c * (1.0 - cc) + &y_w * (cc * (2.0 - cc) * strat.mu_eff).sqrt();
        } else {
            path_c *= 1.0 - cc;
        }

        // Covariance: decay, rank-1 along the evolution path, rank-mu from
        // the selected displacements.
        let hole = if h_sigma { 0.0 } else { cc * (2.0 - cc) };
        let decay = 1.0 - strat.c_1 - strat.c_mu + strat.c_1 * hole;
        cov *= decay;
        cov.ger(strat.c_1, &path_c, &path_c, 1.0);
        for (rank, &idx) in order.iter().take(strat.mu).enumerate() {
            cov.ger(strat.c_mu * strat.weights[rank], &displacements[idx], &displacements[idx], 1.0);
        }

        sigma *= ((cs / strat.d_sigma) * (path_sigma.norm() / strat.chi_n - 1.0)).exp();
        sigma = sigma.clamp(1e-12, 1e12);

        // Stagnation check over the best-so-far history.
        if config.stagnation_tolerance > 0.0 && best_history.len() > config.stagnation_window {
            let then = best_history[best_history.len() - 1 - config.stagnation_window];
            if best_fitness - then < config.stagnation_tolerance {
                stop = StopReason::Stagnation;
                break;
            }
        }
    }

    let model = best_model.ok_or_else(|| Error::Optimizer("no finite candidate seen".into()))?;
    Ok(CmaesOutcome {
        best: FitnessEvaluation {
            model: WeightVector::new(model)?,
            fitness: best_fitness,
        },
        iterations,
        stop,
        trace,
    })
}

/// Write a convergence trace in the diagnostic CSV layout.
pub fn write_trace(trace: &[TraceRow], path: impl AsRef<std::path::Path>) -> Result<()> {
    let mut writer = csv::Writer::from_writer(std::fs::File::create(path.as_ref())?);
    writer.write_record(["iteration", "best_fitness", "step_size"])?;
    for row in trace {
        writer.write_record([
            row.iteration.to_string(),
            format!("{:.8}", row.best_fitness),
            format!("{:.8}", row.step_size),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quadratic {
        target: Vec<f64>,
    }

    impl Objective for Quadratic {
        fn dim(&self) -> usize {
            self.target.len()
        }

        fn evaluate_batch(&self, candidates: &[Vec<f64>]) -> Vec<f64> {
            candidates
                .iter()
                .map(|x| {
                    -x.iter()
                        .zip(&self.target)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                })
                .collect()
        }
    }

    #[test]
    fn converges_on_convex_quadratic() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let target: Vec<f64> = (0..65).map(|_| rng.random::<f64>() - 0.5).collect();
        let objective = Quadratic { target: target.clone() };
        let config = CmaesConfig {
            max_iterations: 1500,
            initial_step: 0.5,
            seed: 3,
            stagnation_tolerance: 0.0,
            ..CmaesConfig::default()
        };
        let outcome = cmaes_maximize(&objective, &config).unwrap();
        let dist: f64 = outcome
            .best
            .model
            .as_slice()
            .iter()
            .zip(&target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(dist < 1e-2, "distance to optimum {dist}");
    }

    #[test]
    fn identical_seeds_give_identical_traces() {
        let objective = Quadratic {
            target: vec![0.3; 16],
        };
        let config = CmaesConfig {
            max_iterations: 60,
            seed: 9,
            ..CmaesConfig::default()
        };
        let a = cmaes_maximize(&objective, &config).unwrap();
        let b = cmaes_maximize(&objective, &config).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.best.model.as_slice(), b.best.model.as_slice());

        let other = cmaes_maximize(
            &objective,
            &CmaesConfig {
                seed: 10,
                ..config
            },
        )
        .unwrap();
        assert_ne!(a.trace, other.trace);
    }

    #[test]
    fn best_fitness_is_non_decreasing() {
        let objective = Quadratic {
            target: vec![-0.2; 12],
        };
        let config = CmaesConfig {
            max_iterations: 80,
            seed: 4,
            ..CmaesConfig::default()
        };
        let outcome = cmaes_maximize(&objective, &config).unwrap();
        for pair in outcome.trace.windows(2) {
            assert!(pair[1].best_fitness >= pair[0].best_fitness);
        }
    }

    #[test]
    fn stagnation_stops_early() {
        struct Flat;
        impl Objective for Flat {
            fn dim(&self) -> usize {
                8
            }
            fn evaluate_batch(&self, candidates: &[Vec<f64>]) -> Vec<f64> {
                vec![0.0; candidates.len()]
            }
        }
        let config = CmaesConfig {
            max_iterations: 500,
            stagnation_window: 10,
            stagnation_tolerance: 1e-6,
            seed: 1,
            ..CmaesConfig::default()
        };
        let outcome = cmaes_maximize(&Flat, &config).unwrap();
        assert_eq!(outcome.stop, StopReason::Stagnation);
        assert!(outcome.iterations <= 15);
    }

    #[test]
    fn all_invalid_fitness_aborts() {
        struct Nan;
        impl Objective for Nan {
            fn dim(&self) -> usize {
                4
            }
            fn evaluate_batch(&self, candidates: &[Vec<f64>]) -> Vec<f64> {
                vec![f64::NAN; candidates.len()]
            }
        }
        let config = CmaesConfig {
            seed: 2,
            ..CmaesConfig::default()
        };
        assert!(matches!(
            cmaes_maximize(&Nan, &config),
            Err(Error::Optimizer(_))
        ));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let objective = Quadratic {
            target: vec![0.0; 4],
        };
        for bad in [
            CmaesConfig {
                parents_l: 24,
                ..CmaesConfig::default()
            },
            CmaesConfig {
                population_k: 1,
                parents_l: 0,
                ..CmaesConfig::default()
            },
            CmaesConfig {
                initial_step: 0.0,
                ..CmaesConfig::default()
            },
            CmaesConfig {
                max_iterations: 0,
                ..CmaesConfig::default()
            },
        ] {
            assert!(cmaes_maximize(&objective, &bad).is_err());
        }
    }
}
