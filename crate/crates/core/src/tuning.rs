//! Hyperparameter search for score functions, and the avg-k coverage
//! binary search.
//!
//! Score tuning is a seeded uniform random search: temperature and lambda
//! are drawn log-uniformly from their ranges (linearly when a range starts
//! at 0), `k_reg` uniformly from its integer range. Each candidate is
//! calibrated on `cal`, evaluated on `calval`, and the winner is the
//! smallest-average-size candidate whose calval coverage is no more than
//! 0.005 below target; when none qualifies, the best-covering candidate
//! wins. Candidate evaluations run on the ambient rayon pool; selection is
//! a deterministic reduction independent of completion order.
//!
//! `tune_avgk` binary-searches the smallest `k` (to 1e-5) whose calval
//! coverage reaches the target. Coverage is non-decreasing in `k` for this
//! threshold predictor; the assumption is still spot-checked on five probe
//! values and violations abort with diagnostics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{calibrate_avgk, calibrate_marginal, calibrate_mondrian, empirical_coverage};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::scores::{ScoreConfig, ScoreKind, UMode};
use crate::setpred::{average_size, predict_batch, PredictOptions};

/// Calibration method being tuned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TuneMethod {
    Marginal,
    Mondrian,
}

/// Search specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneSpec {
    /// Coverage the tuned configuration must reach on calval.
    pub target_coverage: f64,
    /// Inclusive temperature range.
    pub t_range: (f64, f64),
    /// Inclusive lambda range.
    pub lambda_range: (f64, f64),
    /// Inclusive `k_reg` range (raps only).
    pub k_reg_range: (usize, usize),
    /// Number of sampled configurations.
    pub budget: usize,
    pub seed: u64,
    /// Randomization of the sampled configurations' `u`.
    pub randomized: bool,
    /// Minimum per-group calibration size when tuning Mondrian predictors.
    pub min_group_n: usize,
}

impl TuneSpec {
    /// Search space defaults: `T in [0.05, 5]` and `lambda in [1e-3, 20]`
    /// log-uniform, `k_reg in {1..m}`, 50 iterations.
    pub fn new(target_coverage: f64, m: usize, seed: u64) -> Self {
        Self {
            target_coverage,
            t_range: (0.05, 5.0),
            lambda_range: (1e-3, 20.0),
            k_reg_range: (1, m.max(1)),
            budget: 50,
            seed,
            randomized: true,
            min_group_n: 30,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::Parameter("budget must be >= 1".into()));
        }
        if !(0.0 < self.target_coverage && self.target_coverage <= 1.0) {
            return Err(Error::Parameter(format!(
                "target_coverage must be in (0, 1], got {}",
                self.target_coverage
            )));
        }
        if self.t_range.0 > self.t_range.1 || self.t_range.0 <= 0.0 {
            return Err(Error::Parameter(format!(
                "temperature range {:?} is empty or non-positive",
                self.t_range
            )));
        }
        if self.lambda_range.0 > self.lambda_range.1 || self.lambda_range.0 < 0.0 {
            return Err(Error::Parameter(format!(
                "lambda range {:?} is empty or negative",
                self.lambda_range
            )));
        }
        if self.k_reg_range.0 > self.k_reg_range.1 || self.k_reg_range.0 == 0 {
            return Err(Error::Parameter(format!(
                "k_reg range {:?} is empty or zero-based",
                self.k_reg_range
            )));
        }
        Ok(())
    }
}

/// One evaluated candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneEvaluation {
    pub config: ScoreConfig,
    pub avg_size: f64,
    pub coverage: f64,
}

/// Every evaluated candidate plus the selected winner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningReport {
    pub evaluations: Vec<TuneEvaluation>,
    pub winner_index: usize,
    pub winner: ScoreConfig,
    pub target_coverage: f64,
    /// Candidates may sit this far below target and still qualify
    /// (calval coverage is a noisy estimate).
    pub coverage_slack: f64,
}

/// Tolerance below target within which a candidate still qualifies.
pub const COVERAGE_SLACK: f64 = 0.005;

fn sample_range(rng: &mut impl Rng, range: (f64, f64)) -> f64 {
    if range.0 == range.1 {
        return range.0;
    }
    if range.0 > 0.0 {
        // log-uniform
        let (lo, hi) = (range.0.ln(), range.1.ln());
        rng.gen_range(lo..=hi).exp()
    } else {
        rng.gen_range(range.0..=range.1)
    }
}

/// Random search over score hyperparameters at fixed `alpha`.
pub fn tune_score(
    cal: &LabeledDataset,
    calval: &LabeledDataset,
    kind: ScoreKind,
    method: TuneMethod,
    alpha: f64,
    spec: &TuneSpec,
) -> Result<TuningReport> {
    spec.validate()?;
    if cal.is_empty() || calval.is_empty() {
        return Err(Error::Parameter("cal and calval must be nonempty".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let candidates: Vec<ScoreConfig> = (0..spec.budget)
        .map(|_| {
            let temperature = sample_range(&mut rng, spec.t_range);
            let lambda = match kind {
                ScoreKind::Raps | ScoreKind::Saps => sample_range(&mut rng, spec.lambda_range),
                _ => 0.0,
            };
            let k_reg = match kind {
                ScoreKind::Raps => rng.gen_range(spec.k_reg_range.0..=spec.k_reg_range.1),
                _ => 1,
            };
            ScoreConfig {
                kind,
                temperature,
                lambda,
                k_reg,
                randomized: spec.randomized,
                u_mode: UMode::Seeded,
            }
        })
        .collect();

    let evaluations: Vec<TuneEvaluation> = candidates
        .into_par_iter()
        .map(|config| -> Result<TuneEvaluation> {
            let (avg_size, coverage) =
                evaluate_config(cal, calval, &config, method, alpha, spec.min_group_n, spec.seed)?;
            Ok(TuneEvaluation {
                config,
                avg_size,
                coverage,
            })
        })
        .collect::<Result<_>>()?;

    let floor = spec.target_coverage - COVERAGE_SLACK;
    let qualifying = evaluations
        .iter()
        .enumerate()
        .filter(|(_, e)| e.coverage >= floor)
        .min_by(|(ia, a), (ib, b)| {
            a.avg_size
                .partial_cmp(&b.avg_size)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(ia.cmp(ib))
        });
    let winner_index = match qualifying {
        Some((i, _)) => i,
        None => {
            evaluations
                .iter()
                .enumerate()
                .max_by(|(ia, a), (ib, b)| {
                    a.coverage
                        .partial_cmp(&b.coverage)
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then(ib.cmp(ia))
                })
                .expect("budget >= 1")
                .0
        }
    };
    Ok(TuningReport {
        winner: evaluations[winner_index].config.clone(),
        winner_index,
        evaluations,
        target_coverage: spec.target_coverage,
        coverage_slack: COVERAGE_SLACK,
    })
}

/// Calibrate `config` on `cal`, predict on `calval`, return
/// `(avg set size, coverage)` of the raw sets.
pub fn evaluate_config(
    cal: &LabeledDataset,
    calval: &LabeledDataset,
    config: &ScoreConfig,
    method: TuneMethod,
    alpha: f64,
    min_group_n: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let predictor = match method {
        TuneMethod::Marginal => calibrate_marginal(cal, config, alpha, seed)?,
        TuneMethod::Mondrian => calibrate_mondrian(cal, config, alpha, min_group_n, seed)?,
    };
    let sets = predict_batch(calval, &predictor, &PredictOptions::raw())?;
    let labels: Vec<usize> = calval.records().iter().map(|r| r.label).collect();
    let coverage = empirical_coverage(&sets, &labels)?;
    Ok((average_size(&sets), coverage))
}

/// Coverage of raw avg-k sets on `calval` when calibrated on `cal` at `k`.
fn avgk_coverage(cal: &LabeledDataset, calval: &LabeledDataset, k: f64) -> Result<f64> {
    let predictor = calibrate_avgk(cal, k, 0)?;
    let sets = predict_batch(calval, &predictor, &PredictOptions::raw())?;
    let labels: Vec<usize> = calval.records().iter().map(|r| r.label).collect();
    empirical_coverage(&sets, &labels)
}

/// Precision of the avg-k binary search.
pub const AVGK_PRECISION: f64 = 1e-5;

/// Smallest `k` (to 1e-5) whose calval coverage reaches `target_coverage`.
pub fn tune_avgk(cal: &LabeledDataset, calval: &LabeledDataset, target_coverage: f64) -> Result<f64> {
    if cal.is_empty() || calval.is_empty() {
        return Err(Error::Parameter("cal and calval must be nonempty".into()));
    }
    if !(0.0 <= target_coverage) {
        return Err(Error::Parameter(format!(
            "target_coverage must be non-negative, got {target_coverage}"
        )));
    }
    let m = cal.num_classes() as f64;

    let top = avgk_coverage(cal, calval, m)?;
    if top < target_coverage {
        return Err(Error::Calibration(format!(
            "target coverage {target_coverage} unreachable: coverage at k=m is {top}"
        )));
    }

    // guard the monotonicity assumption on a coarse probe grid
    let mut last = -1.0;
    for i in 1..=5 {
        let k = m * i as f64 / 5.0;
        let cov = avgk_coverage(cal, calval, k)?;
        if cov + 1e-12 < last {
            return Err(Error::Calibration(format!(
                "avg-k coverage is not monotone in k: coverage({:.3}) = {:.6} after {:.6}",
                k, cov, last
            )));
        }
        last = cov;
    }

    let mut lo = 0.0; // coverage below target (virtual at k -> 0+)
    let mut hi = m; // coverage >= target
    while hi - lo > AVGK_PRECISION {
        let mid = 0.5 * (lo + hi);
        if avgk_coverage(cal, calval, mid)? >= target_coverage {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}
