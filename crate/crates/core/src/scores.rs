//! Conformal score functions.
//!
//! A score `s(x, y)` maps a probability vector and a candidate label to a
//! real number; larger scores mean worse agreement. Four kinds are
//! implemented:
//!
//! - `lac`:  `1 - p_y`
//! - `aps`:  `rho(y) + u * p_y`
//! - `raps`: `rho(y) + u * p_y + lambda * (rank(y) - k_reg)^+`
//! - `saps`: `u * p_y` when `rank(y) = 1`, else
//!   `max(p) + lambda * (rank(y) - 2 + u)`
//!
//! where `rho(y)` is the probability mass of labels with strictly greater
//! probability than `y`, `rank(y)` is the 1-based ordinal of `y` when labels
//! are sorted by descending probability (ties broken by ascending class
//! index), and `u` is a per-record uniform draw shared by all labels of the
//! record. With `u` fixed the scores of one record are non-decreasing in
//! rank, so thresholding them yields a prefix of the ranking.
//!
//! Temperature scaling operates on log-probabilities (the ingestion format
//! carries probabilities, not logits); it preserves the argmax and the
//! ranking for any `T > 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stream;

/// Which score function to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Lac,
    Aps,
    Raps,
    Saps,
}

impl std::str::FromStr for ScoreKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lac" => Ok(ScoreKind::Lac),
            "aps" => Ok(ScoreKind::Aps),
            "raps" => Ok(ScoreKind::Raps),
            "saps" => Ok(ScoreKind::Saps),
            other => Err(Error::Parameter(format!("unknown score kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ScoreKind::Lac => "lac",
            ScoreKind::Aps => "aps",
            ScoreKind::Raps => "raps",
            ScoreKind::Saps => "saps",
        };
        f.write_str(s)
    }
}

/// Source of the per-record uniform `u`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UMode {
    /// Counter-based stream keyed by `(seed, example_id)` — the same record
    /// receives the same `u` at calibration and prediction time.
    #[default]
    Seeded,
    /// `u = 1` always; scores become pure functions of `(probs, y, cfg)`.
    FixedOne,
}

/// Score-function configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub kind: ScoreKind,
    /// Temperature `T > 0` applied to log-probabilities before scoring.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Regularization weight for raps/saps.
    #[serde(default)]
    pub lambda: f64,
    /// Rank threshold for the raps penalty.
    #[serde(default = "default_k_reg")]
    pub k_reg: usize,
    /// When false, `u = 1` regardless of `u_mode`.
    #[serde(default = "default_randomized")]
    pub randomized: bool,
    #[serde(default)]
    pub u_mode: UMode,
}

fn default_temperature() -> f64 {
    1.0
}
fn default_k_reg() -> usize {
    1
}
fn default_randomized() -> bool {
    true
}

impl ScoreConfig {
    /// Defaults: `T = 1`, `lambda = 0`, `k_reg = 1`, seeded randomization.
    pub fn new(kind: ScoreKind) -> Self {
        Self {
            kind,
            temperature: 1.0,
            lambda: 0.0,
            k_reg: 1,
            randomized: true,
            u_mode: UMode::Seeded,
        }
    }

    /// Deterministic variant (`u = 1`).
    pub fn deterministic(kind: ScoreKind) -> Self {
        Self {
            randomized: false,
            u_mode: UMode::FixedOne,
            ..Self::new(kind)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Parameter(format!(
                "temperature must be a positive real, got {}",
                self.temperature
            )));
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::Parameter(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if self.kind == ScoreKind::Raps && self.k_reg < 1 {
            return Err(Error::Parameter("k_reg must be >= 1 for raps".into()));
        }
        Ok(())
    }

    /// The uniform draw used for `example_id` under this config.
    pub fn u_for(&self, seed: u64, example_id: &str) -> f64 {
        if !self.randomized {
            return 1.0;
        }
        match self.u_mode {
            UMode::FixedOne => 1.0,
            UMode::Seeded => stream::uniform(seed, "score-u", example_id),
        }
    }
}

/// Per-label score ingredients for one record.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredLabel {
    pub label: usize,
    pub score: f64,
    /// 1-based ordinal of the label by descending probability, ties broken
    /// by ascending class index.
    pub rank: usize,
    /// Probability mass of labels with strictly greater probability.
    pub mass_above: f64,
}

/// Ranking of one probability vector: descending-probability order with
/// deterministic tie-breaking, plus strictly-greater mass per label.
#[derive(Debug, Clone)]
pub struct Ranking {
    /// Labels sorted by descending probability (ties: ascending index).
    pub order: Vec<usize>,
    /// 1-based rank per label.
    pub rank_of: Vec<usize>,
    /// Strictly-greater probability mass per label.
    pub mass_above: Vec<f64>,
    pub max_prob: f64,
}

impl Ranking {
    pub fn new(probs: &[f64]) -> Self {
        let m = probs.len();
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| {
            probs[b]
                .partial_cmp(&probs[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let mut rank_of = vec![0usize; m];
        let mut mass_above = vec![0.0f64; m];
        let mut cum = 0.0;
        let mut i = 0;
        while i < m {
            // labels with equal probability share mass_above
            let mut j = i;
            while j < m && probs[order[j]] == probs[order[i]] {
                j += 1;
            }
            for k in i..j {
                rank_of[order[k]] = k + 1;
                mass_above[order[k]] = cum;
            }
            for k in i..j {
                cum += probs[order[k]];
            }
            i = j;
        }
        let max_prob = if m == 0 { 0.0 } else { probs[order[0]] };
        Self {
            order,
            rank_of,
            mass_above,
            max_prob,
        }
    }
}

/// Softmax of `log(probs) / T`: sharpens (`T < 1`) or flattens (`T > 1`) the
/// vector while preserving the argmax. Zero entries are clamped to 1e-12
/// before the log. `T = 1` returns the input unchanged (bit-exact).
pub fn apply_temperature(probs: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Parameter(format!(
            "temperature must be a positive real, got {temperature}"
        )));
    }
    if temperature == 1.0 {
        return Ok(probs.to_vec());
    }
    let logs: Vec<f64> = probs.iter().map(|p| p.max(1e-12).ln() / temperature).collect();
    let max_log = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logs.iter().map(|l| (l - max_log).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| e / sum).collect())
}

fn score_from_ranking(probs: &[f64], ranking: &Ranking, y: usize, cfg: &ScoreConfig, u: f64) -> f64 {
    let p_y = probs[y];
    match cfg.kind {
        ScoreKind::Lac => 1.0 - p_y,
        ScoreKind::Aps => ranking.mass_above[y] + u * p_y,
        ScoreKind::Raps => {
            let penalty = ranking.rank_of[y].saturating_sub(cfg.k_reg) as f64;
            ranking.mass_above[y] + u * p_y + cfg.lambda * penalty
        }
        ScoreKind::Saps => {
            if ranking.rank_of[y] == 1 {
                u * p_y
            } else {
                ranking.max_prob + cfg.lambda * (ranking.rank_of[y] as f64 - 2.0 + u)
            }
        }
    }
}

/// Score one candidate label. `probs` must already be temperature-scaled;
/// `u` is the caller-supplied per-record uniform.
pub fn score(probs: &[f64], y: usize, cfg: &ScoreConfig, u: f64) -> Result<f64> {
    if y >= probs.len() {
        return Err(Error::Parameter(format!(
            "label {y} out of range for {} classes",
            probs.len()
        )));
    }
    cfg.validate()?;
    let ranking = Ranking::new(probs);
    Ok(score_from_ranking(probs, &ranking, y, cfg, u))
}

/// Score every label of one record; one ranking pass shared by all labels.
pub fn score_all(probs: &[f64], cfg: &ScoreConfig, u: f64) -> Result<Vec<ScoredLabel>> {
    cfg.validate()?;
    let ranking = Ranking::new(probs);
    Ok((0..probs.len())
        .map(|y| ScoredLabel {
            label: y,
            score: score_from_ranking(probs, &ranking, y, cfg, u),
            rank: ranking.rank_of[y],
            mass_above: ranking.mass_above[y],
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn temperature_one_is_identity() {
        let probs = vec![0.2, 0.3, 0.5];
        let out = apply_temperature(&probs, 1.0).unwrap();
        assert_eq!(out, probs);
    }

    #[test]
    fn temperature_preserves_symmetry() {
        for t in [0.3, 1.0, 2.5] {
            let out = apply_temperature(&[0.5, 0.5], t).unwrap();
            assert_close(out[0], 0.5, 1e-12);
            assert_close(out[1], 0.5, 1e-12);
        }
    }

    #[test]
    fn temperature_half_squares_and_renormalizes() {
        // oracle: p_i^2 / sum_j p_j^2
        let probs = [0.7, 0.2, 0.1];
        let sq_sum: f64 = probs.iter().map(|p| p * p).sum();
        let expected: Vec<f64> = probs.iter().map(|p| p * p / sq_sum).collect();
        let out = apply_temperature(&probs, 0.5).unwrap();
        for (o, e) in out.iter().zip(&expected) {
            assert_close(*o, *e, 1e-9);
        }
        // the spec'd rounded values
        assert_close(out[0], 0.9074, 1e-3);
        assert_close(out[1], 0.0741, 1e-3);
        assert_close(out[2], 0.0185, 1e-3);
    }

    #[test]
    fn temperature_preserves_argmax() {
        let probs = [0.05, 0.6, 0.35];
        for t in [0.1, 0.5, 2.0, 4.9] {
            let out = apply_temperature(&probs, t).unwrap();
            let argmax = out
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, 1, "T={t}");
        }
        let sum: f64 = apply_temperature(&probs, 0.25).unwrap().iter().sum();
        assert_close(sum, 1.0, 1e-12);
    }

    #[test]
    fn raps_hand_example() {
        let cfg = ScoreConfig {
            lambda: 0.1,
            k_reg: 1,
            ..ScoreConfig::deterministic(ScoreKind::Raps)
        };
        let probs = [0.5, 0.3, 0.2];
        let expected = [0.5, 0.9, 1.2];
        for (y, e) in expected.iter().enumerate() {
            let s = score(&probs, y, &cfg, 1.0).unwrap();
            assert_close(s, *e, 1e-12);
        }
    }

    #[test]
    fn saps_hand_example() {
        let cfg = ScoreConfig {
            lambda: 0.2,
            ..ScoreConfig::deterministic(ScoreKind::Saps)
        };
        let probs = [0.6, 0.3, 0.1];
        let expected = [0.6, 0.8, 1.0];
        for (y, e) in expected.iter().enumerate() {
            let s = score(&probs, y, &cfg, 1.0).unwrap();
            assert_close(s, *e, 1e-12);
        }
    }

    #[test]
    fn lac_perfect_confidence_scores_zero() {
        let cfg = ScoreConfig::deterministic(ScoreKind::Lac);
        let s = score(&[0.0, 1.0, 0.0], 1, &cfg, 1.0).unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn aps_argmax_score_is_its_probability() {
        let cfg = ScoreConfig::deterministic(ScoreKind::Aps);
        let s = score(&[0.5, 0.3, 0.2], 0, &cfg, 1.0).unwrap();
        assert_close(s, 0.5, 1e-12);
    }

    #[test]
    fn out_of_range_label_errors() {
        let cfg = ScoreConfig::deterministic(ScoreKind::Lac);
        assert!(score(&[0.5, 0.5], 2, &cfg, 1.0).is_err());
    }

    #[test]
    fn rank_ties_break_by_class_index() {
        let ranking = Ranking::new(&[0.25, 0.25, 0.5]);
        assert_eq!(ranking.order, vec![2, 0, 1]);
        assert_eq!(ranking.rank_of, vec![2, 3, 1]);
        // equal-probability mass excluded from mass_above
        assert_close(ranking.mass_above[0], 0.5, 1e-12);
        assert_close(ranking.mass_above[1], 0.5, 1e-12);
        assert_close(ranking.mass_above[2], 0.0, 1e-12);
    }

    #[test]
    fn aps_equals_raps_with_zero_lambda() {
        let aps = ScoreConfig::deterministic(ScoreKind::Aps);
        let raps = ScoreConfig {
            lambda: 0.0,
            k_reg: 3,
            ..ScoreConfig::deterministic(ScoreKind::Raps)
        };
        let probs = [0.4, 0.1, 0.25, 0.25];
        for y in 0..probs.len() {
            let a = score(&probs, y, &aps, 1.0).unwrap();
            let r = score(&probs, y, &raps, 1.0).unwrap();
            assert_eq!(a, r);
        }
    }

    #[test]
    fn saps_tail_depends_only_on_max_prob() {
        let cfg = ScoreConfig {
            lambda: 0.3,
            ..ScoreConfig::deterministic(ScoreKind::Saps)
        };
        // same max, different tails
        let a = [0.6, 0.3, 0.08, 0.02];
        let b = [0.6, 0.2, 0.15, 0.05];
        for rank in 2..=4 {
            let ya = Ranking::new(&a).order[rank - 1];
            let yb = Ranking::new(&b).order[rank - 1];
            let sa = score(&a, ya, &cfg, 0.37).unwrap();
            let sb = score(&b, yb, &cfg, 0.37).unwrap();
            assert_eq!(sa, sb, "rank {rank}");
        }
    }

    #[test]
    fn fixed_one_mode_is_pure() {
        let cfg = ScoreConfig {
            randomized: true,
            u_mode: UMode::FixedOne,
            ..ScoreConfig::new(ScoreKind::Aps)
        };
        assert_eq!(cfg.u_for(1, "x"), 1.0);
        assert_eq!(cfg.u_for(2, "y"), 1.0);
        let off = ScoreConfig {
            randomized: false,
            u_mode: UMode::Seeded,
            ..ScoreConfig::new(ScoreKind::Aps)
        };
        assert_eq!(off.u_for(1, "x"), 1.0);
    }

    #[test]
    fn seeded_u_is_stable_per_example() {
        let cfg = ScoreConfig::new(ScoreKind::Aps);
        let u1 = cfg.u_for(9, "rec-17");
        let u2 = cfg.u_for(9, "rec-17");
        assert_eq!(u1, u2);
        assert_ne!(cfg.u_for(9, "rec-17"), cfg.u_for(9, "rec-18"));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn simplex(m: usize) -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(1e-6f64..1.0, m).prop_map(|raw| {
                let sum: f64 = raw.iter().sum();
                raw.iter().map(|x| x / sum).collect()
            })
        }

        proptest! {
            #[test]
            fn scores_non_decreasing_in_rank(
                probs in simplex(8),
                u in 0.0f64..=1.0,
                lambda in 0.0f64..2.0,
                k_reg in 1usize..4,
            ) {
                for kind in [ScoreKind::Aps, ScoreKind::Raps, ScoreKind::Saps] {
                    let cfg = ScoreConfig {
                        lambda,
                        k_reg,
                        ..ScoreConfig::deterministic(kind)
                    };
                    let scored = score_all(&probs, &cfg, u).unwrap();
                    let ranking = Ranking::new(&probs);
                    let in_rank_order: Vec<f64> =
                        ranking.order.iter().map(|&y| scored[y].score).collect();
                    for w in in_rank_order.windows(2) {
                        prop_assert!(
                            w[0] <= w[1] + 1e-12,
                            "{kind} scores not monotone: {w:?}"
                        );
                    }
                }
            }

            #[test]
            fn temperature_output_is_simplex(probs in simplex(6), t in 0.05f64..5.0) {
                let out = apply_temperature(&probs, t).unwrap();
                let sum: f64 = out.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);
                prop_assert!(out.iter().all(|p| *p >= 0.0));
            }
        }
    }
}
