//! Conformal calibration: marginal and group-conditional (Mondrian)
//! quantiles, and the avg-k softmax threshold.
//!
//! The conformal quantile of `n` calibration scores at miscoverage `alpha`
//! is the `r`-th smallest score with `r = ceil((n+1)(1-alpha))`, or `+inf`
//! when `r > n` (every label is then included downstream). Mondrian
//! calibration applies the same rule within each group independently, which
//! transfers the coverage guarantee to each group separately.
//!
//! The avg-k predictor instead pools all `m * n` calibration softmax values
//! and thresholds at their empirical `(1 - k/m)`-quantile, so test sets
//! average `k` labels.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::scores::{apply_temperature, score_all, ScoreConfig};
use crate::setpred::PredictionSet;

/// Serialize f64 thresholds with `"inf"` / `"-inf"` for the infinities,
/// which plain JSON cannot represent.
pub(crate) mod float_or_inf {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn parse(repr_str: &str) -> Option<f64> {
        match repr_str {
            "inf" | "+inf" => Some(f64::INFINITY),
            "-inf" => Some(f64::NEG_INFINITY),
            _ => None,
        }
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) => parse(&s)
                .ok_or_else(|| D::Error::custom(format!("expected number, \"inf\" or \"-inf\", got {s:?}"))),
        }
    }

    pub mod vec {
        use super::Repr;
        use serde::de::Error as _;
        use serde::ser::SerializeSeq;
        use serde::{Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            let mut seq = s.serialize_seq(Some(v.len()))?;
            for x in v {
                if x.is_infinite() {
                    seq.serialize_element(if *x > 0.0 { "inf" } else { "-inf" })?;
                } else {
                    seq.serialize_element(x)?;
                }
            }
            seq.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            let reprs = Vec::<Repr>::deserialize(d)?;
            reprs
                .into_iter()
                .map(|r| match r {
                    Repr::Num(v) => Ok(v),
                    Repr::Str(s) => super::parse(&s).ok_or_else(|| {
                        D::Error::custom(format!("expected number, \"inf\" or \"-inf\", got {s:?}"))
                    }),
                })
                .collect()
        }
    }
}

/// Marginal split-conformal predictor: one global threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalPredictor {
    pub score_cfg: ScoreConfig,
    pub alpha: f64,
    #[serde(with = "float_or_inf")]
    pub q_hat: f64,
    pub m: usize,
    pub n_cal: usize,
    pub seed: u64,
}

/// Mondrian predictor: one threshold per group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MondrianPredictor {
    pub score_cfg: ScoreConfig,
    pub alpha: f64,
    #[serde(with = "float_or_inf::vec")]
    pub q_hat_by_group: Vec<f64>,
    pub m: usize,
    pub n_cal: usize,
    pub seed: u64,
}

/// Avg-k predictor: a single softmax threshold with expected set size `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvgKPredictor {
    pub k: f64,
    #[serde(with = "float_or_inf")]
    pub q_k: f64,
    pub m: usize,
    pub n_cal: usize,
    pub seed: u64,
}

/// A calibrated set predictor. Exactly the fields of the active method are
/// populated; the JSON encoding tags the variant with `"method"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum SetPredictor {
    Marginal(MarginalPredictor),
    Mondrian(MondrianPredictor),
    Avgk(AvgKPredictor),
}

impl SetPredictor {
    pub fn method_name(&self) -> &'static str {
        match self {
            SetPredictor::Marginal(_) => "marginal",
            SetPredictor::Mondrian(_) => "mondrian",
            SetPredictor::Avgk(_) => "avgk",
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            SetPredictor::Marginal(p) => p.m,
            SetPredictor::Mondrian(p) => p.m,
            SetPredictor::Avgk(p) => p.m,
        }
    }

    pub fn n_cal(&self) -> usize {
        match self {
            SetPredictor::Marginal(p) => p.n_cal,
            SetPredictor::Mondrian(p) => p.n_cal,
            SetPredictor::Avgk(p) => p.n_cal,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            SetPredictor::Marginal(p) => p.seed,
            SetPredictor::Mondrian(p) => p.seed,
            SetPredictor::Avgk(p) => p.seed,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Internal(format!("predictor serialization failed: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            msg: format!("predictor artifact: {e}"),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// The `ceil((n+1)(1-alpha))`-th smallest score, or `+inf` when that index
/// exceeds `n`.
pub fn conformal_quantile(scores: &[f64], alpha: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Calibration("no calibration scores".into()));
    }
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::Parameter(format!("alpha must be in (0,1), got {alpha}")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Calibration("calibration scores contain NaN".into()));
    }
    let n = scores.len();
    let r = ((n as f64 + 1.0) * (1.0 - alpha)).ceil() as usize;
    if r > n {
        return Ok(f64::INFINITY);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("NaN ruled out above"));
    Ok(sorted[r - 1])
}

/// Score the true label of every record under `cfg`, using the predictor
/// seed for the `u` stream.
pub fn true_label_scores(ds: &LabeledDataset, cfg: &ScoreConfig, seed: u64) -> Result<Vec<f64>> {
    cfg.validate()?;
    ds.records()
        .iter()
        .map(|rec| {
            let scaled = apply_temperature(&rec.probs, cfg.temperature)?;
            let u = cfg.u_for(seed, &rec.example_id);
            let scored = score_all(&scaled, cfg, u)?;
            Ok(scored[rec.label].score)
        })
        .collect()
}

/// Calibrate a marginal predictor on the true-label scores of `cal`.
pub fn calibrate_marginal(
    cal: &LabeledDataset,
    cfg: &ScoreConfig,
    alpha: f64,
    seed: u64,
) -> Result<SetPredictor> {
    if cal.is_empty() {
        return Err(Error::Calibration("calibration dataset is empty".into()));
    }
    let scores = true_label_scores(cal, cfg, seed)?;
    let q_hat = conformal_quantile(&scores, alpha)?;
    Ok(SetPredictor::Marginal(MarginalPredictor {
        score_cfg: cfg.clone(),
        alpha,
        q_hat,
        m: cal.num_classes(),
        n_cal: cal.len(),
        seed,
    }))
}

/// Calibrate one threshold per group. Every group must have at least
/// `min_group_n` calibration records; a smaller group is a hard error (a
/// silent fallback to the marginal threshold would masquerade as equalized
/// coverage).
pub fn calibrate_mondrian(
    cal: &LabeledDataset,
    cfg: &ScoreConfig,
    alpha: f64,
    min_group_n: usize,
    seed: u64,
) -> Result<SetPredictor> {
    if cal.is_empty() {
        return Err(Error::Calibration("calibration dataset is empty".into()));
    }
    let scores = true_label_scores(cal, cfg, seed)?;
    let by_group = cal.indices_by_group();
    let mut q_hat_by_group = Vec::with_capacity(by_group.len());
    for (g, indices) in by_group.iter().enumerate() {
        if indices.len() < min_group_n.max(1) {
            return Err(Error::Calibration(format!(
                "group {g} has {} calibration records, fewer than min_group_n={min_group_n}",
                indices.len()
            )));
        }
        let group_scores: Vec<f64> = indices.iter().map(|&i| scores[i]).collect();
        q_hat_by_group.push(conformal_quantile(&group_scores, alpha)?);
    }
    Ok(SetPredictor::Mondrian(MondrianPredictor {
        score_cfg: cfg.clone(),
        alpha,
        q_hat_by_group,
        m: cal.num_classes(),
        n_cal: cal.len(),
        seed,
    }))
}

/// Calibrate the avg-k threshold: pool all `m * n` softmax values, take the
/// `ceil(p * |Y|)`-th smallest (1-based) at `p = 1 - k/m`, with
/// `q_k = -inf` when the index is zero (`k = m`).
pub fn calibrate_avgk(cal: &LabeledDataset, k: f64, seed: u64) -> Result<SetPredictor> {
    let m = cal.num_classes();
    if !(k > 0.0) || k > m as f64 {
        return Err(Error::Parameter(format!(
            "k must satisfy 0 < k <= m={m}, got {k}"
        )));
    }
    if cal.is_empty() {
        return Err(Error::Calibration("calibration dataset is empty".into()));
    }
    let mut pooled: Vec<f64> = cal
        .records()
        .iter()
        .flat_map(|rec| rec.probs.iter().copied())
        .collect();
    pooled.sort_by(|a, b| a.partial_cmp(b).expect("probabilities are finite"));
    let p = 1.0 - k / m as f64;
    let idx = (p * pooled.len() as f64).ceil() as usize;
    let q_k = if idx == 0 {
        f64::NEG_INFINITY
    } else {
        pooled[idx - 1]
    };
    Ok(SetPredictor::Avgk(AvgKPredictor {
        k,
        q_k,
        m,
        n_cal: cal.len(),
        seed,
    }))
}

/// Fraction of sets containing their label (empirical coverage).
pub fn empirical_coverage(sets: &[PredictionSet], labels: &[usize]) -> Result<f64> {
    if sets.len() != labels.len() {
        return Err(Error::Parameter(format!(
            "{} sets but {} labels",
            sets.len(),
            labels.len()
        )));
    }
    if sets.is_empty() {
        return Err(Error::Parameter("cannot compute coverage of zero sets".into()));
    }
    let covered = sets
        .iter()
        .zip(labels)
        .filter(|(s, y)| s.members.binary_search(y).is_ok())
        .count();
    Ok(covered as f64 / sets.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ProbRecord;
    use crate::scores::ScoreKind;

    fn record(id: &str, probs: Vec<f64>, label: usize, group: usize) -> ProbRecord {
        ProbRecord {
            example_id: id.into(),
            probs,
            label,
            group,
        }
    }

    fn lac() -> ScoreConfig {
        ScoreConfig::deterministic(ScoreKind::Lac)
    }

    #[test]
    fn quantile_order_statistic() {
        let scores: Vec<f64> = (1..=10).map(|i| i as f64).collect();
        // r = ceil(11 * 0.8) = 9
        assert_eq!(conformal_quantile(&scores, 0.2).unwrap(), 9.0);
    }

    #[test]
    fn quantile_exceeding_n_is_infinite() {
        let scores = vec![0.3, 0.1, 0.5, 0.2, 0.4];
        assert_eq!(conformal_quantile(&scores, 0.05).unwrap(), f64::INFINITY);
    }

    #[test]
    fn quantile_single_score() {
        assert_eq!(conformal_quantile(&[0.42], 0.5).unwrap(), 0.42);
    }

    #[test]
    fn quantile_empty_errors() {
        assert!(conformal_quantile(&[], 0.1).is_err());
    }

    #[test]
    fn marginal_hand_example() {
        // true-label probs (0.9, 0.8, 0.1) -> lac scores (0.1, 0.2, 0.9)
        let records = vec![
            record("a", vec![0.9, 0.1], 0, 0),
            record("b", vec![0.8, 0.2], 0, 0),
            record("c", vec![0.1, 0.9], 0, 0),
        ];
        let cal = LabeledDataset::new(records, 2).unwrap();
        let pred = calibrate_marginal(&cal, &lac(), 0.25, 0).unwrap();
        match &pred {
            SetPredictor::Marginal(p) => {
                assert!((p.q_hat - 0.9).abs() < 1e-12);
                assert_eq!(p.n_cal, 3);
            }
            _ => panic!("wrong method"),
        }
    }

    #[test]
    fn marginal_tiny_alpha_is_infinite() {
        let records = vec![
            record("a", vec![0.9, 0.1], 0, 0),
            record("b", vec![0.8, 0.2], 0, 0),
            record("c", vec![0.1, 0.9], 0, 0),
        ];
        let cal = LabeledDataset::new(records, 2).unwrap();
        let pred = calibrate_marginal(&cal, &lac(), 1e-9, 0).unwrap();
        match pred {
            SetPredictor::Marginal(p) => assert_eq!(p.q_hat, f64::INFINITY),
            _ => panic!("wrong method"),
        }
    }

    #[test]
    fn marginal_duplicated_calibration_unchanged() {
        let base = vec![
            record("a", vec![0.9, 0.1], 0, 0),
            record("b", vec![0.8, 0.2], 0, 0),
            record("c", vec![0.1, 0.9], 0, 0),
        ];
        let mut doubled = base.clone();
        doubled.extend(base.iter().cloned().map(|mut r| {
            r.example_id.push_str("-dup");
            r
        }));
        let cal = LabeledDataset::new(doubled, 2).unwrap();
        // n=6, r = ceil(7 * 0.75) = 6 -> 6th smallest of {.1,.1,.2,.2,.9,.9}
        let pred = calibrate_marginal(&cal, &lac(), 0.25, 0).unwrap();
        match pred {
            SetPredictor::Marginal(p) => assert!((p.q_hat - 0.9).abs() < 1e-12),
            _ => panic!("wrong method"),
        }
    }

    #[test]
    fn mondrian_per_group_order_statistics() {
        // group 0 scores {0.1,0.2,0.3,0.4}, group 1 scores {0.5,0.6,0.7,0.8}
        let mut records = Vec::new();
        for (i, s) in [0.1, 0.2, 0.3, 0.4].iter().enumerate() {
            records.push(record(&format!("e{i}"), vec![1.0 - s, *s], 0, 0));
        }
        for (i, s) in [0.5, 0.6, 0.7, 0.8].iter().enumerate() {
            records.push(record(&format!("h{i}"), vec![1.0 - s, *s], 0, 1));
        }
        let cal = LabeledDataset::new(records, 2).unwrap();
        let pred = calibrate_mondrian(&cal, &lac(), 0.2, 1, 0).unwrap();
        match pred {
            SetPredictor::Mondrian(p) => {
                // r = ceil(5 * 0.8) = 4 per group
                assert!((p.q_hat_by_group[0] - 0.4).abs() < 1e-12);
                assert!((p.q_hat_by_group[1] - 0.8).abs() < 1e-12);
            }
            _ => panic!("wrong method"),
        }
    }

    #[test]
    fn mondrian_identical_groups_match_marginal() {
        let scores = [0.15, 0.35, 0.55, 0.75, 0.95];
        let mut records = Vec::new();
        for g in 0..2 {
            for (i, s) in scores.iter().enumerate() {
                records.push(record(&format!("g{g}i{i}"), vec![1.0 - s, *s], 0, g));
            }
        }
        let cal = LabeledDataset::new(records, 2).unwrap();
        let mondrian = calibrate_mondrian(&cal, &lac(), 0.2, 1, 0).unwrap();
        let marginal = calibrate_marginal(&cal, &lac(), 0.2, 0).unwrap();
        let q = match marginal {
            SetPredictor::Marginal(p) => p.q_hat,
            _ => unreachable!(),
        };
        match mondrian {
            SetPredictor::Mondrian(p) => {
                assert_eq!(p.q_hat_by_group[0], p.q_hat_by_group[1]);
                assert_eq!(p.q_hat_by_group[0], q);
            }
            _ => panic!("wrong method"),
        }
    }

    #[test]
    fn mondrian_small_group_errors_with_name() {
        let mut records: Vec<ProbRecord> = (0..40)
            .map(|i| record(&format!("a{i}"), vec![0.7, 0.3], 0, 0))
            .collect();
        for i in 0..10 {
            records.push(record(&format!("b{i}"), vec![0.6, 0.4], 0, 1));
        }
        let cal = LabeledDataset::new(records, 2).unwrap();
        let err = calibrate_mondrian(&cal, &lac(), 0.1, 30, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("group 1") && msg.contains("10"), "{msg}");
    }

    #[test]
    fn avgk_pooled_quantile_hand_example() {
        let records = vec![
            record("a", vec![0.7, 0.1, 0.1, 0.1], 0, 0),
            record("b", vec![0.4, 0.3, 0.2, 0.1], 0, 0),
        ];
        let cal = LabeledDataset::new(records, 4).unwrap();
        let pred = calibrate_avgk(&cal, 1.0, 0).unwrap();
        match &pred {
            SetPredictor::Avgk(p) => assert!((p.q_k - 0.3).abs() < 1e-12),
            _ => panic!("wrong method"),
        }
        // both records' sets have exactly one label above 0.3
        use crate::setpred::{predict_set, PredictOptions};
        let opts = PredictOptions::raw();
        for rec in cal.records() {
            let set = predict_set(rec, &pred, &opts).unwrap();
            assert_eq!(set.size, 1);
        }
    }

    #[test]
    fn avgk_full_k_gives_negative_infinity() {
        let records = vec![record("a", vec![0.5, 0.25, 0.25], 0, 0)];
        let cal = LabeledDataset::new(records, 3).unwrap();
        let pred = calibrate_avgk(&cal, 3.0, 0).unwrap();
        match pred {
            SetPredictor::Avgk(p) => assert_eq!(p.q_k, f64::NEG_INFINITY),
            _ => panic!("wrong method"),
        }
    }

    #[test]
    fn avgk_one_hot_selects_argmax_singletons() {
        let records: Vec<ProbRecord> = (0..6)
            .map(|i| {
                let mut probs = vec![0.0; 4];
                probs[i % 4] = 1.0;
                record(&format!("r{i}"), probs, i % 4, 0)
            })
            .collect();
        let cal = LabeledDataset::new(records, 4).unwrap();
        let pred = calibrate_avgk(&cal, 1.0, 0).unwrap();
        match &pred {
            SetPredictor::Avgk(p) => assert_eq!(p.q_k, 0.0),
            _ => panic!("wrong method"),
        }
        use crate::setpred::{predict_set, PredictOptions};
        for rec in cal.records() {
            let set = predict_set(rec, &pred, &PredictOptions::raw()).unwrap();
            assert_eq!(set.members, vec![rec.label]);
        }
    }

    #[test]
    fn avgk_rejects_out_of_range_k() {
        let cal =
            LabeledDataset::new(vec![record("a", vec![0.5, 0.5], 0, 0)], 2).unwrap();
        assert!(calibrate_avgk(&cal, 0.0, 0).is_err());
        assert!(calibrate_avgk(&cal, 2.5, 0).is_err());
    }

    #[test]
    fn coverage_counting() {
        use crate::setpred::PredictionSet;
        let mk = |members: Vec<usize>, label: usize| PredictionSet {
            example_id: "x".into(),
            members: members.clone(),
            size: members.len(),
            covered: members.binary_search(&label).is_ok(),
            label,
            group: 0,
        };
        let sets: Vec<PredictionSet> = (0..10).map(|i| mk(vec![0, 1], if i < 9 { 0 } else { 2 })).collect();
        let labels: Vec<usize> = sets.iter().map(|s| s.label).collect();
        assert_eq!(empirical_coverage(&sets, &labels).unwrap(), 0.9);
        let all = vec![mk(vec![1], 1), mk(vec![2], 2)];
        let labels: Vec<usize> = all.iter().map(|s| s.label).collect();
        assert_eq!(empirical_coverage(&all, &labels).unwrap(), 1.0);
        let none = vec![mk(vec![1], 0), mk(vec![2], 0)];
        assert_eq!(empirical_coverage(&none, &[0, 0]).unwrap(), 0.0);
        assert!(empirical_coverage(&none, &[0]).is_err());
    }

    #[test]
    fn predictor_json_round_trip_with_infinities() {
        let pred = SetPredictor::Mondrian(MondrianPredictor {
            score_cfg: lac(),
            alpha: 0.1,
            q_hat_by_group: vec![0.5, f64::INFINITY],
            m: 3,
            n_cal: 100,
            seed: 9,
        });
        let json = pred.to_json().unwrap();
        assert!(json.contains("\"inf\""), "{json}");
        let back = SetPredictor::from_json(&json).unwrap();
        assert_eq!(back, pred);

        let avgk = SetPredictor::Avgk(AvgKPredictor {
            k: 3.0,
            q_k: f64::NEG_INFINITY,
            m: 3,
            n_cal: 10,
            seed: 1,
        });
        let json = avgk.to_json().unwrap();
        assert!(json.contains("\"-inf\""), "{json}");
        assert_eq!(SetPredictor::from_json(&json).unwrap(), avgk);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        /// Brute-force oracle: sort and index, with the r > n convention.
        fn quantile_oracle(scores: &[f64], alpha: f64) -> f64 {
            let mut sorted = scores.to_vec();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = sorted.len();
            let r = ((n as f64 + 1.0) * (1.0 - alpha)).ceil() as usize;
            if r > n {
                f64::INFINITY
            } else {
                sorted[r - 1]
            }
        }

        proptest! {
            #[test]
            fn quantile_matches_oracle(
                scores in proptest::collection::vec(-1e3f64..1e3, 1..200),
                alpha in 0.001f64..0.999,
            ) {
                let got = conformal_quantile(&scores, alpha).unwrap();
                let want = quantile_oracle(&scores, alpha);
                if want.is_infinite() {
                    prop_assert!(got.is_infinite());
                } else {
                    prop_assert!((got - want).abs() <= 1e-12);
                }
            }

            #[test]
            fn quantile_monotone_in_alpha(
                scores in proptest::collection::vec(-1e3f64..1e3, 1..100),
                a1 in 0.01f64..0.98,
                gap in 0.001f64..0.5,
            ) {
                let a2 = (a1 + gap).min(0.99);
                // smaller alpha -> larger (or equal) quantile
                let q_small_alpha = conformal_quantile(&scores, a1).unwrap();
                let q_large_alpha = conformal_quantile(&scores, a2).unwrap();
                prop_assert!(q_small_alpha >= q_large_alpha);
            }
        }
    }
}
