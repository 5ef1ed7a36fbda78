//! Per-group and between-group fairness metrics.
//!
//! Set-level metrics (coverage, average size, singleton frequency) come from
//! prediction sets; human-level metrics (accuracy improvement over control,
//! adoption) come from trial responses. Delta quantities are max-over-pairs
//! differences, which for scalar per-group values reduce to `max - min`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::humansim::TrialResponse;
use crate::setpred::PredictionSet;

/// Metrics for one protected group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub group: usize,
    pub n: usize,
    pub coverage: f64,
    pub avg_size: f64,
    pub singleton_freq: f64,
    /// Mean correctness of treated responses (human audits only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    /// Fraction of treated answers chosen from inside the provided set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adoption: Option<f64>,
}

/// Per-group metrics plus the between-group deltas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub per_group: Vec<GroupMetrics>,
    pub delta_cov: f64,
    pub delta_size: f64,
    pub delta_singleton: f64,
    /// Disparate impact of the treatment (max pairwise gap in accuracy
    /// improvement over control).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_accuracy_improvement: Option<f64>,
    /// Accuracy improvement over control per group.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub improvements: Option<BTreeMap<usize, f64>>,
    /// `(most, least)` improved groups when improvements are present,
    /// otherwise the coverage-extremal pair. Ties break toward the lowest
    /// group index.
    pub extremal_pair: (usize, usize),
}

impl FairnessReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map(|s| s + "\n")
            .map_err(|e| Error::Internal(format!("report serialization failed: {e}")))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        sum += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// `(max - min, (argmax, argmin))` with ties broken toward lower indices.
/// Keys iterate in ascending order, so the first strict extremum wins.
fn extremes(values: &BTreeMap<usize, f64>) -> (f64, (usize, usize)) {
    let mut max_g = usize::MAX;
    let mut min_g = usize::MAX;
    let mut max_v = f64::NEG_INFINITY;
    let mut min_v = f64::INFINITY;
    for (&g, &v) in values {
        if v > max_v {
            max_v = v;
            max_g = g;
        }
        if v < min_v {
            min_v = v;
            min_g = g;
        }
    }
    (max_v - min_v, (max_g, min_g))
}

/// Audit prediction sets: per-group coverage, average size, singleton
/// frequency, and their deltas. Every group in `0..n_g` must be nonempty.
pub fn audit_sets(sets: &[PredictionSet], n_g: usize) -> Result<FairnessReport> {
    if n_g == 0 {
        return Err(Error::Audit("n_g must be positive".into()));
    }
    let mut by_group: Vec<Vec<&PredictionSet>> = vec![Vec::new(); n_g];
    for s in sets {
        if s.group >= n_g {
            return Err(Error::Audit(format!(
                "example {}: group {} out of range for n_g={n_g}",
                s.example_id, s.group
            )));
        }
        by_group[s.group].push(s);
    }
    let mut per_group = Vec::with_capacity(n_g);
    for (g, members) in by_group.iter().enumerate() {
        if members.is_empty() {
            return Err(Error::Audit(format!("group {g} has no prediction sets")));
        }
        per_group.push(GroupMetrics {
            group: g,
            n: members.len(),
            coverage: mean(members.iter().map(|s| if s.covered { 1.0 } else { 0.0 })),
            avg_size: mean(members.iter().map(|s| s.size as f64)),
            singleton_freq: mean(members.iter().map(|s| if s.size == 1 { 1.0 } else { 0.0 })),
            accuracy: None,
            adoption: None,
        });
    }
    let cov: BTreeMap<usize, f64> = per_group.iter().map(|g| (g.group, g.coverage)).collect();
    let size: BTreeMap<usize, f64> = per_group.iter().map(|g| (g.group, g.avg_size)).collect();
    let singleton: BTreeMap<usize, f64> = per_group
        .iter()
        .map(|g| (g.group, g.singleton_freq))
        .collect();
    let (delta_cov, cov_pair) = extremes(&cov);
    let (delta_size, _) = extremes(&size);
    let (delta_singleton, _) = extremes(&singleton);
    Ok(FairnessReport {
        per_group,
        delta_cov,
        delta_size,
        delta_singleton,
        delta_accuracy_improvement: None,
        improvements: None,
        extremal_pair: cov_pair,
    })
}

fn group_accuracy(responses: &[TrialResponse], n_g: usize, arm: &str) -> Result<BTreeMap<usize, f64>> {
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in responses {
        if r.group >= n_g {
            return Err(Error::Audit(format!(
                "{arm} arm: response group {} out of range for n_g={n_g}",
                r.group
            )));
        }
        let entry = sums.entry(r.group).or_insert((0.0, 0));
        entry.0 += if r.correct { 1.0 } else { 0.0 };
        entry.1 += 1;
    }
    let mut out = BTreeMap::new();
    for g in 0..n_g {
        match sums.get(&g) {
            Some((sum, n)) => {
                out.insert(g, sum / *n as f64);
            }
            None => {
                return Err(Error::Audit(format!(
                    "group {g} absent from the {arm} arm"
                )))
            }
        }
    }
    Ok(out)
}

/// Per-group accuracy improvement of a treated arm over the control arm.
pub fn accuracy_improvements(
    treated: &[TrialResponse],
    control: &[TrialResponse],
    n_g: usize,
) -> Result<BTreeMap<usize, f64>> {
    let treated_acc = group_accuracy(treated, n_g, "treated")?;
    let control_acc = group_accuracy(control, n_g, "control")?;
    Ok(treated_acc
        .iter()
        .map(|(&g, &acc)| (g, acc - control_acc[&g]))
        .collect())
}

/// Disparate impact: the maximum over ordered pairs of improvement
/// differences, i.e. `max(improvements) - min(improvements)`, with the
/// extremal `(most, least)` pair.
pub fn disparate_impact(improvements: &BTreeMap<usize, f64>) -> Result<(f64, (usize, usize))> {
    if improvements.len() < 2 {
        return Err(Error::Audit(format!(
            "disparate impact needs >= 2 groups, got {}",
            improvements.len()
        )));
    }
    Ok(extremes(improvements))
}

/// Set-level audit augmented with human metrics: per-group treated accuracy
/// and adoption, improvements over control, and their disparate impact.
/// `extremal_pair` anchors on the improvement extremes.
pub fn audit_treatment(
    sets: &[PredictionSet],
    treated: &[TrialResponse],
    control: &[TrialResponse],
    n_g: usize,
) -> Result<FairnessReport> {
    let mut report = audit_sets(sets, n_g)?;
    let improvements = accuracy_improvements(treated, control, n_g)?;
    let (delta_t, pair) = disparate_impact(&improvements)?;
    let treated_acc = group_accuracy(treated, n_g, "treated")?;

    let mut adoption_sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in treated {
        if let Some(chosen) = r.chosen_in_set {
            let entry = adoption_sums.entry(r.group).or_insert((0.0, 0));
            entry.0 += if chosen { 1.0 } else { 0.0 };
            entry.1 += 1;
        }
    }
    for gm in report.per_group.iter_mut() {
        gm.accuracy = Some(treated_acc[&gm.group]);
        gm.adoption = adoption_sums
            .get(&gm.group)
            .map(|(sum, n)| sum / *n as f64);
    }
    report.improvements = Some(improvements);
    report.delta_accuracy_improvement = Some(delta_t);
    report.extremal_pair = pair;
    Ok(report)
}

/// One row of the key-factor table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyFactorRow {
    pub treatment: String,
    pub delta_t: f64,
    /// Factor differences between the most- and least-improved groups
    /// (which need not be the factor-extremal groups, so these can be
    /// negative).
    pub cov_diff: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adoption_diff: Option<f64>,
    pub size_diff: f64,
    pub singleton_diff: f64,
}

/// Key-factor table plus Spearman rank correlations of each factor column
/// with the disparate-impact column. A correlation is absent (not zero)
/// when either column has no rank variation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyFactorTable {
    pub rows: Vec<KeyFactorRow>,
    pub spearman_cov: Option<f64>,
    pub spearman_adoption: Option<f64>,
    pub spearman_size: Option<f64>,
    pub spearman_singleton: Option<f64>,
}

/// Average ranks with ties sharing the mean rank.
fn ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j) as f64 / 2.0; // mean of ranks i+1 ..= j
        for k in i..j {
            out[order[k]] = avg;
        }
        i = j;
    }
    out
}

/// Spearman rank correlation; `None` when either side is degenerate.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let rx = ranks(x);
    let ry = ranks(y);
    let mx = mean(rx.iter().copied());
    let my = mean(ry.iter().copied());
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Build the key-factor table from per-treatment reports. Each report must
/// carry improvements; factor differences anchor on its most/least improved
/// groups.
pub fn key_factor_table(reports: &[(String, FairnessReport)]) -> Result<KeyFactorTable> {
    let mut rows = Vec::with_capacity(reports.len());
    for (treatment, report) in reports {
        let delta_t = report.delta_accuracy_improvement.ok_or_else(|| {
            Error::Audit(format!(
                "treatment {treatment}: report carries no accuracy improvements"
            ))
        })?;
        let (hi, lo) = report.extremal_pair;
        let metric = |g: usize| -> Result<&GroupMetrics> {
            report
                .per_group
                .iter()
                .find(|m| m.group == g)
                .ok_or_else(|| Error::Internal(format!("group {g} missing from per_group")))
        };
        let top = metric(hi)?;
        let bottom = metric(lo)?;
        let adoption_diff = match (top.adoption, bottom.adoption) {
            (Some(a), Some(b)) => Some(a - b),
            _ => None,
        };
        rows.push(KeyFactorRow {
            treatment: treatment.clone(),
            delta_t,
            cov_diff: top.coverage - bottom.coverage,
            adoption_diff,
            size_diff: top.avg_size - bottom.avg_size,
            singleton_diff: top.singleton_freq - bottom.singleton_freq,
        });
    }
    let delta_col: Vec<f64> = rows.iter().map(|r| r.delta_t).collect();
    let col = |f: fn(&KeyFactorRow) -> f64| -> Vec<f64> { rows.iter().map(f).collect() };
    let adoption_col: Option<Vec<f64>> = rows
        .iter()
        .map(|r| r.adoption_diff)
        .collect::<Option<Vec<f64>>>();
    Ok(KeyFactorTable {
        spearman_cov: spearman(&col(|r| r.cov_diff), &delta_col),
        spearman_adoption: adoption_col.as_deref().and_then(|c| spearman(c, &delta_col)),
        spearman_size: spearman(&col(|r| r.size_diff), &delta_col),
        spearman_singleton: spearman(&col(|r| r.singleton_diff), &delta_col),
        rows,
    })
}

/// Render a report as a fixed-width table for terminal output.
pub fn format_report(report: &FairnessReport) -> String {
    let mut out = String::new();
    out.push_str("group        n  coverage  avg_size  singleton");
    let has_human = report.per_group.iter().any(|g| g.accuracy.is_some());
    if has_human {
        out.push_str("  accuracy  adoption");
    }
    out.push('\n');
    for g in &report.per_group {
        out.push_str(&format!(
            "{:>5} {:>8}  {:>8.4}  {:>8.4}  {:>9.4}",
            g.group, g.n, g.coverage, g.avg_size, g.singleton_freq
        ));
        if has_human {
            match (g.accuracy, g.adoption) {
                (Some(acc), Some(ad)) => out.push_str(&format!("  {acc:>8.4}  {ad:>8.4}")),
                (Some(acc), None) => out.push_str(&format!("  {acc:>8.4}         -")),
                _ => out.push_str("         -         -"),
            }
        }
        out.push('\n');
    }
    out.push_str(&format!(
        "delta_cov={:.4} delta_size={:.4} delta_singleton={:.4}",
        report.delta_cov, report.delta_size, report.delta_singleton
    ));
    if let Some(dt) = report.delta_accuracy_improvement {
        out.push_str(&format!(
            " delta_t={:.4} pair=({}, {})",
            dt, report.extremal_pair.0, report.extremal_pair.1
        ));
    }
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::humansim::Treatment;

    fn set(group: usize, size: usize, covered: bool) -> PredictionSet {
        let members: Vec<usize> = (0..size).collect();
        PredictionSet {
            example_id: format!("g{group}s{size}c{covered}"),
            size,
            covered,
            label: if covered { 0 } else { usize::MAX - 1 },
            group,
            members,
        }
    }

    fn response(group: usize, correct: bool, treatment: Treatment) -> TrialResponse {
        TrialResponse {
            participant_id: 0,
            trial_id: "t".into(),
            treatment,
            group,
            diff: 1,
            correct,
            chosen_in_set: match treatment {
                Treatment::Control => None,
                _ => Some(true),
            },
        }
    }

    #[test]
    fn identical_groups_have_zero_deltas() {
        let mut sets = Vec::new();
        for g in 0..2 {
            sets.push(set(g, 1, true));
            sets.push(set(g, 3, false));
        }
        let report = audit_sets(&sets, 2).unwrap();
        assert_eq!(report.delta_cov, 0.0);
        assert_eq!(report.delta_size, 0.0);
        assert_eq!(report.delta_singleton, 0.0);
    }

    #[test]
    fn coverage_delta_matches_hand_arithmetic() {
        // group 0: coverage 0.954, group 1: coverage 0.840 -> delta 0.114
        let mut sets = Vec::new();
        for i in 0..500 {
            sets.push(set(0, 2, i < 477));
            sets.push(set(1, 2, i < 420));
        }
        let report = audit_sets(&sets, 2).unwrap();
        assert!((report.per_group[0].coverage - 0.954).abs() < 1e-12);
        assert!((report.per_group[1].coverage - 0.840).abs() < 1e-12);
        assert!((report.delta_cov - 0.114).abs() < 1e-12);
        assert_eq!(report.extremal_pair, (0, 1));
    }

    #[test]
    fn three_group_extremal_pair() {
        let mut sets = Vec::new();
        for (g, cov_count) in [(0usize, 95usize), (1, 90), (2, 80)] {
            for i in 0..100 {
                sets.push(set(g, 1, i < cov_count));
            }
        }
        let report = audit_sets(&sets, 3).unwrap();
        assert!((report.delta_cov - 0.15).abs() < 1e-12);
        assert_eq!(report.extremal_pair, (0, 2));
    }

    #[test]
    fn empty_group_is_an_error() {
        let sets = vec![set(0, 1, true)];
        let err = audit_sets(&sets, 2).unwrap_err();
        assert!(err.to_string().contains("group 1"), "{err}");
    }

    #[test]
    fn improvements_arithmetic() {
        let treated: Vec<TrialResponse> = (0..10)
            .map(|i| response(0, i < 8, Treatment::Marginal))
            .chain((0..10).map(|i| response(1, i < 7, Treatment::Marginal)))
            .collect();
        let control: Vec<TrialResponse> = (0..10)
            .map(|i| response(0, i < 7, Treatment::Control))
            .chain((0..50).map(|i| response(1, i < 33, Treatment::Control)))
            .collect();
        let delta = accuracy_improvements(&treated, &control, 2).unwrap();
        assert!((delta[&0] - 0.10).abs() < 1e-12);
        assert!((delta[&1] - 0.04).abs() < 1e-12);

        // identical arms -> zero improvements
        let zero = accuracy_improvements(&control, &control, 2).unwrap();
        assert!(zero.values().all(|d| *d == 0.0));

        // permutation invariance
        let mut shuffled = treated.clone();
        shuffled.reverse();
        assert_eq!(accuracy_improvements(&shuffled, &control, 2).unwrap(), delta);
    }

    #[test]
    fn missing_group_in_arm_errors() {
        let treated = vec![response(0, true, Treatment::Marginal)];
        let control = vec![
            response(0, true, Treatment::Control),
            response(1, false, Treatment::Control),
        ];
        let err = accuracy_improvements(&treated, &control, 2).unwrap_err();
        assert!(err.to_string().contains("treated"), "{err}");
    }

    #[test]
    fn disparate_impact_examples() {
        let delta: BTreeMap<usize, f64> = [(0, 0.10), (1, 0.04)].into();
        let (dt, pair) = disparate_impact(&delta).unwrap();
        assert!((dt - 0.06).abs() < 1e-12);
        assert_eq!(pair, (0, 1));

        let equal: BTreeMap<usize, f64> = [(0, 0.05), (1, 0.05), (2, 0.05)].into();
        assert_eq!(disparate_impact(&equal).unwrap().0, 0.0);

        let mixed: BTreeMap<usize, f64> = [(0, -0.02), (1, 0.05), (2, 0.01)].into();
        let (dt, pair) = disparate_impact(&mixed).unwrap();
        assert!((dt - 0.07).abs() < 1e-12);
        assert_eq!(pair, (1, 0));

        let single: BTreeMap<usize, f64> = [(0, 0.1)].into();
        assert!(disparate_impact(&single).is_err());
    }

    #[test]
    fn deltas_invariant_under_group_relabeling() {
        let mut sets = Vec::new();
        for i in 0..50 {
            sets.push(set(0, 1 + i % 3, i % 10 < 9));
            sets.push(set(1, 1 + i % 5, i % 10 < 7));
        }
        let report = audit_sets(&sets, 2).unwrap();
        let relabeled: Vec<PredictionSet> = sets
            .iter()
            .map(|s| PredictionSet {
                group: 1 - s.group,
                ..s.clone()
            })
            .collect();
        let report2 = audit_sets(&relabeled, 2).unwrap();
        assert_eq!(report.delta_cov, report2.delta_cov);
        assert_eq!(report.delta_size, report2.delta_size);
        assert_eq!(report.delta_singleton, report2.delta_singleton);
    }

    #[test]
    fn pooling_consistency() {
        // concatenating two response sets audits to the weighted mean accuracy
        let a: Vec<TrialResponse> = (0..20).map(|i| response(0, i < 10, Treatment::Control)).collect();
        let b: Vec<TrialResponse> = (0..10).map(|i| response(0, i < 9, Treatment::Control)).collect();
        let pooled: Vec<TrialResponse> = a.iter().chain(&b).cloned().collect();
        let acc = group_accuracy(&pooled, 1, "x").unwrap()[&0];
        let expected = (10.0 + 9.0) / 30.0;
        assert!((acc - expected).abs() < 1e-12);
    }

    #[test]
    fn key_factor_tie_breaks_to_lowest_group() {
        let sets: Vec<PredictionSet> = (0..2)
            .flat_map(|g| (0..10).map(move |i| set(g, 1 + g, i < 9)))
            .collect();
        let treated: Vec<TrialResponse> = (0..2)
            .flat_map(|g| (0..10).map(move |i| response(g, i < 8, Treatment::Marginal)))
            .collect();
        let control: Vec<TrialResponse> = (0..2)
            .flat_map(|g| (0..10).map(move |i| response(g, i < 6, Treatment::Control)))
            .collect();
        let report = audit_treatment(&sets, &treated, &control, 2).unwrap();
        assert_eq!(report.delta_accuracy_improvement, Some(0.0));
        assert_eq!(report.extremal_pair, (0, 0));
        let table = key_factor_table(&[("marginal".into(), report)]).unwrap();
        assert_eq!(table.rows[0].delta_t, 0.0);
        assert_eq!(table.rows[0].size_diff, 0.0);
    }

    #[test]
    fn two_point_rank_correlation_is_one() {
        let x = vec![0.2, 0.8];
        let y = vec![1.0, 3.0];
        assert_eq!(spearman(&x, &y), Some(1.0));
        let y_rev = vec![3.0, 1.0];
        assert_eq!(spearman(&x, &y_rev), Some(-1.0));
    }

    #[test]
    fn constant_column_has_no_correlation() {
        let x = vec![0.5, 0.5, 0.5];
        let y = vec![1.0, 2.0, 3.0];
        assert_eq!(spearman(&x, &y), None);
    }

    #[test]
    fn spearman_handles_ties_with_average_ranks() {
        let x = vec![1.0, 1.0, 2.0, 3.0];
        let y = vec![1.0, 2.0, 3.0, 4.0];
        let rho = spearman(&x, &y).unwrap();
        assert!(rho > 0.9 && rho < 1.0, "{rho}");
    }
}
