//! Synthetic biased classifiers and simulated set-assisted decision makers.
//!
//! The generator produces softmax records whose top-1 accuracy differs by
//! group: each record draws i.i.d. standard-normal logits, then the target
//! class (the true label with probability `group_accuracy[g]`, otherwise a
//! uniformly chosen wrong class) receives a boost of
//! `concentration * (0.75 + 0.5 * U)`. The boost dwarfs the noise, so the
//! argmax equals the target essentially always, while the boost's spread
//! produces a continuous range of model confidence for calibration.
//!
//! The simulated decision maker is deliberately minimal. On each trial the
//! participant either ignores the set (probability `1 - reliance`) and is
//! correct with their per-group skill `u_a`, or relies on it: when the set
//! of size `s` contains the truth they are correct with probability
//! `u_a + (1 - u_a) / s`, and when it does not they are wrong. The rule
//! produces a coverage benefit and a set-size penalty, nothing more.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audit::{
    audit_sets, audit_treatment, key_factor_table, FairnessReport, KeyFactorTable,
};
use crate::calibration::{calibrate_avgk, calibrate_marginal, calibrate_mondrian};
use crate::data::{split, LabeledDataset, ProbRecord, SplitSpec, StratifyBy};
use crate::error::{Error, Result};
use crate::scores::{ScoreConfig, ScoreKind};
use crate::setpred::{average_size, predict_batch, PredictOptions, PredictionSet};
use crate::stream::prf64_indexed;
use crate::tuning::tune_avgk;

/// Treatment arms, in dummy-coding order (control is the reference).
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum Treatment {
    Control,
    Avgk,
    Marginal,
    Conditional,
}

impl Treatment {
    pub const ALL: [Treatment; 4] = [
        Treatment::Control,
        Treatment::Avgk,
        Treatment::Marginal,
        Treatment::Conditional,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Treatment::Control => "control",
            Treatment::Avgk => "avgk",
            Treatment::Marginal => "marginal",
            Treatment::Conditional => "conditional",
        }
    }
}

impl std::fmt::Display for Treatment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Treatment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "control" => Ok(Treatment::Control),
            "avgk" => Ok(Treatment::Avgk),
            "marginal" => Ok(Treatment::Marginal),
            "conditional" => Ok(Treatment::Conditional),
            other => Err(Error::Parameter(format!("unknown treatment {other:?}"))),
        }
    }
}

/// Parameters of the synthetic classification task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub m: usize,
    pub n_groups: usize,
    pub group_weights: Vec<f64>,
    /// Top-1 accuracy per group, in (0, 1].
    pub group_accuracy: Vec<f64>,
    pub concentration: f64,
    pub n: usize,
    pub seed: u64,
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::Parameter("m must be >= 2".into()));
        }
        if self.n_groups == 0 {
            return Err(Error::Parameter("n_groups must be positive".into()));
        }
        if self.group_weights.len() != self.n_groups
            || self.group_accuracy.len() != self.n_groups
        {
            return Err(Error::Parameter(format!(
                "group_weights and group_accuracy must each have n_groups={} entries",
                self.n_groups
            )));
        }
        let wsum: f64 = self.group_weights.iter().sum();
        if (wsum - 1.0).abs() > 1e-9 || self.group_weights.iter().any(|w| *w < 0.0) {
            return Err(Error::Parameter("group_weights must lie on the simplex".into()));
        }
        if self
            .group_accuracy
            .iter()
            .any(|a| !(*a > 0.0 && *a <= 1.0))
        {
            return Err(Error::Parameter("group accuracies must be in (0, 1]".into()));
        }
        if !(self.concentration > 0.0) {
            return Err(Error::Parameter("concentration must be positive".into()));
        }
        if self.n == 0 {
            return Err(Error::Parameter("n must be positive".into()));
        }
        Ok(())
    }
}

/// Simulated decision maker: per-group skill and a reliance probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanModel {
    /// Unaided per-group accuracy, in (0, 1).
    pub skill: Vec<f64>,
    /// Probability of relying on the provided set, in [0, 1].
    pub reliance: f64,
    pub seed: u64,
}

impl HumanModel {
    pub fn validate(&self, n_groups: usize) -> Result<()> {
        if self.skill.len() != n_groups {
            return Err(Error::Parameter(format!(
                "human model has {} skills but the task has {} groups",
                self.skill.len(),
                n_groups
            )));
        }
        if self.skill.iter().any(|s| !(*s > 0.0 && *s < 1.0)) {
            return Err(Error::Parameter("skills must be in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.reliance) {
            return Err(Error::Parameter("reliance must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One simulated (or imported) human answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResponse {
    pub participant_id: u64,
    pub trial_id: String,
    pub treatment: Treatment,
    pub group: usize,
    /// Marginal-treatment set size of the trial, a difficulty proxy,
    /// recorded regardless of the arm shown.
    pub diff: usize,
    pub correct: bool,
    /// Whether the answer was picked from inside the provided set; absent
    /// for the control arm.
    pub chosen_in_set: Option<bool>,
}

/// Generate a synthetic dataset with per-group top-1 accuracy close to
/// `spec.group_accuracy`. Deterministic given `spec.seed`.
pub fn generate_task(spec: &SyntheticTaskSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut cumulative = Vec::with_capacity(spec.n_groups);
    let mut acc = 0.0;
    for w in &spec.group_weights {
        acc += w;
        cumulative.push(acc);
    }
    let mut records = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let gdraw: f64 = rng.gen();
        let group = cumulative
            .iter()
            .position(|c| gdraw < *c)
            .unwrap_or(spec.n_groups - 1);
        let label = rng.gen_range(0..spec.m);
        let on_target = rng.gen_bool(spec.group_accuracy[group]);
        let center = if on_target {
            label
        } else {
            // uniform over the wrong classes
            let offset = rng.gen_range(1..spec.m);
            (label + offset) % spec.m
        };
        let mut logits: Vec<f64> = (0..spec.m)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let boost_scale: f64 = rng.gen();
        logits[center] += spec.concentration * (0.75 + 0.5 * boost_scale);
        let max_logit = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - max_logit).exp()).collect();
        let sum: f64 = exps.iter().sum();
        records.push(ProbRecord {
            example_id: format!("syn-{i:06}"),
            probs: exps.iter().map(|e| e / sum).collect(),
            label,
            group,
        });
    }
    LabeledDataset::with_shape(records, spec.m, spec.n_groups)
}

/// Simulate set-assisted responses.
///
/// Participants are assigned round-robin over the treatments present in
/// `sets_by_treatment` (which must include the control arm with an empty
/// stream, and the marginal arm, whose set sizes define `diff`). Each
/// participant sees `trials_per_participant` records sampled by one of 10
/// fixed trial seeds, so the same records recur across treatments.
pub fn simulate_responses(
    sets_by_treatment: &BTreeMap<Treatment, Vec<PredictionSet>>,
    ds: &LabeledDataset,
    hm: &HumanModel,
    participants: usize,
    trials_per_participant: usize,
) -> Result<Vec<TrialResponse>> {
    hm.validate(ds.num_groups())?;
    if !sets_by_treatment.contains_key(&Treatment::Control) {
        return Err(Error::Simulation(
            "control treatment missing from sets_by_treatment".into(),
        ));
    }
    if !sets_by_treatment.contains_key(&Treatment::Marginal) {
        return Err(Error::Simulation(
            "marginal treatment missing (its set sizes define the diff covariate)".into(),
        ));
    }
    if trials_per_participant == 0 || trials_per_participant > ds.len() {
        return Err(Error::Parameter(format!(
            "trials_per_participant must be in 1..={}, got {trials_per_participant}",
            ds.len()
        )));
    }

    let lookup: BTreeMap<Treatment, BTreeMap<&str, &PredictionSet>> = sets_by_treatment
        .iter()
        .map(|(t, sets)| {
            (
                *t,
                sets.iter()
                    .map(|s| (s.example_id.as_str(), s))
                    .collect::<BTreeMap<_, _>>(),
            )
        })
        .collect();
    let marginal_sets = &lookup[&Treatment::Marginal];
    let treatments: Vec<Treatment> = sets_by_treatment.keys().copied().collect();

    // 10 fixed trial samples shared across treatments (variance reduction)
    let trial_sets: Vec<Vec<usize>> = (0..10)
        .map(|j| {
            let mut rng = ChaCha8Rng::seed_from_u64(prf64_indexed(hm.seed, "trials", j));
            let mut indices: Vec<usize> = (0..ds.len()).collect();
            indices.shuffle(&mut rng);
            indices.truncate(trials_per_participant);
            indices
        })
        .collect();

    let mut responses = Vec::with_capacity(participants * trials_per_participant);
    for p in 0..participants as u64 {
        let treatment = treatments[(p as usize) % treatments.len()];
        let trial_set = &trial_sets[(p as usize / treatments.len()) % 10];
        let mut rng = ChaCha8Rng::seed_from_u64(prf64_indexed(hm.seed, "participant", p));
        for &idx in trial_set {
            let rec = &ds.records()[idx];
            let skill = hm.skill[rec.group];
            let diff_set = marginal_sets.get(rec.example_id.as_str()).ok_or_else(|| {
                Error::Simulation(format!(
                    "no marginal set for shown record {}",
                    rec.example_id
                ))
            })?;
            if diff_set.size == 0 {
                return Err(Error::Simulation(format!(
                    "marginal set for {} is empty; diff requires size >= 1",
                    rec.example_id
                )));
            }
            let (correct, chosen_in_set) = if treatment == Treatment::Control {
                (rng.gen_bool(skill), None)
            } else {
                let set = lookup[&treatment].get(rec.example_id.as_str()).ok_or_else(|| {
                    Error::Simulation(format!(
                        "no {treatment} set for shown record {}",
                        rec.example_id
                    ))
                })?;
                let relies = rng.gen_bool(hm.reliance);
                if !relies {
                    (rng.gen_bool(skill), Some(false))
                } else if set.covered {
                    let p_correct = skill + (1.0 - skill) / set.size as f64;
                    (rng.gen_bool(p_correct.min(1.0)), Some(true))
                } else {
                    (false, Some(true))
                }
            };
            responses.push(TrialResponse {
                participant_id: p,
                trial_id: rec.example_id.clone(),
                treatment,
                group: rec.group,
                diff: diff_set.size,
                correct,
                chosen_in_set,
            });
        }
    }
    Ok(responses)
}

/// Write responses as CSV:
/// `participant_id,trial_id,treatment,group,diff,correct,chosen_in_set`.
pub fn write_responses_csv(
    responses: &[TrialResponse],
    path: impl AsRef<Path>,
    provenance: Option<(&str, u64)>,
) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    if let Some((hash, seed)) = provenance {
        writeln!(w, "# config_hash={hash} seed={seed}")?;
    }
    writeln!(w, "participant_id,trial_id,treatment,group,diff,correct,chosen_in_set")?;
    for r in responses {
        let chosen = match r.chosen_in_set {
            Some(c) => c.to_string(),
            None => String::new(),
        };
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.participant_id, r.trial_id, r.treatment, r.group, r.diff, r.correct, chosen
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Read a responses CSV written by [`write_responses_csv`].
pub fn read_responses_csv(path: impl AsRef<Path>) -> Result<Vec<TrialResponse>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .from_path(path)?;
    let expected = [
        "participant_id",
        "trial_id",
        "treatment",
        "group",
        "diff",
        "correct",
        "chosen_in_set",
    ];
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols != expected {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header {expected:?}, found {cols:?}"),
        });
    }
    let mut out = Vec::new();
    for result in reader.records() {
        let row = result.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        let field_err = |name: &str, raw: &str| Error::Parse {
            line,
            msg: format!("field {name}: cannot parse {raw:?}"),
        };
        let chosen_in_set = if row[6].is_empty() {
            None
        } else {
            Some(row[6].parse().map_err(|_| field_err("chosen_in_set", &row[6]))?)
        };
        out.push(TrialResponse {
            participant_id: row[0].parse().map_err(|_| field_err("participant_id", &row[0]))?,
            trial_id: row[1].to_string(),
            treatment: row[2].parse()?,
            group: row[3].parse().map_err(|_| field_err("group", &row[3]))?,
            diff: row[4].parse().map_err(|_| field_err("diff", &row[4]))?,
            correct: row[5].parse().map_err(|_| field_err("correct", &row[5]))?,
            chosen_in_set,
        });
    }
    Ok(out)
}

/// Knobs of the mechanism benchmark that are not part of the task or the
/// human model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    /// Participants per treatment arm.
    pub participants_per_treatment: usize,
    pub trials_per_participant: usize,
    pub min_group_n: usize,
    /// `(calval, cal, test)` fractions of the synthetic task.
    pub fractions: [f64; 3],
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            participants_per_treatment: 200,
            trials_per_participant: 50,
            min_group_n: 30,
            fractions: [0.2, 0.4, 0.4],
        }
    }
}

/// Set-level and outcome metrics for one method in the benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub coverage: f64,
    pub avg_size: f64,
    pub delta_cov: f64,
    pub delta_size: f64,
    pub delta_singleton: f64,
    pub delta_t: f64,
}

/// The mechanism assertions, surfaced as flags rather than panics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MechanismFlags {
    /// `delta_cov(mondrian) <= 0.02`
    pub mondrian_equalizes_coverage: bool,
    /// `delta_cov(marginal) > delta_cov(mondrian)`
    pub marginal_coverage_gap_larger: bool,
    /// `delta_size(mondrian) > delta_size(marginal)`
    pub mondrian_size_gap_larger: bool,
    /// `delta_t(mondrian) > delta_t(marginal)`
    pub mondrian_impact_larger: bool,
}

/// Output of [`run_mechanism_benchmark`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismReport {
    pub alpha: f64,
    pub avgk_k: f64,
    pub methods: BTreeMap<String, MethodOutcome>,
    pub flags: MechanismFlags,
    pub key_factors: KeyFactorTable,
}

/// Build marginal, Mondrian, and avg-k predictors on a synthetic task,
/// audit their sets, simulate set-assisted humans, and report the
/// coverage/size/impact tradeoff.
pub fn run_mechanism_benchmark(
    task: &SyntheticTaskSpec,
    hm: &HumanModel,
    alpha: f64,
) -> Result<MechanismReport> {
    run_mechanism_benchmark_with(task, hm, alpha, &BenchOptions::default())
}

pub fn run_mechanism_benchmark_with(
    task: &SyntheticTaskSpec,
    hm: &HumanModel,
    alpha: f64,
    opts: &BenchOptions,
) -> Result<MechanismReport> {
    if task.n_groups < 2 {
        return Err(Error::Parameter(
            "mechanism benchmark needs >= 2 groups".into(),
        ));
    }
    let ds = generate_task(task)?;
    let split_spec = SplitSpec::new(opts.fractions, StratifyBy::Group, task.seed)?;
    let (calval, cal, test) = split(&ds, &split_spec)?;

    let score_cfg = ScoreConfig::deterministic(ScoreKind::Lac);
    let marginal = calibrate_marginal(&cal, &score_cfg, alpha, task.seed)?;
    let mondrian = calibrate_mondrian(&cal, &score_cfg, alpha, opts.min_group_n, task.seed)?;
    let avgk_k = tune_avgk(&cal, &calval, 1.0 - alpha)?;
    let avgk = calibrate_avgk(&cal, avgk_k, task.seed)?;

    let predict_opts = PredictOptions::default();
    let mut sets_by_treatment: BTreeMap<Treatment, Vec<PredictionSet>> = BTreeMap::new();
    sets_by_treatment.insert(Treatment::Control, Vec::new());
    sets_by_treatment.insert(Treatment::Marginal, predict_batch(&test, &marginal, &predict_opts)?);
    sets_by_treatment.insert(Treatment::Conditional, predict_batch(&test, &mondrian, &predict_opts)?);
    sets_by_treatment.insert(Treatment::Avgk, predict_batch(&test, &avgk, &predict_opts)?);

    let participants = opts.participants_per_treatment * sets_by_treatment.len();
    let responses =
        simulate_responses(&sets_by_treatment, &test, hm, participants, opts.trials_per_participant)?;
    let by_arm = |t: Treatment| -> Vec<TrialResponse> {
        responses.iter().filter(|r| r.treatment == t).cloned().collect()
    };
    let control = by_arm(Treatment::Control);

    let mut methods = BTreeMap::new();
    let mut tagged_reports: Vec<(String, FairnessReport)> = Vec::new();
    for treatment in [Treatment::Avgk, Treatment::Marginal, Treatment::Conditional] {
        let sets = &sets_by_treatment[&treatment];
        let set_report = audit_sets(sets, test.num_groups())?;
        let full = audit_treatment(sets, &by_arm(treatment), &control, test.num_groups())?;
        let labels: Vec<usize> = sets.iter().map(|s| s.label).collect();
        let coverage = crate::calibration::empirical_coverage(sets, &labels)?;
        methods.insert(
            treatment.name().to_string(),
            MethodOutcome {
                coverage,
                avg_size: average_size(sets),
                delta_cov: set_report.delta_cov,
                delta_size: set_report.delta_size,
                delta_singleton: set_report.delta_singleton,
                delta_t: full.delta_accuracy_improvement.unwrap_or(f64::NAN),
            },
        );
        tagged_reports.push((treatment.name().to_string(), full));
    }
    let key_factors = key_factor_table(&tagged_reports)?;

    let marg = &methods["marginal"];
    let cond = &methods["conditional"];
    let flags = MechanismFlags {
        mondrian_equalizes_coverage: cond.delta_cov <= 0.02,
        marginal_coverage_gap_larger: marg.delta_cov > cond.delta_cov,
        mondrian_size_gap_larger: cond.delta_size > marg.delta_size,
        mondrian_impact_larger: cond.delta_t > marg.delta_t,
    };
    Ok(MechanismReport {
        alpha,
        avgk_k,
        methods,
        flags,
        key_factors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_spec(n: usize, seed: u64) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            m: 10,
            n_groups: 2,
            group_weights: vec![0.5, 0.5],
            group_accuracy: vec![0.85, 0.55],
            concentration: 8.0,
            n,
            seed,
        }
    }

    fn top1_accuracy(ds: &LabeledDataset, group: usize) -> f64 {
        let (mut hits, mut n) = (0usize, 0usize);
        for rec in ds.records() {
            if rec.group != group {
                continue;
            }
            let argmax = rec
                .probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            n += 1;
            if argmax == rec.label {
                hits += 1;
            }
        }
        hits as f64 / n as f64
    }

    #[test]
    fn perfect_accuracy_with_high_concentration() {
        let spec = SyntheticTaskSpec {
            group_accuracy: vec![1.0, 1.0],
            concentration: 12.0,
            n: 4000,
            ..base_spec(4000, 3)
        };
        let ds = generate_task(&spec).unwrap();
        let overall = (top1_accuracy(&ds, 0) + top1_accuracy(&ds, 1)) / 2.0;
        assert!(overall >= 0.99, "top-1 accuracy {overall}");
    }

    #[test]
    fn generator_hits_per_group_accuracy() {
        let ds = generate_task(&base_spec(20000, 42)).unwrap();
        let easy = top1_accuracy(&ds, 0);
        let hard = top1_accuracy(&ds, 1);
        assert!((easy - 0.85).abs() <= 0.02, "easy group top-1 {easy}");
        assert!((hard - 0.55).abs() <= 0.02, "hard group top-1 {hard}");
    }

    #[test]
    fn generator_is_deterministic() {
        let a = generate_task(&base_spec(500, 9)).unwrap();
        let b = generate_task(&base_spec(500, 9)).unwrap();
        assert_eq!(a, b);
    }

    fn singleton_sets(ds: &LabeledDataset, covered: bool) -> Vec<PredictionSet> {
        ds.records()
            .iter()
            .map(|r| {
                let member = if covered { r.label } else { (r.label + 1) % 10 };
                PredictionSet {
                    example_id: r.example_id.clone(),
                    members: vec![member],
                    size: 1,
                    covered,
                    label: r.label,
                    group: r.group,
                }
            })
            .collect()
    }

    fn full_sets(ds: &LabeledDataset) -> Vec<PredictionSet> {
        ds.records()
            .iter()
            .map(|r| PredictionSet {
                example_id: r.example_id.clone(),
                members: (0..10).collect(),
                size: 10,
                covered: true,
                label: r.label,
                group: r.group,
            })
            .collect()
    }

    fn arm(responses: &[TrialResponse], t: Treatment) -> Vec<TrialResponse> {
        responses.iter().filter(|r| r.treatment == t).cloned().collect()
    }

    fn mean_correct(responses: &[TrialResponse]) -> f64 {
        responses.iter().filter(|r| r.correct).count() as f64 / responses.len() as f64
    }

    #[test]
    fn zero_reliance_matches_control_in_expectation() {
        let ds = generate_task(&base_spec(2000, 1)).unwrap();
        let hm = HumanModel {
            skill: vec![0.65, 0.55],
            reliance: 0.0,
            seed: 5,
        };
        let mut sets = BTreeMap::new();
        sets.insert(Treatment::Control, Vec::new());
        sets.insert(Treatment::Marginal, singleton_sets(&ds, false));
        let responses = simulate_responses(&sets, &ds, &hm, 400, 50).unwrap();
        let control = mean_correct(&arm(&responses, Treatment::Control));
        let treated = mean_correct(&arm(&responses, Treatment::Marginal));
        // both arms draw Bernoulli(skill); 3 SE of n = 10000 responses
        assert!((control - treated).abs() < 0.03, "{control} vs {treated}");
    }

    #[test]
    fn full_reliance_on_true_singletons_is_perfect() {
        let ds = generate_task(&base_spec(500, 2)).unwrap();
        let hm = HumanModel {
            skill: vec![0.6, 0.5],
            reliance: 1.0,
            seed: 5,
        };
        let mut sets = BTreeMap::new();
        sets.insert(Treatment::Control, Vec::new());
        sets.insert(Treatment::Marginal, singleton_sets(&ds, true));
        let responses = simulate_responses(&sets, &ds, &hm, 40, 50).unwrap();
        let treated = arm(&responses, Treatment::Marginal);
        assert!(treated.iter().all(|r| r.correct));
        assert!(treated.iter().all(|r| r.chosen_in_set == Some(true)));
    }

    #[test]
    fn full_reliance_on_full_sets_matches_closed_form() {
        let ds = generate_task(&base_spec(2000, 3)).unwrap();
        let hm = HumanModel {
            skill: vec![0.65, 0.55],
            reliance: 1.0,
            seed: 11,
        };
        let mut sets = BTreeMap::new();
        sets.insert(Treatment::Control, Vec::new());
        sets.insert(Treatment::Marginal, full_sets(&ds));
        let responses = simulate_responses(&sets, &ds, &hm, 400, 50).unwrap();
        for g in 0..2 {
            let treated: Vec<TrialResponse> = arm(&responses, Treatment::Marginal)
                .into_iter()
                .filter(|r| r.group == g)
                .collect();
            let expected = hm.skill[g] + (1.0 - hm.skill[g]) / 10.0;
            let got = mean_correct(&treated);
            let se = (expected * (1.0 - expected) / treated.len() as f64).sqrt();
            assert!(
                (got - expected).abs() < 3.0 * se + 1e-9,
                "group {g}: {got} vs {expected} (se {se})"
            );
        }
    }

    #[test]
    fn responses_reproducible_and_diff_uses_marginal_size() {
        let ds = generate_task(&base_spec(300, 4)).unwrap();
        let hm = HumanModel {
            skill: vec![0.7, 0.6],
            reliance: 0.5,
            seed: 21,
        };
        let mut sets = BTreeMap::new();
        sets.insert(Treatment::Control, Vec::new());
        sets.insert(Treatment::Marginal, full_sets(&ds));
        sets.insert(Treatment::Avgk, singleton_sets(&ds, true));
        let a = simulate_responses(&sets, &ds, &hm, 60, 20).unwrap();
        let b = simulate_responses(&sets, &ds, &hm, 60, 20).unwrap();
        assert_eq!(a, b);
        // diff comes from the marginal arm (size 10) in every arm
        assert!(a.iter().all(|r| r.diff == 10));
        // control carries no chosen_in_set
        assert!(a
            .iter()
            .all(|r| (r.treatment == Treatment::Control) == r.chosen_in_set.is_none()));
    }

    #[test]
    fn missing_set_is_an_error() {
        let ds = generate_task(&base_spec(50, 6)).unwrap();
        let hm = HumanModel {
            skill: vec![0.7, 0.6],
            reliance: 0.5,
            seed: 1,
        };
        let mut sets = BTreeMap::new();
        sets.insert(Treatment::Control, Vec::new());
        let mut marginal = full_sets(&ds);
        marginal.pop();
        sets.insert(Treatment::Marginal, marginal);
        let err = simulate_responses(&sets, &ds, &hm, 8, 50).unwrap_err();
        assert!(err.to_string().contains("no marginal set"), "{err}");
    }

    #[test]
    fn shared_trial_seeds_reuse_records_across_treatments() {
        let ds = generate_task(&base_spec(400, 8)).unwrap();
        let hm = HumanModel {
            skill: vec![0.7, 0.6],
            reliance: 0.5,
            seed: 13,
        };
        let mut sets = BTreeMap::new();
        sets.insert(Treatment::Control, Vec::new());
        sets.insert(Treatment::Marginal, full_sets(&ds));
        let responses = simulate_responses(&sets, &ds, &hm, 4, 10).unwrap();
        // participants 0 (control) and 1 (marginal) share trial seed 0
        let p0: Vec<&str> = responses
            .iter()
            .filter(|r| r.participant_id == 0)
            .map(|r| r.trial_id.as_str())
            .collect();
        let p1: Vec<&str> = responses
            .iter()
            .filter(|r| r.participant_id == 1)
            .map(|r| r.trial_id.as_str())
            .collect();
        assert_eq!(p0, p1);
    }

    #[test]
    fn responses_csv_round_trip() {
        let responses = vec![
            TrialResponse {
                participant_id: 0,
                trial_id: "syn-000001".into(),
                treatment: Treatment::Control,
                group: 1,
                diff: 3,
                correct: true,
                chosen_in_set: None,
            },
            TrialResponse {
                participant_id: 1,
                trial_id: "syn-000002".into(),
                treatment: Treatment::Conditional,
                group: 0,
                diff: 1,
                correct: false,
                chosen_in_set: Some(true),
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("responses.csv");
        write_responses_csv(&responses, &path, Some(("ff00", 3))).unwrap();
        let back = read_responses_csv(&path).unwrap();
        assert_eq!(back, responses);
    }

    #[test]
    fn unbiased_task_shows_no_disparity() {
        let spec = SyntheticTaskSpec {
            group_accuracy: vec![0.7, 0.7],
            n: 12000,
            ..base_spec(12000, 17)
        };
        let hm = HumanModel {
            skill: vec![0.6, 0.6],
            reliance: 0.8,
            seed: 17,
        };
        let opts = BenchOptions {
            participants_per_treatment: 100,
            ..BenchOptions::default()
        };
        let report = run_mechanism_benchmark_with(&spec, &hm, 0.1, &opts).unwrap();
        for (name, method) in &report.methods {
            assert!(method.delta_cov < 0.05, "{name} delta_cov {}", method.delta_cov);
            assert!(method.delta_size < 0.5, "{name} delta_size {}", method.delta_size);
            assert!(method.delta_t.abs() < 0.06, "{name} delta_t {}", method.delta_t);
        }
    }

    #[test]
    fn biased_task_flags_the_mechanism() {
        let spec = base_spec(20000, 5);
        let hm = HumanModel {
            skill: vec![0.65, 0.55],
            reliance: 0.8,
            seed: 5,
        };
        let report = run_mechanism_benchmark(&spec, &hm, 0.1).unwrap();
        assert!(report.flags.mondrian_equalizes_coverage, "{:?}", report.methods);
        assert!(report.flags.marginal_coverage_gap_larger, "{:?}", report.methods);
        assert!(report.flags.mondrian_size_gap_larger, "{:?}", report.methods);
        assert!(report.flags.mondrian_impact_larger, "{:?}", report.methods);
    }
}
