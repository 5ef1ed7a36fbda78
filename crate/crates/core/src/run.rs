//! CLI command implementations.
//!
//! Every command resolves its inputs from the effective [`RunConfig`], runs
//! inside a rayon pool sized by `jobs`, and embeds the config hash and seed
//! in each output file: JSON reports carry top-level `config_hash`/`seed`
//! fields, CSV files a leading `# config_hash=... seed=...` comment.
//! Identical configs and inputs produce byte-identical outputs for any
//! `jobs` value.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::audit::{audit_sets, format_report};
use crate::calibration::{
    calibrate_avgk, calibrate_marginal, calibrate_mondrian, empirical_coverage, SetPredictor,
};
use crate::config::{Method, RunConfig};
use crate::data::{load_dataset, load_names, split, LabeledDataset, SplitSpec};
use crate::error::{Error, Result};
use crate::humansim::{
    generate_task, run_mechanism_benchmark_with, simulate_responses, write_responses_csv,
    read_responses_csv, BenchOptions, Treatment,
};
use crate::inference::{analyze_responses, DesignSpec};
use crate::setpred::{average_size, predict_batch, read_sets_csv, write_sets_csv, PredictionSet};
use crate::tuning::{tune_avgk, tune_score, TuneMethod};

/// JSON report envelope: provenance plus the payload.
#[derive(Debug, Serialize)]
pub struct Report<T: Serialize> {
    pub config_hash: String,
    pub seed: u64,
    pub kind: &'static str,
    pub data: T,
}

fn write_report<T: Serialize>(config: &RunConfig, kind: &'static str, data: T, path: &Path) -> Result<()> {
    let report = Report {
        config_hash: config.hash(),
        seed: config.seed,
        kind,
        data,
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Internal(format!("report serialization failed: {e}")))?;
    std::fs::write(path, json + "\n")?;
    Ok(())
}

/// Run `f` on a rayon pool bounded by `config.jobs` (0 = one per core).
pub fn with_jobs<T>(config: &RunConfig, f: impl FnOnce() -> Result<T> + Send) -> Result<T>
where
    T: Send,
{
    let mut builder = rayon::ThreadPoolBuilder::new();
    if config.jobs > 0 {
        builder = builder.num_threads(config.jobs);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Internal(format!("thread pool: {e}")))?;
    pool.install(f)
}

/// The three splits a command may need; any of them may be absent.
pub struct ResolvedData {
    pub calval: Option<LabeledDataset>,
    pub cal: Option<LabeledDataset>,
    pub test: Option<LabeledDataset>,
}

/// Load file-backed splits or generate-and-split the synthetic task.
pub fn resolve_data(config: &RunConfig) -> Result<ResolvedData> {
    if let Some(ref synthetic) = config.synthetic {
        let ds = generate_task(&synthetic.to_spec(config.seed))?;
        let spec = SplitSpec::new(config.split.fractions, config.split.stratify, config.seed)?;
        let (calval, cal, test) = split(&ds, &spec)?;
        return Ok(ResolvedData {
            calval: Some(calval),
            cal: Some(cal),
            test: Some(test),
        });
    }
    let paths = config
        .data
        .as_ref()
        .ok_or_else(|| Error::Config("no [data] or [synthetic] section".into()))?;
    let names = match &paths.names {
        Some(p) => Some(load_names(p)?),
        None => None,
    };
    let load = |path: &Option<PathBuf>| -> Result<Option<LabeledDataset>> {
        match path {
            Some(p) => {
                let ds = load_dataset(p, paths.format)?;
                let ds = match &names {
                    Some((classes, groups)) => ds.with_names(classes.clone(), groups.clone())?,
                    None => ds,
                };
                Ok(Some(ds))
            }
            None => Ok(None),
        }
    };
    Ok(ResolvedData {
        calval: load(&paths.calval)?,
        cal: load(&paths.cal)?,
        test: load(&paths.test)?,
    })
}

fn require<'a>(ds: &'a Option<LabeledDataset>, name: &str) -> Result<&'a LabeledDataset> {
    ds.as_ref()
        .ok_or_else(|| Error::Config(format!("{name} dataset required but not configured")))
}

fn out_path(config: &RunConfig, out: Option<&Path>, default_name: &str) -> Result<PathBuf> {
    let path = match out {
        Some(p) => p.to_path_buf(),
        None => config.output_dir.join(default_name),
    };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    Ok(path)
}

fn build_predictor(config: &RunConfig, cal: &LabeledDataset) -> Result<SetPredictor> {
    let score_cfg = config.score.to_score_config();
    match config.method {
        Method::Marginal => calibrate_marginal(cal, &score_cfg, config.alpha, config.seed),
        Method::Mondrian => calibrate_mondrian(
            cal,
            &score_cfg,
            config.alpha,
            config.mondrian.min_group_n,
            config.seed,
        ),
        Method::Avgk => {
            let k = config.avgk.k.ok_or_else(|| {
                Error::Config("method avgk needs [avgk].k; run `tune` to find it".into())
            })?;
            calibrate_avgk(cal, k, config.seed)
        }
    }
}

fn describe_thresholds(pred: &SetPredictor) -> String {
    match pred {
        SetPredictor::Marginal(p) => format!("q_hat: {}", p.q_hat),
        SetPredictor::Mondrian(p) => {
            let per_group: Vec<String> = p
                .q_hat_by_group
                .iter()
                .enumerate()
                .map(|(g, q)| format!("{g}:{q}"))
                .collect();
            format!("q_hat_by_group: {{{}}}", per_group.join(", "))
        }
        SetPredictor::Avgk(p) => format!("k: {} q_k: {}", p.k, p.q_k),
    }
}

/// `calibrate`: write the predictor artifact; print `n_cal`, the
/// threshold(s), and calval coverage when a calval split is available.
pub fn cmd_calibrate(config: &RunConfig, out: Option<&Path>) -> Result<PathBuf> {
    with_jobs(config, || {
        let data = resolve_data(config)?;
        let cal = require(&data.cal, "cal")?;
        let predictor = build_predictor(config, cal)?;
        let path = out_path(config, out, "predictor.json")?;
        write_report(config, "predictor", &predictor, &path)?;
        println!("n_cal: {}", predictor.n_cal());
        println!("{}", describe_thresholds(&predictor));
        if let Some(ref calval) = data.calval {
            if !calval.is_empty() {
                let sets = predict_batch(calval, &predictor, &config.predict.to_options())?;
                let labels: Vec<usize> = calval.records().iter().map(|r| r.label).collect();
                println!("calval_coverage: {}", empirical_coverage(&sets, &labels)?);
            }
        }
        Ok(path)
    })
}

/// Accept either a bare predictor JSON or the report envelope.
pub fn load_predictor_artifact(path: &Path) -> Result<SetPredictor> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        msg: format!("predictor artifact: {e}"),
    })?;
    let payload = match value.get("data") {
        Some(inner) if value.get("kind").and_then(|k| k.as_str()) == Some("predictor") => inner,
        _ => &value,
    };
    serde_json::from_value(payload.clone()).map_err(|e| Error::Parse {
        line: 0,
        msg: format!("predictor artifact: {e}"),
    })
}

/// `predict`: write the sets CSV; print coverage and average size.
pub fn cmd_predict(
    config: &RunConfig,
    predictor_path: &Path,
    data_path: Option<&Path>,
    out: Option<&Path>,
) -> Result<PathBuf> {
    with_jobs(config, || {
        let predictor = load_predictor_artifact(predictor_path)?;
        let ds = match data_path {
            Some(p) => {
                let format = config.data.as_ref().map(|d| d.format).unwrap_or_default();
                load_dataset(p, format)?
            }
            None => {
                let data = resolve_data(config)?;
                data.test
                    .ok_or_else(|| Error::Config("test dataset required but not configured".into()))?
            }
        };
        if !ds.is_empty() && ds.num_classes() != predictor.num_classes() {
            return Err(Error::Config(format!(
                "predictor expects m={}, dataset has m={}",
                predictor.num_classes(),
                ds.num_classes()
            )));
        }
        let sets = predict_batch(&ds, &predictor, &config.predict.to_options())?;
        let path = out_path(config, out, "sets.csv")?;
        write_sets_csv(&sets, &path, Some((&config.hash(), config.seed)))?;
        if sets.is_empty() {
            println!("coverage: n/a (empty dataset)");
            println!("avg_size: n/a (empty dataset)");
        } else {
            let labels: Vec<usize> = ds.records().iter().map(|r| r.label).collect();
            println!("coverage: {}", empirical_coverage(&sets, &labels)?);
            println!("avg_size: {}", average_size(&sets));
        }
        Ok(path)
    })
}

#[derive(Debug, Serialize)]
struct AvgkTuneOutcome {
    k: f64,
    calval_coverage: f64,
    target_coverage: f64,
}

/// `tune`: random-search score hyperparameters (marginal/mondrian) or
/// binary-search `k` (avgk); write the tuning report.
pub fn cmd_tune(config: &RunConfig, out: Option<&Path>) -> Result<PathBuf> {
    with_jobs(config, || {
        let data = resolve_data(config)?;
        let cal = require(&data.cal, "cal")?;
        let calval = require(&data.calval, "calval")?;
        let path = out_path(config, out, "tuning_report.json")?;
        match config.method {
            Method::Avgk => {
                let k = tune_avgk(cal, calval, config.tune.target_coverage)?;
                let predictor = calibrate_avgk(cal, k, config.seed)?;
                let sets = predict_batch(calval, &predictor, &crate::setpred::PredictOptions::raw())?;
                let labels: Vec<usize> = calval.records().iter().map(|r| r.label).collect();
                let coverage = empirical_coverage(&sets, &labels)?;
                write_report(
                    config,
                    "tuning-avgk",
                    AvgkTuneOutcome {
                        k,
                        calval_coverage: coverage,
                        target_coverage: config.tune.target_coverage,
                    },
                    &path,
                )?;
                println!("k: {k}");
                println!("calval_coverage: {coverage}");
            }
            Method::Marginal | Method::Mondrian => {
                let method = match config.method {
                    Method::Marginal => TuneMethod::Marginal,
                    _ => TuneMethod::Mondrian,
                };
                let spec = config.tune.to_tune_spec(
                    cal.num_classes(),
                    config.seed,
                    config.mondrian.min_group_n,
                );
                let report = tune_score(cal, calval, config.score.kind, method, config.alpha, &spec)?;
                println!(
                    "winner: T={} lambda={} k_reg={} (avg_size={}, coverage={})",
                    report.winner.temperature,
                    report.winner.lambda,
                    report.winner.k_reg,
                    report.evaluations[report.winner_index].avg_size,
                    report.evaluations[report.winner_index].coverage,
                );
                write_report(config, "tuning-score", &report, &path)?;
            }
        }
        Ok(path)
    })
}

/// `audit`: fairness metrics of a sets CSV.
pub fn cmd_audit(
    config: &RunConfig,
    sets_path: &Path,
    n_groups: Option<usize>,
    out: Option<&Path>,
) -> Result<PathBuf> {
    let sets = read_sets_csv(sets_path)?;
    let n_g = match n_groups {
        Some(n) => n,
        None => sets.iter().map(|s| s.group + 1).max().unwrap_or(0),
    };
    let report = audit_sets(&sets, n_g)?;
    print!("{}", format_report(&report));
    let path = out_path(config, out, "audit_report.json")?;
    write_report(config, "audit", &report, &path)?;
    Ok(path)
}

/// Pipeline shared by `simulate`: build all three predictors on the
/// synthetic task and predict the test split under each treatment.
fn build_treatment_sets(
    config: &RunConfig,
    calval: &LabeledDataset,
    cal: &LabeledDataset,
    test: &LabeledDataset,
) -> Result<(BTreeMap<Treatment, Vec<PredictionSet>>, f64)> {
    let score_cfg = config.score.to_score_config();
    let opts = config.predict.to_options();
    let marginal = calibrate_marginal(cal, &score_cfg, config.alpha, config.seed)?;
    let mondrian = calibrate_mondrian(
        cal,
        &score_cfg,
        config.alpha,
        config.mondrian.min_group_n,
        config.seed,
    )?;
    let k = match config.avgk.k {
        Some(k) => k,
        None => tune_avgk(cal, calval, 1.0 - config.alpha)?,
    };
    let avgk = calibrate_avgk(cal, k, config.seed)?;
    let mut sets = BTreeMap::new();
    sets.insert(Treatment::Control, Vec::new());
    sets.insert(Treatment::Avgk, predict_batch(test, &avgk, &opts)?);
    sets.insert(Treatment::Marginal, predict_batch(test, &marginal, &opts)?);
    sets.insert(Treatment::Conditional, predict_batch(test, &mondrian, &opts)?);
    Ok((sets, k))
}

/// `simulate`: full synthetic pipeline ending in a responses CSV (plus one
/// sets CSV per treated arm).
pub fn cmd_simulate(config: &RunConfig, out: Option<&Path>) -> Result<PathBuf> {
    with_jobs(config, || {
        let human = config
            .human
            .as_ref()
            .ok_or_else(|| Error::Config("simulate needs a [human] section".into()))?;
        if config.synthetic.is_none() {
            return Err(Error::Config("simulate needs a [synthetic] task".into()));
        }
        let data = resolve_data(config)?;
        let (calval, cal, test) = (
            require(&data.calval, "calval")?,
            require(&data.cal, "cal")?,
            require(&data.test, "test")?,
        );
        let (sets_by_treatment, k) = build_treatment_sets(config, calval, cal, test)?;
        let hash = config.hash();
        for (treatment, sets) in &sets_by_treatment {
            if *treatment == Treatment::Control {
                continue;
            }
            let path = out_path(config, None, &format!("sets_{treatment}.csv"))?;
            write_sets_csv(sets, &path, Some((&hash, config.seed)))?;
        }
        let hm = human.to_human_model(config.seed);
        let responses = simulate_responses(
            &sets_by_treatment,
            test,
            &hm,
            human.participants,
            human.trials_per_participant,
        )?;
        let path = out_path(config, out, "responses.csv")?;
        write_responses_csv(&responses, &path, Some((&hash, config.seed)))?;
        println!("avgk_k: {k}");
        for treatment in Treatment::ALL {
            let arm: Vec<_> = responses.iter().filter(|r| r.treatment == treatment).collect();
            if arm.is_empty() {
                continue;
            }
            let acc = arm.iter().filter(|r| r.correct).count() as f64 / arm.len() as f64;
            println!("accuracy[{treatment}]: {acc}");
        }
        Ok(path)
    })
}

/// `stats`: fit the clustered logistic model on a responses CSV.
pub fn cmd_stats(config: &RunConfig, responses_path: &Path, out: Option<&Path>) -> Result<PathBuf> {
    let responses = read_responses_csv(responses_path)?;
    let report = analyze_responses(&responses, &DesignSpec::default())?;
    for or in &report.odds_ratios {
        let stars = if or.significant_5 {
            "*"
        } else if or.significant_10 {
            "."
        } else {
            ""
        };
        println!(
            "OR[{}, group {}]: {:.4} [{:.4}, {:.4}]{stars}",
            or.treatment, or.group, or.or, or.ci_lower, or.ci_upper
        );
    }
    for ror in &report.max_ror {
        println!(
            "maxROR[{}]: {:.4} (groups {} / {})",
            ror.treatment, ror.value, ror.pair.0, ror.pair.1
        );
    }
    let path = out_path(config, out, "stats_report.json")?;
    write_report(config, "stats", &report, &path)?;
    Ok(path)
}

/// `bench-mechanism`: the coverage/size/impact tradeoff benchmark.
pub fn cmd_bench_mechanism(config: &RunConfig, out: Option<&Path>) -> Result<PathBuf> {
    with_jobs(config, || {
        let synthetic = config
            .synthetic
            .as_ref()
            .ok_or_else(|| Error::Config("bench-mechanism needs a [synthetic] task".into()))?;
        let human = config
            .human
            .as_ref()
            .ok_or_else(|| Error::Config("bench-mechanism needs a [human] section".into()))?;
        let task = synthetic.to_spec(config.seed);
        let hm = human.to_human_model(config.seed);
        let n_arms = 4;
        let opts = BenchOptions {
            participants_per_treatment: (human.participants / n_arms).max(1),
            trials_per_participant: human.trials_per_participant,
            min_group_n: config.mondrian.min_group_n,
            fractions: config.split.fractions,
        };
        let report = run_mechanism_benchmark_with(&task, &hm, config.alpha, &opts)?;
        println!("mondrian_equalizes_coverage: {}", report.flags.mondrian_equalizes_coverage);
        println!("marginal_coverage_gap_larger: {}", report.flags.marginal_coverage_gap_larger);
        println!("mondrian_size_gap_larger: {}", report.flags.mondrian_size_gap_larger);
        println!("mondrian_impact_larger: {}", report.flags.mondrian_impact_larger);
        let path = out_path(config, out, "bench_report.json")?;
        write_report(config, "bench-mechanism", &report, &path)?;
        Ok(path)
    })
}

/// `verify`: re-derive the config hash and check each file's embedded copy.
pub fn cmd_verify(config: &RunConfig, files: &[PathBuf]) -> Result<()> {
    let expected = config.hash();
    for file in files {
        let embedded = embedded_hash(file)?;
        if embedded != expected {
            return Err(Error::Config(format!(
                "{}: embedded config hash {} does not match effective config {}",
                file.display(),
                embedded,
                expected
            )));
        }
        println!("{}: ok", file.display());
    }
    Ok(())
}

fn embedded_hash(path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(path)?;
    if path.extension().and_then(|e| e.to_str()) == Some("json") {
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            msg: e.to_string(),
        })?;
        return value
            .get("config_hash")
            .and_then(|h| h.as_str())
            .map(|s| s.to_string())
            .ok_or_else(|| {
                Error::Config(format!("{}: no config_hash field", path.display()))
            });
    }
    // CSV: leading comment line `# config_hash=<hex> seed=<n>`
    let first = text.lines().next().unwrap_or("");
    first
        .strip_prefix("# config_hash=")
        .and_then(|rest| rest.split_whitespace().next())
        .map(|s| s.to_string())
        .ok_or_else(|| Error::Config(format!("{}: no config_hash comment", path.display())))
}
