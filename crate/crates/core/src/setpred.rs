//! Prediction sets from a calibrated predictor.
//!
//! Marginal/Mondrian membership is `{y : s(x, y) <= q_hat}` (non-strict at
//! the order statistic, which is what carries the finite-sample guarantee);
//! avg-k membership is `{y : p_y > q_k}` with optional random inclusion of
//! ties. By default sets are forced non-empty with a top-1 fallback, since
//! an empty suggestion is useless as a decision aid; pass
//! [`PredictOptions::raw`] for the bare rules.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::SetPredictor;
use crate::data::{LabeledDataset, ProbRecord};
use crate::error::{Error, Result};
use crate::scores::{apply_temperature, score_all, Ranking};
use crate::stream;

/// The set of class indices emitted for one example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub example_id: String,
    /// Sorted ascending, duplicate-free.
    pub members: Vec<usize>,
    pub size: usize,
    /// Whether `label` is in `members`; stored eagerly so audits never
    /// re-derive membership.
    pub covered: bool,
    pub label: usize,
    pub group: usize,
}

/// Options applied at prediction time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictOptions {
    /// Replace an empty set with the top-1 class.
    pub force_nonempty: bool,
    /// Avg-k only: include labels with `p_y == q_k` independently with
    /// probability 1/2 from the seeded stream.
    pub randomize_ties: bool,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self {
            force_nonempty: true,
            randomize_ties: false,
        }
    }
}

impl PredictOptions {
    /// The bare set rules: possibly-empty sets, deterministic ties.
    pub fn raw() -> Self {
        Self {
            force_nonempty: false,
            randomize_ties: false,
        }
    }
}

/// Produce the prediction set for one record.
pub fn predict_set(
    rec: &ProbRecord,
    pred: &SetPredictor,
    opts: &PredictOptions,
) -> Result<PredictionSet> {
    let m = pred.num_classes();
    if rec.probs.len() != m {
        return Err(Error::Prediction(format!(
            "example {}: record has {} classes, predictor expects {m}",
            rec.example_id,
            rec.probs.len()
        )));
    }
    let mut members: Vec<usize> = match pred {
        SetPredictor::Marginal(p) => {
            let scaled = apply_temperature(&rec.probs, p.score_cfg.temperature)?;
            let u = p.score_cfg.u_for(p.seed, &rec.example_id);
            let scored = score_all(&scaled, &p.score_cfg, u)?;
            scored
                .iter()
                .filter(|s| s.score <= p.q_hat)
                .map(|s| s.label)
                .collect()
        }
        SetPredictor::Mondrian(p) => {
            let q_hat = *p.q_hat_by_group.get(rec.group).ok_or_else(|| {
                Error::Prediction(format!(
                    "example {}: group {} has no Mondrian threshold ({} groups calibrated)",
                    rec.example_id,
                    rec.group,
                    p.q_hat_by_group.len()
                ))
            })?;
            let scaled = apply_temperature(&rec.probs, p.score_cfg.temperature)?;
            let u = p.score_cfg.u_for(p.seed, &rec.example_id);
            let scored = score_all(&scaled, &p.score_cfg, u)?;
            scored
                .iter()
                .filter(|s| s.score <= q_hat)
                .map(|s| s.label)
                .collect()
        }
        SetPredictor::Avgk(p) => {
            let mut members: Vec<usize> = (0..m).filter(|&y| rec.probs[y] > p.q_k).collect();
            if opts.randomize_ties {
                for y in 0..m {
                    if rec.probs[y] == p.q_k {
                        let coin = stream::uniform(
                            p.seed,
                            "avgk-tie",
                            &format!("{}\u{0}{y}", rec.example_id),
                        );
                        if coin < 0.5 {
                            members.push(y);
                        }
                    }
                }
                members.sort_unstable();
            }
            members
        }
    };
    if members.is_empty() && opts.force_nonempty {
        members.push(Ranking::new(&rec.probs).order[0]);
    }
    let covered = members.binary_search(&rec.label).is_ok();
    Ok(PredictionSet {
        example_id: rec.example_id.clone(),
        size: members.len(),
        covered,
        label: rec.label,
        group: rec.group,
        members,
    })
}

/// Order-preserving map of [`predict_set`] over a dataset. Records are
/// independent, so the batch runs on the ambient rayon pool; output order
/// matches input order regardless of scheduling.
pub fn predict_batch(
    ds: &LabeledDataset,
    pred: &SetPredictor,
    opts: &PredictOptions,
) -> Result<Vec<PredictionSet>> {
    ds.records()
        .par_iter()
        .map(|rec| predict_set(rec, pred, opts))
        .collect()
}

/// Mean set size.
pub fn average_size(sets: &[PredictionSet]) -> f64 {
    if sets.is_empty() {
        return 0.0;
    }
    sets.iter().map(|s| s.size as f64).sum::<f64>() / sets.len() as f64
}

/// Write sets as CSV: `example_id,group,label,set_size,covered,members`
/// with members `|`-joined. An optional `# config_hash=... seed=...`
/// comment line precedes the header.
pub fn write_sets_csv(
    sets: &[PredictionSet],
    path: impl AsRef<Path>,
    provenance: Option<(&str, u64)>,
) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    if let Some((hash, seed)) = provenance {
        writeln!(w, "# config_hash={hash} seed={seed}")?;
    }
    writeln!(w, "example_id,group,label,set_size,covered,members")?;
    for s in sets {
        let members: Vec<String> = s.members.iter().map(|y| y.to_string()).collect();
        writeln!(
            w,
            "{},{},{},{},{},{}",
            s.example_id,
            s.group,
            s.label,
            s.size,
            s.covered,
            members.join("|")
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Read a sets CSV written by [`write_sets_csv`].
pub fn read_sets_csv(path: impl AsRef<Path>) -> Result<Vec<PredictionSet>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .from_path(path)?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    let expected = ["example_id", "group", "label", "set_size", "covered", "members"];
    let cols: Vec<&str> = headers.iter().collect();
    if cols != expected {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header {expected:?}, found {cols:?}"),
        });
    }
    let mut sets = Vec::new();
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
        let group: usize = row[1].parse().map_err(|_| field_err("group", &row[1]))?;
        let label: usize = row[2].parse().map_err(|_| field_err("label", &row[2]))?;
        let size: usize = row[3].parse().map_err(|_| field_err("set_size", &row[3]))?;
        let covered: bool = row[4].parse().map_err(|_| field_err("covered", &row[4]))?;
        let members: Vec<usize> = if row[5].is_empty() {
            Vec::new()
        } else {
            row[5]
                .split('|')
                .map(|tok| tok.parse().map_err(|_| field_err("members", &row[5])))
                .collect::<Result<_>>()?
        };
        if members.len() != size {
            return Err(Error::Validation(format!(
                "example {}: set_size {} disagrees with {} members",
                &row[0],
                size,
                members.len()
            )));
        }
        sets.push(PredictionSet {
            example_id: row[0].to_string(),
            members,
            size,
            covered,
            label,
            group,
        });
    }
    Ok(sets)
}
