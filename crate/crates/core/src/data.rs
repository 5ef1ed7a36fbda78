//! Probability datasets: typed records, file ingestion, and deterministic
//! splitting.
//!
//! A dataset is a sequence of per-example softmax vectors with a true label
//! and a protected-group index. Probabilities are accepted as given (no
//! re-normalization); the simplex check allows a 1e-6 slack because upstream
//! exporters round. Group and class indices are dense integers; display
//! names live in an optional JSON sidecar.
//!
//! File contracts:
//! - CSV: header `example_id,group,label,p_0,...,p_{m-1}`, UTF-8, `.` decimal
//!   point.
//! - JSONL: one object per line with keys `example_id`, `group`, `label`,
//!   `probs`.
//! - Names sidecar: `{"groups": [...], "classes": [...]}`.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stream::prf64_indexed;

/// Slack allowed on the probability simplex check.
pub const SIMPLEX_TOL: f64 = 1e-6;

/// One example: a probability vector over `m` classes, the true label, and
/// the protected-group index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbRecord {
    pub example_id: String,
    pub probs: Vec<f64>,
    pub label: usize,
    pub group: usize,
}

impl ProbRecord {
    /// Check the record against the dataset shape `(m, n_g)`.
    fn validate(&self, m: usize, n_g: usize) -> Result<()> {
        if self.probs.len() != m {
            return Err(Error::Validation(format!(
                "example {}: expected {} probabilities, found {}",
                self.example_id,
                m,
                self.probs.len()
            )));
        }
        if self.probs.iter().any(|p| *p < 0.0 || !p.is_finite()) {
            return Err(Error::Validation(format!(
                "example {}: probabilities must be finite and non-negative",
                self.example_id
            )));
        }
        let sum: f64 = self.probs.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Validation(format!(
                "example {}: probabilities sum to {sum}, outside 1 ± {SIMPLEX_TOL}",
                self.example_id
            )));
        }
        if self.label >= m {
            return Err(Error::Validation(format!(
                "example {}: label {} out of range for m={}",
                self.example_id, self.label, m
            )));
        }
        if self.group >= n_g {
            return Err(Error::Validation(format!(
                "example {}: group {} out of range for n_g={}",
                self.example_id, self.group, n_g
            )));
        }
        Ok(())
    }
}

/// A validated collection of [`ProbRecord`]s sharing one class count `m`
/// and group count `n_g`. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    records: Vec<ProbRecord>,
    m: usize,
    n_g: usize,
    pub class_names: Option<Vec<String>>,
    pub group_names: Option<Vec<String>>,
}

impl LabeledDataset {
    /// Build a dataset, deriving `n_g` as `max(group) + 1`.
    pub fn new(records: Vec<ProbRecord>, m: usize) -> Result<Self> {
        let n_g = records.iter().map(|r| r.group + 1).max().unwrap_or(0);
        Self::with_shape(records, m, n_g)
    }

    /// Build a dataset with an explicit group count (allows declared groups
    /// that happen to be absent from the records).
    pub fn with_shape(records: Vec<ProbRecord>, m: usize, n_g: usize) -> Result<Self> {
        let ds = Self {
            records,
            m,
            n_g,
            class_names: None,
            group_names: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Attach display names from a sidecar; name counts must match the shape.
    pub fn with_names(
        mut self,
        class_names: Option<Vec<String>>,
        group_names: Option<Vec<String>>,
    ) -> Result<Self> {
        if let Some(ref names) = class_names {
            if names.len() != self.m {
                return Err(Error::Validation(format!(
                    "{} class names supplied for m={}",
                    names.len(),
                    self.m
                )));
            }
        }
        if let Some(ref names) = group_names {
            if names.len() < self.n_g {
                return Err(Error::Validation(format!(
                    "{} group names supplied but records reference {} groups",
                    names.len(),
                    self.n_g
                )));
            }
            self.n_g = names.len();
        }
        self.class_names = class_names;
        self.group_names = group_names;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        for rec in &self.records {
            rec.validate(self.m, self.n_g)?;
        }
        Ok(())
    }

    pub fn records(&self) -> &[ProbRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Class count.
    pub fn num_classes(&self) -> usize {
        self.m
    }

    /// Group count.
    pub fn num_groups(&self) -> usize {
        self.n_g
    }

    /// Record indices per group, groups in index order.
    pub fn indices_by_group(&self) -> Vec<Vec<usize>> {
        let mut by_group = vec![Vec::new(); self.n_g];
        for (i, rec) in self.records.iter().enumerate() {
            by_group[rec.group].push(i);
        }
        by_group
    }

    fn subset(&self, indices: &[usize]) -> Self {
        Self {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            m: self.m,
            n_g: self.n_g,
            class_names: self.class_names.clone(),
            group_names: self.group_names.clone(),
        }
    }
}

/// On-disk encodings for datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileFormat {
    Csv,
    Jsonl,
}

impl std::str::FromStr for FileFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(FileFormat::Csv),
            "jsonl" => Ok(FileFormat::Jsonl),
            other => Err(Error::Parameter(format!("unknown format {other:?}"))),
        }
    }
}

/// Stratification key used by [`split`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StratifyBy {
    Class,
    Group,
    ClassAndGroup,
    #[default]
    None,
}

impl std::str::FromStr for StratifyBy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "class" => Ok(StratifyBy::Class),
            "group" => Ok(StratifyBy::Group),
            "class-and-group" => Ok(StratifyBy::ClassAndGroup),
            "none" => Ok(StratifyBy::None),
            other => Err(Error::Parameter(format!("unknown stratify key {other:?}"))),
        }
    }
}

/// Three-way split request: fractions are `(calval, cal, test)` and must sum
/// to 1 within 1e-9.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSpec {
    pub fractions: [f64; 3],
    #[serde(default)]
    pub stratify_by: StratifyBy,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(fractions: [f64; 3], stratify_by: StratifyBy, seed: u64) -> Result<Self> {
        let spec = Self {
            fractions,
            stratify_by,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fractions.iter().any(|f| *f < 0.0) {
            return Err(Error::Parameter("split fractions must be non-negative".into()));
        }
        let sum: f64 = self.fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Parameter(format!(
                "split fractions sum to {sum}, expected 1 ± 1e-9"
            )));
        }
        Ok(())
    }
}

/// Load a dataset from `path` in the given format, validating every record.
pub fn load_dataset(path: impl AsRef<Path>, format: FileFormat) -> Result<LabeledDataset> {
    let path = path.as_ref();
    match format {
        FileFormat::Csv => load_csv(path),
        FileFormat::Jsonl => load_jsonl(path),
    }
}

fn load_csv(path: &Path) -> Result<LabeledDataset> {
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
    let cols: Vec<&str> = headers.iter().collect();
    if cols.len() < 4 || cols[0] != "example_id" || cols[1] != "group" || cols[2] != "label" {
        return Err(Error::Parse {
            line: 1,
            msg: format!(
                "expected header example_id,group,label,p_0,...; found {:?}",
                cols.join(",")
            ),
        });
    }
    let m = cols.len() - 3;
    for (j, col) in cols[3..].iter().enumerate() {
        let expected = format!("p_{j}");
        if *col != expected {
            return Err(Error::Parse {
                line: 1,
                msg: format!("probability column {j} named {col:?}, expected {expected:?}"),
            });
        }
    }

    let mut records = Vec::new();
    for result in reader.records() {
        let row = result.map_err(|e| Error::Parse {
            line: csv_error_line(&e),
            msg: e.to_string(),
        })?;
        let line = row
            .position()
            .map(|p| p.line() as usize)
            .unwrap_or(records.len() + 2);
        if row.len() != m + 3 {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, found {}", m + 3, row.len()),
            });
        }
        let parse_usize = |idx: usize, name: &str| -> Result<usize> {
            row[idx].trim().parse::<usize>().map_err(|_| Error::Parse {
                line,
                msg: format!("field {name}: cannot parse {:?} as unsigned integer", &row[idx]),
            })
        };
        let group = parse_usize(1, "group")?;
        let label = parse_usize(2, "label")?;
        let mut probs = Vec::with_capacity(m);
        for j in 0..m {
            let raw = row[3 + j].trim();
            let p: f64 = raw.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("field p_{j}: cannot parse {raw:?} as real"),
            })?;
            probs.push(p);
        }
        records.push(ProbRecord {
            example_id: row[0].to_string(),
            probs,
            label,
            group,
        });
    }
    LabeledDataset::new(records, m)
}

fn csv_error_line(err: &csv::Error) -> usize {
    err.position().map(|p| p.line() as usize).unwrap_or(0)
}

#[derive(Deserialize)]
struct JsonlRow {
    example_id: String,
    group: usize,
    label: usize,
    probs: Vec<f64>,
}

fn load_jsonl(path: &Path) -> Result<LabeledDataset> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut m = None;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: JsonlRow = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            msg: e.to_string(),
        })?;
        if *m.get_or_insert(row.probs.len()) != row.probs.len() {
            return Err(Error::Parse {
                line: idx + 1,
                msg: format!(
                    "record has {} probabilities, earlier records had {}",
                    row.probs.len(),
                    m.unwrap()
                ),
            });
        }
        records.push(ProbRecord {
            example_id: row.example_id,
            probs: row.probs,
            label: row.label,
            group: row.group,
        });
    }
    let m = m.ok_or_else(|| Error::Validation("dataset file contains no records".into()))?;
    LabeledDataset::new(records, m)
}

/// Write a dataset to `path`. Probabilities are written with shortest
/// round-trip formatting, so load → save → load is the identity in both
/// formats.
pub fn save_dataset(
    ds: &LabeledDataset,
    path: impl AsRef<Path>,
    format: FileFormat,
) -> Result<()> {
    let path = path.as_ref();
    match format {
        FileFormat::Csv => {
            let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
            let header: Vec<String> = ["example_id", "group", "label"]
                .iter()
                .map(|s| s.to_string())
                .chain((0..ds.num_classes()).map(|j| format!("p_{j}")))
                .collect();
            writeln!(w, "{}", header.join(","))?;
            for rec in ds.records() {
                let probs: Vec<String> = rec.probs.iter().map(|p| format!("{p}")).collect();
                writeln!(
                    w,
                    "{},{},{},{}",
                    rec.example_id,
                    rec.group,
                    rec.label,
                    probs.join(",")
                )?;
            }
            w.flush()?;
        }
        FileFormat::Jsonl => {
            let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
            for rec in ds.records() {
                let row = serde_json::json!({
                    "example_id": rec.example_id,
                    "group": rec.group,
                    "label": rec.label,
                    "probs": rec.probs,
                });
                writeln!(w, "{row}")?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

#[derive(Deserialize)]
struct NamesSidecar {
    groups: Option<Vec<String>>,
    classes: Option<Vec<String>>,
}

/// Load the optional names sidecar, returning `(classes, groups)`.
pub fn load_names(path: impl AsRef<Path>) -> Result<(Option<Vec<String>>, Option<Vec<String>>)> {
    let text = std::fs::read_to_string(path)?;
    let sidecar: NamesSidecar = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        msg: e.to_string(),
    })?;
    Ok((sidecar.classes, sidecar.groups))
}

fn stratum_key(rec: &ProbRecord, by: StratifyBy, n_g: usize) -> usize {
    match by {
        StratifyBy::None => 0,
        StratifyBy::Class => rec.label,
        StratifyBy::Group => rec.group,
        StratifyBy::ClassAndGroup => rec.label * n_g + rec.group,
    }
}

fn describe_stratum(key: usize, by: StratifyBy, n_g: usize) -> String {
    match by {
        StratifyBy::None => "whole dataset".to_string(),
        StratifyBy::Class => format!("class {key}"),
        StratifyBy::Group => format!("group {key}"),
        StratifyBy::ClassAndGroup => format!("class {} / group {}", key / n_g, key % n_g),
    }
}

/// Largest-remainder allocation of `n` items to the three fractions; every
/// count is within ±1 of its real-valued target.
fn allocate(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let targets: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = targets.iter().map(|t| t.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = targets[a] - counts[a] as f64;
        let rb = targets[b] - counts[b] as f64;
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(n - assigned) {
        counts[i] += 1;
    }
    [counts[0], counts[1], counts[2]]
}

/// Deterministically partition `ds` into `(calval, cal, test)`.
///
/// Records are grouped into strata, each stratum is shuffled with a
/// seed-keyed RNG, and a largest-remainder allocation fixes per-stratum
/// counts. Within each output split the original record order is preserved.
/// A nonzero fraction receiving zero records from some stratum is an error,
/// not a silent empty split.
pub fn split(
    ds: &LabeledDataset,
    spec: &SplitSpec,
) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
    spec.validate()?;
    if ds.is_empty() {
        return Err(Error::Split("cannot split an empty dataset".into()));
    }

    let mut strata: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, rec) in ds.records().iter().enumerate() {
        strata
            .entry(stratum_key(rec, spec.stratify_by, ds.num_groups()))
            .or_default()
            .push(i);
    }

    let split_names = ["calval", "cal", "test"];
    let mut picks: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (&key, indices) in &strata {
        let counts = allocate(indices.len(), &spec.fractions);
        for (s, &c) in counts.iter().enumerate() {
            if spec.fractions[s] > 0.0 && c == 0 {
                return Err(Error::Split(format!(
                    "stratum {} has {} records; {} split (fraction {}) would receive none",
                    describe_stratum(key, spec.stratify_by, ds.num_groups()),
                    indices.len(),
                    split_names[s],
                    spec.fractions[s]
                )));
            }
        }
        let mut shuffled = indices.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(prf64_indexed(spec.seed, "split", key as u64));
        shuffled.shuffle(&mut rng);
        picks[0].extend(&shuffled[..counts[0]]);
        picks[1].extend(&shuffled[counts[0]..counts[0] + counts[1]]);
        picks[2].extend(&shuffled[counts[0] + counts[1]..]);
    }
    for p in picks.iter_mut() {
        p.sort_unstable();
    }
    Ok((ds.subset(&picks[0]), ds.subset(&picks[1]), ds.subset(&picks[2])))
}
