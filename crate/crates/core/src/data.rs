//! Dataset loading, rescaling and per-trial pool/test splits.
//!
//! Two text formats are understood:
//!
//! * **CSV**: one instance per line, comma separated, optional header line.
//!   All non-label columns must be numeric; the label column holds any text.
//! * **LIBSVM**: `label index:value index:value ...` with 1-based indices;
//!   absent indices are zero.
//!
//! A manifest file lists datasets, one per line:
//!
//! ```text
//! # name    path                 label
//! breast    breast.csv           last
//! fourclass fourclass.libsvm     libsvm
//! ```
//!
//! The label field is `first`, `last`, a 0-based column index, or `libsvm`
//! for the sparse format. Paths are relative to the manifest's directory.
//! A CSV whose first line contains a non-numeric feature field is treated as
//! having a header.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::seed;

/// Class label, either -1 or +1.
pub type Label = i8;

/// A named binary classification dataset with features rescaled to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    name: String,
    features: Tensor,
    labels: Vec<Label>,
}

impl Dataset {
    /// Builds a dataset from raw features, rescaling each column to `[0, 1]`.
    pub fn new(name: impl Into<String>, raw: Tensor, labels: Vec<Label>) -> Result<Self> {
        let name = name.into();
        if raw.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} labels",
                raw.rows(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l != -1 && l != 1) {
            return Err(Error::InvalidData(format!("label {bad} is not -1 or +1")));
        }
        for class in [-1, 1] {
            let count = labels.iter().filter(|&&l| l == class).count();
            if count < 2 {
                return Err(Error::DegenerateDataset {
                    name,
                    reason: format!("class {class:+} has {count} instance(s), need at least 2"),
                });
            }
        }
        let features = rescale_features(&raw)?;
        Ok(Self {
            name,
            features,
            labels,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Raw feature count.
    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn instance(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&l| l == 1).count();
        (self.labels.len() - pos, pos)
    }
}

/// Where the label lives in a dataset file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schema {
    Csv { label_column: LabelColumn },
    Libsvm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelColumn {
    First,
    Last,
    Index(usize),
}

impl std::str::FromStr for Schema {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "libsvm" => Schema::Libsvm,
            "first" => Schema::Csv {
                label_column: LabelColumn::First,
            },
            "last" => Schema::Csv {
                label_column: LabelColumn::Last,
            },
            other => Schema::Csv {
                label_column: LabelColumn::Index(other.parse().map_err(|_| {
                    Error::Config(format!(
                        "label column must be first, last, libsvm or an index, got {other:?}"
                    ))
                })?),
            },
        })
    }
}

impl std::fmt::Display for Schema {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Schema::Libsvm => f.write_str("libsvm"),
            Schema::Csv { label_column } => match label_column {
                LabelColumn::First => f.write_str("first"),
                LabelColumn::Last => f.write_str("last"),
                LabelColumn::Index(i) => write!(f, "{i}"),
            },
        }
    }
}

/// Loads a dataset file. The name is the file stem.
pub fn load_dataset(path: &Path, schema: Schema) -> Result<Dataset> {
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    load_named(&name, path, schema)
}

pub fn load_named(name: &str, path: &Path, schema: Schema) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let (raw, labels) = match schema {
        Schema::Csv { label_column } => parse_csv(path, &text, label_column)?,
        Schema::Libsvm => parse_libsvm(path, &text)?,
    };
    let labels = map_labels(&labels)?;
    Dataset::new(name, raw, labels)
}

fn malformed(path: &Path, line: usize, reason: impl Into<String>) -> Error {
    Error::Malformed {
        path: path.to_path_buf(),
        line,
        reason: reason.into(),
    }
}

fn parse_csv(path: &Path, text: &str, label: LabelColumn) -> Result<(Tensor, Vec<String>)> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let li = match label {
            LabelColumn::First => 0,
            LabelColumn::Last => fields.len() - 1,
            LabelColumn::Index(i) => i,
        };
        if li >= fields.len() || fields.len() < 2 {
            return Err(malformed(path, lineno + 1, "label column out of range"));
        }
        let parsed: std::result::Result<Vec<f64>, _> = fields
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != li)
            .map(|(_, f)| f.parse::<f64>())
            .collect();
        let values = match parsed {
            Ok(v) => v,
            Err(_) if rows.is_empty() && labels.is_empty() && width.is_none() => {
                // header line
                width = Some(fields.len());
                continue;
            }
            Err(e) => return Err(malformed(path, lineno + 1, e.to_string())),
        };
        match width {
            Some(w) if w != fields.len() => {
                return Err(malformed(
                    path,
                    lineno + 1,
                    format!("expected {w} fields, found {}", fields.len()),
                ))
            }
            _ => width = Some(fields.len()),
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(malformed(path, lineno + 1, "non-finite feature value"));
        }
        rows.push(values);
        labels.push(fields[li].to_string());
    }
    if rows.is_empty() {
        return Err(malformed(path, 0, "no data rows"));
    }
    Ok((Tensor::from_rows(&rows)?, labels))
}

fn parse_libsvm(path: &Path, text: &str) -> Result<(Tensor, Vec<String>)> {
    let mut sparse: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut labels = Vec::new();
    let mut dim = 0;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let label = parts.next().ok_or_else(|| malformed(path, lineno + 1, "missing label"))?;
        let mut row = Vec::new();
        for p in parts {
            let (i, v) = p
                .split_once(':')
                .ok_or_else(|| malformed(path, lineno + 1, format!("bad pair {p:?}")))?;
            let i: usize = i
                .parse()
                .map_err(|_| malformed(path, lineno + 1, format!("bad index {i:?}")))?;
            let v: f64 = v
                .parse()
                .map_err(|_| malformed(path, lineno + 1, format!("bad value {v:?}")))?;
            if i == 0 {
                return Err(malformed(path, lineno + 1, "indices are 1-based"));
            }
            if !v.is_finite() {
                return Err(malformed(path, lineno + 1, "non-finite feature value"));
            }
            dim = dim.max(i);
            row.push((i - 1, v));
        }
        sparse.push(row);
        labels.push(label.to_string());
    }
    if sparse.is_empty() {
        return Err(malformed(path, 0, "no data rows"));
    }
    let mut x = Tensor::zeros(sparse.len(), dim);
    for (r, row) in sparse.iter().enumerate() {
        for &(c, v) in row {
            x.set(r, c, v);
        }
    }
    Ok((x, labels))
}

/// Maps raw label text to -1/+1: the lexicographically smaller label becomes
/// -1. Numeric labels compare numerically so that `-1 < 1 < 2 < 10`.
pub fn map_labels<S: AsRef<str>>(raw: &[S]) -> Result<Vec<Label>> {
    let mut distinct: Vec<&str> = raw.iter().map(AsRef::as_ref).collect();
    distinct.sort_by(|a, b| compare_labels(a, b));
    distinct.dedup();
    if distinct.len() != 2 {
        return Err(Error::UnsupportedTask {
            found: distinct.len(),
        });
    }
    let neg = distinct[0];
    Ok(raw
        .iter()
        .map(|l| if l.as_ref() == neg { -1 } else { 1 })
        .collect())
}

fn compare_labels(a: &str, b: &str) -> std::cmp::Ordering {
    match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => x.total_cmp(&y).then_with(|| a.cmp(b)),
        _ => a.cmp(b),
    }
}

/// Per-column min-max rescale to `[0, 1]`; constant columns become 0.
pub fn rescale_features(raw: &Tensor) -> Result<Tensor> {
    if !raw.all_finite() {
        return Err(Error::InvalidData("non-finite feature value".into()));
    }
    let (n, d) = raw.shape();
    let mut out = raw.clone();
    for c in 0..d {
        let (lo, hi) = (0..n).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
            let v = raw.get(r, c);
            (lo.min(v), hi.max(v))
        });
        let span = hi - lo;
        for r in 0..n {
            let v = if span > 0.0 {
                ((raw.get(r, c) - lo) / span).clamp(0.0, 1.0)
            } else {
                0.0
            };
            out.set(r, c, v);
        }
    }
    Ok(out)
}

/// One dataset's partition for a single trial.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrialSplit {
    pub trial_index: u64,
    pub pool: Vec<usize>,
    pub test: Vec<usize>,
    /// One pool instance per class, negative class first.
    pub initial_labelled: Vec<usize>,
}

const SPLIT_RETRIES: u64 = 100;
pub const MIN_SPLIT_SIZE: usize = 8;

/// Deterministic 50/50 pool/test split with one labelled seed per class.
///
/// The shuffle seed is derived from `(base_seed, dataset name, trial_index,
/// attempt)`; attempts advance only when a class is missing from the pool.
pub fn make_trial_split(ds: &Dataset, trial_index: u64, base_seed: u64) -> Result<TrialSplit> {
    let n = ds.len();
    if n < MIN_SPLIT_SIZE {
        return Err(Error::DegenerateDataset {
            name: ds.name.clone(),
            reason: format!("{n} instances, a split needs at least {MIN_SPLIT_SIZE}"),
        });
    }
    let tag = seed::name_tag(&ds.name);
    let pool_size = n.div_ceil(2);
    for attempt in 0..=SPLIT_RETRIES {
        let mut rng = seed::rng(seed::derive(base_seed, &[tag, trial_index, attempt]));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let test = order.split_off(pool_size);
        let pool = order;
        let mut initial = Vec::with_capacity(2);
        for class in [-1, 1] {
            let members: Vec<usize> = pool
                .iter()
                .copied()
                .filter(|&i| ds.labels[i] == class)
                .collect();
            if members.is_empty() {
                break;
            }
            initial.push(members[rng.gen_range(0..members.len())]);
        }
        if initial.len() == 2 {
            return Ok(TrialSplit {
                trial_index,
                pool,
                test,
                initial_labelled: initial,
            });
        }
    }
    Err(Error::DegenerateSplit {
        name: ds.name.clone(),
        attempts: SPLIT_RETRIES as usize + 1,
    })
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub path: PathBuf,
    pub schema: Schema,
}

/// Ordered list of datasets declared by a manifest file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        let mut seen = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [name, path, label] = fields[..] else {
                return Err(Error::Config(format!(
                    "manifest line {}: expected `name path label`, got {line:?}",
                    lineno + 1
                )));
            };
            if seen.insert(name.to_string(), lineno).is_some() {
                return Err(Error::Config(format!("duplicate dataset {name:?} in manifest")));
            }
            entries.push(ManifestEntry {
                name: name.to_string(),
                path: base_dir.join(path),
                schema: label.parse()?,
            });
        }
        Ok(Self { entries })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.name.as_str()).collect()
    }

    pub fn entry(&self, name: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn load(&self, name: &str) -> Result<Dataset> {
        let e = self
            .entry(name)
            .ok_or_else(|| Error::Config(format!("dataset {name:?} is not in the manifest")))?;
        load_named(&e.name, &e.path, e.schema)
    }

    /// Loads the named datasets in the given order (all of them when `names`
    /// is empty).
    pub fn load_many<S: AsRef<str>>(&self, names: &[S]) -> Result<Vec<Dataset>> {
        if names.is_empty() {
            return self.entries.iter().map(|e| self.load(&e.name)).collect();
        }
        names.iter().map(|n| self.load(n.as_ref())).collect()
    }
}
