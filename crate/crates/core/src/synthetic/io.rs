use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{Dataset, GenSpec};
use crate::error::{Error, Result};

/// Name recorded in dataset metadata.
pub const GENERATOR_NAME: &str = "ica-lab/masked-tanh-mixing";

/// Sidecar metadata written next to a dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub spec: GenSpec,
    pub seed: u64,
    pub generator_name: String,
}

/// `data.csv` → `data.csv.meta.json`.
pub fn metadata_path(csv: &Path) -> PathBuf {
    let mut name = csv.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".meta.json");
    csv.with_file_name(name)
}

fn header(n: usize, m: usize) -> String {
    let mut cols: Vec<String> = (1..=n).map(|i| format!("s_{i}")).collect();
    cols.push("u".into());
    cols.extend((1..=m).map(|i| format!("x_{i}")));
    cols.join(",")
}

/// Writes `path` (CSV, 17 significant digits) and its metadata sidecar.
pub fn export_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    ds.check()?;
    let (n, m) = (ds.spec.n(), ds.spec.m());
    let mut out = header(n, m);
    out.push('\n');
    for r in 0..ds.len() {
        for j in 0..n {
            let _ = write!(out, "{:.16e},", ds.sources[(r, j)]);
        }
        let _ = write!(out, "{}", ds.labels[r]);
        for i in 0..m {
            let _ = write!(out, ",{:.16e}", ds.observations[(r, i)]);
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    let meta = DatasetMetadata {
        spec: ds.spec.clone(),
        seed: ds.spec.seed,
        generator_name: GENERATOR_NAME.into(),
    };
    std::fs::write(metadata_path(path), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Reads a dataset written by [`export_dataset`], checking it against its
/// metadata.
pub fn import_dataset(path: &Path) -> Result<Dataset> {
    let meta: DatasetMetadata = serde_json::from_str(&std::fs::read_to_string(metadata_path(path))?)?;
    if meta.seed != meta.spec.seed {
        return Err(Error::Parse(format!("metadata seed {} disagrees with spec seed {}", meta.seed, meta.spec.seed)));
    }
    let spec = meta.spec;
    spec.validate()?;
    let (n, m) = (spec.n(), spec.m());
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let head = lines.next().ok_or_else(|| Error::Parse("empty dataset file".into()))?;
    if head.trim() != header(n, m) {
        return Err(Error::Parse(format!("header `{head}` does not match metadata (n={n}, m={m})")));
    }
    let rows: Vec<&str> = lines.filter(|l| !l.trim().is_empty()).collect();
    if rows.len() != spec.sample_count {
        return Err(Error::Parse(format!("expected {} rows, found {}", spec.sample_count, rows.len())));
    }
    let mut sources = DMatrix::zeros(rows.len(), n);
    let mut observations = DMatrix::zeros(rows.len(), m);
    let mut labels = Vec::with_capacity(rows.len());
    for (r, line) in rows.iter().enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != n + 1 + m {
            return Err(Error::Parse(format!("row {} has {} fields, expected {}", r + 1, fields.len(), n + 1 + m)));
        }
        let num = |k: usize| -> Result<f64> {
            fields[k]
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::Parse(format!("row {}: bad number `{}`", r + 1, fields[k])))
        };
        for j in 0..n {
            sources[(r, j)] = num(j)?;
        }
        labels.push(
            fields[n]
                .trim()
                .parse::<usize>()
                .map_err(|_| Error::Parse(format!("row {}: bad label `{}`", r + 1, fields[n])))?,
        );
        for i in 0..m {
            observations[(r, i)] = num(n + 1 + i)?;
        }
    }
    let ds = Dataset {
        sources,
        labels,
        observations,
        spec,
    };
    ds.check()?;
    Ok(ds)
}
