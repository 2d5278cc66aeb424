//! File formats: HMAT matrix dumps, CSV tables, sorted-key JSON, run manifests, PGM previews.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::experiments::{BlockNormReport, DecayFit, TraceRecord};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("dimension mismatch: header says {expected}, body has {found}")]
    DimensionMismatch { expected: String, found: String },
    #[error("line {line}: cannot parse '{token}'")]
    Parse { line: usize, token: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{path}: checksum changed since it was recorded")]
    ChecksumMismatch { path: String },
}

fn read_text(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|source| IoError::File {
        path: path.to_owned(),
        source,
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| IoError::File {
            path: dir.to_owned(),
            source,
        })?;
    }
    fs::write(path, bytes).map_err(|source| IoError::File {
        path: path.to_owned(),
        source,
    })
}

/// 17 significant digits, enough to round-trip any `f64`.
fn exact(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn format_matrix_dump(m: ArrayView2<'_, f64>) -> String {
    let mut out = format!("HMAT 1 {} {}\n", m.nrows(), m.ncols());
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|&v| exact(v)).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn parse_matrix_dump(text: &str) -> Result<Array2<f64>, IoError> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let fields: Vec<&str> = header.split_whitespace().collect();
    let (rows, cols) = match fields.as_slice() {
        ["HMAT", "1", r, c] => match (r.parse::<usize>(), c.parse::<usize>()) {
            (Ok(r), Ok(c)) => (r, c),
            _ => return Err(IoError::MalformedHeader(header.to_owned())),
        },
        _ => return Err(IoError::MalformedHeader(header.to_owned())),
    };
    let body: Vec<&str> = lines.filter(|l| !l.trim().is_empty()).collect();
    if body.len() != rows {
        return Err(IoError::DimensionMismatch {
            expected: format!("{rows} rows"),
            found: format!("{} rows", body.len()),
        });
    }
    let mut data = Vec::with_capacity(rows * cols);
    for (k, line) in body.iter().enumerate() {
        let before = data.len();
        for token in line.split_whitespace() {
            data.push(token.parse::<f64>().map_err(|_| IoError::Parse {
                line: k + 2,
                token: token.to_owned(),
            })?);
        }
        if data.len() - before != cols {
            return Err(IoError::DimensionMismatch {
                expected: format!("{cols} columns"),
                found: format!("{} columns on line {}", data.len() - before, k + 2),
            });
        }
    }
    Ok(Array2::from_shape_vec((rows, cols), data).expect("row-major shape"))
}

pub fn write_matrix_dump(path: &Path, m: ArrayView2<'_, f64>) -> Result<(), IoError> {
    write_bytes(path, format_matrix_dump(m).as_bytes())
}

pub fn read_matrix_dump(path: &Path) -> Result<Array2<f64>, IoError> {
    parse_matrix_dump(&read_text(path)?)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const CONCENTRATION_HEADER: &str = "case,C,trial,H11,H12,r,Htilde11,Htilde12,rtilde";
pub const DECAY_HEADER: &str = "case,C,mean_ratio,std_ratio,trials";
pub const TRACE_HEADER: &str = "step,loss,diag_ww,diag_vv,circ_wv";
pub const LABELS_HEADER: &str = "index,label";
pub const SPECTRUM_HEADER: &str = "eigenvalue";

pub fn concentration_csv(reports: &[BlockNormReport]) -> String {
    let mut out = format!("{CONCENTRATION_HEADER}\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.case,
            r.classes,
            r.trial,
            r.h11,
            r.h12,
            r.r,
            opt(r.htilde11),
            opt(r.htilde12),
            opt(r.rtilde)
        );
    }
    out
}

pub fn decay_csv(fit: &DecayFit) -> String {
    let mut out = format!("{DECAY_HEADER}\n");
    for ((c, m), s) in fit.c_grid.iter().zip(&fit.ratios).zip(&fit.std_ratios) {
        let _ = writeln!(out, "{},{c},{m},{s},{}", fit.case, fit.trials);
    }
    out
}

pub fn trace_csv(records: &[TraceRecord]) -> String {
    let mut out = format!("{TRACE_HEADER}\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.step,
            r.loss,
            opt(r.scores.diag_ww),
            r.scores.diag_vv,
            opt(r.scores.circulant_wv)
        );
    }
    out
}

pub fn labels_csv(labels: &[usize]) -> String {
    let mut out = format!("{LABELS_HEADER}\n");
    for (i, l) in labels.iter().enumerate() {
        let _ = writeln!(out, "{i},{l}");
    }
    out
}

pub fn spectrum_csv(eigenvalues: &[f64]) -> String {
    let mut out = format!("{SPECTRUM_HEADER}\n");
    for v in eigenvalues {
        let _ = writeln!(out, "{}", exact(*v));
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    write_bytes(path, text.as_bytes())
}

/// Pretty JSON with keys sorted at every level and a trailing newline.
pub fn to_sorted_json<T: Serialize>(value: &T) -> Result<String, IoError> {
    // serde_json's default map is a BTreeMap, so going through `Value` sorts keys
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string_pretty(&v)? + "\n")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    write_text(path, &to_sorted_json(value)?)
}

pub fn sha256_file(path: &Path) -> Result<String, IoError> {
    let bytes = fs::read(path).map_err(|source| IoError::File {
        path: path.to_owned(),
        source,
    })?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub path: String,
    pub kind: String,
    pub sha256: String,
}

/// What a command was run with and what it wrote.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub parameters: BTreeMap<String, serde_json::Value>,
    pub root_seed: u64,
    pub outputs: Vec<OutputRecord>,
    pub tool_version: String,
}

impl RunManifest {
    pub fn new(command: &str, root_seed: u64) -> Self {
        Self {
            command: command.to_owned(),
            parameters: BTreeMap::new(),
            root_seed,
            outputs: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
        }
    }

    pub fn param(&mut self, key: &str, value: impl Into<serde_json::Value>) -> &mut Self {
        self.parameters.insert(key.to_owned(), value.into());
        self
    }

    /// Records an already written file together with its current checksum.
    pub fn add_output(&mut self, path: &Path, kind: &str) -> Result<(), IoError> {
        self.outputs.push(OutputRecord {
            path: path.display().to_string(),
            kind: kind.to_owned(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    /// Re-hashes every listed output.
    pub fn verify(&self) -> Result<(), IoError> {
        for o in &self.outputs {
            if sha256_file(Path::new(&o.path))? != o.sha256 {
                return Err(IoError::ChecksumMismatch { path: o.path.clone() });
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<(), IoError> {
        self.verify()?;
        write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self, IoError> {
        Ok(serde_json::from_str(&read_text(path)?)?)
    }
}

/// Min–max scaling recorded next to a PGM preview.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PgmSidecar {
    pub rows: usize,
    pub cols: usize,
    pub min: f64,
    pub max: f64,
    pub levels: u8,
}

/// 8-bit plain PGM (P2) of `m` with values scaled linearly from `[min, max]` to `[0, 255]`.
pub fn pgm_p2(m: ArrayView2<'_, f64>) -> (String, PgmSidecar) {
    let (min, max) = m
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = max - min;
    let mut out = format!("P2\n{} {}\n255\n", m.ncols(), m.nrows());
    for row in m.rows() {
        let px: Vec<String> = row
            .iter()
            .map(|&v| {
                let level = if span > 0.0 { ((v - min) / span * 255.0).round() } else { 0.0 };
                (level as u8).to_string()
            })
            .collect();
        // plain PGM lines should stay under 70 characters
        for chunk in px.chunks(16) {
            out.push_str(&chunk.join(" "));
            out.push('\n');
        }
    }
    let side = PgmSidecar {
        rows: m.nrows(),
        cols: m.ncols(),
        min,
        max,
        levels: 255,
    };
    (out, side)
}

/// Writes `path` and its sidecar `path.json`; returns the sidecar path.
pub fn write_pgm(path: &Path, m: ArrayView2<'_, f64>) -> Result<PathBuf, IoError> {
    let (text, side) = pgm_p2(m);
    write_text(path, &text)?;
    let mut sidecar = path.as_os_str().to_owned();
    sidecar.push(".json");
    let sidecar = PathBuf::from(sidecar);
    write_json(&sidecar, &side)?;
    Ok(sidecar)
}
