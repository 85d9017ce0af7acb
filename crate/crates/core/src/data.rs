//! Feature matrices, utterance manifests and frame-aligned labels.
//!
//! Feature file layout (little-endian, 24-byte header):
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 4    | magic `DSUK`                   |
//! | 4      | 2    | format version (1)             |
//! | 6      | 2    | dtype code (1 = float64)       |
//! | 8      | 8    | rows (u64)                     |
//! | 16     | 8    | cols (u64)                     |
//! | 24     | 8·rows·cols | row-major float64 payload |

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::container::{self, Reader};
use crate::error::{Error, Result};

pub const MATRIX_MAGIC: &[u8; 4] = b"DSUK";
pub const MATRIX_VERSION: u16 = 1;
pub const DTYPE_F64: u16 = 1;
pub const MATRIX_HEADER_LEN: usize = 24;

/// A dense `rows × cols` matrix of finite `f64` values in row-major order.
///
/// Rows are frames, columns are feature dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Data(format!("empty matrix ({rows}x{cols})")));
        }
        if rows.checked_mul(cols) != Some(values.len()) {
            return Err(Error::Data(format!(
                "{} values do not fill a {rows}x{cols} matrix",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value at row {}, col {}",
                i / cols,
                i % cols
            )));
        }
        Ok(FeatureMatrix { rows, cols, values })
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut values = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Data(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            values.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, values)
    }

    /// Internal constructor for values produced by finite arithmetic on
    /// already validated inputs.
    pub(crate) fn from_parts(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, values.len());
        FeatureMatrix { rows, cols, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn row_iter(&self) -> std::slice::ChunksExact<'_, f64> {
        self.values.chunks_exact(self.cols)
    }

    /// Stacks matrices vertically, preserving their order.
    pub fn concat(parts: &[FeatureMatrix]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Data("nothing to concatenate".into()))?;
        let cols = first.cols;
        let mut values = Vec::with_capacity(parts.iter().map(|p| p.values.len()).sum());
        for p in parts {
            if p.cols != cols {
                return Err(Error::Dimension {
                    expected: cols,
                    actual: p.cols,
                });
            }
            values.extend_from_slice(&p.values);
        }
        Ok(Self::from_parts(values.len() / cols, cols, values))
    }

    /// Returns the sub-matrix made of the given rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Data("empty row selection".into()));
        }
        let mut values = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::param(format!(
                    "row {i} out of range for {} rows",
                    self.rows
                )));
            }
            values.extend_from_slice(self.row(i));
        }
        Ok(Self::from_parts(indices.len(), self.cols, values))
    }

    pub(crate) fn check_cols(&self, expected: usize) -> Result<()> {
        if self.cols != expected {
            return Err(Error::Dimension {
                expected,
                actual: self.cols,
            });
        }
        Ok(())
    }
}

/// Serializes a matrix into the `DSUK` byte layout.
pub fn encode_matrix(m: &FeatureMatrix) -> Vec<u8> {
    let mut buf = Vec::with_capacity(MATRIX_HEADER_LEN + m.values.len() * 8);
    buf.extend_from_slice(MATRIX_MAGIC);
    buf.extend_from_slice(&MATRIX_VERSION.to_le_bytes());
    buf.extend_from_slice(&DTYPE_F64.to_le_bytes());
    buf.extend_from_slice(&(m.rows as u64).to_le_bytes());
    buf.extend_from_slice(&(m.cols as u64).to_le_bytes());
    for v in &m.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

/// Parses the `DSUK` byte layout.
pub fn decode_matrix(bytes: &[u8]) -> Result<FeatureMatrix> {
    if bytes.len() < MATRIX_HEADER_LEN {
        return Err(Error::format(
            bytes.len() as u64,
            format!(
                "truncated header: expected {MATRIX_HEADER_LEN} bytes, found {}",
                bytes.len()
            ),
        ));
    }
    let mut r = Reader::new(bytes);
    let version = r.header(MATRIX_MAGIC)?;
    if version != MATRIX_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let dtype = r.u16("dtype")?;
    if dtype != DTYPE_F64 {
        return Err(Error::format(6, format!("unsupported dtype code {dtype}")));
    }
    let rows = r.u64("rows")?;
    let cols = r.u64("cols")?;
    if rows == 0 || cols == 0 {
        return Err(Error::format(
            if rows == 0 { 8 } else { 16 },
            format!("empty matrix ({rows}x{cols})"),
        ));
    }
    let rows = container::dim(rows, 8, "rows")?;
    let cols = container::dim(cols, 16, "cols")?;
    let count = container::product(rows, cols, 8)?;
    let expected = MATRIX_HEADER_LEN + count * 8;
    if bytes.len() != expected {
        return Err(Error::format(
            bytes.len().min(expected) as u64,
            format!(
                "payload length mismatch: expected {expected} bytes in total, found {}",
                bytes.len()
            ),
        ));
    }
    let values = r.f64s(count, "payload")?;
    Ok(FeatureMatrix::from_parts(rows, cols, values))
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let bytes = container::read_file(path)?;
    decode_matrix(&bytes).map_err(|e| match e {
        Error::Format { offset, message } => Error::Format {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

pub fn write_matrix(m: &FeatureMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_matrix(m)).map_err(|e| Error::io(path, e))
}

/// Number of rows kept when sampling `fraction` of `total` rows: rounded
/// half up, at least one.
pub fn sample_size(total: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::param(format!(
            "sample fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let n = (fraction * total as f64 + 0.5).floor() as usize;
    Ok(n.clamp(1, total.max(1)))
}

/// Draws `round(fraction·T)` distinct rows uniformly at random, keeping
/// their original relative order.
pub fn sample_frames(m: &FeatureMatrix, fraction: f64, seed: u64) -> Result<FeatureMatrix> {
    let n = sample_size(m.rows, fraction)?;
    if n == m.rows {
        return Ok(m.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, m.rows, n).into_vec();
    idx.sort_unstable();
    m.select_rows(&idx)
}

/// One line of an utterance manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub frames: usize,
    pub duration_s: f64,
}

/// Ordered list of utterances: `id<TAB>path<TAB>frames<TAB>duration_s`.
///
/// Relative feature paths are resolved against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct UtteranceManifest {
    pub entries: Vec<ManifestEntry>,
}

fn tsv_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, line)| {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            None
        } else {
            Some((i + 1, line.split('\t').collect()))
        }
    })
}

impl UtteranceManifest {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (lineno, fields) in tsv_lines(text) {
            if fields.len() != 4 {
                return Err(Error::Data(format!(
                    "manifest line {lineno}: expected 4 tab-separated fields, found {}",
                    fields.len()
                )));
            }
            let id = fields[0].to_string();
            if !seen.insert(id.clone()) {
                return Err(Error::Data(format!(
                    "manifest line {lineno}: duplicate utterance id {id:?}"
                )));
            }
            let path = Path::new(fields[1]);
            let path = if path.is_relative() {
                base_dir.join(path)
            } else {
                path.to_path_buf()
            };
            let frames = fields[2].parse::<usize>().map_err(|e| {
                Error::Data(format!("manifest line {lineno}: bad frame count: {e}"))
            })?;
            let duration_s = fields[3]
                .parse::<f64>()
                .map_err(|e| Error::Data(format!("manifest line {lineno}: bad duration: {e}")))?;
            if !(duration_s > 0.0 && duration_s.is_finite()) {
                return Err(Error::Data(format!(
                    "manifest line {lineno}: duration must be positive, got {duration_s}"
                )));
            }
            entries.push(ManifestEntry {
                id,
                path,
                frames,
                duration_s,
            });
        }
        Ok(UtteranceManifest { entries })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}",
                e.id,
                e.path.display(),
                e.frames,
                e.duration_s
            );
        }
        out
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Loads every non-empty utterance, checking frame counts against the
    /// manifest. Entries with zero frames yield `None`.
    pub fn load_features(&self) -> Result<Vec<Option<FeatureMatrix>>> {
        let mut out = Vec::with_capacity(self.entries.len());
        let mut dim = None;
        for e in &self.entries {
            if e.frames == 0 {
                out.push(None);
                continue;
            }
            let m = read_matrix(&e.path)?;
            if m.rows() != e.frames {
                return Err(Error::Data(format!(
                    "utterance {:?}: manifest says {} frames, file has {}",
                    e.id,
                    e.frames,
                    m.rows()
                )));
            }
            match dim {
                None => dim = Some(m.cols()),
                Some(d) if d != m.cols() => {
                    return Err(Error::Dimension {
                        expected: d,
                        actual: m.cols(),
                    })
                }
                _ => {}
            }
            out.push(Some(m));
        }
        Ok(out)
    }
}

/// A labeled frame span `[start, end)` within one utterance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSegment {
    pub utterance_id: String,
    pub start: usize,
    pub end: usize,
    pub label: String,
}

/// Parses `id<TAB>start<TAB>end<TAB>label` lines.
pub fn parse_labels(text: &str) -> Result<Vec<LabeledSegment>> {
    let mut out = Vec::new();
    for (lineno, fields) in tsv_lines(text) {
        if fields.len() != 4 {
            return Err(Error::Data(format!(
                "label line {lineno}: expected 4 tab-separated fields, found {}",
                fields.len()
            )));
        }
        let parse = |s: &str, what: &str| {
            s.parse::<usize>()
                .map_err(|e| Error::Data(format!("label line {lineno}: bad {what}: {e}")))
        };
        let start = parse(fields[1], "start frame")?;
        let end = parse(fields[2], "end frame")?;
        if start >= end {
            return Err(Error::Data(format!(
                "label line {lineno}: empty segment [{start}, {end})"
            )));
        }
        out.push(LabeledSegment {
            utterance_id: fields[0].to_string(),
            start,
            end,
            label: fields[3].to_string(),
        });
    }
    Ok(out)
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<LabeledSegment>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text)
}
