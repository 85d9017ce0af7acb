//! Import of `.npy` arrays and whitespace-separated text into DSUK matrices.

use dsu_core::{Error, FeatureMatrix, Result};

const NPY_MAGIC: &[u8] = b"\x93NUMPY";

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

struct NpyHeader {
    little_endian: bool,
    width: usize,
    fortran: bool,
    shape: Vec<usize>,
}

fn dict_value<'a>(dict: &'a str, key: &str) -> Option<&'a str> {
    let pat = format!("'{key}':");
    let start = dict.find(&pat)? + pat.len();
    Some(dict[start..].trim_start())
}

fn parse_header(dict: &str, offset: usize) -> Result<NpyHeader> {
    let descr = dict_value(dict, "descr")
        .and_then(|v| v.strip_prefix('\''))
        .and_then(|v| v.split('\'').next())
        .ok_or_else(|| format_err(offset, "npy header has no descr"))?;
    let (little_endian, width) = match descr {
        "<f8" | "=f8" => (true, 8),
        ">f8" => (false, 8),
        "<f4" | "=f4" => (true, 4),
        ">f4" => (false, 4),
        other => return Err(format_err(offset, format!("unsupported npy dtype {other:?}; expected f4 or f8"))),
    };
    let fortran = match dict_value(dict, "fortran_order") {
        Some(v) if v.starts_with("False") => false,
        Some(v) if v.starts_with("True") => true,
        _ => return Err(format_err(offset, "npy header has no fortran_order")),
    };
    let shape_text = dict_value(dict, "shape")
        .and_then(|v| v.strip_prefix('('))
        .and_then(|v| v.split(')').next())
        .ok_or_else(|| format_err(offset, "npy header has no shape"))?;
    let shape = shape_text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| format_err(offset, format!("bad npy dimension {s:?}"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(NpyHeader {
        little_endian,
        width,
        fortran,
        shape,
    })
}

/// Reads a 1-D or 2-D float32/float64 `.npy` array. A 1-D array becomes a
/// single column.
pub fn decode_npy(bytes: &[u8]) -> Result<FeatureMatrix> {
    if bytes.len() < 10 || &bytes[..6] != NPY_MAGIC {
        return Err(format_err(0, "not an npy file"));
    }
    let major = bytes[6];
    let (header_len, data_start): (usize, usize) = match major {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 => {
            if bytes.len() < 12 {
                return Err(format_err(8, "truncated npy header"));
            }
            (u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize, 12)
        }
        v => return Err(format_err(6, format!("unsupported npy version {v}"))),
    };
    let body = data_start
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| format_err(data_start, "truncated npy header"))?;
    let dict = std::str::from_utf8(&bytes[data_start..body])
        .map_err(|_| format_err(data_start, "npy header is not text"))?;
    let h = parse_header(dict, data_start)?;
    let (rows, cols) = match h.shape[..] {
        [n] => (n, 1),
        [r, c] => (r, c),
        _ => return Err(format_err(data_start, format!("expected a 1-D or 2-D array, got shape {:?}", h.shape))),
    };
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| format_err(data_start, "npy shape overflows"))?;
    let payload = &bytes[body..];
    if payload.len() != n * h.width {
        return Err(format_err(
            body,
            format!("payload length mismatch: expected {} bytes, found {}", n * h.width, payload.len()),
        ));
    }
    let read = |chunk: &[u8]| -> f64 {
        match (h.width, h.little_endian) {
            (8, true) => f64::from_le_bytes(chunk.try_into().unwrap()),
            (8, false) => f64::from_be_bytes(chunk.try_into().unwrap()),
            (_, true) => f32::from_le_bytes(chunk.try_into().unwrap()) as f64,
            (_, false) => f32::from_be_bytes(chunk.try_into().unwrap()) as f64,
        }
    };
    let flat: Vec<f64> = payload.chunks_exact(h.width).map(read).collect();
    let values = if h.fortran && cols > 1 {
        let mut out = vec![0.0; n];
        for c in 0..cols {
            for r in 0..rows {
                out[r * cols + c] = flat[c * rows + r];
            }
        }
        out
    } else {
        flat
    };
    FeatureMatrix::new(rows, cols, values)
}

/// Parses one frame per line of whitespace-separated numbers. Blank lines
/// and lines starting with `#` are skipped.
pub fn parse_text_matrix(text: &str) -> Result<FeatureMatrix> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::Data(format!("line {}: {t:?} is not a number", i + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Data(format!(
                    "line {}: expected {} values, found {}",
                    i + 1,
                    first.len(),
                    row.len()
                )));
            }
        }
        rows.push(row);
    }
    FeatureMatrix::from_rows(&rows)
}
