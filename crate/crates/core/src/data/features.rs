//! Binary feature files.
//!
//! Layout (little-endian):
//!
//! | offset | size      | field                                             |
//! |--------|-----------|---------------------------------------------------|
//! | 0      | 4         | magic `UCFV`                                      |
//! | 4      | 4         | `u32` version (= 1)                               |
//! | 8      | 4         | `u32` row count `n`                               |
//! | 12     | 4         | `u32` dimension `d`                               |
//! | 16     | 1         | flags: bit 0 rows normalized, bit 1 labels present|
//! | 17     | 3         | zero padding                                      |
//! | 20     | `4·n·d`   | `f32` row-major data                              |
//! | …      | `4·n`     | `u32` labels, only when bit 1 is set              |

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};
use ndarray::{Array2, ArrayView2};

use crate::error::{ensure, Error, Result};

pub const MAGIC: [u8; 4] = *b"UCFV";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;

const FLAG_NORMALIZED: u8 = 1 << 0;
const FLAG_LABELS: u8 = 1 << 1;

/// Rows count as unit-norm when their L2 norm is within this of 1.
pub const NORM_TOLERANCE: f64 = 1e-4;

/// Contents of one feature file.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub data: Array2<f32>,
    pub labels: Option<Vec<u32>>,
    pub normalized: bool,
}

impl FeatureFile {
    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }
}

fn row_norm(row: ndarray::ArrayView1<f32>) -> f64 {
    row.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

/// True when every row has unit L2 norm within [`NORM_TOLERANCE`].
pub fn rows_are_unit(data: ArrayView2<f32>) -> bool {
    data.rows()
        .into_iter()
        .all(|r| (row_norm(r) - 1.0).abs() <= NORM_TOLERANCE)
}

/// Scales every row to unit L2 norm in place. Zero rows are rejected.
pub fn normalize_rows(data: &mut Array2<f32>) -> Result<()> {
    for (i, mut row) in data.rows_mut().into_iter().enumerate() {
        let norm = row_norm(row.view());
        ensure!(norm > 0.0 && norm.is_finite(), "row {i} cannot be normalized (norm {norm})");
        row.mapv_inplace(|x| (f64::from(x) / norm) as f32);
    }
    Ok(())
}

/// Writes `vectors` (and optional labels) to `path`.
///
/// Values are stored untouched; the normalized flag is set when every row
/// already has unit norm.
pub fn write_features(vectors: ArrayView2<f32>, labels: Option<&[u32]>, path: &Path) -> Result<()> {
    let (n, d) = vectors.dim();
    ensure!(n > 0, "feature matrix has no rows");
    ensure!(d > 0, "feature matrix has zero dimension");
    ensure!(
        u32::try_from(n).is_ok() && u32::try_from(d).is_ok(),
        "feature matrix {n}x{d} exceeds the u32 header range"
    );
    if let Some((i, _)) = vectors.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Validation(format!(
            "non-finite value at row {}, column {}",
            i / d,
            i % d
        )));
    }
    if let Some(l) = labels {
        ensure!(l.len() == n, "{} labels for {n} rows", l.len());
    }

    let mut flags = 0u8;
    if rows_are_unit(vectors) {
        flags |= FLAG_NORMALIZED;
    }
    if labels.is_some() {
        flags |= FLAG_LABELS;
    }

    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(&MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(VERSION).map_err(io)?;
    w.write_u32::<LittleEndian>(n as u32).map_err(io)?;
    w.write_u32::<LittleEndian>(d as u32).map_err(io)?;
    w.write_all(&[flags, 0, 0, 0]).map_err(io)?;
    for &x in vectors.iter() {
        w.write_f32::<LittleEndian>(x).map_err(io)?;
    }
    if let Some(l) = labels {
        for &y in l {
            w.write_u32::<LittleEndian>(y).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Reads and validates a feature file.
pub fn read_features(path: &Path) -> Result<FeatureFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Reads only the header: `(n, d, normalized, has_labels)`.
pub fn read_header(path: &Path) -> Result<(usize, usize, bool, bool)> {
    use std::io::Read;
    let mut head = [0u8; HEADER_LEN];
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let got = f.read(&mut head).map_err(|e| Error::io(path, e))?;
    parse_header(&head[..got], path)
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<(usize, usize, bool, bool)> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            path: path.into(),
            expected: HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("slice of 4");
    if magic != MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            found: magic,
            expected: MAGIC,
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.into(),
            expected: HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let version = LittleEndian::read_u32(&bytes[4..8]);
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.into(),
            found: version,
            supported: VERSION,
        });
    }
    let n = LittleEndian::read_u32(&bytes[8..12]) as usize;
    let d = LittleEndian::read_u32(&bytes[12..16]) as usize;
    let flags = bytes[16];
    if flags & !(FLAG_NORMALIZED | FLAG_LABELS) != 0 {
        return Err(Error::Corrupt {
            path: path.into(),
            reason: format!("unknown flag bits {flags:#04x}"),
        });
    }
    if n == 0 || d == 0 {
        return Err(Error::Corrupt {
            path: path.into(),
            reason: format!("empty feature matrix ({n}x{d})"),
        });
    }
    Ok((n, d, flags & FLAG_NORMALIZED != 0, flags & FLAG_LABELS != 0))
}

fn decode(bytes: &[u8], path: &Path) -> Result<FeatureFile> {
    let (n, d, normalized, has_labels) = parse_header(bytes, path)?;
    let payload = 4 * n as u64 * d as u64 + if has_labels { 4 * n as u64 } else { 0 };
    let expected = HEADER_LEN as u64 + payload;
    let actual = bytes.len() as u64;
    if actual < expected {
        return Err(Error::Truncated {
            path: path.into(),
            expected,
            actual,
        });
    }
    if actual > expected {
        return Err(Error::Corrupt {
            path: path.into(),
            reason: format!("{} trailing bytes after payload", actual - expected),
        });
    }

    let body = &bytes[HEADER_LEN..];
    let mut values = vec![0f32; n * d];
    LittleEndian::read_f32_into(&body[..4 * n * d], &mut values);
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Corrupt {
            path: path.into(),
            reason: format!("non-finite value at row {}, column {}", i / d, i % d),
        });
    }
    let data = Array2::from_shape_vec((n, d), values).expect("shape checked");

    let labels = has_labels.then(|| {
        let mut l = vec![0u32; n];
        LittleEndian::read_u32_into(&body[4 * n * d..], &mut l);
        l
    });

    if normalized {
        if let Some((i, r)) = data
            .rows()
            .into_iter()
            .enumerate()
            .find(|(_, r)| (row_norm(r.view()) - 1.0).abs() > NORM_TOLERANCE)
        {
            return Err(Error::Corrupt {
                path: path.into(),
                reason: format!(
                    "normalized flag set but row {i} has norm {}",
                    row_norm(r.view())
                ),
            });
        }
    }

    Ok(FeatureFile {
        data,
        labels,
        normalized,
    })
}
