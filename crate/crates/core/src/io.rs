//! On-disk formats: binary tensor stacks, text label files and JSON models.
//!
//! Byte layouts are documented in `docs/formats.md`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{ContractionFactors, KernelFactors, ModelParams};
use crate::optim::FitConfig;
use crate::tensor::{Matrix, Tensor3};

pub const TENSOR_MAGIC: [u8; 8] = *b"TGPST\0v1";
pub const DTYPE_F64_LE: u8 = 1;
pub const TENSOR_HEADER_LEN: usize = 25;
pub const MODEL_FORMAT: &str = "tgpst-model-v1";

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Serializes tensors of equal dims; an empty list is written with dims 0.
pub fn encode_tensors(tensors: &[Tensor3]) -> Result<Vec<u8>> {
    let dims = tensors.first().map_or((0, 0, 0), |t| t.dims());
    if let Some(i) = tensors.iter().position(|t| t.dims() != dims) {
        return Err(Error::shape(format!(
            "tensor {i} has dims {:?}, expected {dims:?}",
            tensors[i].dims()
        )));
    }
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::shape(format!("{what} {v} does not fit in u32")))
    };
    let per = dims.0 * dims.1 * dims.2;
    let mut out = Vec::with_capacity(TENSOR_HEADER_LEN + 8 * per * tensors.len());
    out.extend_from_slice(&TENSOR_MAGIC);
    out.push(DTYPE_F64_LE);
    out.extend_from_slice(&to_u32(tensors.len(), "tensor count")?.to_le_bytes());
    for d in [dims.0, dims.1, dims.2] {
        out.extend_from_slice(&to_u32(d, "dimension")?.to_le_bytes());
    }
    for t in tensors {
        for v in t.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses a tensor file image; `path` only labels errors.
pub fn decode_tensors(bytes: &[u8], path: &Path) -> Result<Vec<Tensor3>> {
    let format = |offset: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message,
    };
    let magic_len = bytes.len().min(TENSOR_MAGIC.len());
    if bytes[..magic_len] != TENSOR_MAGIC[..magic_len] {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
        });
    }
    if bytes.len() < TENSOR_HEADER_LEN {
        return Err(format(
            bytes.len(),
            format!(
                "truncated header: {} of {TENSOR_HEADER_LEN} bytes",
                bytes.len()
            ),
        ));
    }
    if bytes[8] != DTYPE_F64_LE {
        return Err(format(8, format!("unsupported dtype code {}", bytes[8])));
    }
    let word = |at: usize| {
        u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice")) as usize
    };
    let (n, h, w, c) = (word(9), word(13), word(17), word(21));
    if n == 0 {
        if bytes.len() != TENSOR_HEADER_LEN {
            return Err(format(
                TENSOR_HEADER_LEN,
                "trailing bytes after an empty tensor list".into(),
            ));
        }
        return Ok(Vec::new());
    }
    if h == 0 || w == 0 || c == 0 {
        return Err(format(13, format!("zero dimension in ({h}, {w}, {c})")));
    }
    let per = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| format(13, "tensor dims overflow".into()))?;
    let payload = per
        .checked_mul(n)
        .and_then(|v| v.checked_mul(8))
        .ok_or_else(|| format(9, "payload size overflows".into()))?;
    let available = bytes.len() - TENSOR_HEADER_LEN;
    if available < payload {
        return Err(format(
            bytes.len(),
            format!("truncated payload: header promises {payload} bytes, found {available}"),
        ));
    }
    if available > payload {
        return Err(format(
            TENSOR_HEADER_LEN + payload,
            format!("{} trailing bytes after payload", available - payload),
        ));
    }
    bytes[TENSOR_HEADER_LEN..]
        .chunks_exact(8 * per)
        .map(|chunk| {
            let data = chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte slice")))
                .collect();
            Tensor3::from_vec((h, w, c), data)
        })
        .collect()
}

pub fn write_tensors(path: impl AsRef<Path>, tensors: &[Tensor3]) -> Result<()> {
    write_bytes(path.as_ref(), &encode_tensors(tensors)?)
}

pub fn read_tensors(path: impl AsRef<Path>) -> Result<Vec<Tensor3>> {
    let path = path.as_ref();
    decode_tensors(&read_bytes(path)?, path)
}

/// One value per line in shortest round-trip decimal form.
pub fn encode_labels(labels: &[f64]) -> String {
    labels.iter().map(|v| format!("{v}\n")).collect()
}

/// Parses one number per line; blank lines are skipped.
pub fn decode_labels(text: &str, path: &Path) -> Result<Vec<f64>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse::<f64>().map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("{:?} is not a number ({e})", l.trim()),
            })
        })
        .collect()
}

pub fn write_labels(path: impl AsRef<Path>, labels: &[f64]) -> Result<()> {
    write_bytes(path.as_ref(), encode_labels(labels).as_bytes())
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        offset: e.utf8_error().valid_up_to() as u64,
        message: "labels file is not UTF-8".into(),
    })?;
    decode_labels(&text, path)
}

/// Serialized model document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format: String,
    pub input_dims: [usize; 3],
    pub latent_dims: [usize; 2],
    pub ranks: [usize; 3],
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub u1: Vec<Vec<f64>>,
    pub u2: Vec<Vec<f64>>,
    pub u3: Vec<Vec<f64>>,
    pub log_sigma: f64,
    pub fit_config: Option<FitConfig>,
}

#[derive(Deserialize)]
struct FormatTag {
    format: Option<String>,
}

fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], shape: (usize, usize), name: &str) -> Result<Matrix> {
    let cols = rows.first().map_or(0, |r| r.len());
    if rows.len() != shape.0 || rows.iter().any(|r| r.len() != cols) || cols != shape.1 {
        return Err(Error::shape(format!(
            "matrix {name} must be {}x{} with equal-length rows",
            shape.0, shape.1
        )));
    }
    Ok(Matrix::from_fn(shape.0, shape.1, |i, j| rows[i][j]))
}

impl ModelFile {
    pub fn new(p: &ModelParams, config: Option<&FitConfig>) -> Result<Self> {
        p.validate()?;
        let (big_h, big_w, c) = p.input_dims();
        let (h, w) = p.latent_dims();
        let (r1, r2, r3) = p.kernels.ranks();
        Ok(ModelFile {
            format: MODEL_FORMAT.to_string(),
            input_dims: [big_h, big_w, c],
            latent_dims: [h, w],
            ranks: [r1, r2, r3],
            a: to_rows(&p.contraction.a),
            b: to_rows(&p.contraction.b),
            u1: to_rows(&p.kernels.u1),
            u2: to_rows(&p.kernels.u2),
            u3: to_rows(&p.kernels.u3),
            log_sigma: p.log_sigma,
            fit_config: config.cloned(),
        })
    }

    pub fn params(&self) -> Result<ModelParams> {
        let [big_h, big_w, c] = self.input_dims;
        let [h, w] = self.latent_dims;
        let [r1, r2, r3] = self.ranks;
        if h > big_h || w > big_w {
            return Err(Error::shape(format!(
                "latent dims ({h}, {w}) exceed input dims ({big_h}, {big_w})"
            )));
        }
        let p = ModelParams {
            contraction: ContractionFactors {
                a: from_rows(&self.a, (h, big_h), "a")?,
                b: from_rows(&self.b, (w, big_w), "b")?,
            },
            kernels: KernelFactors {
                u1: from_rows(&self.u1, (r1, h), "u1")?,
                u2: from_rows(&self.u2, (r2, w), "u2")?,
                u3: from_rows(&self.u3, (r3, c), "u3")?,
            },
            log_sigma: self.log_sigma,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("model documents always serialize");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let parse_err = |e: serde_json::Error| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        };
        let tag: FormatTag = serde_json::from_str(text).map_err(parse_err)?;
        match tag.format.as_deref() {
            Some(MODEL_FORMAT) => {}
            found => {
                return Err(Error::Version {
                    path: path.to_path_buf(),
                    found: found.unwrap_or("<missing>").to_string(),
                    expected: MODEL_FORMAT,
                })
            }
        }
        serde_json::from_str(text).map_err(parse_err)
    }
}

pub fn write_model(
    path: impl AsRef<Path>,
    p: &ModelParams,
    config: Option<&FitConfig>,
) -> Result<()> {
    write_bytes(
        path.as_ref(),
        ModelFile::new(p, config)?.to_json().as_bytes(),
    )
}

pub fn read_model_file(path: impl AsRef<Path>) -> Result<ModelFile> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        offset: e.utf8_error().valid_up_to() as u64,
        message: "model file is not UTF-8".into(),
    })?;
    ModelFile::from_json(&text, path)
}

pub fn read_model(path: impl AsRef<Path>) -> Result<ModelParams> {
    read_model_file(path)?.params()
}
