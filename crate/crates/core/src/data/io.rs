//! IDX (MNIST-format) and headerless `label,f1,...,fd` CSV ingestion.

use std::fmt::Write as _;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Scalar;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn ingest<T>(offset: usize, message: impl Into<String>) -> Result<T> {
    Err(Error::Ingest {
        offset: offset as u64,
        message: message.into(),
    })
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    match bytes.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]])),
        None => ingest(offset, "truncated header"),
    }
}

/// Parses an IDX image file and its label file. Pixels are scaled to
/// `[0, 1]`; samples have shape `1 × rows × cols`.
pub fn parse_idx<S: Scalar>(images: &[u8], labels: &[u8]) -> Result<Dataset<S>> {
    if images.is_empty() {
        return ingest(0, "empty image file");
    }
    let magic = be_u32(images, 0)?;
    if magic != IDX_IMAGES {
        return ingest(0, format!("image magic {magic:#010x}, expected {IDX_IMAGES:#010x}"));
    }
    let n = be_u32(images, 4)? as usize;
    let rows = be_u32(images, 8)? as usize;
    let cols = be_u32(images, 12)? as usize;
    let body = &images[16..];
    let need = n * rows * cols;
    if body.len() != need {
        return ingest(
            16 + body.len().min(need),
            format!("expected {need} pixel bytes, found {}", body.len()),
        );
    }

    if labels.is_empty() {
        return ingest(0, "empty label file");
    }
    let lmagic = be_u32(labels, 0)?;
    if lmagic != IDX_LABELS {
        return ingest(0, format!("label magic {lmagic:#010x}, expected {IDX_LABELS:#010x}"));
    }
    let ln = be_u32(labels, 4)? as usize;
    if ln != n {
        return ingest(4, format!("{ln} labels for {n} images"));
    }
    let lbody = &labels[8..];
    if lbody.len() != n {
        return ingest(
            8 + lbody.len().min(n),
            format!("expected {n} label bytes, found {}", lbody.len()),
        );
    }
    if n == 0 {
        return ingest(4, "no samples");
    }
    let labels: Vec<usize> = lbody.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(1, |m| m + 1);
    let scale = S::of(1.0 / 255.0);
    let data = body.iter().map(|&b| S::of(b as f64) * scale).collect();
    Dataset::new(Tensor::new(vec![n, 1, rows, cols], data)?, labels, num_classes)
}

pub fn load_idx<S: Scalar>(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset<S>> {
    let img = std::fs::read(images)?;
    let lab = std::fs::read(labels)?;
    parse_idx(&img, &lab)
}

/// Parses headerless `label,f1,...,fd` rows. Features are taken as-is.
pub fn parse_csv<S: Scalar>(text: &str) -> Result<Dataset<S>> {
    let mut labels = Vec::new();
    let mut data = Vec::new();
    let mut width: Option<usize> = None;
    let mut offset = 0usize;
    for line in text.split_inclusive('\n') {
        let start = offset;
        offset += line.len();
        let body = line.trim_end_matches(['\n', '\r']);
        if body.trim().is_empty() {
            continue;
        }
        let mut fields = body.split(',');
        let label_field = fields.next().unwrap_or("").trim();
        let label: usize = match label_field.parse() {
            Ok(l) => l,
            Err(_) => return ingest(start, format!("bad label {label_field:?}")),
        };
        let mut count = 0;
        let mut col = start + label_field.len() + 1;
        for f in fields {
            match f.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => data.push(S::of(v)),
                _ => return ingest(col, format!("bad feature {f:?}")),
            }
            col += f.len() + 1;
            count += 1;
        }
        if count == 0 {
            return ingest(start, "row has no features");
        }
        match width {
            None => width = Some(count),
            Some(w) if w != count => return ingest(start, format!("row has {count} features, expected {w}")),
            _ => {}
        }
        labels.push(label);
    }
    let Some(d) = width else {
        return ingest(0, "no rows");
    };
    let num_classes = labels.iter().max().map_or(1, |m| m + 1);
    Dataset::new(Tensor::new(vec![labels.len(), d], data)?, labels, num_classes)
}

pub fn load_csv<S: Scalar>(path: impl AsRef<Path>) -> Result<Dataset<S>> {
    parse_csv(&std::fs::read_to_string(path)?)
}

/// Writes the flat CSV form; image samples are flattened row-major.
pub fn write_csv<S: Scalar>(dataset: &Dataset<S>, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for i in 0..dataset.len() {
        write!(out, "{}", dataset.labels()[i]).unwrap();
        for v in dataset.sample(i) {
            write!(out, ",{}", v.as_f64()).unwrap();
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
