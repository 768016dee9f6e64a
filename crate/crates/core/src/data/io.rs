use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default)]
pub struct CsvOptions {
    /// Skip the first line.
    pub skip_header: bool,
    /// Number of classes; inferred as `max label + 1` (at least 2) when absent.
    pub num_classes: Option<usize>,
}

fn finish(path: &Path, features: Vec<f64>, labels: Vec<usize>, dim: usize, num_classes: Option<usize>) -> Result<Dataset> {
    if labels.is_empty() {
        return Err(Error::malformed(path, "no samples"));
    }
    let inferred = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    let classes = match num_classes {
        Some(c) if labels.iter().any(|&y| y >= c) => {
            return Err(Error::malformed(path, format!("label out of range for {c} classes")))
        }
        Some(c) => c,
        None => inferred,
    };
    Dataset::new(features, labels, dim, classes)
}

/// One sample per row, features first, integer class label in the last column.
pub fn load_csv(path: impl AsRef<Path>, opts: CsvOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(opts.skip_header)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::malformed(path, e.to_string()))?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut dim = None;
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::malformed(path, e.to_string()))?;
        if record.len() < 2 {
            return Err(Error::malformed(path, format!("row {row}: need at least one feature and a label")));
        }
        let d = record.len() - 1;
        if *dim.get_or_insert(d) != d {
            return Err(Error::malformed(path, format!("row {row}: expected {} columns", dim.unwrap_or(d) + 1)));
        }
        for field in record.iter().take(d) {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::malformed(path, format!("row {row}: bad feature {field:?}")))?;
            if !v.is_finite() {
                return Err(Error::malformed(path, format!("row {row}: non-finite feature")));
            }
            features.push(v);
        }
        let raw = &record[d];
        let label: usize = raw
            .parse()
            .map_err(|_| Error::malformed(path, format!("row {row}: bad label {raw:?}")))?;
        labels.push(label);
    }
    finish(path, features, labels, dim.unwrap_or(1), opts.num_classes)
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::malformed(path, "truncated header"))
}

/// Standard big-endian IDX image/label pair; pixels scaled to `[0, 1]`.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let (ipath, lpath) = (images.as_ref(), labels.as_ref());
    let ibytes = std::fs::read(ipath).map_err(|e| Error::io(ipath, e))?;
    let lbytes = std::fs::read(lpath).map_err(|e| Error::io(lpath, e))?;

    if read_u32(&ibytes, 0, ipath)? != IDX_IMAGES {
        return Err(Error::malformed(ipath, "bad magic, expected 0x00000803"));
    }
    if read_u32(&lbytes, 0, lpath)? != IDX_LABELS {
        return Err(Error::malformed(lpath, "bad magic, expected 0x00000801"));
    }
    let n = read_u32(&ibytes, 4, ipath)? as usize;
    let rows = read_u32(&ibytes, 8, ipath)? as usize;
    let cols = read_u32(&ibytes, 12, ipath)? as usize;
    let n_labels = read_u32(&lbytes, 4, lpath)? as usize;
    if n != n_labels {
        return Err(Error::malformed(ipath, format!("{n} images but {n_labels} labels")));
    }
    let dim = rows * cols;
    let pixels = &ibytes[16..];
    if pixels.len() != n * dim {
        return Err(Error::malformed(ipath, format!("expected {} pixel bytes, found {}", n * dim, pixels.len())));
    }
    let label_bytes = &lbytes[8..];
    if label_bytes.len() != n {
        return Err(Error::malformed(lpath, format!("expected {n} label bytes, found {}", label_bytes.len())));
    }
    let features = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels = label_bytes.iter().map(|&l| l as usize).collect();
    finish(ipath, features, labels, dim, None)
}
