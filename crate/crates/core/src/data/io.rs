use std::path::Path;

use super::{Dataset, SplitTag};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Label in the first column, features after it. A first row whose label
/// field is not an integer is treated as a header. `K` is inferred as
/// `max label + 1` unless `k` is given.
pub fn load_csv(path: impl AsRef<Path>, k: Option<usize>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = read(path)?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(&bytes[..]);
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let mut labels = Vec::new();
    let mut data = Vec::new();
    let mut width: Option<usize> = None;
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 1;
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        if rec.iter().all(str::is_empty) {
            continue;
        }
        let label: usize = match rec[0].parse() {
            Ok(y) => y,
            Err(_) if i == 0 => continue,
            Err(e) => return Err(parse_err(line, format!("label '{}': {e}", &rec[0]))),
        };
        let feats = rec.len() - 1;
        match width {
            None => width = Some(feats),
            Some(w) if w != feats => {
                return Err(parse_err(line, format!("row has {feats} features, expected {w}")));
            }
            _ => {}
        }
        for (j, field) in rec.iter().enumerate().skip(1) {
            let v: f64 = field
                .parse()
                .map_err(|e| parse_err(line, format!("column {j} '{field}': {e}")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("column {j} is not finite")));
            }
            data.push(v);
        }
        if let Some(k) = k {
            if label >= k {
                return Err(parse_err(line, format!("label {label} out of range for {k} classes")));
            }
        }
        labels.push(label);
    }
    let width = width.ok_or_else(|| Error::Empty(format!("{}: no data rows", path.display())))?;
    let k = k.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let n = labels.len();
    Dataset::new(Matrix::from_vec(n, width, data)?, labels, k, SplitTag::Full)
}

struct IdxFile<'a> {
    path: &'a Path,
    bytes: Vec<u8>,
}

impl IdxFile<'_> {
    fn err(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Binary {
            path: self.path.to_path_buf(),
            offset,
            msg: msg.into(),
        }
    }

    fn take(&self, offset: usize, len: usize) -> Result<&[u8]> {
        self.bytes.get(offset..offset + len).ok_or_else(|| {
            self.err(
                self.bytes.len(),
                format!("file truncated: needed {len} bytes at offset {offset}"),
            )
        })
    }

    /// Checks the magic number and returns the dimensions and the data offset.
    fn header(&self, magic: u32) -> Result<(Vec<usize>, usize)> {
        let m = self.take(0, 4)?;
        let got = u32::from_be_bytes([m[0], m[1], m[2], m[3]]);
        if got != magic {
            return Err(self.err(0, format!("bad magic 0x{got:08x}, expected 0x{magic:08x}")));
        }
        let ndim = (magic & 0xff) as usize;
        let mut dims = Vec::with_capacity(ndim);
        for d in 0..ndim {
            let b = self.take(4 + 4 * d, 4)?;
            dims.push(u32::from_be_bytes([b[0], b[1], b[2], b[3]]) as usize);
        }
        Ok((dims, 4 + 4 * ndim))
    }
}

/// Classic IDX pair: unsigned-byte images (magic `0x00000803`) scaled to
/// `[0, 1]` and unsigned-byte labels (magic `0x00000801`).
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>, k: Option<usize>) -> Result<Dataset> {
    let img = IdxFile {
        path: images.as_ref(),
        bytes: read(images.as_ref())?,
    };
    let lab = IdxFile {
        path: labels.as_ref(),
        bytes: read(labels.as_ref())?,
    };
    let (dims, off) = img.header(0x0000_0803)?;
    let n = dims[0];
    let width = dims[1] * dims[2];
    let pixels = img.take(off, n * width)?;
    let (ldims, loff) = lab.header(0x0000_0801)?;
    if ldims[0] != n {
        return Err(lab.err(4, format!("{} labels for {n} images", ldims[0])));
    }
    let raw = lab.take(loff, n)?;
    let labels: Vec<usize> = raw.iter().map(|&b| usize::from(b)).collect();
    let k = k.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    if let Some(pos) = labels.iter().position(|&y| y >= k) {
        return Err(lab.err(loff + pos, format!("label {} out of range for {k} classes", labels[pos])));
    }
    let data = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    Dataset::new(Matrix::from_vec(n, width, data)?, labels, k, SplitTag::Full)
}
