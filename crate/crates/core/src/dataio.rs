//! Feature / label datasets, their on-disk formats, and a synthetic
//! clustered-data generator.
//!
//! On-disk layouts (all little-endian):
//!
//! Feature file (`CIBF`):
//! ```text
//! magic "CIBF", u32 version=1, u64 rows, u32 cols,
//! rows*cols f32 values, row-major
//! ```
//!
//! Label file (`CIBL`):
//! ```text
//! magic "CIBL", u32 version=1, u64 rows,
//! per row: u16 count, count * u32 class ids (strictly ascending)
//! ```
//!
//! CSV ingestion is for small tests: one all-numeric row per item, with an
//! optional final `label` column when a header is present.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::stream::{rng_for, tag};

pub const FEATURE_MAGIC: [u8; 4] = *b"CIBF";
pub const LABEL_MAGIC: [u8; 4] = *b"CIBL";
pub const FORMAT_VERSION: u32 = 1;

/// Per-item sorted, deduplicated class-id lists. An empty list marks an
/// unlabeled item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    items: Vec<Vec<u32>>,
}

impl LabelSet {
    /// Normalizes each list (sort + dedup).
    pub fn from_raw(mut items: Vec<Vec<u32>>) -> Self {
        for list in &mut items {
            list.sort_unstable();
            list.dedup();
        }
        Self { items }
    }

    /// All items unlabeled.
    pub fn unlabeled(n: usize) -> Self {
        Self {
            items: vec![Vec::new(); n],
        }
    }

    /// One single-label item per entry.
    pub fn single(labels: impl IntoIterator<Item = u32>) -> Self {
        Self {
            items: labels.into_iter().map(|c| vec![c]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, i: usize) -> &[u32] {
        &self.items[i]
    }

    /// The class id of a single-label item; `None` when the item has zero or
    /// several labels.
    pub fn single_class(&self, i: usize) -> Option<u32> {
        match self.items[i].as_slice() {
            [c] => Some(*c),
            _ => None,
        }
    }

    /// Whether item `i` of `self` shares any class with item `j` of `other`.
    pub fn intersects(&self, i: usize, other: &LabelSet, j: usize) -> bool {
        let (mut a, mut b) = (self.items[i].iter(), other.items[j].iter());
        let (mut x, mut y) = (a.next(), b.next());
        while let (Some(&u), Some(&v)) = (x, y) {
            match u.cmp(&v) {
                std::cmp::Ordering::Less => x = a.next(),
                std::cmp::Ordering::Greater => y = b.next(),
                std::cmp::Ordering::Equal => return true,
            }
        }
        false
    }
}

/// An n×d feature matrix plus per-item label sets. The stand-in for raw
/// inputs: any upstream embedding can be dropped in as rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    features: Matrix,
    labels: LabelSet,
}

impl FeatureDataset {
    pub fn new(features: Matrix, labels: LabelSet) -> Result<Self> {
        if features.rows() == 0 || features.cols() == 0 {
            return Err(Error::Malformed(
                "dataset must have at least one row and one column".into(),
            ));
        }
        if labels.len() != features.rows() {
            return Err(Error::Malformed(format!(
                "label count {} does not match row count {}",
                labels.len(),
                features.rows()
            )));
        }
        if let Some((row, col)) = features.first_non_finite() {
            return Err(Error::NonFinite { row, col });
        }
        Ok(Self { features, labels })
    }

    pub fn n(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &LabelSet {
        &self.labels
    }

    pub fn with_labels(self, labels: LabelSet) -> Result<Self> {
        Self::new(self.features, labels)
    }

    /// Population standard deviation of each dimension.
    pub fn dim_std(&self) -> Vec<f64> {
        let (n, d) = (self.n(), self.dim());
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, &v) in mean.iter_mut().zip(self.features.row(r)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; d];
        for r in 0..n {
            for ((s, &v), &m) in var.iter_mut().zip(self.features.row(r)).zip(&mean) {
                let c = v - m;
                *s += c * c;
            }
        }
        var.iter().map(|&s| (s / n as f64).sqrt()).collect()
    }
}

/// Recipe for a synthetic clustered dataset: Gaussian blobs with unit
/// within-cluster std around centers placed `separation` from the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub clusters: usize,
    pub dim: usize,
    pub per_cluster: usize,
    pub separation: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.clusters < 2 {
            return Err(Error::InvalidConfig("clusters must be >= 2".into()));
        }
        if self.per_cluster < 2 {
            return Err(Error::InvalidConfig("per_cluster must be >= 2".into()));
        }
        if self.dim == 0 {
            return Err(Error::InvalidConfig("dim must be >= 1".into()));
        }
        if !(self.separation > 0.0) {
            return Err(Error::InvalidConfig("separation must be > 0".into()));
        }
        Ok(())
    }
}

/// Deterministically generate `clusters * per_cluster` items; item `i`
/// carries the single label `i / per_cluster`. Every value is rounded
/// through f32 so feature files round-trip bitwise.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<FeatureDataset> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed, &[tag::SYNTH]);

    // Random unit directions scaled to `separation`; for two such centers the
    // expected distance is sqrt(2)*separation, at least `separation` times
    // the unit within-cluster std.
    let mut centers = Vec::with_capacity(spec.clusters);
    for _ in 0..spec.clusters {
        let mut c: Vec<f64> = (0..spec.dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for x in &mut c {
            *x = *x / norm * spec.separation;
        }
        centers.push(c);
    }

    let n = spec.clusters * spec.per_cluster;
    let mut features = Matrix::zeros(n, spec.dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let cluster = i / spec.per_cluster;
        let row = features.row_mut(i);
        for (v, &c) in row.iter_mut().zip(&centers[cluster]) {
            let noise: f64 = rng.sample(StandardNormal);
            *v = (c + noise) as f32 as f64;
        }
        labels.push(cluster as u32);
    }

    FeatureDataset::new(features, LabelSet::single(labels))
}

// ---------------------------------------------------------------------------
// Binary formats
// ---------------------------------------------------------------------------

/// Byte-slice reader that reports truncation with context.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated(format!(
                "need {} bytes for {} at offset {}, file has {}",
                n,
                what,
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != expected {
            return Err(Error::BadMagic {
                expected,
                found: [got[0], got[1], got[2], got[3]],
            });
        }
        Ok(())
    }

    pub(crate) fn version(&mut self, kind: &'static str) -> Result<()> {
        let v = self.u32("version")?;
        if v != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion { kind, version: v });
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        let b = self.take(1, what)?;
        Ok(b[0])
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self, what: &str) -> Result<f32> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn finish_exact(&self, what: &str) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Malformed(format!(
                "{} has {} trailing bytes",
                what,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }

    /// Bytes left to read. Loaders check declared sizes against this before
    /// allocating, so a corrupt header cannot request a huge buffer.
    pub(crate) fn need(&self, bytes: usize, what: &str) -> Result<()> {
        if bytes > self.buf.len() - self.pos {
            return Err(Error::Truncated(format!(
                "{} declares {} bytes but only {} remain",
                what,
                bytes,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub(crate) fn usize_product(a: u64, b: u64, what: &str) -> Result<usize> {
    let p = a
        .checked_mul(b)
        .ok_or_else(|| Error::DimensionOverflow(format!("{}: {} * {}", what, a, b)))?;
    usize::try_from(p).map_err(|_| Error::DimensionOverflow(format!("{}: {}", what, p)))
}

/// Write the feature matrix of `dataset` as a `CIBF` file. Labels are stored
/// separately (see [`save_labels`]).
pub fn save_features(dataset: &FeatureDataset, path: impl AsRef<Path>) -> Result<()> {
    let m = dataset.features();
    let mut out = Vec::with_capacity(20 + m.rows() * m.cols() * 4);
    out.extend_from_slice(&FEATURE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for &v in m.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Load a `CIBF` feature file. The returned dataset is unlabeled; attach a
/// label file with [`load_labels`] + [`FeatureDataset::with_labels`].
pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureDataset> {
    let buf = fs::read(path)?;
    let mut r = Reader::new(&buf);
    r.magic(FEATURE_MAGIC)?;
    r.version("feature")?;
    let rows = r.u64("row count")?;
    let cols = r.u32("col count")?;
    if rows == 0 || cols == 0 {
        return Err(Error::Malformed("feature file declares zero size".into()));
    }
    let count = usize_product(rows, cols as u64, "feature matrix size")?;
    r.need(
        count
            .checked_mul(4)
            .ok_or_else(|| Error::DimensionOverflow(format!("{} values", count)))?,
        "feature matrix",
    )?;
    let mut data = Vec::with_capacity(count);
    for i in 0..count {
        let v = r.f32("feature value")?;
        if !v.is_finite() {
            return Err(Error::NonFinite {
                row: i / cols as usize,
                col: i % cols as usize,
            });
        }
        data.push(v as f64);
    }
    r.finish_exact("feature file")?;
    let features = Matrix::from_vec(rows as usize, cols as usize, data);
    FeatureDataset::new(features, LabelSet::unlabeled(rows as usize))
}

/// Write a `CIBL` label file.
pub fn save_labels(labels: &LabelSet, path: impl AsRef<Path>) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(&LABEL_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(labels.len() as u64).to_le_bytes());
    for i in 0..labels.len() {
        let list = labels.get(i);
        if list.len() > u16::MAX as usize {
            return Err(Error::DimensionOverflow(format!(
                "item {} has {} labels, format allows at most {}",
                i,
                list.len(),
                u16::MAX
            )));
        }
        out.extend_from_slice(&(list.len() as u16).to_le_bytes());
        for &c in list {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Load a `CIBL` label file, validating that each list is strictly ascending.
pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelSet> {
    let buf = fs::read(path)?;
    let mut r = Reader::new(&buf);
    r.magic(LABEL_MAGIC)?;
    r.version("label")?;
    let rows = r.u64("row count")?;
    let rows = usize::try_from(rows)
        .map_err(|_| Error::DimensionOverflow(format!("label rows: {}", rows)))?;
    let mut items = Vec::with_capacity(rows);
    for i in 0..rows {
        let count = r.u16("label count")? as usize;
        let mut list = Vec::with_capacity(count);
        let mut prev: Option<u32> = None;
        for _ in 0..count {
            let c = r.u32("class id")?;
            if let Some(p) = prev {
                if c <= p {
                    return Err(Error::Malformed(format!(
                        "labels of item {} not strictly ascending ({} after {})",
                        i, c, p
                    )));
                }
            }
            prev = Some(c);
            list.push(c);
        }
        items.push(list);
    }
    r.finish_exact("label file")?;
    Ok(LabelSet { items })
}

// ---------------------------------------------------------------------------
// CSV ingestion
// ---------------------------------------------------------------------------

/// Parse a small CSV file: one row per item, all columns numeric. When the
/// first line is a header whose last column is `label`, that column holds a
/// single integer class id per item.
pub fn ingest_csv(path: impl AsRef<Path>) -> Result<FeatureDataset> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty()).peekable();

    let first = lines
        .peek()
        .ok_or_else(|| Error::Malformed("empty CSV file".into()))?;
    let first_fields: Vec<&str> = first.split(',').map(str::trim).collect();
    let header = first_fields.iter().any(|f| f.parse::<f64>().is_err());
    let labeled = header
        && first_fields
            .last()
            .map(|f| f.eq_ignore_ascii_case("label"))
            .unwrap_or(false);
    if header {
        lines.next();
    }

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<u32> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let (value_fields, label_field) = if labeled {
            let (head, tail) = fields.split_at(fields.len() - 1);
            (head, Some(tail[0]))
        } else {
            (fields.as_slice(), None)
        };
        let mut row = Vec::with_capacity(value_fields.len());
        for (col, f) in value_fields.iter().enumerate() {
            let v: f32 = f.parse().map_err(|_| {
                Error::Malformed(format!(
                    "row {}, col {}: {:?} is not a number",
                    lineno + 1,
                    col + 1,
                    f
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    row: lineno,
                    col,
                });
            }
            row.push(v as f64);
        }
        if let Some(f) = label_field {
            let c: u32 = f.parse().map_err(|_| {
                Error::Malformed(format!("row {}: label {:?} is not an integer", lineno + 1, f))
            })?;
            labels.push(c);
        }
        if let Some(prev) = rows.first() {
            if prev.len() != row.len() {
                return Err(Error::Malformed(format!(
                    "row {} has {} columns, expected {}",
                    lineno + 1,
                    row.len(),
                    prev.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Malformed("CSV has no data rows".into()));
    }

    let features = Matrix::from_rows(&rows);
    let labels = if labeled {
        LabelSet::single(labels)
    } else {
        LabelSet::unlabeled(features.rows())
    };
    FeatureDataset::new(features, labels)
}
