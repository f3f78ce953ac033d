//! Labeled instance sets: synthetic generation and the CILD / CSV file formats.
//!
//! CILD layout (little-endian): `b"CILD"`, `u16` version (1), `u32` sample
//! count, `u32` feature dim, `u32` class count, then `f32` features row-major,
//! then one `u16` label per sample. Train and test live in separate files.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::prng::SplitMix64;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CILD";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 4 + 4;

/// Instances as rows of an `n × dim` matrix with one label each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSet {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl LabeledSet {
    pub fn new(features: Tensor, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::shape(format!(
                "features must be n×dim, got {:?}",
                features.shape()
            )));
        }
        if features.rows() != labels.len() {
            return Err(Error::shape(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::Label {
                label: bad,
                classes: n_classes,
            });
        }
        Ok(LabeledSet {
            features,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Rows `ids`, in that order.
    pub fn subset(&self, ids: &[usize]) -> Result<LabeledSet> {
        let features = self.features.select_rows(ids)?;
        let labels = ids.iter().map(|&i| self.labels[i]).collect();
        Ok(LabeledSet {
            features,
            labels,
            n_classes: self.n_classes,
        })
    }

    /// Indices of instances whose label satisfies `keep`, ascending.
    pub fn ids_where(&self, keep: impl Fn(usize) -> bool) -> Vec<usize> {
        (0..self.len()).filter(|&i| keep(self.labels[i])).collect()
    }

    /// Applies `map` to every label; the result has `n_classes` classes.
    pub fn relabel(&self, map: &[usize]) -> Result<LabeledSet> {
        if map.len() != self.n_classes {
            return Err(Error::contract(format!(
                "label map covers {} of {} classes",
                map.len(),
                self.n_classes
            )));
        }
        let labels = self.labels.iter().map(|&y| map[y]).collect();
        LabeledSet::new(self.features.clone(), labels, self.n_classes)
    }
}

/// Train and test partitions over the same classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub train: LabeledSet,
    pub test: LabeledSet,
}

impl Dataset {
    pub fn new(train: LabeledSet, test: LabeledSet) -> Result<Self> {
        if train.dim() != test.dim() || train.n_classes != test.n_classes {
            return Err(Error::contract(format!(
                "train ({} dims, {} classes) and test ({} dims, {} classes) disagree",
                train.dim(),
                train.n_classes,
                test.dim(),
                test.n_classes
            )));
        }
        Ok(Dataset { train, test })
    }

    pub fn n_classes(&self) -> usize {
        self.train.n_classes
    }

    pub fn dim(&self) -> usize {
        self.train.dim()
    }
}

/// Gaussian blobs around class centers drawn uniformly on the unit sphere.
///
/// Features are rounded to `f32` so that a dataset written as CILD loads back
/// bit-identical.
pub fn synth_dataset(
    classes: usize,
    n_train_per_class: usize,
    n_test_per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes == 0 || n_train_per_class == 0 || n_test_per_class == 0 || dim == 0 {
        return Err(Error::Config("synthetic dataset sizes must be positive".into()));
    }
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(Error::Config(format!("spread must be positive, got {spread}")));
    }
    let mut rng = SplitMix64::new(seed);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.next_normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect();
    let mut sample = |per_class: usize| -> Result<LabeledSet> {
        let mut data = Vec::with_capacity(classes * per_class * dim);
        let mut labels = Vec::with_capacity(classes * per_class);
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..per_class {
                data.extend(center.iter().map(|m| (m + spread * rng.next_normal()) as f32 as f64));
                labels.push(c);
            }
        }
        LabeledSet::new(Tensor::new(vec![labels.len(), dim], data)?, labels, classes)
    };
    let train = sample(n_train_per_class)?;
    let test = sample(n_test_per_class)?;
    Dataset::new(train, test)
}

/// Serializes a set in the CILD format.
pub fn encode_cild(set: &LabeledSet) -> Result<Vec<u8>> {
    let n = u32::try_from(set.len()).map_err(|_| Error::contract("too many samples for CILD"))?;
    let dim = u32::try_from(set.dim()).map_err(|_| Error::contract("feature dim too large for CILD"))?;
    if set.n_classes > usize::from(u16::MAX) + 1 {
        return Err(Error::contract("CILD labels are 16-bit"));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + set.features.numel() * 4 + set.len() * 2);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    out.extend_from_slice(&(set.n_classes as u32).to_le_bytes());
    for &v in set.features.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &y in &set.labels {
        out.extend_from_slice(&(y as u16).to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos as u64,
                message: format!(
                    "truncated {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Parses a CILD byte buffer.
pub fn decode_cild(bytes: &[u8]) -> Result<LabeledSet> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "bad magic, expected \"CILD\"".into(),
        });
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Parse {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let n = r.u32("sample count")? as usize;
    let dim = r.u32("feature dim")? as usize;
    let n_classes = r.u32("class count")? as usize;
    if dim == 0 {
        return Err(Error::Parse {
            offset: 10,
            message: "feature dim is zero".into(),
        });
    }
    let feature_bytes = n.checked_mul(dim).and_then(|c| c.checked_mul(4)).ok_or(Error::Parse {
        offset: 6,
        message: "sample count overflows".into(),
    })?;
    let raw = r.take(feature_bytes, "features")?;
    let features: Vec<f64> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    if let Some(i) = features.iter().position(|v| !v.is_finite()) {
        return Err(Error::Parse {
            offset: (HEADER_LEN + 4 * i) as u64,
            message: "non-finite feature".into(),
        });
    }
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let at = r.pos;
        let y = r.u16("labels")? as usize;
        if y >= n_classes {
            return Err(Error::Parse {
                offset: at as u64,
                message: format!("label {y} out of range for {n_classes} classes"),
            });
        }
        labels.push(y);
    }
    if r.pos != bytes.len() {
        return Err(Error::Parse {
            offset: r.pos as u64,
            message: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    LabeledSet::new(Tensor::new(vec![n, dim], features)?, labels, n_classes)
}

pub fn write_cild(path: &Path, set: &LabeledSet) -> Result<()> {
    let bytes = encode_cild(set)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Parses CSV with header `label,f0,f1,...`. The class count is one more
/// than the largest label.
pub fn decode_csv(text: &[u8]) -> Result<LabeledSet> {
    let mut rdr = csv::Reader::from_reader(text);
    let header = rdr.headers()?.clone();
    if header.get(0) != Some("label") || header.len() < 2 {
        return Err(Error::Parse {
            offset: 0,
            message: "CSV header must be `label,f0,f1,...`".into(),
        });
    }
    let dim = header.len() - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let offset = record.position().map_or(0, |p| p.byte());
        let bad = |message: String| Error::Parse { offset, message };
        let label: usize = record[0]
            .trim()
            .parse()
            .map_err(|_| bad(format!("label {:?} is not a non-negative integer", &record[0])))?;
        labels.push(label);
        for field in record.iter().skip(1) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| bad(format!("feature {field:?} is not a number")))?;
            if !v.is_finite() {
                return Err(bad("non-finite feature".into()));
            }
            features.push(v);
        }
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    LabeledSet::new(Tensor::new(vec![labels.len(), dim], features)?, labels, n_classes)
}

/// Writes `label,f0,...` CSV.
pub fn write_csv(path: &Path, set: &LabeledSet) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["label".to_string()];
    header.extend((0..set.dim()).map(|j| format!("f{j}")));
    w.write_record(&header)?;
    for i in 0..set.len() {
        let mut row = vec![set.labels[i].to_string()];
        row.extend(set.features.row(i).iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Loads a CILD file, or CSV when the file does not start with the CILD magic
/// and has a `.csv` extension.
pub fn load_dataset(path: &Path) -> Result<LabeledSet> {
    let bytes = fs::read(path)?;
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv && !bytes.starts_with(MAGIC) {
        decode_csv(&bytes)
    } else {
        decode_cild(&bytes)
    }
}
