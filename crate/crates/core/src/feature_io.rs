//! Binary embedding container (`.grfd`) and the JSON manifest that ties a
//! dataset's files together.
//!
//! File layout, all integers little-endian:
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `b"GRFD"`                         |
//! | 4      | 4    | format version (`u32`, currently 1)     |
//! | 8      | 1    | layer tag (0 = early, 1 = penultimate)  |
//! | 9      | 1    | dtype tag (0 = f32, 1 = f64)            |
//! | 10     | 1    | flags (bit 0 labels, bit 1 logits)      |
//! | 11     | 1    | reserved, zero                          |
//! | 12     | 8    | n, row count (`u64`)                    |
//! | 20     | 8    | d, feature width (`u64`)                |
//! | 28     | 8    | C, class count (`u64`)                  |
//! | 36     | 4    | dataset id length in bytes (`u32`)      |
//! | 40     | k    | dataset id, UTF-8                       |
//!
//! The header is followed by the row-major `n x d` feature payload in the
//! declared dtype, then `n` labels as `u32` when flagged, then the row-major
//! `n x C` logits in the declared dtype when flagged. The last 8 bytes hold a
//! CRC-64/XZ checksum of every preceding byte.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crc::{Crc, CRC_64_XZ};
use serde::{Deserialize, Serialize};

use crate::error::{GroodError, Result};
use crate::matrix::Matrix;

pub const MAGIC: [u8; 4] = *b"GRFD";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;

const FIXED_HEADER_LEN: usize = 40;
const TRAILER_LEN: usize = 8;
const FLAG_LABELS: u8 = 1;
const FLAG_LOGITS: u8 = 2;

const CHECKSUM: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

pub fn checksum(bytes: &[u8]) -> u64 {
    CHECKSUM.checksum(bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    Early,
    Penultimate,
}

impl Layer {
    fn tag(self) -> u8 {
        match self {
            Layer::Early => 0,
            Layer::Penultimate => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Layer::Early),
            1 => Ok(Layer::Penultimate),
            t => Err(GroodError::Malformed(format!("unknown layer tag {t}"))),
        }
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layer::Early => "early",
            Layer::Penultimate => "penultimate",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            t => Err(GroodError::Malformed(format!("unknown dtype tag {t}"))),
        }
    }
}

/// Labeled embedding matrix for a single network layer.
///
/// With [`Dtype::F32`] every stored value is exactly representable as `f32`,
/// so in-memory values and on-disk values always agree bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub layer: Layer,
    pub features: Matrix,
    pub labels: Option<Vec<u32>>,
    pub logits: Option<Matrix>,
    pub num_classes: usize,
    pub dataset_id: String,
    pub dtype: Dtype,
}

fn round_to(dtype: Dtype, m: Matrix) -> Matrix {
    match dtype {
        Dtype::F64 => m,
        Dtype::F32 => {
            let (r, c) = (m.rows(), m.cols());
            let data = m.into_vec().into_iter().map(|v| v as f32 as f64).collect();
            Matrix::new(r, c, data).expect("shape preserved")
        }
    }
}

impl FeatureSet {
    pub fn new(layer: Layer, features: Matrix, dtype: Dtype) -> Self {
        Self {
            layer,
            features: round_to(dtype, features),
            labels: None,
            logits: None,
            num_classes: 0,
            dataset_id: String::new(),
            dtype,
        }
    }

    pub fn with_labels(mut self, labels: Vec<u32>, num_classes: usize) -> Self {
        self.labels = Some(labels);
        self.num_classes = num_classes;
        self
    }

    pub fn with_logits(mut self, logits: Matrix) -> Self {
        self.num_classes = logits.cols();
        self.logits = Some(round_to(self.dtype, logits));
        self
    }

    pub fn with_num_classes(mut self, num_classes: usize) -> Self {
        self.num_classes = num_classes;
        self
    }

    pub fn with_dataset_id(mut self, id: impl Into<String>) -> Self {
        self.dataset_id = id.into();
        self
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Subset of rows, keeping labels and logits aligned.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            layer: self.layer,
            features: self.features.select_rows(indices),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            logits: self.logits.as_ref().map(|m| m.select_rows(indices)),
            num_classes: self.num_classes,
            dataset_id: self.dataset_id.clone(),
            dtype: self.dtype,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.features.rows();
        if n == 0 || self.features.cols() == 0 {
            return Err(GroodError::Empty("feature set needs n >= 1 and d >= 1"));
        }
        self.features.ensure_finite()?;
        if let Some(labels) = &self.labels {
            if labels.len() != n {
                return Err(GroodError::DimensionMismatch(format!(
                    "{} labels for {n} rows",
                    labels.len()
                )));
            }
            if let Some((row, &label)) = labels
                .iter()
                .enumerate()
                .find(|(_, &l)| l as usize >= self.num_classes)
            {
                return Err(GroodError::LabelOutOfRange {
                    row,
                    label,
                    num_classes: self.num_classes,
                });
            }
        }
        if let Some(logits) = &self.logits {
            if logits.rows() != n || logits.cols() != self.num_classes {
                return Err(GroodError::DimensionMismatch(format!(
                    "logits are {}x{}, expected {n}x{}",
                    logits.rows(),
                    logits.cols(),
                    self.num_classes
                )));
            }
            logits.ensure_finite()?;
        }
        Ok(())
    }

    /// Serialized size in bytes, header and trailer included.
    pub fn encoded_len(&self) -> usize {
        let w = self.dtype.width();
        let n = self.len();
        FIXED_HEADER_LEN
            + self.dataset_id.len()
            + n * self.dim() * w
            + self.labels.as_ref().map_or(0, |_| n * 4)
            + self.logits.as_ref().map_or(0, |_| n * self.num_classes * w)
            + TRAILER_LEN
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut buf = Vec::with_capacity(self.encoded_len());
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.push(self.layer.tag());
        buf.push(self.dtype.tag());
        let mut flags = 0;
        if self.labels.is_some() {
            flags |= FLAG_LABELS;
        }
        if self.logits.is_some() {
            flags |= FLAG_LOGITS;
        }
        buf.push(flags);
        buf.push(0);
        for v in [self.len(), self.dim(), self.num_classes] {
            buf.extend_from_slice(&(v as u64).to_le_bytes());
        }
        let id = self.dataset_id.as_bytes();
        buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
        buf.extend_from_slice(id);
        put_values(&mut buf, self.dtype, self.features.as_slice());
        if let Some(labels) = &self.labels {
            for l in labels {
                buf.extend_from_slice(&l.to_le_bytes());
            }
        }
        if let Some(logits) = &self.logits {
            put_values(&mut buf, self.dtype, logits.as_slice());
        }
        let sum = checksum(&buf);
        buf.extend_from_slice(&sum.to_le_bytes());
        Ok(buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || bytes[..4] != MAGIC {
            let mut found = [0u8; 4];
            let k = bytes.len().min(4);
            found[..k].copy_from_slice(&bytes[..k]);
            return Err(GroodError::BadMagic { found });
        }
        if bytes.len() < FIXED_HEADER_LEN {
            return Err(GroodError::Truncated {
                expected: FIXED_HEADER_LEN,
                found: bytes.len(),
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(GroodError::UnsupportedVersion(version));
        }
        let layer = Layer::from_tag(bytes[8])?;
        let dtype = Dtype::from_tag(bytes[9])?;
        let flags = bytes[10];
        if flags & !(FLAG_LABELS | FLAG_LOGITS) != 0 {
            return Err(GroodError::Malformed(format!("unknown flags {flags:#04x}")));
        }
        let read_u64 = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
        let n = to_usize(read_u64(12))?;
        let d = to_usize(read_u64(20))?;
        let c = to_usize(read_u64(28))?;
        let id_len = u32::from_le_bytes(bytes[36..40].try_into().unwrap()) as usize;

        let w = dtype.width();
        let has_labels = flags & FLAG_LABELS != 0;
        let has_logits = flags & FLAG_LOGITS != 0;
        let expected = [
            Some(FIXED_HEADER_LEN as u128),
            Some(id_len as u128),
            (n as u128).checked_mul(d as u128).map(|x| x * w as u128),
            Some(if has_labels { n as u128 * 4 } else { 0 }),
            if has_logits {
                (n as u128).checked_mul(c as u128).map(|x| x * w as u128)
            } else {
                Some(0)
            },
            Some(TRAILER_LEN as u128),
        ]
        .into_iter()
        .try_fold(0u128, |acc, x| x.map(|x| acc + x))
        .ok_or_else(|| GroodError::Malformed("declared shape overflows".into()))?;
        if (bytes.len() as u128) < expected {
            return Err(GroodError::Truncated {
                expected: usize::try_from(expected).unwrap_or(usize::MAX),
                found: bytes.len(),
            });
        }
        if bytes.len() as u128 > expected {
            return Err(GroodError::Malformed(format!(
                "{} trailing bytes after checksum",
                bytes.len() as u128 - expected
            )));
        }
        let body = &bytes[..bytes.len() - TRAILER_LEN];
        let stored = u64::from_le_bytes(bytes[body.len()..].try_into().unwrap());
        let computed = checksum(body);
        if stored != computed {
            return Err(GroodError::ChecksumMismatch { stored, computed });
        }

        let mut at = FIXED_HEADER_LEN;
        let dataset_id = std::str::from_utf8(&bytes[at..at + id_len])
            .map_err(|e| GroodError::Malformed(format!("dataset id: {e}")))?
            .to_owned();
        at += id_len;
        let features = Matrix::new(n, d, get_values(&bytes[at..at + n * d * w], dtype))?;
        at += n * d * w;
        let labels = has_labels.then(|| {
            let raw = &bytes[at..at + n * 4];
            at += n * 4;
            raw.chunks_exact(4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .collect::<Vec<_>>()
        });
        let logits = if has_logits {
            Some(Matrix::new(
                n,
                c,
                get_values(&bytes[at..at + n * c * w], dtype),
            )?)
        } else {
            None
        };
        let set = FeatureSet {
            layer,
            features,
            labels,
            logits,
            num_classes: c,
            dataset_id,
            dtype,
        };
        set.validate()?;
        Ok(set)
    }
}

fn to_usize(v: u64) -> Result<usize> {
    usize::try_from(v).map_err(|_| GroodError::Malformed(format!("size {v} too large")))
}

fn put_values(buf: &mut Vec<u8>, dtype: Dtype, values: &[f64]) {
    match dtype {
        Dtype::F32 => values
            .iter()
            .for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes())),
        Dtype::F64 => values
            .iter()
            .for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
    }
}

fn get_values(raw: &[u8], dtype: Dtype) -> Vec<f64> {
    match dtype {
        Dtype::F32 => raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect(),
    }
}

pub fn write_feature_set(set: &FeatureSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = set.encode()?;
    fs::write(path, bytes).map_err(|e| GroodError::io(path, e))
}

pub fn read_feature_set(path: impl AsRef<Path>) -> Result<FeatureSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| GroodError::io(path, e))?;
    FeatureSet::decode(&bytes)
}

/// Checksum stored in the trailer of an encoded file.
pub fn stored_checksum(path: impl AsRef<Path>) -> Result<u64> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| GroodError::io(path, e))?;
    if bytes.len() < TRAILER_LEN {
        return Err(GroodError::Truncated {
            expected: TRAILER_LEN,
            found: bytes.len(),
        });
    }
    Ok(u64::from_le_bytes(
        bytes[bytes.len() - TRAILER_LEN..].try_into().unwrap(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    IdTrain,
    IdTest,
    OodAux,
    OodTest,
    SyntheticOod,
    GradientCorpus,
}

impl Role {
    pub fn requires_labels(self) -> bool {
        matches!(self, Role::IdTrain)
    }

    pub fn forbids_labels(self) -> bool {
        matches!(self, Role::OodAux | Role::OodTest)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit enum");
        f.write_str(s.as_str().unwrap_or("?"))
    }
}

/// Near/far grouping of an OOD test set, used for aggregate metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodGroup {
    Near,
    Far,
}

impl FromStr for OodGroup {
    type Err = GroodError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "near" => Ok(OodGroup::Near),
            "far" => Ok(OodGroup::Far),
            _ => Err(GroodError::InvalidParameter(format!("unknown OOD group {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub path: PathBuf,
    pub layer: Layer,
    pub role: Role,
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<OodGroup>,
    /// Hex-encoded trailer checksum of the referenced file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checksum: Option<String>,
}

impl Record {
    /// Dataset name used in reports: the explicit id, else the file stem.
    pub fn name(&self) -> String {
        self.dataset_id.clone().unwrap_or_else(|| {
            self.path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub num_classes: usize,
    pub dims: BTreeMap<Layer, usize>,
    pub records: Vec<Record>,
}

impl Manifest {
    pub fn new(num_classes: usize) -> Self {
        Self {
            version: MANIFEST_VERSION,
            num_classes,
            dims: BTreeMap::new(),
            records: Vec::new(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let m: Manifest =
            serde_json::from_str(text).map_err(|e| GroodError::Manifest(e.to_string()))?;
        if m.version != MANIFEST_VERSION {
            return Err(GroodError::Manifest(format!(
                "unsupported manifest version {}",
                m.version
            )));
        }
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| GroodError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| GroodError::io(path, e))
    }

    pub fn records_with_role(&self, role: Role) -> impl Iterator<Item = &Record> + '_ {
        self.records.iter().filter(move |r| r.role == role)
    }

    /// Writes `set` under `base_dir` and appends a matching record.
    pub fn add(
        &mut self,
        base_dir: &Path,
        file_name: &str,
        role: Role,
        group: Option<OodGroup>,
        set: &FeatureSet,
    ) -> Result<()> {
        let path = base_dir.join(file_name);
        write_feature_set(set, &path)?;
        self.dims.insert(set.layer, set.dim());
        self.records.push(Record {
            path: PathBuf::from(file_name),
            layer: set.layer,
            role,
            count: set.len(),
            dataset_id: (!set.dataset_id.is_empty()).then(|| set.dataset_id.clone()),
            group,
            checksum: Some(format!("{:016x}", stored_checksum(&path)?)),
        });
        Ok(())
    }
}

/// A manifest record together with its parsed file.
#[derive(Debug, Clone)]
pub struct LoadedRecord {
    pub record: Record,
    pub set: FeatureSet,
}

/// Reads every record of `manifest` and checks it against its declaration.
pub fn load_manifest(manifest: &Manifest, base_dir: impl AsRef<Path>) -> Result<Vec<LoadedRecord>> {
    let base_dir = base_dir.as_ref();
    let mut seen_dims: BTreeMap<Layer, (usize, PathBuf)> = BTreeMap::new();
    let mut out = Vec::with_capacity(manifest.records.len());
    for record in &manifest.records {
        let path = base_dir.join(&record.path);
        if !path.is_file() {
            return Err(GroodError::MissingFile(path));
        }
        let set = read_feature_set(&path)?;
        if let Some(expected) = &record.checksum {
            let stored = format!("{:016x}", stored_checksum(&path)?);
            if !stored.eq_ignore_ascii_case(expected) {
                return Err(GroodError::Manifest(format!(
                    "{}: checksum {stored} differs from declared {expected}",
                    record.path.display()
                )));
            }
        }
        if set.layer != record.layer {
            return Err(GroodError::Manifest(format!(
                "{}: file layer {} but record says {}",
                record.path.display(),
                set.layer,
                record.layer
            )));
        }
        if set.len() != record.count {
            return Err(GroodError::Manifest(format!(
                "{}: file has {} rows but record declares {}",
                record.path.display(),
                set.len(),
                record.count
            )));
        }
        if set.num_classes != manifest.num_classes {
            return Err(GroodError::Manifest(format!(
                "{}: file declares {} classes, manifest {}",
                record.path.display(),
                set.num_classes,
                manifest.num_classes
            )));
        }
        if record.role.requires_labels() && set.labels.is_none() {
            return Err(GroodError::RoleContract(format!(
                "{} has role {} but carries no labels",
                record.path.display(),
                record.role
            )));
        }
        if record.role.forbids_labels() && set.labels.is_some() {
            return Err(GroodError::RoleContract(format!(
                "{} has role {} but carries labels",
                record.path.display(),
                record.role
            )));
        }
        if let Some(&d) = manifest.dims.get(&set.layer) {
            if d != set.dim() {
                return Err(GroodError::DimensionMismatch(format!(
                    "{}: {} layer has d={}, manifest declares {d}",
                    record.path.display(),
                    set.layer,
                    set.dim()
                )));
            }
        }
        match seen_dims.get(&set.layer) {
            Some((d, other)) if *d != set.dim() => {
                return Err(GroodError::DimensionMismatch(format!(
                    "{} layer has d={} in {} but d={} in {}",
                    set.layer,
                    d,
                    other.display(),
                    set.dim(),
                    record.path.display()
                )));
            }
            Some(_) => {}
            None => {
                seen_dims.insert(set.layer, (set.dim(), record.path.clone()));
            }
        }
        out.push(LoadedRecord {
            record: record.clone(),
            set,
        });
    }
    Ok(out)
}

pub fn validate_manifest(manifest: &Manifest, base_dir: impl AsRef<Path>) -> Result<()> {
    load_manifest(manifest, base_dir).map(|_| ())
}
