//! Feature banks, semantic embedding tables, split manifests and the
//! synthetic cluster generator.
//!
//! # Feature bank layout
//!
//! ```text
//! offset  size          field
//! 0       4             magic  b"FBNK"
//! 4       4             version (u32 LE) = 1
//! 8       4             count   (u32 LE) number of rows
//! 12      4             dim     (u32 LE) row width
//! 16      4*count*dim   f32 LE, row-major
//! ```
//!
//! Labels live in a sidecar text file (`<path>.labels` by default) holding
//! one class name per line, line `i` labelling row `i`.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, Matrix};

pub const FBNK_MAGIC: &[u8; 4] = b"FBNK";
pub const FBNK_VERSION: u32 = 1;
const FBNK_HEADER_LEN: usize = 16;

/// Feature vectors with per-row class labels.
///
/// `class_names` is always in first-appearance order over the rows and
/// contains no unused names, so two banks with the same rows compare equal.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    features: Matrix,
    labels: Vec<usize>,
    class_names: Vec<String>,
}

impl FeatureBank {
    pub fn new(features: Matrix, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::ManifestMismatch(format!(
                "{} labels for {} feature rows",
                labels.len(),
                features.rows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::ManifestMismatch(format!(
                "label index {bad} out of range for {} classes",
                class_names.len()
            )));
        }
        if features.cols() == 0 {
            return Err(Error::format("feature dimension must be at least 1"));
        }
        if !features.is_finite() {
            return Err(Error::CorruptData("non-finite feature value".into()));
        }
        let names: Vec<&str> = labels.iter().map(|&l| class_names[l].as_str()).collect();
        Self::from_row_names(features, &names)
    }

    /// Builds a bank from one class name per row.
    pub fn from_row_names<S: AsRef<str>>(features: Matrix, names: &[S]) -> Result<Self> {
        if names.len() != features.rows() {
            return Err(Error::ManifestMismatch(format!(
                "{} labels for {} feature rows",
                names.len(),
                features.rows()
            )));
        }
        if features.cols() == 0 {
            return Err(Error::format("feature dimension must be at least 1"));
        }
        if !features.is_finite() {
            return Err(Error::CorruptData("non-finite feature value".into()));
        }
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut class_names = Vec::new();
        let mut labels = Vec::with_capacity(names.len());
        for name in names {
            let name = name.as_ref();
            let next = class_names.len();
            let idx = *index.entry(name).or_insert_with(|| {
                class_names.push(name.to_string());
                next
            });
            labels.push(idx);
        }
        Ok(Self {
            features,
            labels,
            class_names,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
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

    pub fn label_name(&self, row: usize) -> &str {
        &self.class_names[self.labels[row]]
    }

    /// Rows in the given order, relabelled canonically.
    pub fn subset(&self, rows: &[usize]) -> Result<FeatureBank> {
        let features = self.features.select_rows(rows);
        let names: Vec<&str> = rows.iter().map(|&r| self.label_name(r)).collect();
        Self::from_row_names(features, &names)
    }

    /// Copy with every row rescaled to unit l2 norm.
    pub fn normalized(&self) -> Result<FeatureBank> {
        let mut out = self.clone();
        out.features.normalize_rows()?;
        Ok(out)
    }

    /// Maps each row's class name into positions of `classes`.
    pub fn labels_in(&self, classes: &[String]) -> Result<Vec<usize>> {
        let index: HashMap<&str, usize> = classes
            .iter()
            .enumerate()
            .map(|(i, c)| (c.as_str(), i))
            .collect();
        let remap = self
            .class_names
            .iter()
            .map(|n| {
                index.get(n.as_str()).copied().ok_or_else(|| {
                    Error::ManifestMismatch(format!("class {n:?} is not in the class set"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.labels.iter().map(|&l| remap[l]).collect())
    }
}

/// Default sidecar path: `<path>.labels`.
pub fn labels_path_for(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".labels");
    PathBuf::from(s)
}

pub fn load_feature_bank(path: impl AsRef<Path>) -> Result<FeatureBank> {
    let path = path.as_ref();
    load_feature_bank_with_labels(path, labels_path_for(path))
}

pub fn load_feature_bank_with_labels(
    path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<FeatureBank> {
    let bytes = fs::read(path.as_ref())?;
    let features = decode_features(&bytes)?;
    let labels = read_label_lines(labels_path.as_ref())?;
    if labels.len() != features.rows() {
        return Err(Error::ManifestMismatch(format!(
            "labels file has {} rows but the feature payload has {}",
            labels.len(),
            features.rows()
        )));
    }
    FeatureBank::from_row_names(features, &labels)
}

fn read_label_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    let mut lines: Vec<String> = text
        .lines()
        .map(|l| l.trim_end_matches('\r').to_string())
        .collect();
    while lines.last().is_some_and(|l| l.is_empty()) {
        lines.pop();
    }
    if let Some(i) = lines.iter().position(|l| l.trim().is_empty()) {
        return Err(Error::format(format!("empty class name on labels line {}", i + 1)));
    }
    Ok(lines)
}

fn read_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4-byte slice"))
}

/// Decodes an FBNK payload.
pub fn decode_features(bytes: &[u8]) -> Result<Matrix> {
    if bytes.len() < FBNK_HEADER_LEN {
        return Err(Error::format("feature bank shorter than its header"));
    }
    if &bytes[0..4] != FBNK_MAGIC {
        return Err(Error::format("bad feature bank magic"));
    }
    let version = read_u32(bytes, 4);
    if version != FBNK_VERSION {
        return Err(Error::format(format!(
            "unsupported feature bank version {version}"
        )));
    }
    let count = read_u32(bytes, 8) as usize;
    let dim = read_u32(bytes, 12) as usize;
    if count == 0 || dim == 0 {
        return Err(Error::format("feature bank has zero rows or zero dimension"));
    }
    let expected = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(FBNK_HEADER_LEN))
        .ok_or_else(|| Error::format("feature bank size overflows"))?;
    if bytes.len() != expected {
        return Err(Error::format(format!(
            "feature payload is {} bytes, header implies {}",
            bytes.len(),
            expected
        )));
    }
    let mut data = Vec::with_capacity(count * dim);
    for chunk in bytes[FBNK_HEADER_LEN..].chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        if !v.is_finite() {
            return Err(Error::CorruptData(format!(
                "non-finite value at element {}",
                data.len()
            )));
        }
        data.push(v as f64);
    }
    Matrix::from_vec(count, dim, data)
}

/// Encodes features as an FBNK payload. Values are rounded to `f32`.
pub fn encode_features(features: &Matrix) -> Result<Vec<u8>> {
    if features.rows() == 0 || features.cols() == 0 {
        return Err(Error::format("refusing to write an empty feature bank"));
    }
    if !features.is_finite() {
        return Err(Error::CorruptData("non-finite feature value".into()));
    }
    let count = u32::try_from(features.rows()).map_err(|_| Error::format("too many rows"))?;
    let dim = u32::try_from(features.cols()).map_err(|_| Error::format("dimension too large"))?;
    let mut out = Vec::with_capacity(FBNK_HEADER_LEN + features.as_slice().len() * 4);
    out.extend_from_slice(FBNK_MAGIC);
    out.extend_from_slice(&FBNK_VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    for &v in features.as_slice() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::CorruptData(format!("{v} overflows f32")));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

pub fn save_feature_bank(bank: &FeatureBank, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    save_feature_bank_with_labels(bank, path, labels_path_for(path))
}

pub fn save_feature_bank_with_labels(
    bank: &FeatureBank,
    path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let payload = encode_features(&bank.features)?;
    fs::write(path.as_ref(), payload)?;
    let mut w = BufWriter::new(fs::File::create(labels_path.as_ref())?);
    for row in 0..bank.len() {
        writeln!(w, "{}", bank.label_name(row))?;
    }
    w.flush()?;
    Ok(())
}

/// Class name to semantic vector, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    entries: IndexMap<String, Vec<f64>>,
    dim: usize,
}

impl EmbeddingTable {
    pub fn from_entries<I>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, Vec<f64>)>,
    {
        let mut map = IndexMap::new();
        let mut dim = None;
        for (name, v) in entries {
            let d = *dim.get_or_insert(v.len());
            if v.len() != d {
                return Err(Error::format(format!(
                    "embedding for {name:?} has dimension {}, expected {d}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::CorruptData(format!("non-finite value in {name:?}")));
            }
            map.insert(name, v);
        }
        let dim = dim.ok_or_else(|| Error::format("embedding table is empty"))?;
        if dim == 0 {
            return Err(Error::format("embedding dimension must be at least 1"));
        }
        Ok(Self { entries: map, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.entries.get(name).map(Vec::as_slice)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Stacks the vectors of `names` into a `names.len() x dim` matrix.
    pub fn matrix_for<S: AsRef<str>>(&self, names: &[S]) -> Result<Matrix> {
        let mut data = Vec::with_capacity(names.len() * self.dim);
        for n in names {
            let n = n.as_ref();
            let v = self
                .get(n)
                .ok_or_else(|| Error::ManifestMismatch(format!("no embedding for class {n:?}")))?;
            data.extend_from_slice(v);
        }
        Matrix::from_vec(names.len(), self.dim, data)
    }

    pub fn normalize(&mut self) -> Result<()> {
        for (name, v) in self.entries.iter_mut() {
            kernels::normalize_in_place(v)
                .map_err(|_| Error::CorruptData(format!("zero embedding for {name:?}")))?;
        }
        Ok(())
    }
}

/// Parses GloVe-style `token v1 ... vd` lines.
pub fn parse_embedding_table<R: BufRead>(reader: R, normalize: bool) -> Result<EmbeddingTable> {
    let mut entries: IndexMap<String, Vec<f64>> = IndexMap::new();
    let mut dim: Option<usize> = None;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else {
            continue;
        };
        let values = parts
            .map(|p| {
                p.parse::<f32>().map(f64::from).map_err(|_| {
                    Error::format(format!("line {}: cannot parse {p:?} as a real", lineno + 1))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.is_empty() {
            return Err(Error::format(format!("line {}: token without values", lineno + 1)));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::format(format!("line {}: non-finite value {bad}", lineno + 1)));
        }
        let d = *dim.get_or_insert(values.len());
        if values.len() != d {
            return Err(Error::format(format!(
                "line {}: dimension {} differs from {d}",
                lineno + 1,
                values.len()
            )));
        }
        // IndexMap keeps the original position on overwrite.
        if entries.insert(token.to_string(), values).is_some() {
            log::warn!("duplicate embedding token {token:?}; keeping the last record");
        }
    }
    let mut table = EmbeddingTable::from_entries(entries)?;
    if normalize {
        table.normalize()?;
    }
    Ok(table)
}

pub fn load_embedding_table(path: impl AsRef<Path>, normalize: bool) -> Result<EmbeddingTable> {
    let file = fs::File::open(path.as_ref())?;
    parse_embedding_table(BufReader::new(file), normalize)
}

/// Writes the table as text, each value rounded to `f32`.
pub fn save_embedding_table(table: &EmbeddingTable, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path.as_ref())?);
    for (name, v) in table.iter() {
        write!(w, "{name}")?;
        for x in v {
            write!(w, " {}", *x as f32)?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Seen and unseen class lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seen: Vec<String>,
    pub unseen: Vec<String>,
}

impl SplitManifest {
    /// Checks disjointness, `p >= 2`, and that every class has an embedding.
    pub fn validate(&self, table: &EmbeddingTable) -> Result<()> {
        if self.seen.len() < 2 {
            return Err(Error::config(format!(
                "need at least 2 seen classes, got {}",
                self.seen.len()
            )));
        }
        let mut names = std::collections::HashSet::new();
        for n in self.seen.iter().chain(&self.unseen) {
            if !names.insert(n.as_str()) {
                return Err(Error::config(format!(
                    "class {n:?} is listed twice (seen and unseen must be disjoint)"
                )));
            }
            if !table.contains(n) {
                return Err(Error::ManifestMismatch(format!("no embedding for class {n:?}")));
            }
        }
        Ok(())
    }

    pub fn all_classes(&self) -> Vec<String> {
        self.seen.iter().chain(&self.unseen).cloned().collect()
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<SplitManifest> {
    let text = fs::read_to_string(path.as_ref())?;
    Ok(serde_json::from_str(&text)?)
}

pub fn save_manifest(manifest: &SplitManifest, path: impl AsRef<Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    fs::write(path.as_ref(), text)?;
    Ok(())
}

/// Parameters of the synthetic cluster generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub p_seen: usize,
    pub q_unseen: usize,
    pub m: usize,
    pub instances_per_class: usize,
    pub cluster_spread: f64,
    pub semantic_dim: usize,
    pub semantic_noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            p_seen: 30,
            q_unseen: 10,
            m: 64,
            instances_per_class: 50,
            cluster_spread: 0.5,
            semantic_dim: 300,
            semantic_noise: 0.05,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.p_seen < 2 {
            return Err(Error::config("synthetic data needs at least 2 seen classes"));
        }
        if self.q_unseen == 0 || self.m == 0 || self.instances_per_class == 0 || self.semantic_dim == 0
        {
            return Err(Error::config("synthetic class, dimension and instance counts must be positive"));
        }
        if !(self.cluster_spread > 0.0) || !self.cluster_spread.is_finite() {
            return Err(Error::config("cluster_spread must be positive"));
        }
        if !(self.semantic_noise >= 0.0) || !self.semantic_noise.is_finite() {
            return Err(Error::config("semantic_noise must be non-negative"));
        }
        Ok(())
    }
}

/// Output of [`generate_synthetic`].
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub seen: FeatureBank,
    pub unseen: FeatureBank,
    pub table: EmbeddingTable,
    pub manifest: SplitManifest,
    /// One row per class, seen classes first.
    pub centroids: Matrix,
}

pub fn synthetic_class_name(index: usize) -> String {
    format!("class{index:03}")
}

/// Draws class centroids and semantic vectors, then instances around the
/// centroids.
///
/// Centroid coordinates are half-normal (non-negative, like pooled ReLU
/// features). Semantic vectors are `A c + noise` for a fixed Gaussian map
/// `A` of shape `semantic_dim x m`. Instances are `c + spread * z`. All
/// stored values are rounded to `f32` so they survive a save/load cycle.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let classes = spec.p_seen + spec.q_unseen;
    let m = spec.m;
    let d = spec.semantic_dim;
    let mut normal = move || -> f64 { StandardNormal.sample(&mut rng) };

    let mut centroids = Matrix::zeros(classes, m);
    for v in centroids.as_mut_slice() {
        *v = normal().abs();
    }
    centroids.round_to_f32();

    let map_scale = 1.0 / (m as f64).sqrt();
    let mut map = Matrix::zeros(d, m);
    for v in map.as_mut_slice() {
        *v = normal() * map_scale;
    }

    let mut semantics = Matrix::zeros(classes, d);
    for c in 0..classes {
        for k in 0..d {
            let clean = kernels::dot(map.row(k), centroids.row(c));
            semantics.set(c, k, clean + spec.semantic_noise * normal());
        }
    }
    semantics.round_to_f32();

    let names: Vec<String> = (0..classes).map(synthetic_class_name).collect();
    let mut draw_bank = |class_range: std::ops::Range<usize>| -> Result<FeatureBank> {
        let n = class_range.len() * spec.instances_per_class;
        let mut features = Matrix::zeros(n, m);
        let mut row_names = Vec::with_capacity(n);
        let mut r = 0;
        for c in class_range {
            for _ in 0..spec.instances_per_class {
                let centroid = centroids.row(c);
                for (k, out) in features.row_mut(r).iter_mut().enumerate() {
                    *out = centroid[k] + spec.cluster_spread * normal();
                }
                row_names.push(names[c].as_str());
                r += 1;
            }
        }
        features.round_to_f32();
        FeatureBank::from_row_names(features, &row_names)
    };
    let seen = draw_bank(0..spec.p_seen)?;
    let unseen = draw_bank(spec.p_seen..classes)?;

    let table = EmbeddingTable::from_entries(
        names
            .iter()
            .enumerate()
            .map(|(c, n)| (n.clone(), semantics.row(c).to_vec())),
    )?;
    let manifest = SplitManifest {
        seen: names[..spec.p_seen].to_vec(),
        unseen: names[spec.p_seen..].to_vec(),
    };
    Ok(SyntheticData {
        seen,
        unseen,
        table,
        manifest,
        centroids,
    })
}
