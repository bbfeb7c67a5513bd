//! NSL-KDD ingestion: CSV parsing, feature selection, z-score
//! normalization, attack-label taxonomy, non-iid partitioning, and the
//! binary dataset cache.
//!
//! Records arrive as 42-field lines (41 features + label) or 43-field lines
//! (plus the difficulty column, detected by field count and dropped).
//! Training uses normal records only; normalization statistics come from
//! the full normal training pool unless a caller passes test-set statistics
//! explicitly. The 34 retained features are pinned by a versioned manifest
//! shipped with the crate and overridable per run; its hash is embedded in
//! caches and model files so mismatched artifacts are rejected.

use std::collections::BTreeSet;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Mat;
use crate::rng::{derive_rng, STREAM_PARTITION};

/// The 41 NSL-KDD feature names, in file order.
pub const NSLKDD_FEATURES: [&str; 41] = [
    "duration",
    "protocol_type",
    "service",
    "flag",
    "src_bytes",
    "dst_bytes",
    "land",
    "wrong_fragment",
    "urgent",
    "hot",
    "num_failed_logins",
    "logged_in",
    "num_compromised",
    "root_shell",
    "su_attempted",
    "num_root",
    "num_file_creations",
    "num_shells",
    "num_access_files",
    "num_outbound_cmds",
    "is_host_login",
    "is_guest_login",
    "count",
    "srv_count",
    "serror_rate",
    "srv_serror_rate",
    "rerror_rate",
    "srv_rerror_rate",
    "same_srv_rate",
    "diff_srv_rate",
    "srv_diff_host_rate",
    "dst_host_count",
    "dst_host_srv_count",
    "dst_host_same_srv_rate",
    "dst_host_diff_srv_rate",
    "dst_host_same_src_port_rate",
    "dst_host_srv_diff_host_rate",
    "dst_host_serror_rate",
    "dst_host_srv_serror_rate",
    "dst_host_rerror_rate",
    "dst_host_srv_rerror_rate",
];

const DEFAULT_MANIFEST: &str = include_str!("../assets/features.manifest");
const DEFAULT_TAXONOMY: &str = include_str!("../assets/attack_taxonomy.tsv");

/// One raw CSV record: the 41 feature fields as text plus the label.
#[derive(Debug, Clone)]
pub struct RawRecord {
    pub fields: Vec<String>,
    pub label: String,
}

/// Parse an NSL-KDD CSV file. Every non-empty line must have 42 or 43
/// comma-separated fields; anything else is reported with its line number.
pub fn load_nslkdd(path: &Path) -> Result<Vec<RawRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::Config(format!(
        "cannot open {}: {e}",
        path.display()
    )))?;
    let reader = std::io::BufReader::new(file);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 42 && fields.len() != 43 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                message: format!("expected 42 or 43 fields, found {}", fields.len()),
            });
        }
        // KDDCup'99 labels carry a trailing dot; strip it so both layouts map
        // onto the same taxonomy.
        let label = fields[41].trim().trim_end_matches('.').to_string();
        records.push(RawRecord {
            fields: fields[..41].iter().map(|s| s.to_string()).collect(),
            label,
        });
    }
    Ok(records)
}

/// Main attack classes of the NSL-KDD taxonomy, plus `Unknown` for
/// sub-classes outside the manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MainClass {
    Normal,
    Dos,
    Probe,
    U2r,
    R2l,
    Unknown,
}

impl std::fmt::Display for MainClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            MainClass::Normal => "normal",
            MainClass::Dos => "dos",
            MainClass::Probe => "probe",
            MainClass::U2r => "u2r",
            MainClass::R2l => "r2l",
            MainClass::Unknown => "unknown",
        };
        write!(f, "{s}")
    }
}

impl MainClass {
    fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "normal" => Some(MainClass::Normal),
            "dos" => Some(MainClass::Dos),
            "probe" => Some(MainClass::Probe),
            "u2r" => Some(MainClass::U2r),
            "r2l" => Some(MainClass::R2l),
            "unknown" => Some(MainClass::Unknown),
            _ => None,
        }
    }

    fn tag(&self) -> u8 {
        match self {
            MainClass::Normal => 0,
            MainClass::Dos => 1,
            MainClass::Probe => 2,
            MainClass::U2r => 3,
            MainClass::R2l => 4,
            MainClass::Unknown => 5,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(MainClass::Normal),
            1 => Some(MainClass::Dos),
            2 => Some(MainClass::Probe),
            3 => Some(MainClass::U2r),
            4 => Some(MainClass::R2l),
            5 => Some(MainClass::Unknown),
            _ => None,
        }
    }
}

/// Record label: main class, raw sub-class string, and whether the
/// sub-class is absent from the training taxonomy (test-set-novel).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordLabel {
    pub class: MainClass,
    pub sub: String,
    pub novel: bool,
}

impl RecordLabel {
    pub fn normal() -> Self {
        Self {
            class: MainClass::Normal,
            sub: "normal".into(),
            novel: false,
        }
    }

    pub fn attack(class: MainClass, sub: &str, novel: bool) -> Self {
        Self {
            class,
            sub: sub.into(),
            novel,
        }
    }

    pub fn is_attack(&self) -> bool {
        self.class != MainClass::Normal
    }
}

/// Sub-class -> (main class, novel-in-test) lookup.
#[derive(Debug, Clone)]
pub struct Taxonomy {
    entries: Vec<(String, MainClass, bool)>,
}

impl Taxonomy {
    /// The taxonomy shipped with the crate.
    pub fn builtin() -> Self {
        Self::parse(DEFAULT_TAXONOMY).expect("builtin taxonomy parses")
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 3 {
                return Err(Error::Parse {
                    path: "taxonomy".into(),
                    line: idx + 1,
                    message: "expected: sub-class <TAB> class <TAB> train|new".into(),
                });
            }
            let class = MainClass::from_tag(parts[1]).ok_or_else(|| Error::Parse {
                path: "taxonomy".into(),
                line: idx + 1,
                message: format!("unknown class tag {:?}", parts[1]),
            })?;
            let novel = match parts[2] {
                "train" => false,
                "new" => true,
                other => {
                    return Err(Error::Parse {
                        path: "taxonomy".into(),
                        line: idx + 1,
                        message: format!("expected train|new, found {other:?}"),
                    })
                }
            };
            entries.push((parts[0].to_string(), class, novel));
        }
        Ok(Self { entries })
    }

    pub fn lookup(&self, sub: &str) -> Option<(MainClass, bool)> {
        self.entries
            .iter()
            .find(|(s, _, _)| s == sub)
            .map(|(_, c, n)| (*c, *n))
    }

    /// Label a raw record. Unmapped attack sub-classes come back as
    /// `Unknown` together with a warning string.
    pub fn label(&self, raw_label: &str) -> (RecordLabel, Option<String>) {
        if raw_label == "normal" {
            return (RecordLabel::normal(), None);
        }
        match self.lookup(raw_label) {
            Some((class, novel)) => (RecordLabel::attack(class, raw_label, novel), None),
            None => (
                RecordLabel::attack(MainClass::Unknown, raw_label, true),
                Some(format!("sub-class {raw_label:?} is not in the taxonomy manifest")),
            ),
        }
    }
}

/// The frozen list of retained continuous features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureManifest {
    pub version: u32,
    names: Vec<String>,
    indices: Vec<usize>,
    hash: [u8; 32],
}

impl FeatureManifest {
    /// The 34-feature manifest shipped with the crate.
    pub fn default_manifest() -> Self {
        Self::parse(DEFAULT_MANIFEST).expect("builtin manifest parses")
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Parse a manifest: `# version N` header comment, then one retained
    /// feature name per non-comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut version = 1u32;
        let mut names = Vec::new();
        let mut seen = BTreeSet::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let rest = rest.trim();
                if let Some(v) = rest.strip_prefix("version ") {
                    version = v.trim().parse().map_err(|_| {
                        Error::Config(format!("bad manifest version {v:?}"))
                    })?;
                }
                continue;
            }
            if !seen.insert(line.to_string()) {
                return Err(Error::Config(format!("duplicate manifest feature {line:?}")));
            }
            names.push(line.to_string());
        }
        if names.is_empty() {
            return Err(Error::Config("manifest lists no features".into()));
        }
        let mut indices = Vec::with_capacity(names.len());
        for name in &names {
            let idx = NSLKDD_FEATURES
                .iter()
                .position(|f| f == name)
                .ok_or_else(|| Error::Config(format!("unknown feature name {name:?}")))?;
            indices.push(idx);
        }
        let mut hasher = Sha256::new();
        hasher.update(format!("version {version}\n"));
        for name in &names {
            hasher.update(name.as_bytes());
            hasher.update(b"\n");
        }
        let hash = hasher.finalize().into();
        Ok(Self {
            version,
            names,
            indices,
            hash,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn hash(&self) -> &[u8; 32] {
        &self.hash
    }

    pub fn column_of(&self, feature: &str) -> Option<usize> {
        self.names.iter().position(|n| n == feature)
    }
}

/// Per-feature z-score statistics from the training normals. Features with
/// a standard deviation under `1e-12` are flagged constant and map to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub constant: Vec<bool>,
}

const CONSTANT_STD: f64 = 1e-12;

impl NormalizationStats {
    /// Population mean and standard deviation per column.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::Config(
                "normalization statistics need at least one normal record".into(),
            ));
        }
        let d = rows[0].len();
        let mut mean = vec![0.0; d];
        for row in rows {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        let mut var = vec![0.0; d];
        for row in rows {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                let diff = v - m;
                *s += diff * diff;
            }
        }
        let std: Vec<f64> = var.iter().map(|s| (s / n as f64).sqrt()).collect();
        let constant = std.iter().map(|s| *s < CONSTANT_STD).collect();
        Ok(Self { mean, std, constant })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, raw: &[f64]) -> Result<Vec<f64>> {
        if raw.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "stats cover {} features, record has {}",
                self.dim(),
                raw.len()
            )));
        }
        Ok(raw
            .iter()
            .zip(&self.mean)
            .zip(&self.std)
            .zip(&self.constant)
            .map(|(((v, m), s), c)| if *c { 0.0 } else { (v - m) / s })
            .collect())
    }
}

/// A normalized record: the retained feature vector plus its label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledVector {
    pub features: Vec<f64>,
    pub label: RecordLabel,
}

/// Select the manifest columns, z-score them, and map labels through the
/// taxonomy. When `stats` is `None` they are computed from this input's
/// normal records (the training path); pass the training stats for the test
/// set. Returns the vectors, the stats used, and taxonomy warnings.
pub fn select_and_normalize(
    records: &[RawRecord],
    manifest: &FeatureManifest,
    taxonomy: &Taxonomy,
    stats: Option<&NormalizationStats>,
) -> Result<(Vec<LabeledVector>, NormalizationStats, Vec<String>)> {
    if let Some(s) = stats {
        if s.dim() != manifest.dim() {
            return Err(Error::Dimension(format!(
                "stats cover {} features, manifest has {}",
                s.dim(),
                manifest.dim()
            )));
        }
    }
    let mut raw_rows = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    let mut warnings: Vec<String> = Vec::new();
    for (ridx, rec) in records.iter().enumerate() {
        let mut row = Vec::with_capacity(manifest.dim());
        for (&col, name) in manifest.indices.iter().zip(manifest.names()) {
            let text = rec.fields[col].trim();
            let v: f64 = text.parse().map_err(|_| Error::Parse {
                path: "records".into(),
                line: ridx + 1,
                message: format!("feature {name:?} is not numeric: {text:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: "records".into(),
                    line: ridx + 1,
                    message: format!("feature {name:?} is not finite"),
                });
            }
            row.push(v);
        }
        raw_rows.push(row);
        let (label, warn) = taxonomy.label(&rec.label);
        if let Some(w) = warn {
            if !warnings.contains(&w) {
                warnings.push(w);
            }
        }
        labels.push(label);
    }

    let stats = match stats {
        Some(s) => s.clone(),
        None => {
            let normal_rows: Vec<Vec<f64>> = raw_rows
                .iter()
                .zip(&labels)
                .filter(|(_, l)| !l.is_attack())
                .map(|(r, _)| r.clone())
                .collect();
            NormalizationStats::from_rows(&normal_rows)?
        }
    };

    let mut vectors = Vec::with_capacity(records.len());
    for (row, label) in raw_rows.iter().zip(labels) {
        let features = stats.apply(row)?;
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("normalization produced a non-finite feature".into()));
        }
        vectors.push(LabeledVector { features, label });
    }
    Ok((vectors, stats, warnings))
}

/// How to shard the training normals across clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PartitionStrategy {
    /// Stable sort on one manifest feature, then contiguous near-equal
    /// shards; adjacent shards hold adjacent value ranges (non-iid).
    SortedByFeature(String),
    /// Seeded uniform shuffle, then contiguous shards (iid).
    IidShuffle(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub n_clients: usize,
    pub strategy: PartitionStrategy,
}

/// Split `vectors` into `n_clients` disjoint index shards covering every
/// input index exactly once; shard sizes differ by at most one.
pub fn partition(
    vectors: &[LabeledVector],
    spec: &PartitionSpec,
    manifest: &FeatureManifest,
) -> Result<Vec<Vec<usize>>> {
    let n = vectors.len();
    if spec.n_clients == 0 {
        return Err(Error::Config("partition needs at least one client".into()));
    }
    if spec.n_clients > n {
        return Err(Error::Config(format!(
            "cannot split {n} records across {} clients",
            spec.n_clients
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    match &spec.strategy {
        PartitionStrategy::SortedByFeature(name) => {
            let col = manifest
                .column_of(name)
                .ok_or_else(|| Error::Config(format!("unknown feature name {name:?}")))?;
            // The z-score is strictly monotone for non-constant features, so
            // sorting the normalized column reproduces the raw-value order.
            order.sort_by(|&a, &b| vectors[a].features[col].total_cmp(&vectors[b].features[col]));
        }
        PartitionStrategy::IidShuffle(seed) => {
            let mut rng = derive_rng(*seed, &[STREAM_PARTITION]);
            for j in (1..n).rev() {
                let pick = rand::Rng::random_range(&mut rng, 0..=j);
                order.swap(j, pick);
            }
        }
    }
    let base = n / spec.n_clients;
    let extra = n % spec.n_clients;
    let mut shards = Vec::with_capacity(spec.n_clients);
    let mut start = 0;
    for c in 0..spec.n_clients {
        let size = base + usize::from(c < extra);
        shards.push(order[start..start + size].to_vec());
        start += size;
    }
    Ok(shards)
}

/// Materialize a `d x n` data matrix (one record per column) from indices.
pub fn to_matrix(vectors: &[LabeledVector], indices: &[usize]) -> Mat {
    let d = vectors.first().map_or(0, |v| v.features.len());
    let mut m = Mat::zeros(d, indices.len());
    for (c, &i) in indices.iter().enumerate() {
        for (r, v) in vectors[i].features.iter().enumerate() {
            m[(r, c)] = *v;
        }
    }
    m
}

/// Indices of the normal records.
pub fn normal_indices(vectors: &[LabeledVector]) -> Vec<usize> {
    vectors
        .iter()
        .enumerate()
        .filter(|(_, v)| !v.label.is_attack())
        .map(|(i, _)| i)
        .collect()
}

/// Count records per main class, in display order.
pub fn class_histogram(vectors: &[LabeledVector]) -> Vec<(MainClass, usize)> {
    let classes = [
        MainClass::Normal,
        MainClass::Dos,
        MainClass::Probe,
        MainClass::R2l,
        MainClass::U2r,
        MainClass::Unknown,
    ];
    classes
        .iter()
        .map(|c| (*c, vectors.iter().filter(|v| v.label.class == *c).count()))
        .filter(|(_, n)| *n > 0)
        .collect()
}

const CACHE_MAGIC: &[u8; 8] = b"FPCACHE1";
const CACHE_VERSION: u32 = 1;

/// A prepared dataset: manifest, statistics, and both normalized splits.
#[derive(Debug, Clone)]
pub struct DatasetCache {
    pub manifest: FeatureManifest,
    pub stats: NormalizationStats,
    pub train: Vec<LabeledVector>,
    pub test: Vec<LabeledVector>,
}

impl DatasetCache {
    /// Training normals as a `d x n` matrix.
    pub fn train_normal_matrix(&self) -> Mat {
        let idx = normal_indices(&self.train);
        to_matrix(&self.train, &idx)
    }

    /// Test split as a matrix plus binary attack labels.
    pub fn test_matrix_and_attacks(&self) -> (Mat, Vec<bool>) {
        let idx: Vec<usize> = (0..self.test.len()).collect();
        let m = to_matrix(&self.test, &idx);
        let attacks = self.test.iter().map(|v| v.label.is_attack()).collect();
        (m, attacks)
    }

    /// Serialize to the versioned binary cache layout. The bytes are a pure
    /// function of the content, so identical inputs produce identical
    /// caches.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(CACHE_MAGIC)?;
        w.write_all(&CACHE_VERSION.to_le_bytes())?;
        w.write_all(self.manifest.hash())?;
        w.write_all(&self.manifest.version.to_le_bytes())?;
        write_u64(&mut w, self.manifest.names.len() as u64)?;
        for name in &self.manifest.names {
            write_str(&mut w, name)?;
        }
        write_u64(&mut w, self.stats.dim() as u64)?;
        for v in &self.stats.mean {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &self.stats.std {
            w.write_all(&v.to_le_bytes())?;
        }
        for c in &self.stats.constant {
            w.write_all(&[u8::from(*c)])?;
        }
        for split in [&self.train, &self.test] {
            write_u64(&mut w, split.len() as u64)?;
            for vec in split {
                for v in &vec.features {
                    w.write_all(&v.to_le_bytes())?;
                }
                w.write_all(&[vec.label.class.tag(), u8::from(vec.label.novel)])?;
                write_str(&mut w, &vec.label.sub)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |message: String| Error::Format {
            path: path.display().to_string(),
            message,
        };
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CACHE_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let mut buf4 = [0u8; 4];
        r.read_exact(&mut buf4)?;
        if u32::from_le_bytes(buf4) != CACHE_VERSION {
            return Err(bad("unsupported version".into()));
        }
        let mut stored_hash = [0u8; 32];
        r.read_exact(&mut stored_hash)?;
        r.read_exact(&mut buf4)?;
        let manifest_version = u32::from_le_bytes(buf4);
        let n_names = read_u64(&mut r)? as usize;
        if n_names == 0 || n_names > NSLKDD_FEATURES.len() {
            return Err(bad(format!("implausible feature count {n_names}")));
        }
        let mut manifest_text = format!("# version {manifest_version}\n");
        for _ in 0..n_names {
            manifest_text.push_str(&read_str(&mut r)?);
            manifest_text.push('\n');
        }
        let manifest = FeatureManifest::parse(&manifest_text)?;
        if manifest.hash() != &stored_hash {
            return Err(bad("manifest hash does not match its contents".into()));
        }
        let d = read_u64(&mut r)? as usize;
        if d != manifest.dim() {
            return Err(bad("stats dimension does not match manifest".into()));
        }
        let mut stats = NormalizationStats {
            mean: vec![0.0; d],
            std: vec![0.0; d],
            constant: vec![false; d],
        };
        let mut buf8 = [0u8; 8];
        for v in stats.mean.iter_mut() {
            r.read_exact(&mut buf8)?;
            *v = f64::from_le_bytes(buf8);
        }
        for v in stats.std.iter_mut() {
            r.read_exact(&mut buf8)?;
            *v = f64::from_le_bytes(buf8);
        }
        let mut flag = [0u8; 1];
        for c in stats.constant.iter_mut() {
            r.read_exact(&mut flag)?;
            *c = flag[0] != 0;
        }
        let mut splits = Vec::with_capacity(2);
        for _ in 0..2 {
            let n = read_u64(&mut r)? as usize;
            let mut split = Vec::with_capacity(n);
            for _ in 0..n {
                let mut features = vec![0.0; d];
                for v in features.iter_mut() {
                    r.read_exact(&mut buf8)?;
                    *v = f64::from_le_bytes(buf8);
                }
                let mut label_bytes = [0u8; 2];
                r.read_exact(&mut label_bytes)?;
                let class = MainClass::from_byte(label_bytes[0])
                    .ok_or_else(|| bad(format!("bad class tag {}", label_bytes[0])))?;
                let novel = label_bytes[1] != 0;
                let sub = read_str(&mut r)?;
                split.push(LabeledVector {
                    features,
                    label: RecordLabel { class, sub, novel },
                });
            }
            splits.push(split);
        }
        let test = splits.pop().unwrap();
        let train = splits.pop().unwrap();
        Ok(Self {
            manifest,
            stats,
            train,
            test,
        })
    }
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    let bytes = s.as_bytes();
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let len = u32::from_le_bytes(buf4) as usize;
    if len > 1 << 16 {
        return Err(Error::Format {
            path: "cache".into(),
            message: format!("implausible string length {len}"),
        });
    }
    let mut bytes = vec![0u8; len];
    r.read_exact(&mut bytes)?;
    String::from_utf8(bytes).map_err(|_| Error::Format {
        path: "cache".into(),
        message: "non-utf8 string".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_manifest_has_34_features() {
        let m = FeatureManifest::default_manifest();
        assert_eq!(m.dim(), 34);
        assert_eq!(m.version, 1);
        // Categorical and near-constant columns are excluded.
        for dropped in ["protocol_type", "service", "flag", "land", "urgent", "num_outbound_cmds", "is_host_login"] {
            assert!(m.column_of(dropped).is_none());
        }
        assert!(m.column_of("dst_bytes").is_some());
        // Hash is stable across parses of the same text.
        let again = FeatureManifest::default_manifest();
        assert_eq!(m.hash(), again.hash());
    }

    #[test]
    fn manifest_rejects_unknown_and_duplicate_names() {
        assert!(FeatureManifest::parse("no_such_feature\n").is_err());
        assert!(FeatureManifest::parse("duration\nduration\n").is_err());
    }

    #[test]
    fn taxonomy_maps_known_and_unknown_subclasses() {
        let t = Taxonomy::builtin();
        assert_eq!(t.lookup("neptune"), Some((MainClass::Dos, false)));
        assert_eq!(t.lookup("apache2"), Some((MainClass::Dos, true)));
        assert_eq!(t.lookup("snmpguess"), Some((MainClass::R2l, true)));
        let (label, warn) = t.label("futuristic_attack");
        assert_eq!(label.class, MainClass::Unknown);
        assert!(warn.is_some());
        let (label, warn) = t.label("normal");
        assert!(!label.is_attack());
        assert!(warn.is_none());
    }

    fn synthetic_record(values: &[(usize, f64)], label: &str) -> RawRecord {
        let mut fields = vec!["0".to_string(); 41];
        fields[1] = "tcp".into();
        fields[2] = "http".into();
        fields[3] = "SF".into();
        for (i, v) in values {
            fields[*i] = v.to_string();
        }
        RawRecord {
            fields,
            label: label.into(),
        }
    }

    #[test]
    fn normalization_maps_mean_to_zero_and_one_std_to_one() {
        let manifest = FeatureManifest::default_manifest();
        let taxonomy = Taxonomy::builtin();
        let dur = 0; // "duration" raw column index
        let records = vec![
            synthetic_record(&[(dur, 1.0)], "normal"),
            synthetic_record(&[(dur, 3.0)], "normal"),
        ];
        let (vecs, stats, _) = select_and_normalize(&records, &manifest, &taxonomy, None).unwrap();
        let col = manifest.column_of("duration").unwrap();
        // mean 2, std 1: values map to -1 and 1.
        assert!((vecs[0].features[col] + 1.0).abs() < 1e-12);
        assert!((vecs[1].features[col] - 1.0).abs() < 1e-12);
        // A record equal to the mean maps to all zeros.
        let mean_record = synthetic_record(&[(dur, 2.0)], "normal");
        let (vecs, _, _) =
            select_and_normalize(&[mean_record], &manifest, &taxonomy, Some(&stats)).unwrap();
        assert!(vecs[0].features.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn constant_features_map_to_zero() {
        let manifest = FeatureManifest::default_manifest();
        let taxonomy = Taxonomy::builtin();
        let records = vec![
            synthetic_record(&[], "normal"),
            synthetic_record(&[], "normal"),
        ];
        let (vecs, stats, _) = select_and_normalize(&records, &manifest, &taxonomy, None).unwrap();
        assert!(stats.constant.iter().all(|c| *c));
        assert!(vecs[0].features.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn partition_edges() {
        let manifest = FeatureManifest::default_manifest();
        let vectors: Vec<LabeledVector> = (0..5)
            .map(|i| LabeledVector {
                features: vec![i as f64; manifest.dim()],
                label: RecordLabel::normal(),
            })
            .collect();
        let one = partition(
            &vectors,
            &PartitionSpec {
                n_clients: 1,
                strategy: PartitionStrategy::SortedByFeature("dst_bytes".into()),
            },
            &manifest,
        )
        .unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].len(), 5);

        let singletons = partition(
            &vectors,
            &PartitionSpec {
                n_clients: 5,
                strategy: PartitionStrategy::SortedByFeature("dst_bytes".into()),
            },
            &manifest,
        )
        .unwrap();
        assert!(singletons.iter().all(|s| s.len() == 1));

        assert!(partition(
            &vectors,
            &PartitionSpec {
                n_clients: 2,
                strategy: PartitionStrategy::SortedByFeature("nope".into()),
            },
            &manifest,
        )
        .is_err());
        assert!(partition(
            &vectors,
            &PartitionSpec {
                n_clients: 6,
                strategy: PartitionStrategy::IidShuffle(0),
            },
            &manifest,
        )
        .is_err());
    }

    #[test]
    fn load_reports_malformed_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "1,2,3\n").unwrap();
        match load_nslkdd(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
        let empty = dir.path().join("empty.csv");
        std::fs::write(&empty, "").unwrap();
        assert!(load_nslkdd(&empty).unwrap().is_empty());
    }

    #[test]
    fn load_handles_both_field_counts_and_kdd99_dots() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mixed.csv");
        let f41 = vec!["0"; 41].join(",");
        std::fs::write(
            &path,
            format!("{f41},normal,21\n{f41},neptune.\n"),
        )
        .unwrap();
        let records = load_nslkdd(&path).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].label, "normal");
        assert_eq!(records[1].label, "neptune");
    }
}
