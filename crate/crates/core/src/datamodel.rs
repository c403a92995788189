//! Samples, seen/unseen split manifests, dataset ingestion and the synthetic
//! toy generator.
//!
//! A manifest is a JSON document listing the seen and unseen class partition
//! plus the train (seen) and test (unseen) sample lists. Image samples point at
//! PNG/JPEG files; toy samples point at a binary feature record file
//! (`features.rec`) stored next to the manifest.
//!
//! Record file layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "SLTOYREC"
//! version u32      1
//! count   u32
//! repeated count times:
//!   id_len u32, id (utf-8)
//!   domain u8      0 = sketch, 1 = photo
//!   class_len u32, class (utf-8)
//!   h u32, w u32, c u32
//!   h*w*c float32 values in row-major (h, w, c) order
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, Read};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::imaging;
use crate::numeric::{rng_for, round_f32};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECORD_FILE: &str = "features.rec";
const RECORD_MAGIC: &[u8; 8] = b"SLTOYREC";
const RECORD_VERSION: u32 = 1;
const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("invalid toy spec: {0}")]
    InvalidSpec(String),
    #[error("image error for {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Sketch,
    Photo,
}

impl Domain {
    pub fn as_str(&self) -> &'static str {
        match self {
            Domain::Sketch => "sketch",
            Domain::Photo => "photo",
        }
    }

    pub fn parse(tag: &str) -> Option<Domain> {
        match tag.to_ascii_lowercase().as_str() {
            "sketch" => Some(Domain::Sketch),
            "photo" | "image" => Some(Domain::Photo),
            _ => None,
        }
    }

    fn code(&self) -> u8 {
        match self {
            Domain::Sketch => 0,
            Domain::Photo => 1,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Where a sample's pixels come from.
#[derive(Debug, Clone)]
pub enum SampleImage {
    /// Decoded in memory (toy data, or records read from a feature file).
    Pixels(Arc<Array3<f64>>),
    /// An image file decoded on demand. `lazy` files may be absent at load time.
    File { path: PathBuf, lazy: bool },
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub domain: Domain,
    pub class_name: String,
    pub split: Split,
    pub image: SampleImage,
}

impl Sample {
    /// Returns the sample as an `H×W×C` array in `[0, 1]`, resized to
    /// `input_size` when the sample is an image file.
    pub fn pixels(&self, input_size: (usize, usize, usize)) -> Result<Array3<f64>, DataError> {
        match &self.image {
            SampleImage::Pixels(p) => Ok(p.as_ref().clone()),
            SampleImage::File { path, .. } => {
                let bytes = fs::read(path).map_err(|_| DataError::MissingFile(path.clone()))?;
                imaging::decode_and_preprocess(&bytes, input_size).map_err(|e| DataError::Image {
                    path: path.clone(),
                    message: e.to_string(),
                })
            }
        }
    }

    pub fn shape(&self) -> Option<(usize, usize, usize)> {
        match &self.image {
            SampleImage::Pixels(p) => Some(p.dim()),
            SampleImage::File { .. } => None,
        }
    }

    pub fn source_path(&self) -> Option<&Path> {
        match &self.image {
            SampleImage::File { path, .. } => Some(path),
            SampleImage::Pixels(_) => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SplitManifest {
    pub name: String,
    pub seen_classes: Vec<String>,
    pub unseen_classes: Vec<String>,
    pub train_samples: Vec<Sample>,
    pub test_samples: Vec<Sample>,
    pub metadata: Map<String, Value>,
}

impl SplitManifest {
    pub fn seen_index(&self) -> HashMap<&str, usize> {
        self.seen_classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect()
    }

    pub fn all_classes(&self) -> Vec<String> {
        self.seen_classes.iter().chain(&self.unseen_classes).cloned().collect()
    }

    pub fn train_by_domain(&self, domain: Domain) -> Vec<&Sample> {
        self.train_samples.iter().filter(|s| s.domain == domain).collect()
    }

    pub fn test_by_domain(&self, domain: Domain) -> Vec<&Sample> {
        self.test_samples.iter().filter(|s| s.domain == domain).collect()
    }

    /// Shape of in-memory samples, if the manifest carries any.
    pub fn sample_shape(&self) -> Option<(usize, usize, usize)> {
        self.train_samples.iter().chain(&self.test_samples).find_map(Sample::shape)
    }
}

// ---------------------------------------------------------------------------
// Validation

/// Lists every violated manifest invariant. Empty iff the manifest is valid.
pub fn validate_manifest(m: &SplitManifest) -> Vec<String> {
    let mut violations = Vec::new();

    for (label, list) in [("seen", &m.seen_classes), ("unseen", &m.unseen_classes)] {
        let mut seen = HashSet::new();
        for c in list {
            if c.is_empty() {
                violations.push(format!("empty class name in {label} list"));
            }
            if !seen.insert(c.as_str()) {
                violations.push(format!("duplicate class '{c}' in {label} list"));
            }
        }
    }

    let unseen: HashSet<&str> = m.unseen_classes.iter().map(String::as_str).collect();
    let seen: HashSet<&str> = m.seen_classes.iter().map(String::as_str).collect();
    for c in &m.seen_classes {
        if unseen.contains(c.as_str()) {
            violations.push(format!("class '{c}' is both seen and unseen"));
        }
    }

    let mut ids = HashSet::new();
    for (list, expected_split, classes, label) in [
        (&m.train_samples, Split::Train, &seen, "seen"),
        (&m.test_samples, Split::Test, &unseen, "unseen"),
    ] {
        for s in list.iter() {
            if !ids.insert(s.id.as_str()) {
                violations.push(format!("duplicate sample id '{}'", s.id));
            }
            if s.split != expected_split {
                violations.push(format!("sample '{}' is listed under the wrong split", s.id));
            }
            if !classes.contains(s.class_name.as_str()) {
                violations.push(format!(
                    "sample '{}' has class '{}' which is not in the {label} classes",
                    s.id, s.class_name
                ));
            }
            if let SampleImage::Pixels(p) = &s.image {
                let (h, w, c) = p.dim();
                if h == 0 || w == 0 || c == 0 {
                    violations.push(format!("sample '{}' has an empty image", s.id));
                } else if p.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
                    violations.push(format!("sample '{}' has pixel values outside [0, 1]", s.id));
                }
            }
        }
    }
    violations
}

// ---------------------------------------------------------------------------
// Manifest file I/O

#[derive(Debug, Serialize, Deserialize)]
struct ManifestFile {
    name: String,
    seen_classes: Vec<String>,
    unseen_classes: Vec<String>,
    train: Vec<EntryFile>,
    test: Vec<EntryFile>,
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    metadata: Map<String, Value>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EntryFile {
    id: String,
    domain: String,
    class: String,
    path: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    lazy: bool,
}

/// Loads and validates a manifest. Relative sample paths resolve against the
/// manifest's directory.
pub fn load_manifest(path: &Path) -> Result<SplitManifest, DataError> {
    let text = fs::read_to_string(path).map_err(|_| DataError::MissingFile(path.to_path_buf()))?;
    let file: ManifestFile =
        serde_json::from_str(&text).map_err(|e| DataError::InvalidManifest(e.to_string()))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();

    let mut record_cache: HashMap<PathBuf, HashMap<String, Record>> = HashMap::new();
    let mut resolve = |entries: Vec<EntryFile>, split: Split| -> Result<Vec<Sample>, DataError> {
        let mut out = Vec::with_capacity(entries.len());
        for e in entries {
            let domain = Domain::parse(&e.domain).ok_or_else(|| {
                DataError::InvalidManifest(format!("unknown domain tag '{}' on sample '{}'", e.domain, e.id))
            })?;
            let full = base.join(&e.path);
            let image = if full.extension().is_some_and(|x| x == "rec") {
                if !record_cache.contains_key(&full) {
                    if !full.exists() {
                        return Err(DataError::MissingFile(full));
                    }
                    let recs = read_records(&full)?;
                    record_cache.insert(full.clone(), recs.into_iter().map(|r| (r.id.clone(), r)).collect());
                }
                let rec = record_cache[&full].get(&e.id).ok_or_else(|| {
                    DataError::InvalidManifest(format!("sample '{}' not found in {}", e.id, full.display()))
                })?;
                if rec.domain != domain || rec.class_name != e.class {
                    return Err(DataError::InvalidManifest(format!(
                        "record for '{}' disagrees with the manifest entry",
                        e.id
                    )));
                }
                SampleImage::Pixels(rec.pixels.clone())
            } else {
                if !e.lazy && !full.exists() {
                    return Err(DataError::MissingFile(full));
                }
                SampleImage::File { path: full, lazy: e.lazy }
            };
            out.push(Sample { id: e.id, domain, class_name: e.class, split, image });
        }
        Ok(out)
    };

    let train_samples = resolve(file.train, Split::Train)?;
    let test_samples = resolve(file.test, Split::Test)?;
    let manifest = SplitManifest {
        name: file.name,
        seen_classes: file.seen_classes,
        unseen_classes: file.unseen_classes,
        train_samples,
        test_samples,
        metadata: file.metadata,
    };
    let violations = validate_manifest(&manifest);
    if !violations.is_empty() {
        return Err(DataError::InvalidManifest(violations.join("; ")));
    }
    Ok(manifest)
}

/// Serialises the manifest JSON (and a record file for in-memory samples) into
/// `dir`. Returns the manifest path.
pub fn write_manifest(m: &SplitManifest, dir: &Path) -> Result<PathBuf, DataError> {
    fs::create_dir_all(dir)?;
    let mut records: Vec<RecordRef<'_>> = Vec::new();
    let mut lists: [Vec<EntryFile>; 2] = [Vec::new(), Vec::new()];
    for (list, samples) in lists.iter_mut().zip([&m.train_samples, &m.test_samples]) {
        for s in samples {
            let (path, lazy) = match &s.image {
                SampleImage::Pixels(p) => {
                    records.push(RecordRef { id: &s.id, domain: s.domain, class_name: &s.class_name, pixels: p });
                    (RECORD_FILE.to_string(), false)
                }
                SampleImage::File { path, lazy } => {
                    let rel = path.strip_prefix(dir).unwrap_or(path);
                    (rel.to_string_lossy().into_owned(), *lazy)
                }
            };
            list.push(EntryFile {
                id: s.id.clone(),
                domain: s.domain.as_str().to_string(),
                class: s.class_name.clone(),
                path,
                lazy,
            });
        }
    }
    let [train, test] = lists;
    let file = ManifestFile {
        name: m.name.clone(),
        seen_classes: m.seen_classes.clone(),
        unseen_classes: m.unseen_classes.clone(),
        train,
        test,
        metadata: m.metadata.clone(),
    };
    if !records.is_empty() {
        write_records(&dir.join(RECORD_FILE), &records)?;
    }
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&file).map_err(io::Error::other)?;
    fs::write(&path, text + "\n")?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// Binary feature records

#[derive(Debug, Clone)]
pub struct Record {
    pub id: String,
    pub domain: Domain,
    pub class_name: String,
    pub pixels: Arc<Array3<f64>>,
}

pub struct RecordRef<'a> {
    pub id: &'a str,
    pub domain: Domain,
    pub class_name: &'a str,
    pub pixels: &'a Array3<f64>,
}

pub fn write_records(path: &Path, records: &[RecordRef<'_>]) -> Result<(), DataError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(RECORD_MAGIC);
    buf.extend_from_slice(&RECORD_VERSION.to_le_bytes());
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        buf.extend_from_slice(&(r.id.len() as u32).to_le_bytes());
        buf.extend_from_slice(r.id.as_bytes());
        buf.push(r.domain.code());
        buf.extend_from_slice(&(r.class_name.len() as u32).to_le_bytes());
        buf.extend_from_slice(r.class_name.as_bytes());
        let (h, w, c) = r.pixels.dim();
        for d in [h, w, c] {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in r.pixels.iter() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<Record>, DataError> {
    let bytes = fs::read(path).map_err(|_| DataError::MissingFile(path.to_path_buf()))?;
    let bad = |msg: &str| DataError::InvalidManifest(format!("{}: {msg}", path.display()));
    let mut cur = io::Cursor::new(bytes.as_slice());
    let mut magic = [0u8; 8];
    cur.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != RECORD_MAGIC {
        return Err(bad("not a feature record file"));
    }
    let read_u32 = |cur: &mut io::Cursor<&[u8]>| -> Result<u32, DataError> {
        let mut b = [0u8; 4];
        cur.read_exact(&mut b).map_err(|_| bad("truncated record"))?;
        Ok(u32::from_le_bytes(b))
    };
    let read_string = |cur: &mut io::Cursor<&[u8]>, len: usize| -> Result<String, DataError> {
        let mut b = vec![0u8; len];
        cur.read_exact(&mut b).map_err(|_| bad("truncated record"))?;
        String::from_utf8(b).map_err(|_| bad("invalid utf-8"))
    };
    if read_u32(&mut cur)? != RECORD_VERSION {
        return Err(bad("unsupported record version"));
    }
    let count = read_u32(&mut cur)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let id_len = read_u32(&mut cur)? as usize;
        let id = read_string(&mut cur, id_len)?;
        let mut dom = [0u8; 1];
        cur.read_exact(&mut dom).map_err(|_| bad("truncated record"))?;
        let domain = match dom[0] {
            0 => Domain::Sketch,
            1 => Domain::Photo,
            _ => return Err(bad("unknown domain code")),
        };
        let class_len = read_u32(&mut cur)? as usize;
        let class_name = read_string(&mut cur, class_len)?;
        let h = read_u32(&mut cur)? as usize;
        let w = read_u32(&mut cur)? as usize;
        let c = read_u32(&mut cur)? as usize;
        let mut values = Vec::with_capacity(h * w * c);
        for _ in 0..h * w * c {
            let mut b = [0u8; 4];
            cur.read_exact(&mut b).map_err(|_| bad("truncated values"))?;
            values.push(f32::from_le_bytes(b) as f64);
        }
        let pixels = Array3::from_shape_vec((h, w, c), values).map_err(|_| bad("bad shape"))?;
        out.push(Record { id, domain, class_name, pixels: Arc::new(pixels) });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Toy generator

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub num_seen: usize,
    pub num_unseen: usize,
    pub per_class_per_domain: usize,
    pub feature_dim: usize,
    pub domain_offset_scale: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            num_seen: 8,
            num_unseen: 4,
            per_class_per_domain: 20,
            feature_dim: 16,
            domain_offset_scale: 0.5,
            noise_scale: 0.1,
            seed: 0,
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let mut problems = Vec::new();
        if self.num_seen < 2 {
            problems.push("num_seen must be at least 2");
        }
        if self.num_unseen < 2 {
            problems.push("num_unseen must be at least 2");
        }
        if self.per_class_per_domain < 2 {
            problems.push("per_class_per_domain must be at least 2");
        }
        if self.feature_dim == 0 {
            problems.push("feature_dim must be positive");
        }
        if !(self.domain_offset_scale >= 0.0 && self.domain_offset_scale.is_finite()) {
            problems.push("domain_offset_scale must be a finite nonnegative number");
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            problems.push("noise_scale must be a finite nonnegative number");
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(DataError::InvalidSpec(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub manifest: SplitManifest,
    /// Unit-norm class prototypes in class order (seen first, then unseen).
    pub prototypes: Vec<(String, Vec<f64>)>,
    /// Raw features map to stored pixels as `(raw - affine_lo) / affine_scale`.
    pub affine_lo: f64,
    pub affine_scale: f64,
}

impl ToyDataset {
    pub fn prototype(&self, class_name: &str) -> Option<&[f64]> {
        self.prototypes.iter().find(|(c, _)| c == class_name).map(|(_, v)| v.as_slice())
    }

    /// Undoes the affine encoding of a sample's stored values.
    pub fn raw_features(&self, sample: &Sample) -> Option<Vec<f64>> {
        match &sample.image {
            SampleImage::Pixels(p) => Some(p.iter().map(|v| v * self.affine_scale + self.affine_lo).collect()),
            SampleImage::File { .. } => None,
        }
    }
}

/// Writes every toy sample as an `h×w` RGB PNG under `dir/images` and
/// returns the same benchmark with file-backed samples. Needs
/// `feature_dim == h * w * 3`; values are quantized to 8 bits on the way.
pub fn write_toy_images(toy: &ToyDataset, dir: &Path, (h, w): (usize, usize)) -> Result<SplitManifest, DataError> {
    let convert = |samples: &[Sample]| -> Result<Vec<Sample>, DataError> {
        samples
            .iter()
            .map(|s| {
                let SampleImage::Pixels(p) = &s.image else {
                    return Err(DataError::InvalidSpec(format!("sample {} is already file-backed", s.id)));
                };
                if p.len() != h * w * 3 {
                    return Err(DataError::InvalidSpec(format!("{} values do not fill a {h}x{w} RGB image", p.len())));
                }
                let img = Array3::from_shape_vec((h, w, 3), p.iter().copied().collect()).expect("checked length");
                let path = dir.join("images").join(s.domain.as_str()).join(&s.class_name).join(format!("{}.png", s.id));
                fs::create_dir_all(path.parent().expect("has parent"))?;
                let bytes = imaging::encode_png(&img)
                    .map_err(|e| DataError::Image { path: path.clone(), message: e.to_string() })?;
                fs::write(&path, bytes)?;
                Ok(Sample { image: SampleImage::File { path, lazy: false }, ..s.clone() })
            })
            .collect()
    };
    let m = &toy.manifest;
    let mut metadata = m.metadata.clone();
    metadata.insert("image_size".into(), json!([h, w, 3]));
    Ok(SplitManifest {
        name: format!("{}-images", m.name),
        seen_classes: m.seen_classes.clone(),
        unseen_classes: m.unseen_classes.clone(),
        train_samples: convert(&m.train_samples)?,
        test_samples: convert(&m.test_samples)?,
        metadata,
    })
}

pub fn toy_class_name(seen: bool, i: usize) -> String {
    if seen {
        format!("seen_{i:02}")
    } else {
        format!("unseen_{i:02}")
    }
}

/// Generates a toy benchmark: each sample is `mu_c + delta_domain + noise`,
/// rescaled into `[0, 1]` and stored as a `1×1×feature_dim` image.
pub fn generate_toy_dataset(spec: &ToySpec) -> Result<ToyDataset, DataError> {
    spec.validate()?;
    let d = spec.feature_dim;
    let mut proto_rng = rng_for(spec.seed, "toy/prototypes");
    let mut offset_rng = rng_for(spec.seed, "toy/offsets");
    let mut noise_rng = rng_for(spec.seed, "toy/noise");

    let unit_gaussian = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-12 {
                return v.into_iter().map(|x| x / n).collect();
            }
        }
    };

    let seen: Vec<String> = (0..spec.num_seen).map(|i| toy_class_name(true, i)).collect();
    let unseen: Vec<String> = (0..spec.num_unseen).map(|i| toy_class_name(false, i)).collect();
    let prototypes: Vec<(String, Vec<f64>)> = seen
        .iter()
        .chain(&unseen)
        .map(|c| (c.clone(), unit_gaussian(&mut proto_rng).into_iter().map(round_f32).collect()))
        .collect();
    let offsets: Vec<(Domain, Vec<f64>)> = [Domain::Sketch, Domain::Photo]
        .into_iter()
        .map(|dom| {
            let dir = unit_gaussian(&mut offset_rng);
            (dom, dir.into_iter().map(|x| x * spec.domain_offset_scale).collect())
        })
        .collect();

    struct Raw {
        id: String,
        domain: Domain,
        class_name: String,
        split: Split,
        values: Vec<f64>,
    }
    let mut raw = Vec::new();
    for (ci, (class_name, mu)) in prototypes.iter().enumerate() {
        let split = if ci < spec.num_seen { Split::Train } else { Split::Test };
        for (domain, delta) in &offsets {
            for i in 0..spec.per_class_per_domain {
                let values: Vec<f64> = (0..d)
                    .map(|k| {
                        let eps: f64 = StandardNormal.sample(&mut noise_rng);
                        mu[k] + delta[k] + spec.noise_scale * eps
                    })
                    .collect();
                raw.push(Raw {
                    id: format!("{}_{}_{:03}", domain.as_str(), class_name, i),
                    domain: *domain,
                    class_name: class_name.clone(),
                    split,
                    values,
                });
            }
        }
    }

    let lo = raw.iter().flat_map(|r| r.values.iter()).copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().flat_map(|r| r.values.iter()).copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = round_f32(lo);
    let scale = if hi - lo > 0.0 { round_f32(hi - lo) } else { 1.0 };

    let mut train_samples = Vec::new();
    let mut test_samples = Vec::new();
    for r in raw {
        let encoded: Vec<f64> = r.values.iter().map(|v| round_f32(((v - lo) / scale).clamp(0.0, 1.0))).collect();
        let pixels = Array3::from_shape_vec((1, 1, d), encoded).expect("toy shape");
        let sample = Sample {
            id: r.id,
            domain: r.domain,
            class_name: r.class_name,
            split: r.split,
            image: SampleImage::Pixels(Arc::new(pixels)),
        };
        match r.split {
            Split::Train => train_samples.push(sample),
            Split::Test => test_samples.push(sample),
        }
    }

    let mut metadata = Map::new();
    metadata.insert("source".into(), json!("toy"));
    metadata.insert("affine_lo".into(), json!(lo));
    metadata.insert("affine_scale".into(), json!(scale));
    metadata.insert("toy_spec".into(), serde_json::to_value(spec).map_err(io::Error::other)?);
    let manifest = SplitManifest {
        name: format!("toy-seed{}", spec.seed),
        seen_classes: seen,
        unseen_classes: unseen,
        train_samples,
        test_samples,
        metadata,
    };
    Ok(ToyDataset { manifest, prototypes, affine_lo: lo, affine_scale: scale })
}

// ---------------------------------------------------------------------------
// Ingestion of an on-disk dataset layout

/// Class partition convention for a benchmark. The four built-in templates
/// cover the Sketchy (two splits), TU-Berlin and QuickDraw conventions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestTemplate {
    pub name: String,
    pub source: String,
    pub convention: String,
    pub seen_count: usize,
    pub unseen_count: usize,
    /// Seed used to draw the unseen classes when no explicit list is given.
    #[serde(default)]
    pub selection_seed: u64,
    /// Explicit unseen class list; overrides seeded selection.
    #[serde(default)]
    pub unseen_classes: Option<Vec<String>>,
}

const BUILTIN_TEMPLATES: [(&str, &str); 4] = [
    ("sketchy-split1", include_str!("../templates/sketchy-split1.json")),
    ("sketchy-split2", include_str!("../templates/sketchy-split2.json")),
    ("tuberlin", include_str!("../templates/tuberlin.json")),
    ("quickdraw", include_str!("../templates/quickdraw.json")),
];

impl ManifestTemplate {
    pub fn builtin_names() -> Vec<&'static str> {
        BUILTIN_TEMPLATES.iter().map(|(n, _)| *n).collect()
    }

    pub fn builtin(name: &str) -> Option<ManifestTemplate> {
        BUILTIN_TEMPLATES
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, text)| serde_json::from_str(text).expect("built-in template parses"))
    }

    pub fn load(path: &Path) -> Result<ManifestTemplate, DataError> {
        let text = fs::read_to_string(path).map_err(|_| DataError::MissingFile(path.to_path_buf()))?;
        serde_json::from_str(&text).map_err(|e| DataError::InvalidManifest(e.to_string()))
    }

    /// Splits `classes` into (seen, unseen), both sorted.
    pub fn partition(&self, classes: &BTreeSet<String>) -> Result<(Vec<String>, Vec<String>), DataError> {
        if classes.len() != self.seen_count + self.unseen_count {
            return Err(DataError::InvalidManifest(format!(
                "template '{}' expects {} classes, found {}",
                self.name,
                self.seen_count + self.unseen_count,
                classes.len()
            )));
        }
        let unseen: BTreeSet<String> = match &self.unseen_classes {
            Some(list) => {
                let set: BTreeSet<String> = list.iter().cloned().collect();
                if let Some(missing) = set.iter().find(|c| !classes.contains(*c)) {
                    return Err(DataError::InvalidManifest(format!(
                        "unseen class '{missing}' of template '{}' is not present in the dataset",
                        self.name
                    )));
                }
                if set.len() != self.unseen_count {
                    return Err(DataError::InvalidManifest(format!(
                        "template '{}' lists {} unseen classes but declares {}",
                        self.name,
                        set.len(),
                        self.unseen_count
                    )));
                }
                set
            }
            None => {
                let mut all: Vec<String> = classes.iter().cloned().collect();
                let mut rng = rng_for(self.selection_seed, "template/unseen");
                all.shuffle(&mut rng);
                all.into_iter().take(self.unseen_count).collect()
            }
        };
        let seen = classes.iter().filter(|c| !unseen.contains(*c)).cloned().collect();
        Ok((seen, unseen.into_iter().collect()))
    }
}

/// Image files found under `<root>/{sketch,photo}/<class>/`.
#[derive(Debug, Default)]
pub struct LayoutScan {
    pub classes: BTreeSet<String>,
    pub files: BTreeMap<(Domain, String), Vec<PathBuf>>,
}

/// Scans the documented layout `<root>/sketch/<class>/*.{png,jpg,jpeg}` and
/// `<root>/photo/<class>/*`. Classes are the union of class folders.
pub fn scan_layout(root: &Path) -> Result<LayoutScan, DataError> {
    let mut scan = LayoutScan::default();
    for domain in [Domain::Sketch, Domain::Photo] {
        let dir = root.join(domain.as_str());
        if !dir.is_dir() {
            return Err(DataError::MissingFile(dir));
        }
        let mut class_dirs: Vec<PathBuf> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        class_dirs.sort();
        for cdir in class_dirs {
            let class = cdir.file_name().unwrap_or_default().to_string_lossy().into_owned();
            let mut files: Vec<PathBuf> = fs::read_dir(&cdir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.extension()
                        .and_then(|x| x.to_str())
                        .is_some_and(|x| IMAGE_EXTENSIONS.contains(&x.to_ascii_lowercase().as_str()))
                })
                .collect();
            files.sort();
            scan.classes.insert(class.clone());
            scan.files.insert((domain, class), files);
        }
    }
    Ok(scan)
}

/// Builds a manifest by scanning `root` and partitioning its classes with `template`.
pub fn prepare_from_layout(template: &ManifestTemplate, root: &Path) -> Result<SplitManifest, DataError> {
    let scan = scan_layout(root)?;
    let (seen, unseen) = template.partition(&scan.classes)?;
    let seen_set: HashSet<&str> = seen.iter().map(String::as_str).collect();
    let mut train_samples = Vec::new();
    let mut test_samples = Vec::new();
    for ((domain, class), files) in &scan.files {
        let split = if seen_set.contains(class.as_str()) { Split::Train } else { Split::Test };
        for f in files {
            let stem = f.file_stem().unwrap_or_default().to_string_lossy();
            let sample = Sample {
                id: format!("{}/{}/{}", domain.as_str(), class, stem),
                domain: *domain,
                class_name: class.clone(),
                split,
                image: SampleImage::File { path: f.clone(), lazy: false },
            };
            match split {
                Split::Train => train_samples.push(sample),
                Split::Test => test_samples.push(sample),
            }
        }
    }
    let mut metadata = Map::new();
    metadata.insert("source".into(), json!(template.source));
    metadata.insert("convention".into(), json!(template.convention));
    metadata.insert("template".into(), json!(template.name));
    Ok(SplitManifest {
        name: template.name.clone(),
        seen_classes: seen,
        unseen_classes: unseen,
        train_samples,
        test_samples,
        metadata,
    })
}
