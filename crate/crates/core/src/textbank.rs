//! Prompt templates, text-embedding providers and the frozen text classifier.
//!
//! Text features are computed offline by a [`TextProvider`] and cached as
//! JSON. Two providers ship: a seeded stub (hash of provider name and prompt
//! drawn into a Gaussian, then normalized) and an importer for externally
//! computed `prompt -> vector` files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const PLACEHOLDER: &str = "[class]";

#[derive(Debug, Error)]
pub enum TextError {
    #[error("bad template: {0}")]
    BadTemplate(String),
    #[error("provider dim mismatch: {0}")]
    ProviderDimMismatch(String),
    #[error("empty class list")]
    EmptyClassList,
    #[error("text bank not normalized: {0}")]
    NotNormalized(String),
    #[error("unknown provider '{0}'")]
    UnknownProvider(String),
    #[error("missing embedding for prompt '{0}'")]
    MissingPrompt(String),
    #[error("bad embedding cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PromptTemplate {
    pattern: String,
}

impl PromptTemplate {
    pub fn new(pattern: &str) -> Result<Self, TextError> {
        match pattern.matches(PLACEHOLDER).count() {
            1 => Ok(PromptTemplate { pattern: pattern.to_string() }),
            n => Err(TextError::BadTemplate(format!("'{pattern}' has {n} placeholders, expected exactly one"))),
        }
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }
}

impl TryFrom<String> for PromptTemplate {
    type Error = TextError;
    fn try_from(s: String) -> Result<Self, TextError> {
        PromptTemplate::new(&s)
    }
}

impl From<PromptTemplate> for String {
    fn from(t: PromptTemplate) -> String {
        t.pattern
    }
}

pub fn fill_template(t: &PromptTemplate, class_name: &str) -> Result<String, TextError> {
    if class_name.trim().is_empty() {
        return Err(TextError::BadTemplate("class name is empty".into()));
    }
    Ok(t.pattern.replace(PLACEHOLDER, &class_name.replace('_', " ")))
}

/// Prompt choices compared in the prompt ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PromptMode {
    /// Trainable classifier instead of text features.
    Classical,
    AClass,
    APhotoOfClass,
    Ensemble,
}

pub const ENSEMBLE_TEMPLATES: [&str; 7] = [
    "a photo of [class]",
    "a sketch of [class]",
    "a drawing of [class]",
    "a photo of the [class]",
    "a photo of a small [class]",
    "a photo of a big [class]",
    "a black and white photo of the [class]",
];

impl PromptMode {
    pub fn templates(&self) -> Vec<PromptTemplate> {
        let patterns: &[&str] = match self {
            PromptMode::Classical => &[],
            PromptMode::AClass => &["a [class]"],
            PromptMode::APhotoOfClass => &["a photo of [class]"],
            PromptMode::Ensemble => &ENSEMBLE_TEMPLATES,
        };
        patterns.iter().map(|p| PromptTemplate::new(p).expect("built-in template")).collect()
    }

    pub fn embed_mode(&self) -> EmbedMode {
        match self {
            PromptMode::Ensemble => EmbedMode::Ensemble,
            _ => EmbedMode::Single,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedMode {
    Single,
    Ensemble,
}

/// Output widths of the CLIP text towers.
pub fn known_text_dim(encoder: &str) -> Option<usize> {
    match encoder {
        "RN50" => Some(1024),
        "RN50x4" => Some(640),
        "ViT-B/16" | "ViT-B/32" => Some(512),
        "ViT-L/14" => Some(768),
        _ => None,
    }
}

pub trait TextProvider {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, prompt: &str) -> Result<Vec<f64>, TextError>;
}

/// Deterministic offline provider: sha256(name, prompt) seeds a Gaussian draw.
#[derive(Debug, Clone)]
pub struct StubProvider {
    name: String,
    dim: usize,
}

impl StubProvider {
    pub fn new(name: &str, dim: usize) -> Self {
        StubProvider { name: name.to_string(), dim }
    }

    /// Stub with the dimension of a known text encoder.
    pub fn for_encoder(name: &str) -> Result<Self, TextError> {
        known_text_dim(name).map(|d| StubProvider::new(name, d)).ok_or_else(|| TextError::UnknownProvider(name.into()))
    }
}

impl TextProvider for StubProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, prompt: &str) -> Result<Vec<f64>, TextError> {
        let mut h = Sha256::new();
        h.update(self.name.as_bytes());
        h.update([0u8]);
        h.update(prompt.as_bytes());
        let seed: [u8; 32] = h.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(seed);
        let v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        Ok(normalize(v))
    }
}

/// Embeddings computed elsewhere, in a JSON file
/// `{"encoder": str, "dim": int, "prompts": {prompt: [float, ...]}}`.
#[derive(Debug, Clone)]
pub struct ImportedProvider {
    name: String,
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

#[derive(Deserialize)]
struct ImportFile {
    encoder: String,
    dim: usize,
    prompts: BTreeMap<String, Vec<f64>>,
}

impl ImportedProvider {
    pub fn load(path: &Path) -> Result<Self, TextError> {
        let text = fs::read_to_string(path)?;
        let f: ImportFile = serde_json::from_str(&text).map_err(|e| TextError::Cache(e.to_string()))?;
        for (prompt, v) in &f.prompts {
            if v.len() != f.dim {
                return Err(TextError::ProviderDimMismatch(format!("'{prompt}' has {} values, file declares {}", v.len(), f.dim)));
            }
        }
        Ok(ImportedProvider { name: f.encoder, dim: f.dim, vectors: f.prompts })
    }
}

impl TextProvider for ImportedProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, prompt: &str) -> Result<Vec<f64>, TextError> {
        self.vectors.get(prompt).cloned().ok_or_else(|| TextError::MissingPrompt(prompt.into()))
    }
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEmbedding {
    pub name: String,
    pub prompts: Vec<String>,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextBank {
    pub encoder_name: String,
    pub dim: usize,
    pub classes: Vec<ClassEmbedding>,
    pub normalized: bool,
}

/// Embeds every class. Single mode takes exactly one template and runs
/// through the ensemble path, so a one-template ensemble is identical.
pub fn embed_classes(
    provider: &dyn TextProvider,
    templates: &[PromptTemplate],
    classes: &[String],
    mode: EmbedMode,
) -> Result<TextBank, TextError> {
    if classes.is_empty() {
        return Err(TextError::EmptyClassList);
    }
    if templates.is_empty() {
        return Err(TextError::BadTemplate("no templates given".into()));
    }
    if mode == EmbedMode::Single && templates.len() != 1 {
        return Err(TextError::BadTemplate(format!("single mode takes one template, got {}", templates.len())));
    }
    let dim = provider.dim();
    let mut out = Vec::with_capacity(classes.len());
    for name in classes {
        let mut acc = vec![0.0f64; dim];
        let mut prompts = Vec::with_capacity(templates.len());
        for t in templates {
            let prompt = fill_template(t, name)?;
            let v = provider.embed(&prompt)?;
            if v.len() != dim {
                return Err(TextError::ProviderDimMismatch(format!(
                    "provider {} declares dim {dim} but returned {} values",
                    provider.name(),
                    v.len()
                )));
            }
            for (a, x) in acc.iter_mut().zip(normalize(v)) {
                *a += x;
            }
            prompts.push(prompt);
        }
        let k = templates.len() as f64;
        let mean: Vec<f64> = acc.into_iter().map(|a| a / k).collect();
        let vector = normalize(mean).into_iter().map(|x| x as f32).collect();
        out.push(ClassEmbedding { name: name.clone(), prompts, vector });
    }
    Ok(TextBank { encoder_name: provider.name().to_string(), dim, classes: out, normalized: true })
}

/// Row `i` of the frozen classifier is the text feature of class `i`. The
/// newtype exposes only read access.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenMatrix(Array2<f64>);

impl FrozenMatrix {
    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn nrows(&self) -> usize {
        self.0.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.0.ncols()
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> FrozenMatrix {
        FrozenMatrix(self.0.select(ndarray::Axis(0), rows))
    }
}

pub fn classifier_matrix(bank: &TextBank) -> Result<FrozenMatrix, TextError> {
    if !bank.normalized {
        return Err(TextError::NotNormalized("bank is flagged unnormalized".into()));
    }
    bank.check_norms()?;
    let mut m = Array2::zeros((bank.classes.len(), bank.dim));
    for (i, c) in bank.classes.iter().enumerate() {
        for (j, v) in c.vector.iter().enumerate() {
            m[[i, j]] = *v as f64;
        }
    }
    Ok(FrozenMatrix(m))
}

fn nine_digits(v: f32) -> Value {
    let s = format!("{:.8e}", v);
    json!(s.parse::<f64>().expect("formatted float parses"))
}

impl TextBank {
    /// Bank whose rows are the given vectors, e.g. toy class prototypes.
    pub fn from_vectors(encoder_name: &str, names: &[String], vectors: ArrayView2<f64>) -> Result<TextBank, TextError> {
        if names.is_empty() {
            return Err(TextError::EmptyClassList);
        }
        if names.len() != vectors.nrows() {
            return Err(TextError::ProviderDimMismatch(format!("{} names for {} vectors", names.len(), vectors.nrows())));
        }
        let classes = names
            .iter()
            .zip(vectors.rows())
            .map(|(n, row)| ClassEmbedding {
                name: n.clone(),
                prompts: vec![n.replace('_', " ")],
                vector: normalize(row.to_vec()).into_iter().map(|x| x as f32).collect(),
            })
            .collect();
        Ok(TextBank { encoder_name: encoder_name.into(), dim: vectors.ncols(), classes, normalized: true })
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    /// Sub-bank with the named classes, in the given order.
    pub fn subset(&self, names: &[String]) -> Option<TextBank> {
        let classes = names
            .iter()
            .map(|n| self.classes.iter().find(|c| &c.name == n).cloned())
            .collect::<Option<Vec<_>>>()?;
        Some(TextBank { classes, ..self.clone() })
    }

    pub fn check_norms(&self) -> Result<(), TextError> {
        for c in &self.classes {
            if c.vector.len() != self.dim {
                return Err(TextError::ProviderDimMismatch(format!("{} has {} values, bank dim {}", c.name, c.vector.len(), self.dim)));
            }
            let n = c.vector.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-5 {
                return Err(TextError::NotNormalized(format!("{} has norm {n}", c.name)));
            }
        }
        Ok(())
    }

    /// Cache JSON with floats written to 9 significant digits.
    pub fn to_json(&self) -> String {
        let classes: Vec<Value> = self
            .classes
            .iter()
            .map(|c| {
                json!({
                    "name": c.name,
                    "prompts": c.prompts,
                    "vector": c.vector.iter().map(|&v| nine_digits(v)).collect::<Vec<_>>(),
                })
            })
            .collect();
        let doc = json!({
            "encoder": self.encoder_name,
            "dim": self.dim,
            "normalized": self.normalized,
            "classes": classes,
        });
        serde_json::to_string_pretty(&doc).expect("serializable") + "\n"
    }

    pub fn from_json(text: &str) -> Result<TextBank, TextError> {
        #[derive(Deserialize)]
        struct Doc {
            encoder: String,
            dim: usize,
            normalized: bool,
            classes: Vec<ClassEmbedding>,
        }
        let d: Doc = serde_json::from_str(text).map_err(|e| TextError::Cache(e.to_string()))?;
        if d.classes.is_empty() {
            return Err(TextError::EmptyClassList);
        }
        let bank = TextBank { encoder_name: d.encoder, dim: d.dim, classes: d.classes, normalized: d.normalized };
        if bank.normalized {
            bank.check_norms()?;
        }
        Ok(bank)
    }

    pub fn save(&self, path: &Path) -> Result<(), TextError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TextBank, TextError> {
        TextBank::from_json(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(p: &str) -> PromptTemplate {
        PromptTemplate::new(p).unwrap()
    }

    #[test]
    fn fill_examples() {
        assert_eq!(fill_template(&t("a photo of [class]"), "cat").unwrap(), "a photo of cat");
        assert_eq!(fill_template(&t("a [class]"), "cat").unwrap(), "a cat");
        assert_eq!(fill_template(&t("[class]"), "sea_turtle").unwrap(), "sea turtle");
    }

    #[test]
    fn bad_templates() {
        assert!(PromptTemplate::new("a photo").is_err());
        assert!(PromptTemplate::new("[class] and [class]").is_err());
        assert!(fill_template(&t("[class]"), "").is_err());
    }

    #[test]
    fn known_dims() {
        assert_eq!(StubProvider::for_encoder("RN50").unwrap().dim(), 1024);
        assert_eq!(StubProvider::for_encoder("ViT-L/14").unwrap().dim(), 768);
        assert!(StubProvider::for_encoder("nope").is_err());
    }

    #[test]
    fn empty_class_list() {
        let p = StubProvider::new("stub", 4);
        assert!(matches!(embed_classes(&p, &[t("[class]")], &[], EmbedMode::Single), Err(TextError::EmptyClassList)));
    }

    #[test]
    fn cache_round_trip_is_exact() {
        let p = StubProvider::new("stub", 12);
        let names: Vec<String> = ["cat", "sea_turtle", "dog"].iter().map(|s| s.to_string()).collect();
        let bank = embed_classes(&p, &PromptMode::Ensemble.templates(), &names, EmbedMode::Ensemble).unwrap();
        let text = bank.to_json();
        let back = TextBank::from_json(&text).unwrap();
        assert_eq!(back, bank);
        assert_eq!(back.to_json(), text);
    }

    #[test]
    fn unnormalized_cache_is_rejected() {
        let text = r#"{"encoder":"x","dim":2,"normalized":true,"classes":[{"name":"a","prompts":["a"],"vector":[1.0,1.0]}]}"#;
        assert!(matches!(TextBank::from_json(text), Err(TextError::NotNormalized(_))));
    }
}
