//! Feature extraction, cosine ranking and retrieval metrics.
//!
//! Index rows are stored as L2-normalized float32. Ranking sorts by cosine
//! score, highest first, breaking ties by ascending id. Average precision at
//! `k` divides by `min(R, k)` where `R` is the number of relevant gallery
//! items; [`ApDenominator::Relevant`] switches to plain `R`. Precision at `k`
//! is `hits / k`. Queries without any relevant gallery item are excluded from
//! the means and counted in the report.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::archive::{Archive, ArchiveError};
use crate::backbone::{stack_batch, BackboneError, EncoderState};
use crate::datamodel::{DataError, Domain, Sample};
use crate::imaging::{decode_and_preprocess, ImageError};
use crate::numeric::{rng_for, round_f32};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("empty gallery")]
    EmptyGallery,
    #[error("zero query vector")]
    ZeroVector,
    #[error("no relevant items for the query")]
    NoRelevantItems,
    #[error("every query lacks relevant gallery items")]
    NoScorableQueries,
    #[error("class {class} has {have} sketches, need at least {need}")]
    InsufficientSketches { class: String, have: usize, need: usize },
    #[error("samples mix domains")]
    MixedDomains,
    #[error("k must lie in 1..={gallery}, got {k}")]
    BadK { k: usize, gallery: usize },
    #[error("invalid feature index: {0}")]
    InvalidIndex(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureIndex {
    pub ids: Vec<String>,
    pub labels: Vec<String>,
    /// `M×d`, rows L2-normalized then rounded to float32.
    pub vectors: Array2<f32>,
    pub domain: Domain,
}

/// Normalizes a vector and rounds it to float32 precision, the form stored
/// in an index. Queries go through the same map so a gallery item queried
/// with its own features scores exactly 1.
pub fn normalize_f32(v: ArrayView1<f64>) -> Result<Array1<f32>, RetrievalError> {
    let n = v.dot(&v).sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(RetrievalError::ZeroVector);
    }
    Ok(v.mapv(|x| round_f32(x / n) as f32))
}

impl FeatureIndex {
    pub fn from_features(
        ids: Vec<String>,
        labels: Vec<String>,
        features: &Array2<f64>,
        domain: Domain,
    ) -> Result<FeatureIndex, RetrievalError> {
        if ids.is_empty() {
            return Err(RetrievalError::EmptyGallery);
        }
        if ids.len() != labels.len() || ids.len() != features.nrows() {
            return Err(RetrievalError::InvalidIndex(format!(
                "{} ids, {} labels, {} rows",
                ids.len(),
                labels.len(),
                features.nrows()
            )));
        }
        let mut vectors = Array2::zeros(features.raw_dim());
        for (i, row) in features.rows().into_iter().enumerate() {
            vectors.row_mut(i).assign(&normalize_f32(row)?);
        }
        Ok(FeatureIndex { ids, labels, vectors, domain })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn row(&self, i: usize) -> Array1<f64> {
        self.vectors.row(i).mapv(|v| v as f64)
    }

    /// Subset of rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> FeatureIndex {
        FeatureIndex {
            ids: rows.iter().map(|&i| self.ids[i].clone()).collect(),
            labels: rows.iter().map(|&i| self.labels[i].clone()).collect(),
            vectors: self.vectors.select(Axis(0), rows),
            domain: self.domain,
        }
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive {
            metadata: json!({
                "kind": "features",
                "domain": self.domain.as_str(),
                "ids": self.ids,
                "labels": self.labels,
            }),
            ..Default::default()
        };
        a.insert("features", "features", vec![self.len(), self.dim()], self.vectors.iter().copied().collect());
        a
    }

    pub fn save(&self, dir: &Path) -> Result<(), RetrievalError> {
        Ok(self.to_archive().save(dir)?)
    }

    pub fn load(dir: &Path) -> Result<FeatureIndex, RetrievalError> {
        let a = Archive::load(dir)?;
        let bad = |m: &str| RetrievalError::InvalidIndex(m.into());
        if a.metadata.get("kind").and_then(|v| v.as_str()) != Some("features") {
            return Err(bad("archive is not a feature index"));
        }
        let strings = |key: &str| -> Result<Vec<String>, RetrievalError> {
            serde_json::from_value(a.metadata.get(key).cloned().unwrap_or_default()).map_err(|_| bad(key))
        };
        let ids = strings("ids")?;
        let labels = strings("labels")?;
        let domain = a
            .metadata
            .get("domain")
            .and_then(|v| v.as_str())
            .and_then(Domain::parse)
            .ok_or_else(|| bad("domain"))?;
        let arr = a.arrays.get("features").ok_or_else(|| bad("missing features array"))?;
        if arr.shape.len() != 2 || arr.shape[0] != ids.len() || ids.len() != labels.len() {
            return Err(bad("shape does not match ids/labels"));
        }
        let vectors = Array2::from_shape_vec((arr.shape[0], arr.shape[1]), arr.data.clone()).map_err(|e| bad(&e.to_string()))?;
        if ids.is_empty() {
            return Err(RetrievalError::EmptyGallery);
        }
        Ok(FeatureIndex { ids, labels, vectors, domain })
    }
}

/// Encodes samples with the student and builds a normalized index. No text
/// features are involved.
pub fn extract_index(student: &EncoderState, samples: &[&Sample]) -> Result<FeatureIndex, RetrievalError> {
    let first = samples.first().ok_or(RetrievalError::EmptyGallery)?;
    if samples.iter().any(|s| s.domain != first.domain) {
        return Err(RetrievalError::MixedDomains);
    }
    let input = student.spec.input_size;
    let chunks: Vec<Array2<f64>> = samples
        .par_chunks(64)
        .map(|chunk| -> Result<Array2<f64>, RetrievalError> {
            let pixels = chunk.iter().map(|s| s.pixels(input)).collect::<Result<Vec<_>, _>>()?;
            Ok(student.forward(&stack_batch(&pixels)?)?.features)
        })
        .collect::<Result<_, _>>()?;
    let views: Vec<_> = chunks.iter().map(|c| c.view()).collect();
    let features = ndarray::concatenate(Axis(0), &views).expect("equal widths");
    FeatureIndex::from_features(
        samples.iter().map(|s| s.id.clone()).collect(),
        samples.iter().map(|s| s.class_name.clone()).collect(),
        &features,
        first.domain,
    )
}

/// Sequential sums in one fixed order, so a self-match scores exactly 1.
fn cosine_scores(query: ArrayView1<f64>, index: &FeatureIndex) -> Vec<f64> {
    let qq: f64 = query.iter().fold(0.0, |acc, &a| acc + a * a);
    index
        .vectors
        .rows()
        .into_iter()
        .map(|r| {
            let (mut dot, mut rr) = (0.0, 0.0);
            for (&a, &b) in query.iter().zip(r.iter()) {
                let b = b as f64;
                dot += a * b;
                rr += b * b;
            }
            dot / (qq * rr).sqrt()
        })
        .collect()
}

/// Gallery positions sorted by descending score, ties by ascending id.
fn ranked_positions(scores: &[f64], index: &FeatureIndex) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| index.ids[a].cmp(&index.ids[b])));
    order
}

pub fn rank(query: ArrayView1<f64>, index: &FeatureIndex) -> Result<Vec<(String, f64)>, RetrievalError> {
    let qq = query.dot(&query);
    if !(qq > 0.0) || !qq.is_finite() {
        return Err(RetrievalError::ZeroVector);
    }
    let scores = cosine_scores(query, index);
    Ok(ranked_positions(&scores, index).into_iter().map(|i| (index.ids[i].clone(), scores[i])).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApDenominator {
    /// `min(R, k)`.
    #[default]
    MinRelevantK,
    /// `R`.
    Relevant,
}

/// Average precision over the first `k` ranks (`None` = all ranks) of a
/// relevance list covering the whole ranked gallery.
pub fn average_precision(rel: &[bool], k: Option<usize>, denominator: ApDenominator) -> Result<f64, RetrievalError> {
    let total = rel.iter().filter(|&&r| r).count();
    if total == 0 {
        return Err(RetrievalError::NoRelevantItems);
    }
    let cutoff = k.unwrap_or(rel.len()).min(rel.len());
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, &is_rel) in rel.iter().take(cutoff).enumerate() {
        if is_rel {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    let denom = match (k, denominator) {
        (None, _) | (Some(_), ApDenominator::Relevant) => total,
        (Some(k), ApDenominator::MinRelevantK) => total.min(k),
    };
    Ok(sum / denom as f64)
}

pub fn precision_at(rel: &[bool], k: usize) -> f64 {
    rel.iter().take(k).filter(|&&r| r).count() as f64 / k as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Extra cutoffs reported as `map@k` / `prec@k` alongside the standard four.
    pub ks: Vec<usize>,
    pub ap_denominator: ApDenominator,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { ks: Vec::new(), ap_denominator: ApDenominator::MinRelevantK }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub map_all: f64,
    pub map_at_200: f64,
    pub prec_at_100: f64,
    pub prec_at_200: f64,
    /// `map@k` and `prec@k` for any extra cutoffs.
    pub extra: BTreeMap<String, f64>,
    /// AP@all of each scored query, in query order.
    pub per_query_ap: Vec<f64>,
    pub num_queries: usize,
    pub excluded_queries: usize,
    pub gallery_size: usize,
}

struct QueryScores {
    ap_all: f64,
    ap_at: Vec<f64>,
    prec_at: Vec<f64>,
}

pub fn evaluate(queries: &FeatureIndex, gallery: &FeatureIndex, opts: &EvalOptions) -> Result<MetricReport, RetrievalError> {
    if gallery.is_empty() {
        return Err(RetrievalError::EmptyGallery);
    }
    if queries.dim() != gallery.dim() {
        return Err(RetrievalError::InvalidIndex(format!("query dim {} vs gallery dim {}", queries.dim(), gallery.dim())));
    }
    let mut ks: Vec<usize> = vec![200, 100];
    ks.extend(opts.ks.iter().copied().filter(|&k| k > 0));
    let per_query: Vec<Option<QueryScores>> = (0..queries.len())
        .into_par_iter()
        .map(|q| {
            let query = queries.row(q);
            let scores = cosine_scores(query.view(), gallery);
            let rel: Vec<bool> =
                ranked_positions(&scores, gallery).into_iter().map(|i| gallery.labels[i] == queries.labels[q]).collect();
            let ap_all = average_precision(&rel, None, opts.ap_denominator).ok()?;
            Some(QueryScores {
                ap_all,
                ap_at: ks.iter().map(|&k| average_precision(&rel, Some(k), opts.ap_denominator).expect("has relevant")).collect(),
                prec_at: ks.iter().map(|&k| precision_at(&rel, k)).collect(),
            })
        })
        .collect();

    let scored: Vec<&QueryScores> = per_query.iter().flatten().collect();
    if scored.is_empty() {
        return Err(RetrievalError::NoScorableQueries);
    }
    let n = scored.len() as f64;
    let mean = |f: &dyn Fn(&QueryScores) -> f64| scored.iter().map(|s| f(s)).sum::<f64>() / n;
    let mut extra = BTreeMap::new();
    for (j, &k) in ks.iter().enumerate().skip(2) {
        extra.insert(format!("map@{k}"), mean(&|s| s.ap_at[j]));
        extra.insert(format!("prec@{k}"), mean(&|s| s.prec_at[j]));
    }
    Ok(MetricReport {
        map_all: mean(&|s| s.ap_all),
        map_at_200: mean(&|s| s.ap_at[0]),
        prec_at_100: mean(&|s| s.prec_at[1]),
        prec_at_200: mean(&|s| s.prec_at[0]),
        extra,
        per_query_ap: scored.iter().map(|s| s.ap_all).collect(),
        num_queries: scored.len(),
        excluded_queries: per_query.len() - scored.len(),
        gallery_size: gallery.len(),
    })
}

/// Sketch-to-sketch retrieval: per class, `queries_per_class` seeded
/// queries; the remaining sketches form the gallery.
pub fn zs_sbsr_evaluate(
    sketches: &FeatureIndex,
    queries_per_class: usize,
    seed: u64,
    opts: &EvalOptions,
) -> Result<MetricReport, RetrievalError> {
    let classes: BTreeSet<&String> = sketches.labels.iter().collect();
    let mut query_rows = Vec::new();
    for class in classes {
        let mut rows: Vec<usize> = (0..sketches.len()).filter(|&i| &sketches.labels[i] == class).collect();
        if rows.len() < queries_per_class + 1 {
            return Err(RetrievalError::InsufficientSketches { class: class.clone(), have: rows.len(), need: queries_per_class + 1 });
        }
        rows.shuffle(&mut rng_for(seed, &format!("sbsr/{class}")));
        query_rows.extend_from_slice(&rows[..queries_per_class]);
    }
    query_rows.sort_unstable();
    let is_query: BTreeSet<usize> = query_rows.iter().copied().collect();
    let gallery_rows: Vec<usize> = (0..sketches.len()).filter(|i| !is_query.contains(i)).collect();
    evaluate(&sketches.select(&query_rows), &sketches.select(&gallery_rows), opts)
}

/// Sketch queries against the photo gallery, both from the manifest's test
/// split.
pub fn evaluate_manifest(
    student: &EncoderState,
    manifest: &crate::datamodel::SplitManifest,
    opts: &EvalOptions,
) -> Result<MetricReport, RetrievalError> {
    let queries = extract_index(student, &manifest.test_by_domain(Domain::Sketch))?;
    let gallery = extract_index(student, &manifest.test_by_domain(Domain::Photo))?;
    evaluate(&queries, &gallery, opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub id: String,
    pub class: String,
    pub score: f64,
}

/// Query vector for an already preprocessed image.
pub fn query_vector(student: &EncoderState, pixels: &ndarray::Array3<f64>) -> Result<Array1<f64>, RetrievalError> {
    let out = student.forward(&stack_batch(std::slice::from_ref(pixels))?)?;
    Ok(normalize_f32(out.features.row(0))?.mapv(|v| v as f64))
}

/// Top-`k` gallery items for an encoded image. Shared by the CLI and the
/// HTTP service so both produce identical rankings.
pub fn retrieve_image(
    student: &EncoderState,
    gallery: &FeatureIndex,
    image_bytes: &[u8],
    k: usize,
) -> Result<Vec<RetrievalHit>, RetrievalError> {
    if k == 0 || k > gallery.len() {
        return Err(RetrievalError::BadK { k, gallery: gallery.len() });
    }
    let pixels = decode_and_preprocess(image_bytes, student.spec.input_size)?;
    let q = query_vector(student, &pixels)?;
    let scores = cosine_scores(q.view(), gallery);
    Ok(ranked_positions(&scores, gallery)
        .into_iter()
        .take(k)
        .map(|i| RetrievalHit { id: gallery.ids[i].clone(), class: gallery.labels[i].clone(), score: scores[i] })
        .collect())
}
