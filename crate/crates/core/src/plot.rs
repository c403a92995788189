//! Figure data and SVG rendering: t-SNE scatter, visual-text similarity
//! heatmap and the adapter-scaling curve.
//!
//! Every figure is backed by a numeric file (CSV or JSON) written next to
//! it. The SVG is a thin rendering of the same numbers.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::count_parameters;
use crate::backbone::{stack_batch, BackboneError, EncoderState};
use crate::datamodel::{DataError, Domain, Sample, SplitManifest};
use crate::numeric::rng_for;
use crate::retrieval::{evaluate_manifest, EvalOptions, RetrievalError};
use crate::textbank::{classifier_matrix, TextBank, TextError};
use crate::trainer::{prepare_student, train, TrainConfig, TrainError};
use crate::tsne::{tsne, TsneConfig};

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("too few samples: {0}")]
    TooFewSamples(String),
    #[error("adapter count {count} exceeds {available} insertion points")]
    BadAdapterCount { count: usize, available: usize },
    #[error("text bank lacks class {0}")]
    MissingClass(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

fn encode(student: &EncoderState, samples: &[&Sample]) -> Result<Array2<f64>, PlotError> {
    let input = student.spec.input_size;
    let pixels = samples.iter().map(|s| s.pixels(input)).collect::<Result<Vec<_>, _>>()?;
    Ok(student.forward(&stack_batch(&pixels)?)?.features)
}

/// Picks `num_classes` unseen classes and `per_class` samples of each
/// domain per class, all seeded. Output order: class, then sketches, then photos.
fn pick_samples<'a>(
    manifest: &'a SplitManifest,
    num_classes: usize,
    per_class: usize,
    seed: u64,
) -> Result<(Vec<String>, Vec<&'a Sample>), PlotError> {
    if manifest.unseen_classes.len() < num_classes {
        return Err(PlotError::TooFewSamples(format!(
            "{num_classes} classes requested, manifest has {} unseen",
            manifest.unseen_classes.len()
        )));
    }
    let mut classes = manifest.unseen_classes.clone();
    classes.shuffle(&mut rng_for(seed, "plot/classes"));
    classes.truncate(num_classes);
    let chosen: BTreeSet<String> = classes.iter().cloned().collect();
    let classes: Vec<String> = manifest.unseen_classes.iter().filter(|c| chosen.contains(*c)).cloned().collect();
    let mut out = Vec::new();
    for class in &classes {
        for domain in [Domain::Sketch, Domain::Photo] {
            let mut pool: Vec<&Sample> =
                manifest.test_samples.iter().filter(|s| &s.class_name == class && s.domain == domain).collect();
            if pool.len() < per_class {
                return Err(PlotError::TooFewSamples(format!(
                    "class {class} has {} {} samples, {per_class} requested",
                    pool.len(),
                    domain.as_str()
                )));
            }
            pool.shuffle(&mut rng_for(seed, &format!("plot/{class}/{}", domain.as_str())));
            pool.truncate(per_class);
            pool.sort_by(|a, b| a.id.cmp(&b.id));
            out.extend(pool);
        }
    }
    Ok((classes, out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsnePoint {
    pub id: String,
    pub class: String,
    pub domain: Domain,
    pub x: f64,
    pub y: f64,
}

pub fn plot_tsne(
    student: &EncoderState,
    manifest: &SplitManifest,
    num_classes: usize,
    per_class: usize,
    cfg: &TsneConfig,
) -> Result<Vec<TsnePoint>, PlotError> {
    if num_classes == 0 || per_class == 0 {
        return Err(PlotError::TooFewSamples("need at least one class and one sample per class".into()));
    }
    let (_, samples) = pick_samples(manifest, num_classes, per_class, cfg.seed)?;
    let features = encode(student, &samples)?;
    let norms = features.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(1e-12));
    let unit = &features / &norms.insert_axis(Axis(1));
    let coords = tsne(unit.view(), cfg);
    Ok(samples
        .iter()
        .zip(coords.rows())
        .map(|(s, c)| TsnePoint { id: s.id.clone(), class: s.class_name.clone(), domain: s.domain, x: c[0], y: c[1] })
        .collect())
}

pub fn tsne_csv(points: &[TsnePoint]) -> String {
    let mut s = String::from("id,class,domain,x,y\n");
    for p in points {
        let _ = writeln!(s, "{},{},{},{:e},{:e}", p.id, p.class, p.domain.as_str(), p.x, p.y);
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub classes: Vec<String>,
    pub columns: Vec<String>,
    pub column_classes: Vec<String>,
    /// `classes × columns` cosine similarities.
    pub matrix: Vec<Vec<f64>>,
}

/// Cosine similarity between each class's text feature and the (projected)
/// features of sampled sketches and photos.
pub fn plot_heatmap(
    student: &EncoderState,
    manifest: &SplitManifest,
    bank: &TextBank,
    num_classes: usize,
    per_class: usize,
    seed: u64,
) -> Result<Heatmap, PlotError> {
    let (classes, samples) = pick_samples(manifest, num_classes, per_class, seed)?;
    let sub = bank.subset(&classes).ok_or_else(|| {
        let missing = classes.iter().find(|c| !bank.class_names().contains(c)).cloned().unwrap_or_default();
        PlotError::MissingClass(missing)
    })?;
    let text = classifier_matrix(&sub)?;
    let mut feats = encode(student, &samples)?;
    if let Some(w) = student.projector() {
        feats = feats.dot(&w);
    }
    if feats.ncols() != text.ncols() {
        return Err(PlotError::Text(TextError::ProviderDimMismatch(format!(
            "features have {} dims, bank has {}",
            feats.ncols(),
            text.ncols()
        ))));
    }
    let t = text.view();
    let matrix = t
        .rows()
        .into_iter()
        .map(|row| {
            feats
                .rows()
                .into_iter()
                .map(|f| {
                    let (mut dot, mut tt, mut ff) = (0.0, 0.0, 0.0);
                    for (a, b) in row.iter().zip(f.iter()) {
                        dot += a * b;
                        tt += a * a;
                        ff += b * b;
                    }
                    dot / (tt.sqrt() * ff.sqrt()).max(1e-300)
                })
                .collect()
        })
        .collect();
    Ok(Heatmap {
        classes,
        columns: samples.iter().map(|s| s.id.clone()).collect(),
        column_classes: samples.iter().map(|s| s.class_name.clone()).collect(),
        matrix,
    })
}

pub fn heatmap_csv(h: &Heatmap) -> String {
    let mut s = String::from("class");
    for c in &h.columns {
        s.push(',');
        s.push_str(c);
    }
    s.push('\n');
    for (class, row) in h.classes.iter().zip(&h.matrix) {
        s.push_str(class);
        for v in row {
            let _ = write!(s, ",{v:e}");
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub adapter_count: usize,
    pub adapter_params: usize,
    pub total_params: usize,
    /// Adapter parameters over all other parameters (the x-axis).
    pub adapter_ratio: f64,
    pub tunable_ratio: f64,
    pub map_all: f64,
}

/// Trains and evaluates once per adapter count. A count of zero drops the
/// adapter part of the tunability mode.
pub fn plot_adapter_scaling(
    counts: &[usize],
    cfg: &TrainConfig,
    init: &EncoderState,
    manifest: &SplitManifest,
    bank: &TextBank,
    opts: &EvalOptions,
) -> Result<Vec<ScalingPoint>, PlotError> {
    let available = init.insertion_points().len();
    let mut out = Vec::with_capacity(counts.len());
    for &count in counts {
        if count > available {
            return Err(PlotError::BadAdapterCount { count, available });
        }
        let mut run = cfg.clone();
        run.adapter_count = Some(count);
        if count == 0 {
            run.tunability = run.tunability.without_adapters();
        }
        let ckpt = train(&run, init, manifest, bank)?;
        let report = evaluate_manifest(&ckpt.encoder, manifest, opts)?;
        let counts_now = count_parameters(&prepare_student(init, &run, manifest.seen_classes.len(), bank.dim)?);
        out.push(ScalingPoint {
            adapter_count: count,
            adapter_params: counts_now.group(crate::params::ParamGroup::Adapter),
            total_params: counts_now.total,
            adapter_ratio: counts_now.adapter_ratio(),
            tunable_ratio: counts_now.tunable_ratio(),
            map_all: report.map_all,
        });
    }
    Ok(out)
}

pub fn scaling_csv(points: &[ScalingPoint]) -> String {
    let mut s = String::from("adapter_count,adapter_params,total_params,adapter_ratio,tunable_ratio,map_all\n");
    for p in points {
        let _ = writeln!(
            s,
            "{},{},{},{:e},{:e},{:e}",
            p.adapter_count, p.adapter_params, p.total_params, p.adapter_ratio, p.tunable_ratio, p.map_all
        );
    }
    s
}

// ---------------------------------------------------------------------------
// SVG rendering

fn color(i: usize) -> String {
    let hue = (i as f64 * 137.508) % 360.0;
    format!("hsl({hue:.1},65%,45%)")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn tsne_svg(points: &[TsnePoint]) -> String {
    let (w, h, pad) = (640.0, 640.0, 40.0);
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        x0 = x0.min(p.x);
        x1 = x1.max(p.x);
        y0 = y0.min(p.y);
        y1 = y1.max(p.y);
    }
    let sx = |x: f64| pad + (x - x0) / (x1 - x0).max(1e-12) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - y0) / (y1 - y0).max(1e-12) * (h - 2.0 * pad);
    let classes: Vec<&String> = points.iter().map(|p| &p.class).collect::<BTreeSet<_>>().into_iter().collect();
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n");
    s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    for p in points {
        let c = color(classes.iter().position(|k| *k == &p.class).unwrap_or(0));
        let (x, y) = (sx(p.x), sy(p.y));
        match p.domain {
            Domain::Photo => {
                let _ = writeln!(s, "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"3\" fill=\"{c}\"/>");
            }
            Domain::Sketch => {
                let _ = writeln!(
                    s,
                    "<path d=\"M{:.2} {:.2}L{:.2} {:.2}L{:.2} {:.2}Z\" fill=\"none\" stroke=\"{c}\"/>",
                    x,
                    y - 3.5,
                    x - 3.0,
                    y + 2.5,
                    x + 3.0,
                    y + 2.5
                );
            }
        }
    }
    for (i, class) in classes.iter().enumerate() {
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-size=\"10\" fill=\"{}\">{}</text>",
            w - 110.0,
            14.0 + 12.0 * i as f64,
            color(i),
            escape(class)
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn heatmap_svg(h: &Heatmap) -> String {
    let cell_w = (600.0 / h.columns.len().max(1) as f64).clamp(1.0, 24.0);
    let cell_h = 18.0;
    let left = 120.0;
    let width = left + cell_w * h.columns.len() as f64 + 10.0;
    let height = cell_h * h.classes.len() as f64 + 20.0;
    let (lo, hi) = h
        .matrix
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\">\n");
    s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    for (i, (class, row)) in h.classes.iter().zip(&h.matrix).enumerate() {
        let y = 10.0 + cell_h * i as f64;
        let _ = writeln!(s, "<text x=\"4\" y=\"{:.1}\" font-size=\"11\">{}</text>", y + 13.0, escape(class));
        for (j, v) in row.iter().enumerate() {
            let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
            let shade = (255.0 * (1.0 - t)).round() as u8;
            let _ = writeln!(
                s,
                "<rect x=\"{:.2}\" y=\"{y:.1}\" width=\"{cell_w:.2}\" height=\"{cell_h}\" fill=\"rgb(255,{shade},{shade})\"/>",
                left + cell_w * j as f64
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

pub fn scaling_svg(points: &[ScalingPoint]) -> String {
    let (w, h, pad) = (520.0, 360.0, 50.0);
    let xmax = points.iter().map(|p| p.adapter_ratio).fold(0.0, f64::max).max(1e-12);
    let sx = |x: f64| pad + x / xmax * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - y * (h - 2.0 * pad);
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n");
    s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    let _ = writeln!(s, "<line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>", h - pad, w - pad, h - pad);
    let _ = writeln!(s, "<line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{}\" stroke=\"black\"/>", h - pad);
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"12\">adapter / backbone parameters</text>", w / 2.0 - 80.0, h - 12.0);
    let _ = writeln!(s, "<text x=\"6\" y=\"{}\" font-size=\"12\">mAP@all</text>", pad - 10.0);
    let path: Vec<String> = points.iter().map(|p| format!("{:.2},{:.2}", sx(p.adapter_ratio), sy(p.map_all))).collect();
    let _ = writeln!(s, "<polyline points=\"{}\" fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\"/>", path.join(" "));
    for p in points {
        let _ = writeln!(
            s,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"steelblue\"><title>{} adapters: {:.4}</title></circle>",
            sx(p.adapter_ratio),
            sy(p.map_all),
            p.adapter_count,
            p.map_all
        );
    }
    s.push_str("</svg>\n");
    s
}
