//! Teacher/student training loop and checkpoints.
//!
//! The teacher is a frozen copy of the initial encoder without adapters. Each
//! step draws half sketches and half photos from the seen classes, aligns the
//! student's features with the frozen text classifier and distils the
//! teacher's source-class predictions on the same (augmented) batch.
//!
//! Checkpoint directory:
//!
//! ```text
//! encoder/        parameter archive (self-describing)
//! config.json     TrainConfig
//! bank_ref.json   text bank identity {encoder, dim, classes, sha256, path}
//! run_log.jsonl   one record per epoch
//! metrics.json    optional metric snapshots
//! ```

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::adapter::{count_parameters, insert_adapters, set_tunability, AdapterError, AdapterPolicy, TunabilityMode};
use crate::archive::{Archive, ArchiveError};
use crate::backbone::{build_encoder, stack_batch, BackboneError, EncoderSpec, EncoderState};
use crate::datamodel::{DataError, Domain, Sample, SplitManifest};
use crate::imaging::augment;
use crate::losses::{alignment_loss_grad, classification_loss_grad, distillation_loss_grad, total_loss, LossConfig, LossError};
use crate::numeric::{add_row, column_sums, rng_for, sha256_hex};
use crate::optim::{Optimizer, OptimizerKind};
use crate::params::Grads;
use crate::textbank::{classifier_matrix, PromptMode, TextBank, TextError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("text bank does not match the manifest: {0}")]
    BankMismatch(String),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub tunability: TunabilityMode,
    /// Adapters on the deepest `adapter_count` insertion points; `None` means all.
    pub adapter_count: Option<usize>,
    pub adapter_ratio: f64,
    pub prompt_mode: PromptMode,
    pub loss: LossConfig,
    pub seed: u64,
    pub augmentation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 64,
            learning_rate: 1e-4,
            weight_decay: 5e-4,
            optimizer: OptimizerKind::Adam,
            tunability: TunabilityMode::BackboneAdapter,
            adapter_count: None,
            adapter_ratio: 0.25,
            prompt_mode: PromptMode::APhotoOfClass,
            loss: LossConfig::default(),
            seed: 0,
            augmentation: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        self.loss.validate().map_err(|e| TrainError::InvalidConfig(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(rename = "L_align")]
    pub l_align: f64,
    #[serde(rename = "L_distill")]
    pub l_distill: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    pub lr: f64,
    pub tunable_param_count: usize,
}

/// Identifies the text bank a model was trained against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankRef {
    pub encoder: String,
    pub dim: usize,
    pub classes: Vec<String>,
    pub sha256: String,
    #[serde(default)]
    pub path: Option<String>,
}

impl BankRef {
    pub fn of(bank: &TextBank) -> BankRef {
        BankRef {
            encoder: bank.encoder_name.clone(),
            dim: bank.dim,
            classes: bank.class_names(),
            sha256: sha256_hex(bank.to_json().as_bytes()),
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub encoder: EncoderState,
    pub config: TrainConfig,
    pub bank_ref: Option<BankRef>,
    pub run_log: Vec<EpochRecord>,
    pub metrics: Option<Value>,
}

pub const ENCODER_DIR: &str = "encoder";

fn write_json(path: &Path, v: &impl Serialize) -> Result<(), TrainError> {
    let text = serde_json::to_string_pretty(v).map_err(io::Error::other)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<(), TrainError> {
        fs::create_dir_all(dir)?;
        self.encoder.to_archive().save(&dir.join(ENCODER_DIR))?;
        write_json(&dir.join("config.json"), &self.config)?;
        if let Some(b) = &self.bank_ref {
            write_json(&dir.join("bank_ref.json"), b)?;
        }
        let mut log = fs::File::create(dir.join("run_log.jsonl"))?;
        for r in &self.run_log {
            writeln!(log, "{}", serde_json::to_string(r).map_err(io::Error::other)?)?;
        }
        if let Some(m) = &self.metrics {
            write_json(&dir.join("metrics.json"), m)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Checkpoint, TrainError> {
        let ckpt_err = |m: String| TrainError::Checkpoint(m);
        let encoder = EncoderState::from_archive(&Archive::load(&dir.join(ENCODER_DIR))?)?;
        let config: TrainConfig = serde_json::from_str(&fs::read_to_string(dir.join("config.json"))?)
            .map_err(|e| ckpt_err(format!("config.json: {e}")))?;
        let bank_path = dir.join("bank_ref.json");
        let bank_ref = if bank_path.exists() {
            Some(serde_json::from_str(&fs::read_to_string(bank_path)?).map_err(|e| ckpt_err(format!("bank_ref.json: {e}")))?)
        } else {
            None
        };
        let mut run_log = Vec::new();
        let log_path = dir.join("run_log.jsonl");
        if log_path.exists() {
            for line in fs::read_to_string(log_path)?.lines().filter(|l| !l.trim().is_empty()) {
                run_log.push(serde_json::from_str(line).map_err(|e| ckpt_err(format!("run_log.jsonl: {e}")))?);
            }
        }
        let metrics_path = dir.join("metrics.json");
        let metrics = if metrics_path.exists() {
            Some(serde_json::from_str(&fs::read_to_string(metrics_path)?).map_err(|e| ckpt_err(format!("metrics.json: {e}")))?)
        } else {
            None
        };
        Ok(Checkpoint { encoder, config, bank_ref, run_log, metrics })
    }

    /// SHA-256 of the encoder archive, used to identify a served model.
    pub fn encoder_hash(dir: &Path) -> Result<String, TrainError> {
        Ok(Archive::content_hash(&dir.join(ENCODER_DIR))?)
    }
}

/// Where the initial weights come from.
#[derive(Debug, Clone)]
pub enum InitSource<'a> {
    Archive(&'a Path),
    Toy { spec: &'a EncoderSpec, seed: u64 },
}

/// Returns `(teacher, student)`. Both start from the same weights; the
/// teacher has no adapters and nothing trainable.
pub fn init_teacher_student(source: InitSource<'_>) -> Result<(EncoderState, EncoderState), TrainError> {
    let student = match source {
        InitSource::Archive(dir) => {
            let archive = Archive::load(dir)?;
            EncoderState::from_archive(&archive)?
        }
        InitSource::Toy { spec, seed } => build_encoder(spec, seed)?,
    };
    Ok((student.teacher_copy(), student))
}

/// Prepares the student for a run: adapters, projector or classifier, and
/// trainable flags.
pub fn prepare_student(init: &EncoderState, cfg: &TrainConfig, num_seen: usize, text_dim: usize) -> Result<EncoderState, TrainError> {
    let points = init.insertion_points().len();
    let count = cfg.adapter_count.unwrap_or(points);
    let policy = AdapterPolicy { count, ratio: cfg.adapter_ratio, seed: cfg.seed };
    let mut student = insert_adapters(init, &policy)?;
    student.params.remove("head/projector.weight");
    student.params.remove("head/classifier.weight");
    student.params.remove("head/classifier.bias");
    if cfg.prompt_mode == PromptMode::Classical {
        student.attach_classifier(num_seen, cfg.seed);
    } else if text_dim != student.retrieval_dim() {
        student.attach_projector(text_dim, cfg.seed);
    }
    set_tunability(&mut student, cfg.tunability)?;
    Ok(student)
}

/// Cycles through a domain's samples in seeded shuffled passes.
struct DomainStream {
    order: Vec<usize>,
    cursor: usize,
}

impl DomainStream {
    fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        DomainStream { order, cursor: 0 }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.cursor == self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }
}

struct TrainItem {
    pixels: Array3<f64>,
    label: usize,
}

fn load_items(samples: &[&Sample], input_size: (usize, usize, usize), seen: &[String]) -> Result<Vec<TrainItem>, TrainError> {
    samples
        .iter()
        .map(|s| {
            let label = seen
                .iter()
                .position(|c| c == &s.class_name)
                .ok_or_else(|| TrainError::InvalidConfig(format!("train sample {} is not in a seen class", s.id)))?;
            let pixels = s.pixels(input_size)?;
            if pixels.dim() != input_size {
                return Err(TrainError::Backbone(BackboneError::ShapeMismatch(format!(
                    "sample {} has shape {:?}, encoder expects {:?}",
                    s.id,
                    pixels.dim(),
                    input_size
                ))));
            }
            Ok(TrainItem { pixels, label })
        })
        .collect()
}

/// Runs the full training loop from an initial encoder.
pub fn train(cfg: &TrainConfig, init: &EncoderState, manifest: &SplitManifest, bank: &TextBank) -> Result<Checkpoint, TrainError> {
    cfg.validate()?;
    let seen = &manifest.seen_classes;
    let classical = cfg.prompt_mode == PromptMode::Classical;
    let seen_bank = if classical {
        None
    } else {
        let sub = bank.subset(seen).ok_or_else(|| {
            let missing: Vec<_> = seen.iter().filter(|c| !bank.class_names().contains(c)).take(5).cloned().collect();
            TrainError::BankMismatch(format!("bank lacks seen classes {missing:?}"))
        })?;
        Some(classifier_matrix(&sub)?)
    };

    let teacher = init.teacher_copy();
    let mut student = prepare_student(init, cfg, seen.len(), bank.dim)?;
    let tunable = count_parameters(&student).tunable;

    let input_size = student.spec.input_size;
    let sketches = load_items(&manifest.train_by_domain(Domain::Sketch), input_size, seen)?;
    let photos = load_items(&manifest.train_by_domain(Domain::Photo), input_size, seen)?;
    let n_train = sketches.len() + photos.len();
    if n_train == 0 {
        return Err(TrainError::InvalidConfig("manifest has no training samples".into()));
    }
    let steps_per_epoch = n_train.div_ceil(cfg.batch_size);

    let mut data_rng = rng_for(cfg.seed, "trainer/data");
    let mut aug_rng = rng_for(cfg.seed, "trainer/augment");
    let mut sketch_stream = DomainStream::new(sketches.len(), &mut data_rng);
    let mut photo_stream = DomainStream::new(photos.len(), &mut data_rng);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, cfg.weight_decay);
    let mut run_log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let (mut sum_align, mut sum_distill, mut sum_total) = (0.0, 0.0, 0.0);
        for _ in 0..steps_per_epoch {
            let n_sketch = match (sketches.is_empty(), photos.is_empty()) {
                (true, _) => 0,
                (_, true) => cfg.batch_size,
                _ => cfg.batch_size.div_ceil(2),
            };
            let mut chosen: Vec<&TrainItem> = Vec::with_capacity(cfg.batch_size);
            for _ in 0..n_sketch {
                chosen.push(&sketches[sketch_stream.next(&mut data_rng)]);
            }
            for _ in n_sketch..cfg.batch_size {
                chosen.push(&photos[photo_stream.next(&mut data_rng)]);
            }
            let images: Vec<Array3<f64>> = chosen
                .iter()
                .map(|it| if cfg.augmentation { augment(&it.pixels, &mut aug_rng) } else { it.pixels.clone() })
                .collect();
            let labels: Vec<usize> = chosen.iter().map(|it| it.label).collect();
            let batch = stack_batch(&images)?;

            let step = loss_and_grads(&student, &teacher, &batch, &labels, seen_bank.as_ref().map(|m| m.view()), &cfg.loss)?;
            opt.step(&mut student.params, &step.grads);
            sum_align += step.align;
            sum_distill += step.distill;
            sum_total += step.total;
        }
        let k = steps_per_epoch as f64;
        run_log.push(EpochRecord {
            epoch,
            l_align: sum_align / k,
            l_distill: sum_distill / k,
            l_total: sum_total / k,
            lr: opt.lr(),
            tunable_param_count: tunable,
        });
    }

    // Checkpoints hold what the float32 archive can store.
    student.round_to_f32();
    Ok(Checkpoint { encoder: student, config: cfg.clone(), bank_ref: Some(BankRef::of(bank)), run_log, metrics: None })
}

#[derive(Debug, Clone)]
pub struct StepLoss {
    pub align: f64,
    pub distill: f64,
    pub total: f64,
    pub grads: Grads,
}

/// Loss terms and parameter gradients for one batch. With `bank` the
/// alignment objective is used; without it the student's classifier
/// parameters provide the classical objective.
pub fn loss_and_grads(
    student: &EncoderState,
    teacher: &EncoderState,
    batch: &ndarray::Array4<f64>,
    labels: &[usize],
    bank: Option<ndarray::ArrayView2<f64>>,
    cfg: &LossConfig,
) -> Result<StepLoss, TrainError> {
    let (out, trace) = student.forward_trace(batch)?;
    let mut grads = Grads::zeros_like(&student.params);

    let (align, d_features) = match bank {
        Some(b) => {
            let g = alignment_loss_grad(out.features.view(), student.projector(), b, labels, cfg.tau_align)?;
            if let Some(dw) = &g.d_projector {
                grads.accumulate("head/projector.weight", dw);
            }
            (g.loss, g.d_features)
        }
        None => {
            let w = student
                .params
                .get("head/classifier.weight")
                .ok_or_else(|| TrainError::InvalidConfig("classical mode needs a classifier".into()))?;
            let b = student.params.expect("head/classifier.bias");
            let mut logits = out.features.dot(w);
            add_row(&mut logits, b);
            let (loss, dlogits) = classification_loss_grad(logits.view(), labels, cfg.tau_cls)?;
            grads.accumulate("head/classifier.weight", &out.features.t().dot(&dlogits));
            grads.accumulate("head/classifier.bias", &column_sums(&dlogits));
            (loss, dlogits.dot(&w.t()))
        }
    };

    let (distill, d_source) = if cfg.lambda > 0.0 {
        let t = teacher.forward(batch)?;
        let (l, g) = distillation_loss_grad(out.source_logits.view(), t.source_logits.view())?;
        (l, Some(g * cfg.lambda))
    } else {
        (0.0, None)
    };

    student.backward(&trace, &d_features, d_source.as_ref(), &mut grads);
    Ok(StepLoss { align, distill, total: total_loss(align, distill, cfg), grads })
}

/// Checks that `student` differs from `reference` only in parameters that
/// are trainable in `student`. Returns the names of violating parameters.
pub fn frozen_violations(reference: &EncoderState, student: &EncoderState) -> Vec<String> {
    student
        .params
        .iter()
        .filter(|p| !p.trainable)
        .filter(|p| match reference.params.get(&p.name) {
            Some(v) => v.iter().zip(p.value.iter()).any(|(a, b)| a.to_bits() != b.to_bits()),
            None => false,
        })
        .map(|p| p.name.clone())
        .collect()
}
