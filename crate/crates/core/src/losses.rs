//! Training objectives with analytic gradients.
//!
//! Every loss is a batch mean. Gradient functions return the loss value
//! together with the gradient of that value with respect to their inputs.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("non-finite input: {0}")]
    NonFinite(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("bank row {0} is not unit-norm")]
    NotNormalizedBank(usize),
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau_cls: f64,
    pub tau_align: f64,
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { tau_cls: 1.0, tau_align: 0.05, lambda: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.tau_cls > 0.0 && self.tau_align > 0.0) {
            return Err(LossError::InvalidConfig("temperatures must be positive".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(LossError::InvalidConfig("lambda must be finite and non-negative".into()));
        }
        Ok(())
    }
}

fn check_finite(name: &str, x: ArrayView2<f64>) -> Result<(), LossError> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(LossError::NonFinite(name.into()))
    }
}

pub fn softmax(z: ArrayView1<f64>, tau: f64) -> Result<Array1<f64>, LossError> {
    if !z.iter().all(|v| v.is_finite()) || !(tau > 0.0) {
        return Err(LossError::NonFinite("softmax input".into()));
    }
    let m = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = z.mapv(|v| ((v - m) / tau).exp());
    let s = e.sum();
    Ok(e / s)
}

/// Row-wise `log softmax(x / tau)`.
fn log_softmax_rows(x: ArrayView2<f64>, tau: f64) -> Array2<f64> {
    let mut out = x.mapv(|v| v / tau);
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

fn check_labels(labels: &[usize], n: usize, classes: usize) -> Result<(), LossError> {
    if labels.len() != n {
        return Err(LossError::ShapeMismatch(format!("{} labels for {n} rows", labels.len())));
    }
    match labels.iter().find(|&&l| l >= classes) {
        Some(&label) => Err(LossError::LabelOutOfRange { label, classes }),
        None => Ok(()),
    }
}

/// Mean cross-entropy of `softmax(logits / tau)` against integer labels,
/// and its gradient with respect to the logits.
pub fn classification_loss_grad(
    logits: ArrayView2<f64>,
    labels: &[usize],
    tau: f64,
) -> Result<(f64, Array2<f64>), LossError> {
    check_finite("logits", logits)?;
    let (n, c) = logits.dim();
    check_labels(labels, n, c)?;
    if n == 0 {
        return Err(LossError::ShapeMismatch("empty batch".into()));
    }
    let logp = log_softmax_rows(logits, tau);
    let loss = -labels.iter().enumerate().map(|(i, &y)| logp[[i, y]]).sum::<f64>() / n as f64;
    let mut grad = logp.mapv(f64::exp);
    for (i, &y) in labels.iter().enumerate() {
        grad[[i, y]] -= 1.0;
    }
    grad /= n as f64 * tau;
    Ok((loss, grad))
}

pub fn classification_loss(logits: ArrayView2<f64>, labels: &[usize], tau: f64) -> Result<f64, LossError> {
    classification_loss_grad(logits, labels, tau).map(|(l, _)| l)
}

/// Soft-target cross-entropy `-Σ σ(teacher) log σ(student)` averaged over
/// the batch, at temperature 1. The teacher logits are constants; only the
/// student gradient is returned.
pub fn distillation_loss_grad(
    student: ArrayView2<f64>,
    teacher: ArrayView2<f64>,
) -> Result<(f64, Array2<f64>), LossError> {
    if student.dim() != teacher.dim() {
        return Err(LossError::ShapeMismatch(format!("student {:?} vs teacher {:?}", student.dim(), teacher.dim())));
    }
    check_finite("student logits", student)?;
    check_finite("teacher logits", teacher)?;
    let n = student.nrows();
    if n == 0 {
        return Err(LossError::ShapeMismatch("empty batch".into()));
    }
    let log_s = log_softmax_rows(student, 1.0);
    let p_t = log_softmax_rows(teacher, 1.0).mapv(f64::exp);
    let loss = -(&p_t * &log_s).sum() / n as f64;
    let grad = (log_s.mapv(f64::exp) - p_t) / n as f64;
    Ok((loss, grad))
}

pub fn distillation_loss(student: ArrayView2<f64>, teacher: ArrayView2<f64>) -> Result<f64, LossError> {
    distillation_loss_grad(student, teacher).map(|(l, _)| l)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentGrad {
    pub loss: f64,
    pub d_features: Array2<f64>,
    pub d_projector: Option<Array2<f64>>,
    /// Cosine logits `z`, one row per sample.
    pub cosines: Array2<f64>,
}

/// Floor on feature norms before division, so an all-zero feature row
/// yields zero cosines instead of an error.
pub const NORM_EPS: f64 = 1e-12;

/// Projects features (when a projector is given), L2-normalizes them,
/// scores against the unit-norm bank rows by cosine and applies
/// cross-entropy over `softmax(z / tau)`.
pub fn alignment_loss_grad(
    features: ArrayView2<f64>,
    projector: Option<ArrayView2<f64>>,
    bank: ArrayView2<f64>,
    labels: &[usize],
    tau: f64,
) -> Result<AlignmentGrad, LossError> {
    check_finite("features", features)?;
    let n = features.nrows();
    if n == 0 {
        return Err(LossError::ShapeMismatch("empty batch".into()));
    }
    let projected = match projector {
        Some(w) => {
            if w.nrows() != features.ncols() {
                return Err(LossError::ShapeMismatch(format!("features {:?} vs projector {:?}", features.dim(), w.dim())));
            }
            features.dot(&w)
        }
        None => features.to_owned(),
    };
    if projected.ncols() != bank.ncols() {
        return Err(LossError::ShapeMismatch(format!("projected width {} vs bank width {}", projected.ncols(), bank.ncols())));
    }
    for (i, row) in bank.rows().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if (norm - 1.0).abs() > 1e-5 {
            return Err(LossError::NotNormalizedBank(i));
        }
    }
    check_labels(labels, n, bank.nrows())?;

    let raw_norms: Array1<f64> = projected.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if raw_norms.iter().any(|v| !v.is_finite()) {
        return Err(LossError::NonFinite("projected features".into()));
    }
    let norms = raw_norms.mapv(|v| v.max(NORM_EPS));
    let unit = &projected / &norms.view().insert_axis(Axis(1));
    let cosines = unit.dot(&bank.t()).mapv(|v| v.clamp(-1.0, 1.0));

    let logp = log_softmax_rows(cosines.view(), tau);
    let loss = -labels.iter().enumerate().map(|(i, &y)| logp[[i, y]]).sum::<f64>() / n as f64;
    let mut dz = logp.mapv(f64::exp);
    for (i, &y) in labels.iter().enumerate() {
        dz[[i, y]] -= 1.0;
    }
    dz /= n as f64 * tau;

    let du = dz.dot(&bank);
    let mut dp = du.clone();
    for i in 0..n {
        let mut r = dp.row_mut(i);
        if raw_norms[i] >= NORM_EPS {
            let u = unit.row(i);
            let proj = u.dot(&du.row(i));
            r.zip_mut_with(&u, |g, &ui| *g -= ui * proj);
        }
        r /= norms[i];
    }
    let (d_features, d_projector) = match projector {
        Some(w) => (dp.dot(&w.t()), Some(features.t().dot(&dp))),
        None => (dp, None),
    };
    Ok(AlignmentGrad { loss, d_features, d_projector, cosines })
}

pub fn alignment_loss(
    features: ArrayView2<f64>,
    projector: Option<ArrayView2<f64>>,
    bank: ArrayView2<f64>,
    labels: &[usize],
    tau: f64,
) -> Result<f64, LossError> {
    alignment_loss_grad(features, projector, bank, labels, tau).map(|g| g.loss)
}

pub fn total_loss(align: f64, distill: f64, cfg: &LossConfig) -> f64 {
    align + cfg.lambda * distill
}
