//! The four training losses: weighted ensemble KL over softened logits,
//! weighted feature MSE, label cross-entropy, and their affine total.
//!
//! Conventions, fixed across the crate:
//! - KL runs teacher-to-student, `KL(p_teacher || p_student)`, in natural log,
//!   with probabilities clamped at `1e-12` before any logarithm.
//! - No extra temperature-squared factor on the KL term; the `beta`
//!   coefficient carries all of the scale.
//! - Cross-entropy always uses temperature 1.
//! - Teachers enter as constants; gradients never flow into teacher outputs.

use ndarray::Array2;

use crate::autodiff::{Tape, Var};
use crate::error::{MmkdError, Result};
use crate::meta::TeacherWeights;

/// Probability floor applied before every logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// All loss components for one batch, with the coefficients that combined them.
#[derive(Debug, Clone, Copy)]
pub struct LossBundle {
    pub kd: f64,
    pub feature: f64,
    pub ce: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
}

/// Temperature-softened probabilities of a logit matrix (plain helper).
pub fn soften(logits: &Array2<f64>, tau: f64) -> Array2<f64> {
    let mut tape = Tape::new();
    let z = tape.constant(logits.clone());
    let p = tape.softmax_rows_t(z, tau);
    tape.value(p).clone()
}

// ---- tape-level builders -----------------------------------------------------

/// Weighted ensemble KL given softened teacher probabilities.
///
/// `teacher_probs` are the tau-softened `[b x C]` distributions (constants on
/// the tape); `student_probs` is the tau-softened student distribution node.
/// Regardless of whether `weights` is a constant or a differentiable head
/// output, each row of it must be on the K-simplex.
pub fn kd_ensemble_on(
    tape: &mut Tape,
    weights: Var,
    teacher_probs: &[Var],
    student_probs: Var,
) -> Var {
    let (b, _) = tape.dim(student_probs);
    let log_q = tape.ln_clamped(student_probs, PROB_FLOOR);
    let mut cols = Vec::with_capacity(teacher_probs.len());
    for &p in teacher_probs {
        let log_p = tape.ln_clamped(p, PROB_FLOOR);
        let diff = tape.sub(log_p, log_q);
        let terms = tape.mul(p, diff);
        cols.push(tape.row_sums(terms));
    }
    let kl = tape.concat_cols(&cols);
    let weighted = tape.mul(weights, kl);
    let sum = tape.sum_all(weighted);
    tape.scale(sum, 1.0 / b as f64)
}

/// Weighted squared-error feature matching against each teacher.
pub fn feature_ensemble_on(
    tape: &mut Tape,
    weights: Var,
    teacher_feats: &[Var],
    aligned_student: Var,
) -> Var {
    let (b, _) = tape.dim(aligned_student);
    let mut cols = Vec::with_capacity(teacher_feats.len());
    for &f in teacher_feats {
        let d = tape.sub(f, aligned_student);
        let sq = tape.mul(d, d);
        cols.push(tape.row_sums(sq));
    }
    let dists = tape.concat_cols(&cols);
    let weighted = tape.mul(weights, dists);
    let sum = tape.sum_all(weighted);
    tape.scale(sum, 1.0 / b as f64)
}

/// Mean cross-entropy of `logits` against one-hot `labels` (temperature 1).
pub fn ce_on(tape: &mut Tape, logits: Var, labels_onehot: Var) -> Var {
    let (b, _) = tape.dim(logits);
    let probs = tape.softmax_rows(logits);
    let log_p = tape.ln_clamped(probs, PROB_FLOOR);
    let picked = tape.mul(labels_onehot, log_p);
    let sum = tape.sum_all(picked);
    tape.scale(sum, -1.0 / b as f64)
}

// ---- plain (value-level) operations -------------------------------------------

/// `(1/b) sum_i sum_k w[i,k] KL(sigma(z_k_i | tau) || sigma(z_s_i | tau))`.
pub fn kd_ensemble_loss(
    weights: &TeacherWeights,
    teacher_logits: &[Array2<f64>],
    student_logits: &Array2<f64>,
    tau: f64,
) -> Result<f64> {
    let (b, c) = student_logits.dim();
    if weights.0.dim() != (b, teacher_logits.len()) {
        return Err(MmkdError::config(format!(
            "weight shape {:?} does not match b={b}, K={}",
            weights.0.dim(),
            teacher_logits.len()
        )));
    }
    for (k, z) in teacher_logits.iter().enumerate() {
        if z.dim() != (b, c) {
            return Err(MmkdError::config(format!(
                "teacher {k} logits shape {:?} does not match student {:?}",
                z.dim(),
                (b, c)
            )));
        }
    }
    let mut tape = Tape::new();
    let w = tape.constant(weights.0.clone());
    let zs = tape.constant(student_logits.clone());
    let q = tape.softmax_rows_t(zs, tau);
    let probs: Vec<Var> = teacher_logits
        .iter()
        .map(|z| {
            let zv = tape.constant(z.clone());
            tape.softmax_rows_t(zv, tau)
        })
        .collect();
    let loss = kd_ensemble_on(&mut tape, w, &probs, q);
    Ok(tape.scalar(loss))
}

/// `(1/b) sum_i sum_k w[i,k] |F_k_i - u(F_s)_i|^2`.
pub fn feature_ensemble_loss(
    weights: &TeacherWeights,
    teacher_feats: &[Array2<f64>],
    aligned_student_feats: &Array2<f64>,
) -> Result<f64> {
    let dim = aligned_student_feats.dim();
    if weights.0.dim() != (dim.0, teacher_feats.len()) {
        return Err(MmkdError::config(format!(
            "weight shape {:?} does not match b={}, K={}",
            weights.0.dim(),
            dim.0,
            teacher_feats.len()
        )));
    }
    for (k, f) in teacher_feats.iter().enumerate() {
        if f.dim() != dim {
            return Err(MmkdError::config(format!(
                "teacher {k} feature shape {:?} does not match student {dim:?}",
                f.dim()
            )));
        }
    }
    let mut tape = Tape::new();
    let w = tape.constant(weights.0.clone());
    let aligned = tape.constant(aligned_student_feats.clone());
    let feats: Vec<Var> = teacher_feats
        .iter()
        .map(|f| tape.constant(f.clone()))
        .collect();
    let loss = feature_ensemble_on(&mut tape, w, &feats, aligned);
    Ok(tape.scalar(loss))
}

/// Mean cross-entropy against one-hot labels.
pub fn ce_loss(student_logits: &Array2<f64>, labels_onehot: &Array2<f64>) -> Result<f64> {
    if student_logits.dim() != labels_onehot.dim() {
        return Err(MmkdError::config(format!(
            "logits shape {:?} does not match labels {:?}",
            student_logits.dim(),
            labels_onehot.dim()
        )));
    }
    let mut tape = Tape::new();
    let z = tape.constant(student_logits.clone());
    let y = tape.constant(labels_onehot.clone());
    let loss = ce_on(&mut tape, z, y);
    Ok(tape.scalar(loss))
}

/// `L_total = L_CE + alpha * L_f + beta * L_r`.
pub fn total_loss(ce: f64, feature: f64, kd: f64, alpha: f64, beta: f64) -> f64 {
    ce + alpha * feature + beta * kd
}
