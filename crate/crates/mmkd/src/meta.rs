//! The meta-weight network: two small two-layer heads that assign each
//! sample its own weight vector over the `K` teachers.
//!
//! The logit head reads the concatenated temperature-softened class
//! probabilities of the student and all teachers; the feature head reads the
//! concatenated rows of every model's pairwise feature similarity matrix
//! `G = Q . Q^T` (a `[b x b]` object, so all models contribute the same input
//! width regardless of their feature dimension, and the input is invariant
//! to rotations of feature space). Both heads end in a row softmax, so every
//! output row lies on the `K`-simplex.
//!
//! Final layers are zero-initialized: until the first meta update, both heads
//! emit exactly uniform weights and the whole system behaves like plain
//! uniform-ensemble distillation.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{MmkdError, Result};
use crate::nn::ParamSet;

/// Per-sample weights over teachers; every row is on the `K`-simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherWeights(pub Array2<f64>);

impl TeacherWeights {
    pub fn uniform(b: usize, k: usize) -> Self {
        TeacherWeights(Array2::from_elem((b, k), 1.0 / k as f64))
    }

    pub fn batch(&self) -> usize {
        self.0.nrows()
    }

    pub fn teachers(&self) -> usize {
        self.0.ncols()
    }

    /// Check the simplex invariant: entries nonnegative, rows sum to 1 +/- tol.
    pub fn validate(&self, tol: f64) -> Result<()> {
        for (i, row) in self.0.rows().into_iter().enumerate() {
            let mut sum = 0.0;
            for &x in row.iter() {
                if x < 0.0 {
                    return Err(MmkdError::training(format!(
                        "teacher weight row {i} has negative entry {x}"
                    )));
                }
                sum += x;
            }
            if (sum - 1.0).abs() > tol {
                return Err(MmkdError::training(format!(
                    "teacher weight row {i} sums to {sum}, outside 1 +/- {tol}"
                )));
            }
        }
        Ok(())
    }
}

/// Parameters of both weighting heads.
///
/// Head layout per head: `w1 [hidden x in]`, `b1 [1 x hidden]`,
/// `w2 [K x hidden]`, `b2 [1 x K]`. The feature head's input width is
/// `b * (K + 1)`, so it is tied to the configured batch size; drop-last
/// batching keeps that width constant.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaParams {
    params: ParamSet,
    pub teachers: usize,
    pub classes: usize,
    pub batch: usize,
    pub hidden_logit: usize,
    pub hidden_feature: usize,
}

/// Order of entries inside `MetaParams::params`.
const LOGIT_W1: usize = 0;
const LOGIT_B1: usize = 1;
const LOGIT_W2: usize = 2;
const LOGIT_B2: usize = 3;
const FEAT_W1: usize = 4;
const FEAT_B1: usize = 5;
const FEAT_W2: usize = 6;
const FEAT_B2: usize = 7;

impl MetaParams {
    /// Fan-in-scaled random hidden layers, zero-initialized output layers.
    /// Hidden sizes default to `max(64, 2C)` for the logit head and `b` for
    /// the feature head.
    pub fn new(teachers: usize, classes: usize, batch: usize, seed: u64) -> Self {
        Self::with_hidden(teachers, classes, batch, (2 * classes).max(64), batch, seed)
    }

    /// Like [`MetaParams::new`] with explicit hidden sizes.
    pub fn with_hidden(
        teachers: usize,
        classes: usize,
        batch: usize,
        hidden_logit: usize,
        hidden_feature: usize,
        seed: u64,
    ) -> Self {
        assert!(teachers >= 1 && classes >= 2 && batch >= 1);
        assert!(hidden_logit >= 1 && hidden_feature >= 1);
        let logit_in = classes * (teachers + 1);
        let feature_in = batch * (teachers + 1);

        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d65_7461);
        let mut init = |rows: usize, cols: usize| {
            let dist = Normal::new(0.0, 1.0 / (cols as f64).sqrt()).unwrap();
            Array2::from_shape_fn((rows, cols), |_| dist.sample(&mut rng))
        };

        let mut params = ParamSet::new();
        params.push("logit.w1", init(hidden_logit, logit_in));
        params.push("logit.b1", Array2::zeros((1, hidden_logit)));
        params.push("logit.w2", Array2::zeros((teachers, hidden_logit)));
        params.push("logit.b2", Array2::zeros((1, teachers)));
        params.push("feature.w1", init(hidden_feature, feature_in));
        params.push("feature.b1", Array2::zeros((1, hidden_feature)));
        params.push("feature.w2", Array2::zeros((teachers, hidden_feature)));
        params.push("feature.b2", Array2::zeros((1, teachers)));

        MetaParams {
            params,
            teachers,
            classes,
            batch,
            hidden_logit,
            hidden_feature,
        }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn from_parts(
        params: ParamSet,
        teachers: usize,
        classes: usize,
        batch: usize,
    ) -> Result<Self> {
        let hidden_logit = params
            .get("logit.w1")
            .ok_or_else(|| MmkdError::config("meta params missing 'logit.w1'"))?
            .nrows();
        let hidden_feature = params
            .get("feature.w1")
            .ok_or_else(|| MmkdError::config("meta params missing 'feature.w1'"))?
            .nrows();
        let got_logit_in = params.get("logit.w1").unwrap().ncols();
        let got_feat_in = params.get("feature.w1").unwrap().ncols();
        if got_logit_in != classes * (teachers + 1) || got_feat_in != batch * (teachers + 1) {
            return Err(MmkdError::config(format!(
                "meta head input widths ({got_logit_in}, {got_feat_in}) do not match \
                 K={teachers}, C={classes}, b={batch}"
            )));
        }
        Ok(MetaParams {
            params,
            teachers,
            classes,
            batch,
            hidden_logit,
            hidden_feature,
        })
    }
}

/// Meta parameters bound on a tape (as leaves or constants).
pub struct BoundMeta {
    pub vars: Vec<Var>,
}

impl BoundMeta {
    pub fn bind(tape: &mut Tape, meta: &MetaParams) -> Self {
        BoundMeta {
            vars: meta.params.bind(tape),
        }
    }

    pub fn bind_const(tape: &mut Tape, meta: &MetaParams) -> Self {
        BoundMeta {
            vars: meta.params.bind_const(tape),
        }
    }

    /// Logit-head weights from a `[b x C(K+1)]` input.
    pub fn logit_weights(&self, tape: &mut Tape, input: Var) -> Var {
        two_layer_softmax(
            tape,
            input,
            self.vars[LOGIT_W1],
            self.vars[LOGIT_B1],
            self.vars[LOGIT_W2],
            self.vars[LOGIT_B2],
        )
    }

    /// Feature-head weights from a `[b x b(K+1)]` input.
    pub fn feature_weights(&self, tape: &mut Tape, input: Var) -> Var {
        two_layer_softmax(
            tape,
            input,
            self.vars[FEAT_W1],
            self.vars[FEAT_B1],
            self.vars[FEAT_W2],
            self.vars[FEAT_B2],
        )
    }
}

fn two_layer_softmax(tape: &mut Tape, input: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Var {
    let w1t = tape.transpose(w1);
    let h = tape.matmul(input, w1t);
    let h = tape.add_row(h, b1);
    let h = tape.relu(h);
    let w2t = tape.transpose(w2);
    let out = tape.matmul(h, w2t);
    let out = tape.add_row(out, b2);
    tape.softmax_rows(out)
}

// ---- head inputs ------------------------------------------------------------

/// Concatenate the tau-softened probabilities of student and teachers:
/// `[b x C(K+1)]`, student block first, teachers in index order.
pub fn build_logit_input(
    student_logits: &Array2<f64>,
    teacher_logits: &[Array2<f64>],
    tau: f64,
) -> Result<Array2<f64>> {
    let (b, c) = student_logits.dim();
    for (k, t) in teacher_logits.iter().enumerate() {
        if t.dim() != (b, c) {
            return Err(MmkdError::config(format!(
                "teacher {k} logits shape {:?} does not match student {:?}",
                t.dim(),
                (b, c)
            )));
        }
    }
    let mut tape = Tape::new();
    let mut parts = Vec::with_capacity(teacher_logits.len() + 1);
    let s = tape.constant(student_logits.clone());
    parts.push(tape.softmax_rows_t(s, tau));
    for t in teacher_logits {
        let tv = tape.constant(t.clone());
        parts.push(tape.softmax_rows_t(tv, tau));
    }
    let joined = tape.concat_cols(&parts);
    Ok(tape.value(joined).clone())
}

/// Tape version of [`build_logit_input`] over already-softened probability blocks.
pub fn concat_prob_blocks(tape: &mut Tape, student_probs: Var, teacher_probs: &[Var]) -> Var {
    let mut parts = Vec::with_capacity(teacher_probs.len() + 1);
    parts.push(student_probs);
    parts.extend_from_slice(teacher_probs);
    tape.concat_cols(&parts)
}

/// Pairwise activation similarity `G = Q . Q^T`, optionally row-L2-normalized.
pub fn similarity_matrix(features: &Array2<f64>, row_normalize: bool) -> Array2<f64> {
    let mut tape = Tape::new();
    let q = tape.constant(features.clone());
    let g = similarity_on_tape(&mut tape, q, row_normalize);
    tape.value(g).clone()
}

/// Tape version of [`similarity_matrix`].
pub fn similarity_on_tape(tape: &mut Tape, features: Var, row_normalize: bool) -> Var {
    let qt = tape.transpose(features);
    let g = tape.matmul(features, qt);
    if !row_normalize {
        return g;
    }
    let (_, n) = tape.dim(g);
    let sq = tape.mul(g, g);
    let rs = tape.row_sums(sq);
    let rs = tape.max_scalar(rs, 1e-24);
    let norm = tape.sqrt(rs);
    let inv = tape.recip(norm);
    let inv = tape.broadcast_col(inv, n);
    tape.mul(g, inv)
}

/// Concatenate similarity matrices row-wise into `[b x b(K+1)]`,
/// student block first.
pub fn build_feature_input(
    student_sim: &Array2<f64>,
    teacher_sims: &[Array2<f64>],
) -> Result<Array2<f64>> {
    let (b, b2) = student_sim.dim();
    if b != b2 {
        return Err(MmkdError::config(format!(
            "similarity matrix must be square, got {b}x{b2}"
        )));
    }
    for (k, t) in teacher_sims.iter().enumerate() {
        if t.dim() != (b, b) {
            return Err(MmkdError::config(format!(
                "teacher {k} similarity shape {:?} does not match student {b}x{b}",
                t.dim()
            )));
        }
    }
    let mut tape = Tape::new();
    let mut parts = Vec::with_capacity(teacher_sims.len() + 1);
    parts.push(tape.constant(student_sim.clone()));
    for t in teacher_sims {
        parts.push(tape.constant(t.clone()));
    }
    let joined = tape.concat_cols(&parts);
    Ok(tape.value(joined).clone())
}

/// Logit-head weights as plain values.
pub fn logit_weights(input: &Array2<f64>, meta: &MetaParams) -> Result<TeacherWeights> {
    let expect = meta.classes * (meta.teachers + 1);
    if input.ncols() != expect {
        return Err(MmkdError::config(format!(
            "logit head input width {} does not match expected {expect}",
            input.ncols()
        )));
    }
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let bound = BoundMeta::bind_const(&mut tape, meta);
    let w = bound.logit_weights(&mut tape, x);
    Ok(TeacherWeights(tape.value(w).clone()))
}

/// Feature-head weights as plain values.
///
/// A width mismatch here almost always means the batching pipeline emitted a
/// short batch; drop-last batching must keep `b` constant.
pub fn feature_weights(input: &Array2<f64>, meta: &MetaParams) -> Result<TeacherWeights> {
    let expect = meta.batch * (meta.teachers + 1);
    if input.ncols() != expect {
        return Err(MmkdError::config(format!(
            "feature head input width {} does not match expected {expect} \
             (batch size must stay constant; use drop-last batching)",
            input.ncols()
        )));
    }
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let bound = BoundMeta::bind_const(&mut tape, meta);
    let w = bound.feature_weights(&mut tape, x);
    Ok(TeacherWeights(tape.value(w).clone()))
}
