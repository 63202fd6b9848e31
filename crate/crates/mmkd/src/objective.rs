//! Builds the full per-batch distillation objective on a tape.
//!
//! One builder serves the main training loop (any weighting strategy) and
//! the bilevel inner loop (meta weights, differentiable through both the
//! student and the meta parameters). Teacher outputs always enter as
//! constants.

use ndarray::Array2;

use crate::autodiff::{Tape, Var};
use crate::losses::{ce_on, feature_ensemble_on, kd_ensemble_on, soften};
use crate::meta::{similarity_matrix, similarity_on_tape, BoundMeta, TeacherWeights};
use crate::nn::{align_on_tape, forward_on_tape, Architecture};

/// Frozen teacher outputs for one batch.
#[derive(Debug, Clone)]
pub struct TeacherBatch {
    /// `K x [b x C]` logits.
    pub logits: Vec<Array2<f64>>,
    /// `K x [b x d_t]` penultimate features.
    pub feats: Vec<Array2<f64>>,
}

impl TeacherBatch {
    pub fn teachers(&self) -> usize {
        self.logits.len()
    }
}

/// Loss hyperparameters and ablation switches.
#[derive(Debug, Clone, Copy)]
pub struct LossHyper {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    /// Row-L2-normalize similarity matrices before the feature head.
    pub normalize_similarity: bool,
    /// Ablation: freeze the logit-head weights at uniform.
    pub uniform_logit_weights: bool,
    /// Ablation: freeze the feature-head weights at uniform.
    pub uniform_feature_weights: bool,
}

impl LossHyper {
    pub fn new(alpha: f64, beta: f64, tau: f64) -> Self {
        LossHyper {
            alpha,
            beta,
            tau,
            normalize_similarity: false,
            uniform_logit_weights: false,
            uniform_feature_weights: false,
        }
    }
}

/// Where the per-sample teacher weights come from.
pub enum WeightMode<'a> {
    /// Uniform `1/K` everywhere (aver / fitnet).
    Uniform,
    /// Precomputed constant weights (ebkd / camkd).
    Fixed {
        logit: &'a TeacherWeights,
        feature: &'a TeacherWeights,
    },
    /// Meta-weight network bound on the same tape by the caller; gradients
    /// flow into its vars iff the caller bound them as leaves.
    Meta(&'a BoundMeta),
}

/// The assembled objective for one batch.
pub struct BatchLoss {
    pub total: Var,
    pub ce: Var,
    pub kd: Var,
    /// Absent when `alpha == 0` (the feature path is skipped entirely).
    pub feature: Option<Var>,
    pub logit_weights: Var,
    pub feature_weights: Option<Var>,
    /// The student's raw logits node (handy for difficulty scoring).
    pub student_logits: Var,
}

impl BatchLoss {
    /// Component values `(ce, feature, kd, total)`; a skipped feature term
    /// reads as zero.
    pub fn values(&self, tape: &Tape) -> (f64, f64, f64, f64) {
        (
            tape.scalar(self.ce),
            self.feature.map(|f| tape.scalar(f)).unwrap_or(0.0),
            tape.scalar(self.kd),
            tape.scalar(self.total),
        )
    }
}

/// Build `L_total = L_CE + alpha * L_f + beta * L_r` for one batch.
///
/// `student_vars` and `align_var` are the student's parameters already bound
/// on `tape` (leaves for training, constants for evaluation).
#[allow(clippy::too_many_arguments)]
pub fn build_batch_loss(
    tape: &mut Tape,
    arch: &Architecture,
    student_vars: &[Var],
    align_var: Var,
    inputs: &Array2<f64>,
    labels_onehot: &Array2<f64>,
    teachers: &TeacherBatch,
    mode: &WeightMode,
    hyper: &LossHyper,
) -> BatchLoss {
    let b = inputs.nrows();
    let k = teachers.teachers();

    let x = tape.constant(inputs.clone());
    let (logits, feats) = forward_on_tape(tape, arch, student_vars, x);
    let student_probs = tape.softmax_rows_t(logits, hyper.tau);

    let teacher_probs: Vec<Var> = teachers
        .logits
        .iter()
        .map(|z| tape.constant(soften(z, hyper.tau)))
        .collect();

    let uniform = |tape: &mut Tape| tape.constant(TeacherWeights::uniform(b, k).0);

    let w_r = if hyper.uniform_logit_weights {
        uniform(tape)
    } else {
        match mode {
            WeightMode::Uniform => uniform(tape),
            WeightMode::Fixed { logit, .. } => tape.constant(logit.0.clone()),
            WeightMode::Meta(bound) => {
                let mut parts = Vec::with_capacity(k + 1);
                parts.push(student_probs);
                parts.extend_from_slice(&teacher_probs);
                let joined = tape.concat_cols(&parts);
                bound.logit_weights(tape, joined)
            }
        }
    };

    let kd = kd_ensemble_on(tape, w_r, &teacher_probs, student_probs);

    let labels = tape.constant(labels_onehot.clone());
    let ce = ce_on(tape, logits, labels);

    let (feature, w_f) = if hyper.alpha == 0.0 {
        (None, None)
    } else {
        let w_f = if hyper.uniform_feature_weights {
            uniform(tape)
        } else {
            match mode {
                WeightMode::Uniform => uniform(tape),
                WeightMode::Fixed { feature, .. } => tape.constant(feature.0.clone()),
                WeightMode::Meta(bound) => {
                    let g_s = similarity_on_tape(tape, feats, hyper.normalize_similarity);
                    let mut parts = Vec::with_capacity(k + 1);
                    parts.push(g_s);
                    for f in &teachers.feats {
                        let g = similarity_matrix(f, hyper.normalize_similarity);
                        parts.push(tape.constant(g));
                    }
                    let joined = tape.concat_cols(&parts);
                    bound.feature_weights(tape, joined)
                }
            }
        };
        let aligned = align_on_tape(tape, align_var, feats);
        let teacher_feat_vars: Vec<Var> = teachers
            .feats
            .iter()
            .map(|f| tape.constant(f.clone()))
            .collect();
        let feat = feature_ensemble_on(tape, w_f, &teacher_feat_vars, aligned);
        (Some(feat), Some(w_f))
    };

    let kd_term = tape.scale(kd, hyper.beta);
    let total = match feature {
        Some(f) => {
            let f_term = tape.scale(f, hyper.alpha);
            let partial = tape.add(ce, f_term);
            tape.add(partial, kd_term)
        }
        None => tape.add(ce, kd_term),
    };

    BatchLoss {
        total,
        ce,
        kd,
        feature,
        logit_weights: w_r,
        feature_weights: w_f,
        student_logits: logits,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meta::MetaParams;
    use crate::nn::{AlignmentMap, Model};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    fn setup(
        rng: &mut ChaCha8Rng,
        b: usize,
    ) -> (Model, AlignmentMap, Array2<f64>, Array2<f64>, TeacherBatch) {
        let arch = Architecture::Mlp {
            sizes: vec![4, 6, 5, 3],
        };
        let model = Model::new(arch, 3);
        let align = AlignmentMap::new(5, 7, 3);
        let inputs = rand_mat(rng, b, 4);
        let mut labels = Array2::zeros((b, 3));
        for i in 0..b {
            labels[(i, rng.gen_range(0..3))] = 1.0;
        }
        let teachers = TeacherBatch {
            logits: (0..2).map(|_| rand_mat(rng, b, 3)).collect(),
            feats: (0..2).map(|_| rand_mat(rng, b, 7)).collect(),
        };
        (model, align, inputs, labels, teachers)
    }

    #[test]
    fn total_is_exact_affine_combination_of_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (model, align, inputs, labels, teachers) = setup(&mut rng, 4);
        let hyper = LossHyper::new(1.0, 10.0, 4.0);
        let mut tape = Tape::new();
        let vars = model.params.bind_const(&mut tape);
        let av = tape.constant(align.weight().clone());
        let loss = build_batch_loss(
            &mut tape, &model.arch, &vars, av, &inputs, &labels, &teachers,
            &WeightMode::Uniform, &hyper,
        );
        let (ce, feat, kd, total) = loss.values(&tape);
        assert!((total - (ce + hyper.alpha * feat + hyper.beta * kd)).abs() < 1e-9);
        assert!(ce >= 0.0 && feat >= 0.0 && kd >= -1e-12);
    }

    #[test]
    fn zero_alpha_skips_the_feature_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (model, align, inputs, labels, teachers) = setup(&mut rng, 4);
        let hyper = LossHyper::new(0.0, 10.0, 4.0);
        let mut tape = Tape::new();
        let vars = model.params.bind_const(&mut tape);
        let av = tape.constant(align.weight().clone());
        let loss = build_batch_loss(
            &mut tape, &model.arch, &vars, av, &inputs, &labels, &teachers,
            &WeightMode::Uniform, &hyper,
        );
        assert!(loss.feature.is_none());
        let (ce, feat, kd, total) = loss.values(&tape);
        assert_eq!(feat, 0.0);
        assert!((total - (ce + hyper.beta * kd)).abs() < 1e-12);
    }

    #[test]
    fn zero_init_meta_weights_match_uniform_mode_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (model, align, inputs, labels, teachers) = setup(&mut rng, 4);
        let hyper = LossHyper::new(1.0, 10.0, 4.0);
        let meta = MetaParams::new(2, 3, 4, 9);

        let run = |mode: &WeightMode| -> (f64, f64, f64, f64) {
            let mut tape = Tape::new();
            let vars = model.params.bind(&mut tape);
            let av = tape.leaf(align.weight().clone());
            let loss = build_batch_loss(
                &mut tape, &model.arch, &vars, av, &inputs, &labels, &teachers, mode, &hyper,
            );
            loss.values(&tape)
        };

        let uniform = run(&WeightMode::Uniform);
        let mut tape = Tape::new();
        let bound = BoundMeta::bind(&mut tape, &meta);
        // Rebuild on the same tape to reuse the bound meta.
        let vars = model.params.bind(&mut tape);
        let av = tape.leaf(align.weight().clone());
        let loss = build_batch_loss(
            &mut tape, &model.arch, &vars, av, &inputs, &labels, &teachers,
            &WeightMode::Meta(&bound), &hyper,
        );
        let meta_vals = loss.values(&tape);
        assert_eq!(uniform.0.to_bits(), meta_vals.0.to_bits());
        assert_eq!(uniform.1.to_bits(), meta_vals.1.to_bits());
        assert_eq!(uniform.2.to_bits(), meta_vals.2.to_bits());
        assert_eq!(uniform.3.to_bits(), meta_vals.3.to_bits());
    }

    #[test]
    fn zero_init_meta_student_gradients_match_uniform_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (model, align, inputs, labels, teachers) = setup(&mut rng, 4);
        let hyper = LossHyper::new(1.0, 10.0, 4.0);
        let meta = MetaParams::new(2, 3, 4, 9);

        let grads_for = |use_meta: bool| -> Vec<Array2<f64>> {
            let mut tape = Tape::new();
            let bound = BoundMeta::bind(&mut tape, &meta);
            let vars = model.params.bind(&mut tape);
            let av = tape.leaf(align.weight().clone());
            let mode = if use_meta {
                WeightMode::Meta(&bound)
            } else {
                WeightMode::Uniform
            };
            let loss = build_batch_loss(
                &mut tape, &model.arch, &vars, av, &inputs, &labels, &teachers, &mode, &hyper,
            );
            let mut wrt = vars.clone();
            wrt.push(av);
            let gs = tape.grad(loss.total, &wrt);
            gs.iter().map(|&g| tape.value(g).clone()).collect()
        };

        let with_uniform = grads_for(false);
        let with_meta = grads_for(true);
        for (a, b) in with_uniform.iter().zip(with_meta.iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "student gradient bits differ");
            }
        }
    }

    #[test]
    fn ablation_flags_freeze_heads_at_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (model, align, inputs, labels, teachers) = setup(&mut rng, 4);
        let mut hyper = LossHyper::new(1.0, 10.0, 4.0);
        hyper.uniform_logit_weights = true;
        let mut meta = MetaParams::new(2, 3, 4, 9);
        // Push the heads away from uniform so the flag is observable; the
        // fill must break teacher symmetry, so vary it per entry.
        let mut c = 0.0;
        for v in meta.params_mut().values_mut() {
            v.mapv_inplace(|_| {
                c += 0.37;
                (c % 1.9) - 0.8
            });
        }
        let mut tape = Tape::new();
        let bound = BoundMeta::bind(&mut tape, &meta);
        let vars = model.params.bind_const(&mut tape);
        let av = tape.constant(align.weight().clone());
        let loss = build_batch_loss(
            &mut tape, &model.arch, &vars, av, &inputs, &labels, &teachers,
            &WeightMode::Meta(&bound), &hyper,
        );
        for &w in tape.value(loss.logit_weights).iter() {
            assert_eq!(w, 0.5);
        }
        // Feature head still learned (not uniform with these params).
        let wf = tape.value(loss.feature_weights.unwrap());
        assert!(wf.iter().any(|&w| (w - 0.5).abs() > 1e-9));
    }
}
