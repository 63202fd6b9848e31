//! Comparison weighting strategies: uniform averaging, entropy-based
//! confidence, and label-confidence weighting, plus the uniform-ensemble
//! hint loss they train with.
//!
//! The entropy and label-confidence strategies are reconstructed from short
//! descriptions as `softmax(-score)` over teachers, per sample: lower
//! entropy, or lower cross-entropy against the ground truth, earns a higher
//! weight. All strategies produce rows on the `K`-simplex.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{MmkdError, Result};
use crate::losses::{
    ce_loss, feature_ensemble_loss, kd_ensemble_loss, soften, total_loss, PROB_FLOOR,
};
use crate::meta::TeacherWeights;

/// Which teacher-weighting rule a distillation run uses.
///
/// `Fitnet` is the uniform-ensemble logits+hints baseline; it weights
/// teachers exactly like `Aver` and exists as its own name because the two
/// are reported as separate baselines. `Mmkd` weights come from the
/// meta-weight network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightingStrategy {
    Aver,
    Fitnet,
    Ebkd,
    Camkd,
    Mmkd,
}

impl WeightingStrategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "aver" => Ok(WeightingStrategy::Aver),
            "fitnet" => Ok(WeightingStrategy::Fitnet),
            "ebkd" => Ok(WeightingStrategy::Ebkd),
            "camkd" => Ok(WeightingStrategy::Camkd),
            "mmkd" => Ok(WeightingStrategy::Mmkd),
            other => Err(MmkdError::config(format!(
                "unknown strategy '{other}' (expected aver|fitnet|ebkd|camkd|mmkd)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            WeightingStrategy::Aver => "aver",
            WeightingStrategy::Fitnet => "fitnet",
            WeightingStrategy::Ebkd => "ebkd",
            WeightingStrategy::Camkd => "camkd",
            WeightingStrategy::Mmkd => "mmkd",
        }
    }
}

/// Equal weight for every teacher.
pub fn aver_weights(b: usize, k: usize) -> TeacherWeights {
    assert!(k >= 1, "need at least one teacher");
    TeacherWeights::uniform(b, k)
}

/// Entropy-based weights: per sample, `softmax_k(-H_k)` where `H_k` is the
/// entropy of teacher `k`'s tau-softened distribution. More confident
/// (lower-entropy) teachers get more weight.
pub fn ebkd_weights(teacher_logits: &[Array2<f64>], tau: f64) -> Result<TeacherWeights> {
    let k = teacher_logits.len();
    check_teacher_shapes(teacher_logits)?;
    let (b, _) = teacher_logits[0].dim();
    let mut scores = Array2::zeros((b, k));
    for (kk, z) in teacher_logits.iter().enumerate() {
        let p = soften(z, tau);
        for (i, row) in p.rows().into_iter().enumerate() {
            let h: f64 = row
                .iter()
                .map(|&x| {
                    let x = x.max(PROB_FLOOR);
                    -x * x.ln()
                })
                .sum();
            scores[(i, kk)] = -h;
        }
    }
    Ok(TeacherWeights(softmax_rows(&scores)))
}

/// Label-confidence weights: per sample, `softmax_k(-CE_k)` where `CE_k` is
/// teacher `k`'s cross-entropy against the ground-truth label. Teachers
/// closer to the label get more weight.
pub fn camkd_weights(
    teacher_logits: &[Array2<f64>],
    labels_onehot: &Array2<f64>,
    tau: f64,
) -> Result<TeacherWeights> {
    let k = teacher_logits.len();
    check_teacher_shapes(teacher_logits)?;
    let (b, c) = teacher_logits[0].dim();
    if labels_onehot.dim() != (b, c) {
        return Err(MmkdError::config(format!(
            "labels shape {:?} does not match teacher logits {:?}",
            labels_onehot.dim(),
            (b, c)
        )));
    }
    let mut scores = Array2::zeros((b, k));
    for (kk, z) in teacher_logits.iter().enumerate() {
        let p = soften(z, tau);
        for i in 0..b {
            let mut ce = 0.0;
            for j in 0..c {
                if labels_onehot[(i, j)] > 0.0 {
                    ce -= labels_onehot[(i, j)] * p[(i, j)].max(PROB_FLOOR).ln();
                }
            }
            scores[(i, kk)] = -ce;
        }
    }
    Ok(TeacherWeights(softmax_rows(&scores)))
}

/// Uniform-ensemble distillation objective: cross-entropy plus the plain
/// averages of the per-teacher hint MSE and per-teacher KL.
///
/// Identical to the full weighted objective with both weight heads frozen
/// uniform; it is the loss the `aver`/`fitnet` baselines train with.
#[allow(clippy::too_many_arguments)]
pub fn fitnet_mkd_loss(
    teacher_feats: &[Array2<f64>],
    student_feats_aligned: &Array2<f64>,
    teacher_logits: &[Array2<f64>],
    student_logits: &Array2<f64>,
    labels_onehot: &Array2<f64>,
    tau: f64,
    alpha: f64,
    beta: f64,
) -> Result<f64> {
    let k = teacher_logits.len();
    let b = student_logits.nrows();
    let uniform = TeacherWeights::uniform(b, k);
    let kd = kd_ensemble_loss(&uniform, teacher_logits, student_logits, tau)?;
    let feat = feature_ensemble_loss(&uniform, teacher_feats, student_feats_aligned)?;
    let ce = ce_loss(student_logits, labels_onehot)?;
    Ok(total_loss(ce, feat, kd, alpha, beta))
}

fn check_teacher_shapes(teacher_logits: &[Array2<f64>]) -> Result<()> {
    if teacher_logits.is_empty() {
        return Err(MmkdError::config("need at least one teacher"));
    }
    let dim = teacher_logits[0].dim();
    for (k, z) in teacher_logits.iter().enumerate() {
        if z.dim() != dim {
            return Err(MmkdError::config(format!(
                "teacher {k} logits shape {:?} differs from teacher 0 {dim:?}",
                z.dim()
            )));
        }
    }
    Ok(())
}

fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-2.0..2.0))
    }

    #[test]
    fn aver_rows_are_equal_shares() {
        let w = aver_weights(5, 3);
        for &x in w.0.iter() {
            assert_eq!(x, 1.0 / 3.0);
        }
        let w1 = aver_weights(2, 1);
        for &x in w1.0.iter() {
            assert_eq!(x, 1.0);
        }
        let w4 = aver_weights(7, 4);
        for row in w4.0.rows() {
            assert_eq!(row.to_vec(), w4.0.row(0).to_vec());
        }
    }

    #[test]
    fn ebkd_identical_teachers_get_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = rand_mat(&mut rng, 4, 6);
        let w = ebkd_weights(&[z.clone(), z.clone(), z.clone()], 4.0).unwrap();
        for &x in w.0.iter() {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ebkd_two_teacher_closed_form() {
        // Teacher A probs (0.99, 0.01): H = 0.0560 nats; teacher B uniform:
        // H = ln 2 = 0.6931. w_A = sigmoid(H_B - H_A) ~ 0.654.
        let za = array![[(0.99f64 / 0.01).ln(), 0.0]];
        let zb = array![[0.0, 0.0]];
        let w = ebkd_weights(&[za, zb], 1.0).unwrap();
        assert!((w.0[(0, 0)] - 0.654).abs() < 1e-3, "w_A = {}", w.0[(0, 0)]);
        assert!((w.0[(0, 0)] + w.0[(0, 1)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ebkd_is_invariant_to_class_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let z0 = rand_mat(&mut rng, 2, 5);
            let z1 = rand_mat(&mut rng, 2, 5);
            // Permute the classes of teacher 1.
            let perm = [3usize, 0, 4, 2, 1];
            let z1p = Array2::from_shape_fn((2, 5), |(i, j)| z1[(i, perm[j])]);
            let a = ebkd_weights(&[z0.clone(), z1], 4.0).unwrap();
            let b = ebkd_weights(&[z0, z1p], 4.0).unwrap();
            for (x, y) in a.0.iter().zip(b.0.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ebkd_lower_entropy_earns_strictly_more_weight() {
        let zb = array![[0.0, 0.0]];
        let mut last = 0.0;
        for sharp in [0.5, 1.0, 2.0, 4.0] {
            let za = array![[sharp, 0.0]];
            let w = ebkd_weights(&[za, zb.clone()], 1.0).unwrap();
            assert!(w.0[(0, 0)] > last, "weight should rise with confidence");
            last = w.0[(0, 0)];
        }
    }

    #[test]
    fn camkd_equal_teachers_get_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = rand_mat(&mut rng, 3, 4);
        let mut labels = Array2::zeros((3, 4));
        for i in 0..3 {
            labels[(i, i)] = 1.0;
        }
        let w = camkd_weights(&[z.clone(), z.clone()], &labels, 4.0).unwrap();
        for &x in w.0.iter() {
            assert!((x - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn camkd_limit_when_one_teacher_is_certain() {
        // Teacher A -> label prob 1 (CE -> 0); others uniform (CE = ln C).
        // Limit weight for A: softmax over {0, -ln C, -ln C} = 1 / (1 + 2/C).
        let c = 10usize;
        let mut za = Array2::zeros((1, c));
        za[(0, 0)] = 60.0;
        let zu = Array2::zeros((1, c));
        let mut labels = Array2::zeros((1, c));
        labels[(0, 0)] = 1.0;
        let w = camkd_weights(&[za, zu.clone(), zu], &labels, 1.0).unwrap();
        let expect = 1.0 / (1.0 + 2.0 / c as f64);
        assert!((w.0[(0, 0)] - expect).abs() < 1e-9, "got {}", w.0[(0, 0)]);
    }

    #[test]
    fn camkd_depends_only_on_true_class_probability() {
        // Perturb off-class mass while keeping the true-class probability
        // fixed; weights must not move.
        let p_true = 0.6f64;
        let za = array![[p_true.ln(), (0.3f64).ln(), (0.1f64).ln()]];
        let zb = array![[p_true.ln(), (0.2f64).ln(), (0.2f64).ln()]];
        let z_other = array![[(0.4f64).ln(), (0.3f64).ln(), (0.3f64).ln()]];
        let labels = array![[1.0, 0.0, 0.0]];
        let wa = camkd_weights(&[za, z_other.clone()], &labels, 1.0).unwrap();
        let wb = camkd_weights(&[zb, z_other], &labels, 1.0).unwrap();
        for (x, y) in wa.0.iter().zip(wb.0.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn camkd_higher_true_class_probability_earns_strictly_more_weight() {
        let labels = array![[1.0, 0.0]];
        let other = array![[0.0, 0.0]];
        let mut last = 0.0;
        for margin in [0.2, 0.5, 1.0, 2.0] {
            let z = array![[margin, 0.0]];
            let w = camkd_weights(&[z, other.clone()], &labels, 1.0).unwrap();
            assert!(w.0[(0, 0)] > last);
            last = w.0[(0, 0)];
        }
    }

    #[test]
    fn all_strategies_satisfy_the_simplex_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let teachers: Vec<_> = (0..3).map(|_| rand_mat(&mut rng, 4, 5)).collect();
            let mut labels = Array2::zeros((4, 5));
            for i in 0..4 {
                labels[(i, rng.gen_range(0..5))] = 1.0;
            }
            aver_weights(4, 3).validate(1e-6).unwrap();
            ebkd_weights(&teachers, 4.0).unwrap().validate(1e-6).unwrap();
            camkd_weights(&teachers, &labels, 4.0)
                .unwrap()
                .validate(1e-6)
                .unwrap();
        }
    }

    #[test]
    fn fitnet_loss_reduces_to_ce_on_perfect_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = rand_mat(&mut rng, 3, 4);
        let f = rand_mat(&mut rng, 3, 6);
        let mut labels = Array2::zeros((3, 4));
        for i in 0..3 {
            labels[(i, i)] = 1.0;
        }
        let loss = fitnet_mkd_loss(
            &[f.clone(), f.clone()],
            &f,
            &[z.clone(), z.clone()],
            &z,
            &labels,
            4.0,
            1.0,
            10.0,
        )
        .unwrap();
        let ce = ce_loss(&z, &labels).unwrap();
        assert!((loss - ce).abs() < 1e-12);
    }

    #[test]
    fn fitnet_equals_weighted_total_with_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let zs = rand_mat(&mut rng, 4, 5);
        let teachers_z: Vec<_> = (0..3).map(|_| rand_mat(&mut rng, 4, 5)).collect();
        let teachers_f: Vec<_> = (0..3).map(|_| rand_mat(&mut rng, 4, 7)).collect();
        let sf = rand_mat(&mut rng, 4, 7);
        let mut labels = Array2::zeros((4, 5));
        for i in 0..4 {
            labels[(i, rng.gen_range(0..5))] = 1.0;
        }
        let (tau, alpha, beta) = (4.0, 1.0, 10.0);

        let fitnet =
            fitnet_mkd_loss(&teachers_f, &sf, &teachers_z, &zs, &labels, tau, alpha, beta)
                .unwrap();

        let uniform = TeacherWeights::uniform(4, 3);
        let kd = kd_ensemble_loss(&uniform, &teachers_z, &zs, tau).unwrap();
        let feat = feature_ensemble_loss(&uniform, &teachers_f, &sf).unwrap();
        let ce = ce_loss(&zs, &labels).unwrap();
        let manual = total_loss(ce, feat, kd, alpha, beta);
        assert!((fitnet - manual).abs() < 1e-9);
    }

    #[test]
    fn fitnet_with_single_teacher_is_single_teacher_kd() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let zs = rand_mat(&mut rng, 2, 4);
        let zt = rand_mat(&mut rng, 2, 4);
        let ft = rand_mat(&mut rng, 2, 5);
        let sf = rand_mat(&mut rng, 2, 5);
        let mut labels = Array2::zeros((2, 4));
        labels[(0, 1)] = 1.0;
        labels[(1, 2)] = 1.0;
        let loss = fitnet_mkd_loss(
            std::slice::from_ref(&ft),
            &sf,
            std::slice::from_ref(&zt),
            &zs,
            &labels,
            2.0,
            1.0,
            5.0,
        )
        .unwrap();
        let one = TeacherWeights(Array2::ones((2, 1)));
        let kd = kd_ensemble_loss(&one, std::slice::from_ref(&zt), &zs, 2.0).unwrap();
        let feat = feature_ensemble_loss(&one, std::slice::from_ref(&ft), &sf).unwrap();
        let ce = ce_loss(&zs, &labels).unwrap();
        assert!((loss - (ce + feat + 5.0 * kd)).abs() < 1e-12);
    }

    #[test]
    fn strategy_parsing_round_trips() {
        for name in ["aver", "fitnet", "ebkd", "camkd", "mmkd"] {
            assert_eq!(WeightingStrategy::parse(name).unwrap().name(), name);
        }
        assert!(WeightingStrategy::parse("nope").is_err());
    }
}
