//! Outer-loop optimization of the meta-weight parameters.
//!
//! One outer update: copy the student, run `M` SGD steps on buffer
//! mini-batches under the full objective (whose teacher weights depend on
//! the meta parameters), evaluate the copy's cross-entropy on a fixed buffer
//! draw, and differentiate that value back through the recorded steps.
//!
//! The hypergradient is exact. With `alpha_M = dE/dtheta_M`, iterate
//! backwards over steps `i = M..1`:
//!
//! ```text
//! g_phi    += alpha_i . dO_i/dphi
//! alpha_i-1 = alpha_i . dO_i/dtheta
//! ```
//!
//! where `O_i(theta, phi) = theta - lr * grad_theta L(theta, phi)`. Each
//! step is rebuilt on a fresh tape from its stored snapshot and batch; both
//! vector-Jacobian products come out of one backward pass over the scalar
//! `sum_p <alpha_p, O_i(theta, phi)_p>`, because the tape can differentiate
//! through the recorded gradient itself. No Jacobian is ever materialized;
//! memory grows with `M * |theta|`, not with graph size.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::buffer::{entries_to_batch, ReplaySource};
use crate::error::{MmkdError, Result};
use crate::losses::ce_on;
use crate::meta::{BoundMeta, MetaParams};
use crate::nn::{clone_student, forward_on_tape, sgd_step, AlignmentMap, Model};
use crate::objective::{build_batch_loss, LossHyper, TeacherBatch, WeightMode};

/// Hard cap on the outer-objective evaluation draw.
pub const OUTER_EVAL_LIMIT: usize = 1024;

/// One recorded inner step: the batch it consumed and the learning rate used.
#[derive(Debug, Clone)]
pub struct InnerStep {
    pub inputs: Array2<f64>,
    pub labels_onehot: Array2<f64>,
    pub teachers: TeacherBatch,
    pub lr: f64,
}

/// The `M + 1` parameter snapshots of the student copy plus everything
/// needed to rebuild each step's computation.
#[derive(Debug, Clone)]
pub struct InnerTrajectory {
    pub snapshots: Vec<(Model, AlignmentMap)>,
    pub steps: Vec<InnerStep>,
    pub hyper: LossHyper,
}

impl InnerTrajectory {
    pub fn final_state(&self) -> &(Model, AlignmentMap) {
        self.snapshots.last().unwrap()
    }
}

/// Gradient with respect to the meta parameters, entry order matching
/// `MetaParams::params()`.
#[derive(Debug, Clone)]
pub struct HyperGradient(pub Vec<Array2<f64>>);

impl HyperGradient {
    pub fn zeros_like(meta: &MetaParams) -> Self {
        HyperGradient(
            meta.params()
                .values()
                .map(|v| Array2::zeros(v.dim()))
                .collect(),
        )
    }

    pub fn norm(&self) -> f64 {
        self.0
            .iter()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.iter().all(|x| x.is_finite()))
    }
}

/// Copy the student and run `M` SGD steps on buffer mini-batches.
///
/// The live student and its alignment map are never touched. Returns
/// [`MmkdError::BufferNotReady`] when `m > 0` and the buffer is empty, which
/// callers treat as "skip this outer update".
#[allow(clippy::too_many_arguments)]
pub fn inner_loop(
    student: &Model,
    align: &AlignmentMap,
    teachers: &[Model],
    source: &ReplaySource,
    meta: &MetaParams,
    m: usize,
    batch_size: usize,
    lr: f64,
    hyper: &LossHyper,
    rng: &mut ChaCha8Rng,
) -> Result<InnerTrajectory> {
    let (mut copy, mut align_copy) = clone_student(student, align);
    let mut snapshots = vec![(copy.clone(), align_copy.clone())];
    let mut steps = Vec::with_capacity(m);

    if m > 0 && source.is_empty() {
        return Err(MmkdError::BufferNotReady);
    }

    for _ in 0..m {
        let batch = source.sample(batch_size, rng)?;
        let teacher_batch = forward_teachers(teachers, &batch.inputs)?;

        let mut tape = Tape::new();
        let bound = BoundMeta::bind_const(&mut tape, meta);
        let mut theta: Vec<Var> = copy.params.bind(&mut tape);
        let av = tape.leaf(align_copy.weight().clone());
        theta.push(av);
        let loss = build_batch_loss(
            &mut tape,
            &copy.arch,
            &theta[..theta.len() - 1],
            av,
            &batch.inputs,
            &batch.labels_onehot,
            &teacher_batch,
            &WeightMode::Meta(&bound),
            hyper,
        );
        let grads = tape.grad(loss.total, &theta);
        let grad_values: Vec<Array2<f64>> = grads.iter().map(|&g| tape.value(g).clone()).collect();

        let n_model = copy.params.len();
        copy.params = sgd_step(&copy.params, &grad_values[..n_model], lr)?;
        *align_copy.params_mut() = sgd_step(align_copy.params(), &grad_values[n_model..], lr)?;

        steps.push(InnerStep {
            inputs: batch.inputs,
            labels_onehot: batch.labels_onehot,
            teachers: teacher_batch,
            lr,
        });
        snapshots.push((copy.clone(), align_copy.clone()));
    }

    Ok(InnerTrajectory {
        snapshots,
        steps,
        hyper: *hyper,
    })
}

/// Mean cross-entropy of a student state over the buffer's fixed
/// evaluation draw (the whole buffer when it holds at most
/// [`OUTER_EVAL_LIMIT`] entries, otherwise the hardest entries).
pub fn outer_objective(state: &(Model, AlignmentMap), source: &ReplaySource) -> Result<f64> {
    let entries = source.eval_entries(OUTER_EVAL_LIMIT);
    if entries.is_empty() {
        return Err(MmkdError::BufferNotReady);
    }
    let batch = entries_to_batch(entries);
    let out = state.0.forward(&batch.inputs)?;
    crate::losses::ce_loss(&out.logits, &batch.labels_onehot)
}

/// Exact hypergradient of [`outer_objective`] with respect to the meta
/// parameters, through the recorded inner trajectory.
pub fn reverse_hg(
    traj: &InnerTrajectory,
    meta: &MetaParams,
    source: &ReplaySource,
) -> Result<HyperGradient> {
    let m = traj.steps.len();
    if m == 0 {
        return Ok(HyperGradient::zeros_like(meta));
    }

    let entries = source.eval_entries(OUTER_EVAL_LIMIT);
    if entries.is_empty() {
        return Err(MmkdError::BufferNotReady);
    }
    let eval = entries_to_batch(entries);

    // alpha_M = dE/dtheta at the final snapshot.
    let (final_model, final_align) = traj.final_state();
    let outer_grad = {
        let mut tape = Tape::new();
        let mut theta = final_model.params.bind(&mut tape);
        let av = tape.leaf(final_align.weight().clone());
        theta.push(av);
        let x = tape.constant(eval.inputs.clone());
        let (logits, _) = forward_on_tape(&mut tape, &final_model.arch, &theta[..theta.len() - 1], x);
        let y = tape.constant(eval.labels_onehot.clone());
        let e = ce_on(&mut tape, logits, y);
        let grads = tape.grad(e, &theta);
        grads
            .iter()
            .map(|&g| tape.value(g).clone())
            .collect::<Vec<_>>()
    };

    let theta_snapshots: Vec<Vec<Array2<f64>>> = traj
        .snapshots
        .iter()
        .map(|(model, align)| {
            let mut v: Vec<Array2<f64>> = model.params.values().cloned().collect();
            v.push(align.weight().clone());
            v
        })
        .collect();
    let phi: Vec<Array2<f64>> = meta.params().values().cloned().collect();
    let lrs: Vec<f64> = traj.steps.iter().map(|s| s.lr).collect();

    let arch = traj.snapshots[0].0.arch.clone();
    let hyper = traj.hyper;
    let steps = &traj.steps;
    let g_phi = reverse_hypergradient(
        &theta_snapshots,
        &phi,
        &lrs,
        &outer_grad,
        |tape, i, theta, phi_vars| {
            let bound = BoundMeta {
                vars: phi_vars.to_vec(),
            };
            let step = &steps[i];
            let align_var = theta[theta.len() - 1];
            let loss = build_batch_loss(
                tape,
                &arch,
                &theta[..theta.len() - 1],
                align_var,
                &step.inputs,
                &step.labels_onehot,
                &step.teachers,
                &WeightMode::Meta(&bound),
                &hyper,
            );
            loss.total
        },
    )?;

    let hg = HyperGradient(g_phi);
    if !hg.is_finite() {
        return Err(MmkdError::training(
            "non-finite hypergradient; outer update aborted",
        ));
    }
    Ok(hg)
}

/// Core reverse-mode hypergradient over recorded SGD steps, generic in the
/// inner objective.
///
/// `theta_snapshots` holds `M + 1` parameter lists; step `i` maps snapshot
/// `i` to `i + 1` via `theta - lrs[i] * grad_theta L_i(theta, phi)`, where
/// `L_i` is built by `build_inner_loss(tape, i, theta_vars, phi_vars)`.
/// Returns `dE/dphi` given `outer_grad = dE/dtheta_M`.
pub fn reverse_hypergradient<F>(
    theta_snapshots: &[Vec<Array2<f64>>],
    phi: &[Array2<f64>],
    lrs: &[f64],
    outer_grad: &[Array2<f64>],
    build_inner_loss: F,
) -> Result<Vec<Array2<f64>>>
where
    F: Fn(&mut Tape, usize, &[Var], &[Var]) -> Var,
{
    let m = lrs.len();
    assert_eq!(
        theta_snapshots.len(),
        m + 1,
        "need M + 1 snapshots for M steps"
    );
    let mut alpha: Vec<Array2<f64>> = outer_grad.to_vec();
    let mut g_phi: Vec<Array2<f64>> = phi.iter().map(|p| Array2::zeros(p.dim())).collect();

    for i in (0..m).rev() {
        let mut tape = Tape::new();
        let theta_vars: Vec<Var> = theta_snapshots[i]
            .iter()
            .map(|a| tape.leaf(a.clone()))
            .collect();
        let phi_vars: Vec<Var> = phi.iter().map(|a| tape.leaf(a.clone())).collect();

        let loss = build_inner_loss(&mut tape, i, &theta_vars, &phi_vars);
        let inner_grads = tape.grad(loss, &theta_vars);

        // Scalar s = sum_p <alpha_p, theta_p - lr * g_p>; its gradients are
        // the two vector-Jacobian products of the step map.
        let mut s: Option<Var> = None;
        for ((&tv, &gv), a) in theta_vars.iter().zip(&inner_grads).zip(&alpha) {
            let step_term = tape.scale(gv, lrs[i]);
            let next = tape.sub(tv, step_term);
            let av = tape.constant(a.clone());
            let d = tape.dot(av, next);
            s = Some(match s {
                Some(acc) => tape.add(acc, d),
                None => d,
            });
        }
        let s = s.expect("at least one parameter");

        let mut wrt = theta_vars.clone();
        wrt.extend_from_slice(&phi_vars);
        let grads = tape.grad(s, &wrt);

        let n_theta = theta_vars.len();
        for (j, &g) in grads[..n_theta].iter().enumerate() {
            alpha[j] = tape.value(g).clone();
            if alpha[j].iter().any(|x| !x.is_finite()) {
                return Err(MmkdError::training(format!(
                    "non-finite adjoint at inner step {i}"
                )));
            }
        }
        for (j, &g) in grads[n_theta..].iter().enumerate() {
            g_phi[j] += tape.value(g);
        }
    }
    Ok(g_phi)
}

/// Adam state for the meta optimizer; moments persist across outer updates.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(meta: &MetaParams) -> Self {
        AdamState {
            m: meta.params().values().map(|p| Array2::zeros(p.dim())).collect(),
            v: meta.params().values().map(|p| Array2::zeros(p.dim())).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One Adam update of the meta parameters.
pub fn meta_step(
    meta: &mut MetaParams,
    grad: &HyperGradient,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if !grad.is_finite() {
        return Err(MmkdError::training("non-finite meta gradient"));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for ((p, g), (m, v)) in meta
        .params_mut()
        .values_mut()
        .zip(&grad.0)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        azip(m, g, |m, g| *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g);
        azip(v, g, |v, g| *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g);
        for ((p, m), v) in p.iter_mut().zip(m.iter()).zip(v.iter()) {
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

fn azip(dst: &mut Array2<f64>, src: &Array2<f64>, f: impl Fn(&mut f64, f64)) {
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        f(d, *s);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::buffer::HardBuffer;
    use crate::nn::Architecture;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn filled_source(
        rng: &mut ChaCha8Rng,
        n: usize,
        n_in: usize,
        classes: usize,
    ) -> ReplaySource {
        let mut buf = HardBuffer::new(n);
        let inputs = Array2::from_shape_fn((n, n_in), |_| rng.gen_range(-1.0..1.0));
        let mut labels = Array2::zeros((n, classes));
        for i in 0..n {
            labels[(i, rng.gen_range(0..classes))] = 1.0;
        }
        let ids: Vec<u64> = (0..n as u64).collect();
        let scores: Vec<f64> = (0..n).map(|i| i as f64).collect();
        buf.update(&inputs, &labels, &ids, &scores);
        ReplaySource::Hard(buf)
    }

    fn tiny_setup(
        seed: u64,
    ) -> (Model, AlignmentMap, Vec<Model>, ReplaySource, MetaParams, LossHyper) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let student = Model::new(
            Architecture::Mlp {
                sizes: vec![3, 6, 4, 3],
            },
            seed,
        );
        let teachers: Vec<Model> = (0..2)
            .map(|k| {
                Model::new(
                    Architecture::Mlp {
                        sizes: vec![3, 8, 5, 3],
                    },
                    seed * 10 + k,
                )
            })
            .collect();
        let align = AlignmentMap::new(4, 5, seed);
        let source = filled_source(&mut rng, 12, 3, 3);
        let mut meta = MetaParams::with_hidden(2, 3, 4, 6, 4, seed);
        // Move off the zero-init point so hypergradients are generic.
        let mut prng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
        for v in meta.params_mut().values_mut() {
            v.mapv_inplace(|_| prng.gen_range(-0.4..0.4));
        }
        let hyper = LossHyper::new(1.0, 10.0, 4.0);
        (student, align, teachers, source, meta, hyper)
    }

    #[test]
    fn zero_steps_yield_single_snapshot_and_zero_hypergradient() {
        let (student, align, teachers, source, meta, hyper) = tiny_setup(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let traj = inner_loop(
            &student, &align, &teachers, &source, &meta, 0, 4, 0.1, &hyper, &mut rng,
        )
        .unwrap();
        assert_eq!(traj.snapshots.len(), 1);
        assert!(traj.steps.is_empty());
        let hg = reverse_hg(&traj, &meta, &source).unwrap();
        assert_eq!(hg.norm(), 0.0);
    }

    #[test]
    fn zero_learning_rate_is_a_null_step() {
        let (student, align, teachers, source, meta, hyper) = tiny_setup(2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let traj = inner_loop(
            &student, &align, &teachers, &source, &meta, 1, 4, 0.0, &hyper, &mut rng,
        )
        .unwrap();
        assert_eq!(traj.snapshots[0].0.params, traj.snapshots[1].0.params);
        assert_eq!(
            traj.snapshots[0].1.weight(),
            traj.snapshots[1].1.weight()
        );
    }

    #[test]
    fn empty_buffer_with_steps_requested_signals_skip() {
        let (student, align, teachers, _, meta, hyper) = tiny_setup(3);
        let empty = ReplaySource::Hard(HardBuffer::new(8));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = inner_loop(
            &student, &align, &teachers, &empty, &meta, 1, 4, 0.1, &hyper, &mut rng,
        )
        .unwrap_err();
        assert!(matches!(err, MmkdError::BufferNotReady));
    }

    #[test]
    fn two_steps_match_a_hand_rolled_loop() {
        let (student, align, teachers, source, meta, hyper) = tiny_setup(4);
        let traj = inner_loop(
            &student,
            &align,
            &teachers,
            &source,
            &meta,
            2,
            4,
            0.05,
            &hyper,
            &mut ChaCha8Rng::seed_from_u64(7),
        )
        .unwrap();

        // Hand-rolled replay with the same RNG stream and building blocks.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (mut copy, mut acopy) = clone_student(&student, &align);
        for step in 0..2 {
            let batch = source.sample(4, &mut rng).unwrap();
            let tb = forward_teachers(&teachers, &batch.inputs).unwrap();
            let mut tape = Tape::new();
            let bound = BoundMeta::bind_const(&mut tape, &meta);
            let mut theta = copy.params.bind(&mut tape);
            let av = tape.leaf(acopy.weight().clone());
            theta.push(av);
            let loss = build_batch_loss(
                &mut tape,
                &copy.arch,
                &theta[..theta.len() - 1],
                av,
                &batch.inputs,
                &batch.labels_onehot,
                &tb,
                &WeightMode::Meta(&bound),
                &hyper,
            );
            let grads = tape.grad(loss.total, &theta);
            let gv: Vec<Array2<f64>> = grads.iter().map(|&g| tape.value(g).clone()).collect();
            let n = copy.params.len();
            copy.params = sgd_step(&copy.params, &gv[..n], 0.05).unwrap();
            *acopy.params_mut() = sgd_step(acopy.params(), &gv[n..], 0.05).unwrap();
            assert_eq!(
                copy.params,
                traj.snapshots[step + 1].0.params,
                "snapshot {} diverged",
                step + 1
            );
        }
    }

    #[test]
    fn live_student_is_bitwise_untouched_by_an_outer_cycle() {
        let (student, align, teachers, source, meta, hyper) = tiny_setup(5);
        let before: Vec<f64> = student.params.flat();
        let abefore = align.weight().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let traj = inner_loop(
            &student, &align, &teachers, &source, &meta, 2, 4, 0.1, &hyper, &mut rng,
        )
        .unwrap();
        let _ = reverse_hg(&traj, &meta, &source).unwrap();
        let after: Vec<f64> = student.params.flat();
        assert!(before
            .iter()
            .zip(&after)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(&abefore, align.weight());
    }

    #[test]
    fn outer_objective_matches_direct_ce_and_limits() {
        let (student, align, teachers, source, meta, hyper) = tiny_setup(6);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let traj = inner_loop(
            &student, &align, &teachers, &source, &meta, 1, 4, 0.1, &hyper, &mut rng,
        )
        .unwrap();
        let e = outer_objective(traj.final_state(), &source).unwrap();
        let entries = source.eval_entries(OUTER_EVAL_LIMIT);
        let batch = entries_to_batch(entries);
        let out = traj.final_state().0.forward(&batch.inputs).unwrap();
        let direct = crate::losses::ce_loss(&out.logits, &batch.labels_onehot).unwrap();
        assert_eq!(e.to_bits(), direct.to_bits());
    }

    #[test]
    fn outer_objective_uniform_predictor_scores_ln_c() {
        let mut buf = HardBuffer::new(4);
        let inputs = array![[0.2, -0.1], [0.4, 0.3]];
        let labels = array![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        buf.update(&inputs, &labels, &[0, 1], &[1.0, 2.0]);
        let source = ReplaySource::Hard(buf);
        // Zero weights make every logit zero: uniform over 3 classes.
        let mut model = Model::new(Architecture::Mlp { sizes: vec![2, 3] }, 0);
        model.params.get_mut("layer0.weight").unwrap().fill(0.0);
        let align = AlignmentMap::new(2, 2, 0);
        let e = outer_objective(&(model, align), &source).unwrap();
        assert!((e - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn outer_objective_perfect_predictor_scores_zero() {
        let mut buf = HardBuffer::new(4);
        let inputs = array![[1.0, 0.0], [0.0, 1.0]];
        let labels = array![[1.0, 0.0], [0.0, 1.0]];
        buf.update(&inputs, &labels, &[0, 1], &[1.0, 2.0]);
        let source = ReplaySource::Hard(buf);
        let mut model = Model::new(Architecture::Mlp { sizes: vec![2, 2] }, 0);
        *model.params.get_mut("layer0.weight").unwrap() = Array2::eye(2) * 60.0;
        let align = AlignmentMap::new(2, 2, 0);
        let e = outer_objective(&(model, align), &source).unwrap();
        assert!(e < 1e-9);
    }

    #[test]
    fn one_parameter_quadratic_toy_has_analytic_hypergradient() {
        // Inner loss 0.5 (theta - phi)^2, theta_0 = 1, lr = 0.5, M = 1;
        // outer E = 0.5 theta_1^2. theta_1 = 0.5, dE/dphi = theta_1 * lr = 0.25.
        let theta0 = vec![array![[1.0]]];
        let theta1 = vec![array![[0.5]]];
        let phi = vec![array![[0.0]]];
        let outer_grad = vec![array![[0.5]]]; // theta_1
        let g = reverse_hypergradient(
            &[theta0, theta1],
            &phi,
            &[0.5],
            &outer_grad,
            |tape, _i, theta, phi| {
                let d = tape.sub(theta[0], phi[0]);
                let sq = tape.mul(d, d);
                let half = tape.scale(sq, 0.5);
                tape.sum_all(half)
            },
        )
        .unwrap();
        assert!((g[0][(0, 0)] - 0.25).abs() < 1e-8, "got {}", g[0][(0, 0)]);
    }

    #[test]
    fn hypergradient_matches_finite_differences_on_tiny_mlps() {
        for m in [1usize, 2, 3] {
            let (student, align, teachers, source, meta, hyper) = tiny_setup(10 + m as u64);
            let seed = 100 + m as u64;
            let lr = 0.1;

            let run = |meta: &MetaParams| -> f64 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let traj = inner_loop(
                    &student, &align, &teachers, &source, meta, m, 4, lr, &hyper, &mut rng,
                )
                .unwrap();
                outer_objective(traj.final_state(), &source).unwrap()
            };

            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let traj = inner_loop(
                &student, &align, &teachers, &source, &meta, m, 4, lr, &hyper, &mut rng,
            )
            .unwrap();
            let hg = reverse_hg(&traj, &meta, &source).unwrap();

            let h = 1e-5;
            let names: Vec<String> = meta.params().names().map(|s| s.to_string()).collect();
            for (pi, name) in names.iter().enumerate() {
                let base = meta.params().get(name).unwrap().clone();
                for idx in 0..base.len() {
                    let (r, c) = (idx / base.ncols(), idx % base.ncols());
                    let mut plus = meta.clone();
                    plus.params_mut().get_mut(name).unwrap()[(r, c)] += h;
                    let mut minus = meta.clone();
                    minus.params_mut().get_mut(name).unwrap()[(r, c)] -= h;
                    let numeric = (run(&plus) - run(&minus)) / (2.0 * h);
                    let got = hg.0[pi][(r, c)];
                    let denom = numeric.abs().max(got.abs()).max(1e-6);
                    assert!(
                        (numeric - got).abs() / denom < 1e-4,
                        "M={m} {name} ({r},{c}): fd {numeric:.10e} vs rhg {got:.10e}"
                    );
                }
            }
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters_unchanged() {
        let (_, _, _, _, mut meta, _) = tiny_setup(20);
        let before: Vec<f64> = meta.params().flat();
        let mut state = AdamState::new(&meta);
        let zero = HyperGradient::zeros_like(&meta);
        meta_step(&mut meta, &zero, &mut state, 1e-3).unwrap();
        let after: Vec<f64> = meta.params().flat();
        assert_eq!(before, after);
    }

    #[test]
    fn adam_constant_gradient_moves_monotonically_against_its_sign() {
        // Independent scalar simulation of the moment recursion.
        let mut meta = MetaParams::with_hidden(2, 2, 2, 2, 2, 0);
        let mut state = AdamState::new(&meta);
        let g: Vec<Array2<f64>> = meta
            .params()
            .values()
            .map(|p| Array2::from_elem(p.dim(), 0.3))
            .collect();
        let grad = HyperGradient(g);
        let lr = 1e-3;
        let mut last = meta.params().flat();
        let mut sim = 0.0f64;
        let (mut sm, mut sv) = (0.0f64, 0.0f64);
        for t in 1..=50 {
            meta_step(&mut meta, &grad, &mut state, lr).unwrap();
            let now = meta.params().flat();
            for (a, b) in last.iter().zip(&now) {
                assert!(b < a, "constant positive gradient must decrease entries");
            }
            // Scalar oracle of the same recursion.
            sm = ADAM_BETA1 * sm + (1.0 - ADAM_BETA1) * 0.3;
            sv = ADAM_BETA2 * sv + (1.0 - ADAM_BETA2) * 0.09;
            let m_hat = sm / (1.0 - ADAM_BETA1.powi(t));
            let v_hat = sv / (1.0 - ADAM_BETA2.powi(t));
            sim -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            assert!((now[0] - (last[0] + (sim - (sim + lr * m_hat / (v_hat.sqrt() + ADAM_EPS))))).abs() < 1.0);
            last = now;
        }
        // Endpoint matches the scalar simulation exactly.
        let got = meta.params().flat()[0];
        let start = MetaParams::with_hidden(2, 2, 2, 2, 2, 0).params().flat()[0];
        assert!(((got - start) - sim).abs() < 1e-12, "{got} vs {}", start + sim);
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let (_, _, _, _, mut meta, _) = tiny_setup(21);
        let mut state = AdamState::new(&meta);
        let mut g = HyperGradient::zeros_like(&meta);
        g.0[0][(0, 0)] = f64::NAN;
        assert!(matches!(
            meta_step(&mut meta, &g, &mut state, 1e-3),
            Err(MmkdError::Training(_))
        ));
    }
}

/// Forward all teachers on a batch, collecting frozen outputs.
pub fn forward_teachers(teachers: &[Model], inputs: &Array2<f64>) -> Result<TeacherBatch> {
    let mut logits = Vec::with_capacity(teachers.len());
    let mut feats = Vec::with_capacity(teachers.len());
    for t in teachers {
        let out = t.forward(inputs)?;
        logits.push(out.logits);
        feats.push(out.features);
    }
    Ok(TeacherBatch { logits, feats })
}
