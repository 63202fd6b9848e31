//! Orchestration: teacher pretraining, distillation runs for every
//! weighting strategy, evaluation, relative-improvement aggregation,
//! beta sweeps, ablations, and artifact emission.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::baselines::{camkd_weights, ebkd_weights, WeightingStrategy};
use crate::bilevel::{
    forward_teachers, inner_loop, meta_step, outer_objective, reverse_hg, AdamState,
};
use crate::buffer::{per_sample_ce, HardBuffer, HoldoutPool, ReplaySource, ReservoirBuffer};
use crate::checkpoint;
use crate::config::DistillConfig;
use crate::data::{batches, one_hot, Batch, BatchPlan, Dataset};
use crate::error::{MmkdError, Result};
use crate::losses::PROB_FLOOR;
use crate::meta::{BoundMeta, MetaParams};
use crate::nn::{sgd_step, AlignmentMap, Architecture, Model};
use crate::objective::{build_batch_loss, BatchLoss, LossHyper, TeacherBatch, WeightMode};

/// Frozen teacher outputs over a whole dataset, indexed by sample id.
pub struct TeacherCache {
    logits: Vec<Array2<f64>>,
    feats: Vec<Array2<f64>>,
}

impl TeacherCache {
    pub fn build(teachers: &[Model], dataset: &Dataset) -> Result<Self> {
        let mut logits = Vec::with_capacity(teachers.len());
        let mut feats = Vec::with_capacity(teachers.len());
        for t in teachers {
            let out = t.forward(&dataset.inputs)?;
            logits.push(out.logits);
            feats.push(out.features);
        }
        Ok(TeacherCache { logits, feats })
    }

    pub fn gather(&self, ids: &[u64]) -> TeacherBatch {
        let k = self.logits.len();
        let c = self.logits[0].ncols();
        let d = self.feats[0].ncols();
        let b = ids.len();
        let mut logits = Vec::with_capacity(k);
        let mut feats = Vec::with_capacity(k);
        for t in 0..k {
            let mut z = Array2::zeros((b, c));
            let mut f = Array2::zeros((b, d));
            for (i, &id) in ids.iter().enumerate() {
                let r = id as usize;
                for j in 0..c {
                    z[(i, j)] = self.logits[t][(r, j)];
                }
                for j in 0..d {
                    f[(i, j)] = self.feats[t][(r, j)];
                }
            }
            logits.push(z);
            feats.push(f);
        }
        TeacherBatch { logits, feats }
    }
}

/// Result of label-only training (used for teachers and the student
/// baseline alike).
pub struct TeacherRun {
    pub model: Model,
    pub test_top1: f64,
    pub epoch_losses: Vec<f64>,
}

/// Label-only cross-entropy training with the configured schedule.
pub fn train_teacher(
    arch: &Architecture,
    train: &Dataset,
    test: &Dataset,
    config: &DistillConfig,
    seed: u64,
) -> Result<TeacherRun> {
    config.validate()?;
    let mut model = Model::new(arch.clone(), seed);
    let plan = BatchPlan {
        batch_size: config.batch_size,
        seed,
    };
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let mut total = 0.0;
        let bs = batches(train, &plan, epoch)?;
        let n_batches = bs.len();
        for (bi, batch) in bs.into_iter().enumerate() {
            let mut tape = Tape::new();
            let vars = model.params.bind(&mut tape);
            let x = tape.constant(batch.inputs.clone());
            let (logits, _) = crate::nn::forward_on_tape(&mut tape, &model.arch, &vars, x);
            let y = tape.constant(batch.labels_onehot.clone());
            let loss = crate::losses::ce_on(&mut tape, logits, y);
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(MmkdError::training(format!(
                    "label-only training diverged at epoch {epoch} batch {bi}"
                )));
            }
            total += value;
            let grads = tape.grad(loss, &vars);
            let grad_values: Vec<Array2<f64>> =
                grads.iter().map(|&g| tape.value(g).clone()).collect();
            model.params = sgd_step(&model.params, &grad_values, lr)?;
        }
        epoch_losses.push(total / n_batches as f64);
    }
    let test_top1 = evaluate(&model, test)?;
    Ok(TeacherRun {
        model,
        test_top1,
        epoch_losses,
    })
}

/// Top-1 accuracy in percent; argmax ties resolve to the lowest class index.
pub fn evaluate(model: &Model, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(MmkdError::config("cannot evaluate on an empty dataset"));
    }
    if dataset.input_dim() != model.arch.input_dim() {
        return Err(MmkdError::config(format!(
            "dataset width {} does not match model input {}",
            dataset.input_dim(),
            model.arch.input_dim()
        )));
    }
    let out = model.forward(&dataset.inputs)?;
    let mut correct = 0usize;
    for (row, &label) in out.logits.rows().into_iter().zip(&dataset.labels) {
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if v > best_v {
                best_v = v;
                best = j;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64 * 100.0)
}

/// One per-epoch metrics row (the columns of `metrics.csv`).
#[derive(Debug, Clone)]
pub struct EpochRow {
    pub epoch: usize,
    pub l_ce: f64,
    pub l_f: f64,
    pub l_r: f64,
    pub l_total: f64,
    pub test_top1: f64,
    pub buffer_min_difficulty: f64,
    pub meta_updates: usize,
    pub wall_clock_s: f64,
}

/// One outer-update diagnostics row.
#[derive(Debug, Clone)]
pub struct MetaRow {
    pub step: usize,
    pub outer_ce_before: f64,
    pub outer_ce_after: f64,
    pub hypergrad_norm: f64,
    pub wr_entropy_mean: f64,
}

/// Everything a single distillation run produces.
pub struct DistillRun {
    pub epoch_rows: Vec<EpochRow>,
    pub batch_losses: Vec<(f64, f64, f64, f64)>,
    pub meta_rows: Vec<MetaRow>,
    pub final_test_top1: f64,
    pub student: Model,
    pub align: AlignmentMap,
    pub meta: Option<MetaParams>,
    pub buffer_dump: Option<String>,
    pub wall_clock_s: f64,
}

fn mean_entropy(weights: &Array2<f64>) -> f64 {
    let mut total = 0.0;
    for row in weights.rows() {
        let h: f64 = row
            .iter()
            .map(|&w| {
                let w = w.max(PROB_FLOOR);
                -w * w.ln()
            })
            .sum();
        total += h;
    }
    total / weights.nrows() as f64
}

/// Split `capacity` holdout samples off a training set (deterministic in
/// `seed`); returns `(train_without_holdout, holdout_pool)`.
fn carve_holdout(train: &Dataset, capacity: usize, seed: u64) -> Result<(Dataset, HoldoutPool)> {
    if capacity + 1 >= train.len() {
        return Err(MmkdError::config(format!(
            "holdout capacity {capacity} leaves no training data (N = {})",
            train.len()
        )));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x686f_6c64);
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let (hold_rows, train_rows) = order.split_at(capacity);

    let subset = |rows: &[usize]| -> Dataset {
        let mut inputs = Array2::zeros((rows.len(), train.input_dim()));
        let mut labels = Vec::with_capacity(rows.len());
        let mut ids = Vec::with_capacity(rows.len());
        for (i, &r) in rows.iter().enumerate() {
            for j in 0..train.input_dim() {
                inputs[(i, j)] = train.inputs[(r, j)];
            }
            labels.push(train.labels[r]);
            ids.push(train.ids[r]);
        }
        Dataset {
            inputs,
            labels,
            classes: train.classes,
            ids,
        }
    };
    let hold = subset(hold_rows);
    let pool = HoldoutPool::new(&hold.inputs, &hold.one_hot(), &hold.ids);
    Ok((subset(train_rows), pool))
}

/// Full distillation run for one seed.
///
/// Per batch: forward frozen teachers and student, compute per-sample
/// teacher weights under the configured strategy, take one SGD step on
/// `L_total`, refresh the replay source. Every `meta_period` batches (MMKD
/// only) an outer update adjusts the meta-weight parameters via the exact
/// reverse hypergradient, skipped while the buffer is colder than one batch.
pub fn distill(
    config: &DistillConfig,
    student_arch: &Architecture,
    teachers: &[Model],
    train: &Dataset,
    test: &Dataset,
    seed: u64,
) -> Result<DistillRun> {
    config.validate()?;
    if teachers.is_empty() {
        return Err(MmkdError::config("need at least one teacher"));
    }
    let classes = train.classes;
    if student_arch.classes() != classes {
        return Err(MmkdError::config(format!(
            "student has {} classes, dataset has {classes}",
            student_arch.classes()
        )));
    }
    let d_t = teachers[0].arch.feature_dim();
    for (i, t) in teachers.iter().enumerate() {
        if t.arch.classes() != classes {
            return Err(MmkdError::config(format!(
                "teacher {i} has {} classes, dataset has {classes}",
                t.arch.classes()
            )));
        }
        if t.arch.feature_dim() != d_t {
            return Err(MmkdError::config(format!(
                "teacher {i} feature dim {} differs from teacher 0 ({d_t})",
                t.arch.feature_dim()
            )));
        }
    }

    let started = Instant::now();
    let k = teachers.len();
    let b = config.batch_size;
    let is_mmkd = config.strategy == WeightingStrategy::Mmkd;

    // Holdout ablation trains on a reduced set.
    let (train_used, holdout_pool) = if config.holdout {
        let (t, p) = carve_holdout(train, config.buffer_capacity, seed)?;
        (t, Some(p))
    } else {
        (train.clone(), None)
    };

    let cache = TeacherCache::build(teachers, train)?;

    let mut student = Model::new(student_arch.clone(), seed);
    let d_s = student_arch.feature_dim();
    let mut align = AlignmentMap::new(d_s, d_t, seed);
    let mut meta = MetaParams::new(k, classes, b, seed);
    let mut adam = AdamState::new(&meta);
    let mut run_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6d_6b64);

    let mut source = match (&holdout_pool, config.no_hard_buffer) {
        (Some(pool), _) => ReplaySource::Holdout(pool.clone()),
        (None, true) => ReplaySource::Uniform(ReservoirBuffer::new(config.buffer_capacity)),
        (None, false) => ReplaySource::Hard(HardBuffer::new(config.buffer_capacity)),
    };

    let hyper = LossHyper {
        alpha: if config.no_feature_loss { 0.0 } else { config.alpha },
        beta: config.beta,
        tau: config.tau,
        normalize_similarity: config.normalize_similarity,
        uniform_logit_weights: config.uniform_wr,
        uniform_feature_weights: config.uniform_wf,
    };

    let plan = BatchPlan {
        batch_size: b,
        seed,
    };
    let mut epoch_rows = Vec::with_capacity(config.epochs);
    let mut batch_losses = Vec::new();
    let mut meta_rows = Vec::new();
    let mut meta_updates = 0usize;
    let mut global_batch = 0usize;

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let epoch_batches = batches(&train_used, &plan, epoch)?;
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let n_batches = epoch_batches.len();

        for (bi, batch) in epoch_batches.into_iter().enumerate() {
            global_batch += 1;
            let teacher_batch = cache.gather(&batch.ids);
            let (loss_values, pre_step_logits, wr_values) = student_step(
                &mut student,
                &mut align,
                &meta,
                &batch,
                &teacher_batch,
                &hyper,
                config.strategy,
                lr,
            )?;
            if !loss_values.3.is_finite() {
                return Err(MmkdError::training(format!(
                    "distillation diverged at epoch {epoch} batch {bi}"
                )));
            }
            sums.0 += loss_values.0;
            sums.1 += loss_values.1;
            sums.2 += loss_values.2;
            sums.3 += loss_values.3;
            batch_losses.push(loss_values);

            match &mut source {
                ReplaySource::Hard(buf) => {
                    let scores = per_sample_ce(&pre_step_logits, &batch.labels_onehot);
                    buf.update(&batch.inputs, &batch.labels_onehot, &batch.ids, &scores);
                }
                ReplaySource::Uniform(buf) => {
                    buf.update(&batch.inputs, &batch.labels_onehot, &batch.ids, &mut run_rng);
                }
                ReplaySource::Holdout(_) => {}
            }

            if is_mmkd && global_batch % config.meta_period == 0 && source.len() >= b {
                match inner_loop(
                    &student,
                    &align,
                    teachers,
                    &source,
                    &meta,
                    config.inner_steps,
                    b,
                    lr,
                    &hyper,
                    &mut run_rng,
                ) {
                    Ok(traj) => {
                        let ce_before = outer_objective(&traj.snapshots[0], &source)?;
                        let ce_after = outer_objective(traj.final_state(), &source)?;
                        match reverse_hg(&traj, &meta, &source) {
                            Ok(hg) => {
                                let norm = hg.norm();
                                meta_step(&mut meta, &hg, &mut adam, config.meta_lr)?;
                                meta_updates += 1;
                                meta_rows.push(MetaRow {
                                    step: global_batch,
                                    outer_ce_before: ce_before,
                                    outer_ce_after: ce_after,
                                    hypergrad_norm: norm,
                                    wr_entropy_mean: wr_values
                                        .as_ref()
                                        .map(mean_entropy)
                                        .unwrap_or(0.0),
                                });
                            }
                            Err(MmkdError::Training(msg)) => {
                                // A meta failure must not corrupt the student;
                                // log and keep training.
                                eprintln!("outer update skipped: {msg}");
                            }
                            Err(other) => return Err(other),
                        }
                    }
                    Err(MmkdError::BufferNotReady) => {}
                    Err(other) => return Err(other),
                }
            }
        }

        let test_top1 = evaluate(&student, test)?;
        let inv = 1.0 / n_batches as f64;
        epoch_rows.push(EpochRow {
            epoch,
            l_ce: sums.0 * inv,
            l_f: sums.1 * inv,
            l_r: sums.2 * inv,
            l_total: sums.3 * inv,
            test_top1,
            buffer_min_difficulty: source.min_difficulty().unwrap_or(0.0),
            meta_updates,
            wall_clock_s: if config.record_wall_clock {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        });
    }

    let final_test_top1 = epoch_rows.last().map(|r| r.test_top1).unwrap_or(0.0);
    let buffer_dump = match &source {
        ReplaySource::Hard(buf) => Some(buf.dump_csv()),
        _ => None,
    };
    Ok(DistillRun {
        epoch_rows,
        batch_losses,
        meta_rows,
        final_test_top1,
        student,
        align,
        meta: if is_mmkd { Some(meta) } else { None },
        buffer_dump,
        wall_clock_s: started.elapsed().as_secs_f64(),
    })
}

/// One student SGD step; returns the loss component values, the pre-step
/// logits (reused for difficulty scoring), and the logit weights (for
/// diagnostics) when the meta head produced them.
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
fn student_step(
    student: &mut Model,
    align: &mut AlignmentMap,
    meta: &MetaParams,
    batch: &Batch,
    teacher_batch: &TeacherBatch,
    hyper: &LossHyper,
    strategy: WeightingStrategy,
    lr: f64,
) -> Result<((f64, f64, f64, f64), Array2<f64>, Option<Array2<f64>>)> {
    let fixed = match strategy {
        WeightingStrategy::Ebkd => {
            let w = ebkd_weights(&teacher_batch.logits, hyper.tau)?;
            Some((w.clone(), w))
        }
        WeightingStrategy::Camkd => {
            let w = camkd_weights(&teacher_batch.logits, &batch.labels_onehot, hyper.tau)?;
            Some((w.clone(), w))
        }
        _ => None,
    };

    let mut tape = Tape::new();
    let bound = BoundMeta::bind_const(&mut tape, meta);
    let mut theta = student.params.bind(&mut tape);
    let av = tape.leaf(align.weight().clone());
    theta.push(av);

    let mode = match (strategy, &fixed) {
        (WeightingStrategy::Mmkd, _) => WeightMode::Meta(&bound),
        (_, Some((wr, wf))) => WeightMode::Fixed {
            logit: wr,
            feature: wf,
        },
        _ => WeightMode::Uniform,
    };
    let loss: BatchLoss = build_batch_loss(
        &mut tape,
        &student.arch,
        &theta[..theta.len() - 1],
        av,
        &batch.inputs,
        &batch.labels_onehot,
        teacher_batch,
        &mode,
        hyper,
    );
    let values = loss.values(&tape);

    let grads = tape.grad(loss.total, &theta);
    let grad_values: Vec<Array2<f64>> = grads.iter().map(|&g| tape.value(g).clone()).collect();
    let n_model = student.params.len();
    student.params = sgd_step(&student.params, &grad_values[..n_model], lr)?;
    *align.params_mut() = sgd_step(align.params(), &grad_values[n_model..], lr)?;

    let logits_value = tape.value(loss.student_logits).clone();
    let wr = match strategy {
        WeightingStrategy::Mmkd => Some(tape.value(loss.logit_weights).clone()),
        _ => None,
    };
    Ok((values, logits_value, wr))
}

/// Average Relative Improvement over teacher-student pairs, in percent.
///
/// `ari = mean_i (acc_ours_i - acc_base_i) / (acc_base_i - acc_student_i) * 100`.
pub fn ari(ours: &[f64], baseline: &[f64], student: &[f64]) -> Result<f64> {
    if ours.len() != baseline.len() || ours.len() != student.len() {
        return Err(MmkdError::config(format!(
            "ari input lengths differ: {} / {} / {}",
            ours.len(),
            baseline.len(),
            student.len()
        )));
    }
    if ours.is_empty() {
        return Err(MmkdError::config("ari needs at least one triple"));
    }
    let mut total = 0.0;
    for (i, ((&m, &b), &s)) in ours.iter().zip(baseline).zip(student).enumerate() {
        let denom = b - s;
        if denom == 0.0 {
            return Err(MmkdError::config(format!(
                "ari undefined for pair {i}: baseline {b} equals student {s}"
            )));
        }
        total += (m - b) / denom;
    }
    Ok(total / ours.len() as f64 * 100.0)
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

// ---- CSV / artifact emission ----------------------------------------------------

pub const METRICS_HEADER: &str =
    "epoch,L_CE,L_f,L_r,L_total,test_top1,buffer_min_difficulty,meta_updates,wall_clock_s";

pub fn metrics_csv(rows: &[EpochRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.4},{:.6},{},{:.3}\n",
            r.epoch,
            r.l_ce,
            r.l_f,
            r.l_r,
            r.l_total,
            r.test_top1,
            r.buffer_min_difficulty,
            r.meta_updates,
            r.wall_clock_s
        ));
    }
    out
}

pub fn batch_csv(batch_losses: &[(f64, f64, f64, f64)]) -> String {
    let mut out = String::from("batch,L_CE,L_f,L_r,L_total\n");
    for (i, (ce, lf, lr, total)) in batch_losses.iter().enumerate() {
        out.push_str(&format!("{i},{ce:.12},{lf:.12},{lr:.12},{total:.12}\n"));
    }
    out
}

pub fn meta_csv(rows: &[MetaRow]) -> String {
    let mut out = String::from("step,outer_ce_before,outer_ce_after,hypergrad_norm,wr_entropy_mean\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            r.step, r.outer_ce_before, r.outer_ce_after, r.hypergrad_norm, r.wr_entropy_mean
        ));
    }
    out
}

/// Write the standard artifact layout for one distillation run:
/// `student/{name}-{seed}.ckpt`, `meta/{name}-{seed}.ckpt`, metrics and
/// diagnostics CSVs (and optionally per-batch losses and the buffer dump).
pub fn write_run_artifacts(
    out_dir: &Path,
    name: &str,
    seed: u64,
    run: &DistillRun,
    config: &DistillConfig,
    dump_buffer: bool,
) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir.join("student"))?;
    checkpoint::save_model(
        &out_dir.join("student").join(format!("{name}-{seed}.ckpt")),
        &run.student,
    )?;
    checkpoint::save_align(
        &out_dir.join("student").join(format!("{name}-align-{seed}.ckpt")),
        &run.align,
    )?;
    if let Some(meta) = &run.meta {
        std::fs::create_dir_all(out_dir.join("meta"))?;
        checkpoint::save_meta(
            &out_dir.join("meta").join(format!("{name}-{seed}.ckpt")),
            meta,
        )?;
    }
    let metrics_path = out_dir.join(format!("metrics-{name}-{seed}.csv"));
    std::fs::write(&metrics_path, metrics_csv(&run.epoch_rows))?;
    std::fs::write(
        out_dir.join(format!("meta-updates-{name}-{seed}.csv")),
        meta_csv(&run.meta_rows),
    )?;
    if config.log_batches {
        std::fs::write(
            out_dir.join(format!("batches-{name}-{seed}.csv")),
            batch_csv(&run.batch_losses),
        )?;
    }
    if dump_buffer {
        if let Some(dump) = &run.buffer_dump {
            std::fs::write(out_dir.join(format!("buffer-{name}-{seed}.csv")), dump)?;
        }
    }
    Ok(metrics_path)
}

/// Save a teacher checkpoint under `teachers/{name}-{seed}.ckpt`.
pub fn write_teacher_artifact(
    out_dir: &Path,
    name: &str,
    seed: u64,
    model: &Model,
) -> Result<PathBuf> {
    let dir = out_dir.join("teachers");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join(format!("{name}-{seed}.ckpt"));
    checkpoint::save_model(&path, model)?;
    Ok(path)
}

// ---- multi-run drivers -------------------------------------------------------------

/// Per-strategy aggregate over the configured seeds.
#[derive(Debug, Clone)]
pub struct StrategyResult {
    pub strategy: WeightingStrategy,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Results of running the full strategy comparison on one task.
pub struct ComparisonReport {
    pub teacher_accs: Vec<f64>,
    pub student_baseline: StrategyResult,
    pub strategies: Vec<StrategyResult>,
    pub wall_clock_s: f64,
}

impl ComparisonReport {
    pub fn strategy(&self, s: WeightingStrategy) -> Option<&StrategyResult> {
        self.strategies.iter().find(|r| r.strategy == s)
    }

    /// Whether MMKD's mean strictly beats every baseline strategy's mean.
    pub fn mmkd_strictly_best(&self) -> Option<bool> {
        let mmkd = self.strategy(WeightingStrategy::Mmkd)?;
        Some(
            self.strategies
                .iter()
                .filter(|r| r.strategy != WeightingStrategy::Mmkd)
                .all(|r| mmkd.mean > r.mean),
        )
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str("strategy,mean_top1,std_top1,per_seed\n");
        out.push_str(&format!(
            "student,{:.4},{:.4},{}\n",
            self.student_baseline.mean,
            self.student_baseline.std,
            join_f64(&self.student_baseline.per_seed)
        ));
        for r in &self.strategies {
            out.push_str(&format!(
                "{},{:.4},{:.4},{}\n",
                r.strategy.name(),
                r.mean,
                r.std,
                join_f64(&r.per_seed)
            ));
        }
        out
    }
}

fn join_f64(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x:.4}"))
        .collect::<Vec<_>>()
        .join(";")
}

fn aggregate(strategy: WeightingStrategy, per_seed: Vec<f64>) -> StrategyResult {
    let (mean, std) = mean_std(&per_seed);
    StrategyResult {
        strategy,
        per_seed,
        mean,
        std,
    }
}

/// Train a label-only student baseline and every weighting strategy on the
/// same task, teachers, seeds, and data order.
pub fn compare_strategies(
    config: &DistillConfig,
    student_arch: &Architecture,
    teachers: &[Model],
    train: &Dataset,
    test: &Dataset,
    strategies: &[WeightingStrategy],
) -> Result<ComparisonReport> {
    let started = Instant::now();
    let teacher_accs = teachers
        .iter()
        .map(|t| evaluate(t, test))
        .collect::<Result<Vec<f64>>>()?;

    let mut baseline_accs = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let run = train_teacher(student_arch, train, test, config, seed)?;
        baseline_accs.push(run.test_top1);
    }
    let student_baseline = aggregate(WeightingStrategy::Aver, baseline_accs);

    let mut results = Vec::with_capacity(strategies.len());
    for &strategy in strategies {
        let mut cfg = config.clone();
        cfg.strategy = strategy;
        let mut per_seed = Vec::with_capacity(config.seeds.len());
        for &seed in &config.seeds {
            let run = distill(&cfg, student_arch, teachers, train, test, seed)?;
            per_seed.push(run.final_test_top1);
        }
        results.push(aggregate(strategy, per_seed));
    }

    Ok(ComparisonReport {
        teacher_accs,
        student_baseline,
        strategies: results,
        wall_clock_s: started.elapsed().as_secs_f64(),
    })
}

/// One beta sweep row.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub beta: f64,
    pub seed: u64,
    pub test_top1: f64,
}

/// Run one distillation per `(beta, seed)` pair, all else fixed.
pub fn sweep_beta(
    config: &DistillConfig,
    student_arch: &Architecture,
    teachers: &[Model],
    train: &Dataset,
    test: &Dataset,
    values: &[f64],
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(MmkdError::config("beta sweep needs at least one value"));
    }
    let mut rows = Vec::with_capacity(values.len() * config.seeds.len());
    for &beta in values {
        let mut cfg = config.clone();
        cfg.beta = beta;
        for &seed in &config.seeds {
            let run = distill(&cfg, student_arch, teachers, train, test, seed)?;
            rows.push(SweepRow {
                beta,
                seed,
                test_top1: run.final_test_top1,
            });
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("beta,seed,test_top1\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.4}\n", r.beta, r.seed, r.test_top1));
    }
    out
}

/// The four single ablations plus the holdout variant.
pub const ABLATIONS: [&str; 5] = [
    "no_hard_buffer",
    "uniform_wr",
    "uniform_wf",
    "no_feature_loss",
    "holdout",
];

/// Apply exactly one ablation flag by name.
pub fn apply_ablation(config: &DistillConfig, which: &str) -> Result<DistillConfig> {
    let mut cfg = config.clone();
    if !cfg.ablation_flags().is_empty() {
        return Err(MmkdError::config(
            "base configuration already has an ablation flag set",
        ));
    }
    match which {
        "no_hard_buffer" => cfg.no_hard_buffer = true,
        "uniform_wr" => cfg.uniform_wr = true,
        "uniform_wf" => cfg.uniform_wf = true,
        "no_feature_loss" => cfg.no_feature_loss = true,
        "holdout" => cfg.holdout = true,
        other => {
            return Err(MmkdError::config(format!(
                "unknown ablation '{other}' (expected one of {})",
                ABLATIONS.join("|")
            )))
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Run one ablation variant (MMKD strategy) over the configured seeds.
pub fn run_ablation(
    config: &DistillConfig,
    which: &str,
    student_arch: &Architecture,
    teachers: &[Model],
    train: &Dataset,
    test: &Dataset,
) -> Result<StrategyResult> {
    let mut cfg = apply_ablation(config, which)?;
    cfg.strategy = WeightingStrategy::Mmkd;
    let mut per_seed = Vec::with_capacity(cfgg_seeds_len(&cfg));
    for &seed in &cfg.seeds {
        let run = distill(&cfg, student_arch, teachers, train, test, seed)?;
        per_seed.push(run.final_test_top1);
    }
    Ok(aggregate(WeightingStrategy::Mmkd, per_seed))
}

fn cfg_seeds_len(cfg: &DistillConfig) -> usize {
    cfg.seeds.len()
}
