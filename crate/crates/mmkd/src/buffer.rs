//! Fixed-capacity store of the samples the student currently finds hardest.
//!
//! The buffer is the validation set for the outer (meta) loop. Difficulty is
//! the student's per-sample cross-entropy at the time the sample last passed
//! through a training batch; entries are keyed by dataset sample id, so a
//! sample that reappears refreshes its stored score (lazy refresh, O(b) per
//! update). Updates merge the incoming batch with the current entries and
//! keep the top-capacity by difficulty, newer entries winning ties.
//!
//! Two ablation variants share the same sampling surface: a uniform
//! reservoir over the stream, and a frozen holdout pool.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MmkdError, Result};
use crate::losses::PROB_FLOOR;
use crate::nn::Model;

/// One stored sample.
#[derive(Debug, Clone)]
pub struct BufferEntry {
    pub sample_id: u64,
    pub input: Vec<f64>,
    pub label_onehot: Vec<f64>,
    pub difficulty: f64,
    pub counter: u64,
}

/// A labelled batch drawn from a buffer.
#[derive(Debug, Clone)]
pub struct BufferBatch {
    pub inputs: Array2<f64>,
    pub labels_onehot: Array2<f64>,
}

/// Difficulty-ranked buffer (the default).
#[derive(Debug, Clone)]
pub struct HardBuffer {
    capacity: usize,
    entries: Vec<BufferEntry>,
    next_counter: u64,
}

impl HardBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "buffer capacity must be positive");
        HardBuffer {
            capacity,
            entries: Vec::new(),
            next_counter: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    pub fn min_difficulty(&self) -> Option<f64> {
        self.entries.last().map(|e| e.difficulty)
    }

    /// Merge a scored batch and keep the hardest `capacity` samples.
    ///
    /// A sample already present (same `sample_id`) gets its score refreshed
    /// in place rather than duplicated.
    pub fn update(
        &mut self,
        inputs: &Array2<f64>,
        labels_onehot: &Array2<f64>,
        sample_ids: &[u64],
        scores: &[f64],
    ) {
        assert_eq!(inputs.nrows(), scores.len(), "scores must align with batch");
        assert_eq!(inputs.nrows(), sample_ids.len(), "ids must align with batch");
        for i in 0..inputs.nrows() {
            let counter = self.next_counter;
            self.next_counter += 1;
            if let Some(e) = self
                .entries
                .iter_mut()
                .find(|e| e.sample_id == sample_ids[i])
            {
                e.difficulty = scores[i];
                e.counter = counter;
            } else {
                self.entries.push(BufferEntry {
                    sample_id: sample_ids[i],
                    input: inputs.row(i).to_vec(),
                    label_onehot: labels_onehot.row(i).to_vec(),
                    difficulty: scores[i],
                    counter,
                });
            }
        }
        // Hardest first; newer wins ties.
        self.entries.sort_by(|a, b| {
            b.difficulty
                .partial_cmp(&a.difficulty)
                .unwrap()
                .then(b.counter.cmp(&a.counter))
        });
        self.entries.truncate(self.capacity);
    }

    /// Uniform draw of `n` entries; without replacement unless `n` exceeds
    /// the buffer size. Deterministic under a fixed RNG state.
    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<BufferBatch> {
        sample_entries(&self.entries, n, rng)
    }

    /// Fixed evaluation draw for the outer objective: the whole buffer when
    /// it holds at most `limit` entries, otherwise the hardest `limit`.
    pub fn eval_entries(&self, limit: usize) -> &[BufferEntry] {
        &self.entries[..self.entries.len().min(limit)]
    }

    /// CSV dump `(sample_id, difficulty)` for diagnostics.
    pub fn dump_csv(&self) -> String {
        let mut out = String::from("sample_id,difficulty\n");
        for e in &self.entries {
            out.push_str(&format!("{},{:.6}\n", e.sample_id, e.difficulty));
        }
        out
    }
}

/// Uniform-over-the-stream replay buffer (reservoir sampling); the
/// "no hard buffer" ablation.
#[derive(Debug, Clone)]
pub struct ReservoirBuffer {
    capacity: usize,
    entries: Vec<BufferEntry>,
    seen: u64,
}

impl ReservoirBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        ReservoirBuffer {
            capacity,
            entries: Vec::new(),
            seen: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn update(
        &mut self,
        inputs: &Array2<f64>,
        labels_onehot: &Array2<f64>,
        sample_ids: &[u64],
        rng: &mut ChaCha8Rng,
    ) {
        for i in 0..inputs.nrows() {
            self.seen += 1;
            let entry = BufferEntry {
                sample_id: sample_ids[i],
                input: inputs.row(i).to_vec(),
                label_onehot: labels_onehot.row(i).to_vec(),
                difficulty: 0.0,
                counter: self.seen,
            };
            if self.entries.len() < self.capacity {
                self.entries.push(entry);
            } else {
                let j = rng.gen_range(0..self.seen);
                if (j as usize) < self.capacity {
                    self.entries[j as usize] = entry;
                }
            }
        }
    }

    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<BufferBatch> {
        sample_entries(&self.entries, n, rng)
    }

    pub fn eval_entries(&self, limit: usize) -> &[BufferEntry] {
        &self.entries[..self.entries.len().min(limit)]
    }
}

/// Frozen pool of held-out samples; the `--holdout` ablation variant.
#[derive(Debug, Clone)]
pub struct HoldoutPool {
    entries: Vec<BufferEntry>,
}

impl HoldoutPool {
    pub fn new(inputs: &Array2<f64>, labels_onehot: &Array2<f64>, sample_ids: &[u64]) -> Self {
        let entries = (0..inputs.nrows())
            .map(|i| BufferEntry {
                sample_id: sample_ids[i],
                input: inputs.row(i).to_vec(),
                label_onehot: labels_onehot.row(i).to_vec(),
                difficulty: 0.0,
                counter: i as u64,
            })
            .collect();
        HoldoutPool { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<BufferBatch> {
        sample_entries(&self.entries, n, rng)
    }

    pub fn eval_entries(&self, limit: usize) -> &[BufferEntry] {
        &self.entries[..self.entries.len().min(limit)]
    }
}

/// The meta-loop's sample source: hard buffer by default, with the two
/// ablation substitutes behind the same surface.
#[derive(Debug, Clone)]
pub enum ReplaySource {
    Hard(HardBuffer),
    Uniform(ReservoirBuffer),
    Holdout(HoldoutPool),
}

impl ReplaySource {
    pub fn len(&self) -> usize {
        match self {
            ReplaySource::Hard(b) => b.len(),
            ReplaySource::Uniform(b) => b.len(),
            ReplaySource::Holdout(b) => b.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<BufferBatch> {
        match self {
            ReplaySource::Hard(b) => b.sample(n, rng),
            ReplaySource::Uniform(b) => b.sample(n, rng),
            ReplaySource::Holdout(b) => b.sample(n, rng),
        }
    }

    pub fn eval_entries(&self, limit: usize) -> &[BufferEntry] {
        match self {
            ReplaySource::Hard(b) => b.eval_entries(limit),
            ReplaySource::Uniform(b) => b.eval_entries(limit),
            ReplaySource::Holdout(b) => b.eval_entries(limit),
        }
    }

    pub fn min_difficulty(&self) -> Option<f64> {
        match self {
            ReplaySource::Hard(b) => b.min_difficulty(),
            _ => None,
        }
    }
}

pub fn entries_to_batch(entries: &[BufferEntry]) -> BufferBatch {
    assert!(!entries.is_empty(), "cannot build a batch from no entries");
    let n_in = entries[0].input.len();
    let c = entries[0].label_onehot.len();
    let mut inputs = Array2::zeros((entries.len(), n_in));
    let mut labels = Array2::zeros((entries.len(), c));
    for (i, e) in entries.iter().enumerate() {
        for (j, v) in e.input.iter().enumerate() {
            inputs[(i, j)] = *v;
        }
        for (j, v) in e.label_onehot.iter().enumerate() {
            labels[(i, j)] = *v;
        }
    }
    BufferBatch {
        inputs,
        labels_onehot: labels,
    }
}

fn sample_entries(entries: &[BufferEntry], n: usize, rng: &mut ChaCha8Rng) -> Result<BufferBatch> {
    if entries.is_empty() {
        return Err(MmkdError::BufferNotReady);
    }
    assert!(n > 0, "sample size must be positive");
    let picked: Vec<&BufferEntry> = if n > entries.len() {
        (0..n).map(|_| &entries[rng.gen_range(0..entries.len())]).collect()
    } else {
        // Partial Fisher-Yates over an index vector: uniform without replacement.
        let mut index: Vec<usize> = (0..entries.len()).collect();
        for i in 0..n {
            let j = rng.gen_range(i..index.len());
            index.swap(i, j);
        }
        index[..n].iter().map(|&i| &entries[i]).collect()
    };
    let owned: Vec<BufferEntry> = picked.into_iter().cloned().collect();
    Ok(entries_to_batch(&owned))
}

/// Per-sample difficulty: the student's cross-entropy on each sample,
/// evaluated without gradient tracking.
pub fn score_difficulty(
    student: &Model,
    inputs: &Array2<f64>,
    labels_onehot: &Array2<f64>,
) -> Result<Vec<f64>> {
    if inputs.nrows() == 0 {
        return Err(MmkdError::config("cannot score an empty batch"));
    }
    let out = student.forward(inputs)?;
    Ok(per_sample_ce(&out.logits, labels_onehot))
}

/// Per-sample cross-entropy from logits (softmax at temperature 1).
pub fn per_sample_ce(logits: &Array2<f64>, labels_onehot: &Array2<f64>) -> Vec<f64> {
    assert_eq!(logits.dim(), labels_onehot.dim());
    let mut scores = Vec::with_capacity(logits.nrows());
    for (zrow, yrow) in logits.rows().into_iter().zip(labels_onehot.rows()) {
        let max = zrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = zrow.iter().map(|z| (z - max).exp()).sum();
        let mut ce = 0.0;
        for (z, y) in zrow.iter().zip(yrow.iter()) {
            if *y > 0.0 {
                let p = ((z - max).exp() / denom).max(PROB_FLOOR);
                ce -= y * p.ln();
            }
        }
        scores.push(ce);
    }
    scores
}
