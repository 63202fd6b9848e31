//! Differentiable models: a plain MLP and a small strided-conv CNN, both
//! exposing logits and penultimate features from the same forward pass.
//!
//! Parameters live in a [`ParamSet`] (ordered, named `f64` matrices) so that
//! models, the feature alignment map, and the meta-weight network all share
//! one checkpoint/optimizer surface. Training binds a `ParamSet` onto a
//! [`Tape`](crate::autodiff::Tape) as leaves; evaluation uses a scratch tape.

mod align;
mod conv;

pub use align::{align_on_tape, AlignmentMap};
pub use conv::{chw_layout_map, im2col_map};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{MmkdError, Result};

/// Logits and penultimate features from one forward pass.
#[derive(Debug, Clone)]
pub struct BatchOutput {
    /// `[b x C]` pre-softmax class scores.
    pub logits: Array2<f64>,
    /// `[b x d]` penultimate-layer activations (spatial maps flattened).
    pub features: Array2<f64>,
}

/// Ordered collection of named parameter matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Array2<f64>)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.entries.push((name.into(), value));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, a)| a.len()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn values(&self) -> impl Iterator<Item = &Array2<f64>> {
        self.entries.iter().map(|(_, a)| a)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Array2<f64>> {
        self.entries.iter_mut().map(|(_, a)| a)
    }

    pub fn entries(&self) -> &[(String, Array2<f64>)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
    }

    /// Flattened row-major view of all parameters, in entry order.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.scalar_count());
        for (_, a) in &self.entries {
            out.extend(a.iter());
        }
        out
    }

    /// Overwrite all parameters from a flat slice (shapes must match).
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.scalar_count() {
            return Err(MmkdError::config(format!(
                "flat parameter length {} does not match expected {}",
                flat.len(),
                self.scalar_count()
            )));
        }
        let mut offset = 0;
        for (_, a) in &mut self.entries {
            let n = a.len();
            for (dst, src) in a.iter_mut().zip(&flat[offset..offset + n]) {
                *dst = *src;
            }
            offset += n;
        }
        Ok(())
    }

    /// Bind every entry as a trainable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, a)| tape.leaf(a.clone()))
            .collect()
    }

    /// Bind every entry as a constant on `tape` (frozen evaluation).
    pub fn bind_const(&self, tape: &mut Tape) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, a)| tape.constant(a.clone()))
            .collect()
    }

    /// Maximum absolute difference across all entries; panics on layout mismatch.
    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        assert_eq!(self.len(), other.len(), "param set layout mismatch");
        let mut worst = 0.0f64;
        for ((_, a), (_, b)) in self.entries.iter().zip(&other.entries) {
            assert_eq!(a.dim(), b.dim(), "param shape mismatch");
            for (x, y) in a.iter().zip(b.iter()) {
                worst = worst.max((x - y).abs());
            }
        }
        worst
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// One convolution block: 3x3-style kernel, optional stride for downsampling.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Architecture descriptor; fully determines parameter shapes.
#[derive(Debug, Clone, PartialEq)]
pub enum Architecture {
    /// Dense network `sizes[0] -> ... -> sizes.last()`, ReLU between layers.
    /// Penultimate features are the last hidden activation (the input itself
    /// for a single-layer linear model).
    Mlp { sizes: Vec<usize> },
    /// Strided-conv stack over `channels x height x width` inputs followed by
    /// a linear classifier. Features are the flattened last block output in
    /// channel-major `[b x c*h*w]` layout.
    Cnn {
        in_channels: usize,
        height: usize,
        width: usize,
        blocks: Vec<ConvBlock>,
        classes: usize,
    },
}

impl Architecture {
    /// Standard teacher-sized MLP used on the synthetic task.
    pub fn mlp_teacher(n_in: usize, classes: usize) -> Self {
        Architecture::Mlp {
            sizes: vec![n_in, 256, 128, classes],
        }
    }

    /// Smaller student MLP for the synthetic task.
    pub fn mlp_student(n_in: usize, classes: usize) -> Self {
        Architecture::Mlp {
            sizes: vec![n_in, 64, 32, classes],
        }
    }

    /// Four-block CNN for image inputs; strides halve the spatial dims three times.
    pub fn cnn_small(in_channels: usize, height: usize, width: usize, classes: usize) -> Self {
        let block = |out_channels, stride| ConvBlock {
            out_channels,
            kernel: 3,
            stride,
            pad: 1,
        };
        Architecture::Cnn {
            in_channels,
            height,
            width,
            blocks: vec![block(8, 1), block(16, 2), block(32, 2), block(32, 2)],
            classes,
        }
    }

    /// Thinner four-block CNN (student-sized).
    pub fn cnn_tiny(in_channels: usize, height: usize, width: usize, classes: usize) -> Self {
        let block = |out_channels, stride| ConvBlock {
            out_channels,
            kernel: 3,
            stride,
            pad: 1,
        };
        Architecture::Cnn {
            in_channels,
            height,
            width,
            blocks: vec![block(4, 1), block(8, 2), block(16, 2), block(16, 2)],
            classes,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Architecture::Mlp { sizes } => sizes[0],
            Architecture::Cnn {
                in_channels,
                height,
                width,
                ..
            } => in_channels * height * width,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Architecture::Mlp { sizes } => *sizes.last().unwrap(),
            Architecture::Cnn { classes, .. } => *classes,
        }
    }

    /// Dimension of the penultimate feature block.
    pub fn feature_dim(&self) -> usize {
        match self {
            Architecture::Mlp { sizes } => {
                if sizes.len() >= 3 {
                    sizes[sizes.len() - 2]
                } else {
                    sizes[0]
                }
            }
            Architecture::Cnn {
                in_channels,
                height,
                width,
                blocks,
                ..
            } => {
                let (mut c, mut h, mut w) = (*in_channels, *height, *width);
                for b in blocks {
                    let (oh, ow) = conv::out_dims(h, w, b.kernel, b.stride, b.pad);
                    c = b.out_channels;
                    h = oh;
                    w = ow;
                }
                c * h * w
            }
        }
    }

    fn init_params(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        match self {
            Architecture::Mlp { sizes } => {
                assert!(sizes.len() >= 2, "MLP needs at least input and output sizes");
                for i in 0..sizes.len() - 1 {
                    let (fan_in, fan_out) = (sizes[i], sizes[i + 1]);
                    params.push(
                        format!("layer{i}.weight"),
                        fan_in_normal(&mut rng, fan_out, fan_in),
                    );
                    params.push(format!("layer{i}.bias"), Array2::zeros((1, fan_out)));
                }
            }
            Architecture::Cnn {
                in_channels,
                blocks,
                classes,
                ..
            } => {
                let mut ci = *in_channels;
                for (i, b) in blocks.iter().enumerate() {
                    let fan_in = ci * b.kernel * b.kernel;
                    params.push(
                        format!("block{i}.weight"),
                        fan_in_normal(&mut rng, b.out_channels, fan_in),
                    );
                    params.push(format!("block{i}.bias"), Array2::zeros((1, b.out_channels)));
                    ci = b.out_channels;
                }
                let d = self.feature_dim();
                params.push(
                    "classifier.weight".to_string(),
                    fan_in_normal(&mut rng, *classes, d),
                );
                params.push("classifier.bias".to_string(), Array2::zeros((1, *classes)));
            }
        }
        params
    }
}

fn fan_in_normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let dist = Normal::new(0.0, 1.0 / (cols as f64).sqrt()).unwrap();
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

/// A model: architecture descriptor plus its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: Architecture,
    pub params: ParamSet,
}

impl Model {
    pub fn new(arch: Architecture, seed: u64) -> Self {
        let params = arch.init_params(seed);
        Model { arch, params }
    }

    pub fn from_parts(arch: Architecture, params: ParamSet) -> Self {
        Model { arch, params }
    }

    /// Evaluation-mode forward pass; deterministic in parameters and inputs.
    pub fn forward(&self, inputs: &Array2<f64>) -> Result<BatchOutput> {
        let (b, n_in) = inputs.dim();
        if b == 0 {
            return Err(MmkdError::config("forward on an empty batch"));
        }
        if n_in != self.arch.input_dim() {
            return Err(MmkdError::config(format!(
                "input width {} does not match model input dim {}",
                n_in,
                self.arch.input_dim()
            )));
        }
        let mut tape = Tape::new();
        let x = tape.constant(inputs.clone());
        let vars = self.params.bind_const(&mut tape);
        let (logits, features) = forward_on_tape(&mut tape, &self.arch, &vars, x);
        Ok(BatchOutput {
            logits: tape.value(logits).clone(),
            features: tape.value(features).clone(),
        })
    }
}

/// Forward pass with parameters already bound on a tape.
///
/// Returns `(logits, features)`. The caller controls whether `vars` are
/// trainable leaves or constants.
pub fn forward_on_tape(
    tape: &mut Tape,
    arch: &Architecture,
    vars: &[Var],
    x: Var,
) -> (Var, Var) {
    match arch {
        Architecture::Mlp { sizes } => {
            let layers = sizes.len() - 1;
            let mut h = x;
            let mut features = x;
            for i in 0..layers {
                let w = vars[2 * i];
                let b = vars[2 * i + 1];
                let wt = tape.transpose(w);
                h = tape.matmul(h, wt);
                h = tape.add_row(h, b);
                if i + 1 < layers {
                    h = tape.relu(h);
                    features = h;
                }
            }
            (h, features)
        }
        Architecture::Cnn {
            in_channels,
            height,
            width,
            blocks,
            ..
        } => {
            let (batch, _) = tape.dim(x);
            let (mut c, mut h, mut w) = (*in_channels, *height, *width);
            let mut cur = x;
            for (i, blk) in blocks.iter().enumerate() {
                let cols_map = im2col_map(batch, c, h, w, blk.kernel, blk.stride, blk.pad);
                let (oh, ow) = conv::out_dims(h, w, blk.kernel, blk.stride, blk.pad);
                let cols = tape.gather(cur, cols_map);
                let wt = tape.transpose(vars[2 * i]);
                let y = tape.matmul(cols, wt);
                let y = tape.add_row(y, vars[2 * i + 1]);
                let layout = chw_layout_map(batch, blk.out_channels, oh, ow);
                let y = tape.gather(y, layout);
                cur = tape.relu(y);
                c = blk.out_channels;
                h = oh;
                w = ow;
            }
            let features = cur;
            let wt = tape.transpose(vars[2 * blocks.len()]);
            let logits = tape.matmul(features, wt);
            let logits = tape.add_row(logits, vars[2 * blocks.len() + 1]);
            (logits, features)
        }
    }
}

/// Deep-copy the student and its alignment map for an inner loop.
///
/// The copies share nothing with the originals; optimizer state (if any)
/// starts fresh because none is carried on the model itself.
pub fn clone_student(student: &Model, align: &AlignmentMap) -> (Model, AlignmentMap) {
    (student.clone(), align.clone())
}

/// One plain SGD step: `theta' = theta - lr * g`, elementwise.
///
/// Pure function of its inputs; no momentum or other hidden state, which
/// keeps the recorded inner-loop dynamics exactly reconstructible.
pub fn sgd_step(params: &ParamSet, grads: &[Array2<f64>], lr: f64) -> Result<ParamSet> {
    assert!(lr.is_finite() && lr >= 0.0, "learning rate must be nonnegative");
    if grads.len() != params.len() {
        return Err(MmkdError::config(format!(
            "gradient count {} does not match parameter count {}",
            grads.len(),
            params.len()
        )));
    }
    let mut out = params.clone();
    for (i, ((name, value), grad)) in out.entries.iter_mut().zip(grads).enumerate() {
        if value.dim() != grad.dim() {
            return Err(MmkdError::config(format!(
                "gradient {i} shape {:?} does not match parameter '{name}' shape {:?}",
                grad.dim(),
                value.dim()
            )));
        }
        if let Some(bad) = grad.iter().find(|x| !x.is_finite()) {
            return Err(MmkdError::training(format!(
                "non-finite gradient entry {bad} for parameter '{name}'"
            )));
        }
        value.zip_mut_with(grad, |p, g| *p -= lr * g);
    }
    Ok(out)
}
