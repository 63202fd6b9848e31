//! Bias-free linear map from student feature space to teacher feature space.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{MmkdError, Result};
use crate::nn::ParamSet;

/// Learned `[d_t x d_s]` matrix applied as `F_s . W^T`.
///
/// Initialized to the identity when the dimensions already agree, otherwise
/// to an orthonormal projection/embedding so student features pass through
/// with their geometry intact at step zero. Trained jointly with the student.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentMap {
    params: ParamSet,
    d_s: usize,
    d_t: usize,
}

impl AlignmentMap {
    pub fn new(d_s: usize, d_t: usize, seed: u64) -> Self {
        let weight = if d_s == d_t {
            Array2::eye(d_s)
        } else {
            orthonormal_map(d_t, d_s, seed)
        };
        let mut params = ParamSet::new();
        params.push("align.weight", weight);
        AlignmentMap { params, d_s, d_t }
    }

    pub fn input_dim(&self) -> usize {
        self.d_s
    }

    pub fn output_dim(&self) -> usize {
        self.d_t
    }

    pub fn weight(&self) -> &Array2<f64> {
        self.params.get("align.weight").unwrap()
    }

    pub fn weight_mut(&mut self) -> &mut Array2<f64> {
        self.params.get_mut("align.weight").unwrap()
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn from_params(params: ParamSet) -> Result<Self> {
        let weight = params
            .get("align.weight")
            .ok_or_else(|| MmkdError::config("alignment params missing 'align.weight'"))?;
        let (d_t, d_s) = weight.dim();
        Ok(AlignmentMap { params, d_s, d_t })
    }

    /// Map `[b x d_s]` student features to `[b x d_t]`.
    pub fn apply(&self, features: &Array2<f64>) -> Result<Array2<f64>> {
        if features.ncols() != self.d_s {
            return Err(MmkdError::config(format!(
                "feature width {} does not match alignment input dim {}",
                features.ncols(),
                self.d_s
            )));
        }
        Ok(features.dot(&self.weight().t()))
    }
}

/// Tape version: `features . weight^T` with `weight` already bound.
pub fn align_on_tape(tape: &mut Tape, weight: Var, features: Var) -> Var {
    let wt = tape.transpose(weight);
    tape.matmul(features, wt)
}

/// `[rows x cols]` matrix whose shorter side is orthonormal.
fn orthonormal_map(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa11c_e5ed);
    let dist = Normal::new(0.0, 1.0).unwrap();
    let (long, short) = (rows.max(cols), rows.min(cols));
    // Gram-Schmidt over `short` vectors of length `long`.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(short);
    while basis.len() < short {
        let mut v: Vec<f64> = (0..long).map(|_| dist.sample(&mut rng)).collect();
        for u in &basis {
            let proj: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (vi, ui) in v.iter_mut().zip(u) {
                *vi -= proj * ui;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            for vi in &mut v {
                *vi /= norm;
            }
            basis.push(v);
        }
    }
    if rows >= cols {
        // Columns orthonormal: each basis vector is a column.
        Array2::from_shape_fn((rows, cols), |(r, c)| basis[c][r])
    } else {
        // Rows orthonormal.
        Array2::from_shape_fn((rows, cols), |(r, c)| basis[r][c])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identity_init_passes_features_through() {
        let align = AlignmentMap::new(4, 4, 0);
        let f = array![[1.0, -2.0, 3.5, 0.25], [0.0, 1.0, 0.0, -1.0]];
        assert_eq!(align.apply(&f).unwrap(), f);
    }

    #[test]
    fn zero_input_maps_to_zero() {
        let align = AlignmentMap::new(3, 5, 1);
        let z = Array2::zeros((2, 3));
        let out = align.apply(&z).unwrap();
        assert!(out.iter().all(|x| *x == 0.0));
        assert_eq!(out.dim(), (2, 5));
    }

    #[test]
    fn embedding_init_preserves_norms() {
        let align = AlignmentMap::new(3, 7, 2);
        let w = align.weight();
        let gram = w.t().dot(w); // should be I_3
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((gram[(i, j)] - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let align = AlignmentMap::new(3, 5, 0);
        let err = align.apply(&Array2::zeros((2, 4))).unwrap_err();
        assert!(matches!(err, MmkdError::Config(_)));
    }

    #[test]
    fn gradient_of_squared_norm_matches_finite_differences() {
        let align = AlignmentMap::new(3, 4, 5);
        let f = array![[0.3, -0.7, 1.1], [0.9, 0.2, -0.4]];

        let loss_with = |w: &Array2<f64>| -> f64 {
            let mut tape = Tape::new();
            let fv = tape.constant(f.clone());
            let wv = tape.constant(w.clone());
            let out = align_on_tape(&mut tape, wv, fv);
            let sq = tape.mul(out, out);
            let s = tape.sum_all(sq);
            tape.scalar(s)
        };

        let mut tape = Tape::new();
        let fv = tape.constant(f.clone());
        let wv = tape.leaf(align.weight().clone());
        let out = align_on_tape(&mut tape, wv, fv);
        let sq = tape.mul(out, out);
        let s = tape.sum_all(sq);
        let g = tape.grad(s, &[wv])[0];
        let analytic = tape.value(g).clone();

        let h = 1e-6;
        for r in 0..4 {
            for c in 0..3 {
                let mut plus = align.weight().clone();
                plus[(r, c)] += h;
                let mut minus = align.weight().clone();
                minus[(r, c)] -= h;
                let numeric = (loss_with(&plus) - loss_with(&minus)) / (2.0 * h);
                let got = analytic[(r, c)];
                let denom = numeric.abs().max(got.abs()).max(1e-10);
                assert!(
                    (numeric - got).abs() / denom < 1e-5,
                    "({r},{c}): fd {numeric} vs ad {got}"
                );
            }
        }
    }
}
