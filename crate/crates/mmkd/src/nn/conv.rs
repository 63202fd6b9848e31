//! Index maps that lower convolution to gather + matrix multiply.
//!
//! Images are rows of a `[b x c*h*w]` matrix in channel-major order. A
//! convolution becomes: gather into patch rows (`im2col`), multiply by the
//! `[oc x c*k*k]` kernel matrix, then gather again to restore channel-major
//! layout. Both gathers are linear with constant index maps, so gradients of
//! any order flow through them exactly.

use std::rc::Rc;

use crate::autodiff::IndexMap;

/// Output spatial dims for a given geometry.
pub fn out_dims(h: usize, w: usize, kernel: usize, stride: usize, pad: usize) -> (usize, usize) {
    assert!(stride >= 1, "stride must be at least 1");
    assert!(
        h + 2 * pad >= kernel && w + 2 * pad >= kernel,
        "kernel larger than padded input"
    );
    ((h + 2 * pad - kernel) / stride + 1, (w + 2 * pad - kernel) / stride + 1)
}

/// Patch-extraction map: `[b x c*h*w]` -> `[b*oh*ow x c*k*k]`.
///
/// Row `(bi, oy, ox)` lists the receptive field of output position
/// `(oy, ox)` for sample `bi`; padded positions read zero.
pub fn im2col_map(
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Rc<IndexMap> {
    let (oh, ow) = out_dims(h, w, kernel, stride, pad);
    let rows = b * oh * ow;
    let cols = c * kernel * kernel;
    let mut idx = Vec::with_capacity(rows * cols);
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                for ci in 0..c {
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                idx.push(-1);
                            } else {
                                let flat = ((bi * c + ci) * h + iy as usize) * w + ix as usize;
                                idx.push(flat as i64);
                            }
                        }
                    }
                }
            }
        }
    }
    IndexMap::new(idx, rows, cols)
}

/// Layout map: `[b*oh*ow x oc]` (conv output rows) -> `[b x oc*oh*ow]`.
pub fn chw_layout_map(b: usize, oc: usize, oh: usize, ow: usize) -> Rc<IndexMap> {
    let rows = b;
    let cols = oc * oh * ow;
    let mut idx = Vec::with_capacity(rows * cols);
    for bi in 0..b {
        for ci in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    let src_row = (bi * oh + oy) * ow + ox;
                    idx.push((src_row * oc + ci) as i64);
                }
            }
        }
    }
    IndexMap::new(idx, rows, cols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use ndarray::{array, Array2};

    #[test]
    fn out_dims_stride_two_halves_odd_sizes() {
        assert_eq!(out_dims(8, 8, 3, 2, 1), (4, 4));
        assert_eq!(out_dims(7, 7, 3, 2, 1), (4, 4));
        assert_eq!(out_dims(4, 4, 3, 1, 1), (4, 4));
    }

    #[test]
    fn im2col_matches_hand_convolution() {
        // One sample, one channel, 3x3 input, 2x2 kernel, stride 1, no pad.
        let x = array![[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]];
        let kernel = array![[1.0, 0.0, 0.0, -1.0]]; // [oc=1 x k*k]
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let map = im2col_map(1, 1, 3, 3, 2, 1, 0);
        let cols = tape.gather(xv, map);
        let kv = tape.constant(kernel);
        let kt = tape.transpose(kv);
        let y = tape.matmul(cols, kt);
        // Output positions row-major: (0,0),(0,1),(1,0),(1,1); each x[i] - x[i+4].
        let got: Vec<f64> = tape.value(y).iter().copied().collect();
        assert_eq!(got, vec![1.0 - 5.0, 2.0 - 6.0, 4.0 - 8.0, 5.0 - 9.0]);
    }

    #[test]
    fn padding_reads_zero() {
        let x = Array2::from_elem((1, 4), 1.0); // 2x2 single-channel image
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let map = im2col_map(1, 1, 2, 2, 3, 1, 1);
        let cols = tape.gather(xv, map);
        // Center position sees all four ones, corners of the kernel hit padding.
        let total: f64 = tape.value(cols).iter().sum();
        assert_eq!(total, 16.0); // each of the 4 ones appears in 4 patches
    }

    #[test]
    fn chw_layout_restores_channel_major_order() {
        // Two output channels over a 2x1 spatial grid, batch 1.
        // Conv rows: position-major [pos0: (c0, c1), pos1: (c0, c1)].
        let y = array![[10.0, 20.0], [11.0, 21.0]];
        let mut tape = Tape::new();
        let yv = tape.constant(y);
        let map = chw_layout_map(1, 2, 2, 1);
        let out = tape.gather(yv, map);
        assert_eq!(tape.value(out), &array![[10.0, 11.0, 20.0, 21.0]]);
    }
}
