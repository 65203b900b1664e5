//! 5x5 "same" convolution over the (time, feature) plane.
//!
//! Implemented as im2col followed by a GEMM. Frames beyond an example's valid
//! length are treated as zeros, exactly as if the example were unpadded.

use rand::Rng;

use super::linalg::gemm;
use super::tensor::Batch;
use super::{cst, shape_err, Param, Real, Result};

pub const KERNEL: usize = 5;
const PAD: usize = KERNEL / 2;

/// Weights are stored `[kt][kf][cin][cout]` (the im2col order), bias `[cout]`.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub cin: usize,
    pub cout: usize,
    input: Option<Batch<T>>,
}

/// Uniform initialization bound `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub(crate) fn uniform_values<T: Real, R: Rng + ?Sized>(n: usize, bound: f64, rng: &mut R) -> Vec<T> {
    (0..n).map(|_| cst(rng.random_range(-bound..=bound))).collect()
}

/// Unrolls every 5x5 neighbourhood of the valid frames into a row of
/// `25 * chans` values in `[kt][kf][c]` order; out-of-range taps are zero.
fn im2col<T: Real>(x: &[T], valid: usize, feat: usize, chans: usize, cols: &mut Vec<T>) {
    let k = KERNEL * KERNEL * chans;
    cols.clear();
    cols.resize(valid * feat * k, T::zero());
    for t in 0..valid {
        for f in 0..feat {
            let row = &mut cols[(t * feat + f) * k..(t * feat + f + 1) * k];
            for kt in 0..KERNEL {
                let tt = t + kt;
                if tt < PAD || tt - PAD >= valid {
                    continue;
                }
                let tt = tt - PAD;
                for kf in 0..KERNEL {
                    let ff = f + kf;
                    if ff < PAD || ff - PAD >= feat {
                        continue;
                    }
                    let ff = ff - PAD;
                    let src = (tt * feat + ff) * chans;
                    let dst = (kt * KERNEL + kf) * chans;
                    row[dst..dst + chans].copy_from_slice(&x[src..src + chans]);
                }
            }
        }
    }
}

impl<T: Real> Conv2d<T> {
    /// Kernel rotated by 180 degrees with input and output channels swapped,
    /// `[kt][kf][cout][cin]`. Correlating the output gradient with it gives
    /// the input gradient.
    fn flipped_transposed(&self) -> Vec<T> {
        let (cin, cout) = (self.cin, self.cout);
        let mut w = vec![T::zero(); self.weight.len()];
        for kt in 0..KERNEL {
            for kf in 0..KERNEL {
                let src = ((KERNEL - 1 - kt) * KERNEL + (KERNEL - 1 - kf)) * cin * cout;
                let dst = (kt * KERNEL + kf) * cout * cin;
                for ci in 0..cin {
                    for co in 0..cout {
                        w[dst + co * cin + ci] = self.weight.value[src + ci * cout + co];
                    }
                }
            }
        }
        w
    }


    pub fn new<R: Rng + ?Sized>(name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        let k = KERNEL * KERNEL;
        let bound = glorot_bound(k * cin, k * cout);
        let weight = Param::new(
            format!("{name}.weight"),
            vec![KERNEL, KERNEL, cin, cout],
            uniform_values(k * cin * cout, bound, rng),
        );
        Conv2d {
            weight,
            bias: Param::zeros(format!("{name}.bias"), vec![cout]),
            cin,
            cout,
            input: None,
        }
    }

    /// Builds a layer from explicit weights in `[kt][kf][cin][cout]` order.
    pub fn from_weights(name: &str, cin: usize, cout: usize, weight: Vec<T>, bias: Vec<T>) -> Self {
        Conv2d {
            weight: Param::new(format!("{name}.weight"), vec![KERNEL, KERNEL, cin, cout], weight),
            bias: Param::new(format!("{name}.bias"), vec![cout], bias),
            cin,
            cout,
            input: None,
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    /// Forward pass. With `keep_input` the input is retained for
    /// [`Conv2d::backward`].
    pub fn forward(&mut self, x: Batch<T>, keep_input: bool) -> Result<Batch<T>> {
        if x.chan != self.cin {
            return Err(shape_err(
                "conv5x5_same",
                format!("input has {} channels, layer expects {}", x.chan, self.cin),
            ));
        }
        if x.feat == 0 || x.time == 0 {
            return Err(shape_err("conv5x5_same", "empty input"));
        }
        let feat = x.feat;
        let k = KERNEL * KERNEL * self.cin;
        let mut y = Batch::zeros(x.time, feat, self.cout, x.mask.clone());
        let mut cols = Vec::new();
        for b in 0..x.batch {
            let valid = x.valid(b);
            im2col(x.valid_slice(b), valid, feat, self.cin, &mut cols);
            let rows = valid * feat;
            let out = y.valid_slice_mut(b);
            for r in 0..rows {
                out[r * self.cout..(r + 1) * self.cout].copy_from_slice(&self.bias.value);
            }
            gemm(false, false, rows, self.cout, k, T::one(), &cols, &self.weight.value, T::one(), out);
        }
        self.input = if keep_input { Some(x) } else { None };
        Ok(y)
    }

    /// Accumulates weight/bias gradients and returns the input gradient when
    /// `need_input_grad` is set.
    pub fn backward(&mut self, dy: &Batch<T>, need_input_grad: bool) -> Option<Batch<T>> {
        let x = self.input.take().expect("conv backward without a training forward pass");
        let feat = x.feat;
        let k = KERNEL * KERNEL * self.cin;
        let mut dx = if need_input_grad { Some(x.same_layout()) } else { None };
        let w_flip = if need_input_grad { self.flipped_transposed() } else { Vec::new() };
        let k_out = KERNEL * KERNEL * self.cout;
        let mut cols = Vec::new();
        for b in 0..x.batch {
            let valid = x.valid(b);
            let rows = valid * feat;
            let g = dy.valid_slice(b);
            im2col(x.valid_slice(b), valid, feat, self.cin, &mut cols);
            gemm(true, false, k, self.cout, rows, T::one(), &cols, g, T::one(), &mut self.weight.grad);
            for r in 0..rows {
                for (db, &gv) in self.bias.grad.iter_mut().zip(&g[r * self.cout..(r + 1) * self.cout]) {
                    *db += gv;
                }
            }
            if let Some(dx) = dx.as_mut() {
                im2col(g, valid, feat, self.cout, &mut cols);
                gemm(false, false, rows, self.cin, k_out, T::one(), &cols, &w_flip, T::zero(), dx.valid_slice_mut(b));
            }
        }
        dx
    }
}
