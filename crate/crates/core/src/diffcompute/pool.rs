//! 2x2 max pooling with ceil semantics: odd trailing rows/columns form
//! partial windows, as if padded with negative infinity.

use super::tensor::Batch;
use super::Real;

#[derive(Debug, Clone, Default)]
pub struct MaxPool2x2 {
    /// For every output element, the flat index of its maximum in the input.
    argmax: Option<Vec<usize>>,
    input_shape: Option<(usize, usize, usize, usize)>,
}

pub fn pooled_len(n: usize) -> usize {
    n.div_ceil(2)
}

impl MaxPool2x2 {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<T: Real>(&mut self, x: &Batch<T>, keep_indices: bool) -> Batch<T> {
        let (time, feat, chan) = (pooled_len(x.time), pooled_len(x.feat), x.chan);
        let mut y = Batch::zeros(time, feat, chan, x.mask.pooled());
        let mut argmax = vec![usize::MAX; y.data.len()];
        let in_len = x.example_len();
        let out_len = y.example_len();
        for b in 0..x.batch {
            let v_in = x.valid(b);
            let v_out = y.valid(b);
            let xe = x.example(b);
            for t in 0..v_out {
                for f in 0..feat {
                    for c in 0..chan {
                        let mut best = T::neg_infinity();
                        let mut best_idx = usize::MAX;
                        for tt in 2 * t..(2 * t + 2).min(v_in) {
                            for ff in 2 * f..(2 * f + 2).min(x.feat) {
                                let idx = (tt * x.feat + ff) * chan + c;
                                if xe[idx] > best || best_idx == usize::MAX {
                                    best = xe[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        let o = (t * feat + f) * chan + c;
                        y.data[b * out_len + o] = best;
                        argmax[b * out_len + o] = b * in_len + best_idx;
                    }
                }
            }
        }
        if keep_indices {
            self.argmax = Some(argmax);
            self.input_shape = Some((x.batch, x.time, x.feat, x.chan));
        }
        y
    }

    pub fn backward<T: Real>(&mut self, dy: &Batch<T>, input_mask: super::BatchMask) -> Batch<T> {
        let argmax = self.argmax.take().expect("pool backward without a training forward pass");
        let (_, time, feat, chan) = self.input_shape.take().unwrap();
        let mut dx = Batch::zeros(time, feat, chan, input_mask);
        for (g, &idx) in dy.data.iter().zip(&argmax) {
            if idx != usize::MAX {
                dx.data[idx] += *g;
            }
        }
        dx
    }
}
