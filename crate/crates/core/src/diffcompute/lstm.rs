//! Stacked bidirectional LSTM returning the last valid output.
//!
//! Gate pre-activations are laid out `[i | f | g | o]`, each block `hidden`
//! wide:
//!
//! ```text
//! z_t = x_t W + h_{t-1} U + b
//! i, f, o = sigmoid(z_i), sigmoid(z_f), sigmoid(z_o);  g = tanh(z_g)
//! c_t = f * c_{t-1} + i * g
//! h_t = o * tanh(c_t)
//! ```
//!
//! Each layer runs one direction forward in time and one backward over the
//! valid frames only; their hidden states are concatenated per frame and fed
//! to the next layer. The stack output is the forward state at the last
//! valid frame joined with the backward state at frame 0.

use rand::Rng;

use super::conv::{glorot_bound, uniform_values};
use super::dropout::Dropout;
use super::linalg::gemm;
use super::tensor::Batch;
use super::{ComputeError, Mode, Param, Real, Result};

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Activations of one sequence, all indexed by original time.
#[derive(Debug, Clone)]
struct SeqCache<T> {
    x: Vec<T>,
    /// Activated gates, `v x 4H`.
    gates: Vec<T>,
    c: Vec<T>,
    tanh_c: Vec<T>,
    h: Vec<T>,
}

/// One LSTM direction. `W` is `[input][4H]`, `U` is `[H][4H]`.
#[derive(Debug, Clone)]
pub struct LstmDirection<T> {
    pub w: Param<T>,
    pub u: Param<T>,
    pub b: Param<T>,
    pub input: usize,
    pub hidden: usize,
    pub reverse: bool,
    cache: Option<Vec<SeqCache<T>>>,
}

impl<T: Real> LstmDirection<T> {
    /// Glorot-uniform weights, zero biases except the forget gate at 1.
    pub fn new<R: Rng + ?Sized>(name: &str, input: usize, hidden: usize, reverse: bool, rng: &mut R) -> Self {
        let g = 4 * hidden;
        let mut bias = vec![T::zero(); g];
        bias[hidden..2 * hidden].iter_mut().for_each(|v| *v = T::one());
        LstmDirection {
            w: Param::new(format!("{name}.w"), vec![input, g], uniform_values(input * g, glorot_bound(input, g), rng)),
            u: Param::new(format!("{name}.u"), vec![hidden, g], uniform_values(hidden * g, glorot_bound(hidden, g), rng)),
            b: Param::new(format!("{name}.b"), vec![g], bias),
            input,
            hidden,
            reverse,
            cache: None,
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.w, &mut self.u, &mut self.b]
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.w, &self.u, &self.b]
    }

    fn time_at(&self, step: usize, v: usize) -> usize {
        if self.reverse {
            v - 1 - step
        } else {
            step
        }
    }

    fn run(&self, x: &[T], v: usize) -> SeqCache<T> {
        let (d, h, g) = (self.input, self.hidden, 4 * self.hidden);
        let mut z = Vec::with_capacity(v * g);
        for _ in 0..v {
            z.extend_from_slice(&self.b.value);
        }
        gemm(false, false, v, g, d, T::one(), x, &self.w.value, T::one(), &mut z);

        let mut gates = vec![T::zero(); v * g];
        let mut c = vec![T::zero(); v * h];
        let mut tanh_c = vec![T::zero(); v * h];
        let mut hs = vec![T::zero(); v * h];
        let mut prev: Option<usize> = None;
        for s in 0..v {
            let t = self.time_at(s, v);
            let zt = &mut z[t * g..(t + 1) * g];
            if let Some(p) = prev {
                gemm(false, false, 1, g, h, T::one(), &hs[p * h..(p + 1) * h], &self.u.value, T::one(), zt);
            }
            for j in 0..h {
                let i_g = sigmoid(zt[j]);
                let f_g = sigmoid(zt[h + j]);
                let g_g = zt[2 * h + j].tanh();
                let o_g = sigmoid(zt[3 * h + j]);
                let c_prev = prev.map_or(T::zero(), |p| c[p * h + j]);
                let ct = f_g * c_prev + i_g * g_g;
                let tc = ct.tanh();
                gates[t * g + j] = i_g;
                gates[t * g + h + j] = f_g;
                gates[t * g + 2 * h + j] = g_g;
                gates[t * g + 3 * h + j] = o_g;
                c[t * h + j] = ct;
                tanh_c[t * h + j] = tc;
                hs[t * h + j] = o_g * tc;
            }
            prev = Some(t);
        }
        SeqCache {
            x: x.to_vec(),
            gates,
            c,
            tanh_c,
            h: hs,
        }
    }

    /// Hidden-state sequence `[B, T, 1, H]` for an input `[B, T, *, D]`.
    pub fn forward(&mut self, x: &Batch<T>, keep_cache: bool) -> Result<Batch<T>> {
        if x.frame_len() != self.input {
            return Err(super::shape_err(
                "lstm",
                format!("frames have {} features, layer expects {}", x.frame_len(), self.input),
            ));
        }
        let mut out = Batch::zeros(x.time, 1, self.hidden, x.mask.clone());
        let mut caches = Vec::with_capacity(x.batch);
        for b in 0..x.batch {
            let cache = self.run(x.valid_slice(b), x.valid(b));
            out.valid_slice_mut(b).copy_from_slice(&cache.h);
            if keep_cache {
                caches.push(cache);
            }
        }
        self.cache = if keep_cache { Some(caches) } else { None };
        Ok(out)
    }

    /// Backpropagation through time. `dh` holds the loss gradient with
    /// respect to every hidden state; returns the input gradient.
    pub fn backward(&mut self, dh: &Batch<T>) -> Batch<T> {
        let caches = self.cache.take().expect("lstm backward without a training forward pass");
        let (d, h, g) = (self.input, self.hidden, 4 * self.hidden);
        let mut dx = Batch::zeros(dh.time, 1, d, dh.mask.clone());
        for (b, cache) in caches.iter().enumerate() {
            let v = dh.valid(b);
            let dh_ext = dh.valid_slice(b);
            let mut dz = vec![T::zero(); v * g];
            let mut dh_next = vec![T::zero(); h];
            let mut dc_next = vec![T::zero(); h];
            for s in (0..v).rev() {
                let t = self.time_at(s, v);
                let prev = if s > 0 { Some(self.time_at(s - 1, v)) } else { None };
                let gt = &cache.gates[t * g..(t + 1) * g];
                let dzt = &mut dz[t * g..(t + 1) * g];
                for j in 0..h {
                    let dh_j = dh_ext[t * h + j] + dh_next[j];
                    let (i_g, f_g, g_g, o_g) = (gt[j], gt[h + j], gt[2 * h + j], gt[3 * h + j]);
                    let tc = cache.tanh_c[t * h + j];
                    let d_o = dh_j * tc;
                    let dc = dc_next[j] + dh_j * o_g * (T::one() - tc * tc);
                    let c_prev = prev.map_or(T::zero(), |p| cache.c[p * h + j]);
                    let d_i = dc * g_g;
                    let d_g = dc * i_g;
                    let d_f = dc * c_prev;
                    dc_next[j] = dc * f_g;
                    dzt[j] = d_i * i_g * (T::one() - i_g);
                    dzt[h + j] = d_f * f_g * (T::one() - f_g);
                    dzt[2 * h + j] = d_g * (T::one() - g_g * g_g);
                    dzt[3 * h + j] = d_o * o_g * (T::one() - o_g);
                }
                for (db, &v) in self.b.grad.iter_mut().zip(dzt.iter()) {
                    *db += v;
                }
                if let Some(p) = prev {
                    let h_prev = &cache.h[p * h..(p + 1) * h];
                    gemm(true, false, h, g, 1, T::one(), h_prev, dzt, T::one(), &mut self.u.grad);
                }
                gemm(false, true, 1, h, g, T::one(), dzt, &self.u.value, T::zero(), &mut dh_next);
            }
            gemm(true, false, d, g, v, T::one(), &cache.x, &dz, T::one(), &mut self.w.grad);
            gemm(false, true, v, d, g, T::one(), &dz, &self.w.value, T::zero(), dx.valid_slice_mut(b));
        }
        dx
    }
}

#[derive(Debug, Clone)]
pub struct BiLstmLayer<T> {
    pub forward: LstmDirection<T>,
    pub backward: LstmDirection<T>,
}

/// Stack of bidirectional layers with dropout between layers.
#[derive(Debug, Clone)]
pub struct BiLstm<T> {
    pub layers: Vec<BiLstmLayer<T>>,
    dropouts: Vec<Dropout<T>>,
    pub input: usize,
    pub hidden_per_direction: usize,
}

fn concat_directions<T: Real>(hf: &Batch<T>, hb: &Batch<T>) -> Batch<T> {
    let h = hf.chan;
    let mut out = Batch::zeros(hf.time, 1, 2 * h, hf.mask.clone());
    for b in 0..hf.batch {
        let v = hf.valid(b);
        let (f, r) = (hf.valid_slice(b), hb.valid_slice(b));
        let o = out.valid_slice_mut(b);
        for t in 0..v {
            o[t * 2 * h..t * 2 * h + h].copy_from_slice(&f[t * h..(t + 1) * h]);
            o[t * 2 * h + h..(t + 1) * 2 * h].copy_from_slice(&r[t * h..(t + 1) * h]);
        }
    }
    out
}

fn split_directions<T: Real>(d: &Batch<T>) -> (Batch<T>, Batch<T>) {
    let h = d.chan / 2;
    let mut f = Batch::zeros(d.time, 1, h, d.mask.clone());
    let mut r = Batch::zeros(d.time, 1, h, d.mask.clone());
    for b in 0..d.batch {
        let v = d.valid(b);
        let src = d.valid_slice(b);
        for t in 0..v {
            f.valid_slice_mut(b)[t * h..(t + 1) * h].copy_from_slice(&src[t * 2 * h..t * 2 * h + h]);
            r.valid_slice_mut(b)[t * h..(t + 1) * h].copy_from_slice(&src[t * 2 * h + h..(t + 1) * 2 * h]);
        }
    }
    (f, r)
}

impl<T: Real> BiLstm<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        input: usize,
        hidden_per_direction: usize,
        layers: usize,
        dropout_p: f64,
        rng: &mut R,
    ) -> Self {
        let mut stack = Vec::with_capacity(layers);
        let mut d = input;
        for l in 0..layers {
            stack.push(BiLstmLayer {
                forward: LstmDirection::new(&format!("{name}.l{l}.fwd"), d, hidden_per_direction, false, rng),
                backward: LstmDirection::new(&format!("{name}.l{l}.bwd"), d, hidden_per_direction, true, rng),
            });
            d = 2 * hidden_per_direction;
        }
        BiLstm {
            layers: stack,
            dropouts: (1..layers).map(|_| Dropout::new(dropout_p)).collect(),
            input,
            hidden_per_direction,
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden_per_direction
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                let mut p = l.forward.params_mut();
                p.extend(l.backward.params_mut());
                p
            })
            .collect()
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.layers
            .iter()
            .flat_map(|l| {
                let mut p = l.forward.params();
                p.extend(l.backward.params());
                p
            })
            .collect()
    }

    /// `[B, T, *, D]` to `[B, 1, 1, 2H]`.
    pub fn forward<R: Rng + ?Sized>(&mut self, x: Batch<T>, mode: Mode, rng: &mut R) -> Result<Batch<T>> {
        if x.time == 0 || x.batch == 0 {
            return Err(ComputeError::EmptySequence);
        }
        let keep = mode == Mode::Train;
        let n_layers = self.layers.len();
        let mut seq = x.flatten_features();
        for l in 0..n_layers {
            let hf = self.layers[l].forward.forward(&seq, keep)?;
            let hb = self.layers[l].backward.forward(&seq, keep)?;
            seq = concat_directions(&hf, &hb);
            if l + 1 < n_layers {
                seq = self.dropouts[l].forward(seq, mode, rng);
            }
        }
        let h = self.hidden_per_direction;
        let mut out = Vec::with_capacity(seq.batch * 2 * h);
        for b in 0..seq.batch {
            let v = seq.valid(b);
            let s = seq.valid_slice(b);
            out.extend_from_slice(&s[(v - 1) * 2 * h..(v - 1) * 2 * h + h]);
            out.extend_from_slice(&s[h..2 * h]);
        }
        Batch::from_rows(seq.batch, 2 * h, out)
    }

    /// Takes the gradient of the `[B, 2H]` output and returns the gradient of
    /// the flattened input sequence.
    pub fn backward(&mut self, dout: &Batch<T>, input_mask: super::BatchMask, input_time: usize) -> Batch<T> {
        let h = self.hidden_per_direction;
        let mut dseq = Batch::zeros(input_time, 1, 2 * h, input_mask);
        for b in 0..dseq.batch {
            let v = dseq.valid(b);
            let g = &dout.data[b * 2 * h..(b + 1) * 2 * h];
            let s = dseq.valid_slice_mut(b);
            s[(v - 1) * 2 * h..(v - 1) * 2 * h + h].copy_from_slice(&g[..h]);
            s[h..2 * h].copy_from_slice(&g[h..]);
        }
        for l in (0..self.layers.len()).rev() {
            let (df, db) = split_directions(&dseq);
            let mut dx = self.layers[l].forward.backward(&df);
            let dxb = self.layers[l].backward.backward(&db);
            for (a, &b) in dx.data.iter_mut().zip(&dxb.data) {
                *a += b;
            }
            dseq = if l > 0 { self.dropouts[l - 1].backward(dx) } else { dx };
        }
        dseq
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcompute::tensor::{BatchMask, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_all(lstm: &mut BiLstm<f64>) {
        for p in lstm.params_mut() {
            p.value.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut lstm = BiLstm::<f64>::new("lstm", 4, 5, 3, 0.0, &mut rng);
        zero_all(&mut lstm);
        let x = Batch::from_tensors(&[Tensor::new(6, 1, 4, (0..24).map(|i| i as f64).collect()).unwrap()]).unwrap();
        let y = lstm.forward(x, Mode::Infer, &mut rng).unwrap();
        assert_eq!(y.shape(), [1, 1, 1, 10]);
        assert!(y.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_frame_sequence() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut lstm = BiLstm::<f64>::new("lstm", 3, 4, 3, 0.0, &mut rng);
        let frame = vec![0.3, -0.7, 1.1];
        let x = Batch::from_tensors(&[Tensor::new(1, 1, 3, frame.clone()).unwrap()]).unwrap();
        let a = lstm.forward(x.clone(), Mode::Infer, &mut rng).unwrap();
        let b = lstm.forward(x, Mode::Infer, &mut rng).unwrap();
        assert_eq!(a, b);
        // With a single frame both directions see identical input, so they
        // differ only through their own weights.
        let mut twin = lstm.clone();
        for l in &mut twin.layers {
            l.backward.w.value = l.forward.w.value.clone();
            l.backward.u.value = l.forward.u.value.clone();
            l.backward.b.value = l.forward.b.value.clone();
        }
        let x = Batch::from_tensors(&[Tensor::new(1, 1, 3, frame).unwrap()]).unwrap();
        let y = twin.forward(x, Mode::Infer, &mut rng).unwrap();
        assert_eq!(y.data[..4], y.data[4..]);
    }

    #[test]
    fn output_ignores_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut lstm = BiLstm::<f64>::new("lstm", 2, 3, 2, 0.0, &mut rng);
        let data: Vec<f64> = (0..10).map(|i| (i as f64 * 0.9).sin()).collect();
        let alone = Batch::from_tensors(&[Tensor::new(5, 1, 2, data.clone()).unwrap()]).unwrap();
        let a = lstm.forward(alone, Mode::Infer, &mut rng).unwrap();
        let mut padded = Batch::zeros(9, 1, 2, BatchMask::new(vec![5], 9).unwrap());
        padded.data[..10].copy_from_slice(&data);
        padded.data[10..].iter_mut().for_each(|v| *v = 7.0);
        let b = lstm.forward(padded, Mode::Infer, &mut rng).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut lstm = BiLstm::<f64>::new("lstm", 2, 3, 1, 0.0, &mut rng);
        let x = Batch::zeros(0, 1, 2, BatchMask::full(1, 0));
        assert_eq!(lstm.forward(x, Mode::Infer, &mut rng).unwrap_err(), ComputeError::EmptySequence);
    }
}
