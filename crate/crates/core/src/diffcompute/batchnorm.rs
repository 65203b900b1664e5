//! Per-channel batch normalization over (example, valid frame, feature).

use super::tensor::Batch;
use super::{cst, shape_err, ComputeError, Mode, Param, Real, Result};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the previous running statistic in the exponential average.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone)]
struct Cache<T> {
    xhat: Batch<T>,
    inv_std: Vec<T>,
    count: usize,
}

#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub channels: usize,
    cache: Option<Cache<T>>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: Param::new(format!("{name}.gamma"), vec![channels], vec![T::one(); channels]),
            beta: Param::zeros(format!("{name}.beta"), vec![channels]),
            running_mean: Param::buffer(format!("{name}.running_mean"), vec![channels], vec![T::zero(); channels]),
            running_var: Param::buffer(format!("{name}.running_var"), vec![channels], vec![T::one(); channels]),
            channels,
            cache: None,
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.gamma, &mut self.beta, &mut self.running_mean, &mut self.running_var]
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.gamma, &self.beta, &self.running_mean, &self.running_var]
    }

    /// Train mode normalizes with batch statistics (biased variance) and
    /// updates the running statistics; infer mode uses the running
    /// statistics and leaves them untouched.
    pub fn forward(&mut self, x: Batch<T>, mode: Mode) -> Result<Batch<T>> {
        let c = self.channels;
        if x.chan != c {
            return Err(shape_err(
                "batchnorm",
                format!("input has {} channels, layer expects {c}", x.chan),
            ));
        }
        let eps = cst::<T>(BN_EPS);
        let mut x = x;
        for b in 0..x.batch {
            let v = x.valid(b) * x.frame_len();
            x.example_mut(b)[v..].iter_mut().for_each(|p| *p = T::zero());
        }
        match mode {
            Mode::Infer => {
                let mut y = x;
                let scale: Vec<T> = (0..c)
                    .map(|j| self.gamma.value[j] / (self.running_var.value[j] + eps).sqrt())
                    .collect();
                for b in 0..y.batch {
                    for row in y.valid_slice_mut(b).chunks_exact_mut(c) {
                        for j in 0..c {
                            row[j] = (row[j] - self.running_mean.value[j]) * scale[j] + self.beta.value[j];
                        }
                    }
                }
                self.cache = None;
                Ok(y)
            }
            Mode::Train => {
                let count = x.valid_positions();
                if count == 0 {
                    return Err(ComputeError::NoValidElements);
                }
                let n = cst::<T>(count as f64);
                let mut mean = vec![T::zero(); c];
                for b in 0..x.batch {
                    for row in x.valid_slice(b).chunks_exact(c) {
                        for j in 0..c {
                            mean[j] += row[j];
                        }
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n);
                let mut var = vec![T::zero(); c];
                for b in 0..x.batch {
                    for row in x.valid_slice(b).chunks_exact(c) {
                        for j in 0..c {
                            let d = row[j] - mean[j];
                            var[j] += d * d;
                        }
                    }
                }
                var.iter_mut().for_each(|v| *v /= n);
                let inv_std: Vec<T> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();

                let mut xhat = x;
                for b in 0..xhat.batch {
                    for row in xhat.valid_slice_mut(b).chunks_exact_mut(c) {
                        for j in 0..c {
                            row[j] = (row[j] - mean[j]) * inv_std[j];
                        }
                    }
                }
                let mut y = xhat.clone();
                for b in 0..y.batch {
                    for row in y.valid_slice_mut(b).chunks_exact_mut(c) {
                        for j in 0..c {
                            row[j] = row[j] * self.gamma.value[j] + self.beta.value[j];
                        }
                    }
                }

                let m = cst::<T>(BN_MOMENTUM);
                let one_m = T::one() - m;
                for j in 0..c {
                    self.running_mean.value[j] = m * self.running_mean.value[j] + one_m * mean[j];
                    self.running_var.value[j] = m * self.running_var.value[j] + one_m * var[j];
                }
                self.cache = Some(Cache { xhat, inv_std, count });
                Ok(y)
            }
        }
    }

    pub fn backward(&mut self, dy: &Batch<T>) -> Batch<T> {
        let Cache { xhat, inv_std, count } = self
            .cache
            .take()
            .expect("batchnorm backward without a training forward pass");
        let c = self.channels;
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xhat = vec![T::zero(); c];
        for b in 0..dy.batch {
            for (g, xh) in dy.valid_slice(b).chunks_exact(c).zip(xhat.valid_slice(b).chunks_exact(c)) {
                for j in 0..c {
                    sum_dy[j] += g[j];
                    sum_dy_xhat[j] += g[j] * xh[j];
                }
            }
        }
        for j in 0..c {
            self.gamma.grad[j] += sum_dy_xhat[j];
            self.beta.grad[j] += sum_dy[j];
        }
        let n = cst::<T>(count as f64);
        let mut dx = dy.same_layout();
        for b in 0..dy.batch {
            let g = dy.valid_slice(b);
            let xh = xhat.valid_slice(b);
            let out = dx.valid_slice_mut(b);
            for ((o, g), xh) in out.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(xh.chunks_exact(c)) {
                for j in 0..c {
                    let k = self.gamma.value[j] * inv_std[j] / n;
                    o[j] = k * (n * g[j] - sum_dy[j] - xh[j] * sum_dy_xhat[j]);
                }
            }
        }
        dx
    }
}
