use rand::Rng;

use super::conv::{glorot_bound, uniform_values};
use super::linalg::gemm;
use super::tensor::Batch;
use super::{shape_err, Param, Real, Result};

/// Affine map `y = x W + b` on a batch of vectors; `W` is stored
/// `[inputs][outputs]`.
#[derive(Debug, Clone)]
pub struct Dense<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub inputs: usize,
    pub outputs: usize,
    input: Option<Batch<T>>,
}

impl<T: Real> Dense<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = glorot_bound(inputs, outputs);
        Dense {
            weight: Param::new(
                format!("{name}.weight"),
                vec![inputs, outputs],
                uniform_values(inputs * outputs, bound, rng),
            ),
            bias: Param::zeros(format!("{name}.bias"), vec![outputs]),
            inputs,
            outputs,
            input: None,
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    pub fn forward(&mut self, x: Batch<T>, keep_input: bool) -> Result<Batch<T>> {
        if x.time != 1 || x.feat * x.chan != self.inputs {
            return Err(shape_err(
                "dense",
                format!("expected vectors of length {}, got {:?}", self.inputs, x.shape()),
            ));
        }
        let rows = x.batch;
        let mut out = Vec::with_capacity(rows * self.outputs);
        for _ in 0..rows {
            out.extend_from_slice(&self.bias.value);
        }
        gemm(false, false, rows, self.outputs, self.inputs, T::one(), &x.data, &self.weight.value, T::one(), &mut out);
        self.input = if keep_input { Some(x) } else { None };
        Batch::from_rows(rows, self.outputs, out)
    }

    pub fn backward(&mut self, dy: &Batch<T>) -> Batch<T> {
        let x = self.input.take().expect("dense backward without a training forward pass");
        let rows = x.batch;
        gemm(true, false, self.inputs, self.outputs, rows, T::one(), &x.data, &dy.data, T::one(), &mut self.weight.grad);
        for row in dy.data.chunks_exact(self.outputs) {
            for (g, &v) in self.bias.grad.iter_mut().zip(row) {
                *g += v;
            }
        }
        let mut dx = x.same_layout();
        gemm(false, true, rows, self.inputs, self.outputs, T::one(), &dy.data, &self.weight.value, T::zero(), &mut dx.data);
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_map() {
        let mut rng = rand::rng();
        let mut d = Dense::<f64>::new("d", 2, 3, &mut rng);
        d.weight.value = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        d.bias.value = vec![0.5, -0.5, 0.0];
        let y = d.forward(Batch::from_rows(1, 2, vec![1.0, -1.0]).unwrap(), false).unwrap();
        assert_eq!(y.data, vec![-2.5, -3.5, -3.0]);
    }
}
