use super::tensor::Batch;
use super::Real;

#[derive(Debug, Clone, Default)]
pub struct Relu {
    active: Option<Vec<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Relu { active: None }
    }

    pub fn forward<T: Real>(&mut self, mut x: Batch<T>, keep_mask: bool) -> Batch<T> {
        if keep_mask {
            self.active = Some(x.data.iter().map(|&v| v > T::zero()).collect());
        }
        for v in &mut x.data {
            if !(*v > T::zero()) {
                *v = T::zero();
            }
        }
        x
    }

    pub fn backward<T: Real>(&mut self, mut dy: Batch<T>) -> Batch<T> {
        let active = self.active.take().expect("relu backward without a training forward pass");
        for (g, &a) in dy.data.iter_mut().zip(&active) {
            if !a {
                *g = T::zero();
            }
        }
        dy
    }
}
