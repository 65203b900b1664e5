use rand::Rng;

use super::tensor::Batch;
use super::{cst, Mode, Real};

/// Inverted dropout: in training, each entry is zeroed with probability `p`
/// and survivors are scaled by `1 / (1 - p)`. Inference is the identity.
#[derive(Debug, Clone)]
pub struct Dropout<T> {
    pub p: f64,
    mask: Option<Vec<T>>,
}

impl<T: Real> Dropout<T> {
    pub fn new(p: f64) -> Self {
        assert!((0.0..1.0).contains(&p), "dropout probability must lie in [0, 1)");
        Dropout { p, mask: None }
    }

    pub fn forward<R: Rng + ?Sized>(&mut self, mut x: Batch<T>, mode: Mode, rng: &mut R) -> Batch<T> {
        if mode == Mode::Infer || self.p == 0.0 {
            self.mask = None;
            return x;
        }
        let scale = cst::<T>(1.0 / (1.0 - self.p));
        let mask: Vec<T> = (0..x.data.len())
            .map(|_| if rng.random::<f64>() < self.p { T::zero() } else { scale })
            .collect();
        for (v, &m) in x.data.iter_mut().zip(&mask) {
            *v *= m;
        }
        self.mask = Some(mask);
        x
    }

    pub fn backward(&mut self, mut dy: Batch<T>) -> Batch<T> {
        if let Some(mask) = self.mask.take() {
            for (g, &m) in dy.data.iter_mut().zip(&mask) {
                *g *= m;
            }
        }
        dy
    }
}
