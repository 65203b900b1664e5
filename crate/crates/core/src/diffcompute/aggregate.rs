use super::tensor::Batch;
use super::{cst, Real};

/// Mean over the valid frames of each example. The feature and channel axes
/// are flattened (`f * C + c`), so the output is one vector per example.
#[derive(Debug, Clone, Default)]
pub struct TemporalMean {
    input_layout: Option<Batch<()>>,
}

impl TemporalMean {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<T: Real>(&mut self, x: &Batch<T>, keep_layout: bool) -> Batch<T> {
        let dim = x.frame_len();
        let mut out = vec![T::zero(); x.batch * dim];
        for b in 0..x.batch {
            let v = x.valid(b);
            let row = &mut out[b * dim..(b + 1) * dim];
            for frame in x.valid_slice(b).chunks_exact(dim) {
                for (o, &val) in row.iter_mut().zip(frame) {
                    *o += val;
                }
            }
            let inv = cst::<T>(1.0 / v as f64);
            row.iter_mut().for_each(|o| *o *= inv);
        }
        if keep_layout {
            self.input_layout = Some(Batch {
                data: Vec::new(),
                batch: x.batch,
                time: x.time,
                feat: x.feat,
                chan: x.chan,
                mask: x.mask.clone(),
            });
        }
        Batch::from_rows(x.batch, dim, out).expect("consistent row layout")
    }

    pub fn backward<T: Real>(&mut self, dy: &Batch<T>) -> Batch<T> {
        let layout = self.input_layout.take().expect("mean backward without a training forward pass");
        let mut dx = Batch::zeros(layout.time, layout.feat, layout.chan, layout.mask);
        let dim = dx.frame_len();
        for b in 0..dx.batch {
            let inv = cst::<T>(1.0 / dx.valid(b) as f64);
            let g = &dy.data[b * dim..(b + 1) * dim];
            for frame in dx.valid_slice_mut(b).chunks_exact_mut(dim) {
                for (o, &gv) in frame.iter_mut().zip(g) {
                    *o = gv * inv;
                }
            }
        }
        dx
    }
}
