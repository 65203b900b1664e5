//! Central finite differences for checking analytic gradients, and a suite
//! that checks every layer's backward pass on random instances.
//!
//! Each instance projects the layer output onto a fixed random direction
//! `r`, so the scalar loss is `sum(y * r)` and the upstream gradient is `r`.
//! The analytic gradients of inputs and parameters are compared with central
//! differences of that loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    weighted_cross_entropy, weighted_cross_entropy_batch, Batch, BatchMask, BatchNorm, BiLstm, Conv2d, Dense, Dropout,
    LstmDirection, MaxPool2x2, Mode, Param, Relu, TemporalMean,
};

/// Default step for `f64` checks.
pub const FD_STEP: f64 = 1e-5;

/// Numerical gradient of `f` at `x` by central differences.
pub fn central_difference<F>(mut f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let plus = f(&probe);
            probe[i] = orig - step;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|)` over whole vectors (Euclidean norms), so that
/// individual near-zero entries do not dominate. Returns 0 when both are
/// (numerically) zero.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().cloned()).max(norm(&mut numeric.iter().cloned()));
    if scale < 1e-14 {
        diff
    } else {
        diff / scale
    }
}


/// Tolerance for single layers.
pub const LAYER_TOLERANCE: f64 = 1e-4;
/// Tolerance for the stacked bidirectional LSTM.
pub const LSTM_STACK_TOLERANCE: f64 = 1e-3;

/// Worst relative error of one operation over a number of random instances.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub op: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

type Instance = fn(&mut ChaCha8Rng) -> f64;

/// The operations covered by [`run_suite`], with their tolerances.
pub const OPERATIONS: &[(&str, f64, Instance)] = &[
    ("conv5x5_same", LAYER_TOLERANCE, conv_instance),
    ("batchnorm_train", LAYER_TOLERANCE, batchnorm_instance),
    ("relu", LAYER_TOLERANCE, relu_instance),
    ("maxpool2x2_ceil", LAYER_TOLERANCE, pool_instance),
    ("dense", LAYER_TOLERANCE, dense_instance),
    ("dropout", LAYER_TOLERANCE, dropout_instance),
    ("temporal_masked_mean", LAYER_TOLERANCE, mean_instance),
    ("lstm_direction", LAYER_TOLERANCE, lstm_direction_instance),
    ("bilstm_stack_3", LSTM_STACK_TOLERANCE, bilstm_instance),
    ("weighted_cross_entropy", LAYER_TOLERANCE, cross_entropy_instance),
    ("weighted_cross_entropy_batch", LAYER_TOLERANCE, cross_entropy_batch_instance),
];

/// Runs every operation on `instances` random instances.
pub fn run_suite(instances: usize, seed: u64) -> Vec<GradReport> {
    OPERATIONS
        .iter()
        .enumerate()
        .map(|(k, &(op, tolerance, instance))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64 * 7919));
            let max_rel_error = (0..instances).map(|_| instance(&mut rng)).fold(0.0, f64::max);
            GradReport {
                op,
                instances,
                max_rel_error,
                tolerance,
            }
        })
        .collect()
}

/// Random batch with valid lengths in `1..=max_time` and padding zeroed.
pub fn random_batch<R: Rng + ?Sized>(rng: &mut R, batch: usize, max_time: usize, feat: usize, chan: usize) -> Batch<f64> {
    let lengths: Vec<usize> = (0..batch).map(|_| rng.random_range(1..=max_time)).collect();
    let time = *lengths.iter().max().unwrap();
    let mut x = Batch::zeros(time, feat, chan, BatchMask::new(lengths, time).expect("valid lengths"));
    for b in 0..batch {
        for v in x.valid_slice_mut(b) {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    x
}

fn direction<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Random upstream gradient for an output shaped like `x` with `frame_len`
/// values per frame; zero at padding, as every consumer of a layer's output
/// ignores padded frames.
fn masked_direction<R: Rng + ?Sized>(rng: &mut R, x: &Batch<f64>, frame_len: usize) -> Vec<f64> {
    let mut r = direction(rng, x.batch * x.time * frame_len);
    for b in 0..x.batch {
        let start = b * x.time * frame_len;
        r[start + x.valid(b) * frame_len..start + x.time * frame_len]
            .iter_mut()
            .for_each(|v| *v = 0.0);
    }
    r
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn with_data(x: &Batch<f64>, data: &[f64]) -> Batch<f64> {
    Batch {
        data: data.to_vec(),
        ..x.clone()
    }
}

fn randomize(p: &mut Param<f64>, rng: &mut ChaCha8Rng, scale: f64) {
    for v in &mut p.value {
        *v = rng.random_range(-scale..scale);
    }
}

/// Relative error of the input gradient and of each named parameter's
/// gradient, combined by taking the worst.
fn compare_params<L: Clone>(
    layer: &L,
    analytic: &L,
    params: fn(&mut L) -> Vec<&mut Param<f64>>,
    loss: &dyn Fn(&mut L) -> f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    let n_params = params(&mut layer.clone()).len();
    let mut probe = layer.clone();
    let mut grads_owner = analytic.clone();
    let grads: Vec<Vec<f64>> = params(&mut grads_owner).iter().map(|p| p.grad.clone()).collect();
    for k in 0..n_params {
        let start: Vec<f64> = params(&mut probe)[k].value.clone();
        let numeric = central_difference(
            |v| {
                params(&mut probe)[k].value.copy_from_slice(v);
                let mut fresh = probe.clone();
                loss(&mut fresh)
            },
            &start,
            FD_STEP,
        );
        params(&mut probe)[k].value.copy_from_slice(&start);
        worst = worst.max(relative_error(&grads[k], &numeric));
    }
    worst
}

/// Input-gradient error. Only valid positions are perturbed (padding is
/// zero by contract); the analytic gradient at padding must be zero.
fn input_error(x: &Batch<f64>, dx: &Batch<f64>, loss: &dyn Fn(&Batch<f64>) -> f64) -> f64 {
    let len = x.example_len();
    let valid: Vec<usize> = (0..x.batch)
        .flat_map(|b| (b * len..b * len + x.valid(b) * x.frame_len()).collect::<Vec<_>>())
        .collect();
    let start: Vec<f64> = valid.iter().map(|&i| x.data[i]).collect();
    let mut probe = x.clone();
    let numeric = central_difference(
        |v| {
            for (&i, &val) in valid.iter().zip(v) {
                probe.data[i] = val;
            }
            loss(&probe)
        },
        &start,
        FD_STEP,
    );
    let mut full = vec![0.0; x.data.len()];
    for (&i, g) in valid.iter().zip(numeric) {
        full[i] = g;
    }
    relative_error(&dx.data, &full)
}

fn conv_instance(rng: &mut ChaCha8Rng) -> f64 {
    let (cin, cout) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let nb = rng.random_range(1..=2);
    let nt = rng.random_range(2..=6);
    let nf = rng.random_range(2..=5);
    let x = random_batch(rng, nb, nt, nf, cin);
    let mut conv = Conv2d::<f64>::new("c", cin, cout, rng);
    randomize(&mut conv.bias, rng, 0.5);
    let r = masked_direction(rng, &x, x.feat * cout);
    let forward = |c: &mut Conv2d<f64>, x: &Batch<f64>| dot(&c.forward(x.clone(), false).unwrap().data, &r);

    let mut a = conv.clone();
    let y = a.forward(x.clone(), true).unwrap();
    let dx = a.backward(&with_data(&y, &r), true).unwrap();
    let e_in = input_error(&x, &dx, &|xx| forward(&mut conv.clone(), xx));
    let e_p = compare_params(&conv, &a, |c| c.params_mut(), &|c| forward(c, &x));
    e_in.max(e_p)
}

fn batchnorm_instance(rng: &mut ChaCha8Rng) -> f64 {
    let c = rng.random_range(1..=3);
    let nb = rng.random_range(1..=3);
    let nt = rng.random_range(2..=5);
    let nf = rng.random_range(1..=3);
    let x = random_batch(rng, nb, nt, nf, c);
    let mut bn = BatchNorm::<f64>::new("bn", c);
    randomize(&mut bn.gamma, rng, 2.0);
    randomize(&mut bn.beta, rng, 1.0);
    let r = masked_direction(rng, &x, x.frame_len());
    let forward = |l: &mut BatchNorm<f64>, x: &Batch<f64>| dot(&l.forward(x.clone(), Mode::Train).unwrap().data, &r);

    let mut a = bn.clone();
    let y = a.forward(x.clone(), Mode::Train).unwrap();
    let dx = a.backward(&with_data(&y, &r));
    let e_in = input_error(&x, &dx, &|xx| forward(&mut bn.clone(), xx));
    let e_p = compare_params(&bn, &a, |l| vec![&mut l.gamma, &mut l.beta], &|l| forward(l, &x));
    e_in.max(e_p)
}

fn relu_instance(rng: &mut ChaCha8Rng) -> f64 {
    // Keep inputs away from the kink at 0.
    let mut x = random_batch(rng, 2, 5, 3, 2);
    for b in 0..x.batch {
        for v in x.valid_slice_mut(b) {
            *v = v.signum() * (0.05 + v.abs());
        }
    }
    let r = masked_direction(rng, &x, x.frame_len());
    let mut relu = Relu::new();
    let y = relu.forward(x.clone(), true);
    let dx = relu.backward(with_data(&y, &r));
    input_error(&x, &dx, &|xx| dot(&Relu::new().forward(xx.clone(), false).data, &r))
}

fn pool_instance(rng: &mut ChaCha8Rng) -> f64 {
    // Distinct values 0.01 apart, so no window has a near tie.
    let nb = rng.random_range(1..=2);
    let nt = rng.random_range(1..=7);
    let nf = rng.random_range(1..=5);
    let mut x = random_batch(rng, nb, nt, nf, 2);
    let n = x.data.len();
    let mut ranks: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(&mut ranks[..], rng);
    for b in 0..x.batch {
        let len = x.example_len();
        let valid = x.valid(b) * x.frame_len();
        for i in 0..valid {
            x.data[b * len + i] = ranks[b * len + i] as f64 * 0.01 - 1.0;
        }
    }
    let mut pool = MaxPool2x2::new();
    let y = pool.forward(&x, true);
    let r = direction(rng, y.data.len());
    let dx = pool.backward(&with_data(&y, &r), x.mask.clone());
    input_error(&x, &dx, &|xx| dot(&MaxPool2x2::new().forward(xx, false).data, &r))
}

fn dense_instance(rng: &mut ChaCha8Rng) -> f64 {
    let (rows, inputs, outputs) = (rng.random_range(1..=4), rng.random_range(1..=6), rng.random_range(1..=5));
    let x = Batch::from_rows(rows, inputs, direction(rng, rows * inputs)).unwrap();
    let mut dense = Dense::<f64>::new("d", inputs, outputs, rng);
    randomize(&mut dense.bias, rng, 0.5);
    let r = direction(rng, rows * outputs);
    let forward = |l: &mut Dense<f64>, x: &Batch<f64>| dot(&l.forward(x.clone(), false).unwrap().data, &r);

    let mut a = dense.clone();
    let y = a.forward(x.clone(), true).unwrap();
    let dx = a.backward(&with_data(&y, &r));
    let e_in = input_error(&x, &dx, &|xx| forward(&mut dense.clone(), xx));
    let e_p = compare_params(&dense, &a, |l| l.params_mut(), &|l| forward(l, &x));
    e_in.max(e_p)
}

fn dropout_instance(rng: &mut ChaCha8Rng) -> f64 {
    // The mask is a function of the seed, so every evaluation sees the same one.
    let x = random_batch(rng, 2, 5, 2, 3);
    let seed: u64 = rng.random();
    let r = masked_direction(rng, &x, x.frame_len());
    let mut d = Dropout::<f64>::new(0.3);
    let y = d.forward(x.clone(), Mode::Train, &mut ChaCha8Rng::seed_from_u64(seed));
    let dx = d.backward(with_data(&y, &r));
    input_error(&x, &dx, &|xx| {
        let y = Dropout::new(0.3).forward(xx.clone(), Mode::Train, &mut ChaCha8Rng::seed_from_u64(seed));
        dot(&y.data, &r)
    })
}

fn mean_instance(rng: &mut ChaCha8Rng) -> f64 {
    let nb = rng.random_range(1..=3);
    let nt = rng.random_range(1..=6);
    let nf = rng.random_range(1..=3);
    let x = random_batch(rng, nb, nt, nf, 2);
    let mut m = TemporalMean::new();
    let y = m.forward(&x, true);
    let r = direction(rng, y.data.len());
    let dx = m.backward(&with_data(&y, &r));
    input_error(&x, &dx, &|xx| dot(&TemporalMean::new().forward(xx, false).data, &r))
}

fn lstm_direction_instance(rng: &mut ChaCha8Rng) -> f64 {
    let (d, h) = (rng.random_range(1..=4), rng.random_range(1..=4));
    let nb = rng.random_range(1..=2);
    let nt = rng.random_range(1..=5);
    let x = random_batch(rng, nb, nt, 1, d);
    let mut lstm = LstmDirection::<f64>::new("l", d, h, rng.random(), rng);
    randomize(&mut lstm.b, rng, 1.0);
    let r = masked_direction(rng, &x, h);
    let forward = |l: &mut LstmDirection<f64>, x: &Batch<f64>| dot(&l.forward(x, false).unwrap().data, &r);

    let mut a = lstm.clone();
    let y = a.forward(&x, true).unwrap();
    let dx = a.backward(&with_data(&y, &r));
    let e_in = input_error(&x, &dx, &|xx| forward(&mut lstm.clone(), xx));
    let e_p = compare_params(&lstm, &a, |l| l.params_mut(), &|l| forward(l, &x));
    e_in.max(e_p)
}

fn bilstm_instance(rng: &mut ChaCha8Rng) -> f64 {
    let nb = rng.random_range(1..=2);
    let x = random_batch(rng, nb, 5, 1, 4);
    let lstm = BiLstm::<f64>::new("s", 4, 3, 3, 0.2, rng);
    let seed: u64 = rng.random();
    let r = direction(rng, x.batch * 6);
    let forward = |l: &mut BiLstm<f64>, x: &Batch<f64>| {
        let y = l.forward(x.clone(), Mode::Train, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        dot(&y.data, &r)
    };

    let mut a = lstm.clone();
    let y = a.forward(x.clone(), Mode::Train, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let dx = a.backward(&with_data(&y, &r), x.mask.clone(), x.time);
    let e_in = input_error(&x, &dx, &|xx| forward(&mut lstm.clone(), xx));
    let e_p = compare_params(&lstm, &a, |l| l.params_mut(), &|l| forward(l, &x));
    e_in.max(e_p)
}

fn cross_entropy_instance(rng: &mut ChaCha8Rng) -> f64 {
    let logits = direction(rng, 4).iter().map(|v| 3.0 * v).collect::<Vec<_>>();
    let weights: Vec<f64> = (0..4).map(|_| rng.random_range(0.1..3.0)).collect();
    let label = rng.random_range(0..4);
    let (_, grad) = weighted_cross_entropy(&logits, label, &weights);
    let numeric = central_difference(|z| weighted_cross_entropy(z, label, &weights).0, &logits, FD_STEP);
    relative_error(&grad, &numeric)
}

fn cross_entropy_batch_instance(rng: &mut ChaCha8Rng) -> f64 {
    let rows = rng.random_range(1..=5);
    let logits = Batch::from_rows(rows, 4, direction(rng, rows * 4)).unwrap();
    let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..4)).collect();
    let weights: Vec<f64> = (0..4).map(|_| rng.random_range(0.1..3.0)).collect();
    let (_, grad) = weighted_cross_entropy_batch(&logits, &labels, &weights);
    let numeric = central_difference(
        |z| weighted_cross_entropy_batch(&with_data(&logits, z), &labels, &weights).0,
        &logits.data,
        FD_STEP,
    );
    relative_error(&grad.data, &numeric)
}
