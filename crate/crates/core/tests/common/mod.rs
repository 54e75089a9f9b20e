#![allow(dead_code)]

use hybridnet::net::{nll_loss, ForwardCtx, Layer, LayerSpec};
use hybridnet::runtime::Batch;
use hybridnet::tensor::{
    conv2d, conv2d_backward, dropout, dropout_backward, log_softmax, log_softmax_backward, matmul, maxpool2d,
    maxpool2d_backward, pad2d, pad2d_backward, relu, relu_backward, transpose,
};
use hybridnet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOLERANCE: f64 = 1e-5;
pub const FD_CASES: u64 = 20;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::random_uniform(dims.to_vec(), -1.0, 1.0, rng).unwrap()
}

/// Values bounded away from zero so a ReLU kink is never straddled.
fn away_from_zero(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = dims.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::from_vec(dims.to_vec(), data).unwrap()
}

/// A random permutation of well-separated levels, so no pooling window
/// holds two values within the finite-difference step.
fn separated(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    use rand::seq::SliceRandom;
    let n: usize = dims.iter().product();
    let mut levels: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    levels.shuffle(rng);
    Tensor::from_vec(dims.to_vec(), levels).unwrap()
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_grad(x: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> Tensor<f64> {
    let mut g = Tensor::zeros_like(x);
    let mut probe = x.clone();
    for i in 0..x.len() {
        let v = x.data()[i];
        probe.data_mut()[i] = v + FD_STEP;
        let up = f(&probe);
        probe.data_mut()[i] = v - FD_STEP;
        let down = f(&probe);
        probe.data_mut()[i] = v;
        g.data_mut()[i] = (up - down) / (2.0 * FD_STEP);
    }
    g
}

/// Normwise relative error of `analytic` against `numeric`.
pub fn rel(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    analytic.rel_err(numeric).unwrap()
}

/// Worst relative error over `FD_CASES` random cases, per kernel.
pub fn gradient_suite() -> Vec<(&'static str, f64)> {
    type Check = (&'static str, fn(u64) -> f64);
    let kernels: [Check; 12] = [
        ("matmul", fd_matmul),
        ("conv2d input", fd_conv_input),
        ("conv2d kernel", fd_conv_kernel),
        ("maxpool2d", fd_maxpool),
        ("relu", fd_relu),
        ("log_softmax", fd_log_softmax),
        ("dropout", fd_dropout),
        ("pad2d", fd_pad),
        ("linear input", fd_linear_input),
        ("linear weight", fd_linear_weight),
        ("linear bias", fd_linear_bias),
        ("nll_loss", fd_nll),
    ];
    kernels
        .iter()
        .map(|(name, f)| (*name, (0..FD_CASES).map(f).fold(0.0, f64::max)))
        .collect()
}

pub fn fd_matmul(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (m, k, n) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
    let a = uniform(&[m, k], &mut r);
    let b = uniform(&[k, n], &mut r);
    let w = uniform(&[m, n], &mut r);
    // dL/dA = W * B^T, dL/dB = A^T * W
    let da = matmul(&w, &transpose(&b).unwrap()).unwrap();
    let db = matmul(&transpose(&a).unwrap(), &w).unwrap();
    let na = numeric_grad(&a, |a| dot(&matmul(a, &b).unwrap(), &w));
    let nb = numeric_grad(&b, |b| dot(&matmul(&a, b).unwrap(), &w));
    rel(&da, &na).max(rel(&db, &nb))
}

fn conv_case(seed: u64) -> (Tensor<f64>, Tensor<f64>, usize, usize, Tensor<f64>) {
    let mut r = rng(seed);
    let (b, cin, cout) = (r.gen_range(1..3), r.gen_range(1..3), r.gen_range(1..3));
    let kernel = r.gen_range(1..4);
    let stride = r.gen_range(1..3);
    let pad = r.gen_range(0..2);
    // choose a spatial size that tiles exactly
    let out: usize = r.gen_range(1..4);
    let size = ((out - 1) * stride + kernel).saturating_sub(2 * pad).max(1);
    let x = uniform(&[b, cin, size, size], &mut r);
    let k = uniform(&[cout, cin, kernel, kernel], &mut r);
    let y = conv2d(&x, &k, stride, pad);
    let (x, k, stride, pad) = match y {
        Ok(_) => (x, k, stride, pad),
        Err(_) => {
            let x = uniform(&[b, cin, 4, 4], &mut r);
            let k = uniform(&[cout, cin, 3, 3], &mut r);
            (x, k, 1, 1)
        }
    };
    let y = conv2d(&x, &k, stride, pad).unwrap();
    let w = uniform(y.dims(), &mut r);
    (x, k, stride, pad, w)
}

pub fn fd_conv_input(seed: u64) -> f64 {
    let (x, k, stride, pad, w) = conv_case(seed);
    let (dx, _) = conv2d_backward(&x, &k, &w, stride, pad).unwrap();
    let nx = numeric_grad(&x, |x| dot(&conv2d(x, &k, stride, pad).unwrap(), &w));
    rel(&dx, &nx)
}

pub fn fd_conv_kernel(seed: u64) -> f64 {
    let (x, k, stride, pad, w) = conv_case(seed);
    let (_, dk) = conv2d_backward(&x, &k, &w, stride, pad).unwrap();
    let nk = numeric_grad(&k, |k| dot(&conv2d(&x, k, stride, pad).unwrap(), &w));
    rel(&dk, &nk)
}

pub fn fd_maxpool(seed: u64) -> f64 {
    let mut r = rng(seed);
    let window = r.gen_range(1..4);
    let stride = window;
    let out = r.gen_range(1..4);
    let size = out * window;
    let x = separated(&[r.gen_range(1..3), r.gen_range(1..3), size, size], &mut r);
    let (y, idx) = maxpool2d(&x, window, stride).unwrap();
    let w = uniform(y.dims(), &mut r);
    let dx = maxpool2d_backward(&w, &idx, x.dims()).unwrap();
    let nx = numeric_grad(&x, |x| dot(&maxpool2d(x, window, stride).unwrap().0, &w));
    rel(&dx, &nx)
}

pub fn fd_relu(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = away_from_zero(&[r.gen_range(1..4), r.gen_range(1..6)], &mut r);
    let w = uniform(x.dims(), &mut r);
    let dx = relu_backward(&x, &w).unwrap();
    rel(&dx, &numeric_grad(&x, |x| dot(&relu(x), &w)))
}

pub fn fd_log_softmax(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = uniform(&[r.gen_range(1..4), r.gen_range(2..7)], &mut r);
    let w = uniform(x.dims(), &mut r);
    let dx = log_softmax_backward(&log_softmax(&x), &w).unwrap();
    rel(&dx, &numeric_grad(&x, |x| dot(&log_softmax(x), &w)))
}

pub fn fd_dropout(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = uniform(&[r.gen_range(1..4), r.gen_range(1..7)], &mut r);
    let keep = r.gen_range(0.3..1.0);
    let (_, mask) = dropout(&x, keep, &mut rng(seed + 1000)).unwrap();
    let w = uniform(x.dims(), &mut r);
    let dx = dropout_backward(&mask, &w).unwrap();
    // same mask for every probe
    let nx = numeric_grad(&x, |x| dot(&dropout(x, keep, &mut rng(seed + 1000)).unwrap().0, &w));
    rel(&dx, &nx)
}

pub fn fd_pad(seed: u64) -> f64 {
    let mut r = rng(seed);
    let pad = r.gen_range(0..3);
    let x = uniform(&[r.gen_range(1..3), r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4)], &mut r);
    let w = uniform(pad2d(&x, pad).unwrap().dims(), &mut r);
    let dx = pad2d_backward(&w, pad).unwrap();
    rel(&dx, &numeric_grad(&x, |x| dot(&pad2d(x, pad).unwrap(), &w)))
}

fn linear_case(seed: u64) -> (Layer<f64>, Tensor<f64>, Tensor<f64>) {
    let mut r = rng(seed);
    let (b, i, o) = (r.gen_range(1..4), r.gen_range(1..6), r.gen_range(1..6));
    let mut layer = Layer::from_spec(&LayerSpec::Linear { in_dim: i, out_dim: o }, &mut r).unwrap();
    if let Layer::Linear(l) = &mut layer {
        l.bias = uniform(&[o], &mut r);
    }
    let x = uniform(&[b, i], &mut r);
    let w = uniform(&[b, o], &mut r);
    (layer, x, w)
}

fn linear_out(layer: &Layer<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let mut l = layer.clone();
    l.forward(x.clone(), &ForwardCtx { dropout: None, layer: 0 }).unwrap()
}

fn linear_grads(seed: u64) -> (Layer<f64>, Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let (mut layer, x, w) = linear_case(seed);
    let clean = layer.clone();
    layer.forward(x.clone(), &ForwardCtx { dropout: None, layer: 0 }).unwrap();
    let dx = layer.backward(&w).unwrap();
    (clean, x, w, dx)
}

pub fn fd_linear_input(seed: u64) -> f64 {
    let (layer, x, w, dx) = linear_grads(seed);
    rel(&dx, &numeric_grad(&x, |x| dot(&linear_out(&layer, x), &w)))
}

pub fn fd_linear_weight(seed: u64) -> f64 {
    let (mut layer, x, w) = linear_case(seed);
    let clean = layer.clone();
    layer.forward(x.clone(), &ForwardCtx { dropout: None, layer: 0 }).unwrap();
    layer.backward(&w).unwrap();
    let Layer::Linear(l) = &layer else { unreachable!() };
    let Layer::Linear(base) = &clean else { unreachable!() };
    let numeric = numeric_grad(&base.weight, |wt| {
        let mut probe = clean.clone();
        if let Layer::Linear(p) = &mut probe {
            p.weight = wt.clone();
        }
        dot(&linear_out(&probe, &x), &w)
    });
    rel(&l.grad_weight, &numeric)
}

pub fn fd_linear_bias(seed: u64) -> f64 {
    let (mut layer, x, w) = linear_case(seed);
    let clean = layer.clone();
    layer.forward(x.clone(), &ForwardCtx { dropout: None, layer: 0 }).unwrap();
    layer.backward(&w).unwrap();
    let Layer::Linear(l) = &layer else { unreachable!() };
    let Layer::Linear(base) = &clean else { unreachable!() };
    let numeric = numeric_grad(&base.bias, |bias| {
        let mut probe = clean.clone();
        if let Layer::Linear(p) = &mut probe {
            p.bias = bias.clone();
        }
        dot(&linear_out(&probe, &x), &w)
    });
    rel(&l.grad_bias, &numeric)
}

pub fn fd_nll(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (b, c) = (r.gen_range(1..5), r.gen_range(2..6));
    let logp = log_softmax(&uniform(&[b, c], &mut r));
    let targets: Vec<usize> = (0..b).map(|_| r.gen_range(0..c)).collect();
    let (_, g) = nll_loss(&logp, &targets).unwrap();
    rel(&g, &numeric_grad(&logp, |lp| nll_loss(lp, &targets).unwrap().0))
}

/// `n` random batches of `b` examples for a 3x8x8 input with `classes`
/// labels.
pub fn toy_batches(n: usize, b: usize, classes: usize, seed: u64) -> Vec<Batch<f64>> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| Batch {
            inputs: Tensor::random_uniform(vec![b, 3, 8, 8], 0.0, 1.0, &mut r).unwrap(),
            labels: (0..b).map(|_| r.gen_range(0..classes)).collect(),
        })
        .collect()
}
