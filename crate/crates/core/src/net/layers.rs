//! Executable layers with parameters, gradient accumulators and bprop caches.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::spec::{LayerKind, LayerSpec};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LayerError {
    #[error("backward called without a matching forward")]
    NoForward,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Identifies the random stream for dropout masks. Every (seed, worker, step,
/// iteration, layer) tuple draws an independent mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StreamKey {
    pub seed: u64,
    pub worker: u64,
    pub step: u64,
    pub iteration: u64,
}

/// splitmix64 finalizer, used to derive independent generator seeds.
pub(crate) fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED, |acc, &p| mix(acc ^ mix(p)))
}

impl StreamKey {
    pub fn rng_for_layer(&self, layer: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(&[
            self.seed,
            self.worker,
            self.step,
            self.iteration,
            layer as u64,
        ]))
    }
}

/// Per-call forward context. `dropout: None` turns dropout layers into the
/// identity.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardCtx {
    pub dropout: Option<StreamKey>,
    pub layer: usize,
}

#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub stride: usize,
    pub pad: usize,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub grad_weight: Tensor<T>,
    pub grad_bias: Tensor<T>,
    input: Option<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub grad_weight: Tensor<T>,
    pub grad_bias: Tensor<T>,
    /// Output rows of the unsplit layer this instance holds.
    pub rows: Range<usize>,
    /// Output dimension of the unsplit layer.
    pub full_out: usize,
    input: Option<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub enum Layer<T> {
    Reshape {
        shape: Vec<usize>,
        input_dims: Option<Vec<usize>>,
    },
    Pad {
        pad: usize,
        cached: bool,
    },
    Conv(Conv2d<T>),
    Pool {
        window: usize,
        stride: usize,
        cache: Option<(Vec<usize>, Vec<usize>)>,
    },
    Dropout {
        keep_prob: f64,
        mask: Option<Option<Tensor<T>>>,
    },
    Relu {
        input: Option<Tensor<T>>,
    },
    Linear(Linear<T>),
    LogSoftmax {
        output: Option<Tensor<T>>,
    },
}

fn glorot<T: Scalar, R: Rng>(dims: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::random_uniform(dims, -a, a, rng).expect("positive extents")
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let weight = glorot(vec![out_dim, in_dim], in_dim, out_dim, rng);
        let bias = Tensor::zeros(vec![out_dim]).expect("positive extent");
        Self::from_params(weight, bias)
    }

    pub fn from_params(weight: Tensor<T>, bias: Tensor<T>) -> Self {
        let out = weight.dims()[0];
        Linear {
            grad_weight: Tensor::zeros_like(&weight),
            grad_bias: Tensor::zeros_like(&bias),
            weight,
            bias,
            rows: 0..out,
            full_out: out,
            input: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    /// Copy of output rows `range` (relative to this layer), gradients reset.
    pub fn slice_rows(&self, range: Range<usize>) -> Result<Self, TensorError> {
        let weight = self.weight.slice_rows(range.start, range.end)?;
        let bias = self.bias.slice_rows(range.start, range.end)?;
        let mut out = Linear::from_params(weight, bias);
        out.rows = self.rows.start + range.start..self.rows.start + range.end;
        out.full_out = self.full_out;
        Ok(out)
    }
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng>(cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize, rng: &mut R) -> Self {
        let fan_in = cin * kernel * kernel;
        let fan_out = cout * kernel * kernel;
        let weight = glorot(vec![cout, cin, kernel, kernel], fan_in, fan_out, rng);
        let bias = Tensor::zeros(vec![cout]).expect("positive extent");
        Conv2d {
            stride,
            pad,
            grad_weight: Tensor::zeros_like(&weight),
            grad_bias: Tensor::zeros_like(&bias),
            weight,
            bias,
            input: None,
        }
    }
}

impl<T: Scalar> Layer<T> {
    /// Instantiates a leaf spec. Parameterized layers draw their
    /// initialization from `rng`.
    pub fn from_spec<R: Rng>(spec: &LayerSpec, rng: &mut R) -> Result<Self, LayerError> {
        Ok(match spec {
            LayerSpec::Reshape { shape } => Layer::Reshape {
                shape: shape.clone(),
                input_dims: None,
            },
            LayerSpec::Pad { pad } => Layer::Pad {
                pad: *pad,
                cached: false,
            },
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
            } => Layer::Conv(Conv2d::new(*in_channels, *out_channels, *kernel, *stride, *pad, rng)),
            LayerSpec::Pooling { window, stride } => Layer::Pool {
                window: *window,
                stride: *stride,
                cache: None,
            },
            LayerSpec::Dropout { keep_prob } => Layer::Dropout {
                keep_prob: *keep_prob,
                mask: None,
            },
            LayerSpec::Relu => Layer::Relu { input: None },
            LayerSpec::Linear { in_dim, out_dim } => Layer::Linear(Linear::new(*in_dim, *out_dim, rng)),
            LayerSpec::LogSoftmax => Layer::LogSoftmax { output: None },
            other => {
                return Err(LayerError::Tensor(TensorError::Invalid {
                    op: "layer",
                    detail: format!("{} is not an executable compute layer", other.kind()),
                }))
            }
        })
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Reshape { .. } => LayerKind::Reshape,
            Layer::Pad { .. } => LayerKind::Pad,
            Layer::Conv(_) => LayerKind::Conv,
            Layer::Pool { .. } => LayerKind::Pooling,
            Layer::Dropout { .. } => LayerKind::Dropout,
            Layer::Relu { .. } => LayerKind::Relu,
            Layer::Linear(_) => LayerKind::Linear,
            Layer::LogSoftmax { .. } => LayerKind::LogSoftmax,
        }
    }

    pub fn forward(&mut self, x: Tensor<T>, ctx: &ForwardCtx) -> Result<Tensor<T>, LayerError> {
        match self {
            Layer::Reshape { shape, input_dims } => {
                let b = x.dims()[0];
                *input_dims = Some(x.dims().to_vec());
                let mut dims = vec![b];
                dims.extend_from_slice(shape);
                Ok(x.reshape(dims)?)
            }
            Layer::Pad { pad, cached } => {
                let y = tensor::pad2d(&x, *pad)?;
                *cached = true;
                Ok(y)
            }
            Layer::Conv(c) => {
                let mut y = tensor::conv2d(&x, &c.weight, c.stride, c.pad)?;
                let (cout, plane) = (y.dims()[1], y.dims()[2] * y.dims()[3]);
                let bias = c.bias.data();
                for (i, chunk) in y.data_mut().chunks_mut(plane).enumerate() {
                    let b = bias[i % cout];
                    chunk.iter_mut().for_each(|v| *v = *v + b);
                }
                c.input = Some(x);
                Ok(y)
            }
            Layer::Pool { window, stride, cache } => {
                let (y, idx) = tensor::maxpool2d(&x, *window, *stride)?;
                *cache = Some((idx, x.dims().to_vec()));
                Ok(y)
            }
            Layer::Dropout { keep_prob, mask } => match ctx.dropout {
                Some(key) => {
                    let mut rng = key.rng_for_layer(ctx.layer);
                    let (y, m) = tensor::dropout(&x, *keep_prob, &mut rng)?;
                    *mask = Some(Some(m));
                    Ok(y)
                }
                None => {
                    *mask = Some(None);
                    Ok(x)
                }
            },
            Layer::Relu { input } => {
                let y = tensor::relu(&x);
                *input = Some(x);
                Ok(y)
            }
            Layer::Linear(l) => {
                if x.dims().len() != 2 || x.dims()[1] != l.in_dim() {
                    return Err(TensorError::ShapeMismatch {
                        op: "linear",
                        left: x.shape().clone(),
                        right: l.weight.shape().clone(),
                    }
                    .into());
                }
                let wt = tensor::transpose(&l.weight)?;
                let mut y = tensor::matmul(&x, &wt)?;
                let out = l.out_dim();
                let bias = l.bias.data();
                for row in y.data_mut().chunks_mut(out) {
                    row.iter_mut().zip(bias).for_each(|(v, &b)| *v = *v + b);
                }
                l.input = Some(x);
                Ok(y)
            }
            Layer::LogSoftmax { output } => {
                if x.dims().len() != 2 {
                    return Err(TensorError::Rank {
                        op: "log_softmax",
                        expected: 2,
                        got: x.shape().clone(),
                    }
                    .into());
                }
                let y = tensor::log_softmax(&x);
                *output = Some(y.clone());
                Ok(y)
            }
        }
    }

    /// Consumes the forward cache, accumulates parameter gradients and
    /// returns the gradient with respect to the layer input.
    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>, LayerError> {
        match self {
            Layer::Reshape { input_dims, .. } => {
                let dims = input_dims.take().ok_or(LayerError::NoForward)?;
                Ok(grad.clone().reshape(dims)?)
            }
            Layer::Pad { pad, cached } => {
                if !std::mem::take(cached) {
                    return Err(LayerError::NoForward);
                }
                Ok(tensor::pad2d_backward(grad, *pad)?)
            }
            Layer::Conv(c) => {
                let x = c.input.take().ok_or(LayerError::NoForward)?;
                let (dx, dw) = tensor::conv2d_backward(&x, &c.weight, grad, c.stride, c.pad)?;
                c.grad_weight.add_assign(&dw)?;
                let (cout, plane) = (grad.dims()[1], grad.dims()[2] * grad.dims()[3]);
                let gb = c.grad_bias.data_mut();
                for (i, chunk) in grad.data().chunks(plane).enumerate() {
                    let s = chunk.iter().fold(T::zero(), |a, &v| a + v);
                    gb[i % cout] = gb[i % cout] + s;
                }
                Ok(dx)
            }
            Layer::Pool { cache, .. } => {
                let (idx, dims) = cache.take().ok_or(LayerError::NoForward)?;
                Ok(tensor::maxpool2d_backward(grad, &idx, &dims)?)
            }
            Layer::Dropout { mask, .. } => match mask.take().ok_or(LayerError::NoForward)? {
                Some(m) => Ok(tensor::dropout_backward(&m, grad)?),
                None => Ok(grad.clone()),
            },
            Layer::Relu { input } => {
                let x = input.take().ok_or(LayerError::NoForward)?;
                Ok(tensor::relu_backward(&x, grad)?)
            }
            Layer::Linear(l) => {
                let x = l.input.take().ok_or(LayerError::NoForward)?;
                let gt = tensor::transpose(grad)?;
                let dw = tensor::matmul(&gt, &x)?;
                l.grad_weight.add_assign(&dw)?;
                let out = l.out_dim();
                let gb = l.grad_bias.data_mut();
                for row in grad.data().chunks(out) {
                    gb.iter_mut().zip(row).for_each(|(a, &g)| *a = *a + g);
                }
                Ok(tensor::matmul(grad, &l.weight)?)
            }
            Layer::LogSoftmax { output } => {
                let y = output.take().ok_or(LayerError::NoForward)?;
                Ok(tensor::log_softmax_backward(&y, grad)?)
            }
        }
    }

    /// Whether a forward cache is still waiting for its backward.
    pub fn has_cache(&self) -> bool {
        match self {
            Layer::Reshape { input_dims, .. } => input_dims.is_some(),
            Layer::Pad { cached, .. } => *cached,
            Layer::Conv(c) => c.input.is_some(),
            Layer::Pool { cache, .. } => cache.is_some(),
            Layer::Dropout { mask, .. } => mask.is_some(),
            Layer::Relu { input } => input.is_some(),
            Layer::Linear(l) => l.input.is_some(),
            Layer::LogSoftmax { output } => output.is_some(),
        }
    }

    pub fn clear_cache(&mut self) {
        match self {
            Layer::Reshape { input_dims, .. } => *input_dims = None,
            Layer::Pad { cached, .. } => *cached = false,
            Layer::Conv(c) => c.input = None,
            Layer::Pool { cache, .. } => *cache = None,
            Layer::Dropout { mask, .. } => *mask = None,
            Layer::Relu { input } => *input = None,
            Layer::Linear(l) => l.input = None,
            Layer::LogSoftmax { output } => *output = None,
        }
    }

    /// `[weight, bias]` for parameterized layers, empty otherwise.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        match self {
            Layer::Conv(c) => vec![&c.weight, &c.bias],
            Layer::Linear(l) => vec![&l.weight, &l.bias],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::Conv(c) => vec![&mut c.weight, &mut c.bias],
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            _ => Vec::new(),
        }
    }

    pub fn grads(&self) -> Vec<&Tensor<T>> {
        match self {
            Layer::Conv(c) => vec![&c.grad_weight, &c.grad_bias],
            Layer::Linear(l) => vec![&l.grad_weight, &l.grad_bias],
            _ => Vec::new(),
        }
    }

    pub fn grads_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::Conv(c) => vec![&mut c.grad_weight, &mut c.grad_bias],
            Layer::Linear(l) => vec![&mut l.grad_weight, &mut l.grad_bias],
            _ => Vec::new(),
        }
    }

    /// `w <- w - lr * grad`, then zero the gradients.
    pub fn sgd_step(&mut self, lr: T) {
        let (params, grads): (Vec<&mut Tensor<T>>, Vec<&mut Tensor<T>>) = match self {
            Layer::Conv(c) => (vec![&mut c.weight, &mut c.bias], vec![&mut c.grad_weight, &mut c.grad_bias]),
            Layer::Linear(l) => (vec![&mut l.weight, &mut l.bias], vec![&mut l.grad_weight, &mut l.grad_bias]),
            _ => return,
        };
        for (p, g) in params.into_iter().zip(grads) {
            p.sub_scaled_assign(lr, g).expect("gradient shape matches parameter");
            g.fill_zero();
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads_mut().into_iter().for_each(Tensor::fill_zero);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_without_forward_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut l: Layer<f64> = Layer::from_spec(&LayerSpec::Linear { in_dim: 3, out_dim: 2 }, &mut rng).unwrap();
        let g = Tensor::zeros(vec![1, 2]).unwrap();
        assert_eq!(l.backward(&g).unwrap_err(), LayerError::NoForward);
    }

    #[test]
    fn sgd_step_scalar_model() {
        let w = Tensor::<f64>::from_f64(vec![1, 1], &[1.0]).unwrap();
        let b = Tensor::<f64>::zeros(vec![1]).unwrap();
        let mut l = Layer::Linear(Linear::from_params(w, b));
        if let Layer::Linear(lin) = &mut l {
            lin.grad_weight.data_mut()[0] = 2.0;
        }
        l.sgd_step(0.1);
        assert!((l.params()[0].data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(l.grads()[0].data()[0], 0.0);

        let before = l.params()[0].clone();
        if let Layer::Linear(lin) = &mut l {
            lin.grad_weight.data_mut()[0] = 5.0;
        }
        l.sgd_step(0.0);
        assert_eq!(l.params()[0], &before);
    }

    #[test]
    fn linear_row_slices_reassemble() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let full: Linear<f64> = Linear::new(5, 6, &mut rng);
        let parts: Vec<_> = (0..3).map(|i| full.slice_rows(2 * i..2 * i + 2).unwrap()).collect();
        assert_eq!(parts[1].rows, 2..4);
        let w: Vec<_> = parts.iter().map(|p| p.weight.clone()).collect();
        assert_eq!(Tensor::concat_rows(&w).unwrap(), full.weight);
    }

    #[test]
    fn glorot_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let l: Linear<f64> = Linear::new(40, 60, &mut rng);
        let a = (6.0f64 / 100.0).sqrt();
        assert!(l.weight.max_abs() <= a);
        assert_eq!(l.bias.max_abs(), 0.0);
    }
}
