//! Sequential CNNs and single-worker training. A [`Network`] is the reference
//! every parallel execution is checked against.

mod layers;
mod presets;
mod spec;

pub use layers::{derive_seed, ForwardCtx, Layer, LayerError, Linear, Conv2d, StreamKey};
pub use presets::{toy_cnn_spec, vgg_variant_spec, vgg_variant_spec_for_input, VGG_INPUT};
pub use spec::{LayerKind, LayerSpec};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetError {
    #[error("invalid network: {0}")]
    InvalidSpec(String),
    #[error("layer {index} ({kind}): {source}")]
    Layer {
        index: usize,
        kind: LayerKind,
        #[source]
        source: LayerError,
    },
    #[error("input batch has per-example shape {got:?}, network expects {expected:?}")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("bprop called without a preceding fprop")]
    NoForward,
    #[error("target {target} out of range for {classes} classes")]
    Target { target: usize, classes: usize },
    #[error("{targets} targets for a batch of {batch}")]
    TargetCount { targets: usize, batch: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Mean negative log-likelihood over the batch and its gradient with respect
/// to the log-probabilities.
pub fn nll_loss<T: Scalar>(logp: &Tensor<T>, targets: &[usize]) -> Result<(f64, Tensor<T>), NetError> {
    let (b, classes) = logp.matrix_dims("nll_loss")?;
    if targets.len() != b {
        return Err(NetError::TargetCount {
            targets: targets.len(),
            batch: b,
        });
    }
    let mut grad = Tensor::zeros_like(logp);
    let inv_b = T::of(1.0 / b as f64);
    let mut loss = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if t >= classes {
            return Err(NetError::Target { target: t, classes });
        }
        loss -= logp.data()[i * classes + t].as_f64();
        grad.data_mut()[i * classes + t] = -inv_b;
    }
    Ok((loss / b as f64, grad))
}

/// Index of the largest log-probability per row.
pub fn argmax_rows<T: Scalar>(logp: &Tensor<T>) -> Vec<usize> {
    let classes = *logp.dims().last().expect("rank >= 1");
    logp.data()
        .chunks(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// A sequential network confined to one worker.
#[derive(Debug, Clone)]
pub struct Network<T> {
    layers: Vec<Layer<T>>,
    specs: Vec<LayerSpec>,
    input_shape: Vec<usize>,
    step: u64,
    lr: f64,
    seed: u64,
    dropout: bool,
    output: Option<Tensor<T>>,
}

impl<T: Scalar> Network<T> {
    /// Builds and initializes a network. Leaf `i` draws its weights from a
    /// generator seeded by `(seed, i)`, so the same seed always yields the
    /// same parameters regardless of how the network is later partitioned.
    pub fn from_spec(spec: &LayerSpec, input_shape: &[usize], seed: u64) -> Result<Self, NetError> {
        let leaves = spec.leaves();
        if leaves.is_empty() {
            return Err(NetError::InvalidSpec("no layers".into()));
        }
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(leaves.len());
        for (i, leaf) in leaves.iter().enumerate() {
            if leaf.is_comm() {
                return Err(NetError::InvalidSpec(format!(
                    "layer {i}: {} may only be inserted by the partitioner",
                    leaf.kind()
                )));
            }
            shape = leaf
                .resize(&shape)
                .map_err(|e| NetError::InvalidSpec(format!("layer {i}: {e}")))?;
            let mut rng = Self::init_rng(seed, i);
            layers.push(Layer::from_spec(leaf, &mut rng).map_err(|source| NetError::Layer {
                index: i,
                kind: leaf.kind(),
                source,
            })?);
        }
        Ok(Network {
            layers,
            specs: leaves.into_iter().cloned().collect(),
            input_shape: input_shape.to_vec(),
            step: 0,
            lr: 0.01,
            seed,
            dropout: true,
            output: None,
        })
    }

    pub(crate) fn init_rng(seed: u64, leaf: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x1417, leaf as u64]))
    }

    /// Assembles a network from already-built layers (used to reassemble a
    /// full model from per-worker shards).
    pub fn from_layers(
        specs: Vec<LayerSpec>,
        layers: Vec<Layer<T>>,
        input_shape: &[usize],
        seed: u64,
    ) -> Result<Self, NetError> {
        if specs.len() != layers.len() {
            return Err(NetError::InvalidSpec("spec and layer counts differ".into()));
        }
        Ok(Network {
            layers,
            specs,
            input_shape: input_shape.to_vec(),
            step: 0,
            lr: 0.01,
            seed,
            dropout: true,
            output: None,
        })
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }

    pub fn with_dropout(mut self, enabled: bool) -> Self {
        self.dropout = enabled;
        self
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec::Seq(self.specs.clone())
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().flat_map(|l| l.params()).map(Tensor::len).sum()
    }

    pub fn fprop(&mut self, batch: &Tensor<T>) -> Result<Tensor<T>, NetError> {
        if batch.dims().len() < 2 || batch.dims()[1..] != self.input_shape[..] {
            return Err(NetError::InputShape {
                expected: self.input_shape.clone(),
                got: batch.dims().get(1..).unwrap_or(&[]).to_vec(),
            });
        }
        let key = self.dropout.then_some(StreamKey {
            seed: self.seed,
            worker: 0,
            step: self.step,
            iteration: 0,
        });
        let mut x = batch.clone();
        for (index, layer) in self.layers.iter_mut().enumerate() {
            let ctx = ForwardCtx { dropout: key, layer: index };
            x = layer.forward(x, &ctx).map_err(|source| NetError::Layer {
                index,
                kind: layer.kind(),
                source,
            })?;
        }
        self.output = Some(x.clone());
        Ok(x)
    }

    /// Backpropagates the mean NLL loss of the last `fprop` output and
    /// accumulates every parameter gradient. Returns the loss.
    pub fn bprop(&mut self, targets: &[usize]) -> Result<f64, NetError> {
        let out = self.output.take().ok_or(NetError::NoForward)?;
        let (loss, mut grad) = nll_loss(&out, targets)?;
        for (index, layer) in self.layers.iter_mut().enumerate().rev() {
            grad = layer.backward(&grad).map_err(|source| NetError::Layer {
                index,
                kind: layer.kind(),
                source,
            })?;
        }
        Ok(loss)
    }

    pub fn sgd_step(&mut self, lr: f64) {
        let lr = T::of(lr);
        self.layers.iter_mut().for_each(|l| l.sgd_step(lr));
        self.step += 1;
    }

    /// One fprop/bprop/update on a batch using the configured learning rate.
    pub fn train_batch(&mut self, batch: &Tensor<T>, targets: &[usize]) -> Result<f64, NetError> {
        self.fprop(batch)?;
        let loss = self.bprop(targets)?;
        self.sgd_step(self.lr);
        Ok(loss)
    }

    /// Predicted classes without touching gradients or the step counter.
    pub fn predict(&mut self, batch: &Tensor<T>) -> Result<Vec<usize>, NetError> {
        let dropout = std::mem::replace(&mut self.dropout, false);
        let out = self.fprop(batch);
        self.dropout = dropout;
        self.output = None;
        self.layers.iter_mut().for_each(Layer::clear_cache);
        Ok(argmax_rows(&out?))
    }

    pub fn zero_grad(&mut self) {
        self.layers.iter_mut().for_each(Layer::zero_grad);
    }

    pub fn pending_caches(&self) -> usize {
        self.layers.iter().filter(|l| l.has_cache()).count()
    }
}
