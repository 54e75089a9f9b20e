//! Hybrid data/model parallel execution on simulated workers.
//!
//! Each worker runs its partitioned network on its own thread and talks to
//! its peers only through the [`Fabric`]. One [`Cluster::train_step`] runs the
//! conv stack on the local batch, then `K` MODULO iterations over the FC
//! stack (one FC update per iteration with gradients divided by `K`), then
//! conv bprop and one conv update, and finally the periodic parameter
//! average across replicas.

mod modulo;
mod shard;

pub use modulo::{local_subset, modulo_slot_owner, ModuloState};
pub use shard::ShardState;

use std::ops::Range;
use std::thread;

use thiserror::Error;

use crate::fabric::{Fabric, FabricError, OpDesc, Phase, Topology};
use crate::net::{nll_loss, ForwardCtx, Layer, LayerError, LayerKind, LayerSpec, Linear, NetError, Network, StreamKey};
use crate::partition::{partition_network, PartitionConfig, PartitionError, PartitionedNet};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RuntimeError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("worker {worker}, layer {index} ({kind}): {source}")]
    Layer {
        worker: usize,
        index: usize,
        kind: LayerKind,
        #[source]
        source: LayerError,
    },
    #[error("worker {worker}: {source}")]
    Fabric {
        worker: usize,
        #[source]
        source: FabricError,
    },
    #[error("worker {worker}: bprop through layer {layer} without a matching fprop")]
    NoForward { worker: usize, layer: usize },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("batch error: {0}")]
    Batch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuntimeConfig {
    /// Total workers N.
    pub workers: usize,
    /// MP group size K.
    pub group_size: usize,
    /// Local mini-batch size B per worker.
    pub batch: usize,
    /// Parameters are averaged after every `avg_period` train steps.
    pub avg_period: u64,
    pub lr: f64,
    pub ccr_threshold: f64,
    pub mp_enabled: bool,
    pub seed: u64,
    /// Accumulate gradients without updating or averaging parameters.
    pub deferred: bool,
    pub dropout: bool,
}

impl RuntimeConfig {
    pub fn new(workers: usize, group_size: usize, batch: usize) -> Self {
        RuntimeConfig {
            workers,
            group_size,
            batch,
            avg_period: 1,
            lr: 0.01,
            ccr_threshold: 0.0,
            mp_enabled: true,
            seed: 0,
            deferred: false,
            dropout: true,
        }
    }

    pub fn partition_config(&self) -> PartitionConfig {
        PartitionConfig {
            group_size: self.group_size,
            mp_enabled: self.mp_enabled,
            ccr_threshold: self.ccr_threshold,
            batch: self.batch,
        }
    }

    pub fn topology(&self) -> Result<Topology, RuntimeError> {
        Topology::new(self.workers, self.group_size).map_err(RuntimeError::Config)
    }

    pub fn validate(&self) -> Result<(), RuntimeError> {
        self.topology()?;
        if self.batch == 0 || self.batch % self.group_size != 0 {
            return Err(RuntimeError::Config(format!(
                "MP group size {} does not divide batch size {}",
                self.group_size, self.batch
            )));
        }
        if self.avg_period == 0 {
            return Err(RuntimeError::Config("avg_period must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(RuntimeError::Config(format!("learning rate {} is not a finite non-negative number", self.lr)));
        }
        if self.ccr_threshold.is_nan() {
            return Err(RuntimeError::Config("ccr_threshold is NaN".into()));
        }
        Ok(())
    }
}

/// One worker's local mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub inputs: Tensor<T>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone)]
pub enum Node<T> {
    Compute { layer: Layer<T>, split: bool },
    Modulo(ModuloState<T>),
    Shard(ShardState),
}

#[derive(Debug, Clone)]
pub struct Worker<T> {
    pub id: usize,
    pub gid: usize,
    pub offset: usize,
    pub nodes: Vec<Node<T>>,
    modulo: Option<usize>,
}

struct StepCtx<'a, T> {
    config: &'a RuntimeConfig,
    topology: Topology,
    fabric: &'a Fabric<T>,
    batches: &'a [Batch<T>],
    step: u64,
    average: bool,
}

impl<T: Scalar> Worker<T> {
    fn layer_err(&self, index: usize, source: LayerError) -> RuntimeError {
        let kind = match &self.nodes[index] {
            Node::Compute { layer, .. } => layer.kind(),
            Node::Modulo(_) => LayerKind::Modulo,
            Node::Shard(_) => LayerKind::Shard,
        };
        RuntimeError::Layer {
            worker: self.id,
            index,
            kind,
            source,
        }
    }

    fn forward(&mut self, range: Range<usize>, mut x: Tensor<T>, ctx: &StepCtx<T>, iteration: usize) -> Result<Tensor<T>, RuntimeError> {
        let group = ctx.topology.group_of(self.id);
        let upper = self.modulo.is_some_and(|m| range.start > m);
        let mut partitioned = false;
        for index in range {
            // Replicated activations above the MODULO layer draw the same
            // dropout mask on every group member.
            let stream = if upper && !partitioned {
                (1 << 32) + self.gid as u64
            } else {
                self.id as u64
            };
            let key = ctx.config.dropout.then_some(StreamKey {
                seed: ctx.config.seed,
                worker: stream,
                step: ctx.step,
                iteration: iteration as u64,
            });
            x = match &mut self.nodes[index] {
                Node::Compute { layer, split } => {
                    if *split {
                        partitioned = true;
                    }
                    let fctx = ForwardCtx { dropout: key, layer: index };
                    match layer.forward(x, &fctx) {
                        Ok(y) => y,
                        Err(e) => return Err(self.layer_err(index, e)),
                    }
                }
                Node::Shard(s) => {
                    partitioned = false;
                    s.fprop(self.id, &group, index, iteration, &x, ctx.fabric)?
                }
                Node::Modulo(_) => unreachable!("MODULO is driven by the step loop"),
            };
        }
        Ok(x)
    }

    /// Backpropagates `grad` through `range`. `replicated` says whether every
    /// group member holds the same gradient (true at the loss); a SHARD sum of
    /// replicated gradients is divided by `K` so it is not counted `K` times.
    fn backward(&mut self, range: Range<usize>, mut grad: Tensor<T>, ctx: &StepCtx<T>, iteration: usize) -> Result<Tensor<T>, RuntimeError> {
        let group = ctx.topology.group_of(self.id);
        let k = T::of(ctx.topology.group_size as f64);
        let upper = self.modulo.is_some_and(|m| range.start > m);
        let mut replicated = true;
        for index in range.rev() {
            grad = match &mut self.nodes[index] {
                Node::Compute { layer, split } => {
                    if *split {
                        replicated = false;
                    }
                    match layer.backward(&grad) {
                        Ok(g) => g,
                        Err(e) => return Err(self.layer_err(index, e)),
                    }
                }
                Node::Shard(s) => {
                    let mut g = s.bprop(self.id, &group, index, iteration, &grad, ctx.fabric)?;
                    if replicated {
                        g.div_scalar_assign(k);
                    }
                    replicated = false;
                    g
                }
                Node::Modulo(_) => unreachable!("MODULO is driven by the step loop"),
            };
        }
        // A replicated gradient reaching MODULO would be summed K times by its
        // reduction. The partitioner always puts a split LINEAR directly above
        // MODULO, so this only matters for hand-built plans.
        if upper && replicated {
            grad.div_scalar_assign(k);
        }
        Ok(grad)
    }

    fn compute_layers_mut(&mut self, range: Range<usize>) -> impl Iterator<Item = &mut Layer<T>> {
        self.nodes[range].iter_mut().filter_map(|n| match n {
            Node::Compute { layer, .. } => Some(layer),
            _ => None,
        })
    }

    fn check_batch(&self, batch: &Batch<T>, config: &RuntimeConfig) -> Result<(), RuntimeError> {
        let b = batch.inputs.dims()[0];
        if b != config.batch || batch.labels.len() != config.batch {
            return Err(RuntimeError::Batch(format!(
                "worker {} got {} examples and {} labels, expected {}",
                self.id,
                b,
                batch.labels.len(),
                config.batch
            )));
        }
        Ok(())
    }

    fn step(&mut self, ctx: &StepCtx<T>) -> Result<f64, RuntimeError> {
        let batch = &ctx.batches[self.id];
        self.check_batch(batch, ctx.config)?;
        let n = self.nodes.len();
        let k = ctx.topology.group_size;
        let update = !ctx.config.deferred;
        let lr = T::of(ctx.config.lr);

        let loss = match self.modulo {
            None => {
                let out = self.forward(0..n, batch.inputs.clone(), ctx, 0)?;
                let (loss, grad) = nll_loss(&out, &batch.labels)?;
                self.backward(0..n, grad, ctx, 0)?;
                loss
            }
            Some(m) => {
                let group = ctx.topology.group_of(self.id);
                let local = self.forward(0..m, batch.inputs.clone(), ctx, 0)?;
                let size = ctx.config.batch / k;
                let mut total = 0.0;
                for it in 0..k {
                    let Node::Modulo(state) = &mut self.nodes[m] else {
                        unreachable!()
                    };
                    let assembled = state.fprop(self.id, &group, m, &local, ctx.fabric)?;
                    let labels: Vec<usize> = group
                        .iter()
                        .flat_map(|&g| ctx.batches[g].labels[it * size..(it + 1) * size].iter().copied())
                        .collect();
                    let out = self.forward(m + 1..n, assembled, ctx, it)?;
                    let (loss, grad) = nll_loss(&out, &labels)?;
                    total += loss;
                    let grad = self.backward(m + 1..n, grad, ctx, it)?;
                    let Node::Modulo(state) = &mut self.nodes[m] else {
                        unreachable!()
                    };
                    state.bprop(self.id, &group, m, &grad, ctx.fabric)?;
                    if update {
                        let kk = T::of(k as f64);
                        for layer in self.compute_layers_mut(m + 1..n) {
                            layer.grads_mut().into_iter().for_each(|g| g.div_scalar_assign(kk));
                            layer.sgd_step(lr);
                        }
                    }
                }
                let Node::Modulo(state) = &mut self.nodes[m] else {
                    unreachable!()
                };
                let grad = state
                    .take_local_gradient()
                    .ok_or(RuntimeError::NoForward { worker: self.id, layer: m })?;
                self.backward(0..m, grad, ctx, 0)?;
                total / k as f64
            }
        };

        if update {
            let lower = self.modulo.unwrap_or(n);
            self.compute_layers_mut(0..lower).for_each(|l| l.sgd_step(lr));
        }
        if ctx.average {
            self.average(ctx)?;
        }
        Ok(loss)
    }

    /// Averages unsplit parameters over all workers and split shards over the
    /// workers at the same group offset.
    fn average(&mut self, ctx: &StepCtx<T>) -> Result<(), RuntimeError> {
        let all = ctx.topology.all();
        let peers = ctx.topology.peers_at_offset(self.id);
        for (split, group, label) in [(false, all, "replicated"), (true, peers, "shards")] {
            if group.len() < 2 {
                continue;
            }
            let mut params: Vec<&mut Tensor<T>> = self
                .nodes
                .iter_mut()
                .filter_map(|n| match n {
                    Node::Compute { layer, split: s } if *s == split => Some(layer.params_mut()),
                    _ => None,
                })
                .flatten()
                .collect();
            let total: usize = params.iter().map(|p| p.len()).sum();
            if total == 0 {
                continue;
            }
            let mut flat = Vec::with_capacity(total);
            params.iter().for_each(|p| flat.extend_from_slice(p.data()));
            let flat = Tensor::from_vec(vec![total], flat)?;
            let op = OpDesc::new(Phase::DpAvg, format!("{label} step={}", ctx.step));
            let avg = ctx
                .fabric
                .all_average(self.id, &group, &op, &flat)
                .map_err(|source| RuntimeError::Fabric { worker: self.id, source })?;
            let mut at = 0;
            for p in params.iter_mut() {
                let len = p.len();
                p.data_mut().copy_from_slice(&avg.data()[at..at + len]);
                at += len;
            }
        }
        Ok(())
    }
}

/// All workers of a run plus the fabric they share.
pub struct Cluster<T> {
    config: RuntimeConfig,
    topology: Topology,
    leaves: Vec<LayerSpec>,
    input_shape: Vec<usize>,
    plans: Vec<PartitionedNet>,
    workers: Vec<Worker<T>>,
    fabric: Fabric<T>,
    step: u64,
}

impl<T: Scalar> Cluster<T> {
    /// Validates the configuration, partitions the network for every group
    /// offset and initializes each worker from the same single-model weights.
    pub fn new(spec: &LayerSpec, input_shape: &[usize], config: RuntimeConfig) -> Result<Self, RuntimeError> {
        config.validate()?;
        let topology = config.topology()?;
        let pcfg = config.partition_config();
        let plans = (0..config.group_size)
            .map(|o| partition_network(spec, input_shape, &pcfg, o))
            .collect::<Result<Vec<_>, _>>()?;
        let full = Network::<T>::from_spec(spec, input_shape, config.seed)?;

        let mut workers = Vec::with_capacity(config.workers);
        for id in 0..config.workers {
            let offset = topology.offset(id);
            let plan = &plans[offset];
            let mut nodes = Vec::with_capacity(plan.layers.len());
            for pl in &plan.layers {
                let node = match (&pl.spec, pl.origin) {
                    (LayerSpec::Modulo { dim_full }, _) => Node::Modulo(ModuloState::new(config.batch, config.group_size, *dim_full)?),
                    (LayerSpec::Shard { dim, dim_full }, _) => Node::Shard(ShardState::new(*dim, *dim_full, config.group_size, offset)?),
                    (_, Some(leaf)) => {
                        let layer = full.layers()[leaf].clone();
                        match (&pl.owned_rows, layer) {
                            (Some((rows, _)), Layer::Linear(l)) => Node::Compute {
                                layer: Layer::Linear(l.slice_rows(rows.clone())?),
                                split: true,
                            },
                            (_, layer) => Node::Compute { layer, split: false },
                        }
                    }
                    (other, None) => {
                        return Err(RuntimeError::Config(format!("plan layer {} has no origin", other.kind())));
                    }
                };
                nodes.push(node);
            }
            workers.push(Worker {
                id,
                gid: topology.gid(id),
                offset,
                nodes,
                modulo: plan.modulo_index(),
            });
        }

        Ok(Cluster {
            fabric: Fabric::new(config.workers),
            leaves: spec.leaves().into_iter().cloned().collect(),
            input_shape: input_shape.to_vec(),
            config,
            topology,
            plans,
            workers,
            step: 0,
        })
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.config
    }

    pub fn topology(&self) -> Topology {
        self.topology
    }

    pub fn plan(&self, offset: usize) -> &PartitionedNet {
        &self.plans[offset]
    }

    pub fn workers(&self) -> &[Worker<T>] {
        &self.workers
    }

    pub fn fabric(&self) -> &Fabric<T> {
        &self.fabric
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// The layer of `worker` that stems from user leaf `leaf`.
    pub fn leaf_layer(&self, worker: usize, leaf: usize) -> Option<&Layer<T>> {
        let w = &self.workers[worker];
        let idx = *self.plans[w.offset].origin_map.get(leaf)?.last()?;
        match &w.nodes[idx] {
            Node::Compute { layer, .. } => Some(layer),
            _ => None,
        }
    }

    /// Runs one synchronized step on every worker; `batches[i]` is worker
    /// `i`'s local batch. Returns the per-worker loss (mean over the modulo
    /// iterations when the FC stack is partitioned).
    pub fn train_step(&mut self, batches: &[Batch<T>]) -> Result<Vec<f64>, RuntimeError> {
        if batches.len() != self.config.workers {
            return Err(RuntimeError::Batch(format!(
                "{} batches for {} workers",
                batches.len(),
                self.config.workers
            )));
        }
        let ctx = StepCtx {
            config: &self.config,
            topology: self.topology,
            fabric: &self.fabric,
            batches,
            step: self.step,
            average: !self.config.deferred && (self.step + 1) % self.config.avg_period == 0,
        };
        let results: Vec<Result<f64, RuntimeError>> = if self.workers.len() == 1 {
            vec![self.workers[0].step(&ctx)]
        } else {
            let ctx = &ctx;
            thread::scope(|s| {
                let handles: Vec<_> = self
                    .workers
                    .iter_mut()
                    .map(|w| {
                        s.spawn(move || {
                            let r = w.step(ctx);
                            if let Err(e) = &r {
                                if !matches!(e, RuntimeError::Fabric { source: FabricError::Aborted { .. }, .. }) {
                                    ctx.fabric.abort(w.id, e.to_string());
                                }
                            }
                            r
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("worker thread panicked")).collect()
            })
        };
        self.step += 1;

        let mut losses = Vec::with_capacity(results.len());
        let mut secondary = None;
        for r in results {
            match r {
                Ok(l) => losses.push(l),
                Err(e @ RuntimeError::Fabric { source: FabricError::Aborted { .. }, .. }) => {
                    secondary.get_or_insert(e);
                }
                Err(e) => return Err(e),
            }
        }
        match secondary {
            Some(e) => Err(e),
            None => Ok(losses),
        }
    }

    /// Rebuilds the full single model held by MP group `gid`, stacking split
    /// LINEAR shards (parameters and gradients) in offset order.
    pub fn assemble_network(&self, gid: usize) -> Result<Network<T>, RuntimeError> {
        let k = self.config.group_size;
        let members: Vec<usize> = (gid * k..(gid + 1) * k).collect();
        let mut layers = Vec::with_capacity(self.leaves.len());
        for leaf in 0..self.leaves.len() {
            let parts: Vec<&Layer<T>> = members
                .iter()
                .map(|&w| self.leaf_layer(w, leaf).expect("every leaf is placed"))
                .collect();
            let shards: Option<Vec<&Linear<T>>> = parts
                .iter()
                .map(|l| match l {
                    Layer::Linear(lin) if lin.out_dim() != lin.full_out => Some(lin),
                    _ => None,
                })
                .collect();
            let mut layer = match shards {
                Some(sh) => {
                    let stack = |f: &dyn Fn(&Linear<T>) -> &Tensor<T>| {
                        Tensor::concat_rows(&sh.iter().map(|l| f(l).clone()).collect::<Vec<_>>())
                    };
                    let mut lin = Linear::from_params(stack(&|l| &l.weight)?, stack(&|l| &l.bias)?);
                    lin.grad_weight = stack(&|l| &l.grad_weight)?;
                    lin.grad_bias = stack(&|l| &l.grad_bias)?;
                    Layer::Linear(lin)
                }
                None => parts[0].clone(),
            };
            layer.clear_cache();
            layers.push(layer);
        }
        Ok(Network::from_layers(self.leaves.clone(), layers, &self.input_shape, self.config.seed)?.with_lr(self.config.lr))
    }
}

/// `grad / K`, the scaling applied to FC gradients before each of the `K`
/// per-step FC updates.
pub fn fc_gradient_scale<T: Scalar>(grad: &Tensor<T>, group_size: usize) -> Tensor<T> {
    let mut g = grad.clone();
    g.div_scalar_assign(T::of(group_size as f64));
    g
}
