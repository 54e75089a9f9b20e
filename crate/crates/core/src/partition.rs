//! Automatic transformation of a sequential CNN into its per-worker
//! model-parallel form.
//!
//! The pass walks the network in order while tracking two per-example
//! shapes: `dim`, the width this worker actually holds, and `dim_full`, the
//! width of the unpartitioned activation. Convolutional and other spatial
//! layers require `dim == dim_full`. A fully connected layer that clears the
//! computation-to-communication gate is split to `1/K` of its outputs; the
//! first such split is preceded by a MODULO layer that exchanges batch
//! examples between the group, and every later consumer of a partitioned
//! activation (a LINEAR or the final LOG_SOFTMAX) is preceded by a SHARD layer
//! that reassembles the full width.

use std::fmt::Write as _;
use std::ops::Range;

use thiserror::Error;

use crate::net::{LayerKind, LayerSpec, NetError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PartitionError {
    #[error("Partitioned input unsupported: layer {index} ({kind}) receives a partitioned activation")]
    PartitionedInput { index: usize, kind: LayerKind },
    #[error("layer {index}: LINEAR output dimension {out_dim} is not divisible by MP group size {group_size}")]
    NotDivisible {
        index: usize,
        out_dim: usize,
        group_size: usize,
    },
    #[error("layer {index}: {kind} layers cannot appear in a user network")]
    CommLayerInInput { index: usize, kind: LayerKind },
    #[error("layer {index}: LINEAR would be split behind an unsplit LINEAR with no SHARD to reduce its input gradient")]
    UnreducedSplit { index: usize },
    #[error("invalid partition config: {0}")]
    Config(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionConfig {
    /// MP group size K.
    pub group_size: usize,
    pub mp_enabled: bool,
    /// LINEAR layers are split only when their CCR exceeds this.
    pub ccr_threshold: f64,
    /// Local mini-batch size, used by the CCR estimate.
    pub batch: usize,
}

impl PartitionConfig {
    pub fn new(group_size: usize, batch: usize) -> Self {
        PartitionConfig {
            group_size,
            mp_enabled: true,
            ccr_threshold: 0.0,
            batch,
        }
    }

    fn use_mp(&self) -> bool {
        self.mp_enabled && self.group_size > 1
    }
}

/// Mutable state threaded through the recursive pass.
#[derive(Debug, Clone)]
pub struct PartitionContext {
    /// Per-example shape this worker holds.
    pub dim: Vec<usize>,
    /// Per-example shape of the unpartitioned activation.
    pub dim_full: Vec<usize>,
    /// Offset of this worker within its MP group.
    pub offset: usize,
    pub config: PartitionConfig,
    next_leaf: usize,
    modulo_inserted: bool,
}

impl PartitionContext {
    pub fn new(input_shape: &[usize], config: PartitionConfig, offset: usize) -> Self {
        PartitionContext {
            dim: input_shape.to_vec(),
            dim_full: input_shape.to_vec(),
            offset,
            config,
            next_leaf: 0,
            modulo_inserted: false,
        }
    }

    pub fn is_partitioned(&self) -> bool {
        self.dim != self.dim_full
    }
}

/// One layer of the transformed network.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedLayer {
    pub spec: LayerSpec,
    /// Leaf index in the user network, `None` for inserted MODULO/SHARD.
    pub origin: Option<usize>,
    /// For a split LINEAR: the output rows of the unsplit layer this worker
    /// owns, together with the unsplit output width.
    pub owned_rows: Option<(Range<usize>, usize)>,
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
}

/// Per-worker transformed network.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedNet {
    pub layers: Vec<PlannedLayer>,
    /// `origin_map[i]` lists the transformed indices produced for user leaf
    /// `i`: any inserted communication layer followed by the layer itself.
    pub origin_map: Vec<Vec<usize>>,
    pub group_size: usize,
    pub offset: usize,
    pub input_shape: Vec<usize>,
}

impl PartitionedNet {
    fn push(&mut self, layer: PlannedLayer) {
        let idx = self.layers.len();
        if let Some(o) = layer.origin {
            if self.origin_map.len() <= o {
                self.origin_map.resize(o + 1, Vec::new());
            }
            self.origin_map[o].push(idx);
        }
        self.layers.push(layer);
    }

    pub fn modulo_index(&self) -> Option<usize> {
        self.layers.iter().position(|l| l.spec.kind() == LayerKind::Modulo)
    }

    pub fn count(&self, kind: LayerKind) -> usize {
        self.layers.iter().filter(|l| l.spec.kind() == kind).count()
    }

    /// `(transformed index, owned rows, full width)` for every split LINEAR.
    pub fn shard_ranges(&self) -> Vec<(usize, Range<usize>, usize)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.owned_rows.clone().map(|(r, full)| (i, r, full)))
            .collect()
    }

    /// Human-readable layer table.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "partition plan: MP group size {}, worker offset {}, input {}",
            self.group_size,
            self.offset,
            fmt_dims(&self.input_shape)
        );
        let _ = writeln!(
            s,
            "{:>3}  {:<18} {:>12} {:>12}  {:<20} {}",
            "#", "kind", "input", "output", "owned rows", "origin"
        );
        for (i, l) in self.layers.iter().enumerate() {
            let owned = match &l.owned_rows {
                Some((r, full)) => format!("{}..{} of {}", r.start, r.end, full),
                None => "-".into(),
            };
            let origin = match l.origin {
                Some(o) => o.to_string(),
                None => "inserted".into(),
            };
            let kind = match &l.spec {
                LayerSpec::Linear { in_dim, out_dim } => format!("LINEAR {in_dim}->{out_dim}"),
                other => other.kind().to_string(),
            };
            let _ = writeln!(
                s,
                "{:>3}  {:<18} {:>12} {:>12}  {:<20} {}",
                i,
                kind,
                fmt_dims(&l.input_shape),
                fmt_dims(&l.output_shape),
                owned,
                origin
            );
        }
        s
    }
}

fn fmt_dims(d: &[usize]) -> String {
    d.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("x")
}

/// Computation-to-communication ratio of splitting a LINEAR layer.
///
/// The numerator counts multiply-accumulates of one fprop (`B*in*out`) and
/// the two bprop products (weight and input gradients). The denominator is
/// the number of scalars the split induces per worker and mini-batch: at the
/// MODULO boundary (`dim == dim_full`) `2*B*dimF*(K-1)/K` for the example
/// exchange in both directions; behind a SHARD the fprop and bprop shard
/// volumes `2*(B*dim*(K-1) + B*(dimF-dim))`. Zero-size layers give 0 and a
/// layer that induces no traffic gives infinity.
pub fn ccr(layer: &LayerSpec, batch: usize, ctx: &PartitionContext) -> f64 {
    let LayerSpec::Linear { in_dim, out_dim } = layer else {
        return 0.0;
    };
    let ops = 3.0 * batch as f64 * *in_dim as f64 * *out_dim as f64;
    if ops == 0.0 {
        return 0.0;
    }
    let k = ctx.config.group_size as f64;
    let dim: usize = ctx.dim.iter().product();
    let dim_full: usize = ctx.dim_full.iter().product();
    let b = batch as f64;
    let scalars = if dim == dim_full {
        2.0 * b * dim_full as f64 * (k - 1.0) / k
    } else {
        2.0 * (b * dim as f64 * (k - 1.0) + b * (dim_full - dim) as f64)
    };
    if scalars == 0.0 {
        f64::INFINITY
    } else {
        ops / scalars
    }
}

/// Splits a LINEAR layer to `out/K` outputs for the worker at `offset`,
/// returning the new spec and the owned output rows of the unsplit layer.
pub fn split_linear(
    layer: &LayerSpec,
    group_size: usize,
    offset: usize,
) -> Result<(LayerSpec, Range<usize>), PartitionError> {
    let LayerSpec::Linear { in_dim, out_dim } = *layer else {
        return Err(PartitionError::Config(format!("cannot split a {} layer", layer.kind())));
    };
    if group_size == 0 || offset >= group_size {
        return Err(PartitionError::Config(format!(
            "offset {offset} outside group of size {group_size}"
        )));
    }
    if out_dim % group_size != 0 {
        return Err(PartitionError::NotDivisible {
            index: 0,
            out_dim,
            group_size,
        });
    }
    let part = out_dim / group_size;
    Ok((
        LayerSpec::Linear {
            in_dim,
            out_dim: part,
        },
        offset * part..(offset + 1) * part,
    ))
}

/// The recursive pass. Appends the transformed form of `layer` to `net`.
pub fn partition(layer: &LayerSpec, ctx: &mut PartitionContext, net: &mut PartitionedNet) -> Result<(), PartitionError> {
    if let LayerSpec::Seq(children) = layer {
        for child in children {
            partition(child, ctx, net)?;
        }
        return Ok(());
    }

    let index = ctx.next_leaf;
    ctx.next_leaf += 1;
    let input_shape = ctx.dim.clone();
    let mut spec = layer.clone();
    let mut owned_rows = None;

    match layer.kind() {
        LayerKind::Seq => unreachable!("handled above"),
        LayerKind::Modulo | LayerKind::Shard => {
            return Err(PartitionError::CommLayerInInput {
                index,
                kind: layer.kind(),
            })
        }
        LayerKind::Reshape | LayerKind::Pad | LayerKind::Conv | LayerKind::Pooling => {
            if ctx.is_partitioned() {
                return Err(PartitionError::PartitionedInput {
                    index,
                    kind: layer.kind(),
                });
            }
            ctx.dim = layer.resize(&ctx.dim)?;
            ctx.dim_full = ctx.dim.clone();
        }
        LayerKind::Dropout | LayerKind::Relu => {
            ctx.dim = layer.resize(&ctx.dim)?;
        }
        LayerKind::Linear => {
            let LayerSpec::Linear { out_dim, .. } = *layer else {
                unreachable!()
            };
            let gate = ccr(layer, ctx.config.batch, ctx) > ctx.config.ccr_threshold;
            let insert_before = |net: &mut PartitionedNet, spec: LayerSpec, shape: &[usize], out: Vec<usize>| {
                net.push(PlannedLayer {
                    spec,
                    origin: None,
                    owned_rows: None,
                    input_shape: shape.to_vec(),
                    output_shape: out,
                });
            };
            let mut layer_input = ctx.dim.clone();
            let split = if !ctx.is_partitioned() {
                if ctx.config.use_mp() && gate {
                    if ctx.modulo_inserted {
                        return Err(PartitionError::UnreducedSplit { index });
                    }
                    let full: usize = ctx.dim_full.iter().product();
                    insert_before(net, LayerSpec::Modulo { dim_full: full }, &ctx.dim, ctx.dim.clone());
                    ctx.modulo_inserted = true;
                    true
                } else {
                    false
                }
            } else {
                let dim: usize = ctx.dim.iter().product();
                let dim_full: usize = ctx.dim_full.iter().product();
                insert_before(net, LayerSpec::Shard { dim, dim_full }, &ctx.dim, ctx.dim_full.clone());
                layer_input = ctx.dim_full.clone();
                gate
            };
            layer.resize(&layer_input)?;
            if split {
                let (s, rows) = split_linear(layer, ctx.config.group_size, ctx.offset).map_err(|e| match e {
                    PartitionError::NotDivisible { out_dim, group_size, .. } => PartitionError::NotDivisible {
                        index,
                        out_dim,
                        group_size,
                    },
                    other => other,
                })?;
                spec = s;
                owned_rows = Some((rows, out_dim));
            }
            let LayerSpec::Linear { out_dim: held, .. } = spec else {
                unreachable!()
            };
            ctx.dim_full = vec![out_dim];
            ctx.dim = vec![held];
            net.push(PlannedLayer {
                spec,
                origin: Some(index),
                owned_rows,
                input_shape: layer_input,
                output_shape: ctx.dim.clone(),
            });
            return Ok(());
        }
        LayerKind::LogSoftmax => {
            let mut layer_input = ctx.dim.clone();
            if ctx.is_partitioned() {
                let dim: usize = ctx.dim.iter().product();
                let dim_full: usize = ctx.dim_full.iter().product();
                net.push(PlannedLayer {
                    spec: LayerSpec::Shard { dim, dim_full },
                    origin: None,
                    owned_rows: None,
                    input_shape: ctx.dim.clone(),
                    output_shape: ctx.dim_full.clone(),
                });
                layer_input = ctx.dim_full.clone();
            }
            ctx.dim = layer.resize(&layer_input)?;
            ctx.dim_full = ctx.dim.clone();
            net.push(PlannedLayer {
                spec,
                origin: Some(index),
                owned_rows,
                input_shape: layer_input,
                output_shape: ctx.dim.clone(),
            });
            return Ok(());
        }
    }

    net.push(PlannedLayer {
        spec,
        origin: Some(index),
        owned_rows,
        input_shape,
        output_shape: ctx.dim.clone(),
    });
    Ok(())
}

/// Transforms a whole user network for the worker at `offset` of its group.
pub fn partition_network(
    spec: &LayerSpec,
    input_shape: &[usize],
    config: &PartitionConfig,
    offset: usize,
) -> Result<PartitionedNet, PartitionError> {
    if config.group_size == 0 {
        return Err(PartitionError::Config("MP group size must be >= 1".into()));
    }
    if offset >= config.group_size {
        return Err(PartitionError::Config(format!(
            "offset {offset} outside group of size {}",
            config.group_size
        )));
    }
    let mut ctx = PartitionContext::new(input_shape, config.clone(), offset);
    let mut net = PartitionedNet {
        layers: Vec::new(),
        origin_map: Vec::new(),
        group_size: config.group_size,
        offset,
        input_shape: input_shape.to_vec(),
    };
    partition(spec, &mut ctx, &mut net)?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{vgg_variant_spec, VGG_INPUT};

    fn kinds(net: &PartitionedNet) -> Vec<LayerKind> {
        net.layers.iter().map(|l| l.spec.kind()).collect()
    }

    #[test]
    fn vgg_k2_trace() {
        let cfg = PartitionConfig::new(2, 64);
        let net = partition_network(&vgg_variant_spec(), &VGG_INPUT, &cfg, 0).unwrap();
        assert_eq!(net.count(LayerKind::Modulo), 1);
        assert_eq!(net.count(LayerKind::Shard), 3);
        let k = kinds(&net);
        let m = net.modulo_index().unwrap();
        assert_eq!(k[m + 1], LayerKind::Linear);
        assert_eq!(
            net.layers[m + 1].spec,
            LayerSpec::Linear {
                in_dim: 4096,
                out_dim: 512
            }
        );
        // SHARD directly precedes FC1, FC2 and LOG_SOFTMAX
        let linears: Vec<usize> = (0..k.len()).filter(|&i| k[i] == LayerKind::Linear).collect();
        assert_eq!(linears.len(), 3);
        assert_eq!(k[linears[1] - 1], LayerKind::Shard);
        assert_eq!(k[linears[2] - 1], LayerKind::Shard);
        assert_eq!(k[k.len() - 2], LayerKind::Shard);
        assert_eq!(*k.last().unwrap(), LayerKind::LogSoftmax);
        assert_eq!(
            net.layers[linears[2]].spec,
            LayerSpec::Linear {
                in_dim: 1024,
                out_dim: 5
            }
        );
    }

    #[test]
    fn identity_when_mp_off_or_k1_or_gate_closed() {
        let spec = vgg_variant_spec();
        let leaves: Vec<LayerSpec> = spec.leaves().into_iter().cloned().collect();
        let mut off = PartitionConfig::new(2, 8);
        off.mp_enabled = false;
        let mut closed = PartitionConfig::new(2, 8);
        closed.ccr_threshold = f64::INFINITY;
        for cfg in [PartitionConfig::new(1, 8), off, closed] {
            let net = partition_network(&spec, &VGG_INPUT, &cfg, 0).unwrap();
            let got: Vec<LayerSpec> = net.layers.iter().map(|l| l.spec.clone()).collect();
            assert_eq!(got, leaves);
        }
    }

    #[test]
    fn split_linear_cases() {
        let fc0 = LayerSpec::Linear {
            in_dim: 4096,
            out_dim: 1024,
        };
        let (s, r) = split_linear(&fc0, 2, 1).unwrap();
        assert_eq!(
            s,
            LayerSpec::Linear {
                in_dim: 4096,
                out_dim: 512
            }
        );
        assert_eq!(r, 512..1024);
        assert_eq!(split_linear(&fc0, 1, 0).unwrap().0, fc0);
        let fc2 = LayerSpec::Linear { in_dim: 1024, out_dim: 10 };
        assert!(matches!(
            split_linear(&fc2, 4, 0),
            Err(PartitionError::NotDivisible { out_dim: 10, group_size: 4, .. })
        ));
    }

    #[test]
    fn non_divisible_fc_is_rejected_during_partition() {
        let cfg = PartitionConfig::new(4, 8);
        let err = partition_network(&vgg_variant_spec(), &VGG_INPUT, &cfg, 0).unwrap_err();
        assert!(matches!(err, PartitionError::NotDivisible { out_dim: 10, .. }), "{err}");
    }

    #[test]
    fn split_after_unsplit_fc_above_modulo_is_rejected() {
        // FC 8->8 split, FC 8->4 gated off (CCR below threshold), FC 4->64 would split again
        let spec = LayerSpec::Seq(vec![
            LayerSpec::Linear { in_dim: 8, out_dim: 8 },
            LayerSpec::Linear { in_dim: 8, out_dim: 1 },
            LayerSpec::Linear { in_dim: 1, out_dim: 4096 },
        ]);
        let mut cfg = PartitionConfig::new(2, 4);
        cfg.ccr_threshold = 2.0;
        let err = partition_network(&spec, &[8], &cfg, 0).unwrap_err();
        assert_eq!(err, PartitionError::UnreducedSplit { index: 2 });
    }

    #[test]
    fn partitioned_input_into_conv_is_an_error() {
        let spec = LayerSpec::Seq(vec![
            LayerSpec::Linear { in_dim: 8, out_dim: 8 },
            LayerSpec::Reshape { shape: vec![2, 2, 2] },
        ]);
        let err = partition_network(&spec, &[8], &PartitionConfig::new(2, 4), 0).unwrap_err();
        assert!(err.to_string().contains("Partitioned input unsupported"));
    }

    #[test]
    fn ccr_cases() {
        let fc0 = LayerSpec::Linear {
            in_dim: 4096,
            out_dim: 1024,
        };
        let ctx = PartitionContext::new(&[4096], PartitionConfig::new(2, 64), 0);
        let expected = 3.0 * 64.0 * 4096.0 * 1024.0 / (2.0 * 64.0 * 4096.0 * 0.5);
        assert_eq!(ccr(&fc0, 64, &ctx), expected);

        let mut shard_ctx = PartitionContext::new(&[1024], PartitionConfig::new(4, 8), 0);
        shard_ctx.dim = vec![256];
        let fc1 = LayerSpec::Linear {
            in_dim: 1024,
            out_dim: 1024,
        };
        assert_eq!(ccr(&fc1, 8, &shard_ctx), ccr(&fc1, 16, &shard_ctx));
        assert_eq!(ccr(&LayerSpec::Relu, 8, &ctx), 0.0);
    }

    #[test]
    fn plan_renders() {
        let cfg = PartitionConfig::new(2, 8);
        let net = partition_network(&vgg_variant_spec(), &VGG_INPUT, &cfg, 1).unwrap();
        let text = net.render();
        assert!(text.contains("MODULO"));
        assert!(text.contains("LINEAR 4096->512"));
        assert!(text.contains("512..1024 of 1024"));
    }
}
