//! Declarative layer descriptions and their text form.

use std::fmt;

use super::NetError;
use crate::tensor::window_extent;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Seq,
    Reshape,
    Pad,
    Conv,
    Pooling,
    Dropout,
    Relu,
    Linear,
    LogSoftmax,
    Modulo,
    Shard,
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LayerKind::Seq => "SEQ",
            LayerKind::Reshape => "RESHAPE",
            LayerKind::Pad => "PAD",
            LayerKind::Conv => "CONV",
            LayerKind::Pooling => "POOLING",
            LayerKind::Dropout => "DROPOUT",
            LayerKind::Relu => "RELU",
            LayerKind::Linear => "LINEAR",
            LayerKind::LogSoftmax => "LOG_SOFTMAX",
            LayerKind::Modulo => "MODULO",
            LayerKind::Shard => "SHARD",
        };
        f.write_str(s)
    }
}

/// One layer of a sequential network. `Modulo` and `Shard` are communication
/// layers that only the partitioner inserts.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Seq(Vec<LayerSpec>),
    /// Reshapes each example (the batch axis is kept) to `shape`.
    Reshape { shape: Vec<usize> },
    /// Zero padding of both spatial axes.
    Pad { pad: usize },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Pooling { window: usize, stride: usize },
    Dropout { keep_prob: f64 },
    Relu,
    Linear { in_dim: usize, out_dim: usize },
    LogSoftmax,
    Modulo { dim_full: usize },
    Shard { dim: usize, dim_full: usize },
}

impl LayerSpec {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerSpec::Seq(_) => LayerKind::Seq,
            LayerSpec::Reshape { .. } => LayerKind::Reshape,
            LayerSpec::Pad { .. } => LayerKind::Pad,
            LayerSpec::Conv { .. } => LayerKind::Conv,
            LayerSpec::Pooling { .. } => LayerKind::Pooling,
            LayerSpec::Dropout { .. } => LayerKind::Dropout,
            LayerSpec::Relu => LayerKind::Relu,
            LayerSpec::Linear { .. } => LayerKind::Linear,
            LayerSpec::LogSoftmax => LayerKind::LogSoftmax,
            LayerSpec::Modulo { .. } => LayerKind::Modulo,
            LayerSpec::Shard { .. } => LayerKind::Shard,
        }
    }

    /// Leaf layers in execution order (SEQ containers flattened).
    pub fn leaves(&self) -> Vec<&LayerSpec> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<&'a LayerSpec>) {
        match self {
            LayerSpec::Seq(children) => children.iter().for_each(|c| c.collect_leaves(out)),
            leaf => out.push(leaf),
        }
    }

    pub fn is_comm(&self) -> bool {
        matches!(self, LayerSpec::Modulo { .. } | LayerSpec::Shard { .. })
    }

    /// Weight count, bias excluded.
    pub fn weight_count(&self) -> usize {
        match self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => in_channels * out_channels * kernel * kernel,
            LayerSpec::Linear { in_dim, out_dim } => in_dim * out_dim,
            LayerSpec::Seq(c) => c.iter().map(LayerSpec::weight_count).sum(),
            _ => 0,
        }
    }

    pub fn bias_count(&self) -> usize {
        match self {
            LayerSpec::Conv { out_channels, .. } => *out_channels,
            LayerSpec::Linear { out_dim, .. } => *out_dim,
            LayerSpec::Seq(c) => c.iter().map(LayerSpec::bias_count).sum(),
            _ => 0,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + self.bias_count()
    }

    /// Per-example output shape for a per-example input shape.
    pub fn resize(&self, input: &[usize]) -> Result<Vec<usize>, NetError> {
        let bad = |msg: String| NetError::InvalidSpec(format!("{}: {msg}", self.kind()));
        let numel: usize = input.iter().product();
        match self {
            LayerSpec::Seq(children) => {
                let mut shape = input.to_vec();
                for c in children {
                    shape = c.resize(&shape)?;
                }
                Ok(shape)
            }
            LayerSpec::Reshape { shape } => {
                if shape.iter().product::<usize>() != numel || shape.contains(&0) {
                    return Err(bad(format!("cannot reshape {input:?} to {shape:?}")));
                }
                Ok(shape.clone())
            }
            LayerSpec::Pad { pad } => match input {
                [c, h, w] => Ok(vec![*c, h + 2 * pad, w + 2 * pad]),
                _ => Err(bad(format!("expects (C,H,W) input, got {input:?}"))),
            },
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
            } => match input {
                [c, h, w] if c == in_channels => {
                    let ho = window_extent("conv2d", "height", *h, *kernel, *stride, *pad)
                        .map_err(|e| bad(e.to_string()))?;
                    let wo = window_extent("conv2d", "width", *w, *kernel, *stride, *pad)
                        .map_err(|e| bad(e.to_string()))?;
                    Ok(vec![*out_channels, ho, wo])
                }
                _ => Err(bad(format!("expects ({in_channels},H,W) input, got {input:?}"))),
            },
            LayerSpec::Pooling { window, stride } => match input {
                [c, h, w] => {
                    let ho = window_extent("maxpool2d", "height", *h, *window, *stride, 0)
                        .map_err(|e| bad(e.to_string()))?;
                    let wo = window_extent("maxpool2d", "width", *w, *window, *stride, 0)
                        .map_err(|e| bad(e.to_string()))?;
                    Ok(vec![*c, ho, wo])
                }
                _ => Err(bad(format!("expects (C,H,W) input, got {input:?}"))),
            },
            LayerSpec::Dropout { keep_prob } => {
                if !(*keep_prob > 0.0 && *keep_prob <= 1.0) {
                    return Err(bad(format!("keep probability {keep_prob} outside (0, 1]")));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Linear { in_dim, out_dim } => match input {
                [d] if d == in_dim && *out_dim > 0 => Ok(vec![*out_dim]),
                _ => Err(bad(format!("expects ({in_dim}) input, got {input:?}"))),
            },
            LayerSpec::LogSoftmax => match input {
                [_] => Ok(input.to_vec()),
                _ => Err(bad(format!("expects a flat input, got {input:?}"))),
            },
            LayerSpec::Modulo { dim_full } => match input {
                [d] if d == dim_full => Ok(input.to_vec()),
                _ => Err(bad(format!("expects ({dim_full}) input, got {input:?}"))),
            },
            LayerSpec::Shard { dim, dim_full } => match input {
                [d] if d == dim => Ok(vec![*dim_full]),
                _ => Err(bad(format!("expects ({dim}) input, got {input:?}"))),
            },
        }
    }

    /// Parses the line-oriented layer format, one leaf per line:
    ///
    /// ```text
    /// conv in=3 out=16 kernel=3 stride=1 pad=1
    /// relu
    /// pool window=2 stride=2
    /// reshape shape=1024
    /// linear in=1024 out=10
    /// log_softmax
    /// ```
    ///
    /// Blank lines and `#` comments are ignored. The result is a `Seq`.
    pub fn parse_layers(text: &str) -> Result<LayerSpec, NetError> {
        let mut layers = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            layers.push(parse_line(line).map_err(|msg| {
                NetError::InvalidSpec(format!("line {}: {msg}", lineno + 1))
            })?);
        }
        if layers.is_empty() {
            return Err(NetError::InvalidSpec("network description has no layers".into()));
        }
        Ok(LayerSpec::Seq(layers))
    }
}

fn parse_line(line: &str) -> Result<LayerSpec, String> {
    let mut tokens = line.split_whitespace();
    let name = tokens.next().ok_or("empty line")?.to_ascii_lowercase();
    let mut kv = Vec::new();
    for tok in tokens {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| format!("expected key=value, got `{tok}`"))?;
        kv.push((k.to_string(), v.to_string()));
    }
    let get = |key: &str| -> Result<&str, String> {
        kv.iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| format!("`{name}` needs `{key}=`"))
    };
    let num = |key: &str| -> Result<usize, String> {
        get(key)?
            .parse()
            .map_err(|_| format!("`{key}` must be a non-negative integer"))
    };
    let num_or = |key: &str, default: usize| -> Result<usize, String> {
        if kv.iter().any(|(k, _)| k == key) {
            num(key)
        } else {
            Ok(default)
        }
    };
    match name.as_str() {
        "conv" => Ok(LayerSpec::Conv {
            in_channels: num("in")?,
            out_channels: num("out")?,
            kernel: num("kernel")?,
            stride: num_or("stride", 1)?,
            pad: num_or("pad", 0)?,
        }),
        "pool" | "pooling" => {
            let window = num("window")?;
            Ok(LayerSpec::Pooling {
                window,
                stride: num_or("stride", window)?,
            })
        }
        "pad" => Ok(LayerSpec::Pad { pad: num("pad")? }),
        "relu" => Ok(LayerSpec::Relu),
        "dropout" => Ok(LayerSpec::Dropout {
            keep_prob: get("keep")?
                .parse()
                .map_err(|_| "`keep` must be a number".to_string())?,
        }),
        "reshape" => {
            let shape = get("shape")?
                .split('x')
                .map(|p| p.parse::<usize>().map_err(|_| format!("bad extent `{p}`")))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(LayerSpec::Reshape { shape })
        }
        "linear" => Ok(LayerSpec::Linear {
            in_dim: num("in")?,
            out_dim: num("out")?,
        }),
        "log_softmax" => Ok(LayerSpec::LogSoftmax),
        "modulo" | "shard" => Err(format!("`{name}` layers are inserted by the partitioner only")),
        other => Err(format!("unknown layer `{other}`")),
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Seq(children) => {
                for (i, c) in children.iter().enumerate() {
                    if i > 0 {
                        writeln!(f)?;
                    }
                    write!(f, "{c}")?;
                }
                Ok(())
            }
            LayerSpec::Reshape { shape } => {
                let s: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
                write!(f, "reshape shape={}", s.join("x"))
            }
            LayerSpec::Pad { pad } => write!(f, "pad pad={pad}"),
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
            } => write!(
                f,
                "conv in={in_channels} out={out_channels} kernel={kernel} stride={stride} pad={pad}"
            ),
            LayerSpec::Pooling { window, stride } => write!(f, "pool window={window} stride={stride}"),
            LayerSpec::Dropout { keep_prob } => write!(f, "dropout keep={keep_prob}"),
            LayerSpec::Relu => write!(f, "relu"),
            LayerSpec::Linear { in_dim, out_dim } => write!(f, "linear in={in_dim} out={out_dim}"),
            LayerSpec::LogSoftmax => write!(f, "log_softmax"),
            LayerSpec::Modulo { dim_full } => write!(f, "modulo dim_full={dim_full}"),
            LayerSpec::Shard { dim, dim_full } => write!(f, "shard dim={dim} dim_full={dim_full}"),
        }
    }
}
