use std::ops::Range;

use crate::fabric::{Fabric, OpDesc, Phase};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::RuntimeError;

/// Per-worker state of a SHARD layer: this worker's column range of the
/// full activation.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardState {
    pub dim: usize,
    pub dim_full: usize,
    pub group_size: usize,
    pub offset: usize,
    pending: bool,
}

impl ShardState {
    pub fn new(dim: usize, dim_full: usize, group_size: usize, offset: usize) -> Result<Self, RuntimeError> {
        if dim * group_size != dim_full || offset >= group_size {
            return Err(RuntimeError::Config(format!(
                "SHARD widths do not tile: {group_size} x {dim} != {dim_full}"
            )));
        }
        Ok(ShardState {
            dim,
            dim_full,
            group_size,
            offset,
            pending: false,
        })
    }

    /// Column range owned by each group member, in offset order.
    pub fn ranges(&self) -> Vec<Range<usize>> {
        (0..self.group_size).map(|m| m * self.dim..(m + 1) * self.dim).collect()
    }

    fn op(phase: Phase, layer: usize, k: usize) -> OpDesc {
        OpDesc::new(phase, format!("shard@{layer} k={k}"))
    }

    /// Scatters this worker's `[B, dim]` partial output to every peer and
    /// concatenates all members' partials into the `[B, dimF]` activation.
    pub fn fprop<T: Scalar>(
        &mut self,
        worker: usize,
        group: &[usize],
        layer: usize,
        iteration: usize,
        partial: &Tensor<T>,
        fabric: &Fabric<T>,
    ) -> Result<Tensor<T>, RuntimeError> {
        let (_, cols) = partial.matrix_dims("shard_fprop")?;
        if cols != self.dim {
            return Err(RuntimeError::Shape(format!(
                "SHARD expects partial width {}, got {}",
                self.dim,
                partial.shape()
            )));
        }
        self.pending = true;
        if self.group_size == 1 {
            return Ok(partial.clone());
        }
        let op = Self::op(Phase::ShardFprop, layer, iteration);
        let sends = group
            .iter()
            .filter(|&&g| g != worker)
            .map(|&g| (g, partial.data().to_vec()))
            .collect();
        let inbox = fabric
            .scatter_gather(worker, group, &op, sends)
            .map_err(|source| RuntimeError::Fabric { worker, source })?;
        let mut parts = Vec::with_capacity(group.len());
        let mut received = inbox.into_iter();
        for &g in group {
            if g == worker {
                parts.push(partial.clone());
            } else {
                let (_, data) = received.next().expect("one partial per peer");
                parts.push(Tensor::from_vec(partial.dims().to_vec(), data)?);
            }
        }
        Ok(Tensor::concat_cols(&parts)?)
    }

    /// Sends each peer the columns of `full_grad` it owns and returns the sum
    /// over all members of their `full_grad` restricted to this worker's
    /// range, summed in member order.
    pub fn bprop<T: Scalar>(
        &mut self,
        worker: usize,
        group: &[usize],
        layer: usize,
        iteration: usize,
        full_grad: &Tensor<T>,
        fabric: &Fabric<T>,
    ) -> Result<Tensor<T>, RuntimeError> {
        if !std::mem::take(&mut self.pending) {
            return Err(RuntimeError::NoForward { worker, layer });
        }
        let (_, cols) = full_grad.matrix_dims("shard_bprop")?;
        if cols != self.dim_full {
            return Err(RuntimeError::Shape(format!(
                "SHARD bprop expects width {}, got {}",
                self.dim_full,
                full_grad.shape()
            )));
        }
        if self.group_size == 1 {
            return Ok(full_grad.clone());
        }
        let ranges = self.ranges();
        let op = Self::op(Phase::ShardBprop, layer, iteration);
        let mut sends = Vec::with_capacity(group.len() - 1);
        for (m, &g) in group.iter().enumerate() {
            if g != worker {
                sends.push((g, full_grad.slice_cols(ranges[m].start, ranges[m].end)?.into_data()));
            }
        }
        let inbox = fabric
            .scatter_gather(worker, group, &op, sends)
            .map_err(|source| RuntimeError::Fabric { worker, source })?;
        let own_range = &ranges[self.offset];
        let own = full_grad.slice_cols(own_range.start, own_range.end)?;
        let mut acc = Tensor::zeros_like(&own);
        let mut received = inbox.into_iter();
        for &g in group {
            if g == worker {
                acc.add_assign(&own)?;
            } else {
                let (_, data) = received.next().expect("one slice per peer");
                acc.add_assign(&Tensor::from_vec(own.dims().to_vec(), data)?)?;
            }
        }
        Ok(acc)
    }
}
