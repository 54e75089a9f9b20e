use std::ops::Range;

use crate::fabric::{Fabric, OpDesc, Phase};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::RuntimeError;

/// Worker holding batch slot `b` of the assembled batch at a MODULO layer.
///
/// Slot `b` belongs to group member `b / (B/K)`. Without GMP the whole
/// cluster is one group (`K == N`) and that member index is the worker id;
/// with GMP the index is offset by the caller's group base `gid * K`.
pub fn modulo_slot_owner(b: usize, batch: usize, group_size: usize, worker: usize, workers: usize, gmp: bool) -> usize {
    debug_assert!(b < batch && worker < workers && batch % group_size == 0);
    let remote = b / (batch / group_size);
    if gmp {
        (worker / group_size) * group_size + remote
    } else {
        remote
    }
}

/// Local examples a worker contributes at modulo iteration `k`.
pub fn local_subset(k: usize, batch: usize, group_size: usize) -> Range<usize> {
    let size = batch / group_size;
    k * size..(k + 1) * size
}

/// Per-worker state of the MODULO layer: which of the `K` iterations comes
/// next and the gradient of the local batch collected so far.
#[derive(Debug, Clone)]
pub struct ModuloState<T> {
    pub group_size: usize,
    pub batch: usize,
    pub dim_full: usize,
    iteration: usize,
    pending: Option<usize>,
    accumulator: Option<Tensor<T>>,
    filled: usize,
}

impl<T: Scalar> ModuloState<T> {
    pub fn new(batch: usize, group_size: usize, dim_full: usize) -> Result<Self, RuntimeError> {
        if group_size == 0 || batch == 0 || batch % group_size != 0 {
            return Err(RuntimeError::Config(format!(
                "batch size {batch} is not a positive multiple of MP group size {group_size}"
            )));
        }
        Ok(ModuloState {
            group_size,
            batch,
            dim_full,
            iteration: 0,
            pending: None,
            accumulator: None,
            filled: 0,
        })
    }

    pub fn slot_width(&self) -> usize {
        self.batch / self.group_size
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    fn op(&self, phase: Phase, layer: usize, k: usize) -> OpDesc {
        OpDesc::new(phase, format!("modulo@{layer} k={k}"))
    }

    /// Assembles the batch for iteration `k`: slot block `j` holds group
    /// member `j`'s local examples `[k*B/K, (k+1)*B/K)`.
    pub fn fprop(
        &mut self,
        worker: usize,
        group: &[usize],
        layer: usize,
        local: &Tensor<T>,
        fabric: &Fabric<T>,
    ) -> Result<Tensor<T>, RuntimeError> {
        if local.dims()[0] != self.batch || local.len() != self.batch * self.dim_full {
            return Err(RuntimeError::Shape(format!(
                "MODULO expects {} examples of width {}, got {}",
                self.batch,
                self.dim_full,
                local.shape()
            )));
        }
        let k = self.iteration;
        let rows = local_subset(k, self.batch, self.group_size);
        let mine = local.slice_rows(rows.start, rows.end)?;
        self.pending = Some(k);
        if self.group_size == 1 {
            return Ok(mine);
        }
        let op = self.op(Phase::ModuloFprop, layer, k);
        let sends = group
            .iter()
            .filter(|&&g| g != worker)
            .map(|&g| (g, mine.data().to_vec()))
            .collect();
        let inbox = fabric
            .scatter_gather(worker, group, &op, sends)
            .map_err(|source| RuntimeError::Fabric { worker, source })?;
        let mut blocks = Vec::with_capacity(self.group_size);
        let mut received = inbox.into_iter();
        for &g in group {
            if g == worker {
                blocks.push(mine.clone());
            } else {
                let (_, data) = received.next().expect("one block per peer");
                blocks.push(Tensor::from_vec(mine.dims().to_vec(), data)?);
            }
        }
        Ok(Tensor::concat_rows(&blocks)?)
    }

    /// Sends each peer the gradient rows of its slot block, sums the blocks
    /// received for this worker's own slot (member order) and stores the
    /// result at local rows `[k*B/K, (k+1)*B/K)`. Returns that block.
    pub fn bprop(
        &mut self,
        worker: usize,
        group: &[usize],
        layer: usize,
        grad: &Tensor<T>,
        fabric: &Fabric<T>,
    ) -> Result<Tensor<T>, RuntimeError> {
        let k = self.pending.take().ok_or(RuntimeError::NoForward { worker, layer })?;
        if grad.dims()[0] != self.batch {
            return Err(RuntimeError::Shape(format!(
                "MODULO bprop expects {} rows, got {}",
                self.batch,
                grad.shape()
            )));
        }
        let size = self.slot_width();
        let pos = group.iter().position(|&g| g == worker).expect("caller is a member");
        let block = |j: usize| grad.slice_rows(j * size, (j + 1) * size);
        let reduced = if self.group_size == 1 {
            grad.clone()
        } else {
            let op = self.op(Phase::ModuloBprop, layer, k);
            let mut sends = Vec::with_capacity(group.len() - 1);
            for (j, &g) in group.iter().enumerate() {
                if g != worker {
                    sends.push((g, block(j)?.into_data()));
                }
            }
            let inbox = fabric
                .scatter_gather(worker, group, &op, sends)
                .map_err(|source| RuntimeError::Fabric { worker, source })?;
            let own = block(pos)?;
            let mut acc = Tensor::zeros_like(&own);
            let mut received = inbox.into_iter();
            for &g in group {
                if g == worker {
                    acc.add_assign(&own)?;
                } else {
                    let (_, data) = received.next().expect("one block per peer");
                    acc.add_assign(&Tensor::from_vec(own.dims().to_vec(), data)?)?;
                }
            }
            acc
        };

        let acc = match &mut self.accumulator {
            Some(a) => a,
            slot => {
                let mut dims = reduced.dims().to_vec();
                dims[0] = self.batch;
                slot.insert(Tensor::zeros(dims)?)
            }
        };
        let row = reduced.len() / size;
        acc.data_mut()[k * size * row..(k + 1) * size * row].copy_from_slice(reduced.data());
        self.filled += 1;
        self.iteration = (self.iteration + 1) % self.group_size;
        Ok(reduced)
    }

    /// The gradient of the full local batch once all `K` iterations have
    /// completed; `None` before that.
    pub fn take_local_gradient(&mut self) -> Option<Tensor<T>> {
        if self.filled < self.group_size {
            return None;
        }
        self.filled = 0;
        self.accumulator.take()
    }

    pub fn reset(&mut self) {
        self.iteration = 0;
        self.pending = None;
        self.accumulator = None;
        self.filled = 0;
    }
}
