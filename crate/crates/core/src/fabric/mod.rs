//! In-process message fabric shared by simulated workers.
//!
//! Every collective is a rendezvous among an explicit member list: each
//! member deposits its outgoing payloads, waits until all members have
//! arrived, and then takes its inbox. Rounds are matched by member list and a
//! per-worker sequence number, so members only need to issue the same
//! collectives in the same order. Each caller also passes an [`OpDesc`]; if
//! members disagree the round fails on every member instead of exchanging
//! mismatched data.

mod stats;

pub use stats::{CommStats, Counter, Phase};

use std::collections::HashMap;
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FabricError {
    #[error("collective mismatch: worker {worker_a} issued `{op_a}` while worker {worker_b} issued `{op_b}`")]
    Mismatch {
        worker_a: usize,
        op_a: String,
        worker_b: usize,
        op_b: String,
    },
    #[error("worker {worker} is not a member of group {group:?}")]
    NotMember { worker: usize, group: Vec<usize> },
    #[error("invalid group {0:?}: members must be sorted, distinct and < N")]
    InvalidGroup(Vec<usize>),
    #[error("worker {src} addressed {dst}, which is not another member of its group")]
    BadDestination { src: usize, dst: usize },
    #[error("fabric aborted by worker {worker}: {reason}")]
    Aborted { worker: usize, reason: String },
    #[error("worker {worker} timed out in `{op}` after {secs} s waiting for {missing:?}")]
    Timeout {
        worker: usize,
        op: String,
        secs: u64,
        missing: Vec<usize>,
    },
    #[error("{op}: contributions disagree in shape ({detail})")]
    Shape { op: String, detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Identity of a collective call, compared across members of a round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpDesc {
    pub phase: Phase,
    pub label: String,
}

impl OpDesc {
    pub fn new(phase: Phase, label: impl Into<String>) -> Self {
        OpDesc {
            phase,
            label: label.into(),
        }
    }
}

impl std::fmt::Display for OpDesc {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.phase, self.label)
    }
}

/// `N` workers in `N/K` MP groups of `K` consecutive ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Topology {
    pub workers: usize,
    pub group_size: usize,
}

impl Topology {
    pub fn new(workers: usize, group_size: usize) -> Result<Self, String> {
        if workers == 0 || group_size == 0 {
            return Err("worker count and MP group size must be >= 1".into());
        }
        if workers % group_size != 0 {
            return Err(format!(
                "MP group size {group_size} does not divide worker count {workers}"
            ));
        }
        Ok(Topology { workers, group_size })
    }

    pub fn groups(&self) -> usize {
        self.workers / self.group_size
    }

    pub fn gid(&self, worker: usize) -> usize {
        worker / self.group_size
    }

    pub fn offset(&self, worker: usize) -> usize {
        worker % self.group_size
    }

    /// Members of the MP group containing `worker`.
    pub fn group_of(&self, worker: usize) -> Vec<usize> {
        let g = self.gid(worker) * self.group_size;
        (g..g + self.group_size).collect()
    }

    /// Workers sharing `worker`'s offset, one per group.
    pub fn peers_at_offset(&self, worker: usize) -> Vec<usize> {
        let o = self.offset(worker);
        (0..self.groups()).map(|g| g * self.group_size + o).collect()
    }

    pub fn all(&self) -> Vec<usize> {
        (0..self.workers).collect()
    }
}

type Inbox<T> = Vec<(usize, Vec<T>)>;

struct Round<T> {
    ops: Vec<Option<OpDesc>>,
    inboxes: Vec<Inbox<T>>,
    arrived: usize,
    departed: usize,
}

struct State<T> {
    sequence: HashMap<(usize, Vec<usize>), u64>,
    rounds: HashMap<(Vec<usize>, u64), Round<T>>,
    aborted: Option<(usize, String)>,
    stats: CommStats,
}

pub struct Fabric<T> {
    workers: usize,
    timeout: Duration,
    state: Mutex<State<T>>,
    arrived: Condvar,
}

impl<T: Scalar> Fabric<T> {
    pub fn new(workers: usize) -> Self {
        Fabric {
            workers,
            timeout: Duration::from_secs(600),
            state: Mutex::new(State {
                sequence: HashMap::new(),
                rounds: HashMap::new(),
                aborted: None,
                stats: CommStats::default(),
            }),
            arrived: Condvar::new(),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    fn lock(&self) -> MutexGuard<'_, State<T>> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn stats(&self) -> CommStats {
        self.lock().stats.clone()
    }

    pub fn reset_stats(&self) {
        self.lock().stats.clear();
    }

    /// Fails every pending and future collective. Called by a worker that hit
    /// an error so its peers do not wait forever.
    pub fn abort(&self, worker: usize, reason: impl Into<String>) {
        let mut st = self.lock();
        if st.aborted.is_none() {
            st.aborted = Some((worker, reason.into()));
        }
        drop(st);
        self.arrived.notify_all();
    }

    pub fn is_aborted(&self) -> bool {
        self.lock().aborted.is_some()
    }

    fn check_group(&self, worker: usize, group: &[usize]) -> Result<usize, FabricError> {
        let valid = !group.is_empty()
            && group.windows(2).all(|w| w[0] < w[1])
            && group.last().is_some_and(|&g| g < self.workers);
        if !valid {
            return Err(FabricError::InvalidGroup(group.to_vec()));
        }
        group.binary_search(&worker).map_err(|_| FabricError::NotMember {
            worker,
            group: group.to_vec(),
        })
    }

    /// The exchange primitive: delivers each `(dst, payload)` to its member
    /// and returns what this worker received, ordered by sender. Empty
    /// payloads are not sent. With no sends at all this is a group barrier.
    pub fn scatter_gather(
        &self,
        worker: usize,
        group: &[usize],
        op: &OpDesc,
        sends: Vec<(usize, Vec<T>)>,
    ) -> Result<Vec<(usize, Vec<T>)>, FabricError> {
        let pos = self.check_group(worker, group)?;
        let mut targets = Vec::with_capacity(sends.len());
        for (dst, _) in &sends {
            match group.binary_search(dst) {
                Ok(p) if *dst != worker => targets.push(p),
                _ => return Err(FabricError::BadDestination { src: worker, dst: *dst }),
            }
        }

        let mut st = self.lock();
        if let Some((w, r)) = &st.aborted {
            return Err(FabricError::Aborted {
                worker: *w,
                reason: r.clone(),
            });
        }
        let seq = {
            let c = st.sequence.entry((worker, group.to_vec())).or_insert(0);
            *c += 1;
            *c - 1
        };
        let key = (group.to_vec(), seq);
        for (dst, payload) in &sends {
            if !payload.is_empty() {
                st.stats.record(op.phase, worker, *dst, payload.len() as u64);
            }
        }
        let n = group.len();
        let round = st.rounds.entry(key.clone()).or_insert_with(|| Round {
            ops: vec![None; n],
            inboxes: (0..n).map(|_| Vec::new()).collect(),
            arrived: 0,
            departed: 0,
        });
        round.ops[pos] = Some(op.clone());
        for ((_, payload), p) in sends.into_iter().zip(targets) {
            if !payload.is_empty() {
                round.inboxes[p].push((worker, payload));
            }
        }
        round.arrived += 1;
        if round.arrived == n {
            self.arrived.notify_all();
        }

        let deadline = Instant::now() + self.timeout;
        loop {
            if let Some((w, r)) = &st.aborted {
                return Err(FabricError::Aborted {
                    worker: *w,
                    reason: r.clone(),
                });
            }
            if st.rounds[&key].arrived == n {
                break;
            }
            let now = Instant::now();
            if now >= deadline {
                let round = &st.rounds[&key];
                let missing: Vec<usize> = group
                    .iter()
                    .zip(&round.ops)
                    .filter(|(_, o)| o.is_none())
                    .map(|(&g, _)| g)
                    .collect();
                let err = FabricError::Timeout {
                    worker,
                    op: op.to_string(),
                    secs: self.timeout.as_secs(),
                    missing,
                };
                st.aborted = Some((worker, err.to_string()));
                drop(st);
                self.arrived.notify_all();
                return Err(err);
            }
            st = self
                .arrived
                .wait_timeout(st, deadline - now)
                .unwrap_or_else(|p| p.into_inner())
                .0;
        }

        let round = st.rounds.get_mut(&key).expect("round present until all depart");
        let mismatch = round
            .ops
            .iter()
            .enumerate()
            .find(|(_, o)| o.as_ref() != round.ops[0].as_ref())
            .map(|(i, o)| (i, o.clone().expect("all arrived")));
        let mut inbox = std::mem::take(&mut round.inboxes[pos]);
        round.departed += 1;
        let first = round.ops[0].clone().expect("all arrived");
        if round.departed == n {
            st.rounds.remove(&key);
        }
        if let Some((i, other)) = mismatch {
            return Err(FabricError::Mismatch {
                worker_a: group[0],
                op_a: first.to_string(),
                worker_b: group[i],
                op_b: other.to_string(),
            });
        }
        inbox.sort_by_key(|(src, _)| *src);
        Ok(inbox)
    }

    pub fn barrier(&self, worker: usize, group: &[usize], op: &OpDesc) -> Result<(), FabricError> {
        self.scatter_gather(worker, group, op, Vec::new()).map(|_| ())
    }

    /// Elementwise sum of every member's `contribution`, delivered to `owner`
    /// (returned as `Some` there, `None` elsewhere). Summation runs in member
    /// order regardless of arrival order.
    pub fn reduce_sum(
        &self,
        worker: usize,
        group: &[usize],
        owner: usize,
        op: &OpDesc,
        contribution: &Tensor<T>,
    ) -> Result<Option<Tensor<T>>, FabricError> {
        if group.binary_search(&owner).is_err() {
            return Err(FabricError::NotMember {
                worker: owner,
                group: group.to_vec(),
            });
        }
        let sends = if worker == owner {
            Vec::new()
        } else {
            vec![(owner, contribution.data().to_vec())]
        };
        let inbox = self.scatter_gather(worker, group, op, sends)?;
        if worker != owner {
            return Ok(None);
        }
        let parts = merge_own(worker, contribution.data(), inbox);
        Ok(Some(sum_in_order(op, contribution, parts)?))
    }

    /// Every member ends with the arithmetic mean of all members' tensors.
    /// Each member sends its tensor to every other member and sums locally in
    /// member order, so all members hold bit-identical results.
    pub fn all_average(
        &self,
        worker: usize,
        group: &[usize],
        op: &OpDesc,
        tensor: &Tensor<T>,
    ) -> Result<Tensor<T>, FabricError> {
        let sends = group
            .iter()
            .filter(|&&g| g != worker)
            .map(|&g| (g, tensor.data().to_vec()))
            .collect();
        let inbox = self.scatter_gather(worker, group, op, sends)?;
        let parts = merge_own(worker, tensor.data(), inbox);
        let mut sum = sum_in_order(op, tensor, parts)?;
        sum.div_scalar_assign(T::of(group.len() as f64));
        Ok(sum)
    }
}

fn merge_own<T: Scalar>(worker: usize, own: &[T], mut inbox: Vec<(usize, Vec<T>)>) -> Vec<(usize, Vec<T>)> {
    inbox.push((worker, own.to_vec()));
    inbox.sort_by_key(|(src, _)| *src);
    inbox
}

fn sum_in_order<T: Scalar>(
    op: &OpDesc,
    like: &Tensor<T>,
    parts: Vec<(usize, Vec<T>)>,
) -> Result<Tensor<T>, FabricError> {
    let mut acc = vec![T::zero(); like.len()];
    for (src, p) in parts {
        if p.len() != acc.len() {
            return Err(FabricError::Shape {
                op: op.to_string(),
                detail: format!("worker {src} sent {} scalars, expected {}", p.len(), acc.len()),
            });
        }
        for (a, v) in acc.iter_mut().zip(p) {
            *a = *a + v;
        }
    }
    Ok(Tensor::from_vec(like.dims().to_vec(), acc)?)
}
