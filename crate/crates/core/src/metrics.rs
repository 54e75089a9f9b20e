//! Parameter memory and communication volume accounting.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::fabric::{CommStats, Counter, Phase};
use crate::net::{LayerKind, LayerSpec};
use crate::partition::PartitionedNet;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("MP group size must be >= 1")]
    GroupSize,
    #[error("{layer}: {weights} weights are not divisible by MP group size {group_size}")]
    NotDivisible {
        layer: String,
        weights: usize,
        group_size: usize,
    },
    #[error("{phase} worker {worker} {field}: predicted {predicted}, measured {measured} (delta {delta})")]
    Mismatch {
        phase: Phase,
        worker: usize,
        field: &'static str,
        predicted: u64,
        measured: u64,
        delta: i128,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerMemory {
    /// `Conv0`, `FC1`, ...
    pub name: String,
    pub kind: LayerKind,
    /// Input x output channels or features.
    pub io: (usize, usize),
    pub weights: usize,
}

/// Weight counts of a network and their per-worker share under MP group
/// size `K` when every FC layer is split `1/K`. Biases are not counted.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryReport {
    pub group_size: usize,
    pub layers: Vec<LayerMemory>,
    pub conv_total: usize,
    pub fc_total: usize,
    pub per_worker: usize,
}

impl MemoryReport {
    pub fn total(&self) -> usize {
        self.conv_total + self.fc_total
    }

    pub fn fc_share_pct(&self) -> f64 {
        100.0 * self.fc_total as f64 / self.total() as f64
    }

    pub fn conv_share_pct(&self) -> f64 {
        100.0 * self.conv_total as f64 / self.total() as f64
    }

    pub fn savings_pct(&self) -> f64 {
        100.0 * (1.0 - self.per_worker as f64 / self.total() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,io,weights,percent\n");
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{},{}x{},{},{:.4}",
                l.name,
                l.io.0,
                l.io.1,
                l.weights,
                100.0 * l.weights as f64 / self.total() as f64
            );
        }
        let _ = writeln!(s, "conv_total,,{},{:.4}", self.conv_total, self.conv_share_pct());
        let _ = writeln!(s, "fc_total,,{},{:.4}", self.fc_total, self.fc_share_pct());
        let _ = writeln!(s, "per_worker_k{},,{},{:.4}", self.group_size, self.per_worker, 100.0 - self.savings_pct());
        s
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<7} {:>11} {:>12} {:>7}", "layer", "io", "weights", "%");
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{:<7} {:>11} {:>12} {:>7.2}",
                l.name,
                format!("{}x{}", l.io.0, l.io.1),
                l.weights,
                100.0 * l.weights as f64 / self.total() as f64
            );
        }
        let _ = writeln!(s, "conv total {} ({:.2}%), FC total {} ({:.2}%)", self.conv_total, self.conv_share_pct(), self.fc_total, self.fc_share_pct());
        let _ = writeln!(
            s,
            "K={}: per-worker weights {} = {} + {}/{}, saving {:.2}% vs K=1",
            self.group_size,
            self.per_worker,
            self.conv_total,
            self.fc_total,
            self.group_size,
            self.savings_pct()
        );
        s
    }
}

/// Weight-only memory of `spec` per worker when all FC layers are split
/// across `group_size` workers.
pub fn memory_report(spec: &LayerSpec, group_size: usize) -> Result<MemoryReport, MetricsError> {
    if group_size == 0 {
        return Err(MetricsError::GroupSize);
    }
    let mut layers = Vec::new();
    let (mut conv, mut fc) = (0, 0);
    for leaf in spec.leaves() {
        match *leaf {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                ..
            } => {
                let name = format!("Conv{}", layers.iter().filter(|l: &&LayerMemory| l.kind == LayerKind::Conv).count());
                conv += leaf.weight_count();
                layers.push(LayerMemory {
                    name,
                    kind: LayerKind::Conv,
                    io: (in_channels, out_channels),
                    weights: leaf.weight_count(),
                });
            }
            LayerSpec::Linear { in_dim, out_dim } => {
                let name = format!("FC{}", layers.iter().filter(|l| l.kind == LayerKind::Linear).count());
                let weights = leaf.weight_count();
                if weights % group_size != 0 {
                    return Err(MetricsError::NotDivisible {
                        layer: name,
                        weights,
                        group_size,
                    });
                }
                fc += weights;
                layers.push(LayerMemory {
                    name,
                    kind: LayerKind::Linear,
                    io: (in_dim, out_dim),
                    weights,
                });
            }
            _ => {}
        }
    }
    Ok(MemoryReport {
        group_size,
        layers,
        conv_total: conv,
        fc_total: fc,
        per_worker: conv + fc / group_size,
    })
}

/// Conv and FC weights one worker actually holds under a partition plan.
pub fn plan_weights(plan: &PartitionedNet) -> (usize, usize) {
    plan.layers.iter().fold((0, 0), |(c, f), l| match l.spec.kind() {
        LayerKind::Conv => (c + l.spec.weight_count(), f),
        LayerKind::Linear => (c, f + l.spec.weight_count()),
        _ => (c, f),
    })
}

/// Closed-form per-worker communication of a run. All workers of a run move
/// the same volume, so one set of counters describes every worker.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeModel {
    pub workers: usize,
    pub group_size: usize,
    pub batch: usize,
    pub avg_period: u64,
    pub steps: u64,
    /// MODULO/SHARD traffic of one train step.
    pub per_step: BTreeMap<Phase, Counter>,
    /// Traffic of one averaging event.
    pub per_average: Counter,
    pub averages: u64,
}

impl VolumeModel {
    /// Predicted counters of `phase` for any single worker over the run.
    pub fn per_worker(&self, phase: Phase) -> Counter {
        let (c, times) = match phase {
            Phase::DpAvg => (self.per_average, self.averages),
            p => (self.per_step.get(&p).copied().unwrap_or_default(), self.steps),
        };
        Counter {
            messages: c.messages * times,
            sent: c.sent * times,
            received: c.received * times,
        }
    }

    pub fn total(&self, phase: Phase) -> Counter {
        let c = self.per_worker(phase);
        let n = self.workers as u64;
        Counter {
            messages: c.messages * n,
            sent: c.sent * n,
            received: c.received * n,
        }
    }

    pub fn mp_scalars(&self) -> u64 {
        Phase::ALL.iter().filter(|p| p.is_mp()).map(|&p| self.total(p).sent).sum()
    }

    /// `phase,worker,messages,scalars` for every worker, matching
    /// [`CommStats::to_csv`] when the prediction holds.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("phase,worker,messages,scalars\n");
        for phase in Phase::ALL {
            let c = self.per_worker(phase);
            if c == Counter::default() {
                continue;
            }
            for w in 0..self.workers {
                let _ = writeln!(s, "{phase},{w},{},{}", c.messages, c.sent);
            }
        }
        s
    }
}

fn add(c: &mut Counter, messages: u64, sent: u64, received: u64) {
    c.messages += messages;
    c.sent += sent;
    c.received += received;
}

/// Predicts the fabric counters of `steps` live (or deferred) train steps.
///
/// Per step and worker, each of the `K` modulo iterations exchanges
/// `(K-1)*(B/K)*dimF` scalars in each direction at the MODULO layer, and each
/// SHARD layer sends `(K-1)*B*dim` and receives `B*(dimF-dim)` in fprop, with
/// the mirror image in bprop. An averaging event sends every unsplit
/// parameter to the `N-1` other workers and every split-shard parameter to
/// the `N/K-1` workers at the same group offset.
pub fn predict_volume(
    plan: &PartitionedNet,
    batch: usize,
    workers: usize,
    avg_period: u64,
    steps: u64,
    deferred: bool,
) -> VolumeModel {
    let k = plan.group_size as u64;
    let b = batch as u64;
    let n = workers as u64;
    let mut per_step: BTreeMap<Phase, Counter> = BTreeMap::new();
    let mut replicated = 0u64;
    let mut shards = 0u64;
    for l in &plan.layers {
        match l.spec {
            LayerSpec::Modulo { dim_full } if k > 1 => {
                let vol = k * (k - 1) * (b / k) * dim_full as u64;
                for p in [Phase::ModuloFprop, Phase::ModuloBprop] {
                    add(per_step.entry(p).or_default(), k * (k - 1), vol, vol);
                }
            }
            LayerSpec::Shard { dim, dim_full } if k > 1 => {
                let (dim, dim_full) = (dim as u64, dim_full as u64);
                let sent = k * (k - 1) * b * dim;
                let received = k * b * (dim_full - dim);
                add(per_step.entry(Phase::ShardFprop).or_default(), k * (k - 1), sent, received);
                add(per_step.entry(Phase::ShardBprop).or_default(), k * (k - 1), received, sent);
            }
            _ => {
                let params = l.spec.param_count() as u64;
                if l.owned_rows.is_some() {
                    shards += params;
                } else {
                    replicated += params;
                }
            }
        }
    }
    let mut per_average = Counter::default();
    for (params, peers) in [(replicated, n - 1), (shards, n / k - 1)] {
        if params > 0 && peers > 0 {
            add(&mut per_average, peers, params * peers, params * peers);
        }
    }
    VolumeModel {
        workers,
        group_size: plan.group_size,
        batch,
        avg_period,
        steps,
        per_step,
        per_average,
        averages: if deferred { 0 } else { steps / avg_period },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconcileRow {
    pub phase: Phase,
    pub worker: usize,
    pub predicted: Counter,
    pub measured: Counter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconcileReport {
    pub group_size: usize,
    pub rows: Vec<ReconcileRow>,
    pub cross_group_mp: u64,
}

impl ReconcileReport {
    pub fn mismatches(&self) -> Vec<MetricsError> {
        let mut out = Vec::new();
        for r in &self.rows {
            for (field, p, m) in [
                ("messages", r.predicted.messages, r.measured.messages),
                ("sent", r.predicted.sent, r.measured.sent),
                ("received", r.predicted.received, r.measured.received),
            ] {
                if p != m {
                    out.push(MetricsError::Mismatch {
                        phase: r.phase,
                        worker: r.worker,
                        field,
                        predicted: p,
                        measured: m,
                        delta: m as i128 - p as i128,
                    });
                }
            }
        }
        out
    }

    /// `Ok` when every counter matches exactly, otherwise the first mismatch.
    pub fn check(&self) -> Result<(), MetricsError> {
        match self.mismatches().into_iter().next() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "reconciliation, MP group size {}", self.group_size);
        let _ = writeln!(
            s,
            "{:<13} {:>6} {:>10} {:>14} {:>14} {:>6}",
            "phase", "worker", "messages", "predicted", "measured", "match"
        );
        for r in &self.rows {
            let ok = r.predicted == r.measured;
            let _ = writeln!(
                s,
                "{:<13} {:>6} {:>10} {:>14} {:>14} {:>6}",
                r.phase.name(),
                r.worker,
                r.measured.messages,
                r.predicted.sent,
                r.measured.sent,
                if ok { "yes" } else { "NO" }
            );
        }
        let _ = writeln!(s, "cross-group MODULO/SHARD scalars: {}", self.cross_group_mp);
        match self.check() {
            Ok(()) => s.push_str("result: exact match\n"),
            Err(e) => {
                let _ = writeln!(s, "result: MISMATCH {e}");
            }
        }
        s
    }
}

/// Compares the model against measured counters for every phase and worker.
pub fn reconcile(model: &VolumeModel, stats: &CommStats) -> ReconcileReport {
    let mut rows = Vec::new();
    for phase in Phase::ALL {
        for worker in 0..model.workers {
            rows.push(ReconcileRow {
                phase,
                worker,
                predicted: model.per_worker(phase),
                measured: stats.get(phase, worker),
            });
        }
    }
    let cross_group_mp = Phase::ALL
        .iter()
        .filter(|p| p.is_mp())
        .map(|&p| stats.cross_group(p, model.group_size))
        .sum();
    ReconcileReport {
        group_size: model.group_size,
        rows,
        cross_group_mp,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::vgg_variant_spec;
    use crate::partition::{partition_network, PartitionConfig};

    #[test]
    fn vgg_layer_weights() {
        let r = memory_report(&vgg_variant_spec(), 1).unwrap();
        let weights: Vec<usize> = r.layers.iter().map(|l| l.weights).collect();
        assert_eq!(
            weights,
            [1728, 36864, 73728, 147456, 294912, 589824, 589824, 4194304, 1048576, 10240]
        );
        assert_eq!(r.conv_total, 1_734_336);
        assert_eq!(r.fc_total, 5_253_120);
        assert_eq!(r.savings_pct(), 0.0);
        assert!((r.fc_share_pct() - 75.17).abs() < 0.01);
    }

    #[test]
    fn k8_savings() {
        let r = memory_report(&vgg_variant_spec(), 8).unwrap();
        assert_eq!(r.per_worker, 2_390_976);
        assert!((r.savings_pct() - 65.8).abs() < 0.1);
        assert!(memory_report(&vgg_variant_spec(), 3).is_err());
    }

    #[test]
    fn k1_predicts_no_mp_traffic() {
        let plan = partition_network(&vgg_variant_spec(), &[3, 32, 32], &PartitionConfig::new(1, 8), 0).unwrap();
        let m = predict_volume(&plan, 8, 4, 1, 3, false);
        assert_eq!(m.mp_scalars(), 0);
        assert_eq!(m.per_worker(Phase::DpAvg).sent, 3 * 3 * vgg_variant_spec().param_count() as u64);
    }

    #[test]
    fn modulo_receive_per_iteration() {
        let plan = partition_network(&vgg_variant_spec(), &[3, 32, 32], &PartitionConfig::new(2, 2), 0).unwrap();
        let m = predict_volume(&plan, 2, 2, 1, 1, false);
        // K=2 iterations, each receiving (B - B/K) * 4096 = 4096 scalars
        assert_eq!(m.per_worker(Phase::ModuloFprop).received, 2 * 4096);
    }

    #[test]
    fn doubling_avg_period_halves_dp_volume() {
        let plan = partition_network(&vgg_variant_spec(), &[3, 32, 32], &PartitionConfig::new(2, 8), 0).unwrap();
        let a = predict_volume(&plan, 8, 4, 1, 4, false).per_worker(Phase::DpAvg);
        let b = predict_volume(&plan, 8, 4, 2, 4, false).per_worker(Phase::DpAvg);
        assert_eq!(a.sent, 2 * b.sent);
        assert_eq!(predict_volume(&plan, 8, 4, 1, 4, true).per_worker(Phase::DpAvg).sent, 0);
    }

    #[test]
    fn reconcile_flags_delta() {
        let plan = partition_network(&vgg_variant_spec(), &[3, 32, 32], &PartitionConfig::new(1, 8), 0).unwrap();
        let m = predict_volume(&plan, 8, 1, 1, 1, false);
        assert!(reconcile(&m, &CommStats::default()).check().is_ok());
        let m = predict_volume(&plan, 8, 2, 1, 1, false);
        let err = reconcile(&m, &CommStats::default()).check().unwrap_err();
        assert!(err.to_string().contains("DP_AVG worker 0"), "{err}");
    }
}
