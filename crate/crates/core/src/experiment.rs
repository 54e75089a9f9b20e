//! Drives a configured run and writes its artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use thiserror::Error;

use crate::config::{ConfigError, DatasetSpec, Mode, RunConfig};
use crate::data::{epoch_shards, generate_synthetic, load_cifar10_binary, DataError, Dataset};
use crate::fabric::{CommStats, Phase};
use crate::metrics::{memory_report, plan_weights, predict_volume, reconcile, ReconcileReport};
use crate::net::{LayerSpec, Network};
use crate::partition::partition_network;
use crate::runtime::{Batch, Cluster, RuntimeConfig, RuntimeError};
use crate::scalar::{Scalar, ScalarWidth};
use crate::tensor::Tensor;

/// Relative tolerance of the deferred-update equivalence check.
pub const ORACLE_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error("oracle check failed: {0}")]
    Oracle(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl RunError {
    /// 1 configuration error, 2 oracle failure, 3 I/O error.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(ConfigError::Io { .. }) => 3,
            RunError::Config(_) | RunError::Runtime(_) => 1,
            RunError::Oracle(_) => 2,
            RunError::Data(_) | RunError::Io { .. } => 3,
        }
    }
}

fn write(out: &Path, name: &str, body: &str) -> Result<PathBuf, RunError> {
    let io = |source| RunError::Io {
        path: out.to_path_buf(),
        source,
    };
    fs::create_dir_all(out).map_err(io)?;
    let path = out.join(name);
    fs::write(&path, body).map_err(|source| RunError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

pub fn load_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset, RunError> {
    Ok(match spec {
        DatasetSpec::Synthetic { n, dims, classes } => generate_synthetic(*n, dims, *classes, seed),
        DatasetSpec::Cifar10 { path } => load_cifar10_binary(path)?,
    })
}

/// Files written by a run plus a short human summary.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub artifacts: Vec<PathBuf>,
    pub text: String,
}

/// Validates `cfg`, then runs its mode and writes artifacts under `cfg.out`.
pub fn run(cfg: &RunConfig) -> Result<RunSummary, RunError> {
    let (spec, dims) = cfg.validate()?;
    match cfg.mode {
        Mode::PlanOnly => plan_only(cfg, &spec, &dims),
        Mode::Train => match cfg.scalar {
            ScalarWidth::F32 => train_mode::<f32>(cfg, &spec, &dims),
            ScalarWidth::F64 => train_mode::<f64>(cfg, &spec, &dims),
        },
        Mode::OracleCheck => oracle_mode(cfg, &spec, &dims),
        Mode::VolumeSweep => match cfg.scalar {
            ScalarWidth::F32 => sweep_mode::<f32>(cfg, &spec, &dims),
            ScalarWidth::F64 => sweep_mode::<f64>(cfg, &spec, &dims),
        },
    }
}

fn plan_only(cfg: &RunConfig, spec: &LayerSpec, dims: &[usize]) -> Result<RunSummary, RunError> {
    let pcfg = cfg.runtime_config().partition_config();
    let mut text = String::new();
    for offset in 0..cfg.mp {
        let plan = partition_network(spec, dims, &pcfg, offset).map_err(RuntimeError::from)?;
        text.push_str(&plan.render());
        text.push('\n');
    }
    let path = write(&cfg.out, "plan.txt", &text)?;
    Ok(RunSummary {
        artifacts: vec![path],
        text,
    })
}

/// One row of the per-step CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRow {
    pub step: u64,
    pub worker: usize,
    pub loss: f64,
    pub images_per_sec: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub rows: Vec<StepRow>,
    pub steps: u64,
    pub stats: CommStats,
    /// Accuracy of MP group 0's assembled model on the whole training set.
    pub train_accuracy: f64,
}

impl TrainOutcome {
    pub fn csv(&self) -> String {
        let mut s = String::from("step,worker,loss,images_per_sec\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{:.9},{:.1}", r.step, r.worker, r.loss, r.images_per_sec);
        }
        s
    }

    /// Mean loss across workers per step.
    pub fn mean_losses(&self) -> Vec<f64> {
        let mut out: Vec<(f64, usize)> = vec![(0.0, 0); self.steps as usize];
        for r in &self.rows {
            out[r.step as usize].0 += r.loss;
            out[r.step as usize].1 += 1;
        }
        out.into_iter().map(|(s, n)| s / n as f64).collect()
    }
}

/// Fraction of `data` that `net` classifies correctly.
pub fn accuracy<T: Scalar>(net: &mut Network<T>, data: &Dataset) -> Result<f64, RuntimeError> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(256) {
        let b: Batch<T> = data.batch(chunk);
        let pred = net.predict(&b.inputs)?;
        correct += pred.iter().zip(&b.labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Trains on `data` with per-epoch shuffled, disjoint per-worker shards.
/// Runs `epochs` full passes, or exactly `steps` steps when given.
pub fn train<T: Scalar>(
    spec: &LayerSpec,
    input_shape: &[usize],
    rcfg: RuntimeConfig,
    data: &Dataset,
    epochs: u64,
    steps: Option<u64>,
    timing: bool,
) -> Result<TrainOutcome, RunError> {
    if data.is_empty() {
        return Err(ConfigError::Invalid("dataset is empty; nothing to train on".into()).into());
    }
    let (n, b) = (rcfg.workers, rcfg.batch);
    let per_epoch = (data.len() / n / b) as u64;
    if per_epoch == 0 {
        return Err(ConfigError::Invalid(format!(
            "{} examples cannot fill one batch of {b} on each of {n} workers",
            data.len()
        ))
        .into());
    }
    let seed = rcfg.seed;
    let mut cluster = Cluster::<T>::new(spec, input_shape, rcfg)?;
    let total = steps.unwrap_or(epochs * per_epoch);
    let mut rows = Vec::new();
    let mut step = 0u64;
    let mut epoch = 0u64;
    'outer: loop {
        let shards = epoch_shards(data.len(), n, epoch, seed);
        for s in 0..per_epoch as usize {
            if step >= total {
                break 'outer;
            }
            let batches: Vec<Batch<T>> = shards.iter().map(|sh| data.batch(&sh[s * b..(s + 1) * b])).collect();
            let t0 = Instant::now();
            let losses = cluster.train_step(&batches)?;
            let secs = t0.elapsed().as_secs_f64();
            let ips = if timing && secs > 0.0 { (n * b) as f64 / secs } else { 0.0 };
            for (worker, loss) in losses.into_iter().enumerate() {
                rows.push(StepRow {
                    step,
                    worker,
                    loss,
                    images_per_sec: ips,
                });
            }
            step += 1;
        }
        epoch += 1;
    }
    let mut net = cluster.assemble_network(0)?;
    Ok(TrainOutcome {
        rows,
        steps: step,
        stats: cluster.fabric().stats(),
        train_accuracy: accuracy(&mut net, data)?,
    })
}

fn train_mode<T: Scalar>(cfg: &RunConfig, spec: &LayerSpec, dims: &[usize]) -> Result<RunSummary, RunError> {
    let data = load_dataset(&cfg.dataset, cfg.seed)?;
    let outcome = train::<T>(spec, dims, cfg.runtime_config(), &data, cfg.epochs, cfg.steps, cfg.timing)?;
    let plan = partition_network(spec, dims, &cfg.runtime_config().partition_config(), 0).map_err(RuntimeError::from)?;
    let losses = outcome.mean_losses();
    let text = format!(
        "mode train: N={} K={} B={} scalar={} steps={}\nfirst loss {:.6}, last loss {:.6}\ntrain accuracy {:.4}\nimages_per_sec is desk-scale wall clock (0 unless timing = true), not a cluster throughput figure\n",
        cfg.workers,
        cfg.mp,
        cfg.batch,
        T::NAME,
        outcome.steps,
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN),
        outcome.train_accuracy
    );
    let artifacts = vec![
        write(&cfg.out, "steps.csv", &outcome.csv())?,
        write(&cfg.out, "comm_stats.csv", &outcome.stats.to_csv())?,
        write(&cfg.out, "plan.txt", &plan.render())?,
        write(&cfg.out, "summary.txt", &text)?,
    ];
    Ok(RunSummary { artifacts, text })
}

/// Largest relative errors of one deferred-update equivalence run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Equivalence {
    /// Worst conv-side gradient error against each worker's own batch.
    pub conv: f64,
    /// Worst FC gradient error against the group's union batch.
    pub fc: f64,
}

/// Runs one deferred, dropout-free step and compares the gradients with
/// single-model oracles: each worker's gradients below the MODULO layer
/// against a full model on that worker's batch, and each group's stacked FC
/// gradients (summed over the `K` iterations, hence divided by `K`) against a
/// full model on the concatenation of the group's batches.
pub fn deferred_equivalence(
    spec: &LayerSpec,
    input_shape: &[usize],
    mut rcfg: RuntimeConfig,
    batches: &[Batch<f64>],
) -> Result<Equivalence, RuntimeError> {
    rcfg.deferred = true;
    rcfg.dropout = false;
    let seed = rcfg.seed;
    let k = rcfg.group_size;
    let mut cluster = Cluster::<f64>::new(spec, input_shape, rcfg)?;
    cluster.train_step(batches)?;
    let plan = cluster.plan(0);
    let boundary = plan.modulo_index().unwrap_or(plan.layers.len());
    let is_upper = |leaf: usize| plan.origin_map[leaf].last().is_some_and(|&i| i > boundary);
    let leaves = plan.origin_map.len();

    let oracle = |b: &Batch<f64>| -> Result<Network<f64>, RuntimeError> {
        let mut net = Network::<f64>::from_spec(spec, input_shape, seed)?.with_dropout(false);
        net.fprop(&b.inputs)?;
        net.bprop(&b.labels)?;
        Ok(net)
    };
    let max_err = |a: Vec<&Tensor<f64>>, b: Vec<&Tensor<f64>>, scale: f64| -> Result<f64, RuntimeError> {
        let mut worst = 0.0f64;
        for (x, y) in a.into_iter().zip(b) {
            worst = worst.max(x.scale(scale).rel_err(y)?);
        }
        Ok(worst)
    };

    let mut conv = 0.0f64;
    for (w, b) in batches.iter().enumerate() {
        let net = oracle(b)?;
        for leaf in (0..leaves).filter(|&l| !is_upper(l)) {
            let got = cluster.leaf_layer(w, leaf).expect("leaf placed").grads();
            conv = conv.max(max_err(got, net.layers()[leaf].grads(), 1.0)?);
        }
    }

    let mut fc = 0.0f64;
    for g in 0..cluster.topology().groups() {
        let members = &batches[g * k..(g + 1) * k];
        let union = Batch {
            inputs: Tensor::concat_rows(&members.iter().map(|b| b.inputs.clone()).collect::<Vec<_>>())?,
            labels: members.iter().flat_map(|b| b.labels.iter().copied()).collect(),
        };
        let net = oracle(&union)?;
        let assembled = cluster.assemble_network(g)?;
        for leaf in (0..leaves).filter(|&l| is_upper(l)) {
            fc = fc.max(max_err(
                assembled.layers()[leaf].grads(),
                net.layers()[leaf].grads(),
                1.0 / k as f64,
            )?);
        }
    }
    Ok(Equivalence { conv, fc })
}

fn oracle_mode(cfg: &RunConfig, spec: &LayerSpec, dims: &[usize]) -> Result<RunSummary, RunError> {
    let data = load_dataset(&cfg.dataset, cfg.seed)?;
    let (n, b) = (cfg.workers, cfg.batch);
    if data.len() < n * b {
        return Err(ConfigError::Invalid(format!("oracle check needs {} examples, dataset has {}", n * b, data.len())).into());
    }
    let mut text = format!(
        "deferred-update equivalence, N={n} K={} B={b}, f64, tolerance {ORACLE_TOLERANCE:e}\nseed,conv_rel_err,fc_rel_err,pass\n",
        cfg.mp
    );
    let mut failed = Vec::new();
    for seed in cfg.seed..cfg.seed + 5 {
        let shards = epoch_shards(data.len(), n, seed, seed);
        let batches: Vec<Batch<f64>> = shards.iter().map(|s| data.batch(&s[..b])).collect();
        let mut rcfg = cfg.runtime_config();
        rcfg.seed = seed;
        let eq = deferred_equivalence(spec, dims, rcfg, &batches)?;
        let pass = eq.conv <= ORACLE_TOLERANCE && eq.fc <= ORACLE_TOLERANCE;
        let _ = writeln!(text, "{seed},{:e},{:e},{}", eq.conv, eq.fc, pass);
        if !pass {
            failed.push(seed);
        }
    }
    let path = write(&cfg.out, "oracle.txt", &text)?;
    if !failed.is_empty() {
        return Err(RunError::Oracle(format!("tolerance exceeded for seeds {failed:?}; see {}", path.display())));
    }
    Ok(RunSummary {
        artifacts: vec![path],
        text,
    })
}

/// Measured and predicted communication of one configuration.
#[derive(Debug, Clone)]
pub struct VolumeRun {
    pub group_size: usize,
    pub report: ReconcileReport,
    pub stats: CommStats,
    /// Conv and FC weights held by one worker.
    pub weights: (usize, usize),
}

/// Runs `steps` live train steps and reconciles the fabric counters with
/// the closed-form prediction.
pub fn measure_volume<T: Scalar>(
    spec: &LayerSpec,
    input_shape: &[usize],
    rcfg: RuntimeConfig,
    data: &Dataset,
    steps: u64,
) -> Result<VolumeRun, RunError> {
    let (n, b) = (rcfg.workers, rcfg.batch);
    let (avg, deferred) = (rcfg.avg_period, rcfg.deferred);
    let mut cluster = Cluster::<T>::new(spec, input_shape, rcfg)?;
    let per_epoch = data.len() / n / b;
    if per_epoch == 0 {
        return Err(ConfigError::Invalid(format!("{} examples cannot fill {n} batches of {b}", data.len())).into());
    }
    for s in 0..steps as usize {
        let shards = epoch_shards(data.len(), n, (s / per_epoch) as u64, cluster.config().seed);
        let i = s % per_epoch;
        let batches: Vec<Batch<T>> = shards.iter().map(|sh| data.batch(&sh[i * b..(i + 1) * b])).collect();
        cluster.train_step(&batches)?;
    }
    let plan = cluster.plan(0);
    let model = predict_volume(plan, b, n, avg, steps, deferred);
    let stats = cluster.fabric().stats();
    Ok(VolumeRun {
        group_size: plan.group_size,
        report: reconcile(&model, &stats),
        weights: plan_weights(plan),
        stats,
    })
}

fn sweep_mode<T: Scalar>(cfg: &RunConfig, spec: &LayerSpec, dims: &[usize]) -> Result<RunSummary, RunError> {
    let data = load_dataset(&cfg.dataset, cfg.seed)?;
    let steps = cfg.steps.unwrap_or(1);
    let mut volume = String::from("mp,phase,predicted_scalars,measured_scalars,messages\n");
    let mut memory = String::from("mp,conv_weights,fc_weights,per_worker_weights\n");
    let mut recon = String::new();
    let mut text = format!("volume sweep over MP group sizes dividing N={}, B={}, {steps} step(s)\n", cfg.workers, cfg.batch);
    let mut failures = Vec::new();
    for k in (1..=cfg.workers).filter(|k| cfg.workers % k == 0) {
        let mut c = cfg.clone();
        c.mp = k;
        if let Err(e) = c.validate() {
            let _ = writeln!(text, "K={k}: skipped ({e})");
            continue;
        }
        let run = measure_volume::<T>(spec, dims, c.runtime_config(), &data, steps)?;
        for phase in Phase::ALL {
            let predicted: u64 = run.report.rows.iter().filter(|r| r.phase == phase).map(|r| r.predicted.sent).sum();
            let t = run.stats.total(phase);
            let _ = writeln!(volume, "{k},{phase},{predicted},{},{}", t.sent, t.messages);
        }
        let (cw, fw) = run.weights;
        let _ = writeln!(memory, "{k},{cw},{fw},{}", cw + fw);
        recon.push_str(&run.report.render());
        recon.push('\n');
        let _ = writeln!(
            text,
            "K={k}: MP scalars {}, DP scalars {}, FC weights per worker {fw}, {}",
            run.stats.mp_scalars(),
            run.stats.total(Phase::DpAvg).sent,
            if run.report.check().is_ok() { "prediction exact" } else { "MISMATCH" }
        );
        if let Err(e) = run.report.check() {
            failures.push(format!("K={k}: {e}"));
        }
    }
    if let Ok(r) = memory_report(spec, 1) {
        recon.push_str(&r.render());
    }
    let artifacts = vec![
        write(&cfg.out, "volume_by_phase.csv", &volume)?,
        write(&cfg.out, "memory_report.csv", &memory)?,
        write(&cfg.out, "reconcile.txt", &recon)?,
    ];
    if !failures.is_empty() {
        return Err(RunError::Oracle(failures.join("; ")));
    }
    Ok(RunSummary { artifacts, text })
}
