//! Deterministic mini-batch training with an optional entropy-change
//! regularizer, and the run logs it produces.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::datagen::{Dataset, DatasetHandle, Split};
use crate::eloss::ElossWeights;
use crate::entropy::{EntropyConfig, DEFAULT_EPSILON};
use crate::error::{Error, Result};
use crate::net::RepeatedBlockNet;
use crate::optim::{Optimizer, OptimizerConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Losses above this (or non-finite) abort the run.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

const EVAL_CHUNK: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    #[serde(default = "defaults::lambda1")]
    pub lambda1: f64,
    #[serde(default = "defaults::lambda2")]
    pub lambda2: f64,
    #[serde(default = "defaults::coverage")]
    pub eloss_coverage: usize,
    #[serde(default = "defaults::k")]
    pub k: usize,
    #[serde(default = "defaults::task")]
    pub task: String,
    /// Let the regularizer's gradient reach the stem as well as the blocks.
    #[serde(default)]
    pub eloss_into_stem: bool,
    #[serde(default = "defaults::epsilon")]
    pub epsilon: f64,
}

mod defaults {
    pub fn epochs() -> usize {
        30
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn alpha() -> f64 {
        0.01
    }
    pub fn lambda1() -> f64 {
        1.0
    }
    pub fn lambda2() -> f64 {
        0.1
    }
    pub fn coverage() -> usize {
        3
    }
    pub fn k() -> usize {
        1
    }
    pub fn task() -> String {
        crate::datagen::GRIDMAP_CONV.into()
    }
    pub fn epsilon() -> f64 {
        super::DEFAULT_EPSILON
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: defaults::epochs(),
            batch_size: defaults::batch_size(),
            seed: 0,
            optimizer: OptimizerConfig::default(),
            alpha: defaults::alpha(),
            lambda1: defaults::lambda1(),
            lambda2: defaults::lambda2(),
            eloss_coverage: defaults::coverage(),
            k: defaults::k(),
            task: defaults::task(),
            eloss_into_stem: false,
            epsilon: defaults::epsilon(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        self.optimizer.validate()?;
        ElossWeights::new(self.lambda1, self.lambda2)?;
        EntropyConfig::new(self.epsilon)?;
        Ok(())
    }

    pub fn validate_for(&self, net: &RepeatedBlockNet) -> Result<()> {
        self.validate()?;
        if self.eloss_coverage > net.block_count() {
            return Err(Error::Config(format!(
                "eloss_coverage {} exceeds block count {}",
                self.eloss_coverage,
                net.block_count()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub epoch: usize,
    pub batch: usize,
    pub task_loss: f64,
    pub eloss_l1: Option<f64>,
    pub eloss_l2: Option<f64>,
    pub eloss_combined: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub task_loss: f64,
    pub eloss_l1: Option<f64>,
    pub eloss_l2: Option<f64>,
    /// Validation accuracy in [0, 1].
    pub validation_metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Continuation {
    pub from_epoch: usize,
    pub extra_epochs: usize,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogEntry {
    Batch(BatchRecord),
    Epoch(EpochRecord),
    Continuation(Continuation),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged { epoch: usize, batch: usize, loss: Option<f64> },
}

/// Wall-clock measurements. Kept apart from the log so that logs of
/// identical runs are byte-identical.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub epoch_ms: Vec<f64>,
    pub train_ms: f64,
    pub steps: usize,
}

impl Timing {
    pub fn ms_per_step(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.train_ms / self.steps as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub config: TrainConfig,
    pub dataset: Option<DatasetHandle>,
    pub entries: Vec<LogEntry>,
    pub status: RunStatus,
    pub timing: Timing,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename = "config")]
struct ConfigLine {
    config: TrainConfig,
    dataset: Option<DatasetHandle>,
}

impl RunLog {
    fn new(config: TrainConfig, dataset: Option<DatasetHandle>) -> Self {
        Self { config, dataset, entries: Vec::new(), status: RunStatus::Completed, timing: Timing::default() }
    }

    pub fn epochs(&self) -> impl Iterator<Item = &EpochRecord> {
        self.entries.iter().filter_map(|e| match e {
            LogEntry::Epoch(r) => Some(r),
            _ => None,
        })
    }

    pub fn batches(&self) -> impl Iterator<Item = &BatchRecord> {
        self.entries.iter().filter_map(|e| match e {
            LogEntry::Batch(r) => Some(r),
            _ => None,
        })
    }

    pub fn last_epoch(&self) -> usize {
        self.epochs().last().map_or(0, |r| r.epoch)
    }

    pub fn is_diverged(&self) -> bool {
        matches!(self.status, RunStatus::Diverged { .. })
    }

    /// Validation metric per epoch, as (epoch, value) pairs.
    pub fn validation_curve(&self) -> Vec<(usize, f64)> {
        self.epochs().map(|r| (r.epoch, r.validation_metric)).collect()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = Vec::new();
        let head = ConfigLine { config: self.config.clone(), dataset: self.dataset.clone() };
        serde_json::to_writer(&mut out, &head)?;
        out.push(b'\n');
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.push(b'\n');
        }
        // The status enum carries its own tag, so wrap it by hand.
        let mut end = serde_json::to_value(&self.status)?;
        end.as_object_mut()
            .expect("status serializes to an object")
            .insert("record".into(), "end".into());
        serde_json::to_writer(&mut out, &end)?;
        out.push(b'\n');
        Ok(String::from_utf8(out).expect("serde_json emits utf-8"))
    }

    pub fn from_jsonl(s: &str) -> Result<Self> {
        let mut lines = s.lines().filter(|l| !l.trim().is_empty());
        let first = lines.next().ok_or_else(|| Error::InsufficientData("empty run log".into()))?;
        let head: ConfigLine = serde_json::from_str(first)
            .map_err(|e| Error::Contract(format!("run log must start with a config record: {e}")))?;
        let mut log = RunLog::new(head.config, head.dataset);
        let mut ended = false;
        for line in lines {
            if ended {
                return Err(Error::Contract("records after end of run log".into()));
            }
            let mut v: serde_json::Value = serde_json::from_str(line)?;
            if v.get("record").and_then(|r| r.as_str()) == Some("end") {
                v.as_object_mut().expect("object").remove("record");
                log.status = serde_json::from_value(v)?;
                ended = true;
            } else {
                log.entries.push(serde_json::from_value(v)?);
            }
        }
        if !ended {
            return Err(Error::Contract("run log has no end record".into()));
        }
        let mut prev = 0;
        for r in log.epochs() {
            if r.epoch <= prev {
                return Err(Error::Contract("epoch numbering is not increasing".into()));
            }
            prev = r.epoch;
        }
        Ok(log)
    }

    /// `epoch,task_loss,eloss_l1,eloss_l2,validation_metric`; missing values
    /// are written as `-`.
    pub fn write_curve_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["epoch", "task_loss", "eloss_l1", "eloss_l2", "validation_metric"])?;
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:?}"));
        for r in self.epochs() {
            wtr.write_record([
                r.epoch.to_string(),
                format!("{:?}", r.task_loss),
                opt(r.eloss_l1),
                opt(r.eloss_l2),
                format!("{:?}", r.validation_metric),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Values observed during one optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub task_loss: f64,
    pub eloss: Option<(f64, f64, f64)>,
    pub total_loss: f64,
}

/// Records the regularizer `λ1·L1 + λ2·L2` over the batch-mean entropy of
/// each tap. Returns `(combined, l1, l2)`.
fn eloss_on_tape(
    tape: &mut Tape,
    taps: &[Var],
    k: usize,
    entropy: &EntropyConfig,
    weights: ElossWeights,
) -> Result<(Var, Var, Var)> {
    let hs = taps
        .iter()
        .map(|&t| {
            let per_sample = tape.entropy(t, k, entropy)?;
            Ok(tape.mean(per_sample))
        })
        .collect::<Result<Vec<Var>>>()?;
    let h = tape.stack(&hs)?;
    let m = hs.len() - 1;
    let upper = tape.slice(h, 1, m)?;
    let lower = tape.slice(h, 0, m)?;
    let deltas = tape.sub(upper, lower)?;
    let mean = tape.mean(deltas);
    let neg_mean = tape.scale(mean, -1.0);
    let centered = tape.add_scalar(deltas, neg_mean)?;
    let sq = tape.mul(centered, centered)?;
    let l1 = tape.mean(sq);
    let dsq = tape.mul(deltas, deltas)?;
    let ssq = tape.sum(dsq);
    let l2 = tape.scale(ssq, -1.0);
    let a = tape.scale(l1, weights.lambda1);
    let b = tape.scale(l2, weights.lambda2);
    Ok((tape.add(a, b)?, l1, l2))
}

/// Forward and backward pass for one batch. Leaves the gradients in the
/// network's parameters.
pub fn compute_gradients(
    net: &mut RepeatedBlockNet,
    inputs: Tensor,
    labels: &[usize],
    config: &TrainConfig,
) -> Result<StepStats> {
    let entropy = EntropyConfig::new(config.epsilon)?;
    let weights = ElossWeights::new(config.lambda1, config.lambda2)?;
    let mut tape = Tape::new();
    let params = net.bind(&mut tape);
    let x = tape.constant(inputs);
    let fw = net.forward_on_tape(&mut tape, x, &params, config.eloss_coverage)?;
    let task = tape.softmax_cross_entropy(fw.output, labels)?;
    let task_loss = tape.scalar_value(task)?;

    let mut eloss = None;
    let mut reg = None;
    if fw.taps.len() >= 2 {
        let vars: Vec<Var> = fw.taps.iter().map(|t| t.var).collect();
        let (combined, l1, l2) = eloss_on_tape(&mut tape, &vars, config.k, &entropy, weights)?;
        let values =
            (tape.scalar_value(combined)?, tape.scalar_value(l1)?, tape.scalar_value(l2)?);
        eloss = Some(values);
        if config.alpha > 0.0 {
            reg = Some(tape.scale(combined, config.alpha));
        }
    }

    let g_task = tape.gradients(task, &[])?;
    let g_reg = match reg {
        Some(r) => {
            let blocked: Vec<Var> =
                if config.eloss_into_stem { Vec::new() } else { vec![fw.block_input] };
            Some(tape.gradients(r, &blocked)?)
        }
        None => None,
    };
    for (p, &v) in net.params_mut().into_iter().zip(&params) {
        let mut g = g_task.get(v).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec);
        if let Some(extra) = g_reg.as_ref().and_then(|gr| gr.get(v)) {
            g.iter_mut().zip(extra).for_each(|(a, b)| *a += b);
        }
        p.grad = Some(g);
    }
    let total_loss = task_loss + eloss.map_or(0.0, |(c, _, _)| config.alpha * c);
    Ok(StepStats { task_loss, eloss: eloss.map(|(c, a, b)| (a, b, c)), total_loss })
}

/// Fraction of correctly classified examples.
pub fn accuracy(net: &RepeatedBlockNet, split: &Split) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::InsufficientData("empty evaluation split".into()));
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..split.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (logits, _) = net.forward_with_coverage(&split.inputs.gather_rows(chunk)?, 0)?;
        let classes = logits.shape[1];
        for (row, &i) in logits.values.chunks(classes).zip(chunk) {
            let pred = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (c, &v)| if v > best.1 { (c, v) } else { best })
                .0;
            correct += usize::from(pred == split.labels[i]);
        }
    }
    Ok(correct as f64 / split.len() as f64)
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn mean_of(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Runs epochs `first..first+count` (1-based) and appends to `log`.
fn run_epochs(
    net: &mut RepeatedBlockNet,
    data: &Dataset,
    config: &TrainConfig,
    first: usize,
    count: usize,
    log: &mut RunLog,
) -> Result<()> {
    let mut opt = Optimizer::new(config.optimizer)?;
    let n = data.train.len();
    for epoch in first..first + count {
        let started = Instant::now();
        let order = epoch_order(n, config.seed, epoch);
        let mut batches = Vec::new();
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let labels: Vec<usize> = chunk.iter().map(|&i| data.train.labels[i]).collect();
            let inputs = data.train.inputs.gather_rows(chunk)?;
            let step_started = Instant::now();
            let stats = compute_gradients(net, inputs, &labels, config)?;
            if !stats.total_loss.is_finite() || stats.total_loss > DIVERGENCE_THRESHOLD {
                log.entries.extend(batches.into_iter().map(LogEntry::Batch));
                let loss = stats.total_loss.is_finite().then_some(stats.total_loss);
                log.status = RunStatus::Diverged { epoch, batch: b + 1, loss };
                return Ok(());
            }
            opt.step(net.params_mut())?;
            log.timing.train_ms += step_started.elapsed().as_secs_f64() * 1e3;
            log.timing.steps += 1;
            batches.push(BatchRecord {
                epoch,
                batch: b + 1,
                task_loss: stats.task_loss,
                eloss_l1: stats.eloss.map(|e| e.0),
                eloss_l2: stats.eloss.map(|e| e.1),
                eloss_combined: stats.eloss.map(|e| e.2),
            });
        }
        let has_eloss = batches.iter().all(|b| b.eloss_l1.is_some());
        let record = EpochRecord {
            epoch,
            task_loss: mean_of(batches.iter().map(|b| b.task_loss)),
            eloss_l1: has_eloss.then(|| mean_of(batches.iter().filter_map(|b| b.eloss_l1))),
            eloss_l2: has_eloss.then(|| mean_of(batches.iter().filter_map(|b| b.eloss_l2))),
            validation_metric: accuracy(net, &data.val)?,
        };
        log.entries.extend(batches.into_iter().map(LogEntry::Batch));
        log.entries.push(LogEntry::Epoch(record));
        log.timing.epoch_ms.push(started.elapsed().as_secs_f64() * 1e3);
    }
    net.zero_grad();
    Ok(())
}

fn check_data(data: &Dataset) -> Result<()> {
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::InsufficientData("training and validation splits must be non-empty".into()));
    }
    Ok(())
}

/// Trains `net` in place. A diverged run is not an error: the returned log
/// carries the diverged status and everything logged before it.
pub fn train(net: &mut RepeatedBlockNet, data: &Dataset, config: &TrainConfig) -> Result<RunLog> {
    config.validate_for(net)?;
    check_data(data)?;
    net.set_coverage(config.eloss_coverage)?;
    let mut log = RunLog::new(config.clone(), Some(data.handle.clone()));
    run_epochs(net, data, config, 1, config.epochs, &mut log)?;
    Ok(log)
}

/// Resumes from a checkpoint for `extra_epochs` more epochs with fresh
/// optimizer moments. The new records are appended to `base` (when given)
/// after a continuation marker.
pub fn continue_train(
    checkpoint: &Checkpoint,
    base: Option<&RunLog>,
    extra_epochs: usize,
    config: &TrainConfig,
    data: &Dataset,
) -> Result<(RepeatedBlockNet, RunLog)> {
    let mut net = checkpoint.to_net()?;
    config.validate_for(&net)?;
    if extra_epochs == 0 {
        return Err(Error::Config("extra_epochs must be positive".into()));
    }
    check_data(data)?;
    net.set_coverage(config.eloss_coverage)?;
    let mut log = match base {
        Some(b) => {
            if b.last_epoch() != checkpoint.epoch {
                return Err(Error::Contract(format!(
                    "base log ends at epoch {}, checkpoint is at epoch {}",
                    b.last_epoch(),
                    checkpoint.epoch
                )));
            }
            let mut l = b.clone();
            l.timing = Timing::default();
            l
        }
        None => RunLog::new(config.clone(), Some(data.handle.clone())),
    };
    log.entries.push(LogEntry::Continuation(Continuation {
        from_epoch: checkpoint.epoch,
        extra_epochs,
        config: config.clone(),
    }));
    run_epochs(&mut net, data, config, checkpoint.epoch + 1, extra_epochs, &mut log)?;
    Ok((net, log))
}
