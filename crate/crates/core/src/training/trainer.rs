use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use super::loss::{batch_similarity, similarity_row, symmetric_contrastive_loss, symmetric_contrastive_loss_tape};
use super::{add_query_noise, mine_semi_positives, AdamWConfig, CosineSchedule, LossNorm, MiningIndex, NoiseMode};
use super::{OptimizerState, StepOutcome, TrainingBatch};
use crate::error::{Error, Result};
use crate::hypernet::{save_checkpoint, HypernetParams};
use crate::io::TrainingPair;
use crate::par;
use crate::rng::SeedStreams;
use crate::tensor::{Tape, Tensor2, Var};

/// Optimization settings for [`Trainer`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    pub tau: f64,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub steps: Option<usize>,
    /// Defaults to one epoch's worth of batches.
    pub cycle_length: Option<usize>,
    pub checkpoint_every: Option<usize>,
    pub noise_mode: NoiseMode,
    pub noise_scale: f64,
    pub loss_norm: LossNorm,
    /// Pull each sampled target's nearest neighbor into the same batch.
    pub co_sample: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 320,
            tau: 0.07,
            lr_max: 1e-5,
            lr_min: 2e-7,
            weight_decay: 1e-2,
            epochs: 1,
            steps: None,
            cycle_length: None,
            checkpoint_every: None,
            noise_mode: NoiseMode::Elementwise,
            noise_scale: 1.0,
            loss_norm: LossNorm::Normalized,
            co_sample: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch < 2 {
            return Err(Error::Config(format!("batch must be at least 2, got {}", self.batch)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.lr_max >= self.lr_min && self.lr_min >= 0.0 && self.lr_max.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 ≤ lr_min ≤ lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if !(self.weight_decay >= 0.0 && self.noise_scale >= 0.0) {
            return Err(Error::Config("weight_decay and noise_scale must be non-negative".into()));
        }
        if self.epochs == 0 && self.steps.is_none() {
            return Err(Error::Config("epochs must be positive when steps is unset".into()));
        }
        if self.cycle_length == Some(0) {
            return Err(Error::Config("cycle_length must be positive".into()));
        }
        Ok(())
    }
}

/// Training pairs plus the embedding tables they index.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub queries: &'a Tensor2<f32>,
    pub targets: &'a Tensor2<f32>,
    pub pairs: &'a [TrainingPair],
    /// Neighbor lists over the rows of `targets`.
    pub mining: &'a MiningIndex,
}

impl TrainData<'_> {
    pub fn validate(&self) -> Result<()> {
        if self.queries.cols() != self.targets.cols() {
            return Err(Error::dim(
                "train_data",
                format!("query dim {} vs target dim {}", self.queries.cols(), self.targets.cols()),
            ));
        }
        if self.mining.len() != self.targets.rows() {
            return Err(Error::Config(format!(
                "mining index covers {} items but there are {} targets",
                self.mining.len(),
                self.targets.rows()
            )));
        }
        if self.pairs.is_empty() {
            return Err(Error::Config("no training pairs".into()));
        }
        for (k, p) in self.pairs.iter().enumerate() {
            if p.query_row as usize >= self.queries.rows() || p.target_row as usize >= self.targets.rows() {
                return Err(Error::Config(format!(
                    "pair {k} ({}, {}) is out of range for {} queries and {} targets",
                    p.query_row,
                    p.target_row,
                    self.queries.rows(),
                    self.targets.rows()
                )));
            }
        }
        Ok(())
    }
}

/// Loss on one batch, evaluated without a tape.
pub fn batch_loss(params: &HypernetParams, batch: &TrainingBatch, norm: LossNorm) -> Result<f64> {
    let outs = par::map_indexed(batch.len(), |i| params.forward(batch.queries.row(i)));
    let mut queries = Tensor2::zeros(batch.len(), batch.queries.cols());
    let mut transforms = Vec::with_capacity(batch.len());
    for (i, o) in outs.into_iter().enumerate() {
        let (q, t) = o?;
        queries.row_mut(i).copy_from_slice(&q);
        transforms.push(t);
    }
    let s = batch_similarity(&queries, &batch.targets, &transforms, batch.tau, norm)?;
    symmetric_contrastive_loss(&s, &batch.alpha())
}

/// Loss, similarity matrix, and the gradient for every parameter tensor.
///
/// Each sample's similarity row is recorded on its own tape. The loss
/// gradient with respect to `S` then seeds each tape's backward pass, and
/// the per-sample parameter gradients are summed in sample order.
pub fn batch_loss_and_grad(
    params: &HypernetParams,
    batch: &TrainingBatch,
    norm: LossNorm,
) -> Result<(f64, Tensor2, Vec<Tensor2>)> {
    let b = batch.len();
    let forwards = par::map_indexed(b, |i| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let net = params.bind(&mut tape, true);
        let q = tape.constant(Tensor2::row_vector(batch.queries.row(i)));
        let d = tape.constant(batch.targets.clone());
        let out = net.forward(&mut tape, q)?;
        let row = similarity_row(&mut tape, out.query, &out.transform, d, batch.tau, norm)?;
        Ok((tape, net.all, row))
    });
    let forwards: Vec<_> = forwards.into_iter().collect::<Result<_>>()?;
    let mut s = Tensor2::zeros(b, b);
    for (i, (tape, _, row)) in forwards.iter().enumerate() {
        s.row_mut(i).copy_from_slice(tape.value(*row).data());
    }
    let mut loss_tape = Tape::new();
    let sv = loss_tape.leaf(s.clone());
    let lv = symmetric_contrastive_loss_tape(&mut loss_tape, sv, &batch.alpha())?;
    let loss = loss_tape.value(lv).get(0, 0);
    if !loss.is_finite() {
        return Ok((loss, s, Vec::new()));
    }
    let mut ds = loss_tape.backward(lv)?;
    let ds = ds.take(sv).unwrap_or_else(|| Tensor2::zeros(b, b));

    let per_sample = par::map_indexed(b, |i| -> Result<Vec<Tensor2>> {
        let (tape, vars, row) = &forwards[i];
        let mut g = tape.backward_with(*row, Tensor2::row_vector(ds.row(i)))?;
        Ok(vars
            .iter()
            .zip(params.tensors())
            .map(|(&v, p)| g.take(v).unwrap_or_else(|| Tensor2::zeros(p.rows(), p.cols())))
            .collect())
    });
    let mut total: Vec<Tensor2> = params.tensors().iter().map(|p| Tensor2::zeros(p.rows(), p.cols())).collect();
    for g in per_sample {
        for (acc, gi) in total.iter_mut().zip(g?) {
            acc.add_assign(&gi);
        }
    }
    Ok((loss, s, total))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    pub lr: f64,
    pub applied: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    /// Filled by the caller's epoch hook, if any.
    pub metrics: Vec<(String, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub skipped: u64,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainLog {
    /// `epoch  steps  mean_loss  [metric=value ...]`, one line per epoch.
    pub fn epochs_tsv(&self) -> String {
        let mut out = String::from("epoch\tsteps\tmean_loss\tmetrics\n");
        for e in &self.epochs {
            let metrics: Vec<String> = e.metrics.iter().map(|(k, v)| format!("{k}={v:.6}")).collect();
            let _ = writeln!(out, "{}\t{}\t{:.6}\t{}", e.epoch, e.steps, e.mean_loss, metrics.join(","));
        }
        out
    }
}

pub type EpochHook<'h> = dyn FnMut(usize, &HypernetParams) -> Result<Vec<(String, f64)>> + 'h;

/// Drives the optimization loop over shuffled epochs.
pub struct Trainer<'a> {
    config: TrainConfig,
    data: TrainData<'a>,
    params: HypernetParams,
    optimizer: OptimizerState,
    streams: SeedStreams,
    pairs_by_target: HashMap<usize, Vec<usize>>,
    plan: Vec<Vec<usize>>,
    cursor: usize,
    epoch: usize,
    step: usize,
    epoch_losses: Vec<f64>,
    log: TrainLog,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, data: TrainData<'a>, params: HypernetParams) -> Result<Self> {
        data.validate()?;
        config.validate()?;
        if params.config().embed_dim != data.queries.cols() {
            return Err(Error::dim(
                "trainer",
                format!("network dim {} vs data dim {}", params.config().embed_dim, data.queries.cols()),
            ));
        }
        let cycle = config.cycle_length.unwrap_or_else(|| data.pairs.len().div_ceil(config.batch));
        let schedule = CosineSchedule::new(config.lr_max, config.lr_min, cycle)?;
        let adam = AdamWConfig {
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        };
        let optimizer = OptimizerState::new(params.tensors(), adam, schedule);
        let mut pairs_by_target: HashMap<usize, Vec<usize>> = HashMap::new();
        for (k, p) in data.pairs.iter().enumerate() {
            pairs_by_target.entry(p.target_row as usize).or_default().push(k);
        }
        Ok(Self {
            streams: SeedStreams::new(config.seed),
            config,
            data,
            params,
            optimizer,
            pairs_by_target,
            plan: Vec::new(),
            cursor: 0,
            epoch: 0,
            step: 0,
            epoch_losses: Vec::new(),
            log: TrainLog::default(),
        })
    }

    pub fn params(&self) -> &HypernetParams {
        &self.params
    }

    pub fn into_parts(self) -> (HypernetParams, TrainLog) {
        (self.params, self.log)
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.optimizer
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.data.pairs.len().div_ceil(self.config.batch)
    }

    pub fn total_steps(&self) -> usize {
        self.config.steps.unwrap_or(self.config.epochs * self.steps_per_epoch())
    }

    /// Pair indices grouped into batches for one epoch. A batch never holds
    /// two pairs with the same target; conflicting pairs wait for a later
    /// batch.
    pub(crate) fn plan_epoch(&self, epoch: usize) -> Vec<Vec<usize>> {
        let n = self.data.pairs.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.streams.substream("batches", epoch as u64));
        let target = |p: usize| self.data.pairs[p].target_row as usize;
        let mut used = vec![false; n];
        let mut pending: VecDeque<usize> = order.into();
        let mut batches = Vec::new();
        while !pending.is_empty() {
            let mut batch = Vec::with_capacity(self.config.batch);
            let mut present = HashSet::new();
            let mut deferred = Vec::new();
            while batch.len() < self.config.batch {
                let Some(p) = pending.pop_front() else { break };
                if used[p] {
                    continue;
                }
                if present.contains(&target(p)) {
                    deferred.push(p);
                    continue;
                }
                used[p] = true;
                present.insert(target(p));
                batch.push(p);
                if self.config.co_sample && batch.len() < self.config.batch {
                    if let Some(nb) = self.data.mining.neighbors(target(p)).first() {
                        let extra = self
                            .pairs_by_target
                            .get(&nb.id)
                            .and_then(|ps| ps.iter().copied().find(|&q| !used[q]));
                        if let Some(q) = extra.filter(|_| !present.contains(&nb.id)) {
                            used[q] = true;
                            present.insert(nb.id);
                            batch.push(q);
                        }
                    }
                }
            }
            for d in deferred.into_iter().rev() {
                pending.push_front(d);
            }
            if batch.len() >= 2 {
                batches.push(batch);
            }
        }
        batches
    }

    /// Assembles batch `pairs` with noise drawn from the stream for `step`.
    pub fn make_batch(&self, pairs: &[usize], step: usize) -> Result<TrainingBatch> {
        let e = self.data.queries.cols();
        let mut queries = Tensor2::zeros(pairs.len(), e);
        let mut targets = Tensor2::zeros(pairs.len(), e);
        let mut rng = self.streams.substream("query-noise", step as u64);
        let mut target_ids = Vec::with_capacity(pairs.len());
        for (i, &p) in pairs.iter().enumerate() {
            let pair = self.data.pairs[p];
            let q = queries.row_mut(i);
            for (dst, &src) in q.iter_mut().zip(self.data.queries.row(pair.query_row as usize)) {
                *dst = f64::from(src);
            }
            add_query_noise(q, self.config.noise_mode, self.config.noise_scale, &mut rng);
            for (dst, &src) in targets.row_mut(i).iter_mut().zip(self.data.targets.row(pair.target_row as usize)) {
                *dst = f64::from(src);
            }
            target_ids.push(pair.target_row as usize);
        }
        let semi = mine_semi_positives(self.data.mining, &target_ids);
        TrainingBatch::new(queries, targets, semi, self.config.tau)
    }

    fn finish_epoch(&mut self, hook: Option<&mut EpochHook<'_>>) -> Result<()> {
        if self.epoch_losses.is_empty() {
            return Ok(());
        }
        let metrics = match hook {
            Some(h) => h(self.epoch, &self.params)?,
            None => Vec::new(),
        };
        let steps = self.epoch_losses.len();
        self.log.epochs.push(EpochRecord {
            epoch: self.epoch,
            steps,
            mean_loss: self.epoch_losses.iter().sum::<f64>() / steps as f64,
            metrics,
        });
        self.epoch_losses.clear();
        Ok(())
    }

    /// One optimization step. Returns its record.
    pub fn step(&mut self, dump_dir: Option<&Path>) -> Result<StepRecord> {
        self.step_with_hook(dump_dir, None)
    }

    fn step_with_hook(&mut self, dump_dir: Option<&Path>, hook: Option<&mut EpochHook<'_>>) -> Result<StepRecord> {
        if self.cursor >= self.plan.len() {
            if !self.plan.is_empty() {
                self.finish_epoch(hook)?;
                self.epoch += 1;
            }
            self.plan = self.plan_epoch(self.epoch);
            self.cursor = 0;
            if self.plan.is_empty() {
                return Err(Error::Config("training pairs cannot form a batch of two distinct targets".into()));
            }
        }
        let pairs = self.plan[self.cursor].clone();
        self.cursor += 1;
        let batch = self.make_batch(&pairs, self.step)?;
        let (loss, s, grads) = batch_loss_and_grad(&self.params, &batch, self.config.loss_norm)?;
        if !loss.is_finite() {
            return Err(self.nan_abort(&pairs, &batch, &s, loss, dump_dir));
        }
        let lr = self.optimizer.current_lr();
        let outcome = self.optimizer.step(self.params.tensors_mut(), &grads)?;
        let rec = StepRecord {
            step: self.step,
            epoch: self.epoch,
            batch: pairs.len(),
            loss,
            lr,
            applied: outcome == StepOutcome::Applied,
        };
        self.log.skipped = self.optimizer.skipped();
        self.log.steps.push(rec.clone());
        self.epoch_losses.push(loss);
        self.step += 1;
        Ok(rec)
    }

    fn nan_abort(&self, pairs: &[usize], batch: &TrainingBatch, s: &Tensor2, loss: f64, dir: Option<&Path>) -> Error {
        let mut dump = String::from("row\tpair\tquery_row\ttarget_row\tquery_norm\ttarget_norm\tsimilarities\n");
        for (i, &p) in pairs.iter().enumerate() {
            let pair = self.data.pairs[p];
            let norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt();
            let sims: Vec<String> = s.row(i).iter().map(|v| format!("{v}")).collect();
            let _ = writeln!(
                dump,
                "{i}\t{p}\t{}\t{}\t{}\t{}\t{}",
                pair.query_row,
                pair.target_row,
                norm(batch.queries.row(i)),
                norm(batch.targets.row(i)),
                sims.join(",")
            );
        }
        let mut msg = format!(
            "loss {loss} at step {} (epoch {}, {} pairs, {} non-finite similarities)",
            self.step,
            self.epoch,
            pairs.len(),
            s.data().iter().filter(|v| !v.is_finite()).count()
        );
        if let Some(dir) = dir {
            let path = dir.join(format!("nan-batch-step{:06}.tsv", self.step));
            match std::fs::write(&path, &dump) {
                Ok(()) => {
                    let _ = write!(msg, "; batch dumped to {}", path.display());
                }
                Err(e) => log::error!("could not write {}: {e}", path.display()),
            }
        } else {
            log::error!("offending batch:\n{dump}");
        }
        Error::NonFinite(msg)
    }

    /// Runs to `total_steps()`, checkpointing into `checkpoint_dir` every
    /// `checkpoint_every` steps and once at the end.
    pub fn run(&mut self, checkpoint_dir: Option<&Path>, mut hook: Option<&mut EpochHook<'_>>) -> Result<()> {
        let total = self.total_steps();
        while self.step < total {
            let rec = self.step_with_hook(checkpoint_dir, hook.as_deref_mut())?;
            if rec.step % 100 == 0 {
                log::info!("step {} epoch {} loss {:.5} lr {:.3e}", rec.step, rec.epoch, rec.loss, rec.lr);
            }
            if let (Some(dir), Some(k)) = (checkpoint_dir, self.config.checkpoint_every) {
                if k > 0 && self.step % k == 0 {
                    self.save(dir)?;
                }
            }
        }
        self.finish_epoch(hook)?;
        if let Some(dir) = checkpoint_dir {
            let path = dir.join("final.qhnw");
            save_checkpoint(&self.params, &path)?;
            self.log.checkpoints.push(path);
        }
        Ok(())
    }

    fn save(&mut self, dir: &Path) -> Result<()> {
        let path = dir.join(format!("step-{:06}.qhnw", self.step));
        save_checkpoint(&self.params, &path)?;
        self.log.checkpoints.push(path);
        Ok(())
    }
}

/// Trains `params` on `data` and returns the result with its log.
pub fn train(
    config: TrainConfig,
    data: TrainData<'_>,
    params: HypernetParams,
    checkpoint_dir: Option<&Path>,
) -> Result<(HypernetParams, TrainLog)> {
    let mut t = Trainer::new(config, data, params)?;
    t.run(checkpoint_dir, None)?;
    Ok(t.into_parts())
}
