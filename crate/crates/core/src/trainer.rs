//! The pre-training loop: epochs of crop/batch/shuffle, gradient
//! accumulation over groups of micro-batches, Adam steps under a learning-
//! rate schedule, periodic validation, and checkpointing.
//!
//! Every source of randomness is derived statelessly from the run seed plus
//! stable indices (epoch, step, utterance id), so a run is a pure function
//! of (corpus, config, seed): interrupting and resuming from a checkpoint
//! reproduces the uninterrupted trajectory bit for bit, and splitting a
//! group into micro-batches cannot change the result.
//!
//! Group losses are normalized by the total anchor count across the whole
//! accumulation group (per direction), which makes accumulation exactly
//! equal to one large batch under the fixed reduction order.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adam::{adam_step, AdamState};
use crate::checkpoint::Checkpoint;
use crate::data::{filter_and_crop, make_batches, Batch, FilterOutcome, Utterance};
use crate::diffcore::{grads_by_path, ParameterSet, Tape, Tensor};
use crate::encoders::Modality;
use crate::error::{Error, Result};
use crate::fusion::DropoutKey;
use crate::model::{
    init_params, pretrain_forward, sample_pretrain_plans, sample_step_negatives, ModelConfig,
    PretrainPlans,
};
use crate::par;
use crate::rng;
use crate::schedule::{lr_at, ScheduleConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    /// Micro-batches accumulated per optimizer step.
    pub accumulation: usize,
    /// Frame budget per micro-batch.
    pub batch_frames: usize,
    /// Utterances shorter than this are dropped each epoch.
    pub min_frames: usize,
    /// Longer utterances are cropped to this length each epoch.
    pub max_frames: usize,
    /// Fraction of the corpus held out for validation.
    pub val_fraction: f64,
    /// Run a validation pass every this many steps (0 = never).
    pub val_every: u64,
    /// Snapshot a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: u64,
    /// Pre-train with one stream excluded (filled by its mask embedding),
    /// e.g. audio-only pre-training with the visual stream excluded. The
    /// objective must not read the excluded stream.
    pub exclude: Option<Modality>,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            model: ModelConfig::desk(),
            schedule: ScheduleConfig::default(),
            accumulation: 1,
            batch_frames: 120,
            min_frames: 12,
            max_frames: 60,
            val_fraction: 0.1,
            val_every: 200,
            checkpoint_every: 0,
            exclude: None,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        if let Some(m) = self.exclude {
            if self.model.objective.requires(m) {
                return Err(Error::config(format!(
                    "cannot pre-train with the {m:?} stream excluded: the \
                     objective reads its masked-frame embeddings"
                )));
            }
        }
        if self.accumulation == 0 {
            return Err(Error::config("accumulation must be >= 1"));
        }
        if self.batch_frames == 0 {
            return Err(Error::config("batch_frames must be >= 1"));
        }
        if self.min_frames > self.max_frames {
            return Err(Error::config(format!(
                "min_frames {} > max_frames {}",
                self.min_frames, self.max_frames
            )));
        }
        if self.max_frames > self.batch_frames {
            return Err(Error::config(format!(
                "max_frames {} exceeds the batch budget {}",
                self.max_frames, self.batch_frames
            )));
        }
        if !(0.0..=0.9).contains(&self.val_fraction) {
            return Err(Error::config(format!(
                "val_fraction {} outside [0, 0.9]",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

/// One metrics row. Losses are per-anchor means; a direction that produced
/// no anchors (or is disabled) reports null.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub lr: f64,
    pub loss_c2a: Option<f64>,
    pub loss_c2v: Option<f64>,
    pub loss_total: f64,
    pub acc_c2a: Option<f64>,
    pub acc_c2v: Option<f64>,
    pub split: String,
}

/// Result of one forward/backward over a group of utterances, reduced in
/// utterance order.
struct GroupStats {
    grads: BTreeMap<String, Tensor>,
    loss_sum_a: f64,
    loss_sum_v: f64,
    anchors_a: usize,
    anchors_v: usize,
    correct_a: usize,
    correct_v: usize,
}

struct UtteranceResult {
    grads: Option<BTreeMap<String, Tensor>>,
    loss_sum_a: f64,
    loss_sum_v: f64,
    correct_a: usize,
    correct_v: usize,
}

/// Forward (and optionally backward) for every utterance of one
/// micro-batch. `norm_a`/`norm_v` are the anchor totals of the whole
/// accumulation group, so each utterance's contribution is already scaled
/// for the group objective; the reduction over utterances is sequential and
/// in batch order regardless of how the forwards were parallelized.
#[allow(clippy::too_many_arguments)]
fn run_micro_batch(
    cfg: &PretrainConfig,
    params: &ParameterSet,
    utterances: &[&Utterance],
    plans: &[PretrainPlans],
    norm_a: f64,
    norm_v: f64,
    step: u64,
    seed: u64,
    with_grads: bool,
    with_dropout: bool,
) -> Result<GroupStats> {
    let (anchors_a, anchors_v) = count_anchors(cfg, plans.iter());

    let jobs: Vec<(usize, &Utterance)> = utterances.iter().copied().enumerate().collect();
    let results: Vec<Result<UtteranceResult>> = par::map_slice(&jobs, |(i, u)| {
        let plan = &plans[*i];
        let utt_key = rng::key(&u.id);
        let mut tape = Tape::new();
        let staged = tape.stage(params)?;
        let negatives_a = if cfg.model.objective.directions.includes(Modality::Audio) {
            sample_step_negatives(&cfg.model, plan, Modality::Audio, seed, step, utt_key)?
        } else {
            Vec::new()
        };
        let negatives_v = if cfg.model.objective.directions.includes(Modality::Visual) {
            sample_step_negatives(&cfg.model, plan, Modality::Visual, seed, step, utt_key)?
        } else {
            Vec::new()
        };
        let key = DropoutKey {
            seed,
            step,
            utterance: utt_key,
        };
        let dropout = if with_dropout { Some(&key) } else { None };
        let out = pretrain_forward(
            &mut tape,
            &staged,
            &cfg.model,
            u,
            plan,
            &negatives_a,
            &negatives_v,
            cfg.exclude,
            dropout,
        )?;

        let mut terms = Vec::new();
        let mut loss_sum_a = 0.0;
        let mut loss_sum_v = 0.0;
        let mut correct_a = 0;
        let mut correct_v = 0;
        if let Some(d) = &out.to_audio {
            loss_sum_a = tape.scalar_value(d.loss_sum)?;
            correct_a = d.n_correct;
            terms.push(tape.scale(d.loss_sum, 1.0 / norm_a)?);
        }
        if let Some(d) = &out.to_visual {
            loss_sum_v = tape.scalar_value(d.loss_sum)?;
            correct_v = d.n_correct;
            terms.push(tape.scale(d.loss_sum, 1.0 / norm_v)?);
        }
        let grads = if with_grads && !terms.is_empty() {
            let objective = tape.sum_list(&terms)?;
            let grads = tape.backward(objective)?;
            Some(grads_by_path(&staged, &grads))
        } else {
            None
        };
        Ok(UtteranceResult {
            grads,
            loss_sum_a,
            loss_sum_v,
            correct_a,
            correct_v,
        })
    });

    let mut stats = GroupStats {
        grads: BTreeMap::new(),
        loss_sum_a: 0.0,
        loss_sum_v: 0.0,
        anchors_a,
        anchors_v,
        correct_a: 0,
        correct_v: 0,
    };
    for r in results {
        let r = r?;
        stats.loss_sum_a += r.loss_sum_a;
        stats.loss_sum_v += r.loss_sum_v;
        stats.correct_a += r.correct_a;
        stats.correct_v += r.correct_v;
        if let Some(grads) = r.grads {
            accumulate_grads(&mut stats.grads, grads);
        }
    }
    Ok(stats)
}

fn accumulate_grads(acc: &mut BTreeMap<String, Tensor>, grads: BTreeMap<String, Tensor>) {
    for (path, g) in grads {
        match acc.get_mut(&path) {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => {
                acc.insert(path, g);
            }
        }
    }
}

/// One optimizer step over an accumulation group given as explicit
/// micro-batches: each micro-batch runs its own forward/backward pass and
/// the gradients are summed across passes. Because every utterance's loss is
/// normalized by the group-wide anchor totals, how the group is split into
/// micro-batches does not change the objective, so k micro-batches and one
/// concatenated batch produce the same update apart from summation-order
/// rounding.
pub fn train_step(
    cfg: &PretrainConfig,
    params: &mut ParameterSet,
    opt: &mut AdamState,
    micro_batches: &[Vec<&Utterance>],
    step: u64,
) -> Result<MetricsRecord> {
    let mut plans: Vec<Vec<PretrainPlans>> = Vec::with_capacity(micro_batches.len());
    for batch in micro_batches {
        let mut batch_plans = Vec::with_capacity(batch.len());
        for u in batch {
            batch_plans.push(sample_pretrain_plans(
                &cfg.model,
                u.frames,
                cfg.seed,
                step,
                rng::key(&u.id),
            )?);
        }
        plans.push(batch_plans);
    }
    let (anchors_a, anchors_v) = count_anchors(cfg, plans.iter().flatten());
    let norm_a = anchors_a.max(1) as f64;
    let norm_v = anchors_v.max(1) as f64;

    let mut total = GroupStats {
        grads: BTreeMap::new(),
        loss_sum_a: 0.0,
        loss_sum_v: 0.0,
        anchors_a,
        anchors_v,
        correct_a: 0,
        correct_v: 0,
    };
    for (batch, batch_plans) in micro_batches.iter().zip(&plans) {
        let stats = run_micro_batch(
            cfg, params, batch, batch_plans, norm_a, norm_v, step, cfg.seed, true, true,
        )?;
        total.loss_sum_a += stats.loss_sum_a;
        total.loss_sum_v += stats.loss_sum_v;
        total.correct_a += stats.correct_a;
        total.correct_v += stats.correct_v;
        accumulate_grads(&mut total.grads, stats.grads);
    }
    let lr = lr_at(step, &cfg.schedule);
    adam_step(params, &total.grads, opt, lr)?;
    Ok(record_from(&total, step + 1, lr, "train"))
}

/// Anchor totals per direction; disabled directions score no anchors.
fn count_anchors<'a>(
    cfg: &PretrainConfig,
    plans: impl Iterator<Item = &'a PretrainPlans>,
) -> (usize, usize) {
    let dirs = cfg.model.objective.directions;
    let mut a = 0;
    let mut v = 0;
    for p in plans {
        if dirs.includes(Modality::Audio) {
            a += p.audio.masked_count();
        }
        if dirs.includes(Modality::Visual) {
            v += p.visual.masked_count();
        }
    }
    (a, v)
}

fn record_from(stats: &GroupStats, step: u64, lr: f64, split: &str) -> MetricsRecord {
    let loss_a = (stats.anchors_a > 0).then(|| stats.loss_sum_a / stats.anchors_a as f64);
    let loss_v = (stats.anchors_v > 0).then(|| stats.loss_sum_v / stats.anchors_v as f64);
    MetricsRecord {
        step,
        lr,
        loss_c2a: loss_a,
        loss_c2v: loss_v,
        loss_total: loss_a.unwrap_or(0.0) + loss_v.unwrap_or(0.0),
        acc_c2a: (stats.anchors_a > 0).then(|| stats.correct_a as f64 / stats.anchors_a as f64),
        acc_c2v: (stats.anchors_v > 0).then(|| stats.correct_v as f64 / stats.anchors_v as f64),
        split: split.to_string(),
    }
}

/// Deterministic train/validation split of utterance indices.
fn split_corpus(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(seed, "val-split", &[]);
    order.shuffle(&mut r);
    let n_val = (n as f64 * val_fraction).round() as usize;
    let val = order[..n_val].to_vec();
    let train = order[n_val..].to_vec();
    (train, val)
}

fn epoch_batches(
    cfg: &PretrainConfig,
    train: &[Utterance],
    spf: usize,
    epoch: u64,
) -> Result<Vec<Batch>> {
    let mut kept = Vec::new();
    for u in train {
        let mut r = rng::stream(cfg.seed, "epoch-crop", &[epoch, rng::key(&u.id)]);
        match filter_and_crop(u, cfg.min_frames, cfg.max_frames, spf, &mut r)? {
            FilterOutcome::Kept(u) => kept.push(u),
            FilterOutcome::Discarded => {}
        }
    }
    if kept.is_empty() {
        return Err(Error::data(
            "no training utterances survive the length filter",
        ));
    }
    make_batches(&kept, cfg.batch_frames, rng::derive(cfg.seed, "batch-order", &[epoch]))
}

/// Fixed per-utterance validation masks, independent of the training step,
/// so validation losses at different steps are comparable.
fn validation_pass(
    cfg: &PretrainConfig,
    params: &ParameterSet,
    val: &[Utterance],
    step: u64,
    lr: f64,
) -> Result<MetricsRecord> {
    let val_seed = rng::derive(cfg.seed, "validation", &[]);
    let mut plans = Vec::with_capacity(val.len());
    for u in val {
        plans.push(sample_pretrain_plans(
            &cfg.model,
            u.frames,
            val_seed,
            0,
            rng::key(&u.id),
        )?);
    }
    let refs: Vec<&Utterance> = val.iter().collect();
    let norm_a = plans
        .iter()
        .map(|p| p.audio.masked_count())
        .sum::<usize>()
        .max(1) as f64;
    let norm_v = plans
        .iter()
        .map(|p| p.visual.masked_count())
        .sum::<usize>()
        .max(1) as f64;
    let stats = run_micro_batch(
        cfg, params, &refs, &plans, norm_a, norm_v, 0, val_seed, false, false,
    )?;
    Ok(record_from(&stats, step, lr, "val"))
}

/// A finished (or interrupted-and-finished) run: final state plus the full
/// metrics history, and any periodic snapshots that were requested.
#[derive(Debug)]
pub struct PretrainRun {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRecord>,
    pub snapshots: Vec<Checkpoint>,
}

pub fn pretrain(cfg: &PretrainConfig, corpus: &[Utterance], spf: usize) -> Result<PretrainRun> {
    let params = init_params(&cfg.model, cfg.seed)?;
    let start = Checkpoint {
        params,
        optimizer: Some(AdamState::new()),
        step: 0,
        epoch: 0,
        group_in_epoch: 0,
        seed: cfg.seed,
        config_json: serde_json::to_string(cfg).map_err(|e| Error::format(e.to_string()))?,
    };
    resume_pretrain(cfg, corpus, spf, start)
}

/// Continues a run from a checkpoint. Passing a fresh step-0 checkpoint is
/// exactly [`pretrain`]; passing a mid-run snapshot reproduces the rest of
/// the uninterrupted trajectory bit for bit (metrics cover only the
/// continued portion).
pub fn resume_pretrain(
    cfg: &PretrainConfig,
    corpus: &[Utterance],
    spf: usize,
    start: Checkpoint,
) -> Result<PretrainRun> {
    cfg.validate()?;
    let expected = serde_json::to_string(cfg).map_err(|e| Error::format(e.to_string()))?;
    if start.config_json != expected {
        return Err(Error::config(
            "checkpoint was produced under a different configuration",
        ));
    }
    if start.seed != cfg.seed {
        return Err(Error::config(format!(
            "checkpoint seed {} does not match config seed {}",
            start.seed, cfg.seed
        )));
    }
    for u in corpus {
        u.validate(spf)?;
    }
    if spf != cfg.model.audio.total_stride() {
        return Err(Error::config(format!(
            "corpus has {spf} samples per frame but the audio encoder strides by {}",
            cfg.model.audio.total_stride()
        )));
    }

    let (train_ix, val_ix) = split_corpus(corpus.len(), cfg.val_fraction, cfg.seed);
    let train: Vec<Utterance> = train_ix.iter().map(|&i| corpus[i].clone()).collect();
    let mut val: Vec<Utterance> = Vec::new();
    for &i in &val_ix {
        let mut r = rng::stream(cfg.seed, "val-crop", &[rng::key(&corpus[i].id)]);
        if let FilterOutcome::Kept(u) =
            filter_and_crop(&corpus[i], cfg.min_frames, cfg.max_frames, spf, &mut r)?
        {
            val.push(u);
        }
    }

    let mut params = start.params;
    let mut opt = start.optimizer.unwrap_or_default();
    let mut step = start.step;
    let mut epoch = start.epoch;
    let mut group_start = start.group_in_epoch as usize;
    let mut metrics = Vec::new();
    let mut snapshots = Vec::new();
    let total = cfg.schedule.total_steps;

    let snapshot = |params: &ParameterSet,
                    opt: &AdamState,
                    step: u64,
                    epoch: u64,
                    group_in_epoch: u64|
     -> Checkpoint {
        Checkpoint {
            params: params.clone(),
            optimizer: Some(opt.clone()),
            step,
            epoch,
            group_in_epoch,
            seed: cfg.seed,
            config_json: expected.clone(),
        }
    };

    'run: while step < total {
        let batches = epoch_batches(cfg, &train, spf, epoch)?;
        let groups: Vec<&[Batch]> = batches.chunks(cfg.accumulation).collect();
        for gi in group_start..groups.len() {
            if step >= total {
                break 'run;
            }
            let micro_batches: Vec<Vec<&Utterance>> = groups[gi]
                .iter()
                .map(|b| b.utterances.iter().collect())
                .collect();
            let record = train_step(cfg, &mut params, &mut opt, &micro_batches, step)?;
            let lr = record.lr;
            step += 1;
            metrics.push(record);

            if cfg.val_every > 0 && step % cfg.val_every == 0 && !val.is_empty() {
                metrics.push(validation_pass(cfg, &params, &val, step, lr)?);
            }
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < total {
                let (next_epoch, next_group) = if gi + 1 < groups.len() {
                    (epoch, (gi + 1) as u64)
                } else {
                    (epoch + 1, 0)
                };
                snapshots.push(snapshot(&params, &opt, step, next_epoch, next_group));
            }
        }
        group_start = 0;
        epoch += 1;
    }

    if cfg.val_every > 0 && !val.is_empty() && total > 0 && step % cfg.val_every != 0 {
        metrics.push(validation_pass(
            cfg,
            &params,
            &val,
            step,
            lr_at(step, &cfg.schedule),
        )?);
    }

    let checkpoint = snapshot(&params, &opt, step, epoch, group_start as u64);
    Ok(PretrainRun {
        checkpoint,
        metrics,
        snapshots,
    })
}

pub fn write_metrics_jsonl(w: &mut impl std::io::Write, records: &[MetricsRecord]) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::format(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}
