//! Task fine-tuning on top of the fused embeddings: CTC transcription with
//! any combination of present modalities, and whole-clip word
//! classification, plus the evaluation reports for both.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adam::{adam_step, AdamState};
use crate::checkpoint::Checkpoint;
use crate::data::Utterance;
use crate::diffcore::{
    grads_by_path, linear, staged_param, BufId, ParameterSet, Staged, Tape, Tensor,
};
use crate::error::{Error, Result};
use crate::fusion::DropoutKey;
use crate::model::{build_fused, init_params, sample_pretrain_plans, ModelConfig, StreamMode};
use crate::par;
use crate::rng;
use crate::schedule::{lr_at, ScheduleConfig};

use super::augment::{draw_mixup_lambda, mixup, one_hot, temporal_window};
use super::ctc::{best_path_decode, ctc_loss};
use super::metrics::{cer, wer, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Asr,
    Vsr,
    Avsr,
    WordClass,
}

impl Task {
    pub fn is_ctc(self) -> bool {
        self != Task::WordClass
    }
}

/// How an absent modality's slot is filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionStrategy {
    /// Zero the raw input before encoding.
    InputZero,
    /// Zero the embedding sequence.
    EmbeddingZero,
    /// Replace every embedding frame with the learned mask embedding.
    EmbeddingMask,
}

impl ExclusionStrategy {
    fn mode(self) -> StreamMode<'static> {
        match self {
            ExclusionStrategy::InputZero => StreamMode::InputZero,
            ExclusionStrategy::EmbeddingZero => StreamMode::EmbeddingZero,
            ExclusionStrategy::EmbeddingMask => StreamMode::AllMask,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WordBackend {
    MeanPool,
    TemporalConv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    LinearCtc,
    WordClassifier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub backend: WordBackend,
    /// Word classes; ignored for CTC heads, whose width is the vocabulary.
    pub n_classes: usize,
    /// Kernel of the temporal-conv backend.
    pub conv_kernel: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig::linear_ctc()
    }
}

impl HeadConfig {
    pub fn linear_ctc() -> Self {
        HeadConfig {
            kind: HeadKind::LinearCtc,
            backend: WordBackend::MeanPool,
            n_classes: 0,
            conv_kernel: 3,
        }
    }

    pub fn word_classifier(n_classes: usize, backend: WordBackend) -> Self {
        HeadConfig {
            kind: HeadKind::WordClassifier,
            backend,
            n_classes,
            conv_kernel: 3,
        }
    }
}

/// The trainable head stacked on the fused embeddings. CTC: one linear
/// layer to vocabulary logits per frame. Word classification: optional
/// temporal convolution, mean-pool over time, then a linear layer.
pub fn init_head_params(
    head: &HeadConfig,
    dim: usize,
    n_out: usize,
    prefix: &str,
    seed: u64,
    set: &mut ParameterSet,
) -> Result<()> {
    if n_out < 2 {
        return Err(Error::config(format!("head needs >= 2 outputs, got {n_out}")));
    }
    if head.kind == HeadKind::WordClassifier && head.backend == WordBackend::TemporalConv {
        if head.conv_kernel % 2 == 0 {
            return Err(Error::config(format!(
                "temporal-conv head kernel {} must be odd",
                head.conv_kernel
            )));
        }
        let path = format!("{prefix}.conv.weight");
        let bound = 1.0 / ((dim * head.conv_kernel) as f64).sqrt();
        let mut r = rng::stream(seed, &path, &[]);
        let data = (0..dim * dim * head.conv_kernel)
            .map(|_| rand::Rng::random_range(&mut r, -bound..bound))
            .collect();
        set.insert(path, Tensor::new(vec![dim, dim, head.conv_kernel], data)?)?;
        set.insert(format!("{prefix}.bias4conv"), Tensor::zeros(vec![dim]))?;
    }
    let path = format!("{prefix}.out.weight");
    let bound = 1.0 / (dim as f64).sqrt();
    let mut r = rng::stream(seed, &path, &[]);
    let data = (0..dim * n_out)
        .map(|_| rand::Rng::random_range(&mut r, -bound..bound))
        .collect();
    set.insert(path, Tensor::new(vec![dim, n_out], data)?)?;
    set.insert(format!("{prefix}.out.bias"), Tensor::zeros(vec![n_out]))
}

/// Fused features for one utterance, through the head, as raw logits:
/// `[T, n_out]` for CTC, `[1, n_classes]` for word classification.
#[allow(clippy::too_many_arguments)]
pub fn head_logits(
    tape: &mut Tape,
    staged: &Staged,
    model: &ModelConfig,
    head: &HeadConfig,
    u: &Utterance,
    audio_mode: StreamMode,
    visual_mode: StreamMode,
    dropout: Option<&DropoutKey>,
) -> Result<BufId> {
    let build = build_fused(tape, staged, model, u, audio_mode, visual_mode, dropout)?;
    match head.kind {
        HeadKind::LinearCtc => linear(tape, staged, "head.out", build.fused),
        HeadKind::WordClassifier => {
            let x = if head.backend == WordBackend::TemporalConv {
                let w = staged_param(staged, "head.conv.weight")?;
                let b = staged_param(staged, "head.bias4conv")?;
                let pad = (head.conv_kernel - 1) / 2;
                let conv = tape.conv1d(build.fused, w, b, 1, pad, pad, 1)?;
                tape.gelu(conv)?
            } else {
                build.fused
            };
            let pooled = tape.mean_rows(x)?;
            linear(tape, staged, "head.out", pooled)
        }
    }
}

/// The stream modes a task evaluates under: absent modalities are filled by
/// the exclusion strategy, defaulting to the learned mask embedding.
pub fn task_modes(task: Task, exclusion: ExclusionStrategy) -> (StreamMode<'static>, StreamMode<'static>) {
    match task {
        Task::Asr => (StreamMode::Clear, exclusion.mode()),
        Task::Vsr => (exclusion.mode(), StreamMode::Clear),
        Task::Avsr | Task::WordClass => (StreamMode::Clear, StreamMode::Clear),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub model: ModelConfig,
    pub task: Task,
    pub head: HeadConfig,
    pub exclusion: ExclusionStrategy,
    pub schedule: ScheduleConfig,
    /// Multiplier on `schedule.total_steps` when the task is VSR.
    pub vsr_step_ratio: f64,
    pub batch_frames: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub val_fraction: f64,
    pub val_every: u64,
    /// Masking augmentation on both streams during AVSR training, with the
    /// same span statistics as pre-training.
    pub augment_spans: bool,
    /// Beta(alpha, alpha) mixup for word classification; 0 disables.
    pub mixup_alpha: f64,
    /// Frames of the zeroed visual window for word classification; 0
    /// disables.
    pub temporal_mask_len: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            model: ModelConfig::desk(),
            task: Task::Avsr,
            head: HeadConfig::linear_ctc(),
            exclusion: ExclusionStrategy::EmbeddingMask,
            schedule: ScheduleConfig::constant(1e-3, 200),
            vsr_step_ratio: 0.5,
            batch_frames: 120,
            min_frames: 12,
            max_frames: 60,
            val_fraction: 0.2,
            val_every: 25,
            augment_spans: true,
            mixup_alpha: 0.4,
            temporal_mask_len: 9,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        let ctc = self.task.is_ctc();
        match (ctc, self.head.kind) {
            (true, HeadKind::LinearCtc) | (false, HeadKind::WordClassifier) => {}
            (true, HeadKind::WordClassifier) => {
                return Err(Error::config("transcription tasks need the CTC head"))
            }
            (false, HeadKind::LinearCtc) => {
                return Err(Error::config("word classification needs the classifier head"))
            }
        }
        if !ctc && self.head.n_classes < 2 {
            return Err(Error::config("word classification needs >= 2 classes"));
        }
        if self.task == Task::Vsr && !(self.vsr_step_ratio > 0.0 && self.vsr_step_ratio <= 1.0) {
            return Err(Error::config(format!(
                "vsr_step_ratio {} outside (0, 1]",
                self.vsr_step_ratio
            )));
        }
        if self.batch_frames == 0 || self.max_frames == 0 {
            return Err(Error::config("batch_frames and max_frames must be >= 1"));
        }
        if self.min_frames > self.max_frames || self.max_frames > self.batch_frames {
            return Err(Error::config(format!(
                "frame limits inconsistent: min {} max {} budget {}",
                self.min_frames, self.max_frames, self.batch_frames
            )));
        }
        if !(0.0..=0.9).contains(&self.val_fraction) {
            return Err(Error::config(format!(
                "val_fraction {} outside [0, 0.9]",
                self.val_fraction
            )));
        }
        if self.mixup_alpha < 0.0 || !self.mixup_alpha.is_finite() {
            return Err(Error::config(format!(
                "mixup_alpha {} must be >= 0",
                self.mixup_alpha
            )));
        }
        Ok(())
    }

    /// The step budget after the VSR shortening.
    pub fn effective_schedule(&self) -> ScheduleConfig {
        let mut s = self.schedule.clone();
        if self.task == Task::Vsr {
            s.total_steps = ((s.total_steps as f64 * self.vsr_step_ratio).round() as u64).max(1);
        }
        s
    }
}

/// A word-classification example: the clip plus its class.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledClip {
    pub utterance: Utterance,
    pub class: usize,
}

/// What fine-tuning starts from: a pre-trained backbone or a fresh one.
fn backbone_params(cfg: &FinetuneConfig, init: Option<&Checkpoint>) -> Result<ParameterSet> {
    let fresh = init_params(&cfg.model, cfg.seed)?;
    let Some(ckpt) = init else {
        return Ok(fresh);
    };
    let required: &[&str] = match cfg.task {
        Task::Asr => &["audio."],
        Task::Vsr => &["visual."],
        _ => &["audio.", "visual."],
    };
    for prefix in required {
        if !ckpt.params.iter().any(|(p, _)| p.starts_with(prefix)) {
            return Err(Error::config(format!(
                "checkpoint has no '{prefix}' parameters; it cannot serve a {:?} task",
                cfg.task
            )));
        }
    }
    for (path, param) in fresh.iter() {
        let loaded = ckpt.params.get(path).ok_or_else(|| {
            Error::config(format!("checkpoint is missing parameter '{path}'"))
        })?;
        if loaded.tensor.shape() != param.tensor.shape() {
            return Err(Error::shape(format!(
                "checkpoint parameter '{path}' has shape {:?}, model wants {:?}",
                loaded.tensor.shape(),
                param.tensor.shape()
            )));
        }
    }
    let mut out = ParameterSet::new();
    for (path, _) in fresh.iter() {
        let p = ckpt.params.get(path).expect("presence checked above");
        out.insert_with(path.clone(), p.tensor.clone(), true)?;
    }
    Ok(out)
}

fn keep_for_ctc(cfg: &FinetuneConfig, u: &Utterance) -> bool {
    u.frames >= cfg.min_frames && u.frames <= cfg.max_frames && u.transcript.is_some()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub step: u64,
    pub lr: f64,
    /// Training loss; absent on validation rows.
    pub loss: Option<f64>,
    pub split: String,
    /// Validation score (aggregate CER for CTC, error rate for word
    /// classification); lower is better.
    pub score: Option<f64>,
}

#[derive(Debug)]
pub struct FinetuneOutcome {
    /// Backbone plus head, from the best validation pass (final state if
    /// validation never ran).
    pub params: ParameterSet,
    pub vocab: Option<Vocabulary>,
    pub metrics: Vec<FinetuneRecord>,
    pub best_score: Option<f64>,
    pub steps: u64,
}

struct CtcItem {
    utterance: Utterance,
    target: Vec<usize>,
}

fn ctc_train_loss(
    cfg: &FinetuneConfig,
    params: &ParameterSet,
    items: &[&CtcItem],
    step: u64,
    train: bool,
) -> Result<(BTreeMap<String, Tensor>, f64)> {
    let n = items.len().max(1) as f64;
    let results: Vec<Result<(Option<BTreeMap<String, Tensor>>, f64)>> =
        par::map_slice(items, |item| {
            let u = &item.utterance;
            let utt_key = rng::key(&u.id);
            let mut tape = Tape::new();
            let staged = tape.stage(params)?;
            let plans;
            let (audio_mode, visual_mode) = if cfg.task == Task::Avsr && cfg.augment_spans && train
            {
                plans = sample_pretrain_plans(&cfg.model, u.frames, cfg.seed, step, utt_key)?;
                (
                    StreamMode::Masked(&plans.audio),
                    StreamMode::Masked(&plans.visual),
                )
            } else {
                task_modes(cfg.task, cfg.exclusion)
            };
            let key = DropoutKey {
                seed: cfg.seed,
                step,
                utterance: utt_key,
            };
            let dropout = train.then_some(&key);
            let logits = head_logits(
                &mut tape, &staged, &cfg.model, &cfg.head, u, audio_mode, visual_mode, dropout,
            )?;
            let lp = tape.log_softmax_rows(logits)?;
            let loss = ctc_loss(&mut tape, lp, &item.target)?;
            let value = tape.scalar_value(loss)?;
            if train {
                let scaled = tape.scale(loss, 1.0 / n)?;
                let grads = tape.backward(scaled)?;
                Ok((Some(grads_by_path(&staged, &grads)), value))
            } else {
                Ok((None, value))
            }
        });
    let mut grads = BTreeMap::new();
    let mut total = 0.0;
    for r in results {
        let (g, v) = r?;
        total += v;
        if let Some(g) = g {
            merge_grads(&mut grads, g);
        }
    }
    Ok((grads, total / n))
}

fn merge_grads(acc: &mut BTreeMap<String, Tensor>, grads: BTreeMap<String, Tensor>) {
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

/// Greedy-decodes one utterance under the task's evaluation modes.
fn decode_one(
    model: &ModelConfig,
    head: &HeadConfig,
    params: &ParameterSet,
    vocab: &Vocabulary,
    task: Task,
    exclusion: ExclusionStrategy,
    u: &Utterance,
) -> Result<String> {
    let (audio_mode, visual_mode) = task_modes(task, exclusion);
    let mut tape = Tape::new();
    let staged = tape.stage(params)?;
    let logits = head_logits(&mut tape, &staged, model, head, u, audio_mode, visual_mode, None)?;
    let lp = tape.log_softmax_rows(logits)?;
    best_path_decode(tape.value(lp), vocab)
}

/// Per-utterance transcription quality plus corpus aggregates. Aggregate
/// rates are total edit distance over total reference length, not a mean of
/// per-utterance rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub cer: f64,
    pub wer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub reference: String,
    pub hypothesis: String,
    pub cer: f64,
    pub wer: f64,
}

pub fn evaluate_transcription(
    model: &ModelConfig,
    head: &HeadConfig,
    params: &ParameterSet,
    vocab: &Vocabulary,
    task: Task,
    exclusion: ExclusionStrategy,
    utterances: &[Utterance],
) -> Result<EvalReport> {
    let hyps: Vec<Result<String>> = par::map_slice(utterances, |u| {
        decode_one(model, head, params, vocab, task, exclusion, u)
    });
    let mut rows = Vec::with_capacity(utterances.len());
    let mut char_dist = 0usize;
    let mut char_len = 0usize;
    let mut word_dist = 0usize;
    let mut word_len = 0usize;
    for (u, hyp) in utterances.iter().zip(hyps) {
        let hyp = hyp?;
        let reference = u
            .transcript
            .clone()
            .ok_or_else(|| Error::data(format!("utterance '{}' has no transcript", u.id)))?;
        let c = cer(&reference, &hyp);
        let w = wer(&reference, &hyp);
        char_dist += c.distance;
        char_len += c.reference_len;
        word_dist += w.distance;
        word_len += w.reference_len;
        rows.push(EvalRow {
            id: u.id.clone(),
            reference,
            hypothesis: hyp,
            cer: c.rate,
            wer: w.rate,
        });
    }
    Ok(EvalReport {
        rows,
        cer: char_dist as f64 / char_len.max(1) as f64,
        wer: word_dist as f64 / word_len.max(1) as f64,
    })
}

pub fn write_eval_report(w: &mut impl std::io::Write, report: &EvalReport) -> Result<()> {
    writeln!(w, "id\treference\thypothesis\tcer\twer")?;
    for r in &report.rows {
        writeln!(
            w,
            "{}\t{}\t{}\t{:.4}\t{:.4}",
            r.id, r.reference, r.hypothesis, r.cer, r.wer
        )?;
    }
    writeln!(w, "# aggregate\tcer={:.4}\twer={:.4}\tn={}", report.cer, report.wer, report.rows.len())?;
    Ok(())
}

pub fn write_finetune_jsonl(w: &mut impl std::io::Write, records: &[FinetuneRecord]) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::format(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Hypotheses and references, one utterance per line, id-prefixed.
pub fn write_hyp_ref_files(
    hyp_w: &mut impl std::io::Write,
    ref_w: &mut impl std::io::Write,
    report: &EvalReport,
) -> Result<()> {
    for r in &report.rows {
        writeln!(hyp_w, "{} {}", r.id, r.hypothesis)?;
        writeln!(ref_w, "{} {}", r.id, r.reference)?;
    }
    Ok(())
}

/// Fine-tunes for transcription (ASR/VSR/AVSR). The vocabulary is built
/// from every transcript in the corpus; the best-validation parameters are
/// returned.
pub fn finetune_transcription(
    cfg: &FinetuneConfig,
    corpus: &[Utterance],
    spf: usize,
    init: Option<&Checkpoint>,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if !cfg.task.is_ctc() {
        return Err(Error::config("use finetune_wordclass for classification"));
    }
    if spf != cfg.model.audio.total_stride() {
        return Err(Error::config(format!(
            "corpus has {spf} samples per frame but the audio encoder strides by {}",
            cfg.model.audio.total_stride()
        )));
    }
    let vocab = Vocabulary::from_transcripts(
        corpus.iter().filter_map(|u| u.transcript.as_deref()),
    )?;
    let mut params = backbone_params(cfg, init)?;
    init_head_params(
        &cfg.head,
        cfg.model.dim(),
        vocab.size(),
        "head",
        cfg.seed,
        &mut params,
    )?;

    let kept: Vec<Utterance> = corpus
        .iter()
        .filter(|u| keep_for_ctc(cfg, u))
        .cloned()
        .collect();
    if kept.is_empty() {
        return Err(Error::data("no usable transcribed utterances"));
    }
    let (train_ix, val_ix) = super::split_indices(kept.len(), cfg.val_fraction, cfg.seed);
    let train: Vec<CtcItem> = train_ix
        .iter()
        .map(|&i| {
            Ok(CtcItem {
                target: vocab.encode(kept[i].transcript.as_deref().unwrap_or_default())?,
                utterance: kept[i].clone(),
            })
        })
        .collect::<Result<_>>()?;
    if train.is_empty() {
        return Err(Error::data("validation split swallowed every utterance"));
    }
    let val: Vec<Utterance> = val_ix.iter().map(|&i| kept[i].clone()).collect();

    let schedule = cfg.effective_schedule();
    let total = schedule.total_steps;
    let mut opt = AdamState::new();
    let mut metrics = Vec::new();
    let mut best: Option<(f64, ParameterSet)> = None;
    let mut step = 0u64;
    let mut epoch = 0u64;

    'run: while step < total {
        let order = epoch_order(train.len(), cfg.seed, epoch);
        for batch in batches_of(&train, &order, cfg.batch_frames) {
            if step >= total {
                break 'run;
            }
            let lr = lr_at(step, &schedule);
            let (grads, loss) = ctc_train_loss(cfg, &params, &batch, step, true)?;
            adam_step(&mut params, &grads, &mut opt, lr)?;
            step += 1;
            metrics.push(FinetuneRecord {
                step,
                lr,
                loss: Some(loss),
                split: "train".to_string(),
                score: None,
            });
            if cfg.val_every > 0 && step % cfg.val_every == 0 && !val.is_empty() {
                let report = evaluate_transcription(
                    &cfg.model, &cfg.head, &params, &vocab, cfg.task, cfg.exclusion, &val,
                )?;
                metrics.push(FinetuneRecord {
                    step,
                    lr,
                    loss: None,
                    split: "val".to_string(),
                    score: Some(report.cer),
                });
                if best.as_ref().is_none_or(|(b, _)| report.cer < *b) {
                    best = Some((report.cer, params.clone()));
                }
            }
        }
        epoch += 1;
    }
    if !val.is_empty() {
        let report = evaluate_transcription(
            &cfg.model, &cfg.head, &params, &vocab, cfg.task, cfg.exclusion, &val,
        )?;
        metrics.push(FinetuneRecord {
            step,
            lr: lr_at(step, &schedule),
            loss: None,
            split: "val".to_string(),
            score: Some(report.cer),
        });
        if best.as_ref().is_none_or(|(b, _)| report.cer < *b) {
            best = Some((report.cer, params.clone()));
        }
    }
    let (best_score, params) = match best {
        Some((s, p)) => (Some(s), p),
        None => (None, params),
    };
    Ok(FinetuneOutcome {
        params,
        vocab: Some(vocab),
        metrics,
        best_score,
        steps: step,
    })
}

fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(seed, "finetune-epoch", &[epoch]);
    order.shuffle(&mut r);
    order
}

fn batches_of<'a>(items: &'a [CtcItem], order: &[usize], budget: usize) -> Vec<Vec<&'a CtcItem>> {
    let mut batches = Vec::new();
    let mut cur: Vec<&CtcItem> = Vec::new();
    let mut cur_frames = 0;
    for &i in order {
        let f = items[i].utterance.frames;
        if !cur.is_empty() && cur_frames + f > budget {
            batches.push(std::mem::take(&mut cur));
            cur_frames = 0;
        }
        cur.push(&items[i]);
        cur_frames += f;
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches
}

/// Classification accuracy of a word classifier over labeled clips.
pub fn evaluate_wordclass(
    model: &ModelConfig,
    head: &HeadConfig,
    params: &ParameterSet,
    clips: &[LabeledClip],
) -> Result<f64> {
    if clips.is_empty() {
        return Err(Error::data("no clips to evaluate"));
    }
    let preds: Vec<Result<usize>> = par::map_slice(clips, |clip| {
        let mut tape = Tape::new();
        let staged = tape.stage(params)?;
        let logits = head_logits(
            &mut tape,
            &staged,
            model,
            head,
            &clip.utterance,
            StreamMode::Clear,
            StreamMode::Clear,
            None,
        )?;
        let row = tape.value(logits).row(0).to_vec();
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        Ok(best)
    });
    let mut hits = 0;
    for (clip, pred) in clips.iter().zip(preds) {
        hits += usize::from(pred? == clip.class);
    }
    Ok(hits as f64 / clips.len() as f64)
}

/// Fine-tunes whole-clip word classification with mixup and a zeroed
/// temporal window on the visual stream. Clips must share one frame count
/// (callers crop to a fixed length first).
pub fn finetune_wordclass(
    cfg: &FinetuneConfig,
    clips: &[LabeledClip],
    spf: usize,
    init: Option<&Checkpoint>,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if cfg.task != Task::WordClass {
        return Err(Error::config("finetune_wordclass needs the word_class task"));
    }
    if spf != cfg.model.audio.total_stride() {
        return Err(Error::config(format!(
            "clips have {spf} samples per frame but the audio encoder strides by {}",
            cfg.model.audio.total_stride()
        )));
    }
    if clips.is_empty() {
        return Err(Error::data("no labeled clips"));
    }
    let frames = clips[0].utterance.frames;
    for c in clips {
        c.utterance.validate(spf)?;
        if c.utterance.frames != frames {
            return Err(Error::shape(format!(
                "clip '{}' has {} frames, expected {frames} everywhere",
                c.utterance.id, c.utterance.frames
            )));
        }
        if c.class >= cfg.head.n_classes {
            return Err(Error::data(format!(
                "clip '{}' labeled {} with only {} classes",
                c.utterance.id, c.class, cfg.head.n_classes
            )));
        }
    }

    let mut params = backbone_params(cfg, init)?;
    init_head_params(
        &cfg.head,
        cfg.model.dim(),
        cfg.head.n_classes,
        "head",
        cfg.seed,
        &mut params,
    )?;

    let (train_ix, val_ix) = super::split_indices(clips.len(), cfg.val_fraction, cfg.seed);
    if train_ix.is_empty() {
        return Err(Error::data("validation split swallowed every clip"));
    }
    let val: Vec<LabeledClip> = val_ix.iter().map(|&i| clips[i].clone()).collect();

    let schedule = cfg.effective_schedule();
    let total = schedule.total_steps;
    let clips_per_batch = (cfg.batch_frames / frames).max(1);
    let mut opt = AdamState::new();
    let mut metrics = Vec::new();
    let mut best: Option<(f64, ParameterSet)> = None;
    let mut step = 0u64;
    let mut epoch = 0u64;

    'run: while step < total {
        let order = epoch_order(train_ix.len(), cfg.seed, epoch);
        for chunk in order.chunks(clips_per_batch) {
            if step >= total {
                break 'run;
            }
            let lr = lr_at(step, &schedule);
            let batch: Vec<&LabeledClip> = chunk.iter().map(|&i| &clips[train_ix[i]]).collect();
            let (grads, loss) = wordclass_train_loss(cfg, &params, &batch, step)?;
            adam_step(&mut params, &grads, &mut opt, lr)?;
            step += 1;
            metrics.push(FinetuneRecord {
                step,
                lr,
                loss: Some(loss),
                split: "train".to_string(),
                score: None,
            });
            if cfg.val_every > 0 && step % cfg.val_every == 0 && !val.is_empty() {
                let acc = evaluate_wordclass(&cfg.model, &cfg.head, &params, &val)?;
                let err = 1.0 - acc;
                metrics.push(FinetuneRecord {
                    step,
                    lr,
                    loss: None,
                    split: "val".to_string(),
                    score: Some(err),
                });
                if best.as_ref().is_none_or(|(b, _)| err < *b) {
                    best = Some((err, params.clone()));
                }
            }
        }
        epoch += 1;
    }
    if !val.is_empty() {
        let acc = evaluate_wordclass(&cfg.model, &cfg.head, &params, &val)?;
        let err = 1.0 - acc;
        metrics.push(FinetuneRecord {
            step,
            lr: lr_at(step, &schedule),
            loss: None,
            split: "val".to_string(),
            score: Some(err),
        });
        if best.as_ref().is_none_or(|(b, _)| err < *b) {
            best = Some((err, params.clone()));
        }
    }
    let (best_score, params) = match best {
        Some((s, p)) => (Some(s), p),
        None => (None, params),
    };
    Ok(FinetuneOutcome {
        params,
        vocab: None,
        metrics,
        best_score,
        steps: step,
    })
}

fn wordclass_train_loss(
    cfg: &FinetuneConfig,
    params: &ParameterSet,
    batch: &[&LabeledClip],
    step: u64,
) -> Result<(BTreeMap<String, Tensor>, f64)> {
    let n = batch.len() as f64;
    // mixup partners: a seeded shuffle of the batch
    let partners: Vec<usize> = {
        use rand::seq::SliceRandom;
        let mut ix: Vec<usize> = (0..batch.len()).collect();
        let mut r = rng::stream(cfg.seed, "mixup-partner", &[step]);
        ix.shuffle(&mut r);
        ix
    };
    let prepared: Vec<Result<(Utterance, Vec<f64>)>> = batch
        .iter()
        .enumerate()
        .map(|(i, clip)| {
            let ta = one_hot(clip.class, cfg.head.n_classes)?;
            if cfg.mixup_alpha > 0.0 && batch.len() > 1 {
                let partner = batch[partners[i]];
                let tb = one_hot(partner.class, cfg.head.n_classes)?;
                let mut r =
                    rng::stream(cfg.seed, "mixup-lambda", &[step, i as u64]);
                let lam = draw_mixup_lambda(cfg.mixup_alpha, &mut r)?;
                mixup(&clip.utterance, &partner.utterance, &ta, &tb, lam)
            } else {
                Ok((clip.utterance.clone(), ta))
            }
        })
        .collect();
    let mut items = Vec::with_capacity(batch.len());
    for p in prepared {
        items.push(p?);
    }

    let results: Vec<Result<(BTreeMap<String, Tensor>, f64)>> =
        par::map_slice(&items, |(u, target)| {
            let utt_key = rng::key(&u.id);
            let mut tape = Tape::new();
            let staged = tape.stage(params)?;
            let window = if cfg.temporal_mask_len > 0 {
                let mut r = rng::stream(cfg.seed, "temporal-mask", &[step, utt_key]);
                temporal_window(u.frames, cfg.temporal_mask_len, &mut r)
            } else {
                Vec::new()
            };
            let key = DropoutKey {
                seed: cfg.seed,
                step,
                utterance: utt_key,
            };
            let logits = head_logits(
                &mut tape,
                &staged,
                &cfg.model,
                &cfg.head,
                u,
                StreamMode::Clear,
                StreamMode::ZeroWindow(&window),
                Some(&key),
            )?;
            let row = tape.slice_row(logits, 0)?;
            let target_leaf = tape.leaf(Tensor::from_vec(target.clone()))?;
            let loss = tape.soft_cross_entropy_vec(row, target_leaf)?;
            let value = tape.scalar_value(loss)?;
            let scaled = tape.scale(loss, 1.0 / n)?;
            let grads = tape.backward(scaled)?;
            Ok((grads_by_path(&staged, &grads), value))
        });
    let mut grads = BTreeMap::new();
    let mut total = 0.0;
    for r in results {
        let (g, v) = r?;
        total += v;
        merge_grads(&mut grads, g);
    }
    Ok((grads, total / n))
}
