//! One function per subcommand. Each validates its config before touching
//! anything, writes artifacts under the run's output directory, echoes the
//! resolved config there, and prints a one-line summary to stdout.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use avfuse_core::checkpoint::Checkpoint;
use avfuse_core::data::{
    filter_and_crop, generate_corpus, load_corpus, save_corpus, FilterOutcome, Utterance,
};
use avfuse_core::diffcore::{
    grad_check, grads_by_path, BufId, CoordSelection, GradCheckOptions, ParameterSet, Staged,
    Tape, Tensor,
};
use avfuse_core::downstream::ctc::ctc_loss;
use avfuse_core::downstream::finetune::{
    evaluate_transcription, evaluate_wordclass, finetune_transcription, finetune_wordclass,
    write_eval_report, write_finetune_jsonl, write_hyp_ref_files, ExclusionStrategy,
    FinetuneConfig, FinetuneOutcome, LabeledClip, Task,
};
use avfuse_core::downstream::metrics::Vocabulary;
use avfuse_core::downstream::probe::{linear_probe, ProbeReport};
use avfuse_core::encoders::Modality;
use avfuse_core::model::{
    fused_embeddings, init_params, pretrain_forward, sample_pretrain_plans,
    sample_step_negatives, ModelConfig, StreamMode,
};
use avfuse_core::rng;
use avfuse_core::trainer::{pretrain, resume_pretrain, write_metrics_jsonl};
use avfuse_core::{par, Error, Result};
use serde::Serialize;

use crate::config::RunConfig;

/// 0 success, 1 config error, 2 data error, 3 numeric failure.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Shape(_) => 1,
        Error::Data(_) | Error::Format(_) | Error::Io(_) => 2,
        Error::Numeric(_) => 3,
    }
}

/// The serialized name of a config enum value, e.g. `Task::WordClass` →
/// `word_class`; keeps CLI output in the config file's vocabulary.
fn enum_name<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value)
        .unwrap_or_else(|_| "?".to_string())
        .trim_matches('"')
        .to_string()
}

pub fn parse_strategy(name: &str) -> Result<ExclusionStrategy> {
    match name {
        "input_zero" | "x_to_0" => Ok(ExclusionStrategy::InputZero),
        "embedding_zero" | "v_to_0" => Ok(ExclusionStrategy::EmbeddingZero),
        "embedding_mask" | "v_to_m" => Ok(ExclusionStrategy::EmbeddingMask),
        other => Err(Error::config(format!(
            "unknown exclusion strategy '{other}' (expected input_zero/x_to_0, \
             embedding_zero/v_to_0, or embedding_mask/v_to_m)"
        ))),
    }
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

pub fn synth(cfg: &RunConfig, out: Option<&Path>) -> Result<PathBuf> {
    cfg.validate()?;
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.out_dir.join("corpus.bin"));
    let corpus = generate_corpus(&cfg.data, cfg.seed)?;
    if corpus.is_empty() {
        log::warn!("synthesized corpus is empty (n_utterances = 0)");
    }
    create_parent(&path)?;
    save_corpus(&path, &corpus, cfg.data.samples_per_frame)?;
    cfg.echo_resolved()?;
    let frames: usize = corpus.iter().map(|u| u.frames).sum();
    println!(
        "synth: utterances={} frames={} file={}",
        corpus.len(),
        frames,
        path.display()
    );
    Ok(path)
}

pub struct PretrainArtifacts {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub snapshots: Vec<PathBuf>,
}

pub fn pretrain_cmd(
    cfg: &RunConfig,
    corpus_path: &Path,
    resume: Option<&Path>,
) -> Result<PretrainArtifacts> {
    cfg.validate()?;
    let corpus = load_corpus(corpus_path)?;
    let pcfg = cfg.pretrain_config();
    let run = match resume {
        Some(p) => resume_pretrain(
            &pcfg,
            &corpus.utterances,
            corpus.samples_per_frame,
            Checkpoint::load(p)?,
        )?,
        None => pretrain(&pcfg, &corpus.utterances, corpus.samples_per_frame)?,
    };

    let dir = cfg.out_dir.join("pretrain");
    fs::create_dir_all(&dir)?;
    let metrics = dir.join("metrics.jsonl");
    let file = if resume.is_some() {
        OpenOptions::new().create(true).append(true).open(&metrics)?
    } else {
        File::create(&metrics)?
    };
    let mut w = BufWriter::new(file);
    write_metrics_jsonl(&mut w, &run.metrics)?;
    w.flush()?;

    let checkpoint = dir.join("checkpoint.bin");
    run.checkpoint.save(&checkpoint)?;
    let mut snapshots = Vec::new();
    for snap in &run.snapshots {
        let p = dir.join(format!("checkpoint-{:06}.bin", snap.step));
        snap.save(&p)?;
        snapshots.push(p);
    }
    cfg.echo_resolved()?;

    let last_train = run.metrics.iter().rev().find(|m| m.split == "train");
    match last_train {
        Some(m) => println!(
            "pretrain: steps={} final_train_loss={:.6} checkpoint={}",
            run.checkpoint.step,
            m.loss_total,
            checkpoint.display()
        ),
        None => println!(
            "pretrain: steps={} checkpoint={}",
            run.checkpoint.step,
            checkpoint.display()
        ),
    }
    Ok(PretrainArtifacts {
        checkpoint,
        metrics,
        snapshots,
    })
}

/// Fixed-length labeled clips for word classification: utterances shorter
/// than `max_frames` are dropped, longer ones cropped to a seeded window,
/// and each clip is labeled with its dominant latent state (ties → lowest).
pub fn wordclass_clips(
    fcfg: &FinetuneConfig,
    utterances: &[Utterance],
    spf: usize,
    n_classes: usize,
) -> Result<Vec<LabeledClip>> {
    let clip_len = fcfg.max_frames;
    let mut clips = Vec::new();
    for u in utterances {
        let mut r = rng::stream(fcfg.seed, "wordclass-clip", &[rng::key(&u.id)]);
        let kept = match filter_and_crop(u, clip_len, clip_len, spf, &mut r)? {
            FilterOutcome::Kept(u) => u,
            FilterOutcome::Discarded => continue,
        };
        let states = kept.latent_states.as_ref().ok_or_else(|| {
            Error::data(format!("utterance {} has no latent-state labels", u.id))
        })?;
        let mut counts = vec![0usize; n_classes];
        for &s in states {
            let s = s as usize;
            if s >= n_classes {
                return Err(Error::data(format!(
                    "utterance {} has latent state {s} but the head has {n_classes} classes",
                    u.id
                )));
            }
            counts[s] += 1;
        }
        let class = (0..n_classes).max_by_key(|&c| (counts[c], n_classes - c)).unwrap_or(0);
        clips.push(LabeledClip {
            utterance: kept,
            class,
        });
    }
    Ok(clips)
}

fn save_vocab(path: &Path, vocab: &Vocabulary) -> Result<()> {
    let symbols: String = (1..vocab.size())
        .map(|i| vocab.symbol(i))
        .collect::<Result<String>>()?;
    let json = serde_json::to_string(&serde_json::json!({ "symbols": symbols }))
        .map_err(|e| Error::format(e.to_string()))?;
    fs::write(path, json)?;
    Ok(())
}

fn load_vocab(path: &Path) -> Result<Vocabulary> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::data(format!("vocabulary file {}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::format(e.to_string()))?;
    let symbols = value["symbols"]
        .as_str()
        .ok_or_else(|| Error::format(format!("{} has no \"symbols\" string", path.display())))?;
    let chars: Vec<char> = symbols.chars().collect();
    Vocabulary::new(&chars)
}

pub struct FinetuneArtifacts {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub vocab: Option<PathBuf>,
    pub best_score: Option<f64>,
    pub steps: u64,
}

pub fn finetune_cmd(
    cfg: &RunConfig,
    corpus_path: &Path,
    init: Option<&Path>,
) -> Result<FinetuneArtifacts> {
    cfg.validate()?;
    let corpus = load_corpus(corpus_path)?;
    let fcfg = cfg.finetune_config();
    let init_ckpt = init.map(Checkpoint::load).transpose()?;

    let outcome: FinetuneOutcome = if fcfg.task == Task::WordClass {
        if fcfg.head.n_classes != cfg.data.n_states {
            return Err(Error::config(format!(
                "word classifier has {} classes but the corpus has {} latent states",
                fcfg.head.n_classes, cfg.data.n_states
            )));
        }
        let clips = wordclass_clips(
            &fcfg,
            &corpus.utterances,
            corpus.samples_per_frame,
            fcfg.head.n_classes,
        )?;
        finetune_wordclass(&fcfg, &clips, corpus.samples_per_frame, init_ckpt.as_ref())?
    } else {
        finetune_transcription(
            &fcfg,
            &corpus.utterances,
            corpus.samples_per_frame,
            init_ckpt.as_ref(),
        )?
    };

    let dir = cfg.out_dir.join("finetune");
    fs::create_dir_all(&dir)?;
    let metrics = dir.join("metrics.jsonl");
    let mut w = BufWriter::new(File::create(&metrics)?);
    write_finetune_jsonl(&mut w, &outcome.metrics)?;
    w.flush()?;

    let vocab = match &outcome.vocab {
        Some(v) => {
            let p = dir.join("vocab.json");
            save_vocab(&p, v)?;
            Some(p)
        }
        None => None,
    };

    let checkpoint = dir.join("checkpoint.bin");
    Checkpoint {
        params: outcome.params,
        optimizer: None,
        step: outcome.steps,
        epoch: 0,
        group_in_epoch: 0,
        seed: cfg.seed,
        config_json: serde_json::to_string(&fcfg).map_err(|e| Error::format(e.to_string()))?,
    }
    .save(&checkpoint)?;
    cfg.echo_resolved()?;

    let best = outcome
        .best_score
        .map_or("none".to_string(), |b| format!("{b:.4}"));
    println!(
        "finetune: task={} steps={} best_val={} checkpoint={}",
        enum_name(&fcfg.task),
        outcome.steps,
        best,
        checkpoint.display()
    );
    Ok(FinetuneArtifacts {
        checkpoint,
        metrics,
        vocab,
        best_score: outcome.best_score,
        steps: outcome.steps,
    })
}

/// The fine-tuning config a checkpoint was trained with, when it has one.
fn saved_finetune_config(ckpt: &Checkpoint) -> Option<FinetuneConfig> {
    serde_json::from_str(&ckpt.config_json).ok()
}

pub struct EvalArtifacts {
    pub report: PathBuf,
    pub cer: Option<f64>,
    pub wer: Option<f64>,
    pub accuracy: Option<f64>,
    pub n: usize,
}

pub fn eval_cmd(
    cfg: &RunConfig,
    corpus_path: &Path,
    checkpoint: Option<&Path>,
    strategy: Option<ExclusionStrategy>,
) -> Result<EvalArtifacts> {
    cfg.validate()?;
    let mut fcfg = cfg.finetune_config();
    if let Some(s) = strategy {
        fcfg.exclusion = s;
    }
    let ckpt_path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.out_dir.join("finetune").join("checkpoint.bin"));
    let ckpt = Checkpoint::load(&ckpt_path)?;
    if let Some(saved) = saved_finetune_config(&ckpt) {
        if saved.task != fcfg.task {
            return Err(Error::config(format!(
                "checkpoint {} was fine-tuned for task {}, but the config asks for {}",
                ckpt_path.display(),
                enum_name(&saved.task),
                enum_name(&fcfg.task)
            )));
        }
    }
    if !ckpt.params.contains("head.out.weight") {
        return Err(Error::config(format!(
            "checkpoint {} has no task head; run finetune first",
            ckpt_path.display()
        )));
    }
    let corpus = load_corpus(corpus_path)?;
    let dir = cfg.out_dir.join("eval");
    fs::create_dir_all(&dir)?;

    let artifacts = if fcfg.task == Task::WordClass {
        let clips = wordclass_clips(
            &fcfg,
            &corpus.utterances,
            corpus.samples_per_frame,
            fcfg.head.n_classes,
        )?;
        let accuracy = evaluate_wordclass(&fcfg.model, &fcfg.head, &ckpt.params, &clips)?;
        let report = dir.join("report.txt");
        fs::write(
            &report,
            format!("accuracy={:.4}\tn={}\n", accuracy, clips.len()),
        )?;
        println!(
            "eval: task={} accuracy={:.4} n={}",
            enum_name(&fcfg.task),
            accuracy,
            clips.len()
        );
        EvalArtifacts {
            report,
            cer: None,
            wer: None,
            accuracy: Some(accuracy),
            n: clips.len(),
        }
    } else {
        let vocab = load_vocab(&ckpt_path.with_file_name("vocab.json"))?;
        let utts: Vec<Utterance> = corpus
            .utterances
            .iter()
            .filter(|u| u.transcript.is_some())
            .cloned()
            .collect();
        if utts.is_empty() {
            return Err(Error::data("corpus has no transcribed utterances"));
        }
        let report = evaluate_transcription(
            &fcfg.model,
            &fcfg.head,
            &ckpt.params,
            &vocab,
            fcfg.task,
            fcfg.exclusion,
            &utts,
        )?;
        let report_path = dir.join("report.tsv");
        let mut w = BufWriter::new(File::create(&report_path)?);
        write_eval_report(&mut w, &report)?;
        w.flush()?;
        let mut hyp = BufWriter::new(File::create(dir.join("hyp.txt"))?);
        let mut refs = BufWriter::new(File::create(dir.join("ref.txt"))?);
        write_hyp_ref_files(&mut hyp, &mut refs, &report)?;
        hyp.flush()?;
        refs.flush()?;
        println!(
            "eval: task={} exclusion={} cer={:.4} wer={:.4} n={}",
            enum_name(&fcfg.task),
            enum_name(&fcfg.exclusion),
            report.cer,
            report.wer,
            report.rows.len()
        );
        EvalArtifacts {
            report: report_path,
            cer: Some(report.cer),
            wer: Some(report.wer),
            accuracy: None,
            n: report.rows.len(),
        }
    };
    cfg.echo_resolved()?;
    Ok(artifacts)
}

/// Checks that a checkpoint carries every parameter a fresh model of this
/// shape would have, so forward passes cannot hit a missing path later.
fn check_backbone(cfg: &ModelConfig, params: &ParameterSet, seed: u64) -> Result<()> {
    let fresh = init_params(cfg, seed)?;
    for (path, p) in fresh.iter() {
        let found = params.get(path).ok_or_else(|| {
            Error::config(format!("checkpoint is missing backbone parameter {path}"))
        })?;
        if found.tensor.shape() != p.tensor.shape() {
            return Err(Error::config(format!(
                "checkpoint parameter {path} has shape {:?}, model wants {:?}",
                found.tensor.shape(),
                p.tensor.shape()
            )));
        }
    }
    Ok(())
}

pub fn probe_cmd(
    cfg: &RunConfig,
    corpus_path: &Path,
    checkpoint: Option<&Path>,
) -> Result<(ProbeReport, PathBuf)> {
    cfg.validate()?;
    let corpus = load_corpus(corpus_path)?;
    let params = match checkpoint {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            check_backbone(&cfg.model, &ckpt.params, cfg.seed)?;
            ckpt.params
        }
        None => init_params(&cfg.model, cfg.seed)?,
    };

    let per_utterance: Vec<Result<(Vec<Vec<f64>>, Vec<usize>)>> =
        par::map_slice(&corpus.utterances, |u| {
            let states = u.latent_states.as_ref().ok_or_else(|| {
                Error::data(format!("utterance {} has no latent-state labels", u.id))
            })?;
            let emb = fused_embeddings(&cfg.model, &params, u, StreamMode::Clear, StreamMode::Clear)?;
            let feats: Vec<Vec<f64>> = (0..u.frames).map(|t| emb.frames.row(t).to_vec()).collect();
            let labels: Vec<usize> = states.iter().map(|&s| s as usize).collect();
            Ok((feats, labels))
        });
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for r in per_utterance {
        let (f, l) = r?;
        features.extend(f);
        labels.extend(l);
    }

    let report = linear_probe(&features, &labels, cfg.data.n_states, &cfg.probe_config())?;
    let dir = cfg.out_dir.join("probe");
    fs::create_dir_all(&dir)?;
    let path = dir.join("report.json");
    fs::write(
        &path,
        serde_json::to_string_pretty(&report).map_err(|e| Error::format(e.to_string()))?,
    )?;
    cfg.echo_resolved()?;
    println!(
        "probe: train_acc={:.4} test_acc={:.4} n_train={} n_test={} classes={}",
        report.train_accuracy, report.test_accuracy, report.n_train, report.n_test,
        report.n_classes
    );
    Ok((report, path))
}

fn gradcheck_model(size: &str) -> Result<(ModelConfig, usize)> {
    match size {
        "tiny" => Ok((ModelConfig::tiny(), 10)),
        "desk" => Ok((ModelConfig::desk(), 14)),
        other => Err(Error::config(format!(
            "unknown gradcheck size '{other}' (expected tiny or desk)"
        ))),
    }
}

fn gradcheck_utterance(model: &ModelConfig, frames: usize, seed: u64) -> Result<Utterance> {
    let data = avfuse_core::data::SyntheticConfig {
        n_states: 3,
        n_utterances: 1,
        frame_min: frames,
        frame_max: frames,
        visual_height: 4,
        visual_width: 4,
        samples_per_frame: model.audio.total_stride(),
        state_symbols: "abc".to_string(),
        ..avfuse_core::data::SyntheticConfig::default()
    };
    Ok(generate_corpus(&data, seed)?.remove(0))
}

fn run_one_gradcheck(
    params: &ParameterSet,
    forward: &(dyn Fn(&mut Tape, &Staged) -> Result<BufId> + Sync),
    opts: &GradCheckOptions,
) -> Result<avfuse_core::diffcore::GradCheckReport> {
    let analytic = {
        let mut tape = Tape::new();
        let staged = tape.stage(params)?;
        let loss = forward(&mut tape, &staged)?;
        let grads = tape.backward(loss)?;
        grads_by_path(&staged, &grads)
            .into_iter()
            .collect::<BTreeMap<_, _>>()
    };
    let loss_fn = move |p: &ParameterSet| -> Result<f64> {
        let mut tape = Tape::new();
        let staged = tape.stage(p)?;
        let loss = forward(&mut tape, &staged)?;
        tape.scalar_value(loss)
    };
    grad_check(&loss_fn, params, &analytic, opts)
}

pub struct GradcheckSummary {
    pub lines: Vec<String>,
    pub passed: usize,
    pub total: usize,
}

pub fn gradcheck_cmd(size: &str, seeds: u64, base_seed: u64) -> Result<GradcheckSummary> {
    let (model, frames) = gradcheck_model(size)?;
    if seeds == 0 {
        return Err(Error::config("gradcheck needs at least one seed"));
    }
    let selection = match size {
        "tiny" => CoordSelection::All,
        _ => CoordSelection::Sample(4),
    };
    let mut summary = GradcheckSummary {
        lines: Vec::new(),
        passed: 0,
        total: 0,
    };
    for s in base_seed..base_seed + seeds {
        let params = init_params(&model, s)?;
        let u = gradcheck_utterance(&model, frames, s)?;
        let plans = sample_pretrain_plans(&model, u.frames, s, 1, 0)?;
        let na = sample_step_negatives(&model, &plans, Modality::Audio, s, 1, 0)?;
        let nv = sample_step_negatives(&model, &plans, Modality::Visual, s, 1, 0)?;
        let model2 = model.clone();
        let u2 = u.clone();
        let plans2 = plans.clone();
        let contrastive = move |tape: &mut Tape, staged: &Staged| -> Result<BufId> {
            let out = pretrain_forward(
                tape, staged, &model2, &u2, &plans2, &na, &nv, None, None,
            )?;
            let la = out.to_audio.map(|d| d.mean(tape)).transpose()?;
            let lv = out.to_visual.map(|d| d.mean(tape)).transpose()?;
            let parts: Vec<BufId> = [la, lv].into_iter().flatten().collect();
            tape.sum_list(&parts)
        };
        let opts = GradCheckOptions {
            selection,
            seed: s,
            ..GradCheckOptions::default()
        };
        let report = run_one_gradcheck(&params, &contrastive, &opts)?;
        push_gradcheck_line(&mut summary, "contrastive", s, &report);

        let mut ctc_params = ParameterSet::new();
        let mut r = rng::stream(s, "gradcheck-ctc", &[]);
        use rand::Rng;
        let t = 4 + (s % 3) as usize;
        let v = 3usize;
        let logits: Vec<f64> = (0..t * v).map(|_| r.random_range(-1.0..1.0)).collect();
        ctc_params.insert("logits", Tensor::new(vec![t, v], logits)?)?;
        let target = vec![1usize + (s % 2) as usize, 1];
        let ctc_forward = move |tape: &mut Tape, staged: &Staged| -> Result<BufId> {
            let x = staged["logits"];
            let lp = tape.log_softmax_rows(x)?;
            ctc_loss(tape, lp, &target)
        };
        let ctc_opts = GradCheckOptions {
            seed: s,
            ..GradCheckOptions::default()
        };
        let report = run_one_gradcheck(&ctc_params, &ctc_forward, &ctc_opts)?;
        push_gradcheck_line(&mut summary, "ctc", s, &report);
    }
    for line in &summary.lines {
        println!("{line}");
    }
    println!(
        "gradcheck: {}/{} passed (size={size}, seeds={seeds})",
        summary.passed, summary.total
    );
    if summary.passed != summary.total {
        return Err(Error::numeric(format!(
            "gradcheck failed: {}/{} checks passed",
            summary.passed, summary.total
        )));
    }
    Ok(summary)
}

fn push_gradcheck_line(
    summary: &mut GradcheckSummary,
    loss: &str,
    seed: u64,
    report: &avfuse_core::diffcore::GradCheckReport,
) {
    let status = if report.passed() { "PASS" } else { "FAIL" };
    summary.lines.push(format!(
        "seed={seed} loss={loss} max_rel_err={:.3e} {status}",
        report.max_rel_err
    ));
    summary.total += 1;
    summary.passed += usize::from(report.passed());
}
