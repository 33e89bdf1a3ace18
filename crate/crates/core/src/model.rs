//! Composition of the full pre-training model: both encoders, masking,
//! fusion, and the contrastive objective, with one parameter set and one
//! tape per utterance forward pass.

use serde::{Deserialize, Serialize};

use crate::data::Utterance;
use crate::diffcore::{staged_param, BufId, ParameterSet, Staged, Tape, Tensor};
use crate::encoders::{
    encode_audio, encode_visual, init_audio_params, init_visual_params, AudioEncoderConfig,
    EmbeddingSequence, Modality, VisualEncoderConfig,
};
use crate::error::{Error, Result};
use crate::fusion::{fuse, init_fusion_params, DropoutKey, FusionConfig};
use crate::masking::{
    apply_mask_on, expand_visual_mask, init_mask_embedding, sample_spans, MaskPlan,
};
use crate::objective::{
    contrastive_direction, init_projection_params, project, sample_negatives, DirectionOutcome,
    NegativeSet, ObjectiveConfig,
};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub audio: AudioEncoderConfig,
    pub visual: VisualEncoderConfig,
    pub fusion: FusionConfig,
    pub objective: ObjectiveConfig,
    pub mask_prob: f64,
    pub mask_span: usize,
    /// One mask embedding for both streams instead of one per stream.
    pub shared_mask_embedding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// The smallest configuration that still exercises every code path:
    /// one layer per stack, width 4. Meant for gradient checks and fast
    /// structural tests, not for learning anything.
    pub fn tiny() -> Self {
        ModelConfig {
            audio: AudioEncoderConfig {
                layers: vec![crate::encoders::ConvLayerSpec {
                    kernel: 2,
                    stride: 2,
                    channels: 3,
                }],
                output_dim: 4,
                normalize_input: true,
            },
            visual: VisualEncoderConfig {
                temporal_kernels: vec![3],
                temporal_channels: vec![2],
                spatial_stages: vec![crate::encoders::SpatialStageSpec {
                    channels: 2,
                    pool: 2,
                }],
                output_dim: 4,
            },
            fusion: FusionConfig {
                n_blocks: 1,
                dim: 4,
                ff_dim: 6,
                n_heads: 2,
                mlp_hidden: 6,
                positional: crate::fusion::PositionalKind::Conv,
                positional_kernel: 3,
                positional_groups: 2,
                dropout: 0.0,
            },
            objective: ObjectiveConfig {
                d_loss: 3,
                n_negatives: 2,
                cross_modal: true,
                temperature: 0.1,
                directions: crate::objective::LossDirections::Both,
            },
            mask_prob: 0.5,
            mask_span: 2,
            shared_mask_embedding: false,
        }
    }

    pub fn desk() -> Self {
        ModelConfig {
            audio: AudioEncoderConfig::desk(),
            visual: VisualEncoderConfig::desk(),
            fusion: FusionConfig::desk(),
            objective: ObjectiveConfig::desk(),
            mask_prob: 0.65,
            mask_span: 5,
            shared_mask_embedding: false,
        }
    }

    pub fn full_scale() -> Self {
        ModelConfig {
            audio: AudioEncoderConfig::full_scale(),
            visual: VisualEncoderConfig::full_scale(),
            fusion: FusionConfig::full_scale(),
            objective: ObjectiveConfig::full_scale(),
            mask_prob: 0.65,
            mask_span: 5,
            shared_mask_embedding: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.fusion.dim
    }

    pub fn validate(&self) -> Result<()> {
        self.audio.validate()?;
        self.visual.validate()?;
        self.fusion.validate()?;
        self.objective.validate()?;
        if self.audio.output_dim != self.fusion.dim || self.visual.output_dim != self.fusion.dim {
            return Err(Error::config(format!(
                "embedding widths disagree: audio {}, visual {}, fusion {}",
                self.audio.output_dim, self.visual.output_dim, self.fusion.dim
            )));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::config(format!(
                "mask_prob {} outside [0, 1]",
                self.mask_prob
            )));
        }
        if self.mask_span == 0 {
            return Err(Error::config("mask_span must be >= 1"));
        }
        Ok(())
    }

    pub fn mask_path(&self, m: Modality) -> &'static str {
        if self.shared_mask_embedding {
            "mask.shared"
        } else {
            match m {
                Modality::Audio => "mask.audio",
                _ => "mask.visual",
            }
        }
    }
}

/// All trainable parameters, deterministically initialized from the seed.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParameterSet> {
    cfg.validate()?;
    let mut set = ParameterSet::new();
    init_audio_params(&cfg.audio, "audio", seed, &mut set)?;
    init_visual_params(&cfg.visual, "visual", seed, &mut set)?;
    init_fusion_params(&cfg.fusion, "fusion", seed, &mut set)?;
    init_projection_params(cfg.dim(), cfg.objective.d_loss, "proj", seed, &mut set)?;
    if cfg.shared_mask_embedding {
        init_mask_embedding(cfg.dim(), "mask.shared", seed, &mut set)?;
    } else {
        init_mask_embedding(cfg.dim(), "mask.audio", seed, &mut set)?;
        init_mask_embedding(cfg.dim(), "mask.visual", seed, &mut set)?;
    }
    Ok(set)
}

/// How one modality's stream enters fusion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StreamMode<'a> {
    /// Real embeddings, untouched.
    Clear,
    /// Real embeddings with the plan's frames replaced by the mask embedding.
    Masked(&'a MaskPlan),
    /// Every frame is the learned mask embedding (modality exclusion v -> m).
    AllMask,
    /// Every frame is a zero vector (modality exclusion v -> 0).
    EmbeddingZero,
    /// Raw input zeroed before encoding (modality exclusion x -> 0).
    InputZero,
    /// Real embeddings with the listed frames zeroed — the fine-tuning
    /// temporal-mask augmentation, which zeroes rather than substituting
    /// the learned mask embedding.
    ZeroWindow(&'a [usize]),
}

impl StreamMode<'_> {
    fn excludes_content(&self) -> bool {
        matches!(
            self,
            StreamMode::AllMask | StreamMode::EmbeddingZero | StreamMode::InputZero
        )
    }
}

fn encode_stream(
    tape: &mut Tape,
    staged: &Staged,
    cfg: &ModelConfig,
    u: &Utterance,
    modality: Modality,
    mode: StreamMode,
) -> Result<BufId> {
    let dim = cfg.dim();
    match mode {
        StreamMode::AllMask => {
            let m = staged_param(staged, cfg.mask_path(modality))?;
            tape.gather_rows(m, &vec![0; u.frames])
        }
        StreamMode::EmbeddingZero => tape.leaf(Tensor::zeros(vec![u.frames, dim])),
        mode => {
            let encoded = match (modality, mode) {
                (Modality::Audio, StreamMode::InputZero) => {
                    let zeros = vec![0.0f32; u.audio.len()];
                    encode_audio(tape, staged, "audio", &cfg.audio, &zeros)?
                }
                (Modality::Audio, _) => encode_audio(tape, staged, "audio", &cfg.audio, &u.audio)?,
                (Modality::Visual, StreamMode::InputZero) => {
                    let zeros = vec![0.0f32; u.visual.len()];
                    encode_visual(
                        tape, staged, "visual", &cfg.visual, &zeros, u.frames, u.height, u.width,
                    )?
                }
                (Modality::Visual, _) => encode_visual(
                    tape, staged, "visual", &cfg.visual, &u.visual, u.frames, u.height, u.width,
                )?,
                (Modality::Fused, _) => {
                    return Err(Error::config("fused is not an input stream"))
                }
            };
            match mode {
                StreamMode::Masked(plan) => {
                    let m = staged_param(staged, cfg.mask_path(modality))?;
                    apply_mask_on(tape, encoded, plan, m)
                }
                StreamMode::ZeroWindow(rows) if !rows.is_empty() => {
                    let zero = tape.leaf(Tensor::zeros(vec![1, dim]))?;
                    tape.overwrite_rows(encoded, zero, rows)
                }
                _ => Ok(encoded),
            }
        }
    }
}

/// The fused sequence plus the pre-mask target embeddings of both streams.
pub struct FusedBuild {
    pub fused: BufId,
    pub audio_emb: Option<BufId>,
    pub visual_emb: Option<BufId>,
    pub frames: usize,
}

/// Encodes both streams under their modes and fuses them. Target embeddings
/// are returned only for streams whose content was actually encoded.
pub fn build_fused(
    tape: &mut Tape,
    staged: &Staged,
    cfg: &ModelConfig,
    u: &Utterance,
    audio_mode: StreamMode,
    visual_mode: StreamMode,
    dropout: Option<&DropoutKey>,
) -> Result<FusedBuild> {
    if audio_mode.excludes_content() && visual_mode.excludes_content() {
        return Err(Error::config(
            "cannot exclude both modalities; at least one stream must carry content",
        ));
    }
    u.validate(cfg.audio.total_stride())?;

    // For masked pre-training streams the contrastive targets are the
    // embeddings *before* masking, so capture the encoder output separately.
    let (audio_in, audio_emb) = match audio_mode {
        StreamMode::Masked(plan) => {
            let emb = encode_stream(tape, staged, cfg, u, Modality::Audio, StreamMode::Clear)?;
            let m = staged_param(staged, cfg.mask_path(Modality::Audio))?;
            (apply_mask_on(tape, emb, plan, m)?, Some(emb))
        }
        StreamMode::Clear => {
            let emb = encode_stream(tape, staged, cfg, u, Modality::Audio, StreamMode::Clear)?;
            (emb, Some(emb))
        }
        mode => (encode_stream(tape, staged, cfg, u, Modality::Audio, mode)?, None),
    };
    let (visual_in, visual_emb) = match visual_mode {
        StreamMode::Masked(plan) => {
            let emb = encode_stream(tape, staged, cfg, u, Modality::Visual, StreamMode::Clear)?;
            let m = staged_param(staged, cfg.mask_path(Modality::Visual))?;
            (apply_mask_on(tape, emb, plan, m)?, Some(emb))
        }
        StreamMode::Clear => {
            let emb = encode_stream(tape, staged, cfg, u, Modality::Visual, StreamMode::Clear)?;
            (emb, Some(emb))
        }
        mode => (encode_stream(tape, staged, cfg, u, Modality::Visual, mode)?, None),
    };
    let fused = fuse(
        tape, staged, "fusion", &cfg.fusion, audio_in, visual_in, dropout,
    )?;
    Ok(FusedBuild {
        fused,
        audio_emb,
        visual_emb,
        frames: u.frames,
    })
}

/// Evaluation helper: fused embeddings for an utterance on a throwaway tape.
pub fn fused_embeddings(
    cfg: &ModelConfig,
    params: &ParameterSet,
    u: &Utterance,
    audio_mode: StreamMode,
    visual_mode: StreamMode,
) -> Result<EmbeddingSequence> {
    let mut tape = Tape::new();
    let staged = tape.stage(params)?;
    let build = build_fused(&mut tape, &staged, cfg, u, audio_mode, visual_mode, None)?;
    EmbeddingSequence::from_tape(&tape, build.fused, Modality::Fused)
}

/// The two mask plans of one pre-training forward pass. The visual plan is
/// already widened by the visual receptive field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PretrainPlans {
    pub audio: MaskPlan,
    pub visual: MaskPlan,
}

/// Samples both plans for (step, utterance), independently per stream and
/// reproducibly from the seed.
pub fn sample_pretrain_plans(
    cfg: &ModelConfig,
    frames: usize,
    seed: u64,
    step: u64,
    utterance: u64,
) -> Result<PretrainPlans> {
    let mut ra = rng::stream(seed, "mask-audio", &[step, utterance]);
    let audio = sample_spans(frames, cfg.mask_prob, cfg.mask_span, &mut ra)?;
    let mut rv = rng::stream(seed, "mask-visual", &[step, utterance]);
    let raw = sample_spans(frames, cfg.mask_prob, cfg.mask_span, &mut rv)?;
    let visual = expand_visual_mask(&raw, cfg.visual.receptive_field())?;
    Ok(PretrainPlans { audio, visual })
}

/// Draws fresh negatives for every anchor of the target stream, one rng
/// stream per (step, utterance, anchor).
pub fn sample_step_negatives(
    cfg: &ModelConfig,
    plans: &PretrainPlans,
    target: Modality,
    seed: u64,
    step: u64,
    utterance: u64,
) -> Result<Vec<NegativeSet>> {
    let label = match target {
        Modality::Audio => "negatives-audio",
        Modality::Visual => "negatives-visual",
        Modality::Fused => return Err(Error::config("negatives target a raw stream")),
    };
    let plan = match target {
        Modality::Audio => &plans.audio,
        _ => &plans.visual,
    };
    plan.masked_indices
        .iter()
        .map(|&t| {
            let mut r = rng::stream(seed, label, &[step, utterance, t as u64]);
            sample_negatives(
                target,
                &plans.audio,
                &plans.visual,
                t,
                cfg.objective.n_negatives,
                cfg.objective.cross_modal,
                &mut r,
            )
        })
        .collect()
}

/// Per-direction contrastive outcomes of one utterance's forward pass.
pub struct PretrainForward {
    pub to_audio: Option<DirectionOutcome>,
    pub to_visual: Option<DirectionOutcome>,
}

/// Builds the full pre-training graph for one utterance: encode, mask, fuse,
/// project, and score both contrastive directions against the pre-mask
/// target embeddings.
pub fn pretrain_forward(
    tape: &mut Tape,
    staged: &Staged,
    cfg: &ModelConfig,
    u: &Utterance,
    plans: &PretrainPlans,
    negatives_audio: &[NegativeSet],
    negatives_visual: &[NegativeSet],
    exclude: Option<Modality>,
    dropout: Option<&DropoutKey>,
) -> Result<PretrainForward> {
    if let Some(m) = exclude {
        if cfg.objective.requires(m) {
            return Err(Error::config(format!(
                "cannot pre-train with the {m:?} stream excluded: the objective \
                 reads its masked-frame embeddings"
            )));
        }
    }
    let (audio_mode, visual_mode) = match exclude {
        Some(Modality::Audio) => (StreamMode::AllMask, StreamMode::Masked(&plans.visual)),
        Some(Modality::Visual) => (StreamMode::Masked(&plans.audio), StreamMode::AllMask),
        Some(Modality::Fused) => {
            return Err(Error::config("only an input stream can be excluded"))
        }
        None => (
            StreamMode::Masked(&plans.audio),
            StreamMode::Masked(&plans.visual),
        ),
    };
    let build = build_fused(tape, staged, cfg, u, audio_mode, visual_mode, dropout)?;

    let c_proj = project(tape, staged, "proj", "fused", build.fused)?;
    let a_proj = match build.audio_emb {
        Some(emb) => Some(project(tape, staged, "proj", "audio", emb)?),
        None => None,
    };
    let v_proj = match build.visual_emb {
        Some(emb) => Some(project(tape, staged, "proj", "visual", emb)?),
        None => None,
    };

    let tau = cfg.objective.temperature;
    let to_audio = if cfg.objective.directions.includes(Modality::Audio) {
        Some(contrastive_direction(
            tape,
            c_proj,
            a_proj,
            v_proj,
            Modality::Audio,
            &plans.audio,
            negatives_audio,
            tau,
        )?)
    } else {
        None
    };
    let to_visual = if cfg.objective.directions.includes(Modality::Visual) {
        Some(contrastive_direction(
            tape,
            c_proj,
            a_proj,
            v_proj,
            Modality::Visual,
            &plans.visual,
            negatives_visual,
            tau,
        )?)
    } else {
        None
    };
    Ok(PretrainForward { to_audio, to_visual })
}

#[cfg(test)]
pub(crate) mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::data::{generate_corpus, SyntheticConfig};
    use crate::diffcore::{grad_check, grads_by_path, GradCheckOptions};
    use crate::objective::LossDirections;

    pub(crate) fn tiny_model_cfg() -> ModelConfig {
        ModelConfig::tiny()
    }

    pub(crate) fn tiny_utterance(seed: u64) -> Utterance {
        let cfg = SyntheticConfig {
            n_states: 2,
            n_utterances: 1,
            frame_min: 6,
            frame_max: 6,
            visual_height: 4,
            visual_width: 4,
            samples_per_frame: 4,
            ..SyntheticConfig::default()
        };
        generate_corpus(&cfg, seed).unwrap().into_iter().next().unwrap()
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = tiny_model_cfg();
        let a = init_params(&cfg, 7).unwrap();
        let b = init_params(&cfg, 7).unwrap();
        assert_eq!(a.len(), b.len());
        for ((pa, va), (pb, vb)) in a.iter().zip(b.iter()) {
            assert_eq!(pa, pb);
            assert_eq!(va.tensor.data(), vb.tensor.data());
        }
        let c = init_params(&cfg, 8).unwrap();
        let differs = a
            .iter()
            .zip(c.iter())
            .any(|((_, va), (_, vc))| va.tensor.data() != vc.tensor.data());
        assert!(differs);
    }

    #[test]
    fn every_builtin_preset_validates() {
        ModelConfig::tiny().validate().unwrap();
        ModelConfig::desk().validate().unwrap();
        ModelConfig::full_scale().validate().unwrap();
    }

    #[test]
    fn width_disagreement_is_rejected() {
        let mut cfg = tiny_model_cfg();
        cfg.audio.output_dim = 5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn excluding_both_streams_is_error() {
        let cfg = tiny_model_cfg();
        let params = init_params(&cfg, 0).unwrap();
        let u = tiny_utterance(1);
        let out = fused_embeddings(&cfg, &params, &u, StreamMode::AllMask, StreamMode::EmbeddingZero);
        assert!(out.is_err());
    }

    #[test]
    fn excluded_visual_content_does_not_reach_the_output() {
        let cfg = tiny_model_cfg();
        let params = init_params(&cfg, 2).unwrap();
        let a = tiny_utterance(3);
        let mut b = a.clone();
        for v in &mut b.visual {
            *v = -*v + 0.25;
        }
        for mode in [StreamMode::AllMask, StreamMode::EmbeddingZero, StreamMode::InputZero] {
            let ca = fused_embeddings(&cfg, &params, &a, StreamMode::Clear, mode).unwrap();
            let cb = fused_embeddings(&cfg, &params, &b, StreamMode::Clear, mode).unwrap();
            assert_eq!(ca.frames.data(), cb.frames.data(), "{mode:?} leaked content");
            let clear = fused_embeddings(&cfg, &params, &a, StreamMode::Clear, StreamMode::Clear)
                .unwrap();
            assert_ne!(ca.frames.data(), clear.frames.data());
        }
    }

    #[test]
    fn plans_are_reproducible_and_expanded() {
        let cfg = tiny_model_cfg();
        let p1 = sample_pretrain_plans(&cfg, 24, 5, 10, 3).unwrap();
        let p2 = sample_pretrain_plans(&cfg, 24, 5, 10, 3).unwrap();
        assert_eq!(p1, p2);
        let p3 = sample_pretrain_plans(&cfg, 24, 5, 11, 3).unwrap();
        assert_ne!(p1, p3);
        // expansion: every span at least as wide as the sampled span length
        let half = (cfg.visual.receptive_field() - 1) / 2;
        for &(start, len) in &p1.visual.spans {
            assert!(len >= cfg.mask_span.min(24) || start + len == 24 || start == 0);
            assert!(len <= cfg.mask_span + 2 * half);
        }
    }

    #[test]
    fn forward_produces_finite_losses_and_anchors() {
        let cfg = tiny_model_cfg();
        let params = init_params(&cfg, 4).unwrap();
        let u = tiny_utterance(5);
        let plans = sample_pretrain_plans(&cfg, u.frames, 6, 0, 0).unwrap();
        let na = sample_step_negatives(&cfg, &plans, Modality::Audio, 6, 0, 0).unwrap();
        let nv = sample_step_negatives(&cfg, &plans, Modality::Visual, 6, 0, 0).unwrap();
        let mut tape = Tape::new();
        let staged = tape.stage(&params).unwrap();
        let out = pretrain_forward(&mut tape, &staged, &cfg, &u, &plans, &na, &nv, None, None).unwrap();
        let to_a = out.to_audio.unwrap();
        let to_v = out.to_visual.unwrap();
        assert!(to_a.n_anchors > 0 && to_v.n_anchors > 0);
        let la = tape.scalar_value(to_a.loss_sum).unwrap();
        let lv = tape.scalar_value(to_v.loss_sum).unwrap();
        assert!(la.is_finite() && lv.is_finite() && la > 0.0 && lv > 0.0);
    }

    #[test]
    fn single_direction_mode_skips_the_other() {
        let mut cfg = tiny_model_cfg();
        cfg.objective.directions = LossDirections::Audio;
        let params = init_params(&cfg, 4).unwrap();
        let u = tiny_utterance(5);
        let plans = sample_pretrain_plans(&cfg, u.frames, 6, 0, 0).unwrap();
        let na = sample_step_negatives(&cfg, &plans, Modality::Audio, 6, 0, 0).unwrap();
        let mut tape = Tape::new();
        let staged = tape.stage(&params).unwrap();
        let out = pretrain_forward(&mut tape, &staged, &cfg, &u, &plans, &na, &[], None, None).unwrap();
        assert!(out.to_audio.is_some());
        assert!(out.to_visual.is_none());
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let cfg = tiny_model_cfg();
        let set = init_params(&cfg, 20).unwrap();
        let u = tiny_utterance(21);
        let plans = sample_pretrain_plans(&cfg, u.frames, 22, 1, 0).unwrap();
        let na = sample_step_negatives(&cfg, &plans, Modality::Audio, 22, 1, 0).unwrap();
        let nv = sample_step_negatives(&cfg, &plans, Modality::Visual, 22, 1, 0).unwrap();

        let cfg2 = cfg.clone();
        let u2 = u.clone();
        let plans2 = plans.clone();
        let forward = move |tape: &mut Tape, staged: &Staged| -> Result<BufId> {
            let out = pretrain_forward(tape, staged, &cfg2, &u2, &plans2, &na, &nv, None, None)?;
            let la = out.to_audio.unwrap().mean(tape)?;
            let lv = out.to_visual.unwrap().mean(tape)?;
            tape.sum_list(&[la, lv])
        };
        let analytic = {
            let mut tape = Tape::new();
            let staged = tape.stage(&set).unwrap();
            let loss = forward(&mut tape, &staged).unwrap();
            let grads = tape.backward(loss).unwrap();
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
        let report = grad_check(&loss_fn, &set, &analytic, &GradCheckOptions::default()).unwrap();
        assert!(report.passed(), "max rel err {:.3e}", report.max_rel_err);
    }
}
