//! Modality encoders: a strided 1-D convolutional stack that downsamples raw
//! audio to the video frame rate, and a temporal+spatial convolutional
//! encoder that maps visual frame grids to the same embedding width.
//!
//! Both encoders build their forward pass on a [`Tape`], so the same code
//! path serves training (gradients flow into the staged parameters) and
//! evaluation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{staged_param, BufId, ParameterSet, Staged, Tape, Tensor};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Audio,
    Visual,
    Fused,
}

/// A `T x D` sequence of frame embeddings tagged with its source modality.
#[derive(Debug, Clone)]
pub struct EmbeddingSequence {
    pub frames: Tensor,
    pub modality: Modality,
}

impl EmbeddingSequence {
    pub fn new(frames: Tensor, modality: Modality) -> Result<Self> {
        if frames.shape().len() != 2 || frames.shape()[0] == 0 {
            return Err(Error::shape(format!(
                "embedding sequence must be a nonempty 2-D tensor, got {:?}",
                frames.shape()
            )));
        }
        frames.check_finite("embedding sequence")?;
        Ok(EmbeddingSequence { frames, modality })
    }

    pub fn from_tape(tape: &Tape, id: BufId, modality: Modality) -> Result<Self> {
        Self::new(tape.value(id).clone(), modality)
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.shape()[1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvLayerSpec {
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AudioEncoderConfig {
    /// Base strided layers; a final kernel-2/stride-2 layer onto `output_dim`
    /// channels is always appended after these.
    pub layers: Vec<ConvLayerSpec>,
    pub output_dim: usize,
    /// Per-utterance mean/variance normalization of the raw waveform.
    pub normalize_input: bool,
}

impl Default for AudioEncoderConfig {
    fn default() -> Self {
        AudioEncoderConfig::desk()
    }
}

fn layer(kernel: usize, stride: usize, channels: usize) -> ConvLayerSpec {
    ConvLayerSpec {
        kernel,
        stride,
        channels,
    }
}

impl AudioEncoderConfig {
    /// Small stack with the same x640 total stride as the full-scale one.
    pub fn desk() -> Self {
        AudioEncoderConfig {
            layers: vec![
                layer(6, 4, 16),
                layer(4, 4, 16),
                layer(4, 4, 24),
                layer(5, 5, 32),
            ],
            output_dim: 32,
            normalize_input: true,
        }
    }

    /// Full-scale stack: the standard 7-layer waveform frontend (x320)
    /// plus the appended stride-2 layer for x640 total.
    pub fn full_scale() -> Self {
        AudioEncoderConfig {
            layers: vec![
                layer(10, 5, 512),
                layer(3, 2, 512),
                layer(3, 2, 512),
                layer(3, 2, 512),
                layer(3, 2, 512),
                layer(2, 2, 512),
                layer(2, 2, 512),
            ],
            output_dim: 512,
            normalize_input: true,
        }
    }

    /// All layers including the appended final kernel-2/stride-2 layer.
    pub fn full_stack(&self) -> Vec<ConvLayerSpec> {
        let mut all = self.layers.clone();
        all.push(layer(2, 2, self.output_dim));
        all
    }

    /// Audio samples consumed per output frame.
    pub fn total_stride(&self) -> usize {
        self.full_stack().iter().map(|l| l.stride).product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::config("audio encoder needs at least one layer"));
        }
        if self.output_dim == 0 {
            return Err(Error::config("audio output_dim must be >= 1"));
        }
        for (i, l) in self.full_stack().iter().enumerate() {
            if l.stride == 0 || l.channels == 0 {
                return Err(Error::config(format!(
                    "audio layer {i}: stride and channels must be >= 1"
                )));
            }
            if l.kernel < l.stride {
                return Err(Error::config(format!(
                    "audio layer {i}: kernel {} < stride {}; the frame count would drift \
                     from floor(samples/total_stride)",
                    l.kernel, l.stride
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpatialStageSpec {
    pub channels: usize,
    pub pool: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisualEncoderConfig {
    /// Stacked same-padded temporal convolutions (stride 1, odd kernels);
    /// their composition sets the temporal receptive field.
    pub temporal_kernels: Vec<usize>,
    pub temporal_channels: Vec<usize>,
    /// 3x3 same-padded spatial convolutions, each followed by average
    /// pooling with the given window.
    pub spatial_stages: Vec<SpatialStageSpec>,
    pub output_dim: usize,
}

impl Default for VisualEncoderConfig {
    fn default() -> Self {
        VisualEncoderConfig::desk()
    }
}

impl VisualEncoderConfig {
    pub fn desk() -> Self {
        VisualEncoderConfig {
            temporal_kernels: vec![5],
            temporal_channels: vec![8],
            spatial_stages: vec![
                SpatialStageSpec {
                    channels: 12,
                    pool: 2,
                },
                SpatialStageSpec {
                    channels: 24,
                    pool: 2,
                },
            ],
            output_dim: 32,
        }
    }

    pub fn full_scale() -> Self {
        VisualEncoderConfig {
            temporal_kernels: vec![5],
            temporal_channels: vec![64],
            spatial_stages: vec![
                SpatialStageSpec {
                    channels: 64,
                    pool: 2,
                },
                SpatialStageSpec {
                    channels: 128,
                    pool: 2,
                },
                SpatialStageSpec {
                    channels: 256,
                    pool: 2,
                },
            ],
            output_dim: 512,
        }
    }

    /// Temporal receptive field in frames: stacked stride-1 convolutions
    /// compose as rf += (kernel - 1) per layer. Spatial stages and pooling
    /// act within a frame and do not widen it.
    pub fn receptive_field(&self) -> usize {
        1 + self
            .temporal_kernels
            .iter()
            .map(|k| k - 1)
            .sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        if self.temporal_kernels.len() != self.temporal_channels.len() {
            return Err(Error::config(format!(
                "{} temporal kernels but {} channel counts",
                self.temporal_kernels.len(),
                self.temporal_channels.len()
            )));
        }
        for &k in &self.temporal_kernels {
            if k == 0 || k % 2 == 0 {
                return Err(Error::config(format!(
                    "temporal kernel {k} must be odd for same-length padding"
                )));
            }
        }
        if self.temporal_channels.iter().any(|&c| c == 0) {
            return Err(Error::config("temporal channels must be >= 1"));
        }
        for (i, s) in self.spatial_stages.iter().enumerate() {
            if s.channels == 0 || s.pool == 0 {
                return Err(Error::config(format!(
                    "spatial stage {i}: channels and pool must be >= 1"
                )));
            }
        }
        if self.output_dim == 0 {
            return Err(Error::config("visual output_dim must be >= 1"));
        }
        Ok(())
    }
}

fn uniform_init(set: &mut ParameterSet, seed: u64, path: &str, shape: &[usize], bound: f64) -> Result<()> {
    let mut r = rng::stream(seed, path, &[]);
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| r.random_range(-bound..bound)).collect();
    set.insert(path, Tensor::new(shape.to_vec(), data)?)
}

fn norm_affine_init(set: &mut ParameterSet, prefix: &str, channels: usize) -> Result<()> {
    set.insert(
        format!("{prefix}.norm_gain"),
        Tensor::new(vec![channels], vec![1.0; channels])?,
    )?;
    set.insert(format!("{prefix}.norm_bias"), Tensor::zeros(vec![channels]))
}

pub fn init_audio_params(
    cfg: &AudioEncoderConfig,
    prefix: &str,
    seed: u64,
    set: &mut ParameterSet,
) -> Result<()> {
    cfg.validate()?;
    let mut c_in = 1;
    for (i, l) in cfg.full_stack().iter().enumerate() {
        let path = format!("{prefix}.conv{i}");
        let bound = 1.0 / ((c_in * l.kernel) as f64).sqrt();
        uniform_init(set, seed, &format!("{path}.weight"), &[l.channels, c_in, l.kernel], bound)?;
        set.insert(format!("{path}.bias"), Tensor::zeros(vec![l.channels]))?;
        norm_affine_init(set, &path, l.channels)?;
        c_in = l.channels;
    }
    Ok(())
}

pub fn init_visual_params(
    cfg: &VisualEncoderConfig,
    prefix: &str,
    seed: u64,
    set: &mut ParameterSet,
) -> Result<()> {
    cfg.validate()?;
    let mut c_in = 1;
    for (i, (&k, &c)) in cfg
        .temporal_kernels
        .iter()
        .zip(&cfg.temporal_channels)
        .enumerate()
    {
        let path = format!("{prefix}.temporal{i}");
        let bound = 1.0 / ((c_in * k) as f64).sqrt();
        uniform_init(set, seed, &format!("{path}.weight"), &[c, c_in, k], bound)?;
        set.insert(format!("{path}.bias"), Tensor::zeros(vec![c]))?;
        norm_affine_init(set, &path, c)?;
        c_in = c;
    }
    for (i, s) in cfg.spatial_stages.iter().enumerate() {
        let path = format!("{prefix}.spatial{i}");
        let bound = 1.0 / ((c_in * 9) as f64).sqrt();
        uniform_init(set, seed, &format!("{path}.weight"), &[s.channels, c_in, 3, 3], bound)?;
        set.insert(format!("{path}.bias"), Tensor::zeros(vec![s.channels]))?;
        norm_affine_init(set, &path, s.channels)?;
        c_in = s.channels;
    }
    let bound = 1.0 / (c_in as f64).sqrt();
    uniform_init(set, seed, &format!("{prefix}.head.weight"), &[c_in, cfg.output_dim], bound)?;
    set.insert(format!("{prefix}.head.bias"), Tensor::zeros(vec![cfg.output_dim]))
}

/// Converts a waveform to a `[N, 1]` constant leaf, optionally applying
/// per-utterance mean/variance normalization. The waveform is data, not a
/// parameter, so the normalization happens off-tape.
fn audio_input_leaf(tape: &mut Tape, waveform: &[f32], normalize: bool) -> Result<BufId> {
    let mut x: Vec<f64> = waveform.iter().map(|&v| v as f64).collect();
    if normalize {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + 1e-8).sqrt();
        for v in &mut x {
            *v = (*v - mean) * inv;
        }
    }
    let n = x.len();
    tape.leaf(Tensor::new(vec![n, 1], x)?)
}

/// Runs the audio stack: per layer, a strided convolution right-padded so
/// the output length is exactly `floor(len/stride)`, then layer
/// normalization and GELU. Output is `[floor(samples/total_stride), D]`.
pub fn encode_audio(
    tape: &mut Tape,
    staged: &Staged,
    prefix: &str,
    cfg: &AudioEncoderConfig,
    waveform: &[f32],
) -> Result<BufId> {
    cfg.validate()?;
    let r_a = cfg.total_stride();
    if waveform.len() < r_a {
        return Err(Error::data(format!(
            "waveform of {} samples is shorter than one frame ({r_a} samples)",
            waveform.len()
        )));
    }
    let mut x = audio_input_leaf(tape, waveform, cfg.normalize_input)?;
    for (i, l) in cfg.full_stack().iter().enumerate() {
        let path = format!("{prefix}.conv{i}");
        let l_in = tape.value(x).shape()[0];
        let q = l_in / l.stride;
        let pad_right = ((q - 1) * l.stride + l.kernel).saturating_sub(l_in);
        let w = staged_param(staged, &format!("{path}.weight"))?;
        let b = staged_param(staged, &format!("{path}.bias"))?;
        x = tape.conv1d(x, w, b, l.stride, 0, pad_right, 1)?;
        let gain = staged_param(staged, &format!("{path}.norm_gain"))?;
        let bias = staged_param(staged, &format!("{path}.norm_bias"))?;
        x = tape.layer_norm_rows(x, gain, bias)?;
        x = tape.gelu(x)?;
    }
    Ok(x)
}

/// Runs the visual stack on `frames` grids of `height x width` features:
/// same-padded temporal convolutions (so the frame count is preserved),
/// spatial conv+pool stages, global average pooling, and a linear head.
/// Each convolution is followed by per-frame normalization and GELU.
/// Output is `[frames, D]`.
pub fn encode_visual(
    tape: &mut Tape,
    staged: &Staged,
    prefix: &str,
    cfg: &VisualEncoderConfig,
    visual: &[f32],
    frames: usize,
    height: usize,
    width: usize,
) -> Result<BufId> {
    cfg.validate()?;
    if frames == 0 {
        return Err(Error::data("visual input has no frames"));
    }
    if visual.len() != frames * height * width {
        return Err(Error::shape(format!(
            "visual buffer holds {} values, want {frames}x{height}x{width}",
            visual.len()
        )));
    }
    let data: Vec<f64> = visual.iter().map(|&v| v as f64).collect();
    let mut x = tape.leaf(Tensor::new(vec![frames, 1, height, width], data)?)?;
    for i in 0..cfg.temporal_kernels.len() {
        let path = format!("{prefix}.temporal{i}");
        let w = staged_param(staged, &format!("{path}.weight"))?;
        let b = staged_param(staged, &format!("{path}.bias"))?;
        x = tape.conv_temporal(x, w, b)?;
        let gain = staged_param(staged, &format!("{path}.norm_gain"))?;
        let bias = staged_param(staged, &format!("{path}.norm_bias"))?;
        x = tape.group_norm(x, gain, bias, 1)?;
        x = tape.gelu(x)?;
    }
    for (i, s) in cfg.spatial_stages.iter().enumerate() {
        let path = format!("{prefix}.spatial{i}");
        let w = staged_param(staged, &format!("{path}.weight"))?;
        let b = staged_param(staged, &format!("{path}.bias"))?;
        x = tape.conv2d(x, w, b, 1)?;
        let gain = staged_param(staged, &format!("{path}.norm_gain"))?;
        let bias = staged_param(staged, &format!("{path}.norm_bias"))?;
        x = tape.group_norm(x, gain, bias, 1)?;
        x = tape.gelu(x)?;
        x = tape.avg_pool2d(x, s.pool)?;
    }
    x = tape.global_avg_pool2d(x)?;
    let w = staged_param(staged, &format!("{prefix}.head.weight"))?;
    let b = staged_param(staged, &format!("{prefix}.head.bias"))?;
    let out = tape.matmul(x, w)?;
    tape.add_row_broadcast(out, b)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::diffcore::{grad_check, grads_by_path, GradCheckOptions};

    fn tiny_audio_cfg() -> AudioEncoderConfig {
        AudioEncoderConfig {
            layers: vec![layer(3, 2, 3)],
            output_dim: 3,
            normalize_input: true,
        }
    }

    fn tiny_visual_cfg() -> VisualEncoderConfig {
        VisualEncoderConfig {
            temporal_kernels: vec![3],
            temporal_channels: vec![2],
            spatial_stages: vec![SpatialStageSpec {
                channels: 3,
                pool: 2,
            }],
            output_dim: 3,
        }
    }

    fn random_wave(n: usize, seed: u64) -> Vec<f32> {
        let mut r = rng::stream(seed, "test-wave", &[]);
        (0..n).map(|_| r.random_range(-1.0..1.0f64) as f32).collect()
    }

    fn run_audio(cfg: &AudioEncoderConfig, wave: &[f32]) -> Result<Tensor> {
        let mut set = ParameterSet::new();
        init_audio_params(cfg, "audio", 0, &mut set)?;
        let mut tape = Tape::new();
        let staged = tape.stage(&set)?;
        let out = encode_audio(&mut tape, &staged, "audio", cfg, wave)?;
        Ok(tape.value(out).clone())
    }

    #[test]
    fn audio_frame_count_is_floor_of_sample_count() {
        let cfg = AudioEncoderConfig::desk();
        assert_eq!(cfg.total_stride(), 640);
        let out = run_audio(&cfg, &random_wave(640 * 25, 1)).unwrap();
        assert_eq!(out.shape(), &[25, 32]);
        let out = run_audio(&cfg, &random_wave(640 * 25 + 639, 2)).unwrap();
        assert_eq!(out.shape(), &[25, 32]);
        let out = run_audio(&cfg, &random_wave(640, 3)).unwrap();
        assert_eq!(out.shape(), &[1, 32]);
    }

    #[test]
    fn too_short_waveform_is_error() {
        let cfg = AudioEncoderConfig::desk();
        assert!(run_audio(&cfg, &random_wave(639, 4)).is_err());
    }

    #[test]
    fn full_scale_stride_is_640() {
        assert_eq!(AudioEncoderConfig::full_scale().total_stride(), 640);
    }

    #[test]
    fn kernel_narrower_than_stride_is_rejected() {
        let cfg = AudioEncoderConfig {
            layers: vec![layer(1, 2, 4)],
            ..tiny_audio_cfg()
        };
        assert!(cfg.validate().is_err());
    }

    fn run_visual(
        cfg: &VisualEncoderConfig,
        visual: &[f32],
        frames: usize,
        h: usize,
        w: usize,
    ) -> Result<Tensor> {
        let mut set = ParameterSet::new();
        init_visual_params(cfg, "visual", 0, &mut set)?;
        let mut tape = Tape::new();
        let staged = tape.stage(&set)?;
        let out = encode_visual(&mut tape, &staged, "visual", cfg, visual, frames, h, w)?;
        Ok(tape.value(out).clone())
    }

    #[test]
    fn visual_length_is_preserved() {
        let cfg = VisualEncoderConfig::desk();
        let input = random_wave(25 * 64, 5);
        let out = run_visual(&cfg, &input, 25, 8, 8).unwrap();
        assert_eq!(out.shape(), &[25, 32]);
    }

    #[test]
    fn receptive_field_composes_kernels() {
        let mut cfg = tiny_visual_cfg();
        cfg.temporal_kernels = vec![5];
        cfg.temporal_channels = vec![2];
        assert_eq!(cfg.receptive_field(), 5);
        cfg.temporal_kernels = vec![1];
        assert_eq!(cfg.receptive_field(), 1);
        cfg.temporal_kernels = vec![3, 3];
        cfg.temporal_channels = vec![2, 2];
        assert_eq!(cfg.receptive_field(), 5);
    }

    #[test]
    fn perturbing_one_frame_only_moves_frames_in_receptive_field() {
        let cfg = VisualEncoderConfig::desk();
        assert_eq!(cfg.receptive_field(), 5);
        let frames = 20;
        let base = random_wave(frames * 64, 6);
        let mut bumped = base.clone();
        for v in &mut bumped[10 * 64..11 * 64] {
            *v += 1.0;
        }
        let a = run_visual(&cfg, &base, frames, 8, 8).unwrap();
        let b = run_visual(&cfg, &bumped, frames, 8, 8).unwrap();
        for t in 0..frames {
            let same = a.row(t) == b.row(t);
            if (8..=12).contains(&t) {
                assert!(!same, "frame {t} inside the receptive field did not move");
            } else {
                assert!(same, "frame {t} outside the receptive field moved");
            }
        }
    }

    #[test]
    fn constant_input_gives_identical_interior_frames() {
        let cfg = VisualEncoderConfig::desk();
        let frames = 12;
        let one_frame = random_wave(64, 7);
        let input: Vec<f32> = (0..frames).flat_map(|_| one_frame.clone()).collect();
        let out = run_visual(&cfg, &input, frames, 8, 8).unwrap();
        let half = (cfg.receptive_field() - 1) / 2;
        let reference = out.row(half).to_vec();
        for t in half..frames - half {
            assert_eq!(out.row(t), reference.as_slice(), "interior frame {t} differs");
        }
        assert_ne!(out.row(0), reference.as_slice());
    }

    #[test]
    fn paired_encodings_have_equal_length() {
        let data_cfg = crate::data::SyntheticConfig {
            n_utterances: 1,
            frame_min: 6,
            frame_max: 6,
            ..crate::data::SyntheticConfig::default()
        };
        let corpus = crate::data::generate_corpus(&data_cfg, 3).unwrap();
        let u = &corpus[0];
        let a = run_audio(&AudioEncoderConfig::desk(), &u.audio).unwrap();
        let v = run_visual(&VisualEncoderConfig::desk(), &u.visual, u.frames, 8, 8).unwrap();
        assert_eq!(a.shape()[0], v.shape()[0]);
    }

    fn projection_loss(out_numel: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, "proj", &[]);
        Tensor::from_vec((0..out_numel).map(|_| r.random_range(-1.0..1.0)).collect())
    }

    fn check_encoder_grads(
        set: &ParameterSet,
        forward: impl Fn(&mut Tape, &Staged) -> Result<BufId> + Sync,
    ) {
        let probe = {
            let mut tape = Tape::new();
            let staged = tape.stage(set).unwrap();
            let out = forward(&mut tape, &staged).unwrap();
            tape.value(out).numel()
        };
        let proj = projection_loss(probe, 40);
        let analytic = {
            let mut tape = Tape::new();
            let staged = tape.stage(set).unwrap();
            let out = forward(&mut tape, &staged).unwrap();
            let shape = tape.value(out).shape().to_vec();
            let p_leaf = tape
                .leaf(Tensor::new(shape, proj.data().to_vec()).unwrap())
                .unwrap();
            let prod = tape.mul(out, p_leaf).unwrap();
            let loss = tape.sum_all(prod).unwrap();
            let grads = tape.backward(loss).unwrap();
            grads_by_path(&staged, &grads)
                .into_iter()
                .collect::<BTreeMap<_, _>>()
        };
        let loss_fn = move |p: &ParameterSet| -> Result<f64> {
            let mut tape = Tape::new();
            let staged = tape.stage(p)?;
            let out = forward(&mut tape, &staged)?;
            let shape = tape.value(out).shape().to_vec();
            let p_leaf = tape.leaf(Tensor::new(shape, proj.data().to_vec())?)?;
            let prod = tape.mul(out, p_leaf)?;
            let loss = tape.sum_all(prod)?;
            tape.scalar_value(loss)
        };
        let report = grad_check(&loss_fn, set, &analytic, &GradCheckOptions::default()).unwrap();
        assert!(report.passed(), "max rel err {:.3e}", report.max_rel_err);
    }

    #[test]
    fn audio_encoder_gradients_match_finite_differences() {
        let cfg = tiny_audio_cfg();
        let mut set = ParameterSet::new();
        init_audio_params(&cfg, "audio", 11, &mut set).unwrap();
        let wave = random_wave(10, 12);
        check_encoder_grads(&set, move |tape, staged| {
            encode_audio(tape, staged, "audio", &cfg, &wave)
        });
    }

    #[test]
    fn visual_encoder_gradients_match_finite_differences() {
        let cfg = tiny_visual_cfg();
        let mut set = ParameterSet::new();
        init_visual_params(&cfg, "visual", 13, &mut set).unwrap();
        let input = random_wave(4 * 16, 14);
        check_encoder_grads(&set, move |tape, staged| {
            encode_visual(tape, staged, "visual", &cfg, &input, 4, 4, 4)
        });
    }
}
