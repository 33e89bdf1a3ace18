//! Synthetic paired-corpus generation, length filtering/cropping,
//! duration-budget batching, and the corpus container file.
//!
//! A hidden Markov chain over K latent states drives both streams of every
//! utterance: each state owns a fixed audio template (one frame of samples)
//! and a fixed visual template (one feature grid), and frames are the active
//! state's templates plus Gaussian noise. The latent state sequence is kept on
//! the utterance, which gives tests and probes ground-truth frame labels.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::rng;

const CORPUS_MAGIC: &[u8; 8] = b"AVCORP01";

/// One synchronized audio-visual utterance. `audio` holds
/// `samples_per_frame * frames` raw samples (possibly a few more, truncated by
/// the frame clock); `visual` holds `frames` grids of `height * width`
/// features, frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub audio: Vec<f32>,
    pub visual: Vec<f32>,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub transcript: Option<String>,
    pub latent_states: Option<Vec<u16>>,
}

impl Utterance {
    /// Frame-synchronization and shape invariants, against a given frame
    /// clock of `samples_per_frame` audio samples.
    pub fn validate(&self, samples_per_frame: usize) -> Result<()> {
        if samples_per_frame == 0 {
            return Err(Error::data("samples_per_frame must be >= 1"));
        }
        if self.audio.len() / samples_per_frame != self.frames {
            return Err(Error::data(format!(
                "utterance {}: {} audio samples is {} frames at {} samples/frame, visual has {}",
                self.id,
                self.audio.len(),
                self.audio.len() / samples_per_frame,
                samples_per_frame,
                self.frames
            )));
        }
        if self.visual.len() != self.frames * self.height * self.width {
            return Err(Error::data(format!(
                "utterance {}: visual buffer holds {} values, want {}x{}x{}",
                self.id,
                self.visual.len(),
                self.frames,
                self.height,
                self.width
            )));
        }
        if let Some(states) = &self.latent_states {
            if states.len() != self.frames {
                return Err(Error::data(format!(
                    "utterance {}: {} latent states for {} frames",
                    self.id,
                    states.len(),
                    self.frames
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    /// Number of latent states K.
    pub n_states: usize,
    /// Mean dwell time per state, in frames (geometric holding time).
    pub dwell_mean: f64,
    /// Gaussian noise on audio samples.
    pub sigma_audio: f64,
    /// Gaussian noise on visual features.
    pub sigma_visual: f64,
    pub n_utterances: usize,
    /// Generated length range in frames, inclusive.
    pub frame_min: usize,
    pub frame_max: usize,
    pub visual_height: usize,
    pub visual_width: usize,
    /// Audio samples per video frame (the shared frame clock).
    pub samples_per_frame: usize,
    /// Transcript symbol for each state, in state order.
    pub state_symbols: String,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_states: 5,
            dwell_mean: 4.0,
            sigma_audio: 0.3,
            sigma_visual: 0.3,
            n_utterances: 200,
            frame_min: 30,
            frame_max: 60,
            visual_height: 8,
            visual_width: 8,
            samples_per_frame: 640,
            state_symbols: "abcdefghijklmnopqrstuvwxyz".to_string(),
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_states < 2 {
            return Err(Error::config("n_states must be >= 2"));
        }
        if self.dwell_mean < 1.0 {
            return Err(Error::config("dwell_mean must be >= 1"));
        }
        if self.sigma_audio < 0.0 || self.sigma_visual < 0.0 {
            return Err(Error::config("noise sigmas must be >= 0"));
        }
        if self.n_states > self.state_symbols.chars().count() {
            return Err(Error::config(format!(
                "{} states but only {} transcript symbols",
                self.n_states,
                self.state_symbols.chars().count()
            )));
        }
        if self.frame_min < 1 || self.frame_min > self.frame_max {
            return Err(Error::config(format!(
                "invalid frame range {}..={}",
                self.frame_min, self.frame_max
            )));
        }
        if self.visual_height == 0 || self.visual_width == 0 || self.samples_per_frame == 0 {
            return Err(Error::config("frame geometry must be nonzero"));
        }
        Ok(())
    }
}

/// Per-state audio and visual templates, drawn once per corpus seed.
pub struct StateTemplates {
    pub audio: Vec<Vec<f32>>,
    pub visual: Vec<Vec<f32>>,
}

pub fn state_templates(cfg: &SyntheticConfig, seed: u64) -> StateTemplates {
    let mut r = rng::stream(seed, "state-templates", &[]);
    let audio = (0..cfg.n_states)
        .map(|_| {
            (0..cfg.samples_per_frame)
                .map(|_| r.random_range(-1.0..1.0f64) as f32)
                .collect()
        })
        .collect();
    let visual = (0..cfg.n_states)
        .map(|_| {
            (0..cfg.visual_height * cfg.visual_width)
                .map(|_| r.random_range(-1.0..1.0f64) as f32)
                .collect()
        })
        .collect();
    StateTemplates { audio, visual }
}

fn markov_states(cfg: &SyntheticConfig, frames: usize, r: &mut ChaCha8Rng) -> Vec<u16> {
    let switch_prob = 1.0 / cfg.dwell_mean;
    let mut states = Vec::with_capacity(frames);
    let mut state = r.random_range(0..cfg.n_states as u16);
    for _ in 0..frames {
        states.push(state);
        if r.random_range(0.0..1.0) < switch_prob {
            let step = r.random_range(1..cfg.n_states as u16);
            state = (state + step) % cfg.n_states as u16;
        }
    }
    states
}

fn collapse_transcript(states: &[u16], symbols: &[char]) -> String {
    let mut out = String::new();
    let mut prev: Option<u16> = None;
    for &s in states {
        if prev != Some(s) {
            out.push(symbols[s as usize]);
            prev = Some(s);
        }
    }
    out
}

fn generate_utterance(
    cfg: &SyntheticConfig,
    templates: &StateTemplates,
    symbols: &[char],
    seed: u64,
    index: usize,
) -> Result<Utterance> {
    let mut r = rng::stream(seed, "utterance", &[index as u64]);
    let frames = r.random_range(cfg.frame_min..=cfg.frame_max);
    let states = markov_states(cfg, frames, &mut r);

    let noise_a = Normal::new(0.0, cfg.sigma_audio).map_err(|e| Error::config(e.to_string()))?;
    let noise_v = Normal::new(0.0, cfg.sigma_visual).map_err(|e| Error::config(e.to_string()))?;

    let mut audio = Vec::with_capacity(frames * cfg.samples_per_frame);
    let mut visual = Vec::with_capacity(frames * cfg.visual_height * cfg.visual_width);
    for &s in &states {
        for &v in &templates.audio[s as usize] {
            audio.push(v + noise_a.sample(&mut r) as f32);
        }
        for &v in &templates.visual[s as usize] {
            visual.push(v + noise_v.sample(&mut r) as f32);
        }
    }

    let utt = Utterance {
        id: format!("utt-{index:05}"),
        audio,
        visual,
        frames,
        height: cfg.visual_height,
        width: cfg.visual_width,
        transcript: Some(collapse_transcript(&states, symbols)),
        latent_states: Some(states),
    };
    utt.validate(cfg.samples_per_frame)?;
    Ok(utt)
}

/// Generates the full corpus. Utterances use independent derived seeds, so
/// the result is identical whether they are generated in parallel or not.
pub fn generate_corpus(cfg: &SyntheticConfig, seed: u64) -> Result<Vec<Utterance>> {
    cfg.validate()?;
    let templates = state_templates(cfg, seed);
    let symbols: Vec<char> = cfg.state_symbols.chars().take(cfg.n_states).collect();
    par::map_indexed(cfg.n_utterances, |i| {
        generate_utterance(cfg, &templates, &symbols, seed, i)
    })
    .into_iter()
    .collect()
}

/// Result of [`filter_and_crop`].
#[derive(Debug, Clone, PartialEq)]
pub enum FilterOutcome {
    Kept(Utterance),
    /// Shorter than the minimum length.
    Discarded,
}

/// Discards utterances shorter than `min_frames`; crops longer-than-
/// `max_frames` utterances to a uniformly chosen contiguous window, keeping
/// audio, visual frames, and latent states synchronized. A cropped
/// utterance's transcript no longer matches its frames and is dropped.
pub fn filter_and_crop(
    u: &Utterance,
    min_frames: usize,
    max_frames: usize,
    samples_per_frame: usize,
    r: &mut ChaCha8Rng,
) -> Result<FilterOutcome> {
    if min_frames > max_frames {
        return Err(Error::config(format!(
            "min_frames {min_frames} > max_frames {max_frames}"
        )));
    }
    u.validate(samples_per_frame)?;
    if u.frames < min_frames {
        return Ok(FilterOutcome::Discarded);
    }
    if u.frames <= max_frames {
        return Ok(FilterOutcome::Kept(u.clone()));
    }
    let start = r.random_range(0..=u.frames - max_frames);
    let plane = u.height * u.width;
    let cropped = Utterance {
        id: u.id.clone(),
        audio: u.audio[start * samples_per_frame..(start + max_frames) * samples_per_frame]
            .to_vec(),
        visual: u.visual[start * plane..(start + max_frames) * plane].to_vec(),
        frames: max_frames,
        height: u.height,
        width: u.width,
        transcript: None,
        latent_states: u
            .latent_states
            .as_ref()
            .map(|s| s[start..start + max_frames].to_vec()),
    };
    cropped.validate(samples_per_frame)?;
    Ok(FilterOutcome::Kept(cropped))
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub utterances: Vec<Utterance>,
    pub total_frames: usize,
}

/// Packs utterances into batches of at most `budget_frames` total frames:
/// length-sorted bucketing (so batch members have similar lengths), then the
/// batch order is shuffled. Every utterance lands in exactly one batch.
pub fn make_batches(corpus: &[Utterance], budget_frames: usize, seed: u64) -> Result<Vec<Batch>> {
    if let Some(u) = corpus.iter().find(|u| u.frames > budget_frames) {
        return Err(Error::data(format!(
            "utterance {} has {} frames, over the batch budget {budget_frames}; crop first",
            u.id, u.frames
        )));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.sort_by(|&a, &b| {
        (corpus[a].frames, &corpus[a].id).cmp(&(corpus[b].frames, &corpus[b].id))
    });

    let mut batches: Vec<Batch> = Vec::new();
    let mut current: Vec<Utterance> = Vec::new();
    let mut current_frames = 0;
    for idx in order {
        let u = &corpus[idx];
        if current_frames + u.frames > budget_frames && !current.is_empty() {
            batches.push(Batch {
                utterances: std::mem::take(&mut current),
                total_frames: current_frames,
            });
            current_frames = 0;
        }
        current_frames += u.frames;
        current.push(u.clone());
    }
    if !current.is_empty() {
        batches.push(Batch {
            utterances: current,
            total_frames: current_frames,
        });
    }

    // Fisher-Yates on the batch order.
    let mut r = rng::stream(seed, "batch-order", &[]);
    for i in (1..batches.len()).rev() {
        let j = r.random_range(0..=i);
        batches.swap(i, j);
    }
    Ok(batches)
}

// ---- corpus container ----

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn write_f32s(w: &mut impl Write, vs: &[f32]) -> Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| Error::format(format!("invalid utf-8 in container: {e}")))
}

fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Writes the corpus container: a magic/version header, the frame clock, and
/// one length-prefixed record per utterance.
pub fn save_corpus(
    path: &Path,
    corpus: &[Utterance],
    samples_per_frame: usize,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CORPUS_MAGIC)?;
    write_u32(&mut w, samples_per_frame as u32)?;
    write_u32(&mut w, corpus.len() as u32)?;
    for u in corpus {
        u.validate(samples_per_frame)?;
        write_str(&mut w, &u.id)?;
        write_u32(&mut w, u.frames as u32)?;
        write_u32(&mut w, u.height as u32)?;
        write_u32(&mut w, u.width as u32)?;
        write_u64(&mut w, u.audio.len() as u64)?;
        write_f32s(&mut w, &u.audio)?;
        write_f32s(&mut w, &u.visual)?;
        match &u.transcript {
            Some(t) => {
                w.write_all(&[1])?;
                write_str(&mut w, t)?;
            }
            None => w.write_all(&[0])?,
        }
        match &u.latent_states {
            Some(states) => {
                w.write_all(&[1])?;
                for &s in states {
                    w.write_all(&s.to_le_bytes())?;
                }
            }
            None => w.write_all(&[0])?,
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
    pub samples_per_frame: usize,
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CORPUS_MAGIC {
        return Err(Error::format(format!(
            "{} is not a corpus container (bad magic {:?}, want {:?})",
            path.display(),
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(CORPUS_MAGIC)
        )));
    }
    let samples_per_frame = read_u32(&mut r)? as usize;
    let count = read_u32(&mut r)? as usize;
    let mut utterances = Vec::with_capacity(count);
    for _ in 0..count {
        let id = read_str(&mut r)?;
        let frames = read_u32(&mut r)? as usize;
        let height = read_u32(&mut r)? as usize;
        let width = read_u32(&mut r)? as usize;
        let audio_len = read_u64(&mut r)? as usize;
        let audio = read_f32s(&mut r, audio_len)?;
        let visual = read_f32s(&mut r, frames * height * width)?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let transcript = if flag[0] == 1 {
            Some(read_str(&mut r)?)
        } else {
            None
        };
        r.read_exact(&mut flag)?;
        let latent_states = if flag[0] == 1 {
            let mut bytes = vec![0u8; frames * 2];
            r.read_exact(&mut bytes)?;
            Some(
                bytes
                    .chunks_exact(2)
                    .map(|c| u16::from_le_bytes([c[0], c[1]]))
                    .collect(),
            )
        } else {
            None
        };
        let u = Utterance {
            id,
            audio,
            visual,
            frames,
            height,
            width,
            transcript,
            latent_states,
        };
        u.validate(samples_per_frame)?;
        utterances.push(u);
    }
    Ok(Corpus {
        utterances,
        samples_per_frame,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> SyntheticConfig {
        SyntheticConfig {
            n_states: 2,
            n_utterances: 8,
            frame_min: 5,
            frame_max: 12,
            visual_height: 2,
            visual_width: 2,
            samples_per_frame: 16,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn zero_noise_streams_are_state_functions() {
        let cfg = SyntheticConfig {
            sigma_audio: 0.0,
            sigma_visual: 0.0,
            ..tiny_cfg()
        };
        let corpus = generate_corpus(&cfg, 7).unwrap();
        let templates = state_templates(&cfg, 7);
        for u in &corpus {
            let states = u.latent_states.as_ref().unwrap();
            for (f, &s) in states.iter().enumerate() {
                let a = &u.audio[f * cfg.samples_per_frame..(f + 1) * cfg.samples_per_frame];
                assert_eq!(a, templates.audio[s as usize].as_slice());
                let plane = cfg.visual_height * cfg.visual_width;
                let v = &u.visual[f * plane..(f + 1) * plane];
                assert_eq!(v, templates.visual[s as usize].as_slice());
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = tiny_cfg();
        let a = generate_corpus(&cfg, 42).unwrap();
        let b = generate_corpus(&cfg, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(&cfg, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn transcripts_collapse_state_runs() {
        assert_eq!(collapse_transcript(&[0, 0, 1, 1, 1, 0], &['a', 'b']), "aba");
        assert_eq!(collapse_transcript(&[2], &['a', 'b', 'c']), "c");
    }

    #[test]
    fn too_many_states_for_symbols_is_error() {
        let cfg = SyntheticConfig {
            n_states: 3,
            state_symbols: "ab".to_string(),
            ..tiny_cfg()
        };
        assert!(generate_corpus(&cfg, 0).is_err());
    }

    fn utt_with_frames(frames: usize, spf: usize) -> Utterance {
        Utterance {
            id: format!("u{frames}"),
            audio: vec![0.25; frames * spf],
            visual: (0..frames * 4).map(|v| v as f32).collect(),
            frames,
            height: 2,
            width: 2,
            transcript: Some("ab".to_string()),
            latent_states: Some((0..frames as u16).collect()),
        }
    }

    #[test]
    fn short_utterances_are_discarded() {
        let u = utt_with_frames(24, 4);
        let mut r = rng::stream(0, "t", &[]);
        assert_eq!(
            filter_and_crop(&u, 25, 500, 4, &mut r).unwrap(),
            FilterOutcome::Discarded
        );
    }

    #[test]
    fn boundary_length_is_untouched() {
        let u = utt_with_frames(500, 4);
        let mut r = rng::stream(0, "t", &[]);
        match filter_and_crop(&u, 25, 500, 4, &mut r).unwrap() {
            FilterOutcome::Kept(k) => assert_eq!(k, u),
            FilterOutcome::Discarded => panic!("boundary utterance discarded"),
        }
    }

    #[test]
    fn crop_keeps_streams_synchronized() {
        let spf = 4;
        let u = utt_with_frames(600, spf);
        let mut r = rng::stream(9, "t", &[]);
        match filter_and_crop(&u, 25, 500, spf, &mut r).unwrap() {
            FilterOutcome::Kept(k) => {
                assert_eq!(k.frames, 500);
                assert_eq!(k.audio.len(), 500 * spf);
                assert_eq!(k.visual.len(), 500 * 4);
                assert_eq!(k.transcript, None);
                let states = k.latent_states.as_ref().unwrap();
                assert_eq!(states.len(), 500);
                // window is contiguous: states were 0..600 in order
                for w in states.windows(2) {
                    assert_eq!(w[1], w[0] + 1);
                }
                k.validate(spf).unwrap();
            }
            FilterOutcome::Discarded => panic!("long utterance discarded"),
        }
    }

    #[test]
    fn two_small_utterances_share_a_batch() {
        let corpus = vec![utt_with_frames(100, 1), utt_with_frames(100, 1)];
        let batches = make_batches(&corpus, 2500, 0).unwrap();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].total_frames, 200);
    }

    #[test]
    fn budget_boundary_splits_batches() {
        let corpus = vec![utt_with_frames(2500, 1), utt_with_frames(1, 1)];
        let batches = make_batches(&corpus, 2500, 0).unwrap();
        assert_eq!(batches.len(), 2);
    }

    #[test]
    fn over_budget_utterance_is_error() {
        let corpus = vec![utt_with_frames(2501, 1)];
        assert!(make_batches(&corpus, 2500, 0).is_err());
    }

    #[test]
    fn batching_partitions_the_corpus() {
        let mut r = rng::stream(5, "batch-test", &[]);
        let corpus: Vec<Utterance> = (0..1000)
            .map(|i| {
                let frames = r.random_range(25..=500);
                let mut u = utt_with_frames(frames, 1);
                u.id = format!("utt-{i:04}");
                u
            })
            .collect();
        let batches = make_batches(&corpus, 2500, 3).unwrap();
        let mut seen: Vec<&str> = batches
            .iter()
            .flat_map(|b| b.utterances.iter().map(|u| u.id.as_str()))
            .collect();
        seen.sort_unstable();
        let mut expect: Vec<&str> = corpus.iter().map(|u| u.id.as_str()).collect();
        expect.sort_unstable();
        assert_eq!(seen, expect);
        for b in &batches {
            assert!(b.total_frames <= 2500);
            assert_eq!(
                b.total_frames,
                b.utterances.iter().map(|u| u.frames).sum::<usize>()
            );
        }
    }

    #[test]
    fn container_roundtrip_is_lossless() {
        let cfg = tiny_cfg();
        let corpus = generate_corpus(&cfg, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.avc");
        save_corpus(&path, &corpus, cfg.samples_per_frame).unwrap();
        let loaded = load_corpus(&path).unwrap();
        assert_eq!(loaded.samples_per_frame, cfg.samples_per_frame);
        assert_eq!(loaded.utterances, corpus);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.avc");
        std::fs::write(&path, b"NOTACORP____").unwrap();
        let err = load_corpus(&path).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "got {err:?}");
    }

    #[test]
    fn save_rejects_desynchronized_utterance() {
        let mut u = utt_with_frames(10, 4);
        u.audio.truncate(10);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.avc");
        assert!(save_corpus(&path, &[u], 4).is_err());
    }
}
