//! Span-mask sampling, receptive-field-aware widening for the visual
//! stream, and replacement of masked frames with a learnable embedding.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{BufId, ParameterSet, Tape, Tensor};
use crate::encoders::EmbeddingSequence;
use crate::error::{Error, Result};

/// A set of masked frame indices, kept alongside the spans that produced it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    /// Sorted, deduplicated frame indices in `[0, frames)`.
    pub masked_indices: Vec<usize>,
    /// `(start, length)` spans, clipped to the sequence; their union is
    /// exactly `masked_indices`.
    pub spans: Vec<(usize, usize)>,
    pub frames: usize,
}

impl MaskPlan {
    pub fn from_spans(mut spans: Vec<(usize, usize)>, frames: usize) -> Self {
        for s in &mut spans {
            s.0 = s.0.min(frames);
            s.1 = s.1.min(frames - s.0);
        }
        spans.sort_unstable();
        let mut indicator = vec![false; frames];
        for &(start, len) in &spans {
            for m in &mut indicator[start..start + len] {
                *m = true;
            }
        }
        let masked_indices = indicator
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect();
        MaskPlan {
            masked_indices,
            spans,
            frames,
        }
    }

    pub fn empty(frames: usize) -> Self {
        MaskPlan {
            masked_indices: Vec::new(),
            spans: Vec::new(),
            frames,
        }
    }

    pub fn full(frames: usize) -> Self {
        MaskPlan::from_spans(vec![(0, frames)], frames)
    }

    pub fn is_empty(&self) -> bool {
        self.masked_indices.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.masked_indices.len()
    }

    pub fn masked_fraction(&self) -> f64 {
        self.masked_count() as f64 / self.frames as f64
    }

    /// Per-frame mask indicator.
    pub fn indicator(&self) -> Vec<bool> {
        let mut ind = vec![false; self.frames];
        for &i in &self.masked_indices {
            ind[i] = true;
        }
        ind
    }
}

/// Number of spans for a masked-fraction budget `p` and span length `l`:
/// `ceil(p * frames / l)`, with an epsilon snap so budgets that land exactly
/// on an integer (up to f64 rounding, e.g. 0.65 * 500 / 5) are not pushed up.
pub fn span_count(frames: usize, p: f64, l: usize) -> usize {
    let x = p * frames as f64 / l as f64;
    if (x - x.round()).abs() < 1e-9 {
        x.round() as usize
    } else {
        x.ceil() as usize
    }
}

/// Samples `ceil(p * frames / l)` spans of length `l` with starts drawn
/// uniformly without replacement. Starts are drawn from `[0, frames - l]`
/// when a span fits, so clipping at the sequence end only happens when
/// `l > frames`; spans may still overlap each other.
pub fn sample_spans(frames: usize, p: f64, l: usize, r: &mut ChaCha8Rng) -> Result<MaskPlan> {
    if frames == 0 || l == 0 {
        return Err(Error::config("sample_spans needs frames >= 1 and span length >= 1"));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::config(format!("mask probability {p} outside [0, 1]")));
    }
    let n_spans = span_count(frames, p, l);
    if n_spans == 0 {
        return Ok(MaskPlan::empty(frames));
    }
    let start_range = frames.saturating_sub(l) + 1;
    let starts = rand::seq::index::sample(r, start_range, n_spans.min(start_range));
    let spans = starts.into_iter().map(|s| (s, l)).collect();
    Ok(MaskPlan::from_spans(spans, frames))
}

/// Widens every span by `(rf - 1) / 2` frames on both sides, clipped to the
/// sequence, so no unmasked visual frame's receptive field overlaps a masked
/// frame. `rf = 1` returns the plan unchanged.
pub fn expand_visual_mask(plan: &MaskPlan, rf: usize) -> Result<MaskPlan> {
    if rf == 0 || rf % 2 == 0 {
        return Err(Error::config(format!(
            "receptive field {rf} must be odd and >= 1"
        )));
    }
    let half = (rf - 1) / 2;
    let spans = plan
        .spans
        .iter()
        .map(|&(start, len)| {
            let lo = start.saturating_sub(half);
            let hi = (start + len + half).min(plan.frames);
            (lo, hi - lo)
        })
        .collect();
    Ok(MaskPlan::from_spans(spans, plan.frames))
}

/// A learnable embedding that stands in for masked frames, stored `[1, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskEmbedding {
    pub values: Tensor,
}

impl MaskEmbedding {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.shape().len() != 2 || values.shape()[0] != 1 {
            return Err(Error::shape(format!(
                "mask embedding must be [1, D], got {:?}",
                values.shape()
            )));
        }
        Ok(MaskEmbedding { values })
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Inserts a mask embedding parameter at `path`, drawn uniform in
/// `[-1/sqrt(D), 1/sqrt(D))`.
pub fn init_mask_embedding(
    dim: usize,
    path: &str,
    seed: u64,
    set: &mut ParameterSet,
) -> Result<()> {
    if dim == 0 {
        return Err(Error::config("mask embedding dimension must be >= 1"));
    }
    let bound = 1.0 / (dim as f64).sqrt();
    let mut r = crate::rng::stream(seed, path, &[]);
    let data = (0..dim).map(|_| r.random_range(-bound..bound)).collect();
    set.insert(path, Tensor::new(vec![1, dim], data)?)
}

/// Replaces the masked rows of `x` (shape `[T, D]`) with the mask embedding
/// `m` (shape `[1, D]`), on the tape: gradients reach `m` summed over masked
/// positions, and unmasked rows pass through untouched.
pub fn apply_mask_on(tape: &mut Tape, x: BufId, plan: &MaskPlan, m: BufId) -> Result<BufId> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 2 || shape[0] != plan.frames {
        return Err(Error::shape(format!(
            "mask plan covers {} frames but input is {shape:?}",
            plan.frames
        )));
    }
    let m_shape = tape.value(m).shape().to_vec();
    if m_shape != [1, shape[1]] {
        return Err(Error::shape(format!(
            "mask embedding {m_shape:?} does not match width {}",
            shape[1]
        )));
    }
    if plan.is_empty() {
        return Ok(x);
    }
    tape.overwrite_rows(x, m, &plan.masked_indices)
}

/// Off-tape variant for evaluation paths.
pub fn apply_mask(
    seq: &EmbeddingSequence,
    plan: &MaskPlan,
    m: &MaskEmbedding,
) -> Result<EmbeddingSequence> {
    if seq.len() != plan.frames {
        return Err(Error::shape(format!(
            "mask plan covers {} frames but sequence has {}",
            plan.frames,
            seq.len()
        )));
    }
    if m.dim() != seq.dim() {
        return Err(Error::shape(format!(
            "mask embedding width {} does not match sequence width {}",
            m.dim(),
            seq.dim()
        )));
    }
    let mut frames = seq.frames.clone();
    let d = seq.dim();
    for &i in &plan.masked_indices {
        frames.data_mut()[i * d..(i + 1) * d].copy_from_slice(m.values.data());
    }
    EmbeddingSequence::new(frames, seq.modality)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::Modality;
    use crate::rng;

    #[test]
    fn span_count_budget_examples() {
        assert_eq!(span_count(100, 0.65, 5), 13);
        assert_eq!(span_count(500, 0.65, 5), 65);
        assert_eq!(span_count(100, 0.0, 5), 0);
        assert_eq!(span_count(3, 1.0, 5), 1);
    }

    #[test]
    fn zero_probability_gives_empty_plan() {
        let mut r = rng::stream(0, "mask", &[]);
        let plan = sample_spans(100, 0.0, 5, &mut r).unwrap();
        assert!(plan.is_empty());
        assert_eq!(plan.frames, 100);
    }

    #[test]
    fn budget_13_spans_on_100_frames() {
        for seed in 0..50 {
            let mut r = rng::stream(seed, "mask", &[]);
            let plan = sample_spans(100, 0.65, 5, &mut r).unwrap();
            assert_eq!(plan.spans.len(), 13);
            assert!(plan.masked_fraction() <= 0.65);
            assert!(!plan.is_empty());
            // sorted and unique, all in range
            assert!(plan.masked_indices.windows(2).all(|w| w[0] < w[1]));
            assert!(plan.masked_indices.iter().all(|&i| i < 100));
            // indices are exactly the union of the spans
            let mut from_spans: Vec<usize> = plan
                .spans
                .iter()
                .flat_map(|&(s, l)| s..s + l)
                .collect();
            from_spans.sort_unstable();
            from_spans.dedup();
            assert_eq!(from_spans, plan.masked_indices);
        }
    }

    #[test]
    fn short_sequence_is_fully_masked_at_p1() {
        for seed in 0..20 {
            let mut r = rng::stream(seed, "mask", &[]);
            let plan = sample_spans(3, 1.0, 5, &mut r).unwrap();
            assert_eq!(plan.masked_indices, vec![0, 1, 2]);
        }
    }

    #[test]
    fn expansion_widens_by_half_receptive_field() {
        let plan = MaskPlan::from_spans(vec![(10, 5)], 20);
        let wide = expand_visual_mask(&plan, 5).unwrap();
        assert_eq!(wide.spans, vec![(8, 9)]);
        assert_eq!(wide.masked_indices, (8..17).collect::<Vec<_>>());
    }

    #[test]
    fn expansion_with_rf1_is_identity() {
        let mut r = rng::stream(3, "mask", &[]);
        let plan = sample_spans(50, 0.5, 4, &mut r).unwrap();
        assert_eq!(expand_visual_mask(&plan, 1).unwrap(), plan);
    }

    #[test]
    fn expansion_clips_at_boundaries() {
        let plan = MaskPlan::from_spans(vec![(0, 5)], 6);
        let wide = expand_visual_mask(&plan, 5).unwrap();
        assert_eq!(wide.masked_indices, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn expansion_is_monotone() {
        for seed in 0..50 {
            let mut r = rng::stream(seed, "mask-mono", &[]);
            let plan = sample_spans(64, 0.4, 3, &mut r).unwrap();
            let wide = expand_visual_mask(&plan, 7).unwrap();
            for i in &plan.masked_indices {
                assert!(wide.masked_indices.contains(i));
            }
        }
    }

    #[test]
    fn even_receptive_field_is_rejected() {
        let plan = MaskPlan::empty(10);
        assert!(expand_visual_mask(&plan, 4).is_err());
        assert!(expand_visual_mask(&plan, 0).is_err());
    }

    #[test]
    fn modal_plans_are_uncorrelated() {
        let frames = 100;
        let trials = 10_000;
        let (mut sa, mut sv, mut sav) = (0.0f64, 0.0f64, 0.0f64);
        let n = (trials * frames) as f64;
        for t in 0..trials {
            let mut ra = rng::stream(7, "mask-audio", &[t as u64]);
            let mut rv = rng::stream(7, "mask-visual", &[t as u64]);
            let a = sample_spans(frames, 0.65, 5, &mut ra).unwrap().indicator();
            let v = sample_spans(frames, 0.65, 5, &mut rv).unwrap().indicator();
            for i in 0..frames {
                sa += a[i] as u8 as f64;
                sv += v[i] as u8 as f64;
                sav += (a[i] && v[i]) as u8 as f64;
            }
        }
        let (ma, mv) = (sa / n, sv / n);
        let cov = sav / n - ma * mv;
        let corr = cov / (ma * (1.0 - ma) * mv * (1.0 - mv)).sqrt();
        assert!(corr.abs() < 0.05, "cross-modal mask correlation {corr}");
    }

    #[test]
    fn masked_fraction_statistics_are_stable() {
        let trials = 2_000;
        let mut mean = 0.0;
        for t in 0..trials {
            let mut r = rng::stream(11, "mask-frac", &[t as u64]);
            let plan = sample_spans(500, 0.65, 5, &mut r).unwrap();
            let f = plan.masked_fraction();
            assert!(f > 0.0 && f <= 0.65, "fraction {f} out of range");
            mean += f;
        }
        mean /= trials as f64;
        assert!(
            (0.5..=0.65).contains(&mean),
            "mean masked fraction {mean} implausible for 65 spans of 5 on 500 frames"
        );
    }

    fn seq(frames: usize, dim: usize) -> EmbeddingSequence {
        let data = (0..frames * dim).map(|v| v as f64).collect();
        EmbeddingSequence::new(Tensor::new(vec![frames, dim], data).unwrap(), Modality::Audio)
            .unwrap()
    }

    #[test]
    fn empty_plan_leaves_sequence_untouched() {
        let s = seq(5, 3);
        let m = MaskEmbedding::new(Tensor::new(vec![1, 3], vec![9.0, 9.0, 9.0]).unwrap()).unwrap();
        let out = apply_mask(&s, &MaskPlan::empty(5), &m).unwrap();
        assert_eq!(out.frames, s.frames);
    }

    #[test]
    fn full_plan_replaces_every_frame() {
        let s = seq(4, 2);
        let m = MaskEmbedding::new(Tensor::new(vec![1, 2], vec![-1.0, 2.0]).unwrap()).unwrap();
        let out = apply_mask(&s, &MaskPlan::full(4), &m).unwrap();
        for t in 0..4 {
            assert_eq!(out.frames.row(t), &[-1.0, 2.0]);
        }
    }

    #[test]
    fn partial_plan_touches_only_masked_rows() {
        let s = seq(5, 3);
        let m = MaskEmbedding::new(Tensor::new(vec![1, 3], vec![7.0, 8.0, 9.0]).unwrap()).unwrap();
        let plan = MaskPlan::from_spans(vec![(2, 2)], 5);
        let out = apply_mask(&s, &plan, &m).unwrap();
        for t in [0usize, 1, 4] {
            assert_eq!(out.frames.row(t), s.frames.row(t));
        }
        for t in [2usize, 3] {
            assert_eq!(out.frames.row(t), &[7.0, 8.0, 9.0]);
        }
    }

    #[test]
    fn mask_gradients_flow_into_embedding() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(Tensor::new(vec![5, 3], (0..15).map(|v| v as f64).collect()).unwrap())
            .unwrap();
        let m = tape
            .leaf(Tensor::new(vec![1, 3], vec![7.0, 8.0, 9.0]).unwrap())
            .unwrap();
        let plan = MaskPlan::from_spans(vec![(2, 2)], 5);
        let out = apply_mask_on(&mut tape, x, &plan, m).unwrap();
        let loss = tape.sum_all(out).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(m).data(), &[2.0, 2.0, 2.0]);
        let dx = grads.get(x);
        for t in [0usize, 1, 4] {
            assert_eq!(dx.row(t), &[1.0, 1.0, 1.0]);
        }
        for t in [2usize, 3] {
            assert_eq!(dx.row(t), &[0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn mismatched_plan_length_is_error() {
        let s = seq(5, 3);
        let m = MaskEmbedding::new(Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap()).unwrap();
        assert!(apply_mask(&s, &MaskPlan::empty(6), &m).is_err());
        let bad = MaskEmbedding::new(Tensor::new(vec![1, 2], vec![0.0; 2]).unwrap()).unwrap();
        assert!(apply_mask(&s, &MaskPlan::empty(5), &bad).is_err());
    }
}
