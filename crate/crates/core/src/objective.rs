//! The pre-training objective. Fused frames and both target streams are
//! linearly projected to a shared loss space; each masked frame then plays
//! anchor in a softmax over {its own-time target} ∪ {sampled distractors},
//! scored by temperature-scaled cosine similarity. One such loss runs from
//! fused toward audio targets and one toward visual targets, and the two add.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{linear, BufId, ParameterSet, Tape, Tensor};
use crate::encoders::Modality;
use crate::error::{Error, Result};
use crate::masking::MaskPlan;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossDirections {
    /// Only the fused-to-audio direction (audio-only pre-training).
    #[serde(rename = "a")]
    Audio,
    /// Only the fused-to-visual direction.
    #[serde(rename = "v")]
    Visual,
    #[serde(rename = "both")]
    Both,
}

impl LossDirections {
    pub fn includes(self, target: Modality) -> bool {
        matches!(
            (self, target),
            (LossDirections::Both, Modality::Audio | Modality::Visual)
                | (LossDirections::Audio, Modality::Audio)
                | (LossDirections::Visual, Modality::Visual)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    /// Width of the loss space the three projections map into.
    pub d_loss: usize,
    /// Distractors per anchor.
    pub n_negatives: usize,
    /// Draw half the distractors from the other modality's masked frames.
    pub cross_modal: bool,
    pub temperature: f64,
    pub directions: LossDirections,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig::desk()
    }
}

impl ObjectiveConfig {
    /// Whether the loss reads this stream's masked-frame embeddings, either
    /// as targets or as cross-modal distractors — i.e. whether the stream
    /// can be excluded from pre-training.
    pub fn requires(&self, m: Modality) -> bool {
        let other = match m {
            Modality::Audio => Modality::Visual,
            Modality::Visual => Modality::Audio,
            Modality::Fused => return true,
        };
        self.directions.includes(m) || (self.cross_modal && self.directions.includes(other))
    }

    pub fn desk() -> Self {
        ObjectiveConfig {
            d_loss: 16,
            n_negatives: 5,
            cross_modal: true,
            temperature: 0.1,
            directions: LossDirections::Both,
        }
    }

    pub fn full_scale() -> Self {
        ObjectiveConfig {
            d_loss: 128,
            n_negatives: 100,
            cross_modal: true,
            temperature: 0.1,
            directions: LossDirections::Both,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_loss == 0 {
            return Err(Error::config("d_loss must be >= 1"));
        }
        if self.n_negatives == 0 {
            return Err(Error::config("n_negatives must be >= 1"));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::config(format!(
                "temperature {} must be positive and finite",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Inserts the three loss-space projections (audio, visual, fused targets).
pub fn init_projection_params(
    dim: usize,
    d_loss: usize,
    prefix: &str,
    seed: u64,
    set: &mut ParameterSet,
) -> Result<()> {
    let bound = 1.0 / (dim as f64).sqrt();
    for name in ["audio", "visual", "fused"] {
        let path = format!("{prefix}.{name}.weight");
        let mut r = rng::stream(seed, &path, &[]);
        let data = (0..dim * d_loss).map(|_| r.random_range(-bound..bound)).collect();
        set.insert(path, Tensor::new(vec![dim, d_loss], data)?)?;
        set.insert(format!("{prefix}.{name}.bias"), Tensor::zeros(vec![d_loss]))?;
    }
    Ok(())
}

/// The distractors drawn for one anchor frame: `(stream, frame index)`
/// pairs, where the stream tags which target sequence the embedding is read
/// from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeSet {
    pub anchor: usize,
    pub entries: Vec<(Modality, usize)>,
}

impl NegativeSet {
    pub fn count(&self, m: Modality) -> usize {
        self.entries.iter().filter(|(e, _)| *e == m).count()
    }
}

fn draw(pool: &[usize], k: usize, r: &mut ChaCha8Rng) -> Vec<usize> {
    if pool.len() >= k {
        rand::seq::index::sample(r, pool.len(), k)
            .into_iter()
            .map(|i| pool[i])
            .collect()
    } else {
        (0..k).map(|_| pool[r.random_range(0..pool.len())]).collect()
    }
}

/// Draws distractors for the anchor frame `t` of the `target` stream. All
/// candidates come from masked frames of the same utterance; the anchor's
/// own-time, own-stream embedding (the positive) is excluded, while the
/// other stream's frame `t` is a different embedding and stays eligible.
/// Pools smaller than the request are sampled with replacement. With
/// cross-modal draws enabled, the split is `n/2` same-stream and the rest
/// from the other stream, falling back to one pool if the other is empty.
pub fn sample_negatives(
    target: Modality,
    plan_audio: &MaskPlan,
    plan_visual: &MaskPlan,
    t: usize,
    n_total: usize,
    cross_modal: bool,
    r: &mut ChaCha8Rng,
) -> Result<NegativeSet> {
    if n_total == 0 {
        return Ok(NegativeSet {
            anchor: t,
            entries: Vec::new(),
        });
    }
    let (same_plan, other_plan, same_tag, other_tag) = match target {
        Modality::Audio => (plan_audio, plan_visual, Modality::Audio, Modality::Visual),
        Modality::Visual => (plan_visual, plan_audio, Modality::Visual, Modality::Audio),
        Modality::Fused => return Err(Error::config("negatives target a raw stream, not fused")),
    };
    if !same_plan.masked_indices.contains(&t) {
        return Err(Error::data(format!(
            "anchor {t} is not a masked frame of the target stream"
        )));
    }
    let same_pool: Vec<usize> = same_plan
        .masked_indices
        .iter()
        .copied()
        .filter(|&i| i != t)
        .collect();
    let other_pool = &other_plan.masked_indices;

    let mut entries = Vec::with_capacity(n_total);
    if !cross_modal {
        if same_pool.is_empty() {
            return Err(Error::data(format!(
                "anchor {t}: no same-stream distractor exists (fewer than 2 masked frames)"
            )));
        }
        entries.extend(draw(&same_pool, n_total, r).into_iter().map(|i| (same_tag, i)));
    } else {
        let (n_same, n_other) = match (same_pool.is_empty(), other_pool.is_empty()) {
            (true, true) => {
                return Err(Error::data(format!(
                    "anchor {t}: no distractor exists in either stream"
                )))
            }
            (true, false) => (0, n_total),
            (false, true) => (n_total, 0),
            (false, false) => (n_total / 2, n_total - n_total / 2),
        };
        entries.extend(draw(&same_pool, n_same, r).into_iter().map(|i| (same_tag, i)));
        entries.extend(draw(other_pool, n_other, r).into_iter().map(|i| (other_tag, i)));
    }
    Ok(NegativeSet { anchor: t, entries })
}

/// One direction's loss, kept as a sum so callers can renormalize exactly
/// (per-utterance mean, or pooled mean across an accumulation group).
pub struct DirectionOutcome {
    /// Scalar buffer: sum of per-anchor losses.
    pub loss_sum: BufId,
    pub n_anchors: usize,
    /// Anchors whose positive logit is strictly highest.
    pub n_correct: usize,
}

impl DirectionOutcome {
    /// Mean per-anchor loss on the tape (0 when there are no anchors).
    pub fn mean(&self, tape: &mut Tape) -> Result<BufId> {
        if self.n_anchors == 0 {
            return Ok(self.loss_sum);
        }
        tape.scale(self.loss_sum, 1.0 / self.n_anchors as f64)
    }

    pub fn accuracy(&self) -> Option<f64> {
        (self.n_anchors > 0).then(|| self.n_correct as f64 / self.n_anchors as f64)
    }
}

/// Scores every masked frame of the target stream: cosine similarity of the
/// projected fused frame against {positive} ∪ negatives, scaled by `1/τ`,
/// and the negative log-softmax of the positive. `negatives` must hold one
/// set per masked index, in order.
pub fn contrastive_direction(
    tape: &mut Tape,
    c_proj: BufId,
    audio_proj: Option<BufId>,
    visual_proj: Option<BufId>,
    target: Modality,
    plan: &MaskPlan,
    negatives: &[NegativeSet],
    temperature: f64,
) -> Result<DirectionOutcome> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::config(format!(
            "temperature {temperature} must be positive and finite"
        )));
    }
    let missing = |m: Modality| {
        Error::config(format!("the {m:?} stream has no projected embeddings to score against"))
    };
    let target_proj = match target {
        Modality::Audio => audio_proj.ok_or_else(|| missing(Modality::Audio))?,
        Modality::Visual => visual_proj.ok_or_else(|| missing(Modality::Visual))?,
        Modality::Fused => return Err(Error::config("contrastive target must be a raw stream")),
    };
    let frames = tape.value(c_proj).shape()[0];
    for buf in [Some(c_proj), audio_proj, visual_proj].into_iter().flatten() {
        let s = tape.value(buf).shape();
        if s.len() != 2 || s[0] != frames || s != tape.value(c_proj).shape() {
            return Err(Error::shape(format!(
                "projected streams disagree: {:?} vs {s:?}",
                tape.value(c_proj).shape()
            )));
        }
    }
    if plan.frames != frames {
        return Err(Error::shape(format!(
            "mask plan covers {} frames, embeddings have {frames}",
            plan.frames
        )));
    }
    if negatives.len() != plan.masked_count() {
        return Err(Error::data(format!(
            "{} negative sets for {} anchors",
            negatives.len(),
            plan.masked_count()
        )));
    }

    let mut per_anchor = Vec::with_capacity(negatives.len());
    let mut n_correct = 0;
    for (&t, set) in plan.masked_indices.iter().zip(negatives) {
        if set.anchor != t {
            return Err(Error::data(format!(
                "negative set for anchor {} paired with masked frame {t}",
                set.anchor
            )));
        }
        let audio_rows: Vec<usize> = set
            .entries
            .iter()
            .filter(|(m, _)| *m == Modality::Audio)
            .map(|&(_, i)| i)
            .collect();
        let visual_rows: Vec<usize> = set
            .entries
            .iter()
            .filter(|(m, _)| *m == Modality::Visual)
            .map(|&(_, i)| i)
            .collect();
        let mut parts = vec![tape.gather_rows(target_proj, &[t])?];
        if !audio_rows.is_empty() {
            let p = audio_proj.ok_or_else(|| missing(Modality::Audio))?;
            parts.push(tape.gather_rows(p, &audio_rows)?);
        }
        if !visual_rows.is_empty() {
            let p = visual_proj.ok_or_else(|| missing(Modality::Visual))?;
            parts.push(tape.gather_rows(p, &visual_rows)?);
        }
        let candidates = tape.concat_rows(&parts)?;
        let anchor = tape.slice_row(c_proj, t)?;
        let sims = tape.cosine_vec_mat(anchor, candidates)?;
        let logits = tape.scale(sims, 1.0 / temperature)?;
        let values = tape.value(logits).data();
        if values[1..].iter().all(|&v| v < values[0]) {
            n_correct += 1;
        }
        per_anchor.push(tape.cross_entropy_index_vec(logits, 0)?);
    }
    let loss_sum = if per_anchor.is_empty() {
        tape.leaf_scalar(0.0)?
    } else {
        tape.sum_list(&per_anchor)?
    };
    Ok(DirectionOutcome {
        loss_sum,
        n_anchors: negatives.len(),
        n_correct,
    })
}

/// Projects a `[T, D]` stream into loss space with the projection named by
/// `which` ("audio", "visual", or "fused").
pub fn project(
    tape: &mut Tape,
    staged: &crate::diffcore::Staged,
    prefix: &str,
    which: &str,
    x: BufId,
) -> Result<BufId> {
    linear(tape, staged, &format!("{prefix}.{which}"), x)
}

/// Both direction losses and their exact sum, with per-direction accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loss_to_audio: f64,
    pub loss_to_visual: f64,
    pub total: f64,
    pub accuracy_to_audio: Option<f64>,
    pub accuracy_to_visual: Option<f64>,
}

pub fn combined_loss(
    loss_to_audio: f64,
    loss_to_visual: f64,
    accuracy_to_audio: Option<f64>,
    accuracy_to_visual: Option<f64>,
) -> Result<LossBreakdown> {
    if !loss_to_audio.is_finite() || !loss_to_visual.is_finite() {
        return Err(Error::numeric(format!(
            "non-finite direction losses {loss_to_audio} / {loss_to_visual}"
        )));
    }
    Ok(LossBreakdown {
        loss_to_audio,
        loss_to_visual,
        total: loss_to_audio + loss_to_visual,
        accuracy_to_audio,
        accuracy_to_visual,
    })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::diffcore::{
        grad_check, grads_by_path, GradCheckOptions, Staged, COSINE_EPS,
    };

    fn plan(indices: &[usize], frames: usize) -> MaskPlan {
        MaskPlan::from_spans(indices.iter().map(|&i| (i, 1)).collect(), frames)
    }

    #[test]
    fn cross_modal_split_is_half_and_half() {
        let pa = plan(&[0, 1, 2, 3, 4], 10);
        let pv = plan(&[2, 3, 4, 5, 6], 10);
        let mut r = rng::stream(0, "neg", &[]);
        let set = sample_negatives(Modality::Audio, &pa, &pv, 2, 100, true, &mut r).unwrap();
        assert_eq!(set.count(Modality::Audio), 50);
        assert_eq!(set.count(Modality::Visual), 50);
    }

    #[test]
    fn odd_totals_give_the_other_stream_the_extra() {
        let pa = plan(&[0, 1, 2], 10);
        let pv = plan(&[0, 1, 2], 10);
        let mut r = rng::stream(1, "neg", &[]);
        let set = sample_negatives(Modality::Audio, &pa, &pv, 1, 5, true, &mut r).unwrap();
        assert_eq!(set.count(Modality::Audio), 2);
        assert_eq!(set.count(Modality::Visual), 3);
    }

    #[test]
    fn tiny_pool_repeats_the_only_candidate() {
        let pa = plan(&[0, 1], 5);
        let pv = plan(&[], 5);
        let mut r = rng::stream(2, "neg", &[]);
        let set = sample_negatives(Modality::Audio, &pa, &pv, 0, 3, false, &mut r).unwrap();
        assert_eq!(set.entries, vec![(Modality::Audio, 1); 3]);
    }

    #[test]
    fn anchor_is_never_a_same_stream_distractor() {
        let pa = plan(&[0, 1, 2, 3, 4], 10);
        let pv = plan(&[0, 1, 2, 3, 4], 10);
        for trial in 0..10_000 {
            let mut r = rng::stream(3, "neg", &[trial]);
            let set = sample_negatives(Modality::Audio, &pa, &pv, 2, 4, true, &mut r).unwrap();
            assert!(!set.entries.contains(&(Modality::Audio, 2)));
        }
    }

    #[test]
    fn lone_masked_frame_without_cross_modal_is_error() {
        let pa = plan(&[3], 10);
        let pv = plan(&[0, 1], 10);
        let mut r = rng::stream(4, "neg", &[]);
        assert!(sample_negatives(Modality::Audio, &pa, &pv, 3, 4, false, &mut r).is_err());
    }

    #[test]
    fn empty_other_pool_falls_back_to_same_stream() {
        let pa = plan(&[0, 1, 2], 10);
        let pv = plan(&[], 10);
        let mut r = rng::stream(5, "neg", &[]);
        let set = sample_negatives(Modality::Audio, &pa, &pv, 0, 6, true, &mut r).unwrap();
        assert_eq!(set.count(Modality::Audio), 6);
        assert_eq!(set.count(Modality::Visual), 0);
    }

    fn tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, "obj-test", &[]);
        Tensor::new(
            vec![rows, cols],
            (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn run_direction(
        c: &Tensor,
        a: &Tensor,
        v: &Tensor,
        target: Modality,
        plan: &MaskPlan,
        negatives: &[NegativeSet],
        tau: f64,
    ) -> (f64, Option<f64>) {
        let mut tape = Tape::new();
        let cb = tape.leaf(c.clone()).unwrap();
        let ab = tape.leaf(a.clone()).unwrap();
        let vb = tape.leaf(v.clone()).unwrap();
        let out =
            contrastive_direction(&mut tape, cb, Some(ab), Some(vb), target, plan, negatives, tau)
                .unwrap();
        let mean = out.mean(&mut tape).unwrap();
        (tape.scalar_value(mean).unwrap(), out.accuracy())
    }

    /// Independent slow-path oracle: explicit loops, no tape.
    fn oracle_direction(
        c: &Tensor,
        a: &Tensor,
        v: &Tensor,
        target: Modality,
        plan: &MaskPlan,
        negatives: &[NegativeSet],
        tau: f64,
    ) -> f64 {
        let row = |m: Modality, i: usize| -> &[f64] {
            match m {
                Modality::Audio => a.row(i),
                Modality::Visual => v.row(i),
                Modality::Fused => c.row(i),
            }
        };
        let cosine = |x: &[f64], y: &[f64]| -> f64 {
            let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            let nx = x.iter().map(|p| p * p).sum::<f64>().sqrt().max(COSINE_EPS);
            let ny = y.iter().map(|p| p * p).sum::<f64>().sqrt().max(COSINE_EPS);
            (dot / (nx * ny)).clamp(-1.0, 1.0)
        };
        let mut total = 0.0;
        for (&t, set) in plan.masked_indices.iter().zip(negatives) {
            let anchor = c.row(t);
            let mut logits = vec![cosine(anchor, row(target, t)) / tau];
            for &(m, i) in &set.entries {
                logits.push(cosine(anchor, row(m, i)) / tau);
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            total += lse - logits[0];
        }
        total / plan.masked_count().max(1) as f64
    }

    fn frozen_negatives(
        target: Modality,
        pa: &MaskPlan,
        pv: &MaskPlan,
        n: usize,
        cross: bool,
        seed: u64,
    ) -> Vec<NegativeSet> {
        let plan = match target {
            Modality::Audio => pa,
            _ => pv,
        };
        plan.masked_indices
            .iter()
            .map(|&t| {
                let mut r = rng::stream(seed, "frozen-neg", &[t as u64]);
                sample_negatives(target, pa, pv, t, n, cross, &mut r).unwrap()
            })
            .collect()
    }

    #[test]
    fn matches_explicit_loop_oracle_in_both_modes() {
        for (seed, cross) in [(10u64, true), (11, false), (12, true), (13, false)] {
            let c = tensor(8, 4, seed);
            let a = tensor(8, 4, seed + 100);
            let v = tensor(8, 4, seed + 200);
            let pa = plan(&[1, 3, 4, 6], 8);
            let pv = plan(&[0, 3, 5, 6, 7], 8);
            for target in [Modality::Audio, Modality::Visual] {
                let negs = frozen_negatives(target, &pa, &pv, 4, cross, seed);
                let p = match target {
                    Modality::Audio => &pa,
                    _ => &pv,
                };
                let (got, _) = run_direction(&c, &a, &v, target, p, &negs, 0.1);
                let want = oracle_direction(&c, &a, &v, target, p, &negs, 0.1);
                assert!(
                    (got - want).abs() < 1e-10,
                    "target {target:?} cross {cross}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn cross_modal_changes_the_denominator() {
        let c = tensor(8, 4, 20);
        let a = tensor(8, 4, 21);
        let v = tensor(8, 4, 22);
        let pa = plan(&[1, 3, 4, 6], 8);
        let pv = plan(&[0, 3, 5, 6], 8);
        let with = frozen_negatives(Modality::Audio, &pa, &pv, 4, true, 23);
        let without = frozen_negatives(Modality::Audio, &pa, &pv, 4, false, 23);
        let (l_with, _) = run_direction(&c, &a, &v, Modality::Audio, &pa, &with, 0.1);
        let (l_without, _) = run_direction(&c, &a, &v, Modality::Audio, &pa, &without, 0.1);
        assert!((l_with - l_without).abs() > 1e-6);
    }

    #[test]
    fn singleton_softmax_gives_zero_loss() {
        let c = tensor(3, 4, 30);
        let a = tensor(3, 4, 31);
        let v = tensor(3, 4, 32);
        let p = plan(&[1], 3);
        let negs = vec![NegativeSet {
            anchor: 1,
            entries: vec![],
        }];
        let (loss, acc) = run_direction(&c, &a, &v, Modality::Audio, &p, &negs, 0.1);
        assert_eq!(loss, 0.0);
        assert_eq!(acc, Some(1.0));
    }

    #[test]
    fn equal_similarities_give_ln2() {
        let c = tensor(3, 4, 33);
        let mut a = tensor(3, 4, 34);
        // distractor row 2 identical to positive row 1 -> equal similarities
        let pos: Vec<f64> = a.row(1).to_vec();
        a.data_mut()[2 * 4..3 * 4].copy_from_slice(&pos);
        let v = tensor(3, 4, 35);
        let p = plan(&[1, 2], 3);
        let negs = vec![
            NegativeSet {
                anchor: 1,
                entries: vec![(Modality::Audio, 2)],
            },
            NegativeSet {
                anchor: 2,
                entries: vec![(Modality::Audio, 1)],
            },
        ];
        let (loss, acc) = run_direction(&c, &a, &v, Modality::Audio, &p, &negs, 0.1);
        assert!((loss - (2.0f64).ln()).abs() < 1e-12, "loss {loss}");
        assert_eq!(acc, Some(0.0));
    }

    #[test]
    fn empty_masked_set_gives_zero_loss_and_no_accuracy() {
        let c = tensor(3, 4, 36);
        let a = tensor(3, 4, 37);
        let v = tensor(3, 4, 38);
        let p = plan(&[], 3);
        let (loss, acc) = run_direction(&c, &a, &v, Modality::Audio, &p, &[], 0.1);
        assert_eq!(loss, 0.0);
        assert_eq!(acc, None);
    }

    #[test]
    fn positive_scaling_preserves_the_loss() {
        let c = tensor(6, 4, 40);
        let a = tensor(6, 4, 41);
        let v = tensor(6, 4, 42);
        let pa = plan(&[0, 2, 4], 6);
        let pv = plan(&[1, 2, 5], 6);
        let negs = frozen_negatives(Modality::Audio, &pa, &pv, 3, true, 43);
        let (base, _) = run_direction(&c, &a, &v, Modality::Audio, &pa, &negs, 0.1);
        let scale = |t: &Tensor, k: f64| {
            let mut s = t.clone();
            for x in s.data_mut() {
                *x *= k;
            }
            s
        };
        let (scaled, _) = run_direction(
            &scale(&c, 3.7),
            &scale(&a, 0.25),
            &scale(&v, 12.0),
            Modality::Audio,
            &pa,
            &negs,
            0.1,
        );
        assert!((base - scaled).abs() < 1e-9, "{base} vs {scaled}");
    }

    #[test]
    fn negative_order_does_not_matter() {
        let c = tensor(6, 4, 50);
        let a = tensor(6, 4, 51);
        let v = tensor(6, 4, 52);
        let pa = plan(&[0, 2, 4], 6);
        let pv = plan(&[1, 2, 5], 6);
        let negs = frozen_negatives(Modality::Audio, &pa, &pv, 4, true, 53);
        let (base, _) = run_direction(&c, &a, &v, Modality::Audio, &pa, &negs, 0.1);
        let mut reversed = negs.clone();
        for set in &mut reversed {
            set.entries.reverse();
        }
        let (flipped, _) = run_direction(&c, &a, &v, Modality::Audio, &pa, &reversed, 0.1);
        assert!((base - flipped).abs() < 1e-12);
    }

    #[test]
    fn combined_loss_is_the_exact_sum() {
        let b = combined_loss(0.3, 0.7, Some(0.5), Some(0.25)).unwrap();
        assert_eq!(b.total, 1.0);
        let b = combined_loss(0.0, 0.0, None, None).unwrap();
        assert_eq!(b.total, 0.0);
        assert!(combined_loss(f64::NAN, 0.0, None, None).is_err());
    }

    #[test]
    fn gradients_match_finite_differences_through_projections() {
        let d = 3;
        let d_loss = 2;
        let frames = 5;
        let mut set = ParameterSet::new();
        init_projection_params(d, d_loss, "proj", 60, &mut set).unwrap();
        set.insert("emb.fused", tensor(frames, d, 61)).unwrap();
        set.insert("emb.audio", tensor(frames, d, 62)).unwrap();
        set.insert("emb.visual", tensor(frames, d, 63)).unwrap();
        let pa = plan(&[0, 2, 3], frames);
        let pv = plan(&[1, 2, 4], frames);
        let na = frozen_negatives(Modality::Audio, &pa, &pv, 3, true, 64);
        let nv = frozen_negatives(Modality::Visual, &pa, &pv, 3, true, 65);

        let forward = move |tape: &mut Tape, staged: &Staged| -> Result<BufId> {
            let c = crate::diffcore::staged_param(staged, "emb.fused")?;
            let a = crate::diffcore::staged_param(staged, "emb.audio")?;
            let v = crate::diffcore::staged_param(staged, "emb.visual")?;
            let cp = project(tape, staged, "proj", "fused", c)?;
            let ap = project(tape, staged, "proj", "audio", a)?;
            let vp = project(tape, staged, "proj", "visual", v)?;
            let to_a =
                contrastive_direction(tape, cp, Some(ap), Some(vp), Modality::Audio, &pa, &na, 0.1)?;
            let to_v =
                contrastive_direction(tape, cp, Some(ap), Some(vp), Modality::Visual, &pv, &nv, 0.1)?;
            let la = to_a.mean(tape)?;
            let lv = to_v.mean(tape)?;
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
