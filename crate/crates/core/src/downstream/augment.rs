//! Fine-tuning data augmentations: mixup for classification, and a single
//! zeroed temporal window (distinct from the pre-training span masks).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use crate::data::Utterance;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// A mixing weight from Beta(alpha, alpha).
pub fn draw_mixup_lambda(alpha: f64, r: &mut ChaCha8Rng) -> Result<f64> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::config(format!("mixup alpha {alpha} must be > 0")));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::config(e.to_string()))?;
    Ok(beta.sample(r))
}

/// Convex combination of two equally-shaped utterances and their one-hot
/// class targets: `lambda * first + (1 - lambda) * second`. The mixed
/// utterance keeps the first utterance's id and geometry; transcripts and
/// latent labels are dropped because they no longer describe the signal.
pub fn mixup(
    a: &Utterance,
    b: &Utterance,
    target_a: &[f64],
    target_b: &[f64],
    lambda: f64,
) -> Result<(Utterance, Vec<f64>)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config(format!("lambda {lambda} outside [0, 1]")));
    }
    if a.audio.len() != b.audio.len()
        || a.visual.len() != b.visual.len()
        || a.frames != b.frames
        || a.height != b.height
        || a.width != b.width
    {
        return Err(Error::shape(format!(
            "mixup needs equal shapes: {} vs {} frames, {} vs {} audio samples",
            a.frames,
            b.frames,
            a.audio.len(),
            b.audio.len()
        )));
    }
    if target_a.len() != target_b.len() {
        return Err(Error::shape(format!(
            "mixup targets have {} vs {} classes",
            target_a.len(),
            target_b.len()
        )));
    }
    let lam = lambda as f32;
    let mixed = Utterance {
        id: a.id.clone(),
        audio: a
            .audio
            .iter()
            .zip(&b.audio)
            .map(|(&x, &y)| lam * x + (1.0 - lam) * y)
            .collect(),
        visual: a
            .visual
            .iter()
            .zip(&b.visual)
            .map(|(&x, &y)| lam * x + (1.0 - lam) * y)
            .collect(),
        frames: a.frames,
        height: a.height,
        width: a.width,
        transcript: None,
        latent_states: None,
    };
    let target: Vec<f64> = target_a
        .iter()
        .zip(target_b)
        .map(|(&x, &y)| lambda * x + (1.0 - lambda) * y)
        .collect();
    Ok((mixed, target))
}

pub fn one_hot(class: usize, n_classes: usize) -> Result<Vec<f64>> {
    if class >= n_classes {
        return Err(Error::config(format!(
            "class {class} out of range 0..{n_classes}"
        )));
    }
    let mut v = vec![0.0; n_classes];
    v[class] = 1.0;
    Ok(v)
}

/// Row indices of one uniformly-placed window of `length` frames in a
/// `frames`-long sequence. Length 0 selects nothing; a window longer than
/// the sequence selects every row (with a warning).
pub fn temporal_window(frames: usize, length: usize, r: &mut ChaCha8Rng) -> Vec<usize> {
    if length == 0 {
        return Vec::new();
    }
    if length > frames {
        log::warn!("temporal mask of {length} frames covers the whole {frames}-frame sequence");
        return (0..frames).collect();
    }
    let start = r.random_range(0..=frames - length);
    (start..start + length).collect()
}

/// Zeroes one contiguous window of `length` frames in a `[T, D]` sequence,
/// at a position drawn uniformly. A window longer than the sequence zeroes
/// everything (with a warning); length 0 is the identity.
pub fn temporal_mask_aug(seq: &mut Tensor, length: usize, r: &mut ChaCha8Rng) -> Result<()> {
    let shape = seq.shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::shape(format!(
            "temporal mask expects [frames, dim], got {shape:?}"
        )));
    }
    let (frames, dim) = (shape[0], shape[1]);
    for f in temporal_window(frames, length, r) {
        seq.data_mut()[f * dim..(f + 1) * dim].fill(0.0);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, SyntheticConfig};
    use crate::rng;

    fn fixed_corpus(n: usize) -> Vec<Utterance> {
        let cfg = SyntheticConfig {
            n_states: 3,
            n_utterances: n,
            frame_min: 8,
            frame_max: 8,
            visual_height: 4,
            visual_width: 4,
            samples_per_frame: 4,
            ..SyntheticConfig::default()
        };
        generate_corpus(&cfg, 9).unwrap()
    }

    #[test]
    fn lambda_one_returns_the_first_sample() {
        let c = fixed_corpus(2);
        let ta = one_hot(0, 3).unwrap();
        let tb = one_hot(2, 3).unwrap();
        let (mixed, target) = mixup(&c[0], &c[1], &ta, &tb, 1.0).unwrap();
        assert_eq!(mixed.audio, c[0].audio);
        assert_eq!(mixed.visual, c[0].visual);
        assert_eq!(target, ta);
    }

    #[test]
    fn lambda_half_averages_elementwise() {
        let c = fixed_corpus(2);
        let ta = one_hot(1, 3).unwrap();
        let tb = one_hot(2, 3).unwrap();
        let (mixed, target) = mixup(&c[0], &c[1], &ta, &tb, 0.5).unwrap();
        for (m, (x, y)) in mixed.audio.iter().zip(c[0].audio.iter().zip(&c[1].audio)) {
            assert!((m - 0.5 * (x + y)).abs() < 1e-6);
        }
        assert_eq!(target, vec![0.0, 0.5, 0.5]);
    }

    #[test]
    fn mixed_targets_stay_on_the_simplex() {
        let mut r = rng::stream(1, "mixup-simplex", &[]);
        let c = fixed_corpus(2);
        for _ in 0..200 {
            let lam = draw_mixup_lambda(0.4, &mut r).unwrap();
            let ta = one_hot(0, 4).unwrap();
            let tb = one_hot(3, 4).unwrap();
            let (_, t) = mixup(&c[0], &c[1], &ta, &tb, lam).unwrap();
            assert!(t.iter().all(|&v| v >= 0.0));
            assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn low_alpha_concentrates_mass_at_the_extremes() {
        let mut r = rng::stream(2, "mixup-shape", &[]);
        let n = 4000;
        let mut extreme = 0;
        let mut middle = 0;
        for _ in 0..n {
            let lam = draw_mixup_lambda(0.4, &mut r).unwrap();
            assert!((0.0..=1.0).contains(&lam));
            if !(0.1..=0.9).contains(&lam) {
                extreme += 1;
            }
            if (0.4..=0.6).contains(&lam) {
                middle += 1;
            }
        }
        // Beta(0.4, 0.4) is U-shaped: P(outside [.1,.9]) ~ 0.49,
        // P(middle fifth) ~ 0.11 — both far from the uniform 0.2
        assert!(extreme > 2 * n / 5, "extreme fraction {}/{n}", extreme);
        assert!(middle < n / 5, "middle fraction {}/{n}", middle);
        assert!(extreme > 2 * middle, "not U-shaped: {extreme} vs {middle}");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let cfg = SyntheticConfig {
            n_states: 3,
            n_utterances: 1,
            frame_min: 8,
            frame_max: 8,
            visual_height: 4,
            visual_width: 4,
            samples_per_frame: 4,
            ..SyntheticConfig::default()
        };
        let a = generate_corpus(&cfg, 1).unwrap().remove(0);
        let b = generate_corpus(
            &SyntheticConfig {
                frame_min: 9,
                frame_max: 9,
                ..cfg
            },
            1,
        )
        .unwrap()
        .remove(0);
        let t = one_hot(0, 2).unwrap();
        assert!(mixup(&a, &b, &t, &t, 0.5).is_err());
    }

    #[test]
    fn window_of_requested_length_is_zeroed() {
        let mut seq = Tensor::new(vec![29, 3], vec![1.0; 29 * 3]).unwrap();
        let mut r = rng::stream(5, "tmask", &[]);
        temporal_mask_aug(&mut seq, 9, &mut r).unwrap();
        let zero_rows = (0..29).filter(|&f| seq.row(f).iter().all(|&v| v == 0.0)).count();
        assert_eq!(zero_rows, 9);
        // zeroed rows are contiguous
        let first = (0..29).position(|f| seq.row(f)[0] == 0.0).unwrap();
        for f in first..first + 9 {
            assert!(seq.row(f).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zero_length_is_identity_and_overlong_zeroes_all() {
        let base = Tensor::new(vec![4, 2], vec![1.0; 8]).unwrap();
        let mut seq = base.clone();
        let mut r = rng::stream(6, "tmask", &[]);
        temporal_mask_aug(&mut seq, 0, &mut r).unwrap();
        assert_eq!(seq.data(), base.data());
        temporal_mask_aug(&mut seq, 5, &mut r).unwrap();
        assert!(seq.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fixed_seed_gives_a_deterministic_window() {
        let run = || {
            let mut seq = Tensor::new(vec![20, 2], vec![1.0; 40]).unwrap();
            let mut r = rng::stream(7, "tmask-det", &[]);
            temporal_mask_aug(&mut seq, 5, &mut r).unwrap();
            seq.data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
