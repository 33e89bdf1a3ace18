//! CTC loss and best-path decoding over per-frame log distributions.
//!
//! The loss is the log-space forward recursion over the blank-interleaved
//! target, built from tape ops end to end so its gradient comes from the
//! same reverse pass as everything else — there is no hand-written backward
//! recursion to keep in sync.

use crate::diffcore::{BufId, Tape, Tensor, LOG_ZERO};
use crate::error::{Error, Result};

use super::metrics::Vocabulary;

/// Frames strictly required to emit `target`: one per symbol plus one
/// separating blank between each adjacent repeat.
pub fn min_frames_for(target: &[usize]) -> usize {
    let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
    target.len() + repeats
}

fn validate_log_probs(tape: &Tape, log_probs: BufId) -> Result<(usize, usize)> {
    let t = tape.value(log_probs);
    let shape = t.shape();
    if shape.len() != 2 {
        return Err(Error::shape(format!(
            "log_probs must be [frames, vocab], got {shape:?}"
        )));
    }
    let (frames, vocab) = (shape[0], shape[1]);
    if frames == 0 || vocab < 2 {
        return Err(Error::shape(format!(
            "log_probs needs >= 1 frame and >= 2 symbols, got {frames}x{vocab}"
        )));
    }
    for r in 0..frames {
        let mass: f64 = t.row(r).iter().map(|&v| v.exp()).sum();
        if (mass - 1.0).abs() > 1e-6 {
            return Err(Error::numeric(format!(
                "log_probs row {r} sums to {mass}, not a distribution"
            )));
        }
    }
    Ok((frames, vocab))
}

/// Negative log-probability of `target` (vocabulary indices, blank = 0 not
/// allowed) under the alignment-marginalizing CTC model.
pub fn ctc_loss(tape: &mut Tape, log_probs: BufId, target: &[usize]) -> Result<BufId> {
    let (frames, vocab) = validate_log_probs(tape, log_probs)?;
    if let Some(&bad) = target.iter().find(|&&s| s == 0 || s >= vocab) {
        return Err(Error::data(format!(
            "target symbol {bad} outside 1..{vocab}"
        )));
    }
    let need = min_frames_for(target);
    if frames < need {
        return Err(Error::data(format!(
            "target needs at least {need} frames, only {frames} available"
        )));
    }

    // blank-interleaved target: [-, t1, -, t2, ..., tL, -]
    let mut ext = vec![0usize];
    for &s in target {
        ext.push(s);
        ext.push(0);
    }
    let s_len = ext.len();

    // positions where the skip transition (s-2 -> s) is legal
    let skip_mask: Vec<f64> = (0..s_len)
        .map(|s| {
            if ext[s] != 0 && s >= 2 && ext[s] != ext[s - 2] {
                0.0
            } else {
                LOG_ZERO
            }
        })
        .collect();
    let skip_mask = tape.leaf(Tensor::new(vec![s_len], skip_mask)?)?;

    let init_mask: Vec<f64> = (0..s_len)
        .map(|s| if s < 2 { 0.0 } else { LOG_ZERO })
        .collect();
    let init_mask = tape.leaf(Tensor::new(vec![s_len], init_mask)?)?;

    let row0 = tape.slice_row(log_probs, 0)?;
    let emit0 = tape.gather(row0, &ext)?;
    let mut alpha = tape.add(emit0, init_mask)?;

    for f in 1..frames {
        let stay = alpha;
        let step = tape.pad_shift_right(alpha, 1, LOG_ZERO)?;
        let skip = tape.pad_shift_right(alpha, 2, LOG_ZERO)?;
        let skip = tape.add(skip, skip_mask)?;
        let merged = tape.log_add_exp(stay, step)?;
        let merged = tape.log_add_exp(merged, skip)?;
        let row = tape.slice_row(log_probs, f)?;
        let emit = tape.gather(row, &ext)?;
        alpha = tape.add(merged, emit)?;
    }

    let ends: Vec<usize> = if target.is_empty() {
        vec![0]
    } else {
        vec![s_len - 2, s_len - 1]
    };
    let finals = tape.gather(alpha, &ends)?;
    let total = tape.log_sum_exp_vec(finals)?;
    tape.scale(total, -1.0)
}

/// Per-frame argmax (ties broken toward the lowest index), collapse
/// consecutive repeats, drop blanks.
pub fn best_path_decode(log_probs: &Tensor, vocab: &Vocabulary) -> Result<String> {
    let shape = log_probs.shape();
    if shape.len() != 2 || shape[1] != vocab.size() {
        return Err(Error::shape(format!(
            "log_probs {shape:?} do not match vocabulary of {} symbols",
            vocab.size()
        )));
    }
    let mut out = String::new();
    let mut prev = usize::MAX;
    for r in 0..shape[0] {
        let row = log_probs.row(r);
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        if best != prev && best != 0 {
            out.push(vocab.symbol(best)?);
        }
        prev = best;
    }
    Ok(out)
}

/// Sums the probabilities of every alignment that collapses to `target` by
/// explicit enumeration. Exponential in `frames`; for tests only.
pub fn brute_force_ctc(log_probs: &Tensor, target: &[usize]) -> f64 {
    let shape = log_probs.shape();
    let (frames, vocab) = (shape[0], shape[1]);
    let mut total = f64::NEG_INFINITY;
    let mut path = vec![0usize; frames];
    loop {
        if collapse(&path) == target {
            let lp: f64 = path
                .iter()
                .enumerate()
                .map(|(f, &s)| log_probs.row(f)[s])
                .sum();
            let m = total.max(lp);
            total = m + ((total - m).exp() + (lp - m).exp()).ln();
        }
        // odometer increment over vocab^frames
        let mut i = 0;
        loop {
            if i == frames {
                return -total;
            }
            path[i] += 1;
            if path[i] < vocab {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for &s in path {
        if s != prev && s != 0 {
            out.push(s);
        }
        prev = s;
    }
    out
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use rand::Rng;

    use super::*;
    use crate::diffcore::{
        grad_check, grads_by_path, GradCheckOptions, ParameterSet, Staged,
    };
    use crate::rng;

    fn log_uniform(frames: usize, vocab: usize) -> Tensor {
        let p = (1.0 / vocab as f64).ln();
        Tensor::new(vec![frames, vocab], vec![p; frames * vocab]).unwrap()
    }

    fn random_log_probs(frames: usize, vocab: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, "ctc-test", &[frames as u64, vocab as u64]);
        let mut data = Vec::with_capacity(frames * vocab);
        for _ in 0..frames {
            let row: Vec<f64> = (0..vocab).map(|_| r.random_range(0.1..1.0)).collect();
            let sum: f64 = row.iter().sum();
            data.extend(row.iter().map(|v| (v / sum).ln()));
        }
        Tensor::new(vec![frames, vocab], data).unwrap()
    }

    fn loss_value(log_probs: &Tensor, target: &[usize]) -> f64 {
        let mut tape = Tape::new();
        let lp = tape.leaf(log_probs.clone()).unwrap();
        let loss = ctc_loss(&mut tape, lp, target).unwrap();
        tape.scalar_value(loss).unwrap()
    }

    #[test]
    fn single_frame_uniform_matches_hand_value() {
        let lp = log_uniform(1, 2);
        let loss = loss_value(&lp, &[1]);
        assert!((loss - 0.5f64.ln().abs()).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn empty_target_is_the_all_blank_path() {
        let lp = random_log_probs(3, 3, 1);
        let expect: f64 = -(0..3).map(|f| lp.row(f)[0]).sum::<f64>();
        let loss = loss_value(&lp, &[]);
        assert!((loss - expect).abs() < 1e-9, "{loss} vs {expect}");
    }

    #[test]
    fn two_frames_single_symbol_sums_three_alignments() {
        let lp = random_log_probs(2, 2, 2);
        let pa = |f: usize| lp.row(f)[1].exp();
        let pb = |f: usize| lp.row(f)[0].exp();
        let expect = -(pa(0) * pa(1) + pa(0) * pb(1) + pb(0) * pa(1)).ln();
        let loss = loss_value(&lp, &[1]);
        assert!((loss - expect).abs() < 1e-9, "{loss} vs {expect}");
    }

    #[test]
    fn matches_brute_force_on_small_instances() {
        for vocab in [2, 3] {
            for frames in 1..=4 {
                for target_len in 0..=2usize {
                    let n_targets = (vocab - 1usize).pow(target_len as u32);
                    for t_ix in 0..n_targets {
                        let mut target = Vec::with_capacity(target_len);
                        let mut ix = t_ix;
                        for _ in 0..target_len {
                            target.push(1 + ix % (vocab - 1));
                            ix /= vocab - 1;
                        }
                        if min_frames_for(&target) > frames {
                            continue;
                        }
                        let lp = random_log_probs(
                            frames,
                            vocab,
                            (vocab * 100 + frames * 10 + t_ix) as u64,
                        );
                        let got = loss_value(&lp, &target);
                        let want = brute_force_ctc(&lp, &target);
                        assert!(
                            (got - want).abs() < 1e-9,
                            "frames {frames} vocab {vocab} target {target:?}: {got} vs {want}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn infeasible_targets_are_rejected() {
        let lp = log_uniform(1, 2);
        assert!({
            let mut tape = Tape::new();
            let b = tape.leaf(lp.clone()).unwrap();
            ctc_loss(&mut tape, b, &[1, 1]).is_err()
        });
        let lp3 = log_uniform(2, 2);
        let mut tape = Tape::new();
        let b = tape.leaf(lp3).unwrap();
        // "aa" needs 3 frames (separating blank)
        assert!(ctc_loss(&mut tape, b, &[1, 1]).is_err());
        // blank itself is not a legal target symbol
        let c = tape.leaf(log_uniform(2, 2)).unwrap();
        assert!(ctc_loss(&mut tape, c, &[0]).is_err());
    }

    #[test]
    fn rows_must_be_distributions() {
        let bad = Tensor::new(vec![1, 2], vec![-0.1, -0.1]).unwrap();
        let mut tape = Tape::new();
        let b = tape.leaf(bad).unwrap();
        assert!(ctc_loss(&mut tape, b, &[1]).is_err());
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut set = ParameterSet::new();
        let mut r = rng::stream(7, "ctc-grad", &[]);
        let logits: Vec<f64> = (0..5 * 3).map(|_| r.random_range(-1.0..1.0)).collect();
        set.insert("logits", Tensor::new(vec![5, 3], logits).unwrap())
            .unwrap();
        let target = vec![1usize, 2, 1];

        let forward = |tape: &mut Tape, staged: &Staged| -> Result<BufId> {
            let x = staged["logits"];
            let lp = tape.log_softmax_rows(x)?;
            ctc_loss(tape, lp, &target)
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

    #[test]
    fn decode_collapses_repeats_and_drops_blanks() {
        let vocab = Vocabulary::new(&['a', 'b']).unwrap();
        let path_probs = |path: &[usize]| {
            let mut data = vec![(0.1f64).ln(); path.len() * 3];
            for (f, &s) in path.iter().enumerate() {
                data[f * 3 + s] = (0.8f64).ln();
            }
            Tensor::new(vec![path.len(), 3], data).unwrap()
        };
        let cases: &[(&[usize], &str)] = &[
            (&[1, 1, 0, 2, 2], "ab"),
            (&[0, 0, 0], ""),
            (&[1, 0, 1], "aa"),
            (&[2, 2, 2, 1], "ba"),
        ];
        for (path, want) in cases {
            let got = best_path_decode(&path_probs(path), &vocab).unwrap();
            assert_eq!(&got, want, "path {path:?}");
        }
    }

    #[test]
    fn decode_ties_choose_the_lowest_index() {
        let vocab = Vocabulary::new(&['a', 'b']).unwrap();
        let third = (1.0f64 / 3.0).ln();
        let lp = Tensor::new(vec![2, 3], vec![third; 6]).unwrap();
        assert_eq!(best_path_decode(&lp, &vocab).unwrap(), "");
        let mut data = vec![third; 3];
        data[0] = (0.2f64).ln();
        data[1] = (0.4f64).ln();
        data[2] = (0.4f64).ln();
        let lp = Tensor::new(vec![1, 3], data).unwrap();
        assert_eq!(best_path_decode(&lp, &vocab).unwrap(), "a");
    }
}
