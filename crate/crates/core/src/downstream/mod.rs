//! Everything downstream of pre-training: CTC loss and decoding, error-rate
//! metrics, fine-tuning augmentations, linear probing, and the task
//! fine-tuning loops.

pub mod augment;
pub mod ctc;
pub mod finetune;
pub mod metrics;
pub mod probe;

/// Seeded train/validation index split shared by the fine-tuning paths.
/// Always leaves at least one training example; both halves come back
/// sorted.
pub(crate) fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut ix: Vec<usize> = (0..n).collect();
    let mut r = crate::rng::stream(seed, "finetune-val-split", &[]);
    ix.shuffle(&mut r);
    let n_val = (((n as f64) * val_fraction).round() as usize).min(n.saturating_sub(1));
    let mut val = ix[..n_val].to_vec();
    let mut train = ix[n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}
