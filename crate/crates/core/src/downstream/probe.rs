//! Linear probing: a softmax-regression classifier trained on frozen
//! per-frame embeddings, reporting held-out accuracy. This is the cheap
//! stand-in for full fine-tuning when judging representation quality.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diffcore::softmax_stable;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub held_out_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 200,
            lr: 0.5,
            held_out_fraction: 0.25,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("probe needs at least one epoch"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config(format!("probe lr {} must be > 0", self.lr)));
        }
        if !(0.0 < self.held_out_fraction && self.held_out_fraction < 1.0) {
            return Err(Error::config(format!(
                "held_out_fraction {} outside (0, 1)",
                self.held_out_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub n_classes: usize,
}

fn predict(w: &[f64], b: &[f64], x: &[f64], k: usize, d: usize) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for c in 0..k {
        let score: f64 = b[c] + w[c * d..(c + 1) * d].iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>();
        if score > best_score {
            best_score = score;
            best = c;
        }
    }
    best
}

fn accuracy(w: &[f64], b: &[f64], xs: &[&[f64]], ys: &[usize], k: usize, d: usize) -> f64 {
    let hits = xs
        .iter()
        .zip(ys)
        .filter(|(x, &y)| predict(w, b, x, k, d) == y)
        .count();
    hits as f64 / xs.len().max(1) as f64
}

/// Trains a single linear layer (full-batch gradient descent on the softmax
/// cross-entropy) over frozen features and reports train/held-out accuracy.
pub fn linear_probe(
    features: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    cfg.validate()?;
    if features.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} feature rows vs {} labels",
            features.len(),
            labels.len()
        )));
    }
    if features.is_empty() {
        return Err(Error::data("no frames to probe"));
    }
    let d = features[0].len();
    if d == 0 || features.iter().any(|f| f.len() != d) {
        return Err(Error::shape("feature rows have inconsistent widths"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(Error::data(format!(
            "label {bad} out of range 0..{n_classes}"
        )));
    }
    let distinct: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::data(
            "probe labels contain a single class; nothing to separate",
        ));
    }

    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut r = rng::stream(cfg.seed, "probe-split", &[]);
    order.shuffle(&mut r);
    let n_test = ((features.len() as f64) * cfg.held_out_fraction).round() as usize;
    let n_test = n_test.clamp(1, features.len() - 1);
    let test_ix = &order[..n_test];
    let train_ix = &order[n_test..];

    let train_x: Vec<&[f64]> = train_ix.iter().map(|&i| features[i].as_slice()).collect();
    let train_y: Vec<usize> = train_ix.iter().map(|&i| labels[i]).collect();
    let test_x: Vec<&[f64]> = test_ix.iter().map(|&i| features[i].as_slice()).collect();
    let test_y: Vec<usize> = test_ix.iter().map(|&i| labels[i]).collect();

    let k = n_classes;
    let mut w = vec![0.0f64; k * d];
    let mut b = vec![0.0f64; k];
    let n = train_x.len() as f64;
    let mut probs = vec![0.0f64; k];
    for _ in 0..cfg.epochs {
        let mut gw = vec![0.0f64; k * d];
        let mut gb = vec![0.0f64; k];
        for (x, &y) in train_x.iter().zip(&train_y) {
            for c in 0..k {
                probs[c] = b[c]
                    + w[c * d..(c + 1) * d]
                        .iter()
                        .zip(*x)
                        .map(|(wi, xi)| wi * xi)
                        .sum::<f64>();
            }
            let p = softmax_stable(&probs)?;
            for c in 0..k {
                let err = p[c] - f64::from(u8::from(c == y));
                gb[c] += err;
                for (g, xi) in gw[c * d..(c + 1) * d].iter_mut().zip(*x) {
                    *g += err * xi;
                }
            }
        }
        for (wi, gi) in w.iter_mut().zip(&gw) {
            *wi -= cfg.lr * gi / n;
        }
        for (bi, gi) in b.iter_mut().zip(&gb) {
            *bi -= cfg.lr * gi / n;
        }
    }

    Ok(ProbeReport {
        train_accuracy: accuracy(&w, &b, &train_x, &train_y, k, d),
        test_accuracy: accuracy(&w, &b, &test_x, &test_y, k, d),
        n_train: train_x.len(),
        n_test: test_x.len(),
        n_classes,
    })
}
