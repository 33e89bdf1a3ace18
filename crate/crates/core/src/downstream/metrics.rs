//! Transcript vocabulary and edit-distance error rates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered symbol set with the blank reserved at index 0; transcript
/// symbols occupy indices 1 and up.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    symbols: Vec<char>,
}

impl Vocabulary {
    pub fn new(symbols: &[char]) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for &c in symbols {
            if !seen.insert(c) {
                return Err(Error::config(format!("duplicate symbol '{c}' in vocabulary")));
            }
        }
        if symbols.is_empty() {
            return Err(Error::config("vocabulary needs at least one symbol"));
        }
        Ok(Vocabulary {
            symbols: symbols.to_vec(),
        })
    }

    /// Unique transcript characters across a corpus, sorted.
    pub fn from_transcripts<'a>(transcripts: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let set: std::collections::BTreeSet<char> =
            transcripts.into_iter().flat_map(|t| t.chars()).collect();
        let symbols: Vec<char> = set.into_iter().collect();
        Vocabulary::new(&symbols)
    }

    /// Total symbol count including the blank.
    pub fn size(&self) -> usize {
        self.symbols.len() + 1
    }

    /// The character at a non-blank index.
    pub fn symbol(&self, index: usize) -> Result<char> {
        if index == 0 {
            return Err(Error::config("index 0 is the blank, not a symbol"));
        }
        self.symbols
            .get(index - 1)
            .copied()
            .ok_or_else(|| Error::config(format!("symbol index {index} out of range")))
    }

    pub fn index_of(&self, c: char) -> Result<usize> {
        self.symbols
            .iter()
            .position(|&s| s == c)
            .map(|p| p + 1)
            .ok_or_else(|| Error::data(format!("'{c}' is not in the vocabulary")))
    }

    pub fn encode(&self, transcript: &str) -> Result<Vec<usize>> {
        transcript.chars().map(|c| self.index_of(c)).collect()
    }

    pub fn decode(&self, indices: &[usize]) -> Result<String> {
        indices.iter().map(|&i| self.symbol(i)).collect()
    }
}

/// Unit-cost Levenshtein distance between token sequences.
pub fn levenshtein<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> usize {
    let n = hypothesis.len();
    let mut prev: Vec<usize> = (0..=n).collect();
    let mut cur = vec![0usize; n + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[n]
}

/// Edit distance and normalized rate for one reference/hypothesis pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorRate {
    pub distance: usize,
    pub reference_len: usize,
    pub rate: f64,
    /// Set when the reference was empty but the hypothesis was not; the
    /// rate is then the raw insertion count.
    pub empty_reference: bool,
}

pub fn error_rate<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> ErrorRate {
    let distance = levenshtein(reference, hypothesis);
    if reference.is_empty() {
        return ErrorRate {
            distance,
            reference_len: 0,
            rate: hypothesis.len() as f64,
            empty_reference: !hypothesis.is_empty(),
        };
    }
    ErrorRate {
        distance,
        reference_len: reference.len(),
        rate: distance as f64 / reference.len() as f64,
        empty_reference: false,
    }
}

/// Character error rate; every char (including spaces) is a token.
pub fn cer(reference: &str, hypothesis: &str) -> ErrorRate {
    let r: Vec<char> = reference.chars().collect();
    let h: Vec<char> = hypothesis.chars().collect();
    error_rate(&r, &h)
}

/// Word error rate over whitespace-separated words.
pub fn wer(reference: &str, hypothesis: &str) -> ErrorRate {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    error_rate(&r, &h)
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::rng;

    #[test]
    fn vocabulary_rejects_duplicates_and_maps_both_ways() {
        assert!(Vocabulary::new(&['a', 'a']).is_err());
        assert!(Vocabulary::new(&[]).is_err());
        let v = Vocabulary::new(&['a', 'b', 'c']).unwrap();
        assert_eq!(v.size(), 4);
        assert_eq!(v.index_of('b').unwrap(), 2);
        assert_eq!(v.symbol(2).unwrap(), 'b');
        assert!(v.symbol(0).is_err());
        assert!(v.index_of('z').is_err());
        assert_eq!(v.encode("cab").unwrap(), vec![3, 1, 2]);
        assert_eq!(v.decode(&[3, 1, 2]).unwrap(), "cab");
    }

    #[test]
    fn vocabulary_from_transcripts_is_sorted_unique() {
        let v = Vocabulary::from_transcripts(["baa", "cb"]).unwrap();
        assert_eq!(v.encode("abc").unwrap(), vec![1, 2, 3]);
    }

    #[test]
    fn identical_sequences_have_zero_error() {
        let r = wer("a b c", "a b c");
        assert_eq!(r.distance, 0);
        assert_eq!(r.rate, 0.0);
    }

    #[test]
    fn single_insertion_in_words() {
        let r = wer("a b", "a x b");
        assert_eq!(r.distance, 1);
        assert_eq!(r.rate, 0.5);
    }

    #[test]
    fn single_substitution_in_chars() {
        let r = cer("abc", "axc");
        assert_eq!(r.distance, 1);
        assert!((r.rate - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_reference_reports_insertion_count() {
        let r = cer("", "xyz");
        assert_eq!(r.rate, 3.0);
        assert!(r.empty_reference);
        let r = cer("", "");
        assert_eq!(r.rate, 0.0);
        assert!(!r.empty_reference);
    }

    #[test]
    fn distance_satisfies_metric_axioms() {
        let mut r = rng::stream(3, "metric-axioms", &[]);
        let rand_seq = |r: &mut rand_chacha::ChaCha8Rng| -> Vec<u8> {
            let n = r.random_range(0..6);
            (0..n).map(|_| r.random_range(0..3u8)).collect()
        };
        for _ in 0..200 {
            let a = rand_seq(&mut r);
            let b = rand_seq(&mut r);
            let c = rand_seq(&mut r);
            assert_eq!(levenshtein(&a, &a), 0);
            assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
            assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
            if a != b {
                assert!(levenshtein(&a, &b) > 0);
            }
        }
    }

    #[test]
    fn whitespace_variants_do_not_change_wer() {
        let r = wer("a  b\tc", "a b c");
        assert_eq!(r.distance, 0);
    }
}
