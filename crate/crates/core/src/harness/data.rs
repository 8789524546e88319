//! Synthetic next-token tasks.

use std::fmt;
use std::str::FromStr;

use crate::error::{Result, ShdError};
use crate::numkernel::SeededRng;

const CORPUS: &str = include_str!("../../data/corpus.txt");

/// Characters of the normalised corpus alphabet, indexed by token id.
pub const CHAR_ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz ,.";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    /// Second half repeats the first half.
    Copy,
    /// Second half is the sorted first half.
    Sort,
    /// Windows over the bundled text.
    CharLm,
}

impl FromStr for TaskKind {
    type Err = ShdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "sort" => Ok(TaskKind::Sort),
            "char_lm" => Ok(TaskKind::CharLm),
            other => Err(ShdError::invalid(format!(
                "unknown task kind {other:?} (expected copy, sort or char_lm)"
            ))),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Copy => "copy",
            TaskKind::Sort => "sort",
            TaskKind::CharLm => "char_lm",
        })
    }
}

/// One sequence: `targets[i]` is the token to predict after reading `tokens[..=i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    /// Positions that contribute to the loss.
    pub loss_mask: Vec<bool>,
}

impl Sample {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Corpus token ids after lowercasing and folding punctuation.
pub fn corpus_tokens() -> Vec<usize> {
    let mut out = Vec::with_capacity(CORPUS.len());
    let mut last_space = true;
    for c in CORPUS.chars() {
        let c = c.to_ascii_lowercase();
        let id = match c {
            'a'..='z' => Some(c as usize - 'a' as usize),
            c if c.is_whitespace() || c == '-' => (!last_space).then_some(26),
            ',' => Some(27),
            '.' | '!' | '?' | ';' | ':' => Some(28),
            _ => None,
        };
        if let Some(id) = id {
            last_space = id == 26;
            out.push(id);
        }
    }
    out
}

/// `size` samples of length `seq_len`; a pure function of its arguments.
pub fn make_dataset(kind: TaskKind, seed: u64, size: usize, seq_len: usize, vocab: usize) -> Result<Vec<Sample>> {
    if seq_len < 2 {
        return Err(ShdError::invalid("seq_len must be at least 2"));
    }
    let mut rng = SeededRng::new(seed);
    match kind {
        TaskKind::Copy | TaskKind::Sort => {
            if !seq_len.is_multiple_of(2) {
                return Err(ShdError::invalid(format!(
                    "{kind} needs an even seq_len, got {seq_len}"
                )));
            }
            if vocab < 2 {
                return Err(ShdError::invalid("vocab must be at least 2"));
            }
            let half = seq_len / 2;
            Ok((0..size)
                .map(|_| {
                    let mut first: Vec<usize> = (0..half).map(|_| rng.below(vocab)).collect();
                    let mut tokens = first.clone();
                    if kind == TaskKind::Sort {
                        first.sort_unstable();
                    }
                    tokens.extend(first);
                    let mut targets = tokens[1..].to_vec();
                    targets.push(0);
                    let loss_mask = (0..seq_len).map(|i| i + 1 >= half && i + 1 < seq_len).collect();
                    Sample {
                        tokens,
                        targets,
                        loss_mask,
                    }
                })
                .collect())
        }
        TaskKind::CharLm => {
            if vocab < CHAR_ALPHABET.len() {
                return Err(ShdError::invalid(format!(
                    "char_lm needs vocab >= {}, got {vocab}",
                    CHAR_ALPHABET.len()
                )));
            }
            let text = corpus_tokens();
            if text.len() <= seq_len {
                return Err(ShdError::invalid("seq_len exceeds the bundled corpus"));
            }
            Ok((0..size)
                .map(|_| {
                    let start = rng.below(text.len() - seq_len);
                    let window = &text[start..=start + seq_len];
                    Sample {
                        tokens: window[..seq_len].to_vec(),
                        targets: window[1..].to_vec(),
                        loss_mask: vec![true; seq_len],
                    }
                })
                .collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copy_targets_repeat_first_half() {
        let data = make_dataset(TaskKind::Copy, 3, 20, 8, 16).unwrap();
        for s in &data {
            assert_eq!(s.len(), 8);
            assert!(s.tokens.iter().all(|&t| t < 16));
            let predicted: Vec<usize> = (0..8).filter(|&i| s.loss_mask[i]).map(|i| s.targets[i]).collect();
            assert_eq!(predicted, s.tokens[..4]);
        }
    }

    #[test]
    fn sort_targets_are_non_decreasing() {
        for s in make_dataset(TaskKind::Sort, 5, 50, 10, 9).unwrap() {
            let predicted: Vec<usize> = (0..10).filter(|&i| s.loss_mask[i]).map(|i| s.targets[i]).collect();
            assert!(predicted.windows(2).all(|w| w[0] <= w[1]));
            let mut first = s.tokens[..5].to_vec();
            first.sort_unstable();
            assert_eq!(predicted, first);
        }
    }

    #[test]
    fn datasets_are_seed_deterministic() {
        for kind in [TaskKind::Copy, TaskKind::Sort, TaskKind::CharLm] {
            let a = make_dataset(kind, 11, 30, 12, 32).unwrap();
            assert_eq!(a, make_dataset(kind, 11, 30, 12, 32).unwrap());
            assert_ne!(a, make_dataset(kind, 12, 30, 12, 32).unwrap());
        }
    }

    #[test]
    fn char_lm_windows_shift_by_one() {
        let text = corpus_tokens();
        assert!(text.len() > 4000);
        assert!(text.iter().all(|&t| t < CHAR_ALPHABET.len()));
        for s in make_dataset(TaskKind::CharLm, 1, 10, 16, 29).unwrap() {
            assert_eq!(s.tokens[1..], s.targets[..15]);
            assert!(s.loss_mask.iter().all(|&m| m));
        }
    }

    #[test]
    fn bad_requests_are_rejected() {
        assert!("bogus".parse::<TaskKind>().is_err());
        assert_eq!("sort".parse::<TaskKind>().unwrap(), TaskKind::Sort);
        assert!(make_dataset(TaskKind::Copy, 0, 1, 7, 8).is_err());
        assert!(make_dataset(TaskKind::CharLm, 0, 1, 8, 10).is_err());
    }
}
