//! Unigram language model over subword tokens: scoring, Viterbi argmax and
//! forward-filtering/backward-sampling of segmentations.
//!
//! Used to check empirically that an argmax segmentation is never less
//! probable than a sampled one under the same model.

use std::collections::HashMap;

use rand::Rng;
use thiserror::Error;

use crate::bpe::{split_words, BpeModel};
use crate::corpus::Sentence;
use crate::rng_from_seed;
use crate::scalar::log_sum_exp;
use crate::segment::{segment_greedy, TokenSequence};

#[derive(Debug, Error)]
pub enum UnigramError {
    #[error("token {0:?} is outside the model support")]
    OutOfSupport(String),
    #[error("character {0:?} at offset {1} cannot be covered by any token")]
    Uncoverable(char, usize),
    #[error("probabilities must be positive and sum to 1 (sum = {0})")]
    NotNormalised(f64),
    #[error("empty support")]
    Empty,
    #[error(transparent)]
    Bpe(#[from] crate::bpe::BpeError),
}

#[derive(Debug, Clone)]
pub struct UnigramModel {
    tokens: Vec<String>,
    log_probs: Vec<f64>,
    index: HashMap<String, usize>,
    max_chars: usize,
    /// When set, sentences are normalised the way BPE sees them (leading
    /// marker, spaces replaced by the marker) before segmentation.
    marker: Option<char>,
}

impl UnigramModel {
    /// Build from explicit token probabilities. Tokens are kept in sorted
    /// order so ids are stable.
    pub fn from_probs<S: Into<String>>(
        probs: impl IntoIterator<Item = (S, f64)>,
        marker: Option<char>,
    ) -> Result<Self, UnigramError> {
        let mut entries: Vec<(String, f64)> = probs.into_iter().map(|(t, p)| (t.into(), p)).collect();
        if entries.is_empty() {
            return Err(UnigramError::Empty);
        }
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        entries.dedup_by(|a, b| a.0 == b.0);
        let total: f64 = entries.iter().map(|e| e.1).sum();
        if entries.iter().any(|e| !(e.1 > 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(UnigramError::NotNormalised(total));
        }
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, (t, _))| (t.clone(), i))
            .collect();
        let max_chars = entries.iter().map(|(t, _)| t.chars().count()).max().unwrap_or(0);
        let (tokens, probs): (Vec<_>, Vec<_>) = entries.into_iter().unzip();
        Ok(UnigramModel {
            tokens,
            log_probs: probs.iter().map(|p: &f64| p.ln()).collect(),
            index,
            max_chars,
            marker,
        })
    }

    /// Maximum-likelihood unigram frequencies over the corpus segmented
    /// greedily at each of `sizes`. Including the base size guarantees that
    /// every seen character is in the support.
    pub fn estimate(
        corpus: &[Sentence],
        bpe: &BpeModel,
        sizes: &[usize],
    ) -> Result<Self, UnigramError> {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for &size in sizes {
            for s in corpus {
                for t in segment_greedy(s, bpe, size)?.tokens {
                    *counts.entry(t).or_default() += 1;
                }
            }
        }
        let total: u64 = counts.values().sum();
        let mut entries: Vec<(String, u64)> = counts.into_iter().collect();
        entries.sort();
        UnigramModel::from_probs(
            entries
                .into_iter()
                .map(|(t, c)| (t, c as f64 / total as f64)),
            Some(bpe.word_marker()),
        )
    }

    pub fn support_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn log_prob(&self, token: &str) -> Option<f64> {
        self.index.get(token).map(|&i| self.log_probs[i])
    }

    fn normalise(&self, text: &str) -> Vec<char> {
        match self.marker {
            Some(m) => split_words(text, m).concat().chars().collect(),
            None => text.chars().collect(),
        }
    }

    fn sequence(&self, ids: Vec<usize>) -> TokenSequence {
        TokenSequence {
            tokens: ids.iter().map(|&i| self.tokens[i].clone()).collect(),
            ids: ids.into_iter().map(|i| i as u32).collect(),
            vocab_size: self.tokens.len(),
        }
    }

    /// Candidate tokens ending at `end`: (start, token index).
    fn ending_at<'a>(&'a self, chars: &'a [char], end: usize) -> impl Iterator<Item = (usize, usize)> + 'a {
        let lo = end.saturating_sub(self.max_chars);
        let mut buf = String::new();
        (lo..end).rev().filter_map(move |start| {
            buf.clear();
            buf.extend(&chars[start..end]);
            self.index.get(buf.as_str()).map(|&i| (start, i))
        })
    }
}

/// Sum of per-token log probabilities, accumulated left to right.
pub fn unigram_logprob(seq: &TokenSequence, um: &UnigramModel) -> Result<f64, UnigramError> {
    seq.tokens.iter().try_fold(0.0, |acc, t| {
        um.log_prob(t)
            .map(|lp| acc + lp)
            .ok_or_else(|| UnigramError::OutOfSupport(t.clone()))
    })
}

#[derive(Clone, Copy)]
struct Cell {
    score: f64,
    count: usize,
    start: usize,
    token: usize,
}

/// Token end positions of the best path reaching `end`.
fn path_ends(cells: &[Option<Cell>], mut end: usize) -> Vec<usize> {
    let mut ends = Vec::new();
    while end > 0 {
        ends.push(end);
        end = cells[end].expect("reachable").start;
    }
    ends.reverse();
    ends
}

/// Most probable segmentation. Scores are accumulated left to right exactly
/// as [`unigram_logprob`] does, so the result dominates every other
/// segmentation bit-for-bit. Exact ties go to fewer tokens, then to the
/// segmentation whose earliest differing token is longer.
pub fn unigram_viterbi(sentence: &Sentence, um: &UnigramModel) -> Result<TokenSequence, UnigramError> {
    let chars = um.normalise(sentence.as_str());
    let n = chars.len();
    let mut cells: Vec<Option<Cell>> = vec![None; n + 1];
    cells[0] = Some(Cell {
        score: 0.0,
        count: 0,
        start: 0,
        token: usize::MAX,
    });
    for end in 1..=n {
        let mut best: Option<Cell> = None;
        for (start, tok) in um.ending_at(&chars, end) {
            let Some(prev) = cells[start] else { continue };
            let cand = Cell {
                score: prev.score + um.log_probs[tok],
                count: prev.count + 1,
                start,
                token: tok,
            };
            let better = match best {
                None => true,
                Some(b) if cand.score != b.score => cand.score > b.score,
                Some(b) if cand.count != b.count => cand.count < b.count,
                Some(b) => {
                    let mut pa = path_ends(&cells, cand.start);
                    pa.push(end);
                    let mut pb = path_ends(&cells, b.start);
                    pb.push(end);
                    // larger first differing end = longer earlier token
                    pa > pb
                }
            };
            if better {
                best = Some(cand);
            }
        }
        cells[end] = best;
    }
    if cells[n].is_none() {
        let gap = (0..n).rev().find(|&i| cells[i].is_some()).unwrap_or(0);
        return Err(UnigramError::Uncoverable(chars[gap], gap));
    }
    let mut ids = Vec::new();
    let mut end = n;
    while end > 0 {
        let c = cells[end].expect("checked reachable");
        ids.push(c.token);
        end = c.start;
    }
    ids.reverse();
    Ok(um.sequence(ids))
}

/// Sample a segmentation with probability proportional to its unigram
/// probability (forward filtering, backward sampling).
pub fn unigram_sample(
    sentence: &Sentence,
    um: &UnigramModel,
    seed: u64,
) -> Result<TokenSequence, UnigramError> {
    let chars = um.normalise(sentence.as_str());
    let n = chars.len();
    let mut alpha = vec![f64::NEG_INFINITY; n + 1];
    alpha[0] = 0.0;
    let mut incoming: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n + 1];
    for end in 1..=n {
        let mut terms = Vec::new();
        for (start, tok) in um.ending_at(&chars, end) {
            if alpha[start] > f64::NEG_INFINITY {
                terms.push(alpha[start] + um.log_probs[tok]);
                incoming[end].push((start, tok));
            }
        }
        alpha[end] = log_sum_exp(&terms);
    }
    if alpha[n] == f64::NEG_INFINITY {
        let gap = (0..n).rev().find(|&i| alpha[i] > f64::NEG_INFINITY).unwrap_or(0);
        return Err(UnigramError::Uncoverable(chars[gap], gap));
    }
    let mut rng = rng_from_seed(seed);
    let mut ids = Vec::new();
    let mut end = n;
    while end > 0 {
        let options = &incoming[end];
        let weights: Vec<f64> = options
            .iter()
            .map(|&(start, tok)| (alpha[start] + um.log_probs[tok] - alpha[end]).exp())
            .collect();
        let total: f64 = weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = options.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                pick = i;
                break;
            }
            u -= w;
        }
        let (start, tok) = options[pick];
        ids.push(tok);
        end = start;
    }
    ids.reverse();
    Ok(um.sequence(ids))
}
