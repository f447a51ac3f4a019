use std::cmp::Ordering;
use std::collections::HashMap;

use super::model::{decoder_input, Pass, Seq2Seq};
use super::tape::Tape;
use super::NmtError;
use crate::bpe::{BpeModel, EOS_ID};
use crate::corpus::Sentence;
use crate::scalar::Scalar;
use crate::segment::{detokenize_tokens, segment_greedy, TokenSequence};

/// A decoded output.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Emitted tokens, including `</s>` when it was produced.
    pub tokens: TokenSequence,
    /// Sum of the log probabilities of the emitted tokens.
    pub log_prob: f64,
    /// Vocabulary size of the source segmentation that produced it.
    pub source_granularity: usize,
}

impl Hypothesis {
    /// Output ids without the closing `</s>`.
    pub fn output_ids(&self) -> &[u32] {
        match self.tokens.ids.split_last() {
            Some((&EOS_ID, rest)) => rest,
            _ => &self.tokens.ids,
        }
    }

    pub fn text(&self) -> Sentence {
        let n = self.output_ids().len();
        detokenize_tokens(self.tokens.tokens[..n].iter().map(String::as_str))
    }
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    row.iter().map(|&z| z - lse).collect()
}

fn by_score(a: &(Vec<u32>, f64), b: &(Vec<u32>, f64)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(&b.0))
}

/// Beam search; `beam = 1` is greedy argmax decoding. A hypothesis is
/// complete when it emits `</s>` or reaches `max_len` tokens.
pub fn decode<T: Scalar>(
    model: &Seq2Seq<T>,
    bpe: &BpeModel,
    src: &TokenSequence,
    beam: usize,
    max_len: usize,
) -> Result<Hypothesis, NmtError> {
    if beam == 0 || max_len == 0 {
        return Err(NmtError::Config("beam and max_len must be positive".into()));
    }
    let mut tape = Tape::new(model.params().len());
    let enc = Pass::new(model, &mut tape, None).encode(&src.ids, src.vocab_size)?;
    let mut alive: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<(Vec<u32>, f64)> = Vec::new();
    while !alive.is_empty() {
        let mut candidates = Vec::new();
        for (prefix, lp) in &alive {
            let logits = Pass::new(model, &mut tape, None).decode(enc, &decoder_input(prefix))?;
            let lv = tape.value(logits);
            let last: Vec<f64> = lv.row(lv.rows() - 1).iter().map(|x| x.as_f64()).collect();
            let mut scored: Vec<(u32, f64)> = log_softmax(&last)
                .into_iter()
                .enumerate()
                .map(|(i, l)| (i as u32, l))
                .collect();
            scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
            for &(tok, l) in scored.iter().take(beam) {
                let mut ids = prefix.clone();
                ids.push(tok);
                candidates.push((ids, lp + l));
            }
        }
        candidates.sort_by(by_score);
        candidates.truncate(beam);
        alive.clear();
        for c in candidates {
            if c.0.last() == Some(&EOS_ID) || c.0.len() >= max_len {
                finished.push(c);
            } else {
                alive.push(c);
            }
        }
        // Scores only decrease, so nothing alive can beat the best finished.
        let best_done = finished.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
        if alive.iter().all(|c| c.1 <= best_done) {
            break;
        }
    }
    finished.sort_by(by_score);
    let (ids, log_prob) = finished.into_iter().next().expect("beam search finishes a hypothesis");
    let tokens = ids.iter().map(|&i| bpe.token(i).unwrap_or("<unk>").to_string()).collect();
    Ok(Hypothesis {
        tokens: TokenSequence {
            ids,
            tokens,
            vocab_size: model.classes(),
        },
        log_prob,
        source_granularity: src.vocab_size,
    })
}

/// Length-normalised log probability.
pub fn normalised_score(hyp: &Hypothesis) -> Result<f64, NmtError> {
    if hyp.tokens.is_empty() {
        return Err(NmtError::EmptyHypothesis);
    }
    Ok(hyp.log_prob / hyp.tokens.len() as f64)
}

/// Decode `sentence` once per distinct size, in the order given.
pub fn decode_all<T: Scalar>(
    model: &Seq2Seq<T>,
    sentence: &Sentence,
    bpe: &BpeModel,
    sizes: &[usize],
    beam: usize,
    max_len: usize,
) -> Result<Vec<Hypothesis>, NmtError> {
    if sizes.is_empty() {
        return Err(NmtError::Config("at least one granularity is required".into()));
    }
    let mut cache: HashMap<usize, Hypothesis> = HashMap::new();
    sizes
        .iter()
        .map(|&size| {
            let src = segment_greedy(sentence, bpe, size)?;
            if let Some(h) = cache.get(&src.vocab_size) {
                return Ok(h.clone());
            }
            let h = decode(model, bpe, &src, beam, max_len)?;
            cache.insert(src.vocab_size, h.clone());
            Ok(h)
        })
        .collect()
}

/// Index of the best candidate under `score`: highest score, then the
/// prime (first) candidate, then the smaller granularity.
fn select(cands: &[Hypothesis], score: impl Fn(&Hypothesis) -> Result<f64, NmtError>) -> Result<usize, NmtError> {
    let scores = cands.iter().map(&score).collect::<Result<Vec<_>, _>>()?;
    let mut best = 0;
    for i in 1..cands.len() {
        let better = scores[i] > scores[best]
            || (scores[i] == scores[best]
                && best != 0
                && cands[i].source_granularity < cands[best].source_granularity);
        if better {
            best = i;
        }
    }
    Ok(best)
}

/// Decode at every size (`sizes[0]` is the prime size) and keep the
/// hypothesis with the best [`normalised_score`].
pub fn dynamic_select<T: Scalar>(
    model: &Seq2Seq<T>,
    sentence: &Sentence,
    bpe: &BpeModel,
    sizes: &[usize],
    beam: usize,
    max_len: usize,
) -> Result<Hypothesis, NmtError> {
    let cands = decode_all(model, sentence, bpe, sizes, beam, max_len)?;
    let i = select(&cands, normalised_score)?;
    Ok(cands.into_iter().nth(i).expect("index in range"))
}

/// Decode at every size and keep the hypothesis with the highest sentence
/// BLEU against `reference`. For analysis only.
pub fn oracle_select<T: Scalar>(
    model: &Seq2Seq<T>,
    sentence: &Sentence,
    reference: &Sentence,
    bpe: &BpeModel,
    sizes: &[usize],
    beam: usize,
    max_len: usize,
) -> Result<Hypothesis, NmtError> {
    let cands = decode_all(model, sentence, bpe, sizes, beam, max_len)?;
    let i = select(&cands, |h| Ok(sentence_bleu(h.text().as_str(), reference.as_str())))?;
    Ok(cands.into_iter().nth(i).expect("index in range"))
}

fn ngrams<'a>(words: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut out = HashMap::new();
    for w in words.windows(n) {
        *out.entry(w).or_insert(0) += 1;
    }
    out
}

/// Smoothed sentence BLEU over whitespace-separated words: up to 4-gram
/// precisions, add-one smoothing for n >= 2, brevity penalty.
pub fn sentence_bleu(hypothesis: &str, reference: &str) -> f64 {
    let hyp: Vec<&str> = hypothesis.split_whitespace().collect();
    let refw: Vec<&str> = reference.split_whitespace().collect();
    if hyp.is_empty() || refw.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let h = ngrams(&hyp, n);
        let r = ngrams(&refw, n);
        let matched: usize = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
        let total = hyp.len().saturating_sub(n - 1);
        let p = if n == 1 {
            if matched == 0 {
                return 0.0;
            }
            matched as f64 / total as f64
        } else {
            (matched + 1) as f64 / (total + 1) as f64
        };
        log_sum += p.ln();
    }
    let (c, r) = (hyp.len() as f64, refw.len() as f64);
    let bp = if c >= r { 1.0 } else { (1.0 - r / c).exp() };
    bp * (log_sum / 4.0).exp()
}
