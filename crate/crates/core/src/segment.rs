//! Sentence segmentation with a trained [`BpeModel`] at a chosen granularity.

use rand::Rng;

use crate::bpe::{split_words, BpeError, BpeModel, UNK_ID, WORD_MARKER};
use crate::corpus::Sentence;
use crate::rng_from_seed;

/// One segmentation of a sentence.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub tokens: Vec<String>,
    /// The (actual) vocabulary size the sequence was produced under.
    pub vocab_size: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Rebuild token strings from ids using the model's token table.
    pub fn from_ids(ids: Vec<u32>, model: &BpeModel, vocab_size: usize) -> Option<Self> {
        let tokens = ids
            .iter()
            .map(|&i| {
                if (i as usize) < vocab_size {
                    model.token(i).map(str::to_string)
                } else {
                    None
                }
            })
            .collect::<Option<Vec<_>>>()?;
        Some(TokenSequence {
            ids,
            tokens,
            vocab_size,
        })
    }

    fn from_model(ids: Vec<u32>, model: &BpeModel, vocab_size: usize) -> Self {
        let tokens = ids
            .iter()
            .map(|&i| model.token(i).unwrap_or("<unk>").to_string())
            .collect();
        TokenSequence {
            ids,
            tokens,
            vocab_size,
        }
    }
}

fn word_symbols(model: &BpeModel, word: &str) -> Vec<u32> {
    word.chars().map(|c| model.char_id(c)).collect()
}

/// Merge every occurrence of `(left, right)` left to right, at positions
/// where `allow(i)` holds.
fn merge_pair(symbols: &mut Vec<u32>, left: u32, right: u32, new_id: u32, allow: impl Fn(usize) -> bool) {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right && allow(i) {
            out.push(new_id);
            i += 2;
        } else {
            out.push(symbols[i]);
            i += 1;
        }
    }
    *symbols = out;
}

/// Apply merges below `limit` (a token id bound) in rank order.
fn encode_word(model: &BpeModel, word: &str, limit: usize) -> Vec<u32> {
    let mut symbols = word_symbols(model, word);
    loop {
        let best = symbols
            .windows(2)
            .filter_map(|w| {
                model
                    .merge_of(w[0], w[1])
                    .filter(|&id| (id as usize) < limit)
                    .map(|id| (id, w[0], w[1]))
            })
            .min();
        let Some((id, l, r)) = best else { break };
        merge_pair(&mut symbols, l, r, id, |_| true);
    }
    symbols
}

/// Deterministic BPE segmentation using only the merges inside the
/// vocabulary of `vocab_size` tokens.
pub fn segment_greedy(
    sentence: &Sentence,
    model: &BpeModel,
    vocab_size: usize,
) -> Result<TokenSequence, BpeError> {
    let size = model.resolve_size(vocab_size)?;
    let ids = split_words(sentence.as_str(), model.word_marker())
        .iter()
        .flat_map(|w| encode_word(model, w, size))
        .collect();
    Ok(TokenSequence::from_model(ids, model, size))
}

/// Prime segmentation followed by one segmentation per augmented size.
pub fn segment_multi(
    sentence: &Sentence,
    model: &BpeModel,
    prime: usize,
    augs: &[usize],
) -> Result<Vec<TokenSequence>, BpeError> {
    std::iter::once(prime)
        .chain(augs.iter().copied())
        .map(|size| segment_greedy(sentence, model, size))
        .collect()
}

fn encode_word_dropout(
    model: &BpeModel,
    word: &str,
    limit: usize,
    drop_p: f64,
    rng: &mut impl Rng,
) -> Vec<u32> {
    let mut symbols = word_symbols(model, word);
    loop {
        // (merged id, position) of every applicable merge that survives this round
        let mut survivors: Vec<(u32, usize)> = Vec::new();
        for (i, w) in symbols.windows(2).enumerate() {
            if let Some(id) = model.merge_of(w[0], w[1]).filter(|&id| (id as usize) < limit) {
                if drop_p == 0.0 || !rng.random_bool(drop_p) {
                    survivors.push((id, i));
                }
            }
        }
        let Some(&(best, _)) = survivors.iter().min_by_key(|(id, _)| *id) else {
            break;
        };
        let positions: Vec<usize> = survivors
            .iter()
            .filter(|(id, _)| *id == best)
            .map(|(_, i)| *i)
            .collect();
        let (l, r) = {
            let i = positions[0];
            (symbols[i], symbols[i + 1])
        };
        merge_pair(&mut symbols, l, r, best, |i| positions.contains(&i));
    }
    symbols
}

/// BPE-dropout: at every merge step each applicable merge occurrence is
/// skipped independently with probability `drop_p`; the lowest-ranked
/// surviving merge is applied at its surviving positions; the word is done
/// once nothing survives.
pub fn segment_dropout(
    sentence: &Sentence,
    model: &BpeModel,
    vocab_size: usize,
    drop_p: f64,
    seed: u64,
) -> Result<TokenSequence, BpeError> {
    assert!(
        (0.0..=1.0).contains(&drop_p),
        "dropout probability {drop_p} outside [0, 1]"
    );
    let size = model.resolve_size(vocab_size)?;
    let mut rng = rng_from_seed(seed);
    let ids = split_words(sentence.as_str(), model.word_marker())
        .iter()
        .flat_map(|w| encode_word_dropout(model, w, size, drop_p, &mut rng))
        .collect();
    Ok(TokenSequence::from_model(ids, model, size))
}

/// Concatenate tokens, turn word markers into spaces and drop the single
/// leading space introduced by segmentation.
pub fn detokenize(seq: &TokenSequence) -> Sentence {
    detokenize_tokens(seq.tokens.iter().map(String::as_str))
}

pub fn detokenize_tokens<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Sentence {
    let joined: String = tokens
        .into_iter()
        .flat_map(|t| t.chars())
        .map(|c| if c == WORD_MARKER { ' ' } else { c })
        .collect();
    let text = joined.strip_prefix(' ').unwrap_or(&joined);
    // Tokens never contain newlines, so this cannot fail.
    Sentence::new(text.to_string()).expect("detokenized text has no newline")
}

/// True when no token of the sequence is the unknown token.
pub fn is_unk_free(seq: &TokenSequence) -> bool {
    !seq.ids.contains(&UNK_ID)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bpe::train_bpe;

    fn s(t: &str) -> Sentence {
        Sentence::new(t).unwrap()
    }

    fn toy() -> BpeModel {
        let c = vec![s("ab"), s("ab"), s("abc")];
        train_bpe(&[&c], 3, true).unwrap()
    }

    fn toks(seq: &TokenSequence) -> Vec<&str> {
        seq.tokens.iter().map(String::as_str).collect()
    }

    #[test]
    fn greedy_toy_traces() {
        let m = toy();
        let full = segment_greedy(&s("abc"), &m, 11).unwrap();
        assert_eq!(toks(&full), ["▁abc"]);
        assert_eq!(full.ids, vec![10]);
        // size 10 drops merge 3 (▁ab + c)
        let trunc = segment_greedy(&s("abc"), &m, 10).unwrap();
        assert_eq!(toks(&trunc), ["▁ab", "c"]);
        assert!(segment_greedy(&s(""), &m, 11).unwrap().is_empty());
    }

    #[test]
    fn unknown_characters_map_to_unk() {
        let m = toy();
        let seq = segment_greedy(&s("axb"), &m, 11).unwrap();
        assert_eq!(toks(&seq), ["▁a", "<unk>", "b"]);
        assert!(!is_unk_free(&seq));
    }

    #[test]
    fn multi_granularity() {
        let m = toy();
        let out = segment_multi(&s("abc"), &m, 11, &[10]).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(toks(&out[0]), ["▁abc"]);
        assert_eq!(toks(&out[1]), ["▁ab", "c"]);
        assert_eq!(segment_multi(&s("abc"), &m, 11, &[]).unwrap().len(), 1);
        let same = segment_multi(&s("abc"), &m, 11, &[11]).unwrap();
        assert_eq!(same[0], same[1]);
        assert!(segment_multi(&s("abc"), &m, 11, &[3]).is_err());
    }

    #[test]
    fn dropout_extremes() {
        let m = toy();
        let x = s("abc ab");
        let greedy = segment_greedy(&x, &m, 11).unwrap();
        for seed in 0..10 {
            assert_eq!(segment_dropout(&x, &m, 11, 0.0, seed).unwrap(), greedy);
            let all = segment_dropout(&x, &m, 11, 1.0, seed).unwrap();
            assert_eq!(toks(&all), ["▁", "a", "b", "c", "▁", "a", "b"]);
        }
    }

    #[test]
    fn detokenize_rules() {
        let seq = |ts: &[&str]| TokenSequence {
            ids: vec![0; ts.len()],
            tokens: ts.iter().map(|t| t.to_string()).collect(),
            vocab_size: 0,
        };
        assert_eq!(detokenize(&seq(&["▁ab", "c"])).as_str(), "abc");
        assert_eq!(detokenize(&seq(&["▁a", "b", "▁c"])).as_str(), "ab c");
        assert_eq!(detokenize(&seq(&[])).as_str(), "");
    }

    #[test]
    fn spaces_roundtrip() {
        let m = toy();
        for text in ["  ab  c ", " ", "ab   "] {
            let seq = segment_greedy(&s(text), &m, 11).unwrap();
            assert_eq!(detokenize(&seq).as_str(), text);
        }
    }
}
