//! Multi-granularity training data: every parallel pair becomes a prime
//! source segmentation, one source segmentation per augmented size, and a
//! target segmented at the prime size.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bpe::{BpeError, BpeModel};
use crate::corpus::ParallelCorpus;
use crate::segment::{segment_greedy, TokenSequence};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error(transparent)]
    Bpe(#[from] BpeError),
    #[error("record {index}: {msg}")]
    Record { index: usize, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AugmentedExample {
    pub src_prime: TokenSequence,
    pub src_augs: Vec<TokenSequence>,
    pub tgt: TokenSequence,
}

impl AugmentedExample {
    /// Prime source followed by the augmented sources.
    pub fn source_views(&self) -> impl Iterator<Item = &TokenSequence> {
        std::iter::once(&self.src_prime).chain(self.src_augs.iter())
    }
}

/// Expand every pair of `corpus`. Order is preserved; sentences are
/// processed in parallel.
pub fn build_dataset(
    corpus: &ParallelCorpus,
    model: &BpeModel,
    prime: usize,
    augs: &[usize],
) -> Result<Vec<AugmentedExample>, AugmentError> {
    // Validate sizes up front so an empty corpus still reports bad sizes.
    model.resolve_size(prime)?;
    for &q in augs {
        model.resolve_size(q)?;
    }
    corpus
        .pairs
        .par_iter()
        .map(|(src, tgt)| {
            Ok(AugmentedExample {
                src_prime: segment_greedy(src, model, prime)?,
                src_augs: augs
                    .iter()
                    .map(|&q| segment_greedy(src, model, q))
                    .collect::<Result<_, _>>()?,
                tgt: segment_greedy(tgt, model, prime)?,
            })
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct Sizes {
    pri: usize,
    augs: Vec<usize>,
}

/// On-disk JSON-lines record. Token strings are recoverable from the
/// vocabulary and are not stored.
#[derive(Debug, Serialize, Deserialize)]
struct Record {
    src_pri: Vec<u32>,
    src_augs: Vec<Vec<u32>>,
    tgt: Vec<u32>,
    sizes: Sizes,
}

impl From<&AugmentedExample> for Record {
    fn from(ex: &AugmentedExample) -> Self {
        Record {
            src_pri: ex.src_prime.ids.clone(),
            src_augs: ex.src_augs.iter().map(|s| s.ids.clone()).collect(),
            tgt: ex.tgt.ids.clone(),
            sizes: Sizes {
                pri: ex.src_prime.vocab_size,
                augs: ex.src_augs.iter().map(|s| s.vocab_size).collect(),
            },
        }
    }
}

pub fn to_jsonl(dataset: &[AugmentedExample]) -> String {
    let mut out = String::new();
    for ex in dataset {
        out.push_str(&serde_json::to_string(&Record::from(ex)).expect("record serialises"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl(dataset: &[AugmentedExample], path: impl AsRef<Path>) -> Result<(), AugmentError> {
    let path = path.as_ref();
    let io = |source| AugmentError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
    w.write_all(to_jsonl(dataset).as_bytes()).map_err(io)?;
    w.flush().map_err(io)
}

/// Parse JSON lines, restoring token strings from `model`. Every id must be
/// inside the vocabulary size its record declares.
pub fn parse_jsonl(text: &str, model: &BpeModel) -> Result<Vec<AugmentedExample>, AugmentError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(index, line)| {
            let bad = |msg: String| AugmentError::Record { index, msg };
            let rec: Record = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
            if rec.src_augs.len() != rec.sizes.augs.len() {
                return Err(bad(format!(
                    "{} augmented sequences but {} augmented sizes",
                    rec.src_augs.len(),
                    rec.sizes.augs.len()
                )));
            }
            let seq = |ids: Vec<u32>, size: usize, field: &str| {
                if size > model.max_vocab_size() {
                    return Err(bad(format!("{field}: size {size} exceeds the model vocabulary")));
                }
                TokenSequence::from_ids(ids, model, size)
                    .ok_or_else(|| bad(format!("{field}: id outside vocabulary of size {size}")))
            };
            Ok(AugmentedExample {
                src_prime: seq(rec.src_pri, rec.sizes.pri, "src_pri")?,
                src_augs: rec
                    .src_augs
                    .into_iter()
                    .zip(rec.sizes.augs)
                    .map(|(ids, q)| seq(ids, q, "src_augs"))
                    .collect::<Result<_, _>>()?,
                tgt: seq(rec.tgt, rec.sizes.pri, "tgt")?,
            })
        })
        .collect()
}

pub fn read_jsonl(path: impl AsRef<Path>, model: &BpeModel) -> Result<Vec<AugmentedExample>, AugmentError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| AugmentError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_jsonl(&text, model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bpe::train_bpe;
    use crate::corpus::Sentence;
    use crate::segment::detokenize;

    fn s(t: &str) -> Sentence {
        Sentence::new(t).unwrap()
    }

    fn toy() -> BpeModel {
        let c = vec![s("ab"), s("ab"), s("abc")];
        train_bpe(&[&c], 3, true).unwrap()
    }

    fn corpus(pairs: &[(&str, &str)]) -> ParallelCorpus {
        ParallelCorpus {
            pairs: pairs.iter().map(|(a, b)| (s(a), s(b))).collect(),
        }
    }

    fn toks(seq: &TokenSequence) -> Vec<&str> {
        seq.tokens.iter().map(String::as_str).collect()
    }

    #[test]
    fn toy_example() {
        let m = toy();
        let ds = build_dataset(&corpus(&[("abc", "abc")]), &m, 11, &[10]).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(toks(&ds[0].src_prime), ["▁abc"]);
        assert_eq!(toks(&ds[0].src_augs[0]), ["▁ab", "c"]);
        assert_eq!(toks(&ds[0].tgt), ["▁abc"]);
        assert_eq!(detokenize(&ds[0].src_augs[0]), detokenize(&ds[0].src_prime));
    }

    #[test]
    fn degenerate_aug_lists() {
        let m = toy();
        let c = corpus(&[("abc ab", "ab"), ("c", "abc")]);
        let plain = build_dataset(&c, &m, 11, &[]).unwrap();
        assert!(plain.iter().all(|e| e.src_augs.is_empty()));
        let same = build_dataset(&c, &m, 11, &[11]).unwrap();
        assert!(same.iter().all(|e| e.src_augs[0] == e.src_prime));
        assert!(build_dataset(&ParallelCorpus::default(), &m, 2, &[]).is_err());
    }

    #[test]
    fn jsonl_roundtrip() {
        let m = toy();
        let ds = build_dataset(&corpus(&[("abc", "abc")]), &m, 11, &[10]).unwrap();
        let text = to_jsonl(&ds);
        assert_eq!(
            text,
            "{\"src_pri\":[10],\"src_augs\":[[9,7]],\"tgt\":[10],\"sizes\":{\"pri\":11,\"augs\":[10]}}\n"
        );
        assert_eq!(parse_jsonl(&text, &m).unwrap(), ds);
    }

    #[test]
    fn jsonl_errors() {
        let m = toy();
        let missing = "{\"src_pri\":[10],\"src_augs\":[],\"sizes\":{\"pri\":11,\"augs\":[]}}\n";
        match parse_jsonl(missing, &m) {
            Err(AugmentError::Record { index: 0, msg }) => assert!(msg.contains("tgt"), "{msg}"),
            other => panic!("{other:?}"),
        }
        let out_of_range = "{\"src_pri\":[10],\"src_augs\":[],\"tgt\":[10],\"sizes\":{\"pri\":10,\"augs\":[]}}\n";
        assert!(parse_jsonl(out_of_range, &m).is_err());
    }

    #[test]
    fn hand_written_record() {
        let m = toy();
        let line = "{\"src_pri\":[8,6],\"src_augs\":[[4,5,6]],\"tgt\":[9,3],\"sizes\":{\"pri\":10,\"augs\":[8]}}";
        let ex = &parse_jsonl(line, &m).unwrap()[0];
        assert_eq!(toks(&ex.src_prime), ["▁a", "b"]);
        assert_eq!(toks(&ex.src_augs[0]), ["▁", "a", "b"]);
        assert_eq!(toks(&ex.tgt), ["▁ab", "</s>"]);
        assert_eq!(ex.src_augs[0].vocab_size, 8);
    }
}
