//! Embedding and segmentation statistics: frequency drop, nearest
//! neighbours and subword semantic composition (SSC).

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::bpe::{BpeError, BpeModel, Vocabulary, SPECIALS};
use crate::corpus::Sentence;
use crate::nmt::Seq2Seq;
use crate::scalar::Scalar;
use crate::segment::segment_greedy;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("{a:?} + {b:?} is not a vocabulary token")]
    NotCompound { a: String, b: String },
    #[error("zero vector for {0:?}; cosine similarity is undefined")]
    ZeroVector(String),
    #[error("small size {small} exceeds large size {large}")]
    Sizes { small: usize, large: usize },
    #[error("n must be in 1..{max}, got {n}")]
    NeighbourCount { n: usize, max: usize },
    #[error("embedding file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Bpe(#[from] BpeError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Token strings with one vector each.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable<T> {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    dim: usize,
    vectors: Vec<T>,
}

impl<T: Scalar> EmbeddingTable<T> {
    pub fn new(tokens: Vec<String>, dim: usize, vectors: Vec<T>) -> Result<Self, AnalysisError> {
        if vectors.len() != tokens.len() * dim {
            return Err(AnalysisError::Parse {
                line: 0,
                msg: format!("{} values for {} tokens of width {dim}", vectors.len(), tokens.len()),
            });
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(AnalysisError::Parse {
                    line: i + 2,
                    msg: format!("duplicate token {t:?}"),
                });
            }
        }
        Ok(EmbeddingTable {
            tokens,
            index,
            dim,
            vectors,
        })
    }

    /// The first `vocab.size()` rows of a model's shared embedding.
    pub fn from_model(model: &Seq2Seq<T>, vocab: &Vocabulary) -> Result<Self, AnalysisError> {
        let emb = model.embedding();
        let rows = vocab.size().min(emb.rows());
        let view = emb.view(rows).expect("rows within the matrix");
        EmbeddingTable::new(vocab.tokens()[..rows].to_vec(), emb.dim(), view.to_vec())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn vector(&self, id: usize) -> &[T] {
        &self.vectors[id * self.dim..(id + 1) * self.dim]
    }

    fn lookup(&self, token: &str) -> Result<usize, AnalysisError> {
        self.id_of(token)
            .ok_or_else(|| AnalysisError::UnknownToken(token.to_string()))
    }

    /// Every vector multiplied by `s`.
    pub fn scaled(&self, s: T) -> Self {
        EmbeddingTable {
            vectors: self.vectors.iter().map(|&v| v * s).collect(),
            ..self.clone()
        }
    }

    /// Text format: a `V d` header, then `token v1 ... vd` per line.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.len(), self.dim);
        for (i, t) in self.tokens.iter().enumerate() {
            out.push_str(t);
            for v in self.vector(i) {
                out.push(' ');
                out.push_str(&v.as_f64().to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, AnalysisError> {
        let bad = |line: usize, msg: String| AnalysisError::Parse { line, msg };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad(1, "missing header".into()))?;
        let nums: Vec<usize> = header
            .split_whitespace()
            .map(|x| x.parse().map_err(|_| bad(1, format!("bad header {header:?}"))))
            .collect::<Result<_, _>>()?;
        let [v, d] = nums[..] else {
            return Err(bad(1, format!("header must be `V d`, got {header:?}")));
        };
        let mut tokens = Vec::with_capacity(v);
        let mut vectors = Vec::with_capacity(v * d);
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let n = i + 2;
            // Tokens never contain ASCII spaces (they become word markers), so
            // the last `d` fields are the vector.
            let fields: Vec<&str> = line.split(' ').collect();
            if fields.len() != d + 1 {
                return Err(bad(n, format!("expected a token and {d} values")));
            }
            tokens.push(fields[0].to_string());
            for f in &fields[1..] {
                let x: f64 = f.parse().map_err(|_| bad(n, format!("bad value {f:?}")))?;
                vectors.push(T::lit(x));
            }
        }
        if tokens.len() != v {
            return Err(bad(0, format!("header promises {v} rows, found {}", tokens.len())));
        }
        EmbeddingTable::new(tokens, d, vectors)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), AnalysisError> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|source| AnalysisError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AnalysisError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| AnalysisError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        EmbeddingTable::parse(&text)
    }
}

fn is_special(token: &str) -> bool {
    SPECIALS.contains(&token)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn to_f64<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

/// Cosine similarity in double precision; `None` when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Some((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FreqDropRecord {
    pub token: String,
    pub id: u32,
    pub freq_small: usize,
    pub freq_large: usize,
    pub drop_rate: f64,
}

fn count_ids(corpus: &[Sentence], model: &BpeModel, size: usize) -> Result<Vec<usize>, AnalysisError> {
    let partial: Vec<Vec<usize>> = corpus
        .par_chunks(256)
        .map(|chunk| {
            let mut counts = vec![0usize; size];
            for s in chunk {
                for id in segment_greedy(s, model, size)?.ids {
                    counts[id as usize] += 1;
                }
            }
            Ok(counts)
        })
        .collect::<Result<_, BpeError>>()?;
    let mut total = vec![0usize; size];
    for c in partial {
        for (t, x) in total.iter_mut().zip(c) {
            *t += x;
        }
    }
    Ok(total)
}

/// How often each small-vocabulary token survives segmentation at the larger
/// size. Tokens with `freq_small < min_freq` (and always those never seen)
/// are left out. Sorted by drop rate descending, then id.
pub fn freq_drop(
    corpus: &[Sentence],
    model: &BpeModel,
    small: usize,
    large: usize,
    min_freq: usize,
) -> Result<Vec<FreqDropRecord>, AnalysisError> {
    let (s, l) = (model.resolve_size(small)?, model.resolve_size(large)?);
    if s > l {
        return Err(AnalysisError::Sizes { small: s, large: l });
    }
    let fs = count_ids(corpus, model, s)?;
    let fl = count_ids(corpus, model, l)?;
    let mut out: Vec<FreqDropRecord> = (SPECIALS.len()..s)
        .filter(|&id| fs[id] > 0 && fs[id] >= min_freq)
        .map(|id| FreqDropRecord {
            token: model.token(id as u32).expect("id in vocabulary").to_string(),
            id: id as u32,
            freq_small: fs[id],
            freq_large: fl[id],
            drop_rate: (fs[id] as f64 - fl[id] as f64) / fs[id] as f64,
        })
        .collect();
    out.sort_by(|a, b| b.drop_rate.total_cmp(&a.drop_rate).then(a.id.cmp(&b.id)));
    Ok(out)
}

/// The `n` most similar non-special tokens to `token` by cosine, excluding
/// the query. Candidates with a zero vector are skipped; ties go to the
/// lower id.
pub fn nearest_neighbors<T: Scalar>(
    emb: &EmbeddingTable<T>,
    token: &str,
    n: usize,
) -> Result<Vec<(String, f64)>, AnalysisError> {
    let q = emb.lookup(token)?;
    if n == 0 || n >= emb.len() {
        return Err(AnalysisError::NeighbourCount { n, max: emb.len() });
    }
    let qv = to_f64(emb.vector(q));
    if norm(&qv) == 0.0 {
        return Err(AnalysisError::ZeroVector(token.to_string()));
    }
    let mut scored: Vec<(usize, f64)> = (0..emb.len())
        .into_par_iter()
        .filter(|&i| i != q && !is_special(&emb.tokens[i]))
        .filter_map(|i| cosine(&qv, &to_f64(emb.vector(i))).map(|c| (i, c)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored
        .into_iter()
        .take(n)
        .map(|(i, c)| (emb.tokens[i].clone(), c))
        .collect())
}

/// `cos(e[a+b], e[a] + e[b])`.
pub fn ssc_similarity<T: Scalar>(emb: &EmbeddingTable<T>, a: &str, b: &str) -> Result<f64, AnalysisError> {
    let ia = emb.lookup(a)?;
    let ib = emb.lookup(b)?;
    let compound = format!("{a}{b}");
    let ic = emb.id_of(&compound).ok_or_else(|| AnalysisError::NotCompound {
        a: a.to_string(),
        b: b.to_string(),
    })?;
    let sum: Vec<f64> = emb
        .vector(ia)
        .iter()
        .zip(emb.vector(ib))
        .map(|(x, y)| x.as_f64() + y.as_f64())
        .collect();
    let cv = to_f64(emb.vector(ic));
    if norm(&cv) == 0.0 {
        return Err(AnalysisError::ZeroVector(compound));
    }
    cosine(&cv, &sum).ok_or_else(|| AnalysisError::ZeroVector(format!("{a} + {b}")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SscRecord {
    pub compound: String,
    pub parts: (String, String),
    pub similarity: f64,
}

/// Every split of every multi-character, non-special token whose two parts
/// are both in the table, in id order then split position. Splits with an
/// undefined similarity (a zero vector) are omitted.
pub fn ssc_records<T: Scalar>(emb: &EmbeddingTable<T>) -> Vec<SscRecord> {
    let per_token: Vec<Vec<SscRecord>> = emb
        .tokens
        .par_iter()
        .map(|c| {
            if is_special(c) || c.chars().count() < 2 {
                return Vec::new();
            }
            c.char_indices()
                .skip(1)
                .filter_map(|(k, _)| {
                    let (a, b) = c.split_at(k);
                    emb.id_of(a)?;
                    emb.id_of(b)?;
                    let similarity = ssc_similarity(emb, a, b).ok()?;
                    Some(SscRecord {
                        compound: c.clone(),
                        parts: (a.to_string(), b.to_string()),
                        similarity,
                    })
                })
                .collect()
        })
        .collect();
    per_token.into_iter().flatten().collect()
}

/// Mean over compounds of the mean similarity over each compound's splits.
/// `None` when no compound has a valid split.
pub fn ssc_average<T: Scalar>(emb: &EmbeddingTable<T>) -> Option<f64> {
    let records = ssc_records(emb);
    let mut per: Vec<(String, f64, usize)> = Vec::new();
    for r in records {
        match per.last_mut() {
            Some(last) if last.0 == r.compound => {
                last.1 += r.similarity;
                last.2 += 1;
            }
            _ => per.push((r.compound, r.similarity, 1)),
        }
    }
    if per.is_empty() {
        return None;
    }
    Some(per.iter().map(|(_, s, n)| s / *n as f64).sum::<f64>() / per.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bpe::train_bpe;

    fn table(rows: &[(&str, &[f64])]) -> EmbeddingTable<f64> {
        let dim = rows[0].1.len();
        EmbeddingTable::new(
            rows.iter().map(|(t, _)| t.to_string()).collect(),
            dim,
            rows.iter().flat_map(|(_, v)| v.iter().copied()).collect(),
        )
        .unwrap()
    }

    fn s(t: &str) -> Sentence {
        Sentence::new(t).unwrap()
    }

    #[test]
    fn toy_frequency_drop() {
        let c = vec![s("ab"), s("ab"), s("abc")];
        let m = train_bpe(&[&c], 3, true).unwrap();
        let recs = freq_drop(&c, &m, 10, 11, 0).unwrap();
        let ab = recs.iter().find(|r| r.token == "▁ab").unwrap();
        assert_eq!((ab.freq_small, ab.freq_large), (3, 2));
        assert_eq!(ab.drop_rate, 1.0 / 3.0);
        assert_eq!(recs[0].token, "c");
        assert_eq!(recs[0].drop_rate, 1.0);
        // ▁, a, b and ▁a never occur at size 10
        assert_eq!(recs.len(), 2);
        assert!(freq_drop(&c, &m, 11, 11, 0).unwrap().iter().all(|r| r.drop_rate == 0.0));
        assert!(freq_drop(&c, &m, 11, 10, 0).is_err());
        assert_eq!(freq_drop(&c, &m, 10, 11, 2).unwrap().len(), 1);
    }

    #[test]
    fn neighbours_by_hand() {
        let e = table(&[("x", &[1.0, 0.0]), ("y", &[0.0, 1.0]), ("z", &[0.8, 0.6])]);
        let nn = nearest_neighbors(&e, "x", 2).unwrap();
        assert_eq!(nn[0].0, "z");
        assert!((nn[0].1 - 0.8).abs() < 1e-12);
        assert_eq!(nn[1], ("y".to_string(), 0.0));
        assert_eq!(nearest_neighbors(&e, "x", 1).unwrap().len(), 1);
        assert!(matches!(nearest_neighbors(&e, "w", 1), Err(AnalysisError::UnknownToken(_))));
        assert!(nearest_neighbors(&e, "x", 3).is_err());

        let same = table(&[("<pad>", &[1.0, 0.0]), ("p", &[2.0, 1.0]), ("q", &[2.0, 1.0]), ("r", &[0.0, 1.0])]);
        let nn = nearest_neighbors(&same, "p", 2).unwrap();
        assert_eq!(nn[0].0, "q");
        assert!((nn[0].1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssc_by_hand() {
        let e = table(&[("a", &[1.0, 0.0]), ("b", &[0.0, 1.0]), ("ab", &[1.0, 0.0])]);
        assert!((ssc_similarity(&e, "a", "b").unwrap() - 0.5f64.sqrt()).abs() < 1e-12);
        assert!(matches!(ssc_similarity(&e, "b", "a"), Err(AnalysisError::NotCompound { .. })));
        assert_eq!(ssc_average(&e), Some(ssc_similarity(&e, "a", "b").unwrap()));

        let par = table(&[("a", &[1.0, 2.0]), ("b", &[3.0, -1.0]), ("ab", &[4.0, 1.0])]);
        assert!((ssc_similarity(&par, "a", "b").unwrap() - 1.0).abs() < 1e-12);
        let orth = table(&[("a", &[1.0, 0.0]), ("b", &[0.0, 0.0]), ("ab", &[0.0, 1.0])]);
        assert_eq!(ssc_similarity(&orth, "a", "b").unwrap(), 0.0);

        let none = table(&[("<unk>", &[1.0]), ("a", &[1.0]), ("b", &[2.0])]);
        assert_eq!(ssc_average(&none), None);
    }

    #[test]
    fn ssc_average_over_splits_then_compounds() {
        // abc has two valid splits; their mean counts once
        let e = table(&[
            ("a", &[1.0, 0.0]),
            ("b", &[0.0, 1.0]),
            ("c", &[0.5, -1.0]),
            ("ab", &[1.0, 1.0]),
            ("bc", &[1.0, 0.0]),
            ("abc", &[1.0, 0.0]),
        ]);
        let recs = ssc_records(&e);
        let sims: Vec<(&str, f64)> = recs.iter().map(|r| (r.compound.as_str(), r.similarity)).collect();
        assert_eq!(sims.len(), 4);
        let ab = ssc_similarity(&e, "a", "b").unwrap();
        let bc = ssc_similarity(&e, "b", "c").unwrap();
        let abc = (ssc_similarity(&e, "a", "bc").unwrap() + ssc_similarity(&e, "ab", "c").unwrap()) / 2.0;
        let expected = (ab + bc + abc) / 3.0;
        assert!((ssc_average(&e).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn text_roundtrip() {
        let e = table(&[("▁a", &[0.1, -2.5]), ("<s>", &[3.0, 1e-7])]);
        assert_eq!(EmbeddingTable::<f64>::parse(&e.to_text()).unwrap(), e);
        assert!(EmbeddingTable::<f64>::parse("2 2\nx 1 2\n").is_err());
        assert!(EmbeddingTable::<f64>::parse("1 2\nx 1\n").is_err());
    }
}
