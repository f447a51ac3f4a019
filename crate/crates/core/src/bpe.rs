//! Greedy BPE training and prefix-chained vocabularies.
//!
//! Token ids are laid out as specials, then base characters, then merged
//! tokens in merge order. A vocabulary of size `p` is therefore always the
//! first `p` entries of any larger vocabulary from the same model, which is
//! what lets several granularities share one embedding matrix.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::corpus::Sentence;

/// Word-boundary marker (U+2581), prefixed to every word.
pub const WORD_MARKER: char = '\u{2581}';

pub const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];
pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const BOS_ID: u32 = 2;
pub const EOS_ID: u32 = 3;

const MODEL_HEADER: &str = "#drda-bpe v1";
const BASE_PREFIX: &str = "#base";

#[derive(Debug, Error)]
pub enum BpeError {
    #[error("cannot train BPE on an empty corpus")]
    EmptyCorpus,
    #[error("separate (non-joint) training takes exactly one corpus, got {0}")]
    NotJoint(usize),
    #[error("vocabulary size {requested} is below the minimum {min} (specials + base symbols)")]
    VocabSize { requested: usize, min: usize },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BpeError + '_ {
    move |source| BpeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MergeRule {
    pub left: String,
    pub right: String,
    pub rank: usize,
}

impl MergeRule {
    pub fn merged(&self) -> String {
        let mut s = String::with_capacity(self.left.len() + self.right.len());
        s.push_str(&self.left);
        s.push_str(&self.right);
        s
    }
}

/// Split a sentence into marker-prefixed words: the text gets a leading
/// marker and every U+0020 becomes a marker, then a new word starts at each
/// marker. The empty sentence has no words.
pub fn split_words(text: &str, marker: char) -> Vec<String> {
    if text.is_empty() {
        return Vec::new();
    }
    let mut words = Vec::new();
    let mut cur = String::new();
    cur.push(marker);
    for c in text.chars() {
        let c = if c == ' ' { marker } else { c };
        if c == marker {
            words.push(std::mem::take(&mut cur));
        }
        cur.push(c);
    }
    words.push(cur);
    words
}

/// A trained BPE model. Immutable after construction.
#[derive(Debug, Clone)]
pub struct BpeModel {
    merges: Vec<MergeRule>,
    base_symbols: Vec<char>,
    word_marker: char,
    tokens: Vec<String>,
    id_of: HashMap<String, u32>,
    char_id: HashMap<char, u32>,
    pair_merge: HashMap<(u32, u32), u32>,
}

impl PartialEq for BpeModel {
    fn eq(&self, other: &Self) -> bool {
        self.merges == other.merges
            && self.base_symbols == other.base_symbols
            && self.word_marker == other.word_marker
    }
}

impl Eq for BpeModel {}

/// Marker first, then ascending code point.
fn order_base(mut chars: Vec<char>, marker: char) -> Vec<char> {
    chars.push(marker);
    chars.sort_unstable_by_key(|&c| (c != marker, c));
    chars.dedup();
    chars
}

impl BpeModel {
    /// Assemble a model from a base alphabet and an ordered merge list,
    /// validating that every merge combines already-known tokens and
    /// produces a new token string.
    pub fn from_parts(
        base_symbols: Vec<char>,
        merges: Vec<(String, String)>,
        word_marker: char,
    ) -> Result<Self, BpeError> {
        let base_symbols = order_base(base_symbols, word_marker);
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(base_symbols.iter().map(|c| c.to_string()));
        let mut id_of: HashMap<String, u32> = HashMap::with_capacity(tokens.len() + merges.len());
        for (i, t) in tokens.iter().enumerate() {
            if id_of.insert(t.clone(), i as u32).is_some() {
                return Err(BpeError::Parse {
                    line: 0,
                    msg: format!("base symbol {t:?} collides with a special token"),
                });
            }
        }
        let char_id = base_symbols
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, (SPECIALS.len() + i) as u32))
            .collect();
        let mut pair_merge = HashMap::with_capacity(merges.len());
        let mut rules = Vec::with_capacity(merges.len());
        for (rank, (left, right)) in merges.into_iter().enumerate() {
            let bad = |msg: String| BpeError::Parse { line: rank + 1, msg };
            let l = *id_of
                .get(&left)
                .ok_or_else(|| bad(format!("unknown left token {left:?}")))?;
            let r = *id_of
                .get(&right)
                .ok_or_else(|| bad(format!("unknown right token {right:?}")))?;
            if l < SPECIALS.len() as u32 || r < SPECIALS.len() as u32 {
                return Err(bad("merge involves a special token".into()));
            }
            let rule = MergeRule { left, right, rank };
            let merged = rule.merged();
            if id_of.contains_key(&merged) {
                return Err(bad(format!("duplicate merge producing {merged:?}")));
            }
            let id = tokens.len() as u32;
            id_of.insert(merged.clone(), id);
            tokens.push(merged);
            pair_merge.insert((l, r), id);
            rules.push(rule);
        }
        Ok(BpeModel {
            merges: rules,
            base_symbols,
            word_marker,
            tokens,
            id_of,
            char_id,
            pair_merge,
        })
    }

    pub fn merges(&self) -> &[MergeRule] {
        &self.merges
    }

    pub fn base_symbols(&self) -> &[char] {
        &self.base_symbols
    }

    pub fn specials(&self) -> &'static [&'static str] {
        &SPECIALS
    }

    pub fn word_marker(&self) -> char {
        self.word_marker
    }

    /// Size of the smallest vocabulary: specials plus base symbols.
    pub fn min_vocab_size(&self) -> usize {
        SPECIALS.len() + self.base_symbols.len()
    }

    /// Size of the vocabulary with every merge included.
    pub fn max_vocab_size(&self) -> usize {
        self.tokens.len()
    }

    /// All tokens of the maximal vocabulary, in id order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.id_of.get(token).copied()
    }

    pub(crate) fn char_id(&self, c: char) -> u32 {
        self.char_id.get(&c).copied().unwrap_or(UNK_ID)
    }

    /// Id of the token produced by merging `left` and `right`, if such a merge exists.
    pub(crate) fn merge_of(&self, left: u32, right: u32) -> Option<u32> {
        self.pair_merge.get(&(left, right)).copied()
    }

    /// Resolve a requested size to the actual size used: clamps at the
    /// maximal vocabulary, rejects sizes below [`Self::min_vocab_size`].
    pub fn resolve_size(&self, size: usize) -> Result<usize, BpeError> {
        let min = self.min_vocab_size();
        if size < min {
            return Err(BpeError::VocabSize {
                requested: size,
                min,
            });
        }
        Ok(size.min(self.max_vocab_size()))
    }

    /// FNV-1a hash of the base alphabet and merge list; identifies the model
    /// a checkpoint or dataset was built against.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
            h ^= 0xff;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        let mut buf = [0u8; 4];
        eat(self.word_marker.encode_utf8(&mut buf).as_bytes());
        for c in &self.base_symbols {
            eat(c.encode_utf8(&mut buf).as_bytes());
        }
        for m in &self.merges {
            eat(m.left.as_bytes());
            eat(m.right.as_bytes());
        }
        h
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), BpeError> {
        let path = path.as_ref();
        fs::write(path, self.to_model_string()).map_err(io_err(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BpeError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse_model(&text)
    }

    /// Serialise to the merges-file format: header, optional `#base` line of
    /// hex code points, then `left right` per merge in rank order.
    pub fn to_model_string(&self) -> String {
        let mut out = String::new();
        out.push_str(MODEL_HEADER);
        out.push('\n');
        out.push_str(BASE_PREFIX);
        for c in &self.base_symbols {
            out.push_str(&format!(" {:x}", *c as u32));
        }
        out.push('\n');
        for m in &self.merges {
            out.push_str(&m.left);
            out.push(' ');
            out.push_str(&m.right);
            out.push('\n');
        }
        out
    }

    pub fn parse_model(text: &str) -> Result<Self, BpeError> {
        let body = text.strip_suffix('\n').unwrap_or(text);
        let mut lines = body.split('\n').enumerate().peekable();
        match lines.next() {
            Some((_, MODEL_HEADER)) => {}
            _ => {
                return Err(BpeError::Parse {
                    line: 1,
                    msg: format!("expected header {MODEL_HEADER:?}"),
                })
            }
        }
        let mut base: Option<Vec<char>> = None;
        if let Some((i, line)) = lines.peek() {
            if let Some(rest) = line.strip_prefix(BASE_PREFIX) {
                if rest.is_empty() || rest.starts_with(' ') {
                    let line_no = i + 1;
                    let chars = rest
                        .split_whitespace()
                        .map(|h| {
                            u32::from_str_radix(h, 16)
                                .ok()
                                .and_then(char::from_u32)
                                .ok_or_else(|| BpeError::Parse {
                                    line: line_no,
                                    msg: format!("bad code point {h:?}"),
                                })
                        })
                        .collect::<Result<Vec<_>, _>>()?;
                    base = Some(chars);
                    lines.next();
                }
            }
        }
        let mut merges = Vec::new();
        let mut line_nos = Vec::new();
        for (i, line) in lines {
            let (l, r) = match line.split_once(' ') {
                Some((l, r)) if !l.is_empty() && !r.is_empty() && !r.contains(' ') => (l, r),
                _ => {
                    return Err(BpeError::Parse {
                        line: i + 1,
                        msg: format!("expected `left right`, got {line:?}"),
                    })
                }
            };
            merges.push((l.to_string(), r.to_string()));
            line_nos.push(i + 1);
        }
        let base = base.unwrap_or_else(|| {
            let mut seen: Vec<char> = merges
                .iter()
                .flat_map(|(l, r)| l.chars().chain(r.chars()))
                .collect();
            seen.sort_unstable();
            seen.dedup();
            seen
        });
        BpeModel::from_parts(base, merges, WORD_MARKER).map_err(|e| match e {
            // from_parts numbers merges from 1; map back to file lines.
            BpeError::Parse { line, msg } if line > 0 => BpeError::Parse {
                line: line_nos[line - 1],
                msg,
            },
            other => other,
        })
    }
}

/// A materialised vocabulary of one granularity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    id_of: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let id_of = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { tokens, id_of }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.id_of.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn is_special(&self, token: &str) -> bool {
        SPECIALS.contains(&token)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            out.push_str(t);
            out.push('\t');
            out.push_str(&i.to_string());
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), BpeError> {
        let path = path.as_ref();
        fs::write(path, self.to_tsv()).map_err(io_err(path))
    }

    /// Parse `token<TAB>id` lines; ids must be dense and in order.
    pub fn parse_tsv(text: &str) -> Result<Self, BpeError> {
        let mut tokens = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let bad = |msg: &str| BpeError::Parse {
                line: i + 1,
                msg: msg.to_string(),
            };
            let (tok, id) = line.rsplit_once('\t').ok_or_else(|| bad("missing tab"))?;
            let id: usize = id.parse().map_err(|_| bad("bad id"))?;
            if id != tokens.len() {
                return Err(bad("ids must be dense and ascending"));
            }
            tokens.push(tok.to_string());
        }
        let v = Vocabulary::from_tokens(tokens);
        if v.id_of.len() != v.tokens.len() {
            return Err(BpeError::Parse {
                line: 0,
                msg: "duplicate token".into(),
            });
        }
        Ok(v)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BpeError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse_tsv(&text)
    }
}

/// The vocabulary of `size` tokens: specials, base symbols, then the first
/// `size - min_vocab_size` merged tokens. Sizes past the last merge yield the
/// maximal vocabulary; check [`Vocabulary::size`] for the actual size.
pub fn vocab_at(model: &BpeModel, size: usize) -> Result<Vocabulary, BpeError> {
    let size = model.resolve_size(size)?;
    Ok(Vocabulary::from_tokens(model.tokens[..size].to_vec()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BpeTrainConfig {
    pub max_merges: usize,
    /// Pairs seen fewer times than this are never merged.
    pub min_pair_count: u64,
    pub joint: bool,
}

impl Default for BpeTrainConfig {
    fn default() -> Self {
        BpeTrainConfig {
            max_merges: 8000,
            min_pair_count: 1,
            joint: true,
        }
    }
}

/// Greedy BPE over the given corpora. With `joint` all corpora are pooled
/// before counting; otherwise exactly one corpus is accepted.
pub fn train_bpe(
    corpora: &[&[Sentence]],
    max_merges: usize,
    joint: bool,
) -> Result<BpeModel, BpeError> {
    train_bpe_with(
        corpora,
        &BpeTrainConfig {
            max_merges,
            joint,
            ..Default::default()
        },
    )
}

pub fn train_bpe_with(
    corpora: &[&[Sentence]],
    config: &BpeTrainConfig,
) -> Result<BpeModel, BpeError> {
    if !config.joint && corpora.len() != 1 {
        return Err(BpeError::NotJoint(corpora.len()));
    }
    let mut word_counts: BTreeMap<String, u64> = BTreeMap::new();
    for corpus in corpora {
        for s in corpus.iter() {
            for w in split_words(s.as_str(), WORD_MARKER) {
                *word_counts.entry(w).or_default() += 1;
            }
        }
    }
    if word_counts.is_empty() {
        return Err(BpeError::EmptyCorpus);
    }
    let base: Vec<char> = word_counts.keys().flat_map(|w| w.chars()).collect();
    let base = order_base(base, WORD_MARKER);
    let merges = learn_merges(&word_counts, &base, config);
    BpeModel::from_parts(base, merges, WORD_MARKER)
}

type Pair = (u32, u32);

fn add_pairs(
    word: &[u32],
    idx: usize,
    delta: i64,
    counts: &mut HashMap<Pair, i64>,
    where_: &mut HashMap<Pair, HashSet<usize>>,
    touched: &mut HashSet<Pair>,
) {
    for w in word.windows(2) {
        let p = (w[0], w[1]);
        *counts.entry(p).or_default() += delta;
        if delta > 0 {
            where_.entry(p).or_default().insert(idx);
        }
        touched.insert(p);
    }
}

/// Incremental greedy merge learner. Ties on count go to the smallest
/// `(left id, right id)`; pairs whose concatenation already exists as a
/// token are never merged.
fn learn_merges(
    word_counts: &BTreeMap<String, u64>,
    base: &[char],
    config: &BpeTrainConfig,
) -> Vec<(String, String)> {
    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    tokens.extend(base.iter().map(|c| c.to_string()));
    let mut existing: HashSet<String> = tokens.iter().cloned().collect();
    let char_id: HashMap<char, u32> = base
        .iter()
        .enumerate()
        .map(|(i, &c)| (c, (SPECIALS.len() + i) as u32))
        .collect();

    let mut words: Vec<(Vec<u32>, i64)> = word_counts
        .iter()
        .map(|(w, &n)| (w.chars().map(|c| char_id[&c]).collect(), n as i64))
        .collect();

    let mut counts: HashMap<Pair, i64> = HashMap::new();
    let mut where_: HashMap<Pair, HashSet<usize>> = HashMap::new();
    let mut touched = HashSet::new();
    for (i, (w, n)) in words.iter().enumerate() {
        add_pairs(w, i, *n, &mut counts, &mut where_, &mut touched);
    }
    let mut heap: BinaryHeap<(i64, Reverse<Pair>)> =
        counts.iter().map(|(&p, &c)| (c, Reverse(p))).collect();
    let mut banned: HashSet<Pair> = HashSet::new();
    let mut merges = Vec::new();

    while merges.len() < config.max_merges {
        let Some((count, Reverse(pair))) = heap.pop() else {
            break;
        };
        if counts.get(&pair).copied() != Some(count) || banned.contains(&pair) {
            continue;
        }
        if count < config.min_pair_count.max(1) as i64 {
            break;
        }
        let (l, r) = pair;
        let merged = format!("{}{}", tokens[l as usize], tokens[r as usize]);
        if existing.contains(&merged) {
            banned.insert(pair);
            continue;
        }
        let new_id = tokens.len() as u32;
        existing.insert(merged.clone());
        merges.push((tokens[l as usize].clone(), tokens[r as usize].clone()));
        tokens.push(merged);

        let mut affected: Vec<usize> = where_.remove(&pair).unwrap_or_default().into_iter().collect();
        affected.sort_unstable();
        touched.clear();
        for idx in affected {
            let (word, n) = &words[idx];
            if !word.windows(2).any(|w| (w[0], w[1]) == pair) {
                continue;
            }
            let n = *n;
            let old = word.clone();
            add_pairs(&old, idx, -n, &mut counts, &mut where_, &mut touched);
            let mut merged_word = Vec::with_capacity(old.len());
            let mut i = 0;
            while i < old.len() {
                if i + 1 < old.len() && old[i] == l && old[i + 1] == r {
                    merged_word.push(new_id);
                    i += 2;
                } else {
                    merged_word.push(old[i]);
                    i += 1;
                }
            }
            add_pairs(&merged_word, idx, n, &mut counts, &mut where_, &mut touched);
            words[idx].0 = merged_word;
        }
        for p in touched.iter() {
            let c = counts[p];
            if c <= 0 {
                counts.remove(p);
            } else {
                heap.push((c, Reverse(*p)));
            }
        }
    }
    merges
}
