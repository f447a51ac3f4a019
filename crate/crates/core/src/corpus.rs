//! Corpus ingestion, length/ratio cleaning and synthetic character noise.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use thiserror::Error;
use unicode_general_category::{get_general_category, GeneralCategory};

use crate::rng_from_seed;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid UTF-8 on line {line}")]
    Encoding { path: PathBuf, line: usize },
    #[error("line counts differ: {src_lines} source lines vs {tgt_lines} target lines")]
    Alignment { src_lines: usize, tgt_lines: usize },
    #[error("sentence contains a newline")]
    Newline,
    #[error("invalid cleaning policy: {0}")]
    Policy(String),
    #[error("probability {0} is outside [0, 1]")]
    Probability(f64),
}

/// One line of text. Never contains `\n`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Sentence(String);

impl Sentence {
    pub fn new(text: impl Into<String>) -> Result<Self, CorpusError> {
        let text = text.into();
        if text.contains('\n') {
            return Err(CorpusError::Newline);
        }
        Ok(Sentence(text))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn into_string(self) -> String {
        self.0
    }

    /// Whitespace-split token count, the unit used by [`clean`].
    pub fn word_count(&self) -> usize {
        self.0.split_whitespace().count()
    }
}

impl fmt::Display for Sentence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for Sentence {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParallelCorpus {
    pub pairs: Vec<(Sentence, Sentence)>,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> impl Iterator<Item = &Sentence> {
        self.pairs.iter().map(|(s, _)| s)
    }

    pub fn targets(&self) -> impl Iterator<Item = &Sentence> {
        self.pairs.iter().map(|(_, t)| t)
    }
}

/// Split raw file bytes into lines on LF. A single trailing LF does not open
/// a new line; a preceding CR is kept as content.
fn split_lines(path: &Path, bytes: &[u8]) -> Result<Vec<Sentence>, CorpusError> {
    if bytes.is_empty() {
        return Ok(Vec::new());
    }
    let body = bytes.strip_suffix(b"\n").unwrap_or(bytes);
    body.split(|&b| b == b'\n')
        .enumerate()
        .map(|(i, raw)| {
            let text = std::str::from_utf8(raw).map_err(|_| CorpusError::Encoding {
                path: path.to_path_buf(),
                line: i + 1,
            })?;
            Ok(Sentence(text.to_string()))
        })
        .collect()
}

/// Read a monolingual corpus file, one sentence per line.
pub fn load_lines(path: impl AsRef<Path>) -> Result<Vec<Sentence>, CorpusError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    split_lines(path, &bytes)
}

/// Load a line-aligned source/target file pair.
pub fn load_parallel(
    src_path: impl AsRef<Path>,
    tgt_path: impl AsRef<Path>,
) -> Result<ParallelCorpus, CorpusError> {
    let src = load_lines(src_path)?;
    let tgt = load_lines(tgt_path)?;
    if src.len() != tgt.len() {
        return Err(CorpusError::Alignment {
            src_lines: src.len(),
            tgt_lines: tgt.len(),
        });
    }
    Ok(ParallelCorpus {
        pairs: src.into_iter().zip(tgt).collect(),
    })
}

/// Write sentences one per line with LF endings.
pub fn write_lines<'a, I>(path: impl AsRef<Path>, lines: I) -> std::io::Result<()>
where
    I: IntoIterator<Item = &'a Sentence>,
{
    let mut out = String::new();
    for s in lines {
        out.push_str(s.as_str());
        out.push('\n');
    }
    fs::write(path, out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CleaningPolicy {
    pub min_len: usize,
    pub max_len: usize,
    pub ratio: f64,
}

impl CleaningPolicy {
    pub fn new(min_len: usize, max_len: usize, ratio: f64) -> Result<Self, CorpusError> {
        if min_len == 0 {
            return Err(CorpusError::Policy("min_len must be positive".into()));
        }
        if min_len > max_len {
            return Err(CorpusError::Policy(format!(
                "min_len {min_len} exceeds max_len {max_len}"
            )));
        }
        if !(ratio >= 1.0) {
            return Err(CorpusError::Policy(format!("ratio {ratio} is below 1")));
        }
        Ok(CleaningPolicy {
            min_len,
            max_len,
            ratio,
        })
    }

    pub fn accepts(&self, src: &Sentence, tgt: &Sentence) -> bool {
        let (ls, lt) = (src.word_count(), tgt.word_count());
        let in_range = |n: usize| n >= self.min_len && n <= self.max_len;
        if !in_range(ls) || !in_range(lt) {
            return false;
        }
        let (hi, lo) = (ls.max(lt) as f64, ls.min(lt) as f64);
        hi / lo <= self.ratio
    }
}

impl Default for CleaningPolicy {
    fn default() -> Self {
        CleaningPolicy {
            min_len: 1,
            max_len: 175,
            ratio: 1.5,
        }
    }
}

/// Keep the pairs whose whitespace token counts lie in `[min_len, max_len]`
/// on both sides and whose length ratio is at most `policy.ratio`.
pub fn clean(corpus: &ParallelCorpus, policy: &CleaningPolicy) -> ParallelCorpus {
    ParallelCorpus {
        pairs: corpus
            .pairs
            .iter()
            .filter(|(s, t)| policy.accepts(s, t))
            .cloned()
            .collect(),
    }
}

/// Whitespace for the noise model: Unicode separators (Z*) and tab.
pub fn is_noise_whitespace(c: char) -> bool {
    c == '\t'
        || matches!(
            get_general_category(c),
            GeneralCategory::SpaceSeparator
                | GeneralCategory::LineSeparator
                | GeneralCategory::ParagraphSeparator
        )
}

/// Punctuation for the noise model: Unicode general categories P*.
pub fn is_punctuation(c: char) -> bool {
    matches!(
        get_general_category(c),
        GeneralCategory::ConnectorPunctuation
            | GeneralCategory::DashPunctuation
            | GeneralCategory::OpenPunctuation
            | GeneralCategory::ClosePunctuation
            | GeneralCategory::InitialPunctuation
            | GeneralCategory::FinalPunctuation
            | GeneralCategory::OtherPunctuation
    )
}

/// Characters visited by the noise traversal.
pub fn is_eligible(c: char) -> bool {
    !is_noise_whitespace(c) && !is_punctuation(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditKind {
    Delete,
    Insert,
    Substitute,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PerturbStats {
    pub eligible: usize,
    pub deleted: usize,
    pub inserted: usize,
    pub substituted: usize,
}

impl PerturbStats {
    pub fn perturbed(&self) -> usize {
        self.deleted + self.inserted + self.substituted
    }

    pub fn absorb(&mut self, other: &PerturbStats) {
        self.eligible += other.eligible;
        self.deleted += other.deleted;
        self.inserted += other.inserted;
        self.substituted += other.substituted;
    }
}

/// Character-level noise: each eligible character is, with probability `p`,
/// deleted, followed by an inserted character, or substituted (uniformly
/// among the three). Replacement characters are drawn uniformly from
/// `alphabet`, a multiset of eligible characters taken from the corpus.
#[derive(Debug, Clone)]
pub struct Perturber {
    p: f64,
    alphabet: Vec<char>,
}

impl Perturber {
    pub fn new(p: f64, alphabet: Vec<char>) -> Result<Self, CorpusError> {
        if !(0.0..=1.0).contains(&p) {
            return Err(CorpusError::Probability(p));
        }
        Ok(Perturber { p, alphabet })
    }

    /// Alphabet = every eligible character occurrence in `sentences`.
    pub fn from_corpus<'a, I>(p: f64, sentences: I) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = &'a Sentence>,
    {
        let alphabet = sentences
            .into_iter()
            .flat_map(|s| s.as_str().chars())
            .filter(|&c| is_eligible(c))
            .collect();
        Perturber::new(p, alphabet)
    }

    pub fn alphabet(&self) -> &[char] {
        &self.alphabet
    }

    pub fn perturb(&self, sentence: &Sentence, seed: u64) -> Sentence {
        self.perturb_with_stats(sentence, seed).0
    }

    pub fn perturb_with_stats(&self, sentence: &Sentence, seed: u64) -> (Sentence, PerturbStats) {
        let mut stats = PerturbStats::default();
        if self.p == 0.0 {
            stats.eligible = sentence.as_str().chars().filter(|&c| is_eligible(c)).count();
            return (sentence.clone(), stats);
        }
        let mut rng = rng_from_seed(seed);
        let mut out = String::with_capacity(sentence.as_str().len() + 8);
        for c in sentence.as_str().chars() {
            if !is_eligible(c) {
                out.push(c);
                continue;
            }
            stats.eligible += 1;
            if !rng.random_bool(self.p) {
                out.push(c);
                continue;
            }
            let kind = match rng.random_range(0..3u8) {
                0 => EditKind::Delete,
                1 => EditKind::Insert,
                _ => EditKind::Substitute,
            };
            match kind {
                EditKind::Delete => stats.deleted += 1,
                EditKind::Insert => {
                    stats.inserted += 1;
                    out.push(c);
                    out.push(self.draw(&mut rng, c));
                }
                EditKind::Substitute => {
                    stats.substituted += 1;
                    out.push(self.draw(&mut rng, c));
                }
            }
        }
        (Sentence(out), stats)
    }

    fn draw(&self, rng: &mut impl Rng, fallback: char) -> char {
        if self.alphabet.is_empty() {
            fallback
        } else {
            self.alphabet[rng.random_range(0..self.alphabet.len())]
        }
    }
}

/// Perturb a single sentence, using its own eligible characters as the alphabet.
pub fn perturb(sentence: &Sentence, p: f64, seed: u64) -> Result<Sentence, CorpusError> {
    let perturber = Perturber::from_corpus(p, std::iter::once(sentence))?;
    Ok(perturber.perturb(sentence, seed))
}
