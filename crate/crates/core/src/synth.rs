//! Seeded synthetic corpora for tests, benchmarks and the copy task.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Zipf};

use crate::corpus::{ParallelCorpus, Sentence};
use crate::{mix_seed, rng_from_seed};

/// A Zipfian language of syllable-built words.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub sentences: usize,
    pub lexicon: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub zipf_exponent: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            sentences: 10_000,
            lexicon: 3_000,
            min_words: 4,
            max_words: 14,
            zipf_exponent: 1.1,
            seed: 7,
        }
    }
}

const ONSETS: &[&str] = &[
    "", "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "st", "tr", "sch", "pf",
];
const NUCLEI: &[&str] = &["a", "e", "i", "o", "u", "ei", "au", "ä", "ö", "ü"];
const CODAS: &[&str] = &["", "", "n", "r", "s", "t", "ng", "ch", "l"];

/// `n` distinct words of one to four syllables.
fn lexicon(n: usize, rng: &mut impl Rng) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    let mut words = Vec::with_capacity(n);
    while words.len() < n {
        let syllables = rng.random_range(1..=4);
        let w: String = (0..syllables)
            .map(|_| {
                format!(
                    "{}{}{}",
                    ONSETS.choose(rng).expect("non-empty"),
                    NUCLEI.choose(rng).expect("non-empty"),
                    CODAS.choose(rng).expect("non-empty")
                )
            })
            .collect();
        if seen.insert(w.clone()) {
            words.push(w);
        }
    }
    words
}

fn sentences_from(cfg: &SynthConfig, words: &[String], salt: u64) -> Vec<Vec<String>> {
    let mut rng = rng_from_seed(mix_seed(cfg.seed, salt));
    let zipf = Zipf::new(cfg.lexicon as f64, cfg.zipf_exponent).expect("valid Zipf parameters");
    (0..cfg.sentences)
        .map(|_| {
            let len = rng.random_range(cfg.min_words..=cfg.max_words);
            (0..len)
                .map(|i| {
                    let rank = zipf.sample(&mut rng) as usize - 1;
                    let mut w = words[rank].clone();
                    if i == 0 {
                        // Capitalise the first word for some case variety.
                        let mut cs = w.chars();
                        w = cs.next().map(|c| c.to_uppercase().chain(cs).collect()).unwrap_or_default();
                    }
                    w
                })
                .collect()
        })
        .collect()
}

/// Monolingual synthetic corpus.
pub fn synthetic_corpus(cfg: &SynthConfig) -> Vec<Sentence> {
    let mut rng = rng_from_seed(cfg.seed);
    let words = lexicon(cfg.lexicon, &mut rng);
    sentences_from(cfg, &words, 1)
        .into_iter()
        .map(|ws| Sentence::new(ws.join(" ") + ".").expect("no newline"))
        .collect()
}

/// Parallel synthetic corpus: the target replaces every source word by its
/// counterpart in a second lexicon and reverses the word order.
pub fn synthetic_parallel(cfg: &SynthConfig) -> ParallelCorpus {
    let mut rng = rng_from_seed(cfg.seed);
    let src_lex = lexicon(cfg.lexicon, &mut rng);
    let tgt_lex = lexicon(cfg.lexicon, &mut rng);
    let index: std::collections::HashMap<&str, usize> =
        src_lex.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect();
    let pairs = sentences_from(cfg, &src_lex, 2)
        .into_iter()
        .map(|ws| {
            let tgt: Vec<&str> = ws
                .iter()
                .rev()
                .map(|w| {
                    let key = w.to_lowercase();
                    let i = index.get(key.as_str()).copied().unwrap_or(0);
                    tgt_lex[i].as_str()
                })
                .collect();
            (
                Sentence::new(ws.join(" ")).expect("no newline"),
                Sentence::new(tgt.join(" ")).expect("no newline"),
            )
        })
        .collect();
    ParallelCorpus { pairs }
}

/// Copy-task pairs: random strings over `alphabet`, target equal to source.
pub fn copy_task(pairs: usize, alphabet: &[char], min_len: usize, max_len: usize, seed: u64) -> ParallelCorpus {
    let mut rng = rng_from_seed(seed);
    ParallelCorpus {
        pairs: (0..pairs)
            .map(|_| {
                let len = rng.random_range(min_len..=max_len);
                let s: String = (0..len).map(|_| *alphabet.choose(&mut rng).expect("non-empty")).collect();
                let s = Sentence::new(s).expect("no newline");
                (s.clone(), s)
            })
            .collect(),
    }
}

/// The six-letter alphabet of the copy task.
pub const COPY_ALPHABET: [char; 6] = ['a', 'b', 'c', 'd', 'e', 'f'];
