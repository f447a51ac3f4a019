//! Deterministic reversible data augmentation for machine translation.
//!
//! The crate is organised bottom-up:
//!
//! - [`corpus`]: loading, cleaning and character-noise synthesis for text corpora.
//! - [`bpe`]: greedy BPE training whose vocabularies form a prefix chain.
//! - [`segment`] and [`unigram`]: deterministic, dropout and unigram-LM segmentation.
//! - [`augment`]: multi-granularity dataset construction and its JSON-lines format.
//! - [`loss`]: label-smoothed NLL, symmetric KL agreement and the combined multi-view objective.
//! - [`nmt`]: a small encoder-decoder with overlapped prefix embeddings, its trainer and decoders.
//! - [`analysis`]: frequency drop, nearest neighbours and subword semantic composition.
//!
//! Numerical code is generic over [`Scalar`]; the aliases below pin the common choices.

pub mod analysis;
pub mod augment;
pub mod bpe;
pub mod corpus;
pub mod loss;
pub mod nmt;
pub mod scalar;
pub mod segment;
pub mod synth;
pub mod unigram;

pub use scalar::Scalar;

use rand::SeedableRng;

/// The PRNG behind every seeded operation: ChaCha with 8 rounds, seeded through
/// `SeedableRng::seed_from_u64`. Its output stream is fixed across platforms.
pub type DrdaRng = rand_chacha::ChaCha8Rng;

/// Build the crate PRNG from a 64-bit seed.
pub fn rng_from_seed(seed: u64) -> DrdaRng {
    DrdaRng::seed_from_u64(seed)
}

/// SplitMix64 finaliser, used to derive independent sub-seeds from a run seed.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub type ProbDist32 = loss::ProbDist<f32>;
pub type ProbDist64 = loss::ProbDist<f64>;
pub type LossBreakdown64 = loss::LossBreakdown<f64>;
pub type Matrix32 = nmt::Matrix<f32>;
pub type Matrix64 = nmt::Matrix<f64>;
pub type Seq2Seq32 = nmt::Seq2Seq<f32>;
pub type Seq2Seq64 = nmt::Seq2Seq<f64>;
pub type EmbeddingTable64 = analysis::EmbeddingTable<f64>;
