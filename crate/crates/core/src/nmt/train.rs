use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::matrix::Matrix;
use super::model::{append_eos, decoder_input, Pass, Seq2Seq};
use super::tape::Tape;
use super::{ModelConfig, NmtError};
use crate::augment::AugmentedExample;
use crate::loss::{drda_loss_grad, LossBreakdown, LossConfig};
use crate::scalar::Scalar;
use crate::{mix_seed, rng_from_seed};

/// Adam with the usual bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T: Scalar> {
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
    t: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &[Matrix<T>]) -> Self {
        let zeros = || params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Adam {
            m: zeros(),
            v: zeros(),
            t: 0,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }

    pub fn step(&mut self, params: &mut [Matrix<T>], grads: &[Matrix<T>], lr: f64) {
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = T::lit(lr * c2.sqrt() / c1);
        let eps = T::lit(self.eps);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let it = p
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice());
            for (((p, &g), m), v) in it {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *p = *p - step * *m / (v.sqrt() + eps);
            }
        }
    }
}

/// Linear warmup to `lr`, then inverse-square-root decay. `step` is 1-based.
pub fn learning_rate(config: &ModelConfig, step: usize) -> f64 {
    let s = step.max(1) as f64;
    if config.warmup == 0 {
        return config.lr;
    }
    let w = config.warmup as f64;
    config.lr * (s / w).min((w / s).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub steps: usize,
    /// Mean training loss over the epoch's steps (dropout on).
    pub loss: LossBreakdown<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    /// Mean batch loss at every step, measured before the update.
    pub step_losses: Vec<f64>,
    pub epochs: Vec<EpochStats>,
}

pub(crate) fn to_f64<T: Scalar>(b: &LossBreakdown<T>) -> LossBreakdown<f64> {
    LossBreakdown {
        prime_nll: b.prime_nll.as_f64(),
        aug_nll_mean: b.aug_nll_mean.as_f64(),
        agreement_mean: b.agreement_mean.as_f64(),
        total: b.total.as_f64(),
        alpha: b.alpha.as_f64(),
        k: b.k,
    }
}

fn loss_config<T: Scalar>(config: &ModelConfig) -> LossConfig<T> {
    LossConfig {
        alpha: T::lit(config.alpha),
        smoothing: T::lit(config.smoothing),
        kl_mode: config.kl_mode,
    }
}

/// Source views used for `ex`: the prime view, plus the augmented views when
/// the config asks for them.
fn views<'e>(model: &Seq2Seq<impl Scalar>, ex: &'e AugmentedExample) -> Result<Vec<(&'e [u32], usize)>, NmtError> {
    let cfg = model.config();
    let mut out = vec![(ex.src_prime.ids.as_slice(), ex.src_prime.vocab_size)];
    if !cfg.aug_sizes.is_empty() {
        let sizes: Vec<usize> = ex.src_augs.iter().map(|s| s.vocab_size).collect();
        if sizes != cfg.aug_sizes {
            return Err(NmtError::Config(format!(
                "example augmented sizes {sizes:?} differ from the configured {:?}",
                cfg.aug_sizes
            )));
        }
        out.extend(ex.src_augs.iter().map(|s| (s.ids.as_slice(), s.vocab_size)));
    }
    Ok(out)
}

/// Loss and parameter gradients of one example. Every view runs through the
/// same parameters on one tape, and gradients flow into all of them.
pub(crate) fn example_grad<T: Scalar>(
    model: &Seq2Seq<T>,
    ex: &AugmentedExample,
    dropout_seed: Option<u64>,
) -> Result<(LossBreakdown<T>, Vec<Option<Matrix<T>>>), NmtError> {
    let views = views(model, ex)?;
    let mut tape = Tape::new(model.params().len());
    let dec_in = decoder_input(&ex.tgt.ids);
    let target = append_eos(&ex.tgt.ids);
    let mut logits = Vec::with_capacity(views.len());
    for (i, &(ids, size)) in views.iter().enumerate() {
        let dropout = dropout_seed.map(|s| (rng_from_seed(mix_seed(s, i as u64)), model.config().dropout));
        let mut pass = Pass::new(model, &mut tape, dropout);
        let enc = pass.encode(ids, size)?;
        logits.push(pass.decode(enc, &dec_in)?);
    }
    let classes = model.classes();
    let prime = tape.value(logits[0]).as_slice();
    let augs: Vec<&[T]> = logits[1..].iter().map(|&v| tape.value(v).as_slice()).collect();
    let (breakdown, grads) = drda_loss_grad(prime, &augs, classes, &target, &loss_config(model.config()))?;
    let n = target.len();
    let seeds = std::iter::once(grads.prime)
        .chain(grads.augs)
        .zip(&logits)
        .map(|(g, &v)| (v, Matrix::from_vec(n, classes, g)))
        .collect();
    Ok((breakdown, tape.backward(seeds)))
}

/// Initialise a model from `config` and train it on `dataset`.
pub fn train<T: Scalar>(
    dataset: &[AugmentedExample],
    config: &ModelConfig,
) -> Result<(Seq2Seq<T>, TrainReport), NmtError> {
    let mut model = Seq2Seq::new(config.clone())?;
    let report = fit(&mut model, dataset, config.steps)?;
    Ok((model, report))
}

/// Train `model` in place for `steps` optimiser steps.
///
/// Examples of a batch are processed in parallel and their gradients summed
/// in dataset order, so results do not depend on the thread count.
pub fn fit<T: Scalar>(
    model: &mut Seq2Seq<T>,
    dataset: &[AugmentedExample],
    steps: usize,
) -> Result<TrainReport, NmtError> {
    if dataset.is_empty() {
        return Err(NmtError::EmptyDataset);
    }
    let config = model.config().clone();
    let mut adam = Adam::new(model.params());
    let mut order_rng = rng_from_seed(mix_seed(config.seed, 0x5eed));
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = dataset.len();
    let mut report = TrainReport::default();
    let mut epoch_losses: Vec<LossBreakdown<f64>> = Vec::new();

    for step in 1..=steps {
        if cursor >= dataset.len() {
            if !epoch_losses.is_empty() {
                report.epochs.push(EpochStats {
                    epoch: report.epochs.len(),
                    steps: epoch_losses.len(),
                    loss: LossBreakdown::mean(&epoch_losses),
                });
                epoch_losses.clear();
            }
            order.shuffle(&mut order_rng);
            cursor = 0;
        }
        let batch = &order[cursor..(cursor + config.batch_size).min(dataset.len())];
        cursor += batch.len();

        let step_seed = mix_seed(config.seed, step as u64);
        let m: &Seq2Seq<T> = model;
        let results: Vec<_> = batch
            .par_iter()
            .map(|&i| example_grad(m, &dataset[i], Some(mix_seed(step_seed, i as u64))))
            .collect::<Result<_, _>>()?;

        let lr = learning_rate(&config, step);
        let mut grads: Vec<Matrix<T>> = model
            .params()
            .iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        let mut losses = Vec::with_capacity(results.len());
        for (loss, g) in results {
            losses.push(to_f64(&loss));
            for (acc, gi) in grads.iter_mut().zip(g) {
                if let Some(gi) = gi {
                    acc.add_assign(&gi);
                }
            }
        }
        let batch_loss = LossBreakdown::mean(&losses);
        let inv = T::lit(1.0 / batch.len() as f64);
        let mut norm_sq = 0.0;
        for g in &mut grads {
            g.scale(inv);
            norm_sq += g.sum_sq().as_f64();
        }
        if !batch_loss.total.is_finite() || !norm_sq.is_finite() {
            return Err(NmtError::NonFinite { step, lr });
        }
        if config.clip_norm > 0.0 && norm_sq.sqrt() > config.clip_norm {
            let s = T::lit(config.clip_norm / norm_sq.sqrt());
            grads.iter_mut().for_each(|g| g.scale(s));
        }
        adam.step(model.params_mut(), &grads, lr);
        report.step_losses.push(batch_loss.total);
        epoch_losses.push(batch_loss);
    }
    if !epoch_losses.is_empty() {
        report.epochs.push(EpochStats {
            epoch: report.epochs.len(),
            steps: epoch_losses.len(),
            loss: LossBreakdown::mean(&epoch_losses),
        });
    }
    Ok(report)
}

/// Mean loss breakdown over `dataset` with dropout off.
pub fn evaluate<T: Scalar>(model: &Seq2Seq<T>, dataset: &[AugmentedExample]) -> Result<LossBreakdown<f64>, NmtError> {
    let losses: Vec<LossBreakdown<f64>> = dataset
        .par_iter()
        .map(|ex| example_loss(model, ex).map(|b| to_f64(&b)))
        .collect::<Result<_, _>>()?;
    Ok(LossBreakdown::mean(&losses))
}

pub(crate) fn example_loss<T: Scalar>(model: &Seq2Seq<T>, ex: &AugmentedExample) -> Result<LossBreakdown<T>, NmtError> {
    let views = views(model, ex)?;
    let mut tape = Tape::new(model.params().len());
    let dec_in = decoder_input(&ex.tgt.ids);
    let target = append_eos(&ex.tgt.ids);
    let mut logits = Vec::new();
    for (ids, size) in views {
        let mut pass = Pass::new(model, &mut tape, None);
        let enc = pass.encode(ids, size)?;
        logits.push(pass.decode(enc, &dec_in)?);
    }
    let prime = tape.value(logits[0]).as_slice();
    let augs: Vec<&[T]> = logits[1..].iter().map(|&v| tape.value(v).as_slice()).collect();
    Ok(drda_loss_grad(prime, &augs, model.classes(), &target, &loss_config(model.config()))?.0)
}

/// Teacher-forced accuracy of the prime view over every target position
/// (end of sentence included).
pub fn token_accuracy<T: Scalar>(model: &Seq2Seq<T>, dataset: &[AugmentedExample]) -> Result<f64, NmtError> {
    let counts: Vec<(usize, usize)> = dataset
        .par_iter()
        .map(|ex| {
            let dist = model.forward(&ex.src_prime, &ex.tgt)?;
            let target = append_eos(&ex.tgt.ids);
            let hits = target
                .iter()
                .enumerate()
                .filter(|&(pos, &y)| {
                    let row = dist.row(pos);
                    let best = (0..row.len())
                        .max_by(|&a, &b| row[a].partial_cmp(&row[b]).expect("finite").then(b.cmp(&a)))
                        .expect("non-empty row");
                    best == y as usize
                })
                .count();
            Ok((hits, target.len()))
        })
        .collect::<Result<_, NmtError>>()?;
    let (hits, total) = counts.iter().fold((0, 0), |(h, t), &(a, b)| (h + a, t + b));
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}
