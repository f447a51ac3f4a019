//! The multi-view training objective.
//!
//! `total = nll(prime) + mean_i nll(aug_i) + alpha * mean_i sym_kl(prime, aug_i)`
//!
//! Every reduction over target positions is a mean, so `alpha` does not
//! depend on sequence length. Besides the values, [`drda_loss_grad`] returns
//! closed-form gradients with respect to the pre-softmax logits of each view.

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("alpha > 0 requires at least one augmented view")]
    NoAugmentedViews,
    #[error("label smoothing {0} outside [0, 1)")]
    Smoothing(f64),
    #[error("target id {id} outside {classes} classes")]
    Target { id: u32, classes: usize },
}

/// Per-position categorical distributions, stored position-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbDist<T> {
    positions: usize,
    classes: usize,
    probs: Vec<T>,
}

impl<T: Scalar> ProbDist<T> {
    pub fn new(positions: usize, classes: usize, probs: Vec<T>) -> Result<Self, LossError> {
        if probs.len() != positions * classes {
            return Err(LossError::Shape(format!(
                "{} values for {positions}x{classes}",
                probs.len()
            )));
        }
        Ok(ProbDist {
            positions,
            classes,
            probs,
        })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, LossError> {
        let classes = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != classes) {
            return Err(LossError::Shape("ragged rows".into()));
        }
        Ok(ProbDist {
            positions: rows.len(),
            classes,
            probs: rows.concat(),
        })
    }

    /// Row-wise softmax of a `positions x classes` logits buffer.
    pub fn softmax(positions: usize, classes: usize, logits: &[T]) -> Result<Self, LossError> {
        if logits.len() != positions * classes {
            return Err(LossError::Shape(format!(
                "{} logits for {positions}x{classes}",
                logits.len()
            )));
        }
        let mut probs = Vec::with_capacity(logits.len());
        for row in logits.chunks(classes.max(1)) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = row.iter().map(|&z| (z - max).exp()).collect();
            let sum: T = exps.iter().copied().sum();
            probs.extend(exps.into_iter().map(|e| e / sum));
        }
        Ok(ProbDist {
            positions,
            classes,
            probs,
        })
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, pos: usize) -> &[T] {
        &self.probs[pos * self.classes..(pos + 1) * self.classes]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.probs
    }

    /// True when every row is non-negative and sums to one within `tol`.
    pub fn is_normalised(&self, tol: f64) -> bool {
        (0..self.positions).all(|p| {
            let r = self.row(p);
            r.iter().all(|&x| x >= T::zero())
                && (r.iter().copied().sum::<T>().as_f64() - 1.0).abs() <= tol
        })
    }

    fn same_shape(&self, other: &Self) -> Result<(), LossError> {
        if self.positions != other.positions || self.classes != other.classes {
            return Err(LossError::Shape(format!(
                "{}x{} vs {}x{}",
                self.positions, self.classes, other.positions, other.classes
            )));
        }
        Ok(())
    }
}

/// How the two KL directions are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlMode {
    /// `(KL(p||q) + KL(q||p)) / 2`
    #[default]
    Mean,
    /// `KL(p||q) + KL(q||p)`
    Sum,
}

impl KlMode {
    fn weight<T: Scalar>(self) -> T {
        match self {
            KlMode::Mean => T::lit(0.5),
            KlMode::Sum => T::one(),
        }
    }
}

impl std::str::FromStr for KlMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(KlMode::Mean),
            "sum" => Ok(KlMode::Sum),
            other => Err(format!("unknown KL mode {other:?} (expected mean|sum)")),
        }
    }
}

fn check_targets<T: Scalar>(dist: &ProbDist<T>, target: &[u32]) -> Result<(), LossError> {
    if dist.positions != target.len() {
        return Err(LossError::Shape(format!(
            "{} positions vs {} targets",
            dist.positions,
            target.len()
        )));
    }
    if let Some(&id) = target.iter().find(|&&id| id as usize >= dist.classes) {
        return Err(LossError::Target {
            id,
            classes: dist.classes,
        });
    }
    Ok(())
}

fn check_smoothing<T: Scalar>(eps: T) -> Result<(), LossError> {
    if !(eps >= T::zero() && eps < T::one()) {
        return Err(LossError::Smoothing(eps.as_f64()));
    }
    Ok(())
}

/// Label-smoothed negative log-likelihood, averaged over positions:
/// `(1 - eps) * -ln p[y] + eps * mean_c(-ln p[c])`.
/// A zero probability where one is needed gives `+inf`.
pub fn nll<T: Scalar>(dist: &ProbDist<T>, target: &[u32], smoothing: T) -> Result<T, LossError> {
    check_targets(dist, target)?;
    check_smoothing(smoothing)?;
    if target.is_empty() {
        return Ok(T::zero());
    }
    let c = T::from_usize(dist.classes).expect("class count fits");
    let mut total = T::zero();
    for (pos, &y) in target.iter().enumerate() {
        let row = dist.row(pos);
        let hard = -row[y as usize].ln();
        let term = if smoothing > T::zero() {
            let uniform = row.iter().map(|&p| -p.ln()).sum::<T>() / c;
            (T::one() - smoothing) * hard + smoothing * uniform
        } else {
            hard
        };
        total = total + term;
    }
    Ok(total / T::from_usize(target.len()).expect("length fits"))
}

fn kl_row<T: Scalar>(p: &[T], q: &[T]) -> T {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > T::zero())
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.ln()))
        .sum()
}

/// Symmetric KL per position, averaged over positions.
pub fn sym_kl<T: Scalar>(p: &ProbDist<T>, q: &ProbDist<T>) -> Result<T, LossError> {
    sym_kl_with(p, q, KlMode::Mean)
}

pub fn sym_kl_with<T: Scalar>(p: &ProbDist<T>, q: &ProbDist<T>, mode: KlMode) -> Result<T, LossError> {
    p.same_shape(q)?;
    if p.positions == 0 {
        return Ok(T::zero());
    }
    let w: T = mode.weight();
    let total: T = (0..p.positions)
        .map(|pos| {
            let (a, b) = (p.row(pos), q.row(pos));
            w * (kl_row(a, b) + kl_row(b, a))
        })
        .sum();
    Ok(total / T::from_usize(p.positions).expect("length fits"))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown<T> {
    pub prime_nll: T,
    pub aug_nll_mean: T,
    pub agreement_mean: T,
    pub total: T,
    pub alpha: T,
    pub k: usize,
}

impl<T: Scalar> LossBreakdown<T> {
    fn compose(prime_nll: T, aug_nll_mean: T, agreement_mean: T, alpha: T, k: usize) -> Self {
        LossBreakdown {
            prime_nll,
            aug_nll_mean,
            agreement_mean,
            total: prime_nll + aug_nll_mean + alpha * agreement_mean,
            alpha,
            k,
        }
    }

    /// Element-wise mean of several breakdowns; `total` is recomposed.
    pub fn mean(items: &[LossBreakdown<T>]) -> Self {
        if items.is_empty() {
            return LossBreakdown::default_for(T::zero());
        }
        let n = T::from_usize(items.len()).expect("count fits");
        let avg = |f: fn(&LossBreakdown<T>) -> T| items.iter().map(f).sum::<T>() / n;
        LossBreakdown::compose(
            avg(|b| b.prime_nll),
            avg(|b| b.aug_nll_mean),
            avg(|b| b.agreement_mean),
            items[0].alpha,
            items[0].k,
        )
    }

    fn default_for(alpha: T) -> Self {
        LossBreakdown::compose(T::zero(), T::zero(), T::zero(), alpha, 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig<T> {
    pub alpha: T,
    pub smoothing: T,
    pub kl_mode: KlMode,
}

impl<T: Scalar> LossConfig<T> {
    pub fn new(alpha: T, smoothing: T) -> Self {
        LossConfig {
            alpha,
            smoothing,
            kl_mode: KlMode::Mean,
        }
    }
}

fn check_views<T: Scalar>(
    prime: &ProbDist<T>,
    augs: &[ProbDist<T>],
    target: &[u32],
    alpha: T,
) -> Result<(), LossError> {
    if augs.is_empty() && alpha > T::zero() {
        return Err(LossError::NoAugmentedViews);
    }
    check_targets(prime, target)?;
    for a in augs {
        prime.same_shape(a)?;
    }
    Ok(())
}

/// The combined multi-view loss with its components.
pub fn drda_loss<T: Scalar>(
    prime: &ProbDist<T>,
    augs: &[ProbDist<T>],
    target: &[u32],
    alpha: T,
    smoothing: T,
) -> Result<LossBreakdown<T>, LossError> {
    drda_loss_with(prime, augs, target, &LossConfig::new(alpha, smoothing))
}

pub fn drda_loss_with<T: Scalar>(
    prime: &ProbDist<T>,
    augs: &[ProbDist<T>],
    target: &[u32],
    cfg: &LossConfig<T>,
) -> Result<LossBreakdown<T>, LossError> {
    check_views(prime, augs, target, cfg.alpha)?;
    let prime_nll = nll(prime, target, cfg.smoothing)?;
    if augs.is_empty() {
        return Ok(LossBreakdown::compose(prime_nll, T::zero(), T::zero(), cfg.alpha, 0));
    }
    let k = T::from_usize(augs.len()).expect("count fits");
    let mut aug_sum = T::zero();
    let mut agree_sum = T::zero();
    for a in augs {
        aug_sum = aug_sum + nll(a, target, cfg.smoothing)?;
        agree_sum = agree_sum + sym_kl_with(prime, a, cfg.kl_mode)?;
    }
    Ok(LossBreakdown::compose(
        prime_nll,
        aug_sum / k,
        agree_sum / k,
        cfg.alpha,
        augs.len(),
    ))
}

/// Gradients of the combined loss with respect to each view's logits,
/// each `positions x classes`, position-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitGrads<T> {
    pub prime: Vec<T>,
    pub augs: Vec<Vec<T>>,
}

/// d nll / d logits for one position, scaled by `scale`, accumulated into `out`.
fn nll_grad_row<T: Scalar>(p: &[T], y: usize, eps: T, scale: T, out: &mut [T]) {
    let c = T::from_usize(p.len()).expect("class count fits");
    let smooth = eps / c;
    for (j, (o, &pj)) in out.iter_mut().zip(p).enumerate() {
        let target = if j == y { T::one() - eps + smooth } else { smooth };
        *o = *o + scale * (pj - target);
    }
}

/// Accumulate d KL(p||q) into the gradient buffers of both arguments.
fn kl_grad_row<T: Scalar>(p: &[T], q: &[T], scale: T, gp: &mut [T], gq: &mut [T]) {
    let kl = kl_row(p, q);
    for j in 0..p.len() {
        let a = p[j].ln() - q[j].ln();
        gp[j] = gp[j] + scale * p[j] * (a - kl);
        gq[j] = gq[j] + scale * (q[j] - p[j]);
    }
}

/// Loss value plus closed-form logit gradients. `prime_logits` and each
/// entry of `aug_logits` are `target.len() x classes` buffers.
pub fn drda_loss_grad<T: Scalar>(
    prime_logits: &[T],
    aug_logits: &[&[T]],
    classes: usize,
    target: &[u32],
    cfg: &LossConfig<T>,
) -> Result<(LossBreakdown<T>, LogitGrads<T>), LossError> {
    let n = target.len();
    let prime = ProbDist::softmax(n, classes, prime_logits)?;
    let augs = aug_logits
        .iter()
        .map(|z| ProbDist::softmax(n, classes, z))
        .collect::<Result<Vec<_>, _>>()?;
    let breakdown = drda_loss_with(&prime, &augs, target, cfg)?;

    let mut g_prime = vec![T::zero(); n * classes];
    let mut g_augs = vec![vec![T::zero(); n * classes]; augs.len()];
    if n == 0 {
        return Ok((breakdown, LogitGrads { prime: g_prime, augs: g_augs }));
    }
    let inv_n = T::one() / T::from_usize(n).expect("length fits");
    let inv_k = if augs.is_empty() {
        T::zero()
    } else {
        T::one() / T::from_usize(augs.len()).expect("count fits")
    };
    let kl_scale = cfg.alpha * inv_k * inv_n * cfg.kl_mode.weight::<T>();
    for (pos, &y) in target.iter().enumerate() {
        let span = pos * classes..(pos + 1) * classes;
        nll_grad_row(prime.row(pos), y as usize, cfg.smoothing, inv_n, &mut g_prime[span.clone()]);
        for (a, ga) in augs.iter().zip(g_augs.iter_mut()) {
            nll_grad_row(a.row(pos), y as usize, cfg.smoothing, inv_n * inv_k, &mut ga[span.clone()]);
            if cfg.alpha != T::zero() {
                let (p, q) = (prime.row(pos), a.row(pos));
                kl_grad_row(p, q, kl_scale, &mut g_prime[span.clone()], &mut ga[span.clone()]);
                kl_grad_row(q, p, kl_scale, &mut ga[span.clone()], &mut g_prime[span.clone()]);
            }
        }
    }
    Ok((
        breakdown,
        LogitGrads {
            prime: g_prime,
            augs: g_augs,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn dist(rows: &[&[f64]]) -> ProbDist<f64> {
        ProbDist::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn nll_examples() {
        let u = dist(&[&[0.25; 4], &[0.25; 4]]);
        assert_abs_diff_eq!(nll(&u, &[1, 3], 0.0).unwrap(), 4f64.ln(), epsilon = 1e-12);
        let one_hot = dist(&[&[0.0, 1.0, 0.0]]);
        assert_eq!(nll(&one_hot, &[1], 0.0).unwrap(), 0.0);
        let p = dist(&[&[0.7, 0.1, 0.1, 0.1]]);
        let expected = 0.9 * -(0.7f64.ln())
            + 0.1 * (-(0.7f64.ln()) - 3.0 * 0.1f64.ln()) / 4.0;
        assert_abs_diff_eq!(nll(&p, &[0], 0.1).unwrap(), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(expected, 0.5026182051178809, epsilon = 1e-12);
    }

    #[test]
    fn nll_zero_probability_is_infinite() {
        let p = dist(&[&[1.0, 0.0]]);
        assert_eq!(nll(&p, &[1], 0.0).unwrap(), f64::INFINITY);
        assert_eq!(nll(&p, &[0], 0.1).unwrap(), f64::INFINITY);
    }

    #[test]
    fn nll_errors() {
        let p = dist(&[&[0.5, 0.5]]);
        assert!(matches!(nll(&p, &[0, 1], 0.0), Err(LossError::Shape(_))));
        assert!(matches!(nll(&p, &[2], 0.0), Err(LossError::Target { .. })));
        assert!(matches!(nll(&p, &[0], 1.0), Err(LossError::Smoothing(_))));
    }

    #[test]
    fn sym_kl_examples() {
        let p = dist(&[&[0.5, 0.5]]);
        let q = dist(&[&[0.25, 0.75]]);
        assert_eq!(sym_kl(&p, &p).unwrap(), 0.0);
        assert_abs_diff_eq!(sym_kl(&p, &q).unwrap(), 0.1373, epsilon = 1e-4);
        assert_eq!(sym_kl(&p, &q).unwrap(), sym_kl(&q, &p).unwrap());
        assert_abs_diff_eq!(
            sym_kl_with(&p, &q, KlMode::Sum).unwrap(),
            2.0 * sym_kl(&p, &q).unwrap(),
            epsilon = 1e-15
        );
        let r = dist(&[&[0.5, 0.5], &[0.5, 0.5]]);
        assert!(matches!(sym_kl(&p, &r), Err(LossError::Shape(_))));
    }

    #[test]
    fn drda_loss_cases() {
        let p = dist(&[&[0.6, 0.3, 0.1], &[0.2, 0.2, 0.6]]);
        let q = dist(&[&[0.3, 0.3, 0.4], &[0.1, 0.5, 0.4]]);
        let t = [0u32, 2];
        let b = drda_loss(&p, &[p.clone()], &t, 5.0, 0.0).unwrap();
        assert_eq!(b.agreement_mean, 0.0);
        assert_abs_diff_eq!(b.total, 2.0 * b.prime_nll, epsilon = 1e-15);

        let b0 = drda_loss(&p, &[q.clone()], &t, 0.0, 0.1).unwrap();
        assert_eq!(b0.total, b0.prime_nll + b0.aug_nll_mean);

        let b2 = drda_loss(&p, &[p.clone(), q.clone()], &t, 5.0, 0.1).unwrap();
        assert_abs_diff_eq!(b2.agreement_mean, 0.5 * sym_kl(&p, &q).unwrap(), epsilon = 1e-15);
        assert_eq!(b2.k, 2);
        assert_eq!(
            b2.total,
            b2.prime_nll + b2.aug_nll_mean + b2.alpha * b2.agreement_mean
        );

        assert_eq!(
            drda_loss(&p, &[], &t, 1.0, 0.0),
            Err(LossError::NoAugmentedViews)
        );
        let plain = drda_loss(&p, &[], &t, 0.0, 0.0).unwrap();
        assert_eq!(plain.total, plain.prime_nll);
    }

    #[test]
    fn softmax_rows_normalised() {
        let d = ProbDist::softmax(2, 3, &[1.0f32, 2.0, 3.0, -50.0, 0.0, 50.0]).unwrap();
        assert!(d.is_normalised(1e-6));
    }

    #[test]
    fn grad_matches_central_differences() {
        let classes = 4;
        let target = [1u32, 3, 0];
        let zp: Vec<f64> = (0..12).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.4).collect();
        let za: Vec<f64> = (0..12).map(|i| ((i * 3 % 7) as f64 - 3.0) * 0.3).collect();
        let zb: Vec<f64> = (0..12).map(|i| ((i * 5 % 11) as f64 - 5.0) * 0.2).collect();
        for mode in [KlMode::Mean, KlMode::Sum] {
            let cfg = LossConfig {
                alpha: 5.0,
                smoothing: 0.1,
                kl_mode: mode,
            };
            let eval = |p: &[f64], a: &[f64], b: &[f64]| {
                drda_loss_grad(p, &[a, b], classes, &target, &cfg).unwrap().0.total
            };
            let (_, g) = drda_loss_grad(&zp, &[&za, &zb], classes, &target, &cfg).unwrap();
            let h = 1e-5;
            for view in 0..3 {
                for i in 0..12 {
                    let mut bufs = [zp.clone(), za.clone(), zb.clone()];
                    bufs[view][i] += h;
                    let up = eval(&bufs[0], &bufs[1], &bufs[2]);
                    bufs[view][i] -= 2.0 * h;
                    let down = eval(&bufs[0], &bufs[1], &bufs[2]);
                    let numeric = (up - down) / (2.0 * h);
                    let analytic = match view {
                        0 => g.prime[i],
                        v => g.augs[v - 1][i],
                    };
                    let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
                    assert!(rel < 1e-6, "view {view} coord {i}: {analytic} vs {numeric}");
                }
            }
        }
    }
}
