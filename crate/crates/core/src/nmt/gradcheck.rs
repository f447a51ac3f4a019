use rand::Rng;

use super::model::Seq2Seq;
use super::train::{example_grad, example_loss};
use super::NmtError;
use crate::augment::AugmentedExample;
use crate::rng_from_seed;

/// Result of comparing tape gradients with central finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: (String, usize),
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`. The floor keeps
/// coordinates whose true gradient is ~0 from dividing rounding noise by
/// rounding noise.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// Check up to `per_param` randomly chosen coordinates of every parameter
/// (all of them when the parameter is smaller) on the full multi-view loss
/// of `example`, with dropout off.
pub fn gradient_check(
    model: &Seq2Seq<f64>,
    example: &AugmentedExample,
    h: f64,
    per_param: usize,
    seed: u64,
) -> Result<GradCheckReport, NmtError> {
    // Dropout is disabled by evaluating both sides without a dropout seed.
    let (_, grads) = example_grad(model, example, None)?;
    let mut rng = rng_from_seed(seed);
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: (String::new(), 0),
    };
    for (p, name) in model.param_names().iter().enumerate() {
        let n = model.params()[p].as_slice().len();
        let coords: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            (0..per_param).map(|_| rng.random_range(0..n)).collect()
        };
        for i in coords {
            let orig = model.params()[p].as_slice()[i];
            probe.params_mut()[p].as_mut_slice()[i] = orig + h;
            let up = example_loss(&probe, example)?.total;
            probe.params_mut()[p].as_mut_slice()[i] = orig - h;
            let down = example_loss(&probe, example)?.total;
            probe.params_mut()[p].as_mut_slice()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads[p].as_ref().map_or(0.0, |g| g.as_slice()[i]);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (name.clone(), i);
            }
        }
    }
    Ok(report)
}
