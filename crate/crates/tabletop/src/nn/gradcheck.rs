//! Finite-difference verification of backprop gradients.
//!
//! Runs in f64 with dropout disabled so the comparison is limited by the
//! truncation error of the central difference, not the arithmetic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{softmax_xent, LayerSpec, Mode, Network};
use crate::tensor::Tensor;

/// Worst relative error seen in one parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub entries_checked: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.per_param
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }
}

/// Central difference `(f(x+eps) - f(x-eps)) / 2eps`.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, eps: f64) -> f64 {
    (f(x + eps) - f(x - eps)) / (2.0 * eps)
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn loss_of(net: &mut Network<f64>, input: &Tensor<f64>, label: usize) -> Result<f64> {
    // Dropout is rate 0 here, so the rng is never consulted.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let logits = net.forward(input, Mode::Train, &mut rng)?;
    let (loss, _, _) = softmax_xent(&logits, label)?;
    if !loss.is_finite() {
        return Err(Error::Numeric("gradient check loss is not finite".into()));
    }
    Ok(loss)
}

/// Compare backprop gradients against central differences of the
/// cross-entropy loss. At most `samples_per_tensor` entries are probed
/// per parameter tensor (all entries for small tensors), selected by a
/// ChaCha stream seeded with `seed`.
pub fn gradient_check(
    net: &mut Network<f64>,
    input: &Tensor<f64>,
    label: usize,
    epsilon: f64,
    samples_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if net
        .spec()
        .layers
        .iter()
        .any(|l| matches!(l, LayerSpec::Dropout { rate } if *rate > 0.0))
    {
        return Err(Error::Config(
            "gradient check requires dropout disabled (rate 0); use NetworkSpec::without_dropout"
                .into(),
        ));
    }

    // Analytic gradients first, from one clean train-mode pass.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let logits = net.forward(input, Mode::Train, &mut rng)?;
    let (_, _, dlogits) = softmax_xent(&logits, label)?;
    let analytic = net.backward(&dlogits)?;

    let names: Vec<String> = net.parameters().iter().map(|(n, _)| n.clone()).collect();
    let mut pick_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_param = Vec::with_capacity(names.len());

    for (p_idx, name) in names.iter().enumerate() {
        let len = net.parameters()[p_idx].1.len();
        let indices: Vec<usize> = if len <= samples_per_tensor {
            (0..len).collect()
        } else {
            let mut seen = std::collections::BTreeSet::new();
            while seen.len() < samples_per_tensor {
                seen.insert(pick_rng.gen_range(0..len));
            }
            seen.into_iter().collect()
        };

        let mut max_rel = 0.0f64;
        for &i in &indices {
            let original = net.parameters()[p_idx].1.data()[i];
            net.parameters_mut()[p_idx].1.data_mut()[i] = original + epsilon;
            let loss_plus = loss_of(net, input, label)?;
            net.parameters_mut()[p_idx].1.data_mut()[i] = original - epsilon;
            let loss_minus = loss_of(net, input, label)?;
            net.parameters_mut()[p_idx].1.data_mut()[i] = original;

            let numeric = (loss_plus - loss_minus) / (2.0 * epsilon);
            let a = analytic[p_idx].data()[i];
            max_rel = max_rel.max(relative_error(a, numeric));
        }
        per_param.push(ParamCheck {
            name: name.clone(),
            max_rel_err: max_rel,
            entries_checked: indices.len(),
        });
    }
    Ok(GradCheckReport { per_param })
}
