//! Central finite-difference gradient checking in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::Result;

/// Outcome of [`check_gradients`].
#[derive(Clone, Debug)]
pub struct GradReport {
    /// Largest relative error over all checked entries.
    pub max_rel_err: f64,
    /// `(input index, flat element index)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares autodiff gradients of `f` against central differences.
///
/// `f` may return any shape; it is projected onto a fixed pseudo-random
/// direction so that structurally constant sums (e.g. of a softmax) still
/// exercise every gradient path. The relative error of entry `i` is
/// `|a − n| / max(|a|, |n|, τ)` with `τ = 1e-3 · max|n| + 1e-8` taken per
/// input, which keeps near-zero entries from dominating.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], eps: f64, f: F) -> Result<GradReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|t| t.with_requires_grad(true)).collect();
    let out = f(&leaves)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let weights: Vec<f64> = (0..out.numel()).map(|_| rng.random_range(0.5..1.5)).collect();
    let weights = Tensor::new(weights, out.shape())?;
    let project = |t: &Tensor<f64>| -> Result<Tensor<f64>> { t.mul(&weights)?.sum_all() };
    project(&out)?.backward()?;

    let mut report = GradReport { max_rel_err: 0.0, worst: (0, 0), analytic: 0.0, numeric: 0.0, checked: 0 };
    for (which, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let base = leaf.to_vec();
        let mut numeric = Vec::with_capacity(base.len());
        for i in 0..base.len() {
            let eval = |delta: f64| -> Result<f64> {
                let perturbed: Vec<Tensor<f64>> = leaves
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        if j == which {
                            let mut d = base.clone();
                            d[i] += delta;
                            Tensor::new(d, t.shape())
                        } else {
                            Ok(t.detach())
                        }
                    })
                    .collect::<Result<_>>()?;
                project(&f(&perturbed)?)?.item()
            };
            numeric.push((eval(eps)? - eval(-eps)?) / (2.0 * eps));
        }
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let tau = 1e-3 * scale + 1e-8;
        for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
            let err = (a - n).abs() / a.abs().max(n.abs()).max(tau);
            report.checked += 1;
            if err > report.max_rel_err {
                report = GradReport { max_rel_err: err, worst: (which, i), analytic: a, numeric: n, ..report };
            }
        }
    }
    Ok(report)
}
