//! Batch normalization over the channel axis of `N×C×H×W` tensors.

use super::{push_buffer, push_param, Module, Slot};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize by batch statistics and update the running estimates.
    Train,
    /// Normalize by the running estimates only.
    Eval,
}

#[derive(Clone, Debug)]
pub struct BatchNorm2dParams<T: Element> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Element> BatchNorm2dParams<T> {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(BatchNorm2dParams {
            gamma: Tensor::ones(&[channels])?.with_requires_grad(true),
            beta: Tensor::zeros(&[channels])?.with_requires_grad(true),
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::ones(&[channels])?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }
}

/// Batch normalization. In train mode the running statistics are updated as
/// `(1 − momentum)·old + momentum·batch`, using the unbiased batch variance.
pub fn batch_norm2d<T: Element>(x: &Tensor<T>, p: &mut BatchNorm2dParams<T>, mode: NormMode) -> Result<Tensor<T>> {
    const OP: &str = "batch_norm2d";
    let (n, c, h, w) = x.dims4(OP)?;
    for (name, t) in [("gamma", &p.gamma), ("beta", &p.beta), ("running_mean", &p.running_mean), ("running_var", &p.running_var)] {
        if t.shape() != [c] {
            return Err(Error::shape(OP, format!("{name} has shape {:?}, input has {c} channels", t.shape())));
        }
    }
    let plane = h * w;
    let count = n * plane;
    let xd = x.data();
    let channel = |ci: usize| (0..n).flat_map(move |ni| ((ni * c + ci) * plane)..((ni * c + ci) * plane + plane));

    let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
        NormMode::Train => (0..c)
            .map(|ci| {
                let mean = channel(ci).map(|i| xd[i].as_f64()).sum::<f64>() / count as f64;
                let var = channel(ci).map(|i| (xd[i].as_f64() - mean).powi(2)).sum::<f64>() / count as f64;
                (mean, var)
            })
            .unzip(),
        NormMode::Eval => (
            p.running_mean.data().iter().map(|v| v.as_f64()).collect(),
            p.running_var.data().iter().map(|v| v.as_f64()).collect(),
        ),
    };
    if var.iter().any(|&v| v < 0.0) {
        return Err(Error::invalid(OP, "negative running variance"));
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::of(1.0 / (v + p.eps).sqrt())).collect();
    let mean_t: Vec<T> = mean.iter().map(|&m| T::of(m)).collect();

    let mut xhat = vec![T::zero(); xd.len()];
    let mut out = vec![T::zero(); xd.len()];
    let (gamma, beta) = (p.gamma.data(), p.beta.data());
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            for i in base..base + plane {
                let xh = (xd[i] - mean_t[ci]) * inv_std[ci];
                xhat[i] = xh;
                out[i] = gamma[ci] * xh + beta[ci];
            }
        }
    }

    if mode == NormMode::Train {
        let m = p.momentum;
        let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
        let rm: Vec<f64> = p.running_mean.data().iter().zip(&mean).map(|(r, b)| (1.0 - m) * r.as_f64() + m * b).collect();
        let rv: Vec<f64> =
            p.running_var.data().iter().zip(&var).map(|(r, b)| (1.0 - m) * r.as_f64() + m * b * unbias).collect();
        p.running_mean = Tensor::from_f64(&rm, &[c])?;
        p.running_var = Tensor::from_f64(&rv, &[c])?;
    }

    let gamma_t = p.gamma.clone();
    Tensor::from_op(
        OP,
        vec![n, c, h, w],
        out,
        vec![x.clone(), p.gamma.clone(), p.beta.clone()],
        Box::new(move |g, needs| {
            let gamma = gamma_t.data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * plane;
                    for i in base..base + plane {
                        dbeta[ci] += g[i];
                        dgamma[ci] += g[i] * xhat[i];
                    }
                }
            }
            let gx = needs[0].then(|| {
                let mut gx = vec![T::zero(); g.len()];
                let inv_count = T::of(1.0 / count as f64);
                for ci in 0..c {
                    let scale = gamma[ci] * inv_std[ci];
                    let (mean_g, mean_gx) = (dbeta[ci] * inv_count, dgamma[ci] * inv_count);
                    for ni in 0..n {
                        let base = (ni * c + ci) * plane;
                        for i in base..base + plane {
                            gx[i] = match mode {
                                NormMode::Train => scale * (g[i] - mean_g - xhat[i] * mean_gx),
                                NormMode::Eval => scale * g[i],
                            };
                        }
                    }
                }
                gx
            });
            vec![gx, needs[1].then_some(dgamma), needs[2].then_some(dbeta)]
        }),
    )
}

/// Batch normalization layer with its current mode.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T: Element> {
    pub params: BatchNorm2dParams<T>,
}

impl<T: Element> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(BatchNorm2d { params: BatchNorm2dParams::new(channels)? })
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: NormMode) -> Result<Tensor<T>> {
        batch_norm2d(x, &mut self.params, mode)
    }
}

impl<T: Element> Module<T> for BatchNorm2d<T> {
    fn slots<'a>(&'a mut self, prefix: &str, out: &mut Vec<Slot<'a, T>>) {
        push_param(out, prefix, "gamma", &mut self.params.gamma);
        push_param(out, prefix, "beta", &mut self.params.beta);
        push_buffer(out, prefix, "running_mean", &mut self.params.running_mean);
        push_buffer(out, prefix, "running_var", &mut self.params.running_var);
    }
}
