//! Softmax, cross-entropy and affine layers.

use super::{push_param, Module, Slot};
use crate::error::{Error, Result};
use crate::tensor::init::{derive_seed, seeded_init, InitKind};
use crate::tensor::{Element, Tensor};

/// `(outer, extent, inner)` so that element `(o, i, r)` sits at `(o·extent + i)·inner + r`.
fn axis_layout(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::invalid(op, format!("axis {axis} out of range for rank {}", shape.len())));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn for_each_lane(outer: usize, extent: usize, inner: usize, mut f: impl FnMut(&mut dyn Iterator<Item = usize>, usize)) {
    for o in 0..outer {
        for r in 0..inner {
            let base = o * extent * inner + r;
            f(&mut (0..extent).map(move |i| base + i * inner), base);
        }
    }
}

/// Max-subtracted softmax along `axis`.
pub fn softmax<T: Element>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    const OP: &str = "softmax";
    let (outer, extent, inner) = axis_layout(OP, x.shape(), axis)?;
    let xd = x.data();
    let mut y = vec![T::zero(); xd.len()];
    for_each_lane(outer, extent, inner, |lane, _| {
        let idx: Vec<usize> = lane.collect();
        let m = idx.iter().map(|&i| xd[i]).fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for &i in &idx {
            y[i] = (xd[i] - m).exp();
            z += y[i];
        }
        for &i in &idx {
            y[i] /= z;
        }
    });
    let saved = y.clone();
    Tensor::from_op(
        OP,
        x.shape().to_vec(),
        y,
        vec![x.clone()],
        Box::new(move |g, _| {
            let mut gx = vec![T::zero(); g.len()];
            for_each_lane(outer, extent, inner, |lane, _| {
                let idx: Vec<usize> = lane.collect();
                let dot: T = idx.iter().map(|&i| g[i] * saved[i]).sum();
                for &i in &idx {
                    gx[i] = saved[i] * (g[i] - dot);
                }
            });
            vec![Some(gx)]
        }),
    )
}

/// Numerically stable `log(softmax(x))` along `axis`.
pub fn log_softmax<T: Element>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    const OP: &str = "log_softmax";
    let (outer, extent, inner) = axis_layout(OP, x.shape(), axis)?;
    let xd = x.data();
    let mut y = vec![T::zero(); xd.len()];
    for_each_lane(outer, extent, inner, |lane, _| {
        let idx: Vec<usize> = lane.collect();
        let m = idx.iter().map(|&i| xd[i]).fold(T::neg_infinity(), T::max);
        let lse = m + idx.iter().map(|&i| (xd[i] - m).exp()).sum::<T>().ln();
        for &i in &idx {
            y[i] = xd[i] - lse;
        }
    });
    let saved = y.clone();
    Tensor::from_op(
        OP,
        x.shape().to_vec(),
        y,
        vec![x.clone()],
        Box::new(move |g, _| {
            let mut gx = vec![T::zero(); g.len()];
            for_each_lane(outer, extent, inner, |lane, _| {
                let idx: Vec<usize> = lane.collect();
                let total: T = idx.iter().map(|&i| g[i]).sum();
                for &i in &idx {
                    gx[i] = g[i] - saved[i].exp() * total;
                }
            });
            vec![Some(gx)]
        }),
    )
}

/// Mean cross-entropy of `N×C` logits against integer class targets.
pub fn cross_entropy<T: Element>(logits: &Tensor<T>, targets: &[usize]) -> Result<Tensor<T>> {
    const OP: &str = "cross_entropy";
    let &[n, c] = logits.shape() else {
        return Err(Error::shape(OP, format!("expected N×C logits, got {:?}", logits.shape())));
    };
    if targets.len() != n {
        return Err(Error::shape(OP, format!("{} targets for {n} rows", targets.len())));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::invalid(OP, format!("target {t} out of range for {c} classes")));
    }
    let lp = log_softmax(logits, 1)?;
    let picked: Vec<T> = targets.iter().enumerate().map(|(i, &t)| lp.data()[i * c + t]).collect();
    let loss = -picked.iter().copied().sum::<T>() / T::of(n as f64);
    let targets = targets.to_vec();
    Tensor::from_op(
        OP,
        vec![],
        vec![loss],
        vec![lp],
        Box::new(move |g, _| {
            let mut gl = vec![T::zero(); n * c];
            let scale = -g[0] / T::of(n as f64);
            for (i, &t) in targets.iter().enumerate() {
                gl[i * c + t] = scale;
            }
            vec![Some(gl)]
        }),
    )
}

/// `x·Wᵀ + b` for `x: N×D_in`, `W: D_out×D_in`.
pub fn linear<T: Element>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    const OP: &str = "linear";
    let (&[_, d_in], &[d_out, d_w]) = (x.shape(), weight.shape()) else {
        return Err(Error::shape(OP, format!("x {:?}, weight {:?}", x.shape(), weight.shape())));
    };
    if d_in != d_w {
        return Err(Error::shape(OP, format!("x has {d_in} features, weight expects {d_w}")));
    }
    let wt = transpose2(weight)?;
    let y = x.matmul(&wt)?;
    match bias {
        Some(b) if b.shape() != [d_out] => Err(Error::shape(OP, format!("bias {:?}, expected [{d_out}]", b.shape()))),
        Some(b) => y.add(b),
        None => Ok(y),
    }
}

fn transpose2<T: Element>(w: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = (w.shape()[0], w.shape()[1]);
    let d = w.data();
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    Tensor::from_op(
        "transpose",
        vec![c, r],
        out,
        vec![w.clone()],
        Box::new(move |g, _| {
            let mut gw = vec![T::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    gw[i * c + j] = g[j * r + i];
                }
            }
            vec![Some(gw)]
        }),
    )
}

/// Fully connected layer.
#[derive(Clone, Debug)]
pub struct Linear<T: Element> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> Linear<T> {
    /// Uniform `±1/√d_in` weights, zero bias.
    pub fn new(name: &str, d_in: usize, d_out: usize, seed: u64) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = seeded_init(InitKind::Uniform { low: -bound, high: bound }, &[d_out, d_in], derive_seed(seed, name))?
            .with_requires_grad(true);
        Ok(Linear { weight, bias: Tensor::zeros(&[d_out])?.with_requires_grad(true) })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        linear(x, &self.weight, Some(&self.bias))
    }
}

impl<T: Element> Module<T> for Linear<T> {
    fn slots<'a>(&'a mut self, prefix: &str, out: &mut Vec<Slot<'a, T>>) {
        push_param(out, prefix, "weight", &mut self.weight);
        push_param(out, prefix, "bias", &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_gradients;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        seeded_init(InitKind::Normal { mean: 0.0, std: 1.0 }, shape, seed).unwrap()
    }

    #[test]
    fn softmax_constant_is_uniform() {
        let x = Tensor::<f64>::full(&[1, 5], 3.0).unwrap();
        let y = softmax(&x, 1).unwrap();
        assert!(y.data().iter().all(|v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn softmax_stable_for_large_logits() {
        let x = Tensor::<f32>::from_f64(&[1e4, -1e4, 5e3, 1e4 - 1.0], &[4]).unwrap();
        let y = softmax(&x, 0).unwrap();
        let s: f32 = y.data().iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_along_middle_axis() {
        let x = random(&[2, 3, 4], 1);
        let y = softmax(&x, 1).unwrap();
        for o in 0..2 {
            for r in 0..4 {
                let s: f64 = (0..3).map(|i| y.data()[(o * 3 + i) * 4 + r]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_identity() {
        let x = random(&[3, 4], 2);
        let mut eye = vec![0.0; 16];
        (0..4).for_each(|i| eye[i * 4 + i] = 1.0);
        let w = Tensor::new(eye, &[4, 4]).unwrap();
        let b = Tensor::zeros(&[4]).unwrap();
        let y = linear(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let logits = random(&[4, 3], 3);
        let targets = [0, 2, 1, 2];
        let ce = cross_entropy(&logits, &targets).unwrap().item().unwrap();
        let mut expected = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &logits.data()[i * 3..i * 3 + 3];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            expected -= (row[t].exp() / z).ln();
        }
        assert!((ce - expected / 4.0).abs() < 1e-12);
        assert!(cross_entropy(&logits, &[0, 3, 0, 0]).is_err());
    }

    #[test]
    fn gradients() {
        let x = random(&[2, 4], 4);
        for axis in [0, 1] {
            let r = check_gradients(std::slice::from_ref(&x), 1e-6, |t| softmax(&t[0], axis)).unwrap();
            assert!(r.max_rel_err < 1e-6, "{r:?}");
            let r = check_gradients(std::slice::from_ref(&x), 1e-6, |t| log_softmax(&t[0], axis)).unwrap();
            assert!(r.max_rel_err < 1e-6, "{r:?}");
        }
        let r = check_gradients(std::slice::from_ref(&x), 1e-6, |t| cross_entropy(&t[0], &[3, 1])).unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
        let w = random(&[3, 4], 5);
        let b = random(&[3], 6);
        let r = check_gradients(&[x, w, b], 1e-6, |t| linear(&t[0], &t[1], Some(&t[2]))).unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }
}
