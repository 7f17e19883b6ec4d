//! Elementwise, matrix, reduction and shape operations on [`Tensor`].

use super::{gemm, Element, Tensor};
use crate::error::{Error, Result};

/// Elementwise operation selector for [`Tensor::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Relu,
    Exp,
    Log,
    Sqrt,
    Scale(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(op, format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

/// For every flat index of `out`, the flat index into a broadcast input.
fn broadcast_index(out: &[usize], input: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - input.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..input.len()).rev() {
        strides[i + offset] = if input[i] == 1 { 0 } else { acc };
        acc *= input[i];
    }
    let numel: usize = out.iter().product();
    let mut idx = vec![0usize; numel];
    let mut counter = vec![0usize; rank];
    let mut pos = 0usize;
    for slot in idx.iter_mut() {
        *slot = pos;
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            pos += strides[ax];
            if counter[ax] < out[ax] {
                break;
            }
            pos -= strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    idx
}

fn scatter_broadcast<T: Element>(g: &[T], index: Option<&[usize]>, len: usize) -> Vec<T> {
    match index {
        None => g.to_vec(),
        Some(index) => {
            let mut out = vec![T::zero(); len];
            for (&i, &gv) in index.iter().zip(g) {
                out[i] += gv;
            }
            out
        }
    }
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl<T: Element> Tensor<T> {
    fn binary(&self, other: &Tensor<T>, kind: Binary) -> Result<Tensor<T>> {
        let op = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let (a, b) = (self.data(), other.data());
        let same = self.shape() == other.shape();
        let (shape, ia, ib) = if same {
            (self.shape().to_vec(), None, None)
        } else {
            let shape = broadcast_shape(op, self.shape(), other.shape())?;
            let ia = (shape != self.shape()).then(|| broadcast_index(&shape, self.shape()));
            let ib = (shape != other.shape()).then(|| broadcast_index(&shape, other.shape()));
            (shape, ia, ib)
        };
        let n: usize = shape.iter().product();
        let data: Vec<T> = match (&ia, &ib) {
            (None, None) => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
            _ => (0..n)
                .map(|i| {
                    let x = a[ia.as_ref().map_or(i, |v| v[i])];
                    let y = b[ib.as_ref().map_or(i, |v| v[i])];
                    f(x, y)
                })
                .collect(),
        };
        let (sa, sb) = (self.clone(), other.clone());
        Tensor::from_op(
            op,
            shape,
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, needs| {
                let (a, b) = (sa.data(), sb.data());
                let at = |i: usize| a[ia.as_ref().map_or(i, |v| v[i])];
                let bt = |i: usize| b[ib.as_ref().map_or(i, |v| v[i])];
                let ga = needs[0].then(|| {
                    let local: Vec<T> = match kind {
                        Binary::Add | Binary::Sub => g.to_vec(),
                        Binary::Mul => g.iter().enumerate().map(|(i, &gv)| gv * bt(i)).collect(),
                        Binary::Div => g.iter().enumerate().map(|(i, &gv)| gv / bt(i)).collect(),
                    };
                    scatter_broadcast(&local, ia.as_deref(), a.len())
                });
                let gb = needs[1].then(|| {
                    let local: Vec<T> = match kind {
                        Binary::Add => g.to_vec(),
                        Binary::Sub => g.iter().map(|&gv| -gv).collect(),
                        Binary::Mul => g.iter().enumerate().map(|(i, &gv)| gv * at(i)).collect(),
                        Binary::Div => g
                            .iter()
                            .enumerate()
                            .map(|(i, &gv)| {
                                let y = bt(i);
                                -gv * at(i) / (y * y)
                            })
                            .collect(),
                    };
                    scatter_broadcast(&local, ib.as_deref(), b.len())
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Binary::Mul)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Binary::Div)
    }

    /// Unary map with a derivative expressed in terms of input `x` and output `y`.
    fn unary(
        &self,
        op: &'static str,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + Send + Sync + 'static,
    ) -> Result<Tensor<T>> {
        let data: Vec<T> = self.data().iter().map(|&x| f(x)).collect();
        let input = self.clone();
        let out = std::sync::Arc::new(data.clone());
        Tensor::from_op(
            op,
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _| {
                let gx = input
                    .data()
                    .iter()
                    .zip(out.iter())
                    .zip(g)
                    .map(|((&x, &y), &gv)| gv * df(x, y))
                    .collect();
                vec![Some(gx)]
            }),
        )
    }

    pub fn relu(&self) -> Result<Tensor<T>> {
        self.unary("relu", |x| x.max(T::zero()), |x, _| if x > T::zero() { T::one() } else { T::zero() })
    }

    pub fn exp(&self) -> Result<Tensor<T>> {
        self.unary("exp", |x| x.exp(), |_, y| y)
    }

    pub fn log(&self) -> Result<Tensor<T>> {
        if self.data().iter().any(|&x| x < T::zero()) {
            return Err(Error::invalid("log", "negative input"));
        }
        self.unary("log", |x| x.ln(), |x, _| x.recip())
    }

    pub fn sqrt(&self) -> Result<Tensor<T>> {
        if self.data().iter().any(|&x| x < T::zero()) {
            return Err(Error::invalid("sqrt", "negative input"));
        }
        self.unary("sqrt", |x| x.sqrt(), |_, y| T::of(0.5) / y)
    }

    pub fn neg(&self) -> Result<Tensor<T>> {
        self.scale(-1.0)
    }

    pub fn square(&self) -> Result<Tensor<T>> {
        self.unary("square", |x| x * x, |x, _| x + x)
    }

    pub fn scale(&self, c: f64) -> Result<Tensor<T>> {
        let c = T::of(c);
        self.unary("scale", move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor<T>> {
        let c = T::of(c);
        self.unary("add_scalar", move |x| x + c, |_, _| T::one())
    }

    /// Dispatches one of the elementwise operations by selector.
    pub fn elementwise(&self, op: ElementwiseOp, other: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let rhs = || other.ok_or_else(|| Error::invalid("elementwise", format!("{op:?} needs a second operand")));
        match op {
            ElementwiseOp::Add => self.add(rhs()?),
            ElementwiseOp::Sub => self.sub(rhs()?),
            ElementwiseOp::Mul => self.mul(rhs()?),
            ElementwiseOp::Div => self.div(rhs()?),
            ElementwiseOp::Relu => self.relu(),
            ElementwiseOp::Exp => self.exp(),
            ElementwiseOp::Log => self.log(),
            ElementwiseOp::Sqrt => self.sqrt(),
            ElementwiseOp::Scale(c) => self.scale(c),
        }
    }

    /// `[M×K] · [K×N] → [M×N]`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = match *self.shape() {
            [m, k] => (m, k),
            ref s => return Err(Error::shape("matmul", format!("lhs must be rank 2, got {s:?}"))),
        };
        let n = match *other.shape() {
            [k2, n] if k2 == k => n,
            ref s => {
                return Err(Error::shape("matmul", format!("inner extents differ: {:?} · {s:?}", self.shape())))
            }
        };
        let mut data = vec![T::zero(); m * n];
        gemm(m, k, n, self.data(), false, other.data(), false, &mut data, false);
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            "matmul",
            vec![m, n],
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(m, n, k, g, false, b.data(), true, &mut ga, false);
                    ga
                });
                let gb = needs[1].then(|| {
                    let mut gb = vec![T::zero(); k * n];
                    gemm(k, m, n, a.data(), true, g, false, &mut gb, false);
                    gb
                });
                vec![ga, gb]
            }),
        )
    }

    /// Reduction over `axes`. With `keep_dims` reduced axes stay as extent 1.
    pub fn reduce(&self, op: ReduceOp, axes: &[usize], keep_dims: bool) -> Result<Tensor<T>> {
        if axes.is_empty() {
            return Err(Error::invalid("reduce", "empty axis set"));
        }
        let rank = self.rank();
        let mut reduced = vec![false; rank];
        for &a in axes {
            if a >= rank {
                return Err(Error::invalid("reduce", format!("axis {a} out of range for rank {rank}")));
            }
            reduced[a] = true;
        }
        let shape = self.shape();
        let kept: Vec<usize> = (0..rank).map(|i| if reduced[i] { 1 } else { shape[i] }).collect();
        let out_shape: Vec<usize> = if keep_dims {
            kept.clone()
        } else {
            (0..rank).filter(|&i| !reduced[i]).map(|i| shape[i]).collect()
        };
        let out_len: usize = kept.iter().product();
        let map = broadcast_index(shape, &kept);
        let count = self.numel() / out_len;
        let x = self.data();

        let (data, argmax) = match op {
            ReduceOp::Sum | ReduceOp::Mean => {
                let mut acc = vec![T::zero(); out_len];
                for (&o, &v) in map.iter().zip(x) {
                    acc[o] += v;
                }
                if op == ReduceOp::Mean {
                    let inv = T::of(1.0 / count as f64);
                    acc.iter_mut().for_each(|v| *v *= inv);
                }
                (acc, None)
            }
            ReduceOp::Max => {
                let mut best = vec![T::neg_infinity(); out_len];
                let mut arg = vec![usize::MAX; out_len];
                // Strict comparison keeps the first index in row-major order on ties.
                for (i, (&o, &v)) in map.iter().zip(x).enumerate() {
                    if arg[o] == usize::MAX || v > best[o] {
                        best[o] = v;
                        arg[o] = i;
                    }
                }
                (best, Some(arg))
            }
        };
        let len = self.numel();
        let name = match op {
            ReduceOp::Sum => "sum",
            ReduceOp::Mean => "mean",
            ReduceOp::Max => "max",
        };
        Tensor::from_op(
            name,
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |g, _| {
                let gx = match &argmax {
                    Some(arg) => {
                        let mut gx = vec![T::zero(); len];
                        for (&i, &gv) in arg.iter().zip(g) {
                            gx[i] += gv;
                        }
                        gx
                    }
                    None => {
                        let s = if op == ReduceOp::Mean { T::of(1.0 / count as f64) } else { T::one() };
                        map.iter().map(|&o| g[o] * s).collect()
                    }
                };
                vec![Some(gx)]
            }),
        )
    }

    pub fn sum_all(&self) -> Result<Tensor<T>> {
        let axes: Vec<usize> = (0..self.rank()).collect();
        if axes.is_empty() {
            return Ok(self.clone());
        }
        self.reduce(ReduceOp::Sum, &axes, false)
    }

    pub fn mean_all(&self) -> Result<Tensor<T>> {
        let axes: Vec<usize> = (0..self.rank()).collect();
        if axes.is_empty() {
            return Ok(self.clone());
        }
        self.reduce(ReduceOp::Mean, &axes, false)
    }

    /// Same data viewed with a new shape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape())));
        }
        Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        )
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::invalid("concat", format!("axis {axis} out of range")));
        }
        for p in parts {
            let ok = p.rank() == rank && (0..rank).all(|i| i == axis || p.shape()[i] == first.shape()[i]);
            if !ok {
                return Err(Error::shape("concat", format!("{:?} vs {:?}", first.shape(), p.shape())));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let extents: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = extents.iter().sum();
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &e) in parts.iter().zip(&extents) {
                data.extend_from_slice(&p.data()[o * e * inner..(o + 1) * e * inner]);
            }
        }
        Tensor::from_op(
            "concat",
            shape,
            data,
            parts.to_vec(),
            Box::new(move |g, needs| {
                let mut grads: Vec<Option<Vec<T>>> = extents
                    .iter()
                    .zip(needs)
                    .map(|(&e, &need)| need.then(|| Vec::with_capacity(outer * e * inner)))
                    .collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (gp, &e) in grads.iter_mut().zip(&extents) {
                        let len = e * inner;
                        if let Some(gp) = gp {
                            gp.extend_from_slice(&g[pos..pos + len]);
                        }
                        pos += len;
                    }
                }
                grads
            }),
        )
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() || len == 0 || start + len > self.shape()[axis] {
            return Err(Error::invalid(
                "narrow",
                format!("axis {axis} range {start}..{} on {:?}", start + len, self.shape()),
            ));
        }
        let full = self.shape()[axis];
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let x = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&x[base..base + len * inner]);
        }
        let total = self.numel();
        Tensor::from_op(
            "narrow",
            shape,
            data,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); total];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_gradients;

    fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_f64(data, shape).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let x = t(&[-1.0, 0.0, 2.0], &[3]);
        assert_eq!(x.relu().unwrap().to_vec(), vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn add_zeros_is_identity() {
        let x = t(&[1.5, -2.0, 3.25], &[3]);
        assert_eq!(x.add(&x.zeros_like()).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn square_gradient_matches_central_difference() {
        let x = Tensor::<f64>::parameter(vec![3.0], &[1]).unwrap();
        x.mul(&x).unwrap().sum_all().unwrap().backward().unwrap();
        let g = x.grad().unwrap()[0];
        let eps = 1e-5;
        let fd = ((3.0 + eps) * (3.0 + eps) - (3.0 - eps) * (3.0 - eps)) / (2.0 * eps);
        assert!((g - 6.0).abs() < 1e-12);
        assert!((g - fd).abs() < 1e-6);
    }

    #[test]
    fn log_and_sqrt_reject_negative_inputs() {
        let x = t(&[1.0, -1.0], &[2]);
        assert!(x.log().is_err());
        assert!(x.sqrt().is_err());
        // log(0) is -inf and must surface as an error too.
        assert!(t(&[0.0], &[1]).log().is_err());
    }

    #[test]
    fn broadcast_trailing_singleton() {
        let a = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let b = t(&[10.0, 20.0], &[2, 1]);
        assert_eq!(a.add(&b).unwrap().to_vec(), vec![11.0, 12.0, 13.0, 24.0, 25.0, 26.0]);
        let c = t(&[1.0, 2.0], &[2]);
        assert!(a.add(&c).is_err());
    }

    #[test]
    fn broadcast_gradients_sum_over_expanded_axes() {
        let a = t(&[0.3, -1.2, 0.7, 2.0, 0.1, -0.4], &[2, 3]);
        let b = t(&[1.5, -0.5], &[2, 1]);
        let report = check_gradients(&[a, b], 1e-6, |xs| xs[0].mul(&xs[1])?.div(&xs[1].add_scalar(3.0)?)?.sum_all())
            .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn matmul_hand_example() {
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t(&[5.0, 6.0], &[2, 1]);
        assert_eq!(a.matmul(&b).unwrap().to_vec(), vec![17.0, 39.0]);
        assert!(a.matmul(&t(&[1.0, 2.0, 3.0], &[3, 1])).is_err());
    }

    #[test]
    fn matmul_identity() {
        let eye = t(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], &[3, 3]);
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0], &[3, 4]);
        assert_eq!(eye.matmul(&x).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let a = t(&[0.1, -0.2, 0.3, 0.4, 0.5, -0.6], &[2, 3]);
        let b = t(&[1.0, 0.5, -0.5, 2.0, 0.25, -1.0], &[3, 2]);
        let report = check_gradients(&[a, b], 1e-6, |xs| xs[0].matmul(&xs[1])?.sum_all()).unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn reductions() {
        let x = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        assert_eq!(x.sum_all().unwrap().item().unwrap(), 10.0);
        let c = t(&[2.5; 6], &[2, 3]);
        assert_eq!(c.reduce(ReduceOp::Mean, &[0, 1], false).unwrap().item().unwrap(), 2.5);
        let rows = x.reduce(ReduceOp::Sum, &[1], true).unwrap();
        assert_eq!(rows.shape(), &[2, 1]);
        assert_eq!(rows.to_vec(), vec![3.0, 7.0]);
        assert!(x.reduce(ReduceOp::Sum, &[], false).is_err());
        assert!(x.reduce(ReduceOp::Sum, &[2], false).is_err());
    }

    #[test]
    fn max_gradient_goes_to_first_tie() {
        let x = Tensor::<f64>::parameter(vec![1.0, 3.0, 3.0, 0.0, -1.0, -1.0], &[2, 3]).unwrap();
        x.reduce(ReduceOp::Max, &[1], false).unwrap().sum_all().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn max_gradient_matches_finite_differences_away_from_ties() {
        let x = t(&[0.3, -1.2, 0.7, 2.0, 0.1, -0.4], &[3, 2]);
        let report = check_gradients(&[x], 1e-6, |xs| xs[0].reduce(ReduceOp::Max, &[0], false)?.sum_all()).unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn concat_and_narrow_round_trip() {
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[1, 2, 2]);
        let b = t(&[5.0, 6.0], &[1, 1, 2]);
        let c = Tensor::concat(&[a.clone(), b.clone()], 1).unwrap();
        assert_eq!(c.shape(), &[1, 3, 2]);
        assert_eq!(c.narrow(1, 0, 2).unwrap().to_vec(), a.to_vec());
        assert_eq!(c.narrow(1, 2, 1).unwrap().to_vec(), b.to_vec());
    }

    #[test]
    fn elementwise_selector_dispatch() {
        let x = t(&[4.0, 9.0], &[2]);
        assert_eq!(x.elementwise(ElementwiseOp::Sqrt, None).unwrap().to_vec(), vec![2.0, 3.0]);
        assert_eq!(x.elementwise(ElementwiseOp::Scale(0.5), None).unwrap().to_vec(), vec![2.0, 4.5]);
        assert!(x.elementwise(ElementwiseOp::Add, None).is_err());
    }
}
