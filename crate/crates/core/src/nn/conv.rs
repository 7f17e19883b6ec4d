//! 2D convolution and transposed convolution via im2col + GEMM.

use super::{push_param, Module, Slot};
use crate::error::{Error, Result};
use crate::tensor::init::{derive_seed, seeded_init, InitKind};
use crate::tensor::{gemm, Element, Tensor};

/// Weights and geometry of a (transposed) convolution.
///
/// For [`conv2d`] the weight is `C_out × C_in × k × k`. For
/// [`conv_transpose2d`] the same tensor is read as the adjoint map, so its
/// layout is `C_in × C_out × k × k` from the transposed layer's viewpoint.
#[derive(Clone, Debug)]
pub struct Conv2dParams<T: Element> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one `c×h×w` image into `(c·k·k) × (oh·ow)` patch columns.
fn im2col<T: Element>(x: &[T], g: Geometry, cols: &mut [T]) {
    let Geometry { c, h, w, k, stride, pad, oh, ow } = g;
    let plane = oh * ow;
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * plane..][..plane];
                for oy in 0..oh {
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let line = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize { T::zero() } else { line[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `x`.
fn col2im<T: Element>(cols: &[T], g: Geometry, x: &mut [T]) {
    let Geometry { c, h, w, k, stride, pad, oh, ow } = g;
    let plane = oh * ow;
    for ci in 0..c {
        let dst = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * plane..][..plane];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &v) in row[oy * ow..(oy + 1) * ow].iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            line[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn conv_out_extent(op: &'static str, input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::invalid(op, "stride must be positive"));
    }
    if input + 2 * pad < k {
        return Err(Error::shape(op, format!("input extent {input} with padding {pad} is smaller than kernel {k}")));
    }
    Ok((input + 2 * pad - k) / stride + 1)
}

fn kernel_dims<T: Element>(op: &'static str, w: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *w.shape() {
        [a, b, k, k2] if k == k2 => Ok((a, b, k)),
        ref s => Err(Error::shape(op, format!("weight must be square rank-4, got {s:?}"))),
    }
}

fn check_bias<T: Element>(op: &'static str, bias: &Option<Tensor<T>>, channels: usize) -> Result<()> {
    match bias {
        Some(b) if b.shape() != [channels] => {
            Err(Error::shape(op, format!("bias shape {:?}, expected [{channels}]", b.shape())))
        }
        _ => Ok(()),
    }
}

fn inputs_of<T: Element>(x: &Tensor<T>, p: &Conv2dParams<T>) -> Vec<Tensor<T>> {
    let mut v = vec![x.clone(), p.weight.clone()];
    if let Some(b) = &p.bias {
        v.push(b.clone());
    }
    v
}

fn bias_grad<T: Element>(g: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut gb = vec![T::zero(); c];
    for ni in 0..n {
        for (ci, slot) in gb.iter_mut().enumerate() {
            *slot += g[(ni * c + ci) * plane..][..plane].iter().copied().sum::<T>();
        }
    }
    gb
}

/// Cross-correlation of `N×C_in×H×W` input with zero padding.
pub fn conv2d<T: Element>(x: &Tensor<T>, p: &Conv2dParams<T>) -> Result<Tensor<T>> {
    const OP: &str = "conv2d";
    let (n, c_in, h, w) = x.dims4(OP)?;
    let (c_out, wc_in, k) = kernel_dims(OP, &p.weight)?;
    if wc_in != c_in {
        return Err(Error::shape(OP, format!("input has {c_in} channels, weight expects {wc_in}")));
    }
    check_bias(OP, &p.bias, c_out)?;
    let oh = conv_out_extent(OP, h, k, p.stride, p.padding)?;
    let ow = conv_out_extent(OP, w, k, p.stride, p.padding)?;
    let geo = Geometry { c: c_in, h, w, k, stride: p.stride, pad: p.padding, oh, ow };
    let (ckk, plane, in_len) = (c_in * k * k, oh * ow, c_in * h * w);

    let xd = x.data();
    let wd = p.weight.data();
    let mut out = vec![T::zero(); n * c_out * plane];
    let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); ckk * plane] };
    for ni in 0..n {
        let xs = &xd[ni * in_len..(ni + 1) * in_len];
        let colv: &[T] = if geo.is_pointwise() {
            xs
        } else {
            im2col(xs, geo, &mut cols);
            &cols
        };
        gemm(c_out, ckk, plane, wd, false, colv, false, &mut out[ni * c_out * plane..][..c_out * plane], false);
    }
    if let Some(b) = &p.bias {
        for ni in 0..n {
            for (co, &bv) in b.data().iter().enumerate() {
                out[(ni * c_out + co) * plane..][..plane].iter_mut().for_each(|v| *v += bv);
            }
        }
    }

    let (xs, ws) = (x.clone(), p.weight.clone());
    Tensor::from_op(
        OP,
        vec![n, c_out, oh, ow],
        out,
        inputs_of(x, p),
        Box::new(move |g, needs| {
            let xd = xs.data();
            let wd = ws.data();
            let mut gx = needs[0].then(|| vec![T::zero(); n * in_len]);
            let mut gw = needs[1].then(|| vec![T::zero(); c_out * ckk]);
            let mut cols = vec![T::zero(); ckk * plane];
            for ni in 0..n {
                let gn = &g[ni * c_out * plane..][..c_out * plane];
                if let Some(gw) = gw.as_mut() {
                    let xs = &xd[ni * in_len..(ni + 1) * in_len];
                    let colv: &[T] = if geo.is_pointwise() {
                        xs
                    } else {
                        im2col(xs, geo, &mut cols);
                        &cols
                    };
                    gemm(c_out, plane, ckk, gn, false, colv, true, gw, true);
                }
                if let Some(gx) = gx.as_mut() {
                    let dst = &mut gx[ni * in_len..(ni + 1) * in_len];
                    if geo.is_pointwise() {
                        gemm(ckk, c_out, plane, wd, true, gn, false, dst, false);
                    } else {
                        gemm(ckk, c_out, plane, wd, true, gn, false, &mut cols, false);
                        col2im(&cols, geo, dst);
                    }
                }
            }
            let mut grads = vec![gx, gw];
            if needs.len() > 2 {
                grads.push(needs[2].then(|| bias_grad(g, n, c_out, plane)));
            }
            grads
        }),
    )
}

/// Adjoint of [`conv2d`] with the same weight tensor: maps `N×C_in×H×W`
/// (weight `C_in × C_out × k × k`) to `N×C_out×H'×W'` with
/// `H' = (H − 1)·stride − 2·pad + k`.
pub fn conv_transpose2d<T: Element>(x: &Tensor<T>, p: &Conv2dParams<T>) -> Result<Tensor<T>> {
    const OP: &str = "conv_transpose2d";
    let (n, c_in, h, w) = x.dims4(OP)?;
    let (wc_in, c_out, k) = kernel_dims(OP, &p.weight)?;
    if wc_in != c_in {
        return Err(Error::shape(OP, format!("input has {c_in} channels, weight expects {wc_in}")));
    }
    check_bias(OP, &p.bias, c_out)?;
    if p.stride == 0 {
        return Err(Error::invalid(OP, "stride must be positive"));
    }
    let (oh, ow) = ((h - 1) * p.stride + k, (w - 1) * p.stride + k);
    if oh <= 2 * p.padding || ow <= 2 * p.padding {
        return Err(Error::shape(OP, format!("padding {} leaves no output for {h}×{w}", p.padding)));
    }
    let (oh, ow) = (oh - 2 * p.padding, ow - 2 * p.padding);
    // Geometry of the forward convolution this operator is the adjoint of.
    let geo = Geometry { c: c_out, h: oh, w: ow, k, stride: p.stride, pad: p.padding, oh: h, ow: w };
    if conv_out_extent(OP, oh, k, p.stride, p.padding)? != h || conv_out_extent(OP, ow, k, p.stride, p.padding)? != w {
        return Err(Error::shape(OP, "stride/padding combination is not invertible"));
    }
    let (ckk, plane, out_plane, in_len) = (c_out * k * k, h * w, oh * ow, c_in * h * w);

    let xd = x.data();
    let wd = p.weight.data();
    let mut out = vec![T::zero(); n * c_out * out_plane];
    let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); ckk * plane] };
    for ni in 0..n {
        let xs = &xd[ni * in_len..(ni + 1) * in_len];
        let dst = &mut out[ni * c_out * out_plane..][..c_out * out_plane];
        if geo.is_pointwise() {
            gemm(ckk, c_in, plane, wd, true, xs, false, dst, false);
        } else {
            gemm(ckk, c_in, plane, wd, true, xs, false, &mut cols, false);
            col2im(&cols, geo, dst);
        }
    }
    if let Some(b) = &p.bias {
        for ni in 0..n {
            for (co, &bv) in b.data().iter().enumerate() {
                out[(ni * c_out + co) * out_plane..][..out_plane].iter_mut().for_each(|v| *v += bv);
            }
        }
    }

    let (xs, ws) = (x.clone(), p.weight.clone());
    Tensor::from_op(
        OP,
        vec![n, c_out, oh, ow],
        out,
        inputs_of(x, p),
        Box::new(move |g, needs| {
            let xd = xs.data();
            let wd = ws.data();
            let mut gx = needs[0].then(|| vec![T::zero(); n * in_len]);
            let mut gw = needs[1].then(|| vec![T::zero(); c_in * ckk]);
            let mut cols = vec![T::zero(); ckk * plane];
            for ni in 0..n {
                let gn = &g[ni * c_out * out_plane..][..c_out * out_plane];
                let colv: &[T] = if geo.is_pointwise() {
                    gn
                } else {
                    im2col(gn, geo, &mut cols);
                    &cols
                };
                if let Some(gx) = gx.as_mut() {
                    gemm(c_in, ckk, plane, wd, false, colv, false, &mut gx[ni * in_len..(ni + 1) * in_len], false);
                }
                if let Some(gw) = gw.as_mut() {
                    gemm(c_in, plane, ckk, &xd[ni * in_len..(ni + 1) * in_len], false, colv, true, gw, true);
                }
            }
            let mut grads = vec![gx, gw];
            if needs.len() > 2 {
                grads.push(needs[2].then(|| bias_grad(g, n, c_out, out_plane)));
            }
            grads
        }),
    )
}

/// A trainable (transposed) convolution layer.
#[derive(Clone, Debug)]
pub struct Conv2d<T: Element> {
    pub params: Conv2dParams<T>,
    pub transposed: bool,
}

impl<T: Element> Conv2d<T> {
    /// Kaiming fan-in weights and zero bias, seeded by `(seed, name)`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        transposed: bool,
        seed: u64,
    ) -> Result<Self> {
        let shape = if transposed { [c_in, c_out, k, k] } else { [c_out, c_in, k, k] };
        // Fan-in is C_in·k·k in both layouts.
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        let weight = seeded_init(InitKind::Normal { mean: 0.0, std }, &shape, derive_seed(seed, name))?
            .with_requires_grad(true);
        let bias = if bias { Some(Tensor::zeros(&[c_out])?.with_requires_grad(true)) } else { None };
        Ok(Conv2d { params: Conv2dParams { weight, bias, stride, padding }, transposed })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if self.transposed {
            conv_transpose2d(x, &self.params)
        } else {
            conv2d(x, &self.params)
        }
    }

    pub fn out_channels(&self) -> usize {
        let s = self.params.weight.shape();
        if self.transposed { s[1] } else { s[0] }
    }
}

impl<T: Element> Module<T> for Conv2d<T> {
    fn slots<'a>(&'a mut self, prefix: &str, out: &mut Vec<Slot<'a, T>>) {
        push_param(out, prefix, "weight", &mut self.params.weight);
        if let Some(b) = self.params.bias.as_mut() {
            push_param(out, prefix, "bias", b);
        }
    }
}
