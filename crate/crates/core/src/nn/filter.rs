//! Separable filtering with reflect (half-sample symmetric) padding.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Maps an out-of-range index onto `0..n` by mirroring about the edges,
/// duplicating the edge sample (`… b a | a b c …`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize { m as usize } else { (period - 1 - m) as usize }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpatialAxis {
    Rows,
    Cols,
}

/// Correlates every row or column of an `N×C×H×W` tensor with an odd-length
/// 1D kernel.
pub fn filter_axis<T: Element>(x: &Tensor<T>, kernel: &[f64], axis: SpatialAxis) -> Result<Tensor<T>> {
    const OP: &str = "filter_axis";
    let (n, c, h, w) = x.dims4(OP)?;
    if kernel.len().is_multiple_of(2) {
        return Err(Error::invalid(OP, format!("kernel length {} must be odd", kernel.len())));
    }
    let r = (kernel.len() / 2) as isize;
    let (len, stride, lanes_per_plane, lane_step) = match axis {
        SpatialAxis::Rows => (h, w, w, 1),
        SpatialAxis::Cols => (w, 1, h, w),
    };
    let taps: Vec<Vec<usize>> = (0..len as isize)
        .map(|o| (0..kernel.len() as isize).map(|k| reflect_index(o + k - r, len)).collect())
        .collect();
    let weights: Vec<T> = kernel.iter().map(|&v| T::of(v)).collect();
    let plane = h * w;
    let planes = n * c;

    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for p in 0..planes {
        for lane in 0..lanes_per_plane {
            let base = p * plane + lane * lane_step;
            for (o, t) in taps.iter().enumerate() {
                let mut acc = T::zero();
                for (&src, &wk) in t.iter().zip(&weights) {
                    acc += wk * xd[base + src * stride];
                }
                out[base + o * stride] = acc;
            }
        }
    }
    Tensor::from_op(
        OP,
        vec![n, c, h, w],
        out,
        vec![x.clone()],
        Box::new(move |g, _| {
            let mut gx = vec![T::zero(); g.len()];
            for p in 0..planes {
                for lane in 0..lanes_per_plane {
                    let base = p * plane + lane * lane_step;
                    for (o, t) in taps.iter().enumerate() {
                        let go = g[base + o * stride];
                        for (&src, &wk) in t.iter().zip(&weights) {
                            gx[base + src * stride] += wk * go;
                        }
                    }
                }
            }
            vec![Some(gx)]
        }),
    )
}

/// Normalized sampled Gaussian of odd length `size`.
pub fn gaussian_kernel1d(size: usize, sigma: f64) -> Result<Vec<f64>> {
    const OP: &str = "gaussian_kernel1d";
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(OP, format!("sigma must be positive, got {sigma}")));
    }
    if size.is_multiple_of(2) {
        return Err(Error::invalid(OP, format!("size {size} must be odd")));
    }
    let r = (size / 2) as f64;
    let raw: Vec<f64> = (0..size).map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / total).collect())
}

/// Separable `size×size` Gaussian filter, reflect padded.
pub fn gaussian_filter<T: Element>(x: &Tensor<T>, size: usize, sigma: f64) -> Result<Tensor<T>> {
    let k = gaussian_kernel1d(size, sigma)?;
    filter_axis(&filter_axis(x, &k, SpatialAxis::Rows)?, &k, SpatialAxis::Cols)
}

pub fn gaussian_blur3x3<T: Element>(x: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
    gaussian_filter(x, 3, sigma)
}
