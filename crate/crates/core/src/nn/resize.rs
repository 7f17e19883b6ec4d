//! Spatial resampling of `N×C×H×W` tensors.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Source taps `(i0, i1, frac)` for each output index, half-pixel centers.
fn linear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize with half-pixel centers (no corner alignment).
pub fn bilinear_resize<T: Element>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    const OP: &str = "bilinear_resize";
    let (n, c, h, w) = x.dims4(OP)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape(OP, format!("output size {out_h}×{out_w} must be positive")));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(x.clone());
    }
    let ty = linear_taps(h, out_h);
    let tx: Vec<(usize, usize, T, T)> =
        linear_taps(w, out_w).into_iter().map(|(a, b, f)| (a, b, T::of(1.0 - f), T::of(f))).collect();
    let ty: Vec<(usize, usize, T, T)> = ty.into_iter().map(|(a, b, f)| (a, b, T::of(1.0 - f), T::of(f))).collect();
    let (in_plane, out_plane) = (h * w, out_h * out_w);
    let xd = x.data();
    let mut out = vec![T::zero(); n * c * out_plane];
    for p in 0..n * c {
        let src = &xd[p * in_plane..][..in_plane];
        let dst = &mut out[p * out_plane..][..out_plane];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (r0, r1) = (&src[y0 * w..][..w], &src[y1 * w..][..w]);
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                dst[oy * out_w + ox] = wy0 * (wx0 * r0[x0] + wx1 * r0[x1]) + wy1 * (wx0 * r1[x0] + wx1 * r1[x1]);
            }
        }
    }
    Tensor::from_op(
        OP,
        vec![n, c, out_h, out_w],
        out,
        vec![x.clone()],
        Box::new(move |g, _| {
            let mut gx = vec![T::zero(); n * c * in_plane];
            for p in 0..n * c {
                let src = &g[p * out_plane..][..out_plane];
                let dst = &mut gx[p * in_plane..][..in_plane];
                for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                        let gv = src[oy * out_w + ox];
                        dst[y0 * w + x0] += wy0 * wx0 * gv;
                        dst[y0 * w + x1] += wy0 * wx1 * gv;
                        dst[y1 * w + x0] += wy1 * wx0 * gv;
                        dst[y1 * w + x1] += wy1 * wx1 * gv;
                    }
                }
            }
            vec![Some(gx)]
        }),
    )
}

/// Replicates each pixel into a `factor×factor` patch.
pub fn nearest_upsample<T: Element>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    const OP: &str = "nearest_upsample";
    let (n, c, h, w) = x.dims4(OP)?;
    if factor == 0 {
        return Err(Error::invalid(OP, "factor must be at least 1"));
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    let (oh, ow) = (h * factor, w * factor);
    let xd = x.data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    for p in 0..n * c {
        for oy in 0..oh {
            let src = &xd[(p * h + oy / factor) * w..][..w];
            let dst = &mut out[(p * oh + oy) * ow..][..ow];
            for (ox, d) in dst.iter_mut().enumerate() {
                *d = src[ox / factor];
            }
        }
    }
    Tensor::from_op(
        OP,
        vec![n, c, oh, ow],
        out,
        vec![x.clone()],
        Box::new(move |g, _| {
            let mut gx = vec![T::zero(); n * c * h * w];
            for p in 0..n * c {
                for oy in 0..oh {
                    let src = &g[(p * oh + oy) * ow..][..ow];
                    let dst = &mut gx[(p * h + oy / factor) * w..][..w];
                    for (ox, &gv) in src.iter().enumerate() {
                        dst[ox / factor] += gv;
                    }
                }
            }
            vec![Some(gx)]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_gradients;
    use crate::tensor::init::{seeded_init, InitKind};

    fn t(v: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_f64(v, shape).unwrap()
    }

    #[test]
    fn same_size_is_identity() {
        let x: Tensor<f64> = seeded_init(InitKind::Normal { mean: 0.0, std: 1.0 }, &[2, 3, 5, 4], 1).unwrap();
        assert_eq!(bilinear_resize(&x, 5, 4).unwrap().data(), x.data());
    }

    #[test]
    fn constant_stays_constant() {
        let x = Tensor::<f64>::full(&[1, 2, 7, 3], 1.25).unwrap();
        for (h, w) in [(2, 2), (16, 9), (1, 1), (7, 30)] {
            let y = bilinear_resize(&x, h, w).unwrap();
            assert!(y.data().iter().all(|v| (v - 1.25).abs() < 1e-12));
        }
    }

    #[test]
    fn two_to_four_half_pixel() {
        // Per axis, output o samples source (o + 0.5)/2 − 0.5 clamped at 0:
        // 0 → 0, 1 → 0.25, 2 → 0.75, 3 → 1 (clamped by the right neighbour).
        let x = t(&[1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]);
        let y = bilinear_resize(&x, 4, 4).unwrap();
        let axis = [0.0, 0.25, 0.75, 1.0];
        for (r, fy) in axis.iter().enumerate() {
            for (c, fx) in axis.iter().enumerate() {
                let top = 1.0 + fx;
                let bottom = 3.0 + fx;
                let expected = top * (1.0 - fy) + bottom * fy;
                assert!((y.data()[r * 4 + c] - expected).abs() < 1e-12, "({r},{c})");
            }
        }
    }

    #[test]
    fn nearest_definition() {
        let x = t(&[1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]);
        let y = nearest_upsample(&x, 2).unwrap();
        assert_eq!(
            y.data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        assert_eq!(nearest_upsample(&x, 1).unwrap().data(), x.data());
        let y3 = nearest_upsample(&x, 3).unwrap();
        assert!((y3.data().iter().sum::<f64>() - 9.0 * 10.0).abs() < 1e-12);
    }

    #[test]
    fn gradients() {
        let x: Tensor<f64> = seeded_init(InitKind::Normal { mean: 0.0, std: 1.0 }, &[1, 2, 4, 5], 2).unwrap();
        for (h, w) in [(2, 3), (7, 9), (3, 10)] {
            let r = check_gradients(std::slice::from_ref(&x), 1e-6, |t| bilinear_resize(&t[0], h, w)).unwrap();
            assert!(r.max_rel_err < 1e-7, "{r:?}");
        }
        let r = check_gradients(&[x], 1e-6, |t| nearest_upsample(&t[0], 2)).unwrap();
        assert!(r.max_rel_err < 1e-7, "{r:?}");
    }
}
