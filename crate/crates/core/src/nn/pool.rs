use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// 2×2, stride-2 max pooling. Odd trailing rows/columns are dropped. The
/// gradient goes to the first maximum of each window in row-major order.
pub fn max_pool2d<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    const OP: &str = "max_pool2d";
    let (n, c, h, w) = x.dims4(OP)?;
    if h < 2 || w < 2 {
        return Err(Error::shape(OP, format!("input {h}×{w} is smaller than the 2×2 window")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(out.capacity());
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if xd[i] > xd[best] {
                        best = i;
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    let len = xd.len();
    Tensor::from_op(
        OP,
        vec![n, c, oh, ow],
        out,
        vec![x.clone()],
        Box::new(move |g, _| {
            let mut gx = vec![T::zero(); len];
            for (&i, &gv) in argmax.iter().zip(g) {
                gx[i] += gv;
            }
            vec![Some(gx)]
        }),
    )
}
