//! Blocked local self-attention with haloed neighborhoods.
//!
//! The feature map is tiled into non-overlapping `b×b` query blocks. Each
//! block attends over one shared `(b+2·hl)²` neighborhood: the block itself
//! plus a band of `hl` pixels on every side, zero-filled outside the map.
//! Logits combine a content term `q·k/√d_qk` with separable relative
//! position terms `q·rel_row[Δrow] + q·rel_col[Δcol]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{conv2d, push_param, Conv2dParams, Module, Slot};
use crate::tensor::init::{derive_seed, seeded_init, InitKind};
use crate::tensor::{gemm, Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HaloConfig {
    pub block: usize,
    pub halo: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_qk: usize,
    pub d_v: usize,
    /// Exclude out-of-map neighborhood pixels from the softmax instead of
    /// attending to their zero keys.
    pub mask_padding: bool,
}

impl HaloConfig {
    /// Single-head layer with `d_qk = d_v = d_model`.
    pub fn new(d_model: usize, block: usize, halo: usize) -> Self {
        HaloConfig { block, halo, heads: 1, d_model, d_qk: d_model, d_v: d_model, mask_padding: false }
    }

    /// Splits the width evenly over `heads`.
    pub fn with_heads(mut self, heads: usize) -> Result<Self> {
        if heads == 0 || !self.d_model.is_multiple_of(heads) {
            return Err(Error::invalid("HaloConfig", format!("{heads} heads do not divide width {}", self.d_model)));
        }
        self.heads = heads;
        self.d_qk = self.d_model / heads;
        self.d_v = self.d_model / heads;
        Ok(self)
    }

    pub fn with_mask(mut self, mask_padding: bool) -> Self {
        self.mask_padding = mask_padding;
        self
    }

    /// Neighborhood extent per axis.
    pub fn extent(&self) -> usize {
        self.block + 2 * self.halo
    }

    /// Number of relative offsets per axis.
    pub fn rel_len(&self) -> usize {
        2 * (self.block + self.halo) - 1
    }

    pub fn validate(&self) -> Result<()> {
        const OP: &str = "HaloConfig";
        if self.block == 0 || self.heads == 0 || self.d_qk == 0 || self.d_v == 0 {
            return Err(Error::invalid(OP, "block, heads and head widths must be positive"));
        }
        if self.heads * self.d_qk != self.d_model {
            return Err(Error::invalid(OP, format!("heads·d_qk = {} ≠ d_model {}", self.heads * self.d_qk, self.d_model)));
        }
        if self.heads * self.d_v != self.d_model {
            return Err(Error::invalid(OP, format!("heads·d_v = {} ≠ width {}", self.heads * self.d_v, self.d_model)));
        }
        Ok(())
    }

    fn check_input(&self, op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
        self.validate()?;
        let &[n, c, h, w] = shape else {
            return Err(Error::shape(op, format!("expected N×C×H×W, got {shape:?}")));
        };
        if c != self.d_model {
            return Err(Error::shape(op, format!("input has {c} channels, d_model is {}", self.d_model)));
        }
        if h % self.block != 0 || w % self.block != 0 {
            return Err(Error::shape(op, format!("block {} does not divide {h}×{w}", self.block)));
        }
        Ok((n, c, h, w))
    }
}

/// Projection and relative-position parameters of one attention layer.
/// Projections are bias-free 1×1 convolution weights.
#[derive(Clone, Debug)]
pub struct HaloParams<T: Element> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
    /// `heads × (2(b+hl)−1) × d_qk`.
    pub rel_row: Tensor<T>,
    pub rel_col: Tensor<T>,
}

impl<T: Element> HaloParams<T> {
    pub fn new(name: &str, cfg: &HaloConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let proj = |tag: &str, out: usize, inp: usize| -> Result<Tensor<T>> {
            let std = (1.0 / inp as f64).sqrt();
            Ok(seeded_init(InitKind::Normal { mean: 0.0, std }, &[out, inp, 1, 1], derive_seed(seed, &format!("{name}.{tag}")))?
                .with_requires_grad(true))
        };
        let rel = |tag: &str| -> Result<Tensor<T>> {
            let std = (1.0 / cfg.d_qk as f64).sqrt();
            Ok(seeded_init(
                InitKind::Normal { mean: 0.0, std },
                &[cfg.heads, cfg.rel_len(), cfg.d_qk],
                derive_seed(seed, &format!("{name}.{tag}")),
            )?
            .with_requires_grad(true))
        };
        Ok(HaloParams {
            w_q: proj("w_q", cfg.heads * cfg.d_qk, d)?,
            w_k: proj("w_k", cfg.heads * cfg.d_qk, d)?,
            w_v: proj("w_v", cfg.heads * cfg.d_v, d)?,
            w_o: proj("w_o", d, cfg.heads * cfg.d_v)?,
            rel_row: rel("rel_row")?,
            rel_col: rel("rel_col")?,
        })
    }

    fn check(&self, cfg: &HaloConfig) -> Result<()> {
        const OP: &str = "HaloParams";
        let (hq, hv, d) = (cfg.heads * cfg.d_qk, cfg.heads * cfg.d_v, cfg.d_model);
        let expect: [(&str, &Tensor<T>, Vec<usize>); 6] = [
            ("w_q", &self.w_q, vec![hq, d, 1, 1]),
            ("w_k", &self.w_k, vec![hq, d, 1, 1]),
            ("w_v", &self.w_v, vec![hv, d, 1, 1]),
            ("w_o", &self.w_o, vec![d, hv, 1, 1]),
            ("rel_row", &self.rel_row, vec![cfg.heads, cfg.rel_len(), cfg.d_qk]),
            ("rel_col", &self.rel_col, vec![cfg.heads, cfg.rel_len(), cfg.d_qk]),
        ];
        for (name, t, shape) in expect {
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(OP, format!("{name} has shape {:?}, expected {shape:?}", t.shape())));
            }
        }
        Ok(())
    }
}

impl<T: Element> Module<T> for HaloParams<T> {
    fn slots<'a>(&'a mut self, prefix: &str, out: &mut Vec<Slot<'a, T>>) {
        push_param(out, prefix, "w_q", &mut self.w_q);
        push_param(out, prefix, "w_k", &mut self.w_k);
        push_param(out, prefix, "w_v", &mut self.w_v);
        push_param(out, prefix, "w_o", &mut self.w_o);
        push_param(out, prefix, "rel_row", &mut self.rel_row);
        push_param(out, prefix, "rel_col", &mut self.rel_col);
    }
}

/// Copies every block's haloed neighborhood into
/// `N × nBlocks × C × e × e` with `e = b + 2·hl`, blocks in row-major order.
pub fn gather_halo_neighborhoods<T: Element>(x: &Tensor<T>, block: usize, halo: usize) -> Result<Tensor<T>> {
    const OP: &str = "gather_halo_neighborhoods";
    let (n, c, h, w) = x.dims4(OP)?;
    if block == 0 || h % block != 0 || w % block != 0 {
        return Err(Error::shape(OP, format!("block {block} does not divide {h}×{w}")));
    }
    let (gh, gw, e) = (h / block, w / block, block + 2 * halo);
    let nb = gh * gw;
    // Flat source index per destination element, or None outside the map.
    let mut index = Vec::with_capacity(n * nb * c * e * e);
    for ni in 0..n {
        for bi in 0..gh {
            for bj in 0..gw {
                for ci in 0..c {
                    for r in 0..e {
                        let y = (bi * block + r) as isize - halo as isize;
                        for col in 0..e {
                            let xx = (bj * block + col) as isize - halo as isize;
                            let inside = y >= 0 && y < h as isize && xx >= 0 && xx < w as isize;
                            index.push(inside.then(|| ((ni * c + ci) * h + y as usize) * w + xx as usize));
                        }
                    }
                }
            }
        }
    }
    let xd = x.data();
    let out: Vec<T> = index.iter().map(|i| i.map_or(T::zero(), |i| xd[i])).collect();
    let len = xd.len();
    Tensor::from_op(
        OP,
        vec![n, nb, c, e, e],
        out,
        vec![x.clone()],
        Box::new(move |g, _| {
            let mut gx = vec![T::zero(); len];
            for (i, &gv) in index.iter().zip(g) {
                if let Some(i) = *i {
                    gx[i] += gv;
                }
            }
            vec![Some(gx)]
        }),
    )
}

/// Geometry shared by the forward and backward passes of the fused kernel.
#[derive(Clone, Copy)]
struct Layout {
    n: usize,
    h: usize,
    w: usize,
    b: usize,
    hl: usize,
    e: usize,
    heads: usize,
    dq: usize,
    dv: usize,
    rel: usize,
    mask: bool,
}

impl Layout {
    fn queries(&self) -> usize {
        self.b * self.b
    }

    fn keys(&self) -> usize {
        self.e * self.e
    }

    /// Copies `d` channels starting at `c0` of pixel rows/cols into a
    /// `pixels × d` row-major buffer. `origin` is the top-left map coordinate
    /// and `side` the square extent; out-of-map pixels read as zero.
    #[allow(clippy::too_many_arguments)]
    fn gather<T: Element>(&self, src: &[T], ni: usize, c_total: usize, c0: usize, d: usize, origin: (isize, isize), side: usize, dst: &mut [T]) {
        let plane = self.h * self.w;
        for r in 0..side {
            let y = origin.0 + r as isize;
            for c in 0..side {
                let x = origin.1 + c as isize;
                let row = &mut dst[(r * side + c) * d..][..d];
                if y < 0 || y >= self.h as isize || x < 0 || x >= self.w as isize {
                    row.iter_mut().for_each(|v| *v = T::zero());
                    continue;
                }
                let base = (ni * c_total + c0) * plane + y as usize * self.w + x as usize;
                for (k, v) in row.iter_mut().enumerate() {
                    *v = src[base + k * plane];
                }
            }
        }
    }

    /// Adjoint of [`Layout::gather`], accumulating into `dst`.
    #[allow(clippy::too_many_arguments)]
    fn scatter<T: Element>(&self, src: &[T], ni: usize, c_total: usize, c0: usize, d: usize, origin: (isize, isize), side: usize, dst: &mut [T]) {
        let plane = self.h * self.w;
        for r in 0..side {
            let y = origin.0 + r as isize;
            for c in 0..side {
                let x = origin.1 + c as isize;
                if y < 0 || y >= self.h as isize || x < 0 || x >= self.w as isize {
                    continue;
                }
                let base = (ni * c_total + c0) * plane + y as usize * self.w + x as usize;
                for (k, &v) in src[(r * side + c) * d..][..d].iter().enumerate() {
                    dst[base + k * plane] += v;
                }
            }
        }
    }

    fn inside(&self, origin: (isize, isize), r: usize, c: usize) -> bool {
        let (y, x) = (origin.0 + r as isize, origin.1 + c as isize);
        y >= 0 && y < self.h as isize && x >= 0 && x < self.w as isize
    }

    /// For each (query, key) pair the row and column relative-offset index.
    fn offsets(&self) -> Vec<(usize, usize)> {
        let (b, e) = (self.b, self.e);
        let mut v = Vec::with_capacity(self.queries() * self.keys());
        for pr in 0..b {
            for pc in 0..b {
                for mr in 0..e {
                    for mc in 0..e {
                        v.push((mr + b - 1 - pr, mc + b - 1 - pc));
                    }
                }
            }
        }
        v
    }

    fn blocks(&self) -> impl Iterator<Item = (usize, usize)> {
        let (gh, gw) = (self.h / self.b, self.w / self.b);
        (0..gh).flat_map(move |i| (0..gw).map(move |j| (i, j)))
    }

    fn query_origin(&self, bi: usize, bj: usize) -> (isize, isize) {
        ((bi * self.b) as isize, (bj * self.b) as isize)
    }

    fn key_origin(&self, bi: usize, bj: usize) -> (isize, isize) {
        ((bi * self.b) as isize - self.hl as isize, (bj * self.b) as isize - self.hl as isize)
    }
}

/// Fused attention core on already projected `q`, `k`, `v` maps
/// (`N × heads·d × H × W`). Returns the concatenated head outputs.
fn halo_attention_core<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    rel_row: &Tensor<T>,
    rel_col: &Tensor<T>,
    cfg: &HaloConfig,
) -> Result<Tensor<T>> {
    const OP: &str = "halo_attention";
    let (n, _, h, w) = q.dims4(OP)?;
    let lay = Layout {
        n,
        h,
        w,
        b: cfg.block,
        hl: cfg.halo,
        e: cfg.extent(),
        heads: cfg.heads,
        dq: cfg.d_qk,
        dv: cfg.d_v,
        rel: cfg.rel_len(),
        mask: cfg.mask_padding,
    };
    let (p, m, r) = (lay.queries(), lay.keys(), lay.rel);
    let (cq, cv) = (lay.heads * lay.dq, lay.heads * lay.dv);
    let scale = T::of(1.0 / (lay.dq as f64).sqrt());
    let offsets = lay.offsets();
    let nblocks = (h / lay.b) * (w / lay.b);

    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let (rrd, rcd) = (rel_row.data(), rel_col.data());
    let mut out = vec![T::zero(); n * cv * h * w];
    // Softmax weights per (n, head, block), kept for the backward pass.
    let mut probs = vec![T::zero(); n * lay.heads * nblocks * p * m];
    let mut qb = vec![T::zero(); p * lay.dq];
    let mut kb = vec![T::zero(); m * lay.dq];
    let mut vb = vec![T::zero(); m * lay.dv];
    let mut qrr = vec![T::zero(); p * r];
    let mut qrc = vec![T::zero(); p * r];
    let mut ob = vec![T::zero(); p * lay.dv];

    let mut slot = 0;
    for ni in 0..n {
        for hd in 0..lay.heads {
            let rr = &rrd[hd * r * lay.dq..][..r * lay.dq];
            let rc = &rcd[hd * r * lay.dq..][..r * lay.dq];
            for (bi, bj) in lay.blocks() {
                let (qo, ko) = (lay.query_origin(bi, bj), lay.key_origin(bi, bj));
                lay.gather(qd, ni, cq, hd * lay.dq, lay.dq, qo, lay.b, &mut qb);
                lay.gather(kd, ni, cq, hd * lay.dq, lay.dq, ko, lay.e, &mut kb);
                lay.gather(vd, ni, cv, hd * lay.dv, lay.dv, ko, lay.e, &mut vb);
                let a = &mut probs[slot * p * m..][..p * m];
                gemm(p, lay.dq, m, &qb, false, &kb, true, a, false);
                gemm(p, lay.dq, r, &qb, false, rr, true, &mut qrr, false);
                gemm(p, lay.dq, r, &qb, false, rc, true, &mut qrc, false);
                for qi in 0..p {
                    let row = &mut a[qi * m..][..m];
                    for (mi, l) in row.iter_mut().enumerate() {
                        let (dr, dc) = offsets[qi * m + mi];
                        *l = *l * scale + qrr[qi * r + dr] + qrc[qi * r + dc];
                        if lay.mask && !lay.inside(ko, mi / lay.e, mi % lay.e) {
                            *l = T::neg_infinity();
                        }
                    }
                    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut z = T::zero();
                    for l in row.iter_mut() {
                        *l = (*l - mx).exp();
                        z += *l;
                    }
                    row.iter_mut().for_each(|l| *l /= z);
                }
                gemm(p, m, lay.dv, a, false, &vb, false, &mut ob, false);
                lay.scatter(&ob, ni, cv, hd * lay.dv, lay.dv, qo, lay.b, &mut out);
                slot += 1;
            }
        }
    }

    let saved = (q.clone(), k.clone(), v.clone(), rel_row.clone(), rel_col.clone());
    Tensor::from_op(
        OP,
        vec![n, cv, h, w],
        out,
        vec![q.clone(), k.clone(), v.clone(), rel_row.clone(), rel_col.clone()],
        Box::new(move |g, needs| {
            let (q, k, v, rel_row, rel_col) = &saved;
            let (qd, kd, vd) = (q.data(), k.data(), v.data());
            let (rrd, rcd) = (rel_row.data(), rel_col.data());
            let mut gq = vec![T::zero(); qd.len()];
            let mut gk = vec![T::zero(); kd.len()];
            let mut gv = vec![T::zero(); vd.len()];
            let mut grr = vec![T::zero(); rrd.len()];
            let mut grc = vec![T::zero(); rcd.len()];

            let mut qb = vec![T::zero(); p * lay.dq];
            let mut kb = vec![T::zero(); m * lay.dq];
            let mut vb = vec![T::zero(); m * lay.dv];
            let mut gob = vec![T::zero(); p * lay.dv];
            let mut da = vec![T::zero(); p * m];
            let mut gvb = vec![T::zero(); m * lay.dv];
            let mut gqb = vec![T::zero(); p * lay.dq];
            let mut gkb = vec![T::zero(); m * lay.dq];
            let mut gqrr = vec![T::zero(); p * r];
            let mut gqrc = vec![T::zero(); p * r];

            let mut slot = 0;
            for ni in 0..lay.n {
                for hd in 0..lay.heads {
                    let rr = &rrd[hd * r * lay.dq..][..r * lay.dq];
                    let rc = &rcd[hd * r * lay.dq..][..r * lay.dq];
                    for (bi, bj) in lay.blocks() {
                        let (qo, ko) = (lay.query_origin(bi, bj), lay.key_origin(bi, bj));
                        let a = &probs[slot * p * m..][..p * m];
                        slot += 1;
                        lay.gather(g, ni, cv, hd * lay.dv, lay.dv, qo, lay.b, &mut gob);
                        lay.gather(qd, ni, cq, hd * lay.dq, lay.dq, qo, lay.b, &mut qb);
                        lay.gather(kd, ni, cq, hd * lay.dq, lay.dq, ko, lay.e, &mut kb);
                        lay.gather(vd, ni, cv, hd * lay.dv, lay.dv, ko, lay.e, &mut vb);

                        if needs[2] {
                            gemm(m, p, lay.dv, a, true, &gob, false, &mut gvb, false);
                            lay.scatter(&gvb, ni, cv, hd * lay.dv, lay.dv, ko, lay.e, &mut gv);
                        }
                        // dA, then the softmax backward in place: dL = A ⊙ (dA − Σ dA⊙A).
                        gemm(p, lay.dv, m, &gob, false, &vb, true, &mut da, false);
                        gqrr.iter_mut().for_each(|x| *x = T::zero());
                        gqrc.iter_mut().for_each(|x| *x = T::zero());
                        for qi in 0..p {
                            let (arow, drow) = (&a[qi * m..][..m], &mut da[qi * m..][..m]);
                            let dot: T = arow.iter().zip(drow.iter()).map(|(&x, &y)| x * y).sum();
                            for (mi, (d, &av)) in drow.iter_mut().zip(arow).enumerate() {
                                *d = av * (*d - dot);
                                let (dr, dc) = offsets[qi * m + mi];
                                gqrr[qi * r + dr] += *d;
                                gqrc[qi * r + dc] += *d;
                            }
                        }
                        if needs[3] {
                            gemm(r, p, lay.dq, &gqrr, true, &qb, false, &mut grr[hd * r * lay.dq..][..r * lay.dq], true);
                        }
                        if needs[4] {
                            gemm(r, p, lay.dq, &gqrc, true, &qb, false, &mut grc[hd * r * lay.dq..][..r * lay.dq], true);
                        }
                        da.iter_mut().for_each(|x| *x *= scale);
                        if needs[0] {
                            gemm(p, m, lay.dq, &da, false, &kb, false, &mut gqb, false);
                            gemm(p, r, lay.dq, &gqrr, false, rr, false, &mut gqb, true);
                            gemm(p, r, lay.dq, &gqrc, false, rc, false, &mut gqb, true);
                            lay.scatter(&gqb, ni, cq, hd * lay.dq, lay.dq, qo, lay.b, &mut gq);
                        }
                        if needs[1] {
                            gemm(m, p, lay.dq, &da, true, &qb, false, &mut gkb, false);
                            lay.scatter(&gkb, ni, cq, hd * lay.dq, lay.dq, ko, lay.e, &mut gk);
                        }
                    }
                }
            }
            vec![
                needs[0].then_some(gq),
                needs[1].then_some(gk),
                needs[2].then_some(gv),
                needs[3].then_some(grr),
                needs[4].then_some(grc),
            ]
        }),
    )
}

fn pointwise<T: Element>(x: &Tensor<T>, weight: &Tensor<T>) -> Result<Tensor<T>> {
    conv2d(x, &Conv2dParams { weight: weight.clone(), bias: None, stride: 1, padding: 0 })
}

/// Blocked multi-head halo attention: `N×d_model×H×W → N×d_model×H×W`.
pub fn halo_multihead_attention<T: Element>(x: &Tensor<T>, cfg: &HaloConfig, p: &HaloParams<T>) -> Result<Tensor<T>> {
    cfg.check_input("halo_multihead_attention", x.shape())?;
    p.check(cfg)?;
    let q = pointwise(x, &p.w_q)?;
    let k = pointwise(x, &p.w_k)?;
    let v = pointwise(x, &p.w_v)?;
    let heads = halo_attention_core(&q, &k, &v, &p.rel_row, &p.rel_col, cfg)?;
    pointwise(&heads, &p.w_o)
}

/// Output of [`reference_halo_attention_weights`].
#[derive(Clone, Debug)]
pub struct ReferenceAttention {
    pub output: Vec<f64>,
    /// Softmax weights per `(n, head, query pixel)` in row-major pixel
    /// order, each over the query's `(b+2hl)²` neighborhood.
    pub weights: Vec<Vec<f64>>,
}

/// Direct-loop evaluation of the same definition, in f64, with no blocking,
/// gathering or matrix products. Intended as a test oracle.
pub fn reference_halo_attention_weights<T: Element>(
    x: &Tensor<T>,
    cfg: &HaloConfig,
    p: &HaloParams<T>,
) -> Result<ReferenceAttention> {
    let (n, c, h, w) = cfg.check_input("reference_halo_attention", x.shape())?;
    p.check(cfg)?;
    let f = |t: &Tensor<T>| -> Vec<f64> { t.data().iter().map(|v| v.as_f64()).collect() };
    let (xd, wq, wk, wv, wo, rr, rc) = (f(x), f(&p.w_q), f(&p.w_k), f(&p.w_v), f(&p.w_o), f(&p.rel_row), f(&p.rel_col));
    let (heads, dq, dv, b, hl) = (cfg.heads, cfg.d_qk, cfg.d_v, cfg.block as isize, cfg.halo as isize);
    let rel = cfg.rel_len();
    let px = |ni: usize, ci: usize, y: isize, xx: isize| -> f64 {
        if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
            0.0
        } else {
            xd[((ni * c + ci) * h + y as usize) * w + xx as usize]
        }
    };
    // Projection of channel `o` of weight `wt` (rows of length c) at a pixel.
    let project = |wt: &[f64], o: usize, ni: usize, y: isize, xx: isize| -> f64 {
        (0..c).map(|ci| wt[o * c + ci] * px(ni, ci, y, xx)).sum()
    };

    let mut heads_out = vec![0.0; n * heads * dv * h * w];
    let mut weights = Vec::with_capacity(n * heads * h * w);
    for ni in 0..n {
        for hd in 0..heads {
            for qy in 0..h as isize {
                for qx in 0..w as isize {
                    let (by, bx) = ((qy / b) * b, (qx / b) * b);
                    let query: Vec<f64> = (0..dq).map(|d| project(&wq, hd * dq + d, ni, qy, qx)).collect();
                    let mut logits = Vec::new();
                    let mut values = Vec::new();
                    for ny in by - hl..by + b + hl {
                        for nx in bx - hl..bx + b + hl {
                            let outside = ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize;
                            let key: Vec<f64> = (0..dq).map(|d| project(&wk, hd * dq + d, ni, ny, nx)).collect();
                            let ri = (ny - qy + b - 1 + hl) as usize;
                            let ci = (nx - qx + b - 1 + hl) as usize;
                            let mut l = 0.0;
                            for d in 0..dq {
                                l += query[d] * key[d] / (dq as f64).sqrt();
                                l += query[d] * rr[(hd * rel + ri) * dq + d];
                                l += query[d] * rc[(hd * rel + ci) * dq + d];
                            }
                            logits.push(if cfg.mask_padding && outside { f64::NEG_INFINITY } else { l });
                            values.push((0..dv).map(|d| project(&wv, hd * dv + d, ni, ny, nx)).collect::<Vec<f64>>());
                        }
                    }
                    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
                    let wts: Vec<f64> = logits.iter().map(|l| (l - mx).exp() / z).collect();
                    for d in 0..dv {
                        let o: f64 = wts.iter().zip(&values).map(|(a, v)| a * v[d]).sum();
                        heads_out[((ni * heads * dv + hd * dv + d) * h + qy as usize) * w + qx as usize] = o;
                    }
                    weights.push(wts);
                }
            }
        }
    }
    let cv = heads * dv;
    let mut output = vec![0.0; n * c * h * w];
    for ni in 0..n {
        for o in 0..c {
            for i in 0..h * w {
                output[(ni * c + o) * h * w + i] =
                    (0..cv).map(|j| wo[o * cv + j] * heads_out[(ni * cv + j) * h * w + i]).sum();
            }
        }
    }
    Ok(ReferenceAttention { output, weights })
}

/// Reference output as a tensor of the input's dtype (no gradient).
pub fn reference_halo_attention<T: Element>(x: &Tensor<T>, cfg: &HaloConfig, p: &HaloParams<T>) -> Result<Tensor<T>> {
    let r = reference_halo_attention_weights(x, cfg, p)?;
    Tensor::new(r.output.into_iter().map(T::of).collect(), x.shape())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_gradients;

    fn random<T: Element>(shape: &[usize], seed: u64) -> Tensor<T> {
        seeded_init(InitKind::Normal { mean: 0.0, std: 1.0 }, shape, seed).unwrap()
    }

    fn max_diff<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x.as_f64() - y.as_f64()).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn gather_tiles_without_halo() {
        let x: Tensor<f64> = random(&[2, 3, 6, 4], 1);
        let g = gather_halo_neighborhoods(&x, 2, 0).unwrap();
        assert_eq!(g.shape(), &[2, 6, 3, 2, 2]);
        for ni in 0..2 {
            for blk in 0..6 {
                let (bi, bj) = (blk / 2, blk % 2);
                for c in 0..3 {
                    for r in 0..2 {
                        for col in 0..2 {
                            let got = g.data()[(((ni * 6 + blk) * 3 + c) * 2 + r) * 2 + col];
                            let want = x.data()[((ni * 3 + c) * 6 + bi * 2 + r) * 4 + bj * 2 + col];
                            assert_eq!(got, want);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn gather_paper_geometry_and_zero_fill() {
        let x = Tensor::<f32>::ones(&[1, 1, 60, 60]).unwrap();
        let g = gather_halo_neighborhoods(&x, 12, 2).unwrap();
        assert_eq!(g.shape(), &[1, 25, 1, 16, 16]);
        // Block (0,0): the top two rows and left two columns fall outside.
        let first = &g.data()[..256];
        for r in 0..16 {
            for c in 0..16 {
                let expected = if r < 2 || c < 2 { 0.0 } else { 1.0 };
                assert_eq!(first[r * 16 + c], expected);
            }
        }
        // Block (2,2) is interior.
        assert!(g.data()[12 * 256..13 * 256].iter().all(|&v| v == 1.0));
        assert!(gather_halo_neighborhoods(&x, 7, 2).is_err());
    }

    #[test]
    fn uniform_attention_averages_neighborhood() {
        let cfg = HaloConfig::new(2, 2, 1);
        let mut p = HaloParams::<f64>::new("a", &cfg, 3).unwrap();
        let eye = Tensor::from_f64(&[1.0, 0.0, 0.0, 1.0], &[2, 2, 1, 1]).unwrap();
        p.w_q = Tensor::zeros(&[2, 2, 1, 1]).unwrap();
        p.w_v = eye.clone();
        p.w_o = eye;
        p.rel_row = Tensor::zeros(&[1, 5, 2]).unwrap();
        p.rel_col = Tensor::zeros(&[1, 5, 2]).unwrap();
        let x: Tensor<f64> = random(&[1, 2, 4, 4], 4);
        let y = halo_multihead_attention(&x, &cfg, &p).unwrap();
        for c in 0..2 {
            for qy in 0..4usize {
                for qx in 0..4usize {
                    let (by, bx) = ((qy / 2 * 2) as isize, (qx / 2 * 2) as isize);
                    let mut s = 0.0;
                    for ny in by - 1..by + 3 {
                        for nx in bx - 1..bx + 3 {
                            if (0..4).contains(&ny) && (0..4).contains(&nx) {
                                s += x.data()[(c * 4 + ny as usize) * 4 + nx as usize];
                            }
                        }
                    }
                    let got = y.data()[(c * 4 + qy) * 4 + qx];
                    assert!((got - s / 16.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn blocked_matches_reference() {
        let cases = [(8, 24, 12, 2, 1, false), (6, 8, 4, 1, 2, false), (4, 6, 3, 2, 4, true), (3, 4, 2, 0, 3, false)];
        for (seed, &(c, hw, b, hl, heads, mask)) in cases.iter().enumerate() {
            let cfg = HaloConfig::new(c, b, hl).with_heads(heads).unwrap().with_mask(mask);
            let p = HaloParams::<f32>::new("attn", &cfg, seed as u64).unwrap();
            let x: Tensor<f32> = random(&[2, c, hw, hw], 10 + seed as u64);
            let fast = halo_multihead_attention(&x, &cfg, &p).unwrap();
            let slow = reference_halo_attention(&x, &cfg, &p).unwrap();
            assert!(max_diff(&fast, &slow) < 1e-5, "case {seed}: {}", max_diff(&fast, &slow));
        }
    }

    #[test]
    fn global_attention_degenerate_case_and_weight_sums() {
        let cfg = HaloConfig::new(3, 4, 0);
        let p = HaloParams::<f64>::new("g", &cfg, 5).unwrap();
        let x: Tensor<f64> = random(&[1, 3, 4, 4], 6);
        let r = reference_halo_attention_weights(&x, &cfg, &p).unwrap();
        assert_eq!(r.weights.len(), 16);
        for wts in &r.weights {
            assert_eq!(wts.len(), 16);
            assert!((wts.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let fast = halo_multihead_attention(&x, &cfg, &p).unwrap();
        assert!(max_diff(&fast, &Tensor::new(r.output, &[1, 3, 4, 4]).unwrap()) < 1e-12);
    }

    #[test]
    fn masked_weights_ignore_padding() {
        let cfg = HaloConfig::new(2, 2, 1).with_mask(true);
        let p = HaloParams::<f64>::new("m", &cfg, 7).unwrap();
        let x: Tensor<f64> = random(&[1, 2, 4, 4], 8);
        let r = reference_halo_attention_weights(&x, &cfg, &p).unwrap();
        // Query (0,0): neighborhood rows/cols −1..3, so the first row and
        // first column of the 4×4 neighborhood are outside.
        let wts = &r.weights[0];
        for (i, &v) in wts.iter().enumerate() {
            if i < 4 || i % 4 == 0 {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn translation_by_one_block() {
        let cfg = HaloConfig::new(2, 3, 1);
        let p = HaloParams::<f64>::new("t", &cfg, 9).unwrap();
        let (h, w, b) = (9, 6, 3);
        let x: Tensor<f64> = random(&[1, 2, h, w], 10);
        let mut shifted = vec![0.0; x.numel()];
        for c in 0..2 {
            for y in b..h {
                for xx in 0..w {
                    shifted[(c * h + y) * w + xx] = x.data()[(c * h + y - b) * w + xx];
                }
            }
        }
        let xs = Tensor::new(shifted, &[1, 2, h, w]).unwrap();
        let y0 = halo_multihead_attention(&x, &cfg, &p).unwrap();
        let y1 = halo_multihead_attention(&xs, &cfg, &p).unwrap();
        // The last block row's lower halo reads real rows before the shift
        // and the map edge after it, so only the rows in between must agree.
        for c in 0..2 {
            for y in b..h - b {
                for xx in 0..w {
                    let a = y1.data()[(c * h + y) * w + xx];
                    let e = y0.data()[(c * h + y - b) * w + xx];
                    assert!((a - e).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gradients_tiny_config() {
        for (heads, mask) in [(1, false), (2, false), (1, true)] {
            let cfg = HaloConfig::new(2, 2, 1).with_heads(heads).unwrap().with_mask(mask);
            let p = HaloParams::<f64>::new("g", &cfg, 11).unwrap();
            let x: Tensor<f64> = random(&[1, 2, 4, 4], 12);
            let inputs = [x, p.w_q.clone(), p.w_k.clone(), p.w_v.clone(), p.w_o.clone(), p.rel_row.clone(), p.rel_col.clone()];
            let r = check_gradients(&inputs, 1e-6, |t| {
                let q = HaloParams {
                    w_q: t[1].clone(),
                    w_k: t[2].clone(),
                    w_v: t[3].clone(),
                    w_o: t[4].clone(),
                    rel_row: t[5].clone(),
                    rel_col: t[6].clone(),
                };
                halo_multihead_attention(&t[0], &cfg, &q)
            })
            .unwrap();
            assert!(r.max_rel_err < 1e-6, "heads {heads} mask {mask}: {r:?}");
        }
    }

    #[test]
    fn config_errors() {
        assert!(HaloConfig::new(6, 2, 1).with_heads(4).is_err());
        let cfg = HaloConfig::new(2, 3, 1);
        let p = HaloParams::<f64>::new("e", &cfg, 0).unwrap();
        let x: Tensor<f64> = random(&[1, 2, 4, 4], 0);
        assert!(halo_multihead_attention(&x, &cfg, &p).is_err());
        let x: Tensor<f64> = random(&[1, 3, 6, 6], 0);
        assert!(halo_multihead_attention(&x, &cfg, &p).is_err());
    }
}
