//! Cut&Paste defect synthesis (rectangle and scar variants) and color jitter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::init::derive_seed;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CutPasteVariant {
    Rect,
    Scar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CutPasteSpec {
    /// Patch area as a fraction of the image area.
    pub rect_area: [f64; 2],
    /// Width/height ratio, sampled log-uniformly.
    pub rect_aspect: [f64; 2],
    pub scar_width: [usize; 2],
    pub scar_height: [usize; 2],
    pub scar_rotation_deg: [f64; 2],
    /// Half-width of the brightness/contrast/saturation/hue jitter on the patch.
    pub patch_jitter: f64,
}

impl Default for CutPasteSpec {
    fn default() -> Self {
        CutPasteSpec {
            rect_area: [0.02, 0.15],
            rect_aspect: [0.3, 3.3],
            scar_width: [2, 16],
            scar_height: [10, 25],
            scar_rotation_deg: [-45.0, 45.0],
            patch_jitter: 0.1,
        }
    }
}

impl CutPasteSpec {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        let [a0, a1] = self.rect_area;
        if !(a0 > 0.0 && a0 <= a1 && a1 <= 1.0) {
            p.push(format!("augment.rect_area {:?} must satisfy 0 < low ≤ high ≤ 1", self.rect_area));
        }
        let [r0, r1] = self.rect_aspect;
        if !(r0 > 0.0 && r0 <= r1) {
            p.push(format!("augment.rect_aspect {:?} must satisfy 0 < low ≤ high", self.rect_aspect));
        }
        for (name, [lo, hi]) in [("scar_width", self.scar_width), ("scar_height", self.scar_height)] {
            if lo == 0 || lo > hi {
                p.push(format!("augment.{name} [{lo}, {hi}] must satisfy 1 ≤ low ≤ high"));
            }
        }
        let [d0, d1] = self.scar_rotation_deg;
        if d0 > d1 || !d0.is_finite() || !d1.is_finite() {
            p.push(format!("augment.scar_rotation_deg {:?} is an empty interval", self.scar_rotation_deg));
        }
        if !(0.0..1.0).contains(&self.patch_jitter) {
            p.push(format!("augment.patch_jitter {} must lie in [0, 1)", self.patch_jitter));
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() { Ok(()) } else { Err(Error::Config(p)) }
    }
}

/// Multiplicative brightness/contrast/saturation factors and an additive hue
/// shift (fraction of a full turn).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterFactors {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl JitterFactors {
    pub const IDENTITY: JitterFactors = JitterFactors { brightness: 1.0, contrast: 1.0, saturation: 1.0, hue: 0.0 };

    pub fn sample(strength: f64, rng: &mut impl Rng) -> Self {
        let mut f = |center: f64| if strength > 0.0 { rng.random_range(center - strength..=center + strength) } else { center };
        JitterFactors { brightness: f(1.0), contrast: f(1.0), saturation: f(1.0), hue: f(0.0) }
    }
}

fn check_image<T: Element>(op: &'static str, im: &Tensor<T>) -> Result<(usize, usize)> {
    match *im.shape() {
        [3, h, w] => Ok((h, w)),
        _ => Err(Error::shape(op, format!("expected a 3×H×W image, got {:?}", im.shape()))),
    }
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Applies the jitter to planar RGB data in place, skipping identity stages
/// so that [`JitterFactors::IDENTITY`] leaves the pixels untouched.
fn jitter_planes(px: &mut [f64], plane: usize, f: &JitterFactors) {
    let (r, rest) = px.split_at_mut(plane);
    let (g, b) = rest.split_at_mut(plane);
    if f.brightness != 1.0 {
        for v in r.iter_mut().chain(g.iter_mut()).chain(b.iter_mut()) {
            *v = (*v * f.brightness).clamp(0.0, 1.0);
        }
    }
    if f.contrast != 1.0 {
        let mean = (0..plane).map(|i| luma(r[i], g[i], b[i])).sum::<f64>() / plane as f64;
        for v in r.iter_mut().chain(g.iter_mut()).chain(b.iter_mut()) {
            *v = ((*v - mean) * f.contrast + mean).clamp(0.0, 1.0);
        }
    }
    if f.saturation != 1.0 {
        for i in 0..plane {
            let y = luma(r[i], g[i], b[i]);
            for c in [&mut r[i], &mut g[i], &mut b[i]] {
                *c = ((*c - y) * f.saturation + y).clamp(0.0, 1.0);
            }
        }
    }
    if f.hue != 0.0 {
        for i in 0..plane {
            let (h, s, v) = rgb_to_hsv(r[i], g[i], b[i]);
            let (nr, ng, nb) = hsv_to_rgb(h + f.hue, s, v);
            r[i] = nr.clamp(0.0, 1.0);
            g[i] = ng.clamp(0.0, 1.0);
            b[i] = nb.clamp(0.0, 1.0);
        }
    }
}

/// Color jitter with explicit factors; output clamped to [0, 1].
pub fn apply_jitter<T: Element>(im: &Tensor<T>, f: &JitterFactors) -> Result<Tensor<T>> {
    let (h, w) = check_image("color_jitter", im)?;
    let mut px: Vec<f64> = im.data().iter().map(|v| v.as_f64()).collect();
    jitter_planes(&mut px, h * w, f);
    Tensor::new(px.into_iter().map(T::of).collect(), &[3, h, w])
}

/// Random brightness/contrast/saturation/hue perturbation of half-width `strength`.
pub fn color_jitter<T: Element>(im: &Tensor<T>, strength: f64, seed: u64) -> Result<Tensor<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    apply_jitter(im, &JitterFactors::sample(strength, &mut rng))
}

/// Crops `ph×pw` at `(y, x)` into planar f64 buffers.
fn crop(src: &[f64], w: usize, plane: usize, y: usize, x: usize, ph: usize, pw: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 * ph * pw);
    for c in 0..3 {
        for r in 0..ph {
            out.extend_from_slice(&src[c * plane + (y + r) * w + x..][..pw]);
        }
    }
    out
}

/// Rectangle size whose rounded area lies in the requested ratio range.
fn sample_rect(h: usize, w: usize, spec: &CutPasteSpec, rng: &mut impl Rng) -> Result<(usize, usize)> {
    let total = (h * w) as f64;
    let (la, lb) = (spec.rect_aspect[0].ln(), spec.rect_aspect[1].ln());
    for _ in 0..1000 {
        let ratio = rng.random_range(spec.rect_area[0]..=spec.rect_area[1]);
        let aspect = rng.random_range(la..=lb).exp();
        let area = ratio * total;
        let pw = ((area * aspect).sqrt().round() as usize).clamp(1, w);
        let ph = ((area / aspect).sqrt().round() as usize).clamp(1, h);
        let got = (pw * ph) as f64 / total;
        if got >= spec.rect_area[0] && got <= spec.rect_area[1] {
            return Ok((ph, pw));
        }
    }
    Err(Error::invalid("cut_paste", format!("no {h}×{w} rectangle fits area range {:?}", spec.rect_area)))
}

/// Copies a jittered patch to an independent location. Returns the augmented
/// image and the binary paste mask (`H×W`); pixels outside the mask are
/// bit-identical to the input.
pub fn cut_paste<T: Element>(im: &Tensor<T>, variant: CutPasteVariant, spec: &CutPasteSpec, seed: u64) -> Result<(Tensor<T>, Tensor<T>)> {
    spec.validate()?;
    let (h, w) = check_image("cut_paste", im)?;
    let plane = h * w;
    let src: Vec<f64> = im.data().iter().map(|v| v.as_f64()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = im.data().to_vec();
    let mut mask = vec![T::zero(); plane];
    match variant {
        CutPasteVariant::Rect => {
            let (ph, pw) = sample_rect(h, w, spec, &mut rng)?;
            let (sy, sx) = (rng.random_range(0..=h - ph), rng.random_range(0..=w - pw));
            let (dy, dx) = (rng.random_range(0..=h - ph), rng.random_range(0..=w - pw));
            let mut patch = crop(&src, w, plane, sy, sx, ph, pw);
            jitter_planes(&mut patch, ph * pw, &JitterFactors::sample(spec.patch_jitter, &mut rng));
            for c in 0..3 {
                for r in 0..ph {
                    for q in 0..pw {
                        out[c * plane + (dy + r) * w + dx + q] = T::of(patch[(c * ph + r) * pw + q]);
                    }
                }
            }
            for r in 0..ph {
                mask[(dy + r) * w + dx..][..pw].fill(T::one());
            }
        }
        CutPasteVariant::Scar => {
            let pw = rng.random_range(spec.scar_width[0]..=spec.scar_width[1]).min(w);
            let ph = rng.random_range(spec.scar_height[0]..=spec.scar_height[1]).min(h);
            let theta = rng.random_range(spec.scar_rotation_deg[0]..=spec.scar_rotation_deg[1]).to_radians();
            let (sin, cos) = theta.sin_cos();
            let bw = ((pw as f64 * cos.abs() + ph as f64 * sin.abs()).ceil() as usize).min(w);
            let bh = ((pw as f64 * sin.abs() + ph as f64 * cos.abs()).ceil() as usize).min(h);
            let (sy, sx) = (rng.random_range(0..=h - ph), rng.random_range(0..=w - pw));
            let (dy, dx) = (rng.random_range(0..=h - bh), rng.random_range(0..=w - bw));
            let mut patch = crop(&src, w, plane, sy, sx, ph, pw);
            jitter_planes(&mut patch, ph * pw, &JitterFactors::sample(spec.patch_jitter, &mut rng));
            let (bcy, bcx) = (bh as f64 / 2.0, bw as f64 / 2.0);
            let (pcy, pcx) = (ph as f64 / 2.0, pw as f64 / 2.0);
            for r in 0..bh {
                for q in 0..bw {
                    // Inverse-rotate the destination pixel center into patch coordinates.
                    let (vy, vx) = (r as f64 + 0.5 - bcy, q as f64 + 0.5 - bcx);
                    let px = cos * vx + sin * vy + pcx;
                    let py = -sin * vx + cos * vy + pcy;
                    if px < 0.0 || py < 0.0 || px >= pw as f64 || py >= ph as f64 {
                        continue;
                    }
                    let (iy, ix) = (py as usize, px as usize);
                    let d = (dy + r) * w + dx + q;
                    for c in 0..3 {
                        out[c * plane + d] = T::of(patch[(c * ph + iy) * pw + ix]);
                    }
                    mask[d] = T::one();
                }
            }
        }
    }
    Ok((Tensor::new(out, &[3, h, w])?, Tensor::new(mask, &[h, w])?))
}

/// Originals (label 0) paired with one Cut&Paste copy each (label 1).
#[derive(Clone, Debug)]
pub struct TrainingBatch<T: Element> {
    pub originals: Vec<Tensor<T>>,
    pub augmented: Vec<Tensor<T>>,
    pub masks: Vec<Tensor<T>>,
    pub variants: Vec<CutPasteVariant>,
}

impl<T: Element> TrainingBatch<T> {
    pub fn labels(&self) -> Vec<usize> {
        std::iter::repeat_n(0, self.originals.len()).chain(std::iter::repeat_n(1, self.augmented.len())).collect()
    }

    pub fn len(&self) -> usize {
        self.originals.len() + self.augmented.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Seed for everything random in epoch `epoch` of a run seeded with `seed`.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    derive_seed(seed, &format!("epoch/{epoch}"))
}

/// Optionally color-jitters each image, then appends one augmented copy per
/// image using the rectangle or scar variant with equal probability.
pub fn make_training_batch<T: Element>(images: &[Tensor<T>], spec: &CutPasteSpec, color_strength: f64, seed: u64) -> Result<TrainingBatch<T>> {
    if images.is_empty() {
        return Err(Error::invalid("make_training_batch", "empty image list"));
    }
    let mut batch = TrainingBatch { originals: vec![], augmented: vec![], masks: vec![], variants: vec![] };
    for (i, im) in images.iter().enumerate() {
        let s = derive_seed(seed, &format!("sample/{i}"));
        let original = if color_strength > 0.0 { color_jitter(im, color_strength, derive_seed(s, "color"))? } else { im.clone() };
        let variant = if ChaCha8Rng::seed_from_u64(derive_seed(s, "variant")).random_bool(0.5) {
            CutPasteVariant::Scar
        } else {
            CutPasteVariant::Rect
        };
        let (aug, mask) = cut_paste(&original, variant, spec, derive_seed(s, "cutpaste"))?;
        batch.originals.push(original);
        batch.augmented.push(aug);
        batch.masks.push(mask);
        batch.variants.push(variant);
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::init::{seeded_init, InitKind};
    use proptest::prelude::*;

    fn image(seed: u64, h: usize, w: usize) -> Tensor<f32> {
        seeded_init(InitKind::Uniform { low: 0.0, high: 1.0 }, &[3, h, w], seed).unwrap()
    }

    fn check_outside(im: &Tensor<f32>, aug: &Tensor<f32>, mask: &Tensor<f32>) {
        let plane = mask.numel();
        for c in 0..3 {
            for p in 0..plane {
                if mask.data()[p] == 0.0 {
                    assert_eq!(im.data()[c * plane + p].to_bits(), aug.data()[c * plane + p].to_bits());
                }
            }
        }
    }

    #[test]
    fn rect_area_and_locality() {
        let spec = CutPasteSpec::default();
        for seed in 0..30 {
            let im = image(seed, 64, 48);
            let (aug, mask) = cut_paste(&im, CutPasteVariant::Rect, &spec, seed).unwrap();
            check_outside(&im, &aug, &mask);
            let ratio = mask.data().iter().sum::<f32>() as f64 / (64.0 * 48.0);
            assert!(ratio >= spec.rect_area[0] && ratio <= spec.rect_area[1], "{ratio}");
            assert!(mask.data().iter().all(|&m| m == 0.0 || m == 1.0));
        }
    }

    #[test]
    fn rect_patch_is_a_source_copy_without_jitter() {
        let spec = CutPasteSpec { patch_jitter: 0.0, ..Default::default() };
        let im = image(3, 32, 32);
        let (aug, mask) = cut_paste(&im, CutPasteVariant::Rect, &spec, 11).unwrap();
        let rows: Vec<usize> = (0..32).filter(|r| (0..32).any(|c| mask.data()[r * 32 + c] == 1.0)).collect();
        let cols: Vec<usize> = (0..32).filter(|c| (0..32).any(|r| mask.data()[r * 32 + c] == 1.0)).collect();
        let (dy, dx, ph, pw) = (rows[0], cols[0], rows.len(), cols.len());
        let found = (0..=32 - ph).any(|sy| {
            (0..=32 - pw).any(|sx| {
                (0..3).all(|c| {
                    (0..ph).all(|r| (0..pw).all(|q| aug.data()[c * 1024 + (dy + r) * 32 + dx + q] == im.data()[c * 1024 + (sy + r) * 32 + sx + q]))
                })
            })
        });
        assert!(found);
    }

    #[test]
    fn scar_locality() {
        let spec = CutPasteSpec::default();
        for seed in 0..20 {
            let im = image(seed + 100, 64, 64);
            let (aug, mask) = cut_paste(&im, CutPasteVariant::Scar, &spec, seed).unwrap();
            check_outside(&im, &aug, &mask);
            let area = mask.data().iter().sum::<f32>();
            assert!((2.0 * 10.0 * 0.5..=16.0 * 25.0 * 1.5).contains(&area), "{area}");
        }
    }

    #[test]
    fn determinism_and_variation() {
        let spec = CutPasteSpec::default();
        let im = image(5, 64, 64);
        for v in [CutPasteVariant::Rect, CutPasteVariant::Scar] {
            let a = cut_paste(&im, v, &spec, 9).unwrap();
            let b = cut_paste(&im, v, &spec, 9).unwrap();
            assert_eq!(a.0.data(), b.0.data());
            assert_eq!(a.1.data(), b.1.data());
            let masks: std::collections::HashSet<Vec<u32>> =
                (0..20).map(|s| cut_paste(&im, v, &spec, s).unwrap().1.data().iter().map(|x| x.to_bits()).collect()).collect();
            assert!(masks.len() >= 19);
        }
    }

    #[test]
    fn degenerate_spec_rejected() {
        let im = image(1, 32, 32);
        let bad = CutPasteSpec { rect_area: [0.2, 0.1], ..Default::default() };
        assert!(matches!(cut_paste(&im, CutPasteVariant::Rect, &bad, 0), Err(Error::Config(_))));
        let bad = CutPasteSpec { scar_width: [5, 3], scar_height: [0, 2], ..Default::default() };
        assert_eq!(bad.problems().len(), 2);
    }

    #[test]
    fn batch_construction() {
        let ims: Vec<Tensor<f32>> = (0..5).map(|s| image(s, 32, 32)).collect();
        let b = make_training_batch(&ims, &CutPasteSpec::default(), 0.0, 7).unwrap();
        assert_eq!(b.len(), 10);
        assert_eq!(b.labels(), vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1]);
        for (o, im) in b.originals.iter().zip(&ims) {
            assert_eq!(o.data(), im.data());
        }
        assert!(make_training_batch::<f32>(&[], &CutPasteSpec::default(), 0.0, 7).is_err());
        let e0 = make_training_batch(&ims, &CutPasteSpec::default(), 0.1, epoch_seed(3, 0)).unwrap();
        let e0b = make_training_batch(&ims, &CutPasteSpec::default(), 0.1, epoch_seed(3, 0)).unwrap();
        let e1 = make_training_batch(&ims, &CutPasteSpec::default(), 0.1, epoch_seed(3, 1)).unwrap();
        assert_eq!(e0.augmented[0].data(), e0b.augmented[0].data());
        assert_ne!(e0.augmented[0].data(), e1.augmented[0].data());
        let both: std::collections::HashSet<_> = (0..20)
            .flat_map(|s| make_training_batch(&ims, &CutPasteSpec::default(), 0.0, s).unwrap().variants)
            .collect();
        assert_eq!(both.len(), 2);
    }

    #[test]
    fn jitter_identity_and_gray() {
        let im = image(2, 16, 16);
        assert_eq!(apply_jitter(&im, &JitterFactors::IDENTITY).unwrap().data(), im.data());
        let gray = Tensor::<f64>::full(&[3, 8, 8], 0.5).unwrap();
        for seed in 0..20 {
            let out = color_jitter(&gray, 0.1, seed).unwrap();
            let mean = out.data().iter().sum::<f64>() / out.numel() as f64;
            assert!((mean - 0.5).abs() <= 0.1 * 0.5 + 1e-12, "{mean}");
        }
    }

    #[test]
    fn hsv_round_trip() {
        for (r, g, b) in [(0.1, 0.5, 0.9), (0.9, 0.2, 0.3), (0.4, 0.4, 0.1), (0.0, 0.0, 0.0)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-12 && (g - g2).abs() < 1e-12 && (b - b2).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn jitter_stays_in_range(seed in 0u64..500, strength in 0.0f64..0.5) {
            let im = image(seed, 8, 8);
            let out = color_jitter(&im, strength, seed).unwrap();
            prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn cut_paste_touches_only_mask(seed in 0u64..500, scar in any::<bool>()) {
            let im = image(seed, 40, 40);
            let v = if scar { CutPasteVariant::Scar } else { CutPasteVariant::Rect };
            let (aug, mask) = cut_paste(&im, v, &CutPasteSpec::default(), seed).unwrap();
            check_outside(&im, &aug, &mask);
        }
    }
}
