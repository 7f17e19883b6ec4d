//! Training objectives: windowed SSIM, reconstruction and classification
//! losses, the epoch-dependent weight schedule and uncertainty weighting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{cross_entropy, gaussian_filter, Module, Slot};
use crate::tensor::{Element, ReduceOp, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams { window: 11, sigma: 1.5, c1: 1e-4, c2: 9e-4 }
    }
}

/// Per-pixel, per-channel SSIM with a Gaussian window and reflect padding.
pub fn ssim_map<T: Element>(x: &Tensor<T>, y: &Tensor<T>, p: &SsimParams) -> Result<Tensor<T>> {
    if x.shape() != y.shape() {
        return Err(Error::shape("ssim_map", format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    x.dims4("ssim_map")?;
    let blur = |t: &Tensor<T>| gaussian_filter(t, p.window, p.sigma);
    let mx = blur(x)?;
    let my = blur(y)?;
    let mxx = mx.square()?;
    let myy = my.square()?;
    let mxy = mx.mul(&my)?;
    let sxx = blur(&x.square()?)?.sub(&mxx)?;
    let syy = blur(&y.square()?)?.sub(&myy)?;
    let sxy = blur(&x.mul(y)?)?.sub(&mxy)?;
    let num = mxy.scale(2.0)?.add_scalar(p.c1)?.mul(&sxy.scale(2.0)?.add_scalar(p.c2)?)?;
    let den = mxx.add(&myy)?.add_scalar(p.c1)?.mul(&sxx.add(&syy)?.add_scalar(p.c2)?)?;
    num.div(&den)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecLossConfig {
    pub reduction: Reduction,
    /// Standardize both inputs by the target's per-channel statistics
    /// before SSIM (used for feature maps, whose range is not [0, 1]).
    pub standardize: bool,
    pub ssim: SsimParams,
}

impl Default for RecLossConfig {
    fn default() -> Self {
        RecLossConfig { reduction: Reduction::Mean, standardize: false, ssim: SsimParams::default() }
    }
}

impl RecLossConfig {
    pub fn features() -> Self {
        RecLossConfig { standardize: true, ..Self::default() }
    }
}

/// Per-channel mean and standard deviation over (N, H, W), as `[1, C, 1, 1]` constants.
fn channel_stats<T: Element>(t: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    t.dims4("channel_stats")?;
    let mean = t.reduce(ReduceOp::Mean, &[0, 2, 3], true)?;
    let var = t.sub(&mean)?.square()?.reduce(ReduceOp::Mean, &[0, 2, 3], true)?;
    Ok((mean, var.add_scalar(1e-6)?.sqrt()?))
}

/// Squared error plus (1 − SSIM), reduced over every pixel and channel.
/// Zero exactly when `pred == target`.
pub fn rec_loss<T: Element>(pred: &Tensor<T>, target: &Tensor<T>, cfg: &RecLossConfig) -> Result<Tensor<T>> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("rec_loss", format!("{:?} vs {:?}", pred.shape(), target.shape())));
    }
    let sq = pred.sub(target)?.square()?;
    let (sp, st) = if cfg.standardize {
        let (m, s) = channel_stats(target)?;
        (pred.sub(&m)?.div(&s)?, target.sub(&m)?.div(&s)?)
    } else {
        (pred.clone(), target.clone())
    };
    let dissim = ssim_map(&sp, &st, &cfg.ssim)?.neg()?.add_scalar(1.0)?;
    match cfg.reduction {
        Reduction::Mean => sq.mean_all()?.add(&dissim.mean_all()?),
        Reduction::Sum => sq.sum_all()?.add(&dissim.sum_all()?),
    }
}

/// Cross entropy of the normal batch against class 0 plus the augmented
/// batch against class 1, each averaged over its batch.
pub fn cls_loss<T: Element>(logits_normal: &Tensor<T>, logits_augmented: &Tensor<T>) -> Result<Tensor<T>> {
    for l in [logits_normal, logits_augmented] {
        if l.rank() != 2 || l.shape()[1] != 2 {
            return Err(Error::shape("cls_loss", format!("expected N×2 logits, got {:?}", l.shape())));
        }
        if l.shape()[0] == 0 {
            return Err(Error::invalid("cls_loss", "empty batch"));
        }
    }
    let zeros = vec![0; logits_normal.shape()[0]];
    let ones = vec![1; logits_augmented.shape()[0]];
    cross_entropy(logits_normal, &zeros)?.add(&cross_entropy(logits_augmented, &ones)?)
}

/// `s(x) = (a − b) / (1 + exp(0.05·(x − c/2))) + b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Logistic {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Logistic {
    pub const SLOPE: f64 = 0.05;

    pub fn eval(&self, x: f64) -> f64 {
        (self.a - self.b) / (1.0 + (Self::SLOPE * (x - self.c / 2.0)).exp()) + self.b
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSchedule {
    pub alpha1: Logistic,
    pub alpha2: Logistic,
    pub alpha3: Logistic,
    /// Number of training epochs `T`.
    pub epochs: usize,
    /// Epoch axis of the curves; epoch `t` is evaluated at `t·horizon/T`.
    pub horizon: f64,
}

impl Default for LossSchedule {
    fn default() -> Self {
        LossSchedule {
            alpha1: Logistic { a: 1.0, b: 0.0, c: 250.0 },
            alpha2: Logistic { a: 0.0, b: 1.0, c: 150.0 },
            alpha3: Logistic { a: 0.0, b: 1.0, c: 200.0 },
            epochs: 250,
            horizon: 250.0,
        }
    }
}

impl LossSchedule {
    pub fn with_epochs(epochs: usize) -> Self {
        LossSchedule { epochs, ..Self::default() }
    }

    /// First epoch at which weight `k` (0-based) reaches the midpoint of its
    /// values at epochs 0 and T.
    pub fn half_rise_epoch(&self, k: usize) -> usize {
        let a0 = alpha_schedule(0, self)[k];
        let at = alpha_schedule(self.epochs, self)[k];
        let mid = 0.5 * (a0 + at);
        (0..=self.epochs)
            .find(|&t| {
                let v = alpha_schedule(t, self)[k];
                if at >= a0 { v >= mid } else { v <= mid }
            })
            .unwrap_or(self.epochs)
    }
}

/// Normalized weights `(α₁, α₂, α₃)` at epoch `t` (clamped to `[0, T]`).
pub fn alpha_schedule(t: usize, sched: &LossSchedule) -> [f64; 3] {
    let t = t.min(sched.epochs) as f64;
    let x = if sched.epochs == 0 { 0.0 } else { t * sched.horizon / sched.epochs as f64 };
    let s = [sched.alpha1.eval(x), sched.alpha2.eval(x), sched.alpha3.eval(x)];
    let total: f64 = s.iter().sum();
    s.map(|v| v / total)
}

/// Which terms enter the total loss and how they are weighted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    #[default]
    Adaptive,
    Constant,
    Uncertainty,
    ClsFm,
    ClsIm,
    FmIm,
    ClsOnly,
    FmOnly,
}

impl LossMode {
    pub const ALL: [LossMode; 8] = [
        LossMode::Adaptive,
        LossMode::Constant,
        LossMode::Uncertainty,
        LossMode::ClsFm,
        LossMode::ClsIm,
        LossMode::FmIm,
        LossMode::ClsOnly,
        LossMode::FmOnly,
    ];

    /// Included terms in (cls, rec_fm, rec_im) order.
    pub fn terms(self) -> [bool; 3] {
        match self {
            LossMode::Adaptive | LossMode::Constant | LossMode::Uncertainty => [true, true, true],
            LossMode::ClsFm => [true, true, false],
            LossMode::ClsIm => [true, false, true],
            LossMode::FmIm => [false, true, true],
            LossMode::ClsOnly => [true, false, false],
            LossMode::FmOnly => [false, true, false],
        }
    }

    pub fn uses_cls(self) -> bool {
        self.terms()[0]
    }

    /// Static or scheduled weights at epoch `t`; `None` for uncertainty weighting.
    /// Subsets that keep the classification term follow the schedule
    /// renormalized over the kept terms; the others use unit weights.
    pub fn weights(self, t: usize, sched: &LossSchedule) -> Option<[f64; 3]> {
        let on = self.terms();
        match self {
            LossMode::Uncertainty => None,
            LossMode::Constant => Some([1.0; 3]),
            _ if on[0] && on.iter().filter(|&&b| b).count() > 1 => {
                let a = alpha_schedule(t, sched);
                let kept: f64 = (0..3).filter(|&i| on[i]).map(|i| a[i]).sum();
                Some(std::array::from_fn(|i| if on[i] { a[i] / kept } else { 0.0 }))
            }
            _ => Some(on.map(|b| if b { 1.0 } else { 0.0 })),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossMode::Adaptive => "adaptive",
            LossMode::Constant => "constant",
            LossMode::Uncertainty => "uncertainty",
            LossMode::ClsFm => "cls-fm",
            LossMode::ClsIm => "cls-im",
            LossMode::FmIm => "fm-im",
            LossMode::ClsOnly => "cls-only",
            LossMode::FmOnly => "fm-only",
        }
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(vec![format!("unknown loss mode '{s}'")]))
    }
}

pub const TERM_NAMES: [&str; 3] = ["L_cls", "L_rec_fm", "L_rec_im"];

fn check_terms<T: Element>(terms: [&Tensor<T>; 3]) -> Result<()> {
    for (t, name) in terms.iter().zip(TERM_NAMES) {
        if t.numel() != 1 {
            return Err(Error::shape("total_loss", format!("{name} is not a scalar: {:?}", t.shape())));
        }
        if !t.data()[0].as_f64().is_finite() {
            return Err(Error::NonFiniteLoss(name));
        }
    }
    Ok(())
}

/// `Σ wᵢ·Lᵢ`, skipping zero weights.
pub fn weighted_total<T: Element>(terms: [&Tensor<T>; 3], weights: [f64; 3]) -> Result<Tensor<T>> {
    check_terms(terms)?;
    let mut acc: Option<Tensor<T>> = None;
    for (t, w) in terms.into_iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        let term = t.reshape(&[])?.scale(w)?;
        acc = Some(match acc {
            Some(a) => a.add(&term)?,
            None => term,
        });
    }
    match acc {
        Some(a) => Ok(a),
        None => Tensor::scalar(T::zero()),
    }
}

/// `α₁(t)·L_cls + α₂(t)·L_rec_fm + α₃(t)·L_rec_im`.
pub fn total_loss<T: Element>(l_cls: &Tensor<T>, l_fm: &Tensor<T>, l_im: &Tensor<T>, t: usize, sched: &LossSchedule) -> Result<Tensor<T>> {
    weighted_total([l_cls, l_fm, l_im], alpha_schedule(t, sched))
}

/// Trainable `log σ²` per task, in (cls, rec_fm, rec_im) order.
#[derive(Clone, Debug)]
pub struct UncertaintyParams<T: Element> {
    pub log_var: Tensor<T>,
}

impl<T: Element> UncertaintyParams<T> {
    pub fn new() -> Result<Self> {
        Ok(UncertaintyParams { log_var: Tensor::parameter(vec![T::zero(); 3], &[3])? })
    }

    pub fn variances(&self) -> [f64; 3] {
        std::array::from_fn(|i| self.log_var.data()[i].as_f64().exp())
    }
}

impl<T: Element> Module<T> for UncertaintyParams<T> {
    fn slots<'a>(&'a mut self, prefix: &str, out: &mut Vec<Slot<'a, T>>) {
        crate::nn::push_param(out, prefix, "log_var", &mut self.log_var);
    }
}

/// `Σ Lᵢ/σᵢ² + Σ log σᵢ²` over the terms enabled in `mask`.
pub fn uncertainty_total_loss<T: Element>(terms: [&Tensor<T>; 3], u: &UncertaintyParams<T>, mask: [bool; 3]) -> Result<Tensor<T>> {
    check_terms(terms)?;
    let l = Tensor::concat(&[terms[0].reshape(&[1])?, terms[1].reshape(&[1])?, terms[2].reshape(&[1])?], 0)?;
    let m = Tensor::from_f64(&mask.map(|b| if b { 1.0 } else { 0.0 }), &[3])?;
    let s = &u.log_var;
    l.mul(&s.neg()?.exp()?)?.add(s)?.mul(&m)?.sum_all()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_gradients;
    use crate::tensor::init::{seeded_init, InitKind};
    use proptest::prelude::*;

    fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
        seeded_init(InitKind::Uniform { low: 0.0, high: 1.0 }, shape, seed).unwrap()
    }

    /// Direct 2-D sliding-window SSIM with explicit reflect indexing.
    fn ssim_oracle(x: &[f64], y: &[f64], h: usize, w: usize, p: &SsimParams) -> Vec<f64> {
        let r = (p.window / 2) as isize;
        let g: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * p.sigma * p.sigma)).exp()).collect();
        let gs: f64 = g.iter().sum();
        let refl = |i: isize, n: usize| -> usize {
            let n = n as isize;
            let m = i.rem_euclid(2 * n);
            (if m < n { m } else { 2 * n - 1 - m }) as usize
        };
        let mut out = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for di in -r..=r {
                    for dj in -r..=r {
                        let wt = g[(di + r) as usize] * g[(dj + r) as usize] / (gs * gs);
                        let k = refl(i as isize + di, h) * w + refl(j as isize + dj, w);
                        mx += wt * x[k];
                        my += wt * y[k];
                        xx += wt * x[k] * x[k];
                        yy += wt * y[k] * y[k];
                        xy += wt * x[k] * y[k];
                    }
                }
                let (vx, vy, cxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
                out[i * w + j] = (2.0 * mx * my + p.c1) * (2.0 * cxy + p.c2) / ((mx * mx + my * my + p.c1) * (vx + vy + p.c2));
            }
        }
        out
    }

    #[test]
    fn ssim_identity_symmetry_range() {
        let p = SsimParams::default();
        let x = rand(&[2, 3, 13, 9], 1);
        let y = rand(&[2, 3, 13, 9], 2);
        assert!(ssim_map(&x, &x, &p).unwrap().data().iter().all(|v| (v - 1.0).abs() < 1e-6));
        let a = ssim_map(&x, &y, &p).unwrap();
        let b = ssim_map(&y, &x, &p).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
            assert!((-1.0 - 1e-6..=1.0 + 1e-6).contains(u));
        }
        assert!(ssim_map(&x, &rand(&[2, 3, 13, 8], 3), &p).is_err());
    }

    #[test]
    fn ssim_matches_sliding_window_oracle() {
        let p = SsimParams::default();
        let x = rand(&[1, 1, 12, 15], 4);
        let y = rand(&[1, 1, 12, 15], 5);
        let got = ssim_map(&x, &y, &p).unwrap();
        let want = ssim_oracle(x.data(), y.data(), 12, 15, &p);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-10, "{g} vs {w}");
        }
    }

    #[test]
    fn ssim_constant_offset_closed_form() {
        let p = SsimParams::default();
        let (a, k) = (0.2, 5.0);
        let x = Tensor::<f64>::full(&[1, 1, 16, 16], a).unwrap();
        let y = x.add_scalar(k).unwrap();
        let got = ssim_map(&x, &y, &p).unwrap();
        let want = ssim_oracle(x.data(), y.data(), 16, 16, &p);
        let closed = (2.0 * a * (a + k) + p.c1) / (a * a + (a + k) * (a + k) + p.c1);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-9);
            assert!((g - closed).abs() < 1e-6, "{g} vs {closed}");
        }
    }

    #[test]
    fn rec_loss_zero_and_line_monotone() {
        for cfg in [RecLossConfig::default(), RecLossConfig::features()] {
            let x = rand(&[1, 2, 12, 12], 6);
            assert!(rec_loss(&x, &x, &cfg).unwrap().item().unwrap().abs() < 1e-6);
            let r = rand(&[1, 2, 12, 12], 7);
            let dir = r.sub(&x).unwrap();
            let mut prev = f64::INFINITY;
            for k in 0..10 {
                let y = x.add(&dir.scale(1.0 - k as f64 / 10.0).unwrap()).unwrap();
                let l = rec_loss(&y, &x, &cfg).unwrap().item().unwrap();
                assert!(l < prev, "step {k}: {l} !< {prev}");
                assert!(l >= 0.0);
                prev = l;
            }
        }
    }

    #[test]
    fn rec_loss_sum_scales_mean() {
        let x = rand(&[1, 2, 8, 8], 8);
        let y = rand(&[1, 2, 8, 8], 9);
        let mean = rec_loss(&x, &y, &RecLossConfig::default()).unwrap().item().unwrap();
        let sum = rec_loss(&x, &y, &RecLossConfig { reduction: Reduction::Sum, ..Default::default() }).unwrap().item().unwrap();
        assert!((sum - 128.0 * mean).abs() < 1e-9);
    }

    #[test]
    fn rec_loss_gradient() {
        let target = rand(&[1, 1, 8, 8], 10);
        let pred = rand(&[1, 1, 8, 8], 11);
        for cfg in [RecLossConfig::default(), RecLossConfig::features()] {
            let r = check_gradients(std::slice::from_ref(&pred), 1e-6, |t| rec_loss(&t[0], &target, &cfg)).unwrap();
            assert!(r.max_rel_err < 1e-4, "{r:?}");
        }
        let r = check_gradients(&[pred, target], 1e-6, |t| ssim_map(&t[0], &t[1], &SsimParams::default())?.sum_all()).unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn cls_loss_values() {
        let sep_n = Tensor::<f64>::from_f64(&[10.0, -10.0, 10.0, -10.0], &[2, 2]).unwrap();
        let sep_a = Tensor::<f64>::from_f64(&[-10.0, 10.0, -10.0, 10.0], &[2, 2]).unwrap();
        assert!(cls_loss(&sep_n, &sep_a).unwrap().item().unwrap() < 1e-3);
        let u = Tensor::<f64>::zeros(&[3, 2]).unwrap();
        assert!((cls_loss(&u, &u).unwrap().item().unwrap() - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!(cls_loss(&Tensor::<f64>::zeros(&[3, 3]).unwrap(), &u).is_err());
    }

    #[test]
    fn cls_loss_oracle_and_gradient_signs() {
        let ln = seeded_init::<f64>(InitKind::Normal { mean: 0.0, std: 2.0 }, &[5, 2], 12).unwrap();
        let la = seeded_init::<f64>(InitKind::Normal { mean: 0.0, std: 2.0 }, &[4, 2], 13).unwrap();
        let ce = |row: &[f64], k: usize| {
            let m = row[0].max(row[1]);
            let lse = m + ((row[0] - m).exp() + (row[1] - m).exp()).ln();
            lse - row[k]
        };
        let want = ln.data().chunks(2).map(|r| ce(r, 0)).sum::<f64>() / 5.0 + la.data().chunks(2).map(|r| ce(r, 1)).sum::<f64>() / 4.0;
        let (pn, pa) = (ln.with_requires_grad(true), la.with_requires_grad(true));
        let l = cls_loss(&pn, &pa).unwrap();
        assert!((l.item().unwrap() - want).abs() < 1e-6);
        l.backward().unwrap();
        for g in pn.grad().unwrap().chunks(2) {
            assert!(g[0] < 0.0 && g[1] > 0.0);
        }
        for g in pa.grad().unwrap().chunks(2) {
            assert!(g[0] > 0.0 && g[1] < 0.0);
        }
        let r = check_gradients(&[ln, la], 1e-6, |t| cls_loss(&t[0], &t[1])).unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn schedule_defaults() {
        let s = LossSchedule::default();
        let a0 = alpha_schedule(0, &s);
        let at = alpha_schedule(250, &s);
        assert!(a0[0] > 0.95, "{a0:?}");
        assert!(at[0] < 0.1 && at[1] + at[2] > 0.9, "{at:?}");
        let mut prev = a0;
        for t in 0..=250 {
            let a = alpha_schedule(t, &s);
            assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            if t > 0 {
                assert!(a[0] <= prev[0] && a[1] >= prev[1] && a[2] >= prev[2], "epoch {t}: {prev:?} -> {a:?}");
            }
            prev = a;
        }
        assert!(s.half_rise_epoch(2) > s.half_rise_epoch(1));
    }

    #[test]
    fn schedule_horizon_rescale() {
        let full = LossSchedule::default();
        let short = LossSchedule::with_epochs(25);
        for t in 0..=25 {
            let a = alpha_schedule(t, &short);
            let b = alpha_schedule(t * 10, &full);
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn total_loss_arithmetic() {
        let s = |v: f64| Tensor::<f64>::scalar(v).unwrap();
        let (a, b, c) = (s(3.0), s(6.0), s(9.0));
        assert_eq!(weighted_total([&a, &b, &c], [1.0, 0.0, 0.0]).unwrap().item().unwrap(), 3.0);
        let third = 1.0 / 3.0;
        assert!((weighted_total([&a, &b, &c], [third; 3]).unwrap().item().unwrap() - 6.0).abs() < 1e-12);
        let sched = LossSchedule::default();
        let mut prev = total_loss(&a, &b, &c, 0, &sched).unwrap().item().unwrap();
        assert!((prev - 3.0).abs() < 0.2);
        for t in 1..=250 {
            let v = total_loss(&a, &b, &c, t, &sched).unwrap().item().unwrap();
            assert!(v >= prev - 1e-12, "epoch {t}");
            prev = v;
        }
        assert!(prev > 7.0);
        let bad = Tensor::<f64>::new(vec![f64::NAN], &[]);
        if let Ok(bad) = bad {
            assert!(matches!(weighted_total([&a, &bad, &c], [1.0; 3]), Err(Error::NonFiniteLoss("L_rec_fm"))));
        }
    }

    #[test]
    fn loss_modes() {
        let s = LossSchedule::default();
        assert_eq!(LossMode::Constant.weights(3, &s), Some([1.0; 3]));
        assert_eq!(LossMode::Uncertainty.weights(3, &s), None);
        assert_eq!(LossMode::FmOnly.weights(100, &s), Some([0.0, 1.0, 0.0]));
        assert_eq!(LossMode::FmIm.weights(100, &s), Some([0.0, 1.0, 1.0]));
        let w = LossMode::ClsFm.weights(100, &s).unwrap();
        assert_eq!(w[2], 0.0);
        assert!((w[0] + w[1] - 1.0).abs() < 1e-12);
        for m in LossMode::ALL {
            assert_eq!(m.name().parse::<LossMode>().unwrap(), m);
        }
        assert!("bogus".parse::<LossMode>().is_err());
    }

    #[test]
    fn uncertainty_loss() {
        let s = |v: f64| Tensor::<f64>::scalar(v).unwrap();
        let (a, b, c) = (s(0.5), s(2.0), s(4.0));
        let u = UncertaintyParams::<f64>::new().unwrap();
        let l = uncertainty_total_loss([&a, &b, &c], &u, [true; 3]).unwrap();
        assert!((l.item().unwrap() - 6.5).abs() < 1e-12);
        l.backward().unwrap();
        // d/ds (L e^{-s} + s) at s = 0 is 1 − L: σ² grows for L > 1 and shrinks for L < 1.
        let g = u.log_var.grad().unwrap();
        for (gi, li) in g.iter().zip([0.5, 2.0, 4.0]) {
            assert!((gi - (1.0 - li)).abs() < 1e-12);
        }
        let lv = Tensor::<f64>::from_f64(&[0.3, -0.7, 1.1], &[3]).unwrap();
        let r = check_gradients(&[lv], 1e-6, |t| {
            uncertainty_total_loss([&a, &b, &c], &UncertaintyParams { log_var: t[0].clone() }, [true; 3])
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
        let partial = uncertainty_total_loss([&a, &b, &c], &UncertaintyParams::new().unwrap(), [false, true, false]).unwrap();
        assert!((partial.item().unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn uncertainty_stationary_point() {
        // L/σ² + log σ² is minimized at σ² = L.
        for l in [0.1, 1.0, 3.7] {
            let f = |s: f64| l * (-s).exp() + s;
            let s = f64::ln(l);
            assert!(f(s) <= f(s + 1e-3) && f(s) <= f(s - 1e-3));
        }
    }

    proptest! {
        #[test]
        fn schedule_sums_to_one(a1 in 0.0f64..2.0, b1 in 0.0f64..2.0, c1 in 0.0f64..500.0,
                                c2 in 0.0f64..500.0, c3 in 0.0f64..500.0, t in 0usize..=250) {
            let s = LossSchedule {
                alpha1: Logistic { a: a1 + 0.01, b: b1, c: c1 },
                alpha2: Logistic { a: 0.0, b: 1.0, c: c2 },
                alpha3: Logistic { a: 0.0, b: 1.0, c: c3 },
                ..Default::default()
            };
            let a = alpha_schedule(t, &s);
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn rec_loss_nonnegative(seed in 0u64..1000) {
            let x = rand(&[1, 1, 6, 6], seed);
            let y = rand(&[1, 1, 6, 6], seed + 1);
            prop_assert!(rec_loss(&x, &y, &RecLossConfig::features()).unwrap().item().unwrap() >= 0.0);
        }
    }
}
