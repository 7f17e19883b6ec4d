//! Anomaly maps from feature reconstructions, their post-processing into
//! image-sized heatmaps, scoring, and ROC-AUC.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{bilinear_resize, gaussian_blur3x3};
use crate::tensor::{no_grad, Element, ReduceOp, Tensor};

/// Per-channel squared reconstruction error, same shape as the inputs.
pub fn anomaly_map_channels<T: Element>(fm: &Tensor<T>, fm_hat: &Tensor<T>) -> Result<Tensor<T>> {
    if fm.shape() != fm_hat.shape() {
        return Err(Error::shape("anomaly_map_channels", format!("{:?} vs {:?}", fm.shape(), fm_hat.shape())));
    }
    let d = fm.data().iter().zip(fm_hat.data()).map(|(&a, &b)| (a - b) * (a - b)).collect();
    Tensor::new(d, fm.shape())
}

/// Mean training anomaly map used to normalize each channel.
#[derive(Clone, Debug)]
pub struct Normalizer<T: Element> {
    /// `C×H×W`.
    pub mean_map: Tensor<T>,
    pub eps: f64,
}

pub const NORMALIZER_EPS: f64 = 1e-8;

/// Streaming mean over per-sample maps, accumulated in f64.
#[derive(Clone, Debug, Default)]
pub struct NormalizerAccumulator {
    sum: Vec<f64>,
    shape: Vec<usize>,
    count: usize,
}

impl NormalizerAccumulator {
    /// Adds every sample of an `N×C×H×W` batch of per-channel maps.
    pub fn add<T: Element>(&mut self, maps: &Tensor<T>) -> Result<()> {
        let (n, c, h, w) = maps.dims4("fit_normalizer")?;
        let per = c * h * w;
        if self.count == 0 {
            self.sum = vec![0.0; per];
            self.shape = vec![c, h, w];
        } else if self.shape != [c, h, w] {
            return Err(Error::shape("fit_normalizer", format!("sample shape {:?} vs {:?}", [c, h, w], self.shape)));
        }
        for s in maps.data().chunks(per) {
            for (acc, v) in self.sum.iter_mut().zip(s) {
                *acc += v.as_f64();
            }
        }
        self.count += n;
        Ok(())
    }

    pub fn finish<T: Element>(self) -> Result<Normalizer<T>> {
        if self.count == 0 {
            return Err(Error::Eval("normalizer needs at least one training sample".into()));
        }
        let k = self.count as f64;
        let mean: Vec<f64> = self.sum.iter().map(|s| s / k).collect();
        Ok(Normalizer { mean_map: Tensor::from_f64(&mean, &self.shape)?, eps: NORMALIZER_EPS })
    }
}

/// Mean of the per-channel maps over all training samples.
pub fn fit_normalizer<T: Element>(maps: &[Tensor<T>]) -> Result<Normalizer<T>> {
    let mut acc = NormalizerAccumulator::default();
    for m in maps {
        acc.add(m)?;
    }
    acc.finish()
}

impl<T: Element> Normalizer<T> {
    /// `map / (mean_map + ε)`, per channel and position.
    pub fn normalize(&self, maps: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, c, h, w) = maps.dims4("normalize")?;
        if self.mean_map.shape() != [c, h, w] {
            return Err(Error::shape("normalize", format!("maps {:?} vs normalizer {:?}", maps.shape(), self.mean_map.shape())));
        }
        let eps = T::of(self.eps);
        let m = self.mean_map.data();
        let d = maps.data().chunks(m.len()).flat_map(|s| s.iter().zip(m).map(move |(&v, &mu)| v / (mu + eps))).collect();
        Tensor::new(d, maps.shape())
    }
}

/// Normalize, average over channels, 3×3 Gaussian blur (σ = 1, reflect),
/// bilinear upsampling to `out×out`. Returns `N×1×out×out`.
pub fn postprocess<T: Element>(per_channel: &Tensor<T>, norm: &Normalizer<T>, out: usize) -> Result<Tensor<T>> {
    no_grad(|| {
        let avg = norm.normalize(per_channel)?.reduce(ReduceOp::Mean, &[1], true)?;
        bilinear_resize(&gaussian_blur3x3(&avg, 1.0)?, out, out)
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMode {
    #[default]
    Mean,
    Max,
}

/// One score per sample of an `N×1×H×W` processed map.
pub fn image_scores<T: Element>(processed: &Tensor<T>, mode: ScoreMode) -> Result<Vec<f64>> {
    let (n, _, _, _) = processed.dims4("image_score")?;
    let per = processed.numel() / n;
    Ok(processed
        .data()
        .chunks(per)
        .map(|s| match mode {
            ScoreMode::Mean => s.iter().map(|v| v.as_f64()).sum::<f64>() / per as f64,
            ScoreMode::Max => s.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max),
        })
        .collect())
}

pub fn image_score(processed: &[f64], mode: ScoreMode) -> f64 {
    match mode {
        ScoreMode::Mean => processed.iter().sum::<f64>() / processed.len() as f64,
        ScoreMode::Max => processed.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Softmax probability of the "augmented" class for each row of `N×2` logits.
pub fn classifier_scores<T: Element>(logits: &Tensor<T>) -> Result<Vec<f64>> {
    if logits.rank() != 2 || logits.shape()[1] != 2 {
        return Err(Error::shape("classifier_score", format!("expected N×2, got {:?}", logits.shape())));
    }
    Ok(logits
        .data()
        .chunks(2)
        .map(|r| {
            let d = r[0].as_f64() - r[1].as_f64();
            1.0 / (1.0 + d.exp())
        })
        .collect())
}

/// Area under the ROC curve via the rank-sum statistic; ties count one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Eval(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Eval(format!("score {s} is not comparable")));
    }
    let n1 = labels.iter().filter(|&&l| l).count();
    let n0 = labels.len() - n1;
    if n0 == 0 || n1 == 0 {
        return Err(Error::Eval(format!("ROC-AUC needs both classes, got {n0} negatives and {n1} positives")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j share their average.
        let avg = (i + 1 + j) as f64 / 2.0;
        rank_sum += avg * order[i..j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j;
    }
    let u = rank_sum - (n1 * (n1 + 1)) as f64 / 2.0;
    Ok(u / (n0 as f64 * n1 as f64))
}

/// Nearest-neighbour resize of an `H×W` mask followed by a 0.5 threshold.
pub fn resize_mask_nearest(mask: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<bool> {
    (0..out_h)
        .flat_map(|y| {
            let sy = (y * h / out_h).min(h - 1);
            (0..out_w).map(move |x| mask[sy * w + (x * w / out_w).min(w - 1)] >= 0.5)
        })
        .collect()
}

/// Threshold-free metrics of one evaluation pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Image-level AUC from processed-map scores.
    pub image_auc: f64,
    /// Image-level AUC from the classifier's probability of class 1.
    pub image_auc_classifier: f64,
    pub pixel_auc: Option<f64>,
    pub n_normal: usize,
    pub n_anomalous: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::init::{seeded_init, InitKind};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
        seeded_init(InitKind::Uniform { low: 0.0, high: 1.0 }, shape, seed).unwrap()
    }

    pub(crate) fn pair_count_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] && !labels[j] {
                    den += 1.0;
                    num += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
                }
            }
        }
        num / den
    }

    #[test]
    fn map_identity_and_locality() {
        let fm = rand(&[1, 4, 5, 5], 1);
        assert!(anomaly_map_channels(&fm, &fm).unwrap().data().iter().all(|&v| v == 0.0));
        let mut d = fm.to_vec();
        d[2 * 25 + 7] += 0.3;
        let hat = Tensor::new(d, &[1, 4, 5, 5]).unwrap();
        let m = anomaly_map_channels(&fm, &hat).unwrap();
        for (i, &v) in m.data().iter().enumerate() {
            if i == 57 {
                assert!((v - 0.09).abs() < 1e-12);
            } else {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn channel_sum_is_squared_l2_norm() {
        let fm = rand(&[1, 6, 3, 3], 2);
        let hat = rand(&[1, 6, 3, 3], 3);
        let m = anomaly_map_channels(&fm, &hat).unwrap();
        for p in 0..9 {
            let norm = (0..6).map(|c| (fm.data()[c * 9 + p] - hat.data()[c * 9 + p]).powi(2)).sum::<f64>().sqrt();
            let from_map = (0..6).map(|c| m.data()[c * 9 + p]).sum::<f64>().sqrt();
            assert!((norm - from_map).abs() < 1e-12);
        }
    }

    #[test]
    fn normalizer_fit() {
        let a = rand(&[1, 2, 4, 4], 4);
        let n = fit_normalizer(std::slice::from_ref(&a)).unwrap();
        assert_eq!(n.mean_map.data(), a.data());
        let maps: Vec<Tensor<f64>> = (0..5).map(|s| rand(&[1, 2, 4, 4], 10 + s)).collect();
        let fwd = fit_normalizer(&maps).unwrap();
        let mut rev = maps.clone();
        rev.reverse();
        let back = fit_normalizer(&rev).unwrap();
        for (x, y) in fwd.mean_map.data().iter().zip(back.mean_map.data()) {
            assert!((x - y).abs() < 1e-15);
        }
        // Averaging the normalized training maps gives ones.
        let mut acc = vec![0.0; 32];
        for m in &maps {
            for (a, v) in acc.iter_mut().zip(fwd.normalize(m).unwrap().data()) {
                *a += v / 5.0;
            }
        }
        assert!(acc.iter().all(|v| (v - 1.0).abs() < 1e-6));
        assert!(fit_normalizer::<f64>(&[]).is_err());
    }

    #[test]
    fn postprocess_self_normalization_and_mean() {
        let mean = rand(&[1, 3, 8, 8], 5);
        let norm = fit_normalizer(std::slice::from_ref(&mean)).unwrap();
        let p = postprocess(&mean, &norm, 8).unwrap();
        assert!(p.data().iter().all(|v| (v - 1.0).abs() < 1e-6));
        let m = rand(&[1, 1, 16, 16], 6);
        let blurred = gaussian_blur3x3(&m, 1.0).unwrap();
        let (a, b) = (m.data().iter().sum::<f64>() / 256.0, blurred.data().iter().sum::<f64>() / 256.0);
        assert!((a - b).abs() < 1e-4);
    }

    #[test]
    fn defect_locality() {
        let c = 4;
        let base = Tensor::<f64>::full(&[1, c, 16, 16], 0.1).unwrap();
        let norm = fit_normalizer(std::slice::from_ref(&base)).unwrap();
        for &(i, j) in &[(3usize, 5usize), (8, 8), (0, 15), (12, 1)] {
            let mut d = base.to_vec();
            for ch in 0..c {
                d[(ch * 16 + i) * 16 + j] = 2.0;
            }
            let p = postprocess(&Tensor::new(d, &[1, c, 16, 16]).unwrap(), &norm, 64).unwrap();
            let (arg, _) = p.data().iter().enumerate().fold((0, f64::MIN), |b, (k, &v)| if v > b.1 { (k, v) } else { b });
            let (y, x) = (arg / 64, arg % 64);
            assert!((4 * i..4 * i + 4).contains(&y) && (4 * j..4 * j + 4).contains(&x), "({i},{j}) -> ({y},{x})");
        }
    }

    #[test]
    fn channel_permutation_invariance() {
        let m = rand(&[1, 5, 6, 6], 7);
        let n = fit_normalizer(&[rand(&[1, 5, 6, 6], 8)]).unwrap();
        let perm = [3, 0, 4, 1, 2];
        let permute = |t: &Tensor<f64>, lead: usize| {
            let d: Vec<f64> = perm.iter().flat_map(|&c| t.data()[c * 36..][..36].to_vec()).collect();
            let shape: Vec<usize> = if lead == 1 { vec![1, 5, 6, 6] } else { vec![5, 6, 6] };
            Tensor::new(d, &shape).unwrap()
        };
        let np = Normalizer { mean_map: permute(&n.mean_map, 0), eps: n.eps };
        let a = postprocess(&m, &n, 12).unwrap();
        let b = postprocess(&permute(&m, 1), &np, 12).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn larger_defect_never_lowers_score() {
        let fm = rand(&[1, 3, 8, 8], 9);
        let hat = rand(&[1, 3, 8, 8], 10);
        let norm = fit_normalizer(&[anomaly_map_channels(&fm, &hat).unwrap()]).unwrap();
        let mut prev = f64::MIN;
        for k in 0..8 {
            let mut d = fm.to_vec();
            // Grow the error in the direction it already points.
            d[64 + 20] += (fm.data()[84] - hat.data()[84]).signum() * k as f64 * 0.5;
            let map = anomaly_map_channels(&Tensor::new(d, &[1, 3, 8, 8]).unwrap(), &hat).unwrap();
            let s = image_scores(&postprocess(&map, &norm, 32).unwrap(), ScoreMode::Mean).unwrap()[0];
            assert!(s >= prev - 1e-12);
            prev = s;
        }
    }

    #[test]
    fn scores() {
        assert_eq!(image_score(&[0.0; 16], ScoreMode::Mean), 0.0);
        assert_eq!(image_score(&[0.0, 3.0, 1.0], ScoreMode::Max), 3.0);
        let l = Tensor::<f64>::from_f64(&[0.0, 0.0, 50.0, -50.0, -3.0, 2.0], &[3, 2]).unwrap();
        let s = classifier_scores(&l).unwrap();
        assert!((s[0] - 0.5).abs() < 1e-12);
        assert!(s.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(s[2] > s[0] && s[0] > s[1]);
    }

    #[test]
    fn auc_basics() {
        let s = [0.9, 0.8, 0.1, 0.2];
        let l = [true, true, false, false];
        assert_eq!(roc_auc(&s, &l).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.3; 4], &l).unwrap(), 0.5);
        assert!(roc_auc(&s, &[true; 4]).is_err());
        assert!(roc_auc(&s, &[false; 4]).is_err());
        assert!(roc_auc(&s[..3], &l).is_err());
    }

    #[test]
    fn auc_matches_pair_count_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let n = rng.random_range(2..=50);
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            labels[0] = true;
            labels[1] = false;
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64 / 4.0).collect();
            assert_eq!(roc_auc(&scores, &labels).unwrap(), pair_count_auc(&scores, &labels));
        }
    }

    #[test]
    fn mask_resize() {
        let m = [0.0, 1.0, 0.0, 0.6];
        assert_eq!(resize_mask_nearest(&m, 2, 2, 4, 4), vec![
            false, false, true, true, false, false, true, true, false, false, true, true, false, false, true, true
        ]);
    }

    proptest! {
        #[test]
        fn auc_complement(scores in proptest::collection::hash_set(-1000i32..1000, 4..40), seed in 0u64..100) {
            let scores: Vec<f64> = scores.into_iter().map(|s| s as f64 / 7.0).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut labels: Vec<bool> = scores.iter().map(|_| rng.random_bool(0.5)).collect();
            labels[0] = true;
            labels[1] = false;
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            let a = roc_auc(&scores, &labels).unwrap();
            prop_assert!((a + roc_auc(&neg, &labels).unwrap() - 1.0).abs() < 1e-12);
            let mono: Vec<f64> = scores.iter().map(|s| 2.0 * s + s.powi(3) / 100.0 + 1.0).collect();
            prop_assert_eq!(a, roc_auc(&mono, &labels).unwrap());
        }
    }
}
