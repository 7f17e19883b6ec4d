//! Frozen VGG19-prefix feature extractor and multiscale feature maps.

use std::path::Path;

use crate::container::Container;
use crate::error::{Error, Result};
use crate::nn::{bilinear_resize, conv2d, max_pool2d, Conv2dParams};
use crate::tensor::init::{derive_seed, seeded_init, InitKind};
use crate::tensor::{no_grad, Element, Tensor};

/// Output widths of the first eight VGG19 convolutions.
pub const VGG19_WIDTHS: [usize; 8] = [64, 64, 128, 128, 256, 256, 256, 256];
/// 1-based indices of the convolutions whose ReLU outputs are tapped.
pub const TAP_LAYERS: [usize; 4] = [1, 3, 5, 8];
/// Max pooling follows these 1-based convolutions.
pub const POOL_AFTER: [usize; 2] = [2, 4];

/// Receptive field (in input pixels) of each tap for 3×3 stride-1 convs and
/// 2×2 stride-2 pools.
pub fn tap_receptive_fields() -> [usize; 4] {
    let (mut rf, mut jump) = (1usize, 1usize);
    let mut out = [0; 4];
    let mut t = 0;
    for layer in 1..=8 {
        rf += 2 * jump;
        if TAP_LAYERS.contains(&layer) {
            out[t] = rf;
            t += 1;
        }
        if POOL_AFTER.contains(&layer) {
            rf += jump;
            jump *= 2;
        }
    }
    out
}

/// Frozen convolution stack. Parameters never require gradients.
#[derive(Clone, Debug)]
pub struct VggExtractor<T: Element> {
    pub convs: Vec<Conv2dParams<T>>,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl<T: Element> VggExtractor<T> {
    /// Seeded random weights (Kaiming fan-in, zero biases) for runs without
    /// pretrained weights. Normalization is mean 0.5, std 0.5.
    pub fn seeded(widths: [usize; 8], seed: u64) -> Result<Self> {
        let mut convs = Vec::with_capacity(8);
        let mut c_in = 3;
        for (i, &c_out) in widths.iter().enumerate() {
            let weight = seeded_init(InitKind::KaimingFanIn, &[c_out, c_in, 3, 3], derive_seed(seed, &format!("vgg.conv{}", i + 1)))?;
            convs.push(Conv2dParams { weight, bias: Some(Tensor::zeros(&[c_out])?), stride: 1, padding: 1 });
            c_in = c_out;
        }
        Ok(VggExtractor { convs, mean: [0.5; 3], std: [0.5; 3] })
    }

    pub fn widths(&self) -> [usize; 8] {
        let mut w = [0; 8];
        for (slot, c) in w.iter_mut().zip(&self.convs) {
            *slot = c.weight.shape()[0];
        }
        w
    }

    /// Total channels of the multiscale map.
    pub fn feature_channels(&self) -> usize {
        let w = self.widths();
        TAP_LAYERS.iter().map(|&l| w[l - 1]).sum()
    }

    fn normalize(&self, im: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = im.dims4("vgg_forward_taps")?;
        if c != 3 {
            return Err(Error::shape("vgg_forward_taps", format!("expected 3 input channels, got {c}")));
        }
        let plane = h * w;
        let mut out = im.to_vec();
        for ni in 0..n {
            for ci in 0..3 {
                let (m, s) = (T::of(self.mean[ci]), T::of(1.0 / self.std[ci]));
                out[(ni * 3 + ci) * plane..][..plane].iter_mut().for_each(|v| *v = (*v - m) * s);
            }
        }
        Tensor::new(out, &[n, c, h, w])
    }

    /// ReLU activations of convolutions 1, 3, 5 and 8.
    pub fn forward_taps(&self, im: &Tensor<T>) -> Result<[Tensor<T>; 4]> {
        let (_, _, h, w) = im.dims4("vgg_forward_taps")?;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape("vgg_forward_taps", format!("input {h}×{w} is not divisible by 4")));
        }
        no_grad(|| {
            let mut x = self.normalize(im)?;
            let mut taps = Vec::with_capacity(4);
            for (i, conv) in self.convs.iter().enumerate().take(8) {
                let layer = i + 1;
                x = conv2d(&x, conv)?.relu()?;
                if TAP_LAYERS.contains(&layer) {
                    taps.push(x.clone());
                }
                if POOL_AFTER.contains(&layer) {
                    x = max_pool2d(&x)?;
                }
            }
            Ok(taps.try_into().expect("four taps"))
        })
    }

    /// Multiscale feature map `N × Σ tap widths × H/4 × W/4`.
    pub fn extract(&self, im: &Tensor<T>) -> Result<Tensor<T>> {
        let taps = self.forward_taps(im)?;
        no_grad(|| build_multiscale(&taps))
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        for (i, conv) in self.convs.iter().enumerate() {
            c.insert(&format!("conv{}.weight", i + 1), &conv.weight)?;
            if let Some(b) = &conv.bias {
                c.insert(&format!("conv{}.bias", i + 1), b)?;
            }
        }
        c.metadata.insert("mean".into(), serde_json::to_string(&self.mean)?);
        c.metadata.insert("std".into(), serde_json::to_string(&self.std)?);
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let mut convs = Vec::with_capacity(8);
        let mut c_in = 3;
        for i in 1..=8 {
            let name = format!("conv{i}.weight");
            let weight: Tensor<T> = c.get(&name)?.detach();
            match *weight.shape() {
                [c_out, ci, 3, 3] if ci == c_in => {
                    let bias = c.get_shaped::<T>(&format!("conv{i}.bias"), &[c_out])?;
                    convs.push(Conv2dParams { weight, bias: Some(bias), stride: 1, padding: 1 });
                    c_in = c_out;
                }
                ref s => {
                    return Err(Error::shape("load_named_tensors", format!("'{name}' has shape {s:?}, expected [_, {c_in}, 3, 3]")))
                }
            }
        }
        let triple = |key: &str| -> Result<[f64; 3]> {
            let raw = c.metadata.get(key).ok_or_else(|| Error::Format(format!("metadata '{key}' is missing")))?;
            serde_json::from_str(raw).map_err(|e| Error::Format(format!("metadata '{key}': {e}")))
        };
        let (mean, std) = (triple("mean")?, triple("std")?);
        if std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Format(format!("normalization std must be positive, got {std:?}")));
        }
        Ok(VggExtractor { convs, mean, std })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Resizes each tap bilinearly to the grid of the third tap and concatenates
/// them along channels in tap order.
pub fn build_multiscale<T: Element>(taps: &[Tensor<T>]) -> Result<Tensor<T>> {
    const OP: &str = "build_multiscale";
    if taps.len() != 4 {
        return Err(Error::shape(OP, format!("expected 4 taps, got {}", taps.len())));
    }
    let (n, _, h, w) = taps[2].dims4(OP)?;
    let mut parts = Vec::with_capacity(4);
    for (i, t) in taps.iter().enumerate() {
        let (tn, _, th, tw) = t.dims4(OP)?;
        let scale = [4, 2, 1, 1][i];
        if tn != n || th != h * scale || tw != w * scale {
            return Err(Error::shape(OP, format!("tap {} has shape {:?}, inconsistent with tap 3 {:?}", i + 1, t.shape(), taps[2].shape())));
        }
        parts.push(bilinear_resize(t, h, w)?);
    }
    Tensor::concat(&parts, 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn receptive_fields_follow_the_pool_plan() {
        assert_eq!(tap_receptive_fields(), [3, 10, 24, 48]);
    }

    #[test]
    fn tap_shapes_small_widths() {
        let vgg = VggExtractor::<f32>::seeded([4, 4, 6, 6, 8, 8, 8, 8], 1).unwrap();
        let im: Tensor<f32> = seeded_init(InitKind::Uniform { low: 0.0, high: 1.0 }, &[2, 3, 16, 12], 2).unwrap();
        let taps = vgg.forward_taps(&im).unwrap();
        let shapes: Vec<Vec<usize>> = taps.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![2, 4, 16, 12], vec![2, 6, 8, 6], vec![2, 8, 4, 3], vec![2, 8, 4, 3]]);
        let fm = vgg.extract(&im).unwrap();
        assert_eq!(fm.shape(), &[2, 26, 4, 3]);
        assert_eq!(vgg.feature_channels(), 26);
        assert!(!fm.requires_grad());
        // Channels [0, 4) are the first tap resized.
        let r = bilinear_resize(&taps[0], 4, 3).unwrap();
        for ni in 0..2 {
            assert_eq!(&fm.data()[ni * 26 * 12..][..4 * 12], &r.data()[ni * 4 * 12..][..4 * 12]);
        }
        // Taps 3 and 4 pass through unchanged.
        assert_eq!(&fm.data()[(26 - 8) * 12..26 * 12], &taps[3].data()[..8 * 12]);
    }

    #[test]
    fn mean_image_with_zero_biases_gives_zero_taps() {
        let vgg = VggExtractor::<f64>::seeded([4, 4, 4, 4, 4, 4, 4, 4], 3).unwrap();
        let im = Tensor::<f64>::full(&[1, 3, 8, 8], 0.5).unwrap();
        for t in vgg.forward_taps(&im).unwrap() {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn deterministic_and_round_trips() {
        let a = VggExtractor::<f32>::seeded([4, 4, 6, 6, 8, 8, 8, 8], 9).unwrap();
        let b = VggExtractor::<f32>::seeded([4, 4, 6, 6, 8, 8, 8, 8], 9).unwrap();
        let im: Tensor<f32> = seeded_init(InitKind::Uniform { low: 0.0, high: 1.0 }, &[1, 3, 8, 8], 4).unwrap();
        assert_eq!(a.extract(&im).unwrap().data(), b.extract(&im).unwrap().data());
        assert_eq!(a.extract(&im).unwrap().data(), a.extract(&im).unwrap().data());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vgg.ntc");
        a.save(&path).unwrap();
        let c = VggExtractor::<f32>::load(&path).unwrap();
        for (x, y) in a.convs.iter().zip(&c.convs) {
            assert_eq!(x.weight.data(), y.weight.data());
            assert_eq!(x.bias.as_ref().unwrap().data(), y.bias.as_ref().unwrap().data());
            assert!(!y.weight.requires_grad());
        }
        assert_eq!(c.mean, [0.5; 3]);
    }

    #[test]
    fn missing_layer_is_named() {
        let a = VggExtractor::<f32>::seeded([4; 8], 1).unwrap();
        let full = a.to_container().unwrap();
        let mut partial = Container::new();
        partial.metadata = full.metadata.clone();
        for name in full.names().filter(|n| *n != "conv5.weight") {
            partial.insert_entry(name, full.entry(name).unwrap().clone()).unwrap();
        }
        match VggExtractor::<f32>::from_container(&partial) {
            Err(Error::MissingTensor(n)) => assert_eq!(n, "conv5.weight"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_bad_input() {
        let vgg = VggExtractor::<f32>::seeded([4; 8], 1).unwrap();
        assert!(vgg.forward_taps(&Tensor::zeros(&[1, 1, 8, 8]).unwrap()).is_err());
        assert!(vgg.forward_taps(&Tensor::zeros(&[1, 3, 10, 8]).unwrap()).is_err());
    }
}
