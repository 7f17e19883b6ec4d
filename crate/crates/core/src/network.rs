//! The halo auto-encoder: convolutional head, halo-attention encoder and
//! transposed decoder, image reconstruction head and proxy classifier.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::VggExtractor;
use crate::halo::{halo_multihead_attention, HaloConfig, HaloParams};
use crate::nn::{nearest_upsample, BatchNorm2d, Conv2d, Linear, Module, NormMode, Slot};
use crate::tensor::{Element, ReduceOp, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub n_blocks: usize,
    pub out_channels: usize,
    /// Kernel of the block's second convolution (1, 3 or 5).
    pub kernel: usize,
}

impl StageSpec {
    pub fn new(n_blocks: usize, out_channels: usize, kernel: usize) -> Self {
        StageSpec { n_blocks, out_channels, kernel }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Side of the (square) input image.
    pub image_size: usize,
    /// Width of the multiscale feature map.
    pub feature_channels: usize,
    pub head_kernel: usize,
    pub encoder: Vec<StageSpec>,
    pub decoder: Vec<StageSpec>,
    /// Output widths of the image head convolutions; the last must be 3.
    pub image_head: Vec<usize>,
    pub block: usize,
    pub halo: usize,
    pub heads: usize,
    pub mask_padding: bool,
    /// Classify the channel-averaged image instead of the flattened one.
    pub classifier_pooled: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            image_size: 256,
            feature_channels: 704,
            head_kernel: 5,
            encoder: vec![StageSpec::new(1, 234, 3), StageSpec::new(1, 117, 3), StageSpec::new(1, 58, 5), StageSpec::new(1, 29, 5)],
            decoder: vec![
                StageSpec::new(1, 29, 3),
                StageSpec::new(1, 55, 3),
                StageSpec::new(1, 118, 3),
                StageSpec::new(1, 237, 5),
                StageSpec::new(1, 704, 1),
            ],
            image_head: vec![256, 128, 64, 32, 3],
            block: 12,
            halo: 2,
            heads: 1,
            mask_padding: false,
            classifier_pooled: false,
        }
    }
}

impl NetworkConfig {
    /// Side of the multiscale feature map (a quarter of the image).
    pub fn feature_size(&self) -> usize {
        self.image_size / 4
    }

    /// Side of the encoded map after the valid head convolution.
    pub fn encoded_size(&self) -> usize {
        (self.feature_size() + 1).saturating_sub(self.head_kernel)
    }

    /// Widths after the head and after each encoder stage.
    pub fn encoder_channels(&self) -> Vec<usize> {
        std::iter::once(self.feature_channels).chain(self.encoder.iter().map(|s| s.out_channels)).collect()
    }

    /// Widths entering the decoder and after each decoder stage.
    pub fn decoder_channels(&self) -> Vec<usize> {
        let start = self.encoder.last().map_or(self.feature_channels, |s| s.out_channels);
        std::iter::once(start).chain(self.decoder.iter().map(|s| s.out_channels)).collect()
    }

    /// Every violated constraint, so callers can report them together.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.image_size == 0 || !self.image_size.is_multiple_of(4) {
            p.push(format!("network.image_size {} must be a positive multiple of 4", self.image_size));
        }
        if self.head_kernel.is_multiple_of(2) || self.head_kernel == 0 {
            p.push(format!("network.head_kernel {} must be odd", self.head_kernel));
        }
        let enc = self.encoded_size();
        if enc == 0 {
            p.push("network.head_kernel is larger than the feature map".into());
        } else if self.block == 0 || !enc.is_multiple_of(self.block) {
            p.push(format!("network.block {} must divide the encoded map side {enc}", self.block));
        }
        if self.heads == 0 {
            p.push("network.heads must be positive".into());
        }
        if self.encoder.is_empty() || self.decoder.is_empty() {
            p.push("network.encoder and network.decoder need at least one stage".into());
        }
        for (side, stages) in [("encoder", &self.encoder), ("decoder", &self.decoder)] {
            for (i, s) in stages.iter().enumerate() {
                if s.n_blocks == 0 || s.out_channels == 0 {
                    p.push(format!("network.{side}[{i}] needs positive n_blocks and out_channels"));
                }
                if s.kernel % 2 == 0 {
                    p.push(format!("network.{side}[{i}].kernel {} must be odd", s.kernel));
                }
                if self.heads > 0 && s.out_channels % self.heads != 0 {
                    p.push(format!("network.heads {} does not divide network.{side}[{i}] width {}", self.heads, s.out_channels));
                }
            }
        }
        if self.decoder.last().map(|s| s.out_channels) != Some(self.feature_channels) {
            p.push(format!("network.decoder must end at feature_channels {}", self.feature_channels));
        }
        if self.image_head.last() != Some(&3) || self.image_head.is_empty() {
            p.push("network.image_head must end with 3 channels".into());
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() { Ok(()) } else { Err(Error::Config(p)) }
    }
}

/// One block: 1×1 conv + BN → attention → ReLU → k×k conv + BN, added to
/// an (optionally projected) shortcut and passed through ReLU.
#[derive(Clone, Debug)]
pub struct HaloBlock<T: Element> {
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm2d<T>,
    pub attn_cfg: HaloConfig,
    pub attn: HaloParams<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm2d<T>,
    pub shortcut: Option<(Conv2d<T>, BatchNorm2d<T>)>,
}

impl<T: Element> HaloBlock<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(name: &str, c_in: usize, c_out: usize, kernel: usize, transposed: bool, cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        let attn_cfg = HaloConfig::new(c_out, cfg.block, cfg.halo).with_heads(cfg.heads)?.with_mask(cfg.mask_padding);
        let shortcut = if c_in != c_out {
            Some((
                Conv2d::new(&format!("{name}.shortcut"), c_in, c_out, 1, 1, 0, false, transposed, seed)?,
                BatchNorm2d::new(c_out)?,
            ))
        } else {
            None
        };
        Ok(HaloBlock {
            conv1: Conv2d::new(&format!("{name}.conv1"), c_in, c_out, 1, 1, 0, false, transposed, seed)?,
            bn1: BatchNorm2d::new(c_out)?,
            attn: HaloParams::new(&format!("{name}.attn"), &attn_cfg, seed)?,
            attn_cfg,
            conv2: Conv2d::new(&format!("{name}.conv2"), c_out, c_out, kernel, 1, kernel / 2, false, transposed, seed)?,
            bn2: BatchNorm2d::new(c_out)?,
            shortcut,
        })
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: NormMode) -> Result<Tensor<T>> {
        let h = self.bn1.forward(&self.conv1.forward(x)?, mode)?;
        let h = halo_multihead_attention(&h, &self.attn_cfg, &self.attn)?.relu()?;
        let h = self.bn2.forward(&self.conv2.forward(&h)?, mode)?;
        let skip = match self.shortcut.as_mut() {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, mode)?,
            None => x.clone(),
        };
        h.add(&skip)?.relu()
    }
}

impl<T: Element> Module<T> for HaloBlock<T> {
    fn slots<'a>(&'a mut self, prefix: &str, out: &mut Vec<Slot<'a, T>>) {
        let j = |s: &str| crate::nn::join(prefix, s);
        self.conv1.slots(&j("conv1"), out);
        self.bn1.slots(&j("bn1"), out);
        self.attn.slots(&j("attn"), out);
        self.conv2.slots(&j("conv2"), out);
        self.bn2.slots(&j("bn2"), out);
        if let Some((conv, bn)) = self.shortcut.as_mut() {
            conv.slots(&j("shortcut.conv"), out);
            bn.slots(&j("shortcut.bn"), out);
        }
    }
}

/// All four pipeline outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput<T: Element> {
    pub fm: Tensor<T>,
    pub fm_enc: Tensor<T>,
    pub fm_hat: Tensor<T>,
    pub im_hat: Tensor<T>,
    pub logits: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct HaloAE<T: Element> {
    pub config: NetworkConfig,
    pub head: Conv2d<T>,
    pub head_bn: BatchNorm2d<T>,
    pub encoder: Vec<HaloBlock<T>>,
    pub decoder: Vec<HaloBlock<T>>,
    /// Transposed mirror of the head restoring the feature-map extent.
    pub tail: Conv2d<T>,
    pub image_head: Vec<Conv2d<T>>,
    pub classifier: Linear<T>,
}

fn build_stages<T: Element>(prefix: &str, c_in: usize, stages: &[StageSpec], transposed: bool, cfg: &NetworkConfig, seed: u64) -> Result<(Vec<HaloBlock<T>>, usize)> {
    let mut blocks = Vec::new();
    let mut c = c_in;
    for (si, s) in stages.iter().enumerate() {
        for bi in 0..s.n_blocks {
            let name = format!("{prefix}.{si}.{bi}");
            blocks.push(HaloBlock::new(&name, c, s.out_channels, s.kernel, transposed, cfg, seed)?);
            c = s.out_channels;
        }
    }
    Ok((blocks, c))
}

impl<T: Element> HaloAE<T> {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let f = config.feature_channels;
        let (encoder, enc_c) = build_stages("encoder", f, &config.encoder, false, &config, seed)?;
        let (decoder, dec_c) = build_stages("decoder", enc_c, &config.decoder, true, &config, seed)?;
        let k = config.head_kernel;
        let mut image_head = Vec::with_capacity(config.image_head.len());
        let mut c = f;
        for (i, &c_out) in config.image_head.iter().enumerate() {
            image_head.push(Conv2d::new(&format!("image_head.{i}"), c, c_out, 3, 1, 1, true, false, seed)?);
            c = c_out;
        }
        let s = config.image_size;
        let cls_in = if config.classifier_pooled { 3 } else { 3 * s * s };
        Ok(HaloAE {
            head: Conv2d::new("head", f, f, k, 1, 0, false, false, seed)?,
            head_bn: BatchNorm2d::new(f)?,
            encoder,
            tail: Conv2d::new("tail", dec_c, f, k, 1, 0, true, true, seed)?,
            decoder,
            image_head,
            classifier: Linear::new("classifier", cls_in, 2, seed)?,
            config,
        })
    }

    fn check_features(&self, op: &'static str, fm: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = fm.dims4(op)?;
        let s = self.config.feature_size();
        if (c, h, w) != (self.config.feature_channels, s, s) {
            return Err(Error::shape(op, format!("expected N×{}×{s}×{s}, got {:?}", self.config.feature_channels, fm.shape())));
        }
        Ok(())
    }

    /// Head output followed by every encoder block output.
    pub fn encode_stages(&mut self, fm: &Tensor<T>, mode: NormMode) -> Result<Vec<Tensor<T>>> {
        self.check_features("encode", fm)?;
        let mut x = self.head_bn.forward(&self.head.forward(fm)?, mode)?.relu()?;
        let mut out = vec![x.clone()];
        for b in &mut self.encoder {
            x = b.forward(&x, mode)?;
            out.push(x.clone());
        }
        Ok(out)
    }

    pub fn encode(&mut self, fm: &Tensor<T>, mode: NormMode) -> Result<Tensor<T>> {
        Ok(self.encode_stages(fm, mode)?.pop().expect("at least the head output"))
    }

    /// Input, every decoder block output, then the restored map.
    pub fn decode_stages(&mut self, enc: &Tensor<T>, mode: NormMode) -> Result<Vec<Tensor<T>>> {
        let (_, c, h, w) = enc.dims4("decode")?;
        let e = self.config.encoded_size();
        let c_enc = *self.config.decoder_channels().first().expect("non-empty");
        if (c, h, w) != (c_enc, e, e) {
            return Err(Error::shape("decode", format!("expected N×{c_enc}×{e}×{e}, got {:?}", enc.shape())));
        }
        let mut x = enc.clone();
        let mut out = vec![x.clone()];
        for b in &mut self.decoder {
            x = b.forward(&x, mode)?;
            out.push(x.clone());
        }
        out.push(self.tail.forward(&x)?);
        Ok(out)
    }

    pub fn decode(&mut self, enc: &Tensor<T>, mode: NormMode) -> Result<Tensor<T>> {
        Ok(self.decode_stages(enc, mode)?.pop().expect("restored map"))
    }

    /// Five 3×3 convolutions (ReLU between, linear last) and ×4 nearest upsampling.
    pub fn image_decoder(&self, fm_hat: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_features("image_decoder", fm_hat)?;
        let mut x = fm_hat.clone();
        let last = self.image_head.len() - 1;
        for (i, conv) in self.image_head.iter().enumerate() {
            x = conv.forward(&x)?;
            if i != last {
                x = x.relu()?;
            }
        }
        nearest_upsample(&x, 4)
    }

    /// Two logits per image: normal (0) vs. augmented (1).
    pub fn classify(&self, im_hat: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = im_hat.dims4("classify")?;
        let s = self.config.image_size;
        if (c, h, w) != (3, s, s) {
            return Err(Error::shape("classify", format!("expected N×3×{s}×{s}, got {:?}", im_hat.shape())));
        }
        let x = if self.config.classifier_pooled {
            im_hat.reduce(ReduceOp::Mean, &[2, 3], false)?
        } else {
            im_hat.reshape(&[n, 3 * h * w])?
        };
        self.classifier.forward(&x)
    }

    /// Everything downstream of the feature extractor.
    pub fn forward_features(&mut self, fm: &Tensor<T>, mode: NormMode) -> Result<ForwardOutput<T>> {
        let fm_enc = self.encode(fm, mode)?;
        let fm_hat = self.decode(&fm_enc, mode)?;
        let im_hat = self.image_decoder(&fm_hat)?;
        let logits = self.classify(&im_hat)?;
        Ok(ForwardOutput { fm: fm.clone(), fm_enc, fm_hat, im_hat, logits })
    }

    /// Extractor → encoder → decoder → image head → classifier.
    pub fn forward_full(&mut self, vgg: &VggExtractor<T>, im: &Tensor<T>, mode: NormMode) -> Result<ForwardOutput<T>> {
        let fm = vgg.extract(im)?;
        self.forward_features(&fm, mode)
    }
}

impl<T: Element> Module<T> for HaloAE<T> {
    fn slots<'a>(&'a mut self, prefix: &str, out: &mut Vec<Slot<'a, T>>) {
        let j = |s: &str| crate::nn::join(prefix, s);
        self.head.slots(&j("head"), out);
        self.head_bn.slots(&j("head_bn"), out);
        for (i, b) in self.encoder.iter_mut().enumerate() {
            b.slots(&j(&format!("encoder.{i}")), out);
        }
        for (i, b) in self.decoder.iter_mut().enumerate() {
            b.slots(&j(&format!("decoder.{i}")), out);
        }
        self.tail.slots(&j("tail"), out);
        for (i, c) in self.image_head.iter_mut().enumerate() {
            c.slots(&j(&format!("image_head.{i}")), out);
        }
        self.classifier.slots(&j("classifier"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::SlotKind;
    use crate::tensor::init::{seeded_init, InitKind};

    pub(crate) fn tiny_config() -> NetworkConfig {
        NetworkConfig {
            image_size: 32,
            feature_channels: 6,
            head_kernel: 5,
            encoder: vec![StageSpec::new(1, 4, 3), StageSpec::new(1, 3, 5)],
            decoder: vec![StageSpec::new(1, 3, 3), StageSpec::new(1, 6, 1)],
            image_head: vec![4, 3],
            block: 2,
            halo: 1,
            heads: 1,
            mask_padding: false,
            classifier_pooled: false,
        }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        seeded_init(InitKind::Uniform { low: 0.0, high: 1.0 }, shape, seed).unwrap()
    }

    #[test]
    fn default_trajectories() {
        let cfg = NetworkConfig::default();
        assert_eq!(cfg.encoder_channels(), vec![704, 234, 117, 58, 29]);
        assert_eq!(cfg.decoder_channels(), vec![29, 29, 55, 118, 237, 704]);
        assert_eq!(cfg.feature_size(), 64);
        assert_eq!(cfg.encoded_size(), 60);
        assert!(cfg.problems().is_empty(), "{:?}", cfg.problems());
    }

    #[test]
    fn problems_are_collected() {
        let mut cfg = tiny_config();
        cfg.block = 3;
        cfg.image_head = vec![4, 2];
        cfg.heads = 4;
        let p = cfg.problems();
        assert!(p.len() >= 3, "{p:?}");
    }

    #[test]
    fn shape_pipeline_tiny() {
        let mut net = HaloAE::<f64>::new(tiny_config(), 1).unwrap();
        let fm = random(&[2, 6, 8, 8], 2);
        let enc = net.encode_stages(&fm, NormMode::Train).unwrap();
        let shapes: Vec<Vec<usize>> = enc.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![2, 6, 4, 4], vec![2, 4, 4, 4], vec![2, 3, 4, 4]]);
        let dec = net.decode_stages(enc.last().unwrap(), NormMode::Train).unwrap();
        let shapes: Vec<Vec<usize>> = dec.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![2, 3, 4, 4], vec![2, 3, 4, 4], vec![2, 6, 4, 4], vec![2, 6, 8, 8]]);
        let im = net.image_decoder(dec.last().unwrap()).unwrap();
        assert_eq!(im.shape(), &[2, 3, 32, 32]);
        assert_eq!(net.classify(&im).unwrap().shape(), &[2, 2]);
    }

    #[test]
    fn image_decoder_upsamples_by_replication() {
        let net = HaloAE::<f64>::new(tiny_config(), 3).unwrap();
        let im = net.image_decoder(&random(&[1, 6, 8, 8], 4)).unwrap();
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    let v = im.data()[(c * 32 + y) * 32 + x];
                    assert_eq!(v, im.data()[(c * 32 + y / 4 * 4) * 32 + x / 4 * 4]);
                }
            }
        }
    }

    #[test]
    fn zero_classifier_returns_bias() {
        let mut net = HaloAE::<f64>::new(tiny_config(), 5).unwrap();
        net.classifier.weight = Tensor::zeros(&[2, 3 * 32 * 32]).unwrap();
        net.classifier.bias = Tensor::from_f64(&[0.3, -1.2], &[2]).unwrap();
        let logits = net.classify(&random(&[3, 3, 32, 32], 6)).unwrap();
        for row in logits.data().chunks(2) {
            assert_eq!(row, &[0.3, -1.2]);
        }
        let mut cfg = tiny_config();
        cfg.classifier_pooled = true;
        let net = HaloAE::<f64>::new(cfg, 5).unwrap();
        assert_eq!(net.classifier.weight.shape(), &[2, 3]);
        assert_eq!(net.classify(&random(&[3, 3, 32, 32], 6)).unwrap().shape(), &[3, 2]);
    }

    #[test]
    fn eval_mode_is_pure() {
        let mut net = HaloAE::<f64>::new(tiny_config(), 7).unwrap();
        let one = random(&[1, 6, 8, 8], 8);
        let two = Tensor::concat(&[one.clone(), one.clone()], 0).unwrap();
        let a = net.forward_features(&two, NormMode::Eval).unwrap();
        let b = net.forward_features(&two, NormMode::Eval).unwrap();
        assert_eq!(a.logits.data(), b.logits.data());
        let half = a.fm_enc.numel() / 2;
        assert_eq!(&a.fm_enc.data()[..half], &a.fm_enc.data()[half..]);
    }

    #[test]
    fn every_parameter_gets_a_gradient() {
        let mut net = HaloAE::<f64>::new(tiny_config(), 9).unwrap();
        let fm = random(&[2, 6, 8, 8], 10);
        let out = net.forward_features(&fm, NormMode::Train).unwrap();
        let loss = out
            .fm_hat
            .sub(&fm)
            .unwrap()
            .square()
            .unwrap()
            .mean_all()
            .unwrap()
            .add(&out.im_hat.square().unwrap().mean_all().unwrap())
            .unwrap()
            .add(&out.logits.square().unwrap().mean_all().unwrap())
            .unwrap();
        loss.backward().unwrap();
        for s in net.all_slots().into_iter().filter(|s| s.kind == SlotKind::Param) {
            let g = s.tensor.grad().unwrap_or_else(|| panic!("{} has no gradient", s.name));
            assert!(g.iter().any(|v| *v != 0.0), "{} has an all-zero gradient", s.name);
        }
    }

    #[test]
    fn parameter_count_is_stable() {
        let a = HaloAE::<f32>::new(tiny_config(), 1).unwrap().parameter_count();
        let b = HaloAE::<f32>::new(tiny_config(), 2).unwrap().parameter_count();
        assert_eq!(a, b);
    }
}
