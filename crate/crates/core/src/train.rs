//! Training, evaluation and single-image inference over a [`Model`], plus
//! checkpoint (de)serialization.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{color_jitter, cut_paste, epoch_seed, make_training_batch, CutPasteVariant};
use crate::config::{Config, DataSource};
use crate::container::Container;
use crate::data::{generate_synthetic_dataset, load_mvtec_category, save_heatmap_png, save_map_png16, Dataset};
use crate::error::{Error, Result};
use crate::eval::{
    anomaly_map_channels, classifier_scores, image_scores, postprocess, roc_auc, Metrics, Normalizer, NormalizerAccumulator,
};
use crate::features::VggExtractor;
use crate::losses::{cls_loss, rec_loss, uncertainty_total_loss, weighted_total, LossMode, UncertaintyParams};
use crate::network::{ForwardOutput, HaloAE};
use crate::nn::{load_module_from_container, module_to_container, Module, NormMode, Slot};
use crate::optim::{Adam, AdamConfig, Moments};
use crate::tensor::init::derive_seed;
use crate::tensor::{no_grad, Element, Tensor};

pub const CHECKPOINT_FORMAT: &str = "haloae-checkpoint-1";

/// Frozen extractor, trainable auto-encoder and (after training) the
/// normalizer fitted on the training set.
#[derive(Clone, Debug)]
pub struct Model<T: Element> {
    pub extractor: VggExtractor<T>,
    pub net: HaloAE<T>,
    pub uncertainty: UncertaintyParams<T>,
    pub normalizer: Option<Normalizer<T>>,
}

impl<T: Element> Module<T> for Model<T> {
    fn slots<'a>(&'a mut self, prefix: &str, out: &mut Vec<Slot<'a, T>>) {
        self.net.slots(&crate::nn::join(prefix, "net"), out);
        self.uncertainty.slots(&crate::nn::join(prefix, "uncertainty"), out);
    }
}

impl<T: Element> Model<T> {
    /// Fresh model: seeded or loaded extractor, seeded network.
    pub fn new(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let extractor = match &cfg.features.weights {
            Some(p) => VggExtractor::load(p)?,
            None => VggExtractor::seeded(cfg.features.widths, cfg.features.seed)?,
        };
        if extractor.feature_channels() != cfg.network.feature_channels {
            return Err(Error::Config(vec![format!(
                "extractor weights give {} channels, network expects {}",
                extractor.feature_channels(),
                cfg.network.feature_channels
            )]));
        }
        Ok(Model {
            extractor,
            net: HaloAE::new(cfg.network.clone(), derive_seed(cfg.train.seed, "network"))?,
            uncertainty: UncertaintyParams::new()?,
            normalizer: None,
        })
    }

    pub fn forward(&mut self, images: &Tensor<T>, mode: NormMode) -> Result<ForwardOutput<T>> {
        self.net.forward_full(&self.extractor, images, mode)
    }
}

/// Stacks `3×H×W` images into `N×3×H×W`.
pub fn stack<T: Element>(images: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::invalid("stack", "no images"))?;
    let mut data = Vec::with_capacity(images.len() * first.numel());
    for im in images {
        if im.shape() != first.shape() {
            return Err(Error::shape("stack", format!("{:?} vs {:?}", im.shape(), first.shape())));
        }
        data.extend_from_slice(im.data());
    }
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    Tensor::new(data, &shape)
}

/// Loss terms of one step (`None` when the mode does not compute it).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub cls: Option<f64>,
    pub rec_fm: f64,
    pub rec_im: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Effective term weights: scheduled α, static weights, or 1/σ².
    pub weights: [f64; 3],
    pub losses: StepLosses,
    /// σ² per task in uncertainty mode, after the epoch.
    pub variances: Option<[f64; 3]>,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Element> {
    pub model: Model<T>,
    /// Terms of the very first step, before any update.
    pub initial: StepLosses,
    pub log: Vec<EpochLog>,
    pub adam: Adam<T>,
    pub checkpoint: Option<PathBuf>,
}

pub fn load_dataset<T: Element>(cfg: &Config) -> Result<Dataset<T>> {
    match cfg.data.source {
        DataSource::Synthetic => generate_synthetic_dataset(&cfg.data.synthetic),
        DataSource::Mvtec => {
            let root = cfg.data.root.as_ref().ok_or_else(|| Error::Config(vec!["data.root is required".into()]))?;
            let cat = cfg.data.category.as_ref().ok_or_else(|| Error::Config(vec!["data.category is required".into()]))?;
            load_mvtec_category(root, cat, cfg.data.image_size)
        }
    }
}

fn step<T: Element>(
    model: &mut Model<T>,
    cfg: &Config,
    adam: &mut Adam<T>,
    images: &[Tensor<T>],
    epoch: usize,
    seed: u64,
) -> Result<(StepLosses, [f64; 3])> {
    let mode = cfg.train.loss_mode;
    let b = images.len();
    let jitter = cfg.train.color_jitter;
    let literal = cfg.train.cls_on_reconstruction;
    let (originals, augmented) = if mode.uses_cls() && !literal {
        let batch = make_training_batch(images, &cfg.augment, jitter, seed)?;
        (batch.originals, Some(batch.augmented))
    } else {
        let o = images
            .iter()
            .enumerate()
            .map(|(i, im)| if jitter > 0.0 { color_jitter(im, jitter, derive_seed(seed, &format!("sample/{i}/color"))) } else { Ok(im.clone()) })
            .collect::<Result<Vec<_>>>()?;
        (o, None)
    };
    let x_orig = stack(&originals)?;
    let x = match &augmented {
        Some(a) => Tensor::concat(&[x_orig.clone(), stack(a)?], 0)?,
        None => x_orig.clone(),
    };
    let out = model.forward(&x, NormMode::Train)?;
    let pick = |t: &Tensor<T>| if augmented.is_some() { t.narrow(0, 0, b) } else { Ok(t.clone()) };
    let (fm, fm_hat, im_hat) = (pick(&out.fm)?, pick(&out.fm_hat)?, pick(&out.im_hat)?);
    let l_fm = rec_loss(&fm_hat, &fm, &cfg.losses.rec_fm)?;
    let l_im = rec_loss(&im_hat, &x_orig, &cfg.losses.rec_im)?;
    let l_cls = if !mode.uses_cls() {
        None
    } else if augmented.is_some() {
        Some(cls_loss(&out.logits.narrow(0, 0, b)?, &out.logits.narrow(0, b, b)?)?)
    } else {
        // Cut&Paste applied to the reconstruction: pasted pixels are constants,
        // the rest stays attached to the graph.
        let (pasted, masks): (Vec<_>, Vec<_>) = no_grad(|| {
            (0..b)
                .map(|i| {
                    let s = derive_seed(seed, &format!("sample/{i}"));
                    let variant = if s & 1 == 1 { CutPasteVariant::Scar } else { CutPasteVariant::Rect };
                    let one = im_hat.narrow(0, i, 1)?.reshape(&im_hat.shape()[1..])?.detach();
                    cut_paste(&one, variant, &cfg.augment, derive_seed(s, "cutpaste"))
                })
                .collect::<Result<Vec<_>>>()
        })?
        .into_iter()
        .unzip();
        let s = cfg.data.image_size;
        let m = stack(&masks.iter().map(|m| m.reshape(&[1, s, s])).collect::<Result<Vec<_>>>()?)?;
        let keep = m.neg()?.add_scalar(1.0)?;
        let aug_hat = im_hat.mul(&keep)?.add(&stack(&pasted)?.mul(&m)?)?;
        Some(cls_loss(&out.logits, &model.net.classify(&aug_hat)?)?)
    };
    let placeholder = Tensor::scalar(T::zero())?;
    let terms = [l_cls.as_ref().unwrap_or(&placeholder), &l_fm, &l_im];
    let schedule = cfg.schedule();
    let (total, weights) = match mode.weights(epoch, &schedule) {
        Some(w) => (weighted_total(terms, w)?, w),
        None => (uncertainty_total_loss(terms, &model.uncertainty, mode.terms())?, model.uncertainty.variances().map(|v| 1.0 / v)),
    };
    let losses = StepLosses {
        cls: l_cls.as_ref().map(|l| l.data()[0].as_f64()),
        rec_fm: l_fm.data()[0].as_f64(),
        rec_im: l_im.data()[0].as_f64(),
        total: total.data()[0].as_f64(),
    };
    total.backward()?;
    adam.step(&mut model.all_slots())?;
    Ok((losses, weights))
}

/// Runs the configured training loop, fits the normalizer and, when
/// `out_dir` is given, writes `train_log.csv` and checkpoints there.
pub fn train<T: Element>(cfg: &Config, ds: &Dataset<T>, out_dir: Option<&Path>) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if ds.train.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    let mut model = Model::new(cfg)?;
    let mut adam = Adam::new(AdamConfig { lr: cfg.train.lr, weight_decay: cfg.train.weight_decay, ..Default::default() });
    let mut log = Vec::with_capacity(cfg.train.epochs);
    let mut initial = None;
    let mut order: Vec<usize> = (0..ds.train.len()).collect();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for epoch in 0..cfg.train.epochs {
        let start = Instant::now();
        let es = epoch_seed(cfg.train.seed, epoch);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(es));
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut weights = [0.0; 3];
        let mut n = 0.0;
        for (si, chunk) in order.chunks(cfg.train.batch_size).enumerate() {
            let images: Vec<Tensor<T>> = chunk.iter().map(|&i| ds.train[i].image.clone()).collect();
            let (l, w) = step(&mut model, cfg, &mut adam, &images, epoch, derive_seed(es, &format!("step/{si}")))?;
            initial.get_or_insert(l);
            let k = chunk.len() as f64;
            sums.0 += l.cls.unwrap_or(0.0) * k;
            sums.1 += l.rec_fm * k;
            sums.2 += l.rec_im * k;
            sums.3 += l.total * k;
            weights = w;
            n += k;
        }
        let entry = EpochLog {
            epoch,
            weights,
            losses: StepLosses {
                cls: cfg.train.loss_mode.uses_cls().then_some(sums.0 / n),
                rec_fm: sums.1 / n,
                rec_im: sums.2 / n,
                total: sums.3 / n,
            },
            variances: (cfg.train.loss_mode == LossMode::Uncertainty).then(|| model.uncertainty.variances()),
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: L_T {:.5} L_rec_fm {:.5} L_rec_im {:.5} ({:.1}s)",
            entry.losses.total,
            entry.losses.rec_fm,
            entry.losses.rec_im,
            entry.seconds
        );
        log.push(entry);
        if let Some(dir) = out_dir {
            write_log(&dir.join("train_log.csv"), &log)?;
            let every = cfg.train.checkpoint_every;
            if every > 0 && (epoch + 1) % every == 0 && epoch + 1 < cfg.train.epochs {
                save_checkpoint(&mut model, cfg, &adam, epoch + 1, &dir.join(format!("checkpoint_epoch{:04}.ntc", epoch + 1)))?;
            }
        }
    }
    model.normalizer = Some(fit_model_normalizer(&mut model, ds, cfg.eval.batch_size)?);
    let checkpoint = match out_dir {
        Some(dir) => {
            let p = dir.join("checkpoint.ntc");
            save_checkpoint(&mut model, cfg, &adam, cfg.train.epochs, &p)?;
            Some(p)
        }
        None => None,
    };
    Ok(TrainOutcome { model, initial: initial.expect("at least one step"), log, adam, checkpoint })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.8e}")).unwrap_or_default()
}

pub fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut s = String::from("epoch,alpha1,alpha2,alpha3,l_cls,l_rec_fm,l_rec_im,l_total\n");
    for e in log {
        let _ = writeln!(
            s,
            "{},{:.8e},{:.8e},{:.8e},{},{:.8e},{:.8e},{:.8e}",
            e.epoch,
            e.weights[0],
            e.weights[1],
            e.weights[2],
            fmt_opt(e.losses.cls),
            e.losses.rec_fm,
            e.losses.rec_im,
            e.losses.total
        );
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Mean per-channel anomaly map of the training images under the eval-mode model.
pub fn fit_model_normalizer<T: Element>(model: &mut Model<T>, ds: &Dataset<T>, batch: usize) -> Result<Normalizer<T>> {
    let mut acc = NormalizerAccumulator::default();
    for chunk in ds.train.chunks(batch) {
        let x = stack(&chunk.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?;
        let out = no_grad(|| model.forward(&x, NormMode::Eval))?;
        acc.add(&anomaly_map_channels(&out.fm, &out.fm_hat)?)?;
    }
    acc.finish()
}

/// Processed maps and both scores for a batch of `3×S×S` images.
#[derive(Clone, Debug)]
pub struct Scored {
    pub maps: Vec<Vec<f64>>,
    pub image_scores: Vec<f64>,
    pub classifier_scores: Vec<f64>,
}

pub fn score_images<T: Element>(model: &mut Model<T>, images: &[Tensor<T>], cfg: &Config) -> Result<Scored> {
    let norm = model.normalizer.clone().ok_or_else(|| Error::Eval("model has no fitted normalizer".into()))?;
    let s = cfg.data.image_size;
    let mut scored = Scored { maps: vec![], image_scores: vec![], classifier_scores: vec![] };
    for chunk in images.chunks(cfg.eval.batch_size) {
        let x = stack(chunk)?;
        let out = no_grad(|| model.forward(&x, NormMode::Eval))?;
        let processed = postprocess(&anomaly_map_channels(&out.fm, &out.fm_hat)?, &norm, s)?;
        scored.image_scores.extend(image_scores(&processed, cfg.eval.score_mode)?);
        scored.classifier_scores.extend(classifier_scores(&out.logits)?);
        scored.maps.extend(processed.data().chunks(s * s).map(|m| m.iter().map(|v| v.as_f64()).collect::<Vec<f64>>()));
    }
    Ok(scored)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub source: String,
    pub group: String,
    pub anomalous: bool,
    pub image_score: f64,
    pub classifier_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: Metrics,
    pub images: Vec<ImageResult>,
    pub config: String,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<34} {:>8}", "metric", "value");
        let _ = writeln!(s, "{:<34} {:>8.4}", "image ROC-AUC (anomaly map)", self.metrics.image_auc);
        let _ = writeln!(s, "{:<34} {:>8.4}", "image ROC-AUC (classifier)", self.metrics.image_auc_classifier);
        match self.metrics.pixel_auc {
            Some(p) => {
                let _ = writeln!(s, "{:<34} {:>8.4}", "pixel ROC-AUC", p);
            }
            None => {
                let _ = writeln!(s, "{:<34} {:>8}", "pixel ROC-AUC", "n/a");
            }
        }
        let _ = writeln!(s, "{:<34} {:>8}", "normal / anomalous test images", format!("{}/{}", self.metrics.n_normal, self.metrics.n_anomalous));
        s
    }
}

/// Image- and pixel-level metrics on the test split; heatmaps are written to
/// `heatmap_dir` when given.
pub fn evaluate<T: Element>(model: &mut Model<T>, cfg: &Config, ds: &Dataset<T>, heatmap_dir: Option<&Path>) -> Result<EvalReport> {
    let images: Vec<Tensor<T>> = ds.test.iter().map(|s| s.image.clone()).collect();
    if images.is_empty() {
        return Err(Error::Dataset("test split is empty".into()));
    }
    let scored = score_images(model, &images, cfg)?;
    let labels: Vec<bool> = ds.test.iter().map(|s| s.anomalous).collect();
    let pixel_auc = if cfg.eval.pixel_metric {
        let mut scores = Vec::new();
        let mut truth = Vec::new();
        for (sample, map) in ds.test.iter().zip(&scored.maps) {
            let mask = sample.mask.as_ref().ok_or_else(|| Error::Eval(format!("no ground-truth mask for {}", sample.source)))?;
            if mask.numel() != map.len() {
                return Err(Error::Eval(format!("mask of {} has {} pixels, map {}", sample.source, mask.numel(), map.len())));
            }
            scores.extend_from_slice(map);
            truth.extend(mask.data().iter().map(|v| v.as_f64() >= 0.5));
        }
        Some(roc_auc(&scores, &truth)?)
    } else {
        None
    };
    if let Some(dir) = heatmap_dir {
        let s = cfg.data.image_size;
        for (i, (sample, map)) in ds.test.iter().zip(&scored.maps).enumerate() {
            let stem = format!("{i:04}_{}", sample.group);
            save_heatmap_png(map, &sample.image, &dir.join(format!("{stem}_heatmap.png")))?;
            save_map_png16(map, s, s, scored.image_scores[i], &dir.join(format!("{stem}_map.png")))?;
        }
    }
    let metrics = Metrics {
        image_auc: roc_auc(&scored.image_scores, &labels)?,
        image_auc_classifier: roc_auc(&scored.classifier_scores, &labels)?,
        pixel_auc,
        n_normal: labels.iter().filter(|&&l| !l).count(),
        n_anomalous: labels.iter().filter(|&&l| l).count(),
    };
    let images = ds
        .test
        .iter()
        .enumerate()
        .map(|(i, s)| ImageResult {
            source: s.source.clone(),
            group: s.group.clone(),
            anomalous: s.anomalous,
            image_score: scored.image_scores[i],
            classifier_score: scored.classifier_scores[i],
        })
        .collect();
    Ok(EvalReport { metrics, images, config: cfg.echo()? })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferResult {
    pub image_score: f64,
    pub classifier_score: f64,
}

/// Scores one image and writes `<stem>_heatmap.png`, `<stem>_map.png` (+ JSON
/// sidecar) and `<stem>_score.json` into `out_dir`.
pub fn infer<T: Element>(model: &mut Model<T>, cfg: &Config, image: &Tensor<T>, out_dir: &Path, stem: &str) -> Result<InferResult> {
    let scored = score_images(model, std::slice::from_ref(image), cfg)?;
    let s = cfg.data.image_size;
    let result = InferResult { image_score: scored.image_scores[0], classifier_score: scored.classifier_scores[0] };
    save_heatmap_png(&scored.maps[0], image, &out_dir.join(format!("{stem}_heatmap.png")))?;
    save_map_png16(&scored.maps[0], s, s, result.image_score, &out_dir.join(format!("{stem}_map.png")))?;
    let p = out_dir.join(format!("{stem}_score.json"));
    std::fs::write(&p, serde_json::to_string_pretty(&result)?).map_err(|e| Error::io(&p, e))?;
    Ok(result)
}

/// Network and uncertainty tensors, extractor weights, Adam moments, the
/// normalizer, epoch count and the configuration echo in one container.
pub fn checkpoint_container<T: Element>(model: &mut Model<T>, cfg: &Config, adam: &Adam<T>, epoch: usize) -> Result<Container> {
    let mut c = Container::new();
    module_to_container(model, &mut c)?;
    c.merge_prefixed(&model.extractor.to_container()?, "vgg")?;
    for (name, m) in adam.moments() {
        c.insert(&format!("adam.m.{name}"), &Tensor::new(m.m.clone(), &[m.m.len()])?)?;
        c.insert(&format!("adam.v.{name}"), &Tensor::new(m.v.clone(), &[m.v.len()])?)?;
    }
    if let Some(n) = &model.normalizer {
        c.insert("normalizer.mean_map", &n.mean_map)?;
        c.metadata.insert("normalizer.eps".into(), n.eps.to_string());
    }
    c.metadata.insert("format".into(), CHECKPOINT_FORMAT.into());
    c.metadata.insert("epoch".into(), epoch.to_string());
    c.metadata.insert("adam_step".into(), adam.step_count().to_string());
    c.metadata.insert("config".into(), cfg.echo()?);
    Ok(c)
}

pub fn save_checkpoint<T: Element>(model: &mut Model<T>, cfg: &Config, adam: &Adam<T>, epoch: usize, path: &Path) -> Result<()> {
    checkpoint_container(model, cfg, adam, epoch)?.save(path)
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T: Element> {
    pub model: Model<T>,
    pub config: Config,
    pub epoch: usize,
    pub adam: Adam<T>,
}

fn meta<'a>(c: &'a Container, key: &str) -> Result<&'a str> {
    c.metadata.get(key).map(String::as_str).ok_or_else(|| Error::Format(format!("checkpoint metadata '{key}' is missing")))
}

pub fn checkpoint_from_container<T: Element>(c: &Container) -> Result<Checkpoint<T>> {
    if meta(c, "format")? != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!("unsupported checkpoint format '{}'", meta(c, "format")?)));
    }
    let config = Config::from_toml(meta(c, "config")?)?;
    let parse = |k: &str| meta(c, k)?.parse::<u64>().map_err(|e| Error::Format(format!("metadata '{k}': {e}")));
    let epoch = parse("epoch")? as usize;
    let step = parse("adam_step")?;
    let extractor = VggExtractor::from_container(&c.sub_container("vgg"))?;
    let mut model = Model {
        extractor,
        net: HaloAE::new(config.network.clone(), 0)?,
        uncertainty: UncertaintyParams::new()?,
        normalizer: None,
    };
    load_module_from_container(&mut model, c)?;
    if c.contains("normalizer.mean_map") {
        let eps = meta(c, "normalizer.eps")?.parse::<f64>().map_err(|e| Error::Format(format!("normalizer.eps: {e}")))?;
        model.normalizer = Some(Normalizer { mean_map: c.get("normalizer.mean_map")?, eps });
    }
    let adam_c = c.sub_container("adam.m");
    let mut moments = BTreeMap::new();
    for name in adam_c.names() {
        let m: Tensor<T> = adam_c.get(name)?;
        let v: Tensor<T> = c.get(&format!("adam.v.{name}"))?;
        moments.insert(name.to_string(), Moments { m: m.to_vec(), v: v.to_vec() });
    }
    let mut adam = Adam::new(AdamConfig { lr: config.train.lr, weight_decay: config.train.weight_decay, ..Default::default() });
    adam.restore(step, moments);
    Ok(Checkpoint { model, config, epoch, adam })
}

pub fn load_checkpoint<T: Element>(path: &Path) -> Result<Checkpoint<T>> {
    checkpoint_from_container(&Container::load(path)?)
}
