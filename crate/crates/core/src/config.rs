//! Run configuration: one TOML document with a section per component.
//! Unknown keys are rejected and every constraint violation is reported at once.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::CutPasteSpec;
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::eval::ScoreMode;
use crate::features::{VGG19_WIDTHS, TAP_LAYERS};
use crate::losses::{LossMode, LossSchedule, RecLossConfig};
use crate::network::{NetworkConfig, StageSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub loss_mode: LossMode,
    /// Classify a Cut&Paste copy of the reconstruction instead of the
    /// reconstruction of a Cut&Paste input.
    pub cls_on_reconstruction: bool,
    /// Half-width of the color jitter applied to training images (0 disables).
    pub color_jitter: f64,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 250,
            batch_size: 12,
            lr: 1e-4,
            weight_decay: 1e-5,
            loss_mode: LossMode::Adaptive,
            cls_on_reconstruction: false,
            color_jitter: 0.1,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    #[default]
    Mvtec,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub root: Option<PathBuf>,
    pub category: Option<String>,
    pub image_size: usize,
    pub synthetic: SyntheticSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { source: DataSource::Mvtec, root: None, category: None, image_size: 256, synthetic: SyntheticSpec { size: 256, ..Default::default() } }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    /// Widths of the eight 3×3 convolutions.
    pub widths: [usize; 8],
    /// Pretrained weights container; seeded random weights when absent.
    pub weights: Option<PathBuf>,
    pub seed: u64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig { widths: VGG19_WIDTHS, weights: None, seed: 0 }
    }
}

impl FeatureConfig {
    pub fn channels(&self) -> usize {
        TAP_LAYERS.iter().map(|&l| self.widths[l - 1]).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Logistic parameters; `epochs` is taken from the training section.
    pub schedule: LossSchedule,
    pub rec_fm: RecLossConfig,
    pub rec_im: RecLossConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { schedule: LossSchedule::default(), rec_fm: RecLossConfig::features(), rec_im: RecLossConfig::default() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub score_mode: ScoreMode,
    pub pixel_metric: bool,
    pub dump_heatmaps: bool,
    /// Images per forward pass during evaluation and normalizer fitting.
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub train: TrainConfig,
    pub data: DataConfig,
    pub features: FeatureConfig,
    pub network: NetworkConfig,
    pub losses: LossConfig,
    pub augment: CutPasteSpec,
    pub eval: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            train: TrainConfig::default(),
            data: DataConfig::default(),
            features: FeatureConfig::default(),
            network: NetworkConfig::default(),
            losses: LossConfig::default(),
            augment: CutPasteSpec::default(),
            eval: EvalConfig { score_mode: ScoreMode::Mean, pixel_metric: true, dump_heatmaps: false, batch_size: 8 },
        }
    }
}

impl Config {
    /// A scaled-down setup that trains in minutes on one CPU core: 64×64
    /// synthetic images, narrow random extractor, 30 epochs.
    pub fn desk() -> Self {
        let mut c = Config::default();
        c.train.epochs = 30;
        c.data.source = DataSource::Synthetic;
        c.data.image_size = 64;
        c.data.synthetic = SyntheticSpec { size: 64, ..Default::default() };
        c.features.widths = [8, 8, 16, 16, 32, 32, 32, 32];
        c.network = NetworkConfig {
            image_size: 64,
            feature_channels: 88,
            head_kernel: 5,
            encoder: vec![StageSpec::new(1, 29, 3), StageSpec::new(1, 15, 3), StageSpec::new(1, 7, 5), StageSpec::new(1, 4, 5)],
            decoder: vec![StageSpec::new(1, 4, 3), StageSpec::new(1, 7, 3), StageSpec::new(1, 15, 3), StageSpec::new(1, 30, 5), StageSpec::new(1, 88, 1)],
            image_head: vec![32, 16, 8, 4, 3],
            block: 6,
            halo: 2,
            heads: 1,
            mask_padding: false,
            classifier_pooled: false,
        };
        c.eval.batch_size = 20;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Config::default()),
            "desk" => Ok(Config::desk()),
            _ => Err(Error::Config(vec![format!("unknown preset '{name}' (expected 'full' or 'desk')")])),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// This configuration with the keys of a TOML document laid over it;
    /// tables merge recursively, everything else is replaced.
    pub fn overlay(&self, text: &str) -> Result<Self> {
        let over: toml::Table = toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        let mut base: toml::Table = toml::from_str(&self.echo()?).map_err(|e| Error::Config(vec![e.to_string()]))?;
        merge(&mut base, over);
        Self::from_toml(&toml::to_string(&base).map_err(|e| Error::Config(vec![e.to_string()]))?)
    }

    /// The exact configuration as TOML, embedded in checkpoints and reports.
    pub fn echo(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(vec![format!("cannot serialize config: {e}")]))
    }

    /// The loss schedule with its horizon set to the configured epoch count.
    pub fn schedule(&self) -> LossSchedule {
        LossSchedule { epochs: self.train.epochs, ..self.losses.schedule.clone() }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        let t = &self.train;
        if t.epochs == 0 {
            p.push("train.epochs must be positive".into());
        }
        if t.batch_size == 0 {
            p.push("train.batch_size must be positive".into());
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            p.push(format!("train.lr {} must be positive", t.lr));
        }
        if !(t.weight_decay >= 0.0 && t.weight_decay.is_finite()) {
            p.push(format!("train.weight_decay {} must be non-negative", t.weight_decay));
        }
        if !(0.0..1.0).contains(&t.color_jitter) {
            p.push(format!("train.color_jitter {} must lie in [0, 1)", t.color_jitter));
        }
        if self.data.source == DataSource::Mvtec {
            if self.data.root.is_none() {
                p.push("data.root is required for the mvtec source".into());
            }
            if self.data.category.is_none() {
                p.push("data.category is required for the mvtec source".into());
            }
        }
        if self.data.source == DataSource::Synthetic && self.data.synthetic.size != self.data.image_size {
            p.push(format!("data.synthetic.size {} differs from data.image_size {}", self.data.synthetic.size, self.data.image_size));
        }
        if self.network.image_size != self.data.image_size {
            p.push(format!("network.image_size {} differs from data.image_size {}", self.network.image_size, self.data.image_size));
        }
        if self.features.widths.contains(&0) {
            p.push("features.widths must all be positive".into());
        }
        if self.network.feature_channels != self.features.channels() {
            p.push(format!(
                "network.feature_channels {} differs from the extractor's {} tapped channels",
                self.network.feature_channels,
                self.features.channels()
            ));
        }
        if self.eval.batch_size == 0 {
            p.push("eval.batch_size must be positive".into());
        }
        p.extend(self.network.problems());
        p.extend(self.augment.problems());
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() { Ok(()) } else { Err(Error::Config(p)) }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
