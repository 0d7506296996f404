//! Experiment configuration as flat `key = value` text.
//!
//! Keys are dotted by section (`fusion.mode = se_gate`); `#` starts a
//! comment. An optional `preset = desk|paper` line picks the base values the
//! other keys override. Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::augment::{GriffinLim, GriffinLimConfig, PhaseInit, Resynthesizer};
use crate::branch::{BranchConfig, SplitMode};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::frontend::{FeaturePipeline, MelConfig, SpecAugConfig};
use crate::fusion::{FusionConfig, FusionMode};
use crate::model::{InputNorm, ModelConfig};
use crate::training::{ClassWeights, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            _ => Err(Error::config(&["preset"], format!("unknown preset {s:?} (desk, paper)"))),
        }
    }
}

/// Training settings as they appear in the config file.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub w_fake: f64,
    pub w_real: f64,
    pub checkpoint_every: usize,
    pub spec_augment: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationSettings {
    pub enabled: bool,
    /// Fraction of bona fide rows to copy-synthesize.
    pub ratio: f64,
    /// Any of `gl` (zero initial phase) and `gl-random`.
    pub resynthesizers: Vec<String>,
    pub gl_iterations: usize,
}

impl Default for AugmentationSettings {
    fn default() -> Self {
        Self { enabled: false, ratio: 0.3, resynthesizers: vec!["gl".into()], gl_iterations: 32 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub seed: u64,
    pub mel: MelConfig,
    /// Seconds every clip is trimmed or repeated to.
    pub duration: f64,
    pub mel_cache: Option<PathBuf>,
    pub input_norm: InputNorm,
    pub specaug: SpecAugConfig,
    /// `n_mels` and `frames` are derived from the frontend settings.
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub split: SplitMode,
    pub branch: BranchConfig,
    pub training: TrainSettings,
    pub augmentation: AugmentationSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

/// Every accepted key, in serialization order.
pub const KEYS: &[&str] = &[
    "preset",
    "seed",
    "frontend.sample_rate",
    "frontend.duration",
    "frontend.frame_length",
    "frontend.frame_shift",
    "frontend.n_mels",
    "frontend.fmin",
    "frontend.fmax",
    "frontend.log_floor",
    "frontend.mel_cache",
    "frontend.norm_mean",
    "frontend.norm_std",
    "specaug.n_freq_masks",
    "specaug.max_freq_width",
    "specaug.n_time_masks",
    "specaug.max_time_width",
    "encoder.depth",
    "encoder.dim",
    "encoder.heads",
    "encoder.mlp_ratio",
    "encoder.patch_size",
    "fusion.mode",
    "fusion.k",
    "fusion.se_reduction",
    "fusion.cnn_channels",
    "split.mode",
    "branch.dim",
    "branch.layers",
    "training.batch_size",
    "training.epochs",
    "training.lr",
    "training.w_fake",
    "training.w_real",
    "training.checkpoint_every",
    "training.spec_augment",
    "augmentation.enabled",
    "augmentation.ratio",
    "augmentation.resynthesizers",
    "augmentation.gl_iterations",
];

fn value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::config(&[key], format!("invalid value {v:?}")))
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        let mel = MelConfig::default();
        let (encoder, batch_size, epochs) = match preset {
            Preset::Desk => (EncoderConfig::desk(mel.n_mels, 0), 8, 3),
            Preset::Paper => (EncoderConfig::paper_scale(mel.n_mels, 0), 32, 20),
        };
        let mut cfg = Self {
            preset,
            seed: 0,
            mel,
            duration: 4.0,
            mel_cache: None,
            input_norm: InputNorm::default(),
            specaug: SpecAugConfig::default(),
            encoder,
            fusion: FusionConfig::default(),
            split: SplitMode::Frequency,
            branch: BranchConfig::default(),
            training: TrainSettings {
                batch_size,
                epochs,
                lr: 1e-4,
                w_fake: 0.1,
                w_real: 0.9,
                checkpoint_every: 1,
                spec_augment: true,
            },
            augmentation: AugmentationSettings::default(),
        };
        cfg.sync_encoder_input();
        cfg
    }

    fn sync_encoder_input(&mut self) {
        self.encoder.n_mels = self.mel.n_mels;
        let n = (self.duration * self.mel.sample_rate as f64).round();
        self.encoder.frames = if n.is_finite() && n >= 0.0 { self.mel.n_frames(n as usize) } else { 0 };
    }

    /// Parses config text; `origin` names the source in error messages.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::config(&[], format!("{}:{}: expected `key = value`", origin.display(), i + 1)));
            };
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(Error::config(&[k], format!("{}:{}: unknown key", origin.display(), i + 1)));
            }
            if pairs.iter().any(|(p, _)| p == k) {
                return Err(Error::config(&[k], format!("{}:{}: key given twice", origin.display(), i + 1)));
            }
            pairs.push((k.to_string(), v.to_string()));
        }
        let preset = match pairs.iter().find(|(k, _)| k == "preset") {
            Some((_, v)) => v.parse()?,
            None => Preset::Desk,
        };
        let mut cfg = Self::preset(preset);
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.sync_encoder_input();
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "preset" => self.preset = v.parse()?,
            "seed" => self.seed = value(key, v)?,
            "frontend.sample_rate" => self.mel.sample_rate = value(key, v)?,
            "frontend.duration" => self.duration = value(key, v)?,
            "frontend.frame_length" => self.mel.frame_length = value(key, v)?,
            "frontend.frame_shift" => self.mel.frame_shift = value(key, v)?,
            "frontend.n_mels" => self.mel.n_mels = value(key, v)?,
            "frontend.fmin" => self.mel.fmin = value(key, v)?,
            "frontend.fmax" => self.mel.fmax = value(key, v)?,
            "frontend.log_floor" => {
                self.mel.log_floor = value(key, v)?;
                self.specaug.fill_value = self.mel.log_floor.ln();
            }
            "frontend.mel_cache" => self.mel_cache = (!v.is_empty()).then(|| PathBuf::from(v)),
            "frontend.norm_mean" => self.input_norm.mean = value(key, v)?,
            "frontend.norm_std" => self.input_norm.std = value(key, v)?,
            "specaug.n_freq_masks" => self.specaug.n_freq_masks = value(key, v)?,
            "specaug.max_freq_width" => self.specaug.max_freq_width = value(key, v)?,
            "specaug.n_time_masks" => self.specaug.n_time_masks = value(key, v)?,
            "specaug.max_time_width" => self.specaug.max_time_width = value(key, v)?,
            "encoder.depth" => self.encoder.depth = value(key, v)?,
            "encoder.dim" => self.encoder.dim = value(key, v)?,
            "encoder.heads" => self.encoder.heads = value(key, v)?,
            "encoder.mlp_ratio" => self.encoder.mlp_ratio = value(key, v)?,
            "encoder.patch_size" => self.encoder.patch_size = value(key, v)?,
            "fusion.mode" => self.fusion.mode = v.parse::<FusionMode>()?,
            "fusion.k" => self.fusion.k = value(key, v)?,
            "fusion.se_reduction" => self.fusion.se_reduction = value(key, v)?,
            "fusion.cnn_channels" => {
                let c: Vec<usize> = v.split(',').map(|c| value(key, c.trim())).collect::<Result<_>>()?;
                self.fusion.cnn_channels = c
                    .try_into()
                    .map_err(|_| Error::config(&[key], format!("expected three channel counts, got {v:?}")))?;
            }
            "split.mode" => self.split = v.parse()?,
            "branch.dim" => self.branch.dim = value(key, v)?,
            "branch.layers" => self.branch.layers = value(key, v)?,
            "training.batch_size" => self.training.batch_size = value(key, v)?,
            "training.epochs" => self.training.epochs = value(key, v)?,
            "training.lr" => self.training.lr = value(key, v)?,
            "training.w_fake" => self.training.w_fake = value(key, v)?,
            "training.w_real" => self.training.w_real = value(key, v)?,
            "training.checkpoint_every" => self.training.checkpoint_every = value(key, v)?,
            "training.spec_augment" => self.training.spec_augment = value(key, v)?,
            "augmentation.enabled" => self.augmentation.enabled = value(key, v)?,
            "augmentation.ratio" => self.augmentation.ratio = value(key, v)?,
            "augmentation.resynthesizers" => {
                self.augmentation.resynthesizers =
                    v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
            }
            "augmentation.gl_iterations" => self.augmentation.gl_iterations = value(key, v)?,
            _ => return Err(Error::config(&[key], "unknown key")),
        }
        self.sync_encoder_input();
        Ok(())
    }

    /// `(key, value)` for every key in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let s = |v: &dyn ToString| v.to_string();
        let values = [
            s(&self.preset.as_str()),
            s(&self.seed),
            s(&self.mel.sample_rate),
            s(&self.duration),
            s(&self.mel.frame_length),
            s(&self.mel.frame_shift),
            s(&self.mel.n_mels),
            s(&self.mel.fmin),
            s(&self.mel.fmax),
            s(&self.mel.log_floor),
            self.mel_cache.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            s(&self.input_norm.mean),
            s(&self.input_norm.std),
            s(&self.specaug.n_freq_masks),
            s(&self.specaug.max_freq_width),
            s(&self.specaug.n_time_masks),
            s(&self.specaug.max_time_width),
            s(&self.encoder.depth),
            s(&self.encoder.dim),
            s(&self.encoder.heads),
            s(&self.encoder.mlp_ratio),
            s(&self.encoder.patch_size),
            s(&self.fusion.mode.as_str()),
            s(&self.fusion.k),
            s(&self.fusion.se_reduction),
            join(&self.fusion.cnn_channels),
            s(&self.split.as_str()),
            s(&self.branch.dim),
            s(&self.branch.layers),
            s(&self.training.batch_size),
            s(&self.training.epochs),
            s(&self.training.lr),
            s(&self.training.w_fake),
            s(&self.training.w_real),
            s(&self.training.checkpoint_every),
            s(&self.training.spec_augment),
            s(&self.augmentation.enabled),
            s(&self.augmentation.ratio),
            join(&self.augmentation.resynthesizers),
            s(&self.augmentation.gl_iterations),
        ];
        KEYS.iter().copied().zip(values).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut encoder = self.encoder.clone();
        encoder.n_mels = self.mel.n_mels;
        encoder.frames = self.features_frames();
        ModelConfig {
            input_norm: self.input_norm,
            encoder,
            fusion: self.fusion.clone(),
            split: self.split,
            branch: self.branch,
        }
    }

    fn features_frames(&self) -> usize {
        self.mel.n_frames((self.duration * self.mel.sample_rate as f64).round() as usize)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.training.batch_size,
            epochs: self.training.epochs,
            lr: self.training.lr,
            seed: self.seed,
            class_weights: ClassWeights { fake: self.training.w_fake, real: self.training.w_real },
            checkpoint_every: self.training.checkpoint_every,
            spec_augment: self.training.spec_augment.then(|| self.specaug.clone()),
        }
    }

    pub fn feature_pipeline(&self) -> Result<FeaturePipeline> {
        FeaturePipeline::new(&self.mel, self.duration, self.mel_cache.clone())
    }

    /// The configured augmentation resynthesizers, in round-robin order.
    pub fn resynthesizers(&self) -> Result<Vec<GriffinLim>> {
        let key = "augmentation.resynthesizers";
        self.augmentation
            .resynthesizers
            .iter()
            .map(|name| {
                let init = match name.as_str() {
                    "gl" => PhaseInit::Zero,
                    "gl-random" => PhaseInit::Random(self.seed),
                    other => return Err(Error::config(&[key], format!("unknown resynthesizer {other:?} (gl, gl-random)"))),
                };
                let gl = GriffinLim::new(GriffinLimConfig { iterations: self.augmentation.gl_iterations, init })?;
                debug_assert_eq!(gl.name(), name);
                Ok(gl)
            })
            .collect()
    }

    /// Checks every cross-key constraint.
    pub fn validate(&self) -> Result<()> {
        self.mel.validate()?;
        self.feature_pipeline()?;
        self.model_config().validate()?;
        self.train_config().validate()?;
        let a = &self.augmentation;
        if !(0.0..=1.0).contains(&a.ratio) {
            return Err(Error::config(&["augmentation.ratio"], format!("ratio {} is outside [0, 1]", a.ratio)));
        }
        if a.enabled && a.resynthesizers.is_empty() {
            return Err(Error::config(&["augmentation.enabled", "augmentation.resynthesizers"], "augmentation is enabled without resynthesizers"));
        }
        self.resynthesizers()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::parse(text, Path::new("test.cfg"))
    }

    #[test]
    fn defaults_are_the_desk_preset() {
        let c = parse("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!((c.encoder.dim, c.encoder.depth, c.encoder.frames), (64, 12, 398));
        assert_eq!(c.train_config().batch_size, 8);
        c.validate().unwrap();
        let p = parse("preset = paper\n").unwrap();
        assert_eq!((p.encoder.dim, p.training.batch_size, p.training.epochs), (768, 32, 20));
    }

    #[test]
    fn overrides_comments_and_errors() {
        let c = parse("# comment\nfusion.mode = cnn_gate  # trailing\nfusion.k=2\nsplit.mode = channel\n").unwrap();
        assert_eq!((c.fusion.mode, c.fusion.k, c.split), (FusionMode::CnnGate, 2, SplitMode::Channel));
        let keys = |r: Result<ExperimentConfig>| match r {
            Err(Error::Config { keys, .. }) => keys,
            other => panic!("{other:?}"),
        };
        assert_eq!(keys(parse("fusion.bogus = 1\n")), ["fusion.bogus"]);
        assert_eq!(keys(parse("fusion.k = two\n")), ["fusion.k"]);
        assert_eq!(keys(parse("seed = 1\nseed = 2\n")), ["seed"]);
        assert!(keys(parse("just words\n")).is_empty());
        let c = parse("fusion.k = 13\n").unwrap();
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("fusion.k") && msg.contains("encoder.depth"), "{msg}");
    }

    #[test]
    fn derived_encoder_input_follows_frontend() {
        let c = parse("frontend.duration = 2\nfrontend.n_mels = 64\n").unwrap();
        assert_eq!((c.encoder.n_mels, c.encoder.frames), (64, 198));
        assert_eq!(c.model_config().encoder.grid().unwrap().h, 4);
    }

    #[test]
    fn unknown_resynthesizer_is_rejected() {
        let c = parse("augmentation.resynthesizers = gl,hifigan\n").unwrap();
        assert!(c.validate().unwrap_err().to_string().contains("hifigan"));
    }

    proptest! {
        #[test]
        fn text_round_trip(
            seed in any::<u64>(),
            lr in 1e-6f64..1.0,
            k in 1usize..=12,
            mode in 0usize..3,
            ratio in 0.0f64..=1.0,
            cache in prop::option::of("[a-z]{1,8}"),
            spec in any::<bool>(),
        ) {
            let mut c = ExperimentConfig { seed, ..Default::default() };
            c.training.lr = lr;
            c.fusion.k = k;
            c.fusion.mode = FusionMode::ALL[mode];
            c.augmentation.ratio = ratio;
            c.mel_cache = cache.map(PathBuf::from);
            c.training.spec_augment = spec;
            prop_assert_eq!(parse(&c.to_text()).unwrap(), c);
        }
    }
}
