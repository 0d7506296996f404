//! `spoofnet` command-line driver.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::augment::{augment_manifest, AugmentConfig, Resynthesizer};
use crate::error::{Error, Result};
use crate::evaluation::{
    attach_labels, eer_of, eer_report, ensemble_scores, read_protocol, read_scores, score_manifest, write_scores,
    EnsembleSpec, Normalization,
};
use crate::harness::{generate_synthetic_dataset, ExperimentConfig, Manifest, SynthConfig};
use crate::label::Label;
use crate::model::Detector;
use crate::training::{train, Example};

#[derive(Parser, Debug)]
#[command(name = "spoofnet", version, about = "Environmental sound deepfake detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Experiment config file (`key = value` lines); desk preset if omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::read(p).map_err(|e| match e {
                Error::Io { path, source } => Error::config(&[], format!("cannot read config {}: {source}", path.display())),
                other => other,
            })?,
            None => ExperimentConfig::default(),
        };
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(&[], format!("override {o:?} is not KEY=VALUE")))?;
            let k = k.trim();
            if !crate::harness::config::KEYS.contains(&k) {
                return Err(Error::config(&[k], "unknown key"));
            }
            cfg.set(k, v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic bona fide / Griffin-Lim spoof dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Number of bona fide clips (one spoof each).
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Prefix for every utterance id.
        #[arg(long, default_value = "")]
        prefix: String,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Append copy-synthesized spoofs of bona fide rows to a manifest.
    Augment {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory for the generated audio.
        #[arg(long)]
        out_dir: PathBuf,
        /// Augmented manifest path.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train a detector; writes metrics.tsv, checkpoints and config.txt.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Optional development manifest scored after every epoch.
        #[arg(long)]
        dev: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Score a manifest with a checkpoint.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Equal error rate of a score file against a protocol file.
    Eer {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        protocol: PathBuf,
    },
    /// Weighted sum of several score files.
    Ensemble {
        /// Comma-separated score files.
        #[arg(long, value_delimiter = ',', required = true)]
        scores: Vec<PathBuf>,
        /// Comma-separated weights, one per score file.
        #[arg(long, value_delimiter = ',', required = true, allow_negative_numbers = true)]
        weights: Vec<f64>,
        /// Output score file; printed to stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Rescale each system to [0, 1] first.
        #[arg(long)]
        min_max: bool,
        /// Also report the ensemble EER against this protocol.
        #[arg(long)]
        protocol: Option<PathBuf>,
    },
    /// Validate a config and print it with every key resolved.
    InspectConfig {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

/// Runs the CLI on `args` (including the program name) and returns the exit
/// code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if e.is_usage() {
                1
            } else {
                2
            }
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::GenData { out: dir, n, seed, prefix, config } => {
            let cfg = config.load()?;
            if n < 2 {
                return Err(Error::config(&[], format!("--n must be at least 2, got {n}")));
            }
            let synth = SynthConfig {
                duration: cfg.duration,
                mel: cfg.mel.clone(),
                gl: crate::augment::GriffinLimConfig { iterations: cfg.augmentation.gl_iterations, ..Default::default() },
                id_prefix: prefix,
            };
            let m = generate_synthetic_dataset(n, &synth, seed.unwrap_or(cfg.seed), &dir)?;
            let _ = writeln!(out, "wrote {} rows to {}", m.len(), dir.join("manifest.tsv").display());
        }
        Command::Augment { manifest, out_dir, out: out_path, config } => {
            let cfg = config.load()?;
            let m = Manifest::read(&manifest)?;
            let augmented = run_augmentation(&cfg, &m, &out_dir)?;
            augmented.write(&out_path)?;
            let _ = writeln!(out, "added {} rows; wrote {}", augmented.len() - m.len(), out_path.display());
        }
        Command::Train { manifest, out_dir, dev, config } => {
            let cfg = config.load()?;
            std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            let config_path = out_dir.join("config.txt");
            std::fs::write(&config_path, cfg.to_text()).map_err(|e| Error::io(&config_path, e))?;
            let mut m = Manifest::read(&manifest)?;
            if cfg.augmentation.enabled {
                m = run_augmentation(&cfg, &m, &out_dir.join("augmented"))?;
                m.write(&out_dir.join("train_manifest.tsv"))?;
            }
            let features = cfg.feature_pipeline()?;
            let data = load_examples(&m, &features)?;
            let dev_data = match dev {
                Some(p) => load_examples(&Manifest::read(&p)?, &features)?,
                None => Vec::new(),
            };
            let mut model = Detector::new(&cfg.model_config(), cfg.seed)?;
            let outcome = train(&mut model, &data, &dev_data, &cfg.train_config(), Some(&out_dir))?;
            for h in &outcome.history {
                let _ = writeln!(err, "{}", h.log_line());
            }
            let _ = writeln!(out, "trained {} steps; final checkpoint {}", outcome.steps, out_dir.join("final.ckpt").display());
        }
        Command::Score { checkpoint, manifest, out: out_path, config } => {
            let cfg = config.load()?;
            let m = Manifest::read(&manifest)?;
            if m.is_empty() {
                let _ = writeln!(err, "warning: {} has no rows; writing an empty score file", manifest.display());
            }
            let model = Detector::load(&cfg.model_config(), &checkpoint).map_err(|e| match e {
                Error::Checkpoint { path, message } => {
                    Error::config(&[], format!("checkpoint {} does not match the config: {message}", path.display()))
                }
                other => other,
            })?;
            let scores = score_manifest(&model, &m, &cfg.feature_pipeline()?)?;
            write_scores(&out_path, &scores)?;
            let _ = writeln!(out, "scored {} utterances into {}", scores.len(), out_path.display());
        }
        Command::Eer { scores, protocol } => {
            let mut trials = read_scores(&scores)?;
            attach_labels(&mut trials, &read_protocol(&protocol)?)?;
            let _ = writeln!(out, "{}", eer_report(eer_of(&trials)?.eer));
        }
        Command::Ensemble { scores, weights, out: out_path, min_max, protocol } => {
            if scores.len() != weights.len() {
                return Err(Error::config(&[], format!("{} score files but {} weights", scores.len(), weights.len())));
            }
            let systems = scores.iter().map(|p| read_scores(p)).collect::<Result<Vec<_>>>()?;
            let mut spec = EnsembleSpec::new(systems, weights);
            if min_max {
                spec.normalization = Normalization::MinMax;
            }
            if !spec.weights_sum_to_one() {
                let _ = writeln!(err, "warning: ensemble weights sum to {}, not 1", spec.weights.iter().sum::<f64>());
            }
            let mut fused = ensemble_scores(&spec)?;
            match &out_path {
                Some(p) => write_scores(p, &fused)?,
                None => {
                    let _ = write!(out, "{}", crate::evaluation::scores_to_text(&fused));
                }
            }
            if let Some(p) = protocol {
                attach_labels(&mut fused, &read_protocol(&p)?)?;
                let _ = writeln!(out, "{}", eer_report(eer_of(&fused)?.eer));
            }
        }
        Command::InspectConfig { config } => {
            let cfg = config.load()?;
            let _ = write!(out, "{}", cfg.to_text());
            let grid = cfg.model_config().encoder.grid()?;
            let _ = writeln!(out, "# derived: frames = {}, patch grid H x W = {} x {}", cfg.encoder.frames, grid.h, grid.w);
        }
    }
    Ok(())
}

fn run_augmentation(cfg: &ExperimentConfig, m: &Manifest, out_dir: &Path) -> Result<Manifest> {
    let rs = cfg.resynthesizers()?;
    let refs: Vec<&dyn Resynthesizer> = rs.iter().map(|r| r as &dyn Resynthesizer).collect();
    let aug = AugmentConfig { ratio: cfg.augmentation.ratio, seed: cfg.seed, duration: cfg.duration, mel: cfg.mel.clone() };
    augment_manifest(m, &refs, &aug, out_dir)
}

fn load_examples(m: &Manifest, features: &crate::frontend::FeaturePipeline) -> Result<Vec<Example>> {
    use rayon::prelude::*;
    m.rows()
        .par_iter()
        .map(|r| {
            let mel = features.features(&r.utt_id, &r.path).map_err(|e| e.for_utterance(&r.utt_id))?;
            Ok((mel, r.label))
        })
        .collect::<Result<Vec<(_, Label)>>>()
}
