//! Mini-batch training with class-weighted cross-entropy and Adam.

use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::augment::utterance_seed;
use crate::branch::Logits;
use crate::error::{Error, Result};
use crate::evaluation::{compute_eer, Eer};
use crate::frontend::{spec_augment, MelSpec, SpecAugConfig};
use crate::label::Label;
use crate::model::Detector;
use crate::nn::{Adam, Gradients};

/// Per-class loss multipliers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassWeights {
    pub fake: f64,
    pub real: f64,
}

impl Default for ClassWeights {
    fn default() -> Self {
        Self { fake: 0.1, real: 0.9 }
    }
}

impl ClassWeights {
    pub fn new(fake: f64, real: f64) -> Result<Self> {
        let w = Self { fake, real };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fake > 0.0 && self.real > 0.0) || !self.fake.is_finite() || !self.real.is_finite() {
            return Err(Error::config(
                &["training.w_fake", "training.w_real"],
                format!("class weights must be positive, got ({}, {})", self.fake, self.real),
            ));
        }
        Ok(())
    }

    pub fn weight(&self, label: Label) -> f64 {
        match label {
            Label::Spoof => self.fake,
            Label::Bonafide => self.real,
        }
    }
}

/// `-w_label * log softmax(l)[label]`.
pub fn weighted_cross_entropy(l: &Logits, label: Label, cw: &ClassWeights) -> f64 {
    let z = l.as_array();
    let m = z[0].max(z[1]);
    let lse = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln();
    cw.weight(label) * (lse - z[label.class_index()])
}

/// Mean of per-sample weighted losses; no renormalization by weight sum.
pub fn batch_loss(samples: &[(Logits, Label)], cw: &ClassWeights) -> f64 {
    samples.iter().map(|(l, y)| weighted_cross_entropy(l, *y, cw)).sum::<f64>() / samples.len() as f64
}

/// Predicted label: bona fide iff the real logit is at least the fake one.
pub fn predict(l: &Logits) -> Label {
    if l.real >= l.fake {
        Label::Bonafide
    } else {
        Label::Spoof
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub class_weights: ClassWeights,
    /// Checkpoint after every `n` epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub spec_augment: Option<SpecAugConfig>,
}

impl TrainConfig {
    /// Batch 8, 3 epochs.
    pub fn desk() -> Self {
        Self {
            batch_size: 8,
            epochs: 3,
            lr: 1e-4,
            seed: 0,
            class_weights: ClassWeights::default(),
            checkpoint_every: 1,
            spec_augment: Some(SpecAugConfig::default()),
        }
    }

    /// Batch 32, 20 epochs.
    pub fn paper_scale() -> Self {
        Self { batch_size: 32, epochs: 20, ..Self::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::config(&["training.batch_size"], "batch size must be at least 1"));
        }
        if self.epochs < 1 {
            return Err(Error::config(&["training.epochs"], "need at least one epoch"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::config(&["training.lr"], format!("invalid learning rate {}", self.lr)));
        }
        self.class_weights.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean per-sample weighted loss, measured before each step.
    pub loss: f64,
    pub accuracy: f64,
    pub wallclock_s: f64,
    pub dev_eer: Option<f64>,
}

impl EpochMetrics {
    /// `epoch<TAB>train_loss<TAB>train_acc<TAB>wallclock_s`.
    pub fn log_line(&self) -> String {
        format!("{}\t{:.6}\t{:.4}\t{:.3}", self.epoch, self.loss, self.accuracy, self.wallclock_s)
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    pub history: Vec<EpochMetrics>,
    pub steps: usize,
    pub checkpoints: Vec<PathBuf>,
}

/// In-memory labeled features.
pub type Example = (MelSpec, Label);

/// Trains `model` in place.
///
/// Each epoch visits a seeded permutation of `data` in batches; per-sample
/// gradients are computed in parallel and summed in batch order, so results
/// do not depend on the thread count. When `out_dir` is given, it receives
/// `metrics.tsv` (one line per epoch), `dev.tsv` when `dev` is non-empty,
/// `epoch_NNN.ckpt` checkpoints and `final.ckpt`.
pub fn train(model: &mut Detector, data: &[Example], dev: &[Example], cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !data.iter().any(|d| d.1 == Label::Bonafide) || !data.iter().any(|d| d.1 == Label::Spoof) {
        return Err(Error::InvalidInput("training data must contain both bona fide and spoof utterances".into()));
    }
    let mut logs = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let metrics = create(&dir.join("metrics.tsv"))?;
            let dev_log = if dev.is_empty() { None } else { Some(create(&dir.join("dev.tsv"))?) };
            Some((dir.to_path_buf(), metrics, dev_log))
        }
        None => None,
    };
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(model.params(), cfg.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut outcome = TrainOutcome::default();
    let scale = 1.0 / cfg.batch_size as f64;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let shared = &*model;
            let results = batch
                .par_iter()
                .map(|&i| {
                    let (mel, label) = &data[i];
                    let input = match &cfg.spec_augment {
                        Some(sa) => {
                            let seed = utterance_seed(cfg.seed ^ (epoch as u64).rotate_left(40), &i.to_string());
                            spec_augment(mel, sa, &mut ChaCha8Rng::seed_from_u64(seed))
                        }
                        None => mel.clone(),
                    };
                    shared.loss_and_gradients(&input, *label, &cfg.class_weights, scale)
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| match e {
                    // Inputs that went through a step already are valid, so
                    // a failure now means the parameters blew up.
                    Error::InvalidInput(m) if outcome.steps > 0 => {
                        Error::Diverged(format!("epoch {epoch}, step {}: {m}", outcome.steps + 1))
                    }
                    other => other,
                })?;
            let mut grads = Gradients::empty(model.params().len());
            for ((loss, logits, g), &i) in results.into_iter().zip(batch) {
                if !loss.is_finite() {
                    return Err(Error::Diverged(format!(
                        "epoch {epoch}, step {}: non-finite loss on training example {i}",
                        outcome.steps + 1
                    )));
                }
                loss_sum += weighted_cross_entropy(&logits, data[i].1, &cfg.class_weights);
                correct += (predict(&logits) == data[i].1) as usize;
                grads.merge(&g);
            }
            opt.step(model.params_mut(), &grads);
            outcome.steps += 1;
        }
        let dev_eer = if dev.is_empty() { None } else { Some(evaluate(model, dev, &cfg.class_weights)?.eer?.eer) };
        let m = EpochMetrics {
            epoch,
            loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
            wallclock_s: start.elapsed().as_secs_f64(),
            dev_eer,
        };
        if let Some((dir, metrics, dev_log)) = logs.as_mut() {
            append(metrics, &dir.join("metrics.tsv"), &m.log_line())?;
            if let (Some(f), Some(e)) = (dev_log.as_mut(), dev_eer) {
                append(f, &dir.join("dev.tsv"), &format!("{epoch}\t{e:.6}"))?;
            }
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                let p = dir.join(format!("epoch_{epoch:03}.ckpt"));
                model.save(&p)?;
                outcome.checkpoints.push(p);
            }
        }
        outcome.history.push(m);
    }
    if let Some((dir, _, _)) = logs {
        let p = dir.join("final.ckpt");
        model.save(&p)?;
        outcome.checkpoints.push(p);
    }
    Ok(outcome)
}

/// Loss, accuracy and (if both classes are present) EER of `model` on
/// `data`, without augmentation.
#[derive(Debug)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub eer: Result<Eer>,
    pub logits: Vec<Logits>,
}

pub fn evaluate(model: &Detector, data: &[Example], cw: &ClassWeights) -> Result<Evaluation> {
    let logits = data.par_iter().map(|(mel, _)| model.logits(mel)).collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(Logits, Label)> = logits.iter().copied().zip(data.iter().map(|d| d.1)).collect();
    let correct = pairs.iter().filter(|(l, y)| predict(l) == *y).count();
    let scores: Vec<(f64, Label)> = pairs.iter().map(|(l, y)| (crate::branch::score(l), *y)).collect();
    Ok(Evaluation {
        loss: batch_loss(&pairs, cw),
        accuracy: correct as f64 / data.len().max(1) as f64,
        eer: compute_eer(&scores),
        logits,
    })
}

fn create(path: &Path) -> Result<File> {
    OpenOptions::new().create(true).write(true).truncate(true).open(path).map_err(|e| Error::io(path, e))
}

fn append(f: &mut File, path: &Path, line: &str) -> Result<()> {
    let mut s = String::with_capacity(line.len() + 1);
    let _ = writeln!(s, "{line}");
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits() {
        let l = Logits { fake: 0.0, real: 0.0 };
        let cw = ClassWeights::default();
        assert!((weighted_cross_entropy(&l, Label::Bonafide, &cw) - 0.9 * 2f64.ln()).abs() < 1e-12);
        assert!((weighted_cross_entropy(&l, Label::Spoof, &cw) - 0.1 * 2f64.ln()).abs() < 1e-12);
        let sat = Logits { fake: -20.0, real: 20.0 };
        assert!(weighted_cross_entropy(&sat, Label::Bonafide, &cw) < 1e-8);
    }

    #[test]
    fn large_logits_stay_finite() {
        let l = Logits { fake: 800.0, real: -800.0 };
        let v = weighted_cross_entropy(&l, Label::Bonafide, &ClassWeights::new(1.0, 1.0).unwrap());
        assert!((v - 1600.0).abs() < 1e-9);
    }

    #[test]
    fn config_validation() {
        assert!(ClassWeights::new(0.0, 1.0).is_err());
        let mut c = TrainConfig::desk();
        c.batch_size = 0;
        assert!(c.validate().unwrap_err().is_usage());
        assert_eq!(TrainConfig::paper_scale().batch_size, 32);
    }
}
