//! Equal error rate, score files and score-level ensembles.
//!
//! EER convention: thresholds are the sorted unique scores followed by +inf,
//! and a trial is accepted iff `score >= t`. With `d_i = FAR_i - FRR_i`
//! (non-increasing from 1 to -1), let `i` be the first operating point with
//! `d_i <= 0`. If `d_i == 0` the EER is `FAR_i`; otherwise it is
//! `FAR_{i-1} + a (FAR_i - FAR_{i-1})` with `a = d_{i-1} / (d_{i-1} - d_i)`.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::frontend::FeaturePipeline;
use crate::harness::Manifest;
use crate::label::Label;
use crate::model::Detector;

/// One scored utterance; higher scores mean more bona fide.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialScore {
    pub utt_id: String,
    pub label: Option<Label>,
    pub score: f64,
}

impl TrialScore {
    pub fn new(utt_id: impl Into<String>, label: Option<Label>, score: f64) -> Self {
        Self { utt_id: utt_id.into(), label, score }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Eer {
    /// In `[0, 1]`.
    pub eer: f64,
    /// Finite score whose operating point minimizes `|FAR - FRR|`.
    pub threshold: f64,
}

/// One row of the FAR/FRR sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// FAR and FRR at every unique score and at +inf.
pub fn operating_points(scores: &[(f64, Label)]) -> Result<Vec<OperatingPoint>> {
    let n_bona = scores.iter().filter(|s| s.1 == Label::Bonafide).count();
    let n_spoof = scores.len() - n_bona;
    if n_bona == 0 || n_spoof == 0 {
        return Err(Error::InvalidInput("EER needs at least one bona fide and one spoof trial".into()));
    }
    if let Some(s) = scores.iter().find(|s| !s.0.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite score {}", s.0)));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut points = Vec::new();
    // Counts of trials strictly below the current threshold.
    let (mut bona_below, mut spoof_below) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        points.push(OperatingPoint {
            threshold: t,
            far: (n_spoof - spoof_below) as f64 / n_spoof as f64,
            frr: bona_below as f64 / n_bona as f64,
        });
        while i < sorted.len() && sorted[i].0 == t {
            match sorted[i].1 {
                Label::Bonafide => bona_below += 1,
                Label::Spoof => spoof_below += 1,
            }
            i += 1;
        }
    }
    points.push(OperatingPoint { threshold: f64::INFINITY, far: 0.0, frr: 1.0 });
    Ok(points)
}

pub fn compute_eer(scores: &[(f64, Label)]) -> Result<Eer> {
    let points = operating_points(scores)?;
    let d = |p: &OperatingPoint| p.far - p.frr;
    let i = points.iter().position(|p| d(p) <= 0.0).expect("last point has FAR 0 and FRR 1");
    let eer = if d(&points[i]) == 0.0 || i == 0 {
        points[i].far
    } else {
        let (a, b) = (&points[i - 1], &points[i]);
        let alpha = d(a) / (d(a) - d(b));
        a.far + alpha * (b.far - a.far)
    };
    let finite = &points[..points.len() - 1];
    let best = finite
        .iter()
        .min_by(|a, b| d(a).abs().total_cmp(&d(b).abs()))
        .expect("at least two trials");
    Ok(Eer { eer, threshold: best.threshold })
}

/// EER of trials that all carry labels.
pub fn eer_of(trials: &[TrialScore]) -> Result<Eer> {
    let pairs = trials
        .iter()
        .map(|t| t.label.map(|l| (t.score, l)).ok_or_else(|| Error::InvalidInput(format!("trial {} has no label", t.utt_id))))
        .collect::<Result<Vec<_>>>()?;
    compute_eer(&pairs)
}

/// `EER<TAB>percentage` with four decimals.
pub fn eer_report(eer: f64) -> String {
    format!("EER\t{:.4}", 100.0 * eer)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Normalization {
    #[default]
    None,
    /// Each system rescaled to `[0, 1]` before weighting.
    MinMax,
}

#[derive(Clone, Debug)]
pub struct EnsembleSpec {
    pub systems: Vec<Vec<TrialScore>>,
    pub weights: Vec<f64>,
    pub normalization: Normalization,
}

impl EnsembleSpec {
    pub fn new(systems: Vec<Vec<TrialScore>>, weights: Vec<f64>) -> Self {
        Self { systems, weights, normalization: Normalization::None }
    }

    pub fn weights_sum_to_one(&self) -> bool {
        (self.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-9
    }
}

/// `score(u) = sum_j w_j score_j(u)`, in the utterance order of the first
/// system; labels come from the first system.
pub fn ensemble_scores(spec: &EnsembleSpec) -> Result<Vec<TrialScore>> {
    if spec.systems.is_empty() || spec.systems.len() != spec.weights.len() {
        return Err(Error::InvalidInput(format!(
            "{} score sets but {} weights",
            spec.systems.len(),
            spec.weights.len()
        )));
    }
    if let Some(w) = spec.weights.iter().find(|w| !w.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite ensemble weight {w}")));
    }
    let first = &spec.systems[0];
    let ids: HashSet<&str> = first.iter().map(|t| t.utt_id.as_str()).collect();
    if ids.len() != first.len() {
        return Err(Error::InvalidInput("system 1 repeats an utterance id".into()));
    }
    let mut lookups = Vec::with_capacity(spec.systems.len());
    for (j, sys) in spec.systems.iter().enumerate() {
        let map: HashMap<&str, f64> = sys.iter().map(|t| (t.utt_id.as_str(), t.score)).collect();
        let mut missing: Vec<&str> = ids.iter().filter(|id| !map.contains_key(*id)).copied().collect();
        let mut extra: Vec<&str> = map.keys().filter(|id| !ids.contains(*id)).copied().collect();
        if !missing.is_empty() || !extra.is_empty() || map.len() != sys.len() {
            missing.sort_unstable();
            extra.sort_unstable();
            return Err(Error::InvalidInput(format!(
                "system {} does not cover the same utterances as system 1: missing [{}], unexpected [{}]",
                j + 1,
                missing.join(", "),
                extra.join(", ")
            )));
        }
        let (lo, hi) = sys.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), t| (l.min(t.score), h.max(t.score)));
        lookups.push((map, lo, hi));
    }
    Ok(first
        .iter()
        .map(|t| {
            let score = lookups
                .iter()
                .zip(&spec.weights)
                .map(|((map, lo, hi), w)| {
                    let s = map[t.utt_id.as_str()];
                    let s = match spec.normalization {
                        Normalization::None => s,
                        Normalization::MinMax if hi > lo => (s - lo) / (hi - lo),
                        Normalization::MinMax => 0.0,
                    };
                    w * s
                })
                .sum();
            TrialScore { utt_id: t.utt_id.clone(), label: t.label, score }
        })
        .collect())
}

/// Scores every manifest row with `model`; no augmentation is applied.
pub fn score_manifest(model: &Detector, manifest: &Manifest, features: &FeaturePipeline) -> Result<Vec<TrialScore>> {
    manifest
        .rows()
        .par_iter()
        .map(|row| {
            let run = || model.score(&features.features(&row.utt_id, &row.path)?);
            let score = run().map_err(|e| e.for_utterance(&row.utt_id))?;
            Ok(TrialScore::new(row.utt_id.clone(), Some(row.label), score))
        })
        .collect()
}

pub fn scores_to_text(trials: &[TrialScore]) -> String {
    let mut out = String::new();
    for t in trials {
        let _ = writeln!(out, "{}\t{}", t.utt_id, t.score);
    }
    out
}

pub fn parse_scores(text: &str, origin: &Path) -> Result<Vec<TrialScore>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let err = |message: String| Error::Parse { path: origin.to_path_buf(), line: i + 1, message };
        if line.trim().is_empty() {
            continue;
        }
        let Some((id, score)) = line.split_once('\t') else {
            return Err(err("expected `utt_id<TAB>score`".into()));
        };
        let score: f64 = score.trim().parse().map_err(|_| err(format!("invalid score {score:?}")))?;
        if !score.is_finite() {
            return Err(err(format!("non-finite score for {id}")));
        }
        if !seen.insert(id.to_string()) {
            return Err(err(format!("duplicate utterance id {id}")));
        }
        out.push(TrialScore::new(id, None, score));
    }
    Ok(out)
}

pub fn read_scores(path: &Path) -> Result<Vec<TrialScore>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scores(&text, path)
}

pub fn write_scores(path: &Path, trials: &[TrialScore]) -> Result<()> {
    std::fs::write(path, scores_to_text(trials)).map_err(|e| Error::io(path, e))
}

/// Parses `utt_id<TAB>{bonafide|spoof}` lines or manifest rows.
pub fn parse_protocol(text: &str, origin: &Path) -> Result<HashMap<String, Label>> {
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let err = |message: String| Error::Parse { path: origin.to_path_buf(), line: i + 1, message };
        if line.trim().is_empty() {
            continue;
        }
        // Manifests double as protocols.
        let (id, label) = match line.split('\t').collect::<Vec<_>>()[..] {
            [id, label] | [id, _, label, _] => (id, label),
            _ => return Err(err("expected `utt_id<TAB>label` or a manifest row".into())),
        };
        let label: Label = label.trim().parse().map_err(|_| err(format!("unknown label {label:?}")))?;
        if out.insert(id.to_string(), label).is_some() {
            return Err(err(format!("duplicate utterance id {id}")));
        }
    }
    Ok(out)
}

pub fn read_protocol(path: &Path) -> Result<HashMap<String, Label>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_protocol(&text, path)
}

/// Labels every trial from `protocol`; a trial without a protocol entry is
/// an error.
pub fn attach_labels(trials: &mut [TrialScore], protocol: &HashMap<String, Label>) -> Result<()> {
    let mut missing = Vec::new();
    for t in trials.iter_mut() {
        match protocol.get(&t.utt_id) {
            Some(&l) => t.label = Some(l),
            None => missing.push(t.utt_id.clone()),
        }
    }
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("no protocol label for [{}]", missing.join(", "))))
    }
}
