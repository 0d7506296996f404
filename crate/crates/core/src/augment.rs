//! Copy-synthesis: analyze bona fide audio to a mel spectrogram and turn it
//! back into a waveform with a [`Resynthesizer`].

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex;

use crate::error::{Error, Result};
use crate::frontend::{fix_duration, fix_length, load_waveform, write_waveform, MelConfig, MelFrontend, MelSpec, Waveform};
use crate::harness::{Manifest, ManifestRow};
use crate::label::Label;

/// A mel-to-waveform synthesizer.
///
/// The output has the sample rate of the mel configuration; its length may
/// differ from the analyzed audio by less than one hop.
pub trait Resynthesizer: Send + Sync {
    /// Short identifier, used as the attack tag of generated rows.
    fn name(&self) -> &str;

    /// `seed` varies per utterance so that randomized synthesizers stay
    /// deterministic under parallel execution.
    fn resynthesize(&self, mel: &MelSpec, seed: u64) -> Result<Waveform>;
}

/// Stable 64-bit seed for one utterance.
pub fn utterance_seed(global: u64, utt_id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in global.to_le_bytes().iter().chain(utt_id.as_bytes()) {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhaseInit {
    Zero,
    Random(u64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GriffinLimConfig {
    pub iterations: usize,
    pub init: PhaseInit,
}

impl Default for GriffinLimConfig {
    fn default() -> Self {
        Self { iterations: 32, init: PhaseInit::Zero }
    }
}

impl GriffinLimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::config(&["augmentation.gl_iterations"], "Griffin-Lim needs at least one iteration"));
        }
        Ok(())
    }
}

/// Output of [`GriffinLim::run`].
#[derive(Clone, Debug)]
pub struct GriffinLimTrace {
    pub waveform: Waveform,
    /// Spectral distance after each iteration.
    pub distances: Vec<f64>,
    /// Target linear magnitude, `frames x bins`.
    pub target: Vec<f64>,
}

type Pinv = (MelConfig, Arc<Vec<f64>>);

/// Griffin-Lim phase recovery from a log-mel spectrogram.
///
/// The linear magnitude is estimated with the filterbank pseudo-inverse
/// (negative power clamped to zero). Iterations use the exact least-squares
/// inverse STFT; only the returned waveform uses a tapered normalizer at the
/// signal edges.
#[derive(Debug)]
pub struct GriffinLim {
    config: GriffinLimConfig,
    name: String,
    pinv: Mutex<Option<Pinv>>,
}

impl GriffinLim {
    pub fn new(config: GriffinLimConfig) -> Result<Self> {
        config.validate()?;
        let name = match config.init {
            PhaseInit::Zero => "gl",
            PhaseInit::Random(_) => "gl-random",
        };
        Ok(Self { config, name: name.into(), pinv: Mutex::new(None) })
    }

    pub fn config(&self) -> &GriffinLimConfig {
        &self.config
    }

    /// `bins x n_mels` pseudo-inverse of the filterbank for `cfg`.
    fn pseudo_inverse(&self, frontend: &MelFrontend) -> Result<Arc<Vec<f64>>> {
        let mut cache = self.pinv.lock().unwrap_or_else(|e| e.into_inner());
        if let Some((cfg, p)) = cache.as_ref() {
            if cfg == frontend.config() {
                return Ok(p.clone());
            }
        }
        let fb = frontend.filterbank();
        let m = DMatrix::from_row_slice(fb.n_mels(), fb.n_bins(), fb.weights());
        let p = m.pseudo_inverse(1e-8).map_err(|e| Error::InvalidInput(format!("filterbank pseudo-inverse: {e}")))?;
        let mut rows = Vec::with_capacity(fb.n_bins() * fb.n_mels());
        for k in 0..fb.n_bins() {
            rows.extend((0..fb.n_mels()).map(|j| p[(k, j)]));
        }
        let p = Arc::new(rows);
        *cache = Some((frontend.config().clone(), p.clone()));
        Ok(p)
    }

    /// Linear magnitude estimate, `frames x bins`.
    pub fn target_magnitude(&self, mel: &MelSpec) -> Result<(MelFrontend, Vec<f64>)> {
        let frontend = MelFrontend::new(mel.config())?;
        let pinv = self.pseudo_inverse(&frontend)?;
        let (bins, n_mels) = (frontend.stft().n_bins(), mel.n_mels());
        let mut mag = vec![0.0; mel.frames() * bins];
        for (t, out) in mag.chunks_mut(bins).enumerate() {
            let power: Vec<f64> = mel.frame(t).iter().map(|v| v.exp()).collect();
            for (k, o) in out.iter_mut().enumerate() {
                let row = &pinv[k * n_mels..(k + 1) * n_mels];
                let p: f64 = row.iter().zip(&power).map(|(a, b)| a * b).sum();
                *o = p.max(0.0).sqrt();
            }
        }
        Ok((frontend, mag))
    }

    pub fn run(&self, mel: &MelSpec, seed: u64) -> Result<GriffinLimTrace> {
        let (frontend, target) = self.target_magnitude(mel)?;
        let stft = frontend.stft();
        let bins = stft.n_bins();
        let mut spec: Vec<Complex<f64>> = match self.config.init {
            PhaseInit::Zero => target.iter().map(|&m| Complex::new(m, 0.0)).collect(),
            PhaseInit::Random(s) => {
                let mut rng = ChaCha8Rng::seed_from_u64(s ^ seed.rotate_left(32));
                target
                    .iter()
                    .map(|&m| Complex::from_polar(m, rng.gen_range(0.0..std::f64::consts::TAU)))
                    .collect()
            }
        };
        let mut distances = Vec::with_capacity(self.config.iterations);
        let mut x = stft.synthesize(&spec);
        for _ in 0..self.config.iterations {
            let est = stft.analyze(&x);
            distances.push(spectral_distance(&est, &target, bins));
            for ((s, e), &m) in spec.iter_mut().zip(&est).zip(&target) {
                let n = e.norm();
                *s = if n > 0.0 { e * (m / n) } else { Complex::new(m, 0.0) };
            }
            x = stft.synthesize(&spec);
        }
        let samples = stft.synthesize_tapered(&spec, 0.1);
        let waveform = Waveform::new(samples, mel.config().sample_rate)?;
        Ok(GriffinLimTrace { waveform, distances, target })
    }
}

impl Resynthesizer for GriffinLim {
    fn name(&self) -> &str {
        &self.name
    }

    fn resynthesize(&self, mel: &MelSpec, seed: u64) -> Result<Waveform> {
        self.run(mel, seed).map(|t| t.waveform)
    }
}

/// Frobenius distance between `|est|` and `target` over the full two-sided
/// spectrum (every bin but DC and Nyquist counted twice).
pub fn spectral_distance(est: &[Complex<f64>], target: &[f64], bins: usize) -> f64 {
    est.iter()
        .zip(target)
        .enumerate()
        .map(|(i, (e, &m))| {
            let k = i % bins;
            let w = if k == 0 || k == bins - 1 { 1.0 } else { 2.0 };
            w * (e.norm() - m).powi(2)
        })
        .sum::<f64>()
        .sqrt()
}

/// Classic Griffin-Lim on `m`.
pub fn griffin_lim(m: &MelSpec, cfg: GriffinLimConfig) -> Result<Waveform> {
    GriffinLim::new(cfg)?.resynthesize(m, 0)
}

/// Returns a fixed waveform regardless of input; for plumbing checks.
#[derive(Clone, Debug)]
pub struct Passthrough {
    source: Waveform,
}

impl Passthrough {
    pub fn new(source: Waveform) -> Self {
        Self { source }
    }
}

impl Resynthesizer for Passthrough {
    fn name(&self) -> &str {
        "identity"
    }

    fn resynthesize(&self, _mel: &MelSpec, _seed: u64) -> Result<Waveform> {
        Ok(self.source.clone())
    }
}

/// Resynthesizes `w` from its own mel spectrogram; the result has the length
/// of `w`.
pub fn copy_synthesis(w: &Waveform, r: &dyn Resynthesizer, cfg: &MelConfig, seed: u64) -> Result<Waveform> {
    let mel = MelFrontend::new(cfg)?.compute(w)?;
    let out = r.resynthesize(&mel, seed)?;
    Ok(fix_length(&out, w.len()))
}

#[derive(Clone, Debug)]
pub struct AugmentConfig {
    /// Fraction of bona fide rows to copy-synthesize.
    pub ratio: f64,
    pub seed: u64,
    /// Source audio is fixed to this duration before analysis.
    pub duration: f64,
    pub mel: MelConfig,
}

/// Appends copy-synthesized spoof rows for a seeded `ratio` fraction of the
/// bona fide rows; resynthesizers are assigned round-robin in manifest order.
/// Audio goes to `out_dir/<utt_id>_<name>.wav`. Existing rows are kept as is.
pub fn augment_manifest(manifest: &Manifest, rs: &[&dyn Resynthesizer], cfg: &AugmentConfig, out_dir: &Path) -> Result<Manifest> {
    if !(0.0..=1.0).contains(&cfg.ratio) {
        return Err(Error::config(&["augmentation.ratio"], format!("ratio {} is outside [0, 1]", cfg.ratio)));
    }
    let bona: Vec<usize> = (0..manifest.len()).filter(|&i| manifest.rows()[i].label == Label::Bonafide).collect();
    let n = (cfg.ratio * bona.len() as f64).round() as usize;
    if n == 0 {
        return Ok(manifest.clone());
    }
    if rs.is_empty() {
        return Err(Error::config(&["augmentation.resynthesizers"], "no resynthesizer configured"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut chosen = bona;
    chosen.shuffle(&mut rng);
    chosen.truncate(n);
    chosen.sort_unstable();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let frontend = MelFrontend::new(&cfg.mel)?;
    let jobs: Vec<(&ManifestRow, &dyn Resynthesizer)> =
        chosen.iter().enumerate().map(|(j, &i)| (&manifest.rows()[i], rs[j % rs.len()])).collect();
    let new_rows = jobs
        .par_iter()
        .map(|&(row, r)| -> Result<ManifestRow> {
            let id = format!("{}_{}", row.utt_id, r.name());
            let run = || -> Result<PathBuf> {
                let w = fix_duration(&load_waveform(&row.path)?, cfg.duration)?;
                let mel = frontend.compute(&w)?;
                let out = fix_length(&r.resynthesize(&mel, utterance_seed(cfg.seed, &row.utt_id))?, w.len());
                let path = out_dir.join(format!("{id}.wav"));
                write_waveform(&path, &out)?;
                Ok(path)
            };
            let path = run().map_err(|e| e.for_utterance(&row.utt_id))?;
            Ok(ManifestRow::spoof(id, path, r.name()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = manifest.clone();
    for row in new_rows {
        out.push(row)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn sine(hz: f64, n: usize) -> Waveform {
        Waveform::new((0..n).map(|i| 0.5 * (2.0 * PI * hz * i as f64 / 16_000.0).sin()).collect(), 16_000).unwrap()
    }

    #[test]
    fn zero_iterations_rejected() {
        let err = GriffinLim::new(GriffinLimConfig { iterations: 0, init: PhaseInit::Zero }).unwrap_err();
        assert!(err.is_usage());
    }

    #[test]
    fn identity_copy_synthesis_is_bit_exact() {
        let w = sine(440.0, 8000);
        let out = copy_synthesis(&w, &Passthrough::new(w.clone()), &MelConfig::default(), 0).unwrap();
        assert_eq!(out, w);
    }

    #[test]
    fn silence_and_floor_stay_silent() {
        let gl = GriffinLim::new(GriffinLimConfig::default()).unwrap();
        let silent = Waveform::new(vec![0.0; 8000], 16_000).unwrap();
        assert!(copy_synthesis(&silent, &gl, &MelConfig::default(), 0).unwrap().rms() < 1e-3);
        let floor = MelSpec::floor(40, &MelConfig::default());
        assert!(gl.resynthesize(&floor, 0).unwrap().rms() < 1e-3);
    }

    #[test]
    fn distances_do_not_increase() {
        let w = sine(700.0, 6000);
        let mel = MelFrontend::new(&MelConfig::default()).unwrap().compute(&w).unwrap();
        for init in [PhaseInit::Zero, PhaseInit::Random(3)] {
            let t = GriffinLim::new(GriffinLimConfig { iterations: 20, init }).unwrap().run(&mel, 1).unwrap();
            for d in t.distances.windows(2) {
                assert!(d[1] <= d[0] * (1.0 + 1e-9), "{} > {}", d[1], d[0]);
            }
        }
    }

    #[test]
    fn random_init_is_seeded() {
        let mel = MelFrontend::new(&MelConfig::default()).unwrap().compute(&sine(300.0, 4000)).unwrap();
        let gl = GriffinLim::new(GriffinLimConfig { iterations: 3, init: PhaseInit::Random(9) }).unwrap();
        assert_eq!(gl.resynthesize(&mel, 5).unwrap(), gl.resynthesize(&mel, 5).unwrap());
        assert_ne!(gl.resynthesize(&mel, 5).unwrap(), gl.resynthesize(&mel, 6).unwrap());
    }

    #[test]
    fn augment_counts_and_round_robin() {
        let dir = tempfile::tempdir().unwrap();
        let mut rows = Vec::new();
        for i in 0..4 {
            let p = dir.path().join(format!("b{i}.wav"));
            write_waveform(&p, &sine(200.0 + 100.0 * i as f64, 4000)).unwrap();
            rows.push(ManifestRow::bonafide(format!("b{i}"), p));
        }
        let m = Manifest::new(rows).unwrap();
        let zero = GriffinLim::new(GriffinLimConfig { iterations: 2, init: PhaseInit::Zero }).unwrap();
        let rand = GriffinLim::new(GriffinLimConfig { iterations: 2, init: PhaseInit::Random(1) }).unwrap();
        let mut cfg = AugmentConfig { ratio: 0.0, seed: 7, duration: 0.25, mel: MelConfig::default() };
        assert_eq!(augment_manifest(&m, &[&zero], &cfg, &dir.path().join("aug")).unwrap(), m);
        cfg.ratio = 1.0;
        let out = augment_manifest(&m, &[&zero, &rand], &cfg, &dir.path().join("aug")).unwrap();
        assert_eq!(&out.rows()[..4], m.rows());
        assert_eq!(out.count(Label::Spoof), 4);
        assert_eq!(out.rows().iter().filter(|r| r.attack_tag == "gl").count(), 2);
        assert_eq!(out.rows().iter().filter(|r| r.attack_tag == "gl-random").count(), 2);
        let w = load_waveform(&out.rows()[5].path).unwrap();
        assert_eq!(w.len(), 4000);
        let again = augment_manifest(&m, &[&zero, &rand], &cfg, &dir.path().join("aug2")).unwrap();
        for (a, b) in out.rows()[4..].iter().zip(&again.rows()[4..]) {
            assert_eq!(a.utt_id, b.utt_id);
            assert_eq!(std::fs::read(&a.path).unwrap(), std::fs::read(&b.path).unwrap());
        }
    }

    #[test]
    fn failures_name_the_utterance() {
        let m = Manifest::new(vec![ManifestRow::bonafide("ghost", "/nonexistent/x.wav")]).unwrap();
        let gl = GriffinLim::new(GriffinLimConfig::default()).unwrap();
        let cfg = AugmentConfig { ratio: 1.0, seed: 0, duration: 1.0, mel: MelConfig::default() };
        let dir = tempfile::tempdir().unwrap();
        match augment_manifest(&m, &[&gl], &cfg, dir.path()) {
            Err(Error::Utterance { utt_id, .. }) => assert_eq!(utt_id, "ghost"),
            other => panic!("{other:?}"),
        }
    }
}
