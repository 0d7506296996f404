use std::fs;
use std::path::Path;

use super::{Stft, Waveform};
use crate::error::{Error, Result};

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MelConfig {
    pub sample_rate: u32,
    /// Seconds.
    pub frame_length: f64,
    /// Seconds.
    pub frame_shift: f64,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            frame_length: 0.025,
            frame_shift: 0.010,
            n_mels: 128,
            fmin: 0.0,
            fmax: 8_000.0,
            log_floor: 1e-10,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |keys: &[&str], msg: String| Err(Error::config(keys, msg));
        if self.sample_rate == 0 {
            return bad(&["frontend.sample_rate"], "sample rate must be positive".into());
        }
        if !(self.frame_shift > 0.0) || self.frame_length < self.frame_shift {
            return bad(
                &["frontend.frame_length", "frontend.frame_shift"],
                format!("need frame_length >= frame_shift > 0, got {} and {}", self.frame_length, self.frame_shift),
            );
        }
        if self.hop_length() == 0 {
            return bad(&["frontend.frame_shift"], "frame shift is shorter than one sample".into());
        }
        if self.n_mels == 0 {
            return bad(&["frontend.n_mels"], "n_mels must be at least 1".into());
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= nyquist) {
            return bad(
                &["frontend.fmin", "frontend.fmax"],
                format!("need 0 <= fmin < fmax <= {nyquist}, got {} and {}", self.fmin, self.fmax),
            );
        }
        if !(self.log_floor > 0.0) {
            return bad(&["frontend.log_floor"], "log floor must be positive".into());
        }
        Ok(())
    }

    pub fn win_length(&self) -> usize {
        (self.frame_length * self.sample_rate as f64).round() as usize
    }

    pub fn hop_length(&self) -> usize {
        (self.frame_shift * self.sample_rate as f64).round() as usize
    }

    pub fn n_fft(&self) -> usize {
        self.win_length().next_power_of_two()
    }

    /// `1 + floor((len - win) / hop)`, or 0 when the signal is shorter than
    /// one frame.
    pub fn n_frames(&self, n_samples: usize) -> usize {
        let win = self.win_length();
        if n_samples < win {
            0
        } else {
            1 + (n_samples - win) / self.hop_length()
        }
    }

    pub fn floor_value(&self) -> f64 {
        self.log_floor.ln()
    }
}

/// Triangular filters on the HTK mel scale, without area normalization.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    n_mels: usize,
    n_bins: usize,
    /// Row-major `n_mels x n_bins`.
    weights: Vec<f64>,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: u32, fmin: f64, fmax: f64) -> Self {
        let n_bins = n_fft / 2 + 1;
        let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = |k: usize| k as f64 * sample_rate as f64 / n_fft as f64;
        let mut weights = vec![0.0; n_mels * n_bins];
        for m in 0..n_mels {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..n_bins {
                let f = bin_hz(k);
                let w = ((f - l) / (c - l)).min((r - f) / (r - c));
                weights[m * n_bins + k] = w.max(0.0);
            }
        }
        Self { n_mels, n_bins, weights, centers_hz: edges[1..=n_mels].to_vec() }
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn center_frequencies(&self) -> &[f64] {
        &self.centers_hz
    }

    /// Index of the filter whose center is closest to `hz`.
    pub fn nearest_bin(&self, hz: f64) -> usize {
        (0..self.n_mels)
            .min_by(|&a, &b| (self.centers_hz[a] - hz).abs().total_cmp(&(self.centers_hz[b] - hz).abs()))
            .unwrap_or(0)
    }

    /// Mel energies of one power-spectrum frame.
    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate() {
            let row = &self.weights[m * self.n_bins..(m + 1) * self.n_bins];
            *o = row.iter().zip(power).map(|(w, p)| w * p).sum();
        }
    }
}

/// Log-mel matrix, `frames x n_mels`, frame-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpec {
    frames: usize,
    n_mels: usize,
    values: Vec<f64>,
    config: MelConfig,
}

const MEL_CACHE_MAGIC: &[u8; 4] = b"MEL1";

impl MelSpec {
    pub fn new(frames: usize, n_mels: usize, values: Vec<f64>, config: MelConfig) -> Result<Self> {
        if frames == 0 || n_mels == 0 {
            return Err(Error::InvalidInput("mel spectrogram needs at least one frame and one bin".into()));
        }
        if values.len() != frames * n_mels {
            return Err(Error::Shape(format!("{} values for {frames} x {n_mels}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("mel spectrogram contains non-finite values".into()));
        }
        Ok(Self { frames, n_mels, values, config })
    }

    /// A spectrogram with every entry at the log floor.
    pub fn floor(frames: usize, config: &MelConfig) -> Self {
        let v = config.floor_value();
        Self { frames, n_mels: config.n_mels, values: vec![v; frames * config.n_mels], config: config.clone() }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn config(&self) -> &MelConfig {
        &self.config
    }

    pub fn get(&self, frame: usize, bin: usize) -> f64 {
        self.values[frame * self.n_mels + bin]
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.values[t * self.n_mels..(t + 1) * self.n_mels]
    }

    /// Mean log-energy of each mel bin over all frames.
    pub fn mean_over_frames(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_mels];
        for row in self.values.chunks(self.n_mels) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= self.frames as f64);
        out
    }

    /// Mel bin with the largest frame-averaged log energy.
    pub fn dominant_bin(&self) -> usize {
        let m = self.mean_over_frames();
        (0..m.len()).max_by(|&a, &b| m[a].total_cmp(&m[b])).unwrap_or(0)
    }

    /// Serializes as `MEL1`, frames (u32 LE), n_mels (u32 LE), then
    /// row-major f32 LE values.
    pub fn to_cache_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.values.len());
        out.extend_from_slice(MEL_CACHE_MAGIC);
        out.extend_from_slice(&(self.frames as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_mels as u32).to_le_bytes());
        for &v in &self.values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_cache_bytes(bytes: &[u8], config: &MelConfig) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MEL_CACHE_MAGIC {
            return Err(Error::InvalidInput("not a MEL1 cache".into()));
        }
        let frames = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let n_mels = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if n_mels != config.n_mels {
            return Err(Error::Shape(format!("cache has {n_mels} mel bins, config expects {}", config.n_mels)));
        }
        let body = &bytes[12..];
        if body.len() != 4 * frames * n_mels {
            return Err(Error::Shape(format!("cache body holds {} bytes, expected {}", body.len(), 4 * frames * n_mels)));
        }
        let values = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        Self::new(frames, n_mels, values, config.clone())
    }

    pub fn write_cache(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_cache_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_cache(path: &Path, config: &MelConfig) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_cache_bytes(&bytes, config)
    }
}

/// Reusable log-mel analyzer (filterbank, window and FFT plan built once).
#[derive(Clone, Debug)]
pub struct MelFrontend {
    config: MelConfig,
    stft: Stft,
    filterbank: MelFilterbank,
}

impl MelFrontend {
    pub fn new(config: &MelConfig) -> Result<Self> {
        config.validate()?;
        let stft = Stft::new(config.win_length(), config.hop_length());
        let filterbank =
            MelFilterbank::new(config.n_mels, stft.n_fft(), config.sample_rate, config.fmin, config.fmax);
        Ok(Self { config: config.clone(), stft, filterbank })
    }

    pub fn config(&self) -> &MelConfig {
        &self.config
    }

    pub fn stft(&self) -> &Stft {
        &self.stft
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    pub fn compute(&self, w: &Waveform) -> Result<MelSpec> {
        if w.sample_rate() != self.config.sample_rate {
            return Err(Error::InvalidInput(format!(
                "waveform is {} Hz but the frontend expects {} Hz",
                w.sample_rate(),
                self.config.sample_rate
            )));
        }
        let frames = self.stft.n_frames(w.len());
        if frames == 0 {
            return Err(Error::InvalidInput(format!(
                "audio has {} samples, shorter than one {}-sample frame",
                w.len(),
                self.stft.win()
            )));
        }
        let power = self.stft.power(w.samples());
        let (bins, n_mels) = (self.stft.n_bins(), self.config.n_mels);
        let floor = self.config.log_floor;
        let mut values = vec![0.0; frames * n_mels];
        for (p, out) in power.chunks(bins).zip(values.chunks_mut(n_mels)) {
            self.filterbank.apply(p, out);
            out.iter_mut().for_each(|v| *v = v.max(floor).ln());
        }
        MelSpec::new(frames, n_mels, values, self.config.clone())
    }
}

/// Log-mel spectrogram of `w`; see [`MelFrontend`] for repeated use.
pub fn mel_spectrogram(w: &Waveform, cfg: &MelConfig) -> Result<MelSpec> {
    MelFrontend::new(cfg)?.compute(w)
}
