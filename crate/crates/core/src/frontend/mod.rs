//! Audio ingestion: WAV loading, fixed-duration normalization, log-mel
//! features and SpecAugment masking.

mod features;
mod mel;
mod specaug;
mod stft;
mod wav;

pub use features::FeaturePipeline;
pub use mel::{hz_to_mel, mel_spectrogram, mel_to_hz, MelConfig, MelFilterbank, MelFrontend, MelSpec};
pub use specaug::{spec_augment, SpecAugConfig};
pub use stft::Stft;
pub use wav::{load_waveform, write_waveform};

use crate::error::{Error, Result};

/// Mono audio with a sample rate. Never empty; every sample finite.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("waveform has no samples".into()));
        }
        if sample_rate == 0 {
            return Err(Error::InvalidInput("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("sample {i} is not finite")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        (self.samples.iter().map(|v| v * v).sum::<f64>() / self.samples.len() as f64).sqrt()
    }
}

/// Trims or cyclically repeats `w` to exactly `round(target_seconds * sr)`
/// samples.
pub fn fix_duration(w: &Waveform, target_seconds: f64) -> Result<Waveform> {
    if !(target_seconds > 0.0) || !target_seconds.is_finite() {
        return Err(Error::InvalidInput(format!("target duration {target_seconds} must be positive")));
    }
    let n = (target_seconds * w.sample_rate as f64).round() as usize;
    if n == 0 {
        return Err(Error::InvalidInput("target duration rounds to zero samples".into()));
    }
    Ok(fix_length(w, n))
}

/// Trims or cyclically repeats `w` to exactly `n >= 1` samples.
pub fn fix_length(w: &Waveform, n: usize) -> Waveform {
    assert!(n >= 1, "target length must be positive");
    let samples = w.samples.iter().copied().cycle().take(n).collect();
    Waveform { samples, sample_rate: w.sample_rate }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(n: usize) -> Waveform {
        Waveform::new((0..n).map(|i| i as f64 / n as f64).collect(), 16_000).unwrap()
    }

    #[test]
    fn short_input_repeats_cyclically() {
        let w = ramp(32_000);
        let out = fix_duration(&w, 4.0).unwrap();
        assert_eq!(out.len(), 64_000);
        for i in 0..32_000 {
            assert_eq!(out.samples()[32_000 + i], w.samples()[i]);
        }
    }

    #[test]
    fn long_input_is_truncated_to_a_prefix() {
        let w = ramp(96_000);
        let out = fix_duration(&w, 4.0).unwrap();
        assert_eq!(out.samples(), &w.samples()[..64_000]);
    }

    #[test]
    fn exact_length_is_unchanged() {
        let w = ramp(64_000);
        assert_eq!(fix_duration(&w, 4.0).unwrap(), w);
    }

    #[test]
    fn invalid_waveforms_are_rejected() {
        assert!(Waveform::new(vec![], 16_000).is_err());
        assert!(Waveform::new(vec![0.0], 0).is_err());
        assert!(Waveform::new(vec![f64::NAN], 16_000).is_err());
        assert!(fix_duration(&ramp(10), 0.0).is_err());
    }

    proptest! {
        #[test]
        fn output_length_and_repetition_identity(len in 1usize..5000, target_ms in 1u32..600) {
            let w = Waveform::new((0..len).map(|i| (i as f64).sin()).collect(), 8_000).unwrap();
            let t = target_ms as f64 / 1000.0;
            let out = fix_duration(&w, t).unwrap();
            let n = (t * 8_000.0).round() as usize;
            prop_assert_eq!(out.len(), n);
            for (i, v) in out.samples().iter().enumerate() {
                prop_assert_eq!(*v, w.samples()[i % len]);
            }
        }
    }
}
