use std::path::{Path, PathBuf};

use super::{fix_duration, load_waveform, MelConfig, MelFrontend, MelSpec};
use crate::error::{Error, Result};

/// File to fixed-duration log-mel features, with an optional on-disk cache
/// keyed by utterance id.
///
/// Cached features are stored as f32 and are trusted as long as their bin
/// count matches; clear the cache directory after changing audio or
/// frontend settings.
#[derive(Clone, Debug)]
pub struct FeaturePipeline {
    frontend: MelFrontend,
    duration: f64,
    cache_dir: Option<PathBuf>,
}

impl FeaturePipeline {
    pub fn new(mel: &MelConfig, duration: f64, cache_dir: Option<PathBuf>) -> Result<Self> {
        if !(duration > 0.0) || !duration.is_finite() {
            return Err(Error::config(&["frontend.duration"], format!("duration {duration} must be positive")));
        }
        let n = (duration * mel.sample_rate as f64).round() as usize;
        if n < mel.win_length() {
            return Err(Error::config(&["frontend.duration", "frontend.frame_length"], "duration is shorter than one frame"));
        }
        Ok(Self { frontend: MelFrontend::new(mel)?, duration, cache_dir })
    }

    pub fn frontend(&self) -> &MelFrontend {
        &self.frontend
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    /// Number of frames every utterance yields.
    pub fn frames(&self) -> usize {
        let cfg = self.frontend.config();
        cfg.n_frames((self.duration * cfg.sample_rate as f64).round() as usize)
    }

    pub fn features(&self, utt_id: &str, path: &Path) -> Result<MelSpec> {
        let cache = self.cache_dir.as_ref().map(|d| d.join(format!("{utt_id}.mel")));
        if let Some(c) = cache.as_ref().filter(|c| c.exists()) {
            return MelSpec::read_cache(c, self.frontend.config());
        }
        let mel = self.frontend.compute(&fix_duration(&load_waveform(path)?, self.duration)?)?;
        match cache {
            Some(c) => {
                if let Some(dir) = c.parent() {
                    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                mel.write_cache(&c)?;
                // Reload so first and later calls see the same f32-rounded values.
                MelSpec::read_cache(&c, self.frontend.config())
            }
            None => Ok(mel),
        }
    }
}
