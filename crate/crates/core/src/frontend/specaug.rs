use rand::Rng;

use super::MelSpec;

#[derive(Clone, Debug, PartialEq)]
pub struct SpecAugConfig {
    pub n_freq_masks: usize,
    /// Mel bins.
    pub max_freq_width: usize,
    pub n_time_masks: usize,
    /// Frames.
    pub max_time_width: usize,
    pub fill_value: f64,
}

impl Default for SpecAugConfig {
    fn default() -> Self {
        Self {
            n_freq_masks: 2,
            max_freq_width: 16,
            n_time_masks: 2,
            max_time_width: 40,
            fill_value: 1e-10f64.ln(),
        }
    }
}

impl SpecAugConfig {
    /// No masks at all.
    pub fn disabled() -> Self {
        Self { n_freq_masks: 0, n_time_masks: 0, ..Self::default() }
    }
}

/// Overwrites random frequency bands, then random time bands, with
/// `fill_value`. Widths are uniform in `[0, max_width]` (clipped to the
/// spectrogram size); every other cell is left untouched.
pub fn spec_augment<R: Rng + ?Sized>(m: &MelSpec, cfg: &SpecAugConfig, rng: &mut R) -> MelSpec {
    let mut out = m.clone();
    let (frames, n_mels) = (m.frames(), m.n_mels());
    let values = out.values_mut();
    for _ in 0..cfg.n_freq_masks {
        let (start, width) = draw_band(rng, cfg.max_freq_width, n_mels);
        for row in values.chunks_mut(n_mels) {
            row[start..start + width].iter_mut().for_each(|v| *v = cfg.fill_value);
        }
    }
    for _ in 0..cfg.n_time_masks {
        let (start, width) = draw_band(rng, cfg.max_time_width, frames);
        values[start * n_mels..(start + width) * n_mels].iter_mut().for_each(|v| *v = cfg.fill_value);
    }
    out
}

fn draw_band<R: Rng + ?Sized>(rng: &mut R, max_width: usize, size: usize) -> (usize, usize) {
    let width = rng.gen_range(0..=max_width.min(size));
    let start = rng.gen_range(0..=size - width);
    (start, width)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::MelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp_mel() -> MelSpec {
        let cfg = MelConfig::default();
        let values = (0..100 * 128).map(|i| (i % 977) as f64 * 0.01).collect();
        MelSpec::new(100, 128, values, cfg).unwrap()
    }

    #[test]
    fn zero_masks_is_identity() {
        let m = ramp_mel();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(spec_augment(&m, &SpecAugConfig::disabled(), &mut rng), m);
    }

    #[test]
    fn single_frequency_mask_is_one_contiguous_band() {
        let m = ramp_mel();
        let cfg = SpecAugConfig { n_freq_masks: 1, max_freq_width: 16, n_time_masks: 0, ..Default::default() };
        for seed in 0..50 {
            let out = spec_augment(&m, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            let changed: Vec<usize> = (0..128).filter(|&b| out.get(0, b) != m.get(0, b)).collect();
            assert!(changed.len() <= 16);
            if let (Some(&lo), Some(&hi)) = (changed.first(), changed.last()) {
                assert_eq!(hi - lo + 1, changed.len(), "band must be contiguous");
            }
            for t in 0..m.frames() {
                for b in 0..128 {
                    if changed.contains(&b) {
                        assert_eq!(out.get(t, b), cfg.fill_value);
                    } else {
                        assert_eq!(out.get(t, b), m.get(t, b));
                    }
                }
            }
        }
    }

    #[test]
    fn same_seed_same_masks() {
        let m = ramp_mel();
        let cfg = SpecAugConfig::default();
        let a = spec_augment(&m, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        let b = spec_augment(&m, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert_eq!((a.frames(), a.n_mels()), (m.frames(), m.n_mels()));
    }

    #[test]
    fn oversized_widths_are_clipped() {
        let cfg = MelConfig { n_mels: 4, ..MelConfig::default() };
        let m = MelSpec::new(3, 4, vec![1.0; 12], cfg).unwrap();
        let aug = SpecAugConfig { n_freq_masks: 3, max_freq_width: 50, n_time_masks: 3, max_time_width: 50, fill_value: 0.0 };
        for seed in 0..20 {
            let out = spec_augment(&m, &aug, &mut ChaCha8Rng::seed_from_u64(seed));
            assert!(out.values().iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }
}
