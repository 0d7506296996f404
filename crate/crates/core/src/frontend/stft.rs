use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

/// Short-time Fourier transform without center padding.
///
/// Frames start at multiples of `hop`; each is multiplied by a periodic Hann
/// window of length `win` and zero-padded to `n_fft = win.next_power_of_two()`.
/// Spectra are one-sided (`n_fft / 2 + 1` bins), stored frame-major.
#[derive(Clone)]
pub struct Stft {
    win: usize,
    hop: usize,
    n_fft: usize,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft").field("win", &self.win).field("hop", &self.hop).field("n_fft", &self.n_fft).finish()
    }
}

impl Stft {
    pub fn new(win: usize, hop: usize) -> Self {
        assert!(win >= 1 && hop >= 1, "window and hop must be positive");
        let n_fft = win.next_power_of_two();
        let window = (0..win)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / win as f64).cos())
            .collect();
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(n_fft);
        let inverse = planner.plan_fft_inverse(n_fft);
        Self { win, hop, n_fft, window, forward, inverse }
    }

    pub fn win(&self) -> usize {
        self.win
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn n_frames(&self, len: usize) -> usize {
        if len < self.win {
            0
        } else {
            1 + (len - self.win) / self.hop
        }
    }

    /// Signal length spanned by `frames` frames.
    pub fn signal_len(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.hop + self.win
        }
    }

    pub fn analyze(&self, x: &[f64]) -> Vec<Complex<f64>> {
        let frames = self.n_frames(x.len());
        let bins = self.n_bins();
        let mut out = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        for t in 0..frames {
            let seg = &x[t * self.hop..t * self.hop + self.win];
            for (b, (s, w)) in buf.iter_mut().zip(seg.iter().zip(&self.window)) {
                *b = Complex::new(s * w, 0.0);
            }
            buf[self.win..].iter_mut().for_each(|b| *b = Complex::new(0.0, 0.0));
            self.forward.process(&mut buf);
            out.extend_from_slice(&buf[..bins]);
        }
        out
    }

    /// `|X|^2` per frame and bin.
    pub fn power(&self, x: &[f64]) -> Vec<f64> {
        self.analyze(x).iter().map(|c| c.norm_sqr()).collect()
    }

    /// Least-squares signal estimate from one-sided spectra.
    ///
    /// Each frame is completed to a Hermitian spectrum and inverted; the
    /// overlap-add is divided by the summed squared window, giving the exact
    /// minimizer of the two-sided spectral distance for every sample covered
    /// by a non-zero window value. Uncovered samples are zero.
    pub fn synthesize(&self, spec: &[Complex<f64>]) -> Vec<f64> {
        let (y, wsum) = self.overlap_add(spec);
        y.iter().zip(&wsum).map(|(&v, &s)| if s > 0.0 { v / s } else { 0.0 }).collect()
    }

    /// Like [`Stft::synthesize`] but the normalizer is floored at `floor` times
    /// its maximum, which fades the ill-conditioned samples at the signal
    /// edges that only a window tail covers.
    pub fn synthesize_tapered(&self, spec: &[Complex<f64>], floor: f64) -> Vec<f64> {
        let (y, wsum) = self.overlap_add(spec);
        let lim = floor * wsum.iter().cloned().fold(0.0, f64::max);
        y.iter().zip(&wsum).map(|(&v, &s)| if s > 0.0 { v / s.max(lim) } else { 0.0 }).collect()
    }

    fn overlap_add(&self, spec: &[Complex<f64>]) -> (Vec<f64>, Vec<f64>) {
        let bins = self.n_bins();
        assert_eq!(spec.len() % bins, 0, "spectrum length must be a multiple of the bin count");
        let frames = spec.len() / bins;
        let len = self.signal_len(frames);
        let mut y = vec![0.0; len];
        let mut wsum = vec![0.0; len];
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        let scale = 1.0 / self.n_fft as f64;
        for (t, frame) in spec.chunks(bins).enumerate() {
            buf[..bins].copy_from_slice(frame);
            for k in 1..self.n_fft - bins + 1 {
                buf[self.n_fft - k] = frame[k].conj();
            }
            self.inverse.process(&mut buf);
            let start = t * self.hop;
            for n in 0..self.win {
                let w = self.window[n];
                y[start + n] += w * buf[n].re * scale;
                wsum[start + n] += w * w;
            }
        }
        (y, wsum)
    }
}
