use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::Waveform;
use crate::error::{Error, Result};

/// Reads a 16-bit PCM or 32-bit float WAV file; multi-channel input is
/// averaged to mono.
pub fn load_waveform(path: &Path) -> Result<Waveform> {
    let audio_err = |message: String| Error::Audio { path: path.to_path_buf(), message };
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")));
    }
    let mut reader = WavReader::open(path).map_err(|e| audio_err(e.to_string()))?;
    let spec = reader.spec();
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>(),
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>(),
        (fmt, bits) => return Err(audio_err(format!("unsupported encoding: {bits}-bit {fmt:?}"))),
    }
    .map_err(|e| audio_err(e.to_string()))?;
    let channels = spec.channels.max(1) as usize;
    if interleaved.len() < channels {
        return Err(audio_err("file contains no audio".into()));
    }
    let mono = interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    Waveform::new(mono, spec.sample_rate).map_err(|e| audio_err(e.to_string()))
}

/// Writes mono 32-bit float WAV.
pub fn write_waveform(path: &Path, w: &Waveform) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let to_err = |e: hound::Error| Error::Audio { path: path.to_path_buf(), message: e.to_string() };
    let mut writer = WavWriter::create(path, spec).map_err(to_err)?;
    for &s in w.samples() {
        writer.write_sample(s as f32).map_err(to_err)?;
    }
    writer.finalize().map_err(to_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_i16(path: &Path, channels: u16, data: &[i16]) {
        let spec = WavSpec { channels, sample_rate: 16_000, bits_per_sample: 16, sample_format: SampleFormat::Int };
        let mut w = WavWriter::create(path, spec).unwrap();
        for &s in data {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
    }

    #[test]
    fn pcm16_full_scale_maps_below_one() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        write_i16(&p, 1, &[32767, -32768, 0]);
        let w = load_waveform(&p).unwrap();
        assert!((w.samples()[0] - 32767.0 / 32768.0).abs() < 1e-12);
        assert!((w.samples()[0] - 0.99997).abs() < 1e-5);
        assert_eq!(w.samples()[1], -1.0);
    }

    #[test]
    fn silent_second_loads_as_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.wav");
        write_i16(&p, 1, &vec![0; 16_000]);
        let w = load_waveform(&p).unwrap();
        assert_eq!(w.len(), 16_000);
        assert!(w.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn antiphase_stereo_averages_to_silence() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        let spec = WavSpec { channels: 2, sample_rate: 16_000, bits_per_sample: 32, sample_format: SampleFormat::Float };
        let mut wr = WavWriter::create(&p, spec).unwrap();
        for _ in 0..100 {
            wr.write_sample(0.5f32).unwrap();
            wr.write_sample(-0.5f32).unwrap();
        }
        wr.finalize().unwrap();
        let w = load_waveform(&p).unwrap();
        assert_eq!(w.len(), 100);
        assert!(w.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn float_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.wav");
        let w = Waveform::new(vec![0.25, -0.5, 0.125], 22_050).unwrap();
        write_waveform(&p, &w).unwrap();
        assert_eq!(load_waveform(&p).unwrap(), w);
    }

    #[test]
    fn error_cases() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_waveform(&dir.path().join("missing.wav")), Err(Error::Io { .. })));

        let empty = dir.path().join("empty.wav");
        write_i16(&empty, 1, &[]);
        assert!(matches!(load_waveform(&empty), Err(Error::Audio { .. })));

        let p24 = dir.path().join("p24.wav");
        let spec = WavSpec { channels: 1, sample_rate: 16_000, bits_per_sample: 24, sample_format: SampleFormat::Int };
        let mut wr = WavWriter::create(&p24, spec).unwrap();
        wr.write_sample(5i32).unwrap();
        wr.finalize().unwrap();
        let err = load_waveform(&p24).unwrap_err();
        assert!(err.to_string().contains("unsupported"), "{err}");

        let junk = dir.path().join("junk.wav");
        std::fs::write(&junk, b"definitely not riff").unwrap();
        assert!(load_waveform(&junk).is_err());
    }
}
