//! Mono WAV input and output.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::dsp::AudioClip;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WavEncoding {
    Pcm16,
    #[default]
    Float32,
}

/// Reads a mono 16-bit PCM or 32-bit float file.
pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let reader = WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::validation(
            path.display().to_string(),
            format!("expected a mono file, found {} channels", spec.channels),
        ));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| f64::from(v) / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        (format, bits) => {
            return Err(Error::validation(
                path.display().to_string(),
                format!("unsupported sample format {format:?} with {bits} bits"),
            ))
        }
    };
    AudioClip::new(samples, f64::from(spec.sample_rate))
}

pub fn write_wav(path: &Path, clip: &AudioClip, encoding: WavEncoding) -> Result<()> {
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    if clip.sample_rate.fract() != 0.0 || clip.sample_rate > f64::from(u32::MAX) {
        return Err(Error::validation(
            "sample_rate",
            format!("{} Hz cannot be stored in a WAV header", clip.sample_rate),
        ));
    }
    let (bits, format) = match encoding {
        WavEncoding::Pcm16 => (16, SampleFormat::Int),
        WavEncoding::Float32 => (32, SampleFormat::Float),
    };
    let spec = WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate as u32,
        bits_per_sample: bits,
        sample_format: format,
    };
    let mut writer = WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in &clip.samples {
        match encoding {
            WavEncoding::Pcm16 => writer
                .write_sample((s * 32768.0).round().clamp(-32768.0, 32767.0) as i16)
                .map_err(wav_err)?,
            WavEncoding::Float32 => writer.write_sample(s as f32).map_err(wav_err)?,
        }
    }
    writer.finalize().map_err(wav_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_round_trip_is_exact_for_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let samples: Vec<f64> = (0..100).map(|i| f64::from((i as f32 * 0.37).sin() * 0.5)).collect();
        let clip = AudioClip::new(samples, 44100.0).unwrap();
        write_wav(&path, &clip, WavEncoding::Float32).unwrap();
        assert_eq!(read_wav(&path).unwrap(), clip);
    }

    #[test]
    fn pcm_round_trip_within_one_step() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let clip = AudioClip::new(vec![0.0, 0.5, -0.5, 0.999, -1.0], 22050.0).unwrap();
        write_wav(&path, &clip, WavEncoding::Pcm16).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate, 22050.0);
        for (a, b) in back.samples.iter().zip(&clip.samples) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }

    #[test]
    fn missing_file_is_an_error() {
        assert!(matches!(
            read_wav(Path::new("/nonexistent/x.wav")),
            Err(Error::Wav { .. })
        ));
    }
}
