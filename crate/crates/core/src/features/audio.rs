use std::path::Path;

use super::resample::resample;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Scale so the largest magnitude is exactly 1. All-zero input is left as is.
    pub fn normalize_peak(&mut self) {
        let peak = self.samples.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
        if peak > 0.0 {
            for v in self.samples.iter_mut() {
                *v /= peak;
            }
            // Division can leave the peak a hair off 1.0; pin it.
            if let Some(p) = self.samples.iter_mut().max_by(|a, b| a.abs().total_cmp(&b.abs())) {
                *p = p.signum();
            }
        }
    }

    pub fn resampled(&self, target_rate: u32) -> Result<Self> {
        Ok(Self {
            samples: resample(&self.samples, self.sample_rate, target_rate)?,
            sample_rate: target_rate,
        })
    }
}

/// Read a WAV file, mix to mono, resample to `target_rate` and peak-normalize.
pub fn load_wav(path: &Path, target_rate: u32) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader.samples::<f32>().collect::<std::result::Result<_, _>>()?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample.saturating_sub(1))) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<std::result::Result<_, _>>()?
        }
    };
    if interleaved.is_empty() {
        return Err(Error::InvalidInput(format!("{} contains no samples", path.display())));
    }
    let mono = interleaved
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f32>() / channels as f32)
        .collect();
    let mut w = Waveform::new(mono, spec.sample_rate).resampled(target_rate)?;
    w.normalize_peak();
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_pins_peak_to_one() {
        let mut w = Waveform::new(vec![0.1, -0.3, 0.2], 22_050);
        w.normalize_peak();
        assert_eq!(w.samples.iter().fold(0.0f32, |m, v| m.max(v.abs())), 1.0);
        assert_eq!(w.samples[1], -1.0);
    }

    #[test]
    fn silent_waveform_untouched() {
        let mut w = Waveform::new(vec![0.0; 16], 22_050);
        w.normalize_peak();
        assert!(w.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wav_stereo_is_mixed_resampled_and_normalized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 44_100,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for i in 0..44_100 {
            let v = (0.25 * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 44_100.0).sin() * 32767.0) as i16;
            w.write_sample(v).unwrap();
            w.write_sample(v).unwrap();
        }
        w.finalize().unwrap();
        let wave = load_wav(&path, 22_050).unwrap();
        assert_eq!(wave.sample_rate, 22_050);
        assert_eq!(wave.samples.len(), 22_050);
        assert_eq!(wave.samples.iter().fold(0.0f32, |m, v| m.max(v.abs())), 1.0);
    }
}
