use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{audio::Waveform, HOP, N_FFT, N_MELS, SAMPLE_RATE};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub win_length: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    /// Cells more than this many dB below the recording's loudest cell are
    /// clipped to −1.
    pub top_db: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            n_fft: N_FFT,
            win_length: N_FFT,
            hop: HOP,
            n_mels: N_MELS,
            f_min: 0.0,
            f_max: SAMPLE_RATE as f64 / 2.0,
            top_db: 80.0,
        }
    }
}

impl MelConfig {
    /// Frames produced for `n` samples (no centring; short input is padded
    /// to a single window).
    pub fn frame_count(&self, n: usize) -> usize {
        if n <= self.win_length {
            1
        } else {
            1 + (n - self.win_length) / self.hop
        }
    }
}

/// Log-mel spectrogram, row-major `frames × n_mels`, values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub n_frames: usize,
    pub n_mels: usize,
    pub hop: usize,
    pub data: Vec<f32>,
}

impl MelSpectrogram {
    pub fn new(n_frames: usize, n_mels: usize, data: Vec<f32>) -> Self {
        assert_eq!(n_frames * n_mels, data.len());
        Self {
            n_frames,
            n_mels,
            hop: HOP,
            data,
        }
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.n_mels..(t + 1) * self.n_mels]
    }

    /// Per-band average over all frames.
    pub fn mean_frame(&self) -> Vec<f32> {
        let mut m = vec![0.0f32; self.n_mels];
        for t in 0..self.n_frames {
            for (a, &v) in m.iter_mut().zip(self.frame(t)) {
                *a += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= self.n_frames as f32);
        m
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters (peak 1) on the HTK mel scale, `n_mels × (n_fft/2+1)`.
pub fn mel_filterbank(cfg: &MelConfig) -> Vec<Vec<f64>> {
    let n_bins = cfg.n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
    (0..cfg.n_mels)
        .map(|m| {
            let (left, centre, right) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    let up = (f - left) / (centre - left);
                    let down = (right - f) / (right - centre);
                    up.min(down).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

const AMIN: f64 = 1e-10;

/// Log-magnitude mel spectrogram mapped to `[-1, 1]`.
///
/// Magnitudes below `top_db` under the recording's loudest mel cell are
/// clipped; `[max − top_db, max]` dB maps linearly onto `[-1, 1]`. A silent
/// waveform maps to all −1.
pub fn compute_mel(w: &Waveform, cfg: &MelConfig) -> Result<MelSpectrogram> {
    if w.samples.is_empty() {
        return Err(Error::InvalidInput("empty waveform".into()));
    }
    if w.sample_rate != cfg.sample_rate {
        return Err(Error::InvalidInput(format!(
            "waveform at {} Hz, expected {} Hz",
            w.sample_rate, cfg.sample_rate
        )));
    }
    let n_frames = cfg.frame_count(w.samples.len());
    let n_bins = cfg.n_fft / 2 + 1;
    let window = hann(cfg.win_length);
    let fb = mel_filterbank(cfg);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.n_fft);

    let mut mel = vec![0.0f64; n_frames * cfg.n_mels];
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    let mut mag = vec![0.0f64; n_bins];
    let offset = (cfg.n_fft - cfg.win_length) / 2;
    for t in 0..n_frames {
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        let start = t * cfg.hop;
        for (i, &wv) in window.iter().enumerate() {
            let s = w.samples.get(start + i).copied().unwrap_or(0.0) as f64;
            buf[offset + i] = Complex::new(s * wv, 0.0);
        }
        fft.process(&mut buf);
        for (m, c) in mag.iter_mut().zip(&buf) {
            *m = c.norm();
        }
        for (b, filt) in fb.iter().enumerate() {
            mel[t * cfg.n_mels + b] = filt.iter().zip(&mag).map(|(f, m)| f * m).sum();
        }
    }

    let peak = mel.iter().fold(0.0f64, |a, &b| a.max(b));
    let data = if peak <= AMIN {
        vec![-1.0f32; mel.len()]
    } else {
        let max_db = 20.0 * peak.log10();
        let floor = max_db - cfg.top_db;
        mel.iter()
            .map(|&v| {
                let db = 20.0 * v.max(AMIN).log10();
                (2.0 * (db - floor) / cfg.top_db - 1.0).clamp(-1.0, 1.0) as f32
            })
            .collect()
    };
    Ok(MelSpectrogram {
        n_frames,
        n_mels: cfg.n_mels,
        hop: cfg.hop,
        data,
    })
}
