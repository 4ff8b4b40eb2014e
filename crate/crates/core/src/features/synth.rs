//! Deterministic synthetic corpus of mel-like recordings.
//!
//! Each recording is an energy field over (frame, band) mapped to `[-1, 1]`:
//! the singer shifts a three-formant template up the band axis, the vowel
//! adds two narrower peaks, and the technique applies one of six temporal
//! patterns. Every recording has at least `4 × 43` frames.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::cache::write_mel;
use super::manifest::{Manifest, ManifestEntry, Split, Style};
use super::mel::MelSpectrogram;
use super::{CHUNK_FRAMES, N_MELS};
use crate::error::{Error, Result};

pub const MIN_FRAMES: usize = 4 * CHUNK_FRAMES;
pub const MAX_EXTRA_FRAMES: usize = 2 * CHUNK_FRAMES;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_singers: usize,
    pub n_techniques: usize,
    pub n_vowels: usize,
    /// Recordings per (singer, technique, vowel) combination.
    pub per_class: usize,
    /// How many of each combination's recordings go to the test split.
    pub test_per_class: usize,
}

impl SynthConfig {
    pub fn new(seed: u64, n_singers: usize, n_techniques: usize, n_vowels: usize, per_class: usize) -> Self {
        Self {
            seed,
            n_singers,
            n_techniques,
            n_vowels,
            per_class,
            test_per_class: usize::from(per_class >= 2),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    /// Entries point at `mels/<id>.mel` relative to the output directory.
    pub manifest: Manifest,
    /// One spectrogram per manifest entry, same order.
    pub mels: Vec<MelSpectrogram>,
}

impl SynthCorpus {
    /// Write `manifest.csv` and `mels/*.mel` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        for (e, m) in self.manifest.entries.iter().zip(&self.mels) {
            write_mel(&dir.join(&e.path), m)?;
        }
        let path = dir.join("manifest.csv");
        let mut manifest = self.manifest.clone();
        manifest.base_dir = dir.to_path_buf();
        manifest.write(&path)?;
        Ok(path)
    }
}

pub fn generate_synthetic_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    if cfg.n_singers == 0 || cfg.n_techniques == 0 || cfg.n_vowels == 0 || cfg.per_class == 0 {
        return Err(Error::InvalidInput("synthetic corpus counts must be at least 1".into()));
    }
    if cfg.test_per_class > cfg.per_class {
        return Err(Error::InvalidInput("test_per_class exceeds per_class".into()));
    }
    let mut entries = Vec::new();
    let mut mels = Vec::new();
    let mut index = 0u64;
    for s in 0..cfg.n_singers {
        for t in 0..cfg.n_techniques {
            for v in 0..cfg.n_vowels {
                for i in 0..cfg.per_class {
                    let id = format!("s{s:02}_t{t}_v{v}_{i}");
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index);
                    index += 1;
                    mels.push(render(&mut rng, cfg, s, t, v));
                    entries.push(ManifestEntry {
                        path: PathBuf::from(format!("mels/{id}.mel")),
                        id,
                        singer: s,
                        technique: t,
                        vowel: v,
                        style: if i % 2 == 0 { Style::Scale } else { Style::Arpeggios },
                        split: if i >= cfg.per_class - cfg.test_per_class {
                            Split::Test
                        } else {
                            Split::Train
                        },
                    });
                }
            }
        }
    }
    Ok(SynthCorpus {
        manifest: Manifest::new(entries, PathBuf::new())?,
        mels,
    })
}

fn bump(band: f64, centre: f64, width: f64) -> f64 {
    let d = (band - centre) / width;
    (-0.5 * d * d).exp()
}

fn render(rng: &mut ChaCha8Rng, cfg: &SynthConfig, singer: usize, technique: usize, vowel: usize) -> MelSpectrogram {
    let frames = MIN_FRAMES + rng.random_range(0..=MAX_EXTRA_FRAMES);
    let phase = rng.random_range(0.0..2.0 * PI);
    let gate_offset = rng.random_range(0..10usize);

    let shift = singer as f64 * 24.0 / cfg.n_singers as f64;
    let formants = [14.0 + shift, 38.0 + shift, 64.0 + shift];
    let vowel_peaks = [
        22.0 + vowel as f64 * 28.0 / cfg.n_vowels as f64,
        56.0 + vowel as f64 * 30.0 / cfg.n_vowels as f64,
    ];
    let pattern = technique % 6;
    let strength = 1.0 + (technique / 6) as f64 * 0.5;

    let mut data = Vec::with_capacity(frames * N_MELS);
    for i in 0..frames {
        let tf = i as f64;
        let gate = if ((i + gate_offset) / 5) % 2 == 0 { 1.0 } else { 0.35 };
        let burst = pattern == 4 && rng.random_bool(0.35);
        let burst_level = if burst { rng.random_range(0.25..0.5) } else { 0.0 };
        for b in 0..N_MELS {
            let bf = b as f64;
            let mut e: f64 = formants.iter().map(|&c| 0.45 * bump(bf, c, 3.0)).sum::<f64>()
                + vowel_peaks.iter().map(|&c| 0.22 * bump(bf, c, 2.5)).sum::<f64>();
            match pattern {
                1 if b >= 40 => {
                    e += strength * 0.25 * (0.5 + 0.5 * (2.0 * PI * tf / 11.0 + phase).sin());
                }
                2 => e *= gate,
                3 => e += strength * 0.3 * bf / (N_MELS - 1) as f64,
                4 if b < 20 => e += strength * burst_level,
                5 => e *= 1.0 + 0.3 * strength.min(1.5) * (2.0 * PI * tf / 5.0 + phase).sin(),
                _ => {}
            }
            e += 0.12 + rng.random_range(-0.03..0.03);
            data.push((2.0 * e - 1.0).clamp(-1.0, 1.0) as f32);
        }
    }
    MelSpectrogram::new(frames, N_MELS, data)
}
