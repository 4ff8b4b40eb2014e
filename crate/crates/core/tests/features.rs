use std::f64::consts::PI;

use gmvc::features::cache::{decode_mel, encode_mel};
use gmvc::features::mel::hz_to_mel;
use gmvc::features::{
    chunk, compute_mel, concat_chunks, generate_synthetic_corpus, read_mel, write_mel, MelConfig,
    MelSpectrogram, Split, SynthConfig, Waveform, CHUNK_FRAMES, HOP, N_MELS, SAMPLE_RATE,
};
use proptest::prelude::*;

/// Naive DFT magnitudes of one windowed frame, bins `0..=n/2`.
fn dft_mag(frame: &[f64]) -> Vec<f64> {
    let n = frame.len();
    (0..=n / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, &x) in frame.iter().enumerate() {
                let a = -2.0 * PI * (k * i) as f64 / n as f64;
                re += x * a.cos();
                im += x * a.sin();
            }
            (re * re + im * im).sqrt()
        })
        .collect()
}

/// Triangles on the HTK scale written out from the mel formula alone.
fn oracle_filter(m: usize, bin: usize, cfg: &MelConfig) -> f64 {
    let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let hz = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let (lo, hi) = (mel(cfg.f_min), mel(cfg.f_max));
    let edge = |i: usize| hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64);
    let f = bin as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64;
    let (l, c, r) = (edge(m), edge(m + 1), edge(m + 2));
    if f <= l || f >= r {
        0.0
    } else if f <= c {
        (f - l) / (c - l)
    } else {
        (r - f) / (r - c)
    }
}

#[test]
fn mel_matches_brute_force_dft() {
    let cfg = MelConfig::default();
    let n = cfg.n_fft + 2 * cfg.hop;
    let samples: Vec<f32> = (0..n)
        .map(|i| {
            let t = i as f64 / cfg.sample_rate as f64;
            (0.6 * (2.0 * PI * 440.0 * t).sin() + 0.3 * (2.0 * PI * 3100.0 * t).sin() + 0.05 * ((i * 7919) % 13) as f64 / 13.0) as f32
        })
        .collect();
    let got = compute_mel(&Waveform::new(samples.clone(), cfg.sample_rate), &cfg).unwrap();
    assert_eq!(got.n_frames, 3);

    let mut mel = Vec::new();
    for t in 0..3 {
        let frame: Vec<f64> = (0..cfg.n_fft)
            .map(|i| {
                let w = 0.5 - 0.5 * (2.0 * PI * i as f64 / cfg.n_fft as f64).cos();
                samples[t * cfg.hop + i] as f64 * w
            })
            .collect();
        let mag = dft_mag(&frame);
        for m in 0..cfg.n_mels {
            mel.push(mag.iter().enumerate().map(|(k, a)| oracle_filter(m, k, &cfg) * a).sum::<f64>());
        }
    }
    let peak_db = 20.0 * mel.iter().cloned().fold(0.0, f64::max).log10();
    for (i, &v) in mel.iter().enumerate() {
        let db = 20.0 * v.max(1e-10).log10();
        let want = (2.0 * (db - (peak_db - 80.0)) / 80.0 - 1.0).clamp(-1.0, 1.0);
        assert!((got.data[i] as f64 - want).abs() < 1e-4, "cell {i}: {} vs {want}", got.data[i]);
    }
}

#[test]
fn sine_peaks_in_its_band() {
    let cfg = MelConfig::default();
    for freq in [300.0, 1000.0, 4000.0] {
        let samples = (0..SAMPLE_RATE as usize)
            .map(|i| (2.0 * PI * freq * i as f64 / SAMPLE_RATE as f64).sin() as f32)
            .collect();
        let m = compute_mel(&Waveform::new(samples, SAMPLE_RATE), &cfg).unwrap();
        let mean = m.mean_frame();
        let best = (0..N_MELS).max_by(|&a, &b| mean[a].total_cmp(&mean[b])).unwrap();
        // band b is centred at mel position (b + 1) / (n_mels + 1) of the range
        let pos = hz_to_mel(freq) / hz_to_mel(cfg.f_max) * (N_MELS + 1) as f64 - 1.0;
        assert!((best as f64 - pos).abs() <= 1.0, "{freq} Hz peaked in band {best}, expected near {pos:.2}");
    }
}

#[test]
fn chunk_rate_is_half_a_second() {
    let frames_per_half_second = (0.5 * SAMPLE_RATE as f64 / HOP as f64).floor() as usize;
    assert_eq!(frames_per_half_second, CHUNK_FRAMES);
    let secs = CHUNK_FRAMES as f64 * HOP as f64 / SAMPLE_RATE as f64;
    assert!((secs - 0.5).abs() < 0.002, "{secs}");
}

#[test]
fn cache_survives_disk() {
    let dir = tempfile::tempdir().unwrap();
    let m = MelSpectrogram::new(2, 3, vec![-1.0, -0.0, 0.25, 1.0, f32::MIN_POSITIVE, 0.1]);
    let p = dir.path().join("a/b.mel");
    write_mel(&p, &m).unwrap();
    let back = read_mel(&p).unwrap();
    assert_eq!(
        back.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        m.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert!(decode_mel(&encode_mel(&m)[..20], &p).is_err());
}

/// Nearest class centroid of per-band mean frames separates singers and
/// vowels on held-out synthetic recordings.
#[test]
fn synthetic_classes_are_separable() {
    let corpus = generate_synthetic_corpus(&SynthConfig::new(3, 4, 3, 2, 4)).unwrap();
    let feats: Vec<Vec<f32>> = corpus.mels.iter().map(MelSpectrogram::mean_frame).collect();
    for (name, label, k) in [
        ("singer", (|e: &gmvc::features::ManifestEntry| e.singer) as fn(&_) -> usize, 4),
        ("vowel", |e: &gmvc::features::ManifestEntry| e.vowel, 2),
    ] {
        let mut centroids = vec![vec![0.0f64; N_MELS]; k];
        let mut counts = vec![0usize; k];
        for (e, f) in corpus.manifest.entries.iter().zip(&feats) {
            if e.split == Split::Train {
                counts[label(e)] += 1;
                for (c, &v) in centroids[label(e)].iter_mut().zip(f) {
                    *c += v as f64;
                }
            }
        }
        for (c, n) in centroids.iter_mut().zip(&counts) {
            c.iter_mut().for_each(|v| *v /= *n as f64);
        }
        let (mut hit, mut total) = (0, 0);
        for (e, f) in corpus.manifest.entries.iter().zip(&feats) {
            if e.split == Split::Test {
                let d = |c: &Vec<f64>| c.iter().zip(f).map(|(a, &b)| (a - b as f64).powi(2)).sum::<f64>();
                let pred = (0..k).min_by(|&a, &b| d(&centroids[a]).total_cmp(&d(&centroids[b]))).unwrap();
                hit += usize::from(pred == label(e));
                total += 1;
            }
        }
        assert!(hit * 10 >= total * 9, "{name}: {hit}/{total}");
    }
}

#[test]
fn synthetic_corpus_is_deterministic() {
    let a = generate_synthetic_corpus(&SynthConfig::new(11, 2, 2, 2, 2)).unwrap();
    let b = generate_synthetic_corpus(&SynthConfig::new(11, 2, 2, 2, 2)).unwrap();
    let c = generate_synthetic_corpus(&SynthConfig::new(12, 2, 2, 2, 2)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.mels, c.mels);
    assert!(a.mels.iter().all(|m| m.n_frames >= 4 * CHUNK_FRAMES));
}

proptest! {
    #[test]
    fn cache_roundtrip_bit_exact(frames in 1usize..20, bands in 1usize..8, seed in any::<u64>()) {
        let data: Vec<f32> = (0..frames * bands)
            .map(|i| f32::from_bits((seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64) >> 16) as u32))
            .collect();
        let m = MelSpectrogram::new(frames, bands, data);
        let back = decode_mel(&encode_mel(&m), std::path::Path::new("x")).unwrap();
        prop_assert_eq!((back.n_frames, back.n_mels), (frames, bands));
        for (a, b) in back.data.iter().zip(&m.data) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn chunk_count_is_floor(frames in 43usize..400) {
        let data = (0..frames * N_MELS).map(|i| (i % 97) as f32 / 97.0).collect();
        let m = MelSpectrogram::new(frames, N_MELS, data);
        let chunks = chunk(&m).unwrap();
        prop_assert_eq!(chunks.len(), frames / CHUNK_FRAMES);
        let back = concat_chunks(&chunks);
        prop_assert_eq!(&back.data[..], &m.data[..back.data.len()]);
    }

    #[test]
    fn mel_cells_stay_in_range(seed in any::<u64>(), len in 1usize..4000, gain in 0.0f32..50.0) {
        let samples = (0..len)
            .map(|i| gain * (((seed ^ i as u64).wrapping_mul(2862933555777941757) >> 40) as f32 / (1u64 << 24) as f32 - 0.5))
            .collect();
        let m = compute_mel(&Waveform::new(samples, SAMPLE_RATE), &MelConfig::default()).unwrap();
        prop_assert!(m.data.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}

#[test]
fn short_input_rejected_by_chunker() {
    let m = MelSpectrogram::new(42, N_MELS, vec![0.0; 42 * N_MELS]);
    assert!(matches!(chunk(&m), Err(gmvc::Error::TooShort { frames: 42, needed: 43 })));
}
