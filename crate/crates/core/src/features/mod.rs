//! Audio ingestion, log-mel computation, chunking, manifests, the `MEL1`
//! cache format and the synthetic corpus.

pub mod audio;
pub mod cache;
pub mod chunk;
pub mod dataset;
pub mod manifest;
pub mod mel;
pub mod resample;
pub mod synth;

pub use audio::{load_wav, Waveform};
pub use cache::{read_mel, write_mel};
pub use chunk::{chunk, concat_chunks, MelChunk};
pub use dataset::{load_recordings, ChunkedRecording};
pub use manifest::{Manifest, ManifestEntry, RecordingMeta, Split, Style};
pub use mel::{compute_mel, MelConfig, MelSpectrogram};
pub use resample::resample;
pub use synth::{generate_synthetic_corpus, SynthConfig, SynthCorpus};

pub const SAMPLE_RATE: u32 = 22_050;
pub const N_MELS: usize = 96;
pub const CHUNK_FRAMES: usize = 43;
pub const HOP: usize = 256;
pub const N_FFT: usize = 1024;

pub const N_SINGERS: usize = 20;
pub const N_TECHNIQUES: usize = 6;
pub const N_VOWELS: usize = 5;
