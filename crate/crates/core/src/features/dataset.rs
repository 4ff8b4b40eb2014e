use rayon::prelude::*;

use super::cache::read_mel;
use super::chunk::{chunk, MelChunk};
use super::manifest::{Manifest, RecordingMeta};
use crate::error::{Error, Result};

/// A recording's chunk sequence with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkedRecording {
    pub meta: RecordingMeta,
    pub chunks: Vec<MelChunk>,
}

impl ChunkedRecording {
    pub fn n_chunks(&self) -> usize {
        self.chunks.len()
    }
}

/// Read every cached spectrogram in the manifest and chunk it. Entries must
/// point at `MEL1` caches.
pub fn load_recordings(manifest: &Manifest) -> Result<Vec<ChunkedRecording>> {
    manifest
        .entries
        .par_iter()
        .map(|e| {
            let path = manifest.resolve(e);
            let mel = read_mel(&path)?;
            let chunks = chunk(&mel).map_err(|err| match err {
                Error::TooShort { frames, needed } => Error::InvalidManifest(format!(
                    "`{}` has {frames} frames, fewer than one {needed}-frame chunk",
                    e.id
                )),
                other => other,
            })?;
            Ok(ChunkedRecording { meta: e.meta(), chunks })
        })
        .collect()
}
