use super::mel::MelSpectrogram;
use super::{CHUNK_FRAMES, N_MELS};
use crate::error::{Error, Result};

/// One `CHUNK_FRAMES × N_MELS` block, row-major (time × band).
#[derive(Clone, Debug, PartialEq)]
pub struct MelChunk {
    pub data: Vec<f32>,
}

impl MelChunk {
    pub const LEN: usize = CHUNK_FRAMES * N_MELS;

    pub fn new(data: Vec<f32>) -> Result<Self> {
        if data.len() != Self::LEN {
            return Err(Error::shape(
                "mel chunk",
                format!("expected {} values, got {}", Self::LEN, data.len()),
            ));
        }
        Ok(Self { data })
    }

    pub fn zeros() -> Self {
        Self {
            data: vec![0.0; Self::LEN],
        }
    }
}

/// Split into `floor(frames / 43)` consecutive, non-overlapping chunks. The
/// trailing partial chunk is dropped.
pub fn chunk(m: &MelSpectrogram) -> Result<Vec<MelChunk>> {
    if m.n_mels != N_MELS {
        return Err(Error::shape("chunk", format!("expected {N_MELS} bands, got {}", m.n_mels)));
    }
    if m.n_frames < CHUNK_FRAMES {
        return Err(Error::TooShort {
            frames: m.n_frames,
            needed: CHUNK_FRAMES,
        });
    }
    Ok(m.data
        .chunks_exact(MelChunk::LEN)
        .map(|c| MelChunk { data: c.to_vec() })
        .collect())
}

/// Inverse of [`chunk`] for the covered frames.
pub fn concat_chunks(chunks: &[MelChunk]) -> MelSpectrogram {
    let data: Vec<f32> = chunks.iter().flat_map(|c| c.data.iter().copied()).collect();
    MelSpectrogram::new(chunks.len() * CHUNK_FRAMES, N_MELS, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(frames: usize) -> MelSpectrogram {
        let data = (0..frames * N_MELS).map(|i| (i % 1000) as f32 / 1000.0).collect();
        MelSpectrogram::new(frames, N_MELS, data)
    }

    #[test]
    fn exact_multiple() {
        let m = ramp(86);
        let c = chunk(&m).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].data[..], m.data[..MelChunk::LEN]);
        assert_eq!(c[1].data[..], m.data[MelChunk::LEN..]);
    }

    #[test]
    fn shortest_recording_gives_seven_chunks() {
        assert_eq!(chunk(&ramp(301)).unwrap().len(), 7);
    }

    #[test]
    fn too_short() {
        assert!(matches!(
            chunk(&ramp(42)),
            Err(Error::TooShort { frames: 42, needed: 43 })
        ));
    }

    #[test]
    fn concat_reproduces_prefix() {
        let m = ramp(100);
        let back = concat_chunks(&chunk(&m).unwrap());
        assert_eq!(back.n_frames, 86);
        assert_eq!(back.data[..], m.data[..86 * N_MELS]);
    }
}
