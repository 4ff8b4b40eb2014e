//! `MEL1` cache: magic, u32 frame count, u32 band count, then row-major
//! little-endian f32 values.

use std::path::Path;

use super::mel::MelSpectrogram;
use crate::error::{Error, Result};
use crate::nn::checkpoint::write_atomic;

pub const MAGIC: &[u8; 4] = b"MEL1";

pub fn encode_mel(m: &MelSpectrogram) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + m.data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(m.n_frames as u32).to_le_bytes());
    out.extend_from_slice(&(m.n_mels as u32).to_le_bytes());
    for v in &m.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_mel(bytes: &[u8], path: &Path) -> Result<MelSpectrogram> {
    let bad = |d: &str| Error::Format {
        path: path.to_path_buf(),
        detail: d.to_string(),
    };
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("missing MEL1 header"));
    }
    let frames = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let bands = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() != frames * bands * 4 {
        return Err(bad(&format!(
            "payload is {} bytes, header declares {frames}x{bands}",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(MelSpectrogram::new(frames, bands, data))
}

pub fn write_mel(path: &Path, m: &MelSpectrogram) -> Result<()> {
    write_atomic(path, &encode_mel(m))
}

pub fn read_mel(path: &Path) -> Result<MelSpectrogram> {
    let bytes = std::fs::read(path)?;
    decode_mel(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let m = MelSpectrogram::new(2, 3, vec![0.0, 1.0, -1.0, 0.5, 0.25, -0.125]);
        let b = encode_mel(&m);
        assert_eq!(&b[..4], b"MEL1");
        assert_eq!(&b[4..8], &2u32.to_le_bytes());
        assert_eq!(&b[8..12], &3u32.to_le_bytes());
        assert_eq!(&b[12..16], &0.0f32.to_le_bytes());
        assert_eq!(b.len(), 12 + 24);
        assert_eq!(decode_mel(&b, Path::new("m")).unwrap(), m);
    }

    #[test]
    fn truncated_payload_rejected() {
        let m = MelSpectrogram::new(1, 2, vec![0.5, 0.5]);
        let b = encode_mel(&m);
        assert!(decode_mel(&b[..b.len() - 2], Path::new("m")).is_err());
    }
}
