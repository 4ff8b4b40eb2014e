//! Binary PGM (`P5`) rendering of spectrogram grids: one panel per
//! spectrogram, time left to right, low bands at the bottom.

use std::path::Path;

use crate::error::{Error, Result};
use crate::features::MelSpectrogram;
use crate::nn::checkpoint::write_atomic;

const GAP: usize = 2;

/// Grey image of panels laid out in `rows × cols` order, separated by white
/// gaps. Returns `(width, height, pixels)`.
pub fn spectrogram_grid(panels: &[Vec<MelSpectrogram>]) -> Result<(usize, usize, Vec<u8>)> {
    let first = panels
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| Error::InvalidInput("no spectrograms to draw".into()))?;
    let (pw, ph) = (first.n_frames, first.n_mels);
    if panels.iter().flatten().any(|m| m.n_frames != pw || m.n_mels != ph) {
        return Err(Error::InvalidInput("grid panels must share one shape".into()));
    }
    let cols = panels.iter().map(Vec::len).max().unwrap_or(0);
    let rows = panels.len();
    let width = cols * pw + (cols.saturating_sub(1)) * GAP;
    let height = rows * ph + (rows.saturating_sub(1)) * GAP;
    let mut px = vec![255u8; width * height];
    for (r, row) in panels.iter().enumerate() {
        for (c, m) in row.iter().enumerate() {
            let (x0, y0) = (c * (pw + GAP), r * (ph + GAP));
            for t in 0..pw {
                for b in 0..ph {
                    let v = m.data[t * ph + b].clamp(-1.0, 1.0);
                    let y = y0 + (ph - 1 - b);
                    px[y * width + x0 + t] = ((v + 1.0) * 127.5).round() as u8;
                }
            }
        }
    }
    Ok((width, height, px))
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::InvalidInput("pixel count does not match image size".into()));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    write_atomic(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_layout() {
        let a = MelSpectrogram::new(2, 3, vec![-1.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let (w, h, px) = spectrogram_grid(&[vec![a.clone(), a]]).unwrap();
        assert_eq!((w, h), (2 + GAP + 2, 3));
        // band 0 of frame 0 is at the bottom-left
        assert_eq!(px[2 * w], 0);
        assert_eq!(px[0], 255);
        assert_eq!(px[w], 128);
    }
}
