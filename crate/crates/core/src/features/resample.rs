//! Sample-rate conversion through `rubato`'s synchronous FFT resampler.

use rubato::{FftFixedIn, Resampler};

use crate::error::{Error, Result};

const CHUNK: usize = 1024;

/// Resample `input` from `from_rate` to `to_rate` Hz.
///
/// Output has `ceil(len · to / from)` samples aligned with the input: the
/// resampler's delay is trimmed and its tail flushed with silence.
pub fn resample(input: &[f32], from_rate: u32, to_rate: u32) -> Result<Vec<f32>> {
    if from_rate == to_rate || input.is_empty() {
        return Ok(input.to_vec());
    }
    let fail = |e: &dyn std::fmt::Display| Error::InvalidInput(format!("resampling {from_rate} -> {to_rate} Hz: {e}"));
    let mut r = FftFixedIn::<f64>::new(from_rate as usize, to_rate as usize, CHUNK, 2, 1).map_err(|e| fail(&e))?;
    let want = (input.len() as u64 * to_rate as u64).div_ceil(from_rate as u64) as usize;
    let delay = r.output_delay();
    let x: Vec<f64> = input.iter().map(|&v| v as f64).collect();
    let mut out = Vec::with_capacity(want + delay + 2 * CHUNK);
    let mut pos = 0;
    while x.len() - pos >= r.input_frames_next() {
        let n = r.input_frames_next();
        out.extend(r.process(&[&x[pos..pos + n]], None).map_err(|e| fail(&e))?.remove(0));
        pos += n;
    }
    if pos < x.len() {
        out.extend(r.process_partial(Some(&[&x[pos..]]), None).map_err(|e| fail(&e))?.remove(0));
    }
    while out.len() < delay + want {
        out.extend(r.process_partial::<&[f64]>(None, None).map_err(|e| fail(&e))?.remove(0));
    }
    Ok(out[delay..delay + want].iter().map(|&v| v as f32).collect())
}
