//! Latent arithmetic conversion: pick a source mixture component per chunk
//! or per recording, move the chosen stream's latents by
//! `λ·(μ_target − μ_source)`, and decode.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{concat_chunks, write_mel, MelChunk};
use crate::gmvae::{Attribute, ForwardOut, Gmvae, MixturePrior};
use crate::nn::checkpoint::write_atomic;
use crate::nn::{Mat, ParamStore, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    /// Per-chunk source from the nearest prior component.
    #[serde(rename = "c-chunk")]
    CChunk,
    /// One source per recording from the sequence classifier.
    #[serde(rename = "c-sequence")]
    CSequence,
}

impl Strategy {
    pub const ALL: [Strategy; 2] = [Strategy::CChunk, Strategy::CSequence];
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::CChunk => "c-chunk",
            Strategy::CSequence => "c-sequence",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "c-chunk" => Ok(Strategy::CChunk),
            "c-sequence" => Ok(Strategy::CSequence),
            _ => Err(Error::InvalidInput(format!(
                "unknown strategy `{s}` (expected c-chunk or c-sequence)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConversionRequest {
    pub attribute: Attribute,
    pub target: usize,
    pub strategy: Strategy,
    /// Fraction of the conversion vector applied, in `[0, 1]`.
    pub lambda: f64,
}

impl ConversionRequest {
    pub fn new(attribute: Attribute, target: usize, strategy: Strategy) -> Self {
        Self {
            attribute,
            target,
            strategy,
            lambda: 1.0,
        }
    }

    pub fn with_lambda(self, lambda: f64) -> Self {
        Self { lambda, ..self }
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if self.target >= k {
            return Err(Error::InvalidLabel {
                label: self.target,
                classes: k,
            });
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidInput(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Most likely component for one latent under uniform weights and the
/// shared fixed variance. Ties go to the lowest index.
pub fn source_component_chunk(z: &[f64], prior: &MixturePrior) -> usize {
    prior.nearest(z)
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Sequence classifier decision for the whole recording.
pub fn source_component_sequence(fwd: &ForwardOut, attr: Attribute) -> usize {
    argmax(fwd.logits(attr))
}

/// Source component per chunk and the matching conversion vectors
/// `λ·(μ_target − μ_source,n)`, `[N, D]`.
pub fn conversion_vectors(
    fwd: &ForwardOut,
    req: &ConversionRequest,
    prior: &MixturePrior,
    model: &Gmvae,
) -> Result<(Vec<usize>, Mat<f64>)> {
    req.validate(prior.k())?;
    let z = &fwd.latents(req.attribute).z;
    let sources: Vec<usize> = match req.strategy {
        Strategy::CChunk => (0..z.rows).map(|n| source_component_chunk(z.row(n), prior)).collect(),
        Strategy::CSequence => {
            let weight = match req.attribute {
                Attribute::Singer => model.cfg.beta,
                Attribute::Technique => model.cfg.gamma,
            };
            if weight == 0.0 {
                return Err(Error::StrategyUnavailable(format!(
                    "the {} classifier was not trained (weight 0); use c-chunk",
                    req.attribute.name()
                )));
            }
            vec![source_component_sequence(fwd, req.attribute); z.rows]
        }
    };
    let target = prior.mean(req.target);
    let mut delta = Mat::zeros(z.rows, z.cols);
    for (n, &s) in sources.iter().enumerate() {
        let src = prior.mean(s);
        for (d, out) in delta.row_mut(n).iter_mut().enumerate() {
            *out = req.lambda * (target[d] - src[d]);
        }
    }
    Ok((sources, delta))
}

/// Add `delta` to `z`, leaving rows with a zero vector untouched.
fn shifted(z: &Mat<f64>, delta: &Mat<f64>) -> Mat<f64> {
    let mut out = z.clone();
    for n in 0..z.rows {
        let d = delta.row(n);
        if d.iter().all(|&v| v == 0.0) {
            continue;
        }
        for (o, &v) in out.row_mut(n).iter_mut().zip(d) {
            *o += v;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conversion {
    pub requests: Vec<ConversionRequest>,
    /// Detected source component per chunk, one list per request.
    pub sources: Vec<Vec<usize>>,
    pub z_s: Mat<f64>,
    pub z_t: Mat<f64>,
    pub refined: Vec<MelChunk>,
}

/// Singer latents, technique latents, and the detected source class per
/// request and chunk.
pub type ConvertedLatents = (Mat<f64>, Mat<f64>, Vec<Vec<usize>>);

/// Latents after applying every request to its stream. Requests on the same
/// stream accumulate; the other stream is copied unchanged.
pub fn converted_latents<T: Scalar>(
    model: &Gmvae,
    store: &ParamStore<T>,
    fwd: &ForwardOut,
    requests: &[ConversionRequest],
) -> Result<ConvertedLatents> {
    let mut z_s = fwd.z_s.z.clone();
    let mut z_t = fwd.z_t.z.clone();
    let mut sources = Vec::with_capacity(requests.len());
    for req in requests {
        let prior = MixturePrior::from_store(store, req.attribute)?;
        let (src, delta) = conversion_vectors(fwd, req, &prior, model)?;
        match req.attribute {
            Attribute::Singer => z_s = shifted(&z_s, &delta),
            Attribute::Technique => z_t = shifted(&z_t, &delta),
        }
        sources.push(src);
    }
    Ok((z_s, z_t, sources))
}

/// Decode the recording with every request applied. `fwd` must come from an
/// inference pass, so its latents are posterior means.
pub fn convert_many<T: Scalar>(
    model: &Gmvae,
    store: &ParamStore<T>,
    fwd: &ForwardOut,
    requests: &[ConversionRequest],
) -> Result<Conversion> {
    let (z_s, z_t, sources) = converted_latents(model, store, fwd, requests)?;
    let (_, refined) = model.decode_latents(store, &z_s, &z_t)?;
    Ok(Conversion {
        requests: requests.to_vec(),
        sources,
        z_s,
        z_t,
        refined,
    })
}

pub fn convert<T: Scalar>(
    model: &Gmvae,
    store: &ParamStore<T>,
    fwd: &ForwardOut,
    req: &ConversionRequest,
) -> Result<Conversion> {
    convert_many(model, store, fwd, std::slice::from_ref(req))
}

/// Refined decoding of the unmodified latents.
pub fn reconstruct<T: Scalar>(model: &Gmvae, store: &ParamStore<T>, fwd: &ForwardOut) -> Result<Vec<MelChunk>> {
    Ok(model.decode_latents(store, &fwd.z_s.z, &fwd.z_t.z)?.1)
}

/// Conversions with `λ_i = i / (steps − 1)` times the requested vector.
pub fn morph_series<T: Scalar>(
    model: &Gmvae,
    store: &ParamStore<T>,
    fwd: &ForwardOut,
    req: &ConversionRequest,
    steps: usize,
) -> Result<Vec<Conversion>> {
    if steps < 2 {
        return Err(Error::InvalidInput(format!("morphing needs at least 2 steps, got {steps}")));
    }
    (0..steps)
        .map(|i| {
            let lambda = if i == steps - 1 {
                req.lambda
            } else {
                req.lambda * i as f64 / (steps - 1) as f64
            };
            convert(model, store, fwd, &req.with_lambda(lambda))
        })
        .collect()
}

/// Sidecar metadata written next to a converted spectrogram.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConversionRecord {
    pub source_id: String,
    pub attribute: String,
    pub target: usize,
    pub strategy: Strategy,
    pub lambda: f64,
    pub detected_sources: Vec<usize>,
}

impl ConversionRecord {
    pub fn new(source_id: &str, conv: &Conversion) -> Vec<Self> {
        conv.requests
            .iter()
            .zip(&conv.sources)
            .map(|(r, s)| Self {
                source_id: source_id.to_string(),
                attribute: r.attribute.name().to_string(),
                target: r.target,
                strategy: r.strategy,
                lambda: r.lambda,
                detected_sources: s.clone(),
            })
            .collect()
    }
}

/// Write `<stem>.mel` and `<stem>.json` into `dir`.
pub fn write_conversion(dir: &Path, stem: &str, source_id: &str, conv: &Conversion) -> Result<()> {
    write_mel(&dir.join(format!("{stem}.mel")), &concat_chunks(&conv.refined))?;
    let json = serde_json::to_string_pretty(&ConversionRecord::new(source_id, conv))?;
    write_atomic(&dir.join(format!("{stem}.json")), json.as_bytes())
}
