//! The generative model: shared feature extractor, singer and technique
//! encoders with Gaussian-mixture priors, joint decoder, refinement stack,
//! attention pooling and sequence-level classifiers.

pub mod config;
pub mod model;

pub use config::ModelConfig;
pub use model::{ChunkBatch, Fen, Gmvae, GraphOut, Noise, StreamVars, LOG_SIGMA_MAX, LOG_SIGMA_MIN};

use crate::error::{Error, Result};
use crate::features::MelChunk;
use crate::nn::{Graph, Mat, Mode, ParamStore, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Attribute {
    Singer,
    Technique,
}

impl Attribute {
    pub const ALL: [Attribute; 2] = [Attribute::Singer, Attribute::Technique];

    /// Parameter namespace suffix: `s` or `t`.
    pub fn prefix(self) -> &'static str {
        match self {
            Attribute::Singer => "s",
            Attribute::Technique => "t",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Singer => "singer",
            Attribute::Technique => "technique",
        }
    }

    pub fn other(self) -> Attribute {
        match self {
            Attribute::Singer => Attribute::Technique,
            Attribute::Technique => Attribute::Singer,
        }
    }
}

impl std::str::FromStr for Attribute {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "singer" => Ok(Attribute::Singer),
            "technique" => Ok(Attribute::Technique),
            _ => Err(Error::InvalidInput(format!("unknown attribute `{s}`"))),
        }
    }
}

/// `K` learnable component means sharing one fixed variance per coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct MixturePrior {
    /// `[K, D]`, row-major.
    pub means: Mat<f64>,
    pub variance: f64,
}

impl MixturePrior {
    pub fn new(means: Mat<f64>, variance: f64) -> Result<Self> {
        if means.rows == 0 || means.cols == 0 {
            return Err(Error::InvalidInput("mixture prior needs at least one component".into()));
        }
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::InvalidInput("prior variance must be positive".into()));
        }
        Ok(Self { means, variance })
    }

    pub fn from_store<T: Scalar>(store: &ParamStore<T>, attr: Attribute) -> Result<Self> {
        let name = format!("prior_{}.means", attr.prefix());
        let p = store
            .get(&name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown parameter `{name}`")))?;
        let var = store.value(&format!("prior_{}.var", attr.prefix()))?;
        let means = Mat::from_vec(p.shape[0], p.shape[1], p.value.iter().map(|v| v.to_f64_lossy()).collect());
        Self::new(means, var[0].to_f64_lossy())
    }

    pub fn k(&self) -> usize {
        self.means.rows
    }

    pub fn dim(&self) -> usize {
        self.means.cols
    }

    pub fn mean(&self, k: usize) -> &[f64] {
        self.means.row(k)
    }

    /// `log N(z; μ_k, σ²I)` including the normalizing constant.
    pub fn log_density(&self, z: &[f64], k: usize) -> f64 {
        let d = self.dim() as f64;
        let sq: f64 = z.iter().zip(self.mean(k)).map(|(a, b)| (a - b) * (a - b)).sum();
        -0.5 * d * (2.0 * std::f64::consts::PI * self.variance).ln() - sq / (2.0 * self.variance)
    }

    /// Most likely component under uniform weights. Equal variances make this
    /// the nearest mean; ties go to the lowest index.
    pub fn nearest(&self, z: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for k in 0..self.k() {
            let d: f64 = z.iter().zip(self.mean(k)).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }
}

/// Per-chunk diagonal Gaussian posterior, `[N, D]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSeq {
    pub mu: Mat<f64>,
    pub log_sigma: Mat<f64>,
}

/// One latent per chunk, `[N, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSeq {
    pub z: Mat<f64>,
}

/// Per-recording values of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOut {
    pub singer_post: GaussianSeq,
    pub tech_post: GaussianSeq,
    pub z_s: LatentSeq,
    pub z_t: LatentSeq,
    pub recon: Vec<MelChunk>,
    pub refined: Vec<MelChunk>,
    pub alpha_s: Vec<f64>,
    pub alpha_t: Vec<f64>,
    pub class_logits_s: Vec<f64>,
    pub class_logits_t: Vec<f64>,
}

impl ForwardOut {
    pub fn n_chunks(&self) -> usize {
        self.z_s.z.rows
    }

    pub fn posterior(&self, attr: Attribute) -> &GaussianSeq {
        match attr {
            Attribute::Singer => &self.singer_post,
            Attribute::Technique => &self.tech_post,
        }
    }

    pub fn latents(&self, attr: Attribute) -> &LatentSeq {
        match attr {
            Attribute::Singer => &self.z_s,
            Attribute::Technique => &self.z_t,
        }
    }

    pub fn alpha(&self, attr: Attribute) -> &[f64] {
        match attr {
            Attribute::Singer => &self.alpha_s,
            Attribute::Technique => &self.alpha_t,
        }
    }

    pub fn logits(&self, attr: Attribute) -> &[f64] {
        match attr {
            Attribute::Singer => &self.class_logits_s,
            Attribute::Technique => &self.class_logits_t,
        }
    }
}

fn rows_f64<T: Scalar>(m: &Mat<T>, start: usize, count: usize) -> Mat<f64> {
    let c = m.cols;
    let data = m.data[start * c..(start + count) * c].iter().map(|v| v.to_f64_lossy()).collect();
    Mat::from_vec(count, c, data)
}

fn chunks_of<T: Scalar>(m: &Mat<T>, first_chunk: usize, count: usize) -> Vec<MelChunk> {
    (first_chunk..first_chunk + count)
        .map(|i| MelChunk {
            data: m.data[i * MelChunk::LEN..(i + 1) * MelChunk::LEN]
                .iter()
                .map(|v| v.to_f64_lossy() as f32)
                .collect(),
        })
        .collect()
}

/// Split a batched graph pass into one [`ForwardOut`] per recording.
pub fn split_outputs<T: Scalar>(g: &Graph<T>, out: &GraphOut) -> Vec<ForwardOut> {
    let n = out.steps;
    (0..out.batch)
        .map(|b| {
            let seq = |v| rows_f64(g.value(v), b * n, n);
            let col = |v| g.value(v).data[b * n..(b + 1) * n].iter().map(|x| x.to_f64_lossy()).collect();
            let row = |v| g.value(v).row(b).iter().map(|x| x.to_f64_lossy()).collect();
            ForwardOut {
                singer_post: GaussianSeq {
                    mu: seq(out.singer.mu),
                    log_sigma: seq(out.singer.log_sigma),
                },
                tech_post: GaussianSeq {
                    mu: seq(out.technique.mu),
                    log_sigma: seq(out.technique.log_sigma),
                },
                z_s: LatentSeq { z: seq(out.singer.z) },
                z_t: LatentSeq { z: seq(out.technique.z) },
                recon: chunks_of(g.value(out.recon), b * n, n),
                refined: chunks_of(g.value(out.refined), b * n, n),
                alpha_s: col(out.singer.alpha),
                alpha_t: col(out.technique.alpha),
                class_logits_s: row(out.singer.logits),
                class_logits_t: row(out.technique.logits),
            }
        })
        .collect()
}

impl Gmvae {
    /// Inference-mode pass over one recording: posterior means as latents,
    /// batch-norm running statistics.
    pub fn full_forward<T: Scalar>(&self, store: &ParamStore<T>, chunks: &[MelChunk]) -> Result<ForwardOut> {
        let batch = ChunkBatch::<T>::single(chunks)?;
        let mut g = Graph::new();
        let out = self.forward(&mut g, store, &batch, Mode::Infer, None)?;
        Ok(split_outputs(&g, &out).remove(0))
    }

    /// Decode explicit latent sequences for one recording in inference mode.
    /// Returns `(recon, refined)` chunk sequences.
    pub fn decode_latents<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        z_s: &Mat<f64>,
        z_t: &Mat<f64>,
    ) -> Result<(Vec<MelChunk>, Vec<MelChunk>)> {
        if z_s.rows != z_t.rows {
            return Err(Error::shape(
                "dec",
                format!("stream lengths differ: {} vs {} chunks", z_s.rows, z_t.rows),
            ));
        }
        if z_s.rows == 0 {
            return Err(Error::InvalidInput("cannot decode an empty latent sequence".into()));
        }
        let n = z_s.rows;
        let mut g = Graph::new();
        let a = g.constant(z_s.cast());
        let b = g.constant(z_t.cast());
        let (recon, refined) = self.decode(&mut g, store, a, b, 1, n, Mode::Infer)?;
        Ok((chunks_of(g.value(recon), 0, n), chunks_of(g.value(refined), 0, n)))
    }
}
