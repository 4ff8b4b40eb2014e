use rand::Rng;
use rand_distr::StandardNormal;

use super::config::ModelConfig;
use super::Attribute;
use crate::error::{Error, Result};
use crate::features::MelChunk;
use crate::nn::{xavier_init, BatchNorm, Blstm, Conv1d, Graph, Init, Linear, Mat, Mode, ParamStore, Scalar, Var};

pub const LOG_SIGMA_MIN: f64 = -7.0;
pub const LOG_SIGMA_MAX: f64 = 2.0;

/// Shared feature extraction network: two conv+BN+ReLU layers over time,
/// mean pooling over the chunk, then two FC+BN+ReLU layers.
#[derive(Clone, Debug)]
pub struct Fen {
    conv1: Conv1d,
    bn1: BatchNorm,
    conv2: Conv1d,
    bn2: BatchNorm,
    fc1: Linear,
    bn3: BatchNorm,
    fc2: Linear,
    bn4: BatchNorm,
    frames: usize,
    n_mels: usize,
}

impl Fen {
    pub fn new(prefix: &str, cfg: &ModelConfig) -> Self {
        let p = |s: &str| format!("{prefix}.{s}");
        Self {
            conv1: Conv1d::new(p("conv1"), cfg.n_mels, cfg.filters, false),
            bn1: BatchNorm::new(p("bn1"), cfg.filters),
            conv2: Conv1d::new(p("conv2"), cfg.filters, cfg.filters, false),
            bn2: BatchNorm::new(p("bn2"), cfg.filters),
            fc1: Linear::new(p("fc1"), cfg.filters, cfg.fen_hidden, false),
            bn3: BatchNorm::new(p("bn3"), cfg.fen_hidden),
            fc2: Linear::new(p("fc2"), cfg.fen_hidden, cfg.bottleneck, false),
            bn4: BatchNorm::new(p("bn4"), cfg.bottleneck),
            frames: cfg.chunk_frames,
            n_mels: cfg.n_mels,
        }
    }

    pub fn register<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        self.conv1.register(store)?;
        self.bn1.register(store)?;
        self.conv2.register(store)?;
        self.bn2.register(store)?;
        self.fc1.register(store)?;
        self.bn3.register(store)?;
        self.fc2.register(store)?;
        self.bn4.register(store)
    }

    /// `x` is `[chunks·frames, n_mels]`; returns `[chunks, bottleneck]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let (rows, cols) = g.shape(x);
        if cols != self.n_mels || rows == 0 || rows % self.frames != 0 {
            return Err(Error::shape(
                "fen",
                format!("expected chunks of {}x{}, got a {rows}x{cols} stack", self.frames, self.n_mels),
            ));
        }
        let h = self.conv1.forward(g, store, x, self.frames)?;
        let h = self.bn1.forward(g, store, h, mode)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, store, h, self.frames)?;
        let h = self.bn2.forward(g, store, h, mode)?;
        let h = g.relu(h);
        let h = g.segment_mean(h, self.frames);
        let h = self.fc1.forward(g, store, h)?;
        let h = self.bn3.forward(g, store, h, mode)?;
        let h = g.relu(h);
        let h = self.fc2.forward(g, store, h)?;
        let h = self.bn4.forward(g, store, h, mode)?;
        Ok(g.relu(h))
    }
}

#[derive(Clone, Debug)]
struct Encoder {
    rnn: Blstm,
    mu: Linear,
    log_sigma: Linear,
}

#[derive(Clone, Debug)]
struct Decoder {
    rnn: Blstm,
    fc: Linear,
    bn1: BatchNorm,
    time_embed: String,
    conv1: Conv1d,
    bn2: BatchNorm,
    conv2: Conv1d,
}

#[derive(Clone, Debug)]
struct Refiner {
    conv1: Conv1d,
    conv2: Conv1d,
    conv3: Conv1d,
}

/// A stacked batch of `batch` recordings with `steps` chunks each, as
/// `[batch·steps·frames, n_mels]` rows ordered (recording, chunk, frame).
#[derive(Clone, Debug)]
pub struct ChunkBatch<T> {
    pub batch: usize,
    pub steps: usize,
    pub data: Mat<T>,
}

impl<T: Scalar> ChunkBatch<T> {
    pub fn from_recordings(recs: &[&[MelChunk]]) -> Result<Self> {
        let steps = recs.first().map_or(0, |r| r.len());
        if steps == 0 {
            return Err(Error::InvalidInput("batch needs at least one chunk per recording".into()));
        }
        if recs.iter().any(|r| r.len() != steps) {
            return Err(Error::shape("batch", "recordings in one batch must have equal chunk counts"));
        }
        let mut data = Vec::with_capacity(recs.len() * steps * MelChunk::LEN);
        for r in recs {
            for c in r.iter() {
                if c.data.len() != MelChunk::LEN {
                    return Err(Error::shape("batch", "malformed chunk"));
                }
                data.extend(c.data.iter().map(|&v| T::from_f64_lossy(v as f64)));
            }
        }
        let rows = data.len() / crate::features::N_MELS;
        Ok(Self {
            batch: recs.len(),
            steps,
            data: Mat::from_vec(rows, crate::features::N_MELS, data),
        })
    }

    pub fn single(chunks: &[MelChunk]) -> Result<Self> {
        Self::from_recordings(&[chunks])
    }
}

/// Reparameterization noise for one forward pass, `[batch·steps, D]` per stream.
#[derive(Clone, Debug)]
pub struct Noise<T> {
    pub singer: Mat<T>,
    pub technique: Mat<T>,
}

impl<T: Scalar> Noise<T> {
    pub fn sample<R: Rng>(rng: &mut R, rows: usize, dim: usize) -> Self {
        let mut draw = || {
            let data = (0..rows * dim)
                .map(|_| T::from_f64_lossy(rng.sample::<f64, _>(StandardNormal)))
                .collect();
            Mat::from_vec(rows, dim, data)
        };
        let singer = draw();
        let technique = draw();
        Self { singer, technique }
    }
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct StreamVars {
    pub mu: Var,
    pub log_sigma: Var,
    pub z: Var,
    pub alpha: Var,
    pub summary: Var,
    pub logits: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct GraphOut {
    pub batch: usize,
    pub steps: usize,
    pub singer: StreamVars,
    pub technique: StreamVars,
    pub recon: Var,
    pub refined: Var,
}

impl GraphOut {
    pub fn stream(&self, attr: Attribute) -> &StreamVars {
        match attr {
            Attribute::Singer => &self.singer,
            Attribute::Technique => &self.technique,
        }
    }
}

/// Singer encoder, technique encoder, joint decoder, refinement network,
/// attention and classifier heads around a shared feature extractor.
#[derive(Clone, Debug)]
pub struct Gmvae {
    pub cfg: ModelConfig,
    fen: Fen,
    enc_s: Encoder,
    enc_t: Encoder,
    dec: Decoder,
    refine: Refiner,
    attn_s: Linear,
    attn_t: Linear,
    cls_s: Linear,
    cls_t: Linear,
}

impl Gmvae {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.latent_dim;
        let h = cfg.lstm_hidden;
        let encoder = |p: &str| Encoder {
            rnn: Blstm::new(format!("{p}.rnn"), cfg.bottleneck, h),
            mu: Linear::new(format!("{p}.mu"), 2 * h, d, true),
            log_sigma: Linear::new(format!("{p}.log_sigma"), 2 * h, d, true),
        };
        Ok(Self {
            fen: Fen::new("fen", &cfg),
            enc_s: encoder("enc_s"),
            enc_t: encoder("enc_t"),
            dec: Decoder {
                rnn: Blstm::new("dec.rnn", 2 * d, h),
                fc: Linear::new("dec.fc", 2 * h, cfg.filters, false),
                bn1: BatchNorm::new("dec.bn1", cfg.filters),
                time_embed: "dec.time_embed".into(),
                conv1: Conv1d::new("dec.conv1", cfg.filters, cfg.filters, false),
                bn2: BatchNorm::new("dec.bn2", cfg.filters),
                conv2: Conv1d::new("dec.conv2", cfg.filters, cfg.n_mels, true),
            },
            refine: Refiner {
                conv1: Conv1d::new("refine.conv1", cfg.n_mels, cfg.filters, true),
                conv2: Conv1d::new("refine.conv2", cfg.filters, cfg.filters, true),
                conv3: Conv1d::new("refine.conv3", cfg.filters, cfg.n_mels, true),
            },
            attn_s: Linear::new("attn_s.f", d, 1, true),
            attn_t: Linear::new("attn_t.f", d, 1, true),
            cls_s: Linear::new("cls_s.fc", d, cfg.k_singers, true),
            cls_t: Linear::new("cls_t.fc", d, cfg.k_techniques, true),
            cfg,
        })
    }

    pub fn register<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        self.fen.register(store)?;
        for enc in [&self.enc_s, &self.enc_t] {
            enc.rnn.register(store)?;
            enc.mu.register(store)?;
            enc.log_sigma.register(store)?;
        }
        self.dec.rnn.register(store)?;
        self.dec.fc.register(store)?;
        self.dec.bn1.register(store)?;
        store.register(
            &self.dec.time_embed,
            &[self.cfg.chunk_frames, self.cfg.filters],
            Init::Xavier {
                fan_in: self.cfg.filters,
                fan_out: self.cfg.filters,
            },
            true,
        )?;
        self.dec.conv1.register(store)?;
        self.dec.bn2.register(store)?;
        self.dec.conv2.register(store)?;
        self.refine.conv1.register(store)?;
        self.refine.conv2.register(store)?;
        self.refine.conv3.register(store)?;
        self.attn_s.register(store)?;
        self.attn_t.register(store)?;
        self.cls_s.register(store)?;
        self.cls_t.register(store)?;
        let d = self.cfg.latent_dim;
        for (attr, k) in [("prior_s", self.cfg.k_singers), ("prior_t", self.cfg.k_techniques)] {
            store.register(&format!("{attr}.means"), &[k, d], Init::Xavier { fan_in: d, fan_out: d }, true)?;
            store.register(&format!("{attr}.var"), &[k, d], Init::Const(self.cfg.fixed_variance), false)?;
        }
        Ok(())
    }

    /// Registered and Xavier-initialized parameter store.
    pub fn init_store<T: Scalar>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new(seed);
        self.register(&mut store)?;
        xavier_init(&mut store);
        Ok(store)
    }

    pub fn fen<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        self.fen.forward(g, store, x, mode)
    }

    /// BLSTM over the chunk sequence and FC heads for μ and log σ.
    /// With `noise` the latent is `μ + σ ⊙ ε`; without it, `z` is `μ` itself.
    #[allow(clippy::too_many_arguments)]
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        attr: Attribute,
        feats: Var,
        batch: usize,
        steps: usize,
        noise: Option<&Mat<T>>,
    ) -> Result<(Var, Var, Var)> {
        let enc = match attr {
            Attribute::Singer => &self.enc_s,
            Attribute::Technique => &self.enc_t,
        };
        let h = enc.rnn.forward(g, store, feats, batch, steps)?;
        let mu = enc.mu.forward(g, store, h)?;
        let ls = enc.log_sigma.forward(g, store, h)?;
        let ls = g.clamp(ls, T::from_f64_lossy(LOG_SIGMA_MIN), T::from_f64_lossy(LOG_SIGMA_MAX));
        let z = match noise {
            Some(eps) => {
                if eps.shape() != g.shape(mu) {
                    return Err(Error::shape(format!("{} noise", attr.prefix()), "noise shape differs from latent"));
                }
                let sigma = g.exp(ls);
                let e = g.constant(eps.clone());
                let s = g.mul(sigma, e);
                g.add(mu, s)
            }
            None => mu,
        };
        Ok((mu, ls, z))
    }

    /// Joint decoder plus residual refinement. Returns `(recon, refined)`,
    /// each `[batch·steps·frames, n_mels]`.
    #[allow(clippy::too_many_arguments)]
    pub fn decode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        z_s: Var,
        z_t: Var,
        batch: usize,
        steps: usize,
        mode: Mode,
    ) -> Result<(Var, Var)> {
        let d = self.cfg.latent_dim;
        let rows = batch * steps;
        if g.shape(z_s) != (rows, d) || g.shape(z_t) != (rows, d) {
            return Err(Error::shape(
                "dec",
                format!(
                    "latent streams {:?} and {:?} must both be {rows}x{d}",
                    g.shape(z_s),
                    g.shape(z_t)
                ),
            ));
        }
        let frames = self.cfg.chunk_frames;
        let zc = g.concat_cols(&[z_s, z_t]);
        let h = self.dec.rnn.forward(g, store, zc, batch, steps)?;
        let h = self.dec.fc.forward(g, store, h)?;
        let h = self.dec.bn1.forward(g, store, h, mode)?;
        let h = g.relu(h);
        let h = g.repeat_rows(h, frames);
        let te = g.param(store, &self.dec.time_embed)?;
        let h = g.add_tiled(h, te);
        let h = self.dec.conv1.forward(g, store, h, frames)?;
        let h = self.dec.bn2.forward(g, store, h, mode)?;
        let h = g.relu(h);
        let h = self.dec.conv2.forward(g, store, h, frames)?;
        let recon = g.tanh(h);

        let r = self.refine.conv1.forward(g, store, recon, frames)?;
        let r = g.relu(r);
        let r = self.refine.conv2.forward(g, store, r, frames)?;
        let r = g.relu(r);
        let r = self.refine.conv3.forward(g, store, r, frames)?;
        let r = g.add(recon, r);
        let refined = g.tanh(r);
        Ok((recon, refined))
    }

    /// Attention pooling over the chunk axis: `α = softmax_n f(μ_n)` and
    /// `c = Σ α_n μ_n`; uniform `α = 1/N` without the attention module.
    pub fn attend<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        attr: Attribute,
        seq: Var,
        steps: usize,
    ) -> Result<(Var, Var)> {
        let (rows, _) = g.shape(seq);
        let alpha = if self.cfg.use_attention {
            let f = match attr {
                Attribute::Singer => &self.attn_s,
                Attribute::Technique => &self.attn_t,
            };
            let scores = f.forward(g, store, seq)?;
            g.segment_softmax(scores, steps)
        } else {
            let u = T::one() / T::from_usize(steps).unwrap();
            g.constant(Mat::filled(rows, 1, u))
        };
        let weighted = g.mul_col(seq, alpha);
        let c = g.segment_sum(weighted, steps);
        Ok((alpha, c))
    }

    pub fn classify<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, attr: Attribute, c: Var) -> Result<Var> {
        match attr {
            Attribute::Singer => self.cls_s.forward(g, store, c),
            Attribute::Technique => self.cls_t.forward(g, store, c),
        }
    }

    /// Full pass: features, both encoders, decoder, attention and classifier
    /// heads. Classifier summaries pool the posterior means. Pass `noise` to
    /// sample latents (training); `None` uses the means.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        batch: &ChunkBatch<T>,
        mode: Mode,
        noise: Option<&Noise<T>>,
    ) -> Result<GraphOut> {
        let (b, n) = (batch.batch, batch.steps);
        let x = g.constant(batch.data.clone());
        let feats = self.fen(g, store, x, mode)?;
        let mut streams = Vec::with_capacity(2);
        for attr in [Attribute::Singer, Attribute::Technique] {
            let eps = noise.map(|nz| match attr {
                Attribute::Singer => &nz.singer,
                Attribute::Technique => &nz.technique,
            });
            let (mu, log_sigma, z) = self.encode(g, store, attr, feats, b, n, eps)?;
            let (alpha, summary) = self.attend(g, store, attr, mu, n)?;
            let logits = self.classify(g, store, attr, summary)?;
            streams.push(StreamVars {
                mu,
                log_sigma,
                z,
                alpha,
                summary,
                logits,
            });
        }
        let (singer, technique) = (streams[0], streams[1]);
        let (recon, refined) = self.decode(g, store, singer.z, technique.z, b, n, mode)?;
        Ok(GraphOut {
            batch: b,
            steps: n,
            singer,
            technique,
            recon,
            refined,
        })
    }
}
