use crate::error::{Error, Result};
use crate::features::{CHUNK_FRAMES, N_MELS, N_SINGERS, N_TECHNIQUES};

/// Architecture and objective weights.
///
/// Layer widths default to the full-size network; the desk-scale and
/// gradient-check configurations shrink them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub k_singers: usize,
    pub k_techniques: usize,
    /// Weight of the singer classification term.
    pub beta: f64,
    /// Weight of the technique classification term.
    pub gamma: f64,
    pub use_attention: bool,
    /// Variance of every prior component coordinate; never trained.
    pub fixed_variance: f64,
    pub n_mels: usize,
    pub chunk_frames: usize,
    /// Conv filters in the feature extractor, decoder and refinement stack.
    pub filters: usize,
    /// Width of the first fully connected layer after pooling.
    pub fen_hidden: usize,
    /// Bottleneck feature size shared by both encoders.
    pub bottleneck: usize,
    /// Hidden units per LSTM direction.
    pub lstm_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            k_singers: N_SINGERS,
            k_techniques: N_TECHNIQUES,
            beta: 1.0,
            gamma: 1.0,
            use_attention: true,
            fixed_variance: (-2.0f64).exp(),
            n_mels: N_MELS,
            chunk_frames: CHUNK_FRAMES,
            filters: 512,
            fen_hidden: 512,
            bottleneck: 256,
            lstm_hidden: 256,
        }
    }
}

impl ModelConfig {
    /// Small widths for finite-difference checks: D=4, hidden 8, filters 16.
    pub fn tiny() -> Self {
        Self {
            latent_dim: 4,
            filters: 16,
            fen_hidden: 16,
            bottleneck: 8,
            lstm_hidden: 8,
            ..Self::default()
        }
    }

    /// Widths used for CPU-scale training on the synthetic corpus.
    pub fn desk() -> Self {
        Self {
            latent_dim: 8,
            filters: 32,
            fen_hidden: 64,
            bottleneck: 32,
            lstm_hidden: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.latent_dim == 0 {
            return bad("latent_dim must be at least 1");
        }
        if self.k_singers == 0 || self.k_techniques == 0 {
            return bad("mixture component counts must be at least 1");
        }
        if !(self.beta >= 0.0 && self.gamma >= 0.0) {
            return bad("beta and gamma must be non-negative");
        }
        if !(self.fixed_variance > 0.0 && self.fixed_variance.is_finite()) {
            return bad("fixed_variance must be positive");
        }
        if [self.n_mels, self.chunk_frames, self.filters, self.fen_hidden, self.bottleneck, self.lstm_hidden]
            .contains(&0)
        {
            return bad("layer widths must be positive");
        }
        Ok(())
    }

    pub fn k(&self, attr: super::Attribute) -> usize {
        match attr {
            super::Attribute::Singer => self.k_singers,
            super::Attribute::Technique => self.k_techniques,
        }
    }
}
