use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::gmvae::ModelConfig;

/// Model variants: M1 is a plain mixture VAE, M2 adds the classification
/// terms, M3 adds attention on top of M2.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    M1,
    M2,
    M3,
}

impl Variant {
    /// `(beta, gamma, use_attention)` implied by the variant.
    pub fn settings(self) -> (f64, f64, bool) {
        match self {
            Variant::M1 => (0.0, 0.0, false),
            Variant::M2 => (1.0, 1.0, false),
            Variant::M3 => (1.0, 1.0, true),
        }
    }

    pub fn apply(self, cfg: &mut ModelConfig) {
        let (beta, gamma, attn) = self.settings();
        cfg.beta = beta;
        cfg.gamma = gamma;
        cfg.use_attention = attn;
    }

    pub fn check(self, cfg: &ModelConfig) -> Result<()> {
        let (beta, gamma, attn) = self.settings();
        if cfg.beta != beta || cfg.gamma != gamma || cfg.use_attention != attn {
            return Err(Error::InvalidConfig(format!(
                "variant {self} requires beta={beta}, gamma={gamma}, use_attention={attn}; got beta={}, gamma={}, use_attention={}",
                cfg.beta, cfg.gamma, cfg.use_attention
            )));
        }
        Ok(())
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::M1 => "M1",
            Variant::M2 => "M2",
            Variant::M3 => "M3",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "M1" => Ok(Variant::M1),
            "M2" => Ok(Variant::M2),
            "M3" => Ok(Variant::M3),
            _ => Err(Error::InvalidConfig(format!("unknown variant `{s}` (expected M1, M2 or M3)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub batch_size: usize,
    pub lr: f64,
    pub max_steps: u64,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let variant = Variant::M3;
        let mut model = ModelConfig::default();
        variant.apply(&mut model);
        Self {
            variant,
            batch_size: 128,
            lr: 1e-4,
            max_steps: 5000,
            seed: 0,
            checkpoint_every: 500,
            out_dir: PathBuf::from("runs/gmvc"),
            model,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "variant",
    "batch_size",
    "lr",
    "max_steps",
    "seed",
    "latent_dim",
    "k_singers",
    "k_techniques",
    "beta",
    "gamma",
    "use_attention",
    "checkpoint_every",
    "out_dir",
    "filters",
    "fen_hidden",
    "bottleneck",
    "lstm_hidden",
];

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::InvalidConfig(format!("`{key}` has invalid value `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::InvalidConfig(format!("`{key}` must be true or false, got `{v}`"))),
    }
}

impl TrainConfig {
    /// Parse `key = value` lines. Blank lines and `#` comments are skipped.
    /// Unset `beta`, `gamma` and `use_attention` follow the variant; explicit
    /// values that contradict it are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut variant = None;
        let (mut beta, mut gamma, mut attn) = (None, None, None);
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key=value", lineno + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::InvalidConfig(format!("`{k}` given twice")));
            }
            match k {
                "variant" => variant = Some(v.parse::<Variant>()?),
                "batch_size" => cfg.batch_size = parse_num(k, v)?,
                "lr" => cfg.lr = parse_num(k, v)?,
                "max_steps" => cfg.max_steps = parse_num(k, v)?,
                "seed" => cfg.seed = parse_num(k, v)?,
                "latent_dim" => cfg.model.latent_dim = parse_num(k, v)?,
                "k_singers" => cfg.model.k_singers = parse_num(k, v)?,
                "k_techniques" => cfg.model.k_techniques = parse_num(k, v)?,
                "beta" => beta = Some(parse_num(k, v)?),
                "gamma" => gamma = Some(parse_num(k, v)?),
                "use_attention" => attn = Some(parse_bool(k, v)?),
                "checkpoint_every" => cfg.checkpoint_every = parse_num(k, v)?,
                "out_dir" => cfg.out_dir = PathBuf::from(v),
                "filters" => cfg.model.filters = parse_num(k, v)?,
                "fen_hidden" => cfg.model.fen_hidden = parse_num(k, v)?,
                "bottleneck" => cfg.model.bottleneck = parse_num(k, v)?,
                "lstm_hidden" => cfg.model.lstm_hidden = parse_num(k, v)?,
                _ => return Err(Error::InvalidConfig(format!("unknown key `{k}`"))),
            }
        }
        cfg.variant = variant.unwrap_or(cfg.variant);
        cfg.variant.apply(&mut cfg.model);
        cfg.model.beta = beta.unwrap_or(cfg.model.beta);
        cfg.model.gamma = gamma.unwrap_or(cfg.model.gamma);
        cfg.model.use_attention = attn.unwrap_or(cfg.model.use_attention);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.variant.check(&self.model)?;
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig("lr must be positive".into()));
        }
        Ok(())
    }

    /// Every key, one per line, in [`CONFIG_KEYS`] order.
    pub fn to_kv_string(&self) -> String {
        let m = &self.model;
        let vals = [
            self.variant.to_string(),
            self.batch_size.to_string(),
            format!("{:e}", self.lr),
            self.max_steps.to_string(),
            self.seed.to_string(),
            m.latent_dim.to_string(),
            m.k_singers.to_string(),
            m.k_techniques.to_string(),
            m.beta.to_string(),
            m.gamma.to_string(),
            m.use_attention.to_string(),
            self.checkpoint_every.to_string(),
            self.out_dir.display().to_string(),
            m.filters.to_string(),
            m.fen_hidden.to_string(),
            m.bottleneck.to_string(),
            m.lstm_hidden.to_string(),
        ];
        CONFIG_KEYS
            .iter()
            .zip(vals)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_fills_weights() {
        let c = TrainConfig::parse("variant = M1\nlatent_dim = 8\n").unwrap();
        assert_eq!((c.model.beta, c.model.gamma, c.model.use_attention), (0.0, 0.0, false));
        let c = TrainConfig::parse("variant=m3").unwrap();
        assert!(c.model.use_attention);
    }

    #[test]
    fn contradicting_variant_rejected() {
        for text in ["variant = M1\nbeta = 1", "variant = M2\nuse_attention = true", "variant = M3\ngamma = 0"] {
            assert!(matches!(TrainConfig::parse(text), Err(Error::InvalidConfig(_))), "{text}");
        }
    }

    #[test]
    fn unknown_and_duplicate_keys_rejected() {
        assert!(TrainConfig::parse("dropout = 0.1").is_err());
        assert!(TrainConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(TrainConfig::parse("seed").is_err());
    }

    #[test]
    fn kv_roundtrip() {
        let c = TrainConfig::parse("variant = M2\nlr = 0.0003\nbatch_size = 8\nfilters = 32 # desk\nout_dir = a/b").unwrap();
        assert_eq!(TrainConfig::parse(&c.to_kv_string()).unwrap(), c);
    }
}
