//! Training loop, length-bucketed batching, run configuration and
//! resumable checkpoints.

pub mod config;

pub use config::{TrainConfig, Variant, CONFIG_KEYS};

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::{ChunkedRecording, MelChunk};
use crate::gmvae::{ChunkBatch, Gmvae, Noise};
use crate::nn::checkpoint::write_atomic;
use crate::nn::layers::BN_MOMENTUM;
use crate::nn::{Adam, Checkpoint, Graph, Mode, ParamStore};
use crate::objective::{objective_graph, target_var, LossBreakdown};

pub const LOG_HEADER: &str = "step,recon,kld_s,kld_t,ce_s,ce_t,total";
pub const LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.gmvc";
pub const CONFIG_FILE: &str = "run.cfg";

/// Independent deterministic stream for `(seed, tag, index)`.
pub fn derived_rng(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut x = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= index.wrapping_mul(0x94D0_49BB_1331_11EB);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(x ^ (x >> 31))
}

const TAG_BATCHES: u64 = 1;
const TAG_NOISE: u64 = 2;

/// One epoch of batches over recordings with the given chunk counts.
/// Recordings are bucketed by count so each batch is rectangular, shuffled
/// within buckets, cut into batches of at most `batch_size`, and the batch
/// order is shuffled. Every index appears exactly once.
pub fn make_batches(chunk_counts: &[usize], batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut rng = derived_rng(seed, TAG_BATCHES, epoch);
    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &n) in chunk_counts.iter().enumerate() {
        buckets.entry(n).or_default().push(i);
    }
    let mut batches = Vec::new();
    for (_, mut idx) in buckets {
        idx.shuffle(&mut rng);
        batches.extend(idx.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(&mut rng);
    batches
}

fn log_line(step: u64, b: &LossBreakdown) -> String {
    format!(
        "{step},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
        b.recon, b.kld_s, b.kld_t, b.ce_s, b.ce_t, b.total
    )
}

/// Parse a training log back into `(step, breakdown)` rows.
pub fn read_log(path: &Path) -> Result<Vec<(u64, LossBreakdown)>> {
    let text = fs::read_to_string(path)?;
    let bad = |d: String| Error::Format {
        path: path.to_path_buf(),
        detail: d,
    };
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(bad("missing training log header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 7 {
                return Err(bad(format!("malformed row `{l}`")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number `{s}`")));
            Ok((
                f[0].parse().map_err(|_| bad(format!("bad step `{}`", f[0])))?,
                LossBreakdown {
                    recon: num(f[1])?,
                    kld_s: num(f[2])?,
                    kld_t: num(f[3])?,
                    ce_s: num(f[4])?,
                    ce_t: num(f[5])?,
                    total: num(f[6])?,
                },
            ))
        })
        .collect()
}

/// Optimizer, parameters and data for one run. The step counter is the
/// optimizer's; batches and noise derive from `(seed, step)` alone, so a run
/// resumed from a checkpoint continues exactly as the uninterrupted one.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Gmvae,
    pub store: ParamStore<f32>,
    pub adam: Adam<f32>,
    data: Vec<ChunkedRecording>,
    counts: Vec<usize>,
    batches_per_epoch: u64,
    epoch: Option<(u64, Vec<Vec<usize>>)>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, data: Vec<ChunkedRecording>) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::InvalidManifest("no training recordings".into()));
        }
        for r in &data {
            if r.meta.singer >= cfg.model.k_singers {
                return Err(Error::InvalidLabel {
                    label: r.meta.singer,
                    classes: cfg.model.k_singers,
                });
            }
            if r.meta.technique >= cfg.model.k_techniques {
                return Err(Error::InvalidLabel {
                    label: r.meta.technique,
                    classes: cfg.model.k_techniques,
                });
            }
        }
        let model = Gmvae::new(cfg.model.clone())?;
        let store = model.init_store(cfg.seed)?;
        let counts: Vec<usize> = data.iter().map(ChunkedRecording::n_chunks).collect();
        let batches_per_epoch = make_batches(&counts, cfg.batch_size, cfg.seed, 0).len() as u64;
        Ok(Self {
            adam: Adam::new(cfg.lr),
            cfg,
            model,
            store,
            data,
            counts,
            batches_per_epoch,
            epoch: None,
        })
    }

    pub fn step(&self) -> u64 {
        self.adam.t
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_state(&self.store, Some(&self.adam))
    }

    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.restore(&mut self.store, Some(&mut self.adam))
    }

    fn batch_for(&mut self, step: u64) -> Vec<usize> {
        let epoch = step / self.batches_per_epoch;
        let pos = (step % self.batches_per_epoch) as usize;
        if self.epoch.as_ref().map(|(e, _)| *e) != Some(epoch) {
            self.epoch = Some((epoch, make_batches(&self.counts, self.cfg.batch_size, self.cfg.seed, epoch)));
        }
        self.epoch.as_ref().unwrap().1[pos].clone()
    }

    /// One optimizer update. Parameters are left untouched when the loss is
    /// not finite.
    pub fn train_step(&mut self) -> Result<LossBreakdown> {
        let step = self.step();
        let idx = self.batch_for(step);
        let recs: Vec<&[MelChunk]> = idx.iter().map(|&i| self.data[i].chunks.as_slice()).collect();
        let labels_s: Vec<usize> = idx.iter().map(|&i| self.data[i].meta.singer).collect();
        let labels_t: Vec<usize> = idx.iter().map(|&i| self.data[i].meta.technique).collect();
        let batch = ChunkBatch::<f32>::from_recordings(&recs)?;
        let mut rng = derived_rng(self.cfg.seed, TAG_NOISE, step);
        let noise = Noise::sample(&mut rng, batch.batch * batch.steps, self.cfg.model.latent_dim);

        let mut g = Graph::new();
        let out = self.model.forward(&mut g, &self.store, &batch, Mode::Train, Some(&noise))?;
        let x = target_var(&mut g, &batch.data);
        let obj = objective_graph(&mut g, &self.store, &out, x, &labels_s, &labels_t, &self.cfg.model)?;
        let breakdown = obj.breakdown(&g)?;
        g.backward(obj.total);
        self.store.zero_grad();
        g.accumulate_param_grads(&mut self.store);
        self.adam.step(&mut self.store);
        self.store.apply_bn_stats(g.bn_stats(), BN_MOMENTUM);
        Ok(breakdown)
    }

    pub fn log_path(&self) -> PathBuf {
        self.cfg.out_dir.join(LOG_FILE)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.cfg.out_dir.join(CHECKPOINT_FILE)
    }

    /// Train until `max_steps`, appending to the log and writing checkpoints
    /// under `out_dir`. Log rows past the current step (left by an
    /// interrupted run) are discarded first. `on_step` sees every logged row.
    pub fn run(&mut self, mut on_step: impl FnMut(u64, &LossBreakdown)) -> Result<()> {
        let dir = self.cfg.out_dir.clone();
        fs::create_dir_all(&dir)?;
        write_atomic(&dir.join(CONFIG_FILE), self.cfg.to_kv_string().as_bytes())?;
        let mut kept = String::from(LOG_HEADER);
        kept.push('\n');
        if self.step() > 0 && self.log_path().exists() {
            for (s, b) in read_log(&self.log_path())? {
                if s <= self.step() {
                    kept.push_str(&log_line(s, &b));
                    kept.push('\n');
                }
            }
        }
        fs::write(self.log_path(), kept)?;
        let mut log = BufWriter::new(fs::OpenOptions::new().append(true).open(self.log_path())?);

        while self.step() < self.cfg.max_steps {
            let b = match self.train_step() {
                Ok(b) => b,
                Err(e) => {
                    log.flush()?;
                    return Err(e);
                }
            };
            let s = self.step();
            writeln!(log, "{}", log_line(s, &b))?;
            on_step(s, &b);
            let every = self.cfg.checkpoint_every;
            if every > 0 && s.is_multiple_of(every) {
                log.flush()?;
                self.checkpoint().save(&self.checkpoint_path())?;
            }
        }
        log.flush()?;
        self.checkpoint().save(&self.checkpoint_path())
    }
}

/// Model and parameters of a finished run directory.
pub fn load_run(dir: &Path) -> Result<(TrainConfig, Gmvae, ParamStore<f32>)> {
    let cfg = TrainConfig::load(&dir.join(CONFIG_FILE))?;
    let model = Gmvae::new(cfg.model.clone())?;
    let mut store = model.init_store(cfg.seed)?;
    Checkpoint::load(&dir.join(CHECKPOINT_FILE))?.restore(&mut store, None)?;
    Ok((cfg, model, store))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_partition_each_epoch() {
        let counts = [4, 4, 5, 4, 6, 5, 4, 4, 4, 5];
        let b = make_batches(&counts, 4, 9, 0);
        let mut all: Vec<usize> = b.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        for batch in &b {
            assert!(batch.len() <= 4);
            assert!(batch.iter().all(|&i| counts[i] == counts[batch[0]]));
        }
        assert_eq!(b, make_batches(&counts, 4, 9, 0));
        assert_ne!(b, make_batches(&counts, 4, 9, 1));
    }

    #[test]
    fn equal_lengths_give_ceil_batches() {
        assert_eq!(make_batches(&[5; 10], 4, 1, 0).len(), 3);
    }
}
