use std::path::Path;

use crate::error::{Error, Result};
use crate::features::{ChunkedRecording, MelChunk, RecordingMeta};
use crate::gmvae::{ChunkBatch, Fen, ModelConfig};
use crate::nn::checkpoint::write_atomic;
use crate::nn::layers::BN_MOMENTUM;
use crate::nn::{xavier_init, Adam, Blstm, Checkpoint, Graph, Linear, Mode, ParamStore, Var};
use crate::training::make_batches;

use super::EvalAttribute;

/// Widths and optimizer settings for an attribute classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub filters: usize,
    pub fen_hidden: usize,
    pub bottleneck: usize,
    pub lstm_hidden: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub max_steps: u64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            filters: m.filters,
            fen_hidden: m.fen_hidden,
            bottleneck: m.bottleneck,
            lstm_hidden: m.lstm_hidden,
            batch_size: 128,
            lr: 1e-4,
            max_steps: 2000,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn desk() -> Self {
        let m = ModelConfig::desk();
        Self {
            filters: m.filters,
            fen_hidden: m.fen_hidden,
            bottleneck: m.bottleneck,
            lstm_hidden: m.lstm_hidden,
            batch_size: 8,
            ..Self::default()
        }
    }

    fn model_config(&self) -> ModelConfig {
        ModelConfig {
            filters: self.filters,
            fen_hidden: self.fen_hidden,
            bottleneck: self.bottleneck,
            lstm_hidden: self.lstm_hidden,
            ..ModelConfig::default()
        }
    }

    pub fn to_kv_string(&self, attribute: EvalAttribute, classes: usize) -> String {
        format!(
            "attribute = {}\nclasses = {classes}\nfilters = {}\nfen_hidden = {}\nbottleneck = {}\nlstm_hidden = {}\nbatch_size = {}\nlr = {:e}\nmax_steps = {}\nseed = {}\n",
            attribute.name(),
            self.filters,
            self.fen_hidden,
            self.bottleneck,
            self.lstm_hidden,
            self.batch_size,
            self.lr,
            self.max_steps,
            self.seed
        )
    }

    fn parse_kv(text: &str) -> Result<(Self, EvalAttribute, usize)> {
        let mut cfg = Self::default();
        let mut attr = None;
        let mut classes = None;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("expected key=value, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            let num = || v.parse::<u64>().map_err(|_| Error::InvalidConfig(format!("bad `{k}` value `{v}`")));
            match k {
                "attribute" => attr = Some(v.parse()?),
                "classes" => classes = Some(num()? as usize),
                "filters" => cfg.filters = num()? as usize,
                "fen_hidden" => cfg.fen_hidden = num()? as usize,
                "bottleneck" => cfg.bottleneck = num()? as usize,
                "lstm_hidden" => cfg.lstm_hidden = num()? as usize,
                "batch_size" => cfg.batch_size = num()? as usize,
                "lr" => cfg.lr = v.parse().map_err(|_| Error::InvalidConfig(format!("bad lr `{v}`")))?,
                "max_steps" => cfg.max_steps = num()?,
                "seed" => cfg.seed = num()?,
                _ => return Err(Error::InvalidConfig(format!("unknown key `{k}`"))),
            }
        }
        let attr = attr.ok_or_else(|| Error::InvalidConfig("missing `attribute`".into()))?;
        let classes = classes.ok_or_else(|| Error::InvalidConfig("missing `classes`".into()))?;
        Ok((cfg, attr, classes))
    }
}

/// Feature extractor, BLSTM, attention pooling and a softmax head, trained
/// on unconverted spectrograms to recognise one attribute.
#[derive(Clone, Debug)]
pub struct EvalClassifier {
    pub attribute: EvalAttribute,
    pub classes: usize,
    pub cfg: EvalConfig,
    pub store: ParamStore<f32>,
    fen: Fen,
    rnn: Blstm,
    attn: Linear,
    fc: Linear,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifierSummary {
    pub final_loss: f64,
    /// Percent correct on the holdout set; `None` without holdout data.
    pub holdout_accuracy: Option<f64>,
}

impl EvalClassifier {
    pub fn new(attribute: EvalAttribute, classes: usize, cfg: EvalConfig) -> Result<Self> {
        if classes == 0 {
            return Err(Error::InvalidConfig("classifier needs at least one class".into()));
        }
        let mc = cfg.model_config();
        mc.validate()?;
        let fen = Fen::new("clf.fen", &mc);
        let rnn = Blstm::new("clf.rnn", mc.bottleneck, mc.lstm_hidden);
        let attn = Linear::new("clf.attn", 2 * mc.lstm_hidden, 1, true);
        let fc = Linear::new("clf.fc", 2 * mc.lstm_hidden, classes, true);
        let mut store = ParamStore::new(cfg.seed);
        fen.register(&mut store)?;
        rnn.register(&mut store)?;
        attn.register(&mut store)?;
        fc.register(&mut store)?;
        xavier_init(&mut store);
        Ok(Self {
            attribute,
            classes,
            cfg,
            store,
            fen,
            rnn,
            attn,
            fc,
        })
    }

    fn logits(&self, g: &mut Graph<f32>, batch: &ChunkBatch<f32>, mode: Mode) -> Result<Var> {
        let x = g.constant(batch.data.clone());
        let f = self.fen.forward(g, &self.store, x, mode)?;
        let h = self.rnn.forward(g, &self.store, f, batch.batch, batch.steps)?;
        let s = self.attn.forward(g, &self.store, h)?;
        let a = g.segment_softmax(s, batch.steps);
        let w = g.mul_col(h, a);
        let c = g.segment_sum(w, batch.steps);
        self.fc.forward(g, &self.store, c)
    }

    fn check_labels(&self, recs: &[ChunkedRecording]) -> Result<()> {
        for r in recs {
            let l = self.attribute.label(&r.meta);
            if l >= self.classes {
                return Err(Error::InvalidManifest(format!(
                    "`{}` has {} label {l}, classifier has {} classes",
                    r.meta.id,
                    self.attribute.name(),
                    self.classes
                )));
            }
        }
        Ok(())
    }

    /// Cross-entropy training with Adam on `train`; accuracy on `holdout`.
    pub fn train(
        attribute: EvalAttribute,
        classes: usize,
        cfg: EvalConfig,
        train: &[ChunkedRecording],
        holdout: &[ChunkedRecording],
    ) -> Result<(Self, ClassifierSummary)> {
        if train.is_empty() {
            return Err(Error::InvalidManifest("no training recordings for the classifier".into()));
        }
        let mut clf = Self::new(attribute, classes, cfg)?;
        clf.check_labels(train)?;
        clf.check_labels(holdout)?;
        let counts: Vec<usize> = train.iter().map(ChunkedRecording::n_chunks).collect();
        let mut adam = Adam::new(clf.cfg.lr);
        let mut epoch_batches: Vec<Vec<usize>> = Vec::new();
        let mut epoch = 0;
        let mut final_loss = f64::NAN;
        for _ in 0..clf.cfg.max_steps {
            if epoch_batches.is_empty() {
                epoch_batches = make_batches(&counts, clf.cfg.batch_size, clf.cfg.seed, epoch);
                epoch_batches.reverse();
                epoch += 1;
            }
            let idx = epoch_batches.pop().expect("refilled above");
            let recs: Vec<&[MelChunk]> = idx.iter().map(|&i| train[i].chunks.as_slice()).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| attribute.label(&train[i].meta)).collect();
            let batch = ChunkBatch::from_recordings(&recs)?;
            let mut g = Graph::new();
            let logits = clf.logits(&mut g, &batch, Mode::Train)?;
            let lp = g.log_softmax_rows(logits);
            let picked = g.pick_cols(lp, labels);
            let s = g.sum_all(picked);
            let loss = g.scale(s, -1.0 / idx.len() as f32);
            final_loss = g.scalar(loss) as f64;
            if !final_loss.is_finite() {
                return Err(Error::NonFiniteLoss(format!("{} classifier cross-entropy", attribute.name())));
            }
            g.backward(loss);
            clf.store.zero_grad();
            g.accumulate_param_grads(&mut clf.store);
            adam.step(&mut clf.store);
            clf.store.apply_bn_stats(g.bn_stats(), BN_MOMENTUM);
        }
        let holdout_accuracy = if holdout.is_empty() {
            None
        } else {
            let preds = clf.predict_recordings(holdout)?;
            let truth: Vec<usize> = holdout.iter().map(|r| attribute.label(&r.meta)).collect();
            Some(super::accuracy(&preds, &truth))
        };
        Ok((
            clf,
            ClassifierSummary {
                final_loss,
                holdout_accuracy,
            },
        ))
    }

    /// Predicted class per recording, in inference mode.
    pub fn predict(&self, recs: &[&[MelChunk]]) -> Result<Vec<usize>> {
        recs.iter()
            .map(|r| {
                let batch = ChunkBatch::single(r)?;
                let mut g = Graph::new();
                let logits = self.logits(&mut g, &batch, Mode::Infer)?;
                let row: Vec<f64> = g.value(logits).row(0).iter().map(|&v| v as f64).collect();
                Ok(crate::conversion::argmax(&row))
            })
            .collect()
    }

    pub fn predict_recordings(&self, recs: &[ChunkedRecording]) -> Result<Vec<usize>> {
        let refs: Vec<&[MelChunk]> = recs.iter().map(|r| r.chunks.as_slice()).collect();
        self.predict(&refs)
    }

    /// `<dir>/<attribute>.gmvc` plus `<dir>/<attribute>.cfg`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let name = self.attribute.name();
        write_atomic(
            &dir.join(format!("{name}.cfg")),
            self.cfg.to_kv_string(self.attribute, self.classes).as_bytes(),
        )?;
        Checkpoint::from_state(&self.store, None).save(&dir.join(format!("{name}.gmvc")))
    }

    pub fn load(dir: &Path, attribute: EvalAttribute) -> Result<Self> {
        let name = attribute.name();
        let text = std::fs::read_to_string(dir.join(format!("{name}.cfg")))?;
        let (cfg, attr, classes) = EvalConfig::parse_kv(&text)?;
        if attr != attribute {
            return Err(Error::InvalidConfig(format!(
                "{name}.cfg describes a {} classifier",
                attr.name()
            )));
        }
        let mut clf = Self::new(attribute, classes, cfg)?;
        Checkpoint::load(&dir.join(format!("{name}.gmvc")))?.restore(&mut clf.store, None)?;
        Ok(clf)
    }
}

impl EvalAttribute {
    pub fn label(self, meta: &RecordingMeta) -> usize {
        match self {
            EvalAttribute::Singer => meta.singer,
            EvalAttribute::Technique => meta.technique,
            EvalAttribute::Vowel => meta.vowel,
        }
    }
}
