//! Conversion evaluation with independently trained attribute classifiers,
//! report rendering, and spectrogram grid images.

pub mod classifier;
pub mod image;
pub mod report;

pub use classifier::{ClassifierSummary, EvalClassifier, EvalConfig};
pub use image::{spectrogram_grid, write_pgm};
pub use report::{AccuracyReport, AccuracyRow, CSV_HEADER};

use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::conversion::{convert, reconstruct, ConversionRequest, Strategy};
use crate::error::{Error, Result};
use crate::features::{ChunkedRecording, MelChunk};
use crate::gmvae::{Attribute, Gmvae};
use crate::nn::{ParamStore, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EvalAttribute {
    Singer,
    Technique,
    Vowel,
}

impl EvalAttribute {
    pub const ALL: [EvalAttribute; 3] = [EvalAttribute::Singer, EvalAttribute::Technique, EvalAttribute::Vowel];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            EvalAttribute::Singer => "singer",
            EvalAttribute::Technique => "technique",
            EvalAttribute::Vowel => "vowel",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            EvalAttribute::Singer => "Singer",
            EvalAttribute::Technique => "Technique",
            EvalAttribute::Vowel => "Vowel",
        }
    }

    pub fn converted_by(self, attr: Attribute) -> bool {
        matches!(
            (self, attr),
            (EvalAttribute::Singer, Attribute::Singer) | (EvalAttribute::Technique, Attribute::Technique)
        )
    }

    pub fn from_attribute(attr: Attribute) -> Self {
        match attr {
            Attribute::Singer => EvalAttribute::Singer,
            Attribute::Technique => EvalAttribute::Technique,
        }
    }
}

impl FromStr for EvalAttribute {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown attribute `{s}`")))
    }
}

/// Percent of positions where `pred` equals `truth`; 0 for empty input.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "accuracy: length mismatch");
    if pred.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    100.0 * hits as f64 / pred.len() as f64
}

/// The singer, technique and vowel classifiers.
#[derive(Clone, Debug)]
pub struct Classifiers {
    pub by_attr: [EvalClassifier; 3],
}

impl Classifiers {
    pub fn get(&self, a: EvalAttribute) -> &EvalClassifier {
        &self.by_attr[a.index()]
    }

    /// Predictions of all three classifiers, indexed by [`EvalAttribute::index`].
    pub fn predict_all(&self, recs: &[&[MelChunk]]) -> Result<[Vec<usize>; 3]> {
        Ok([
            self.by_attr[0].predict(recs)?,
            self.by_attr[1].predict(recs)?,
            self.by_attr[2].predict(recs)?,
        ])
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.by_attr.iter().try_for_each(|c| c.save(dir))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            by_attr: [
                EvalClassifier::load(dir, EvalAttribute::Singer)?,
                EvalClassifier::load(dir, EvalAttribute::Technique)?,
                EvalClassifier::load(dir, EvalAttribute::Vowel)?,
            ],
        })
    }
}

fn accuracies(classifiers: &Classifiers, recs: &[&[MelChunk]], truth: &[[usize; 3]]) -> Result<[f64; 3]> {
    let preds = classifiers.predict_all(recs)?;
    let mut out = [0.0; 3];
    for m in EvalAttribute::ALL {
        let t: Vec<usize> = truth.iter().map(|l| l[m.index()]).collect();
        out[m.index()] = accuracy(&preds[m.index()], &t);
    }
    Ok(out)
}

fn labels(r: &ChunkedRecording) -> [usize; 3] {
    [r.meta.singer, r.meta.technique, r.meta.vowel]
}

/// Unconverted baseline: classifier accuracy on the original spectrograms.
pub fn baseline_row(classifiers: &Classifiers, test: &[ChunkedRecording], converted: Attribute) -> Result<AccuracyRow> {
    let recs: Vec<&[MelChunk]> = test.iter().map(|r| r.chunks.as_slice()).collect();
    let truth: Vec<[usize; 3]> = test.iter().map(labels).collect();
    Ok(AccuracyRow {
        strategy: None,
        variant: "M0".into(),
        converted,
        before: accuracies(classifiers, &recs, &truth)?,
        after: None,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConversionEval {
    pub row: AccuracyRow,
    /// Converted-attribute classifier accuracy measured against the source
    /// labels instead of the targets.
    pub converted_vs_source: f64,
    pub n_conversions: usize,
}

/// Convert every test recording to every target class of `attribute` and
/// classify the results. `before` is measured on the model's plain
/// reconstructions; `after` on the conversions, against the target label for
/// the converted attribute and the original labels otherwise.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_conversion<T: Scalar>(
    model: &Gmvae,
    store: &ParamStore<T>,
    variant: &str,
    classifiers: &Classifiers,
    test: &[ChunkedRecording],
    strategy: Strategy,
    attribute: Attribute,
) -> Result<ConversionEval> {
    let k = model.cfg.k(attribute);
    let fwds = test
        .par_iter()
        .map(|r| model.full_forward(store, &r.chunks))
        .collect::<Result<Vec<_>>>()?;
    let recons = fwds
        .par_iter()
        .map(|f| reconstruct(model, store, f))
        .collect::<Result<Vec<_>>>()?;
    let truth: Vec<[usize; 3]> = test.iter().map(labels).collect();
    let recon_refs: Vec<&[MelChunk]> = recons.iter().map(Vec::as_slice).collect();
    let before = accuracies(classifiers, &recon_refs, &truth)?;

    let pairs: Vec<(usize, usize)> = (0..test.len()).flat_map(|i| (0..k).map(move |t| (i, t))).collect();
    let converted = pairs
        .par_iter()
        .map(|&(i, t)| {
            let req = ConversionRequest::new(attribute, t, strategy);
            convert(model, store, &fwds[i], &req).map(|c| c.refined)
        })
        .collect::<Result<Vec<_>>>()?;
    let conv_refs: Vec<&[MelChunk]> = converted.iter().map(Vec::as_slice).collect();
    let conv_attr = EvalAttribute::from_attribute(attribute).index();
    let target_truth: Vec<[usize; 3]> = pairs
        .iter()
        .map(|&(i, t)| {
            let mut l = truth[i];
            l[conv_attr] = t;
            l
        })
        .collect();
    let preds = classifiers.predict_all(&conv_refs)?;
    let mut after = [0.0; 3];
    for m in EvalAttribute::ALL {
        let t: Vec<usize> = target_truth.iter().map(|l| l[m.index()]).collect();
        after[m.index()] = accuracy(&preds[m.index()], &t);
    }
    let source: Vec<usize> = pairs.iter().map(|&(i, _)| truth[i][conv_attr]).collect();
    Ok(ConversionEval {
        row: AccuracyRow {
            strategy: Some(strategy),
            variant: variant.to_string(),
            converted: attribute,
            before,
            after: Some(after),
        },
        converted_vs_source: accuracy(&preds[conv_attr], &source),
        n_conversions: pairs.len(),
    })
}

/// A trained model to include in the report.
pub struct EvalModel<'a> {
    pub variant: &'a str,
    pub model: &'a Gmvae,
    pub store: &'a ParamStore<f32>,
}

/// Baseline rows, then every strategy the models support: C-chunk for all,
/// C-sequence only where both classification weights are non-zero.
pub fn full_report(models: &[EvalModel<'_>], classifiers: &Classifiers, test: &[ChunkedRecording]) -> Result<AccuracyReport> {
    let mut rows = Vec::new();
    for attr in Attribute::ALL {
        rows.push(baseline_row(classifiers, test, attr)?);
    }
    for strategy in Strategy::ALL {
        for m in models {
            if strategy == Strategy::CSequence && (m.model.cfg.beta == 0.0 || m.model.cfg.gamma == 0.0) {
                continue;
            }
            for attr in Attribute::ALL {
                rows.push(evaluate_conversion(m.model, m.store, m.variant, classifiers, test, strategy, attr)?.row);
            }
        }
    }
    Ok(AccuracyReport { rows })
}
