use std::fmt::Write as _;

use crate::conversion::Strategy;
use crate::error::{Error, Result};
use crate::gmvae::Attribute;

use super::EvalAttribute;

pub const CSV_HEADER: &str = "strategy,variant,converted,metric,before,after";

/// Accuracies (percent) of the three attribute classifiers for one
/// (strategy, model, converted attribute) combination.
#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyRow {
    /// `None` for the unconverted baseline, which has no `after` values.
    pub strategy: Option<Strategy>,
    pub variant: String,
    pub converted: Attribute,
    /// Indexed by [`EvalAttribute::index`].
    pub before: [f64; 3],
    pub after: Option<[f64; 3]>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AccuracyReport {
    pub rows: Vec<AccuracyRow>,
}

fn strategy_label(s: Option<Strategy>) -> String {
    s.map_or_else(|| "none".to_string(), |s| s.to_string())
}

impl AccuracyReport {
    /// One line per (row, metric).
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            for m in EvalAttribute::ALL {
                let after = r.after.map_or_else(|| "NA".to_string(), |a| a[m.index()].to_string());
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    strategy_label(r.strategy),
                    r.variant,
                    r.converted.name(),
                    m.name(),
                    r.before[m.index()],
                    after
                );
            }
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |d: String| Error::InvalidInput(format!("report CSV: {d}"));
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(bad("missing header".into()));
        }
        let body: Vec<&str> = lines.filter(|l| !l.is_empty()).collect();
        if !body.len().is_multiple_of(3) {
            return Err(bad("each row needs three metric lines".into()));
        }
        let mut rows = Vec::new();
        for group in body.chunks(3) {
            let mut before = [0.0; 3];
            let mut after = [0.0; 3];
            let mut has_after = None;
            let mut key = None;
            for (m, line) in EvalAttribute::ALL.iter().zip(group) {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 6 {
                    return Err(bad(format!("malformed line `{line}`")));
                }
                if f[3] != m.name() {
                    return Err(bad(format!("expected metric `{}`, got `{}`", m.name(), f[3])));
                }
                let k = (f[0], f[1], f[2]);
                if *key.get_or_insert(k) != k {
                    return Err(bad(format!("metric lines of one row disagree at `{line}`")));
                }
                before[m.index()] = f[4].parse().map_err(|_| bad(format!("bad number `{}`", f[4])))?;
                let na = f[5] == "NA";
                if *has_after.get_or_insert(!na) == na {
                    return Err(bad("mixed NA and numeric after values".into()));
                }
                if !na {
                    after[m.index()] = f[5].parse().map_err(|_| bad(format!("bad number `{}`", f[5])))?;
                }
            }
            let (s, v, c) = key.expect("three lines");
            rows.push(AccuracyRow {
                strategy: if s == "none" { None } else { Some(s.parse()?) },
                variant: v.to_string(),
                converted: c.parse()?,
                before,
                after: has_after.unwrap_or(false).then_some(after),
            });
        }
        Ok(Self { rows })
    }

    /// Fixed-width table: one line per (strategy, model), singer-conversion
    /// effects on the left, technique-conversion effects on the right, the
    /// converted attribute marked with `*`.
    pub fn to_text(&self) -> String {
        const W: usize = 7;
        let mut keys: Vec<(Option<Strategy>, &str)> = Vec::new();
        for r in &self.rows {
            let k = (r.strategy, r.variant.as_str());
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        let half = |conv: Attribute| {
            let mut head = String::new();
            for m in EvalAttribute::ALL {
                let star = if m.converted_by(conv) { "*" } else { "" };
                let name = format!("{star}{}", m.title());
                let _ = write!(head, "{name:<width$}", width = 2 * W);
            }
            head
        };
        let sub = "Before After  ".repeat(3);
        let eff_w = 6 * W;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<11}{:<6}| {:<eff_w$}| Effect of Technique Conversion",
            "Strategy", "Model", "Effect of Singer Conversion"
        );
        let _ = writeln!(out, "{:<17}| {}| {}", "", half(Attribute::Singer), half(Attribute::Technique).trim_end());
        let _ = writeln!(out, "{:<17}| {sub}| {}", "", sub.trim_end());
        let _ = writeln!(out, "{}", "-".repeat(17 + 2 * (eff_w + 2)));
        for (s, v) in keys {
            let strategy = match s {
                None => "-".to_string(),
                Some(Strategy::CChunk) => "C-chunk".to_string(),
                Some(Strategy::CSequence) => "C-sequence".to_string(),
            };
            let mut line = format!("{strategy:<11}{v:<6}");
            for conv in Attribute::ALL {
                line.push_str("| ");
                let row = self
                    .rows
                    .iter()
                    .find(|r| r.strategy == s && r.variant == v && r.converted == conv);
                for m in EvalAttribute::ALL {
                    let (b, a) = match row {
                        Some(r) => (
                            format!("{:.2}", r.before[m.index()]),
                            r.after.map_or_else(|| "NA".to_string(), |a| format!("{:.2}", a[m.index()])),
                        ),
                        None => ("-".to_string(), "-".to_string()),
                    };
                    let _ = write!(line, "{b:<W$}{a:<W$}");
                }
            }
            out.push_str(line.trim_end());
            out.push('\n');
        }
        out
    }
}
