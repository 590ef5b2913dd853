use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::manifest::Manifest;
use crate::error::{Error, IoContext, Result};
use crate::image::Manipulation;

pub const UNALTERED_WEIGHT: f64 = 0.7;
pub const MANIPULATED_WEIGHT: f64 = 0.3;

/// 0.7 * unaltered accuracy + 0.3 * manipulated accuracy.
pub fn weighted_score(acc_unaltered: f64, acc_manipulated: f64) -> f64 {
    UNALTERED_WEIGHT * acc_unaltered + MANIPULATED_WEIGHT * acc_manipulated
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Matches `ManifestRow::key` of the truth row.
    pub key: String,
    pub class: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manipulation: Option<Manipulation>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub class_names: Vec<String>,
    pub acc_unaltered: f64,
    pub acc_manipulated: f64,
    pub weighted_score: f64,
    pub overall_accuracy: f64,
    pub n_unaltered: usize,
    pub n_manipulated: usize,
    /// `confusion[truth][predicted]`
    pub confusion: Vec<Vec<usize>>,
    /// Truth manipulation class vs predicted, when predictions carry one.
    pub manipulation_confusion: Option<Vec<Vec<usize>>>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ScoreReport {
    /// Empty report over the given class names.
    pub fn new(class_names: Vec<String>) -> Result<Self> {
        if class_names.is_empty() {
            return Err(Error::InvalidConfig(
                "score report needs at least one class".into(),
            ));
        }
        let n = class_names.len();
        Ok(ScoreReport {
            class_names,
            acc_unaltered: 0.0,
            acc_manipulated: 0.0,
            weighted_score: 0.0,
            overall_accuracy: 0.0,
            n_unaltered: 0,
            n_manipulated: 0,
            confusion: vec![vec![0; n]; n],
            manipulation_confusion: None,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Rows of `confusion` summed: how many truth samples per class.
    pub fn truth_counts(&self) -> Vec<usize> {
        self.confusion.iter().map(|r| r.iter().sum()).collect()
    }

    /// Columns of `confusion` summed: how many predictions per class.
    pub fn predicted_counts(&self) -> Vec<usize> {
        (0..self.num_classes())
            .map(|j| self.confusion.iter().map(|r| r[j]).sum())
            .collect()
    }

    pub fn confusion_csv(&self) -> String {
        let mut s = String::from("truth\\predicted");
        for n in &self.class_names {
            let _ = write!(s, ",{n}");
        }
        s.push('\n');
        for (name, row) in self.class_names.iter().zip(&self.confusion) {
            s.push_str(name);
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "Unaltered accuracy   {:>8.2}%  ({} images)",
            100.0 * self.acc_unaltered,
            self.n_unaltered
        );
        let _ = writeln!(
            s,
            "Manipulated accuracy {:>8.2}%  ({} images)",
            100.0 * self.acc_manipulated,
            self.n_manipulated
        );
        let _ = writeln!(
            s,
            "Weighted score       {:>8.2}%",
            100.0 * self.weighted_score
        );
        let _ = writeln!(
            s,
            "Overall accuracy     {:>8.2}%",
            100.0 * self.overall_accuracy
        );
        let _ = writeln!(s);
        let _ = writeln!(s, "Per-class accuracy");
        for (i, name) in self.class_names.iter().enumerate() {
            let total: usize = self.confusion[i].iter().sum();
            let _ = writeln!(
                s,
                "  {name:<20} {:>8.2}%  ({}/{})",
                100.0 * ratio(self.confusion[i][i], total),
                self.confusion[i][i],
                total
            );
        }
        if let Some(m) = &self.manipulation_confusion {
            let _ = writeln!(s);
            let _ = writeln!(s, "Manipulation confusion (rows truth, columns predicted)");
            let _ = writeln!(
                s,
                "  {:<12}{}",
                "",
                Manipulation::CLASS_NAMES
                    .map(|n| format!("{n:>12}"))
                    .join("")
            );
            for (name, row) in Manipulation::CLASS_NAMES.iter().zip(m) {
                let cells: String = row.iter().map(|v| format!("{v:>12}")).collect();
                let _ = writeln!(s, "  {name:<12}{cells}");
            }
        }
        s
    }
}

/// Scores per-image predictions against a truth manifest.
pub fn score(
    predictions: &[Prediction],
    truth: &Manifest,
    class_names: Vec<String>,
) -> Result<ScoreReport> {
    let mut report = ScoreReport::new(class_names)?;
    let n = report.num_classes();
    let by_key: HashMap<&str, &Prediction> =
        predictions.iter().map(|p| (p.key.as_str(), p)).collect();
    let with_manip = predictions.iter().any(|p| p.manipulation.is_some());
    let mut mconf = vec![vec![0usize; 4]; 4];
    let (mut cu, mut cm, mut correct) = (0, 0, 0);
    for row in &truth.rows {
        let key = row.key();
        let p = by_key
            .get(key.as_str())
            .ok_or(Error::MissingPrediction(key.clone()))?;
        if row.label >= n || p.class >= n {
            return Err(Error::InvalidSpec(format!(
                "{key}: class {} / {} outside {n} classes",
                row.label, p.class
            )));
        }
        report.confusion[row.label][p.class] += 1;
        let ok = row.label == p.class;
        correct += ok as usize;
        if row.manipulation.is_manipulated() {
            report.n_manipulated += 1;
            cm += ok as usize;
        } else {
            report.n_unaltered += 1;
            cu += ok as usize;
        }
        if let (Some(t), Some(pm)) = (
            row.manipulation.manipulation_class(),
            p.manipulation.and_then(|m| m.manipulation_class()),
        ) {
            mconf[t][pm] += 1;
        }
    }
    report.acc_unaltered = ratio(cu, report.n_unaltered);
    report.acc_manipulated = ratio(cm, report.n_manipulated);
    report.weighted_score = weighted_score(report.acc_unaltered, report.acc_manipulated);
    report.overall_accuracy = ratio(correct, truth.len());
    report.manipulation_confusion = with_manip.then_some(mconf);
    Ok(report)
}

/// Writes `confusion.csv`, `summary.txt` and `report.json` into `dir`.
pub fn report(score: &ScoreReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).at(dir)?;
    let csv = dir.join("confusion.csv");
    std::fs::write(&csv, score.confusion_csv()).at(&csv)?;
    let txt = dir.join("summary.txt");
    std::fs::write(&txt, score.summary()).at(&txt)?;
    let json = dir.join("report.json");
    std::fs::write(&json, serde_json::to_string_pretty(score)?).at(&json)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        assert_eq!(weighted_score(1.0, 0.0), 0.7);
        assert_eq!(weighted_score(1.0, 1.0), 1.0);
        assert_eq!(weighted_score(0.0, 1.0), 0.3);
    }

    #[test]
    fn empty_class_set_rejected() {
        assert!(ScoreReport::new(Vec::new()).is_err());
    }
}
