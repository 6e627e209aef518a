//! Top-1 metrics for zero/few-shot and generalized evaluation.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_weights_with, attribute_features, attribute_scores_with, ModelParams};
use crate::dataio::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Setting {
    /// Novel test images, novel candidate classes, no margin (n→n).
    NovelOnly,
    /// All test images against all classes with calibrated stacking (a→s, a→n, H).
    Generalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EvalOptions {
    pub margin: f64,
    /// Mean of per-class accuracies (true) or plain sample accuracy (false).
    pub per_class: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            margin: 1.0,
            per_class: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Metrics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc_novel_only: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc_seen: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc_novel: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub harmonic_mean: Option<f64>,
    pub per_class_accuracies: BTreeMap<usize, f64>,
}

impl Metrics {
    pub fn merge(mut self, other: Metrics) -> Metrics {
        self.acc_novel_only = self.acc_novel_only.or(other.acc_novel_only);
        self.acc_seen = self.acc_seen.or(other.acc_seen);
        self.acc_novel = self.acc_novel.or(other.acc_novel);
        self.harmonic_mean = self.harmonic_mean.or(other.harmonic_mean);
        for (c, a) in other.per_class_accuracies {
            self.per_class_accuracies.entry(c).or_insert(a);
        }
        self
    }
}

fn per_class_table(predictions: &[usize], labels: &[usize]) -> BTreeMap<usize, f64> {
    let mut counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (&p, &y) in predictions.iter().zip(labels) {
        let entry = counts.entry(y).or_default();
        entry.0 += usize::from(p == y);
        entry.1 += 1;
    }
    counts
        .into_iter()
        .map(|(c, (hit, total))| (c, hit as f64 / total as f64))
        .collect()
}

pub fn top1_accuracy(predictions: &[usize], labels: &[usize], per_class: bool) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::shape("top1_accuracy", labels.len(), predictions.len()));
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput);
    }
    if per_class {
        let table = per_class_table(predictions, labels);
        Ok(table.values().sum::<f64>() / table.len() as f64)
    } else {
        let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
        Ok(hits as f64 / labels.len() as f64)
    }
}

pub fn harmonic_mean(seen: f64, novel: f64) -> f64 {
    if seen + novel > 0.0 {
        2.0 * seen * novel / (seen + novel)
    } else {
        0.0
    }
}

/// Adds `margin` to novel-class scores and subtracts it from seen-class scores.
pub fn calibrated_scores(raw: &Array1<f64>, seen_mask: &[bool], margin: f64) -> Array1<f64> {
    debug_assert_eq!(raw.len(), seen_mask.len());
    raw.iter()
        .zip(seen_mask)
        .map(|(&s, &seen)| if seen { s - margin } else { s + margin })
        .collect()
}

fn argmax(v: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Attribute scores (samples × A) of the given samples under `params`.
pub fn attribute_score_table(dataset: &Dataset, params: &ModelParams, indices: &[usize]) -> Result<Array2<f64>> {
    let att = params.attention_kernel();
    let emb = params.score_kernel();
    let rows: Vec<Array1<f64>> = indices
        .par_iter()
        .map(|&i| {
            let f = dataset.samples[i].regions.view();
            let w = attention_weights_with(f, att.view())?;
            attribute_scores_with(&attribute_features(f, w.view())?, emb.view())
        })
        .collect::<Result<_>>()?;
    let mut out = Array2::zeros((indices.len(), params.num_attributes()));
    for (mut dst, src) in out.rows_mut().into_iter().zip(rows) {
        dst.assign(&src);
    }
    Ok(out)
}

/// Top-1 class predictions among `candidates`, optionally with calibrated stacking.
pub fn predict(
    dataset: &Dataset,
    params: &ModelParams,
    indices: &[usize],
    candidates: &[usize],
    margin: Option<f64>,
) -> Result<Vec<usize>> {
    let scores = attribute_score_table(dataset, params, indices)?;
    let z = &dataset.class_sem;
    let seen_mask: Vec<bool> = candidates.iter().map(|&c| dataset.is_seen(c)).collect();
    Ok(scores
        .rows()
        .into_iter()
        .map(|e| {
            let raw: Array1<f64> = candidates.iter().map(|&c| e.dot(&z.row(c))).collect();
            let s = match margin {
                Some(m) => calibrated_scores(&raw, &seen_mask, m),
                None => raw,
            };
            candidates[argmax(&s)]
        })
        .collect())
}

pub fn evaluate(dataset: &Dataset, params: &ModelParams, setting: Setting, opts: &EvalOptions) -> Result<Metrics> {
    if dataset.splits.test.is_empty() {
        return Err(Error::Precondition("test split is empty".into()));
    }
    let labels_of = |idx: &[usize]| idx.iter().map(|&i| dataset.samples[i].class).collect::<Vec<_>>();
    let novel_test: Vec<usize> = dataset
        .splits
        .test
        .iter()
        .copied()
        .filter(|&i| !dataset.is_seen(dataset.samples[i].class))
        .collect();
    match setting {
        Setting::NovelOnly => {
            if novel_test.is_empty() {
                return Err(Error::Precondition("no novel-class test samples".into()));
            }
            let mut novel = dataset.novel_classes.clone();
            novel.sort_unstable();
            let pred = predict(dataset, params, &novel_test, &novel, None)?;
            let labels = labels_of(&novel_test);
            Ok(Metrics {
                acc_novel_only: Some(top1_accuracy(&pred, &labels, opts.per_class)?),
                per_class_accuracies: per_class_table(&pred, &labels),
                ..Default::default()
            })
        }
        Setting::Generalized => {
            let all = dataset.all_classes();
            let pred = predict(dataset, params, &dataset.splits.test, &all, Some(opts.margin))?;
            let labels = labels_of(&dataset.splits.test);
            let split = |want_seen: bool| -> Result<Option<f64>> {
                let (p, y): (Vec<usize>, Vec<usize>) = pred
                    .iter()
                    .zip(&labels)
                    .filter(|(_, &y)| dataset.is_seen(y) == want_seen)
                    .map(|(&p, &y)| (p, y))
                    .unzip();
                if y.is_empty() {
                    Ok(None)
                } else {
                    top1_accuracy(&p, &y, opts.per_class).map(Some)
                }
            };
            let acc_seen = split(true)?;
            let acc_novel = split(false)?;
            let h = harmonic_mean(acc_seen.unwrap_or(0.0), acc_novel.unwrap_or(0.0));
            Ok(Metrics {
                acc_novel_only: None,
                acc_seen,
                acc_novel,
                harmonic_mean: Some(h),
                per_class_accuracies: per_class_table(&pred, &labels),
            })
        }
    }
}

/// Both settings in one report.
pub fn evaluate_all(dataset: &Dataset, params: &ModelParams, opts: &EvalOptions) -> Result<Metrics> {
    let generalized = evaluate(dataset, params, Setting::Generalized, opts)?;
    let novel = evaluate(dataset, params, Setting::NovelOnly, opts)?;
    Ok(Metrics {
        per_class_accuracies: generalized.per_class_accuracies.clone(),
        ..novel
    }
    .merge(generalized))
}

/// Flat CSV rendering: `metric,value` rows followed by `class_<id>` rows.
pub fn metrics_csv(m: &Metrics) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let row = |w: &mut csv::Writer<Vec<u8>>, k: &str, v: f64| w.write_record([k, &v.to_string()]);
    let io = |e: csv::Error| Error::Precondition(format!("csv: {e}"));
    w.write_record(["metric", "value"]).map_err(io)?;
    for (k, v) in [
        ("acc_novel_only", m.acc_novel_only),
        ("acc_seen", m.acc_seen),
        ("acc_novel", m.acc_novel),
        ("harmonic_mean", m.harmonic_mean),
    ] {
        if let Some(v) = v {
            row(&mut w, k, v).map_err(io)?;
        }
    }
    for (c, v) in &m.per_class_accuracies {
        row(&mut w, &format!("class_{c}"), *v).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Precondition(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn accuracy_examples() {
        assert_eq!(top1_accuracy(&[1, 2, 3], &[1, 2, 3], true).unwrap(), 1.0);
        // Class 0 has 3 samples all right, class 1 has 1 sample wrong.
        let pred = [0, 0, 0, 0];
        let labels = [0, 0, 0, 1];
        assert_eq!(top1_accuracy(&pred, &labels, true).unwrap(), 0.5);
        assert_eq!(top1_accuracy(&pred, &labels, false).unwrap(), 0.75);
        assert!(top1_accuracy(&[], &[], true).is_err());
        assert!(top1_accuracy(&[1], &[1, 2], true).is_err());
    }

    #[test]
    fn accuracy_hand_counted_confusion() {
        // Confusion rows (truth) × cols (pred): class 0: [2,1,0], class 1: [0,3,1], class 2: [1,1,2]
        let labels = [0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2];
        let pred = [0, 0, 1, 1, 1, 1, 2, 0, 1, 2, 2];
        let macro_acc = (2.0 / 3.0 + 3.0 / 4.0 + 2.0 / 4.0) / 3.0;
        assert!((top1_accuracy(&pred, &labels, true).unwrap() - macro_acc).abs() < 1e-15);
        assert!((top1_accuracy(&pred, &labels, false).unwrap() - 7.0 / 11.0).abs() < 1e-15);
    }

    #[test]
    fn harmonic_mean_examples() {
        assert!((harmonic_mean(0.773, 0.621) - 0.960066 / 1.394).abs() < 1e-12);
        assert!((harmonic_mean(0.564, 0.638) - 0.719664 / 1.202).abs() < 1e-12);
        assert!((harmonic_mean(0.4, 0.4) - 0.4).abs() < 1e-15);
        assert_eq!(harmonic_mean(0.0, 0.5), 0.0);
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
    }

    #[test]
    fn calibration_margin_semantics() {
        let raw = array![3.0, 2.0];
        assert_eq!(calibrated_scores(&raw, &[true, false], 0.0), raw);
        let cal = calibrated_scores(&raw, &[true, false], 1.0);
        assert_eq!(cal, array![2.0, 3.0]);
        assert_eq!(argmax(&raw), 0);
        assert_eq!(argmax(&cal), 1);
    }

    proptest! {
        #[test]
        fn harmonic_mean_bounds(s in 0.0f64..=1.0, n in 0.0f64..=1.0) {
            let h = harmonic_mean(s, n);
            prop_assert!(h <= 2.0 * s.min(n) + 1e-15);
            prop_assert!(h <= s.max(n) + 1e-15);
            prop_assert!((0.0..=1.0).contains(&h));
        }

        #[test]
        fn margin_only_changes_cross_group_decisions(
            scores in prop::collection::vec(-5.0f64..5.0, 2..8),
            mask_bits in any::<u8>(),
            margin in 0.0f64..3.0,
            shift in -10.0f64..10.0,
        ) {
            let raw = Array1::from(scores);
            let mask: Vec<bool> = (0..raw.len()).map(|i| mask_bits >> (i % 8) & 1 == 1).collect();
            let cal = calibrated_scores(&raw, &mask, margin);
            // Within one group, the order is unchanged.
            for group in [true, false] {
                let idx: Vec<usize> = (0..raw.len()).filter(|&i| mask[i] == group).collect();
                if idx.is_empty() { continue; }
                let best = |v: &Array1<f64>| idx.iter().copied().fold(idx[0], |b, i| if v[i] > v[b] { i } else { b });
                prop_assert_eq!(best(&raw), best(&cal));
            }
            // A constant shift of every score never changes the decision.
            let shifted = calibrated_scores(&raw.mapv(|x| x + shift), &mask, margin);
            prop_assert_eq!(argmax(&cal), argmax(&shifted));
        }
    }
}
