use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{image_tensor, ClassifierError, ClassifierModel, Sample, HOTSPOT};
use crate::imagery::{ImageRecord, Label};
use crate::scalar::Scalar;

/// Binary classification metrics with hotspot as the positive class.
///
/// Ratios with a zero denominator are reported as 0 rather than NaN.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Indexed `[actual][predicted]`, 0 = non-hotspot, 1 = hotspot.
    pub confusion: [[u64; 2]; 2],
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl EvalMetrics {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision > 0.0 && recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            accuracy: ratio(tp + tn, tp + fp + fn_ + tn),
            precision,
            recall,
            f1,
            confusion: [[tn, fp], [fn_, tp]],
        }
    }

    /// Builds metrics from `(actual_hotspot, predicted_hotspot)` pairs.
    pub fn from_predictions(pairs: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        for (actual, predicted) in pairs {
            match (actual, predicted) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        Self::from_counts(tp, fp, fn_, tn)
    }

    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }

    pub fn true_positives(&self) -> u64 {
        self.confusion[1][1]
    }

    pub fn false_positives(&self) -> u64 {
        self.confusion[0][1]
    }

    pub fn false_negatives(&self) -> u64 {
        self.confusion[1][0]
    }

    pub fn true_negatives(&self) -> u64 {
        self.confusion[0][0]
    }

    pub fn to_csv(&self) -> String {
        format!(
            "accuracy,precision,recall,f1,tp,fp,fn,tn\n{},{},{},{},{},{},{},{}\n",
            self.accuracy,
            self.precision,
            self.recall,
            self.f1,
            self.true_positives(),
            self.false_positives(),
            self.false_negatives(),
            self.true_negatives()
        )
    }
}

/// Predicts hotspot when `p(hotspot) >= 0.5`.
pub fn evaluate_samples<T: Scalar>(
    model: &ClassifierModel<T>,
    samples: &[Sample<T>],
) -> Result<EvalMetrics, ClassifierError> {
    if samples.is_empty() {
        return Err(ClassifierError::EmptyTestSplit);
    }
    let pairs = samples.iter().map(|s| {
        let p = model.probabilities(&s.input)[0][HOTSPOT];
        (s.hotspot, p >= T::cast(0.5))
    });
    Ok(EvalMetrics::from_predictions(pairs.collect::<Vec<_>>()))
}

/// Evaluates labelled records whose files live under `root`.
pub fn evaluate<T: Scalar>(
    model: &ClassifierModel<T>,
    test_split: &[&ImageRecord],
    root: &Path,
) -> Result<EvalMetrics, ClassifierError> {
    let size = model.spec().input_size;
    let mut samples = Vec::with_capacity(test_split.len());
    for record in test_split {
        let hotspot = match record.label {
            Label::Hotspot => true,
            Label::NonHotspot => false,
            Label::Unlabeled => continue,
        };
        let bytes = std::fs::read(root.join(&record.file_path))?;
        let img = image::load_from_memory(&bytes)
            .map_err(|e| ClassifierError::UndecodableImage(format!("{}: {e}", record.file_path)))?;
        samples.push(Sample {
            input: image_tensor(&img.to_rgb8(), size),
            hotspot,
        });
    }
    evaluate_samples(model, &samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_confusion_matrix() {
        let m = EvalMetrics::from_counts(3, 1, 1, 5);
        assert_eq!(m.precision, 0.75);
        assert_eq!(m.recall, 0.75);
        assert_eq!(m.f1, 0.75);
        assert_eq!(m.accuracy, 0.8);
        assert_eq!(m.total(), 10);
    }

    #[test]
    fn perfect_predictions() {
        let m = EvalMetrics::from_predictions([(true, true), (false, false), (true, true)]);
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn zero_denominators_yield_zero() {
        let m = EvalMetrics::from_counts(0, 0, 0, 4);
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
        assert_eq!(m.accuracy, 1.0);
    }

    proptest! {
        #[test]
        fn f1_is_harmonic_mean(tp in 0u64..500, fp in 0u64..500, fn_ in 0u64..500, tn in 0u64..500) {
            let m = EvalMetrics::from_counts(tp, fp, fn_, tn);
            prop_assert_eq!(m.total(), tp + fp + fn_ + tn);
            if m.precision > 0.0 && m.recall > 0.0 {
                let h = 2.0 * m.precision * m.recall / (m.precision + m.recall);
                prop_assert!((m.f1 - h).abs() < 1e-12);
            }
            for v in [m.accuracy, m.precision, m.recall, m.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
