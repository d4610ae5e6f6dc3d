//! Calibration and uncertainty metrics: confidence binning, ECE,
//! micro-averaged ECE, predictive entropy, NLL, and post-hoc temperature
//! scaling.
//!
//! Bin edges are half-open on the left and closed on the right; confidence
//! 0 lands in bin 1 and confidence 1 in bin M.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{softmax_row_in_place, Tensor, CLAMP_DELTA};

/// The resolution grid for perturbation levels.
pub const LEVEL_GRID: [u32; 10] = [0, 10, 20, 30, 40, 50, 60, 70, 80, 90];

/// One sample's full prediction: probability vector, argmax class, ground
/// truth, and the perturbation it was produced under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub probs: Vec<f64>,
    pub predicted: usize,
    pub label: usize,
    pub perturbation: String,
    pub level: u32,
}

impl PredictionRecord {
    pub fn new(
        probs: Vec<f64>,
        label: usize,
        perturbation: impl Into<String>,
        level: u32,
    ) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Contract("empty probability vector".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        if label >= probs.len() {
            return Err(Error::Contract(format!(
                "label {label} out of range for {} classes",
                probs.len()
            )));
        }
        if !LEVEL_GRID.contains(&level) {
            return Err(Error::Contract(format!(
                "level {level} not on the 0..90 step-10 grid"
            )));
        }
        let predicted = argmax(&probs);
        Ok(Self {
            probs,
            predicted,
            label,
            perturbation: perturbation.into(),
            level,
        })
    }

    /// Confidence of the predicted class (maximum probability).
    pub fn confidence(&self) -> f64 {
        self.probs[self.predicted]
    }

    pub fn correct(&self) -> bool {
        self.predicted == self.label
    }
}

/// First-maximum argmax, matching the tape's max-reduce tie rule.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// 1-based bin index of a confidence under M equally spaced bins over
/// [0, 1]: `ceil(c * M)` with confidence 0 assigned to bin 1.
pub fn confidence_bin(confidence: f64, num_bins: usize) -> usize {
    let m = (confidence * num_bins as f64).ceil() as usize;
    m.clamp(1, num_bins)
}

/// Aggregate statistics of one confidence bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStatistics {
    /// 1-based bin index; the bin covers `((index-1)/M, index/M]`.
    pub index: usize,
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Mean confidence of members; absent for empty bins.
    pub avg_confidence: Option<f64>,
    /// Fraction of correct members; absent for empty bins.
    pub avg_accuracy: Option<f64>,
}

/// Partition records into M equally spaced confidence bins.
pub fn bin_predictions(
    records: &[PredictionRecord],
    num_bins: usize,
) -> Result<Vec<BinStatistics>> {
    if records.is_empty() {
        return Err(Error::Contract("bin_predictions on empty record list".into()));
    }
    if num_bins < 1 {
        return Err(Error::Contract("num_bins must be >= 1".into()));
    }
    let mut count = vec![0usize; num_bins];
    let mut conf_sum = vec![0.0; num_bins];
    let mut correct = vec![0usize; num_bins];
    for r in records {
        let m = confidence_bin(r.confidence(), num_bins) - 1;
        count[m] += 1;
        conf_sum[m] += r.confidence();
        correct[m] += r.correct() as usize;
    }
    Ok((0..num_bins)
        .map(|m| BinStatistics {
            index: m + 1,
            lower: m as f64 / num_bins as f64,
            upper: (m + 1) as f64 / num_bins as f64,
            count: count[m],
            avg_confidence: (count[m] > 0).then(|| conf_sum[m] / count[m] as f64),
            avg_accuracy: (count[m] > 0).then(|| correct[m] as f64 / count[m] as f64),
        })
        .collect())
}

/// Expected calibration error: bin-weighted average of |accuracy −
/// confidence|. Empty bins carry zero weight.
pub fn ece(records: &[PredictionRecord], num_bins: usize) -> Result<f64> {
    let bins = bin_predictions(records, num_bins)?;
    let n = records.len() as f64;
    Ok(bins
        .iter()
        .filter(|b| b.count > 0)
        .map(|b| {
            let acc = b.avg_accuracy.unwrap();
            let conf = b.avg_confidence.unwrap();
            (b.count as f64 / n) * (acc - conf).abs()
        })
        .sum())
}

/// ECE over the pooled predictions of all levels of one perturbation
/// strategy. Mixing perturbation tags is a caller error.
pub fn micro_averaged_ece(records: &[PredictionRecord], num_bins: usize) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Contract("micro_averaged_ece on empty record list".into()));
    }
    let tag = &records[0].perturbation;
    if let Some(other) = records.iter().find(|r| &r.perturbation != tag) {
        return Err(Error::Contract(format!(
            "micro_averaged_ece requires a single perturbation tag, found '{}' and '{}'",
            tag, other.perturbation
        )));
    }
    ece(records, num_bins)
}

/// Shannon entropy of a probability vector in nats, with 0·ln 0 = 0.
pub fn predictive_entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// Mean negative log-likelihood of the true labels, clamped at delta.
pub fn nll(records: &[PredictionRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Contract("nll on empty record list".into()));
    }
    let total: f64 = records
        .iter()
        .map(|r| -r.probs[r.label].max(CLAMP_DELTA).ln())
        .sum();
    Ok(total / records.len() as f64)
}

/// Post-hoc recalibration by a single positive temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureScaler {
    pub temperature: f64,
}

impl TemperatureScaler {
    pub fn new(temperature: f64) -> Result<Self> {
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::TemperatureFit(format!(
                "temperature must be finite and positive, got {temperature}"
            )));
        }
        Ok(Self { temperature })
    }
}

/// Mean NLL of softmax(logits / t), computed with log-sum-exp stability.
fn nll_at_temperature(logits: &Tensor, labels: &[usize], t: f64) -> f64 {
    let c = logits.shape()[1];
    let mut total = 0.0;
    for (row, &y) in logits.data().chunks(c).zip(labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / t;
        let lse = (row.iter().map(|&z| (z / t - m).exp()).sum::<f64>()).ln() + m;
        total += lse - row[y] / t;
    }
    total / labels.len() as f64
}

/// Fit the temperature minimizing validation NLL, by golden-section search
/// on [0.05, 20].
pub fn fit_temperature(logits: &Tensor, labels: &[usize]) -> Result<TemperatureScaler> {
    if logits.shape().len() != 2 {
        return Err(Error::Dimension {
            op: "fit_temperature",
            lhs: logits.shape().to_vec(),
            rhs: vec![],
        });
    }
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(Error::Contract(format!(
            "{n} logit rows but {} labels",
            labels.len()
        )));
    }
    if n < c {
        return Err(Error::TemperatureFit(format!(
            "need at least {c} samples to fit {c}-class temperature, got {n}"
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Contract(format!("label {bad} out of range")));
    }
    let first = labels[0];
    if labels.iter().all(|&y| y == first) {
        return Err(Error::TemperatureFit(
            "labels contain a single class; temperature is unidentifiable".into(),
        ));
    }

    let (mut lo, mut hi) = (0.05f64, 20.0f64);
    let phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let mut c1 = hi - phi * (hi - lo);
    let mut c2 = lo + phi * (hi - lo);
    let mut f1 = nll_at_temperature(logits, labels, c1);
    let mut f2 = nll_at_temperature(logits, labels, c2);
    for _ in 0..80 {
        if f1 < f2 {
            hi = c2;
            c2 = c1;
            f2 = f1;
            c1 = hi - phi * (hi - lo);
            f1 = nll_at_temperature(logits, labels, c1);
        } else {
            lo = c1;
            c1 = c2;
            f1 = f2;
            c2 = lo + phi * (hi - lo);
            f2 = nll_at_temperature(logits, labels, c2);
        }
    }
    TemperatureScaler::new((lo + hi) / 2.0)
}

/// softmax(logits / T) row-wise.
pub fn apply_temperature(scaler: &TemperatureScaler, logits: &Tensor) -> Result<Tensor> {
    if logits.shape().len() != 2 {
        return Err(Error::Dimension {
            op: "apply_temperature",
            lhs: logits.shape().to_vec(),
            rhs: vec![],
        });
    }
    let c = logits.shape()[1];
    let mut data: Vec<f64> = logits.data().iter().map(|z| z / scaler.temperature).collect();
    for row in data.chunks_mut(c) {
        softmax_row_in_place(row);
    }
    Tensor::new(logits.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(probs: &[f64], label: usize) -> PredictionRecord {
        PredictionRecord::new(probs.to_vec(), label, "test", 0).unwrap()
    }

    #[test]
    fn record_validates_inputs() {
        assert!(PredictionRecord::new(vec![0.6, 0.3], 0, "t", 0).is_err()); // sum != 1
        assert!(PredictionRecord::new(vec![0.5, 0.5], 2, "t", 0).is_err()); // label range
        assert!(PredictionRecord::new(vec![0.5, 0.5], 0, "t", 15).is_err()); // off-grid level
        let r = rec(&[0.2, 0.7, 0.1], 1);
        assert_eq!(r.predicted, 1);
        assert!((r.confidence() - 0.7).abs() < 1e-15);
        assert!(r.correct());
    }

    #[test]
    fn bin_indexing_convention() {
        assert_eq!(confidence_bin(0.0, 10), 1);
        assert_eq!(confidence_bin(0.05, 10), 1);
        assert_eq!(confidence_bin(0.1, 10), 1);
        assert_eq!(confidence_bin(0.1000001, 10), 2);
        assert_eq!(confidence_bin(1.0, 10), 10);
        assert_eq!(confidence_bin(0.5, 1), 1);
    }

    #[test]
    fn all_max_confidence_lands_in_last_bin() {
        let records: Vec<_> = (0..4).map(|i| rec(&[1.0, 0.0], i % 2)).collect();
        let bins = bin_predictions(&records, 10).unwrap();
        assert_eq!(bins[9].count, 4);
        assert!(bins[..9].iter().all(|b| b.count == 0));
        assert!(bins[0].avg_confidence.is_none());
    }

    #[test]
    fn single_bin_degenerates_to_overall_accuracy() {
        let records = vec![
            rec(&[0.9, 0.1], 0),
            rec(&[0.4, 0.6], 0),
            rec(&[0.2, 0.8], 1),
        ];
        let bins = bin_predictions(&records, 1).unwrap();
        assert_eq!(bins.len(), 1);
        assert_eq!(bins[0].count, 3);
        let acc = bins[0].avg_accuracy.unwrap();
        assert!((acc - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_records_are_a_contract_error() {
        assert!(bin_predictions(&[], 10).is_err());
        assert!(ece(&[], 10).is_err());
        assert!(nll(&[]).is_err());
    }

    #[test]
    fn ece_single_bin_arithmetic() {
        // 4 samples, all confidence 1.0, 2 correct -> ECE 0.5.
        let records = vec![
            rec(&[1.0, 0.0], 0),
            rec(&[1.0, 0.0], 0),
            rec(&[1.0, 0.0], 1),
            rec(&[1.0, 0.0], 1),
        ];
        let e = ece(&records, 10).unwrap();
        assert!((e - 0.5).abs() < 1e-12);
    }

    #[test]
    fn perfectly_calibrated_records_have_zero_ece() {
        let records = vec![
            rec(&[0.75, 0.25], 0),
            rec(&[0.75, 0.25], 0),
            rec(&[0.75, 0.25], 0),
            rec(&[0.75, 0.25], 1),
        ];
        let e = ece(&records, 10).unwrap();
        assert!(e.abs() < 1e-12);
    }

    #[test]
    fn micro_average_rejects_mixed_tags() {
        let a = PredictionRecord::new(vec![0.5, 0.5], 0, "rotation", 0).unwrap();
        let b = PredictionRecord::new(vec![0.5, 0.5], 0, "shear", 10).unwrap();
        assert!(micro_averaged_ece(&[a.clone(), b], 10).is_err());
        assert!(micro_averaged_ece(&[a.clone()], 10).is_ok());
    }

    #[test]
    fn micro_average_of_single_level_equals_plain_ece() {
        let records: Vec<_> = (0..6)
            .map(|i| PredictionRecord::new(vec![0.8, 0.2], i % 2, "rotation", 20).unwrap())
            .collect();
        assert_eq!(
            micro_averaged_ece(&records, 10).unwrap(),
            ece(&records, 10).unwrap()
        );
    }

    #[test]
    fn duplicated_levels_do_not_change_micro_ece() {
        let one: Vec<_> = (0..5)
            .map(|i| PredictionRecord::new(vec![0.6, 0.4], i % 2, "rotation", 0).unwrap())
            .collect();
        let mut two = one.clone();
        two.extend(one.iter().map(|r| {
            let mut r = r.clone();
            r.level = 10;
            r
        }));
        let e1 = micro_averaged_ece(&one, 10).unwrap();
        let e2 = micro_averaged_ece(&two, 10).unwrap();
        assert!((e1 - e2).abs() < 1e-12);
    }

    #[test]
    fn entropy_extremes() {
        assert_eq!(predictive_entropy(&[1.0, 0.0, 0.0]), 0.0);
        let u = vec![0.1; 10];
        assert!((predictive_entropy(&u) - 10f64.ln()).abs() < 1e-9);
        assert!(predictive_entropy(&[0.5, 0.3, 0.2]) < 3f64.ln());
    }

    #[test]
    fn nll_analytic_cases() {
        let perfect = vec![rec(&[1.0, 0.0], 0)];
        assert!(nll(&perfect).unwrap().abs() < 1e-9);
        let uniform: Vec<_> = (0..3).map(|i| rec(&vec![0.1; 10], i)).collect();
        assert!((nll(&uniform).unwrap() - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn temperature_identity_and_argmax_preservation() {
        let logits = Tensor::new(vec![2, 3], vec![2.0, 0.0, 1.0, -1.0, 3.0, 0.5]).unwrap();
        let t1 = TemperatureScaler::new(1.0).unwrap();
        let p = apply_temperature(&t1, &logits).unwrap();
        let direct = crate::nn::softmax_confidences(&logits).unwrap();
        for (a, b) in p.data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        for t in [0.07, 0.5, 2.0, 19.0] {
            let p = apply_temperature(&TemperatureScaler::new(t).unwrap(), &logits).unwrap();
            for (row_p, row_z) in p.data().chunks(3).zip(logits.data().chunks(3)) {
                assert_eq!(argmax(row_p), argmax(row_z));
            }
        }
    }

    #[test]
    fn temperature_two_on_simple_logits() {
        let logits = Tensor::new(vec![1, 2], vec![2.0, 0.0]).unwrap();
        let p = apply_temperature(&TemperatureScaler::new(2.0).unwrap(), &logits).unwrap();
        let want =
            crate::nn::softmax_confidences(&Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap())
                .unwrap();
        for (a, b) in p.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn huge_temperature_flattens_toward_uniform() {
        let logits = Tensor::new(vec![1, 5], vec![3.0, -1.0, 0.0, 2.0, 1.0]).unwrap();
        let p = apply_temperature(&TemperatureScaler::new(1e3).unwrap(), &logits).unwrap();
        let max = p.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(max <= 1.0 / 5.0 + 0.01);
    }

    #[test]
    fn fit_temperature_rejects_degenerate_labels() {
        let logits = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.5, 0.2, 0.3, 0.1]).unwrap();
        assert!(matches!(
            fit_temperature(&logits, &[0, 0, 0]),
            Err(Error::TemperatureFit(_))
        ));
        assert!(fit_temperature(&logits, &[0, 1]).is_err()); // length mismatch
    }

    #[test]
    fn ece_is_permutation_invariant() {
        let mut records: Vec<_> = (0..20)
            .map(|i| {
                let p = 0.3 + 0.03 * i as f64;
                rec(&[p, 1.0 - p], i % 2)
            })
            .collect();
        let e1 = ece(&records, 10).unwrap();
        records.reverse();
        let e2 = ece(&records, 10).unwrap();
        assert!((e1 - e2).abs() < 1e-12);
    }
}
