//! Pooling of ensemble votes into a 72-bin azimuth histogram.

use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::classification::{ClassGrid, Prediction, CLASS_WIDTH_DEG};
use crate::error::{Error, Result};

pub const BIN_COUNT: usize = 72;
pub const BIN_WIDTH_DEG: f64 = 5.0;
const BINS_PER_CLASS: usize = (CLASS_WIDTH_DEG / BIN_WIDTH_DEG) as usize;

pub fn bin_center_deg(bin: usize) -> f64 {
    BIN_WIDTH_DEG * bin as f64 + BIN_WIDTH_DEG / 2.0
}

pub fn bin_of(azimuth_deg: f64) -> usize {
    (azimuth_deg.rem_euclid(360.0) / BIN_WIDTH_DEG).floor() as usize % BIN_COUNT
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AzimuthHistogram {
    counts: Vec<u64>,
}

impl Default for AzimuthHistogram {
    fn default() -> Self {
        Self {
            counts: vec![0; BIN_COUNT],
        }
    }
}

impl AzimuthHistogram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_counts(counts: Vec<u64>) -> Result<Self> {
        if counts.len() != BIN_COUNT {
            return Err(Error::Argument(format!(
                "histogram needs {BIN_COUNT} bins, got {}",
                counts.len()
            )));
        }
        Ok(Self { counts })
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// One vote for each of the six bins inside the predicted class arc.
    pub fn add(&mut self, prediction: Prediction) {
        let first = prediction.class_index * BINS_PER_CLASS + prediction.set_index;
        for i in 0..BINS_PER_CLASS {
            self.counts[(first + i) % BIN_COUNT] += 1;
        }
    }

    pub fn add_all(&mut self, predictions: &[Prediction]) {
        for &p in predictions {
            self.add(p);
        }
    }

    pub fn estimate(&self) -> Result<AzimuthEstimate> {
        estimate_azimuth(self)
    }
}

impl AddAssign<&AzimuthHistogram> for AzimuthHistogram {
    fn add_assign(&mut self, other: &AzimuthHistogram) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

pub fn accumulate(mut hist: AzimuthHistogram, predictions: &[Prediction]) -> AzimuthHistogram {
    hist.add_all(predictions);
    hist
}

/// Arc of bins `[first, first + 6)` that a prediction covers.
pub fn arc_bins(prediction: Prediction) -> impl Iterator<Item = usize> {
    let grid = ClassGrid::new(prediction.set_index).expect("prediction carries a valid grid");
    let first = bin_of(grid.arc_start_deg(prediction.class_index));
    (0..BINS_PER_CLASS).map(move |i| (first + i) % BIN_COUNT)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AzimuthEstimate {
    pub azimuth_deg: f64,
    /// Share of all votes held by the two bins that were averaged.
    pub confidence: f64,
}

/// Circular mean of two angles in degrees; `None` when they are opposite.
pub fn circular_mean_deg(a: f64, b: f64) -> Option<f64> {
    let (sa, ca) = a.to_radians().sin_cos();
    let (sb, cb) = b.to_radians().sin_cos();
    let (s, c) = (sa + sb, ca + cb);
    if s.hypot(c) < 1e-9 {
        return None;
    }
    Some(normalize_deg(s.atan2(c).to_degrees()))
}

/// Wrap into [0, 360), snapping values that round up to 360.
pub fn normalize_deg(deg: f64) -> f64 {
    let mut d = deg.rem_euclid(360.0);
    if d >= 360.0 - 1e-9 {
        d = 0.0;
    }
    if d.abs() < 1e-9 {
        d = 0.0;
    }
    d
}

fn adjacent(a: usize, b: usize) -> bool {
    (a + 1) % BIN_COUNT == b || (b + 1) % BIN_COUNT == a
}

/// Choose the two bins to average. Ties prefer a circularly adjacent pair,
/// then the lowest bin index.
fn top_two(counts: &[u64]) -> (usize, usize) {
    let max = *counts.iter().max().expect("histogram has bins");
    let tied: Vec<usize> = (0..BIN_COUNT).filter(|&b| counts[b] == max).collect();
    if tied.len() >= 2 {
        for &b in &tied {
            let next = (b + 1) % BIN_COUNT;
            if counts[next] == max {
                return (b, next);
            }
        }
        return (tied[0], tied[1]);
    }
    let first = tied[0];
    let second_max = (0..BIN_COUNT)
        .filter(|&b| b != first)
        .map(|b| counts[b])
        .max()
        .expect("histogram has more than one bin");
    let runners: Vec<usize> = (0..BIN_COUNT)
        .filter(|&b| b != first && counts[b] == second_max)
        .collect();
    let second = runners
        .iter()
        .copied()
        .find(|&b| adjacent(first, b))
        .unwrap_or(runners[0]);
    (first, second)
}

/// Circular mean of the centres of the two most-voted bins.
pub fn estimate_azimuth(hist: &AzimuthHistogram) -> Result<AzimuthEstimate> {
    let total = hist.total();
    if total == 0 {
        return Err(Error::NoData("histogram holds no votes".into()));
    }
    let (a, b) = top_two(&hist.counts);
    let azimuth_deg = circular_mean_deg(bin_center_deg(a), bin_center_deg(b))
        .unwrap_or_else(|| bin_center_deg(a));
    Ok(AzimuthEstimate {
        azimuth_deg,
        confidence: (hist.counts[a] + hist.counts[b]) as f64 / total as f64,
    })
}

/// `estimate - truth` wrapped into (-180, 180].
pub fn signed_circular_error(estimate_deg: f64, truth_deg: f64) -> f64 {
    let d = (estimate_deg - truth_deg).rem_euclid(360.0);
    if d > 180.0 {
        d - 360.0
    } else {
        d
    }
}

pub fn mean_absolute_error(signed_errors: &[f64]) -> Option<f64> {
    if signed_errors.is_empty() {
        return None;
    }
    Some(signed_errors.iter().map(|e| e.abs()).sum::<f64>() / signed_errors.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(set_index: usize, class_index: usize) -> Prediction {
        Prediction {
            set_index,
            class_index,
        }
    }

    #[test]
    fn single_prediction_arc() {
        let h = accumulate(AzimuthHistogram::new(), &[p(0, 0)]);
        assert_eq!(&h.counts()[..6], &[1; 6]);
        assert!(h.counts()[6..].iter().all(|&c| c == 0));
        let h = accumulate(AzimuthHistogram::new(), &[p(5, 11)]);
        // arc [355, 385) wraps
        let hot: Vec<usize> = (0..72).filter(|&b| h.counts()[b] == 1).collect();
        assert_eq!(hot, vec![0, 1, 2, 3, 4, 71]);
        let arc: Vec<usize> = arc_bins(p(5, 11)).collect();
        assert_eq!(arc, vec![71, 0, 1, 2, 3, 4]);
    }

    #[test]
    fn estimate_examples() {
        let mut counts = vec![0; 72];
        counts[2] = 10;
        counts[3] = 9;
        let e = estimate_azimuth(&AzimuthHistogram::from_counts(counts).unwrap()).unwrap();
        assert!((e.azimuth_deg - 15.0).abs() < 1e-9);
        assert!((e.confidence - 1.0).abs() < 1e-12);

        let mut counts = vec![0; 72];
        counts[71] = 5;
        counts[0] = 5;
        let e = estimate_azimuth(&AzimuthHistogram::from_counts(counts).unwrap()).unwrap();
        assert_eq!(e.azimuth_deg, 0.0);

        let e = estimate_azimuth(&AzimuthHistogram::from_counts(vec![3; 72]).unwrap()).unwrap();
        assert!((e.azimuth_deg - 5.0).abs() < 1e-9);
    }

    #[test]
    fn runner_up_prefers_adjacent() {
        let mut counts = vec![0; 72];
        counts[10] = 9;
        counts[4] = 5;
        counts[11] = 5;
        let h = AzimuthHistogram::from_counts(counts).unwrap();
        assert!((h.estimate().unwrap().azimuth_deg - 55.0).abs() < 1e-9);
    }

    #[test]
    fn opposite_bins_fall_back_to_winner() {
        let mut counts = vec![0; 72];
        counts[0] = 9;
        counts[36] = 8;
        let h = AzimuthHistogram::from_counts(counts).unwrap();
        assert!((h.estimate().unwrap().azimuth_deg - 2.5).abs() < 1e-9);
    }

    #[test]
    fn empty_histogram_is_no_data() {
        assert!(matches!(
            estimate_azimuth(&AzimuthHistogram::new()),
            Err(Error::NoData(_))
        ));
    }

    #[test]
    fn signed_errors() {
        assert!((signed_circular_error(350.0, 0.0) + 10.0).abs() < 1e-12);
        assert!((signed_circular_error(92.39, 90.0) - 2.39).abs() < 1e-9);
        assert_eq!(signed_circular_error(42.0, 42.0), 0.0);
        assert!((signed_circular_error(358.0, 2.0) + 4.0).abs() < 1e-12);
        assert_eq!(signed_circular_error(180.0, 0.0), 180.0);
        assert_eq!(signed_circular_error(0.0, 180.0), 180.0);
    }

    #[test]
    fn table_mae() {
        let mae = mean_absolute_error(&[-9.86, -2.61, 2.39]).unwrap();
        assert!((mae - 4.95).abs() < 0.01);
        assert_eq!(mean_absolute_error(&[0.0]), Some(0.0));
        assert_eq!(mean_absolute_error(&[]), None);
    }

    #[test]
    fn merge_equals_sequential() {
        let preds: Vec<Prediction> = (0..40).map(|i| p(i % 6, (i * 7) % 12)).collect();
        let seq = accumulate(AzimuthHistogram::new(), &preds);
        let mut a = accumulate(AzimuthHistogram::new(), &preds[..17]);
        let b = accumulate(AzimuthHistogram::new(), &preds[17..]);
        a += &b;
        assert_eq!(a, seq);
        assert_eq!(seq.total(), 40 * 6);
    }
}
