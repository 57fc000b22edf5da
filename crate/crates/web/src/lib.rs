//! Browser demo: cardioid polar patterns, filterbank responses and a
//! simulation of how frame votes are pooled into one azimuth.

use amsloc::beamforming::{cardioid_response, ArrayGeometry};
use amsloc::classification::{ClassGrid, Prediction, CLASS_COUNT, SET_COUNT};
use amsloc::features::{FeatureExtractor, FilterbankConfig, ENVELOPE_RATE};
use amsloc::fusion::{AzimuthHistogram, BIN_COUNT};
use amsloc::hash::mix_seed;
use wasm_bindgen::prelude::*;

pub const PATTERN_POINTS: usize = 360;
pub const RESPONSE_POINTS: usize = 256;
/// Models per set in the default ensemble (5 repeats of 4 folds).
pub const MODELS_PER_SET: usize = 20;

/// Forward then backward cardioid magnitude at every degree.
pub fn polar_pattern(freq_hz: f64, spacing_m: f64) -> amsloc::Result<Vec<f64>> {
    let geom = ArrayGeometry {
        mic_spacing_m: spacing_m,
        ..ArrayGeometry::default()
    };
    geom.validate()?;
    let (front, back): (Vec<f64>, Vec<f64>) = (0..PATTERN_POINTS)
        .map(|a| cardioid_response(&geom, freq_hz, a as f64))
        .unzip();
    Ok(front.into_iter().chain(back).collect())
}

/// Log-spaced frequencies between `low_hz` and `high_hz`.
pub fn log_frequencies(low_hz: f64, high_hz: f64, n: usize) -> Vec<f64> {
    let step = (high_hz / low_hz).ln() / (n - 1) as f64;
    (0..n).map(|i| low_hz * (i as f64 * step).exp()).collect()
}

/// Magnitude in dB of every filter, band after band, on `freqs`.
fn responses_db(filters: &[amsloc::dsp::Sos], freqs: &[f64], fs: f64) -> Vec<f64> {
    filters
        .iter()
        .flat_map(|f| {
            freqs
                .iter()
                .map(move |&hz| 20.0 * f.magnitude(hz, fs).max(1e-6).log10())
        })
        .collect()
}

/// Responses of the spectral bands given as flat `[low, high, ...]` edges.
pub fn spectral_response(
    edges: &[f64],
    order: usize,
    sample_rate: u32,
) -> amsloc::Result<Vec<f64>> {
    let spectral_edges: Vec<(f64, f64)> = edges.chunks_exact(2).map(|p| (p[0], p[1])).collect();
    let cfg = FilterbankConfig {
        ns: spectral_edges.len(),
        spectral_edges,
        filter_order: order,
        ..FilterbankConfig::default()
    };
    let ex = FeatureExtractor::new(&cfg, sample_rate)?;
    let freqs = log_frequencies(50.0, 0.49 * sample_rate as f64, RESPONSE_POINTS);
    Ok(responses_db(
        ex.spectral_filters(),
        &freqs,
        sample_rate as f64,
    ))
}

/// Responses of the modulation bands on the 1 kHz envelope.
pub fn modulation_response(edges: &[f64], order: usize) -> amsloc::Result<Vec<f64>> {
    let modulation_edges: Vec<(f64, f64)> = edges.chunks_exact(2).map(|p| (p[0], p[1])).collect();
    let cfg = FilterbankConfig {
        nm: modulation_edges.len(),
        modulation_edges,
        filter_order: order,
        ..FilterbankConfig::default()
    };
    let ex = FeatureExtractor::new(&cfg, 20_000)?;
    let freqs = log_frequencies(0.25, 0.49 * ENVELOPE_RATE as f64, RESPONSE_POINTS);
    Ok(responses_db(
        ex.modulation_filters(),
        &freqs,
        ENVELOPE_RATE as f64,
    ))
}

fn uniform(seed: u64, i: u64) -> f64 {
    (mix_seed(seed, i) >> 11) as f64 / (1u64 << 53) as f64
}

/// Outcome of the pooling simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolingOutcome {
    pub counts: Vec<u64>,
    pub azimuth_deg: f64,
    pub confidence: f64,
}

/// Every model votes for the class containing `azimuth_deg` with
/// probability `accuracy` and for a uniformly drawn wrong class otherwise.
pub fn simulate_pooling(
    azimuth_deg: f64,
    frames: usize,
    accuracy: f64,
    seed: u64,
) -> amsloc::Result<PoolingOutcome> {
    let mut hist = AzimuthHistogram::new();
    let mut draw = 0u64;
    for _ in 0..frames {
        for grid in ClassGrid::all() {
            let truth = grid.class_of(azimuth_deg)?;
            for _ in 0..MODELS_PER_SET {
                let class_index = if uniform(seed, draw) < accuracy {
                    truth
                } else {
                    let k = (uniform(seed, draw + 1) * (CLASS_COUNT - 1) as f64) as usize;
                    (truth + 1 + k) % CLASS_COUNT
                };
                draw += 2;
                hist.add(Prediction {
                    set_index: grid.set_index(),
                    class_index,
                });
            }
        }
    }
    let est = hist.estimate()?;
    Ok(PoolingOutcome {
        counts: hist.counts().to_vec(),
        azimuth_deg: est.azimuth_deg,
        confidence: est.confidence,
    })
}

fn js(e: amsloc::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// 720 values: forward pattern then backward pattern, one per degree.
#[wasm_bindgen(js_name = cardioidPattern)]
pub fn cardioid_pattern_js(freq_hz: f64, spacing_m: f64) -> Result<Vec<f64>, JsError> {
    polar_pattern(freq_hz, spacing_m).map_err(js)
}

#[wasm_bindgen(js_name = spectralFrequencies)]
pub fn spectral_frequencies_js(sample_rate: u32) -> Vec<f64> {
    log_frequencies(50.0, 0.49 * sample_rate as f64, RESPONSE_POINTS)
}

/// `RESPONSE_POINTS` dB values per band, bands concatenated.
#[wasm_bindgen(js_name = spectralResponse)]
pub fn spectral_response_js(
    edges: &[f64],
    order: usize,
    sample_rate: u32,
) -> Result<Vec<f64>, JsError> {
    spectral_response(edges, order, sample_rate).map_err(js)
}

#[wasm_bindgen(js_name = modulationResponse)]
pub fn modulation_response_js(edges: &[f64], order: usize) -> Result<Vec<f64>, JsError> {
    modulation_response(edges, order).map_err(js)
}

/// 72 bin counts followed by the estimate in degrees and its confidence.
#[wasm_bindgen(js_name = simulatePooling)]
pub fn simulate_pooling_js(
    azimuth_deg: f64,
    frames: usize,
    accuracy: f64,
    seed: u32,
) -> Result<Vec<f64>, JsError> {
    let out = simulate_pooling(azimuth_deg, frames, accuracy, seed as u64).map_err(js)?;
    let mut v: Vec<f64> = out.counts.iter().map(|&c| c as f64).collect();
    v.push(out.azimuth_deg);
    v.push(out.confidence);
    Ok(v)
}

#[wasm_bindgen(js_name = binCount)]
pub fn bin_count_js() -> usize {
    BIN_COUNT
}

#[wasm_bindgen(js_name = setCount)]
pub fn set_count_js() -> usize {
    SET_COUNT
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pattern_has_front_and_back_nulls() {
        let p = polar_pattern(1000.0, 0.015).unwrap();
        assert_eq!(p.len(), 2 * PATTERN_POINTS);
        let (front, back) = p.split_at(PATTERN_POINTS);
        assert!(front[180] < 1e-12 && back[0] < 1e-12);
        assert!(front[0] > front[90] && back[180] > back[90]);
        assert!(polar_pattern(1000.0, -1.0).is_err());
    }

    #[test]
    fn spectral_bands_pass_their_centres() {
        let edges = [200.0, 800.0, 1000.0, 3000.0];
        let db = spectral_response(&edges, 4, 20_000).unwrap();
        assert_eq!(db.len(), 2 * RESPONSE_POINTS);
        let freqs = log_frequencies(50.0, 9800.0, RESPONSE_POINTS);
        for (b, &(lo, hi)) in [(200.0f64, 800.0f64), (1000.0, 3000.0)].iter().enumerate() {
            let centre = freqs.iter().position(|&f| f >= (lo * hi).sqrt()).unwrap();
            assert!(db[b * RESPONSE_POINTS + centre] > -1.0);
            assert!(db[b * RESPONSE_POINTS] < -20.0);
        }
    }

    #[test]
    fn modulation_response_has_one_curve_per_band() {
        let db = modulation_response(&[1.0, 4.0, 4.0, 16.0], 2).unwrap();
        assert_eq!(db.len(), 2 * RESPONSE_POINTS);
    }

    #[test]
    fn perfect_votes_pool_near_the_bin_centre() {
        for az in [0.0, 90.0, 215.0] {
            let out = simulate_pooling(az, 3, 1.0, 1).unwrap();
            let err = amsloc::fusion::signed_circular_error(out.azimuth_deg, az + 2.5);
            assert!(err.abs() <= 2.5 + 1e-9, "{az}: {}", out.azimuth_deg);
            assert_eq!(out.counts.len(), BIN_COUNT);
        }
    }

    #[test]
    fn noisy_votes_still_find_the_source() {
        let out = simulate_pooling(120.0, 5, 0.4, 9).unwrap();
        let err = amsloc::fusion::signed_circular_error(out.azimuth_deg, 122.5);
        assert!(err.abs() <= 5.0, "{}", out.azimuth_deg);
        assert_eq!(out, simulate_pooling(120.0, 5, 0.4, 9).unwrap());
    }
}
