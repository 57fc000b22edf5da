//! Amplitude-modulation-spectrum features.
//!
//! Each cardioid channel passes through `ns` spectral bandpass filters. Every
//! band is full-wave rectified, lowpassed at 400 Hz and resampled to a 1 kHz
//! envelope, which then passes through `nm` modulation bandpass filters. The
//! feature for a (channel, spectral band, modulation band) triple is the log10
//! of the mean squared modulation-band output over the frame, floored by
//! [`LOG_FLOOR`]. A frame therefore yields `4 * ns * nm` values, ordered
//! channel-major (FL, FR, BL, BR), then spectral band, then modulation band.

use serde::{Deserialize, Serialize};

use crate::beamforming::CardioidSet;
use crate::dsp::{butterworth_bandpass, butterworth_lowpass, mean_square, Cascade4, Lanes4, Sos};
use crate::error::{Error, Result};
use crate::hash::json_digest;

pub const LOG_FLOOR: f64 = 1e-10;
pub const ENVELOPE_RATE: u32 = 1000;
pub const ENVELOPE_CUTOFF_HZ: f64 = 400.0;
const ENVELOPE_LOWPASS_ORDER: usize = 4;
const ENVELOPE_LOWPASS_SECTIONS: usize = ENVELOPE_LOWPASS_ORDER / 2;
pub const CARDIOID_COUNT: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterbankConfig {
    pub ns: usize,
    pub nm: usize,
    pub spectral_edges: Vec<(f64, f64)>,
    pub modulation_edges: Vec<(f64, f64)>,
    pub filter_order: usize,
}

impl Default for FilterbankConfig {
    fn default() -> Self {
        Self {
            ns: 3,
            nm: 3,
            spectral_edges: vec![(200.0, 800.0), (800.0, 2500.0), (2500.0, 8000.0)],
            modulation_edges: vec![(2.0, 8.0), (8.0, 32.0), (32.0, 128.0)],
            filter_order: 4,
        }
    }
}

fn check_bands(edges: &[(f64, f64)], nyquist: f64, what: &str) -> Result<()> {
    for (i, &(lo, hi)) in edges.iter().enumerate() {
        if !(lo > 0.0 && lo < hi && hi < nyquist) {
            return Err(Error::Config(format!(
                "{what} band {i} ({lo}, {hi}) Hz must satisfy 0 < low < high < {nyquist}"
            )));
        }
        if i > 0 && edges[i - 1].0 > lo {
            return Err(Error::Config(format!(
                "{what} bands must be sorted by low edge"
            )));
        }
    }
    Ok(())
}

impl FilterbankConfig {
    pub fn feature_count(&self) -> usize {
        CARDIOID_COUNT * self.ns * self.nm
    }

    pub fn validate(&self, processing_rate: u32) -> Result<()> {
        if self.ns == 0 || self.nm == 0 {
            return Err(Error::Config("ns and nm must be positive".into()));
        }
        if self.spectral_edges.len() != self.ns || self.modulation_edges.len() != self.nm {
            return Err(Error::Config(format!(
                "expected {} spectral and {} modulation bands, got {} and {}",
                self.ns,
                self.nm,
                self.spectral_edges.len(),
                self.modulation_edges.len()
            )));
        }
        if self.filter_order < 2 || !self.filter_order.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "filter order must be even and >= 2, got {}",
                self.filter_order
            )));
        }
        check_bands(
            &self.spectral_edges,
            processing_rate as f64 / 2.0,
            "spectral",
        )?;
        check_bands(
            &self.modulation_edges,
            ENVELOPE_RATE as f64 / 2.0,
            "modulation",
        )?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("filterbank config serializes")
    }
}

/// Feature vector of one analysis frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureFrame {
    pub values: Vec<f64>,
    pub frame_index: usize,
    /// Stamp of the configuration that produced the frame.
    #[serde(with = "crate::hash::hex_serde")]
    pub config_hash: u64,
}

impl FeatureFrame {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Filters designed once for a given configuration and processing rate.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    config: FilterbankConfig,
    sample_rate: u32,
    spectral: Vec<Sos>,
    envelope_lowpass: Sos,
    envelope_step: usize,
    modulation: Vec<Sos>,
    stamp: u64,
}

impl FeatureExtractor {
    pub fn new(config: &FilterbankConfig, sample_rate: u32) -> Result<Self> {
        config.validate(sample_rate)?;
        if !sample_rate.is_multiple_of(ENVELOPE_RATE) || sample_rate < 2 * ENVELOPE_RATE {
            return Err(Error::Config(format!(
                "processing rate {sample_rate} Hz must be a multiple of {ENVELOPE_RATE} Hz"
            )));
        }
        let fs = sample_rate as f64;
        let spectral = config
            .spectral_edges
            .iter()
            .map(|&(lo, hi)| butterworth_bandpass(config.filter_order, lo, hi, fs))
            .collect::<Result<Vec<_>>>()?;
        let modulation = config
            .modulation_edges
            .iter()
            .map(|&(lo, hi)| {
                butterworth_bandpass(config.filter_order, lo, hi, ENVELOPE_RATE as f64)
            })
            .collect::<Result<Vec<_>>>()?;
        let envelope_lowpass = butterworth_lowpass(ENVELOPE_LOWPASS_ORDER, ENVELOPE_CUTOFF_HZ, fs)?;
        Ok(Self {
            config: config.clone(),
            sample_rate,
            spectral,
            envelope_lowpass,
            envelope_step: (sample_rate / ENVELOPE_RATE) as usize,
            modulation,
            stamp: json_digest(&(config, sample_rate)),
        })
    }

    /// Replace the stamp written into every frame, e.g. with a digest of the
    /// whole pipeline configuration.
    pub fn with_stamp(mut self, stamp: u64) -> Self {
        self.stamp = stamp;
        self
    }

    pub fn stamp(&self) -> u64 {
        self.stamp
    }

    pub fn config(&self) -> &FilterbankConfig {
        &self.config
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn spectral_filters(&self) -> &[Sos] {
        &self.spectral
    }

    pub fn modulation_filters(&self) -> &[Sos] {
        &self.modulation
    }

    pub fn spectral_filterbank(&self, signal: &[f64]) -> Vec<Vec<f64>> {
        self.spectral.iter().map(|f| f.filter(signal)).collect()
    }

    /// Rectify, lowpass and resample a band signal to the envelope rate.
    pub fn envelope(&self, band: &[f64]) -> Vec<f64> {
        let mut rectified: Vec<f64> = band.iter().map(|v| v.abs()).collect();
        self.envelope_lowpass.filter_in_place(&mut rectified);
        rectified
            .iter()
            .step_by(self.envelope_step)
            .map(|v| v.max(0.0))
            .collect()
    }

    pub fn modulation_filterbank(&self, envelope: &[f64]) -> Vec<Vec<f64>> {
        self.modulation.iter().map(|f| f.filter(envelope)).collect()
    }

    /// `ns * nm` features of one single-channel frame.
    pub fn channel_features(&self, signal: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.config.ns * self.config.nm);
        let mut band = vec![0.0; signal.len()];
        for spectral in &self.spectral {
            band.copy_from_slice(signal);
            spectral.filter_in_place(&mut band);
            let env = self.envelope(&band);
            let mut modulated = vec![0.0; env.len()];
            for m in &self.modulation {
                modulated.copy_from_slice(&env);
                m.filter_in_place(&mut modulated);
                out.push(log_energy(&modulated));
            }
        }
        out
    }

    /// Features of one cardioid frame; filter state starts at zero.
    pub fn extract(&self, cards: &CardioidSet, frame_index: usize) -> Result<FeatureFrame> {
        if cards.sample_rate != self.sample_rate {
            return Err(Error::Argument(format!(
                "frame at {} Hz, extractor expects {} Hz",
                cards.sample_rate, self.sample_rate
            )));
        }
        if cards.len() < self.envelope_step {
            return Err(Error::EmptyResult(
                "frame shorter than one envelope sample".into(),
            ));
        }
        Ok(FeatureFrame {
            values: self.frame_values(cards.channels()),
            frame_index,
            config_hash: self.stamp,
        })
    }

    /// All four channels in lockstep: bandpass, rectifier and envelope
    /// lowpass fused into one pass per spectral band. Bit-identical to
    /// calling [`FeatureExtractor::channel_features`] per channel.
    fn frame_values(&self, chans: [&[f64]; 4]) -> Vec<f64> {
        let (ns, nm) = (self.config.ns, self.config.nm);
        let mut values = vec![0.0; 4 * ns * nm];
        let cap = chans[0].len().div_ceil(self.envelope_step);
        let envs: Vec<Vec<[f64; 4]>> = match self.three_band_kernel() {
            Some((bands, lp)) => {
                let mut envs: [Vec<[f64; 4]>; 3] = std::array::from_fn(|_| Vec::with_capacity(cap));
                envelope_pass_bands(bands, lp, chans, self.envelope_step, &mut envs);
                envs.into()
            }
            None => self
                .spectral
                .iter()
                .map(|spectral| {
                    let mut env = Vec::with_capacity(cap);
                    self.band_envelopes(spectral, chans, &mut env);
                    env
                })
                .collect(),
        };
        for (b, env) in envs.iter().enumerate() {
            for (m, modulation) in self.modulation.iter().enumerate() {
                let energy = modulation_energy(modulation, env);
                for (l, e) in energy.iter().enumerate() {
                    values[(l * ns + b) * nm + m] = (e + LOG_FLOOR).log10();
                }
            }
        }
        values
    }

    /// Fixed-size filters for the default layout of three fourth-order bands.
    #[allow(clippy::type_complexity)]
    fn three_band_kernel(&self) -> Option<([Cascade4<2>; 3], Cascade4<ENVELOPE_LOWPASS_SECTIONS>)> {
        if self.spectral.len() != 3 {
            return None;
        }
        let bands = [
            Cascade4::<2>::new(&self.spectral[0])?,
            Cascade4::<2>::new(&self.spectral[1])?,
            Cascade4::<2>::new(&self.spectral[2])?,
        ];
        Some((bands, Cascade4::new(&self.envelope_lowpass)?))
    }

    fn band_envelopes(&self, spectral: &Sos, chans: [&[f64]; 4], env: &mut Vec<[f64; 4]>) {
        let lp = Cascade4::<ENVELOPE_LOWPASS_SECTIONS>::new(&self.envelope_lowpass)
            .expect("envelope lowpass section count is fixed");
        let step = self.envelope_step;
        match spectral.sections().len() {
            1 => envelope_pass(Cascade4::<1>::new(spectral).unwrap(), lp, chans, step, env),
            2 => envelope_pass(Cascade4::<2>::new(spectral).unwrap(), lp, chans, step, env),
            3 => envelope_pass(Cascade4::<3>::new(spectral).unwrap(), lp, chans, step, env),
            4 => envelope_pass(Cascade4::<4>::new(spectral).unwrap(), lp, chans, step, env),
            _ => envelope_pass(Lanes4::new(spectral), lp, chans, step, env),
        }
    }
}

trait LaneFilter {
    fn run(&mut self, v: [f64; 4]) -> [f64; 4];
}

impl<const S: usize> LaneFilter for Cascade4<S> {
    #[inline(always)]
    fn run(&mut self, v: [f64; 4]) -> [f64; 4] {
        self.step(v)
    }
}

impl LaneFilter for Lanes4 {
    #[inline(always)]
    fn run(&mut self, v: [f64; 4]) -> [f64; 4] {
        self.step(v)
    }
}

fn envelope_pass<F: LaneFilter>(
    mut band: F,
    mut lowpass: Cascade4<ENVELOPE_LOWPASS_SECTIONS>,
    chans: [&[f64]; 4],
    step: usize,
    env: &mut Vec<[f64; 4]>,
) {
    let len = chans[0].len();
    let [c0, c1, c2, c3] = chans.map(|c| &c[..len]);
    let mut countdown = 0;
    for n in 0..len {
        let v = lowpass.step(band.run([c0[n], c1[n], c2[n], c3[n]]).map(f64::abs));
        if countdown == 0 {
            env.push(v.map(|x| x.max(0.0)));
            countdown = step;
        }
        countdown -= 1;
    }
}

/// Three spectral bands of four channels in one pass over the frame.
fn envelope_pass_bands(
    bands: [Cascade4<2>; 3],
    lowpass: Cascade4<ENVELOPE_LOWPASS_SECTIONS>,
    chans: [&[f64]; 4],
    step: usize,
    envs: &mut [Vec<[f64; 4]>; 3],
) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked just above.
            unsafe { envelope_pass_bands_avx2(bands, lowpass, chans, step, envs) };
            return;
        }
    }
    envelope_pass_bands_generic(bands, lowpass, chans, step, envs);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn envelope_pass_bands_avx2(
    bands: [Cascade4<2>; 3],
    lowpass: Cascade4<ENVELOPE_LOWPASS_SECTIONS>,
    chans: [&[f64]; 4],
    step: usize,
    envs: &mut [Vec<[f64; 4]>; 3],
) {
    envelope_pass_bands_generic(bands, lowpass, chans, step, envs);
}

#[inline(always)]
fn envelope_pass_bands_generic(
    mut bands: [Cascade4<2>; 3],
    lowpass: Cascade4<ENVELOPE_LOWPASS_SECTIONS>,
    chans: [&[f64]; 4],
    step: usize,
    envs: &mut [Vec<[f64; 4]>; 3],
) {
    let mut lps = [lowpass; 3];
    let len = chans[0].len();
    let [c0, c1, c2, c3] = chans.map(|c| &c[..len]);
    let mut countdown = 0;
    for n in 0..len {
        let x = [c0[n], c1[n], c2[n], c3[n]];
        let v: [[f64; 4]; 3] = std::array::from_fn(|b| lps[b].step(bands[b].step(x).map(f64::abs)));
        if countdown == 0 {
            for (env, vb) in envs.iter_mut().zip(v) {
                env.push(vb.map(|x| x.max(0.0)));
            }
            countdown = step;
        }
        countdown -= 1;
    }
}

/// Mean square of each lane after the modulation filter.
fn modulation_energy(filter: &Sos, env: &[[f64; 4]]) -> [f64; 4] {
    let mut lanes = Lanes4::new(filter);
    let mut acc = [0.0; 4];
    for &e in env {
        let y = lanes.step(e);
        for l in 0..4 {
            acc[l] += y[l] * y[l];
        }
    }
    if env.is_empty() {
        return [0.0; 4];
    }
    acc.map(|a| a / env.len() as f64)
}

pub fn log_energy(x: &[f64]) -> f64 {
    (mean_square(x) + LOG_FLOOR).log10()
}

pub fn spectral_filterbank(
    signal: &[f64],
    cfg: &FilterbankConfig,
    sample_rate: u32,
) -> Result<Vec<Vec<f64>>> {
    Ok(FeatureExtractor::new(cfg, sample_rate)?.spectral_filterbank(signal))
}

pub fn modulation_filterbank(envelope: &[f64], cfg: &FilterbankConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate(u32::MAX)?;
    cfg.modulation_edges
        .iter()
        .map(|&(lo, hi)| {
            butterworth_bandpass(cfg.filter_order, lo, hi, ENVELOPE_RATE as f64)
                .map(|f| f.filter(envelope))
        })
        .collect()
}

pub fn extract_features(cards: &CardioidSet, cfg: &FilterbankConfig) -> Result<FeatureFrame> {
    FeatureExtractor::new(cfg, cards.sample_rate)?.extract(cards, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn extractor() -> FeatureExtractor {
        FeatureExtractor::new(&FilterbankConfig::default(), 20_000).unwrap()
    }

    fn silent_frame() -> CardioidSet {
        CardioidSet {
            front_left: vec![0.0; 40_000],
            front_right: vec![0.0; 40_000],
            back_left: vec![0.0; 40_000],
            back_right: vec![0.0; 40_000],
            sample_rate: 20_000,
        }
    }

    #[test]
    fn lockstep_extraction_matches_per_channel_reference() {
        let ex = FeatureExtractor::new(&FilterbankConfig::default(), 20_000).unwrap();
        let sig = |f: f64, am: f64| -> Vec<f64> {
            (0..40_000)
                .map(|i| {
                    let t = i as f64 / 20_000.0;
                    (1.0 + 0.7 * (2.0 * PI * am * t).sin()) * (2.0 * PI * f * t).sin()
                        + 0.01 * ((i * 7919) % 101) as f64
                })
                .collect()
        };
        let cards = CardioidSet {
            front_left: sig(440.0, 4.0),
            front_right: sig(1300.0, 20.0),
            back_left: sig(3100.0, 60.0),
            back_right: sig(5000.0, 2.5),
            sample_rate: 20_000,
        };
        let fast = ex.extract(&cards, 0).unwrap().values;
        let reference: Vec<f64> = cards
            .channels()
            .iter()
            .flat_map(|c| ex.channel_features(c))
            .collect();
        assert_eq!(fast, reference);
    }

    #[test]
    fn default_config_json_keys() {
        let json = FilterbankConfig::default().to_json();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        for key in [
            "ns",
            "nm",
            "spectral_edges",
            "modulation_edges",
            "filter_order",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["spectral_edges"][1], serde_json::json!([800.0, 2500.0]));
        assert_eq!(
            FilterbankConfig::from_json(&json).unwrap(),
            FilterbankConfig::default()
        );
    }

    #[test]
    fn invalid_configs() {
        let mut c = FilterbankConfig::default();
        c.spectral_edges[0] = (900.0, 800.0);
        assert!(matches!(c.validate(20_000), Err(Error::Config(_))));
        let mut c = FilterbankConfig::default();
        c.spectral_edges.swap(0, 2);
        assert!(c.validate(20_000).is_err());
        let mut c = FilterbankConfig::default();
        c.modulation_edges[2] = (32.0, 600.0);
        assert!(c.validate(20_000).is_err());
        let c = FilterbankConfig {
            ns: 2,
            ..Default::default()
        };
        assert!(c.validate(20_000).is_err());
        let c = FilterbankConfig {
            filter_order: 3,
            ..Default::default()
        };
        assert!(c.validate(20_000).is_err());
    }

    #[test]
    fn silent_frame_hits_floor() {
        let f = extractor().extract(&silent_frame(), 0).unwrap();
        assert_eq!(f.len(), 36);
        assert!(f.values.iter().all(|v| (*v - (-10.0)).abs() < 1e-12));
    }

    #[test]
    fn zero_inputs_give_zero_outputs() {
        let ex = extractor();
        for b in ex.spectral_filterbank(&[0.0; 1000]) {
            assert!(b.iter().all(|v| *v == 0.0));
        }
        assert!(ex.envelope(&[0.0; 1000]).iter().all(|v| *v == 0.0));
        for b in ex.modulation_filterbank(&[0.0; 100]) {
            assert!(b.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn envelope_tracks_am_rate() {
        let fs = 20_000.0;
        let x: Vec<f64> = (0..40_000)
            .map(|n| {
                let t = n as f64 / fs;
                (1.0 + (2.0 * PI * 8.0 * t).sin()) * 0.5 * (2.0 * PI * 1000.0 * t).sin()
            })
            .collect();
        let env = extractor().envelope(&x);
        assert_eq!(env.len(), 2000);
        assert!(env.iter().all(|v| *v >= 0.0));
        // DFT magnitude of the envelope (DC removed) peaks at 8 Hz
        let mean = env.iter().sum::<f64>() / env.len() as f64;
        let mag = |f: f64| {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, v) in env.iter().enumerate() {
                let ph = 2.0 * PI * f * n as f64 / 1000.0;
                re += (v - mean) * ph.cos();
                im -= (v - mean) * ph.sin();
            }
            (re * re + im * im).sqrt()
        };
        let peak = (1..100)
            .map(|k| k as f64 * 0.5)
            .max_by(|a, b| mag(*a).total_cmp(&mag(*b)));
        assert_eq!(peak, Some(8.0));
    }

    #[test]
    fn modulation_bank_rejects_dc() {
        let out = extractor().modulation_filterbank(&vec![1.0; 20_000]);
        for band in out {
            let tail = &band[10_000..];
            assert!(tail.iter().all(|v| v.abs() < 1e-3));
        }
    }

    #[test]
    fn extractor_rejects_bad_rate() {
        assert!(FeatureExtractor::new(&FilterbankConfig::default(), 22_050).is_err());
    }
}
