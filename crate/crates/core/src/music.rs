//! Broadband MUSIC over the four-microphone array with free-field steering.

use std::f64::consts::PI;

use nalgebra::{Complex, Matrix4, SymmetricEigen, Vector4};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::MultichannelAudio;
use crate::error::{Error, Result};
use crate::scene::HeadModel;

pub const FFT_LEN: usize = 512;
pub const HOP: usize = FFT_LEN / 2;
pub const BAND_HZ: (f64, f64) = (200.0, 4000.0);
pub const AZIMUTH_COUNT: usize = 360;
pub const MIN_DURATION_S: f64 = 2.0;

/// Unit-norm plane-wave steering vectors for every integer azimuth and
/// every FFT bin inside the analysis band.
#[derive(Debug, Clone)]
pub struct SteeringGrid {
    sample_rate: u32,
    bins: Vec<usize>,
    /// `vectors[bin_slot][azimuth]`
    vectors: Vec<Vec<Vector4<Complex64>>>,
}

impl SteeringGrid {
    /// `positions` are microphone coordinates in metres, x toward 0° and
    /// y toward 90°.
    pub fn new(
        positions: [(f64, f64); 4],
        speed_of_sound_mps: f64,
        sample_rate: u32,
    ) -> Result<Self> {
        if !(speed_of_sound_mps > 0.0) || sample_rate == 0 {
            return Err(Error::Argument(
                "steering grid needs positive c and sample rate".into(),
            ));
        }
        let df = sample_rate as f64 / FFT_LEN as f64;
        let bins: Vec<usize> = (1..FFT_LEN / 2)
            .filter(|&k| (BAND_HZ.0..=BAND_HZ.1).contains(&(k as f64 * df)))
            .collect();
        if bins.is_empty() {
            return Err(Error::Argument(format!(
                "no FFT bins inside the analysis band at {sample_rate} Hz"
            )));
        }
        let vectors = bins
            .iter()
            .map(|&k| {
                let w = 2.0 * PI * k as f64 * df;
                (0..AZIMUTH_COUNT)
                    .map(|az| {
                        let (s, c) = (az as f64).to_radians().sin_cos();
                        // arrival time relative to the origin is -p.u / c
                        Vector4::from_fn(|m, _| {
                            let (x, y) = positions[m];
                            let tau = -(x * c + y * s) / speed_of_sound_mps;
                            Complex64::from_polar(0.5, -w * tau)
                        })
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            sample_rate,
            bins,
            vectors,
        })
    }

    /// Microphones at their azimuths on the head surface, no scattering.
    pub fn for_head(head: &HeadModel, sample_rate: u32) -> Result<Self> {
        let pos = head.mic_azimuths_deg().map(|a| {
            let (s, c) = a.to_radians().sin_cos();
            (head.head_radius_m * c, head.head_radius_m * s)
        });
        Self::new(pos, head.speed_of_sound_mps, sample_rate)
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn bins(&self) -> &[usize] {
        &self.bins
    }

    pub fn steering(&self, bin_slot: usize, azimuth: usize) -> &Vector4<Complex64> {
        &self.vectors[bin_slot][azimuth]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MusicEstimate {
    pub azimuth_deg: f64,
    /// Bin-averaged pseudospectrum, one value per degree.
    pub pseudospectrum: Vec<f64>,
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Spatial covariance per analysis bin from a Hann-windowed STFT.
pub fn spatial_covariances(
    mics: &MultichannelAudio,
    grid: &SteeringGrid,
) -> Vec<Matrix4<Complex64>> {
    let fft = FftPlanner::<f64>::new().plan_fft_forward(FFT_LEN);
    let win = hann(FFT_LEN);
    let mut cov = vec![Matrix4::<Complex64>::zeros(); grid.bins.len()];
    let mut buf = vec![Complex64::new(0.0, 0.0); FFT_LEN];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut spectra = vec![vec![Complex64::new(0.0, 0.0); grid.bins.len()]; 4];
    let mut frames = 0usize;
    let mut start = 0;
    while start + FFT_LEN <= mics.len() {
        for (m, spec) in spectra.iter_mut().enumerate() {
            let ch = &mics.channel(m)[start..start + FFT_LEN];
            for ((b, x), w) in buf.iter_mut().zip(ch).zip(&win) {
                *b = Complex64::new(x * w, 0.0);
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            for (s, &k) in spec.iter_mut().zip(&grid.bins) {
                *s = buf[k];
            }
        }
        for (slot, c) in cov.iter_mut().enumerate() {
            let x = Vector4::from_fn(|m, _| spectra[m][slot]);
            *c += x * x.adjoint();
        }
        frames += 1;
        start += HOP;
    }
    let norm = 1.0 / frames.max(1) as f64;
    for c in &mut cov {
        *c *= Complex::from(norm);
    }
    cov
}

/// Single-source MUSIC: noise subspace of the three smallest eigenvalues
/// per bin, pseudospectra averaged across bins, argmax over azimuth.
pub fn music_localize(mics: &MultichannelAudio, grid: &SteeringGrid) -> Result<MusicEstimate> {
    if mics.channel_count() != 4 {
        return Err(Error::Argument(format!(
            "MUSIC needs 4 microphones, got {}",
            mics.channel_count()
        )));
    }
    if mics.sample_rate() != grid.sample_rate {
        return Err(Error::Argument(format!(
            "audio at {} Hz but steering grid built for {} Hz",
            mics.sample_rate(),
            grid.sample_rate
        )));
    }
    if mics.duration_s() < MIN_DURATION_S {
        return Err(Error::Argument(format!(
            "MUSIC needs at least {MIN_DURATION_S} s of audio"
        )));
    }
    let cov = spatial_covariances(mics, grid);
    let mut spectrum = vec![0.0; AZIMUTH_COUNT];
    let mut used = 0usize;
    for (slot, r) in cov.into_iter().enumerate() {
        let power = r.trace().re;
        if !(power > 1e-20) {
            continue;
        }
        let eig = SymmetricEigen::new(r / Complex::from(power));
        let mut order = [0usize, 1, 2, 3];
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let noise: Vec<Vector4<Complex64>> = order[..3]
            .iter()
            .map(|&i| eig.eigenvectors.column(i).into_owned())
            .collect();
        for (az, p) in spectrum.iter_mut().enumerate() {
            let a = &grid.vectors[slot][az];
            let proj: f64 = noise.iter().map(|e| e.dotc(a).norm_sqr()).sum();
            *p += 1.0 / proj.max(1e-12);
        }
        used += 1;
    }
    if used == 0 {
        return Err(Error::NoEstimate(
            "spatial covariance is zero in every analysis bin".into(),
        ));
    }
    for p in &mut spectrum {
        *p /= used as f64;
    }
    let best = spectrum
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .expect("spectrum has 360 entries");
    Ok(MusicEstimate {
        azimuth_deg: best as f64,
        pseudospectrum: spectrum,
    })
}

/// Free-field plane wave of `source` arriving from `azimuth_deg`, using
/// exact fractional delays in the frequency domain.
pub fn simulate_plane_wave(
    source: &[f64],
    positions: [(f64, f64); 4],
    azimuth_deg: f64,
    speed_of_sound_mps: f64,
    sample_rate: u32,
) -> Result<MultichannelAudio> {
    let n = source.len();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut spec: Vec<Complex64> = source.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    fwd.process(&mut spec);
    let (s, c) = azimuth_deg.to_radians().sin_cos();
    let channels = positions
        .iter()
        .map(|&(x, y)| {
            let tau = -(x * c + y * s) / speed_of_sound_mps * sample_rate as f64;
            let mut buf: Vec<Complex64> = spec
                .iter()
                .enumerate()
                .map(|(k, v)| {
                    let f = if k <= n / 2 {
                        k as f64
                    } else {
                        k as f64 - n as f64
                    };
                    let shift = if n.is_multiple_of(2) && k == n / 2 {
                        0.0
                    } else {
                        -2.0 * PI * f * tau / n as f64
                    };
                    v * Complex64::from_polar(1.0, shift)
                })
                .collect();
            inv.process(&mut buf);
            buf.iter().map(|v| v.re / n as f64).collect()
        })
        .collect();
    MultichannelAudio::new(channels, sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn head_positions() -> [(f64, f64); 4] {
        let head = HeadModel::default();
        head.mic_azimuths_deg().map(|a| {
            let (s, c) = a.to_radians().sin_cos();
            (head.head_radius_m * c, head.head_radius_m * s)
        })
    }

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    #[test]
    fn steering_vectors_are_unit_norm() {
        let g = SteeringGrid::for_head(&HeadModel::default(), 20_000).unwrap();
        assert_eq!(g.bins().first(), Some(&6));
        for slot in [0, g.bins().len() - 1] {
            for az in [0, 123, 359] {
                assert!((g.steering(slot, az).norm() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn plane_wave_is_localized() {
        let grid = SteeringGrid::for_head(&HeadModel::default(), 20_000).unwrap();
        for az in [45.0, 135.0, 300.0] {
            let mics = simulate_plane_wave(&noise(60_000, 1), head_positions(), az, 343.0, 20_000)
                .unwrap();
            let est = music_localize(&mics, &grid).unwrap();
            let err = crate::fusion::signed_circular_error(est.azimuth_deg, az);
            assert!(err.abs() <= 2.0, "{az}: {}", est.azimuth_deg);
        }
    }

    #[test]
    fn rendered_scenes_land_on_the_true_side() {
        use crate::scene::{render_direction, NoiseType, SceneSpec};
        let head = HeadModel::default();
        let grid = SteeringGrid::for_head(&head, 20_000).unwrap();
        let mut estimates = Vec::new();
        for az in [45.0, 315.0] {
            let mut spec = SceneSpec::synthetic(az, 20.0, 0, NoiseType::White, 5);
            spec.duration_s = 3.0;
            let est = music_localize(&render_direction(&spec, &head).unwrap(), &grid)
                .unwrap()
                .azimuth_deg;
            // left half-plane is (0, 180)
            assert_eq!(est > 0.0 && est < 180.0, az < 180.0, "{az}: {est}");
            estimates.push(est);
        }
        assert_ne!(estimates[0], estimates[1]);
    }

    #[test]
    fn gain_does_not_move_the_peak() {
        let grid = SteeringGrid::for_head(&HeadModel::default(), 20_000).unwrap();
        let mics =
            simulate_plane_wave(&noise(50_000, 2), head_positions(), 70.0, 343.0, 20_000).unwrap();
        let a = music_localize(&mics, &grid).unwrap();
        let b = music_localize(&mics.scaled(37.0), &grid).unwrap();
        assert_eq!(a.azimuth_deg, b.azimuth_deg);
    }

    #[test]
    fn silence_and_short_input() {
        let grid = SteeringGrid::for_head(&HeadModel::default(), 20_000).unwrap();
        let silent = MultichannelAudio::new(vec![vec![0.0; 40_000]; 4], 20_000).unwrap();
        assert!(matches!(
            music_localize(&silent, &grid),
            Err(Error::NoEstimate(_))
        ));
        let short = MultichannelAudio::new(vec![vec![0.1; 30_000]; 4], 20_000).unwrap();
        assert!(matches!(
            music_localize(&short, &grid),
            Err(Error::Argument(_))
        ));
    }
}
