//! First-order differential (delay-and-subtract) beamformer producing the
//! four cardioid signals from the two microphones on each hearing aid.

use serde::{Deserialize, Serialize};

use crate::audio::{MultichannelAudio, LEFT_BACK, LEFT_FRONT, RIGHT_BACK, RIGHT_FRONT};
use crate::dsp::delay_signal;
use crate::error::{Error, Result};

/// Largest front/back delay accepted, in samples at the processing rate.
pub const MAX_DELAY_SAMPLES: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArrayGeometry {
    /// Distance between the front and back microphone of one device.
    pub mic_spacing_m: f64,
    pub speed_of_sound_mps: f64,
}

impl Default for ArrayGeometry {
    fn default() -> Self {
        Self {
            mic_spacing_m: 0.015,
            speed_of_sound_mps: 343.0,
        }
    }
}

impl ArrayGeometry {
    pub fn validate(&self) -> Result<()> {
        if !(self.mic_spacing_m > 0.0) || !(self.speed_of_sound_mps > 0.0) {
            return Err(Error::Geometry(format!(
                "spacing {} m and speed of sound {} m/s must be positive",
                self.mic_spacing_m, self.speed_of_sound_mps
            )));
        }
        Ok(())
    }

    /// Acoustic travel time across the device, in seconds.
    pub fn delay_s(&self) -> f64 {
        self.mic_spacing_m / self.speed_of_sound_mps
    }
}

/// Cardioid outputs, all at the same rate and length.
#[derive(Debug, Clone, PartialEq)]
pub struct CardioidSet {
    pub front_left: Vec<f64>,
    pub front_right: Vec<f64>,
    pub back_left: Vec<f64>,
    pub back_right: Vec<f64>,
    pub sample_rate: u32,
}

impl CardioidSet {
    /// Channels in feature order: FL, FR, BL, BR.
    pub fn channels(&self) -> [&[f64]; 4] {
        [
            &self.front_left,
            &self.front_right,
            &self.back_left,
            &self.back_right,
        ]
    }

    pub fn len(&self) -> usize {
        self.front_left.len()
    }

    pub fn is_empty(&self) -> bool {
        self.front_left.is_empty()
    }

    pub fn into_audio(self) -> MultichannelAudio {
        MultichannelAudio::new(
            vec![
                self.front_left,
                self.front_right,
                self.back_left,
                self.back_right,
            ],
            self.sample_rate,
        )
        .expect("cardioid channels are equal-length and finite")
    }

    /// Inverse of [`CardioidSet::into_audio`].
    pub fn from_audio(audio: MultichannelAudio) -> Result<Self> {
        if audio.channel_count() != 4 {
            return Err(Error::Argument(format!(
                "cardioid set needs 4 channels, got {}",
                audio.channel_count()
            )));
        }
        let sample_rate = audio.sample_rate();
        let mut ch = audio.into_channels().into_iter();
        let mut next = || ch.next().unwrap_or_default();
        Ok(Self {
            front_left: next(),
            front_right: next(),
            back_left: next(),
            back_right: next(),
            sample_rate,
        })
    }
}

/// Build forward and backward cardioids per side:
/// `front(t) - back(t - tau)` and `back(t) - front(t - tau)`.
pub fn make_cardioids(mics: &MultichannelAudio, geom: &ArrayGeometry) -> Result<CardioidSet> {
    if mics.channel_count() != 4 {
        return Err(Error::Argument(format!(
            "beamformer needs 4 microphones, got {}",
            mics.channel_count()
        )));
    }
    geom.validate()?;
    let tau = geom.delay_s() * mics.sample_rate() as f64;
    if tau >= MAX_DELAY_SAMPLES {
        return Err(Error::Geometry(format!(
            "front/back delay of {tau:.2} samples exceeds {MAX_DELAY_SAMPLES}"
        )));
    }
    let pair = |front: &[f64], back: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let back_delayed = delay_signal(back, tau);
        let front_delayed = delay_signal(front, tau);
        let fwd = front
            .iter()
            .zip(&back_delayed)
            .map(|(a, b)| a - b)
            .collect();
        let bwd = back
            .iter()
            .zip(&front_delayed)
            .map(|(a, b)| a - b)
            .collect();
        (fwd, bwd)
    };
    let (front_left, back_left) = pair(mics.channel(LEFT_FRONT), mics.channel(LEFT_BACK));
    let (front_right, back_right) = pair(mics.channel(RIGHT_FRONT), mics.channel(RIGHT_BACK));
    Ok(CardioidSet {
        front_left,
        front_right,
        back_left,
        back_right,
        sample_rate: mics.sample_rate(),
    })
}

/// Free-field magnitude of the forward and backward cardioid for a plane
/// wave at `freq_hz` arriving from `angle_deg` off the device's front axis.
pub fn cardioid_response(geom: &ArrayGeometry, freq_hz: f64, angle_deg: f64) -> (f64, f64) {
    let w = 2.0 * std::f64::consts::PI * freq_hz;
    let tau = geom.delay_s();
    let c = angle_deg.to_radians().cos();
    let front = 2.0 * (w * tau * (1.0 + c) / 2.0).sin().abs();
    let back = 2.0 * (w * tau * (1.0 - c) / 2.0).sin().abs();
    (front, back)
}
