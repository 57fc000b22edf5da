use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dsp::{butterworth_bandpass, butterworth_highpass, butterworth_lowpass};
use crate::error::{Error, Result};
use crate::hash::mix_seed;

pub const GENERATOR_ID: &str = "synthetic-speech-v1";
pub const SPEAKER_COUNT: usize = 3;
pub const BABBLE_TALKERS: usize = 8;
pub const DIFFUSE_CROSSOVER_HZ: f64 = 500.0;

/// Voice parameters of one synthetic talker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Voice {
    pub f0_hz: f64,
    pub formant_scale: f64,
}

pub fn voice(speaker_id: usize) -> Voice {
    match speaker_id % SPEAKER_COUNT {
        0 => Voice {
            f0_hz: 110.0,
            formant_scale: 1.0,
        },
        1 => Voice {
            f0_hz: 200.0,
            formant_scale: 1.15,
        },
        _ => Voice {
            f0_hz: 280.0,
            formant_scale: 1.3,
        },
    }
}

/// First three formants (Hz) of a handful of vowels.
const VOWELS: [[f64; 3]; 6] = [
    [730.0, 1090.0, 2440.0],
    [270.0, 2290.0, 3010.0],
    [530.0, 1840.0, 2480.0],
    [570.0, 840.0, 2410.0],
    [300.0, 870.0, 2240.0],
    [660.0, 1720.0, 2410.0],
];
const FORMANT_BANDWIDTHS: [f64; 3] = [80.0, 120.0, 160.0];
const FORMANT_GAINS: [f64; 3] = [1.0, 0.5, 0.25];

/// Two-pole resonator normalized to unit peak gain.
struct Resonator {
    a1: f64,
    a2: f64,
    g: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(freq_hz: f64, bandwidth_hz: f64, fs: f64) -> Self {
        let r = (-PI * bandwidth_hz / fs).exp();
        Self {
            a1: -2.0 * r * (2.0 * PI * freq_hz / fs).cos(),
            a2: r * r,
            g: 1.0 - r,
            y1: 0.0,
            y2: 0.0,
        }
    }

    #[inline]
    fn step(&mut self, x: f64) -> f64 {
        let y = self.g * x - self.a1 * self.y1 - self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Speech-like signal: voiced syllables with formant resonances and a
/// sin² envelope, occasional fricatives and pauses. Unit RMS when non-silent.
pub fn speech_like(len: usize, fs: f64, v: Voice, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0.0; len];
    let fric =
        butterworth_bandpass(2, 2500.0, (0.45 * fs).min(8000.0), fs).expect("fixed fricative band");
    let mut pos = 0usize;
    let mut phase = rng.random::<f64>();
    while pos < len {
        if rng.random::<f64>() < 0.12 {
            pos += (fs * rng.random_range(0.08..0.25)) as usize;
            continue;
        }
        if rng.random::<f64>() < 0.3 {
            let n = ((fs * rng.random_range(0.04..0.1)) as usize).min(len - pos);
            let noise: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let shaped = fric.filter(&noise);
            let amp = rng.random_range(0.2..0.5);
            for (i, s) in shaped.iter().enumerate() {
                let e = (PI * i as f64 / n as f64).sin().powi(2);
                out[pos + i] += amp * e * s;
            }
            pos += n;
            if pos >= len {
                break;
            }
        }
        let n = ((fs * rng.random_range(0.15..0.35)) as usize).min(len - pos);
        let vowel = VOWELS[rng.random_range(0..VOWELS.len())];
        let f0 = v.f0_hz * rng.random_range(0.9..1.1);
        let glide = rng.random_range(-0.15..0.15);
        let mut res: Vec<Resonator> = vowel
            .iter()
            .zip(FORMANT_BANDWIDTHS)
            .map(|(f, b)| {
                Resonator::new(
                    (f * v.formant_scale).min(0.45 * fs),
                    b * v.formant_scale,
                    fs,
                )
            })
            .collect();
        let amp = rng.random_range(0.6..1.0);
        for i in 0..n {
            let t = i as f64 / n as f64;
            phase += f0 * (1.0 + glide * (t - 0.5)) / fs;
            let pulse = if phase >= 1.0 {
                phase -= 1.0;
                1.0
            } else {
                0.0
            };
            let breath: f64 = StandardNormal.sample(&mut rng);
            let x = pulse + 0.03 * breath;
            let y: f64 = res
                .iter_mut()
                .zip(FORMANT_GAINS)
                .map(|(r, g)| g * r.step(x))
                .sum();
            out[pos + i] += amp * (PI * t).sin().powi(2) * y;
        }
        pos += n;
    }
    normalize_rms(&mut out);
    out
}

fn normalize_rms(x: &mut [f64]) {
    let r = crate::dsp::rms(x);
    if r > 0.0 {
        for v in x.iter_mut() {
            *v /= r;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NoiseType {
    #[serde(rename = "white")]
    White,
    #[serde(rename = "pink")]
    Pink,
    #[serde(rename = "babble-surrogate", alias = "babble")]
    Babble,
    #[serde(rename = "silent")]
    Silent,
}

impl NoiseType {
    pub const CORPUS: [NoiseType; 3] = [NoiseType::White, NoiseType::Pink, NoiseType::Babble];

    pub fn name(self) -> &'static str {
        match self {
            NoiseType::White => "white",
            NoiseType::Pink => "pink",
            NoiseType::Babble => "babble-surrogate",
            NoiseType::Silent => "silent",
        }
    }
}

impl std::str::FromStr for NoiseType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "white" => Ok(NoiseType::White),
            "pink" => Ok(NoiseType::Pink),
            "babble" | "babble-surrogate" => Ok(NoiseType::Babble),
            "silent" | "silence" => Ok(NoiseType::Silent),
            other => Err(Error::Argument(format!("unknown noise type {other:?}"))),
        }
    }
}

/// Pink noise via Kellet's filtered-white approximation.
fn pink(len: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut b = [0.0f64; 7];
    (0..len)
        .map(|_| {
            let w: f64 = StandardNormal.sample(rng);
            b[0] = 0.99886 * b[0] + w * 0.0555179;
            b[1] = 0.99332 * b[1] + w * 0.0750759;
            b[2] = 0.96900 * b[2] + w * 0.1538520;
            b[3] = 0.86650 * b[3] + w * 0.3104856;
            b[4] = 0.55000 * b[4] + w * 0.5329522;
            b[5] = -0.7616 * b[5] - w * 0.0168980;
            let out = b.iter().sum::<f64>() + w * 0.5362;
            b[6] = w * 0.115926;
            out
        })
        .collect()
}

/// One mono realization of the noise type with unit RMS (zeros if silent).
pub fn noise_signal(kind: NoiseType, len: usize, fs: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = match kind {
        NoiseType::Silent => return vec![0.0; len],
        NoiseType::White => (0..len).map(|_| StandardNormal.sample(&mut rng)).collect(),
        NoiseType::Pink => pink(len, &mut rng),
        NoiseType::Babble => {
            let mut acc = vec![0.0; len];
            for t in 0..BABBLE_TALKERS {
                let s = speech_like(len, fs, voice(t), mix_seed(seed, t as u64 + 1));
                for (a, v) in acc.iter_mut().zip(s) {
                    *a += v;
                }
            }
            acc
        }
    };
    normalize_rms(&mut x);
    x
}

/// Diffuse field for `mics` channels: a shared component below the
/// crossover and independent components above it.
pub fn diffuse_noise(
    kind: NoiseType,
    mics: usize,
    len: usize,
    fs: f64,
    seed: u64,
) -> Vec<Vec<f64>> {
    if kind == NoiseType::Silent {
        return vec![vec![0.0; len]; mics];
    }
    let lp = butterworth_lowpass(4, DIFFUSE_CROSSOVER_HZ, fs).expect("fixed crossover");
    let hp = butterworth_highpass(4, DIFFUSE_CROSSOVER_HZ, fs).expect("fixed crossover");
    let common = lp.filter(&noise_signal(kind, len, fs, mix_seed(seed, 0)));
    (0..mics)
        .map(|m| {
            let own = hp.filter(&noise_signal(kind, len, fs, mix_seed(seed, m as u64 + 1)));
            common.iter().zip(own).map(|(c, o)| c + o).collect()
        })
        .collect()
}
