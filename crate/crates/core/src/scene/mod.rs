//! Synthetic four-microphone scenes from a spherical-head model.
//!
//! Each microphone sits on a rigid sphere. The direct path is delayed by the
//! Woodworth travel time to the microphone and passed through a first-order
//! shelving filter whose high-frequency loss grows with the angle between
//! source and microphone. Noise is diffuse: shared below 500 Hz,
//! independent above.

mod source;

use std::f64::consts::{FRAC_PI_2, PI};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use source::{
    diffuse_noise, noise_signal, speech_like, voice, NoiseType, Voice, BABBLE_TALKERS,
    DIFFUSE_CROSSOVER_HZ, GENERATOR_ID, SPEAKER_COUNT,
};

use crate::audio::{decimate, read_wav, write_wav, MultichannelAudio, SampleEncoding};
use crate::dsp::{delay_signal, mean_square, Biquad, Sos};
use crate::error::{Error, Result};
use crate::hash::mix_seed;

pub const RENDER_RATE: u32 = 20_000;
pub const AZIMUTH_STEP_DEG: f64 = 5.0;
pub const DIRECTION_COUNT: usize = 72;
pub const CORPUS_SNRS_DB: [f64; 6] = [-5.0, 0.0, 5.0, 10.0, 15.0, 20.0];
pub const MIN_DURATION_S: f64 = 2.0;
/// Frequency at which the head-shadow loss is specified.
pub const SHADOW_REFERENCE_HZ: f64 = 8000.0;
pub const MAX_SHADOW_DB: f64 = 20.0;
pub const MANIFEST_NAME: &str = "manifest.csv";

/// Rigid sphere with two behind-the-ear devices, azimuth 90° on the left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadModel {
    pub head_radius_m: f64,
    /// Azimuth of the left ear; the right ear is mirrored.
    pub ear_azimuth_deg: f64,
    /// Arc distance from the ear to each device microphone.
    pub mic_offset_m: f64,
    pub speed_of_sound_mps: f64,
}

impl Default for HeadModel {
    fn default() -> Self {
        Self {
            head_radius_m: 0.0875,
            ear_azimuth_deg: 100.0,
            mic_offset_m: 0.0075,
            speed_of_sound_mps: 343.0,
        }
    }
}

impl HeadModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.head_radius_m > 0.0) || !(self.speed_of_sound_mps > 0.0) {
            return Err(Error::Config(
                "head radius and speed of sound must be positive".into(),
            ));
        }
        if !(self.mic_offset_m > 0.0) {
            return Err(Error::Config("microphone offset must be positive".into()));
        }
        let pos = self.mic_azimuths_deg();
        for i in 0..4 {
            for j in 0..i {
                if angular_distance_deg(pos[i], pos[j]) < 1e-6 {
                    return Err(Error::Config("microphone positions coincide".into()));
                }
            }
        }
        Ok(())
    }

    /// Azimuths of the four microphones in channel order
    /// [left-front, left-back, right-front, right-back].
    pub fn mic_azimuths_deg(&self) -> [f64; 4] {
        let off = (self.mic_offset_m / self.head_radius_m).to_degrees();
        let e = self.ear_azimuth_deg;
        [e - off, e + off, 360.0 - (e - off), 360.0 - (e + off)].map(|a| a.rem_euclid(360.0))
    }

    /// Arrival time at a microphone relative to the head centre.
    pub fn woodworth_delay_s(&self, incidence_rad: f64) -> f64 {
        let r_over_c = self.head_radius_m / self.speed_of_sound_mps;
        if incidence_rad <= FRAC_PI_2 {
            -r_over_c * incidence_rad.cos()
        } else {
            r_over_c * (incidence_rad - FRAC_PI_2)
        }
    }

    pub fn mic_delays_s(&self, azimuth_deg: f64) -> [f64; 4] {
        self.mic_azimuths_deg()
            .map(|m| self.woodworth_delay_s(angular_distance_deg(azimuth_deg, m).to_radians()))
    }

    /// Shelf corner frequency `c / (2 pi r)`.
    pub fn shadow_corner_hz(&self) -> f64 {
        self.speed_of_sound_mps / (2.0 * PI * self.head_radius_m)
    }

    /// First-order shelf with unit DC gain and a loss of
    /// `20 dB * (1 - cos a) / 2` at 8 kHz for incidence angle `a`.
    pub fn shadow_filter(&self, incidence_rad: f64, fs: f64) -> Sos {
        let loss_db = MAX_SHADOW_DB * (1.0 - incidence_rad.cos()) / 2.0;
        let target = 10f64.powf(-loss_db / 20.0);
        let k = 1.0 / (PI * self.shadow_corner_hz() / fs).tan();
        let x = (PI * SHADOW_REFERENCE_HZ / fs).tan() * k;
        // |H|^2 = (g^2 x^2 + 1) / (x^2 + 1) on the prewarped axis
        let g = ((target * target * (x * x + 1.0) - 1.0).max(0.0) / (x * x)).sqrt();
        let a0 = k + 1.0;
        Sos::new(vec![Biquad {
            b0: (g * k + 1.0) / a0,
            b1: (1.0 - g * k) / a0,
            b2: 0.0,
            a1: (1.0 - k) / a0,
            a2: 0.0,
        }])
    }
}

pub fn angular_distance_deg(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Interaural time difference of the Woodworth model for a source at
/// `azimuth_rad` from the median plane, ears at ±90°.
pub fn woodworth_itd_s(head: &HeadModel, azimuth_rad: f64) -> f64 {
    head.head_radius_m * (azimuth_rad + azimuth_rad.sin()) / head.speed_of_sound_mps
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpeechSource {
    Synthetic { speaker_id: usize },
    File { path: PathBuf },
}

impl SpeechSource {
    pub fn generator(&self) -> String {
        match self {
            SpeechSource::Synthetic { .. } => GENERATOR_ID.to_string(),
            SpeechSource::File { path } => path.display().to_string(),
        }
    }

    fn speaker_id(&self) -> Option<usize> {
        match self {
            SpeechSource::Synthetic { speaker_id } => Some(*speaker_id),
            SpeechSource::File { .. } => None,
        }
    }

    fn signal(&self, len: usize, fs: u32, seed: u64) -> Result<Vec<f64>> {
        match self {
            SpeechSource::Synthetic { speaker_id } => {
                Ok(speech_like(len, fs as f64, voice(*speaker_id), seed))
            }
            SpeechSource::File { path } => {
                let audio = read_wav(path)?;
                let audio = if audio.sample_rate() == fs {
                    audio
                } else {
                    decimate(&audio, fs)?
                };
                let mono = audio.channel(0);
                if mono.iter().all(|&v| v == 0.0) {
                    return Err(Error::Argument(format!(
                        "speech file {} is silent",
                        path.display()
                    )));
                }
                Ok(mono.iter().copied().cycle().take(len).collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub azimuth_deg: f64,
    pub snr_db: f64,
    pub speech: SpeechSource,
    pub noise_type: NoiseType,
    pub duration_s: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn synthetic(
        azimuth_deg: f64,
        snr_db: f64,
        speaker_id: usize,
        noise_type: NoiseType,
        seed: u64,
    ) -> Self {
        Self {
            azimuth_deg,
            snr_db,
            speech: SpeechSource::Synthetic { speaker_id },
            noise_type,
            duration_s: 10.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let steps = self.azimuth_deg / AZIMUTH_STEP_DEG;
        if !(0.0..360.0).contains(&self.azimuth_deg) || (steps - steps.round()).abs() > 1e-9 {
            return Err(Error::Argument(format!(
                "azimuth {} is not on the 5° grid",
                self.azimuth_deg
            )));
        }
        if !(self.duration_s > MIN_DURATION_S) || !self.duration_s.is_finite() {
            return Err(Error::Argument(format!(
                "duration must exceed {MIN_DURATION_S} s"
            )));
        }
        if !self.snr_db.is_finite() {
            return Err(Error::Argument("SNR must be finite".into()));
        }
        Ok(())
    }
}

/// Rendered mixture together with its clean speech and noise images, all
/// scaled by the same output gain.
#[derive(Debug, Clone)]
pub struct RenderedScene {
    pub mix: MultichannelAudio,
    pub speech: MultichannelAudio,
    pub noise: MultichannelAudio,
}

impl RenderedScene {
    pub fn achieved_snr_db(&self) -> f64 {
        let p = |a: &MultichannelAudio| a.channels().iter().map(|c| mean_square(c)).sum::<f64>();
        10.0 * (p(&self.speech) / p(&self.noise)).log10()
    }
}

/// Direct-path image of a mono source at the four microphones.
pub fn spatialize(source: &[f64], azimuth_deg: f64, head: &HeadModel, fs: u32) -> Vec<Vec<f64>> {
    head.mic_azimuths_deg()
        .iter()
        .map(|&m| {
            let a = angular_distance_deg(azimuth_deg, m).to_radians();
            let shaded = head.shadow_filter(a, fs as f64).filter(source);
            delay_signal(&shaded, head.woodworth_delay_s(a) * fs as f64)
        })
        .collect()
}

pub fn render_direction_parts(spec: &SceneSpec, head: &HeadModel) -> Result<RenderedScene> {
    spec.validate()?;
    head.validate()?;
    let fs = RENDER_RATE;
    let len = (spec.duration_s * fs as f64).round() as usize;
    let src = spec.speech.signal(len, fs, mix_seed(spec.seed, 1))?;
    let mut speech = spatialize(&src, spec.azimuth_deg, head, fs);
    let mut noise = diffuse_noise(spec.noise_type, 4, len, fs as f64, mix_seed(spec.seed, 2));
    let power = |chs: &[Vec<f64>]| chs.iter().map(|c| mean_square(c)).sum::<f64>();
    let ps = power(&speech);
    let pn = power(&noise);
    let noise_gain = if pn > 0.0 {
        (ps / (pn * 10f64.powf(spec.snr_db / 10.0))).sqrt()
    } else {
        0.0
    };
    let mut mix: Vec<Vec<f64>> = speech
        .iter()
        .zip(&noise)
        .map(|(s, n)| s.iter().zip(n).map(|(a, b)| a + noise_gain * b).collect())
        .collect();
    let peak = mix.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return Err(Error::Argument("rendered scene is silent".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 3));
    let level = rng.random_range(0.3..0.9) / peak;
    for ch in mix.iter_mut().chain(speech.iter_mut()) {
        ch.iter_mut().for_each(|v| *v *= level);
    }
    for ch in noise.iter_mut() {
        ch.iter_mut().for_each(|v| *v *= level * noise_gain);
    }
    Ok(RenderedScene {
        mix: MultichannelAudio::new(mix, fs)?,
        speech: MultichannelAudio::new(speech, fs)?,
        noise: MultichannelAudio::new(noise, fs)?,
    })
}

pub fn render_direction(spec: &SceneSpec, head: &HeadModel) -> Result<MultichannelAudio> {
    Ok(render_direction_parts(spec, head)?.mix)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusOptions {
    pub files_per_direction: usize,
    pub duration_s: f64,
    pub seed: u64,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        Self {
            files_per_direction: 18,
            duration_s: 10.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub azimuth_deg: f64,
    pub snr_db: f64,
    pub noise_type: String,
    pub speaker_id: Option<usize>,
    pub seed: u64,
    pub generator: String,
}

pub fn file_name(direction: usize, file: usize) -> String {
    format!(
        "az{:03}_f{:02}.wav",
        direction * AZIMUTH_STEP_DEG as usize,
        file
    )
}

/// Scene for file `file` of direction `direction`: SNR cycles fastest,
/// then speaker; the noise type rotates with both indices.
pub fn corpus_scene(direction: usize, file: usize, opts: &CorpusOptions) -> SceneSpec {
    SceneSpec {
        azimuth_deg: direction as f64 * AZIMUTH_STEP_DEG,
        snr_db: CORPUS_SNRS_DB[file % CORPUS_SNRS_DB.len()],
        speech: SpeechSource::Synthetic {
            speaker_id: (file / CORPUS_SNRS_DB.len()) % SPEAKER_COUNT,
        },
        noise_type: NoiseType::CORPUS[(file + direction) % NoiseType::CORPUS.len()],
        duration_s: opts.duration_s,
        seed: mix_seed(opts.seed, (direction * 1000 + file) as u64),
    }
}

pub fn corpus_scenes(opts: &CorpusOptions) -> Vec<(String, SceneSpec)> {
    (0..DIRECTION_COUNT)
        .flat_map(|d| {
            (0..opts.files_per_direction).map(move |f| (file_name(d, f), corpus_scene(d, f, opts)))
        })
        .collect()
}

fn manifest_row(name: &str, spec: &SceneSpec) -> ManifestRow {
    ManifestRow {
        path: name.to_string(),
        azimuth_deg: spec.azimuth_deg,
        snr_db: spec.snr_db,
        noise_type: spec.noise_type.name().to_string(),
        speaker_id: spec.speech.speaker_id(),
        seed: spec.seed,
        generator: spec.speech.generator(),
    }
}

fn render_one(dir: &Path, name: &str, spec: &SceneSpec, head: &HeadModel) -> Result<PathBuf> {
    let audio = render_direction(spec, head)?;
    let path = dir.join(name);
    write_wav(&path, &audio, SampleEncoding::Float32)?;
    Ok(path)
}

/// Render the full training corpus into `out_dir` and write its manifest.
/// On failure every file written by this call is removed.
pub fn render_corpus(
    out_dir: &Path,
    head: &HeadModel,
    opts: &CorpusOptions,
) -> Result<Vec<ManifestRow>> {
    if opts.files_per_direction == 0 {
        return Err(Error::Argument(
            "files_per_direction must be positive".into(),
        ));
    }
    head.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let scenes = corpus_scenes(opts);

    #[cfg(feature = "parallel")]
    let results: Vec<Result<PathBuf>> = {
        use rayon::prelude::*;
        scenes
            .par_iter()
            .map(|(n, s)| render_one(out_dir, n, s, head))
            .collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<PathBuf>> = scenes
        .iter()
        .map(|(n, s)| render_one(out_dir, n, s, head))
        .collect();

    let manifest = out_dir.join(MANIFEST_NAME);
    let cleanup = |results: &[Result<PathBuf>]| {
        for p in results.iter().flatten() {
            let _ = std::fs::remove_file(p);
        }
        let _ = std::fs::remove_file(&manifest);
    };
    if let Some(Err(_)) = results.iter().find(|r| r.is_err()) {
        cleanup(&results);
        let err = results
            .into_iter()
            .find_map(|r| r.err())
            .expect("an error was found");
        return Err(err);
    }
    let rows: Vec<ManifestRow> = scenes.iter().map(|(n, s)| manifest_row(n, s)).collect();
    if let Err(e) = write_manifest(&manifest, &rows) {
        cleanup(&results);
        return Err(e);
    }
    Ok(rows)
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r
        .deserialize()
        .collect::<std::result::Result<Vec<ManifestRow>, _>>()?;
    if rows.is_empty() {
        return Err(Error::NoData(format!(
            "manifest {} lists no recordings",
            path.display()
        )));
    }
    Ok(rows)
}
