//! Multichannel audio container, WAV I/O, rational-ratio decimation and
//! fixed-length framing.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dsp::{kaiser, kaiser_beta, sinc};
use crate::error::{Error, Result};

/// Hearing-aid channel order: left-front, left-back, right-front, right-back.
pub const LEFT_FRONT: usize = 0;
pub const LEFT_BACK: usize = 1;
pub const RIGHT_FRONT: usize = 2;
pub const RIGHT_BACK: usize = 3;

pub const MAX_CHANNELS: usize = 8;

/// Equal-length channels of finite samples at a common rate.
#[derive(Debug, Clone, PartialEq)]
pub struct MultichannelAudio {
    channels: Vec<Vec<f64>>,
    sample_rate: u32,
}

impl MultichannelAudio {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::Argument("audio needs at least one channel".into()));
        }
        if sample_rate == 0 {
            return Err(Error::Argument("sample rate must be positive".into()));
        }
        let len = channels[0].len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::Argument(
                "all channels must have equal length".into(),
            ));
        }
        if channels.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Argument("samples must be finite".into()));
        }
        Ok(Self {
            channels,
            sample_rate,
        })
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    /// Samples per channel.
    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    pub fn channel(&self, index: usize) -> &[f64] {
        &self.channels[index]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Vec<f64>> {
        self.channels
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            channels: self
                .channels
                .iter()
                .map(|c| c.iter().map(|v| v * gain).collect())
                .collect(),
            sample_rate: self.sample_rate,
        }
    }

    fn slice(&self, start: usize, len: usize) -> Self {
        Self {
            channels: self
                .channels
                .iter()
                .map(|c| c[start..start + len].to_vec())
                .collect(),
            sample_rate: self.sample_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleEncoding {
    Pcm16,
    Float32,
}

fn map_hound(err: hound::Error) -> Error {
    match err {
        hound::Error::IoError(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
            Error::Format(format!("unexpected end of file: {e}"))
        }
        hound::Error::IoError(e) => Error::Io(e),
        hound::Error::FormatError(m) => Error::Format(m.to_string()),
        hound::Error::Unsupported => Error::Unsupported("unsupported WAVE feature".into()),
        other => Error::Format(other.to_string()),
    }
}

/// Any I/O failure while pulling samples means the data chunk is shorter
/// than its header claims.
fn truncated(err: hound::Error) -> Error {
    match err {
        hound::Error::IoError(e) => Error::Format(format!("truncated sample data: {e}")),
        other => map_hound(other),
    }
}

/// Read a PCM16 or float32 RIFF/WAVE file with 1 to 8 channels. Integer
/// samples are divided by 32768.
pub fn read_wav(path: impl AsRef<Path>) -> Result<MultichannelAudio> {
    let reader = hound::WavReader::open(path.as_ref()).map_err(map_hound)?;
    read_from(reader)
}

/// Same as [`read_wav`] over any byte source.
pub fn read_wav_from<R: std::io::Read>(source: R) -> Result<MultichannelAudio> {
    let reader = hound::WavReader::new(source).map_err(map_hound)?;
    read_from(reader)
}

fn read_from<R: std::io::Read>(reader: hound::WavReader<R>) -> Result<MultichannelAudio> {
    let spec = reader.spec();
    let nch = spec.channels as usize;
    if nch == 0 || nch > MAX_CHANNELS {
        return Err(Error::Unsupported(format!(
            "{nch} channels (1 to {MAX_CHANNELS} supported)"
        )));
    }
    let expected = reader.len() as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(truncated)?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(truncated)?,
        (fmt, bits) => {
            return Err(Error::Unsupported(format!("{bits}-bit {fmt:?} samples")));
        }
    };
    if interleaved.len() != expected || !interleaved.len().is_multiple_of(nch) {
        return Err(Error::Format(format!(
            "header promises {expected} samples, file holds {}",
            interleaved.len()
        )));
    }
    let frames = interleaved.len() / nch;
    let mut channels = vec![Vec::with_capacity(frames); nch];
    for frame in interleaved.chunks_exact(nch) {
        for (c, v) in frame.iter().enumerate() {
            channels[c].push(*v);
        }
    }
    MultichannelAudio::new(channels, spec.sample_rate)
        .map_err(|e| Error::Format(format!("invalid sample data: {e}")))
}

pub fn write_wav(
    path: impl AsRef<Path>,
    audio: &MultichannelAudio,
    encoding: SampleEncoding,
) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    write_wav_to(file, audio, encoding)
}

pub fn write_wav_to<W: std::io::Write + std::io::Seek>(
    sink: W,
    audio: &MultichannelAudio,
    encoding: SampleEncoding,
) -> Result<()> {
    if audio.channel_count() > MAX_CHANNELS {
        return Err(Error::Unsupported(format!(
            "{} channels",
            audio.channel_count()
        )));
    }
    let spec = hound::WavSpec {
        channels: audio.channel_count() as u16,
        sample_rate: audio.sample_rate(),
        bits_per_sample: match encoding {
            SampleEncoding::Pcm16 => 16,
            SampleEncoding::Float32 => 32,
        },
        sample_format: match encoding {
            SampleEncoding::Pcm16 => hound::SampleFormat::Int,
            SampleEncoding::Float32 => hound::SampleFormat::Float,
        },
    };
    let mut writer = hound::WavWriter::new(sink, spec).map_err(map_hound)?;
    for n in 0..audio.len() {
        for c in audio.channels() {
            match encoding {
                SampleEncoding::Pcm16 => {
                    let q = (c[n] * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    writer.write_sample(q).map_err(map_hound)?;
                }
                SampleEncoding::Float32 => writer.write_sample(c[n] as f32).map_err(map_hound)?,
            }
        }
    }
    writer.finalize().map_err(map_hound)
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Polyphase rational resampler `up / down` with a Kaiser-windowed sinc
/// anti-alias prototype. The prototype cutoff sits at 0.45 x the lower of
/// the two rates, with the stopband starting at that rate's Nyquist.
#[derive(Debug, Clone)]
pub struct Resampler {
    up: usize,
    down: usize,
    taps: Vec<f64>,
}

const RESAMPLER_ATTEN_DB: f64 = 70.0;

impl Resampler {
    pub fn new(source_rate: u32, target_rate: u32) -> Result<Self> {
        if target_rate == 0 || source_rate == 0 {
            return Err(Error::Argument("sample rates must be positive".into()));
        }
        let g = gcd(source_rate as u64, target_rate as u64);
        let up = (target_rate as u64 / g) as usize;
        let down = (source_rate as u64 / g) as usize;
        let upsampled = source_rate as f64 * up as f64;
        let lower = source_rate.min(target_rate) as f64;
        let cutoff = 0.45 * lower;
        let transition = 2.0 * (lower / 2.0 - cutoff);
        let dw = 2.0 * std::f64::consts::PI * transition / upsampled;
        let mut n = ((RESAMPLER_ATTEN_DB - 8.0) / (2.285 * dw)).ceil() as usize + 1;
        if n.is_multiple_of(2) {
            n += 1;
        }
        let beta = kaiser_beta(RESAMPLER_ATTEN_DB);
        let centre = (n - 1) as f64 / 2.0;
        let fc = cutoff / upsampled;
        let taps = (0..n)
            .map(|k| {
                let t = k as f64 - centre;
                up as f64 * 2.0 * fc * sinc(2.0 * fc * t) * kaiser(t / (centre + 1.0), beta)
            })
            .collect();
        Ok(Self { up, down, taps })
    }

    pub fn ratio(&self) -> (usize, usize) {
        (self.up, self.down)
    }

    pub fn tap_count(&self) -> usize {
        self.taps.len()
    }

    /// Resample one channel. Output sample `m` is aligned with input time
    /// `m * down / up` (the prototype's group delay is compensated).
    pub fn process(&self, x: &[f64]) -> Vec<f64> {
        let (up, down) = (self.up, self.down);
        let out_len = (x.len() * up).div_ceil(down);
        let delay = (self.taps.len() - 1) / 2;
        let n_taps = self.taps.len();
        let mut y = Vec::with_capacity(out_len);
        for m in 0..out_len {
            let t = m * down + delay;
            let mut acc = 0.0;
            let mut k = t % up;
            while k < n_taps && k <= t {
                let idx = (t - k) / up;
                if idx < x.len() {
                    acc += self.taps[k] * x[idx];
                }
                k += up;
            }
            y.push(acc);
        }
        y
    }
}

/// Anti-aliased sample-rate reduction to `target_rate`.
pub fn decimate(audio: &MultichannelAudio, target_rate: u32) -> Result<MultichannelAudio> {
    if target_rate == 0 {
        return Err(Error::Argument("target rate must be positive".into()));
    }
    if target_rate > audio.sample_rate() {
        return Err(Error::Argument(format!(
            "target rate {target_rate} exceeds source rate {}",
            audio.sample_rate()
        )));
    }
    if target_rate == audio.sample_rate() {
        return Ok(audio.clone());
    }
    let rs = Resampler::new(audio.sample_rate(), target_rate)?;
    let channels = audio.channels().iter().map(|c| rs.process(c)).collect();
    MultichannelAudio::new(channels, target_rate)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FramerConfig {
    pub frame_length_s: f64,
    pub hop_length_s: f64,
}

impl Default for FramerConfig {
    fn default() -> Self {
        Self {
            frame_length_s: 2.0,
            hop_length_s: 2.0,
        }
    }
}

impl FramerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.hop_length_s > 0.0 && self.hop_length_s <= self.frame_length_s) {
            return Err(Error::Config(format!(
                "need 0 < hop ({}) <= frame length ({})",
                self.hop_length_s, self.frame_length_s
            )));
        }
        Ok(())
    }

    pub fn frame_samples(&self, sample_rate: u32) -> usize {
        (self.frame_length_s * sample_rate as f64).round() as usize
    }

    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        (self.hop_length_s * sample_rate as f64).round() as usize
    }

    /// Start offsets of every complete frame in a signal of `len` samples.
    pub fn frame_starts(&self, len: usize, sample_rate: u32) -> Vec<usize> {
        let flen = self.frame_samples(sample_rate);
        let hop = self.hop_samples(sample_rate).max(1);
        if flen == 0 || len < flen {
            return Vec::new();
        }
        (0..=(len - flen) / hop).map(|i| i * hop).collect()
    }
}

/// Cut `audio` into complete frames; a trailing remainder is dropped.
pub fn frame_signal(
    audio: &MultichannelAudio,
    cfg: &FramerConfig,
) -> Result<Vec<MultichannelAudio>> {
    cfg.validate()?;
    let flen = cfg.frame_samples(audio.sample_rate());
    let starts = cfg.frame_starts(audio.len(), audio.sample_rate());
    if starts.is_empty() {
        return Err(Error::EmptyResult(format!(
            "{:.3} s of audio is shorter than one {:.3} s frame",
            audio.duration_s(),
            cfg.frame_length_s
        )));
    }
    Ok(starts.into_iter().map(|s| audio.slice(s, flen)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn tone(freq: f64, fs: u32, len: usize) -> Vec<f64> {
        (0..len)
            .map(|n| 0.5 * (2.0 * PI * freq * n as f64 / fs as f64).sin())
            .collect()
    }

    #[test]
    fn rejects_ragged_and_non_finite() {
        assert!(MultichannelAudio::new(vec![vec![0.0; 3], vec![0.0; 2]], 100).is_err());
        assert!(MultichannelAudio::new(vec![vec![f64::NAN]], 100).is_err());
        assert!(MultichannelAudio::new(vec![vec![0.0]], 0).is_err());
    }

    #[test]
    fn pcm16_full_scale_normalization() {
        let audio = MultichannelAudio::new(vec![vec![32767.0 / 32768.0, -1.0]], 8000).unwrap();
        let mut buf = std::io::Cursor::new(Vec::new());
        write_wav_to(&mut buf, &audio, SampleEncoding::Pcm16).unwrap();
        let back = read_wav_from(std::io::Cursor::new(buf.into_inner())).unwrap();
        assert_eq!(back.channel(0)[0], 32767.0 / 32768.0);
        assert_eq!(back.channel(0)[1], -1.0);
    }

    #[test]
    fn truncated_file_is_format_error() {
        let audio = MultichannelAudio::new(vec![vec![0.25; 1000]; 4], 48_000).unwrap();
        let mut buf = std::io::Cursor::new(Vec::new());
        write_wav_to(&mut buf, &audio, SampleEncoding::Pcm16).unwrap();
        let mut bytes = buf.into_inner();
        bytes.truncate(bytes.len() - 100);
        let err = read_wav_from(std::io::Cursor::new(bytes)).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err:?}");
    }

    #[test]
    fn unsupported_bit_depth() {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 24,
            sample_format: hound::SampleFormat::Int,
        };
        let mut buf = std::io::Cursor::new(Vec::new());
        {
            let mut w = hound::WavWriter::new(&mut buf, spec).unwrap();
            w.write_sample(5i32).unwrap();
            w.finalize().unwrap();
        }
        let err = read_wav_from(std::io::Cursor::new(buf.into_inner())).unwrap_err();
        assert!(matches!(err, Error::Unsupported(_)), "{err:?}");
    }

    #[test]
    fn decimate_length_48k_to_20k() {
        let audio = MultichannelAudio::new(vec![vec![0.0; 480_000]; 2], 48_000).unwrap();
        let out = decimate(&audio, 20_000).unwrap();
        assert_eq!(out.len(), 200_000);
        assert_eq!(out.sample_rate(), 20_000);
        let rs = Resampler::new(48_000, 20_000).unwrap();
        assert_eq!(rs.ratio(), (5, 12));
    }

    #[test]
    fn decimate_rejects_bad_targets() {
        let audio = MultichannelAudio::new(vec![vec![0.0; 100]], 48_000).unwrap();
        assert!(matches!(decimate(&audio, 0), Err(Error::Argument(_))));
        assert!(matches!(decimate(&audio, 96_000), Err(Error::Argument(_))));
    }

    #[test]
    fn decimation_preserves_alignment() {
        // a 1 kHz tone must stay in phase with the ideal resampled tone
        let x = tone(1000.0, 48_000, 48_000);
        let y = Resampler::new(48_000, 20_000).unwrap().process(&x);
        let ideal = tone(1000.0, 20_000, y.len());
        for n in 1000..19_000 {
            assert!(
                (y[n] - ideal[n]).abs() < 2e-3,
                "n={n}: {} vs {}",
                y[n],
                ideal[n]
            );
        }
    }

    #[test]
    fn framing_counts() {
        let cfg = FramerConfig::default();
        let a = MultichannelAudio::new(vec![vec![0.0; 200_000]], 20_000).unwrap();
        let frames = frame_signal(&a, &cfg).unwrap();
        assert_eq!(frames.len(), 5);
        assert!(frames.iter().all(|f| f.len() == 40_000));

        let b = MultichannelAudio::new(vec![vec![0.0; 100_000]], 20_000).unwrap();
        assert_eq!(frame_signal(&b, &cfg).unwrap().len(), 2);

        let c = MultichannelAudio::new(vec![vec![0.0; 30_000]], 20_000).unwrap();
        assert!(matches!(frame_signal(&c, &cfg), Err(Error::EmptyResult(_))));
    }

    #[test]
    fn framer_rejects_hop_longer_than_frame() {
        let cfg = FramerConfig {
            frame_length_s: 1.0,
            hop_length_s: 1.5,
        };
        assert!(cfg.validate().is_err());
        let cfg = FramerConfig {
            frame_length_s: 1.0,
            hop_length_s: 0.0,
        };
        assert!(cfg.validate().is_err());
    }
}
