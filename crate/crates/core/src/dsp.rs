//! Filter design and the small signal-processing primitives shared by the
//! beamformer, the feature extractor and the scene renderer.
//!
//! IIR filters are Butterworth designs realized as cascades of second-order
//! sections via the bilinear transform with frequency prewarping.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};

/// One second-order section, transposed direct form II, `a0` normalized to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Biquad {
    fn response(&self, omega: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -omega);
        let z2 = z1 * z1;
        (self.b0 + z1 * self.b1 + z2 * self.b2) / (1.0 + z1 * self.a1 + z2 * self.a2)
    }

    fn scale(&mut self, g: f64) {
        self.b0 *= g;
        self.b1 *= g;
        self.b2 *= g;
    }

    #[inline]
    fn run(&self, data: &mut [f64]) {
        let (b0, b1, b2, a1, a2) = (self.b0, self.b1, self.b2, self.a1, self.a2);
        let (mut s1, mut s2) = (0.0, 0.0);
        for v in data.iter_mut() {
            let x = *v;
            let y = b0 * x + s1;
            s1 = b1 * x - a1 * y + s2;
            s2 = b2 * x - a2 * y;
            *v = y;
        }
    }
}

/// Cascade of second-order sections. Every call to [`Sos::filter`] starts
/// from zero state.
#[derive(Debug, Clone, PartialEq)]
pub struct Sos {
    sections: Vec<Biquad>,
}

impl Sos {
    pub fn new(sections: Vec<Biquad>) -> Self {
        Self { sections }
    }

    pub fn sections(&self) -> &[Biquad] {
        &self.sections
    }

    pub fn filter(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        self.filter_in_place(&mut y);
        y
    }

    pub fn filter_in_place(&self, data: &mut [f64]) {
        for s in &self.sections {
            s.run(data);
        }
    }

    /// Complex frequency response at `freq_hz` for sample rate `fs`.
    pub fn response(&self, freq_hz: f64, fs: f64) -> Complex64 {
        let omega = 2.0 * PI * freq_hz / fs;
        self.sections
            .iter()
            .fold(Complex64::new(1.0, 0.0), |acc, s| acc * s.response(omega))
    }

    pub fn magnitude(&self, freq_hz: f64, fs: f64) -> f64 {
        self.response(freq_hz, fs).norm()
    }
}

/// Normalized analog Butterworth lowpass poles of the given order.
fn prototype_poles(order: usize) -> Vec<Complex64> {
    let n = order as f64;
    (1..=order)
        .map(|k| Complex64::from_polar(1.0, PI * (2.0 * k as f64 + n - 1.0) / (2.0 * n)))
        .collect()
}

fn prewarp(freq_hz: f64, fs: f64) -> f64 {
    2.0 * fs * (PI * freq_hz / fs).tan()
}

fn bilinear(s: Complex64, fs: f64) -> Complex64 {
    (2.0 * fs + s) / (2.0 * fs - s)
}

#[derive(Clone, Copy)]
enum ZeroKind {
    Lowpass,
    Highpass,
    Bandpass,
}

/// Group digital poles into sections and attach the zeros of the given kind,
/// then scale every section to unit gain at `norm_omega`.
fn assemble(poles: Vec<Complex64>, kind: ZeroKind, norm_omega: f64) -> Sos {
    const IMAG_EPS: f64 = 1e-12;
    let mut pairs: Vec<(Complex64, Option<Complex64>)> = Vec::new();
    let mut reals: Vec<f64> = Vec::new();
    for p in poles {
        if p.im > IMAG_EPS {
            pairs.push((p, Some(p.conj())));
        } else if p.im.abs() <= IMAG_EPS {
            reals.push(p.re);
        }
    }
    reals.sort_by(|a, b| a.total_cmp(b));
    for chunk in reals.chunks(2) {
        let q = chunk.get(1).map(|&r| Complex64::new(r, 0.0));
        pairs.push((Complex64::new(chunk[0], 0.0), q));
    }

    let sections = pairs
        .into_iter()
        .map(|(p, q)| {
            let mut s = match q {
                Some(q) => {
                    let a1 = -(p + q).re;
                    let a2 = (p * q).re;
                    let (b0, b1, b2) = match kind {
                        ZeroKind::Lowpass => (1.0, 2.0, 1.0),
                        ZeroKind::Highpass => (1.0, -2.0, 1.0),
                        ZeroKind::Bandpass => (1.0, 0.0, -1.0),
                    };
                    Biquad { b0, b1, b2, a1, a2 }
                }
                None => {
                    let (b0, b1) = match kind {
                        ZeroKind::Lowpass => (1.0, 1.0),
                        _ => (1.0, -1.0),
                    };
                    Biquad {
                        b0,
                        b1,
                        b2: 0.0,
                        a1: -p.re,
                        a2: 0.0,
                    }
                }
            };
            let g = s.response(norm_omega).norm();
            s.scale(1.0 / g);
            s
        })
        .collect();
    Sos::new(sections)
}

fn check_edge(freq_hz: f64, fs: f64, what: &str) -> Result<()> {
    if !(freq_hz > 0.0 && freq_hz < fs / 2.0) || !freq_hz.is_finite() {
        return Err(Error::Config(format!(
            "{what} {freq_hz} Hz must lie strictly inside (0, {}) Hz",
            fs / 2.0
        )));
    }
    Ok(())
}

/// Butterworth lowpass of the given order with -3 dB point at `cutoff_hz`.
pub fn butterworth_lowpass(order: usize, cutoff_hz: f64, fs: f64) -> Result<Sos> {
    if order == 0 {
        return Err(Error::Config("filter order must be positive".into()));
    }
    check_edge(cutoff_hz, fs, "lowpass cutoff")?;
    let wc = prewarp(cutoff_hz, fs);
    let poles = prototype_poles(order)
        .into_iter()
        .map(|p| bilinear(p * wc, fs))
        .collect();
    Ok(assemble(poles, ZeroKind::Lowpass, 0.0))
}

/// Butterworth highpass of the given order with -3 dB point at `cutoff_hz`.
pub fn butterworth_highpass(order: usize, cutoff_hz: f64, fs: f64) -> Result<Sos> {
    if order == 0 {
        return Err(Error::Config("filter order must be positive".into()));
    }
    check_edge(cutoff_hz, fs, "highpass cutoff")?;
    let wc = prewarp(cutoff_hz, fs);
    let poles = prototype_poles(order)
        .into_iter()
        .map(|p| bilinear(wc / p, fs))
        .collect();
    Ok(assemble(poles, ZeroKind::Highpass, PI))
}

/// Butterworth bandpass. `order` is the total filter order and must be even;
/// the lowpass prototype has order `order / 2`.
pub fn butterworth_bandpass(order: usize, low_hz: f64, high_hz: f64, fs: f64) -> Result<Sos> {
    if order < 2 || !order.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "bandpass order must be even and >= 2, got {order}"
        )));
    }
    check_edge(low_hz, fs, "bandpass low edge")?;
    check_edge(high_hz, fs, "bandpass high edge")?;
    if low_hz >= high_hz {
        return Err(Error::Config(format!(
            "bandpass edges must satisfy low < high, got ({low_hz}, {high_hz})"
        )));
    }
    let w1 = prewarp(low_hz, fs);
    let w2 = prewarp(high_hz, fs);
    let w0 = (w1 * w2).sqrt();
    let bw = w2 - w1;
    let mut poles = Vec::with_capacity(order);
    for p in prototype_poles(order / 2) {
        let pb = p * bw;
        let disc = (pb * pb - 4.0 * w0 * w0).sqrt();
        poles.push(bilinear((pb + disc) / 2.0, fs));
        poles.push(bilinear((pb - disc) / 2.0, fs));
    }
    let omega0 = 2.0 * (w0 / (2.0 * fs)).atan();
    Ok(assemble(poles, ZeroKind::Bandpass, omega0))
}

/// Zeroth-order modified Bessel function of the first kind.
pub fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= half / k as f64;
        let t2 = term * term;
        sum += t2;
        if t2 < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Kaiser shape parameter for a target stopband attenuation in dB.
pub fn kaiser_beta(atten_db: f64) -> f64 {
    if atten_db > 50.0 {
        0.1102 * (atten_db - 8.7)
    } else if atten_db >= 21.0 {
        0.5842 * (atten_db - 21.0).powf(0.4) + 0.07886 * (atten_db - 21.0)
    } else {
        0.0
    }
}

/// Kaiser window evaluated at normalized position `t` in [-1, 1].
pub fn kaiser(t: f64, beta: f64) -> f64 {
    if t.abs() > 1.0 {
        return 0.0;
    }
    bessel_i0(beta * (1.0 - t * t).sqrt()) / bessel_i0(beta)
}

pub fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

pub const FRACTIONAL_DELAY_TAPS: usize = 31;
const FRACTIONAL_DELAY_HALF: isize = (FRACTIONAL_DELAY_TAPS as isize - 1) / 2;
const FRACTIONAL_DELAY_BETA: f64 = 5.65;

/// Windowed-sinc taps `h[m]`, `m = -15..=15`, approximating a delay of
/// `frac` samples.
pub fn fractional_delay_taps(frac: f64) -> [f64; FRACTIONAL_DELAY_TAPS] {
    let mut h = [0.0; FRACTIONAL_DELAY_TAPS];
    let half = FRACTIONAL_DELAY_HALF as f64 + 1.0;
    for (i, tap) in h.iter_mut().enumerate() {
        let m = i as f64 - FRACTIONAL_DELAY_HALF as f64;
        let t = m - frac;
        *tap = sinc(t) * kaiser(t / half, FRACTIONAL_DELAY_BETA);
    }
    let sum: f64 = h.iter().sum();
    for tap in &mut h {
        *tap /= sum;
    }
    h
}

/// Delay `x` by `delay_samples` (may be negative or fractional). The output
/// has the input's length; samples outside the input are treated as zero.
pub fn delay_signal(x: &[f64], delay_samples: f64) -> Vec<f64> {
    let whole = delay_samples.floor();
    let frac = delay_samples - whole;
    let whole = whole as isize;
    let len = x.len() as isize;
    let mut y = vec![0.0; x.len()];
    let taps = if frac.abs() < 1e-12 {
        None
    } else {
        Some(fractional_delay_taps(frac))
    };
    // y[n] = sum_j h[j] x[n - whole - (j - half)], accumulated tap by tap
    let offsets: Vec<(isize, f64)> = match &taps {
        None => vec![(whole, 1.0)],
        Some(h) => h
            .iter()
            .enumerate()
            .map(|(j, &c)| (whole + j as isize - FRACTIONAL_DELAY_HALF, c))
            .collect(),
    };
    // blocked so each output block stays in cache across all taps
    const BLOCK: isize = 2048;
    let mut start = 0;
    while start < len {
        let end = (start + BLOCK).min(len);
        for &(o, c) in &offsets {
            let lo = o.clamp(start, end);
            let hi = (len + o).clamp(start, end);
            if lo >= hi {
                continue;
            }
            let src = &x[(lo - o) as usize..(hi - o) as usize];
            let dst = &mut y[lo as usize..hi as usize];
            if taps.is_none() {
                dst.copy_from_slice(src);
            } else {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += c * s;
                }
            }
        }
        start = end;
    }
    y
}

/// Four signals filtered side by side through per-signal copies of the same
/// cascade. Each lane gives the same result as [`Sos::filter`].
#[derive(Debug, Clone)]
pub struct Lanes4 {
    sections: Vec<Biquad>,
    state: Vec<[[f64; 4]; 2]>,
}

impl Lanes4 {
    pub fn new(sos: &Sos) -> Self {
        Self {
            sections: sos.sections.clone(),
            state: vec![[[0.0; 4]; 2]; sos.sections.len()],
        }
    }

    pub fn reset(&mut self) {
        self.state.iter_mut().for_each(|s| *s = [[0.0; 4]; 2]);
    }

    #[inline(always)]
    pub fn step(&mut self, mut v: [f64; 4]) -> [f64; 4] {
        for (sec, st) in self.sections.iter().zip(self.state.iter_mut()) {
            let [s1, s2] = st;
            for l in 0..4 {
                let x = v[l];
                let y = sec.b0 * x + s1[l];
                s1[l] = sec.b1 * x - sec.a1 * y + s2[l];
                s2[l] = sec.b2 * x - sec.a2 * y;
                v[l] = y;
            }
        }
        v
    }
}

/// [`Lanes4`] with the section count fixed at compile time so the filter
/// state can live in registers.
#[derive(Debug, Clone, Copy)]
pub struct Cascade4<const S: usize> {
    sections: [Biquad; S],
    s1: [[f64; 4]; S],
    s2: [[f64; 4]; S],
}

impl<const S: usize> Cascade4<S> {
    /// `None` when the cascade does not have exactly `S` sections.
    pub fn new(sos: &Sos) -> Option<Self> {
        let sections: [Biquad; S] = sos.sections.as_slice().try_into().ok()?;
        Some(Self {
            sections,
            s1: [[0.0; 4]; S],
            s2: [[0.0; 4]; S],
        })
    }

    #[inline(always)]
    #[allow(clippy::needless_range_loop)]
    pub fn step(&mut self, mut v: [f64; 4]) -> [f64; 4] {
        for k in 0..S {
            let sec = self.sections[k];
            for l in 0..4 {
                let x = v[l];
                let y = sec.b0 * x + self.s1[k][l];
                self.s1[k][l] = sec.b1 * x - sec.a1 * y + self.s2[k][l];
                self.s2[k][l] = sec.b2 * x - sec.a2 * y;
                v[l] = y;
            }
        }
        v
    }
}

pub fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

pub fn mean_square(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn analog_bandpass_mag(f: f64, lo: f64, hi: f64, n: i32) -> f64 {
        // magnitude of the digital design equals the analog prototype at the
        // prewarped frequency
        let fs = 20_000.0;
        let w = prewarp(f, fs);
        let w1 = prewarp(lo, fs);
        let w2 = prewarp(hi, fs);
        let omega = (w * w - w1 * w2) / (w * (w2 - w1));
        1.0 / (1.0 + omega.powi(2 * n)).sqrt()
    }

    #[test]
    fn bandpass_matches_analog_prototype() {
        let sos = butterworth_bandpass(4, 800.0, 1600.0, 20_000.0).unwrap();
        assert_eq!(sos.sections().len(), 2);
        for f in [100.0, 500.0, 800.0, 1131.0, 1600.0, 3000.0, 9000.0] {
            let got = sos.magnitude(f, 20_000.0);
            let want = analog_bandpass_mag(f, 800.0, 1600.0, 2);
            assert!((got - want).abs() < 1e-9, "f={f}: {got} vs {want}");
        }
        assert!((sos.magnitude(800.0, 20_000.0) - 0.5f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn lowpass_and_highpass_edges() {
        let lp = butterworth_lowpass(4, 400.0, 20_000.0).unwrap();
        assert!((lp.magnitude(0.0, 20_000.0) - 1.0).abs() < 1e-12);
        assert!((lp.magnitude(400.0, 20_000.0) - 0.5f64.sqrt()).abs() < 1e-9);
        let hp = butterworth_highpass(3, 500.0, 20_000.0).unwrap();
        assert!((hp.magnitude(10_000.0, 20_000.0) - 1.0).abs() < 1e-12);
        assert!((hp.magnitude(500.0, 20_000.0) - 0.5f64.sqrt()).abs() < 1e-9);
        assert!(hp.magnitude(0.0, 20_000.0) < 1e-12);
    }

    #[test]
    fn rejects_bad_edges() {
        assert!(butterworth_bandpass(4, 900.0, 800.0, 20_000.0).is_err());
        assert!(butterworth_bandpass(3, 100.0, 800.0, 20_000.0).is_err());
        assert!(butterworth_bandpass(4, 100.0, 10_000.0, 20_000.0).is_err());
        assert!(butterworth_lowpass(2, 0.0, 20_000.0).is_err());
    }

    #[test]
    fn impulse_response_matches_frequency_response() {
        let sos = butterworth_bandpass(4, 2.0, 8.0, 1000.0).unwrap();
        let mut imp = vec![0.0; 8192];
        imp[0] = 1.0;
        let h = sos.filter(&imp);
        let f = 4.0;
        let w = 2.0 * PI * f / 1000.0;
        let dft: Complex64 = h
            .iter()
            .enumerate()
            .map(|(n, v)| Complex64::from_polar(*v, -w * n as f64))
            .sum();
        assert!((dft - sos.response(f, 1000.0)).norm() < 1e-6);
    }

    #[test]
    fn integer_delay_is_exact_shift() {
        let x: Vec<f64> = (0..20).map(|v| v as f64).collect();
        let y = delay_signal(&x, 3.0);
        assert_eq!(&y[..3], &[0.0, 0.0, 0.0]);
        assert_eq!(&y[3..], &x[..17]);
        let z = delay_signal(&x, -2.0);
        assert_eq!(&z[..18], &x[2..]);
    }

    #[test]
    fn fractional_delay_of_bandlimited_tone() {
        let fs = 20_000.0;
        let f = 1500.0;
        let d = 0.37;
        let x: Vec<f64> = (0..2000)
            .map(|n| (2.0 * PI * f * n as f64 / fs).sin())
            .collect();
        let y = delay_signal(&x, d + 4.0);
        for (n, got) in y.iter().enumerate().take(1900).skip(100) {
            let want = (2.0 * PI * f * (n as f64 - d - 4.0) / fs).sin();
            assert!((got - want).abs() < 1e-3, "n={n}");
        }
    }

    #[test]
    fn bessel_i0_known_values() {
        assert!((bessel_i0(0.0) - 1.0).abs() < 1e-15);
        assert!((bessel_i0(1.0) - 1.266_065_877_752_008_4).abs() < 1e-12);
        assert!((bessel_i0(5.0) - 27.239_871_823_604_44).abs() < 1e-9);
    }
}
