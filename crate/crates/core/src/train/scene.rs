//! Synthetic speech-like signals and noise scenes.
//!
//! The speech proxy is a harmonic complex with a drifting fundamental, three
//! moving formant resonances shaping the harmonic amplitudes, and a syllable
//! on/off envelope. Babble is a sum of independent speech proxies.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::audio::{mix_at_snr, AudioBuffer, Mixture};

const SPEECH_RMS: f64 = 0.1;
const MAX_HARMONIC_HZ: f64 = 5000.0;
const BABBLE_TALKERS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    White,
    Pink,
    Babble,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    /// Range the per-talker fundamental is drawn from, Hz.
    pub f0_range_hz: (f64, f64),
    /// Rate range of the formant movements, Hz.
    pub formant_rate_hz: (f64, f64),
    /// Syllables per second range of the on/off envelope.
    pub syllable_rate_hz: (f64, f64),
    pub noise: NoiseKind,
    pub snr_db: (f64, f64),
    pub duration_s: f64,
    pub sample_rate: u32,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            f0_range_hz: (90.0, 240.0),
            formant_rate_hz: (0.5, 3.0),
            syllable_rate_hz: (3.0, 6.0),
            noise: NoiseKind::Pink,
            snr_db: (0.0, 0.0),
            duration_s: 1.5,
            sample_rate: 22050,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        let (lo, hi) = self.snr_db;
        if !(-12.0..=12.0).contains(&lo) || !(-12.0..=12.0).contains(&hi) || lo > hi {
            return bad(format!("snr range ({lo}, {hi}) must lie within [-12, 12] dB"));
        }
        if self.duration_s.is_nan() || self.duration_s < 1.0 {
            return bad(format!("duration {} s is below 1 s", self.duration_s));
        }
        if self.sample_rate < 8000 {
            return bad(format!("sample rate {} Hz too low", self.sample_rate));
        }
        for (name, (a, b)) in [
            ("f0_range_hz", self.f0_range_hz),
            ("formant_rate_hz", self.formant_rate_hz),
            ("syllable_rate_hz", self.syllable_rate_hz),
        ] {
            if !(a > 0.0 && a <= b) {
                return bad(format!("{name} ({a}, {b}) must be a positive ascending range"));
            }
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        (self.duration_s * self.sample_rate as f64).round() as usize
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Spectral envelope of three resonances, evaluated at `freq`.
fn formant_gain(freq: f64, formants: &[(f64, f64); 3]) -> f64 {
    let tilt = 1.0 / (1.0 + freq / 600.0);
    let res: f64 = formants
        .iter()
        .map(|&(fc, bw)| 1.0 / (1.0 + ((freq - fc) / bw).powi(2)))
        .sum();
    tilt * (0.08 + res)
}

/// One talker of the speech proxy, normalized to a fixed RMS.
pub fn speech_proxy<R: Rng + ?Sized>(cfg: &SceneConfig, n: usize, rng: &mut R) -> Vec<f64> {
    let sr = cfg.sample_rate as f64;
    let f0_base = uniform(rng, cfg.f0_range_hz);
    let f0_rate = rng.random_range(0.3..1.2);
    let f0_phase = rng.random_range(0.0..2.0 * PI);
    let fm_rate = uniform(rng, cfg.formant_rate_hz);
    let fm_phase: [f64; 3] = [
        rng.random_range(0.0..2.0 * PI),
        rng.random_range(0.0..2.0 * PI),
        rng.random_range(0.0..2.0 * PI),
    ];
    let centers = [
        rng.random_range(350.0..850.0),
        rng.random_range(1000.0..2200.0),
        rng.random_range(2400.0..3300.0),
    ];
    let bandwidths = [90.0, 140.0, 200.0];

    // syllable envelope: raised-cosine bursts separated by short gaps
    let mut envelope = vec![0.0f64; n];
    let mut pos = (rng.random_range(0.0..0.08) * sr) as usize;
    while pos < n {
        let rate = uniform(rng, cfg.syllable_rate_hz);
        let period = sr / rate;
        let on = (period * rng.random_range(0.55..0.85)) as usize;
        let level = rng.random_range(0.6..1.0);
        for i in 0..on.min(n - pos) {
            let w = (PI * i as f64 / on as f64).sin();
            envelope[pos + i] = level * w.sqrt();
        }
        pos += period as usize;
    }

    let max_h = (MAX_HARMONIC_HZ.min(0.45 * sr) / (f0_base * 0.85)).floor() as usize;
    let mut phases: Vec<f64> = (0..max_h).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let mut out = vec![0.0f64; n];
    let mut formants = [(0.0, 0.0); 3];
    for (i, o) in out.iter_mut().enumerate() {
        let t = i as f64 / sr;
        let f0 = f0_base * (1.0 + 0.12 * (2.0 * PI * f0_rate * t + f0_phase).sin());
        for k in 0..3 {
            let drift = 0.15 * (2.0 * PI * fm_rate * (k as f64 + 1.0) * 0.7 * t + fm_phase[k]).sin();
            formants[k] = (centers[k] * (1.0 + drift), bandwidths[k]);
        }
        let mut s = 0.0;
        for (h, ph) in phases.iter_mut().enumerate() {
            let f = f0 * (h + 1) as f64;
            if f >= MAX_HARMONIC_HZ.min(0.45 * sr) {
                break;
            }
            *ph += 2.0 * PI * f / sr;
            if *ph > 2.0 * PI {
                *ph -= 2.0 * PI;
            }
            s += formant_gain(f, &formants) * ph.sin();
        }
        *o = s * envelope[i];
    }
    normalize_rms(&mut out, SPEECH_RMS);
    out
}

fn normalize_rms(x: &mut [f64], target: f64) {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        let g = target / rms;
        x.iter_mut().for_each(|v| *v *= g);
    }
}

/// Gaussian white noise, unit variance.
pub fn white_noise<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Pink (1/f) noise from Paul Kellet's refined filter on white noise.
pub fn pink_noise<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut b = [0.0f64; 7];
    let mut out: Vec<f64> = (0..n)
        .map(|_| {
            let w: f64 = StandardNormal.sample(rng);
            b[0] = 0.99886 * b[0] + w * 0.0555179;
            b[1] = 0.99332 * b[1] + w * 0.0750759;
            b[2] = 0.96900 * b[2] + w * 0.1538520;
            b[3] = 0.86650 * b[3] + w * 0.3104856;
            b[4] = 0.55000 * b[4] + w * 0.5329522;
            b[5] = -0.7616 * b[5] - w * 0.0168980;
            let y = b.iter().sum::<f64>() + w * 0.5362;
            b[6] = w * 0.115926;
            y
        })
        .collect();
    normalize_rms(&mut out, 1.0);
    out
}

/// Sum of detuned speech proxies.
pub fn babble_noise<R: Rng + ?Sized>(cfg: &SceneConfig, n: usize, rng: &mut R) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for _ in 0..BABBLE_TALKERS {
        let talker = speech_proxy(cfg, n, rng);
        for (o, v) in out.iter_mut().zip(talker) {
            *o += v;
        }
    }
    normalize_rms(&mut out, 1.0);
    out
}

fn to_buffer(x: Vec<f64>, sr: u32) -> AudioBuffer {
    AudioBuffer {
        samples: x.into_iter().map(|v| v as f32).collect(),
        sample_rate: sr,
    }
}

/// One mixture; deterministic given the generator state.
pub fn synth_scene<R: Rng + ?Sized>(cfg: &SceneConfig, rng: &mut R) -> Result<Mixture, TrainError> {
    cfg.validate()?;
    let n = cfg.n_samples();
    let clean = speech_proxy(cfg, n, rng);
    let extra = cfg.sample_rate as usize / 4;
    let noise = match cfg.noise {
        NoiseKind::White => white_noise(n + extra, rng),
        NoiseKind::Pink => pink_noise(n + extra, rng),
        NoiseKind::Babble => babble_noise(cfg, n + extra, rng),
    };
    let snr = uniform(rng, cfg.snr_db);
    let clean = to_buffer(clean, cfg.sample_rate);
    let noise = to_buffer(noise, cfg.sample_rate);
    Ok(mix_at_snr(&clean, &noise, snr, rng)?)
}

/// `count` scenes, scene `i` seeded from `(seed, i)`.
pub fn synth_scenes(cfg: &SceneConfig, count: usize, seed: u64) -> Result<Vec<Mixture>, TrainError> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64));
            synth_scene(cfg, &mut rng)
        })
        .collect()
}
