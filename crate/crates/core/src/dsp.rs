//! Short-time Fourier analysis and weighted overlap-add synthesis.

use std::sync::Arc;

use num_complex::Complex;
use rustfft::num_traits::{Float, FromPrimitive};
use rustfft::{Fft, FftNum, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::AudioBuffer;

/// Floor applied to the summed squared-window envelope during synthesis.
pub const WOLA_EPS: f64 = 1e-8;

/// Smallest steady-state squared-window sum accepted at config construction.
const MIN_ENVELOPE: f64 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum DspError {
    #[error("invalid STFT config: {0}")]
    InvalidConfig(String),
    #[error("input has {got} samples, need at least one window of {need}")]
    TooShort { got: usize, need: usize },
    #[error("sample rate {got} Hz does not match config {want} Hz")]
    RateMismatch { got: u32, want: u32 },
    #[error("frame {frame} has {got} bins, expected {want}")]
    BinMismatch { frame: usize, got: usize, want: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub sample_rate: u32,
    pub window_len: usize,
    pub hop: usize,
    pub fft_size: usize,
}

impl Default for StftConfig {
    /// 22050 Hz with a 550-sample (24.94 ms) window, 132-sample (5.99 ms) hop
    /// and a 1024-point FFT.
    fn default() -> Self {
        Self {
            sample_rate: 22050,
            window_len: 550,
            hop: 132,
            fft_size: 1024,
        }
    }
}

impl StftConfig {
    pub fn new(
        sample_rate: u32,
        window_len: usize,
        hop: usize,
        fft_size: usize,
    ) -> Result<Self, DspError> {
        let cfg = Self {
            sample_rate,
            window_len,
            hop,
            fft_size,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Rounds millisecond durations to the nearest even sample count and picks
    /// the smallest power-of-two FFT that holds the window.
    pub fn from_millis(sample_rate: u32, window_ms: f64, hop_ms: f64) -> Result<Self, DspError> {
        let even = |ms: f64| ((ms * sample_rate as f64 / 1000.0 / 2.0).round() as usize) * 2;
        let window_len = even(window_ms);
        let hop = even(hop_ms);
        Self::new(sample_rate, window_len, hop, window_len.max(1).next_power_of_two())
    }

    pub fn validate(&self) -> Result<(), DspError> {
        let bad = |m: String| Err(DspError::InvalidConfig(m));
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive".into());
        }
        if self.hop == 0 || self.hop > self.window_len || self.window_len > self.fft_size {
            return bad(format!(
                "need 0 < hop ({}) <= window_len ({}) <= fft_size ({})",
                self.hop, self.window_len, self.fft_size
            ));
        }
        if !self.fft_size.is_power_of_two() {
            return bad(format!("fft_size {} is not a power of two", self.fft_size));
        }
        let env = self.min_envelope();
        if env < MIN_ENVELOPE {
            return bad(format!(
                "squared-window overlap sum drops to {env:.2e}; hop {} too large for window {}",
                self.hop, self.window_len
            ));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn window_ms(&self) -> f64 {
        self.window_len as f64 * 1000.0 / self.sample_rate as f64
    }

    pub fn hop_ms(&self) -> f64 {
        self.hop as f64 * 1000.0 / self.sample_rate as f64
    }

    pub fn window<T: Float + FromPrimitive>(&self) -> Vec<T> {
        hann_periodic(self.window_len)
    }

    /// Number of full frames that fit into `len` samples.
    pub fn n_frames(&self, len: usize) -> usize {
        if len < self.window_len {
            0
        } else {
            (len - self.window_len) / self.hop + 1
        }
    }

    /// Samples of a `len`-sample synthesis that every overlapping frame
    /// covers; outside it the window envelope tapers towards zero and masked
    /// frames are amplified by the normalization.
    pub fn steady_span(&self, len: usize) -> std::ops::Range<usize> {
        let edge = self.window_len - self.hop;
        if len <= 2 * edge {
            return 0..0;
        }
        edge..len - edge
    }

    /// Minimum over one hop of the steady-state sum of squared shifted windows.
    pub fn min_envelope(&self) -> f64 {
        let w: Vec<f64> = hann_periodic(self.window_len);
        (0..self.hop)
            .map(|n| {
                let mut s = 0.0;
                let mut i = n;
                while i < self.window_len {
                    s += w[i] * w[i];
                    i += self.hop;
                }
                s
            })
            .fold(f64::INFINITY, f64::min)
    }
}

/// Periodic (DFT-even) Hann window.
pub fn hann_periodic<T: Float + FromPrimitive>(len: usize) -> Vec<T> {
    (0..len)
        .map(|i| {
            let phase = 2.0 * std::f64::consts::PI * i as f64 / len as f64;
            T::from_f64(0.5 - 0.5 * phase.cos()).unwrap()
        })
        .collect()
}

/// Real-input FFT of a fixed size returning the one-sided spectrum.
#[derive(Clone)]
pub struct FrameFft<T: FftNum> {
    size: usize,
    forward: Arc<dyn Fft<T>>,
    inverse: Arc<dyn Fft<T>>,
}

impl<T: FftNum + Float> FrameFft<T> {
    pub fn new(size: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            size,
            forward: planner.plan_fft_forward(size),
            inverse: planner.plan_fft_inverse(size),
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Zero-pads `frame` to the FFT size and returns `size / 2 + 1` bins.
    pub fn forward(&self, frame: &[T], out: &mut Vec<Complex<T>>) {
        let mut buf: Vec<Complex<T>> = vec![Complex::new(T::zero(), T::zero()); self.size];
        for (b, &x) in buf.iter_mut().zip(frame) {
            b.re = x;
        }
        self.forward.process(&mut buf);
        out.clear();
        out.extend_from_slice(&buf[..self.size / 2 + 1]);
    }

    /// Inverse of [`FrameFft::forward`] with `1/N` scaling; returns `size` samples.
    pub fn inverse(&self, bins: &[Complex<T>], out: &mut Vec<T>) {
        let n = self.size;
        let mut buf: Vec<Complex<T>> = vec![Complex::new(T::zero(), T::zero()); n];
        buf[..bins.len()].copy_from_slice(bins);
        for k in 1..n / 2 {
            buf[n - k] = bins[k].conj();
        }
        self.inverse.process(&mut buf);
        let scale = T::one() / T::from(n).unwrap();
        out.clear();
        out.extend(buf.iter().map(|c| c.re * scale));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frames: Vec<Vec<Complex<f64>>>,
    pub config: StftConfig,
}

impl Spectrogram {
    pub fn zeros(n_frames: usize, config: StftConfig) -> Self {
        Self {
            frames: vec![vec![Complex::new(0.0, 0.0); config.n_bins()]; n_frames],
            config,
        }
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn n_bins(&self) -> usize {
        self.config.n_bins()
    }

    fn check(&self) -> Result<(), DspError> {
        let want = self.config.n_bins();
        for (i, f) in self.frames.iter().enumerate() {
            if f.len() != want {
                return Err(DspError::BinMismatch {
                    frame: i,
                    got: f.len(),
                    want,
                });
            }
        }
        Ok(())
    }
}

/// Frame `t` covers samples `[t * hop, t * hop + window_len)`.
pub fn stft(buf: &AudioBuffer, cfg: &StftConfig) -> Result<Spectrogram, DspError> {
    cfg.validate()?;
    if buf.sample_rate != cfg.sample_rate {
        return Err(DspError::RateMismatch {
            got: buf.sample_rate,
            want: cfg.sample_rate,
        });
    }
    if buf.len() < cfg.window_len {
        return Err(DspError::TooShort {
            got: buf.len(),
            need: cfg.window_len,
        });
    }
    let window: Vec<f64> = cfg.window();
    let fft = FrameFft::<f64>::new(cfg.fft_size);
    let n_frames = cfg.n_frames(buf.len());
    let mut seg = vec![0.0; cfg.window_len];
    let mut frames = Vec::with_capacity(n_frames);
    for t in 0..n_frames {
        let start = t * cfg.hop;
        for (i, s) in seg.iter_mut().enumerate() {
            *s = buf.samples[start + i] as f64 * window[i];
        }
        let mut bins = Vec::new();
        fft.forward(&seg, &mut bins);
        frames.push(bins);
    }
    Ok(Spectrogram {
        frames,
        config: *cfg,
    })
}

/// Weighted overlap-add with the analysis window, normalized by the summed
/// squared-window envelope (floored at [`WOLA_EPS`]).
pub fn istft(spec: &Spectrogram) -> Result<AudioBuffer, DspError> {
    let cfg = &spec.config;
    cfg.validate()?;
    spec.check()?;
    let n = spec.n_frames();
    if n == 0 {
        return Ok(AudioBuffer::silence(0, cfg.sample_rate));
    }
    let len = (n - 1) * cfg.hop + cfg.window_len;
    let window: Vec<f64> = cfg.window();
    let fft = FrameFft::<f64>::new(cfg.fft_size);
    let mut acc = vec![0.0f64; len];
    let mut env = vec![0.0f64; len];
    let mut time = Vec::new();
    for (t, frame) in spec.frames.iter().enumerate() {
        fft.inverse(frame, &mut time);
        let start = t * cfg.hop;
        for i in 0..cfg.window_len {
            acc[start + i] += time[i] * window[i];
            env[start + i] += window[i] * window[i];
        }
    }
    let samples = acc
        .iter()
        .zip(&env)
        .map(|(&a, &e)| (a / e.max(WOLA_EPS)) as f32)
        .collect();
    Ok(AudioBuffer {
        samples,
        sample_rate: cfg.sample_rate,
    })
}

/// Energy of a one-sided spectrum frame, scaled so that it equals the
/// time-domain energy of the (windowed, zero-padded) frame.
pub fn frame_energy(bins: &[Complex<f64>], fft_size: usize) -> f64 {
    let half = fft_size / 2;
    let mut e = 0.0;
    for (k, b) in bins.iter().enumerate() {
        let w = if k == 0 || k == half { 1.0 } else { 2.0 };
        e += w * b.norm_sqr();
    }
    e / fft_size as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_durations() {
        let c = StftConfig::default();
        assert!((c.window_ms() - 24.943310657596371).abs() < 1e-9);
        assert!((c.hop_ms() - 5.986394557823129).abs() < 1e-9);
        assert_eq!(c.n_bins(), 513);
        let literal = StftConfig::from_millis(22000, 25.0, 6.0).unwrap();
        assert_eq!((literal.window_len, literal.hop, literal.fft_size), (550, 132, 1024));
    }

    #[test]
    fn invalid_configs() {
        assert!(StftConfig::new(22050, 550, 0, 1024).is_err());
        assert!(StftConfig::new(22050, 550, 600, 1024).is_err());
        assert!(StftConfig::new(22050, 550, 132, 1000).is_err());
        assert!(StftConfig::new(22050, 1100, 132, 1024).is_err());
        // hop == window leaves the periodic Hann envelope at zero
        assert!(StftConfig::new(22050, 512, 512, 512).is_err());
        assert!(StftConfig::new(22050, 512, 256, 512).is_ok());
    }

    #[test]
    fn envelope_bounded_for_half_overlap_or_more() {
        for win in [64usize, 200, 550, 1024] {
            for hop in 1..=win / 2 {
                let c = StftConfig {
                    sample_rate: 16000,
                    window_len: win,
                    hop,
                    fft_size: win.next_power_of_two(),
                };
                assert!(c.min_envelope() > 0.2, "win {win} hop {hop}");
            }
        }
    }

    #[test]
    fn zero_in_zero_out() {
        let cfg = StftConfig::default();
        let buf = AudioBuffer::silence(3000, cfg.sample_rate);
        let s = stft(&buf, &cfg).unwrap();
        assert!(s.frames.iter().flatten().all(|c| c.norm() == 0.0));
        let y = istft(&s).unwrap();
        assert!(y.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn short_and_mismatched_inputs() {
        let cfg = StftConfig::default();
        let buf = AudioBuffer::silence(100, cfg.sample_rate);
        assert_eq!(
            stft(&buf, &cfg).unwrap_err(),
            DspError::TooShort { got: 100, need: 550 }
        );
        let buf = AudioBuffer::silence(1000, 16000);
        assert!(matches!(stft(&buf, &cfg), Err(DspError::RateMismatch { .. })));
        let mut s = Spectrogram::zeros(3, cfg);
        s.frames[1].pop();
        assert_eq!(
            istft(&s).unwrap_err(),
            DspError::BinMismatch { frame: 1, got: 512, want: 513 }
        );
    }

    #[test]
    fn output_length() {
        let cfg = StftConfig::default();
        let s = Spectrogram::zeros(10, cfg);
        assert_eq!(istft(&s).unwrap().len(), 9 * 132 + 550);
    }
}
