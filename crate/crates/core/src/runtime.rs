//! The streaming denoiser: frame scheduling, per-hop inference, overlap-add
//! synthesis and a delay-aligned dry path for dry/wet mixing.

use std::collections::VecDeque;
use std::fmt::Write as _;

use num_complex::Complex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{DspError, FrameFft, StftConfig, WOLA_EPS};
use crate::model::{apply_mask, MaskFrame, ModelError, NetworkInstance, Streamer};
use crate::search::LatencyStats;

pub const DEFAULT_MIX_RATIO: u8 = 80;

#[derive(Debug, Error, PartialEq)]
pub enum RuntimeError {
    #[error("mix ratio {0} outside 0..=100")]
    MixRatio(i64),
    #[error("network expects {want} bins, the STFT gives {got}")]
    BinMismatch { got: usize, want: usize },
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

enum MaskSource {
    Network(Box<Streamer<f32>>),
    /// Every bin gets the identity mask; useful for testing the synthesis.
    Identity,
}

/// One audio stream's worth of denoising state.
pub struct StreamingDenoiser {
    cfg: StftConfig,
    fft: FrameFft<f32>,
    window: Vec<f32>,
    masks: MaskSource,
    /// Last `window_len` input samples.
    analysis: VecDeque<f32>,
    /// Overlap-add accumulator and squared-window envelope for the current frame span.
    acc: Vec<f64>,
    env: Vec<f64>,
    /// Finished wet samples, primed with one window of silence.
    wet: VecDeque<f32>,
    dry: VecDeque<f32>,
    seen: u64,
    mix_ratio: u8,
    spectrum: Vec<Complex<f32>>,
    time: Vec<f32>,
    frame: Vec<f32>,
}

impl StreamingDenoiser {
    pub fn new(net: &NetworkInstance, cfg: StftConfig) -> Result<Self, RuntimeError> {
        cfg.validate()?;
        if net.frame_bins() != cfg.n_bins() {
            return Err(RuntimeError::BinMismatch {
                got: cfg.n_bins(),
                want: net.frame_bins(),
            });
        }
        Ok(Self::with_source(MaskSource::Network(Box::new(net.streamer())), cfg))
    }

    /// A denoiser whose mask is fixed to the identity.
    pub fn identity(cfg: StftConfig) -> Result<Self, RuntimeError> {
        cfg.validate()?;
        Ok(Self::with_source(MaskSource::Identity, cfg))
    }

    fn with_source(masks: MaskSource, cfg: StftConfig) -> Self {
        let w = cfg.window_len;
        Self {
            fft: FrameFft::new(cfg.fft_size),
            window: cfg.window(),
            masks,
            analysis: VecDeque::with_capacity(w),
            acc: vec![0.0; w],
            env: vec![0.0; w],
            wet: std::iter::repeat_n(0.0, w).collect(),
            dry: std::iter::repeat_n(0.0, w).collect(),
            seen: 0,
            mix_ratio: DEFAULT_MIX_RATIO,
            spectrum: Vec::new(),
            time: Vec::new(),
            frame: vec![0.0; w],
            cfg,
        }
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    /// Delay between input and output, samples.
    pub fn delay(&self) -> usize {
        self.cfg.window_len
    }

    pub fn mix_ratio(&self) -> u8 {
        self.mix_ratio
    }

    /// Sets the wet share in percent; applies from the next emitted sample.
    pub fn set_mix_ratio(&mut self, ratio: i64) -> Result<(), RuntimeError> {
        if !(0..=100).contains(&ratio) {
            return Err(RuntimeError::MixRatio(ratio));
        }
        self.mix_ratio = ratio as u8;
        Ok(())
    }

    /// Clears all stream state; the next sample starts a new stream.
    pub fn reset(&mut self) {
        let w = self.cfg.window_len;
        if let MaskSource::Network(s) = &mut self.masks {
            s.reset();
        }
        self.analysis.clear();
        self.acc.iter_mut().for_each(|v| *v = 0.0);
        self.env.iter_mut().for_each(|v| *v = 0.0);
        self.wet = std::iter::repeat_n(0.0, w).collect();
        self.dry = std::iter::repeat_n(0.0, w).collect();
        self.seen = 0;
    }

    /// Consumes `input` and returns exactly as many output samples.
    pub fn push_samples(&mut self, input: &[f32]) -> Vec<f32> {
        let mut out = Vec::with_capacity(input.len());
        self.process_into(input, &mut out);
        out
    }

    pub fn process_into(&mut self, input: &[f32], out: &mut Vec<f32>) {
        let w = self.cfg.window_len;
        let hop = self.cfg.hop as u64;
        for &x in input {
            if self.analysis.len() == w {
                self.analysis.pop_front();
            }
            self.analysis.push_back(x);
            self.dry.push_back(x);
            self.seen += 1;
            if self.seen >= w as u64 && (self.seen - w as u64) % hop == 0 {
                self.run_frame();
            }
            let d = self.dry.pop_front().unwrap_or(0.0);
            let y = self.wet.pop_front().unwrap_or(0.0);
            out.push(self.mix(d, y));
        }
    }

    fn mix(&self, dry: f32, wet: f32) -> f32 {
        match self.mix_ratio {
            0 => dry,
            100 => wet,
            r => {
                let a = r as f32 / 100.0;
                (1.0 - a) * dry + a * wet
            }
        }
    }

    fn run_frame(&mut self) {
        let w = self.cfg.window_len;
        let hop = self.cfg.hop;
        for ((f, &x), &win) in self.frame.iter_mut().zip(&self.analysis).zip(&self.window) {
            *f = x * win;
        }
        self.fft.forward(&self.frame, &mut self.spectrum);
        let bins = self.spectrum.len();
        let masked = match &mut self.masks {
            MaskSource::Network(s) => {
                // a frame the network rejects passes through unmasked
                s.step(&self.spectrum)
                    .and_then(|m| apply_mask(&self.spectrum, &m))
                    .unwrap_or_else(|_| self.spectrum.clone())
            }
            MaskSource::Identity => apply_mask(&self.spectrum, &MaskFrame::identity(bins)).expect("bin counts agree"),
        };
        self.fft.inverse(&masked, &mut self.time);
        for i in 0..w {
            let win = self.window[i] as f64;
            self.acc[i] += self.time[i] as f64 * win;
            self.env[i] += win * win;
        }
        for i in 0..hop {
            self.wet.push_back((self.acc[i] / self.env[i].max(WOLA_EPS)) as f32);
        }
        self.acc.rotate_left(hop);
        self.env.rotate_left(hop);
        for i in w - hop..w {
            self.acc[i] = 0.0;
            self.env[i] = 0.0;
        }
    }
}

/// One externally contributed latency, e.g. a phone's audio stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackStage {
    pub name: String,
    pub ms: f64,
}

/// Phone, streamer and wireless link figures for a typical hearing-aid setup.
pub fn default_stack() -> Vec<StackStage> {
    [("phone", 10.0), ("streamer", 10.0), ("wireless", 20.0)]
        .into_iter()
        .map(|(n, ms)| StackStage { name: n.into(), ms })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyBudget {
    pub algorithmic_ms: f64,
    pub compute_ms: f64,
    pub stack: Vec<StackStage>,
    pub total_ms: f64,
}

impl LatencyBudget {
    fn rows(&self) -> Vec<(String, f64)> {
        let mut rows = vec![
            ("algorithmic".to_string(), self.algorithmic_ms),
            ("compute".to_string(), self.compute_ms),
        ];
        rows.extend(self.stack.iter().map(|s| (s.name.clone(), s.ms)));
        rows.push(("total".to_string(), self.total_ms));
        rows
    }

    pub fn to_text(&self) -> String {
        let rows = self.rows();
        let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0);
        let mut s = String::new();
        for (n, ms) in rows {
            writeln!(s, "{n:<width$}  {ms:>8.2} ms").unwrap();
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,ms\n");
        for (n, ms) in self.rows() {
            writeln!(s, "{n},{ms}").unwrap();
        }
        s
    }
}

/// Algorithmic delay from the STFT window, compute from a benchmark median,
/// plus the external stages.
pub fn latency_report(cfg: &StftConfig, bench: &LatencyStats, stack: &[StackStage]) -> LatencyBudget {
    let algorithmic_ms = cfg.window_ms();
    let compute_ms = bench.median_us / 1000.0;
    let total_ms = algorithmic_ms + compute_ms + stack.iter().map(|s| s.ms).sum::<f64>();
    LatencyBudget {
        algorithmic_ms,
        compute_ms,
        stack: stack.to_vec(),
        total_ms,
    }
}
