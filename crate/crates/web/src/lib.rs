//! Browser bindings for the demo page in `www/`.
//!
//! Three operations: denoise a synthetic scene with the bundled model at a
//! chosen mixing ratio, simulate an adaptive staircase against a model
//! listener, and assemble an end-to-end latency budget.

use denoise_core::audio::si_sdr;
use denoise_core::dsp::StftConfig;
use denoise_core::eval::{run_staircase, PsychometricListener, StaircaseConfig, StaircaseRule};
use denoise_core::model::{decode, NetworkInstance};
use denoise_core::runtime::{latency_report, StackStage, StreamingDenoiser};
use denoise_core::search::{LatencyStats, MIN_FRAMES};
use denoise_core::train::{synth_scene, NoiseKind, SceneConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

static MODEL: &[u8] = include_bytes!("../assets/demo.adnz");

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    net: NetworkInstance,
    cfg: StftConfig,
}

#[wasm_bindgen]
pub struct SceneResult {
    clean: Vec<f32>,
    noisy: Vec<f32>,
    output: Vec<f32>,
    noisy_db: f64,
    output_db: f64,
    delay: usize,
}

#[wasm_bindgen]
impl SceneResult {
    #[wasm_bindgen(getter)]
    pub fn clean(&self) -> Vec<f32> {
        self.clean.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn noisy(&self) -> Vec<f32> {
        self.noisy.clone()
    }
    /// Output realigned to the input (the window delay removed).
    #[wasm_bindgen(getter)]
    pub fn output(&self) -> Vec<f32> {
        self.output.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn noisy_db(&self) -> f64 {
        self.noisy_db
    }
    #[wasm_bindgen(getter)]
    pub fn output_db(&self) -> f64 {
        self.output_db
    }
    #[wasm_bindgen(getter)]
    pub fn delay(&self) -> usize {
        self.delay
    }
}

#[wasm_bindgen]
pub struct StaircaseTrack {
    snrs: Vec<f64>,
    correct: Vec<u32>,
    srt_db: f64,
    equilibrium_db: f64,
    converged: bool,
}

#[wasm_bindgen]
impl StaircaseTrack {
    #[wasm_bindgen(getter)]
    pub fn snrs(&self) -> Vec<f64> {
        self.snrs.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn correct(&self) -> Vec<u32> {
        self.correct.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn srt_db(&self) -> f64 {
        self.srt_db
    }
    /// Where the staircase should settle for this listener and rule.
    #[wasm_bindgen(getter)]
    pub fn equilibrium_db(&self) -> f64 {
        self.equilibrium_db
    }
    #[wasm_bindgen(getter)]
    pub fn converged(&self) -> bool {
        self.converged
    }
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new() -> Result<Demo, JsError> {
        Ok(Self {
            net: decode(MODEL).map_err(js_err)?,
            cfg: StftConfig::default(),
        })
    }

    pub fn sample_rate(&self) -> u32 {
        self.cfg.sample_rate
    }

    pub fn model_summary(&self) -> String {
        format!(
            "{} parameters, {} MACs per frame, {} ms window, {} ms hop",
            self.net.n_params(),
            self.net.macs_per_frame(),
            (self.cfg.window_len as f64 * 1e3 / self.cfg.sample_rate as f64).round(),
            (self.cfg.hop as f64 * 1e3 / self.cfg.sample_rate as f64).round()
        )
    }

    /// Synthesizes a 3 s scene and streams it through the denoiser in
    /// hop-sized chunks. `noise` is `white`, `pink` or `babble`.
    pub fn denoise_scene(&self, noise: &str, snr_db: f64, mix: u32, seed: u64) -> Result<SceneResult, JsError> {
        let noise = match noise {
            "white" => NoiseKind::White,
            "pink" => NoiseKind::Pink,
            "babble" => NoiseKind::Babble,
            other => return Err(JsError::new(&format!("unknown noise kind {other:?}"))),
        };
        let scene = SceneConfig {
            noise,
            snr_db: (snr_db, snr_db),
            duration_s: 3.0,
            ..Default::default()
        };
        let m = synth_scene(&scene, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(js_err)?;
        let mut d = StreamingDenoiser::new(&self.net, self.cfg).map_err(js_err)?;
        d.set_mix_ratio(mix as i64).map_err(js_err)?;
        let delay = d.delay();
        let mut y = Vec::with_capacity(m.mixed.len() + delay);
        for c in m.mixed.samples.chunks(self.cfg.hop) {
            d.process_into(c, &mut y);
        }
        d.process_into(&vec![0.0; delay], &mut y);
        let output = y[delay..delay + m.mixed.len()].to_vec();
        let span = self.cfg.steady_span(output.len());
        let clean = &m.clean.samples;
        Ok(SceneResult {
            noisy_db: si_sdr(&clean[span.clone()], &m.mixed.samples[span.clone()]).map_err(js_err)?,
            output_db: si_sdr(&clean[span.clone()], &output[span]).map_err(js_err)?,
            clean: m.clean.samples,
            noisy: m.mixed.samples,
            output,
            delay,
        })
    }
}

/// One staircase run against a logistic listener. `rule` is `1up1down` or
/// `2up1down`.
#[wasm_bindgen]
pub fn staircase(srt50: f64, slope: f64, rule: &str, seed: u64) -> Result<StaircaseTrack, JsError> {
    let listener = PsychometricListener::new(srt50, slope).map_err(js_err)?;
    let rule = match rule {
        "1up1down" => StaircaseRule::OneUpOneDown,
        "2up1down" => StaircaseRule::TwoUpOneDown,
        other => return Err(JsError::new(&format!("unknown rule {other:?}"))),
    };
    let cfg = StaircaseConfig {
        rule,
        ..Default::default()
    };
    let r = run_staircase(&listener, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(js_err)?;
    Ok(StaircaseTrack {
        snrs: r.trials.iter().map(|t| t.snr_db).collect(),
        correct: r.trials.iter().map(|t| t.words_correct as u32).collect(),
        srt_db: r.srt_db,
        equilibrium_db: listener.snr_for(cfg.equilibrium_word_p()),
        converged: r.converged,
    })
}

/// Latency budget as aligned text: window, compute and the listed stages.
#[wasm_bindgen]
pub fn latency_budget(compute_ms: f64, phone_ms: f64, streamer_ms: f64, wireless_ms: f64) -> String {
    let us = compute_ms * 1e3;
    let bench = LatencyStats {
        median_us: us,
        p95_us: us,
        n_frames: MIN_FRAMES,
    };
    let stack = [("phone", phone_ms), ("streamer", streamer_ms), ("wireless", wireless_ms)]
        .into_iter()
        .map(|(name, ms)| StackStage { name: name.into(), ms })
        .collect::<Vec<_>>();
    latency_report(&StftConfig::default(), &bench, &stack).to_text()
}
