//! Synthetic scenes, mask-MSE training with momentum SGD, validation quality
//! and population based training.

mod pbt;
mod scene;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use pbt::{lineage_csv, pbt_run, LineageEvent, PbtConfig, PbtEvent, PbtResult};
pub use scene::{babble_noise, pink_noise, speech_proxy, synth_scene, synth_scenes, white_noise, NoiseKind, SceneConfig};

use crate::audio::{si_sdr, AudioError, Mixture};
use crate::dsp::{istft, stft, DspError, Spectrogram, StftConfig};
use crate::model::{apply_mask, compute_cirm, offline_features, ModelError, NetworkInstance};
use crate::tensor::{Tape, Tensor, TensorError, Var};

pub const MOMENTUM: f64 = 0.9;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("no training scenes")]
    NoScenes,
    #[error("loss diverged at step {step} ({loss})")]
    Diverged { step: usize, loss: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParams {
    /// Zero freezes the weights; otherwise within `[1e-6, 1]`.
    pub learning_rate: f64,
    /// Frames per training segment.
    pub batch_frames: usize,
    /// Segments per batch.
    pub batch_segments: usize,
    pub steps: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            learning_rate: 0.02,
            batch_frames: 32,
            batch_segments: 4,
            steps: 200,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<(), TrainError> {
        let lr = self.learning_rate;
        if !(lr == 0.0 || (1e-6..=1.0).contains(&lr)) {
            return Err(TrainError::Config(format!("learning rate {lr} outside [1e-6, 1]")));
        }
        if self.batch_frames == 0 || self.batch_segments == 0 {
            return Err(TrainError::Config("batch_frames and batch_segments must be positive".into()));
        }
        Ok(())
    }
}

/// One utterance prepared for training: features and compressed cIRM
/// targets, both `[frames, bins, 2]`.
#[derive(Debug, Clone)]
pub struct Example {
    pub frames: usize,
    pub features: Vec<f64>,
    pub targets: Vec<f64>,
}

/// Precomputed examples for a fixed network width.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub bins: usize,
    pub examples: Vec<Example>,
}

impl TrainSet {
    pub fn from_scenes(scenes: &[Mixture], cfg: &StftConfig, bins: usize) -> Result<Self, TrainError> {
        if scenes.is_empty() {
            return Err(TrainError::NoScenes);
        }
        let examples = scenes
            .iter()
            .map(|m| {
                let noisy = stft(&m.mixed, cfg)?;
                let clean = stft(&m.clean, cfg)?;
                let mask = compute_cirm(&clean, &noisy)?;
                let features = offline_features(&noisy.frames, bins);
                let mut targets = Vec::with_capacity(features.len());
                for f in &mask {
                    for v in &f.values[..bins] {
                        targets.push(v.re);
                        targets.push(v.im);
                    }
                }
                Ok(Example {
                    frames: noisy.n_frames(),
                    features,
                    targets,
                })
            })
            .collect::<Result<Vec<_>, TrainError>>()?;
        Ok(Self { bins, examples })
    }

    fn min_frames(&self) -> usize {
        self.examples.iter().map(|e| e.frames).min().unwrap_or(0)
    }
}

/// A time-major training batch: row `t * segments + b`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor,
    pub y: Tensor,
    pub steps: usize,
    pub segments: usize,
}

/// Draws `batch_segments` random segments of `batch_frames` frames (shortened
/// to the shortest example when needed).
pub fn sample_batch<R: Rng + ?Sized>(data: &TrainSet, hp: &HyperParams, rng: &mut R) -> Batch {
    let steps = hp.batch_frames.min(data.min_frames()).max(1);
    let segs = hp.batch_segments;
    let row = data.bins * 2;
    let mut x = vec![0.0; steps * segs * row];
    let mut y = vec![0.0; steps * segs * row];
    for b in 0..segs {
        let ex = &data.examples[rng.random_range(0..data.examples.len())];
        let start = rng.random_range(0..=ex.frames - steps);
        for t in 0..steps {
            let src = (start + t) * row;
            let dst = (t * segs + b) * row;
            x[dst..dst + row].copy_from_slice(&ex.features[src..src + row]);
            y[dst..dst + row].copy_from_slice(&ex.targets[src..src + row]);
        }
    }
    let shape = [steps * segs, data.bins, 2];
    Batch {
        x: Tensor::new(&shape, x).expect("batch shape"),
        y: Tensor::new(&shape, y).expect("batch shape"),
        steps,
        segments: segs,
    }
}

/// Records the mask MSE of `net` on `batch`, given already-recorded parameters.
pub fn batch_loss(net: &NetworkInstance, tape: &mut Tape, p: &[Var], batch: &Batch) -> Result<Var, TensorError> {
    let x = tape.constant(batch.x.clone());
    let y = tape.constant(batch.y.clone());
    let pred = net.forward_tape(tape, p, x, batch.steps, batch.segments)?;
    tape.mse(pred, y)
}

/// Loss and parameter gradients (storage order) on one batch.
pub fn loss_and_grads(net: &NetworkInstance, batch: &Batch) -> Result<(f64, Vec<Tensor>), TensorError> {
    let mut tape = Tape::new();
    let p = net.record_params(&mut tape, true);
    let loss = batch_loss(net, &mut tape, &p, batch)?;
    let value = tape.value(loss).item();
    let mut g = tape.backward(loss)?;
    let grads = p
        .iter()
        .zip(net.params())
        .map(|(&v, t)| g.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((value, grads))
}

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub velocity: Vec<Tensor>,
}

impl SgdState {
    pub fn new(net: &NetworkInstance) -> Self {
        Self {
            velocity: net.params().iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// Runs `steps` momentum-SGD updates in place; returns the per-step loss.
///
/// `step_offset` only shifts the step index reported on divergence.
pub fn sgd_steps<R: Rng + ?Sized>(
    net: &mut NetworkInstance,
    state: &mut SgdState,
    data: &TrainSet,
    hp: &HyperParams,
    steps: usize,
    step_offset: usize,
    rng: &mut R,
) -> Result<Vec<f64>, TrainError> {
    hp.validate()?;
    if data.examples.is_empty() {
        return Err(TrainError::NoScenes);
    }
    if data.bins != net.topology().bins {
        return Err(ModelError::BinMismatch {
            got: data.bins,
            want: net.topology().bins,
        }
        .into());
    }
    if state.velocity.len() != net.params().len()
        || state.velocity.iter().zip(net.params()).any(|(v, p)| v.shape() != p.shape())
    {
        *state = SgdState::new(net);
    }
    let mut trace = Vec::with_capacity(steps);
    for s in 0..steps {
        let batch = sample_batch(data, hp, rng);
        let (loss, grads) = loss_and_grads(net, &batch)?;
        if !loss.is_finite() || grads.iter().any(|g| g.data().iter().any(|v| !v.is_finite())) {
            return Err(TrainError::Diverged {
                step: step_offset + s,
                loss,
            });
        }
        trace.push(loss);
        if hp.learning_rate == 0.0 {
            continue;
        }
        let lr = hp.learning_rate;
        for ((p, v), g) in net.params_mut().iter_mut().zip(&mut state.velocity).zip(&grads) {
            for ((w, m), d) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *m = MOMENTUM * *m + d;
                *w -= lr * *m;
            }
        }
    }
    Ok(trace)
}

/// Trains a copy of `net` on `scenes` for `hp.steps` steps.
pub fn train_sgd<R: Rng + ?Sized>(
    net: NetworkInstance,
    scenes: &[Mixture],
    cfg: &StftConfig,
    hp: &HyperParams,
    rng: &mut R,
) -> Result<(NetworkInstance, Vec<f64>), TrainError> {
    let data = TrainSet::from_scenes(scenes, cfg, net.topology().bins)?;
    let mut net = net;
    let mut state = SgdState::new(&net);
    let trace = sgd_steps(&mut net, &mut state, &data, hp, hp.steps, 0, rng)?;
    Ok((net, trace))
}

/// Streams `noisy` through a fresh 64-bit streamer and resynthesizes.
pub fn enhance_offline(net: &NetworkInstance, noisy: &Spectrogram) -> Result<Spectrogram, TrainError> {
    let mut streamer = net.streamer::<f64>();
    let mut out = Spectrogram::zeros(0, noisy.config);
    for frame in &noisy.frames {
        let mask = streamer.step(frame)?;
        out.frames.push(apply_mask(frame, &mask)?);
    }
    Ok(out)
}

/// SI-SDR of (noisy, enhanced) against clean for one mixture, over the
/// steady-state span of the synthesis.
pub fn scene_si_sdr(net: &NetworkInstance, m: &Mixture, cfg: &StftConfig) -> Result<(f64, f64), TrainError> {
    let noisy = stft(&m.mixed, cfg)?;
    let enhanced = istft(&enhance_offline(net, &noisy)?)?;
    let span = cfg.steady_span(enhanced.len().min(m.clean.len()));
    let clean = &m.clean.samples[span.clone()];
    let before = si_sdr(clean, &m.mixed.samples[span.clone()])?;
    let after = si_sdr(clean, &enhanced.samples[span])?;
    Ok((before, after))
}

/// Mean SI-SDR improvement in dB over `scenes`.
pub fn quality(net: &NetworkInstance, scenes: &[Mixture], cfg: &StftConfig) -> Result<f64, TrainError> {
    if scenes.is_empty() {
        return Err(TrainError::NoScenes);
    }
    let mut total = 0.0;
    for m in scenes {
        let (before, after) = scene_si_sdr(net, m, cfg)?;
        total += after - before;
    }
    Ok(total / scenes.len() as f64)
}

/// Mask MSE over the whole of every example, each as one sequence.
pub fn validation_loss(net: &NetworkInstance, data: &TrainSet) -> Result<f64, TrainError> {
    if data.examples.is_empty() {
        return Err(TrainError::NoScenes);
    }
    let mut total = 0.0;
    for ex in &data.examples {
        let pred = net.forward_offline(&ex.features, ex.frames)?;
        let se: f64 = pred.iter().zip(&ex.targets).map(|(a, b)| (a - b) * (a - b)).sum();
        total += se / pred.len() as f64;
    }
    Ok(total / data.examples.len() as f64)
}
