//! Streaming complex-ratio-mask speech denoiser.
//!
//! Modules, bottom-up:
//!
//! - [`audio`]: mono buffers, WAV I/O, SNR mixing, SI-SDR
//! - [`dsp`]: STFT / weighted overlap-add
//! - [`tensor`]: dense tensors with a reverse-mode autodiff tape
//! - [`model`]: U-Net genome, network instances, cIRM targets, MAC counts, model files
//! - [`train`]: synthetic scenes, mask-MSE training, population based training
//! - [`search`]: latency-constrained evolutionary architecture search
//! - [`prune`]: iterative structured channel pruning
//! - [`runtime`]: the streaming denoiser with dry/wet mixing and latency budget
//! - [`eval`]: simulated listeners, SRT staircases, preference search, statistics
//! - [`cli`]: the `adnz` command line

pub mod audio;
pub mod cli;
pub mod dsp;
pub mod eval;
pub mod model;
pub mod prune;
pub mod runtime;
pub mod search;
pub mod tensor;
pub mod train;
