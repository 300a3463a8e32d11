//! Simulated listening tests: SRT staircases run through the denoiser,
//! preference search over the mixing ratio, and the test statistics.

mod staircase;
mod stats;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use staircase::{
    run_staircase, run_staircase_with, trials_csv, words_with_p, PsychometricListener, SrtResult, StaircaseConfig,
    StaircaseRule, Trial,
};
pub use stats::{paired_t_test, pearson_r, sign_test, t_two_sided_p, TTest};

use crate::audio::{si_sdr, AudioError, Mixture};
use crate::dsp::StftConfig;
use crate::model::NetworkInstance;
use crate::runtime::{RuntimeError, StreamingDenoiser};
use crate::train::{synth_scenes, SceneConfig, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("zero variance")]
    ZeroVariance,
    #[error("{0}")]
    Stats(String),
    #[error("oracle returned {value} at ratio {ratio}")]
    NonFinite { ratio: u32, value: f64 },
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Finds the preferred grid point of `oracle` over `0, step, ..., 100` by
/// halving the interval on pairwise comparisons of neighbours. Returns the
/// argmax for strictly unimodal oracles; ties resolve to the lower point.
pub fn preference_search<F: FnMut(u32) -> f64>(mut oracle: F, step: u32) -> Result<u32, EvalError> {
    if step == 0 || 100 % step != 0 {
        return Err(EvalError::Config(format!("step {step} must divide 100")));
    }
    let mut score = |i: u32| {
        let ratio = i * step;
        let v = oracle(ratio);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(EvalError::NonFinite { ratio, value: v })
        }
    };
    let (mut lo, mut hi) = (0u32, 100 / step);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if score(mid)? < score(mid + 1)? {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    Ok(lo * step)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SrtExperiment {
    pub listener: PsychometricListener,
    pub staircase: StaircaseConfig,
    /// Mixing ratios in percent; 0 is always measured as the reference.
    pub mix_ratios: Vec<u8>,
    pub runs: usize,
    /// Scenes averaged when mapping a presented SNR to the listener's effective SNR.
    pub scene_pool: usize,
    pub scene: SceneConfig,
    pub seed: u64,
}

impl Default for SrtExperiment {
    fn default() -> Self {
        Self {
            listener: PsychometricListener::default(),
            staircase: StaircaseConfig::default(),
            mix_ratios: vec![0, 50, 80],
            runs: 20,
            scene_pool: 4,
            scene: SceneConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SrtRun {
    pub run: usize,
    pub ratio: u8,
    pub srt_db: f64,
    /// SRT at 0% minus SRT at this ratio.
    pub delta_db: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SrtRow {
    pub ratio: u8,
    pub mean_srt_db: f64,
    pub mean_delta_db: f64,
    pub positive: usize,
    pub negative: usize,
    pub sign_p: f64,
    pub unconverged: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SrtTable {
    pub rows: Vec<SrtRow>,
    pub runs: Vec<SrtRun>,
}

impl SrtTable {
    pub fn row(&self, ratio: u8) -> Option<&SrtRow> {
        self.rows.iter().find(|r| r.ratio == ratio)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("ratio,mean_srt_db,mean_delta_db,positive,negative,sign_p,unconverged\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.ratio, r.mean_srt_db, r.mean_delta_db, r.positive, r.negative, r.sign_p, r.unconverged
            ));
        }
        s
    }

    pub fn runs_csv(&self) -> String {
        let mut s = String::from("run,ratio,srt_db,delta_db,converged\n");
        for r in &self.runs {
            s.push_str(&format!("{},{},{},{},{}\n", r.run, r.ratio, r.srt_db, r.delta_db, r.converged));
        }
        s
    }
}

/// Maps a presented SNR to the mean output SI-SDR of the denoiser at a
/// given mixing ratio, with memoization.
pub struct EffectiveSnr<'a> {
    net: &'a NetworkInstance,
    stft: StftConfig,
    pool: Vec<Mixture>,
    cache: HashMap<(u8, u64), f64>,
}

impl<'a> EffectiveSnr<'a> {
    pub fn new(net: &'a NetworkInstance, stft: StftConfig, scene: &SceneConfig, pool: usize, seed: u64) -> Result<Self, EvalError> {
        if pool == 0 {
            return Err(EvalError::Config("scene pool is empty".into()));
        }
        Ok(Self {
            net,
            stft,
            pool: synth_scenes(scene, pool, seed)?,
            cache: HashMap::new(),
        })
    }

    pub fn get(&mut self, ratio: u8, snr_db: f64) -> Result<f64, EvalError> {
        let key = (ratio, snr_db.to_bits());
        if let Some(v) = self.cache.get(&key) {
            return Ok(*v);
        }
        let mut den = StreamingDenoiser::new(self.net, self.stft)?;
        den.set_mix_ratio(ratio as i64)?;
        let d = den.delay();
        let mut total = 0.0;
        for m in &self.pool {
            // rescale the stored noise to the presented SNR
            let g = 10f64.powf((m.snr_db - snr_db) / 20.0) as f32;
            let mixed: Vec<f32> = m.clean.samples.iter().zip(&m.noise.samples).map(|(c, n)| c + g * n).collect();
            den.reset();
            let mut out = den.push_samples(&mixed);
            out.extend(den.push_samples(&vec![0.0; d]));
            let aligned = &out[d..d + mixed.len()];
            let span = self.stft.steady_span(mixed.len());
            total += si_sdr(&m.clean.samples[span.clone()], &aligned[span])?;
        }
        let v = total / self.pool.len() as f64;
        self.cache.insert(key, v);
        Ok(v)
    }
}

/// Runs `exp.runs` staircases per mixing ratio with the listener hearing the
/// denoiser's output SI-SDR. Each run reuses its random stream across ratios.
pub fn measure_srt_improvement(
    net: &NetworkInstance,
    stft: &StftConfig,
    exp: &SrtExperiment,
) -> Result<SrtTable, EvalError> {
    exp.listener.validate()?;
    exp.staircase.validate()?;
    if exp.runs == 0 {
        return Err(EvalError::Config("runs must be positive".into()));
    }
    if let Some(r) = exp.mix_ratios.iter().find(|r| **r > 100) {
        return Err(EvalError::Config(format!("mix ratio {r} above 100")));
    }
    let mut ratios = vec![0u8];
    ratios.extend(exp.mix_ratios.iter().copied().filter(|r| *r != 0));
    let mut effective = EffectiveSnr::new(net, *stft, &exp.scene, exp.scene_pool, exp.seed)?;
    let mut runs = Vec::new();
    for run in 0..exp.runs {
        let run_seed = exp.seed.wrapping_add(0x5EED_0000).wrapping_add(run as u64);
        let mut srt0 = f64::NAN;
        for &ratio in &ratios {
            let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
            let result = run_staircase_with(&exp.staircase, |snr| {
                let eff = effective.get(ratio, snr)?;
                Ok(exp.listener.words_correct(eff, exp.staircase.n_words, &mut rng))
            })?;
            if ratio == 0 {
                srt0 = result.srt_db;
            }
            runs.push(SrtRun {
                run,
                ratio,
                srt_db: result.srt_db,
                delta_db: srt0 - result.srt_db,
                converged: result.converged,
            });
        }
    }
    let rows = ratios
        .iter()
        .map(|&ratio| {
            let mine: Vec<&SrtRun> = runs.iter().filter(|r| r.ratio == ratio).collect();
            let deltas: Vec<f64> = mine.iter().map(|r| r.delta_db).collect();
            let (positive, negative, sign_p) = sign_test(&deltas);
            let n = mine.len() as f64;
            SrtRow {
                ratio,
                mean_srt_db: mine.iter().map(|r| r.srt_db).sum::<f64>() / n,
                mean_delta_db: deltas.iter().sum::<f64>() / n,
                positive,
                negative,
                sign_p,
                unconverged: mine.iter().filter(|r| !r.converged).count(),
            }
        })
        .collect();
    Ok(SrtTable { rows, runs })
}
