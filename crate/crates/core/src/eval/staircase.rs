//! Simulated listeners and adaptive SRT staircases.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use super::EvalError;

/// Word intelligibility as a logistic function of SNR.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsychometricListener {
    /// SNR of 50% word intelligibility, dB.
    pub srt50: f64,
    /// Slope at the midpoint, probability per dB.
    pub slope: f64,
}

impl Default for PsychometricListener {
    fn default() -> Self {
        Self {
            srt50: -7.0,
            slope: 0.17,
        }
    }
}

impl PsychometricListener {
    pub fn new(srt50: f64, slope: f64) -> Result<Self, EvalError> {
        let l = Self { srt50, slope };
        l.validate()?;
        Ok(l)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if !self.srt50.is_finite() || !(self.slope > 0.0 && self.slope.is_finite()) {
            return Err(EvalError::Config(format!(
                "listener needs finite srt50 and positive slope, got {} / {}",
                self.srt50, self.slope
            )));
        }
        Ok(())
    }

    pub fn p_word(&self, snr: f64) -> f64 {
        1.0 / (1.0 + (-4.0 * self.slope * (snr - self.srt50)).exp())
    }

    /// SNR at which word intelligibility equals `p`.
    pub fn snr_for(&self, p: f64) -> f64 {
        self.srt50 + (p / (1.0 - p)).ln() / (4.0 * self.slope)
    }

    pub fn words_correct<R: Rng + ?Sized>(&self, snr: f64, n_words: usize, rng: &mut R) -> usize {
        words_with_p(self.p_word(snr), n_words, rng)
    }
}

/// Independent Bernoulli draws, one per word.
pub fn words_with_p<R: Rng + ?Sized>(p: f64, n_words: usize, rng: &mut R) -> usize {
    (0..n_words).filter(|_| rng.random::<f64>() < p).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StaircaseRule {
    /// One step down on a correct sentence, one step up otherwise.
    OneUpOneDown,
    /// One step down on a correct sentence, two steps up otherwise.
    TwoUpOneDown,
}

impl StaircaseRule {
    /// Probability of a correct sentence at which the expected SNR change is zero.
    pub fn target_sentence_p(&self) -> f64 {
        match self {
            StaircaseRule::OneUpOneDown => 0.5,
            StaircaseRule::TwoUpOneDown => 2.0 / 3.0,
        }
    }

    fn up_steps(&self) -> f64 {
        match self {
            StaircaseRule::OneUpOneDown => 1.0,
            StaircaseRule::TwoUpOneDown => 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StaircaseConfig {
    pub rule: StaircaseRule,
    pub start_snr_db: f64,
    /// Step sizes in dB, largest first.
    pub steps_db: Vec<f64>,
    /// Reversal counts at which the step shrinks to the next size.
    pub shrink_at: Vec<usize>,
    /// Reversals at the final step size that end the run.
    pub final_reversals: usize,
    pub n_words: usize,
    /// Words that must be repeated correctly for a sentence to count.
    pub criterion: usize,
    pub max_trials: usize,
}

impl Default for StaircaseConfig {
    fn default() -> Self {
        Self {
            rule: StaircaseRule::OneUpOneDown,
            start_snr_db: 0.0,
            steps_db: vec![4.0, 2.0, 1.0],
            shrink_at: vec![2, 4],
            final_reversals: 6,
            n_words: 5,
            criterion: 4,
            max_trials: 200,
        }
    }
}

impl StaircaseConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: &str| Err(EvalError::Config(m.into()));
        if self.steps_db.is_empty() || self.steps_db.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return bad("step sizes must be positive");
        }
        if self.shrink_at.len() + 1 != self.steps_db.len() {
            return bad("need one shrink point per step change");
        }
        if self.shrink_at.windows(2).any(|w| w[0] >= w[1]) {
            return bad("shrink points must increase");
        }
        if self.n_words == 0 || self.criterion == 0 || self.criterion > self.n_words {
            return bad("criterion must be within 1..=n_words");
        }
        if self.final_reversals == 0 || self.max_trials == 0 {
            return bad("final_reversals and max_trials must be positive");
        }
        if !self.start_snr_db.is_finite() {
            return bad("start SNR must be finite");
        }
        Ok(())
    }

    /// Sentence success probability for word probability `p`.
    pub fn sentence_p(&self, p: f64) -> f64 {
        if self.criterion == 0 {
            return 1.0;
        }
        let b = Binomial::new(p.clamp(0.0, 1.0), self.n_words as u64).expect("valid binomial");
        b.sf(self.criterion as u64 - 1)
    }

    /// Word intelligibility at the staircase's equilibrium, by bisection.
    pub fn equilibrium_word_p(&self) -> f64 {
        let target = self.rule.target_sentence_p();
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if self.sentence_p(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trial {
    pub snr_db: f64,
    pub words_correct: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SrtResult {
    /// Mean SNR over the trials presented at the final step size.
    pub srt_db: f64,
    pub n_trials: usize,
    pub converged: bool,
    pub reversals: usize,
    pub trials: Vec<Trial>,
}

/// Runs one staircase; `respond` returns the words repeated correctly at a
/// presented SNR.
pub fn run_staircase_with<F>(cfg: &StaircaseConfig, mut respond: F) -> Result<SrtResult, EvalError>
where
    F: FnMut(f64) -> Result<usize, EvalError>,
{
    cfg.validate()?;
    let mut snr = cfg.start_snr_db;
    let mut step_idx = 0;
    let mut reversals = 0;
    let mut final_reversals = 0;
    let mut last_dir = 0i8;
    let mut trials = Vec::new();
    let mut final_phase = Vec::new();
    let last = cfg.steps_db.len() - 1;
    while trials.len() < cfg.max_trials {
        let correct = respond(snr)?;
        trials.push(Trial {
            snr_db: snr,
            words_correct: correct,
        });
        if step_idx == last {
            final_phase.push(snr);
        }
        let success = correct >= cfg.criterion;
        let dir: i8 = if success { -1 } else { 1 };
        if last_dir != 0 && dir != last_dir {
            reversals += 1;
            if step_idx == last {
                final_reversals += 1;
            }
            while step_idx < last && reversals >= cfg.shrink_at[step_idx] {
                step_idx += 1;
            }
        }
        last_dir = dir;
        if final_reversals >= cfg.final_reversals {
            break;
        }
        let step = cfg.steps_db[step_idx];
        snr += if success { -step } else { cfg.rule.up_steps() * step };
    }
    let converged = final_reversals >= cfg.final_reversals;
    let srt_db = if final_phase.is_empty() {
        f64::NAN
    } else {
        final_phase.iter().sum::<f64>() / final_phase.len() as f64
    };
    Ok(SrtResult {
        srt_db,
        n_trials: trials.len(),
        converged,
        reversals,
        trials,
    })
}

pub fn run_staircase<R: Rng + ?Sized>(
    listener: &PsychometricListener,
    cfg: &StaircaseConfig,
    rng: &mut R,
) -> Result<SrtResult, EvalError> {
    listener.validate()?;
    run_staircase_with(cfg, |snr| Ok(listener.words_correct(snr, cfg.n_words, rng)))
}

/// Trial log as CSV: `trial,snr_db,words_correct`.
pub fn trials_csv(trials: &[Trial]) -> String {
    let mut s = String::from("trial,snr_db,words_correct\n");
    for (i, t) in trials.iter().enumerate() {
        s.push_str(&format!("{i},{},{}\n", t.snr_db, t.words_correct));
    }
    s
}
