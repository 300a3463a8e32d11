//! Population based training over learning rate and weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{quality, sgd_steps, HyperParams, SgdState, TrainError, TrainSet};
use crate::audio::Mixture;
use crate::dsp::StftConfig;
use crate::model::{Genome, NetworkInstance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PbtConfig {
    pub population: usize,
    pub rounds: usize,
    pub steps_per_round: usize,
    pub exploit_quantile: f64,
    pub perturb_factors: Vec<f64>,
    /// Starting learning rates, cycled over members; empty draws each
    /// log-uniformly from `[1e-3, 1e-1]`.
    pub initial_lrs: Vec<f64>,
    /// Batch shape for every member; its learning rate and step count are unused.
    pub hp: HyperParams,
}

impl Default for PbtConfig {
    fn default() -> Self {
        Self {
            population: 4,
            rounds: 4,
            steps_per_round: 50,
            exploit_quantile: 0.25,
            perturb_factors: vec![0.8, 1.25],
            initial_lrs: Vec::new(),
            hp: HyperParams::default(),
        }
    }
}

impl PbtConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.population < 4 {
            return Err(TrainError::Config(format!("population {} < 4", self.population)));
        }
        if !(self.exploit_quantile > 0.0 && self.exploit_quantile <= 0.25) {
            return Err(TrainError::Config(format!(
                "exploit quantile {} outside (0, 0.25]",
                self.exploit_quantile
            )));
        }
        if self.perturb_factors.is_empty() || self.perturb_factors.iter().any(|f| !(*f > 0.0)) {
            return Err(TrainError::Config("perturb factors must be positive".into()));
        }
        for &lr in &self.initial_lrs {
            HyperParams {
                learning_rate: lr,
                ..self.hp.clone()
            }
            .validate()?;
        }
        self.hp.validate()
    }

    /// Members replaced (and protected) per round.
    pub fn quantile_count(&self) -> usize {
        ((self.exploit_quantile * self.population as f64).floor() as usize).max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PbtEvent {
    Train,
    Exploit { from: usize },
    Explore { factor: f64 },
}

impl std::fmt::Display for PbtEvent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PbtEvent::Train => write!(f, "train"),
            PbtEvent::Exploit { from } => write!(f, "exploit:{from}"),
            PbtEvent::Explore { factor } => write!(f, "explore:{factor}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineageEvent {
    /// Training steps completed by the population so far (per member).
    pub step: usize,
    pub member: usize,
    /// Mean training loss over the round (train events), else the member's last one.
    pub loss: f64,
    pub learning_rate: f64,
    pub event: PbtEvent,
}

#[derive(Debug, Clone)]
pub struct PbtResult {
    pub best: NetworkInstance,
    pub best_quality: f64,
    /// Best validation quality seen up to and including each round.
    pub round_best: Vec<f64>,
    /// Initial member each final member descends from.
    pub origins: Vec<usize>,
    pub final_lrs: Vec<f64>,
    pub lineage: Vec<LineageEvent>,
}

struct Member {
    net: NetworkInstance,
    state: SgdState,
    lr: f64,
    origin: usize,
    last_loss: f64,
    quality: f64,
}

fn train_member(
    m: &mut Member,
    data: &TrainSet,
    valid: &[Mixture],
    stft_cfg: &StftConfig,
    hp: &HyperParams,
    steps: usize,
    offset: usize,
    seed: u64,
) -> Result<(), TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hp = HyperParams {
        learning_rate: m.lr,
        ..hp.clone()
    };
    match sgd_steps(&mut m.net, &mut m.state, data, &hp, steps, offset, &mut rng) {
        Ok(trace) => {
            m.last_loss = trace.iter().sum::<f64>() / trace.len().max(1) as f64;
            m.quality = quality(&m.net, valid, stft_cfg)?;
        }
        Err(TrainError::Diverged { loss, .. }) => {
            // a diverged member ranks last and is replaced on exploit
            m.last_loss = loss;
            m.quality = f64::NEG_INFINITY;
        }
        Err(e) => return Err(e),
    }
    Ok(())
}

/// Trains a population, periodically replacing the worst members by perturbed
/// copies of the best. Every member starts from the same weights.
pub fn pbt_run<R: Rng + ?Sized>(
    genome: &Genome,
    cfg: &PbtConfig,
    data: &TrainSet,
    valid: &[Mixture],
    stft_cfg: &StftConfig,
    rng: &mut R,
) -> Result<PbtResult, TrainError> {
    cfg.validate()?;
    let init = NetworkInstance::build_with_bins(genome, data.bins, rng)?;
    let mut members: Vec<Member> = (0..cfg.population)
        .map(|i| {
            let lr = if cfg.initial_lrs.is_empty() {
                10f64.powf(rng.random_range(-3.0..-1.0))
            } else {
                cfg.initial_lrs[i % cfg.initial_lrs.len()]
            };
            Member {
                state: SgdState::new(&init),
                net: init.clone(),
                lr,
                origin: i,
                last_loss: f64::NAN,
                quality: f64::NEG_INFINITY,
            }
        })
        .collect();

    let base_seed: u64 = rng.random();
    let n_q = cfg.quantile_count();
    let mut lineage = Vec::new();
    let mut round_best = Vec::with_capacity(cfg.rounds);
    let mut best: Option<(f64, NetworkInstance)> = None;

    for round in 0..cfg.rounds {
        let offset = round * cfg.steps_per_round;
        let seed_of = |i: usize| base_seed ^ ((round as u64) << 32 | i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let run = |(i, m): (usize, &mut Member)| {
            train_member(m, data, valid, stft_cfg, &cfg.hp, cfg.steps_per_round, offset, seed_of(i))
        };
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            members.par_iter_mut().enumerate().try_for_each(run)?;
        }
        #[cfg(not(feature = "parallel"))]
        members.iter_mut().enumerate().try_for_each(run)?;

        let step = offset + cfg.steps_per_round;
        for (i, m) in members.iter().enumerate() {
            lineage.push(LineageEvent {
                step,
                member: i,
                loss: m.last_loss,
                learning_rate: m.lr,
                event: PbtEvent::Train,
            });
        }

        // rank by quality, ties broken by index
        let mut order: Vec<usize> = (0..members.len()).collect();
        order.sort_by(|&a, &b| members[b].quality.total_cmp(&members[a].quality).then(a.cmp(&b)));
        let leader = order[0];
        if members[leader].quality.is_finite() && best.as_ref().is_none_or(|(q, _)| members[leader].quality > *q) {
            best = Some((members[leader].quality, members[leader].net.clone()));
        }
        round_best.push(best.as_ref().map_or(f64::NEG_INFINITY, |(q, _)| *q));

        if round + 1 == cfg.rounds {
            break;
        }
        let top = &order[..n_q];
        let mut bottom: Vec<usize> = order[order.len() - n_q..].to_vec();
        bottom.sort_unstable();
        for &i in &bottom {
            let from = top[rng.random_range(0..top.len())];
            let donor = &members[from];
            let (net, state, lr, origin, loss, q) = (
                donor.net.clone(),
                donor.state.clone(),
                donor.lr,
                donor.origin,
                donor.last_loss,
                donor.quality,
            );
            let factor = cfg.perturb_factors[rng.random_range(0..cfg.perturb_factors.len())];
            let m = &mut members[i];
            m.net = net;
            m.state = state;
            m.lr = lr;
            m.origin = origin;
            m.last_loss = loss;
            m.quality = q;
            lineage.push(LineageEvent {
                step,
                member: i,
                loss,
                learning_rate: m.lr,
                event: PbtEvent::Exploit { from },
            });
            m.lr = (m.lr * factor).clamp(1e-6, 1.0);
            lineage.push(LineageEvent {
                step,
                member: i,
                loss,
                learning_rate: m.lr,
                event: PbtEvent::Explore { factor },
            });
        }
    }

    let (best_quality, best) = match best {
        Some(b) => b,
        None => return Err(TrainError::Diverged { step: cfg.rounds * cfg.steps_per_round, loss: f64::NAN }),
    };
    Ok(PbtResult {
        best,
        best_quality,
        round_best,
        origins: members.iter().map(|m| m.origin).collect(),
        final_lrs: members.iter().map(|m| m.lr).collect(),
        lineage,
    })
}

/// Lineage log as CSV: `step,member,loss,learning_rate,event`.
pub fn lineage_csv(events: &[LineageEvent]) -> String {
    let mut s = String::from("step,member,loss,learning_rate,event\n");
    for e in events {
        s.push_str(&format!("{},{},{},{},{}\n", e.step, e.member, e.loss, e.learning_rate, e.event));
    }
    s
}
