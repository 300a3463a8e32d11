//! Mutation-only evolution with latency as a hard feasibility constraint.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::latency::{LatencySource, LatencyStats};
use super::space::{mutate_genome, sample_genome, GenomeSpace};
use super::SearchError;
use crate::audio::Mixture;
use crate::dsp::StftConfig;
use crate::model::{Genome, NetworkInstance};
use crate::train::{quality, sgd_steps, HyperParams, SgdState, TrainSet};

/// One hop at the default configuration, in microseconds.
pub const DEFAULT_BUDGET_US: f64 = 5986.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub population: usize,
    pub generations: usize,
    pub mutation_rate: f64,
    pub budget_us: f64,
    pub train_steps_per_candidate: usize,
    pub seed: u64,
    /// Proxy-training batch shape and learning rate.
    pub hp: HyperParams,
    pub space: GenomeSpace,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            population: 8,
            generations: 10,
            mutation_rate: 0.2,
            budget_us: DEFAULT_BUDGET_US,
            train_steps_per_candidate: 40,
            seed: 0,
            hp: HyperParams {
                learning_rate: 0.03,
                batch_frames: 16,
                batch_segments: 4,
                steps: 40,
            },
            space: GenomeSpace::default(),
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        if self.population < 4 {
            return Err(SearchError::Config(format!("population {} < 4", self.population)));
        }
        if self.generations == 0 {
            return Err(SearchError::Config("need at least one generation".into()));
        }
        if self.budget_us.is_nan() || self.budget_us <= 0.0 {
            return Err(SearchError::Config(format!("budget {} us must be positive", self.budget_us)));
        }
        if !(0.0..=1.0).contains(&self.mutation_rate) {
            return Err(SearchError::Config(format!("mutation rate {} outside [0, 1]", self.mutation_rate)));
        }
        self.hp.validate().map_err(|e| SearchError::Config(e.to_string()))?;
        self.space.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitnessRecord {
    pub genome: Genome,
    /// Mean SI-SDR improvement after proxy training; NaN when the candidate
    /// was infeasible and therefore not trained.
    pub quality: f64,
    pub latency: LatencyStats,
    pub feasible: bool,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateRow {
    pub generation: usize,
    pub candidate: usize,
    pub record: FitnessRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationSummary {
    pub generation: usize,
    /// Best feasible quality found so far.
    pub best_quality: f64,
    /// Mean quality over this generation's feasible candidates.
    pub mean_quality: f64,
    pub feasible_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub best: FitnessRecord,
    /// The best candidate's proxy-trained weights.
    pub best_net: NetworkInstance,
    pub generations: Vec<GenerationSummary>,
    pub candidates: Vec<CandidateRow>,
}

/// Feasible first (higher quality first), then infeasible by latency.
fn rank_cmp(a: &FitnessRecord, b: &FitnessRecord) -> std::cmp::Ordering {
    use std::cmp::Ordering;
    match (a.feasible, b.feasible) {
        (true, false) => Ordering::Less,
        (false, true) => Ordering::Greater,
        (true, true) => b.quality.total_cmp(&a.quality),
        (false, false) => a.latency.median_us.total_cmp(&b.latency.median_us),
    }
}

fn candidate_seed(base: u64, key: &str) -> u64 {
    // FNV-1a over the genome key, so a genome gets the same seed wherever it appears
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ base;
    for b in key.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

struct Evaluated {
    record: FitnessRecord,
    net: NetworkInstance,
}

fn train_candidate(
    net: &mut NetworkInstance,
    seed: u64,
    cfg: &SearchConfig,
    data: &TrainSet,
    valid: &[Mixture],
    stft_cfg: &StftConfig,
) -> Result<f64, SearchError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a11);
    let mut state = SgdState::new(net);
    match sgd_steps(net, &mut state, data, &cfg.hp, cfg.train_steps_per_candidate, 0, &mut rng) {
        Ok(_) => Ok(quality(net, valid, stft_cfg)?),
        // a candidate that diverges in proxy training is simply bad
        Err(crate::train::TrainError::Diverged { .. }) => Ok(f64::NEG_INFINITY),
        Err(e) => Err(e.into()),
    }
}

/// Runs the generation loop. Candidates are cached by genome, so elites and
/// repeated offspring keep their first evaluation.
pub fn evolve(
    cfg: &SearchConfig,
    data: &TrainSet,
    valid: &[Mixture],
    stft_cfg: &StftConfig,
    latency: &mut LatencySource,
) -> Result<SearchResult, SearchError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cache: HashMap<String, Evaluated> = HashMap::new();
    let mut population = sample_population(cfg, &mut rng)?;
    let mut candidates = Vec::new();
    let mut generations = Vec::new();
    let mut best: Option<String> = None;

    for generation in 0..cfg.generations {
        // latency first, one candidate at a time
        let mut fresh: Vec<(String, Genome, NetworkInstance, LatencyStats)> = Vec::new();
        for g in &population {
            let key = g.key();
            if cache.contains_key(&key) || fresh.iter().any(|f| f.0 == key) {
                continue;
            }
            let mut init = ChaCha8Rng::seed_from_u64(candidate_seed(cfg.seed, &key));
            let net = NetworkInstance::build_with_bins(g, data.bins, &mut init)?;
            let lat = latency.latency(g, &net)?;
            fresh.push((key, g.clone(), net, lat));
        }
        let evaluate = |(key, g, mut net, lat): (String, Genome, NetworkInstance, LatencyStats)| {
            let feasible = lat.median_us <= cfg.budget_us;
            let quality = if feasible {
                train_candidate(&mut net, candidate_seed(cfg.seed, &key), cfg, data, valid, stft_cfg)?
            } else {
                f64::NAN
            };
            let record = FitnessRecord {
                macs: net.macs_per_frame(),
                genome: g,
                quality,
                latency: lat,
                feasible,
            };
            Ok::<_, SearchError>((key, Evaluated { record, net }))
        };
        #[cfg(feature = "parallel")]
        let done: Vec<_> = {
            use rayon::prelude::*;
            fresh.into_par_iter().map(evaluate).collect::<Result<_, _>>()?
        };
        #[cfg(not(feature = "parallel"))]
        let done: Vec<_> = fresh.into_iter().map(evaluate).collect::<Result<_, _>>()?;
        for (k, e) in done {
            cache.insert(k, e);
        }

        let records: Vec<&FitnessRecord> = population.iter().map(|g| &cache[&g.key()].record).collect();
        for (i, r) in records.iter().enumerate() {
            candidates.push(CandidateRow {
                generation,
                candidate: i,
                record: (*r).clone(),
            });
        }
        let mut order: Vec<usize> = (0..population.len()).collect();
        order.sort_by(|&a, &b| rank_cmp(records[a], records[b]).then(a.cmp(&b)));
        let leader = records[order[0]];
        if leader.feasible && leader.quality.is_finite() {
            let better = best.as_ref().is_none_or(|k| leader.quality > cache[k].record.quality);
            if better {
                best = Some(leader.genome.key());
            }
        }
        let feasible: Vec<f64> = records
            .iter()
            .filter(|r| r.feasible && r.quality.is_finite())
            .map(|r| r.quality)
            .collect();
        generations.push(GenerationSummary {
            generation,
            best_quality: best.as_ref().map_or(f64::NAN, |k| cache[k].record.quality),
            mean_quality: if feasible.is_empty() {
                f64::NAN
            } else {
                feasible.iter().sum::<f64>() / feasible.len() as f64
            },
            feasible_fraction: records.iter().filter(|r| r.feasible).count() as f64 / records.len() as f64,
        });
        if best.is_none() {
            let fastest = records.iter().map(|r| r.latency.median_us).fold(f64::INFINITY, f64::min);
            return Err(SearchError::BudgetInfeasible {
                fastest_us: fastest,
                budget_us: cfg.budget_us,
            });
        }
        if generation + 1 == cfg.generations {
            break;
        }

        // elitism keeps the best feasible genome; tournaments of two pick parents
        let elite = cache[best.as_ref().unwrap()].record.genome.clone();
        let mut next = vec![elite];
        while next.len() < cfg.population {
            let a = rng.random_range(0..population.len());
            let b = rng.random_range(0..population.len());
            let winner = if rank_cmp(records[a], records[b]).then(a.cmp(&b)).is_le() { a } else { b };
            next.push(mutate_genome(&population[winner], cfg.mutation_rate, &cfg.space, &mut rng)?);
        }
        population = next;
    }

    let best = cache.remove(best.as_ref().unwrap()).unwrap();
    Ok(SearchResult {
        best: best.record,
        best_net: best.net,
        generations,
        candidates,
    })
}

/// `generation,candidate,quality_db,median_us,macs,feasible`
/// The generation-0 population `evolve` starts from for this config.
pub fn initial_population(cfg: &SearchConfig) -> Result<Vec<Genome>, SearchError> {
    sample_population(cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))
}

fn sample_population(cfg: &SearchConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Genome>, SearchError> {
    (0..cfg.population).map(|_| sample_genome(&cfg.space, rng)).collect()
}

pub fn history_csv(rows: &[CandidateRow]) -> String {
    let mut s = String::from("generation,candidate,quality_db,median_us,macs,feasible\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.generation, r.candidate, r.record.quality, r.record.latency.median_us, r.record.macs, r.record.feasible
        ));
    }
    s
}
