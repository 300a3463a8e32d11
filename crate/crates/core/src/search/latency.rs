//! Per-frame execution time of the streaming network.

use std::collections::BTreeMap;
use std::sync::Mutex;
use std::time::Instant;

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SearchError;
use crate::model::{Genome, NetworkInstance};

/// Timing never overlaps with other timing in the same process.
static TIMING: Mutex<()> = Mutex::new(());

pub const MIN_WARMUP: usize = 50;
pub const MIN_FRAMES: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub median_us: f64,
    pub p95_us: f64,
    pub n_frames: usize,
}

impl LatencyStats {
    /// Median and 95th percentile (nearest rank) of per-frame samples.
    pub fn from_samples(samples: &[f64]) -> Self {
        assert!(!samples.is_empty());
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let median = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        Self {
            median_us: median,
            p95_us: s[rank - 1].max(median),
            n_frames: n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatencyConfig {
    pub warmup_frames: usize,
    pub frames: usize,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        Self {
            warmup_frames: MIN_WARMUP,
            frames: MIN_FRAMES,
        }
    }
}

/// Wall-clock time of 32-bit `stream_step` calls on random frames, warmup
/// excluded. Counts below the minimums are raised to them.
pub fn measure_latency(net: &NetworkInstance, cfg: &LatencyConfig) -> LatencyStats {
    let warmup = cfg.warmup_frames.max(MIN_WARMUP);
    let frames = cfg.frames.max(MIN_FRAMES);
    let mut rng = ChaCha8Rng::seed_from_u64(0x1a7e);
    let inputs: Vec<Vec<Complex<f32>>> = (0..16)
        .map(|_| {
            (0..net.frame_bins())
                .map(|_| Complex::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect()
        })
        .collect();
    let mut streamer = net.streamer::<f32>();
    let _guard = TIMING.lock().unwrap_or_else(|e| e.into_inner());
    let mut samples = Vec::with_capacity(frames);
    for i in 0..warmup + frames {
        let frame = &inputs[i % inputs.len()];
        let t0 = Instant::now();
        let mask = streamer.step(frame).expect("frame width matches the network");
        let dt = t0.elapsed();
        std::hint::black_box(mask);
        if i >= warmup {
            samples.push(dt.as_secs_f64() * 1e6);
        }
    }
    LatencyStats::from_samples(&samples)
}

/// Where candidate latencies come from.
#[derive(Debug, Clone)]
pub enum LatencySource {
    /// Timed on this machine; every measurement is recorded for later replay.
    Measured { cfg: LatencyConfig, recorded: BTreeMap<String, LatencyStats> },
    /// Looked up by genome key from an earlier recording.
    Replay(BTreeMap<String, LatencyStats>),
    /// Deterministic cost model: `overhead_us + macs * ns_per_mac / 1000`.
    Estimate { ns_per_mac: f64, overhead_us: f64 },
}

impl LatencySource {
    pub fn measured(cfg: LatencyConfig) -> Self {
        Self::Measured {
            cfg,
            recorded: BTreeMap::new(),
        }
    }

    pub fn latency(&mut self, genome: &Genome, net: &NetworkInstance) -> Result<LatencyStats, SearchError> {
        match self {
            Self::Measured { cfg, recorded } => {
                let s = measure_latency(net, cfg);
                recorded.insert(genome.key(), s);
                Ok(s)
            }
            Self::Replay(table) => table
                .get(&genome.key())
                .copied()
                .ok_or_else(|| SearchError::ReplayMissing(genome.key())),
            Self::Estimate {
                ns_per_mac,
                overhead_us,
            } => {
                let us = *overhead_us + net.macs_per_frame() as f64 * *ns_per_mac / 1000.0;
                Ok(LatencyStats {
                    median_us: us,
                    p95_us: us,
                    n_frames: MIN_FRAMES,
                })
            }
        }
    }

    /// The measurements taken so far (measured mode) or the replay table.
    pub fn table(&self) -> Option<&BTreeMap<String, LatencyStats>> {
        match self {
            Self::Measured { recorded, .. } => Some(recorded),
            Self::Replay(t) => Some(t),
            Self::Estimate { .. } => None,
        }
    }
}

/// Replay table as CSV: `genome,median_us,p95_us,n_frames`.
pub fn latency_table_csv(table: &BTreeMap<String, LatencyStats>) -> String {
    let mut s = String::from("genome,median_us,p95_us,n_frames\n");
    for (k, v) in table {
        s.push_str(&format!("{k},{},{},{}\n", v.median_us, v.p95_us, v.n_frames));
    }
    s
}

pub fn parse_latency_table(csv: &str) -> Result<BTreeMap<String, LatencyStats>, SearchError> {
    let mut out = BTreeMap::new();
    for (i, line) in csv.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let err = || SearchError::Config(format!("latency table line {}: {line:?}", i + 1));
        if f.len() != 4 {
            return Err(err());
        }
        let stats = LatencyStats {
            median_us: f[1].parse().map_err(|_| err())?,
            p95_us: f[2].parse().map_err(|_| err())?,
            n_frames: f[3].parse().map_err(|_| err())?,
        };
        out.insert(f[0].to_string(), stats);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles() {
        let s: Vec<f64> = (1..=200).map(|v| v as f64).collect();
        let st = LatencyStats::from_samples(&s);
        assert_eq!(st.median_us, 100.5);
        assert_eq!(st.p95_us, 190.0);
        assert_eq!(st.n_frames, 200);
    }

    #[test]
    fn table_round_trip() {
        let mut t = BTreeMap::new();
        t.insert(
            "c4k3s1-conv8-relu".to_string(),
            LatencyStats {
                median_us: 12.5,
                p95_us: 20.25,
                n_frames: 200,
            },
        );
        assert_eq!(parse_latency_table(&latency_table_csv(&t)).unwrap(), t);
        assert!(parse_latency_table("h\nx,1,2\n").is_err());
    }
}
