//! Discrete genome search space, sampling and mutation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SearchError;
use crate::model::{
    Activation, Bottleneck, BottleneckKind, Genome, LevelGene, Topology, CHANNEL_RANGE, HIDDEN_RANGE, KERNELS,
    MAX_LEVELS, NETWORK_BINS, STRIDES,
};

const MAX_RETRIES: usize = 100;

/// Allowed values per gene. Every list must be nonempty and inside the
/// genome's own ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenomeSpace {
    pub min_levels: usize,
    pub max_levels: usize,
    pub channels: Vec<usize>,
    pub kernels: Vec<usize>,
    pub strides: Vec<usize>,
    pub skips: Vec<bool>,
    pub bottlenecks: Vec<BottleneckKind>,
    pub hidden: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl Default for GenomeSpace {
    fn default() -> Self {
        Self {
            min_levels: 1,
            max_levels: 3,
            channels: vec![4, 8, 12, 16, 24, 32],
            kernels: KERNELS.to_vec(),
            strides: STRIDES.to_vec(),
            skips: vec![true, false],
            bottlenecks: BottleneckKind::ALL.to_vec(),
            hidden: vec![8, 16, 24, 32],
            activations: Activation::ALL.to_vec(),
        }
    }
}

impl GenomeSpace {
    /// The space containing exactly `g`.
    pub fn point(g: &Genome) -> Self {
        let l = &g.levels[0];
        let uniform = g.levels.iter().all(|x| x == l);
        assert!(uniform, "a point space needs identical levels");
        Self {
            min_levels: g.levels.len(),
            max_levels: g.levels.len(),
            channels: vec![l.channels],
            kernels: vec![l.kernel],
            strides: vec![l.freq_stride],
            skips: vec![l.skip],
            bottlenecks: vec![g.bottleneck.kind],
            hidden: vec![g.bottleneck.hidden],
            activations: vec![g.activation],
        }
    }

    pub fn validate(&self) -> Result<(), SearchError> {
        let bad = |m: &str| Err(SearchError::Space(m.to_string()));
        if self.min_levels == 0 || self.min_levels > self.max_levels || self.max_levels > MAX_LEVELS {
            return bad("level range must satisfy 1 <= min <= max <= 4");
        }
        if self.channels.is_empty()
            || self.kernels.is_empty()
            || self.strides.is_empty()
            || self.skips.is_empty()
            || self.bottlenecks.is_empty()
            || self.hidden.is_empty()
            || self.activations.is_empty()
        {
            return bad("every gene needs at least one allowed value");
        }
        if self.channels.iter().any(|c| !(CHANNEL_RANGE.0..=CHANNEL_RANGE.1).contains(c)) {
            return bad("channel choice outside the genome range");
        }
        if self.hidden.iter().any(|h| !(HIDDEN_RANGE.0..=HIDDEN_RANGE.1).contains(h)) {
            return bad("hidden choice outside the genome range");
        }
        if self.kernels.iter().any(|k| !KERNELS.contains(k)) || self.strides.iter().any(|s| !STRIDES.contains(s)) {
            return bad("kernel or stride choice not supported");
        }
        Ok(())
    }

    fn level<R: Rng + ?Sized>(&self, rng: &mut R) -> LevelGene {
        LevelGene {
            channels: pick(&self.channels, rng),
            kernel: pick(&self.kernels, rng),
            freq_stride: pick(&self.strides, rng),
            skip: pick(&self.skips, rng),
        }
    }
}

fn pick<T: Copy, R: Rng + ?Sized>(xs: &[T], rng: &mut R) -> T {
    xs[rng.random_range(0..xs.len())]
}

fn legal(g: &Genome) -> bool {
    g.validate().is_ok() && Topology::new(g, NETWORK_BINS).is_ok()
}

/// Uniform draw over the discrete choices, redrawn until shape-legal.
pub fn sample_genome<R: Rng + ?Sized>(space: &GenomeSpace, rng: &mut R) -> Result<Genome, SearchError> {
    space.validate()?;
    for _ in 0..MAX_RETRIES {
        let n = rng.random_range(space.min_levels..=space.max_levels);
        let g = Genome {
            levels: (0..n).map(|_| space.level(rng)).collect(),
            bottleneck: Bottleneck {
                kind: pick(&space.bottlenecks, rng),
                hidden: pick(&space.hidden, rng),
            },
            activation: pick(&space.activations, rng),
        };
        if legal(&g) {
            return Ok(g);
        }
    }
    Err(SearchError::RetriesExhausted(MAX_RETRIES))
}

/// Resamples each gene independently with probability `rate`. The level
/// count is one gene: it moves by one level up or down within the space.
pub fn mutate_genome<R: Rng + ?Sized>(
    g: &Genome,
    rate: f64,
    space: &GenomeSpace,
    rng: &mut R,
) -> Result<Genome, SearchError> {
    space.validate()?;
    if !(0.0..=1.0).contains(&rate) {
        return Err(SearchError::Config(format!("mutation rate {rate} outside [0, 1]")));
    }
    if rate == 0.0 {
        return Ok(g.clone());
    }
    for _ in 0..MAX_RETRIES {
        let mut c = g.clone();
        if rng.random_bool(rate) {
            let n = c.levels.len();
            let mut options = Vec::new();
            if n > space.min_levels {
                options.push(n - 1);
            }
            if n < space.max_levels {
                options.push(n + 1);
            }
            if !options.is_empty() {
                let target = pick(&options, rng);
                if target > n {
                    c.levels.push(space.level(rng));
                } else {
                    c.levels.pop();
                }
            }
        }
        for l in &mut c.levels {
            if rng.random_bool(rate) {
                l.channels = pick(&space.channels, rng);
            }
            if rng.random_bool(rate) {
                l.kernel = pick(&space.kernels, rng);
            }
            if rng.random_bool(rate) {
                l.freq_stride = pick(&space.strides, rng);
            }
            if rng.random_bool(rate) {
                l.skip = pick(&space.skips, rng);
            }
        }
        if rng.random_bool(rate) {
            c.bottleneck.kind = pick(&space.bottlenecks, rng);
        }
        if rng.random_bool(rate) {
            c.bottleneck.hidden = pick(&space.hidden, rng);
        }
        if rng.random_bool(rate) {
            c.activation = pick(&space.activations, rng);
        }
        if legal(&c) {
            return Ok(c);
        }
    }
    Err(SearchError::RetriesExhausted(MAX_RETRIES))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_space_is_rejected() {
        let mut s = GenomeSpace::default();
        s.channels.clear();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(sample_genome(&s, &mut rng), Err(SearchError::Space(_))));
        let s = GenomeSpace {
            hidden: vec![4],
            ..Default::default()
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn point_space_samples_and_mutates_to_itself() {
        let g = Genome::minimal();
        let s = GenomeSpace::point(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(sample_genome(&s, &mut rng).unwrap(), g);
        assert_eq!(mutate_genome(&g, 1.0, &s, &mut rng).unwrap(), g);
    }

    #[test]
    fn zero_rate_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = sample_genome(&GenomeSpace::default(), &mut rng).unwrap();
        assert_eq!(mutate_genome(&g, 0.0, &GenomeSpace::default(), &mut rng).unwrap(), g);
        assert!(mutate_genome(&g, 1.5, &GenomeSpace::default(), &mut rng).is_err());
    }
}
