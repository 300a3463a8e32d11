use std::collections::BTreeMap;

use denoise_core::dsp::StftConfig;
use denoise_core::model::{Activation, Bottleneck, BottleneckKind, Genome, LevelGene, NetworkInstance};
use denoise_core::search::*;
use denoise_core::train::{synth_scenes, HyperParams, SceneConfig, TrainSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn build(g: &Genome) -> NetworkInstance {
    NetworkInstance::build(g, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
}

#[test]
fn thousand_samples_are_buildable() {
    let space = GenomeSpace::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let g = sample_genome(&space, &mut rng).unwrap();
        g.validate().unwrap();
        let n = build(&g);
        assert_eq!(n.topology().levels.len(), g.levels.len());
    }
}

#[test]
fn sampling_is_seeded() {
    let space = GenomeSpace::default();
    let a = sample_genome(&space, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let b = sample_genome(&space, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn point_space_yields_the_point() {
    let g = sized(8, 16);
    let space = GenomeSpace::point(&g);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..20 {
        assert_eq!(sample_genome(&space, &mut rng).unwrap(), g);
        assert_eq!(mutate_genome(&g, 1.0, &space, &mut rng).unwrap(), g);
    }
}

#[test]
fn mutation_keeps_validity() {
    let space = GenomeSpace::default();
    let g = Genome::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    assert_eq!(mutate_genome(&g, 0.0, &space, &mut rng).unwrap(), g);
    let mut changed = 0;
    for _ in 0..1000 {
        let c = mutate_genome(&g, 0.3, &space, &mut rng).unwrap();
        c.validate().unwrap();
        build(&c);
        changed += usize::from(c != g);
    }
    assert!(changed > 900);
    assert!(mutate_genome(&g, 1.5, &space, &mut rng).is_err());
}

#[test]
fn empty_space_is_rejected() {
    let space = GenomeSpace {
        hidden: Vec::new(),
        ..Default::default()
    };
    assert!(matches!(
        sample_genome(&space, &mut ChaCha8Rng::seed_from_u64(0)),
        Err(SearchError::Space(_))
    ));
}

fn sized(channels: usize, hidden: usize) -> Genome {
    let level = LevelGene {
        channels,
        kernel: 3,
        freq_stride: 2,
        skip: true,
    };
    Genome {
        levels: vec![level, level],
        bottleneck: Bottleneck {
            kind: BottleneckKind::Gru,
            hidden,
        },
        activation: Activation::Relu,
    }
}

#[test]
fn latency_grows_with_width() {
    let cfg = LatencyConfig::default();
    for (small, large) in [(4, 8), (8, 16), (12, 24), (16, 32), (32, 64)] {
        let a = measure_latency(&build(&sized(small, 8)), &cfg);
        let b = measure_latency(&build(&sized(large, 16)), &cfg);
        assert!(b.median_us >= 0.9 * a.median_us, "{small}->{large}: {a:?} vs {b:?}");
    }
}

#[test]
fn latency_is_stable_and_well_formed() {
    let net = build(&Genome::desk());
    let cfg = LatencyConfig {
        warmup_frames: 0,
        frames: 10,
    };
    let a = measure_latency(&net, &cfg);
    let b = measure_latency(&net, &cfg);
    assert!(a.n_frames >= MIN_FRAMES);
    assert!(a.median_us <= a.p95_us);
    let ratio = b.median_us / a.median_us;
    assert!((0.75..=1.25).contains(&ratio), "{a:?} vs {b:?}");
    assert!(measure_latency(&build(&Genome::minimal()), &cfg).median_us > 0.0);
}

struct Fixture {
    data: TrainSet,
    valid: Vec<denoise_core::audio::Mixture>,
}

fn fixture() -> Fixture {
    let scene = SceneConfig {
        duration_s: 1.0,
        ..Default::default()
    };
    let train = synth_scenes(&scene, 3, 1).unwrap();
    Fixture {
        data: TrainSet::from_scenes(&train, &StftConfig::default(), 512).unwrap(),
        valid: synth_scenes(&scene, 1, 2).unwrap(),
    }
}

fn small_search(seed: u64, budget_us: f64) -> SearchConfig {
    SearchConfig {
        population: 4,
        generations: 3,
        budget_us,
        train_steps_per_candidate: 4,
        seed,
        hp: HyperParams {
            learning_rate: 0.03,
            batch_frames: 8,
            batch_segments: 2,
            steps: 4,
        },
        space: GenomeSpace {
            max_levels: 2,
            channels: vec![4, 8],
            hidden: vec![8],
            ..Default::default()
        },
        ..Default::default()
    }
}

fn estimate() -> LatencySource {
    LatencySource::Estimate {
        ns_per_mac: 1.0,
        overhead_us: 20.0,
    }
}

fn check_invariants(r: &SearchResult, budget: f64) {
    assert!(r.best.feasible);
    assert!(r.best.latency.median_us <= budget);
    assert!(r.generations.windows(2).all(|w| w[1].best_quality >= w[0].best_quality));
    for c in &r.candidates {
        assert_eq!(c.record.feasible, c.record.latency.median_us <= budget);
        c.record.genome.validate().unwrap();
        if !c.record.feasible {
            assert!(c.record.quality.is_nan());
        }
    }
    assert_eq!(r.best_net.macs_per_frame(), r.best.macs);
}

#[test]
fn estimate_mode_is_deterministic() {
    let f = fixture();
    let cfg = small_search(7, 1500.0);
    let stft = StftConfig::default();
    let a = evolve(&cfg, &f.data, &f.valid, &stft, &mut estimate()).unwrap();
    let b = evolve(&cfg, &f.data, &f.valid, &stft, &mut estimate()).unwrap();
    assert_eq!(a.best, b.best);
    assert_eq!(history_csv(&a.candidates), history_csv(&b.candidates));
    assert_eq!(a.best_net.params(), b.best_net.params());
    check_invariants(&a, cfg.budget_us);
    assert!(history_csv(&a.candidates).starts_with("generation,candidate,quality_db,median_us,macs,feasible\n"));
}

#[test]
fn replay_mode_reproduces_a_measured_run() {
    let f = fixture();
    let cfg = small_search(2, DEFAULT_BUDGET_US);
    let stft = StftConfig::default();
    let mut measured = LatencySource::measured(LatencyConfig::default());
    let first = evolve(&cfg, &f.data, &f.valid, &stft, &mut measured).unwrap();
    check_invariants(&first, cfg.budget_us);
    let table = parse_latency_table(&latency_table_csv(measured.table().unwrap())).unwrap();
    let a = evolve(&cfg, &f.data, &f.valid, &stft, &mut LatencySource::Replay(table.clone())).unwrap();
    let b = evolve(&cfg, &f.data, &f.valid, &stft, &mut LatencySource::Replay(table)).unwrap();
    assert_eq!(a.best, b.best);
    assert_eq!(history_csv(&a.candidates), history_csv(&b.candidates));
    assert_eq!(history_csv(&a.candidates), history_csv(&first.candidates));

    let missing = evolve(&cfg, &f.data, &f.valid, &stft, &mut LatencySource::Replay(BTreeMap::new()));
    assert!(matches!(missing, Err(SearchError::ReplayMissing(_))));
}

#[test]
fn impossible_budget_names_fastest_candidate() {
    let f = fixture();
    let cfg = small_search(1, 1.0);
    match evolve(&cfg, &f.data, &f.valid, &StftConfig::default(), &mut estimate()) {
        Err(SearchError::BudgetInfeasible { fastest_us, budget_us }) => {
            assert_eq!(budget_us, 1.0);
            assert!(fastest_us > 20.0);
        }
        other => panic!("expected infeasible budget, got {other:?}"),
    }
}

#[test]
fn config_bounds() {
    assert!(SearchConfig { population: 3, ..Default::default() }.validate().is_err());
    assert!(SearchConfig { budget_us: 0.0, ..Default::default() }.validate().is_err());
    assert!(SearchConfig { budget_us: f64::INFINITY, ..Default::default() }.validate().is_ok());
    assert_eq!(DEFAULT_BUDGET_US, 5986.0);
}

#[test]
fn initial_population_is_generation_zero() {
    let f = fixture();
    let cfg = small_search(1, f64::INFINITY);
    let r = evolve(&cfg, &f.data, &f.valid, &StftConfig::default(), &mut estimate()).unwrap();
    let seen: Vec<String> = r.candidates.iter().filter(|c| c.generation == 0).map(|c| c.record.genome.key()).collect();
    let init = initial_population(&cfg).unwrap();
    assert_eq!(init.len(), cfg.population);
    for g in &init {
        assert!(seen.contains(&g.key()), "{g}");
    }
}
