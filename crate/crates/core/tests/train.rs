use denoise_core::dsp::StftConfig;
use denoise_core::model::{Activation, Bottleneck, BottleneckKind, Genome, LevelGene, NetworkInstance};
use denoise_core::tensor::grad_check;
use denoise_core::train::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

fn short() -> SceneConfig {
    SceneConfig {
        duration_s: 1.0,
        ..Default::default()
    }
}

fn small_hp(lr: f64, steps: usize) -> HyperParams {
    HyperParams {
        learning_rate: lr,
        batch_frames: 8,
        batch_segments: 2,
        steps,
    }
}

fn net(g: &Genome, seed: u64) -> NetworkInstance {
    NetworkInstance::build(g, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn scenes_are_seed_deterministic() {
    let a = synth_scenes(&short(), 2, 5).unwrap();
    let b = synth_scenes(&short(), 2, 5).unwrap();
    assert_eq!(a, b);
    let c = synth_scenes(&short(), 2, 6).unwrap();
    assert_ne!(a[0].mixed, c[0].mixed);
}

#[test]
fn requested_snr_is_exact() {
    for kind in [NoiseKind::White, NoiseKind::Pink, NoiseKind::Babble] {
        let cfg = SceneConfig {
            snr_db: (-6.6, -6.6),
            noise: kind,
            ..short()
        };
        let m = synth_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        // power ratio of the stored components, computed here from the samples
        let p = |x: &[f32]| x.iter().map(|v| (*v as f64).powi(2)).sum::<f64>();
        let snr = 10.0 * (p(&m.clean.samples) / p(&m.noise.samples)).log10();
        assert!((snr + 6.6).abs() < 1e-6, "{kind:?}: {snr}");
    }
}

#[test]
fn white_noise_is_flat_across_octaves() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 1024;
    let x = white_noise(n * 256, &mut rng);
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut psd = vec![0.0; n / 2 + 1];
    for seg in x.chunks_exact(n) {
        let mut buf: Vec<Complex<f64>> = seg.iter().map(|&v| Complex::new(v, 0.0)).collect();
        fft.process(&mut buf);
        for (p, c) in psd.iter_mut().zip(&buf) {
            *p += c.norm_sqr();
        }
    }
    let overall = psd[1..n / 2].iter().sum::<f64>() / (n / 2 - 1) as f64;
    let mut lo = 4;
    while lo < n / 2 {
        let hi = (2 * lo).min(n / 2);
        let band = psd[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
        let db = 10.0 * (band / overall).log10();
        assert!(db.abs() <= 3.0, "band {lo}..{hi}: {db} dB");
        lo = hi;
    }
}

#[test]
fn scene_config_bounds() {
    assert!(SceneConfig { snr_db: (-13.0, 0.0), ..short() }.validate().is_err());
    assert!(SceneConfig { duration_s: 0.5, ..short() }.validate().is_err());
    assert!(small_hp(2.0, 1).validate().is_err());
    assert!(small_hp(1e-7, 1).validate().is_err());
    assert!(small_hp(0.0, 1).validate().is_ok());
}

#[test]
fn zero_learning_rate_freezes_weights() {
    let scenes = synth_scenes(&short(), 2, 1).unwrap();
    let init = net(&Genome::minimal(), 3);
    let (trained, trace) =
        train_sgd(init.clone(), &scenes, &StftConfig::default(), &small_hp(0.0, 5), &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
    assert_eq!(trace.len(), 5);
    assert_eq!(trained.params(), init.params());
}

#[test]
fn training_is_bit_deterministic() {
    let scenes = synth_scenes(&short(), 2, 1).unwrap();
    let run = || {
        train_sgd(net(&Genome::minimal(), 3), &scenes, &StftConfig::default(), &small_hp(0.02, 6), &mut ChaCha8Rng::seed_from_u64(11))
            .unwrap()
    };
    let (a, ta) = run();
    let (b, tb) = run();
    assert_eq!(ta, tb);
    assert_eq!(a.params(), b.params());
}

#[test]
fn tiny_net_loss_decreases() {
    let scenes = synth_scenes(&short(), 16, 4).unwrap();
    let hp = HyperParams {
        learning_rate: 0.03,
        batch_frames: 16,
        batch_segments: 4,
        steps: 200,
    };
    let (_, trace) = train_sgd(net(&Genome::minimal(), 5), &scenes, &StftConfig::default(), &hp, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let head: f64 = trace[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = trace[180..].iter().sum::<f64>() / 20.0;
    assert!(tail < head, "{head} -> {tail}");
}

#[test]
fn oracle_targets_have_zero_loss() {
    let scenes = synth_scenes(&short(), 1, 2).unwrap();
    let data = TrainSet::from_scenes(&scenes, &StftConfig::default(), 512).unwrap();
    let batch = sample_batch(&data, &small_hp(0.01, 1), &mut ChaCha8Rng::seed_from_u64(0));
    let mut tape = denoise_core::tensor::Tape::new();
    let y = tape.constant(batch.y.clone());
    let y2 = tape.constant(batch.y.clone());
    let loss = tape.mse(y, y2).unwrap();
    assert_eq!(tape.value(loss).item(), 0.0);
}

#[test]
fn network_gradient_matches_finite_differences() {
    let level = |channels, skip| LevelGene {
        channels,
        kernel: 3,
        freq_stride: 2,
        skip,
    };
    let scenes = synth_scenes(&short(), 1, 8).unwrap();
    for kind in [BottleneckKind::Conv, BottleneckKind::Gru, BottleneckKind::Lstm] {
        let g = Genome {
            levels: vec![level(4, true), level(4, false)],
            bottleneck: Bottleneck { kind, hidden: 8 },
            activation: Activation::Tanh,
        };
        let n = net(&g, 21);
        let data = TrainSet::from_scenes(&scenes, &StftConfig::default(), n.topology().bins).unwrap();
        let batch = sample_batch(&data, &small_hp(0.01, 1), &mut ChaCha8Rng::seed_from_u64(1));
        for i in 0..n.params().len() {
            let worst = grad_check(
                |tape, v| {
                    let p: Vec<_> = n
                        .params()
                        .iter()
                        .enumerate()
                        .map(|(j, t)| if j == i { v } else { tape.constant(t.clone()) })
                        .collect();
                    batch_loss(&n, tape, &p, &batch)
                },
                &n.params()[i],
                1e-5,
            )
            .unwrap();
            assert!(worst <= 1e-5, "{kind:?} tensor {i}: {worst}");
        }
    }
}

fn pbt_fixture() -> (TrainSet, Vec<denoise_core::audio::Mixture>) {
    let train = synth_scenes(&short(), 6, 1).unwrap();
    let valid = synth_scenes(&short(), 2, 99).unwrap();
    (TrainSet::from_scenes(&train, &StftConfig::default(), 512).unwrap(), valid)
}

fn pbt_cfg(lrs: Vec<f64>, rounds: usize) -> PbtConfig {
    PbtConfig {
        population: 4,
        rounds,
        steps_per_round: 15,
        initial_lrs: lrs,
        hp: small_hp(0.01, 0),
        ..Default::default()
    }
}

#[test]
fn pbt_is_deterministic_and_elitist() {
    let (data, valid) = pbt_fixture();
    let cfg = pbt_cfg(Vec::new(), 3);
    let run = || pbt_run(&Genome::minimal(), &cfg, &data, &valid, &StftConfig::default(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let a = run();
    let b = run();
    assert_eq!(a.lineage, b.lineage);
    assert_eq!(a.best.params(), b.best.params());
    assert_eq!(a.round_best.len(), 3);
    assert!(a.round_best.windows(2).all(|w| w[1] >= w[0]));
    let csv = lineage_csv(&a.lineage);
    assert!(csv.starts_with("step,member,loss,learning_rate,event\n"));
    // every exploit is followed by its explore on the same member
    for w in a.lineage.windows(2) {
        if let PbtEvent::Exploit { .. } = w[0].event {
            assert!(matches!(w[1].event, PbtEvent::Explore { .. }));
            assert_eq!(w[0].member, w[1].member);
        }
    }
}

#[test]
fn pbt_rejects_small_population() {
    let (data, valid) = pbt_fixture();
    let cfg = PbtConfig {
        population: 3,
        ..pbt_cfg(Vec::new(), 1)
    };
    assert!(pbt_run(&Genome::minimal(), &cfg, &data, &valid, &StftConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn pbt_lineage_concentrates_on_best_control_lr() {
    let (data, valid) = pbt_fixture();
    let lrs = vec![1e-1, 1e-2, 1e-3, 1e-4];
    let rounds = 4;
    let g = Genome::minimal();
    let init = NetworkInstance::build_with_bins(&g, 512, &mut ChaCha8Rng::seed_from_u64(30)).unwrap();
    // isolated single-member control runs, same budget as a PBT member
    let control: Vec<f64> = lrs
        .iter()
        .map(|&lr| {
            let mut n = init.clone();
            let mut st = SgdState::new(&n);
            let hp = small_hp(lr, 0);
            match sgd_steps(&mut n, &mut st, &data, &hp, rounds * 15, 0, &mut ChaCha8Rng::seed_from_u64(5)) {
                Ok(_) => validation_loss(&n, &data).unwrap(),
                Err(_) => f64::INFINITY,
            }
        })
        .collect();
    let best_origin = (0..lrs.len()).min_by(|&a, &b| control[a].total_cmp(&control[b])).unwrap();
    let r = pbt_run(&g, &pbt_cfg(lrs, rounds), &data, &valid, &StftConfig::default(), &mut ChaCha8Rng::seed_from_u64(30)).unwrap();
    let share = r.origins.iter().filter(|&&o| o == best_origin).count();
    assert!(share * 2 >= r.origins.len(), "control {control:?}, origins {:?}", r.origins);
}
