use denoise_core::dsp::StftConfig;
use denoise_core::eval::*;
use denoise_core::model::{Genome, NetworkInstance};
use denoise_core::train::SceneConfig;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Root of `sentence_p(p) = target` for 4-of-5 scoring, by bisection on the
/// closed-form polynomial 5p^4 - 4p^5.
fn p_star(target: f64) -> f64 {
    let f = |p: f64| 5.0 * p.powi(4) - 4.0 * p.powi(5) - target;
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

#[test]
fn listener_extremes_and_midpoint() {
    let l = PsychometricListener::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(l.words_correct(1e6, 5, &mut rng), 5);
    assert_eq!(l.words_correct(-1e6, 5, &mut rng), 0);
    let trials = 100_000;
    let total: usize = (0..trials).map(|_| l.words_correct(l.srt50, 5, &mut rng)).sum();
    let mean = total as f64 / (5 * trials) as f64;
    assert!((mean - 0.5).abs() < 0.01, "{mean}");
    assert!(PsychometricListener::new(0.0, 0.0).is_err());
}

/// Least-squares slope of logit(p_hat) against SNR, converted to probability per dB.
fn fitted_slope(l: &PsychometricListener, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let snrs: Vec<f64> = (-4..=4).map(|i| l.srt50 + i as f64 * 0.5).collect();
    let logits: Vec<f64> = snrs
        .iter()
        .map(|&s| {
            let n = 20_000;
            let k = l.words_correct(s, n, &mut rng) as f64;
            let p = k / n as f64;
            (p / (1.0 - p)).ln()
        })
        .collect();
    let mx = snrs.iter().sum::<f64>() / snrs.len() as f64;
    let my = logits.iter().sum::<f64>() / logits.len() as f64;
    let num: f64 = snrs.iter().zip(&logits).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = snrs.iter().map(|x| (x - mx).powi(2)).sum();
    num / den / 4.0
}

#[test]
fn doubled_slope_is_steeper() {
    let a = PsychometricListener::new(-7.0, 0.17).unwrap();
    let b = PsychometricListener::new(-7.0, 0.34).unwrap();
    let ratio = fitted_slope(&b, 1) / fitted_slope(&a, 2);
    assert!((ratio - 2.0).abs() <= 0.2, "{ratio}");
}

#[test]
fn equilibrium_is_computed_not_assumed() {
    let one = StaircaseConfig::default();
    assert!((one.equilibrium_word_p() - p_star(0.5)).abs() < 1e-12);
    assert!((p_star(0.5) - 0.686).abs() < 1e-3);
    let two = StaircaseConfig {
        rule: StaircaseRule::TwoUpOneDown,
        ..Default::default()
    };
    assert!((two.equilibrium_word_p() - p_star(2.0 / 3.0)).abs() < 1e-12);
}

fn mean_srt(rule: StaircaseRule, runs: u64) -> (f64, f64) {
    let l = PsychometricListener::new(-7.0, 0.17).unwrap();
    let cfg = StaircaseConfig {
        rule,
        ..Default::default()
    };
    let mut total = 0.0;
    for seed in 0..runs {
        let r = run_staircase(&l, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert!(r.converged);
        total += r.srt_db;
    }
    let target = match rule {
        StaircaseRule::OneUpOneDown => 0.5,
        StaircaseRule::TwoUpOneDown => 2.0 / 3.0,
    };
    (total / runs as f64, l.snr_for(p_star(target)))
}

#[test]
fn staircases_converge_to_their_equilibria() {
    for rule in [StaircaseRule::OneUpOneDown, StaircaseRule::TwoUpOneDown] {
        let (est, analytic) = mean_srt(rule, 200);
        assert!((est - analytic).abs() <= 1.0, "{rule:?}: {est} vs {analytic}");
    }
}

#[test]
fn perfect_listener_never_converges() {
    let cfg = StaircaseConfig::default();
    let r = run_staircase_with(&cfg, |_| Ok(5)).unwrap();
    assert!(!r.converged);
    assert_eq!(r.n_trials, cfg.max_trials);
    assert!(r.trials.windows(2).all(|w| w[1].snr_db < w[0].snr_db));
    assert!(r.trials.iter().all(|t| t.snr_db.is_finite()));
}

#[test]
fn trial_log_csv() {
    let csv = trials_csv(&[Trial {
        snr_db: -3.0,
        words_correct: 4,
    }]);
    assert_eq!(csv, "trial,snr_db,words_correct\n0,-3,4\n");
}

#[test]
fn staircase_config_validation() {
    let bad = StaircaseConfig {
        criterion: 6,
        ..Default::default()
    };
    assert!(bad.validate().is_err());
    let bad = StaircaseConfig {
        steps_db: vec![4.0, 2.0],
        ..Default::default()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn paired_t_fixtures() {
    let r = paired_t_test(&[2.0, 4.0], &[0.0, 0.0]).unwrap();
    assert!((r.t - 3.0).abs() < 1e-12);
    assert_eq!(r.df, 1);
    assert!(matches!(paired_t_test(&[1.0, 2.0], &[1.0, 2.0]), Err(EvalError::ZeroVariance)));
    assert_eq!(t_two_sided_p(0.0, 5.0), 1.0);
    // closed-form tails: df 1 is Cauchy, df 2 has p = 1 - |t| / sqrt(2 + t^2)
    for t in [0.3, 1.0, 3.0, 12.5] {
        let cauchy = 1.0 - 2.0 / std::f64::consts::PI * f64::atan(t);
        assert!((t_two_sided_p(t, 1.0) - cauchy).abs() < 1e-9);
        let two = 1.0 - t / (2.0 + t * t).sqrt();
        assert!((t_two_sided_p(t, 2.0) - two).abs() < 1e-9);
    }
}

#[test]
fn pearson_fixtures() {
    let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
    let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
    assert_eq!(pearson_r(&x, &y).unwrap(), 1.0);
    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    assert_eq!(pearson_r(&x, &neg).unwrap(), -1.0);
    assert!(matches!(pearson_r(&x, &[3.0; 10]), Err(EvalError::ZeroVariance)));

    let a = [2.1, 3.4, 1.9, 5.6, 4.4, 3.3, 6.1, 2.8, 4.9, 3.7];
    let b = [1.2, 2.9, 2.2, 4.1, 4.8, 2.5, 5.2, 1.9, 3.6, 3.9];
    // population moments via E[xy] - E[x]E[y]
    let n = a.len() as f64;
    let e = |f: &dyn Fn(usize) -> f64| (0..a.len()).map(f).sum::<f64>() / n;
    let (ma, mb) = (e(&|i| a[i]), e(&|i| b[i]));
    let cov = e(&|i| a[i] * b[i]) - ma * mb;
    let sa = (e(&|i| a[i] * a[i]) - ma * ma).sqrt();
    let sb = (e(&|i| b[i] * b[i]) - mb * mb).sqrt();
    assert!((pearson_r(&a, &b).unwrap() - cov / (sa * sb)).abs() < 1e-12);
}

#[test]
fn sign_test_balance() {
    let (p, n, pv) = sign_test(&[1.0, -1.0, 2.0, -2.0, 0.0]);
    assert_eq!((p, n), (2, 2));
    assert_eq!(pv, 1.0);
}

#[test]
fn preference_tie_and_granularity() {
    assert_eq!(preference_search(|_| 3.0, 5).unwrap(), 0);
    assert_eq!(preference_search(|r| -((r as f64) - 80.0).abs(), 5).unwrap(), 80);
    let mut calls = 0;
    preference_search(
        |_| {
            calls += 1;
            0.0
        },
        5,
    )
    .unwrap();
    // interval halving over 21 points needs far fewer than 21 evaluations
    assert!(calls <= 2 * 5);
}

#[test]
fn srt_reference_ratio_and_untrained_control() {
    let net = NetworkInstance::build(&Genome::desk(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let exp = SrtExperiment {
        runs: 6,
        scene_pool: 2,
        mix_ratios: vec![0, 80],
        scene: SceneConfig {
            duration_s: 1.0,
            ..Default::default()
        },
        ..Default::default()
    };
    let table = measure_srt_improvement(&net, &StftConfig::default(), &exp).unwrap();
    let zero = table.row(0).unwrap();
    assert_eq!(zero.mean_delta_db, 0.0);
    assert!(table.runs.iter().filter(|r| r.ratio == 0).all(|r| r.delta_db == 0.0));
    assert!(table.row(80).unwrap().mean_delta_db <= 0.2);
    assert!(table.to_csv().starts_with("ratio,mean_srt_db"));
    assert_eq!(table.runs_csv().lines().count(), 1 + 12);
}

proptest! {
    #[test]
    fn preference_finds_grid_argmax(peak in 0.0f64..100.0, shape in 0usize..3, width in 2.0f64..60.0) {
        let oracle = |r: u32| {
            let d = r as f64 - peak;
            match shape {
                0 => -d * d,
                1 => -d.abs(),
                _ => (-(d / width).powi(2)).exp() + 1e-3 * -d.abs(),
            }
        };
        let grid: Vec<u32> = (0..=20).map(|i| i * 5).collect();
        let scores: Vec<f64> = grid.iter().map(|&r| oracle(r)).collect();
        let best = (0..grid.len()).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
        // skip exact ties between neighbours; those are not strictly unimodal
        prop_assume!(scores.iter().filter(|s| **s == scores[best]).count() == 1);
        prop_assert_eq!(preference_search(oracle, 5).unwrap(), grid[best]);
    }

    #[test]
    fn affine_data_correlates_exactly(
        x in prop::collection::vec(-100.0f64..100.0, 3..40),
        a in prop_oneof![-50.0f64..-0.01, 0.01f64..50.0],
        b in -100.0f64..100.0,
    ) {
        let y: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        if let Ok(r) = pearson_r(&x, &y) {
            prop_assert_eq!(r, a.signum());
        }
    }

    #[test]
    fn t_test_sign_symmetry(d in prop::collection::vec(-5.0f64..5.0, 3..12)) {
        let zeros = vec![0.0; d.len()];
        if let (Ok(a), Ok(b)) = (paired_t_test(&d, &zeros), paired_t_test(&zeros, &d)) {
            prop_assert!((a.t + b.t).abs() < 1e-12);
            prop_assert!((a.p - b.p).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a.p));
        }
    }
}
