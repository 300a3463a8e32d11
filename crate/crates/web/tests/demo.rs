use denoise_web::{latency_budget, staircase, Demo};

#[test]
fn bundled_model_denoises() {
    let demo = Demo::new().unwrap();
    let r = demo.denoise_scene("pink", 0.0, 100, 3).unwrap();
    assert_eq!(r.output().len(), r.noisy().len());
    assert!(r.output_db() > r.noisy_db() + 2.0, "{} -> {}", r.noisy_db(), r.output_db());
    assert_eq!(r.delay(), 550);
}

#[test]
fn dry_mix_returns_the_input() {
    let demo = Demo::new().unwrap();
    let r = demo.denoise_scene("white", 3.0, 0, 4).unwrap();
    assert_eq!(r.output(), r.noisy());
}

#[test]
fn staircase_track_settles() {
    let t = staircase(-7.0, 0.17, "1up1down", 1).unwrap();
    assert!(t.converged());
    assert_eq!(t.snrs().len(), t.correct().len());
    assert!((t.srt_db() - t.equilibrium_db()).abs() < 4.0);
}

#[test]
fn budget_text_sums() {
    let text = latency_budget(6.0, 10.0, 10.0, 20.0);
    assert!(text.contains("total"));
    assert!(text.contains("70.94"));
}
