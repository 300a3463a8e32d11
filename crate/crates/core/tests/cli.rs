use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use denoise_core::audio::{read_wav, write_wav, AudioBuffer};
use denoise_core::model::{save_model, Genome, NetworkInstance};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn adnz(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adnz")).args(args).output().unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn stats_ttest_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("d.csv");
    fs::write(&csv, "x,y\n2,0\n4,0\n").unwrap();
    let out = adnz(&["stats", "--csv", s(&csv), "--test", "ttest"]);
    assert!(out.status.success());
    let line = text(&out.stdout);
    assert!(line.starts_with("t=3 df=1 p="), "{line}");

    fs::write(&csv, "1,3\n2,5\n3,7\n").unwrap();
    let out = adnz(&["stats", "--csv", s(&csv), "--test", "pearson"]);
    assert_eq!(text(&out.stdout).trim(), "r=1");
}

#[test]
fn failures_exit_nonzero_with_one_line() {
    let out = adnz(&["frobnicate"]);
    assert!(!out.status.success());

    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("same.csv");
    fs::write(&csv, "1,1\n2,2\n").unwrap();
    let out = adnz(&["stats", "--csv", s(&csv), "--test", "ttest"]);
    assert_eq!(out.status.code(), Some(1));
    let err = text(&out.stderr);
    let errors: Vec<&str> = err.lines().filter(|l| l.starts_with("error:")).collect();
    assert_eq!(errors.len(), 1, "{err}");

    let out = adnz(&["bench", "--model", s(&dir.path().join("missing.adnz"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_lists_config_defaults() {
    let out = adnz(&["train", "--help"]);
    assert!(out.status.success());
    assert!(text(&out.stdout).contains("learning_rate"));
}

#[test]
fn dry_mix_is_delayed_input() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m.adnz");
    let net = NetworkInstance::build(&Genome::minimal(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    save_model(&model, &net).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x: Vec<f32> = (0..5000).map(|_| rng.random_range(-0.5..0.5)).collect();
    let input = dir.path().join("in.wav");
    write_wav(&input, &AudioBuffer::new(x.clone(), 22050).unwrap()).unwrap();
    let output = dir.path().join("out.wav");
    let out = adnz(&[
        "denoise", "--in", s(&input), "--out", s(&output), "--model", s(&model), "--mix", "0", "--chunk", "37", "--tail",
    ]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(text(&out.stderr).contains("delay = 550"));
    let y = read_wav(&output).unwrap().samples;
    assert_eq!(y.len(), x.len() + 550);
    assert!(y[..550].iter().all(|v| *v == 0.0));
    assert_eq!(&y[550..], &x[..]);

    let out = adnz(&["denoise", "--in", s(&input), "--out", s(&output), "--model", s(&model), "--mix", "101"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bench_reports_budget() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m.adnz");
    let net = NetworkInstance::build(&Genome::minimal(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    save_model(&model, &net).unwrap();
    let out = adnz(&["bench", "--model", s(&model), "--frames", "200", "--csv"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let csv = text(&out.stdout);
    assert!(csv.starts_with("stage,ms\n"), "{csv}");
    assert!(csv.contains("algorithmic,"));
    assert!(csv.contains("total,"));
}

#[test]
fn training_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let model = dir.path().join(format!("{name}.adnz"));
        let trace = dir.path().join(format!("{name}.csv"));
        let cfg = dir.path().join(format!("{name}.toml"));
        fs::write(
            &cfg,
            format!(
                "seed = 5\nout = {:?}\ntrace = {:?}\n[hp]\nsteps = 4\nbatch_frames = 8\n[data]\ntrain_scenes = 2\nvalid_scenes = 1\n[data.scene]\nduration_s = 1.0\n",
                s(&model),
                s(&trace)
            ),
        )
        .unwrap();
        let out = adnz(&["train", "--config", s(&cfg)]);
        assert!(out.status.success(), "{}", text(&out.stderr));
        assert!(text(&out.stderr).contains("seed = 5"));
        (fs::read(model).unwrap(), fs::read(trace).unwrap())
    };
    let a = run("a");
    let b = run("b");
    assert_eq!(a, b);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "sed = 5\n").unwrap();
    let out = adnz(&["train", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    fs::write(&cfg, "[hp]\nlearning_rate = 5.0\n").unwrap();
    let out = adnz(&["train", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
}
