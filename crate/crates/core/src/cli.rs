//! The `adnz` command line.
//!
//! Every subcommand that trains or searches reads a TOML config. Missing
//! keys take their defaults, unknown keys are rejected, and `--help` on the
//! subcommand prints the full default file.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, write_wav, AudioBuffer, Mixture};
use crate::dsp::StftConfig;
use crate::eval::{measure_srt_improvement, paired_t_test, pearson_r, SrtExperiment};
use crate::model::{load_model, save_model, Genome, NetworkInstance, NETWORK_BINS};
use crate::prune::{prune_loop, PruneSchedule};
use crate::runtime::{default_stack, latency_report, StackStage, StreamingDenoiser};
use crate::search::{
    evolve, history_csv, latency_table_csv, measure_latency, parse_latency_table, LatencyConfig, LatencySource,
    SearchConfig,
};
use crate::train::{lineage_csv, pbt_run, sgd_steps, synth_scenes, HyperParams, PbtConfig, SceneConfig, SgdState, TrainSet};

/// Environment variable limiting worker threads.
pub const THREADS_ENV: &str = "ADNZ_THREADS";

type CliResult<T> = Result<T, String>;

#[derive(Parser, Debug)]
#[command(name = "adnz", version, about = "Streaming speech denoiser with architecture search and pruning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Denoise a WAV file through the streaming pipeline.
    Denoise {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Wet share in percent, 0..=100.
        #[arg(long, default_value_t = 80)]
        mix: i64,
        /// Samples pushed per call; the output does not depend on it.
        #[arg(long, default_value_t = 132)]
        chunk: usize,
        /// Append one window of silence so the input's tail is flushed out.
        #[arg(long)]
        tail: bool,
    },
    /// Train a network on synthetic scenes.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evolve architectures under a latency budget.
    Search {
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Prune a trained model with fine-tuning between steps.
    Prune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulated SRT staircases through the denoiser.
    EvalSrt {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Per-frame compute time and the end-to-end latency budget.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 1000)]
        frames: usize,
        /// External stages as name=ms pairs.
        #[arg(long, value_delimiter = ',', default_value = "phone=10,streamer=10,wireless=20")]
        stack: Vec<String>,
        /// Print CSV instead of aligned text.
        #[arg(long)]
        csv: bool,
    },
    /// Statistics on a two-column CSV.
    Stats {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, value_enum)]
        test: StatTest,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StatTest {
    Ttest,
    Pearson,
}

/// Scenes for training and validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub scene: SceneConfig,
    pub train_scenes: usize,
    pub valid_scenes: usize,
    pub train_seed: u64,
    pub valid_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig {
                duration_s: 2.0,
                ..SceneConfig::default()
            },
            train_scenes: 32,
            valid_scenes: 6,
            train_seed: 1,
            valid_seed: 999,
        }
    }
}

impl DataConfig {
    fn validate(&self) -> CliResult<()> {
        self.scene.validate().map_err(|e| e.to_string())?;
        if self.train_scenes == 0 || self.valid_scenes == 0 {
            return Err("train_scenes and valid_scenes must be positive".into());
        }
        Ok(())
    }

    fn load(&self, stft: &StftConfig) -> CliResult<(TrainSet, Vec<Mixture>)> {
        let train = synth_scenes(&self.scene, self.train_scenes, self.train_seed).map_err(|e| e.to_string())?;
        let valid = synth_scenes(&self.scene, self.valid_scenes, self.valid_seed).map_err(|e| e.to_string())?;
        let data = TrainSet::from_scenes(&train, stft, NETWORK_BINS).map_err(|e| e.to_string())?;
        Ok((data, valid))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRunConfig {
    pub seed: u64,
    /// Model file written at the end.
    pub out: PathBuf,
    /// Per-step loss trace (or PBT lineage) as CSV.
    pub trace: Option<PathBuf>,
    pub genome: Genome,
    pub hp: HyperParams,
    /// Present: run population based training instead of a single SGD run.
    pub pbt: Option<PbtConfig>,
    pub data: DataConfig,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: "model.adnz".into(),
            trace: None,
            genome: Genome::desk(),
            hp: HyperParams {
                learning_rate: 0.03,
                steps: 2000,
                ..HyperParams::default()
            },
            pbt: None,
            data: DataConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatencyMode {
    Measured,
    Replay,
    Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyModeConfig {
    pub mode: LatencyMode,
    /// Table recorded by an earlier measured run (replay mode).
    pub table: Option<PathBuf>,
    pub ns_per_mac: f64,
    pub overhead_us: f64,
    pub timing: LatencyConfig,
}

impl Default for LatencyModeConfig {
    fn default() -> Self {
        Self {
            mode: LatencyMode::Measured,
            table: None,
            ns_per_mac: 1.0,
            overhead_us: 20.0,
            timing: LatencyConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchRunConfig {
    pub search: SearchConfig,
    pub latency: LatencyModeConfig,
    pub data: DataConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneRunConfig {
    pub seed: u64,
    pub schedule: PruneSchedule,
    pub data: DataConfig,
}

impl Default for PruneRunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            schedule: PruneSchedule::default(),
            data: DataConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalRunConfig {
    pub experiment: SrtExperiment,
    /// Per-run SRT log as CSV.
    pub runs_out: Option<PathBuf>,
}

fn load_config<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    toml::from_str(&text).map_err(|e| format!("{}: {}", path.display(), e.message()))
}

fn echo<T: Serialize>(cfg: &T, seed: u64) {
    eprintln!("# seed = {seed}");
    for line in toml::to_string(cfg).unwrap_or_default().lines() {
        eprintln!("# {line}");
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| format!("{}: {e}", path.display()))
}

fn command() -> clap::Command {
    let defaults = |t: String| format!("Config defaults (TOML):\n\n{t}");
    Cli::command()
        .mut_subcommand("train", |c| {
            c.after_long_help(defaults(toml::to_string(&TrainRunConfig::default()).unwrap()))
        })
        .mut_subcommand("search", |c| {
            c.after_long_help(defaults(toml::to_string(&SearchRunConfig::default()).unwrap()))
        })
        .mut_subcommand("prune", |c| {
            c.after_long_help(defaults(toml::to_string(&PruneRunConfig::default()).unwrap()))
        })
        .mut_subcommand("eval-srt", |c| {
            c.after_long_help(defaults(toml::to_string(&EvalRunConfig::default()).unwrap()))
        })
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 2;
        }
    };
    configure_threads();
    match run(cli.command) {
        Ok(()) => 0,
        Err(msg) => {
            eprintln!("error: {}", msg.lines().next().unwrap_or(""));
            1
        }
    }
}

fn configure_threads() {
    #[cfg(feature = "parallel")]
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

fn run(cmd: Command) -> CliResult<()> {
    let stft = StftConfig::default();
    match cmd {
        Command::Denoise {
            input,
            out,
            model,
            mix,
            chunk,
            tail,
        } => {
            let net = load_model(&model).map_err(|e| e.to_string())?;
            let buf = read_wav(&input).map_err(|e| e.to_string())?;
            if buf.sample_rate != stft.sample_rate {
                return Err(format!(
                    "input is {} Hz, the model runs at {} Hz",
                    buf.sample_rate, stft.sample_rate
                ));
            }
            let mut den = StreamingDenoiser::new(&net, stft).map_err(|e| e.to_string())?;
            den.set_mix_ratio(mix).map_err(|e| e.to_string())?;
            eprintln!("# mix = {mix}, delay = {} samples", den.delay());
            let mut samples = buf.samples;
            if tail {
                samples.extend(std::iter::repeat_n(0.0, den.delay()));
            }
            let mut y = Vec::with_capacity(samples.len());
            for c in samples.chunks(chunk.max(1)) {
                den.process_into(c, &mut y);
            }
            write_wav(
                &out,
                &AudioBuffer {
                    samples: y,
                    sample_rate: buf.sample_rate,
                },
            )
            .map_err(|e| e.to_string())
        }
        Command::Train { config } => {
            let cfg: TrainRunConfig = load_config(&config)?;
            cfg.data.validate()?;
            cfg.hp.validate().map_err(|e| e.to_string())?;
            if let Some(p) = &cfg.pbt {
                p.validate().map_err(|e| e.to_string())?;
            }
            echo(&cfg, cfg.seed);
            let (data, valid) = cfg.data.load(&stft)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let (net, trace) = match &cfg.pbt {
                Some(p) => {
                    let r = pbt_run(&cfg.genome, p, &data, &valid, &stft, &mut rng).map_err(|e| e.to_string())?;
                    (r.best, lineage_csv(&r.lineage))
                }
                None => {
                    let mut net =
                        NetworkInstance::build_with_bins(&cfg.genome, NETWORK_BINS, &mut rng).map_err(|e| e.to_string())?;
                    let mut state = SgdState::new(&net);
                    let losses = sgd_steps(&mut net, &mut state, &data, &cfg.hp, cfg.hp.steps, 0, &mut rng)
                        .map_err(|e| e.to_string())?;
                    let mut csv = String::from("step,loss\n");
                    for (i, l) in losses.iter().enumerate() {
                        csv.push_str(&format!("{i},{l}\n"));
                    }
                    (net, csv)
                }
            };
            let q = crate::train::quality(&net, &valid, &stft).map_err(|e| e.to_string())?;
            println!(
                "params {} macs {} quality_db {q:.3}",
                net.n_params(),
                net.macs_per_frame()
            );
            save_model(&cfg.out, &net).map_err(|e| e.to_string())?;
            if let Some(t) = &cfg.trace {
                write(t, trace)?;
            }
            Ok(())
        }
        Command::Search { config, out } => {
            let cfg: SearchRunConfig = load_config(&config)?;
            cfg.data.validate()?;
            cfg.search.validate().map_err(|e| e.to_string())?;
            echo(&cfg, cfg.search.seed);
            let mut latency = match cfg.latency.mode {
                LatencyMode::Measured => LatencySource::measured(cfg.latency.timing),
                LatencyMode::Estimate => LatencySource::Estimate {
                    ns_per_mac: cfg.latency.ns_per_mac,
                    overhead_us: cfg.latency.overhead_us,
                },
                LatencyMode::Replay => {
                    let path = cfg.latency.table.as_ref().ok_or("replay mode needs latency.table")?;
                    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
                    LatencySource::Replay(parse_latency_table(&text).map_err(|e| e.to_string())?)
                }
            };
            let (data, valid) = cfg.data.load(&stft)?;
            let result = evolve(&cfg.search, &data, &valid, &stft, &mut latency).map_err(|e| e.to_string())?;
            fs::create_dir_all(&out).map_err(|e| format!("{}: {e}", out.display()))?;
            write(&out.join("history.csv"), history_csv(&result.candidates))?;
            let mut gens = String::from("generation,best_quality_db,mean_quality_db,feasible_fraction\n");
            for g in &result.generations {
                gens.push_str(&format!(
                    "{},{},{},{}\n",
                    g.generation, g.best_quality, g.mean_quality, g.feasible_fraction
                ));
            }
            write(&out.join("generations.csv"), gens)?;
            write(&out.join("best_genome.toml"), result.best.genome.to_toml())?;
            save_model(out.join("best.adnz"), &result.best_net).map_err(|e| e.to_string())?;
            if let Some(t) = latency.table() {
                write(&out.join("latency_table.csv"), latency_table_csv(t))?;
            }
            println!(
                "best {} quality_db {:.3} median_us {:.1} macs {}",
                result.best.genome, result.best.quality, result.best.latency.median_us, result.best.macs
            );
            Ok(())
        }
        Command::Prune { config, model, out } => {
            let cfg: PruneRunConfig = load_config(&config)?;
            cfg.data.validate()?;
            cfg.schedule.validate().map_err(|e| e.to_string())?;
            echo(&cfg, cfg.seed);
            let net = load_model(&model).map_err(|e| e.to_string())?;
            let (data, valid) = cfg.data.load(&stft)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let (pruned, report) =
                prune_loop(&net, &cfg.schedule, &data, &valid, &stft, &mut rng).map_err(|e| e.to_string())?;
            save_model(&out, &pruned).map_err(|e| e.to_string())?;
            write(&out.with_extension("csv"), report.to_csv())?;
            if let Some((layer, q)) = report.floor_hit {
                eprintln!("# stopped: pruning {layer} dropped quality to {q:.3} dB");
            }
            println!(
                "macs {} -> {} ({:.1}% fewer), quality_db {:.3} -> {:.3}",
                report.macs_start,
                report.macs_end,
                100.0 * report.mac_reduction(),
                report.quality_start_db,
                report.quality_end_db
            );
            Ok(())
        }
        Command::EvalSrt { model, config } => {
            let cfg: EvalRunConfig = load_config(&config)?;
            echo(&cfg, cfg.experiment.seed);
            let net = load_model(&model).map_err(|e| e.to_string())?;
            let table = measure_srt_improvement(&net, &stft, &cfg.experiment).map_err(|e| e.to_string())?;
            print!("{}", table.to_csv());
            if let Some(p) = &cfg.runs_out {
                write(p, table.runs_csv())?;
            }
            Ok(())
        }
        Command::Bench {
            model,
            frames,
            stack,
            csv,
        } => {
            let net = load_model(&model).map_err(|e| e.to_string())?;
            let stages = parse_stack(&stack)?;
            let stats = measure_latency(
                &net,
                &LatencyConfig {
                    frames,
                    ..LatencyConfig::default()
                },
            );
            let budget = latency_report(&stft, &stats, &stages);
            if csv {
                print!("{}", budget.to_csv());
            } else {
                println!(
                    "frame compute: median {:.1} us, p95 {:.1} us over {} frames (hop {:.2} ms)",
                    stats.median_us,
                    stats.p95_us,
                    stats.n_frames,
                    stft.hop_ms()
                );
                print!("{}", budget.to_text());
            }
            Ok(())
        }
        Command::Stats { csv, test } => {
            let text = fs::read_to_string(&csv).map_err(|e| format!("{}: {e}", csv.display()))?;
            let (x, y) = parse_pairs(&text)?;
            match test {
                StatTest::Ttest => {
                    let r = paired_t_test(&x, &y).map_err(|e| e.to_string())?;
                    println!("t={} df={} p={}", r.t, r.df, r.p);
                }
                StatTest::Pearson => {
                    let r = pearson_r(&x, &y).map_err(|e| e.to_string())?;
                    println!("r={r}");
                }
            }
            Ok(())
        }
    }
}

fn parse_stack(items: &[String]) -> CliResult<Vec<StackStage>> {
    if items.len() == 1 && items[0].is_empty() {
        return Ok(Vec::new());
    }
    if items.is_empty() {
        return Ok(default_stack());
    }
    items
        .iter()
        .map(|s| {
            let (name, ms) = s.split_once('=').ok_or_else(|| format!("stack stage {s:?} is not name=ms"))?;
            let ms: f64 = ms.trim().parse().map_err(|_| format!("stack stage {s:?}: bad milliseconds"))?;
            Ok(StackStage {
                name: name.trim().to_string(),
                ms,
            })
        })
        .collect()
}

/// Two numeric columns; a non-numeric first line is taken as a header.
fn parse_pairs(text: &str) -> CliResult<(Vec<f64>, Vec<f64>)> {
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed = (f.len() == 2).then(|| (f[0].parse::<f64>(), f[1].parse::<f64>()));
        match parsed {
            Some((Ok(a), Ok(b))) => {
                x.push(a);
                y.push(b);
            }
            _ if i == 0 => continue,
            _ => return Err(format!("line {}: expected two numbers, got {line:?}", i + 1)),
        }
    }
    Ok((x, y))
}
