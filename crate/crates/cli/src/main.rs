use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use glrg_core::checkpoint::Checkpoint;
use glrg_core::config::RunConfig;
use glrg_core::data::{gen_synthetic, load_dataset, write_atomic, write_dataset, SynthSpec};
use glrg_core::metrics::MetricRow;
use glrg_core::pipeline::{self, PhaseOutput, Prepared, SplitName};
use glrg_core::training::EpochRecord;

/// Video captioning with global-local features, discriminative cross-entropy
/// seeding and reinforcement boosting.
#[derive(Debug, Parser)]
#[command(name = "glrg", version)]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory (for gen-data: the dataset file).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Writes a synthetic JSON-lines dataset to --out.
    GenData(GenData),
    /// Runs the seeding phase; writes seed.ckpt and train.log.
    Train,
    /// Runs the boosting phase from an entrance checkpoint; writes boost.ckpt and boost.log.
    Boost {
        /// Defaults to seed.ckpt in the output directory.
        #[arg(long, value_name = "PATH")]
        entrance: Option<PathBuf>,
    },
    /// Greedy-decodes a split and prints its metric row.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitName,
    },
    /// Scores a candidates file against dataset references.
    Score {
        /// `video_id<TAB>caption` per line.
        #[arg(long, value_name = "PATH")]
        candidates: PathBuf,
        /// Dataset in JSON-lines format.
        #[arg(long, value_name = "PATH")]
        references: PathBuf,
    },
    /// Greedy-decodes one video to stdout.
    Decode {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "ID")]
        video: String,
    },
}

#[derive(Debug, Args)]
struct GenData {
    #[arg(long, default_value_t = 200)]
    videos: usize,
    /// Captions per video.
    #[arg(long = "G", default_value_t = 20)]
    g: usize,
    #[arg(long, default_value_t = 0.5, value_parser = unit_interval)]
    corruption: f64,
    /// Feature noise standard deviation.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 10)]
    objects: usize,
    #[arg(long, default_value_t = 10)]
    actions: usize,
    #[arg(long, default_value_t = 8)]
    scenes: usize,
    #[arg(long = "K", default_value_t = 300)]
    k: usize,
    #[arg(long = "J", default_value_t = 400)]
    j: usize,
    #[arg(long = "M", default_value_t = 1000)]
    m: usize,
}

fn unit_interval(s: &str) -> Result<f64, String> {
    let x: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&x) {
        Ok(x)
    } else {
        Err(format!("{x} is not in [0, 1]"))
    }
}

/// Failure with a fixed exit code.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<Usage>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(g) => gen_data(&cli, g),
        Command::Train => train(&cli),
        Command::Boost { entrance } => boost(&cli, entrance.as_deref()),
        Command::Eval { checkpoint, split } => eval(&cli, checkpoint, *split),
        Command::Score { candidates, references } => score(candidates, references),
        Command::Decode { checkpoint, video } => decode(&cli, checkpoint, video),
    }
}

fn gen_data(cli: &Cli, g: &GenData) -> Result<()> {
    let out = cli.out.as_ref().ok_or_else(|| usage("gen-data requires --out FILE"))?;
    let spec = SynthSpec {
        num_objects: g.objects,
        num_actions: g.actions,
        num_scenes: g.scenes,
        num_videos: g.videos,
        g: g.g,
        corruption_rate: g.corruption,
        noise_sigma: g.noise,
        seed: cli.seed.unwrap_or(SynthSpec::default().seed),
        k: g.k,
        j: g.j,
        m: g.m,
    };
    let records = gen_synthetic(&spec).map_err(|e| usage(format!("invalid dataset flags: {e}")))?;
    write_dataset(out, &records).with_context(|| format!("writing {}", out.display()))?;
    eprintln!("wrote {} videos to {}", records.len(), out.display());
    Ok(())
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli.config.as_ref().ok_or_else(|| usage("this command requires --config PATH"))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn print_epoch(r: &EpochRecord) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{}", r.log_line());
    let _ = out.flush();
}

fn write_phase(dir: &Path, ckpt_name: &str, log_name: &str, out: &PhaseOutput) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let ckpt = dir.join(ckpt_name);
    out.checkpoint.save(&ckpt).with_context(|| format!("writing {}", ckpt.display()))?;
    let log = dir.join(log_name);
    write_atomic(&log, out.log().as_bytes()).with_context(|| format!("writing {}", log.display()))?;
    eprintln!(
        "best epoch {} (val C {:.1}); wrote {} and {}",
        out.record.best_epoch,
        out.record.best_cider * 10.0,
        ckpt.display(),
        log.display()
    );
    Ok(())
}

fn train(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let prepared = Prepared::load(&cfg)?;
    println!("{}", pipeline::LOG_HEADER);
    let out = pipeline::run_seeding(&cfg, &prepared, &mut print_epoch)?;
    write_phase(&cfg.out_dir(cli.out.as_deref()), "seed.ckpt", "train.log", &out)
}

fn boost(cli: &Cli, entrance: Option<&Path>) -> Result<()> {
    let cfg = load_config(cli)?;
    let dir = cfg.out_dir(cli.out.as_deref());
    let entrance = entrance.map(Path::to_owned).unwrap_or_else(|| dir.join("seed.ckpt"));
    let ckpt = Checkpoint::load(&entrance).with_context(|| format!("loading {}", entrance.display()))?;
    let prepared = Prepared::load(&cfg)?;
    println!("{}", pipeline::LOG_HEADER);
    let out = pipeline::run_boosting(&cfg, &prepared, ckpt, &mut print_epoch)?;
    write_phase(&dir, "boost.ckpt", "boost.log", &out)
}

fn load_checked(cfg: &RunConfig, path: &Path) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    ckpt.check_dims(&cfg.model).with_context(|| format!("checkpoint {}", path.display()))?;
    Ok(ckpt)
}

fn eval(cli: &Cli, checkpoint: &Path, split: SplitName) -> Result<()> {
    let cfg = load_config(cli)?;
    let ckpt = load_checked(&cfg, checkpoint)?;
    let prepared = Prepared::load(&cfg)?;
    let row = pipeline::evaluate_split(&prepared, &ckpt, split)?;
    println!("{}\n{}", MetricRow::TSV_HEADER, row.to_tsv());
    Ok(())
}

fn score(candidates: &Path, references: &Path) -> Result<()> {
    let file = File::open(candidates).with_context(|| format!("opening {}", candidates.display()))?;
    let cands = pipeline::parse_candidates(BufReader::new(file))?;
    let refs = load_dataset(references, None)?;
    let report = pipeline::score(&cands, &refs)?;
    if !report.missing_references.is_empty() {
        eprintln!(
            "warning: {} candidate ids have no references: {}",
            report.missing_references.len(),
            report.missing_references.join(", ")
        );
    }
    if !report.missing_candidates.is_empty() {
        eprintln!(
            "warning: {} reference ids have no candidate: {}",
            report.missing_candidates.len(),
            report.missing_candidates.join(", ")
        );
    }
    println!("{}\n{}", MetricRow::TSV_HEADER, report.metrics.to_tsv());
    Ok(())
}

fn decode(cli: &Cli, checkpoint: &Path, video: &str) -> Result<()> {
    let cfg = load_config(cli)?;
    let ckpt = load_checked(&cfg, checkpoint)?;
    let records = load_dataset(&cfg.dataset, Some((cfg.model.k, cfg.model.j, cfg.model.m)))?;
    println!("{}", pipeline::decode_one(&records, &ckpt, video)?);
    Ok(())
}
