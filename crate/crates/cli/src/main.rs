use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use cascomp::checks::{all_passed, grad_suite, oracle_suite, CheckOutcome, GRAD_TOL};
use cascomp::shapegen::{generate, load_dataset, make_dataset, read_cloud, write_cloud, CloudFormat, Dataset, Sample};
use cascomp::training::{
    evaluate, log_csv, run_phase_with, trend_checks, Checkpoint, GtEcho, PaddedInput, Phase, Prerequisites, RunConfig, RunControl,
    SeedTrend, TrainedModel, TrendRunner, KEYS,
};
use cascomp::{Error, Result};

const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_CHECK: u8 = 4;

fn keys_help() -> String {
    let width = KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from("Config files hold one `key = value` per line; `#` starts a comment. Keys:\n");
    for (k, d) in KEYS {
        s.push_str(&format!("  {k:<width$}  {d}\n"));
    }
    s.push_str("\nExit codes: 0 ok, 2 configuration or usage error, 3 I/O error, 4 check failure.");
    s
}

#[derive(Parser)]
#[command(name = "cascomp", version, about = "Cascaded point cloud completion with feature distillation", after_help = keys_help())]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Grad,
    Oracle,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stub {
    GtEcho,
    PaddedInput,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural dataset: samples/*.xyz plus manifest.tsv.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one phase and write <out>/<phase>.ckpt, .log.csv and .eval.csv.
    Train {
        #[arg(long, value_parser = |s: &str| s.parse::<Phase>())]
        phase: Phase,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint of an earlier phase (recon, teacher-a, teacher-b); repeatable.
        #[arg(long)]
        from: Vec<PathBuf>,
        /// Resume snapshot written by an interrupted run of the same phase.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Per-category metrics of a checkpoint (or a stub) on a dataset.
    Eval {
        #[arg(long, required_unless_present = "stub", conflicts_with = "stub")]
        checkpoint: Option<PathBuf>,
        /// gt-echo scores the ground truth against itself; padded-input repeats the partial input to 4N points.
        #[arg(long, value_enum)]
        stub: Option<Stub>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// CSV destination; the table is also printed.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Complete one XYZ or PLY cloud and write the result.
    Complete {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Map the input into the unit sphere first and the output back after.
        #[arg(long)]
        normalize: bool,
    },
    /// Run the gradient and/or metric oracle self-checks.
    Check {
        #[arg(long, value_enum, default_value = "all")]
        suite: Suite,
        /// Random draws per op in the gradient suite.
        #[arg(long, default_value_t = 5)]
        draws: u64,
        /// Relative tolerance of the gradient suite.
        #[arg(long, default_value_t = GRAD_TOL)]
        tol: f64,
        /// Cloud pairs in the oracle suite.
        #[arg(long, default_value_t = 1000)]
        pairs: usize,
        #[arg(long, default_value_t = 512)]
        max_points: usize,
    },
    /// Ablation runs over several master seeds with directional comparisons.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Checkpoints, logs and trend.csv go here; finished runs are reused.
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Io { .. } | Error::Parse { .. } => EXIT_IO,
        _ => 1,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn prerequisites(paths: &[PathBuf]) -> Result<Prerequisites> {
    let mut pre = Prerequisites::default();
    for p in paths {
        let ck = Checkpoint::load(p)?;
        let slot = match ck.phase.parse::<Phase>()? {
            Phase::Recon => &mut pre.recon,
            Phase::TeacherA => &mut pre.teacher_a,
            Phase::TeacherB => &mut pre.teacher_b,
            other => return Err(Error::Config(format!("{}: a `{other}` checkpoint is never a prerequisite", p.display()))),
        };
        if slot.is_some() {
            return Err(Error::Config(format!("{}: a second `{}` checkpoint was given", p.display(), ck.phase)));
        }
        *slot = Some(ck);
    }
    Ok(pre)
}

fn train(phase: Phase, config: &Path, data: &Path, out: &Path, from: &[PathBuf], resume: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let pre = prerequisites(from)?;
    let data = load_dataset(data)?;
    let resume = resume.map(Checkpoint::load).transpose()?;
    let snapshot_path = out.join(format!("{}.resume.ckpt", phase.name()));
    let mut save_snapshot = |ck: &Checkpoint| ck.save(&snapshot_path);
    let ctl = RunControl { resume, stop_after: None, on_snapshot: Some(&mut save_snapshot) };
    let outcome = run_phase_with(&cfg, phase, &data, &pre, ctl)?;

    let stem = out.join(phase.name());
    let ck_path = stem.with_extension("ckpt");
    outcome.checkpoint.save(&ck_path)?;
    write_text(&stem.with_extension("log.csv"), &log_csv(&outcome.log))?;
    println!("wrote {}", ck_path.display());
    if let Some(report) = outcome.report {
        write_text(&stem.with_extension("eval.csv"), &report.to_csv())?;
        print!("{}", report.to_csv());
    }
    Ok(())
}

fn eval(checkpoint: Option<&Path>, stub: Option<Stub>, data: &Path, split: SplitArg, out: Option<&Path>) -> Result<()> {
    let data = load_dataset(data)?;
    let samples: Vec<&Sample> = match split {
        SplitArg::Train => data.train(),
        SplitArg::Test => data.test(),
        SplitArg::All => data.samples.iter().collect(),
    };
    let report = match checkpoint {
        Some(p) => {
            let model = TrainedModel::from_checkpoint(&Checkpoint::load(p)?)?;
            if model.config.dataset.n != data.n {
                return Err(Error::Config(format!("checkpoint expects N={}, dataset has N={}", model.config.dataset.n, data.n)));
            }
            evaluate(&model, &samples)?
        }
        None => match stub {
            Some(Stub::PaddedInput) => evaluate(&PaddedInput, &samples)?,
            _ => evaluate(&GtEcho, &samples)?,
        },
    };
    let csv = report.to_csv();
    if let Some(out) = out {
        write_text(out, &csv)?;
    }
    print!("{csv}");
    Ok(())
}

fn complete(checkpoint: &Path, input: &Path, out: &Path, normalize: bool) -> Result<()> {
    let model = TrainedModel::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let cloud = read_cloud(input, CloudFormat::from_path(input)?)?;
    let result = if normalize {
        let (unit, norm) = cloud.normalize()?;
        model.complete(&unit)?.denormalize(&norm)
    } else {
        model.complete(&cloud)?
    };
    write_cloud(out, &result, CloudFormat::from_path(out)?)?;
    println!("{} points -> {} points, wrote {}", cloud.len(), result.len(), out.display());
    Ok(())
}

fn check(suite: Suite, draws: u64, tol: f64, pairs: usize, max_points: usize) -> Result<bool> {
    let mut outcomes: Vec<CheckOutcome> = Vec::new();
    if matches!(suite, Suite::Grad | Suite::All) {
        outcomes.extend(grad_suite(draws, tol)?);
    }
    if matches!(suite, Suite::Oracle | Suite::All) {
        outcomes.extend(oracle_suite(pairs, max_points, 0)?);
    }
    for o in &outcomes {
        println!("{}", o.line());
    }
    let ok = all_passed(&outcomes);
    println!("{} of {} checks passed", outcomes.iter().filter(|o| o.passed).count(), outcomes.len());
    Ok(ok)
}

fn experiment(config: &Path, data: Option<&Path>, seeds: &[u64], out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let data: Dataset = match data {
        Some(d) => load_dataset(d)?,
        None => generate(&cfg.dataset)?,
    };
    let mut runner = TrendRunner::new(cfg, Some(out.to_path_buf()));
    runner.progress = Box::new(|m| eprintln!("{m}"));
    let mut trends = Vec::new();
    let mut csv = format!("{}\n", SeedTrend::CSV_HEADER);
    for &seed in seeds {
        let t = runner.run_seed(seed, &data)?;
        csv.push_str(&t.csv_rows());
        trends.push(t);
        write_text(&out.join("trend.csv"), &csv)?;
    }
    print!("{csv}");
    for c in trend_checks(&trends) {
        let vals: Vec<String> = c.values.iter().map(|(a, b)| format!("{a:.4} vs {b:.4}")).collect();
        println!("{} in {}/{} seeds: {}  [{}]", c.name, c.wins, c.seeds, if c.passed() { "holds" } else { "does not hold" }, vals.join(", "));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("--threads {n}: {e}")))?;
    }
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let entries = make_dataset(&cfg.dataset, &out)?;
            println!("wrote {} samples to {}", entries.len(), out.display());
        }
        Command::Train { phase, config, data, out, from, resume } => train(phase, &config, &data, &out, &from, resume.as_deref())?,
        Command::Eval { checkpoint, stub, data, split, out } => eval(checkpoint.as_deref(), stub, &data, split, out.as_deref())?,
        Command::Complete { checkpoint, input, out, normalize } => complete(&checkpoint, &input, &out, normalize)?,
        Command::Check { suite, draws, tol, pairs, max_points } => {
            if !check(suite, draws, tol, pairs, max_points)? {
                return Ok(ExitCode::from(EXIT_CHECK));
            }
        }
        Command::Experiment { config, data, seeds, out } => experiment(&config, data.as_deref(), &seeds, &out)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
