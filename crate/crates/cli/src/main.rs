use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use matcn::harness::{
    eval_sampler, evaluate, load_checkpoint, loss_curve_svg, rfs_table, run_gradcheck, save_checkpoint, split_corpus,
    train, HarnessError, Result, RunConfig, SuiteOptions, EPOCH_LOG_HEADER,
};
use matcn::preprocess::{run_pipeline, Corpus};
use matcn::siamese::{make_pairs, write_manifest};
use matcn::synth::{gen_corpus, SynthSpec};
use matcn::tensor::OpKind;

#[derive(Parser)]
#[command(name = "matcn", version, about = "Trajectory-based driver verification toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Raw GPS CSV to corpus files.
    Preprocess {
        input: PathBuf,
        #[arg(long, short)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write a synthetic raw GPS CSV.
    Synth {
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        drivers: usize,
        #[arg(long, default_value_t = 5)]
        days: usize,
        /// Trips of each kind per driver-day.
        #[arg(long, default_value_t = 5)]
        trips: usize,
        #[arg(long, default_value_t = 1.0)]
        separability: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the sampled driver styles as JSON.
        #[arg(long)]
        styles: Option<PathBuf>,
    },
    /// Train on `corpus_dir`, writing log, checkpoint and test metrics to `out_dir`.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Also write an SVG loss curve.
        #[arg(long)]
        plot: bool,
    },
    /// Score a checkpoint on balanced pairs.
    Eval {
        checkpoint: PathBuf,
        /// Corpus directory (default: the one in the checkpoint config).
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        pairs: Option<usize>,
        /// Pair sampling seed (default: the config seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Score every driver instead of the held-out test drivers.
        #[arg(long)]
        all_drivers: bool,
        /// Write the metrics JSON here instead of stdout.
        #[arg(long, short)]
        out: Option<PathBuf>,
        /// Write the scored pairs as CSV.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Finite-difference check of every backward rule.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Small-width checks only.
        #[arg(long)]
        quick: bool,
        /// Corrupt one op's derivative (e.g. `sigmoid`).
        #[arg(long)]
        fault: Option<String>,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
    },
    /// Receptive field table. Each argument is a value or a range `a..=b`.
    Rfs {
        blocks: String,
        kernel: String,
        base: String,
    },
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut text = match &args.config {
        Some(p) => fs::read_to_string(p)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", p.display())))?,
        None => String::new(),
    };
    for kv in &args.set {
        if !kv.contains('=') {
            return Err(HarnessError::Config(format!("--set expects KEY=VALUE, got {kv:?}")));
        }
        text.push('\n');
        text.push_str(kv);
    }
    RunConfig::from_text(&text)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| HarnessError::Data(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn parse_range(s: &str) -> Result<Vec<u64>> {
    let num = |t: &str| {
        t.trim()
            .parse::<u64>()
            .map_err(|_| HarnessError::Config(format!("invalid range {s:?}")))
    };
    match s.split_once("..=") {
        Some((a, b)) => Ok((num(a)?..=num(b)?).collect()),
        None => Ok(vec![num(s)?]),
    }
}

fn cmd_preprocess(input: &Path, out: Option<&Path>, cfg: &ConfigArgs) -> Result<()> {
    let config = load_config(cfg)?;
    let file = File::open(input).map_err(|e| HarnessError::Data(format!("{}: {e}", input.display())))?;
    let (corpus, stats) = run_pipeline(file, &config.preprocess)?;
    let dir = out.unwrap_or(&config.corpus_dir);
    corpus.write(dir)?;
    write_json(&dir.join("retention.json"), &stats)?;
    println!("{}", serde_json::to_string_pretty(&stats).map_err(|e| HarnessError::Data(e.to_string()))?);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    out: &Path,
    drivers: usize,
    days: usize,
    trips: usize,
    separability: f64,
    seed: u64,
    styles: Option<&Path>,
) -> Result<()> {
    let spec = SynthSpec {
        n_drivers: drivers,
        days,
        trips_per_day: trips,
        separability,
        seed,
        ..SynthSpec::default()
    };
    let sampled = gen_corpus(&spec, BufWriter::new(File::create(out)?))?;
    if let Some(p) = styles {
        write_json(p, &sampled)?;
    }
    eprintln!("wrote {} drivers to {}", sampled.len(), out.display());
    Ok(())
}

fn cmd_train(cfg: &ConfigArgs, plot: bool) -> Result<()> {
    let config = load_config(cfg)?;
    let corpus = Corpus::read(&config.corpus_dir)?;
    let split = split_corpus(&corpus, config.test_fraction, config.val_days, config.seed);
    if split.train.drivers.len() < 2 {
        return Err(HarnessError::Data("need at least two training drivers".into()));
    }
    let out = config.out_dir.clone();
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.txt"), config.to_text())?;
    let ckpt = out.join("checkpoint.bin");

    let mut log = format!("{EPOCH_LOG_HEADER}\n");
    let outcome = train(&config, &split, |line, model, normalizer, best| {
        log.push_str(&line.csv_line());
        log.push('\n');
        fs::write(out.join("train_log.csv"), &log)?;
        eprintln!("{}", line.csv_line());
        if best {
            save_checkpoint(&ckpt, &config, model, normalizer)?;
        }
        Ok(())
    })?;
    if plot {
        fs::write(out.join("loss.svg"), loss_curve_svg(&outcome.epochs))?;
    }
    eprintln!("best epoch {} after {} steps", outcome.best_epoch, outcome.steps);

    if split.test.drivers.len() >= 2 {
        let (report, _, _) = evaluate(&outcome.model, &outcome.normalizer, &split.test, &config, config.seed)?;
        fs::write(out.join("metrics.json"), report.to_json() + "\n")?;
        println!("{}", report.to_json());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    checkpoint: &Path,
    corpus_dir: Option<&Path>,
    threshold: Option<f64>,
    pairs: Option<usize>,
    seed: Option<u64>,
    all_drivers: bool,
    out: Option<&Path>,
    manifest: Option<&Path>,
) -> Result<()> {
    let (mut config, model, normalizer) = load_checkpoint(checkpoint)?;
    if let Some(t) = threshold {
        config.threshold = t;
    }
    if let Some(n) = pairs {
        config.eval_pairs = n;
    }
    config.validate()?;
    let corpus = Corpus::read(corpus_dir.unwrap_or(&config.corpus_dir))?;
    let corpus = if all_drivers {
        corpus
    } else {
        split_corpus(&corpus, config.test_fraction, config.val_days, config.seed).test
    };
    let seed = seed.unwrap_or(config.seed);
    let (report, _, _) = evaluate(&model, &normalizer, &corpus, &config, seed)?;
    if let Some(p) = manifest {
        let stream = make_pairs(&corpus, &eval_sampler(&config, seed))?;
        write_manifest(File::create(p)?, &corpus, &stream.pairs)?;
    }
    match out {
        Some(p) => fs::write(p, report.to_json() + "\n")?,
        None => println!("{}", report.to_json()),
    }
    Ok(())
}

fn cmd_gradcheck(cfg: &ConfigArgs, quick: bool, fault: Option<&str>, tol: f64) -> Result<bool> {
    let config = load_config(cfg)?;
    let fault = match fault {
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| HarnessError::Config(format!("unknown op {name:?}")))?),
        None => None,
    };
    let suite = run_gradcheck(&SuiteOptions {
        tol,
        seed: config.seed,
        fault,
        model: config.model,
        quick,
        ..SuiteOptions::default()
    })?;
    print!("{}", suite.render());
    Ok(suite.passed())
}

fn cmd_rfs(blocks: &str, kernel: &str, base: &str) -> Result<()> {
    println!("blocks,kernel,base,receptive_field");
    for (n, k, b, r) in rfs_table(parse_range(blocks)?, parse_range(kernel)?, parse_range(base)?) {
        println!("{n},{k},{b},{r}");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Preprocess { input, out, cfg } => cmd_preprocess(&input, out.as_deref(), &cfg)?,
        Command::Synth {
            out,
            drivers,
            days,
            trips,
            separability,
            seed,
            styles,
        } => cmd_synth(&out, drivers, days, trips, separability, seed, styles.as_deref())?,
        Command::Train { cfg, plot } => cmd_train(&cfg, plot)?,
        Command::Eval {
            checkpoint,
            corpus,
            threshold,
            pairs,
            seed,
            all_drivers,
            out,
            manifest,
        } => cmd_eval(
            &checkpoint,
            corpus.as_deref(),
            threshold,
            pairs,
            seed,
            all_drivers,
            out.as_deref(),
            manifest.as_deref(),
        )?,
        Command::Gradcheck { cfg, quick, fault, tol } => {
            if !cmd_gradcheck(&cfg, quick, fault.as_deref(), tol)? {
                return Ok(ExitCode::from(3));
            }
        }
        Command::Rfs { blocks, kernel, base } => cmd_rfs(&blocks, &kernel, &base)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
