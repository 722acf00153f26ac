//! `modernn` command line: data generation, training, evaluation and
//! diagnostics.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::datagen::{generate_dataset, load_dataset, Dataset};
use crate::diagnostics::{
    export_features, extract_states, mode_distance_matrix, FeatureKind, ProbeConfig,
};
use crate::error::{Error, Result};
use crate::trainer::{evaluate, init_model, loss_csv, Checkpoint, Trainer, LOSS_HEADER};

pub const THREADS_ENV: &str = "MODERNN_THREADS";

#[derive(Parser, Debug)]
#[command(
    name = "modernn",
    version,
    about = "Slot-based recurrent video prediction on synthetic sprite data"
)]
pub struct Cli {
    /// Worker threads (falls back to MODERNN_THREADS, then the config).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Run single-threaded.
    #[arg(long, global = true)]
    pub deterministic: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// key = value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,

    #[arg(long)]
    pub seed: Option<u64>,

    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a sprite-sequence dataset file.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: Option<usize>,
        /// Comma-separated sprite counts, one per mode.
        #[arg(long)]
        modes: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoints, loss.csv and config.txt to --out.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Per-mode metrics of a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        batch: usize,
    },
    /// Export state features and the per-mode A-distance matrix.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        batch: usize,
    },
}

fn resolve(base: RunConfig, common: &Common) -> Result<RunConfig> {
    let mut run = base;
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        run.apply_text(&text)?;
    }
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(kv.as_str(), "expected KEY=VALUE"))?;
        run.set(k.trim(), v)?;
    }
    if let Some(seed) = common.seed {
        run.seed = seed;
    }
    Ok(run)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn configure_threads(cli: &Cli, run: &RunConfig) {
    let env = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse().ok());
    let n = if cli.deterministic || run.deterministic {
        Some(1)
    } else {
        cli.threads.or(env).or(run.threads)
    };
    if let Some(n) = n.filter(|&n| n > 0) {
        // Fails only if a pool already exists, e.g. when called twice in-process.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
}

/// Checkpoint config, optionally overridden, with the model unchanged.
fn checkpoint_run(ckpt: &Checkpoint, common: &Common) -> Result<RunConfig> {
    let stored = RunConfig::parse(&ckpt.config)?;
    let run = resolve(stored.clone(), common)?;
    run.validate()?;
    if run.model_config()? != stored.model_config()? {
        return Err(Error::contract(
            "configuration describes a different model than the checkpoint",
        ));
    }
    Ok(run)
}

fn check_data(run: &RunConfig, data: &Dataset) -> Result<()> {
    let m = run.model_config()?;
    if data.seq_len != m.seq_len()
        || data.height != m.image_height
        || data.width != m.image_width
        || data.channels != m.image_channels
    {
        return Err(Error::contract(format!(
            "dataset {}x{}x{} with {} frames does not match model {}x{}x{} with {} frames",
            data.channels,
            data.height,
            data.width,
            data.seq_len,
            m.image_channels,
            m.image_height,
            m.image_width,
            m.seq_len()
        )));
    }
    Ok(())
}

fn sibling_config(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(OsString::from).unwrap_or_default();
    name.push(".config.txt");
    out.with_file_name(name)
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData {
            common,
            count,
            modes,
            out,
        } => {
            let mut run = resolve(RunConfig::default(), common)?;
            if let Some(m) = modes {
                run.set("modes", m)?;
            }
            if let Some(c) = count {
                run.count = *c;
            }
            run.data_spec().validate()?;
            configure_threads(cli, &run);
            let data = generate_dataset(&run.data_spec(), run.count)?;
            data.save(out)?;
            write_file(&sibling_config(out), &run.to_text())?;
            println!("wrote {} sequences to {}", data.len(), out.display());
            Ok(())
        }
        Command::Train {
            common,
            data,
            out,
            resume,
        } => {
            let (mut trainer, run) = match resume {
                Some(path) => {
                    let ckpt = Checkpoint::load(path)?;
                    let run = checkpoint_run(&ckpt, common)?;
                    let mut t = Trainer::from_checkpoint(&ckpt)?;
                    t.train = run.train_config();
                    (t, run)
                }
                None => {
                    let run = resolve(RunConfig::default(), common)?;
                    run.validate()?;
                    let model = init_model(run.model_config()?, run.seed)?;
                    (Trainer::new(model, run.train_config())?, run)
                }
            };
            trainer.config_text = run.to_text();
            configure_threads(cli, &run);
            let dataset = load_dataset(data)?;
            check_data(&run, &dataset)?;
            create_dir(out)?;
            write_file(&out.join("config.txt"), &trainer.config_text)?;
            let loss_path = out.join("loss.csv");
            let mut kept = format!("{LOSS_HEADER}\n");
            if resume.is_some() && loss_path.exists() {
                let old =
                    std::fs::read_to_string(&loss_path).map_err(|e| Error::io(&loss_path, e))?;
                for line in old.lines().skip(1) {
                    let it = line.split(',').next().and_then(|v| v.parse::<u64>().ok());
                    if it.is_some_and(|it| it <= trainer.iteration) {
                        kept.push_str(line);
                        kept.push('\n');
                    }
                }
            }
            let mut loss_file =
                std::fs::File::create(&loss_path).map_err(|e| Error::io(&loss_path, e))?;
            loss_file
                .write_all(kept.as_bytes())
                .map_err(|e| Error::io(&loss_path, e))?;
            let every = run.train.eval_every;
            let trace = trainer.run(&dataset, |t, rec| {
                let row = loss_csv(std::slice::from_ref(rec));
                let row = row.split_once('\n').map_or("", |r| r.1);
                loss_file
                    .write_all(row.as_bytes())
                    .map_err(|e| Error::io(&loss_path, e))?;
                if every > 0 && rec.iteration % every == 0 {
                    t.checkpoint()
                        .save(&out.join(format!("checkpoint_{:06}.mckp", rec.iteration)))?;
                }
                Ok(())
            })?;
            trainer.checkpoint().save(&out.join("checkpoint.mckp"))?;
            match trace.last() {
                Some(r) => println!("iteration {} loss {:.6}", r.iteration, r.loss),
                None => println!("no iterations run"),
            }
            Ok(())
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            out,
            batch,
        } => {
            let ckpt = Checkpoint::load(checkpoint)?;
            let run = checkpoint_run(&ckpt, common)?;
            configure_threads(cli, &run);
            let model = ckpt.model()?;
            let dataset = load_dataset(data)?;
            check_data(&run, &dataset)?;
            let report = evaluate(&model, &dataset, &run.metrics, *batch)?;
            let table = report.to_table();
            print!("{table}");
            if let Some(dir) = out {
                create_dir(dir)?;
                write_file(&dir.join("eval.txt"), &table)?;
                write_file(&dir.join("eval.csv"), &report.to_csv())?;
                write_file(&dir.join("config.txt"), &run.to_text())?;
            }
            Ok(())
        }
        Command::Diagnose {
            common,
            checkpoint,
            data,
            out,
            batch,
        } => {
            let ckpt = Checkpoint::load(checkpoint)?;
            let run = checkpoint_run(&ckpt, common)?;
            configure_threads(cli, &run);
            let model = ckpt.model()?;
            let dataset = load_dataset(data)?;
            check_data(&run, &dataset)?;
            let mut modes = dataset.labels();
            modes.sort_unstable();
            modes.dedup();
            if modes.len() < 2 {
                return Err(Error::contract(format!(
                    "diagnose needs at least 2 modes in the data, found {}",
                    modes.len()
                )));
            }
            let records = extract_states(&model, &dataset, *batch)?;
            create_dir(out)?;
            export_features(&records, &out.join("features.csv"))?;
            let mut report = String::new();
            for layer in 0..model.config.layers {
                let m = mode_distance_matrix(
                    &records,
                    FeatureKind::Bus,
                    layer,
                    &ProbeConfig::default(),
                    run.seed,
                )?;
                report.push_str(&m.to_key_values());
            }
            write_file(&out.join("diagnose.txt"), &report)?;
            write_file(&out.join("config.txt"), &run.to_text())?;
            print!("{report}");
            Ok(())
        }
    }
}

/// Parse `args`, run, and map the outcome to a process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
