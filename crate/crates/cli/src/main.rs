use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hashlab_cli::workflow::{self, retrieved_csv, CompareAxis, RetrieveSource, Role};
use hashlab_cli::{dataset, DataFormat, ExperimentConfig, Precision};
use hashlab_core::{Error, MetricOptions, Result};

#[derive(Parser)]
#[command(name = "hashlab", version, about = "Train and evaluate deep hashing models")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run on a single worker thread.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Output directory (overrides the configuration).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Floating-point width for training and encoding.
    #[arg(long, global = true, value_enum)]
    precision: Option<Precision>,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured code length.
    Train {
        /// Also encode the query and database splits and score them.
        #[arg(long)]
        eval: bool,
    },
    /// Encode a dataset with a checkpoint.
    Encode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        format: Option<DataFormat>,
        #[arg(long, value_enum, default_value = "database")]
        role: Role,
    },
    /// Score query codes against database codes in a codes directory.
    Eval {
        #[arg(long)]
        codes: PathBuf,
        /// Metric options (TOML); defaults otherwise.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// List the k nearest database items of one query.
    Retrieve {
        #[arg(long)]
        id: u64,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Codes directory holding database (and optionally query) codes.
        #[arg(long, conflicts_with = "checkpoint")]
        codes: Option<PathBuf>,
        #[arg(long, requires = "data")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum)]
        format: Option<DataFormat>,
    },
    /// Train and evaluate both settings of one design axis.
    Compare {
        #[arg(long, value_enum)]
        axis: CompareAxis,
    },
    /// Write a synthetic Gaussian-blob dataset.
    Synth {
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        per_class: usize,
        /// Item shape, for example `8` or `1,8,8`.
        #[arg(long, value_delimiter = ',', required = true)]
        shape: Vec<usize>,
        #[arg(long)]
        separation: f64,
        #[arg(long, value_enum, default_value = "raw")]
        format: DataFormat,
    },
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let path = g
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required for this command".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = g.seed {
        cfg.set_seed(s);
    }
    if let Some(o) = &g.out {
        cfg.output = o.clone();
    }
    if let Some(p) = g.precision {
        cfg.precision = p;
    }
    Ok(cfg)
}

fn require_out(g: &Global) -> Result<&Path> {
    g.out
        .as_deref()
        .ok_or_else(|| Error::Config("--out is required for this command".into()))
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Train { eval } => {
            let cfg = load_config(g)?;
            let results = workflow::cmd_train(&cfg, eval)?;
            for r in results {
                match r.report {
                    Some(rep) => println!(
                        "q={} loss={:.6} map={:.4} p@r{}={:.4}",
                        r.bits, r.final_loss, rep.map, rep.radius, rep.precision_at_radius
                    ),
                    None => println!("q={} loss={:.6}", r.bits, r.final_loss),
                }
            }
            println!("wrote {}", cfg.output.display());
        }
        Command::Encode { checkpoint, data, format, role } => {
            let out = require_out(g)?;
            let ds = dataset::ingest(&data, format)?;
            std::fs::create_dir_all(out)?;
            let db = workflow::cmd_encode(&checkpoint, &ds, role, out)?;
            println!("encoded {} items into {} bits", db.len(), db.bits());
        }
        Command::Eval { codes, metrics } => {
            let out = require_out(g)?;
            let opts = match metrics {
                Some(p) => {
                    let text = std::fs::read_to_string(&p)?;
                    toml::from_str::<MetricOptions>(&text).map_err(|e| Error::Config(format!("metrics: {e}")))?
                }
                None => MetricOptions::default(),
            };
            let rep = workflow::cmd_eval(&codes, &opts, out)?;
            println!("map={:.6} p@r{}={:.6}", rep.map, rep.radius, rep.precision_at_radius);
        }
        Command::Retrieve { id, k, codes, checkpoint, data, format } => {
            let items = match (codes, checkpoint) {
                (Some(dir), _) => workflow::cmd_retrieve(RetrieveSource::Codes(&dir), id, k)?,
                (None, Some(ck)) => {
                    let path = data.ok_or_else(|| Error::Config("--data is required with --checkpoint".into()))?;
                    let ds = dataset::ingest(&path, format)?;
                    workflow::cmd_retrieve(RetrieveSource::Checkpoint { checkpoint: &ck, data: &ds }, id, k)?
                }
                (None, None) => return Err(Error::Config("give --codes or --checkpoint with --data".into())),
            };
            print!("{}", retrieved_csv(&items));
        }
        Command::Compare { axis } => {
            let cfg = load_config(g)?;
            let table = workflow::cmd_compare(&cfg, axis)?;
            print!("{}", table.pretty());
            println!("wrote {}", cfg.output.join("compare.csv").display());
        }
        Command::Synth { classes, per_class, shape, separation, format } => {
            let out = require_out(g)?;
            let ds = dataset::synth_blobs(classes, per_class, &shape, separation, g.seed.unwrap_or(0))?;
            dataset::export(&ds, out, format)?;
            println!("wrote {} items to {}", ds.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if cli.global.deterministic {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(1).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(workflow::exit_code(&e) as u8)
        }
    }
}
