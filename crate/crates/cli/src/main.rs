use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use drowsy_core::pipeline::{
    run_bands, run_eval, run_train, synth_dataset, BandsMode, Dataset, RunConfig, TrainedRun, RUN_CONFIG_FILE,
};
use drowsy_core::Error;

#[derive(Parser)]
#[command(name = "drowsy", version, about = "Drowsiness classification from PPG signals")]
struct Cli {
    /// JSON run configuration; omitted fields keep their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed; every component seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum BandsArg {
    All,
    Search,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic cohort (CSV signals plus manifest.json).
    Synth {
        #[arg(long)]
        n_per_class: Option<usize>,
        #[arg(long)]
        duration_s: Option<f64>,
    },
    /// Preprocess, split, optionally search bands, and train.
    Train {
        dataset: PathBuf,
        #[arg(long, value_enum)]
        bands: Option<BandsArg>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a trained run on its held-out subjects.
    Eval {
        /// Directory written by `train`.
        run: PathBuf,
        dataset: PathBuf,
        /// Truncate test signals before windowing.
        #[arg(long)]
        clip_seconds: Option<f64>,
    },
    /// Stand-alone Q-learning band search.
    Bands {
        /// Dataset directory or a saved pattern tensor directory.
        input: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        max_bands: Option<usize>,
    },
}

struct Failure {
    code: u8,
    msg: String,
}

fn code_of(e: &Error) -> u8 {
    match e {
        Error::Io(_) => 2,
        Error::Mismatch(_) => 4,
        _ => 3,
    }
}

trait Context<T> {
    fn ctx(self, what: impl FnOnce() -> String) -> Result<T, Failure>;
}

impl<T> Context<T> for Result<T, Error> {
    fn ctx(self, what: impl FnOnce() -> String) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            code: code_of(&e),
            msg: format!("{}: {e}", what()),
        })
    }
}

impl<T> Context<T> for std::io::Result<T> {
    fn ctx(self, what: impl FnOnce() -> String) -> Result<T, Failure> {
        self.map_err(Error::Io).ctx(what)
    }
}

fn base_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).ctx(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli, cfg: &RunConfig, fallback: &str) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from(fallback))
}

fn open_dataset(dir: &Path) -> Result<Dataset, Failure> {
    Dataset::open(dir).ctx(|| format!("opening dataset {}", dir.display()))
}

fn log(msg: &str) {
    eprintln!("{msg}");
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = base_config(&cli)?;
    match &cli.cmd {
        Cmd::Synth { n_per_class, duration_s } => {
            if let Some(n) = n_per_class {
                cfg.cohort.n_per_class = *n;
            }
            if let Some(d) = duration_s {
                cfg.cohort.drowsy.duration_s = *d;
                cfg.cohort.wakeful.duration_s = *d;
            }
            let dir = out_dir(&cli, &cfg, "data");
            cfg.out_dir = Some(dir.clone());
            let ds = synth_dataset(&cfg, &dir).ctx(|| format!("writing dataset to {}", dir.display()))?;
            fs::write(dir.join(RUN_CONFIG_FILE), cfg.to_json().ctx(|| "serialising config".into())?)
                .ctx(|| format!("writing {}", dir.display()))?;
            println!("wrote {} subjects to {}", ds.len(), dir.display());
        }
        Cmd::Train { dataset, bands, epochs } => {
            if let Some(b) = bands {
                cfg.bands.mode = match b {
                    BandsArg::All => BandsMode::All,
                    BandsArg::Search => BandsMode::Search,
                };
            }
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            let dir = out_dir(&cli, &cfg, "run");
            cfg.out_dir = Some(dir.clone());
            let ds = open_dataset(dataset)?;
            let r = run_train(&cfg, &ds, Some(&dir), &mut log).ctx(|| "training".into())?;
            let bands: Vec<String> = r.channels.iter().map(|c| c.to_string()).collect();
            println!(
                "trained on {} windows ({} subjects), channels [{}]; artifacts in {}",
                r.split.n_train,
                r.split.train_subjects.len(),
                bands.join(","),
                dir.display()
            );
        }
        Cmd::Eval {
            run: run_dir,
            dataset,
            clip_seconds,
        } => {
            let override_cfg = cli.config.is_some().then_some(cfg);
            let trained = TrainedRun::load(run_dir, override_cfg).ctx(|| format!("loading run {}", run_dir.display()))?;
            let clip = clip_seconds.or(trained.config.eval.clip_seconds);
            let ds = open_dataset(dataset)?;
            let report = run_eval(&trained, &ds, clip).ctx(|| "evaluating".into())?;
            let dir = cli.out.clone().unwrap_or_else(|| run_dir.clone());
            fs::create_dir_all(&dir).ctx(|| format!("creating {}", dir.display()))?;
            let json = serde_json::to_string_pretty(&report).map_err(Error::from).ctx(|| "serialising report".into())?;
            fs::write(dir.join("eval_report.json"), json).ctx(|| format!("writing report to {}", dir.display()))?;
            print!("{}", report.table());
        }
        Cmd::Bands {
            input,
            episodes,
            max_bands,
        } => {
            if let Some(e) = episodes {
                cfg.bands.search.episodes = *e;
            }
            if let Some(m) = max_bands {
                cfg.bands.search.max_bands = *m;
            }
            let dir = out_dir(&cli, &cfg, "bands");
            cfg.out_dir = Some(dir.clone());
            let r = run_bands(&cfg, input, Some(&dir), &mut log).ctx(|| "band search".into())?;
            for b in &r.best {
                let lp = b.lp_hz.map(|v| format!("{v} Hz")).unwrap_or_else(|| "none".into());
                println!("{}{}  hp {} Hz  lp {}", b.layer.short_name(), b.index, b.hp_hz, lp);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
