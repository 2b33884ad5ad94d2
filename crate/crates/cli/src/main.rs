use std::path::{Path, PathBuf};
use std::process::ExitCode;

use biaslab_cli::config::{self, ExperimentConfig, Kind};
use biaslab_cli::exit;
use biaslab_cli::plotdata::{self, PlotKind};
use biaslab_cli::runner;
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "biaslab", version, about = "Bias-equivalence experiments on synthetic problems")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Run directory. Defaults to $BIASLAB_OUT/<config output or verb-hash>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; 0 uses all cores.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Comma-separated seeds replacing the config's.
    #[arg(long, value_delimiter = ',')]
    seed_override: Option<Vec<u64>>,
    /// Root for default run directories.
    #[arg(long, env = "BIASLAB_OUT", default_value = "biaslab-out")]
    out_root: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Verb {
    /// Sample datasets.
    Gen(RunArgs),
    /// Train and measure models.
    Train(RunArgs),
    /// Measure models on fresh test data.
    Measure(RunArgs),
    /// Check a predicted worst-group gap against the observed one.
    Validate(RunArgs),
    /// Fine-tune a source-trained model on a target problem.
    Transfer(RunArgs),
    /// Validate many pairs.
    Sweep(RunArgs),
    /// Turn a finished run into CSV tables.
    Plotdata {
        /// Run directory or its run_record.json.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum)]
        kind: PlotKind,
        /// Directory for the CSV; defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Verb {
    fn run_args(&self) -> Option<(Kind, &RunArgs)> {
        match self {
            Verb::Gen(a) => Some((Kind::Generate, a)),
            Verb::Train(a) => Some((Kind::Train, a)),
            Verb::Measure(a) => Some((Kind::Measure, a)),
            Verb::Validate(a) => Some((Kind::ValidatePair, a)),
            Verb::Transfer(a) => Some((Kind::Transfer, a)),
            Verb::Sweep(a) => Some((Kind::Sweep, a)),
            Verb::Plotdata { .. } => None,
        }
    }
}

fn output_dir(cfg: &ExperimentConfig, args: &RunArgs) -> PathBuf {
    if let Some(out) = &args.out {
        return out.clone();
    }
    let name = cfg
        .output
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}-{}", cfg.kind.verb(), &cfg.hash()[..12])));
    args.out_root.join(name)
}

fn execute(kind: Kind, args: &RunArgs) -> i32 {
    let mut cfg = match config::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return exit::VALIDATION;
        }
    };
    if cfg.kind != kind {
        eprintln!(
            "error: {}: config kind `{}` belongs to the `{}` verb, not `{}`",
            args.config.display(),
            serde_json::to_value(cfg.kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
            cfg.kind.verb(),
            kind.verb()
        );
        return exit::VALIDATION;
    }
    if let Some(seeds) = &args.seed_override {
        if seeds.is_empty() {
            eprintln!("error: --seed-override needs at least one seed");
            return exit::VALIDATION;
        }
        cfg.seeds = seeds.clone();
    }
    let out = output_dir(&cfg, args);
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(args.jobs).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return exit::RUNTIME;
        }
    };
    log::info!("{} -> {}", kind.verb(), out.display());
    match pool.install(|| runner::run(&cfg, &out)) {
        Ok(_) => {
            println!("{}", out.display());
            exit::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit::RUNTIME
        }
    }
}

fn plot(run: &Path, kind: PlotKind, out: Option<&Path>) -> i32 {
    let default_dir = plotdata::record_path(run).parent().map(Path::to_path_buf).unwrap_or_default();
    match plotdata::emit_plot_data(run, kind, out.unwrap_or(&default_dir)) {
        Ok(path) => {
            println!("{}", path.display());
            exit::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit::VALIDATION
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // help and version are not failures
            return ExitCode::from(if e.use_stderr() { exit::VALIDATION as u8 } else { 0 });
        }
    };
    let code = match &cli.verb {
        Verb::Plotdata { run, kind, out } => plot(run, *kind, out.as_deref()),
        verb => {
            let (kind, args) = verb.run_args().expect("run verb");
            execute(kind, args)
        }
    };
    ExitCode::from(code as u8)
}
