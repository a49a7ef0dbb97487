use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use taugate::model::{GateMode, Method};
use taugate::report::{self, ArtifactPaths, ExperimentData, RunOptions};
use taugate::selfcheck;
use taugate::train::TrainConfig;
use taugate::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_CHECK: u8 = 3;

#[derive(Parser)]
#[command(name = "taugate", version, about = "Activation-gate adaptation experiments on MNIST 0°/45°")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the foundation per seed, specialize every method, write CSV, tables and figure.
    Run(RunArgs),
    /// Regenerate tables and figure from an existing results.csv.
    Report {
        #[arg(long, default_value = "out/results.csv")]
        csv: PathBuf,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Run the gradient and invariant suite.
    Check {
        /// Finite-difference coordinates sampled per parameter array.
        #[arg(long, default_value_t = 64)]
        coords: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum GateArg {
    Soft,
    Hard,
}

#[derive(Args)]
struct RunArgs {
    /// TOML file with TrainConfig keys; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated method names, or "all".
    #[arg(long, default_value = "all")]
    methods: String,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long, default_value = "data/mnist")]
    data_dir: PathBuf,
    /// Never download. The loader only reads local files, so this is always on.
    #[arg(long)]
    offline: bool,
    /// Also specialize TauGate on 0° and write the gate-overlap table.
    #[arg(long)]
    extras: bool,
    /// Gate sparsity penalty weight.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    sharpness: Option<f64>,
    #[arg(long)]
    lora_rank: Option<usize>,
    /// Foundation learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Specialization learning rate.
    #[arg(long)]
    adapt_lr: Option<f64>,
    /// Training images used (0 = all).
    #[arg(long)]
    train_limit: Option<usize>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Gate used at evaluation time.
    #[arg(long, value_enum, default_value = "soft")]
    gate_mode: GateArg,
}

fn parse_methods(list: &str) -> taugate::Result<Vec<Method>> {
    if list.trim().eq_ignore_ascii_case("all") {
        return Ok(Method::ALL.to_vec());
    }
    let mut out = Vec::new();
    for part in list.split(',').filter(|p| !p.trim().is_empty()) {
        let m: Method = part.parse()?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err(Error::Usage("no methods given".into()));
    }
    Ok(out)
}

fn build_options(args: &RunArgs) -> taugate::Result<RunOptions> {
    let mut cfg = match &args.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = args.lambda {
        cfg.lambda_sparsity = v;
    }
    if let Some(v) = args.sharpness {
        cfg.gate_sharpness = v;
    }
    if let Some(v) = args.lora_rank {
        cfg.lora_rank = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.adapt_lr {
        cfg.adapt_lr = Some(v);
    }
    if let Some(v) = args.train_limit {
        cfg.train_limit = (v > 0).then_some(v);
    }
    cfg.validate()?;
    if args.seeds.is_empty() {
        return Err(Error::Usage("no seeds given".into()));
    }
    Ok(RunOptions {
        methods: parse_methods(&args.methods)?,
        seeds: args.seeds.clone(),
        cfg,
        extras: args.extras,
        gate_mode: match args.gate_mode {
            GateArg::Soft => GateMode::Soft,
            GateArg::Hard => GateMode::Hard,
        },
    })
}

fn run(args: RunArgs) -> taugate::Result<()> {
    let opts = build_options(&args)?;
    let data = ExperimentData::load(&args.data_dir, opts.cfg.train_limit)?;
    eprintln!(
        "loaded {} train / {} test images from {}",
        data.train.len(),
        data.test_0.len(),
        args.data_dir.display()
    );
    let out = report::run_matrix(&data, &opts)?;
    for r in &out.records {
        eprintln!(
            "seed {} {:<9} params {:>6}  acc0 {:.4}  acc45 {:.4}{}",
            r.seed,
            r.method.name(),
            r.trainable_params,
            r.acc_0deg,
            r.acc_45deg,
            r.high_act_frac.map(|h| format!("  high-act {h:.3}")).unwrap_or_default()
        );
    }
    let paths = ArtifactPaths::under(&args.out_dir);
    report::write_run(&out, &paths)?;
    println!("{}", paths.results_csv.display());
    for p in report::write_reports(&out, &paths)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn regenerate(csv: PathBuf, out_dir: PathBuf) -> taugate::Result<()> {
    let bytes = std::fs::read(&csv).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingData(vec![csv.clone()])
        } else {
            Error::Io(e)
        }
    })?;
    let out = report::read_results_csv(&bytes)?;
    for p in report::write_reports(&out, &ArtifactPaths::under(&out_dir))? {
        println!("{}", p.display());
    }
    Ok(())
}

fn check(coords: usize) -> taugate::Result<bool> {
    let results = selfcheck::run_all(coords.max(1))?;
    let mut ok = true;
    for c in &results {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        ok &= c.passed;
    }
    Ok(ok)
}

fn exit_for(err: &Error) -> u8 {
    match err {
        Error::MissingData(_) | Error::Format { .. } => EXIT_DATA,
        _ => EXIT_USAGE,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Report { csv, out_dir } => regenerate(csv, out_dir),
        Command::Check { coords } => match check(coords) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(EXIT_CHECK),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::MissingData(paths) = &e {
                for p in paths {
                    eprintln!("  missing: {}", p.display());
                }
            }
            ExitCode::from(exit_for(&e))
        }
    }
}
