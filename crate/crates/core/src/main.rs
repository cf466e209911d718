use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hnet_unlearn::harness::{self, Comparison, RunConfig, Stat};
use hnet_unlearn::metrics::{AccuracyTrace, MetricsReport};
use hnet_unlearn::{Error, NoiseStrategy, Result};

#[derive(Parser)]
#[command(version, about = "Continual learning and data-free unlearning with a chunked hypernetwork")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a request sequence over one or more seeds and write results.
    Run(RunArgs),
    /// Compare a sequence against the same sequence with unlearning removed.
    Compare(RunArgs),
    /// Gradient, noise-limit and chunk round-trip self-checks.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Recompute the metrics report from a trace CSV.
    Metrics {
        trace: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON config file; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Request sequence, e.g. "L0 L1 U0".
    #[arg(long)]
    sequence: Option<String>,
    #[arg(long)]
    strategy: Option<NoiseStrategy>,
    #[arg(long)]
    no_anneal: bool,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = &self.seed {
            cfg.seeds = s.clone();
        }
        if let Some(o) = &self.out {
            cfg.out_dir = Some(o.clone());
        }
        if let Some(s) = &self.sequence {
            cfg.sequence = s.clone();
        }
        if let Some(s) = self.strategy {
            cfg.unlearn.strategy = s;
        }
        if self.no_anneal {
            cfg.unlearn.anneal = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn fmt_stat(s: Option<Stat>) -> String {
    s.map_or("-".into(), |s| format!("{:.2} ± {:.2}", s.mean, s.std))
}

fn run(args: &RunArgs) -> Result<()> {
    let cfg = args.config()?;
    let comparison = if cfg.compare_only_learning {
        Some(harness::compare_only_learning(&cfg)?)
    } else {
        None
    };
    let result = match &comparison {
        Some(c) => c.with_unlearning.clone(),
        None => harness::run_sequence(&cfg)?,
    };
    let a = &result.aggregate;
    println!("sequence  {}", result.sequence);
    println!("RA        {}", fmt_stat(a.ra));
    println!("FA        {}", fmt_stat(a.fa));
    println!("spill     {}", fmt_stat(a.spill_mean));
    println!("relapse   {}", fmt_stat(a.relapse_mean));
    println!("MIA       {}", fmt_stat(a.mia));
    println!("UT (s)    {}", fmt_stat(a.unlearn_seconds));
    let dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("results"));
    harness::emit_results(&result, &cfg, &dir)?;
    if let Some(c) = &comparison {
        print_comparison(c);
        std::fs::write(dir.join("comparison.json"), serde_json::to_string_pretty(c)?)?;
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn print_comparison(c: &Comparison) {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!("retained tasks        {:?}", c.retained);
    println!("RA with unlearning    {:.2}", mean(&c.ra_with_unlearning));
    println!("RA only learning      {:.2}", mean(&c.ra_only_learning));
}

fn compare(args: &RunArgs) -> Result<()> {
    let cfg = args.config()?;
    let c = harness::compare_only_learning(&cfg)?;
    print_comparison(&c);
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("comparison.json"), serde_json::to_string_pretty(&c)?)?;
        println!("wrote {}", dir.display());
    }
    Ok(())
}

fn verify(seed: u64) -> Result<bool> {
    let checks = harness::verify_suite(seed)?;
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(checks.iter().all(|c| c.passed))
}

fn metrics(path: &PathBuf) -> Result<()> {
    let trace = AccuracyTrace::read_csv(BufReader::new(File::open(path)?))?;
    println!("{}", MetricsReport::from_trace(&trace, None)?.to_json()?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(a) => run(a).map(|_| true),
        Command::Compare(a) => compare(a).map(|_| true),
        Command::Verify { seed } => verify(*seed),
        Command::Metrics { trace } => metrics(trace).map(|_| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error [{}]: {e}", e.category());
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        "config" => 2,
        "sequence" => 3,
        "data" => 4,
        "io" => 5,
        "trace" => 6,
        "engine" => 7,
        _ => 8,
    }
}
