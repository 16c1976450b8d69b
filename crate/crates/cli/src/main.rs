use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use prudent_banker::harness::{self, verify, ConfigBuilder, LearnerSpec, RunConfig, RunTrace};

#[derive(Parser)]
#[command(
    name = "prudent-bench",
    version,
    about = "Safe delayed-feedback bandit experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one learner on one environment per seed.
    Run(RunArgs),
    /// Run several learners over seeds and delay models on shared environments.
    Sweep(SweepArgs),
    /// Report on the lower-bound construction.
    Lowerbound(LowerBoundArgs),
    /// Run the invariant suites.
    Verify(VerifyArgs),
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Flat `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` settings, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// desk (T=20000, A=10, B=100) or paper (T=50000, A=100, B=500, the full-size setting).
    #[arg(long)]
    scale: Option<String>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    arms: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    /// none | fixed | geometric | lomax
    #[arg(long)]
    delay: Option<String>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    p_active: Option<f64>,
    #[arg(long)]
    q_geo: Option<f64>,
    #[arg(long)]
    shape: Option<f64>,
    #[arg(long)]
    lomax_scale: Option<f64>,
    /// negative-entropy | tsallis-half
    #[arg(long)]
    regularizer: Option<String>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    alpha_safe: Option<f64>,
    #[arg(long)]
    delta_ucb: Option<f64>,
    /// A seed, a list `1,2,3` or a range `1..=5`.
    #[arg(long, alias = "seeds")]
    seed: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Evaluate invariant checks every round and add them to the summary.
    #[arg(long)]
    diagnostics: bool,
}

impl ConfigArgs {
    fn builder(&self) -> Result<ConfigBuilder> {
        let mut b = ConfigBuilder::new();
        if let Some(path) = &self.config {
            b.load_file(path)?;
        }
        for pair in &self.set {
            let (k, v) = pair
                .split_once('=')
                .with_context(|| format!("`--set {pair}` is not KEY=VALUE"))?;
            b.set(k, v)?;
        }
        let flags: [(&str, Option<String>); 17] = [
            ("scale", self.scale.clone()),
            ("horizon", self.horizon.map(|v| v.to_string())),
            ("arms", self.arms.map(|v| v.to_string())),
            ("blocks", self.blocks.map(|v| v.to_string())),
            ("delay", self.delay.clone()),
            ("p", self.p.map(|v| v.to_string())),
            ("p_active", self.p_active.map(|v| v.to_string())),
            ("q_geo", self.q_geo.map(|v| v.to_string())),
            ("shape", self.shape.map(|v| v.to_string())),
            ("lomax_scale", self.lomax_scale.map(|v| v.to_string())),
            ("regularizer", self.regularizer.clone()),
            ("delta", self.delta.map(|v| v.to_string())),
            ("alpha_safe", self.alpha_safe.map(|v| v.to_string())),
            ("delta_ucb", self.delta_ucb.map(|v| v.to_string())),
            ("seeds", self.seed.clone()),
            ("out", self.out.as_ref().map(|p| p.display().to_string())),
            ("diagnostics", self.diagnostics.then(|| "true".to_string())),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                b.set(key, &v)?;
            }
        }
        Ok(b)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// prudent-banker | banker-omd | conservative-ucb | safe-exp3ix | play-comparator | play-fixed-arm(i)
    #[arg(long)]
    learner: Option<String>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated learner specs.
    #[arg(
        long,
        default_value = "prudent-banker,banker-omd,conservative-ucb,safe-exp3ix,play-comparator"
    )]
    learners: String,
    /// Comma-separated delay models; defaults to the configured one.
    #[arg(long)]
    delays: Option<String>,
}

#[derive(Args)]
struct LowerBoundArgs {
    #[arg(long, default_value_t = 2)]
    q: u64,
    #[arg(long, default_value_t = 2)]
    n: u64,
    #[arg(long, default_value_t = 2)]
    arms: usize,
    #[arg(long, default_value_t = 0.25)]
    delta: f64,
    /// Coupled seeds for the batched identity.
    #[arg(long, default_value_t = 100)]
    identity_seeds: u64,
    /// Monte-Carlo trials per probe policy.
    #[arg(long, default_value_t = 100_000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Desk-scale sizes instead of the quick ones.
    #[arg(long)]
    full: bool,
}

fn output_dir(config: &RunConfig) -> PathBuf {
    config
        .output
        .clone()
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn describe(trace: &RunTrace) -> String {
    let s = &trace.summary;
    format!(
        "{} seed={} D={} stages={} phases={} regret_best={:.3} comparator_gap={:.3}",
        s.learner,
        s.seed,
        s.realized_delay,
        s.stages,
        s.phases,
        s.final_regret_best,
        s.final_comparator_gap
    )
}

fn run(args: RunArgs) -> Result<()> {
    let mut builder = args.config.builder()?;
    if let Some(l) = &args.learner {
        builder.set("learner", l)?;
    }
    let config = builder.build()?;
    let dir = output_dir(&config);
    for trace in harness::run(&config)? {
        trace.save(&dir, &trace.stem())?;
        println!("{}", describe(&trace));
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<()> {
    let learners: Vec<LearnerSpec> = args
        .learners
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<Result<_, _>>()?;
    let base = args.config.builder()?;
    let delay_models: Vec<Option<String>> = match &args.delays {
        Some(list) => list
            .split(',')
            .map(|s| Some(s.trim().to_string()))
            .collect(),
        None => vec![None],
    };
    for model in delay_models {
        let mut builder = base.clone();
        if let Some(m) = &model {
            builder.set("delay", m)?;
        }
        let config = builder.build()?;
        let dir = output_dir(&config).join(config.env.delay_model.label());
        for trace in harness::sweep(&config, &learners)? {
            trace.save(&dir, &trace.stem())?;
            println!("{} {}", config.env.delay_model.label(), describe(&trace));
        }
    }
    Ok(())
}

fn lowerbound(args: LowerBoundArgs) -> Result<()> {
    let report = harness::lowerbound_report(
        args.q,
        args.n,
        args.arms,
        args.delta,
        args.identity_seeds,
        args.trials,
        args.seed,
    )?;
    let text = serde_json::to_string_pretty(&report)?;
    match args.out {
        Some(path) => {
            std::fs::write(&path, text + "\n")
                .with_context(|| format!("writing {}", path.display()))?;
            println!("wrote {}", path.display());
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn verify(args: VerifyArgs) -> Result<()> {
    let size = if args.full {
        verify::VerifySize::FULL
    } else {
        verify::VerifySize::QUICK
    };
    let outcomes = verify::run_all(size)?;
    let mut failed = 0;
    for o in &outcomes {
        println!(
            "{:<20} {}  {}",
            o.name,
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += usize::from(!o.passed);
    }
    if failed > 0 {
        bail!("{failed} suite(s) failed");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Sweep(a) => sweep(a),
        Command::Lowerbound(a) => lowerbound(a),
        Command::Verify(a) => verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
