use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use tierlm::config::RunConfig;
use tierlm::engine::{run_ablation, simulate_decode, SimOutput};
use tierlm::error::{Error, Result};
use tierlm::precision::{search_ratio, search_ratio_kclass};
use tierlm::report::{
    ablation_csv, metrics_summary, sweep_csv, trajectory_csv, AblationBody, Report, SearchBody, SearchOutcome,
    SimulationBody, SweepBody, SweepPoint, TraceSummary,
};

/// Writes a line to stdout, ignoring a closed pipe.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

/// Trace-driven simulator for sparse LLM decoding over HBM, DRAM and SSD.
#[derive(Debug, Parser)]
#[command(name = "tierlm", version)]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,

    #[command(flatten)]
    common: Common,

    /// Print the default configuration as TOML and exit.
    #[arg(long, global = true)]
    print_defaults: bool,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML or JSON run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Output directory (default: `output.dir` from the config).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Seed for the synthetic trace, lookahead prediction and search oracle.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Activation trace file. `gen-trace` writes here; other commands read it.
    #[arg(long, global = true, value_name = "PATH")]
    trace: Option<PathBuf>,

    /// Plan file from `search-ratio`, replacing `engine.plan`.
    #[arg(long, global = true, value_name = "PATH")]
    plan: Option<PathBuf>,

    /// Also write transfer, step and hit timelines as CSV.
    #[arg(long, global = true)]
    emit_timeline: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic activation trace.
    GenTrace,
    /// Simulate decoding over the configured trace.
    Simulate {
        /// Run the four-variant ablation instead of a single configuration.
        #[arg(long)]
        ablation: bool,
    },
    /// Search the mixed-precision ratio against an uncertainty oracle.
    SearchRatio,
    /// Run baseline, +mp, +cache and +ssd on the same trace.
    Ablate,
    /// Simulate every `[[sweep]]` point of the config in parallel.
    Sweep,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.print_defaults {
        return match RunConfig::default().to_toml() {
            Ok(text) => {
                say!("{}", text.trim_end());
                ExitCode::SUCCESS
            }
            Err(e) => fail(&e),
        };
    }
    let Some(command) = cli.command else {
        eprintln!("error: a subcommand is required (try --help)");
        return ExitCode::from(2);
    };
    match run(command, &cli.common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

/// Defaults, then the config file, then command-line flags.
fn resolve(common: &Common, read_trace_flag: bool) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.apply_seed(seed);
    }
    if read_trace_flag {
        if let Some(path) = &common.trace {
            cfg.use_trace_file(path.clone());
        }
    }
    if let Some(plan) = &common.plan {
        cfg.plan_file = Some(plan.clone());
    }
    if let Some(out) = &common.out {
        cfg.output.dir = out.clone();
    }
    cfg.output.emit_timeline |= common.emit_timeline;
    cfg.validate()?;
    cfg.resolve_plan()?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.output.dir)?;
    Ok(&cfg.output.dir)
}

fn run(command: Command, common: &Common) -> Result<()> {
    match command {
        Command::GenTrace => gen_trace(common),
        Command::Simulate { ablation: false } => simulate(common),
        Command::Simulate { ablation: true } | Command::Ablate => ablate(common),
        Command::SearchRatio => search(common),
        Command::Sweep => sweep(common),
    }
}

fn gen_trace(common: &Common) -> Result<()> {
    let cfg = resolve(common, false)?;
    if cfg.trace.synthetic.is_none() {
        return Err(Error::config("trace", "gen-trace needs a `synthetic` trace source"));
    }
    let trace = cfg.load_trace()?;
    let path = match &common.trace {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            p.clone()
        }
        None => out_dir(&cfg)?.join("trace.jsonl"),
    };
    trace.save_to_path(&path)?;
    let s = TraceSummary::of(&trace);
    say!("wrote {}", path.display());
    say!(
        "tokens {}  layers {}  k {}  F {}  mean overlap {:.4}",
        s.tokens,
        s.layers,
        s.active_per_layer,
        s.ffn_neurons,
        s.mean_overlap
    );
    Ok(())
}

fn simulate(common: &Common) -> Result<()> {
    let cfg = resolve(common, true)?;
    let trace = cfg.load_trace()?;
    let SimOutput { metrics, timeline } = simulate_decode(&cfg.model, &trace, &cfg.tiers, &cfg.engine, &cfg.carbon)?;
    let dir = out_dir(&cfg)?;
    let body = SimulationBody {
        config: &cfg,
        trace: TraceSummary::of(&trace),
        metrics: &metrics,
    };
    Report::new("simulate", now(), body).write(&dir.join("report.json"))?;
    if cfg.output.emit_timeline {
        fs::write(dir.join("transfers.csv"), timeline.transfers_csv())?;
        fs::write(dir.join("steps.csv"), timeline.steps_csv())?;
        fs::write(dir.join("hits.csv"), timeline.hits_csv())?;
    }
    say!("{}", metrics_summary(&metrics));
    say!("wrote {}", dir.join("report.json").display());
    Ok(())
}

fn ablate(common: &Common) -> Result<()> {
    let cfg = resolve(common, true)?;
    let trace = cfg.load_trace()?;
    let rows = run_ablation(&cfg.model, &trace, &cfg.tiers, &cfg.engine, &cfg.carbon)?;
    let dir = out_dir(&cfg)?;
    let body = AblationBody {
        config: &cfg,
        trace: TraceSummary::of(&trace),
        rows: &rows,
    };
    Report::new("ablate", now(), body).write(&dir.join("ablation.json"))?;
    fs::write(dir.join("ablation.csv"), ablation_csv(&rows))?;
    say!(
        "{:<10} {:>12} {:>10} {:>16} {:>12}",
        "variant",
        "tokens/s",
        "hbm hit",
        "dram bytes",
        "cf (g)"
    );
    for row in &rows {
        let m = &row.metrics;
        say!(
            "{:<10} {:>12.3} {:>10.4} {:>16} {:>12.6}",
            row.variant,
            m.tokens_per_second,
            m.hbm_hit_ratio,
            m.dram_footprint_bytes,
            m.carbon.cf
        );
    }
    Ok(())
}

fn search(common: &Common) -> Result<()> {
    let cfg = resolve(common, true)?;
    let mut oracle = cfg.search.oracle.build();
    let (outcome, plan) = match cfg.search.kclass {
        Some(k) => {
            let report = search_ratio_kclass(oracle.as_mut(), &cfg.model.precisions, k.step, k.budget_bits)?;
            let plan = report.plan()?;
            (SearchOutcome::KClass(report), plan)
        }
        None => {
            let report = search_ratio(oracle.as_mut(), &cfg.search.params)?;
            let (high, low) = cfg.search_classes()?;
            let plan = report.plan(high, low)?;
            (SearchOutcome::TwoClass(report), plan)
        }
    };
    let dir = out_dir(&cfg)?;
    let body = SearchBody {
        config: &cfg,
        search: &outcome,
        plan: &plan,
    };
    Report::new("search-ratio", now(), body).write(&dir.join("search.json"))?;
    fs::write(dir.join("trajectory.csv"), trajectory_csv(&outcome))?;
    let mut plan_text = serde_json::to_string_pretty(&plan)?;
    plan_text.push('\n');
    fs::write(dir.join("plan.json"), plan_text)?;
    say!("{}", trajectory_csv(&outcome).trim_end());
    let fractions: Vec<String> = plan
        .fractions()
        .iter()
        .map(|(c, f)| format!("{} {f:.4}", c.name))
        .collect();
    say!("best: {}  mean bits {:.3}", fractions.join(", "), plan.mean_bits());
    say!("wrote {}", dir.join("plan.json").display());
    Ok(())
}

fn sweep(common: &Common) -> Result<()> {
    let cfg = resolve(common, true)?;
    let points = cfg.sweep_points()?;
    let results: Vec<Result<SweepPoint>> = points
        .into_par_iter()
        .map(|(label, mut point)| {
            point.resolve_plan()?;
            let trace = point.load_trace()?;
            let out = simulate_decode(&point.model, &trace, &point.tiers, &point.engine, &point.carbon)?;
            Ok(SweepPoint {
                label,
                trace: TraceSummary::of(&trace),
                metrics: out.metrics,
            })
        })
        .collect();
    let points = results.into_iter().collect::<Result<Vec<_>>>()?;
    let dir = out_dir(&cfg)?;
    let body = SweepBody {
        config: &cfg,
        points: &points,
    };
    Report::new("sweep", now(), body).write(&dir.join("sweep.json"))?;
    fs::write(dir.join("sweep.csv"), sweep_csv(&points))?;
    for p in &points {
        say!(
            "{}  tokens/s {:.3}  cf {:.6} g",
            p.label,
            p.metrics.tokens_per_second,
            p.metrics.carbon.cf
        );
    }
    Ok(())
}
