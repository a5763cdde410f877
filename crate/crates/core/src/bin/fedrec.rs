use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use fedrec_poison::attack::AttackKind;
use fedrec_poison::checkpoint;
use fedrec_poison::defense::AggregatorKind;
use fedrec_poison::fedsim::{delta_norm_history, prepare_dataset, run_experiment};
use fedrec_poison::metrics::{delta_norm_rank_report, estimate_p_j, expected_poison_ratio};
use fedrec_poison::selfcheck::run_selfcheck;
use fedrec_poison::{Error, ExperimentConfig, Result};

/// Federated recommender poisoning simulator.
///
/// Every flag can also be set through an environment variable with the
/// `FEDREC_` prefix, e.g. `FEDREC_SEED=7`.
#[derive(Parser, Debug)]
#[command(name = "fedrec", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a full experiment and write metrics.csv and summary.txt.
    Run(RunArgs),
    /// Train without attack and report the popularity of top Δ-Norm items.
    MineReport(MineArgs),
    /// Tabulate the expected poisonous-gradient share of every item.
    AnalyzeEq10(Eq10Args),
    /// Verify every analytic gradient against finite differences.
    Selfcheck(SelfcheckArgs),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long, env = "FEDREC_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, env = "FEDREC_SEED")]
    seed: Option<u64>,
    /// `synthetic` or a MovieLens-style ratings file.
    #[arg(long, env = "FEDREC_DATASET")]
    dataset: Option<String>,
    #[arg(long, env = "FEDREC_OUT_DIR", default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads; results do not depend on this.
    #[arg(long, env = "FEDREC_WORKERS", default_value_t = 1)]
    workers: usize,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// none | pieckipe | pieckuea | oracle
    #[arg(long, env = "FEDREC_ATTACK")]
    attack: Option<String>,
    /// none | regularize
    #[arg(long, env = "FEDREC_DEFENSE")]
    defense: Option<String>,
    /// sum | norm_bound | median | trimmed_mean | krum | multi_krum | bulyan
    #[arg(long, env = "FEDREC_AGGREGATOR")]
    aggregator: Option<String>,
    #[arg(long, env = "FEDREC_ROUNDS")]
    rounds: Option<usize>,
    #[arg(long, env = "FEDREC_EVAL_EVERY")]
    eval_every: Option<usize>,
}

#[derive(Args, Debug)]
struct MineArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 80)]
    rounds: usize,
    /// Items reported per round.
    #[arg(long, default_value_t = 50)]
    top: usize,
    /// Rounds to report, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [4usize, 8, 20, 80])]
    report_rounds: Vec<usize>,
    /// Share of items counted as the popular band.
    #[arg(long, default_value_t = 0.15)]
    band: f64,
}

#[derive(Args, Debug)]
struct Eq10Args {
    #[command(flatten)]
    common: Common,
    /// Malicious user share p̃.
    #[arg(long)]
    ptilde: f64,
}

#[derive(Args, Debug)]
struct SelfcheckArgs {
    #[arg(long, default_value_t = 100)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(ds) = &common.dataset {
        config.data.source = ds.clone();
    }
    Ok(config)
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|source| Error::Io { path, source })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn run(args: RunArgs) -> Result<()> {
    let mut config = load_config(&args.common)?;
    if let Some(a) = &args.attack {
        config.attack.kind =
            AttackKind::parse(a).ok_or_else(|| Error::config(format!("unknown attack {a:?}")))?;
    }
    if let Some(d) = &args.defense {
        config.defense.enabled = match d.as_str() {
            "none" | "off" => false,
            "regularize" | "on" => true,
            _ => return Err(Error::config(format!("unknown defense {d:?}"))),
        };
    }
    if let Some(a) = &args.aggregator {
        config.aggregator.kind = AggregatorKind::parse(a)
            .ok_or_else(|| Error::config(format!("unknown aggregator {a:?}")))?;
    }
    if let Some(r) = args.rounds {
        config.federation.rounds = r;
    }
    if let Some(e) = args.eval_every {
        config.eval.every = e;
    }
    config.validate()?;

    let report = run_experiment(&config, args.common.workers)?;
    let dir = &args.common.out_dir;
    create_dir(dir)?;
    write_file(dir, "metrics.csv", &report.metrics_csv())?;
    write_file(dir, "summary.txt", &report.summary())?;
    write_file(dir, "mined_popular.csv", &report.mined_csv())?;
    write_file(
        dir,
        "model.ckpt",
        &checkpoint::to_text(&report.model, config.seed),
    )?;
    print!("{}", report.summary());
    eprintln!("wall time: {:.1}s", report.wall_time.as_secs_f64());
    Ok(())
}

fn mine_report(args: MineArgs) -> Result<()> {
    let config = load_config(&args.common)?;
    let rounds = args
        .rounds
        .max(args.report_rounds.iter().copied().max().unwrap_or(0));
    let (history, dataset) = delta_norm_history(&config, rounds)?;
    let ranks = dataset.popularity_ranks();
    let band = ((args.band * dataset.num_items as f64).round() as usize).max(1);
    let report = delta_norm_rank_report(&history, &ranks, args.top, band, &args.report_rounds);

    let mut csv = String::from("round,item_id,delta_norm,true_pop_rank\n");
    for snap in &report {
        for (item, delta, rank) in &snap.top {
            let _ = writeln!(csv, "{},{item},{delta:.8e},{rank}", snap.round);
        }
        println!(
            "round {:>4}: {} of top-{} Δ-Norm items outside the top-{band} popularity band{}",
            snap.round,
            snap.outside_band,
            snap.top.len(),
            if snap.all_static {
                " (all accumulators zero)"
            } else {
                ""
            }
        );
    }
    create_dir(&args.common.out_dir)?;
    write_file(&args.common.out_dir, "mining_report.csv", &csv)
}

fn analyze_eq10(args: Eq10Args) -> Result<()> {
    if !(0.0..1.0).contains(&args.ptilde) {
        return Err(Error::config("--ptilde must be in [0, 1)"));
    }
    let config = load_config(&args.common)?;
    let dataset = prepare_dataset(&config)?;
    let order = dataset.popularity_order();
    let mut csv = String::from("item_id,popularity_rank,p_j,expected_poison_ratio\n");
    let mut rows = Vec::with_capacity(order.len());
    for (pos, &item) in order.iter().enumerate() {
        let p_j = estimate_p_j(&dataset, item);
        let e = expected_poison_ratio(args.ptilde, p_j);
        let _ = writeln!(csv, "{item},{},{p_j:.6},{e:.6}", pos + 1);
        rows.push(e);
    }
    let decile = (order.len() / 10).max(1);
    let bottom = &rows[rows.len() - decile..];
    let min_bottom = bottom.iter().copied().fold(f64::INFINITY, f64::min);
    let over_half = rows.iter().filter(|&&e| e > 0.5).count();
    println!("items: {}", rows.len());
    println!("items with expected poison share > 0.5: {over_half}");
    println!("bottom popularity decile: min expected poison share {min_bottom:.4}");
    create_dir(&args.common.out_dir)?;
    write_file(&args.common.out_dir, "eq10.csv", &csv)
}

fn selfcheck(args: SelfcheckArgs) -> Result<bool> {
    let report = run_selfcheck(args.instances, args.seed);
    for f in &report.failures {
        println!("FAIL {f}");
    }
    println!(
        "{} gradient entries checked, {} failures",
        report.checked,
        report.failures.len()
    );
    Ok(report.passed())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(a) => run(a).map(|_| true),
        Command::MineReport(a) => mine_report(a).map(|_| true),
        Command::AnalyzeEq10(a) => analyze_eq10(a).map(|_| true),
        Command::Selfcheck(a) => selfcheck(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) if e.is_config() => {
            error!("{e}");
            ExitCode::from(2)
        }
        Err(e) => {
            error!("{e}");
            ExitCode::from(1)
        }
    }
}
