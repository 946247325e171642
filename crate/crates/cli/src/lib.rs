//! Argument parsing and dispatch for the `bcp` binary.
//!
//! Configuration is layered: subcommand defaults, then the `--profile`
//! preset, then a JSON `--config` file, then individual flags.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use bcp_core::datasets::TaskKind;
use bcp_core::eval::{
    beta_scan, beta_table_csv, emit_report, run_classification_experiment, run_regression_experiment, ExperimentConfig,
    Method, MetricsSummary, Profile, ReportFormat,
};
use bcp_core::selfcheck;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "bcp", version, about = "Bayesian conformal prediction experiments")]
#[command(subcommand_required = true, arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Regression table: coverage and width per method and prior scale.
    Regress(RunArgs),
    /// Classification table: coverage and mean set size per method.
    Classify(RunArgs),
    /// BCP coverage and width across confidence levels β.
    BetaScan(RunArgs),
    /// Every applicable method in one report.
    Compare(RunArgs),
    /// Run the invariant suite; non-zero exit on any failure.
    Selftest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Regression,
    Classification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProfileArg {
    Desk,
    Paper,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    #[default]
    Json,
    Csv,
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// JSON file with (a subset of) the experiment configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Single BCP confidence level.
    #[arg(long, conflicts_with = "betas")]
    pub beta: Option<f64>,
    /// Comma-separated BCP confidence levels.
    #[arg(long, value_delimiter = ',')]
    pub betas: Option<Vec<f64>>,
    /// Comma-separated half-normal noise scales for the regression prior.
    #[arg(long, value_delimiter = ',')]
    pub c: Option<Vec<f64>>,
    #[arg(long)]
    pub splits: Option<usize>,
    /// Total MCMC iterations per chain.
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub burnin: Option<usize>,
    /// Regression label-grid size.
    #[arg(long)]
    pub grid_size: Option<usize>,
    /// Comma-separated subset of split_cp, bci, cb, bcp, msp.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub profile: Option<ProfileArg>,
    /// Report file; defaults to `$BCP_OUT/<subcommand>.<format>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    pub format: FormatArg,
    /// Use HPD instead of equal-tailed credible intervals.
    #[arg(long)]
    pub hpd: bool,
    /// Calibrate BCP on mean scores, test with AOI scores.
    #[arg(long)]
    pub asymmetric_scores: bool,
    /// Replace Bayesian quadrature by the plain Monte Carlo mean.
    #[arg(long)]
    pub mc: bool,
}

fn subcommand_defaults(command: &Command) -> ExperimentConfig {
    match command {
        Command::Classify(_) => ExperimentConfig::classification("data/breast_cancer.csv"),
        Command::BetaScan(_) => ExperimentConfig {
            methods: vec![Method::Bcp],
            betas: vec![0.6, 0.65, 0.7, 0.8, 0.9],
            prior_scales: vec![1.0],
            ..ExperimentConfig::default()
        },
        _ => ExperimentConfig::default(),
    }
}

/// Merge defaults, profile, config file and flags.
pub fn build_config(command: &Command) -> Result<ExperimentConfig, String> {
    let args = match command {
        Command::Regress(a) | Command::Classify(a) | Command::BetaScan(a) | Command::Compare(a) => a,
        Command::Selftest => return Err("selftest takes no experiment configuration".into()),
    };
    let mut cfg = subcommand_defaults(command);
    if let Some(p) = args.profile {
        cfg = cfg.with_profile(match p {
            ProfileArg::Desk => Profile::Desk,
            ProfileArg::Paper => Profile::Paper,
        });
    }
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        // Overlay the file on the current configuration so absent keys keep
        // their preset values.
        let mut base = serde_json::to_value(&cfg).map_err(|e| e.to_string())?;
        merge_json(&mut base, value.take());
        cfg = serde_json::from_value(base).map_err(|e| format!("{}: {e}", path.display()))?;
    }
    if let Some(t) = args.task {
        let task = match t {
            TaskArg::Regression => TaskKind::Regression,
            TaskArg::Classification => TaskKind::Classification,
        };
        if task != cfg.task && args.config.is_none() {
            let keep = cfg.clone();
            cfg = match task {
                TaskKind::Classification => ExperimentConfig::classification(&keep.data),
                TaskKind::Regression => ExperimentConfig { data: keep.data.clone(), ..ExperimentConfig::default() },
            };
            cfg.n_splits = keep.n_splits;
            cfg.mcmc = keep.mcmc;
            if args.data.is_none() {
                cfg.data = PathBuf::from(match task {
                    TaskKind::Classification => "data/breast_cancer.csv",
                    TaskKind::Regression => "data/diabetes.csv",
                });
            }
        }
        cfg.task = task;
    }
    if let Some(d) = &args.data {
        cfg.data = d.clone();
    }
    if let Some(a) = args.alpha {
        cfg.alpha = a;
    }
    if let Some(b) = args.beta {
        cfg.betas = vec![b];
    }
    if let Some(b) = &args.betas {
        cfg.betas = b.clone();
    }
    if let Some(c) = &args.c {
        cfg.prior_scales = c.clone();
    }
    if let Some(s) = args.splits {
        cfg.n_splits = s;
    }
    if let Some(i) = args.iters {
        cfg.mcmc.total_iters = i;
    }
    if let Some(b) = args.burnin {
        cfg.mcmc.burn_in = b;
    }
    if let Some(k) = args.grid_size {
        cfg.grid_size = k;
    }
    if let Some(m) = &args.methods {
        cfg.methods = m.iter().map(|s| s.parse::<Method>().map_err(|e| e.to_string())).collect::<Result<_, _>>()?;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.hpd |= args.hpd;
    cfg.asymmetric_scores |= args.asymmetric_scores;
    cfg.use_mc |= args.mc;
    if let Command::Compare(_) = command {
        if args.methods.is_none() {
            cfg.methods = match cfg.task {
                TaskKind::Regression => vec![Method::SplitCp, Method::Bci, Method::Cb, Method::Bcp],
                TaskKind::Classification => Method::ALL.to_vec(),
            };
        }
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn merge_json(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                merge_json(b.entry(k).or_insert(serde_json::Value::Null), v);
            }
        }
        (b, o) => *b = o,
    }
}

fn subcommand_name(command: &Command) -> &'static str {
    match command {
        Command::Regress(_) => "regress",
        Command::Classify(_) => "classify",
        Command::BetaScan(_) => "beta-scan",
        Command::Compare(_) => "compare",
        Command::Selftest => "selftest",
    }
}

/// `--out`, else `$BCP_OUT/<subcommand>.<ext>`, else `results/…`.
pub fn output_path(command: &Command, args: &RunArgs, env_dir: Option<&Path>) -> PathBuf {
    if let Some(p) = &args.out {
        return p.clone();
    }
    let ext = match args.format {
        FormatArg::Json => "json",
        FormatArg::Csv => "csv",
    };
    env_dir
        .unwrap_or(Path::new("results"))
        .join(format!("{}.{ext}", subcommand_name(command)))
}

/// Plain-text summary table.
pub fn render_summary(summary: &MetricsSummary) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<9} {:>6} {:>6} {:>9} {:>8} {:>8} {:>8} {:>9}",
        "method", "c", "beta", "coverage", "sd", "size", "sd", "fallback"
    );
    let cell = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_else(|| "-".into());
    for r in &summary.summary {
        let _ = writeln!(
            s,
            "{:<9} {:>6} {:>6} {:>9.4} {:>8.4} {:>8.3} {:>8.3} {:>9}",
            r.method.as_str(),
            cell(r.c),
            cell(r.beta),
            r.coverage_mean,
            r.coverage_sd,
            r.size_mean,
            r.size_sd,
            r.fallback_count
        );
    }
    s
}

/// Run a parsed command; the return value is the process exit code.
pub fn run(cli: Cli) -> i32 {
    let args = match &cli.command {
        Command::Selftest => {
            let results = selfcheck::run_all();
            for r in &results {
                if r.passed {
                    println!("PASS {}", r.name);
                } else {
                    println!("FAIL {}: {}", r.name, r.detail);
                }
            }
            return i32::from(results.iter().any(|r| !r.passed));
        }
        Command::Regress(a) | Command::Classify(a) | Command::BetaScan(a) | Command::Compare(a) => a,
    };
    let cfg = match build_config(&cli.command) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let env_dir = std::env::var_os("BCP_OUT").map(PathBuf::from);
    let out = output_path(&cli.command, args, env_dir.as_deref());
    eprintln!(
        "{}: {} splits, {} MCMC iterations, data {}",
        subcommand_name(&cli.command),
        cfg.n_splits,
        cfg.mcmc.total_iters,
        cfg.data.display()
    );
    let result = match &cli.command {
        Command::BetaScan(_) => beta_scan(&cfg).and_then(|(summary, table)| {
            match args.format {
                FormatArg::Csv => {
                    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                        std::fs::create_dir_all(dir)?;
                    }
                    std::fs::write(&out, beta_table_csv(&table)?)?;
                }
                FormatArg::Json => emit_report(&summary, ReportFormat::Json, &out)?,
            }
            Ok(summary)
        }),
        _ => {
            let run = match cfg.task {
                TaskKind::Regression => run_regression_experiment(&cfg),
                TaskKind::Classification => run_classification_experiment(&cfg),
            };
            run.and_then(|summary| {
                let format = match args.format {
                    FormatArg::Json => ReportFormat::Json,
                    FormatArg::Csv => ReportFormat::Csv,
                };
                emit_report(&summary, format, &out)?;
                Ok(summary)
            })
        }
    };
    match result {
        Ok(summary) => {
            print!("{}", render_summary(&summary));
            eprintln!("wrote {}", out.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
