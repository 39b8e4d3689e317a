use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use datadiet::experiment::{self, ExperimentConfig, SweepResult};
use datadiet::oracle::{closed_form_grad_norm, random_instance, LinearModel};
use datadiet::{report, scores, seed, stats};

#[derive(Parser)]
#[command(name = "datadiet", version, about = "Per-example importance scores and pruning sweeps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train scoring runs and write scores_<kind>.csv for every score kind.
    Score(ExperimentArgs),
    /// Prune by each score table, retrain and write sweep.csv.
    Sweep {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Directory holding scores_*.csv (defaults to --out).
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Spearman correlation matrix of the mean scores.
    Correlate {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Write every CSV and SVG report product into --out.
    Report {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        scores: Option<PathBuf>,
        /// sweep.csv to include (defaults to <scores>/sweep.csv when present).
        #[arg(long)]
        sweep: Option<PathBuf>,
    },
    /// Compare backprop GraNd with the closed-form linear softmax gradient norm.
    OracleCheck {
        #[arg(long, default_value_t = 1000)]
        instances: usize,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 50)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-9)]
        tolerance: f64,
    },
}

/// Flags mirroring the config-file keys. Flags override the file.
#[derive(Args, Default)]
struct ExperimentArgs {
    /// Plain-text key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    data_dir: Option<String>,
    #[arg(long)]
    train_limit: Option<String>,
    #[arg(long)]
    test_limit: Option<String>,
    /// Hidden widths, e.g. `128` or `256,128`; `none` for a linear model.
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    activation: Option<String>,
    #[arg(long)]
    init: Option<String>,
    #[arg(long)]
    no_bias: bool,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    momentum: Option<String>,
    #[arg(long)]
    runs: Option<String>,
    #[arg(long)]
    score_epochs: Option<String>,
    #[arg(long)]
    fractions: Option<String>,
    #[arg(long)]
    retrain_trials: Option<String>,
    #[arg(long)]
    keep: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    input_space: Option<String>,
    #[arg(long)]
    el2n: Option<String>,
    /// Score kinds to sweep, e.g. `grand@0,input_norm,random`.
    #[arg(long)]
    kinds: Option<String>,
}

impl ExperimentArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        let flags = [
            ("dataset", &self.dataset),
            ("data_dir", &self.data_dir),
            ("train_limit", &self.train_limit),
            ("test_limit", &self.test_limit),
            ("hidden", &self.hidden),
            ("activation", &self.activation),
            ("init", &self.init),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("lr", &self.lr),
            ("momentum", &self.momentum),
            ("runs", &self.runs),
            ("score_epochs", &self.score_epochs),
            ("fractions", &self.fractions),
            ("retrain_trials", &self.retrain_trials),
            ("keep", &self.keep),
            ("seed", &self.seed),
            ("out", &self.out),
            ("input_space", &self.input_space),
            ("el2n", &self.el2n),
            ("kinds", &self.kinds),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        if self.no_bias {
            cfg.bias = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn scores_dir(cfg: &ExperimentConfig, explicit: &Option<PathBuf>) -> PathBuf {
    explicit.clone().unwrap_or_else(|| cfg.output_dir.clone())
}

fn load_tables(dir: &Path) -> Result<std::collections::BTreeMap<scores::ScoreKind, scores::ScoreTable>> {
    let tables = experiment::read_tables(dir)?;
    if tables.is_empty() {
        bail!("no scores_*.csv files in {}", dir.display());
    }
    Ok(tables)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Score(args) => {
            let cfg = args.config()?;
            let scoring = experiment::run_scoring(&cfg)?;
            for r in &scoring.runs {
                println!(
                    "run {} (seed {}): train acc {:.4}, test acc {:.4}",
                    r.run, r.seed, r.train_accuracy, r.test_accuracy
                );
            }
            for t in scoring.tables.values() {
                println!("wrote scores_{}.csv ({} trials)", t.kind.slug(), t.n_trials());
            }
        }
        Command::Sweep { exp, scores } => {
            let cfg = exp.config()?;
            let tables = load_tables(&scores_dir(&cfg, &scores))?;
            let sweep = experiment::run_sweep(&cfg, &tables)?;
            fs::create_dir_all(&cfg.output_dir)?;
            let path = cfg.output_dir.join("sweep.csv");
            fs::write(&path, sweep.to_csv()).with_context(|| path.display().to_string())?;
            for kind in sweep.kinds() {
                let cells: Vec<String> = sweep
                    .fractions()
                    .iter()
                    .filter_map(|&f| sweep.mean_accuracy(kind, f).map(|a| format!("{f}:{a:.4}")))
                    .collect();
                println!("{kind:<14} {}", cells.join("  "));
            }
        }
        Command::Correlate { exp, scores } => {
            let cfg = exp.config()?;
            let tables: Vec<_> = load_tables(&scores_dir(&cfg, &scores))?.into_values().collect();
            let m = stats::correlation_matrix(&tables)?;
            fs::create_dir_all(&cfg.output_dir)?;
            fs::write(cfg.output_dir.join("corr_matrix.csv"), m.to_csv())?;
            fs::write(
                cfg.output_dir.join("corr_matrix.svg"),
                report::heatmap("Spearman rank correlation of mean scores", &m),
            )?;
            print!("{}", m.to_csv());
        }
        Command::Report { exp, scores, sweep } => {
            let cfg = exp.config()?;
            let dir = scores_dir(&cfg, &scores);
            let tables = load_tables(&dir)?;
            let sweep_path = sweep.unwrap_or_else(|| dir.join("sweep.csv"));
            let sweep = if sweep_path.is_file() {
                let text = fs::read_to_string(&sweep_path)?;
                SweepResult::from_csv(&text, &sweep_path)?
            } else {
                SweepResult::default()
            };
            let summary = report::export_report(&tables, &sweep, &cfg.output_dir)?;
            print!("{}", summary.correlation.to_csv());
            if let Some(r) = summary.ratio {
                println!(
                    "ln(input_norm / grand@0): mean {:.4}, std {:.4}, skewness {:.4}, excluded {}",
                    r.mean_log, r.std_log, r.skewness, r.excluded
                );
            }
            println!("report written to {}", cfg.output_dir.display());
        }
        Command::OracleCheck {
            instances,
            classes,
            dim,
            seed: base,
            tolerance,
        } => {
            let max_rel = oracle_check(instances, classes, dim, base)?;
            println!("{instances} instances, C={classes}, d={dim}: max relative error {max_rel:e}");
            if max_rel.is_nan() || max_rel >= tolerance {
                bail!("relative error {max_rel:e} exceeds tolerance {tolerance:e}");
            }
        }
    }
    Ok(())
}

/// Max relative disagreement between GraNd via backprop and the closed form
/// over random bias-free linear models.
fn oracle_check(instances: usize, classes: usize, dim: usize, base: u64) -> Result<f64> {
    let mut max_rel = 0.0f64;
    for i in 0..instances {
        let (params, x, y) = random_instance(classes, dim, seed::combine(base, &[i as u64]))?;
        let a = scores::grand_one(&params, &x, y)?;
        let b = closed_form_grad_norm(&LinearModel::from_params(&params)?, &x, y)?;
        max_rel = max_rel.max((a - b).abs() / b.abs().max(f64::MIN_POSITIVE));
    }
    Ok(max_rel)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e
                .downcast_ref::<datadiet::Error>()
                .is_some_and(datadiet::Error::is_validation);
            ExitCode::from(if validation { 2 } else { 1 })
        }
    }
}
