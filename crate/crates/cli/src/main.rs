use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use csscgg::graph::{Ranking, DEFAULT_CUTOFF};
use csscgg::sim::Method;
use csscgg::tuning::Criterion;
use csscgg_cli::{cmd_eval, cmd_fit, cmd_graph, cmd_simulate, Preset, RunConfig, SimulateArgs};

#[derive(Parser)]
#[command(
    name = "csscgg",
    version,
    about = "Semiparametric mixed-graph estimation"
)]
struct Cli {
    /// Worker threads; defaults to one per core.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Tune {
    Lookl,
    Bic,
    Cv,
}

impl From<Tune> for Criterion {
    fn from(t: Tune) -> Self {
        match t {
            Tune::Lookl => Criterion::Lookl,
            Tune::Bic => Criterion::Bic,
            Tune::Cv => Criterion::Kfold,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RankArg {
    Upfront,
    Greedy,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Table1,
    Table2,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the covariate density and the conditional model to a CSV file.
    Fit {
        data: PathBuf,
        /// Comma-separated covariate columns; the rest are responses.
        #[arg(long, value_delimiter = ',', default_value = "")]
        x_cols: Vec<String>,
        /// Density smoothing parameter; chosen by cross-validation if absent.
        #[arg(long)]
        lambda1: Option<f64>,
        /// Lasso penalty on the off-diagonal response precision.
        #[arg(long, requires = "lambda3", conflicts_with = "tune")]
        lambda2: Option<f64>,
        /// Lasso penalty on the covariate-response coefficients.
        #[arg(long, requires = "lambda2", conflicts_with = "tune")]
        lambda3: Option<f64>,
        /// Criterion for `(λ2, λ3)` over the default grid.
        #[arg(long, value_enum)]
        tune: Option<Tune>,
        /// Center and scale every column before the conditional fit.
        #[arg(long)]
        standardize: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Values per penalty axis of the tuning grid.
        #[arg(long, default_value_t = 10)]
        grid_size: usize,
        /// Folds for cross-validated tuning.
        #[arg(long, default_value_t = 5)]
        folds: usize,
        /// Fitted model JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Select covariate interactions and write the assembled graph.
    Graph {
        model: PathBuf,
        /// Stop adding interactions once the projection ratio is below this.
        #[arg(long, default_value_t = DEFAULT_CUTOFF)]
        cutoff: f64,
        /// Order candidates once up front, or re-rank after every addition.
        #[arg(long, value_enum, default_value = "upfront")]
        ranking: RankArg,
        /// Output files; the extension picks the format (.tsv, .dot, .json).
        #[arg(long, num_args = 1.., required = true)]
        out: Vec<PathBuf>,
        /// Also write the forward-selection trace as JSON.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run a replication study on simulated data.
    Simulate {
        /// table1: two-component Gaussian mixture covariates;
        /// table2: jointly Gaussian covariates with a sparse graph.
        #[arg(long, value_enum)]
        preset: PresetArg,
        /// Mixture component standard deviation (table1).
        #[arg(long)]
        sigma: Option<f64>,
        /// Weight of the first mixture component (table1).
        #[arg(long)]
        omega: Option<f64>,
        /// Sample size per replication.
        #[arg(long)]
        n: Option<usize>,
        /// Number of responses.
        #[arg(long)]
        p: Option<usize>,
        /// Number of covariates.
        #[arg(long)]
        d: Option<usize>,
        /// Edge probability of the random precision matrix.
        #[arg(long)]
        edge_prob: Option<f64>,
        /// Edge probability among covariates; defaults to --edge-prob.
        #[arg(long)]
        x_edge_prob: Option<f64>,
        #[arg(long, default_value_t = 100)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma-separated: mle, csscgg_<criterion>, single_<criterion>.
        #[arg(long, value_delimiter = ',', default_value = "csscgg_cv,mle")]
        methods: Vec<String>,
        #[arg(long, default_value_t = 10)]
        grid_size: usize,
        #[arg(long, default_value_t = DEFAULT_CUTOFF)]
        cutoff: f64,
        /// Also write each replication's data and ground truth.
        #[arg(long)]
        write_data: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a model against a ground truth, held-out data, or both.
    Eval {
        model: PathBuf,
        /// Ground-truth parameters or a reference model JSON.
        #[arg(long, required_unless_present = "data")]
        truth: Option<PathBuf>,
        /// Held-out CSV with the model's column names.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_CUTOFF)]
        cutoff: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Fit {
            data,
            x_cols,
            lambda1,
            lambda2,
            lambda3,
            tune,
            standardize,
            seed,
            grid_size,
            folds,
            out,
        } => {
            let cfg = RunConfig {
                data,
                x_cols: x_cols.into_iter().filter(|s| !s.is_empty()).collect(),
                lambda1,
                lambda2,
                lambda3,
                tune: tune.map(Criterion::from),
                standardize,
                seed,
                grid_size,
                folds,
            };
            cmd_fit(&cfg, &out)?;
        }
        Command::Graph {
            model,
            cutoff,
            ranking,
            out,
            trace,
        } => {
            let ranking = match ranking {
                RankArg::Upfront => Ranking::Upfront,
                RankArg::Greedy => Ranking::Greedy,
            };
            cmd_graph(&model, cutoff, ranking, &out, trace.as_deref())?;
        }
        Command::Simulate {
            preset,
            sigma,
            omega,
            n,
            p,
            d,
            edge_prob,
            x_edge_prob,
            reps,
            seed,
            methods,
            grid_size,
            cutoff,
            write_data,
            out,
        } => {
            let methods = methods
                .iter()
                .map(|m| m.parse::<Method>())
                .collect::<Result<Vec<_>, _>>()?;
            let args = SimulateArgs {
                preset: match preset {
                    PresetArg::Table1 => Preset::Table1,
                    PresetArg::Table2 => Preset::Table2,
                },
                sigma,
                omega,
                n,
                p,
                d,
                edge_prob,
                x_edge_prob,
                reps,
                seed,
                methods,
                grid_size,
                cutoff,
                write_data,
            };
            cmd_simulate(&args, &out)?;
        }
        Command::Eval {
            model,
            truth,
            data,
            cutoff,
            out,
        } => {
            cmd_eval(
                &model,
                truth.as_deref(),
                data.as_deref(),
                cutoff,
                out.as_deref(),
            )?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
