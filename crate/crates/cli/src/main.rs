use std::path::{Path, PathBuf};
use std::process::ExitCode;

use agro_core::agro::{run_agro, PgaConfig};
use agro_core::ccg::{run_ccg, CcgConfig};
use agro_core::genmetrics::compute_metrics;
use agro_core::harness::{
    evaluate_solution, run_experiment, sample_generated, write_improvements_csv, Method,
};
use agro_core::io::{
    parse_experiment_config, parse_model, parse_result, parse_uncertainty_set, read_problem_dir,
    read_to_string, write_json, write_problem_dir,
};
use agro_core::neuralgen::{calibrate_latent, train_vae, VaeConfig};
use agro_core::probgen::generate_problem;
use agro_core::uncertainty::{calibrate_set, fit_classical_set, SetKind, UncertaintySet};
use agro_core::{Error, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "agro",
    version,
    about = "Two-stage robust planning with learned uncertainty sets"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample an instance and a demand dataset.
    Gen {
        #[arg(long = "I", value_name = "FACILITIES")]
        facilities: usize,
        #[arg(long = "J", value_name = "DESTINATIONS")]
        destinations: usize,
        #[arg(long, default_value_t = 2500)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a generative model on the training split.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        latent: usize,
        /// Network and optimizer settings as JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit and size an uncertainty set on the calibration split.
    Calibrate {
        /// Build a latent ball for this model.
        #[arg(long, conflicts_with = "set")]
        model: Option<PathBuf>,
        /// Build a classical set instead: box, budget or ellipsoid.
        #[arg(long, required_unless_present = "model")]
        set: Option<SetKind>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.95)]
        alpha: f64,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve the robust problem with one method.
    Solve {
        #[arg(long)]
        method: Method,
        #[arg(long)]
        data: PathBuf,
        /// Calibrated set or latent ball JSON.
        #[arg(long)]
        set: PathBuf,
        /// Model JSON (AGRO only).
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        #[arg(long, default_value_t = 900.0)]
        time_limit: f64,
        #[arg(long, default_value_t = 100)]
        max_iter: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// PGA step length (AGRO only).
        #[arg(long, default_value_t = 0.1)]
        eta: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Out-of-sample cost of a solution on the test split.
    Eval {
        #[arg(long)]
        result: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.95)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fidelity and diversity of model samples against the test split.
    Metrics {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Multi-trial comparison; writes the report and an improvements CSV beside it.
    Experiment {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: &'a str,
    message: String,
}

fn fail(kind: &str, message: String) -> ExitCode {
    let report = ErrorReport {
        error: kind,
        message,
    };
    eprintln!(
        "{}",
        serde_json::to_string(&report).expect("error report serializes")
    );
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string().trim_end().to_string()),
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), e.to_string()),
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Gen {
            facilities,
            destinations,
            n,
            seed,
            out,
        } => {
            if facilities == 0 || destinations == 0 {
                return Err(Error::InvalidArgument(
                    "--I and --J must be positive".into(),
                ));
            }
            let problem = generate_problem(facilities, destinations, n, seed)?;
            write_problem_dir(&out, &problem, Some(seed))?;
            println!(
                "wrote {} rows for {facilities}x{destinations} to {}",
                n,
                out.display()
            );
        }
        Command::Train {
            data,
            latent,
            config,
            seed,
            out,
        } => {
            let dir = read_problem_dir(&data)?;
            let mut cfg: VaeConfig = match config {
                Some(p) => serde_json::from_str(&read_to_string(&p)?)?,
                None => VaeConfig::default(),
            };
            cfg.latent_dim = latent;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let model = train_vae(&dir.dataset.train(), &dir.dataset.val(), &cfg)?;
            write_json(&out, &model)?;
            let rec = model.training().expect("trained model carries its record");
            println!(
                "validation loss {:.5} -> {:.5} (best epoch {})",
                rec.initial_val_loss, rec.best_val_loss, rec.best_epoch
            );
        }
        Command::Calibrate {
            model,
            set,
            data,
            alpha,
            delta,
            out,
        } => {
            let dir = read_problem_dir(&data)?;
            let cal = dir.dataset.calibration();
            let result = match (model, set) {
                (Some(m), _) => {
                    let model = parse_model(&read_to_string(&m)?)?;
                    UncertaintySet::Latent(calibrate_latent(&model, &cal, alpha, delta)?)
                }
                (None, Some(kind)) => {
                    let fitted = fit_classical_set(kind, &dir.dataset.fit_rows())?;
                    UncertaintySet::Classical(calibrate_set(fitted, &cal, alpha, delta)?)
                }
                (None, None) => return Err(Error::InvalidArgument("pass --model or --set".into())),
            };
            write_json(&out, &result)?;
            match &result {
                UncertaintySet::Latent(b) => println!("latent ball radius {}", b.gamma),
                UncertaintySet::Classical(s) => {
                    println!("{} radius {:?}", result.kind_name(), s.gamma)
                }
            }
        }
        Command::Solve {
            method,
            data,
            set,
            model,
            eps,
            time_limit,
            max_iter,
            seed,
            eta,
            out,
        } => {
            let dir = read_problem_dir(&data)?;
            let set = parse_uncertainty_set(&read_to_string(&set)?)?;
            match (method, set) {
                (Method::Ccg(kind), UncertaintySet::Classical(s)) => {
                    if s.kind != kind {
                        return Err(Error::InvalidArgument(format!(
                            "{method} needs a {kind:?} set, got {:?}",
                            s.kind
                        )));
                    }
                    let cfg = CcgConfig {
                        eps,
                        max_iter,
                        time_limit_secs: time_limit,
                        seed,
                        ..Default::default()
                    };
                    let r = run_ccg(&dir.instance, &s, &cfg)?;
                    report_solve(&out, &r, &r.status, r.objective)?;
                }
                (Method::Agro { latent }, UncertaintySet::Latent(ball)) => {
                    let path =
                        model.ok_or_else(|| Error::InvalidArgument("agro needs --model".into()))?;
                    let model = parse_model(&read_to_string(&path)?)?;
                    if model.latent_dim() != latent {
                        return Err(Error::Dimension(format!(
                            "{method} given a model with latent dimension {}",
                            model.latent_dim()
                        )));
                    }
                    let cfg = PgaConfig {
                        eps,
                        max_iter,
                        time_limit_secs: time_limit,
                        seed,
                        eta,
                        ..Default::default()
                    };
                    let r = run_agro(&dir.instance, &model, &ball, &cfg)?;
                    report_solve(&out, &r, &r.result.status, r.result.objective)?;
                }
                (m, s) => {
                    return Err(Error::InvalidArgument(format!(
                        "method {m} cannot use a {} set",
                        s.kind_name()
                    )));
                }
            }
        }
        Command::Eval {
            result,
            data,
            alpha,
            out,
        } => {
            let dir = read_problem_dir(&data)?;
            let r = parse_result(&read_to_string(&result)?)?;
            let report = evaluate_solution(&dir.instance, &r.x, &dir.dataset.test(), alpha)?
                .with_robust(&r.method, r.gamma, r.objective);
            write_json(&out, &report)?;
            println!(
                "total {:.4} = first stage {:.4} + quantile {:.4}",
                report.total, report.first_stage_cost, report.var_estimate
            );
        }
        Command::Metrics {
            model,
            data,
            k,
            samples,
            seed,
            out,
        } => {
            let dir = read_problem_dir(&data)?;
            let model = parse_model(&read_to_string(&model)?)?;
            let generated = sample_generated(&model, samples, seed)?;
            let report = compute_metrics(&dir.dataset.test(), &generated, k)?;
            write_json(&out, &report)?;
            println!("{report}");
        }
        Command::Experiment { config, out } => {
            let cfg = match config {
                Some(p) => parse_experiment_config(&read_to_string(&p)?)?,
                None => Default::default(),
            };
            let report = run_experiment(&cfg)?;
            write_json(&out, &report)?;
            let csv_path = out.with_file_name("improvements.csv");
            write_improvements_csv(&report, std::fs::File::create(&csv_path)?)?;
            for s in &report.results.summaries {
                println!(
                    "{:?} {:<14} mean total {:.4} over {} trials",
                    s.size,
                    s.method.to_string(),
                    s.mean_total,
                    s.n
                );
            }
            for imp in &report.results.improvements {
                println!(
                    "{:?} {} vs {}: mean improvement {:+.3}%",
                    imp.size,
                    imp.method,
                    imp.baseline,
                    100.0 * imp.stats.mean
                );
            }
        }
    }
    Ok(())
}

fn report_solve<T: Serialize, S: std::fmt::Debug>(
    out: &Path,
    result: &T,
    status: &S,
    objective: f64,
) -> Result<()> {
    write_json(out, result)?;
    println!("{status:?}: objective {objective:.6}");
    Ok(())
}
