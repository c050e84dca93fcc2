use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use modalreg::pipeline;
use modalreg::runconfig::{parse_model_list, parse_point, ModelKind, RunConfig};

#[derive(Parser)]
#[command(name = "modalreg", version, about = "Data-driven modal analysis: generate, train, evaluate, predict")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sweep the grid, solve every point and write the regression databases.
    Generate(Common),
    /// Train the selected model variants on the databases.
    Train(Common),
    /// Compare trained models against exact solutions at the test instances.
    Evaluate(Common),
    /// Predict poles and dominant groups for a single operating point.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Point as `name=value,...`; defaults to the configured predict_point.
        #[arg(long)]
        point: Option<String>,
    },
    /// Draw the modal map of the database and the configured partition plots.
    Map(Common),
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated model variants, e.g. `MO-DT,ENS-MO-DT`; overrides the configuration.
    #[arg(long)]
    models: Option<String>,
    /// Output directory; overrides the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Let spline models clamp points outside the training grid instead of failing.
    #[arg(long)]
    allow_extrapolation: bool,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config).with_context(|| format!("loading {}", self.config.display()))?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(list) = &self.models {
            cfg.models = parse_model_list(list)?;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        } else if cfg.out_dir.is_relative() {
            cfg.out_dir = cfg.base_dir.join(&cfg.out_dir);
        }
        Ok(cfg)
    }
}

fn names(models: &[ModelKind]) -> String {
    models.iter().map(|m| m.name()).collect::<Vec<_>>().join(", ")
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(c) => {
            let cfg = c.load()?;
            let s = pipeline::generate(&cfg)?;
            println!(
                "{}: {} points, {} states, {} features (grid {})",
                s.config, s.n_points, s.n_states, s.n_features, s.grid_hash
            );
            println!("pole databases: {} rows; PF database: {} rows", s.n_points, s.n_points * s.n_states);
            for f in &s.files {
                println!("  wrote {}", cfg.out_path().join(f).display());
            }
            println!("solve {:.2} s, total {:.2} s", s.timing.solve_s, s.timing.total_s);
        }
        Command::Train(c) => {
            let cfg = c.load()?;
            let r = pipeline::train(&cfg)?;
            for m in &r.models {
                let cv: Vec<String> = m
                    .files
                    .iter()
                    .filter_map(|f| f.validation_mse.map(|v| format!("{}={:.3e}", f.file, v)))
                    .take(4)
                    .collect();
                println!(
                    "{:<12} {:>3} files  {:>8.2} s{}",
                    m.model.name(),
                    m.files.len(),
                    m.timing.train_s,
                    if cv.is_empty() { String::new() } else { format!("  validation mse {}", cv.join(" ")) }
                );
            }
            println!("report: {}", pipeline::train_report_path(&cfg.out_dir).display());
        }
        Command::Evaluate(c) => {
            let cfg = c.load()?;
            let r = pipeline::evaluate(&cfg, &cfg.models, c.allow_extrapolation)?;
            print!("{}", modalreg::metrics::render_table(&r.models));
            if let Some(src) = r.method2_pole_source {
                println!("per-pole PF models use poles from {src}");
            }
            println!("report: {}", pipeline::eval_report_path(&cfg.out_dir).display());
        }
        Command::Predict { common, point } => {
            let cfg = common.load()?;
            let sys = cfg.validate()?;
            let map = match &point {
                Some(text) => parse_point(text)?,
                None if !cfg.predict_point.is_empty() => cfg.predict_point.clone(),
                None => bail!("no --point given and the configuration has no predict_point"),
            };
            let values = RunConfig::point_values(&sys, &map)?;
            let r = pipeline::predict(&cfg, &values, &cfg.models, common.allow_extrapolation)?;
            println!(
                "poles from {}, groups from {}",
                r.pole_model,
                r.pf_model.map_or("(none)".to_string(), |k| k.to_string())
            );
            println!("{:>4} {:>12} {:>12}  {:<24} {:>12} {:>12}  exact groups", "mode", "re", "im", "groups", "exact re", "exact im");
            for (k, (p, e)) in r.poles.iter().zip(&r.exact).enumerate() {
                let g = |s: &std::collections::BTreeSet<String>| s.iter().cloned().collect::<Vec<_>>().join("+");
                println!(
                    "{:>4} {:>12.5} {:>12.5}  {:<24} {:>12.5} {:>12.5}  {}",
                    k + 1,
                    p.re,
                    p.im,
                    g(&p.dominant),
                    e.re,
                    e.im,
                    g(&e.dominant)
                );
            }
            println!(
                "prediction {:.4} s (inference {:.2e} s), direct solve {:.4} s, ratio {:.3}",
                r.timing.predict_s, r.timing.inference_s, r.timing.direct_s, r.timing.ratio
            );
            println!("report: {}", pipeline::prediction_path(&cfg.out_dir).display());
        }
        Command::Map(c) => {
            let cfg = c.load()?;
            for f in pipeline::map(&cfg, &cfg.models)? {
                println!("wrote {}", f.display());
            }
            println!("models considered for partition plots: {}", names(&cfg.models));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
