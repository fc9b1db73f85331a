//! Command-line front end. `cli_main` returns the process exit code.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::Value;

use super::config::{ExperimentConfig, CONFIG_SCHEMA};
use super::experiments::run_experiment;
use super::with_threads;
use crate::chain::{nu_derivative, quasi_stationary};
use crate::diffusion::{variance_profile, VarianceReport};
use crate::error::{Error, Result};
use crate::expansion::ExpansionSet;
use crate::generator::{uniform_grid, GeneratorSpec, TimeVaryingGenerator, TwoScaleModel};
use crate::queue::{QueueModel, QueueSpec};
use crate::simulator::{monte_carlo, sample_paths_with, write_paths_csv, OccupationSpec, Sampler};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_FAIL: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Parser)]
#[command(name = "twoscale", version, about = "Two-time-scale Markov chain toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config, generator spec or queue spec (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; defaults to the config's `output_dir`, else `.`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses all cores.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check generator invariants on a probe grid.
    Validate,
    /// Quasi-stationary law, its derivative and the diffusion variance.
    Analyze,
    /// Dump the asymptotic expansion terms at t0 = 0.
    Expand,
    /// Monte Carlo of the scaled occupation measure.
    Simulate,
    /// Run an experiment and judge it against its thresholds.
    Experiment,
}

/// What a `--config` file turned out to be.
enum Input {
    Experiment(Box<ExperimentConfig>),
    Queue(QueueModel),
    Generator(TimeVaryingGenerator),
}

impl Input {
    fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        let value: Value = serde_json::from_str(&text)?;
        if value.get("kind").is_some() {
            Ok(Self::Experiment(Box::new(ExperimentConfig::load(path)?)))
        } else if value.get("lambda_base").is_some() {
            Ok(Self::Queue(QueueModel::new(QueueSpec::from_json(&text)?)?))
        } else {
            Ok(Self::Generator(TimeVaryingGenerator::from_spec(&GeneratorSpec::from_json(&text)?)?))
        }
    }

    /// The model at the first grid epsilon, or at `eps = 1` for bare specs.
    fn model(&self) -> Result<TwoScaleModel> {
        match self {
            Self::Experiment(c) => c.model_at(c.eps_grid[0]),
            Self::Queue(q) => q.two_scale(1.0),
            Self::Generator(g) => TwoScaleModel::new(g.clone(), TimeVaryingGenerator::zero(g.dim()), 1.0, 1.0),
        }
    }

    fn config(&self) -> Option<&ExperimentConfig> {
        match self {
            Self::Experiment(c) => Some(c),
            _ => None,
        }
    }
}

/// Parses `argv` (including the program name) and runs the command.
pub fn cli_main<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return EXIT_PASS;
            }
            let _ = e.print();
            eprintln!("\n{CONFIG_SCHEMA}");
            return EXIT_USAGE;
        }
    };
    let Some(config) = cli.config.clone() else {
        eprintln!("error: --config is required\n\n{CONFIG_SCHEMA}");
        return EXIT_USAGE;
    };
    let outcome = with_threads(cli.threads, || dispatch(&cli, &config)).and_then(|r| r);
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

fn out_dir(cli: &Cli, input: &Input) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| input.config().and_then(|c| c.output_dir.clone()))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(value)?)?;
    Ok(path)
}

fn dispatch(cli: &Cli, config: &Path) -> Result<i32> {
    let mut input = Input::load(config)?;
    if let (Input::Experiment(c), Some(seed)) = (&mut input, cli.seed) {
        c.seed = seed;
    }
    let dir = out_dir(cli, &input);
    match cli.command {
        Command::Validate => validate(&input, cli.out.as_deref()),
        Command::Analyze => analyze(&input, &dir, cli.format),
        Command::Expand => expand(&input, &dir, cli.format),
        Command::Simulate => simulate(&input, &dir, cli.format),
        Command::Experiment => {
            let Input::Experiment(c) = &input else {
                return Err(Error::Invalid("experiment needs an experiment config (with a \"kind\" field)".into()));
            };
            let report = run_experiment(c)?;
            for path in report.write(&dir, cli.format == Format::Csv)? {
                println!("wrote {}", path.display());
            }
            for line in report.summary_lines() {
                println!("{line}");
            }
            Ok(if report.passed { EXIT_PASS } else { EXIT_FAIL })
        }
    }
}

fn validate(input: &Input, out: Option<&Path>) -> Result<i32> {
    let report = input.model()?.validate(101);
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(dir) = out {
        write_json(dir, "validation.json", &report)?;
    }
    Ok(if report.is_valid() { EXIT_PASS } else { EXIT_FAIL })
}

#[derive(Serialize)]
struct Analysis {
    t: Vec<f64>,
    nu: Vec<Vec<f64>>,
    nu_derivative: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    variance: Option<VarianceReport>,
}

fn analyze(input: &Input, dir: &Path, format: Format) -> Result<i32> {
    let model = input.model()?;
    let t = uniform_grid(0.0, model.horizon, 101);
    let mut nu = Vec::with_capacity(t.len());
    let mut dnu = Vec::with_capacity(t.len());
    for &s in &t {
        nu.push(quasi_stationary(&model.fast, s)?.into_vec());
        dnu.push(nu_derivative(&model.fast, s)?.iter().copied().collect());
    }
    let variance = match input.config().and_then(|c| c.weights.as_ref()) {
        Some(w) => Some(variance_profile(&model.fast, w, &t)?.report()?),
        None => None,
    };
    let analysis = Analysis {
        t,
        nu,
        nu_derivative: dnu,
        variance,
    };
    let path = match format {
        Format::Json => write_json(dir, "analysis.json", &analysis)?,
        Format::Csv => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join("analysis.csv");
            let mut out = std::io::BufWriter::new(std::fs::File::create(&path)?);
            let m = model.dim();
            let mut header = vec!["t".to_string()];
            header.extend((0..m).map(|i| format!("nu_{i}")));
            header.extend((0..m).map(|i| format!("dnu_{i}")));
            if analysis.variance.is_some() {
                header.extend(["sigma2".into(), "cumulative".into()]);
            }
            writeln!(out, "{}", header.join(","))?;
            for (k, s) in analysis.t.iter().enumerate() {
                let mut row = vec![s.to_string()];
                row.extend(analysis.nu[k].iter().map(f64::to_string));
                row.extend(analysis.nu_derivative[k].iter().map(f64::to_string));
                if let Some(v) = &analysis.variance {
                    row.extend([v.sigma2[k].to_string(), v.cumulative[k].to_string()]);
                }
                writeln!(out, "{}", row.join(","))?;
            }
            path
        }
    };
    println!("wrote {}", path.display());
    Ok(EXIT_PASS)
}

fn expand(input: &Input, dir: &Path, format: Format) -> Result<i32> {
    let model = input.model()?;
    let order = input.config().map_or(1, |c| c.order);
    let set = ExpansionSet::build(model.fast.clone(), model.slow.clone(), order, model.horizon)?;
    let dump = set.dump(0.0, &uniform_grid(0.0, model.horizon, 11), 51)?;
    let path = match format {
        Format::Json => write_json(dir, "expansion.json", &dump)?,
        Format::Csv => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join("expansion.csv");
            let mut out = std::io::BufWriter::new(std::fs::File::create(&path)?);
            writeln!(out, "term,k,time,i,j,value")?;
            let samples = dump
                .phi
                .iter()
                .map(|s| ("phi", s.t, &s.terms))
                .chain(dump.psi.iter().map(|s| ("psi", s.tau, &s.terms)));
            for (term, time, terms) in samples {
                for (k, m) in terms.iter().enumerate() {
                    for (i, row) in m.iter().enumerate() {
                        for (j, v) in row.iter().enumerate() {
                            writeln!(out, "{term},{k},{time},{i},{j},{v}")?;
                        }
                    }
                }
            }
            path
        }
    };
    println!("wrote {}", path.display());
    Ok(EXIT_PASS)
}

fn simulate(input: &Input, dir: &Path, format: Format) -> Result<i32> {
    let config = input
        .config()
        .ok_or_else(|| Error::Invalid("simulate needs an experiment config (eps_grid, replications, seed)".into()))?;
    match format {
        Format::Json => {
            let weights = config
                .weights
                .clone()
                .ok_or_else(|| Error::Invalid("simulate needs occupation weights".into()))?;
            let mut runs = Vec::new();
            for &eps in &config.eps_grid {
                let model = config.model_at(eps)?;
                let spec = OccupationSpec::new(weights.clone(), vec![model.horizon])?;
                runs.push(monte_carlo(&model, &spec, config.initial, config.replications, config.seed)?);
            }
            println!("wrote {}", write_json(dir, "simulation.json", &runs)?.display());
        }
        Format::Csv => {
            std::fs::create_dir_all(dir)?;
            let sampler = Sampler::new(&config.model_at(config.eps_grid[0])?)?;
            let paths = sample_paths_with(&sampler, config.initial, config.replications, config.seed, |_, p| Ok(p))?;
            let path = dir.join("paths.csv");
            write_paths_csv(&paths, std::io::BufWriter::new(std::fs::File::create(&path)?))?;
            println!("wrote {}", path.display());
        }
    }
    Ok(EXIT_PASS)
}
