use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use superres_core::config::{Config, RunManifest};
use superres_core::error::Error;
use superres_core::io;
use superres_core::pipeline::{self, Analysis, ReconstructionReport};

#[derive(Parser)]
#[command(
    name = "superres",
    version,
    about = "Superresolving source arrays from higher-order intensity correlations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate speckle frames and write correlation curves.
    Simulate(Common),
    /// Fit and gate the curves in the output directory.
    Analyze(Common),
    /// Search geometries consistent with the evidence.
    Reconstruct(Common),
    /// Aperture ratios per correlation order.
    Aperture {
        #[arg(long, value_parser = parse_orders, default_value = "3..8")]
        orders: Orders,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        /// Write to this directory instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the fit table and candidates for an output directory.
    Report(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Inclusive range `3..6` or list `3,4,5`.
    #[arg(long, value_parser = parse_orders)]
    orders: Option<Orders>,
    #[arg(long)]
    frames: Option<usize>,
    /// Source separations, e.g. `1,3`.
    #[arg(long, value_delimiter = ',')]
    x: Option<Vec<u32>>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Defaults to `text` for `report` and `json` otherwise.
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
    Text,
}

#[derive(Clone)]
struct Orders(Vec<usize>);

fn parse_orders(s: &str) -> Result<Orders, String> {
    let num = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}"));
    if let Some((a, b)) = s.split_once("..") {
        let (a, b) = (num(a)?, num(b.trim_start_matches('='))?);
        if a > b {
            return Err(format!("empty range {s}"));
        }
        Ok(Orders((a..=b).collect()))
    } else {
        s.split(',').map(num).collect::<Result<_, _>>().map(Orders)
    }
}

impl Common {
    /// Defaults, then the config file (or the manifest of an earlier run), then flags.
    fn config(&self) -> Result<Config, Error> {
        let manifest = self.out.join(pipeline::MANIFEST_FILE);
        let mut config = match (&self.config, &self.x) {
            (Some(path), _) => Config::load(path)?,
            (None, _) if manifest.exists() => {
                io::read_json::<RunManifest>(&manifest)
                    .map_err(|e| Error::Config(vec![format!("{}: {e}", manifest.display())]))?
                    .config
            }
            (None, Some(x)) => Config::for_geometry(x.clone()),
            (None, None) => {
                return Err(Error::Config(vec![
                    "geometry.x: pass --config, --x, or an --out directory with a manifest".into(),
                ]))
            }
        };
        if let Some(x) = &self.x {
            config.geometry.x = x.clone();
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(orders) = &self.orders {
            config.orders = orders.0.clone();
        }
        if let Some(frames) = self.frames {
            config.simulation.frames = frames;
        }
        config.validate()?;
        Ok(config)
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        Some(Error::EmptyEvidence) => 3,
        Some(Error::Fit(_)) => 4,
        _ => 1,
    }
}

fn warn(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn load_analysis(dir: &Path) -> anyhow::Result<Analysis> {
    let path = dir.join(pipeline::FITS_FILE);
    io::read_json(&path).with_context(|| format!("reading {}; run `analyze` first", path.display()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Simulate(c) => {
            let config = c.config()?;
            let summary = pipeline::cmd_simulate(&config, &c.out)?;
            warn(&summary.warnings);
            for p in &summary.outputs {
                println!("{}", p.display());
            }
        }
        Command::Analyze(c) => {
            let config = c.config()?;
            let (analysis, summary) = pipeline::cmd_analyze(&config, &c.out)?;
            warn(&summary.warnings);
            match c.format.unwrap_or(Format::Json) {
                Format::Json => print!("{}", io::to_json(&analysis.evidence)?),
                Format::Csv => print!("{}", pipeline::table_csv(&analysis.records(&config))),
                Format::Text => print!("{}", pipeline::report(&config, &analysis, None)),
            }
            let failures = analysis.failures();
            if !failures.is_empty() {
                let orders: Vec<String> = failures.iter().map(|(m, _)| m.to_string()).collect();
                return Err(Error::Fit(format!("orders {} could not be fitted", orders.join(","))).into());
            }
        }
        Command::Reconstruct(c) => {
            let config = c.config()?;
            let (report, summary) = pipeline::cmd_reconstruct(&config, &c.out)?;
            warn(&summary.warnings);
            print_reconstruction(&report, c.format.unwrap_or(Format::Json))?;
            if !report.exhaustive {
                eprintln!("search truncated by bounds: exhaustive = false");
            }
        }
        Command::Aperture { orders, format, out } => {
            let reports = pipeline::cmd_aperture(&orders.0)?;
            let (name, text) = match format {
                Format::Csv => ("aperture.csv", pipeline::aperture_csv(&reports)),
                Format::Json => ("aperture.json", io::to_json(&reports)?),
                Format::Text => ("aperture.txt", pipeline::aperture_csv(&reports).replace(',', "\t")),
            };
            match out {
                Some(dir) => {
                    let path = dir.join(name);
                    io::write_atomic(&path, text.as_bytes())?;
                    println!("{}", path.display());
                }
                None => print!("{text}"),
            }
        }
        Command::Report(c) => {
            let config = c.config()?;
            let analysis = load_analysis(&c.out)?;
            let path = c.out.join(pipeline::RECONSTRUCTION_FILE);
            let reconstruction: Option<ReconstructionReport> = if path.exists() {
                Some(io::read_json(&path)?)
            } else {
                None
            };
            match c.format.unwrap_or(Format::Text) {
                Format::Json => print!("{}", io::to_json(&analysis.records(&config))?),
                Format::Csv => print!("{}", pipeline::table_csv(&analysis.records(&config))),
                Format::Text => print!("{}", pipeline::report(&config, &analysis, reconstruction.as_ref())),
            }
        }
    }
    Ok(())
}

fn print_reconstruction(report: &ReconstructionReport, format: Format) -> anyhow::Result<()> {
    match format {
        Format::Json => print!("{}", io::to_json(report)?),
        Format::Csv | Format::Text => {
            println!("x,score,joint_winner");
            for c in &report.candidates {
                let score = c.score.map(|s| s.to_string()).unwrap_or_default();
                println!("\"{}\",{score},{}", c.geometry, c.joint_winner);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
