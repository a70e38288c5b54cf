use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aif_loop::ckm::{fit_grid, read_samples, sample_field, write_samples, CkmField, GridBounds, GridCkm};
use aif_loop::harness::{self, export_all, ExperimentConfig, Format, Policy};
use aif_loop::{Error, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;

/// Closed-loop tracking experiments with joint control and sensing
/// allocation.
#[derive(Parser)]
#[command(name = "aif-loop", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Output {
    /// Directory for exported files; created if missing.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "csv", value_parser = parse_format)]
    format: Format,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of one config and export per-episode logs plus a summary.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        output: Output,
    },
    /// Run horizons 1..=H_max for the selected policies.
    SweepHorizon {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        h_max: usize,
        /// Comma-separated policy names; defaults to all three.
        #[arg(long, value_delimiter = ',', value_parser = parse_policy)]
        policies: Vec<Policy>,
        /// Also write per-episode logs, not just the summary.
        #[arg(long)]
        records: bool,
        #[command(flatten)]
        output: Output,
    },
    /// Run the three policies on one config.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        output: Output,
    },
    /// Draw noiseless samples of a config's analytic field.
    SampleCkm {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100_000)]
        n: usize,
        /// `x_min,x_max,y_min,y_max`.
        #[arg(long, value_parser = parse_bounds)]
        bounds: GridBounds,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fit a grid map from a samples file.
    FitCkm {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `x_min,x_max,y_min,y_max`.
        #[arg(long, value_parser = parse_bounds)]
        bounds: GridBounds,
        /// `nx,ny`.
        #[arg(long, value_parser = parse_resolution)]
        resolution: (usize, usize),
        /// Subcarrier counts to fit; defaults to those present in the samples.
        #[arg(long, value_delimiter = ',')]
        k: Vec<u32>,
    },
    /// Write a grid map as a CSV raster `x,y,k,var_x,var_y` at cell centers.
    ShowCkm {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Layers to write; defaults to all.
        #[arg(long, value_delimiter = ',')]
        k: Vec<u32>,
    },
}

fn parse_format(s: &str) -> std::result::Result<Format, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_policy(s: &str) -> std::result::Result<Policy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_list<T: std::str::FromStr>(s: &str, n: usize) -> std::result::Result<Vec<T>, String> {
    let parts: Vec<T> = s
        .split(',')
        .map(|p| p.trim().parse::<T>().map_err(|_| format!("cannot parse `{p}`")))
        .collect::<std::result::Result<_, _>>()?;
    if parts.len() != n {
        return Err(format!("expected {n} comma-separated values, got {}", parts.len()));
    }
    Ok(parts)
}

fn parse_bounds(s: &str) -> std::result::Result<GridBounds, String> {
    let v: Vec<f64> = parse_list(s, 4)?;
    Ok(GridBounds { x_min: v[0], x_max: v[1], y_min: v[2], y_max: v[3] })
}

fn parse_resolution(s: &str) -> std::result::Result<(usize, usize), String> {
    let v: Vec<usize> = parse_list(s, 2)?;
    Ok((v[0], v[1]))
}

fn create(path: &Path) -> Result<BufWriter<std::fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

fn open(path: &Path) -> Result<BufReader<std::fs::File>> {
    std::fs::File::open(path).map(BufReader::new).map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}

fn finish(path: &Path, mut w: BufWriter<std::fs::File>) -> Result<()> {
    w.flush().map_err(|e| io_err(path, e))
}

fn print_paths(paths: &[PathBuf]) {
    for p in paths {
        println!("{}", p.display());
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Run { config, output } => {
            let cfg = ExperimentConfig::load(&config)?;
            let logs = harness::run_seeds(&cfg)?;
            print_paths(&export_all(&logs, &output.out, output.format, true)?);
        }
        Command::SweepHorizon { config, h_max, policies, records, output } => {
            let cfg = ExperimentConfig::load(&config)?;
            let policies = if policies.is_empty() { Policy::ALL.to_vec() } else { policies };
            let logs = harness::sweep_horizon(&cfg, h_max, &policies)?;
            print_paths(&export_all(&logs, &output.out, output.format, records)?);
        }
        Command::Compare { config, output } => {
            let cfg = ExperimentConfig::load(&config)?;
            let logs = harness::compare(&cfg)?;
            print_paths(&export_all(&logs, &output.out, output.format, true)?);
        }
        Command::SampleCkm { config, out, n, bounds, seed } => {
            let cfg = ExperimentConfig::load(&config)?;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let samples = sample_field(&cfg.field, bounds, cfg.k_set.values(), n, &mut rng)?;
            let mut w = create(&out)?;
            write_samples(&samples, &mut w).map_err(|e| relocate(&out, e))?;
            finish(&out, w)?;
            println!("{}", out.display());
        }
        Command::FitCkm { samples, out, bounds, resolution, k } => {
            let data = read_samples(open(&samples)?).map_err(|e| relocate(&samples, e))?;
            let k_values = if k.is_empty() {
                let mut ks: Vec<u32> = data.iter().map(|s| s.k).collect();
                ks.sort_unstable();
                ks.dedup();
                ks
            } else {
                k
            };
            let grid = fit_grid(&data, bounds, resolution, &k_values)?;
            let mut w = create(&out)?;
            grid.save(&mut w).map_err(|e| io_err(&out, e))?;
            finish(&out, w)?;
            println!("{}", out.display());
        }
        Command::ShowCkm { grid, out, k } => {
            let map = GridCkm::load(open(&grid)?).map_err(|e| relocate(&grid, e))?;
            let layers = if k.is_empty() { map.k_values().to_vec() } else { k };
            let mut w = create(&out)?;
            let (nx, ny) = map.resolution();
            let mut body = String::from("x,y,k,var_x,var_y\n");
            for &kk in &layers {
                for iy in 0..ny {
                    for ix in 0..nx {
                        let (x, y) = map.cell_center(ix, iy);
                        let v = map.variance_at(x, y, kk)?;
                        body.push_str(&format!("{x:.16e},{y:.16e},{kk},{:.16e},{:.16e}\n", v[(0, 0)], v[(1, 1)]));
                    }
                }
            }
            w.write_all(body.as_bytes()).map_err(|e| io_err(&out, e))?;
            finish(&out, w)?;
            println!("{}", out.display());
        }
    }
    Ok(())
}

/// Attaches the real file name to errors reported against an anonymous stream.
fn relocate(path: &Path, e: Error) -> Error {
    match e {
        Error::Io { source, .. } => io_err(path, source),
        Error::Parse { line, message } => Error::Parse { line, message: format!("{}: {message}", path.display()) },
        other => other,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
