use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pact_cli::config::{InputFormat, InputSpec};
use pact_cli::{CliError, ExperimentConfig, Method};
use pact_core::io::{self, RawLayout};

#[derive(Parser)]
#[command(
    name = "pact",
    version,
    about = "Ring-array photoacoustic reconstruction experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, short, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in config: in-silico, desk, desk-point or phantom.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated projection counts.
    #[arg(long, value_delimiter = ',')]
    projections: Option<Vec<usize>>,
    /// Comma-separated methods (ubp, mb, nr).
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, Some(name)) => ExperimentConfig::preset(name)?,
            (None, None) => {
                return Err(CliError::Config(
                    "pass --config FILE or --preset NAME".into(),
                ))
            }
        };
        if let Some(d) = &self.output_dir {
            cfg.output_dir = d.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(p) = &self.projections {
            cfg.projections = p.clone();
        }
        if let Some(m) = &self.methods {
            cfg.methods = m.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the configured phantom and write the sinogram and ground truth.
    Simulate(Common),
    /// Reconstruct the sinogram with one method at one projection count.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: Method,
        #[arg(long)]
        k: usize,
    },
    /// Score all reconstructions and write metrics.csv and preview strips.
    Compare(Common),
    /// Simulate, reconstruct every (method, k) and compare.
    Run(Common),
    /// Score a single image.
    Metrics {
        #[command(flatten)]
        common: Common,
        image: PathBuf,
        #[arg(long)]
        ground_truth: Option<PathBuf>,
    },
    /// Print the header of a sinogram or image file.
    Inspect { file: PathBuf },
    /// Convert a headerless f32 recording to a sinogram file, taking the
    /// ring and acquisition from the config.
    Import {
        #[command(flatten)]
        common: Common,
        raw: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "interleaved")]
        layout: String,
    },
    /// Print a built-in config as TOML.
    Preset { name: String },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(c) => {
            pact_cli::run_simulate(&c.load()?)?;
        }
        Command::Reconstruct { common, method, k } => {
            pact_cli::run_reconstruct(&common.load()?, method, k)?;
        }
        Command::Compare(c) => {
            print_rows(&pact_cli::run_compare(&c.load()?)?);
        }
        Command::Run(c) => {
            print_rows(&pact_cli::run_all(&c.load()?)?);
        }
        Command::Metrics {
            common,
            image,
            ground_truth,
        } => {
            // Regions come from the config when one is given.
            let cfg = match (&common.config, &common.preset) {
                (None, None) => None,
                _ => Some(common.load()?),
            };
            let read = |p: &PathBuf| {
                io::load_image(p).map_err(|source| CliError::Runtime {
                    context: format!("reading {}", p.display()),
                    source,
                })
            };
            let regions = cfg.as_ref().and_then(|c| c.regions.as_ref());
            if ground_truth.is_none() && regions.is_none() {
                return Err(CliError::Config(
                    "nothing to score: pass --ground-truth or a config with regions".into(),
                ));
            }
            let img = read(&image)?;
            let gt = ground_truth.as_ref().map(read).transpose()?;
            let (ssim, psnr, snr, cnr) = pact_cli::score(regions, &img, gt.as_ref())?;
            let json = serde_json::json!({
                "ssim": ssim, "psnr_db": psnr, "snr_db": snr, "cnr_db": cnr
            });
            println!("{json}");
        }
        Command::Inspect { file } => {
            let f = std::fs::File::open(&file).map_err(|source| CliError::Io {
                path: file.display().to_string(),
                source,
            })?;
            let header = io::read_header(std::io::BufReader::new(f)).map_err(|source| {
                CliError::Runtime {
                    context: format!("reading {}", file.display()),
                    source,
                }
            })?;
            println!("{}", serde_json::to_string_pretty(&header).unwrap());
        }
        Command::Import {
            common,
            raw,
            out,
            layout,
        } => {
            let mut cfg = common.load()?;
            let layout: RawLayout = serde_json::from_value(serde_json::Value::String(layout))
                .map_err(|e| CliError::Config(format!("layout: {e}")))?;
            cfg.input = Some(InputSpec {
                path: raw,
                format: InputFormat::Raw,
                layout,
            });
            let sino = pact_cli::load_measurement(&cfg)?;
            io::save_sinogram(&sino, &out).map_err(|source| CliError::Runtime {
                context: format!("writing {}", out.display()),
                source,
            })?;
        }
        Command::Preset { name } => {
            print!("{}", ExperimentConfig::preset(&name)?.to_toml());
        }
    }
    Ok(())
}

fn print_rows(rows: &[pact_cli::MetricsRow]) {
    let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    println!("method  k     ssim      psnr_db   snr_db    cnr_db    runtime_s");
    for r in rows {
        println!(
            "{:<7} {:<5} {:<9} {:<9} {:<9} {:<9} {}",
            r.method.name(),
            r.k,
            f(r.ssim),
            f(r.psnr_db),
            f(r.snr_db),
            f(r.cnr_db),
            f(r.runtime_s)
        );
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let CliError::Partial { .. } = e {
                log::warn!("{e}");
            } else {
                log::error!("{e}");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
