use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::time::Instant;

use pact_core::inr::{self, EpochRecord, FieldDomain, NeuralField};
use pact_core::mb::{self, IterRecord};
use pact_core::metrics::{self, RegionSpec};
use pact_core::phantom::{self, Noise};
use pact_core::{io, subsample_projections, HeatImage, Sinogram};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, InputFormat, Method};
use crate::error::{CliError, Context};
use crate::render;

/// File names inside the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub dir: PathBuf,
}

impl Layout {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn sinogram(&self) -> PathBuf {
        self.dir.join("sinogram.parf")
    }

    pub fn ground_truth(&self) -> PathBuf {
        self.dir.join("ground_truth.paim")
    }

    pub fn recon(&self, m: Method, k: usize) -> PathBuf {
        self.dir.join(format!("recon_{m}_k{k}.paim"))
    }

    pub fn recon_png(&self, m: Method, k: usize) -> PathBuf {
        self.dir.join(format!("recon_{m}_k{k}.png"))
    }

    pub fn history(&self, m: Method, k: usize) -> PathBuf {
        self.dir.join(format!("history_{m}_k{k}.csv"))
    }

    pub fn run_meta(&self, m: Method, k: usize) -> PathBuf {
        self.dir.join(format!("run_{m}_k{k}.json"))
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }

    pub fn strip(&self, m: Method) -> PathBuf {
        self.dir.join(format!("strip_{m}.png"))
    }

    pub fn comparison(&self) -> PathBuf {
        self.dir.join("comparison.png")
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

pub struct Simulation {
    pub sinogram: Sinogram,
    pub ground_truth: HeatImage,
}

/// Rasterize the phantom and simulate its sinogram.
pub fn simulate(cfg: &ExperimentConfig) -> Result<Simulation, CliError> {
    let spec = cfg.phantom_spec()?;
    let grid = cfg.image_grid()?;
    let ground_truth = phantom::rasterize(spec, &grid).context("rasterizing phantom")?;
    let op = cfg
        .operator(cfg.ring()?)
        .context("building forward operator")?;
    let noise = cfg.noise_snr_db.map(|snr_db| Noise {
        snr_db,
        seed: cfg.seed,
    });
    let sinogram =
        phantom::synthesize_with(&op, &ground_truth, noise).context("simulating sinogram")?;
    Ok(Simulation {
        sinogram,
        ground_truth,
    })
}

/// [`simulate`] and write the sinogram, ground truth and its preview.
pub fn run_simulate(cfg: &ExperimentConfig) -> Result<Simulation, CliError> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.output_dir);
    ensure_dir(&layout.dir)?;
    log::info!(
        "ring R = {} m with {} elements, c = {} m/s, fs = {} Hz × {} samples, grid {}×{} @ {} m",
        cfg.geometry.radius_m,
        cfg.geometry.num_elements,
        cfg.medium.sos_mps,
        cfg.acquisition.sample_rate_hz,
        cfg.acquisition.num_samples,
        cfg.grid.nx,
        cfg.grid.ny,
        cfg.grid.pixel_size_m
    );
    let sim = simulate(cfg)?;
    io::save_sinogram(&sim.sinogram, layout.sinogram()).context("writing sinogram")?;
    io::save_image(&sim.ground_truth, layout.ground_truth()).context("writing ground truth")?;
    render::save_png(&sim.ground_truth, &layout.dir.join("ground_truth.png"))?;
    log::info!("wrote {}", layout.sinogram().display());
    Ok(sim)
}

/// The measured sinogram: the configured input if any, otherwise the
/// simulated one in the output directory.
pub fn load_measurement(cfg: &ExperimentConfig) -> Result<Sinogram, CliError> {
    match &cfg.input {
        Some(input) => match input.format {
            InputFormat::Parf => {
                io::load_sinogram(&input.path).context(format!("reading {}", input.path.display()))
            }
            InputFormat::Raw => {
                let f = File::open(&input.path).map_err(io_err(&input.path))?;
                io::import_raw(
                    std::io::BufReader::new(f),
                    cfg.ring()?,
                    cfg.acquisition,
                    input.layout,
                )
                .context(format!("importing {}", input.path.display()))
            }
        },
        None => {
            let path = Layout::new(&cfg.output_dir).sinogram();
            io::load_sinogram(&path).context(format!("reading {}", path.display()))
        }
    }
}

#[derive(Debug, Clone)]
pub enum History {
    None,
    Mb(Vec<IterRecord>),
    Nr(Vec<EpochRecord>),
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub method: Method,
    pub k: usize,
    pub image: HeatImage,
    pub history: History,
    pub runtime_s: f64,
}

/// Reconstruct `sino` after keeping `k` equally spaced elements.
pub fn reconstruct(
    cfg: &ExperimentConfig,
    sino: &Sinogram,
    method: Method,
    k: usize,
) -> Result<Reconstruction, CliError> {
    let grid = cfg.image_grid()?;
    let sub = subsample_projections(sino, k).context(format!("subsampling to {k} projections"))?;
    let what = format!("{method} reconstruction at k = {k}");
    let start = Instant::now();
    let (image, history) = match method {
        Method::Ubp => {
            let img = pact_core::ubp::ubp_reconstruct(&sub, &grid, &cfg.medium, &cfg.ubp)
                .context(what)?;
            (img, History::None)
        }
        Method::Mb => {
            let op = cfg.operator(sub.geometry.clone()).context(what.clone())?;
            let res = mb::mb_reconstruct(&sub, &op, &cfg.mb).context(what)?;
            (res.image, History::Mb(res.history))
        }
        Method::Nr => {
            let op = cfg.operator(sub.geometry.clone()).context(what.clone())?;
            let nf = NeuralField::<f32>::new(
                cfg.nr.field.clone(),
                FieldDomain::for_grid(&grid),
                cfg.seed,
            )
            .context(what.clone())?;
            let mut train = cfg.nr.train_for(k);
            train.seed = cfg.seed;
            let res = inr::train_with(nf, &sub, &op, &train, |r| {
                if r.epoch % 10 == 0 {
                    log::info!("nr k={k} epoch {}: loss {:.4e}", r.epoch, r.loss);
                }
            })
            .context(what.clone())?;
            let img = res.field.render_grid(&grid).context(what)?;
            (img, History::Nr(res.history))
        }
    };
    Ok(Reconstruction {
        method,
        k,
        image,
        history,
        runtime_s: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub method: Method,
    pub k: usize,
    pub runtime_s: f64,
    /// Iterations (MB) or epochs (NR) performed.
    pub steps: usize,
}

fn write_history(path: &Path, history: &History) -> Result<(), CliError> {
    fn write<R: Serialize>(path: &Path, rows: &[R]) -> Result<(), CliError> {
        let mut w = csv::Writer::from_path(path)
            .map_err(|e| CliError::Output(format!("{}: {e}", path.display())))?;
        for r in rows {
            w.serialize(r)
                .map_err(|e| CliError::Output(format!("{}: {e}", path.display())))?;
        }
        w.flush().map_err(io_err(path))
    }
    match history {
        History::None => Ok(()),
        History::Mb(rows) => write(path, rows),
        History::Nr(rows) => write(path, rows),
    }
}

/// Write a reconstruction's image, preview, history and run metadata.
pub fn save_reconstruction(layout: &Layout, rec: &Reconstruction) -> Result<(), CliError> {
    ensure_dir(&layout.dir)?;
    let (m, k) = (rec.method, rec.k);
    io::save_image(&rec.image, layout.recon(m, k)).context("writing reconstruction")?;
    render::save_png(&rec.image, &layout.recon_png(m, k))?;
    write_history(&layout.history(m, k), &rec.history)?;
    let steps = match &rec.history {
        History::None => 1,
        History::Mb(h) => h.len(),
        History::Nr(h) => h.len(),
    };
    let meta = RunMeta {
        method: m,
        k,
        runtime_s: rec.runtime_s,
        steps,
    };
    let path = layout.run_meta(m, k);
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&path, text).map_err(io_err(&path))
}

/// Load the measurement, reconstruct, and save the outputs.
pub fn run_reconstruct(
    cfg: &ExperimentConfig,
    method: Method,
    k: usize,
) -> Result<Reconstruction, CliError> {
    cfg.validate()?;
    let sino = load_measurement(cfg)?;
    let rec = reconstruct(cfg, &sino, method, k)?;
    save_reconstruction(&Layout::new(&cfg.output_dir), &rec)?;
    log::info!("{method} k={k} done in {:.2} s", rec.runtime_s);
    Ok(rec)
}

/// One row of `metrics.csv`. Metrics that do not apply stay empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: Method,
    pub k: usize,
    pub ssim: Option<f64>,
    pub psnr_db: Option<f64>,
    pub snr_db: Option<f64>,
    pub cnr_db: Option<f64>,
    pub runtime_s: Option<f64>,
}

/// SSIM, PSNR, SNR and CNR, each present only if it could be computed.
pub type Scores = (Option<f64>, Option<f64>, Option<f64>, Option<f64>);

/// Score one image against the ground truth and/or the given regions.
pub fn score(
    regions: Option<&RegionSpec>,
    image: &HeatImage,
    ground_truth: Option<&HeatImage>,
) -> Result<Scores, CliError> {
    let (ssim, psnr) = match ground_truth {
        Some(gt) => {
            let (s, p) =
                metrics::compare_normalized(image, gt).context("scoring against ground truth")?;
            (Some(s), Some(p))
        }
        None => (None, None),
    };
    let (snr, cnr) = match regions {
        Some(r) => (
            Some(metrics::snr(image, r).context("computing SNR")?),
            Some(metrics::cnr(image, r).context("computing CNR")?),
        ),
        None => (None, None),
    };
    Ok((ssim, psnr, snr, cnr))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, CliError> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| CliError::Output(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<Result<Vec<MetricsRow>, _>>()
        .map_err(|e| CliError::Output(format!("{}: {e}", path.display())))
}

fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| CliError::Output(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r)
            .map_err(|e| CliError::Output(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(io_err(path))
}

/// Score every configured (method, k) reconstruction found in the output
/// directory, write `metrics.csv` and the preview strips. Missing
/// reconstructions are skipped and reported as [`CliError::Partial`] after
/// the available rows are written.
pub fn run_compare(cfg: &ExperimentConfig) -> Result<Vec<MetricsRow>, CliError> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.output_dir);
    let gt_path = layout.ground_truth();
    let ground_truth = if gt_path.exists() {
        Some(io::load_image(&gt_path).context("reading ground truth")?)
    } else {
        None
    };
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    let mut images: Vec<(Method, Vec<Option<HeatImage>>)> = Vec::new();
    for &method in &cfg.methods {
        let mut row_images = Vec::new();
        for &k in &cfg.projections {
            let path = layout.recon(method, k);
            if !path.exists() {
                log::warn!("missing {}", path.display());
                missing.push(format!("{method} k={k}"));
                row_images.push(None);
                continue;
            }
            let image = io::load_image(&path).context(format!("reading {}", path.display()))?;
            let (ssim, psnr_db, snr_db, cnr_db) =
                score(cfg.regions.as_ref(), &image, ground_truth.as_ref())?;
            let runtime_s = fs::read_to_string(layout.run_meta(method, k))
                .ok()
                .and_then(|t| serde_json::from_str::<RunMeta>(&t).ok())
                .map(|m| m.runtime_s);
            rows.push(MetricsRow {
                method,
                k,
                ssim,
                psnr_db,
                snr_db,
                cnr_db,
                runtime_s,
            });
            row_images.push(Some(image));
        }
        images.push((method, row_images));
    }
    write_metrics(&layout.metrics(), &rows)?;
    for (method, row) in &images {
        render::save_strip(row, &layout.strip(*method))?;
    }
    let grid: Vec<Vec<Option<HeatImage>>> = images.into_iter().map(|(_, r)| r).collect();
    render::save_grid(&grid, &layout.comparison())?;
    if missing.is_empty() {
        Ok(rows)
    } else {
        Err(CliError::Partial { missing })
    }
}

/// Simulate (when a phantom is configured), reconstruct every method at
/// every projection count, then compare.
pub fn run_all(cfg: &ExperimentConfig) -> Result<Vec<MetricsRow>, CliError> {
    cfg.validate()?;
    let sino = if cfg.input.is_some() {
        load_measurement(cfg)?
    } else {
        run_simulate(cfg)?.sinogram
    };
    let layout = Layout::new(&cfg.output_dir);
    ensure_dir(&layout.dir)?;
    for &method in &cfg.methods {
        for &k in &cfg.projections {
            let rec = reconstruct(cfg, &sino, method, k)?;
            save_reconstruction(&layout, &rec)?;
            log::info!("{method} k={k} done in {:.2} s", rec.runtime_s);
        }
    }
    run_compare(cfg)
}
