use std::fmt;
use std::path::{Path, PathBuf};

use pact_core::forward::ArcSamplingConfig;
use pact_core::inr::{FieldConfig, HashEncodingConfig, TrainConfig};
use pact_core::io::RawLayout;
use pact_core::mb::MbConfig;
use pact_core::metrics::{PixelRect, RegionSpec};
use pact_core::phantom::{PhantomSpec, Sphere, VesselParams};
use pact_core::ubp::UbpConfig;
use pact_core::{Acquisition, ForwardOperator, ImageGrid, Medium, Point2, RingGeometry};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ubp,
    Mb,
    Nr,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Ubp, Method::Mb, Method::Nr];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ubp => "ubp",
            Method::Mb => "mb",
            Method::Nr => "nr",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ubp" => Ok(Method::Ubp),
            "mb" => Ok(Method::Mb),
            "nr" => Ok(Method::Nr),
            other => Err(format!("unknown method {other:?} (expected ubp, mb or nr)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RingSpec {
    pub radius_m: f64,
    pub num_elements: usize,
}

/// Reconstruction grid, centered on the ring.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub pixel_size_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputFormat {
    #[default]
    Parf,
    Raw,
}

/// A recorded sinogram to reconstruct instead of a simulated one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSpec {
    pub path: PathBuf,
    #[serde(default)]
    pub format: InputFormat,
    #[serde(default)]
    pub layout: RawLayout,
}

/// Epoch cap for one projection count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochBudget {
    pub k: usize,
    pub max_epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct NrSettings {
    pub field: FieldConfig,
    pub train: TrainConfig,
    /// Per-k overrides of `train.max_epochs`.
    pub schedule: Vec<EpochBudget>,
}

impl NrSettings {
    pub fn train_for(&self, k: usize) -> TrainConfig {
        let mut t = self.train;
        if let Some(b) = self.schedule.iter().find(|b| b.k == k) {
            t.max_epochs = b.max_epochs;
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    /// Seeds measurement noise, network initialization and batch shuffling.
    #[serde(default)]
    pub seed: u64,
    pub geometry: RingSpec,
    pub medium: Medium,
    pub acquisition: Acquisition,
    pub grid: GridSpec,
    /// Arc points per shell; derived from the grid when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arc_points: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phantom: Option<PhantomSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<InputSpec>,
    /// SNR of additive white noise in simulated sinograms, dB.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_snr_db: Option<f64>,
    pub projections: Vec<usize>,
    pub methods: Vec<Method>,
    #[serde(default)]
    pub ubp: UbpConfig,
    #[serde(default)]
    pub mb: MbConfig,
    #[serde(default)]
    pub nr: NrSettings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regions: Option<RegionSpec>,
}

fn config_err(field: &str, e: impl fmt::Display) -> CliError {
    CliError::Config(format!("{field}: {e}"))
}

impl ExperimentConfig {
    pub const PRESETS: [&'static str; 4] = ["in-silico", "desk", "desk-point", "phantom"];

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("reading {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn preset(name: &str) -> Result<Self, CliError> {
        match name {
            "in-silico" => Ok(in_silico()),
            "desk" => Ok(desk()),
            "desk-point" => Ok(desk_point()),
            "phantom" => Ok(phantom()),
            other => Err(CliError::Config(format!(
                "unknown preset {other:?}; available: {}",
                Self::PRESETS.join(", ")
            ))),
        }
    }

    pub fn ring(&self) -> Result<RingGeometry, CliError> {
        RingGeometry::new(self.geometry.radius_m, self.geometry.num_elements)
            .map_err(|e| config_err("geometry", e))
    }

    pub fn image_grid(&self) -> Result<ImageGrid, CliError> {
        ImageGrid::centered(self.grid.nx, self.grid.ny, self.grid.pixel_size_m)
            .map_err(|e| config_err("grid", e))
    }

    /// Operator for `ring` (which may be a subsampled version of the
    /// configured ring).
    pub fn operator(&self, ring: RingGeometry) -> pact_core::Result<ForwardOperator> {
        let grid = self
            .image_grid()
            .map_err(|e| pact_core::Error::Geometry(e.to_string()))?;
        match self.arc_points {
            Some(m) => ForwardOperator::with_arc_sampling(
                ring,
                self.medium,
                self.acquisition,
                grid,
                ArcSamplingConfig::new(m)?,
            ),
            None => ForwardOperator::new(ring, self.medium, self.acquisition, grid),
        }
    }

    /// Check every field; errors name the offending key.
    pub fn validate(&self) -> Result<(), CliError> {
        let ring = self.ring()?;
        self.medium
            .validate()
            .map_err(|e| config_err("medium", e))?;
        self.acquisition
            .validate()
            .map_err(|e| config_err("acquisition", e))?;
        let grid = self.image_grid()?;
        grid.check_inside_ring(&ring)
            .map_err(|e| config_err("grid", e))?;
        if let Some(m) = self.arc_points {
            ArcSamplingConfig::new(m).map_err(|e| config_err("arc_points", e))?;
        }
        if self.phantom.is_none() && self.input.is_none() {
            return Err(CliError::Config(
                "either a [phantom] spec or an [input] sinogram is required".into(),
            ));
        }
        if let Some(snr) = self.noise_snr_db {
            if !snr.is_finite() {
                return Err(config_err("noise_snr_db", "must be finite"));
            }
        }
        if self.projections.is_empty() {
            return Err(config_err("projections", "list is empty"));
        }
        let n = self.geometry.num_elements;
        if let Some(k) = self
            .projections
            .iter()
            .find(|&&k| k == 0 || k > n || !n.is_multiple_of(k))
        {
            return Err(config_err(
                "projections",
                format!("{k} does not divide the {n} ring elements"),
            ));
        }
        if self.methods.is_empty() {
            return Err(config_err("methods", "list is empty"));
        }
        if !(self.ubp.solid_angle > 0.0) {
            return Err(config_err("ubp.solid_angle", "must be positive"));
        }
        self.mb.validate().map_err(|e| config_err("mb", e))?;
        self.nr
            .field
            .validate()
            .map_err(|e| config_err("nr.field", e))?;
        self.nr
            .train
            .validate()
            .map_err(|e| config_err("nr.train", e))?;
        if self.nr.schedule.iter().any(|b| b.max_epochs == 0) {
            return Err(config_err("nr.schedule", "max_epochs must be positive"));
        }
        if let Some(r) = &self.regions {
            r.validate(&grid).map_err(|e| config_err("regions", e))?;
        }
        Ok(())
    }

    /// Require a phantom (simulation needs one).
    pub fn phantom_spec(&self) -> Result<&PhantomSpec, CliError> {
        self.phantom
            .as_ref()
            .ok_or_else(|| CliError::Config("simulation needs a [phantom] spec".into()))
    }
}

fn schedule(pairs: &[(usize, usize)]) -> Vec<EpochBudget> {
    pairs
        .iter()
        .map(|&(k, max_epochs)| EpochBudget { k, max_epochs })
        .collect()
}

/// Full-scale simulation: 256-element 40 mm ring, 20 MHz, 512×512 grid of
/// 0.05 mm pixels.
fn in_silico() -> ExperimentConfig {
    let grid = GridSpec {
        nx: 512,
        ny: 512,
        pixel_size_m: 5e-5,
    };
    let image_grid = ImageGrid::centered(grid.nx, grid.ny, grid.pixel_size_m).unwrap();
    ExperimentConfig {
        output_dir: "out/in-silico".into(),
        seed: 0,
        geometry: RingSpec {
            radius_m: 0.04,
            num_elements: 256,
        },
        medium: Medium::new(1500.0).unwrap(),
        acquisition: Acquisition::new(20e6, 1024).unwrap(),
        grid,
        arc_points: None,
        phantom: Some(PhantomSpec::VesselBranches(VesselParams::for_grid(
            &image_grid,
            7,
        ))),
        input: None,
        noise_snr_db: None,
        projections: vec![32, 64, 128, 256],
        methods: Method::ALL.to_vec(),
        ubp: UbpConfig::default(),
        mb: MbConfig {
            lambda: 0.01,
            ..MbConfig::default()
        },
        nr: NrSettings {
            field: FieldConfig::default(),
            train: TrainConfig {
                eta: 0.02,
                ..TrainConfig::default()
            },
            schedule: schedule(&[(32, 100), (64, 60), (128, 40), (256, 20)]),
        },
        regions: None,
    }
}

/// Desk-scale field configuration: the finest level resolves the 64-pixel
/// grid twice over.
pub fn desk_field() -> FieldConfig {
    FieldConfig {
        encoding: HashEncodingConfig {
            num_levels: 8,
            features_per_level: 2,
            table_size_log2: 16,
            base_resolution: 16,
            finest_resolution: 128,
        },
        hidden: vec![64, 64],
    }
}

/// 64×64 grid of 0.4 mm pixels inside a 64-element 40 mm ring sampled at
/// 10 MHz.
fn desk() -> ExperimentConfig {
    let grid = GridSpec {
        nx: 64,
        ny: 64,
        pixel_size_m: 4e-4,
    };
    let image_grid = ImageGrid::centered(grid.nx, grid.ny, grid.pixel_size_m).unwrap();
    ExperimentConfig {
        output_dir: "out/desk".into(),
        seed: 0,
        geometry: RingSpec {
            radius_m: 0.04,
            num_elements: 64,
        },
        medium: Medium::new(1500.0).unwrap(),
        acquisition: Acquisition::new(10e6, 512).unwrap(),
        grid,
        arc_points: None,
        phantom: Some(PhantomSpec::VesselBranches(VesselParams::for_grid(
            &image_grid,
            7,
        ))),
        input: None,
        noise_snr_db: None,
        projections: vec![8, 16, 32, 64],
        methods: Method::ALL.to_vec(),
        ubp: UbpConfig::default(),
        mb: MbConfig {
            lambda: 0.01,
            ..MbConfig::default()
        },
        nr: NrSettings {
            field: desk_field(),
            train: TrainConfig {
                eta: 0.02,
                rays_per_batch: 256,
                ..TrainConfig::default()
            },
            schedule: schedule(&[(8, 100), (16, 60), (32, 40), (64, 20)]),
        },
        regions: None,
    }
}

/// Desk geometry with a single small off-center absorber, all elements.
fn desk_point() -> ExperimentConfig {
    let mut cfg = desk();
    cfg.output_dir = "out/desk-point".into();
    cfg.phantom = Some(PhantomSpec::Spheres {
        spheres: vec![Sphere {
            center: Point2::new(3.0e-3, -2.2e-3),
            radius_m: 0.45e-3,
            amplitude: 1.0,
        }],
    });
    cfg.projections = vec![64];
    cfg.nr.schedule = schedule(&[(64, 40)]);
    cfg
}

/// Wire-grid target with measurement noise, scored by SNR/CNR.
fn phantom() -> ExperimentConfig {
    let mut cfg = desk();
    cfg.output_dir = "out/phantom".into();
    cfg.phantom = Some(PhantomSpec::WirePolyline {
        vertices: vec![
            Point2::new(-8e-3, -6e-3),
            Point2::new(-2e-3, 6e-3),
            Point2::new(2e-3, -6e-3),
            Point2::new(8e-3, 6e-3),
        ],
        width_m: 0.8e-3,
        amplitude: 1.0,
    });
    cfg.noise_snr_db = Some(10.0);
    cfg.mb.lambda = 0.05;
    cfg.nr.train.eta = 0.02;
    // signal on the first wire segment, background in the lower-right corner
    cfg.regions = Some(RegionSpec {
        signal: PixelRect::new(19, 30, 1, 4),
        background: PixelRect::new(48, 4, 10, 10),
    });
    cfg
}
