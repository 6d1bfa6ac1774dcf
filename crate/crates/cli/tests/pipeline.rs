use std::path::Path;
use std::process::Command;

use pact_cli::config::EpochBudget;
use pact_cli::pipeline::read_metrics;
use pact_cli::{ExperimentConfig, Layout, Method};
use pact_core::io;
use pact_core::metrics::{PixelRect, RegionSpec};

fn pact(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_pact"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

/// Desk geometry cut down so a full run takes seconds.
fn quick_config(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::preset("desk").unwrap();
    cfg.output_dir = dir.join("out");
    cfg.acquisition.num_samples = 384;
    cfg.projections = vec![8, 16];
    cfg.mb.max_iters = 3;
    cfg.nr.field.hidden = vec![16];
    cfg.nr.field.encoding.num_levels = 4;
    cfg.nr.field.encoding.table_size_log2 = 12;
    cfg.nr.train.tv_resolution = 32;
    cfg.nr.train.rays_per_batch = 1024;
    cfg.nr.schedule = vec![
        EpochBudget {
            k: 8,
            max_epochs: 1,
        },
        EpochBudget {
            k: 16,
            max_epochs: 1,
        },
    ];
    cfg.regions = Some(RegionSpec {
        signal: PixelRect::new(30, 30, 4, 4),
        background: PixelRect::new(0, 0, 6, 6),
    });
    cfg
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> String {
    let path = dir.join("exp.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path.display().to_string()
}

#[test]
fn full_run_writes_every_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path());
    let config = write_config(dir.path(), &cfg);
    let (code, stdout, stderr) = pact(&["run", "--config", &config]);
    assert_eq!(code, 0, "{stderr}");
    assert!(stdout.contains("psnr_db"));

    let layout = Layout::new(&cfg.output_dir);
    for path in [
        layout.sinogram(),
        layout.ground_truth(),
        layout.metrics(),
        layout.comparison(),
    ] {
        assert!(path.exists(), "{}", path.display());
    }
    for m in Method::ALL {
        assert!(layout.strip(m).exists());
        for k in [8, 16] {
            assert!(layout.recon(m, k).exists());
            assert!(layout.recon_png(m, k).exists());
            assert!(layout.run_meta(m, k).exists());
        }
    }
    assert!(layout.history(Method::Mb, 8).exists());
    assert!(layout.history(Method::Nr, 16).exists());

    let rows = read_metrics(&layout.metrics()).unwrap();
    assert_eq!(rows.len(), 6);
    for r in &rows {
        assert!(
            r.ssim.is_some() && r.psnr_db.is_some() && r.snr_db.is_some() && r.cnr_db.is_some()
        );
        assert!(r.runtime_s.unwrap() >= 0.0);
    }

    // Single-image scoring agrees with the table.
    let recon = layout.recon(Method::Ubp, 16).display().to_string();
    let gt = layout.ground_truth().display().to_string();
    let (code, stdout, _) = pact(&["metrics", &recon, "--ground-truth", &gt]);
    assert_eq!(code, 0);
    let json: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    let row = rows
        .iter()
        .find(|r| r.method == Method::Ubp && r.k == 16)
        .unwrap();
    assert!((json["psnr_db"].as_f64().unwrap() - row.psnr_db.unwrap()).abs() < 1e-9);
}

#[test]
fn verbs_compose_and_compare_reports_missing() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick_config(dir.path());
    cfg.methods = vec![Method::Ubp, Method::Mb];
    let config = write_config(dir.path(), &cfg);
    assert_eq!(pact(&["simulate", "--config", &config]).0, 0);
    let (code, _, stderr) = pact(&[
        "reconstruct",
        "--config",
        &config,
        "--method",
        "ubp",
        "--k",
        "8",
    ]);
    assert_eq!(code, 0, "{stderr}");

    let (code, _, stderr) = pact(&["compare", "--config", &config]);
    assert_eq!(code, 3, "{stderr}");
    assert!(stderr.contains("mb k=8"));
    let rows = read_metrics(&Layout::new(&cfg.output_dir).metrics()).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!((rows[0].method, rows[0].k), (Method::Ubp, 8));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    // No config at all.
    assert_eq!(pact(&["simulate"]).0, 1);
    // Unknown preset and invalid projection count.
    assert_eq!(pact(&["simulate", "--preset", "nope"]).0, 1);
    let out = dir.path().join("o").display().to_string();
    assert_eq!(
        pact(&[
            "simulate",
            "--preset",
            "desk",
            "--projections",
            "7",
            "--output-dir",
            &out
        ])
        .0,
        1
    );
    // Unknown key in the file.
    let bad = dir.path().join("bad.toml");
    let text = ExperimentConfig::preset("desk").unwrap().to_toml() + "\nbogus = 1\n";
    std::fs::write(&bad, text).unwrap();
    assert_eq!(pact(&["simulate", "--config", bad.to_str().unwrap()]).0, 1);
    // Reconstructing before simulating has no sinogram to read.
    let cfg = quick_config(dir.path());
    let config = write_config(dir.path(), &cfg);
    assert_eq!(
        pact(&[
            "reconstruct",
            "--config",
            &config,
            "--method",
            "ubp",
            "--k",
            "8"
        ])
        .0,
        2
    );
    assert_eq!(
        pact(&["inspect", dir.path().join("missing.parf").to_str().unwrap()]).0,
        2
    );
}

#[test]
fn import_raw_and_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path());
    let config = write_config(dir.path(), &cfg);
    let (ne, ns) = (cfg.geometry.num_elements, cfg.acquisition.num_samples);
    let values: Vec<f32> = (0..ne * ns).map(|i| (i as f32 * 0.01).sin()).collect();
    let raw = dir.path().join("rec.bin");
    std::fs::write(
        &raw,
        values
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect::<Vec<_>>(),
    )
    .unwrap();
    let out = dir.path().join("rec.parf");
    let (code, _, stderr) = pact(&[
        "import",
        "--config",
        &config,
        raw.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--layout",
        "element_major",
    ]);
    assert_eq!(code, 0, "{stderr}");
    let sino = io::load_sinogram(&out).unwrap();
    assert_eq!(sino.data[[1, 0]], values[ns] as f64);

    let (code, stdout, _) = pact(&["inspect", out.to_str().unwrap()]);
    assert_eq!(code, 0);
    let header: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(header["kind"], "sinogram");
    assert_eq!(header["num_samples"], ns);

    // Wrong length is a runtime error.
    std::fs::write(&raw, [0u8; 12]).unwrap();
    let (code, _, _) = pact(&[
        "import",
        "--config",
        &config,
        raw.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 2);
}

#[test]
fn presets_print_as_loadable_toml() {
    for name in ExperimentConfig::PRESETS {
        let (code, stdout, _) = pact(&["preset", name]);
        assert_eq!(code, 0);
        let cfg = ExperimentConfig::from_toml(&stdout).unwrap();
        assert_eq!(cfg, ExperimentConfig::preset(name).unwrap());
    }
}
