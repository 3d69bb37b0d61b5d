//! End-to-end exercises of the command-line binary: the full pipeline on a
//! tiny synthetic corpus, bit-identical reruns, the infinite-PSNR sentinel,
//! the exit-code taxonomy, and error-path run manifests.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_phatnet"));
    c.env_remove("PHATNET_BACKEND");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary should spawn")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("process should exit normally")
}

fn read_json(path: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("reading {}: {e}", path.display()));
    serde_json::from_str(&text).unwrap_or_else(|e| panic!("parsing {}: {e}", path.display()))
}

fn manifest_status(path: &Path) -> String {
    read_json(path)["status"].as_str().unwrap_or_default().to_string()
}

fn png_count(dir: &Path) -> usize {
    std::fs::read_dir(dir)
        .map(|rd| {
            rd.filter_map(|e| e.ok())
                .filter(|e| e.path().extension().and_then(|x| x.to_str()) == Some("png"))
                .count()
        })
        .unwrap_or(0)
}

/// Small paired domains plus a trained transfer checkpoint, shared by the
/// pipeline test. Returns (workdir, source dir, target dir, checkpoint).
fn synth_and_train(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let src = dir.join("src");
    let tgt = dir.join("tgt");
    let ckpt = dir.join("p.ckpt");
    assert_ok(
        &run(&[
            "synth-data", "--preset", "source", "--size", "64", "--pairs", "6",
            "--out", src.to_str().unwrap(),
        ]),
        "synth source",
    );
    assert_ok(
        &run(&[
            "synth-data", "--preset", "target", "--size", "64", "--pairs", "4",
            "--out", tgt.to_str().unwrap(),
        ]),
        "synth target",
    );
    let cfg = dir.join("train.json");
    std::fs::write(
        &cfg,
        r#"{"epochs": 2, "stage_count": 2, "channels": 8, "crop_size": 32}"#,
    )
    .unwrap();
    assert_ok(
        &run(&[
            "train-phatnet", "--dataset", src.to_str().unwrap(),
            "--config", cfg.to_str().unwrap(), "--out", ckpt.to_str().unwrap(),
        ]),
        "train-phatnet",
    );
    (src, tgt, ckpt)
}

#[test]
fn full_pipeline_smoke() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let (src, tgt, ckpt) = synth_and_train(dir);

    // Dataset layout and training artifacts.
    assert!(src.join("domain.json").is_file());
    assert_eq!(png_count(&src.join("hazy")), 6);
    assert_eq!(png_count(&src.join("clean")), 6);
    assert!(ckpt.is_file());
    assert!(dir.join("p.history.csv").is_file());
    assert_eq!(manifest_status(&dir.join("p.ckpt.run.json")), "ok");
    let history = std::fs::read_to_string(dir.join("p.history.csv")).unwrap();
    assert!(history.starts_with("step,lr,htc,cl,total"));
    // 2 epochs over 6 pairs at batch 1.
    assert_eq!(history.lines().count(), 1 + 12);

    // Haze transfer with a review grid.
    let hazy0 = tgt.join("hazy/0000.png");
    let clean1 = src.join("clean/0001.png");
    let t_png = dir.join("t.png");
    let grid = dir.join("grid.png");
    assert_ok(
        &run(&[
            "transfer", "--checkpoint", ckpt.to_str().unwrap(),
            "--hazy", hazy0.to_str().unwrap(), "--clean", clean1.to_str().unwrap(),
            "--out", t_png.to_str().unwrap(),
            "--grid", grid.to_str().unwrap(),
            "--oracle", tgt.join("hazy/0001.png").to_str().unwrap(),
        ]),
        "transfer",
    );
    let transferred = phatnet::pngio::load_png(&t_png).unwrap();
    assert_eq!((transferred.height(), transferred.width()), (64, 64));
    let grid_img = phatnet::pngio::load_png(&grid).unwrap();
    assert_eq!(grid_img.height(), 64);
    assert!(grid_img.width() >= 4 * 64, "grid should hold four panels");
    assert_eq!(manifest_status(&dir.join("t.png.run.json")), "ok");

    // gamma = 1 is the plain transfer, byte for byte on disk.
    let t_g1 = dir.join("t_g1.png");
    assert_ok(
        &run(&[
            "transfer", "--checkpoint", ckpt.to_str().unwrap(),
            "--hazy", hazy0.to_str().unwrap(), "--clean", clean1.to_str().unwrap(),
            "--gamma", "1.0", "--out", t_g1.to_str().unwrap(),
        ]),
        "transfer with unit gamma",
    );
    assert_eq!(
        std::fs::read(&t_png).unwrap(),
        std::fs::read(&t_g1).unwrap(),
        "unit gamma must not change the rendered transfer"
    );

    // Fine-tuning set: 4 hazy × 6 clean × 2 edits.
    let ft = dir.join("ft");
    assert_ok(
        &run(&[
            "build-finetune-set", "--checkpoint", ckpt.to_str().unwrap(),
            "--target-dir", tgt.to_str().unwrap(), "--source-dir", src.to_str().unwrap(),
            "--edits", "none,vflip", "--out", ft.to_str().unwrap(),
        ]),
        "build-finetune-set",
    );
    let ft_manifest = read_json(&ft.join("manifest.json"));
    assert_eq!(ft_manifest["kind"], "finetune-set");
    assert_eq!(ft_manifest["target_count"], 4);
    assert_eq!(ft_manifest["source_count"], 6);
    assert_eq!(ft_manifest["entries"].as_array().unwrap().len(), 48);
    assert_eq!(png_count(&ft.join("transferred")), 48);
    assert_eq!(png_count(&ft.join("clean")), 6);
    assert_eq!(manifest_status(&ft.join("run_manifest.json")), "ok");

    // Baseline dehazer and its one-epoch adaptation.
    let dz = dir.join("d.ckpt");
    assert_ok(
        &run(&[
            "train-dehazer", "--dataset", src.to_str().unwrap(),
            "--epochs", "2", "--crop-size", "32", "--out", dz.to_str().unwrap(),
        ]),
        "train-dehazer",
    );
    assert!(dir.join("d.history.csv").is_file());
    let da = dir.join("da.ckpt");
    assert_ok(
        &run(&[
            "adapt", "--dehazer", dz.to_str().unwrap(),
            "--finetune-dir", ft.to_str().unwrap(), "--out", da.to_str().unwrap(),
        ]),
        "adapt",
    );
    assert!(da.is_file());
    let adapt_hist = std::fs::read_to_string(dir.join("da.history.csv")).unwrap();
    // One epoch over 48 pairs at batch 1.
    assert_eq!(adapt_hist.lines().count(), 1 + 48);

    // Evaluation report.
    let report_path = dir.join("eval.json");
    let eval_out = run(&[
        "evaluate", "--dehazer", da.to_str().unwrap(),
        "--dataset", tgt.to_str().unwrap(), "--out", report_path.to_str().unwrap(),
    ]);
    assert_ok(&eval_out, "evaluate");
    let report = read_json(&report_path);
    assert_eq!(report["scores"].as_array().unwrap().len(), 4);
    let mean_ssim = report["mean_ssim"].as_f64().unwrap();
    assert!((-1.0..=1.0).contains(&mean_ssim));
    assert!(dir.join("eval.csv").is_file());
    assert!(String::from_utf8_lossy(&eval_out.stdout).contains("4 images"));

    // Latent inspection dumps one heatmap/bar/CSV set per stage.
    let insp = dir.join("insp");
    assert_ok(
        &run(&[
            "inspect", "--checkpoint", ckpt.to_str().unwrap(),
            "--hazy", hazy0.to_str().unwrap(), "--out", insp.to_str().unwrap(),
        ]),
        "inspect",
    );
    for s in 0..2 {
        assert!(insp.join(format!("ftm_stage{s}.png")).is_file());
        assert!(insp.join(format!("ftm_stage{s}.csv")).is_file());
        assert!(insp.join(format!("fal_stage{s}.png")).is_file());
        assert!(insp.join(format!("fal_stage{s}.csv")).is_file());
    }
    assert_eq!(manifest_status(&insp.join("run_manifest.json")), "ok");
}

#[test]
fn reruns_are_bit_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    for name in ["a", "b"] {
        assert_ok(
            &run(&[
                "synth-data", "--preset", "source", "--size", "64", "--pairs", "3",
                "--out", dir.join(name).to_str().unwrap(),
            ]),
            "synth",
        );
    }
    assert_eq!(
        std::fs::read(dir.join("a/domain.json")).unwrap(),
        std::fs::read(dir.join("b/domain.json")).unwrap()
    );
    for i in 0..3 {
        for sub in ["hazy", "clean"] {
            let rel = format!("{sub}/{i:04}.png");
            assert_eq!(
                std::fs::read(dir.join("a").join(&rel)).unwrap(),
                std::fs::read(dir.join("b").join(&rel)).unwrap(),
                "{rel} differs between identical runs"
            );
        }
    }

    let cfg = dir.join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"epochs": 1, "stage_count": 1, "channels": 4, "crop_size": 16}"#,
    )
    .unwrap();
    for name in ["p1.ckpt", "p2.ckpt"] {
        assert_ok(
            &run(&[
                "train-phatnet", "--dataset", dir.join("a").to_str().unwrap(),
                "--config", cfg.to_str().unwrap(),
                "--out", dir.join(name).to_str().unwrap(),
            ]),
            "train",
        );
    }
    assert_eq!(
        std::fs::read(dir.join("p1.ckpt")).unwrap(),
        std::fs::read(dir.join("p2.ckpt")).unwrap(),
        "fixed-seed training must reproduce the checkpoint exactly"
    );
}

#[test]
fn identity_dehazer_on_clean_pairs_reports_infinite_psnr() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let data = dir.join("data");
    assert_ok(
        &run(&[
            "synth-data", "--preset", "source", "--size", "64", "--pairs", "2",
            "--out", data.to_str().unwrap(),
        ]),
        "synth",
    );
    // Make hazy == clean so the identity dehazer scores a perfect match.
    for i in 0..2 {
        std::fs::copy(
            data.join(format!("clean/{i:04}.png")),
            data.join(format!("hazy/{i:04}.png")),
        )
        .unwrap();
    }
    let report_path = dir.join("report.json");
    let out = run(&[
        "evaluate", "--dehazer", "zero",
        "--dataset", data.to_str().unwrap(), "--out", report_path.to_str().unwrap(),
    ]);
    assert_ok(&out, "evaluate");
    assert!(String::from_utf8_lossy(&out.stdout).contains("inf"));
    let report = read_json(&report_path);
    assert!(report["mean_psnr_db"].is_null(), "all-infinite mean must be the null sentinel");
    assert_eq!(report["infinite_psnr_count"], 2);
    for score in report["scores"].as_array().unwrap() {
        assert!(score["psnr_db"].is_null());
        assert!((score["ssim"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn exit_codes_follow_the_error_taxonomy() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let data = dir.join("data");
    assert_ok(
        &run(&[
            "synth-data", "--preset", "source", "--size", "64", "--pairs", "2",
            "--out", data.to_str().unwrap(),
        ]),
        "synth",
    );
    let hazy = data.join("hazy/0000.png");
    let clean = data.join("clean/0000.png");
    let out_png = dir.join("out.png");

    // Missing input file: I/O error class.
    let missing = run(&[
        "transfer", "--checkpoint", dir.join("nope.ckpt").to_str().unwrap(),
        "--hazy", hazy.to_str().unwrap(), "--clean", clean.to_str().unwrap(),
        "--out", out_png.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&missing), 2);

    // Corrupt checkpoint: checkpoint error class.
    let bad_ckpt = dir.join("bad.ckpt");
    std::fs::write(&bad_ckpt, vec![0u8; 512]).unwrap();
    let corrupt = run(&[
        "transfer", "--checkpoint", bad_ckpt.to_str().unwrap(),
        "--hazy", hazy.to_str().unwrap(), "--clean", clean.to_str().unwrap(),
        "--out", out_png.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&corrupt), 3);

    // Usage errors: unknown flag, conflicting edits.
    assert_eq!(exit_code(&run(&["transfer", "--no-such-flag"])), 1);
    let conflict = run(&[
        "transfer", "--checkpoint", bad_ckpt.to_str().unwrap(),
        "--hazy", hazy.to_str().unwrap(), "--clean", clean.to_str().unwrap(),
        "--out", out_png.to_str().unwrap(), "--gamma", "0.5", "--vflip",
    ]);
    assert_eq!(exit_code(&conflict), 1);

    // Invalid parameter value.
    let zero_gamma = run(&[
        "transfer", "--checkpoint", bad_ckpt.to_str().unwrap(),
        "--hazy", hazy.to_str().unwrap(), "--clean", clean.to_str().unwrap(),
        "--out", out_png.to_str().unwrap(), "--gamma", "0",
    ]);
    assert_eq!(exit_code(&zero_gamma), 1);

    // Unsupported backend requested via the environment.
    let backend = bin()
        .env("PHATNET_BACKEND", "cuda")
        .args([
            "synth-data", "--preset", "source", "--size", "32", "--pairs", "1",
            "--out", dir.join("x").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(exit_code(&backend), 1);

    // Help and version are not errors.
    assert_eq!(exit_code(&run(&["--help"])), 0);
    assert_eq!(exit_code(&run(&["--version"])), 0);
}

#[test]
fn resolution_policy_gates_incompatible_images() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    // 40×40 satisfies the image container (divisible by 8) but not the
    // 32-pixel dataset contract, so `reject` must refuse it and `crop`
    // must shave it to 32×32.
    let data = dir.join("data");
    std::fs::create_dir_all(data.join("hazy")).unwrap();
    std::fs::create_dir_all(data.join("clean")).unwrap();
    let img = phatnet::datagen::generate_clean_scene(7, 40, 40).unwrap();
    phatnet::pngio::save_png16(&data.join("hazy/0000.png"), &img).unwrap();
    phatnet::pngio::save_png16(&data.join("clean/0000.png"), &img).unwrap();

    let report = dir.join("r.json");
    let rejected = run(&[
        "evaluate", "--dehazer", "zero", "--dataset", data.to_str().unwrap(),
        "--out", report.to_str().unwrap(), "--policy", "reject",
    ]);
    assert_eq!(exit_code(&rejected), 2);

    let cropped = run(&[
        "evaluate", "--dehazer", "zero", "--dataset", data.to_str().unwrap(),
        "--out", report.to_str().unwrap(), "--policy", "crop",
    ]);
    assert_ok(&cropped, "evaluate with crop policy");
    assert_eq!(read_json(&report)["infinite_psnr_count"], 1);
}

#[test]
fn failed_runs_write_error_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out_png = dir.join("t.png");
    let out = run(&[
        "transfer", "--checkpoint", dir.join("missing.ckpt").to_str().unwrap(),
        "--hazy", dir.join("h.png").to_str().unwrap(),
        "--clean", dir.join("c.png").to_str().unwrap(),
        "--out", out_png.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 2);
    let manifest = read_json(&dir.join("t.png.run.json"));
    assert_eq!(manifest["status"], "error");
    assert!(
        !manifest["error"].as_str().unwrap_or("").is_empty(),
        "error manifest should carry the failure message"
    );
    assert!(!out_png.exists(), "failed transfer must not leave an output image");
}
