//! Dispatcher contract: exit codes, flag validation and the end-to-end
//! smoke path from data generation through sampling and evaluation.

use ssr_cli::dispatch;
use std::path::Path;

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["ssr"];
    argv.extend_from_slice(args);
    dispatch(argv)
}

#[test]
fn help_exits_zero() {
    assert_eq!(run(&["--help"]), 0);
}

#[test]
fn unknown_verb_exits_two() {
    assert_eq!(run(&["frobnicate"]), 2);
}

#[test]
fn missing_required_flag_exits_two() {
    assert_eq!(run(&["gen-data"]), 2); // --out missing
}

#[test]
fn unknown_flag_exits_two() {
    assert_eq!(run(&["gen-data", "--out", "x.ssrd", "--bogus"]), 2);
}

#[test]
fn runtime_failure_exits_one() {
    // nonexistent input file is a runtime error, not a usage error
    assert_eq!(
        run(&[
            "train-clip",
            "--data",
            "/nonexistent/train.ssrd",
            "--out",
            "/tmp/never.ssrt",
        ]),
        1
    );
}

#[test]
fn gen_data_writes_dataset_and_meta() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("train.ssrd");
    let code = run(&[
        "gen-data",
        "--count",
        "20",
        "--seed",
        "7",
        "--profile",
        "smoke",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    assert!(out.exists());
    assert!(dir.path().join("train.ssrd.meta.json").exists());
    let ds = ssr_core::sprites::Dataset::load(&out).unwrap();
    assert_eq!(ds.scenes.len(), 20);
    assert_eq!(ds.geometry.canvas, 16);
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "count=5\nseed=3\nprofile=smoke\n").unwrap();
    let out = dir.path().join("a.ssrd");
    assert_eq!(
        run(&[
            "gen-data",
            "--out",
            out.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
        ]),
        0
    );
    assert_eq!(
        ssr_core::sprites::Dataset::load(&out).unwrap().scenes.len(),
        5
    );

    let out2 = dir.path().join("b.ssrd");
    assert_eq!(
        run(&[
            "gen-data",
            "--out",
            out2.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--count",
            "9",
        ]),
        0
    );
    assert_eq!(
        ssr_core::sprites::Dataset::load(&out2).unwrap().scenes.len(),
        9
    );
}

/// Tiny end-to-end pass over every verb at minimal step counts.
#[test]
fn full_cli_pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    let s = |path: &Path| path.to_str().unwrap().to_string();

    let train = p("train.ssrd");
    let bench = p("bench.ssrd");
    assert_eq!(
        run(&[
            "gen-data", "--count", "64", "--seed", "1", "--profile", "smoke", "--out", &s(&train),
        ]),
        0
    );
    assert_eq!(
        run(&[
            "gen-data", "--count", "4", "--seed", "2", "--profile", "smoke", "--bench", "--out",
            &s(&bench),
        ]),
        0
    );

    let clip = p("clip.ssrt");
    assert_eq!(
        run(&[
            "train-clip", "--data", &s(&train), "--steps", "8", "--batch", "4", "--out", &s(&clip),
        ]),
        0
    );

    let base = p("base.ssrt");
    assert_eq!(
        run(&[
            "train-base", "--data", &s(&train), "--clip", &s(&clip), "--steps", "4", "--batch",
            "2", "--out", &s(&base),
        ]),
        0
    );

    let ssr1 = p("ssr1.ssrt");
    assert_eq!(
        run(&[
            "train-ssr", "--data", &s(&train), "--clip", &s(&clip), "--base", &s(&base),
            "--stage", "1", "--steps", "3", "--batch", "2", "--out", &s(&ssr1),
        ]),
        0
    );

    // stage 2 without a warm start is a usage-level failure at runtime
    let ssr2 = p("ssr2.ssrt");
    assert_eq!(
        run(&[
            "train-ssr", "--data", &s(&train), "--clip", &s(&clip), "--base", &s(&base),
            "--stage", "2", "--steps", "3", "--out", &s(&ssr2),
        ]),
        1
    );
    assert_eq!(
        run(&[
            "train-ssr", "--data", &s(&train), "--clip", &s(&clip), "--base", &s(&base),
            "--stage", "2", "--steps", "3", "--batch", "2", "--warm", &s(&ssr1), "--out",
            &s(&ssr2),
        ]),
        0
    );

    // sample a reference scene image first so we can condition on it
    let reference = p("ref.png");
    let scene = ssr_core::sprites::generate_scene(ssr_core::sprites::Geometry::SMOKE, 5, 1).unwrap();
    ssr_core::pngio::save_image(&scene.render::<f32>(), &reference).unwrap();
    let query = format!(
        "{} {}",
        scene.sprites[0].color.word(),
        scene.sprites[0].shape.word()
    );

    let sample = p("sample.png");
    assert_eq!(
        run(&[
            "sample", "--base", &s(&base), "--clip", &s(&clip), "--ssr", &s(&ssr2), "--prompt",
            "a red circle", "--ref", &s(&reference), "--query", &query, "--steps", "4", "--seed",
            "3", "--out", &s(&sample),
        ]),
        0
    );
    assert!(sample.exists());
    assert!(p("sample.png.meta.json").exists());

    let attn = p("attn.png");
    assert_eq!(
        run(&[
            "attn-map", "--ssr", &s(&ssr2), "--clip", &s(&clip), "--ref", &s(&reference),
            "--query", &query, "--out", &s(&attn),
        ]),
        0
    );
    assert!(attn.exists());

    let report = p("report.json");
    assert_eq!(
        run(&[
            "eval", "--bench", &s(&bench), "--base", &s(&base), "--clip", &s(&clip), "--ssr",
            &s(&ssr2), "--steps", "4", "--out", &s(&report),
        ]),
        0
    );
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(parsed["presence"].is_number());
    assert!(parsed["input_hashes"]["base"].is_string());

    // ablate expects the fixed layout in a config directory
    let cfg_dir = p("configs");
    std::fs::create_dir_all(&cfg_dir).unwrap();
    for (src, dst) in [
        (&clip, "clip.ssrt"),
        (&base, "base.ssrt"),
        (&ssr2, "ssr_full.ssrt"),
        (&ssr2, "ssr_no_reg.ssrt"),
        (&ssr1, "ssr_no_multiscale.ssrt"),
    ] {
        std::fs::copy(src, cfg_dir.join(dst)).unwrap();
    }
    let table = p("table.csv");
    assert_eq!(
        run(&[
            "ablate", "--bench", &s(&bench), "--configs", &s(&cfg_dir), "--out", &s(&table),
        ]),
        0
    );
    let csv = std::fs::read_to_string(&table).unwrap();
    assert!(csv.contains("config,presence,leakage,subject_similarity"));
    assert!(csv.contains("text_only"));
    assert!(csv.contains("# input bench sha256="));

    let sweep_dir = p("sweep");
    assert_eq!(
        run(&[
            "sweep", "--param", "lambda", "--values", "0,1", "--bench", &s(&bench), "--clip",
            &s(&clip), "--base", &s(&base), "--ssr", &s(&ssr2), "--out", &s(&sweep_dir),
        ]),
        0
    );
    assert!(sweep_dir.join("lambda_0.json").exists());
    assert!(sweep_dir.join("lambda_1.json").exists());
}
