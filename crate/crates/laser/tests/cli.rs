//! End-to-end tests of the `laser` binary: exit codes, run-directory layout,
//! manifest contents, eval outputs.

use std::path::Path;
use std::process::{Command, Output};

fn laser() -> Command {
    Command::new(env!("CARGO_BIN_EXE_laser"))
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).to_string()
}

#[test]
fn describe_lists_hook_topology_and_schedules() {
    let output = laser()
        .args(["describe", "--backbone", "tiny-test"])
        .output()
        .unwrap();
    assert!(output.status.success());
    let text = stdout(&output);
    assert!(text.contains("decoder layers: 8"));
    // Every decoder layer appears as decoder_layer/slot lines.
    for layer in 1..=8 {
        assert!(text.contains(&format!("  {layer}/q")), "missing {layer}/q");
    }
    assert!(text.contains("FAI: steps 1-25, layers 1-8 (all), feature layer 4"));
    assert!(text.contains("KVAI/DAI: steps 6-50, layers 3-8"));

    let output = laser()
        .args(["describe", "--backbone", "sd15-like"])
        .output()
        .unwrap();
    assert!(output.status.success());
    let text = stdout(&output);
    assert!(text.contains("decoder layers: 12"));
    assert!(text.contains("KVAI/DAI: steps 6-50, layers 3-8"));
}

#[test]
fn unknown_backbone_exits_with_runtime_error() {
    let output = laser()
        .args(["describe", "--backbone", "imaginary"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn missing_description_is_a_usage_error() {
    let output = laser().args(["generate"]).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn generate_smoke_run_populates_the_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let output = laser()
        .args([
            "generate",
            "-d",
            "A year has passed on the spring meadow",
            "--backbone",
            "tiny-test",
            "--llm",
            "mock",
            "--nt",
            "1",
            "--nf",
            "4",
            "--steps",
            "6",
            "--seed",
            "3",
        ])
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    // n_t = 1, n_f = 4 -> 4 frames.
    for i in 0..4 {
        assert!(out.join(format!("frames/{i:04}.png")).exists());
    }
    assert!(!out.join("frames/0004.png").exists());
    assert!(out.join("manifest.json").exists());
    assert!(out.join("metrics.json").exists());
    assert!(out.join("animation.gif").exists());
    assert!(out.join("input.png").exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["n_f"], 4);
    assert_eq!(manifest["frames"].as_array().unwrap().len(), 4);
    assert_eq!(manifest["plan"]["transitions"][0]["source"], "ica");
}

#[test]
fn strategy_override_is_recorded_in_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let output = laser()
        .args([
            "generate",
            "-d",
            "a cat sitting on the ground starts jumping",
            "--backbone",
            "tiny-test",
            "--llm",
            "mock",
            "--nt",
            "1",
            "--nf",
            "2",
            "--steps",
            "4",
            "--strategy",
            "FAI",
        ])
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let transition = &manifest["plan"]["transitions"][0];
    assert_eq!(transition["strategy"], "FAI");
    assert_eq!(transition["source"], "override");
}

fn write_identical_frames(dir: &Path, count: usize) {
    std::fs::create_dir_all(dir).unwrap();
    let img = laser::image_io::ImageBuf::filled(32, 32, [0.3, 0.6, 0.2]);
    for i in 0..count {
        img.save_png(&dir.join(format!("{i:04}.png"))).unwrap();
    }
    img.save_png(&dir.parent().unwrap().join("input.png")).unwrap();
}

#[test]
fn eval_reports_zero_path_length_for_identical_frames() {
    let dir = tempfile::tempdir().unwrap();
    let frames = dir.path().join("frames");
    write_identical_frames(&frames, 12);
    let output = laser()
        .arg("eval")
        .arg("--frames")
        .arg(&frames)
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(frames.join("metrics.json")).unwrap())
            .unwrap();
    assert_eq!(metrics["lpips_total"], 0.0);
    assert_eq!(metrics["ppl"], 0.0);
    assert_eq!(metrics["pic"], 1.0);
    assert_eq!(metrics["n_frames"], 12);
}

#[test]
fn eval_of_a_run_directory_satisfies_the_ppl_relation() {
    // Generate a 12-frame run, then evaluate its frames directory.
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let output = laser()
        .args([
            "generate",
            "-d",
            "a wooden sculpture of a cat turns into a golden sculpture of a cat",
            "--backbone",
            "tiny-test",
            "--llm",
            "mock",
            "--nt",
            "1",
            "--nf",
            "12",
            "--steps",
            "4",
        ])
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let metrics_out = dir.path().join("metrics.json");
    let output = laser()
        .arg("eval")
        .arg("--frames")
        .arg(out.join("frames"))
        .arg("--out")
        .arg(&metrics_out)
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&metrics_out).unwrap()).unwrap();
    let lpips_total = metrics["lpips_total"].as_f64().unwrap();
    let ppl = metrics["ppl"].as_f64().unwrap();
    assert!(
        (ppl - lpips_total * 11.0).abs() < 1e-9,
        "ppl {ppl} != lpips_total {lpips_total} x 11"
    );
}

#[test]
fn eval_of_an_empty_directory_fails() {
    let dir = tempfile::tempdir().unwrap();
    let frames = dir.path().join("frames");
    std::fs::create_dir_all(&frames).unwrap();
    let output = laser()
        .arg("eval")
        .arg("--frames")
        .arg(&frames)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn bench_sample_and_validate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let set = dir.path().join("sample.jsonl");
    let output = laser()
        .args(["bench", "sample", "--out"])
        .arg(&set)
        .output()
        .unwrap();
    assert!(output.status.success());

    let output = laser()
        .args(["bench", "validate", "--set"])
        .arg(&set)
        .output()
        .unwrap();
    assert!(output.status.success());
    let text = stdout(&output);
    assert!(text.contains("12 entries"), "{text}");

    // The 12-entry sample is not the reference split.
    let output = laser()
        .args(["bench", "validate", "--expect-reference-split", "--set"])
        .arg(&set)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn bench_run_smoke_emits_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let set_path = dir.path().join("smoke.jsonl");
    std::fs::write(
        &set_path,
        concat!(
            r#"{"id": "m-smoke", "category": "material", "description": "a wooden sculpture of a cat turns into a golden sculpture of a cat", "stage_prompts": ["a wooden sculpture of a cat", "a golden sculpture of a cat"], "n_f": 3, "seed": 5}"#,
            "\n",
            r#"{"id": "n-smoke", "category": "non_rigid", "description": "a cat sitting on the ground starts jumping", "stage_prompts": ["a cat sitting on the ground", "a cat jumping on the ground"], "n_f": 3, "seed": 6}"#,
            "\n",
        ),
    )
    .unwrap();
    let out_dir = dir.path().join("bench-out");
    let output = laser()
        .args([
            "bench",
            "run",
            "--backbone",
            "tiny-test",
            "--llm",
            "mock",
            "--steps",
            "4",
            "--ablation",
            "w/o-ICA",
            "--format",
            "markdown",
        ])
        .arg("--set")
        .arg(&set_path)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let table = stdout(&output);
    assert!(table.contains("| PIC |") || table.contains("PIC"));
    assert!(table.contains("overall"));
    assert!(out_dir.join("results.json").exists());
    assert!(out_dir.join("aggregate.md").exists());
    assert!(out_dir.join("entries.md").exists());
    // w/o-ICA forces DAI on every transition.
    let results: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("results.json")).unwrap())
            .unwrap();
    for entry in results["entries"].as_array().unwrap() {
        for strategy in entry["strategies"].as_array().unwrap() {
            assert_eq!(strategy, "DAI");
        }
    }
}

#[test]
fn invert_writes_latent_and_trace_archives() {
    let dir = tempfile::tempdir().unwrap();
    let image_path = dir.path().join("input.png");
    laser::image_io::ImageBuf::filled(32, 32, [0.6, 0.4, 0.2])
        .save_png(&image_path)
        .unwrap();
    let out = dir.path().join("inv");
    let output = laser()
        .args([
            "invert",
            "--backbone",
            "tiny-test",
            "--steps",
            "5",
            "--prompt",
            "a plain color field",
            "--capture-all",
        ])
        .arg("--image")
        .arg(&image_path)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    assert!(out.join("z_t.laserlat").exists());
    assert!(out.join("trace.lasertrc").exists());
    let trace = laser::trace::ActivationTrace::read_archive(&out.join("trace.lasertrc")).unwrap();
    assert_eq!(trace.len(), 5 * 32, "5 steps x 32 sites");
}

#[test]
fn sd15_generate_names_the_missing_weights() {
    let output = laser()
        .args([
            "generate",
            "-d",
            "anything",
            "--backbone",
            "sd15-like",
            "--llm",
            "mock",
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("weights"), "stderr: {stderr}");
}
