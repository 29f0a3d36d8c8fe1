//! Acceptance suite: one test per release criterion, each printing a
//! pass/fail line. Everything runs on the self-contained tiny backbone and
//! the mock LLM backend; the full-scale harness is opt-in via `--ignored`.

use std::collections::BTreeSet;
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};

use laser::backbone::{Backbone, HookSite, SiteSlot, TinyBackbone};
use laser::benchmark::{
    emit_table, load_benchmark_str, run_benchmark, validate_reference_split, AblationMode,
    Component, TableFormat,
};
use laser::config::RunConfig;
use laser::controller::{AnimationRequest, MockBackend, Planner};
use laser::ddim::{DdimEngine, GuidanceConfig, SampleParams};
use laser::generator::{generate_animation, generate_stage, interpolate_embeddings, StageInput};
use laser::image_io::ImageBuf;
use laser::injection::{blend_key, blend_value, decremental_blend, FrameHooks, Strategy};
use laser::metrics::{
    compute_clip_scores, compute_lpips_max_endpoint, compute_lpips_total, compute_pic,
    compute_ppl,
};

fn tiny_engine() -> DdimEngine {
    DdimEngine::new(Arc::new(TinyBackbone::new()))
}

fn tiny_config(steps: usize, n_f: usize) -> RunConfig {
    let mut c = RunConfig::default();
    c.backbone = "tiny-test".into();
    c.steps = steps;
    c.n_f = n_f;
    c
}

fn test_image() -> ImageBuf {
    let mut img = ImageBuf::filled(32, 32, [0.0; 3]);
    for y in 0..32 {
        for x in 0..32 {
            img.values[[0, y, x]] = x as f32 / 31.0;
            img.values[[1, y, x]] = 0.25 + 0.5 * (y as f32 / 31.0);
            img.values[[2, y, x]] = 0.5 + 0.3 * ((x as f32 / 7.0).sin());
        }
    }
    img
}

fn arr(values: &[f32]) -> ArrayD<f32> {
    ArrayD::from_shape_vec(IxDyn(&[values.len()]), values.to_vec()).unwrap()
}

#[test]
fn criterion_01_interpolation_identities() {
    // Text-embedding interpolation endpoints are exact.
    let backbone = TinyBackbone::new();
    let e0 = backbone.encode_prompt("a wooden sculpture of a cat").unwrap();
    let e1 = backbone.encode_prompt("a golden sculpture of a cat").unwrap();
    let at0 = interpolate_embeddings(&e0, &e1, 0.0, false, 0.8).unwrap();
    assert_eq!(at0.values, e0.values, "alpha=0 must return e_i exactly");
    let at1 = interpolate_embeddings(&e0, &e1, 1.0, false, 0.8).unwrap();
    assert_eq!(at1.values, e1.values, "alpha=1 must return e_next exactly");

    // Endpoint blends pass through at gamma=1 and are endpoint-exact at
    // gamma=0, for both the value and key variants.
    let first = arr(&[1.0, -2.0, 0.5]);
    let last = arr(&[0.0, 3.0, -1.5]);
    let current = arr(&[7.0, 7.0, 7.0]);
    for alpha in [0.0f32, 0.25, 0.5, 1.0] {
        assert_eq!(
            blend_value(&first, &last, &current, alpha, 1.0).unwrap(),
            current,
            "gamma=1 must be a pass-through"
        );
        assert_eq!(
            blend_key(&first, &last, &current, alpha, 1.0).unwrap(),
            current
        );
    }
    assert_eq!(blend_value(&first, &last, &current, 0.0, 0.0).unwrap(), first);
    assert_eq!(blend_value(&first, &last, &current, 1.0, 0.0).unwrap(), last);
    assert_eq!(blend_key(&first, &last, &current, 0.0, 0.0).unwrap(), first);
    assert_eq!(blend_key(&first, &last, &current, 1.0, 0.0).unwrap(), last);

    // Decremental blend returns the pure source at beta=0.
    assert_eq!(decremental_blend(&first, &current, 0.0).unwrap(), first);

    // General-position arithmetic agrees with the hand-evaluated oracle to
    // 1e-6.
    let oracle = blend_value(
        &arr(&[1.0, 0.0]),
        &arr(&[0.0, 1.0]),
        &arr(&[2.0, 2.0]),
        0.5,
        0.5,
    )
    .unwrap();
    for v in oracle.iter() {
        assert!((v - 1.25).abs() < 1e-6, "oracle value {v} != 1.25");
    }
    println!("criterion 01 (interpolation identities): PASS");
}

#[test]
fn criterion_02_ddim_round_trip() {
    let engine = tiny_engine();
    let backbone = engine.backbone().clone();
    let grid = engine.grid(50).unwrap();
    let mut worst = 0.0f64;
    for prompt in ["a meadow at dusk", "a golden sculpture of a cat"] {
        let emb = backbone.encode_prompt(prompt).unwrap();
        let z0 = backbone.encode_image(&test_image()).unwrap();
        let (z_t, _) = engine
            .invert(&z0, &emb, &grid, &BTreeSet::new(), "acceptance")
            .unwrap();
        let outcome = engine
            .sample(
                &z_t,
                &emb,
                &FrameHooks::none(),
                SampleParams {
                    guidance: &GuidanceConfig::off(),
                    grid: &grid,
                    capture: None,
                    record_fired: false,
                },
            )
            .unwrap();
        let err = outcome.latents[0].relative_error(&z0).unwrap();
        assert!(
            err <= 1e-2,
            "round-trip relative error {err} above 1e-2 for '{prompt}'"
        );
        worst = worst.max(err);
    }
    println!("criterion 02 (ddim round-trip <= 1e-2, worst {worst:.2e}): PASS");
}

#[test]
fn criterion_03_endpoint_reconstruction() {
    let engine = tiny_engine();
    let backbone = engine.backbone().clone();
    let image = test_image();
    let config = tiny_config(50, 2);
    let stage = generate_stage(
        &engine,
        &StageInput {
            stage_index: 0,
            prior_image: &image,
            source_prompt: "a wooden sculpture of a cat",
            target_prompt: "a golden sculpture of a cat",
            strategy: Strategy::Fai,
        },
        &config,
        false,
    )
    .unwrap();

    // Reference: plain DDIM reconstruction of the input image.
    let emb = backbone.encode_prompt("a wooden sculpture of a cat").unwrap();
    let z0 = backbone.encode_image(&image).unwrap();
    let grid = engine.grid(50).unwrap();
    let (z_t, _) = engine
        .invert(&z0, &emb, &grid, &BTreeSet::new(), "recon")
        .unwrap();
    let recon = engine
        .sample(
            &z_t,
            &emb,
            &FrameHooks::none(),
            SampleParams {
                guidance: &GuidanceConfig::off(),
                grid: &grid,
                capture: None,
                record_fired: false,
            },
        )
        .unwrap();

    let latent_err = stage.latents[0].relative_error(&recon.latents[0]).unwrap();
    assert!(
        latent_err <= 1e-2,
        "FAI alpha=0 frame deviates from the DDIM reconstruction: {latent_err}"
    );
    let recon_image = backbone.decode_latent(&recon.latents[0]).unwrap();
    let mse = stage.images[0].mse(&recon_image).unwrap();
    assert!(mse <= 1e-4, "pixel MSE {mse} above 1e-4");
    println!(
        "criterion 03 (FAI alpha=0 reconstruction, latent err {latent_err:.2e}, mse {mse:.2e}): PASS"
    );
}

#[test]
fn criterion_04_schedule_confinement() {
    let engine = tiny_engine();
    let image = test_image();

    // FAI at the reference settings: steps 1-25 of 50, q/k/v on all decoder
    // layers plus the feature site on layer 4; endpoints skip the v blend.
    let config = tiny_config(50, 3);
    let stage = generate_stage(
        &engine,
        &StageInput {
            stage_index: 0,
            prior_image: &image,
            source_prompt: "a wooden sculpture of a cat",
            target_prompt: "a golden sculpture of a cat",
            strategy: Strategy::Fai,
        },
        &config,
        true,
    )
    .unwrap();
    let mut fai_interior_expected: BTreeSet<(usize, HookSite)> = BTreeSet::new();
    let mut fai_endpoint_expected: BTreeSet<(usize, HookSite)> = BTreeSet::new();
    for step in 1..=25usize {
        fai_interior_expected.insert((step, HookSite::feature(4)));
        fai_endpoint_expected.insert((step, HookSite::feature(4)));
        for layer in 1..=8usize {
            for slot in [SiteSlot::Q, SiteSlot::K] {
                fai_interior_expected.insert((step, HookSite::attention(layer, slot)));
                fai_endpoint_expected.insert((step, HookSite::attention(layer, slot)));
            }
            fai_interior_expected.insert((step, HookSite::attention(layer, SiteSlot::V)));
        }
    }
    assert_eq!(
        stage.fired[1], fai_interior_expected,
        "FAI interior frame fired set mismatch"
    );
    assert_eq!(stage.fired[0], fai_endpoint_expected);
    assert_eq!(stage.fired[2], fai_endpoint_expected);

    // KVAI/DAI at the reference settings: steps 6-50, layers 3-8, k and v
    // only, queries untouched.
    let mut kv_expected: BTreeSet<(usize, HookSite)> = BTreeSet::new();
    for step in 6..=50usize {
        for layer in 3..=8usize {
            kv_expected.insert((step, HookSite::attention(layer, SiteSlot::K)));
            kv_expected.insert((step, HookSite::attention(layer, SiteSlot::V)));
        }
    }
    for strategy in [Strategy::Kvai, Strategy::Dai] {
        let stage = generate_stage(
            &engine,
            &StageInput {
                stage_index: 0,
                prior_image: &image,
                source_prompt: "a cat sitting on the ground",
                target_prompt: "a cat jumping on the ground",
                strategy,
            },
            &config,
            true,
        )
        .unwrap();
        for (frame, fired) in stage.fired.iter().enumerate() {
            assert_eq!(
                *fired, kv_expected,
                "{strategy} frame {frame} fired outside steps 6-50 x layers 3-8"
            );
        }
    }
    println!("criterion 04 (schedule confinement at the reference settings): PASS");
}

#[test]
fn criterion_05_cross_frame_attention() {
    use laser::attention::{attention, attention_weights, cross_frame_attention};
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    let mut rng = ChaCha20Rng::seed_from_u64(505);
    let mut random = |n: usize, d: usize| -> Array2<f32> {
        Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0f32..1.0))
    };
    let (q, k, v) = (random(16, 8), random(16, 8), random(16, 8));

    // Single-frame batch is an exact identity with plain attention.
    let solo = attention(&q, &k, &v).unwrap();
    let batched = cross_frame_attention(
        std::slice::from_ref(&q),
        std::slice::from_ref(&k),
        std::slice::from_ref(&v),
    )
    .unwrap();
    assert_eq!(batched[0], solo, "single-frame batch must be bit-identical");

    // Identical frames reproduce per-frame attention to 1e-6.
    let frames = 12;
    let batched = cross_frame_attention(
        &vec![q.clone(); frames],
        &vec![k.clone(); frames],
        &vec![v.clone(); frames],
    )
    .unwrap();
    for out in &batched {
        for (a, b) in out.iter().zip(solo.iter()) {
            assert!((a - b).abs() < 1e-6, "identical-frames deviation {}", a - b);
        }
    }

    // Attention rows stay stochastic over the concatenated axis.
    let all_k = ndarray::concatenate(
        ndarray::Axis(0),
        &vec![k.view(); frames],
    )
    .unwrap();
    let weights = attention_weights(&q, &all_k).unwrap();
    for row in weights.rows() {
        let sum: f64 = row.sum();
        assert!((sum - 1.0).abs() < 1e-6, "row sum {sum}");
    }
    println!("criterion 05 (cross-frame attention identities): PASS");
}

#[test]
fn criterion_06_controller_conformance() {
    let backend = MockBackend;
    let planner = Planner::new(&backend);

    for n_t in 1..=4usize {
        let plan = planner
            .plan(&AnimationRequest {
                description: "an unobserved description of change".into(),
                input_image: Some(ImageBuf::filled(32, 32, [0.5; 3])),
                n_t: Some(n_t),
                n_f: 4,
                seed: 0,
            })
            .unwrap();
        assert_eq!(plan.prompts.len(), n_t + 1, "|prompts| must be n_t+1");
        assert_eq!(plan.transitions.len(), n_t);
    }

    let (s, _) = planner
        .ica_classify("a wooden sculpture of a cat", "a golden sculpture of a cat")
        .unwrap();
    assert_eq!(s, Strategy::Fai, "material change must classify as FAI");
    let (s, _) = planner.ica_classify("a cat sitting", "a cat jumping").unwrap();
    assert_eq!(s, Strategy::Kvai, "pose change must classify as KVAI");
    let (s, _) = planner
        .ica_classify("a cat sitting", "a golden dog jumping")
        .unwrap();
    assert_eq!(s, Strategy::Dai, "combined change must classify as DAI");

    // w/o-ICA forces DAI on every transition.
    let plan = planner
        .plan(&AnimationRequest {
            description: "A year has passed on the spring meadow".into(),
            input_image: Some(ImageBuf::filled(32, 32, [0.5; 3])),
            n_t: Some(3),
            n_f: 4,
            seed: 0,
        })
        .unwrap();
    let ablated = AblationMode::without(Component::Ica).apply_to_plan(&plan);
    assert!(
        ablated.transitions.iter().all(|t| t.strategy == Strategy::Dai),
        "w/o-ICA must force DAI everywhere"
    );
    println!("criterion 06 (controller conformance): PASS");
}

#[test]
fn criterion_07_metric_self_consistency() {
    let img = test_image();
    let frames = vec![img.clone(); 12];
    assert_eq!(compute_pic(&frames, &img).unwrap(), 1.0);
    assert_eq!(compute_lpips_total(&frames).unwrap(), 0.0);
    assert_eq!(compute_lpips_max_endpoint(&frames).unwrap(), 0.0);
    assert_eq!(compute_ppl(&frames).unwrap(), 0.0);
    let prompts = vec!["a".to_string(), "b".to_string()];
    let alphas: Vec<(usize, f32)> = (0..12).map(|k| (0, k as f32 / 11.0)).collect();
    let (_, clip_frame) = compute_clip_scores(&frames, &prompts, &alphas).unwrap();
    assert!(
        (clip_frame - 1.0).abs() < 1e-6,
        "identical frames clip_frame {clip_frame}"
    );

    // ppl = lpips_total * (n - 1) for every n.
    for n in [2usize, 3, 5, 12] {
        let varied: Vec<ImageBuf> = (0..n)
            .map(|k| {
                let mut f = img.clone();
                f.values.mapv_inplace(|v| (v + k as f32 * 0.03).min(1.0));
                f
            })
            .collect();
        let total = compute_lpips_total(&varied).unwrap();
        let ppl = compute_ppl(&varied).unwrap();
        assert_eq!(ppl, total * (n - 1) as f64, "ppl relation broken at n={n}");
    }

    // The relation reproduces the reported 12-frame triples to +-0.01.
    for (lpips_total, ppl) in [(0.489f64, 5.380f64), (1.353, 14.879), (0.974, 10.718)] {
        let derived = lpips_total * 11.0;
        assert!(
            (derived - ppl).abs() <= 0.01,
            "triple ({lpips_total}, {ppl}): derived {derived}"
        );
    }
    println!("criterion 07 (metric self-consistency): PASS");
}

#[test]
fn criterion_08_end_to_end_determinism() {
    let backend = MockBackend;
    let request = AnimationRequest {
        description: "A year has passed on the spring meadow".into(),
        input_image: Some(test_image()),
        n_t: Some(2),
        n_f: 3,
        seed: 77,
    };
    let config = tiny_config(10, 3);

    let mut dirs = Vec::new();
    for _ in 0..2 {
        let planner = Planner::new(&backend);
        let plan = planner.plan(&request).unwrap();
        let engine = tiny_engine();
        let dir = tempfile::tempdir().unwrap();
        generate_animation(
            &engine,
            &request,
            &plan,
            &config,
            &planner.transcripts(),
            Some(dir.path()),
        )
        .unwrap();
        dirs.push(dir);
    }

    let manifest_a = std::fs::read(dirs[0].path().join("manifest.json")).unwrap();
    let manifest_b = std::fs::read(dirs[1].path().join("manifest.json")).unwrap();
    assert_eq!(manifest_a, manifest_b, "manifests must be bit-identical");

    let frames_a = dirs[0].path().join("frames");
    let mut names: Vec<_> = std::fs::read_dir(&frames_a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 5, "n_t=2, n_f=3 emits 5 deduped frames");
    for name in names {
        let a = std::fs::read(frames_a.join(&name)).unwrap();
        let b = std::fs::read(dirs[1].path().join("frames").join(&name)).unwrap();
        assert_eq!(a, b, "frame {name:?} differs between runs");
    }
    let gif_a = std::fs::read(dirs[0].path().join("animation.gif")).unwrap();
    let gif_b = std::fs::read(dirs[1].path().join("animation.gif")).unwrap();
    assert_eq!(gif_a, gif_b);
    println!("criterion 08 (bit-identical reruns): PASS");
}

#[test]
fn criterion_09_benchmark_plumbing() {
    // Reference-split validation accepts {70, 70, 60} and rejects others.
    let mut lines = Vec::new();
    for (prefix, category, count) in [
        ("m", "material", 70),
        ("n", "non_rigid", 70),
        ("h", "hybrid", 60),
    ] {
        for i in 0..count {
            lines.push(format!(
                r#"{{"id": "{prefix}{i}", "category": "{category}", "description": "d"}}"#
            ));
        }
    }
    let reference = load_benchmark_str(&lines.join("\n")).unwrap();
    validate_reference_split(&reference).unwrap();
    let short = load_benchmark_str(&lines[..199].join("\n")).unwrap();
    assert!(
        validate_reference_split(&short).is_err(),
        "a 199-entry split must be rejected"
    );

    // The smoke set completes and emits every metric column.
    let smoke = r#"
{"id": "m-smoke", "category": "material", "description": "a wooden sculpture of a cat turns into a golden sculpture of a cat", "stage_prompts": ["a wooden sculpture of a cat", "a golden sculpture of a cat"], "n_f": 4, "seed": 5}
{"id": "n-smoke", "category": "non_rigid", "description": "a cat sitting on the ground starts jumping", "stage_prompts": ["a cat sitting on the ground", "a cat jumping on the ground"], "n_f": 4, "seed": 6}
{"id": "h-smoke", "category": "hybrid", "description": "a sitting cat becomes a golden dog jumping", "stage_prompts": ["a cat sitting on the ground", "a golden dog jumping on the ground"], "n_f": 4, "seed": 7}
"#;
    let set = load_benchmark_str(smoke).unwrap();
    let engine = tiny_engine();
    let backend = MockBackend;
    let config = tiny_config(5, 4);
    let results = run_benchmark(
        &engine,
        &backend,
        &set,
        &config,
        &AblationMode::none(),
        None,
    )
    .unwrap();
    for entry in &results.entries {
        let m = entry
            .metrics
            .as_ref()
            .unwrap_or_else(|| panic!("entry {} failed: {:?}", entry.id, entry.error));
        for (name, value) in [
            ("pic", m.pic),
            ("lpips_total", m.lpips_total),
            ("lpips_max_endpoint", m.lpips_max_endpoint),
            ("clip_frame", m.clip_frame),
            ("clip_text", m.clip_text),
            ("ppl", m.ppl),
        ] {
            assert!(value.is_finite(), "{name} not finite for {}", entry.id);
        }
    }
    let table = emit_table(&results.aggregate_rows(), TableFormat::Markdown).unwrap();
    for column in [
        "PIC",
        "LPIPS_T",
        "LPIPS_M",
        "CLIP Score",
        "CLIP Score (text)",
        "PPL",
        "Runtime",
    ] {
        assert!(table.contains(column), "table missing column {column}");
    }
    assert!(table.contains("overall"));
    println!("criterion 09 (benchmark plumbing): PASS");
}

/// Full-scale harness, not CI-gated: needs an SD-v1.5-class backbone with
/// external weights on a GPU, which this crate does not bundle. Run with
/// `cargo test --test acceptance -- --ignored` to see the desk-scale
/// relative-ordering report on the tiny backbone instead.
#[test]
#[ignore = "full-scale harness requires external SD-v1.5-class weights and a GPU"]
fn criterion_10_full_scale_harness_report() {
    if std::env::var_os("LASER_WEIGHTS").is_none() {
        println!(
            "criterion 10 (full-scale harness): SKIPPED - no sd15-like runtime is bundled; \
             set LASER_WEIGHTS and integrate a real backbone to run at full scale"
        );
    }

    // Desk-scale report: injection on vs. the strategy-None baseline on the
    // smoke set. Reported, not asserted; the tiny backbone's frozen random
    // weights carry no perceptual prior.
    let smoke = r#"
{"id": "m-smoke", "category": "material", "description": "x", "stage_prompts": ["a wooden sculpture of a cat", "a golden sculpture of a cat"], "n_f": 6, "seed": 5}
{"id": "n-smoke", "category": "non_rigid", "description": "x", "stage_prompts": ["a cat sitting on the ground", "a cat jumping on the ground"], "n_f": 6, "seed": 6}
{"id": "h-smoke", "category": "hybrid", "description": "x", "stage_prompts": ["a cat sitting on the ground", "a golden dog jumping on the ground"], "n_f": 6, "seed": 7}
"#;
    let set = load_benchmark_str(smoke).unwrap();
    let engine = tiny_engine();
    let backend = MockBackend;
    let config = tiny_config(20, 6);
    let on = run_benchmark(&engine, &backend, &set, &config, &AblationMode::none(), None).unwrap();
    let off: AblationMode = "w/o-FAI,w/o-KVAI,w/o-DAI".parse().unwrap();
    let off = run_benchmark(&engine, &backend, &set, &config, &off, None).unwrap();
    let row_on = &on.aggregate_rows()[3];
    let row_off = &off.aggregate_rows()[3];
    println!(
        "criterion 10 report (tiny backbone): injection on: pic={:.4} lpips_t={:.4} ppl={:.4}",
        row_on.pic, row_on.lpips_t, row_on.ppl
    );
    println!(
        "criterion 10 report (tiny backbone): baseline:     pic={:.4} lpips_t={:.4} ppl={:.4}",
        row_off.pic, row_off.lpips_t, row_off.ppl
    );
}
