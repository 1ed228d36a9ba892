//! End-to-end pipeline integration on a micro configuration: every stage
//! runs, checkpoints round-trip, and the manifest reproduces bit-exactly.

use mas_core::harness::{
    eval_suite, load_artifacts, pipeline_train, read_manifest, EvalOptions, PipelineConfig,
};
use mas_core::sampler::{generate, Models, SampleConfig, SampleMode};

fn micro_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::desk();
    cfg.corpus_size = 120;
    cfg.seed = 21;
    cfg.vqseg.steps = 30;
    cfg.vqseg.batch = 4;
    cfg.vqimg.steps = 30;
    cfg.vqimg.batch = 4;
    cfg.sbt_train.steps = 24;
    cfg.sbt_train.cf_steps = 6;
    cfg.sbt_train.batch = 3;
    cfg.sbt_train.lr_switch_step = 7;
    cfg.eval_generations = 6;
    cfg.eval_edit_trials = 4;
    cfg
}

#[test]
fn micro_pipeline_trains_saves_and_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_config();
    let t0 = std::time::Instant::now();
    let art = pipeline_train(&cfg, Some(dir.path())).unwrap();
    println!("micro pipeline: {:.1}s, timings {:?}", t0.elapsed().as_secs_f64(), art.manifest.timings_secs);

    // stages all present
    for stage in ["corpus", "vqseg", "vqimg", "bpe", "sbt"] {
        assert!(art.manifest.stage(stage).is_some(), "missing stage {stage}");
    }
    assert!(art.manifest.metric("sbt", "loss_final").unwrap() > 0.0);

    // manifest file round-trips
    let manifest = read_manifest(dir.path().join("manifest.jsonl")).unwrap();
    assert_eq!(manifest, art.manifest);

    // checkpoints restore to identical weights
    let loaded = load_artifacts(dir.path()).unwrap();
    assert_eq!(
        art.sbt.params().dump_named(),
        loaded.sbt.params().dump_named()
    );
    assert_eq!(
        art.vqseg.params().dump_named(),
        loaded.vqseg.params().dump_named()
    );
    assert_eq!(art.vocab, loaded.vocab);

    // generation runs on the restored artifacts in both modes
    let models = Models {
        vocab: &loaded.vocab,
        vqseg: &loaded.vqseg,
        vqimg: &loaded.vqimg,
        sbt: &loaded.sbt,
    };
    let free = generate(
        "red circle left",
        None,
        &models,
        &SampleConfig {
            alpha_c: 3.0,
            seed: 5,
            mode: SampleMode::FreeScene,
            top_fraction: 0.5,
        },
    )
    .unwrap();
    assert_eq!(free.image_tokens.len(), 64);
    let val = &loaded.val[0];
    let fixed = generate(
        &val.caption,
        Some(&val.scene),
        &models,
        &SampleConfig {
            alpha_c: 3.0,
            seed: 5,
            mode: SampleMode::FixedScene,
            top_fraction: 0.5,
        },
    )
    .unwrap();
    assert_eq!(fixed.scene_tokens.len(), 64);

    // eval battery runs end to end
    let report = eval_suite(&art, &EvalOptions::from_config(&cfg)).unwrap();
    assert_eq!(report.fixed_scene_fidelity, 1.0);
    assert!(report.alignment.len() == 4);
    println!("{}", report.render_table());
}

#[test]
fn manifest_reproduces_bit_exactly() {
    let mut cfg = micro_config();
    cfg.corpus_size = 80;
    cfg.vqseg.steps = 12;
    cfg.vqimg.steps = 12;
    cfg.sbt_train.steps = 10;
    cfg.sbt_train.cf_steps = 4;
    let a = pipeline_train(&cfg, None).unwrap();
    let b = pipeline_train(&cfg, None).unwrap();
    assert_eq!(a.manifest.reproducible_view(), b.manifest.reproducible_view());
}
