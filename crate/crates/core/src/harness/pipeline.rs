//! End-to-end training orchestration: corpus, tokenizers, transformer,
//! classifier-free fine-tune; checkpoints and a reproducible run manifest.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::PipelineConfig;
use crate::harness::synth::{synth_generate, Sample, SynthSpec};
use crate::io;
use crate::rng::{derive, SeedRng};
use crate::sbt::{pack, CfMode, SbtModel, TokenSequence};
use crate::scene::encode_channels;
use crate::textbpe::{bpe_encode, bpe_train, BpeVocab};
use crate::vq::usage_fraction;
use crate::vqimg::{CropRole, FeatureExtractor, VqImgModel};
use crate::vqseg::VqSegModel;

/// Per-stage scalar metrics. Everything in `metrics` is bit-reproducible
/// from (config, seed) on one platform; wall-clock goes to `timings_secs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub name: String,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub checkpoints: BTreeMap<String, String>,
    pub stages: Vec<StageMetrics>,
    pub timings_secs: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn stage(&self, name: &str) -> Option<&StageMetrics> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn metric(&self, stage: &str, key: &str) -> Option<f64> {
        self.stage(stage).and_then(|s| s.metrics.get(key)).copied()
    }

    /// The deterministic portion compared by the reproducibility check.
    pub fn reproducible_view(&self) -> (&str, u64, &[StageMetrics]) {
        (&self.config_hash, self.seed, &self.stages)
    }
}

/// One JSON object per line: a run header, then one line per stage, then
/// checkpoints and timings.
pub fn write_manifest(path: impl AsRef<Path>, manifest: &RunManifest) -> Result<()> {
    let mut out = String::new();
    out.push_str(&serde_json::json!({"record": "run", "config_hash": manifest.config_hash, "seed": manifest.seed}).to_string());
    out.push('\n');
    for stage in &manifest.stages {
        out.push_str(
            &serde_json::json!({"record": "stage", "name": stage.name, "metrics": stage.metrics})
                .to_string(),
        );
        out.push('\n');
    }
    out.push_str(&serde_json::json!({"record": "checkpoints", "files": manifest.checkpoints}).to_string());
    out.push('\n');
    out.push_str(&serde_json::json!({"record": "timings", "secs": manifest.timings_secs}).to_string());
    out.push('\n');
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<RunManifest> {
    let text = std::fs::read_to_string(path)?;
    let mut manifest = RunManifest {
        config_hash: String::new(),
        seed: 0,
        checkpoints: BTreeMap::new(),
        stages: Vec::new(),
        timings_secs: BTreeMap::new(),
    };
    for line in text.lines().filter(|l| !l.is_empty()) {
        let v: serde_json::Value =
            serde_json::from_str(line).map_err(|e| Error::format(format!("manifest: {e}")))?;
        match v.get("record").and_then(|r| r.as_str()) {
            Some("run") => {
                manifest.config_hash = v["config_hash"].as_str().unwrap_or_default().to_string();
                manifest.seed = v["seed"].as_u64().unwrap_or_default();
            }
            Some("stage") => {
                let name = v["name"].as_str().unwrap_or_default().to_string();
                let metrics = serde_json::from_value(v["metrics"].clone())
                    .map_err(|e| Error::format(format!("manifest stage: {e}")))?;
                manifest.stages.push(StageMetrics { name, metrics });
            }
            Some("checkpoints") => {
                manifest.checkpoints = serde_json::from_value(v["files"].clone())
                    .map_err(|e| Error::format(format!("manifest checkpoints: {e}")))?;
            }
            Some("timings") => {
                manifest.timings_secs = serde_json::from_value(v["secs"].clone())
                    .map_err(|e| Error::format(format!("manifest timings: {e}")))?;
            }
            other => return Err(Error::format(format!("manifest: bad record {other:?}"))),
        }
    }
    Ok(manifest)
}

/// Everything a trained run leaves in memory.
pub struct PipelineArtifacts {
    pub config: PipelineConfig,
    pub spec: SynthSpec,
    pub vocab: BpeVocab,
    pub vqseg: VqSegModel,
    pub vqimg: VqImgModel,
    pub face_extractor: FeatureExtractor,
    pub object_extractor: FeatureExtractor,
    pub sbt: SbtModel,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub manifest: RunManifest,
}

fn split_corpus(samples: Vec<Sample>, seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let val_seed = derive(seed, 0x3a11);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, s) in samples.into_iter().enumerate() {
        if derive(val_seed, i as u64) % 10 == 0 {
            val.push(s);
        } else {
            train.push(s);
        }
    }
    (train, val)
}

fn cycle_batch<T: Clone>(items: &[T], step: usize, batch: usize) -> Vec<T> {
    (0..batch)
        .map(|j| items[(step * batch + j) % items.len()].clone())
        .collect()
}

fn mean_tail(values: &[f64], tail: usize) -> f64 {
    let n = values.len().min(tail).max(1);
    values[values.len() - n..].iter().sum::<f64>() / n as f64
}

/// Encodes the whole corpus into packed token sequences (parallel over
/// samples; models are frozen here).
pub fn tokenize_corpus(
    samples: &[Sample],
    vocab: &BpeVocab,
    vqseg: &VqSegModel,
    vqimg: &VqImgModel,
    cfg: &PipelineConfig,
) -> Result<Vec<TokenSequence>> {
    let lengths = cfg.lengths();
    let vocabs = cfg.sbt_config(vocab.size()).vocabs;
    samples
        .par_iter()
        .map(|s| {
            let text = bpe_encode(&s.caption, vocab, lengths.n_x);
            let channels = encode_channels(&s.scene, &vqseg.cfg.schema)?;
            let scene = vqseg.seg_encode(&channels)?;
            let image = vqimg.img_encode(&s.image)?;
            pack(&text, &scene.tokens, &image.tokens, lengths, vocabs)
        })
        .collect()
}

/// Fraction of codebook entries used at least once encoding `samples`.
pub fn codebook_usage(
    samples: &[Sample],
    vqseg: &VqSegModel,
    vqimg: &VqImgModel,
) -> Result<(f64, f64)> {
    let mut seg_tokens = Vec::new();
    let mut img_tokens = Vec::new();
    for s in samples {
        let channels = encode_channels(&s.scene, &vqseg.cfg.schema)?;
        seg_tokens.extend(vqseg.seg_encode(&channels)?.tokens);
        img_tokens.extend(vqimg.img_encode(&s.image)?.tokens);
    }
    Ok((
        usage_fraction(seg_tokens, vqseg.cfg.codebook_size),
        usage_fraction(img_tokens, vqimg.cfg.codebook_size),
    ))
}

/// Mean pixel L1 between images and their tokenizer round trips.
pub fn reconstruction_l1(samples: &[Sample], vqimg: &VqImgModel) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let grid = vqimg.img_encode(&s.image)?;
        let recon = vqimg.img_decode(&grid)?;
        total += recon.l1(&s.image)?.mean().item();
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Trains the full stack in stage order (scene tokenizer, image tokenizer,
/// text tokenizer, transformer, classifier-free fine-tune), optionally
/// writing checkpoints plus the manifest into `out_dir`. Aborting stages
/// name themselves in the error.
pub fn pipeline_train(cfg: &PipelineConfig, out_dir: Option<&Path>) -> Result<PipelineArtifacts> {
    let stage_err = |stage: &str, e: Error| {
        Error::invalid(format!("pipeline stage `{stage}` failed: {e}"))
    };
    let mut stages: Vec<StageMetrics> = Vec::new();
    let mut timings: BTreeMap<String, f64> = BTreeMap::new();
    let spec = cfg.synth_spec();

    // corpus
    let t0 = Instant::now();
    let samples = synth_generate(&spec, cfg.corpus_size, derive(cfg.seed, 0xc0a9))
        .map_err(|e| stage_err("corpus", e))?;
    let (train, val) = split_corpus(samples, cfg.seed);
    if train.is_empty() || val.is_empty() {
        return Err(stage_err("corpus", Error::invalid("split produced an empty side")));
    }
    stages.push(StageMetrics {
        name: "corpus".into(),
        metrics: BTreeMap::from([
            ("size".into(), cfg.corpus_size as f64),
            ("train".into(), train.len() as f64),
            ("val".into(), val.len() as f64),
        ]),
    });
    timings.insert("corpus".into(), t0.elapsed().as_secs_f64());

    // scene tokenizer
    let t0 = Instant::now();
    let mut vqseg = VqSegModel::new(cfg.vqseg.clone(), cfg.seed);
    let train_scenes: Vec<_> = train.iter().map(|s| s.scene.clone()).collect();
    let val_scenes: Vec<_> = val.iter().map(|s| s.scene.clone()).collect();
    let probe_n = train_scenes.len().min(300);
    vqseg
        .seed_codebook(&train_scenes[..probe_n], cfg.seed)
        .map_err(|e| stage_err("vqseg", e))?;
    let mut seg_losses = Vec::with_capacity(cfg.vqseg.steps);
    for step in 0..cfg.vqseg.steps {
        let batch = cycle_batch(&train_scenes, step, cfg.vqseg.batch);
        let report = vqseg.train_step(&batch).map_err(|e| stage_err("vqseg", e))?;
        seg_losses.push(report.total);
    }
    let seg_recall = vqseg.face_part_recall(&val_scenes).map_err(|e| stage_err("vqseg", e))?;
    stages.push(StageMetrics {
        name: "vqseg".into(),
        metrics: BTreeMap::from([
            ("loss_first".into(), seg_losses.first().copied().unwrap_or(0.0)),
            ("loss_final".into(), mean_tail(&seg_losses, 10)),
            ("face_recall_val".into(), seg_recall),
        ]),
    });
    timings.insert("vqseg".into(), t0.elapsed().as_secs_f64());

    // image tokenizer
    let t0 = Instant::now();
    let mut vqimg = VqImgModel::new(cfg.vqimg.clone(), cfg.seed);
    let face_extractor = FeatureExtractor::new(CropRole::Face, cfg.seed);
    let object_extractor = FeatureExtractor::new(CropRole::Object, cfg.seed);
    let train_pairs: Vec<_> = train.iter().map(|s| (s.image.clone(), s.scene.clone())).collect();
    let probe: Vec<_> = train.iter().take(300).map(|s| s.image.clone()).collect();
    vqimg.seed_codebook(&probe, cfg.seed).map_err(|e| stage_err("vqimg", e))?;
    let mut img_losses = Vec::with_capacity(cfg.vqimg.steps);
    let mut img_l1_series = Vec::with_capacity(cfg.vqimg.steps);
    for step in 0..cfg.vqimg.steps {
        let batch = cycle_batch(&train_pairs, step, cfg.vqimg.batch);
        let report = vqimg
            .train_step(&batch, &face_extractor, &object_extractor)
            .map_err(|e| stage_err("vqimg", e))?;
        img_losses.push(report.total);
        img_l1_series.push(report.l1);
    }
    let val_l1 = reconstruction_l1(&val, &vqimg).map_err(|e| stage_err("vqimg", e))?;
    let (seg_usage, img_usage) = codebook_usage(&val, &vqseg, &vqimg).map_err(|e| stage_err("vqimg", e))?;
    stages.push(StageMetrics {
        name: "vqimg".into(),
        metrics: BTreeMap::from([
            ("loss_first".into(), img_losses.first().copied().unwrap_or(0.0)),
            ("loss_final".into(), mean_tail(&img_losses, 10)),
            ("l1_final".into(), mean_tail(&img_l1_series, 10)),
            ("l1_val".into(), val_l1),
            ("seg_codebook_usage_val".into(), seg_usage),
            ("img_codebook_usage_val".into(), img_usage),
        ]),
    });
    timings.insert("vqimg".into(), t0.elapsed().as_secs_f64());

    // text tokenizer
    let t0 = Instant::now();
    let captions: Vec<String> = train.iter().map(|s| s.caption.clone()).collect();
    let vocab = bpe_train(&captions, cfg.bpe_vocab).map_err(|e| stage_err("bpe", e))?;
    stages.push(StageMetrics {
        name: "bpe".into(),
        metrics: BTreeMap::from([
            ("vocab_size".into(), vocab.size() as f64),
            ("merges".into(), vocab.merges().len() as f64),
        ]),
    });
    timings.insert("bpe".into(), t0.elapsed().as_secs_f64());

    // transformer
    let t0 = Instant::now();
    let sequences = tokenize_corpus(&train, &vocab, &vqseg, &vqimg, cfg)
        .map_err(|e| stage_err("tokenize", e))?;
    let mut sbt = SbtModel::new(cfg.sbt_config(vocab.size()), cfg.seed)
        .map_err(|e| stage_err("sbt", e))?;
    let mut rng = SeedRng::substream(cfg.seed, 0xcf17);
    let mut sbt_losses = Vec::with_capacity(cfg.sbt_train.steps + cfg.sbt_train.cf_steps);
    for step in 0..cfg.sbt_train.steps {
        let batch = cycle_batch(&sequences, step, cfg.sbt_train.batch);
        let report = sbt
            .train_step(&batch, &cfg.sbt_train, CfMode::Off, &mut rng)
            .map_err(|e| stage_err("sbt", e))?;
        sbt_losses.push(report.total);
    }
    timings.insert("sbt".into(), t0.elapsed().as_secs_f64());

    // classifier-free fine-tune
    let t0 = Instant::now();
    for step in 0..cfg.sbt_train.cf_steps {
        let batch = cycle_batch(&sequences, cfg.sbt_train.steps + step, cfg.sbt_train.batch);
        let report = sbt
            .train_step(&batch, &cfg.sbt_train, CfMode::On, &mut rng)
            .map_err(|e| stage_err("sbt-cf", e))?;
        sbt_losses.push(report.total);
    }
    let loss_at_100 = if sbt_losses.len() >= 100 {
        sbt_losses[90..100].iter().sum::<f64>() / 10.0
    } else {
        sbt_losses.first().copied().unwrap_or(0.0)
    };
    let loss_final = mean_tail(&sbt_losses, 10);
    stages.push(StageMetrics {
        name: "sbt".into(),
        metrics: BTreeMap::from([
            ("sequences".into(), sequences.len() as f64),
            ("loss_first".into(), sbt_losses.first().copied().unwrap_or(0.0)),
            ("loss_at_100".into(), loss_at_100),
            ("loss_final".into(), loss_final),
            ("loss_decrease_from_100".into(), 1.0 - loss_final / loss_at_100),
        ]),
    });
    timings.insert("sbt-cf".into(), t0.elapsed().as_secs_f64());

    let mut manifest = RunManifest {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        checkpoints: BTreeMap::new(),
        stages,
        timings_secs: timings,
    };

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.kv"), cfg.to_kv_text())?;
        io::write_checkpoint(dir.join("vqseg.ckpt"), &vqseg.params().dump_named())?;
        io::write_checkpoint(dir.join("vqimg.ckpt"), &vqimg.params().dump_named())?;
        let mut sbt_blobs = sbt.params().dump_named();
        sbt_blobs.push(("meta.step".into(), vec![1], vec![sbt.step_count() as f64]));
        io::write_checkpoint(dir.join("sbt.ckpt"), &sbt_blobs)?;
        std::fs::write(dir.join("bpe.vocab"), vocab.to_text())?;
        for (k, v) in [
            ("vqseg", "vqseg.ckpt"),
            ("vqimg", "vqimg.ckpt"),
            ("sbt", "sbt.ckpt"),
            ("bpe", "bpe.vocab"),
        ] {
            manifest.checkpoints.insert(k.into(), v.into());
        }
        write_manifest(dir.join("manifest.jsonl"), &manifest)?;
    }

    Ok(PipelineArtifacts {
        config: cfg.clone(),
        spec,
        vocab,
        vqseg,
        vqimg,
        face_extractor,
        object_extractor,
        sbt,
        train,
        val,
        manifest,
    })
}

/// Restores artifacts from a run directory: config + checkpoints; the
/// corpus is regenerated from the seeded spec.
pub fn load_artifacts(dir: &Path) -> Result<PipelineArtifacts> {
    let cfg = PipelineConfig::from_kv_text(&std::fs::read_to_string(dir.join("config.kv"))?)?;
    let spec = cfg.synth_spec();
    let samples = synth_generate(&spec, cfg.corpus_size, derive(cfg.seed, 0xc0a9))?;
    let (train, val) = split_corpus(samples, cfg.seed);

    let mut vqseg = VqSegModel::new(cfg.vqseg.clone(), cfg.seed);
    vqseg
        .params_mut()
        .load_named(&io::read_checkpoint(dir.join("vqseg.ckpt"))?)?;
    let mut vqimg = VqImgModel::new(cfg.vqimg.clone(), cfg.seed);
    vqimg
        .params_mut()
        .load_named(&io::read_checkpoint(dir.join("vqimg.ckpt"))?)?;
    let vocab = BpeVocab::from_text(&std::fs::read_to_string(dir.join("bpe.vocab"))?)?;
    let sbt_blobs = io::read_checkpoint(dir.join("sbt.ckpt"))?;
    let mut sbt = SbtModel::new(cfg.sbt_config(vocab.size()), cfg.seed)?;
    let step = sbt_blobs
        .iter()
        .find(|(n, _, _)| n == "meta.step")
        .map(|(_, _, v)| v[0] as usize)
        .unwrap_or(0);
    let model_blobs: Vec<_> = sbt_blobs
        .into_iter()
        .filter(|(n, _, _)| n != "meta.step")
        .collect();
    sbt.params_mut().load_named(&model_blobs)?;
    sbt.set_step_count(step);

    // module-level training may not have produced a manifest yet
    let manifest_path = dir.join("manifest.jsonl");
    let manifest = if manifest_path.exists() {
        read_manifest(manifest_path)?
    } else {
        RunManifest {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            checkpoints: BTreeMap::new(),
            stages: Vec::new(),
            timings_secs: BTreeMap::new(),
        }
    };
    Ok(PipelineArtifacts {
        face_extractor: FeatureExtractor::new(CropRole::Face, cfg.seed),
        object_extractor: FeatureExtractor::new(CropRole::Object, cfg.seed),
        config: cfg,
        spec,
        vocab,
        vqseg,
        vqimg,
        sbt,
        train,
        val,
        manifest,
    })
}
