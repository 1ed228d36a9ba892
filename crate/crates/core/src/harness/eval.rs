//! Post-training evaluation: oracle alignment across guidance scales,
//! fixed-scene fidelity, reconstruction quality, face metrics, codebook
//! usage, and edit sensitivity.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::harness::pipeline::{codebook_usage, reconstruction_l1, PipelineArtifacts, StageMetrics};
use crate::harness::synth::{oracle_check, SynthSpec};
use crate::rng::{derive, SeedRng};
use crate::sampler::{generate, Models, SampleConfig, SampleMode};
use crate::scene::{edit_scene, encode_channels, SceneEdit, SceneGroup};
use crate::vqimg::locate_faces;

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub alpha_grid: Vec<f64>,
    pub generations: usize,
    pub fixed_scene_checks: usize,
    pub edit_trials: usize,
    pub seed: u64,
}

impl EvalOptions {
    pub fn from_config(cfg: &crate::harness::config::PipelineConfig) -> EvalOptions {
        EvalOptions {
            alpha_grid: vec![0.0, 1.0, 3.0, 5.0],
            generations: cfg.eval_generations,
            fixed_scene_checks: 20,
            edit_trials: cfg.eval_edit_trials,
            seed: derive(cfg.seed, 0xe7a1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// (alpha_c, oracle alignment accuracy over `generations` samples)
    pub alignment: Vec<(f64, f64)>,
    pub fixed_scene_fidelity: f64,
    pub img_l1_val: f64,
    pub face_recall_val: f64,
    pub face_crop_l1_val: f64,
    pub seg_codebook_usage: f64,
    pub img_codebook_usage: f64,
    pub edit_sensitivity: f64,
}

impl EvalReport {
    pub fn to_stage(&self) -> StageMetrics {
        let mut metrics = BTreeMap::new();
        for (alpha, acc) in &self.alignment {
            metrics.insert(format!("alignment@alpha={alpha}"), *acc);
        }
        metrics.insert("fixed_scene_fidelity".into(), self.fixed_scene_fidelity);
        metrics.insert("img_l1_val".into(), self.img_l1_val);
        metrics.insert("face_recall_val".into(), self.face_recall_val);
        metrics.insert("face_crop_l1_val".into(), self.face_crop_l1_val);
        metrics.insert("seg_codebook_usage".into(), self.seg_codebook_usage);
        metrics.insert("img_codebook_usage".into(), self.img_codebook_usage);
        metrics.insert("edit_sensitivity".into(), self.edit_sensitivity);
        StageMetrics {
            name: "eval".into(),
            metrics,
        }
    }

    /// One aligned line per metric, for terminal output.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        for (alpha, acc) in &self.alignment {
            out.push_str(&format!("alignment  alpha_c={alpha:<4}  {acc:.4}\n"));
        }
        out.push_str(&format!("fixed-scene fidelity      {:.4}\n", self.fixed_scene_fidelity));
        out.push_str(&format!("image recon L1 (val)      {:.4}\n", self.img_l1_val));
        out.push_str(&format!("face-part recall (val)    {:.4}\n", self.face_recall_val));
        out.push_str(&format!("face-crop L1 (val)        {:.4}\n", self.face_crop_l1_val));
        out.push_str(&format!("scene codebook usage      {:.4}\n", self.seg_codebook_usage));
        out.push_str(&format!("image codebook usage      {:.4}\n", self.img_codebook_usage));
        out.push_str(&format!("edit sensitivity          {:.4}\n", self.edit_sensitivity));
        out
    }
}

fn models_of(art: &PipelineArtifacts) -> Models<'_> {
    Models {
        vocab: &art.vocab,
        vqseg: &art.vqseg,
        vqimg: &art.vqimg,
        sbt: &art.sbt,
    }
}

/// Deterministic caption sampler over the full inventory.
fn caption_at(spec: &SynthSpec, rng: &mut SeedRng) -> String {
    let c = rng.below(spec.colors.len());
    let s = rng.below(spec.shapes.len());
    let p = rng.below(spec.positions.len());
    spec.caption(c, s, p)
}

/// Oracle alignment accuracy of free-scene generations at one guidance
/// scale; the caption/seed schedule depends only on (seed, i), so sweeps
/// across alpha reuse the same prompt set.
pub fn alignment_accuracy(
    art: &PipelineArtifacts,
    alpha_c: f64,
    generations: usize,
    seed: u64,
) -> Result<f64> {
    if generations == 0 {
        return Err(Error::invalid("alignment: zero generations"));
    }
    let models = models_of(art);
    let mut hits = 0usize;
    for i in 0..generations {
        let mut prompt_rng = SeedRng::new(derive(seed, i as u64));
        let caption = caption_at(&art.spec, &mut prompt_rng);
        let out = generate(
            &caption,
            None,
            &models,
            &SampleConfig {
                alpha_c,
                seed: derive(seed, 0x9e + i as u64),
                mode: SampleMode::FreeScene,
                top_fraction: art.config.top_fraction,
            },
        )?;
        if oracle_check(&out.decoded_image, &caption, &art.spec)?.aligned {
            hits += 1;
        }
    }
    Ok(hits as f64 / generations as f64)
}

/// Fraction of forced scene tokens reproduced exactly in fixed-scene mode
/// (1.0 by the forcing contract; measured, not assumed).
pub fn fixed_scene_fidelity(art: &PipelineArtifacts, checks: usize, seed: u64) -> Result<f64> {
    let models = models_of(art);
    let mut equal = 0usize;
    let mut total = 0usize;
    for i in 0..checks.min(art.val.len()) {
        let sample = &art.val[i];
        let out = generate(
            &sample.caption,
            Some(&sample.scene),
            &models,
            &SampleConfig {
                alpha_c: art.config.alpha_c,
                seed: derive(seed, 0xf1 + i as u64),
                mode: SampleMode::FixedScene,
                top_fraction: art.config.top_fraction,
            },
        )?;
        let channels = encode_channels(&sample.scene, &art.vqseg.cfg.schema)?;
        let expected = art.vqseg.seg_encode(&channels)?;
        total += expected.len();
        equal += expected
            .tokens
            .iter()
            .zip(&out.scene_tokens.tokens)
            .filter(|(a, b)| a == b)
            .count();
    }
    Ok(if total == 0 { 1.0 } else { equal as f64 / total as f64 })
}

/// Mean pixel L1 restricted to face crops after an image round trip.
pub fn face_crop_l1(art: &PipelineArtifacts) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in &art.val {
        let crops = locate_faces(&s.scene, art.vqimg.cfg.k_f);
        if crops.is_empty() {
            continue;
        }
        let grid = art.vqimg.img_encode(&s.image)?;
        let recon = art.vqimg.img_decode(&grid)?;
        for crop in crops {
            let a = s.image.slice(1, crop.y, crop.h)?.slice(2, crop.x, crop.w)?;
            let b = recon.slice(1, crop.y, crop.h)?.slice(2, crop.x, crop.w)?;
            total += a.l1(&b)?.mean().item();
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Replaces the sample's shape class with a different one and checks that
/// fixed-scene regeneration (same seed, same caption) changes the image
/// token stream. Returns the fraction of trials that changed.
pub fn edit_sensitivity(art: &PipelineArtifacts, trials: usize, seed: u64) -> Result<f64> {
    if trials == 0 {
        return Err(Error::invalid("edit_sensitivity: zero trials"));
    }
    let models = models_of(art);
    let shape_classes: Vec<u16> = art.spec.shapes.iter().map(|s| s.panoptic_class).collect();
    let mut changed = 0usize;
    for i in 0..trials {
        let sample = &art.val[i % art.val.len()];
        let current = sample
            .scene
            .panoptic
            .iter()
            .find(|&&c| shape_classes.contains(&c))
            .copied()
            .ok_or_else(|| Error::invalid("edit_sensitivity: no shape in scene"))?;
        let replacement = *shape_classes
            .iter()
            .find(|&&c| c != current)
            .expect("inventory has multiple shapes");
        let edited = edit_scene(
            &sample.scene,
            &art.vqseg.cfg.schema,
            &[SceneEdit::ReplaceClass {
                group: SceneGroup::Panoptic,
                from: current,
                to: replacement,
            }],
        )?;
        let cfg = SampleConfig {
            alpha_c: art.config.alpha_c,
            seed: derive(seed, 0xed1 + i as u64),
            mode: SampleMode::FixedScene,
            top_fraction: art.config.top_fraction,
        };
        let base = generate(&sample.caption, Some(&sample.scene), &models, &cfg)?;
        let after = generate(&sample.caption, Some(&edited), &models, &cfg)?;
        if base.image_tokens.tokens != after.image_tokens.tokens {
            changed += 1;
        }
    }
    Ok(changed as f64 / trials as f64)
}

/// Runs the whole metric battery.
pub fn eval_suite(art: &PipelineArtifacts, opts: &EvalOptions) -> Result<EvalReport> {
    let mut alignment = Vec::new();
    for &alpha in &opts.alpha_grid {
        alignment.push((alpha, alignment_accuracy(art, alpha, opts.generations, opts.seed)?));
    }
    let fidelity = fixed_scene_fidelity(art, opts.fixed_scene_checks, opts.seed)?;
    let img_l1 = reconstruction_l1(&art.val, &art.vqimg)?;
    let val_scenes: Vec<_> = art.val.iter().map(|s| s.scene.clone()).collect();
    let recall = art.vqseg.face_part_recall(&val_scenes)?;
    let crop_l1 = face_crop_l1(art)?;
    let (seg_usage, img_usage) = codebook_usage(&art.val, &art.vqseg, &art.vqimg)?;
    let sensitivity = edit_sensitivity(art, opts.edit_trials, opts.seed)?;
    Ok(EvalReport {
        alignment,
        fixed_scene_fidelity: fidelity,
        img_l1_val: img_l1,
        face_recall_val: recall,
        face_crop_l1_val: crop_l1,
        seg_codebook_usage: seg_usage,
        img_codebook_usage: img_usage,
        edit_sensitivity: sensitivity,
    })
}
