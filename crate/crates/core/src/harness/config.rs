//! End-to-end pipeline configuration, its flat key-value file format, and
//! the canonical hash that ties manifests to configurations.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harness::synth::SynthSpec;
use crate::sbt::{SbtConfig, SegmentLengths, SegmentVocabs, TrainConfig};
use crate::vqimg::{ResolutionMode, VqImgConfig};
use crate::vqseg::VqSegConfig;

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub seed: u64,
    pub corpus_size: usize,
    pub canvas: usize,
    pub bpe_vocab: usize,
    pub vqseg: VqSegConfig,
    pub vqimg: VqImgConfig,
    pub sbt_layers: usize,
    pub sbt_heads: usize,
    pub sbt_dim: usize,
    pub sbt_train: TrainConfig,
    pub alpha_c: f64,
    pub top_fraction: f64,
    pub eval_generations: usize,
    pub eval_edit_trials: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig::desk()
    }
}

impl PipelineConfig {
    pub fn desk() -> PipelineConfig {
        let synth = SynthSpec::desk();
        PipelineConfig {
            seed: 7,
            corpus_size: 2000,
            canvas: synth.canvas,
            bpe_vocab: 512,
            vqseg: VqSegConfig::desk(synth.schema),
            vqimg: VqImgConfig::desk(),
            sbt_layers: 4,
            sbt_heads: 4,
            sbt_dim: 128,
            sbt_train: TrainConfig::desk(),
            alpha_c: 5.0,
            top_fraction: 0.5,
            eval_generations: 200,
            eval_edit_trials: 100,
        }
    }

    pub fn synth_spec(&self) -> SynthSpec {
        let mut spec = SynthSpec::desk();
        spec.canvas = self.canvas;
        spec.schema = self.vqseg.schema.clone();
        spec
    }

    /// Token-sequence geometry implied by the tokenizers: one text segment
    /// of 16, plus the two square token grids.
    pub fn lengths(&self) -> SegmentLengths {
        let side_y = self.canvas >> (self.vqseg.widths.len() - 1);
        let side_z = self.canvas >> self.vqimg.num_down();
        SegmentLengths {
            n_x: 16,
            n_y: side_y * side_y,
            n_z: side_z * side_z,
        }
    }

    pub fn sbt_config(&self, text_vocab: usize) -> SbtConfig {
        SbtConfig {
            layers: self.sbt_layers,
            heads: self.sbt_heads,
            dim: self.sbt_dim,
            lengths: self.lengths(),
            vocabs: SegmentVocabs {
                text: text_vocab,
                scene: self.vqseg.codebook_size,
                image: self.vqimg.codebook_size,
            },
            ln_eps: 1e-5,
        }
    }

    /// Canonical flat key-value rendering; also the hash input.
    pub fn to_kv_text(&self) -> String {
        let mode = match self.vqimg.resolution_mode {
            ResolutionMode::Base => "base",
            ResolutionMode::Doubled => "doubled",
        };
        format!(
            "seed = {}\n\
             corpus.size = {}\n\
             corpus.canvas = {}\n\
             bpe.vocab = {}\n\
             vqseg.steps = {}\n\
             vqseg.batch = {}\n\
             vqseg.lr = {}\n\
             vqseg.codebook = {}\n\
             vqseg.latent = {}\n\
             vqseg.face_boost = {}\n\
             vqimg.steps = {}\n\
             vqimg.batch = {}\n\
             vqimg.lr = {}\n\
             vqimg.codebook = {}\n\
             vqimg.latent = {}\n\
             vqimg.face_loss = {}\n\
             vqimg.object_loss = {}\n\
             vqimg.mode = {}\n\
             sbt.layers = {}\n\
             sbt.heads = {}\n\
             sbt.dim = {}\n\
             sbt.steps = {}\n\
             sbt.cf_steps = {}\n\
             sbt.batch = {}\n\
             sbt.p_cf = {}\n\
             sbt.lr_start = {}\n\
             sbt.lr_after = {}\n\
             sample.alpha_c = {}\n\
             sample.top_fraction = {}\n\
             eval.generations = {}\n\
             eval.edit_trials = {}\n",
            self.seed,
            self.corpus_size,
            self.canvas,
            self.bpe_vocab,
            self.vqseg.steps,
            self.vqseg.batch,
            self.vqseg.lr,
            self.vqseg.codebook_size,
            self.vqseg.latent_dim,
            self.vqseg.face_boost,
            self.vqimg.steps,
            self.vqimg.batch,
            self.vqimg.lr,
            self.vqimg.codebook_size,
            self.vqimg.latent_dim,
            self.vqimg.face_loss_enabled,
            self.vqimg.object_loss_enabled,
            mode,
            self.sbt_layers,
            self.sbt_heads,
            self.sbt_dim,
            self.sbt_train.steps,
            self.sbt_train.cf_steps,
            self.sbt_train.batch,
            self.sbt_train.p_cf,
            self.sbt_train.lr_start,
            self.sbt_train.lr_after,
            self.alpha_c,
            self.top_fraction,
            self.eval_generations,
            self.eval_edit_trials,
        )
    }

    /// Parses `key = value` lines over desk defaults. `#` starts a comment;
    /// unknown keys are an error.
    pub fn from_kv_text(text: &str) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::desk();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::format(format!("config line {}: no '='", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| {
                Error::format(format!("config line {}: bad {what} value {value:?}", lineno + 1))
            };
            macro_rules! num {
                ($ty:ty, $what:expr) => {
                    value.parse::<$ty>().map_err(|_| bad($what))?
                };
            }
            match key {
                "seed" => cfg.seed = num!(u64, "seed"),
                "corpus.size" => cfg.corpus_size = num!(usize, "corpus size"),
                "corpus.canvas" => cfg.canvas = num!(usize, "canvas"),
                "bpe.vocab" => cfg.bpe_vocab = num!(usize, "vocab"),
                "vqseg.steps" => cfg.vqseg.steps = num!(usize, "steps"),
                "vqseg.batch" => cfg.vqseg.batch = num!(usize, "batch"),
                "vqseg.lr" => cfg.vqseg.lr = num!(f64, "lr"),
                "vqseg.codebook" => cfg.vqseg.codebook_size = num!(usize, "codebook"),
                "vqseg.latent" => cfg.vqseg.latent_dim = num!(usize, "latent"),
                "vqseg.face_boost" => cfg.vqseg.face_boost = num!(f64, "boost"),
                "vqimg.steps" => cfg.vqimg.steps = num!(usize, "steps"),
                "vqimg.batch" => cfg.vqimg.batch = num!(usize, "batch"),
                "vqimg.lr" => cfg.vqimg.lr = num!(f64, "lr"),
                "vqimg.codebook" => cfg.vqimg.codebook_size = num!(usize, "codebook"),
                "vqimg.latent" => cfg.vqimg.latent_dim = num!(usize, "latent"),
                "vqimg.face_loss" => cfg.vqimg.face_loss_enabled = num!(bool, "flag"),
                "vqimg.object_loss" => cfg.vqimg.object_loss_enabled = num!(bool, "flag"),
                "vqimg.mode" => {
                    cfg.vqimg.resolution_mode = match value {
                        "base" => ResolutionMode::Base,
                        "doubled" => ResolutionMode::Doubled,
                        _ => return Err(bad("mode")),
                    }
                }
                "sbt.layers" => cfg.sbt_layers = num!(usize, "layers"),
                "sbt.heads" => cfg.sbt_heads = num!(usize, "heads"),
                "sbt.dim" => cfg.sbt_dim = num!(usize, "dim"),
                "sbt.steps" => cfg.sbt_train.steps = num!(usize, "steps"),
                "sbt.cf_steps" => cfg.sbt_train.cf_steps = num!(usize, "steps"),
                "sbt.batch" => cfg.sbt_train.batch = num!(usize, "batch"),
                "sbt.p_cf" => cfg.sbt_train.p_cf = num!(f64, "p_cf"),
                "sbt.lr_start" => cfg.sbt_train.lr_start = num!(f64, "lr"),
                "sbt.lr_after" => cfg.sbt_train.lr_after = num!(f64, "lr"),
                "sample.alpha_c" => cfg.alpha_c = num!(f64, "alpha_c"),
                "sample.top_fraction" => cfg.top_fraction = num!(f64, "fraction"),
                "eval.generations" => cfg.eval_generations = num!(usize, "count"),
                "eval.edit_trials" => cfg.eval_edit_trials = num!(usize, "count"),
                _ => {
                    return Err(Error::format(format!(
                        "config line {}: unknown key {key:?}",
                        lineno + 1
                    )))
                }
            }
        }
        // keep the lr switch proportional to the configured step budget
        let total = cfg.sbt_train.steps + cfg.sbt_train.cf_steps;
        cfg.sbt_train.lr_switch_step = total * 40 / 170;
        cfg.sbt_train.validate()?;
        Ok(cfg)
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_kv_text().as_bytes());
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip_preserves_hash() {
        let cfg = PipelineConfig::desk();
        let text = cfg.to_kv_text();
        let back = PipelineConfig::from_kv_text(&text).unwrap();
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn overrides_apply() {
        let cfg = PipelineConfig::from_kv_text("seed = 99\nvqseg.face_boost = 1 # ablation\n").unwrap();
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.vqseg.face_boost, 1.0);
        assert_ne!(cfg.hash(), PipelineConfig::desk().hash());
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(PipelineConfig::from_kv_text("nope = 1\n").is_err());
    }

    #[test]
    fn desk_geometry_is_144_positions() {
        let cfg = PipelineConfig::desk();
        let lengths = cfg.lengths();
        assert_eq!((lengths.n_x, lengths.n_y, lengths.n_z), (16, 64, 64));
        assert_eq!(lengths.total(), 144);
    }
}
