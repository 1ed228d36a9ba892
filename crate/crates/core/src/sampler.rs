//! Dual-stream classifier-free-guided decoding.
//!
//! Two token streams run in lockstep: one conditioned on the real text, one
//! on an all-padding text segment. At every step the two logit vectors
//! combine as `uncond + alpha_c * (cond - uncond)`, a single token is
//! sampled from the guided distribution (top-fraction multinomial), and the
//! same token is appended to both streams. Scene tokens are either sampled
//! the same way (free-scene mode) or teacher-forced from a supplied scene
//! map (fixed-scene mode).

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;
use crate::rng::SeedRng;
use crate::sbt::{pack, SbtModel, Segment, TokenSequence};
use crate::scene::{encode_channels, SceneMap};
use crate::textbpe::{bpe_encode, BpeVocab, PAD};
use crate::vq::TokenGrid;
use crate::vqimg::VqImgModel;
use crate::vqseg::VqSegModel;

/// Conditional/unconditional logit pair with its guidance scale.
#[derive(Debug, Clone)]
pub struct GuidedLogits {
    pub cond: Vec<f64>,
    pub uncond: Vec<f64>,
    pub alpha_c: f64,
}

/// logits_cf = logits_uncond + alpha_c * (logits_cond - logits_uncond)
///
/// The alpha = 0 and alpha = 1 collapses are algebraically exact, so they
/// return the corresponding stream verbatim instead of routing through
/// floating-point arithmetic that would smudge the last bit.
pub fn guide(g: &GuidedLogits) -> Result<Vec<f64>> {
    if g.cond.len() != g.uncond.len() {
        return Err(Error::shape(
            "guide",
            format!("cond {} vs uncond {}", g.cond.len(), g.uncond.len()),
        ));
    }
    if g.alpha_c == 0.0 {
        return Ok(g.uncond.clone());
    }
    if g.alpha_c == 1.0 {
        return Ok(g.cond.clone());
    }
    Ok(g.cond
        .iter()
        .zip(&g.uncond)
        .map(|(&c, &u)| u + g.alpha_c * (c - u))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// Scene tokens are generated by the transformer.
    FreeScene,
    /// Scene tokens are supplied and teacher-forced into both streams.
    FixedScene,
}

#[derive(Debug, Clone)]
pub struct SampleConfig {
    pub alpha_c: f64,
    pub seed: u64,
    pub mode: SampleMode,
    /// Fraction of the vocabulary kept before the multinomial draw.
    pub top_fraction: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            alpha_c: 5.0,
            seed: 0,
            mode: SampleMode::FreeScene,
            top_fraction: 0.5,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha_c < 0.0 {
            return Err(Error::invalid("alpha_c must be >= 0"));
        }
        if !(self.top_fraction > 0.0 && self.top_fraction <= 1.0) {
            return Err(Error::invalid("top_fraction must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Three-step sampling rule: keep the ceil(fraction * V) highest logits
/// (ties to the lower index), softmax over the kept set, then one
/// multinomial draw. Tokens outside the kept set are never returned.
pub fn sample_token(logits: &[f64], rng: &mut SeedRng, top_fraction: f64) -> Result<u32> {
    if logits.is_empty() {
        return Err(Error::invalid("sample_token: empty logits"));
    }
    let ranked: Vec<f64> = logits
        .iter()
        .map(|&v| if v.is_finite() { v } else { f64::NEG_INFINITY })
        .collect();
    let keep = ((top_fraction * logits.len() as f64).ceil() as usize)
        .clamp(1, logits.len());
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| ranked[b].partial_cmp(&ranked[a]).unwrap().then(a.cmp(&b)));
    order.truncate(keep);
    let top = ranked[order[0]];
    if top == f64::NEG_INFINITY {
        return Err(Error::NonFinite("sample_token logits"));
    }
    let probs: Vec<f64> = order.iter().map(|&i| (ranked[i] - top).exp()).collect();
    let total: f64 = probs.iter().sum();
    let draw = rng.uniform() * total;
    let mut acc = 0.0;
    for (&idx, &p) in order.iter().zip(&probs) {
        acc += p;
        if draw < acc {
            return Ok(idx as u32);
        }
    }
    // floating-point edge: fall back to the last kept token with mass
    let last = order
        .iter()
        .zip(&probs)
        .filter(|(_, &p)| p > 0.0)
        .map(|(&i, _)| i)
        .last()
        .unwrap_or(order[0]);
    Ok(last as u32)
}

/// Everything generation needs, loaded and immutable.
pub struct Models<'a> {
    pub vocab: &'a BpeVocab,
    pub vqseg: &'a VqSegModel,
    pub vqimg: &'a VqImgModel,
    pub sbt: &'a SbtModel,
}

impl Models<'_> {
    fn validate(&self) -> Result<()> {
        let v = &self.sbt.cfg.vocabs;
        if v.text != self.vocab.size()
            || v.scene != self.vqseg.cfg.codebook_size
            || v.image != self.vqimg.cfg.codebook_size
        {
            return Err(Error::invalid(format!(
                "model mismatch: transformer vocabs ({}, {}, {}) vs bpe {} / scene book {} / image book {}",
                v.text,
                v.scene,
                v.image,
                self.vocab.size(),
                self.vqseg.cfg.codebook_size,
                self.vqimg.cfg.codebook_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct GenerateOutput {
    pub text_tokens: Vec<u32>,
    pub scene_tokens: TokenGrid,
    pub image_tokens: TokenGrid,
    /// Packed sequence actually produced (conditional stream).
    pub sequence: TokenSequence,
    pub decoded_scene: SceneMap,
    pub decoded_scene_edges: Vec<u8>,
    /// [3, h, w] in [-1, 1].
    pub decoded_image: Tensor,
}

fn square_side(n: usize, what: &'static str) -> Result<usize> {
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n {
        return Err(Error::invalid(format!("{what}: {n} tokens is not a square grid")));
    }
    Ok(side)
}

/// Autoregressive generation with dual-stream classifier-free guidance.
/// Deterministic given the seed.
pub fn generate(
    text: &str,
    scene: Option<&SceneMap>,
    models: &Models,
    cfg: &SampleConfig,
) -> Result<GenerateOutput> {
    cfg.validate()?;
    models.validate()?;
    let sbt_cfg = &models.sbt.cfg;
    let (n_x, n_y, n_z) = (
        sbt_cfg.lengths.n_x,
        sbt_cfg.lengths.n_y,
        sbt_cfg.lengths.n_z,
    );
    let mut rng = SeedRng::substream(cfg.seed, 0x5a3);

    let text_tokens = bpe_encode(text, models.vocab, n_x);

    // scene tokens to force, if operating on a fixed layout
    let forced_scene: Option<Vec<u32>> = match (cfg.mode, scene) {
        (SampleMode::FixedScene, Some(s)) => {
            let channels = encode_channels(s, &models.vqseg.cfg.schema)?;
            let grid = models.vqseg.seg_encode(&channels)?;
            if grid.len() != n_y {
                return Err(Error::shape(
                    "generate",
                    format!("scene encodes to {} tokens, model wants {}", grid.len(), n_y),
                ));
            }
            Some(grid.tokens)
        }
        (SampleMode::FixedScene, None) => {
            return Err(Error::invalid("fixed-scene mode requires a scene"))
        }
        (SampleMode::FreeScene, _) => None,
    };

    let mut cond = models.sbt.decoder();
    let mut uncond = models.sbt.decoder();
    for &t in &text_tokens {
        cond.feed(t)?;
        uncond.feed(PAD)?;
    }

    let scene_offset = sbt_cfg.vocabs.offset(Segment::Scene) as u32;
    let image_offset = sbt_cfg.vocabs.offset(Segment::Image) as u32;
    let mut scene_tokens: Vec<u32> = Vec::with_capacity(n_y);
    let mut image_tokens: Vec<u32> = Vec::with_capacity(n_z);

    for step in 0..n_y + n_z {
        let in_scene = step < n_y;
        let forced = if in_scene {
            forced_scene.as_ref().map(|f| f[step])
        } else {
            None
        };
        let local = match forced {
            Some(tok) => tok,
            None => {
                let (seg_c, lc) = cond.next_logits().expect("positions remain");
                let (seg_u, lu) = uncond.next_logits().expect("positions remain");
                debug_assert_eq!(seg_c, seg_u);
                let guided = guide(&GuidedLogits {
                    cond: lc,
                    uncond: lu,
                    alpha_c: cfg.alpha_c,
                })?;
                sample_token(&guided, &mut rng, cfg.top_fraction)?
            }
        };
        let unified = if in_scene {
            scene_tokens.push(local);
            local + scene_offset
        } else {
            image_tokens.push(local);
            local + image_offset
        };
        // one draw feeds both streams
        cond.feed(unified)?;
        uncond.feed(unified)?;
    }

    let gy = square_side(n_y, "scene grid")?;
    let gz = square_side(n_z, "image grid")?;
    let scene_grid = TokenGrid {
        h: gy,
        w: gy,
        tokens: scene_tokens,
    };
    let image_grid = TokenGrid {
        h: gz,
        w: gz,
        tokens: image_tokens,
    };

    let scene_logits = models.vqseg.seg_decode(&scene_grid)?;
    let (decoded_scene, decoded_scene_edges) = models.vqseg.seg_decode_hard(&scene_logits)?;
    let decoded_image = models.vqimg.img_decode(&image_grid)?;
    let sequence = pack(
        &text_tokens,
        &scene_grid.tokens,
        &image_grid.tokens,
        sbt_cfg.lengths,
        sbt_cfg.vocabs,
    )?;

    Ok(GenerateOutput {
        text_tokens,
        scene_tokens: scene_grid,
        image_tokens: image_grid,
        sequence,
        decoded_scene,
        decoded_scene_edges,
        decoded_image,
    })
}
