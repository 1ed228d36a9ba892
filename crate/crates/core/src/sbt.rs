//! The scene-based transformer: a decoder-only causal model over the packed
//! [text | scene | image] token sequence, with per-segment output heads,
//! segment-aware loss weighting, and classifier-free fine-tuning (random
//! replacement of the text segment by padding).
//!
//! Two forward paths exist. [`SbtModel::forward_logits`] runs on the
//! autodiff graph and drives training and the causality checks.
//! [`SbtDecoder`] is the inference path with a per-layer KV cache; its
//! kernels accumulate in the same order as the graph path, so the two agree
//! bit-for-bit (pinned by a test).

use crate::error::{Error, Result};
use crate::ndgrad::{adam_step, kernels, AdamConfig, Tensor};
use crate::nn::{linear_init, Params};
use crate::rng::SeedRng;
use crate::textbpe::PAD;

/// Fixed per-segment token counts (n_x, n_y, n_z).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentLengths {
    pub n_x: usize,
    pub n_y: usize,
    pub n_z: usize,
}

impl SegmentLengths {
    pub fn total(&self) -> usize {
        self.n_x + self.n_y + self.n_z
    }
}

/// Per-segment vocabulary sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentVocabs {
    pub text: usize,
    pub scene: usize,
    pub image: usize,
}

impl SegmentVocabs {
    pub fn unified(&self) -> usize {
        self.text + self.scene + self.image
    }

    pub fn offset(&self, segment: Segment) -> usize {
        match segment {
            Segment::Text => 0,
            Segment::Scene => self.text,
            Segment::Image => self.text + self.scene,
        }
    }

    pub fn size(&self, segment: Segment) -> usize {
        match segment {
            Segment::Text => self.text,
            Segment::Scene => self.scene,
            Segment::Image => self.image,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Text,
    Scene,
    Image,
}

/// Packed token stream in the unified embedding index space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    tokens: Vec<u32>,
    pub lengths: SegmentLengths,
    pub vocabs: SegmentVocabs,
}

/// Concatenates the three segments in text -> scene -> image order, mapping
/// each local id into the unified space by its segment offset.
pub fn pack(
    text: &[u32],
    scene: &[u32],
    image: &[u32],
    lengths: SegmentLengths,
    vocabs: SegmentVocabs,
) -> Result<TokenSequence> {
    if text.len() != lengths.n_x || scene.len() != lengths.n_y || image.len() != lengths.n_z {
        return Err(Error::shape(
            "pack",
            format!(
                "segment lengths ({}, {}, {}) vs config ({}, {}, {})",
                text.len(),
                scene.len(),
                image.len(),
                lengths.n_x,
                lengths.n_y,
                lengths.n_z
            ),
        ));
    }
    let mut tokens = Vec::with_capacity(lengths.total());
    for (seg, ids) in [
        (Segment::Text, text),
        (Segment::Scene, scene),
        (Segment::Image, image),
    ] {
        let limit = vocabs.size(seg);
        let offset = vocabs.offset(seg) as u32;
        for &t in ids {
            if t as usize >= limit {
                return Err(Error::TokenOutOfRange { value: t, limit });
            }
            tokens.push(t + offset);
        }
    }
    Ok(TokenSequence {
        tokens,
        lengths,
        vocabs,
    })
}

impl TokenSequence {
    pub fn unified(&self) -> &[u32] {
        &self.tokens
    }

    /// Inverse of [`pack`]: the three segments as local ids.
    pub fn unpack(&self) -> (Vec<u32>, Vec<u32>, Vec<u32>) {
        let (nx, ny) = (self.lengths.n_x, self.lengths.n_y);
        let off_y = self.vocabs.offset(Segment::Scene) as u32;
        let off_z = self.vocabs.offset(Segment::Image) as u32;
        (
            self.tokens[..nx].to_vec(),
            self.tokens[nx..nx + ny].iter().map(|&t| t - off_y).collect(),
            self.tokens[nx + ny..].iter().map(|&t| t - off_z).collect(),
        )
    }

    /// Replaces the text segment with padding (the unconditional stream).
    pub fn with_padded_text(&self) -> TokenSequence {
        let mut out = self.clone();
        for t in out.tokens[..self.lengths.n_x].iter_mut() {
            *t = PAD;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SbtConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub lengths: SegmentLengths,
    pub vocabs: SegmentVocabs,
    pub ln_eps: f64,
}

impl SbtConfig {
    /// Desk default: 4 layers, 4 heads, width 128 over a 144-position
    /// context (16 text + 64 scene + 64 image tokens).
    pub fn desk(vocabs: SegmentVocabs) -> SbtConfig {
        SbtConfig {
            layers: 4,
            heads: 4,
            dim: 128,
            lengths: SegmentLengths {
                n_x: 16,
                n_y: 64,
                n_z: 64,
            },
            vocabs,
            ln_eps: 1e-5,
        }
    }

    /// Full-scale preset (recorded, never instantiated at desk scale):
    /// 48 layers, 48 heads, width 2560 over 256 + 256 + 1024 positions.
    pub fn full_scale() -> SbtConfig {
        SbtConfig {
            layers: 48,
            heads: 48,
            dim: 2560,
            lengths: SegmentLengths {
                n_x: 256,
                n_y: 256,
                n_z: 1024,
            },
            vocabs: SegmentVocabs {
                text: 16384,
                scene: 1024,
                image: 8192,
            },
            ln_eps: 1e-5,
        }
    }

    pub fn context(&self) -> usize {
        self.lengths.total()
    }

    /// Segment owning a position.
    pub fn segment_of(&self, pos: usize) -> Segment {
        if pos < self.lengths.n_x {
            Segment::Text
        } else if pos < self.lengths.n_x + self.lengths.n_y {
            Segment::Scene
        } else {
            Segment::Image
        }
    }

    /// Segment of the token predicted AT `pos` (i.e. the segment of
    /// position pos + 1); the last position predicts nothing.
    pub fn predicted_segment(&self, pos: usize) -> Option<Segment> {
        if pos + 1 >= self.context() {
            None
        } else {
            Some(self.segment_of(pos + 1))
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "sbt: {} heads do not divide width {}",
                self.heads, self.dim
            )));
        }
        Ok(())
    }
}

/// Optimizer schedule and loss weighting for transformer training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_start: f64,
    pub lr_after: f64,
    /// Step at which the learning rate switches to `lr_after`.
    pub lr_switch_step: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// 7/1 loss ratio between image and text tokens; the scene segment
    /// shares the text weight.
    pub image_loss_weight: f64,
    pub scene_loss_weight: f64,
    pub text_loss_weight: f64,
    pub p_cf: f64,
    pub steps: usize,
    pub cf_steps: usize,
    pub batch: usize,
}

impl TrainConfig {
    pub fn desk() -> TrainConfig {
        let steps = 600;
        let cf_steps = 150;
        TrainConfig {
            lr_start: 4.5e-4,
            lr_after: 1.5e-4,
            // scaled proportionally to the 40k/170k full-scale switch
            lr_switch_step: (steps + cf_steps) * 40 / 170,
            beta1: 0.9,
            beta2: 0.96,
            weight_decay: 4.5e-4,
            image_loss_weight: 7.0,
            scene_loss_weight: 1.0,
            text_loss_weight: 1.0,
            p_cf: 0.2,
            steps,
            cf_steps,
            batch: 4,
        }
    }

    /// Full-scale recipe: 170k iterations at batch 1024, lr 4.5e-4 dropping
    /// to 1.5e-4 at 40k, classifier-free fine-tune over the last 30k with
    /// p_CF = 0.2.
    pub fn full_scale() -> TrainConfig {
        TrainConfig {
            lr_start: 4.5e-4,
            lr_after: 1.5e-4,
            lr_switch_step: 40_000,
            beta1: 0.9,
            beta2: 0.96,
            weight_decay: 4.5e-4,
            image_loss_weight: 7.0,
            scene_loss_weight: 1.0,
            text_loss_weight: 1.0,
            p_cf: 0.2,
            steps: 140_000,
            cf_steps: 30_000,
            batch: 1024,
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.lr_switch_step {
            self.lr_start
        } else {
            self.lr_after
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_cf) {
            return Err(Error::invalid(format!("p_cf {} outside [0, 1]", self.p_cf)));
        }
        if self.image_loss_weight <= 0.0 {
            return Err(Error::invalid("image/text loss ratio must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CfMode {
    Off,
    On,
}

/// Per-position next-token logits, grouped by the segment of the predicted
/// position. Text rows cover positions 0..n_x-1 (predicting t_x[1..]),
/// scene rows cover the n_y positions ending each scene prediction, image
/// rows likewise; the final position predicts nothing.
#[derive(Debug)]
pub struct SegmentLogits {
    /// [batch, n_x - 1, text vocab]
    pub text: Tensor,
    /// [batch, n_y, scene vocab]
    pub scene: Tensor,
    /// [batch, n_z, image vocab]
    pub image: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct SbtLossReport {
    pub text_loss: f64,
    pub scene_loss: f64,
    pub image_loss: f64,
    pub total: f64,
    pub lr: f64,
    /// Samples whose text segment was padded out this step.
    pub cf_replaced: usize,
}

struct Block {
    ln1_g: usize,
    ln1_b: usize,
    wqkv: usize,
    bqkv: usize,
    wproj: usize,
    bproj: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

pub struct SbtModel {
    pub cfg: SbtConfig,
    params: Params,
    tok_emb: usize,
    pos_emb: usize,
    seg_emb: usize,
    blocks: Vec<Block>,
    lnf_g: usize,
    lnf_b: usize,
    head_text: usize,
    head_scene: usize,
    head_image: usize,
    mask: Tensor,
    step: usize,
}

impl SbtModel {
    pub fn new(cfg: SbtConfig, seed: u64) -> Result<SbtModel> {
        cfg.validate()?;
        let mut rng = SeedRng::substream(seed, 0x5b7);
        let mut params = Params::new();
        let d = cfg.dim;
        let v = cfg.vocabs.unified();
        let t = cfg.context();

        let tok_emb = params.add("emb.tok", &[v, d], crate::nn::embed_init(&mut rng, v, d));
        let pos_emb = params.add("emb.pos", &[t, d], crate::nn::embed_init(&mut rng, t, d));
        let seg_emb = params.add("emb.seg", &[3, d], crate::nn::embed_init(&mut rng, 3, d));

        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = |s: &str| format!("l{l}.{s}");
            blocks.push(Block {
                ln1_g: params.add(p("ln1.g"), &[d], vec![1.0; d]),
                ln1_b: params.add(p("ln1.b"), &[d], vec![0.0; d]),
                wqkv: params.add(p("attn.wqkv"), &[d, 3 * d], linear_init(&mut rng, d, 3 * d)),
                bqkv: params.add(p("attn.bqkv"), &[3 * d], vec![0.0; 3 * d]),
                wproj: params.add(p("attn.wproj"), &[d, d], linear_init(&mut rng, d, d)),
                bproj: params.add(p("attn.bproj"), &[d], vec![0.0; d]),
                ln2_g: params.add(p("ln2.g"), &[d], vec![1.0; d]),
                ln2_b: params.add(p("ln2.b"), &[d], vec![0.0; d]),
                w1: params.add(p("mlp.w1"), &[d, 4 * d], linear_init(&mut rng, d, 4 * d)),
                b1: params.add(p("mlp.b1"), &[4 * d], vec![0.0; 4 * d]),
                w2: params.add(p("mlp.w2"), &[4 * d, d], linear_init(&mut rng, 4 * d, d)),
                b2: params.add(p("mlp.b2"), &[d], vec![0.0; d]),
            });
        }
        let lnf_g = params.add("lnf.g", &[d], vec![1.0; d]);
        let lnf_b = params.add("lnf.b", &[d], vec![0.0; d]);
        let head_text = params.add(
            "head.text",
            &[d, cfg.vocabs.text],
            linear_init(&mut rng, d, cfg.vocabs.text),
        );
        let head_scene = params.add(
            "head.scene",
            &[d, cfg.vocabs.scene],
            linear_init(&mut rng, d, cfg.vocabs.scene),
        );
        let head_image = params.add(
            "head.image",
            &[d, cfg.vocabs.image],
            linear_init(&mut rng, d, cfg.vocabs.image),
        );

        // strictly-causal additive mask: position i attends to j <= i
        let mut mask_vals = vec![0.0; t * t];
        for i in 0..t {
            for j in i + 1..t {
                mask_vals[i * t + j] = -1e30;
            }
        }
        let mask = Tensor::from_vec(&[t, t], mask_vals)?;

        Ok(SbtModel {
            cfg,
            params,
            tok_emb,
            pos_emb,
            seg_emb,
            blocks,
            lnf_g,
            lnf_b,
            head_text,
            head_scene,
            head_image,
            mask,
            step: 0,
        })
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn set_step_count(&mut self, step: usize) {
        self.step = step;
    }

    fn validate_seq(&self, seq: &TokenSequence) -> Result<()> {
        if seq.lengths != self.cfg.lengths || seq.vocabs != self.cfg.vocabs {
            return Err(Error::shape(
                "sbt",
                format!(
                    "sequence geometry {:?}/{:?} vs model {:?}/{:?}",
                    seq.lengths, seq.vocabs, self.cfg.lengths, self.cfg.vocabs
                ),
            ));
        }
        Ok(())
    }

    /// Transformer trunk on the graph: unified ids (batch-flattened) to
    /// hidden states [b*t, d].
    fn hidden_states(&self, flat_ids: &[u32], batch: usize) -> Result<Tensor> {
        let t = self.cfg.context();
        let d = self.cfg.dim;
        let h = self.cfg.heads;
        let hd = d / h;
        let p = &self.params;

        let pos_ids: Vec<u32> = (0..batch as u32 * t as u32).map(|i| i % t as u32).collect();
        let seg_ids: Vec<u32> = (0..batch * t)
            .map(|i| match self.cfg.segment_of(i % t) {
                Segment::Text => 0u32,
                Segment::Scene => 1,
                Segment::Image => 2,
            })
            .collect();
        let mut x = p
            .tensor(self.tok_emb)
            .embed(flat_ids)?
            .add(&p.tensor(self.pos_emb).embed(&pos_ids)?)?
            .add(&p.tensor(self.seg_emb).embed(&seg_ids)?)?;

        let scale = 1.0 / (hd as f64).sqrt();
        for blk in &self.blocks {
            let normed = x.layer_norm(&p.tensor(blk.ln1_g), &p.tensor(blk.ln1_b), self.cfg.ln_eps)?;
            let qkv = normed
                .matmul(&p.tensor(blk.wqkv))?
                .add(&p.tensor(blk.bqkv))?;
            let mut head_outs = Vec::with_capacity(h);
            for head in 0..h {
                let q = qkv
                    .slice(1, head * hd, hd)?
                    .reshape(&[batch, t, hd])?
                    .scale(scale);
                let k = qkv.slice(1, d + head * hd, hd)?.reshape(&[batch, t, hd])?;
                let v = qkv
                    .slice(1, 2 * d + head * hd, hd)?
                    .reshape(&[batch, t, hd])?;
                let scores = q.matmul(&k.transpose_last()?)?.add(&self.mask)?;
                let attn = scores.softmax()?;
                let out = attn.matmul(&v)?.reshape(&[batch * t, hd])?;
                head_outs.push(out);
            }
            let refs: Vec<&Tensor> = head_outs.iter().collect();
            let merged = Tensor::concat(&refs, 1)?;
            let proj = merged
                .matmul(&p.tensor(blk.wproj))?
                .add(&p.tensor(blk.bproj))?;
            x = x.add(&proj)?;

            let normed2 = x.layer_norm(&p.tensor(blk.ln2_g), &p.tensor(blk.ln2_b), self.cfg.ln_eps)?;
            let mid = normed2
                .matmul(&p.tensor(blk.w1))?
                .add(&p.tensor(blk.b1))?
                .relu();
            let mlp = mid.matmul(&p.tensor(blk.w2))?.add(&p.tensor(blk.b2))?;
            x = x.add(&mlp)?;
        }
        x.layer_norm(&p.tensor(self.lnf_g), &p.tensor(self.lnf_b), self.cfg.ln_eps)
    }

    fn batched_logits(&self, seqs: &[&TokenSequence]) -> Result<SegmentLogits> {
        let batch = seqs.len();
        let t = self.cfg.context();
        let d = self.cfg.dim;
        let mut flat = Vec::with_capacity(batch * t);
        for s in seqs {
            self.validate_seq(s)?;
            flat.extend_from_slice(s.unified());
        }
        let hidden = self.hidden_states(&flat, batch)?.reshape(&[batch, t, d])?;
        let (nx, ny, nz) = (self.cfg.lengths.n_x, self.cfg.lengths.n_y, self.cfg.lengths.n_z);
        let head = |start: usize, len: usize, head_idx: usize, vocab: usize| -> Result<Tensor> {
            hidden
                .slice(1, start, len)?
                .reshape(&[batch * len, d])?
                .matmul(&self.params.tensor(head_idx))?
                .reshape(&[batch, len, vocab])
        };
        Ok(SegmentLogits {
            text: head(0, nx - 1, self.head_text, self.cfg.vocabs.text)?,
            scene: head(nx - 1, ny, self.head_scene, self.cfg.vocabs.scene)?,
            image: head(nx + ny - 1, nz, self.head_image, self.cfg.vocabs.image)?,
        })
    }

    /// Next-token logits for every position of one sequence, restricted to
    /// the vocabulary of the segment each position predicts.
    pub fn forward_logits(&self, seq: &TokenSequence) -> Result<SegmentLogits> {
        self.batched_logits(&[seq])
    }

    /// One Adam step of weighted next-token cross-entropy. With
    /// `CfMode::On`, each sample's text segment is independently replaced by
    /// padding with probability p_cf before the forward pass. PAD targets in
    /// the text segment carry no loss.
    pub fn train_step(
        &mut self,
        batch: &[TokenSequence],
        cfg: &TrainConfig,
        cf_mode: CfMode,
        rng: &mut SeedRng,
    ) -> Result<SbtLossReport> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        cfg.validate()?;
        let mut cf_replaced = 0;
        let prepared: Vec<TokenSequence> = batch
            .iter()
            .map(|s| {
                if cf_mode == CfMode::On && rng.chance(cfg.p_cf) {
                    cf_replaced += 1;
                    s.with_padded_text()
                } else {
                    s.clone()
                }
            })
            .collect();
        let refs: Vec<&TokenSequence> = prepared.iter().collect();
        let logits = self.batched_logits(&refs)?;

        let b = prepared.len();
        let (nx, ny, nz) = (self.cfg.lengths.n_x, self.cfg.lengths.n_y, self.cfg.lengths.n_z);

        // text targets: t_x[1..], PAD-masked
        let mut text_targets = Vec::with_capacity(b * (nx - 1));
        let mut text_mask = Vec::with_capacity(b * (nx - 1));
        let mut scene_targets = Vec::with_capacity(b * ny);
        let mut image_targets = Vec::with_capacity(b * nz);
        for s in &prepared {
            let (tx, ty, tz) = s.unpack();
            for &t in &tx[1..] {
                text_targets.push(t);
                text_mask.push(if t == PAD { 0.0 } else { 1.0 });
            }
            scene_targets.extend_from_slice(&ty);
            image_targets.extend_from_slice(&tz);
        }

        let text_ce = logits
            .text
            .reshape(&[b * (nx - 1), self.cfg.vocabs.text])?
            .cross_entropy(&text_targets)?;
        let mask_t = Tensor::from_vec(&[b * (nx - 1)], text_mask.clone())?;
        let text_count: f64 = text_mask.iter().sum();
        let text_loss = text_ce
            .mul(&mask_t)?
            .sum()
            .scale(1.0 / text_count.max(1.0));
        let scene_loss = logits
            .scene
            .reshape(&[b * ny, self.cfg.vocabs.scene])?
            .cross_entropy(&scene_targets)?
            .mean();
        let image_loss = logits
            .image
            .reshape(&[b * nz, self.cfg.vocabs.image])?
            .cross_entropy(&image_targets)?
            .mean();

        let total = text_loss
            .scale(cfg.text_loss_weight)
            .add(&scene_loss.scale(cfg.scene_loss_weight))?
            .add(&image_loss.scale(cfg.image_loss_weight))?;
        total.backward()?;

        self.step += 1;
        let lr = cfg.lr_at(self.step);
        let adam = AdamConfig {
            lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            weight_decay: cfg.weight_decay,
            eps: 1e-8,
        };
        adam_step(self.params.as_mut_slice(), &adam, self.step)?;

        Ok(SbtLossReport {
            text_loss: text_loss.item(),
            scene_loss: scene_loss.item(),
            image_loss: image_loss.item(),
            total: total.item(),
            lr,
            cf_replaced,
        })
    }

    pub fn decoder(&self) -> SbtDecoder<'_> {
        SbtDecoder::new(self)
    }
}

// ── incremental inference path ─────────────────────────────────────────

/// Autoregressive evaluator with a per-layer KV cache. Feed tokens one at a
/// time; after each feed, the logits for the next position are available
/// under the next position's segment vocabulary.
pub struct SbtDecoder<'a> {
    model: &'a SbtModel,
    /// [layer][head] -> cached keys, hd floats per fed position.
    cache_k: Vec<Vec<Vec<f64>>>,
    cache_v: Vec<Vec<Vec<f64>>>,
    last_hidden: Vec<f64>,
    pos: usize,
}

impl<'a> SbtDecoder<'a> {
    fn new(model: &'a SbtModel) -> SbtDecoder<'a> {
        SbtDecoder {
            model,
            cache_k: vec![vec![Vec::new(); model.cfg.heads]; model.cfg.layers],
            cache_v: vec![vec![Vec::new(); model.cfg.heads]; model.cfg.layers],
            last_hidden: Vec::new(),
            pos: 0,
        }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    /// Row-major [1,k]x[k,n] product, same accumulation order as the graph
    /// matmul so incremental and batched passes agree bitwise.
    fn matvec(x: &[f64], w: &Tensor, out: &mut [f64]) {
        let k = w.shape()[0];
        let n = w.shape()[1];
        kernels::matmul(x, w.values(), 1, 1, k, n, out);
    }

    fn layer_norm(x: &[f64], g: &[f64], b: &[f64], eps: f64, out: &mut [f64]) {
        let d = x.len() as f64;
        let mean = x.iter().sum::<f64>() / d;
        let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + eps).sqrt();
        for (((o, &v), &gv), &bv) in out.iter_mut().zip(x).zip(g).zip(b) {
            *o = (v - mean) * inv * gv + bv;
        }
    }

    /// Consumes the token at the current position and advances the cache.
    pub fn feed(&mut self, unified_token: u32) -> Result<()> {
        let cfg = &self.model.cfg;
        let p = &self.model.params;
        if self.pos >= cfg.context() {
            return Err(Error::invalid("decoder: context exhausted"));
        }
        if unified_token as usize >= cfg.vocabs.unified() {
            return Err(Error::TokenOutOfRange {
                value: unified_token,
                limit: cfg.vocabs.unified(),
            });
        }
        let d = cfg.dim;
        let h = cfg.heads;
        let hd = d / h;
        let seg = match cfg.segment_of(self.pos) {
            Segment::Text => 0usize,
            Segment::Scene => 1,
            Segment::Image => 2,
        };
        let tok = p.tensor(self.model.tok_emb);
        let pos = p.tensor(self.model.pos_emb);
        let segt = p.tensor(self.model.seg_emb);
        let mut x: Vec<f64> = (0..d)
            .map(|j| {
                tok.values()[unified_token as usize * d + j] + pos.values()[self.pos * d + j]
                    + segt.values()[seg * d + j]
            })
            .collect();

        let scale = 1.0 / (hd as f64).sqrt();
        let mut normed = vec![0.0; d];
        let mut qkv = vec![0.0; 3 * d];
        for (l, blk) in self.model.blocks.iter().enumerate() {
            Self::layer_norm(
                &x,
                p.tensor(blk.ln1_g).values(),
                p.tensor(blk.ln1_b).values(),
                cfg.ln_eps,
                &mut normed,
            );
            Self::matvec(&normed, &p.tensor(blk.wqkv), &mut qkv);
            for (qv, bv) in qkv.iter_mut().zip(p.tensor(blk.bqkv).values()) {
                *qv += bv;
            }
            let mut merged = vec![0.0; d];
            for head in 0..h {
                let q: Vec<f64> = qkv[head * hd..(head + 1) * hd]
                    .iter()
                    .map(|&v| v * scale)
                    .collect();
                let k_new = &qkv[d + head * hd..d + (head + 1) * hd];
                let v_new = &qkv[2 * d + head * hd..2 * d + (head + 1) * hd];
                self.cache_k[l][head].extend_from_slice(k_new);
                self.cache_v[l][head].extend_from_slice(v_new);
                let keys = &self.cache_k[l][head];
                let vals = &self.cache_v[l][head];
                let steps = self.pos + 1;
                // scores over the visible prefix, same softmax order as the
                // masked graph path restricted to finite entries
                let mut scores = vec![0.0; steps];
                for (j, sc) in scores.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for t in 0..hd {
                        acc += q[t] * keys[j * hd + t];
                    }
                    *sc = acc;
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for sc in scores.iter_mut() {
                    *sc = (*sc - max).exp();
                    sum += *sc;
                }
                let inv = 1.0 / sum;
                for sc in scores.iter_mut() {
                    *sc *= inv;
                }
                let out = &mut merged[head * hd..(head + 1) * hd];
                for (j, &w) in scores.iter().enumerate() {
                    for t in 0..hd {
                        out[t] += w * vals[j * hd + t];
                    }
                }
            }
            let mut proj = vec![0.0; d];
            Self::matvec(&merged, &p.tensor(blk.wproj), &mut proj);
            for ((xv, pv), bv) in x.iter_mut().zip(&proj).zip(p.tensor(blk.bproj).values()) {
                *xv += pv + bv;
            }

            Self::layer_norm(
                &x,
                p.tensor(blk.ln2_g).values(),
                p.tensor(blk.ln2_b).values(),
                cfg.ln_eps,
                &mut normed,
            );
            let mut mid = vec![0.0; 4 * d];
            Self::matvec(&normed, &p.tensor(blk.w1), &mut mid);
            for (mv, bv) in mid.iter_mut().zip(p.tensor(blk.b1).values()) {
                *mv = (*mv + bv).max(0.0);
            }
            let mut mlp = vec![0.0; d];
            Self::matvec(&mid, &p.tensor(blk.w2), &mut mlp);
            for ((xv, mv), bv) in x.iter_mut().zip(&mlp).zip(p.tensor(blk.b2).values()) {
                *xv += mv + bv;
            }
        }
        let mut hidden = vec![0.0; d];
        Self::layer_norm(
            &x,
            p.tensor(self.model.lnf_g).values(),
            p.tensor(self.model.lnf_b).values(),
            cfg.ln_eps,
            &mut hidden,
        );
        self.last_hidden = hidden;
        self.pos += 1;
        Ok(())
    }

    /// Logits for the token at the current (not yet fed) position, under
    /// that position's segment vocabulary. None once the context is full.
    pub fn next_logits(&self) -> Option<(Segment, Vec<f64>)> {
        if self.pos == 0 || self.pos >= self.model.cfg.context() {
            return None;
        }
        let seg = self.model.cfg.segment_of(self.pos);
        let head = match seg {
            Segment::Text => self.model.head_text,
            Segment::Scene => self.model.head_scene,
            Segment::Image => self.model.head_image,
        };
        let w = self.model.params.tensor(head);
        let mut out = vec![0.0; w.shape()[1]];
        Self::matvec(&self.last_hidden, &w, &mut out);
        Some((seg, out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_vocabs() -> SegmentVocabs {
        SegmentVocabs {
            text: 12,
            scene: 10,
            image: 14,
        }
    }

    fn tiny_cfg() -> SbtConfig {
        SbtConfig {
            layers: 2,
            heads: 2,
            dim: 16,
            lengths: SegmentLengths {
                n_x: 4,
                n_y: 3,
                n_z: 5,
            },
            vocabs: tiny_vocabs(),
            ln_eps: 1e-5,
        }
    }

    fn tiny_seq(seed: u64, cfg: &SbtConfig) -> TokenSequence {
        let mut rng = SeedRng::new(seed);
        let text: Vec<u32> = (0..cfg.lengths.n_x)
            .map(|_| rng.below(cfg.vocabs.text) as u32)
            .collect();
        let scene: Vec<u32> = (0..cfg.lengths.n_y)
            .map(|_| rng.below(cfg.vocabs.scene) as u32)
            .collect();
        let image: Vec<u32> = (0..cfg.lengths.n_z)
            .map(|_| rng.below(cfg.vocabs.image) as u32)
            .collect();
        pack(&text, &scene, &image, cfg.lengths, cfg.vocabs).unwrap()
    }

    #[test]
    fn pack_concatenates_with_offsets() {
        let cfg = tiny_cfg();
        let seq = pack(
            &[1, 2, 0, 3],
            &[0, 9, 5],
            &[13, 0, 1, 2, 3],
            cfg.lengths,
            cfg.vocabs,
        )
        .unwrap();
        assert_eq!(seq.unified().len(), 12);
        assert_eq!(seq.unified()[0], 1);
        assert_eq!(seq.unified()[4], 12); // scene 0 -> +12
        assert_eq!(seq.unified()[7], 12 + 10 + 13); // image 13 -> +22
        let (tx, ty, tz) = seq.unpack();
        assert_eq!(tx, vec![1, 2, 0, 3]);
        assert_eq!(ty, vec![0, 9, 5]);
        assert_eq!(tz, vec![13, 0, 1, 2, 3]);
    }

    #[test]
    fn full_scale_sequence_has_1536_positions() {
        let cfg = SbtConfig::full_scale();
        assert_eq!(cfg.context(), 1536);
        assert_eq!(cfg.layers, 48);
        assert_eq!(cfg.heads, 48);
        assert_eq!(cfg.dim, 2560);
        assert_eq!(
            (cfg.lengths.n_x, cfg.lengths.n_y, cfg.lengths.n_z),
            (256, 256, 1024)
        );
    }

    #[test]
    fn desk_sequence_has_144_positions() {
        let cfg = SbtConfig::desk(tiny_vocabs());
        assert_eq!(cfg.context(), 144);
    }

    #[test]
    fn pack_rejects_wrong_lengths() {
        let cfg = tiny_cfg();
        assert!(pack(&[0; 3], &[0; 3], &[0; 5], cfg.lengths, cfg.vocabs).is_err());
    }

    #[test]
    fn pack_rejects_out_of_vocab() {
        let cfg = tiny_cfg();
        assert!(pack(&[99, 0, 0, 0], &[0; 3], &[0; 5], cfg.lengths, cfg.vocabs).is_err());
    }

    #[test]
    fn segment_schedule() {
        let cfg = tiny_cfg();
        assert_eq!(cfg.segment_of(0), Segment::Text);
        assert_eq!(cfg.segment_of(3), Segment::Text);
        assert_eq!(cfg.segment_of(4), Segment::Scene);
        assert_eq!(cfg.segment_of(7), Segment::Image);
        // last text position predicts the first scene token
        assert_eq!(cfg.predicted_segment(cfg.lengths.n_x - 1), Some(Segment::Scene));
        assert_eq!(cfg.predicted_segment(cfg.context() - 1), None);
    }

    #[test]
    fn logit_shapes_follow_segments() {
        let cfg = tiny_cfg();
        let model = SbtModel::new(cfg.clone(), 7).unwrap();
        let out = model.forward_logits(&tiny_seq(1, &cfg)).unwrap();
        assert_eq!(out.text.shape(), &[1, 3, 12]);
        assert_eq!(out.scene.shape(), &[1, 3, 10]);
        assert_eq!(out.image.shape(), &[1, 5, 14]);
        for t in [&out.text, &out.scene, &out.image] {
            assert!(t.values().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn causality_is_bit_exact() {
        let cfg = tiny_cfg();
        let model = SbtModel::new(cfg.clone(), 8).unwrap();
        let base = tiny_seq(2, &cfg);
        let base_logits = model.forward_logits(&base).unwrap();
        // perturb the first image token (position 7)
        let (tx, ty, mut tz) = base.unpack();
        tz[0] = (tz[0] + 1) % cfg.vocabs.image as u32;
        let perturbed = pack(&tx, &ty, &tz, cfg.lengths, cfg.vocabs).unwrap();
        let new_logits = model.forward_logits(&perturbed).unwrap();
        // positions < 7: all text rows (0..3) and scene rows (3..6)
        let same = |a: &Tensor, b: &Tensor| {
            a.values()
                .iter()
                .zip(b.values())
                .all(|(x, y)| x.to_bits() == y.to_bits())
        };
        assert!(same(&base_logits.text, &new_logits.text));
        assert!(same(&base_logits.scene, &new_logits.scene));
        assert!(!same(&base_logits.image, &new_logits.image));
    }

    #[test]
    fn decoder_matches_graph_forward_bitwise() {
        let cfg = tiny_cfg();
        let model = SbtModel::new(cfg.clone(), 9).unwrap();
        let seq = tiny_seq(3, &cfg);
        let graph = model.forward_logits(&seq).unwrap();
        let mut dec = model.decoder();
        let t = cfg.context();
        for (pos, &tok) in seq.unified().iter().enumerate() {
            dec.feed(tok).unwrap();
            if pos + 1 >= t {
                break;
            }
            let (seg, logits) = dec.next_logits().unwrap();
            let expected: Vec<f64> = match seg {
                Segment::Text => {
                    let v = cfg.vocabs.text;
                    graph.text.values()[pos * v..(pos + 1) * v].to_vec()
                }
                Segment::Scene => {
                    let v = cfg.vocabs.scene;
                    let row = pos - (cfg.lengths.n_x - 1);
                    graph.scene.values()[row * v..(row + 1) * v].to_vec()
                }
                Segment::Image => {
                    let v = cfg.vocabs.image;
                    let row = pos - (cfg.lengths.n_x + cfg.lengths.n_y - 1);
                    graph.image.values()[row * v..(row + 1) * v].to_vec()
                }
            };
            assert_eq!(
                logits.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                expected.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                "divergence at position {pos}"
            );
        }
    }

    #[test]
    fn p_cf_zero_matches_cf_off() {
        let cfg = tiny_cfg();
        let seqs: Vec<TokenSequence> = (0..3).map(|s| tiny_seq(s, &cfg)).collect();
        let mut tcfg = TrainConfig::desk();
        tcfg.p_cf = 0.0;
        let mut m1 = SbtModel::new(cfg.clone(), 10).unwrap();
        let mut m2 = SbtModel::new(cfg.clone(), 10).unwrap();
        let mut rng1 = SeedRng::new(1);
        let mut rng2 = SeedRng::new(1);
        let a = m1.train_step(&seqs, &tcfg, CfMode::On, &mut rng1).unwrap();
        let b = m2.train_step(&seqs, &tcfg, CfMode::Off, &mut rng2).unwrap();
        assert_eq!(a.total.to_bits(), b.total.to_bits());
        assert_eq!(a.cf_replaced, 0);
    }

    #[test]
    fn p_cf_one_pads_every_sample() {
        let cfg = tiny_cfg();
        let seqs: Vec<TokenSequence> = (0..3).map(|s| tiny_seq(s, &cfg)).collect();
        let mut tcfg = TrainConfig::desk();
        tcfg.p_cf = 1.0;
        let mut model = SbtModel::new(cfg, 11).unwrap();
        let mut rng = SeedRng::new(2);
        let report = model.train_step(&seqs, &tcfg, CfMode::On, &mut rng).unwrap();
        assert_eq!(report.cf_replaced, 3);
        // every text target is PAD, so the text loss is masked to zero
        assert_eq!(report.text_loss, 0.0);
    }

    #[test]
    fn train_step_is_seed_reproducible() {
        let cfg = tiny_cfg();
        let seqs: Vec<TokenSequence> = (0..4).map(|s| tiny_seq(s, &cfg)).collect();
        let tcfg = TrainConfig::desk();
        let run = || {
            let mut model = SbtModel::new(cfg.clone(), 12).unwrap();
            let mut rng = SeedRng::new(3);
            let mut out = Vec::new();
            for _ in 0..3 {
                out.push(
                    model
                        .train_step(&seqs, &tcfg, CfMode::On, &mut rng)
                        .unwrap()
                        .total
                        .to_bits(),
                );
            }
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn loss_decomposes_into_segment_terms() {
        let cfg = tiny_cfg();
        let seqs: Vec<TokenSequence> = (0..2).map(|s| tiny_seq(s + 9, &cfg)).collect();
        let mut tcfg = TrainConfig::desk();
        tcfg.image_loss_weight = 7.0;
        let mut model = SbtModel::new(cfg, 13).unwrap();
        let mut rng = SeedRng::new(4);
        let r = model.train_step(&seqs, &tcfg, CfMode::Off, &mut rng).unwrap();
        let recombined = r.text_loss + r.scene_loss + 7.0 * r.image_loss;
        assert!((recombined - r.total).abs() < 1e-12);
    }

    #[test]
    fn overfit_smoke_loss_decreases() {
        let cfg = tiny_cfg();
        let seqs: Vec<TokenSequence> = (0..4).map(|s| tiny_seq(s, &cfg)).collect();
        let mut tcfg = TrainConfig::desk();
        tcfg.lr_switch_step = 1_000_000;
        tcfg.lr_start = 3e-3;
        let mut model = SbtModel::new(cfg, 14).unwrap();
        let mut rng = SeedRng::new(5);
        let first = model.train_step(&seqs, &tcfg, CfMode::Off, &mut rng).unwrap();
        let mut last = first;
        for _ in 0..60 {
            last = model.train_step(&seqs, &tcfg, CfMode::Off, &mut rng).unwrap();
        }
        assert!(last.total < 0.3 * first.total, "{} -> {}", first.total, last.total);
    }

    #[test]
    fn lr_schedule_switches() {
        let cfg = TrainConfig::desk();
        assert_eq!(cfg.lr_at(0), 4.5e-4);
        assert_eq!(cfg.lr_at(cfg.lr_switch_step), 1.5e-4);
        let full = TrainConfig::full_scale();
        assert_eq!(full.lr_switch_step, 40_000);
        assert_eq!(full.steps + full.cf_steps, 170_000);
        assert_eq!(full.cf_steps, 30_000);
        assert_eq!(full.p_cf, 0.2);
        assert_eq!(full.batch, 1024);
        assert_eq!(full.image_loss_weight / full.text_loss_weight, 7.0);
    }

    #[test]
    fn invalid_p_cf_rejected() {
        let mut cfg = TrainConfig::desk();
        cfg.p_cf = 1.5;
        assert!(cfg.validate().is_err());
    }
}
