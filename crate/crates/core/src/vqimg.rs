//! VQ-IMG: the image tokenizer. Conv encoder/decoder over RGB in [-1, 1]
//! with L1 reconstruction plus face-aware and object-aware feature-matching
//! losses computed on crops through fixed multi-scale extractors. The
//! doubled resolution mode adds one more stride-2 encoder layer and one
//! more upsample decoder layer, keeping the token grid unchanged.

use crate::error::{Error, Result};
use crate::ndgrad::{adam_step, AdamConfig, Tensor};
use crate::nn::{add_conv, apply_conv, conv_init, ConvIdx, Params};
use crate::rng::SeedRng;
use crate::scene::{SceneMap, NULL_CLASS, NULL_INSTANCE};
use crate::vq::{lookup, quantize, Codebook, TokenGrid};

/// Spatial side the extractors consume; crops are resized to this.
pub const EXTRACTOR_INPUT: usize = 32;
/// Feature levels per extractor pyramid.
pub const EXTRACTOR_LEVELS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResolutionMode {
    Base,
    /// One extra down/up-sample pair: same token grid from a 2x input.
    Doubled,
}

#[derive(Debug, Clone)]
pub struct VqImgConfig {
    pub latent_dim: usize,
    /// Base-mode channel widths, full resolution first.
    pub widths: Vec<usize>,
    pub codebook_size: usize,
    pub resolution_mode: ResolutionMode,
    pub beta_commit: f64,
    pub k_f: usize,
    pub k_o: usize,
    pub face_loss_enabled: bool,
    pub object_loss_enabled: bool,
    /// Per-level face feature-matching weights.
    pub alpha_face: Vec<f64>,
    /// Per-level object feature-matching weights.
    pub alpha_object: Vec<f64>,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
}

impl VqImgConfig {
    pub fn desk() -> VqImgConfig {
        VqImgConfig {
            latent_dim: 32,
            widths: vec![32, 64, 64],
            codebook_size: 64,
            resolution_mode: ResolutionMode::Base,
            beta_commit: 0.25,
            k_f: 4,
            k_o: 8,
            face_loss_enabled: true,
            object_loss_enabled: true,
            alpha_face: alpha_face_preset(),
            alpha_object: vec![1.0 / EXTRACTOR_LEVELS as f64; EXTRACTOR_LEVELS],
            lr: 2e-3,
            steps: 320,
            batch: 6,
        }
    }

    /// Full-scale 256^2 preset: channel multiplier [1,1,2,4] over width 128,
    /// 8192-entry dictionary, 800k iterations at batch 192.
    pub fn full_scale_256() -> VqImgConfig {
        VqImgConfig {
            latent_dim: 256,
            widths: vec![128, 128, 256, 512],
            codebook_size: 8192,
            resolution_mode: ResolutionMode::Base,
            beta_commit: 0.25,
            k_f: 4,
            k_o: 8,
            face_loss_enabled: true,
            object_loss_enabled: false,
            alpha_face: alpha_face_preset(),
            alpha_object: vec![1.0 / EXTRACTOR_LEVELS as f64; EXTRACTOR_LEVELS],
            lr: 4.5e-4,
            steps: 800_000,
            batch: 192,
        }
    }

    /// Full-scale 512^2 preset: multiplier [1,1,2,4,4] (the extra down/up
    /// pair), 940k iterations at batch 128, object-aware loss on.
    pub fn full_scale_512() -> VqImgConfig {
        VqImgConfig {
            resolution_mode: ResolutionMode::Doubled,
            object_loss_enabled: true,
            steps: 940_000,
            batch: 128,
            ..VqImgConfig::full_scale_256()
        }
    }

    /// Widths under the active resolution mode; doubled prepends one more
    /// full-resolution level.
    pub fn mode_widths(&self) -> Vec<usize> {
        match self.resolution_mode {
            ResolutionMode::Base => self.widths.clone(),
            ResolutionMode::Doubled => {
                let mut w = vec![self.widths[0]];
                w.extend_from_slice(&self.widths);
                w
            }
        }
    }

    pub fn num_down(&self) -> usize {
        self.mode_widths().len() - 1
    }

    pub fn spatial_factor(&self) -> usize {
        1 << self.num_down()
    }
}

/// The appendix face-loss schedule over the five pyramid levels.
pub fn alpha_face_preset() -> Vec<f64> {
    let a1 = 0.1;
    let a2 = 0.25;
    vec![a1, a2 * 0.01, a2 * 0.1, a2 * 0.2, a2 * 0.02]
}

/// Axis-aligned crop with its provenance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub role: CropRole,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropRole {
    Face,
    Object,
}

impl CropBox {
    pub fn area(&self) -> usize {
        self.w * self.h
    }
}

pub type CropSet = Vec<CropBox>;

/// Fixed-weight conv pyramid emitting `EXTRACTOR_LEVELS` feature maps of
/// strictly decreasing spatial size. Stands in for a pretrained embedding
/// network: the feature-matching losses need fixed multi-scale features,
/// not pretrained semantics, at desk scale.
#[derive(Debug)]
pub struct FeatureExtractor {
    pub role: CropRole,
    params: Params,
    layers: Vec<ConvIdx>,
}

impl FeatureExtractor {
    pub fn new(role: CropRole, seed: u64) -> FeatureExtractor {
        let tag = match role {
            CropRole::Face => 0xface,
            CropRole::Object => 0x0b1e,
        };
        let mut rng = SeedRng::substream(seed, tag);
        let mut params = Params::new();
        let chans = [3usize, 8, 16, 16, 32, 32];
        let mut layers = Vec::new();
        for l in 0..EXTRACTOR_LEVELS {
            let (ic, oc) = (chans[l], chans[l + 1]);
            let w = params.add_frozen(
                format!("fe{l}.w"),
                &[oc, ic, 3, 3],
                conv_init(&mut rng, oc, ic),
            );
            let b = params.add_frozen(format!("fe{l}.b"), &[oc], vec![0.0; oc]);
            layers.push(ConvIdx { w, b, stride: 2 });
        }
        FeatureExtractor { role, params, layers }
    }

    /// Multi-scale activations for a [1, 3, S, S] input.
    pub fn extract(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut maps = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            h = apply_conv(&self.params, &h, *layer)?.relu();
            maps.push(h.clone());
        }
        Ok(maps)
    }
}

/// Tight bounding boxes of 4-connected components of face-group pixels,
/// largest areas first (ties by top edge then left edge), truncated to k_f.
pub fn locate_faces(scene: &SceneMap, k_f: usize) -> CropSet {
    let blobs = connected_components(scene.h, scene.w, |i| scene.face[i] != NULL_CLASS);
    rank_boxes(blobs, k_f, CropRole::Face)
}

/// Bounding boxes of panoptic "things" (pixels carrying an instance id),
/// one box per instance, largest first, truncated to k_o.
pub fn locate_objects(scene: &SceneMap, k_o: usize) -> CropSet {
    let mut by_instance: std::collections::BTreeMap<u16, (usize, usize, usize, usize, usize)> =
        Default::default();
    for y in 0..scene.h {
        for x in 0..scene.w {
            let inst = scene.instance[scene.idx(y, x)];
            if inst == NULL_INSTANCE {
                continue;
            }
            let e = by_instance.entry(inst).or_insert((x, y, x, y, 0));
            e.0 = e.0.min(x);
            e.1 = e.1.min(y);
            e.2 = e.2.max(x);
            e.3 = e.3.max(y);
            e.4 += 1;
        }
    }
    let boxes = by_instance
        .into_values()
        .map(|(x0, y0, x1, y1, _)| (x0, y0, x1, y1))
        .collect();
    rank_boxes(boxes, k_o, CropRole::Object)
}

fn rank_boxes(boxes: Vec<(usize, usize, usize, usize)>, k: usize, role: CropRole) -> CropSet {
    let mut crops: CropSet = boxes
        .into_iter()
        .map(|(x0, y0, x1, y1)| CropBox {
            x: x0,
            y: y0,
            w: x1 - x0 + 1,
            h: y1 - y0 + 1,
            role,
        })
        .collect();
    crops.sort_by(|a, b| {
        b.area()
            .cmp(&a.area())
            .then(a.y.cmp(&b.y))
            .then(a.x.cmp(&b.x))
    });
    crops.truncate(k);
    crops
}

fn connected_components(
    h: usize,
    w: usize,
    mask: impl Fn(usize) -> bool,
) -> Vec<(usize, usize, usize, usize)> {
    let mut seen = vec![false; h * w];
    let mut boxes = Vec::new();
    for start in 0..h * w {
        if seen[start] || !mask(start) {
            continue;
        }
        let (mut x0, mut y0, mut x1, mut y1) = (start % w, start / w, start % w, start / w);
        let mut queue = vec![start];
        seen[start] = true;
        while let Some(i) = queue.pop() {
            let (y, x) = (i / w, i % w);
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
            let mut push = |j: usize| {
                if !seen[j] && mask(j) {
                    seen[j] = true;
                    queue.push(j);
                }
            };
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < w {
                push(i + 1);
            }
            if y > 0 {
                push(i - w);
            }
            if y + 1 < h {
                push(i + w);
            }
        }
        boxes.push((x0, y0, x1, y1));
    }
    boxes
}

/// Sum over crops and pyramid levels of the weighted mean-abs difference of
/// extractor activations between the reconstruction and the ground truth.
/// Degenerate crops contribute nothing; no crops means a zero loss.
pub fn feature_match_loss(
    crops: &CropSet,
    image: &Tensor,
    reconstruction: &Tensor,
    extractor: &FeatureExtractor,
    alpha: &[f64],
) -> Result<Tensor> {
    if alpha.len() != EXTRACTOR_LEVELS {
        return Err(Error::invalid(format!(
            "feature loss: {} level weights, want {}",
            alpha.len(),
            EXTRACTOR_LEVELS
        )));
    }
    if image.shape() != reconstruction.shape() {
        return Err(Error::shape(
            "feature loss",
            format!("{:?} vs {:?}", image.shape(), reconstruction.shape()),
        ));
    }
    let mut total = Tensor::scalar(0.0);
    for crop in crops {
        if crop.w == 0 || crop.h == 0 {
            continue;
        }
        let truth = extractor.extract(&crop_resized(image, crop)?)?;
        let recon = extractor.extract(&crop_resized(reconstruction, crop)?)?;
        for (l, (ft, fr)) in truth.iter().zip(&recon).enumerate() {
            total = total.add(&fr.l1(ft)?.mean().scale(alpha[l]))?;
        }
    }
    Ok(total)
}

/// Face-aware feature matching over the face extractor.
pub fn face_loss(
    crops: &CropSet,
    image: &Tensor,
    reconstruction: &Tensor,
    fe: &FeatureExtractor,
    alpha_face: &[f64],
) -> Result<Tensor> {
    feature_match_loss(crops, image, reconstruction, fe, alpha_face)
}

/// Object-aware feature matching over the object extractor; crops are taken
/// on the reconstruction at the same coordinates as the input.
pub fn object_loss(
    crops: &CropSet,
    image: &Tensor,
    reconstruction: &Tensor,
    vgg: &FeatureExtractor,
    alpha_object: &[f64],
) -> Result<Tensor> {
    feature_match_loss(crops, image, reconstruction, vgg, alpha_object)
}

fn crop_resized(image: &Tensor, crop: &CropBox) -> Result<Tensor> {
    let s = image.shape();
    let cropped = image
        .slice(1, crop.y, crop.h)?
        .slice(2, crop.x, crop.w)?
        .reshape(&[1, s[0], crop.h, crop.w])?;
    cropped.resize_bilinear(EXTRACTOR_INPUT, EXTRACTOR_INPUT)
}

/// Per-term loss report for one image training step.
#[derive(Debug, Clone, Copy)]
pub struct ImgLossReport {
    pub l1: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub face: f64,
    pub object: f64,
    pub total: f64,
}

#[derive(Debug)]
pub struct VqImgModel {
    pub cfg: VqImgConfig,
    params: Params,
    encoder: Vec<ConvIdx>,
    decoder: Vec<ConvIdx>,
    book: usize,
    step: usize,
}

impl VqImgModel {
    pub fn new(cfg: VqImgConfig, seed: u64) -> VqImgModel {
        let mut rng = SeedRng::substream(seed, 0x196);
        let mut params = Params::new();
        let widths = cfg.mode_widths();
        let deepest = *widths.last().unwrap();
        let num_down = widths.len() - 1;

        let mut encoder = Vec::new();
        encoder.push(add_conv(&mut params, &mut rng, "enc.stem", 3, widths[0], 1));
        for i in 0..num_down {
            encoder.push(add_conv(
                &mut params,
                &mut rng,
                &format!("enc.down{i}"),
                widths[i],
                widths[i + 1],
                2,
            ));
        }
        encoder.push(add_conv(&mut params, &mut rng, "enc.out", deepest, cfg.latent_dim, 1));

        let mut decoder = Vec::new();
        decoder.push(add_conv(&mut params, &mut rng, "dec.stem", cfg.latent_dim, deepest, 1));
        for i in (0..num_down).rev() {
            decoder.push(add_conv(
                &mut params,
                &mut rng,
                &format!("dec.up{i}"),
                widths[i + 1],
                widths[i],
                1,
            ));
        }
        decoder.push(add_conv(&mut params, &mut rng, "dec.out", widths[0], 3, 1));

        let book = params.add(
            "book",
            &[cfg.codebook_size, cfg.latent_dim],
            rng.normal_vec(cfg.codebook_size * cfg.latent_dim, 0.5),
        );

        VqImgModel {
            cfg,
            params,
            encoder,
            decoder,
            book,
            step: 0,
        }
    }

    pub fn codebook(&self) -> Result<Codebook> {
        Codebook::new(self.params.tensor(self.book))
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

    fn encode_latent(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.encoder.iter().enumerate() {
            h = apply_conv(&self.params, &h, *layer)?;
            if i + 1 < self.encoder.len() {
                h = h.relu();
            }
        }
        Ok(h)
    }

    /// Decoder with a bounded output nonlinearity: values land in [-1, 1].
    fn decode_latent(&self, z: &Tensor) -> Result<Tensor> {
        let mut h = z.clone();
        for (i, layer) in self.decoder.iter().enumerate() {
            let last = i + 1 == self.decoder.len();
            if i > 0 && !last {
                h = h.upsample2()?;
            }
            h = apply_conv(&self.params, &h, *layer)?;
            if !last {
                h = h.relu();
            }
        }
        Ok(h.tanh())
    }

    fn latent_rows(&self, z: &Tensor) -> Result<Tensor> {
        let s = z.shape().to_vec();
        z.permute(&[0, 2, 3, 1])?.reshape(&[s[0] * s[2] * s[3], s[1]])
    }

    fn rows_to_latent(&self, rows: &Tensor, b: usize, gh: usize, gw: usize) -> Result<Tensor> {
        rows.reshape(&[b, gh, gw, self.cfg.latent_dim])?
            .permute(&[0, 3, 1, 2])
    }

    /// Image [3, h, w] -> token grid; h and w must divide the total stride.
    pub fn img_encode(&self, image: &Tensor) -> Result<TokenGrid> {
        let s = image.shape().to_vec();
        let factor = self.cfg.spatial_factor();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::shape("img_encode", format!("want [3, h, w], got {:?}", s)));
        }
        if s[1] % factor != 0 || s[2] % factor != 0 {
            return Err(Error::shape(
                "img_encode",
                format!("{}x{} not divisible by stride {}", s[1], s[2], factor),
            ));
        }
        let x = image.reshape(&[1, 3, s[1], s[2]])?;
        let z = self.encode_latent(&x.detach())?;
        let (gh, gw) = (z.shape()[2], z.shape()[3]);
        let rows = self.latent_rows(&z)?;
        let q = quantize(&rows.detach(), &self.codebook()?, self.cfg.beta_commit)?;
        Ok(TokenGrid {
            h: gh,
            w: gw,
            tokens: q.indices,
        })
    }

    /// Token grid -> image tensor [3, h, w], values in [-1, 1].
    pub fn img_decode(&self, grid: &TokenGrid) -> Result<Tensor> {
        let rows = lookup(&grid.tokens, &self.codebook()?)?;
        let z = self.rows_to_latent(&rows.detach(), 1, grid.h, grid.w)?;
        let out = self.decode_latent(&z)?;
        let s = out.shape().to_vec();
        out.reshape(&[s[1], s[2], s[3]])
    }

    /// Initializes the codebook by k-means over encoder latents of a probe
    /// set, so training starts from a spread, in-distribution dictionary.
    pub fn seed_codebook(&mut self, images: &[Tensor], seed: u64) -> Result<()> {
        if images.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let x = batch_images(images)?;
        let z = self.encode_latent(&x.detach())?;
        let rows = self.latent_rows(&z)?.detach();
        let mut rng = SeedRng::substream(seed, 0xb001);
        let entries = crate::vq::kmeans_entries(&rows, self.cfg.codebook_size, 3, &mut rng)?;
        self.params.as_mut_slice()[self.book].set_values(entries)
    }

    /// One Adam step on L1 + codebook + commitment + face + object losses.
    pub fn train_step(
        &mut self,
        batch: &[(Tensor, SceneMap)],
        face_extractor: &FeatureExtractor,
        object_extractor: &FeatureExtractor,
    ) -> Result<ImgLossReport> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let images: Vec<Tensor> = batch.iter().map(|(i, _)| i.clone()).collect();
        let x = batch_images(&images)?;
        let z = self.encode_latent(&x)?;
        let (b, gh, gw) = (z.shape()[0], z.shape()[2], z.shape()[3]);
        let rows = self.latent_rows(&z)?;
        let q = quantize(&rows, &self.codebook()?, self.cfg.beta_commit)?;
        let zq = self.rows_to_latent(&q.quantized, b, gh, gw)?;
        let recon = self.decode_latent(&zq)?;

        let l1 = recon.l1(&x.detach())?.mean();
        let mut total = l1.add(&q.codebook_loss)?.add(&q.commitment_loss)?;

        let mut face_total = 0.0;
        let mut object_total = 0.0;
        let s = x.shape().to_vec();
        for (i, (image, scene)) in batch.iter().enumerate() {
            let recon_i = recon.slice(0, i, 1)?.reshape(&[s[1], s[2], s[3]])?;
            if self.cfg.face_loss_enabled {
                let crops = locate_faces(scene, self.cfg.k_f);
                let lf = face_loss(&crops, image, &recon_i, face_extractor, &self.cfg.alpha_face)?;
                face_total += lf.item();
                total = total.add(&lf)?;
            }
            if self.cfg.object_loss_enabled {
                let crops = locate_objects(scene, self.cfg.k_o);
                let lo = object_loss(
                    &crops,
                    image,
                    &recon_i,
                    object_extractor,
                    &self.cfg.alpha_object,
                )?;
                object_total += lo.item();
                total = total.add(&lo)?;
            }
        }
        total.backward()?;

        self.step += 1;
        let adam = AdamConfig {
            lr: self.cfg.lr,
            ..AdamConfig::default()
        };
        adam_step(self.params.as_mut_slice(), &adam, self.step)?;

        Ok(ImgLossReport {
            l1: l1.item(),
            codebook: q.codebook_loss.item(),
            commitment: q.commitment_loss.item(),
            face: face_total,
            object: object_total,
            total: total.item(),
        })
    }
}

/// Stacks [3, h, w] images into [b, 3, h, w].
pub fn batch_images(images: &[Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or(Error::EmptyBatch)?;
    let s = first.shape().to_vec();
    let mut values = Vec::with_capacity(images.len() * first.len());
    for img in images {
        if img.shape() != s.as_slice() {
            return Err(Error::shape(
                "batch_images",
                format!("{:?} vs {:?}", img.shape(), s),
            ));
        }
        values.extend_from_slice(img.values());
    }
    Tensor::from_vec(&[images.len(), s[0], s[1], s[2]], values)
}
