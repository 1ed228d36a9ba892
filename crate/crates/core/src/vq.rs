//! Shared vector-quantization layer: nearest-entry lookup with a
//! straight-through gradient, plus the codebook and commitment losses that
//! train both tokenizers.
//!
//! The codebook learns by gradient on the codebook loss; there are no EMA
//! updates and no dead-entry re-seeding (usage is monitored by the harness
//! instead).

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

/// Ordered embedding table [size, dim].
#[derive(Debug, Clone)]
pub struct Codebook {
    entries: Tensor,
    size: usize,
    dim: usize,
}

impl Codebook {
    pub fn new(entries: Tensor) -> Result<Codebook> {
        let shape = entries.shape().to_vec();
        if shape.len() != 2 || shape[0] < 2 {
            return Err(Error::invalid(format!(
                "codebook: want [size >= 2, dim], got {:?}",
                shape
            )));
        }
        if entries.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("codebook entries"));
        }
        Ok(Codebook {
            size: shape[0],
            dim: shape[1],
            entries,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The entry table as a tensor (differentiable when built from a
    /// trainable parameter).
    pub fn entries(&self) -> &Tensor {
        &self.entries
    }

    pub fn entry(&self, index: usize) -> &[f64] {
        &self.entries.values()[index * self.dim..(index + 1) * self.dim]
    }
}

/// Spatial grid of codebook indices, row-major.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TokenGrid {
    pub h: usize,
    pub w: usize,
    pub tokens: Vec<u32>,
}

impl TokenGrid {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Output of [`quantize`].
#[derive(Debug)]
pub struct QuantizeResult {
    /// Nearest-entry index per input row.
    pub indices: Vec<u32>,
    /// Exact entry copies with straight-through gradient to the latents.
    pub quantized: Tensor,
    /// mean over elements of (sg(latent) - entry)^2; trains the codebook.
    pub codebook_loss: Tensor,
    /// beta * mean over elements of (latent - sg(entry))^2; trains the encoder.
    pub commitment_loss: Tensor,
}

/// Squared Euclidean distance, accumulated in index order.
#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

/// Index of the nearest entry; ties break to the lowest index.
fn nearest(row: &[f64], book: &Codebook) -> u32 {
    let mut best = 0u32;
    let mut best_d = f64::INFINITY;
    for e in 0..book.size {
        let d = sq_dist(row, book.entry(e));
        if d < best_d {
            best_d = d;
            best = e as u32;
        }
    }
    best
}

/// Maps each latent row [n, dim] to its nearest codebook entry.
///
/// The forward output holds exact copies of the selected entries while the
/// gradient of any downstream loss w.r.t. the latents passes through
/// unchanged.
pub fn quantize(latents: &Tensor, book: &Codebook, beta_commit: f64) -> Result<QuantizeResult> {
    let shape = latents.shape();
    if shape.len() != 2 || shape[1] != book.dim {
        return Err(Error::shape(
            "quantize",
            format!("latents {:?} vs codebook dim {}", shape, book.dim),
        ));
    }
    let n = shape[0];
    let mut indices = vec![0u32; n];
    let rows = latents.values();
    if n * book.size * book.dim >= 1 << 14 {
        indices
            .par_iter_mut()
            .enumerate()
            .for_each(|(i, out)| *out = nearest(&rows[i * book.dim..(i + 1) * book.dim], book));
    } else {
        for (i, out) in indices.iter_mut().enumerate() {
            *out = nearest(&rows[i * book.dim..(i + 1) * book.dim], book);
        }
    }

    let mut entry_copies = Vec::with_capacity(n * book.dim);
    for &i in &indices {
        entry_copies.extend_from_slice(book.entry(i as usize));
    }
    let quantized = latents.straight_through(entry_copies.clone())?;

    // codebook loss: gradient reaches the entries through the lookup
    let selected = book.entries.embed(&indices)?;
    let diff_cb = selected.sub(&latents.detach())?;
    let codebook_loss = diff_cb.mul(&diff_cb)?.mean();

    // commitment loss: gradient reaches the latents only
    let frozen = Tensor::from_vec(shape, entry_copies)?;
    let diff_c = latents.sub(&frozen)?;
    let commitment_loss = diff_c.mul(&diff_c)?.mean().scale(beta_commit);

    Ok(QuantizeResult {
        indices,
        quantized,
        codebook_loss,
        commitment_loss,
    })
}

/// Entry rows for a grid of indices; differentiable w.r.t. the entries.
pub fn lookup(indices: &[u32], book: &Codebook) -> Result<Tensor> {
    book.entries.embed(indices)
}

/// k-means++ seeding plus a few Lloyd iterations over latent rows.
/// Spreads initial entries across the latent distribution so training
/// does not start with a collapsed dictionary (initialization only; there
/// is no re-seeding later).
pub fn kmeans_entries(
    rows: &Tensor,
    k: usize,
    lloyd_iters: usize,
    rng: &mut crate::rng::SeedRng,
) -> Result<Vec<f64>> {
    let shape = rows.shape();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::shape("kmeans", format!("{:?}", shape)));
    }
    let (n, dim) = (shape[0], shape[1]);
    let data = rows.values();
    let row = |i: usize| &data[i * dim..(i + 1) * dim];

    // k-means++ seeding
    let mut centers: Vec<f64> = Vec::with_capacity(k * dim);
    let first = rng.below(n);
    centers.extend_from_slice(row(first));
    let mut best_d: Vec<f64> = (0..n).map(|i| sq_dist(row(i), row(first))).collect();
    for _ in 1..k {
        let total: f64 = best_d.iter().sum();
        let pick = if total <= 0.0 {
            // all points covered: duplicate a random row with jitter below
            rng.below(n)
        } else {
            let mut draw = rng.uniform() * total;
            let mut chosen = n - 1;
            for (i, &d) in best_d.iter().enumerate() {
                draw -= d;
                if draw <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        let c = centers.len() / dim;
        centers.extend_from_slice(row(pick));
        for i in 0..n {
            let d = sq_dist(row(i), &centers[c * dim..(c + 1) * dim]);
            if d < best_d[i] {
                best_d[i] = d;
            }
        }
    }

    // Lloyd refinement
    let mut assign = vec![0usize; n];
    for _ in 0..lloyd_iters {
        for (i, a) in assign.iter_mut().enumerate() {
            let r = row(i);
            let mut best = 0usize;
            let mut best_dist = f64::INFINITY;
            for c in 0..k {
                let d = sq_dist(r, &centers[c * dim..(c + 1) * dim]);
                if d < best_dist {
                    best_dist = d;
                    best = c;
                }
            }
            *a = best;
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, &v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..dim {
                    centers[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                }
            }
        }
    }
    // tiny jitter separates duplicated centers
    for v in centers.iter_mut() {
        *v += rng.normal() * 1e-3;
    }
    Ok(centers)
}

/// Fraction of entries referenced at least once.
pub fn usage_fraction<I: IntoIterator<Item = u32>>(indices: I, size: usize) -> f64 {
    let mut used = vec![false; size];
    for i in indices {
        used[i as usize] = true;
    }
    used.iter().filter(|&&u| u).count() as f64 / size as f64
}
