//! Small shared pieces for the three trainable models: a flat named
//! parameter store (checkpoint- and optimizer-friendly) and seeded weight
//! initializers.

use crate::error::{Error, Result};
use crate::ndgrad::{Parameter, Tensor};
use crate::rng::SeedRng;

/// Flat parameter store with stable order; models keep indices into it.
#[derive(Debug, Default)]
pub struct Params {
    items: Vec<Parameter>,
}

impl Params {
    pub fn new() -> Params {
        Params { items: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], values: Vec<f64>) -> usize {
        let p = Parameter::new(name, shape, values).expect("init shape/value mismatch");
        self.items.push(p);
        self.items.len() - 1
    }

    pub fn add_frozen(&mut self, name: impl Into<String>, shape: &[usize], values: Vec<f64>) -> usize {
        let p = Parameter::frozen(name, shape, values).expect("init shape/value mismatch");
        self.items.push(p);
        self.items.len() - 1
    }

    /// Current leaf tensor of a parameter (cheap Arc clone).
    pub fn tensor(&self, idx: usize) -> Tensor {
        self.items[idx].tensor.clone()
    }

    pub fn get(&self, idx: usize) -> &Parameter {
        &self.items[idx]
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn as_mut_slice(&mut self) -> &mut [Parameter] {
        &mut self.items
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.items.iter()
    }

    pub fn total_values(&self) -> usize {
        self.items.iter().map(|p| p.tensor.len()).sum()
    }

    /// Replaces values by name; every stored parameter must be present.
    pub fn load_named(&mut self, blobs: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        for p in &mut self.items {
            let (_, shape, values) = blobs
                .iter()
                .find(|(n, _, _)| *n == p.name)
                .ok_or_else(|| Error::format(format!("checkpoint: missing parameter `{}`", p.name)))?;
            if shape != p.tensor.shape() {
                return Err(Error::format(format!(
                    "checkpoint: `{}` shape {:?} != {:?}",
                    p.name,
                    shape,
                    p.tensor.shape()
                )));
            }
            p.set_values(values.clone())?;
        }
        Ok(())
    }

    pub fn dump_named(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        self.items
            .iter()
            .map(|p| (p.name.clone(), p.tensor.shape().to_vec(), p.tensor.values().to_vec()))
            .collect()
    }
}

/// He-style init for a 3x3 conv weight [oc, ic, 3, 3].
pub fn conv_init(rng: &mut SeedRng, oc: usize, ic: usize) -> Vec<f64> {
    let std = (2.0 / (ic as f64 * 9.0)).sqrt();
    rng.normal_vec(oc * ic * 9, std)
}

/// Gaussian init for a linear weight [fan_in, fan_out].
pub fn linear_init(rng: &mut SeedRng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let std = (1.0 / fan_in as f64).sqrt();
    rng.normal_vec(fan_in * fan_out, std)
}

/// Small-gaussian init for embedding tables.
pub fn embed_init(rng: &mut SeedRng, rows: usize, dim: usize) -> Vec<f64> {
    rng.normal_vec(rows * dim, 0.02)
}

/// A conv layer's parameter indices.
#[derive(Debug, Clone, Copy)]
pub struct ConvIdx {
    pub w: usize,
    pub b: usize,
    pub stride: usize,
}

pub fn add_conv(params: &mut Params, rng: &mut SeedRng, name: &str, ic: usize, oc: usize, stride: usize) -> ConvIdx {
    let w = params.add(format!("{name}.w"), &[oc, ic, 3, 3], conv_init(rng, oc, ic));
    let b = params.add(format!("{name}.b"), &[oc], vec![0.0; oc]);
    ConvIdx { w, b, stride }
}

pub fn apply_conv(params: &Params, x: &Tensor, layer: ConvIdx) -> Result<Tensor> {
    x.conv2d(&params.tensor(layer.w), &params.tensor(layer.b), layer.stride)
}
