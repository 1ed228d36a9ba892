//! Versioned binary containers: scene maps ("SCNM"), images ("IMGB"), and
//! model checkpoints ("MASC"). All integers little-endian.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;
use crate::scene::SceneMap;

pub const SCENE_VERSION: u16 = 1;
pub const CHECKPOINT_VERSION: u16 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Reader<'a> {
        Reader { buf, at: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(Error::format(format!("truncated reading {what}")));
        }
        let out = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }

    fn done(&self) -> Result<()> {
        if self.at != self.buf.len() {
            return Err(Error::format(format!(
                "{} trailing bytes",
                self.buf.len() - self.at
            )));
        }
        Ok(())
    }
}

// ── scene maps ─────────────────────────────────────────────────────────

/// "SCNM", u16 version, u16 h, u16 w, then row-major u16 grids in order:
/// panoptic class, panoptic instance, human class, face class.
pub fn scene_to_bytes(scene: &SceneMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + scene.h * scene.w * 8);
    out.extend_from_slice(b"SCNM");
    out.extend_from_slice(&SCENE_VERSION.to_le_bytes());
    out.extend_from_slice(&(scene.h as u16).to_le_bytes());
    out.extend_from_slice(&(scene.w as u16).to_le_bytes());
    for grid in [&scene.panoptic, &scene.instance, &scene.human, &scene.face] {
        for &v in grid.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn scene_from_bytes(bytes: &[u8]) -> Result<SceneMap> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != b"SCNM" {
        return Err(Error::format("scene: bad magic"));
    }
    let version = r.u16("version")?;
    if version != SCENE_VERSION {
        return Err(Error::format(format!("scene: unsupported version {version}")));
    }
    let h = r.u16("height")? as usize;
    let w = r.u16("width")? as usize;
    let mut grids = Vec::with_capacity(4);
    for name in ["panoptic", "instance", "human", "face"] {
        let raw = r.take(h * w * 2, name)?;
        grids.push(
            raw.chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect::<Vec<u16>>(),
        );
    }
    r.done()?;
    let face = grids.pop().unwrap();
    let human = grids.pop().unwrap();
    let instance = grids.pop().unwrap();
    let panoptic = grids.pop().unwrap();
    Ok(SceneMap {
        h,
        w,
        panoptic,
        instance,
        human,
        face,
    })
}

// ── images ─────────────────────────────────────────────────────────────

/// "IMGB", u16 h, u16 w, then h*w RGB byte triples mapping [-1, 1] linearly
/// onto 0..=255.
pub fn image_to_bytes(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("image_to_bytes", format!("{:?}", s)));
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let v = image.values();
    let mut out = Vec::with_capacity(8 + plane * 3);
    out.extend_from_slice(b"IMGB");
    out.extend_from_slice(&(h as u16).to_le_bytes());
    out.extend_from_slice(&(w as u16).to_le_bytes());
    for p in 0..plane {
        for c in 0..3 {
            let x = ((v[c * plane + p] + 1.0) * 0.5 * 255.0).round().clamp(0.0, 255.0);
            out.push(x as u8);
        }
    }
    Ok(out)
}

pub fn image_from_bytes(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != b"IMGB" {
        return Err(Error::format("image: bad magic"));
    }
    let h = r.u16("height")? as usize;
    let w = r.u16("width")? as usize;
    let raw = r.take(h * w * 3, "pixels")?;
    r.done()?;
    let plane = h * w;
    let mut values = vec![0.0; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            values[c * plane + p] = raw[p * 3 + c] as f64 / 255.0 * 2.0 - 1.0;
        }
    }
    Tensor::from_vec(&[3, h, w], values)
}

// ── checkpoints ────────────────────────────────────────────────────────

pub type NamedBlobs = Vec<(String, Vec<usize>, Vec<f64>)>;

/// "MASC", u16 version, u32 blob count, then per blob: u16 name length,
/// name bytes, u8 rank, u32 extents, f64 values.
pub fn checkpoint_to_bytes(blobs: &NamedBlobs) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(b"MASC");
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
    for (name, shape, values) in blobs {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<NamedBlobs> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != b"MASC" {
        return Err(Error::format("checkpoint: bad magic"));
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!(
            "checkpoint: unsupported version {version}"
        )));
    }
    let count = r.u32("blob count")? as usize;
    let mut blobs = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
            .map_err(|_| Error::format("checkpoint: non-utf8 name"))?;
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let n: usize = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            values.push(r.f64("value")?);
        }
        blobs.push((name, shape, values));
    }
    r.done()?;
    Ok(blobs)
}

// ── path helpers ───────────────────────────────────────────────────────

pub fn write_bytes(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

pub fn write_scene(path: impl AsRef<Path>, scene: &SceneMap) -> Result<()> {
    write_bytes(path, &scene_to_bytes(scene))
}

pub fn read_scene(path: impl AsRef<Path>) -> Result<SceneMap> {
    scene_from_bytes(&std::fs::read(path)?)
}

pub fn write_image(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    write_bytes(path, &image_to_bytes(image)?)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    image_from_bytes(&std::fs::read(path)?)
}

pub fn write_checkpoint(path: impl AsRef<Path>, blobs: &NamedBlobs) -> Result<()> {
    write_bytes(path, &checkpoint_to_bytes(blobs))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<NamedBlobs> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}
