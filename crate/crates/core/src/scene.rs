//! Scene data model: three complementary segmentation groups (panoptic,
//! human parsing, face parts) plus a derived edge channel, and the
//! per-category weighting used by the scene tokenizer's loss.
//!
//! The m-channel encoding is `m = m_p + m_h + m_f + 1`: one one-hot block
//! per group (a reserved null class encodes as all-zeros inside its block)
//! and the edge map as the final channel. Global category indices run
//! contiguously over the three blocks, so the face group occupies the last
//! `m_f` category slots before the edge channel.

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

/// Sentinel for "no class" within a group.
pub const NULL_CLASS: u16 = u16::MAX;
/// Sentinel for "no instance" (stuff) in the panoptic group.
pub const NULL_INSTANCE: u16 = u16::MAX;

/// Category counts per segmentation group and the boosted face-part span.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneSchema {
    pub m_p: usize,
    pub m_h: usize,
    pub m_f: usize,
    /// Inclusive global-index interval of the face-part categories.
    pub face_part_range: (usize, usize),
}

impl SceneSchema {
    pub fn new(m_p: usize, m_h: usize, m_f: usize) -> SceneSchema {
        let face_lo = m_p + m_h;
        SceneSchema {
            m_p,
            m_h,
            m_f,
            face_part_range: (face_lo, face_lo + m_f - 1),
        }
    }

    /// Desk-scale default: 8 panoptic, 3 human, 5 face categories (m = 17).
    pub fn desk() -> SceneSchema {
        SceneSchema::new(8, 3, 5)
    }

    /// Full-scale preset: 133 panoptic, 20 human-parsing, 5 face-part
    /// categories (m = 159).
    pub fn full_scale() -> SceneSchema {
        SceneSchema::new(133, 20, 5)
    }

    /// Total channel count m, including the edge channel.
    pub fn channels(&self) -> usize {
        self.m_p + self.m_h + self.m_f + 1
    }

    /// Number of class categories (everything except the edge channel).
    pub fn num_categories(&self) -> usize {
        self.m_p + self.m_h + self.m_f
    }

    pub fn group_offset(&self, group: SceneGroup) -> usize {
        match group {
            SceneGroup::Panoptic => 0,
            SceneGroup::Human => self.m_p,
            SceneGroup::Face => self.m_p + self.m_h,
        }
    }

    pub fn group_size(&self, group: SceneGroup) -> usize {
        match group {
            SceneGroup::Panoptic => self.m_p,
            SceneGroup::Human => self.m_h,
            SceneGroup::Face => self.m_f,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let face_lo = self.m_p + self.m_h;
        let face_hi = face_lo + self.m_f - 1;
        if self.m_p == 0 || self.m_f == 0 || self.m_h == 0 {
            return Err(Error::invalid("schema: empty segmentation group"));
        }
        if self.face_part_range.0 < face_lo || self.face_part_range.1 > face_hi {
            return Err(Error::invalid(format!(
                "schema: face_part_range {:?} outside face span [{}, {}]",
                self.face_part_range, face_lo, face_hi
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneGroup {
    Panoptic,
    Human,
    Face,
}

impl SceneGroup {
    pub fn name(&self) -> &'static str {
        match self {
            SceneGroup::Panoptic => "panoptic",
            SceneGroup::Human => "human",
            SceneGroup::Face => "face",
        }
    }
}

/// Per-pixel class IDs for the three groups plus panoptic instance IDs.
/// Class IDs are group-local; `NULL_CLASS`/`NULL_INSTANCE` mark absence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneMap {
    pub h: usize,
    pub w: usize,
    pub panoptic: Vec<u16>,
    pub instance: Vec<u16>,
    pub human: Vec<u16>,
    pub face: Vec<u16>,
}

impl SceneMap {
    /// All-null scene.
    pub fn empty(h: usize, w: usize) -> SceneMap {
        SceneMap {
            h,
            w,
            panoptic: vec![NULL_CLASS; h * w],
            instance: vec![NULL_INSTANCE; h * w],
            human: vec![NULL_CLASS; h * w],
            face: vec![NULL_CLASS; h * w],
        }
    }

    /// Uniform panoptic background (stuff, no instance).
    pub fn filled(h: usize, w: usize, panoptic_class: u16) -> SceneMap {
        let mut s = SceneMap::empty(h, w);
        s.panoptic.fill(panoptic_class);
        s
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize) -> usize {
        y * self.w + x
    }

    pub fn group(&self, group: SceneGroup) -> &[u16] {
        match group {
            SceneGroup::Panoptic => &self.panoptic,
            SceneGroup::Human => &self.human,
            SceneGroup::Face => &self.face,
        }
    }

    fn group_mut(&mut self, group: SceneGroup) -> &mut Vec<u16> {
        match group {
            SceneGroup::Panoptic => &mut self.panoptic,
            SceneGroup::Human => &mut self.human,
            SceneGroup::Face => &mut self.face,
        }
    }

    /// Checks class ranges and that each instance carries a single class.
    pub fn validate(&self, schema: &SceneSchema) -> Result<()> {
        schema.validate()?;
        let n = self.h * self.w;
        if [&self.panoptic, &self.instance, &self.human, &self.face]
            .iter()
            .any(|g| g.len() != n)
        {
            return Err(Error::invalid("scene: grid size mismatch"));
        }
        for (grid, group) in [
            (&self.panoptic, SceneGroup::Panoptic),
            (&self.human, SceneGroup::Human),
            (&self.face, SceneGroup::Face),
        ] {
            let limit = schema.group_size(group) as u16;
            for (i, &c) in grid.iter().enumerate() {
                if c != NULL_CLASS && c >= limit {
                    return Err(Error::ClassOutOfRange {
                        group: group.name(),
                        class: c,
                        y: i / self.w,
                        x: i % self.w,
                    });
                }
            }
        }
        // instance consistency: one panoptic class per instance id
        let mut seen: std::collections::HashMap<u16, u16> = std::collections::HashMap::new();
        for (i, &inst) in self.instance.iter().enumerate() {
            if inst == NULL_INSTANCE {
                continue;
            }
            let class = self.panoptic[i];
            match seen.insert(inst, class) {
                Some(prev) if prev != class => {
                    return Err(Error::invalid(format!(
                        "scene: instance {} spans classes {} and {}",
                        inst, prev, class
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Per-category weight function: `boost` on the face-part interval, 1
/// everywhere else.
#[derive(Debug, Clone)]
pub struct CategoryWeights {
    pub boost: f64,
    pub face_part_range: (usize, usize),
    num_categories: usize,
}

impl CategoryWeights {
    pub fn new(schema: &SceneSchema, boost: f64) -> CategoryWeights {
        CategoryWeights {
            boost,
            face_part_range: schema.face_part_range,
            num_categories: schema.num_categories(),
        }
    }

    /// Weight of a global category index.
    pub fn weight(&self, cat: usize) -> Result<f64> {
        if cat >= self.num_categories {
            return Err(Error::invalid(format!(
                "category {} out of range (limit {})",
                cat, self.num_categories
            )));
        }
        Ok(if cat >= self.face_part_range.0 && cat <= self.face_part_range.1 {
            self.boost
        } else {
            1.0
        })
    }

    /// Weights for all m channels; the edge channel weighs 1.
    pub fn channel_weights(&self) -> Vec<f64> {
        let mut w: Vec<f64> = (0..self.num_categories)
            .map(|c| self.weight(c).expect("in range"))
            .collect();
        w.push(1.0);
        w
    }
}

/// Binary boundary map: a pixel is an edge iff any 4-neighbour differs in
/// panoptic class, panoptic instance, human class, or face class. Adjacent
/// same-class instances therefore separate, and face-part boundaries are
/// included by construction.
pub fn extract_edges(scene: &SceneMap, schema: &SceneSchema) -> Result<Vec<u8>> {
    scene.validate(schema)?;
    let (h, w) = (scene.h, scene.w);
    let mut edges = vec![0u8; h * w];
    let differs = |a: usize, b: usize| {
        scene.panoptic[a] != scene.panoptic[b]
            || scene.instance[a] != scene.instance[b]
            || scene.human[a] != scene.human[b]
            || scene.face[a] != scene.face[b]
    };
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            // marking both sides keeps the map side-symmetric
            if x + 1 < w && differs(i, i + 1) {
                edges[i] = 1;
                edges[i + 1] = 1;
            }
            if y + 1 < h && differs(i, i + w) {
                edges[i] = 1;
                edges[i + w] = 1;
            }
        }
    }
    Ok(edges)
}

/// One-hot m-channel encoding [m, h, w]: one block per group (null class is
/// all-zeros within its block), edge map as channel m-1.
pub fn encode_channels(scene: &SceneMap, schema: &SceneSchema) -> Result<Tensor> {
    let edges = extract_edges(scene, schema)?;
    let (h, w) = (scene.h, scene.w);
    let m = schema.channels();
    let plane = h * w;
    let mut out = vec![0.0f64; m * plane];
    for (group, grid) in [
        (SceneGroup::Panoptic, &scene.panoptic),
        (SceneGroup::Human, &scene.human),
        (SceneGroup::Face, &scene.face),
    ] {
        let offset = schema.group_offset(group);
        for (i, &c) in grid.iter().enumerate() {
            if c != NULL_CLASS {
                out[(offset + c as usize) * plane + i] = 1.0;
            }
        }
    }
    for (i, &e) in edges.iter().enumerate() {
        out[(m - 1) * plane + i] = e as f64;
    }
    Tensor::from_vec(&[m, h, w], out)
}

/// A deterministic scene transform.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SceneEdit {
    /// Repaint every pixel of class `from` as class `to` within a group.
    ReplaceClass {
        group: SceneGroup,
        from: u16,
        to: u16,
    },
    /// Paint an axis-aligned rectangle of `class` over a group. Panoptic
    /// sketches receive a fresh instance id.
    PasteSketch {
        group: SceneGroup,
        class: u16,
        x: usize,
        y: usize,
        w: usize,
        h: usize,
    },
}

/// Applies edits left to right as a pure function. The edge channel is never
/// edited directly: it is re-derived from the edited class grids whenever the
/// scene is next encoded.
pub fn edit_scene(scene: &SceneMap, schema: &SceneSchema, edits: &[SceneEdit]) -> Result<SceneMap> {
    scene.validate(schema)?;
    let mut out = scene.clone();
    for edit in edits {
        match *edit {
            SceneEdit::ReplaceClass { group, from, to } => {
                let limit = schema.group_size(group) as u16;
                if from >= limit || to >= limit {
                    return Err(Error::invalid(format!(
                        "edit: class {}->{} outside {} group (limit {})",
                        from,
                        to,
                        group.name(),
                        limit
                    )));
                }
                for c in out.group_mut(group).iter_mut() {
                    if *c == from {
                        *c = to;
                    }
                }
            }
            SceneEdit::PasteSketch {
                group,
                class,
                x,
                y,
                w,
                h,
            } => {
                let limit = schema.group_size(group) as u16;
                if class >= limit {
                    return Err(Error::invalid(format!(
                        "edit: class {} outside {} group (limit {})",
                        class,
                        group.name(),
                        limit
                    )));
                }
                if x + w > out.w || y + h > out.h || w == 0 || h == 0 {
                    return Err(Error::invalid(format!(
                        "edit: rect {}x{}+{}+{} outside {}x{} scene",
                        w, h, x, y, out.w, out.h
                    )));
                }
                let fresh_instance = if group == SceneGroup::Panoptic {
                    out.instance
                        .iter()
                        .filter(|&&i| i != NULL_INSTANCE)
                        .max()
                        .map_or(0, |&m| m + 1)
                } else {
                    NULL_INSTANCE
                };
                for yy in y..y + h {
                    for xx in x..x + w {
                        let i = yy * out.w + xx;
                        out.group_mut(group)[i] = class;
                        if group == SceneGroup::Panoptic {
                            out.instance[i] = fresh_instance;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}
