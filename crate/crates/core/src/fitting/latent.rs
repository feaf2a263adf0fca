use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::error::{check_dim, Error, Result};
use crate::geometry::{ObjectExtrinsics, ScaleBounds};
use crate::renderer::ObjectParams;
use crate::shape_space::{AnalyticShape, ShapeParams, TextureParams};

/// How a slot's shape is parametrized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeSlot {
    /// Fixed primitive, no free parameters.
    Primitive(AnalyticShape),
    Code { dim: usize },
}

/// How a slot's texture is parametrized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureSlot {
    /// Three pre-logistic color values.
    Constant,
    Code { dim: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotLayout {
    pub shape: ShapeSlot,
    pub texture: TextureSlot,
}

/// Position (3), rotation pair (2) and raw scale (1).
pub const EXTRINSIC_LEN: usize = 6;
pub const BACKGROUND_LEN: usize = 3;

impl SlotLayout {
    pub fn shape_len(&self) -> usize {
        match self.shape {
            ShapeSlot::Primitive(_) => 0,
            ShapeSlot::Code { dim } => dim,
        }
    }

    pub fn texture_len(&self) -> usize {
        match self.texture {
            TextureSlot::Constant => 3,
            TextureSlot::Code { dim } => dim,
        }
    }

    pub fn param_len(&self) -> usize {
        self.shape_len() + self.texture_len() + EXTRINSIC_LEN
    }
}

/// Inverse of the logistic function, clamped away from 0 and 1.
pub fn logit(c: f64) -> f64 {
    let c = c.clamp(1e-6, 1.0 - 1e-6);
    (c / (1.0 - c)).ln()
}

/// Object slots and background as one flat parameter vector.
///
/// Layout: background pre-logistic color (3), then for each slot its shape
/// code, texture parameters and extrinsics
/// `[p_x, p_y, p_z, z_cos, z_sin, raw_scale]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneLatent {
    pub slots: Vec<SlotLayout>,
    pub params: Vec<f64>,
    pub bounds: ScaleBounds,
}

impl SceneLatent {
    pub fn new(bounds: ScaleBounds, background_raw: [f64; 3]) -> Self {
        Self { slots: Vec::new(), params: background_raw.to_vec(), bounds }
    }

    pub fn with_background_color(bounds: ScaleBounds, color: [f64; 3]) -> Self {
        Self::new(bounds, color.map(logit))
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        let expected = BACKGROUND_LEN + self.slots.iter().map(|s| s.param_len()).sum::<usize>();
        check_dim("scene latent", expected, self.params.len())
    }

    fn check_slot(&self, i: usize) -> Result<()> {
        if i < self.slots.len() {
            Ok(())
        } else {
            Err(Error::SlotIndex { index: i, len: self.slots.len() })
        }
    }

    pub fn background_range(&self) -> Range<usize> {
        0..BACKGROUND_LEN
    }

    pub fn slot_range(&self, i: usize) -> Result<Range<usize>> {
        self.check_slot(i)?;
        let start = BACKGROUND_LEN + self.slots[..i].iter().map(|s| s.param_len()).sum::<usize>();
        Ok(start..start + self.slots[i].param_len())
    }

    pub fn extrinsics_range(&self, i: usize) -> Result<Range<usize>> {
        let r = self.slot_range(i)?;
        Ok(r.end - EXTRINSIC_LEN..r.end)
    }

    pub fn push_slot(&mut self, layout: SlotLayout, values: &[f64]) -> Result<()> {
        check_dim("slot parameters", layout.param_len(), values.len())?;
        self.slots.push(layout);
        self.params.extend_from_slice(values);
        Ok(())
    }

    /// Appends an object; constant colors are stored through [`logit`].
    pub fn push_object(&mut self, obj: &ObjectParams<f64>) -> Result<()> {
        let (shape, mut values) = match &obj.shape {
            ShapeParams::Primitive(p) => (ShapeSlot::Primitive(*p), Vec::new()),
            ShapeParams::Code(c) => (ShapeSlot::Code { dim: c.len() }, c.clone()),
        };
        let texture = match &obj.texture {
            TextureParams::Constant(c) => {
                values.extend(c.map(logit));
                TextureSlot::Constant
            }
            TextureParams::Code(c) => {
                values.extend_from_slice(c);
                TextureSlot::Code { dim: c.len() }
            }
        };
        values.extend(extrinsic_values(&obj.extrinsics));
        self.push_slot(SlotLayout { shape, texture }, &values)
    }

    /// Maps a parameter vector (plain or on a tape) to renderer inputs.
    pub fn decode<T: Real>(&self, leaves: &[T]) -> Result<(Vec<ObjectParams<T>>, [T; 3])> {
        self.validate()?;
        check_dim("scene latent leaves", self.params.len(), leaves.len())?;
        let background = [leaves[0].sigmoid(), leaves[1].sigmoid(), leaves[2].sigmoid()];
        let mut at = BACKGROUND_LEN;
        let mut objects = Vec::with_capacity(self.slots.len());
        for slot in &self.slots {
            let shape = match slot.shape {
                ShapeSlot::Primitive(p) => ShapeParams::Primitive(p),
                ShapeSlot::Code { dim } => ShapeParams::Code(leaves[at..at + dim].to_vec()),
            };
            at += slot.shape_len();
            let texture = match slot.texture {
                TextureSlot::Constant => TextureParams::Constant([leaves[at].sigmoid(), leaves[at + 1].sigmoid(), leaves[at + 2].sigmoid()]),
                TextureSlot::Code { dim } => TextureParams::Code(leaves[at..at + dim].to_vec()),
            };
            at += slot.texture_len();
            let e = &leaves[at..at + EXTRINSIC_LEN];
            let extrinsics = ObjectExtrinsics { position: [e[0], e[1], e[2]], z_cos: e[3], z_sin: e[4], raw_scale: e[5], bounds: self.bounds };
            at += EXTRINSIC_LEN;
            objects.push(ObjectParams { shape, texture, extrinsics });
        }
        Ok((objects, background))
    }

    pub fn objects(&self) -> Result<Vec<ObjectParams<f64>>> {
        Ok(self.decode(&self.params)?.0)
    }

    pub fn background(&self) -> [f64; 3] {
        [0, 1, 2].map(|i| self.params[i].sigmoid())
    }

    pub fn extrinsics(&self, i: usize) -> Result<ObjectExtrinsics<f64>> {
        let e = &self.params[self.extrinsics_range(i)?];
        Ok(ObjectExtrinsics { position: [e[0], e[1], e[2]], z_cos: e[3], z_sin: e[4], raw_scale: e[5], bounds: self.bounds })
    }

    pub fn set_extrinsics(&mut self, i: usize, ext: &ObjectExtrinsics<f64>) -> Result<()> {
        let r = self.extrinsics_range(i)?;
        self.params[r].copy_from_slice(&extrinsic_values(ext));
        Ok(())
    }

    /// Shape parameters of slot `i`: layout and free values.
    pub fn shape_of(&self, i: usize) -> Result<(ShapeSlot, Vec<f64>)> {
        let r = self.slot_range(i)?;
        let n = self.slots[i].shape_len();
        Ok((self.slots[i].shape, self.params[r.start..r.start + n].to_vec()))
    }

    /// Texture parameters of slot `i`: layout and raw values.
    pub fn texture_of(&self, i: usize) -> Result<(TextureSlot, Vec<f64>)> {
        let r = self.slot_range(i)?;
        let s = r.start + self.slots[i].shape_len();
        Ok((self.slots[i].texture, self.params[s..s + self.slots[i].texture_len()].to_vec()))
    }

    fn replace_slot(&mut self, i: usize, layout: SlotLayout, values: Vec<f64>) -> Result<()> {
        check_dim("slot parameters", layout.param_len(), values.len())?;
        let r = self.slot_range(i)?;
        self.params.splice(r, values);
        self.slots[i] = layout;
        Ok(())
    }
}

fn extrinsic_values(e: &ObjectExtrinsics<f64>) -> [f64; EXTRINSIC_LEN] {
    [e.position[0], e.position[1], e.position[2], e.z_cos, e.z_sin, e.raw_scale]
}

/// A latent-space scene manipulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Edit {
    /// Exchange the positions of two slots.
    Swap(usize, usize),
    Remove(usize),
    SetShape { slot: usize, shape: ShapeSlot, values: Vec<f64> },
    /// Texture parameters in raw form (pre-logistic for constant colors).
    SetTexture { slot: usize, texture: TextureSlot, values: Vec<f64> },
    SetPose { slot: usize, position: [f64; 3], z_cos: f64, z_sin: f64, raw_scale: f64 },
}

impl Edit {
    pub fn set_color(slot: usize, color: [f64; 3]) -> Self {
        Edit::SetTexture { slot, texture: TextureSlot::Constant, values: color.map(logit).to_vec() }
    }

    pub fn set_pose(slot: usize, e: &ObjectExtrinsics<f64>) -> Self {
        Edit::SetPose { slot, position: e.position, z_cos: e.z_cos, z_sin: e.z_sin, raw_scale: e.raw_scale }
    }
}

/// Applies `edit` to a copy of `scene`.
pub fn apply_edit(scene: &SceneLatent, edit: &Edit) -> Result<SceneLatent> {
    scene.validate()?;
    let mut out = scene.clone();
    match edit {
        Edit::Swap(a, b) => {
            let ra = out.extrinsics_range(*a)?;
            let rb = out.extrinsics_range(*b)?;
            for k in 0..3 {
                out.params.swap(ra.start + k, rb.start + k);
            }
        }
        Edit::Remove(i) => {
            let r = out.slot_range(*i)?;
            out.params.drain(r);
            out.slots.remove(*i);
        }
        Edit::SetShape { slot, shape, values } => {
            let (_, texture) = out.texture_of(*slot)?;
            let ext = extrinsic_values(&out.extrinsics(*slot)?);
            let layout = SlotLayout { shape: *shape, texture: out.slots[*slot].texture };
            out.replace_slot(*slot, layout, [values.as_slice(), &texture, &ext].concat())?;
        }
        Edit::SetTexture { slot, texture, values } => {
            let (_, shape) = out.shape_of(*slot)?;
            let ext = extrinsic_values(&out.extrinsics(*slot)?);
            let layout = SlotLayout { shape: out.slots[*slot].shape, texture: *texture };
            out.replace_slot(*slot, layout, [shape.as_slice(), values, &ext].concat())?;
        }
        Edit::SetPose { slot, position, z_cos, z_sin, raw_scale } => {
            let ext = ObjectExtrinsics { position: *position, z_cos: *z_cos, z_sin: *z_sin, raw_scale: *raw_scale, bounds: out.bounds };
            ext.validate()?;
            out.set_extrinsics(*slot, &ext)?;
        }
    }
    Ok(out)
}
