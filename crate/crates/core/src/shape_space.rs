//! Signed distance and texture fields in object coordinates.
//!
//! Shapes are normalized to the cube [−0.4, 0.4]³ (the unit cube minus a
//! 0.1 padding) before per-axis scaling. Three field flavours exist:
//!
//! * [`AnalyticShape`]: an exact primitive with fixed axis scales;
//! * [`AnalyticFamily`]: a latent-conditioned blend of the primitives,
//!   cheap enough to fit scenes with;
//! * [`Mlp`]: a latent-conditioned fully connected field, trained against
//!   analytic oracles by [`fit_field`].

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Var};
use crate::error::{check_dim, Error, Result};
use crate::fitting::{AdamConfig, AdamState};
use crate::geometry::{norm, Vec3};

/// Half extent of a normalized shape.
pub const SHAPE_HALF_EXTENT: f64 = 0.4;
/// Half extent of the unit cube that bounds every normalized shape.
pub const UNIT_CUBE_HALF: f64 = 0.5;
pub const DEFAULT_SHAPE_DIM: usize = 8;
pub const DEFAULT_TEXTURE_DIM: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrimitiveKind {
    Sphere,
    Box,
    Cylinder,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; 3] = [PrimitiveKind::Sphere, PrimitiveKind::Box, PrimitiveKind::Cylinder];

    /// Signed distance of the normalized primitive (cylinder axis along z).
    pub fn unit_sdf<T: Real>(self, q: Vec3<T>) -> T {
        let r = SHAPE_HALF_EXTENT;
        match self {
            PrimitiveKind::Sphere => norm(q) - r,
            PrimitiveKind::Box => {
                let d = [q[0].abs() - r, q[1].abs() - r, q[2].abs() - r];
                let outside = norm([d[0].max0(), d[1].max0(), d[2].max0()]);
                let inside = d[0].max(d[1]).max(d[2]).min(d[0].constant_like(0.0));
                outside + inside
            }
            PrimitiveKind::Cylinder => {
                let radial = (q[0] * q[0] + q[1] * q[1]).sqrt() - r;
                let axial = q[2].abs() - r;
                let zero = radial.constant_like(0.0);
                let outside = (radial.max0().square() + axial.max0().square()).sqrt();
                radial.max(axial).min(zero) + outside
            }
        }
    }

    /// Exact membership of the open normalized primitive.
    pub fn contains_unit(self, q: Vec3<f64>) -> bool {
        let r = SHAPE_HALF_EXTENT;
        match self {
            PrimitiveKind::Sphere => q[0] * q[0] + q[1] * q[1] + q[2] * q[2] < r * r,
            PrimitiveKind::Box => q.iter().all(|v| v.abs() < r),
            PrimitiveKind::Cylinder => q[0] * q[0] + q[1] * q[1] < r * r && q[2].abs() < r,
        }
    }

    pub fn index(self) -> usize {
        match self {
            PrimitiveKind::Sphere => 0,
            PrimitiveKind::Box => 1,
            PrimitiveKind::Cylinder => 2,
        }
    }
}

/// A primitive with per-axis scale factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyticShape {
    pub kind: PrimitiveKind,
    pub axis_scale: [f64; 3],
}

impl AnalyticShape {
    pub fn new(kind: PrimitiveKind, axis_scale: [f64; 3]) -> Result<Self> {
        let s = Self { kind, axis_scale };
        s.validate()?;
        Ok(s)
    }

    pub fn unit(kind: PrimitiveKind) -> Self {
        Self { kind, axis_scale: [1.0; 3] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.axis_scale.iter().all(|&a| a > 0.0 && a.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonPositiveAxisScale(self.axis_scale))
        }
    }

    /// Signed distance with anisotropic scaling: the unit distance at
    /// `x ⊘ a`, multiplied by the smallest axis scale. The sign is exact;
    /// the magnitude is a lower bound on the true distance.
    pub fn sdf<T: Real>(&self, x: Vec3<T>) -> T {
        let a = self.axis_scale;
        let q = [x[0] / a[0], x[1] / a[1], x[2] / a[2]];
        let m = a[0].min(a[1]).min(a[2]);
        self.kind.unit_sdf(q) * m
    }

    pub fn contains(&self, x: Vec3<f64>) -> bool {
        let a = self.axis_scale;
        self.kind.contains_unit([x[0] / a[0], x[1] / a[1], x[2] / a[2]])
    }

    /// Half extent of the padded bounding cube.
    pub fn bbox_half_extent(&self) -> [f64; 3] {
        self.axis_scale.map(|a| a * UNIT_CUBE_HALF)
    }

    /// Half height of the shape itself (its bottom sits this far below the origin).
    pub fn half_height(&self) -> f64 {
        SHAPE_HALF_EXTENT * self.axis_scale[2]
    }

    /// Bounding radius of the shape in object units.
    pub fn bounding_radius(&self) -> f64 {
        let a = self.axis_scale;
        SHAPE_HALF_EXTENT * (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
    }

    /// Whether the shape is invariant under every rotation about z.
    pub fn is_rotationally_symmetric(&self) -> bool {
        matches!(self.kind, PrimitiveKind::Sphere | PrimitiveKind::Cylinder)
            && self.axis_scale[0] == self.axis_scale[1]
    }
}

pub fn eval_analytic_sdf(shape: &AnalyticShape, x: Vec3<f64>) -> Result<f64> {
    shape.validate()?;
    Ok(shape.sdf(x))
}

/// Latent-conditioned blend of the analytic primitives.
///
/// Code layout: `[ln a_x, ln a_y, ln a_z, w_sphere, w_box, w_cylinder, ..]`.
/// The blend weights are the softmax of the three logits and entries past
/// index 5 are inert. The zero code is the equal blend at unit scale.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AnalyticFamily;

impl AnalyticFamily {
    pub const MIN_CODE_DIM: usize = 6;

    pub fn axis_scale<T: Real>(code: &[T]) -> [T; 3] {
        [code[0].exp(), code[1].exp(), code[2].exp()]
    }

    pub fn sdf<T: Real>(code: &[T], x: Vec3<T>) -> T {
        let a = Self::axis_scale(code);
        let q = [x[0] / a[0], x[1] / a[1], x[2] / a[2]];
        let m = a[0].min(a[1]).min(a[2]);
        let top = code[3].value().max(code[4].value()).max(code[5].value());
        let e = [(code[3] - top).exp(), (code[4] - top).exp(), (code[5] - top).exp()];
        let z = e[0] + e[1] + e[2];
        let mut acc = PrimitiveKind::Sphere.unit_sdf(q) * e[0];
        acc = acc + PrimitiveKind::Box.unit_sdf(q) * e[1];
        acc = acc + PrimitiveKind::Cylinder.unit_sdf(q) * e[2];
        acc / z * m
    }

    /// A code that reproduces `shape` up to the softmax sharpness.
    pub fn code_for(shape: &AnalyticShape, dim: usize, sharpness: f64) -> Vec<f64> {
        let mut code = vec![0.0; dim.max(Self::MIN_CODE_DIM)];
        for i in 0..3 {
            code[i] = shape.axis_scale[i].ln();
        }
        code[3 + shape.kind.index()] = sharpness;
        code
    }
}

/// Output nonlinearity of an [`Mlp`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputActivation {
    Identity,
    Logistic,
}

/// Fully connected layer, weights row-major `outputs × inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Latent-conditioned field `(code, x) ↦ ℝᵏ` with rectifier hidden layers.
///
/// The latent code is concatenated to the input of layer `concat_at`
/// (layer 0 receives the 3-D point).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub latent_dim: usize,
    pub concat_at: usize,
    pub output: OutputActivation,
}

pub const POINT_DIM: usize = 3;

impl Mlp {
    /// Zero-initialized network with the given hidden widths.
    pub fn zeros(hidden: &[usize], latent_dim: usize, concat_at: usize, outputs: usize, output: OutputActivation) -> Result<Self> {
        if concat_at > hidden.len() {
            return Err(Error::InvalidConfig(format!(
                "concat layer {concat_at} beyond {} layers",
                hidden.len() + 1
            )));
        }
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut width = POINT_DIM;
        for (l, &out) in hidden.iter().chain(std::iter::once(&outputs)).enumerate() {
            let inputs = width + if l == concat_at { latent_dim } else { 0 };
            layers.push(Dense { inputs, outputs: out, weights: vec![0.0; inputs * out], bias: vec![0.0; out] });
            width = out;
        }
        Ok(Self { layers, latent_dim, concat_at, output })
    }

    /// SDF network Φ: hidden [64, 64, 64, 64], code joins at the third layer.
    pub fn sdf_default(latent_dim: usize) -> Self {
        Self::zeros(&[64, 64, 64, 64], latent_dim, 2, 1, OutputActivation::Identity).expect("valid layout")
    }

    /// Texture network Ψ: hidden [64, 64, 64, 64], code joins the input.
    pub fn texture_default(latent_dim: usize) -> Self {
        Self::zeros(&[64, 64, 64, 64], latent_dim, 0, 3, OutputActivation::Logistic).expect("valid layout")
    }

    /// Uniform He initialization from a seeded stream.
    pub fn randomize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut self.layers {
            let bound = (6.0 / layer.inputs as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.gen_range(-bound..bound);
            }
            for b in &mut layer.bias {
                *b = 0.0;
            }
        }
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.outputs).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let mut width = POINT_DIM;
        for (l, layer) in self.layers.iter().enumerate() {
            let expect = width + if l == self.concat_at { self.latent_dim } else { 0 };
            check_dim("mlp layer inputs", expect, layer.inputs)?;
            check_dim("mlp weights", layer.inputs * layer.outputs, layer.weights.len())?;
            check_dim("mlp bias", layer.outputs, layer.bias.len())?;
            width = layer.outputs;
        }
        if self.concat_at >= self.layers.len() {
            return Err(Error::InvalidConfig("concat layer out of range".into()));
        }
        Ok(())
    }

    /// Parameters flattened layer by layer (weights, then bias).
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        check_dim("mlp params", self.param_count(), params.len())?;
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&params[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[at..at + nb]);
            at += nb;
        }
        Ok(())
    }

    fn forward_cached(&self, code: &[f64], x: [f64; 3], cache: &mut Cache) -> usize {
        cache.inputs.resize(self.layers.len(), Vec::new());
        cache.pre.resize(self.layers.len(), Vec::new());
        let mut act: Vec<f64> = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let input = &mut cache.inputs[l];
            input.clear();
            input.extend_from_slice(&act);
            if l == self.concat_at {
                input.extend_from_slice(code);
            }
            let pre = &mut cache.pre[l];
            pre.clear();
            for o in 0..layer.outputs {
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                let mut acc = layer.bias[o];
                for (w, v) in row.iter().zip(input.iter()) {
                    acc += w * v;
                }
                pre.push(acc);
            }
            act.clear();
            if l + 1 < self.layers.len() {
                act.extend(pre.iter().map(|&v| if v > 0.0 { v } else { 0.0 }));
            }
        }
        self.layers.len()
    }

    fn activate(&self, pre: f64) -> f64 {
        match self.output {
            OutputActivation::Identity => pre,
            OutputActivation::Logistic => pre.sigmoid(),
        }
    }

    /// Plain forward pass.
    pub fn forward(&self, code: &[f64], x: [f64; 3]) -> Vec<f64> {
        let mut cache = Cache::default();
        self.forward_cached(code, x, &mut cache);
        cache.pre.last().unwrap().iter().map(|&v| self.activate(v)).collect()
    }

    /// Backpropagates `d_out` (w.r.t. activated outputs) through a cached
    /// forward pass. Accumulates parameter gradients into `d_params` when
    /// given and returns the gradient w.r.t. (point, code).
    fn backward_cached(&self, cache: &Cache, d_out: &[f64], mut d_params: Option<&mut [f64]>) -> (Vec<f64>, Vec<f64>) {
        let last = self.layers.len() - 1;
        let mut delta: Vec<f64> = d_out
            .iter()
            .zip(&cache.pre[last])
            .map(|(&g, &p)| match self.output {
                OutputActivation::Identity => g,
                OutputActivation::Logistic => {
                    let s = p.sigmoid();
                    g * s * (1.0 - s)
                }
            })
            .collect();
        let mut d_code = vec![0.0; self.latent_dim];
        let offsets = self.param_offsets();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &cache.inputs[l];
            if let Some(dp) = d_params.as_deref_mut() {
                let (wo, bo) = offsets[l];
                for o in 0..layer.outputs {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    let row = &mut dp[wo + o * layer.inputs..wo + (o + 1) * layer.inputs];
                    for (g, v) in row.iter_mut().zip(input) {
                        *g += d * v;
                    }
                    dp[bo + o] += d;
                }
            }
            let mut d_input = vec![0.0; layer.inputs];
            for o in 0..layer.outputs {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (g, w) in d_input.iter_mut().zip(row) {
                    *g += d * w;
                }
            }
            let carried = if l == self.concat_at {
                let split = layer.inputs - self.latent_dim;
                for (dc, &g) in d_code.iter_mut().zip(&d_input[split..]) {
                    *dc += g;
                }
                d_input.truncate(split);
                d_input
            } else {
                d_input
            };
            if l == 0 {
                return (carried, d_code);
            }
            delta = carried
                .iter()
                .zip(&cache.pre[l - 1])
                .map(|(&g, &p)| if p > 0.0 { g } else { 0.0 })
                .collect();
        }
        unreachable!("network has at least one layer")
    }

    fn param_offsets(&self) -> Vec<(usize, usize)> {
        let mut at = 0;
        self.layers
            .iter()
            .map(|l| {
                let w = at;
                at += l.weights.len();
                let b = at;
                at += l.bias.len();
                (w, b)
            })
            .collect()
    }

    /// Forward pass whose outputs are recorded as single fused nodes with
    /// exact partials w.r.t. the point and the code. Parameters are held
    /// constant.
    pub fn eval<T: Real>(&self, code: &[T], x: Vec3<T>) -> Vec<T> {
        let code_v: Vec<f64> = code.iter().map(|c| c.value()).collect();
        let xv = x.map(|v| v.value());
        let mut cache = Cache::default();
        self.forward_cached(&code_v, xv, &mut cache);
        let pre = cache.pre.last().unwrap().clone();
        let outputs: Vec<f64> = pre.iter().map(|&v| self.activate(v)).collect();
        if !T::RECORDS {
            return outputs.iter().map(|&v| x[0].constant_like(v)).collect();
        }
        let parents: Vec<T> = x.iter().chain(code.iter()).copied().collect();
        let mut out = Vec::with_capacity(outputs.len());
        let mut unit = vec![0.0; outputs.len()];
        for (k, &value) in outputs.iter().enumerate() {
            unit.iter_mut().for_each(|u| *u = 0.0);
            unit[k] = 1.0;
            let (dx, dc) = self.backward_cached(&cache, &unit, None);
            let partials: Vec<f64> = dx.into_iter().chain(dc).collect();
            out.push(T::fused(value, &parents, &partials));
        }
        out
    }

    /// Forward pass with the parameters themselves as tape values, one node
    /// per multiply-add. Slow; used to cross-check the fused path and the
    /// batched parameter gradients.
    pub fn eval_with_params<T: Real>(&self, params: &[T], code: &[T], x: Vec3<T>) -> Result<Vec<T>> {
        check_dim("mlp params", self.param_count(), params.len())?;
        check_dim("mlp code", self.latent_dim, code.len())?;
        let offsets = self.param_offsets();
        let mut act: Vec<T> = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut input = act.clone();
            if l == self.concat_at {
                input.extend_from_slice(code);
            }
            let (wo, bo) = offsets[l];
            let mut next = Vec::with_capacity(layer.outputs);
            for o in 0..layer.outputs {
                let mut acc = params[bo + o];
                for (i, &v) in input.iter().enumerate() {
                    acc = acc + params[wo + o * layer.inputs + i] * v;
                }
                next.push(acc);
            }
            act = if l + 1 < self.layers.len() { next.into_iter().map(|v| v.relu()).collect() } else { next };
        }
        Ok(act
            .into_iter()
            .map(|v| match self.output {
                OutputActivation::Identity => v,
                OutputActivation::Logistic => v.sigmoid(),
            })
            .collect())
    }
}

#[derive(Default, Clone)]
struct Cache {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

/// Φ(z_sh, x).
pub fn eval_mlp_sdf<T: Real>(params: &Mlp, z_sh: &[T], x: Vec3<T>) -> Result<T> {
    check_dim("shape code", params.latent_dim, z_sh.len())?;
    check_dim("sdf outputs", 1, params.outputs())?;
    Ok(params.eval(z_sh, x)[0])
}

/// Network weights for both fields.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldParams {
    pub sdf: Mlp,
    pub texture: Mlp,
}

impl FieldParams {
    pub fn new(shape_dim: usize, texture_dim: usize, seed: u64) -> Self {
        let mut sdf = Mlp::sdf_default(shape_dim);
        sdf.randomize(seed);
        let mut texture = Mlp::texture_default(texture_dim);
        texture.randomize(seed.wrapping_add(1));
        Self { sdf, texture }
    }
}

/// How a texture is produced.
#[derive(Debug, Clone, PartialEq)]
pub enum TextureParams<T> {
    Constant([T; 3]),
    Code(Vec<T>),
}

/// Ψ(z_tex, x) or a constant color.
pub fn eval_texture<T: Real>(texture: &TextureParams<T>, field: Option<&Mlp>, x: Vec3<T>) -> Result<[T; 3]> {
    match texture {
        TextureParams::Constant(c) => Ok(*c),
        TextureParams::Code(code) => {
            let mlp = field.ok_or_else(|| Error::InvalidConfig("texture code without a texture field".into()))?;
            check_dim("texture code", mlp.latent_dim, code.len())?;
            check_dim("texture outputs", 3, mlp.outputs())?;
            let out = mlp.eval(code, x);
            Ok([out[0], out[1], out[2]])
        }
    }
}

/// Which decoder interprets shape codes.
#[derive(Debug, Clone, PartialEq)]
pub enum ShapeModel {
    Family(AnalyticFamily),
    Mlp(Arc<Mlp>),
}

/// Shape of one object: a fixed primitive or a latent code.
#[derive(Debug, Clone, PartialEq)]
pub enum ShapeParams<T> {
    Primitive(AnalyticShape),
    Code(Vec<T>),
}

/// The decoders used to interpret codes during rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSet {
    pub shape: ShapeModel,
    pub texture: Option<Arc<Mlp>>,
}

impl Default for FieldSet {
    fn default() -> Self {
        Self { shape: ShapeModel::Family(AnalyticFamily), texture: None }
    }
}

impl FieldSet {
    pub fn validate_shape<T>(&self, shape: &ShapeParams<T>) -> Result<()> {
        match (shape, &self.shape) {
            (ShapeParams::Primitive(p), _) => p.validate(),
            (ShapeParams::Code(c), ShapeModel::Family(_)) => {
                if c.len() < AnalyticFamily::MIN_CODE_DIM {
                    Err(Error::DimensionMismatch { what: "family shape code", expected: AnalyticFamily::MIN_CODE_DIM, got: c.len() })
                } else {
                    Ok(())
                }
            }
            (ShapeParams::Code(c), ShapeModel::Mlp(m)) => check_dim("shape code", m.latent_dim, c.len()),
        }
    }

    pub fn validate_texture<T>(&self, texture: &TextureParams<T>) -> Result<()> {
        match texture {
            TextureParams::Constant(_) => Ok(()),
            TextureParams::Code(c) => match &self.texture {
                Some(m) => check_dim("texture code", m.latent_dim, c.len()),
                None => Err(Error::InvalidConfig("texture code without a texture field".into())),
            },
        }
    }

    /// Signed distance in object coordinates.
    pub fn sdf<T: Real>(&self, shape: &ShapeParams<T>, x: Vec3<T>) -> T {
        match (shape, &self.shape) {
            (ShapeParams::Primitive(p), _) => p.sdf(x),
            (ShapeParams::Code(c), ShapeModel::Family(_)) => AnalyticFamily::sdf(c, x),
            (ShapeParams::Code(c), ShapeModel::Mlp(m)) => m.eval(c, x)[0],
        }
    }

    /// Half extents of the padded bounding cube in object coordinates.
    pub fn bbox_half_extent<T: Real>(&self, shape: &ShapeParams<T>, like: T) -> [T; 3] {
        match (shape, &self.shape) {
            (ShapeParams::Primitive(p), _) => p.bbox_half_extent().map(|v| like.constant_like(v)),
            (ShapeParams::Code(c), ShapeModel::Family(_)) => AnalyticFamily::axis_scale(c).map(|a| a * UNIT_CUBE_HALF),
            (ShapeParams::Code(_), ShapeModel::Mlp(_)) => [like.constant_like(UNIT_CUBE_HALF); 3],
        }
    }

    /// Half extent of a box that contains the zero level set; tighter than
    /// [`Self::bbox_half_extent`] for analytic shapes and family codes.
    pub fn surface_half_extent<T: Real>(&self, shape: &ShapeParams<T>, like: T) -> [T; 3] {
        match (shape, &self.shape) {
            (ShapeParams::Primitive(p), _) => p.axis_scale.map(|a| like.constant_like(a * SHAPE_HALF_EXTENT)),
            (ShapeParams::Code(c), ShapeModel::Family(_)) => AnalyticFamily::axis_scale(c).map(|a| a * SHAPE_HALF_EXTENT),
            (ShapeParams::Code(_), ShapeModel::Mlp(_)) => [like.constant_like(UNIT_CUBE_HALF); 3],
        }
    }

    pub fn texture(&self) -> Option<&Mlp> {
        self.texture.as_deref()
    }
}

/// Sampling and optimization settings for [`fit_field`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldFitConfig {
    /// Samples drawn per shape, fixed for the whole fit.
    pub samples_per_shape: usize,
    /// Fraction of samples drawn near the surface; the rest are uniform in the box.
    pub near_surface_fraction: f64,
    /// Near-surface samples satisfy |φ| < this band.
    pub surface_band: f64,
    /// Half width of the sampling box.
    pub box_half: f64,
    pub clamp: f64,
    pub batch_per_shape: usize,
    pub steps: usize,
    pub adam: AdamConfig,
    pub code_learning_rate: f64,
    pub seed: u64,
}

impl Default for FieldFitConfig {
    fn default() -> Self {
        Self {
            samples_per_shape: 8192,
            near_surface_fraction: 0.3,
            surface_band: 0.05,
            box_half: 0.6,
            clamp: 0.1,
            batch_per_shape: 128,
            steps: 10_000,
            adam: AdamConfig { learning_rate: 1e-3, ..AdamConfig::FIELD },
            code_learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl FieldFitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_shape < 1000 {
            return Err(Error::InvalidConfig("need at least 1000 samples per shape".into()));
        }
        if !(0.0..=1.0).contains(&self.near_surface_fraction) || self.surface_band <= 0.0 || self.box_half <= 0.0 {
            return Err(Error::InvalidConfig("invalid sampling region".into()));
        }
        if self.clamp <= 0.0 || self.batch_per_shape == 0 {
            return Err(Error::InvalidConfig("clamp and batch must be positive".into()));
        }
        Ok(())
    }
}

/// Result of [`fit_field`].
#[derive(Debug, Clone)]
pub struct FieldFit {
    pub params: Mlp,
    pub codes: Vec<Vec<f64>>,
    pub loss_history: Vec<f64>,
}

fn clamp(v: f64, c: f64) -> f64 {
    v.max(-c).min(c)
}

/// Draws the fixed sample set of one oracle shape.
pub fn sample_oracle(shape: &AnalyticShape, cfg: &FieldFitConfig, rng: &mut impl Rng) -> Vec<([f64; 3], f64)> {
    let n_near = (cfg.samples_per_shape as f64 * cfg.near_surface_fraction).round() as usize;
    let n_uniform = cfg.samples_per_shape - n_near;
    let h = cfg.box_half;
    let mut out = Vec::with_capacity(cfg.samples_per_shape);
    for _ in 0..n_uniform {
        let x = [rng.gen_range(-h..h), rng.gen_range(-h..h), rng.gen_range(-h..h)];
        out.push((x, shape.sdf(x)));
    }
    let mut near = 0;
    while near < n_near {
        let x = [rng.gen_range(-h..h), rng.gen_range(-h..h), rng.gen_range(-h..h)];
        let d = shape.sdf(x);
        if d.abs() < cfg.surface_band {
            out.push((x, d));
            near += 1;
        }
    }
    out
}

/// Mean clamped absolute error of a network over samples.
pub fn clamped_l1(mlp: &Mlp, code: &[f64], samples: &[([f64; 3], f64)], c: f64) -> f64 {
    let sum: f64 = samples.iter().map(|(x, d)| (clamp(mlp.forward(code, *x)[0], c) - clamp(*d, c)).abs()).sum();
    sum / samples.len() as f64
}

/// Jointly fits network weights and one code per oracle shape by Adam on
/// the clamped L1 signed-distance error.
pub fn fit_field(init: &Mlp, oracles: &[(AnalyticShape, Vec<f64>)], cfg: &FieldFitConfig) -> Result<FieldFit> {
    cfg.validate()?;
    init.validate()?;
    if oracles.is_empty() {
        return Err(Error::InvalidConfig("fit_field needs at least one oracle shape".into()));
    }
    check_dim("sdf outputs", 1, init.outputs())?;
    for (shape, code) in oracles {
        shape.validate()?;
        check_dim("shape code", init.latent_dim, code.len())?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let samples: Vec<Vec<([f64; 3], f64)>> = oracles.iter().map(|(s, _)| sample_oracle(s, cfg, &mut rng)).collect();
    let targets = samples
        .iter()
        .map(|set| set.iter().map(|(x, d)| (*x, vec![*d])).collect::<Vec<_>>())
        .collect::<Vec<_>>();
    let codes: Vec<Vec<f64>> = oracles.iter().map(|(_, c)| c.clone()).collect();
    let trainer = Trainer { loss: PointLoss::ClampedL1(cfg.clamp), batch_per_set: cfg.batch_per_shape, steps: cfg.steps, adam: cfg.adam, code_learning_rate: cfg.code_learning_rate, seed: cfg.seed };
    let (params, codes, loss_history) = trainer.run(init, codes, &targets)?;
    Ok(FieldFit { params, codes, loss_history })
}

/// Per-sample loss used by [`Trainer`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PointLoss {
    /// |clamp(y) − clamp(t)| on a scalar output.
    ClampedL1(f64),
    /// ‖y − t‖² summed over outputs.
    SquaredError,
}

impl PointLoss {
    fn value_and_grad(&self, y: &[f64], t: &[f64], grad: &mut [f64]) -> f64 {
        match *self {
            PointLoss::ClampedL1(c) => {
                let r = clamp(y[0], c) - clamp(t[0], c);
                let inside = y[0] > -c && y[0] < c;
                grad[0] = if inside { r.signum() * (r != 0.0) as u8 as f64 } else { 0.0 };
                r.abs()
            }
            PointLoss::SquaredError => {
                let mut acc = 0.0;
                for k in 0..y.len() {
                    let r = y[k] - t[k];
                    grad[k] = 2.0 * r;
                    acc += r * r;
                }
                acc
            }
        }
    }
}

/// Mini-batch Adam over network weights and per-set codes.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub loss: PointLoss,
    pub batch_per_set: usize,
    pub steps: usize,
    pub adam: AdamConfig,
    pub code_learning_rate: f64,
    pub seed: u64,
}

const CHUNK: usize = 64;

impl Trainer {
    /// Returns trained weights, codes and the per-step mean batch loss.
    /// Gradients are reduced in a fixed chunk order, so results do not
    /// depend on the thread count.
    pub fn run(&self, init: &Mlp, mut codes: Vec<Vec<f64>>, sets: &[Vec<([f64; 3], Vec<f64>)>]) -> Result<(Mlp, Vec<Vec<f64>>, Vec<f64>)> {
        check_dim("code sets", sets.len(), codes.len())?;
        let mut mlp = init.clone();
        let mut params = mlp.flat_params();
        let n_params = params.len();
        let dim = mlp.latent_dim;
        let mut adam = AdamState::new(n_params, self.adam);
        let mut code_adam = AdamState::new(dim * codes.len(), AdamConfig { learning_rate: self.code_learning_rate, ..self.adam });
        let mut flat_codes: Vec<f64> = codes.iter().flatten().copied().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed);
        let mut history = Vec::with_capacity(self.steps);
        let outputs = mlp.outputs();

        for _ in 0..self.steps {
            let mut batch: Vec<(usize, usize)> = Vec::with_capacity(self.batch_per_set * sets.len());
            for (s, set) in sets.iter().enumerate() {
                for _ in 0..self.batch_per_set {
                    batch.push((s, rng.gen_range(0..set.len())));
                }
            }
            let total = batch.len() as f64;
            let partial: Vec<(f64, Vec<f64>, Vec<f64>)> = batch
                .par_chunks(CHUNK)
                .map(|chunk| {
                    let mut gp = vec![0.0; n_params];
                    let mut gc = vec![0.0; dim * sets.len()];
                    let mut loss = 0.0;
                    let mut cache = Cache::default();
                    let mut dy = vec![0.0; outputs];
                    for &(s, i) in chunk {
                        let (x, t) = &sets[s][i];
                        let code = &flat_codes[s * dim..(s + 1) * dim];
                        mlp.forward_cached(code, *x, &mut cache);
                        let y: Vec<f64> = cache.pre.last().unwrap().iter().map(|&v| mlp.activate(v)).collect();
                        loss += self.loss.value_and_grad(&y, t, &mut dy);
                        let (_, dc) = mlp.backward_cached(&cache, &dy, Some(&mut gp));
                        for (g, d) in gc[s * dim..(s + 1) * dim].iter_mut().zip(dc) {
                            *g += d;
                        }
                    }
                    (loss, gp, gc)
                })
                .collect();
            let mut loss = 0.0;
            let mut gp = vec![0.0; n_params];
            let mut gc = vec![0.0; dim * sets.len()];
            for (l, p, c) in partial {
                loss += l;
                gp.iter_mut().zip(p).for_each(|(a, b)| *a += b);
                gc.iter_mut().zip(c).for_each(|(a, b)| *a += b);
            }
            gp.iter_mut().for_each(|g| *g /= total);
            gc.iter_mut().for_each(|g| *g /= total);
            history.push(loss / total);
            adam.step(&mut params, &gp)?;
            if dim > 0 {
                code_adam.step(&mut flat_codes, &gc)?;
            }
            mlp.set_flat_params(&params)?;
        }
        for (s, code) in codes.iter_mut().enumerate() {
            code.copy_from_slice(&flat_codes[s * dim..(s + 1) * dim]);
        }
        Ok((mlp, codes, history))
    }
}

/// Gradient of one sample loss w.r.t. all weights, through the batched path.
pub fn param_gradient(mlp: &Mlp, code: &[f64], x: [f64; 3], d_out: &[f64]) -> Vec<f64> {
    let mut cache = Cache::default();
    mlp.forward_cached(code, x, &mut cache);
    let mut gp = vec![0.0; mlp.param_count()];
    mlp.backward_cached(&cache, d_out, Some(&mut gp));
    gp
}

/// Records Φ with weights as leaves and returns (value, ∂/∂weights).
pub fn param_gradient_on_tape(mlp: &Mlp, code: &[f64], x: [f64; 3], output: usize) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::new();
    let params = tape.vars(&mlp.flat_params());
    let code: Vec<Var> = code.iter().map(|&c| tape.constant(c)).collect();
    let x = x.map(|v| tape.constant(v));
    let out = mlp.eval_with_params(&params, &code, x)?;
    let g = tape.gradient_of(out[output], &params)?;
    Ok((out[output].value(), g))
}
