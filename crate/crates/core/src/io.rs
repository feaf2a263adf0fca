//! On-disk formats: scene documents, depth rasters, PNG images and field
//! weights.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::error::{Error, Result};
use crate::fitting::{SceneLatent, ShapeSlot, SlotLayout, TextureSlot, EXTRINSIC_LEN};
use crate::geometry::{CameraModel, ScaleBounds, Transform4};
use crate::shape_space::{AnalyticShape, Dense, FieldParams, Mlp, OutputActivation, POINT_DIM};

pub const SCENE_VERSION: u32 = 1;
pub const DEPTH_MAGIC: &[u8; 8] = b"SDFDPTH\0";
pub const FIELD_MAGIC: &[u8; 8] = b"SDFFIELD";
pub const FIELD_VERSION: u32 = 1;

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format { path: path.display().to_string(), message: message.into() }
}

/// Camera block of a scene document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraDoc {
    /// Row-major 3×3 camera-to-world rotation.
    pub rotation: [[f64; 3]; 3],
    pub position: [f64; 3],
    pub fov_y: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraDoc {
    pub fn from_camera(cam: &CameraModel) -> Self {
        Self {
            rotation: cam.world_from_camera.linear,
            position: cam.world_from_camera.translation,
            fov_y: cam.fov_y,
            width: cam.width,
            height: cam.height,
        }
    }

    pub fn to_camera(&self) -> Result<CameraModel> {
        CameraModel::new(Transform4 { linear: self.rotation, translation: self.position }, self.width, self.height, self.fov_y)
    }
}

/// A constant color as its pre-logistic parameters plus the decoded value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColorDoc {
    pub raw: [f64; 3],
    /// Informational; `raw` is authoritative.
    pub rgb: [f64; 3],
}

impl ColorDoc {
    fn from_raw(raw: [f64; 3]) -> Self {
        Self { raw, rgb: raw.map(|v| v.sigmoid()) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ShapeDoc {
    Primitive(AnalyticShape),
    Code(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TextureDoc {
    Constant(ColorDoc),
    Code(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtrinsicsDoc {
    pub position: [f64; 3],
    pub z_cos: f64,
    pub z_sin: f64,
    pub raw_scale: f64,
    /// Informational; derived from the raw values above.
    pub scale: f64,
    /// Informational, radians.
    pub theta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectDoc {
    pub shape: ShapeDoc,
    pub texture: TextureDoc,
    pub extrinsics: ExtrinsicsDoc,
}

/// Versioned scene document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub version: u32,
    pub camera: CameraDoc,
    pub scale_bounds: ScaleBounds,
    pub background: ColorDoc,
    pub objects: Vec<ObjectDoc>,
}

impl SceneFile {
    pub fn new(cam: &CameraModel, latent: &SceneLatent) -> Result<Self> {
        latent.validate()?;
        let mut objects = Vec::with_capacity(latent.slot_count());
        for i in 0..latent.slot_count() {
            let (shape_slot, shape_values) = latent.shape_of(i)?;
            let shape = match shape_slot {
                ShapeSlot::Primitive(p) => ShapeDoc::Primitive(p),
                ShapeSlot::Code { .. } => ShapeDoc::Code(shape_values),
            };
            let (tex_slot, tex_values) = latent.texture_of(i)?;
            let texture = match tex_slot {
                TextureSlot::Constant => TextureDoc::Constant(ColorDoc::from_raw([tex_values[0], tex_values[1], tex_values[2]])),
                TextureSlot::Code { .. } => TextureDoc::Code(tex_values),
            };
            let e = latent.extrinsics(i)?;
            let theta = e.theta().unwrap_or(0.0);
            objects.push(ObjectDoc {
                shape,
                texture,
                extrinsics: ExtrinsicsDoc { position: e.position, z_cos: e.z_cos, z_sin: e.z_sin, raw_scale: e.raw_scale, scale: e.scale(), theta },
            });
        }
        let bg = latent.background_range();
        let raw = [latent.params[bg.start], latent.params[bg.start + 1], latent.params[bg.start + 2]];
        Ok(Self {
            version: SCENE_VERSION,
            camera: CameraDoc::from_camera(cam),
            scale_bounds: latent.bounds,
            background: ColorDoc::from_raw(raw),
            objects,
        })
    }

    /// Camera and latent described by the document.
    pub fn to_scene(&self) -> Result<(CameraModel, SceneLatent)> {
        if self.version != SCENE_VERSION {
            return Err(Error::InvalidConfig(format!("unsupported scene version {} (expected {SCENE_VERSION})", self.version)));
        }
        let cam = self.camera.to_camera()?;
        self.scale_bounds.validate()?;
        let mut latent = SceneLatent::new(self.scale_bounds, self.background.raw);
        for obj in &self.objects {
            let (shape, mut values) = match &obj.shape {
                ShapeDoc::Primitive(p) => {
                    p.validate()?;
                    (ShapeSlot::Primitive(*p), Vec::new())
                }
                ShapeDoc::Code(c) => (ShapeSlot::Code { dim: c.len() }, c.clone()),
            };
            let texture = match &obj.texture {
                TextureDoc::Constant(c) => {
                    values.extend(c.raw);
                    TextureSlot::Constant
                }
                TextureDoc::Code(c) => {
                    values.extend_from_slice(c);
                    TextureSlot::Code { dim: c.len() }
                }
            };
            let e = &obj.extrinsics;
            let ext: [f64; EXTRINSIC_LEN] = [e.position[0], e.position[1], e.position[2], e.z_cos, e.z_sin, e.raw_scale];
            values.extend(ext);
            latent.push_slot(SlotLayout { shape, texture }, &values)?;
        }
        for i in 0..latent.slot_count() {
            latent.extrinsics(i)?.validate()?;
        }
        Ok((cam, latent))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene document serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub fn write_scene(path: &Path, cam: &CameraModel, latent: &SceneLatent) -> Result<()> {
    fs::write(path, SceneFile::new(cam, latent)?.to_json())?;
    Ok(())
}

pub fn read_scene(path: &Path) -> Result<(CameraModel, SceneLatent)> {
    let text = fs::read_to_string(path)?;
    let doc = SceneFile::from_json(&text).map_err(|e| format_err(path, e.to_string()))?;
    doc.to_scene().map_err(|e| format_err(path, e.to_string()))
}

/// Encodes a depth raster: magic, `u32` width, `u32` height, then row-major
/// `f32` values, all little-endian.
pub fn encode_depth(depth: &[f64], width: usize, height: usize) -> Result<Vec<u8>> {
    crate::error::check_dim("depth raster", width * height, depth.len())?;
    let mut out = Vec::with_capacity(16 + 4 * depth.len());
    out.extend_from_slice(DEPTH_MAGIC);
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out.extend_from_slice(&(height as u32).to_le_bytes());
    for &d in depth {
        out.extend_from_slice(&(d as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_depth(bytes: &[u8], path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    if bytes.len() < 16 || &bytes[..8] != DEPTH_MAGIC {
        return Err(format_err(path, "missing depth header"));
    }
    let w = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let h = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() != 4 * w * h {
        return Err(format_err(path, format!("expected {} depth bytes for {w}x{h}, found {}", 4 * w * h, body.len())));
    }
    let depth = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
    Ok((depth, w, h))
}

pub fn write_depth(path: &Path, depth: &[f64], width: usize, height: usize) -> Result<()> {
    fs::write(path, encode_depth(depth, width, height)?)?;
    Ok(())
}

pub fn read_depth(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    decode_depth(&fs::read(path)?, path)
}

/// Quantizes a [0, 1] value to 8 bits.
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_rgb_png(path: &Path, color: &[[f64; 3]], width: usize, height: usize) -> Result<()> {
    crate::error::check_dim("rgb image", width * height, color.len())?;
    let img: RgbImage = ImageBuffer::from_fn(width as u32, height as u32, |x, y| {
        let c = color[y as usize * width + x as usize];
        Rgb([to_u8(c[0]), to_u8(c[1]), to_u8(c[2])])
    });
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn read_rgb_png(path: &Path) -> Result<(Vec<[f64; 3]>, usize, usize)> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let px = img.pixels().map(|p| p.0.map(|v| v as f64 / 255.0)).collect();
    Ok((px, w as usize, h as usize))
}

/// 8-bit instance raster: 0 background, `i + 1` for slot `i`.
pub fn write_mask_png(path: &Path, ids: &[u8], width: usize, height: usize) -> Result<()> {
    crate::error::check_dim("mask image", width * height, ids.len())?;
    let img: GrayImage = ImageBuffer::from_fn(width as u32, height as u32, |x, y| Luma([ids[y as usize * width + x as usize]]));
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn read_mask_png(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok((img.into_raw(), w as usize, h as usize))
}

/// Writes `bytes` to `path` through a sibling temporary file, so a failed
/// run leaves no partial output behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn encode_mlp(out: &mut Vec<u8>, mlp: &Mlp) {
    put_u32(out, POINT_DIM);
    put_u32(out, mlp.latent_dim);
    put_u32(out, mlp.concat_at);
    put_u32(out, match mlp.output {
        OutputActivation::Identity => 0,
        OutputActivation::Logistic => 1,
    });
    put_u32(out, mlp.layers.len());
    for l in &mlp.layers {
        put_u32(out, l.outputs);
    }
    for v in mlp.flat_params() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Serializes both networks; see the README for the byte layout.
pub fn encode_field_params(params: &FieldParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(FIELD_MAGIC);
    put_u32(&mut out, FIELD_VERSION as usize);
    put_u32(&mut out, 2);
    encode_mlp(&mut out, &params.sdf);
    encode_mlp(&mut out, &params.texture);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.at + n > self.bytes.len() {
            return Err(format_err(self.path, format!("truncated at byte {}", self.at)));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as f64)
    }
}

fn decode_mlp(r: &mut Reader) -> Result<Mlp> {
    let point = r.u32()?;
    if point != POINT_DIM {
        return Err(format_err(r.path, format!("point dimension {point}, expected {POINT_DIM}")));
    }
    let latent_dim = r.u32()?;
    let concat_at = r.u32()?;
    let output = match r.u32()? {
        0 => OutputActivation::Identity,
        1 => OutputActivation::Logistic,
        k => return Err(format_err(r.path, format!("unknown output activation {k}"))),
    };
    let n_layers = r.u32()?;
    if n_layers == 0 || n_layers > 1024 {
        return Err(format_err(r.path, format!("implausible layer count {n_layers}")));
    }
    let widths = (0..n_layers).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let mut mlp = Mlp::zeros(&widths[..n_layers - 1], latent_dim, concat_at, widths[n_layers - 1], output)
        .map_err(|e| format_err(r.path, e.to_string()))?;
    let flat = (0..mlp.param_count()).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
    mlp.set_flat_params(&flat)?;
    Ok(mlp)
}

pub fn decode_field_params(bytes: &[u8], path: &Path) -> Result<FieldParams> {
    let mut r = Reader { bytes, at: 0, path };
    if r.take(8)? != FIELD_MAGIC {
        return Err(format_err(path, "missing field header"));
    }
    let version = r.u32()?;
    if version != FIELD_VERSION as usize {
        return Err(format_err(path, format!("unsupported field version {version}")));
    }
    let count = r.u32()?;
    if count != 2 {
        return Err(format_err(path, format!("expected 2 networks, found {count}")));
    }
    let sdf = decode_mlp(&mut r)?;
    let texture = decode_mlp(&mut r)?;
    if r.at != bytes.len() {
        return Err(format_err(path, format!("{} trailing bytes", bytes.len() - r.at)));
    }
    Ok(FieldParams { sdf, texture })
}

pub fn write_field_params(path: &Path, params: &FieldParams) -> Result<()> {
    fs::write(path, encode_field_params(params))?;
    Ok(())
}

pub fn read_field_params(path: &Path) -> Result<FieldParams> {
    decode_field_params(&fs::read(path)?, path)
}

/// Rounds every parameter through `f32`, the precision of the file format.
pub fn round_to_f32(mlp: &Mlp) -> Mlp {
    let mut out = mlp.clone();
    out.layers = mlp
        .layers
        .iter()
        .map(|l| Dense {
            inputs: l.inputs,
            outputs: l.outputs,
            weights: l.weights.iter().map(|&v| v as f32 as f64).collect(),
            bias: l.bias.iter().map(|&v| v as f32 as f64).collect(),
        })
        .collect();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ObjectExtrinsics;
    use crate::renderer::ObjectParams;
    use crate::shape_space::{PrimitiveKind, ShapeParams, TextureParams};

    fn latent() -> SceneLatent {
        let b = ScaleBounds::default();
        let mut s = SceneLatent::with_background_color(b, [0.4, 0.4, 0.45]);
        s.push_object(&ObjectParams {
            shape: ShapeParams::Primitive(AnalyticShape::new(PrimitiveKind::Cylinder, [0.9, 0.9, 1.2]).unwrap()),
            texture: TextureParams::Constant([0.8, 0.2, 0.1]),
            extrinsics: ObjectExtrinsics::from_pose([0.3, -0.7, 0.43], 1.1, 0.9, b).unwrap(),
        })
        .unwrap();
        s.push_object(&ObjectParams {
            shape: ShapeParams::Code(vec![0.1, -0.2, 0.0, 1.0, 0.0, 0.0, 0.0, 0.3]),
            texture: TextureParams::Code(vec![0.01; 7]),
            extrinsics: ObjectExtrinsics::from_pose([-1.0, 0.2, 0.4], -2.0, 1.1, b).unwrap(),
        })
        .unwrap();
        s
    }

    #[test]
    fn scene_document_roundtrip() {
        let cam = CameraModel::default_scene(64, 48);
        let l = latent();
        let doc = SceneFile::new(&cam, &l).unwrap();
        let text = doc.to_json();
        let back = SceneFile::from_json(&text).unwrap();
        assert_eq!(back, doc);
        let (cam2, l2) = back.to_scene().unwrap();
        assert_eq!(cam2, cam);
        assert_eq!(l2, l);
        assert_eq!(SceneFile::new(&cam2, &l2).unwrap().to_json(), text);
    }

    #[test]
    fn scene_document_rejects_bad_input() {
        let cam = CameraModel::default_scene(8, 8);
        let mut doc = SceneFile::new(&cam, &latent()).unwrap();
        doc.version = 99;
        assert!(doc.to_scene().is_err());
        let err = SceneFile::from_json("{\n  \"version\": 1,\n  \"camera\": 3\n}").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        let mut text = SceneFile::new(&cam, &latent()).unwrap().to_json();
        text = text.replacen("\"z_cos\"", "\"zcos\"", 1);
        assert!(SceneFile::from_json(&text).is_err());
    }

    #[test]
    fn depth_roundtrip_and_header() {
        let d: Vec<f64> = (0..12).map(|i| 0.5 + i as f64).collect();
        let bytes = encode_depth(&d, 4, 3).unwrap();
        assert_eq!(&bytes[..8], b"SDFDPTH\0");
        assert_eq!(&bytes[8..16], &[4, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(bytes.len(), 16 + 48);
        let (back, w, h) = decode_depth(&bytes, Path::new("x")).unwrap();
        assert_eq!((w, h), (4, 3));
        assert_eq!(back, d);
        assert!(decode_depth(&bytes[..20], Path::new("x")).is_err());
        assert!(decode_depth(b"nonsense........", Path::new("x")).is_err());
    }

    #[test]
    fn png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let color: Vec<[f64; 3]> = (0..6).map(|i| [i as f64 / 5.0, 1.0 - i as f64 / 5.0, 0.5]).collect();
        let p = dir.path().join("a.png");
        write_rgb_png(&p, &color, 3, 2).unwrap();
        let (back, w, h) = read_rgb_png(&p).unwrap();
        assert_eq!((w, h), (3, 2));
        for (a, b) in back.iter().zip(&color) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
        let ids = vec![0, 1, 2, 0, 3, 1];
        let m = dir.path().join("m.png");
        write_mask_png(&m, &ids, 3, 2).unwrap();
        assert_eq!(read_mask_png(&m).unwrap(), (ids, 3, 2));
    }

    #[test]
    fn field_params_roundtrip() {
        let params = FieldParams::new(8, 7, 3);
        let bytes = encode_field_params(&params);
        assert_eq!(&bytes[..8], b"SDFFIELD");
        let header = 8 + 4 + 4;
        let net = |m: &Mlp| 4 * (5 + m.layers.len()) + 4 * m.param_count();
        assert_eq!(bytes.len(), header + net(&params.sdf) + net(&params.texture));
        let back = decode_field_params(&bytes, Path::new("f")).unwrap();
        assert_eq!(back.sdf, round_to_f32(&params.sdf));
        assert_eq!(back.texture, round_to_f32(&params.texture));
        assert!(decode_field_params(&bytes[..bytes.len() - 1], Path::new("f")).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_field_params(&extra, Path::new("f")).is_err());
    }
}
