//! Posed multi-view scenes on disk, and a synthetic generator with exact
//! ground truth.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Camera, GeometryError, Ray, Vec3};
use crate::sdf::AnalyticShape;
use crate::tracer::{trace_batch, TraceConfig};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("parse error in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("missing file {path} (view {view})")]
    MissingFile { path: PathBuf, view: usize },
    #[error("view {view}: {what} is {got:?}, camera expects {expected:?}")]
    DimensionMismatch {
        view: usize,
        what: &'static str,
        got: (u32, u32),
        expected: (u32, u32),
    },
    #[error("view {view}: {source}")]
    Camera { view: usize, source: GeometryError },
    #[error("scene has no views")]
    Empty,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

/// Linear RGB image, row-major, row 0 at the top.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub data: Vec<[f32; 3]>,
}

impl Image {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![[0.0; 3]; (width * height) as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> [f32; 3] {
        self.data[(y * self.width + x) as usize]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub camera: Camera,
    pub image: Image,
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub name: String,
    pub views: Vec<View>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ViewRecord {
    image: String,
    mask: String,
    view: Vec<f64>,
    proj: Vec<f64>,
    width: u32,
    height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SceneRecord {
    name: String,
    views: Vec<ViewRecord>,
}

/// sRGB transfer functions on `[0, 1]`.
pub fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

pub fn linear_to_srgb(c: f64) -> f64 {
    let c = c.clamp(0.0, 1.0);
    if c <= 0.003_130_8 {
        c * 12.92
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

pub(crate) fn decode_table() -> &'static [f32; 256] {
    static TABLE: std::sync::OnceLock<[f32; 256]> = std::sync::OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [0.0; 256];
        for (i, v) in t.iter_mut().enumerate() {
            *v = srgb_to_linear(i as f64 / 255.0) as f32;
        }
        t
    })
}

pub fn encode_u8(c: f64) -> u8 {
    (linear_to_srgb(c) * 255.0).round() as u8
}

/// Same value the loader produces for this linear input.
pub fn quantize(c: f64) -> f32 {
    decode_table()[encode_u8(c) as usize]
}

pub fn save_png(path: &Path, img: &Image) -> Result<(), SceneError> {
    let mut buf = image::RgbImage::new(img.width, img.height);
    for (p, c) in buf.pixels_mut().zip(&img.data) {
        *p = image::Rgb(c.map(|v| encode_u8(v as f64)));
    }
    buf.save(path)?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<Image, SceneError> {
    let lut = decode_table();
    let img = image::open(path)?.to_rgb8();
    Ok(Image {
        width: img.width(),
        height: img.height(),
        data: img.pixels().map(|p| p.0.map(|v| lut[v as usize])).collect(),
    })
}

pub fn save_mask(path: &Path, mask: &[bool], width: u32, height: u32) -> Result<(), SceneError> {
    let buf = image::GrayImage::from_fn(width, height, |x, y| {
        image::Luma([if mask[(y * width + x) as usize] { 255 } else { 0 }])
    });
    buf.save(path)?;
    Ok(())
}

pub fn load_mask(path: &Path) -> Result<(Vec<bool>, u32, u32), SceneError> {
    let img = image::open(path)?.to_luma8();
    Ok((
        img.pixels().map(|p| p.0[0] >= 128).collect(),
        img.width(),
        img.height(),
    ))
}

pub fn load_scene(dir: &Path) -> Result<Scene, SceneError> {
    let path = dir.join("scene.json");
    let text = fs::read_to_string(&path).map_err(|_| SceneError::MissingFile {
        path: path.clone(),
        view: 0,
    })?;
    let rec: SceneRecord = serde_json::from_str(&text).map_err(|e| SceneError::Parse {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    if rec.views.is_empty() {
        return Err(SceneError::Empty);
    }
    let views: Result<Vec<View>, SceneError> = rec
        .views
        .par_iter()
        .enumerate()
        .map(|(i, v)| load_view(dir, i, v))
        .collect();
    Ok(Scene {
        name: rec.name,
        views: views?,
    })
}

fn load_view(dir: &Path, i: usize, v: &ViewRecord) -> Result<View, SceneError> {
    let parse = |m: &[f64], what: &str| -> Result<[f64; 16], SceneError> {
        m.try_into().map_err(|_| SceneError::Parse {
            path: dir.join("scene.json"),
            msg: format!("view {i}: {what} needs 16 entries, got {}", m.len()),
        })
    };
    let camera = Camera::from_row_major(
        &parse(&v.view, "view")?,
        &parse(&v.proj, "proj")?,
        v.width,
        v.height,
    )
    .map_err(|source| SceneError::Camera { view: i, source })?;
    let ip = dir.join(&v.image);
    let mp = dir.join(&v.mask);
    for p in [&ip, &mp] {
        if !p.exists() {
            return Err(SceneError::MissingFile {
                path: p.clone(),
                view: i,
            });
        }
    }
    let image = load_png(&ip)?;
    let expected = (v.width, v.height);
    if (image.width, image.height) != expected {
        return Err(SceneError::DimensionMismatch {
            view: i,
            what: "image",
            got: (image.width, image.height),
            expected,
        });
    }
    let (mask, mw, mh) = load_mask(&mp)?;
    if (mw, mh) != expected {
        return Err(SceneError::DimensionMismatch {
            view: i,
            what: "mask",
            got: (mw, mh),
            expected,
        });
    }
    Ok(View {
        camera,
        image,
        mask,
    })
}

/// Writes `scene.json` plus `img_###.png` / `mask_###.png`.
pub fn write_scene(dir: &Path, scene: &Scene) -> Result<(), SceneError> {
    fs::create_dir_all(dir)?;
    let mut records = Vec::new();
    for (i, v) in scene.views.iter().enumerate() {
        let image = format!("img_{i:03}.png");
        let mask = format!("mask_{i:03}.png");
        save_png(&dir.join(&image), &v.image)?;
        save_mask(&dir.join(&mask), &v.mask, v.image.width, v.image.height)?;
        records.push(ViewRecord {
            image,
            mask,
            view: v.camera.view_row_major().to_vec(),
            proj: v.camera.proj_row_major().to_vec(),
            width: v.camera.width(),
            height: v.camera.height(),
        });
    }
    let rec = SceneRecord {
        name: scene.name.clone(),
        views: records,
    };
    fs::write(
        dir.join("scene.json"),
        serde_json::to_string_pretty(&rec).expect("scene record serializes"),
    )?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Albedo {
    /// Smoothed 3D checker with the given spatial frequency.
    Checker { frequency: f64 },
    /// Value noise with the given spatial frequency.
    Noise { frequency: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CameraLayout {
    /// Evenly spaced azimuths, elevation alternating `±elevation_deg`.
    Ring { elevation_deg: f64 },
    /// Three azimuths × two elevations around `center_azimuth_deg`.
    Grid {
        center_azimuth_deg: f64,
        azimuth_step_deg: f64,
        elevation_deg: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub shape: AnalyticShape,
    pub albedo: Albedo,
    pub specular_strength: f64,
    pub specular_exponent: f64,
    pub ambient: f64,
    /// Direction towards the light.
    pub light_dir: [f64; 3],
    pub layout: CameraLayout,
    pub views: usize,
    pub distance: f64,
    pub fovy_deg: f64,
    pub size: u32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            shape: AnalyticShape::Sphere { radius: 0.5 },
            albedo: Albedo::Checker { frequency: 3.0 },
            specular_strength: 0.4,
            specular_exponent: 20.0,
            ambient: 0.25,
            light_dir: [0.4, 0.7, 0.6],
            layout: CameraLayout::Ring { elevation_deg: 20.0 },
            views: 16,
            distance: 2.5,
            fovy_deg: 40.0,
            size: 64,
            seed: 0,
        }
    }
}

fn hash3(i: i64, j: i64, k: i64, seed: u64) -> f64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in [i, j, k] {
        h ^= v as u64;
        h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 31;
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(p: [f64; 3], seed: u64) -> f64 {
    let f = p.map(f64::floor);
    let t = [p[0] - f[0], p[1] - f[1], p[2] - f[2]].map(|v| v * v * (3.0 - 2.0 * v));
    let (i, j, k) = (f[0] as i64, f[1] as i64, f[2] as i64);
    let mut acc = 0.0;
    for c in 0..8 {
        let (dx, dy, dz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
        let w = (if dx == 1 { t[0] } else { 1.0 - t[0] })
            * (if dy == 1 { t[1] } else { 1.0 - t[1] })
            * (if dz == 1 { t[2] } else { 1.0 - t[2] });
        acc += w * hash3(i + dx as i64, j + dy as i64, k + dz as i64, seed);
    }
    acc
}

const COLOR_A: [f64; 3] = [0.85, 0.35, 0.2];
const COLOR_B: [f64; 3] = [0.2, 0.45, 0.8];

impl SynthSpec {
    pub fn albedo_at(&self, p: [f64; 3]) -> [f64; 3] {
        let s = match self.albedo {
            Albedo::Checker { frequency } => {
                let w = std::f64::consts::PI * frequency;
                let v = (w * p[0]).sin() * (w * p[1]).sin() * (w * p[2]).sin();
                0.5 + 0.5 * (6.0 * v).tanh()
            }
            Albedo::Noise { frequency } => value_noise(p.map(|v| v * frequency), self.seed),
        };
        [0, 1, 2].map(|c| COLOR_A[c] * s + COLOR_B[c] * (1.0 - s))
    }

    /// Linear RGB of surface point `p` with normal `n` seen along `dir`.
    pub fn shade(&self, p: [f64; 3], n: [f64; 3], dir: [f64; 3]) -> [f64; 3] {
        let l = Vec3::from(self.light_dir).normalize();
        let n = Vec3::from(n);
        let v = -Vec3::from(dir);
        let ndl = n.dot(&l).max(0.0);
        let r = n * (2.0 * n.dot(&l)) - l;
        let spec = if ndl > 0.0 {
            self.specular_strength * r.dot(&v).max(0.0).powf(self.specular_exponent)
        } else {
            0.0
        };
        let a = self.albedo_at(p);
        let diffuse = self.ambient + (1.0 - self.ambient) * ndl;
        [0, 1, 2].map(|c| (a[c] * diffuse + spec).clamp(0.0, 1.0))
    }

    pub fn cameras(&self) -> Result<Vec<Camera>, GeometryError> {
        let eye = |az: f64, el: f64| {
            let (az, el) = (az.to_radians(), el.to_radians());
            Vec3::new(
                self.distance * el.cos() * az.sin(),
                self.distance * el.sin(),
                self.distance * el.cos() * az.cos(),
            )
        };
        let mut eyes = Vec::new();
        match self.layout {
            CameraLayout::Ring { elevation_deg } => {
                for i in 0..self.views {
                    let el = if i % 2 == 0 { elevation_deg } else { -elevation_deg };
                    eyes.push(eye(360.0 * i as f64 / self.views as f64, el));
                }
            }
            CameraLayout::Grid {
                center_azimuth_deg,
                azimuth_step_deg,
                elevation_deg,
            } => {
                for el in [elevation_deg, -elevation_deg] {
                    for c in -1..=1 {
                        eyes.push(eye(center_azimuth_deg + c as f64 * azimuth_step_deg, el));
                    }
                }
            }
        }
        eyes.into_iter()
            .map(|e| {
                Camera::look_at(e, Vec3::zeros(), Vec3::y(), self.fovy_deg, self.size, self.size)
            })
            .collect()
    }
}

/// Renders the analytic scene from `camera` with pixel-centre sampling.
pub fn render_analytic(spec: &SynthSpec, camera: &Camera) -> (Image, Vec<bool>) {
    let (w, h) = (camera.width(), camera.height());
    let rays: Vec<Ray> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .map(|(x, y)| camera.pixel_ray(x, y))
        .collect();
    let cfg = TraceConfig {
        n_steps: 64,
        converge_eps: 1e-9,
        accept_eps: 1e-6,
        scan_samples: 400,
        section_steps: 40,
        ..TraceConfig::default()
    };
    let hits = trace_batch(&spec.shape, &rays, &cfg);
    let mut img = Image::new(w, h);
    let mut mask = vec![false; (w * h) as usize];
    for (i, (hit, r)) in hits.iter().zip(&rays).enumerate() {
        if hit.is_hit() {
            mask[i] = true;
            let c = spec.shade(hit.x, spec.shape.normal(hit.x), [r.dir.x, r.dir.y, r.dir.z]);
            img.data[i] = c.map(quantize);
        }
    }
    (img, mask)
}

/// Renders every camera of the layout; pixels are quantized exactly as a
/// PNG round trip would.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Scene, GeometryError> {
    let views = spec
        .cameras()?
        .into_iter()
        .map(|camera| {
            let (image, mask) = render_analytic(spec, &camera);
            View {
                camera,
                image,
                mask,
            }
        })
        .collect();
    let name = match spec.shape {
        AnalyticShape::Sphere { .. } => "sphere",
        AnalyticShape::Torus { .. } => "torus",
        AnalyticShape::Box { .. } => "box",
    };
    Ok(Scene {
        name: format!("synthetic-{name}"),
        views,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn srgb_round_trip_is_stable() {
        for i in 0..=255u8 {
            let lin = srgb_to_linear(i as f64 / 255.0);
            assert_eq!(encode_u8(lin), i);
        }
    }

    #[test]
    fn frontal_sphere_mask_is_a_disk() {
        let spec = SynthSpec {
            distance: 2.0,
            ..SynthSpec::default()
        };
        let cam = Camera::look_at(
            Vec3::new(0.0, 0.0, 2.0),
            Vec3::zeros(),
            Vec3::y(),
            spec.fovy_deg,
            64,
            64,
        )
        .unwrap();
        let (_, mask) = render_analytic(&spec, &cam);
        // silhouette half-angle asin(r/d), projected through the focal length
        let f = 32.0 / (spec.fovy_deg.to_radians() / 2.0).tan();
        let r_px = f * (0.5f64 / 2.0).asin().tan();
        for y in 0..64 {
            for x in 0..64 {
                let d = ((x as f64 + 0.5 - 32.0).powi(2) + (y as f64 + 0.5 - 32.0).powi(2)).sqrt();
                if d < r_px - 1.0 {
                    assert!(mask[y * 64 + x]);
                }
                if d > r_px + 1.0 {
                    assert!(!mask[y * 64 + x]);
                }
            }
        }
    }

    #[test]
    fn diffuse_color_is_view_independent() {
        let spec = SynthSpec {
            specular_strength: 0.0,
            ..SynthSpec::default()
        };
        let p = [0.0, 0.0, 0.5];
        let n = [0.0, 0.0, 1.0];
        let a = spec.shade(p, n, [0.0, 0.0, -1.0]);
        let b = spec.shade(p, n, [0.6, 0.0, -0.8]);
        assert_eq!(a, b);
    }
}
