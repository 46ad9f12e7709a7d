//! On-disk export bundle: mesh, projective textures, depth maps, cameras.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{Camera, GeometryError};
use crate::mesh::{Mesh, MeshError};
use crate::render::NeuralFrame;
use crate::scene_io::{decode_table, encode_u8, Image};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub iso: f64,
    pub resolution: usize,
    /// SHA-256 of the checkpoint the bundle was exported from.
    pub checkpoint_sha256: String,
    pub texture_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportBundle {
    pub mesh: Mesh,
    /// Linear RGB, already quantized to what the PNG stores.
    pub textures: Vec<Image>,
    pub alphas: Vec<Vec<bool>>,
    /// Distance from the texture camera center; `inf` where alpha is 0.
    pub depths: Vec<Vec<f32>>,
    pub cameras: Vec<Camera>,
    pub meta: BundleMeta,
}

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("bundle I/O: {0}")]
    Io(#[from] io::Error),
    #[error("bundle mesh: {0}")]
    Mesh(#[from] MeshError),
    #[error("bundle image: {0}")]
    Image(#[from] image::ImageError),
    #[error("bundle JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("bundle camera {index}: {source}")]
    Camera { index: usize, source: GeometryError },
    #[error("bundle is inconsistent: {0}")]
    Invalid(String),
}

#[derive(Serialize, Deserialize)]
struct CameraRecord {
    texture: String,
    depth: String,
    view: Vec<f64>,
    proj: Vec<f64>,
    width: u32,
    height: u32,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl ExportBundle {
    pub fn new(
        mesh: Mesh,
        frames: Vec<NeuralFrame>,
        cameras: Vec<Camera>,
        iso: f64,
        resolution: usize,
        checkpoint_sha256: String,
    ) -> Self {
        let lut = decode_table();
        let mut textures = Vec::with_capacity(frames.len());
        let mut alphas = Vec::with_capacity(frames.len());
        let mut depths = Vec::with_capacity(frames.len());
        for f in frames {
            let mut img = f.image;
            for (p, &a) in img.data.iter_mut().zip(&f.alpha) {
                *p = if a {
                    p.map(|c| lut[encode_u8(c as f64) as usize])
                } else {
                    [0.0; 3]
                };
            }
            textures.push(img);
            depths.push(
                f.depth
                    .iter()
                    .zip(&f.alpha)
                    .map(|(&d, &a)| if a { d } else { f32::INFINITY })
                    .collect(),
            );
            alphas.push(f.alpha);
        }
        let meta = BundleMeta {
            iso,
            resolution,
            checkpoint_sha256,
            texture_count: cameras.len(),
        };
        Self {
            mesh,
            textures,
            alphas,
            depths,
            cameras,
            meta,
        }
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn validate(&self) -> Result<(), BundleError> {
        let n = self.cameras.len();
        if self.textures.len() != n || self.depths.len() != n || self.alphas.len() != n {
            return Err(BundleError::Invalid("texture, depth and camera counts differ".into()));
        }
        for (i, c) in self.cameras.iter().enumerate() {
            let px = (c.width() * c.height()) as usize;
            let t = &self.textures[i];
            if (t.width, t.height) != (c.width(), c.height())
                || self.alphas[i].len() != px
                || self.depths[i].len() != px
            {
                return Err(BundleError::Invalid(format!("texture {i} size differs from its camera")));
            }
            if self.alphas[i].iter().zip(&self.depths[i]).any(|(&a, d)| a && !d.is_finite()) {
                return Err(BundleError::Invalid(format!("texture {i} has covered pixels without depth")));
            }
        }
        if self.mesh.is_empty() {
            return Err(BundleError::Invalid("mesh is empty".into()));
        }
        Ok(())
    }
}

fn write_pfm(path: &Path, width: u32, height: u32, data: &[f32]) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "Pf\n{width} {height}\n-1.0\n")?;
    // PFM stores rows bottom to top
    for y in (0..height).rev() {
        for x in 0..width {
            w.write_all(&data[(y * width + x) as usize].to_le_bytes())?;
        }
    }
    w.flush()
}

fn read_pfm(path: &Path) -> Result<(u32, u32, Vec<f32>), BundleError> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let bad = || BundleError::Invalid(format!("{} is not a grayscale PFM", path.display()));
    // three whitespace-terminated header tokens
    let mut pos = 0;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if tokens[0] != "Pf" {
        return Err(bad());
    }
    let width: u32 = tokens[1].parse().map_err(|_| bad())?;
    let height: u32 = tokens[2].parse().map_err(|_| bad())?;
    let scale: f32 = tokens[3].parse().map_err(|_| bad())?;
    let n = (width * height) as usize;
    if bytes.len() < pos + 4 * n {
        return Err(bad());
    }
    let mut data = vec![0.0f32; n];
    for (k, c) in bytes[pos..pos + 4 * n].chunks_exact(4).enumerate() {
        let raw = [c[0], c[1], c[2], c[3]];
        let v = if scale < 0.0 {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let (x, yb) = (k as u32 % width, k as u32 / width);
        data[((height - 1 - yb) * width + x) as usize] = v;
    }
    Ok((width, height, data))
}

pub fn write_bundle(dir: &Path, bundle: &ExportBundle) -> Result<(), BundleError> {
    bundle.validate()?;
    fs::create_dir_all(dir.join("tex"))?;
    fs::create_dir_all(dir.join("depth"))?;
    let mut w = BufWriter::new(File::create(dir.join("mesh.obj"))?);
    bundle.mesh.write_obj(&mut w)?;
    w.flush()?;
    let mut records = Vec::with_capacity(bundle.len());
    for (i, cam) in bundle.cameras.iter().enumerate() {
        let tex = format!("tex/tex_{i:03}.png");
        let dep = format!("depth/dep_{i:03}.pfm");
        let (w, h) = (cam.width(), cam.height());
        let t = &bundle.textures[i];
        let a = &bundle.alphas[i];
        let img = image::RgbaImage::from_fn(w, h, |x, y| {
            let k = (y * w + x) as usize;
            let c = t.data[k].map(|v| encode_u8(v as f64));
            image::Rgba([c[0], c[1], c[2], if a[k] { 255 } else { 0 }])
        });
        img.save(dir.join(&tex))?;
        write_pfm(&dir.join(&dep), w, h, &bundle.depths[i])?;
        records.push(CameraRecord {
            texture: tex,
            depth: dep,
            view: cam.view_row_major().to_vec(),
            proj: cam.proj_row_major().to_vec(),
            width: w,
            height: h,
        });
    }
    fs::write(dir.join("cameras.json"), serde_json::to_string_pretty(&records)?)?;
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&bundle.meta)?)?;
    Ok(())
}

pub fn read_bundle(dir: &Path) -> Result<ExportBundle, BundleError> {
    let mesh = Mesh::read_obj(BufReader::new(File::open(dir.join("mesh.obj"))?))?;
    let meta: BundleMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    let records: Vec<CameraRecord> = serde_json::from_str(&fs::read_to_string(dir.join("cameras.json"))?)?;
    let lut = decode_table();
    let mut bundle = ExportBundle {
        mesh,
        textures: Vec::new(),
        alphas: Vec::new(),
        depths: Vec::new(),
        cameras: Vec::new(),
        meta,
    };
    for (index, r) in records.iter().enumerate() {
        let arr = |v: &[f64]| -> Result<[f64; 16], BundleError> {
            v.try_into()
                .map_err(|_| BundleError::Invalid(format!("camera {index} matrix needs 16 values")))
        };
        let cam = Camera::from_row_major(&arr(&r.view)?, &arr(&r.proj)?, r.width, r.height)
            .map_err(|source| BundleError::Camera { index, source })?;
        let img = image::open(dir.join(&r.texture))?.to_rgba8();
        let (_, _, depth) = read_pfm(&dir.join(&r.depth))?;
        bundle.textures.push(Image {
            width: img.width(),
            height: img.height(),
            data: img
                .pixels()
                .map(|p| [0, 1, 2].map(|c| lut[p.0[c] as usize]))
                .collect(),
        });
        bundle.alphas.push(img.pixels().map(|p| p.0[3] > 0).collect());
        bundle.depths.push(depth);
        bundle.cameras.push(cam);
    }
    bundle.validate()?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use crate::mesh::cube_mesh;

    #[test]
    fn bundle_round_trip() {
        let cam = Camera::look_at(Vec3::new(0.3, 0.2, 2.5), Vec3::zeros(), Vec3::y(), 40.0, 5, 4).unwrap();
        let mut image = Image::new(5, 4);
        let mut alpha = vec![false; 20];
        let mut depth = vec![f32::INFINITY; 20];
        for k in 3..11 {
            image.data[k] = [0.1 * (k % 7) as f32, 0.33, 0.9];
            alpha[k] = true;
            depth[k] = 2.0 + k as f32 * 0.01;
        }
        let frame = NeuralFrame {
            image,
            alpha,
            depth,
        };
        let b = ExportBundle::new(cube_mesh(0.4), vec![frame], vec![cam], 0.005, 64, sha256_hex(b"x"));
        let dir = tempfile::tempdir().unwrap();
        write_bundle(dir.path(), &b).unwrap();
        let back = read_bundle(dir.path()).unwrap();
        assert_eq!(back, b);
        for name in ["mesh.obj", "cameras.json", "meta.json", "tex/tex_000.png", "depth/dep_000.pfm"] {
            assert!(dir.path().join(name).is_file(), "{name}");
        }
    }

    #[test]
    fn pfm_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pfm");
        fs::write(&p, b"P6\n1 1\n255\n").unwrap();
        assert!(read_pfm(&p).is_err());
    }
}
