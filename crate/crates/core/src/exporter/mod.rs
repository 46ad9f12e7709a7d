//! Mesh extraction, texture-camera generation and projective texture baking.

mod bundle;
mod tables;

pub use bundle::{read_bundle, sha256_hex, write_bundle, BundleError, BundleMeta, ExportBundle};

use std::collections::HashMap;

use nalgebra::Matrix3;
use rayon::prelude::*;
use thiserror::Error;

use crate::fields::NeuralModel;
use crate::geometry::{look_at_matrix, Camera, GeometryError, Vec3};
use crate::mesh::Mesh;
use crate::real::Real;
use crate::render::{render_neural, NeuralFrame};
use crate::sdf::SignedDistance;
use crate::tracer::TraceConfig;
use tables::TRI_TABLE;

/// Iso offset: 0.5% of the object radius, with the tracing domain (radius 1)
/// standing in for the object.
pub const DEFAULT_ISO: f64 = 0.005;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExportError {
    #[error("no sign change in the sampling grid")]
    EmptyMesh,
    #[error("resolution must be at least 8, got {0}")]
    Resolution(usize),
    #[error("texture camera layout is degenerate: {0}")]
    DegenerateLayout(&'static str),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Keeps interpolated vertices off the grid corners so no triangle collapses.
const T_MARGIN: f64 = 1e-3;

/// Extracts the level set `f = iso` on a `resolution³` grid over `[-1, 1]³`.
///
/// Grid samples on the boundary are forced outside, so the result is closed
/// even when the field has stray interior regions touching the domain edge.
pub fn marching_cubes<S: SignedDistance + ?Sized>(
    f: &S,
    resolution: usize,
    iso: f64,
) -> Result<Mesh, ExportError> {
    if resolution < 8 {
        return Err(ExportError::Resolution(resolution));
    }
    let n = resolution;
    let np = n + 1;
    let h = 2.0 / n as f64;
    let coord = |i: usize| -1.0 + h * i as f64;
    let grid: Vec<f32> = (0..np)
        .into_par_iter()
        .flat_map_iter(|k| {
            let pts: Vec<[f64; 3]> = (0..np)
                .flat_map(|j| (0..np).map(move |i| [coord(i), coord(j), coord(k)]))
                .collect();
            let mut vals = vec![0.0; pts.len()];
            f.eval_batch(&pts, &mut vals);
            let mut out = Vec::with_capacity(vals.len());
            for (idx, v) in vals.into_iter().enumerate() {
                let (i, j) = (idx % np, idx / np);
                let boundary = [i, j, k].iter().any(|&c| c == 0 || c == n);
                let d = v - iso;
                out.push(if boundary { d.max(h) } else { d } as f32);
            }
            out
        })
        .collect();
    let at = |i: usize, j: usize, k: usize| grid[(k * np + j) * np + i] as f64;

    let mut mesh = Mesh::default();
    let mut edge_vertex: HashMap<u64, u32> = HashMap::new();
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                let mut vals = [0.0; 8];
                let mut case = 0usize;
                for (c, o) in CORNERS.iter().enumerate() {
                    vals[c] = at(i + o[0], j + o[1], k + o[2]);
                    if vals[c] < 0.0 {
                        case |= 1 << c;
                    }
                }
                if case == 0 || case == 255 {
                    continue;
                }
                let row = &TRI_TABLE[case];
                let mut ids = [0u32; 12];
                let mut have = 0u16;
                for tri in row.chunks(3).take_while(|t| t[0] >= 0) {
                    let mut t = [0u32; 3];
                    for (s, &e) in tri.iter().enumerate() {
                        let e = e as usize;
                        if have & (1 << e) == 0 {
                            let [c0, c1] = EDGES[e];
                            let (o0, o1) = (CORNERS[c0], CORNERS[c1]);
                            let g0 = [i + o0[0], j + o0[1], k + o0[2]];
                            let g1 = [i + o1[0], j + o1[1], k + o1[2]];
                            let axis = (0..3).find(|&a| g0[a] != g1[a]).unwrap();
                            let lo = if g0[axis] < g1[axis] { g0 } else { g1 };
                            let key = (((lo[2] * np + lo[1]) * np + lo[0]) * 3 + axis) as u64;
                            ids[e] = *edge_vertex.entry(key).or_insert_with(|| {
                                let (d0, d1) = (vals[c0], vals[c1]);
                                let t = (d0 / (d0 - d1)).clamp(T_MARGIN, 1.0 - T_MARGIN);
                                let p0 = g0.map(coord);
                                let p1 = g1.map(coord);
                                mesh.vertices.push([0, 1, 2].map(|a| p0[a] + t * (p1[a] - p0[a])));
                                (mesh.vertices.len() - 1) as u32
                            });
                            have |= 1 << e;
                        }
                        t[s] = ids[e];
                    }
                    // the table winds clockwise seen from outside
                    mesh.triangles.push([t[0], t[2], t[1]]);
                }
            }
        }
    }
    if mesh.triangles.is_empty() {
        return Err(ExportError::EmptyMesh);
    }
    mesh.remove_degenerate(1e-12);
    mesh.normals = vertex_normals(f, &mesh.vertices);
    Ok(mesh)
}

fn vertex_normals<S: SignedDistance + ?Sized>(f: &S, vertices: &[[f64; 3]]) -> Vec<[f64; 3]> {
    vertices
        .par_chunks(4096)
        .flat_map_iter(|chunk| {
            let mut g = vec![[0.0; 3]; chunk.len()];
            f.gradient_batch(chunk, &mut g);
            g.into_iter().map(|v| {
                let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if l > 0.0 {
                    v.map(|c| c / l)
                } else {
                    [0.0; 3]
                }
            })
        })
        .collect()
}

/// Texture density relative to the capture layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextureLevel {
    /// The base poses.
    X1,
    /// Midpoints between neighbours (3×2 → 5×3).
    X2,
    /// Quarter points (3×2 → 9×5).
    X3,
}

impl TextureLevel {
    pub fn subdivision(self) -> usize {
        match self {
            TextureLevel::X1 => 1,
            TextureLevel::X2 => 2,
            TextureLevel::X3 => 4,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "1" | "1x" => Some(Self::X1),
            "2" | "2x" => Some(Self::X2),
            "3" | "3x" => Some(Self::X3),
            _ => None,
        }
    }
}

/// Point minimizing the summed squared distance to all optical axes.
pub fn common_target(cameras: &[Camera]) -> Result<Vec3, ExportError> {
    let mut a = Matrix3::zeros();
    let mut b = Vec3::zeros();
    for c in cameras {
        let d = c.forward();
        let m = Matrix3::identity() - d * d.transpose();
        a += m;
        b += m * c.center();
    }
    let lu = a.lu();
    if cameras.len() < 2 || lu.determinant().abs() < 1e-9 {
        return Err(ExportError::DegenerateLayout("optical axes do not meet"));
    }
    Ok(lu.solve(&b).unwrap())
}

/// Densifies a grid of capture poses. Base poses are grouped into rows by
/// elevation around the common target and sorted by azimuth; new poses are
/// interpolated in (azimuth, elevation, distance) and aimed at the target.
pub fn generate_texture_cameras(base: &[Camera], level: TextureLevel) -> Result<Vec<Camera>, ExportError> {
    if level == TextureLevel::X1 {
        return Ok(base.to_vec());
    }
    let target = common_target(base)?;
    let offsets: Vec<Vec3> = base.iter().map(|c| c.center() - target).collect();
    let mean_dir = offsets.iter().map(|o| o.normalize()).sum::<Vec3>().normalize();
    // local frame: z toward the cameras, y along the mean camera up
    let up: Vec3 = base
        .iter()
        .map(|c| (c.view().transpose().fixed_view::<3, 1>(0, 1)).into_owned())
        .sum();
    let z = mean_dir;
    let x = up.cross(&z);
    if x.norm() < 1e-9 {
        return Err(ExportError::DegenerateLayout("camera up is parallel to the view axis"));
    }
    let x = x.normalize();
    let y = z.cross(&x);
    let sph: Vec<[f64; 3]> = offsets
        .iter()
        .map(|o| {
            let r = o.norm();
            let (ox, oy, oz) = (o.dot(&x), o.dot(&y), o.dot(&z));
            [ox.atan2(oz), (oy / r).clamp(-1.0, 1.0).asin(), r]
        })
        .collect();
    // collinear positions cannot define a capture surface
    let p0 = base[0].center();
    let rel: Vec<Vec3> = base.iter().map(|c| c.center() - p0).collect();
    let reach = rel.iter().map(|r| r.norm()).fold(0.0, f64::max);
    let area = rel
        .iter()
        .flat_map(|a| rel.iter().map(move |b| a.cross(b).norm()))
        .fold(0.0, f64::max);
    if area <= 1e-9 * reach * reach {
        return Err(ExportError::DegenerateLayout("camera centers are collinear"));
    }

    let mut order: Vec<usize> = (0..base.len()).collect();
    order.sort_by(|&a, &b| sph[a][1].total_cmp(&sph[b][1]));
    let mut rows: Vec<Vec<usize>> = Vec::new();
    for &i in &order {
        match rows.last_mut() {
            Some(r) if (sph[i][1] - sph[r[0]][1]).abs() < 1e-3 => r.push(i),
            _ => rows.push(vec![i]),
        }
    }
    let cols = rows[0].len();
    if cols < 2 || rows.iter().any(|r| r.len() != cols) {
        return Err(ExportError::DegenerateLayout("poses do not form a rows × columns grid"));
    }
    for r in &mut rows {
        r.sort_by(|&a, &b| sph[a][0].total_cmp(&sph[b][0]));
    }
    // top row first
    rows.reverse();
    let s = level.subdivision();
    let (nr, nc) = ((rows.len() - 1) * s + 1, (cols - 1) * s + 1);
    let proto = &base[0];
    let mut out = Vec::with_capacity(nr * nc);
    for ri in 0..nr {
        for ci in 0..nc {
            let (r0, fr) = split(ri, s, rows.len());
            let (c0, fc) = split(ci, s, cols);
            let q = |r: usize, c: usize| sph[rows[r][c]];
            let r1 = (r0 + 1).min(rows.len() - 1);
            let c1 = (c0 + 1).min(cols - 1);
            let mut p = [0.0; 3];
            for a in 0..3 {
                let top = q(r0, c0)[a] * (1.0 - fc) + q(r0, c1)[a] * fc;
                let bot = q(r1, c0)[a] * (1.0 - fc) + q(r1, c1)[a] * fc;
                p[a] = top * (1.0 - fr) + bot * fr;
            }
            let [az, el, r] = p;
            let eye = target + r * (el.cos() * (az.sin() * x + az.cos() * z) + el.sin() * y);
            let view = look_at_matrix(eye, target, y);
            out.push(Camera::new(view, *proto.proj(), proto.width(), proto.height())?);
        }
    }
    Ok(out)
}

fn split(i: usize, s: usize, count: usize) -> (usize, f64) {
    let cell = (i / s).min(count.saturating_sub(2));
    (cell, (i - cell * s) as f64 / s as f64)
}

/// Sphere-traced neural renders at the texture poses.
pub fn bake_textures<R: Real>(model: &NeuralModel<R>, cameras: &[Camera], trace: &TraceConfig) -> Vec<NeuralFrame> {
    cameras.iter().map(|c| render_neural(model, c, trace)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sdf::AnalyticShape;

    fn radii(m: &Mesh) -> Vec<f64> {
        m.vertices
            .iter()
            .map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt())
            .collect()
    }

    #[test]
    fn sphere_vertices_near_radius_and_offset_moves_out() {
        let s = AnalyticShape::Sphere { radius: 0.5 };
        let m0 = marching_cubes(&s, 64, 0.0).unwrap();
        let r0 = radii(&m0);
        assert!(r0.iter().all(|r| (r - 0.5).abs() < 2.0 * 2.0 / 64.0));
        let m1 = marching_cubes(&s, 64, 0.01).unwrap();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&radii(&m1)) > mean(&r0));
        assert!(m0.is_watertight());
    }

    #[test]
    fn triangles_face_along_the_gradient() {
        let s = AnalyticShape::Torus { major: 0.5, minor: 0.2 };
        let m = marching_cubes(&s, 48, 0.0).unwrap();
        let agree = (0..m.triangles.len())
            .filter(|&t| {
                let [a, b, c] = m.triangle(t);
                let centroid = [0, 1, 2].map(|k| (a[k] + b[k] + c[k]) / 3.0);
                crate::mesh::dot(m.face_normal(t), s.normal(centroid)) > 0.0
            })
            .count();
        assert_eq!(agree, m.triangles.len());
        assert!(m.is_watertight());
        assert_eq!(m.euler_characteristic(), 0);
    }

    #[test]
    fn box_is_watertight_genus_zero() {
        let s = AnalyticShape::Box { half: [0.4, 0.3, 0.5] };
        let m = marching_cubes(&s, 128, 0.0).unwrap();
        assert!(m.is_watertight());
        assert_eq!(m.euler_characteristic(), 2);
    }

    #[test]
    fn shape_cut_by_the_domain_is_closed() {
        let s = AnalyticShape::Sphere { radius: 1.2 };
        let m = marching_cubes(&s, 16, 0.0).unwrap();
        assert!(m.is_watertight());
        assert_eq!(m.euler_characteristic(), 2);
    }

    #[test]
    fn empty_and_invalid_grids() {
        // an odd resolution keeps every grid sample off the origin
        let s = AnalyticShape::Sphere { radius: 0.01 };
        assert_eq!(marching_cubes(&s, 9, 0.0), Err(ExportError::EmptyMesh));
        assert_eq!(marching_cubes(&s, 4, 0.0), Err(ExportError::Resolution(4)));
    }

    fn grid_cameras() -> Vec<Camera> {
        let spec = crate::scene_io::SynthSpec {
            layout: crate::scene_io::CameraLayout::Grid {
                center_azimuth_deg: 30.0,
                azimuth_step_deg: 40.0,
                elevation_deg: 20.0,
            },
            ..Default::default()
        };
        spec.cameras().unwrap()
    }

    #[test]
    fn texture_camera_counts_and_targets() {
        let base = grid_cameras();
        assert_eq!(generate_texture_cameras(&base, TextureLevel::X1).unwrap(), base);
        let c2 = generate_texture_cameras(&base, TextureLevel::X2).unwrap();
        let c3 = generate_texture_cameras(&base, TextureLevel::X3).unwrap();
        assert_eq!((c2.len(), c3.len()), (15, 45));
        for c in c2.iter().chain(&c3) {
            let to_origin = (-c.center()).normalize();
            assert!((c.forward().dot(&to_origin) - 1.0).abs() < 1e-9);
            assert!((c.center().norm() - 2.5).abs() < 1e-9);
        }
        // every base pose reappears in the denser layouts
        for b in &base {
            assert!(c3.iter().any(|c| (c.center() - b.center()).norm() < 1e-9));
            assert!(c2.iter().any(|c| (c.center() - b.center()).norm() < 1e-9));
        }
    }

    #[test]
    fn collinear_layout_is_rejected() {
        let cams: Vec<Camera> = [1.0, 2.0, 3.0]
            .iter()
            .map(|&d| {
                Camera::look_at(Vec3::new(0.0, 0.0, d), Vec3::zeros(), Vec3::y(), 40.0, 8, 8).unwrap()
            })
            .collect();
        assert!(matches!(
            generate_texture_cameras(&cams, TextureLevel::X2),
            Err(ExportError::DegenerateLayout(_))
        ));
    }
}
