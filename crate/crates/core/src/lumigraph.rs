//! CPU unstructured-lumigraph rendering of an export bundle.
//!
//! The mesh is rasterized into a buffer of world positions. Each covered pixel
//! then blends the `k` texture cameras whose rays to the surface point make the
//! smallest angle with the viewer's ray, skipping textures that do not see it.

use rayon::prelude::*;

use crate::exporter::ExportBundle;
use crate::geometry::{Camera, GeometryError, Vec3};
use crate::mesh::Mesh;
use crate::scene_io::Image;

#[derive(Debug, Clone, PartialEq)]
pub struct GBuffer {
    pub width: u32,
    pub height: u32,
    /// World position per pixel; meaningful only where `covered`.
    pub position: Vec<[f64; 3]>,
    /// Distance from the camera center; `inf` where not covered.
    pub depth: Vec<f64>,
    pub covered: Vec<bool>,
}

const SUBPIXEL: f64 = 256.0;
const BAND: u32 = 16;

struct ScreenTri {
    // fixed-point screen vertices, counter-clockwise in the y-down frame
    p: [[i64; 2]; 3],
    z: [f64; 3],
    inv_w: [f64; 3],
    world: [[f64; 3]; 3],
    area: i64,
    y_range: (u32, u32),
    x_range: (u32, u32),
}

fn edge(a: [i64; 2], b: [i64; 2], p: [i64; 2]) -> i64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

fn top_left(a: [i64; 2], b: [i64; 2]) -> bool {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    dy < 0 || (dy == 0 && dx > 0)
}

fn setup(mesh: &Mesh, cam: &Camera) -> Vec<ScreenTri> {
    let vp = cam.view_proj();
    let (w, h) = (cam.width(), cam.height());
    let verts: Vec<Option<([i64; 2], f64, f64)>> = mesh
        .vertices
        .iter()
        .map(|v| {
            let c = vp * nalgebra::Vector4::new(v[0], v[1], v[2], 1.0);
            if c.w <= 1e-9 {
                return None;
            }
            let (sx, sy) = cam.ndc_to_pixel(c.x / c.w, c.y / c.w);
            if !(sx.abs() < 1e6 && sy.abs() < 1e6) {
                return None;
            }
            let fp = [(sx * SUBPIXEL).round() as i64, (sy * SUBPIXEL).round() as i64];
            Some((fp, c.z / c.w, 1.0 / c.w))
        })
        .collect();
    let half = (SUBPIXEL / 2.0) as i64;
    let s = SUBPIXEL as i64;
    let mut out = Vec::new();
    for t in &mesh.triangles {
        let Some(a) = verts[t[0] as usize] else { continue };
        let Some(mut b) = verts[t[1] as usize] else { continue };
        let Some(mut c) = verts[t[2] as usize] else { continue };
        let mut world = t.map(|i| mesh.vertices[i as usize]);
        let mut area = edge(a.0, b.0, c.0);
        if area == 0 {
            continue;
        }
        if area < 0 {
            std::mem::swap(&mut b, &mut c);
            world.swap(1, 2);
            area = -area;
        }
        let p = [a.0, b.0, c.0];
        let min = |k: usize| p.iter().map(|q| q[k]).min().unwrap();
        let max = |k: usize| p.iter().map(|q| q[k]).max().unwrap();
        // pixel i has its center at (i + 0.5) * SUBPIXEL
        let lo = |v: i64| (v - half + s - 1).div_euclid(s).max(0);
        let hi = |v: i64, lim: u32| (v - half).div_euclid(s).min(lim as i64 - 1);
        let (x0, x1) = (lo(min(0)), hi(max(0), w));
        let (y0, y1) = (lo(min(1)), hi(max(1), h));
        if x0 > x1 || y0 > y1 {
            continue;
        }
        out.push(ScreenTri {
            p,
            z: [a.1, b.1, c.1],
            inv_w: [a.2, b.2, c.2],
            world,
            area,
            y_range: (y0 as u32, y1 as u32),
            x_range: (x0 as u32, x1 as u32),
        });
    }
    out
}

/// Z-buffered perspective rasterization with the top-left fill rule.
/// Triangles behind the camera plane are dropped rather than clipped.
pub fn rasterize(mesh: &Mesh, camera: &Camera, width: u32, height: u32) -> Result<GBuffer, GeometryError> {
    let cam = camera.with_size(width, height)?;
    let tris = setup(mesh, &cam);
    let bands = height.div_ceil(BAND) as usize;
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); bands];
    for (k, t) in tris.iter().enumerate() {
        for b in (t.y_range.0 / BAND)..=(t.y_range.1 / BAND) {
            bins[b as usize].push(k as u32);
        }
    }
    let center = cam.center();
    let s = SUBPIXEL as i64;
    let half = s / 2;
    let w = width as usize;
    let parts: Vec<(Vec<f64>, Vec<[f64; 3]>)> = bins
        .par_iter()
        .enumerate()
        .map(|(b, bin)| {
            let y0 = b as u32 * BAND;
            let y1 = (y0 + BAND).min(height);
            let rows = (y1 - y0) as usize;
            let mut zbuf = vec![f64::INFINITY; rows * w];
            let mut pos = vec![[0.0; 3]; rows * w];
            for &k in bin {
                let t = &tris[k as usize];
                let [a, bb, c] = t.p;
                let bias = [top_left(bb, c), top_left(c, a), top_left(a, bb)];
                let area = t.area as f64;
                for y in t.y_range.0.max(y0)..=t.y_range.1.min(y1 - 1) {
                    let py = y as i64 * s + half;
                    for x in t.x_range.0..=t.x_range.1 {
                        let q = [x as i64 * s + half, py];
                        let e = [edge(bb, c, q), edge(c, a, q), edge(a, bb, q)];
                        if (0..3).any(|i| e[i] < 0 || (e[i] == 0 && !bias[i])) {
                            continue;
                        }
                        let l = e.map(|v| v as f64 / area);
                        let z = l[0] * t.z[0] + l[1] * t.z[1] + l[2] * t.z[2];
                        let slot = (y - y0) as usize * w + x as usize;
                        if z < zbuf[slot] {
                            zbuf[slot] = z;
                            let pw = [0, 1, 2].map(|i| l[i] * t.inv_w[i]);
                            let sum = pw[0] + pw[1] + pw[2];
                            pos[slot] = [0, 1, 2].map(|c| {
                                (pw[0] * t.world[0][c] + pw[1] * t.world[1][c] + pw[2] * t.world[2][c]) / sum
                            });
                        }
                    }
                }
            }
            (zbuf, pos)
        })
        .collect();
    let n = w * height as usize;
    let mut g = GBuffer {
        width,
        height,
        position: Vec::with_capacity(n),
        depth: Vec::with_capacity(n),
        covered: Vec::with_capacity(n),
    };
    for (zbuf, pos) in parts {
        for (z, p) in zbuf.into_iter().zip(pos) {
            let hit = z.is_finite();
            g.covered.push(hit);
            g.position.push(if hit { p } else { [0.0; 3] });
            g.depth.push(if hit {
                (Vec3::from(p) - center).norm()
            } else {
                f64::INFINITY
            });
        }
    }
    Ok(g)
}

/// Normalized blending weights for angles sorted ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendWeights {
    pub weights: Vec<f64>,
    /// All angles equal; weights fell back to uniform.
    pub degenerate: bool,
}

/// `ŵ_i = (1/τ_i)(1 − τ_i/τ_k)`, normalized to sum to one.
pub fn blend_weights(tau: &[f64]) -> BlendWeights {
    let k = tau.len();
    debug_assert!(k >= 1);
    let zeros = tau.iter().filter(|&&t| t <= 0.0).count();
    if zeros > 0 {
        // limit τ_i → 0: those candidates take all the weight
        let w = 1.0 / zeros as f64;
        return BlendWeights {
            weights: tau.iter().map(|&t| if t <= 0.0 { w } else { 0.0 }).collect(),
            degenerate: false,
        };
    }
    let tk = tau[k - 1];
    let raw: Vec<f64> = tau.iter().map(|&t| (1.0 / t) * (1.0 - t / tk)).collect();
    let sum: f64 = raw.iter().sum();
    if !(sum >= 1e-9) {
        return BlendWeights {
            weights: vec![1.0 / k as f64; k],
            degenerate: true,
        };
    }
    BlendWeights {
        weights: raw.iter().map(|w| w / sum).collect(),
        degenerate: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LumigraphOptions {
    pub k: usize,
    /// Depth tolerance for the visibility test, in scene units.
    pub bias: f64,
    /// Paint pixels no texture sees magenta instead of leaving them empty.
    pub debug: bool,
}

impl Default for LumigraphOptions {
    fn default() -> Self {
        Self {
            k: 5,
            bias: 1e-3,
            debug: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LumiFrame {
    pub image: Image,
    pub alpha: Vec<bool>,
}

const MAGENTA: [f32; 3] = [1.0, 0.0, 1.0];

/// Texture lookup of a world point: alpha-weighted bilinear color and depth,
/// `None` when outside the frame or on background.
fn sample(bundle: &ExportBundle, i: usize, x: &Vec3) -> Option<([f32; 3], f64)> {
    let cam = &bundle.cameras[i];
    let ndc = cam.project(x)?;
    let (cx, cy) = cam.ndc_to_pixel(ndc.x, ndc.y);
    let (w, h) = (cam.width() as i64, cam.height() as i64);
    let (u, v) = (cx - 0.5, cy - 0.5);
    let (nx, ny) = (cx.floor() as i64, cy.floor() as i64);
    if nx < 0 || ny < 0 || nx >= w || ny >= h {
        return None;
    }
    let alpha = &bundle.alphas[i];
    if !alpha[(ny * w + nx) as usize] {
        return None;
    }
    let (x0, y0) = (u.floor() as i64, v.floor() as i64);
    let (fx, fy) = (u - x0 as f64, v - y0 as f64);
    let tex = &bundle.textures[i];
    let dep = &bundle.depths[i];
    let mut acc = [0.0f64; 3];
    let mut d = 0.0;
    let mut wsum = 0.0;
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            let (px, py) = (x0 + dx, y0 + dy);
            if px < 0 || py < 0 || px >= w || py >= h {
                continue;
            }
            let k = (py * w + px) as usize;
            let wt = wx * wy;
            if !alpha[k] || wt == 0.0 {
                continue;
            }
            for c in 0..3 {
                acc[c] += wt * tex.data[k][c] as f64;
            }
            d += wt * dep[k] as f64;
            wsum += wt;
        }
    }
    if wsum == 0.0 {
        // the nearest pixel is covered, so this only happens on exact zero weights
        let k = (ny * w + nx) as usize;
        return Some((tex.data[k], dep[k] as f64));
    }
    Some((acc.map(|c| (c / wsum) as f32), d / wsum))
}

/// True when texture `i` sees `x`: inside its frame, on foreground, and not
/// behind the stored depth by more than `bias`.
pub fn occlusion_test(x: [f64; 3], i: usize, bundle: &ExportBundle, bias: f64) -> bool {
    let x = Vec3::from(x);
    match sample(bundle, i, &x) {
        Some((_, d)) => d >= (x - bundle.cameras[i].center()).norm() - bias,
        None => false,
    }
}

fn shade_pixel(
    bundle: &ExportBundle,
    centers: &[Vec3],
    eye: &Vec3,
    p: [f64; 3],
    opts: &LumigraphOptions,
    cand: &mut Vec<(f64, usize, [f32; 3])>,
) -> Option<[f32; 3]> {
    let x = Vec3::from(p);
    let to_eye = (eye - x).normalize();
    cand.clear();
    for (i, c) in centers.iter().enumerate() {
        let Some((rgb, d)) = sample(bundle, i, &x) else { continue };
        let to_tex = c - x;
        let dist = to_tex.norm();
        if d < dist - opts.bias {
            continue;
        }
        let tau = (to_eye.dot(&to_tex) / dist).clamp(-1.0, 1.0).acos();
        cand.push((tau, i, rgb));
    }
    if cand.is_empty() {
        return None;
    }
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let k = opts.k.max(2);
    let used = cand.len().min(k);
    let mut tau: Vec<f64> = cand[..used].iter().map(|c| c.0).collect();
    if used < k {
        // fewer candidates than k: a virtual worst candidate keeps the last
        // real one weighted; it must stay positive so a τ = 0 candidate
        // does not share its weight with it
        let last = tau[used - 1];
        tau.push(if last > 0.0 { 1.1 * last } else { 1.0 });
    }
    let w = blend_weights(&tau).weights;
    let mut out = [0.0f64; 3];
    for (c, wi) in cand[..used].iter().zip(&w) {
        for ch in 0..3 {
            out[ch] += wi * c.2[ch] as f64;
        }
    }
    Some(out.map(|v| v as f32))
}

/// Renders the bundle from `camera` at `width × height`.
pub fn render_view(
    bundle: &ExportBundle,
    camera: &Camera,
    width: u32,
    height: u32,
    opts: &LumigraphOptions,
) -> Result<LumiFrame, GeometryError> {
    let g = rasterize(&bundle.mesh, camera, width, height)?;
    Ok(blend_gbuffer(bundle, camera, &g, opts))
}

/// Blending pass over an existing G-buffer.
pub fn blend_gbuffer(bundle: &ExportBundle, camera: &Camera, g: &GBuffer, opts: &LumigraphOptions) -> LumiFrame {
    let centers: Vec<Vec3> = bundle.cameras.iter().map(|c| c.center()).collect();
    let eye = camera.center();
    let w = g.width as usize;
    let rows: Vec<Vec<([f32; 3], bool)>> = (0..g.height as usize)
        .into_par_iter()
        .map(|y| {
            let mut cand = Vec::with_capacity(centers.len());
            (0..w)
                .map(|x| {
                    let k = y * w + x;
                    if !g.covered[k] {
                        return ([0.0; 3], false);
                    }
                    match shade_pixel(bundle, &centers, &eye, g.position[k], opts, &mut cand) {
                        Some(c) => (c, true),
                        None if opts.debug => (MAGENTA, true),
                        None => ([0.0; 3], false),
                    }
                })
                .collect()
        })
        .collect();
    let mut image = Image::new(g.width, g.height);
    let mut alpha = Vec::with_capacity(w * g.height as usize);
    for (k, (c, a)) in rows.into_iter().flatten().enumerate() {
        image.data[k] = c;
        alpha.push(a);
    }
    LumiFrame { image, alpha }
}

/// Index of the texture camera whose viewing direction is closest to `camera`'s.
pub fn nearest_texture(bundle: &ExportBundle, camera: &Camera) -> Option<usize> {
    let f = camera.forward();
    (0..bundle.len()).max_by(|&a, &b| {
        let da = bundle.cameras[a].forward().dot(&f);
        let db = bundle.cameras[b].forward().dot(&f);
        da.total_cmp(&db).then(b.cmp(&a))
    })
}

/// Reprojection of one texture onto the mesh; pixels it does not see stay empty.
pub fn render_single_texture(
    bundle: &ExportBundle,
    index: usize,
    camera: &Camera,
    width: u32,
    height: u32,
    bias: f64,
) -> Result<LumiFrame, GeometryError> {
    let g = rasterize(&bundle.mesh, camera, width, height)?;
    let c = bundle.cameras[index].center();
    let mut image = Image::new(width, height);
    let mut alpha = vec![false; g.covered.len()];
    for k in 0..g.covered.len() {
        if !g.covered[k] {
            continue;
        }
        let x = Vec3::from(g.position[k]);
        if let Some((rgb, d)) = sample(bundle, index, &x) {
            if d >= (x - c).norm() - bias {
                image.data[k] = rgb;
                alpha[k] = true;
            }
        }
    }
    Ok(LumiFrame { image, alpha })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_weights() {
        let w = blend_weights(&[0.1, 0.2, 0.3, 0.4, 0.5]).weights;
        let want = [0.6234, 0.2338, 0.1039, 0.0390, 0.0];
        for (a, b) in w.iter().zip(want) {
            assert!((a - b).abs() < 1e-4, "{w:?}");
        }
    }

    #[test]
    fn near_zero_angle_dominates() {
        let w = blend_weights(&[1e-9, 0.2, 0.3, 0.4, 0.5]).weights;
        assert!(w[0] > 0.999);
        let w = blend_weights(&[0.0, 0.2, 0.3]).weights;
        assert_eq!(w, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn equal_angles_fall_back_to_uniform() {
        let b = blend_weights(&[0.3; 4]);
        assert!(b.degenerate);
        assert_eq!(b.weights, vec![0.25; 4]);
    }

    fn quad_mesh(z: f64) -> Mesh {
        Mesh {
            vertices: vec![[-0.5, -0.5, z], [0.5, -0.5, z], [0.5, 0.5, z], [-0.5, 0.5, z]],
            normals: vec![[0.0, 0.0, 1.0]; 4],
            triangles: vec![[0, 1, 2], [0, 2, 3]],
        }
    }

    #[test]
    fn shared_edges_cover_each_pixel_once() {
        // count coverage per triangle by rasterizing them separately
        let cam = Camera::look_at(Vec3::new(0.0, 0.0, 2.0), Vec3::zeros(), Vec3::y(), 40.0, 64, 64).unwrap();
        let m = quad_mesh(0.0);
        let mut count = vec![0; 64 * 64];
        for t in 0..2 {
            let single = Mesh {
                triangles: vec![m.triangles[t]],
                ..m.clone()
            };
            let g = rasterize(&single, &cam, 64, 64).unwrap();
            for (c, &v) in count.iter_mut().zip(&g.covered) {
                *c += v as i32;
            }
        }
        let g = rasterize(&m, &cam, 64, 64).unwrap();
        for (c, &v) in count.iter().zip(&g.covered) {
            assert!(*c <= 1);
            assert_eq!(*c == 1, v);
        }
        assert!(g.covered[32 * 64 + 32]);
        assert!(!g.covered[0]);
    }

    #[test]
    fn nearer_surface_wins() {
        let cam = Camera::look_at(Vec3::new(0.0, 0.0, 2.0), Vec3::zeros(), Vec3::y(), 40.0, 16, 16).unwrap();
        let mut m = quad_mesh(0.0);
        let far = quad_mesh(-0.5);
        m.vertices.extend(far.vertices);
        m.triangles = vec![[4, 5, 6], [4, 6, 7], [0, 1, 2], [0, 2, 3]];
        let g = rasterize(&m, &cam, 16, 16).unwrap();
        let k = 8 * 16 + 8;
        assert!(g.covered[k]);
        assert!(g.position[k][2].abs() < 1e-12);
        assert!((g.depth[k] - (Vec3::from(g.position[k]) - cam.center()).norm()).abs() < 1e-12);
    }
}
