//! Image and geometry metrics.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::mesh::{closest_point_on_triangle, sub, dot, Mesh};
use crate::scene_io::Image;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("mask selects no pixels")]
    EmptyMask,
    #[error("image sizes differ: {0}x{1} vs {2}x{3}")]
    SizeMismatch(u32, u32, u32, u32),
    #[error("point set is empty")]
    EmptyPointSet,
    #[error("mesh has no triangles")]
    EmptyMesh,
}

/// PSNR over the masked pixels with peak 1. Identical images give `+inf`.
pub fn masked_psnr(pred: &Image, target: &Image, mask: &[bool]) -> Result<f64, EvalError> {
    if (pred.width, pred.height) != (target.width, target.height) || mask.len() != target.data.len() {
        return Err(EvalError::SizeMismatch(pred.width, pred.height, target.width, target.height));
    }
    let mut sse = 0.0;
    let mut n = 0usize;
    for ((p, t), _) in pred.data.iter().zip(&target.data).zip(mask).filter(|(_, &m)| m) {
        for c in 0..3 {
            let d = p[c] as f64 - t[c] as f64;
            sse += d * d;
        }
        n += 3;
    }
    if n == 0 {
        return Err(EvalError::EmptyMask);
    }
    let mse = sse / n as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Mean color over the masked pixels of several images.
pub fn mean_masked_color<'a>(views: impl IntoIterator<Item = (&'a Image, &'a [bool])>) -> [f32; 3] {
    let mut acc = [0.0f64; 3];
    let mut n = 0usize;
    for (img, mask) in views {
        for (p, _) in img.data.iter().zip(mask).filter(|(_, &m)| m) {
            for c in 0..3 {
                acc[c] += p[c] as f64;
            }
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    acc.map(|v| (v / n) as f32)
}

/// Constant image of one color.
pub fn flat_image(width: u32, height: u32, color: [f32; 3]) -> Image {
    let mut img = Image::new(width, height);
    img.data.fill(color);
    img
}

fn dist2_to_triangle(p: [f64; 3], t: &[[f64; 3]; 3]) -> f64 {
    let q = closest_point_on_triangle(p, t[0], t[1], t[2]);
    let d = sub(p, q);
    dot(d, d)
}

/// Mean distance from each point to the nearest point of the mesh, by
/// exhaustive search.
pub fn chamfer_brute_force(points: &[[f64; 3]], mesh: &Mesh) -> Result<f64, EvalError> {
    check_inputs(points, mesh)?;
    let tris: Vec<[[f64; 3]; 3]> = (0..mesh.triangles.len()).map(|t| mesh.triangle(t)).collect();
    let sum: f64 = points
        .par_iter()
        .map(|&p| {
            tris.iter()
                .map(|t| dist2_to_triangle(p, t))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    Ok(sum / points.len() as f64)
}

/// Same as [`chamfer_brute_force`], accelerated with a bounding-volume tree.
pub fn chamfer_one_directional(points: &[[f64; 3]], mesh: &Mesh) -> Result<f64, EvalError> {
    check_inputs(points, mesh)?;
    let bvh = Bvh::build(mesh);
    let sum: f64 = points
        .par_iter()
        .map(|&p| bvh.nearest_dist2(p).sqrt())
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    Ok(sum / points.len() as f64)
}

fn check_inputs(points: &[[f64; 3]], mesh: &Mesh) -> Result<(), EvalError> {
    if points.is_empty() {
        return Err(EvalError::EmptyPointSet);
    }
    if mesh.is_empty() {
        return Err(EvalError::EmptyMesh);
    }
    Ok(())
}

#[derive(Clone, Copy)]
struct Aabb {
    lo: [f64; 3],
    hi: [f64; 3],
}

impl Aabb {
    fn empty() -> Self {
        Self {
            lo: [f64::INFINITY; 3],
            hi: [f64::NEG_INFINITY; 3],
        }
    }

    fn grow(&mut self, p: [f64; 3]) {
        for k in 0..3 {
            self.lo[k] = self.lo[k].min(p[k]);
            self.hi[k] = self.hi[k].max(p[k]);
        }
    }

    fn dist2(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|k| {
                let d = (self.lo[k] - p[k]).max(0.0).max(p[k] - self.hi[k]);
                d * d
            })
            .sum()
    }
}

enum Node {
    Leaf { bounds: Aabb, start: usize, end: usize },
    Inner { bounds: Aabb, left: usize, right: usize },
}

struct Bvh {
    tris: Vec<[[f64; 3]; 3]>,
    nodes: Vec<Node>,
}

const LEAF_SIZE: usize = 4;

impl Bvh {
    fn build(mesh: &Mesh) -> Self {
        let mut tris: Vec<[[f64; 3]; 3]> = (0..mesh.triangles.len()).map(|t| mesh.triangle(t)).collect();
        let mut nodes = Vec::new();
        Self::split(&mut tris, 0, &mut nodes);
        Self { tris, nodes }
    }

    fn split(tris: &mut [[[f64; 3]; 3]], offset: usize, nodes: &mut Vec<Node>) -> usize {
        let mut bounds = Aabb::empty();
        for t in tris.iter() {
            for &v in t {
                bounds.grow(v);
            }
        }
        let me = nodes.len();
        if tris.len() <= LEAF_SIZE {
            nodes.push(Node::Leaf {
                bounds,
                start: offset,
                end: offset + tris.len(),
            });
            return me;
        }
        let axis = (0..3)
            .max_by(|&a, &b| (bounds.hi[a] - bounds.lo[a]).total_cmp(&(bounds.hi[b] - bounds.lo[b])))
            .unwrap();
        let centroid = |t: &[[f64; 3]; 3]| t[0][axis] + t[1][axis] + t[2][axis];
        tris.sort_by(|a, b| centroid(a).total_cmp(&centroid(b)));
        let mid = tris.len() / 2;
        nodes.push(Node::Leaf {
            bounds,
            start: 0,
            end: 0,
        });
        let (l, r) = tris.split_at_mut(mid);
        let left = Self::split(l, offset, nodes);
        let right = Self::split(r, offset + mid, nodes);
        nodes[me] = Node::Inner { bounds, left, right };
        me
    }

    fn nearest_dist2(&self, p: [f64; 3]) -> f64 {
        let mut best = f64::INFINITY;
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            match &self.nodes[n] {
                Node::Leaf { bounds, start, end } => {
                    if bounds.dist2(p) < best {
                        for t in &self.tris[*start..*end] {
                            best = best.min(dist2_to_triangle(p, t));
                        }
                    }
                }
                Node::Inner { bounds, left, right } => {
                    if bounds.dist2(p) >= best {
                        continue;
                    }
                    let dl = self.bounds(*left).dist2(p);
                    let dr = self.bounds(*right).dist2(p);
                    // visit the closer child first
                    if dl < dr {
                        stack.push(*right);
                        stack.push(*left);
                    } else {
                        stack.push(*left);
                        stack.push(*right);
                    }
                }
            }
        }
        best
    }

    fn bounds(&self, n: usize) -> &Aabb {
        match &self.nodes[n] {
            Node::Leaf { bounds, .. } | Node::Inner { bounds, .. } => bounds,
        }
    }
}

/// PSNR that serializes `+inf` as the string `"inf"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Psnr(pub f64);

impl Serialize for Psnr {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.0 == f64::INFINITY {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Psnr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Psnr(v)),
            Raw::Text(t) if t == "inf" => Ok(Psnr(f64::INFINITY)),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("bad PSNR value {t:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewScore {
    pub view: usize,
    pub psnr: Psnr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub views: Vec<ViewScore>,
    pub mean_psnr: Psnr,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub chamfer: Option<f64>,
    /// Seconds per named stage.
    pub timing: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn new(views: Vec<ViewScore>, chamfer: Option<f64>, timing: BTreeMap<String, f64>) -> Self {
        let mean = if views.is_empty() {
            f64::NAN
        } else {
            views.iter().map(|v| v.psnr.0).sum::<f64>() / views.len() as f64
        };
        Self {
            views,
            mean_psnr: Psnr(mean),
            chamfer,
            timing,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::cube_mesh;

    #[test]
    fn psnr_of_known_error() {
        let a = flat_image(4, 4, [0.5; 3]);
        let b = flat_image(4, 4, [0.6; 3]);
        let mask = vec![true; 16];
        let p = masked_psnr(&a, &b, &mask).unwrap();
        // mse 0.01 in f32 arithmetic
        assert!((p - 20.0).abs() < 1e-5, "{p}");
        assert_eq!(masked_psnr(&a, &a, &mask).unwrap(), f64::INFINITY);
        assert_eq!(masked_psnr(&a, &b, &[false; 16]), Err(EvalError::EmptyMask));
    }

    #[test]
    fn mask_restricts_pixels() {
        let a = flat_image(2, 1, [0.0; 3]);
        let mut b = a.clone();
        b.data[1] = [1.0; 3];
        assert_eq!(masked_psnr(&a, &b, &[true, false]).unwrap(), f64::INFINITY);
        assert_eq!(masked_psnr(&a, &b, &[false, true]).unwrap(), 0.0);
    }

    #[test]
    fn bvh_matches_brute_force_and_vertices_score_zero() {
        let m = cube_mesh(0.5);
        let pts: Vec<[f64; 3]> = (0..200)
            .map(|i| {
                let t = i as f64 * 0.37;
                [t.sin() * 0.9, (1.3 * t).cos() * 0.7, (0.7 * t).sin() * 1.1]
            })
            .collect();
        let a = chamfer_brute_force(&pts, &m).unwrap();
        let b = chamfer_one_directional(&pts, &m).unwrap();
        assert!((a - b).abs() < 1e-9);
        assert_eq!(chamfer_one_directional(&m.vertices, &m).unwrap(), 0.0);
        assert_eq!(chamfer_one_directional(&[], &m), Err(EvalError::EmptyPointSet));
    }

    #[test]
    fn report_writes_inf_as_text() {
        let r = EvalReport::new(
            vec![
                ViewScore { view: 0, psnr: Psnr(f64::INFINITY) },
                ViewScore { view: 1, psnr: Psnr(20.0) },
            ],
            None,
            BTreeMap::new(),
        );
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"inf\""));
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }
}
