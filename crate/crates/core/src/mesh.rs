//! Indexed triangle meshes, OBJ I/O and topology checks.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{self, BufRead, Write};

use thiserror::Error;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    /// Unit per-vertex normals, same length as `vertices`.
    pub normals: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
}

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("mesh has no triangles")]
    EmptyMesh,
    #[error("OBJ line {line}: {msg}")]
    Obj { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub(crate) fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle(&self, t: usize) -> [[f64; 3]; 3] {
        self.triangles[t].map(|i| self.vertices[i as usize])
    }

    /// Unnormalized face normal (twice the area).
    pub fn face_normal(&self, t: usize) -> [f64; 3] {
        let [a, b, c] = self.triangle(t);
        cross(sub(b, a), sub(c, a))
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        0.5 * dot(self.face_normal(t), self.face_normal(t)).sqrt()
    }

    /// Drops triangles with area at or below `min_area`.
    pub fn remove_degenerate(&mut self, min_area: f64) {
        let keep: Vec<bool> = (0..self.triangles.len())
            .map(|t| self.triangle_area(t) > min_area)
            .collect();
        let mut k = keep.iter();
        self.triangles.retain(|_| *k.next().unwrap());
    }

    fn edge_counts(&self) -> HashMap<(u32, u32), (u32, i32)> {
        // per undirected edge: use count and sum of directions
        let mut m: HashMap<(u32, u32), (u32, i32)> = HashMap::new();
        for t in &self.triangles {
            for e in 0..3 {
                let (a, b) = (t[e], t[(e + 1) % 3]);
                let key = (a.min(b), a.max(b));
                let ent = m.entry(key).or_default();
                ent.0 += 1;
                ent.1 += if a < b { 1 } else { -1 };
            }
        }
        m
    }

    /// Every edge is shared by exactly two triangles with opposite direction.
    pub fn is_watertight(&self) -> bool {
        !self.is_empty() && self.edge_counts().values().all(|&(n, s)| n == 2 && s == 0)
    }

    /// `V − E + F`, counting only referenced vertices.
    pub fn euler_characteristic(&self) -> i64 {
        let mut used = vec![false; self.vertices.len()];
        for t in &self.triangles {
            for &i in t {
                used[i as usize] = true;
            }
        }
        let v = used.iter().filter(|&&u| u).count() as i64;
        v - self.edge_counts().len() as i64 + self.triangles.len() as i64
    }

    pub fn write_obj<W: Write>(&self, w: &mut W) -> io::Result<()> {
        let mut s = String::with_capacity(64 * (self.vertices.len() * 2 + self.triangles.len()));
        for v in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", v[0], v[1], v[2]);
        }
        for n in &self.normals {
            let _ = writeln!(s, "vn {} {} {}", n[0], n[1], n[2]);
        }
        for t in &self.triangles {
            let [a, b, c] = t.map(|i| i + 1);
            let _ = writeln!(s, "f {a}//{a} {b}//{b} {c}//{c}");
        }
        w.write_all(s.as_bytes())
    }

    /// Reads the subset of OBJ that [`Mesh::write_obj`] produces.
    pub fn read_obj<R: BufRead>(r: R) -> Result<Self, MeshError> {
        let mut mesh = Mesh::default();
        for (no, line) in r.lines().enumerate() {
            let line = line?;
            let err = |msg: &str| MeshError::Obj {
                line: no + 1,
                msg: msg.to_string(),
            };
            let mut it = line.split_whitespace();
            let Some(tag) = it.next() else { continue };
            let rest: Vec<&str> = it.collect();
            match tag {
                "v" | "vn" => {
                    if rest.len() < 3 {
                        return Err(err("expected three coordinates"));
                    }
                    let mut p = [0.0; 3];
                    for (k, s) in rest[..3].iter().enumerate() {
                        p[k] = s.parse().map_err(|_| err("bad number"))?;
                    }
                    if tag == "v" {
                        mesh.vertices.push(p);
                    } else {
                        mesh.normals.push(p);
                    }
                }
                "f" => {
                    if rest.len() != 3 {
                        return Err(err("only triangles are supported"));
                    }
                    let mut t = [0u32; 3];
                    for (k, s) in rest.iter().enumerate() {
                        let idx: u32 = s
                            .split('/')
                            .next()
                            .and_then(|v| v.parse().ok())
                            .ok_or_else(|| err("bad face index"))?;
                        if idx == 0 {
                            return Err(err("face indices are 1-based"));
                        }
                        t[k] = idx - 1;
                    }
                    mesh.triangles.push(t);
                }
                _ => {}
            }
        }
        let n = mesh.vertices.len() as u32;
        if mesh.triangles.iter().flatten().any(|&i| i >= n) {
            return Err(MeshError::Obj {
                line: 0,
                msg: "face index out of range".into(),
            });
        }
        Ok(mesh)
    }
}

/// Closest point on triangle `abc` to `p` (Ericson, Real-Time Collision Detection 5.1.5).
pub fn closest_point_on_triangle(p: [f64; 3], a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> [f64; 3] {
    let ab = sub(b, a);
    let ac = sub(c, a);
    let ap = sub(p, a);
    let d1 = dot(ab, ap);
    let d2 = dot(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = sub(p, b);
    let d3 = dot(ab, bp);
    let d4 = dot(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let lerp = |o: [f64; 3], d: [f64; 3], t: f64| [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return lerp(a, ab, d1 / (d1 - d3));
    }
    let cp = sub(p, c);
    let d5 = dot(ab, cp);
    let d6 = dot(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return lerp(a, ac, d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return lerp(b, sub(c, b), (d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    [
        a[0] + ab[0] * v + ac[0] * w,
        a[1] + ab[1] * v + ac[1] * w,
        a[2] + ab[2] * v + ac[2] * w,
    ]
}

/// Axis-aligned cube `[-h, h]³` as 12 outward-facing triangles.
pub fn cube_mesh(h: f64) -> Mesh {
    let vertices: Vec<[f64; 3]> = (0..8)
        .map(|i| {
            [
                if i & 1 == 0 { -h } else { h },
                if i & 2 == 0 { -h } else { h },
                if i & 4 == 0 { -h } else { h },
            ]
        })
        .collect();
    let quads = [
        [0, 2, 3, 1],
        [4, 5, 7, 6],
        [0, 1, 5, 4],
        [2, 6, 7, 3],
        [0, 4, 6, 2],
        [1, 3, 7, 5],
    ];
    let triangles = quads
        .iter()
        .flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]])
        .collect();
    let normals = vertices
        .iter()
        .map(|v| {
            let l = dot(*v, *v).sqrt();
            v.map(|c| c / l)
        })
        .collect();
    Mesh {
        vertices,
        normals,
        triangles,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cube_is_closed_and_outward() {
        let m = cube_mesh(1.0);
        assert!(m.is_watertight());
        assert_eq!(m.euler_characteristic(), 2);
        for t in 0..m.triangles.len() {
            let [a, b, c] = m.triangle(t);
            let centroid = [0, 1, 2].map(|k| (a[k] + b[k] + c[k]) / 3.0);
            assert!(dot(m.face_normal(t), centroid) > 0.0);
        }
    }

    #[test]
    fn obj_round_trip_is_exact() {
        let mut m = cube_mesh(0.3);
        m.vertices[0][0] = 0.1 + 0.2;
        let mut buf = Vec::new();
        m.write_obj(&mut buf).unwrap();
        let back = Mesh::read_obj(&buf[..]).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn open_mesh_is_not_watertight() {
        let mut m = cube_mesh(1.0);
        m.triangles.pop();
        assert!(!m.is_watertight());
    }

    #[test]
    fn closest_point_regions() {
        let (a, b, c) = ([0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]);
        let p = closest_point_on_triangle([0.2, 0.2, 3.0], a, b, c);
        assert!((p[0] - 0.2).abs() < 1e-12 && (p[1] - 0.2).abs() < 1e-12 && p[2] == 0.0);
        assert_eq!(closest_point_on_triangle([-1.0, -1.0, 0.0], a, b, c), a);
        assert_eq!(closest_point_on_triangle([0.5, -2.0, 1.0], a, b, c), [0.5, 0.0, 0.0]);
        let q = closest_point_on_triangle([1.0, 1.0, 0.0], a, b, c);
        assert!((q[0] - 0.5).abs() < 1e-12 && (q[1] - 0.5).abs() < 1e-12);
    }
}
