//! Signed distance functions behind one batched interface, so the tracer and
//! exporter work the same on analytic shapes and on the neural field.

use serde::{Deserialize, Serialize};

use crate::fields::SdfField;
use crate::real::Real;

pub trait SignedDistance: Sync {
    /// `out[i] = f(pts[i])`.
    fn eval_batch(&self, pts: &[[f64; 3]], out: &mut [f64]);

    /// Spatial gradients; analytic shapes override this.
    fn gradient_batch(&self, pts: &[[f64; 3]], out: &mut [[f64; 3]]) {
        let h = 1e-5;
        let mut probe = Vec::with_capacity(pts.len() * 6);
        for p in pts {
            for a in 0..3 {
                let mut q = *p;
                q[a] += h;
                probe.push(q);
                q[a] -= 2.0 * h;
                probe.push(q);
            }
        }
        let mut v = vec![0.0; probe.len()];
        self.eval_batch(&probe, &mut v);
        for (i, g) in out.iter_mut().enumerate() {
            for a in 0..3 {
                g[a] = (v[i * 6 + 2 * a] - v[i * 6 + 2 * a + 1]) / (2.0 * h);
            }
        }
    }

    fn eval(&self, p: [f64; 3]) -> f64 {
        let mut out = [0.0];
        self.eval_batch(&[p], &mut out);
        out[0]
    }

    fn gradient(&self, p: [f64; 3]) -> [f64; 3] {
        let mut out = [[0.0; 3]];
        self.gradient_batch(&[p], &mut out);
        out[0]
    }
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Closed-form shapes used for ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AnalyticShape {
    Sphere { radius: f64 },
    /// Ring in the xz plane around the y axis.
    Torus { major: f64, minor: f64 },
    Box { half: [f64; 3] },
}

impl AnalyticShape {
    pub fn distance(&self, p: [f64; 3]) -> f64 {
        match *self {
            AnalyticShape::Sphere { radius } => norm(p) - radius,
            AnalyticShape::Torus { major, minor } => {
                let q = (p[0] * p[0] + p[2] * p[2]).sqrt() - major;
                (q * q + p[1] * p[1]).sqrt() - minor
            }
            AnalyticShape::Box { half } => {
                let q = [
                    p[0].abs() - half[0],
                    p[1].abs() - half[1],
                    p[2].abs() - half[2],
                ];
                let outside = norm([q[0].max(0.0), q[1].max(0.0), q[2].max(0.0)]);
                outside + q[0].max(q[1]).max(q[2]).min(0.0)
            }
        }
    }

    /// Unit gradient (any unit vector where it is undefined).
    pub fn normal(&self, p: [f64; 3]) -> [f64; 3] {
        let unit = |v: [f64; 3]| {
            let l = norm(v);
            if l > 0.0 {
                [v[0] / l, v[1] / l, v[2] / l]
            } else {
                [0.0, 1.0, 0.0]
            }
        };
        match *self {
            AnalyticShape::Sphere { .. } => unit(p),
            AnalyticShape::Torus { major, .. } => {
                let rxz = (p[0] * p[0] + p[2] * p[2]).sqrt();
                let c = if rxz > 0.0 {
                    [p[0] / rxz * major, 0.0, p[2] / rxz * major]
                } else {
                    [major, 0.0, 0.0]
                };
                unit([p[0] - c[0], p[1] - c[1], p[2] - c[2]])
            }
            AnalyticShape::Box { half } => {
                let q = [
                    p[0].abs() - half[0],
                    p[1].abs() - half[1],
                    p[2].abs() - half[2],
                ];
                let g = if q.iter().any(|&v| v > 0.0) {
                    [q[0].max(0.0), q[1].max(0.0), q[2].max(0.0)]
                } else {
                    let a = if q[0] >= q[1] && q[0] >= q[2] {
                        0
                    } else if q[1] >= q[2] {
                        1
                    } else {
                        2
                    };
                    let mut g = [0.0; 3];
                    g[a] = 1.0;
                    g
                };
                let g = unit(g);
                [
                    g[0] * p[0].signum(),
                    g[1] * p[1].signum(),
                    g[2] * p[2].signum(),
                ]
            }
        }
    }

    /// Radius of the smallest origin-centred ball containing the shape.
    pub fn bounding_radius(&self) -> f64 {
        match *self {
            AnalyticShape::Sphere { radius } => radius,
            AnalyticShape::Torus { major, minor } => major + minor,
            AnalyticShape::Box { half } => norm(half),
        }
    }

    /// Uniform-ish samples on the surface (exactly uniform for the sphere).
    pub fn surface_samples<G: rand::Rng + ?Sized>(&self, n: usize, rng: &mut G) -> Vec<[f64; 3]> {
        match *self {
            AnalyticShape::Sphere { radius } => (0..n)
                .map(|_| {
                    let d = random_unit(rng);
                    [d[0] * radius, d[1] * radius, d[2] * radius]
                })
                .collect(),
            AnalyticShape::Torus { major, minor } => {
                // rejection on the area element (R + r cos v)
                let mut out = Vec::with_capacity(n);
                while out.len() < n {
                    let u = rng.gen_range(0.0..std::f64::consts::TAU);
                    let v = rng.gen_range(0.0..std::f64::consts::TAU);
                    let w = (major + minor * v.cos()) / (major + minor);
                    if rng.gen::<f64>() <= w {
                        let ring = major + minor * v.cos();
                        out.push([ring * u.cos(), minor * v.sin(), ring * u.sin()]);
                    }
                }
                out
            }
            AnalyticShape::Box { half } => {
                let areas = [half[1] * half[2], half[0] * half[2], half[0] * half[1]];
                let total: f64 = areas.iter().sum();
                (0..n)
                    .map(|_| {
                        let pick = rng.gen::<f64>() * total;
                        let axis = if pick < areas[0] {
                            0
                        } else if pick < areas[0] + areas[1] {
                            1
                        } else {
                            2
                        };
                        let mut p = [0.0; 3];
                        for (a, v) in p.iter_mut().enumerate() {
                            *v = if a == axis {
                                if rng.gen::<bool>() {
                                    half[a]
                                } else {
                                    -half[a]
                                }
                            } else {
                                rng.gen_range(-half[a]..=half[a])
                            };
                        }
                        p
                    })
                    .collect()
            }
        }
    }
}

pub fn random_unit<G: rand::Rng + ?Sized>(rng: &mut G) -> [f64; 3] {
    loop {
        let v = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let l = norm(v);
        if l > 1e-3 && l <= 1.0 {
            return [v[0] / l, v[1] / l, v[2] / l];
        }
    }
}

impl SignedDistance for AnalyticShape {
    fn eval_batch(&self, pts: &[[f64; 3]], out: &mut [f64]) {
        for (o, p) in out.iter_mut().zip(pts) {
            *o = self.distance(*p);
        }
    }

    fn gradient_batch(&self, pts: &[[f64; 3]], out: &mut [[f64; 3]]) {
        for (o, p) in out.iter_mut().zip(pts) {
            *o = self.normal(*p);
        }
    }
}

/// `f(x) = scale·(‖x‖ − radius)`: not a distance for `scale ≠ 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaledSphere {
    pub radius: f64,
    pub scale: f64,
}

impl SignedDistance for ScaledSphere {
    fn eval_batch(&self, pts: &[[f64; 3]], out: &mut [f64]) {
        for (o, p) in out.iter_mut().zip(pts) {
            *o = self.scale * (norm(*p) - self.radius);
        }
    }

    fn gradient_batch(&self, pts: &[[f64; 3]], out: &mut [[f64; 3]]) {
        for (o, p) in out.iter_mut().zip(pts) {
            let l = norm(*p).max(1e-300);
            *o = [
                self.scale * p[0] / l,
                self.scale * p[1] / l,
                self.scale * p[2] / l,
            ];
        }
    }
}

/// Points are evaluated in chunks to bound the activation memory.
const NEURAL_CHUNK: usize = 4096;

impl<R: Real> SignedDistance for SdfField<R> {
    fn eval_batch(&self, pts: &[[f64; 3]], out: &mut [f64]) {
        for (p, o) in pts.chunks(NEURAL_CHUNK).zip(out.chunks_mut(NEURAL_CHUNK)) {
            let q: Vec<[R; 3]> = p.iter().map(|v| v.map(R::of)).collect();
            for (dst, v) in o.iter_mut().zip(self.values(&q)) {
                *dst = v.as_f64();
            }
        }
    }

    fn gradient_batch(&self, pts: &[[f64; 3]], out: &mut [[f64; 3]]) {
        for (p, o) in pts.chunks(NEURAL_CHUNK).zip(out.chunks_mut(NEURAL_CHUNK)) {
            let q: Vec<[R; 3]> = p.iter().map(|v| v.map(R::of)).collect();
            let jet = self.gradient_jet(&q);
            for (dst, g) in o.iter_mut().zip(&jet.gradients) {
                *dst = g.map(|v| v.as_f64());
            }
        }
    }
}
