//! Sphere tracing against any [`SignedDistance`].
//!
//! Rays are traced in lockstep batches so that a neural field is evaluated
//! with one matrix product per step instead of one per ray. Every ray's
//! result depends only on its own evaluations, so batching and thread count
//! never change the output.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{intersect_unit_sphere, Interval, Ray};
use crate::real::Real;
use crate::sdf::SignedDistance;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceConfig {
    pub n_steps: usize,
    pub converge_eps: f64,
    pub accept_eps: f64,
    pub scan_samples: usize,
    pub section_steps: usize,
    pub denom_clamp: f64,
    pub domain_radius: f64,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            n_steps: 16,
            converge_eps: 5e-5,
            accept_eps: 0.005,
            scan_samples: 100,
            section_steps: 8,
            denom_clamp: 0.01,
            domain_radius: 1.0,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TraceError {
    #[error("SDF gradient vanishes at the surface point")]
    DegenerateNormal,
    #[error("invalid trace configuration: {0}")]
    InvalidConfig(&'static str),
}

impl TraceConfig {
    pub fn validate(&self) -> Result<(), TraceError> {
        if self.scan_samples < 2 {
            return Err(TraceError::InvalidConfig("scan_samples must be at least 2"));
        }
        if !(self.converge_eps > 0.0 && self.converge_eps < self.accept_eps) {
            return Err(TraceError::InvalidConfig("need 0 < converge_eps < accept_eps"));
        }
        if !(self.denom_clamp > 0.0 && self.domain_radius > 0.0) {
            return Err(TraceError::InvalidConfig("clamp and radius must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HitStatus {
    /// Forward trace reached `converge_eps`.
    Converged,
    /// Found by the bidirectional scan and sectioning.
    Refined,
    Miss,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceHit {
    pub x: [f64; 3],
    pub t: f64,
    /// Unit normal; zero on a miss.
    pub n: [f64; 3],
    pub residual: f64,
    pub status: HitStatus,
}

impl SurfaceHit {
    fn miss() -> Self {
        Self {
            x: [0.0; 3],
            t: f64::INFINITY,
            n: [0.0; 3],
            residual: f64::INFINITY,
            status: HitStatus::Miss,
        }
    }

    pub fn is_hit(&self) -> bool {
        self.status != HitStatus::Miss
    }
}

/// Result of the plain forward iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardTrace {
    pub t: f64,
    pub x: [f64; 3],
    pub value: f64,
    pub converged: bool,
    /// Domain-sphere interval, `None` when the ray misses the domain.
    pub domain: Option<Interval>,
}

fn point(ray: &Ray, t: f64) -> [f64; 3] {
    let p = ray.at(t);
    [p.x, p.y, p.z]
}

fn domain_of(ray: &Ray, cfg: &TraceConfig) -> Option<Interval> {
    let iv = intersect_unit_sphere(ray, cfg.domain_radius)?;
    if iv.far <= 0.0 {
        return None;
    }
    Some(Interval {
        near: iv.near.max(0.0),
        far: iv.far,
    })
}

const RAY_CHUNK: usize = 256;

fn chunked<T: Send, F>(rays: &[Ray], f: F) -> Vec<T>
where
    F: Fn(&[Ray]) -> Vec<T> + Sync,
{
    let parts: Vec<Vec<T>> = rays.par_chunks(RAY_CHUNK).map(|c| f(c)).collect();
    parts.into_iter().flatten().collect()
}

/// `x_{i+1} = x_i + f(x_i)·r_d` from the near domain entry, at most
/// `n_steps` updates.
pub fn trace_forward_batch<S: SignedDistance + ?Sized>(
    f: &S,
    rays: &[Ray],
    cfg: &TraceConfig,
) -> Vec<ForwardTrace> {
    chunked(rays, |c| forward_chunk(f, c, cfg))
}

fn forward_chunk<S: SignedDistance + ?Sized>(
    f: &S,
    rays: &[Ray],
    cfg: &TraceConfig,
) -> Vec<ForwardTrace> {
    let mut out: Vec<ForwardTrace> = rays
        .iter()
        .map(|r| {
            let domain = domain_of(r, cfg);
            let t = domain.map_or(0.0, |d| d.near);
            ForwardTrace {
                t,
                x: point(r, t),
                value: f64::INFINITY,
                converged: false,
                domain,
            }
        })
        .collect();
    let mut active: Vec<usize> = (0..rays.len()).filter(|&i| out[i].domain.is_some()).collect();
    let mut pts = Vec::with_capacity(active.len());
    let mut vals = Vec::with_capacity(active.len());
    for step in 0..=cfg.n_steps {
        if active.is_empty() {
            break;
        }
        pts.clear();
        pts.extend(active.iter().map(|&i| out[i].x));
        vals.resize(pts.len(), 0.0);
        f.eval_batch(&pts, &mut vals);
        let mut next = Vec::with_capacity(active.len());
        for (&i, &v) in active.iter().zip(&vals) {
            let tr = &mut out[i];
            tr.value = v;
            if v.abs() < cfg.converge_eps {
                tr.converged = true;
                continue;
            }
            if step == cfg.n_steps {
                continue;
            }
            let far = tr.domain.unwrap().far;
            let t = tr.t + v;
            if t > far {
                tr.t = far;
                tr.x = point(&rays[i], far);
                continue;
            }
            tr.t = t;
            tr.x = point(&rays[i], t);
            next.push(i);
        }
        active = next;
    }
    out
}

pub fn trace_forward<S: SignedDistance + ?Sized>(f: &S, ray: &Ray, cfg: &TraceConfig) -> ForwardTrace {
    forward_chunk(f, std::slice::from_ref(ray), cfg)[0]
}

/// Forward trace, then for unconverged rays a backward trace from the far
/// domain bound, a uniform scan for the first sign change and bisection.
pub fn trace_batch<S: SignedDistance + ?Sized>(
    f: &S,
    rays: &[Ray],
    cfg: &TraceConfig,
) -> Vec<SurfaceHit> {
    chunked(rays, |c| trace_chunk(f, c, cfg))
}

pub fn trace_bidirectional<S: SignedDistance + ?Sized>(
    f: &S,
    ray: &Ray,
    cfg: &TraceConfig,
) -> SurfaceHit {
    trace_chunk(f, std::slice::from_ref(ray), cfg)[0]
}

fn trace_chunk<S: SignedDistance + ?Sized>(f: &S, rays: &[Ray], cfg: &TraceConfig) -> Vec<SurfaceHit> {
    let fwd = forward_chunk(f, rays, cfg);
    let mut hits = vec![SurfaceHit::miss(); rays.len()];
    let mut pending = Vec::new();
    for (i, tr) in fwd.iter().enumerate() {
        if tr.converged {
            hits[i] = SurfaceHit {
                x: tr.x,
                t: tr.t,
                n: [0.0; 3],
                residual: tr.value.abs(),
                status: HitStatus::Converged,
            };
        } else if tr.domain.is_some() {
            pending.push(i);
        }
    }

    // backward trace from the far bound
    let mut t_back: Vec<f64> = pending.iter().map(|&i| fwd[i].domain.unwrap().far).collect();
    let mut active: Vec<usize> = (0..pending.len()).collect();
    let mut pts = Vec::new();
    let mut vals = Vec::new();
    for _ in 0..cfg.n_steps {
        if active.is_empty() {
            break;
        }
        pts.clear();
        pts.extend(active.iter().map(|&k| point(&rays[pending[k]], t_back[k])));
        vals.resize(pts.len(), 0.0);
        f.eval_batch(&pts, &mut vals);
        let mut next = Vec::with_capacity(active.len());
        for (&k, &v) in active.iter().zip(&vals) {
            if v.abs() < cfg.converge_eps {
                continue;
            }
            t_back[k] -= v;
            if t_back[k] >= fwd[pending[k]].t {
                next.push(k);
            }
        }
        active = next;
    }

    // scan [t_fwd, t_back] for the first outside→inside transition
    let n = cfg.scan_samples.max(2);
    let mut brackets: Vec<(usize, f64, f64, f64, f64)> = Vec::new();
    let scan: Vec<usize> = (0..pending.len())
        .filter(|&k| t_back[k] >= fwd[pending[k]].t)
        .collect();
    pts.clear();
    for &k in &scan {
        let i = pending[k];
        let (a, b) = (fwd[i].t, t_back[k]);
        for j in 0..n {
            pts.push(point(&rays[i], a + (b - a) * j as f64 / (n - 1) as f64));
        }
    }
    vals.resize(pts.len(), 0.0);
    f.eval_batch(&pts, &mut vals);
    let mut entry = Vec::new();
    for (s, &k) in scan.iter().enumerate() {
        let i = pending[k];
        let (a, b) = (fwd[i].t, t_back[k]);
        let v = &vals[s * n..(s + 1) * n];
        let ts = |j: usize| a + (b - a) * j as f64 / (n - 1) as f64;
        if v[0] <= 0.0 {
            // forward trace overshot; bracket against the domain entry
            entry.push((i, fwd[i].domain.unwrap().near, a, v[0]));
            continue;
        }
        if let Some(j) = (1..n).find(|&j| v[j] <= 0.0) {
            brackets.push((i, ts(j - 1), ts(j), v[j - 1], v[j]));
        }
    }
    if !entry.is_empty() {
        pts.clear();
        pts.extend(entry.iter().map(|&(i, t0, _, _)| point(&rays[i], t0)));
        vals.resize(pts.len(), 0.0);
        f.eval_batch(&pts, &mut vals);
        for (&(i, t0, t1, v1), &v0) in entry.iter().zip(&vals) {
            if v0 > 0.0 {
                brackets.push((i, t0, t1, v0, v1));
            }
        }
    }

    // sectioning
    for _ in 0..cfg.section_steps {
        if brackets.is_empty() {
            break;
        }
        pts.clear();
        pts.extend(brackets.iter().map(|b| point(&rays[b.0], 0.5 * (b.1 + b.2))));
        vals.resize(pts.len(), 0.0);
        f.eval_batch(&pts, &mut vals);
        for (b, &v) in brackets.iter_mut().zip(&vals) {
            let m = 0.5 * (b.1 + b.2);
            if v > 0.0 {
                b.1 = m;
                b.3 = v;
            } else {
                b.2 = m;
                b.4 = v;
            }
        }
    }
    if !brackets.is_empty() {
        let ts: Vec<f64> = brackets
            .iter()
            .map(|&(_, a, b, fa, fb)| {
                let d = fa - fb;
                if d > 0.0 {
                    a + (b - a) * (fa / d)
                } else {
                    0.5 * (a + b)
                }
            })
            .collect();
        pts.clear();
        pts.extend(brackets.iter().zip(&ts).map(|(b, &t)| point(&rays[b.0], t)));
        vals.resize(pts.len(), 0.0);
        f.eval_batch(&pts, &mut vals);
        for ((b, &t), &v) in brackets.iter().zip(&ts).zip(&vals) {
            if v.abs() < cfg.accept_eps {
                hits[b.0] = SurfaceHit {
                    x: point(&rays[b.0], t),
                    t,
                    n: [0.0; 3],
                    residual: v.abs(),
                    status: HitStatus::Refined,
                };
            }
        }
    }

    let hit_idx: Vec<usize> = (0..hits.len()).filter(|&i| hits[i].is_hit()).collect();
    let hp: Vec<[f64; 3]> = hit_idx.iter().map(|&i| hits[i].x).collect();
    let mut grads = vec![[0.0; 3]; hp.len()];
    f.gradient_batch(&hp, &mut grads);
    for (&i, g) in hit_idx.iter().zip(&grads) {
        let l = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
        if l > 1e-12 {
            hits[i].n = [g[0] / l, g[1] / l, g[2] / l];
        }
    }
    hits
}

/// Minimum SDF sample along the ray inside the domain, refined by one
/// parabolic step through the best sample and its neighbours. Rays that miss
/// the domain report the value at their closest approach to the origin.
pub fn min_sdf_batch<S: SignedDistance + ?Sized>(
    f: &S,
    rays: &[Ray],
    cfg: &TraceConfig,
) -> Vec<(f64, f64)> {
    chunked(rays, |c| min_sdf_chunk(f, c, cfg))
}

pub fn min_sdf_along_ray<S: SignedDistance + ?Sized>(f: &S, ray: &Ray, cfg: &TraceConfig) -> (f64, f64) {
    min_sdf_chunk(f, std::slice::from_ref(ray), cfg)[0]
}

fn min_sdf_chunk<S: SignedDistance + ?Sized>(f: &S, rays: &[Ray], cfg: &TraceConfig) -> Vec<(f64, f64)> {
    let n = cfg.scan_samples.max(3);
    let spans: Vec<(f64, f64)> = rays
        .iter()
        .map(|r| match domain_of(r, cfg) {
            Some(d) => (d.near, d.far),
            None => {
                let t = crate::geometry::closest_approach(r).max(0.0);
                (t, t)
            }
        })
        .collect();
    let ts = |k: usize, j: usize| {
        let (a, b) = spans[k];
        a + (b - a) * j as f64 / (n - 1) as f64
    };
    let mut pts = Vec::with_capacity(rays.len() * n);
    for (k, r) in rays.iter().enumerate() {
        for j in 0..n {
            pts.push(point(r, ts(k, j)));
        }
    }
    let mut vals = vec![0.0; pts.len()];
    f.eval_batch(&pts, &mut vals);
    let mut best: Vec<(f64, f64)> = Vec::with_capacity(rays.len());
    let mut local: Vec<(usize, f64, f64)> = Vec::new();
    for k in 0..rays.len() {
        let v = &vals[k * n..(k + 1) * n];
        let j = argmin(v);
        best.push((v[j], ts(k, j)));
        if spans[k].1 > spans[k].0 {
            local.push((k, ts(k, j.saturating_sub(1)), ts(k, (j + 1).min(n - 1))));
        }
    }
    if local.is_empty() {
        return best;
    }
    // second, finer scan around each coarse minimum, then one parabolic step
    pts.clear();
    for &(k, a, b) in &local {
        for j in 0..LOCAL_SAMPLES {
            pts.push(point(&rays[k], a + (b - a) * j as f64 / (LOCAL_SAMPLES - 1) as f64));
        }
    }
    vals.resize(pts.len(), 0.0);
    f.eval_batch(&pts, &mut vals);
    let mut vertex = Vec::new();
    for (s, &(k, a, b)) in local.iter().enumerate() {
        let v = &vals[s * LOCAL_SAMPLES..(s + 1) * LOCAL_SAMPLES];
        let h = (b - a) / (LOCAL_SAMPLES - 1) as f64;
        let j = argmin(v);
        if v[j] < best[k].0 {
            best[k] = (v[j], a + h * j as f64);
        }
        if j > 0 && j + 1 < LOCAL_SAMPLES {
            let (y0, y1, y2) = (v[j - 1], v[j], v[j + 1]);
            let curv = y0 - 2.0 * y1 + y2;
            if curv > 0.0 {
                let off = 0.5 * (y0 - y2) / curv;
                vertex.push((k, a + h * (j as f64 + off.clamp(-1.0, 1.0))));
            }
        }
    }
    if !vertex.is_empty() {
        let vp: Vec<[f64; 3]> = vertex.iter().map(|&(k, t)| point(&rays[k], t)).collect();
        let mut vv = vec![0.0; vp.len()];
        f.eval_batch(&vp, &mut vv);
        for (&(k, t), &v) in vertex.iter().zip(&vv) {
            if v < best[k].0 {
                best[k] = (v, t);
            }
        }
    }
    best
}

const LOCAL_SAMPLES: usize = 9;

fn argmin(v: &[f64]) -> usize {
    let mut j = 0;
    for q in 1..v.len() {
        if v[q] < v[j] {
            j = q;
        }
    }
    j
}

/// Clamped directional derivative `∇f·r_d`, keeping its sign.
pub fn clamp_denominator<R: Real>(d: R, clamp: R) -> (R, bool) {
    if d.abs() >= clamp {
        (d, false)
    } else if d < R::zero() {
        (-clamp, true)
    } else {
        (clamp, true)
    }
}

/// Last-step surface point `x_n = x̂ − f(x̂)/clamp(∇f(x̂)·r_d) · r_d`.
pub fn differentiable_refine<R: Real>(
    x_hat: [R; 3],
    value: R,
    grad: [R; 3],
    dir: [R; 3],
    clamp: R,
) -> Result<[R; 3], TraceError> {
    let gn = (grad[0] * grad[0] + grad[1] * grad[1] + grad[2] * grad[2]).sqrt();
    if gn.as_f64() < 1e-8 {
        return Err(TraceError::DegenerateNormal);
    }
    let d = grad[0] * dir[0] + grad[1] * dir[1] + grad[2] * dir[2];
    let (den, _) = clamp_denominator(d, clamp);
    let s = value / den;
    Ok([
        x_hat[0] - s * dir[0],
        x_hat[1] - s * dir[1],
        x_hat[2] - s * dir[2],
    ])
}

/// Cotangents of `(f(x̂), ∇f(x̂))` from a cotangent on `x_n`; `x̂` and `r_d`
/// are constants of the trace.
pub fn differentiable_refine_backward<R: Real>(
    value: R,
    grad: [R; 3],
    dir: [R; 3],
    clamp: R,
    g_xn: [R; 3],
) -> (R, [R; 3]) {
    let d = grad[0] * dir[0] + grad[1] * dir[1] + grad[2] * dir[2];
    let (den, clamped) = clamp_denominator(d, clamp);
    let gd = g_xn[0] * dir[0] + g_xn[1] * dir[1] + g_xn[2] * dir[2];
    let g_value = -gd / den;
    if clamped {
        return (g_value, [R::zero(); 3]);
    }
    let g_den = gd * value / (den * den);
    (g_value, [g_den * dir[0], g_den * dir[1], g_den * dir[2]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use crate::sdf::AnalyticShape;

    fn ray(o: [f64; 3], d: [f64; 3]) -> Ray {
        Ray::new(Vec3::from(o), Vec3::from(d))
    }

    const SPHERE: AnalyticShape = AnalyticShape::Sphere { radius: 0.5 };

    #[test]
    fn forward_hits_sphere_on_axis() {
        let cfg = TraceConfig::default();
        let tr = trace_forward(&SPHERE, &ray([0.0, 0.0, 2.0], [0.0, 0.0, -1.0]), &cfg);
        assert!(tr.converged);
        assert!((tr.t - 1.5).abs() < 1e-4);
        assert!((tr.x[2] - 0.5).abs() < 1e-4);
    }

    #[test]
    fn forward_parallel_miss_approaches_gap() {
        let cfg = TraceConfig::default();
        let tr = trace_forward(&SPHERE, &ray([0.6, 0.0, 2.0], [0.0, 0.0, -1.0]), &cfg);
        assert!(!tr.converged);
        let (fmin, _) = min_sdf_along_ray(&SPHERE, &ray([0.6, 0.0, 2.0], [0.0, 0.0, -1.0]), &cfg);
        assert!((fmin - 0.1).abs() < 1e-3);
        assert_eq!(
            trace_bidirectional(&SPHERE, &ray([0.6, 0.0, 2.0], [0.0, 0.0, -1.0]), &cfg).status,
            HitStatus::Miss
        );
    }

    #[test]
    fn grazing_ray_is_recovered_bidirectionally() {
        let cfg = TraceConfig::default();
        let r = ray([0.49, 0.0, 2.0], [0.0, 0.0, -1.0]);
        let hit = trace_bidirectional(&SPHERE, &r, &cfg);
        assert!(hit.is_hit());
        let t_exact = 2.0 - (0.25f64 - 0.49 * 0.49).sqrt();
        assert!((hit.t - t_exact).abs() < 1e-3, "{} vs {t_exact}", hit.t);
        assert!(hit.residual < 5e-3);
    }

    #[test]
    fn min_sdf_distance_and_inside() {
        let cfg = TraceConfig::default();
        let (f, t) = min_sdf_along_ray(&SPHERE, &ray([0.7, 0.0, 2.0], [0.0, 0.0, -1.0]), &cfg);
        assert!((f - 0.2).abs() < 1e-3);
        assert!((t - 2.0).abs() < 0.05);
        let (f, _) = min_sdf_along_ray(&SPHERE, &ray([0.0, 0.1, 2.0], [0.0, 0.0, -1.0]), &cfg);
        assert!(f < 0.0);
    }

    #[test]
    fn refine_keeps_surface_points_and_projects_to_sphere() {
        let x = [0.0, 0.0, 0.5];
        let d = [0.0, 0.0, -1.0];
        let out = differentiable_refine(x, 0.0, [0.0, 0.0, 1.0], d, 0.01).unwrap();
        assert_eq!(out, x);
        // slightly outside along the ray
        let x = [0.0, 0.0, 0.5003];
        let out = differentiable_refine(x, SPHERE.distance(x), SPHERE.normal(x), d, 0.01).unwrap();
        assert!(SPHERE.distance(out).abs() < 1e-6);
        assert_eq!(
            differentiable_refine(x, 0.1, [0.0; 3], d, 0.01),
            Err(TraceError::DegenerateNormal)
        );
    }

    #[test]
    fn refine_backward_matches_finite_differences() {
        let dir = {
            let v = [0.2f64, -0.3, -0.9];
            let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            v.map(|c| c / l)
        };
        let x = [0.1, 0.2, 0.4];
        let (value, grad) = (0.003, [0.3, -0.2, 0.8]);
        let g_xn = [0.7, -1.1, 0.4];
        let loss = |v: f64, g: [f64; 3]| {
            let p = differentiable_refine(x, v, g, dir, 0.01).unwrap();
            p[0] * g_xn[0] + p[1] * g_xn[1] + p[2] * g_xn[2]
        };
        let (gv, gg) = differentiable_refine_backward(value, grad, dir, 0.01, g_xn);
        let h = 1e-7;
        let fd = (loss(value + h, grad) - loss(value - h, grad)) / (2.0 * h);
        assert!((fd - gv).abs() < 1e-6);
        for a in 0..3 {
            let (mut gp, mut gm) = (grad, grad);
            gp[a] += h;
            gm[a] -= h;
            let fd = (loss(value, gp) - loss(value, gm)) / (2.0 * h);
            assert!((fd - gg[a]).abs() < 1e-6, "{a}: {fd} vs {}", gg[a]);
        }
    }

    #[test]
    fn batch_matches_single_ray_traces() {
        let cfg = TraceConfig::default();
        let torus = AnalyticShape::Torus {
            major: 0.5,
            minor: 0.2,
        };
        let rays: Vec<Ray> = (0..600)
            .map(|i| {
                let a = i as f64 * 0.37;
                ray(
                    [2.0 * a.cos(), 0.3 * (a * 0.5).sin(), 2.0 * a.sin()],
                    [-a.cos() + 0.1 * (a * 3.0).sin(), 0.05, -a.sin()],
                )
            })
            .collect();
        let batch = trace_batch(&torus, &rays, &cfg);
        for (r, b) in rays.iter().zip(&batch) {
            assert_eq!(*b, trace_bidirectional(&torus, r, &cfg));
        }
    }
}
