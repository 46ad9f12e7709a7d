//! Training losses: reconstruction, eikonal, soft mask and angular
//! smoothness, plus the fused gradient of their weighted sum.
//!
//! A batch is processed in two stages. [`prepare_batch`] runs everything that
//! carries no gradient (sphere tracing, minimum search, eikonal sampling) and
//! [`evaluate_batch`] runs the differentiable part on the frozen trace, which
//! is also what the finite-difference tests perturb.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fields::{AngularOrder, NeuralModel, RadianceQuery, SdfField};
use crate::geometry::Ray;
use crate::real::Real;
use crate::sdf::SignedDistance;
use crate::tracer::{
    differentiable_refine, differentiable_refine_backward, min_sdf_batch, trace_batch,
    TraceConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_e: f64,
    pub w_m: f64,
    pub w_s: f64,
    pub mask_alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_e: 0.1,
            w_m: 100.0,
            w_s: 0.01,
            mask_alpha: 50.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub l_r: f64,
    pub l_e: f64,
    pub l_m: f64,
    pub l_s: f64,
    pub total: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("non-finite loss term {term}")]
    NonFinite { term: &'static str },
    #[error("empty ray batch")]
    EmptyBatch,
}

/// Weighted sum; fails when any term is NaN or infinite.
pub fn loss_total(
    l_r: f64,
    l_e: f64,
    l_m: f64,
    l_s: f64,
    w: &LossWeights,
) -> Result<LossTerms, ObjectiveError> {
    for (v, term) in [(l_r, "L_R"), (l_e, "L_E"), (l_m, "L_M"), (l_s, "L_S")] {
        if !v.is_finite() {
            return Err(ObjectiveError::NonFinite { term });
        }
    }
    Ok(LossTerms {
        l_r,
        l_e,
        l_m,
        l_s,
        total: l_r + w.w_e * l_e + w.w_m * l_m + w.w_s * l_s,
    })
}

/// `Σ|pred − target| / |U|` over foreground pairs.
pub fn loss_reconstruction(pred: &[[f64; 3]], target: &[[f64; 3]], batch_size: usize) -> f64 {
    let s: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p[0] - t[0]).abs() + (p[1] - t[1]).abs() + (p[2] - t[2]).abs())
        .sum();
    s / batch_size as f64
}

/// Uniform samples of the `[−1, 1]³` cube.
pub fn eikonal_samples<G: Rng + ?Sized>(count: usize, rng: &mut G) -> Vec<[f64; 3]> {
    (0..count)
        .map(|_| {
            [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ]
        })
        .collect()
}

/// Mean of `(‖∇f‖ − 1)²` over fresh cube samples.
pub fn loss_eikonal<S: SignedDistance + ?Sized, G: Rng + ?Sized>(
    f: &S,
    count: usize,
    rng: &mut G,
) -> f64 {
    let pts = eikonal_samples(count, rng);
    let mut g = vec![[0.0; 3]; pts.len()];
    f.gradient_batch(&pts, &mut g);
    g.iter()
        .map(|g| {
            let e = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt() - 1.0;
            e * e
        })
        .sum::<f64>()
        / count as f64
}

const P_CLAMP: f64 = 1e-7;

fn mask_term(f_min: f64, m: f64, alpha: f64) -> (f64, f64) {
    let z = -alpha * f_min;
    let p = 1.0 / (1.0 + (-z).exp());
    let pc = p.clamp(P_CLAMP, 1.0 - P_CLAMP);
    let bce = -m * pc.ln() - (1.0 - m) * (1.0 - pc).ln();
    // d bce / d f_min, zero where the clamp is active
    let d = if pc == p { alpha * (m - p) } else { 0.0 };
    (bce, d)
}

/// `Σ BCE(sigmoid(−α f_min), m) / (α |U|)`.
pub fn loss_mask(f_min: &[f64], mask: &[f64], alpha: f64, batch_size: usize) -> f64 {
    f_min
        .iter()
        .zip(mask)
        .map(|(&f, &m)| mask_term(f, m, alpha).0)
        .sum::<f64>()
        / (alpha * batch_size as f64)
}

/// `Σ ‖∇²_{r_d} B‖² / |U|` with the Laplacian (or Hessian Frobenius norm)
/// over the ray direction, including the path through its Fourier features.
pub fn loss_smoothness<R: Real>(
    radiance: &crate::fields::RadianceField<R>,
    queries: &[RadianceQuery<R>],
    features: &[R],
    order: AngularOrder,
    batch_size: usize,
) -> f64 {
    let jet = radiance.input_jet(queries, features, order);
    let (out, _) = radiance.net.forward_jet(&jet).expect("radiance input width");
    let (l, _) = smoothness_and_grad(&out, order);
    l / batch_size as f64
}

/// Sum over queries of the squared angular second-derivative norm, and the
/// cotangents of the second-order rows of the output jet.
fn smoothness_and_grad<R: Real>(out: &crate::fields::Jet<R>, order: AngularOrder) -> (f64, Vec<Vec<R>>) {
    let n = out.n;
    let c = out.width;
    match order {
        AngularOrder::None => (0.0, Vec::new()),
        AngularOrder::Laplacian => {
            let mut lap = vec![R::zero(); n * c];
            for j in 0..3 {
                for (l, s) in lap.iter_mut().zip(out.second_order(j)) {
                    *l += *s;
                }
            }
            let loss = lap.iter().map(|v| v.as_f64() * v.as_f64()).sum();
            let g: Vec<R> = lap.iter().map(|v| R::of(2.0) * *v).collect();
            (loss, vec![g.clone(), g.clone(), g])
        }
        AngularOrder::Hessian => {
            const PAIRS: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];
            let mut loss = 0.0;
            let mut grads = vec![vec![R::zero(); n * c]; 6];
            let two = R::of(2.0);
            let half = R::of(0.5);
            for e in 0..n * c {
                let d: Vec<R> = (0..3).map(|j| out.second_order(j)[e]).collect();
                for i in 0..3 {
                    loss += d[i].as_f64() * d[i].as_f64();
                    grads[i][e] = two * d[i];
                }
                for (p, &(a, b)) in PAIRS.iter().enumerate() {
                    let hab = half * (out.second_order(3 + p)[e] - d[a] - d[b]);
                    loss += 2.0 * hab.as_f64() * hab.as_f64();
                    grads[3 + p][e] = two * hab;
                    grads[a][e] -= two * hab;
                    grads[b][e] -= two * hab;
                }
            }
            (loss, grads)
        }
    }
}

/// One training ray with its ground-truth pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RaySample {
    pub ray: Ray,
    pub rgb: [f64; 3],
    pub mask: bool,
}

/// Gradient-free part of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedBatch {
    pub batch_size: usize,
    /// Foreground rays: `(ray index, converged point x̂)`.
    pub foreground: Vec<(usize, [f64; 3])>,
    /// Mask-loss rays: `(ray index, argmin point, mask value)`.
    pub silhouette: Vec<(usize, [f64; 3], f64)>,
    pub eikonal: Vec<[f64; 3]>,
}

/// Traces every ray (no gradient), splits foreground from silhouette rays and
/// draws the eikonal samples.
pub fn prepare_batch<R: Real, G: Rng + ?Sized>(
    sdf: &SdfField<R>,
    rays: &[RaySample],
    trace: &TraceConfig,
    rng: &mut G,
) -> PreparedBatch {
    let plain: Vec<Ray> = rays.iter().map(|r| r.ray).collect();
    let hits = trace_batch(sdf, &plain, trace);
    let mut foreground = Vec::new();
    let mut rest = Vec::new();
    for (i, (h, r)) in hits.iter().zip(rays).enumerate() {
        if h.is_hit() && r.mask {
            foreground.push((i, h.x));
        } else {
            rest.push(i);
        }
    }
    let rest_rays: Vec<Ray> = rest.iter().map(|&i| plain[i]).collect();
    let mins = min_sdf_batch(sdf, &rest_rays, trace);
    let silhouette = rest
        .iter()
        .zip(&mins)
        .map(|(&i, &(_, t))| {
            let p = plain[i].at(t);
            (i, [p.x, p.y, p.z], if rays[i].mask { 1.0 } else { 0.0 })
        })
        .collect();
    PreparedBatch {
        batch_size: rays.len(),
        foreground,
        silhouette,
        eikonal: eikonal_samples(rays.len(), rng),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub weights: LossWeights,
    /// `None` disables the smoothness term entirely.
    pub angular: AngularOrder,
    pub denom_clamp: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            angular: AngularOrder::Laplacian,
            denom_clamp: 0.01,
        }
    }
}

/// Loss terms and the gradient over `[θ ; φ]` (SDF parameters first).
#[derive(Debug, Clone)]
pub struct BatchGradient<R> {
    pub terms: LossTerms,
    pub grad: Vec<R>,
}

const CHUNK: usize = 1024;

struct Partial<R> {
    l_r: f64,
    l_e: f64,
    l_m: f64,
    l_s: f64,
    grad: Vec<R>,
}

fn dot<R: Real>(a: [R; 3], b: [R; 3]) -> R {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Differentiable stage. Chunks are reduced in a fixed order so the result is
/// independent of the worker count.
pub fn evaluate_batch<R: Real>(
    model: &NeuralModel<R>,
    rays: &[RaySample],
    prepared: &PreparedBatch,
    cfg: &ObjectiveConfig,
) -> Result<BatchGradient<R>, ObjectiveError> {
    if prepared.batch_size == 0 {
        return Err(ObjectiveError::EmptyBatch);
    }
    let n_sdf = model.sdf.net.param_count();
    let n_all = model.param_count();
    let u = prepared.batch_size as f64;
    let order = if cfg.weights.w_s > 0.0 {
        cfg.angular
    } else {
        AngularOrder::None
    };

    enum Task<'a> {
        Fg(&'a [(usize, [f64; 3])]),
        Sil(&'a [(usize, [f64; 3], f64)]),
        Eik(&'a [[f64; 3]]),
    }
    let mut tasks: Vec<Task> = Vec::new();
    tasks.extend(prepared.foreground.chunks(CHUNK).map(Task::Fg));
    tasks.extend(prepared.silhouette.chunks(CHUNK).map(Task::Sil));
    tasks.extend(prepared.eikonal.chunks(CHUNK).map(Task::Eik));

    let parts: Vec<Partial<R>> = tasks
        .par_iter()
        .map(|task| {
            let mut p = Partial {
                l_r: 0.0,
                l_e: 0.0,
                l_m: 0.0,
                l_s: 0.0,
                grad: vec![R::zero(); n_all],
            };
            let (gs, gr) = p.grad.split_at_mut(n_sdf);
            match task {
                Task::Fg(fg) => {
                    let (lr, ls) = foreground_chunk(model, rays, fg, cfg, order, u, gs, gr);
                    p.l_r = lr;
                    p.l_s = ls;
                }
                Task::Sil(sil) => p.l_m = silhouette_chunk(&model.sdf, sil, cfg, u, gs),
                Task::Eik(e) => {
                    p.l_e = eikonal_chunk(&model.sdf, e, cfg, prepared.eikonal.len(), gs)
                }
            }
            p
        })
        .collect();

    let mut grad = vec![R::zero(); n_all];
    let (mut l_r, mut l_e, mut l_m, mut l_s) = (0.0, 0.0, 0.0, 0.0);
    for p in &parts {
        l_r += p.l_r;
        l_e += p.l_e;
        l_m += p.l_m;
        l_s += p.l_s;
        for (g, v) in grad.iter_mut().zip(&p.grad) {
            *g += *v;
        }
    }
    let ne = prepared.eikonal.len().max(1) as f64;
    let terms = loss_total(
        l_r / u,
        l_e / ne,
        l_m / (cfg.weights.mask_alpha * u),
        l_s / u,
        &cfg.weights,
    )?;
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        let term = if i < n_sdf { "grad θ" } else { "grad φ" };
        return Err(ObjectiveError::NonFinite { term });
    }
    Ok(BatchGradient { terms, grad })
}

/// Returns unnormalized `(Σ|B−c|, Σ‖∇²B‖²)` and accumulates gradients.
#[allow(clippy::too_many_arguments)]
fn foreground_chunk<R: Real>(
    model: &NeuralModel<R>,
    rays: &[RaySample],
    fg: &[(usize, [f64; 3])],
    cfg: &ObjectiveConfig,
    order: AngularOrder,
    u: f64,
    g_sdf: &mut [R],
    g_rad: &mut [R],
) -> (f64, f64) {
    let n = fg.len();
    let clamp = R::of(cfg.denom_clamp);
    let dirs: Vec<[R; 3]> = fg
        .iter()
        .map(|&(i, _)| {
            let d = rays[i].ray.dir;
            [R::of(d.x), R::of(d.y), R::of(d.z)]
        })
        .collect();
    let x_hat: Vec<[R; 3]> = fg.iter().map(|(_, x)| x.map(R::of)).collect();

    // last-step refinement x_n(θ)
    let jet_hat = model.sdf.gradient_jet(&x_hat);
    let x_n: Vec<[R; 3]> = (0..n)
        .map(|k| {
            differentiable_refine(x_hat[k], jet_hat.values[k], jet_hat.gradients[k], dirs[k], clamp)
                .unwrap_or(x_hat[k])
        })
        .collect();

    // normal and geometry feature at x_n
    let jet_n = model.sdf.gradient_jet(&x_n);
    let mut normals = Vec::with_capacity(n);
    let mut gnorm = Vec::with_capacity(n);
    for g in &jet_n.gradients {
        let l = dot(*g, *g).sqrt().max(R::of(1e-12));
        gnorm.push(l);
        normals.push([g[0] / l, g[1] / l, g[2] / l]);
    }
    let queries: Vec<RadianceQuery<R>> = (0..n)
        .map(|k| RadianceQuery {
            x: x_n[k],
            dir: dirs[k],
            normal: normals[k],
        })
        .collect();
    let rad = &model.radiance;
    let in_jet = rad.input_jet(&queries, jet_n.features(), order);
    let (out, tape) = rad.net.forward_jet(&in_jet).expect("radiance input width");

    // output cotangents
    let inv_u = R::of(1.0 / u);
    let mut g_out = vec![R::zero(); out.data.len()];
    let mut l_r = 0.0;
    for (k, &(i, _)) in fg.iter().enumerate() {
        for c in 0..3 {
            let d = out.value()[k * 3 + c].as_f64() - rays[i].rgb[c];
            l_r += d.abs();
            g_out[k * 3 + c] = if d > 0.0 {
                inv_u
            } else if d < 0.0 {
                -inv_u
            } else {
                R::zero()
            };
        }
    }
    let (l_s, s_grads) = smoothness_and_grad(&out, order);
    if !s_grads.is_empty() {
        let scale = R::of(cfg.weights.w_s / u);
        let tangents = out.tangents;
        let len = n * 3;
        for (j, g) in s_grads.iter().enumerate() {
            let block = 1 + tangents + j;
            for (dst, v) in g_out[block * len..(block + 1) * len].iter_mut().zip(g) {
                *dst = scale * *v;
            }
        }
    }

    let g_in = rad
        .net
        .backward(&tape, &g_out, None, g_rad, true)
        .expect("input cotangent requested");
    let gi = rad.split_input_grad(&g_in, n);

    // through the normalization n = ∇f/‖∇f‖
    let g_grad_n: Vec<[R; 3]> = (0..n)
        .map(|k| {
            let (nv, gn) = (normals[k], gi.normal[k]);
            let p = dot(nv, gn);
            [
                (gn[0] - nv[0] * p) / gnorm[k],
                (gn[1] - nv[1] * p) / gnorm[k],
                (gn[2] - nv[2] * p) / gnorm[k],
            ]
        })
        .collect();
    let zeros = vec![R::zero(); n];
    let g_xn_sdf = model
        .sdf
        .backward(&jet_n, &zeros, &g_grad_n, Some(&gi.feature), g_sdf, true)
        .expect("point cotangent requested");

    let mut g_val_hat = vec![R::zero(); n];
    let mut g_grad_hat = vec![[R::zero(); 3]; n];
    for k in 0..n {
        let g_xn = [
            gi.x[k][0] + g_xn_sdf[k][0],
            gi.x[k][1] + g_xn_sdf[k][1],
            gi.x[k][2] + g_xn_sdf[k][2],
        ];
        let (gv, gg) = differentiable_refine_backward(
            jet_hat.values[k],
            jet_hat.gradients[k],
            dirs[k],
            clamp,
            g_xn,
        );
        g_val_hat[k] = gv;
        g_grad_hat[k] = gg;
    }
    model
        .sdf
        .backward(&jet_hat, &g_val_hat, &g_grad_hat, None, g_sdf, false);
    (l_r, l_s)
}

/// Returns unnormalized `Σ BCE` and accumulates `w_M`-weighted gradients.
fn silhouette_chunk<R: Real>(
    sdf: &SdfField<R>,
    sil: &[(usize, [f64; 3], f64)],
    cfg: &ObjectiveConfig,
    u: f64,
    g_sdf: &mut [R],
) -> f64 {
    let pts: Vec<[R; 3]> = sil.iter().map(|(_, p, _)| p.map(R::of)).collect();
    let (vals, tape) = sdf.values_tape(&pts);
    let alpha = cfg.weights.mask_alpha;
    let mut loss = 0.0;
    let mut g = Vec::with_capacity(sil.len());
    for (v, &(_, _, m)) in vals.iter().zip(sil) {
        let (bce, d) = mask_term(v.as_f64(), m, alpha);
        loss += bce;
        // L_M = Σ bce / (α|U|), weighted by w_M
        g.push(R::of(cfg.weights.w_m * d / (alpha * u)));
    }
    sdf.backward_values(&tape, &g, g_sdf);
    loss
}

/// Returns unnormalized `Σ (‖∇f‖ − 1)²` and accumulates gradients.
fn eikonal_chunk<R: Real>(
    sdf: &SdfField<R>,
    pts: &[[f64; 3]],
    cfg: &ObjectiveConfig,
    total: usize,
    g_sdf: &mut [R],
) -> f64 {
    let q: Vec<[R; 3]> = pts.iter().map(|p| p.map(R::of)).collect();
    let jet = sdf.gradient_jet(&q);
    let mut loss = 0.0;
    let mut gg = Vec::with_capacity(q.len());
    for g in &jet.gradients {
        let l = dot(*g, *g).sqrt();
        let e = l - R::one();
        loss += e.as_f64() * e.as_f64();
        let s = if l.as_f64() > 1e-12 {
            R::of(2.0) * e / l
        } else {
            R::zero()
        };
        gg.push([s * g[0], s * g[1], s * g[2]]);
    }
    let zeros = vec![R::zero(); q.len()];
    let w = R::of(cfg.weights.w_e / total.max(1) as f64);
    for g in gg.iter_mut() {
        *g = g.map(|v| v * w);
    }
    sdf.backward(&jet, &zeros, &gg, None, g_sdf, false);
    loss
}
