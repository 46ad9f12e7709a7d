//! Sphere-traced rendering of the neural fields.

use rayon::prelude::*;

use crate::fields::{NeuralModel, RadianceQuery};
use crate::geometry::{Camera, Ray};
use crate::real::Real;
use crate::scene_io::Image;
use crate::tracer::{trace_batch, TraceConfig};

/// RGB (clamped to `[0, 1]`), coverage and camera-to-hit distance per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralFrame {
    pub image: Image,
    pub alpha: Vec<bool>,
    /// Euclidean distance from the camera center; `inf` for background.
    pub depth: Vec<f32>,
}

const PIXEL_CHUNK: usize = 1024;

/// Renders `model` from `camera`. Output depends only on inputs, not on the
/// worker count.
pub fn render_neural<R: Real>(model: &NeuralModel<R>, camera: &Camera, trace: &TraceConfig) -> NeuralFrame {
    let (w, h) = (camera.width(), camera.height());
    let rays: Vec<Ray> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .map(|(x, y)| camera.pixel_ray(x, y))
        .collect();
    let parts: Vec<Vec<(Option<[f32; 3]>, f32)>> = rays
        .par_chunks(PIXEL_CHUNK)
        .map(|chunk| shade_chunk(model, chunk, trace))
        .collect();
    let mut image = Image::new(w, h);
    let mut alpha = vec![false; rays.len()];
    let mut depth = vec![f32::INFINITY; rays.len()];
    for (i, (c, d)) in parts.into_iter().flatten().enumerate() {
        if let Some(c) = c {
            image.data[i] = c;
            alpha[i] = true;
            depth[i] = d;
        }
    }
    NeuralFrame {
        image,
        alpha,
        depth,
    }
}

fn shade_chunk<R: Real>(
    model: &NeuralModel<R>,
    rays: &[Ray],
    trace: &TraceConfig,
) -> Vec<(Option<[f32; 3]>, f32)> {
    let hits = trace_batch(&model.sdf, rays, trace);
    let idx: Vec<usize> = (0..rays.len()).filter(|&i| hits[i].is_hit()).collect();
    let pts: Vec<[R; 3]> = idx.iter().map(|&i| hits[i].x.map(R::of)).collect();
    let mut out = vec![(None, f32::INFINITY); rays.len()];
    if pts.is_empty() {
        return out;
    }
    let jet = model.sdf.gradient_jet(&pts);
    let queries: Vec<RadianceQuery<R>> = idx
        .iter()
        .zip(&jet.gradients)
        .zip(&pts)
        .map(|((&i, g), p)| {
            let l = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt().max(R::of(1e-12));
            let d = rays[i].dir;
            RadianceQuery {
                x: *p,
                dir: [R::of(d.x), R::of(d.y), R::of(d.z)],
                normal: [g[0] / l, g[1] / l, g[2] / l],
            }
        })
        .collect();
    let rgb = model.radiance.eval(&queries, jet.features());
    for (&i, c) in idx.iter().zip(&rgb) {
        let col = c.map(|v| v.as_f64().clamp(0.0, 1.0) as f32);
        out[i] = (Some(col), hits[i].t as f32);
    }
    out
}
