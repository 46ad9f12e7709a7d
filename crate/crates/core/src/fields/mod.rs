//! Neural field representations: the signed distance network and the
//! view-dependent radiance network that consumes its geometry feature.

mod checkpoint;
mod encoding;
mod network;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointError, CHECKPOINT_MAGIC};
pub use encoding::FourierEncoding;
pub use network::{Activation, FieldError, FieldNetwork, Jet, Tape};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::real::Real;
use crate::trainer::adam::AdamState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Sine,
    Relu,
}

/// Architecture of both networks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub hidden_width: usize,
    /// Number of hidden (activated) layers; the networks have one more linear
    /// output layer on top.
    pub hidden_layers: usize,
    pub activation: ActivationKind,
    /// Fourier frequencies for the ray direction; 0 disables the features.
    pub fourier_k: usize,
    pub omega0: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            hidden_width: 256,
            hidden_layers: 4,
            activation: ActivationKind::Sine,
            fourier_k: 4,
            omega0: 30.0,
        }
    }
}

impl FieldConfig {
    /// Small networks that train in minutes on a single CPU core.
    pub fn desk() -> Self {
        Self {
            hidden_width: 64,
            hidden_layers: 3,
            ..Self::default()
        }
    }

    fn activation(&self) -> Activation {
        match self.activation {
            ActivationKind::Sine => Activation::Sine {
                omega_first: self.omega0,
                omega_hidden: self.omega0,
            },
            ActivationKind::Relu => Activation::Relu,
        }
    }

    fn hidden_dims(&self, input: usize, output: usize) -> Vec<usize> {
        let mut dims = vec![input];
        dims.extend(std::iter::repeat(self.hidden_width).take(self.hidden_layers));
        dims.push(output);
        dims
    }
}

/// `f(x; θ)`, plus the last hidden activation used as geometry feature.
#[derive(Debug, Clone, PartialEq)]
pub struct SdfField<R> {
    pub net: FieldNetwork<R>,
}

/// Output of [`SdfField::gradient_jet`].
pub struct SdfJet<R> {
    pub values: Vec<R>,
    pub gradients: Vec<[R; 3]>,
    pub tape: Tape<R>,
}

impl<R: Real> SdfJet<R> {
    pub fn features(&self) -> &[R] {
        self.tape.feature()
    }
}

impl<R: Real> SdfField<R> {
    pub fn new(cfg: &FieldConfig) -> Self {
        let net = FieldNetwork::new(&cfg.hidden_dims(3, 1), cfg.activation())
            .expect("at least one layer");
        Self { net }
    }

    pub fn from_network(net: FieldNetwork<R>) -> Result<Self, FieldError> {
        if net.input_dim() != 3 {
            return Err(FieldError::DimensionMismatch {
                expected: 3,
                got: net.input_dim(),
            });
        }
        if net.output_dim() != 1 {
            return Err(FieldError::DimensionMismatch {
                expected: 1,
                got: net.output_dim(),
            });
        }
        Ok(Self { net })
    }

    pub fn feature_dim(&self) -> usize {
        self.net.feature_dim()
    }

    pub fn value(&self, p: [R; 3]) -> R {
        self.net.eval_values(&p, 1).0[0]
    }

    pub fn values(&self, pts: &[[R; 3]]) -> Vec<R> {
        self.net.eval_values(pts.as_flattened(), pts.len()).0
    }

    /// Values and geometry features (`n × feature_dim`).
    pub fn values_features(&self, pts: &[[R; 3]]) -> (Vec<R>, Vec<R>) {
        self.net.eval_values(pts.as_flattened(), pts.len())
    }

    /// Values, spatial gradients and the tape for a reverse pass.
    pub fn gradient_jet(&self, pts: &[[R; 3]]) -> SdfJet<R> {
        let n = pts.len();
        let mut jet = Jet::zeros(n, 3, 3, false);
        jet.value_mut().copy_from_slice(pts.as_flattened());
        for j in 0..3 {
            let t = jet.tangent_mut(j);
            for i in 0..n {
                t[i * 3 + j] = R::one();
            }
        }
        let (out, tape) = self.net.forward_jet(&jet).expect("input width is 3");
        let values = out.value().to_vec();
        let gradients = (0..n)
            .map(|i| [out.tangent(0)[i], out.tangent(1)[i], out.tangent(2)[i]])
            .collect();
        SdfJet {
            values,
            gradients,
            tape,
        }
    }

    /// Values with a tape for [`SdfField::backward_values`].
    pub fn values_tape(&self, pts: &[[R; 3]]) -> (Vec<R>, Tape<R>) {
        let jet = Jet::from_values(pts.len(), 3, pts.as_flattened().to_vec());
        let (out, tape) = self.net.forward_jet(&jet).expect("input width is 3");
        (out.data, tape)
    }

    pub fn backward_values(&self, tape: &Tape<R>, g_values: &[R], param_grad: &mut [R]) {
        self.net.backward(tape, g_values, None, param_grad, false);
    }

    pub fn gradient(&self, p: [R; 3]) -> [R; 3] {
        self.gradient_jet(&[p]).gradients[0]
    }

    /// Reverse pass for a [`SdfJet`]: cotangents on values, gradients and
    /// (optionally) geometry features. Accumulates into `param_grad` and
    /// returns the cotangent of the query points when `want_points`.
    pub fn backward(
        &self,
        jet: &SdfJet<R>,
        g_values: &[R],
        g_gradients: &[[R; 3]],
        g_features: Option<&[R]>,
        param_grad: &mut [R],
        want_points: bool,
    ) -> Option<Vec<[R; 3]>> {
        let n = jet.values.len();
        let mut g_out = vec![R::zero(); 4 * n];
        g_out[..n].copy_from_slice(g_values);
        for (i, g) in g_gradients.iter().enumerate() {
            for j in 0..3 {
                g_out[(1 + j) * n + i] = g[j];
            }
        }
        let g_in = self
            .net
            .backward(&jet.tape, &g_out, g_features, param_grad, want_points)?;
        Some(
            g_in[..3 * n]
                .chunks_exact(3)
                .map(|c| [c[0], c[1], c[2]])
                .collect(),
        )
    }

    pub fn cast<S: Real>(&self) -> SdfField<S> {
        SdfField {
            net: self.net.cast(),
        }
    }
}

/// How many angular derivatives the radiance jet carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AngularOrder {
    None,
    /// Second derivatives along each r_d axis (Laplacian).
    Laplacian,
    /// Axis and pairwise directions (full Hessian).
    Hessian,
}

impl AngularOrder {
    /// Directions in r_d space the jet differentiates along.
    pub fn directions(&self) -> Vec<[f64; 3]> {
        match self {
            AngularOrder::None => vec![],
            AngularOrder::Laplacian => vec![[1., 0., 0.], [0., 1., 0.], [0., 0., 1.]],
            AngularOrder::Hessian => vec![
                [1., 0., 0.],
                [0., 1., 0.],
                [0., 0., 1.],
                [1., 1., 0.],
                [1., 0., 1.],
                [0., 1., 1.],
            ],
        }
    }
}

/// Per-query radiance inputs besides the geometry feature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadianceQuery<R> {
    pub x: [R; 3],
    pub dir: [R; 3],
    pub normal: [R; 3],
}

/// Cotangents of the differentiable radiance inputs.
pub struct RadianceInputGrad<R> {
    pub x: Vec<[R; 3]>,
    pub normal: Vec<[R; 3]>,
    pub feature: Vec<R>,
}

/// `B(x, r_d, n, z; φ)`: input is `x ⊕ r_d ⊕ FF(r_d) ⊕ n ⊕ z`.
#[derive(Debug, Clone, PartialEq)]
pub struct RadianceField<R> {
    pub net: FieldNetwork<R>,
    pub encoding: FourierEncoding,
    feature_dim: usize,
}

impl<R: Real> RadianceField<R> {
    pub fn new(cfg: &FieldConfig, feature_dim: usize) -> Self {
        let encoding = FourierEncoding::new(cfg.fourier_k);
        let input = 9 + encoding.output_dim() + feature_dim;
        let net = FieldNetwork::new(&cfg.hidden_dims(input, 3), cfg.activation())
            .expect("at least one layer");
        Self {
            net,
            encoding,
            feature_dim,
        }
    }

    pub fn from_network(
        net: FieldNetwork<R>,
        encoding: FourierEncoding,
    ) -> Result<Self, FieldError> {
        let fixed = 9 + encoding.output_dim();
        if net.input_dim() < fixed {
            return Err(FieldError::DimensionMismatch {
                expected: fixed,
                got: net.input_dim(),
            });
        }
        if net.output_dim() != 3 {
            return Err(FieldError::DimensionMismatch {
                expected: 3,
                got: net.output_dim(),
            });
        }
        let feature_dim = net.input_dim() - fixed;
        Ok(Self {
            net,
            encoding,
            feature_dim,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn normal_offset(&self) -> usize {
        6 + self.encoding.output_dim()
    }

    fn feature_offset(&self) -> usize {
        9 + self.encoding.output_dim()
    }

    /// Builds the input jet. Tangent `j` differentiates along
    /// `order.directions()[j]` in r_d space.
    pub fn input_jet(
        &self,
        queries: &[RadianceQuery<R>],
        features: &[R],
        order: AngularOrder,
    ) -> Jet<R> {
        let n = queries.len();
        let f = self.feature_dim;
        assert_eq!(features.len(), n * f);
        let width = self.net.input_dim();
        let dirs = order.directions();
        let k = dirs.len();
        let mut jet = Jet::zeros(n, width, k, k > 0);
        let ff = self.encoding.output_dim();
        let (no, fo) = (self.normal_offset(), self.feature_offset());
        let mut enc = vec![R::zero(); ff];
        let mut d1 = vec![R::zero(); ff];
        let mut d2 = vec![R::zero(); ff];
        for (i, q) in queries.iter().enumerate() {
            self.encoding
                .encode_with_derivatives(&q.dir, &mut enc, Some(&mut d1), Some(&mut d2));
            let row = &mut jet.value_mut()[i * width..(i + 1) * width];
            row[0..3].copy_from_slice(&q.x);
            row[3..6].copy_from_slice(&q.dir);
            row[6..6 + ff].copy_from_slice(&enc);
            row[no..no + 3].copy_from_slice(&q.normal);
            row[fo..fo + f].copy_from_slice(&features[i * f..(i + 1) * f]);
            for (j, v) in dirs.iter().enumerate() {
                let t = &mut jet.tangent_mut(j)[i * width..(i + 1) * width];
                for c in 0..3 {
                    t[3 + c] = R::of(v[c]);
                }
                for e in 0..ff {
                    t[6 + e] = R::of(v[self.encoding.component_of(e)]) * d1[e];
                }
                let s = &mut jet.second_order_mut(j)[i * width..(i + 1) * width];
                for e in 0..ff {
                    let vc = R::of(v[self.encoding.component_of(e)]);
                    s[6 + e] = vc * vc * d2[e];
                }
            }
        }
        jet
    }

    /// Plain RGB evaluation (unclamped).
    pub fn eval(&self, queries: &[RadianceQuery<R>], features: &[R]) -> Vec<[R; 3]> {
        let jet = self.input_jet(queries, features, AngularOrder::None);
        let (out, _) = self.net.eval_values(&jet.data, queries.len());
        out.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
    }

    /// Extracts cotangents of `x`, `n` and `z` from an input-jet cotangent.
    pub fn split_input_grad(&self, g_in: &[R], n: usize) -> RadianceInputGrad<R> {
        let width = self.net.input_dim();
        let (no, fo) = (self.normal_offset(), self.feature_offset());
        let f = self.feature_dim;
        let mut out = RadianceInputGrad {
            x: Vec::with_capacity(n),
            normal: Vec::with_capacity(n),
            feature: Vec::with_capacity(n * f),
        };
        for row in g_in[..n * width].chunks_exact(width) {
            out.x.push([row[0], row[1], row[2]]);
            out.normal.push([row[no], row[no + 1], row[no + 2]]);
            out.feature.extend_from_slice(&row[fo..fo + f]);
        }
        out
    }

    pub fn cast<S: Real>(&self) -> RadianceField<S> {
        RadianceField {
            net: self.net.cast(),
            encoding: self.encoding,
            feature_dim: self.feature_dim,
        }
    }
}

/// SDF and radiance networks trained together.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralModel<R> {
    pub sdf: SdfField<R>,
    pub radiance: RadianceField<R>,
}

impl<R: Real> NeuralModel<R> {
    /// Zero-initialized model.
    pub fn new(cfg: &FieldConfig) -> Self {
        let sdf = SdfField::new(cfg);
        let radiance = RadianceField::new(cfg, sdf.feature_dim());
        Self { sdf, radiance }
    }

    pub fn init<G: Rng + ?Sized>(cfg: &FieldConfig, rng: &mut G) -> Self {
        let mut model = Self::new(cfg);
        model.sdf.net.init(rng);
        model.radiance.net.init(rng);
        model
    }

    pub fn param_count(&self) -> usize {
        self.sdf.net.param_count() + self.radiance.net.param_count()
    }

    pub fn cast<S: Real>(&self) -> NeuralModel<S> {
        NeuralModel {
            sdf: self.sdf.cast(),
            radiance: self.radiance.cast(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PretrainError {
    #[error("sphere pretraining diverged at step {step}")]
    NonFinite { step: usize },
    #[error("radius must be positive")]
    InvalidRadius,
}

/// Settings for regressing the SDF to an analytic sphere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub radius: f64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            radius: 0.5,
            steps: 1000,
            batch: 1024,
            lr: 1e-4,
        }
    }
}

/// Regresses `f` to `‖x‖ − radius` on uniform samples of `[−1, 1]³` with an
/// L1 value term and an L2 term pulling `∇f` towards the analytic normal.
/// Returns the final mean absolute value error of the last batch.
pub fn pretrain_sphere<R: Real, G: Rng + ?Sized>(
    sdf: &mut SdfField<R>,
    cfg: &PretrainConfig,
    rng: &mut G,
) -> Result<f64, PretrainError> {
    if cfg.radius <= 0.0 || !cfg.radius.is_finite() {
        return Err(PretrainError::InvalidRadius);
    }
    const GRAD_WEIGHT: f64 = 0.1;
    let mut adam = AdamState::<R>::new(sdf.net.param_count());
    let mut grad = vec![R::zero(); sdf.net.param_count()];
    let mut last = f64::INFINITY;
    let n = cfg.batch.max(1);
    let inv_n = R::of(1.0 / n as f64);
    for step in 0..cfg.steps {
        let pts: Vec<[R; 3]> = (0..n)
            .map(|_| {
                [
                    R::of(rng.gen_range(-1.0..1.0)),
                    R::of(rng.gen_range(-1.0..1.0)),
                    R::of(rng.gen_range(-1.0..1.0)),
                ]
            })
            .collect();
        let jet = sdf.gradient_jet(&pts);
        let mut g_val = vec![R::zero(); n];
        let mut g_grad = vec![[R::zero(); 3]; n];
        let mut err = 0.0;
        for i in 0..n {
            let p = pts[i];
            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            let target = r - R::of(cfg.radius);
            let d = jet.values[i] - target;
            err += d.as_f64().abs();
            g_val[i] = d.signum() * inv_n;
            if r > R::of(1e-6) {
                for j in 0..3 {
                    let gd = jet.gradients[i][j] - p[j] / r;
                    g_grad[i][j] = R::of(2.0 * GRAD_WEIGHT) * gd * inv_n;
                }
            }
        }
        last = err / n as f64;
        if !last.is_finite() {
            return Err(PretrainError::NonFinite { step });
        }
        grad.iter_mut().for_each(|g| *g = R::zero());
        sdf.backward(&jet, &g_val, &g_grad, None, &mut grad, false);
        adam.step(sdf.net.params_mut(), &grad, cfg.lr)
            .map_err(|_| PretrainError::NonFinite { step })?;
    }
    Ok(last)
}
