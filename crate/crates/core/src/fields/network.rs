//! Fixed-topology MLP with analytic input derivatives.
//!
//! Evaluation works on *jets*: for every point we carry the value, `K`
//! first-order directional derivatives and optionally the matching `K`
//! second-order derivatives (d²/dt² along the same directions). A reverse pass
//! over the recorded jet gives parameter and input cotangents for any loss that
//! depends on values, gradients or Laplacians of the network output.
//!
//! Rows of every jet matrix are grouped in blocks: block 0 holds values,
//! blocks `1..=K` first-order tangents, blocks `K+1..=2K` second-order terms.
//! Each block is an `n × width` row-major matrix.

use rand::Rng;
use thiserror::Error;

use crate::real::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("network needs at least one layer")]
    NoLayers,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    /// `sin(ω·(Wx + b))`, with a separate ω for the first layer.
    Sine { omega_first: f64, omega_hidden: f64 },
    Relu,
}

impl Activation {
    pub const fn siren() -> Self {
        Activation::Sine {
            omega_first: 30.0,
            omega_hidden: 30.0,
        }
    }

    pub fn tag(&self) -> u8 {
        match self {
            Activation::Sine { .. } => 0,
            Activation::Relu => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerShape {
    in_dim: usize,
    out_dim: usize,
    w_offset: usize,
    b_offset: usize,
}

/// Dense MLP: hidden layers use `activation`, the last layer is linear.
/// Parameters live in one flat buffer, layer by layer, weights row-major
/// (`out × in`) followed by the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldNetwork<R> {
    activation: Activation,
    dims: Vec<usize>,
    layers: Vec<LayerShape>,
    params: Vec<R>,
}

/// Values plus directional derivatives for a batch of points.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet<R> {
    pub n: usize,
    pub width: usize,
    pub tangents: usize,
    pub second: bool,
    pub data: Vec<R>,
}

impl<R: Real> Jet<R> {
    pub fn zeros(n: usize, width: usize, tangents: usize, second: bool) -> Self {
        let blocks = block_count(tangents, second);
        Self {
            n,
            width,
            tangents,
            second,
            data: vec![R::zero(); blocks * n * width],
        }
    }

    /// Plain values, no derivatives.
    pub fn from_values(n: usize, width: usize, values: Vec<R>) -> Self {
        assert_eq!(values.len(), n * width);
        Self {
            n,
            width,
            tangents: 0,
            second: false,
            data: values,
        }
    }

    pub fn blocks(&self) -> usize {
        block_count(self.tangents, self.second)
    }

    pub fn rows(&self) -> usize {
        self.blocks() * self.n
    }

    fn block(&self, b: usize) -> &[R] {
        let len = self.n * self.width;
        &self.data[b * len..(b + 1) * len]
    }

    fn block_mut(&mut self, b: usize) -> &mut [R] {
        let len = self.n * self.width;
        &mut self.data[b * len..(b + 1) * len]
    }

    pub fn value(&self) -> &[R] {
        self.block(0)
    }

    pub fn value_mut(&mut self) -> &mut [R] {
        self.block_mut(0)
    }

    pub fn tangent(&self, j: usize) -> &[R] {
        assert!(j < self.tangents);
        self.block(1 + j)
    }

    pub fn tangent_mut(&mut self, j: usize) -> &mut [R] {
        assert!(j < self.tangents);
        self.block_mut(1 + j)
    }

    pub fn second_order(&self, j: usize) -> &[R] {
        assert!(self.second && j < self.tangents);
        self.block(1 + self.tangents + j)
    }

    pub fn second_order_mut(&mut self, j: usize) -> &mut [R] {
        assert!(self.second && j < self.tangents);
        let k = self.tangents;
        self.block_mut(1 + k + j)
    }
}

fn block_count(tangents: usize, second: bool) -> usize {
    1 + tangents + if second { tangents } else { 0 }
}

/// Intermediate state recorded by [`FieldNetwork::forward_jet`].
#[derive(Debug, Clone)]
pub struct Tape<R> {
    n: usize,
    tangents: usize,
    second: bool,
    /// Input of every layer (all jet rows).
    inputs: Vec<Vec<R>>,
    /// Pre-activations of hidden layers (all jet rows).
    pre: Vec<Vec<R>>,
    /// `sin(ω h₀)`, `cos(ω h₀)` of hidden layers (value rows only).
    sin: Vec<Vec<R>>,
    cos: Vec<Vec<R>>,
}

impl<R> Tape<R> {
    /// Value rows of the last hidden activation (the geometry feature tap).
    pub fn feature(&self) -> &[R] {
        let last = self.inputs.last().expect("tape has layers");
        let width = last.len() / (block_count(self.tangents, self.second) * self.n);
        &last[..self.n * width]
    }
}

impl<R: Real> FieldNetwork<R> {
    /// Zero-initialized network with the given layer widths
    /// (`dims[0]` = input, `dims.last()` = output).
    pub fn new(dims: &[usize], activation: Activation) -> Result<Self, FieldError> {
        if dims.len() < 2 {
            return Err(FieldError::NoLayers);
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        let mut offset = 0;
        for w in dims.windows(2) {
            let (in_dim, out_dim) = (w[0], w[1]);
            layers.push(LayerShape {
                in_dim,
                out_dim,
                w_offset: offset,
                b_offset: offset + in_dim * out_dim,
            });
            offset += in_dim * out_dim + out_dim;
        }
        Ok(Self {
            activation,
            dims: dims.to_vec(),
            layers,
            params: vec![R::zero(); offset],
        })
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Width of the last hidden layer (the input width of the output layer).
    pub fn feature_dim(&self) -> usize {
        self.layers.last().unwrap().in_dim
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[R] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [R] {
        &mut self.params
    }

    pub fn weights(&self, layer: usize) -> &[R] {
        let l = &self.layers[layer];
        &self.params[l.w_offset..l.b_offset]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [R] {
        let l = self.layers[layer];
        &mut self.params[l.w_offset..l.b_offset]
    }

    pub fn bias(&self, layer: usize) -> &[R] {
        let l = &self.layers[layer];
        &self.params[l.b_offset..l.b_offset + l.out_dim]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [R] {
        let l = self.layers[layer];
        &mut self.params[l.b_offset..l.b_offset + l.out_dim]
    }

    /// Frequency of a hidden layer; `None` for linear or ReLU layers.
    pub fn omega(&self, layer: usize) -> Option<f64> {
        if layer + 1 >= self.layers.len() {
            return None;
        }
        match self.activation {
            Activation::Sine {
                omega_first,
                omega_hidden,
            } => Some(if layer == 0 { omega_first } else { omega_hidden }),
            Activation::Relu => None,
        }
    }

    /// Same network in another precision.
    pub fn cast<S: Real>(&self) -> FieldNetwork<S> {
        FieldNetwork {
            activation: self.activation,
            dims: self.dims.clone(),
            layers: self.layers.clone(),
            params: self.params.iter().map(|p| S::of(p.as_f64())).collect(),
        }
    }

    /// SIREN initialization (sine) or He-uniform (ReLU).
    pub fn init<G: Rng + ?Sized>(&mut self, rng: &mut G) {
        let activation = self.activation;
        for l in 0..self.layers.len() {
            let in_dim = self.layers[l].in_dim as f64;
            let (w_bound, b_bound) = match activation {
                Activation::Sine {
                    omega_first,
                    omega_hidden,
                } => {
                    if l == 0 {
                        let _ = omega_first;
                        (1.0 / in_dim, 1.0 / in_dim)
                    } else {
                        let b = (6.0 / in_dim).sqrt() / omega_hidden;
                        (b, b)
                    }
                }
                Activation::Relu => ((6.0 / in_dim).sqrt(), 0.0),
            };
            for w in self.weights_mut(l) {
                *w = R::of(rng.gen_range(-w_bound..=w_bound));
            }
            for b in self.bias_mut(l) {
                *b = if b_bound > 0.0 {
                    R::of(rng.gen_range(-b_bound..=b_bound))
                } else {
                    R::zero()
                };
            }
        }
    }

    /// Single-point forward evaluation.
    pub fn forward(&self, x: &[R]) -> Result<Vec<R>, FieldError> {
        self.check_input(x.len())?;
        Ok(self.eval_values(x, 1).0)
    }

    fn check_input(&self, got: usize) -> Result<(), FieldError> {
        if got != self.input_dim() {
            return Err(FieldError::DimensionMismatch {
                expected: self.input_dim(),
                got,
            });
        }
        Ok(())
    }

    /// Batched value-only evaluation of `n` points (row-major `n × input_dim`).
    /// Also returns the last hidden activation (`n × feature_dim`).
    pub fn eval_values(&self, x: &[R], n: usize) -> (Vec<R>, Vec<R>) {
        assert_eq!(x.len(), n * self.input_dim());
        let mut cur = x.to_vec();
        let mut feature = Vec::new();
        for (l, shape) in self.layers.iter().enumerate() {
            let mut h = vec![R::zero(); n * shape.out_dim];
            self.linear(l, &cur, n, 1, &mut h);
            if let Some(omega) = self.omega(l) {
                R::sin_slice(R::of(omega), &mut h);
            } else if l + 1 < self.layers.len() {
                for v in h.iter_mut() {
                    *v = v.max(R::zero());
                }
            }
            if l + 2 == self.layers.len() {
                feature = h.clone();
            }
            cur = h;
        }
        if self.layers.len() == 1 {
            feature = x.to_vec();
        }
        (cur, feature)
    }

    /// `h = a·Wᵀ` for all rows, plus the bias on the first `value_rows` block.
    fn linear(&self, l: usize, a: &[R], n: usize, blocks: usize, h: &mut [R]) {
        let s = self.layers[l];
        let rows = n * blocks;
        R::gemm(
            rows,
            s.in_dim,
            s.out_dim,
            R::one(),
            a,
            s.in_dim as isize,
            1,
            self.weights(l),
            1,
            s.in_dim as isize,
            R::zero(),
            h,
            s.out_dim as isize,
            1,
        );
        let bias = self.bias(l);
        for row in h[..n * s.out_dim].chunks_exact_mut(s.out_dim) {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += *b;
            }
        }
    }

    /// Forward pass over a jet, recording what the reverse pass needs.
    pub fn forward_jet(&self, input: &Jet<R>) -> Result<(Jet<R>, Tape<R>), FieldError> {
        self.check_input(input.width)?;
        let n = input.n;
        let k = input.tangents;
        let second = input.second;
        let blocks = input.blocks();
        let mut tape = Tape {
            n,
            tangents: k,
            second,
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::new(),
            sin: Vec::new(),
            cos: Vec::new(),
        };
        let mut cur = input.data.clone();
        for (l, shape) in self.layers.iter().enumerate() {
            let out = shape.out_dim;
            let mut h = vec![R::zero(); blocks * n * out];
            self.linear(l, &cur, n, blocks, &mut h);
            tape.inputs.push(cur);
            if l + 1 == self.layers.len() {
                cur = h;
                break;
            }
            let len = n * out;
            let mut a = vec![R::zero(); blocks * len];
            match self.omega(l) {
                Some(omega) => {
                    let w = R::of(omega);
                    let w2 = w * w;
                    let mut s = vec![R::zero(); len];
                    let mut c = vec![R::zero(); len];
                    R::sin_cos_slice(w, &h[..len], &mut s, &mut c);
                    a[..len].copy_from_slice(&s);
                    for j in 0..k {
                        let h1 = &h[(1 + j) * len..(2 + j) * len];
                        let a1 = &mut a[(1 + j) * len..(2 + j) * len];
                        for i in 0..len {
                            a1[i] = w * c[i] * h1[i];
                        }
                    }
                    if second {
                        for j in 0..k {
                            let (h1, h2) = (
                                &h[(1 + j) * len..(2 + j) * len],
                                &h[(1 + k + j) * len..(2 + k + j) * len],
                            );
                            let a2 = &mut a[(1 + k + j) * len..(2 + k + j) * len];
                            for i in 0..len {
                                a2[i] = w * c[i] * h2[i] - w2 * s[i] * h1[i] * h1[i];
                            }
                        }
                    }
                    tape.sin.push(s);
                    tape.cos.push(c);
                }
                None => {
                    // ReLU: the mask from the value rows gates every block.
                    for b in 0..blocks {
                        for i in 0..len {
                            a[b * len + i] = if h[i] > R::zero() {
                                h[b * len + i]
                            } else {
                                R::zero()
                            };
                        }
                    }
                    tape.sin.push(Vec::new());
                    tape.cos.push(Vec::new());
                }
            }
            tape.pre.push(h);
            cur = a;
        }
        let output = Jet {
            n,
            width: self.output_dim(),
            tangents: k,
            second,
            data: cur,
        };
        Ok((output, tape))
    }

    /// Reverse pass. `grad_out` is the cotangent of the output jet (same
    /// layout), `feature_grad` an optional cotangent on the value rows of the
    /// last hidden activation. Parameter gradients are *accumulated* into
    /// `param_grad`. Returns the input-jet cotangent when `want_input`.
    pub fn backward(
        &self,
        tape: &Tape<R>,
        grad_out: &[R],
        feature_grad: Option<&[R]>,
        param_grad: &mut [R],
        want_input: bool,
    ) -> Option<Vec<R>> {
        assert_eq!(param_grad.len(), self.params.len());
        let n = tape.n;
        let k = tape.tangents;
        let blocks = block_count(k, tape.second);
        let rows = n * blocks;
        let last = self.layers.len() - 1;
        assert_eq!(grad_out.len(), rows * self.output_dim());

        // Cotangent of the current layer's pre-activation.
        let mut gh = grad_out.to_vec();
        for l in (0..=last).rev() {
            let s = self.layers[l];
            let a = &tape.inputs[l];
            // Weight gradient: gW += ghᵀ·a.
            R::gemm(
                s.out_dim,
                rows,
                s.in_dim,
                R::one(),
                &gh,
                1,
                s.out_dim as isize,
                a,
                s.in_dim as isize,
                1,
                R::one(),
                &mut param_grad[s.w_offset..s.b_offset],
                s.in_dim as isize,
                1,
            );
            {
                let gb = &mut param_grad[s.b_offset..s.b_offset + s.out_dim];
                for row in gh[..n * s.out_dim].chunks_exact(s.out_dim) {
                    for (g, v) in gb.iter_mut().zip(row) {
                        *g += *v;
                    }
                }
            }
            if l == 0 && !want_input {
                return None;
            }
            // Cotangent of this layer's input: ga = gh·W.
            let mut ga = vec![R::zero(); rows * s.in_dim];
            R::gemm(
                rows,
                s.out_dim,
                s.in_dim,
                R::one(),
                &gh,
                s.out_dim as isize,
                1,
                self.weights(l),
                s.in_dim as isize,
                1,
                R::zero(),
                &mut ga,
                s.in_dim as isize,
                1,
            );
            if l == 0 {
                return Some(ga);
            }
            if l == last {
                if let Some(fg) = feature_grad {
                    assert_eq!(fg.len(), n * s.in_dim);
                    for (g, f) in ga[..n * s.in_dim].iter_mut().zip(fg) {
                        *g += *f;
                    }
                }
            }
            // Through the activation of layer l-1.
            gh = self.activation_backward(tape, l - 1, &ga);
        }
        None
    }

    fn activation_backward(&self, tape: &Tape<R>, l: usize, ga: &[R]) -> Vec<R> {
        let n = tape.n;
        let k = tape.tangents;
        let second = tape.second;
        let len = n * self.layers[l].out_dim;
        let h = &tape.pre[l];
        let mut gh = vec![R::zero(); ga.len()];
        match self.omega(l) {
            Some(omega) => {
                let w = R::of(omega);
                let w2 = w * w;
                let w3 = w2 * w;
                let s = &tape.sin[l];
                let c = &tape.cos[l];
                for i in 0..len {
                    gh[i] = w * c[i] * ga[i];
                }
                for j in 0..k {
                    let t = (1 + j) * len;
                    for i in 0..len {
                        gh[t + i] = w * c[i] * ga[t + i];
                        gh[i] -= w2 * s[i] * h[t + i] * ga[t + i];
                    }
                }
                if second {
                    for j in 0..k {
                        let t = (1 + j) * len;
                        let q = (1 + k + j) * len;
                        for i in 0..len {
                            let g2 = ga[q + i];
                            let h1 = h[t + i];
                            gh[q + i] = w * c[i] * g2;
                            gh[t + i] -= R::of(2.0) * w2 * s[i] * h1 * g2;
                            gh[i] -= (w2 * s[i] * h[q + i] + w3 * c[i] * h1 * h1) * g2;
                        }
                    }
                }
            }
            None => {
                let blocks = block_count(k, second);
                for b in 0..blocks {
                    for i in 0..len {
                        if h[i] > R::zero() {
                            gh[b * len + i] = ga[b * len + i];
                        }
                    }
                }
            }
        }
        gh
    }

    /// Jacobian `output_dim × input_dim` at `x`.
    pub fn input_gradient(&self, x: &[R]) -> Result<Vec<Vec<R>>, FieldError> {
        self.check_input(x.len())?;
        let d = self.input_dim();
        let mut jet = Jet::zeros(1, d, d, false);
        jet.value_mut().copy_from_slice(x);
        for j in 0..d {
            jet.tangent_mut(j)[j] = R::one();
        }
        let (out, _) = self.forward_jet(&jet)?;
        let m = self.output_dim();
        Ok((0..m)
            .map(|o| (0..d).map(|j| out.tangent(j)[o]).collect())
            .collect())
    }

    /// Gradient of `upstream · f(x)` with respect to every parameter.
    pub fn param_gradients(&self, x: &[R], upstream: &[R]) -> Result<Vec<R>, FieldError> {
        self.check_input(x.len())?;
        if upstream.len() != self.output_dim() {
            return Err(FieldError::DimensionMismatch {
                expected: self.output_dim(),
                got: upstream.len(),
            });
        }
        let jet = Jet::from_values(1, x.len(), x.to_vec());
        let (_, tape) = self.forward_jet(&jet)?;
        let mut g = vec![R::zero(); self.param_count()];
        self.backward(&tape, upstream, None, &mut g, false);
        Ok(g)
    }

    /// `Σ_{i∈subset} ∂²f/∂x_i²` per output channel.
    pub fn directional_second_derivative(
        &self,
        x: &[R],
        subset: &[usize],
    ) -> Result<Vec<R>, FieldError> {
        self.check_input(x.len())?;
        let d = self.input_dim();
        if let Some(&bad) = subset.iter().find(|&&i| i >= d) {
            return Err(FieldError::DimensionMismatch {
                expected: d,
                got: bad + 1,
            });
        }
        let k = subset.len();
        let mut jet = Jet::zeros(1, d, k, true);
        jet.value_mut().copy_from_slice(x);
        for (j, &i) in subset.iter().enumerate() {
            jet.tangent_mut(j)[i] = R::one();
        }
        let (out, _) = self.forward_jet(&jet)?;
        let m = self.output_dim();
        Ok((0..m)
            .map(|o| (0..k).map(|j| out.second_order(j)[o]).sum())
            .collect())
    }

    /// Exact Hessian over `subset` (per output channel, `|subset|²` entries,
    /// row-major). Mixed terms come from second-order jets along `e_i + e_j`.
    pub fn hessian(&self, x: &[R], subset: &[usize]) -> Result<Vec<Vec<R>>, FieldError> {
        self.check_input(x.len())?;
        let d = self.input_dim();
        let k = subset.len();
        let pairs: Vec<(usize, usize)> = (0..k)
            .flat_map(|a| (a + 1..k).map(move |b| (a, b)))
            .collect();
        let dirs = k + pairs.len();
        let mut jet = Jet::zeros(1, d, dirs, true);
        jet.value_mut().copy_from_slice(x);
        for (j, &i) in subset.iter().enumerate() {
            jet.tangent_mut(j)[i] = R::one();
        }
        for (p, &(a, b)) in pairs.iter().enumerate() {
            let t = jet.tangent_mut(k + p);
            t[subset[a]] = R::one();
            t[subset[b]] = R::one();
        }
        let (out, _) = self.forward_jet(&jet)?;
        let half = R::of(0.5);
        Ok((0..self.output_dim())
            .map(|o| {
                let mut h = vec![R::zero(); k * k];
                for a in 0..k {
                    h[a * k + a] = out.second_order(a)[o];
                }
                for (p, &(a, b)) in pairs.iter().enumerate() {
                    let mixed = half * (out.second_order(k + p)[o] - h[a * k + a] - h[b * k + b]);
                    h[a * k + b] = mixed;
                    h[b * k + a] = mixed;
                }
                h
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_net(dims: &[usize], seed: u64) -> FieldNetwork<f64> {
        let mut net = FieldNetwork::new(dims, Activation::siren()).unwrap();
        net.init(&mut ChaCha8Rng::seed_from_u64(seed));
        net
    }

    /// Straightforward per-layer evaluation used as an oracle.
    fn naive_forward(net: &FieldNetwork<f64>, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        for l in 0..net.num_layers() {
            let w = net.weights(l);
            let b = net.bias(l);
            let out = b.len();
            let mut next = vec![0.0; out];
            for o in 0..out {
                let mut acc = 0.0;
                for (i, xi) in cur.iter().enumerate() {
                    acc += w[o * cur.len() + i] * xi;
                }
                next[o] = acc + b[o];
                if let Some(omega) = net.omega(l) {
                    next[o] = (omega * next[o]).sin();
                }
            }
            cur = next;
        }
        cur
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = FieldNetwork::<f64>::new(&[3, 8, 8, 1], Activation::siren()).unwrap();
        assert_eq!(net.forward(&[0.3, -0.2, 0.9]).unwrap(), vec![0.0]);
    }

    #[test]
    fn single_linear_layer_is_identity_with_unit_weights() {
        let mut net = FieldNetwork::<f64>::new(&[3, 3], Activation::siren()).unwrap();
        for i in 0..3 {
            net.weights_mut(0)[i * 3 + i] = 1.0;
        }
        let x = [0.1, -2.0, 5.5];
        assert_eq!(net.forward(&x).unwrap(), x.to_vec());
        let jac = net.input_gradient(&x).unwrap();
        for (o, row) in jac.iter().enumerate() {
            for (i, v) in row.iter().enumerate() {
                assert_eq!(*v, if o == i { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn forward_matches_naive_oracle() {
        let net = random_net(&[3, 32, 32, 32, 32, 1], 7);
        for t in 0..20 {
            let x = [0.1 * t as f64 - 1.0, 0.3, -0.05 * t as f64];
            let a = net.forward(&x).unwrap();
            let b = naive_forward(&net, &x);
            assert!((a[0] - b[0]).abs() < 1e-12, "{} vs {}", a[0], b[0]);
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let net = random_net(&[3, 4, 1], 1);
        assert_eq!(
            net.forward(&[1.0, 2.0]),
            Err(FieldError::DimensionMismatch {
                expected: 3,
                got: 2
            })
        );
        assert!(net.param_gradients(&[0.0; 3], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn one_layer_quadratic_loss_gradient_is_outer_product() {
        let mut net = FieldNetwork::<f64>::new(&[2, 2], Activation::siren()).unwrap();
        net.params_mut()
            .copy_from_slice(&[1.0, 2.0, 3.0, 4.0, 0.5, -0.5]);
        let x = [0.2, -0.1];
        let y = net.forward(&x).unwrap();
        let target = [0.0, 1.0];
        // L = ½‖y − t‖², δ = y − t
        let delta: Vec<f64> = y.iter().zip(target).map(|(a, b)| a - b).collect();
        let g = net.param_gradients(&x, &delta).unwrap();
        let expected = [
            delta[0] * x[0],
            delta[0] * x[1],
            delta[1] * x[0],
            delta[1] * x[1],
            delta[0],
            delta[1],
        ];
        for (a, b) in g.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn ignored_inputs_have_zero_laplacian() {
        let mut net = random_net(&[4, 16, 16, 2], 3);
        // Zero the columns for inputs 2 and 3.
        let w = net.weights_mut(0);
        for o in 0..16 {
            w[o * 4 + 2] = 0.0;
            w[o * 4 + 3] = 0.0;
        }
        let lap = net
            .directional_second_derivative(&[0.1, 0.2, 0.3, 0.4], &[2, 3])
            .unwrap();
        assert_eq!(lap, vec![0.0, 0.0]);
    }

    #[test]
    fn relu_jets_match_piecewise_linear_structure() {
        let mut net = FieldNetwork::<f64>::new(&[3, 16, 16, 1], Activation::Relu).unwrap();
        net.init(&mut ChaCha8Rng::seed_from_u64(11));
        let x = [0.3, -0.4, 0.2];
        let lap = net.directional_second_derivative(&x, &[0, 1, 2]).unwrap();
        assert_eq!(lap, vec![0.0]);
        let jac = net.input_gradient(&x).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            let mut xp = x;
            xp[i] += h;
            let mut xm = x;
            xm[i] -= h;
            let fd = (net.forward(&xp).unwrap()[0] - net.forward(&xm).unwrap()[0]) / (2.0 * h);
            assert!((fd - jac[0][i]).abs() < 1e-8);
        }
    }

    #[test]
    fn hidden_bound_matches_formula() {
        let mut net = FieldNetwork::<f64>::new(&[3, 256, 256, 1], Activation::siren()).unwrap();
        net.init(&mut ChaCha8Rng::seed_from_u64(5));
        let bound = (6.0f64 / 256.0).sqrt() / 30.0;
        assert!((bound - 0.005103).abs() < 1e-6);
        let w = net.weights(1);
        let max = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max <= bound && max > 0.99 * bound);
        let first_max = net.weights(0).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(first_max <= 1.0 / 3.0);
    }

    #[test]
    fn init_is_deterministic() {
        let a = random_net(&[3, 64, 64, 1], 99);
        let b = random_net(&[3, 64, 64, 1], 99);
        assert_eq!(a, b);
    }

    #[test]
    fn batched_values_match_single_points() {
        let net = random_net(&[3, 24, 24, 2], 4).cast::<f32>();
        let pts: Vec<f32> = (0..30).map(|i| (i as f32 * 0.37).sin()).collect();
        let (batch, _) = net.eval_values(&pts, 10);
        for p in 0..10 {
            let single = net.forward(&pts[p * 3..p * 3 + 3]).unwrap();
            assert_eq!(&batch[p * 2..p * 2 + 2], single.as_slice());
        }
    }
}
