use std::f64::consts::PI;

use crate::real::Real;

/// Fourier features of a ray direction: `sin(2kπ r)`, `cos(2kπ r)` for
/// `k = 1..=k_max`, per component.
///
/// Layout for each `k`: `[sin r_x, sin r_y, sin r_z, cos r_x, cos r_y, cos r_z]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FourierEncoding {
    pub k_max: usize,
}

impl Default for FourierEncoding {
    fn default() -> Self {
        Self { k_max: 4 }
    }
}

impl FourierEncoding {
    pub fn new(k_max: usize) -> Self {
        Self { k_max }
    }

    pub fn output_dim(&self) -> usize {
        3 * 2 * self.k_max
    }

    /// Writes the encoding of `dir` into `out` (length `output_dim`).
    pub fn encode<R: Real>(&self, dir: &[R; 3], out: &mut [R]) {
        self.encode_with_derivatives(dir, out, None, None);
    }

    /// Encoding plus, for each component, the first and second derivative
    /// of every feature with respect to that component (each feature depends
    /// on a single component, so these are the only non-zero terms).
    pub fn encode_with_derivatives<R: Real>(
        &self,
        dir: &[R; 3],
        out: &mut [R],
        mut d1: Option<&mut [R]>,
        mut d2: Option<&mut [R]>,
    ) {
        debug_assert_eq!(out.len(), self.output_dim());
        for k in 1..=self.k_max {
            let freq = R::of(2.0 * k as f64 * PI);
            let base = (k - 1) * 6;
            for i in 0..3 {
                let (s, c) = (freq * dir[i]).sin_cos();
                out[base + i] = s;
                out[base + 3 + i] = c;
                if let Some(d1) = d1.as_deref_mut() {
                    d1[base + i] = freq * c;
                    d1[base + 3 + i] = -freq * s;
                }
                if let Some(d2) = d2.as_deref_mut() {
                    d2[base + i] = -freq * freq * s;
                    d2[base + 3 + i] = -freq * freq * c;
                }
            }
        }
    }

    /// Component of the ray direction a feature depends on.
    pub fn component_of(&self, feature: usize) -> usize {
        feature % 3
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dimension_is_six_per_frequency() {
        assert_eq!(FourierEncoding::default().output_dim(), 24);
        assert_eq!(FourierEncoding::new(0).output_dim(), 0);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let enc = FourierEncoding::default();
        let d = [0.3f64, -0.7, 0.2];
        let n = enc.output_dim();
        let (mut v, mut d1, mut d2) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        enc.encode_with_derivatives(&d, &mut v, Some(&mut d1), Some(&mut d2));
        let h = 1e-5;
        for f in 0..n {
            let c = enc.component_of(f);
            let mut dp = d;
            dp[c] += h;
            let mut dm = d;
            dm[c] -= h;
            let (mut vp, mut vm) = (vec![0.0; n], vec![0.0; n]);
            enc.encode(&dp, &mut vp);
            enc.encode(&dm, &mut vm);
            let fd1 = (vp[f] - vm[f]) / (2.0 * h);
            let fd2 = (vp[f] - 2.0 * v[f] + vm[f]) / (h * h);
            assert!((fd1 - d1[f]).abs() < 1e-6 * d1[f].abs().max(1.0));
            assert!((fd2 - d2[f]).abs() < 1e-3 * d2[f].abs().max(1.0));
        }
    }
}
