//! Instance normalization and its conditional variant (CIN), where the
//! per-channel scale and shift are affine functions of a condition vector.

use rand::Rng;

use super::linear::{Linear, Matrix};
use super::params::{ParamStore};
use super::tensor::Tensor4;
use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct InstanceNormCache {
    xhat: Tensor4,
    inv_std: Vec<f64>,
}

impl InstanceNormCache {
    pub fn normalized(&self) -> &Tensor4 {
        &self.xhat
    }
}

/// Per-sample, per-channel standardization with biased variance.
pub fn instance_norm(x: &Tensor4) -> (Tensor4, InstanceNormCache) {
    let hw = x.plane_len();
    let mut xhat = x.zeros_like();
    let mut inv_std = Vec::with_capacity(x.n * x.c);
    for (src, dst) in x.data.chunks(hw).zip(xhat.data.chunks_mut(hw)) {
        let mean = src.iter().sum::<f64>() / hw as f64;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
        let is = 1.0 / (var + NORM_EPS).sqrt();
        for (d, s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * is;
        }
        inv_std.push(is);
    }
    (xhat.clone(), InstanceNormCache { xhat, inv_std })
}

pub fn instance_norm_backward(cache: &InstanceNormCache, dxhat: &Tensor4) -> Tensor4 {
    let hw = dxhat.plane_len();
    let mut dx = dxhat.zeros_like();
    for (((g, xh), out), &is) in dxhat
        .data
        .chunks(hw)
        .zip(cache.xhat.data.chunks(hw))
        .zip(dx.data.chunks_mut(hw))
        .zip(&cache.inv_std)
    {
        let mean_g = g.iter().sum::<f64>() / hw as f64;
        let mean_gx = g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / hw as f64;
        for ((o, &gi), &xi) in out.iter_mut().zip(g).zip(xh) {
            *o = is * (gi - mean_g - xi * mean_gx);
        }
    }
    dx
}

/// Conditional instance normalization: `γ(cond)·x̂ + β(cond)`.
#[derive(Debug, Clone)]
pub struct CondInstanceNorm {
    pub channels: usize,
    pub cond_dim: usize,
    pub gamma: Linear,
    pub beta: Linear,
}

#[derive(Debug, Clone)]
pub struct CinCache {
    norm: InstanceNormCache,
    gamma: Matrix,
    cond: Matrix,
}

impl CondInstanceNorm {
    /// Affine maps start at γ = 1, β = 0 plus a `gain`-scaled random
    /// dependence on the condition.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        cond_dim: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let gamma = Linear::new(store, &format!("{name}.gamma"), cond_dim, channels, true, gain, rng);
        store.value_mut(gamma.bias.expect("gamma has bias")).fill(1.0);
        let beta = Linear::new(store, &format!("{name}.beta"), cond_dim, channels, true, gain, rng);
        Self {
            channels,
            cond_dim,
            gamma,
            beta,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor4, cond: &Matrix) -> Result<(Tensor4, CinCache)> {
        if x.c != self.channels {
            return Err(Error::shape("CondInstanceNorm", self.channels, x.c));
        }
        if cond.rows != x.n {
            return Err(Error::shape("CondInstanceNorm cond rows", x.n, cond.rows));
        }
        let gamma = self.gamma.forward(store, cond)?;
        let beta = self.beta.forward(store, cond)?;
        let (mut y, norm) = instance_norm(x);
        let hw = x.plane_len();
        for (i, plane) in y.data.chunks_mut(hw).enumerate() {
            let (n, c) = (i / x.c, i % x.c);
            let (g, b) = (gamma.row(n)[c], beta.row(n)[c]);
            plane.iter_mut().for_each(|v| *v = g * *v + b);
        }
        Ok((
            y,
            CinCache {
                norm,
                gamma,
                cond: cond.clone(),
            },
        ))
    }

    pub fn backward(&self, store: &mut ParamStore, cache: &CinCache, dy: &Tensor4) -> Tensor4 {
        let (n, c) = (dy.n, dy.c);
        let hw = dy.plane_len();
        let mut dgamma = Matrix::zeros(n, c);
        let mut dbeta = Matrix::zeros(n, c);
        let mut dxhat = dy.zeros_like();
        for (i, ((g, xh), out)) in dy
            .data
            .chunks(hw)
            .zip(cache.norm.xhat.data.chunks(hw))
            .zip(dxhat.data.chunks_mut(hw))
            .enumerate()
        {
            let (s, ch) = (i / c, i % c);
            dgamma.row_mut(s)[ch] = g.iter().zip(xh).map(|(a, b)| a * b).sum();
            dbeta.row_mut(s)[ch] = g.iter().sum();
            let gm = cache.gamma.row(s)[ch];
            out.iter_mut().zip(g).for_each(|(o, gi)| *o = gm * gi);
        }
        self.gamma.backward(store, &cache.cond, &dgamma);
        self.beta.backward(store, &cache.cond, &dbeta);
        instance_norm_backward(&cache.norm, &dxhat)
    }
}
