//! Projection discriminator: spectrally normalized convolutions, global sum
//! pooling, and an inner product between the pooled features and an
//! embedding of the pose condition.

use rand::Rng;

use super::act;
use super::conv::ConvSpec;
use super::linear::{Linear, Matrix};
use super::params::ParamStore;
use super::pas::{LEAKY_SLOPE, POSE_COND_DIM};
use super::spectral::{SnConv2d, SnConvCache};
use super::tensor::{global_sum_pool, global_sum_pool_backward, Tensor4};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DiscConfig {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub cond_dim: usize,
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: vec![32, 64, 128],
            cond_dim: POSE_COND_DIM,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    pub cfg: DiscConfig,
    convs: Vec<SnConv2d>,
    /// Unconditional linear read-out `⟨w, h⟩ + b`.
    pub readout: Linear,
    /// Condition embedding `E`; contributes `⟨E·cond, h⟩`.
    pub embed: Linear,
}

pub struct DiscCache {
    convs: Vec<SnConvCache>,
    pre: Vec<Vec<f64>>,
    feat_shape: [usize; 4],
    pooled: Matrix,
    cond: Matrix,
    projected: Matrix,
}

impl Discriminator {
    pub fn new(store: &mut ParamStore, cfg: DiscConfig, rng: &mut impl Rng) -> Self {
        let mut convs = Vec::with_capacity(cfg.widths.len());
        let mut c_in = cfg.in_channels;
        for (k, &c_out) in cfg.widths.iter().enumerate() {
            convs.push(SnConv2d::new(
                store,
                &format!("disc.conv{k}"),
                ConvSpec::new(c_in, c_out, 3, 2, 1),
                rng,
            ));
            c_in = c_out;
        }
        let readout = Linear::new(store, "disc.readout", c_in, 1, true, 1.0, rng);
        let embed = Linear::new(store, "disc.embed", cfg.cond_dim, c_in, false, 1.0, rng);
        Self {
            cfg,
            convs,
            readout,
            embed,
        }
    }

    /// One power iteration per convolution; called once per training step.
    pub fn refresh_spectral(&self, store: &mut ParamStore) {
        for c in &self.convs {
            c.power_iterate(store, 1);
        }
    }

    /// Runs enough power iterations for the estimates to settle.
    pub fn converge_spectral(&self, store: &mut ParamStore, n_iter: usize) {
        for c in &self.convs {
            c.power_iterate(store, n_iter);
        }
    }

    /// One score per batch element.
    pub fn forward(&self, store: &ParamStore, x: &Tensor4, cond: &Matrix) -> Result<(Vec<f64>, DiscCache)> {
        if cond.rows != x.n || cond.cols != self.cfg.cond_dim {
            return Err(Error::shape(
                "Discriminator::forward cond",
                format!("{}x{}", x.n, self.cfg.cond_dim),
                format!("{}x{}", cond.rows, cond.cols),
            ));
        }
        let mut convs = Vec::with_capacity(self.convs.len());
        let mut pre = Vec::with_capacity(self.convs.len());
        let mut h = x.clone();
        for conv in &self.convs {
            let (y, c) = conv.forward(store, &h)?;
            convs.push(c);
            h = Tensor4 {
                data: act::leaky_relu(&y.data, LEAKY_SLOPE),
                ..y
            };
            pre.push(y.data);
        }
        let feat_shape = h.shape();
        let pooled = Matrix::from_vec(h.n, h.c, global_sum_pool(&h))?;
        let base = self.readout.forward(store, &pooled)?;
        let projected = self.embed.forward(store, cond)?;
        let scores = (0..x.n)
            .map(|i| {
                base.data[i] + projected.row(i).iter().zip(pooled.row(i)).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        Ok((
            scores,
            DiscCache {
                convs,
                pre,
                feat_shape,
                pooled,
                cond: cond.clone(),
                projected,
            },
        ))
    }

    /// `dscores[i]` is the loss gradient w.r.t. score `i`. Accumulates
    /// parameter gradients (when enabled) and returns the image gradient.
    pub fn backward(&self, store: &mut ParamStore, cache: &DiscCache, dscores: &[f64]) -> Tensor4 {
        let n = dscores.len();
        let ds = Matrix {
            rows: n,
            cols: 1,
            data: dscores.to_vec(),
        };
        let mut dpooled = self.readout.backward(store, &cache.pooled, &ds);
        let mut dproj = Matrix::zeros(n, cache.projected.cols);
        for i in 0..n {
            for (j, (dp, dq)) in dpooled.row_mut(i).iter_mut().zip(dproj.row_mut(i)).enumerate() {
                *dp += dscores[i] * cache.projected.row(i)[j];
                *dq = dscores[i] * cache.pooled.row(i)[j];
            }
        }
        if store.requires_grad() {
            self.embed.backward(store, &cache.cond, &dproj);
        }
        let [bn, c, h, w] = cache.feat_shape;
        let mut g = global_sum_pool_backward(&dpooled.data, bn, c, h, w);
        for k in (0..self.convs.len()).rev() {
            let dy = Tensor4 {
                data: act::leaky_relu_backward(&cache.pre[k], &g.data, LEAKY_SLOPE),
                ..g
            };
            g = self.convs[k].backward(store, &cache.convs[k], &dy);
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_embedding_ignores_condition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let d = Discriminator::new(&mut store, DiscConfig { widths: vec![4, 8], cond_dim: 6, ..DiscConfig::default() }, &mut rng);
        store.value_mut(d.embed.weight).fill(0.0);
        let x = Tensor4::from_vec(2, 3, 8, 8, (0..384).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let c1 = Matrix::from_vec(2, 6, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let c2 = Matrix::from_vec(2, 6, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let (s1, _) = d.forward(&store, &x, &c1).unwrap();
        let (s2, _) = d.forward(&store, &x, &c2).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(s1.len(), 2);
        assert!(s1.iter().all(|s| s.is_finite()));
    }
}
