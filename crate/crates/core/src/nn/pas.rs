//! Pixel attention sampling network: a landmark-conditioned convolutional
//! embedder followed by a fully connected sampler that emits one normalized
//! source coordinate per output pixel.

use rand::Rng;

use super::act;
use super::attention::{AttentionCache, SelfAttention};
use super::conv::{Conv2d, ConvCache, ConvSpec};
use super::linear::{Linear, Matrix};
use super::norm::{CinCache, CondInstanceNorm};
use super::params::ParamStore;
use super::tensor::{global_avg_pool, global_avg_pool_backward, Tensor4};
use crate::error::{Error, Result};
use crate::geometry::{LandmarkSet3D, NUM_LANDMARKS};
use crate::sampling::{identity_grid, SamplingMap};

pub const POSE_COND_DIM: usize = NUM_LANDMARKS * 3;
pub const LEAKY_SLOPE: f64 = 0.2;
/// Largest |tanh| targeted by the identity-grid bias.
const GRID_CLAMP: f64 = 1.0 - 1e-7;

/// Flattened landmark condition: x and y scaled by the image size to
/// [-1, 1], depth scaled by half the width.
pub fn pose_condition(ldmk: &LandmarkSet3D, height: usize, width: usize) -> Vec<f64> {
    let (w, h) = (width as f64, height as f64);
    ldmk.points()
        .iter()
        .flat_map(|p| [2.0 * p[0] / w - 1.0, 2.0 * p[1] / h - 1.0, 2.0 * p[2] / w])
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PasConfig {
    pub resolution: usize,
    pub in_channels: usize,
    /// Output channels of the stride-2 blocks.
    pub widths: Vec<usize>,
    /// Self-attention follows this many blocks; 0 disables it.
    pub attention_after: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub cond_dim: usize,
}

impl Default for PasConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            in_channels: 3,
            widths: vec![16, 32, 48, 64],
            attention_after: 2,
            embed_dim: 512,
            hidden_dim: 512,
            cond_dim: POSE_COND_DIM,
        }
    }
}

#[derive(Debug, Clone)]
struct Block {
    conv: Conv2d,
    cin: CondInstanceNorm,
}

#[derive(Debug, Clone)]
pub struct Pas {
    pub cfg: PasConfig,
    blocks: Vec<Block>,
    attention: Option<SelfAttention>,
    embed: Linear,
    hidden: Linear,
    out: Linear,
}

pub struct PasCache {
    convs: Vec<ConvCache>,
    cins: Vec<CinCache>,
    acts: Vec<Vec<f64>>,
    attention: Option<AttentionCache>,
    pooled_shape: [usize; 4],
    pooled: Matrix,
    embedding: Matrix,
    hidden_pre: Matrix,
    hidden: Matrix,
    grid: Matrix,
}

impl Pas {
    pub fn new(store: &mut ParamStore, cfg: PasConfig, rng: &mut impl Rng) -> Result<Self> {
        let depth = cfg.widths.len();
        if depth == 0 || cfg.resolution % (1 << depth) != 0 {
            return Err(Error::InvalidInput(format!(
                "resolution {} not divisible by 2^{depth}",
                cfg.resolution
            )));
        }
        if cfg.attention_after > depth {
            return Err(Error::InvalidInput(format!(
                "attention_after {} exceeds block count {depth}",
                cfg.attention_after
            )));
        }
        let leaky_gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
        let mut blocks = Vec::with_capacity(depth);
        let mut c_in = cfg.in_channels;
        for (b, &c_out) in cfg.widths.iter().enumerate() {
            let conv = Conv2d::new(
                store,
                &format!("pas.block{b}.conv"),
                ConvSpec::new(c_in, c_out, 3, 2, 1),
                false,
                leaky_gain,
                rng,
            );
            let cin = CondInstanceNorm::new(store, &format!("pas.block{b}.cin"), c_out, cfg.cond_dim, 0.5, rng);
            blocks.push(Block { conv, cin });
            c_in = c_out;
        }
        let attention = (cfg.attention_after > 0).then(|| {
            let ch = cfg.widths[cfg.attention_after - 1];
            SelfAttention::new(store, "pas.attention", ch, rng)
        });
        let embed = Linear::new(store, "pas.embed", c_in, cfg.embed_dim, true, 1.0, rng);
        let hidden = Linear::new(store, "pas.sampler.fc1", cfg.embed_dim, cfg.hidden_dim, true, 2f64.sqrt(), rng);
        let hw = cfg.resolution * cfg.resolution;
        let out = Linear::new(store, "pas.sampler.fc2", cfg.hidden_dim, 2 * hw, true, 0.0, rng);
        let bias: Vec<f64> = identity_grid(cfg.resolution, cfg.resolution)
            .data()
            .iter()
            .map(|g| g.clamp(-GRID_CLAMP, GRID_CLAMP).atanh())
            .collect();
        store.value_mut(out.bias.expect("sampler output has bias")).copy_from_slice(&bias);
        Ok(Self {
            cfg,
            blocks,
            attention,
            embed,
            hidden,
            out,
        })
    }

    /// `x`: N×C×R×R images, `cond`: N×cond_dim. Returns an N×2×R×R tensor
    /// whose samples are sampling maps (abscissa plane, then ordinate).
    pub fn forward(&self, store: &ParamStore, x: &Tensor4, cond: &Matrix) -> Result<(Tensor4, PasCache)> {
        let r = self.cfg.resolution;
        if x.c != self.cfg.in_channels || x.h != r || x.w != r {
            return Err(Error::shape("Pas::forward", format!("{}x{r}x{r}", self.cfg.in_channels), format!("{}x{}x{}", x.c, x.h, x.w)));
        }
        if cond.rows != x.n || cond.cols != self.cfg.cond_dim {
            return Err(Error::shape("Pas::forward cond", format!("{}x{}", x.n, self.cfg.cond_dim), format!("{}x{}", cond.rows, cond.cols)));
        }
        let mut convs = Vec::new();
        let mut cins = Vec::new();
        let mut acts = Vec::new();
        let mut attention = None;
        let mut h = x.clone();
        for (b, block) in self.blocks.iter().enumerate() {
            let (y, cc) = block.conv.forward(store, &h)?;
            let (y, nc) = block.cin.forward(store, &y, cond)?;
            convs.push(cc);
            cins.push(nc);
            h = Tensor4 {
                data: act::leaky_relu(&y.data, LEAKY_SLOPE),
                ..y
            };
            acts.push(y.data);
            if b + 1 == self.cfg.attention_after {
                let sa = self.attention.as_ref().expect("attention configured");
                let (y, ac) = sa.forward(store, &h)?;
                attention = Some(ac);
                h = y;
            }
        }
        let pooled_shape = h.shape();
        let pooled = Matrix::from_vec(h.n, h.c, global_avg_pool(&h))?;
        let embedding = self.embed.forward(store, &pooled)?;
        let hidden_pre = self.hidden.forward(store, &embedding)?;
        let hidden = Matrix {
            data: act::relu(&hidden_pre.data),
            ..hidden_pre.clone()
        };
        let logits = self.out.forward(store, &hidden)?;
        let grid = Matrix {
            data: act::tanh(&logits.data),
            ..logits
        };
        let maps = Tensor4::from_vec(x.n, 2, r, r, grid.data.clone())?;
        Ok((
            maps,
            PasCache {
                convs,
                cins,
                acts,
                attention,
                pooled_shape,
                pooled,
                embedding,
                hidden_pre,
                hidden,
                grid,
            },
        ))
    }

    /// Accumulates parameter gradients from `dmaps` (same shape as the
    /// forward output). Input gradients are not needed and not computed.
    pub fn backward(&self, store: &mut ParamStore, cache: &PasCache, dmaps: &Tensor4) {
        let dlogits = Matrix {
            rows: cache.grid.rows,
            cols: cache.grid.cols,
            data: act::tanh_backward(&cache.grid.data, &dmaps.data),
        };
        let dhidden = self.out.backward(store, &cache.hidden, &dlogits);
        let dhidden_pre = Matrix {
            data: act::relu_backward(&cache.hidden_pre.data, &dhidden.data),
            ..dhidden
        };
        let dembedding = self.hidden.backward(store, &cache.embedding, &dhidden_pre);
        let dpooled = self.embed.backward(store, &cache.pooled, &dembedding);
        let [n, c, h, w] = cache.pooled_shape;
        let mut g = global_avg_pool_backward(&dpooled.data, n, c, h, w);
        for b in (0..self.blocks.len()).rev() {
            if b + 1 == self.cfg.attention_after {
                let sa = self.attention.as_ref().expect("attention configured");
                g = sa.backward(store, cache.attention.as_ref().expect("attention cache"), &g);
            }
            let block = &self.blocks[b];
            let dy = Tensor4 {
                data: act::leaky_relu_backward(&cache.acts[b], &g.data, LEAKY_SLOPE),
                ..g
            };
            let dy = block.cin.backward(store, &cache.cins[b], &dy);
            g = block.conv.backward(store, &cache.convs[b], &dy);
        }
    }

    /// Splits a forward output into per-sample sampling maps.
    pub fn maps(&self, out: &Tensor4) -> Vec<SamplingMap> {
        (0..out.n)
            .map(|i| {
                SamplingMap::from_vec(out.h, out.w, out.sample(i).to_vec()).expect("PAS output shape")
            })
            .collect()
    }
}
