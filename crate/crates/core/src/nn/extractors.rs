//! Fixed-weight feature networks standing in for pretrained perceptual and
//! identity models: a small convolutional stack with five tapped scales and
//! a compact identity embedder. Both are seeded deterministically and never
//! trained; only input gradients are computed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::act;
use super::conv::{Conv2d, ConvCache, ConvSpec};
use super::linear::{Linear, Matrix};
use super::params::ParamStore;
use super::tensor::{global_avg_pool, global_avg_pool_backward, Tensor4};
use crate::error::Result;

/// Image → ordered (shallow to deep) list of feature maps.
pub trait FeatureExtractor {
    type Cache;

    fn extract(&self, x: &Tensor4) -> Result<(Vec<Tensor4>, Self::Cache)>;

    /// Input gradient given one gradient per tapped feature map.
    fn backward(&self, cache: &Self::Cache, grads: &[Tensor4]) -> Tensor4;
}

/// Image → fixed-length identity feature vector.
pub trait IdentityEmbedder {
    type Cache;

    fn dim(&self) -> usize;

    fn embed(&self, x: &Tensor4) -> Result<(Matrix, Self::Cache)>;

    fn backward(&self, cache: &Self::Cache, grad: &Matrix) -> Tensor4;
}

#[derive(Debug, Clone)]
enum Op {
    Conv(Conv2d),
    Relu,
}

#[derive(Debug, Clone)]
enum OpCache {
    Conv(ConvCache),
    Relu(Tensor4),
}

/// Plain conv/ReLU chain with a frozen parameter store.
#[derive(Debug, Clone)]
struct Chain {
    ops: Vec<Op>,
    store: ParamStore,
}

impl Chain {
    /// Runs ops `0..=last`, calling `visit` on every intermediate output.
    fn forward(
        &self,
        x: &Tensor4,
        last: usize,
        mut visit: impl FnMut(usize, &Tensor4),
    ) -> Result<(Tensor4, Vec<OpCache>)> {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(last + 1);
        for (i, op) in self.ops[..=last].iter().enumerate() {
            h = match op {
                Op::Conv(c) => {
                    let (y, cache) = c.forward(&self.store, &h)?;
                    caches.push(OpCache::Conv(cache));
                    y
                }
                Op::Relu => {
                    let y = h.map(|v| v.max(0.0));
                    caches.push(OpCache::Relu(h));
                    y
                }
            };
            visit(i, &h);
        }
        Ok((h, caches))
    }

    /// `inject(i)` returns an extra gradient to add at the output of op `i`.
    fn backward(
        &self,
        caches: &[OpCache],
        mut g: Option<Tensor4>,
        inject: impl Fn(usize) -> Option<Tensor4>,
    ) -> Tensor4 {
        for i in (0..caches.len()).rev() {
            if let Some(extra) = inject(i) {
                g = Some(match g {
                    Some(mut acc) => {
                        acc.add_assign(&extra);
                        acc
                    }
                    None => extra,
                });
            }
            let Some(cur) = g.take() else { continue };
            g = Some(match (&self.ops[i], &caches[i]) {
                (Op::Conv(c), OpCache::Conv(cache)) => c.input_grad(&self.store, cache, &cur),
                (Op::Relu, OpCache::Relu(x)) => {
                    let d = act::relu_backward(&x.data, &cur.data);
                    Tensor4 { data: d, ..cur }
                }
                _ => unreachable!("op/cache mismatch"),
            });
        }
        g.expect("chain has at least one op")
    }
}

/// Five-scale toy perceptual network. Layer indices:
/// `0 conv, 1 relu, 2 conv/2, 3 relu, 4 conv/2, 5 relu, 6 conv/2, 7 relu, 8 conv/2, 9 relu`;
/// the default taps are the ReLU outputs `{1, 3, 5, 7, 9}`, the last layer of
/// each scale.
#[derive(Debug, Clone)]
pub struct ToyPerceptualNet {
    chain: Chain,
    taps: Vec<usize>,
}

pub const DEFAULT_PERCEPTUAL_TAPS: [usize; 5] = [1, 3, 5, 7, 9];

impl ToyPerceptualNet {
    pub fn new(seed: u64, in_channels: usize, taps: &[usize]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let widths = [8, 12, 16, 24, 32];
        let mut ops = Vec::new();
        let mut c_in = in_channels;
        for (s, &c_out) in widths.iter().enumerate() {
            let stride = if s == 0 { 1 } else { 2 };
            let conv = Conv2d::new(
                &mut store,
                &format!("vgg.conv{s}"),
                ConvSpec::new(c_in, c_out, 3, stride, 1),
                true,
                2f64.sqrt(),
                &mut rng,
            );
            ops.push(Op::Conv(conv));
            ops.push(Op::Relu);
            c_in = c_out;
        }
        store.set_requires_grad(false);
        let mut taps = taps.to_vec();
        taps.sort_unstable();
        taps.dedup();
        assert!(taps.iter().all(|&t| t < ops.len()), "tap index out of range");
        Self {
            chain: Chain { ops, store },
            taps,
        }
    }

    pub fn taps(&self) -> &[usize] {
        &self.taps
    }
}

pub struct PerceptualCache {
    ops: Vec<OpCache>,
}

impl FeatureExtractor for ToyPerceptualNet {
    type Cache = PerceptualCache;

    fn extract(&self, x: &Tensor4) -> Result<(Vec<Tensor4>, PerceptualCache)> {
        let last = *self.taps.last().expect("at least one tap");
        let mut feats = Vec::with_capacity(self.taps.len());
        // centre inputs around zero
        let xc = x.map(|v| v - 0.5);
        let (_, ops) = self.chain.forward(&xc, last, |i, h| {
            if self.taps.contains(&i) {
                feats.push(h.clone());
            }
        })?;
        Ok((feats, PerceptualCache { ops }))
    }

    fn backward(&self, cache: &PerceptualCache, grads: &[Tensor4]) -> Tensor4 {
        self.chain.backward(&cache.ops, None, |i| {
            self.taps.iter().position(|&t| t == i).map(|k| grads[k].clone())
        })
    }
}

/// Small conv encoder → global average pool → linear projection.
#[derive(Debug, Clone)]
pub struct ToyIdentityNet {
    chain: Chain,
    head: Linear,
    dim: usize,
}

pub struct IdentityCache {
    ops: Vec<OpCache>,
    feat_shape: [usize; 4],
}

impl ToyIdentityNet {
    pub fn new(seed: u64, in_channels: usize, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let widths = [16, 32, 48];
        let mut ops = Vec::new();
        let mut c_in = in_channels;
        for (s, &c_out) in widths.iter().enumerate() {
            let conv = Conv2d::new(
                &mut store,
                &format!("idnet.conv{s}"),
                ConvSpec::new(c_in, c_out, 3, 2, 1),
                true,
                2f64.sqrt(),
                &mut rng,
            );
            ops.push(Op::Conv(conv));
            ops.push(Op::Relu);
            c_in = c_out;
        }
        let head = Linear::new(&mut store, "idnet.fc", c_in, dim, true, 1.0, &mut rng);
        store.set_requires_grad(false);
        Self {
            chain: Chain { ops, store },
            head,
            dim,
        }
    }
}

impl IdentityEmbedder for ToyIdentityNet {
    type Cache = IdentityCache;

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, x: &Tensor4) -> Result<(Matrix, IdentityCache)> {
        let xc = x.map(|v| v - 0.5);
        let (h, ops) = self.chain.forward(&xc, self.chain.ops.len() - 1, |_, _| {})?;
        let pooled = Matrix::from_vec(h.n, h.c, global_avg_pool(&h))?;
        let out = self.head.forward(&self.chain.store, &pooled)?;
        Ok((
            out,
            IdentityCache {
                ops,
                feat_shape: h.shape(),
            },
        ))
    }

    fn backward(&self, cache: &IdentityCache, grad: &Matrix) -> Tensor4 {
        let dpooled = self.head.input_grad(&self.chain.store, grad);
        let [n, c, h, w] = cache.feat_shape;
        let dh = global_avg_pool_backward(&dpooled.data, n, c, h, w);
        self.chain.backward(&cache.ops, Some(dh), |_| None)
    }
}
