//! Encoder-decoder generator with symmetric skip connections. Every decoder
//! block is modulated by conditional instance normalization on the target
//! pose and an identity feature vector.

use rand::Rng;

use super::act;
use super::conv::{Conv2d, ConvCache, ConvSpec};
use super::linear::Matrix;
use super::norm::{instance_norm, instance_norm_backward, CinCache, CondInstanceNorm, InstanceNormCache};
use super::params::ParamStore;
use super::pas::{LEAKY_SLOPE, POSE_COND_DIM};
use super::tensor::{upsample2, upsample2_backward, Tensor4};
use crate::error::{Error, Result};

pub const DEFAULT_ID_DIM: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct UnetConfig {
    pub resolution: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Encoder widths; the depth is their count.
    pub widths: Vec<usize>,
    pub cond_dim: usize,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            in_channels: 3,
            out_channels: 3,
            widths: vec![16, 32, 64, 64],
            cond_dim: POSE_COND_DIM + DEFAULT_ID_DIM,
        }
    }
}

#[derive(Debug, Clone)]
struct DecBlock {
    conv: Conv2d,
    cin: CondInstanceNorm,
}

#[derive(Debug, Clone)]
pub struct Unet {
    pub cfg: UnetConfig,
    enc: Vec<Conv2d>,
    dec: Vec<DecBlock>,
    head: Conv2d,
}

pub struct UnetCache {
    enc_conv: Vec<ConvCache>,
    enc_norm: Vec<Option<InstanceNormCache>>,
    enc_pre: Vec<Vec<f64>>,
    enc_channels: Vec<usize>,
    dec_conv: Vec<ConvCache>,
    dec_cin: Vec<CinCache>,
    dec_pre: Vec<Vec<f64>>,
    head: ConvCache,
    out_tanh: Vec<f64>,
}

impl Unet {
    pub fn new(store: &mut ParamStore, cfg: UnetConfig, rng: &mut impl Rng) -> Result<Self> {
        let depth = cfg.widths.len();
        if depth == 0 || cfg.resolution % (1 << depth) != 0 {
            return Err(Error::InvalidInput(format!(
                "generator side {} not divisible by 2^{depth}",
                cfg.resolution
            )));
        }
        let leaky_gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
        let mut enc = Vec::with_capacity(depth);
        let mut c_in = cfg.in_channels;
        for (k, &c_out) in cfg.widths.iter().enumerate() {
            enc.push(Conv2d::new(
                store,
                &format!("gen.enc{k}"),
                ConvSpec::new(c_in, c_out, 3, 2, 1),
                k == 0,
                leaky_gain,
                rng,
            ));
            c_in = c_out;
        }
        // decoder block k upsamples to the resolution of encoder level k-1
        let mut dec = Vec::with_capacity(depth);
        let mut c_prev = cfg.widths[depth - 1];
        for k in (0..depth).rev() {
            let skip = if k > 0 { cfg.widths[k - 1] } else { cfg.in_channels };
            let c_out = cfg.widths[k.saturating_sub(1)];
            let name = format!("gen.dec{k}");
            let conv = Conv2d::new(
                store,
                &format!("{name}.conv"),
                ConvSpec::new(c_prev + skip, c_out, 3, 1, 1),
                false,
                2f64.sqrt(),
                rng,
            );
            let cin = CondInstanceNorm::new(store, &format!("{name}.cin"), c_out, cfg.cond_dim, 0.5, rng);
            dec.push(DecBlock { conv, cin });
            c_prev = c_out;
        }
        // the head also sees the raw input, whose per-image colour statistics
        // the instance normalizations above discard
        let head = Conv2d::new(
            store,
            "gen.head",
            ConvSpec::new(c_prev + cfg.in_channels, cfg.out_channels, 3, 1, 1),
            true,
            1.0,
            rng,
        );
        if cfg.in_channels == cfg.out_channels {
            // start as a near pass-through of the input: (tanh(2x - 1) + 1) / 2
            let (ci, k) = (c_prev + cfg.in_channels, 3);
            let w = store.value_mut(head.weight);
            for o in 0..cfg.out_channels {
                for i in c_prev..ci {
                    let at = (o * ci + i) * k * k;
                    w[at..at + k * k].fill(0.0);
                }
                w[(o * ci + c_prev + o) * k * k + k * k / 2] = 2.0;
            }
            if let Some(b) = head.bias {
                store.value_mut(b).fill(-1.0);
            }
        }
        Ok(Self { cfg, enc, dec, head })
    }

    /// `x`: N×C×R×R in [0,1]; `cond`: N×cond_dim. Output intensities lie in [0,1].
    pub fn forward(&self, store: &ParamStore, x: &Tensor4, cond: &Matrix) -> Result<(Tensor4, UnetCache)> {
        let r = self.cfg.resolution;
        if x.h != x.w || x.h % (1 << self.enc.len()) != 0 {
            return Err(Error::InvalidInput(format!(
                "generator input {}x{} must be square with side divisible by 2^{}",
                x.h,
                x.w,
                self.enc.len()
            )));
        }
        if x.c != self.cfg.in_channels || x.h != r {
            return Err(Error::shape("Unet::forward", format!("{}x{r}x{r}", self.cfg.in_channels), format!("{}x{}x{}", x.c, x.h, x.w)));
        }
        let mut enc_conv = Vec::new();
        let mut enc_norm = Vec::new();
        let mut enc_pre = Vec::new();
        let mut feats: Vec<Tensor4> = Vec::new();
        let mut h = x.clone();
        for (k, conv) in self.enc.iter().enumerate() {
            let (y, cc) = conv.forward(store, &h)?;
            enc_conv.push(cc);
            let y = if k == 0 {
                enc_norm.push(None);
                y
            } else {
                let (y, nc) = instance_norm(&y);
                enc_norm.push(Some(nc));
                y
            };
            h = Tensor4 {
                data: act::leaky_relu(&y.data, LEAKY_SLOPE),
                ..y
            };
            enc_pre.push(y.data);
            feats.push(h.clone());
        }
        let enc_channels = feats.iter().map(|f| f.c).collect();
        let depth = self.enc.len();
        let mut d = feats.pop().expect("non-empty encoder");
        let mut dec_conv = Vec::new();
        let mut dec_cin = Vec::new();
        let mut dec_pre = Vec::new();
        for (j, block) in self.dec.iter().enumerate() {
            let k = depth - 1 - j;
            let skip = if k > 0 { &feats[k - 1] } else { x };
            let u = Tensor4::concat_channels(&upsample2(&d), skip);
            let (y, cc) = block.conv.forward(store, &u)?;
            let (y, nc) = block.cin.forward(store, &y, cond)?;
            dec_conv.push(cc);
            dec_cin.push(nc);
            d = Tensor4 {
                data: act::relu(&y.data),
                ..y
            };
            dec_pre.push(y.data);
        }
        let (y, head) = self.head.forward(store, &Tensor4::concat_channels(&d, x))?;
        let out_tanh = act::tanh(&y.data);
        let out = Tensor4 {
            data: out_tanh.iter().map(|t| 0.5 * (t + 1.0)).collect(),
            ..y
        };
        Ok((
            out,
            UnetCache {
                enc_conv,
                enc_norm,
                enc_pre,
                enc_channels,
                dec_conv,
                dec_cin,
                dec_pre,
                head,
                out_tanh,
            },
        ))
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&self, store: &mut ParamStore, cache: &UnetCache, dy: &Tensor4) -> Tensor4 {
        let depth = self.enc.len();
        let dt: Vec<f64> = dy.data.iter().map(|g| 0.5 * g).collect();
        let dpre = Tensor4 {
            data: act::tanh_backward(&cache.out_tanh, &dt),
            ..dy.clone()
        };
        let dh = self.head.backward(store, &cache.head, &dpre);
        let (mut g, dx_head) = dh.split_channels(dh.c - self.cfg.in_channels);
        // gradients arriving at each encoder output through skips
        let mut skip_grads: Vec<Option<Tensor4>> = vec![None; depth];
        let mut dx_skip = None;
        for j in (0..self.dec.len()).rev() {
            let k = depth - 1 - j;
            let block = &self.dec[j];
            let dpre = Tensor4 {
                data: act::relu_backward(&cache.dec_pre[j], &g.data),
                ..g
            };
            let dpre = block.cin.backward(store, &cache.dec_cin[j], &dpre);
            let du = block.conv.backward(store, &cache.dec_conv[j], &dpre);
            let c_up = du.c - if k > 0 { cache.enc_channels[k - 1] } else { self.cfg.in_channels };
            let (dup, dskip) = du.split_channels(c_up);
            if k > 0 {
                skip_grads[k - 1] = Some(dskip);
            } else {
                dx_skip = Some(dskip);
            }
            g = upsample2_backward(&dup);
        }
        // g now holds the gradient at the deepest encoder output
        for k in (0..depth).rev() {
            if k < depth - 1 {
                if let Some(s) = skip_grads[k].take() {
                    g.add_assign(&s);
                }
            }
            let dpre = Tensor4 {
                data: act::leaky_relu_backward(&cache.enc_pre[k], &g.data, LEAKY_SLOPE),
                ..g
            };
            let dpre = match &cache.enc_norm[k] {
                Some(nc) => instance_norm_backward(nc, &dpre),
                None => dpre,
            };
            g = self.enc[k].backward(store, &cache.enc_conv[k], &dpre);
        }
        if let Some(s) = dx_skip {
            g.add_assign(&s);
        }
        g.add_assign(&dx_head);
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::adam::{adam_step, AdamConfig, AdamState};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (ParamStore, Unet) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let cfg = UnetConfig {
            resolution: 16,
            widths: vec![4, 6, 8, 8],
            cond_dim: 10,
            ..UnetConfig::default()
        };
        let net = Unet::new(&mut store, cfg, &mut rng).unwrap();
        (store, net)
    }

    fn data(seed: u64) -> (Tensor4, Tensor4, Matrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor4::from_vec(1, 3, 16, 16, (0..768).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let t = Tensor4::from_vec(1, 3, 16, 16, (0..768).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let c = Matrix::from_vec(1, 10, (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        (x, t, c)
    }

    #[test]
    fn output_shape_and_range() {
        let (store, net) = small();
        let (x, _, c) = data(1);
        let (y, _) = net.forward(&store, &x, &c).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn bad_side_is_rejected() {
        let (store, net) = small();
        let x = Tensor4::zeros(1, 3, 12, 12);
        let c = Matrix::zeros(1, 10);
        assert!(net.forward(&store, &x, &c).is_err());
    }

    #[test]
    fn one_step_reduces_reconstruction_loss() {
        let (mut store, net) = small();
        let (x, t, c) = data(2);
        let l1 = |y: &Tensor4| y.data.iter().zip(&t.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.data.len() as f64;
        let (y, cache) = net.forward(&store, &x, &c).unwrap();
        let before = l1(&y);
        let n = y.data.len() as f64;
        let dy = Tensor4 {
            data: y.data.iter().zip(&t.data).map(|(a, b)| (a - b).signum() / n).collect(),
            ..y.clone()
        };
        store.zero_grad();
        net.backward(&mut store, &cache, &dy);
        let mut state = AdamState::new(&store);
        adam_step(&mut store, &AdamConfig { lr: 1e-3, ..AdamConfig::default() }, &mut state);
        let (y2, _) = net.forward(&store, &x, &c).unwrap();
        assert!(l1(&y2) < before);
    }
}
