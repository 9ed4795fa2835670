//! Finite-difference verification of every hand-written backward pass.
//!
//! Each suite builds small random layers and inputs per seed, contracts the
//! output with a fixed random tensor into a scalar, and compares analytic
//! gradients against central differences on a sample of coordinates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::image::Image;
use crate::losses;
use crate::nn::attention::SelfAttention;
use crate::nn::conv::{Conv2d, ConvSpec};
use crate::nn::disc::{DiscConfig, Discriminator};
use crate::nn::extractors::{ToyIdentityNet, ToyPerceptualNet, DEFAULT_PERCEPTUAL_TAPS};
use crate::nn::linear::{Linear, Matrix};
use crate::nn::norm::{instance_norm, instance_norm_backward, CondInstanceNorm};
use crate::nn::pas::{Pas, PasConfig};
use crate::nn::spectral::SnConv2d;
use crate::nn::unet::{Unet, UnetConfig};
use crate::nn::{ParamStore, Tensor4};
use crate::sampling::{grid_sample, grid_sample_backward, SamplingMap};

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const DEFAULT_SEEDS: usize = 20;
/// Denominator floor: gradients that vanish analytically compare against
/// central-difference roundoff (~1e-10 at this step) absolutely, i.e. with
/// an effective absolute tolerance of `TOLERANCE·REL_FLOOR`.
pub const REL_FLOOR: f64 = 1e-5;
/// One-sided slopes differing by more than this fraction mark a kink.
const KINK_SPLIT: f64 = 1e-2;
/// First-order accuracy bound for one-sided differences.
const ONE_SIDED_TOLERANCE: f64 = 1e-3;
const MAX_COORDS: usize = 24;
const COORDS_PER_PARAM: usize = 4;

pub const LAYERS: [&str; 15] = [
    "grid_sample",
    "conv2d",
    "instance_norm",
    "cin",
    "self_attention",
    "linear",
    "spectral_conv",
    "discriminator",
    "pas",
    "unet",
    "loss_l1",
    "loss_dice",
    "loss_tv",
    "loss_perceptual",
    "loss_identity",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub layer: &'static str,
    pub worst_rel: f64,
    pub checked: usize,
    /// Coordinates whose step straddled a ReLU/abs kink; verified one-sidedly.
    pub kinks: usize,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.worst_rel < TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

struct Probe {
    rng: ChaCha8Rng,
    worst: f64,
    checked: usize,
    kinks: usize,
    /// Multiplier applied to analytic gradients; 1 unless corrupted.
    skew: f64,
}

impl Probe {
    fn coords(&mut self, len: usize, max: usize) -> Vec<usize> {
        if len <= max {
            (0..len).collect()
        } else {
            (0..max).map(|_| self.rng.gen_range(0..len)).collect()
        }
    }

    /// `mid` is only evaluated when the central difference disagrees.
    fn record(&mut self, analytic: f64, up: f64, down: f64, mid: impl FnOnce() -> f64) {
        let a = analytic * self.skew;
        let rel = relative_error(a, (up - down) / (2.0 * FD_STEP));
        self.checked += 1;
        if rel >= TOLERANCE {
            let m = mid();
            let right = (up - m) / FD_STEP;
            let left = (m - down) / FD_STEP;
            let split = (right - left).abs() > KINK_SPLIT * right.abs().max(left.abs()).max(REL_FLOOR);
            if split && relative_error(a, right).min(relative_error(a, left)) < ONE_SIDED_TOLERANCE {
                self.kinks += 1;
                return;
            }
        }
        self.worst = self.worst.max(rel);
    }

    /// Checks `analytic` = ∇f at `x` on sampled coordinates.
    fn vector(&mut self, x: &[f64], analytic: &[f64], f: impl Fn(&[f64]) -> f64) {
        let mut v = x.to_vec();
        for i in self.coords(x.len(), MAX_COORDS) {
            v[i] = x[i] + FD_STEP;
            let up = f(&v);
            v[i] = x[i] - FD_STEP;
            let down = f(&v);
            v[i] = x[i];
            self.record(analytic[i], up, down, || f(&v));
        }
    }

    /// Checks accumulated gradients of every parameter tensor in `store`.
    fn store(&mut self, store: &ParamStore, f: impl Fn(&ParamStore) -> f64) {
        let mut s = store.clone();
        for k in 0..store.params().len() {
            let p = &store.params()[k];
            for i in self.coords(p.value.len(), COORDS_PER_PARAM) {
                let x = p.value[i];
                s.params_mut()[k].value[i] = x + FD_STEP;
                let up = f(&s);
                s.params_mut()[k].value[i] = x - FD_STEP;
                let down = f(&s);
                s.params_mut()[k].value[i] = x;
                self.record(p.grad[i], up, down, || f(&s));
            }
        }
    }
}

fn rand_vec(rng: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(lo..hi)).collect()
}

fn rand_tensor(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor4 {
    Tensor4::from_vec(n, c, h, w, rand_vec(rng, n * c * h * w, -1.0, 1.0)).expect("sized")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Map whose source positions stay inside pixel cells, away from the
/// bilinear kinks at integer indices.
fn smooth_map(rng: &mut ChaCha8Rng, oh: usize, ow: usize, h: usize, w: usize) -> SamplingMap {
    let coord = |rng: &mut ChaCha8Rng, n: usize| {
        let idx = rng.gen_range(0..n - 1) as f64 + rng.gen_range(0.05..0.95);
        2.0 * idx / (n - 1) as f64 - 1.0
    };
    let mut m = SamplingMap::zeros(oh, ow);
    for y in 0..oh {
        for x in 0..ow {
            let gx = coord(rng, w);
            let gy = coord(rng, h);
            m.set(y, x, gx, gy);
        }
    }
    m
}

fn suite_grid_sample(p: &mut Probe, rng: &mut ChaCha8Rng) -> Result<()> {
    let img = Image::from_vec(2, 5, 6, rand_vec(rng, 60, 0.0, 1.0))?;
    let map = smooth_map(rng, 4, 5, 5, 6);
    let r = rand_vec(rng, 2 * 4 * 5, -1.0, 1.0);
    let gout = Image::from_vec(2, 4, 5, r.clone())?;
    let (gi, gm) = grid_sample_backward(&gout, &img, &map)?;
    p.vector(img.data(), gi.data(), |v| {
        let im = Image::from_vec(2, 5, 6, v.to_vec()).expect("sized");
        dot(grid_sample(&im, &map).expect("valid").data(), &r)
    });
    p.vector(map.data(), gm.data(), |v| {
        let m = SamplingMap::from_vec(4, 5, v.to_vec()).expect("sized");
        dot(grid_sample(&img, &m).expect("valid").data(), &r)
    });
    Ok(())
}

fn suite_conv(p: &mut Probe, rng: &mut ChaCha8Rng) -> Result<()> {
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1)] {
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, "c", ConvSpec::new(3, 4, k, stride, pad), true, 1.0, rng);
        store.value_mut(conv.bias.expect("bias")).iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
        let x = rand_tensor(rng, 2, 3, 5, 5);
        let (y, cache) = conv.forward(&store, &x)?;
        let r = rand_vec(rng, y.data.len(), -1.0, 1.0);
        let dy = Tensor4 { data: r.clone(), ..y };
        let dx = conv.backward(&mut store, &cache, &dy);
        p.vector(&x.data, &dx.data, |v| {
            let xv = Tensor4 { data: v.to_vec(), ..x.clone() };
            dot(&conv.forward(&store, &xv).expect("valid").0.data, &r)
        });
        p.store(&store, |s| dot(&conv.forward(s, &x).expect("valid").0.data, &r));
    }
    Ok(())
}

fn suite_instance_norm(p: &mut Probe, rng: &mut ChaCha8Rng) -> Result<()> {
    let x = rand_tensor(rng, 2, 3, 4, 4);
    let (y, cache) = instance_norm(&x);
    let r = rand_vec(rng, y.data.len(), -1.0, 1.0);
    let dx = instance_norm_backward(&cache, &Tensor4 { data: r.clone(), ..y });
    p.vector(&x.data, &dx.data, |v| {
        dot(&instance_norm(&Tensor4 { data: v.to_vec(), ..x.clone() }).0.data, &r)
    });
    Ok(())
}

fn suite_cin(p: &mut Probe, rng: &mut ChaCha8Rng) -> Result<()> {
    let mut store = ParamStore::new();
    let cin = CondInstanceNorm::new(&mut store, "cin", 3, 5, 1.0, rng);
    let x = rand_tensor(rng, 2, 3, 4, 4);
    let cond = Matrix::from_vec(2, 5, rand_vec(rng, 10, -1.0, 1.0))?;
    let (y, cache) = cin.forward(&store, &x, &cond)?;
    let r = rand_vec(rng, y.data.len(), -1.0, 1.0);
    let dx = cin.backward(&mut store, &cache, &Tensor4 { data: r.clone(), ..y });
    p.vector(&x.data, &dx.data, |v| {
        let xv = Tensor4 { data: v.to_vec(), ..x.clone() };
        dot(&cin.forward(&store, &xv, &cond).expect("valid").0.data, &r)
    });
    p.store(&store, |s| dot(&cin.forward(s, &x, &cond).expect("valid").0.data, &r));
    Ok(())
}

fn suite_attention(p: &mut Probe, rng: &mut ChaCha8Rng) -> Result<()> {
    for c in [2, 9] {
        let mut store = ParamStore::new();
        let sa = SelfAttention::new(&mut store, "sa", c, rng);
        store.value_mut(sa.gamma)[0] = rng.gen_range(0.5..1.5);
        for id in [sa.bq, sa.bk, sa.bv] {
            store.value_mut(id).iter_mut().for_each(|b| *b = rng.gen_range(-0.3..0.3));
        }
        let x = rand_tensor(rng, 1, c, 3, 3);
        let (y, cache) = sa.forward(&store, &x)?;
        let r = rand_vec(rng, y.data.len(), -1.0, 1.0);
        let dx = sa.backward(&mut store, &cache, &Tensor4 { data: r.clone(), ..y });
        p.vector(&x.data, &dx.data, |v| {
            let xv = Tensor4 { data: v.to_vec(), ..x.clone() };
            dot(&sa.forward(&store, &xv).expect("valid").0.data, &r)
        });
        p.store(&store, |s| dot(&sa.forward(s, &x).expect("valid").0.data, &r));
    }
    Ok(())
}

fn suite_linear(p: &mut Probe, rng: &mut ChaCha8Rng) -> Result<()> {
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "fc", 6, 4, true, 1.0, rng);
    let x = Matrix::from_vec(3, 6, rand_vec(rng, 18, -1.0, 1.0))?;
    let y = lin.forward(&store, &x)?;
    let r = rand_vec(rng, y.data.len(), -1.0, 1.0);
    let dx = lin.backward(&mut store, &x, &Matrix { data: r.clone(), ..y });
    p.vector(&x.data, &dx.data, |v| {
        let xv = Matrix { data: v.to_vec(), ..x.clone() };
        dot(&lin.forward(&store, &xv).expect("valid").data, &r)
    });
    p.store(&store, |s| dot(&lin.forward(s, &x).expect("valid").data, &r));
    Ok(())
}

fn suite_spectral(p: &mut Probe, rng: &mut ChaCha8Rng) -> Result<()> {
    let mut store = ParamStore::new();
    let conv = SnConv2d::new(&mut store, "sn", ConvSpec::new(2, 3, 3, 1, 1), rng);
    conv.power_iterate(&mut store, 5);
    let x = rand_tensor(rng, 1, 2, 4, 4);
    let (y, cache) = conv.forward(&store, &x)?;
    let r = rand_vec(rng, y.data.len(), -1.0, 1.0);
    let dx = conv.backward(&mut store, &cache, &Tensor4 { data: r.clone(), ..y });
    p.vector(&x.data, &dx.data, |v| {
        let xv = Tensor4 { data: v.to_vec(), ..x.clone() };
        dot(&conv.forward(&store, &xv).expect("valid").0.data, &r)
    });
    p.store(&store, |s| dot(&conv.forward(s, &x).expect("valid").0.data, &r));
    Ok(())
}

fn suite_discriminator(p: &mut Probe, rng: &mut ChaCha8Rng) -> Result<()> {
    let mut store = ParamStore::new();
    let cfg = DiscConfig {
        in_channels: 1,
        widths: vec![4, 6],
        cond_dim: 5,
    };
    let d = Discriminator::new(&mut store, cfg, rng);
    d.converge_spectral(&mut store, 10);
    let x = Tensor4::from_vec(1, 1, 8, 8, rand_vec(rng, 64, 0.0, 1.0))?;
    let cond = Matrix::from_vec(1, 5, rand_vec(rng, 5, -1.0, 1.0))?;
    let (_, cache) = d.forward(&store, &x, &cond)?;
    let dx = d.backward(&mut store, &cache, &[1.0]);
    p.vector(&x.data, &dx.data, |v| {
        let xv = Tensor4 { data: v.to_vec(), ..x.clone() };
        d.forward(&store, &xv, &cond).expect("valid").0[0]
    });
    p.store(&store, |s| d.forward(s, &x, &cond).expect("valid").0[0]);
    Ok(())
}

fn suite_pas(p: &mut Probe, rng: &mut ChaCha8Rng) -> Result<()> {
    let mut store = ParamStore::new();
    let cfg = PasConfig {
        resolution: 8,
        widths: vec![3, 4],
        attention_after: 1,
        embed_dim: 6,
        hidden_dim: 5,
        cond_dim: 4,
        ..PasConfig::default()
    };
    let pas = Pas::new(&mut store, cfg, rng)?;
    // move off the zero-initialized head and gate so every path carries gradient
    for prm in store.params_mut() {
        if prm.name.contains("fc2.weight") || prm.name.ends_with("gamma") {
            prm.value.iter_mut().for_each(|v| *v = rng.gen_range(-0.3..0.3));
        }
        if prm.name.contains("fc2.bias") {
            prm.value.iter_mut().for_each(|v| *v *= 0.5);
        }
    }
    let x = Tensor4::from_vec(2, 3, 8, 8, rand_vec(rng, 384, 0.0, 1.0))?;
    let cond = Matrix::from_vec(2, 4, rand_vec(rng, 8, -1.0, 1.0))?;
    let (y, cache) = pas.forward(&store, &x, &cond)?;
    let r = rand_vec(rng, y.data.len(), -1.0, 1.0);
    pas.backward(&mut store, &cache, &Tensor4 { data: r.clone(), ..y });
    p.store(&store, |s| dot(&pas.forward(s, &x, &cond).expect("valid").0.data, &r));
    Ok(())
}

fn suite_unet(p: &mut Probe, rng: &mut ChaCha8Rng) -> Result<()> {
    let mut store = ParamStore::new();
    let cfg = UnetConfig {
        resolution: 8,
        widths: vec![3, 4],
        cond_dim: 4,
        ..UnetConfig::default()
    };
    let net = Unet::new(&mut store, cfg, rng)?;
    let x = Tensor4::from_vec(2, 3, 8, 8, rand_vec(rng, 384, 0.0, 1.0))?;
    let cond = Matrix::from_vec(2, 4, rand_vec(rng, 8, -1.0, 1.0))?;
    let (y, cache) = net.forward(&store, &x, &cond)?;
    let r = rand_vec(rng, y.data.len(), -1.0, 1.0);
    let dx = net.backward(&mut store, &cache, &Tensor4 { data: r.clone(), ..y });
    p.vector(&x.data, &dx.data, |v| {
        let xv = Tensor4 { data: v.to_vec(), ..x.clone() };
        dot(&net.forward(&store, &xv, &cond).expect("valid").0.data, &r)
    });
    p.store(&store, |s| dot(&net.forward(s, &x, &cond).expect("valid").0.data, &r));
    Ok(())
}

fn image_pair(rng: &mut ChaCha8Rng, n: usize, c: usize, s: usize) -> (Tensor4, Tensor4) {
    let a = Tensor4::from_vec(n, c, s, s, rand_vec(rng, n * c * s * s, 0.0, 1.0)).expect("sized");
    let b = Tensor4::from_vec(n, c, s, s, rand_vec(rng, n * c * s * s, 0.0, 1.0)).expect("sized");
    (a, b)
}

fn suite_losses(p: &mut Probe, rng: &mut ChaCha8Rng, which: &str) -> Result<()> {
    match which {
        "loss_l1" => {
            let (a, b) = image_pair(rng, 2, 3, 4);
            let (_, g) = losses::l1_batch(&a, &b)?;
            p.vector(&a.data, &g.data, |v| {
                losses::l1_batch(&Tensor4 { data: v.to_vec(), ..a.clone() }, &b).expect("valid").0
            });
        }
        "loss_dice" => {
            let (a, b) = image_pair(rng, 2, 4, 3);
            let (_, g) = losses::dice_batch(&a, &b)?;
            p.vector(&a.data, &g.data, |v| {
                losses::dice_batch(&Tensor4 { data: v.to_vec(), ..a.clone() }, &b).expect("valid").0
            });
        }
        "loss_tv" => {
            let (a, _) = image_pair(rng, 2, 3, 4);
            for normalized in [false, true] {
                let (_, g) = losses::tv_batch(&a, normalized);
                p.vector(&a.data, &g.data, |v| {
                    losses::tv_batch(&Tensor4 { data: v.to_vec(), ..a.clone() }, normalized).0
                });
            }
        }
        "loss_perceptual" => {
            let fx = ToyPerceptualNet::new(rng.gen(), 3, &DEFAULT_PERCEPTUAL_TAPS);
            let (a, b) = image_pair(rng, 1, 3, 16);
            for normalized in [true, false] {
                let (_, g) = losses::perceptual_batch(&a, &b, &fx, normalized)?;
                p.vector(&a.data, &g.data, |v| {
                    let av = Tensor4 { data: v.to_vec(), ..a.clone() };
                    losses::perceptual_batch(&av, &b, &fx, normalized).expect("valid").0
                });
            }
        }
        "loss_identity" => {
            let emb = ToyIdentityNet::new(rng.gen(), 3, 16);
            let (a, b) = image_pair(rng, 2, 3, 8);
            let (_, g) = losses::identity_batch(&a, &b, &emb)?;
            p.vector(&a.data, &g.data, |v| {
                let av = Tensor4 { data: v.to_vec(), ..a.clone() };
                losses::identity_batch(&av, &b, &emb).expect("valid").0
            });
        }
        other => unreachable!("unknown loss suite {other}"),
    }
    Ok(())
}

/// Runs one layer's suite over `seeds` consecutive seeds from `base_seed`.
/// `corrupt` scales the analytic gradient to emulate a broken backward.
pub fn run_layer(layer: &'static str, base_seed: u64, seeds: usize, corrupt: bool) -> Result<SuiteResult> {
    let mut probe = Probe {
        rng: ChaCha8Rng::seed_from_u64(base_seed ^ 0x9e37_79b9),
        worst: 0.0,
        checked: 0,
        kinks: 0,
        skew: if corrupt { 1.0 + 1e-2 } else { 1.0 },
    };
    for s in 0..seeds as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(base_seed.wrapping_mul(1000).wrapping_add(s));
        match layer {
            "grid_sample" => suite_grid_sample(&mut probe, &mut rng)?,
            "conv2d" => suite_conv(&mut probe, &mut rng)?,
            "instance_norm" => suite_instance_norm(&mut probe, &mut rng)?,
            "cin" => suite_cin(&mut probe, &mut rng)?,
            "self_attention" => suite_attention(&mut probe, &mut rng)?,
            "linear" => suite_linear(&mut probe, &mut rng)?,
            "spectral_conv" => suite_spectral(&mut probe, &mut rng)?,
            "discriminator" => suite_discriminator(&mut probe, &mut rng)?,
            "pas" => suite_pas(&mut probe, &mut rng)?,
            "unet" => suite_unet(&mut probe, &mut rng)?,
            l => suite_losses(&mut probe, &mut rng, l)?,
        }
    }
    Ok(SuiteResult {
        layer,
        worst_rel: probe.worst,
        checked: probe.checked,
        kinks: probe.kinks,
    })
}

/// Every suite; `corrupt` names a layer whose analytic gradient is skewed.
pub fn run_all(base_seed: u64, seeds: usize, corrupt: Option<&str>) -> Result<Vec<SuiteResult>> {
    LAYERS
        .iter()
        .map(|&l| run_layer(l, base_seed, seeds, corrupt == Some(l)))
        .collect()
}
