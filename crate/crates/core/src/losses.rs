//! Training objectives with gradients w.r.t. the generated input.
//!
//! Batch variants operate on `Tensor4` and return the loss averaged over
//! the batch together with its gradient w.r.t. the first argument. The
//! `Image` functions are single-sample conveniences over them.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::SegmentationMap;
use crate::image::Image;
use crate::nn::extractors::{FeatureExtractor, IdentityEmbedder, DEFAULT_PERCEPTUAL_TAPS};
use crate::nn::{Matrix, Tensor4};

pub const DICE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Weight of the reconstruction branch in the sampler pixel loss.
    pub recon_weight_pas: f64,
    /// Weight of the reconstruction pair in the generator pixel loss.
    pub lambda_inpaint: f64,
    /// Divide TV by the number of difference terms.
    pub tv_normalized: bool,
    /// Average (rather than sum) absolute feature differences per tap.
    pub perceptual_normalized: bool,
    pub perceptual_taps: Vec<usize>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            recon_weight_pas: 0.1,
            lambda_inpaint: 0.1,
            tv_normalized: false,
            perceptual_normalized: true,
            perceptual_taps: DEFAULT_PERCEPTUAL_TAPS.to_vec(),
        }
    }
}

#[inline]
fn sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_same(op: &'static str, a: &Tensor4, b: &Tensor4) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    Ok(())
}

fn single(img: &Image) -> Tensor4 {
    Tensor4::from_images(&[img]).expect("one image always forms a batch")
}

/// Mean absolute difference over all entries.
pub fn l1_batch(a: &Tensor4, b: &Tensor4) -> Result<(f64, Tensor4)> {
    check_same("l1_loss", a, b)?;
    let n = a.data.len() as f64;
    let mut loss = 0.0;
    let grad = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| {
            loss += (x - y).abs();
            sign(x - y) / n
        })
        .collect();
    Ok((loss / n, Tensor4 { data: grad, ..a.clone() }))
}

pub fn l1_loss(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::shape("l1_loss", format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    Ok(l1_batch(&single(a), &single(b))?.0)
}

/// `L1(j_fake, j) + w·L1(i_recon, i)`.
pub fn pas_pixel_loss(j_fake: &Image, j: &Image, i_recon: &Image, i: &Image, cfg: &LossConfig) -> Result<f64> {
    Ok(l1_loss(j_fake, j)? + cfg.recon_weight_pas * l1_loss(i_recon, i)?)
}

/// Σ_c [1 − 2·Σ(p·t) / max(Σp + Σt, ε)] per sample, averaged over the batch.
/// `pred` and `target` hold one channel per class.
pub fn dice_batch(pred: &Tensor4, target: &Tensor4) -> Result<(f64, Tensor4)> {
    check_same("dice_loss", pred, target)?;
    let plane = pred.plane_len();
    let nb = pred.n as f64;
    let mut grad = pred.zeros_like();
    let mut loss = 0.0;
    for ((p, t), g) in pred
        .data
        .chunks(plane)
        .zip(target.data.chunks(plane))
        .zip(grad.data.chunks_mut(plane))
    {
        let sp: f64 = p.iter().sum();
        let st: f64 = t.iter().sum();
        let inter: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
        let guarded = sp + st < DICE_EPS;
        let d = if guarded { DICE_EPS } else { sp + st };
        loss += 1.0 - 2.0 * inter / d;
        for (gi, &ti) in g.iter_mut().zip(t) {
            let dd = if guarded { 0.0 } else { inter };
            *gi = -2.0 * (ti * d - dd) / (d * d) / nb;
        }
    }
    Ok((loss / nb, grad))
}

pub fn dice_loss(pred: &Image, target: &SegmentationMap) -> Result<f64> {
    let t = target.to_one_hot();
    if !pred.same_shape(&t) {
        return Err(Error::shape("dice_loss", format!("{:?}", t.shape()), format!("{:?}", pred.shape())));
    }
    Ok(dice_batch(&single(pred), &single(&t))?.0)
}

/// Σ over taps of |fx(a) − fx(b)|, per-tap mean when `normalized`, else the
/// per-sample sum; averaged over the batch either way.
pub fn perceptual_batch<F: FeatureExtractor>(
    a: &Tensor4,
    b: &Tensor4,
    fx: &F,
    normalized: bool,
) -> Result<(f64, Tensor4)> {
    check_same("perceptual_loss", a, b)?;
    let (fa, cache) = fx.extract(a)?;
    let (fb, _) = fx.extract(b)?;
    let mut loss = 0.0;
    let grads: Vec<Tensor4> = fa
        .iter()
        .zip(&fb)
        .map(|(x, y)| {
            let scale = if normalized { x.data.len() as f64 } else { x.n as f64 };
            let data = x
                .data
                .iter()
                .zip(&y.data)
                .map(|(p, q)| {
                    loss += (p - q).abs() / scale;
                    sign(p - q) / scale
                })
                .collect();
            Tensor4 { data, ..x.clone() }
        })
        .collect();
    Ok((loss, fx.backward(&cache, &grads)))
}

pub fn perceptual_loss<F: FeatureExtractor>(a: &Image, b: &Image, fx: &F, normalized: bool) -> Result<f64> {
    Ok(perceptual_batch(&single(a), &single(b), fx, normalized)?.0)
}

/// Sum of squared horizontal and vertical neighbour differences per sample,
/// averaged over the batch; divided by the number of differences when
/// `normalized`.
pub fn tv_batch(x: &Tensor4, normalized: bool) -> (f64, Tensor4) {
    let (h, w) = (x.h, x.w);
    let terms = x.c * (h * w.saturating_sub(1) + h.saturating_sub(1) * w);
    let scale = x.n as f64 * if normalized { terms.max(1) as f64 } else { 1.0 };
    let mut grad = x.zeros_like();
    let mut loss = 0.0;
    for (p, g) in x.data.chunks(h * w).zip(grad.data.chunks_mut(h * w)) {
        for r in 0..h {
            for c in 0..w {
                let i = r * w + c;
                if c + 1 < w {
                    let d = p[i + 1] - p[i];
                    loss += d * d;
                    g[i + 1] += 2.0 * d / scale;
                    g[i] -= 2.0 * d / scale;
                }
                if r + 1 < h {
                    let d = p[i + w] - p[i];
                    loss += d * d;
                    g[i + w] += 2.0 * d / scale;
                    g[i] -= 2.0 * d / scale;
                }
            }
        }
    }
    (loss / scale, grad)
}

pub fn tv_loss(img: &Image, normalized: bool) -> f64 {
    tv_batch(&single(img), normalized).0
}

/// Mean absolute difference of two feature vectors.
pub fn feature_l1(fa: &[f64], fb: &[f64]) -> f64 {
    fa.iter().zip(fb).map(|(a, b)| (a - b).abs()).sum::<f64>() / fa.len().max(1) as f64
}

/// `(1/N)·Σ|F(a)_i − F(b)_i|`, averaged over the batch.
pub fn identity_batch<E: IdentityEmbedder>(a: &Tensor4, b: &Tensor4, emb: &E) -> Result<(f64, Tensor4)> {
    check_same("identity_loss", a, b)?;
    let (fa, cache) = emb.embed(a)?;
    let (fb, _) = emb.embed(b)?;
    let n = fa.data.len() as f64;
    let mut loss = 0.0;
    let g = Matrix {
        data: fa
            .data
            .iter()
            .zip(&fb.data)
            .map(|(p, q)| {
                loss += (p - q).abs();
                sign(p - q) / n
            })
            .collect(),
        ..fa
    };
    Ok((loss / n, emb.backward(&cache, &g)))
}

pub fn identity_loss<E: IdentityEmbedder>(a: &Image, b: &Image, emb: &E) -> Result<f64> {
    Ok(identity_batch(&single(a), &single(b), emb)?.0)
}

/// `−mean(fake)` and its gradient per score.
pub fn gen_adv_loss(fake: &[f64]) -> (f64, Vec<f64>) {
    let n = fake.len().max(1) as f64;
    (-fake.iter().sum::<f64>() / n, vec![-1.0 / n; fake.len()])
}

/// `mean(max(1 − real, 0)) + mean(max(1 + fake, 0))` with per-score gradients.
pub fn disc_hinge_loss(real: &[f64], fake: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let nr = real.len().max(1) as f64;
    let nf = fake.len().max(1) as f64;
    let lr: f64 = real.iter().map(|r| (1.0 - r).max(0.0)).sum::<f64>() / nr;
    let lf: f64 = fake.iter().map(|f| (1.0 + f).max(0.0)).sum::<f64>() / nf;
    let gr = real.iter().map(|r| if *r < 1.0 { -1.0 / nr } else { 0.0 }).collect();
    let gf = fake.iter().map(|f| if *f > -1.0 { 1.0 / nf } else { 0.0 }).collect();
    (lr + lf, gr, gf)
}

/// Ordered named scalars; the total is always the sum of the components.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    components: Vec<(String, f64)>,
    total: f64,
}

impl LossReport {
    pub fn new(components: Vec<(String, f64)>) -> Self {
        let total = components.iter().map(|(_, v)| v).sum();
        Self { components, total }
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn components(&self) -> &[(String, f64)] {
        &self.components
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        if name == "total" {
            return Some(self.total);
        }
        self.components.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.components.iter().all(|(_, v)| v.is_finite())
    }

    /// `name=value,...,total=value` with `prefix` prepended to each name.
    pub fn to_line(&self, prefix: &str) -> String {
        let mut s = String::new();
        for (n, v) in &self.components {
            let _ = write!(s, "{prefix}{n}={v:.9e},");
        }
        let _ = write!(s, "{prefix}total={:.9e}", self.total);
        s
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SamplerComponents {
    pub pix: f64,
    pub seg: f64,
    pub per: f64,
    pub tv: f64,
}

/// Unweighted sum `pix + seg + per + tv`.
pub fn sampler_total(c: &SamplerComponents) -> LossReport {
    LossReport::new(vec![
        ("pix".into(), c.pix),
        ("seg".into(), c.seg),
        ("per".into(), c.per),
        ("tv".into(), c.tv),
    ])
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GeneratorComponents {
    pub pix: f64,
    pub per: f64,
    pub id: f64,
    pub tv: f64,
    pub adv: f64,
}

/// Unweighted sum `pix + per + id + tv + adv`.
pub fn generator_total(c: &GeneratorComponents) -> LossReport {
    LossReport::new(vec![
        ("pix".into(), c.pix),
        ("per".into(), c.per),
        ("id".into(), c.id),
        ("tv".into(), c.tv),
        ("adv".into(), c.adv),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::NUM_REGIONS;
    use crate::nn::extractors::{ToyIdentityNet, ToyPerceptualNet};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn img(c: usize, h: usize, w: usize, v: Vec<f64>) -> Image {
        Image::from_vec(c, h, w, v).unwrap()
    }

    fn random(seed: u64, c: usize, h: usize, w: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(c, h, w, |_, _, _| rng.gen())
    }

    #[test]
    fn l1_examples() {
        let a = random(1, 3, 4, 4);
        assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
        let ones = Image::filled(3, 4, 4, 1.0);
        let zeros = Image::new(3, 4, 4);
        assert_eq!(l1_loss(&ones, &zeros).unwrap(), 1.0);
        let a = img(1, 2, 2, vec![0.0, 0.5, 1.0, 0.25]);
        assert!((l1_loss(&a, &Image::new(1, 2, 2)).unwrap() - 0.4375).abs() < 1e-12);
        assert!(l1_loss(&a, &zeros).is_err());
    }

    #[test]
    fn pas_pixel_examples() {
        let cfg = LossConfig::default();
        let a = random(2, 3, 4, 4);
        let b = random(3, 3, 4, 4);
        assert_eq!(pas_pixel_loss(&a, &a, &b, &b, &cfg).unwrap(), 0.0);
        // uniform offsets give exact L1 terms of 0.2 and 0.5
        let z = Image::new(1, 2, 2);
        let j = Image::filled(1, 2, 2, 0.2);
        let i = Image::filled(1, 2, 2, 0.5);
        assert!((pas_pixel_loss(&j, &z, &i, &z, &cfg).unwrap() - 0.25).abs() < 1e-12);
        let expect = l1_loss(&a, &b).unwrap() + 0.1 * l1_loss(&b, &a).unwrap();
        assert!((pas_pixel_loss(&a, &b, &b, &a, &cfg).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn dice_examples() {
        let labels: Vec<u8> = (0..16).map(|i| (i % NUM_REGIONS) as u8).collect();
        let seg = SegmentationMap::from_labels(4, 4, labels).unwrap();
        assert!(dice_loss(&seg.to_one_hot(), &seg).unwrap().abs() < 1e-12);
        // shifting every label by one class makes all classes disjoint
        let shifted: Vec<u8> = (0..16).map(|i| ((i + 1) % NUM_REGIONS) as u8).collect();
        let other = SegmentationMap::from_labels(4, 4, shifted).unwrap();
        assert!((dice_loss(&other.to_one_hot(), &seg).unwrap() - NUM_REGIONS as f64).abs() < 1e-8);
        // two classes over four pixels, each pair overlapping in one pixel
        let t = Tensor4::from_vec(1, 2, 1, 4, vec![1., 1., 0., 0., 0., 0., 1., 1.]).unwrap();
        let p = Tensor4::from_vec(1, 2, 1, 4, vec![1., 0., 1., 0., 0., 1., 0., 1.]).unwrap();
        assert!((dice_batch(&p, &t).unwrap().0 - 1.0).abs() < 1e-8);
    }

    #[test]
    fn perceptual_examples() {
        let fx = ToyPerceptualNet::new(7, 3, &DEFAULT_PERCEPTUAL_TAPS);
        let a = random(4, 3, 16, 16);
        let b = random(5, 3, 16, 16);
        assert_eq!(perceptual_loss(&a, &a, &fx, true).unwrap(), 0.0);
        let fresh = ToyPerceptualNet::new(7, 3, &DEFAULT_PERCEPTUAL_TAPS);
        let (fa, _) = fresh.extract(&single(&a)).unwrap();
        let (fb, _) = fresh.extract(&single(&b)).unwrap();
        let expect: f64 = fa
            .iter()
            .zip(&fb)
            .map(|(x, y)| x.data.iter().zip(&y.data).map(|(p, q)| (p - q).abs()).sum::<f64>() / x.data.len() as f64)
            .sum();
        assert!((perceptual_loss(&a, &b, &fx, true).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn tv_examples() {
        assert_eq!(tv_loss(&Image::filled(3, 5, 5, 0.3), false), 0.0);
        assert_eq!(tv_loss(&img(1, 1, 2, vec![0.0, 1.0]), false), 1.0);
        assert_eq!(tv_loss(&img(1, 2, 2, vec![0.0, 1.0, 1.0, 0.0]), false), 4.0);
        assert_eq!(tv_loss(&img(1, 2, 2, vec![0.0, 1.0, 1.0, 0.0]), true), 1.0);
    }

    #[test]
    fn identity_examples() {
        assert_eq!(feature_l1(&[1.0, 3.0], &[2.0, 5.0]), 1.5);
        let emb = ToyIdentityNet::new(3, 3, 64);
        let a = random(6, 3, 16, 16);
        let b = random(7, 3, 16, 16);
        assert_eq!(identity_loss(&a, &a, &emb).unwrap(), 0.0);
        let (fa, _) = emb.embed(&single(&a)).unwrap();
        let (fb, _) = emb.embed(&single(&b)).unwrap();
        assert!((identity_loss(&a, &b, &emb).unwrap() - feature_l1(&fa.data, &fb.data)).abs() < 1e-12);
    }

    #[test]
    fn adversarial_examples() {
        assert_eq!(gen_adv_loss(&[0.0]).0, 0.0);
        assert_eq!(gen_adv_loss(&[2.5]).0, -2.5);
        assert!((gen_adv_loss(&[1.0, 2.0, -0.5]).0 + 2.5 / 3.0).abs() < 1e-12);
        assert_eq!(disc_hinge_loss(&[1.0], &[-1.0]).0, 0.0);
        assert_eq!(disc_hinge_loss(&[0.0], &[0.0]).0, 2.0);
        assert!((disc_hinge_loss(&[-0.5], &[0.3]).0 - 2.8).abs() < 1e-12);
    }

    #[test]
    fn totals() {
        assert_eq!(sampler_total(&SamplerComponents::default()).total(), 0.0);
        let r = sampler_total(&SamplerComponents { pix: 1.0, seg: 2.0, per: 3.0, tv: 4.0 });
        assert_eq!(r.total(), 10.0);
        let g = generator_total(&GeneratorComponents { pix: 0.5, per: 0.25, id: 0.125, tv: 2.0, adv: -1.0 });
        assert_eq!(g.total(), 1.875);
        assert_eq!(g.get("adv"), Some(-1.0));
        assert!(g.to_line("g_").ends_with("g_total=1.875000000e0"));
    }

    proptest! {
        #[test]
        fn dice_is_bounded(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = Tensor4::from_vec(2, 4, 3, 3, (0..72).map(|_| rng.gen::<f64>()).collect()).unwrap();
            let t = Tensor4::from_vec(2, 4, 3, 3, (0..72).map(|_| rng.gen::<f64>()).collect()).unwrap();
            let (l, _) = dice_batch(&p, &t).unwrap();
            prop_assert!((0.0..=4.0).contains(&l));
        }

        #[test]
        fn dice_is_symmetric_on_one_hot(labels_a in prop::collection::vec(0u8..8, 12), labels_b in prop::collection::vec(0u8..8, 12)) {
            let a = SegmentationMap::from_labels(3, 4, labels_a).unwrap();
            let b = SegmentationMap::from_labels(3, 4, labels_b).unwrap();
            let ab = dice_loss(&a.to_one_hot(), &b).unwrap();
            let ba = dice_loss(&b.to_one_hot(), &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
        }

        #[test]
        fn l1_and_tv_flip_invariant(seed in any::<u64>()) {
            let a = random(seed, 2, 5, 6);
            let b = random(seed ^ 1, 2, 5, 6);
            let l = l1_loss(&a, &b).unwrap();
            let lf = l1_loss(&a.flip_horizontal(), &b.flip_horizontal()).unwrap();
            prop_assert!((l - lf).abs() < 1e-12);
            prop_assert!((tv_loss(&a, false) - tv_loss(&a.flip_horizontal(), false)).abs() < 1e-9);
        }
    }
}
