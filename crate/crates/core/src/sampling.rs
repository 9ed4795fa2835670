//! Normalized coordinate sampling maps and differentiable bilinear grid
//! sampling.
//!
//! Coordinates use the align-corners convention: `-1` is the center of the
//! first pixel and `+1` the center of the last. Out-of-range coordinates are
//! clamped to the border before interpolation.

use crate::error::{Error, Result};
use crate::image::Image;

/// H×W×2 field of normalized source coordinates; plane 0 holds the
/// abscissa, plane 1 the ordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl SamplingMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; 2 * height * width],
        }
    }

    /// `data` is planar: all x coordinates, then all y coordinates.
    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 2 * height * width {
            return Err(Error::shape("SamplingMap::from_vec", 2 * height * width, data.len()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn x(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn y(&self, y: usize, x: usize) -> f64 {
        self.data[self.height * self.width + y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, gx: f64, gy: f64) {
        let n = self.height * self.width;
        self.data[y * self.width + x] = gx;
        self.data[n + y * self.width + x] = gy;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn in_range(&self) -> bool {
        self.data.iter().all(|v| (-1.0..=1.0).contains(v))
    }

    pub fn max_abs_diff(&self, other: &SamplingMap) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }
}

#[inline]
fn identity_coord(i: usize, n: usize) -> f64 {
    if n > 1 {
        2.0 * i as f64 / (n - 1) as f64 - 1.0
    } else {
        0.0
    }
}

/// The map that samples every pixel from itself.
pub fn identity_grid(height: usize, width: usize) -> SamplingMap {
    let mut m = SamplingMap::zeros(height, width);
    for y in 0..height {
        for x in 0..width {
            m.set(y, x, identity_coord(x, width), identity_coord(y, height));
        }
    }
    m
}

/// Interpolation stencil along one axis.
#[derive(Clone, Copy)]
struct Axis {
    i0: usize,
    i1: usize,
    frac: f64,
    /// d(pixel coordinate)/d(normalized coordinate), zero when clamped.
    dscale: f64,
}

#[inline]
fn axis(coord: f64, n: usize) -> Axis {
    if n == 1 {
        return Axis {
            i0: 0,
            i1: 0,
            frac: 0.0,
            dscale: 0.0,
        };
    }
    let half = (n - 1) as f64 / 2.0;
    let c = coord.clamp(-1.0, 1.0);
    let p = (c + 1.0) * half;
    let i0 = (p.floor() as usize).min(n - 2);
    // Right-limit subgradient: coordinates at or beyond +1 cannot move right.
    let active = (-1.0..1.0).contains(&coord);
    Axis {
        i0,
        i1: i0 + 1,
        frac: p - i0 as f64,
        dscale: if active { half } else { 0.0 },
    }
}

fn check_map(img: &Image, map: &SamplingMap) -> Result<()> {
    if img.is_empty() {
        return Err(Error::InvalidInput("grid_sample on an empty image".into()));
    }
    if map.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sampling map coordinate".into()));
    }
    Ok(())
}

/// Bilinear sampling of `img` at the coordinates of `map`; the output has
/// the map's spatial size and the image's channel count.
pub fn grid_sample(img: &Image, map: &SamplingMap) -> Result<Image> {
    check_map(img, map)?;
    let (cn, h, w) = img.shape();
    let (oh, ow) = (map.height, map.width);
    let mut out = Image::new(cn, oh, ow);
    for oy in 0..oh {
        for ox in 0..ow {
            let ax = axis(map.x(oy, ox), w);
            let ay = axis(map.y(oy, ox), h);
            let (w00, w01) = ((1.0 - ay.frac) * (1.0 - ax.frac), (1.0 - ay.frac) * ax.frac);
            let (w10, w11) = (ay.frac * (1.0 - ax.frac), ay.frac * ax.frac);
            for c in 0..cn {
                let p = img.plane(c);
                let v = w00 * p[ay.i0 * w + ax.i0]
                    + w01 * p[ay.i0 * w + ax.i1]
                    + w10 * p[ay.i1 * w + ax.i0]
                    + w11 * p[ay.i1 * w + ax.i1];
                out.set(c, oy, ox, v);
            }
        }
    }
    Ok(out)
}

/// Gradients of [`grid_sample`] with respect to the image and the map.
pub fn grid_sample_backward(
    grad_out: &Image,
    img: &Image,
    map: &SamplingMap,
) -> Result<(Image, SamplingMap)> {
    check_map(img, map)?;
    let (cn, h, w) = img.shape();
    let (oh, ow) = (map.height, map.width);
    if grad_out.shape() != (cn, oh, ow) {
        return Err(Error::shape(
            "grid_sample_backward",
            format!("{:?}", (cn, oh, ow)),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let mut grad_img = Image::new(cn, h, w);
    let mut grad_map = SamplingMap::zeros(oh, ow);
    for oy in 0..oh {
        for ox in 0..ow {
            let ax = axis(map.x(oy, ox), w);
            let ay = axis(map.y(oy, ox), h);
            let (fx, fy) = (ax.frac, ay.frac);
            let (w00, w01) = ((1.0 - fy) * (1.0 - fx), (1.0 - fy) * fx);
            let (w10, w11) = (fy * (1.0 - fx), fy * fx);
            let (mut gx, mut gy) = (0.0, 0.0);
            for c in 0..cn {
                let g = grad_out.get(c, oy, ox);
                if g == 0.0 {
                    continue;
                }
                let p = img.plane(c);
                let v00 = p[ay.i0 * w + ax.i0];
                let v01 = p[ay.i0 * w + ax.i1];
                let v10 = p[ay.i1 * w + ax.i0];
                let v11 = p[ay.i1 * w + ax.i1];
                let gp = grad_img.plane_mut(c);
                gp[ay.i0 * w + ax.i0] += g * w00;
                gp[ay.i0 * w + ax.i1] += g * w01;
                gp[ay.i1 * w + ax.i0] += g * w10;
                gp[ay.i1 * w + ax.i1] += g * w11;
                gx += g * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                gy += g * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
            }
            grad_map.set(oy, ox, gx * ax.dscale, gy * ay.dscale);
        }
    }
    Ok((grad_img, grad_map))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Image {
        Image::from_fn(c, h, w, |_, _, _| rng.gen_range(0.0..1.0))
    }

    /// Random coordinates kept away from the bilinear kinks, where the
    /// function is not differentiable.
    fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> SamplingMap {
        let mut m = SamplingMap::zeros(h, w);
        let away = |rng: &mut ChaCha8Rng, n: usize| loop {
            let v: f64 = rng.gen_range(-0.98..0.98);
            let p = (v + 1.0) * (n - 1) as f64 / 2.0;
            if (p - p.round()).abs() > 1e-3 {
                return v;
            }
        };
        for y in 0..h {
            for x in 0..w {
                let gx = away(rng, w);
                let gy = away(rng, h);
                m.set(y, x, gx, gy);
            }
        }
        m
    }

    #[test]
    fn identity_grid_examples() {
        let g = identity_grid(2, 2);
        assert_eq!((g.x(0, 0), g.x(0, 1), g.x(1, 0), g.x(1, 1)), (-1.0, 1.0, -1.0, 1.0));
        assert_eq!((g.y(0, 0), g.y(1, 0), g.y(0, 1), g.y(1, 1)), (-1.0, 1.0, -1.0, 1.0));
        let g = identity_grid(3, 3);
        assert_eq!((g.x(1, 1), g.y(1, 1)), (0.0, 0.0));
        let g = identity_grid(1, 4);
        assert!((0..4).all(|x| g.y(0, x) == 0.0));
    }

    #[test]
    fn identity_sampling_reproduces_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (h, w) in [(8, 8), (5, 9), (1, 4), (32, 32)] {
            let img = random_image(&mut rng, 3, h, w);
            let out = grid_sample(&img, &identity_grid(h, w)).unwrap();
            for (a, b) in out.data().iter().zip(img.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_map_reads_one_pixel() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = random_image(&mut rng, 2, 5, 7);
        let id = identity_grid(5, 7);
        let (x0, y0) = (id.x(3, 4), id.y(3, 4));
        let mut m = SamplingMap::zeros(3, 3);
        for y in 0..3 {
            for x in 0..3 {
                m.set(y, x, x0, y0);
            }
        }
        let out = grid_sample(&img, &m).unwrap();
        for c in 0..2 {
            for v in out.plane(c) {
                assert!((v - img.get(c, 3, 4)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn midpoint_is_mean_of_neighbours() {
        let img = Image::from_vec(1, 1, 3, vec![0.2, 0.6, 1.0]).unwrap();
        let mut m = SamplingMap::zeros(1, 1);
        m.set(0, 0, -0.5, 0.0);
        let out = grid_sample(&img, &m).unwrap();
        assert!((out.get(0, 0, 0) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_clamps_to_border() {
        let img = Image::from_vec(1, 2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let mut m = SamplingMap::zeros(1, 1);
        m.set(0, 0, 5.0, -3.0);
        let out = grid_sample(&img, &m).unwrap();
        assert!((out.get(0, 0, 0) - 0.2).abs() < 1e-15);
        let (_, gm) = grid_sample_backward(&Image::filled(1, 1, 1, 1.0), &img, &m).unwrap();
        assert_eq!(gm.data(), &[0.0, 0.0]);
    }

    #[test]
    fn constant_image_has_zero_map_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = Image::filled(3, 6, 6, 0.7);
        let map = random_map(&mut rng, 6, 6);
        let g = random_image(&mut rng, 3, 6, 6);
        let (_, gm) = grid_sample_backward(&g, &img, &map).unwrap();
        assert!(gm.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn identity_grid_passes_image_gradient_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = random_image(&mut rng, 2, 6, 6);
        let g = random_image(&mut rng, 2, 6, 6);
        let (gi, _) = grid_sample_backward(&g, &img, &identity_grid(6, 6)).unwrap();
        for c in 0..2 {
            for y in 1..5 {
                for x in 1..5 {
                    assert!((gi.get(c, y, x) - g.get(c, y, x)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn backward_rejects_shape_mismatch() {
        let img = Image::new(1, 4, 4);
        let map = identity_grid(4, 4);
        let bad = Image::new(2, 4, 4);
        assert!(matches!(
            grid_sample_backward(&bad, &img, &map),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    fn weighted_sum(img: &Image, map: &SamplingMap, weights: &Image) -> f64 {
        grid_sample(img, map)
            .unwrap()
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum()
    }

    #[test]
    fn gradients_match_central_differences() {
        let eps = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img = random_image(&mut rng, 2, 8, 8);
        let map = random_map(&mut rng, 8, 8);
        let weights = random_image(&mut rng, 2, 8, 8);
        let (gi, gm) = grid_sample_backward(&weights, &img, &map).unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..img.len() {
            let mut p = img.clone();
            p.data_mut()[i] += eps;
            let mut m = img.clone();
            m.data_mut()[i] -= eps;
            let fd = (weighted_sum(&p, &map, &weights) - weighted_sum(&m, &map, &weights)) / (2.0 * eps);
            let a = gi.data()[i];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
        }
        for i in 0..map.data().len() {
            let mut p = map.clone();
            p.data_mut()[i] += eps;
            let mut m = map.clone();
            m.data_mut()[i] -= eps;
            let fd = (weighted_sum(&img, &p, &weights) - weighted_sum(&img, &m, &weights)) / (2.0 * eps);
            let a = gm.data()[i];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    proptest! {
        #[test]
        fn output_is_a_convex_combination(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = random_image(&mut rng, 1, 5, 6);
            let mut map = SamplingMap::zeros(4, 4);
            for v in map.data_mut() {
                *v = rng.gen_range(-1.3..1.3);
            }
            let (lo, hi) = img.min_max();
            let out = grid_sample(&img, &map).unwrap();
            for &v in out.data() {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }

        #[test]
        fn commutes_with_channel_permutation(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = random_image(&mut rng, 3, 5, 5);
            let map = random_map(&mut rng, 5, 5);
            let perm = [2usize, 0, 1];
            let permuted = Image::from_fn(3, 5, 5, |c, y, x| img.get(perm[c], y, x));
            let a = grid_sample(&img, &map).unwrap();
            let b = grid_sample(&permuted, &map).unwrap();
            for c in 0..3 {
                prop_assert_eq!(b.plane(c), a.plane(perm[c]));
            }
        }

        #[test]
        fn directional_derivative_matches(seed in 0u64..50) {
            let eps = 1e-5;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = random_image(&mut rng, 2, 6, 6);
            let map = random_map(&mut rng, 6, 6);
            let weights = random_image(&mut rng, 2, 6, 6);
            let di: Vec<f64> = (0..img.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let dm: Vec<f64> = (0..map.data().len()).map(|_| rng.gen_range(-0.01..0.01)).collect();
            let shift = |s: f64| {
                let mut i2 = img.clone();
                i2.data_mut().iter_mut().zip(&di).for_each(|(v, d)| *v += s * d);
                let mut m2 = map.clone();
                m2.data_mut().iter_mut().zip(&dm).for_each(|(v, d)| *v += s * d);
                weighted_sum(&i2, &m2, &weights)
            };
            let fd = (shift(eps) - shift(-eps)) / (2.0 * eps);
            let (gi, gm) = grid_sample_backward(&weights, &img, &map).unwrap();
            let an: f64 = gi.data().iter().zip(&di).map(|(a, b)| a * b).sum::<f64>()
                + gm.data().iter().zip(&dm).map(|(a, b)| a * b).sum::<f64>();
            prop_assert!((an - fd).abs() <= 1e-4 * an.abs().max(fd.abs()).max(1e-6));
        }
    }
}
