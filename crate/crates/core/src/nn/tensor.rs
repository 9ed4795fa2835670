use crate::error::{Error, Result};
use crate::image::Image;

/// Dense N×C×H×W array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::shape("Tensor4::from_vec", n * c * h * w, data.len()));
        }
        Ok(Self { n, c, h, w, data })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.n, self.c, self.h, self.w)
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    #[inline]
    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let l = self.sample_len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f64] {
        let l = self.sample_len();
        &mut self.data[i * l..(i + 1) * l]
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[((n * self.c + c) * self.h + y) * self.w + x]
    }

    /// Stacks same-shaped images into a batch.
    pub fn from_images(images: &[&Image]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidInput("empty image batch".into()))?;
        let (c, h, w) = first.shape();
        let mut data = Vec::with_capacity(images.len() * c * h * w);
        for img in images {
            if img.shape() != (c, h, w) {
                return Err(Error::shape(
                    "Tensor4::from_images",
                    format!("{:?}", (c, h, w)),
                    format!("{:?}", img.shape()),
                ));
            }
            data.extend_from_slice(img.data());
        }
        Ok(Self {
            n: images.len(),
            c,
            h,
            w,
            data,
        })
    }

    pub fn image(&self, i: usize) -> Image {
        Image::from_vec(self.c, self.h, self.w, self.sample(i).to_vec())
            .expect("sample length matches shape")
    }

    pub fn to_images(&self) -> Vec<Image> {
        (0..self.n).map(|i| self.image(i)).collect()
    }

    pub fn add_assign(&mut self, other: &Tensor4) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor4 {
        Tensor4 {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Samples `start..start + count` as a new batch.
    pub fn slice_n(&self, start: usize, count: usize) -> Tensor4 {
        let l = self.sample_len();
        Tensor4 {
            n: count,
            data: self.data[start * l..(start + count) * l].to_vec(),
            ..*self
        }
    }

    /// Batch concatenation of same-shaped samples.
    pub fn concat_n(parts: &[&Tensor4]) -> Tensor4 {
        let first = parts.first().expect("at least one part");
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        for p in parts {
            assert_eq!((p.c, p.h, p.w), (first.c, first.h, first.w), "concat_n shape");
            data.extend_from_slice(&p.data);
        }
        Tensor4 {
            n: parts.iter().map(|p| p.n).sum(),
            data,
            ..**first
        }
    }

    /// Channel concatenation of two batches with equal N, H, W.
    pub fn concat_channels(a: &Tensor4, b: &Tensor4) -> Tensor4 {
        assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w), "concat_channels shape");
        let mut out = Tensor4::zeros(a.n, a.c + b.c, a.h, a.w);
        let (la, lb) = (a.sample_len(), b.sample_len());
        for i in 0..a.n {
            let dst = out.sample_mut(i);
            dst[..la].copy_from_slice(a.sample(i));
            dst[la..la + lb].copy_from_slice(b.sample(i));
        }
        out
    }

    /// Inverse of [`Tensor4::concat_channels`]: the first `c_first` channels and the rest.
    pub fn split_channels(&self, c_first: usize) -> (Tensor4, Tensor4) {
        let mut a = Tensor4::zeros(self.n, c_first, self.h, self.w);
        let mut b = Tensor4::zeros(self.n, self.c - c_first, self.h, self.w);
        let la = a.sample_len();
        for i in 0..self.n {
            let src = self.sample(i);
            a.sample_mut(i).copy_from_slice(&src[..la]);
            b.sample_mut(i).copy_from_slice(&src[la..]);
        }
        (a, b)
    }
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2(x: &Tensor4) -> Tensor4 {
    let (h2, w2) = (x.h * 2, x.w * 2);
    let mut out = Tensor4::zeros(x.n, x.c, h2, w2);
    for nc in 0..x.n * x.c {
        let src = &x.data[nc * x.h * x.w..(nc + 1) * x.h * x.w];
        let dst = &mut out.data[nc * h2 * w2..(nc + 1) * h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[y * w2 + xx] = src[(y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(dy: &Tensor4) -> Tensor4 {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut out = Tensor4::zeros(dy.n, dy.c, h, w);
    for nc in 0..dy.n * dy.c {
        let src = &dy.data[nc * dy.h * dy.w..(nc + 1) * dy.h * dy.w];
        let dst = &mut out.data[nc * h * w..(nc + 1) * h * w];
        for y in 0..dy.h {
            for x in 0..dy.w {
                dst[(y / 2) * w + x / 2] += src[y * dy.w + x];
            }
        }
    }
    out
}

/// Spatial mean per (sample, channel): returns N×C values row-major.
pub fn global_avg_pool(x: &Tensor4) -> Vec<f64> {
    let hw = x.plane_len();
    x.data
        .chunks(hw)
        .map(|p| p.iter().sum::<f64>() / hw as f64)
        .collect()
}

pub fn global_avg_pool_backward(dpool: &[f64], n: usize, c: usize, h: usize, w: usize) -> Tensor4 {
    let hw = (h * w) as f64;
    let mut out = Tensor4::zeros(n, c, h, w);
    for (p, &g) in out.data.chunks_mut(h * w).zip(dpool) {
        p.iter_mut().for_each(|v| *v = g / hw);
    }
    out
}

pub fn global_sum_pool(x: &Tensor4) -> Vec<f64> {
    x.data.chunks(x.plane_len()).map(|p| p.iter().sum()).collect()
}

pub fn global_sum_pool_backward(dpool: &[f64], n: usize, c: usize, h: usize, w: usize) -> Tensor4 {
    let mut out = Tensor4::zeros(n, c, h, w);
    for (p, &g) in out.data.chunks_mut(h * w).zip(dpool) {
        p.iter_mut().for_each(|v| *v = g);
    }
    out
}
