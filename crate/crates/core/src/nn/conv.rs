//! 2-D cross-correlation via im2col + GEMM.

use rand::Rng;

use super::gemm::gemm;
use super::params::{init_uniform, ParamId, ParamStore};
use super::tensor::Tensor4;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn new(in_c: usize, out_c: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            in_c,
            out_c,
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn weight_len(&self) -> usize {
        self.out_c * self.in_c * self.kernel * self.kernel
    }

    fn patch_len(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }
}

/// Saved im2col buffers for the backward pass.
#[derive(Debug, Clone)]
pub struct ConvCache {
    in_shape: [usize; 4],
    cols: Vec<Vec<f64>>,
}

fn im2col(spec: &ConvSpec, x: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let k = spec.kernel;
    let ohw = oh * ow;
    let mut cols = vec![0.0; spec.patch_len() * ohw];
    for ci in 0..spec.in_c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * ohw..][..ohw];
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            row[oy * ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(spec: &ConvSpec, cols: &[f64], h: usize, w: usize, oh: usize, ow: usize, dx: &mut [f64]) {
    let k = spec.kernel;
    let ohw = oh * ow;
    for ci in 0..spec.in_c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * ohw..][..ohw];
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Convolution with an explicit weight `[out_c, in_c, k, k]` and optional bias.
pub fn conv2d_forward(
    spec: &ConvSpec,
    x: &Tensor4,
    weight: &[f64],
    bias: Option<&[f64]>,
) -> Result<(Tensor4, ConvCache)> {
    if x.c != spec.in_c {
        return Err(Error::shape("conv2d_forward", spec.in_c, x.c));
    }
    if weight.len() != spec.weight_len() {
        return Err(Error::shape("conv2d_forward weight", spec.weight_len(), weight.len()));
    }
    if x.h + 2 * spec.pad < spec.kernel || x.w + 2 * spec.pad < spec.kernel {
        return Err(Error::shape("conv2d_forward spatial", spec.kernel, x.h.min(x.w)));
    }
    let (oh, ow) = spec.out_size(x.h, x.w);
    let mut y = Tensor4::zeros(x.n, spec.out_c, oh, ow);
    let mut all_cols = Vec::with_capacity(x.n);
    for i in 0..x.n {
        let cols = im2col(spec, x.sample(i), x.h, x.w, oh, ow);
        let out = y.sample_mut(i);
        if let Some(b) = bias {
            for (co, plane) in out.chunks_mut(oh * ow).enumerate() {
                plane.iter_mut().for_each(|v| *v = b[co]);
            }
        }
        gemm(
            spec.out_c,
            spec.patch_len(),
            oh * ow,
            weight,
            false,
            &cols,
            false,
            if bias.is_some() { 1.0 } else { 0.0 },
            out,
        );
        all_cols.push(cols);
    }
    Ok((
        y,
        ConvCache {
            in_shape: x.shape(),
            cols: all_cols,
        },
    ))
}

/// Gradients w.r.t. the input and, if requested, the weight and bias.
pub fn conv2d_backward(
    spec: &ConvSpec,
    cache: &ConvCache,
    weight: &[f64],
    dy: &Tensor4,
    want_param_grads: bool,
) -> (Tensor4, Option<(Vec<f64>, Vec<f64>)>) {
    let [n, c, h, w] = cache.in_shape;
    let (oh, ow) = (dy.h, dy.w);
    let ohw = oh * ow;
    let mut dx = Tensor4::zeros(n, c, h, w);
    let mut dw = vec![0.0; if want_param_grads { spec.weight_len() } else { 0 }];
    let mut db = vec![0.0; if want_param_grads { spec.out_c } else { 0 }];
    let mut dcols = vec![0.0; spec.patch_len() * ohw];
    for i in 0..n {
        let g = dy.sample(i);
        if want_param_grads {
            gemm(spec.out_c, ohw, spec.patch_len(), g, false, &cache.cols[i], true, 1.0, &mut dw);
            for (co, plane) in g.chunks(ohw).enumerate() {
                db[co] += plane.iter().sum::<f64>();
            }
        }
        gemm(spec.patch_len(), spec.out_c, ohw, weight, true, g, false, 0.0, &mut dcols);
        col2im(spec, &dcols, h, w, oh, ow, dx.sample_mut(i));
    }
    (dx, want_param_grads.then_some((dw, db)))
}

/// Trainable convolution layer.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        spec: ConvSpec,
        bias: bool,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = spec.in_c * spec.kernel * spec.kernel;
        let weight = store.add(
            format!("{name}.weight"),
            &[spec.out_c, spec.in_c, spec.kernel, spec.kernel],
            init_uniform(rng, spec.weight_len(), fan_in, gain),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), &[spec.out_c], vec![0.0; spec.out_c]));
        Self { spec, weight, bias }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor4) -> Result<(Tensor4, ConvCache)> {
        conv2d_forward(
            &self.spec,
            x,
            store.value(self.weight),
            self.bias.map(|b| store.value(b)),
        )
    }

    pub fn backward(&self, store: &mut ParamStore, cache: &ConvCache, dy: &Tensor4) -> Tensor4 {
        let want = store.requires_grad();
        let (dx, grads) = conv2d_backward(&self.spec, cache, store.value(self.weight), dy, want);
        if let Some((dw, db)) = grads {
            store.grad_mut(self.weight).iter_mut().zip(&dw).for_each(|(g, d)| *g += d);
            if let Some(b) = self.bias {
                store.grad_mut(b).iter_mut().zip(&db).for_each(|(g, d)| *g += d);
            }
        }
        dx
    }

    /// Input gradient only; parameters are left untouched.
    pub fn input_grad(&self, store: &ParamStore, cache: &ConvCache, dy: &Tensor4) -> Tensor4 {
        conv2d_backward(&self.spec, cache, store.value(self.weight), dy, false).0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop cross-correlation used as an oracle.
    fn naive(spec: &ConvSpec, x: &Tensor4, wt: &[f64], b: &[f64]) -> Tensor4 {
        let (oh, ow) = spec.out_size(x.h, x.w);
        let k = spec.kernel;
        let mut y = Tensor4::zeros(x.n, spec.out_c, oh, ow);
        for n in 0..x.n {
            for co in 0..spec.out_c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = b[co];
                        for ci in 0..spec.in_c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                                    let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < x.h && (ix as usize) < x.w {
                                        s += wt[((co * spec.in_c + ci) * k + ky) * k + kx]
                                            * x.at(n, ci, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        y.data[((n * spec.out_c + co) * oh + oy) * ow + ox] = s;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn identity_kernel_is_identity() {
        let spec = ConvSpec::new(3, 3, 1, 1, 0);
        let mut wt = vec![0.0; 9];
        for c in 0..3 {
            wt[c * 3 + c] = 1.0;
        }
        let x = Tensor4::from_vec(2, 3, 4, 5, (0..120).map(|i| i as f64 * 0.1).collect()).unwrap();
        let (y, _) = conv2d_forward(&spec, &x, &wt, Some(&[0.0; 3])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn ones_kernel_on_constant_interior() {
        let spec = ConvSpec::new(1, 1, 3, 1, 1);
        let x = Tensor4::from_vec(1, 1, 5, 5, vec![0.7; 25]).unwrap();
        let (y, _) = conv2d_forward(&spec, &x, &[1.0; 9], None).unwrap();
        for yy in 1..4 {
            for xx in 1..4 {
                assert!((y.at(0, 0, yy, xx) - 6.3).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_naive_with_stride_and_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for spec in [ConvSpec::new(2, 3, 3, 2, 1), ConvSpec::new(3, 2, 3, 1, 1), ConvSpec::new(2, 2, 1, 1, 0)] {
            let x = Tensor4::from_vec(2, spec.in_c, 7, 6, init_uniform(&mut rng, 2 * spec.in_c * 42, 1, 1.0)).unwrap();
            let wt = init_uniform(&mut rng, spec.weight_len(), 1, 1.0);
            let b = init_uniform(&mut rng, spec.out_c, 1, 1.0);
            let (y, _) = conv2d_forward(&spec, &x, &wt, Some(&b)).unwrap();
            let want = naive(&spec, &x, &wt, &b);
            for (a, e) in y.data.iter().zip(&want.data) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let spec = ConvSpec::new(2, 1, 3, 1, 1);
        let x = Tensor4::zeros(1, 3, 4, 4);
        assert!(matches!(
            conv2d_forward(&spec, &x, &[0.0; 18], None),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
