//! Spectral normalization by power iteration, and a spectrally normalized
//! convolution layer.

use rand::Rng;

use super::conv::{conv2d_backward, conv2d_forward, ConvCache, ConvSpec};
use super::params::{init_uniform, init_unit, BufferId, ParamId, ParamStore};
use super::tensor::Tensor4;
use crate::error::Result;

pub const SPECTRAL_EPS: f64 = 1e-12;

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let d = n.max(SPECTRAL_EPS);
    v.iter_mut().for_each(|x| *x /= d);
}

/// `Wᵀu` for `W` stored `rows × cols`.
fn wt_u(w: &[f64], rows: usize, cols: usize, u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (r, &ur) in u.iter().enumerate().take(rows) {
        for (o, &wv) in out.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *o += ur * wv;
        }
    }
    out
}

fn w_v(w: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|r| w[r * cols..(r + 1) * cols].iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// Runs `n_iter` power iterations on the left singular-vector estimate `u`.
pub fn power_iterate(w: &[f64], rows: usize, cols: usize, u: &mut [f64], n_iter: usize) {
    for _ in 0..n_iter {
        let mut v = wt_u(w, rows, cols, u);
        normalize(&mut v);
        let mut nu = w_v(w, rows, cols, &v);
        normalize(&mut nu);
        u.copy_from_slice(&nu);
    }
}

/// Current estimates `(σ̂, v)` with `v = Wᵀu/‖Wᵀu‖` and `σ̂ = uᵀWv`.
pub fn sigma_estimate(w: &[f64], rows: usize, cols: usize, u: &[f64]) -> (f64, Vec<f64>) {
    let mut v = wt_u(w, rows, cols, u);
    normalize(&mut v);
    let wv = w_v(w, rows, cols, &v);
    let sigma: f64 = wv.iter().zip(u).map(|(a, b)| a * b).sum();
    (sigma.max(SPECTRAL_EPS), v)
}

/// Updates `u` in place with `n_iter` power iterations and returns `W / σ̂`
/// together with `σ̂`.
pub fn spectral_normalize(w: &[f64], rows: usize, cols: usize, u: &mut [f64], n_iter: usize) -> (Vec<f64>, f64) {
    power_iterate(w, rows, cols, u, n_iter);
    let (sigma, _) = sigma_estimate(w, rows, cols, u);
    (w.iter().map(|x| x / sigma).collect(), sigma)
}

/// Gradient through `W̄ = W/σ` with `u, v` held constant:
/// `dW = dW̄/σ − (⟨dW̄, W⟩/σ²)·u·vᵀ`.
pub fn spectral_backward(w: &[f64], rows: usize, cols: usize, u: &[f64], v: &[f64], sigma: f64, dwbar: &[f64]) -> Vec<f64> {
    let inner: f64 = dwbar.iter().zip(w).map(|(a, b)| a * b).sum();
    let k = inner / (sigma * sigma);
    let mut dw = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            dw[i] = dwbar[i] / sigma - k * u[r] * v[c];
        }
    }
    dw
}

/// Convolution whose weight (viewed `out_c × rest`) is divided by its
/// estimated top singular value.
#[derive(Debug, Clone)]
pub struct SnConv2d {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: ParamId,
    pub u: BufferId,
}

#[derive(Debug, Clone)]
pub struct SnConvCache {
    conv: ConvCache,
    wbar: Vec<f64>,
    v: Vec<f64>,
    sigma: f64,
}

impl SnConv2d {
    pub fn new(store: &mut ParamStore, name: &str, spec: ConvSpec, rng: &mut impl Rng) -> Self {
        let fan_in = spec.in_c * spec.kernel * spec.kernel;
        let weight = store.add(
            format!("{name}.weight"),
            &[spec.out_c, spec.in_c, spec.kernel, spec.kernel],
            init_uniform(rng, spec.weight_len(), fan_in, 1.0),
        );
        let bias = store.add(format!("{name}.bias"), &[spec.out_c], vec![0.0; spec.out_c]);
        let u = store.add_buffer(format!("{name}.sn_u"), init_unit(rng, spec.out_c));
        Self {
            spec,
            weight,
            bias,
            u,
        }
    }

    fn dims(&self) -> (usize, usize) {
        (self.spec.out_c, self.spec.weight_len() / self.spec.out_c)
    }

    /// One training-step refresh of the singular-vector estimate.
    pub fn power_iterate(&self, store: &mut ParamStore, n_iter: usize) {
        let (r, c) = self.dims();
        let w = store.value(self.weight).to_vec();
        power_iterate(&w, r, c, store.buffer_mut(self.u), n_iter);
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor4) -> Result<(Tensor4, SnConvCache)> {
        let (r, c) = self.dims();
        let w = store.value(self.weight);
        let (sigma, v) = sigma_estimate(w, r, c, store.buffer(self.u));
        let wbar: Vec<f64> = w.iter().map(|x| x / sigma).collect();
        let (y, conv) = conv2d_forward(&self.spec, x, &wbar, Some(store.value(self.bias)))?;
        Ok((y, SnConvCache { conv, wbar, v, sigma }))
    }

    pub fn backward(&self, store: &mut ParamStore, cache: &SnConvCache, dy: &Tensor4) -> Tensor4 {
        let want = store.requires_grad();
        let (dx, grads) = conv2d_backward(&self.spec, &cache.conv, &cache.wbar, dy, want);
        if let Some((dwbar, db)) = grads {
            let (r, c) = self.dims();
            let dw = spectral_backward(
                store.value(self.weight),
                r,
                c,
                store.buffer(self.u),
                &cache.v,
                cache.sigma,
                &dwbar,
            );
            store.grad_mut(self.weight).iter_mut().zip(&dw).for_each(|(g, d)| *g += d);
            store.grad_mut(self.bias).iter_mut().zip(&db).for_each(|(g, d)| *g += d);
        }
        dx
    }
}

/// Top singular value by dense eigen-decomposition of `WᵀW` (cyclic Jacobi).
/// Independent of the power iteration above; used as a test oracle.
pub fn top_singular_value_dense(w: &[f64], rows: usize, cols: usize) -> f64 {
    let mut a = vec![0.0; cols * cols];
    for i in 0..cols {
        for j in 0..cols {
            a[i * cols + j] = (0..rows).map(|r| w[r * cols + i] * w[r * cols + j]).sum();
        }
    }
    for _sweep in 0..100 {
        let off: f64 = (0..cols)
            .flat_map(|i| (0..cols).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * cols + j].powi(2))
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..cols {
            for q in p + 1..cols {
                let apq = a[p * cols + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * cols + q] - a[p * cols + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * cs;
                for k in 0..cols {
                    let akp = a[k * cols + p];
                    let akq = a[k * cols + q];
                    a[k * cols + p] = cs * akp - sn * akq;
                    a[k * cols + q] = sn * akp + cs * akq;
                }
                for k in 0..cols {
                    let apk = a[p * cols + k];
                    let aqk = a[q * cols + k];
                    a[p * cols + k] = cs * apk - sn * aqk;
                    a[q * cols + k] = sn * apk + cs * aqk;
                }
            }
        }
    }
    (0..cols)
        .map(|i| a[i * cols + i])
        .fold(0.0f64, f64::max)
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_matrix_has_unit_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 5;
        let w: Vec<f64> = (0..n * n).map(|i| if i % (n + 1) == 0 { 1.0 } else { 0.0 }).collect();
        let mut u = init_unit(&mut rng, n);
        let (wn, sigma) = spectral_normalize(&w, n, n, &mut u, 10);
        assert!((sigma - 1.0).abs() < 1e-12);
        for (a, b) in wn.iter().zip(&w) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn normalization_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = init_uniform(&mut rng, 6 * 4, 1, 1.0);
        let w5: Vec<f64> = w.iter().map(|x| 5.0 * x).collect();
        let u0 = init_unit(&mut rng, 6);
        let (mut u1, mut u2) = (u0.clone(), u0);
        let (a, _) = spectral_normalize(&w, 6, 4, &mut u1, 100);
        let (b, _) = spectral_normalize(&w5, 6, 4, &mut u2, 100);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_matrix_is_guarded() {
        let mut u = vec![1.0, 0.0];
        let (wn, sigma) = spectral_normalize(&[0.0; 6], 2, 3, &mut u, 3);
        assert_eq!(sigma, SPECTRAL_EPS);
        assert!(wn.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn dense_oracle_on_diagonal() {
        let w = [3.0, 0.0, 0.0, 0.0, -7.0, 0.0];
        assert!((top_singular_value_dense(&w, 2, 3) - 7.0).abs() < 1e-12);
    }

    #[test]
    fn converged_normalization_has_unit_top_singular_value() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let w = init_uniform(&mut rng, 64, 1, 1.0);
            let mut u = init_unit(&mut rng, 8);
            let (wn, _) = spectral_normalize(&w, 8, 8, &mut u, 50);
            let s = top_singular_value_dense(&wn, 8, 8);
            assert!((s - 1.0).abs() < 1e-3, "seed {seed}: {s}");
        }
    }
}
