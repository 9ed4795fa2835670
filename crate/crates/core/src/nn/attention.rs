//! Self-attention block with a zero-initialized residual gate:
//! `y = x + γ·(V·Aᵀ)`, `A = row_softmax(Qᵀ K)`.

use rand::Rng;

use super::gemm::gemm;
use super::params::{init_uniform, ParamId, ParamStore};
use super::tensor::Tensor4;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub channels: usize,
    pub key_channels: usize,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub gamma: ParamId,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    x: Tensor4,
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    attn: Vec<Vec<f64>>,
    o: Vec<Vec<f64>>,
}

impl AttentionCache {
    /// Row-stochastic attention matrix (L×L) of sample `i`.
    pub fn attention(&self, i: usize) -> &[f64] {
        &self.attn[i]
    }
}

/// `out (rows×L) = W (rows×c) · x (c×L) + b`
fn project(w: &[f64], b: &[f64], x: &[f64], rows: usize, c: usize, l: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * l];
    for (r, chunk) in out.chunks_mut(l).enumerate() {
        chunk.fill(b[r]);
    }
    gemm(rows, c, l, w, false, x, false, 1.0, &mut out);
    out
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        let kc = (channels / 8).max(1);
        let mut add = |suffix: &str, shape: &[usize], v: Vec<f64>| store.add(format!("{name}.{suffix}"), shape, v);
        let wq = add("query.weight", &[kc, channels], init_uniform(rng, kc * channels, channels, 1.0));
        let bq = add("query.bias", &[kc], vec![0.0; kc]);
        let wk = add("key.weight", &[kc, channels], init_uniform(rng, kc * channels, channels, 1.0));
        let bk = add("key.bias", &[kc], vec![0.0; kc]);
        let wv = add("value.weight", &[channels, channels], init_uniform(rng, channels * channels, channels, 1.0));
        let bv = add("value.bias", &[channels], vec![0.0; channels]);
        let gamma = add("gamma", &[1], vec![0.0]);
        Self {
            channels,
            key_channels: kc,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            gamma,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor4) -> Result<(Tensor4, AttentionCache)> {
        if x.c != self.channels {
            return Err(Error::shape("SelfAttention", self.channels, x.c));
        }
        let (c, kc, l) = (self.channels, self.key_channels, x.plane_len());
        let gamma = store.value(self.gamma)[0];
        let mut y = x.clone();
        let mut cache = AttentionCache {
            x: x.clone(),
            q: vec![],
            k: vec![],
            v: vec![],
            attn: vec![],
            o: vec![],
        };
        for i in 0..x.n {
            let xs = x.sample(i);
            let q = project(store.value(self.wq), store.value(self.bq), xs, kc, c, l);
            let k = project(store.value(self.wk), store.value(self.bk), xs, kc, c, l);
            let v = project(store.value(self.wv), store.value(self.bv), xs, c, c, l);
            // scores[i][j] = Σ_c q[c,i]·k[c,j]
            let mut a = vec![0.0; l * l];
            gemm(l, kc, l, &q, true, &k, false, 0.0, &mut a);
            for row in a.chunks_mut(l) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for e in row.iter_mut() {
                    *e = (*e - m).exp();
                    s += *e;
                }
                row.iter_mut().for_each(|e| *e /= s);
            }
            // o[c,i] = Σ_j v[c,j]·A[i][j]
            let mut o = vec![0.0; c * l];
            gemm(c, l, l, &v, false, &a, true, 0.0, &mut o);
            for (yv, ov) in y.sample_mut(i).iter_mut().zip(&o) {
                *yv += gamma * ov;
            }
            cache.q.push(q);
            cache.k.push(k);
            cache.v.push(v);
            cache.attn.push(a);
            cache.o.push(o);
        }
        Ok((y, cache))
    }

    pub fn backward(&self, store: &mut ParamStore, cache: &AttentionCache, dy: &Tensor4) -> Tensor4 {
        let (c, kc, l) = (self.channels, self.key_channels, dy.plane_len());
        let want = store.requires_grad();
        let gamma = store.value(self.gamma)[0];
        let mut dx = dy.clone();
        let mut dgamma = 0.0;
        let mut dwq = vec![0.0; kc * c];
        let mut dwk = vec![0.0; kc * c];
        let mut dwv = vec![0.0; c * c];
        let (mut dbq, mut dbk, mut dbv) = (vec![0.0; kc], vec![0.0; kc], vec![0.0; c]);
        for i in 0..dy.n {
            let g = dy.sample(i);
            let xs = cache.x.sample(i);
            let (q, k, v, a, o) = (&cache.q[i], &cache.k[i], &cache.v[i], &cache.attn[i], &cache.o[i]);
            dgamma += g.iter().zip(o).map(|(p, r)| p * r).sum::<f64>();
            if gamma == 0.0 && !want {
                continue;
            }
            let d_o: Vec<f64> = g.iter().map(|v| gamma * v).collect();
            // dv = dO · A
            let mut dv = vec![0.0; c * l];
            gemm(c, l, l, &d_o, false, a, false, 0.0, &mut dv);
            // dA = dOᵀ · V
            let mut da = vec![0.0; l * l];
            gemm(l, c, l, &d_o, true, v, false, 0.0, &mut da);
            // softmax backward, row-wise
            for (da_row, a_row) in da.chunks_mut(l).zip(a.chunks(l)) {
                let dot: f64 = da_row.iter().zip(a_row).map(|(p, r)| p * r).sum();
                for (d, &ar) in da_row.iter_mut().zip(a_row) {
                    *d = ar * (*d - dot);
                }
            }
            let ds = da;
            // dq[c,i] = Σ_j dS[i][j]·k[c,j];  dk[c,j] = Σ_i dS[i][j]·q[c,i]
            let mut dq = vec![0.0; kc * l];
            gemm(kc, l, l, k, false, &ds, true, 0.0, &mut dq);
            let mut dk = vec![0.0; kc * l];
            gemm(kc, l, l, q, false, &ds, false, 0.0, &mut dk);

            let dxs = dx.sample_mut(i);
            for (w, dp, rows) in [(self.wq, &dq, kc), (self.wk, &dk, kc), (self.wv, &dv, c)] {
                gemm(c, rows, l, store.value(w), true, dp, false, 1.0, dxs);
            }
            if want {
                gemm(kc, l, c, &dq, false, xs, true, 1.0, &mut dwq);
                gemm(kc, l, c, &dk, false, xs, true, 1.0, &mut dwk);
                gemm(c, l, c, &dv, false, xs, true, 1.0, &mut dwv);
                for (b, d) in [(&mut dbq, &dq), (&mut dbk, &dk), (&mut dbv, &dv)] {
                    for (bi, row) in b.iter_mut().zip(d.chunks(l)) {
                        *bi += row.iter().sum::<f64>();
                    }
                }
            }
        }
        if want {
            store.grad_mut(self.gamma)[0] += dgamma;
            for (id, d) in [
                (self.wq, &dwq),
                (self.wk, &dwk),
                (self.wv, &dwv),
                (self.bq, &dbq),
                (self.bk, &dbk),
                (self.bv, &dbv),
            ] {
                store.grad_mut(id).iter_mut().zip(d.iter()).for_each(|(g, v)| *g += v);
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fresh_block_is_exact_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let sa = SelfAttention::new(&mut store, "sa", 4, &mut rng);
        let x = Tensor4::from_vec(2, 4, 3, 3, init_uniform(&mut rng, 72, 1, 1.0)).unwrap();
        let (y, _) = sa.forward(&store, &x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let sa = SelfAttention::new(&mut store, "sa", 8, &mut rng);
        let x = Tensor4::from_vec(1, 8, 4, 4, init_uniform(&mut rng, 128, 1, 2.0)).unwrap();
        let (_, cache) = sa.forward(&store, &x).unwrap();
        for row in cache.attention(0).chunks(16) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}
