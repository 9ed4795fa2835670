use rand::Rng;

use super::gemm::gemm;
use super::params::{init_uniform, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Batched row-major activations: `rows` samples of `cols` features.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("Matrix::from_vec", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("Matrix::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Horizontal concatenation.
    pub fn hcat(a: &Matrix, b: &Matrix) -> Matrix {
        assert_eq!(a.rows, b.rows, "hcat rows");
        let mut out = Matrix::zeros(a.rows, a.cols + b.cols);
        for i in 0..a.rows {
            let r = out.row_mut(i);
            r[..a.cols].copy_from_slice(a.row(i));
            r[a.cols..].copy_from_slice(b.row(i));
        }
        out
    }
}

/// Fully connected layer `y = x·Wᵀ + b` with `W` stored `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            &[out_dim, in_dim],
            init_uniform(rng, in_dim * out_dim, in_dim, gain),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), &[out_dim], vec![0.0; out_dim]));
        Self {
            in_dim,
            out_dim,
            weight,
            bias,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Matrix) -> Result<Matrix> {
        if x.cols != self.in_dim {
            return Err(Error::shape("Linear::forward", self.in_dim, x.cols));
        }
        let mut y = Matrix::zeros(x.rows, self.out_dim);
        if let Some(b) = self.bias {
            let b = store.value(b);
            for i in 0..x.rows {
                y.row_mut(i).copy_from_slice(b);
            }
        }
        gemm(
            x.rows,
            self.in_dim,
            self.out_dim,
            &x.data,
            false,
            store.value(self.weight),
            true,
            1.0,
            &mut y.data,
        );
        Ok(y)
    }

    /// Accumulates parameter gradients; returns the input gradient.
    pub fn backward(&self, store: &mut ParamStore, x: &Matrix, dy: &Matrix) -> Matrix {
        if store.requires_grad() {
            let mut dw = vec![0.0; self.in_dim * self.out_dim];
            gemm(self.out_dim, x.rows, self.in_dim, &dy.data, true, &x.data, false, 0.0, &mut dw);
            store.grad_mut(self.weight).iter_mut().zip(&dw).for_each(|(g, d)| *g += d);
            if let Some(b) = self.bias {
                let gb = store.grad_mut(b);
                for i in 0..dy.rows {
                    gb.iter_mut().zip(dy.row(i)).for_each(|(g, d)| *g += d);
                }
            }
        }
        let mut dx = Matrix::zeros(x.rows, self.in_dim);
        gemm(x.rows, self.out_dim, self.in_dim, &dy.data, false, store.value(self.weight), false, 0.0, &mut dx.data);
        dx
    }

    /// Input gradient only; parameters are left untouched.
    pub fn input_grad(&self, store: &ParamStore, dy: &Matrix) -> Matrix {
        let mut dx = Matrix::zeros(dy.rows, self.in_dim);
        gemm(dy.rows, self.out_dim, self.in_dim, &dy.data, false, store.value(self.weight), false, 0.0, &mut dx.data);
        dx
    }
}
